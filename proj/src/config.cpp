#include "codecsep/config.hpp"

#include <cmath>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>

namespace codecsep {

namespace {

std::string join(const std::vector<std::string>& v) {
  std::string out;
  for (const auto& s : v) out += (out.empty() ? "" : "; ") + s;
  return out;
}

enum class Kind { integer, uinteger, number, boolean, string, int_list, enumeration };

struct Field {
  Kind kind;
  double min = -INFINITY;  // inclusive bound for numbers
  bool min_exclusive = false;
  double max = INFINITY;
  std::vector<std::string> choices;
};

Field integer(double min, double max = INFINITY) { return {Kind::integer, min, false, max, {}}; }
Field positive_number() { return {Kind::number, 0.0, true, INFINITY, {}}; }
Field number(double min, double max) { return {Kind::number, min, false, max, {}}; }
Field boolean() { return {Kind::boolean, -INFINITY, false, INFINITY, {}}; }
Field text() { return {Kind::string, -INFINITY, false, INFINITY, {}}; }
Field seed() { return {Kind::uinteger, 0, false, INFINITY, {}}; }
Field choice(std::vector<std::string> c) { return {Kind::enumeration, -INFINITY, false, INFINITY, std::move(c)}; }
Field int_list() { return {Kind::int_list, 1, false, INFINITY, {}}; }

using Section = std::map<std::string, Field>;

const std::map<std::string, Section>& schema() {
  static const std::map<std::string, Section> s{
      {"data",
       {{"train", integer(0)},
        {"valid", integer(0)},
        {"test", integer(0)},
        {"min_duration_s", number(0.5, INFINITY)},
        {"max_duration_s", number(0.5, INFINITY)},
        {"sample_rate_hz", integer(1)},
        {"num_speakers", integer(2)},
        {"gain_range_db", number(0.0, INFINITY)},
        {"seed", seed()}}},
      {"codec",
       {{"sample_rate_hz", integer(1)},
        {"strides", int_list()},
        {"channels", int_list()},
        {"embedding_dim", integer(1)},
        {"num_codebooks", integer(1)},
        {"codebook_size", integer(1)},
        {"activation", choice({"snake", "elu"})},
        {"snake_alpha", positive_number()},
        {"seed", seed()}}},
      {"pretrain",
       {{"steps", integer(0)},
        {"corpus_size", integer(1)},
        {"heldout_size", integer(1)},
        {"clip_s", number(0.5, INFINITY)},
        {"crop_samples", integer(1)},
        {"batch_size", integer(1)},
        {"lr", positive_number()},
        {"commit_weight", number(0.0, INFINITY)},
        {"mix_prob", number(0.0, 1.0)},
        {"log_window", integer(1)},
        {"seed", seed()}}},
      {"separator",
       {{"d_model", integer(1)},
        {"n_blocks", integer(0)},
        {"n_heads", integer(1)},
        {"ffn_dim", integer(1)},
        {"num_speakers", integer(2)},
        {"codec_dim", integer(1)},
        {"gating_activation", choice({"snake", "elu"})},
        {"snake_alpha", positive_number()},
        {"positional_encoding", boolean()},
        {"seed", seed()}}},
      {"train",
       {{"loss_type", choice({"embedding", "waveform"})},
        {"lr0", positive_number()},
        {"epochs", integer(0)},
        {"batch_size", integer(1)},
        {"patience", integer(1)},
        {"schedule_start_epoch", integer(0)},
        {"precompute_embeddings", boolean()},
        {"quantized_embeddings", boolean()},
        {"profile_seconds", positive_number()},
        {"seed", seed()}}},
      {"inputs",
       {{"manifest", text()},
        {"codec", text()},
        {"separator", text()},
        {"embed_cache", text()},
        {"ledger_embedding", text()},
        {"ledger_waveform", text()},
        {"timing_embedding", text()},
        {"timing_waveform", text()}}},
  };
  return s;
}

void check_field(const std::string& path, const Field& f, const nlohmann::json& v, std::vector<std::string>& errors) {
  auto range = [&](double x) {
    const bool low = f.min_exclusive ? !(x > f.min) : x < f.min;
    if (low || x > f.max) {
      std::ostringstream s;
      s << path << ": value " << x << " out of range (";
      s << (f.min_exclusive ? "must be > " : "must be >= ") << f.min;
      if (std::isfinite(f.max)) s << " and <= " << f.max;
      s << ")";
      errors.push_back(s.str());
    }
  };
  switch (f.kind) {
    case Kind::integer:
      if (!v.is_number_integer()) return errors.push_back(path + ": expected an integer");
      return range(static_cast<double>(v.get<std::int64_t>()));
    case Kind::uinteger:
      if (!v.is_number_unsigned()) errors.push_back(path + ": expected a non-negative integer");
      return;
    case Kind::number:
      if (!v.is_number()) return errors.push_back(path + ": expected a number");
      return range(v.get<double>());
    case Kind::boolean:
      if (!v.is_boolean()) errors.push_back(path + ": expected true or false");
      return;
    case Kind::string:
      if (!v.is_string()) errors.push_back(path + ": expected a string");
      return;
    case Kind::enumeration: {
      if (!v.is_string()) return errors.push_back(path + ": expected a string");
      for (const auto& c : f.choices)
        if (v.get<std::string>() == c) return;
      std::string opts;
      for (const auto& c : f.choices) opts += (opts.empty() ? "" : ", ") + c;
      return errors.push_back(path + ": '" + v.get<std::string>() + "' is not one of " + opts);
    }
    case Kind::int_list:
      if (!v.is_array() || v.empty()) return errors.push_back(path + ": expected a non-empty list of integers");
      for (const auto& x : v)
        if (!x.is_number_integer() || x.get<std::int64_t>() < 1)
          return errors.push_back(path + ": entries must be positive integers");
      return;
  }
}

template <typename T>
T get_or(const nlohmann::json& doc, const char* section, const char* key, T fallback) {
  if (!doc.contains(section) || !doc.at(section).is_object() || !doc.at(section).contains(key)) return fallback;
  return doc.at(section).at(key).get<T>();
}

// Cross-field rules; only run once the per-field checks passed.
void check_relations(const nlohmann::json& doc, std::vector<std::string>& errors) {
  const CodecConfig codec_defaults;
  const auto strides = get_or(doc, "codec", "strides", codec_defaults.strides);
  const auto channels = get_or(doc, "codec", "channels", codec_defaults.channels);
  if (channels.size() != strides.size() + 1)
    errors.push_back("codec.channels: needs " + std::to_string(strides.size() + 1) + " entries (one more than strides)");
  const int D = get_or(doc, "codec", "embedding_dim", codec_defaults.embedding_dim);
  const std::string act = get_or(doc, "codec", "activation", to_string(codec_defaults.activation));
  const int codec_rate = get_or(doc, "codec", "sample_rate_hz", codec_defaults.sample_rate_hz);

  const SeparatorConfig sep_defaults;
  const int d_model = get_or(doc, "separator", "d_model", sep_defaults.d_model);
  const int heads = get_or(doc, "separator", "n_heads", sep_defaults.n_heads);
  if (d_model % heads != 0) errors.push_back("separator.d_model: must be divisible by separator.n_heads");
  if (get_or(doc, "separator", "codec_dim", D) != D)
    errors.push_back("separator.codec_dim: must equal codec.embedding_dim (" + std::to_string(D) + ")");
  if (get_or(doc, "separator", "gating_activation", act) != act)
    errors.push_back("separator.gating_activation: must match codec.activation ('" + act + "')");
  const DatasetSpec data_defaults;
  const int speakers = get_or(doc, "data", "num_speakers", data_defaults.num_speakers);
  if (get_or(doc, "separator", "num_speakers", speakers) != speakers)
    errors.push_back("separator.num_speakers: must equal data.num_speakers (" + std::to_string(speakers) + ")");
  if (get_or(doc, "data", "max_duration_s", data_defaults.max_duration_s) <
      get_or(doc, "data", "min_duration_s", data_defaults.min_duration_s))
    errors.push_back("data.max_duration_s: must be >= data.min_duration_s");

  const PretrainOptions pre;
  const double clip_s = get_or(doc, "pretrain", "clip_s", 1.0);
  const auto crop = get_or<std::int64_t>(doc, "pretrain", "crop_samples", static_cast<std::int64_t>(pre.crop_samples));
  if (static_cast<double>(crop) > clip_s * codec_rate)
    errors.push_back("pretrain.crop_samples: longer than a pretraining clip (" +
                     std::to_string(static_cast<long long>(clip_s * codec_rate)) + " samples)");
}

}  // namespace

ConfigError::ConfigError(std::vector<std::string> errors) : std::runtime_error(join(errors)), errors_(std::move(errors)) {}

std::vector<std::string> validate_config(const nlohmann::json& doc) {
  std::vector<std::string> errors;
  if (!doc.is_object()) return {"config: top level must be a JSON object"};
  const auto& sch = schema();
  for (const auto& [key, value] : doc.items()) {
    if (key == "seed") {
      if (!value.is_number_unsigned()) errors.push_back("seed: expected a non-negative integer");
      continue;
    }
    if (key == "precision") {
      if (!value.is_string() || (value != "f64" && value != "f32")) errors.push_back("precision: must be 'f64' or 'f32'");
      continue;
    }
    const auto sec = sch.find(key);
    if (sec == sch.end()) {
      errors.push_back(key + ": unknown key");
      continue;
    }
    if (!value.is_object()) {
      errors.push_back(key + ": expected an object");
      continue;
    }
    for (const auto& [field, v] : value.items()) {
      const auto f = sec->second.find(field);
      if (f == sec->second.end()) {
        errors.push_back(key + "." + field + ": unknown key");
        continue;
      }
      check_field(key + "." + field, f->second, v, errors);
    }
  }
  if (errors.empty()) check_relations(doc, errors);
  return errors;
}

AppConfig parse_config(const nlohmann::json& doc) {
  auto errors = validate_config(doc);
  if (!errors.empty()) throw ConfigError(std::move(errors));
  AppConfig c;
  c.seed = doc.value("seed", std::uint64_t{0});
  c.precision = doc.value("precision", std::string("f64")) == "f32" ? Precision::f32 : Precision::f64;
  auto section = [&](const char* name) {
    nlohmann::json s = doc.contains(name) ? doc.at(name) : nlohmann::json::object();
    if (std::string(name) != "inputs" && !s.contains("seed")) s["seed"] = c.seed;
    return s;
  };
  try {
    c.data = DatasetSpec::from_json(section("data"));
    c.codec = CodecConfig::from_json(section("codec"));

    const auto p = section("pretrain");
    c.pretrain.steps = p.value("steps", c.pretrain.steps);
    c.pretrain.corpus_size = p.value("corpus_size", c.pretrain.corpus_size);
    c.pretrain.heldout_size = p.value("heldout_size", c.pretrain.heldout_size);
    c.pretrain.clip_s = p.value("clip_s", c.pretrain.clip_s);
    auto& o = c.pretrain.options;
    o.steps = c.pretrain.steps;
    o.batch_size = p.value("batch_size", o.batch_size);
    o.crop_samples = p.value("crop_samples", o.crop_samples);
    o.lr = p.value("lr", o.lr);
    o.commit_weight = p.value("commit_weight", o.commit_weight);
    o.mix_prob = p.value("mix_prob", o.mix_prob);
    o.log_window = p.value("log_window", o.log_window);
    o.seed = p.at("seed").get<std::uint64_t>();

    auto sep = section("separator");
    if (!sep.contains("codec_dim")) sep["codec_dim"] = c.codec.embedding_dim;
    if (!sep.contains("gating_activation")) sep["gating_activation"] = to_string(c.codec.activation);
    if (!sep.contains("num_speakers")) sep["num_speakers"] = c.data.num_speakers;
    c.separator = SeparatorConfig::from_json(sep);

    auto tr = section("train");
    tr["precision"] = c.precision == Precision::f32 ? "f32" : "f64";
    c.train = TrainConfig::from_json(tr);

    const auto in = section("inputs");
    c.inputs.manifest = in.value("manifest", "");
    c.inputs.codec = in.value("codec", "");
    c.inputs.separator = in.value("separator", "");
    c.inputs.embed_cache = in.value("embed_cache", "");
    c.inputs.ledger_embedding = in.value("ledger_embedding", "");
    c.inputs.ledger_waveform = in.value("ledger_waveform", "");
    c.inputs.timing_embedding = in.value("timing_embedding", "");
    c.inputs.timing_waveform = in.value("timing_waveform", "");
  } catch (const std::invalid_argument& e) {
    throw ConfigError({e.what()});
  }
  return c;
}

nlohmann::json AppConfig::to_json() const {
  nlohmann::json j;
  j["seed"] = seed;
  j["precision"] = precision == Precision::f32 ? "f32" : "f64";
  j["data"] = data.to_json();
  j["codec"] = codec.to_json();
  const auto& o = pretrain.options;
  j["pretrain"] = {{"steps", pretrain.steps},     {"corpus_size", pretrain.corpus_size},
                   {"heldout_size", pretrain.heldout_size}, {"clip_s", pretrain.clip_s},
                   {"crop_samples", o.crop_samples}, {"batch_size", o.batch_size},
                   {"lr", o.lr},                     {"commit_weight", o.commit_weight},
                   {"mix_prob", o.mix_prob},         {"log_window", o.log_window},
                   {"seed", o.seed}};
  j["separator"] = separator.to_json();
  auto tr = train.to_json();
  tr.erase("precision");
  j["train"] = tr;
  j["inputs"] = {{"manifest", inputs.manifest},
                 {"codec", inputs.codec},
                 {"separator", inputs.separator},
                 {"embed_cache", inputs.embed_cache},
                 {"ledger_embedding", inputs.ledger_embedding},
                 {"ledger_waveform", inputs.ledger_waveform},
                 {"timing_embedding", inputs.timing_embedding},
                 {"timing_waveform", inputs.timing_waveform}};
  return j;
}

nlohmann::json read_config_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError({"config: cannot open " + path.string()});
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError({"config: " + path.string() + ": " + e.what()});
  }
}

void apply_overrides(nlohmann::json& doc, const std::vector<std::string>& overrides) {
  std::vector<std::string> errors;
  for (const auto& o : overrides) {
    const auto eq = o.find('=');
    if (eq == std::string::npos || eq == 0) {
      errors.push_back("--set " + o + ": expected key=value");
      continue;
    }
    const std::string key = o.substr(0, eq);
    const std::string raw = o.substr(eq + 1);
    nlohmann::json value;
    try {
      value = nlohmann::json::parse(raw);
    } catch (const nlohmann::json::parse_error&) {
      value = raw;
    }
    nlohmann::json* node = &doc;
    std::size_t start = 0;
    while (true) {
      const auto dot = key.find('.', start);
      const std::string part = key.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
      if (dot == std::string::npos) {
        (*node)[part] = value;
        break;
      }
      if (!node->contains(part)) (*node)[part] = nlohmann::json::object();
      node = &(*node)[part];
      if (!node->is_object()) {
        errors.push_back("--set " + o + ": '" + part + "' is not a section");
        break;
      }
      start = dot + 1;
    }
  }
  if (!errors.empty()) throw ConfigError(std::move(errors));
}

}  // namespace codecsep
