#include "codecsep/train.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <numeric>
#include <random>
#include <sstream>

namespace codecsep {

std::string to_string(LossType t) { return t == LossType::embedding ? "embedding" : "waveform"; }

LossType loss_type_from_string(const std::string& s) {
  if (s == "embedding") return LossType::embedding;
  if (s == "waveform") return LossType::waveform;
  throw std::invalid_argument("unknown loss type '" + s + "' (expected embedding or waveform)");
}

int default_batch_size(LossType t) { return t == LossType::embedding ? 8 : 2; }

void TrainConfig::validate() const {
  if (!(lr0 > 0.0) || !std::isfinite(lr0)) throw std::invalid_argument("train.lr0 must be positive");
  if (epochs < 0) throw std::invalid_argument("train.epochs must be >= 0");
  if (batch_size < 1) throw std::invalid_argument("train.batch_size must be >= 1");
  if (patience < 1) throw std::invalid_argument("train.patience must be >= 1");
  if (schedule_start_epoch < 0) throw std::invalid_argument("train.schedule_start_epoch must be >= 0");
  if (!(profile_seconds > 0.0)) throw std::invalid_argument("train.profile_seconds must be positive");
}

nlohmann::json TrainConfig::to_json() const {
  return {{"loss_type", to_string(loss_type)},
          {"lr0", lr0},
          {"epochs", epochs},
          {"batch_size", batch_size},
          {"patience", patience},
          {"schedule_start_epoch", schedule_start_epoch},
          {"seed", seed},
          {"precompute_embeddings", precompute_embeddings},
          {"quantized_embeddings", quantized_embeddings},
          {"profile_seconds", profile_seconds},
          {"precision", precision == Precision::f64 ? "f64" : "f32"}};
}

TrainConfig TrainConfig::from_json(const nlohmann::json& j) {
  TrainConfig c;
  c.loss_type = loss_type_from_string(j.value("loss_type", to_string(c.loss_type)));
  c.batch_size = default_batch_size(c.loss_type);
  c.lr0 = j.value("lr0", c.lr0);
  c.epochs = j.value("epochs", c.epochs);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.patience = j.value("patience", c.patience);
  c.schedule_start_epoch = j.value("schedule_start_epoch", c.schedule_start_epoch);
  c.seed = j.value("seed", c.seed);
  c.precompute_embeddings = j.value("precompute_embeddings", c.precompute_embeddings);
  c.quantized_embeddings = j.value("quantized_embeddings", c.quantized_embeddings);
  c.profile_seconds = j.value("profile_seconds", c.profile_seconds);
  const std::string p = j.value("precision", std::string("f64"));
  if (p != "f64" && p != "f32") throw std::invalid_argument("train.precision must be f64 or f32");
  c.precision = p == "f64" ? Precision::f64 : Precision::f32;
  c.validate();
  return c;
}

// ---------------------------------------------------------------------------
// Data

std::vector<SeparationItem> load_split(const Manifest& manifest, const std::string& split, int codec_rate_hz) {
  std::vector<SeparationItem> items;
  for (const ManifestRow* row : manifest.split(split)) {
    const Waveform mix = read_wav(manifest.root / row->mix_path);
    SeparationItem item{row->id, resample(mix, codec_rate_hz), {}, {mix.samples().begin(), mix.samples().end()}, {},
                        mix.sample_rate_hz(), {}, {}};
    for (const auto& p : row->src_paths) {
      const Waveform s = read_wav(manifest.root / p);
      if (s.size() != mix.size()) throw WavError(WavError::Kind::malformed, "source length differs from mixture: " + p);
      item.sources.push_back(resample(s, codec_rate_hz));
      item.sources_native.emplace_back(s.samples().begin(), s.samples().end());
    }
    items.push_back(std::move(item));
  }
  return items;
}

std::string mixture_key(const std::string& id) { return id + "/mix"; }
std::string source_key(const std::string& id, std::size_t k) { return id + "/s" + std::to_string(k + 1); }

std::vector<std::pair<std::string, Waveform>> store_entries(const std::vector<SeparationItem>& items) {
  std::vector<std::pair<std::string, Waveform>> out;
  for (const auto& item : items) {
    out.emplace_back(mixture_key(item.id), item.mixture);
    for (std::size_t k = 0; k < item.sources.size(); ++k) out.emplace_back(source_key(item.id, k), item.sources[k]);
  }
  return out;
}

void attach_embeddings(std::vector<SeparationItem>& items, const CodecModel& codec, const EmbeddingStore* store) {
  NoGradScope no_grad;
  auto get = [&](const std::string& key, const Waveform& w) {
    if (store) {
      if (!store->contains(key)) throw StoreMismatchError("embedding store has no entry '" + key + "'");
      return store->load(key).frames;
    }
    return encode(codec, w).frames;
  };
  for (auto& item : items) {
    item.mix_embedding = get(mixture_key(item.id), item.mixture);
    item.target_embeddings.clear();
    for (std::size_t k = 0; k < item.sources.size(); ++k)
      item.target_embeddings.push_back(get(source_key(item.id, k), item.sources[k]));
  }
}

// ---------------------------------------------------------------------------
// Ledger serialization

namespace {

constexpr OpKind kLastOp = OpKind::snake;

OpKind op_from_name(const std::string& name) {
  for (int k = 0; k <= static_cast<int>(kLastOp); ++k)
    if (op_name(static_cast<OpKind>(k)) == name) return static_cast<OpKind>(k);
  throw FormatError("unknown op kind '" + name + "' in ledger");
}

nlohmann::json macs_to_json(const MacCounter& c) {
  nlohmann::json j = nlohmann::json::object();
  for (const auto& [scope, table] : c.scopes()) {
    nlohmann::json ops = nlohmann::json::object();
    for (const auto& [kind, tally] : table) ops[std::string(op_name(kind))] = {{"calls", tally.calls}, {"macs", tally.macs}};
    j[scope] = {{"macs", c.scope_total(scope)}, {"ops", ops}};
  }
  return j;
}

MacCounter macs_from_json(const nlohmann::json& j) {
  MacCounter c;
  for (const auto& [scope, body] : j.items())
    for (const auto& [name, tally] : body.at("ops").items()) {
      const OpKind kind = op_from_name(name);
      c.add_tally(scope, kind, {tally.at("calls").get<std::uint64_t>(), tally.at("macs").get<std::uint64_t>()});
    }
  return c;
}

nlohmann::json finite_or_null(double v) { return std::isfinite(v) ? nlohmann::json(v) : nlohmann::json(nullptr); }

}  // namespace

nlohmann::json CostProfile::to_json() const {
  return {{"native_samples", native_samples},
          {"codec_samples", codec_samples},
          {"frames", frames},
          {"num_speakers", num_speakers},
          {"macs", macs_to_json(macs)}};
}

CostProfile CostProfile::from_json(const nlohmann::json& j) {
  CostProfile p;
  p.native_samples = j.at("native_samples").get<std::size_t>();
  p.codec_samples = j.at("codec_samples").get<std::size_t>();
  p.frames = j.at("frames").get<std::size_t>();
  p.num_speakers = j.at("num_speakers").get<int>();
  p.macs = macs_from_json(j.at("macs"));
  return p;
}

void RunLedger::write_jsonl(const std::filesystem::path& path) const {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  for (const auto& e : epochs)
    out << nlohmann::json{{"epoch", e.epoch},
                          {"train_loss", e.train_loss},
                          {"valid_loss", e.valid_loss},
                          {"lr", e.lr},
                          {"next_lr", e.next_lr},
                          {"halvings", e.halvings},
                          {"steps", e.steps},
                          {"macs", macs_to_json(e.macs)}}
               .dump()
        << '\n';
  out << nlohmann::json{{"summary",
                         {{"loss_type", to_string(loss_type)},
                          {"initial_valid_loss", initial_valid_loss},
                          {"final_valid_loss", epochs.empty() ? initial_valid_loss : epochs.back().valid_loss},
                          {"epochs", epochs.size()},
                          {"profile", profile.to_json()}}}}
             .dump()
      << '\n';
}

RunLedger RunLedger::read_jsonl(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot read ledger " + path.string());
  RunLedger l;
  bool have_summary = false;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::parse_error& e) {
      throw FormatError("ledger " + path.string() + ": " + e.what());
    }
    if (j.contains("summary")) {
      const auto& s = j.at("summary");
      l.loss_type = loss_type_from_string(s.at("loss_type").get<std::string>());
      l.initial_valid_loss = s.at("initial_valid_loss").get<double>();
      l.profile = CostProfile::from_json(s.at("profile"));
      have_summary = true;
      continue;
    }
    EpochRecord e;
    e.epoch = j.at("epoch").get<int>();
    e.train_loss = j.at("train_loss").get<double>();
    e.valid_loss = j.at("valid_loss").get<double>();
    e.lr = j.at("lr").get<double>();
    e.next_lr = j.at("next_lr").get<double>();
    e.halvings = j.at("halvings").get<int>();
    e.steps = j.at("steps").get<std::size_t>();
    e.macs = macs_from_json(j.at("macs"));
    l.epochs.push_back(std::move(e));
  }
  if (!have_summary) throw FormatError("ledger " + path.string() + " has no summary line");
  return l;
}

std::vector<TimingRecord> read_timing_jsonl(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot read timing file " + path.string());
  std::vector<TimingRecord> out;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto j = nlohmann::json::parse(line);
    out.push_back({j.at("epoch").get<int>(), j.at("seconds").get<double>(), j.at("seconds_per_step").get<double>()});
  }
  return out;
}

void write_timing_jsonl(const std::vector<TimingRecord>& t, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  for (const auto& r : t)
    out << nlohmann::json{{"epoch", r.epoch}, {"seconds", r.seconds}, {"seconds_per_step", r.seconds_per_step}}.dump()
        << '\n';
}

// ---------------------------------------------------------------------------
// Trainer

namespace {

Tensor prepare_embedding(const CodecModel& codec, const Tensor& frames, bool quantized) {
  if (!quantized) return frames;
  NoGradScope no_grad;
  return rvq_quantize(codec, frames).quantized.detach();
}

// Mixture embedding, encoded on the fly when the item carries none.
Tensor mixture_embedding(const CodecModel& codec, const SeparationItem& item, bool quantized) {
  if (item.mix_embedding.defined()) return prepare_embedding(codec, item.mix_embedding, quantized);
  MacScope scope("encoder");
  return prepare_embedding(codec, encode(codec, item.mixture).frames, quantized);
}

std::vector<Tensor> target_embeddings(const CodecModel& codec, const SeparationItem& item, bool quantized) {
  std::vector<Tensor> out;
  if (!item.target_embeddings.empty()) {
    for (const auto& t : item.target_embeddings) out.push_back(prepare_embedding(codec, t, quantized));
    return out;
  }
  MacScope scope("target_encoder");
  for (const auto& s : item.sources) out.push_back(prepare_embedding(codec, encode(codec, s).frames, quantized));
  return out;
}

PitResult path_loss(const Separator& sep, const CodecModel& codec, LossType type, const Tensor& mix,
                    const std::vector<Tensor>& embedded_targets, const std::vector<Tensor>& wave_targets,
                    std::size_t length) {
  std::vector<Tensor> est;
  {
    MacScope scope("separator");
    est = sep.forward(mix);
  }
  if (type == LossType::embedding) {
    MacScope scope("loss");
    return pit([](const Tensor& e, const Tensor& t) { return mse_embedding_loss(e, t); }, est, embedded_targets);
  }
  std::vector<Tensor> decoded;
  {
    MacScope scope("decoder");
    for (const auto& e : est) decoded.push_back(decode_to_length(codec, e, length));
  }
  MacScope scope("loss");
  return pit([](const Tensor& e, const Tensor& t) { return neg(si_sdr(e, t)); }, decoded, wave_targets);
}

}  // namespace

SeparatorTrainer::SeparatorTrainer(Separator& sep, const CodecModel& codec, TrainConfig cfg)
    : sep_(sep), codec_(codec), cfg_(std::move(cfg)) {
  cfg_.validate();
  if (!codec_.frozen()) throw std::invalid_argument("separator training needs a frozen codec");
  if (sep_.config().codec_dim != codec_.config().embedding_dim)
    throw std::invalid_argument("separator codec_dim differs from the codec embedding dimension");
  const auto p = params();
  adam_ = adam_init(p);
  sched_ = scheduler_init(cfg_.lr0);
}

std::vector<Tensor> SeparatorTrainer::params() const {
  std::vector<Tensor> out;
  for (auto& p : sep_.parameters()) out.push_back(p.value);
  return out;
}

PitResult SeparatorTrainer::item_loss(const SeparationItem& item) const {
  const Tensor mix = mixture_embedding(codec_, item, cfg_.quantized_embeddings);
  std::vector<Tensor> emb_targets, wave_targets;
  if (cfg_.loss_type == LossType::embedding) {
    emb_targets = target_embeddings(codec_, item, cfg_.quantized_embeddings);
  } else {
    for (const auto& s : item.sources)
      wave_targets.push_back(Tensor::from({s.size()}, {s.samples().begin(), s.samples().end()}));
  }
  return path_loss(sep_, codec_, cfg_.loss_type, mix, emb_targets, wave_targets, item.mixture.size());
}

double SeparatorTrainer::train_step(const std::vector<const SeparationItem*>& batch) {
  if (batch.empty()) throw std::invalid_argument("train_step: empty batch");
  PrecisionScope precision(cfg_.precision);
  auto ps = params();
  for (auto& p : ps) p.zero_grad();
  Tape tape;
  TapeScope scope(tape);
  Tensor total;
  for (const SeparationItem* item : batch) {
    Tensor l = item_loss(*item).loss_tensor;
    total = total.defined() ? add(total, l) : l;
  }
  Tensor loss = mul_scalar(total, 1.0 / static_cast<double>(batch.size()));
  const double value = loss.item();
  if (!std::isfinite(value)) throw NumericError("training loss is not finite at step " + std::to_string(steps_));
  tape.backward(loss);
  adam_step(ps, adam_, sched_.current_lr);
  ++steps_;
  return value;
}

double SeparatorTrainer::evaluate_loss(const std::vector<SeparationItem>& items) const {
  if (items.empty()) throw std::invalid_argument("evaluate_loss: no items");
  PrecisionScope precision(cfg_.precision);
  NoGradScope no_grad;
  double total = 0.0;
  for (const auto& item : items) total += item_loss(item).loss;
  return total / static_cast<double>(items.size());
}

EpochRecord SeparatorTrainer::run_epoch(const std::vector<SeparationItem>& train,
                                        const std::vector<SeparationItem>& valid, TimingRecord* timing) {
  if (train.empty()) throw std::invalid_argument("run_epoch: empty training split");
  if (!initial_valid_) initial_valid_ = evaluate_loss(valid);
  const int epoch = sched_.epoch + 1;
  std::vector<std::size_t> order(train.size());
  std::iota(order.begin(), order.end(), 0);
  std::mt19937_64 rng(cfg_.seed * 1000003ULL + static_cast<std::uint64_t>(epoch));
  std::shuffle(order.begin(), order.end(), rng);

  EpochRecord rec;
  rec.epoch = epoch;
  rec.lr = sched_.current_lr;
  const auto t0 = std::chrono::steady_clock::now();
  double loss_sum = 0.0;
  {
    CountingScope counting(rec.macs);
    for (std::size_t i = 0; i < order.size(); i += static_cast<std::size_t>(cfg_.batch_size)) {
      std::vector<const SeparationItem*> batch;
      for (std::size_t j = i; j < std::min(order.size(), i + static_cast<std::size_t>(cfg_.batch_size)); ++j)
        batch.push_back(&train[order[j]]);
      loss_sum += train_step(batch);
      ++rec.steps;
    }
  }
  const double seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  rec.train_loss = loss_sum / static_cast<double>(rec.steps);
  rec.valid_loss = evaluate_loss(valid);
  sched_ = scheduler_step(sched_, rec.valid_loss, cfg_.patience, cfg_.schedule_start_epoch);
  rec.next_lr = sched_.current_lr;
  rec.halvings = sched_.halvings;
  if (timing) *timing = {epoch, seconds, seconds / static_cast<double>(rec.steps)};
  history_.push_back(rec);
  return rec;
}

RunLedger SeparatorTrainer::fit(const std::vector<SeparationItem>& train, const std::vector<SeparationItem>& valid,
                                std::vector<TimingRecord>* timings) {
  while (sched_.epoch < cfg_.epochs) {
    TimingRecord t;
    run_epoch(train, valid, &t);
    if (timings) timings->push_back(t);
  }
  RunLedger ledger;
  ledger.loss_type = cfg_.loss_type;
  ledger.initial_valid_loss = initial_valid_ ? *initial_valid_ : evaluate_loss(valid);
  ledger.epochs = history_;
  ledger.profile = profile_training_step(sep_, codec_, cfg_.loss_type, cfg_.profile_seconds);
  return ledger;
}

void SeparatorTrainer::save_checkpoint(const std::filesystem::path& path) const {
  TensorBundle b = sep_.to_bundle();
  b.config["kind"] = "train_state";
  b.config["train"] = cfg_.to_json();
  b.config["codec_hash"] = hash_hex(codec_.config().hash());
  b.config["adam_t"] = adam_.t;
  b.config["steps"] = steps_;
  b.config["scheduler"] = {{"lr0", sched_.lr0},
                           {"current_lr", sched_.current_lr},
                           {"best_valid_loss", finite_or_null(sched_.best_valid_loss)},
                           {"epochs_since_improvement", sched_.epochs_since_improvement},
                           {"epoch", sched_.epoch},
                           {"halvings", sched_.halvings}};
  b.config["initial_valid_loss"] = initial_valid_ ? nlohmann::json(*initial_valid_) : nlohmann::json(nullptr);
  b.config["history"] = nlohmann::json::array();
  for (const auto& e : history_)
    b.config["history"].push_back({{"epoch", e.epoch},
                                   {"train_loss", e.train_loss},
                                   {"valid_loss", e.valid_loss},
                                   {"lr", e.lr},
                                   {"next_lr", e.next_lr},
                                   {"halvings", e.halvings},
                                   {"steps", e.steps},
                                   {"macs", macs_to_json(e.macs)}});
  const auto ps = sep_.parameters();
  for (std::size_t i = 0; i < ps.size(); ++i) {
    b.tensors.push_back({"adam.m." + ps[i].name, Tensor::from(ps[i].value.shape(), adam_.m[i])});
    b.tensors.push_back({"adam.v." + ps[i].name, Tensor::from(ps[i].value.shape(), adam_.v[i])});
  }
  save_bundle(path, b, Dtype::f64);
}

void SeparatorTrainer::load_checkpoint(const std::filesystem::path& path) {
  const TensorBundle b = load_bundle(path);
  if (b.config.value("kind", "") != "train_state") throw FormatError(path.string() + " is not a training checkpoint");
  if (b.config.at("separator") != sep_.config().to_json())
    throw FormatError("checkpoint separator configuration differs from the trainer's");
  if (b.config.at("codec_hash").get<std::string>() != hash_hex(codec_.config().hash()))
    throw FormatError("checkpoint was trained against a different codec configuration");
  if (config_hash(b.config.at("train")) != config_hash(cfg_.to_json()))
    throw FormatError("checkpoint training configuration hash differs");
  sep_.load_values(b);
  const auto ps = sep_.parameters();
  for (std::size_t i = 0; i < ps.size(); ++i) {
    const auto m = b.get("adam.m." + ps[i].name).data();
    const auto v = b.get("adam.v." + ps[i].name).data();
    adam_.m[i].assign(m.begin(), m.end());
    adam_.v[i].assign(v.begin(), v.end());
  }
  adam_.t = b.config.at("adam_t").get<std::int64_t>();
  steps_ = b.config.at("steps").get<std::size_t>();
  const auto& s = b.config.at("scheduler");
  sched_.lr0 = s.at("lr0").get<double>();
  sched_.current_lr = s.at("current_lr").get<double>();
  sched_.best_valid_loss = s.at("best_valid_loss").is_null() ? std::numeric_limits<double>::infinity()
                                                             : s.at("best_valid_loss").get<double>();
  sched_.epochs_since_improvement = s.at("epochs_since_improvement").get<int>();
  sched_.epoch = s.at("epoch").get<int>();
  sched_.halvings = s.at("halvings").get<int>();
  const auto& iv = b.config.at("initial_valid_loss");
  initial_valid_ = iv.is_null() ? std::nullopt : std::optional<double>(iv.get<double>());
  history_.clear();
  for (const auto& j : b.config.at("history")) {
    EpochRecord e;
    e.epoch = j.at("epoch").get<int>();
    e.train_loss = j.at("train_loss").get<double>();
    e.valid_loss = j.at("valid_loss").get<double>();
    e.lr = j.at("lr").get<double>();
    e.next_lr = j.at("next_lr").get<double>();
    e.halvings = j.at("halvings").get<int>();
    e.steps = j.at("steps").get<std::size_t>();
    e.macs = macs_from_json(j.at("macs"));
    history_.push_back(std::move(e));
  }
}

// ---------------------------------------------------------------------------
// Cost accounting

CostProfile profile_training_step(const Separator& sep, const CodecModel& codec, LossType loss_type, double seconds,
                                  int native_rate_hz) {
  const auto n = static_cast<std::size_t>(std::llround(seconds * native_rate_hz));
  const int spk = sep.config().num_speakers;
  // Synthetic references; only the shapes matter for the counts.
  std::vector<Waveform> native;
  for (int k = 0; k < spk; ++k) native.push_back(synthesize_source(1000 + static_cast<std::uint64_t>(k), seconds, native_rate_hz));
  std::vector<double> mix(n, 0.0);
  for (const auto& w : native)
    for (std::size_t i = 0; i < n; ++i) mix[i] += 0.5 * w.samples()[i];
  SeparationItem item{"profile", resample(Waveform(mix, native_rate_hz), codec.config().sample_rate_hz), {}, mix, {},
                      native_rate_hz, {}, {}};
  for (const auto& w : native) item.sources.push_back(resample(w, codec.config().sample_rate_hz));
  {
    NoGradScope no_grad;
    for (const auto& s : item.sources) item.target_embeddings.push_back(encode(codec, s).frames);
  }

  CostProfile p;
  p.native_samples = n;
  p.codec_samples = item.mixture.size();
  p.num_speakers = spk;
  {
    CountingScope counting(p.macs);
    NoGradScope no_grad;
    const Tensor mixture = mixture_embedding(codec, item, false);
    p.frames = mixture.dim(0);
    std::vector<Tensor> wave_targets;
    for (const auto& s : item.sources) wave_targets.push_back(Tensor::from({s.size()}, {s.samples().begin(), s.samples().end()}));
    path_loss(sep, codec, loss_type, mixture, item.target_embeddings, wave_targets, item.mixture.size());
  }
  return p;
}

namespace {

double ratio_of(std::uint64_t a, std::uint64_t b) {
  if (a == 0 && b == 0) return 1.0;
  if (b == 0) return std::numeric_limits<double>::infinity();
  return static_cast<double>(a) / static_cast<double>(b);
}

}  // namespace

CostReport cost_report(const RunLedger& embed, const RunLedger& wave) {
  const auto& a = embed.profile;
  const auto& b = wave.profile;
  if (a.native_samples != b.native_samples || a.codec_samples != b.codec_samples || a.frames != b.frames ||
      a.num_speakers != b.num_speakers)
    throw std::invalid_argument("cost_report: ledgers were profiled on different input shapes");
  CostReport r;
  for (const char* scope : {"encoder", "separator", "decoder", "loss"}) {
    const auto x = a.macs.scope_total(scope), y = b.macs.scope_total(scope);
    r.rows.push_back({scope, x, y, ratio_of(x, y)});
  }
  r.rows.push_back({"total", a.macs.total(), b.macs.total(), ratio_of(a.macs.total(), b.macs.total())});
  return r;
}

void CostReport::write_csv(const std::filesystem::path& path) const {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << "scope,macs_embed,macs_wave,ratio\n";
  out << std::setprecision(17);
  for (const auto& r : rows) out << r.scope << ',' << r.macs_embed << ',' << r.macs_wave << ',' << r.ratio << '\n';
}

std::string CostReport::table_rows() const {
  const auto& total = rows.back();
  std::ostringstream s;
  s << std::fixed << std::setprecision(3);
  s << "Model | Loss | GMACs | s/step\n";
  auto secs = [](const std::optional<double>& v) {
    std::ostringstream o;
    if (v) o << std::fixed << std::setprecision(4) << *v;
    else o << "-";
    return o.str();
  };
  s << "Codecformer | waveform | " << static_cast<double>(total.macs_wave) / 1e9 << " | " << secs(seconds_per_step_wave)
    << '\n';
  s << "Codecformer-EL | embedding | " << static_cast<double>(total.macs_embed) / 1e9 << " | "
    << secs(seconds_per_step_embed) << '\n';
  return s.str();
}

nlohmann::json CostReport::to_json() const {
  nlohmann::json j;
  j["rows"] = nlohmann::json::array();
  for (const auto& r : rows)
    j["rows"].push_back({{"scope", r.scope}, {"macs_embed", r.macs_embed}, {"macs_wave", r.macs_wave},
                         {"ratio", finite_or_null(r.ratio)}});
  j["gmacs_embed"] = static_cast<double>(rows.back().macs_embed) / 1e9;
  j["gmacs_wave"] = static_cast<double>(rows.back().macs_wave) / 1e9;
  j["seconds_per_step_embed"] = seconds_per_step_embed ? nlohmann::json(*seconds_per_step_embed) : nlohmann::json(nullptr);
  j["seconds_per_step_wave"] = seconds_per_step_wave ? nlohmann::json(*seconds_per_step_wave) : nlohmann::json(nullptr);
  return j;
}

// ---------------------------------------------------------------------------
// Evaluation

std::vector<MixtureReport> evaluate_separator(const Separator& sep, const CodecModel& codec,
                                              const std::vector<SeparationItem>& items, bool quantized_embeddings) {
  NoGradScope no_grad;
  std::vector<MixtureReport> reports;
  for (const auto& item : items) {
    const Tensor mix = mixture_embedding(codec, item, quantized_embeddings);
    std::vector<Signal> estimates;
    for (const auto& e : sep.forward(mix)) {
      const Tensor y = decode_to_length(codec, e, item.mixture.size());
      Signal native = resample(y.data(), codec.config().sample_rate_hz, item.native_rate_hz);
      native.resize(item.mixture_native.size(), 0.0);
      estimates.push_back(std::move(native));
    }
    reports.push_back(evaluate_pair(estimates, item.sources_native, item.mixture_native, item.native_rate_hz, item.id));
  }
  return reports;
}

}  // namespace codecsep
