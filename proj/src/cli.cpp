#include "codecsep/cli.hpp"

#include "codecsep/config.hpp"
#include "codecsep/embedding_store.hpp"
#include "codecsep/metrics.hpp"
#include "codecsep/train.hpp"

#include <CLI11.hpp>
#include <Eigen/Core>
#include <fftw3.h>
#include <nlohmann/json.hpp>

#include <cstdlib>
#include <fstream>
#include <iostream>
#include <sstream>

namespace codecsep {

namespace fs = std::filesystem;

namespace {

constexpr const char* kVersion = "0.1.0";

class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct Artifact {
  fs::path path;
  bool deterministic = true;
};

std::string file_hash(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::uint64_t h = 1469598103934665603ULL;
  char c;
  while (in.get(c)) {
    h ^= static_cast<unsigned char>(c);
    h *= 1099511628211ULL;
  }
  return hash_hex(h);
}

void write_json(const fs::path& p, const nlohmann::json& j) {
  std::ofstream out(p, std::ios::trunc);
  if (!out) throw DataError("cannot write " + p.string());
  out << j.dump(2) << '\n';
}

const std::string& require(const std::string& value, const char* key, const std::string& command) {
  if (value.empty()) throw ConfigError({std::string("inputs.") + key + ": required by " + command});
  return value;
}

fs::path existing(const std::string& p) {
  if (!fs::exists(p)) throw DataError("input not found: " + p);
  return p;
}

CodecModel load_codec(const AppConfig& cfg, const std::string& command) {
  CodecModel codec = CodecModel::load(existing(require(cfg.inputs.codec, "codec", command)));
  if (codec.config().hash() != cfg.codec.hash())
    throw DataError("codec checkpoint " + cfg.inputs.codec + " does not match the codec section of the config");
  codec.freeze();
  return codec;
}

Manifest load_inputs_manifest(const AppConfig& cfg, const std::string& command) {
  return load_manifest(existing(require(cfg.inputs.manifest, "manifest", command)));
}

std::vector<Artifact> cmd_gen_data(const AppConfig& cfg, const fs::path& out, std::string& summary) {
  const Manifest m = generate_dataset(cfg.data, out / "data");
  std::vector<Artifact> a{{out / "data" / "manifest.jsonl"}};
  for (const auto& row : m.rows) {
    a.push_back({out / "data" / row.mix_path});
    for (const auto& s : row.src_paths) a.push_back({out / "data" / s});
  }
  summary = "gen-data: " + std::to_string(m.rows.size()) + " mixtures -> " + (out / "data" / "manifest.jsonl").string();
  return a;
}

std::vector<Artifact> cmd_pretrain(const AppConfig& cfg, const fs::path& out, std::string& summary) {
  const auto& p = cfg.pretrain;
  const auto corpus = make_codec_corpus(static_cast<std::size_t>(p.corpus_size), p.clip_s, cfg.codec.sample_rate_hz,
                                        p.options.seed);
  const auto heldout = make_codec_corpus(static_cast<std::size_t>(p.heldout_size), p.clip_s,
                                         cfg.codec.sample_rate_hz, p.options.seed + 1);
  PretrainResult result;
  CodecModel codec = [&] {
    PrecisionScope precision(cfg.precision);
    return pretrain_codec(cfg.codec, corpus, p.options, &result);
  }();
  codec.save(out / "codec.ckpt");

  std::vector<double> scores;
  {
    NoGradScope no_grad;
    for (const auto& w : heldout) scores.push_back(si_sdr(decode(codec, encode(codec, w)).samples(), w.samples()));
  }
  {
    std::ofstream losses(out / "pretrain_losses.jsonl", std::ios::trunc);
    for (std::size_t i = 0; i < result.step_losses.size(); ++i)
      losses << nlohmann::json{{"step", i + 1}, {"loss", result.step_losses[i]}}.dump() << '\n';
  }
  const double med = median(scores);
  write_json(out / "pretrain.json", {{"steps", p.steps},
                                     {"first_window_loss", result.first_window_loss},
                                     {"last_window_loss", result.last_window_loss},
                                     {"heldout_median_si_sdr", med},
                                     {"heldout_si_sdr", scores},
                                     {"codec_hash", hash_hex(codec.config().hash())}});
  std::ostringstream s;
  s << "pretrain-codec: " << p.steps << " steps, held-out median SI-SDR " << med << " dB -> "
    << (out / "codec.ckpt").string();
  summary = s.str();
  return {{out / "codec.ckpt"}, {out / "pretrain.json"}, {out / "pretrain_losses.jsonl"}};
}

std::vector<SeparationItem> all_items(const Manifest& m, int rate) {
  std::vector<SeparationItem> items;
  for (const char* split : {"train", "valid", "test"}) {
    auto part = load_split(m, split, rate);
    for (auto& it : part) items.push_back(std::move(it));
  }
  return items;
}

std::vector<Artifact> cmd_embed_cache(const AppConfig& cfg, const fs::path& out, std::string& summary) {
  const CodecModel codec = load_codec(cfg, "embed-cache");
  const Manifest m = load_inputs_manifest(cfg, "embed-cache");
  const auto items = all_items(m, codec.config().sample_rate_hz);
  const auto entries = store_entries(items);
  const EmbeddingStore store = precompute_target_embeddings(codec, entries, out / "embed_cache");
  std::vector<Artifact> a{{out / "embed_cache" / "store.json"}, {out / "embed_cache" / "index.jsonl"}};
  summary = "embed-cache: " + std::to_string(store.size()) + " embeddings -> " + (out / "embed_cache").string();
  return a;
}

std::vector<Artifact> cmd_train(const AppConfig& cfg, const fs::path& out, std::string& summary) {
  const CodecModel codec = load_codec(cfg, "train-sep");
  const Manifest m = load_inputs_manifest(cfg, "train-sep");
  const int rate = codec.config().sample_rate_hz;
  auto train = load_split(m, "train", rate);
  auto valid = load_split(m, "valid", rate);
  if (train.empty() || valid.empty()) throw DataError("train-sep needs non-empty train and valid splits");
  if (!cfg.inputs.embed_cache.empty()) {
    const EmbeddingStore store = EmbeddingStore::open(existing(cfg.inputs.embed_cache), codec.config());
    attach_embeddings(train, codec, &store);
    attach_embeddings(valid, codec, &store);
  } else if (cfg.train.precompute_embeddings) {
    attach_embeddings(train, codec);
    attach_embeddings(valid, codec);
  }

  Separator sep(cfg.separator);
  SeparatorTrainer trainer(sep, codec, cfg.train);
  std::vector<TimingRecord> timings;
  while (trainer.epochs_done() < cfg.train.epochs) {
    TimingRecord t;
    trainer.run_epoch(train, valid, &t);
    timings.push_back(t);
    // Keep the last good state on disk in case a later epoch diverges.
    trainer.save_checkpoint(out / "train_state.ckpt");
  }
  const RunLedger ledger = trainer.fit(train, valid);
  save_bundle(out / "separator.ckpt", sep.to_bundle(), Dtype::f64);
  if (cfg.train.epochs == 0) trainer.save_checkpoint(out / "train_state.ckpt");
  ledger.write_jsonl(out / "ledger.jsonl");
  write_timing_jsonl(timings, out / "timing.jsonl");

  const double final_valid = ledger.epochs.empty() ? ledger.initial_valid_loss : ledger.epochs.back().valid_loss;
  std::ostringstream s;
  s << "train-sep (" << to_string(cfg.train.loss_type) << "): " << ledger.epochs.size() << " epochs, valid loss "
    << ledger.initial_valid_loss << " -> " << final_valid << ", decoder MACs/step "
    << ledger.profile.macs.scope_total("decoder");
  summary = s.str();
  return {{out / "separator.ckpt"}, {out / "train_state.ckpt"}, {out / "ledger.jsonl"}, {out / "timing.jsonl", false}};
}

std::vector<Artifact> cmd_eval(const AppConfig& cfg, const fs::path& out, std::string& summary) {
  const CodecModel codec = load_codec(cfg, "eval");
  const Manifest m = load_inputs_manifest(cfg, "eval");
  const TensorBundle b = load_bundle(existing(require(cfg.inputs.separator, "separator", "eval")));
  // Accept both a bare separator checkpoint and a training-state checkpoint.
  Separator sep(SeparatorConfig::from_json(b.config.at("separator")));
  sep.load_values(b);
  if (sep.config().codec_dim != codec.config().embedding_dim)
    throw DataError("separator checkpoint expects D=" + std::to_string(sep.config().codec_dim));
  const auto test = load_split(m, "test", codec.config().sample_rate_hz);
  if (test.empty()) throw DataError("eval: test split is empty");
  const auto reports = evaluate_separator(sep, codec, test, cfg.train.quantized_embeddings);
  const EvalSummary s = summarize(reports);
  write_report_jsonl(reports, s, out / "report.jsonl");
  write_summary_csv(s, out / "summary.csv");
  write_json(out / "summary.json", s.to_json());
  std::ostringstream line;
  line << "eval: " << s.count << " mixtures, SI-SDRi " << s.si_sdri.mean << " dB, STOI " << s.stoi.mean
       << " (mixture " << s.stoi_mixture.mean << ")";
  summary = line.str();
  return {{out / "report.jsonl"}, {out / "summary.csv"}, {out / "summary.json"}};
}

std::optional<double> mean_step_seconds(const std::string& path) {
  if (path.empty()) return std::nullopt;
  const auto t = read_timing_jsonl(existing(path));
  if (t.empty()) return std::nullopt;
  double s = 0.0;
  for (const auto& r : t) s += r.seconds_per_step;
  return s / static_cast<double>(t.size());
}

std::vector<Artifact> cmd_cost_report(const AppConfig& cfg, const fs::path& out, std::string& summary) {
  const RunLedger a = RunLedger::read_jsonl(existing(require(cfg.inputs.ledger_embedding, "ledger_embedding", "cost-report")));
  const RunLedger b = RunLedger::read_jsonl(existing(require(cfg.inputs.ledger_waveform, "ledger_waveform", "cost-report")));
  CostReport r;
  try {
    r = cost_report(a, b);
  } catch (const std::invalid_argument& e) {
    throw DataError(e.what());
  }
  r.seconds_per_step_embed = mean_step_seconds(cfg.inputs.timing_embedding);
  r.seconds_per_step_wave = mean_step_seconds(cfg.inputs.timing_waveform);
  r.write_csv(out / "cost_report.csv");
  write_json(out / "cost_report.json", r.to_json());
  {
    std::ofstream t(out / "cost_table.txt", std::ios::trunc);
    t << r.table_rows();
  }
  std::ostringstream s;
  s << "cost-report: total MAC ratio (embedding/waveform) " << r.rows.back().ratio << ", decoder MACs "
    << r.rows[2].macs_embed << " vs " << r.rows[2].macs_wave;
  summary = s.str();
  const bool timed = r.seconds_per_step_embed || r.seconds_per_step_wave;
  return {{out / "cost_report.csv"}, {out / "cost_report.json", !timed}, {out / "cost_table.txt", !timed}};
}

nlohmann::json error_record(int code, const std::string& kind, const std::vector<std::string>& messages) {
  return {{"error", {{"code", code}, {"kind", kind}, {"messages", messages}}}};
}

}  // namespace

int run(const RunSpec& spec, const std::vector<std::string>& argv) {
  using Handler = std::vector<Artifact> (*)(const AppConfig&, const fs::path&, std::string&);
  static const std::map<std::string, Handler> handlers{
      {"gen-data", cmd_gen_data},       {"pretrain-codec", cmd_pretrain}, {"train-sep", cmd_train},
      {"eval", cmd_eval},               {"cost-report", cmd_cost_report}, {"embed-cache", cmd_embed_cache}};
  auto fail = [](int code, const std::string& kind, const std::vector<std::string>& messages) {
    std::cerr << error_record(code, kind, messages).dump() << std::endl;
    return code;
  };
  try {
    const auto h = handlers.find(spec.command);
    if (h == handlers.end()) throw ConfigError({"unknown command '" + spec.command + "'"});
    nlohmann::json doc = spec.config_path.empty() ? nlohmann::json::object() : read_config_file(spec.config_path);
    apply_overrides(doc, spec.overrides);
    const AppConfig cfg = parse_config(doc);
    const nlohmann::json normalized = cfg.to_json();

    fs::path out = spec.output_dir;
    if (out.empty()) {
      const char* root = std::getenv(kOutputRootEnv);
      out = fs::path(root && *root ? root : "runs") / spec.command;
    }
    fs::create_directories(out);
    write_json(out / "config.json", normalized);
    write_json(out / "provenance.json", {{"tool", "codecsep"},
                                         {"version", kVersion},
                                         {"command", spec.command},
                                         {"argv", argv},
                                         {"config_hash", hash_hex(config_hash(normalized))},
                                         {"seed", cfg.seed},
                                         {"container_version", kContainerVersion},
                                         {"compiler", __VERSION__},
                                         {"eigen", std::to_string(EIGEN_WORLD_VERSION) + "." +
                                                       std::to_string(EIGEN_MAJOR_VERSION) + "." +
                                                       std::to_string(EIGEN_MINOR_VERSION)},
                                         {"fftw", std::string(fftw_version)}});

    std::string summary;
    const auto artifacts = h->second(cfg, out, summary);
    nlohmann::json list = nlohmann::json::array();
    for (const auto& a : artifacts) {
      if (!fs::exists(a.path)) continue;
      list.push_back({{"path", fs::relative(a.path, out).generic_string()},
                      {"bytes", fs::file_size(a.path)},
                      {"fnv1a", file_hash(a.path)},
                      {"deterministic", a.deterministic}});
    }
    write_json(out / "artifacts.json", {{"command", spec.command}, {"artifacts", list}});
    std::cout << summary << '\n' << "artifacts: " << (out / "artifacts.json").string() << std::endl;
    return kExitOk;
  } catch (const ConfigError& e) {
    return fail(kExitConfig, "config", e.errors());
  } catch (const NumericError& e) {
    return fail(kExitNumeric, "numeric", {e.what()});
  } catch (const DataError& e) {
    return fail(kExitData, "data", {e.what()});
  } catch (const WavError& e) {
    return fail(kExitData, "data", {e.what()});
  } catch (const FormatError& e) {
    return fail(kExitData, "data", {e.what()});
  } catch (const StoreMismatchError& e) {
    return fail(kExitData, "data", {e.what()});
  } catch (const fs::filesystem_error& e) {
    return fail(kExitData, "data", {e.what()});
  } catch (const std::exception& e) {
    return fail(kExitFailure, "internal", {e.what()});
  }
}

int cli_main(int argc, char** argv) {
  CLI::App app{"Embedding-loss training toolkit for codec-based speech separation"};
  app.require_subcommand(1);
  RunSpec spec;
  std::string loss;
  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--config", spec.config_path, "JSON config file");
    sub->add_option("--set", spec.overrides, "Override, e.g. train.epochs=3")->take_all();
    sub->add_option("--out", spec.output_dir, std::string("Output directory (default $") + kOutputRootEnv + "/<command>)");
  };
  const std::pair<const char*, const char*> commands[] = {
      {"gen-data", "Generate the synthetic mixture dataset and manifest"},
      {"pretrain-codec", "Pretrain and freeze the toy codec"},
      {"embed-cache", "Precompute codec embeddings for a manifest"},
      {"eval", "Separate and score a split"},
      {"cost-report", "Compare MACs and step time of two training ledgers"}};
  for (const auto& [name, about] : commands) add_common(app.add_subcommand(name, about));
  auto* train = app.add_subcommand("train-sep", "Train the separator");
  add_common(train);
  train->add_option("--loss", loss, "embedding or waveform")->check(CLI::IsMember({"embedding", "waveform"}));

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << error_record(kExitConfig, "config", {e.what()}).dump() << std::endl;
    return kExitConfig;
  }
  spec.command = app.get_subcommands().front()->get_name();
  if (!loss.empty()) spec.overrides.push_back("train.loss_type=\"" + loss + "\"");
  return run(spec, std::vector<std::string>(argv, argv + argc));
}

}  // namespace codecsep
