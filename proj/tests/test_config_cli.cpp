#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "codecsep/cli.hpp"
#include "codecsep/config.hpp"
#include "helpers.hpp"

#include <fstream>
#include <sstream>
#include <sys/wait.h>

using namespace codecsep;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

std::string read_file(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream s;
  s << in.rdbuf();
  return s.str();
}

void write_file(const fs::path& p, const std::string& text) { std::ofstream(p, std::ios::trunc) << text; }

std::vector<std::string> errors_of(const json& doc) { return validate_config(doc); }

bool mentions(const std::vector<std::string>& errs, const std::string& needle) {
  for (const auto& e : errs)
    if (e.find(needle) != std::string::npos) return true;
  return false;
}

struct Proc {
  int code = -1;
  std::string err;
};

// Runs the built binary with stderr captured to a file.
Proc run_binary(const std::string& args, const fs::path& dir) {
  const fs::path err = dir / "stderr.txt";
  const std::string cmd = std::string(CODECSEP_CLI_PATH) + " " + args + " > /dev/null 2> " + err.string();
  const int status = std::system(cmd.c_str());
  return {WIFEXITED(status) ? WEXITSTATUS(status) : -1, read_file(err)};
}

json tiny_config() {
  return json::parse(R"({
    "seed": 1,
    "data": {"train": 4, "valid": 2, "test": 2, "min_duration_s": 0.5, "max_duration_s": 0.6},
    "pretrain": {"steps": 4, "corpus_size": 4, "heldout_size": 2, "clip_s": 0.5, "crop_samples": 2048, "batch_size": 2},
    "train": {"epochs": 1, "batch_size": 2, "profile_seconds": 0.5}
  })");
}

}  // namespace

TEST_CASE("range errors name the field") {
  const auto errs = errors_of(json::parse(R"({"train": {"lr0": -1}})"));
  REQUIRE(errs.size() == 1);
  CHECK(mentions(errs, "train.lr0"));
  CHECK_THROWS_AS(parse_config(json::parse(R"({"train": {"lr0": -1}})")), ConfigError);
}

TEST_CASE("every error is reported") {
  const json doc = json::parse(R"({"train": {"lr0": -1, "patience": 0}, "separator": {"n_heads": "four"}, "bogus": 1})");
  const auto errs = errors_of(doc);
  CHECK(errs.size() == 4);
  CHECK(mentions(errs, "train.lr0"));
  CHECK(mentions(errs, "train.patience"));
  CHECK(mentions(errs, "separator.n_heads"));
  CHECK(mentions(errs, "bogus"));
  try {
    parse_config(doc);
    FAIL("expected ConfigError");
  } catch (const ConfigError& e) {
    CHECK(e.errors() == errs);
  }
}

TEST_CASE("cross-field checks") {
  CHECK(mentions(errors_of(json::parse(R"({"separator": {"codec_dim": 32}})")), "codec_dim"));
  CHECK(mentions(errors_of(json::parse(R"({"separator": {"d_model": 30}})")), "d_model"));
  CHECK(mentions(errors_of(json::parse(R"({"codec": {"activation": "elu"}, "separator": {"gating_activation": "snake"}})")),
                 "gating_activation"));
  CHECK(parse_config(json::parse(R"({"codec": {"activation": "elu"}})")).separator.gating_activation == Activation::elu);
  CHECK(errors_of(json::parse(R"({"codec": {"activation": "elu"}, "separator": {"gating_activation": "elu"}})")).empty());
  CHECK(mentions(errors_of(json::parse(R"({"data": {"min_duration_s": 2.0, "max_duration_s": 1.0}})")), "duration"));
  CHECK(mentions(errors_of(json::parse(R"({"codec": {"strides": [2, 4]}})")), "channels"));
  CHECK_FALSE(errors_of(json::parse("[1, 2]")).empty());
}

TEST_CASE("normalized config is idempotent") {
  std::mt19937_64 rng(4);
  for (int trial = 0; trial < 10; ++trial) {
    json doc = tiny_config();
    doc["seed"] = rng() % 1000;
    doc["train"]["lr0"] = 1e-4 * static_cast<double>(1 + rng() % 9);
    doc["separator"]["n_blocks"] = static_cast<int>(rng() % 3);
    const json once = parse_config(doc).to_json();
    CHECK(errors_of(once).empty());
    CHECK(parse_config(once).to_json() == once);
  }
}

TEST_CASE("section seeds inherit the top-level seed") {
  const AppConfig c = parse_config(json::parse(R"({"seed": 42, "codec": {"seed": 7}})"));
  CHECK(c.codec.seed == 7);
  CHECK(c.data.seed == 42);
  CHECK(c.separator.seed == 42);
  CHECK(c.train.seed == 42);
  CHECK(c.pretrain.options.seed == 42);
}

TEST_CASE("overrides") {
  json doc = json::parse(R"({"train": {"epochs": 3}})");
  apply_overrides(doc, {"train.epochs=5", "train.loss_type=waveform", "separator.positional_encoding=false",
                        "inputs.manifest=/tmp/x.jsonl"});
  CHECK(doc["train"]["epochs"] == 5);
  CHECK(doc["train"]["loss_type"] == "waveform");
  CHECK(doc["separator"]["positional_encoding"] == false);
  CHECK(doc["inputs"]["manifest"] == "/tmp/x.jsonl");
  CHECK_THROWS_AS(apply_overrides(doc, {"novalue"}), ConfigError);
}

TEST_CASE("unknown key exits with the config code and writes nothing") {
  const fs::path dir = testing::temp_dir("cli_unknown");
  write_file(dir / "bad.json", R"({"train": {"epochz": 3}})");
  CHECK(run({"gen-data", dir / "bad.json", {}, dir / "out"}) == kExitConfig);
  CHECK_FALSE(fs::exists(dir / "out"));

  const Proc p = run_binary("gen-data --config " + (dir / "bad.json").string() + " --out " + (dir / "out2").string(), dir);
  CHECK(p.code == 2);
  CHECK_FALSE(fs::exists(dir / "out2"));
  const json rec = json::parse(p.err);
  CHECK(rec["error"]["code"] == 2);
  CHECK(rec["error"]["kind"] == "config");
  CHECK(rec["error"]["messages"].size() == 1);

  write_file(dir / "broken.json", "{not json");
  CHECK(run({"gen-data", dir / "broken.json", {}, dir / "out3"}) == kExitConfig);
  fs::remove_all(dir);
}

TEST_CASE("missing inputs exit with the data code") {
  const fs::path dir = testing::temp_dir("cli_missing");
  CHECK(run({"train-sep", {}, {"inputs.codec=/nonexistent/codec.ckpt", "inputs.manifest=/nonexistent/m.jsonl"},
             dir / "out"}) == 3);
  CHECK(run({"eval", {}, {}, dir / "out2"}) == kExitConfig);
  CHECK(run({"explode", {}, {}, dir / "out3"}) == kExitConfig);
  fs::remove_all(dir);
}

TEST_CASE("pipeline end to end with provenance") {
  const fs::path dir = testing::temp_dir("cli_pipeline");
  write_file(dir / "tiny.json", tiny_config().dump());
  const fs::path cfg = dir / "tiny.json";
  REQUIRE(run({"gen-data", cfg, {}, dir / "data"}) == 0);
  for (const char* f : {"config.json", "provenance.json", "artifacts.json", "data/manifest.jsonl"})
    CHECK(fs::exists(dir / "data" / f));
  const json prov = json::parse(read_file(dir / "data" / "provenance.json"));
  CHECK(prov["seed"] == 1);
  CHECK(prov["command"] == "gen-data");

  // Re-running from the echoed config reproduces the manifest and its hashes.
  REQUIRE(run({"gen-data", dir / "data" / "config.json", {}, dir / "data_again"}) == 0);
  CHECK(read_file(dir / "data" / "data" / "manifest.jsonl") == read_file(dir / "data_again" / "data" / "manifest.jsonl"));
  CHECK(read_file(dir / "data" / "artifacts.json") == read_file(dir / "data_again" / "artifacts.json"));

  REQUIRE(run({"pretrain-codec", cfg, {}, dir / "codec"}) == 0);
  const std::string manifest = "inputs.manifest=" + (dir / "data" / "data" / "manifest.jsonl").string();
  const std::string codec = "inputs.codec=" + (dir / "codec" / "codec.ckpt").string();
  REQUIRE(run({"embed-cache", cfg, {manifest, codec}, dir / "cache"}) == 0);
  const std::string cache = "inputs.embed_cache=" + (dir / "cache" / "embed_cache").string();
  REQUIRE(run({"train-sep", cfg, {manifest, codec, cache, "train.loss_type=embedding"}, dir / "el"}) == 0);
  REQUIRE(run({"train-sep", cfg, {manifest, codec, "train.loss_type=waveform"}, dir / "wl"}) == 0);

  const Proc cost = run_binary("cost-report --config " + cfg.string() + " --set inputs.ledger_embedding=" +
                                   (dir / "el" / "ledger.jsonl").string() + " inputs.ledger_waveform=" +
                                   (dir / "wl" / "ledger.jsonl").string() + " --out " + (dir / "cost").string(),
                               dir);
  REQUIRE(cost.code == 0);
  const std::string csv = read_file(dir / "cost" / "cost_report.csv");
  CHECK(csv.find("decoder,0,") != std::string::npos);

  REQUIRE(run({"eval", cfg, {manifest, codec, "inputs.separator=" + (dir / "el" / "separator.ckpt").string()}, dir / "ev"}) ==
          0);
  CHECK(fs::exists(dir / "ev" / "summary.csv"));

  // Training reproduces byte for byte from its echoed config.
  REQUIRE(run({"train-sep", dir / "el" / "config.json", {}, dir / "el_again"}) == 0);
  CHECK(read_file(dir / "el" / "ledger.jsonl") == read_file(dir / "el_again" / "ledger.jsonl"));
  CHECK(read_file(dir / "el" / "separator.ckpt") == read_file(dir / "el_again" / "separator.ckpt"));

  // A codec that disagrees with the config's codec section is rejected.
  CHECK(run({"train-sep", cfg, {manifest, codec, "codec.seed=99"}, dir / "mismatch"}) == 3);
  fs::remove_all(dir);
}

TEST_CASE("default output root comes from the environment") {
  const fs::path dir = testing::temp_dir("cli_env");
  write_file(dir / "tiny.json", tiny_config().dump());
  ::setenv(kOutputRootEnv, dir.c_str(), 1);
  CHECK(run({"gen-data", dir / "tiny.json", {}, {}}) == 0);
  ::unsetenv(kOutputRootEnv);
  CHECK(fs::exists(dir / "gen-data" / "data" / "manifest.jsonl"));
  fs::remove_all(dir);
}
