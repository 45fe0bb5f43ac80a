// Acceptance suite: runs each criterion and prints one PASS/FAIL line per
// criterion. Pass criterion numbers as arguments to run a subset.
#include "codecsep/config.hpp"
#include "codecsep/losses.hpp"
#include "codecsep/metrics.hpp"
#include "codecsep/train.hpp"
#include "op_cases.hpp"

#include <nlohmann/json.hpp>

#include <chrono>
#include <cmath>
#include <fstream>
#include <functional>
#include <iostream>
#include <limits>
#include <map>
#include <numeric>
#include <set>
#include <sstream>
#include <sys/wait.h>

using namespace codecsep;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

std::string fmt(double v, int precision = 4) {
  std::ostringstream s;
  s.precision(precision);
  s << v;
  return s.str();
}

fs::path g_work;

std::string read_file(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream s;
  s << in.rdbuf();
  return s.str();
}

json read_json(const fs::path& p) { return json::parse(read_file(p)); }

// Runs the CLI binary; stdout and stderr go to <out>.log next to the run.
int cli(const std::string& command, const fs::path& config, const std::vector<std::string>& sets, const fs::path& out) {
  std::string cmd = std::string(CODECSEP_CLI_PATH) + " " + command;
  if (!config.empty()) cmd += " --config " + config.string();
  if (!sets.empty()) {
    cmd += " --set";
    for (const auto& s : sets) cmd += " '" + s + "'";
  }
  cmd += " --out " + out.string() + " > " + out.string() + ".log 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

void require_ok(int code, const std::string& what) {
  if (code != 0) throw std::runtime_error(what + " exited with code " + std::to_string(code));
}

// ---------------------------------------------------------------------------
// 1. Gradient suite

struct Composed {
  double error = 0.0;
  std::size_t over = 0;        // coordinates above tolerance
  double max_noise_ratio = 0;  // their |a-n| as a multiple of the central-difference round-off bound
};

// For coordinates above tolerance, measures |a-n| against u*|f|/eps, the size of the
// cancellation error in (f(x+eps)-f(x-eps))/(2*eps).
void diagnose(const std::function<Tensor()>& f, std::vector<Tensor>& leaves, double eps, double tol, Composed& c) {
  for (auto& leaf : leaves) {
    leaf.set_requires_grad(true);
    leaf.zero_grad();
  }
  {
    Tape tape;
    TapeScope scope(tape);
    tape.backward(f());
  }
  NoGradScope no_grad;
  const double u = std::numeric_limits<double>::epsilon() / 2.0;
  for (auto& leaf : leaves) {
    const std::vector<double> analytic(leaf.grad().begin(), leaf.grad().end());
    auto values = leaf.mutable_data();
    for (std::size_t i = 0; i < values.size(); ++i) {
      const double orig = values[i];
      values[i] = orig + eps;
      const double up = f().item();
      values[i] = orig - eps;
      const double down = f().item();
      values[i] = orig;
      const double n = (up - down) / (2.0 * eps);
      const double diff = std::abs(analytic[i] - n);
      if (diff / std::max({std::abs(analytic[i]), std::abs(n), 1e-12}) < tol) continue;
      ++c.over;
      c.max_noise_ratio = std::max(c.max_noise_ratio, diff / (u * std::max(std::abs(up), std::abs(down)) / eps));
    }
    leaf.set_requires_grad(false);
  }
}

// Every separator parameter is a leaf; the codec is frozen.
Composed composed_check(std::uint64_t seed, bool waveform) {
  CodecConfig cc;
  cc.strides = {2, 2};
  cc.channels = {2, 3, 4};
  cc.embedding_dim = 4;
  cc.num_codebooks = 1;
  cc.codebook_size = 4;
  cc.seed = seed;
  CodecModel codec(cc);
  codec.freeze();
  SeparatorConfig sc;
  sc.d_model = 4;
  sc.n_blocks = 1;
  sc.n_heads = 2;
  sc.ffn_dim = 4;
  sc.codec_dim = 4;
  sc.seed = seed;
  const Separator sep(sc);
  std::mt19937_64 rng(seed + 17);
  const Tensor mix = testing::random_tensor(rng, {3, 4}, false);
  const std::vector<Tensor> emb_targets{testing::random_tensor(rng, {3, 4}, false),
                                        testing::random_tensor(rng, {3, 4}, false)};
  const std::vector<Tensor> wave_targets{testing::random_tensor(rng, {12}, false),
                                         testing::random_tensor(rng, {12}, false)};
  std::vector<Tensor> leaves;
  for (const auto& p : sep.parameters()) leaves.push_back(p.value);
  const std::function<Tensor()> f = [&] {
    const auto est = sep.forward(mix);
    if (!waveform) return pit(mse_embedding_loss, est, emb_targets).loss_tensor;
    std::vector<Tensor> decoded;
    for (const auto& e : est) decoded.push_back(reshape(codec.decode_tensor(e), {12}));
    return pit([](const Tensor& a, const Tensor& b) { return neg(si_sdr(a, b)); }, decoded, wave_targets).loss_tensor;
  };
  Composed c;
  c.error = grad_check(f, leaves, 1e-5);
  if (c.error >= 1e-5) diagnose(f, leaves, 1e-5, 1e-5, c);
  return c;
}

Outcome criterion_gradients() {
  const auto t0 = Clock::now();
  double worst = 0.0;
  std::string worst_name;
  auto note = [&](double err, const std::string& name) {
    if (err > worst) {
      worst = err;
      worst_name = name;
    }
  };
  const auto cases = testing::op_cases();
  for (const auto& c : cases)
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
      std::mt19937_64 rng(seed + 100);
      note(c.check(rng, 1e-5), c.name);
    }
  std::size_t over = 0;
  double noise_ratio = 0.0;
  for (std::uint64_t seed = 0; seed < 20; ++seed)
    for (bool waveform : {false, true}) {
      const Composed c = composed_check(seed, waveform);
      note(c.error, waveform ? "separator+decoder+pit-sisdr" : "separator+pit-mse");
      over += c.over;
      noise_ratio = std::max(noise_ratio, c.max_noise_ratio);
    }
  const double secs = seconds_since(t0);
  std::string detail = std::to_string(cases.size()) + " ops + 2 composed graphs x 20 seeds, worst rel err " + fmt(worst) +
                       " (" + worst_name + "), " + fmt(secs, 3) + " s";
  if (over > 0)
    detail += "; " + std::to_string(over) + " composed coords over tolerance, max |a-n| = " + fmt(noise_ratio, 3) +
              " x central-difference round-off bound";
  return {worst < 1e-5 && secs < 120.0, detail};
}

// ---------------------------------------------------------------------------
// 2. PIT oracle

void exhaustive(const std::vector<std::vector<double>>& m, std::vector<std::size_t>& perm, std::vector<bool>& used,
                double& best, std::vector<std::size_t>& best_perm) {
  if (perm.size() == m.size()) {
    // Quad-precision accumulation is exact for these magnitudes; one rounding to double.
    __float128 q = 0;
    for (std::size_t k = 0; k < perm.size(); ++k) q += m[k][perm[k]];
    const double s = static_cast<double>(q) / static_cast<double>(m.size());
    if (s < best) {
      best = s;
      best_perm = perm;
    }
    return;
  }
  for (std::size_t j = 0; j < m.size(); ++j) {
    if (used[j]) continue;
    used[j] = true;
    perm.push_back(j);
    exhaustive(m, perm, used, best, best_perm);
    perm.pop_back();
    used[j] = false;
  }
}

// Estimates and targets carry their own index; the pair loss looks up the matrix.
PitResult pit_on_matrix(const std::vector<std::vector<double>>& m, PitSolver solver) {
  std::vector<Tensor> est, tgt;
  for (std::size_t i = 0; i < m.size(); ++i) {
    est.push_back(Tensor::scalar(static_cast<double>(i)));
    tgt.push_back(Tensor::scalar(static_cast<double>(i)));
  }
  const PairLoss lookup = [&](const Tensor& e, const Tensor& t) {
    return Tensor::scalar(m[static_cast<std::size_t>(e.item())][static_cast<std::size_t>(t.item())]);
  };
  return pit(lookup, est, tgt, solver);
}

Outcome criterion_pit() {
  std::mt19937_64 rng(2024);
  std::uniform_real_distribution<double> u(-5.0, 5.0);
  int mismatches = 0, hungarian_mismatches = 0, total = 0, hungarian_total = 0;
  for (std::size_t n = 2; n <= 5; ++n) {
    const int trials = 200;
    for (int t = 0; t < trials; ++t) {
      std::vector<std::vector<double>> m(n, std::vector<double>(n));
      for (auto& row : m)
        for (auto& v : row) v = u(rng);
      double best = std::numeric_limits<double>::infinity();
      std::vector<std::size_t> perm, best_perm;
      std::vector<bool> used(n, false);
      exhaustive(m, perm, used, best, best_perm);
      if (n <= 4) {
        ++total;
        const PitResult r = pit_on_matrix(m, PitSolver::enumerate);
        if (r.best_perm != best_perm || r.loss != best || std::abs(r.loss_tensor.item() - best) > 1e-15) ++mismatches;
      }
      ++hungarian_total;
      const PitResult h = pit_on_matrix(m, PitSolver::hungarian);
      if (h.best_perm != best_perm || h.loss != best) ++hungarian_mismatches;
    }
  }
  return {mismatches == 0 && hungarian_mismatches == 0,
          std::to_string(total) + " matrices (N=2..4) exact, " + std::to_string(mismatches) + " mismatches; Hungarian " +
              std::to_string(hungarian_total) + " matrices (N=2..5), " + std::to_string(hungarian_mismatches) +
              " mismatches"};
}

// ---------------------------------------------------------------------------
// 3. Embedding MSE semantics

Outcome criterion_mse() {
  const Tensor e = Tensor::from({2, 3}, {0.5, -1.25, 2, 3, -4, 0.75});
  const bool same = mse_embedding_loss(e, e).item() == 0.0;
  const bool offset = mse_embedding_loss(add_scalar(e, 1.0), e).item() == 1.0;
  const bool hand = mse_embedding_loss(Tensor::from({1, 2}, {1, 2}), Tensor::zeros({1, 2})).item() == 2.5;

  std::mt19937_64 rng(3);
  int violations = 0, cases = 0;
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t n = 2 + rng() % 3;
    std::vector<Tensor> est, tgt;
    for (std::size_t k = 0; k < n; ++k) {
      est.push_back(testing::random_tensor(rng, {5, 4}, false));
      tgt.push_back(testing::random_tensor(rng, {5, 4}, false));
    }
    const double base = pit(mse_embedding_loss, est, tgt).loss;
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::shuffle(order.begin(), order.end(), rng);
    std::vector<Tensor> shuffled;
    for (auto i : order) shuffled.push_back(tgt[i]);
    ++cases;
    if (pit(mse_embedding_loss, est, shuffled).loss != base) ++violations;
  }
  return {same && offset && hand && violations == 0,
          std::string("examples ") + (same ? "0 " : "X ") + (offset ? "1 " : "X ") + (hand ? "2.5" : "X") + "; " +
              std::to_string(violations) + "/" + std::to_string(cases) + " permutation-invariance violations"};
}

// ---------------------------------------------------------------------------
// 4. Evaluation protocol

Signal speech(std::uint64_t seed, double seconds) {
  const Waveform w = synthesize_source(seed, seconds, 8000);
  return {w.samples().begin(), w.samples().end()};
}

bool same_report(const MixtureReport& a, const MixtureReport& b) {
  return a.si_sdr == b.si_sdr && a.si_sdri == b.si_sdri && a.sdr == b.sdr && a.sdri == b.sdri && a.stoi == b.stoi &&
         a.stoi_mixture == b.stoi_mixture && a.mean_si_sdr == b.mean_si_sdr && a.mean_stoi == b.mean_stoi &&
         a.mean_sdri == b.mean_sdri && a.mean_si_sdri == b.mean_si_sdri;
}

Outcome criterion_protocol() {
  std::mt19937_64 rng(44);
  int wrong_perm = 0, unstable = 0;
  const int cases = 100;
  for (int c = 0; c < cases; ++c) {
    std::vector<Signal> refs;
    for (int k = 0; k < 3; ++k) refs.push_back(speech(10000 + 3 * static_cast<std::uint64_t>(c) + k, 1.0));
    Signal mix(refs[0].size(), 0.0);
    for (const auto& r : refs)
      for (std::size_t i = 0; i < mix.size(); ++i) mix[i] += r[i];
    std::vector<std::size_t> truth(3);
    std::iota(truth.begin(), truth.end(), 0);
    std::shuffle(truth.begin(), truth.end(), rng);
    std::normal_distribution<double> noise(0.0, 0.02 + 0.1 * static_cast<double>(rng() % 5));
    std::vector<Signal> est;
    for (std::size_t k = 0; k < 3; ++k) {
      Signal s(refs[truth[k]]);
      for (std::size_t i = 0; i < s.size(); ++i) s[i] = 0.7 * s[i] + 0.2 * mix[i] + noise(rng);
      est.push_back(std::move(s));
    }

    // Brute-force maximizer of mean SI-SDR.
    std::vector<std::size_t> p{0, 1, 2}, best;
    double best_score = -std::numeric_limits<double>::infinity();
    do {
      double s = 0.0;
      for (std::size_t k = 0; k < 3; ++k) s += si_sdr(est[k], refs[p[k]]);
      if (s > best_score) {
        best_score = s;
        best = p;
      }
    } while (std::next_permutation(p.begin(), p.end()));

    const MixtureReport r = evaluate_pair(est, refs, mix, 8000);
    if (r.permutation != best) ++wrong_perm;
    std::vector<std::size_t> order{0, 1, 2};
    std::shuffle(order.begin(), order.end(), rng);
    std::vector<Signal> reordered;
    for (auto i : order) reordered.push_back(est[i]);
    if (!same_report(r, evaluate_pair(reordered, refs, mix, 8000))) ++unstable;
  }
  return {wrong_perm == 0 && unstable == 0, std::to_string(cases) + " 3-speaker cases: " + std::to_string(wrong_perm) +
                                                " non-maximizing permutations, " + std::to_string(unstable) +
                                                " reports changed by reordering"};
}

// ---------------------------------------------------------------------------
// 5. Decoder-free training and cost accounting (CLI)

struct SmallRuns {
  fs::path config, data, codec, cache, el, wl, cost, eval;
  bool ready = false;
};
SmallRuns g_small;

void build_small_runs() {
  if (g_small.ready) return;
  SmallRuns& s = g_small;
  const fs::path root = g_work / "small";
  fs::create_directories(root);
  s.config = root / "small.json";
  std::ofstream(s.config) << R"({
    "seed": 7,
    "data": {"train": 6, "valid": 2, "test": 2, "min_duration_s": 1.0, "max_duration_s": 1.2},
    "pretrain": {"steps": 20, "corpus_size": 16, "heldout_size": 4, "clip_s": 0.5, "crop_samples": 2048},
    "train": {"epochs": 2, "batch_size": 2}
  })";
  s.data = root / "gen-data";
  s.codec = root / "pretrain-codec";
  s.cache = root / "embed-cache";
  s.el = root / "train-embedding";
  s.wl = root / "train-waveform";
  s.cost = root / "cost-report";
  s.eval = root / "eval";
  require_ok(cli("gen-data", s.config, {}, s.data), "gen-data");
  require_ok(cli("pretrain-codec", s.config, {}, s.codec), "pretrain-codec");
  const std::string manifest = "inputs.manifest=" + (s.data / "data" / "manifest.jsonl").string();
  const std::string codec = "inputs.codec=" + (s.codec / "codec.ckpt").string();
  require_ok(cli("embed-cache", s.config, {manifest, codec}, s.cache), "embed-cache");
  const std::string cache = "inputs.embed_cache=" + (s.cache / "embed_cache").string();
  require_ok(cli("train-sep", s.config, {manifest, codec, cache, "train.loss_type=embedding"}, s.el), "train-sep embedding");
  require_ok(cli("train-sep", s.config, {manifest, codec, cache, "train.loss_type=waveform"}, s.wl), "train-sep waveform");
  require_ok(cli("cost-report", s.config,
                 {"inputs.ledger_embedding=" + (s.el / "ledger.jsonl").string(),
                  "inputs.ledger_waveform=" + (s.wl / "ledger.jsonl").string(),
                  "inputs.timing_embedding=" + (s.el / "timing.jsonl").string(),
                  "inputs.timing_waveform=" + (s.wl / "timing.jsonl").string()},
                 s.cost),
             "cost-report");
  require_ok(cli("eval", s.config, {manifest, codec, "inputs.separator=" + (s.el / "separator.ckpt").string()}, s.eval),
             "eval");
  s.ready = true;
}

struct AnalyticMacs {
  std::uint64_t encoder = 0, separator = 0, decoder = 0;
};

// Closed-form forward MACs of one profiled step, from the layer shapes alone.
AnalyticMacs analytic_macs(const CodecConfig& c, const SeparatorConfig& s, std::uint64_t codec_samples) {
  const std::uint64_t S = static_cast<std::uint64_t>(c.total_stride());
  const std::uint64_t L = (codec_samples + S - 1) / S * S;
  const std::uint64_t T = L / S;
  const std::uint64_t D = static_cast<std::uint64_t>(c.embedding_dim);
  std::vector<std::uint64_t> ch(c.channels.begin(), c.channels.end());
  AnalyticMacs m;
  // encoder: 7-tap stem, 2s-tap strided stages, 3-tap projection
  std::uint64_t len = L;
  m.encoder += len * ch[0] * 7;
  for (std::size_t i = 0; i < c.strides.size(); ++i) {
    const std::uint64_t st = static_cast<std::uint64_t>(c.strides[i]);
    len /= st;
    m.encoder += len * ch[i + 1] * ch[i] * 2 * st;
  }
  m.encoder += T * D * ch.back() * 3;
  // decoder mirrors it with transposed convolutions, once per speaker
  std::uint64_t dec = T * ch.back() * D * 3;
  len = T;
  for (std::size_t i = c.strides.size(); i-- > 0;) {
    const std::uint64_t st = static_cast<std::uint64_t>(c.strides[i]);
    dec += len * ch[i + 1] * ch[i] * 2 * st;
    len *= st;
  }
  dec += len * ch[0] * 7;
  m.decoder = dec * static_cast<std::uint64_t>(s.num_speakers);
  const std::uint64_t d = static_cast<std::uint64_t>(s.d_model), f = static_cast<std::uint64_t>(s.ffn_dim),
                      n = static_cast<std::uint64_t>(s.num_speakers);
  const std::uint64_t block = 4 * T * d * d + 2 * T * T * d + 2 * T * d * f;
  m.separator = T * D * d + static_cast<std::uint64_t>(s.n_blocks) * block + T * d * D + T * D * n * D;
  return m;
}

Outcome criterion_decoder_free() {
  build_small_runs();
  const RunLedger el = RunLedger::read_jsonl(g_small.el / "ledger.jsonl");
  const RunLedger wl = RunLedger::read_jsonl(g_small.wl / "ledger.jsonl");
  bool ok = true;
  std::string why;
  auto expect = [&](bool cond, const std::string& what) {
    if (!cond) {
      ok = false;
      why += " [" + what + "]";
    }
  };
  for (const auto& e : el.epochs) expect(e.macs.scope_total("decoder") == 0 && !e.macs.scopes().count("decoder"),
                                         "embedding epoch ran decoder ops");
  for (const auto& e : wl.epochs) expect(e.macs.scope_total("decoder") > 0, "waveform epoch has no decoder MACs");
  expect(el.profile.macs.scope_total("decoder") == 0, "embedding profile decoder MACs");
  expect(wl.profile.macs.scope_total("decoder") > 0, "waveform profile decoder MACs");

  // Encoder and separator scope records must serialize identically.
  const json je = el.profile.to_json(), jw = wl.profile.to_json();
  for (const char* scope : {"encoder", "separator"}) {
    auto pick = [&](const json& j) { return j.at("macs").contains(scope) ? j.at("macs").at(scope).dump() : std::string(); };
    expect(!pick(je).empty() && pick(je) == pick(jw), std::string(scope) + " scope differs between paths");
  }

  const AppConfig cfg = parse_config(read_json(g_small.el / "config.json"));
  const AnalyticMacs a = analytic_macs(cfg.codec, cfg.separator, 32000);
  expect(el.profile.codec_samples == 32000 && el.profile.native_samples == 16000, "profile is not 2 s of 8 kHz audio");
  const CostReport r = cost_report(el, wl);
  expect(r.rows[0].macs_embed == a.encoder && r.rows[0].macs_wave == a.encoder, "encoder MACs != analytic");
  expect(r.rows[1].macs_embed == a.separator && r.rows[1].macs_wave == a.separator, "separator MACs != analytic");
  expect(r.rows[2].macs_embed == 0 && r.rows[2].macs_wave == a.decoder, "decoder MACs != analytic");
  expect(r.rows[3].macs_embed == 0 && r.rows[3].macs_wave == 0, "loss scope has MACs");
  const std::uint64_t embed_total = a.encoder + a.separator, wave_total = a.encoder + a.separator + a.decoder;
  expect(r.rows[4].macs_embed == embed_total && r.rows[4].macs_wave == wave_total, "totals != analytic");
  expect(r.rows[4].ratio == static_cast<double>(embed_total) / static_cast<double>(wave_total), "ratio != analytic");
  expect(embed_total < wave_total, "embedding path not cheaper");

  // The CLI's CSV must agree with the in-process report.
  std::istringstream csv(read_file(g_small.cost / "cost_report.csv"));
  std::string line;
  std::getline(csv, line);
  std::getline(csv, line);
  expect(line == "encoder," + std::to_string(a.encoder) + "," + std::to_string(a.encoder) + ",1", "CSV encoder row");

  const auto te = read_timing_jsonl(g_small.el / "timing.jsonl");
  const auto tw = read_timing_jsonl(g_small.wl / "timing.jsonl");
  auto mean_step = [](const std::vector<TimingRecord>& t) {
    double s = 0.0;
    for (const auto& r : t) s += r.seconds_per_step;
    return s / static_cast<double>(t.size());
  };
  const double se = mean_step(te), sw = mean_step(tw);
  expect(se < sw, "embedding step not faster");
  return {ok, "GMACs/step embed " + fmt(static_cast<double>(embed_total) / 1e9) + " vs wave " +
                  fmt(static_cast<double>(wave_total) / 1e9) + " (ratio " + fmt(r.rows[4].ratio) + ", decoder " +
                  std::to_string(a.decoder) + " MACs), s/step " + fmt(se) + " vs " + fmt(sw) + " (" + fmt(sw / se, 3) +
                  "x)" + why};
}

// ---------------------------------------------------------------------------
// 6. Desk-scale end-to-end run (CLI)

Outcome criterion_end_to_end() {
  const fs::path config = fs::path(CODECSEP_SOURCE_DIR) / "configs" / "toy.json";
  const fs::path root = g_work / "toy";
  fs::create_directories(root);
  const auto t0 = Clock::now();
  require_ok(cli("gen-data", config, {}, root / "gen-data"), "gen-data");
  const json manifest_rows = [&] {
    json rows = json::array();
    std::istringstream in(read_file(root / "gen-data" / "data" / "manifest.jsonl"));
    std::string line;
    while (std::getline(in, line))
      if (!line.empty()) rows.push_back(json::parse(line));
    return rows;
  }();
  require_ok(cli("pretrain-codec", config, {}, root / "pretrain-codec"), "pretrain-codec");
  const std::string manifest = "inputs.manifest=" + (root / "gen-data" / "data" / "manifest.jsonl").string();
  const std::string codec = "inputs.codec=" + (root / "pretrain-codec" / "codec.ckpt").string();
  require_ok(cli("embed-cache", config, {manifest, codec}, root / "embed-cache"), "embed-cache");
  const std::string cache = "inputs.embed_cache=" + (root / "embed-cache" / "embed_cache").string();
  require_ok(cli("train-sep", config, {manifest, codec, cache, "train.loss_type=embedding"}, root / "train-sep"),
             "train-sep");
  require_ok(cli("eval", config, {manifest, codec, "inputs.separator=" + (root / "train-sep" / "separator.ckpt").string()},
                 root / "eval"),
             "eval");
  const double secs = seconds_since(t0);

  const json pre = read_json(root / "pretrain-codec" / "pretrain.json");
  const RunLedger ledger = RunLedger::read_jsonl(root / "train-sep" / "ledger.jsonl");
  const json summary = read_json(root / "eval" / "summary.json");
  const double codec_sisdr = pre.at("heldout_median_si_sdr");
  const int steps = pre.at("steps");
  const double v0 = ledger.initial_valid_loss, v_end = ledger.epochs.back().valid_loss;
  const double sisdri = summary.at("si_sdri").at("mean"), stoi_est = summary.at("stoi").at("mean"),
               stoi_mix = summary.at("stoi_mixture").at("mean");

  const bool ok = manifest_rows.size() == 48 && steps == 2000 && codec_sisdr >= 5.0 && ledger.epochs.size() == 10 &&
                  v_end < 0.5 * v0 && sisdri > 0.0 && stoi_est >= stoi_mix && secs < 900.0;
  return {ok, std::to_string(manifest_rows.size()) + " mixtures; codec " + std::to_string(steps) +
                  " steps, held-out median SI-SDR " + fmt(codec_sisdr) + " dB; valid PIT-MSE " + fmt(v0) + " -> " +
                  fmt(v_end) + " (" + fmt(v_end / v0, 3) + "x) over " + std::to_string(ledger.epochs.size()) +
                  " epochs; test SI-SDRi " + fmt(sisdri) + " dB, STOI " + fmt(stoi_est) + " vs mixture " +
                  fmt(stoi_mix) + "; " + fmt(secs, 4) + " s"};
}

// ---------------------------------------------------------------------------
// 7. Scheduler trajectory

Outcome criterion_scheduler() {
  SchedulerState s = scheduler_init(1.5e-4);
  std::vector<double> losses{1.0, 0.9, 0.8, 0.7, 0.6, 0.5, 0.55, 0.6, 0.52};
  std::vector<double> lr_after;
  int first_halving = 0;
  for (std::size_t e = 0; e < losses.size(); ++e) {
    s = scheduler_step(s, losses[e]);
    lr_after.push_back(s.current_lr);
    if (s.halvings > 0 && first_halving == 0) first_halving = s.epoch;
  }
  bool ok = first_halving == 8 && lr_after[7] == 7.5e-5 && lr_after[8] == 7.5e-5;
  for (std::size_t e = 0; e < 7; ++e) ok = ok && lr_after[e] == 1.5e-4;
  return {ok, "first halving at epoch " + std::to_string(first_halving) + ", lr after epoch 7/8/9: " + fmt(lr_after[6]) +
                  " / " + fmt(lr_after[7]) + " / " + fmt(lr_after[8])};
}

// ---------------------------------------------------------------------------
// 8. STOI properties

Outcome criterion_stoi() {
  double self_min = 1.0, flip_min = 1.0;
  const std::vector<double> sigmas{0.005, 0.01, 0.02, 0.05};
  std::vector<std::vector<double>> scores(sigmas.size());
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const Signal r = speech(500 + seed, 2.0);
    self_min = std::min(self_min, stoi(r, r, 8000));
    Signal flipped(r);
    for (auto& v : flipped) v = -v;
    flip_min = std::min(flip_min, stoi(flipped, r, 8000));
    for (std::size_t i = 0; i < sigmas.size(); ++i) {
      std::mt19937_64 rng(seed);
      std::normal_distribution<double> n(0.0, sigmas[i]);
      Signal noisy(r);
      for (auto& v : noisy) v += n(rng);
      scores[i].push_back(stoi(noisy, r, 8000));
    }
  }
  std::vector<double> med;
  for (auto& s : scores) med.push_back(median(s));
  bool monotone = true;
  for (std::size_t i = 1; i < med.size(); ++i) monotone = monotone && med[i] <= med[i - 1];
  std::string trail;
  for (double m : med) trail += (trail.empty() ? "" : " > ") + fmt(m, 3);
  return {self_min >= 0.99 && flip_min >= 0.99 && monotone,
          "self min " + fmt(self_min) + ", sign-flip min " + fmt(flip_min) + ", medians over sigma " + trail};
}

// ---------------------------------------------------------------------------
// 9. Determinism and provenance (CLI)

std::map<std::string, std::string> deterministic_hashes(const fs::path& run) {
  std::map<std::string, std::string> out;
  const json doc = read_json(run / "artifacts.json");
  for (const auto& a : doc.at("artifacts"))
    if (a.at("deterministic").get<bool>()) out[a.at("path")] = a.at("fnv1a");
  return out;
}

Outcome criterion_determinism() {
  build_small_runs();
  const std::vector<std::pair<std::string, fs::path>> runs{
      {"gen-data", g_small.data},      {"pretrain-codec", g_small.codec}, {"embed-cache", g_small.cache},
      {"train-sep", g_small.el},       {"train-sep", g_small.wl},         {"cost-report", g_small.cost},
      {"eval", g_small.eval}};
  int compared = 0;
  std::string diffs;
  for (const auto& [command, dir] : runs) {
    const fs::path again = dir.string() + "-rerun";
    require_ok(cli(command, dir / "config.json", {}, again), command + " rerun");
    const auto a = deterministic_hashes(dir), b = deterministic_hashes(again);
    if (a.empty() || a != b) diffs += " " + dir.filename().string();
    compared += static_cast<int>(a.size());
    if (read_file(dir / "config.json") != read_file(again / "config.json")) diffs += " " + dir.filename().string() + "/config";
  }
  const RunLedger x = RunLedger::read_jsonl(g_small.el / "ledger.jsonl");
  const RunLedger y = RunLedger::read_jsonl(g_small.el.string() + "-rerun/ledger.jsonl");
  bool losses_equal = x.initial_valid_loss == y.initial_valid_loss && x.epochs.size() == y.epochs.size();
  for (std::size_t i = 0; losses_equal && i < x.epochs.size(); ++i)
    losses_equal = x.epochs[i].train_loss == y.epochs[i].train_loss && x.epochs[i].valid_loss == y.epochs[i].valid_loss;
  return {diffs.empty() && losses_equal, std::to_string(runs.size()) + " commands re-run from echoed configs, " +
                                             std::to_string(compared) + " deterministic artifacts compared" +
                                             (diffs.empty() ? ", all identical" : "; differing:" + diffs) +
                                             (losses_equal ? "; f64 losses identical" : "; losses differ")};
}

}  // namespace

int main(int argc, char** argv) {
  const std::vector<std::pair<int, std::function<Outcome()>>> criteria{
      {1, criterion_gradients}, {2, criterion_pit},       {3, criterion_mse},
      {4, criterion_protocol},  {5, criterion_decoder_free}, {6, criterion_end_to_end},
      {7, criterion_scheduler}, {8, criterion_stoi},      {9, criterion_determinism}};
  std::set<int> selected;
  for (int i = 1; i < argc; ++i) selected.insert(std::atoi(argv[i]));

  const char* env = std::getenv("CODECSEP_ACCEPTANCE_DIR");
  g_work = env && *env ? fs::path(env) : fs::current_path() / "acceptance_runs";
  fs::remove_all(g_work);
  fs::create_directories(g_work);

  int failures = 0;
  for (const auto& [id, run] : criteria) {
    if (!selected.empty() && !selected.count(id)) continue;
    const auto t0 = Clock::now();
    Outcome o;
    try {
      o = run();
    } catch (const std::exception& e) {
      o = {false, std::string("error: ") + e.what()};
    }
    if (!o.pass) ++failures;
    std::cout << "criterion " << id << ": " << (o.pass ? "PASS" : "FAIL") << " - " << o.detail << " ["
              << fmt(seconds_since(t0), 3) << " s]" << std::endl;
  }
  return failures == 0 ? 0 : 1;
}
