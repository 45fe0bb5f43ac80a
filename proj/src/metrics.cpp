#include "codecsep/metrics.hpp"

#include "codecsep/losses.hpp"

#include <fftw3.h>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <mutex>
#include <numbers>
#include <numeric>

namespace codecsep {

namespace {

constexpr double kEps = 1e-8;

void check_lengths(std::span<const double> a, std::span<const double> b, const char* what) {
  if (a.size() != b.size()) throw std::invalid_argument(std::string(what) + ": signals differ in length");
  if (a.empty()) throw std::invalid_argument(std::string(what) + ": empty signals");
}

}  // namespace

double si_sdr(std::span<const double> estimate, std::span<const double> reference) {
  check_lengths(estimate, reference, "si_sdr");
  const double n = static_cast<double>(reference.size());
  const double me = std::accumulate(estimate.begin(), estimate.end(), 0.0) / n;
  const double mr = std::accumulate(reference.begin(), reference.end(), 0.0) / n;
  double dot = 0.0, ref_energy = 0.0;
  for (std::size_t i = 0; i < reference.size(); ++i) {
    dot += (estimate[i] - me) * (reference[i] - mr);
    ref_energy += (reference[i] - mr) * (reference[i] - mr);
  }
  if (!(ref_energy > 0.0)) throw std::invalid_argument("si_sdr: reference has zero energy after mean removal");
  const double scale = dot / ref_energy;
  double target = 0.0, noise = 0.0;
  for (std::size_t i = 0; i < reference.size(); ++i) {
    const double t = scale * (reference[i] - mr);
    const double e = (estimate[i] - me) - t;
    target += t * t;
    noise += e * e;
  }
  return 10.0 * std::log10((target + kEps) / (noise + kEps));
}

double sdr(std::span<const double> estimate, std::span<const double> reference) {
  check_lengths(estimate, reference, "sdr");
  double ref_energy = 0.0, err = 0.0;
  for (std::size_t i = 0; i < reference.size(); ++i) {
    ref_energy += reference[i] * reference[i];
    err += (reference[i] - estimate[i]) * (reference[i] - estimate[i]);
  }
  if (!(ref_energy > 0.0)) throw std::invalid_argument("sdr: reference is all zeros");
  return 10.0 * std::log10((ref_energy + kEps) / (err + kEps));
}

double improvement(double metric_value, double mixture_baseline) { return metric_value - mixture_baseline; }

// ---------------------------------------------------------------------------
// STOI

namespace {

constexpr int kStoiRate = 10000;
constexpr std::size_t kFrame = 256;
constexpr std::size_t kHop = kFrame / 2;
constexpr std::size_t kFft = 512;
constexpr std::size_t kBands = 15;
constexpr double kMinFreq = 150.0;
constexpr std::size_t kSegment = 30;
constexpr double kBetaDb = -15.0;
constexpr double kDynRangeDb = 40.0;
const double kMachineEps = std::numeric_limits<double>::epsilon();

std::vector<double> hann_interior(std::size_t n) {
  // Hann window of length n + 2 with both zero endpoints dropped.
  std::vector<double> w(n);
  for (std::size_t i = 0; i < n; ++i)
    w[i] = 0.5 - 0.5 * std::cos(2.0 * std::numbers::pi * static_cast<double>(i + 1) / static_cast<double>(n + 1));
  return w;
}

// Band membership [kBands][kFft/2 + 1] of one-third octave bands.
std::vector<std::vector<double>> third_octave_matrix() {
  const std::size_t bins = kFft / 2 + 1;
  std::vector<double> freqs(bins);
  for (std::size_t i = 0; i < bins; ++i) freqs[i] = static_cast<double>(i) * kStoiRate / static_cast<double>(kFft);
  auto nearest = [&](double f) {
    std::size_t best = 0;
    for (std::size_t i = 1; i < bins; ++i)
      if ((freqs[i] - f) * (freqs[i] - f) < (freqs[best] - f) * (freqs[best] - f)) best = i;
    return best;
  };
  std::vector<std::vector<double>> obm(kBands, std::vector<double>(bins, 0.0));
  for (std::size_t k = 0; k < kBands; ++k) {
    const double lo = kMinFreq * std::pow(2.0, (2.0 * static_cast<double>(k) - 1.0) / 6.0);
    const double hi = kMinFreq * std::pow(2.0, (2.0 * static_cast<double>(k) + 1.0) / 6.0);
    for (std::size_t i = nearest(lo); i < nearest(hi); ++i) obm[k][i] = 1.0;
  }
  return obm;
}

// Drops frames more than kDynRangeDb below the loudest reference frame and
// overlap-adds the survivors of both signals.
void remove_silent_frames(std::vector<double>& ref, std::vector<double>& est) {
  const auto w = hann_interior(kFrame);
  std::vector<std::size_t> starts;
  for (std::size_t i = 0; i + kFrame < ref.size(); i += kHop) starts.push_back(i);
  if (starts.empty()) throw std::invalid_argument("stoi: signal shorter than one analysis frame");
  std::vector<double> energy(starts.size());
  for (std::size_t f = 0; f < starts.size(); ++f) {
    double e = 0.0;
    for (std::size_t j = 0; j < kFrame; ++j) {
      const double v = w[j] * ref[starts[f] + j];
      e += v * v;
    }
    energy[f] = 20.0 * std::log10(std::sqrt(e) + kMachineEps);
  }
  const double loudest = *std::max_element(energy.begin(), energy.end());
  std::vector<std::size_t> keep;
  for (std::size_t f = 0; f < starts.size(); ++f)
    if (loudest - kDynRangeDb - energy[f] < 0.0) keep.push_back(starts[f]);
  const std::size_t out_len = (keep.size() - 1) * kHop + kFrame;
  std::vector<double> r(out_len, 0.0), e(out_len, 0.0);
  for (std::size_t f = 0; f < keep.size(); ++f)
    for (std::size_t j = 0; j < kFrame; ++j) {
      r[f * kHop + j] += w[j] * ref[keep[f] + j];
      e[f * kHop + j] += w[j] * est[keep[f] + j];
    }
  ref = std::move(r);
  est = std::move(e);
}

std::mutex g_fftw_plan_mutex;

// One-third octave band envelopes [kBands][frames].
std::vector<std::vector<double>> band_envelopes(const std::vector<double>& x,
                                                const std::vector<std::vector<double>>& obm) {
  const auto w = hann_interior(kFrame);
  std::vector<std::size_t> starts;
  for (std::size_t i = 0; i + kFrame < x.size(); i += kHop) starts.push_back(i);
  const std::size_t bins = kFft / 2 + 1;
  std::vector<double> in(kFft, 0.0);
  std::vector<fftw_complex> out(bins);
  fftw_plan plan;
  {
    std::lock_guard<std::mutex> lock(g_fftw_plan_mutex);
    plan = fftw_plan_dft_r2c_1d(static_cast<int>(kFft), in.data(), out.data(), FFTW_ESTIMATE);
  }
  std::vector<std::vector<double>> env(kBands, std::vector<double>(starts.size(), 0.0));
  std::vector<double> power(bins);
  for (std::size_t f = 0; f < starts.size(); ++f) {
    std::fill(in.begin(), in.end(), 0.0);
    for (std::size_t j = 0; j < kFrame; ++j) in[j] = w[j] * x[starts[f] + j];
    fftw_execute(plan);
    for (std::size_t b = 0; b < bins; ++b) power[b] = out[b][0] * out[b][0] + out[b][1] * out[b][1];
    for (std::size_t k = 0; k < kBands; ++k) {
      double s = 0.0;
      for (std::size_t b = 0; b < bins; ++b) s += obm[k][b] * power[b];
      env[k][f] = std::sqrt(s);
    }
  }
  {
    std::lock_guard<std::mutex> lock(g_fftw_plan_mutex);
    fftw_destroy_plan(plan);
  }
  return env;
}

}  // namespace

double stoi(std::span<const double> estimate, std::span<const double> reference, int sample_rate_hz) {
  check_lengths(estimate, reference, "stoi");
  std::vector<double> ref = resample(reference, sample_rate_hz, kStoiRate);
  std::vector<double> est = resample(estimate, sample_rate_hz, kStoiRate);
  remove_silent_frames(ref, est);

  static const auto obm = third_octave_matrix();
  const auto x = band_envelopes(ref, obm);
  const auto y = band_envelopes(est, obm);
  const std::size_t frames = x.front().size();
  if (frames < kSegment)
    throw std::invalid_argument("stoi: only " + std::to_string(frames) + " frames after silence removal, need " +
                                std::to_string(kSegment));

  const double clip = std::pow(10.0, -kBetaDb / 20.0);
  double total = 0.0;
  std::size_t count = 0;
  std::vector<double> xs(kSegment), ys(kSegment);
  for (std::size_t m = kSegment; m <= frames; ++m) {
    for (std::size_t k = 0; k < kBands; ++k) {
      double xn = 0.0, yn = 0.0;
      for (std::size_t j = 0; j < kSegment; ++j) {
        xs[j] = x[k][m - kSegment + j];
        ys[j] = y[k][m - kSegment + j];
        xn += xs[j] * xs[j];
        yn += ys[j] * ys[j];
      }
      const double norm = std::sqrt(xn) / (std::sqrt(yn) + kMachineEps);
      for (std::size_t j = 0; j < kSegment; ++j) ys[j] = std::min(ys[j] * norm, xs[j] * (1.0 + clip));
      const double mx = std::accumulate(xs.begin(), xs.end(), 0.0) / kSegment;
      const double my = std::accumulate(ys.begin(), ys.end(), 0.0) / kSegment;
      double sxx = 0.0, syy = 0.0, sxy = 0.0;
      for (std::size_t j = 0; j < kSegment; ++j) {
        sxx += (xs[j] - mx) * (xs[j] - mx);
        syy += (ys[j] - my) * (ys[j] - my);
      }
      const double dx = std::sqrt(sxx) + kMachineEps, dy = std::sqrt(syy) + kMachineEps;
      for (std::size_t j = 0; j < kSegment; ++j) sxy += ((xs[j] - mx) / dx) * ((ys[j] - my) / dy);
      total += sxy;
      ++count;
    }
  }
  return total / static_cast<double>(count);
}

// ---------------------------------------------------------------------------
// Permutation-consistent evaluation

std::vector<std::size_t> choose_permutation(const std::vector<Signal>& estimates, const std::vector<Signal>& references) {
  if (estimates.size() != references.size() || estimates.empty())
    throw std::invalid_argument("choose_permutation: estimate and reference counts differ");
  const std::size_t n = estimates.size();
  std::vector<std::vector<double>> cost(n, std::vector<double>(n));
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) cost[i][j] = -si_sdr(estimates[i], references[j]);
  return best_permutation(cost).perm;
}

namespace {

double mean_of(const std::vector<double>& v) { return std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size()); }

}  // namespace

double median(std::vector<double> values) {
  if (values.empty()) return 0.0;
  std::sort(values.begin(), values.end());
  const std::size_t n = values.size();
  return n % 2 ? values[n / 2] : 0.5 * (values[n / 2 - 1] + values[n / 2]);
}

MixtureReport evaluate_pair(const std::vector<Signal>& estimates, const std::vector<Signal>& references,
                            const Signal& mixture, int sample_rate_hz, std::string id) {
  if (estimates.size() != references.size() || estimates.empty())
    throw std::invalid_argument("evaluate_pair: estimate and reference counts differ");
  for (std::size_t i = 0; i < references.size(); ++i)
    if (estimates[i].size() != mixture.size() || references[i].size() != mixture.size())
      throw std::invalid_argument("evaluate_pair: all signals must match the mixture length");
  MixtureReport r;
  r.id = std::move(id);
  r.permutation = choose_permutation(estimates, references);
  const std::size_t n = references.size();
  std::vector<std::size_t> est_for_ref(n);
  for (std::size_t k = 0; k < n; ++k) est_for_ref[r.permutation[k]] = k;
  for (std::size_t j = 0; j < n; ++j) {
    const auto& est = estimates[est_for_ref[j]];
    const auto& ref = references[j];
    const double s = si_sdr(est, ref);
    const double d = sdr(est, ref);
    r.si_sdr.push_back(s);
    r.si_sdri.push_back(improvement(s, si_sdr(mixture, ref)));
    r.sdr.push_back(d);
    r.sdri.push_back(improvement(d, sdr(mixture, ref)));
    r.stoi.push_back(stoi(est, ref, sample_rate_hz));
    r.stoi_mixture.push_back(stoi(mixture, ref, sample_rate_hz));
  }
  r.mean_si_sdr = mean_of(r.si_sdr);
  r.mean_si_sdri = mean_of(r.si_sdri);
  r.mean_sdr = mean_of(r.sdr);
  r.mean_sdri = mean_of(r.sdri);
  r.mean_stoi = mean_of(r.stoi);
  r.mean_stoi_mixture = mean_of(r.stoi_mixture);
  return r;
}

nlohmann::json MixtureReport::to_json() const {
  auto opt = [](const std::optional<double>& v) { return v ? nlohmann::json(*v) : nlohmann::json(nullptr); };
  return {{"id", id},
          {"permutation", permutation},
          {"si_sdr", mean_si_sdr},
          {"si_sdri", mean_si_sdri},
          {"sdr", mean_sdr},
          {"sdri", mean_sdri},
          {"stoi", mean_stoi},
          {"stoi_mixture", mean_stoi_mixture},
          {"per_speaker",
           {{"si_sdr", si_sdr}, {"si_sdri", si_sdri}, {"sdr", sdr}, {"sdri", sdri}, {"stoi", stoi},
            {"stoi_mixture", stoi_mixture}}},
          {"pesq", opt(pesq)},
          {"dnsmos", {{"ovrl", opt(dnsmos_ovrl)}, {"sig", opt(dnsmos_sig)}, {"bak", opt(dnsmos_bak)}, {"p808", opt(dnsmos_p808)}}}};
}

EvalSummary summarize(const std::vector<MixtureReport>& reports) {
  EvalSummary s;
  s.count = reports.size();
  auto field = [&](auto member) {
    std::vector<double> v;
    for (const auto& r : reports) v.push_back(r.*member);
    return MetricSummary{v.empty() ? 0.0 : mean_of(v), median(v)};
  };
  s.si_sdr = field(&MixtureReport::mean_si_sdr);
  s.si_sdri = field(&MixtureReport::mean_si_sdri);
  s.sdr = field(&MixtureReport::mean_sdr);
  s.sdri = field(&MixtureReport::mean_sdri);
  s.stoi = field(&MixtureReport::mean_stoi);
  s.stoi_mixture = field(&MixtureReport::mean_stoi_mixture);
  return s;
}

nlohmann::json EvalSummary::to_json() const {
  auto m = [](const MetricSummary& x) { return nlohmann::json{{"mean", x.mean}, {"median", x.median}}; };
  return {{"count", count},       {"si_sdr", m(si_sdr)}, {"si_sdri", m(si_sdri)},          {"sdr", m(sdr)},
          {"sdri", m(sdri)},      {"stoi", m(stoi)},     {"stoi_mixture", m(stoi_mixture)}};
}

void write_report_jsonl(const std::vector<MixtureReport>& reports, const EvalSummary& summary,
                        const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  for (const auto& r : reports) out << r.to_json().dump() << '\n';
  out << nlohmann::json{{"summary", summary.to_json()}}.dump() << '\n';
}

void write_summary_csv(const EvalSummary& summary, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out.precision(6);
  out << std::fixed;
  out << "SI-SDR,SI-SDRi,SDR,SDRi,STOI\n";
  out << summary.si_sdr.mean << ',' << summary.si_sdri.mean << ',' << summary.sdr.mean << ',' << summary.sdri.mean
      << ',' << summary.stoi.mean << '\n';
}

}  // namespace codecsep
