// Separation quality metrics evaluated under one shared permutation.
#pragma once

#include "codecsep/audio.hpp"

#include <nlohmann/json.hpp>

#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace codecsep {

using Signal = std::vector<double>;

/// SI-SDR in dB with both signals mean-removed; 1e-8 added to both energies.
double si_sdr(std::span<const double> estimate, std::span<const double> reference);
/// Plain energy-ratio SDR in dB (not scale-invariant).
double sdr(std::span<const double> estimate, std::span<const double> reference);
double improvement(double metric_value, double mixture_baseline);

/// Short-time objective intelligibility. Both signals are resampled to 10 kHz
/// first; throws if fewer than 30 analysis frames survive silence removal.
double stoi(std::span<const double> estimate, std::span<const double> reference, int sample_rate_hz);
inline double stoi(const Waveform& estimate, const Waveform& reference) {
  return stoi(estimate.samples(), reference.samples(), reference.sample_rate_hz());
}

/// Permutation (estimate k -> reference perm[k]) maximizing mean SI-SDR.
std::vector<std::size_t> choose_permutation(const std::vector<Signal>& estimates, const std::vector<Signal>& references);

struct MixtureReport {
  std::string id;
  std::vector<std::size_t> permutation;  // estimate k -> reference permutation[k]
  // Per reference speaker, in reference order.
  std::vector<double> si_sdr, si_sdri, sdr, sdri, stoi, stoi_mixture;
  // Mixture-level means over speakers.
  double mean_si_sdr = 0.0, mean_si_sdri = 0.0, mean_sdr = 0.0, mean_sdri = 0.0, mean_stoi = 0.0,
         mean_stoi_mixture = 0.0;
  // Reserved for externally computed scores; never filled here.
  std::optional<double> pesq, dnsmos_ovrl, dnsmos_sig, dnsmos_bak, dnsmos_p808;

  nlohmann::json to_json() const;
};

MixtureReport evaluate_pair(const std::vector<Signal>& estimates, const std::vector<Signal>& references,
                            const Signal& mixture, int sample_rate_hz, std::string id = {});

struct MetricSummary {
  double mean = 0.0;
  double median = 0.0;
};

struct EvalSummary {
  std::size_t count = 0;
  MetricSummary si_sdr, si_sdri, sdr, sdri, stoi, stoi_mixture;

  nlohmann::json to_json() const;
};

EvalSummary summarize(const std::vector<MixtureReport>& reports);

/// One JSON object per mixture followed by {"summary": ...}.
void write_report_jsonl(const std::vector<MixtureReport>& reports, const EvalSummary& summary,
                        const std::filesystem::path& path);
/// Header: SI-SDR,SI-SDRi,SDR,SDRi,STOI; one row of means.
void write_summary_csv(const EvalSummary& summary, const std::filesystem::path& path);

double median(std::vector<double> values);

}  // namespace codecsep
