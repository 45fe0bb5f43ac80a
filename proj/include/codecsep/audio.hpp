// Waveform I/O, resampling, synthetic sources and min-condition mixtures.
#pragma once

#include <cstdint>
#include <filesystem>
#include <nlohmann/json.hpp>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace codecsep {

/// Mono samples in [-1, 1]. The constructor clamps out-of-range samples and
/// rejects empty or non-finite input.
class Waveform {
 public:
  Waveform(std::vector<double> samples, int sample_rate_hz);

  std::span<const double> samples() const { return samples_; }
  int sample_rate_hz() const { return sample_rate_hz_; }
  std::size_t size() const { return samples_.size(); }
  double duration_s() const { return static_cast<double>(samples_.size()) / sample_rate_hz_; }

 private:
  std::vector<double> samples_;
  int sample_rate_hz_;
};

class WavError : public std::runtime_error {
 public:
  enum class Kind { malformed, unsupported_encoding, multichannel, io };
  WavError(Kind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}
  Kind kind() const { return kind_; }

 private:
  Kind kind_;
};

/// PCM16 mono RIFF/WAVE with the canonical 44-byte header.
std::vector<std::uint8_t> encode_wav(const Waveform& w);
Waveform decode_wav(std::span<const std::uint8_t> bytes);
void write_wav(const Waveform& w, const std::filesystem::path& path);
Waveform read_wav(const std::filesystem::path& path);

/// Nearest PCM16 code (ties to even), clamped to [-32768, 32767].
std::int16_t to_pcm16(double sample);

/// Kaiser-windowed sinc, polyphase where the reduced rate ratio allows.
struct ResamplerOptions {
  int zero_crossings = 64;  // per side of the kernel centre
  double rolloff = 0.945;
  double kaiser_beta = 14.769656459379492;
};

std::vector<double> resample(std::span<const double> x, int source_hz, int target_hz,
                             const ResamplerOptions& opts = {});
Waveform resample(const Waveform& w, int target_hz, const ResamplerOptions& opts = {});

/// Deterministic harmonic, amplitude-modulated stand-in for a speech source.
Waveform synthesize_source(std::uint64_t seed, double duration_s, int sample_rate_hz);

struct MixtureItem {
  std::string id;
  Waveform mixture;
  std::vector<Waveform> sources;  // gain-scaled and cropped, summing to the mixture
  std::vector<double> gains_db;
};

/// Crops to the shortest source, applies gains and sums. When the sum peaks
/// above 1 the mixture and the sources are rescaled together.
MixtureItem make_mixture(const std::vector<Waveform>& sources, const std::vector<double>& gains_db,
                         std::string id = {});

struct DatasetSpec {
  int train = 32;
  int valid = 8;
  int test = 8;
  double min_duration_s = 1.0;
  double max_duration_s = 1.5;
  int sample_rate_hz = 8000;
  int num_speakers = 2;
  double gain_range_db = 2.5;
  std::uint64_t seed = 0;

  nlohmann::json to_json() const;
  static DatasetSpec from_json(const nlohmann::json& j);
};

struct ManifestRow {
  std::string id;
  std::string split;
  std::string mix_path;  // relative to the manifest directory
  std::vector<std::string> src_paths;
  std::vector<double> gains_db;
  int sr = 0;
  std::size_t n_samples = 0;
  std::uint64_t seed = 0;

  nlohmann::json to_json() const;
  static ManifestRow from_json(const nlohmann::json& j);
};

struct Manifest {
  std::filesystem::path root;
  std::vector<ManifestRow> rows;

  std::vector<const ManifestRow*> split(const std::string& name) const;
};

/// Writes WAVs under out_dir/{train,valid,test}/ plus out_dir/manifest.jsonl.
Manifest generate_dataset(const DatasetSpec& spec, const std::filesystem::path& out_dir);
Manifest load_manifest(const std::filesystem::path& manifest_path);

/// Builds the in-memory item for one manifest split index; shared by the
/// generator and by tests that need items without touching disk.
MixtureItem synthesize_item(const DatasetSpec& spec, const std::string& split, int index, std::uint64_t* seed_out = nullptr);

}  // namespace codecsep
