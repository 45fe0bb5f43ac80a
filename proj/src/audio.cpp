#include "codecsep/audio.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <numeric>
#include <random>

namespace codecsep {

Waveform::Waveform(std::vector<double> samples, int sample_rate_hz)
    : samples_(std::move(samples)), sample_rate_hz_(sample_rate_hz) {
  if (samples_.empty()) throw std::invalid_argument("waveform must not be empty");
  if (sample_rate_hz_ <= 0) throw std::invalid_argument("sample rate must be positive");
  for (auto& s : samples_) {
    if (!std::isfinite(s)) throw std::invalid_argument("waveform contains non-finite samples");
    s = std::clamp(s, -1.0, 1.0);
  }
}

// ---------------------------------------------------------------------------
// WAV

std::int16_t to_pcm16(double sample) {
  const double scaled = std::nearbyint(sample * 32768.0);
  return static_cast<std::int16_t>(std::clamp(scaled, -32768.0, 32767.0));
}

namespace {

void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}
void put_u16(std::vector<std::uint8_t>& out, std::uint16_t v) {
  out.push_back(static_cast<std::uint8_t>(v & 0xff));
  out.push_back(static_cast<std::uint8_t>(v >> 8));
}
void put_tag(std::vector<std::uint8_t>& out, const char* tag) { out.insert(out.end(), tag, tag + 4); }

std::uint32_t get_u32(std::span<const std::uint8_t> b, std::size_t at) {
  return static_cast<std::uint32_t>(b[at]) | (static_cast<std::uint32_t>(b[at + 1]) << 8) |
         (static_cast<std::uint32_t>(b[at + 2]) << 16) | (static_cast<std::uint32_t>(b[at + 3]) << 24);
}
std::uint16_t get_u16(std::span<const std::uint8_t> b, std::size_t at) {
  return static_cast<std::uint16_t>(b[at] | (b[at + 1] << 8));
}
bool tag_is(std::span<const std::uint8_t> b, std::size_t at, const char* tag) {
  return std::equal(tag, tag + 4, b.begin() + static_cast<std::ptrdiff_t>(at));
}

}  // namespace

std::vector<std::uint8_t> encode_wav(const Waveform& w) {
  const auto n = static_cast<std::uint32_t>(w.size());
  const auto rate = static_cast<std::uint32_t>(w.sample_rate_hz());
  std::vector<std::uint8_t> out;
  out.reserve(44 + 2 * n);
  put_tag(out, "RIFF");
  put_u32(out, 36 + 2 * n);
  put_tag(out, "WAVE");
  put_tag(out, "fmt ");
  put_u32(out, 16);
  put_u16(out, 1);  // PCM
  put_u16(out, 1);  // mono
  put_u32(out, rate);
  put_u32(out, rate * 2);
  put_u16(out, 2);
  put_u16(out, 16);
  put_tag(out, "data");
  put_u32(out, 2 * n);
  for (double s : w.samples()) put_u16(out, static_cast<std::uint16_t>(to_pcm16(s)));
  return out;
}

Waveform decode_wav(std::span<const std::uint8_t> b) {
  using K = WavError::Kind;
  if (b.size() < 12) throw WavError(K::malformed, "file too short for a RIFF header");
  if (!tag_is(b, 0, "RIFF") || !tag_is(b, 8, "WAVE")) throw WavError(K::malformed, "missing RIFF/WAVE tags");
  std::size_t pos = 12;
  bool have_fmt = false;
  std::uint32_t rate = 0;
  while (pos + 8 <= b.size()) {
    const std::uint32_t size = get_u32(b, pos + 4);
    const std::size_t body = pos + 8;
    if (body + size > b.size() && !tag_is(b, pos, "data"))
      throw WavError(K::malformed, "chunk extends past end of file");
    if (tag_is(b, pos, "fmt ")) {
      if (size < 16) throw WavError(K::malformed, "fmt chunk too small");
      const auto format = get_u16(b, body);
      const auto channels = get_u16(b, body + 2);
      rate = get_u32(b, body + 4);
      const auto bits = get_u16(b, body + 14);
      if (format != 1) throw WavError(K::unsupported_encoding, "only PCM (format 1) is supported");
      if (bits != 16) throw WavError(K::unsupported_encoding, "only 16-bit samples are supported");
      if (channels != 1) throw WavError(K::multichannel, "only mono files are supported");
      if (rate == 0) throw WavError(K::malformed, "zero sample rate");
      have_fmt = true;
    } else if (tag_is(b, pos, "data")) {
      if (!have_fmt) throw WavError(K::malformed, "data chunk before fmt chunk");
      if (body + size > b.size()) throw WavError(K::malformed, "data chunk truncated");
      if (size < 2) throw WavError(K::malformed, "empty data chunk");
      std::vector<double> samples(size / 2);
      for (std::size_t i = 0; i < samples.size(); ++i)
        samples[i] = static_cast<std::int16_t>(get_u16(b, body + 2 * i)) / 32768.0;
      return Waveform(std::move(samples), static_cast<int>(rate));
    }
    pos = body + size + (size & 1);
  }
  throw WavError(K::malformed, have_fmt ? "no data chunk" : "no fmt chunk");
}

void write_wav(const Waveform& w, const std::filesystem::path& path) {
  const auto bytes = encode_wav(w);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw WavError(WavError::Kind::io, "cannot open " + path.string() + " for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw WavError(WavError::Kind::io, "write failed for " + path.string());
}

Waveform read_wav(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw WavError(WavError::Kind::io, "cannot open " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return decode_wav(bytes);
}

// ---------------------------------------------------------------------------
// Resampling

std::vector<double> resample(std::span<const double> x, int source_hz, int target_hz, const ResamplerOptions& opts) {
  if (source_hz < 1 || target_hz < 1) throw std::invalid_argument("resample: rates must be >= 1");
  if (source_hz == target_hz) return {x.begin(), x.end()};
  const long long g = std::gcd(source_hz, target_hz);
  const long long p = source_hz / g;  // input samples advanced per q outputs
  const long long q = target_hz / g;
  const auto len = static_cast<long long>(x.size());
  const long long out_len = (2 * len * target_hz + source_hz) / (2LL * source_hz);

  // Cutoff as a fraction of the input Nyquist.
  const double fc = opts.rolloff * std::min(1.0, static_cast<double>(q) / static_cast<double>(p));
  const double half_width = opts.zero_crossings / fc;
  const long long taps = static_cast<long long>(std::ceil(half_width));
  const double i0_beta = std::cyl_bessel_i(0.0, opts.kaiser_beta);

  auto kernel_for_phase = [&](long long r) {
    std::vector<double> k(static_cast<std::size_t>(2 * taps + 1));
    const double frac = static_cast<double>(r) / static_cast<double>(q);
    double total = 0.0;
    for (long long j = -taps; j <= taps; ++j) {
      const double tau = frac - static_cast<double>(j);
      double v = 0.0;
      if (std::abs(tau) <= half_width) {
        const double arg = fc * tau;
        const double sinc = arg == 0.0 ? 1.0 : std::sin(std::numbers::pi * arg) / (std::numbers::pi * arg);
        const double ratio = tau / half_width;
        const double window = std::cyl_bessel_i(0.0, opts.kaiser_beta * std::sqrt(std::max(0.0, 1.0 - ratio * ratio))) / i0_beta;
        v = fc * sinc * window;
      }
      k[static_cast<std::size_t>(j + taps)] = v;
      total += v;
    }
    for (auto& v : k) v /= total;  // exact unit DC gain per phase
    return k;
  };

  constexpr long long kMaxCachedPhases = 4096;
  std::vector<std::vector<double>> bank;
  if (q <= kMaxCachedPhases) {
    bank.reserve(static_cast<std::size_t>(q));
    for (long long r = 0; r < q; ++r) bank.push_back(kernel_for_phase(r));
  }

  std::vector<double> out(static_cast<std::size_t>(out_len));
  for (long long n = 0; n < out_len; ++n) {
    const long long base = (n * p) / q;
    const long long r = (n * p) % q;
    std::vector<double> tmp;
    const std::vector<double>& k = bank.empty() ? (tmp = kernel_for_phase(r)) : bank[static_cast<std::size_t>(r)];
    double acc = 0.0;
    const long long lo = std::max(0LL, base - taps);
    const long long hi = std::min(len - 1, base + taps);
    for (long long i = lo; i <= hi; ++i) acc += x[static_cast<std::size_t>(i)] * k[static_cast<std::size_t>(i - base + taps)];
    out[static_cast<std::size_t>(n)] = acc;
  }
  return out;
}

Waveform resample(const Waveform& w, int target_hz, const ResamplerOptions& opts) {
  auto y = resample(w.samples(), w.sample_rate_hz(), target_hz, opts);
  if (y.empty()) y.push_back(0.0);
  return Waveform(std::move(y), target_hz);
}

// ---------------------------------------------------------------------------
// Synthetic sources

Waveform synthesize_source(std::uint64_t seed, double duration_s, int sample_rate_hz) {
  if (!(duration_s >= 0.5)) throw std::invalid_argument("synthesize_source: duration must be >= 0.5 s");
  if (sample_rate_hz < 1000) throw std::invalid_argument("synthesize_source: sample rate too low");
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  auto uniform = [&](double lo, double hi) { return lo + (hi - lo) * unit(rng); };

  const double f0 = uniform(80.0, 300.0);
  const int harmonics = 3 + static_cast<int>(rng() % 3);
  std::vector<double> amp(static_cast<std::size_t>(harmonics)), phase(static_cast<std::size_t>(harmonics));
  for (int k = 0; k < harmonics; ++k) {
    amp[static_cast<std::size_t>(k)] = uniform(0.3, 1.0) / (k + 1);
    phase[static_cast<std::size_t>(k)] = uniform(0.0, 2.0 * std::numbers::pi);
  }
  const double am_rate = uniform(2.0, 8.0);
  const double am_phase = uniform(0.0, 2.0 * std::numbers::pi);
  const double am_depth = uniform(0.5, 0.9);
  const double vib_rate = uniform(0.3, 1.5);
  const double vib_phase = uniform(0.0, 2.0 * std::numbers::pi);
  const double vib_depth = uniform(0.0, 0.05);

  const auto n = static_cast<std::size_t>(std::llround(duration_s * sample_rate_hz));
  const double nyquist = 0.5 * sample_rate_hz;
  std::vector<double> x(n, 0.0);
  double cycles = 0.0;  // integrated fundamental
  for (std::size_t i = 0; i < n; ++i) {
    const double t = static_cast<double>(i) / sample_rate_hz;
    const double f = f0 * (1.0 + vib_depth * std::sin(2.0 * std::numbers::pi * vib_rate * t + vib_phase));
    double v = 0.0;
    for (int k = 0; k < harmonics; ++k) {
      if (f * (k + 1) >= 0.9 * nyquist) break;
      v += amp[static_cast<std::size_t>(k)] *
           std::sin(2.0 * std::numbers::pi * (k + 1) * cycles + phase[static_cast<std::size_t>(k)]);
    }
    const double env = 1.0 - am_depth * 0.5 * (1.0 + std::cos(2.0 * std::numbers::pi * am_rate * t + am_phase));
    x[i] = v * env;
    cycles += f / sample_rate_hz;
  }
  double energy = 0.0;
  for (double v : x) energy += v * v;
  const double noise_std = std::sqrt(energy / static_cast<double>(n)) * std::pow(10.0, -30.0 / 20.0);
  std::normal_distribution<double> noise(0.0, noise_std);
  for (auto& v : x) v += noise(rng);

  const auto peak_it = std::max_element(x.begin(), x.end(), [](double a, double b) { return std::abs(a) < std::abs(b); });
  const double scale = 0.9 / std::abs(*peak_it);
  const double sign = *peak_it < 0 ? -1.0 : 1.0;
  for (auto& v : x) v *= scale;
  *peak_it = 0.9 * sign;
  return Waveform(std::move(x), sample_rate_hz);
}

// ---------------------------------------------------------------------------
// Mixtures

MixtureItem make_mixture(const std::vector<Waveform>& sources, const std::vector<double>& gains_db, std::string id) {
  if (sources.size() < 2) throw std::invalid_argument("make_mixture: need at least two sources");
  if (gains_db.size() != sources.size()) throw std::invalid_argument("make_mixture: one gain per source required");
  const int sr = sources.front().sample_rate_hz();
  std::size_t len = sources.front().size();
  for (const auto& s : sources) {
    if (s.sample_rate_hz() != sr) throw std::invalid_argument("make_mixture: sample-rate mismatch");
    len = std::min(len, s.size());
  }
  std::vector<std::vector<double>> scaled;
  std::vector<double> mix(len, 0.0);
  double peak = 0.0;
  for (std::size_t k = 0; k < sources.size(); ++k) {
    const double g = std::pow(10.0, gains_db[k] / 20.0);
    std::vector<double> s(len);
    for (std::size_t i = 0; i < len; ++i) {
      s[i] = sources[k].samples()[i] * g;
      peak = std::max(peak, std::abs(s[i]));
    }
    scaled.push_back(std::move(s));
  }
  for (const auto& s : scaled)
    for (std::size_t i = 0; i < len; ++i) mix[i] += s[i];
  for (double v : mix) peak = std::max(peak, std::abs(v));
  if (peak > 1.0) {
    const double f = 1.0 / peak;
    for (auto& v : mix) v *= f;
    for (auto& s : scaled)
      for (auto& v : s) v *= f;
  }
  MixtureItem item{std::move(id), Waveform(std::move(mix), sr), {}, gains_db};
  for (auto& s : scaled) item.sources.emplace_back(std::move(s), sr);
  return item;
}

// ---------------------------------------------------------------------------
// Dataset

namespace {

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

int split_index(const std::string& split) {
  if (split == "train") return 0;
  if (split == "valid") return 1;
  if (split == "test") return 2;
  throw std::invalid_argument("unknown split '" + split + "'");
}

constexpr std::uint64_t kSplitStride = 100'000'000ULL;
constexpr std::uint64_t kSeedStride = 1'000'000'000ULL;

}  // namespace

nlohmann::json DatasetSpec::to_json() const {
  return {{"train", train},
          {"valid", valid},
          {"test", test},
          {"min_duration_s", min_duration_s},
          {"max_duration_s", max_duration_s},
          {"sample_rate_hz", sample_rate_hz},
          {"num_speakers", num_speakers},
          {"gain_range_db", gain_range_db},
          {"seed", seed}};
}

DatasetSpec DatasetSpec::from_json(const nlohmann::json& j) {
  DatasetSpec s;
  s.train = j.value("train", s.train);
  s.valid = j.value("valid", s.valid);
  s.test = j.value("test", s.test);
  s.min_duration_s = j.value("min_duration_s", s.min_duration_s);
  s.max_duration_s = j.value("max_duration_s", s.max_duration_s);
  s.sample_rate_hz = j.value("sample_rate_hz", s.sample_rate_hz);
  s.num_speakers = j.value("num_speakers", s.num_speakers);
  s.gain_range_db = j.value("gain_range_db", s.gain_range_db);
  s.seed = j.value("seed", s.seed);
  return s;
}

nlohmann::json ManifestRow::to_json() const {
  return {{"id", id},           {"split", split}, {"mix_path", mix_path},   {"src_paths", src_paths},
          {"gains_db", gains_db}, {"sr", sr},       {"n_samples", n_samples}, {"seed", seed}};
}

ManifestRow ManifestRow::from_json(const nlohmann::json& j) {
  ManifestRow r;
  r.id = j.at("id").get<std::string>();
  r.split = j.at("split").get<std::string>();
  r.mix_path = j.at("mix_path").get<std::string>();
  r.src_paths = j.at("src_paths").get<std::vector<std::string>>();
  r.gains_db = j.at("gains_db").get<std::vector<double>>();
  r.sr = j.at("sr").get<int>();
  r.n_samples = j.at("n_samples").get<std::size_t>();
  r.seed = j.at("seed").get<std::uint64_t>();
  return r;
}

std::vector<const ManifestRow*> Manifest::split(const std::string& name) const {
  std::vector<const ManifestRow*> out;
  for (const auto& r : rows)
    if (r.split == name) out.push_back(&r);
  return out;
}

MixtureItem synthesize_item(const DatasetSpec& spec, const std::string& split, int index, std::uint64_t* seed_out) {
  const std::uint64_t item_seed =
      spec.seed * kSeedStride + static_cast<std::uint64_t>(split_index(split)) * kSplitStride +
      static_cast<std::uint64_t>(index);
  if (seed_out) *seed_out = item_seed;
  std::mt19937_64 rng(splitmix64(item_seed));
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::vector<Waveform> sources;
  std::vector<double> gains;
  for (int k = 0; k < spec.num_speakers; ++k) {
    const double dur = spec.min_duration_s + (spec.max_duration_s - spec.min_duration_s) * unit(rng);
    gains.push_back(-spec.gain_range_db + 2.0 * spec.gain_range_db * unit(rng));
    sources.push_back(synthesize_source(splitmix64(item_seed * 16 + static_cast<std::uint64_t>(k) + 1), dur,
                                        spec.sample_rate_hz));
  }
  char id[64];
  std::snprintf(id, sizeof(id), "%s_%04d", split.c_str(), index);
  MixtureItem item = make_mixture(sources, gains, id);

  // Snap sources onto the PCM16 grid and rebuild the mixture from them, so
  // the stored files satisfy mixture == sum(sources) exactly.
  const double top = 32767.0 / 32768.0;
  double shrink = 1.0;
  for (int attempt = 0; attempt < 16; ++attempt) {
    std::vector<std::vector<double>> snapped;
    std::vector<double> mix(item.mixture.size(), 0.0);
    bool fits = true;
    for (const auto& s : item.sources) {
      std::vector<double> v(s.size());
      for (std::size_t i = 0; i < v.size(); ++i) {
        v[i] = to_pcm16(s.samples()[i] * shrink) / 32768.0;
        mix[i] += v[i];
      }
      snapped.push_back(std::move(v));
    }
    for (double m : mix) fits = fits && std::abs(m) <= top;
    if (fits) {
      item.mixture = Waveform(std::move(mix), spec.sample_rate_hz);
      item.sources.clear();
      for (auto& v : snapped) item.sources.emplace_back(std::move(v), spec.sample_rate_hz);
      return item;
    }
    shrink *= 0.995;
  }
  throw std::runtime_error("could not fit mixture " + item.id + " into PCM16 range");
}

Manifest generate_dataset(const DatasetSpec& spec, const std::filesystem::path& out_dir) {
  if (spec.num_speakers < 2) throw std::invalid_argument("dataset: num_speakers must be >= 2");
  if (spec.min_duration_s < 0.5 || spec.max_duration_s < spec.min_duration_s)
    throw std::invalid_argument("dataset: invalid duration range");
  namespace fs = std::filesystem;
  Manifest manifest;
  manifest.root = out_dir;
  const std::pair<std::string, int> splits[] = {{"train", spec.train}, {"valid", spec.valid}, {"test", spec.test}};
  for (const auto& [split, count] : splits) {
    if (count <= 0) continue;
    fs::create_directories(out_dir / split);
    for (int i = 0; i < count; ++i) {
      ManifestRow row;
      MixtureItem item = synthesize_item(spec, split, i, &row.seed);
      row.id = item.id;
      row.split = split;
      row.mix_path = split + "/" + item.id + "_mix.wav";
      write_wav(item.mixture, out_dir / row.mix_path);
      for (std::size_t k = 0; k < item.sources.size(); ++k) {
        row.src_paths.push_back(split + "/" + item.id + "_s" + std::to_string(k) + ".wav");
        write_wav(item.sources[k], out_dir / row.src_paths.back());
      }
      row.gains_db = item.gains_db;
      row.sr = spec.sample_rate_hz;
      row.n_samples = item.mixture.size();
      manifest.rows.push_back(std::move(row));
    }
  }
  std::ofstream out(out_dir / "manifest.jsonl", std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write manifest in " + out_dir.string());
  for (const auto& r : manifest.rows) out << r.to_json().dump() << '\n';
  return manifest;
}

Manifest load_manifest(const std::filesystem::path& manifest_path) {
  std::ifstream in(manifest_path);
  if (!in) throw std::runtime_error("cannot open manifest " + manifest_path.string());
  Manifest m;
  m.root = manifest_path.parent_path();
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    m.rows.push_back(ManifestRow::from_json(nlohmann::json::parse(line)));
  }
  return m;
}

}  // namespace codecsep
