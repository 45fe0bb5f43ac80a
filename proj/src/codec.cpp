#include "codecsep/codec.hpp"

#include "codecsep/optim.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <random>

namespace codecsep {

std::string to_string(Activation a) { return a == Activation::snake ? "snake" : "elu"; }

Activation activation_from_string(const std::string& s) {
  if (s == "snake") return Activation::snake;
  if (s == "elu") return Activation::elu;
  throw std::invalid_argument("unknown activation '" + s + "' (expected snake or elu)");
}

Tensor activate(const Tensor& x, Activation a, double snake_alpha) {
  return a == Activation::snake ? snake(x, snake_alpha) : elu(x, 1.0);
}

// ---------------------------------------------------------------------------
// Config

int CodecConfig::total_stride() const {
  return std::accumulate(strides.begin(), strides.end(), 1, std::multiplies<>());
}

void CodecConfig::validate() const {
  if (sample_rate_hz <= 0) throw std::invalid_argument("codec: sample_rate_hz must be positive");
  if (strides.empty()) throw std::invalid_argument("codec: strides must not be empty");
  for (int s : strides)
    if (s < 1) throw std::invalid_argument("codec: strides must be >= 1");
  if (channels.size() != strides.size() + 1)
    throw std::invalid_argument("codec: channels must have one more entry than strides");
  for (int c : channels)
    if (c < 1) throw std::invalid_argument("codec: channel counts must be positive");
  if (embedding_dim < 1) throw std::invalid_argument("codec: embedding_dim must be positive");
  if (num_codebooks < 1) throw std::invalid_argument("codec: num_codebooks must be >= 1");
  if (codebook_size < 1) throw std::invalid_argument("codec: codebook_size must be >= 1");
  if (!(snake_alpha > 0.0)) throw std::invalid_argument("codec: snake_alpha must be positive");
}

nlohmann::json CodecConfig::to_json() const {
  return {{"sample_rate_hz", sample_rate_hz}, {"strides", strides},
          {"channels", channels},             {"embedding_dim", embedding_dim},
          {"num_codebooks", num_codebooks},   {"codebook_size", codebook_size},
          {"activation", to_string(activation)}, {"snake_alpha", snake_alpha},
          {"seed", seed}};
}

CodecConfig CodecConfig::from_json(const nlohmann::json& j) {
  CodecConfig c;
  c.sample_rate_hz = j.value("sample_rate_hz", c.sample_rate_hz);
  c.strides = j.value("strides", c.strides);
  c.channels = j.value("channels", c.channels);
  c.embedding_dim = j.value("embedding_dim", c.embedding_dim);
  c.num_codebooks = j.value("num_codebooks", c.num_codebooks);
  c.codebook_size = j.value("codebook_size", c.codebook_size);
  c.activation = activation_from_string(j.value("activation", to_string(c.activation)));
  c.snake_alpha = j.value("snake_alpha", c.snake_alpha);
  c.seed = j.value("seed", c.seed);
  c.validate();
  return c;
}

std::uint64_t CodecConfig::hash() const { return config_hash(to_json()); }

// ---------------------------------------------------------------------------
// Model

namespace {

Tensor xavier(std::mt19937_64& rng, Shape shape, std::size_t fan_in, std::size_t fan_out) {
  const double a = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  std::uniform_real_distribution<double> dist(-a, a);
  std::size_t n = 1;
  for (auto e : shape) n *= e;
  std::vector<double> v(n);
  for (auto& x : v) x = dist(rng);
  return Tensor::from(std::move(shape), std::move(v), true);
}

}  // namespace

CodecModel::CodecModel(CodecConfig config) : config_(std::move(config)) {
  config_.validate();
  std::mt19937_64 rng(config_.seed);
  const auto& ch = config_.channels;
  const auto D = static_cast<std::size_t>(config_.embedding_dim);
  auto conv = [&](std::size_t in, std::size_t out, std::size_t k, std::size_t stride) {
    Conv c;
    c.weight = xavier(rng, {out, in, k}, in * k, out * k);
    c.bias = Tensor::zeros({out, 1}, true);
    c.stride = stride;
    c.pad = k - stride;
    return c;
  };
  auto conv_t = [&](std::size_t in, std::size_t out, std::size_t k, std::size_t stride) {
    Conv c;
    c.weight = xavier(rng, {in, out, k}, in * k, out * k);
    c.bias = Tensor::zeros({out, 1}, true);
    c.stride = stride;
    return c;
  };

  encoder_.push_back(conv(1, static_cast<std::size_t>(ch[0]), 7, 1));
  for (std::size_t i = 0; i < config_.strides.size(); ++i) {
    const auto s = static_cast<std::size_t>(config_.strides[i]);
    encoder_.push_back(conv(static_cast<std::size_t>(ch[i]), static_cast<std::size_t>(ch[i + 1]), 2 * s, s));
  }
  encoder_.push_back(conv(static_cast<std::size_t>(ch.back()), D, 3, 1));

  std::normal_distribution<double> normal(0.0, 1.0 / std::sqrt(static_cast<double>(D)));
  for (int k = 0; k < config_.num_codebooks; ++k) {
    std::vector<double> v(static_cast<std::size_t>(config_.codebook_size) * D);
    for (auto& x : v) x = normal(rng);
    codebooks_.push_back(Tensor::from({static_cast<std::size_t>(config_.codebook_size), D}, std::move(v), true));
  }

  decoder_.push_back(conv(D, static_cast<std::size_t>(ch.back()), 3, 1));
  for (std::size_t i = config_.strides.size(); i-- > 0;) {
    const auto s = static_cast<std::size_t>(config_.strides[i]);
    decoder_.push_back(conv_t(static_cast<std::size_t>(ch[i + 1]), static_cast<std::size_t>(ch[i]), 2 * s, s));
  }
  decoder_.push_back(conv(static_cast<std::size_t>(ch[0]), 1, 7, 1));
}

void CodecModel::freeze() {
  for (auto& p : parameters()) p.value.set_requires_grad(false);
  frozen_ = true;
}

void CodecModel::unfreeze() {
  for (auto& p : parameters()) p.value.set_requires_grad(true);
  frozen_ = false;
}

std::vector<NamedTensor> CodecModel::encoder_parameters() const {
  std::vector<NamedTensor> out;
  for (std::size_t i = 0; i < encoder_.size(); ++i) {
    out.push_back({"encoder." + std::to_string(i) + ".weight", encoder_[i].weight});
    out.push_back({"encoder." + std::to_string(i) + ".bias", encoder_[i].bias});
  }
  return out;
}

std::vector<NamedTensor> CodecModel::decoder_parameters() const {
  std::vector<NamedTensor> out;
  for (std::size_t i = 0; i < decoder_.size(); ++i) {
    out.push_back({"decoder." + std::to_string(i) + ".weight", decoder_[i].weight});
    out.push_back({"decoder." + std::to_string(i) + ".bias", decoder_[i].bias});
  }
  return out;
}

std::vector<NamedTensor> CodecModel::parameters() const {
  auto out = encoder_parameters();
  for (std::size_t k = 0; k < codebooks_.size(); ++k)
    out.push_back({"rvq." + std::to_string(k) + ".codebook", codebooks_[k]});
  for (auto& p : decoder_parameters()) out.push_back(std::move(p));
  return out;
}

TensorBundle CodecModel::to_bundle() const {
  TensorBundle b;
  b.config = {{"kind", "codec"}, {"codec", config_.to_json()}, {"frozen", frozen_}};
  b.tensors = parameters();
  return b;
}

CodecModel CodecModel::from_bundle(const TensorBundle& bundle) {
  if (bundle.config.value("kind", "") != "codec") throw FormatError("bundle does not hold a codec");
  CodecModel model(CodecConfig::from_json(bundle.config.at("codec")));
  for (auto& p : model.parameters()) {
    const Tensor& stored = bundle.get(p.name);
    if (stored.shape() != p.value.shape()) throw FormatError("shape mismatch for codec tensor '" + p.name + "'");
    auto dst = p.value.mutable_data();
    std::copy(stored.data().begin(), stored.data().end(), dst.begin());
  }
  if (bundle.config.value("frozen", true)) model.freeze();
  return model;
}

void CodecModel::save(const std::filesystem::path& path, Dtype dtype) const { save_bundle(path, to_bundle(), dtype); }

CodecModel CodecModel::load(const std::filesystem::path& path) { return from_bundle(load_bundle(path)); }

Tensor CodecModel::run_conv(const Conv& c, const Tensor& x) const {
  Tensor in = c.pad > 0 ? pad_last(x, c.pad, 0) : x;
  return add(conv1d(in, c.weight, c.stride), c.bias);
}

Tensor CodecModel::run_conv_transpose(const Conv& c, const Tensor& x) const {
  const std::size_t keep = x.dim(1) * c.stride;
  return add(slice_last(conv_transpose1d(x, c.weight, c.stride), 0, keep), c.bias);
}

Tensor CodecModel::encode_tensor(const Tensor& signal) const {
  const auto S = static_cast<std::size_t>(config_.total_stride());
  if (signal.rank() != 2 || signal.dim(0) != 1) throw ShapeError("encode: signal must be [1 x L]");
  if (signal.dim(1) % S != 0) throw ShapeError("encode: length must be a multiple of the total stride");
  const Activation act = config_.activation;
  Tensor h = run_conv(encoder_.front(), signal);
  for (std::size_t i = 1; i < encoder_.size(); ++i) h = run_conv(encoder_[i], activate(h, act, config_.snake_alpha));
  return transpose(h);
}

Tensor CodecModel::decode_tensor(const Tensor& frames) const {
  if (frames.rank() != 2 || frames.dim(1) != static_cast<std::size_t>(config_.embedding_dim))
    throw ShapeError("decode: frames must be [T x " + std::to_string(config_.embedding_dim) + "]");
  const Activation act = config_.activation;
  Tensor h = run_conv(decoder_.front(), transpose(frames));
  for (std::size_t i = 1; i + 1 < decoder_.size(); ++i)
    h = run_conv_transpose(decoder_[i], activate(h, act, config_.snake_alpha));
  return run_conv(decoder_.back(), activate(h, act, config_.snake_alpha));
}

// ---------------------------------------------------------------------------
// Free functions

EmbeddingSeq encode(const CodecModel& model, std::span<const double> samples) {
  const auto S = static_cast<std::size_t>(model.config().total_stride());
  if (samples.size() < S)
    throw std::invalid_argument("encode: input of " + std::to_string(samples.size()) +
                                " samples is shorter than the total stride " + std::to_string(S));
  const std::size_t pad = (S - samples.size() % S) % S;
  std::vector<double> padded(pad, 0.0);
  padded.insert(padded.end(), samples.begin(), samples.end());
  const std::size_t len = padded.size();
  EmbeddingSeq e;
  e.frames = model.encode_tensor(Tensor::from({1, len}, std::move(padded)));
  e.frame_rate_hz = static_cast<double>(model.config().sample_rate_hz) / static_cast<double>(S);
  e.source_len_samples = samples.size();
  return e;
}

EmbeddingSeq encode(const CodecModel& model, const Waveform& w) {
  if (w.sample_rate_hz() != model.config().sample_rate_hz)
    throw std::invalid_argument("encode: waveform at " + std::to_string(w.sample_rate_hz()) +
                                " Hz, codec expects " + std::to_string(model.config().sample_rate_hz) + " Hz");
  return encode(model, w.samples());
}

Tensor decode_to_length(const CodecModel& model, const Tensor& frames, std::size_t length) {
  Tensor y = model.decode_tensor(frames);
  const std::size_t total = y.dim(1);
  if (length == 0 || length > total) throw ShapeError("decode: requested length exceeds decoded length");
  if (length < total) y = slice_last(y, total - length, total);
  return reshape(y, {length});
}

Waveform decode(const CodecModel& model, const EmbeddingSeq& e) {
  const std::size_t total = e.num_frames() * static_cast<std::size_t>(model.config().total_stride());
  const std::size_t length = e.source_len_samples > 0 && e.source_len_samples <= total ? e.source_len_samples : total;
  Tensor y = decode_to_length(model, e.frames, length);
  return Waveform({y.data().begin(), y.data().end()}, model.config().sample_rate_hz);
}

RvqResult rvq_quantize(const CodecModel& model, const Tensor& frames) {
  const auto D = static_cast<std::size_t>(model.config().embedding_dim);
  if (frames.rank() != 2 || frames.dim(1) != D)
    throw ShapeError("rvq: frames must be [T x " + std::to_string(D) + "]");
  const std::size_t T = frames.dim(0);
  const auto& books = model.codebooks();
  const std::size_t skip = static_cast<std::size_t>(model.config().codebook_size);

  std::vector<double> residual(frames.data().begin(), frames.data().end());
  RvqResult r;
  r.codes.assign(T, std::vector<std::size_t>(books.size(), skip));
  Tensor quant_sum;
  for (std::size_t k = 0; k < books.size(); ++k) {
    const auto cb = books[k].data();
    const std::size_t rows = books[k].dim(0);
    std::vector<std::size_t> picked;
    std::vector<std::size_t> picked_frames;
    for (std::size_t t = 0; t < T; ++t) {
      const double* res = residual.data() + t * D;
      double keep = 0.0;  // distance if this stage is skipped
      for (std::size_t d = 0; d < D; ++d) keep += res[d] * res[d];
      double best = std::numeric_limits<double>::infinity();
      std::size_t arg = 0;
      for (std::size_t j = 0; j < rows; ++j) {
        double dist = 0.0;
        for (std::size_t d = 0; d < D; ++d) {
          const double diff = res[d] - cb[j * D + d];
          dist += diff * diff;
        }
        if (dist < best) {
          best = dist;
          arg = j;
        }
      }
      // Never let a stage increase the residual norm.
      if (best > keep) continue;
      r.codes[t][k] = arg;
      picked.push_back(arg);
      picked_frames.push_back(t);
      for (std::size_t d = 0; d < D; ++d) residual[t * D + d] -= cb[arg * D + d];
    }
    if (picked.empty()) continue;
    Tensor rows_t = gather_rows(books[k], picked);
    if (picked.size() != T) {
      // Scatter selected rows into a [T x D] block via a 0/1 placement matrix.
      std::vector<double> place(T * picked.size(), 0.0);
      for (std::size_t i = 0; i < picked_frames.size(); ++i) place[picked_frames[i] * picked.size() + i] = 1.0;
      rows_t = matmul(Tensor::from({T, picked.size()}, std::move(place)), rows_t);
    }
    quant_sum = quant_sum.defined() ? add(quant_sum, rows_t) : rows_t;
  }
  if (!quant_sum.defined()) quant_sum = Tensor::zeros({T, D});

  std::vector<double> offset(T * D);
  for (std::size_t i = 0; i < offset.size(); ++i) offset[i] = quant_sum.data()[i] - frames.data()[i];
  r.quantized = add(frames, Tensor::from({T, D}, std::move(offset)));
  r.commit_loss = mean(square(sub(frames, quant_sum)));
  r.residual = Tensor::from({T, D}, std::move(residual));
  return r;
}

// ---------------------------------------------------------------------------
// Pretraining

std::vector<Waveform> make_codec_corpus(std::size_t count, double clip_s, int sample_rate_hz, std::uint64_t seed) {
  std::vector<Waveform> out;
  out.reserve(count);
  for (std::size_t i = 0; i < count; ++i)
    out.push_back(synthesize_source(seed * 1'000'003ULL + 7919ULL * (i + 1), clip_s, sample_rate_hz));
  return out;
}

CodecModel pretrain_codec(const CodecConfig& config, const std::vector<Waveform>& corpus, const PretrainOptions& opts,
                          PretrainResult* result) {
  if (corpus.empty()) throw std::invalid_argument("pretrain_codec: corpus is empty");
  CodecModel model(config);
  if (opts.steps <= 0) {
    model.freeze();
    return model;
  }
  const auto S = static_cast<std::size_t>(config.total_stride());
  const std::size_t crop = std::max(S, opts.crop_samples / S * S);
  for (const auto& w : corpus) {
    if (w.sample_rate_hz() != config.sample_rate_hz)
      throw std::invalid_argument("pretrain_codec: corpus sample rate differs from codec rate");
    if (w.size() < crop) throw std::invalid_argument("pretrain_codec: corpus clip shorter than crop length");
  }

  model.unfreeze();
  std::vector<Tensor> params;
  for (auto& p : model.parameters()) params.push_back(p.value);
  AdamState adam = adam_init(params);
  std::mt19937_64 rng(opts.seed ^ 0x5eedc0decULL);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::vector<double> losses;
  losses.reserve(static_cast<std::size_t>(opts.steps));

  for (int step = 0; step < opts.steps; ++step) {
    for (auto& p : params) p.zero_grad();
    Tape tape;
    TapeScope scope(tape);
    Tensor batch_loss;
    for (int b = 0; b < opts.batch_size; ++b) {
      auto pick = [&] {
        const auto& w = corpus[rng() % corpus.size()];
        const std::size_t start = (w.size() - crop) == 0 ? 0 : rng() % (w.size() - crop + 1);
        return std::vector<double>(w.samples().begin() + static_cast<std::ptrdiff_t>(start),
                                   w.samples().begin() + static_cast<std::ptrdiff_t>(start + crop));
      };
      auto clip = pick();
      if (unit(rng) < opts.mix_prob) {
        const auto other = pick();
        double peak = 0.0;
        for (std::size_t i = 0; i < crop; ++i) {
          clip[i] += other[i];
          peak = std::max(peak, std::abs(clip[i]));
        }
        if (peak > 0.9)
          for (auto& v : clip) v *= 0.9 / peak;
      }
      Tensor x = Tensor::from({1, crop}, std::move(clip));
      Tensor e = model.encode_tensor(x);
      Tensor recon = model.decode_tensor(e);
      RvqResult q = rvq_quantize(model, e);
      Tensor item = add(mean(square(sub(recon, x))), mul_scalar(q.commit_loss, opts.commit_weight));
      batch_loss = batch_loss.defined() ? add(batch_loss, item) : item;
    }
    batch_loss = mul_scalar(batch_loss, 1.0 / opts.batch_size);
    const double value = batch_loss.item();
    if (!std::isfinite(value))
      throw NumericError("codec pretraining diverged at step " + std::to_string(step));
    tape.backward(batch_loss);
    adam_step(params, adam, opts.lr);
    losses.push_back(value);
  }
  model.freeze();

  if (result) {
    result->step_losses = losses;
    const std::size_t w = std::min<std::size_t>(static_cast<std::size_t>(std::max(1, opts.log_window)), losses.size());
    result->first_window_loss = std::accumulate(losses.begin(), losses.begin() + static_cast<std::ptrdiff_t>(w), 0.0) / w;
    result->last_window_loss = std::accumulate(losses.end() - static_cast<std::ptrdiff_t>(w), losses.end(), 0.0) / w;
  }
  return model;
}

}  // namespace codecsep
