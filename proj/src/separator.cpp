#include "codecsep/separator.hpp"

#include <cmath>
#include <random>

namespace codecsep {

void SeparatorConfig::validate() const {
  if (d_model < 1 || n_heads < 1 || d_model % n_heads != 0)
    throw std::invalid_argument("separator: d_model must be a positive multiple of n_heads");
  if (n_blocks < 0) throw std::invalid_argument("separator: n_blocks must be >= 0");
  if (ffn_dim < 1) throw std::invalid_argument("separator: ffn_dim must be positive");
  if (num_speakers < 2) throw std::invalid_argument("separator: num_speakers must be >= 2");
  if (codec_dim < 1) throw std::invalid_argument("separator: codec_dim must be positive");
  if (!(snake_alpha > 0.0)) throw std::invalid_argument("separator: snake_alpha must be positive");
}

nlohmann::json SeparatorConfig::to_json() const {
  return {{"d_model", d_model},
          {"n_blocks", n_blocks},
          {"n_heads", n_heads},
          {"ffn_dim", ffn_dim},
          {"num_speakers", num_speakers},
          {"codec_dim", codec_dim},
          {"gating_activation", to_string(gating_activation)},
          {"snake_alpha", snake_alpha},
          {"positional_encoding", positional_encoding},
          {"seed", seed}};
}

SeparatorConfig SeparatorConfig::from_json(const nlohmann::json& j) {
  SeparatorConfig c;
  c.d_model = j.value("d_model", c.d_model);
  c.n_blocks = j.value("n_blocks", c.n_blocks);
  c.n_heads = j.value("n_heads", c.n_heads);
  c.ffn_dim = j.value("ffn_dim", c.ffn_dim);
  c.num_speakers = j.value("num_speakers", c.num_speakers);
  c.codec_dim = j.value("codec_dim", c.codec_dim);
  c.gating_activation = activation_from_string(j.value("gating_activation", to_string(c.gating_activation)));
  c.snake_alpha = j.value("snake_alpha", c.snake_alpha);
  c.positional_encoding = j.value("positional_encoding", c.positional_encoding);
  c.seed = j.value("seed", c.seed);
  c.validate();
  return c;
}

std::size_t param_count(const SeparatorConfig& c) {
  c.validate();
  const auto d = static_cast<std::size_t>(c.d_model);
  const auto D = static_cast<std::size_t>(c.codec_dim);
  const auto f = static_cast<std::size_t>(c.ffn_dim);
  const auto n = static_cast<std::size_t>(c.num_speakers);
  const std::size_t block = 2 * d + 4 * d * d + 3 * d + 2 * d + (d * f + f) + (f * d + d);
  return (D * d + d) + static_cast<std::size_t>(c.n_blocks) * block + (d * D + D) + (D * n * D + n * D);
}

Tensor sinusoidal_encoding(std::size_t frames, std::size_t d_model) {
  std::vector<double> v(frames * d_model);
  for (std::size_t t = 0; t < frames; ++t)
    for (std::size_t i = 0; i < d_model; ++i) {
      const double rate = std::pow(10000.0, -static_cast<double>(2 * (i / 2)) / static_cast<double>(d_model));
      const double angle = static_cast<double>(t) * rate;
      v[t * d_model + i] = (i % 2 == 0) ? std::sin(angle) : std::cos(angle);
    }
  return Tensor::from({frames, d_model}, std::move(v));
}

Tensor transformer_block(const Tensor& x, const BlockParams& p, int n_heads, AttentionTrace* trace) {
  if (x.rank() != 2 || x.dim(1) != p.wq.dim(0)) throw ShapeError("transformer_block: input width mismatch");
  const std::size_t d = x.dim(1);
  const std::size_t dh = d / static_cast<std::size_t>(n_heads);
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));

  Tensor h = layer_norm(x, p.ln1_gamma, p.ln1_beta);
  Tensor q = linear(h, p.wq, p.bq);
  Tensor k = matmul(h, p.wk);  // a key bias shifts every score of a query equally and cancels in softmax
  Tensor v = linear(h, p.wv, p.bv);
  std::vector<Tensor> heads;
  for (int i = 0; i < n_heads; ++i) {
    const std::size_t lo = static_cast<std::size_t>(i) * dh;
    Tensor qi = slice_last(q, lo, lo + dh);
    Tensor ki = slice_last(k, lo, lo + dh);
    Tensor vi = slice_last(v, lo, lo + dh);
    Tensor attn = softmax(mul_scalar(matmul(qi, transpose(ki)), scale));
    if (trace) trace->weights.push_back(attn);
    heads.push_back(matmul(attn, vi));
  }
  Tensor merged = n_heads == 1 ? heads.front() : concat_last(heads);
  Tensor y = add(x, linear(merged, p.wo, p.bo));

  Tensor g = layer_norm(y, p.ln2_gamma, p.ln2_beta);
  Tensor ff = linear(elu(linear(g, p.ffn_w1, p.ffn_b1)), p.ffn_w2, p.ffn_b2);
  return add(y, ff);
}

namespace {

Tensor xavier(std::mt19937_64& rng, std::size_t in, std::size_t out) {
  const double a = std::sqrt(6.0 / static_cast<double>(in + out));
  std::uniform_real_distribution<double> dist(-a, a);
  std::vector<double> v(in * out);
  for (auto& x : v) x = dist(rng);
  return Tensor::from({in, out}, std::move(v), true);
}

Tensor zeros_vec(std::size_t n) { return Tensor::zeros({n}, true); }
Tensor ones_vec(std::size_t n) { return Tensor::full({n}, 1.0, true); }

}  // namespace

Separator::Separator(SeparatorConfig config) : config_(std::move(config)) {
  config_.validate();
  std::mt19937_64 rng(config_.seed);
  const auto d = static_cast<std::size_t>(config_.d_model);
  const auto D = static_cast<std::size_t>(config_.codec_dim);
  const auto f = static_cast<std::size_t>(config_.ffn_dim);
  const auto n = static_cast<std::size_t>(config_.num_speakers);
  in_w_ = xavier(rng, D, d);
  in_b_ = zeros_vec(d);
  for (int b = 0; b < config_.n_blocks; ++b) {
    BlockParams p;
    p.ln1_gamma = ones_vec(d);
    p.ln1_beta = zeros_vec(d);
    p.wq = xavier(rng, d, d);
    p.bq = zeros_vec(d);
    p.wk = xavier(rng, d, d);
    p.wv = xavier(rng, d, d);
    p.bv = zeros_vec(d);
    p.wo = xavier(rng, d, d);
    p.bo = zeros_vec(d);
    p.ln2_gamma = ones_vec(d);
    p.ln2_beta = zeros_vec(d);
    p.ffn_w1 = xavier(rng, d, f);
    p.ffn_b1 = zeros_vec(f);
    p.ffn_w2 = xavier(rng, f, d);
    p.ffn_b2 = zeros_vec(d);
    blocks_.push_back(std::move(p));
  }
  out_w_ = xavier(rng, d, D);
  out_b_ = zeros_vec(D);
  mask_w_ = xavier(rng, D, n * D);
  mask_b_ = zeros_vec(n * D);
}

std::vector<NamedTensor> Separator::parameters() const {
  std::vector<NamedTensor> out{{"adapter_in.weight", in_w_}, {"adapter_in.bias", in_b_}};
  for (std::size_t b = 0; b < blocks_.size(); ++b) {
    const auto& p = blocks_[b];
    const std::string pre = "block." + std::to_string(b) + ".";
    out.push_back({pre + "ln1.gamma", p.ln1_gamma});
    out.push_back({pre + "ln1.beta", p.ln1_beta});
    out.push_back({pre + "attn.wq", p.wq});
    out.push_back({pre + "attn.bq", p.bq});
    out.push_back({pre + "attn.wk", p.wk});
    out.push_back({pre + "attn.wv", p.wv});
    out.push_back({pre + "attn.bv", p.bv});
    out.push_back({pre + "attn.wo", p.wo});
    out.push_back({pre + "attn.bo", p.bo});
    out.push_back({pre + "ln2.gamma", p.ln2_gamma});
    out.push_back({pre + "ln2.beta", p.ln2_beta});
    out.push_back({pre + "ffn.w1", p.ffn_w1});
    out.push_back({pre + "ffn.b1", p.ffn_b1});
    out.push_back({pre + "ffn.w2", p.ffn_w2});
    out.push_back({pre + "ffn.b2", p.ffn_b2});
  }
  out.push_back({"adapter_out.weight", out_w_});
  out.push_back({"adapter_out.bias", out_b_});
  out.push_back({"mask_gen.weight", mask_w_});
  out.push_back({"mask_gen.bias", mask_b_});
  return out;
}

std::size_t Separator::num_parameters() const {
  std::size_t n = 0;
  for (const auto& p : parameters()) n += p.value.numel();
  return n;
}

Tensor Separator::mask_logits(const Tensor& mix, AttentionTrace* trace) const {
  const auto D = static_cast<std::size_t>(config_.codec_dim);
  if (mix.rank() != 2 || mix.dim(1) != D)
    throw ShapeError("separator: mixture embedding must be [T x " + std::to_string(D) + "]");
  Tensor h = linear(mix, in_w_, in_b_);
  if (config_.positional_encoding)
    h = add(h, sinusoidal_encoding(mix.dim(0), static_cast<std::size_t>(config_.d_model)));
  for (const auto& block : blocks_) h = transformer_block(h, block, config_.n_heads, trace);
  Tensor y = linear(h, out_w_, out_b_);
  return linear(y, mask_w_, mask_b_);
}

std::vector<Tensor> Separator::forward(const Tensor& mix, const std::optional<Tensor>& fixed_logits,
                                       AttentionTrace* trace) const {
  const auto D = static_cast<std::size_t>(config_.codec_dim);
  const auto n = static_cast<std::size_t>(config_.num_speakers);
  if (mix.rank() != 2 || mix.dim(1) != D)
    throw ShapeError("separator: mixture embedding must be [T x " + std::to_string(D) + "]");
  Tensor logits = fixed_logits ? *fixed_logits : mask_logits(mix, trace);
  if (logits.rank() != 2 || logits.dim(0) != mix.dim(0) || logits.dim(1) != n * D)
    throw ShapeError("separator: mask logits must be [T x N_spk*D]");
  std::vector<Tensor> out;
  for (std::size_t k = 0; k < n; ++k) {
    Tensor m = slice_last(logits, k * D, (k + 1) * D);
    out.push_back(mul(activate(m, config_.gating_activation, config_.snake_alpha), mix));
  }
  return out;
}

TensorBundle Separator::to_bundle() const {
  TensorBundle b;
  b.config = {{"kind", "separator"}, {"separator", config_.to_json()}};
  b.tensors = parameters();
  return b;
}

void Separator::load_values(const TensorBundle& bundle) {
  for (auto& p : parameters()) {
    const Tensor& stored = bundle.get(p.name);
    if (stored.shape() != p.value.shape()) throw FormatError("shape mismatch for separator tensor '" + p.name + "'");
    auto dst = p.value.mutable_data();
    std::copy(stored.data().begin(), stored.data().end(), dst.begin());
  }
}

Separator Separator::from_bundle(const TensorBundle& bundle) {
  if (bundle.config.value("kind", "") != "separator") throw FormatError("bundle does not hold a separator");
  Separator sep(SeparatorConfig::from_json(bundle.config.at("separator")));
  sep.load_values(bundle);
  return sep;
}

std::vector<EmbeddingSeq> forward_separator(const Separator& sep, const EmbeddingSeq& mix) {
  std::vector<EmbeddingSeq> out;
  for (auto& t : sep.forward(mix.frames)) out.push_back({t, mix.frame_rate_hz, mix.source_len_samples});
  return out;
}

}  // namespace codecsep
