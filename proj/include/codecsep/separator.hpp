// Mask-gating transformer separator operating on codec embeddings.
#pragma once

#include "codecsep/codec.hpp"
#include "codecsep/tensor.hpp"
#include "codecsep/tensor_io.hpp"

#include <nlohmann/json.hpp>

#include <optional>
#include <vector>

namespace codecsep {

struct SeparatorConfig {
  int d_model = 32;
  int n_blocks = 2;
  int n_heads = 4;
  int ffn_dim = 64;
  int num_speakers = 2;
  int codec_dim = 64;
  Activation gating_activation = Activation::snake;
  double snake_alpha = 1.0;
  bool positional_encoding = true;
  std::uint64_t seed = 0;

  void validate() const;
  nlohmann::json to_json() const;
  static SeparatorConfig from_json(const nlohmann::json& j);
};

/// Exact trainable parameter total for a configuration.
std::size_t param_count(const SeparatorConfig& config);

struct BlockParams {
  Tensor ln1_gamma, ln1_beta;
  Tensor wq, bq, wk, wv, bv, wo, bo;  // no key bias
  Tensor ln2_gamma, ln2_beta;
  Tensor ffn_w1, ffn_b1, ffn_w2, ffn_b2;
};

/// Optional per-head attention maps captured during a forward pass.
struct AttentionTrace {
  std::vector<Tensor> weights;  // one [T x T] per head per block
};

/// Pre-norm block: x + MHSA(LN(x)), then + FFN(LN(.)) with an ELU hidden layer.
Tensor transformer_block(const Tensor& x, const BlockParams& p, int n_heads, AttentionTrace* trace = nullptr);

/// Sinusoidal table [T x d_model].
Tensor sinusoidal_encoding(std::size_t frames, std::size_t d_model);

class Separator {
 public:
  explicit Separator(SeparatorConfig config);

  const SeparatorConfig& config() const { return config_; }
  std::vector<NamedTensor> parameters() const;
  std::size_t num_parameters() const;

  /// Mask logits [T x N_spk*D] for a mixture embedding [T x D].
  Tensor mask_logits(const Tensor& mix, AttentionTrace* trace = nullptr) const;

  /// Per-speaker embeddings act(m_k) * mix. When `fixed_logits` is given the
  /// network is bypassed and those logits are gated instead.
  std::vector<Tensor> forward(const Tensor& mix, const std::optional<Tensor>& fixed_logits = std::nullopt,
                              AttentionTrace* trace = nullptr) const;

  TensorBundle to_bundle() const;
  static Separator from_bundle(const TensorBundle& bundle);
  /// Copies parameter values from a bundle holding the same configuration.
  void load_values(const TensorBundle& bundle);

 private:
  SeparatorConfig config_;
  Tensor in_w_, in_b_;
  std::vector<BlockParams> blocks_;
  Tensor out_w_, out_b_;
  Tensor mask_w_, mask_b_;
};

/// Separated embeddings for a mixture embedding sequence.
std::vector<EmbeddingSeq> forward_separator(const Separator& sep, const EmbeddingSeq& mix);

}  // namespace codecsep
