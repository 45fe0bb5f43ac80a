// Toy neural audio codec: strided-conv encoder, residual vector quantizer and
// transposed-conv decoder.
#pragma once

#include "codecsep/audio.hpp"
#include "codecsep/tensor.hpp"
#include "codecsep/tensor_io.hpp"

#include <nlohmann/json.hpp>

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

namespace codecsep {

enum class Activation { snake, elu };

std::string to_string(Activation a);
Activation activation_from_string(const std::string& s);

/// Applies the configured nonlinearity (snake alpha ignored for elu).
Tensor activate(const Tensor& x, Activation a, double snake_alpha);

struct CodecConfig {
  int sample_rate_hz = 16000;
  std::vector<int> strides{2, 4, 8};
  /// channels[0] is the stem width; channels[i + 1] follows stride stage i.
  std::vector<int> channels{8, 16, 32, 64};
  int embedding_dim = 64;
  int num_codebooks = 4;
  int codebook_size = 64;
  Activation activation = Activation::snake;
  double snake_alpha = 1.0;
  std::uint64_t seed = 0;

  int total_stride() const;
  void validate() const;
  nlohmann::json to_json() const;
  static CodecConfig from_json(const nlohmann::json& j);
  /// Hash of the fields that determine embedding layout and values.
  std::uint64_t hash() const;
};

/// Time-major codec latents.
struct EmbeddingSeq {
  Tensor frames;  // [T x D]
  double frame_rate_hz = 0.0;
  std::size_t source_len_samples = 0;

  std::size_t num_frames() const { return frames.dim(0); }
  std::size_t dim() const { return frames.dim(1); }
};

class CodecModel {
 public:
  explicit CodecModel(CodecConfig config);

  const CodecConfig& config() const { return config_; }
  bool frozen() const { return frozen_; }
  void freeze();
  void unfreeze();

  /// Every trainable tensor in declaration order (encoder, codebooks, decoder).
  std::vector<NamedTensor> parameters() const;
  std::vector<NamedTensor> encoder_parameters() const;
  std::vector<NamedTensor> decoder_parameters() const;
  const std::vector<Tensor>& codebooks() const { return codebooks_; }

  TensorBundle to_bundle() const;
  static CodecModel from_bundle(const TensorBundle& bundle);
  void save(const std::filesystem::path& path, Dtype dtype = Dtype::f64) const;
  static CodecModel load(const std::filesystem::path& path);

  /// Differentiable encoder on a [1 x L] signal, L a multiple of the total
  /// stride. Returns [L/S x D].
  Tensor encode_tensor(const Tensor& signal) const;
  /// Differentiable decoder on [T x D] latents. Returns [1 x T*S].
  Tensor decode_tensor(const Tensor& frames) const;

 private:
  struct Conv {
    Tensor weight;  // conv: [out x in x K]; transposed: [in x out x K]
    Tensor bias;    // [channels x 1]
    std::size_t stride = 1;
    std::size_t pad = 0;
  };

  Tensor run_conv(const Conv& c, const Tensor& x) const;
  Tensor run_conv_transpose(const Conv& c, const Tensor& x) const;

  CodecConfig config_;
  std::vector<Conv> encoder_;
  std::vector<Conv> decoder_;  // decoder_[1..n_stages] are transposed convs
  std::vector<Tensor> codebooks_;
  bool frozen_ = false;
};

/// Zero-pads on the left to a multiple of the stride, then encodes.
EmbeddingSeq encode(const CodecModel& model, const Waveform& w);
/// Tensor-level variant for signals already at the codec rate.
EmbeddingSeq encode(const CodecModel& model, std::span<const double> samples);

/// Decodes and, when source_len_samples is set, drops the left padding.
Waveform decode(const CodecModel& model, const EmbeddingSeq& e);
/// Differentiable decode truncated to `length` samples (drops left padding). Returns [length].
Tensor decode_to_length(const CodecModel& model, const Tensor& frames, std::size_t length);

struct RvqResult {
  std::vector<std::vector<std::size_t>> codes;  // [T][K]
  Tensor quantized;                             // straight-through, [T x D]
  Tensor commit_loss;                           // mean squared final residual
  Tensor residual;                              // final residual values, detached
};

RvqResult rvq_quantize(const CodecModel& model, const Tensor& frames);
inline RvqResult rvq_quantize(const CodecModel& model, const EmbeddingSeq& e) { return rvq_quantize(model, e.frames); }

struct PretrainOptions {
  int steps = 2000;
  int batch_size = 4;
  std::size_t crop_samples = 4096;
  double lr = 1e-3;
  double commit_weight = 0.25;
  double mix_prob = 0.5;
  std::uint64_t seed = 0;
  int log_window = 50;
};

struct PretrainResult {
  std::vector<double> step_losses;
  double first_window_loss = 0.0;
  double last_window_loss = 0.0;
};

/// Minimizes waveform MSE + commit_weight * commitment with Adam and returns
/// the frozen model.
CodecModel pretrain_codec(const CodecConfig& config, const std::vector<Waveform>& corpus,
                          const PretrainOptions& opts, PretrainResult* result = nullptr);

/// Synthetic multi-harmonic clips at the codec rate.
std::vector<Waveform> make_codec_corpus(std::size_t count, double clip_s, int sample_rate_hz, std::uint64_t seed);

}  // namespace codecsep
