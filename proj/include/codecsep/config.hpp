// Run configuration: a JSON document with one section per pipeline stage.
//
//   {
//     "seed": 0, "precision": "f64",
//     "data":      { train, valid, test, min_duration_s, max_duration_s,
//                    sample_rate_hz, num_speakers, gain_range_db, seed },
//     "codec":     { sample_rate_hz, strides, channels, embedding_dim,
//                    num_codebooks, codebook_size, activation, snake_alpha, seed },
//     "pretrain":  { steps, corpus_size, heldout_size, clip_s, crop_samples,
//                    batch_size, lr, commit_weight, mix_prob, log_window, seed },
//     "separator": { d_model, n_blocks, n_heads, ffn_dim, num_speakers,
//                    codec_dim, gating_activation, snake_alpha,
//                    positional_encoding, seed },
//     "train":     { loss_type, lr0, epochs, batch_size, patience,
//                    schedule_start_epoch, precompute_embeddings,
//                    quantized_embeddings, profile_seconds, seed },
//     "inputs":    { manifest, codec, separator, embed_cache,
//                    ledger_embedding, ledger_waveform,
//                    timing_embedding, timing_waveform }
//   }
//
// Every key is optional; omitted section seeds inherit the top-level seed.
// Unknown keys are errors.
#pragma once

#include "codecsep/audio.hpp"
#include "codecsep/codec.hpp"
#include "codecsep/separator.hpp"
#include "codecsep/train.hpp"

#include <nlohmann/json.hpp>

#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

namespace codecsep {

class ConfigError : public std::runtime_error {
 public:
  explicit ConfigError(std::vector<std::string> errors);
  const std::vector<std::string>& errors() const { return errors_; }

 private:
  std::vector<std::string> errors_;
};

struct PretrainSection {
  int steps = 2000;
  int corpus_size = 512;
  int heldout_size = 64;
  double clip_s = 1.0;
  PretrainOptions options;
};

struct InputsSection {
  std::string manifest, codec, separator, embed_cache;
  std::string ledger_embedding, ledger_waveform, timing_embedding, timing_waveform;
};

struct AppConfig {
  std::uint64_t seed = 0;
  Precision precision = Precision::f64;
  DatasetSpec data;
  CodecConfig codec;
  PretrainSection pretrain;
  SeparatorConfig separator;
  TrainConfig train;
  InputsSection inputs;

  /// Fully explicit form; parsing it again yields the same configuration.
  nlohmann::json to_json() const;
};

/// Checks the whole document and reports every problem at once.
std::vector<std::string> validate_config(const nlohmann::json& doc);

/// Validates, fills defaults and builds the typed configuration.
AppConfig parse_config(const nlohmann::json& doc);

/// Reads a JSON file; parse failures become ConfigError.
nlohmann::json read_config_file(const std::filesystem::path& path);

/// Applies "a.b=value" overrides. Values parse as JSON when possible and as
/// plain strings otherwise.
void apply_overrides(nlohmann::json& doc, const std::vector<std::string>& overrides);

}  // namespace codecsep
