// Separator training along the two paths: embedding loss (encoder only) and
// waveform loss (encoder and decoder), with MAC and timing ledgers.
#pragma once

#include "codecsep/audio.hpp"
#include "codecsep/codec.hpp"
#include "codecsep/embedding_store.hpp"
#include "codecsep/losses.hpp"
#include "codecsep/metrics.hpp"
#include "codecsep/optim.hpp"
#include "codecsep/separator.hpp"

#include <nlohmann/json.hpp>

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

namespace codecsep {

enum class LossType { embedding, waveform };

std::string to_string(LossType t);
LossType loss_type_from_string(const std::string& s);

struct TrainConfig {
  LossType loss_type = LossType::embedding;
  double lr0 = 1.5e-4;
  int epochs = 20;
  int batch_size = 8;
  int patience = 2;
  int schedule_start_epoch = 5;
  std::uint64_t seed = 0;
  bool precompute_embeddings = true;
  /// Feed RVQ-quantized instead of continuous encoder output to the separator.
  bool quantized_embeddings = false;
  /// Length of the 8 kHz clip used for the MAC profile.
  double profile_seconds = 2.0;
  Precision precision = Precision::f64;

  void validate() const;
  nlohmann::json to_json() const;
  static TrainConfig from_json(const nlohmann::json& j);
};

/// Toy default batch size per path.
int default_batch_size(LossType t);

/// One mixture with its references at both the dataset and the codec rate.
struct SeparationItem {
  std::string id;
  Waveform mixture;               // codec rate
  std::vector<Waveform> sources;  // codec rate, same length as mixture
  Signal mixture_native;          // dataset rate
  std::vector<Signal> sources_native;
  int native_rate_hz = 0;

  // Filled by attach_embeddings; empty when encoding happens on the fly.
  Tensor mix_embedding;
  std::vector<Tensor> target_embeddings;
};

/// Reads one split of a manifest and resamples it to `codec_rate_hz`.
std::vector<SeparationItem> load_split(const Manifest& manifest, const std::string& split, int codec_rate_hz);

/// Store key of a mixture ("<id>/mix") or source ("<id>/s<k>") embedding.
std::string mixture_key(const std::string& id);
std::string source_key(const std::string& id, std::size_t k);

/// Store entries for every mixture and source of the items.
std::vector<std::pair<std::string, Waveform>> store_entries(const std::vector<SeparationItem>& items);

/// Precomputes mixture and target embeddings, from `store` when given.
void attach_embeddings(std::vector<SeparationItem>& items, const CodecModel& codec,
                       const EmbeddingStore* store = nullptr);

struct EpochRecord {
  int epoch = 0;
  double train_loss = 0.0;
  double valid_loss = 0.0;
  double lr = 0.0;       // rate used during the epoch
  double next_lr = 0.0;  // rate after the scheduler update
  int halvings = 0;
  std::size_t steps = 0;
  MacCounter macs;  // forward MACs of the epoch's training steps
};

/// Forward MACs of one training step on a synthetic clip of fixed shape.
struct CostProfile {
  std::size_t native_samples = 0;
  std::size_t codec_samples = 0;
  std::size_t frames = 0;
  int num_speakers = 0;
  MacCounter macs;

  nlohmann::json to_json() const;
  static CostProfile from_json(const nlohmann::json& j);
};

struct RunLedger {
  LossType loss_type = LossType::embedding;
  double initial_valid_loss = 0.0;
  std::vector<EpochRecord> epochs;
  CostProfile profile;

  /// One JSON object per epoch, then {"summary": ...}.
  void write_jsonl(const std::filesystem::path& path) const;
  static RunLedger read_jsonl(const std::filesystem::path& path);
};

/// Wall-clock seconds per epoch and per step; kept apart from the ledger so
/// the ledger stays reproducible byte for byte.
struct TimingRecord {
  int epoch = 0;
  double seconds = 0.0;
  double seconds_per_step = 0.0;
};

class SeparatorTrainer {
 public:
  /// The codec must be frozen; `cfg.loss_type` selects the path.
  SeparatorTrainer(Separator& sep, const CodecModel& codec, TrainConfig cfg);

  const TrainConfig& config() const { return cfg_; }
  const SchedulerState& scheduler() const { return sched_; }
  const AdamState& adam() const { return adam_; }
  int epochs_done() const { return sched_.epoch; }
  std::size_t steps_done() const { return steps_; }

  /// Differentiable per-item training loss (PIT over the configured pair loss).
  PitResult item_loss(const SeparationItem& item) const;

  /// One Adam step on the batch; returns the batch loss.
  double train_step(const std::vector<const SeparationItem*>& batch);

  /// Mean loss over the items without recording a tape.
  double evaluate_loss(const std::vector<SeparationItem>& items) const;

  /// Shuffled pass over `train`, then validation and the scheduler update.
  EpochRecord run_epoch(const std::vector<SeparationItem>& train, const std::vector<SeparationItem>& valid,
                        TimingRecord* timing = nullptr);

  /// Runs the remaining epochs up to cfg.epochs and returns the full ledger.
  RunLedger fit(const std::vector<SeparationItem>& train, const std::vector<SeparationItem>& valid,
                std::vector<TimingRecord>* timings = nullptr);

  /// Separator weights, Adam moments and scheduler state.
  void save_checkpoint(const std::filesystem::path& path) const;
  void load_checkpoint(const std::filesystem::path& path);

 private:
  std::vector<Tensor> params() const;

  Separator& sep_;
  const CodecModel& codec_;
  TrainConfig cfg_;
  AdamState adam_;
  SchedulerState sched_;
  std::size_t steps_ = 0;
  std::optional<double> initial_valid_;
  std::vector<EpochRecord> history_;
};

/// Profiles one training step of the given path on `cfg.profile_seconds` of
/// synthetic audio at `native_rate_hz`, resampled to the codec rate. Target
/// embeddings count as precomputed.
CostProfile profile_training_step(const Separator& sep, const CodecModel& codec, LossType loss_type,
                                  double seconds, int native_rate_hz = 8000);

struct CostRow {
  std::string scope;
  std::uint64_t macs_embed = 0;
  std::uint64_t macs_wave = 0;
  double ratio = 1.0;  // embed / wave, 1.0 when both are zero
};

struct CostReport {
  std::vector<CostRow> rows;  // encoder, separator, decoder, loss, total
  std::optional<double> seconds_per_step_embed, seconds_per_step_wave;

  void write_csv(const std::filesystem::path& path) const;
  /// Rows in GMACs (1e9 MACs), one per training path.
  std::string table_rows() const;
  nlohmann::json to_json() const;
};

/// Compares two profiled ledgers of identical input shapes.
CostReport cost_report(const RunLedger& embed, const RunLedger& wave);

std::vector<TimingRecord> read_timing_jsonl(const std::filesystem::path& path);
void write_timing_jsonl(const std::vector<TimingRecord>& t, const std::filesystem::path& path);

/// Decodes the separator output for each item, returns it to the dataset rate
/// and scores it against the references.
std::vector<MixtureReport> evaluate_separator(const Separator& sep, const CodecModel& codec,
                                              const std::vector<SeparationItem>& items,
                                              bool quantized_embeddings = false);

}  // namespace codecsep
