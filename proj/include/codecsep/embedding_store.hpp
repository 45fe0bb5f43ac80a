// On-disk cache of target embeddings, keyed by item id and bound to the
// codec configuration that produced them.
#pragma once

#include "codecsep/codec.hpp"

#include <filesystem>
#include <map>
#include <string>
#include <utility>
#include <vector>

namespace codecsep {

class StoreMismatchError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct StoreEntry {
  std::string id;
  std::string path;  // relative to the store directory
  std::size_t frames = 0;
  std::size_t dim = 0;
  std::size_t source_len_samples = 0;
  std::string codec_hash;
};

class EmbeddingStore {
 public:
  /// Encodes every waveform and writes records plus index.jsonl under `dir`.
  static EmbeddingStore build(const CodecModel& model, const std::vector<std::pair<std::string, Waveform>>& items,
                              const std::filesystem::path& dir);

  /// Opens an existing store, rejecting it unless it was built by a codec
  /// with the same configuration hash, embedding width and stride.
  static EmbeddingStore open(const std::filesystem::path& dir, const CodecConfig& expected);

  bool contains(const std::string& id) const { return index_.count(id) != 0; }
  std::size_t size() const { return index_.size(); }
  std::vector<std::string> ids() const;
  EmbeddingSeq load(const std::string& id) const;

 private:
  std::filesystem::path dir_;
  double frame_rate_hz_ = 0.0;
  std::map<std::string, StoreEntry> index_;
};

/// Builds the store for every source of the given items.
EmbeddingStore precompute_target_embeddings(const CodecModel& model,
                                            const std::vector<std::pair<std::string, Waveform>>& sources,
                                            const std::filesystem::path& dir);

}  // namespace codecsep
