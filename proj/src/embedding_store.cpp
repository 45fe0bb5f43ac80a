#include "codecsep/embedding_store.hpp"

#include <fstream>

namespace codecsep {

namespace {

std::string record_name(const std::string& id) {
  std::string out;
  for (char c : id) out += (c == '/' || c == '\\' || c == ':') ? '_' : c;
  return "records/" + out + ".bin";
}

}  // namespace

EmbeddingStore EmbeddingStore::build(const CodecModel& model,
                                     const std::vector<std::pair<std::string, Waveform>>& items,
                                     const std::filesystem::path& dir) {
  if (!model.frozen()) throw std::invalid_argument("embedding store: codec must be frozen");
  namespace fs = std::filesystem;
  fs::create_directories(dir / "records");
  const std::string hash = hash_hex(model.config().hash());
  EmbeddingStore store;
  store.dir_ = dir;
  store.frame_rate_hz_ = static_cast<double>(model.config().sample_rate_hz) / model.config().total_stride();

  std::ofstream index(dir / "index.jsonl", std::ios::trunc);
  if (!index) throw std::runtime_error("cannot write " + (dir / "index.jsonl").string());
  for (const auto& [id, wave] : items) {
    if (store.index_.count(id)) throw std::invalid_argument("embedding store: duplicate id '" + id + "'");
    const EmbeddingSeq e = encode(model, wave);
    StoreEntry entry{id, record_name(id), e.num_frames(), e.dim(), e.source_len_samples, hash};
    TensorBundle bundle;
    bundle.config = {{"kind", "embedding"}, {"id", id}, {"codec_hash", hash},
                     {"source_len_samples", e.source_len_samples}};
    bundle.tensors.push_back({"frames", e.frames});
    save_bundle(dir / entry.path, bundle, Dtype::f64);
    index << nlohmann::json{{"id", id},
                            {"path", entry.path},
                            {"T", entry.frames},
                            {"D", entry.dim},
                            {"source_len_samples", entry.source_len_samples},
                            {"codec_hash", hash}}
                 .dump()
          << '\n';
    store.index_.emplace(id, std::move(entry));
  }
  std::ofstream meta(dir / "store.json", std::ios::trunc);
  meta << nlohmann::json{{"codec", model.config().to_json()}, {"codec_hash", hash}}.dump(2) << '\n';
  return store;
}

EmbeddingStore EmbeddingStore::open(const std::filesystem::path& dir, const CodecConfig& expected) {
  std::ifstream meta_in(dir / "store.json");
  if (!meta_in) throw std::runtime_error("no embedding store at " + dir.string());
  const auto meta = nlohmann::json::parse(meta_in);
  const CodecConfig built = CodecConfig::from_json(meta.at("codec"));
  if (built.embedding_dim != expected.embedding_dim)
    throw StoreMismatchError("embedding store has D=" + std::to_string(built.embedding_dim) +
                             ", pipeline expects D=" + std::to_string(expected.embedding_dim));
  if (built.total_stride() != expected.total_stride())
    throw StoreMismatchError("embedding store stride differs from the codec stride");
  if (built.sample_rate_hz != expected.sample_rate_hz)
    throw StoreMismatchError("embedding store sample rate differs from the codec rate");
  const std::string hash = hash_hex(expected.hash());
  if (meta.at("codec_hash").get<std::string>() != hash)
    throw StoreMismatchError("embedding store was built by a different codec configuration");

  EmbeddingStore store;
  store.dir_ = dir;
  store.frame_rate_hz_ = static_cast<double>(expected.sample_rate_hz) / expected.total_stride();
  std::ifstream index(dir / "index.jsonl");
  std::string line;
  while (std::getline(index, line)) {
    if (line.empty()) continue;
    const auto j = nlohmann::json::parse(line);
    StoreEntry e{j.at("id").get<std::string>(), j.at("path").get<std::string>(), j.at("T").get<std::size_t>(),
                 j.at("D").get<std::size_t>(), j.at("source_len_samples").get<std::size_t>(),
                 j.at("codec_hash").get<std::string>()};
    if (e.codec_hash != hash || e.dim != static_cast<std::size_t>(expected.embedding_dim))
      throw StoreMismatchError("embedding store record '" + e.id + "' does not match the codec");
    store.index_.emplace(e.id, std::move(e));
  }
  return store;
}

std::vector<std::string> EmbeddingStore::ids() const {
  std::vector<std::string> out;
  for (const auto& [id, e] : index_) out.push_back(id);
  return out;
}

EmbeddingSeq EmbeddingStore::load(const std::string& id) const {
  auto it = index_.find(id);
  if (it == index_.end()) throw std::out_of_range("embedding store has no item '" + id + "'");
  const TensorBundle b = load_bundle(dir_ / it->second.path);
  if (b.config.value("codec_hash", "") != it->second.codec_hash)
    throw StoreMismatchError("record '" + id + "' hash differs from index");
  EmbeddingSeq e;
  e.frames = b.get("frames");
  e.frame_rate_hz = frame_rate_hz_;
  e.source_len_samples = it->second.source_len_samples;
  if (e.frames.rank() != 2 || e.frames.dim(0) != it->second.frames || e.frames.dim(1) != it->second.dim)
    throw StoreMismatchError("record '" + id + "' shape differs from index");
  return e;
}

EmbeddingStore precompute_target_embeddings(const CodecModel& model,
                                            const std::vector<std::pair<std::string, Waveform>>& sources,
                                            const std::filesystem::path& dir) {
  return EmbeddingStore::build(model, sources, dir);
}

}  // namespace codecsep
