#pragma once

// Bag/instance data model and the on-disk dataset format.
//
// A dataset directory holds two files:
//
//   manifest.jsonl  line 1: {"format_version":1,"dataset_id":..,"dim":..,"layer_index":..}
//                   then one record per bag:
//                   {"bag_id":..,"offset":..,"t":..,"label":0|1,"split":"train|validation|test",
//                    "perplexity":..,"semantic_consistency":..,"annotation_source":..,
//                    "token_probs":[..],"token_texts":[..],"planted_indices":[..]}
//   embeddings.bin  concatenated little-endian float32 rows, row-major per bag;
//                   "offset" is the byte offset of the bag's first row.
//
// "perplexity", "semantic_consistency", "annotation_source", "token_texts" and
// "planted_indices" are optional on read.

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <span>
#include <sstream>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "json.hpp"
#include "tokenmil/errors.hpp"
#include "tokenmil/rng.hpp"

namespace tokenmil {

enum class Label : int { clean = 0, hallucinated = 1 };

enum class Split { train, validation, test };

enum class AnnotationSource { computed, external };

inline std::string_view to_string(Split s) {
  switch (s) {
    case Split::train: return "train";
    case Split::validation: return "validation";
    case Split::test: return "test";
  }
  return "?";
}

inline Split parse_split(std::string_view s) {
  if (s == "train") return Split::train;
  if (s == "validation") return Split::validation;
  if (s == "test") return Split::test;
  throw DataError("unknown split '" + std::string(s) + "'");
}

inline std::string_view to_string(AnnotationSource s) {
  return s == AnnotationSource::computed ? "computed" : "external";
}

inline AnnotationSource parse_annotation_source(std::string_view s) {
  if (s == "computed") return AnnotationSource::computed;
  if (s == "external") return AnnotationSource::external;
  throw DataError("unknown annotation_source '" + std::string(s) + "'");
}

/// One generated response: t embedding rows of width dim plus per-token probabilities.
struct TokenBag {
  std::string bag_id;
  std::size_t dim = 0;
  std::vector<float> embeddings;  // t * dim, row-major
  std::vector<double> token_probs;
  Label label = Label::clean;
  std::vector<std::string> token_texts;                    // empty when absent
  std::optional<std::vector<std::size_t>> planted_indices;  // synthetic ground truth

  std::size_t token_count() const noexcept { return token_probs.size(); }
  bool positive() const noexcept { return label == Label::hallucinated; }

  std::span<const float> row(std::size_t i) const {
    return std::span<const float>(embeddings).subspan(i * dim, dim);
  }
  std::span<float> row(std::size_t i) { return std::span<float>(embeddings).subspan(i * dim, dim); }
};

struct UncertaintyAnnotation {
  std::string bag_id;
  double sentence_perplexity = 0.0;
  std::optional<double> semantic_consistency;
  AnnotationSource source = AnnotationSource::computed;
};

struct BagEntry {
  std::string bag_id;
  std::uint64_t offset = 0;  // bytes into embeddings.bin
  std::size_t t = 0;
  Label label = Label::clean;
};

struct DatasetManifest {
  static constexpr int kFormatVersion = 1;

  std::string dataset_id;
  std::size_t dim = 0;
  int layer_index = 0;
  std::vector<BagEntry> bags;
  std::map<std::string, Split> splits;
  std::map<std::string, UncertaintyAnnotation> annotations;

  std::size_t bytes_for(const BagEntry& e) const { return e.t * dim * sizeof(float); }

  std::size_t count(Split split, std::optional<Label> label = std::nullopt) const {
    std::size_t n = 0;
    for (const auto& e : bags) {
      auto it = splits.find(e.bag_id);
      if (it == splits.end() || it->second != split) continue;
      if (label && e.label != *label) continue;
      ++n;
    }
    return n;
  }
};

/// Throws DataError naming the offending field when a bag violates a TokenBag invariant.
inline void validate_bag(const TokenBag& bag) {
  const std::string where = "bag '" + bag.bag_id + "': ";
  if (bag.dim == 0) throw DataError(where + "dim must be positive");
  const std::size_t t = bag.token_probs.size();
  if (t == 0) throw DataError(where + "token_count must be >= 1");
  if (bag.embeddings.size() != t * bag.dim) {
    std::ostringstream msg;
    msg << where << "embeddings has " << bag.embeddings.size() << " values, expected t*dim = " << t
        << "*" << bag.dim;
    throw DataError(msg.str());
  }
  for (std::size_t i = 0; i < t; ++i) {
    const double p = bag.token_probs[i];
    if (!(p > 0.0 && p <= 1.0)) {
      std::ostringstream msg;
      msg << where << "token_probs[" << i << "] = " << p << " outside (0, 1]";
      throw DataError(msg.str());
    }
  }
  for (std::size_t k = 0; k < bag.embeddings.size(); ++k) {
    if (!std::isfinite(bag.embeddings[k])) {
      std::ostringstream msg;
      msg << where << "embeddings row " << k / bag.dim << " column " << k % bag.dim
          << " is not finite";
      throw DataError(msg.str());
    }
  }
  if (bag.label != Label::clean && bag.label != Label::hallucinated)
    throw DataError(where + "label must be 0 or 1");
  if (!bag.token_texts.empty() && bag.token_texts.size() != t)
    throw DataError(where + "token_texts length differs from token_count");
  if (bag.planted_indices) {
    for (auto idx : *bag.planted_indices)
      if (idx >= t) throw DataError(where + "planted_indices entry out of range");
  }
}

/// Manifest with entries in bag order, contiguous offsets and every bag in the train split.
inline DatasetManifest make_manifest(std::string dataset_id, std::size_t dim, int layer_index,
                                     std::span<const TokenBag> bags) {
  DatasetManifest m;
  m.dataset_id = std::move(dataset_id);
  m.dim = dim;
  m.layer_index = layer_index;
  std::uint64_t offset = 0;
  for (const auto& b : bags) {
    m.bags.push_back({b.bag_id, offset, b.token_count(), b.label});
    m.splits[b.bag_id] = Split::train;
    offset += b.token_count() * dim * sizeof(float);
  }
  return m;
}

/// Manifest-level invariants. Reports overlapping offsets by naming both bags.
/// `file_size` enables the range check against embeddings.bin.
inline void validate_manifest(const DatasetManifest& m,
                              std::optional<std::uint64_t> file_size = std::nullopt) {
  if (m.dim == 0) throw DataError("manifest: dim must be positive");
  std::set<std::string> seen;
  for (std::size_t i = 0; i < m.bags.size(); ++i) {
    const auto& e = m.bags[i];
    if (!seen.insert(e.bag_id).second) throw DataError("manifest: duplicate bag_id '" + e.bag_id + "'");
    if (e.t == 0) throw DataError("manifest: bag '" + e.bag_id + "' has t = 0");
    if (!m.splits.contains(e.bag_id))
      throw DataError("manifest: bag '" + e.bag_id + "' has no split assignment");
    if (i > 0) {
      const auto& prev = m.bags[i - 1];
      if (e.offset < prev.offset + m.bytes_for(prev)) {
        throw DataError("manifest: offsets of bags '" + prev.bag_id + "' and '" + e.bag_id +
                        "' overlap or are not increasing");
      }
    }
    if (file_size && e.offset + m.bytes_for(e) > *file_size) {
      throw DataError("manifest: bag '" + e.bag_id + "' offset " + std::to_string(e.offset) +
                      " out of range of tensor file (" + std::to_string(*file_size) + " bytes)");
    }
  }
  if (m.splits.size() != m.bags.size())
    throw DataError("manifest: split map names bags not present in the bag list");
  for (const auto& [id, a] : m.annotations) {
    if (a.sentence_perplexity < 0.0 || !std::isfinite(a.sentence_perplexity))
      throw DataError("bag '" + id + "': sentence_perplexity must be finite and >= 0");
    if (a.semantic_consistency &&
        !(*a.semantic_consistency > 0.0 && *a.semantic_consistency <= 1.0))
      throw DataError("bag '" + id + "': semantic_consistency outside (0, 1]");
  }
}

/// Both labels must be present among training bags.
inline void require_trainable(const DatasetManifest& m) {
  if (m.count(Split::train, Label::hallucinated) == 0)
    throw DataError("dataset '" + m.dataset_id + "': train split lacks positive bags");
  if (m.count(Split::train, Label::clean) == 0)
    throw DataError("dataset '" + m.dataset_id + "': train split lacks negative bags");
}

namespace detail {

inline void write_f32_le(std::ostream& out, std::span<const float> values) {
  if constexpr (std::endian::native == std::endian::little) {
    out.write(reinterpret_cast<const char*>(values.data()),
              static_cast<std::streamsize>(values.size() * sizeof(float)));
  } else {
    for (float v : values) {
      auto bits = std::bit_cast<std::uint32_t>(v);
      char bytes[4];
      for (int k = 0; k < 4; ++k) bytes[k] = static_cast<char>((bits >> (8 * k)) & 0xffu);
      out.write(bytes, 4);
    }
  }
}

inline void read_f32_le(std::istream& in, std::span<float> values) {
  in.read(reinterpret_cast<char*>(values.data()),
          static_cast<std::streamsize>(values.size() * sizeof(float)));
  if constexpr (std::endian::native != std::endian::little) {
    for (auto& v : values) {
      auto bits = std::bit_cast<std::uint32_t>(v);
      bits = ((bits & 0xffu) << 24) | ((bits & 0xff00u) << 8) | ((bits >> 8) & 0xff00u) | (bits >> 24);
      v = std::bit_cast<float>(bits);
    }
  }
}

struct BagSideData {
  std::vector<double> token_probs;
  std::vector<std::string> token_texts;
  std::optional<std::vector<std::size_t>> planted_indices;
};

}  // namespace detail

inline constexpr const char* kManifestFile = "manifest.jsonl";
inline constexpr const char* kTensorFile = "embeddings.bin";

/// Writes manifest.jsonl and embeddings.bin. Offsets are recomputed from bag
/// order, so the manifest's own offsets need not be filled in.
inline void write_dataset(const DatasetManifest& manifest, std::span<const TokenBag> bags,
                          const std::filesystem::path& directory) {
  namespace fs = std::filesystem;
  if (bags.empty() || manifest.bags.empty()) throw DataError("empty dataset");
  if (manifest.dim == 0) throw DataError("manifest: dim must be positive");

  std::unordered_map<std::string_view, const TokenBag*> by_id;
  for (const auto& b : bags) {
    if (!by_id.emplace(b.bag_id, &b).second) throw DataError("duplicate bag_id '" + b.bag_id + "'");
  }
  if (by_id.size() != manifest.bags.size())
    throw DataError("manifest lists " + std::to_string(manifest.bags.size()) + " bags but " +
                    std::to_string(by_id.size()) + " were supplied");

  std::set<std::string> manifest_ids;
  for (const auto& e : manifest.bags) {
    if (!manifest_ids.insert(e.bag_id).second)
      throw DataError("duplicate bag_id '" + e.bag_id + "'");
    auto it = by_id.find(e.bag_id);
    if (it == by_id.end()) throw DataError("manifest bag '" + e.bag_id + "' not supplied");
    const TokenBag& b = *it->second;
    if (b.dim != manifest.dim)
      throw DataError("bag '" + b.bag_id + "': dimension mismatch (" + std::to_string(b.dim) +
                      " vs manifest " + std::to_string(manifest.dim) + ")");
    if (b.token_count() != e.t) throw DataError("bag '" + b.bag_id + "': t mismatch with manifest");
    if (b.label != e.label) throw DataError("bag '" + b.bag_id + "': label mismatch with manifest");
    if (!manifest.splits.contains(e.bag_id))
      throw DataError("bag '" + b.bag_id + "' has no split assignment");
    validate_bag(b);
  }

  std::error_code ec;
  fs::create_directories(directory, ec);
  std::ofstream tensor(directory / kTensorFile, std::ios::binary | std::ios::trunc);
  std::ofstream lines(directory / kManifestFile, std::ios::trunc);
  if (!tensor || !lines) throw DataError("cannot write dataset to " + directory.string());

  nlohmann::json header = {{"format_version", DatasetManifest::kFormatVersion},
                           {"dataset_id", manifest.dataset_id},
                           {"dim", manifest.dim},
                           {"layer_index", manifest.layer_index}};
  lines << header.dump() << '\n';

  std::uint64_t offset = 0;
  for (const auto& e : manifest.bags) {
    const TokenBag& b = *by_id.at(e.bag_id);
    detail::write_f32_le(tensor, b.embeddings);

    nlohmann::json rec;
    rec["bag_id"] = e.bag_id;
    rec["offset"] = offset;
    rec["t"] = e.t;
    rec["label"] = static_cast<int>(e.label);
    rec["split"] = to_string(manifest.splits.at(e.bag_id));
    if (auto it = manifest.annotations.find(e.bag_id); it != manifest.annotations.end()) {
      rec["perplexity"] = it->second.sentence_perplexity;
      if (it->second.semantic_consistency)
        rec["semantic_consistency"] = *it->second.semantic_consistency;
      rec["annotation_source"] = to_string(it->second.source);
    }
    rec["token_probs"] = b.token_probs;
    if (!b.token_texts.empty()) rec["token_texts"] = b.token_texts;
    if (b.planted_indices) rec["planted_indices"] = *b.planted_indices;
    lines << rec.dump() << '\n';
    offset += b.embeddings.size() * sizeof(float);
  }
  tensor.flush();
  lines.flush();
  if (!tensor || !lines) throw DataError("write failed under " + directory.string());
}

/// Random-access view of a dataset directory. Bag payloads are read on demand;
/// every accessor opens its own stream, so concurrent reads are safe.
class DatasetReader {
 public:
  static DatasetReader open(const std::filesystem::path& directory) {
    namespace fs = std::filesystem;
    DatasetReader r;
    r.directory_ = directory;
    const auto manifest_path = directory / kManifestFile;
    const auto tensor_path = directory / kTensorFile;
    if (!fs::exists(manifest_path)) throw DataError("manifest file not found: " + manifest_path.string());
    if (!fs::exists(tensor_path)) throw DataError("tensor file not found: " + tensor_path.string());
    r.tensor_path_ = tensor_path;
    const std::uint64_t file_size = fs::file_size(tensor_path);

    std::ifstream in(manifest_path);
    std::string line;
    if (!std::getline(in, line)) throw DataError("corrupt header: manifest is empty");
    try {
      auto header = nlohmann::json::parse(line);
      const int version = header.at("format_version").get<int>();
      if (version != DatasetManifest::kFormatVersion)
        throw DataError("corrupt header: unsupported format_version " + std::to_string(version));
      r.manifest_.dataset_id = header.at("dataset_id").get<std::string>();
      const auto dim = header.at("dim").get<std::int64_t>();
      if (dim <= 0) throw DataError("corrupt header: dim must be positive");
      r.manifest_.dim = static_cast<std::size_t>(dim);
      r.manifest_.layer_index = header.at("layer_index").get<int>();
    } catch (const nlohmann::json::exception& ex) {
      throw DataError(std::string("corrupt header: ") + ex.what());
    }

    std::size_t line_no = 1;
    while (std::getline(in, line)) {
      ++line_no;
      if (line.empty()) continue;
      try {
        auto rec = nlohmann::json::parse(line);
        BagEntry e;
        e.bag_id = rec.at("bag_id").get<std::string>();
        e.offset = rec.at("offset").get<std::uint64_t>();
        e.t = rec.at("t").get<std::size_t>();
        const int label = rec.at("label").get<int>();
        if (label != 0 && label != 1)
          throw DataError("bag '" + e.bag_id + "': label must be 0 or 1");
        e.label = static_cast<Label>(label);
        r.manifest_.splits[e.bag_id] = parse_split(rec.at("split").get<std::string>());

        detail::BagSideData side;
        side.token_probs = rec.at("token_probs").get<std::vector<double>>();
        if (side.token_probs.size() != e.t)
          throw DataError("bag '" + e.bag_id + "': token_probs length " +
                          std::to_string(side.token_probs.size()) + " != t " + std::to_string(e.t));
        if (rec.contains("token_texts"))
          side.token_texts = rec["token_texts"].get<std::vector<std::string>>();
        if (rec.contains("planted_indices"))
          side.planted_indices = rec["planted_indices"].get<std::vector<std::size_t>>();

        if (rec.contains("perplexity") || rec.contains("semantic_consistency")) {
          UncertaintyAnnotation a;
          a.bag_id = e.bag_id;
          a.sentence_perplexity = rec.value("perplexity", 0.0);
          if (rec.contains("semantic_consistency"))
            a.semantic_consistency = rec["semantic_consistency"].get<double>();
          if (rec.contains("annotation_source"))
            a.source = parse_annotation_source(rec["annotation_source"].get<std::string>());
          r.manifest_.annotations[e.bag_id] = a;
        }
        if (r.side_.contains(e.bag_id)) throw DataError("manifest: duplicate bag_id '" + e.bag_id + "'");
        r.index_[e.bag_id] = r.manifest_.bags.size();
        r.side_.emplace(e.bag_id, std::move(side));
        r.manifest_.bags.push_back(std::move(e));
      } catch (const nlohmann::json::exception& ex) {
        throw DataError("manifest line " + std::to_string(line_no) + ": " + ex.what());
      }
    }
    validate_manifest(r.manifest_, file_size);
    return r;
  }

  const DatasetManifest& manifest() const noexcept { return manifest_; }
  const std::filesystem::path& directory() const noexcept { return directory_; }
  std::size_t size() const noexcept { return manifest_.bags.size(); }

  TokenBag bag_at(std::size_t index) const {
    const BagEntry& e = manifest_.bags.at(index);
    const auto& side = side_.at(e.bag_id);
    TokenBag b;
    b.bag_id = e.bag_id;
    b.dim = manifest_.dim;
    b.label = e.label;
    b.token_probs = side.token_probs;
    b.token_texts = side.token_texts;
    b.planted_indices = side.planted_indices;
    b.embeddings.resize(e.t * manifest_.dim);

    std::ifstream in(tensor_path_, std::ios::binary);
    if (!in) throw DataError("tensor file not found: " + tensor_path_.string());
    in.seekg(static_cast<std::streamoff>(e.offset));
    detail::read_f32_le(in, b.embeddings);
    if (!in) throw DataError("bag '" + e.bag_id + "': short read from tensor file");
    validate_bag(b);
    return b;
  }

  TokenBag bag(std::string_view bag_id) const {
    auto it = index_.find(std::string(bag_id));
    if (it == index_.end()) throw DataError("unknown bag_id '" + std::string(bag_id) + "'");
    return bag_at(it->second);
  }

  std::vector<TokenBag> load_all() const {
    std::vector<TokenBag> out;
    out.reserve(size());
    for (std::size_t i = 0; i < size(); ++i) out.push_back(bag_at(i));
    return out;
  }

 private:
  std::filesystem::path directory_;
  std::filesystem::path tensor_path_;
  DatasetManifest manifest_;
  std::map<std::string, std::size_t> index_;
  std::map<std::string, detail::BagSideData> side_;
};

/// A fully loaded dataset, the unit the trainer and evaluator work on.
struct Dataset {
  DatasetManifest manifest;
  std::vector<TokenBag> bags;  // same order as manifest.bags

  Split split_of(const TokenBag& b) const { return manifest.splits.at(b.bag_id); }

  std::vector<const TokenBag*> in_split(Split s) const {
    std::vector<const TokenBag*> out;
    for (const auto& b : bags)
      if (split_of(b) == s) out.push_back(&b);
    return out;
  }

  const UncertaintyAnnotation* annotation(const std::string& bag_id) const {
    auto it = manifest.annotations.find(bag_id);
    return it == manifest.annotations.end() ? nullptr : &it->second;
  }
};

inline Dataset read_dataset(const std::filesystem::path& directory) {
  auto reader = DatasetReader::open(directory);
  return Dataset{reader.manifest(), reader.load_all()};
}

inline void write_dataset(const Dataset& ds, const std::filesystem::path& directory) {
  write_dataset(ds.manifest, ds.bags, directory);
}

/// Random train/validation/test assignment, a pure function of (manifest, fractions, seed).
/// Counts are round(f * n) for train and validation, the rest is test. Draws are
/// repeated until the train split holds both labels.
inline DatasetManifest split_dataset(const DatasetManifest& manifest, double train_fraction,
                                     double validation_fraction, std::uint64_t seed) {
  if (!(train_fraction > 0.0) || !(validation_fraction > 0.0) ||
      !(train_fraction + validation_fraction < 1.0))
    throw DataError("split fractions must be positive and sum to less than 1");
  const std::size_t n = manifest.bags.size();
  std::size_t n_pos = 0;
  for (const auto& e : manifest.bags) n_pos += e.label == Label::hallucinated;
  if (n_pos == 0) throw DataError("train split lacks positive bags (dataset has none)");
  if (n_pos == n) throw DataError("train split lacks negative bags (dataset has none)");

  const auto n_train = static_cast<std::size_t>(std::llround(train_fraction * static_cast<double>(n)));
  const auto n_val = static_cast<std::size_t>(std::llround(validation_fraction * static_cast<double>(n)));
  if (n_train == 0 || n_train + n_val > n)
    throw DataError("dataset too small for the requested split fractions (" + std::to_string(n) +
                    " bags)");

  Xoshiro256ss rng(seed);
  std::vector<std::size_t> order(n);
  constexpr int kMaxAttempts = 1000;
  for (int attempt = 0; attempt < kMaxAttempts; ++attempt) {
    for (std::size_t i = 0; i < n; ++i) order[i] = i;
    rng.shuffle(order);
    bool has_pos = false, has_neg = false;
    for (std::size_t i = 0; i < n_train; ++i) {
      (manifest.bags[order[i]].label == Label::hallucinated ? has_pos : has_neg) = true;
    }
    if (!(has_pos && has_neg)) continue;

    DatasetManifest out = manifest;
    out.splits.clear();
    for (std::size_t i = 0; i < n; ++i) {
      const auto& id = manifest.bags[order[i]].bag_id;
      out.splits[id] = i < n_train ? Split::train : (i < n_train + n_val ? Split::validation : Split::test);
    }
    return out;
  }
  throw DataError("dataset too small to place both labels in the train split after " +
                  std::to_string(kMaxAttempts) + " draws (" + std::to_string(n_train) +
                  " train bags, " + std::to_string(n_pos) + " positive of " + std::to_string(n) + ")");
}

}  // namespace tokenmil
