#pragma once
// Dataset model and file formats.
//
//  * manifest: JSON-lines, one image per line with captions, a scene graph,
//    region features (inline or via "features_file") and an embedding key.
//  * embeddings: binary table "RDKE" keyed by string. The image embedding
//    lives at the record's embedding_key; the text embedding of caption j at
//    caption_embedding_key(embedding_key, j), i.e. "<key>#<j>".
//
// All vectors in the embedding table are renormalized to unit L2 at insert
// time, so cosine against them is a plain dot product.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <unordered_map>
#include <vector>

#include <json.hpp>

#include "refdic/common.hpp"

namespace refdic {

struct SceneObject {
  std::string category;
  std::vector<std::string> attributes;
};

struct SceneRelation {
  int subject = 0;
  std::string predicate;
  int object = 0;
};

struct SceneGraph {
  std::vector<SceneObject> objects;
  std::vector<SceneRelation> relations;
};

struct ImageRecord {
  std::string id;
  std::string split;  // train | val | test
  std::vector<std::string> captions;
  SceneGraph graph;
  std::vector<std::vector<double>> features;  // [n_proposals][d_feat]
  std::string embedding_key;
};

inline std::string caption_embedding_key(const std::string& image_key, size_t caption_idx) {
  return image_key + "#" + std::to_string(caption_idx);
}

struct DatasetManifest {
  std::vector<ImageRecord> images;

  void reindex() {
    index_.clear();
    for (size_t i = 0; i < images.size(); ++i) {
      auto [it, fresh] = index_.emplace(images[i].id, i);
      if (!fresh) throw DataError("duplicate image id: " + images[i].id);
    }
  }

  bool has(const std::string& id) const { return index_.count(id) > 0; }

  const ImageRecord& by_id(const std::string& id) const {
    auto it = index_.find(id);
    if (it == index_.end()) throw DataError("unknown image id: " + id);
    return images[it->second];
  }

  std::vector<std::string> split_ids(const std::string& split) const {
    std::vector<std::string> ids;
    for (const auto& img : images)
      if (img.split == split) ids.push_back(img.id);
    return ids;
  }

  int d_feat() const {
    for (const auto& img : images)
      if (!img.features.empty()) return static_cast<int>(img.features[0].size());
    return 0;
  }

 private:
  std::unordered_map<std::string, size_t> index_;
};

// ---- region feature files ----------------------------------------------------
// "RDKF": magic, u32 rows, u32 cols, rows*cols f64 little-endian.

inline void save_features_file(const std::vector<std::vector<double>>& rows,
                               const std::string& path) {
  std::string out = "RDKF";
  put_u32(out, static_cast<uint32_t>(rows.size()));
  put_u32(out, rows.empty() ? 0u : static_cast<uint32_t>(rows[0].size()));
  for (const auto& row : rows) {
    if (!rows.empty() && row.size() != rows[0].size())
      throw DataError("ragged feature rows in " + path);
    for (double v : row) put_f64(out, v);
  }
  write_file_bytes(path, out);
}

inline std::vector<std::vector<double>> load_features_file(const std::string& path) {
  BinReader r(read_file_bytes(path), path);
  if (r.str(4) != "RDKF") throw DataError(path + ": bad magic, expected RDKF");
  uint32_t n_rows = r.u32();
  uint32_t n_cols = r.u32();
  std::vector<std::vector<double>> rows(n_rows, std::vector<double>(n_cols));
  for (auto& row : rows)
    for (auto& v : row) v = r.f64();
  if (!r.at_end()) throw DataError(path + ": trailing bytes");
  return rows;
}

// ---- manifest ----------------------------------------------------------------

namespace detail {

inline std::string lower(std::string s) {
  for (auto& c : s)
    if (c >= 'A' && c <= 'Z') c = static_cast<char>(c - 'A' + 'a');
  return s;
}

inline ImageRecord parse_image_record(const nlohmann::json& j, const std::string& origin,
                                      const std::string& base_dir) {
  auto fail = [&](const std::string& why) -> DataError {
    return DataError(origin + ": " + why);
  };
  if (!j.is_object()) throw fail("record is not a JSON object");
  ImageRecord rec;
  try {
    rec.id = j.at("id").get<std::string>();
    rec.split = j.at("split").get<std::string>();
    rec.captions = j.at("captions").get<std::vector<std::string>>();
    rec.embedding_key = j.at("embedding_key").get<std::string>();
    if (j.contains("objects")) {
      for (const auto& jo : j.at("objects")) {
        SceneObject o;
        o.category = lower(jo.at("category").get<std::string>());
        if (jo.contains("attributes"))
          for (const auto& ja : jo.at("attributes"))
            o.attributes.push_back(lower(ja.get<std::string>()));
        rec.graph.objects.push_back(std::move(o));
      }
    }
    if (j.contains("relations")) {
      for (const auto& jr : j.at("relations")) {
        if (!jr.is_array() || jr.size() != 3)
          throw fail("relation must be [subject, predicate, object]");
        SceneRelation r;
        r.subject = jr.at(0).get<int>();
        r.predicate = jr.at(1).get<std::string>();
        r.object = jr.at(2).get<int>();
        rec.graph.relations.push_back(std::move(r));
      }
    }
    if (j.contains("features") && j.contains("features_file"))
      throw fail("record has both features and features_file");
    if (j.contains("features")) {
      rec.features = j.at("features").get<std::vector<std::vector<double>>>();
    } else if (j.contains("features_file")) {
      std::filesystem::path p = j.at("features_file").get<std::string>();
      if (p.is_relative()) p = std::filesystem::path(base_dir) / p;
      rec.features = load_features_file(p.string());
    } else {
      throw fail("record needs features or features_file");
    }
  } catch (const nlohmann::json::exception& e) {
    throw fail(std::string("bad record: ") + e.what());
  }
  if (rec.id.empty()) throw fail("empty image id");
  if (rec.split != "train" && rec.split != "val" && rec.split != "test")
    throw fail("unknown split '" + rec.split + "' for image " + rec.id);
  if (rec.captions.empty()) throw fail("image " + rec.id + " has no captions");
  if (rec.embedding_key.empty()) throw fail("image " + rec.id + " has empty embedding_key");
  if (rec.features.empty()) throw fail("image " + rec.id + " has no region features");
  for (const auto& row : rec.features)
    if (row.size() != rec.features[0].size())
      throw fail("image " + rec.id + " has ragged feature rows");
  int n_obj = static_cast<int>(rec.graph.objects.size());
  for (const auto& r : rec.graph.relations)
    if (r.subject < 0 || r.subject >= n_obj || r.object < 0 || r.object >= n_obj)
      throw fail("image " + rec.id + " has relation index out of range");
  return rec;
}

inline nlohmann::json image_record_to_json(const ImageRecord& rec) {
  nlohmann::json j;
  j["id"] = rec.id;
  j["split"] = rec.split;
  j["captions"] = rec.captions;
  j["embedding_key"] = rec.embedding_key;
  auto objects = nlohmann::json::array();
  for (const auto& o : rec.graph.objects)
    objects.push_back({{"category", o.category}, {"attributes", o.attributes}});
  j["objects"] = objects;
  auto relations = nlohmann::json::array();
  for (const auto& r : rec.graph.relations)
    relations.push_back({r.subject, r.predicate, r.object});
  j["relations"] = relations;
  j["features"] = rec.features;
  return j;
}

}  // namespace detail

inline DatasetManifest load_manifest(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open manifest: " + path);
  std::string base_dir = std::filesystem::path(path).parent_path().string();
  DatasetManifest m;
  std::string line;
  size_t line_no = 0;
  int d = -1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    std::string origin = path + ":" + std::to_string(line_no);
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
      throw DataError(origin + ": invalid JSON: " + e.what());
    }
    ImageRecord rec = detail::parse_image_record(j, origin, base_dir);
    int rec_d = static_cast<int>(rec.features[0].size());
    if (d < 0) d = rec_d;
    if (rec_d != d)
      throw DataError(origin + ": feature width " + std::to_string(rec_d) +
                      " differs from manifest width " + std::to_string(d));
    m.images.push_back(std::move(rec));
  }
  if (m.images.empty()) throw DataError(path + ": manifest has no images");
  m.reindex();
  return m;
}

inline void save_manifest(const DatasetManifest& m, const std::string& path) {
  std::string out;
  for (const auto& rec : m.images) {
    out += detail::image_record_to_json(rec).dump();
    out += "\n";
  }
  write_file_bytes(path, out);
}

// ---- embedding table ----------------------------------------------------------

inline double embedding_cosine(const std::vector<float>& a, const std::vector<float>& b) {
  if (a.size() != b.size()) throw InternalError("embedding cosine: dim mismatch");
  double dot = 0, na = 0, nb = 0;
  for (size_t i = 0; i < a.size(); ++i) {
    dot += static_cast<double>(a[i]) * b[i];
    na += static_cast<double>(a[i]) * a[i];
    nb += static_cast<double>(b[i]) * b[i];
  }
  if (na == 0.0 || nb == 0.0) return 0.0;
  return dot / (std::sqrt(na) * std::sqrt(nb));
}

class EmbeddingTable {
 public:
  explicit EmbeddingTable(uint32_t dim) : dim_(dim) {
    if (dim == 0) throw DataError("embedding dim must be positive");
  }

  uint32_t dim() const { return dim_; }
  size_t size() const { return vecs_.size(); }
  bool has(const std::string& key) const { return vecs_.count(key) > 0; }

  const std::vector<float>& at(const std::string& key) const {
    auto it = vecs_.find(key);
    if (it == vecs_.end()) throw DataError("missing embedding key: " + key);
    return it->second;
  }

  // Inserts a copy of v normalized to unit L2. Vectors already unit-norm to
  // within 1e-6 are kept bit-identical so save/load round-trips exactly.
  void put(const std::string& key, std::vector<float> v) {
    if (v.size() != dim_)
      throw DataError("embedding '" + key + "' has dim " + std::to_string(v.size()) +
                      ", table dim " + std::to_string(dim_));
    double norm_sq = 0;
    for (float x : v) norm_sq += static_cast<double>(x) * x;
    double norm = std::sqrt(norm_sq);
    if (norm < 1e-12) throw DataError("zero embedding vector for key: " + key);
    if (std::abs(norm - 1.0) > 1e-6)
      for (float& x : v) x = static_cast<float>(x / norm);
    auto [it, fresh] = vecs_.emplace(key, std::move(v));
    if (!fresh) throw DataError("duplicate embedding key: " + key);
  }

  const std::map<std::string, std::vector<float>>& entries() const { return vecs_; }

 private:
  uint32_t dim_;
  std::map<std::string, std::vector<float>> vecs_;  // sorted => deterministic file order
};

inline void save_embeddings(const EmbeddingTable& t, const std::string& path) {
  std::string out = "RDKE";
  put_u32(out, static_cast<uint32_t>(t.size()));
  put_u32(out, t.dim());
  for (const auto& [key, vec] : t.entries()) {
    if (key.size() > 0xffff) throw DataError("embedding key too long: " + key);
    put_u16(out, static_cast<uint16_t>(key.size()));
    out += key;
    for (float x : vec) put_f32(out, x);
  }
  write_file_bytes(path, out);
}

inline EmbeddingTable load_embeddings(const std::string& path) {
  BinReader r(read_file_bytes(path), path);
  if (r.str(4) != "RDKE") throw DataError(path + ": bad magic, expected RDKE");
  uint32_t count = r.u32();
  uint32_t dim = r.u32();
  EmbeddingTable t(dim);
  for (uint32_t i = 0; i < count; ++i) {
    std::string key = r.str(r.u16());
    std::vector<float> v(dim);
    for (auto& x : v) x = r.f32();
    t.put(key, std::move(v));
  }
  if (!r.at_end()) throw DataError(path + ": trailing bytes");
  return t;
}

}  // namespace refdic
