#pragma once
// Two-stage reference-group construction.
//
// Stage 1 (coarse): every caption of every other image in the target's split
// is scored by cosine against the target's image embedding; captions are
// ranked (score desc, then image id, then caption index) and their parent
// images collected in encounter order, deduplicated, until coarse_size images
// are found or candidates run out.
//
// Stage 2 (fine): coarse candidates are re-ranked by scene-graph overlap with
// the target -- shared object categories plus shared (category, attribute)
// pairs -- total desc, ties by lexicographic id. The group keeps ranks
// p..p+K-1 (1-indexed): the first p-1 near-duplicates are skipped so that
// references are similar but not interchangeable with the target.

#include <algorithm>
#include <map>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "refdic/common.hpp"
#include "refdic/corpus.hpp"
#include "refdic/metrics.hpp"
#include "refdic/text.hpp"

namespace refdic {

struct GroupBuildConfig {
  int coarse_size = 500;
  int p = 3;
  int k = 5;

  void validate() const {
    if (p < 1) throw DataError("group config: p must be >= 1");
    if (k < 1) throw DataError("group config: k must be >= 1");
    if (coarse_size < p + k - 1)
      throw DataError("group config: coarse_size must be >= p + k - 1 (" +
                      std::to_string(p + k - 1) + ")");
  }
};

struct OverlapScore {
  int obj = 0;
  int attr = 0;
  int total = 0;
};

struct ReferenceGroup {
  std::string target;
  std::vector<std::string> references;  // K ids, rank order
  std::vector<OverlapScore> scores;     // parallel to references
  std::vector<std::string> ranked;      // full fine ranking (pool for sampling)
};

// ---- stage 2 scoring -----------------------------------------------------------

inline OverlapScore overlap_score(const SceneGraph& a, const SceneGraph& b) {
  std::set<std::string> cat_a, cat_b;
  std::set<std::pair<std::string, std::string>> attr_a, attr_b;
  for (const auto& o : a.objects) {
    cat_a.insert(o.category);
    for (const auto& at : o.attributes) attr_a.insert({o.category, at});
  }
  for (const auto& o : b.objects) {
    cat_b.insert(o.category);
    for (const auto& at : o.attributes) attr_b.insert({o.category, at});
  }
  OverlapScore s;
  for (const auto& c : cat_a) s.obj += cat_b.count(c);
  for (const auto& p : attr_a) s.attr += attr_b.count(p);
  s.total = s.obj + s.attr;
  return s;
}

// ---- stage 1 -------------------------------------------------------------------

inline std::vector<std::string> coarse_group(const DatasetManifest& m,
                                             const EmbeddingTable& emb,
                                             const std::string& target_id, int coarse_size) {
  if (coarse_size < 1) throw DataError("coarse_group: coarse_size must be >= 1");
  const ImageRecord& target = m.by_id(target_id);
  const auto& target_emb = emb.at(target.embedding_key);

  struct CaptionScore {
    double score;
    const std::string* image_id;
    size_t caption_idx;
  };
  std::vector<CaptionScore> scored;
  for (const auto& img : m.images) {
    if (img.id == target_id || img.split != target.split) continue;
    for (size_t j = 0; j < img.captions.size(); ++j) {
      const auto& cap_emb = emb.at(caption_embedding_key(img.embedding_key, j));
      scored.push_back({embedding_cosine(target_emb, cap_emb), &img.id, j});
    }
  }
  std::sort(scored.begin(), scored.end(), [](const CaptionScore& x, const CaptionScore& y) {
    if (x.score != y.score) return x.score > y.score;
    if (*x.image_id != *y.image_id) return *x.image_id < *y.image_id;
    return x.caption_idx < y.caption_idx;
  });

  std::vector<std::string> out;
  std::set<std::string> seen;
  for (const auto& cs : scored) {
    if (static_cast<int>(out.size()) >= coarse_size) break;
    if (seen.insert(*cs.image_id).second) out.push_back(*cs.image_id);
  }
  return out;
}

// ---- stage 2 -------------------------------------------------------------------

inline std::vector<std::pair<std::string, OverlapScore>> fine_rank(
    const DatasetManifest& m, const std::string& target_id,
    const std::vector<std::string>& candidates) {
  const ImageRecord& target = m.by_id(target_id);
  std::vector<std::pair<std::string, OverlapScore>> ranked;
  ranked.reserve(candidates.size());
  for (const auto& id : candidates)
    ranked.push_back({id, overlap_score(target.graph, m.by_id(id).graph)});
  std::sort(ranked.begin(), ranked.end(), [](const auto& x, const auto& y) {
    if (x.second.total != y.second.total) return x.second.total > y.second.total;
    return x.first < y.first;
  });
  return ranked;
}

inline ReferenceGroup select_references(
    const std::string& target_id,
    const std::vector<std::pair<std::string, OverlapScore>>& ranked,
    const GroupBuildConfig& cfg) {
  cfg.validate();
  int need = cfg.p + cfg.k - 1;
  if (static_cast<int>(ranked.size()) < need)
    throw DataError("target " + target_id + ": reference pool exhausted, need " +
                    std::to_string(need) + " ranked candidates, have " +
                    std::to_string(ranked.size()) + " (" +
                    std::to_string(need - static_cast<int>(ranked.size())) + " short)");
  ReferenceGroup g;
  g.target = target_id;
  for (int i = cfg.p - 1; i < cfg.p + cfg.k - 1; ++i) {
    g.references.push_back(ranked[i].first);
    g.scores.push_back(ranked[i].second);
  }
  for (const auto& [id, s] : ranked) g.ranked.push_back(id);
  return g;
}

inline ReferenceGroup build_group(const DatasetManifest& m, const EmbeddingTable& emb,
                                  const std::string& target_id, const GroupBuildConfig& cfg) {
  cfg.validate();
  auto coarse = coarse_group(m, emb, target_id, cfg.coarse_size);
  auto ranked = fine_rank(m, target_id, coarse);
  return select_references(target_id, ranked, cfg);
}

inline std::vector<ReferenceGroup> build_groups(const DatasetManifest& m,
                                                const EmbeddingTable& emb,
                                                const GroupBuildConfig& cfg, int threads) {
  cfg.validate();
  std::vector<ReferenceGroup> out(m.images.size());
  parallel_for(m.images.size(), threads,
               [&](size_t i) { out[i] = build_group(m, emb, m.images[i].id, cfg); });
  return out;
}

// ---- lexicon-based scene-graph fallback ------------------------------------------

// For corpora without scene graphs: tokens found in the object lexicon become
// objects (merged per category); the token immediately before an object token
// attaches as an attribute when it is in the attribute lexicon. No relations.
inline SceneGraph fallback_extract(const TokenSeq& caption,
                                   const std::set<std::string>& object_lexicon,
                                   const std::set<std::string>& attribute_lexicon) {
  SceneGraph g;
  std::map<std::string, size_t> by_category;
  for (size_t i = 0; i < caption.size(); ++i) {
    if (!object_lexicon.count(caption[i])) continue;
    auto it = by_category.find(caption[i]);
    if (it == by_category.end()) {
      by_category[caption[i]] = g.objects.size();
      g.objects.push_back({caption[i], {}});
      it = by_category.find(caption[i]);
    }
    if (i > 0 && attribute_lexicon.count(caption[i - 1])) {
      auto& attrs = g.objects[it->second].attributes;
      if (std::find(attrs.begin(), attrs.end(), caption[i - 1]) == attrs.end())
        attrs.push_back(caption[i - 1]);
    }
  }
  return g;
}

// ---- persistence ------------------------------------------------------------------

inline void save_groups(const std::vector<ReferenceGroup>& groups, const std::string& path) {
  nlohmann::json arr = nlohmann::json::array();
  for (const auto& g : groups) {
    nlohmann::json jg;
    jg["target"] = g.target;
    jg["references"] = g.references;
    auto scores = nlohmann::json::array();
    for (const auto& s : g.scores)
      scores.push_back({{"obj", s.obj}, {"attr", s.attr}, {"total", s.total}});
    jg["scores"] = scores;
    jg["ranked"] = g.ranked;
    arr.push_back(jg);
  }
  write_file_bytes(path, arr.dump(2) + "\n");
}

inline std::vector<ReferenceGroup> load_groups(const std::string& path) {
  nlohmann::json arr;
  try {
    arr = nlohmann::json::parse(read_file_bytes(path));
  } catch (const nlohmann::json::exception& e) {
    throw DataError(path + ": invalid JSON: " + e.what());
  }
  if (!arr.is_array()) throw DataError(path + ": expected a JSON array of groups");
  std::vector<ReferenceGroup> out;
  try {
    for (const auto& jg : arr) {
      ReferenceGroup g;
      g.target = jg.at("target").get<std::string>();
      g.references = jg.at("references").get<std::vector<std::string>>();
      for (const auto& js : jg.at("scores")) {
        OverlapScore s;
        s.obj = js.at("obj").get<int>();
        s.attr = js.at("attr").get<int>();
        s.total = js.at("total").get<int>();
        g.scores.push_back(s);
      }
      if (jg.contains("ranked"))
        g.ranked = jg.at("ranked").get<std::vector<std::string>>();
      if (g.scores.size() != g.references.size())
        throw DataError(path + ": group " + g.target + " has mismatched scores");
      out.push_back(std::move(g));
    }
  } catch (const nlohmann::json::exception& e) {
    throw DataError(path + ": bad group record: " + e.what());
  }
  return out;
}

// Groups indexed by target id.
inline std::map<std::string, ReferenceGroup> group_index(
    const std::vector<ReferenceGroup>& groups) {
  std::map<std::string, ReferenceGroup> idx;
  for (const auto& g : groups) {
    if (!idx.emplace(g.target, g).second)
      throw DataError("duplicate group for target " + g.target);
  }
  return idx;
}

}  // namespace refdic
