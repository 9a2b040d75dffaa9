#pragma once
// Independent brute-force oracles used by the test suites. These are written
// against the metric DEFINITIONS with deliberately different data structures
// (token-vector keys, nested loops, per-call lookups) from the library so a
// shared bug is unlikely. Keep them dumb.

#include <algorithm>
#include <cmath>
#include <map>
#include <set>
#include <string>
#include <utility>
#include <vector>

namespace oracle {

using Tokens = std::vector<std::string>;
using Gram = std::vector<std::string>;
using ImageCaptions = std::vector<Tokens>;          // one image's captions
using CaptionCorpus = std::vector<ImageCaptions>;   // images of a split

inline std::vector<std::map<Gram, int>> grams_of(const Tokens& toks) {
  std::vector<std::map<Gram, int>> out(4);
  for (int n = 1; n <= 4; ++n)
    for (int i = 0; i + n <= static_cast<int>(toks.size()); ++i) {
      Gram g(toks.begin() + i, toks.begin() + i + n);
      out[n - 1][g] += 1;
    }
  return out;
}

struct DfOracle {
  std::vector<std::map<Gram, int>> df{4};
  int n_images = 0;
};

inline DfOracle df_oracle(const CaptionCorpus& images) {
  DfOracle d;
  d.n_images = static_cast<int>(images.size());
  for (const auto& caps : images) {
    std::set<std::pair<int, Gram>> seen;
    for (const auto& c : caps) {
      auto gs = grams_of(c);
      for (int n = 0; n < 4; ++n)
        for (const auto& [g, cnt] : gs[n]) seen.insert({n, g});
    }
    for (const auto& [n, g] : seen) d.df[n][g] += 1;
  }
  return d;
}

// TF-IDF weight vector of one sentence for order n (0-based):
//   tf = count / total n-grams of that order, idf = ln(|I| / max(1, df)).
inline std::map<Gram, double> tfidf_weights(const Tokens& toks, int n, const DfOracle& d) {
  auto gs = grams_of(toks);
  double total = 0;
  for (const auto& [g, c] : gs[n]) total += c;
  std::map<Gram, double> v;
  for (const auto& [g, c] : gs[n]) {
    double df = 0;
    auto it = d.df[n].find(g);
    if (it != d.df[n].end()) df = it->second;
    double idf = std::log(static_cast<double>(d.n_images) / std::max(1.0, df));
    v[g] = (c / total) * idf;
  }
  return v;
}

inline double vec_cosine(const std::map<Gram, double>& a, const std::map<Gram, double>& b) {
  double dot = 0, na = 0, nb = 0;
  for (const auto& [g, x] : a) {
    na += x * x;
    auto it = b.find(g);
    if (it != b.end()) dot += x * it->second;
  }
  for (const auto& [g, x] : b) nb += x * x;
  if (na == 0 || nb == 0) return 0;
  return dot / (std::sqrt(na) * std::sqrt(nb));
}

// Mean over n of mean over references of cosine, x100.
inline double cider_oracle(const Tokens& cand, const ImageCaptions& gts, const DfOracle& d) {
  double acc = 0;
  for (int n = 0; n < 4; ++n) {
    double per_n = 0;
    for (const auto& gt : gts)
      per_n += vec_cosine(tfidf_weights(cand, n, d), tfidf_weights(gt, n, d));
    acc += per_n / static_cast<double>(gts.size());
  }
  return 100.0 * acc / 4.0;
}

// ln((m + K) / (n + #reference images containing the gram)); repetition
// inside one image counts once.
inline double irf_oracle(const Gram& g, int n, const CaptionCorpus& refs, double m,
                         double n_param) {
  int cnt = 0;
  for (const auto& img : refs) {
    bool found = false;
    for (const auto& cap : img)
      if (grams_of(cap)[n].count(g)) found = true;
    if (found) ++cnt;
  }
  return std::log((m + static_cast<double>(refs.size())) / (n_param + cnt));
}

// CIDEr with the target-side ground-truth vectors reweighted per gram by the
// reference-frequency factor; the candidate vector is untouched.
inline double discider_oracle(const Tokens& cand, const ImageCaptions& gts,
                              const CaptionCorpus& refs, const DfOracle& d, double m,
                              double n_param) {
  double acc = 0;
  for (int n = 0; n < 4; ++n) {
    auto cv = tfidf_weights(cand, n, d);
    double per_n = 0;
    for (const auto& gt : gts) {
      auto gv = tfidf_weights(gt, n, d);
      for (auto& [g, x] : gv) x *= irf_oracle(g, n, refs, m, n_param);
      per_n += vec_cosine(cv, gv);
    }
    acc += per_n / static_cast<double>(gts.size());
  }
  return 100.0 * acc / 4.0;
}

// ---- two-stage reference-group construction, the dumb way --------------------
// Independent pipeline re-implementation: explicit candidate tuples, repeated
// max-extraction instead of sorting, and hand-rolled set intersections.

struct GroupOracleResult {
  std::vector<std::string> coarse;                       // deduped image ids
  std::vector<std::pair<std::string, int>> fine;         // (id, total) ranked
  std::vector<std::string> selected;                     // top-p..p+K-1
};

struct OracleCaption {
  std::string image_id;
  int caption_idx;
  double score;
};

// categories as multiset-free sets; attribute pairs as "category\x01attribute"
inline std::set<std::string> oracle_categories(const std::vector<std::pair<std::string, std::vector<std::string>>>& objs) {
  std::set<std::string> s;
  for (const auto& [cat, attrs] : objs) s.insert(cat);
  return s;
}

inline std::set<std::string> oracle_attr_pairs(
    const std::vector<std::pair<std::string, std::vector<std::string>>>& objs) {
  std::set<std::string> s;
  for (const auto& [cat, attrs] : objs)
    for (const auto& a : attrs) s.insert(cat + "\x01" + a);
  return s;
}

inline int oracle_set_overlap(const std::set<std::string>& a, const std::set<std::string>& b) {
  int n = 0;
  for (const auto& x : a)
    if (b.count(x)) ++n;
  return n;
}

// Full pipeline for one target. Image data is passed as parallel vectors so
// this code shares no types with the library.
//   ids:      image ids (target's split only, target included)
//   objs:     per image, (category, attributes) list
//   img_emb:  per image, unit image embedding
//   cap_embs: per image, unit caption embeddings
inline GroupOracleResult group_oracle(
    const std::string& target_id, const std::vector<std::string>& ids,
    const std::vector<std::vector<std::pair<std::string, std::vector<std::string>>>>& objs,
    const std::vector<std::vector<double>>& img_emb,
    const std::vector<std::vector<std::vector<double>>>& cap_embs, int coarse_size, int p,
    int k) {
  GroupOracleResult res;
  int target = -1;
  for (size_t i = 0; i < ids.size(); ++i)
    if (ids[i] == target_id) target = static_cast<int>(i);

  // stage 1: every candidate caption scored against the target image embedding
  std::vector<OracleCaption> caps;
  for (size_t i = 0; i < ids.size(); ++i) {
    if (static_cast<int>(i) == target) continue;
    for (size_t j = 0; j < cap_embs[i].size(); ++j) {
      // true cosine: stored vectors are only unit-norm to f32 rounding, so the
      // norms must participate exactly as they do in the library
      double dot = 0, nt = 0, nc = 0;
      for (size_t d = 0; d < img_emb[target].size(); ++d) {
        dot += img_emb[target][d] * cap_embs[i][j][d];
        nt += img_emb[target][d] * img_emb[target][d];
        nc += cap_embs[i][j][d] * cap_embs[i][j][d];
      }
      caps.push_back({ids[i], static_cast<int>(j), dot / (std::sqrt(nt) * std::sqrt(nc))});
    }
  }
  // repeated max-extraction with the documented tie rule:
  // score desc, then image id asc, then caption index asc
  std::set<std::string> taken;
  std::vector<bool> used(caps.size(), false);
  while (static_cast<int>(res.coarse.size()) < coarse_size) {
    int best = -1;
    for (size_t c = 0; c < caps.size(); ++c) {
      if (used[c]) continue;
      if (best < 0) { best = static_cast<int>(c); continue; }
      const auto& x = caps[c];
      const auto& b = caps[best];
      if (x.score > b.score ||
          (x.score == b.score &&
           (x.image_id < b.image_id ||
            (x.image_id == b.image_id && x.caption_idx < b.caption_idx))))
        best = static_cast<int>(c);
    }
    if (best < 0) break;
    used[best] = true;
    if (!taken.count(caps[best].image_id)) {
      taken.insert(caps[best].image_id);
      res.coarse.push_back(caps[best].image_id);
    }
  }

  // stage 2: scene-graph overlap, ranked by total desc then id asc
  std::vector<std::pair<std::string, int>> pool;
  for (const auto& id : res.coarse) {
    int idx = -1;
    for (size_t i = 0; i < ids.size(); ++i)
      if (ids[i] == id) idx = static_cast<int>(i);
    int obj = oracle_set_overlap(oracle_categories(objs[target]), oracle_categories(objs[idx]));
    int attr = oracle_set_overlap(oracle_attr_pairs(objs[target]), oracle_attr_pairs(objs[idx]));
    pool.push_back({id, obj + attr});
  }
  std::vector<bool> pused(pool.size(), false);
  for (size_t round = 0; round < pool.size(); ++round) {
    int best = -1;
    for (size_t i = 0; i < pool.size(); ++i) {
      if (pused[i]) continue;
      if (best < 0 || pool[i].second > pool[best].second ||
          (pool[i].second == pool[best].second && pool[i].first < pool[best].first))
        best = static_cast<int>(i);
    }
    pused[best] = true;
    res.fine.push_back(pool[best]);
  }
  for (int i = p - 1; i < p + k - 1 && i < static_cast<int>(res.fine.size()); ++i)
    res.selected.push_back(res.fine[i].first);
  return res;
}

}  // namespace oracle
