#pragma once
// Split-level caption evaluation: per-image sentence scores plus corpus
// aggregates. The consensus score and its rarity-weighted variant are
// computed against each target's reference group; document frequencies come
// from the evaluated split itself.

#include <map>
#include <string>
#include <utility>
#include <vector>

#include "refdic/corpus.hpp"
#include "refdic/groups.hpp"
#include "refdic/metrics.hpp"
#include "refdic/model.hpp"

namespace refdic {

inline ad::Tensor features_tensor(const ImageRecord& img) {
  if (img.features.empty())
    throw DataError("image " + img.id + " has no region features");
  ad::Tensor t = ad::Tensor::zeros(static_cast<int>(img.features.size()),
                                   static_cast<int>(img.features[0].size()));
  for (int i = 0; i < t.rows; ++i)
    for (int j = 0; j < t.cols; ++j) t.at(i, j) = img.features[i][j];
  return t;
}

struct EvalRow {
  std::string image_id;
  TokenSeq caption;
  double b1 = 0.0, b4 = 0.0, c = 0.0, disc = 0.0;
};

struct EvalReport {
  std::vector<EvalRow> rows;
  // corpus view: pooled-count BLEU, mean consensus scores
  double b1 = 0.0, b4 = 0.0, c = 0.0, disc = 0.0;
};

inline EvalReport evaluate_candidates(
    const DatasetManifest& m,
    const std::map<std::string, ReferenceGroup>& groups, const std::string& split,
    const std::map<std::string, TokenSeq>& candidates,
    const DisCiderParams& dp = {}) {
  if (candidates.empty()) throw DataError("evaluate: no candidate captions");
  DfTable df = build_df(m, split);
  EvalReport rep;
  std::vector<TokenSeq> cands;
  std::vector<std::vector<TokenSeq>> gts;
  for (const auto& [id, cand] : candidates) {
    if (!m.has(id)) throw DataError("evaluate: unknown image id '" + id + "'");
    const ImageRecord& img = m.by_id(id);
    if (img.split != split)
      throw DataError("evaluate: image '" + id + "' is not in split '" + split + "'");
    auto git = groups.find(id);
    if (git == groups.end())
      throw DataError("evaluate: no reference group for image '" + id + "'");
    std::vector<TokenSeq> gt;
    for (const auto& cap : img.captions) gt.push_back(tokenize(cap));
    std::vector<std::vector<TokenSeq>> ref_caps;
    for (const auto& rid : git->second.references) {
      std::vector<TokenSeq> one;
      for (const auto& cap : m.by_id(rid).captions) one.push_back(tokenize(cap));
      ref_caps.push_back(std::move(one));
    }
    EvalRow row;
    row.image_id = id;
    row.caption = cand;
    row.b1 = bleu_sentence(cand, gt, 1);
    row.b4 = bleu_sentence(cand, gt, 4);
    row.c = cider(cand, gt, df);
    row.disc = discider(cand, gt, ref_caps, df, dp);
    rep.rows.push_back(std::move(row));
    cands.push_back(cand);
    gts.push_back(std::move(gt));
  }
  rep.b1 = bleu_corpus(cands, gts, 1);
  rep.b4 = bleu_corpus(cands, gts, 4);
  double sum_c = 0.0, sum_d = 0.0;
  for (const auto& r : rep.rows) {
    sum_c += r.c;
    sum_d += r.disc;
  }
  rep.c = sum_c / static_cast<double>(rep.rows.size());
  rep.disc = sum_d / static_cast<double>(rep.rows.size());
  return rep;
}

// beam-decode a caption for every image of the split that has a reference
// group; images without a group are skipped
inline std::map<std::string, TokenSeq> generate_captions(
    const TransDic& model, const DatasetManifest& m,
    const std::map<std::string, ReferenceGroup>& groups, const std::string& split,
    int beam_n, int max_len) {
  std::map<std::string, TokenSeq> out;
  for (const auto& img : m.images) {
    if (img.split != split) continue;
    auto git = groups.find(img.id);
    if (git == groups.end()) continue;
    ad::Tensor tgt = features_tensor(img);
    std::vector<ad::Tensor> refs;
    for (const auto& rid : git->second.references)
      refs.push_back(features_tensor(m.by_id(rid)));
    ad::Tensor m_prime = model.encode_values(tgt, refs);
    Hypothesis best = beam_n <= 1 ? model.greedy(m_prime, max_len)
                                  : model.beam(m_prime, beam_n, max_len)[0];
    out[img.id] = model.caption_of(best);
  }
  return out;
}

}  // namespace refdic
