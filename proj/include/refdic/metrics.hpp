#pragma once
// Caption metric stack: sentence/corpus BLEU, TF-IDF n-gram consensus scoring
// (plain variant and the reference-group-discounted variant) and the training
// reward family built on top of them.
//
// Conventions shared by the whole stack:
//  * n-gram orders run 1..4;
//  * document frequency counts at most one occurrence per image;
//  * idf = ln(|I| / max(1, df));
//  * scores are reported on a 0..100 scale;
//  * cosine against an empty/zero vector is 0.

#include <algorithm>
#include <array>
#include <cmath>
#include <map>
#include <set>
#include <string>
#include <unordered_map>
#include <vector>

#include "refdic/common.hpp"
#include "refdic/corpus.hpp"
#include "refdic/text.hpp"

namespace refdic {

// ---- document frequency --------------------------------------------------------

struct DfTable {
  std::array<std::unordered_map<std::string, int>, kMaxNGram> df;
  int corpus_size = 0;

  // order is 0-based (0 => unigrams).
  int count(int order, const std::string& gram) const {
    const auto& m = df[order];
    auto it = m.find(gram);
    return it == m.end() ? 0 : it->second;
  }
};

// images_captions: tokenized captions grouped per image.
inline DfTable build_df(const std::vector<std::vector<TokenSeq>>& images_captions) {
  DfTable t;
  t.corpus_size = static_cast<int>(images_captions.size());
  for (const auto& caps : images_captions) {
    std::array<std::set<std::string>, kMaxNGram> seen;
    for (const auto& c : caps) {
      auto counts = ngram_counts(c);
      for (int n = 0; n < kMaxNGram; ++n)
        for (const auto& [g, cnt] : counts[n]) seen[n].insert(g);
    }
    for (int n = 0; n < kMaxNGram; ++n)
      for (const auto& g : seen[n]) t.df[n][g] += 1;
  }
  return t;
}

inline DfTable build_df(const DatasetManifest& m, const std::string& split) {
  std::vector<std::vector<TokenSeq>> images_captions;
  for (const auto& img : m.images) {
    if (img.split != split) continue;
    std::vector<TokenSeq> caps;
    for (const auto& c : img.captions) caps.push_back(tokenize(c));
    images_captions.push_back(std::move(caps));
  }
  if (images_captions.empty()) throw DataError("split '" + split + "' has no images");
  return build_df(images_captions);
}

// ---- BLEU -----------------------------------------------------------------------

namespace detail {

// Reference length closest to c; ties prefer the shorter reference.
inline size_t closest_ref_len(size_t c, const std::vector<TokenSeq>& refs) {
  size_t best = refs[0].size();
  for (const auto& r : refs) {
    size_t len = r.size();
    auto dist = [c](size_t l) { return l > c ? l - c : c - l; };
    if (dist(len) < dist(best) || (dist(len) == dist(best) && len < best)) best = len;
  }
  return best;
}

struct ClippedCounts {
  long long clipped = 0;
  long long total = 0;
};

inline ClippedCounts clipped_counts(const TokenSeq& cand, const std::vector<TokenSeq>& refs,
                                    int n) {
  ClippedCounts out;
  if (cand.size() < static_cast<size_t>(n)) return out;
  std::map<std::string, int> cand_counts;
  for (size_t i = 0; i + n <= cand.size(); ++i) {
    cand_counts[join_tokens(cand, i, n)] += 1;
    out.total += 1;
  }
  std::map<std::string, int> max_ref;
  for (const auto& ref : refs) {
    if (ref.size() < static_cast<size_t>(n)) continue;
    std::map<std::string, int> rc;
    for (size_t i = 0; i + n <= ref.size(); ++i) rc[join_tokens(ref, i, n)] += 1;
    for (const auto& [g, c] : rc) max_ref[g] = std::max(max_ref[g], c);
  }
  for (const auto& [g, c] : cand_counts) {
    auto it = max_ref.find(g);
    if (it != max_ref.end()) out.clipped += std::min(c, it->second);
  }
  return out;
}

}  // namespace detail

// Sentence-level BLEU on the 0..100 scale with uniform 1/max_n weights and the
// standard brevity penalty. eps is added to the clipped match count of any
// order whose precision would otherwise be zero (denominator floored at 1).
inline double bleu_sentence(const TokenSeq& cand, const std::vector<TokenSeq>& refs,
                            int max_n, double eps = 0.0) {
  if (max_n < 1 || max_n > kMaxNGram) throw InternalError("bleu: max_n out of range");
  if (refs.empty()) throw DataError("bleu: no references");
  if (cand.empty()) return 0.0;
  double log_sum = 0.0;
  for (int n = 1; n <= max_n; ++n) {
    auto cc = detail::clipped_counts(cand, refs, n);
    double p;
    if (cc.clipped > 0) {
      p = static_cast<double>(cc.clipped) / static_cast<double>(cc.total);
    } else if (eps > 0.0) {
      p = eps / static_cast<double>(std::max<long long>(1, cc.total));
    } else {
      return 0.0;
    }
    log_sum += std::log(p) / max_n;
  }
  size_t c = cand.size();
  size_t r = detail::closest_ref_len(c, refs);
  double bp = c >= r ? 1.0 : std::exp(1.0 - static_cast<double>(r) / static_cast<double>(c));
  return 100.0 * bp * std::exp(log_sum);
}

// Corpus-level BLEU: clipped matches and totals are pooled over all sentences
// before the geometric mean; brevity penalty uses pooled lengths.
inline double bleu_corpus(const std::vector<TokenSeq>& cands,
                          const std::vector<std::vector<TokenSeq>>& refs, int max_n) {
  if (max_n < 1 || max_n > kMaxNGram) throw InternalError("bleu: max_n out of range");
  if (cands.size() != refs.size()) throw InternalError("bleu: cands/refs size mismatch");
  if (cands.empty()) throw DataError("bleu: empty corpus");
  double log_sum = 0.0;
  for (int n = 1; n <= max_n; ++n) {
    long long clipped = 0, total = 0;
    for (size_t i = 0; i < cands.size(); ++i) {
      auto cc = detail::clipped_counts(cands[i], refs[i], n);
      clipped += cc.clipped;
      total += cc.total;
    }
    if (clipped == 0 || total == 0) return 0.0;
    log_sum += std::log(static_cast<double>(clipped) / static_cast<double>(total)) / max_n;
  }
  long long c_len = 0, r_len = 0;
  for (size_t i = 0; i < cands.size(); ++i) {
    c_len += static_cast<long long>(cands[i].size());
    r_len += static_cast<long long>(detail::closest_ref_len(cands[i].size(), refs[i]));
  }
  if (c_len == 0) return 0.0;
  double bp =
      c_len >= r_len ? 1.0 : std::exp(1.0 - static_cast<double>(r_len) / static_cast<double>(c_len));
  return 100.0 * bp * std::exp(log_sum);
}

// ---- TF-IDF consensus scoring ---------------------------------------------------

// weights[order][gram]: tf (count / total grams of that order) times idf.
using WeightVec = std::array<std::map<std::string, double>, kMaxNGram>;

inline WeightVec tfidf_vector(const TokenSeq& toks, const DfTable& df) {
  WeightVec v;
  auto counts = ngram_counts(toks);
  for (int n = 0; n < kMaxNGram; ++n) {
    double total = 0;
    for (const auto& [g, c] : counts[n]) total += c;
    if (total == 0) continue;
    for (const auto& [g, c] : counts[n]) {
      double idf = std::log(static_cast<double>(df.corpus_size) /
                            std::max(1.0, static_cast<double>(df.count(n, g))));
      v[n][g] = (static_cast<double>(c) / total) * idf;
    }
  }
  return v;
}

namespace detail {

inline double sparse_cosine(const std::map<std::string, double>& a,
                            const std::map<std::string, double>& b) {
  double dot = 0, na = 0, nb = 0;
  for (const auto& [g, x] : a) na += x * x;
  for (const auto& [g, x] : b) nb += x * x;
  if (na == 0.0 || nb == 0.0) return 0.0;
  const auto& small = a.size() <= b.size() ? a : b;
  const auto& large = a.size() <= b.size() ? b : a;
  for (const auto& [g, x] : small) {
    auto it = large.find(g);
    if (it != large.end()) dot += x * it->second;
  }
  return dot / (std::sqrt(na) * std::sqrt(nb));
}

}  // namespace detail

// Mean over orders of mean over ground-truth captions of the TF-IDF cosine,
// reported x100. Plain variant: no length penalty, no count clipping.
inline double cider(const TokenSeq& cand, const std::vector<TokenSeq>& gt,
                    const DfTable& df) {
  if (gt.empty()) throw DataError("cider: no ground-truth captions");
  WeightVec cv = tfidf_vector(cand, df);
  double acc = 0;
  for (const auto& ref : gt) {
    WeightVec rv = tfidf_vector(ref, df);
    for (int n = 0; n < kMaxNGram; ++n) acc += detail::sparse_cosine(cv[n], rv[n]);
  }
  return 100.0 * acc / (kMaxNGram * static_cast<double>(gt.size()));
}

// ---- reference-frequency discounting --------------------------------------------

struct DisCiderParams {
  double m = 0.8;
  double n = 5.0;
};

namespace detail {

// Per reference image: the set of n-grams appearing in any of its captions.
struct GroupGramIndex {
  std::array<std::vector<std::set<std::string>>, kMaxNGram> images;
  int k = 0;

  explicit GroupGramIndex(const std::vector<std::vector<TokenSeq>>& refs) {
    k = static_cast<int>(refs.size());
    for (int n = 0; n < kMaxNGram; ++n) images[n].resize(refs.size());
    for (size_t i = 0; i < refs.size(); ++i)
      for (const auto& cap : refs[i]) {
        auto counts = ngram_counts(cap);
        for (int n = 0; n < kMaxNGram; ++n)
          for (const auto& [g, c] : counts[n]) images[n][i].insert(g);
      }
  }

  // order is 0-based here.
  double factor(int order, const std::string& gram, const DisCiderParams& p) const {
    int cnt = 0;
    for (const auto& img : images[order]) cnt += img.count(gram) ? 1 : 0;
    return std::log((p.m + k) / (p.n + cnt));
  }
};

}  // namespace detail

// ln((m + K) / (n + #reference images whose captions contain the gram)).
// order is 1-based; repetition inside one image counts once. Note the factor
// can be negative once the gram saturates the group (e.g. K=5 defaults give
// ln(0.58) < 0); weights are deliberately not clamped or renormalized.
inline double irf_factor(int order, const std::string& gram,
                         const std::vector<std::vector<TokenSeq>>& ref_captions,
                         const DisCiderParams& p) {
  if (order < 1 || order > kMaxNGram) throw InternalError("irf_factor: order out of range");
  detail::GroupGramIndex idx(ref_captions);
  return idx.factor(order - 1, gram, p);
}

// CIDEr with every ground-truth weight multiplied by its reference-frequency
// factor; the candidate vector keeps plain TF-IDF weights.
inline double discider(const TokenSeq& cand, const std::vector<TokenSeq>& gt,
                       const std::vector<std::vector<TokenSeq>>& ref_captions,
                       const DfTable& df, const DisCiderParams& p) {
  if (gt.empty()) throw DataError("discider: no ground-truth captions");
  detail::GroupGramIndex idx(ref_captions);
  WeightVec cv = tfidf_vector(cand, df);
  double acc = 0;
  for (const auto& ref : gt) {
    WeightVec rv = tfidf_vector(ref, df);
    for (int n = 0; n < kMaxNGram; ++n) {
      for (auto& [g, w] : rv[n]) w *= idx.factor(n, g, p);
      acc += detail::sparse_cosine(cv[n], rv[n]);
    }
  }
  return 100.0 * acc / (kMaxNGram * static_cast<double>(gt.size()));
}

// ---- reward family ---------------------------------------------------------------

struct RewardConfig {
  double alpha_b = 0.25;  // shared weight of BLEU-1 and BLEU-4
  double alpha_c = 0.5;   // weight of the consensus score
  double beta = 8.0;      // distinctiveness margin
  double lambda = 1.0;    // weight of the distinctiveness term in the final reward
};

// alpha_b * (BLEU-1 + BLEU-4) + alpha_c * CIDEr, all on the x100 scale.
// Smoothed sentence BLEU keeps the reward finite for degenerate candidates.
inline double bleuder(const TokenSeq& cand, const std::vector<TokenSeq>& gt,
                      const DfTable& df, const RewardConfig& rc, double eps = 1e-9) {
  double b1 = bleu_sentence(cand, gt, 1, eps);
  double b4 = bleu_sentence(cand, gt, 4, eps);
  return rc.alpha_b * (b1 + b4) + rc.alpha_c * cider(cand, gt, df);
}

// Hinge penalty: zero when the positive caption beats the negative by at
// least beta, negative otherwise. Never positive.
inline double disreward(double bleuder_pos, double bleuder_neg, double beta) {
  return -std::max(0.0, bleuder_neg - bleuder_pos + beta);
}

inline double final_reward(double cider_pos, double dis, double lambda) {
  return cider_pos + lambda * dis;
}

}  // namespace refdic
