#pragma once
// Optimization: teacher-forced pretraining, self-critical fine-tuning with a
// distinctiveness penalty, and construction of the masked negative reference
// sets that drive the penalty.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <limits>
#include <map>
#include <numeric>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "refdic/eval.hpp"
#include "refdic/metrics.hpp"
#include "refdic/model.hpp"
#include "refdic/rng.hpp"
#include "refdic/vocab.hpp"

namespace refdic {

// ---- negative-sample specification ------------------------------------------------

enum class MaskLevel { instance, image };
enum class MaskStrategy { none, random_mask, sim_mask, grad_attr, image_pool };

inline std::string to_string(MaskLevel l) {
  return l == MaskLevel::instance ? "instance" : "image";
}

inline std::string to_string(MaskStrategy s) {
  switch (s) {
    case MaskStrategy::none: return "none";
    case MaskStrategy::random_mask: return "random";
    case MaskStrategy::sim_mask: return "sim_mask";
    case MaskStrategy::grad_attr: return "grad_attr";
    case MaskStrategy::image_pool: return "image_pool";
  }
  throw InternalError("unknown mask strategy");
}

inline MaskLevel mask_level_from_string(const std::string& s) {
  if (s == "instance") return MaskLevel::instance;
  if (s == "image") return MaskLevel::image;
  throw DataError("mask: unknown level '" + s + "'");
}

inline MaskStrategy mask_strategy_from_string(const std::string& s) {
  if (s == "none") return MaskStrategy::none;
  if (s == "random") return MaskStrategy::random_mask;
  if (s == "sim_mask") return MaskStrategy::sim_mask;
  if (s == "grad_attr") return MaskStrategy::grad_attr;
  if (s == "image_pool") return MaskStrategy::image_pool;
  throw DataError("mask: unknown strategy '" + s + "'");
}

struct MaskSpec {
  MaskLevel level = MaskLevel::instance;
  MaskStrategy strategy = MaskStrategy::none;
  double threshold = 0.5;
  int pool_size = 0;
  uint64_t seed = 0;

  void validate() const {
    if (strategy == MaskStrategy::sim_mask) {
      if (level != MaskLevel::instance)
        throw DataError("mask: sim_mask works per proposal; level must be instance");
      if (threshold < -1.0 || threshold > 1.0)
        throw DataError("mask: sim_mask threshold must lie in [-1, 1]");
    }
    if (strategy == MaskStrategy::grad_attr &&
        (threshold < 0.0 || threshold > 1.0))
      throw DataError("mask: grad_attr threshold must lie in [0, 1]");
    if (strategy == MaskStrategy::image_pool) {
      if (level != MaskLevel::image)
        throw DataError("mask: image_pool replaces whole images; level must be image");
      if (pool_size < 1)
        throw DataError("mask: image_pool needs a positive pool_size");
    }
  }

  nlohmann::json to_json() const {
    return nlohmann::json{{"level", to_string(level)},
                          {"strategy", to_string(strategy)},
                          {"threshold", threshold},
                          {"pool_size", pool_size},
                          {"seed", seed}};
  }

  static MaskSpec from_json(const nlohmann::json& j) {
    MaskSpec s;
    try {
      s.level = mask_level_from_string(j.at("level").get<std::string>());
      s.strategy = mask_strategy_from_string(j.at("strategy").get<std::string>());
      s.threshold = j.at("threshold").get<double>();
      s.pool_size = j.at("pool_size").get<int>();
      s.seed = j.at("seed").get<uint64_t>();
    } catch (const nlohmann::json::exception& e) {
      throw DataError(std::string("mask json: ") + e.what());
    }
    s.validate();
    return s;
  }
};

// ---- attribution surrogate ---------------------------------------------------------

struct AttributionScores {
  std::vector<std::vector<double>> per_proposal;  // [ref image][proposal]

  std::vector<double> per_image() const {
    std::vector<double> out;
    for (const auto& img : per_proposal)
      out.push_back(std::accumulate(img.begin(), img.end(), 0.0));
    return out;
  }
};

// Gradient magnitude of the caption log-likelihood with respect to each raw
// reference proposal, reduced by L2 over the feature dimension. The sign flip
// between log-likelihood and its negation vanishes under the norm, so the
// training loss gradient is used directly. Proposals never gathered into a
// tuple have no path to the loss and score exactly zero.
inline AttributionScores attribution(const TransDic& model, const ad::Tensor& tgt,
                                     const std::vector<ad::Tensor>& refs,
                                     const std::vector<int>& caption) {
  if (caption.empty()) throw DataError("attribution: caption is empty");
  ad::Tape t;
  auto b = model.bind(t);
  auto enc = model.encode(t, b, tgt, refs);
  int nll = model.sequence_nll(t, b, enc.m_prime, caption);
  t.backward(nll);
  AttributionScores out;
  for (size_t k = 0; k < refs.size(); ++k) {
    ad::Tensor g = t.grad(enc.ref_nodes[k]);
    std::vector<double> rows;
    for (int i = 0; i < g.rows; ++i) {
      double s = 0.0;
      for (int j = 0; j < g.cols; ++j) s += g.at(i, j) * g.at(i, j);
      rows.push_back(std::sqrt(s));
    }
    out.per_proposal.push_back(std::move(rows));
  }
  return out;
}

// Smallest prefix of the descending-sorted scores whose share of the total
// reaches the threshold; returns the chosen positions in ascending order.
// Ties sort by original position; an all-zero score list selects nothing.
inline std::vector<int> masked_prefix(const std::vector<double>& scores,
                                      double threshold) {
  double total = 0.0;
  for (double v : scores) total += v;
  if (total <= 0.0) return {};
  std::vector<int> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](int a, int b) { return scores[a] > scores[b]; });
  std::vector<int> picked;
  double cum = 0.0;
  for (int idx : order) {
    if (cum / total >= threshold) break;
    picked.push_back(idx);
    cum += scores[idx];
  }
  std::sort(picked.begin(), picked.end());
  return picked;
}

// ---- negative reference construction -----------------------------------------------

// Strategy-specific inputs that do not travel with the feature tensors: the
// caption that drove the positive pass (attribution-guided masking) and the
// fine ranking plus a feature source (pool resampling).
struct NegativeContext {
  std::vector<int> caption;
  std::vector<std::string> ranked;
  std::function<ad::Tensor(const std::string&)> features_of;
};

// Builds the negative reference set. Target features are never modified; the
// returned tensors are fresh copies (or, for pool resampling, replacements).
inline std::vector<ad::Tensor> make_negative(const TransDic& model,
                                             const ad::Tensor& tgt,
                                             const std::vector<ad::Tensor>& refs,
                                             const MaskSpec& mask, Rng& rng,
                                             const NegativeContext& ctx = {}) {
  mask.validate();
  std::vector<ad::Tensor> out = refs;
  auto zero_row = [](ad::Tensor& t, int i) {
    for (int j = 0; j < t.cols; ++j) t.at(i, j) = 0.0;
  };
  auto zero_image = [&](ad::Tensor& t) {
    for (int i = 0; i < t.rows; ++i) zero_row(t, i);
  };

  switch (mask.strategy) {
    case MaskStrategy::none:
      return out;

    case MaskStrategy::random_mask: {
      if (mask.level == MaskLevel::instance) {
        for (auto& img : out)
          for (int i = 0; i < img.rows; ++i)
            if (rng.bernoulli(0.5)) zero_row(img, i);
      } else {
        for (auto& img : out)
          if (rng.bernoulli(0.5)) zero_image(img);
      }
      return out;
    }

    case MaskStrategy::sim_mask: {
      // a reference proposal too similar to any target proposal is dropped;
      // similarity is the same projected-memory cosine the matcher uses
      ad::Tape t;
      auto b = model.bind(t);
      // copies: growing the tape reallocates its node storage
      ad::Tensor mem_t = t.val(model.memory_project(t, b, t.constant(tgt)));
      for (size_t k = 0; k < refs.size(); ++k) {
        ad::Tensor mem_r =
            t.val(model.memory_project(t, b, t.constant(refs[k])));
        for (int i = 0; i < mem_r.rows; ++i) {
          double mx = -2.0;
          for (int j = 0; j < mem_t.rows; ++j)
            mx = std::max(mx, row_cosine(mem_r, i, mem_t, j));
          if (mx > mask.threshold) zero_row(out[k], i);
        }
      }
      return out;
    }

    case MaskStrategy::grad_attr: {
      if (ctx.caption.empty())
        throw DataError("mask: grad_attr needs the caption from the positive pass");
      AttributionScores sc = attribution(model, tgt, refs, ctx.caption);
      if (mask.level == MaskLevel::instance) {
        std::vector<double> flat;
        for (const auto& img : sc.per_proposal)
          for (double v : img) flat.push_back(v);
        std::set<int> picked;
        for (int idx : masked_prefix(flat, mask.threshold)) picked.insert(idx);
        int flat_i = 0;
        for (size_t k = 0; k < out.size(); ++k)
          for (int i = 0; i < out[k].rows; ++i, ++flat_i)
            if (picked.count(flat_i)) zero_row(out[k], i);
      } else {
        for (int k : masked_prefix(sc.per_image(), mask.threshold))
          zero_image(out[k]);
      }
      return out;
    }

    case MaskStrategy::image_pool: {
      if (!ctx.features_of || ctx.ranked.empty())
        throw DataError("mask: image_pool needs the fine ranking and a feature source");
      int k_refs = static_cast<int>(refs.size());
      if (mask.pool_size <= k_refs)
        throw DataError("mask: pool_size must exceed the reference-group size");
      if (static_cast<int>(ctx.ranked.size()) < mask.pool_size)
        throw DataError("mask: the fine ranking has fewer entries than pool_size");
      std::vector<std::string> pool(ctx.ranked.begin(),
                                    ctx.ranked.begin() + mask.pool_size);
      rng.shuffle(pool);
      out.clear();
      for (int i = 0; i < k_refs; ++i) out.push_back(ctx.features_of(pool[i]));
      return out;
    }
  }
  throw InternalError("unknown mask strategy");
}

// ---- optimizer ---------------------------------------------------------------------

struct Sgd {
  double lr = 1e-3;
  double momentum = 0.9;
  std::vector<ad::Tensor> velocity;  // aligned with the parameter store

  void step(ParamStore& params, const std::vector<ad::Tensor>& grads) {
    if (grads.size() != params.size())
      throw InternalError("sgd: gradient count does not match parameter count");
    if (velocity.empty())
      for (const auto& [name, t] : params.items())
        velocity.push_back(ad::Tensor::zeros(t.rows, t.cols));
    if (velocity.size() != params.size())
      throw InternalError("sgd: velocity state does not match parameter count");
    for (size_t i = 0; i < params.size(); ++i) {
      ad::Tensor& p = params.items()[i].second;
      if (!p.same_shape(grads[i]))
        throw InternalError("sgd: gradient shape mismatch at " + params.items()[i].first);
      for (size_t e = 0; e < p.data.size(); ++e) {
        velocity[i].data[e] = momentum * velocity[i].data[e] + grads[i].data[e];
        p.data[e] -= lr * velocity[i].data[e];
      }
    }
  }
};

// ---- self-critical reward algebra ---------------------------------------------------

// Mean-baseline advantages, split into the consensus part and the
// distinctiveness part so that structurally constant penalties cancel exactly:
// a part whose values are bitwise identical centers to exact zeros, and fully
// tied rewards yield all-zero coefficients (hence exactly zero gradients).
inline std::vector<double> scst_coefficients(const std::vector<double>& cider_part,
                                             const std::vector<double>& dis_part,
                                             double lambda) {
  if (cider_part.size() != dis_part.size())
    throw InternalError("reward parts must align");
  size_t n = cider_part.size();
  if (n == 0) return {};
  auto centered = [n](const std::vector<double>& v) {
    bool all_same = true;
    for (double x : v) all_same = all_same && x == v[0];
    std::vector<double> out(n);
    if (all_same) return out;  // exact zeros
    double mean = std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(n);
    for (size_t i = 0; i < n; ++i) out[i] = v[i] - mean;
    return out;
  };
  std::vector<double> cc = centered(cider_part);
  std::vector<double> dc = centered(dis_part);
  bool tied = true;
  for (size_t i = 0; i < n; ++i)
    tied = tied && cider_part[i] + lambda * dis_part[i] ==
                       cider_part[0] + lambda * dis_part[0];
  std::vector<double> out(n, 0.0);
  if (!tied)
    for (size_t i = 0; i < n; ++i) out[i] = cc[i] + lambda * dc[i];
  return out;
}

// ---- trainer -----------------------------------------------------------------------

struct ScstBatch {
  std::vector<Hypothesis> candidates;  // positive-pass beam, rank order
  std::vector<Hypothesis> negatives;   // negative-pass beam, paired by rank
  std::vector<double> rewards;
  std::vector<double> logps;
  double baseline = 0.0;  // mean of rewards
};

struct Example {
  ad::Tensor target;
  std::vector<ad::Tensor> refs;
  std::vector<int> caption;
};

struct TrainConfig {
  double lr_xe = 1e-3;
  double lr_rl = 1e-4;
  int steps_xe = 0;
  int steps_rl = 0;
  int batch_size = 8;  // teacher-forced examples per optimizer step
  int beam_n = 5;
  RewardConfig reward;
  MaskSpec mask;
  uint64_t seed = 0;
  ModelConfig model;

  void validate() const {
    if (lr_xe <= 0.0 || lr_rl <= 0.0)
      throw DataError("train config: learning rates must be positive");
    if (steps_xe < 0 || steps_rl < 0)
      throw DataError("train config: step counts must be non-negative");
    if (batch_size < 1) throw DataError("train config: batch_size must be >= 1");
    if (beam_n < 1) throw DataError("train config: beam_n must be >= 1");
    mask.validate();
    // zero d_feat / vocab_size are placeholders the trainer fills from the
    // corpus; a concrete model config must stand on its own
    if (model.d_feat != 0 && model.vocab_size != 0) model.validate();
  }

  nlohmann::json to_json() const {
    return nlohmann::json{
        {"lr_xe", lr_xe},
        {"lr_rl", lr_rl},
        {"steps_xe", steps_xe},
        {"steps_rl", steps_rl},
        {"batch_size", batch_size},
        {"beam_n", beam_n},
        {"reward",
         {{"alpha_b", reward.alpha_b},
          {"alpha_c", reward.alpha_c},
          {"beta", reward.beta},
          {"lambda", reward.lambda}}},
        {"mask", mask.to_json()},
        {"seed", seed},
        {"model", model.to_json()}};
  }

  static TrainConfig from_json(const nlohmann::json& j) {
    TrainConfig c;
    try {
      c.lr_xe = j.at("lr_xe").get<double>();
      c.lr_rl = j.at("lr_rl").get<double>();
      c.steps_xe = j.at("steps_xe").get<int>();
      c.steps_rl = j.at("steps_rl").get<int>();
      c.batch_size = j.at("batch_size").get<int>();
      c.beam_n = j.at("beam_n").get<int>();
      const auto& r = j.at("reward");
      c.reward.alpha_b = r.at("alpha_b").get<double>();
      c.reward.alpha_c = r.at("alpha_c").get<double>();
      c.reward.beta = r.at("beta").get<double>();
      c.reward.lambda = r.at("lambda").get<double>();
      c.mask = MaskSpec::from_json(j.at("mask"));
      c.seed = j.at("seed").get<uint64_t>();
      c.model = ModelConfig::from_json(j.at("model"), /*validate=*/false);
    } catch (const nlohmann::json::exception& e) {
      throw DataError(std::string("train config json: ") + e.what());
    }
    c.validate();
    return c;
  }
};

class Trainer {
 public:
  Trainer(TransDic& model, const TrainConfig& cfg) : model_(model), cfg_(cfg) {
    cfg_.mask.validate();
    sgd_xe_.lr = cfg_.lr_xe;
    sgd_rl_.lr = cfg_.lr_rl;
  }

  // teacher-forced batch: mean sequence loss, one optimizer update; returns
  // the pre-update loss value
  double xe_batch(const std::vector<Example>& batch) {
    if (batch.empty()) throw InternalError("xe: empty batch");
    for (const auto& ex : batch)
      if (ex.caption.empty()) throw DataError("xe: empty caption");
    ad::Tape t;
    auto b = model_.bind(t);
    std::vector<int> losses;
    for (const auto& ex : batch) {
      auto enc = model_.encode(t, b, ex.target, ex.refs);
      losses.push_back(model_.sequence_nll(t, b, enc.m_prime, ex.caption));
    }
    int loss = losses.size() == 1 ? losses[0] : t.sum_all(t.concat_rows(losses));
    if (batch.size() > 1)
      loss = t.scale(loss, 1.0 / static_cast<double>(batch.size()));
    t.backward(loss);
    apply(sgd_xe_, t, b);
    return t.val(loss).data[0];
  }

  double xe_step(const ad::Tensor& tgt, const std::vector<ad::Tensor>& refs,
                 const std::vector<int>& caption) {
    return xe_batch({Example{tgt, refs, caption}});
  }

  struct ScstResult {
    double loss = 0.0;
    ScstBatch batch;
    std::vector<ad::Tensor> grads;  // aligned with the parameter store
  };

  // One self-critical update on one target. The positive pass beams the
  // candidate set; the negative pass beams the masked reference set with the
  // same width, and candidates are compared to negatives of the same rank so
  // an unmasked negative pass reproduces each candidate exactly. Rewards are
  // constants; with the mean baseline, tied rewards produce a zero loss
  // surface and exactly zero gradients.
  ScstResult scst_step(const ad::Tensor& tgt, const std::vector<ad::Tensor>& refs,
                       const std::vector<TokenSeq>& gt, const DfTable& df,
                       Rng& mask_rng, const NegativeContext& ctx_in = {}) {
    if (gt.empty()) throw DataError("scst: no ground-truth captions");
    const int n = cfg_.beam_n;
    const int max_len = model_.config().max_len;

    ad::Tensor mp_pos = model_.encode_values(tgt, refs);
    std::vector<Hypothesis> cands = model_.beam(mp_pos, n, max_len);

    NegativeContext ctx = ctx_in;
    if (cfg_.mask.strategy == MaskStrategy::grad_attr && ctx.caption.empty())
      ctx.caption = cands[0].tokens;  // attribution follows the top candidate
    std::vector<ad::Tensor> x_neg =
        make_negative(model_, tgt, refs, cfg_.mask, mask_rng, ctx);
    ad::Tensor mp_neg = model_.encode_values(tgt, x_neg);
    std::vector<Hypothesis> negs = model_.beam(mp_neg, n, max_len);
    if (negs.size() != cands.size())
      throw InternalError("scst: negative beam width mismatch");

    std::vector<double> cider_part, dis_part;
    for (size_t i = 0; i < cands.size(); ++i) {
      TokenSeq cp = model_.caption_of(cands[i]);
      TokenSeq cn = model_.caption_of(negs[i]);
      cider_part.push_back(cider(cp, gt, df));
      double bp = bleuder(cp, gt, df, cfg_.reward);
      double bn = bleuder(cn, gt, df, cfg_.reward);
      dis_part.push_back(disreward(bp, bn, cfg_.reward.beta));
    }
    std::vector<double> coeff =
        scst_coefficients(cider_part, dis_part, cfg_.reward.lambda);

    ScstResult res;
    res.batch.candidates = cands;
    res.batch.negatives = negs;
    double reward_sum = 0.0;
    for (size_t i = 0; i < cands.size(); ++i) {
      double r = final_reward(cider_part[i], dis_part[i], cfg_.reward.lambda);
      res.batch.rewards.push_back(r);
      reward_sum += r;
    }
    res.batch.baseline = reward_sum / static_cast<double>(cands.size());

    ad::Tape t;
    auto b = model_.bind(t);
    auto enc = model_.encode(t, b, tgt, refs);
    std::vector<int> terms;
    for (size_t i = 0; i < cands.size(); ++i) {
      int lp = model_.hypothesis_logprob(t, b, enc.m_prime, cands[i]);
      res.batch.logps.push_back(t.val(lp).data[0]);
      terms.push_back(t.scale(lp, -coeff[i] / static_cast<double>(n)));
    }
    int loss = terms.size() == 1 ? terms[0] : t.sum_all(t.concat_rows(terms));
    t.backward(loss);
    for (int id : b.ids) res.grads.push_back(t.grad(id));
    sgd_rl_.step(model_.params(), res.grads);
    res.loss = t.val(loss).data[0];
    return res;
  }

 private:
  void apply(Sgd& opt, ad::Tape& t, const TransDic::Binding& b) {
    std::vector<ad::Tensor> grads;
    for (int id : b.ids) grads.push_back(t.grad(id));
    opt.step(model_.params(), grads);
  }

  TransDic& model_;
  TrainConfig cfg_;
  Sgd sgd_xe_;
  Sgd sgd_rl_;
};

// ---- training loop -----------------------------------------------------------------

struct TrainOutcome {
  std::vector<nlohmann::ordered_json> log;
  double best_disc = -std::numeric_limits<double>::infinity();
  std::string checkpoint_xe, checkpoint_best, checkpoint_final, metrics_path;
};

// Two-phase schedule: teacher-forced steps, then self-critical steps. The
// batch size governs the teacher-forced phase; a self-critical step processes
// one target (its beam is already a batch of sequences). Validation metrics
// are logged at every epoch boundary and at each phase's final step; the
// checkpoint with the best validation DisC is kept alongside the phase-end
// and final checkpoints. Everything is driven by the config seed.
inline TrainOutcome train(const TrainConfig& cfg_in, const DatasetManifest& m,
                          const std::map<std::string, ReferenceGroup>& groups,
                          const std::string& out_dir) {
  TrainConfig cfg = cfg_in;
  Vocab vocab = Vocab::build(m, "train");
  if (cfg.model.vocab_size == 0)
    cfg.model.vocab_size = static_cast<int>(vocab.size());
  else if (cfg.model.vocab_size != static_cast<int>(vocab.size()))
    throw DataError("train: config vocab_size " + std::to_string(cfg.model.vocab_size) +
                    " does not match the train-split vocabulary (" +
                    std::to_string(vocab.size()) + ")");
  if (cfg.model.d_feat == 0) cfg.model.d_feat = m.d_feat();
  else if (cfg.model.d_feat != m.d_feat())
    throw DataError("train: config d_feat does not match the corpus features");
  cfg.validate();
  cfg.model.validate();

  namespace fs = std::filesystem;
  fs::create_directories(out_dir);
  TrainOutcome out;
  out.checkpoint_xe = (fs::path(out_dir) / "checkpoint_xe.bin").string();
  out.checkpoint_best = (fs::path(out_dir) / "checkpoint_best.bin").string();
  out.checkpoint_final = (fs::path(out_dir) / "checkpoint_final.bin").string();
  out.metrics_path = (fs::path(out_dir) / "metrics.jsonl").string();

  TransDic model(cfg.model, vocab, cfg.seed);
  Trainer trainer(model, cfg);
  DfTable df_train = build_df(m, "train");

  std::vector<std::pair<std::string, int>> xe_items;  // (image id, caption index)
  std::vector<std::string> rl_items;
  bool has_val = false;
  for (const auto& img : m.images) {
    if (!groups.count(img.id)) continue;
    if (img.split == "train") {
      rl_items.push_back(img.id);
      for (size_t ci = 0; ci < img.captions.size(); ++ci)
        xe_items.push_back({img.id, static_cast<int>(ci)});
    } else if (img.split == "val") {
      has_val = true;
    }
  }
  if (xe_items.empty())
    throw DataError("train: no train-split images with reference groups");
  if (!has_val)
    throw DataError("train: no val-split images with reference groups");

  auto feats_of = [&](const std::string& id) {
    return features_tensor(m.by_id(id));
  };
  auto refs_of = [&](const std::string& id) {
    std::vector<ad::Tensor> refs;
    for (const auto& rid : groups.at(id).references) refs.push_back(feats_of(rid));
    return refs;
  };

  std::ofstream log(out.metrics_path, std::ios::binary);
  if (!log.good()) throw DataError("train: cannot write " + out.metrics_path);
  bool best_saved = false;
  auto eval_and_log = [&](const std::string& phase, int step, int epoch) {
    auto cands =
        generate_captions(model, m, groups, "val", cfg.beam_n, cfg.model.max_len);
    EvalReport rep = evaluate_candidates(m, groups, "val", cands);
    nlohmann::ordered_json j{{"phase", phase}, {"step", step}, {"epoch", epoch},
                             {"B-1", rep.b1},  {"B-4", rep.b4}, {"C", rep.c},
                             {"DisC", rep.disc}};
    log << j.dump() << "\n";
    out.log.push_back(j);
    if (rep.disc > out.best_disc) {
      out.best_disc = rep.disc;
      save_checkpoint(model, out.checkpoint_best);
      best_saved = true;
    }
  };

  Rng order_rng(cfg.seed ^ 0x9e3779b97f4a7c15ULL);
  Rng mask_rng(cfg.mask.seed);

  std::vector<size_t> order(xe_items.size());
  std::iota(order.begin(), order.end(), 0);
  order_rng.shuffle(order);
  size_t cursor = 0;
  int epoch = 0;
  for (int step = 1; step <= cfg.steps_xe; ++step) {
    std::vector<Example> batch;
    bool epoch_done = false;
    for (int bi = 0; bi < cfg.batch_size; ++bi) {
      const auto& [id, ci] = xe_items[order[cursor++]];
      batch.push_back(Example{feats_of(id), refs_of(id),
                              vocab.encode(tokenize(m.by_id(id).captions[ci]))});
      if (cursor == order.size()) {
        cursor = 0;
        order_rng.shuffle(order);
        ++epoch;
        epoch_done = true;
      }
    }
    trainer.xe_batch(batch);
    if (epoch_done || step == cfg.steps_xe) eval_and_log("xe", step, epoch);
  }
  save_checkpoint(model, out.checkpoint_xe);

  std::vector<size_t> rl_order(rl_items.size());
  std::iota(rl_order.begin(), rl_order.end(), 0);
  order_rng.shuffle(rl_order);
  cursor = 0;
  epoch = 0;
  for (int step = 1; step <= cfg.steps_rl; ++step) {
    const std::string& id = rl_items[rl_order[cursor++]];
    bool epoch_done = false;
    if (cursor == rl_order.size()) {
      cursor = 0;
      order_rng.shuffle(rl_order);
      ++epoch;
      epoch_done = true;
    }
    std::vector<TokenSeq> gt;
    for (const auto& cap : m.by_id(id).captions) gt.push_back(tokenize(cap));
    NegativeContext ctx;
    if (cfg.mask.strategy == MaskStrategy::image_pool) {
      ctx.ranked = groups.at(id).ranked;
      ctx.features_of = feats_of;
    }
    trainer.scst_step(feats_of(id), refs_of(id), gt, df_train, mask_rng, ctx);
    if (epoch_done || step == cfg.steps_rl) eval_and_log("rl", step, epoch);
  }

  save_checkpoint(model, out.checkpoint_final);
  if (!best_saved) save_checkpoint(model, out.checkpoint_best);
  return out;
}

}  // namespace refdic
