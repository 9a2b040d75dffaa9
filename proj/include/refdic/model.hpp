#pragma once
// Two-flow captioner. A target image's proposal features pass through a
// shared memory MLP, a self-attention target flow, and a co-attention
// target-reference flow built from per-proposal tuples (one argmax-similar
// proposal from each reference image). The concatenated flows feed a causal
// transformer decoder over a learned token/position embedding.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include <json.hpp>

#include "refdic/common.hpp"
#include "refdic/rng.hpp"
#include "refdic/tensor.hpp"
#include "refdic/text.hpp"
#include "refdic/vocab.hpp"

namespace refdic {

struct ModelConfig {
  int d_feat = 0;
  int d_model = 512;
  int n_layers_target = 3;
  int n_layers_select = 3;
  int n_layers_fuse = 3;
  int n_layers_decoder = 3;
  int n_heads = 8;
  int vocab_size = 0;
  int max_len = 20;
  // ablation switch: feed every select layer the raw tuple features instead
  // of the running fuse output
  bool select_from_raw = false;

  void validate() const {
    if (d_feat < 1) throw DataError("model config: d_feat must be positive");
    if (d_model < 1) throw DataError("model config: d_model must be positive");
    if (n_heads < 1 || d_model % n_heads != 0)
      throw DataError("model config: n_heads must divide d_model");
    if (n_layers_target < 1 || n_layers_select < 1 || n_layers_fuse < 1 ||
        n_layers_decoder < 1)
      throw DataError("model config: layer counts must be >= 1");
    if (vocab_size < 4) throw DataError("model config: vocab_size must cover the specials");
    if (max_len < 1) throw DataError("model config: max_len must be positive");
  }

  nlohmann::json to_json() const {
    return nlohmann::json{{"d_feat", d_feat},
                          {"d_model", d_model},
                          {"n_layers_target", n_layers_target},
                          {"n_layers_select", n_layers_select},
                          {"n_layers_fuse", n_layers_fuse},
                          {"n_layers_decoder", n_layers_decoder},
                          {"n_heads", n_heads},
                          {"vocab_size", vocab_size},
                          {"max_len", max_len},
                          {"select_from_raw", select_from_raw}};
  }

  // validate=false lets callers defer the check when d_feat / vocab_size are
  // placeholders (0) to be derived from a corpus before the model is built
  static ModelConfig from_json(const nlohmann::json& j, bool validate = true) {
    ModelConfig c;
    try {
      c.d_feat = j.at("d_feat").get<int>();
      c.d_model = j.at("d_model").get<int>();
      c.n_layers_target = j.at("n_layers_target").get<int>();
      c.n_layers_select = j.at("n_layers_select").get<int>();
      c.n_layers_fuse = j.at("n_layers_fuse").get<int>();
      c.n_layers_decoder = j.at("n_layers_decoder").get<int>();
      c.n_heads = j.at("n_heads").get<int>();
      c.vocab_size = j.at("vocab_size").get<int>();
      c.max_len = j.at("max_len").get<int>();
      c.select_from_raw = j.value("select_from_raw", false);
    } catch (const nlohmann::json::exception& e) {
      throw DataError(std::string("model config json: ") + e.what());
    }
    if (validate) c.validate();
    return c;
  }
};

class ParamStore {
 public:
  ad::Tensor& add(const std::string& name, int rows, int cols) {
    if (index_.count(name)) throw InternalError("duplicate parameter " + name);
    index_.emplace(name, static_cast<int>(items_.size()));
    items_.emplace_back(name, ad::Tensor::zeros(rows, cols));
    return items_.back().second;
  }

  int index_of(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw InternalError("unknown parameter " + name);
    return it->second;
  }

  ad::Tensor& at(const std::string& name) { return items_[index_of(name)].second; }
  const ad::Tensor& at(const std::string& name) const {
    return items_[index_of(name)].second;
  }

  std::vector<std::pair<std::string, ad::Tensor>>& items() { return items_; }
  const std::vector<std::pair<std::string, ad::Tensor>>& items() const { return items_; }
  size_t size() const { return items_.size(); }

 private:
  std::vector<std::pair<std::string, ad::Tensor>> items_;
  std::unordered_map<std::string, int> index_;
};

// per-reference cosine matrix [N_ref_prop x N_tgt_prop] plus, per target
// proposal, the argmax row in each reference (ties to the lowest index)
struct MatchResult {
  std::vector<ad::Tensor> sims;
  std::vector<std::vector<int>> selected;  // [N_tgt][K]
};

inline double row_cosine(const ad::Tensor& a, int ai, const ad::Tensor& b, int bi) {
  double dot = 0.0, na = 0.0, nb = 0.0;
  for (int j = 0; j < a.cols; ++j) {
    dot += a.at(ai, j) * b.at(bi, j);
    na += a.at(ai, j) * a.at(ai, j);
    nb += b.at(bi, j) * b.at(bi, j);
  }
  if (na < 1e-24 || nb < 1e-24) return 0.0;
  return dot / (std::sqrt(na) * std::sqrt(nb));
}

inline MatchResult match_proposals(const ad::Tensor& mem_t,
                                   const std::vector<ad::Tensor>& mem_refs) {
  if (mem_refs.empty()) throw InternalError("match: need at least one reference");
  MatchResult r;
  int n = mem_t.rows;
  r.selected.assign(n, std::vector<int>(mem_refs.size(), 0));
  for (size_t k = 0; k < mem_refs.size(); ++k) {
    const ad::Tensor& mk = mem_refs[k];
    if (mk.rows < 1) throw InternalError("match: reference has no proposals");
    ad::Tensor s = ad::Tensor::zeros(mk.rows, n);
    for (int i = 0; i < mk.rows; ++i)
      for (int j = 0; j < n; ++j) s.at(i, j) = row_cosine(mk, i, mem_t, j);
    for (int j = 0; j < n; ++j) {
      int best = 0;
      for (int i = 1; i < mk.rows; ++i)
        if (s.at(i, j) > s.at(best, j)) best = i;
      r.selected[j][k] = best;
    }
    r.sims.push_back(std::move(s));
  }
  return r;
}

struct Hypothesis {
  std::vector<int> tokens;  // emitted ids, EOS excluded
  double log_prob = 0.0;
  bool eos = false;
};

class TransDic {
 public:
  TransDic(ModelConfig cfg, Vocab vocab) : cfg_(cfg), vocab_(std::move(vocab)) {
    cfg_.validate();
    if (vocab_.size() != cfg_.vocab_size)
      throw DataError("model: vocab size disagrees with config");
    build_layout();
  }

  TransDic(ModelConfig cfg, Vocab vocab, uint64_t seed)
      : TransDic(cfg, std::move(vocab)) {
    init_params(seed);
  }

  const ModelConfig& config() const { return cfg_; }
  const Vocab& vocab() const { return vocab_; }
  ParamStore& params() { return params_; }
  const ParamStore& params() const { return params_; }

  struct Binding {
    std::vector<int> ids;  // aligned with ParamStore::items order
    const ParamStore* store = nullptr;
    int of(const std::string& name) const { return ids[store->index_of(name)]; }
  };

  Binding bind(ad::Tape& t) const {
    Binding b;
    b.store = &params_;
    b.ids.reserve(params_.size());
    for (const auto& [name, tensor] : params_.items()) {
      (void)name;
      b.ids.push_back(t.input(tensor));
    }
    return b;
  }

  struct Encoded {
    int m_prime = -1;
    int target_node = -1;           // raw target feature leaf
    std::vector<int> ref_nodes;     // raw reference feature leaves
    MatchResult match;
  };

  int memory_project(ad::Tape& t, const Binding& b, int x) const {
    int h = t.relu(t.add_rowvec(t.matmul(x, b.of("mem.w1")), b.of("mem.b1")));
    return t.add_rowvec(t.matmul(h, b.of("mem.w2")), b.of("mem.b2"));
  }

  Encoded encode(ad::Tape& t, const Binding& b, const ad::Tensor& target_feats,
                 const std::vector<ad::Tensor>& ref_feats) const {
    if (target_feats.cols != cfg_.d_feat)
      throw DataError("encode: target feature width disagrees with config");
    if (target_feats.rows < 1) throw DataError("encode: target has no proposals");
    if (ref_feats.empty()) throw DataError("encode: need at least one reference");
    for (const auto& rf : ref_feats) {
      if (rf.cols != cfg_.d_feat)
        throw DataError("encode: reference feature width disagrees with config");
      if (rf.rows < 1) throw DataError("encode: reference has no proposals");
    }

    Encoded e;
    e.target_node = t.input(target_feats);
    int mem_t = memory_project(t, b, e.target_node);
    std::vector<int> mem_refs;
    for (const auto& rf : ref_feats) {
      e.ref_nodes.push_back(t.input(rf));
      mem_refs.push_back(memory_project(t, b, e.ref_nodes.back()));
    }

    // matching is off-tape: gradients flow only through the gathered rows
    std::vector<ad::Tensor> mem_ref_vals;
    for (int mr : mem_refs) mem_ref_vals.push_back(t.val(mr));
    e.match = match_proposals(t.val(mem_t), mem_ref_vals);

    int target_out = mem_t;
    for (int l = 0; l < cfg_.n_layers_target; ++l) {
      std::string p = "target." + std::to_string(l);
      target_out = attn_ln(t, b, p + ".attn", p + ".ln1", target_out, target_out, false);
      target_out = ffn_ln(t, b, p + ".ffn", p + ".ln2", target_out);
    }

    int n = target_feats.rows;
    std::vector<int> refined;
    for (int j = 0; j < n; ++j) {
      std::vector<int> rows;
      for (size_t k = 0; k < mem_refs.size(); ++k) {
        int sel = e.match.selected[j][k];
        rows.push_back(t.slice_rows(mem_refs[k], sel, sel + 1));
      }
      int u0 = rows.size() == 1 ? rows[0] : t.concat_rows(rows);
      int u = u0;
      int v = t.slice_rows(mem_t, j, j + 1);
      int depth = std::max(cfg_.n_layers_select, cfg_.n_layers_fuse);
      for (int l = 0; l < depth; ++l) {
        // the select layer reads the previous fuse output (or the raw tuple
        // features under the ablation flag), so it runs before the update
        if (l < cfg_.n_layers_select) {
          int kv = cfg_.select_from_raw ? u0 : u;
          std::string p = "select." + std::to_string(l);
          v = attn_ln(t, b, p + ".attn", p + ".ln1", v, kv, false);
          v = ffn_ln(t, b, p + ".ffn", p + ".ln2", v);
        }
        if (l < cfg_.n_layers_fuse) {
          std::string p = "fuse." + std::to_string(l);
          u = attn_ln(t, b, p + ".attn", p + ".ln1", u, u, false);
          u = ffn_ln(t, b, p + ".ffn", p + ".ln2", u);
        }
      }
      refined.push_back(v);
    }
    int m_tilde = refined.size() == 1 ? refined[0] : t.concat_rows(refined);
    e.m_prime = t.concat_rows({target_out, m_tilde});
    return e;
  }

  // log-probability rows over the vocab, one per prefix position
  int decode_logprobs(ad::Tape& t, const Binding& b, int m_prime,
                      const std::vector<int>& prefix) const {
    if (prefix.empty() || prefix[0] != Vocab::kBos)
      throw InternalError("decode: prefix must start with BOS");
    if (static_cast<int>(prefix.size()) > cfg_.max_len + 1)
      throw InternalError("decode: prefix exceeds max_len");
    for (int id : prefix)
      if (id < 0 || id >= cfg_.vocab_size) throw InternalError("decode: token out of vocab");
    int te = t.gather_rows(b.of("embed.tok"), prefix);
    std::vector<int> pos(prefix.size());
    std::iota(pos.begin(), pos.end(), 0);
    int pe = t.gather_rows(b.of("embed.pos"), pos);
    int x = t.add(te, pe);
    for (int l = 0; l < cfg_.n_layers_decoder; ++l) {
      std::string p = "dec." + std::to_string(l);
      x = attn_ln(t, b, p + ".self", p + ".ln1", x, x, true);
      x = attn_ln(t, b, p + ".cross", p + ".ln2", x, m_prime, false);
      x = ffn_ln(t, b, p + ".ffn", p + ".ln3", x);
    }
    int logits = t.add_rowvec(t.matmul(x, b.of("out.w")), b.of("out.b"));
    return t.row_log_softmax(logits);
  }

  // teacher-forced negative log-likelihood of caption_ids + EOS
  int sequence_nll(ad::Tape& t, const Binding& b, int m_prime,
                   std::vector<int> caption_ids) const {
    if (caption_ids.empty()) throw DataError("nll: empty caption");
    if (static_cast<int>(caption_ids.size()) > cfg_.max_len)
      caption_ids.resize(cfg_.max_len);
    std::vector<int> prefix{Vocab::kBos};
    prefix.insert(prefix.end(), caption_ids.begin(), caption_ids.end());
    std::vector<int> targets = caption_ids;
    targets.push_back(Vocab::kEos);
    int lp = decode_logprobs(t, b, m_prime, prefix);
    return t.scale(t.sum_all(t.pick_cols(lp, targets)), -1.0);
  }

  // log p of a decoded hypothesis under the current graph; the EOS term is
  // included only when the hypothesis actually ended with EOS, matching the
  // score the decoding loop accumulated
  int hypothesis_logprob(ad::Tape& t, const Binding& b, int m_prime,
                         const Hypothesis& hyp) const {
    std::vector<int> prefix{Vocab::kBos};
    prefix.insert(prefix.end(), hyp.tokens.begin(), hyp.tokens.end());
    int lp = decode_logprobs(t, b, m_prime, prefix);
    std::vector<int> picks = hyp.tokens;
    if (hyp.eos)
      picks.push_back(Vocab::kEos);
    else
      lp = t.slice_rows(lp, 0, static_cast<int>(hyp.tokens.size()));
    return t.sum_all(t.pick_cols(lp, picks));
  }

  // ---- value-level inference ----

  ad::Tensor encode_values(const ad::Tensor& target_feats,
                           const std::vector<ad::Tensor>& ref_feats) const {
    ad::Tape t;
    Binding b = bind(t);
    Encoded e = encode(t, b, target_feats, ref_feats);
    return t.val(e.m_prime);
  }

  std::vector<double> next_logprobs(const ad::Tensor& m_prime,
                                    const std::vector<int>& prefix) const {
    ad::Tape t;
    Binding b = bind(t);
    int mp = t.constant(m_prime);
    int lp = decode_logprobs(t, b, mp, prefix);
    const ad::Tensor& L = t.val(lp);
    std::vector<double> out(L.cols);
    for (int j = 0; j < L.cols; ++j) out[j] = L.at(L.rows - 1, j);
    return out;
  }

  Hypothesis greedy(const ad::Tensor& m_prime, int max_len) const {
    Hypothesis h;
    std::vector<int> prefix{Vocab::kBos};
    while (static_cast<int>(h.tokens.size()) < max_len) {
      std::vector<double> lp = next_logprobs(m_prime, prefix);
      int best = 0;
      for (int j = 1; j < static_cast<int>(lp.size()); ++j)
        if (lp[j] > lp[best]) best = j;
      h.log_prob += lp[best];
      if (best == Vocab::kEos) {
        h.eos = true;
        break;
      }
      h.tokens.push_back(best);
      prefix.push_back(best);
    }
    return h;
  }

  // finished hypotheses keep competing for slots with fresh expansions, so a
  // width of 1 degenerates exactly to greedy decoding
  std::vector<Hypothesis> beam(const ad::Tensor& m_prime, int n, int max_len) const {
    if (n < 1) throw InternalError("beam: width must be >= 1");
    auto better = [](const Hypothesis& a, const Hypothesis& b) {
      if (a.log_prob != b.log_prob) return a.log_prob > b.log_prob;
      return a.tokens < b.tokens;
    };
    std::vector<Hypothesis> kept{Hypothesis{}};
    kept[0].eos = false;
    auto all_done = [&] {
      for (const auto& h : kept)
        if (!h.eos && static_cast<int>(h.tokens.size()) < max_len) return false;
      return true;
    };
    while (!all_done()) {
      std::vector<Hypothesis> cands;
      for (const auto& h : kept) {
        if (h.eos || static_cast<int>(h.tokens.size()) >= max_len) {
          cands.push_back(h);
          continue;
        }
        std::vector<int> prefix{Vocab::kBos};
        prefix.insert(prefix.end(), h.tokens.begin(), h.tokens.end());
        std::vector<double> lp = next_logprobs(m_prime, prefix);
        for (int tok = 0; tok < static_cast<int>(lp.size()); ++tok) {
          Hypothesis nh = h;
          nh.log_prob += lp[tok];
          if (tok == Vocab::kEos)
            nh.eos = true;
          else
            nh.tokens.push_back(tok);
          cands.push_back(std::move(nh));
        }
      }
      std::sort(cands.begin(), cands.end(), better);
      if (static_cast<int>(cands.size()) > n) cands.resize(n);
      kept = std::move(cands);
    }
    std::sort(kept.begin(), kept.end(), better);
    return kept;
  }

  std::vector<Hypothesis> generate(const ad::Tensor& target_feats,
                                   const std::vector<ad::Tensor>& ref_feats,
                                   int beam_n, int max_len) const {
    ad::Tensor m_prime = encode_values(target_feats, ref_feats);
    if (beam_n == 1) return {greedy(m_prime, max_len)};
    return beam(m_prime, beam_n, max_len);
  }

  TokenSeq caption_of(const Hypothesis& h) const { return vocab_.decode(h.tokens); }

  void init_params(uint64_t seed) {
    Rng rng(seed);
    for (auto& [name, tensor] : params_.items()) {
      bool is_gain = name.size() >= 2 && name.compare(name.size() - 2, 2, ".g") == 0;
      if (is_gain) {
        for (double& v : tensor.data) v = 1.0;
      } else if (tensor.rows == 1) {
        for (double& v : tensor.data) v = 0.0;  // biases and LN shifts
      } else {
        double limit = std::sqrt(6.0 / (tensor.rows + tensor.cols));
        for (double& v : tensor.data) v = rng.uniform(-limit, limit);
      }
    }
  }

 private:
  friend void save_checkpoint(const TransDic&, const std::string&);
  friend TransDic load_checkpoint(const std::string&);

  int attn_ln(ad::Tape& t, const Binding& b, const std::string& attn_prefix,
              const std::string& ln_prefix, int q, int kv, bool causal) const {
    ad::MhaParams p;
    p.wq = b.of(attn_prefix + ".wq");
    p.bq = b.of(attn_prefix + ".bq");
    p.wk = b.of(attn_prefix + ".wk");
    p.bk = b.of(attn_prefix + ".bk");
    p.wv = b.of(attn_prefix + ".wv");
    p.bv = b.of(attn_prefix + ".bv");
    p.wo = b.of(attn_prefix + ".wo");
    p.bo = b.of(attn_prefix + ".bo");
    int a = t.multi_head_attention(q, kv, p, cfg_.n_heads, causal);
    return t.layer_norm(t.add(q, a), b.of(ln_prefix + ".g"), b.of(ln_prefix + ".b"));
  }

  int ffn_ln(ad::Tape& t, const Binding& b, const std::string& ffn_prefix,
             const std::string& ln_prefix, int x) const {
    int h = t.relu(t.add_rowvec(t.matmul(x, b.of(ffn_prefix + ".w1")),
                                b.of(ffn_prefix + ".b1")));
    int f = t.add_rowvec(t.matmul(h, b.of(ffn_prefix + ".w2")), b.of(ffn_prefix + ".b2"));
    return t.layer_norm(t.add(x, f), b.of(ln_prefix + ".g"), b.of(ln_prefix + ".b"));
  }

  void add_attn(const std::string& prefix) {
    int d = cfg_.d_model;
    params_.add(prefix + ".wq", d, d);
    params_.add(prefix + ".bq", 1, d);
    params_.add(prefix + ".wk", d, d);
    params_.add(prefix + ".bk", 1, d);
    params_.add(prefix + ".wv", d, d);
    params_.add(prefix + ".bv", 1, d);
    params_.add(prefix + ".wo", d, d);
    params_.add(prefix + ".bo", 1, d);
  }

  void add_ln(const std::string& prefix) {
    params_.add(prefix + ".g", 1, cfg_.d_model);
    params_.add(prefix + ".b", 1, cfg_.d_model);
  }

  void add_ffn(const std::string& prefix) {
    int d = cfg_.d_model;
    params_.add(prefix + ".w1", d, 4 * d);
    params_.add(prefix + ".b1", 1, 4 * d);
    params_.add(prefix + ".w2", 4 * d, d);
    params_.add(prefix + ".b2", 1, d);
  }

  void build_layout() {
    params_.add("mem.w1", cfg_.d_feat, cfg_.d_model);
    params_.add("mem.b1", 1, cfg_.d_model);
    params_.add("mem.w2", cfg_.d_model, cfg_.d_model);
    params_.add("mem.b2", 1, cfg_.d_model);
    auto enc_stack = [&](const std::string& stack, int layers) {
      for (int l = 0; l < layers; ++l) {
        std::string p = stack + "." + std::to_string(l);
        add_attn(p + ".attn");
        add_ln(p + ".ln1");
        add_ffn(p + ".ffn");
        add_ln(p + ".ln2");
      }
    };
    enc_stack("target", cfg_.n_layers_target);
    enc_stack("select", cfg_.n_layers_select);
    enc_stack("fuse", cfg_.n_layers_fuse);
    for (int l = 0; l < cfg_.n_layers_decoder; ++l) {
      std::string p = "dec." + std::to_string(l);
      add_attn(p + ".self");
      add_ln(p + ".ln1");
      add_attn(p + ".cross");
      add_ln(p + ".ln2");
      add_ffn(p + ".ffn");
      add_ln(p + ".ln3");
    }
    params_.add("embed.tok", cfg_.vocab_size, cfg_.d_model);
    params_.add("embed.pos", cfg_.max_len + 1, cfg_.d_model);
    params_.add("out.w", cfg_.d_model, cfg_.vocab_size);
    params_.add("out.b", 1, cfg_.vocab_size);
  }

  ModelConfig cfg_;
  Vocab vocab_;
  ParamStore params_;
};

// ---- checkpoint io: magic, version, config json, vocab json, named f64 params ----

inline void save_checkpoint(const TransDic& model, const std::string& path) {
  std::string out = "RDKC";
  put_u32(out, 1);
  std::string cfg = model.config().to_json().dump();
  put_u32(out, static_cast<uint32_t>(cfg.size()));
  out += cfg;
  std::string voc = model.vocab().to_json().dump();
  put_u32(out, static_cast<uint32_t>(voc.size()));
  out += voc;
  const auto& items = model.params().items();
  put_u32(out, static_cast<uint32_t>(items.size()));
  for (const auto& [name, tensor] : items) {
    put_u16(out, static_cast<uint16_t>(name.size()));
    out += name;
    put_u32(out, static_cast<uint32_t>(tensor.rows));
    put_u32(out, static_cast<uint32_t>(tensor.cols));
    for (double v : tensor.data) put_f64(out, v);
  }
  write_file_bytes(path, out);
}

inline TransDic load_checkpoint(const std::string& path) {
  std::string bytes = read_file_bytes(path);
  BinReader r(bytes, path);
  if (r.str(4) != "RDKC") throw DataError(path + ": not a checkpoint file");
  uint32_t version = r.u32();
  if (version != 1) throw DataError(path + ": unsupported checkpoint version");
  nlohmann::json cfg_json, voc_json;
  try {
    cfg_json = nlohmann::json::parse(r.str(r.u32()));
    voc_json = nlohmann::json::parse(r.str(r.u32()));
  } catch (const nlohmann::json::exception& e) {
    throw DataError(path + ": bad checkpoint header: " + e.what());
  }
  ModelConfig cfg = ModelConfig::from_json(cfg_json);
  Vocab vocab = Vocab::from_json(voc_json);
  TransDic model(cfg, std::move(vocab));
  uint32_t count = r.u32();
  if (count != model.params().size())
    throw DataError(path + ": checkpoint parameter count disagrees with config");
  for (auto& [name, tensor] : model.params().items()) {
    std::string got = r.str(r.u16());
    if (got != name)
      throw DataError(path + ": expected parameter '" + name + "', found '" + got + "'");
    uint32_t rows = r.u32(), cols = r.u32();
    if (static_cast<int>(rows) != tensor.rows || static_cast<int>(cols) != tensor.cols)
      throw DataError(path + ": shape mismatch for parameter '" + name + "'");
    for (double& v : tensor.data) v = r.f64();
  }
  if (!r.at_end()) throw DataError(path + ": trailing bytes after parameters");
  return model;
}

}  // namespace refdic
