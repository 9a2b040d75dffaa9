#pragma once
// Define-by-run reverse-mode autodiff over dense fp64 matrices. Sized for
// desk-scale models: no views, no broadcasting beyond row vectors, every op
// materializes its output and checks it for non-finite values immediately so
// a blowup is reported at the op that produced it.

#include <cmath>
#include <functional>
#include <initializer_list>
#include <string>
#include <utility>
#include <vector>

#include "refdic/common.hpp"

namespace refdic::ad {

struct Tensor {
  int rows = 0;
  int cols = 0;
  std::vector<double> data;  // row-major

  static Tensor zeros(int r, int c) {
    Tensor t;
    t.rows = r;
    t.cols = c;
    t.data.assign(static_cast<size_t>(r) * c, 0.0);
    return t;
  }

  static Tensor full(int r, int c, double v) {
    Tensor t = zeros(r, c);
    for (double& x : t.data) x = v;
    return t;
  }

  static Tensor from(std::initializer_list<std::initializer_list<double>> rows_in) {
    Tensor t;
    t.rows = static_cast<int>(rows_in.size());
    for (const auto& row : rows_in) {
      if (t.cols == 0) t.cols = static_cast<int>(row.size());
      if (static_cast<int>(row.size()) != t.cols)
        throw InternalError("tensor literal has ragged rows");
      t.data.insert(t.data.end(), row.begin(), row.end());
    }
    return t;
  }

  double& at(int i, int j) { return data[static_cast<size_t>(i) * cols + j]; }
  double at(int i, int j) const { return data[static_cast<size_t>(i) * cols + j]; }
  bool same_shape(const Tensor& o) const { return rows == o.rows && cols == o.cols; }
};

struct MhaParams {
  int wq = -1, bq = -1;
  int wk = -1, bk = -1;
  int wv = -1, bv = -1;
  int wo = -1, bo = -1;
};

class Tape {
 public:
  // node closures capture this, so a tape must stay where it was built
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  int input(const Tensor& t) { return push(t, {}); }
  int constant(const Tensor& t) { return push(t, {}); }

  const Tensor& val(int id) const { return node(id).value; }

  const Tensor& grad(int id) const {
    if (grads_.size() != nodes_.size())
      throw InternalError("grad() before backward()");
    node(id);
    return grads_[static_cast<size_t>(id)];
  }

  size_t size() const { return nodes_.size(); }

  // ---- kernels ----

  int matmul(int a, int b) {
    const Tensor &A = val(a), &B = val(b);
    if (A.cols != B.rows) throw InternalError("matmul: inner dims disagree");
    Tensor out = Tensor::zeros(A.rows, B.cols);
    for (int i = 0; i < A.rows; ++i)
      for (int k = 0; k < A.cols; ++k) {
        double aik = A.at(i, k);
        for (int j = 0; j < B.cols; ++j) out.at(i, j) += aik * B.at(k, j);
      }
    return push(std::move(out), [this, a, b](int self) {
      const Tensor &A = val(a), &B = val(b), &G = grads_[self];
      Tensor& dA = grads_[a];
      Tensor& dB = grads_[b];
      for (int i = 0; i < A.rows; ++i)
        for (int j = 0; j < B.cols; ++j) {
          double g = G.at(i, j);
          if (g == 0.0) continue;
          for (int k = 0; k < A.cols; ++k) {
            dA.at(i, k) += g * B.at(k, j);
            dB.at(k, j) += g * A.at(i, k);
          }
        }
    });
  }

  // A * B^T without materializing the transpose
  int matmul_nt(int a, int b) {
    const Tensor &A = val(a), &B = val(b);
    if (A.cols != B.cols) throw InternalError("matmul_nt: inner dims disagree");
    Tensor out = Tensor::zeros(A.rows, B.rows);
    for (int i = 0; i < A.rows; ++i)
      for (int j = 0; j < B.rows; ++j) {
        double s = 0.0;
        for (int k = 0; k < A.cols; ++k) s += A.at(i, k) * B.at(j, k);
        out.at(i, j) = s;
      }
    return push(std::move(out), [this, a, b](int self) {
      const Tensor &A = val(a), &B = val(b), &G = grads_[self];
      Tensor& dA = grads_[a];
      Tensor& dB = grads_[b];
      for (int i = 0; i < A.rows; ++i)
        for (int j = 0; j < B.rows; ++j) {
          double g = G.at(i, j);
          if (g == 0.0) continue;
          for (int k = 0; k < A.cols; ++k) {
            dA.at(i, k) += g * B.at(j, k);
            dB.at(j, k) += g * A.at(i, k);
          }
        }
    });
  }

  int add(int a, int b) {
    const Tensor &A = val(a), &B = val(b);
    if (!A.same_shape(B)) throw InternalError("add: shape mismatch");
    Tensor out = A;
    for (size_t i = 0; i < out.data.size(); ++i) out.data[i] += B.data[i];
    return push(std::move(out), [this, a, b](int self) {
      const Tensor& G = grads_[self];
      for (size_t i = 0; i < G.data.size(); ++i) {
        grads_[a].data[i] += G.data[i];
        grads_[b].data[i] += G.data[i];
      }
    });
  }

  int add_rowvec(int a, int b) {
    const Tensor &A = val(a), &B = val(b);
    if (B.rows != 1 || B.cols != A.cols)
      throw InternalError("add_rowvec: need a 1 x cols vector");
    Tensor out = A;
    for (int i = 0; i < A.rows; ++i)
      for (int j = 0; j < A.cols; ++j) out.at(i, j) += B.at(0, j);
    return push(std::move(out), [this, a, b](int self) {
      const Tensor& G = grads_[self];
      for (int i = 0; i < G.rows; ++i)
        for (int j = 0; j < G.cols; ++j) {
          grads_[a].at(i, j) += G.at(i, j);
          grads_[b].at(0, j) += G.at(i, j);
        }
    });
  }

  int scale(int a, double s) {
    Tensor out = val(a);
    for (double& v : out.data) v *= s;
    return push(std::move(out), [this, a, s](int self) {
      const Tensor& G = grads_[self];
      for (size_t i = 0; i < G.data.size(); ++i) grads_[a].data[i] += s * G.data[i];
    });
  }

  int concat_rows(const std::vector<int>& parts) {
    if (parts.empty()) throw InternalError("concat_rows: no parts");
    int cols = val(parts[0]).cols;
    int rows = 0;
    for (int p : parts) {
      if (val(p).cols != cols) throw InternalError("concat_rows: column mismatch");
      rows += val(p).rows;
    }
    Tensor out = Tensor::zeros(rows, cols);
    int r = 0;
    for (int p : parts) {
      const Tensor& P = val(p);
      std::copy(P.data.begin(), P.data.end(),
                out.data.begin() + static_cast<size_t>(r) * cols);
      r += P.rows;
    }
    return push(std::move(out), [this, parts](int self) {
      const Tensor& G = grads_[self];
      int r = 0;
      for (int p : parts) {
        Tensor& dP = grads_[p];
        for (int i = 0; i < dP.rows; ++i)
          for (int j = 0; j < dP.cols; ++j) dP.at(i, j) += G.at(r + i, j);
        r += dP.rows;
      }
    });
  }

  int concat_cols(const std::vector<int>& parts) {
    if (parts.empty()) throw InternalError("concat_cols: no parts");
    int rows = val(parts[0]).rows;
    int cols = 0;
    for (int p : parts) {
      if (val(p).rows != rows) throw InternalError("concat_cols: row mismatch");
      cols += val(p).cols;
    }
    Tensor out = Tensor::zeros(rows, cols);
    int c = 0;
    for (int p : parts) {
      const Tensor& P = val(p);
      for (int i = 0; i < rows; ++i)
        for (int j = 0; j < P.cols; ++j) out.at(i, c + j) = P.at(i, j);
      c += P.cols;
    }
    return push(std::move(out), [this, parts](int self) {
      const Tensor& G = grads_[self];
      int c = 0;
      for (int p : parts) {
        Tensor& dP = grads_[p];
        for (int i = 0; i < dP.rows; ++i)
          for (int j = 0; j < dP.cols; ++j) dP.at(i, j) += G.at(i, c + j);
        c += dP.cols;
      }
    });
  }

  int slice_rows(int a, int r0, int r1) {
    const Tensor& A = val(a);
    if (r0 < 0 || r1 > A.rows || r0 >= r1)
      throw InternalError("slice_rows: bad range");
    Tensor out = Tensor::zeros(r1 - r0, A.cols);
    for (int i = r0; i < r1; ++i)
      for (int j = 0; j < A.cols; ++j) out.at(i - r0, j) = A.at(i, j);
    return push(std::move(out), [this, a, r0](int self) {
      const Tensor& G = grads_[self];
      for (int i = 0; i < G.rows; ++i)
        for (int j = 0; j < G.cols; ++j) grads_[a].at(r0 + i, j) += G.at(i, j);
    });
  }

  int slice_cols(int a, int c0, int c1) {
    const Tensor& A = val(a);
    if (c0 < 0 || c1 > A.cols || c0 >= c1)
      throw InternalError("slice_cols: bad range");
    Tensor out = Tensor::zeros(A.rows, c1 - c0);
    for (int i = 0; i < A.rows; ++i)
      for (int j = c0; j < c1; ++j) out.at(i, j - c0) = A.at(i, j);
    return push(std::move(out), [this, a, c0](int self) {
      const Tensor& G = grads_[self];
      for (int i = 0; i < G.rows; ++i)
        for (int j = 0; j < G.cols; ++j) grads_[a].at(i, c0 + j) += G.at(i, j);
    });
  }

  // duplicate indices are fine; their gradients accumulate on the source row
  int gather_rows(int a, std::vector<int> idx) {
    const Tensor& A = val(a);
    for (int i : idx)
      if (i < 0 || i >= A.rows) throw InternalError("gather_rows: index out of range");
    Tensor out = Tensor::zeros(static_cast<int>(idx.size()), A.cols);
    for (size_t r = 0; r < idx.size(); ++r)
      for (int j = 0; j < A.cols; ++j)
        out.at(static_cast<int>(r), j) = A.at(idx[r], j);
    return push(std::move(out), [this, a, idx = std::move(idx)](int self) {
      const Tensor& G = grads_[self];
      for (size_t r = 0; r < idx.size(); ++r)
        for (int j = 0; j < G.cols; ++j)
          grads_[a].at(idx[r], j) += G.at(static_cast<int>(r), j);
    });
  }

  int relu(int a) {
    const Tensor& A = val(a);
    Tensor out = A;
    for (double& v : out.data) v = v > 0.0 ? v : 0.0;
    return push(std::move(out), [this, a](int self) {
      const Tensor &A = val(a), &G = grads_[self];
      for (size_t i = 0; i < G.data.size(); ++i)
        if (A.data[i] > 0.0) grads_[a].data[i] += G.data[i];
    });
  }

  int row_softmax(int a) { return softmax_impl(a, false); }

  // lower-triangular mask: entry (i, j) participates iff j <= i
  int row_softmax_causal(int a) {
    const Tensor& A = val(a);
    if (A.rows != A.cols) throw InternalError("row_softmax_causal: square input only");
    return softmax_impl(a, true);
  }

  int row_log_softmax(int a) {
    const Tensor& A = val(a);
    Tensor out = Tensor::zeros(A.rows, A.cols);
    for (int i = 0; i < A.rows; ++i) {
      double mx = A.at(i, 0);
      for (int j = 1; j < A.cols; ++j) mx = std::max(mx, A.at(i, j));
      double lse = 0.0;
      for (int j = 0; j < A.cols; ++j) lse += std::exp(A.at(i, j) - mx);
      lse = mx + std::log(lse);
      for (int j = 0; j < A.cols; ++j) out.at(i, j) = A.at(i, j) - lse;
    }
    return push(std::move(out), [this, a](int self) {
      const Tensor &Y = val(self), &G = grads_[self];
      for (int i = 0; i < Y.rows; ++i) {
        double gsum = 0.0;
        for (int j = 0; j < Y.cols; ++j) gsum += G.at(i, j);
        for (int j = 0; j < Y.cols; ++j)
          grads_[a].at(i, j) += G.at(i, j) - std::exp(Y.at(i, j)) * gsum;
      }
    });
  }

  // per-row normalization with population variance, then elementwise affine
  int layer_norm(int a, int gamma, int beta) {
    const Tensor &A = val(a), &Gm = val(gamma), &Bt = val(beta);
    if (Gm.rows != 1 || Gm.cols != A.cols || Bt.rows != 1 || Bt.cols != A.cols)
      throw InternalError("layer_norm: gamma/beta must be 1 x cols");
    const double eps = 1e-5;
    Tensor out = Tensor::zeros(A.rows, A.cols);
    Tensor xhat = Tensor::zeros(A.rows, A.cols);
    std::vector<double> inv_std(A.rows);
    for (int i = 0; i < A.rows; ++i) {
      double mean = 0.0;
      for (int j = 0; j < A.cols; ++j) mean += A.at(i, j);
      mean /= A.cols;
      double var = 0.0;
      for (int j = 0; j < A.cols; ++j) {
        double d = A.at(i, j) - mean;
        var += d * d;
      }
      var /= A.cols;
      double inv = 1.0 / std::sqrt(var + eps);
      inv_std[i] = inv;
      for (int j = 0; j < A.cols; ++j) {
        xhat.at(i, j) = (A.at(i, j) - mean) * inv;
        out.at(i, j) = Gm.at(0, j) * xhat.at(i, j) + Bt.at(0, j);
      }
    }
    return push(std::move(out), [this, a, gamma, beta, xhat = std::move(xhat),
                                 inv_std = std::move(inv_std)](int self) {
      const Tensor &G = grads_[self], &Gm = val(gamma);
      int rows = G.rows, cols = G.cols;
      for (int i = 0; i < rows; ++i) {
        double mean_dx = 0.0, mean_dx_xhat = 0.0;
        for (int j = 0; j < cols; ++j) {
          double dxh = G.at(i, j) * Gm.at(0, j);
          mean_dx += dxh;
          mean_dx_xhat += dxh * xhat.at(i, j);
        }
        mean_dx /= cols;
        mean_dx_xhat /= cols;
        for (int j = 0; j < cols; ++j) {
          double dxh = G.at(i, j) * Gm.at(0, j);
          grads_[a].at(i, j) +=
              inv_std[i] * (dxh - mean_dx - xhat.at(i, j) * mean_dx_xhat);
          grads_[gamma].at(0, j) += G.at(i, j) * xhat.at(i, j);
          grads_[beta].at(0, j) += G.at(i, j);
        }
      }
    });
  }

  // sum over rows of -ln p[i, target_i]; expects probability-like rows
  int cross_entropy(int probs, std::vector<int> targets) {
    const Tensor& P = val(probs);
    if (static_cast<int>(targets.size()) != P.rows)
      throw InternalError("cross_entropy: one target per row");
    double loss = 0.0;
    for (int i = 0; i < P.rows; ++i) {
      int y = targets[i];
      if (y < 0 || y >= P.cols)
        throw InternalError("cross_entropy: target out of range");
      double p = P.at(i, y);
      if (p <= 0.0)
        throw InternalError("cross_entropy: picked probability is not positive");
      loss -= std::log(p);
    }
    return push(Tensor::full(1, 1, loss),
                [this, probs, targets = std::move(targets)](int self) {
                  const Tensor& P = val(probs);
                  double g = grads_[self].at(0, 0);
                  for (int i = 0; i < P.rows; ++i)
                    grads_[probs].at(i, targets[i]) -= g / P.at(i, targets[i]);
                });
  }

  // per-row cosine similarity of two equally shaped matrices -> n x 1;
  // a zero row on either side pins the value (and its gradient) to 0
  int cosine_rows(int a, int b) {
    const Tensor &A = val(a), &B = val(b);
    if (!A.same_shape(B)) throw InternalError("cosine_rows: shape mismatch");
    Tensor out = Tensor::zeros(A.rows, 1);
    for (int i = 0; i < A.rows; ++i) {
      double dot = 0.0, na = 0.0, nb = 0.0;
      for (int j = 0; j < A.cols; ++j) {
        dot += A.at(i, j) * B.at(i, j);
        na += A.at(i, j) * A.at(i, j);
        nb += B.at(i, j) * B.at(i, j);
      }
      if (na >= 1e-24 && nb >= 1e-24) out.at(i, 0) = dot / (std::sqrt(na) * std::sqrt(nb));
    }
    return push(std::move(out), [this, a, b](int self) {
      const Tensor &A = val(a), &B = val(b), &C = val(self), &G = grads_[self];
      for (int i = 0; i < A.rows; ++i) {
        double g = G.at(i, 0);
        if (g == 0.0) continue;
        double na = 0.0, nb = 0.0;
        for (int j = 0; j < A.cols; ++j) {
          na += A.at(i, j) * A.at(i, j);
          nb += B.at(i, j) * B.at(i, j);
        }
        if (na < 1e-24 || nb < 1e-24) continue;
        double inv_ab = 1.0 / (std::sqrt(na) * std::sqrt(nb));
        double c = C.at(i, 0);
        for (int j = 0; j < A.cols; ++j) {
          grads_[a].at(i, j) += g * (B.at(i, j) * inv_ab - c * A.at(i, j) / na);
          grads_[b].at(i, j) += g * (A.at(i, j) * inv_ab - c * B.at(i, j) / nb);
        }
      }
    });
  }

  // one entry per row -> n x 1
  int pick_cols(int a, std::vector<int> cols) {
    const Tensor& A = val(a);
    if (static_cast<int>(cols.size()) != A.rows)
      throw InternalError("pick_cols: one column per row");
    for (int c : cols)
      if (c < 0 || c >= A.cols) throw InternalError("pick_cols: column out of range");
    Tensor out = Tensor::zeros(A.rows, 1);
    for (int i = 0; i < A.rows; ++i) out.at(i, 0) = A.at(i, cols[i]);
    return push(std::move(out), [this, a, cols = std::move(cols)](int self) {
      const Tensor& G = grads_[self];
      for (int i = 0; i < G.rows; ++i) grads_[a].at(i, cols[i]) += G.at(i, 0);
    });
  }

  int sum_all(int a) {
    const Tensor& A = val(a);
    double s = 0.0;
    for (double v : A.data) s += v;
    return push(Tensor::full(1, 1, s), [this, a](int self) {
      double g = grads_[self].at(0, 0);
      for (double& v : grads_[a].data) v += g;
    });
  }

  int multi_head_attention(int q, int kv, const MhaParams& p, int n_heads,
                           bool causal) {
    const int d = val(q).cols;
    if (val(kv).cols != d) throw InternalError("attention: feature width mismatch");
    if (n_heads <= 0 || d % n_heads != 0)
      throw InternalError("attention: heads must divide the feature width");
    if (causal && val(q).rows != val(kv).rows)
      throw InternalError("attention: causal mode needs matched lengths");
    int Q = add_rowvec(matmul(q, p.wq), p.bq);
    int K = add_rowvec(matmul(kv, p.wk), p.bk);
    int V = add_rowvec(matmul(kv, p.wv), p.bv);
    int dh = d / n_heads;
    std::vector<int> heads;
    for (int h = 0; h < n_heads; ++h) {
      int qh = slice_cols(Q, h * dh, (h + 1) * dh);
      int kh = slice_cols(K, h * dh, (h + 1) * dh);
      int vh = slice_cols(V, h * dh, (h + 1) * dh);
      int scores = scale(matmul_nt(qh, kh), 1.0 / std::sqrt(static_cast<double>(dh)));
      int attn = causal ? row_softmax_causal(scores) : row_softmax(scores);
      heads.push_back(matmul(attn, vh));
    }
    int merged = heads.size() == 1 ? heads[0] : concat_cols(heads);
    return add_rowvec(matmul(merged, p.wo), p.bo);
  }

  // reverse sweep from the scalar loss; each node's rule fires exactly once
  void backward(int loss) {
    const Tensor& L = val(loss);
    if (L.rows != 1 || L.cols != 1)
      throw InternalError("backward: loss must be a 1 x 1 scalar");
    grads_.clear();
    grads_.reserve(nodes_.size());
    for (const Node& n : nodes_)
      grads_.push_back(Tensor::zeros(n.value.rows, n.value.cols));
    grads_[static_cast<size_t>(loss)].at(0, 0) = 1.0;
    for (int id = loss; id >= 0; --id)
      if (nodes_[static_cast<size_t>(id)].back) nodes_[static_cast<size_t>(id)].back(id);
  }

 private:
  struct Node {
    Tensor value;
    std::function<void(int)> back;  // accumulates into grads_ of its inputs
  };

  const Node& node(int id) const {
    if (id < 0 || static_cast<size_t>(id) >= nodes_.size())
      throw InternalError("bad tape node id");
    return nodes_[static_cast<size_t>(id)];
  }

  int push(Tensor value, std::function<void(int)> back) {
    for (double v : value.data)
      if (!std::isfinite(v)) throw InternalError("non-finite value on the tape");
    nodes_.push_back(Node{std::move(value), std::move(back)});
    return static_cast<int>(nodes_.size()) - 1;
  }

  int softmax_impl(int a, bool causal) {
    const Tensor& A = val(a);
    Tensor out = Tensor::zeros(A.rows, A.cols);
    for (int i = 0; i < A.rows; ++i) {
      int limit = causal ? i + 1 : A.cols;
      double mx = A.at(i, 0);
      for (int j = 1; j < limit; ++j) mx = std::max(mx, A.at(i, j));
      double denom = 0.0;
      for (int j = 0; j < limit; ++j) denom += std::exp(A.at(i, j) - mx);
      for (int j = 0; j < limit; ++j) out.at(i, j) = std::exp(A.at(i, j) - mx) / denom;
    }
    return push(std::move(out), [this, a, causal](int self) {
      const Tensor &Y = val(self), &G = grads_[self];
      for (int i = 0; i < Y.rows; ++i) {
        int limit = causal ? i + 1 : Y.cols;
        double dot = 0.0;
        for (int j = 0; j < limit; ++j) dot += G.at(i, j) * Y.at(i, j);
        for (int j = 0; j < limit; ++j)
          grads_[a].at(i, j) += Y.at(i, j) * (G.at(i, j) - dot);
      }
    });
  }

  std::vector<Node> nodes_;
  std::vector<Tensor> grads_;
};

}  // namespace refdic::ad
