#pragma once

// Eager reverse-mode tape. Every primitive records its backward closure as it
// executes; backward() replays the closures in reverse. A tape is owned by a
// single worker; tensors it hands out are plain values.

#include <cmath>
#include <deque>
#include <functional>
#include <span>
#include <stdexcept>
#include <vector>

#include "celleco/tensor.hpp"

namespace celleco {

struct Var {
  std::size_t id = static_cast<std::size_t>(-1);
  bool valid() const { return id != static_cast<std::size_t>(-1); }
};

class Tape {
 public:
  Var leaf(Tensor t) { return push(std::move(t), nullptr); }

  const Tensor& val(Var v) const { return nodes_[v.id].value; }
  const Tensor& grad(Var v) const { return nodes_[v.id].adjoint; }

  std::size_t num_nodes() const { return nodes_.size(); }

  // Seeds the scalar root with 1 and replays all adjoints in reverse order.
  void backward(Var root) {
    if (val(root).size() != 1)
      throw std::invalid_argument("backward: root must be scalar, got " +
                                  val(root).shape_str());
    for (auto& n : nodes_) n.adjoint = Tensor::zeros(n.value.shape());
    nodes_[root.id].adjoint[0] = 1.0;
    for (std::size_t i = nodes_.size(); i-- > 0;) {
      if (!nodes_[i].back) continue;
      cursor_ = i;
      nodes_[i].back(*this);
    }
  }

  // ---- primitives ------------------------------------------------------

  // C[m x n] = A[m x k] . B[k x n]
  Var matmul(Var a, Var b) {
    const Tensor& A = val(a);
    const Tensor& B = val(b);
    require(A.rank() == 2 && B.rank() == 2, "matmul: rank-2 operands required");
    if (A.cols() != B.rows())
      throw std::invalid_argument("matmul: inner extents differ, " +
                                  A.shape_str() + " vs " + B.shape_str());
    std::size_t m = A.rows(), k = A.cols(), n = B.cols();
    Tensor C({m, n});
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t l = 0; l < k; ++l) {
        double av = A.at2(i, l);
        for (std::size_t j = 0; j < n; ++j) C.at2(i, j) += av * B.at2(l, j);
      }
    return push(std::move(C), [a, b](Tape& t) {
      Var out{t.cursor_};
      const Tensor& G = t.adj(out);
      const Tensor& A = t.val(a);
      const Tensor& B = t.val(b);
      Tensor& dA = t.mut_adj(a);
      Tensor& dB = t.mut_adj(b);
      for (std::size_t i = 0; i < A.rows(); ++i)
        for (std::size_t j = 0; j < B.cols(); ++j) {
          double g = G.at2(i, j);
          for (std::size_t l = 0; l < A.cols(); ++l) {
            dA.at2(i, l) += g * B.at2(l, j);
            dB.at2(l, j) += g * A.at2(i, l);
          }
        }
    });
  }

  // C[m x n] = A[m x k] . B[n x k]^T
  Var matmul_bt(Var a, Var b) {
    const Tensor& A = val(a);
    const Tensor& B = val(b);
    require(A.rank() == 2 && B.rank() == 2, "matmul_bt: rank-2 operands required");
    if (A.cols() != B.cols())
      throw std::invalid_argument("matmul_bt: inner extents differ, " +
                                  A.shape_str() + " vs " + B.shape_str());
    std::size_t m = A.rows(), k = A.cols(), n = B.rows();
    Tensor C({m, n});
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) {
        double s = 0;
        for (std::size_t l = 0; l < k; ++l) s += A.at2(i, l) * B.at2(j, l);
        C.at2(i, j) = s;
      }
    return push(std::move(C), [a, b](Tape& t) {
      Var out{t.cursor_};
      const Tensor& G = t.adj(out);
      const Tensor& A = t.val(a);
      const Tensor& B = t.val(b);
      Tensor& dA = t.mut_adj(a);
      Tensor& dB = t.mut_adj(b);
      for (std::size_t i = 0; i < A.rows(); ++i)
        for (std::size_t j = 0; j < B.rows(); ++j) {
          double g = G.at2(i, j);
          for (std::size_t l = 0; l < A.cols(); ++l) {
            dA.at2(i, l) += g * B.at2(j, l);
            dB.at2(j, l) += g * A.at2(i, l);
          }
        }
    });
  }

  // y[m] = M[m x d] . x[d]
  Var matvec(Var mv, Var xv) {
    const Tensor& M = val(mv);
    const Tensor& x = val(xv);
    require(M.rank() == 2 && x.rank() == 1, "matvec: need matrix and vector");
    if (M.cols() != x.size())
      throw std::invalid_argument("matvec: " + M.shape_str() + " vs " + x.shape_str());
    Tensor y({M.rows()});
    for (std::size_t i = 0; i < M.rows(); ++i) {
      double s = 0;
      for (std::size_t j = 0; j < M.cols(); ++j) s += M.at2(i, j) * x[j];
      y[i] = s;
    }
    return push(std::move(y), [mv, xv](Tape& t) {
      Var out{t.cursor_};
      const Tensor& G = t.adj(out);
      const Tensor& M = t.val(mv);
      const Tensor& x = t.val(xv);
      Tensor& dM = t.mut_adj(mv);
      Tensor& dx = t.mut_adj(xv);
      for (std::size_t i = 0; i < M.rows(); ++i)
        for (std::size_t j = 0; j < M.cols(); ++j) {
          dM.at2(i, j) += G[i] * x[j];
          dx[j] += G[i] * M.at2(i, j);
        }
    });
  }

  // y[r] = M[m x r]^T . x[m]
  Var matvec_t(Var mv, Var xv) {
    const Tensor& M = val(mv);
    const Tensor& x = val(xv);
    require(M.rank() == 2 && x.rank() == 1, "matvec_t: need matrix and vector");
    if (M.rows() != x.size())
      throw std::invalid_argument("matvec_t: " + M.shape_str() + " vs " + x.shape_str());
    Tensor y({M.cols()});
    for (std::size_t i = 0; i < M.rows(); ++i)
      for (std::size_t j = 0; j < M.cols(); ++j) y[j] += M.at2(i, j) * x[i];
    return push(std::move(y), [mv, xv](Tape& t) {
      Var out{t.cursor_};
      const Tensor& G = t.adj(out);
      const Tensor& M = t.val(mv);
      const Tensor& x = t.val(xv);
      Tensor& dM = t.mut_adj(mv);
      Tensor& dx = t.mut_adj(xv);
      for (std::size_t i = 0; i < M.rows(); ++i)
        for (std::size_t j = 0; j < M.cols(); ++j) {
          dM.at2(i, j) += G[j] * x[i];
          dx[i] += G[j] * M.at2(i, j);
        }
    });
  }

  Var add(Var a, Var b) {
    const Tensor& A = val(a);
    const Tensor& B = val(b);
    check_shapes_match(A, B, "add");
    Tensor C = A;
    for (std::size_t i = 0; i < C.size(); ++i) C[i] += B[i];
    return push(std::move(C), [a, b](Tape& t) {
      Var out{t.cursor_};
      const Tensor& G = t.adj(out);
      Tensor& dA = t.mut_adj(a);
      Tensor& dB = t.mut_adj(b);
      for (std::size_t i = 0; i < G.size(); ++i) {
        dA[i] += G[i];
        dB[i] += G[i];
      }
    });
  }

  // Adds a constant tensor; no gradient flows into the constant.
  Var add_const(Var a, const Tensor& c) {
    const Tensor& A = val(a);
    check_shapes_match(A, c, "add_const");
    Tensor C = A;
    for (std::size_t i = 0; i < C.size(); ++i) C[i] += c[i];
    return push(std::move(C), [a](Tape& t) {
      Var out{t.cursor_};
      const Tensor& G = t.adj(out);
      Tensor& dA = t.mut_adj(a);
      for (std::size_t i = 0; i < G.size(); ++i) dA[i] += G[i];
    });
  }

  Var scale(Var a, double c) {
    Tensor C = val(a);
    for (double& v : C.vec()) v *= c;
    return push(std::move(C), [a, c](Tape& t) {
      Var out{t.cursor_};
      const Tensor& G = t.adj(out);
      Tensor& dA = t.mut_adj(a);
      for (std::size_t i = 0; i < G.size(); ++i) dA[i] += c * G[i];
    });
  }

  // Row-wise softmax with per-row max subtraction. Accepts a matrix or a
  // vector (treated as one row).
  Var softmax_rows(Var a) {
    const Tensor& A = val(a);
    require(A.rank() == 1 || A.rank() == 2, "softmax_rows: rank 1 or 2");
    std::size_t r = A.rank() == 2 ? A.rows() : 1;
    std::size_t c = A.rank() == 2 ? A.cols() : A.size();
    Tensor Y = A;
    for (std::size_t i = 0; i < r; ++i) {
      double* row = Y.data() + i * c;
      double mx = row[0];
      for (std::size_t j = 1; j < c; ++j) mx = std::max(mx, row[j]);
      double z = 0;
      for (std::size_t j = 0; j < c; ++j) {
        row[j] = std::exp(row[j] - mx);
        z += row[j];
      }
      for (std::size_t j = 0; j < c; ++j) row[j] /= z;
    }
    return push(std::move(Y), [a, r, c](Tape& t) {
      Var out{t.cursor_};
      const Tensor& Y = t.val(out);
      const Tensor& G = t.adj(out);
      Tensor& dA = t.mut_adj(a);
      for (std::size_t i = 0; i < r; ++i) {
        const double* y = Y.data() + i * c;
        const double* g = G.data() + i * c;
        double dotgy = 0;
        for (std::size_t j = 0; j < c; ++j) dotgy += g[j] * y[j];
        double* da = dA.data() + i * c;
        for (std::size_t j = 0; j < c; ++j) da[j] += y[j] * (g[j] - dotgy);
      }
    });
  }

  // Normalizes each row of M (or the whole vector) over the last axis:
  // gamma * (x - mean) / sqrt(var + eps) + beta.
  Var layer_norm(Var mv, Var gv, Var bv, double eps) {
    const Tensor& M = val(mv);
    const Tensor& g = val(gv);
    const Tensor& b = val(bv);
    require(M.rank() == 1 || M.rank() == 2, "layer_norm: rank 1 or 2");
    std::size_t r = M.rank() == 2 ? M.rows() : 1;
    std::size_t d = M.rank() == 2 ? M.cols() : M.size();
    if (g.size() != d || b.size() != d)
      throw std::invalid_argument("layer_norm: gamma/beta length mismatch");
    require(eps > 0, "layer_norm: eps must be positive");
    Tensor Y = M;
    for (std::size_t i = 0; i < r; ++i) {
      double* row = Y.data() + i * d;
      double mu = 0;
      for (std::size_t j = 0; j < d; ++j) mu += row[j];
      mu /= static_cast<double>(d);
      double var = 0;
      for (std::size_t j = 0; j < d; ++j) var += (row[j] - mu) * (row[j] - mu);
      var /= static_cast<double>(d);
      double inv = 1.0 / std::sqrt(var + eps);
      for (std::size_t j = 0; j < d; ++j)
        row[j] = g[j] * (row[j] - mu) * inv + b[j];
    }
    return push(std::move(Y), [mv, gv, bv, r, d, eps](Tape& t) {
      Var out{t.cursor_};
      const Tensor& G = t.adj(out);
      const Tensor& M = t.val(mv);
      const Tensor& g = t.val(gv);
      Tensor& dM = t.mut_adj(mv);
      Tensor& dg = t.mut_adj(gv);
      Tensor& db = t.mut_adj(bv);
      for (std::size_t i = 0; i < r; ++i) {
        const double* x = M.data() + i * d;
        const double* go = G.data() + i * d;
        double mu = 0;
        for (std::size_t j = 0; j < d; ++j) mu += x[j];
        mu /= static_cast<double>(d);
        double var = 0;
        for (std::size_t j = 0; j < d; ++j) var += (x[j] - mu) * (x[j] - mu);
        var /= static_cast<double>(d);
        double inv = 1.0 / std::sqrt(var + eps);
        // xhat, then the standard layer-norm input gradient
        double mean_h = 0, mean_hx = 0;
        std::vector<double> xhat(d), h(d);
        for (std::size_t j = 0; j < d; ++j) {
          xhat[j] = (x[j] - mu) * inv;
          h[j] = go[j] * g[j];
          mean_h += h[j];
          mean_hx += h[j] * xhat[j];
          dg[j] += go[j] * xhat[j];
          db[j] += go[j];
        }
        mean_h /= static_cast<double>(d);
        mean_hx /= static_cast<double>(d);
        double* dm = dM.data() + i * d;
        for (std::size_t j = 0; j < d; ++j)
          dm[j] += (h[j] - mean_h - xhat[j] * mean_hx) * inv;
      }
    });
  }

  Var tanh_op(Var a) {
    Tensor Y = val(a);
    for (double& v : Y.vec()) v = std::tanh(v);
    return push(std::move(Y), [a](Tape& t) {
      Var out{t.cursor_};
      const Tensor& Y = t.val(out);
      const Tensor& G = t.adj(out);
      Tensor& dA = t.mut_adj(a);
      for (std::size_t i = 0; i < G.size(); ++i)
        dA[i] += G[i] * (1.0 - Y[i] * Y[i]);
    });
  }

  Var sigmoid_op(Var a) {
    Tensor Y = val(a);
    for (double& v : Y.vec()) v = stable_sigmoid(v);
    return push(std::move(Y), [a](Tape& t) {
      Var out{t.cursor_};
      const Tensor& Y = t.val(out);
      const Tensor& G = t.adj(out);
      Tensor& dA = t.mut_adj(a);
      for (std::size_t i = 0; i < G.size(); ++i)
        dA[i] += G[i] * Y[i] * (1.0 - Y[i]);
    });
  }

  Var mul(Var a, Var b) {
    const Tensor& A = val(a);
    const Tensor& B = val(b);
    check_shapes_match(A, B, "mul");
    Tensor C = A;
    for (std::size_t i = 0; i < C.size(); ++i) C[i] *= B[i];
    return push(std::move(C), [a, b](Tape& t) {
      Var out{t.cursor_};
      const Tensor& G = t.adj(out);
      const Tensor& A = t.val(a);
      const Tensor& B = t.val(b);
      Tensor& dA = t.mut_adj(a);
      Tensor& dB = t.mut_adj(b);
      for (std::size_t i = 0; i < G.size(); ++i) {
        dA[i] += G[i] * B[i];
        dB[i] += G[i] * A[i];
      }
    });
  }

  // M[a x b] = u[a] v[b]^T
  Var outer(Var uv, Var vv) {
    const Tensor& u = val(uv);
    const Tensor& v = val(vv);
    require(u.rank() == 1 && v.rank() == 1, "outer: vectors required");
    Tensor M({u.size(), v.size()});
    for (std::size_t i = 0; i < u.size(); ++i)
      for (std::size_t j = 0; j < v.size(); ++j) M.at2(i, j) = u[i] * v[j];
    return push(std::move(M), [uv, vv](Tape& t) {
      Var out{t.cursor_};
      const Tensor& G = t.adj(out);
      const Tensor& u = t.val(uv);
      const Tensor& v = t.val(vv);
      Tensor& du = t.mut_adj(uv);
      Tensor& dv = t.mut_adj(vv);
      for (std::size_t i = 0; i < u.size(); ++i)
        for (std::size_t j = 0; j < v.size(); ++j) {
          du[i] += G.at2(i, j) * v[j];
          dv[j] += G.at2(i, j) * u[i];
        }
    });
  }

  // Row-major flatten to a vector; a pure view on the tape.
  Var flatten(Var a) {
    Tensor Y({val(a).size()}, val(a).vec());
    return push(std::move(Y), [a](Tape& t) {
      Var out{t.cursor_};
      const Tensor& G = t.adj(out);
      Tensor& dA = t.mut_adj(a);
      for (std::size_t i = 0; i < G.size(); ++i) dA[i] += G[i];
    });
  }

  // Frobenius norm (Euclidean norm for vectors); subgradient at 0 is 0.
  Var norm2(Var a) {
    double s = 0;
    for (double v : val(a).vec()) s += v * v;
    return push(Tensor::scalar(std::sqrt(s)), [a](Tape& t) {
      Var out{t.cursor_};
      double y = t.val(out).value();
      double g = t.adj(out).value();
      if (y == 0.0) return;
      const Tensor& A = t.val(a);
      Tensor& dA = t.mut_adj(a);
      for (std::size_t i = 0; i < A.size(); ++i) dA[i] += g * A[i] / y;
    });
  }

  Var dot(Var a, Var b) {
    const Tensor& A = val(a);
    const Tensor& B = val(b);
    check_shapes_match(A, B, "dot");
    double s = 0;
    for (std::size_t i = 0; i < A.size(); ++i) s += A[i] * B[i];
    return push(Tensor::scalar(s), [a, b](Tape& t) {
      Var out{t.cursor_};
      double g = t.adj(out).value();
      const Tensor& A = t.val(a);
      const Tensor& B = t.val(b);
      Tensor& dA = t.mut_adj(a);
      Tensor& dB = t.mut_adj(b);
      for (std::size_t i = 0; i < A.size(); ++i) {
        dA[i] += g * B[i];
        dB[i] += g * A[i];
      }
    });
  }

  Var sum(Var a) {
    double s = 0;
    for (double v : val(a).vec()) s += v;
    return push(Tensor::scalar(s), [a](Tape& t) {
      Var out{t.cursor_};
      double g = t.adj(out).value();
      Tensor& dA = t.mut_adj(a);
      for (std::size_t i = 0; i < dA.size(); ++i) dA[i] += g;
    });
  }

  Var row(Var mv, std::size_t i) {
    const Tensor& M = val(mv);
    require(M.rank() == 2 && i < M.rows(), "row: index out of range");
    Tensor y({M.cols()});
    for (std::size_t j = 0; j < M.cols(); ++j) y[j] = M.at2(i, j);
    return push(std::move(y), [mv, i](Tape& t) {
      Var out{t.cursor_};
      const Tensor& G = t.adj(out);
      Tensor& dM = t.mut_adj(mv);
      for (std::size_t j = 0; j < G.size(); ++j) dM.at2(i, j) += G[j];
    });
  }

  // [v; M] — vector becomes row 0.
  Var prepend_row(Var vv, Var mv) {
    const Tensor& v = val(vv);
    const Tensor& M = val(mv);
    require(v.rank() == 1 && M.rank() == 2 && v.size() == M.cols(),
            "prepend_row: incompatible shapes");
    Tensor Y({M.rows() + 1, M.cols()});
    for (std::size_t j = 0; j < v.size(); ++j) Y.at2(0, j) = v[j];
    for (std::size_t i = 0; i < M.rows(); ++i)
      for (std::size_t j = 0; j < M.cols(); ++j) Y.at2(i + 1, j) = M.at2(i, j);
    return push(std::move(Y), [vv, mv](Tape& t) {
      Var out{t.cursor_};
      const Tensor& G = t.adj(out);
      Tensor& dv = t.mut_adj(vv);
      Tensor& dM = t.mut_adj(mv);
      for (std::size_t j = 0; j < G.cols(); ++j) dv[j] += G.at2(0, j);
      for (std::size_t i = 1; i < G.rows(); ++i)
        for (std::size_t j = 0; j < G.cols(); ++j)
          dM.at2(i - 1, j) += G.at2(i, j);
    });
  }

  Var stack_rows(const std::vector<Var>& rows_in) {
    require(!rows_in.empty(), "stack_rows: empty input");
    std::size_t d = val(rows_in[0]).size();
    Tensor Y({rows_in.size(), d});
    for (std::size_t i = 0; i < rows_in.size(); ++i) {
      const Tensor& r = val(rows_in[i]);
      require(r.rank() == 1 && r.size() == d, "stack_rows: ragged rows");
      for (std::size_t j = 0; j < d; ++j) Y.at2(i, j) = r[j];
    }
    return push(std::move(Y), [rows_in, d](Tape& t) {
      Var out{t.cursor_};
      const Tensor& G = t.adj(out);
      for (std::size_t i = 0; i < rows_in.size(); ++i) {
        Tensor& dr = t.mut_adj(rows_in[i]);
        for (std::size_t j = 0; j < d; ++j) dr[j] += G.at2(i, j);
      }
    });
  }

  Var stack_scalars(const std::vector<Var>& xs) {
    require(!xs.empty(), "stack_scalars: empty input");
    Tensor y({xs.size()});
    for (std::size_t i = 0; i < xs.size(); ++i) y[i] = val(xs[i]).value();
    return push(std::move(y), [xs](Tape& t) {
      Var out{t.cursor_};
      const Tensor& G = t.adj(out);
      for (std::size_t i = 0; i < xs.size(); ++i)
        t.mut_adj(xs[i])[0] += G[i];
    });
  }

  // Weighted binary cross-entropy from the logit, log-sum-exp form.
  // label in {0,1}; pos_weight scales the positive-class term.
  Var bce_with_logit(Var logit, double label, double pos_weight) {
    double z = val(logit).value();
    double w = label > 0.5 ? pos_weight : 1.0;
    // -[y log s + (1-y) log(1-s)] = softplus(z) - y z, stably:
    double loss = softplus(z) - label * z;
    return push(Tensor::scalar(w * loss), [logit, label, w](Tape& t) {
      Var out{t.cursor_};
      double g = t.adj(out).value();
      double z = t.val(logit).value();
      t.mut_adj(logit)[0] += g * w * (stable_sigmoid(z) - label);
    });
  }

  static double stable_sigmoid(double z) {
    if (z >= 0) return 1.0 / (1.0 + std::exp(-z));
    double e = std::exp(z);
    return e / (1.0 + e);
  }

  static double softplus(double z) {
    if (z > 30) return z;
    if (z < -30) return std::exp(z);
    return std::log1p(std::exp(z));
  }

 private:
  struct Node {
    Tensor value;
    Tensor adjoint;
    std::function<void(Tape&)> back;
  };

  static void require(bool cond, const char* msg) {
    if (!cond) throw std::invalid_argument(msg);
  }

  Var push(Tensor v, std::function<void(Tape&)> back) {
    nodes_.push_back({std::move(v), {}, std::move(back)});
    return Var{nodes_.size() - 1};
  }

  const Tensor& adj(Var v) const { return nodes_[v.id].adjoint; }
  Tensor& mut_adj(Var v) { return nodes_[v.id].adjoint; }

  // The replay loop sets cursor_ to the node whose closure is running, so
  // each closure can recover its own output adjoint.
  std::size_t cursor_ = 0;

  std::deque<Node> nodes_;  // deque: references from val()/grad() stay valid
};

}  // namespace celleco
