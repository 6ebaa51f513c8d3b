#pragma once

// Spatially biased cell self-attention. One CLS token is prepended to the
// patch's cell sequence; attention logits are reduced by the Euclidean
// distance between cell centroids; the CLS row of the output summarizes the
// patch.

#include <cmath>
#include <optional>
#include <vector>

#include "celleco/cohort.hpp"
#include "celleco/tape.hpp"
#include "celleco/tensor.hpp"

namespace celleco {

struct CellAttentionParams {
  Tensor e_cls;                  // [d_cell]
  Tensor W_Q, W_K, W_V;          // [d_model x d_cell]
  Tensor ln_pre_g, ln_pre_b;     // [d_cell]
  Tensor ln_post_g, ln_post_b;   // [d_model]
  double spatial_scale = 1.0;
};

struct CellAttentionVars {
  Var e_cls, W_Q, W_K, W_V, ln_pre_g, ln_pre_b, ln_post_g, ln_post_b;
  double spatial_scale = 1.0;
};

inline constexpr double kLayerNormEps = 1e-5;

// Bias matrix over the sequence {CLS} + cells: entry (i,j) for a cell pair is
// -spatial_scale * dist(centroid_i, centroid_j); anything involving the CLS
// position (index 0) is 0. Symmetric, zero diagonal.
inline Tensor spatial_bias(const std::vector<std::pair<double, double>>& centroids,
                           double spatial_scale) {
  std::size_t n = centroids.size();
  Tensor B({n + 1, n + 1});
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i + 1; j < n; ++j) {
      double dx = centroids[i].first - centroids[j].first;
      double dy = centroids[i].second - centroids[j].second;
      double b = -spatial_scale * std::sqrt(dx * dx + dy * dy);
      B.at2(i + 1, j + 1) = b;
      B.at2(j + 1, i + 1) = b;
    }
  return B;
}

struct PatchSummary {
  Var z_cls;                          // [d_model]
  std::vector<double> attention_row;  // CLS-query weights over {CLS} + cells
};

// Forward pass for one patch. The cell embeddings enter the tape as a leaf so
// the whole composition is differentiable end to end.
inline PatchSummary attend_patch(Tape& tape,
                                 const std::vector<CellRecord>& cells,
                                 const CellAttentionVars& p) {
  if (cells.empty())
    throw std::invalid_argument("attend_patch: empty cell list");
  std::size_t n = cells.size();
  std::size_t d_cell = tape.val(p.e_cls).size();
  std::size_t d_model = tape.val(p.W_Q).rows();

  Tensor C({n, d_cell});
  std::vector<std::pair<double, double>> centroids(n);
  for (std::size_t i = 0; i < n; ++i) {
    if (cells[i].embedding.size() != d_cell)
      throw std::invalid_argument("attend_patch: cell embedding length mismatch");
    for (std::size_t j = 0; j < d_cell; ++j)
      C.at2(i, j) = cells[i].embedding[j];
    centroids[i] = {cells[i].centroid_x, cells[i].centroid_y};
  }

  Var cells_var = tape.leaf(std::move(C));
  Var cells_norm = tape.layer_norm(cells_var, p.ln_pre_g, p.ln_pre_b, kLayerNormEps);
  Var X = tape.prepend_row(p.e_cls, cells_norm);  // [(n+1) x d_cell]

  Var Q = tape.matmul_bt(X, p.W_Q);  // [(n+1) x d_model]
  Var K = tape.matmul_bt(X, p.W_K);
  Var V = tape.matmul_bt(X, p.W_V);

  Var A_raw = tape.scale(tape.matmul_bt(Q, K), 1.0 / std::sqrt(double(d_model)));
  Var A_sp = tape.add_const(A_raw, spatial_bias(centroids, p.spatial_scale));
  Var A = tape.softmax_rows(A_sp);
  Var Z = tape.matmul(A, V);

  Var z0 = tape.row(Z, 0);
  Var z_cls = tape.layer_norm(z0, p.ln_post_g, p.ln_post_b, kLayerNormEps);

  PatchSummary out;
  out.z_cls = z_cls;
  const Tensor& Aval = tape.val(A);
  out.attention_row.resize(n + 1);
  for (std::size_t j = 0; j <= n; ++j) out.attention_row[j] = Aval.at2(0, j);
  return out;
}

}  // namespace celleco
