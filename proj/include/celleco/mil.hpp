#pragma once

// Gated-attention MIL pooling with 1D/2D/3D attention projection and the
// slide-level classifier head. For r = 1 the attention logit is w^T g; for
// r in {2,3} it is the Frobenius norm of W_att^T g (non-negative by
// construction; the max-subtracted softmax keeps it stable).

#include <optional>
#include <stdexcept>
#include <vector>

#include "celleco/attention.hpp"
#include "celleco/fusion.hpp"
#include "celleco/tape.hpp"

namespace celleco {

struct MilParams {
  Tensor Vg, Ug;   // [L x d_model]
  Tensor W_att;    // [L x r], r in {1,2,3}
  Tensor w_clf;    // [d_model]
  Tensor b_clf;    // scalar
};

struct MilVars {
  Var Vg, Ug, W_att, w_clf, b_clf;
};

// tanh(Vg h) (*) sigmoid(Ug h); every entry in (-1, 1).
inline Var gated_unit(Tape& tape, Var h, Var Vg, Var Ug) {
  return tape.mul(tape.tanh_op(tape.matvec(Vg, h)),
                  tape.sigmoid_op(tape.matvec(Ug, h)));
}

inline Var attention_logit(Tape& tape, Var h, const MilVars& m, int r) {
  if (r < 1 || r > 3)
    throw std::invalid_argument("attention_logit: r must be 1, 2, or 3");
  Var g = gated_unit(tape, h, m.Vg, m.Ug);
  Var proj = tape.matvec_t(m.W_att, g);  // [r]
  if (r == 1) return tape.sum(proj);     // plain w^T g, sign kept
  return tape.norm2(proj);
}

struct PoolResult {
  Var pooled;                   // [d_model]
  Var weights;                  // [K], softmax over logits
};

inline PoolResult pool(Tape& tape, const std::vector<Var>& instances,
                       const MilVars& m, int r) {
  if (instances.empty()) throw std::invalid_argument("pool: empty bag");
  std::vector<Var> logits;
  logits.reserve(instances.size());
  for (Var h : instances) logits.push_back(attention_logit(tape, h, m, r));
  Var alpha = tape.softmax_rows(tape.stack_scalars(logits));
  Var H = tape.stack_rows(instances);       // [K x d_model]
  Var pooled = tape.matvec_t(H, alpha);     // sum_k alpha_k h_k
  return {pooled, alpha};
}

inline Var classify_logit(Tape& tape, Var pooled, const MilVars& m) {
  return tape.add(tape.dot(m.w_clf, pooled), m.b_clf);
}

// ---- whole-model forward ----------------------------------------------

struct ModelConfig {
  std::uint32_t d_patch = 16, d_cell = 16;
  std::uint32_t d_model = 16;
  std::uint32_t L = 64;
  int r = 2;
  bool use_patch_embeddings = true;
  double spatial_scale = 1.0;
  bool allow_large_model = false;

  void validate() const {
    if (r < 1 || r > 3) throw std::invalid_argument("config: r must be 1, 2, or 3");
    if (d_model == 0 || L == 0) throw std::invalid_argument("config: zero dimension");
    // W_fusion holds d_model^3 doubles; past 64 that is gigabytes at the
    // paper's 768 and needs an explicit opt-in.
    if (d_model > 64 && !allow_large_model)
      throw std::invalid_argument(
          "config: d_model " + std::to_string(d_model) +
          " requires allow_large_model (W_fusion is d_model^3 parameters)");
  }
};

struct ModelParams {
  CellAttentionParams att;
  FusionParams fus;
  MilParams mil;

  std::vector<Tensor*> tensors() {
    return {&att.e_cls,     &att.W_Q,      &att.W_K,      &att.W_V,
            &att.ln_pre_g,  &att.ln_pre_b, &att.ln_post_g, &att.ln_post_b,
            &fus.W_p,       &fus.W_fusion, &mil.Vg,       &mil.Ug,
            &mil.W_att,     &mil.w_clf,    &mil.b_clf};
  }
};

struct ModelVars {
  CellAttentionVars att;
  FusionVars fus;
  MilVars mil;
};

inline ModelVars register_params(Tape& tape, const ModelParams& p) {
  ModelVars v;
  v.att.e_cls = tape.leaf(p.att.e_cls);
  v.att.W_Q = tape.leaf(p.att.W_Q);
  v.att.W_K = tape.leaf(p.att.W_K);
  v.att.W_V = tape.leaf(p.att.W_V);
  v.att.ln_pre_g = tape.leaf(p.att.ln_pre_g);
  v.att.ln_pre_b = tape.leaf(p.att.ln_pre_b);
  v.att.ln_post_g = tape.leaf(p.att.ln_post_g);
  v.att.ln_post_b = tape.leaf(p.att.ln_post_b);
  v.att.spatial_scale = p.att.spatial_scale;
  v.fus.W_p = tape.leaf(p.fus.W_p);
  v.fus.W_fusion = tape.leaf(p.fus.W_fusion);
  v.mil.Vg = tape.leaf(p.mil.Vg);
  v.mil.Ug = tape.leaf(p.mil.Ug);
  v.mil.W_att = tape.leaf(p.mil.W_att);
  v.mil.w_clf = tape.leaf(p.mil.w_clf);
  v.mil.b_clf = tape.leaf(p.mil.b_clf);
  return v;
}

inline std::vector<Var> param_vars(const ModelVars& v) {
  return {v.att.e_cls,     v.att.W_Q,      v.att.W_K,      v.att.W_V,
          v.att.ln_pre_g,  v.att.ln_pre_b, v.att.ln_post_g, v.att.ln_post_b,
          v.fus.W_p,       v.fus.W_fusion, v.mil.Vg,       v.mil.Ug,
          v.mil.W_att,     v.mil.w_clf,    v.mil.b_clf};
}

struct SlideScore {
  Var logit;
  double probability = 0;
  std::vector<double> attention_weights;              // per instance, sums to 1
  std::vector<std::uint32_t> patch_ids;               // instance order
  std::vector<std::vector<double>> cls_attention;     // per patch CLS row
};

// Full forward for one slide: attend_patch per non-empty patch, fuse,
// pool, classify. Returns nullopt for slides with no non-empty patch
// (inapplicable; consumed by the ensemble).
inline std::optional<SlideScore> slide_forward(Tape& tape, const Slide& slide,
                                               const ModelVars& vars,
                                               const ModelConfig& cfg) {
  std::vector<Var> instances;
  SlideScore out;
  for (const auto& patch : slide.patches) {
    if (patch.cells.empty()) continue;
    PatchSummary summary = attend_patch(tape, patch.cells, vars.att);
    instances.push_back(
        make_instance(tape, patch, summary, vars.fus, cfg.use_patch_embeddings));
    out.patch_ids.push_back(patch.patch_id);
    out.cls_attention.push_back(std::move(summary.attention_row));
  }
  if (instances.empty()) return std::nullopt;
  PoolResult pr = pool(tape, instances, vars.mil, cfg.r);
  out.logit = classify_logit(tape, pr.pooled, vars.mil);
  out.probability = Tape::stable_sigmoid(tape.val(out.logit).value());
  out.attention_weights = tape.val(pr.weights).vec();
  return out;
}

// Parameter initialization: uniform +-sqrt(6/(fan_in+fan_out)) for matrices,
// N(0, 0.02) for the CLS token, ones/zeros for layer norms, zeros for the
// classifier head.
inline ModelParams init_params(const ModelConfig& cfg, Rng& rng) {
  cfg.validate();
  auto glorot = [&](std::size_t rows, std::size_t cols) {
    Tensor t({rows, cols});
    double lim = std::sqrt(6.0 / double(rows + cols));
    for (double& v : t.vec()) v = rng.uniform(-lim, lim);
    return t;
  };
  ModelParams p;
  p.att.e_cls = Tensor({cfg.d_cell});
  for (double& v : p.att.e_cls.vec()) v = rng.normal(0.0, 0.02);
  p.att.W_Q = glorot(cfg.d_model, cfg.d_cell);
  p.att.W_K = glorot(cfg.d_model, cfg.d_cell);
  p.att.W_V = glorot(cfg.d_model, cfg.d_cell);
  p.att.ln_pre_g = Tensor({cfg.d_cell});
  for (double& v : p.att.ln_pre_g.vec()) v = 1.0;
  p.att.ln_pre_b = Tensor({cfg.d_cell});
  p.att.ln_post_g = Tensor({cfg.d_model});
  for (double& v : p.att.ln_post_g.vec()) v = 1.0;
  p.att.ln_post_b = Tensor({cfg.d_model});
  p.att.spatial_scale = cfg.spatial_scale;
  p.fus.W_p = glorot(cfg.d_model, cfg.d_patch);
  p.fus.W_fusion = glorot(cfg.d_model, std::size_t(cfg.d_model) * cfg.d_model);
  p.mil.Vg = glorot(cfg.L, cfg.d_model);
  p.mil.Ug = glorot(cfg.L, cfg.d_model);
  p.mil.W_att = glorot(cfg.L, static_cast<std::size_t>(cfg.r));
  p.mil.w_clf = Tensor({cfg.d_model});
  p.mil.b_clf = Tensor::scalar(0.0);
  return p;
}

}  // namespace celleco
