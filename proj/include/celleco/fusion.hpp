#pragma once

// Cross-scale fusion: project the patch embedding, take the outer product
// with the patch's CLS summary, flatten row-major, and project back to
// d_model. The ablation path bypasses fusion and uses z_cls directly.

#include <vector>

#include "celleco/attention.hpp"
#include "celleco/cohort.hpp"
#include "celleco/tape.hpp"

namespace celleco {

struct FusionParams {
  Tensor W_p;       // [d_model x d_patch]
  Tensor W_fusion;  // [d_model x d_model^2], row-major flatten convention
};

struct FusionVars {
  Var W_p, W_fusion;
};

inline Var project_patch(Tape& tape, Var e_p, const FusionVars& f) {
  return tape.matvec(f.W_p, e_p);
}

inline Var fuse(Tape& tape, Var e_tilde, Var z_cls, const FusionVars& f) {
  Var F = tape.outer(e_tilde, z_cls);
  return tape.matvec(f.W_fusion, tape.flatten(F));
}

// Instance vector for one patch: fused representation, or z_cls alone when
// patch embeddings are ablated away.
inline Var make_instance(Tape& tape, const PatchRecord& patch,
                         const PatchSummary& summary, const FusionVars& f,
                         bool use_patch_embeddings) {
  if (!use_patch_embeddings) return summary.z_cls;
  Tensor e({patch.embedding.size()});
  for (std::size_t i = 0; i < patch.embedding.size(); ++i)
    e[i] = patch.embedding[i];
  Var e_p = tape.leaf(std::move(e));
  return fuse(tape, project_patch(tape, e_p, f), summary.z_cls, f);
}

}  // namespace celleco
