#include <doctest.h>

#include <algorithm>
#include <cmath>

#include "celleco/grad_check.hpp"
#include "celleco/mil.hpp"
#include "celleco/rng.hpp"
#include "celleco/synth.hpp"

using namespace celleco;

namespace {

Tensor random_mat(Rng& rng, std::size_t r, std::size_t c, double s = 1.0) {
  Tensor t({r, c});
  for (double& v : t.vec()) v = s * rng.normal();
  return t;
}

Tensor random_vec(Rng& rng, std::size_t n, double s = 1.0) {
  Tensor t({n});
  for (double& v : t.vec()) v = s * rng.normal();
  return t;
}

MilParams random_mil(Rng& rng, std::size_t L, std::size_t d, int r) {
  MilParams m;
  m.Vg = random_mat(rng, L, d, 0.5);
  m.Ug = random_mat(rng, L, d, 0.5);
  m.W_att = random_mat(rng, L, static_cast<std::size_t>(r), 0.5);
  m.w_clf = random_vec(rng, d, 0.5);
  m.b_clf = Tensor::scalar(0.1);
  return m;
}

MilVars register_mil(Tape& t, const MilParams& m) {
  return {t.leaf(m.Vg), t.leaf(m.Ug), t.leaf(m.W_att), t.leaf(m.w_clf),
          t.leaf(m.b_clf)};
}

}  // namespace

TEST_CASE("gated unit: zero input, saturation, elementwise oracle") {
  Rng rng(1);
  Tape t;
  Var Vg = t.leaf(random_mat(rng, 3, 4));
  Var Ug = t.leaf(random_mat(rng, 3, 4));
  const Tensor& z = t.val(gated_unit(t, t.leaf(Tensor({4})), Vg, Ug));
  for (double v : z.vec()) CHECK(v == 0.0);

  Tensor huge({3, 4});
  for (double& v : huge.vec()) v = 50.0;
  Var big = t.leaf(huge);
  Tensor ones({4}, {1, 1, 1, 1});
  const Tensor& sat = t.val(gated_unit(t, t.leaf(ones), big, big));
  for (double v : sat.vec()) CHECK(v == doctest::Approx(1.0).epsilon(1e-9));

  // elementwise recomputation on a random instance
  Tensor V = random_mat(rng, 3, 4), U = random_mat(rng, 3, 4);
  Tensor h = random_vec(rng, 4);
  Tape t2;
  const Tensor& g = t2.val(gated_unit(t2, t2.leaf(h), t2.leaf(V), t2.leaf(U)));
  for (std::size_t i = 0; i < 3; ++i) {
    double a = 0, b = 0;
    for (std::size_t j = 0; j < 4; ++j) {
      a += V.at2(i, j) * h[j];
      b += U.at2(i, j) * h[j];
    }
    CHECK(g[i] == doctest::Approx(std::tanh(a) / (1.0 + std::exp(-b))));
    CHECK(std::abs(g[i]) < 1.0);
  }
}

TEST_CASE("attention_logit: zero instance gives zero for every r") {
  Rng rng(2);
  for (int r = 1; r <= 3; ++r) {
    MilParams m = random_mil(rng, 5, 4, r);
    Tape t;
    MilVars v = register_mil(t, m);
    Var logit = attention_logit(t, t.leaf(Tensor({4})), v, r);
    CHECK(t.val(logit).value() == 0.0);
  }
}

TEST_CASE("attention_logit r=2 with zero second column is |1D score|") {
  Rng rng(3);
  MilParams m = random_mil(rng, 5, 4, 2);
  for (std::size_t i = 0; i < 5; ++i) m.W_att.at2(i, 1) = 0.0;
  Tensor h = random_vec(rng, 4);

  Tape t;
  MilVars v = register_mil(t, m);
  double norm_logit = t.val(attention_logit(t, t.leaf(h), v, 2)).value();

  // 1D score with the first column as w
  MilParams m1 = m;
  m1.W_att = Tensor({5, 1});
  for (std::size_t i = 0; i < 5; ++i) m1.W_att.at2(i, 0) = m.W_att.at2(i, 0);
  Tape t2;
  MilVars v1 = register_mil(t2, m1);
  double lin_logit = t2.val(attention_logit(t2, t2.leaf(h), v1, 1)).value();

  CHECK(norm_logit == doctest::Approx(std::abs(lin_logit)).epsilon(1e-12));
}

TEST_CASE("attention_logit r=3 equals sqrt of summed squared column scores") {
  Rng rng(4);
  MilParams m = random_mil(rng, 6, 5, 3);
  Tensor h = random_vec(rng, 5);
  Tape t;
  MilVars v = register_mil(t, m);
  double logit = t.val(attention_logit(t, t.leaf(h), v, 3)).value();

  const Tensor& g = t.val(gated_unit(t, t.leaf(h), v.Vg, v.Ug));
  double ss = 0;
  for (int col = 0; col < 3; ++col) {
    double s = 0;
    for (std::size_t i = 0; i < 6; ++i) s += m.W_att.at2(i, col) * g[i];
    ss += s * s;
  }
  CHECK(logit == doctest::Approx(std::sqrt(ss)).epsilon(1e-12));
}

TEST_CASE("attention_logit rejects invalid r") {
  Rng rng(5);
  MilParams m = random_mil(rng, 3, 3, 1);
  Tape t;
  MilVars v = register_mil(t, m);
  CHECK_THROWS_AS(attention_logit(t, t.leaf(Tensor({3})), v, 4),
                  std::invalid_argument);
}

TEST_CASE("pool: single instance, symmetric pair, weighted-sum oracle") {
  Rng rng(6);
  MilParams m = random_mil(rng, 4, 3, 2);
  Tape t;
  MilVars v = register_mil(t, m);

  Var h = t.leaf(random_vec(rng, 3));
  PoolResult single = pool(t, {h}, v, 2);
  CHECK(t.val(single.weights).vec() == std::vector<double>{1.0});
  CHECK(t.val(single.pooled).vec() == t.val(h).vec());

  PoolResult twin = pool(t, {h, h}, v, 2);
  CHECK(t.val(twin.weights)[0] == doctest::Approx(0.5).epsilon(1e-12));
  for (std::size_t i = 0; i < 3; ++i)
    CHECK(t.val(twin.pooled)[i] == doctest::Approx(t.val(h)[i]).epsilon(1e-12));

  std::vector<Var> bag;
  for (int k = 0; k < 5; ++k) bag.push_back(t.leaf(random_vec(rng, 3)));
  PoolResult pr = pool(t, bag, v, 2);
  const Tensor& w = t.val(pr.weights);
  double sum_w = 0;
  for (std::size_t k = 0; k < 5; ++k) {
    CHECK(w[k] > 0);
    sum_w += w[k];
  }
  CHECK(std::abs(sum_w - 1.0) < 1e-12);
  for (std::size_t i = 0; i < 3; ++i) {
    double expect = 0;
    for (std::size_t k = 0; k < 5; ++k) expect += w[k] * t.val(bag[k])[i];
    CHECK(std::abs(t.val(pr.pooled)[i] - expect) < 1e-12);
  }
}

TEST_CASE("classify: zero head gives 0.5, large bias saturates") {
  Rng rng(7);
  MilParams m = random_mil(rng, 3, 4, 1);
  m.w_clf = Tensor({4});
  m.b_clf = Tensor::scalar(0.0);
  Tape t;
  MilVars v = register_mil(t, m);
  Var pooled = t.leaf(random_vec(rng, 4));
  CHECK(Tape::stable_sigmoid(t.val(classify_logit(t, pooled, v)).value()) == 0.5);

  m.b_clf = Tensor::scalar(30.0);
  Tape t2;
  MilVars v2 = register_mil(t2, m);
  double prob = Tape::stable_sigmoid(
      t2.val(classify_logit(t2, t2.leaf(random_vec(rng, 4)), v2)).value());
  CHECK(prob > 1.0 - 1e-9);
}

TEST_CASE("slide_forward: zero classifier gives probability 0.5") {
  SynthConfig scfg;
  scfg.n_patients = 1;
  scfg.patches_min = scfg.patches_max = 1;
  scfg.seed = 11;
  Cohort cohort = generate_cohort(scfg);
  ModelConfig cfg;
  cfg.d_model = 8;
  cfg.L = 8;
  Rng rng(8);
  ModelParams params = init_params(cfg, rng);  // classifier zero-initialized
  Tape t;
  ModelVars vars = register_params(t, params);
  auto score = slide_forward(t, cohort.patients[0].slides[0], vars, cfg);
  REQUIRE(score.has_value());
  CHECK(score->probability == doctest::Approx(0.5).epsilon(1e-12));
}

TEST_CASE("slide_forward: bag permutation invariance") {
  SynthConfig scfg;
  scfg.n_patients = 1;
  scfg.seed = 12;
  Cohort cohort = generate_cohort(scfg);
  Slide slide = cohort.patients[0].slides[0];
  ModelConfig cfg;
  cfg.d_model = 8;
  cfg.L = 8;
  Rng rng(9);
  ModelParams params = init_params(cfg, rng);
  params.mil.w_clf = Tensor({8});
  for (double& v : params.mil.w_clf.vec()) v = rng.normal();

  Tape t1;
  auto s1 = slide_forward(t1, slide, register_params(t1, params), cfg);
  Rng perm_rng(13);
  Slide shuffled = slide;
  perm_rng.shuffle(shuffled.patches);
  for (auto& p : shuffled.patches) perm_rng.shuffle(p.cells);
  Tape t2;
  auto s2 = slide_forward(t2, shuffled, register_params(t2, params), cfg);
  REQUIRE(s1.has_value());
  REQUIRE(s2.has_value());
  CHECK(std::abs(s1->probability - s2->probability) < 1e-9);
}

TEST_CASE("slide_forward matches a monolithic straight-line oracle") {
  // tiny config: 1 patch, no patch embeddings, r=1 — recompute by hand
  ModelConfig cfg;
  cfg.d_model = 3;
  cfg.d_cell = 3;
  cfg.d_patch = 3;
  cfg.L = 2;
  cfg.r = 1;
  cfg.use_patch_embeddings = false;
  Rng rng(10);
  ModelParams params = init_params(cfg, rng);
  for (double& v : params.mil.w_clf.vec()) v = rng.normal();

  Slide slide;
  slide.slide_id = "s";
  PatchRecord patch;
  patch.patch_id = 0;
  patch.embedding.assign(3, 0.0f);
  for (int i = 0; i < 2; ++i) {
    CellRecord c;
    c.centroid_x = 0.25f * float(i + 1);
    c.centroid_y = 0.5f;
    c.embedding = {float(0.3 * i + 0.1), float(-0.4 * i), 0.7f};
    patch.cells.push_back(c);
  }
  slide.patches = {patch};

  Tape t;
  auto got = slide_forward(t, slide, register_params(t, params), cfg);
  REQUIRE(got.has_value());

  // oracle: straight-line recomputation with plain loops
  auto ln = [](std::vector<double> x, const Tensor& g, const Tensor& b) {
    double mu = 0, var = 0;
    for (double v : x) mu += v;
    mu /= double(x.size());
    for (double v : x) var += (v - mu) * (v - mu);
    var /= double(x.size());
    double inv = 1.0 / std::sqrt(var + 1e-5);
    for (std::size_t i = 0; i < x.size(); ++i)
      x[i] = g[i] * (x[i] - mu) * inv + b[i];
    return x;
  };
  std::vector<std::vector<double>> X;
  X.push_back(params.att.e_cls.vec());
  for (const auto& c : patch.cells) {
    std::vector<double> e(c.embedding.begin(), c.embedding.end());
    X.push_back(ln(e, params.att.ln_pre_g, params.att.ln_pre_b));
  }
  auto proj = [&](const Tensor& W) {
    std::vector<std::vector<double>> out;
    for (const auto& x : X) {
      std::vector<double> y(3, 0.0);
      for (int i = 0; i < 3; ++i)
        for (int j = 0; j < 3; ++j) y[i] += W.at2(i, j) * x[j];
      out.push_back(y);
    }
    return out;
  };
  auto Q = proj(params.att.W_Q), K = proj(params.att.W_K), V = proj(params.att.W_V);
  std::vector<std::vector<double>> A(3, std::vector<double>(3));
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j) {
      double s = 0;
      for (int l = 0; l < 3; ++l) s += Q[i][l] * K[j][l];
      A[i][j] = s / std::sqrt(3.0);
    }
  for (int i = 1; i < 3; ++i)
    for (int j = 1; j < 3; ++j) {
      if (i == j) continue;
      double dx = patch.cells[i - 1].centroid_x - patch.cells[j - 1].centroid_x;
      double dy = patch.cells[i - 1].centroid_y - patch.cells[j - 1].centroid_y;
      A[i][j] -= std::hypot(dx, dy);
    }
  for (int i = 0; i < 3; ++i) {
    double mx = *std::max_element(A[i].begin(), A[i].end());
    double z = 0;
    for (int j = 0; j < 3; ++j) { A[i][j] = std::exp(A[i][j] - mx); z += A[i][j]; }
    for (int j = 0; j < 3; ++j) A[i][j] /= z;
  }
  std::vector<double> z0(3, 0.0);
  for (int j = 0; j < 3; ++j)
    for (int i = 0; i < 3; ++i) z0[i] += A[0][j] * V[j][i];
  std::vector<double> z_cls = ln(z0, params.att.ln_post_g, params.att.ln_post_b);
  // single instance: pooled = z_cls; logit = w.z + b
  double logit = params.mil.b_clf.value();
  for (int i = 0; i < 3; ++i) logit += params.mil.w_clf[i] * z_cls[i];
  double prob = 1.0 / (1.0 + std::exp(-logit));
  CHECK(std::abs(got->probability - prob) < 1e-9);
}

TEST_CASE("slide_forward on an all-empty slide is inapplicable") {
  ModelConfig cfg;
  cfg.d_model = 4;
  cfg.L = 4;
  Rng rng(14);
  ModelParams params = init_params(cfg, rng);
  Slide slide;
  slide.slide_id = "empty";
  PatchRecord p;
  p.embedding.assign(16, 0.0f);
  slide.patches = {p};
  Tape t;
  CHECK(!slide_forward(t, slide, register_params(t, params), cfg).has_value());
}

TEST_CASE("end-to-end gradient through slide_forward and loss") {
  SynthConfig scfg;
  scfg.n_patients = 1;
  scfg.patches_min = 2;
  scfg.patches_max = 3;
  scfg.cells_min = 2;
  scfg.cells_max = 4;
  scfg.d_patch = 4;
  scfg.d_cell = 4;
  scfg.seed = 21;
  Cohort cohort = generate_cohort(scfg);
  const Slide& slide = cohort.patients[0].slides[0];

  ModelConfig cfg;
  cfg.d_patch = 4;
  cfg.d_cell = 4;
  cfg.d_model = 4;
  cfg.L = 3;
  cfg.r = 2;
  Rng rng(22);
  ModelParams params = init_params(cfg, rng);
  for (double& v : params.mil.w_clf.vec()) v = rng.normal();

  // check the gradient wrt the fusion and attention weights jointly
  double err = grad_check_multi(
      [&](Tape& t, const std::vector<Var>& xs) {
        ModelVars v = register_params(t, params);
        v.att.W_Q = xs[0];
        v.fus.W_fusion = xs[1];
        v.mil.Vg = xs[2];
        auto score = slide_forward(t, slide, v, cfg);
        return t.bce_with_logit(score->logit, 1, 1.3);
      },
      {params.att.W_Q, params.fus.W_fusion, params.mil.Vg}, 1e-5);
  CHECK(err < 1e-4);
}
