// Acceptance gate: one check per release criterion, each printing a single
// pass/fail line. Tolerances are pinned here and must not be loosened.

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>

#include "celleco/ensemble.hpp"
#include "celleco/grad_check.hpp"
#include "celleco/stats.hpp"
#include "celleco/synth.hpp"
#include "celleco/trainer.hpp"

using namespace celleco;
namespace fs = std::filesystem;

namespace {

void report(int n, const char* what, bool pass) {
  std::printf("criterion %d %-24s %s\n", n, what, pass ? "PASS" : "FAIL");
  std::fflush(stdout);
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0)
      .count();
}

Cohort small_cohort(std::uint64_t seed, std::size_t patches_max,
                    std::size_t cells_max) {
  SynthConfig cfg;
  cfg.n_patients = 1;
  cfg.patches_min = 2;
  cfg.patches_max = patches_max;
  cfg.cells_min = 2;
  cfg.cells_max = cells_max;
  cfg.d_patch = 8;
  cfg.d_cell = 8;
  cfg.seed = seed;
  return generate_cohort(cfg);
}

std::string slurp(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(is), {}};
}

}  // namespace

TEST_CASE("1: end-to-end gradient fidelity") {
  auto t0 = std::chrono::steady_clock::now();
  Cohort cohort = small_cohort(301, 4, 6);
  const Slide& slide = cohort.patients[0].slides[0];

  ModelConfig cfg;
  cfg.d_patch = 8;
  cfg.d_cell = 8;
  cfg.d_model = 8;
  cfg.L = 8;
  cfg.r = 2;
  Rng rng(302);
  ModelParams params = init_params(cfg, rng);
  for (double& v : params.mil.w_clf.vec()) v = rng.normal();

  std::vector<Tensor> leaves;
  for (Tensor* t : params.tensors()) leaves.push_back(*t);
  double err = grad_check_multi(
      [&](Tape& t, const std::vector<Var>& xs) {
        ModelVars v;
        v.att = {xs[0], xs[1], xs[2], xs[3], xs[4], xs[5], xs[6], xs[7],
                 params.att.spatial_scale};
        v.fus = {xs[8], xs[9]};
        v.mil = {xs[10], xs[11], xs[12], xs[13], xs[14]};
        auto score = slide_forward(t, slide, v, cfg);
        return t.bce_with_logit(score->logit, 1, 1.3);
      },
      leaves, 1e-5);

  double elapsed = seconds_since(t0);
  bool pass = err < 1e-4 && elapsed < 60.0;
  report(1, "gradient fidelity", pass);
  CHECK(err < 1e-4);
  CHECK(elapsed < 60.0);
}

TEST_CASE("2: permutation invariance") {
  SynthConfig scfg;
  scfg.n_patients = 1;
  scfg.seed = 311;
  Cohort cohort = generate_cohort(scfg);
  Slide slide = cohort.patients[0].slides[0];

  ModelConfig cfg;
  Rng rng(312);
  ModelParams params = init_params(cfg, rng);
  for (double& v : params.mil.w_clf.vec()) v = rng.normal();

  double baseline;
  {
    Tape t;
    baseline = slide_forward(t, slide, register_params(t, params), cfg)
                   ->probability;
  }
  double max_drift = 0;
  Rng perm(313);
  for (int trial = 0; trial < 100; ++trial) {
    Slide shuffled = slide;
    perm.shuffle(shuffled.patches);
    for (auto& p : shuffled.patches) perm.shuffle(p.cells);
    Tape t;
    double prob = slide_forward(t, shuffled, register_params(t, params), cfg)
                      ->probability;
    max_drift = std::max(max_drift, std::abs(prob - baseline));
  }
  report(2, "permutation invariance", max_drift <= 1e-9);
  CHECK(max_drift <= 1e-9);
}

namespace {

TrainConfig learning_config() {
  TrainConfig cfg;
  cfg.learning_rate = 2e-3;
  cfg.epochs = 40;
  cfg.patience = 15;
  cfg.k_folds = 5;
  cfg.positive_class_weight = 1.6;
  cfg.model.d_model = 16;
  cfg.model.L = 32;
  return cfg;
}

}  // namespace

TEST_CASE("3: learning demonstration") {
  auto t0 = std::chrono::steady_clock::now();
  SynthConfig scfg;
  scfg.n_patients = 60;
  scfg.signal_kind = SignalKind::cell_shift;
  scfg.signal_strength = 3.0;
  scfg.seed = 11;
  TrainConfig cfg = learning_config();
  cfg.seed = 11;

  CvReport learned = run_cv(generate_cohort(scfg), cfg);
  scfg.signal_strength = 0.0;
  CvReport null_run = run_cv(generate_cohort(scfg), cfg);
  double elapsed = seconds_since(t0);

  bool pass = learned.mean_auc >= 0.85 && null_run.mean_auc >= 0.35 &&
              null_run.mean_auc <= 0.65 && elapsed < 600.0;
  std::printf("    signal AUC %.4f, null AUC %.4f, %.1f s\n", learned.mean_auc,
              null_run.mean_auc, elapsed);
  report(3, "learning demonstration", pass);
  CHECK(learned.mean_auc >= 0.85);
  CHECK(null_run.mean_auc >= 0.35);
  CHECK(null_run.mean_auc <= 0.65);
  CHECK(elapsed < 600.0);
}

TEST_CASE("4: ablation ordering") {
  SynthConfig scfg;
  scfg.n_patients = 60;
  scfg.signal_kind = SignalKind::patch_cell_interaction;
  scfg.seed = 21;
  Cohort cohort = generate_cohort(scfg);
  TrainConfig base = learning_config();
  base.seed = 21;
  auto folds = make_folds(cohort, base.k_folds, base.seed);

  auto run = [&](int r, bool patch, std::uint64_t tag) {
    TrainConfig cfg = base;
    cfg.model.r = r;
    cfg.model.use_patch_embeddings = patch;
    return run_cv(cohort, cfg, nullptr, tag, &folds).mean_auc;
  };
  double auc_1d = run(1, true, 1);
  double auc_2d = run(2, true, 2);
  double auc_2d_np = run(2, false, 5);

  std::printf("    1D %.4f, 2D %.4f, 2D-no-patch %.4f\n", auc_1d, auc_2d,
              auc_2d_np);
  bool pass = auc_2d >= auc_2d_np + 0.05 && auc_2d >= auc_1d - 0.02;
  report(4, "ablation ordering", pass);
  CHECK(auc_2d >= auc_2d_np + 0.05);
  CHECK(auc_2d >= auc_1d - 0.02);
}

TEST_CASE("5: ensemble aggregation") {
  bool pass = true;
  for (std::uint64_t seed : {31ull, 32ull, 33ull}) {
    SynthConfig scfg;
    scfg.n_patients = 60;
    scfg.signal_kind = SignalKind::multi_celltype;
    scfg.seed = seed;
    TrainConfig cfg = learning_config();
    cfg.seed = seed;
    EnsembleReport rep = run_ensemble(generate_cohort(scfg), cfg, 6);

    auto pooled_auc = [&](const std::string& key) -> std::optional<double> {
      std::vector<double> scores;
      std::vector<int> labels;
      for (const auto& p : rep.predictions) {
        double s;
        if (key == "combined") s = p.combined;
        else {
          auto it = p.per_model.find(key);
          if (it == p.per_model.end()) continue;
          s = it->second;
        }
        scores.push_back(s);
        labels.push_back(p.label);
      }
      if (scores.empty()) return std::nullopt;
      return roc_auc(scores, labels);
    };
    double best_single = 0;
    for (const auto& key : ensemble_model_keys()) {
      auto a = pooled_auc(key);
      if (a) best_single = std::max(best_single, *a);
    }
    double combined = *pooled_auc("combined");
    std::printf("    seed %llu combined %.4f, best single %.4f\n",
                static_cast<unsigned long long>(seed), combined, best_single);
    if (!(combined >= best_single - 0.02)) pass = false;
  }
  report(5, "ensemble aggregation", pass);
  CHECK(pass);
}

TEST_CASE("6: statistics oracles") {
  bool pass = true;

  // C-index vs brute force, exact, 100 instances
  Rng rng(321);
  for (int trial = 0; trial < 100 && pass; ++trial) {
    std::size_t n = 3 + rng.below(28);
    std::vector<SurvivalRecord> rs(n);
    std::vector<double> scores(n);
    for (std::size_t i = 0; i < n; ++i) {
      rs[i].time = double(1 + rng.below(12));
      rs[i].event = rng.bernoulli(0.7) ? 1 : 0;
      scores[i] = double(rng.below(8)) / 8.0;
    }
    double conc = 0, comp = 0;
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < n; ++j) {
        if (!(rs[i].event && rs[i].time < rs[j].time)) continue;
        comp += 1;
        conc += scores[i] > scores[j] ? 1.0 : (scores[i] == scores[j] ? 0.5 : 0.0);
      }
    if (comp == 0) continue;
    if (concordance_index(scores, rs) != conc / comp) pass = false;
  }

  // KM hand table
  {
    KmCurve c = km_estimate({{1, 1, 0}, {2, 1, 0}, {3, 1, 0}});
    if (std::abs(c.survival[0] - 2.0 / 3) > 1e-15 ||
        std::abs(c.survival[1] - 1.0 / 3) > 1e-15 || c.survival[2] != 0.0)
      pass = false;
  }

  // log-rank on duplicated groups
  {
    std::vector<SurvivalRecord> g = {{3, 1, 0}, {7, 0, 0}, {11, 1, 0}, {20, 1, 0}};
    if (logrank(g, g).p_value <= 0.99) pass = false;
  }

  // Cox: planted log-HR 1.0 on n=400
  {
    Rng crng(329);
    std::vector<SurvivalRecord> rs;
    for (int i = 0; i < 400; ++i) {
      int g = i % 2;
      double t = crng.exponential((g ? std::exp(1.0) : 1.0) / 20.0);
      double c = crng.uniform(10.0, 80.0);
      rs.push_back({std::min(t, c), t <= c ? 1 : 0, double(g)});
    }
    CoxFit fit = cox_univariable(rs);
    if (!fit.converged || std::abs(fit.beta - 1.0) > 0.15) pass = false;
  }

  // Cox vs grid search on 6 records
  {
    std::vector<SurvivalRecord> rs = {{1, 1, 1}, {2, 1, 0}, {3, 1, 1},
                                      {4, 1, 0}, {5, 0, 0}, {6, 1, 1}};
    auto loglik = [&](double beta) {
      double ll = 0;
      for (const auto& ri : rs) {
        if (!ri.event) continue;
        double denom = 0;
        for (const auto& rj : rs)
          if (rj.time >= ri.time) denom += std::exp(beta * rj.covariate);
        ll += beta * ri.covariate - std::log(denom);
      }
      return ll;
    };
    double best_beta = 0, best_ll = -1e300;
    for (double b = -5.0; b <= 5.0; b += 1e-4) {
      double ll = loglik(b);
      if (ll > best_ll) { best_ll = ll; best_beta = b; }
    }
    CoxFit fit = cox_univariable(rs);
    if (!fit.converged || std::abs(fit.beta - best_beta) > 1e-3) pass = false;
  }

  // AUC vs pair counting, exact
  Rng arng(323);
  for (int trial = 0; trial < 50 && pass; ++trial) {
    std::size_t n = 4 + arng.below(20);
    std::vector<double> scores(n);
    std::vector<int> labels(n);
    bool pos = false, neg = false;
    for (std::size_t i = 0; i < n; ++i) {
      scores[i] = double(arng.below(5)) / 5.0;
      labels[i] = arng.bernoulli(0.5) ? 1 : 0;
      (labels[i] ? pos : neg) = true;
    }
    if (!pos || !neg) continue;
    double num = 0, den = 0;
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < n; ++j) {
        if (!(labels[i] == 1 && labels[j] == 0)) continue;
        den += 1;
        num += scores[i] > scores[j] ? 1.0 : (scores[i] == scores[j] ? 0.5 : 0.0);
      }
    if (roc_auc(scores, labels) != num / den) pass = false;
  }

  report(6, "statistics oracles", pass);
  CHECK(pass);
}

TEST_CASE("7: clinical score and early stopping") {
  bool pass = true;
  for (int i = 0; i <= 100 && pass; ++i)
    for (int j = 0; j <= 100; ++j) {
      double sens = i / 100.0, spec = j / 100.0;
      if (std::abs(clinical_score(sens, spec) -
                   2.0 * std::min(sens, spec)) > 1e-12) {
        pass = false;
        break;
      }
    }

  // flat score trace (lr ~ 0): earliest maximal epoch must win
  SynthConfig scfg;
  scfg.n_patients = 10;
  scfg.positive_fraction = 0.5;
  scfg.d_patch = scfg.d_cell = 8;
  scfg.patches_min = scfg.patches_max = 2;
  scfg.cells_min = scfg.cells_max = 3;
  scfg.seed = 331;
  Cohort cohort = generate_cohort(scfg);
  std::vector<const Patient*> train_pts, val_pts;
  int val_pos = 0, val_neg = 0;
  for (const auto& p : cohort.patients) {
    int& taken = p.label ? val_pos : val_neg;
    if (taken < 2) {
      val_pts.push_back(&p);
      ++taken;
    } else {
      train_pts.push_back(&p);
    }
  }
  REQUIRE(val_pos == 2);
  REQUIRE(val_neg == 2);
  TrainConfig tcfg;
  tcfg.model.d_patch = tcfg.model.d_cell = 8;
  tcfg.model.d_model = 8;
  tcfg.model.L = 8;
  tcfg.learning_rate = 1e-300;
  tcfg.epochs = 30;
  tcfg.patience = 5;
  TrainResult flat = train_fold(train_pts, val_pts, tcfg, 0);
  if (flat.best_epoch != 0) pass = false;

  // real training traces: the selected epoch is the earliest argmax
  tcfg.learning_rate = 2e-3;
  tcfg.epochs = 12;
  tcfg.patience = 12;
  for (std::uint64_t tag : {1ull, 2ull, 3ull}) {
    TrainResult tr = train_fold(train_pts, val_pts, tcfg, tag);
    int earliest = 0;
    for (std::size_t e = 1; e < tr.trace.size(); ++e)
      if (tr.trace[e].score > tr.trace[earliest].score)
        earliest = static_cast<int>(e);
    if (tr.best_epoch != earliest) pass = false;
  }
  report(7, "score and early stopping", pass);
  CHECK(pass);
}

TEST_CASE("8: format round-trip") {
  bool pass = true;
  Rng rng(341);
  fs::path base = fs::temp_directory_path() / "celleco_acceptance" / "roundtrip";
  fs::remove_all(base);
  for (int trial = 0; trial < 50 && pass; ++trial) {
    SynthConfig cfg;
    cfg.n_patients = 1 + rng.below(4);
    cfg.d_patch = 2 + static_cast<std::uint32_t>(rng.below(15));
    cfg.d_cell = 2 + static_cast<std::uint32_t>(rng.below(15));
    cfg.patches_min = 1;
    cfg.patches_max = 1 + rng.below(5);
    cfg.cells_min = 1;
    cfg.cells_max = 1 + rng.below(6);
    cfg.signal_kind = static_cast<SignalKind>(1 + rng.below(4));
    cfg.seed = rng.next();
    Cohort cohort = generate_cohort(cfg);
    fs::path d1 = base / (std::to_string(trial) + "_a");
    fs::path d2 = base / (std::to_string(trial) + "_b");
    write_cohort(cohort, cfg, d1.string());
    write_cohort(load_cohort((d1 / "manifest.json").string()), cfg, d2.string());
    for (const auto& e : fs::directory_iterator(d1))
      if (slurp(e.path()) != slurp(d2 / e.path().filename())) pass = false;
  }
  fs::remove_all(base);
  report(8, "format round-trip", pass);
  CHECK(pass);
}

TEST_CASE("9: command-line determinism") {
  fs::path base = fs::temp_directory_path() / "celleco_acceptance" / "determinism";
  fs::remove_all(base);
  fs::create_directories(base);
  {
    std::ofstream os(base / "synth.json");
    os << R"({"n_patients": 16, "d_patch": 8, "d_cell": 8,
              "patches_min": 2, "patches_max": 3,
              "cells_min": 3, "cells_max": 5, "seed": 351})";
  }
  {
    std::ofstream os(base / "train.json");
    os << R"({"epochs": 3, "patience": 3, "k_folds": 3,
              "model": {"d_patch": 8, "d_cell": 8, "d_model": 8, "L": 8}})";
  }
  std::string cli = CELLECO_CLI_PATH;
  auto run = [&](const std::string& args) {
    std::string cmd = cli + " " + args + " > /dev/null 2>&1";
    return std::system(cmd.c_str());
  };
  bool pass =
      run("synth --config " + (base / "synth.json").string() + " --out " +
          (base / "cohort").string()) == 0 &&
      run("train --cohort " + (base / "cohort").string() + " --config " +
          (base / "train.json").string() + " --seed 7 --workers 1 --out " +
          (base / "run1").string()) == 0 &&
      run("train --cohort " + (base / "cohort").string() + " --config " +
          (base / "train.json").string() + " --seed 7 --workers 1 --out " +
          (base / "run2").string()) == 0;
  if (pass) {
    std::string a = slurp(base / "run1" / "predictions.csv");
    std::string b = slurp(base / "run2" / "predictions.csv");
    pass = !a.empty() && a == b;
  }
  fs::remove_all(base);
  report(9, "CLI determinism", pass);
  CHECK(pass);
}
