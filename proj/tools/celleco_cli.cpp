// celleco command-line tool: cohort synthesis, training, ablation, the
// cell-type ensemble, survival statistics, and attention export. All outputs
// are CSV/JSON; every run directory contains the fully resolved config.

#include <cinttypes>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "celleco/ensemble.hpp"
#include "celleco/model_io.hpp"
#include "celleco/stats.hpp"
#include "celleco/stats_reports.hpp"
#include "celleco/synth.hpp"
#include "celleco/trainer.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace celleco;

namespace {

constexpr int kExitUsage = 1;
constexpr int kExitData = 2;
constexpr int kExitNumerical = 3;

// shortest round-trippable decimal; keeps CSV output byte-stable
std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::string fmt_mean_std(double mean, double sd) {
  char buf[48];
  std::snprintf(buf, sizeof buf, "%.4f±%.4f", mean, sd);
  return buf;
}

std::ofstream open_out(const fs::path& path) {
  std::ofstream os(path);
  if (!os) throw DataError("cannot write " + path.string());
  return os;
}

json load_json_file(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw DataError("cannot read config file " + path);
  return json::parse(is);
}

void reject_unknown_keys(const json& j, std::initializer_list<const char*> ok,
                         const std::string& where) {
  for (const auto& [key, _] : j.items()) {
    bool known = false;
    for (const char* k : ok)
      if (key == k) { known = true; break; }
    if (!known) throw DataError("unknown key '" + key + "' in " + where);
  }
}

// FNV-1a over the ordered patient ids of a fold split
std::uint64_t fold_hash(const FoldSplit& f) {
  std::uint64_t h = 1469598103934665603ull;
  auto eat = [&](const std::vector<std::string>& ids, char sep) {
    for (const auto& id : ids) {
      for (char c : id) { h ^= std::uint8_t(c); h *= 1099511628211ull; }
      h ^= std::uint8_t(sep);
      h *= 1099511628211ull;
    }
  };
  eat(f.train, 't');
  eat(f.validation, 'v');
  eat(f.test, 's');
  return h;
}

// ---- config files -------------------------------------------------------

ModelConfig model_config_from(const json& j) {
  reject_unknown_keys(j,
                      {"d_patch", "d_cell", "d_model", "L", "r",
                       "use_patch_embeddings", "spatial_scale",
                       "allow_large_model"},
                      "model config");
  ModelConfig cfg;
  cfg.d_patch = j.value("d_patch", cfg.d_patch);
  cfg.d_cell = j.value("d_cell", cfg.d_cell);
  cfg.d_model = j.value("d_model", cfg.d_model);
  cfg.L = j.value("L", cfg.L);
  cfg.r = j.value("r", cfg.r);
  cfg.use_patch_embeddings = j.value("use_patch_embeddings", cfg.use_patch_embeddings);
  cfg.spatial_scale = j.value("spatial_scale", cfg.spatial_scale);
  cfg.allow_large_model = j.value("allow_large_model", cfg.allow_large_model);
  return cfg;
}

TrainConfig train_config_from(const json& j) {
  reject_unknown_keys(j,
                      {"learning_rate", "epochs", "patience", "seed", "k_folds",
                       "tau", "positive_class_weight", "model"},
                      "train config");
  TrainConfig cfg;
  cfg.learning_rate = j.value("learning_rate", cfg.learning_rate);
  cfg.epochs = j.value("epochs", cfg.epochs);
  cfg.patience = j.value("patience", cfg.patience);
  cfg.seed = j.value("seed", cfg.seed);
  cfg.k_folds = j.value("k_folds", cfg.k_folds);
  cfg.tau = j.value("tau", cfg.tau);
  cfg.positive_class_weight = j.value("positive_class_weight", cfg.positive_class_weight);
  if (j.contains("model")) cfg.model = model_config_from(j["model"]);
  return cfg;
}

json train_config_to_json(const TrainConfig& cfg) {
  return {{"learning_rate", cfg.learning_rate},
          {"epochs", cfg.epochs},
          {"patience", cfg.patience},
          {"seed", cfg.seed},
          {"k_folds", cfg.k_folds},
          {"tau", cfg.tau},
          {"positive_class_weight", cfg.positive_class_weight},
          {"model", model_config_to_json(cfg.model)}};
}

SynthConfig synth_config_from(const json& j) {
  reject_unknown_keys(j,
                      {"n_patients", "patches_min", "patches_max", "cells_min",
                       "cells_max", "positive_fraction", "d_patch", "d_cell",
                       "signal_kind", "signal_strength", "censoring_rate",
                       "seed"},
                      "synth config");
  SynthConfig cfg;
  cfg.n_patients = j.value("n_patients", cfg.n_patients);
  cfg.patches_min = j.value("patches_min", cfg.patches_min);
  cfg.patches_max = j.value("patches_max", cfg.patches_max);
  cfg.cells_min = j.value("cells_min", cfg.cells_min);
  cfg.cells_max = j.value("cells_max", cfg.cells_max);
  cfg.positive_fraction = j.value("positive_fraction", cfg.positive_fraction);
  cfg.d_patch = j.value("d_patch", cfg.d_patch);
  cfg.d_cell = j.value("d_cell", cfg.d_cell);
  if (j.contains("signal_kind"))
    cfg.signal_kind = signal_kind_from_name(j["signal_kind"].get<std::string>());
  cfg.signal_strength = j.value("signal_strength", cfg.signal_strength);
  cfg.censoring_rate = j.value("censoring_rate", cfg.censoring_rate);
  cfg.seed = j.value("seed", cfg.seed);
  return cfg;
}

json synth_config_to_json(const SynthConfig& cfg) {
  return {{"n_patients", cfg.n_patients},
          {"patches_min", cfg.patches_min},
          {"patches_max", cfg.patches_max},
          {"cells_min", cfg.cells_min},
          {"cells_max", cfg.cells_max},
          {"positive_fraction", cfg.positive_fraction},
          {"d_patch", cfg.d_patch},
          {"d_cell", cfg.d_cell},
          {"signal_kind", signal_kind_name(cfg.signal_kind)},
          {"signal_strength", cfg.signal_strength},
          {"censoring_rate", cfg.censoring_rate},
          {"seed", cfg.seed}};
}

// ---- CSV plumbing -------------------------------------------------------

void write_predictions_csv(const fs::path& path,
                           const std::vector<PatientScore>& preds) {
  auto os = open_out(path);
  os << "patient_id,probability,label\n";
  for (const auto& p : preds)
    os << p.patient_id << "," << fmt(p.probability) << "," << p.label << "\n";
}

std::vector<PatientScore> read_predictions_csv(const fs::path& path) {
  std::ifstream is(path);
  if (!is) throw DataError("cannot read predictions file " + path.string());
  std::string line;
  if (!std::getline(is, line) || line != "patient_id,probability,label")
    throw DataError("unexpected predictions header in " + path.string());
  std::vector<PatientScore> preds;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    std::stringstream ss(line);
    PatientScore p;
    std::string prob, label;
    if (!std::getline(ss, p.patient_id, ',') || !std::getline(ss, prob, ',') ||
        !std::getline(ss, label))
      throw DataError("malformed predictions row: " + line);
    p.probability = std::stod(prob);
    p.label = std::stoi(label);
    preds.push_back(std::move(p));
  }
  if (preds.empty()) throw DataError("no predictions in " + path.string());
  return preds;
}

json fold_metrics_json(const FoldMetrics& m) {
  json j;
  j["accuracy"] = m.accuracy;
  j["sensitivity"] = m.sensitivity ? json(*m.sensitivity) : json(nullptr);
  j["specificity"] = m.specificity ? json(*m.specificity) : json(nullptr);
  j["auc"] = m.auc ? json(*m.auc) : json(nullptr);
  return j;
}

// ---- subcommand state ---------------------------------------------------

struct CommonArgs {
  std::string config_path, cohort_dir, out_dir, run_dir;
  std::optional<std::uint64_t> seed;
  int workers = 1;
  std::optional<int> rank;
  bool no_patch_embeddings = false;
  std::optional<double> tau;
};

Cohort load_cohort_dir(const std::string& dir) {
  fs::path manifest = fs::path(dir) / "manifest.json";
  if (!fs::exists(manifest))
    throw DataError("cohort manifest not found: " + manifest.string());
  return load_cohort(manifest.string());
}

TrainConfig resolve_train_config(const CommonArgs& a) {
  TrainConfig cfg =
      a.config_path.empty() ? TrainConfig{} : train_config_from(load_json_file(a.config_path));
  if (a.seed) cfg.seed = *a.seed;
  if (a.rank) cfg.model.r = *a.rank;
  if (a.no_patch_embeddings) cfg.model.use_patch_embeddings = false;
  if (a.tau) cfg.tau = *a.tau;
  cfg.validate();
  return cfg;
}

// ---- synth --------------------------------------------------------------

int cmd_synth(const CommonArgs& a) {
  SynthConfig cfg =
      a.config_path.empty() ? SynthConfig{} : synth_config_from(load_json_file(a.config_path));
  if (a.seed) cfg.seed = *a.seed;
  cfg.validate();
  Cohort cohort = generate_cohort(cfg);
  validate_cohort(cohort);
  write_cohort(cohort, cfg, a.out_dir);
  auto os = open_out(fs::path(a.out_dir) / "config.json");
  os << synth_config_to_json(cfg).dump(2) << "\n";
  std::printf("wrote %zu patients to %s\n", cohort.patients.size(),
              a.out_dir.c_str());
  return 0;
}

// ---- train --------------------------------------------------------------

FoldMetrics validation_metrics(const Cohort& cohort, const FoldReport& fr,
                               const TrainConfig& cfg,
                               const std::function<Slide(const Slide&)>& view) {
  std::vector<PatientScore> preds;
  for (const auto& id : fr.split.validation) {
    const Patient& p = find_patient(cohort, id);
    auto prob = patient_probability(p, fr.best_params, cfg.model, view);
    if (prob) preds.push_back({p.patient_id, *prob, p.label});
  }
  if (preds.empty()) return {};
  return evaluate_metrics(preds, cfg.tau);
}

void write_run_dir(const fs::path& out, const Cohort& cohort,
                   const TrainConfig& cfg, const CvReport& report,
                   const CommonArgs& a) {
  fs::create_directories(out);
  {
    json cj = train_config_to_json(cfg);
    cj["cohort"] = a.cohort_dir;
    cj["workers"] = a.workers;
    auto os = open_out(out / "config.json");
    os << cj.dump(2) << "\n";
  }

  std::vector<PatientScore> pooled;
  json metrics;
  metrics["folds"] = json::array();
  for (const auto& fr : report.folds) {
    fs::path fd = out / ("fold_" + std::to_string(fr.fold));
    fs::create_directories(fd);
    write_predictions_csv(fd / "predictions.csv", fr.predictions);
    {
      auto os = open_out(fd / "trace.csv");
      os << "epoch,sensitivity,specificity,score\n";
      for (const auto& e : fr.trace)
        os << e.epoch << "," << fmt(e.sensitivity) << "," << fmt(e.specificity)
           << "," << fmt(e.score) << "\n";
    }
    save_model(fr.best_params, cfg.model, (fd / "model.json").string());
    pooled.insert(pooled.end(), fr.predictions.begin(), fr.predictions.end());

    json fj;
    fj["fold"] = fr.fold;
    fj["best_epoch"] = fr.best_epoch;
    fj["n_test"] = fr.predictions.size();
    fj["fold_hash"] = fold_hash(fr.split);
    fj["test"] = fold_metrics_json(fr.test);
    fj["split"] = {{"train", fr.split.train},
                   {"validation", fr.split.validation},
                   {"test", fr.split.test}};
    metrics["folds"].push_back(std::move(fj));
  }
  metrics["mean_auc"] = report.mean_auc;
  metrics["std_auc"] = report.std_auc;
  metrics["mean_accuracy"] = report.mean_accuracy;
  metrics["std_accuracy"] = report.std_accuracy;
  metrics["mean_sensitivity"] = report.mean_sensitivity;
  metrics["std_sensitivity"] = report.std_sensitivity;
  metrics["mean_specificity"] = report.mean_specificity;
  metrics["std_specificity"] = report.std_specificity;
  {
    auto os = open_out(out / "metrics.json");
    os << metrics.dump(2) << "\n";
  }
  write_predictions_csv(out / "predictions.csv", pooled);
  (void)cohort;
}

int cmd_train(const CommonArgs& a) {
  Cohort cohort = load_cohort_dir(a.cohort_dir);
  TrainConfig cfg = resolve_train_config(a);
  CvReport report = run_cv(cohort, cfg, nullptr, 0, nullptr, a.workers);
  write_run_dir(a.out_dir, cohort, cfg, report, a);
  std::printf("train: %d folds, mean test AUC %.4f ± %.4f -> %s\n",
              cfg.k_folds, report.mean_auc, report.std_auc, a.out_dir.c_str());
  return 0;
}

// ---- ablate -------------------------------------------------------------

int cmd_ablate(const CommonArgs& a) {
  Cohort cohort = load_cohort_dir(a.cohort_dir);
  TrainConfig base = resolve_train_config(a);
  std::vector<FoldSplit> folds = make_folds(cohort, base.k_folds, base.seed);

  struct Row { const char* name; int r; bool patch; };
  const std::vector<Row> grid = {{"1d", 1, true},
                                 {"2d", 2, true},
                                 {"3d", 3, true},
                                 {"1d_no_patch", 1, false},
                                 {"2d_no_patch", 2, false}};

  fs::create_directories(a.out_dir);
  json report;
  report["rows"] = json::array();
  auto csv = open_out(fs::path(a.out_dir) / "ablation.csv");
  csv << "config,fold_hash,val_accuracy,val_sensitivity,val_specificity,"
         "val_auc,test_accuracy,test_sensitivity,test_specificity,test_auc\n";

  std::uint64_t shared_hash = 0;
  for (const auto& f : folds) shared_hash ^= fold_hash(f);

  for (std::size_t g = 0; g < grid.size(); ++g) {
    TrainConfig cfg = base;
    cfg.model.r = grid[g].r;
    cfg.model.use_patch_embeddings = grid[g].patch;
    CvReport cv = run_cv(cohort, cfg, nullptr, g + 1, &folds, a.workers);

    // per-fold validation metrics with the selected checkpoint
    auto mean_std = [](const std::vector<double>& xs) {
      double m = 0, s = 0;
      if (xs.empty()) return std::pair{0.0, 0.0};
      for (double x : xs) m += x;
      m /= double(xs.size());
      for (double x : xs) s += (x - m) * (x - m);
      s = xs.size() > 1 ? std::sqrt(s / double(xs.size() - 1)) : 0;
      return std::pair{m, s};
    };
    std::vector<double> va, vs, vp, vu;
    for (const auto& fr : cv.folds) {
      FoldMetrics vm = validation_metrics(cohort, fr, cfg, nullptr);
      va.push_back(vm.accuracy);
      if (vm.sensitivity) vs.push_back(*vm.sensitivity);
      if (vm.specificity) vp.push_back(*vm.specificity);
      if (vm.auc) vu.push_back(*vm.auc);
    }
    auto [vam, vad] = mean_std(va);
    auto [vsm, vsd] = mean_std(vs);
    auto [vpm, vpd] = mean_std(vp);
    auto [vum, vud] = mean_std(vu);

    csv << grid[g].name << "," << std::hex << shared_hash << std::dec << ","
        << fmt_mean_std(vam, vad) << "," << fmt_mean_std(vsm, vsd) << ","
        << fmt_mean_std(vpm, vpd) << "," << fmt_mean_std(vum, vud) << ","
        << fmt_mean_std(cv.mean_accuracy, cv.std_accuracy) << ","
        << fmt_mean_std(cv.mean_sensitivity, cv.std_sensitivity) << ","
        << fmt_mean_std(cv.mean_specificity, cv.std_specificity) << ","
        << fmt_mean_std(cv.mean_auc, cv.std_auc) << "\n";

    json rj;
    rj["config"] = grid[g].name;
    rj["r"] = grid[g].r;
    rj["use_patch_embeddings"] = grid[g].patch;
    rj["fold_hash"] = shared_hash;
    rj["val"] = {{"mean_accuracy", vam}, {"std_accuracy", vad},
                 {"mean_sensitivity", vsm}, {"std_sensitivity", vsd},
                 {"mean_specificity", vpm}, {"std_specificity", vpd},
                 {"mean_auc", vum}, {"std_auc", vud}};
    rj["test"] = {{"mean_accuracy", cv.mean_accuracy},
                  {"std_accuracy", cv.std_accuracy},
                  {"mean_sensitivity", cv.mean_sensitivity},
                  {"std_sensitivity", cv.std_sensitivity},
                  {"mean_specificity", cv.mean_specificity},
                  {"std_specificity", cv.std_specificity},
                  {"mean_auc", cv.mean_auc},
                  {"std_auc", cv.std_auc}};
    report["rows"].push_back(std::move(rj));
    std::printf("ablate %-12s test AUC %.4f ± %.4f\n", grid[g].name,
                cv.mean_auc, cv.std_auc);
  }
  {
    json cj = train_config_to_json(base);
    cj["cohort"] = a.cohort_dir;
    auto os = open_out(fs::path(a.out_dir) / "config.json");
    os << cj.dump(2) << "\n";
  }
  auto os = open_out(fs::path(a.out_dir) / "ablation.json");
  os << report.dump(2) << "\n";
  return 0;
}

// ---- ensemble -----------------------------------------------------------

int cmd_ensemble(const CommonArgs& a) {
  Cohort cohort = load_cohort_dir(a.cohort_dir);
  TrainConfig cfg = resolve_train_config(a);
  EnsembleReport report = run_ensemble(cohort, cfg, a.workers);

  fs::create_directories(a.out_dir);
  const auto& keys = ensemble_model_keys();
  {
    auto os = open_out(fs::path(a.out_dir) / "predictions_combined.csv");
    os << "patient_id,label,time_months,event";
    for (const auto& k : keys) os << "," << k;
    os << ",combined,decision\n";
    for (const auto& p : report.predictions) {
      os << p.patient_id << "," << p.label << "," << fmt(p.time_months) << ","
         << p.event;
      for (const auto& k : keys) {
        os << ",";
        auto it = p.per_model.find(k);
        if (it != p.per_model.end()) os << fmt(it->second);
      }
      os << "," << fmt(p.combined) << "," << p.decision << "\n";
    }
  }

  // survival columns per model: HR from the tau split, C-index on the score
  json models = json::array();
  for (const auto& s : report.models) {
    json mj;
    mj["key"] = s.key;
    mj["mean_auc"] = s.mean_auc;
    mj["std_auc"] = s.std_auc;
    mj["mean_accuracy"] = s.mean_accuracy;
    mj["std_accuracy"] = s.std_accuracy;
    mj["mean_sensitivity"] = s.mean_sensitivity;
    mj["std_sensitivity"] = s.std_sensitivity;
    mj["mean_specificity"] = s.mean_specificity;
    mj["std_specificity"] = s.std_specificity;
    mj["fold_aucs"] = s.fold_aucs;

    std::vector<SurvivalRecord> records;
    std::vector<double> scores;
    for (const auto& p : report.predictions) {
      double prob;
      if (s.key == "combined") prob = p.combined;
      else {
        auto it = p.per_model.find(s.key);
        if (it == p.per_model.end()) continue;
        prob = it->second;
      }
      records.push_back({p.time_months, p.event, prob >= cfg.tau ? 1.0 : 0.0});
      scores.push_back(prob);
    }
    try {
      CoxFit fit = cox_univariable(records);
      if (fit.converged) {
        mj["hazard_ratio"] = fit.hazard_ratio;
        mj["hr_ci"] = {fit.ci_low, fit.ci_high};
        mj["hr_p_value"] = fit.p_value;
      } else {
        mj["hazard_ratio"] = nullptr;
        mj["hr_note"] = fit.diagnostic.empty() ? "not converged" : fit.diagnostic;
      }
    } catch (const StatError& e) {
      mj["hazard_ratio"] = nullptr;
      mj["hr_note"] = e.what();
    }
    try {
      std::vector<SurvivalRecord> rs = records;  // covariate unused by C-index
      mj["c_index"] = concordance_index(scores, rs);
    } catch (const StatError& e) {
      mj["c_index"] = nullptr;
      mj["c_index_note"] = e.what();
    }
    models.push_back(std::move(mj));
  }

  json out;
  out["models"] = std::move(models);
  out["fold_notes"] = report.fold_notes;
  {
    auto os = open_out(fs::path(a.out_dir) / "ensemble_report.json");
    os << out.dump(2) << "\n";
  }
  {
    json cj = train_config_to_json(cfg);
    cj["cohort"] = a.cohort_dir;
    cj["workers"] = a.workers;
    auto os = open_out(fs::path(a.out_dir) / "config.json");
    os << cj.dump(2) << "\n";
  }
  std::printf("ensemble: %zu predictions -> %s\n", report.predictions.size(),
              a.out_dir.c_str());
  return 0;
}

// ---- stats --------------------------------------------------------------

int cmd_stats(const CommonArgs& a) {
  Cohort cohort = load_cohort_dir(a.cohort_dir);
  auto preds = read_predictions_csv(fs::path(a.run_dir) / "predictions.csv");
  double tau = a.tau.value_or(0.5);
  fs::path out = a.out_dir.empty() ? fs::path(a.run_dir) : fs::path(a.out_dir);
  fs::create_directories(out);

  std::vector<SurvivalRecord> high, low, all;
  std::vector<double> scores;
  for (const auto& p : preds) {
    const Patient& pt = find_patient(cohort, p.patient_id);
    SurvivalRecord r{pt.time_months, pt.event,
                     p.probability >= tau ? 1.0 : 0.0};
    (r.covariate > 0.5 ? high : low).push_back(r);
    all.push_back(r);
    scores.push_back(p.probability);
  }

  {
    auto os = open_out(out / "km_curve.csv");
    os << "group,time,survival,at_risk,events,greenwood_var\n";
    auto emit = [&](const char* name, const std::vector<SurvivalRecord>& rs) {
      if (rs.empty()) return;
      KmCurve c = km_estimate(rs);
      for (std::size_t i = 0; i < c.times.size(); ++i)
        os << name << "," << fmt(c.times[i]) << "," << fmt(c.survival[i]) << ","
           << c.at_risk[i] << "," << c.events[i] << ","
           << fmt(c.greenwood_var[i]) << "\n";
    };
    emit("high_risk", high);
    emit("low_risk", low);
  }

  json cox;
  cox["tau"] = tau;
  cox["n_high_risk"] = high.size();
  cox["n_low_risk"] = low.size();
  if (high.empty() || low.empty()) {
    cox["defined"] = false;
    cox["note"] = "all predictions fall in one risk group";
    cox["logrank"] = {{"defined", false}};
  } else {
    try {
      CoxFit fit = cox_univariable(all);
      cox["defined"] = fit.converged;
      cox["beta"] = fit.beta;
      cox["se"] = fit.se;
      cox["hazard_ratio"] = fit.hazard_ratio;
      cox["ci"] = {fit.ci_low, fit.ci_high};
      cox["p_value"] = fit.p_value;
      if (!fit.converged) cox["note"] = fit.diagnostic;
    } catch (const StatError& e) {
      cox["defined"] = false;
      cox["note"] = e.what();
    }
    try {
      LogrankResult lr = logrank(high, low);
      cox["logrank"] = {{"defined", true}, {"stat", lr.stat},
                        {"p_value", lr.p_value}};
    } catch (const StatError& e) {
      cox["logrank"] = {{"defined", false}, {"note", e.what()}};
    }
  }
  {
    auto os = open_out(out / "cox.json");
    os << cox.dump(2) << "\n";
  }

  json ci;
  try {
    ci["c_index"] = concordance_index(scores, all);
    ci["n"] = all.size();
  } catch (const StatError& e) {
    ci["c_index"] = nullptr;
    ci["note"] = e.what();
  }
  {
    auto os = open_out(out / "cindex.json");
    os << ci.dump(2) << "\n";
  }

  {
    auto os = open_out(out / "subgroup_report.csv");
    os << "key,value,n,accuracy,sensitivity,specificity,auc\n";
    for (const char* key : {"sex", "race", "stage", "grade_old", "grade_new"}) {
      std::vector<SubgroupRow> rows;
      try {
        rows = subgroup_report(preds, cohort, key, tau);
      } catch (const StatError&) {
        continue;  // key absent from this cohort
      }
      for (const auto& r : rows) {
        os << key << "," << r.value << "," << r.n << "," << fmt(r.accuracy)
           << "," << (r.sensitivity ? fmt(*r.sensitivity) : "") << ","
           << (r.specificity ? fmt(*r.specificity) : "") << ","
           << (r.auc ? fmt(*r.auc) : "") << "\n";
      }
    }
  }

  {
    auto os = open_out(out / "bias_report.csv");
    os << "comparison,group_a,group_b,recurred_a,recurred_b,fn_rate_a,"
          "fn_rate_b,chi_square,p_value,note\n";
    for (const auto& r : bias_report(preds, cohort, tau)) {
      os << r.comparison << "," << r.group_a << "," << r.group_b << ","
         << r.recurred_a << "," << r.recurred_b << ","
         << (r.fn_rate_a ? fmt(*r.fn_rate_a) : "") << ","
         << (r.fn_rate_b ? fmt(*r.fn_rate_b) : "") << ","
         << (r.chi_square ? fmt(*r.chi_square) : "") << ","
         << (r.p_value ? fmt(*r.p_value) : "") << "," << r.note << "\n";
    }
  }
  std::printf("stats: artifacts written to %s\n", out.string().c_str());
  return 0;
}

// ---- export-attention ---------------------------------------------------

int cmd_export_attention(const CommonArgs& a, const std::string& slide_id,
                         int fold) {
  Cohort cohort = load_cohort_dir(a.cohort_dir);
  fs::path model_path =
      fs::path(a.run_dir) / ("fold_" + std::to_string(fold)) / "model.json";
  ModelConfig cfg;
  ModelParams params = load_model(model_path.string(), &cfg);

  const Slide* slide = nullptr;
  for (const auto& pt : cohort.patients)
    for (const auto& s : pt.slides)
      if (s.slide_id == slide_id) slide = &s;
  if (!slide) throw DataError("unknown slide id: " + slide_id);

  Tape tape;
  ModelVars vars = register_params(tape, params);
  auto score = slide_forward(tape, *slide, vars, cfg);
  if (!score)
    throw DataError("slide " + slide_id + " has no non-empty patch");

  fs::path out = a.out_dir.empty()
                     ? fs::path(a.run_dir) / ("attention_" + slide_id + ".csv")
                     : fs::path(a.out_dir);
  if (out.has_parent_path()) fs::create_directories(out.parent_path());
  auto os = open_out(out);
  os << "slide_id,patch_id,origin_x,origin_y,attention_weight,"
        "top_cell_index,top_cell_type,top_cell_x,top_cell_y,top_cell_weight\n";
  for (std::size_t i = 0; i < score->patch_ids.size(); ++i) {
    const PatchRecord* patch = nullptr;
    for (const auto& p : slide->patches)
      if (p.patch_id == score->patch_ids[i]) patch = &p;
    const auto& row = score->cls_attention[i];  // [CLS, cell_1, ..., cell_n]
    std::size_t best = 1;
    for (std::size_t c = 2; c < row.size(); ++c)
      if (row[c] > row[best]) best = c;
    const CellRecord& cell = patch->cells[best - 1];
    os << slide_id << "," << score->patch_ids[i] << "," << fmt(patch->origin_x)
       << "," << fmt(patch->origin_y) << "," << fmt(score->attention_weights[i])
       << "," << best - 1 << "," << cell_type_name(cell.cell_type) << ","
       << fmt(cell.centroid_x) << "," << fmt(cell.centroid_y) << ","
       << fmt(row[best]) << "\n";
  }
  std::printf("export-attention: %zu patches -> %s\n", score->patch_ids.size(),
              out.string().c_str());
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"celleco: recurrence prediction over cell-level slide data"};
  app.require_subcommand(1);

  CommonArgs a;
  std::string slide_id;
  int fold = 0;

  auto add_common = [&](CLI::App* cmd, bool needs_cohort, bool needs_out) {
    cmd->add_option("--config", a.config_path, "JSON config file");
    auto* c = cmd->add_option("--cohort", a.cohort_dir, "cohort directory");
    if (needs_cohort) c->required();
    auto* o = cmd->add_option("--out", a.out_dir, "output directory");
    if (needs_out) o->required();
    cmd->add_option("--seed", a.seed, "RNG seed override");
    cmd->add_option("--workers", a.workers, "parallel workers")
        ->check(CLI::PositiveNumber);
    cmd->add_option("--rank", a.rank, "attention rank r")
        ->check(CLI::Range(1, 3));
    cmd->add_flag("--no-patch-embeddings", a.no_patch_embeddings,
                  "ablate the patch-embedding fusion path");
    cmd->add_option("--tau", a.tau, "decision threshold")
        ->check(CLI::Range(0.0, 1.0));
  };

  auto* synth = app.add_subcommand("synth", "generate a synthetic cohort");
  add_common(synth, false, true);

  auto* train = app.add_subcommand("train", "k-fold cross-validated training");
  add_common(train, true, true);

  auto* ablate = app.add_subcommand("ablate", "rank / fusion ablation grid");
  add_common(ablate, true, true);

  auto* ensemble = app.add_subcommand("ensemble", "six-model cell-type ensemble");
  add_common(ensemble, true, true);

  auto* stats = app.add_subcommand("stats", "survival statistics for a run");
  add_common(stats, true, false);
  stats->add_option("--run", a.run_dir, "run directory with predictions.csv")
      ->required();

  auto* exporta =
      app.add_subcommand("export-attention", "per-patch attention CSV");
  add_common(exporta, true, false);
  exporta->add_option("--run", a.run_dir, "run directory with model snapshots")
      ->required();
  exporta->add_option("--slide", slide_id, "slide id to export")->required();
  exporta->add_option("--fold", fold, "fold whose checkpoint to use");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    int code = app.exit(e);
    return code == 0 ? 0 : kExitUsage;
  }

  try {
    if (synth->parsed()) return cmd_synth(a);
    if (train->parsed()) return cmd_train(a);
    if (ablate->parsed()) return cmd_ablate(a);
    if (ensemble->parsed()) return cmd_ensemble(a);
    if (stats->parsed()) return cmd_stats(a);
    if (exporta->parsed()) return cmd_export_attention(a, slide_id, fold);
  } catch (const StatError& e) {
    std::fprintf(stderr, "numerical error: %s\n", e.what());
    return kExitNumerical;
  } catch (const DataError& e) {
    std::fprintf(stderr, "data error: %s\n", e.what());
    return kExitData;
  } catch (const json::exception& e) {
    std::fprintf(stderr, "data error: %s\n", e.what());
    return kExitData;
  } catch (const std::invalid_argument& e) {
    std::fprintf(stderr, "data error: %s\n", e.what());
    return kExitData;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kExitData;
  }
  return kExitUsage;
}
