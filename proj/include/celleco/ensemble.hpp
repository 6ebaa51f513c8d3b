#pragma once

// Six-model orchestration: five cell-type-specific views plus the all-cells
// view, trained per fold on shared splits, aggregated per patient by
// probability averaging over applicable models and thresholded at tau.

#include <map>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include "celleco/cohort.hpp"
#include "celleco/trainer.hpp"

namespace celleco {

inline const std::vector<std::string>& ensemble_model_keys() {
  static const std::vector<std::string> keys = {
      "stromal", "inflammatory", "neoplastic", "dead", "benign_epithelial",
      "all"};
  return keys;
}

inline std::function<Slide(const Slide&)> model_view(const std::string& key) {
  if (key == "all")
    return [](const Slide& s) { return subset_all_cells(s); };
  for (int t = 0; t < kNumCellTypes; ++t)
    if (key == cell_type_name(static_cast<CellType>(t)))
      return [t](const Slide& s) {
        return subset_by_cell_type(s, static_cast<CellType>(t));
      };
  throw std::invalid_argument("unknown ensemble model key: " + key);
}

struct PatientPrediction {
  std::string patient_id;
  int label = 0;
  double time_months = 0;
  int event = 0;
  std::map<std::string, double> per_model;  // only applicable models present
  double combined = 0;
  int decision = 0;
};

// Arithmetic mean over present models; decision by threshold tau.
inline PatientPrediction combine_models(
    const std::string& patient_id,
    const std::map<std::string, double>& per_model, double tau) {
  if (per_model.empty())
    throw DataError("unpredictable patient " + patient_id +
                    ": no applicable model");
  PatientPrediction out;
  out.patient_id = patient_id;
  out.per_model = per_model;
  double sum = 0;
  for (const auto& [k, v] : per_model) sum += v;
  out.combined = sum / double(per_model.size());
  out.decision = out.combined >= tau ? 1 : 0;
  return out;
}

struct EnsembleModelSummary {
  std::string key;
  std::vector<double> fold_aucs, fold_accs, fold_sens, fold_specs;
  double mean_auc = 0, std_auc = 0;
  double mean_accuracy = 0, std_accuracy = 0;
  double mean_sensitivity = 0, std_sensitivity = 0;
  double mean_specificity = 0, std_specificity = 0;
};

struct EnsembleReport {
  std::vector<EnsembleModelSummary> models;  // six + "combined"
  std::vector<PatientPrediction> predictions;  // pooled test patients
  std::vector<std::string> fold_notes;  // e.g. inapplicable models per fold
};

inline void summarize(EnsembleModelSummary& s) {
  auto mean_std = [](const std::vector<double>& xs, double& mean, double& sd) {
    if (xs.empty()) { mean = sd = 0; return; }
    mean = 0;
    for (double x : xs) mean += x;
    mean /= double(xs.size());
    sd = 0;
    for (double x : xs) sd += (x - mean) * (x - mean);
    sd = xs.size() > 1 ? std::sqrt(sd / double(xs.size() - 1)) : 0;
  };
  mean_std(s.fold_aucs, s.mean_auc, s.std_auc);
  mean_std(s.fold_accs, s.mean_accuracy, s.std_accuracy);
  mean_std(s.fold_sens, s.mean_sensitivity, s.std_sensitivity);
  mean_std(s.fold_specs, s.mean_specificity, s.std_specificity);
}

inline EnsembleReport run_ensemble(const Cohort& cohort, const TrainConfig& cfg,
                                   int workers = 1) {
  cfg.validate();
  const auto& keys = ensemble_model_keys();
  std::vector<FoldSplit> folds = make_folds(cohort, cfg.k_folds, cfg.seed);

  EnsembleReport report;
  std::map<std::string, EnsembleModelSummary> summaries;
  for (const auto& key : keys) summaries[key].key = key;
  EnsembleModelSummary combined_summary;
  combined_summary.key = "combined";

  for (std::size_t f = 0; f < folds.size(); ++f) {
    auto collect = [&](const std::vector<std::string>& ids) {
      std::vector<const Patient*> out;
      for (const auto& id : ids) out.push_back(&find_patient(cohort, id));
      return out;
    };
    auto train_pts = collect(folds[f].train);
    auto val_pts = collect(folds[f].validation);

    // train the six views; independent jobs, shared read-only cohort
    std::vector<std::optional<TrainResult>> results(keys.size());
    std::vector<std::string> fail(keys.size());
    auto job = [&](std::size_t m) {
      try {
        results[m] = train_fold(train_pts, val_pts, cfg,
                                (m + 1) * 100000 + f, model_view(keys[m]));
      } catch (const std::exception& e) {
        fail[m] = e.what();
      }
    };
    if (workers > 1) {
      std::vector<std::thread> pool;
      for (std::size_t m = 0; m < keys.size(); ++m) pool.emplace_back(job, m);
      for (auto& t : pool) t.join();
    } else {
      for (std::size_t m = 0; m < keys.size(); ++m) job(m);
    }
    for (std::size_t m = 0; m < keys.size(); ++m)
      if (!results[m])
        report.fold_notes.push_back("fold " + std::to_string(f) + " model " +
                                    keys[m] + " inapplicable: " + fail[m]);

    // evaluate per model and combined on the fold's test patients
    std::map<std::string, std::vector<PatientScore>> per_model_preds;
    for (const auto& id : folds[f].test) {
      const Patient& p = find_patient(cohort, id);
      std::map<std::string, double> per_model;
      for (std::size_t m = 0; m < keys.size(); ++m) {
        if (!results[m]) continue;
        auto prob = patient_probability(p, results[m]->best_params, cfg.model,
                                        model_view(keys[m]));
        if (!prob) continue;
        per_model[keys[m]] = *prob;
        per_model_preds[keys[m]].push_back({p.patient_id, *prob, p.label});
      }
      if (per_model.empty()) {
        report.fold_notes.push_back("unpredictable patient " + p.patient_id);
        continue;
      }
      PatientPrediction pred = combine_models(p.patient_id, per_model, cfg.tau);
      pred.label = p.label;
      pred.time_months = p.time_months;
      pred.event = p.event;
      report.predictions.push_back(std::move(pred));
      per_model_preds["combined"].push_back(
          {p.patient_id, report.predictions.back().combined, p.label});
    }

    auto record = [&](EnsembleModelSummary& s,
                      const std::vector<PatientScore>& preds) {
      if (preds.empty()) return;
      FoldMetrics m = evaluate_metrics(preds, cfg.tau);
      s.fold_accs.push_back(m.accuracy);
      if (m.auc) s.fold_aucs.push_back(*m.auc);
      if (m.sensitivity) s.fold_sens.push_back(*m.sensitivity);
      if (m.specificity) s.fold_specs.push_back(*m.specificity);
    };
    for (std::size_t m = 0; m < keys.size(); ++m)
      if (results[m] && per_model_preds[keys[m]].empty())
        report.fold_notes.push_back("fold " + std::to_string(f) + " model " +
                                    keys[m] +
                                    " inapplicable: no test patient has a "
                                    "scorable slide under this view");
    for (const auto& key : keys) record(summaries[key], per_model_preds[key]);
    record(combined_summary, per_model_preds["combined"]);
  }

  for (const auto& key : keys) {
    summarize(summaries[key]);
    report.models.push_back(summaries[key]);
  }
  summarize(combined_summary);
  report.models.push_back(combined_summary);
  return report;
}

}  // namespace celleco
