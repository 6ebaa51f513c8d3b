#pragma once

// Training: weighted BCE on the slide logit, Adam, early stopping on the
// clinical-utility score 2*min(sensitivity, specificity), and the k-fold
// cross-validation harness. One gradient step per slide (one bag per step).

#include <atomic>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <map>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include "celleco/cohort.hpp"
#include "celleco/mil.hpp"
#include "celleco/stats.hpp"
#include "celleco/stats_reports.hpp"
#include "celleco/tape.hpp"

namespace celleco {

struct TrainConfig {
  double learning_rate = 1e-3;
  int epochs = 100;
  int patience = 20;
  std::uint64_t seed = 0;
  int k_folds = 5;
  double tau = 0.5;
  double positive_class_weight = 1.0;
  ModelConfig model;

  void validate() const {
    if (tau < 0 || tau > 1) throw std::invalid_argument("config: tau outside [0,1]");
    if (k_folds < 2) throw std::invalid_argument("config: k_folds must be >= 2");
    if (learning_rate <= 0) throw std::invalid_argument("config: learning_rate must be positive");
    model.validate();
  }
};

// Numerically stable weighted binary cross-entropy from the logit.
inline double bce_loss(double logit, int label, double positive_class_weight) {
  double w = label ? positive_class_weight : 1.0;
  return w * (Tape::softplus(logit) - double(label) * logit);
}

// (sens + spec) - |sens - spec|, identically 2*min(sens, spec).
inline double clinical_score(double sens, double spec) {
  return (sens + spec) - std::abs(sens - spec);
}

// ---- optimizer ---------------------------------------------------------

class AdamOptimizer {
 public:
  AdamOptimizer(double lr, double beta1 = 0.9, double beta2 = 0.999,
                double eps = 1e-8)
      : lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {}

  void step(std::vector<Tensor*> params, const std::vector<Tensor>& grads) {
    if (m_.empty()) {
      for (Tensor* p : params) {
        m_.push_back(Tensor::zeros(p->shape()));
        v_.push_back(Tensor::zeros(p->shape()));
      }
    }
    ++t_;
    double bc1 = 1.0 - std::pow(beta1_, t_);
    double bc2 = 1.0 - std::pow(beta2_, t_);
    for (std::size_t k = 0; k < params.size(); ++k) {
      Tensor& p = *params[k];
      const Tensor& g = grads[k];
      for (std::size_t i = 0; i < p.size(); ++i) {
        m_[k][i] = beta1_ * m_[k][i] + (1 - beta1_) * g[i];
        v_[k][i] = beta2_ * v_[k][i] + (1 - beta2_) * g[i] * g[i];
        double mhat = m_[k][i] / bc1;
        double vhat = v_[k][i] / bc2;
        p[i] -= lr_ * mhat / (std::sqrt(vhat) + eps_);
      }
    }
  }

 private:
  double lr_, beta1_, beta2_, eps_;
  long t_ = 0;
  std::vector<Tensor> m_, v_;
};

// ---- patient-level evaluation -----------------------------------------

// Average of slide probabilities; nullopt when no slide is applicable.
inline std::optional<double> patient_probability(
    const Patient& patient, const ModelParams& params, const ModelConfig& cfg,
    const std::function<Slide(const Slide&)>& view = nullptr) {
  double sum = 0;
  std::size_t n = 0;
  for (const auto& slide : patient.slides) {
    Tape tape;
    ModelVars vars = register_params(tape, params);
    auto score = slide_forward(tape, view ? view(slide) : slide, vars, cfg);
    if (!score) continue;
    sum += score->probability;
    ++n;
  }
  if (n == 0) return std::nullopt;
  return sum / double(n);
}

struct EpochEntry {
  int epoch = 0;
  double sensitivity = 0, specificity = 0, score = 0;
};

struct TrainResult {
  ModelParams best_params;
  int best_epoch = -1;
  double best_score = -1;
  std::vector<EpochEntry> trace;
};

// ---- single-fold training ---------------------------------------------

inline TrainResult train_fold(
    const std::vector<const Patient*>& train_patients,
    const std::vector<const Patient*>& val_patients, const TrainConfig& cfg,
    std::uint64_t stream_tag,
    const std::function<Slide(const Slide&)>& view = nullptr) {
  cfg.validate();
  {
    bool has_pos = false, has_neg = false;
    for (const auto* p : val_patients) (p->label ? has_pos : has_neg) = true;
    if (!has_pos || !has_neg)
      throw std::invalid_argument(
          "train_fold: validation split lacks a class; sensitivity or "
          "specificity undefined");
  }

  Rng init_rng = Rng::derive(cfg.seed, 0x1417, stream_tag);
  ModelParams params = init_params(cfg.model, init_rng);
  AdamOptimizer opt(cfg.learning_rate);

  struct Bag { const Patient* patient; const Slide* slide; };
  std::vector<Bag> bags;
  for (const auto* p : train_patients)
    for (const auto& s : p->slides) bags.push_back({p, &s});

  TrainResult result;
  int since_best = 0;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    Rng shuffle_rng = Rng::derive(cfg.seed, 0x5Eff, stream_tag,
                                  static_cast<std::uint64_t>(epoch));
    shuffle_rng.shuffle(bags);
    for (const auto& bag : bags) {
      Tape tape;
      ModelVars vars = register_params(tape, params);
      Slide subset = view ? view(*bag.slide) : *bag.slide;
      auto score = slide_forward(tape, subset, vars, cfg.model);
      if (!score) continue;  // slide inapplicable under this view
      Var loss = tape.bce_with_logit(score->logit, bag.patient->label,
                                     cfg.positive_class_weight);
      tape.backward(loss);
      std::vector<Var> pv = param_vars(vars);
      std::vector<Tensor> grads;
      grads.reserve(pv.size());
      for (Var v : pv) grads.push_back(tape.grad(v));
      opt.step(params.tensors(), grads);
    }

    // validation at patient level with the final decision rule
    std::vector<double> probs;
    std::vector<int> labels;
    for (const auto* p : val_patients) {
      auto prob = patient_probability(*p, params, cfg.model, view);
      if (!prob) continue;
      probs.push_back(*prob);
      labels.push_back(p->label);
    }
    double sens = 0, spec = 0;
    if (!probs.empty()) {
      ConfusionMetrics m = confusion_metrics(probs, labels, cfg.tau);
      sens = m.sensitivity.value_or(0);
      spec = m.specificity.value_or(0);
    }
    double s = clinical_score(sens, spec);
    result.trace.push_back({epoch, sens, spec, s});

    if (s > result.best_score) {  // strict: earliest epoch wins ties
      result.best_score = s;
      result.best_epoch = epoch;
      result.best_params = params;
      since_best = 0;
    } else if (++since_best >= cfg.patience) {
      break;
    }
  }
  if (result.best_epoch < 0) {
    result.best_params = params;
    result.best_epoch = 0;
  }
  return result;
}

// ---- cross-validation harness -----------------------------------------

struct FoldMetrics {
  double accuracy = 0;
  std::optional<double> sensitivity, specificity, auc;
};

struct FoldReport {
  int fold = 0;
  FoldSplit split;
  FoldMetrics test;
  std::vector<EpochEntry> trace;
  int best_epoch = -1;
  std::vector<PatientScore> predictions;  // test patients
  ModelParams best_params;
};

struct CvReport {
  std::vector<FoldReport> folds;
  double mean_auc = 0, std_auc = 0;
  double mean_accuracy = 0, std_accuracy = 0;
  double mean_sensitivity = 0, std_sensitivity = 0;
  double mean_specificity = 0, std_specificity = 0;
};

inline FoldMetrics evaluate_metrics(const std::vector<PatientScore>& preds,
                                    double tau) {
  FoldMetrics m;
  std::vector<double> probs;
  std::vector<int> labels;
  for (const auto& p : preds) {
    probs.push_back(p.probability);
    labels.push_back(p.label);
  }
  ConfusionMetrics cm = confusion_metrics(probs, labels, tau);
  m.accuracy = cm.accuracy;
  m.sensitivity = cm.sensitivity;
  m.specificity = cm.specificity;
  if (cm.sensitivity && cm.specificity) m.auc = roc_auc(probs, labels);
  return m;
}

inline void aggregate_cv(CvReport& report) {
  auto mean_std = [](const std::vector<double>& xs, double& mean, double& sd) {
    if (xs.empty()) { mean = sd = 0; return; }
    mean = 0;
    for (double x : xs) mean += x;
    mean /= double(xs.size());
    sd = 0;
    for (double x : xs) sd += (x - mean) * (x - mean);
    sd = xs.size() > 1 ? std::sqrt(sd / double(xs.size() - 1)) : 0;
  };
  std::vector<double> aucs, accs, sens, specs;
  for (const auto& f : report.folds) {
    accs.push_back(f.test.accuracy);
    if (f.test.auc) aucs.push_back(*f.test.auc);
    if (f.test.sensitivity) sens.push_back(*f.test.sensitivity);
    if (f.test.specificity) specs.push_back(*f.test.specificity);
  }
  mean_std(aucs, report.mean_auc, report.std_auc);
  mean_std(accs, report.mean_accuracy, report.std_accuracy);
  mean_std(sens, report.mean_sensitivity, report.std_sensitivity);
  mean_std(specs, report.mean_specificity, report.std_specificity);
}

inline CvReport run_cv(const Cohort& cohort, const TrainConfig& cfg,
                       const std::function<Slide(const Slide&)>& view = nullptr,
                       std::uint64_t stream_tag = 0,
                       const std::vector<FoldSplit>* fixed_folds = nullptr,
                       int workers = 1) {
  cfg.validate();
  std::vector<FoldSplit> folds =
      fixed_folds ? *fixed_folds : make_folds(cohort, cfg.k_folds, cfg.seed);

  auto collect = [&](const std::vector<std::string>& ids) {
    std::vector<const Patient*> out;
    for (const auto& id : ids) out.push_back(&find_patient(cohort, id));
    return out;
  };

  // folds are independent jobs with fixed per-fold RNG streams, so the
  // result does not depend on the worker count
  std::vector<TrainResult> results(folds.size());
  std::vector<std::exception_ptr> errors(folds.size());
  auto job = [&](std::size_t f) {
    try {
      results[f] = train_fold(collect(folds[f].train),
                              collect(folds[f].validation), cfg,
                              stream_tag * 1000 + f, view);
    } catch (...) {
      errors[f] = std::current_exception();
    }
  };
  if (workers > 1) {
    std::vector<std::thread> pool;
    std::atomic<std::size_t> next{0};
    for (int w = 0; w < workers; ++w)
      pool.emplace_back([&] {
        for (std::size_t f = next++; f < folds.size(); f = next++) job(f);
      });
    for (auto& t : pool) t.join();
  } else {
    for (std::size_t f = 0; f < folds.size(); ++f) job(f);
  }
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);

  CvReport report;
  for (std::size_t f = 0; f < folds.size(); ++f) {
    TrainResult& tr = results[f];
    FoldReport fr;
    fr.fold = static_cast<int>(f);
    fr.split = folds[f];
    fr.trace = tr.trace;
    fr.best_epoch = tr.best_epoch;
    for (const auto& id : folds[f].test) {
      const Patient& p = find_patient(cohort, id);
      auto prob = patient_probability(p, tr.best_params, cfg.model, view);
      if (!prob) continue;  // inapplicable patient under this view
      fr.predictions.push_back({p.patient_id, *prob, p.label});
    }
    if (!fr.predictions.empty())
      fr.test = evaluate_metrics(fr.predictions, cfg.tau);
    fr.best_params = std::move(tr.best_params);
    report.folds.push_back(std::move(fr));
  }
  aggregate_cv(report);
  return report;
}

}  // namespace celleco
