#pragma once

// Classification and survival statistics: confusion metrics, rank-based
// ROC-AUC, Kaplan-Meier, two-group log-rank, univariable Cox (Efron ties),
// Harrell's C-index, and Yates-corrected 2x2 chi-square.

#include <algorithm>
#include <array>
#include <cmath>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

namespace celleco {

struct StatError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct SurvivalRecord {
  double time = 0;   // months, > 0
  int event = 0;     // 1 = recurrence observed, 0 = censored
  double covariate = 0;  // binary group or continuous score
};

// ---- classification ----------------------------------------------------

struct ConfusionMetrics {
  double accuracy = 0;
  std::optional<double> sensitivity;  // undefined without positives
  std::optional<double> specificity;  // undefined without negatives
};

inline ConfusionMetrics confusion_metrics(const std::vector<double>& probs,
                                          const std::vector<int>& labels,
                                          double tau) {
  if (probs.size() != labels.size() || probs.empty())
    throw StatError("confusion_metrics: need matching non-empty inputs");
  std::size_t tp = 0, tn = 0, fp = 0, fn = 0;
  for (std::size_t i = 0; i < probs.size(); ++i) {
    bool pred = probs[i] >= tau;
    if (labels[i]) (pred ? tp : fn)++;
    else (pred ? fp : tn)++;
  }
  ConfusionMetrics m;
  m.accuracy = double(tp + tn) / double(probs.size());
  if (tp + fn > 0) m.sensitivity = double(tp) / double(tp + fn);
  if (tn + fp > 0) m.specificity = double(tn) / double(tn + fp);
  return m;
}

// Mann-Whitney AUC via midranks; exact for ties.
inline double roc_auc(const std::vector<double>& scores,
                      const std::vector<int>& labels) {
  if (scores.size() != labels.size() || scores.empty())
    throw StatError("roc_auc: need matching non-empty inputs");
  std::size_t n = scores.size();
  std::vector<std::size_t> idx(n);
  for (std::size_t i = 0; i < n; ++i) idx[i] = i;
  std::sort(idx.begin(), idx.end(),
            [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
  double rank_sum_pos = 0;
  std::size_t n_pos = 0, n_neg = 0;
  std::size_t i = 0;
  while (i < n) {
    std::size_t j = i;
    while (j < n && scores[idx[j]] == scores[idx[i]]) ++j;
    double midrank = 0.5 * double(i + 1 + j);  // average of ranks i+1..j
    for (std::size_t k = i; k < j; ++k)
      if (labels[idx[k]]) rank_sum_pos += midrank;
    i = j;
  }
  for (std::size_t k = 0; k < n; ++k) (labels[k] ? n_pos : n_neg)++;
  if (n_pos == 0 || n_neg == 0)
    throw StatError("roc_auc: both classes required");
  return (rank_sum_pos - 0.5 * double(n_pos) * double(n_pos + 1)) /
         (double(n_pos) * double(n_neg));
}

// ---- chi-square --------------------------------------------------------

// Survival function of chi-square with 1 df: P(X > x) = erfc(sqrt(x/2)).
inline double chisq1_sf(double x) {
  if (x <= 0) return 1.0;
  return std::erfc(std::sqrt(x / 2.0));
}

struct ChiSquareResult {
  double stat = 0;
  double p_value = 1;
};

// Pearson with Yates continuity correction; table is {{a,b},{c,d}}.
inline ChiSquareResult chi_square_2x2(const std::array<std::array<double, 2>, 2>& t) {
  double a = t[0][0], b = t[0][1], c = t[1][0], d = t[1][1];
  double n = a + b + c + d;
  double r1 = a + b, r2 = c + d, c1 = a + c, c2 = b + d;
  if (r1 <= 0 || r2 <= 0 || c1 <= 0 || c2 <= 0)
    throw StatError("chi_square_2x2: zero marginal");
  double num = std::abs(a * d - b * c) - n / 2.0;
  if (num < 0) num = 0;
  double stat = n * num * num / (r1 * r2 * c1 * c2);
  return {stat, chisq1_sf(stat)};
}

// ---- Kaplan-Meier ------------------------------------------------------

struct KmCurve {
  std::vector<double> times;        // distinct event times, ascending
  std::vector<double> survival;     // product-limit estimate after each time
  std::vector<std::size_t> at_risk;
  std::vector<std::size_t> events;
  std::vector<double> greenwood_var;
};

inline KmCurve km_estimate(const std::vector<SurvivalRecord>& records) {
  if (records.empty()) throw StatError("km_estimate: empty input");
  std::vector<SurvivalRecord> rs = records;
  std::sort(rs.begin(), rs.end(),
            [](const auto& a, const auto& b) { return a.time < b.time; });
  KmCurve curve;
  double s = 1.0, gw = 0.0;
  std::size_t i = 0, n = rs.size();
  while (i < n) {
    double t = rs[i].time;
    std::size_t d = 0, removed = 0;
    std::size_t j = i;
    while (j < n && rs[j].time == t) {
      d += static_cast<std::size_t>(rs[j].event);
      ++removed, ++j;
    }
    std::size_t risk = n - i;
    if (d > 0) {
      s *= 1.0 - double(d) / double(risk);
      if (risk > d) gw += double(d) / (double(risk) * double(risk - d));
      curve.times.push_back(t);
      curve.survival.push_back(s);
      curve.at_risk.push_back(risk);
      curve.events.push_back(d);
      curve.greenwood_var.push_back(s * s * gw);
    }
    i += removed;
  }
  return curve;
}

// ---- log-rank ----------------------------------------------------------

struct LogrankResult {
  double stat = 0;
  double p_value = 1;
};

inline LogrankResult logrank(const std::vector<SurvivalRecord>& a,
                             const std::vector<SurvivalRecord>& b) {
  if (a.empty() || b.empty()) throw StatError("logrank: both groups required");
  std::size_t total_events = 0;
  for (const auto& r : a) total_events += r.event;
  for (const auto& r : b) total_events += r.event;
  if (total_events == 0)
    throw StatError("logrank: no events in either group");

  struct Item { double time; int event; int group; };
  std::vector<Item> items;
  for (const auto& r : a) items.push_back({r.time, r.event, 0});
  for (const auto& r : b) items.push_back({r.time, r.event, 1});
  std::sort(items.begin(), items.end(),
            [](const Item& x, const Item& y) { return x.time < y.time; });

  double o_minus_e = 0, var = 0;
  std::size_t nA = a.size(), nB = b.size();
  std::size_t i = 0;
  while (i < items.size()) {
    double t = items[i].time;
    std::size_t dA = 0, dB = 0, remA = 0, remB = 0;
    std::size_t j = i;
    while (j < items.size() && items[j].time == t) {
      if (items[j].group == 0) { dA += items[j].event; ++remA; }
      else { dB += items[j].event; ++remB; }
      ++j;
    }
    double n = double(nA + nB), d = double(dA + dB);
    if (d > 0 && n > 1) {
      double eA = double(nA) * d / n;
      o_minus_e += double(dA) - eA;
      var += double(nA) * double(nB) * d * (n - d) / (n * n * (n - 1.0));
    }
    nA -= remA;
    nB -= remB;
    i = j;
  }
  if (var <= 0) throw StatError("logrank: zero variance");
  double stat = o_minus_e * o_minus_e / var;
  return {stat, chisq1_sf(stat)};
}

// ---- Cox proportional hazards (univariable, binary group, Efron) -------

struct CoxFit {
  double beta = 0;
  double se = 0;
  double hazard_ratio = 1;
  double ci_low = 0, ci_high = 0;
  double p_value = 1;
  bool converged = false;
  std::string diagnostic;
};

namespace detail {

// loglik, score, information of the Efron partial likelihood at beta.
struct CoxDerivs { double loglik, score, info; };

inline CoxDerivs cox_derivs(const std::vector<SurvivalRecord>& rs, double beta) {
  // sort descending by time so the risk set accumulates as we scan
  std::vector<std::size_t> idx(rs.size());
  for (std::size_t i = 0; i < rs.size(); ++i) idx[i] = i;
  std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) {
    return rs[a].time > rs[b].time;
  });
  CoxDerivs d{0, 0, 0};
  double S0 = 0, S1 = 0;  // risk-set sums of exp(beta g) and g exp(beta g)
  std::size_t i = 0, n = idx.size();
  while (i < n) {
    double t = rs[idx[i]].time;
    double s0d = 0, s1d = 0, sum_g = 0;
    std::size_t nd = 0;
    std::size_t j = i;
    while (j < n && rs[idx[j]].time == t) {
      double g = rs[idx[j]].covariate;
      double w = std::exp(beta * g);
      S0 += w;
      S1 += g * w;
      if (rs[idx[j]].event) {
        s0d += w;
        s1d += g * w;
        sum_g += g;
        ++nd;
      }
      ++j;
    }
    if (nd > 0) {
      d.loglik += beta * sum_g;
      for (std::size_t l = 0; l < nd; ++l) {
        double frac = double(l) / double(nd);
        double phi0 = S0 - frac * s0d;
        double phi1 = S1 - frac * s1d;
        // binary covariate: g^2 = g, so the S2 sums coincide with S1
        double phi2 = phi1;
        d.loglik -= std::log(phi0);
        d.score -= phi1 / phi0;
        d.info += phi2 / phi0 - (phi1 / phi0) * (phi1 / phi0);
      }
      d.score += sum_g;
    }
    i = j;
  }
  return d;
}

}  // namespace detail

inline CoxFit cox_univariable(const std::vector<SurvivalRecord>& records) {
  std::size_t events0 = 0, events1 = 0;
  for (const auto& r : records) {
    if (r.covariate != 0 && r.covariate != 1)
      throw StatError("cox_univariable: covariate must be binary 0/1");
    if (r.event) (r.covariate > 0.5 ? events1 : events0)++;
  }
  CoxFit fit;
  if (events0 == 0 || events1 == 0) {
    fit.diagnostic = "monotone likelihood: all events in one group, beta diverges";
    return fit;
  }

  double beta = 0;
  auto d = detail::cox_derivs(records, beta);
  double last_step = 1.0;
  // stop on a vanishing score or a vanishing step: near the optimum of a
  // large likelihood the per-step loglik gain drops below rounding noise
  // while the score still carries O(n * eps * |loglik|) jitter
  for (int iter = 0;
       iter < 100 && std::abs(d.score) >= 1e-8 && std::abs(last_step) >= 1e-10;
       ++iter) {
    double step = d.info > 1e-12 ? d.score / d.info : (d.score > 0 ? 1.0 : -1.0);
    step = std::clamp(step, -5.0, 5.0);
    // halve until the partial likelihood does not decrease
    double trial = beta + step;
    auto dt = detail::cox_derivs(records, trial);
    int halves = 0;
    while (dt.loglik < d.loglik - 1e-12 && halves < 40) {
      step *= 0.5;
      trial = beta + step;
      dt = detail::cox_derivs(records, trial);
      ++halves;
    }
    if (halves == 40) {
      // Newton stalled; bisection on the score (monotone decreasing in beta)
      double lo = beta - 10, hi = beta + 10;
      for (int k = 0; k < 200; ++k) {
        double mid = 0.5 * (lo + hi);
        if (detail::cox_derivs(records, mid).score > 0) lo = mid;
        else hi = mid;
      }
      trial = 0.5 * (lo + hi);
      dt = detail::cox_derivs(records, trial);
    }
    last_step = trial - beta;
    beta = trial;
    d = dt;
  }
  // accept when the residual in beta units, |score| / info, is negligible
  double score_tol = 1e-7 * std::max(1.0, d.info);
  if (std::abs(d.score) >= score_tol || std::abs(beta) > 50) {
    fit.beta = beta;
    fit.diagnostic = "did not converge (|score| = " + std::to_string(std::abs(d.score)) + ")";
    return fit;
  }
  fit.beta = beta;
  fit.se = 1.0 / std::sqrt(d.info);
  fit.hazard_ratio = std::exp(beta);
  fit.ci_low = std::exp(beta - 1.96 * fit.se);
  fit.ci_high = std::exp(beta + 1.96 * fit.se);
  double z = beta / fit.se;
  fit.p_value = chisq1_sf(z * z);
  fit.converged = true;
  return fit;
}

// ---- Harrell's C-index -------------------------------------------------

// Comparable pair: the earlier time has an observed event (strictly earlier).
// Higher score = higher risk; concordant when the earlier-event record has
// the higher score; tied scores count 0.5.
inline double concordance_index(const std::vector<double>& scores,
                                const std::vector<SurvivalRecord>& records) {
  if (scores.size() != records.size())
    throw StatError("concordance_index: length mismatch");
  std::size_t n = records.size();
  // sort by time ascending; scan with score-rank Fenwick trees so the
  // counting route differs from the naive pair loop used as oracle
  std::vector<double> sorted_scores = scores;
  std::sort(sorted_scores.begin(), sorted_scores.end());
  sorted_scores.erase(std::unique(sorted_scores.begin(), sorted_scores.end()),
                      sorted_scores.end());
  auto rank_of = [&](double s) {
    return std::size_t(std::lower_bound(sorted_scores.begin(),
                                        sorted_scores.end(), s) -
                       sorted_scores.begin());
  };
  std::size_t m = sorted_scores.size();
  std::vector<double> bit_lower(m + 1, 0), bit_equal(m + 1, 0);
  double total_in_bit = 0;
  auto bit_add = [&](std::vector<double>& bit, std::size_t r, double v) {
    for (std::size_t i = r + 1; i <= m; i += i & (~i + 1)) bit[i] += v;
  };
  auto bit_sum = [&](const std::vector<double>& bit, std::size_t r) {
    double s = 0;  // sum of ranks < r
    for (std::size_t i = r; i > 0; i -= i & (~i + 1)) s += bit[i];
    return s;
  };

  std::vector<std::size_t> idx(n);
  for (std::size_t i = 0; i < n; ++i) idx[i] = i;
  std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) {
    return records[a].time > records[b].time;
  });  // descending: BIT holds records with strictly later times

  double concordant = 0, comparable = 0;
  std::size_t i = 0;
  while (i < n) {
    double t = records[idx[i]].time;
    std::size_t j = i;
    while (j < n && records[idx[j]].time == t) ++j;
    // records in the BIT all have time > t; each event at t forms pairs
    for (std::size_t k = i; k < j; ++k) {
      if (!records[idx[k]].event) continue;
      double in_bit = total_in_bit;
      if (in_bit == 0) continue;
      std::size_t r = rank_of(scores[idx[k]]);
      double lower = bit_sum(bit_lower, r);              // later-time, lower score
      double equal_cnt = bit_sum(bit_equal, r + 1) - bit_sum(bit_equal, r);
      comparable += in_bit;
      concordant += lower + 0.5 * equal_cnt;
    }
    for (std::size_t k = i; k < j; ++k) {
      std::size_t r = rank_of(scores[idx[k]]);
      bit_add(bit_lower, r, 1);
      bit_add(bit_equal, r, 1);
      total_in_bit += 1;
    }
    i = j;
  }
  if (comparable == 0)
    throw StatError("concordance_index: no comparable pairs");
  return concordant / comparable;
}

}  // namespace celleco
