#pragma once

// Subgroup metric tables and false-negative bias comparisons over pooled
// test-split predictions.

#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "celleco/cohort.hpp"
#include "celleco/stats.hpp"

namespace celleco {

struct PatientScore {
  std::string patient_id;
  double probability = 0;
  int label = 0;
};

struct SubgroupRow {
  std::string value;
  std::size_t n = 0;
  double accuracy = 0;
  std::optional<double> sensitivity, specificity, auc;
};

inline std::string subgroup_value_str(const nlohmann::json& v) {
  if (v.is_string()) return v.get<std::string>();
  return v.dump();
}

inline std::vector<SubgroupRow> subgroup_report(
    const std::vector<PatientScore>& predictions, const Cohort& cohort,
    const std::string& key, double tau) {
  std::map<std::string, std::vector<std::size_t>> groups;
  for (std::size_t i = 0; i < predictions.size(); ++i) {
    const Patient& p = find_patient(cohort, predictions[i].patient_id);
    auto it = p.subgroups.find(key);
    if (it == p.subgroups.end() || it->second.is_null()) continue;
    groups[subgroup_value_str(it->second)].push_back(i);
  }
  if (groups.empty())
    throw StatError("subgroup_report: no patient has subgroup key '" + key + "'");
  std::vector<SubgroupRow> rows;
  for (const auto& [value, idx] : groups) {
    SubgroupRow row;
    row.value = value;
    row.n = idx.size();
    std::vector<double> probs;
    std::vector<int> labels;
    for (std::size_t i : idx) {
      probs.push_back(predictions[i].probability);
      labels.push_back(predictions[i].label);
    }
    ConfusionMetrics m = confusion_metrics(probs, labels, tau);
    row.accuracy = m.accuracy;
    row.sensitivity = m.sensitivity;
    row.specificity = m.specificity;
    bool both = m.sensitivity.has_value() && m.specificity.has_value();
    if (both) row.auc = roc_auc(probs, labels);
    rows.push_back(std::move(row));
  }
  return rows;
}

struct BiasRow {
  std::string comparison;
  std::string group_a, group_b;
  std::size_t recurred_a = 0, recurred_b = 0;   // recurrence cases per group
  std::optional<double> fn_rate_a, fn_rate_b;   // false negatives / recurred
  std::optional<double> chi_square, p_value;
  std::string note;  // set when a stratum is empty
};

namespace detail {

inline BiasRow bias_compare(
    const std::string& name, const std::string& label_a,
    const std::string& label_b, const std::vector<PatientScore>& preds,
    const Cohort& cohort, double tau,
    const std::function<std::optional<bool>(const Patient&)>& in_group_a) {
  BiasRow row;
  row.comparison = name;
  row.group_a = label_a;
  row.group_b = label_b;
  // counts over recurrence cases only: FN = recurred but predicted low risk
  double fn_a = 0, ok_a = 0, fn_b = 0, ok_b = 0;
  for (const auto& ps : preds) {
    if (!ps.label) continue;
    const Patient& p = find_patient(cohort, ps.patient_id);
    auto side = in_group_a(p);
    if (!side.has_value()) continue;
    bool fn = ps.probability < tau;
    if (*side) (fn ? fn_a : ok_a)++;
    else (fn ? fn_b : ok_b)++;
  }
  row.recurred_a = std::size_t(fn_a + ok_a);
  row.recurred_b = std::size_t(fn_b + ok_b);
  if (row.recurred_a > 0) row.fn_rate_a = fn_a / double(row.recurred_a);
  if (row.recurred_b > 0) row.fn_rate_b = fn_b / double(row.recurred_b);
  if (row.recurred_a == 0 || row.recurred_b == 0) {
    row.note = "empty stratum";
    return row;
  }
  try {
    auto res = chi_square_2x2({{{fn_a, ok_a}, {fn_b, ok_b}}});
    row.chi_square = res.stat;
    row.p_value = res.p_value;
  } catch (const StatError& e) {
    row.note = e.what();
  }
  return row;
}

inline std::optional<std::string> subgroup_string(const Patient& p,
                                                  const std::string& key) {
  auto it = p.subgroups.find(key);
  if (it == p.subgroups.end() || it->second.is_null()) return std::nullopt;
  return subgroup_value_str(it->second);
}

inline std::optional<double> subgroup_number(const Patient& p,
                                             const std::string& key) {
  auto it = p.subgroups.find(key);
  if (it == p.subgroups.end() || !it->second.is_number()) return std::nullopt;
  return it->second.get<double>();
}

}  // namespace detail

// The five configured dichotomies: sex, race pair, age median split,
// late-recurrence window (40-59 months), early recurrence with early death.
inline std::vector<BiasRow> bias_report(const std::vector<PatientScore>& preds,
                                        const Cohort& cohort, double tau) {
  std::vector<BiasRow> rows;

  rows.push_back(detail::bias_compare(
      "sex", "female", "male", preds, cohort, tau,
      [](const Patient& p) -> std::optional<bool> {
        auto s = detail::subgroup_string(p, "sex");
        if (!s) return std::nullopt;
        if (*s == "female" || *s == "F") return true;
        if (*s == "male" || *s == "M") return false;
        return std::nullopt;
      }));

  // race: compare the two most frequent values among recurred patients
  std::map<std::string, std::size_t> race_counts;
  for (const auto& ps : preds) {
    if (!ps.label) continue;
    auto s = detail::subgroup_string(find_patient(cohort, ps.patient_id), "race");
    if (s) race_counts[*s]++;
  }
  std::vector<std::pair<std::size_t, std::string>> ranked;
  for (const auto& [k, v] : race_counts) ranked.push_back({v, k});
  std::sort(ranked.rbegin(), ranked.rend());
  if (ranked.size() >= 2) {
    std::string ra = ranked[0].second, rb = ranked[1].second;
    rows.push_back(detail::bias_compare(
        "race", ra, rb, preds, cohort, tau,
        [ra, rb](const Patient& p) -> std::optional<bool> {
          auto s = detail::subgroup_string(p, "race");
          if (!s) return std::nullopt;
          if (*s == ra) return true;
          if (*s == rb) return false;
          return std::nullopt;
        }));
  } else {
    BiasRow row;
    row.comparison = "race";
    row.note = "fewer than two race groups among recurred patients";
    rows.push_back(row);
  }

  // age: median split over patients with a numeric age
  std::vector<double> ages;
  for (const auto& ps : preds) {
    auto a = detail::subgroup_number(find_patient(cohort, ps.patient_id), "age");
    if (a) ages.push_back(*a);
  }
  if (!ages.empty()) {
    std::sort(ages.begin(), ages.end());
    double median = ages[ages.size() / 2];
    rows.push_back(detail::bias_compare(
        "age_median_split", ">=median", "<median", preds, cohort, tau,
        [median](const Patient& p) -> std::optional<bool> {
          auto a = detail::subgroup_number(p, "age");
          if (!a) return std::nullopt;
          return *a >= median;
        }));
  } else {
    BiasRow row;
    row.comparison = "age_median_split";
    row.note = "no numeric age values";
    rows.push_back(row);
  }

  rows.push_back(detail::bias_compare(
      "late_recurrence_40_59", "recurred 40-59mo", "recurred earlier", preds,
      cohort, tau, [](const Patient& p) -> std::optional<bool> {
        if (!p.event) return std::nullopt;
        return p.time_months >= 40 && p.time_months < 60;
      }));

  rows.push_back(detail::bias_compare(
      "early_recurrence_early_death", "recurred<24mo,death<60mo", "other recurred",
      preds, cohort, tau, [](const Patient& p) -> std::optional<bool> {
        if (!p.event) return std::nullopt;
        auto death = detail::subgroup_number(p, "death_months");
        bool early = p.time_months < 24 && death && *death < 60;
        return early;
      }));

  return rows;
}

}  // namespace celleco
