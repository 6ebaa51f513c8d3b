#pragma once

// Seeded synthetic cohort generator with controllable planted signals:
//   cell_shift            mean offset on one cell type's embeddings
//   spatial_pattern       two cell types co-located within a radius for
//                         positive patients, dispersed for negatives
//   patch_cell_interaction label carried only by the product of a patch
//                         direction and a cell direction (needs fusion)
//   multi_celltype        independent weak signals in distinct cell types
// Event times are exponential with label-scaled hazard; censoring uniform.

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "celleco/cohort.hpp"
#include "celleco/rng.hpp"

namespace celleco {

enum class SignalKind {
  none,
  cell_shift,
  spatial_pattern,
  patch_cell_interaction,
  multi_celltype,
};

inline const char* signal_kind_name(SignalKind k) {
  switch (k) {
    case SignalKind::none: return "none";
    case SignalKind::cell_shift: return "cell_shift";
    case SignalKind::spatial_pattern: return "spatial_pattern";
    case SignalKind::patch_cell_interaction: return "patch_cell_interaction";
    case SignalKind::multi_celltype: return "multi_celltype";
  }
  return "?";
}

inline SignalKind signal_kind_from_name(const std::string& s) {
  for (SignalKind k : {SignalKind::none, SignalKind::cell_shift,
                       SignalKind::spatial_pattern,
                       SignalKind::patch_cell_interaction,
                       SignalKind::multi_celltype})
    if (s == signal_kind_name(k)) return k;
  throw std::invalid_argument("unknown signal kind: " + s);
}

struct SynthConfig {
  std::size_t n_patients = 60;
  std::size_t patches_min = 4, patches_max = 8;
  std::size_t cells_min = 4, cells_max = 10;
  double positive_fraction = 0.381;
  std::uint32_t d_patch = 16, d_cell = 16;
  SignalKind signal_kind = SignalKind::cell_shift;
  double signal_strength = 2.0;
  double censoring_rate = 0.15;
  std::uint64_t seed = 1;

  void validate() const {
    if (positive_fraction < 0 || positive_fraction > 1 ||
        censoring_rate < 0 || censoring_rate > 1)
      throw std::invalid_argument("synth: fractions must be in [0,1]");
    if (d_patch < 2 || d_cell < 2)
      throw std::invalid_argument("synth: dimensions must be >= 2");
    if (patches_min == 0 || patches_min > patches_max ||
        cells_min == 0 || cells_min > cells_max)
      throw std::invalid_argument("synth: infeasible patch/cell ranges");
    if (n_patients == 0) throw std::invalid_argument("synth: zero patients");
  }
};

struct PlantedTruth {
  SignalKind kind = SignalKind::none;
  double strength = 0;
  std::vector<double> cell_direction;             // cell_shift / interaction
  std::vector<double> patch_direction;            // interaction
  std::vector<std::vector<double>> type_directions;  // multi_celltype
  double radius = 0;                              // spatial_pattern
  CellType target_type = CellType::neoplastic;    // cell_shift
  CellType pair_type_a = CellType::stromal;       // spatial_pattern
  CellType pair_type_b = CellType::inflammatory;

  nlohmann::json to_json() const {
    nlohmann::json j;
    j["kind"] = signal_kind_name(kind);
    j["strength"] = strength;
    j["cell_direction"] = cell_direction;
    j["patch_direction"] = patch_direction;
    j["type_directions"] = type_directions;
    j["radius"] = radius;
    j["target_type"] = cell_type_name(target_type);
    j["pair_types"] = {cell_type_name(pair_type_a), cell_type_name(pair_type_b)};
    return j;
  }
};

namespace detail {

inline std::vector<double> unit_direction(Rng& rng, std::size_t d) {
  std::vector<double> v(d);
  double norm = 0;
  for (auto& x : v) { x = rng.normal(); norm += x * x; }
  norm = std::sqrt(norm);
  for (auto& x : v) x /= norm;
  return v;
}

}  // namespace detail

inline PlantedTruth planted_truth(const SynthConfig& cfg) {
  cfg.validate();
  Rng rng = Rng::derive(cfg.seed, 0x51C);
  PlantedTruth t;
  t.kind = cfg.signal_kind;
  t.strength = cfg.signal_strength;
  switch (cfg.signal_kind) {
    case SignalKind::none:
      break;
    case SignalKind::cell_shift:
      t.cell_direction = detail::unit_direction(rng, cfg.d_cell);
      break;
    case SignalKind::spatial_pattern:
      t.radius = 0.15;
      break;
    case SignalKind::patch_cell_interaction:
      t.cell_direction = detail::unit_direction(rng, cfg.d_cell);
      t.patch_direction = detail::unit_direction(rng, cfg.d_patch);
      break;
    case SignalKind::multi_celltype:
      for (int k = 0; k < kNumCellTypes; ++k)
        t.type_directions.push_back(detail::unit_direction(rng, cfg.d_cell));
      break;
  }
  return t;
}

inline Cohort generate_cohort(const SynthConfig& cfg) {
  cfg.validate();
  PlantedTruth truth = planted_truth(cfg);
  SignalKind kind =
      cfg.signal_strength == 0 ? SignalKind::none : cfg.signal_kind;

  Cohort cohort;
  cohort.d_patch = cfg.d_patch;
  cohort.d_cell = cfg.d_cell;

  // Gaussian base embeddings around non-zero means: encoder features are not
  // centered, and the fusion outer product needs a mean component in the
  // patch embedding to carry cell-level signal linearly. Cell types get their
  // own mean offsets (label-independent).
  Rng base_rng = Rng::derive(cfg.seed, 0xBA5E);
  std::vector<double> patch_mean(cfg.d_patch);
  for (auto& v : patch_mean) v = 1.0 + 0.25 * base_rng.normal();
  std::vector<std::vector<double>> type_mean(kNumCellTypes,
                                             std::vector<double>(cfg.d_cell));
  for (auto& tm : type_mean)
    for (auto& v : tm) v = 0.5 * base_rng.normal();

  Rng rng = Rng::derive(cfg.seed, 0xC0410);
  for (std::size_t i = 0; i < cfg.n_patients; ++i) {
    Patient pt;
    pt.patient_id = "P" + std::to_string(i);
    pt.label = rng.bernoulli(cfg.positive_fraction) ? 1 : 0;

    // median two slides per patient
    double u = rng.uniform();
    std::size_t n_slides = u < 0.25 ? 1 : (u < 0.75 ? 2 : 3);

    // label-coupled event times so HR and C-index have clean planted values
    if (pt.label) {
      double t = 6.0 + rng.exponential(1.0 / 18.0);
      t = std::min(t, 59.0);
      if (rng.bernoulli(cfg.censoring_rate)) {
        pt.event = 0;
        pt.time_months = t * rng.uniform(0.3, 1.0);
      } else {
        pt.event = 1;
        pt.time_months = t;
      }
    } else {
      pt.event = 0;
      pt.time_months = rng.uniform(55.0, 75.0);
    }

    // demographic subgroups for the report machinery
    pt.subgroups["sex"] = rng.bernoulli(0.55) ? "female" : "male";
    pt.subgroups["race"] = rng.bernoulli(0.8) ? "white" : "african_american";
    pt.subgroups["age"] = std::floor(rng.uniform(42.0, 86.0));
    pt.subgroups["stage"] = rng.bernoulli(0.7) ? "I" : (rng.bernoulli(0.7) ? "II" : "III");
    pt.subgroups["grade_old"] = "G" + std::to_string(1 + int(rng.below(3)));
    pt.subgroups["grade_new"] = "G" + std::to_string(1 + int(rng.below(3)));
    if (pt.event && rng.bernoulli(0.5))
      pt.subgroups["death_months"] = pt.time_months + rng.uniform(2.0, 40.0);

    // per-type signal coefficients for multi_celltype: weak and noisy so each
    // single-type model is imperfect and averaging helps
    std::vector<double> type_coeff(kNumCellTypes, 0.0);
    if (kind == SignalKind::multi_celltype)
      for (int k = 0; k < kNumCellTypes; ++k)
        type_coeff[k] = (pt.label ? cfg.signal_strength : 0.0) +
                        rng.normal(0.0, 0.6 * cfg.signal_strength);

    for (std::size_t s = 0; s < n_slides; ++s) {
      Slide slide;
      slide.slide_id = pt.patient_id + "_S" + std::to_string(s);
      std::size_t n_patches =
          cfg.patches_min + rng.below(cfg.patches_max - cfg.patches_min + 1);
      for (std::size_t p = 0; p < n_patches; ++p) {
        PatchRecord patch;
        patch.patch_id = static_cast<std::uint32_t>(p);
        patch.origin_x = float(p % 8);
        patch.origin_y = float(p / 8);
        patch.embedding.resize(cfg.d_patch);
        for (std::size_t j = 0; j < cfg.d_patch; ++j)
          patch.embedding[j] = float(patch_mean[j] + rng.normal());

        double patch_sign = rng.bernoulli(0.5) ? 1.0 : -1.0;
        if (kind == SignalKind::patch_cell_interaction)
          for (std::size_t j = 0; j < cfg.d_patch; ++j)
            patch.embedding[j] += float(patch_sign * cfg.signal_strength *
                                        truth.patch_direction[j]);

        std::size_t n_cells =
            cfg.cells_min + rng.below(cfg.cells_max - cfg.cells_min + 1);
        double anchor_x = rng.uniform(0.2, 0.8);
        double anchor_y = rng.uniform(0.2, 0.8);
        for (std::size_t c = 0; c < n_cells; ++c) {
          CellRecord cell;
          cell.cell_type = static_cast<CellType>(rng.below(kNumCellTypes));
          cell.centroid_x = float(rng.uniform());
          cell.centroid_y = float(rng.uniform());
          if (kind == SignalKind::spatial_pattern && pt.label &&
              (cell.cell_type == truth.pair_type_a ||
               cell.cell_type == truth.pair_type_b)) {
            cell.centroid_x = float(std::clamp(
                anchor_x + rng.uniform(-0.5, 0.5) * truth.radius, 0.0, 0.999));
            cell.centroid_y = float(std::clamp(
                anchor_y + rng.uniform(-0.5, 0.5) * truth.radius, 0.0, 0.999));
          }
          cell.embedding.resize(cfg.d_cell);
          for (std::size_t j = 0; j < cfg.d_cell; ++j)
            cell.embedding[j] = float(
                type_mean[static_cast<int>(cell.cell_type)][j] + rng.normal());
          switch (kind) {
            case SignalKind::cell_shift:
              if (pt.label && cell.cell_type == truth.target_type)
                for (std::size_t j = 0; j < cfg.d_cell; ++j)
                  cell.embedding[j] += float(cfg.signal_strength *
                                             truth.cell_direction[j]);
              break;
            case SignalKind::patch_cell_interaction: {
              // positive patients align the cell sign with the patch sign,
              // negatives anti-align; marginals stay symmetric either way
              double cell_sign = pt.label ? patch_sign : -patch_sign;
              for (std::size_t j = 0; j < cfg.d_cell; ++j)
                cell.embedding[j] += float(cell_sign * cfg.signal_strength *
                                           truth.cell_direction[j]);
              break;
            }
            case SignalKind::multi_celltype: {
              int k = static_cast<int>(cell.cell_type);
              for (std::size_t j = 0; j < cfg.d_cell; ++j)
                cell.embedding[j] += float(type_coeff[k] *
                                           truth.type_directions[k][j]);
              break;
            }
            default:
              break;
          }
          patch.cells.push_back(std::move(cell));
        }
        slide.patches.push_back(std::move(patch));
      }
      pt.slides.push_back(std::move(slide));
    }
    cohort.patients.push_back(std::move(pt));
  }
  return cohort;
}

// Writes manifest + slide binaries + truth.json under dir.
inline void write_cohort(const Cohort& cohort, const SynthConfig& cfg,
                         const std::string& dir) {
  std::filesystem::create_directories(dir);
  Cohort manifest = cohort;  // record relative slide paths
  for (auto& pt : manifest.patients) {
    pt.slide_paths.clear();
    for (const auto& slide : pt.slides) {
      std::string rel = slide.slide_id + ".ceb";
      save_slide(slide, cohort.d_patch, cohort.d_cell,
                 (std::filesystem::path(dir) / rel).string());
      pt.slide_paths.push_back(rel);
    }
  }
  save_manifest(manifest, (std::filesystem::path(dir) / "manifest.json").string());
  std::ofstream os(std::filesystem::path(dir) / "truth.json");
  os << planted_truth(cfg).to_json().dump(2) << "\n";
}

}  // namespace celleco
