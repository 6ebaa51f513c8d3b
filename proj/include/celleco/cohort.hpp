#pragma once

// Patient / slide / patch / cell data model, the CEB1 slide binary format,
// the JSON manifest, cell-type subset views, and patient-level CV folds.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "celleco/rng.hpp"

namespace celleco {

struct DataError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

enum class CellType : std::uint8_t {
  stromal = 0,
  inflammatory = 1,
  neoplastic = 2,
  dead = 3,
  benign_epithelial = 4,
};

inline constexpr int kNumCellTypes = 5;

inline const char* cell_type_name(CellType t) {
  switch (t) {
    case CellType::stromal: return "stromal";
    case CellType::inflammatory: return "inflammatory";
    case CellType::neoplastic: return "neoplastic";
    case CellType::dead: return "dead";
    case CellType::benign_epithelial: return "benign_epithelial";
  }
  return "?";
}

struct CellRecord {
  CellType cell_type = CellType::stromal;
  float centroid_x = 0, centroid_y = 0;  // patch-local, patch side = 1.0
  std::vector<float> embedding;
};

struct PatchRecord {
  std::uint32_t patch_id = 0;
  float origin_x = 0, origin_y = 0;  // slide coordinates of top-left
  std::vector<float> embedding;
  std::vector<CellRecord> cells;
};

struct Slide {
  std::string slide_id;
  std::vector<PatchRecord> patches;
};

struct Patient {
  std::string patient_id;
  int label = 0;            // 5-year recurrence
  double time_months = 0;
  int event = 0;            // recurrence observed
  std::vector<std::string> slide_paths;
  std::vector<Slide> slides;
  std::map<std::string, nlohmann::json> subgroups;
};

struct Cohort {
  std::uint32_t d_patch = 0, d_cell = 0;
  std::vector<Patient> patients;
};

// ---- CEB1 slide binary format -----------------------------------------

namespace detail {

inline void put_bytes(std::ostream& os, const void* p, std::size_t n) {
  os.write(static_cast<const char*>(p), static_cast<std::streamsize>(n));
}

inline void put_u16(std::ostream& os, std::uint16_t v) {
  unsigned char b[2] = {static_cast<unsigned char>(v & 0xFF),
                        static_cast<unsigned char>(v >> 8)};
  put_bytes(os, b, 2);
}

inline void put_u32(std::ostream& os, std::uint32_t v) {
  unsigned char b[4];
  for (int i = 0; i < 4; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
  put_bytes(os, b, 4);
}

inline void put_f32(std::ostream& os, float v) {
  std::uint32_t u;
  std::memcpy(&u, &v, 4);
  put_u32(os, u);
}

struct Reader {
  std::ifstream in;
  std::string path;

  void need(void* p, std::size_t n) {
    in.read(static_cast<char*>(p), static_cast<std::streamsize>(n));
    if (in.gcount() != static_cast<std::streamsize>(n))
      throw DataError("truncated slide file: " + path);
  }
  std::uint16_t u16() {
    unsigned char b[2];
    need(b, 2);
    return static_cast<std::uint16_t>(b[0] | (b[1] << 8));
  }
  std::uint32_t u32() {
    unsigned char b[4];
    need(b, 4);
    return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
           (static_cast<std::uint32_t>(b[2]) << 16) |
           (static_cast<std::uint32_t>(b[3]) << 24);
  }
  float f32() {
    std::uint32_t u = u32();
    float v;
    std::memcpy(&v, &u, 4);
    return v;
  }
};

}  // namespace detail

inline void save_slide(const Slide& slide, std::uint32_t d_patch,
                       std::uint32_t d_cell, const std::string& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw DataError("cannot open for write: " + path);
  os.write("CEB1", 4);
  detail::put_u16(os, 1);  // version
  detail::put_u16(os, 0);  // flags
  detail::put_u32(os, d_patch);
  detail::put_u32(os, d_cell);
  detail::put_u32(os, static_cast<std::uint32_t>(slide.patches.size()));
  for (const auto& p : slide.patches) {
    if (p.embedding.size() != d_patch)
      throw DataError("slide " + slide.slide_id + " patch " +
                      std::to_string(p.patch_id) + ": patch embedding length " +
                      std::to_string(p.embedding.size()) + " != d_patch " +
                      std::to_string(d_patch));
    detail::put_u32(os, p.patch_id);
    detail::put_f32(os, p.origin_x);
    detail::put_f32(os, p.origin_y);
    detail::put_u32(os, static_cast<std::uint32_t>(p.cells.size()));
    for (float v : p.embedding) detail::put_f32(os, v);
    for (const auto& c : p.cells) {
      if (c.embedding.size() != d_cell)
        throw DataError("slide " + slide.slide_id + " patch " +
                        std::to_string(p.patch_id) +
                        ": cell embedding length mismatch");
      unsigned char head[4] = {static_cast<unsigned char>(c.cell_type), 0, 0, 0};
      detail::put_bytes(os, head, 4);
      detail::put_f32(os, c.centroid_x);
      detail::put_f32(os, c.centroid_y);
      for (float v : c.embedding) detail::put_f32(os, v);
    }
  }
  if (!os) throw DataError("write failed: " + path);
}

inline Slide load_slide(const std::string& path) {
  detail::Reader r{std::ifstream(path, std::ios::binary), path};
  if (!r.in) throw DataError("cannot open slide file: " + path);
  char magic[4];
  r.need(magic, 4);
  if (std::memcmp(magic, "CEB1", 4) != 0)
    throw DataError("bad magic in slide file: " + path);
  std::uint16_t version = r.u16();
  if (version != 1)
    throw DataError("unsupported slide format version " +
                    std::to_string(version) + " in " + path);
  (void)r.u16();  // flags
  std::uint32_t d_patch = r.u32();
  std::uint32_t d_cell = r.u32();
  std::uint32_t n_patches = r.u32();
  Slide s;
  s.slide_id = std::filesystem::path(path).stem().string();
  s.patches.resize(n_patches);
  for (auto& p : s.patches) {
    p.patch_id = r.u32();
    p.origin_x = r.f32();
    p.origin_y = r.f32();
    std::uint32_t n_cells = r.u32();
    p.embedding.resize(d_patch);
    for (auto& v : p.embedding) v = r.f32();
    p.cells.resize(n_cells);
    for (auto& c : p.cells) {
      unsigned char head[4];
      r.need(head, 4);
      if (head[0] >= kNumCellTypes)
        throw DataError("invalid cell type code " + std::to_string(head[0]) +
                        " in " + path);
      c.cell_type = static_cast<CellType>(head[0]);
      c.centroid_x = r.f32();
      c.centroid_y = r.f32();
      c.embedding.resize(d_cell);
      for (auto& v : c.embedding) v = r.f32();
    }
  }
  return s;
}

// Slide dimensions as stored in the file header, needed for validation.
struct SlideHeader {
  std::uint32_t d_patch = 0, d_cell = 0;
};

inline SlideHeader peek_slide_header(const std::string& path) {
  detail::Reader r{std::ifstream(path, std::ios::binary), path};
  if (!r.in) throw DataError("cannot open slide file: " + path);
  char magic[4];
  r.need(magic, 4);
  if (std::memcmp(magic, "CEB1", 4) != 0)
    throw DataError("bad magic in slide file: " + path);
  (void)r.u16();
  (void)r.u16();
  SlideHeader h;
  h.d_patch = r.u32();
  h.d_cell = r.u32();
  return h;
}

// ---- manifest ----------------------------------------------------------

inline void save_manifest(const Cohort& cohort, const std::string& path) {
  nlohmann::json j;
  j["d_patch"] = cohort.d_patch;
  j["d_cell"] = cohort.d_cell;
  j["patients"] = nlohmann::json::array();
  for (const auto& p : cohort.patients) {
    nlohmann::json jp;
    jp["patient_id"] = p.patient_id;
    jp["label"] = p.label;
    jp["time_months"] = p.time_months;
    jp["event"] = p.event;
    jp["slides"] = p.slide_paths;
    jp["subgroups"] = p.subgroups;
    j["patients"].push_back(std::move(jp));
  }
  std::ofstream os(path);
  if (!os) throw DataError("cannot open for write: " + path);
  os << j.dump(2) << "\n";
}

inline void validate_cohort(const Cohort& cohort) {
  std::vector<std::string> ids;
  for (const auto& pt : cohort.patients) {
    ids.push_back(pt.patient_id);
    if (pt.slides.empty())
      throw DataError("patient " + pt.patient_id + " has no slides");
    if (pt.time_months < 0)
      throw DataError("patient " + pt.patient_id + " has negative time_months");
    if (pt.event == 1 && pt.time_months <= 60 && pt.label != 1)
      throw DataError("patient " + pt.patient_id +
                      ": event within 60 months but label is 0");
    for (const auto& s : pt.slides) {
      std::vector<std::uint32_t> pids;
      for (const auto& p : s.patches) {
        pids.push_back(p.patch_id);
        if (p.embedding.size() != cohort.d_patch)
          throw DataError("slide " + s.slide_id + " patch " +
                          std::to_string(p.patch_id) + ": d_patch mismatch (" +
                          std::to_string(p.embedding.size()) + " vs " +
                          std::to_string(cohort.d_patch) + ")");
        for (const auto& c : p.cells) {
          if (c.embedding.size() != cohort.d_cell)
            throw DataError("slide " + s.slide_id + " patch " +
                            std::to_string(p.patch_id) + ": d_cell mismatch");
          if (!std::isfinite(c.centroid_x) || !std::isfinite(c.centroid_y) ||
              c.centroid_x < 0 || c.centroid_x >= 1 || c.centroid_y < 0 ||
              c.centroid_y >= 1)
            throw DataError("slide " + s.slide_id + " patch " +
                            std::to_string(p.patch_id) +
                            ": cell centroid outside patch bounds");
        }
      }
      std::sort(pids.begin(), pids.end());
      if (std::adjacent_find(pids.begin(), pids.end()) != pids.end())
        throw DataError("slide " + s.slide_id + " has duplicate patch ids");
    }
  }
  std::sort(ids.begin(), ids.end());
  if (std::adjacent_find(ids.begin(), ids.end()) != ids.end())
    throw DataError("duplicate patient ids in cohort");
}

inline Cohort load_cohort(const std::string& manifest_path) {
  std::ifstream is(manifest_path);
  if (!is) throw DataError("cannot open manifest: " + manifest_path);
  nlohmann::json j;
  try {
    is >> j;
  } catch (const nlohmann::json::exception& e) {
    throw DataError("malformed manifest " + manifest_path + ": " + e.what());
  }
  Cohort cohort;
  cohort.d_patch = j.at("d_patch").get<std::uint32_t>();
  cohort.d_cell = j.at("d_cell").get<std::uint32_t>();
  auto base = std::filesystem::path(manifest_path).parent_path();
  for (const auto& jp : j.at("patients")) {
    Patient pt;
    pt.patient_id = jp.at("patient_id").get<std::string>();
    pt.label = jp.at("label").get<int>();
    pt.time_months = jp.at("time_months").get<double>();
    pt.event = jp.at("event").get<int>();
    for (const auto& sp : jp.at("slides")) {
      std::string rel = sp.get<std::string>();
      std::string full = (base / rel).string();
      auto hdr = peek_slide_header(full);
      if (hdr.d_patch != cohort.d_patch)
        throw DataError("slide " + rel + ": d_patch " +
                        std::to_string(hdr.d_patch) + " != manifest d_patch " +
                        std::to_string(cohort.d_patch));
      if (hdr.d_cell != cohort.d_cell)
        throw DataError("slide " + rel + ": d_cell " +
                        std::to_string(hdr.d_cell) + " != manifest d_cell " +
                        std::to_string(cohort.d_cell));
      pt.slide_paths.push_back(rel);
      pt.slides.push_back(load_slide(full));
    }
    if (jp.contains("subgroups"))
      for (auto it = jp.at("subgroups").begin(); it != jp.at("subgroups").end(); ++it)
        pt.subgroups[it.key()] = it.value();
    cohort.patients.push_back(std::move(pt));
  }
  validate_cohort(cohort);
  return cohort;
}

// ---- subset views ------------------------------------------------------

// Patches containing at least one cell of type t, restricted to those cells.
// Patch embeddings are unchanged.
inline Slide subset_by_cell_type(const Slide& slide, CellType t) {
  Slide out;
  out.slide_id = slide.slide_id;
  for (const auto& p : slide.patches) {
    bool has = false;
    for (const auto& c : p.cells)
      if (c.cell_type == t) { has = true; break; }
    if (!has) continue;
    PatchRecord kept = p;
    kept.cells.clear();
    for (const auto& c : p.cells)
      if (c.cell_type == t) kept.cells.push_back(c);
    out.patches.push_back(std::move(kept));
  }
  return out;
}

// Drops only patches with zero cells; all cells retained.
inline Slide subset_all_cells(const Slide& slide) {
  Slide out;
  out.slide_id = slide.slide_id;
  for (const auto& p : slide.patches)
    if (!p.cells.empty()) out.patches.push_back(p);
  return out;
}

// ---- cross-validation folds -------------------------------------------

struct FoldSplit {
  std::vector<std::string> train, validation, test;
};

// Patient-level label-stratified k-fold split; validation carves 20% of each
// fold's training patients, stratified. Deterministic given seed.
inline std::vector<FoldSplit> make_folds(const Cohort& cohort, int k,
                                         std::uint64_t seed) {
  if (k < 2) throw DataError("make_folds: k must be >= 2");
  std::vector<std::string> pos, neg;
  for (const auto& p : cohort.patients)
    (p.label ? pos : neg).push_back(p.patient_id);
  if (static_cast<int>(pos.size()) < k || static_cast<int>(neg.size()) < k)
    throw DataError("make_folds: need at least k patients per class (have " +
                    std::to_string(pos.size()) + " positive, " +
                    std::to_string(neg.size()) + " negative, k=" +
                    std::to_string(k) + ")");
  Rng rng = Rng::derive(seed, 0xF01D);
  rng.shuffle(pos);
  rng.shuffle(neg);

  std::vector<std::vector<std::string>> test_folds(k);
  for (std::size_t i = 0; i < pos.size(); ++i)
    test_folds[i % k].push_back(pos[i]);
  for (std::size_t i = 0; i < neg.size(); ++i)
    test_folds[i % k].push_back(neg[i]);

  std::vector<FoldSplit> folds(k);
  for (int f = 0; f < k; ++f) {
    folds[f].test = test_folds[f];
    std::vector<std::string> train_pos, train_neg;
    for (int g = 0; g < k; ++g) {
      if (g == f) continue;
      for (const auto& id : test_folds[g]) {
        bool is_pos = std::find(pos.begin(), pos.end(), id) != pos.end();
        (is_pos ? train_pos : train_neg).push_back(id);
      }
    }
    Rng vr = Rng::derive(seed, 0x7A11, static_cast<std::uint64_t>(f));
    vr.shuffle(train_pos);
    vr.shuffle(train_neg);
    auto carve = [&](std::vector<std::string>& cls) {
      std::size_t n_val = std::max<std::size_t>(1, cls.size() / 5);
      for (std::size_t i = 0; i < cls.size(); ++i)
        (i < n_val ? folds[f].validation : folds[f].train).push_back(cls[i]);
    };
    carve(train_pos);
    carve(train_neg);
    std::sort(folds[f].train.begin(), folds[f].train.end());
    std::sort(folds[f].validation.begin(), folds[f].validation.end());
    std::sort(folds[f].test.begin(), folds[f].test.end());
  }
  return folds;
}

inline const Patient& find_patient(const Cohort& cohort, const std::string& id) {
  for (const auto& p : cohort.patients)
    if (p.patient_id == id) return p;
  throw DataError("unknown patient id: " + id);
}

}  // namespace celleco
