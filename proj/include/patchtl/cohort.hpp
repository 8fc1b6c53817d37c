#pragma once

// Slice labeling from lesion masks and patient-level stratified splitting.

#include <nlohmann/json.hpp>

#include <algorithm>
#include <array>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <numeric>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "patchtl/core_data.hpp"
#include "patchtl/preprocess.hpp"
#include "patchtl/rng.hpp"

namespace patchtl {

/// One sample per lesion-bearing slice; label 1 iff a CS lesion touches it.
inline std::vector<SliceSample> label_slices(const Volume& volume, const std::vector<LesionMask>& masks) {
  for (const auto& m : masks) m.validate(volume);
  std::vector<SliceSample> out;
  const std::size_t plane = volume.voxels.dim(1) * volume.voxels.dim(2);
  for (std::size_t s = 0; s < volume.slices(); ++s) {
    bool any = false, cs = false;
    Tensor uni({volume.voxels.dim(1), volume.voxels.dim(2)});
    for (const auto& m : masks) {
      const float* p = m.mask.data() + s * plane;
      bool hit = false;
      for (std::size_t i = 0; i < plane; ++i)
        if (p[i] != 0.0f) {
          hit = true;
          uni[i] = 1.0f;
        }
      any = any || hit;
      cs = cs || (hit && m.significance == Significance::kCS);
    }
    if (!any) continue;
    out.push_back({volume.patient_id, volume.modality, s, volume.voxels.slice(s), cs ? 1 : 0, std::move(uni)});
  }
  return out;
}

struct PreprocessConfig {
  ImageSize t2w_hw{320, 320};
  ImageSize adc_hw{128, 128};
  double p_low = 1.0;
  double p_high = 99.0;

  ImageSize canonical(Modality m) const { return m == Modality::kT2W ? t2w_hw : adc_hw; }
};

/// Labels, resamples to the modality's canonical size and normalizes every
/// lesion-bearing slice of one modality across the cohort.
inline std::vector<SliceSample> prepare_slices(const Cohort& cohort, Modality modality, const PreprocessConfig& cfg) {
  std::vector<SliceSample> out;
  const ImageSize hw = cfg.canonical(modality);
  for (const auto& item : cohort) {
    if (item.volume.modality != modality) continue;
    for (auto& s : label_slices(item.volume, item.masks)) {
      s.image = normalize_intensity(resample_slice(s.image, hw), cfg.p_low, cfg.p_high);
      s.lesion_mask = resample_mask(s.lesion_mask, hw);
      out.push_back(std::move(s));
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Split

struct SetCounts {
  std::size_t patients = 0;
  std::size_t cs_patients = 0;
  std::size_t slices = 0;
  std::size_t cs_slices = 0;
  std::size_t ncs_slices = 0;
  friend bool operator==(const SetCounts&, const SetCounts&) = default;
};

struct SplitManifest {
  std::map<std::string, SplitSet> assignments;
  std::uint64_t seed = 0;
  std::array<double, 3> fractions{0.70, 0.20, 0.10};  // train, test, val
  std::map<SplitSet, SetCounts> counts;

  SplitSet set_of(const std::string& patient) const {
    auto it = assignments.find(patient);
    if (it == assignments.end()) throw ValidationError("patient '" + patient + "' not in split manifest");
    return it->second;
  }
  std::set<std::string> patients_in(SplitSet s) const {
    std::set<std::string> out;
    for (const auto& [p, set] : assignments)
      if (set == s) out.insert(p);
    return out;
  }
  friend bool operator==(const SplitManifest&, const SplitManifest&) = default;
};

struct PatientStratum {
  std::string patient_id;
  bool has_cs = false;
};

/// Largest-remainder apportionment of `n` items over `fractions`; ties in
/// the fractional parts go to the set that comes first in `tie_order`.
inline std::array<std::size_t, 3> largest_remainder(std::size_t n, const std::array<double, 3>& fractions,
                                                    const std::array<std::size_t, 3>& tie_order) {
  std::array<std::size_t, 3> out{};
  std::array<double, 3> rem{};
  std::size_t used = 0;
  for (std::size_t i = 0; i < 3; ++i) {
    const double q = fractions[i] * double(n);
    out[i] = static_cast<std::size_t>(std::floor(q + 1e-9));
    rem[i] = q - double(out[i]);
    used += out[i];
  }
  std::array<std::size_t, 3> order = tie_order;
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return rem[a] > rem[b] + 1e-12; });
  for (std::size_t k = 0; used < n; ++k, ++used) ++out[order[k % 3]];
  return out;
}

inline void validate_fractions(const std::array<double, 3>& f) {
  for (double v : f)
    if (!(v > 0.0)) throw ValidationError("split fractions must be positive");
  if (std::abs(f[0] + f[1] + f[2] - 1.0) > 1e-9) throw ValidationError("split fractions must sum to 1");
}

/// Patient-disjoint train/test/val split, stratified on "has a CS lesion".
/// Patients are sorted canonically before the seeded shuffle, so the result
/// does not depend on input order.
inline SplitManifest stratified_patient_split(std::vector<PatientStratum> patients,
                                              std::array<double, 3> fractions, std::uint64_t seed) {
  validate_fractions(fractions);
  std::sort(patients.begin(), patients.end(),
            [](const PatientStratum& a, const PatientStratum& b) { return a.patient_id < b.patient_id; });
  if (std::adjacent_find(patients.begin(), patients.end(), [](const auto& a, const auto& b) {
        return a.patient_id == b.patient_id;
      }) != patients.end())
    throw ValidationError("duplicate patient ids in split input");
  if (patients.size() < 3) throw SizingError("split needs at least 3 patients");

  SplitManifest m;
  m.seed = seed;
  m.fractions = fractions;
  const SplitSet sets[3] = {SplitSet::kTrain, SplitSet::kTest, SplitSet::kVal};
  for (int stratum = 1; stratum >= 0; --stratum) {
    std::vector<std::string> ids;
    for (const auto& p : patients)
      if (p.has_cs == bool(stratum)) ids.push_back(p.patient_id);
    Rng rng(derive_seed(seed, stratum ? "split/cs" : "split/ncs"));
    rng.shuffle(ids.begin(), ids.end());
    std::array<std::size_t, 3> tie{0, 1, 2};
    rng.shuffle(tie.begin(), tie.end());
    const auto sizes = largest_remainder(ids.size(), fractions, tie);
    std::size_t k = 0;
    for (std::size_t s = 0; s < 3; ++s)
      for (std::size_t i = 0; i < sizes[s]; ++i) m.assignments[ids[k++]] = sets[s];
  }
  for (auto s : sets)
    if (m.patients_in(s).empty()) throw SizingError("split leaves set " + to_string(s) + " empty");
  for (const auto& p : patients) {
    auto& c = m.counts[m.assignments.at(p.patient_id)];
    ++c.patients;
    c.cs_patients += p.has_cs;
  }
  return m;
}

inline SplitManifest stratified_patient_split(const Cohort& cohort, std::array<double, 3> fractions,
                                              std::uint64_t seed) {
  std::vector<PatientStratum> ps;
  for (const auto& [id, cs] : patient_cs_flags(cohort)) ps.push_back({id, cs});
  return stratified_patient_split(std::move(ps), fractions, seed);
}

/// Recomputes per-set slice and label counts from the assignments.
inline std::map<SplitSet, SetCounts> count_slices(const SplitManifest& m, const std::vector<SliceSample>& samples,
                                                  const std::map<std::string, bool>& patient_cs) {
  std::map<SplitSet, SetCounts> c;
  for (auto s : {SplitSet::kTrain, SplitSet::kTest, SplitSet::kVal}) c[s] = {};
  for (const auto& [p, set] : m.assignments) {
    ++c[set].patients;
    auto it = patient_cs.find(p);
    c[set].cs_patients += (it != patient_cs.end() && it->second);
  }
  for (const auto& s : samples) {
    auto& k = c[m.set_of(s.patient_id)];
    ++k.slices;
    (s.label ? k.cs_slices : k.ncs_slices)++;
  }
  return c;
}

inline std::vector<SliceSample> select_set(const std::vector<SliceSample>& samples, const SplitManifest& m, SplitSet set) {
  std::vector<SliceSample> out;
  for (const auto& s : samples)
    if (m.set_of(s.patient_id) == set) out.push_back(s);
  return out;
}

inline std::string manifest_csv(const SplitManifest& m) {
  std::string out = "patient_id,set\n";
  for (const auto& [p, s] : m.assignments) out += p + "," + to_string(s) + "\n";
  return out;
}

inline nlohmann::json manifest_summary(const SplitManifest& m) {
  nlohmann::json counts = nlohmann::json::object();
  for (const auto& [set, c] : m.counts)
    counts[to_string(set)] = {{"patients", c.patients},
                              {"cs_patients", c.cs_patients},
                              {"slices", c.slices},
                              {"cs_slices", c.cs_slices},
                              {"ncs_slices", c.ncs_slices}};
  return {{"seed", m.seed}, {"fractions", {m.fractions[0], m.fractions[1], m.fractions[2]}}, {"counts", counts}};
}

inline void write_manifest(const std::filesystem::path& csv_path, const SplitManifest& m) {
  {
    std::ofstream f(csv_path);
    if (!f) throw IoError("cannot write " + csv_path.string());
    f << manifest_csv(m);
  }
  auto json_path = csv_path;
  json_path.replace_extension(".json");
  std::ofstream j(json_path);
  if (!j) throw IoError("cannot write " + json_path.string());
  j << manifest_summary(m).dump(2) << "\n";
}

inline SplitManifest read_manifest(const std::filesystem::path& csv_path) {
  std::ifstream f(csv_path);
  if (!f) throw IoError("cannot read " + csv_path.string());
  SplitManifest m;
  std::string line;
  std::getline(f, line);
  if (line != "patient_id,set") throw FormatError("manifest header must be 'patient_id,set'");
  while (std::getline(f, line)) {
    if (line.empty()) continue;
    const auto comma = line.find(',');
    if (comma == std::string::npos) throw FormatError("bad manifest row: " + line);
    m.assignments[line.substr(0, comma)] = split_set_from_string(line.substr(comma + 1));
  }
  auto json_path = csv_path;
  json_path.replace_extension(".json");
  if (std::filesystem::exists(json_path)) {
    const auto j = detail::read_json_file(json_path);
    m.seed = j.value("seed", std::uint64_t{0});
    if (j.contains("fractions"))
      for (std::size_t i = 0; i < 3; ++i) m.fractions[i] = j["fractions"].at(i).get<double>();
    if (j.contains("counts"))
      for (const auto& [k, v] : j["counts"].items())
        m.counts[split_set_from_string(k)] = {v.value("patients", std::size_t{0}), v.value("cs_patients", std::size_t{0}),
                                              v.value("slices", std::size_t{0}), v.value("cs_slices", std::size_t{0}),
                                              v.value("ncs_slices", std::size_t{0})};
  }
  return m;
}

}  // namespace patchtl
