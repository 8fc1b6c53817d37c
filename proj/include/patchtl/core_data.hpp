#pragma once

// Domain types, cohort directory ingestion/writing and the synthetic
// phantom cohort generator.
//
// Cohort layout:
//   <root>/<patient>/<modality>.ptnsr
//   <root>/<patient>/<modality>.meta.json            {"in_plane_spacing":[r,c],"slice_thickness":t}
//   <root>/<patient>/masks/<lesion>.<modality>.ptnsr
//   <root>/<patient>/masks/<lesion>.<modality>.meta.json  {"significance":"CS"|"NCS"}

#include <nlohmann/json.hpp>

#include <algorithm>
#include <array>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "patchtl/error.hpp"
#include "patchtl/rng.hpp"
#include "patchtl/tensor.hpp"
#include "patchtl/tensor_io.hpp"
#include "patchtl/types.hpp"

namespace patchtl {

struct Volume {
  std::string patient_id;
  Modality modality = Modality::kT2W;
  Tensor voxels;  // (slice, row, col)
  std::array<double, 2> in_plane_spacing{1.0, 1.0};
  double slice_thickness = 1.0;

  std::size_t slices() const { return voxels.dim(0); }
  ImageSize slice_hw() const { return {voxels.dim(1), voxels.dim(2)}; }

  void validate() const {
    if (voxels.rank() != 3 || voxels.size() == 0)
      throw ValidationError("volume " + patient_id + "/" + to_string(modality) + " must be rank 3 with non-empty dims");
    if (!voxels.all_finite()) throw ValidationError("volume " + patient_id + " has non-finite voxels");
  }
};

struct LesionMask {
  std::string patient_id;
  std::string lesion_id;
  Significance significance = Significance::kNCS;
  Tensor mask;  // binary, aligned to the parent volume

  void validate(const Volume& parent) const {
    if (mask.shape() != parent.voxels.shape())
      throw AlignmentError("mask " + patient_id + "/" + lesion_id + " shape " + shape_str(mask.shape()) +
                           " does not match volume " + shape_str(parent.voxels.shape()));
    if (std::none_of(mask.vec().begin(), mask.vec().end(), [](float v) { return v != 0.0f; }))
      throw ValidationError("mask " + patient_id + "/" + lesion_id + " is empty");
  }
};

struct CohortItem {
  Volume volume;
  std::vector<LesionMask> masks;
};

using Cohort = std::vector<CohortItem>;

/// One labeled 2D slice. `lesion_mask` is the union of lesion voxels on the
/// slice; it is a training-time annotation used only for patch pre-selection.
struct SliceSample {
  std::string patient_id;
  Modality modality = Modality::kT2W;
  std::size_t slice_index = 0;
  Tensor image;
  int label = 0;
  Tensor lesion_mask;
};

inline void sort_cohort(Cohort& c) {
  std::stable_sort(c.begin(), c.end(), [](const CohortItem& a, const CohortItem& b) {
    if (a.volume.patient_id != b.volume.patient_id) return a.volume.patient_id < b.volume.patient_id;
    return a.volume.modality < b.volume.modality;
  });
}

// ---------------------------------------------------------------------------
// Phantom cohort

struct PhantomSpec {
  std::size_t n_patients = 10;
  double cs_fraction = 0.3;
  ImageSize t2w_hw{96, 96};
  ImageSize adc_hw{64, 64};
  std::size_t n_slices = 12;
  double lesion_contrast = 0.6;
  double noise_level = 0.05;
  std::uint64_t seed = 0;
  /// NCS lesion amplitude relative to CS.
  double ncs_contrast_ratio = 0.35;
  /// Lesion Gaussian sigma as a fraction of the image side.
  double lesion_sigma = 0.035;
  /// Bright non-lesion structures per slice placed outside the gland.
  std::size_t distractors = 1;

  void validate() const {
    if (n_patients < 2) throw ValidationError("phantom n_patients must be >= 2");
    if (!(cs_fraction > 0.0 && cs_fraction < 1.0)) throw ValidationError("phantom cs_fraction must lie in (0,1)");
    for (auto hw : {t2w_hw, adc_hw})
      if (hw.h < 8 || hw.w < 8) throw ValidationError("phantom image sides must be >= 8");
    if (n_slices < 3) throw ValidationError("phantom n_slices must be >= 3");
    if (!(lesion_contrast > 0.0)) throw ValidationError("phantom lesion_contrast must be > 0");
    if (!(noise_level >= 0.0)) throw ValidationError("phantom noise_level must be >= 0");
    if (!(ncs_contrast_ratio >= 0.0 && ncs_contrast_ratio < 1.0))
      throw ValidationError("phantom ncs_contrast_ratio must lie in [0,1)");
    if (!(lesion_sigma > 0.0 && lesion_sigma < 0.25)) throw ValidationError("phantom lesion_sigma must lie in (0,0.25)");
  }
};

namespace phantom_detail {

struct Blob {
  double u, v, z;      // centre: normalized in-plane, slice index
  double sigma;        // normalized in-plane sigma
  double sigma_z;      // slices
  double amplitude;    // fraction of lesion_contrast
};

struct Anatomy {
  double gland_u, gland_v, gland_ru, gland_rv;
  double tissue, gland;
  std::array<double, 6> texture;  // amplitudes/phases of two low-frequency waves
};

inline bool in_gland(const Anatomy& a, double u, double v, double margin = 1.0) {
  const double du = (u - a.gland_u) / (a.gland_ru * margin), dv = (v - a.gland_v) / (a.gland_rv * margin);
  return du * du + dv * dv <= 1.0;
}

// Mask threshold on the 3D Gaussian profile.
inline constexpr double kMaskLevel = 0.5;

inline Tensor render(const PhantomSpec& spec, Modality modality, const Anatomy& a, const std::vector<Blob>& lesions,
                     const std::vector<Blob>& distractors, std::uint64_t noise_seed) {
  const ImageSize hw = modality == Modality::kT2W ? spec.t2w_hw : spec.adc_hw;
  // T2W: bright lesions on mid-grey tissue. ADC: dark lesions on a bright gland.
  const double sign = modality == Modality::kT2W ? 1.0 : -1.0;
  const double scale = modality == Modality::kT2W ? 400.0 : 1000.0;
  const double gland = modality == Modality::kT2W ? a.gland : 1.0 + 0.5 * (a.gland - 0.5);
  const double tissue = modality == Modality::kT2W ? a.tissue : 0.7 + 0.5 * (a.tissue - 0.35);
  Tensor vol({spec.n_slices, hw.h, hw.w});
  Rng noise(noise_seed);
  for (std::size_t s = 0; s < spec.n_slices; ++s)
    for (std::size_t r = 0; r < hw.h; ++r)
      for (std::size_t c = 0; c < hw.w; ++c) {
        const double u = (double(r) + 0.5) / double(hw.h), v = (double(c) + 0.5) / double(hw.w);
        const double bu = (u - 0.5) / 0.44, bv = (v - 0.5) / 0.46;
        double val = 0.05;
        if (bu * bu + bv * bv <= 1.0) {
          val = in_gland(a, u, v) ? gland : tissue;
          val += a.texture[0] * std::sin(2 * M_PI * (a.texture[1] * u + a.texture[2] * v));
          val += a.texture[3] * std::cos(2 * M_PI * (a.texture[4] * u - a.texture[5] * v));
        }
        auto add = [&](const Blob& b, double sgn) {
          const double du = u - b.u, dv = v - b.v, dz = double(s) - b.z;
          const double prof = std::exp(-(du * du + dv * dv) / (2 * b.sigma * b.sigma) - dz * dz / (2 * b.sigma_z * b.sigma_z));
          val += sgn * spec.lesion_contrast * b.amplitude * prof;
        };
        for (const auto& b : lesions) add(b, sign);
        for (const auto& b : distractors) add(b, sign);
        val += spec.noise_level * noise.normal();
        vol.at(s, r, c) = static_cast<float>(std::max(0.0, val) * scale);
      }
  return vol;
}

inline Tensor lesion_mask(const PhantomSpec& spec, ImageSize hw, const Blob& b) {
  Tensor m({spec.n_slices, hw.h, hw.w});
  for (std::size_t s = 0; s < spec.n_slices; ++s)
    for (std::size_t r = 0; r < hw.h; ++r)
      for (std::size_t c = 0; c < hw.w; ++c) {
        const double u = (double(r) + 0.5) / double(hw.h), v = (double(c) + 0.5) / double(hw.w);
        const double du = u - b.u, dv = v - b.v, dz = double(s) - b.z;
        const double prof = std::exp(-(du * du + dv * dv) / (2 * b.sigma * b.sigma) - dz * dz / (2 * b.sigma_z * b.sigma_z));
        if (prof >= kMaskLevel) m.at(s, r, c) = 1.0f;
      }
  // Guarantee the lesion centre voxel is marked even for sub-pixel blobs.
  const auto s = std::min<std::size_t>(spec.n_slices - 1, std::size_t(std::lround(b.z)));
  const auto r = std::min<std::size_t>(hw.h - 1, std::size_t(b.u * double(hw.h)));
  const auto c = std::min<std::size_t>(hw.w - 1, std::size_t(b.v * double(hw.w)));
  m.at(s, r, c) = 1.0f;
  return m;
}

}  // namespace phantom_detail

inline std::string phantom_patient_id(std::size_t i) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "P%04zu", i);
  return buf;
}

/// Deterministic synthetic cohort: every patient has both modalities with
/// geometrically identical lesions. CS patients carry one CS lesion (plus an
/// occasional NCS one); the rest carry one or two NCS lesions. Lesion
/// centres cluster around a central gland region.
inline Cohort generate_phantom_cohort(const PhantomSpec& spec) {
  using namespace phantom_detail;
  spec.validate();
  Rng rng(derive_seed(spec.seed, "phantom"));
  const std::size_t n = spec.n_patients;
  auto n_cs = static_cast<std::size_t>(std::lround(spec.cs_fraction * double(n)));
  n_cs = std::clamp<std::size_t>(n_cs, 1, n - 1);
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  rng.shuffle(order.begin(), order.end());
  std::vector<bool> is_cs(n, false);
  for (std::size_t i = 0; i < n_cs; ++i) is_cs[order[i]] = true;

  Cohort cohort;
  for (std::size_t p = 0; p < n; ++p) {
    Rng prng(derive_seed(spec.seed, 1000 + p));
    const std::string pid = phantom_patient_id(p);
    Anatomy a;
    a.gland_u = 0.5 + prng.uniform(-0.03, 0.03);
    a.gland_v = 0.5 + prng.uniform(-0.03, 0.03);
    a.gland_ru = prng.uniform(0.16, 0.21);
    a.gland_rv = prng.uniform(0.17, 0.23);
    a.tissue = prng.uniform(0.30, 0.40);
    a.gland = prng.uniform(0.45, 0.60);
    a.texture = {prng.uniform(0.0, 0.04), prng.uniform(1.0, 3.0), prng.uniform(1.0, 3.0),
                 prng.uniform(0.0, 0.04), prng.uniform(1.0, 3.0), prng.uniform(1.0, 3.0)};

    std::vector<Blob> lesions;
    std::vector<Significance> sig;
    auto place = [&](Significance s) {
      Blob b;
      do {
        b.u = a.gland_u + prng.normal(0.0, 0.09);
        b.v = a.gland_v + prng.normal(0.0, 0.09);
      } while (!in_gland(a, b.u, b.v, 0.9));
      b.z = double(1 + prng.below(spec.n_slices - 2));
      b.sigma = spec.lesion_sigma * prng.uniform(0.85, 1.2);
      b.sigma_z = prng.uniform(0.5, 1.0);
      b.amplitude = s == Significance::kCS ? prng.uniform(0.9, 1.1) : spec.ncs_contrast_ratio * prng.uniform(0.8, 1.2);
      lesions.push_back(b);
      sig.push_back(s);
    };
    if (is_cs[p]) {
      place(Significance::kCS);
      if (prng.bernoulli(0.3)) place(Significance::kNCS);
    } else {
      place(Significance::kNCS);
      if (prng.bernoulli(0.3)) place(Significance::kNCS);
    }
    std::vector<Blob> distractors;
    for (std::size_t s = 0; s < spec.n_slices; ++s)
      for (std::size_t k = 0; k < spec.distractors; ++k) {
        Blob d;
        double bu, bv;
        do {
          d.u = prng.uniform(0.12, 0.88);
          d.v = prng.uniform(0.12, 0.88);
          bu = (d.u - 0.5) / 0.40;
          bv = (d.v - 0.5) / 0.42;
        } while (bu * bu + bv * bv > 1.0 || in_gland(a, d.u, d.v, 1.25));
        d.z = double(s);
        d.sigma = spec.lesion_sigma * prng.uniform(0.85, 1.2);
        d.sigma_z = 0.3;
        d.amplitude = prng.uniform(0.5, 1.1);
        distractors.push_back(d);
      }

    for (Modality m : {Modality::kT2W, Modality::kADC}) {
      CohortItem item;
      item.volume.patient_id = pid;
      item.volume.modality = m;
      item.volume.voxels = render(spec, m, a, lesions, distractors, derive_seed(spec.seed, 5000 + 2 * p + (m == Modality::kADC)));
      item.volume.in_plane_spacing = m == Modality::kT2W ? std::array<double, 2>{0.5, 0.5} : std::array<double, 2>{2.0, 2.0};
      item.volume.slice_thickness = 3.6;
      const ImageSize hw = m == Modality::kT2W ? spec.t2w_hw : spec.adc_hw;
      for (std::size_t l = 0; l < lesions.size(); ++l) {
        LesionMask mk;
        mk.patient_id = pid;
        mk.lesion_id = "L" + std::to_string(l + 1);
        mk.significance = sig[l];
        mk.mask = lesion_mask(spec, hw, lesions[l]);
        mk.validate(item.volume);
        item.masks.push_back(std::move(mk));
      }
      cohort.push_back(std::move(item));
    }
  }
  sort_cohort(cohort);
  return cohort;
}

/// Patient has at least one CS lesion (in any modality).
inline std::map<std::string, bool> patient_cs_flags(const Cohort& cohort) {
  std::map<std::string, bool> flags;
  for (const auto& item : cohort) {
    bool& f = flags[item.volume.patient_id];
    for (const auto& m : item.masks) f = f || m.significance == Significance::kCS;
  }
  return flags;
}

// ---------------------------------------------------------------------------
// Directory adapter

namespace detail {

inline nlohmann::json read_json_file(const std::filesystem::path& p) {
  std::ifstream f(p);
  if (!f) throw IoError("cannot read " + p.string());
  try {
    return nlohmann::json::parse(f);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(p.string() + ": " + e.what());
  }
}

inline void write_json_file(const std::filesystem::path& p, const nlohmann::json& j) {
  std::ofstream f(p);
  if (!f) throw IoError("cannot write " + p.string());
  f << j.dump(2) << "\n";
}

}  // namespace detail

struct IngestResult {
  Cohort cohort;
  std::vector<std::string> warnings;
};

/// Reads a cohort tree. Patients lacking either modality are skipped with a
/// warning; mask/volume shape mismatches raise AlignmentError.
inline IngestResult ingest_cohort(const std::filesystem::path& root) {
  namespace fs = std::filesystem;
  IngestResult out;
  if (!fs::exists(root)) throw IoError("cohort root does not exist: " + root.string());
  std::vector<fs::path> patients;
  for (const auto& e : fs::directory_iterator(root))
    if (e.is_directory()) patients.push_back(e.path());
  std::sort(patients.begin(), patients.end());
  for (const auto& dir : patients) {
    const std::string pid = dir.filename().string();
    std::vector<CohortItem> items;
    bool complete = true;
    for (Modality m : {Modality::kT2W, Modality::kADC}) {
      const std::string mod = to_string(m);
      if (!fs::exists(dir / (mod + ".ptnsr"))) {
        out.warnings.push_back("patient " + pid + " missing modality " + mod + "; skipped");
        complete = false;
        break;
      }
      CohortItem item;
      item.volume.patient_id = pid;
      item.volume.modality = m;
      item.volume.voxels = read_tensor(dir / (mod + ".ptnsr"));
      if (fs::exists(dir / (mod + ".meta.json"))) {
        const auto meta = detail::read_json_file(dir / (mod + ".meta.json"));
        if (meta.contains("in_plane_spacing"))
          item.volume.in_plane_spacing = {meta["in_plane_spacing"].at(0).get<double>(),
                                          meta["in_plane_spacing"].at(1).get<double>()};
        item.volume.slice_thickness = meta.value("slice_thickness", 1.0);
      }
      item.volume.validate();
      const fs::path mdir = dir / "masks";
      if (fs::exists(mdir)) {
        std::vector<fs::path> files;
        const std::string suffix = "." + mod + ".ptnsr";
        for (const auto& e : fs::directory_iterator(mdir)) {
          const std::string name = e.path().filename().string();
          if (name.size() > suffix.size() && name.compare(name.size() - suffix.size(), suffix.size(), suffix) == 0)
            files.push_back(e.path());
        }
        std::sort(files.begin(), files.end());
        for (const auto& f : files) {
          const std::string name = f.filename().string();
          LesionMask mk;
          mk.patient_id = pid;
          mk.lesion_id = name.substr(0, name.size() - suffix.size());
          mk.mask = read_tensor(f);
          const fs::path meta = mdir / (mk.lesion_id + "." + mod + ".meta.json");
          mk.significance = significance_from_string(detail::read_json_file(meta).at("significance").get<std::string>());
          mk.validate(item.volume);
          item.masks.push_back(std::move(mk));
        }
      }
      items.push_back(std::move(item));
    }
    if (complete)
      for (auto& it : items) out.cohort.push_back(std::move(it));
  }
  sort_cohort(out.cohort);
  return out;
}

inline void write_cohort(const std::filesystem::path& root, const Cohort& cohort) {
  namespace fs = std::filesystem;
  for (const auto& item : cohort) {
    const auto& v = item.volume;
    const fs::path dir = root / v.patient_id;
    fs::create_directories(dir / "masks");
    const std::string mod = to_string(v.modality);
    write_tensor(dir / (mod + ".ptnsr"), v.voxels);
    detail::write_json_file(dir / (mod + ".meta.json"),
                            {{"in_plane_spacing", {v.in_plane_spacing[0], v.in_plane_spacing[1]}},
                             {"slice_thickness", v.slice_thickness}});
    for (const auto& m : item.masks) {
      write_tensor(dir / "masks" / (m.lesion_id + "." + mod + ".ptnsr"), m.mask);
      detail::write_json_file(dir / "masks" / (m.lesion_id + "." + mod + ".meta.json"),
                              {{"significance", to_string(m.significance)}});
    }
  }
}

}  // namespace patchtl
