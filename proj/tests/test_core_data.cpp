#include <gtest/gtest.h>

#include "patchtl/cohort.hpp"
#include "patchtl/core_data.hpp"
#include "support.hpp"

using namespace patchtl;
using testing_support::TempDir;

namespace {

Volume make_volume(const std::string& pid, Modality m, Shape shape) {
  Volume v;
  v.patient_id = pid;
  v.modality = m;
  v.voxels = testing_support::random_tensor(std::move(shape), std::hash<std::string>{}(pid) + int(m));
  return v;
}

LesionMask box_mask(const Volume& v, const std::string& id, Significance s, std::size_t z0, std::size_t z1) {
  LesionMask m;
  m.patient_id = v.patient_id;
  m.lesion_id = id;
  m.significance = s;
  m.mask = Tensor(v.voxels.shape());
  for (std::size_t z = z0; z <= z1; ++z) m.mask.at(z, 1, 1) = 1.0f;
  return m;
}

Cohort fixture(std::size_t patients) {
  Cohort c;
  for (std::size_t p = 0; p < patients; ++p)
    for (Modality m : {Modality::kT2W, Modality::kADC}) {
      CohortItem item;
      item.volume = make_volume("pt" + std::to_string(p), m, {6, 8, 8});
      item.masks.push_back(box_mask(item.volume, "L1", p % 2 ? Significance::kCS : Significance::kNCS, 2, 3));
      c.push_back(std::move(item));
    }
  return c;
}

bool same_cohort(const Cohort& a, const Cohort& b) {
  if (a.size() != b.size()) return false;
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (a[i].volume.patient_id != b[i].volume.patient_id || a[i].volume.modality != b[i].volume.modality ||
        !(a[i].volume.voxels == b[i].volume.voxels) || a[i].masks.size() != b[i].masks.size())
      return false;
    for (std::size_t k = 0; k < a[i].masks.size(); ++k)
      if (!(a[i].masks[k].mask == b[i].masks[k].mask) || a[i].masks[k].significance != b[i].masks[k].significance)
        return false;
  }
  return true;
}

}  // namespace

TEST(Volume, RejectsNonFiniteAndBadRank) {
  Volume v = make_volume("a", Modality::kT2W, {2, 3, 3});
  EXPECT_NO_THROW(v.validate());
  v.voxels[4] = std::numeric_limits<float>::quiet_NaN();
  EXPECT_THROW(v.validate(), ValidationError);
  v.voxels = Tensor({3, 3});
  EXPECT_THROW(v.validate(), ValidationError);
}

TEST(LesionMask, ShapeAndEmptinessChecks) {
  const Volume v = make_volume("a", Modality::kT2W, {10, 10, 12});
  LesionMask m;
  m.mask = Tensor({10, 10, 10}, 1.0f);
  EXPECT_THROW(m.validate(v), AlignmentError);
  m.mask = Tensor({10, 10, 12});
  EXPECT_THROW(m.validate(v), ValidationError);
}

TEST(Ingest, TwoPatientFixtureGivesFourVolumes) {
  TempDir dir("ingest");
  write_cohort(dir.path(), fixture(2));
  const auto res = ingest_cohort(dir.path());
  EXPECT_TRUE(res.warnings.empty());
  ASSERT_EQ(res.cohort.size(), 4u);
  EXPECT_EQ(res.cohort[0].volume.patient_id, "pt0");
  EXPECT_EQ(res.cohort[0].volume.modality, Modality::kT2W);
  EXPECT_EQ(res.cohort[1].volume.modality, Modality::kADC);
  EXPECT_EQ(res.cohort[2].volume.patient_id, "pt1");
  EXPECT_TRUE(same_cohort(res.cohort, fixture(2)));
}

TEST(Ingest, EmptyDirectoryGivesEmptyCohort) {
  TempDir dir("ingest");
  const auto res = ingest_cohort(dir.path());
  EXPECT_TRUE(res.cohort.empty());
  EXPECT_TRUE(res.warnings.empty());
}

TEST(Ingest, MisalignedMaskIsAlignmentError) {
  TempDir dir("ingest");
  Cohort c = fixture(1);
  write_cohort(dir.path(), c);
  write_tensor(dir / "pt0/masks/L1.T2W.ptnsr", Tensor({10, 10, 10}, 1.0f));
  write_tensor(dir / "pt0/T2W.ptnsr", Tensor({10, 10, 12}, 1.0f));
  EXPECT_THROW(ingest_cohort(dir.path()), AlignmentError);
}

TEST(Ingest, MissingModalityWarnsAndSkips) {
  TempDir dir("ingest");
  write_cohort(dir.path(), fixture(2));
  std::filesystem::remove(dir / "pt1/ADC.ptnsr");
  const auto res = ingest_cohort(dir.path());
  ASSERT_EQ(res.cohort.size(), 2u);
  EXPECT_EQ(res.cohort[0].volume.patient_id, "pt0");
  ASSERT_EQ(res.warnings.size(), 1u);
  EXPECT_NE(res.warnings[0].find("pt1"), std::string::npos);
}

TEST(Phantom, DeterministicForSameSpec) {
  PhantomSpec s;
  s.n_patients = 10;
  s.seed = 7;
  EXPECT_TRUE(same_cohort(generate_phantom_cohort(s), generate_phantom_cohort(s)));
  PhantomSpec t = s;
  t.seed = 8;
  EXPECT_FALSE(same_cohort(generate_phantom_cohort(s), generate_phantom_cohort(t)));
}

TEST(Phantom, CsFractionWithinTenPoints) {
  PhantomSpec s;
  s.n_patients = 100;
  s.cs_fraction = 0.25;
  s.seed = 1;
  const auto flags = patient_cs_flags(generate_phantom_cohort(s));
  ASSERT_EQ(flags.size(), 100u);
  const double frac = double(std::count_if(flags.begin(), flags.end(), [](auto& kv) { return kv.second; })) / 100.0;
  EXPECT_GE(frac, 0.15);
  EXPECT_LE(frac, 0.35);
}

TEST(Phantom, TwoPatientsFourVolumesWithMasks) {
  PhantomSpec s;
  s.n_patients = 2;
  s.cs_fraction = 0.5;
  s.seed = 3;
  const Cohort c = generate_phantom_cohort(s);
  ASSERT_EQ(c.size(), 4u);
  for (const auto& item : c) {
    EXPECT_GE(item.masks.size(), 1u);
    for (const auto& m : item.masks) EXPECT_NO_THROW(m.validate(item.volume));
    EXPECT_TRUE(item.volume.voxels.all_finite());
  }
  const auto flags = patient_cs_flags(c);
  EXPECT_EQ(std::count_if(flags.begin(), flags.end(), [](auto& kv) { return kv.second; }), 1);
}

TEST(Phantom, ModalitiesUseConfiguredSizes) {
  PhantomSpec s;
  s.n_patients = 3;
  s.t2w_hw = {64, 48};
  s.adc_hw = {32, 32};
  for (const auto& item : generate_phantom_cohort(s)) {
    const ImageSize want = item.volume.modality == Modality::kT2W ? s.t2w_hw : s.adc_hw;
    EXPECT_EQ(item.volume.slice_hw(), want);
  }
}

// CS lesions are bright on T2W and dark on ADC: inside each CS mask, compare
// against the same cohort rendered with a quarter of the contrast.
TEST(Phantom, LesionContrastSignPerModality) {
  PhantomSpec s;
  s.n_patients = 20;
  s.noise_level = 0.0;
  s.seed = 5;
  PhantomSpec flat = s;
  flat.lesion_contrast = s.lesion_contrast / 4;
  const Cohort with = generate_phantom_cohort(s), without = generate_phantom_cohort(flat);
  ASSERT_EQ(with.size(), without.size());
  int checked = 0;
  for (std::size_t k = 0; k < with.size(); ++k)
    for (const auto& m : with[k].masks) {
      if (m.significance != Significance::kCS) continue;
      double delta = 0;
      std::size_t n = 0;
      for (std::size_t i = 0; i < m.mask.size(); ++i)
        if (m.mask[i] != 0.0f) {
          delta += with[k].volume.voxels[i] - without[k].volume.voxels[i];
          ++n;
        }
      delta /= double(n);
      if (with[k].volume.modality == Modality::kT2W) {
        EXPECT_GT(delta, 0.0);
      } else {
        EXPECT_LT(delta, 0.0);
      }
      ++checked;
    }
  EXPECT_GT(checked, 0);
}

TEST(Phantom, WrittenTreeIsReadBackIdentically) {
  TempDir dir("phantom");
  PhantomSpec s;
  s.n_patients = 4;
  const Cohort c = generate_phantom_cohort(s);
  write_cohort(dir.path(), c);
  EXPECT_TRUE(same_cohort(ingest_cohort(dir.path()).cohort, c));
}

TEST(Phantom, InvalidSpecRejected) {
  PhantomSpec s;
  s.n_patients = 0;
  EXPECT_THROW(generate_phantom_cohort(s), ValidationError);
  s.n_patients = 10;
  s.cs_fraction = 1.0;
  EXPECT_THROW(generate_phantom_cohort(s), ValidationError);
}
