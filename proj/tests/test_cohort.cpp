#include <gtest/gtest.h>

#include "patchtl/cohort.hpp"
#include "support.hpp"

using namespace patchtl;
using testing_support::TempDir;

namespace {

Volume volume(std::size_t slices) {
  Volume v;
  v.patient_id = "p";
  v.voxels = testing_support::random_tensor({slices, 6, 6}, slices);
  return v;
}

LesionMask lesion(const Volume& v, Significance s, std::vector<std::size_t> zs) {
  LesionMask m{v.patient_id, "L", s, Tensor(v.voxels.shape())};
  for (auto z : zs) m.mask.at(z, 2, 3) = 1.0f;
  return m;
}

std::vector<PatientStratum> strata(std::size_t n_cs, std::size_t n_ncs) {
  std::vector<PatientStratum> ps;
  for (std::size_t i = 0; i < n_cs + n_ncs; ++i) ps.push_back({"id" + std::to_string(i), i < n_cs});
  return ps;
}

// Reference apportionment: floor of the quota, then one extra to the largest
// fractional parts.
std::array<double, 3> quota(std::size_t n) {
  return {0.7 * double(n), 0.2 * double(n), 0.1 * double(n)};
}

}  // namespace

TEST(LabelSlices, CsMaskOverThreeSlices) {
  const Volume v = volume(8);
  const auto s = label_slices(v, {lesion(v, Significance::kCS, {3, 4, 5})});
  ASSERT_EQ(s.size(), 3u);
  for (std::size_t i = 0; i < 3; ++i) {
    EXPECT_EQ(s[i].slice_index, 3 + i);
    EXPECT_EQ(s[i].label, 1);
    EXPECT_EQ(s[i].image, v.voxels.slice(3 + i));
    EXPECT_EQ(s[i].lesion_mask.at(2, 3), 1.0f);
  }
}

TEST(LabelSlices, SingleNcsSlice) {
  const Volume v = volume(4);
  const auto s = label_slices(v, {lesion(v, Significance::kNCS, {0})});
  ASSERT_EQ(s.size(), 1u);
  EXPECT_EQ(s[0].slice_index, 0u);
  EXPECT_EQ(s[0].label, 0);
}

TEST(LabelSlices, CsDominatesOnSharedSlice) {
  const Volume v = volume(5);
  const auto s = label_slices(v, {lesion(v, Significance::kNCS, {1, 2}), lesion(v, Significance::kCS, {2, 3})});
  ASSERT_EQ(s.size(), 3u);
  EXPECT_EQ(s[0].label, 0);
  EXPECT_EQ(s[1].label, 1);
  EXPECT_EQ(s[2].label, 1);
}

TEST(LabelSlices, MisalignedMaskRejected) {
  const Volume v = volume(5);
  LesionMask m{"p", "L", Significance::kCS, Tensor({5, 6, 7}, 1.0f)};
  EXPECT_THROW(label_slices(v, {m}), AlignmentError);
}

TEST(LargestRemainder, ExactQuotasUntouched) {
  EXPECT_EQ(largest_remainder(10, {0.7, 0.2, 0.1}, {0, 1, 2}), (std::array<std::size_t, 3>{7, 2, 1}));
}

TEST(LargestRemainder, RemaindersGoToLargestFractions) {
  // 3 * (.7,.2,.1) = (2.1, .6, .3): one left over, to test.
  EXPECT_EQ(largest_remainder(3, {0.7, 0.2, 0.1}, {0, 1, 2}), (std::array<std::size_t, 3>{2, 1, 0}));
  // 7 * (.7,.2,.1) = (4.9, 1.4, .7): two left over, to train and val.
  EXPECT_EQ(largest_remainder(7, {0.7, 0.2, 0.1}, {0, 1, 2}), (std::array<std::size_t, 3>{5, 1, 1}));
}

TEST(LargestRemainder, TiesFollowGivenOrder) {
  // 2 * (.25,.25,.5): exact. 1 * (.25,.25,.5): val gets it. 3*(.5,.25,.25) -> (1.5,.75,.75): ties between test/val.
  EXPECT_EQ(largest_remainder(3, {0.5, 0.25, 0.25}, {0, 1, 2}), (std::array<std::size_t, 3>{1, 1, 1}));
  EXPECT_EQ(largest_remainder(2, {0.5, 0.25, 0.25}, {2, 1, 0}), (std::array<std::size_t, 3>{1, 0, 1}));
  EXPECT_EQ(largest_remainder(2, {0.5, 0.25, 0.25}, {1, 2, 0}), (std::array<std::size_t, 3>{1, 1, 0}));
}

TEST(Split, DeterministicForSameSeed) {
  const auto a = stratified_patient_split(strata(3, 7), {0.7, 0.2, 0.1}, 42);
  const auto b = stratified_patient_split(strata(3, 7), {0.7, 0.2, 0.1}, 42);
  EXPECT_EQ(a, b);
}

TEST(Split, TenPatientsSizes) {
  const auto m = stratified_patient_split(strata(3, 7), {0.7, 0.2, 0.1}, 1);
  // CS stratum 3 -> (2,1,0); NCS stratum 7 -> (5,1,1).
  EXPECT_EQ(m.patients_in(SplitSet::kTrain).size(), 7u);
  EXPECT_EQ(m.patients_in(SplitSet::kTest).size(), 2u);
  EXPECT_EQ(m.patients_in(SplitSet::kVal).size(), 1u);
  EXPECT_EQ(m.counts.at(SplitSet::kTrain).cs_patients, 2u);
  EXPECT_EQ(m.counts.at(SplitSet::kTest).cs_patients, 1u);
  EXPECT_EQ(m.counts.at(SplitSet::kVal).cs_patients, 0u);
}

TEST(Split, InputOrderDoesNotMatter) {
  auto ps = strata(25, 75);
  const auto a = stratified_patient_split(ps, {0.7, 0.2, 0.1}, 9);
  Rng rng(3);
  rng.shuffle(ps.begin(), ps.end());
  EXPECT_EQ(stratified_patient_split(ps, {0.7, 0.2, 0.1}, 9), a);
}

TEST(Split, HundredPhantomPatientsWithinOneOfTargets) {
  PhantomSpec spec;
  spec.n_patients = 100;
  spec.cs_fraction = 0.25;
  spec.n_slices = 4;
  spec.t2w_hw = spec.adc_hw = {16, 16};
  const Cohort c = generate_phantom_cohort(spec);
  const auto flags = patient_cs_flags(c);
  const auto m = stratified_patient_split(c, {0.7, 0.2, 0.1}, 5);
  std::size_t n_cs = 0;
  for (auto& [p, f] : flags) n_cs += f;
  const auto q = quota(n_cs);
  const SplitSet sets[3] = {SplitSet::kTrain, SplitSet::kTest, SplitSet::kVal};
  for (int i = 0; i < 3; ++i) EXPECT_LE(std::abs(double(m.counts.at(sets[i]).cs_patients) - q[i]), 1.0);
}

TEST(Split, TooFewPatientsOrEmptySetIsSizingError) {
  EXPECT_THROW(stratified_patient_split(strata(1, 1), {0.7, 0.2, 0.1}, 0), SizingError);
  // Four patients: 0.1 quota never reaches a whole patient.
  EXPECT_THROW(stratified_patient_split(strata(1, 3), {0.7, 0.2, 0.1}, 0), SizingError);
}

TEST(Split, FractionsValidated) {
  EXPECT_THROW(stratified_patient_split(strata(3, 7), {0.7, 0.2, 0.2}, 0), ValidationError);
  EXPECT_THROW(stratified_patient_split(strata(3, 7), {0.8, 0.2, 0.0}, 0), ValidationError);
}

TEST(Split, RecordedCountsMatchRecount) {
  PhantomSpec spec;
  spec.n_patients = 30;
  spec.n_slices = 6;
  spec.t2w_hw = spec.adc_hw = {16, 16};
  const Cohort c = generate_phantom_cohort(spec);
  PreprocessConfig pp;
  pp.t2w_hw = pp.adc_hw = {16, 16};
  const auto samples = prepare_slices(c, Modality::kT2W, pp);
  auto m = stratified_patient_split(c, {0.7, 0.2, 0.1}, 4);
  m.counts = count_slices(m, samples, patient_cs_flags(c));
  std::size_t total = 0;
  for (auto& [set, k] : m.counts) {
    EXPECT_EQ(k.slices, k.cs_slices + k.ncs_slices);
    total += k.slices;
    std::size_t direct = 0;
    for (const auto& s : samples) direct += m.set_of(s.patient_id) == set;
    EXPECT_EQ(direct, k.slices);
  }
  EXPECT_EQ(total, samples.size());
}

TEST(Manifest, CsvAndSummaryRoundTrip) {
  TempDir dir("manifest");
  auto m = stratified_patient_split(strata(4, 10), {0.7, 0.2, 0.1}, 12);
  m.counts[SplitSet::kTrain].slices = 17;
  write_manifest(dir / "manifest.csv", m);
  std::ifstream f(dir / "manifest.csv");
  std::string header;
  std::getline(f, header);
  EXPECT_EQ(header, "patient_id,set");
  EXPECT_EQ(read_manifest(dir / "manifest.csv"), m);
}

TEST(PrepareSlices, CanonicalSizeAndUnitRange) {
  PhantomSpec spec;
  spec.n_patients = 4;
  spec.t2w_hw = {40, 40};
  spec.adc_hw = {20, 20};
  PreprocessConfig pp;
  pp.t2w_hw = {64, 64};
  pp.adc_hw = {32, 32};
  const Cohort c = generate_phantom_cohort(spec);
  for (Modality m : {Modality::kT2W, Modality::kADC}) {
    const auto s = prepare_slices(c, m, pp);
    ASSERT_FALSE(s.empty());
    for (const auto& x : s) {
      EXPECT_EQ(x.image.shape(), (Shape{pp.canonical(m).h, pp.canonical(m).w}));
      EXPECT_EQ(x.lesion_mask.shape(), x.image.shape());
      EXPECT_GE(x.image.min(), 0.0f);
      EXPECT_LE(x.image.max(), 1.0f);
    }
  }
}
