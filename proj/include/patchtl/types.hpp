#pragma once

#include <string>
#include <utility>

#include "patchtl/error.hpp"

namespace patchtl {

enum class Modality { kT2W, kADC };
enum class Significance { kCS, kNCS };
enum class SplitSet { kTrain, kTest, kVal };

inline std::string to_string(Modality m) { return m == Modality::kT2W ? "T2W" : "ADC"; }
inline std::string to_string(Significance s) { return s == Significance::kCS ? "CS" : "NCS"; }
inline std::string to_string(SplitSet s) {
  switch (s) {
    case SplitSet::kTrain: return "TRAIN";
    case SplitSet::kTest: return "TEST";
    case SplitSet::kVal: return "VAL";
  }
  return "?";
}

inline Modality modality_from_string(const std::string& s) {
  if (s == "T2W") return Modality::kT2W;
  if (s == "ADC") return Modality::kADC;
  throw ValidationError("unknown modality '" + s + "' (expected T2W or ADC)");
}

inline Significance significance_from_string(const std::string& s) {
  if (s == "CS") return Significance::kCS;
  if (s == "NCS") return Significance::kNCS;
  throw ValidationError("unknown significance '" + s + "' (expected CS or NCS)");
}

inline SplitSet split_set_from_string(const std::string& s) {
  if (s == "TRAIN") return SplitSet::kTrain;
  if (s == "TEST") return SplitSet::kTest;
  if (s == "VAL") return SplitSet::kVal;
  throw ValidationError("unknown split set '" + s + "'");
}

/// Height, width in pixels.
struct ImageSize {
  std::size_t h = 0;
  std::size_t w = 0;
  friend bool operator==(const ImageSize&, const ImageSize&) = default;
};

inline std::string to_string(ImageSize s) { return std::to_string(s.h) + "x" + std::to_string(s.w); }

}  // namespace patchtl
