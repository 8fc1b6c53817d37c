#pragma once

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>
#include <utility>
#include <vector>

#include "patchtl/core_data.hpp"
#include "patchtl/tensor_io.hpp"

namespace patchtl {

using Cell = std::pair<std::size_t, std::size_t>;  // (row, col)

struct PatchGrid {
  ImageSize image_hw;
  std::size_t patch_size = 0;
  std::size_t rows = 0;
  std::size_t cols = 0;

  std::size_t cells() const { return rows * cols; }
  friend bool operator==(const PatchGrid&, const PatchGrid&) = default;
};

inline constexpr std::size_t kMinPatchSize = 32;

inline PatchGrid make_grid(ImageSize image_hw, std::size_t patch_size) {
  if (patch_size < kMinPatchSize)
    throw ValidationError("patch size " + std::to_string(patch_size) + " below minimum " + std::to_string(kMinPatchSize));
  if (image_hw.h % patch_size != 0 || image_hw.w % patch_size != 0 || image_hw.h == 0 || image_hw.w == 0)
    throw TilingError("image " + to_string(image_hw) + " is not tiled exactly by " + std::to_string(patch_size) +
                      "-pixel patches");
  return {image_hw, patch_size, image_hw.h / patch_size, image_hw.w / patch_size};
}

struct Patch {
  std::string patient_id;
  Modality modality = Modality::kT2W;
  std::size_t slice_index = 0;
  Cell cell{0, 0};
  Tensor pixels;
  int label = 0;
};

inline Tensor crop(const Tensor& image, std::size_t r0, std::size_t c0, std::size_t size) {
  Tensor out({size, size});
  const std::size_t w = image.dim(1);
  for (std::size_t r = 0; r < size; ++r)
    std::copy_n(image.data() + (r0 + r) * w + c0, size, out.data() + r * size);
  return out;
}

inline void check_grid_matches(const Tensor& image, const PatchGrid& grid) {
  if (image.rank() != 2 || image.dim(0) != grid.image_hw.h || image.dim(1) != grid.image_hw.w)
    throw AlignmentError("image " + shape_str(image.shape()) + " does not match grid " + to_string(grid.image_hw));
}

/// Cells in row-major order; an empty selection means every cell.
inline std::vector<Cell> grid_cells(const PatchGrid& grid, const std::vector<Cell>& selection = {}) {
  std::vector<Cell> cells;
  if (selection.empty()) {
    for (std::size_t r = 0; r < grid.rows; ++r)
      for (std::size_t c = 0; c < grid.cols; ++c) cells.emplace_back(r, c);
    return cells;
  }
  for (const auto& [r, c] : selection)
    if (r >= grid.rows || c >= grid.cols)
      throw ValidationError("selection cell (" + std::to_string(r) + "," + std::to_string(c) + ") outside " +
                            std::to_string(grid.rows) + "x" + std::to_string(grid.cols) + " grid");
  cells = selection;
  std::sort(cells.begin(), cells.end());
  cells.erase(std::unique(cells.begin(), cells.end()), cells.end());
  return cells;
}

inline std::vector<Patch> extract_patches(const SliceSample& sample, const PatchGrid& grid,
                                          const std::vector<Cell>& selection = {}) {
  check_grid_matches(sample.image, grid);
  std::vector<Patch> out;
  for (const auto& cell : grid_cells(grid, selection))
    out.push_back({sample.patient_id, sample.modality, sample.slice_index, cell,
                   crop(sample.image, cell.first * grid.patch_size, cell.second * grid.patch_size, grid.patch_size),
                   sample.label});
  return out;
}

inline std::vector<Patch> extract_patches(const std::vector<SliceSample>& samples, const PatchGrid& grid,
                                          const std::vector<Cell>& selection = {}) {
  std::vector<Patch> out;
  for (const auto& s : samples) {
    auto p = extract_patches(s, grid, selection);
    std::move(p.begin(), p.end(), std::back_inserter(out));
  }
  return out;
}

/// Inverse of full-grid extraction (patches in row-major order).
inline Tensor reassemble(const std::vector<Patch>& patches, const PatchGrid& grid) {
  if (patches.size() != grid.cells()) throw ValidationError("reassemble needs one patch per grid cell");
  Tensor out({grid.image_hw.h, grid.image_hw.w});
  for (const auto& p : patches)
    for (std::size_t r = 0; r < grid.patch_size; ++r)
      std::copy_n(p.pixels.data() + r * grid.patch_size, grid.patch_size,
                  out.data() + (p.cell.first * grid.patch_size + r) * grid.image_hw.w + p.cell.second * grid.patch_size);
  return out;
}

struct FrequencyMap {
  PatchGrid grid;
  std::vector<std::size_t> counts;  // rows*cols, row-major
  std::size_t contributing_slices = 0;

  std::size_t at(std::size_t r, std::size_t c) const { return counts.at(r * grid.cols + c); }
};

inline FrequencyMap lesion_frequency_map(const std::vector<SliceSample>& train_samples, const PatchGrid& grid) {
  FrequencyMap fm{grid, std::vector<std::size_t>(grid.cells(), 0), 0};
  for (const auto& s : train_samples) {
    check_grid_matches(s.lesion_mask, grid);
    ++fm.contributing_slices;
    for (std::size_t r = 0; r < grid.rows; ++r)
      for (std::size_t c = 0; c < grid.cols; ++c) {
        bool hit = false;
        for (std::size_t y = 0; y < grid.patch_size && !hit; ++y) {
          const float* row = s.lesion_mask.data() + (r * grid.patch_size + y) * grid.image_hw.w + c * grid.patch_size;
          hit = std::any_of(row, row + grid.patch_size, [](float v) { return v != 0.0f; });
        }
        fm.counts[r * grid.cols + c] += hit;
      }
  }
  return fm;
}

/// The k most frequent cells; equal counts resolve in row-major order.
/// Returned in that rank order.
inline std::vector<Cell> select_top_k(const FrequencyMap& fm, std::size_t k) {
  if (k < 1 || k > fm.grid.cells())
    throw ValidationError("selection k=" + std::to_string(k) + " outside [1, " + std::to_string(fm.grid.cells()) + "]");
  std::vector<std::size_t> idx(fm.grid.cells());
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return fm.counts[a] > fm.counts[b]; });
  std::vector<Cell> out;
  for (std::size_t i = 0; i < k; ++i) out.emplace_back(idx[i] / fm.grid.cols, idx[i] % fm.grid.cols);
  return out;
}

inline std::string patch_file_name(const Patch& p) {
  return p.patient_id + "_" + std::to_string(p.slice_index) + "_" + std::to_string(p.cell.first) + "_" +
         std::to_string(p.cell.second) + ".ptnsr";
}

/// Offline export: one tensor file per patch plus index.csv.
inline void export_patches(const std::filesystem::path& dir, const std::vector<Patch>& patches) {
  std::filesystem::create_directories(dir);
  std::ofstream idx(dir / "index.csv");
  if (!idx) throw IoError("cannot write " + (dir / "index.csv").string());
  idx << "patient,slice,row,col,label\n";
  for (const auto& p : patches) {
    write_tensor(dir / patch_file_name(p), p.pixels);
    idx << p.patient_id << ',' << p.slice_index << ',' << p.cell.first << ',' << p.cell.second << ',' << p.label << '\n';
  }
}

}  // namespace patchtl
