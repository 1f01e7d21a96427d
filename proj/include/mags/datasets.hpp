#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "mags/nn.hpp"

namespace mags {

struct Dataset {
  Matrix features;  // n x (height*width), values in [0, 1]
  std::vector<int> labels;
  std::size_t class_count = 0;
  std::size_t height = 28;
  std::size_t width = 28;

  std::size_t size() const { return labels.size(); }
};

// Big-endian IDX: images magic 0x00000803 (n, rows, cols), labels magic
// 0x00000801 (n). Pixels are scaled by 1/255. class_count is max label + 1
// (at least 2).
Dataset load_idx(const std::filesystem::path& images, const std::filesystem::path& labels);
// Pixels are written as round(255 * value).
void write_idx(const Dataset& ds, const std::filesystem::path& images,
               const std::filesystem::path& labels);

// Client c owns the c-th block of a g x g row-major tiling of the image;
// its features are the block's pixels in row-major order.
struct PartitionSpec {
  std::size_t grid_side = 0;
  std::vector<std::vector<std::size_t>> feature_indices;

  std::size_t client_count() const { return feature_indices.size(); }
  std::size_t features_per_client() const { return feature_indices.front().size(); }
};

PartitionSpec split_patches(std::size_t height, std::size_t width, std::size_t grid_side);
inline PartitionSpec split_patches(const Dataset& ds, std::size_t grid_side) {
  return split_patches(ds.height, ds.width, grid_side);
}

// A dataset held as per-client feature views (the vertically split form).
struct ClientDataset {
  std::vector<Matrix> views;  // one n x |S_c| matrix per client
  std::vector<int> labels;
  std::size_t class_count = 0;

  std::size_t size() const { return labels.size(); }
  std::size_t client_count() const { return views.size(); }
};

ClientDataset make_client_dataset(const Dataset& ds, const PartitionSpec& spec);

// Rows `rows` of every client view.
std::vector<Matrix> gather_rows(const ClientDataset& data, std::span<const std::size_t> rows);

Dataset subset(const Dataset& ds, std::span<const std::size_t> rows);

struct DataSplits {
  Dataset train;
  Dataset validation;
};

// Seeded Fisher-Yates permutation (see Rng), then the first
// n - floor(n/5) rows train and the remainder validate: 60000 -> 48000/12000.
DataSplits make_splits(const Dataset& train, std::uint64_t seed);

// Seeded class-prototype images: every (class, patch) pair gets its own
// brightness offset and every pixel its own texture term around a common
// background; samples add N(0, sigma^2) noise and clip to [0, 1]. The class
// signal is spread thinly over all pixels, so removing patches degrades a
// classifier gradually rather than not at all.
Dataset synth_dataset(std::size_t n, std::size_t classes, std::size_t grid_side,
                      std::uint64_t seed, double sigma);
// Class prototypes used by synth_dataset (classes x 784).
Matrix synth_prototypes(std::size_t classes, std::size_t grid_side, std::uint64_t seed);

}  // namespace mags
