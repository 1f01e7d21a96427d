#include "mags/datasets.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <fstream>

#include <fmt/format.h>

#include "mags/error.hpp"
#include "mags/rng.hpp"

namespace mags {

namespace {

constexpr std::uint32_t kImageMagic = 0x00000803;
constexpr std::uint32_t kLabelMagic = 0x00000801;

std::vector<unsigned char> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ParseError(fmt::format("cannot open '{}'", path.string()));
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

std::uint32_t read_be32(const std::vector<unsigned char>& bytes, std::size_t offset,
                        const std::filesystem::path& path) {
  if (bytes.size() < offset + 4) {
    throw ParseError(fmt::format("'{}' truncated: header needs {} bytes, file has {}",
                                 path.string(), offset + 4, bytes.size()));
  }
  return (std::uint32_t{bytes[offset]} << 24) | (std::uint32_t{bytes[offset + 1]} << 16) |
         (std::uint32_t{bytes[offset + 2]} << 8) | std::uint32_t{bytes[offset + 3]};
}

void put_be32(std::ofstream& out, std::uint32_t v) {
  const std::array<char, 4> b{static_cast<char>(v >> 24), static_cast<char>(v >> 16),
                              static_cast<char>(v >> 8), static_cast<char>(v)};
  out.write(b.data(), 4);
}

}  // namespace

Dataset load_idx(const std::filesystem::path& images, const std::filesystem::path& labels) {
  const auto img = read_file(images);
  const auto lab = read_file(labels);
  const std::uint32_t im = read_be32(img, 0, images);
  if (im != kImageMagic) {
    throw ParseError(fmt::format("'{}': bad image magic 0x{:08x}, expected 0x{:08x}",
                                 images.string(), im, kImageMagic));
  }
  const std::uint32_t lm = read_be32(lab, 0, labels);
  if (lm != kLabelMagic) {
    throw ParseError(fmt::format("'{}': bad label magic 0x{:08x}, expected 0x{:08x}",
                                 labels.string(), lm, kLabelMagic));
  }
  const std::size_t n = read_be32(img, 4, images);
  const std::size_t rows = read_be32(img, 8, images);
  const std::size_t cols = read_be32(img, 12, images);
  const std::size_t nl = read_be32(lab, 4, labels);
  if (n != nl) {
    throw ParseError(fmt::format("image count {} != label count {}", n, nl));
  }
  const std::size_t d = rows * cols;
  if (img.size() < 16 + n * d) {
    throw ParseError(fmt::format("'{}' truncated: expected {} pixel bytes, found {}",
                                 images.string(), n * d, img.size() - 16));
  }
  if (lab.size() < 8 + n) {
    throw ParseError(fmt::format("'{}' truncated: expected {} labels, found {}",
                                 labels.string(), n, lab.size() - 8));
  }
  Dataset ds;
  ds.height = rows;
  ds.width = cols;
  ds.features = Matrix(n, d);
  auto f = ds.features.values();
  for (std::size_t i = 0; i < n * d; ++i) f[i] = static_cast<double>(img[16 + i]) / 255.0;
  ds.labels.resize(n);
  int max_label = 1;
  for (std::size_t i = 0; i < n; ++i) {
    ds.labels[i] = lab[8 + i];
    max_label = std::max(max_label, ds.labels[i]);
  }
  ds.class_count = static_cast<std::size_t>(max_label) + 1;
  return ds;
}

void write_idx(const Dataset& ds, const std::filesystem::path& images,
               const std::filesystem::path& labels) {
  std::ofstream im(images, std::ios::binary);
  std::ofstream lb(labels, std::ios::binary);
  if (!im || !lb) throw ConfigError("cannot open IDX output files");
  put_be32(im, kImageMagic);
  put_be32(im, static_cast<std::uint32_t>(ds.size()));
  put_be32(im, static_cast<std::uint32_t>(ds.height));
  put_be32(im, static_cast<std::uint32_t>(ds.width));
  for (double v : ds.features.values()) {
    const double c = std::clamp(v, 0.0, 1.0);
    im.put(static_cast<char>(static_cast<unsigned char>(std::lround(c * 255.0))));
  }
  put_be32(lb, kLabelMagic);
  put_be32(lb, static_cast<std::uint32_t>(ds.size()));
  for (int l : ds.labels) lb.put(static_cast<char>(static_cast<unsigned char>(l)));
}

PartitionSpec split_patches(std::size_t height, std::size_t width, std::size_t grid_side) {
  if (grid_side == 0 || height % grid_side != 0 || width % grid_side != 0) {
    throw ConfigError(fmt::format("image {}x{} cannot be split into a {}x{} grid", height, width,
                                  grid_side, grid_side));
  }
  const std::size_t bh = height / grid_side;
  const std::size_t bw = width / grid_side;
  PartitionSpec spec;
  spec.grid_side = grid_side;
  for (std::size_t gr = 0; gr < grid_side; ++gr) {
    for (std::size_t gc = 0; gc < grid_side; ++gc) {
      std::vector<std::size_t> idx;
      idx.reserve(bh * bw);
      for (std::size_t r = 0; r < bh; ++r) {
        for (std::size_t c = 0; c < bw; ++c) idx.push_back((gr * bh + r) * width + gc * bw + c);
      }
      spec.feature_indices.push_back(std::move(idx));
    }
  }
  return spec;
}

ClientDataset make_client_dataset(const Dataset& ds, const PartitionSpec& spec) {
  ClientDataset out;
  out.labels = ds.labels;
  out.class_count = ds.class_count;
  for (const auto& idx : spec.feature_indices) {
    Matrix v(ds.size(), idx.size());
    for (std::size_t r = 0; r < ds.size(); ++r) {
      auto src = ds.features.row(r);
      auto dst = v.row(r);
      for (std::size_t j = 0; j < idx.size(); ++j) dst[j] = src[idx[j]];
    }
    out.views.push_back(std::move(v));
  }
  return out;
}

std::vector<Matrix> gather_rows(const ClientDataset& data, std::span<const std::size_t> rows) {
  std::vector<Matrix> out;
  out.reserve(data.views.size());
  for (const auto& view : data.views) {
    Matrix m(rows.size(), view.cols());
    for (std::size_t i = 0; i < rows.size(); ++i) {
      auto src = view.row(rows[i]);
      std::copy(src.begin(), src.end(), m.row(i).begin());
    }
    out.push_back(std::move(m));
  }
  return out;
}

Dataset subset(const Dataset& ds, std::span<const std::size_t> rows) {
  Dataset out;
  out.class_count = ds.class_count;
  out.height = ds.height;
  out.width = ds.width;
  out.features = Matrix(rows.size(), ds.features.cols());
  out.labels.reserve(rows.size());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    auto src = ds.features.row(rows[i]);
    std::copy(src.begin(), src.end(), out.features.row(i).begin());
    out.labels.push_back(ds.labels[rows[i]]);
  }
  return out;
}

DataSplits make_splits(const Dataset& train, std::uint64_t seed) {
  Rng rng(seed);
  const auto order = permutation(train.size(), rng);
  const std::size_t n_val = train.size() / 5;
  const std::size_t n_train = train.size() - n_val;
  std::span<const std::size_t> all(order);
  return {subset(train, all.first(n_train)), subset(train, all.subspan(n_train))};
}

Matrix synth_prototypes(std::size_t classes, std::size_t grid_side, std::uint64_t seed) {
  constexpr std::size_t side = 28;
  if (classes < 2) throw ConfigError("synthetic dataset needs at least 2 classes");
  const PartitionSpec spec = split_patches(side, side, grid_side);
  constexpr double background = 0.35;
  constexpr double patch_amplitude = 0.04;
  constexpr double pixel_amplitude = 0.05;
  Rng rng(derive_seed(seed, "prototypes"));
  Matrix protos(classes, side * side, background);
  for (std::size_t k = 0; k < classes; ++k) {
    auto row = protos.row(k);
    for (const auto& idx : spec.feature_indices) {
      const double offset = patch_amplitude * rng.normal();
      for (std::size_t p : idx) row[p] += offset;
    }
    for (double& v : row) v = std::clamp(v + pixel_amplitude * rng.normal(), 0.0, 1.0);
  }
  return protos;
}

Dataset synth_dataset(std::size_t n, std::size_t classes, std::size_t grid_side,
                      std::uint64_t seed, double sigma) {
  const Matrix protos = synth_prototypes(classes, grid_side, seed);
  Rng rng(derive_seed(seed, "samples"));
  Dataset ds;
  ds.class_count = classes;
  ds.features = Matrix(n, protos.cols());
  ds.labels.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t k = rng.below(classes);
    ds.labels[i] = static_cast<int>(k);
    auto src = protos.row(k);
    auto dst = ds.features.row(i);
    for (std::size_t j = 0; j < dst.size(); ++j) {
      const double noise = sigma == 0.0 ? 0.0 : sigma * rng.normal();
      dst[j] = std::clamp(src[j] + noise, 0.0, 1.0);
    }
  }
  return ds;
}

}  // namespace mags
