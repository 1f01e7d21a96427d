#include <doctest.h>

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <string>
#include <vector>

#include "mags/datasets.hpp"
#include "mags/error.hpp"
#include "mags/nn.hpp"

using namespace mags;

namespace {

std::filesystem::path temp_dir(const std::string& name) {
  const auto dir = std::filesystem::temp_directory_path() / ("mags_test_" + name);
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

void write_bytes(const std::filesystem::path& p, const std::vector<unsigned char>& bytes) {
  std::ofstream out(p, std::ios::binary);
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

// Two 2x3 images and their labels, byte by byte.
std::vector<unsigned char> fixture_images() {
  return {0x00, 0x00, 0x08, 0x03,  // magic
          0x00, 0x00, 0x00, 0x02,  // count
          0x00, 0x00, 0x00, 0x02,  // rows
          0x00, 0x00, 0x00, 0x03,  // cols
          0, 51, 102, 153, 204, 255,
          255, 0, 0, 0, 0, 17};
}
std::vector<unsigned char> fixture_labels() {
  return {0x00, 0x00, 0x08, 0x01, 0x00, 0x00, 0x00, 0x02, 7, 3};
}

double probe_accuracy(const Dataset& train, const Dataset& test) {
  Rng rng(1);
  const std::vector<std::size_t> dims{train.features.cols(), train.class_count};
  MlpParams p = init_mlp(dims, false, rng);
  AdamState s = AdamState::for_params(p, {0.01});
  const std::size_t batch = 50;
  for (int epoch = 0; epoch < 10; ++epoch) {
    for (std::size_t start = 0; start < train.size(); start += batch) {
      const std::size_t b = std::min(batch, train.size() - start);
      Matrix x(b, train.features.cols()), y(b, train.class_count);
      for (std::size_t i = 0; i < b; ++i) {
        auto src = train.features.row(start + i);
        std::copy(src.begin(), src.end(), x.row(i).begin());
        y(i, static_cast<std::size_t>(train.labels[start + i])) = 1.0;
      }
      const auto lg = loss_and_grad(p, x, y);
      adam_update(p, lg.grads, s);
    }
  }
  const Matrix out = mlp_apply(p, test.features);
  std::size_t correct = 0;
  for (std::size_t i = 0; i < test.size(); ++i) {
    const auto row = out.row(i);
    const auto best = std::max_element(row.begin(), row.end()) - row.begin();
    if (best == test.labels[i]) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(test.size());
}

}  // namespace

TEST_SUITE("datasets") {

TEST_CASE("hand-built IDX fixture") {
  const auto dir = temp_dir("idx");
  write_bytes(dir / "img", fixture_images());
  write_bytes(dir / "lbl", fixture_labels());
  const Dataset ds = load_idx(dir / "img", dir / "lbl");
  CHECK(ds.size() == 2);
  CHECK(ds.height == 2);
  CHECK(ds.width == 3);
  CHECK(ds.features.cols() == 6);
  CHECK(ds.labels == std::vector<int>{7, 3});
  CHECK(ds.class_count == 8);
  CHECK(ds.features(0, 0) == 0.0);
  CHECK(ds.features(0, 1) == 51.0 / 255.0);
  CHECK(ds.features(0, 5) == 1.0);
  CHECK(ds.features(1, 0) == 1.0);
  CHECK(ds.features(1, 5) == 17.0 / 255.0);
}

TEST_CASE("IDX errors") {
  const auto dir = temp_dir("idx_bad");
  auto img = fixture_images();
  img[3] = 0x04;
  write_bytes(dir / "bad_magic", img);
  write_bytes(dir / "lbl", fixture_labels());
  try {
    load_idx(dir / "bad_magic", dir / "lbl");
    FAIL("expected ParseError");
  } catch (const ParseError& e) {
    CHECK(std::string(e.what()).find("0x00000804") != std::string::npos);
  }

  auto trunc = fixture_images();
  trunc.pop_back();
  write_bytes(dir / "trunc", trunc);
  CHECK_THROWS_AS(load_idx(dir / "trunc", dir / "lbl"), ParseError);

  write_bytes(dir / "short_header", {0x00, 0x00, 0x08});
  CHECK_THROWS_AS(load_idx(dir / "short_header", dir / "lbl"), ParseError);

  write_bytes(dir / "img", fixture_images());
  write_bytes(dir / "three_labels", {0x00, 0x00, 0x08, 0x01, 0x00, 0x00, 0x00, 0x03, 1, 2, 3});
  CHECK_THROWS_AS(load_idx(dir / "img", dir / "three_labels"), ParseError);
  CHECK_THROWS_AS(load_idx(dir / "missing", dir / "lbl"), ParseError);
}

TEST_CASE("IDX round trip of a synthetic set") {
  const auto dir = temp_dir("idx_rt");
  const Dataset ds = synth_dataset(20, 10, 4, 3, 0.3);
  write_idx(ds, dir / "img", dir / "lbl");
  const Dataset back = load_idx(dir / "img", dir / "lbl");
  CHECK(back.labels == ds.labels);
  for (std::size_t i = 0; i < ds.features.size(); ++i) {
    CHECK(std::abs(back.features.values()[i] - ds.features.values()[i]) <= 0.5 / 255.0 + 1e-12);
  }
}

TEST_CASE("MNIST test file when available") {
  const char* root = std::getenv("MAGS_DATA_ROOT");
  if (!root) return;
  const std::filesystem::path dir(root);
  if (!std::filesystem::exists(dir / "t10k-images-idx3-ubyte")) return;
  const Dataset ds = load_idx(dir / "t10k-images-idx3-ubyte", dir / "t10k-labels-idx1-ubyte");
  CHECK(ds.size() == 10000);
  CHECK(ds.features.cols() == 784);
}

TEST_CASE("patch partitions") {
  CHECK(split_patches(28, 28, 4).client_count() == 16);
  CHECK(split_patches(28, 28, 4).features_per_client() == 49);
  CHECK(split_patches(28, 28, 2).client_count() == 4);
  CHECK(split_patches(28, 28, 2).features_per_client() == 196);
  CHECK(split_patches(28, 28, 7).client_count() == 49);
  CHECK(split_patches(28, 28, 7).features_per_client() == 16);
  CHECK_THROWS_AS(split_patches(28, 28, 3), ConfigError);
}

TEST_CASE("patches reassemble the image") {
  for (std::size_t g : {2u, 4u, 7u}) {
    const PartitionSpec spec = split_patches(28, 28, g);
    const Dataset ds = synth_dataset(3, 10, g, 1, 0.3);
    const ClientDataset cd = make_client_dataset(ds, spec);
    for (std::size_t r = 0; r < 3; ++r) {
      std::vector<double> image(784, -1.0);
      for (std::size_t c = 0; c < spec.client_count(); ++c) {
        for (std::size_t j = 0; j < spec.features_per_client(); ++j) {
          image[spec.feature_indices[c][j]] = cd.views[c](r, j);
        }
      }
      const auto row = ds.features.row(r);
      CHECK(std::equal(image.begin(), image.end(), row.begin()));
    }
  }
  // Client 1 of a 2x2 grid owns the top-right block.
  const PartitionSpec spec = split_patches(28, 28, 2);
  CHECK(spec.feature_indices[1][0] == 14);
  CHECK(spec.feature_indices[1][14] == 28 + 14);
  CHECK(spec.feature_indices[2][0] == 14 * 28);
}

TEST_CASE("split sizes and determinism") {
  const Dataset ds = synth_dataset(100, 10, 4, 1, 0.3);
  const DataSplits a = make_splits(ds, 5);
  CHECK(a.train.size() == 80);
  CHECK(a.validation.size() == 20);
  const DataSplits b = make_splits(ds, 5);
  CHECK(a.train.labels == b.train.labels);
  CHECK(a.train.features == b.train.features);
  CHECK(a.validation.features == b.validation.features);
  CHECK(!(make_splits(ds, 6).train.features == a.train.features));

  Dataset big;
  big.features = Matrix(60000, 1);
  big.labels.assign(60000, 0);
  big.class_count = 2;
  const DataSplits m = make_splits(big, 1);
  CHECK(m.train.size() == 48000);
  CHECK(m.validation.size() == 12000);
}

TEST_CASE("synthetic data is deterministic and in range") {
  const Dataset a = synth_dataset(200, 10, 4, 9, 0.3);
  const Dataset b = synth_dataset(200, 10, 4, 9, 0.3);
  CHECK(a.features == b.features);
  CHECK(a.labels == b.labels);
  for (double v : a.features.values()) {
    CHECK(v >= 0.0);
    CHECK(v <= 1.0);
  }
  CHECK(!(synth_dataset(200, 10, 4, 10, 0.3).features == a.features));
}

TEST_CASE("noise-free synthetic data is separable by nearest mean") {
  const Dataset ds = synth_dataset(500, 10, 4, 2, 0.0);
  const Matrix protos = synth_prototypes(10, 4, 2);
  for (std::size_t i = 0; i < ds.size(); ++i) {
    double best = 1e300;
    int arg = -1;
    for (std::size_t k = 0; k < 10; ++k) {
      double d = 0.0;
      for (std::size_t j = 0; j < 784; ++j) {
        const double e = ds.features(i, j) - protos(k, j);
        d += e * e;
      }
      if (d < best) {
        best = d;
        arg = static_cast<int>(k);
      }
    }
    CHECK(arg == ds.labels[i]);
  }
}

TEST_CASE("linear probe separates sigma 0.3 synthetic data") {
  const Dataset all = synth_dataset(3000, 10, 4, 7, 0.3);
  std::vector<std::size_t> tr(2000), te(1000);
  std::iota(tr.begin(), tr.end(), 0);
  std::iota(te.begin(), te.end(), 2000);
  CHECK(probe_accuracy(subset(all, tr), subset(all, te)) > 0.95);
}

}
