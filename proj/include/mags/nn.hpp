#pragma once

// Dense MLP engine: row-major double matrices, linear layers with ReLU,
// log-softmax, one-hot cross-entropy, reverse-mode gradients and Adam.

#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <span>
#include <vector>

#include "mags/rng.hpp"

namespace mags {

class Matrix {
 public:
  Matrix() = default;
  Matrix(std::size_t rows, std::size_t cols, double fill = 0.0)
      : rows_(rows), cols_(cols), data_(rows * cols, fill) {}
  Matrix(std::initializer_list<std::initializer_list<double>> rows);

  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }
  std::size_t size() const { return data_.size(); }

  double& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }

  std::span<double> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
  std::span<const double> row(std::size_t r) const { return {data_.data() + r * cols_, cols_}; }

  std::span<double> values() { return data_; }
  std::span<const double> values() const { return data_; }

  bool operator==(const Matrix&) const = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> data_;
};

// out = x * w + b (b broadcast over rows). x: B x n, w: n x m, b: m.
Matrix linear_forward(const Matrix& x, const Matrix& w, std::span<const double> b);

struct DenseLayer {
  Matrix weight;  // fan_in x fan_out
  std::vector<double> bias;

  std::size_t fan_in() const { return weight.rows(); }
  std::size_t fan_out() const { return weight.cols(); }
  bool operator==(const DenseLayer&) const = default;
};

// ReLU follows every layer except the last; relu_output adds one after the
// last layer too (client encoders end in ReLU before message passing).
struct MlpParams {
  std::vector<DenseLayer> layers;
  bool relu_output = false;

  std::size_t in_dim() const { return layers.front().fan_in(); }
  std::size_t out_dim() const { return layers.back().fan_out(); }
  std::size_t parameter_count() const;
  // Layer widths including the input width: {n0, n1, ..., nL}.
  std::vector<std::size_t> dims() const;
  // Throws ConfigError if consecutive layers do not chain.
  void validate() const;

  bool operator==(const MlpParams&) const = default;
};

// Fan-in uniform init: every weight and bias in [-1/sqrt(n), 1/sqrt(n)].
MlpParams init_mlp(std::span<const std::size_t> dims, bool relu_output, Rng& rng);
MlpParams zeros_like(const MlpParams& params);

// Flat views over every parameter in fixed order (layer by layer, weight
// then bias). Used by the optimizer, checkpoints and gradient checks.
std::vector<double*> parameter_refs(MlpParams& params);
std::vector<const double*> parameter_refs(const MlpParams& params);

struct MlpTape {
  std::vector<Matrix> inputs;           // input to each layer
  std::vector<Matrix> pre_activations;  // x*w+b of each layer
};

struct MlpForward {
  Matrix output;
  MlpTape tape;
};

MlpForward mlp_forward(const MlpParams& params, const Matrix& x);
// Forward without recording a tape.
Matrix mlp_apply(const MlpParams& params, const Matrix& x);

struct MlpBackward {
  MlpParams grads;
  Matrix input_grad;
};

MlpBackward mlp_backward(const MlpParams& params, const MlpTape& tape,
                         const Matrix& output_grad);

// Max-subtracted log-softmax.
std::vector<double> log_softmax(std::span<const double> logits);
Matrix log_softmax_rows(const Matrix& logits);

enum class LossKind { CrossEntropyOneHot };

// Index of the single 1 in a one-hot row; throws InputError otherwise.
std::size_t one_hot_label(std::span<const double> row);

struct LossAndGrad {
  double loss = 0.0;
  MlpParams grads;
};

// Mean over the batch of -log softmax(mlp(x))[true class].
LossAndGrad loss_and_grad(const MlpParams& params, const Matrix& x,
                          const Matrix& y_one_hot,
                          LossKind kind = LossKind::CrossEntropyOneHot);

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

struct AdamState {
  AdamConfig config;
  MlpParams first_moment;
  MlpParams second_moment;
  std::uint64_t step = 0;

  static AdamState for_params(const MlpParams& params, AdamConfig config = {});
};

// One bias-corrected Adam step in place; increments state.step.
void adam_update(MlpParams& params, const MlpParams& grads, AdamState& state);

}  // namespace mags
