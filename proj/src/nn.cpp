#include "mags/nn.hpp"

#include <algorithm>
#include <cmath>

#include <fmt/format.h>

#include "mags/error.hpp"

namespace mags {

Matrix::Matrix(std::initializer_list<std::initializer_list<double>> rows) {
  rows_ = rows.size();
  cols_ = rows_ == 0 ? 0 : rows.begin()->size();
  data_.reserve(rows_ * cols_);
  for (const auto& r : rows) {
    if (r.size() != cols_) throw ConfigError("ragged matrix literal");
    data_.insert(data_.end(), r.begin(), r.end());
  }
}

Matrix linear_forward(const Matrix& x, const Matrix& w, std::span<const double> b) {
  if (x.cols() != w.rows() || b.size() != w.cols()) {
    throw ConfigError(fmt::format("linear_forward: x is {}x{}, w is {}x{}, b has {}",
                                  x.rows(), x.cols(), w.rows(), w.cols(), b.size()));
  }
  const std::size_t n = w.rows();
  const std::size_t m = w.cols();
  Matrix out(x.rows(), m);
  for (std::size_t i = 0; i < x.rows(); ++i) {
    double* o = out.row(i).data();
    std::copy(b.begin(), b.end(), o);
    const double* xi = x.row(i).data();
    for (std::size_t k = 0; k < n; ++k) {
      const double xv = xi[k];
      if (xv == 0.0) continue;
      const double* wk = w.row(k).data();
      for (std::size_t j = 0; j < m; ++j) o[j] += xv * wk[j];
    }
  }
  return out;
}

std::size_t MlpParams::parameter_count() const {
  std::size_t total = 0;
  for (const auto& l : layers) total += l.weight.size() + l.bias.size();
  return total;
}

std::vector<std::size_t> MlpParams::dims() const {
  std::vector<std::size_t> d;
  if (layers.empty()) return d;
  d.push_back(layers.front().fan_in());
  for (const auto& l : layers) d.push_back(l.fan_out());
  return d;
}

void MlpParams::validate() const {
  if (layers.empty()) throw ConfigError("MLP has no layers");
  for (std::size_t i = 0; i < layers.size(); ++i) {
    if (layers[i].bias.size() != layers[i].fan_out()) {
      throw ConfigError(fmt::format("layer {}: bias length {} != fan_out {}", i,
                                    layers[i].bias.size(), layers[i].fan_out()));
    }
    if (i > 0 && layers[i - 1].fan_out() != layers[i].fan_in()) {
      throw ConfigError(fmt::format("layer {} fan_in {} does not chain with fan_out {}", i,
                                    layers[i].fan_in(), layers[i - 1].fan_out()));
    }
  }
}

MlpParams init_mlp(std::span<const std::size_t> dims, bool relu_output, Rng& rng) {
  if (dims.size() < 2) throw ConfigError("init_mlp needs at least input and output widths");
  MlpParams p;
  p.relu_output = relu_output;
  for (std::size_t i = 0; i + 1 < dims.size(); ++i) {
    const std::size_t n = dims[i];
    const std::size_t m = dims[i + 1];
    if (n == 0 || m == 0) throw ConfigError("init_mlp: zero layer width");
    const double bound = 1.0 / std::sqrt(static_cast<double>(n));
    DenseLayer layer{Matrix(n, m), std::vector<double>(m)};
    for (double& v : layer.weight.values()) v = (2.0 * rng.uniform() - 1.0) * bound;
    for (double& v : layer.bias) v = (2.0 * rng.uniform() - 1.0) * bound;
    p.layers.push_back(std::move(layer));
  }
  return p;
}

MlpParams zeros_like(const MlpParams& params) {
  MlpParams z;
  z.relu_output = params.relu_output;
  for (const auto& l : params.layers) {
    z.layers.push_back({Matrix(l.weight.rows(), l.weight.cols()),
                        std::vector<double>(l.bias.size(), 0.0)});
  }
  return z;
}

std::vector<double*> parameter_refs(MlpParams& params) {
  std::vector<double*> refs;
  refs.reserve(params.parameter_count());
  for (auto& l : params.layers) {
    for (double& v : l.weight.values()) refs.push_back(&v);
    for (double& v : l.bias) refs.push_back(&v);
  }
  return refs;
}

std::vector<const double*> parameter_refs(const MlpParams& params) {
  std::vector<const double*> refs;
  refs.reserve(params.parameter_count());
  for (const auto& l : params.layers) {
    for (const double& v : l.weight.values()) refs.push_back(&v);
    for (const double& v : l.bias) refs.push_back(&v);
  }
  return refs;
}

namespace {

bool relu_after(const MlpParams& p, std::size_t layer) {
  return layer + 1 < p.layers.size() || p.relu_output;
}

void relu_in_place(Matrix& m) {
  for (double& v : m.values()) v = v > 0.0 ? v : 0.0;
}

void check_input(const MlpParams& params, const Matrix& x) {
  if (params.layers.empty()) throw ConfigError("MLP has no layers");
  if (x.cols() != params.in_dim()) {
    throw ConfigError(fmt::format("MLP expects {} input columns, got {}", params.in_dim(),
                                  x.cols()));
  }
}

}  // namespace

MlpForward mlp_forward(const MlpParams& params, const Matrix& x) {
  check_input(params, x);
  MlpForward f;
  Matrix h = x;
  for (std::size_t i = 0; i < params.layers.size(); ++i) {
    const auto& l = params.layers[i];
    Matrix pre = linear_forward(h, l.weight, l.bias);
    f.tape.inputs.push_back(std::move(h));
    h = pre;
    if (relu_after(params, i)) relu_in_place(h);
    f.tape.pre_activations.push_back(std::move(pre));
  }
  f.output = std::move(h);
  return f;
}

Matrix mlp_apply(const MlpParams& params, const Matrix& x) {
  check_input(params, x);
  Matrix h = x;
  for (std::size_t i = 0; i < params.layers.size(); ++i) {
    const auto& l = params.layers[i];
    h = linear_forward(h, l.weight, l.bias);
    if (relu_after(params, i)) relu_in_place(h);
  }
  return h;
}

MlpBackward mlp_backward(const MlpParams& params, const MlpTape& tape,
                         const Matrix& output_grad) {
  MlpBackward b;
  b.grads = zeros_like(params);
  Matrix delta = output_grad;
  for (std::size_t li = params.layers.size(); li-- > 0;) {
    const auto& layer = params.layers[li];
    const Matrix& pre = tape.pre_activations[li];
    const Matrix& in = tape.inputs[li];
    if (delta.rows() != pre.rows() || delta.cols() != pre.cols()) {
      throw ConfigError("mlp_backward: gradient shape does not match tape");
    }
    if (relu_after(params, li)) {
      auto d = delta.values();
      auto z = pre.values();
      for (std::size_t i = 0; i < d.size(); ++i) {
        if (!(z[i] > 0.0)) d[i] = 0.0;
      }
    }
    auto& g = b.grads.layers[li];
    const std::size_t n = layer.fan_in();
    const std::size_t m = layer.fan_out();
    for (std::size_t r = 0; r < delta.rows(); ++r) {
      const double* dr = delta.row(r).data();
      const double* xr = in.row(r).data();
      for (std::size_t j = 0; j < m; ++j) g.bias[j] += dr[j];
      for (std::size_t k = 0; k < n; ++k) {
        const double xv = xr[k];
        if (xv == 0.0) continue;
        double* gk = g.weight.row(k).data();
        for (std::size_t j = 0; j < m; ++j) gk[j] += xv * dr[j];
      }
    }
    Matrix prev(delta.rows(), n);
    for (std::size_t r = 0; r < delta.rows(); ++r) {
      const double* dr = delta.row(r).data();
      double* pr = prev.row(r).data();
      for (std::size_t k = 0; k < n; ++k) {
        const double* wk = layer.weight.row(k).data();
        double s = 0.0;
        for (std::size_t j = 0; j < m; ++j) s += wk[j] * dr[j];
        pr[k] = s;
      }
    }
    delta = std::move(prev);
  }
  b.input_grad = std::move(delta);
  return b;
}

std::vector<double> log_softmax(std::span<const double> logits) {
  std::vector<double> out(logits.begin(), logits.end());
  if (out.empty()) return out;
  const double mx = *std::max_element(out.begin(), out.end());
  double s = 0.0;
  for (double v : out) s += std::exp(v - mx);
  const double lse = mx + std::log(s);
  for (double& v : out) v -= lse;
  return out;
}

Matrix log_softmax_rows(const Matrix& logits) {
  Matrix out(logits.rows(), logits.cols());
  for (std::size_t r = 0; r < logits.rows(); ++r) {
    auto ls = log_softmax(logits.row(r));
    std::copy(ls.begin(), ls.end(), out.row(r).begin());
  }
  return out;
}

std::size_t one_hot_label(std::span<const double> row) {
  std::size_t label = row.size();
  for (std::size_t j = 0; j < row.size(); ++j) {
    if (row[j] == 1.0) {
      if (label != row.size()) throw InputError("target row has more than one hot entry");
      label = j;
    } else if (row[j] != 0.0) {
      throw InputError(fmt::format("target entry {} is {}, expected 0 or 1", j, row[j]));
    }
  }
  if (label == row.size()) throw InputError("target row has no hot entry");
  return label;
}

LossAndGrad loss_and_grad(const MlpParams& params, const Matrix& x, const Matrix& y_one_hot,
                          LossKind) {
  if (y_one_hot.rows() != x.rows() || y_one_hot.cols() != params.out_dim()) {
    throw ConfigError("loss_and_grad: target shape mismatch");
  }
  std::vector<std::size_t> labels(x.rows());
  for (std::size_t r = 0; r < x.rows(); ++r) labels[r] = one_hot_label(y_one_hot.row(r));

  auto fwd = mlp_forward(params, x);
  const Matrix logp = log_softmax_rows(fwd.output);
  LossAndGrad out;
  if (x.rows() == 0) {
    out.grads = zeros_like(params);
    return out;
  }
  const double inv_b = 1.0 / static_cast<double>(x.rows());
  Matrix dlogits(logp.rows(), logp.cols());
  for (std::size_t r = 0; r < logp.rows(); ++r) {
    out.loss -= logp(r, labels[r]);
    for (std::size_t j = 0; j < logp.cols(); ++j) {
      dlogits(r, j) = (std::exp(logp(r, j)) - (j == labels[r] ? 1.0 : 0.0)) * inv_b;
    }
  }
  out.loss *= inv_b;
  out.grads = mlp_backward(params, fwd.tape, dlogits).grads;
  return out;
}

AdamState AdamState::for_params(const MlpParams& params, AdamConfig config) {
  return AdamState{config, zeros_like(params), zeros_like(params), 0};
}

void adam_update(MlpParams& params, const MlpParams& grads, AdamState& state) {
  const std::size_t L = params.layers.size();
  if (grads.layers.size() != L || state.first_moment.layers.size() != L ||
      state.second_moment.layers.size() != L) {
    throw ConfigError("adam_update: parameter/gradient/state shapes differ");
  }
  const auto& c = state.config;
  state.step += 1;
  const double t = static_cast<double>(state.step);
  const double bc1 = 1.0 - std::pow(c.beta1, t);
  const double bc2 = 1.0 - std::pow(c.beta2, t);
  auto step = [&](std::span<double> p, std::span<const double> g, std::span<double> m,
                  std::span<double> v) {
    if (g.size() != p.size() || m.size() != p.size() || v.size() != p.size()) {
      throw ConfigError("adam_update: parameter/gradient/state shapes differ");
    }
    for (std::size_t i = 0; i < p.size(); ++i) {
      m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * g[i];
      v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * g[i] * g[i];
      const double mhat = m[i] / bc1;
      const double vhat = v[i] / bc2;
      p[i] -= c.lr * mhat / (std::sqrt(vhat) + c.eps);
    }
  };
  for (std::size_t l = 0; l < L; ++l) {
    step(params.layers[l].weight.values(), grads.layers[l].weight.values(),
         state.first_moment.layers[l].weight.values(),
         state.second_moment.layers[l].weight.values());
    step(params.layers[l].bias, grads.layers[l].bias, state.first_moment.layers[l].bias,
         state.second_moment.layers[l].bias);
  }
}

}  // namespace mags
