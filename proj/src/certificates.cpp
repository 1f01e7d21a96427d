#include "mags/certificates.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <limits>
#include <numbers>

#include <fmt/format.h>
#include <fmt/ranges.h>

#include "mags/datasets.hpp"
#include "mags/faults.hpp"
#include "mags/inference.hpp"
#include "mags/topology.hpp"

namespace mags {

namespace {

void trim_separator(std::string& s) {
  if (s.ends_with("; ")) s.resize(s.size() - 2);
}

class Stopwatch {
 public:
  double seconds() const {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
  }

 private:
  std::chrono::steady_clock::time_point start_ = std::chrono::steady_clock::now();
};

double relative_error(double a, double n) {
  return std::abs(a - n) / std::max({std::abs(a), std::abs(n), kGradientErrorFloor});
}

template <typename LossFn>
GradientCheck compare(std::vector<double*> params, std::vector<const double*> analytic,
                      const LossFn& loss, double h, GradientCheck acc) {
  for (std::size_t i = 0; i < params.size(); ++i) {
    const double saved = *params[i];
    *params[i] = saved + h;
    const double up = loss();
    *params[i] = saved - h;
    const double down = loss();
    *params[i] = saved;
    const double numeric = (up - down) / (2.0 * h);
    acc.max_relative_error = std::max(acc.max_relative_error, relative_error(*analytic[i], numeric));
    ++acc.coordinates;
  }
  return acc;
}

}  // namespace

CertificateResult ensemble_identity_certificate(std::uint64_t seed, std::size_t trials,
                                                std::vector<std::size_t> member_counts,
                                                std::size_t classes, double tolerance,
                                                const Combiner& combiner) {
  Stopwatch sw;
  Rng rng(derive_seed(seed, "ensemble"));
  double worst_residual = 0.0;
  double min_diversity = std::numeric_limits<double>::infinity();
  for (std::size_t k : member_counts) {
    std::vector<std::vector<double>> members(k);
    for (std::size_t t = 0; t < trials; ++t) {
      for (auto& m : members) {
        std::vector<double> logits(classes);
        for (double& v : logits) v = 3.0 * rng.normal();
        m = log_softmax(logits);
      }
      const std::size_t label = rng.below(classes);
      const auto d = ensemble_decomposition(members, label, combiner);
      worst_residual = std::max(worst_residual, d.residual());
      min_diversity = std::min(min_diversity, d.diversity);
    }
  }
  CertificateResult r;
  r.name = "ensemble-identity";
  r.passed = worst_residual < tolerance && min_diversity >= 0.0;
  r.detail = fmt::format("max residual {:.3e} (tol {:.0e}), min diversity {:.3e}, K in {{{}}}",
                         worst_residual, tolerance, min_diversity,
                         fmt::format("{}", fmt::join(member_counts, ",")));
  r.seconds = sw.seconds();
  return r;
}

CertificateResult gossip_contraction_certificate(std::uint64_t seed, std::size_t inits,
                                                 std::size_t max_rounds) {
  Stopwatch sw;
  CertificateResult r;
  r.name = "gossip-contraction";
  r.passed = true;
  std::string detail;

  const DeviceGraph ring = build_graph({GraphKind::ring}, 16, 16);
  const double lambda_ring = spectral_radius(consensus_matrix(ring));
  const double analytic = (1.0 + 2.0 * std::cos(std::numbers::pi / 8.0)) / 3.0;
  const bool ring_ok = std::abs(lambda_ring - analytic) < 1e-6;
  r.passed &= ring_ok;
  detail += fmt::format("ring-16 lambda {:.9f} vs {:.9f}{}; ", lambda_ring, analytic,
                        ring_ok ? "" : " FAIL");

  constexpr std::size_t dim = 10;
  constexpr double slack = 1e-12;
  Rng rng(derive_seed(seed, "contraction"));
  for (GraphKind kind : {GraphKind::ring, GraphKind::complete, GraphKind::torus}) {
    const DeviceGraph g = build_graph({kind}, 16, 16);
    const double lambda = spectral_radius(consensus_matrix(g));
    const RealizedGraph intact = RealizedGraph::intact(g);
    const std::size_t c = g.device_count();
    std::size_t violations = 0;
    double worst_ratio = 0.0;
    for (std::size_t trial = 0; trial < inits; ++trial) {
      PredictionState s;
      s.log_probs.resize(c);
      std::vector<double> mean(dim, 0.0);
      for (auto& v : s.log_probs) {
        v = Matrix(1, dim);
        for (std::size_t j = 0; j < dim; ++j) {
          (*v)(0, j) = rng.normal();
          mean[j] += (*v)(0, j) / static_cast<double>(c);
        }
      }
      double spread = 0.0;
      for (std::size_t a = 0; a < c; ++a) {
        for (std::size_t b = a + 1; b < c; ++b) {
          double d2 = 0.0;
          for (std::size_t j = 0; j < dim; ++j) {
            const double d = (*s.log_probs[a])(0, j) - (*s.log_probs[b])(0, j);
            d2 += d * d;
          }
          spread = std::max(spread, std::sqrt(d2));
        }
      }
      for (std::size_t round = 1; round <= max_rounds; ++round) {
        s = gossip_round(s, intact, g.aggregators());
        const double bound =
            std::pow(lambda, static_cast<double>(round)) * std::sqrt(static_cast<double>(c)) * spread;
        for (const auto& v : s.log_probs) {
          double d2 = 0.0;
          for (std::size_t j = 0; j < dim; ++j) {
            const double d = mean[j] - (*v)(0, j);
            d2 += d * d;
          }
          const double dist = std::sqrt(d2);
          if (dist > bound + slack) ++violations;
          if (bound > 0.0) worst_ratio = std::max(worst_ratio, dist / bound);
        }
      }
    }
    r.passed &= violations == 0;
    detail += fmt::format("{}-16 lambda {:.6f}, violations {}, max dist/bound {:.3f}; ",
                          g.spec().name(), lambda, violations, worst_ratio);
  }
  r.detail = detail;
  r.seconds = sw.seconds();
  trim_separator(r.detail);
  return r;
}

namespace {

struct CatastropheCounts {
  std::size_t draws = 0;
  std::size_t empty = 0;
  std::vector<std::size_t> picked;  // per aggregator, given |A| > 0
};

CatastropheCounts simulate_active_sets(std::uint64_t seed, std::size_t draws, double rate,
                                       std::size_t k) {
  const DeviceGraph g = build_graph({GraphKind::complete}, std::max<std::size_t>(k, 4), k);
  Rng faults(derive_seed(seed, fmt::format("catastrophe/{:g}/{}", rate, k)));
  Rng pick(derive_seed(seed, fmt::format("lemma/{:g}/{}", rate, k)));
  CatastropheCounts out;
  out.draws = draws;
  out.picked.assign(k, 0);
  for (std::size_t i = 0; i < draws; ++i) {
    const RealizedGraph real = sample_device_faults(g, rate, faults);
    const auto active = active_set(real, g.aggregators());
    if (active.empty()) {
      ++out.empty;
      continue;
    }
    const SelectionDraw d = SelectionDraw::sample(pick, 2);
    out.picked[active[std::min(active.size() - 1,
                               static_cast<std::size_t>(d.pick * static_cast<double>(active.size())))]]++;
  }
  return out;
}

}  // namespace

CertificateResult catastrophe_certificate(std::uint64_t seed, std::size_t draws,
                                          std::vector<double> rates,
                                          std::vector<std::size_t> aggregator_counts) {
  Stopwatch sw;
  CertificateResult r;
  r.name = "catastrophic-failure";
  r.passed = true;
  for (double rate : rates) {
    for (std::size_t k : aggregator_counts) {
      const auto counts = simulate_active_sets(seed, draws, rate, k);
      const double p = std::pow(rate, static_cast<double>(k));
      const double n = static_cast<double>(draws);
      const double empirical = static_cast<double>(counts.empty) / n;
      const double sigma = std::sqrt(p * (1.0 - p) / n);
      const bool ok = std::abs(empirical - p) <= 3.0 * sigma;
      r.passed &= ok;
      r.detail += fmt::format("r={:g} K={}: {:.6f} vs {:.6f} (3s {:.6f}){}; ", rate, k, empirical,
                              p, 3.0 * sigma, ok ? "" : " FAIL");
    }
  }
  r.seconds = sw.seconds();
  trim_separator(r.detail);
  return r;
}

CertificateResult selection_lemma_certificate(std::uint64_t seed, std::size_t draws,
                                              std::vector<double> rates,
                                              std::vector<std::size_t> aggregator_counts) {
  Stopwatch sw;
  CertificateResult r;
  r.name = "selection-lemma";
  r.passed = true;
  for (double rate : rates) {
    for (std::size_t k : aggregator_counts) {
      const auto counts = simulate_active_sets(seed, draws, rate, k);
      const double n = static_cast<double>(draws - counts.empty);
      const double p = 1.0 / static_cast<double>(k);
      const double sigma = std::sqrt(p * (1.0 - p) / n);
      double worst = 0.0;
      for (std::size_t c : counts.picked) {
        worst = std::max(worst, std::abs(static_cast<double>(c) / n - p));
      }
      const bool ok = worst <= 3.0 * sigma || k == 1;
      r.passed &= ok;
      r.detail += fmt::format("r={:g} K={}: max |f-1/K| {:.5f} (3s {:.5f}){}; ", rate, k, worst,
                              3.0 * sigma, ok ? "" : " FAIL");
    }
  }
  r.seconds = sw.seconds();
  trim_separator(r.detail);
  return r;
}

GradientCheck check_mlp_gradients(const MlpParams& params, const Matrix& x,
                                  const Matrix& y_one_hot, double h) {
  const LossAndGrad lg = loss_and_grad(params, x, y_one_hot);
  MlpParams probe = params;
  auto loss = [&] { return loss_and_grad(probe, x, y_one_hot).loss; };
  return compare(parameter_refs(probe), parameter_refs(lg.grads), loss, h, {});
}

GradientCheck check_split_gradients(const SplitModel& model, std::span<const Matrix> views,
                                    std::span<const int> labels, const SlotMask& slots,
                                    std::span<const std::uint8_t> head_alive,
                                    const Matrix* mixing, double h) {
  const SplitObjective obj = split_loss_and_grad(model, views, labels, slots, head_alive, mixing);
  SplitModel probe = model;
  auto loss = [&] {
    return split_loss_and_grad(probe, views, labels, slots, head_alive, mixing).loss;
  };
  GradientCheck acc;
  for (std::size_t c = 0; c < model.client_count(); ++c) {
    acc = compare(parameter_refs(probe.encoders[c]), parameter_refs(obj.grads.encoders[c]), loss,
                  h, acc);
  }
  for (std::size_t k = 0; k < model.aggregator_count(); ++k) {
    acc = compare(parameter_refs(probe.heads[k]), parameter_refs(obj.grads.heads[k]), loss, h,
                  acc);
  }
  return acc;
}

CertificateResult gradient_certificate(std::uint64_t seed, std::size_t nets, double tolerance) {
  Stopwatch sw;
  CertificateResult r;
  r.name = "gradients";
  Rng rng(derive_seed(seed, "gradients"));
  double worst_mlp = 0.0;
  for (std::size_t i = 0; i < nets; ++i) {
    const std::vector<std::size_t> dims{2 + rng.below(6), 2 + rng.below(8), 2 + rng.below(8),
                                        2 + rng.below(5)};
    const MlpParams p = init_mlp(dims, false, rng);
    const std::size_t batch = 1 + rng.below(5);
    Matrix x(batch, dims.front());
    for (double& v : x.values()) v = rng.normal();
    Matrix y(batch, dims.back());
    for (std::size_t b = 0; b < batch; ++b) y(b, rng.below(dims.back())) = 1.0;
    worst_mlp = std::max(worst_mlp, check_mlp_gradients(p, x, y).max_relative_error);
  }

  // 2 clients, 2 aggregators, one cross slot dropped.
  const Architecture arch{{3, 4, 2}, {4, 5, 3}};
  const SplitModel model = init_split_model(arch, 2, {0, 1}, rng);
  std::vector<Matrix> views(2, Matrix(4, 3));
  for (auto& v : views) {
    for (double& e : v.values()) e = rng.uniform();
  }
  const std::vector<int> labels{0, 2, 1, 2};
  SlotMask slots(2, 2);
  slots.set(0, 1, false);
  const std::vector<std::uint8_t> alive{1, 1};
  const double worst_split =
      check_split_gradients(model, views, labels, slots, alive).max_relative_error;
  SlotMask full(2, 2);
  const double worst_full = check_split_gradients(model, views, labels, full, alive).max_relative_error;

  r.passed = worst_mlp < tolerance && worst_split < tolerance && worst_full < tolerance;
  r.detail = fmt::format("{} random MLPs max rel err {:.3e}; split toy {:.3e} / {:.3e} (tol {:.0e})",
                         nets, worst_mlp, worst_split, worst_full, tolerance);
  r.seconds = sw.seconds();
  return r;
}

CertificateResult risk_bound_certificate(std::uint64_t seed, std::vector<double> rates) {
  Stopwatch sw;
  CertificateResult r;
  r.name = "risk-lower-bound";
  r.passed = true;
  constexpr std::size_t grid = 2;
  const Dataset all = synth_dataset(1500, 10, grid, seed, 0.3);
  std::vector<std::size_t> train_rows(1000), test_rows(500);
  for (std::size_t i = 0; i < 1000; ++i) train_rows[i] = i;
  for (std::size_t i = 0; i < 500; ++i) test_rows[i] = 1000 + i;
  const PartitionSpec spec = split_patches(all, grid);
  const DataSplits splits = make_splits(subset(all, train_rows), seed);
  const ClientDataset train = make_client_dataset(splits.train, spec);
  const ClientDataset val = make_client_dataset(splits.validation, spec);
  const ClientDataset test = make_client_dataset(subset(all, test_rows), spec);
  const DeviceGraph g = build_graph({GraphKind::complete}, 4, 2);
  TrainConfig cfg;
  cfg.epochs = 3;
  cfg.seed = seed;
  const Checkpoint ck = fit(cfg, train, val, g, default_architecture(4, 196, 10));
  for (double rate : rates) {
    const Prop1Report rep = prop1_certificate(ck.model, test, g, rate, 4, seed);
    r.passed &= rep.holds;
    r.detail += fmt::format("r={:g}: faulted err {:.4f} >= bound {:.4f} - 3s ({:.4f}){}; ", rate,
                            rep.faulted_error, rep.bound, 3.0 * rep.sigma,
                            rep.holds ? "" : " FAIL");
  }
  r.seconds = sw.seconds();
  trim_separator(r.detail);
  return r;
}

std::vector<CertificateResult> run_props(const PropsOptions& o) {
  std::vector<CertificateResult> out;
  out.push_back(ensemble_identity_certificate(o.seed, o.ensemble_trials, {2, 4, 16}, 10, 1e-9,
                                              o.combiner));
  out.push_back(gossip_contraction_certificate(o.seed, o.contraction_inits, 10));
  out.push_back(catastrophe_certificate(o.seed, o.catastrophe_draws, {0.3, 0.5}, {1, 2, 4}));
  out.push_back(selection_lemma_certificate(o.seed, o.catastrophe_draws, {0.3, 0.5}, {1, 2, 4}));
  out.push_back(gradient_certificate(o.seed, o.gradient_nets, 1e-6));
  if (o.include_trained) out.push_back(risk_bound_certificate(o.seed, {0.1, 0.3, 0.5}));
  return out;
}

}  // namespace mags
