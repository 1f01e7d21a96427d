#pragma once

// Self-contained randomized checks of the method's theoretical properties,
// run by `mags props` and by the acceptance suite.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "mags/metrics.hpp"
#include "mags/nn.hpp"
#include "mags/training.hpp"

namespace mags {

struct CertificateResult {
  std::string name;
  bool passed = false;
  std::string detail;
  double seconds = 0.0;
};

// Ensemble identity: ensemble loss == mean member loss - diversity within
// `tolerance`, diversity >= 0, for `trials` random member sets of each size
// in `member_counts` over `classes` classes.
CertificateResult ensemble_identity_certificate(std::uint64_t seed, std::size_t trials,
                                                std::vector<std::size_t> member_counts,
                                                std::size_t classes, double tolerance,
                                                const Combiner& combiner = geometric_mean_combiner);

// Gossip contraction on fault-free regular graphs with every device an
// aggregator: ||ybar - y_i^(G)|| <= lambda^G sqrt(C) max ||y_j - y_j'|| for
// G = 1..max_rounds over `inits` random initializations, plus the ring-16
// spectral radius against (1 + 2 cos(pi/8)) / 3 within 1e-6.
CertificateResult gossip_contraction_certificate(std::uint64_t seed, std::size_t inits,
                                                 std::size_t max_rounds);

// Device faults: empirical Pr(|A| = 0) within 3 sigma of r^K for every
// (r, K), and, given |A| > 0, Active Rand picks every aggregator with
// frequency within 3 sigma of 1/K.
CertificateResult catastrophe_certificate(std::uint64_t seed, std::size_t draws,
                                          std::vector<double> rates,
                                          std::vector<std::size_t> aggregator_counts);
CertificateResult selection_lemma_certificate(std::uint64_t seed, std::size_t draws,
                                              std::vector<double> rates,
                                              std::vector<std::size_t> aggregator_counts);

// Relative gradient error |a - n| / max(|a|, |n|, floor) against central
// differences with step h.
struct GradientCheck {
  double max_relative_error = 0.0;
  std::size_t coordinates = 0;
};
inline constexpr double kGradientErrorFloor = 1e-3;

GradientCheck check_mlp_gradients(const MlpParams& params, const Matrix& x,
                                  const Matrix& y_one_hot, double h = 1e-5);
GradientCheck check_split_gradients(const SplitModel& model, std::span<const Matrix> views,
                                    std::span<const int> labels, const SlotMask& slots,
                                    std::span<const std::uint8_t> head_alive,
                                    const Matrix* mixing = nullptr, double h = 1e-5);

// Random small MLPs and the 2-client / 2-aggregator split toy.
CertificateResult gradient_certificate(std::uint64_t seed, std::size_t nets, double tolerance);

// Trains a small synthetic split model and checks the faulted-risk lower
// bound at the given device fault rates.
CertificateResult risk_bound_certificate(std::uint64_t seed, std::vector<double> rates);

struct PropsOptions {
  std::uint64_t seed = 20240601;
  std::size_t ensemble_trials = 10000;
  std::size_t contraction_inits = 100;
  std::size_t catastrophe_draws = 1000000;
  std::size_t gradient_nets = 20;
  bool include_trained = true;
  Combiner combiner = geometric_mean_combiner;
};

std::vector<CertificateResult> run_props(const PropsOptions& options);

}  // namespace mags
