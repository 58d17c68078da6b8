#pragma once

// Independent oracles for the numerical core: finite-difference gradients and
// Jacobians, quadrature of the flow density and all-pairs AUROC. None of these
// share code paths with what they check beyond calling the forward functions.

#include <cstdint>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "resad/flow.hpp"

namespace resad::verify {

struct Check {
  std::string name;
  bool pass = false;
  double value = 0;      // worst observed error (or the measured quantity)
  double threshold = 0;
  std::string detail;
};

/// O(n^2) count of concordant (1) and tied (1/2) positive/negative pairs.
double brute_force_auroc(std::span<const double> scores, std::span<const std::uint8_t> labels);

/// log|det J| of one flow level at x from a central-difference Jacobian.
double numerical_logdet(const flow::FlowLevel<double>& f, const RowVectorX<double>& x,
                        const RowVectorX<double>& pos, double eps = 1e-6);

/// Fills every trainable flow parameter with N(0, scale^2) draws.
void randomize(flow::FlowLevel<double>& f, std::mt19937_64& rng, double scale);

/// Random flow level with non-trivial couplings.
flow::FlowLevel<double> random_flow(Eigen::Index channels, Eigen::Index pos_dim, std::mt19937_64& rng,
                                    int n_layers = 4, double scale = 0.3);

Check flow_inverse(int trials, std::span<const int> channels, std::uint64_t seed);
Check flow_logdet(int trials, std::span<const int> channels, std::uint64_t seed);

Check grad_affine(int instances, std::uint64_t seed);
Check grad_batch_norm(int instances, std::uint64_t seed);
Check grad_relu(int instances, std::uint64_t seed);
Check grad_constraintor(int instances, std::uint64_t seed);
Check grad_occ(int instances, bool squared_norm, std::uint64_t seed);
Check grad_ml(int instances, std::uint64_t seed);
Check grad_bgspp(int instances, std::uint64_t seed);

Check closed_form_log_prob();
Check closed_form_score();
Check density_normalization(std::uint64_t seed);
Check auroc_oracle(int instances, std::uint64_t seed);

/// Full self-test battery at the given instance counts.
std::vector<Check> run_all(int instances = 20, int flow_trials = 1000);

}  // namespace resad::verify
