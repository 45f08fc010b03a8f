#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "cpvt/model.hpp"
#include "cpvt/pos_encoding.hpp"
#include "cpvt/synthetic.hpp"
#include "cpvt/tensor.hpp"

namespace cpvt {

// Shared tolerances, fixed in one place so every probe and test agrees.
namespace tol {
inline constexpr double kOracle64 = 1e-12;         // 64-bit oracle equality
inline constexpr double kModelInvariance = 1e-5;   // model-level invariances
inline constexpr double kLayerEquivariance = 1e-6; // single-layer equivariance
inline constexpr double kGradCheck = 1e-4;         // finite-difference rel err
inline constexpr double kGradCheckEps = 1e-5;      // finite-difference step
inline constexpr double kAttnRowSum = 1e-6;        // attention row stochasticity
inline constexpr double kPermutationVariance = 1e-3;  // PEG must exceed this
inline constexpr double kLeakageGap = 0.2;         // R^2(zero) - R^2(circular)
}  // namespace tol

// One probe outcome, serializable to a single text line. Deterministic for a
// fixed seed: two runs produce identical reports.
struct ProbeReport {
  std::string name;
  bool pass = false;
  std::uint64_t seed = 0;
  double tolerance = 0.0;
  std::vector<std::pair<std::string, double>> metrics;
  std::string note;

  // "name=<n> pass=<0|1> seed=<u> tol=<g> <k>=<v>... [note=\"...\"]"
  std::string line() const;
};

// Reference evaluation of the residual depthwise convolution on one channel:
// y[m,n] = x[m,n] + sum_ij x[m+i-c, n+j-c] * w[i,j], out-of-range reads are
// zero (zero padding), c = (k-1)/2. Direct double sum, no reuse of the layer
// code — this is the independent oracle the layer is tested against.
Tensor conv_expansion_oracle(const Tensor& x /*[H,W]*/, const Tensor& w /*[k,k]*/);

// Compares shift-then-apply against apply-then-shift for one conv generator
// on a random token grid. Under zero padding the content is confined to the
// grid interior so the shift never touches the border; a shift too large for
// that margin is an InputError. Pass: max deviation <= kModelInvariance.
ProbeReport translation_probe(const PEGParams& layer, int dy, int dx,
                              std::uint64_t seed);

// Permutes the input patch cells and compares features against the same
// permutation of the original features. Models without positional encoding
// must be equivariant on every trial (max deviation <= kModelInvariance);
// models with a conv generator must break the symmetry on at least one trial
// (deviation > kPermutationVariance). trials < 20 is an InputError.
ProbeReport permutation_probe(const Model& model, int trials,
                              std::uint64_t seed);

struct LeakageOptions {
  int grid_h = 14;
  int grid_w = 14;
  int dim = 32;
  int layers = 3;      // stacked random conv generators
  int n_images = 64;   // 3:1 train/holdout split over images
  double token_mean = 1.0;  // images carry a DC component, like real ones
  double token_std = 0.25;  // 0 probes constant images
};

// Fits a ridge readout (lambda 1e-6) from per-token features of a fixed
// random conv stack to the token's normalized (row, col), and reports the
// held-out R^2 under zero and circular padding. Pass: R^2(zero) minus
// R^2(circular) >= kLeakageGap. A 1x1 grid is rejected with a failed report.
ProbeReport position_leakage_probe(const LeakageOptions& opt,
                                   std::uint64_t seed);

// Trains three small models on `task` per seed — no positional encoding,
// conv generator frozen at its random initialization, and the same generator
// trainable — and compares mean test accuracies. Pass: fixed > none and
// trainable >= fixed - 0.02. A diverging run is retried once at half the
// learning rate. Fewer than 3 seeds is an InputError.
ProbeReport fixed_peg_comparison(const SyntheticTask& task,
                                 const std::vector<std::uint64_t>& seeds);

}  // namespace cpvt
