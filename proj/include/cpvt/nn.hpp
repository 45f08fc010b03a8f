#pragma once

#include <string>
#include <vector>

#include "cpvt/tensor.hpp"
#include "cpvt/token_grid.hpp"

namespace cpvt {

enum class Activation { relu, gelu };
enum class PaddingMode { zero, circular, none };

PaddingMode padding_mode_from_string(const std::string& s);
std::string to_string(PaddingMode m);

// ---- linear ----

struct LinearParams {
  Tensor weight;  // [d_in, d_out]
  Tensor bias;    // [d_out]
};

// Truncated-normal weights (std 0.02, clipped at 2 std), zero bias.
LinearParams make_linear(int d_in, int d_out, Rng& rng,
                         Precision p = Precision::f64);

// x[.., d_in] -> x W + b, bias broadcast over leading axes.
Tensor linear(const Tensor& x, const LinearParams& p);

// ---- layer normalization ----

struct LayerNormParams {
  Tensor gamma;  // [d]
  Tensor beta;   // [d]
};

LayerNormParams make_layer_norm(int d, Precision p = Precision::f64);

// Normalizes each trailing d-vector to mean 0 / unit variance (biased
// variance estimate), then applies the affine gamma*x + beta.
Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                  double eps = 1e-6);
Tensor layer_norm(const Tensor& x, const LayerNormParams& p, double eps = 1e-6);

// ---- multi-head self-attention ----

struct MHSAParams {
  int dim = 0;
  int heads = 1;
  LinearParams q, k, v, o;
};

MHSAParams make_mhsa(int dim, int heads, Rng& rng, Precision p = Precision::f64);

// [B,N,d] -> [B*h, N, d/h] and back; head index varies faster than batch.
Tensor split_heads(const Tensor& x, int heads);
Tensor merge_heads(const Tensor& x, int heads);

// Scaled dot-product attention per head, heads concatenated and projected.
// When `scores` is non-null it receives the softmax-normalized per-head
// score matrices, shape [B, h, N, N]. N == 0 is a ContractError.
Tensor mhsa(const Tensor& x, const MHSAParams& p, Tensor* scores = nullptr);

// ---- feed-forward network ----

struct FFNParams {
  LinearParams fc1, fc2;
  Activation act = Activation::relu;
};

FFNParams make_ffn(int dim, int hidden, Activation act, Rng& rng,
                   Precision p = Precision::f64);

// act(x W1 + b1) W2 + b2, tokenwise.
Tensor ffn(const Tensor& x, const FFNParams& p);

// ---- depthwise / separable 2-D convolution ----

struct DepthwiseConvParams {
  Tensor kernel;  // [C, k, k]; no bias
  PaddingMode padding = PaddingMode::zero;
};

DepthwiseConvParams make_depthwise_conv(int channels, int k, PaddingMode padding,
                                        Rng& rng, Precision p = Precision::f64);

// Per-channel k x k cross-correlation preserving H, W. Padding modes:
//   zero     — out-of-range taps read 0;
//   circular — indices wrap (toroidal grid);
//   none     — positions whose window leaves the grid produce 0 (callers add
//              their own residual, so border cells pass through unchanged).
Tensor depthwise_conv2d(const Tensor& x, const DepthwiseConvParams& p);

struct SeparableConvParams {
  DepthwiseConvParams dw;
  Tensor pointwise;  // [C, C]; no bias
};

SeparableConvParams make_separable_conv(int channels, int k, PaddingMode padding,
                                        Rng& rng, Precision p = Precision::f64);

// Depthwise stage followed by a 1x1 cross-channel projection.
Tensor separable_conv2d(const Tensor& x, const SeparableConvParams& p);

// ---- patch embedding ----

// [B,C,H,W] -> [B, (H/S)*(W/S), C*S*S]; patches ordered row-major over the
// patch grid, each flattened channel-slowest (c, then row, then column).
Tensor extract_patches(const Tensor& image, int patch);

// Linear projection of flattened patches; records grid dims (H/S, W/S).
// Non-divisible H or W is an InputError naming the patch size.
TokenGrid patch_embed(const Tensor& image, int patch, const LinearParams& proj);

// ---- pooling / loss / metrics ----

// [B,N,d] -> [B,d], arithmetic mean over the token axis.
Tensor mean_tokens(const Tensor& x);

// Mean softmax cross-entropy over the batch. Optional label smoothing
// distributes `smoothing` mass uniformly over all classes.
Tensor cross_entropy(const Tensor& logits, const std::vector<int>& labels,
                     double smoothing = 0.0);

// Top-1 accuracy; argmax ties resolve to the lowest index. Not recorded.
double accuracy(const Tensor& logits, const std::vector<int>& labels);

// ---- optimizer ----

struct AdamState {
  std::vector<double> m, v;
  std::int64_t t = 0;
};

// One decoupled-weight-decay Adam update with bias-corrected moments:
//   p <- p - lr*wd*p - lr * m_hat / (sqrt(v_hat) + eps).
// lr <= 0 is a ConfigError.
void adamw_step(Tensor& param, const std::vector<double>& grad, AdamState& state,
                double lr, double wd, double beta1 = 0.9, double beta2 = 0.999,
                double eps = 1e-8);

}  // namespace cpvt
