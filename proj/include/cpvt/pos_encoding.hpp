#pragma once

#include <vector>

#include "cpvt/nn.hpp"
#include "cpvt/token_grid.hpp"

namespace cpvt {

// ---- scheme description ----

enum class SchemeKind { none, learnable, sinusoidal1d, sincos2d, relative, peg };

enum class PEGFunction { depthwise, separable };

// Description of one conditional-encoding generator: a small stack of
// convolutions applied to the token grid with a residual connection,
// inserted at one or more points in the encoder stack.
struct PEGSpec {
  int kernel = 3;
  int layers = 1;
  PEGFunction function = PEGFunction::depthwise;
  PaddingMode padding = PaddingMode::zero;
  // Encoder indices after whose block the generator runs; -1 means on the
  // patch embeddings before the first block.
  std::vector<int> positions = {0};

  void validate(int depth) const;
};

struct EncodingScheme {
  SchemeKind kind = SchemeKind::none;
  PEGSpec peg;                      // used when kind == peg
  int relative_clip = 8;            // K, used when kind == relative
  bool relative_value_bias = false;
};

SchemeKind scheme_kind_from_string(const std::string& s);
std::string to_string(SchemeKind k);
PEGFunction peg_function_from_string(const std::string& s);
std::string to_string(PEGFunction f);

// ---- fixed tables ----

// Classic interleaved sine/cosine table over positions 0..N-1:
// column 2i holds sin(pos / 10000^(2i/d)), column 2i+1 the matching cosine.
// Odd d is a ConfigError.
Tensor sinusoidal_pe(int N, int d);

// 2-D variant over an Hg x Wg grid: the first d/2 channels encode the row
// index and the last d/2 the column index, each with the 1-D construction at
// dimension d/2. Requires d % 4 == 0. Row-major token order.
Tensor sincos_2d(int Hg, int Wg, int d);

// ---- learnable table resizing ----

// Catmull-Rom bicubic resampling of a [Hg, Wg, d] table to [h2, w2, d],
// align-corners sampling with clamped borders. No renormalization.
Tensor bicubic_resize_grid(const Tensor& pe, int h2, int w2);

// Bicubic resize followed by a uniform rescale so the mean per-token L2 norm
// of the table is preserved. Targets below 1x1 are a ConfigError.
Tensor resize_learnable_pe(const Tensor& pe, int h2, int w2);

// ---- relative attention bias ----

// Learnable bias tables indexed by the clipped 2-D token offset
// (dr, dc) -> (dr+K)*(2K+1) + (dc+K); offsets clip to [-K, K] per axis.
struct RelativeBias {
  int clip = 8;
  Tensor key_table;    // [(2K+1)^2, d_k]
  Tensor value_table;  // [(2K+1)^2, d_k]
  bool use_value_bias = false;
};

RelativeBias make_relative_bias(int clip, int head_dim, Rng& rng,
                                Precision p = Precision::f64,
                                bool value_bias = false);

// Flattened N'xN' lookup table of bias indices for a grid (row-major token
// order); pairs involving the class token get -1 (no bias).
std::vector<int> relative_index_table(int Hg, int Wg, int clip, bool has_cls);

// Attention with the relative key bias added to every pre-softmax score:
// e_ij = (q_i . k_j + q_i . a_key[idx(i,j)]) / sqrt(d_k); the value bias
// a_val[idx(i,j)] joins the weighted sum when enabled. Grid geometry supplies
// the offsets; a sequence/grid mismatch is a ContractError.
Tensor relative_mhsa(const TokenGrid& grid, const MHSAParams& p,
                     const RelativeBias& bias, Tensor* scores = nullptr);

// ---- conditional encoding generator ----

struct PEGParams {
  PEGSpec spec;
  std::vector<DepthwiseConvParams> dw;   // one per layer, depthwise mode
  std::vector<SeparableConvParams> sep;  // one per layer, separable mode
};

PEGParams make_peg(int channels, const PEGSpec& spec, Rng& rng,
                   Precision p = Precision::f64);

// Reshapes the non-class tokens to their grid, runs the conv stack, and adds
// the result to the input (residual). The class token passes through
// untouched. Works for any grid the tokens describe — no size-dependent
// parameters.
TokenGrid peg_forward(const TokenGrid& in, const PEGParams& peg);

// Same, but positions with mask[n] != 0 (padding tokens) keep their input
// values bitwise; gradient flows through those slots as identity. The mask
// covers grid tokens only (length Hg*Wg, shared across the batch).
TokenGrid peg_forward_masked(const TokenGrid& in, const PEGParams& peg,
                             const std::vector<std::uint8_t>& mask);

// ---- scheme application ----

// Parameters/state backing one scheme instance for a particular model.
struct SchemeState {
  EncodingScheme scheme;
  // learnable: table split into grid part and class-token part
  Tensor pos_grid;  // [Hg*Wg, d]
  Tensor pos_cls;   // [d]; defined only when the model keeps a class token
  int built_h = 0, built_w = 0;
  // relative
  RelativeBias rel;
  // one generator instance per configured position, in positions order
  std::vector<PEGParams> pegs;
};

SchemeState make_scheme_state(const EncodingScheme& scheme, int dim, int heads,
                              int grid_h, int grid_w, bool has_cls, int depth,
                              Rng& rng, Precision p = Precision::f64);

// Applies whatever the scheme does at this phase. Phase -1 is the input
// (post patch-embed, post class-token prepend); phase i >= 0 is the output of
// encoder block i. Additive tables apply once at phase -1 (a second input
// application is a ContractError); the generator runs at its configured
// positions; relative and none return the tokens unchanged.
TokenGrid apply_scheme(const TokenGrid& in, const SchemeState& st, int phase);

}  // namespace cpvt
