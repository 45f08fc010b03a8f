#pragma once

#include "cpvt/tensor.hpp"

namespace cpvt {

// A batch of token sequences together with the 2-D patch-grid geometry the
// non-class tokens were flattened from. Token order is row-major over the
// grid (row index varies slowest); the class token, when present, occupies
// sequence slot 0 and is not part of the grid.
struct TokenGrid {
  Tensor tokens;  // [B, N', d] with N' = grid_h*grid_w + (has_cls ? 1 : 0)
  int grid_h = 0;
  int grid_w = 0;
  bool has_cls = false;
  bool input_pe_applied = false;  // guards double application of additive PE

  std::int64_t batch() const { return tokens.dim(0); }
  std::int64_t seq_len() const { return tokens.dim(1); }
  std::int64_t dim() const { return tokens.dim(2); }
  std::int64_t grid_tokens() const {
    return static_cast<std::int64_t>(grid_h) * grid_w;
  }

  // Throws ContractError when the sequence length disagrees with the grid.
  void check() const {
    if (!tokens.defined() || tokens.rank() != 3) {
      throw ContractError("token grid requires rank-3 [batch, tokens, dim] storage");
    }
    const std::int64_t expect = grid_tokens() + (has_cls ? 1 : 0);
    if (seq_len() != expect) {
      throw ContractError("token count " + std::to_string(seq_len()) +
                          " does not match grid " + std::to_string(grid_h) + "x" +
                          std::to_string(grid_w) +
                          (has_cls ? " plus class token" : ""));
    }
  }
};

}  // namespace cpvt
