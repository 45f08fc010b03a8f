#pragma once

#include <string>
#include <vector>

#include "cpvt/model.hpp"
#include "cpvt/tensor.hpp"

namespace cpvt {

// Writes one attention-score file per head for `layer`: csv (full precision,
// one matrix row per line) or pgm (8-bit grayscale, each row scaled by its
// own maximum). Filenames are attn_layer<L>_head<h>.<format> under out_dir.
// Returns the written paths. Unknown format is a ConfigError; an unwritable
// directory is an IoError.
std::vector<std::string> export_attention(const Model& m, const Tensor& image,
                                          int layer,
                                          const std::string& out_dir,
                                          const std::string& format);

}  // namespace cpvt
