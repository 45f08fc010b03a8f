#include "cpvt/export.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>

#include "cpvt/errors.hpp"

namespace cpvt {

std::vector<std::string> export_attention(const Model& m, const Tensor& image,
                                          int layer,
                                          const std::string& out_dir,
                                          const std::string& format) {
  if (format != "csv" && format != "pgm") {
    throw ConfigError("unknown attention export format '" + format +
                      "' (expected csv or pgm)");
  }
  std::vector<AttentionRecord> records = attention_scores(m, image, layer);

  std::vector<std::string> written;
  for (const AttentionRecord& rec : records) {
    if (rec.batch_index != 0) continue;
    const std::int64_t N = rec.scores.dim(0);
    const std::string path = out_dir + "/attn_layer" + std::to_string(layer) +
                             "_head" + std::to_string(rec.head) + "." + format;
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot open '" + path + "' for writing");

    if (format == "csv") {
      char buf[40];
      for (std::int64_t r = 0; r < N; ++r) {
        std::string line;
        for (std::int64_t c = 0; c < N; ++c) {
          std::snprintf(buf, sizeof buf, "%.17g", rec.scores.at({r, c}));
          if (c) line += ',';
          line += buf;
        }
        line += '\n';
        out.write(line.data(), static_cast<std::streamsize>(line.size()));
      }
    } else {
      out << "P5\n" << N << " " << N << "\n255\n";
      std::vector<unsigned char> bytes(static_cast<std::size_t>(N * N));
      for (std::int64_t r = 0; r < N; ++r) {
        double row_max = 0.0;
        for (std::int64_t c = 0; c < N; ++c) {
          row_max = std::max(row_max, rec.scores.at({r, c}));
        }
        for (std::int64_t c = 0; c < N; ++c) {
          const double v = row_max > 0.0 ? rec.scores.at({r, c}) / row_max : 0.0;
          bytes[static_cast<std::size_t>(r * N + c)] =
              static_cast<unsigned char>(std::lround(v * 255.0));
        }
      }
      out.write(reinterpret_cast<const char*>(bytes.data()),
                static_cast<std::streamsize>(bytes.size()));
    }
    if (!out) throw IoError("failed writing '" + path + "'");
    written.push_back(path);
  }
  return written;
}

}  // namespace cpvt
