#include "cpvt/pos_encoding.hpp"

#include <algorithm>
#include <cmath>
#include <string>

namespace cpvt {

namespace {

std::vector<double>& grad_of(const std::shared_ptr<detail::TensorNode>& n) {
  if (!n->grad) {
    n->grad = std::make_shared<std::vector<double>>(n->data.size(), 0.0);
  }
  return *n->grad;
}

}  // namespace

// ---- scheme description ----

void PEGSpec::validate(int depth) const {
  if (kernel < 1 || kernel % 2 == 0) {
    throw ConfigError("generator kernel size must be odd and >= 1, got " +
                      std::to_string(kernel));
  }
  if (layers < 1) {
    throw ConfigError("generator needs at least one conv layer, got " +
                      std::to_string(layers));
  }
  if (positions.empty()) {
    throw ConfigError("generator scheme requires at least one insertion position");
  }
  std::vector<int> sorted = positions;
  std::sort(sorted.begin(), sorted.end());
  if (std::adjacent_find(sorted.begin(), sorted.end()) != sorted.end()) {
    throw ConfigError("duplicate generator insertion position");
  }
  for (int pos : positions) {
    if (pos < -1 || pos >= depth) {
      throw ConfigError("generator position " + std::to_string(pos) +
                        " outside [-1, " + std::to_string(depth - 1) + "]");
    }
  }
}

SchemeKind scheme_kind_from_string(const std::string& s) {
  if (s == "none") return SchemeKind::none;
  if (s == "learnable") return SchemeKind::learnable;
  if (s == "sinusoidal1d") return SchemeKind::sinusoidal1d;
  if (s == "sincos2d") return SchemeKind::sincos2d;
  if (s == "relative") return SchemeKind::relative;
  if (s == "peg") return SchemeKind::peg;
  throw ConfigError("unknown encoding scheme '" + s + "'");
}

std::string to_string(SchemeKind k) {
  switch (k) {
    case SchemeKind::none: return "none";
    case SchemeKind::learnable: return "learnable";
    case SchemeKind::sinusoidal1d: return "sinusoidal1d";
    case SchemeKind::sincos2d: return "sincos2d";
    case SchemeKind::relative: return "relative";
    case SchemeKind::peg: return "peg";
  }
  throw ConfigError("unknown encoding scheme value");
}

PEGFunction peg_function_from_string(const std::string& s) {
  if (s == "depthwise") return PEGFunction::depthwise;
  if (s == "separable") return PEGFunction::separable;
  throw ConfigError("unknown generator function '" + s + "'");
}

std::string to_string(PEGFunction f) {
  switch (f) {
    case PEGFunction::depthwise: return "depthwise";
    case PEGFunction::separable: return "separable";
  }
  throw ConfigError("unknown generator function value");
}

// ---- fixed tables ----

Tensor sinusoidal_pe(int N, int d) {
  if (d <= 0 || d % 2 != 0) {
    throw ConfigError("sinusoidal table needs an even dim, got " + std::to_string(d));
  }
  if (N < 0) throw ConfigError("negative position count");
  Tensor pe = Tensor::zeros({N, d});
  for (int pos = 0; pos < N; ++pos) {
    for (int i = 0; 2 * i < d; ++i) {
      const double freq =
          std::pow(10000.0, -2.0 * static_cast<double>(i) / static_cast<double>(d));
      const double angle = static_cast<double>(pos) * freq;
      pe.at({pos, 2 * i}) = std::sin(angle);
      pe.at({pos, 2 * i + 1}) = std::cos(angle);
    }
  }
  return pe;
}

Tensor sincos_2d(int Hg, int Wg, int d) {
  if (d <= 0 || d % 4 != 0) {
    throw ConfigError("2-D sinusoidal table needs dim divisible by 4, got " +
                      std::to_string(d));
  }
  const int half = d / 2;
  Tensor rows = sinusoidal_pe(Hg, half);
  Tensor cols = sinusoidal_pe(Wg, half);
  Tensor pe = Tensor::zeros({static_cast<std::int64_t>(Hg) * Wg, d});
  for (int r = 0; r < Hg; ++r) {
    for (int c = 0; c < Wg; ++c) {
      const std::int64_t n = static_cast<std::int64_t>(r) * Wg + c;
      for (int j = 0; j < half; ++j) {
        pe.at({n, j}) = rows.at({r, j});
        pe.at({n, half + j}) = cols.at({c, j});
      }
    }
  }
  return pe;
}

// ---- learnable table resizing ----

namespace {

// Catmull-Rom weights for the four samples around fractional position t.
inline void cubic_weights(double t, double w[4]) {
  const double t2 = t * t, t3 = t2 * t;
  w[0] = 0.5 * (-t3 + 2.0 * t2 - t);
  w[1] = 0.5 * (3.0 * t3 - 5.0 * t2 + 2.0);
  w[2] = 0.5 * (-3.0 * t3 + 4.0 * t2 + t);
  w[3] = 0.5 * (t3 - t2);
}

inline std::int64_t clamp_idx(std::int64_t i, std::int64_t n) {
  return std::min(std::max(i, std::int64_t{0}), n - 1);
}

double mean_row_norm(const Tensor& grid) {
  const std::int64_t rows = grid.numel() / grid.dim(grid.rank() - 1);
  const std::int64_t d = grid.dim(grid.rank() - 1);
  double acc = 0.0;
  for (std::int64_t r = 0; r < rows; ++r) {
    double s = 0.0;
    for (std::int64_t j = 0; j < d; ++j) {
      const double v = grid[r * d + j];
      s += v * v;
    }
    acc += std::sqrt(s);
  }
  return acc / static_cast<double>(rows);
}

}  // namespace

Tensor bicubic_resize_grid(const Tensor& pe, int h2, int w2) {
  if (pe.rank() != 3) {
    throw ShapeError("resize expects a [rows, cols, dim] table, got " +
                     shape_str(pe.shape()));
  }
  const std::int64_t H = pe.dim(0), W = pe.dim(1), d = pe.dim(2);
  if (H < 2 || W < 2) {
    throw ContractError("resize source must be at least 2x2, got " +
                        shape_str(pe.shape()));
  }
  if (h2 < 1 || w2 < 1) {
    throw ConfigError("resize target must be at least 1x1, got " +
                      std::to_string(h2) + "x" + std::to_string(w2));
  }
  Tensor out = Tensor::zeros({h2, w2, d}, pe.precision());
  for (int i = 0; i < h2; ++i) {
    const double sy = h2 == 1 ? 0.5 * static_cast<double>(H - 1)
                              : static_cast<double>(i) * static_cast<double>(H - 1) /
                                    static_cast<double>(h2 - 1);
    const std::int64_t iy = static_cast<std::int64_t>(std::floor(sy));
    double wy[4];
    cubic_weights(sy - static_cast<double>(iy), wy);
    for (int j = 0; j < w2; ++j) {
      const double sx = w2 == 1 ? 0.5 * static_cast<double>(W - 1)
                                : static_cast<double>(j) * static_cast<double>(W - 1) /
                                      static_cast<double>(w2 - 1);
      const std::int64_t ix = static_cast<std::int64_t>(std::floor(sx));
      double wx[4];
      cubic_weights(sx - static_cast<double>(ix), wx);
      for (std::int64_t ch = 0; ch < d; ++ch) {
        double acc = 0.0;
        for (int u = 0; u < 4; ++u) {
          const std::int64_t cy = clamp_idx(iy - 1 + u, H);
          double rowacc = 0.0;
          for (int v = 0; v < 4; ++v) {
            const std::int64_t cx = clamp_idx(ix - 1 + v, W);
            rowacc += wx[v] * pe[(cy * W + cx) * d + ch];
          }
          acc += wy[u] * rowacc;
        }
        out[(static_cast<std::int64_t>(i) * w2 + j) * d + ch] = acc;
      }
    }
  }
  out.quantize_inplace();
  return out;
}

Tensor resize_learnable_pe(const Tensor& pe, int h2, int w2) {
  Tensor out = bicubic_resize_grid(pe, h2, w2);
  const double before = mean_row_norm(pe);
  const double after = mean_row_norm(out);
  if (after > 1e-30) {
    const double f = before / after;
    for (std::int64_t i = 0; i < out.numel(); ++i) out[i] *= f;
    out.quantize_inplace();
  }
  return out;
}

// ---- relative attention bias ----

RelativeBias make_relative_bias(int clip, int head_dim, Rng& rng, Precision p,
                                bool value_bias) {
  if (clip < 1) {
    throw ConfigError("relative clip distance must be >= 1, got " +
                      std::to_string(clip));
  }
  const std::int64_t span = 2 * static_cast<std::int64_t>(clip) + 1;
  RelativeBias rb;
  rb.clip = clip;
  rb.key_table = Tensor::zeros({span * span, head_dim}, p);
  rb.value_table = Tensor::zeros({span * span, head_dim}, p);
  for (std::int64_t i = 0; i < rb.key_table.numel(); ++i) {
    rb.key_table[i] = rng.trunc_normal(0.02);
    rb.value_table[i] = rng.trunc_normal(0.02);
  }
  rb.key_table.quantize_inplace();
  rb.value_table.quantize_inplace();
  rb.use_value_bias = value_bias;
  return rb;
}

std::vector<int> relative_index_table(int Hg, int Wg, int clip, bool has_cls) {
  const int N = Hg * Wg + (has_cls ? 1 : 0);
  const int off = has_cls ? 1 : 0;
  const int span = 2 * clip + 1;
  std::vector<int> idx(static_cast<size_t>(N) * N, -1);
  for (int i = off; i < N; ++i) {
    const int ri = (i - off) / Wg, ci = (i - off) % Wg;
    for (int j = off; j < N; ++j) {
      const int rj = (j - off) / Wg, cj = (j - off) % Wg;
      const int dr = std::clamp(rj - ri, -clip, clip);
      const int dc = std::clamp(cj - ci, -clip, clip);
      idx[static_cast<size_t>(i) * N + j] = (dr + clip) * span + (dc + clip);
    }
  }
  return idx;
}

namespace {

// scores[b,i,j] = q[b,i,:] . table[idx(i,j),:]  (0 when idx < 0)
Tensor rel_key_scores(const Tensor& q, const Tensor& table,
                      const std::vector<int>& idx, std::int64_t N) {
  const std::int64_t Bh = q.dim(0), dk = q.dim(2);
  Tensor out = Tensor::zeros({Bh, N, N}, combine(q.precision(), table.precision()));
  for (std::int64_t b = 0; b < Bh; ++b) {
    for (std::int64_t i = 0; i < N; ++i) {
      const double* qi = q.data().data() + (b * N + i) * dk;
      for (std::int64_t j = 0; j < N; ++j) {
        const int t = idx[static_cast<size_t>(i * N + j)];
        if (t < 0) continue;
        const double* tv = table.data().data() + static_cast<std::int64_t>(t) * dk;
        double acc = 0.0;
        for (std::int64_t c = 0; c < dk; ++c) acc += qi[c] * tv[c];
        out[(b * N + i) * N + j] = acc;
      }
    }
  }
  out.quantize_inplace();
  auto qn = q.node_ptr(), tn = table.node_ptr(), on = out.node_ptr();
  record_op({q, table}, out, [qn, tn, on, idx, N]() {
    const std::int64_t Bh = qn->shape[0], dk = qn->shape[2];
    const auto& g = *on->grad;
    double* gq = qn->requires_grad ? grad_of(qn).data() : nullptr;
    double* gt = tn->requires_grad ? grad_of(tn).data() : nullptr;
    for (std::int64_t b = 0; b < Bh; ++b) {
      for (std::int64_t i = 0; i < N; ++i) {
        const double* qi = qn->data.data() + (b * N + i) * dk;
        for (std::int64_t j = 0; j < N; ++j) {
          const int t = idx[static_cast<size_t>(i * N + j)];
          if (t < 0) continue;
          const double go = g[static_cast<size_t>((b * N + i) * N + j)];
          if (go == 0.0) continue;
          const double* tv = tn->data.data() + static_cast<std::int64_t>(t) * dk;
          for (std::int64_t c = 0; c < dk; ++c) {
            if (gq) gq[(b * N + i) * dk + c] += go * tv[c];
            if (gt) gt[static_cast<std::int64_t>(t) * dk + c] += go * qi[c];
          }
        }
      }
    }
  });
  return out;
}

// mix[b,i,:] = sum_j attn[b,i,j] * table[idx(i,j),:]
Tensor rel_value_mix(const Tensor& attn, const Tensor& table,
                     const std::vector<int>& idx, std::int64_t N) {
  const std::int64_t Bh = attn.dim(0), dk = table.dim(1);
  Tensor out = Tensor::zeros({Bh, N, dk},
                             combine(attn.precision(), table.precision()));
  for (std::int64_t b = 0; b < Bh; ++b) {
    for (std::int64_t i = 0; i < N; ++i) {
      double* oi = out.data().data() + (b * N + i) * dk;
      for (std::int64_t j = 0; j < N; ++j) {
        const int t = idx[static_cast<size_t>(i * N + j)];
        if (t < 0) continue;
        const double a = attn[(b * N + i) * N + j];
        const double* tv = table.data().data() + static_cast<std::int64_t>(t) * dk;
        for (std::int64_t c = 0; c < dk; ++c) oi[c] += a * tv[c];
      }
    }
  }
  out.quantize_inplace();
  auto an = attn.node_ptr(), tn = table.node_ptr(), on = out.node_ptr();
  record_op({attn, table}, out, [an, tn, on, idx, N]() {
    const std::int64_t Bh = an->shape[0];
    const std::int64_t dk = tn->shape[1];
    const auto& g = *on->grad;
    double* ga = an->requires_grad ? grad_of(an).data() : nullptr;
    double* gt = tn->requires_grad ? grad_of(tn).data() : nullptr;
    for (std::int64_t b = 0; b < Bh; ++b) {
      for (std::int64_t i = 0; i < N; ++i) {
        const double* gi = g.data() + (b * N + i) * dk;
        for (std::int64_t j = 0; j < N; ++j) {
          const int t = idx[static_cast<size_t>(i * N + j)];
          if (t < 0) continue;
          const double* tv = tn->data.data() + static_cast<std::int64_t>(t) * dk;
          double dot = 0.0;
          for (std::int64_t c = 0; c < dk; ++c) dot += gi[c] * tv[c];
          if (ga) ga[(b * N + i) * N + j] += dot;
          if (gt) {
            const double a = an->data[static_cast<size_t>((b * N + i) * N + j)];
            for (std::int64_t c = 0; c < dk; ++c)
              gt[static_cast<std::int64_t>(t) * dk + c] += a * gi[c];
          }
        }
      }
    }
  });
  return out;
}

}  // namespace

Tensor relative_mhsa(const TokenGrid& grid, const MHSAParams& p,
                     const RelativeBias& bias, Tensor* scores) {
  grid.check();
  const Tensor& x = grid.tokens;
  if (x.dim(2) != p.dim) {
    throw ShapeError("attention dim mismatch: input " + shape_str(x.shape()) +
                     " vs params dim " + std::to_string(p.dim));
  }
  const std::int64_t B = x.dim(0), N = x.dim(1);
  if (N == 0) throw ContractError("attention requires at least one token");
  const std::int64_t dk = p.dim / p.heads;
  if (bias.key_table.dim(1) != dk) {
    throw ShapeError("relative bias head dim " + shape_str(bias.key_table.shape()) +
                     " does not match d/heads = " + std::to_string(dk));
  }
  const std::vector<int> idx =
      relative_index_table(grid.grid_h, grid.grid_w, bias.clip, grid.has_cls);

  Tensor q = split_heads(linear(x, p.q), p.heads);
  Tensor k = split_heads(linear(x, p.k), p.heads);
  Tensor v = split_heads(linear(x, p.v), p.heads);

  Tensor raw = add(matmul(q, permute(k, {0, 2, 1})),
                   rel_key_scores(q, bias.key_table, idx, N));
  Tensor attn = softmax(scale(raw, 1.0 / std::sqrt(static_cast<double>(dk))), -1);
  if (scores) *scores = reshape(attn, {B, p.heads, N, N});
  Tensor mix = matmul(attn, v);
  if (bias.use_value_bias) {
    mix = add(mix, rel_value_mix(attn, bias.value_table, idx, N));
  }
  return linear(merge_heads(mix, p.heads), p.o);
}

// ---- conditional encoding generator ----

PEGParams make_peg(int channels, const PEGSpec& spec, Rng& rng, Precision p) {
  if (spec.kernel < 1 || spec.kernel % 2 == 0) {
    throw ConfigError("generator kernel size must be odd and >= 1, got " +
                      std::to_string(spec.kernel));
  }
  if (spec.layers < 1) {
    throw ConfigError("generator needs at least one conv layer, got " +
                      std::to_string(spec.layers));
  }
  PEGParams pp;
  pp.spec = spec;
  for (int l = 0; l < spec.layers; ++l) {
    if (spec.function == PEGFunction::depthwise) {
      pp.dw.push_back(make_depthwise_conv(channels, spec.kernel, spec.padding, rng, p));
    } else {
      pp.sep.push_back(make_separable_conv(channels, spec.kernel, spec.padding, rng, p));
    }
  }
  return pp;
}

namespace {

// Runs the conv stack over [B,N,d] grid tokens; returns conv(x) + x.
Tensor peg_transform_body(const Tensor& body, int Hg, int Wg,
                          const PEGParams& peg) {
  const std::int64_t B = body.dim(0), d = body.dim(2);
  Tensor grid = permute(reshape(body, {B, Hg, Wg, d}), {0, 3, 1, 2});
  Tensor t = grid;
  for (int l = 0; l < peg.spec.layers; ++l) {
    t = peg.spec.function == PEGFunction::depthwise
            ? depthwise_conv2d(t, peg.dw[static_cast<size_t>(l)])
            : separable_conv2d(t, peg.sep[static_cast<size_t>(l)]);
  }
  Tensor res = add(t, grid);
  return reshape(permute(res, {0, 2, 3, 1}),
                 {B, static_cast<std::int64_t>(Hg) * Wg, d});
}

// out[b,n,:] = keep[n] ? a[b,n,:] : b_[b,n,:]; gradient follows the pick.
Tensor pick_rows(const Tensor& a, const Tensor& b_,
                 const std::vector<std::uint8_t>& keep) {
  const std::int64_t B = a.dim(0), N = a.dim(1), d = a.dim(2);
  Tensor out = Tensor::zeros(a.shape(), combine(a.precision(), b_.precision()));
  for (std::int64_t bb = 0; bb < B; ++bb) {
    for (std::int64_t n = 0; n < N; ++n) {
      const Tensor& src = keep[static_cast<size_t>(n)] ? a : b_;
      const double* s = src.data().data() + (bb * N + n) * d;
      double* o = out.data().data() + (bb * N + n) * d;
      std::copy(s, s + d, o);
    }
  }
  auto an = a.node_ptr(), bn = b_.node_ptr(), on = out.node_ptr();
  record_op({a, b_}, out, [an, bn, on, keep, B, N, d]() {
    const auto& g = *on->grad;
    for (std::int64_t bb = 0; bb < B; ++bb) {
      for (std::int64_t n = 0; n < N; ++n) {
        const auto& dst = keep[static_cast<size_t>(n)] ? an : bn;
        if (!dst->requires_grad) continue;
        auto& gd = grad_of(dst);
        const std::int64_t base = (bb * N + n) * d;
        for (std::int64_t c = 0; c < d; ++c) {
          gd[static_cast<size_t>(base + c)] += g[static_cast<size_t>(base + c)];
        }
      }
    }
  });
  return out;
}

}  // namespace

TokenGrid peg_forward(const TokenGrid& in, const PEGParams& peg) {
  in.check();
  const std::int64_t N = in.grid_tokens();
  Tensor body = in.has_cls ? slice_axis(in.tokens, 1, 1, N) : in.tokens;
  Tensor out_body = peg_transform_body(body, in.grid_h, in.grid_w, peg);
  TokenGrid out = in;
  out.tokens = in.has_cls
                   ? concat_axis(slice_axis(in.tokens, 1, 0, 1), out_body, 1)
                   : out_body;
  return out;
}

TokenGrid peg_forward_masked(const TokenGrid& in, const PEGParams& peg,
                             const std::vector<std::uint8_t>& mask) {
  in.check();
  const std::int64_t N = in.grid_tokens();
  if (static_cast<std::int64_t>(mask.size()) != N) {
    throw ContractError("mask length " + std::to_string(mask.size()) +
                        " does not match grid token count " + std::to_string(N));
  }
  Tensor body = in.has_cls ? slice_axis(in.tokens, 1, 1, N) : in.tokens;
  Tensor out_body = peg_transform_body(body, in.grid_h, in.grid_w, peg);
  Tensor restored = pick_rows(body, out_body, mask);
  TokenGrid out = in;
  out.tokens = in.has_cls
                   ? concat_axis(slice_axis(in.tokens, 1, 0, 1), restored, 1)
                   : restored;
  return out;
}

// ---- scheme application ----

SchemeState make_scheme_state(const EncodingScheme& scheme, int dim, int heads,
                              int grid_h, int grid_w, bool has_cls, int depth,
                              Rng& rng, Precision p) {
  SchemeState st;
  st.scheme = scheme;
  st.built_h = grid_h;
  st.built_w = grid_w;
  switch (scheme.kind) {
    case SchemeKind::none:
    case SchemeKind::sinusoidal1d:
    case SchemeKind::sincos2d:
      break;  // tables regenerated per grid; nothing to store
    case SchemeKind::learnable: {
      Rng r = rng.stream("pos_embed");
      st.pos_grid = Tensor::zeros({static_cast<std::int64_t>(grid_h) * grid_w, dim}, p);
      for (std::int64_t i = 0; i < st.pos_grid.numel(); ++i) {
        st.pos_grid[i] = r.trunc_normal(0.02);
      }
      st.pos_grid.quantize_inplace();
      if (has_cls) {
        st.pos_cls = Tensor::zeros({dim}, p);
        for (std::int64_t i = 0; i < dim; ++i) st.pos_cls[i] = r.trunc_normal(0.02);
        st.pos_cls.quantize_inplace();
      }
      break;
    }
    case SchemeKind::relative: {
      if (dim % heads != 0) {
        throw ConfigError("dim " + std::to_string(dim) +
                          " not divisible by heads " + std::to_string(heads));
      }
      Rng r = rng.stream("rel_bias");
      st.rel = make_relative_bias(scheme.relative_clip, dim / heads, r, p,
                                  scheme.relative_value_bias);
      break;
    }
    case SchemeKind::peg: {
      scheme.peg.validate(depth);
      for (size_t i = 0; i < scheme.peg.positions.size(); ++i) {
        Rng r = rng.stream("peg").stream(static_cast<std::uint64_t>(i));
        st.pegs.push_back(make_peg(dim, scheme.peg, r, p));
      }
      break;
    }
  }
  return st;
}

namespace {

TokenGrid add_table_once(const TokenGrid& in, const Tensor& pe) {
  if (in.input_pe_applied) {
    throw ContractError("additive positional table already applied at input");
  }
  TokenGrid out = in;
  out.tokens = add_bcast(in.tokens, pe);
  out.input_pe_applied = true;
  return out;
}

}  // namespace

TokenGrid apply_scheme(const TokenGrid& in, const SchemeState& st, int phase) {
  switch (st.scheme.kind) {
    case SchemeKind::none:
    case SchemeKind::relative:
      return in;  // relative acts inside attention, not on the tokens

    case SchemeKind::learnable: {
      if (phase != -1) return in;
      in.check();
      if (in.grid_tokens() != st.pos_grid.dim(0)) {
        throw ResolutionError(
            "learnable positional table covers " + std::to_string(st.built_h) + "x" +
            std::to_string(st.built_w) + " tokens but the input grid is " +
            std::to_string(in.grid_h) + "x" + std::to_string(in.grid_w) +
            "; resize the table to run at this resolution");
      }
      if (in.has_cls != st.pos_cls.defined()) {
        throw ContractError("class-token slot of the positional table does not "
                            "match the sequence layout");
      }
      Tensor pe = in.has_cls
                      ? concat_axis(reshape(st.pos_cls, {1, st.pos_grid.dim(1)}),
                                    st.pos_grid, 0)
                      : st.pos_grid;
      return add_table_once(in, pe);
    }

    case SchemeKind::sinusoidal1d: {
      if (phase != -1) return in;
      in.check();
      // positions run over the full sequence; the class token, when present,
      // takes position 0
      Tensor pe = sinusoidal_pe(static_cast<int>(in.seq_len()),
                                static_cast<int>(in.dim()));
      if (in.tokens.precision() == Precision::f32) {
        pe = Tensor::from_data(pe.shape(), pe.data(), Precision::f32);
      }
      return add_table_once(in, pe);
    }

    case SchemeKind::sincos2d: {
      if (phase != -1) return in;
      in.check();
      Tensor pe = sincos_2d(in.grid_h, in.grid_w, static_cast<int>(in.dim()));
      if (in.has_cls) {
        pe = concat_axis(Tensor::zeros({1, in.dim()}), pe, 0);
      }
      if (in.tokens.precision() == Precision::f32) {
        pe = Tensor::from_data(pe.shape(), pe.data(), Precision::f32);
      }
      return add_table_once(in, pe);
    }

    case SchemeKind::peg: {
      const auto& pos = st.scheme.peg.positions;
      for (size_t i = 0; i < pos.size(); ++i) {
        if (pos[i] == phase) return peg_forward(in, st.pegs[i]);
      }
      return in;
    }
  }
  return in;
}

}  // namespace cpvt
