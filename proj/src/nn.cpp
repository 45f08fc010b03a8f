#include "cpvt/nn.hpp"

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

Tensor trunc_normal_tensor(Shape shape, Rng& rng, double stddev, Precision p) {
  Tensor t = Tensor::zeros(std::move(shape), p);
  for (std::int64_t i = 0; i < t.numel(); ++i) t[i] = rng.trunc_normal(stddev);
  t.quantize_inplace();
  return t;
}

}  // namespace

PaddingMode padding_mode_from_string(const std::string& s) {
  if (s == "zero") return PaddingMode::zero;
  if (s == "circular") return PaddingMode::circular;
  if (s == "none") return PaddingMode::none;
  throw ConfigError("unknown padding mode '" + s + "'");
}

std::string to_string(PaddingMode m) {
  switch (m) {
    case PaddingMode::zero: return "zero";
    case PaddingMode::circular: return "circular";
    case PaddingMode::none: return "none";
  }
  throw ConfigError("unknown padding mode value");
}

// ---- linear ----

LinearParams make_linear(int d_in, int d_out, Rng& rng, Precision p) {
  if (d_in <= 0 || d_out <= 0) {
    throw ConfigError("linear dims must be positive, got " + std::to_string(d_in) +
                      " -> " + std::to_string(d_out));
  }
  LinearParams lp;
  lp.weight = trunc_normal_tensor({d_in, d_out}, rng, 0.02, p);
  lp.bias = Tensor::zeros({d_out}, p);
  return lp;
}

Tensor linear(const Tensor& x, const LinearParams& p) {
  if (x.dim(x.rank() - 1) != p.weight.dim(0)) {
    throw ShapeError("linear: input feature dim " + shape_str(x.shape()) +
                     " does not match weight " + shape_str(p.weight.shape()));
  }
  return add_bcast(matmul(x, p.weight), p.bias);
}

// ---- layer normalization ----

LayerNormParams make_layer_norm(int d, Precision p) {
  LayerNormParams lp;
  lp.gamma = Tensor::full({d}, 1.0, p);
  lp.beta = Tensor::zeros({d}, p);
  return lp;
}

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                  double eps) {
  const std::int64_t d = x.dim(x.rank() - 1);
  if (gamma.numel() != d || beta.numel() != d) {
    throw ShapeError("layer_norm: affine params " + shape_str(gamma.shape()) + "/" +
                     shape_str(beta.shape()) + " do not match feature dim " +
                     std::to_string(d));
  }
  const std::int64_t rows = x.numel() / d;
  Tensor out = Tensor::zeros(x.shape(),
                             combine(x.precision(), combine(gamma.precision(),
                                                            beta.precision())));
  for (std::int64_t r = 0; r < rows; ++r) {
    const double* xr = x.data().data() + r * d;
    double* yr = out.data().data() + r * d;
    double mu = 0.0;
    for (std::int64_t j = 0; j < d; ++j) mu += xr[j];
    mu /= static_cast<double>(d);
    double var = 0.0;
    for (std::int64_t j = 0; j < d; ++j) {
      const double c = xr[j] - mu;
      var += c * c;
    }
    var /= static_cast<double>(d);
    const double inv = 1.0 / std::sqrt(var + eps);
    for (std::int64_t j = 0; j < d; ++j) {
      yr[j] = gamma[j] * ((xr[j] - mu) * inv) + beta[j];
    }
  }
  out.quantize_inplace();
  auto xn = x.node_ptr(), gn = gamma.node_ptr(), bn = beta.node_ptr(),
       on = out.node_ptr();
  record_op({x, gamma, beta}, out, [xn, gn, bn, on, rows, d, eps]() {
    const auto& g = *on->grad;
    for (std::int64_t r = 0; r < rows; ++r) {
      const double* xr = xn->data.data() + r * d;
      const double* gr = g.data() + r * d;
      double mu = 0.0;
      for (std::int64_t j = 0; j < d; ++j) mu += xr[j];
      mu /= static_cast<double>(d);
      double var = 0.0;
      for (std::int64_t j = 0; j < d; ++j) {
        const double c = xr[j] - mu;
        var += c * c;
      }
      var /= static_cast<double>(d);
      const double inv = 1.0 / std::sqrt(var + eps);

      if (gn->requires_grad || bn->requires_grad) {
        for (std::int64_t j = 0; j < d; ++j) {
          const double xhat = (xr[j] - mu) * inv;
          if (gn->requires_grad) grad_of(gn)[static_cast<size_t>(j)] += gr[j] * xhat;
          if (bn->requires_grad) grad_of(bn)[static_cast<size_t>(j)] += gr[j];
        }
      }
      if (xn->requires_grad) {
        double mh = 0.0, mhx = 0.0;
        for (std::int64_t j = 0; j < d; ++j) {
          const double h = gr[j] * gn->data[static_cast<size_t>(j)];
          mh += h;
          mhx += h * ((xr[j] - mu) * inv);
        }
        mh /= static_cast<double>(d);
        mhx /= static_cast<double>(d);
        auto& gx = grad_of(xn);
        for (std::int64_t j = 0; j < d; ++j) {
          const double h = gr[j] * gn->data[static_cast<size_t>(j)];
          const double xhat = (xr[j] - mu) * inv;
          gx[static_cast<size_t>(r * d + j)] += inv * (h - mh - xhat * mhx);
        }
      }
    }
  });
  return out;
}

Tensor layer_norm(const Tensor& x, const LayerNormParams& p, double eps) {
  return layer_norm(x, p.gamma, p.beta, eps);
}

// ---- multi-head self-attention ----

MHSAParams make_mhsa(int dim, int heads, Rng& rng, Precision p) {
  if (heads <= 0 || dim <= 0 || dim % heads != 0) {
    throw ConfigError("attention dim " + std::to_string(dim) +
                      " must be a positive multiple of heads " +
                      std::to_string(heads));
  }
  MHSAParams mp;
  mp.dim = dim;
  mp.heads = heads;
  mp.q = make_linear(dim, dim, rng, p);
  mp.k = make_linear(dim, dim, rng, p);
  mp.v = make_linear(dim, dim, rng, p);
  mp.o = make_linear(dim, dim, rng, p);
  return mp;
}

Tensor split_heads(const Tensor& x, int heads) {
  const std::int64_t B = x.dim(0), N = x.dim(1), d = x.dim(2);
  if (d % heads != 0) {
    throw ConfigError("feature dim " + std::to_string(d) +
                      " not divisible by heads " + std::to_string(heads));
  }
  const std::int64_t dk = d / heads;
  Tensor r = reshape(x, {B, N, heads, dk});
  Tensor t = permute(r, {0, 2, 1, 3});  // [B,h,N,dk]
  return reshape(t, {B * heads, N, dk});
}

Tensor merge_heads(const Tensor& x, int heads) {
  const std::int64_t Bh = x.dim(0), N = x.dim(1), dk = x.dim(2);
  const std::int64_t B = Bh / heads;
  Tensor r = reshape(x, {B, heads, N, dk});
  Tensor t = permute(r, {0, 2, 1, 3});  // [B,N,h,dk]
  return reshape(t, {B, N, heads * dk});
}

Tensor mhsa(const Tensor& x, const MHSAParams& p, Tensor* scores) {
  if (x.rank() != 3) {
    throw ShapeError("attention expects [batch, tokens, dim], got " +
                     shape_str(x.shape()));
  }
  if (x.dim(2) != p.dim) {
    throw ShapeError("attention dim mismatch: input " + shape_str(x.shape()) +
                     " vs params dim " + std::to_string(p.dim));
  }
  const std::int64_t B = x.dim(0), N = x.dim(1);
  if (N == 0) throw ContractError("attention requires at least one token");
  const std::int64_t dk = p.dim / p.heads;

  Tensor q = split_heads(linear(x, p.q), p.heads);
  Tensor k = split_heads(linear(x, p.k), p.heads);
  Tensor v = split_heads(linear(x, p.v), p.heads);

  Tensor raw = scale(matmul(q, permute(k, {0, 2, 1})), 1.0 / std::sqrt(double(dk)));
  Tensor attn = softmax(raw, -1);  // [B*h, N, N]
  if (scores) *scores = reshape(attn, {B, p.heads, N, N});
  Tensor mixed = merge_heads(matmul(attn, v), p.heads);
  return linear(mixed, p.o);
}

// ---- feed-forward network ----

FFNParams make_ffn(int dim, int hidden, Activation act, Rng& rng, Precision p) {
  FFNParams fp;
  fp.fc1 = make_linear(dim, hidden, rng, p);
  fp.fc2 = make_linear(hidden, dim, rng, p);
  fp.act = act;
  return fp;
}

Tensor ffn(const Tensor& x, const FFNParams& p) {
  Tensor h = linear(x, p.fc1);
  h = p.act == Activation::relu ? relu(h) : gelu(h);
  return linear(h, p.fc2);
}

// ---- depthwise / separable convolution ----

DepthwiseConvParams make_depthwise_conv(int channels, int k, PaddingMode padding,
                                        Rng& rng, Precision p) {
  if (k < 1 || k % 2 == 0) {
    throw ConfigError("depthwise kernel size must be odd and >= 1, got " +
                      std::to_string(k));
  }
  DepthwiseConvParams dp;
  dp.kernel = trunc_normal_tensor({channels, k, k}, rng, 0.02, p);
  dp.padding = padding;
  return dp;
}

namespace {

// Maps a (possibly out-of-range) grid coordinate according to the padding
// mode. Returns false when the tap reads an implicit zero.
inline bool map_tap(std::int64_t i, std::int64_t j, std::int64_t H, std::int64_t W,
                    PaddingMode mode, std::int64_t& oi, std::int64_t& oj) {
  if (mode == PaddingMode::circular) {
    oi = ((i % H) + H) % H;
    oj = ((j % W) + W) % W;
    return true;
  }
  if (i < 0 || i >= H || j < 0 || j >= W) return false;
  oi = i;
  oj = j;
  return true;
}

}  // namespace

Tensor depthwise_conv2d(const Tensor& x, const DepthwiseConvParams& p) {
  if (x.rank() != 4) {
    throw ShapeError("depthwise conv expects [batch, channels, H, W], got " +
                     shape_str(x.shape()));
  }
  const Tensor& w = p.kernel;
  if (w.rank() != 3 || w.dim(1) != w.dim(2)) {
    throw ShapeError("depthwise kernel must be [C,k,k], got " +
                     shape_str(w.shape()));
  }
  const std::int64_t B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  const std::int64_t k = w.dim(1);
  if (k % 2 == 0) {
    throw ConfigError("depthwise kernel size must be odd, got " + std::to_string(k));
  }
  if (w.dim(0) != C) {
    throw ShapeError("kernel channels " + shape_str(w.shape()) +
                     " do not match input " + shape_str(x.shape()));
  }
  const std::int64_t r = (k - 1) / 2;
  const PaddingMode mode = p.padding;

  Tensor out = Tensor::zeros(x.shape(), combine(x.precision(), w.precision()));
  for (std::int64_t b = 0; b < B; ++b) {
    for (std::int64_t c = 0; c < C; ++c) {
      const double* xc = x.data().data() + (b * C + c) * H * W;
      const double* wc = w.data().data() + c * k * k;
      double* yc = out.data().data() + (b * C + c) * H * W;
      for (std::int64_t i = 0; i < H; ++i) {
        for (std::int64_t j = 0; j < W; ++j) {
          if (mode == PaddingMode::none &&
              (i < r || i >= H - r || j < r || j >= W - r)) {
            continue;  // window leaves the grid: contribution is zero
          }
          double acc = 0.0;
          for (std::int64_t u = 0; u < k; ++u) {
            for (std::int64_t v = 0; v < k; ++v) {
              std::int64_t si, sj;
              if (map_tap(i + u - r, j + v - r, H, W, mode, si, sj)) {
                acc += xc[si * W + sj] * wc[u * k + v];
              }
            }
          }
          yc[i * W + j] = acc;
        }
      }
    }
  }
  out.quantize_inplace();

  auto xn = x.node_ptr(), wn = w.node_ptr(), on = out.node_ptr();
  record_op({x, w}, out, [xn, wn, on, B, C, H, W, k, r, mode]() {
    const auto& g = *on->grad;
    double* gx = xn->requires_grad ? grad_of(xn).data() : nullptr;
    double* gw = wn->requires_grad ? grad_of(wn).data() : nullptr;
    if (!gx && !gw) return;
    for (std::int64_t b = 0; b < B; ++b) {
      for (std::int64_t c = 0; c < C; ++c) {
        const double* xc = xn->data.data() + (b * C + c) * H * W;
        const double* wc = wn->data.data() + c * k * k;
        const double* gc = g.data() + (b * C + c) * H * W;
        for (std::int64_t i = 0; i < H; ++i) {
          for (std::int64_t j = 0; j < W; ++j) {
            if (mode == PaddingMode::none &&
                (i < r || i >= H - r || j < r || j >= W - r)) {
              continue;
            }
            const double go = gc[i * W + j];
            if (go == 0.0) continue;
            for (std::int64_t u = 0; u < k; ++u) {
              for (std::int64_t v = 0; v < k; ++v) {
                std::int64_t si, sj;
                if (!map_tap(i + u - r, j + v - r, H, W, mode, si, sj)) continue;
                if (gx) gx[(b * C + c) * H * W + si * W + sj] += go * wc[u * k + v];
                if (gw) gw[c * k * k + u * k + v] += go * xc[si * W + sj];
              }
            }
          }
        }
      }
    }
  });
  return out;
}

SeparableConvParams make_separable_conv(int channels, int k, PaddingMode padding,
                                        Rng& rng, Precision p) {
  SeparableConvParams sp;
  sp.dw = make_depthwise_conv(channels, k, padding, rng, p);
  sp.pointwise = trunc_normal_tensor({channels, channels}, rng, 0.02, p);
  return sp;
}

Tensor separable_conv2d(const Tensor& x, const SeparableConvParams& p) {
  const std::int64_t C = x.dim(1);
  if (p.pointwise.rank() != 2 || p.pointwise.dim(0) != C ||
      p.pointwise.dim(1) != C) {
    throw ShapeError("pointwise stage must be [C,C] with C=" + std::to_string(C) +
                     ", got " + shape_str(p.pointwise.shape()));
  }
  Tensor t = depthwise_conv2d(x, p.dw);
  const std::int64_t B = t.dim(0), H = t.dim(2), W = t.dim(3);
  Tensor flat = reshape(permute(t, {0, 2, 3, 1}), {B, H * W, C});
  Tensor mixed = matmul(flat, p.pointwise);
  return permute(reshape(mixed, {B, H, W, C}), {0, 3, 1, 2});
}

// ---- patch embedding ----

Tensor extract_patches(const Tensor& image, int patch) {
  if (image.rank() != 4) {
    throw ShapeError("patch extraction expects [batch, channels, H, W], got " +
                     shape_str(image.shape()));
  }
  const std::int64_t B = image.dim(0), C = image.dim(1), H = image.dim(2),
                     W = image.dim(3);
  const std::int64_t S = patch;
  if (S <= 0 || H % S != 0 || W % S != 0) {
    throw InputError("image " + std::to_string(H) + "x" + std::to_string(W) +
                     " is not divisible by patch size " + std::to_string(S));
  }
  const std::int64_t Hg = H / S, Wg = W / S, N = Hg * Wg, D = C * S * S;
  Tensor out = Tensor::zeros({B, N, D}, image.precision());
  for (std::int64_t b = 0; b < B; ++b) {
    for (std::int64_t gy = 0; gy < Hg; ++gy) {
      for (std::int64_t gx = 0; gx < Wg; ++gx) {
        const std::int64_t n = gy * Wg + gx;
        double* dst = out.data().data() + (b * N + n) * D;
        for (std::int64_t c = 0; c < C; ++c) {
          const double* src = image.data().data() + ((b * C + c) * H + gy * S) * W + gx * S;
          for (std::int64_t py = 0; py < S; ++py) {
            for (std::int64_t px = 0; px < S; ++px) {
              dst[(c * S + py) * S + px] = src[py * W + px];
            }
          }
        }
      }
    }
  }
  auto in = image.node_ptr(), on = out.node_ptr();
  record_op({image}, out, [in, on, B, C, H, W, S, Hg, Wg, N, D]() {
    if (!in->requires_grad) return;
    const auto& g = *on->grad;
    auto& gi = grad_of(in);
    for (std::int64_t b = 0; b < B; ++b) {
      for (std::int64_t gy = 0; gy < Hg; ++gy) {
        for (std::int64_t gx = 0; gx < Wg; ++gx) {
          const std::int64_t n = gy * Wg + gx;
          const double* src = g.data() + (b * N + n) * D;
          for (std::int64_t c = 0; c < C; ++c) {
            double* dst = gi.data() + ((b * C + c) * H + gy * S) * W + gx * S;
            for (std::int64_t py = 0; py < S; ++py) {
              for (std::int64_t px = 0; px < S; ++px) {
                dst[py * W + px] += src[(c * S + py) * S + px];
              }
            }
          }
        }
      }
    }
  });
  return out;
}

TokenGrid patch_embed(const Tensor& image, int patch, const LinearParams& proj) {
  Tensor patches = extract_patches(image, patch);
  TokenGrid tg;
  tg.tokens = linear(patches, proj);
  tg.grid_h = static_cast<int>(image.dim(2) / patch);
  tg.grid_w = static_cast<int>(image.dim(3) / patch);
  tg.has_cls = false;
  return tg;
}

// ---- pooling / loss / metrics ----

Tensor mean_tokens(const Tensor& x) {
  if (x.rank() != 3) {
    throw ShapeError("token mean expects [batch, tokens, dim], got " +
                     shape_str(x.shape()));
  }
  const std::int64_t B = x.dim(0), N = x.dim(1), d = x.dim(2);
  Tensor ones = Tensor::full({N, 1}, 1.0, x.precision());
  Tensor s = matmul(permute(x, {0, 2, 1}), ones);  // [B,d,1]
  return scale(reshape(s, {B, d}), 1.0 / static_cast<double>(N));
}

Tensor cross_entropy(const Tensor& logits, const std::vector<int>& labels,
                     double smoothing) {
  if (logits.rank() != 2) {
    throw ShapeError("cross entropy expects [batch, classes], got " +
                     shape_str(logits.shape()));
  }
  const std::int64_t B = logits.dim(0), K = logits.dim(1);
  if (static_cast<std::int64_t>(labels.size()) != B) {
    throw InputError("label count " + std::to_string(labels.size()) +
                     " does not match batch " + std::to_string(B));
  }
  for (int y : labels) {
    if (y < 0 || y >= K) {
      throw InputError("label " + std::to_string(y) + " outside [0, " +
                       std::to_string(K) + ")");
    }
  }
  const double off = smoothing / static_cast<double>(K);
  const double on = 1.0 - smoothing + off;

  double total = 0.0;
  for (std::int64_t b = 0; b < B; ++b) {
    const double* row = logits.data().data() + b * K;
    double mx = row[0];
    for (std::int64_t j = 1; j < K; ++j) mx = std::max(mx, row[j]);
    double z = 0.0;
    for (std::int64_t j = 0; j < K; ++j) z += std::exp(row[j] - mx);
    const double lse = mx + std::log(z);
    double loss = 0.0;
    for (std::int64_t j = 0; j < K; ++j) {
      const double t = (j == labels[static_cast<size_t>(b)]) ? on : off;
      if (t != 0.0) loss -= t * (row[j] - lse);
    }
    total += loss;
  }
  Tensor out = Tensor::from_data({}, {total / static_cast<double>(B)},
                                 logits.precision());

  auto ln = logits.node_ptr(), on_node = out.node_ptr();
  std::vector<int> ys = labels;
  record_op({logits}, out, [ln, on_node, ys, B, K, on, off]() {
    if (!ln->requires_grad) return;
    const double g = (*on_node->grad)[0] / static_cast<double>(B);
    auto& gl = grad_of(ln);
    for (std::int64_t b = 0; b < B; ++b) {
      const double* row = ln->data.data() + b * K;
      double mx = row[0];
      for (std::int64_t j = 1; j < K; ++j) mx = std::max(mx, row[j]);
      double z = 0.0;
      for (std::int64_t j = 0; j < K; ++j) z += std::exp(row[j] - mx);
      for (std::int64_t j = 0; j < K; ++j) {
        const double p = std::exp(row[j] - mx) / z;
        const double t = (j == ys[static_cast<size_t>(b)]) ? on : off;
        gl[static_cast<size_t>(b * K + j)] += g * (p - t);
      }
    }
  });
  return out;
}

double accuracy(const Tensor& logits, const std::vector<int>& labels) {
  const std::int64_t B = logits.dim(0), K = logits.dim(1);
  if (static_cast<std::int64_t>(labels.size()) != B) {
    throw InputError("label count " + std::to_string(labels.size()) +
                     " does not match batch " + std::to_string(B));
  }
  std::int64_t hits = 0;
  for (std::int64_t b = 0; b < B; ++b) {
    const double* row = logits.data().data() + b * K;
    std::int64_t best = 0;
    for (std::int64_t j = 1; j < K; ++j) {
      if (row[j] > row[best]) best = j;
    }
    if (best == labels[static_cast<size_t>(b)]) ++hits;
  }
  return static_cast<double>(hits) / static_cast<double>(B);
}

// ---- optimizer ----

void adamw_step(Tensor& param, const std::vector<double>& grad, AdamState& state,
                double lr, double wd, double beta1, double beta2, double eps) {
  if (lr <= 0.0) {
    throw ConfigError("learning rate must be positive, got " + std::to_string(lr));
  }
  const size_t n = static_cast<size_t>(param.numel());
  if (grad.size() != n) {
    throw ShapeError("gradient length " + std::to_string(grad.size()) +
                     " does not match parameter " + shape_str(param.shape()));
  }
  if (state.m.empty()) {
    state.m.assign(n, 0.0);
    state.v.assign(n, 0.0);
    state.t = 0;
  } else if (state.m.size() != n || state.v.size() != n) {
    throw ContractError("optimizer state does not match parameter " +
                        shape_str(param.shape()));
  }
  state.t += 1;
  const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(state.t));
  const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(state.t));
  for (size_t i = 0; i < n; ++i) {
    state.m[i] = beta1 * state.m[i] + (1.0 - beta1) * grad[i];
    state.v[i] = beta2 * state.v[i] + (1.0 - beta2) * grad[i] * grad[i];
    const double mh = state.m[i] / bc1;
    const double vh = state.v[i] / bc2;
    double p = param[static_cast<std::int64_t>(i)];
    p -= lr * wd * p;
    p -= lr * mh / (std::sqrt(vh) + eps);
    param[static_cast<std::int64_t>(i)] = p;
  }
  param.quantize_inplace();
}

}  // namespace cpvt
