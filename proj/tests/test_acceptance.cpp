// Acceptance suite: ten structural claims about the conditional-encoding
// transformer, one test case per claim, each printing a single PASS/FAIL
// line. Every tolerance is pinned here or in verification.hpp; training
// configurations are frozen so reruns reproduce the same numbers exactly.
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <functional>
#include <string>
#include <vector>

#include "cpvt/checkpoint.hpp"
#include "cpvt/errors.hpp"
#include "cpvt/model.hpp"
#include "cpvt/nn.hpp"
#include "cpvt/pos_encoding.hpp"
#include "cpvt/rng.hpp"
#include "cpvt/synthetic.hpp"
#include "cpvt/tensor.hpp"
#include "cpvt/train.hpp"
#include "cpvt/verification.hpp"

using namespace cpvt;

namespace {

void report(int n, const char* what, bool ok) {
  std::printf("criterion %d: %s  [%s]\n", n, ok ? "PASS" : "FAIL", what);
  std::fflush(stdout);
  CHECK_MESSAGE(ok, "criterion ", n, " (", std::string(what), ")");
}

ModelConfig small_config(SchemeKind kind, HeadKind head) {
  ModelConfig cfg;
  cfg.depth = 2;
  cfg.dim = 32;
  cfg.heads = 4;
  cfg.patch = 8;
  cfg.image_size = 32;
  cfg.in_channels = 1;
  cfg.num_classes = 2;
  cfg.head = head;
  cfg.ffn_ratio = 2;
  cfg.scheme.kind = kind;
  if (kind == SchemeKind::peg) cfg.scheme.peg.positions = {-1};
  return cfg;
}

PEGParams single_depthwise(int channels, int k, PaddingMode pad, Rng& rng) {
  PEGParams peg;
  peg.spec.kernel = k;
  peg.spec.layers = 1;
  peg.spec.padding = pad;
  DepthwiseConvParams dw;
  dw.padding = pad;
  dw.kernel = random_normal({channels, k, k}, rng, 0.5);
  peg.dw.push_back(dw);
  return peg;
}

// Toroidal pixel roll of [B,C,H,W] images.
Tensor roll_image(const Tensor& img, int dy, int dx) {
  const std::int64_t B = img.dim(0), C = img.dim(1);
  const int H = int(img.dim(2)), W = int(img.dim(3));
  Tensor out = Tensor::zeros(img.shape(), img.precision());
  for (std::int64_t b = 0; b < B; ++b) {
    for (std::int64_t c = 0; c < C; ++c) {
      for (int y = 0; y < H; ++y) {
        for (int x = 0; x < W; ++x) {
          const int sy = ((y - dy) % H + H) % H;
          const int sx = ((x - dx) % W + W) % W;
          out[((b * C + c) * H + y) * W + x] =
              img[((b * C + c) * H + sy) * W + sx];
        }
      }
    }
  }
  return out;
}

double metric(const ProbeReport& rep, const std::string& key) {
  for (const auto& [k, v] : rep.metrics) {
    if (k == key) return v;
  }
  return std::nan("");
}

}  // namespace

// ---------------------------------------------------------------------------
// 1. The generator's cost arithmetic: a depthwise 3x3 generator on a
//    192-channel 14x14 token grid costs 1728 parameters and 338688 MACs;
//    the separable variant costs d^2 + k^2 d = 38592 parameters; a learnable
//    table over the same grid costs 37632 (plus 192 for a class slot).
// ---------------------------------------------------------------------------
TEST_CASE("criterion 1") {
  bool ok = true;
  try {
    ModelConfig cfg;
    cfg.depth = 1;
    cfg.dim = 192;
    cfg.heads = 3;
    cfg.patch = 16;
    cfg.image_size = 224;  // 14x14 token grid
    cfg.in_channels = 3;
    cfg.num_classes = 1000;
    cfg.head = HeadKind::gap;
    cfg.scheme.kind = SchemeKind::peg;
    cfg.scheme.peg.positions = {-1};

    const CountReport dw = count_params_flops(build_model(cfg, 0));
    ok &= dw.peg_params == 1728;
    ok &= dw.pos_params == 1728;
    ok &= dw.peg_flops == 338688;  // 196 grid positions x 1728 MACs
    CHECK(dw.peg_params == 1728);
    CHECK(dw.peg_flops == 338688);

    cfg.scheme.peg.function = PEGFunction::separable;
    const CountReport sep = count_params_flops(build_model(cfg, 0));
    ok &= sep.peg_params == 38592;
    ok &= sep.peg_flops == 196 * 38592;
    CHECK(sep.peg_params == 38592);

    cfg.scheme = EncodingScheme{};
    cfg.scheme.kind = SchemeKind::learnable;
    const CountReport tab = count_params_flops(build_model(cfg, 0));
    ok &= tab.pos_params == 37632;  // 196 x 192, grid slots only
    ok &= tab.peg_params == 0 && tab.peg_flops == 0;
    CHECK(tab.pos_params == 37632);

    cfg.head = HeadKind::cls;
    const CountReport tab_cls = count_params_flops(build_model(cfg, 0));
    ok &= tab_cls.pos_params == 37632 + 192;
    CHECK(tab_cls.pos_params == 37824);

    // the generator is ~22x cheaper than the table it replaces
    ok &= dw.peg_params * 21 < tab.pos_params;
  } catch (const std::exception& e) {
    MESSAGE("exception: ", std::string(e.what()));
    ok = false;
  }
  report(1, "generator cost arithmetic (exact integers)", ok);
}

// ---------------------------------------------------------------------------
// 2. The depthwise generator layer matches an independently coded expansion
//    of its defining sum to 1e-12, across kernels {1,3,5}, grids up to 8x8,
//    and multiple channels.
// ---------------------------------------------------------------------------
TEST_CASE("criterion 2") {
  bool ok = true;
  double worst = 0.0;
  try {
    Rng rng(2024);
    for (int trial = 0; trial < 50; ++trial) {
      for (int k : {1, 3, 5}) {
        const int H = 2 + int(rng.below(7));
        const int W = 2 + int(rng.below(7));
        const int C = 1 + int(rng.below(3));
        PEGParams peg = single_depthwise(C, k, PaddingMode::zero, rng);
        Tensor tokens = random_normal({1, std::int64_t(H) * W, C}, rng, 1.0);
        TokenGrid grid{tokens, H, W, false};
        Tensor out = peg_forward(grid, peg).tokens;
        for (int ch = 0; ch < C; ++ch) {
          Tensor xc = Tensor::zeros({H, W});
          for (std::int64_t i = 0; i < xc.numel(); ++i) xc[i] = tokens[i * C + ch];
          Tensor wc = Tensor::zeros({k, k});
          for (std::int64_t i = 0; i < wc.numel(); ++i) {
            wc[i] = peg.dw[0].kernel[ch * k * k + i];
          }
          const Tensor yc = conv_expansion_oracle(xc, wc);
          for (std::int64_t i = 0; i < yc.numel(); ++i) {
            worst = std::max(worst, std::fabs(yc[i] - out[i * C + ch]));
          }
        }
      }
    }
    ok = worst <= tol::kOracle64;
  } catch (const std::exception& e) {
    MESSAGE("exception: ", std::string(e.what()));
    ok = false;
  }
  MESSAGE("worst |layer - oracle|: ", worst);
  report(2, "conv layer vs independent oracle <= 1e-12", ok);
}

// ---------------------------------------------------------------------------
// 3. Analytic gradients of every differentiable op — and of a small
//    end-to-end encoder — match central finite differences to 1e-4.
// ---------------------------------------------------------------------------
TEST_CASE("criterion 3") {
  bool ok = true;
  double worst = 0.0;
  auto gc = [&](const char* name,
                const std::function<Tensor(const Tensor&)>& f, const Tensor& x) {
    try {
      const double err = grad_check(f, x, tol::kGradCheckEps);
      worst = std::max(worst, err);
      CHECK_MESSAGE(err <= tol::kGradCheck, std::string(name), ": rel err ", err);
      if (!(err <= tol::kGradCheck)) ok = false;
    } catch (const std::exception& e) {
      MESSAGE(std::string(name), ": exception ", std::string(e.what()));
      ok = false;
    }
  };

  Rng rng(7);
  const Tensor a23 = random_normal({2, 3}, rng, 1.0);
  const Tensor b23 = random_normal({2, 3}, rng, 1.0);
  gc("add", [&](const Tensor& t) { return add(t, b23); }, a23);
  gc("sub", [&](const Tensor& t) { return sub(b23, t); }, a23);
  gc("mul", [&](const Tensor& t) { return mul(t, b23); }, a23);
  gc("scale", [&](const Tensor& t) { return scale(t, -1.7); }, a23);

  const Tensor a234 = random_normal({2, 3, 4}, rng, 1.0);
  const Tensor bias4 = random_normal({4}, rng, 1.0);
  gc("add_bcast lhs", [&](const Tensor& t) { return add_bcast(t, bias4); }, a234);
  gc("add_bcast rhs", [&](const Tensor& t) { return add_bcast(a234, t); }, bias4);

  // keep relu inputs away from its kink so the finite difference is clean
  Tensor away = random_uniform({3, 5}, rng, 0.2, 1.0);
  for (std::int64_t i = 0; i < away.numel(); ++i) {
    if (i % 2 == 0) away[i] = -away[i];
  }
  gc("relu", [&](const Tensor& t) { return relu(t); }, away);
  gc("gelu", [&](const Tensor& t) { return gelu(t); }, a23);

  const Tensor m34 = random_normal({3, 4}, rng, 1.0);
  const Tensor m45 = random_normal({4, 5}, rng, 1.0);
  gc("matmul lhs", [&](const Tensor& t) { return matmul(t, m45); }, m34);
  gc("matmul rhs", [&](const Tensor& t) { return matmul(m34, t); }, m45);
  const Tensor batched = random_normal({2, 3, 4}, rng, 1.0);
  gc("matmul batched", [&](const Tensor& t) { return matmul(t, m45); }, batched);

  gc("softmax", [&](const Tensor& t) { return softmax(t, 1); }, m34);
  gc("sum", [&](const Tensor& t) { return sum(t); }, a234);
  gc("reshape", [&](const Tensor& t) { return reshape(t, {6, 4}); }, a234);
  gc("permute", [&](const Tensor& t) { return permute(t, {2, 0, 1}); }, a234);
  gc("slice", [&](const Tensor& t) { return slice_axis(t, 1, 1, 2); }, a234);
  gc("concat lhs", [&](const Tensor& t) { return concat_axis(t, a234, 1); }, a234);
  gc("concat rhs", [&](const Tensor& t) { return concat_axis(a234, t, 2); }, a234);

  LinearParams lin = make_linear(4, 3, rng);
  const Tensor lx = random_normal({2, 4}, rng, 1.0);
  gc("linear x", [&](const Tensor& t) { return linear(t, lin); }, lx);
  gc("linear W",
     [&](const Tensor& t) { return linear(lx, LinearParams{t, lin.bias}); },
     lin.weight);
  gc("linear b",
     [&](const Tensor& t) { return linear(lx, LinearParams{lin.weight, t}); },
     lin.bias);

  LayerNormParams ln = make_layer_norm(6);
  const Tensor nx = random_normal({2, 4, 6}, rng, 1.0);
  const Tensor gamma = random_normal({6}, rng, 0.3);
  gc("layer_norm x",
     [&](const Tensor& t) { return layer_norm(t, gamma, ln.beta); }, nx);
  gc("layer_norm gamma",
     [&](const Tensor& t) { return layer_norm(nx, t, ln.beta); }, gamma);
  gc("layer_norm beta",
     [&](const Tensor& t) { return layer_norm(nx, gamma, t); }, ln.beta);

  MHSAParams att = make_mhsa(8, 2, rng);
  const Tensor ax = random_normal({1, 4, 8}, rng, 1.0);
  gc("mhsa x", [&](const Tensor& t) { return mhsa(t, att); }, ax);
  gc("mhsa Wq",
     [&](const Tensor& t) {
       MHSAParams p = att;
       p.q.weight = t;
       return mhsa(ax, p);
     },
     att.q.weight);

  FFNParams f6 = make_ffn(6, 8, Activation::gelu, rng);
  const Tensor fx = random_normal({1, 3, 6}, rng, 1.0);
  gc("ffn x", [&](const Tensor& t) { return ffn(t, f6); }, fx);
  gc("ffn W1",
     [&](const Tensor& t) {
       FFNParams p = f6;
       p.fc1.weight = t;
       return ffn(fx, p);
     },
     f6.fc1.weight);

  for (PaddingMode pad :
       {PaddingMode::zero, PaddingMode::circular, PaddingMode::none}) {
    DepthwiseConvParams dwp;
    dwp.padding = pad;
    dwp.kernel = random_normal({2, 3, 3}, rng, 0.5);
    const Tensor cx = random_normal({1, 2, 4, 4}, rng, 1.0);
    const std::string tag = "depthwise(" + to_string(pad) + ")";
    gc((tag + " x").c_str(),
       [&](const Tensor& t) { return depthwise_conv2d(t, dwp); }, cx);
    gc((tag + " w").c_str(),
       [&](const Tensor& t) {
         DepthwiseConvParams p = dwp;
         p.kernel = t;
         return depthwise_conv2d(cx, p);
       },
       dwp.kernel);
  }

  SeparableConvParams sp = make_separable_conv(3, 3, PaddingMode::zero, rng);
  const Tensor sx = random_normal({1, 3, 4, 4}, rng, 1.0);
  gc("separable x", [&](const Tensor& t) { return separable_conv2d(t, sp); }, sx);
  gc("separable pw",
     [&](const Tensor& t) {
       SeparableConvParams p = sp;
       p.pointwise = t;
       return separable_conv2d(sx, p);
     },
     sp.pointwise);

  Rng peg_rng(8);
  PEGParams peg = single_depthwise(3, 3, PaddingMode::zero, peg_rng);
  const Tensor toks = random_normal({1, 12, 3}, rng, 1.0);
  gc("generator tokens",
     [&](const Tensor& t) {
       return peg_forward(TokenGrid{t, 3, 4, false}, peg).tokens;
     },
     toks);
  gc("generator kernel",
     [&](const Tensor& t) {
       PEGParams p = peg;
       p.dw[0].kernel = t;
       return peg_forward(TokenGrid{toks, 3, 4, false}, p).tokens;
     },
     peg.dw[0].kernel);
  const Tensor toks_cls = random_normal({1, 13, 3}, rng, 1.0);
  gc("generator with class token",
     [&](const Tensor& t) {
       return peg_forward(TokenGrid{t, 3, 4, true}, peg).tokens;
     },
     toks_cls);
  const std::vector<std::uint8_t> mask{1, 0, 0, 1, 0, 1, 0, 0, 1, 0, 0, 1};
  gc("masked generator tokens",
     [&](const Tensor& t) {
       return peg_forward_masked(TokenGrid{t, 3, 4, false}, peg, mask).tokens;
     },
     toks);

  gc("mean_tokens", [&](const Tensor& t) { return mean_tokens(t); },
     random_normal({2, 5, 3}, rng, 1.0));

  const std::vector<int> labels{1, 0, 3, 2};
  const Tensor logits = random_normal({4, 4}, rng, 1.0);
  gc("cross_entropy", [&](const Tensor& t) { return cross_entropy(t, labels); },
     logits);
  gc("cross_entropy smoothed",
     [&](const Tensor& t) { return cross_entropy(t, labels, 0.1); }, logits);

  RelativeBias rel = make_relative_bias(1, 4, rng, Precision::f64, true);
  MHSAParams ratt = make_mhsa(8, 2, rng);
  const Tensor rx = random_normal({1, 6, 8}, rng, 1.0);
  gc("relative mhsa x",
     [&](const Tensor& t) {
       return relative_mhsa(TokenGrid{t, 2, 3, false}, ratt, rel);
     },
     rx);
  gc("relative mhsa key table",
     [&](const Tensor& t) {
       RelativeBias b = rel;
       b.key_table = t;
       return relative_mhsa(TokenGrid{rx, 2, 3, false}, ratt, b);
     },
     rel.key_table);

  // end-to-end: a one-block encoder with generator, pooling, and classifier
  try {
    ModelConfig cfg;
    cfg.depth = 1;
    cfg.dim = 8;
    cfg.heads = 2;
    cfg.patch = 4;
    cfg.image_size = 8;
    cfg.in_channels = 1;
    cfg.num_classes = 3;
    cfg.head = HeadKind::gap;
    cfg.ffn_ratio = 2;
    cfg.activation = Activation::gelu;  // smooth end to end
    cfg.scheme.kind = SchemeKind::peg;
    cfg.scheme.peg.positions = {-1};
    Model tiny = build_model(cfg, 3);
    const Tensor img = random_normal({1, 1, 8, 8}, rng, 1.0);
    gc("tiny encoder end-to-end",
       [&](const Tensor& t) { return forward(tiny, t); }, img);
  } catch (const std::exception& e) {
    MESSAGE("tiny encoder: exception ", std::string(e.what()));
    ok = false;
  }

  MESSAGE("worst grad-check relative error: ", worst);
  report(3, "finite-difference gradient checks <= 1e-4", ok);
}

// ---------------------------------------------------------------------------
// 4. Symmetry suite: (a) an encoding-free model is permutation-equivariant;
//    (b) a generator model is not; (c,d) the generator commutes with grid
//    translations (toroidally under circular padding, within the content
//    margin under zero padding); (e) a whole circular-generator GAP model is
//    invariant to toroidal patch-aligned image rolls.
// ---------------------------------------------------------------------------
TEST_CASE("criterion 4") {
  bool ok = true;
  try {
    Model plain = build_model(small_config(SchemeKind::none, HeadKind::cls), 2);
    ProbeReport a = permutation_probe(plain, 20, 11);
    MESSAGE(a.line());
    ok &= a.pass && metric(a, "max_deviation") <= tol::kModelInvariance;

    Model generator =
        build_model(small_config(SchemeKind::peg, HeadKind::gap), 2);
    ProbeReport b = permutation_probe(generator, 20, 11);
    MESSAGE(b.line());
    ok &= b.pass && metric(b, "variant_trials") >= 1.0;

    Rng rng(12);
    PEGParams circ = single_depthwise(8, 3, PaddingMode::circular, rng);
    for (auto [dy, dx] : std::vector<std::pair<int, int>>{
             {0, 0}, {1, 0}, {0, 1}, {2, 3}, {-1, -2}, {5, 9}}) {
      ProbeReport c = translation_probe(circ, dy, dx, 31);
      ok &= c.pass && metric(c, "max_deviation") <= tol::kLayerEquivariance;
      if (!c.pass) MESSAGE(c.line());
    }

    PEGParams zero = single_depthwise(8, 3, PaddingMode::zero, rng);
    for (int s = 0; s <= 3; ++s) {
      ProbeReport d = translation_probe(zero, s, 3 - s, 31);
      ok &= d.pass && metric(d, "max_deviation") <= tol::kLayerEquivariance;
      if (!d.pass) MESSAGE(d.line());
    }

    // (e) full-model toroidal invariance: circular generators at the input
    // and after block 0, GAP head, image rolled by whole patches
    ModelConfig cfg = small_config(SchemeKind::peg, HeadKind::gap);
    cfg.scheme.peg.padding = PaddingMode::circular;
    cfg.scheme.peg.positions = {-1, 0};
    Model torus = build_model(cfg, 4);
    Rng ir(13);
    const Tensor img = random_normal({1, 1, 32, 32}, ir, 1.0);
    NoGradGuard guard;
    const Tensor base_logits = forward(torus, img);
    double worst_roll = 0.0;
    for (int dy = 0; dy < 4; ++dy) {
      for (int dx = 0; dx < 4; ++dx) {
        const Tensor rolled = forward(torus, roll_image(img, 8 * dy, 8 * dx));
        worst_roll = std::max(worst_roll, max_abs_diff(rolled, base_logits));
      }
    }
    MESSAGE("worst logit deviation over 16 patch rolls: ", worst_roll);
    ok &= worst_roll <= tol::kModelInvariance;
  } catch (const std::exception& e) {
    MESSAGE("exception: ", std::string(e.what()));
    ok = false;
  }
  report(4, "permutation/translation symmetry suite", ok);
}

// ---------------------------------------------------------------------------
// 5. Length generalization: grid-generated encodings run unchanged at new
//    resolutions (4x4 grid at build time, 6x6 and 8x8 at evaluation) without
//    touching any parameter; a learnable table refuses silently mismatched
//    input and needs the explicit resize path.
// ---------------------------------------------------------------------------
TEST_CASE("criterion 5") {
  bool ok = true;
  try {
    Rng rng(14);
    const Tensor img48 = random_normal({1, 1, 48, 48}, rng, 1.0);
    const Tensor img64 = random_normal({1, 1, 64, 64}, rng, 1.0);
    NoGradGuard guard;

    for (SchemeKind kind : {SchemeKind::peg, SchemeKind::none,
                            SchemeKind::sinusoidal1d, SchemeKind::sincos2d}) {
      Model m = build_model(small_config(kind, HeadKind::gap), 6);
      const std::uint64_t before = param_checksum(m);
      const Tensor l48 = forward(m, img48);
      const Tensor l64 = forward(m, img64);
      CAPTURE(to_string(kind));
      const bool fine = l48.dim(0) == 1 && l48.dim(1) == 2 &&
                        all_finite(l48) && all_finite(l64) &&
                        param_checksum(m) == before;
      CHECK_MESSAGE(fine, "scheme ", to_string(kind), " at 6x6/8x8 grids");
      ok &= fine;
    }

    Model table = build_model(small_config(SchemeKind::learnable, HeadKind::gap), 6);
    const std::uint64_t before = param_checksum(table);
    bool threw = false;
    try {
      forward(table, img48);
    } catch (const ResolutionError&) {
      threw = true;
    }
    ok &= threw;
    CHECK_MESSAGE(threw, "learnable table must reject a 6x6 grid by default");

    const Tensor resized = forward_variable_resolution(table, img48);
    ok &= all_finite(resized) && param_checksum(table) == before;
    CHECK(all_finite(resized));
    CHECK(param_checksum(table) == before);  // resize never mutates the table
  } catch (const std::exception& e) {
    MESSAGE("exception: ", std::string(e.what()));
    ok = false;
  }
  report(5, "resolution transfer without parameter changes", ok);
}

// ---------------------------------------------------------------------------
// 6. Zero padding leaks absolute position: a linear readout recovers token
//    coordinates from zero-padded generator features but not from circular
//    ones (R^2 gap >= 0.2 on at least 4 of 5 seeds).
// ---------------------------------------------------------------------------
TEST_CASE("criterion 6") {
  bool ok = true;
  int passes = 0;
  try {
    LeakageOptions opt;
    for (std::uint64_t seed = 1; seed <= 5; ++seed) {
      ProbeReport rep = position_leakage_probe(opt, seed);
      MESSAGE(rep.line());
      if (rep.pass) ++passes;
    }
    ok = passes >= 4;
  } catch (const std::exception& e) {
    MESSAGE("exception: ", std::string(e.what()));
    ok = false;
  }
  MESSAGE("seeds passing: ", passes, "/5");
  report(6, "zero-padding position leakage (R^2 gap >= 0.2)", ok);
}

// ---------------------------------------------------------------------------
// 7. The sinusoidal table matches a long-double recomputation of its
//    defining formula to 1e-12 for positions up to 512 and widths up to 256,
//    and the 2-D variant is exactly two stacked 1-D tables.
// ---------------------------------------------------------------------------
TEST_CASE("criterion 7") {
  bool ok = true;
  double worst = 0.0;
  try {
    for (int d : {2, 64, 256}) {
      const int N = 513;
      const Tensor pe = sinusoidal_pe(N, d);
      for (int pos = 0; pos < N; ++pos) {
        for (int pair = 0; pair < d / 2; ++pair) {
          const long double freq =
              powl(10000.0L, -2.0L * pair / static_cast<long double>(d));
          const long double angle = static_cast<long double>(pos) * freq;
          const double ds = static_cast<double>(
              std::fabs(static_cast<long double>(pe.at({pos, 2 * pair})) -
                        sinl(angle)));
          const double dc = static_cast<double>(
              std::fabs(static_cast<long double>(pe.at({pos, 2 * pair + 1})) -
                        cosl(angle)));
          worst = std::max(worst, std::max(ds, dc));
        }
      }
    }
    ok &= worst <= tol::kOracle64;

    bool odd_throws = false, neg_throws = false;
    try {
      sinusoidal_pe(8, 7);
    } catch (const ConfigError&) {
      odd_throws = true;
    }
    try {
      sinusoidal_pe(-1, 8);
    } catch (const ConfigError&) {
      neg_throws = true;
    }
    ok &= odd_throws && neg_throws;
    CHECK(odd_throws);
    CHECK(neg_throws);

    // 2-D table: first half encodes the row, second half the column
    const int Hg = 3, Wg = 5, d2 = 8;
    const Tensor grid2 = sincos_2d(Hg, Wg, d2);
    const Tensor rows = sinusoidal_pe(Hg, d2 / 2);
    const Tensor cols = sinusoidal_pe(Wg, d2 / 2);
    double worst2 = 0.0;
    for (int r = 0; r < Hg; ++r) {
      for (int c = 0; c < Wg; ++c) {
        for (int e = 0; e < d2 / 2; ++e) {
          worst2 = std::max(
              worst2, std::fabs(grid2.at({std::int64_t(r) * Wg + c, e}) -
                                rows.at({r, e})));
          worst2 = std::max(
              worst2, std::fabs(grid2.at({std::int64_t(r) * Wg + c, d2 / 2 + e}) -
                                cols.at({c, e})));
        }
      }
    }
    ok &= worst2 <= tol::kOracle64;
    CHECK(worst2 <= tol::kOracle64);
  } catch (const std::exception& e) {
    MESSAGE("exception: ", std::string(e.what()));
    ok = false;
  }
  MESSAGE("worst |table - long-double formula|: ", worst);
  report(7, "sinusoidal tables vs long-double formula <= 1e-12", ok);
}

// ---------------------------------------------------------------------------
// 8. Masked generator: positions flagged as padding keep their input values
//    bitwise while unmasked positions match the unmasked generator exactly;
//    degenerate masks collapse to the two pure cases.
// ---------------------------------------------------------------------------
TEST_CASE("criterion 8") {
  bool ok = true;
  try {
    Rng rng(15);
    PEGParams peg = single_depthwise(6, 3, PaddingMode::zero, rng);
    const int H = 5, W = 5;
    const std::int64_t N = std::int64_t(H) * W, d = 6;
    const Tensor toks = random_normal({1, N, d}, rng, 1.0);
    TokenGrid grid{toks, H, W, false};

    std::vector<std::uint8_t> mask(static_cast<std::size_t>(N), 0);
    for (std::int64_t n = 0; n < N; ++n) {
      mask[static_cast<std::size_t>(n)] = (n % 3 == 0) ? 1 : 0;
    }
    NoGradGuard guard;
    const Tensor plain = peg_forward(grid, peg).tokens;
    const Tensor masked = peg_forward_masked(grid, peg, mask).tokens;
    for (std::int64_t n = 0; n < N && ok; ++n) {
      const Tensor& expect = mask[static_cast<std::size_t>(n)] ? toks : plain;
      for (std::int64_t e = 0; e < d; ++e) {
        // bitwise: the masked path must copy, not recompute
        if (masked[n * d + e] != expect[n * d + e]) ok = false;
      }
    }
    CHECK_MESSAGE(ok, "mixed mask rows must copy input/plain rows bitwise");

    const std::vector<std::uint8_t> all_pad(static_cast<std::size_t>(N), 1);
    ok &= bitwise_equal(peg_forward_masked(grid, peg, all_pad).tokens, toks);
    const std::vector<std::uint8_t> none_pad(static_cast<std::size_t>(N), 0);
    ok &= bitwise_equal(peg_forward_masked(grid, peg, none_pad).tokens, plain);

    // class token rides along untouched
    Rng crng(16);
    const Tensor ctoks = random_normal({2, N + 1, d}, crng, 1.0);
    TokenGrid cgrid{ctoks, H, W, true};
    const Tensor cm = peg_forward_masked(cgrid, peg, mask).tokens;
    for (std::int64_t b = 0; b < 2; ++b) {
      for (std::int64_t e = 0; e < d; ++e) {
        if (cm[b * (N + 1) * d + e] != ctoks[b * (N + 1) * d + e]) ok = false;
      }
    }

    bool bad_len_throws = false;
    try {
      peg_forward_masked(grid, peg, std::vector<std::uint8_t>(7, 0));
    } catch (const ContractError&) {
      bad_len_throws = true;
    }
    ok &= bad_len_throws;
    CHECK(bad_len_throws);
  } catch (const std::exception& e) {
    MESSAGE("exception: ", std::string(e.what()));
    ok = false;
  }
  report(8, "masked generator keeps padding rows bitwise", ok);
}

// ---------------------------------------------------------------------------
// 9. Training comparison on the shifted synthetic task (frozen configs,
//    3 seeds each, deterministic):
//    (A) with templates placed center-only at train time and uniformly at
//        test time, the generator+GAP model's mean test accuracy is at least
//        the learnable-table+class-token model's (asserted); the table-vs-
//        no-encoding ordering is reported, not asserted.
//    (B) a frozen random generator beats no encoding by >= 0.02 mean
//        accuracy on a pure-position task, and the trainable generator is
//        not materially worse than the frozen one.
// ---------------------------------------------------------------------------
TEST_CASE("criterion 9") {
  bool ok = true;
  try {
    // ---- clause A ----
    auto run_variant = [](SchemeKind kind, HeadKind head, std::uint64_t seed) {
      TrainRun run;
      run.task.kind = TaskKind::single;
      run.task.image_size = 32;
      run.task.template_size = 8;
      run.task.num_classes = 16;
      run.task.noise_std = 0.2;
      run.task.train_placement = Placement::center;
      run.task.test_placement = Placement::uniform;
      run.task.seed = seed;
      run.model.depth = 2;
      run.model.dim = 32;
      run.model.heads = 4;
      run.model.patch = 8;
      run.model.image_size = 32;
      run.model.in_channels = 1;
      run.model.num_classes = 16;
      run.model.head = head;
      run.model.ffn_ratio = 2;
      run.model.scheme.kind = kind;
      if (kind == SchemeKind::peg) run.model.scheme.peg.positions = {-1};
      run.n_train = 2000;
      run.n_test = 1000;
      run.epochs = 10;
      run.batch_size = 32;
      run.lr = 3e-3;
      run.warmup_steps = 100;
      run.seed = seed;
      return train(run);
    };

    double mean_peg = 0.0, mean_table = 0.0, mean_none = 0.0;
    const std::vector<std::uint64_t> seeds{1, 2, 3};
    for (std::uint64_t s : seeds) {
      TrainResult peg = run_variant(SchemeKind::peg, HeadKind::gap, s);
      TrainResult table = run_variant(SchemeKind::learnable, HeadKind::cls, s);
      TrainResult none = run_variant(SchemeKind::none, HeadKind::cls, s);
      ok &= !peg.diverged && !table.diverged && !none.diverged;
      MESSAGE("seed ", s, ": generator+gap ", peg.final_test_acc,
              "  table+cls ", table.final_test_acc, "  none+cls ",
              none.final_test_acc);
      mean_peg += peg.final_test_acc / double(seeds.size());
      mean_table += table.final_test_acc / double(seeds.size());
      mean_none += none.final_test_acc / double(seeds.size());
    }
    MESSAGE("means: generator+gap ", mean_peg, "  table+cls ", mean_table,
            "  none+cls ", mean_none);
    // asserted: the generator transfers across placements at least as well
    // as the learnable table
    ok &= mean_peg >= mean_table;
    CHECK(mean_peg >= mean_table);
    // reported only: whether the table helped over no encoding at all
    MESSAGE("table+cls >= none+cls under the placement shift: ",
            mean_table >= mean_none
                ? std::string("yes")
                : std::string("no (reported, not asserted)"));

    // ---- clause B ----
    SyntheticTask locate;
    locate.kind = TaskKind::locate;
    locate.num_classes = 2;
    locate.image_size = 32;
    locate.template_size = 8;
    locate.noise_std = 0.05;
    ProbeReport rep = fixed_peg_comparison(locate, {1, 2, 3});
    MESSAGE(rep.line());
    ok &= rep.pass;
    ok &= metric(rep, "fixed_mean") - metric(rep, "none_mean") >= 0.02;
    CHECK(rep.pass);
    CHECK(metric(rep, "fixed_mean") - metric(rep, "none_mean") >= 0.02);
  } catch (const std::exception& e) {
    MESSAGE("exception: ", std::string(e.what()));
    ok = false;
  }
  report(9, "generator beats tables under placement shift (3 seeds)", ok);
}

// ---------------------------------------------------------------------------
// 10. Checkpoints round-trip every parameter bitwise at both precisions, and
//     any tampering — payload, digest, or version — is rejected loudly.
// ---------------------------------------------------------------------------
TEST_CASE("criterion 10") {
  bool ok = true;
  try {
    for (Precision prec : {Precision::f64, Precision::f32}) {
      ModelConfig cfg = small_config(SchemeKind::peg, HeadKind::gap);
      cfg.precision = prec;
      Model m = build_model(cfg, 17);
      const std::string path =
          prec == Precision::f64 ? "acc_ckpt_f64.ckpt" : "acc_ckpt_f32.ckpt";
      save_checkpoint(m, path);

      Model r = load_checkpoint(path);
      ok &= param_checksum(r) == param_checksum(m);
      auto pa = named_params(m), pb = named_params(r);
      ok &= pa.size() == pb.size();
      for (std::size_t i = 0; i < pa.size() && ok; ++i) {
        ok &= pa[i].first == pb[i].first &&
              bitwise_equal(pa[i].second, pb[i].second);
      }
      CHECK_MESSAGE(ok, "round trip at ", to_string(prec));

      const Checkpoint raw = read_checkpoint(path);
      ok &= raw.version == kCheckpointVersion;
    }

    // tampering: read the good f64 file and damage it three different ways
    std::ifstream in("acc_ckpt_f64.ckpt", std::ios::binary);
    std::vector<char> bytes((std::istreambuf_iterator<char>(in)),
                            std::istreambuf_iterator<char>());
    in.close();
    REQUIRE(bytes.size() > 64);

    auto write_bytes = [](const std::string& path, const std::vector<char>& b) {
      std::ofstream out(path, std::ios::binary);
      out.write(b.data(), static_cast<std::streamsize>(b.size()));
    };

    std::vector<char> payload_flip = bytes;
    payload_flip[bytes.size() / 2] ^= 0x20;
    write_bytes("acc_ckpt_payload.ckpt", payload_flip);
    bool payload_throws = false;
    try {
      read_checkpoint("acc_ckpt_payload.ckpt");
    } catch (const CorruptionError&) {
      payload_throws = true;
    }
    ok &= payload_throws;
    CHECK_MESSAGE(payload_throws, "payload flip must fail the digest");

    std::vector<char> digest_flip = bytes;
    digest_flip[bytes.size() - 1] ^= 0x01;
    write_bytes("acc_ckpt_digest.ckpt", digest_flip);
    bool digest_throws = false;
    try {
      read_checkpoint("acc_ckpt_digest.ckpt");
    } catch (const CorruptionError&) {
      digest_throws = true;
    }
    ok &= digest_throws;
    CHECK_MESSAGE(digest_throws, "digest flip must be rejected");

    std::vector<char> version_bump = bytes;
    version_bump[8] = 99;  // version field sits right after the 8-byte magic
    write_bytes("acc_ckpt_version.ckpt", version_bump);
    bool version_throws = false;
    try {
      read_checkpoint("acc_ckpt_version.ckpt");
    } catch (const VersionError&) {
      version_throws = true;
    }
    ok &= version_throws;
    CHECK_MESSAGE(version_throws, "unknown version must be a VersionError");

    std::vector<char> truncated(bytes.begin(),
                                bytes.begin() + std::int64_t(bytes.size()) / 3);
    write_bytes("acc_ckpt_trunc.ckpt", truncated);
    bool trunc_throws = false;
    try {
      read_checkpoint("acc_ckpt_trunc.ckpt");
    } catch (const CorruptionError&) {
      trunc_throws = true;
    }
    ok &= trunc_throws;
    CHECK(trunc_throws);
  } catch (const std::exception& e) {
    MESSAGE("exception: ", std::string(e.what()));
    ok = false;
  }
  report(10, "checkpoint round-trip and tamper rejection", ok);
}
