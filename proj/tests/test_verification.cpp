#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "cpvt/errors.hpp"
#include "cpvt/model.hpp"
#include "cpvt/pos_encoding.hpp"
#include "cpvt/rng.hpp"
#include "cpvt/tensor.hpp"
#include "cpvt/verification.hpp"

using namespace cpvt;
using doctest::Contains;

namespace {

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

ModelConfig probe_model_config(SchemeKind kind, HeadKind head) {
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

double metric(const ProbeReport& rep, const std::string& key) {
  for (const auto& [k, v] : rep.metrics) {
    if (k == key) return v;
  }
  FAIL("metric '" << key << "' missing from " << rep.line());
  return 0.0;
}

}  // namespace

TEST_CASE("reference expansion reproduces hand-checkable cases") {
  // zero kernel: pure residual, output equals input
  Tensor x = Tensor::from_data({2, 3}, {1, 2, 3, 4, 5, 6});
  Tensor w0 = Tensor::zeros({3, 3});
  CHECK(bitwise_equal(conv_expansion_oracle(x, w0), x));

  // 1x1 grid: only the kernel center ever lands on the grid
  Tensor one = Tensor::from_data({1, 1}, {2.5});
  Tensor w = Tensor::zeros({3, 3});
  for (std::int64_t i = 0; i < 9; ++i) w[i] = double(i + 1);
  Tensor y = conv_expansion_oracle(one, w);
  CHECK(y[0] == doctest::Approx(2.5 + 2.5 * w.at({1, 1})).epsilon(1e-15));

  // 1x1 kernel: per-cell scaling around the residual
  Tensor w1 = Tensor::from_data({1, 1}, {0.5});
  Tensor y1 = conv_expansion_oracle(x, w1);
  for (std::int64_t i = 0; i < x.numel(); ++i) {
    CHECK(y1[i] == doctest::Approx(1.5 * x[i]).epsilon(1e-15));
  }

  CHECK_THROWS_WITH_AS(conv_expansion_oracle(Tensor::zeros({2, 2, 2}), w),
                       Contains("2-d grid"), InputError);
  CHECK_THROWS_WITH_AS(conv_expansion_oracle(x, Tensor::zeros({2, 2})),
                       Contains("odd side"), InputError);
  CHECK_THROWS_WITH_AS(conv_expansion_oracle(x, Tensor::zeros({3, 5})),
                       Contains("square"), InputError);
}

TEST_CASE("generator layer agrees with the reference expansion") {
  Rng rng(21);
  double worst = 0.0;
  for (int trial = 0; trial < 50; ++trial) {
    for (int k : {1, 3, 5}) {
      const int H = 2 + int(rng.below(7));  // grids up to 8x8
      const int W = 2 + int(rng.below(7));
      const int C = 1 + int(rng.below(3));
      PEGParams peg = single_depthwise(C, k, PaddingMode::zero, rng);
      Tensor tokens = random_normal({1, std::int64_t(H) * W, C}, rng, 1.0);
      TokenGrid grid{tokens, H, W, false};
      Tensor out = peg_forward(grid, peg).tokens;

      for (int ch = 0; ch < C; ++ch) {
        Tensor xc = Tensor::zeros({H, W});
        for (std::int64_t i = 0; i < xc.numel(); ++i) {
          xc[i] = tokens[i * C + ch];
        }
        Tensor wc = Tensor::zeros({k, k});
        for (std::int64_t i = 0; i < wc.numel(); ++i) {
          wc[i] = peg.dw[0].kernel[ch * k * k + i];
        }
        Tensor yc = conv_expansion_oracle(xc, wc);
        for (std::int64_t i = 0; i < yc.numel(); ++i) {
          worst = std::max(worst, std::fabs(yc[i] - out[i * C + ch]));
        }
      }
    }
  }
  MESSAGE("worst |layer - reference| over 150 sweeps: ", worst);
  CHECK(worst <= tol::kOracle64);
}

TEST_CASE("translation probe: circular generators commute with torus shifts") {
  Rng rng(3);
  PEGParams peg = single_depthwise(8, 3, PaddingMode::circular, rng);
  for (auto [dy, dx] : std::vector<std::pair<int, int>>{
           {0, 0}, {1, 0}, {0, 1}, {3, 2}, {-2, 5}, {11, -7}}) {
    ProbeReport rep = translation_probe(peg, dy, dx, 17);
    CAPTURE(rep.line());
    CHECK(rep.pass);
    CHECK(metric(rep, "max_deviation") <= tol::kLayerEquivariance);
  }
  // identical inputs give byte-identical reports
  CHECK(translation_probe(peg, 2, 1, 17).line() ==
        translation_probe(peg, 2, 1, 17).line());
  // the zero shift compares a computation against itself
  CHECK(metric(translation_probe(peg, 0, 0, 17), "max_deviation") == 0.0);
}

TEST_CASE("translation probe: zero padding holds inside the content margin") {
  Rng rng(4);
  PEGParams peg = single_depthwise(8, 3, PaddingMode::zero, rng);
  for (int s = 0; s <= 3; ++s) {  // margin 4, reach 1
    ProbeReport rep = translation_probe(peg, s, -s, 23);
    CAPTURE(rep.line());
    CHECK(rep.pass);
    CHECK(metric(rep, "max_deviation") <= tol::kLayerEquivariance);
  }
  CHECK_THROWS_WITH_AS(translation_probe(peg, 4, 0, 23), Contains("margin"),
                       InputError);

  // a deeper stack has more reach, so less room to shift
  PEGParams deep = single_depthwise(8, 3, PaddingMode::zero, rng);
  deep.spec.layers = 2;
  deep.dw.push_back(deep.dw[0]);
  CHECK(translation_probe(deep, 2, 2, 23).pass);
  CHECK_THROWS_AS(translation_probe(deep, 3, 0, 23), InputError);
}

TEST_CASE("permutation probe separates encoding-free models from the rest") {
  Model plain = build_model(probe_model_config(SchemeKind::none, HeadKind::cls), 2);
  ProbeReport rep = permutation_probe(plain, 20, 5);
  CAPTURE(rep.line());
  CHECK(rep.pass);
  CHECK(metric(rep, "max_deviation") <= tol::kModelInvariance);

  Model generator =
      build_model(probe_model_config(SchemeKind::peg, HeadKind::gap), 2);
  ProbeReport rep_peg = permutation_probe(generator, 20, 5);
  CAPTURE(rep_peg.line());
  CHECK(rep_peg.pass);
  CHECK(metric(rep_peg, "variant_trials") >= 1.0);

  Model table =
      build_model(probe_model_config(SchemeKind::learnable, HeadKind::cls), 2);
  ProbeReport rep_tab = permutation_probe(table, 20, 5);
  CAPTURE(rep_tab.line());
  CHECK(rep_tab.pass);

  CHECK_THROWS_WITH_AS(permutation_probe(plain, 19, 5), Contains("20 trials"),
                       InputError);
  CHECK(permutation_probe(plain, 20, 5).line() == rep.line());
}

TEST_CASE("position-leakage probe finds the zero-padding signal") {
  LeakageOptions opt;
  int passes = 0;
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    ProbeReport rep = position_leakage_probe(opt, seed);
    MESSAGE(rep.line());
    if (rep.pass) ++passes;
    CHECK(metric(rep, "gap") ==
          metric(rep, "r2_zero") - metric(rep, "r2_circular"));
  }
  CHECK(passes >= 4);

  // constant images: the border-truncation pattern is the only signal, and
  // circular padding erases it entirely
  LeakageOptions flat = opt;
  flat.token_std = 0.0;
  ProbeReport rep = position_leakage_probe(flat, 1);
  CAPTURE(rep.line());
  CHECK(metric(rep, "r2_zero") >= 0.5);
  CHECK(metric(rep, "r2_circular") <= 0.05);

  LeakageOptions tiny = opt;
  tiny.grid_h = 1;
  tiny.grid_w = 1;
  ProbeReport degenerate = position_leakage_probe(tiny, 1);
  CHECK_FALSE(degenerate.pass);
  CHECK(degenerate.note.find("degenerate") != std::string::npos);

  LeakageOptions starved = opt;
  starved.n_images = 4;
  CHECK_THROWS_WITH_AS(position_leakage_probe(starved, 1), Contains("n_images"),
                       InputError);

  CHECK(position_leakage_probe(opt, 2).line() ==
        position_leakage_probe(opt, 2).line());
}

TEST_CASE("fixed-generator comparison needs enough seeds") {
  SyntheticTask task;
  task.kind = TaskKind::locate;
  task.num_classes = 2;
  task.image_size = 32;
  task.template_size = 8;
  task.noise_std = 0.05;
  CHECK_THROWS_WITH_AS(fixed_peg_comparison(task, {1, 2}),
                       Contains("3 seeds"), InputError);
}

TEST_CASE("probe reports serialize to one canonical line") {
  ProbeReport rep;
  rep.name = "demo";
  rep.pass = true;
  rep.seed = 7;
  rep.tolerance = 0.5;
  rep.metrics = {{"alpha", 1.0}, {"beta", 0.25}};
  rep.note = "note text";
  CHECK(rep.line() ==
        "name=demo pass=1 seed=7 tol=0.5 alpha=1 beta=0.25 note=\"note text\"");
  rep.pass = false;
  rep.note.clear();
  CHECK(rep.line() == "name=demo pass=0 seed=7 tol=0.5 alpha=1 beta=0.25");
}
