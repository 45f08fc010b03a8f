#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "cpvt/checkpoint.hpp"
#include "cpvt/config.hpp"
#include "cpvt/errors.hpp"
#include "cpvt/export.hpp"
#include "cpvt/model.hpp"
#include "cpvt/rng.hpp"
#include "cpvt/synthetic.hpp"
#include "cpvt/train.hpp"
#include "cpvt/verification.hpp"

namespace {

using cpvt::ConfigError;

// Shared flag surface: every flag writes one config key, so a config file and
// the command line are interchangeable. Precedence: defaults < --config file
// < dedicated flags < --set pairs.
struct KvArgs {
  std::string config_path;
  std::vector<std::string> sets;
  std::map<std::string, std::string> flag_values;

  void add_to(CLI::App* cmd) {
    cmd->add_option("--config", config_path,
                    "key=value config file; flags override its entries");
    cmd->add_option("--set", sets, "extra key=value override (repeatable)");
    add_key(cmd, "--task", "task", "task kind: single, pair, or locate");
    add_key(cmd, "--image-size", "image_size", "input image side");
    add_key(cmd, "--template-size", "template_size", "pattern side S");
    add_key(cmd, "--classes", "num_classes", "number of classes");
    add_key(cmd, "--noise", "noise_std", "background noise std");
    add_key(cmd, "--train-placement", "train_placement", "uniform or center");
    add_key(cmd, "--test-placement", "test_placement", "uniform or center");
    add_key(cmd, "--task-seed", "task_seed", "dataset seed");
    add_key(cmd, "--depth", "depth", "encoder blocks");
    add_key(cmd, "--dim", "dim", "embedding width");
    add_key(cmd, "--heads", "heads", "attention heads");
    add_key(cmd, "--patch", "patch", "patch side");
    add_key(cmd, "--in-channels", "in_channels", "input channels");
    add_key(cmd, "--head", "head", "readout: cls or gap");
    add_key(cmd, "--scheme", "scheme",
            "positional scheme: none, learnable, sinusoidal1d, sincos2d, "
            "relative, peg");
    add_key(cmd, "--peg-positions", "peg_positions",
            "comma list of generator positions (-1 = before block 0)");
    add_key(cmd, "--n-train", "n_train", "training images");
    add_key(cmd, "--n-test", "n_test", "test images");
    add_key(cmd, "--epochs", "epochs", "training epochs");
    add_key(cmd, "--batch-size", "batch_size", "minibatch size");
    add_key(cmd, "--lr", "lr", "peak learning rate");
    add_key(cmd, "--weight-decay", "weight_decay", "decoupled weight decay");
    add_key(cmd, "--warmup-steps", "warmup_steps", "linear warmup steps");
    add_key(cmd, "--label-smoothing", "label_smoothing", "smoothing in [0,1)");
    add_key(cmd, "--freeze-peg", "freeze_peg",
            "1 keeps generator convs at their random init");
    add_key(cmd, "--seed", "seed", "training seed");
    add_key(cmd, "--out", "out_dir", "output directory");
  }

  std::map<std::string, std::string> resolve() const {
    std::map<std::string, std::string> kv;
    if (!config_path.empty()) kv = cpvt::parse_config_file(config_path);
    for (const auto& [k, v] : flag_values) kv[k] = v;
    for (const std::string& s : sets) {
      const auto eq = s.find('=');
      if (eq == std::string::npos) {
        throw ConfigError("--set expects key=value, got '" + s + "'");
      }
      kv[s.substr(0, eq)] = s.substr(eq + 1);
    }
    return kv;
  }

 private:
  void add_key(CLI::App* cmd, const char* flag, const char* key,
               const char* help) {
    cmd->add_option_function<std::string>(
        flag, [this, key = std::string(key)](const std::string& v) {
          flag_values[key] = v;
        },
        help);
  }
};

cpvt::TrainRun run_from(const KvArgs& args) {
  return cpvt::train_run_from_kv(args.resolve());
}

std::uint64_t image_payload_checksum(const cpvt::Dataset& ds) {
  cpvt::Fnv1a h;
  const auto& vals = ds.images.data();
  h.update(vals.data(), vals.size() * sizeof(double));
  for (int label : ds.labels) h.update(&label, sizeof label);
  return h.digest();
}

int cmd_gen(const KvArgs& args) {
  cpvt::TrainRun run = run_from(args);
  run.task.validate();
  if (run.out_dir.empty()) {
    throw ConfigError("gen needs --out for its reproducibility summary");
  }
  auto [train_ds, test_ds] =
      cpvt::generate_dataset(run.task, run.n_train, run.n_test);

  std::filesystem::create_directories(run.out_dir);
  const std::string cfg_path = run.out_dir + "/task.cfg";
  std::ofstream cfg(cfg_path);
  if (!cfg) throw cpvt::IoError("cannot write '" + cfg_path + "'");
  for (const auto& [k, v] : cpvt::train_run_to_kv(run)) {
    cfg << k << '=' << v << '\n';
  }

  const std::string sum_path = run.out_dir + "/dataset_summary.txt";
  std::ofstream sum(sum_path);
  if (!sum) throw cpvt::IoError("cannot write '" + sum_path + "'");
  for (const auto* part : {"train", "test"}) {
    const cpvt::Dataset& ds = part == std::string("train") ? train_ds : test_ds;
    std::vector<int> counts(static_cast<std::size_t>(run.task.num_classes), 0);
    for (int l : ds.labels) ++counts[static_cast<std::size_t>(l)];
    sum << part << " n=" << ds.size();
    for (std::size_t c = 0; c < counts.size(); ++c) {
      sum << " class" << c << "=" << counts[c];
    }
    char buf[32];
    std::snprintf(buf, sizeof buf, "%016llx",
                  static_cast<unsigned long long>(image_payload_checksum(ds)));
    sum << " checksum=" << buf << '\n';
  }
  std::printf("wrote %s and %s\n", cfg_path.c_str(), sum_path.c_str());
  return 0;
}

int cmd_train(const KvArgs& args) {
  cpvt::TrainRun run = run_from(args);
  cpvt::TrainResult res = cpvt::train(run);
  for (const std::string& line : res.metrics) std::printf("%s\n", line.c_str());
  std::printf("final_test_acc=%.4f diverged=%d\n", res.final_test_acc,
              res.diverged ? 1 : 0);
  if (!res.checkpoint_path.empty()) {
    std::printf("checkpoint=%s\n", res.checkpoint_path.c_str());
  }
  return 0;
}

int cmd_eval(const KvArgs& args, const std::string& ckpt,
             const std::string& split, int resolution, bool allow_resize) {
  cpvt::TrainRun run = run_from(args);
  cpvt::Model model = cpvt::load_checkpoint(ckpt);
  cpvt::SyntheticTask task = run.task;
  if (resolution > 0) task.image_size = resolution;
  task.validate();
  const cpvt::Placement placement =
      split == "train" ? task.train_placement : task.test_placement;
  const int n = split == "train" ? run.n_train : run.n_test;
  cpvt::Dataset ds = cpvt::generate_split(task, n, placement, split);
  const double acc = cpvt::evaluate(model, ds, 64, allow_resize);
  std::printf("split=%s n=%d image_size=%d accuracy=%.6f\n", split.c_str(), n,
              task.image_size, acc);
  return 0;
}

int cmd_count(const KvArgs& args) {
  cpvt::TrainRun run = run_from(args);
  run.model.validate();
  cpvt::Model model = cpvt::build_model(run.model, 0);
  const cpvt::CountReport rep = cpvt::count_params_flops(model);
  std::printf("params=%lld\n", static_cast<long long>(rep.total_params));
  std::printf("positional=%lld\n", static_cast<long long>(rep.pos_params));
  std::printf("PEG=%lld\n", static_cast<long long>(rep.peg_params));
  std::printf("flops=%lld\n", static_cast<long long>(rep.flops));
  std::printf("PEG_flops=%lld\n", static_cast<long long>(rep.peg_flops));
  for (const auto& [name, count] : rep.param_groups) {
    std::printf("group.%s.params=%lld\n", name.c_str(),
                static_cast<long long>(count));
  }
  for (const auto& [name, count] : rep.flop_groups) {
    std::printf("group.%s.flops=%lld\n", name.c_str(),
                static_cast<long long>(count));
  }
  return 0;
}

int cmd_attn(const KvArgs& args, const std::string& ckpt, int layer,
             const std::string& format, int sample) {
  cpvt::TrainRun run = run_from(args);
  if (run.out_dir.empty()) throw ConfigError("attn needs --out for its files");
  cpvt::Model model = cpvt::load_checkpoint(ckpt);
  cpvt::SyntheticTask task = run.task;
  task.image_size = model.cfg.image_size;
  task.num_classes = model.cfg.num_classes;
  task.validate();
  cpvt::Dataset ds =
      cpvt::generate_split(task, sample + 1, task.test_placement, "test");
  const std::int64_t px = ds.images.numel() / ds.size();
  cpvt::Tensor image = cpvt::Tensor::zeros(
      {1, model.cfg.in_channels, task.image_size, task.image_size});
  for (std::int64_t i = 0; i < px; ++i) {
    image[i] = ds.images[static_cast<std::int64_t>(sample) * px + i];
  }

  std::filesystem::create_directories(run.out_dir);
  const auto files =
      cpvt::export_attention(model, image, layer, run.out_dir, format);
  for (const std::string& f : files) std::printf("wrote %s\n", f.c_str());

  // informational: fraction of near-uniform attention rows (no assertion)
  const auto records = cpvt::attention_scores(model, image, layer);
  int uniform_rows = 0, total_rows = 0;
  for (const auto& rec : records) {
    const std::int64_t N = rec.scores.dim(0);
    for (std::int64_t r = 0; r < N; ++r) {
      double mx = 0.0;
      for (std::int64_t c = 0; c < N; ++c) {
        mx = std::max(mx, rec.scores.at({r, c}));
      }
      if (mx < 4.0 / static_cast<double>(N)) ++uniform_rows;
      ++total_rows;
    }
  }
  std::printf("near_uniform_rows=%d/%d\n", uniform_rows, total_rows);
  return 0;
}

int cmd_probe(const KvArgs& args, const std::string& name, std::uint64_t seed,
              int dy, int dx, const std::string& padding, int trials) {
  using namespace cpvt;
  ProbeReport rep;
  if (name == "conv_expansion") {
    // oracle sweep: random grids <= 8x8, k in {1,3,5}, 50 trials
    Rng rng = Rng(seed).stream("oracle");
    double worst = 0.0;
    for (int trial = 0; trial < 50; ++trial) {
      for (int k : {1, 3, 5}) {
        const int H = 2 + static_cast<int>(rng.below(7));
        const int W = 2 + static_cast<int>(rng.below(7));
        Tensor x = Tensor::zeros({H, W});
        for (std::int64_t i = 0; i < x.numel(); ++i) x[i] = rng.normal();
        PEGParams peg;
        peg.spec.kernel = k;
        DepthwiseConvParams dw;
        dw.kernel = Tensor::zeros({1, k, k});
        for (std::int64_t i = 0; i < dw.kernel.numel(); ++i) {
          dw.kernel[i] = rng.normal();
        }
        peg.dw.push_back(dw);
        Tensor kernel = Tensor::zeros({k, k});
        for (std::int64_t i = 0; i < kernel.numel(); ++i) {
          kernel[i] = dw.kernel[i];
        }
        NoGradGuard guard;
        TokenGrid g{reshape(x, {1, static_cast<std::int64_t>(H) * W, 1}), H, W,
                    false};
        Tensor got = peg_forward(g, peg).tokens;
        Tensor want = conv_expansion_oracle(x, kernel);
        for (std::int64_t i = 0; i < want.numel(); ++i) {
          worst = std::max(worst, std::fabs(got[i] - want[i]));
        }
      }
    }
    rep.name = "conv_expansion";
    rep.seed = seed;
    rep.tolerance = tol::kOracle64;
    rep.pass = worst <= rep.tolerance;
    rep.metrics = {{"max_abs_diff", worst}, {"trials", 50.0}};
  } else if (name == "translation") {
    PEGSpec spec;
    spec.padding = padding_mode_from_string(padding);
    Rng rng = Rng(seed).stream("probe_kernels");
    PEGParams layer = make_peg(8, spec, rng);
    rep = translation_probe(layer, dy, dx, seed);
  } else if (name == "permutation") {
    ModelConfig cfg;
    cfg.depth = 2;
    cfg.dim = 32;
    cfg.heads = 4;
    cfg.patch = 8;
    cfg.image_size = 32;
    cfg.in_channels = 1;
    cfg.num_classes = 4;
    cfg.head = HeadKind::gap;
    cfg.ffn_ratio = 2;
    const auto kv = args.resolve();
    if (auto it = kv.find("scheme"); it != kv.end()) {
      cfg.scheme.kind = scheme_kind_from_string(it->second);
    } else {
      cfg.scheme.kind = SchemeKind::peg;
    }
    if (cfg.scheme.kind == SchemeKind::peg) cfg.scheme.peg.positions = {-1};
    rep = permutation_probe(build_model(cfg, seed), trials, seed);
  } else if (name == "position_leakage") {
    rep = position_leakage_probe(LeakageOptions{}, seed);
  } else if (name == "fixed_peg") {
    SyntheticTask task;
    task.kind = TaskKind::locate;
    task.image_size = 32;
    task.template_size = 8;
    task.num_classes = 2;
    task.noise_std = 0.05;
    rep = fixed_peg_comparison(task, {seed, seed + 1, seed + 2});
  } else {
    throw ConfigError("unknown probe '" + name +
                      "' (conv_expansion, translation, permutation, "
                      "position_leakage, fixed_peg)");
  }
  std::printf("%s\n", rep.line().c_str());
  return rep.pass ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"conditional positional encoding vision transformer toolkit"};
  app.require_subcommand(1);

  KvArgs gen_args, train_args, eval_args, count_args, attn_args, probe_args;

  CLI::App* gen = app.add_subcommand("gen", "generate a synthetic dataset");
  gen_args.add_to(gen);

  CLI::App* tr = app.add_subcommand("train", "train a model on a task");
  train_args.add_to(tr);

  CLI::App* ev = app.add_subcommand("eval", "evaluate a checkpoint");
  eval_args.add_to(ev);
  std::string eval_ckpt, eval_split = "test";
  int eval_resolution = 0;
  bool eval_allow_resize = false;
  ev->add_option("--ckpt", eval_ckpt, "checkpoint path")->required();
  ev->add_option("--split", eval_split, "train or test")
      ->check(CLI::IsMember({"train", "test"}));
  ev->add_option("--resolution", eval_resolution,
                 "evaluate at this image size instead of the task's");
  ev->add_flag("--allow-resize", eval_allow_resize,
               "permit resizing a learnable positional table");

  CLI::App* ct = app.add_subcommand("count", "print parameter/flop counts");
  count_args.add_to(ct);

  CLI::App* at = app.add_subcommand("attn", "export attention maps");
  attn_args.add_to(at);
  std::string attn_ckpt, attn_format = "csv";
  int attn_layer = 0, attn_sample = 0;
  at->add_option("--ckpt", attn_ckpt, "checkpoint path")->required();
  at->add_option("--layer", attn_layer, "encoder block index");
  at->add_option("--format", attn_format, "csv or pgm")
      ->check(CLI::IsMember({"csv", "pgm"}));
  at->add_option("--sample", attn_sample, "generated test-sample index");

  CLI::App* pr = app.add_subcommand("probe", "run a verification probe");
  probe_args.add_to(pr);
  std::string probe_name, probe_padding = "zero";
  std::uint64_t probe_seed = 0;
  int probe_dy = 1, probe_dx = 0, probe_trials = 20;
  pr->add_option("--name", probe_name, "probe name")->required();
  pr->add_option("--probe-seed", probe_seed, "probe seed");
  pr->add_option("--dy", probe_dy, "translation shift rows");
  pr->add_option("--dx", probe_dx, "translation shift cols");
  pr->add_option("--padding", probe_padding, "zero or circular");
  pr->add_option("--trials", probe_trials, "permutation trials");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    if (gen->parsed()) return cmd_gen(gen_args);
    if (tr->parsed()) return cmd_train(train_args);
    if (ev->parsed()) {
      return cmd_eval(eval_args, eval_ckpt, eval_split, eval_resolution,
                      eval_allow_resize);
    }
    if (ct->parsed()) return cmd_count(count_args);
    if (at->parsed()) {
      return cmd_attn(attn_args, attn_ckpt, attn_layer, attn_format,
                      attn_sample);
    }
    if (pr->parsed()) {
      return cmd_probe(probe_args, probe_name, probe_seed, probe_dy, probe_dx,
                       probe_padding, probe_trials);
    }
  } catch (const ConfigError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 2;
}
