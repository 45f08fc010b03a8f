#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "cpvt/model.hpp"
#include "cpvt/synthetic.hpp"

namespace cpvt {

// Everything that determines a training run. Model and task geometry must
// agree (image size, class count, one input channel).
struct TrainRun {
  ModelConfig model;
  SyntheticTask task;
  int n_train = 2000;
  int n_test = 500;
  int epochs = 10;
  int batch_size = 32;
  double lr = 1e-3;
  double weight_decay = 0.05;
  double beta1 = 0.9;
  double beta2 = 0.999;
  int warmup_steps = 50;
  double label_smoothing = 0.0;
  bool freeze_peg = false;  // keep generator convs at their random init
  std::uint64_t seed = 0;
  std::string out_dir;  // empty: no files, results stay in memory

  // Throws ConfigError naming the offending field or mismatch.
  void validate() const;
};

// Flat key=value view over model, task, and optimizer settings combined.
std::map<std::string, std::string> train_run_to_kv(const TrainRun& run);
TrainRun train_run_from_kv(const std::map<std::string, std::string>& kv);

struct TrainResult {
  Model model;  // last finite parameter state
  std::vector<std::string> metrics;  // "epoch=<i> loss=<f> test_acc=<f>"
  double final_test_acc = 0.0;
  int epochs_completed = 0;
  bool diverged = false;  // a non-finite loss appeared; model rolled back
  std::string checkpoint_path;  // set when out_dir was given
  std::string metrics_path;
};

// Cosine-decayed learning rate with linear warmup over global step counts.
double scheduled_lr(double base, int step, int total_steps, int warmup);

// AdamW on cross-entropy over the generated task. Writes metrics.log,
// run.cfg, and model.ckpt under out_dir when set; a non-finite loss aborts
// the run and keeps the last end-of-epoch state.
TrainResult train(const TrainRun& run);

// Top-1 accuracy in deterministic batch order. Empty datasets are an
// InputError; `allow_pe_resize` permits resized positional tables when the
// image size differs from the model's build size.
double evaluate(const Model& m, const Dataset& data, int batch_size = 64,
                bool allow_pe_resize = false);

}  // namespace cpvt
