#include "cpvt/train.hpp"

#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>

#include "cpvt/checkpoint.hpp"
#include "cpvt/errors.hpp"
#include "cpvt/nn.hpp"
#include "cpvt/rng.hpp"

namespace cpvt {

void TrainRun::validate() const {
  model.validate();
  task.validate();
  if (model.image_size != task.image_size) {
    throw ConfigError("model image_size " + std::to_string(model.image_size) +
                      " does not match task image_size " +
                      std::to_string(task.image_size));
  }
  if (model.in_channels != 1) {
    throw ConfigError("synthetic images have 1 channel; model in_channels is " +
                      std::to_string(model.in_channels));
  }
  if (model.num_classes != task.num_classes) {
    throw ConfigError("model num_classes " + std::to_string(model.num_classes) +
                      " does not match task num_classes " +
                      std::to_string(task.num_classes));
  }
  auto positive = [](const char* field, std::int64_t v) {
    if (v <= 0) {
      throw ConfigError(std::string(field) + " must be positive, got " +
                        std::to_string(v));
    }
  };
  positive("n_train", n_train);
  positive("n_test", n_test);
  positive("epochs", epochs);
  positive("batch_size", batch_size);
  if (lr < 0.0) {
    throw ConfigError("lr must be non-negative, got " + std::to_string(lr));
  }
  if (weight_decay < 0.0) {
    throw ConfigError("weight_decay must be non-negative, got " +
                      std::to_string(weight_decay));
  }
  if (warmup_steps < 0) {
    throw ConfigError("warmup_steps must be non-negative, got " +
                      std::to_string(warmup_steps));
  }
  if (label_smoothing < 0.0 || label_smoothing >= 1.0) {
    throw ConfigError("label_smoothing must lie in [0, 1), got " +
                      std::to_string(label_smoothing));
  }
}

namespace {

std::string format_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

int parse_int_value(const std::string& key, const std::string& value) {
  std::size_t used = 0;
  int v = 0;
  try {
    v = std::stoi(value, &used);
  } catch (const std::exception&) {
    used = std::string::npos;
  }
  if (used != value.size()) {
    throw ConfigError("config key '" + key + "' needs an integer, got '" +
                      value + "'");
  }
  return v;
}

double parse_double_value(const std::string& key, const std::string& value) {
  std::size_t used = 0;
  double v = 0;
  try {
    v = std::stod(value, &used);
  } catch (const std::exception&) {
    used = std::string::npos;
  }
  if (used != value.size()) {
    throw ConfigError("config key '" + key + "' needs a number, got '" +
                      value + "'");
  }
  return v;
}

std::uint64_t parse_u64_value(const std::string& key, const std::string& value) {
  std::size_t used = 0;
  std::uint64_t v = 0;
  try {
    v = std::stoull(value, &used);
  } catch (const std::exception&) {
    used = std::string::npos;
  }
  if (used != value.size()) {
    throw ConfigError("config key '" + key + "' needs an unsigned integer, got '" +
                      value + "'");
  }
  return v;
}

bool parse_bool_value(const std::string& key, const std::string& value) {
  if (value == "0" || value == "false") return false;
  if (value == "1" || value == "true") return true;
  throw ConfigError("config key '" + key + "' needs 0 or 1, got '" + value + "'");
}

bool set_train_field(TrainRun& run, const std::string& key,
                     const std::string& value) {
  if (key == "task") run.task.kind = task_kind_from_string(value);
  else if (key == "template_size")
    run.task.template_size = parse_int_value(key, value);
  else if (key == "train_placement")
    run.task.train_placement = placement_from_string(value);
  else if (key == "test_placement")
    run.task.test_placement = placement_from_string(value);
  else if (key == "noise_std") run.task.noise_std = parse_double_value(key, value);
  else if (key == "task_seed") run.task.seed = parse_u64_value(key, value);
  else if (key == "n_train") run.n_train = parse_int_value(key, value);
  else if (key == "n_test") run.n_test = parse_int_value(key, value);
  else if (key == "epochs") run.epochs = parse_int_value(key, value);
  else if (key == "batch_size") run.batch_size = parse_int_value(key, value);
  else if (key == "lr") run.lr = parse_double_value(key, value);
  else if (key == "weight_decay")
    run.weight_decay = parse_double_value(key, value);
  else if (key == "beta1") run.beta1 = parse_double_value(key, value);
  else if (key == "beta2") run.beta2 = parse_double_value(key, value);
  else if (key == "warmup_steps")
    run.warmup_steps = parse_int_value(key, value);
  else if (key == "label_smoothing")
    run.label_smoothing = parse_double_value(key, value);
  else if (key == "freeze_peg") run.freeze_peg = parse_bool_value(key, value);
  else if (key == "seed") run.seed = parse_u64_value(key, value);
  else if (key == "out_dir") run.out_dir = value;
  else return false;
  return true;
}

}  // namespace

std::map<std::string, std::string> train_run_to_kv(const TrainRun& run) {
  std::map<std::string, std::string> kv = model_config_to_kv(run.model);
  kv["task"] = to_string(run.task.kind);
  kv["template_size"] = std::to_string(run.task.template_size);
  kv["train_placement"] = to_string(run.task.train_placement);
  kv["test_placement"] = to_string(run.task.test_placement);
  kv["noise_std"] = format_double(run.task.noise_std);
  kv["task_seed"] = std::to_string(run.task.seed);
  kv["n_train"] = std::to_string(run.n_train);
  kv["n_test"] = std::to_string(run.n_test);
  kv["epochs"] = std::to_string(run.epochs);
  kv["batch_size"] = std::to_string(run.batch_size);
  kv["lr"] = format_double(run.lr);
  kv["weight_decay"] = format_double(run.weight_decay);
  kv["beta1"] = format_double(run.beta1);
  kv["beta2"] = format_double(run.beta2);
  kv["warmup_steps"] = std::to_string(run.warmup_steps);
  kv["label_smoothing"] = format_double(run.label_smoothing);
  kv["freeze_peg"] = run.freeze_peg ? "1" : "0";
  kv["seed"] = std::to_string(run.seed);
  if (!run.out_dir.empty()) kv["out_dir"] = run.out_dir;
  return kv;
}

TrainRun train_run_from_kv(const std::map<std::string, std::string>& kv) {
  TrainRun run;
  for (const auto& [key, value] : kv) {
    if (set_model_config_field(run.model, key, value)) continue;
    if (set_train_field(run, key, value)) continue;
    throw ConfigError("unknown config key '" + key + "'");
  }
  // the task mirrors the model's geometry; only its own knobs are separate
  run.task.image_size = run.model.image_size;
  run.task.num_classes = run.model.num_classes;
  return run;
}

double scheduled_lr(double base, int step, int total_steps, int warmup) {
  if (base <= 0.0) return 0.0;
  if (warmup > 0 && step < warmup) {
    return base * (double(step) + 1.0) / double(warmup);
  }
  if (total_steps <= warmup) return base;
  const double t = double(step - warmup) / double(total_steps - warmup);
  return base * 0.5 * (1.0 + std::cos(t * 3.14159265358979323846));
}

namespace {

Tensor gather_images(const Dataset& data, const std::vector<int>& order,
                     std::int64_t begin, std::int64_t count) {
  const std::int64_t pixels =
      data.images.numel() / data.images.dim(0);  // per-image payload
  Shape shape = data.images.shape();
  shape[0] = count;
  Tensor batch = Tensor::zeros(std::move(shape), data.images.precision());
  for (std::int64_t i = 0; i < count; ++i) {
    const std::int64_t src = order[static_cast<std::size_t>(begin + i)];
    std::memcpy(batch.data().data() + i * pixels,
                data.images.data().data() + src * pixels,
                static_cast<std::size_t>(pixels) * sizeof(double));
  }
  return batch;
}

std::vector<int> identity_order(std::int64_t n) {
  std::vector<int> order(static_cast<std::size_t>(n));
  for (std::int64_t i = 0; i < n; ++i) order[static_cast<std::size_t>(i)] = int(i);
  return order;
}

std::vector<std::vector<double>> snapshot_params(
    const std::vector<std::pair<std::string, Tensor>>& params) {
  std::vector<std::vector<double>> copy;
  copy.reserve(params.size());
  for (const auto& [name, t] : params) copy.push_back(t.data());
  return copy;
}

void restore_params(std::vector<std::pair<std::string, Tensor>>& params,
                    const std::vector<std::vector<double>>& snapshot) {
  for (std::size_t i = 0; i < params.size(); ++i) {
    params[i].second.data() = snapshot[i];
  }
}

}  // namespace

double evaluate(const Model& m, const Dataset& data, int batch_size,
                bool allow_pe_resize) {
  if (data.size() == 0) throw InputError("cannot evaluate an empty dataset");
  if (batch_size <= 0) {
    throw ConfigError("batch_size must be positive, got " +
                      std::to_string(batch_size));
  }
  NoGradGuard guard;
  ForwardOptions opt;
  opt.allow_pe_resize = allow_pe_resize;
  const std::vector<int> order = identity_order(data.size());
  std::int64_t correct = 0;
  for (std::int64_t begin = 0; begin < data.size(); begin += batch_size) {
    const std::int64_t count = std::min<std::int64_t>(batch_size,
                                                      data.size() - begin);
    Tensor images = gather_images(data, order, begin, count);
    Tensor logits = forward(m, images, opt);
    for (std::int64_t i = 0; i < count; ++i) {
      std::int64_t best = 0;
      const double* row = logits.data().data() + i * logits.dim(1);
      for (std::int64_t k = 1; k < logits.dim(1); ++k) {
        if (row[k] > row[best]) best = k;
      }
      if (best == data.labels[static_cast<std::size_t>(begin + i)]) ++correct;
    }
  }
  return double(correct) / double(data.size());
}

TrainResult train(const TrainRun& run) {
  run.validate();
  const auto [train_set, test_set] =
      generate_dataset(run.task, run.n_train, run.n_test);

  TrainResult result;
  result.model = build_model(run.model, run.seed);
  set_trainable(result.model, true);

  auto params = named_params(result.model);
  if (run.freeze_peg) {
    for (auto& [name, t] : params) {
      if (name.rfind("scheme.peg.", 0) == 0) t.set_requires_grad(false);
    }
  }
  std::vector<AdamState> states(params.size());

  const std::int64_t n = train_set.size();
  const int steps_per_epoch =
      static_cast<int>((n + run.batch_size - 1) / run.batch_size);
  const int total_steps = run.epochs * steps_per_epoch;

  std::ofstream metrics_file;
  if (!run.out_dir.empty()) {
    std::filesystem::create_directories(run.out_dir);
    const std::string cfg_path = run.out_dir + "/run.cfg";
    std::ofstream cfg(cfg_path);
    if (!cfg) throw IoError("cannot write '" + cfg_path + "'");
    for (const auto& [k, v] : train_run_to_kv(run)) cfg << k << '=' << v << '\n';
    result.metrics_path = run.out_dir + "/metrics.log";
    metrics_file.open(result.metrics_path);
    if (!metrics_file) throw IoError("cannot write '" + result.metrics_path + "'");
  }

  Rng shuffle_root = Rng(run.seed).stream("shuffle");
  auto last_good = snapshot_params(params);
  int step = 0;

  for (int epoch = 0; epoch < run.epochs && !result.diverged; ++epoch) {
    Rng epoch_rng = shuffle_root.stream(static_cast<std::uint64_t>(epoch));
    const std::vector<int> order = epoch_rng.permutation(static_cast<int>(n));
    double loss_sum = 0.0;

    for (std::int64_t begin = 0; begin < n; begin += run.batch_size) {
      const std::int64_t count =
          std::min<std::int64_t>(run.batch_size, n - begin);
      Tensor images = gather_images(train_set, order, begin, count);
      std::vector<int> labels(static_cast<std::size_t>(count));
      for (std::int64_t i = 0; i < count; ++i) {
        labels[static_cast<std::size_t>(i)] =
            train_set.labels[static_cast<std::size_t>(
                order[static_cast<std::size_t>(begin + i)])];
      }

      for (auto& [name, t] : params) t.zero_grad();
      double loss_value = 0.0;
      {
        Tape tape;
        Tensor logits = forward(result.model, images);
        Tensor loss = cross_entropy(logits, labels, run.label_smoothing);
        loss_value = loss[0];
        if (!std::isfinite(loss_value)) {
          result.diverged = true;
          break;
        }
        tape.backward(loss);
      }
      loss_sum += loss_value * double(count);

      const double lr_t = scheduled_lr(run.lr, step, total_steps,
                                       run.warmup_steps);
      ++step;
      if (lr_t > 0.0) {
        for (std::size_t i = 0; i < params.size(); ++i) {
          Tensor& t = params[i].second;
          if (!t.requires_grad() || !t.has_grad()) continue;
          adamw_step(t, t.grad_buffer(), states[i], lr_t, run.weight_decay,
                     run.beta1, run.beta2);
        }
      }
    }
    if (result.diverged) break;

    const double epoch_loss = loss_sum / double(n);
    const double test_acc = evaluate(result.model, test_set, run.batch_size);
    char line[128];
    std::snprintf(line, sizeof(line), "epoch=%d loss=%.6f test_acc=%.4f",
                  epoch, epoch_loss, test_acc);
    result.metrics.emplace_back(line);
    if (metrics_file) metrics_file << line << '\n' << std::flush;
    result.final_test_acc = test_acc;
    result.epochs_completed = epoch + 1;
    last_good = snapshot_params(params);
  }

  if (result.diverged) {
    restore_params(params, last_good);
    result.final_test_acc =
        result.epochs_completed > 0
            ? result.final_test_acc
            : evaluate(result.model, test_set, run.batch_size);
  }

  if (!run.out_dir.empty()) {
    result.checkpoint_path = run.out_dir + "/model.ckpt";
    save_checkpoint(result.model, result.checkpoint_path);
  }
  return result;
}

}  // namespace cpvt
