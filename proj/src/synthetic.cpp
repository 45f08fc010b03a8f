#include "cpvt/synthetic.hpp"

#include <string>

#include "cpvt/errors.hpp"
#include "cpvt/rng.hpp"

namespace cpvt {

Placement placement_from_string(const std::string& s) {
  if (s == "uniform") return Placement::uniform;
  if (s == "center") return Placement::center;
  throw ConfigError("unknown placement '" + s + "'");
}

std::string to_string(Placement p) {
  return p == Placement::uniform ? "uniform" : "center";
}

TaskKind task_kind_from_string(const std::string& s) {
  if (s == "single") return TaskKind::single;
  if (s == "pair") return TaskKind::pair;
  if (s == "locate") return TaskKind::locate;
  throw ConfigError("unknown task kind '" + s + "'");
}

std::string to_string(TaskKind k) {
  switch (k) {
    case TaskKind::single: return "single";
    case TaskKind::pair: return "pair";
    case TaskKind::locate: return "locate";
  }
  throw ConfigError("unknown task kind");
}

void SyntheticTask::validate() const {
  if (template_size <= 0) {
    throw ConfigError("template_size must be positive, got " +
                      std::to_string(template_size));
  }
  if (num_classes < 2) {
    throw ConfigError("num_classes must be at least 2, got " +
                      std::to_string(num_classes));
  }
  if (kind == TaskKind::pair && num_classes % 2 != 0) {
    throw ConfigError("pair tasks need an even num_classes, got " +
                      std::to_string(num_classes));
  }
  if (kind == TaskKind::locate && num_classes != 2 && num_classes != 4) {
    throw ConfigError(
        "locate tasks label halves (2 classes) or quadrants (4), got " +
        std::to_string(num_classes));
  }
  if (image_size % template_size != 0) {
    throw ConfigError("image_size " + std::to_string(image_size) +
                      " is not a multiple of template_size " +
                      std::to_string(template_size));
  }
  // patterns must fit with slack so shifted copies stay clear of the border;
  // locate needs an even grid so halves hold the same number of cells
  const int needed = (kind == TaskKind::pair  ? 4
                      : kind == TaskKind::single ? 3
                                                 : 2) *
                     template_size;
  if (image_size < needed) {
    throw ConfigError("image_size " + std::to_string(image_size) +
                      " too small: a " + to_string(kind) +
                      " task with template_size " +
                      std::to_string(template_size) + " needs at least " +
                      std::to_string(needed));
  }
  if (kind == TaskKind::locate && grid() % 2 != 0) {
    throw ConfigError("locate tasks need an even grid, got " +
                      std::to_string(grid()) + "x" + std::to_string(grid()));
  }
  if (noise_std < 0.0) {
    throw ConfigError("noise_std must be non-negative, got " +
                      std::to_string(noise_std));
  }
}

Tensor pattern_bank(const SyntheticTask& task) {
  task.validate();
  const int S = task.template_size;
  const int rows = task.kind == TaskKind::locate ? 1 : task.num_classes;
  Rng rng = Rng(task.seed).stream("templates");
  Tensor bank = Tensor::zeros({rows, S, S});
  for (std::int64_t i = 0; i < bank.numel(); ++i) {
    bank[i] = rng.uniform(-1.0, 1.0);
  }
  return bank;
}

namespace {

struct Cell {
  int row = 0;
  int col = 0;
};

// Valid top-left cells: pair patterns occupy two vertically adjacent cells.
Cell draw_cell(const SyntheticTask& task, Placement placement, Rng& rng) {
  const int G = task.grid();
  const int rows = task.kind == TaskKind::pair ? G - 1 : G;
  if (placement == Placement::center) {
    return {(rows - 1) / 2, (G - 1) / 2};
  }
  Cell c;
  c.row = static_cast<int>(rng.below(static_cast<std::uint64_t>(rows)));
  c.col = static_cast<int>(rng.below(static_cast<std::uint64_t>(G)));
  return c;
}

void add_block(Tensor& images, std::int64_t n, const Tensor& bank, int id,
               int row0, int col0, int S) {
  for (int y = 0; y < S; ++y) {
    for (int x = 0; x < S; ++x) {
      images.at({n, 0, row0 + y, col0 + x}) += bank.at({id, y, x});
    }
  }
}

}  // namespace

Dataset generate_split(const SyntheticTask& task, int n, Placement placement,
                       const std::string& stream) {
  task.validate();
  if (n <= 0) {
    throw ConfigError("split size must be positive, got " + std::to_string(n));
  }
  const int S = task.template_size;
  const Tensor bank = pattern_bank(task);
  Rng split_rng = Rng(task.seed).stream(stream);

  Dataset out;
  out.images = Tensor::zeros({n, 1, task.image_size, task.image_size});
  out.labels.resize(static_cast<std::size_t>(n));
  for (std::int64_t i = 0; i < n; ++i) {
    Rng rng = split_rng.stream(static_cast<std::uint64_t>(i));
    int label = 0;
    Cell cell;
    if (task.kind == TaskKind::locate) {
      // the cell decides the label, so it is drawn first
      cell = draw_cell(task, placement, rng);
      const int half = task.grid() / 2;
      label = task.num_classes == 2
                  ? (cell.row >= half ? 1 : 0)
                  : 2 * (cell.row >= half ? 1 : 0) + (cell.col >= half ? 1 : 0);
    } else {
      label = static_cast<int>(
          rng.below(static_cast<std::uint64_t>(task.num_classes)));
      cell = draw_cell(task, placement, rng);
    }
    double* px = out.images.data().data() +
                 i * task.image_size * task.image_size;
    if (task.noise_std > 0.0) {
      for (std::int64_t p = 0;
           p < std::int64_t(task.image_size) * task.image_size; ++p) {
        px[p] = task.noise_std * rng.normal();
      }
    }
    if (task.kind == TaskKind::single) {
      add_block(out.images, i, bank, label, cell.row * S, cell.col * S, S);
    } else if (task.kind == TaskKind::locate) {
      add_block(out.images, i, bank, 0, cell.row * S, cell.col * S, S);
    } else {
      // class 2k places block 2k on top of block 2k+1; class 2k+1 swaps them
      const int top = (label % 2 == 0) ? label : label - 1;
      const int bottom = (label % 2 == 0) ? label + 1 : label;
      add_block(out.images, i, bank, top, cell.row * S, cell.col * S, S);
      add_block(out.images, i, bank, bottom, (cell.row + 1) * S, cell.col * S,
                S);
    }
    out.labels[static_cast<std::size_t>(i)] = label;
  }
  return out;
}

std::pair<Dataset, Dataset> generate_dataset(const SyntheticTask& task,
                                             int n_train, int n_test) {
  return {generate_split(task, n_train, task.train_placement, "train"),
          generate_split(task, n_test, task.test_placement, "test")};
}

}  // namespace cpvt
