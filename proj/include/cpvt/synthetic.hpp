#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "cpvt/tensor.hpp"

namespace cpvt {

enum class Placement { uniform, center };
enum class TaskKind { single, pair, locate };

Placement placement_from_string(const std::string& s);
std::string to_string(Placement p);
TaskKind task_kind_from_string(const std::string& s);
std::string to_string(TaskKind k);

// Images are Gaussian noise with one class-identified pattern added at a
// template-aligned grid cell. `single` places one S x S template per class.
// `pair` stacks two S x S blocks vertically and classes come in swapped
// pairs (class 2i: block A over block B; class 2i+1: B over A), so the
// label is decidable only from the spatial arrangement, never from the bag
// of patch contents. `locate` places one shared template and the label is
// its location (2 classes: top/bottom half; 4: quadrant), so the content
// carries no label information at all.
struct SyntheticTask {
  TaskKind kind = TaskKind::single;
  int image_size = 32;
  int template_size = 8;  // S; placements snap to the S-cell grid
  int num_classes = 4;
  Placement train_placement = Placement::uniform;
  Placement test_placement = Placement::uniform;
  double noise_std = 0.1;
  std::uint64_t seed = 0;

  int grid() const { return image_size / template_size; }
  // Throws ConfigError naming the offending field.
  void validate() const;
};

struct Dataset {
  Tensor images;            // [n, 1, H, W]
  std::vector<int> labels;  // one id per image
  std::int64_t size() const { return images.defined() ? images.dim(0) : 0; }
};

// [num_classes, S, S] block bank, a pure function of seed and geometry.
// `locate` tasks share one pattern across classes, so their bank is [1, S, S].
Tensor pattern_bank(const SyntheticTask& task);

// One split with an explicit placement policy; `stream` keeps splits
// disjoint ("train" and "test" never share randomness).
Dataset generate_split(const SyntheticTask& task, int n, Placement placement,
                       const std::string& stream);

std::pair<Dataset, Dataset> generate_dataset(const SyntheticTask& task,
                                             int n_train, int n_test);

}  // namespace cpvt
