#pragma once

#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <string>
#include <vector>

#include "cpvt/errors.hpp"
#include "cpvt/rng.hpp"

namespace cpvt {

// Storage width of a tensor. Values of an f32 tensor are always exactly
// representable as IEEE binary32; arithmetic is carried out in double and
// results are rounded back on write, so f32 checkpoints round-trip bitwise.
enum class Precision : std::uint8_t { f32 = 0, f64 = 1 };

inline double quantize(double v, Precision p) {
  return p == Precision::f32 ? static_cast<double>(static_cast<float>(v)) : v;
}

inline Precision combine(Precision a, Precision b) {
  return (a == Precision::f64 || b == Precision::f64) ? Precision::f64
                                                      : Precision::f32;
}

using Shape = std::vector<std::int64_t>;

std::string shape_str(const Shape& s);
std::int64_t shape_numel(const Shape& s);

namespace detail {

struct TensorNode {
  Shape shape;
  std::vector<double> data;
  Precision prec = Precision::f64;
  bool requires_grad = false;
  std::shared_ptr<std::vector<double>> grad;  // lazily allocated, same numel
  std::int64_t id = 0;                        // creation order, strictly increasing
};

}  // namespace detail

// Dense n-dimensional array with optional gradient record. Copying a Tensor
// shares the underlying node; recorded ops always allocate fresh nodes, so
// values are immutable once produced by an op. Parameter data may be mutated
// in place between training steps (optimizer only).
class Tensor {
 public:
  Tensor() : node_(nullptr) {}

  static Tensor zeros(Shape shape, Precision p = Precision::f64);
  static Tensor full(Shape shape, double value, Precision p = Precision::f64);
  static Tensor from_data(Shape shape, std::vector<double> values,
                          Precision p = Precision::f64);
  static Tensor scalar(double value, Precision p = Precision::f64);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  int rank() const { return static_cast<int>(node_->shape.size()); }
  std::int64_t dim(int i) const { return node_->shape[static_cast<size_t>(i)]; }
  std::int64_t numel() const { return static_cast<std::int64_t>(node_->data.size()); }
  Precision precision() const { return node_->prec; }
  std::int64_t id() const { return node_->id; }

  std::vector<double>& data() { return node_->data; }
  const std::vector<double>& data() const { return node_->data; }
  double& operator[](std::int64_t i) { return node_->data[static_cast<size_t>(i)]; }
  double operator[](std::int64_t i) const { return node_->data[static_cast<size_t>(i)]; }
  double& at(std::initializer_list<std::int64_t> idx);
  double at(std::initializer_list<std::int64_t> idx) const;

  bool requires_grad() const { return node_->requires_grad; }
  Tensor& set_requires_grad(bool v) {
    node_->requires_grad = v;
    return *this;
  }

  bool has_grad() const { return node_->grad != nullptr; }
  const std::vector<double>& grad() const;
  std::vector<double>& grad_buffer();  // allocates zeros on first use
  void zero_grad();

  // Deep copy of the values; fresh node, no grad, no recording.
  Tensor clone() const;
  // Same values viewed as a leaf (no history); convenient for grad checks.
  Tensor detached_copy(bool requires_grad = false) const;

  // Rounds every element to this tensor's precision in place.
  void quantize_inplace();

  detail::TensorNode* node() const { return node_.get(); }
  const std::shared_ptr<detail::TensorNode>& node_ptr() const { return node_; }

 private:
  explicit Tensor(std::shared_ptr<detail::TensorNode> n) : node_(std::move(n)) {}
  static Tensor make(Shape shape, Precision p);

  std::shared_ptr<detail::TensorNode> node_;

  friend class Tape;
  friend void record_op(const std::vector<Tensor>& inputs, Tensor& out,
                        std::function<void()> backward);
};

// Wengert list for reverse-mode differentiation. Creating a Tape installs it
// as the active tape for the current thread (restored on destruction); ops
// executed while it is active append their backward rules in execution order,
// which is a topological order of the graph by construction.
class Tape {
 public:
  Tape();
  ~Tape();
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  static Tape* current();

  // Runs reverse accumulation from a scalar root. Each recorded entry is
  // replayed exactly once, in reverse order; grads accumulate on every
  // requires_grad node reachable from the root.
  void backward(const Tensor& root);

  std::size_t size() const { return entries_.size(); }

  struct Entry {
    std::int64_t out_id;
    std::vector<std::int64_t> in_ids;
    std::shared_ptr<detail::TensorNode> out;
    std::function<void()> fn;
  };

  void push(Entry e);

 private:
  std::vector<Entry> entries_;
  Tape* prev_ = nullptr;
};

// Suspends recording (used by finite-difference evaluation inside an
// active tape scope).
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;
};

// Registers a backward rule for `out` on the active tape. The output's
// requires_grad flag is set when any input requires grad. No-op when no tape
// is active or no input participates in differentiation.
void record_op(const std::vector<Tensor>& inputs, Tensor& out,
               std::function<void()> backward);

// ---- elementwise and shape ops (all recorded) ----

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double s);
// b's shape must be a suffix of a's shape; b broadcasts over the leading
// (batch) axes. Backward reduces over those axes.
Tensor add_bcast(const Tensor& a, const Tensor& b);

Tensor relu(const Tensor& x);
Tensor gelu(const Tensor& x);  // exact erf form

// Batched contraction over the last axis of a and the second-to-last of b.
// Batch extents must match elementwise, or either operand may be rank-2 and
// is then shared across the other's batch. Anything else is a ShapeError.
Tensor matmul(const Tensor& a, const Tensor& b);

Tensor softmax(const Tensor& x, int axis);

Tensor sum(const Tensor& x);  // scalar
Tensor reshape(const Tensor& x, Shape new_shape);
Tensor permute(const Tensor& x, const std::vector<int>& perm);
Tensor slice_axis(const Tensor& x, int axis, std::int64_t start, std::int64_t len);
Tensor concat_axis(const Tensor& a, const Tensor& b, int axis);

// ---- gradient checking ----

// Max over coordinates of |analytic - numeric| / max(1e-8, |analytic| +
// |numeric|), where numeric comes from central differences of a fixed random
// projection of f's output. f is evaluated twice up front; any bitwise
// disagreement raises DeterminismError.
double grad_check(const std::function<Tensor(const Tensor&)>& f,
                  const Tensor& x, double eps);

// ---- unrecorded helpers (test/probe utilities) ----

Tensor random_uniform(Shape shape, Rng& rng, double lo, double hi,
                      Precision p = Precision::f64);
Tensor random_normal(Shape shape, Rng& rng, double stddev,
                     Precision p = Precision::f64);

double max_abs_diff(const Tensor& a, const Tensor& b);
bool all_finite(const Tensor& a);
bool bitwise_equal(const Tensor& a, const Tensor& b);

}  // namespace cpvt
