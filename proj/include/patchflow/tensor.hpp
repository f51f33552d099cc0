#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <string>
#include <vector>

namespace patchflow {

// Compute precision for the heavy kernels (convolutions, correlation).
// Storage is always double; f32 runs the inner loops in single precision.
// Gradient checks and determinism tests require f64.
enum class Precision { f64, f32 };

Precision compute_precision();
void set_compute_precision(Precision p);

struct TensorImpl {
  std::vector<int> shape;
  std::vector<double> values;
  std::vector<double> grad;  // sized like values once gradients are tracked
  bool requires_grad = false;
};

// Value-semantic handle onto a shared buffer. Copies alias the same storage.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(const std::vector<int>& shape, bool requires_grad = false);
  static Tensor full(const std::vector<int>& shape, double value, bool requires_grad = false);
  static Tensor from_values(const std::vector<int>& shape, std::vector<double> values,
                            bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);

  bool defined() const { return impl_ != nullptr; }
  const std::vector<int>& shape() const { return impl_->shape; }
  int ndim() const { return static_cast<int>(impl_->shape.size()); }
  int dim(int i) const { return impl_->shape[static_cast<std::size_t>(i)]; }
  std::size_t numel() const { return impl_->values.size(); }

  double* data() { return impl_->values.data(); }
  const double* data() const { return impl_->values.data(); }
  std::vector<double>& values() { return impl_->values; }
  const std::vector<double>& values() const { return impl_->values; }

  bool requires_grad() const { return impl_->requires_grad; }
  void set_requires_grad(bool b);

  bool has_grad() const { return !impl_->grad.empty(); }
  void ensure_grad();
  void zero_grad();
  double* grad_data() { return impl_->grad.data(); }
  const double* grad_data() const { return impl_->grad.data(); }
  std::vector<double>& grad() { return impl_->grad; }
  const std::vector<double>& grad() const { return impl_->grad; }

  // Deep copy of values (and requires_grad flag; gradient buffer not copied).
  Tensor clone() const;

  // 4-D convenience accessor (N,C,H,W).
  double& at4(int n, int c, int y, int x);
  double at4(int n, int c, int y, int x) const;

  std::shared_ptr<TensorImpl> impl() const { return impl_; }
  TensorImpl* raw() const { return impl_.get(); }

  bool same_storage(const Tensor& other) const { return impl_ == other.impl_; }

 private:
  explicit Tensor(std::shared_ptr<TensorImpl> impl) : impl_(std::move(impl)) {}
  std::shared_ptr<TensorImpl> impl_;
};

std::size_t shape_numel(const std::vector<int>& shape);

// Define-by-run tape. Ops append their backward rules in execution order,
// which is a topological order of the graph; backward() replays it in
// reverse. One tape per forward pass, confined to one worker.
class Tape {
 public:
  void record(std::function<void()> backward_fn) { nodes_.push_back(std::move(backward_fn)); }
  std::size_t size() const { return nodes_.size(); }

  // Seeds d(loss)/d(loss) = 1 and accumulates grads into every tracked
  // tensor reachable from the loss. Loss must be scalar.
  void backward(Tensor& loss);

  static Tape* active();

 private:
  std::vector<std::function<void()>> nodes_;
  friend class TapeScope;
};

// RAII activation of a tape on the current thread.
class TapeScope {
 public:
  explicit TapeScope(Tape& tape);
  ~TapeScope();
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;

 private:
  Tape* previous_;
};

}  // namespace patchflow
