#include "patchflow/tensor.hpp"

#include <atomic>
#include <stdexcept>

#include "patchflow/util.hpp"

namespace patchflow {

namespace {
std::atomic<Precision> g_precision{Precision::f64};
thread_local Tape* t_active_tape = nullptr;
}  // namespace

Precision compute_precision() { return g_precision.load(std::memory_order_relaxed); }
void set_compute_precision(Precision p) { g_precision.store(p, std::memory_order_relaxed); }

std::size_t shape_numel(const std::vector<int>& shape) {
  std::size_t n = 1;
  for (int e : shape) {
    if (e <= 0) throw ShapeError("non-positive extent in shape " + shape_string(shape));
    n *= static_cast<std::size_t>(e);
  }
  return n;
}

Tensor Tensor::zeros(const std::vector<int>& shape, bool requires_grad) {
  auto impl = std::make_shared<TensorImpl>();
  impl->shape = shape;
  impl->values.assign(shape_numel(shape), 0.0);
  impl->requires_grad = requires_grad;
  return Tensor(std::move(impl));
}

Tensor Tensor::full(const std::vector<int>& shape, double value, bool requires_grad) {
  Tensor t = zeros(shape, requires_grad);
  for (double& v : t.values()) v = value;
  return t;
}

Tensor Tensor::from_values(const std::vector<int>& shape, std::vector<double> values,
                           bool requires_grad) {
  if (values.size() != shape_numel(shape))
    throw ShapeError("value buffer length " + std::to_string(values.size()) +
                     " does not match shape " + shape_string(shape));
  auto impl = std::make_shared<TensorImpl>();
  impl->shape = shape;
  impl->values = std::move(values);
  impl->requires_grad = requires_grad;
  return Tensor(std::move(impl));
}

Tensor Tensor::scalar(double value, bool requires_grad) {
  return from_values({1}, {value}, requires_grad);
}

void Tensor::set_requires_grad(bool b) { impl_->requires_grad = b; }

void Tensor::ensure_grad() {
  if (impl_->grad.size() != impl_->values.size()) impl_->grad.assign(impl_->values.size(), 0.0);
}

void Tensor::zero_grad() {
  if (!impl_->grad.empty()) impl_->grad.assign(impl_->values.size(), 0.0);
}

Tensor Tensor::clone() const {
  return Tensor::from_values(impl_->shape, impl_->values, impl_->requires_grad);
}

double& Tensor::at4(int n, int c, int y, int x) {
  const auto& s = impl_->shape;
  return impl_->values[((static_cast<std::size_t>(n) * s[1] + c) * s[2] + y) * s[3] + x];
}

double Tensor::at4(int n, int c, int y, int x) const {
  const auto& s = impl_->shape;
  return impl_->values[((static_cast<std::size_t>(n) * s[1] + c) * s[2] + y) * s[3] + x];
}

Tape* Tape::active() { return t_active_tape; }

void Tape::backward(Tensor& loss) {
  if (loss.numel() != 1)
    throw std::invalid_argument("backward: loss must be scalar, got shape " +
                                shape_string(loss.shape()));
  loss.ensure_grad();
  loss.grad()[0] += 1.0;
  for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) (*it)();
}

TapeScope::TapeScope(Tape& tape) : previous_(t_active_tape) { t_active_tape = &tape; }
TapeScope::~TapeScope() { t_active_tape = previous_; }

}  // namespace patchflow
