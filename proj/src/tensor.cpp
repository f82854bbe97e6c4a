#include "mambamir/tensor.hpp"

#include <algorithm>
#include <sstream>

namespace mambamir {

std::size_t numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

std::string to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

Tensor::Tensor(Shape shape, double fill) : impl_(std::make_shared<TensorImpl>()) {
  impl_->data.assign(numel(shape), fill);
  impl_->shape = std::move(shape);
}

Tensor::Tensor(Shape shape, const std::vector<double>& data)
    : Tensor(std::move(shape), Buffer(data.begin(), data.end())) {}

Tensor::Tensor(Shape shape, std::initializer_list<double> data)
    : Tensor(std::move(shape), Buffer(data)) {}

Tensor::Tensor(Shape shape, Buffer data)
    : impl_(std::make_shared<TensorImpl>()) {
  if (numel(shape) != data.size()) {
    throw DimensionError("tensor data length " + std::to_string(data.size()) +
                         " does not match shape " + to_string(shape));
  }
  impl_->shape = std::move(shape);
  impl_->data = std::move(data);
}

std::size_t Tensor::dim(std::size_t axis) const {
  if (axis >= impl_->shape.size()) {
    throw DimensionError("axis " + std::to_string(axis) + " out of range for " +
                         to_string(impl_->shape));
  }
  return impl_->shape[axis];
}

double Tensor::item() const {
  if (impl_->data.size() != 1) {
    throw ContractError("item() on non-scalar tensor " + to_string(impl_->shape));
  }
  return impl_->data[0];
}

double Tensor::at(std::initializer_list<std::size_t> index) const {
  if (index.size() != impl_->shape.size()) {
    throw DimensionError("index rank mismatch for " + to_string(impl_->shape));
  }
  std::size_t flat = 0;
  std::size_t axis = 0;
  for (auto i : index) {
    if (i >= impl_->shape[axis]) throw DimensionError("index out of range");
    flat = flat * impl_->shape[axis] + i;
    ++axis;
  }
  return impl_->data[flat];
}

Tensor& Tensor::set_requires_grad(bool flag) {
  impl_->requires_grad = flag;
  return *this;
}

std::span<double> Tensor::mutable_grad() {
  if (impl_->grad.empty()) impl_->grad.assign(impl_->data.size(), 0.0);
  return impl_->grad;
}

void Tensor::zero_grad() {
  if (!impl_->grad.empty()) std::fill(impl_->grad.begin(), impl_->grad.end(), 0.0);
}

Tensor Tensor::detach() const { return Tensor(impl_->shape, impl_->data); }

// ---------------------------------------------------------------------------

namespace {
thread_local Tape* g_active_tape = nullptr;
}

Tape* active_tape() { return g_active_tape; }

TapeScope::TapeScope(Tape& tape) : previous_(g_active_tape) { g_active_tape = &tape; }
TapeScope::~TapeScope() { g_active_tape = previous_; }

NoGradScope::NoGradScope() : previous_(g_active_tape) { g_active_tape = nullptr; }
NoGradScope::~NoGradScope() { g_active_tape = previous_; }

void Tape::record(std::string_view name, std::shared_ptr<TensorImpl> output,
                  BackwardFn fn) {
  records_.push_back(Record{std::string(name), std::move(output), std::move(fn)});
}

std::size_t Tape::backward(const Tensor& loss,
                           const std::function<void(std::string_view)>& on_visit) {
  if (!loss.defined() || loss.size() != 1) {
    throw ContractError("backward requires a scalar loss, got " +
                        (loss.defined() ? to_string(loss.shape()) : std::string("undefined")));
  }
  if (!loss.requires_grad()) {
    throw ContractError("backward: loss is not on the active tape");
  }
  auto* out = loss.impl();
  out->grad.assign(1, 1.0);
  std::size_t visited = 0;
  for (auto it = records_.rbegin(); it != records_.rend(); ++it) {
    ++visited;
    if (on_visit) on_visit(it->name);
    if (it->output->grad.empty()) continue;  // no path to the loss
    it->fn();
  }
  records_.clear();
  return visited;
}

void backward(const Tensor& loss) {
  Tape* tape = active_tape();
  if (tape == nullptr) throw ContractError("backward called without an active tape");
  tape->backward(loss);
}

namespace detail {

bool should_record(std::initializer_list<const Tensor*> inputs) {
  if (g_active_tape == nullptr) return false;
  for (const Tensor* t : inputs) {
    if (t != nullptr && t->defined() && t->requires_grad()) return true;
  }
  return false;
}

bool should_record(std::span<const Tensor> inputs) {
  if (g_active_tape == nullptr) return false;
  return std::any_of(inputs.begin(), inputs.end(),
                     [](const Tensor& t) { return t.defined() && t.requires_grad(); });
}

Tensor make_result(Shape shape, Buffer data, bool track) {
  Tensor out(std::move(shape), std::move(data));
  out.set_requires_grad(track);
  return out;
}

std::span<double> grad_of(const Tensor& t) {
  if (!t.defined() || !t.requires_grad()) return {};
  auto* impl = t.impl();
  if (impl->grad.empty()) impl->grad.assign(impl->data.size(), 0.0);
  return impl->grad;
}

void record(std::string_view name, const Tensor& output, Tape::BackwardFn fn) {
  g_active_tape->record(name, output.handle(), std::move(fn));
}

}  // namespace detail

}  // namespace mambamir
