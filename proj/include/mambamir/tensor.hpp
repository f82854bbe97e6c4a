#pragma once

#include <cstddef>
#include <functional>
#include <initializer_list>
#include <memory>
#include <new>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace mambamir {

using Shape = std::vector<std::size_t>;

std::size_t numel(const Shape& shape);
std::string to_string(const Shape& shape);

// Error taxonomy shared by every module. The CLI maps these onto exit codes.
class DimensionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class ContractError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// 64-byte aligned storage. Eigen's vectorized reductions peel a prologue
/// that depends on the buffer address; fixed alignment keeps the summation
/// order, and so every result bit, independent of where the heap lands.
template <class T>
struct AlignedAllocator {
  using value_type = T;
  static constexpr std::align_val_t kAlign{64};
  AlignedAllocator() = default;
  template <class U>
  AlignedAllocator(const AlignedAllocator<U>&) {}
  T* allocate(std::size_t n) { return static_cast<T*>(::operator new(n * sizeof(T), kAlign)); }
  void deallocate(T* p, std::size_t) { ::operator delete(p, kAlign); }
  template <class U>
  bool operator==(const AlignedAllocator<U>&) const { return true; }
};

using Buffer = std::vector<double, AlignedAllocator<double>>;

struct TensorImpl {
  Shape shape;
  Buffer data;
  Buffer grad;  // empty until a backward pass touches it
  bool requires_grad = false;
};

/// Dense row-major real array. Copies share storage; ops never mutate their
/// inputs, so a Tensor behaves as an immutable value except for parameters
/// updated in place by an optimizer.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, double fill = 0.0);
  Tensor(Shape shape, Buffer data);
  Tensor(Shape shape, const std::vector<double>& data);
  Tensor(Shape shape, std::initializer_list<double> data);

  static Tensor zeros(Shape shape) { return Tensor(std::move(shape), 0.0); }
  static Tensor ones(Shape shape) { return Tensor(std::move(shape), 1.0); }
  static Tensor scalar(double v) { return Tensor(Shape{1}, {v}); }

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const { return impl_->shape; }
  std::size_t rank() const { return impl_->shape.size(); }
  std::size_t dim(std::size_t axis) const;
  std::size_t size() const { return impl_->data.size(); }

  std::span<const double> data() const { return impl_->data; }
  std::span<double> mutable_data() { return impl_->data; }
  double item() const;
  double at(std::initializer_list<std::size_t> index) const;

  bool requires_grad() const { return impl_->requires_grad; }
  Tensor& set_requires_grad(bool flag);
  bool has_grad() const { return !impl_->grad.empty(); }
  std::span<const double> grad() const { return impl_->grad; }
  std::span<double> mutable_grad();  // allocates zeros when absent
  void zero_grad();

  /// Fresh storage with the same values; never participates in a tape.
  Tensor detach() const;

  TensorImpl* impl() const { return impl_.get(); }
  const std::shared_ptr<TensorImpl>& handle() const { return impl_; }

 private:
  std::shared_ptr<TensorImpl> impl_;
};

/// Ordered record of differentiable operations executed while the tape is
/// active on the current thread.
class Tape {
 public:
  using BackwardFn = std::function<void()>;

  void record(std::string_view name, std::shared_ptr<TensorImpl> output,
              BackwardFn fn);
  std::size_t size() const { return records_.size(); }
  void clear() { records_.clear(); }

  /// Seeds d(loss)=1 and replays records in reverse. Returns the number of
  /// records visited. The tape is cleared afterwards.
  std::size_t backward(const Tensor& loss,
                       const std::function<void(std::string_view)>& on_visit = {});

 private:
  struct Record {
    std::string name;
    std::shared_ptr<TensorImpl> output;
    BackwardFn fn;
  };
  std::vector<Record> records_;
};

/// Makes a tape active for the lifetime of the scope on this thread.
class TapeScope {
 public:
  explicit TapeScope(Tape& tape);
  ~TapeScope();
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;

 private:
  Tape* previous_;
};

/// Temporarily disables recording (inference passes).
class NoGradScope {
 public:
  NoGradScope();
  ~NoGradScope();
  NoGradScope(const NoGradScope&) = delete;
  NoGradScope& operator=(const NoGradScope&) = delete;

 private:
  Tape* previous_;
};

Tape* active_tape();

/// Backward through the active tape. Throws ContractError on a non-scalar
/// loss or when no tape is active.
void backward(const Tensor& loss);

namespace detail {

/// True when a tape is active and any input requires a gradient.
bool should_record(std::initializer_list<const Tensor*> inputs);
bool should_record(std::span<const Tensor> inputs);

/// Builds an op result. `track` marks it as requiring grad.
Tensor make_result(Shape shape, Buffer data, bool track);

/// Gradient buffer of `t` if it participates in differentiation, else empty.
std::span<double> grad_of(const Tensor& t);

void record(std::string_view name, const Tensor& output, Tape::BackwardFn fn);

}  // namespace detail

}  // namespace mambamir
