#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "longidiff/rng.hpp"

namespace longidiff {

/// Element type of tensor storage. The engine runs all tensors in one
/// global scalar type: f32 for training speed, f64 for gradient checking.
enum class ScalarType { F32, F64 };

ScalarType default_scalar();
void set_default_scalar(ScalarType st);

/// RAII switch of the engine-wide scalar type.
class ScopedScalar {
 public:
  explicit ScopedScalar(ScalarType st) : prev_(default_scalar()) {
    set_default_scalar(st);
  }
  ~ScopedScalar() { set_default_scalar(prev_); }
  ScopedScalar(const ScopedScalar&) = delete;
  ScopedScalar& operator=(const ScopedScalar&) = delete;

 private:
  ScalarType prev_;
};

/// Thread-local gradient mode. Ops record backward nodes only while enabled.
bool grad_enabled();

/// RAII guard disabling gradient recording (inference, metric evaluation).
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

using Shape = std::vector<int64_t>;

int64_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

struct TensorImpl;

/// One recorded operation in the backward graph. Nodes form an implicit DAG
/// reachable from the loss tensor; there is no global tape.
struct Node {
  const char* op = "";
  std::vector<std::shared_ptr<TensorImpl>> inputs;
  /// Receives the op's output impl (holding its grad buffer and, where the
  /// backward formula needs them, its forward values) and accumulates into
  /// the grads of `inputs`. Must not capture the output impl itself, or the
  /// impl -> node -> impl cycle would leak.
  std::function<void(TensorImpl&)> backprop;
  bool consumed = false;
};

struct TensorImpl {
  Shape shape;
  ScalarType stype = ScalarType::F32;
  std::vector<float> f32;
  std::vector<double> f64;
  bool requires_grad = false;
  std::shared_ptr<TensorImpl> grad;
  std::shared_ptr<Node> grad_fn;

  int64_t numel() const;

  template <typename T>
  T* data();
  template <typename T>
  const T* data() const;
};

/// Dense n-d array with reverse-mode autodiff. Value-semantic handle to
/// shared storage; copies alias. Network activations use the NCDHW layout
/// (W fastest), matching the x-fastest volume layout.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor from_values(Shape shape, const std::vector<double>& values,
                            bool requires_grad = false);
  /// Gaussian fill from the given generator, mean 0.
  static Tensor randn(Shape shape, Rng& rng, double stddev,
                      bool requires_grad = false);

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const;
  int64_t dim(int i) const;
  int64_t numel() const;
  ScalarType stype() const;
  bool requires_grad() const;
  bool is_leaf() const;

  /// Flat element access independent of scalar type. Convenience for tests
  /// and small fixtures, not for kernels.
  double at(int64_t i) const;
  void set(int64_t i, double value);
  std::vector<double> values() const;
  void fill(double value);

  /// Raw typed storage. T must match the tensor's scalar type.
  template <typename T>
  std::span<const T> data() const;
  template <typename T>
  std::span<T> data_mut();

  /// In-place raw copy from a same-shape, same-type tensor. Leaf use only
  /// (optimizer updates, checkpoint loading); never recorded on the graph.
  void copy_from(const Tensor& src);

  /// Deep copy detached from the graph.
  Tensor detached() const;

  Tensor grad() const;
  void zero_grad();

  std::shared_ptr<TensorImpl> impl() const { return impl_; }
  static Tensor wrap(std::shared_ptr<TensorImpl> impl);

 private:
  std::shared_ptr<TensorImpl> impl_;
};

/// Reverse-mode sweep from a scalar loss. Accumulates into .grad of every
/// reachable tensor with requires_grad. Each recorded node may be consumed
/// once; a second sweep through the same graph throws.
void backward(const Tensor& loss);

/// Allocate a zero-filled grad buffer on t if absent. Utility for op
/// backward implementations.
TensorImpl& ensure_grad_buffer(TensorImpl& t);

}  // namespace longidiff
