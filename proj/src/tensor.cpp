#include "longidiff/tensor.hpp"

#include <algorithm>
#include <sstream>
#include <stdexcept>
#include <unordered_set>

namespace longidiff {

namespace {
ScalarType g_default_scalar = ScalarType::F32;
thread_local bool g_grad_enabled = true;
}  // namespace

ScalarType default_scalar() { return g_default_scalar; }
void set_default_scalar(ScalarType st) { g_default_scalar = st; }

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : prev_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = prev_; }

int64_t shape_numel(const Shape& shape) {
  int64_t n = 1;
  for (int64_t d : shape) n *= d;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream s;
  s << "[";
  for (size_t i = 0; i < shape.size(); ++i) {
    if (i) s << ",";
    s << shape[i];
  }
  s << "]";
  return s.str();
}

int64_t TensorImpl::numel() const { return shape_numel(shape); }

template <>
float* TensorImpl::data<float>() {
  return f32.data();
}
template <>
double* TensorImpl::data<double>() {
  return f64.data();
}
template <>
const float* TensorImpl::data<float>() const {
  return f32.data();
}
template <>
const double* TensorImpl::data<double>() const {
  return f64.data();
}

namespace {

std::shared_ptr<TensorImpl> make_impl(Shape shape, bool requires_grad) {
  for (int64_t d : shape) {
    if (d <= 0) throw std::invalid_argument("tensor dims must be positive, got " + shape_str(shape));
  }
  auto impl = std::make_shared<TensorImpl>();
  impl->shape = std::move(shape);
  impl->stype = g_default_scalar;
  const auto n = static_cast<size_t>(impl->numel());
  if (impl->stype == ScalarType::F32)
    impl->f32.assign(n, 0.0f);
  else
    impl->f64.assign(n, 0.0);
  impl->requires_grad = requires_grad;
  return impl;
}

}  // namespace

Tensor Tensor::wrap(std::shared_ptr<TensorImpl> impl) {
  Tensor t;
  t.impl_ = std::move(impl);
  return t;
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  return wrap(make_impl(std::move(shape), requires_grad));
}

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
  Tensor t = zeros(std::move(shape), requires_grad);
  t.fill(value);
  return t;
}

Tensor Tensor::from_values(Shape shape, const std::vector<double>& values,
                           bool requires_grad) {
  if (shape_numel(shape) != static_cast<int64_t>(values.size()))
    throw std::invalid_argument("from_values: " + std::to_string(values.size()) +
                                " values for shape " + shape_str(shape));
  Tensor t = zeros(std::move(shape), requires_grad);
  for (size_t i = 0; i < values.size(); ++i) t.set(static_cast<int64_t>(i), values[i]);
  return t;
}

Tensor Tensor::randn(Shape shape, Rng& rng, double stddev, bool requires_grad) {
  Tensor t = zeros(std::move(shape), requires_grad);
  const int64_t n = t.numel();
  for (int64_t i = 0; i < n; ++i) t.set(i, rng.normal() * stddev);
  return t;
}

const Shape& Tensor::shape() const {
  if (!impl_) throw std::logic_error("shape() on undefined tensor");
  return impl_->shape;
}

int64_t Tensor::dim(int i) const { return shape().at(static_cast<size_t>(i)); }

int64_t Tensor::numel() const {
  if (!impl_) throw std::logic_error("numel() on undefined tensor");
  return impl_->numel();
}

ScalarType Tensor::stype() const {
  if (!impl_) throw std::logic_error("stype() on undefined tensor");
  return impl_->stype;
}

bool Tensor::requires_grad() const { return impl_ && impl_->requires_grad; }

bool Tensor::is_leaf() const { return impl_ && !impl_->grad_fn; }

double Tensor::at(int64_t i) const {
  if (!impl_) throw std::logic_error("at() on undefined tensor");
  if (i < 0 || i >= impl_->numel())
    throw std::out_of_range("tensor index " + std::to_string(i) + " out of range");
  return impl_->stype == ScalarType::F32 ? static_cast<double>(impl_->f32[static_cast<size_t>(i)])
                                         : impl_->f64[static_cast<size_t>(i)];
}

void Tensor::set(int64_t i, double value) {
  if (!impl_) throw std::logic_error("set() on undefined tensor");
  if (i < 0 || i >= impl_->numel())
    throw std::out_of_range("tensor index " + std::to_string(i) + " out of range");
  if (impl_->stype == ScalarType::F32)
    impl_->f32[static_cast<size_t>(i)] = static_cast<float>(value);
  else
    impl_->f64[static_cast<size_t>(i)] = value;
}

std::vector<double> Tensor::values() const {
  const int64_t n = numel();
  std::vector<double> out(static_cast<size_t>(n));
  for (int64_t i = 0; i < n; ++i) out[static_cast<size_t>(i)] = at(i);
  return out;
}

void Tensor::fill(double value) {
  if (!impl_) throw std::logic_error("fill() on undefined tensor");
  if (impl_->stype == ScalarType::F32)
    std::fill(impl_->f32.begin(), impl_->f32.end(), static_cast<float>(value));
  else
    std::fill(impl_->f64.begin(), impl_->f64.end(), value);
}

template <typename T>
std::span<const T> Tensor::data() const {
  if (!impl_) throw std::logic_error("data() on undefined tensor");
  constexpr ScalarType want = std::is_same_v<T, float> ? ScalarType::F32 : ScalarType::F64;
  if (impl_->stype != want) throw std::logic_error("data(): scalar type mismatch");
  return std::span<const T>(impl_->data<T>(), static_cast<size_t>(impl_->numel()));
}

template <typename T>
std::span<T> Tensor::data_mut() {
  if (!impl_) throw std::logic_error("data_mut() on undefined tensor");
  constexpr ScalarType want = std::is_same_v<T, float> ? ScalarType::F32 : ScalarType::F64;
  if (impl_->stype != want) throw std::logic_error("data_mut(): scalar type mismatch");
  return std::span<T>(impl_->data<T>(), static_cast<size_t>(impl_->numel()));
}

template std::span<const float> Tensor::data<float>() const;
template std::span<const double> Tensor::data<double>() const;
template std::span<float> Tensor::data_mut<float>();
template std::span<double> Tensor::data_mut<double>();

void Tensor::copy_from(const Tensor& src) {
  if (!impl_ || !src.impl_) throw std::logic_error("copy_from: undefined tensor");
  if (impl_->shape != src.impl_->shape)
    throw std::invalid_argument("copy_from: shape mismatch " + shape_str(impl_->shape) +
                                " vs " + shape_str(src.impl_->shape));
  if (impl_->stype != src.impl_->stype)
    throw std::logic_error("copy_from: scalar type mismatch");
  impl_->f32 = src.impl_->f32;
  impl_->f64 = src.impl_->f64;
}

Tensor Tensor::detached() const {
  if (!impl_) return Tensor();
  auto copy = std::make_shared<TensorImpl>();
  copy->shape = impl_->shape;
  copy->stype = impl_->stype;
  copy->f32 = impl_->f32;
  copy->f64 = impl_->f64;
  return wrap(std::move(copy));
}

Tensor Tensor::grad() const {
  if (!impl_ || !impl_->grad) return Tensor();
  return wrap(impl_->grad);
}

void Tensor::zero_grad() {
  if (impl_) impl_->grad.reset();
}

TensorImpl& ensure_grad_buffer(TensorImpl& t) {
  if (t.grad) return *t.grad;
  t.grad = std::make_shared<TensorImpl>();
  t.grad->shape = t.shape;
  t.grad->stype = t.stype;
  const auto n = static_cast<size_t>(t.numel());
  if (t.stype == ScalarType::F32)
    t.grad->f32.assign(n, 0.0f);
  else
    t.grad->f64.assign(n, 0.0);
  return *t.grad;
}

void backward(const Tensor& loss) {
  if (!loss.defined()) throw std::logic_error("backward: undefined tensor");
  if (loss.numel() != 1)
    throw std::invalid_argument("backward: expected scalar loss, got shape " +
                                shape_str(loss.shape()));
  auto root = loss.impl();
  if (!root->requires_grad)
    throw std::logic_error("backward: loss does not require grad");

  // Post-order DFS over the node DAG gives a topological order; the sweep
  // then runs it in reverse. Iterative to keep deep networks off the stack.
  std::vector<std::pair<std::shared_ptr<TensorImpl>, Node*>> order;
  std::unordered_set<Node*> visited;
  struct Frame {
    std::shared_ptr<TensorImpl> out;
    Node* node;
    size_t next_input = 0;
  };
  std::vector<Frame> stack;
  if (root->grad_fn) {
    if (visited.insert(root->grad_fn.get()).second)
      stack.push_back({root, root->grad_fn.get()});
  }
  while (!stack.empty()) {
    Frame& f = stack.back();
    if (f.next_input < f.node->inputs.size()) {
      auto& in = f.node->inputs[f.next_input++];
      if (in->grad_fn && visited.insert(in->grad_fn.get()).second)
        stack.push_back({in, in->grad_fn.get()});
    } else {
      order.emplace_back(f.out, f.node);
      stack.pop_back();
    }
  }

  for (auto& entry : order) {
    if (entry.second->consumed)
      throw std::logic_error("backward: graph already consumed (op '" +
                             std::string(entry.second->op) + "'); rebuild the forward pass");
  }

  ensure_grad_buffer(*root);
  if (root->stype == ScalarType::F32)
    root->grad->f32[0] = 1.0f;
  else
    root->grad->f64[0] = 1.0;

  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    auto& [out, node] = *it;
    ensure_grad_buffer(*out);
    node->backprop(*out);
    node->consumed = true;
  }
}

}  // namespace longidiff
