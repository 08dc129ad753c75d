#include "etad/tensor.hpp"

#include <algorithm>
#include <sstream>
#include <stdexcept>

namespace etad {

std::int64_t numel(const Shape& shape) {
  std::int64_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << "(";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ",";
    os << shape[i];
  }
  os << ")";
  return os.str();
}

ArrayX& Tensor::grad_ref() const {
  if (d_->grad.size() == 0) d_->grad = ArrayX::Zero(d_->values.size());
  return d_->grad;
}

void Tensor::zero_grad() const {
  if (d_->grad.size() > 0) d_->grad.setZero();
}

MatMap Tensor::mat() const {
  if (rank() != 2)
    throw std::invalid_argument("mat(): tensor is not 2-D, shape " +
                                shape_str(shape()));
  return MatMap(d_->values.data(), d_->shape[0], d_->shape[1]);
}

MatMap Tensor::mat2() const {
  if (rank() != 3)
    throw std::invalid_argument("mat2(): tensor is not 3-D, shape " +
                                shape_str(shape()));
  return MatMap(d_->values.data(), d_->shape[0] * d_->shape[1], d_->shape[2]);
}

std::uint64_t FlopLedger::total_forward() const {
  std::uint64_t t = 0;
  for (const auto& [_, v] : forward) t += v;
  return t;
}

std::uint64_t FlopLedger::total_backward() const {
  std::uint64_t t = 0;
  for (const auto& [_, v] : backward) t += v;
  return t;
}

void MemoryAccountant::retain(std::int64_t tensor_id, std::size_t bytes,
                              const char* op_name) {
  if (!retained_.emplace(tensor_id, bytes).second) return;  // already live
  current_ += bytes;
  auto& peak = peak_per_phase_[phase_];
  peak = std::max(peak, current_);
  breakdown_[op_name] += bytes;
}

void MemoryAccountant::release_all() {
  retained_.clear();
  current_ = 0;
}

void MemoryAccountant::begin_phase(const std::string& phase) {
  phase_ = phase;
  auto& peak = peak_per_phase_[phase_];
  peak = std::max(peak, current_);
}

MemoryReport MemoryAccountant::report() const {
  MemoryReport r;
  r.current_live_bytes = current_;
  r.peak_live_bytes = peak_per_phase_;
  r.breakdown = breakdown_;
  return r;
}

Tensor Graph::make_tensor(Shape shape, ArrayX values, bool requires_grad,
                          bool is_parameter) {
  if (numel(shape) != values.size())
    throw std::invalid_argument("tensor data length " +
                                std::to_string(values.size()) +
                                " does not match shape " + shape_str(shape));
  auto d = std::make_shared<TensorData>();
  d->id = next_id_++;
  d->shape = std::move(shape);
  d->values = std::move(values);
  d->requires_grad = requires_grad;
  d->is_parameter = is_parameter;
  d->graph = this;
  return Tensor(std::move(d));
}

Tensor Graph::leaf(Shape shape, ArrayX values, bool requires_grad) {
  return make_tensor(std::move(shape), std::move(values), requires_grad,
                     false);
}

Tensor Graph::leaf(Shape shape, std::initializer_list<Scalar> values,
                   bool requires_grad) {
  ArrayX v(static_cast<std::int64_t>(values.size()));
  std::int64_t i = 0;
  for (Scalar x : values) v[i++] = x;
  return leaf(std::move(shape), std::move(v), requires_grad);
}

Tensor Graph::zeros(Shape shape, bool requires_grad) {
  ArrayX v = ArrayX::Zero(numel(shape));
  return leaf(std::move(shape), std::move(v), requires_grad);
}

Tensor Graph::parameter(Shape shape, ArrayX values) {
  Tensor t = make_tensor(std::move(shape), std::move(values), true, true);
  parameter_bytes_ += t.bytes();
  return t;
}

Tensor Graph::scalar(Scalar v) {
  ArrayX a(1);
  a[0] = v;
  return leaf({1}, std::move(a), false);
}

Tensor Graph::make_result(Shape shape, ArrayX values) {
  return make_tensor(std::move(shape), std::move(values), false, false);
}

void Graph::count_forward_flops(std::uint64_t flops) {
  flops_.forward[mem_.phase()] += flops;
}

void Graph::record(const char* op_name, std::vector<Tensor> inputs,
                   const Tensor& output, std::uint64_t flops,
                   std::vector<Tensor> saved, BackwardFn backward) {
  if (!training()) return;
  output.data_ptr()->node = static_cast<std::int64_t>(nodes_.size());
  for (const Tensor& s : saved) {
    if (s.is_parameter()) continue;  // parameters reported separately
    mem_.retain(s.id(), s.bytes(), op_name);
  }
  nodes_.push_back(TapeNode{op_name, std::move(inputs), output, mem_.phase(),
                            flops, std::move(saved), std::move(backward)});
}

void Graph::backward(const Tensor& root, const Tensor& seed) {
  if (root.node() < 0)
    throw std::invalid_argument(
        "backward: no tape recorded for root tensor (eval mode or leaf)");
  if (seed.shape() != root.shape())
    throw std::invalid_argument("backward: seed shape " +
                                shape_str(seed.shape()) +
                                " does not match root shape " +
                                shape_str(root.shape()));

  std::unordered_map<std::int64_t, ArrayX> grads;
  grads[root.id()] = seed.values();

  GradSink sink = [&grads](const TensorData* t, ArrayX g) {
    if (t->node < 0) {  // leaf
      if (!t->requires_grad) return;
      auto* td = const_cast<TensorData*>(t);
      if (td->grad.size() == 0)
        td->grad = std::move(g);
      else
        td->grad += g;
      return;
    }
    auto it = grads.find(t->id);
    if (it == grads.end())
      grads.emplace(t->id, std::move(g));
    else
      it->second += g;
  };

  for (std::int64_t i = root.node(); i >= 0; --i) {
    const TapeNode& n = nodes_[static_cast<std::size_t>(i)];
    auto it = grads.find(n.output.id());
    if (it == grads.end()) continue;
    // detach the gradient before running backward: sink insertions may
    // rehash the map and invalidate the iterator
    ArrayX grad_out = std::move(it->second);
    grads.erase(it);
    n.backward(grad_out, sink);
    flops_.backward[n.phase] += n.flops;
  }
}

void Graph::backward_scalar(const Tensor& root) {
  if (root.size() != 1)
    throw std::invalid_argument("backward_scalar: root is not scalar, shape " +
                                shape_str(root.shape()));
  ArrayX one(1);
  one[0] = 1.0;
  backward(root, leaf({1}, std::move(one)));
}

void Graph::clear_tape() {
  nodes_.clear();
  mem_.release_all();
}

MemoryReport Graph::snapshot_memory(const std::string& next_phase) {
  mem_.begin_phase(next_phase);
  return memory_report();
}

MemoryReport Graph::memory_report() const {
  MemoryReport r = mem_.report();
  r.parameter_bytes = parameter_bytes_;
  return r;
}

}  // namespace etad
