#pragma once

#include <Eigen/Core>

#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <string>
#include <unordered_map>
#include <vector>

namespace etad {

using Scalar = double;
using ArrayX = Eigen::Array<Scalar, Eigen::Dynamic, 1>;
using MatrixR =
    Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<MatrixR>;
using ConstMatMap = Eigen::Map<const MatrixR>;

using Shape = std::vector<std::int64_t>;

std::int64_t numel(const Shape& shape);
std::string shape_str(const Shape& shape);

class Graph;

struct TensorData {
  std::int64_t id = -1;
  Shape shape;
  ArrayX values;
  ArrayX grad;  // size 0 until first accumulation
  bool requires_grad = false;
  bool is_parameter = false;
  // index of the tape node that produced this tensor, -1 for leaves and
  // eval-mode results
  std::int64_t node = -1;
  Graph* graph = nullptr;
};

// Shared handle to a dense row-major double tensor living on a Graph.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::shared_ptr<TensorData> d) : d_(std::move(d)) {}

  bool valid() const { return d_ != nullptr; }
  std::int64_t id() const { return d_->id; }
  const Shape& shape() const { return d_->shape; }
  std::int64_t dim(int i) const { return d_->shape.at(i); }
  int rank() const { return static_cast<int>(d_->shape.size()); }
  std::int64_t size() const { return d_->values.size(); }
  std::size_t bytes() const { return d_->values.size() * sizeof(Scalar); }

  // shared-handle semantics: accessors reach the shared payload, so they
  // stay usable through const handles
  ArrayX& values() const { return d_->values; }
  double value_at(std::int64_t i) const { return d_->values[i]; }

  bool requires_grad() const { return d_->requires_grad; }
  bool is_parameter() const { return d_->is_parameter; }
  bool is_leaf() const { return d_->node < 0; }
  std::int64_t node() const { return d_->node; }

  bool has_grad() const { return d_->grad.size() > 0; }
  const ArrayX& grad() const { return d_->grad; }
  ArrayX& grad_ref() const;  // allocates zeros on first use
  void zero_grad() const;

  Graph* graph() const { return d_->graph; }

  // 2-D row-major matrix views
  MatMap mat() const;
  // view of a 3-D tensor as (dim0*dim1) x dim2
  MatMap mat2() const;

  TensorData* data_ptr() const { return d_.get(); }

 private:
  std::shared_ptr<TensorData> d_;
};

struct MemoryReport {
  std::size_t current_live_bytes = 0;
  std::map<std::string, std::size_t> peak_live_bytes;  // per phase
  std::map<std::string, std::size_t> breakdown;        // per op kind
  std::size_t parameter_bytes = 0;                     // reported separately

  std::size_t peak(const std::string& phase) const {
    auto it = peak_live_bytes.find(phase);
    return it == peak_live_bytes.end() ? 0 : it->second;
  }
};

struct FlopLedger {
  std::map<std::string, std::uint64_t> forward;   // per phase
  std::map<std::string, std::uint64_t> backward;  // per phase

  std::uint64_t forward_in(const std::string& phase) const {
    auto it = forward.find(phase);
    return it == forward.end() ? 0 : it->second;
  }
  std::uint64_t backward_in(const std::string& phase) const {
    auto it = backward.find(phase);
    return it == backward.end() ? 0 : it->second;
  }
  std::uint64_t total_forward() const;
  std::uint64_t total_backward() const;
};

// Accounts bytes of activation buffers retained by the tape for backward.
// Parameters are excluded (tracked separately); buffers are deduplicated by
// tensor id so a value saved by two consumers is counted once.
class MemoryAccountant {
 public:
  void retain(std::int64_t tensor_id, std::size_t bytes, const char* op_name);
  void release_all();
  void begin_phase(const std::string& phase);
  const std::string& phase() const { return phase_; }

  std::size_t current() const { return current_; }
  MemoryReport report() const;

 private:
  std::unordered_map<std::int64_t, std::size_t> retained_;
  std::size_t current_ = 0;
  std::string phase_ = "default";
  std::map<std::string, std::size_t> peak_per_phase_{{"default", 0}};
  std::map<std::string, std::size_t> breakdown_;
};

// Sinks take gradients by value so producers can move large buffers.
using GradSink = std::function<void(const TensorData*, ArrayX)>;
// grad_out is mutable so a backward rule may move it into its final sink.
using BackwardFn = std::function<void(ArrayX& grad_out, const GradSink&)>;

struct TapeNode {
  const char* op_name;
  std::vector<Tensor> inputs;  // strong handles: the tape owns its operands
  Tensor output;
  std::string phase;
  std::uint64_t flops = 0;
  std::vector<Tensor> saved;  // buffers the backward rule reads (accounting)
  BackwardFn backward;
};

// Recorded computation over tensors: op tape, activation-memory accountant
// and FLOP ledger. Single-threaded; see header-level notes in ops.hpp for
// the op set.
class Graph {
 public:
  enum class Mode { kTrain, kEval };

  explicit Graph(Mode mode = Mode::kTrain) : mode_(mode) {}
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  Mode mode() const { return mode_; }
  void set_mode(Mode m) { mode_ = m; }
  bool training() const { return mode_ == Mode::kTrain; }

  Tensor leaf(Shape shape, ArrayX values, bool requires_grad = false);
  Tensor leaf(Shape shape, std::initializer_list<Scalar> values,
              bool requires_grad = false);
  Tensor zeros(Shape shape, bool requires_grad = false);
  Tensor parameter(Shape shape, ArrayX values);
  Tensor scalar(Scalar v);

  // Seeds grad_out at `root` and sweeps the tape in reverse creation order;
  // every reachable requires_grad leaf accumulates (+=) into its grad buffer.
  void backward(const Tensor& root, const Tensor& seed);
  void backward_scalar(const Tensor& root);  // seed = 1

  // Drops all tape nodes and releases the retained-activation accounting.
  void clear_tape();
  std::size_t tape_size() const { return nodes_.size(); }

  void begin_phase(const std::string& phase) { mem_.begin_phase(phase); }
  const std::string& phase() const { return mem_.phase(); }
  // Marks a phase boundary and returns the accountant state.
  MemoryReport snapshot_memory(const std::string& next_phase);
  MemoryReport memory_report() const;
  const FlopLedger& read_flops() const { return flops_; }
  void reset_flops() { flops_ = FlopLedger{}; }

  // --- used by op implementations ---
  Tensor make_result(Shape shape, ArrayX values);
  void record(const char* op_name, std::vector<Tensor> inputs,
              const Tensor& output, std::uint64_t flops,
              std::vector<Tensor> saved, BackwardFn backward);
  void count_forward_flops(std::uint64_t flops);

 private:
  Mode mode_;
  std::vector<TapeNode> nodes_;
  std::int64_t next_id_ = 0;
  MemoryAccountant mem_;
  FlopLedger flops_;
  std::size_t parameter_bytes_ = 0;

  Tensor make_tensor(Shape shape, ArrayX values, bool requires_grad,
                     bool is_parameter);
};

// RAII eval-mode scope
class EvalScope {
 public:
  explicit EvalScope(Graph& g) : g_(g), prev_(g.mode()) {
    g_.set_mode(Graph::Mode::kEval);
  }
  ~EvalScope() { g_.set_mode(prev_); }

 private:
  Graph& g_;
  Graph::Mode prev_;
};

}  // namespace etad
