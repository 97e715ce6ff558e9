#pragma once

#include <atomic>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "relpatch/ops.hpp"
#include "relpatch/tensor.hpp"

namespace relpatch {

using ValueId = int32_t;

enum class OpKind : uint8_t {
  kConstant,
  kMatMul,
  kAdd,
  kSub,
  kMul,
  kSMul,
  kGelu,
  kSilu,
  kRelu,
  kSoftmax,
  kLayerNorm,
  kRMSNorm,
  kGather,
  kSlice,
  kConcat,
  kTranspose,
  kReshape,
  kCenter,     // x - mean(x) over the last axis
  kEpsShift,   // x + eps * sign(x)
  kStopGrad,   // forward identity; cotangent is recorded here but not propagated
  kReroute,    // forward = second input's value; cotangent flows to both inputs
};

const char* op_name(OpKind op);

// Which architectural role a node plays. Propagation rules attach per kind.
enum class LayerKind : uint8_t {
  kStructural,
  kNormalization,
  kActivationFn,
  kLinear,
  kAttentionMixing,
  kMultiplicativeGate,
};

const char* layer_kind_name(LayerKind k);

struct TapeNode {
  OpKind op;
  LayerKind layer_kind = LayerKind::kStructural;
  std::vector<ValueId> inputs;
  ValueId out = -1;
  double scalar = 0.0;          // SMul factor; eps for norms and EpsShift
  std::vector<int64_t> ints;    // Gather indices; Slice begin,end; Transpose perm; Concat axis; Reshape dims
  Tensor constant;              // Constant payload
  Tensor saved0, saved1;        // saved-for-backward values (norm stats, activation factors)
  std::string label;
};

// Recorded forward graph. Value ids are assigned densely in emission order,
// inputs and node outputs interleaved; every node's inputs precede it.
class Tape {
public:
  std::vector<TapeNode> nodes;
  std::vector<ValueId> input_ids;
  std::vector<ValueId> outputs;
  std::vector<Tensor> values;                           // one per value id
  std::vector<int32_t> producer;                        // value id -> node index, -1 for inputs/none
  std::vector<std::pair<std::string, ValueId>> marks;   // named sites

  size_t num_values() const { return values.size(); }
  const Tensor& value(ValueId id) const { return values.at(static_cast<size_t>(id)); }
  ValueId mark_id(const std::string& name) const;
  bool has_mark(const std::string& name) const;

  // Re-executes the recorded nodes on fresh inputs. With the recorded inputs
  // this reproduces the recorded outputs bit-for-bit.
  std::vector<Tensor> replay(const std::vector<Tensor>& inputs) const;
};

// Records ops eagerly: each emit computes the value via the kernels and
// appends a node. Single-writer during recording.
class GraphBuilder {
public:
  GraphBuilder() = default;

  ValueId input(const Tensor& t);
  ValueId constant(Tensor t, std::string label = {});

  ValueId matmul(ValueId a, ValueId b, LayerKind kind = LayerKind::kStructural, std::string label = {});
  ValueId add(ValueId a, ValueId b, LayerKind kind = LayerKind::kStructural, std::string label = {});
  ValueId sub(ValueId a, ValueId b, LayerKind kind = LayerKind::kStructural, std::string label = {});
  ValueId mul(ValueId a, ValueId b, LayerKind kind = LayerKind::kStructural, std::string label = {});
  ValueId smul(ValueId a, double s);
  ValueId gelu(ValueId x, LayerKind kind = LayerKind::kActivationFn);
  ValueId silu(ValueId x, LayerKind kind = LayerKind::kActivationFn);
  ValueId relu(ValueId x, LayerKind kind = LayerKind::kActivationFn);
  ValueId softmax(ValueId x);
  ValueId layernorm(ValueId x, double eps, std::string label = {});
  ValueId rmsnorm(ValueId x, double eps, std::string label = {});
  ValueId gather(ValueId table, std::vector<int64_t> indices);
  ValueId slice(ValueId x, std::vector<int64_t> begin, std::vector<int64_t> end);
  ValueId concat(std::vector<ValueId> xs, int64_t axis);
  ValueId transpose(ValueId x, std::vector<int64_t> perm);
  ValueId reshape(ValueId x, Shape new_shape);
  ValueId center(ValueId x);
  ValueId eps_shift(ValueId x, double eps);
  ValueId stop_grad(ValueId x);
  ValueId reroute(ValueId grad_target, ValueId forward_source);

  void mark(const std::string& name, ValueId v);
  void set_output(ValueId v);

  const Tensor& value(ValueId id) const { return tape_.value(id); }
  Tape finish() { return std::move(tape_); }
  Tape& tape() { return tape_; }

private:
  ValueId emit(TapeNode node);
  Tape tape_;
};

struct RecordedForward {
  std::vector<Tensor> outputs;
  Tape tape;
};

// A program is any callable that emits primitive ops through a builder.
using Program =
    std::function<std::vector<ValueId>(GraphBuilder&, const std::vector<ValueId>&)>;

RecordedForward record_forward(const Program& program, const std::vector<Tensor>& inputs);

// Reverse-mode sweep seeded at `at` (defaults to the tape's first output).
// Returns one cotangent per value id; undefined tensors mean no gradient
// reached that value. Constant and StopGrad nodes accumulate cotangents for
// readout but do not propagate them.
std::vector<Tensor> gradient_backward(const Tape& tape, const Tensor& seed, ValueId at = -1);

// Forward/backward pass counters used by the cost-contract checks.
struct PassCounters {
  static std::atomic<int64_t> forwards;
  static std::atomic<int64_t> backwards;
  static void reset();
};

}  // namespace relpatch
