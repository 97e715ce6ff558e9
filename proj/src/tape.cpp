#include "relpatch/tape.hpp"

#include <cmath>

namespace relpatch {

const char* op_name(OpKind op) {
  switch (op) {
    case OpKind::kConstant: return "constant";
    case OpKind::kMatMul: return "matmul";
    case OpKind::kAdd: return "add";
    case OpKind::kSub: return "sub";
    case OpKind::kMul: return "mul";
    case OpKind::kSMul: return "smul";
    case OpKind::kGelu: return "gelu";
    case OpKind::kSilu: return "silu";
    case OpKind::kRelu: return "relu";
    case OpKind::kSoftmax: return "softmax";
    case OpKind::kLayerNorm: return "layernorm";
    case OpKind::kRMSNorm: return "rmsnorm";
    case OpKind::kGather: return "gather";
    case OpKind::kSlice: return "slice";
    case OpKind::kConcat: return "concat";
    case OpKind::kTranspose: return "transpose";
    case OpKind::kReshape: return "reshape";
    case OpKind::kCenter: return "center";
    case OpKind::kEpsShift: return "eps_shift";
    case OpKind::kStopGrad: return "stop_grad";
    case OpKind::kReroute: return "reroute";
  }
  return "?";
}

const char* layer_kind_name(LayerKind k) {
  switch (k) {
    case LayerKind::kStructural: return "structural";
    case LayerKind::kNormalization: return "normalization";
    case LayerKind::kActivationFn: return "activation_fn";
    case LayerKind::kLinear: return "linear";
    case LayerKind::kAttentionMixing: return "attention_mixing";
    case LayerKind::kMultiplicativeGate: return "multiplicative_gate";
  }
  return "?";
}

namespace {

struct ExecResult {
  Tensor out, s0, s1;
};

template <class ValueFn>
ExecResult execute(const TapeNode& n, ValueFn val) {
  switch (n.op) {
    case OpKind::kConstant:
      return {n.constant, {}, {}};
    case OpKind::kMatMul:
      return {ops::matmul(val(n.inputs[0]), val(n.inputs[1])), {}, {}};
    case OpKind::kAdd:
      return {ops::add(val(n.inputs[0]), val(n.inputs[1])), {}, {}};
    case OpKind::kSub:
      return {ops::sub(val(n.inputs[0]), val(n.inputs[1])), {}, {}};
    case OpKind::kMul:
      return {ops::mul(val(n.inputs[0]), val(n.inputs[1])), {}, {}};
    case OpKind::kSMul:
      return {ops::smul(val(n.inputs[0]), n.scalar), {}, {}};
    case OpKind::kGelu: {
      const Tensor& x = val(n.inputs[0]);
      Tensor cdf = ops::gelu_cdf(x);
      return {ops::mul(x, cdf), cdf, {}};
    }
    case OpKind::kSilu: {
      const Tensor& x = val(n.inputs[0]);
      Tensor sg = ops::sigmoid(x);
      return {ops::mul(x, sg), sg, {}};
    }
    case OpKind::kRelu:
      return {ops::relu(val(n.inputs[0])), {}, {}};
    case OpKind::kSoftmax:
      return {ops::softmax_lastaxis(val(n.inputs[0])), {}, {}};
    case OpKind::kLayerNorm: {
      auto r = ops::layernorm_lastaxis(val(n.inputs[0]), n.scalar);
      return {r.y, r.mean, r.inv};
    }
    case OpKind::kRMSNorm: {
      auto r = ops::rmsnorm_lastaxis(val(n.inputs[0]), n.scalar);
      return {r.y, r.inv, {}};
    }
    case OpKind::kGather:
      return {ops::gather_rows(val(n.inputs[0]), n.ints), {}, {}};
    case OpKind::kSlice: {
      const size_t rank = n.ints.size() / 2;
      std::vector<int64_t> begin(n.ints.begin(), n.ints.begin() + static_cast<long>(rank));
      std::vector<int64_t> end(n.ints.begin() + static_cast<long>(rank), n.ints.end());
      return {ops::slice(val(n.inputs[0]), begin, end), {}, {}};
    }
    case OpKind::kConcat: {
      std::vector<Tensor> xs;
      xs.reserve(n.inputs.size());
      for (ValueId id : n.inputs) xs.push_back(val(id));
      return {ops::concat(xs, n.ints[0]), {}, {}};
    }
    case OpKind::kTranspose:
      return {ops::transpose(val(n.inputs[0]), n.ints), {}, {}};
    case OpKind::kReshape:
      return {ops::reshape(val(n.inputs[0]), Shape(n.ints.begin(), n.ints.end())), {}, {}};
    case OpKind::kCenter:
      return {ops::center_lastaxis(val(n.inputs[0])), {}, {}};
    case OpKind::kEpsShift:
      return {ops::eps_shift(val(n.inputs[0]), n.scalar), {}, {}};
    case OpKind::kStopGrad:
    case OpKind::kReroute:
      return {val(n.inputs.back()).clone(), {}, {}};
  }
  throw Error("unknown op");
}

Tensor gauss_pdf(const Tensor& x) {
  constexpr double kInvSqrt2Pi = 0.39894228040143267793994605993438;
  Tensor out = Tensor::zeros(x.shape(), x.dtype());
  for (int64_t i = 0; i < x.numel(); ++i) {
    const double v = x.at(i);
    out.set(i, kInvSqrt2Pi * std::exp(-0.5 * v * v));
  }
  return out;
}

Tensor relu_mask(const Tensor& x) {
  Tensor out = Tensor::zeros(x.shape(), x.dtype());
  for (int64_t i = 0; i < x.numel(); ++i) out.set(i, x.at(i) > 0.0 ? 1.0 : 0.0);
  return out;
}

void accum(Tensor& slot, const Tensor& delta) {
  if (!slot.defined())
    slot = delta;
  else
    slot = ops::add(slot, delta);
}

std::vector<int64_t> last_two_swapped(size_t rank) {
  std::vector<int64_t> perm(rank);
  for (size_t i = 0; i < rank; ++i) perm[i] = static_cast<int64_t>(i);
  std::swap(perm[rank - 1], perm[rank - 2]);
  return perm;
}

}  // namespace

ValueId Tape::mark_id(const std::string& name) const {
  for (const auto& [n, id] : marks)
    if (n == name) return id;
  throw Error(cat("no mark named '", name, "' on tape"));
}

bool Tape::has_mark(const std::string& name) const {
  for (const auto& [n, id] : marks)
    if (n == name) return true;
  return false;
}

std::vector<Tensor> Tape::replay(const std::vector<Tensor>& inputs) const {
  if (inputs.size() != input_ids.size())
    throw ShapeError(cat("replay: ", inputs.size(), " inputs, tape has ", input_ids.size()));
  std::vector<Tensor> vals(values.size());
  for (size_t i = 0; i < inputs.size(); ++i) {
    const ValueId id = input_ids[i];
    if (inputs[i].shape() != values[static_cast<size_t>(id)].shape() ||
        inputs[i].dtype() != values[static_cast<size_t>(id)].dtype())
      throw ShapeError(cat("replay: input ", i, " shape ", shape_str(inputs[i].shape()),
                           " does not match recorded ", shape_str(values[static_cast<size_t>(id)].shape())));
    vals[static_cast<size_t>(id)] = inputs[i];
  }
  auto val = [&](ValueId id) -> const Tensor& { return vals[static_cast<size_t>(id)]; };
  for (const TapeNode& n : nodes) vals[static_cast<size_t>(n.out)] = execute(n, val).out;
  std::vector<Tensor> outs;
  outs.reserve(outputs.size());
  for (ValueId id : outputs) outs.push_back(vals[static_cast<size_t>(id)]);
  return outs;
}

ValueId GraphBuilder::input(const Tensor& t) {
  if (!t.defined()) throw ShapeError("input(): undefined tensor");
  const ValueId id = static_cast<ValueId>(tape_.values.size());
  tape_.values.push_back(t);
  tape_.producer.push_back(-1);
  tape_.input_ids.push_back(id);
  return id;
}

ValueId GraphBuilder::constant(Tensor t, std::string label) {
  TapeNode n;
  n.op = OpKind::kConstant;
  n.constant = std::move(t);
  n.label = std::move(label);
  return emit(std::move(n));
}

ValueId GraphBuilder::emit(TapeNode node) {
  for (ValueId id : node.inputs)
    if (id < 0 || static_cast<size_t>(id) >= tape_.values.size())
      throw Error(cat(op_name(node.op), ": input id ", id, " not on tape"));
  ExecResult r;
  try {
    r = execute(node, [&](ValueId id) -> const Tensor& { return tape_.value(id); });
  } catch (const ShapeError& e) {
    throw ShapeError(cat(op_name(node.op), node.label.empty() ? "" : cat(" [", node.label, "]"),
                         ": ", e.what()));
  }
  if (debug_checks_enabled() && !r.out.all_finite())
    throw NumericError(cat(op_name(node.op), node.label.empty() ? "" : cat(" [", node.label, "]"),
                           ": non-finite output"));
  node.saved0 = std::move(r.s0);
  node.saved1 = std::move(r.s1);
  node.out = static_cast<ValueId>(tape_.values.size());
  tape_.values.push_back(std::move(r.out));
  tape_.producer.push_back(static_cast<int32_t>(tape_.nodes.size()));
  tape_.nodes.push_back(std::move(node));
  return tape_.nodes.back().out;
}

ValueId GraphBuilder::matmul(ValueId a, ValueId b, LayerKind kind, std::string label) {
  TapeNode n;
  n.op = OpKind::kMatMul;
  n.layer_kind = kind;
  n.inputs = {a, b};
  n.label = std::move(label);
  return emit(std::move(n));
}

ValueId GraphBuilder::add(ValueId a, ValueId b, LayerKind kind, std::string label) {
  TapeNode n;
  n.op = OpKind::kAdd;
  n.layer_kind = kind;
  n.inputs = {a, b};
  n.label = std::move(label);
  return emit(std::move(n));
}

ValueId GraphBuilder::sub(ValueId a, ValueId b, LayerKind kind, std::string label) {
  TapeNode n;
  n.op = OpKind::kSub;
  n.layer_kind = kind;
  n.inputs = {a, b};
  n.label = std::move(label);
  return emit(std::move(n));
}

ValueId GraphBuilder::mul(ValueId a, ValueId b, LayerKind kind, std::string label) {
  TapeNode n;
  n.op = OpKind::kMul;
  n.layer_kind = kind;
  n.inputs = {a, b};
  n.label = std::move(label);
  return emit(std::move(n));
}

ValueId GraphBuilder::smul(ValueId a, double s) {
  TapeNode n;
  n.op = OpKind::kSMul;
  n.inputs = {a};
  n.scalar = s;
  return emit(std::move(n));
}

ValueId GraphBuilder::gelu(ValueId x, LayerKind kind) {
  TapeNode n;
  n.op = OpKind::kGelu;
  n.layer_kind = kind;
  n.inputs = {x};
  return emit(std::move(n));
}

ValueId GraphBuilder::silu(ValueId x, LayerKind kind) {
  TapeNode n;
  n.op = OpKind::kSilu;
  n.layer_kind = kind;
  n.inputs = {x};
  return emit(std::move(n));
}

ValueId GraphBuilder::relu(ValueId x, LayerKind kind) {
  TapeNode n;
  n.op = OpKind::kRelu;
  n.layer_kind = kind;
  n.inputs = {x};
  return emit(std::move(n));
}

ValueId GraphBuilder::softmax(ValueId x) {
  TapeNode n;
  n.op = OpKind::kSoftmax;
  n.inputs = {x};
  return emit(std::move(n));
}

ValueId GraphBuilder::layernorm(ValueId x, double eps, std::string label) {
  TapeNode n;
  n.op = OpKind::kLayerNorm;
  n.layer_kind = LayerKind::kNormalization;
  n.inputs = {x};
  n.scalar = eps;
  n.label = std::move(label);
  return emit(std::move(n));
}

ValueId GraphBuilder::rmsnorm(ValueId x, double eps, std::string label) {
  TapeNode n;
  n.op = OpKind::kRMSNorm;
  n.layer_kind = LayerKind::kNormalization;
  n.inputs = {x};
  n.scalar = eps;
  n.label = std::move(label);
  return emit(std::move(n));
}

ValueId GraphBuilder::gather(ValueId table, std::vector<int64_t> indices) {
  TapeNode n;
  n.op = OpKind::kGather;
  n.inputs = {table};
  n.ints = std::move(indices);
  return emit(std::move(n));
}

ValueId GraphBuilder::slice(ValueId x, std::vector<int64_t> begin, std::vector<int64_t> end) {
  TapeNode n;
  n.op = OpKind::kSlice;
  n.inputs = {x};
  n.ints = std::move(begin);
  n.ints.insert(n.ints.end(), end.begin(), end.end());
  return emit(std::move(n));
}

ValueId GraphBuilder::concat(std::vector<ValueId> xs, int64_t axis) {
  TapeNode n;
  n.op = OpKind::kConcat;
  n.inputs = std::move(xs);
  n.ints = {axis};
  return emit(std::move(n));
}

ValueId GraphBuilder::transpose(ValueId x, std::vector<int64_t> perm) {
  TapeNode n;
  n.op = OpKind::kTranspose;
  n.inputs = {x};
  n.ints = std::move(perm);
  return emit(std::move(n));
}

ValueId GraphBuilder::reshape(ValueId x, Shape new_shape) {
  TapeNode n;
  n.op = OpKind::kReshape;
  n.inputs = {x};
  n.ints.assign(new_shape.begin(), new_shape.end());
  return emit(std::move(n));
}

ValueId GraphBuilder::center(ValueId x) {
  TapeNode n;
  n.op = OpKind::kCenter;
  n.inputs = {x};
  return emit(std::move(n));
}

ValueId GraphBuilder::eps_shift(ValueId x, double eps) {
  TapeNode n;
  n.op = OpKind::kEpsShift;
  n.inputs = {x};
  n.scalar = eps;
  return emit(std::move(n));
}

ValueId GraphBuilder::stop_grad(ValueId x) {
  TapeNode n;
  n.op = OpKind::kStopGrad;
  n.inputs = {x};
  return emit(std::move(n));
}

ValueId GraphBuilder::reroute(ValueId grad_target, ValueId forward_source) {
  TapeNode n;
  n.op = OpKind::kReroute;
  n.inputs = {grad_target, forward_source};
  return emit(std::move(n));
}

void GraphBuilder::mark(const std::string& name, ValueId v) { tape_.marks.emplace_back(name, v); }

void GraphBuilder::set_output(ValueId v) { tape_.outputs.push_back(v); }

RecordedForward record_forward(const Program& program, const std::vector<Tensor>& inputs) {
  GraphBuilder b;
  std::vector<ValueId> ids;
  ids.reserve(inputs.size());
  for (const Tensor& t : inputs) ids.push_back(b.input(t));
  std::vector<ValueId> outs = program(b, ids);
  for (ValueId id : outs) b.set_output(id);
  RecordedForward r;
  r.tape = b.finish();
  for (ValueId id : outs) r.outputs.push_back(r.tape.value(id));
  return r;
}

std::vector<Tensor> gradient_backward(const Tape& tape, const Tensor& seed, ValueId at) {
  if (at < 0) {
    if (tape.outputs.empty()) throw Error("backward: tape has no outputs");
    at = tape.outputs[0];
  }
  if (at < 0 || static_cast<size_t>(at) >= tape.num_values())
    throw Error(cat("backward: value id ", at, " not on tape"));
  const Tensor& out_val = tape.value(at);
  if (seed.shape() != out_val.shape() || seed.dtype() != out_val.dtype())
    throw ShapeError(cat("backward: seed shape ", shape_str(seed.shape()), "/", dtype_name(seed.dtype()),
                         " does not match output ", shape_str(out_val.shape()), "/",
                         dtype_name(out_val.dtype())));
  PassCounters::backwards.fetch_add(1, std::memory_order_relaxed);

  std::vector<Tensor> cot(tape.num_values());
  cot[static_cast<size_t>(at)] = seed;

  for (size_t ni = tape.nodes.size(); ni-- > 0;) {
    const TapeNode& n = tape.nodes[ni];
    const Tensor& rho = cot[static_cast<size_t>(n.out)];
    if (!rho.defined()) continue;
    auto in_val = [&](size_t i) -> const Tensor& { return tape.value(n.inputs[i]); };
    auto push = [&](size_t i, const Tensor& delta) {
      accum(cot[static_cast<size_t>(n.inputs[i])], delta);
    };
    switch (n.op) {
      case OpKind::kConstant:
      case OpKind::kStopGrad:
        break;  // readout sink
      case OpKind::kMatMul: {
        const Tensor& a = in_val(0);
        const Tensor& b = in_val(1);
        const bool shared_b = b.rank() == 2 && a.rank() > 2;
        push(0, ops::matmul(rho, ops::transpose(b, last_two_swapped(b.rank()))));
        if (shared_b) {
          const int64_t k = a.shape().back();
          const int64_t nn = b.shape().back();
          Tensor a2 = ops::reshape(a, {a.numel() / k, k});
          Tensor r2 = ops::reshape(rho, {rho.numel() / nn, nn});
          push(1, ops::matmul(ops::transpose(a2, {1, 0}), r2));
        } else {
          push(1, ops::matmul(ops::transpose(a, last_two_swapped(a.rank())), rho));
        }
        break;
      }
      case OpKind::kAdd:
        push(0, ops::reduce_to_shape(rho, in_val(0).shape()));
        push(1, ops::reduce_to_shape(rho, in_val(1).shape()));
        break;
      case OpKind::kSub:
        push(0, ops::reduce_to_shape(rho, in_val(0).shape()));
        push(1, ops::reduce_to_shape(ops::smul(rho, -1.0), in_val(1).shape()));
        break;
      case OpKind::kMul:
        push(0, ops::reduce_to_shape(ops::mul(rho, in_val(1)), in_val(0).shape()));
        push(1, ops::reduce_to_shape(ops::mul(rho, in_val(0)), in_val(1).shape()));
        break;
      case OpKind::kSMul:
        push(0, ops::smul(rho, n.scalar));
        break;
      case OpKind::kGelu: {
        const Tensor& x = in_val(0);
        Tensor deriv = ops::add(n.saved0, ops::mul(x, gauss_pdf(x)));
        push(0, ops::mul(rho, deriv));
        break;
      }
      case OpKind::kSilu: {
        const Tensor& x = in_val(0);
        const Tensor& sg = n.saved0;
        // d/dx x*sig(x) = sig + x*sig*(1-sig)
        Tensor one_minus = ops::smul(ops::sub(sg, Tensor::full(sg.shape(), 1.0, sg.dtype())), -1.0);
        Tensor deriv = ops::add(sg, ops::mul(x, ops::mul(sg, one_minus)));
        push(0, ops::mul(rho, deriv));
        break;
      }
      case OpKind::kRelu:
        push(0, ops::mul(rho, relu_mask(in_val(0))));
        break;
      case OpKind::kSoftmax: {
        const Tensor& y = tape.value(n.out);
        Tensor inner = ops::sum_lastaxis_keepdim(ops::mul(rho, y));
        push(0, ops::mul(y, ops::sub(rho, inner)));
        break;
      }
      case OpKind::kLayerNorm: {
        const Tensor& y = tape.value(n.out);
        const Tensor& inv = n.saved1;
        Tensor m1 = ops::mean_lastaxis_keepdim(rho);
        Tensor m2 = ops::mean_lastaxis_keepdim(ops::mul(rho, y));
        push(0, ops::mul(inv, ops::sub(ops::sub(rho, m1), ops::mul(y, m2))));
        break;
      }
      case OpKind::kRMSNorm: {
        const Tensor& x = in_val(0);
        const Tensor& inv = n.saved0;
        Tensor inv3 = ops::mul(inv, ops::mul(inv, inv));
        Tensor m = ops::mean_lastaxis_keepdim(ops::mul(rho, x));
        push(0, ops::sub(ops::mul(inv, rho), ops::mul(x, ops::mul(inv3, m))));
        break;
      }
      case OpKind::kGather: {
        const Tensor& table = in_val(0);
        Tensor grad = Tensor::zeros(table.shape(), table.dtype());
        const int64_t d = table.shape().back();
        for (size_t i = 0; i < n.ints.size(); ++i) {
          const int64_t row = n.ints[i];
          for (int64_t j = 0; j < d; ++j)
            grad.set(row * d + j, grad.at(row * d + j) + rho.at(static_cast<int64_t>(i) * d + j));
        }
        push(0, grad);
        break;
      }
      case OpKind::kSlice: {
        const Tensor& x = in_val(0);
        const size_t rank = n.ints.size() / 2;
        Tensor grad = Tensor::zeros(x.shape(), x.dtype());
        std::vector<int64_t> strides(rank, 1);
        for (int d = static_cast<int>(rank) - 2; d >= 0; --d)
          strides[static_cast<size_t>(d)] = strides[static_cast<size_t>(d) + 1] * x.dim(static_cast<size_t>(d) + 1);
        std::vector<int64_t> idx(rank, 0);
        for (int64_t o = 0; o < rho.numel(); ++o) {
          int64_t dst = 0;
          for (size_t d = 0; d < rank; ++d) dst += (n.ints[d] + idx[d]) * strides[d];
          grad.set(dst, rho.at(o));
          for (int d = static_cast<int>(rank) - 1; d >= 0; --d) {
            if (++idx[static_cast<size_t>(d)] < rho.shape()[static_cast<size_t>(d)]) break;
            idx[static_cast<size_t>(d)] = 0;
          }
        }
        push(0, grad);
        break;
      }
      case OpKind::kConcat: {
        const int64_t axis = n.ints[0];
        int64_t offset = 0;
        for (size_t i = 0; i < n.inputs.size(); ++i) {
          const Shape& ishape = in_val(i).shape();
          std::vector<int64_t> begin(rho.rank(), 0), end(rho.shape().begin(), rho.shape().end());
          begin[static_cast<size_t>(axis)] = offset;
          end[static_cast<size_t>(axis)] = offset + ishape[static_cast<size_t>(axis)];
          push(i, ops::slice(rho, begin, end));
          offset += ishape[static_cast<size_t>(axis)];
        }
        break;
      }
      case OpKind::kTranspose: {
        std::vector<int64_t> inv(n.ints.size());
        for (size_t d = 0; d < n.ints.size(); ++d) inv[static_cast<size_t>(n.ints[d])] = static_cast<int64_t>(d);
        push(0, ops::transpose(rho, inv));
        break;
      }
      case OpKind::kReshape:
        push(0, ops::reshape(rho, in_val(0).shape()));
        break;
      case OpKind::kCenter:
        push(0, ops::sub(rho, ops::mean_lastaxis_keepdim(rho)));
        break;
      case OpKind::kEpsShift:
        push(0, rho);
        break;
      case OpKind::kReroute:
        push(0, rho);
        push(1, rho);
        break;
    }
  }
  return cot;
}

std::atomic<int64_t> PassCounters::forwards{0};
std::atomic<int64_t> PassCounters::backwards{0};
void PassCounters::reset() {
  forwards.store(0);
  backwards.store(0);
}

}  // namespace relpatch
