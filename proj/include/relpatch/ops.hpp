#pragma once

#include <vector>

#include "relpatch/tensor.hpp"

// Primitive tensor kernels. Forward math only; backward formulas live with
// the tape. Broadcasting (leading / size-1 axes) is supported by the binary
// elementwise ops and rejected everywhere else. All reductions run in a
// fixed sequential order so results are bit-reproducible.
namespace relpatch::ops {

Shape broadcast_shapes(const Shape& a, const Shape& b);

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor smul(const Tensor& a, double s);

// a: [..., m, k] x b: [..., k, n] with equal batch dims, or b: [k, n] shared
// across a's batch dims.
Tensor matmul(const Tensor& a, const Tensor& b);

Tensor gelu(const Tensor& x);   // exact: x * Phi(x)
Tensor silu(const Tensor& x);   // x * sigmoid(x)
Tensor relu(const Tensor& x);
Tensor gelu_cdf(const Tensor& x);   // Phi(x)
Tensor sigmoid(const Tensor& x);

Tensor softmax_lastaxis(const Tensor& x);  // max-subtracted

struct NormResult {
  Tensor y;
  Tensor mean;     // [..., 1]; undefined for rmsnorm
  Tensor inv;      // 1/sqrt(var + eps) or 1/sqrt(mean(x^2) + eps), [..., 1]
};
NormResult layernorm_lastaxis(const Tensor& x, double eps);
NormResult rmsnorm_lastaxis(const Tensor& x, double eps);

Tensor gather_rows(const Tensor& table, const std::vector<int64_t>& indices);
Tensor slice(const Tensor& x, const std::vector<int64_t>& begin, const std::vector<int64_t>& end);
Tensor concat(const std::vector<Tensor>& xs, int64_t axis);
Tensor transpose(const Tensor& x, const std::vector<int64_t>& perm);
Tensor reshape(const Tensor& x, const Shape& new_shape);

Tensor center_lastaxis(const Tensor& x);              // x - mean(x)
Tensor eps_shift(const Tensor& x, double eps);        // x + eps * sign(x), sign(0) := +1
Tensor ew_div(const Tensor& a, const Tensor& b);      // same-shape elementwise a / b

Tensor sum_lastaxis_keepdim(const Tensor& x);
Tensor mean_lastaxis_keepdim(const Tensor& x);
double sum_all(const Tensor& x);

// Sums cot over broadcast axes so the result has the given shape. Inverse of
// broadcasting in the backward pass.
Tensor reduce_to_shape(const Tensor& cot, const Shape& target);

// y[sel] := rows of src; y elsewhere := rows of base. Row granularity is the
// leading axis. Used for positional patching.
Tensor replace_rows(const Tensor& base, const Tensor& src, const std::vector<int64_t>& rows);

}  // namespace relpatch::ops
