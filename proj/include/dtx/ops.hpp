#pragma once
// Differentiable tensor operations. All take tensors by value (handles) and
// return a new tensor; none mutate their inputs.

#include <cstdint>
#include <random>
#include <span>
#include <vector>

#include "dtx/tensor.hpp"

namespace dtx {

// Elementwise, identical shapes.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
// x[..., C] + bias[C], bias broadcast over all leading positions.
Tensor add_bias(const Tensor& x, const Tensor& bias);
Tensor scale(const Tensor& x, double c);
Tensor exp(const Tensor& x);
// Throws DomainError if any element is <= 0.
Tensor log(const Tensor& x);
Tensor relu(const Tensor& x);
// log(exp(a) + exp(b)); -inf operands are allowed and receive zero gradient.
Tensor logaddexp(const Tensor& a, const Tensor& b);

// 2-D products.
Tensor matmul(const Tensor& a, const Tensor& b);     // [m,k] x [k,n]
Tensor matmul_nt(const Tensor& a, const Tensor& b);  // [m,k] x [n,k]^T
Tensor transpose(const Tensor& x);

// Reductions and normalisers along the last axis.
Tensor softmax(const Tensor& x);
// Entries with allowed[i] == 0 are excluded and come out exactly 0.
// A row with no allowed entry is a ContractError.
Tensor masked_softmax(const Tensor& x, std::span<const std::uint8_t> allowed);
Tensor log_softmax(const Tensor& x);
Tensor log_sum_exp(const Tensor& x);  // shape drops the last axis ([n] -> [1])
Tensor sum_last(const Tensor& x);     // row sums, shape drops the last axis
Tensor sum(const Tensor& x);          // -> [1]
Tensor mean(const Tensor& x);         // -> [1]

// Layout.
Tensor reshape(const Tensor& x, Shape shape);
Tensor slice_rows(const Tensor& x, std::size_t begin, std::size_t end);
Tensor slice_cols(const Tensor& x, std::size_t begin, std::size_t end);
Tensor concat_rows(const std::vector<Tensor>& parts);
Tensor concat_cols(const std::vector<Tensor>& parts);
// out[i] = flat(x)[index[i]], or `fill` (no gradient) where index[i] < 0.
Tensor gather(const Tensor& x, std::span<const std::int64_t> index, double fill);
// Rows of table[V, d] selected by ids -> [ids.size(), d].
Tensor embedding(const Tensor& table, std::span<const int> ids);
// x[R, C] with row r scaled by w[r].
Tensor scale_rows(const Tensor& x, const Tensor& w);

// Layer normalisation over the last axis.
Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps = 1e-5);

// Inverted dropout. Identity when !train or rate == 0.
Tensor dropout(const Tensor& x, double rate, bool train, std::mt19937_64& rng);

}  // namespace dtx
