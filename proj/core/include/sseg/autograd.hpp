#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <vector>

#include "sseg/tensor.hpp"

namespace sseg::ag {

struct Node;

/// Handle to a node in the computation tape. Copying is cheap.
class Var {
public:
    Var() = default;
    explicit Var(Tensor value, bool requires_grad = false);

    bool defined() const { return node_ != nullptr; }
    const Tensor& value() const;
    Tensor& value_mut();
    const Tensor& grad() const;
    bool requires_grad() const;
    void zero_grad();

    std::shared_ptr<Node>& node() { return node_; }
    const std::shared_ptr<Node>& node() const { return node_; }

private:
    std::shared_ptr<Node> node_;
};

struct Node {
    Tensor value;
    Tensor grad;  // allocated on demand during backward
    bool requires_grad = false;
    std::uint64_t seq = 0;
    std::vector<std::shared_ptr<Node>> parents;
    std::function<void(Node&)> backprop;  // reads this->grad, accumulates into parents

    Tensor& ensure_grad();
};

/// Gradient recording is on by default; disable for inference.
bool grad_enabled();
struct NoGradGuard {
    NoGradGuard();
    ~NoGradGuard();
    bool prev;
};

/// Runs reverse-mode accumulation from a scalar root (size-1 tensor).
void backward(const Var& root);

// ---- elementwise ----
Var add(const Var& a, const Var& b);       // same shape
Var sub(const Var& a, const Var& b);       // same shape
Var mul(const Var& a, const Var& b);       // same shape
Var scale(const Var& x, double c);
Var add_const(const Var& x, double c);
Var scale_by(const Var& x, const Var& s);  // s is a scalar Var, broadcast
Var relu(const Var& x);
Var gelu(const Var& x);
Var sigmoid(const Var& x);
Var exp_v(const Var& x);
Var log_v(const Var& x);
Var pow_const(const Var& x, double p);     // x must be >= 0 where p non-integer
Var max_const(const Var& x, double c);     // elementwise max(x, c)

// ---- linear algebra / shape ----
Var matmul(const Var& a, const Var& b);    // [M,K]x[K,N]
Var transpose(const Var& x);               // 2-D
Var reshape(const Var& x, std::vector<std::int64_t> shape);
Var slice_cols(const Var& x, std::int64_t c0, std::int64_t c1);  // [L,D] -> [L,c1-c0]
Var concat_cols(const std::vector<Var>& xs);                     // [L,d_i] -> [L,sum d_i]
Var concat_rows(const std::vector<Var>& xs);                     // [r_i,D] -> [sum r_i,D]
Var take_row(const Var& x, std::int64_t i);                      // [L,D] -> [1,D]
Var take_diag(const Var& x);                                     // [B,B] -> [B,1]

// ---- reductions ----
Var sum_all(const Var& x);    // -> [1]
Var mean_all(const Var& x);   // -> [1]
Var mean_rows(const Var& x);  // [N,D] -> [1,D]
Var sdiv(const Var& a, const Var& b);  // scalar/scalar -> [1]

// ---- normalizations / nn ----
/// Row-wise softmax of a 2-D input; `mask` (optional, same shape) is added
/// to the logits before normalization (use large negatives to block).
Var softmax_rows(const Var& x, const Tensor* mask = nullptr);
Var log_softmax_rows(const Var& x);
Var layer_norm(const Var& x, const Var& gain, const Var& bias, double eps = 1e-5);
/// Rows scaled to unit L2 norm; rows with norm below eps divide by eps.
Var l2_normalize_rows(const Var& x, double eps = 1e-8);
Var add_row_bias(const Var& x, const Var& b);  // [L,D] + [D]
Var embedding(const Var& table, const std::vector<std::int64_t>& ids);  // -> [L,D]

// ---- image ops (tensors are [C,H,W]) ----
Var conv2d(const Var& x, const Var& w, const Var& b, int stride, int pad);
Var upsample_nearest2x(const Var& x);
Var bilinear_resize(const Var& x, std::int64_t out_h, std::int64_t out_w);

}  // namespace sseg::ag
