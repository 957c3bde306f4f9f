#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "niwf/errors.hpp"
#include "niwf/rng.hpp"

namespace niwf {

using Shape = std::vector<int64_t>;

int64_t shape_numel(const Shape& s);
std::string shape_str(const Shape& s);

// Plain integer array for token ids, targets, masks and gather indices.
// Never participates in differentiation.
struct IntArray {
    Shape shape;
    std::vector<int32_t> v;

    IntArray() = default;
    IntArray(Shape s, std::vector<int32_t> data) : shape(std::move(s)), v(std::move(data)) {}
    static IntArray zeros(Shape s);
    int64_t numel() const { return static_cast<int64_t>(v.size()); }
    int32_t operator[](int64_t i) const { return v[static_cast<size_t>(i)]; }
};

namespace detail {
struct TensorNode {
    Shape shape;
    std::vector<float> value;
    bool requires_grad = false;
    std::vector<float> grad;  // empty until a consumer accumulates into it
    double scalar_f64 = 0.0;  // double-accumulated value, set by scalar reductions
    bool has_f64 = false;
};
}  // namespace detail

// Dense row-major float32 tensor participating in a reverse-mode tape.
// Copies are shallow handles onto one shared node.
class Tensor {
public:
    Tensor() = default;

    static Tensor zeros(Shape s, bool requires_grad = false);
    static Tensor full(Shape s, float v, bool requires_grad = false);
    static Tensor from_data(Shape s, std::vector<float> data, bool requires_grad = false);
    static Tensor scalar(float v, bool requires_grad = false);
    static Tensor uniform(Shape s, float lo, float hi, Rng& rng, bool requires_grad = false);
    static Tensor normal(Shape s, float mean, float stddev, Rng& rng, bool requires_grad = false);
    // Kaiming-uniform with the given fan-in: bound sqrt(6 / fan_in).
    static Tensor kaiming_uniform(Shape s, int64_t fan_in, Rng& rng, bool requires_grad = false);

    bool defined() const { return node_ != nullptr; }
    const Shape& shape() const;
    int64_t ndim() const { return static_cast<int64_t>(shape().size()); }
    int64_t dim(int64_t i) const;
    int64_t numel() const;

    std::span<const float> data() const;
    std::span<float> mutable_data();  // direct writes; for optimizers and loaders only

    bool requires_grad() const;
    void set_requires_grad(bool rg);

    bool has_grad() const;
    std::span<const float> grad() const;  // empty span when absent
    std::span<float> grad_buffer();       // allocates zero-filled storage on demand
    void zero_grad();                     // clears accumulated gradient storage

    float item() const;
    // Scalar value at the precision the reduction accumulated it in.
    double item_f64() const;

    Tensor detach() const;  // deep value copy, no grad, no tape history
    Tensor clone() const;   // deep value copy keeping requires_grad (fresh leaf)

    bool same_node(const Tensor& other) const { return node_ == other.node_; }

private:
    std::shared_ptr<detail::TensorNode> node_;
    friend struct OpCtx;
};

// Recording context for reverse-mode differentiation. Construction pushes the
// tape as the active context for the current thread; destruction pops it.
// Backward visits entries in strict reverse recording order, and every node's
// gradient is summed across all of its consumers.
class Tape {
public:
    Tape();
    ~Tape();
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    void backward(const Tensor& loss);
    size_t size() const { return entries_.size(); }

    static bool recording();  // an active tape exists and grad mode is on

private:
    friend struct OpCtx;
    struct Entry {
        std::shared_ptr<detail::TensorNode> out;
        std::function<void()> fn;
    };
    std::vector<Entry> entries_;
    Tape* prev_ = nullptr;
};

// Suspends recording for its lifetime (evaluation passes, snapshots).
struct NoGrad {
    NoGrad();
    ~NoGrad();
    NoGrad(const NoGrad&) = delete;
};

// Extension point used by ops (here and in higher modules) that record fused
// forward/backward pairs onto the active tape.
struct OpCtx {
    static bool grad_enabled();
    static Tensor make(Shape s, bool requires_grad);
    static void set_f64(Tensor& t, double v);
    static void record(const Tensor& out, std::function<void()> fn);
    static std::span<const float> grad_of(const Tensor& t);  // empty if never accumulated
    static std::span<float> grad_acc(const Tensor& t);       // allocates zero-filled
};

enum class Act { Gelu, Silu, Tanh, Sigmoid, Relu };

struct TopKResult {
    Tensor values;     // [..., k] in descending value order
    IntArray indices;  // same shape; ties break toward the lower index
};

// --- elementwise ---------------------------------------------------------
// Binary ops accept equal shapes, or a rhs whose shape is a suffix of the
// lhs shape (broadcast over the leading axes).
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor add_scalar(const Tensor& a, float c);
Tensor mul_scalar(const Tensor& a, float c);
Tensor activation(const Tensor& x, Act kind);
Tensor sqrt_elem(const Tensor& x);  // d/dx at x == 0 defined as 0

// --- shape ---------------------------------------------------------------
Tensor reshape(const Tensor& x, Shape s);
Tensor transpose(const Tensor& x, int64_t a, int64_t b);
// x[B, L, N] -> x[:, index, :] as [B, N]
Tensor slice_axis1(const Tensor& x, int64_t index);
// first `count` entries of the last axis
Tensor slice_last(const Tensor& x, int64_t count);
// out[b] = flags[b] ? override[b] : x[b], over the leading axis; gradient only
// flows through rows that were not overridden.
Tensor override_rows(const Tensor& x, const std::vector<uint8_t>& flags, const Tensor& override_values);

// --- contraction ---------------------------------------------------------
// [..., m, p] x [..., p, n] -> [..., m, n]; batch extents broadcast by
// equality or 1. Gradients dA = dY.B^T and dB = A^T.dY.
Tensor matmul(const Tensor& a, const Tensor& b);
// x[..., d_in] . W[d_out, d_in]^T -> [..., d_out]
Tensor linear(const Tensor& x, const Tensor& w);
// table[V, D] gathered by ids -> shape(ids) + [D]; ids must lie in [0, V)
Tensor embedding(const Tensor& table, const IntArray& ids);

// --- neural --------------------------------------------------------------
Tensor softmax(const Tensor& x, int64_t axis);
Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, float eps);
Tensor rms_norm(const Tensor& x, const Tensor& gain, float eps);
// x[B, T, D] -> [B, D], arithmetic mean over axis 1
Tensor mean_pool(const Tensor& x, int64_t axis = 1);
TopKResult top_k(const Tensor& x, int64_t k);  // over the last axis
// mean NLL over positions where mask != 0; logits [B, T, V]
Tensor cross_entropy_nll(const Tensor& logits, const IntArray& targets, const IntArray& mask);
// scores[B, H, T, T] with additive -1e9 where key position j > i (causal) or
// valid[b, j] == 0; gradient passes through unchanged.
Tensor attention_mask_add(const Tensor& scores, const IntArray& valid);

// --- reductions ----------------------------------------------------------
Tensor sum_all(const Tensor& x);
Tensor mean_all(const Tensor& x);
Tensor sum_last(const Tensor& x);  // [..., D] -> [...]

}  // namespace niwf
