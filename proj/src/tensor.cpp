#include "niwf/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

namespace niwf {

namespace {

thread_local Tape* g_tape = nullptr;
thread_local int g_no_grad_depth = 0;

constexpr double kPi = 3.14159265358979323846;
constexpr double kInvSqrt2 = 0.70710678118654752440;
constexpr double kInvSqrt2Pi = 0.39894228040143267794;
constexpr float kMaskValue = -1e9f;

size_t checked_size(const Shape& s) {
    int64_t n = 1;
    for (int64_t d : s) {
        if (d <= 0) throw ShapeError("non-positive extent in shape " + shape_str(s));
        n *= d;
    }
    return static_cast<size_t>(n);
}

// True when b's shape equals a suffix of a's shape.
bool is_suffix(const Shape& a, const Shape& b) {
    if (b.size() > a.size()) return false;
    return std::equal(b.rbegin(), b.rend(), a.rbegin());
}

void check_binary_shapes(const char* op, const Shape& a, const Shape& b) {
    if (!is_suffix(a, b)) {
        throw ShapeError(std::string(op) + ": shapes " + shape_str(a) + " and " + shape_str(b) +
                         " are not equal and rhs is not a suffix");
    }
}

}  // namespace

int64_t shape_numel(const Shape& s) {
    int64_t n = 1;
    for (int64_t d : s) n *= d;
    return n;
}

std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << '[';
    for (size_t i = 0; i < s.size(); ++i) {
        if (i) os << ',';
        os << s[i];
    }
    os << ']';
    return os.str();
}

IntArray IntArray::zeros(Shape s) {
    size_t n = checked_size(s);
    return IntArray(std::move(s), std::vector<int32_t>(n, 0));
}

// --- Tensor basics ---------------------------------------------------------

Tensor Tensor::zeros(Shape s, bool requires_grad) {
    size_t n = checked_size(s);
    Tensor t;
    t.node_ = std::make_shared<detail::TensorNode>();
    t.node_->shape = std::move(s);
    t.node_->value.assign(n, 0.0f);
    t.node_->requires_grad = requires_grad;
    return t;
}

Tensor Tensor::full(Shape s, float v, bool requires_grad) {
    Tensor t = zeros(std::move(s), requires_grad);
    std::fill(t.node_->value.begin(), t.node_->value.end(), v);
    return t;
}

Tensor Tensor::from_data(Shape s, std::vector<float> data, bool requires_grad) {
    if (checked_size(s) != data.size()) {
        throw ShapeError("from_data: shape " + shape_str(s) + " does not match data length " +
                         std::to_string(data.size()));
    }
    Tensor t;
    t.node_ = std::make_shared<detail::TensorNode>();
    t.node_->shape = std::move(s);
    t.node_->value = std::move(data);
    t.node_->requires_grad = requires_grad;
    return t;
}

Tensor Tensor::scalar(float v, bool requires_grad) { return from_data({1}, {v}, requires_grad); }

Tensor Tensor::uniform(Shape s, float lo, float hi, Rng& rng, bool requires_grad) {
    Tensor t = zeros(std::move(s), requires_grad);
    for (float& x : t.node_->value) x = rng.uniform_float(lo, hi);
    return t;
}

Tensor Tensor::normal(Shape s, float mean, float stddev, Rng& rng, bool requires_grad) {
    Tensor t = zeros(std::move(s), requires_grad);
    for (float& x : t.node_->value) x = mean + stddev * rng.normal_float();
    return t;
}

Tensor Tensor::kaiming_uniform(Shape s, int64_t fan_in, Rng& rng, bool requires_grad) {
    if (fan_in <= 0) throw ContractError("kaiming_uniform: fan_in must be positive");
    float bound = static_cast<float>(std::sqrt(6.0 / static_cast<double>(fan_in)));
    return uniform(std::move(s), -bound, bound, rng, requires_grad);
}

const Shape& Tensor::shape() const {
    if (!node_) throw ContractError("shape() on undefined tensor");
    return node_->shape;
}

int64_t Tensor::dim(int64_t i) const { return shape().at(static_cast<size_t>(i)); }

int64_t Tensor::numel() const { return static_cast<int64_t>(node_->value.size()); }

std::span<const float> Tensor::data() const { return {node_->value.data(), node_->value.size()}; }

std::span<float> Tensor::mutable_data() { return {node_->value.data(), node_->value.size()}; }

bool Tensor::requires_grad() const { return node_ && node_->requires_grad; }

void Tensor::set_requires_grad(bool rg) {
    node_->requires_grad = rg;
    if (!rg) node_->grad.clear();
}

bool Tensor::has_grad() const { return node_ && !node_->grad.empty(); }

std::span<const float> Tensor::grad() const {
    if (!has_grad()) return {};
    return {node_->grad.data(), node_->grad.size()};
}

std::span<float> Tensor::grad_buffer() {
    if (!node_->requires_grad) throw ContractError("grad_buffer on tensor with requires_grad=false");
    if (node_->grad.empty()) node_->grad.assign(node_->value.size(), 0.0f);
    return {node_->grad.data(), node_->grad.size()};
}

void Tensor::zero_grad() {
    if (node_) node_->grad.clear();
}

float Tensor::item() const {
    if (numel() != 1) throw ContractError("item() on non-scalar tensor " + shape_str(shape()));
    return node_->value[0];
}

double Tensor::item_f64() const {
    if (numel() != 1) throw ContractError("item_f64() on non-scalar tensor " + shape_str(shape()));
    return node_->has_f64 ? node_->scalar_f64 : static_cast<double>(node_->value[0]);
}

Tensor Tensor::detach() const {
    Tensor t;
    t.node_ = std::make_shared<detail::TensorNode>();
    t.node_->shape = node_->shape;
    t.node_->value = node_->value;
    t.node_->requires_grad = false;
    return t;
}

Tensor Tensor::clone() const {
    Tensor t = detach();
    t.node_->requires_grad = node_->requires_grad;
    return t;
}

// --- Tape -------------------------------------------------------------------

Tape::Tape() {
    prev_ = g_tape;
    g_tape = this;
}

Tape::~Tape() { g_tape = prev_; }

bool Tape::recording() { return g_tape != nullptr && g_no_grad_depth == 0; }

void Tape::backward(const Tensor& loss) {
    if (loss.numel() != 1) {
        throw ContractError("backward: loss must be scalar, got " + shape_str(loss.shape()));
    }
    if (!loss.requires_grad()) {
        throw ContractError("backward: loss is not on the tape (requires_grad=false)");
    }
    Tensor seed = loss;  // non-const handle onto the same node
    auto g = seed.grad_buffer();
    g[0] += 1.0f;
    for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) {
        if (it->out->grad.empty()) continue;  // no consumer contributed; nothing to propagate
        it->fn();
    }
}

NoGrad::NoGrad() { ++g_no_grad_depth; }
NoGrad::~NoGrad() { --g_no_grad_depth; }

bool OpCtx::grad_enabled() { return Tape::recording(); }

Tensor OpCtx::make(Shape s, bool requires_grad) { return Tensor::zeros(std::move(s), requires_grad); }

void OpCtx::set_f64(Tensor& t, double v) {
    t.node_->scalar_f64 = v;
    t.node_->has_f64 = true;
}

void OpCtx::record(const Tensor& out, std::function<void()> fn) {
    if (!Tape::recording()) return;
    g_tape->entries_.push_back({out.node_, std::move(fn)});
}

std::span<const float> OpCtx::grad_of(const Tensor& t) {
    if (!t.has_grad()) return {};
    return t.grad();
}

std::span<float> OpCtx::grad_acc(const Tensor& t) { return const_cast<Tensor&>(t).grad_buffer(); }

namespace {

bool want_grad(std::initializer_list<const Tensor*> ins) {
    if (!OpCtx::grad_enabled()) return false;
    for (const Tensor* t : ins)
        if (t->requires_grad()) return true;
    return false;
}

// Accumulate g (shape of a) into b's gradient, reducing over leading axes
// when b's shape is a proper suffix of a's.
void accumulate_suffix(const Tensor& b, std::span<const float> g, int64_t a_numel) {
    auto gb = OpCtx::grad_acc(b);
    int64_t bn = static_cast<int64_t>(gb.size());
    int64_t repeat = a_numel / bn;
    for (int64_t r = 0; r < repeat; ++r) {
        const float* src = g.data() + r * bn;
        for (int64_t i = 0; i < bn; ++i) gb[i] += src[i];
    }
}

}  // namespace

// --- elementwise -------------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b) {
    check_binary_shapes("add", a.shape(), b.shape());
    bool rg = want_grad({&a, &b});
    Tensor out = OpCtx::make(a.shape(), rg);
    auto av = a.data();
    auto bv = b.data();
    auto ov = out.mutable_data();
    int64_t bn = b.numel();
    for (int64_t i = 0; i < a.numel(); ++i) ov[i] = av[i] + bv[i % bn];
    if (rg) {
        OpCtx::record(out, [a, b, out] {
            auto g = OpCtx::grad_of(out);
            if (a.requires_grad()) {
                auto ga = OpCtx::grad_acc(a);
                for (size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
            }
            if (b.requires_grad()) accumulate_suffix(b, g, out.numel());
        });
    }
    return out;
}

Tensor sub(const Tensor& a, const Tensor& b) {
    check_binary_shapes("sub", a.shape(), b.shape());
    bool rg = want_grad({&a, &b});
    Tensor out = OpCtx::make(a.shape(), rg);
    auto av = a.data();
    auto bv = b.data();
    auto ov = out.mutable_data();
    int64_t bn = b.numel();
    for (int64_t i = 0; i < a.numel(); ++i) ov[i] = av[i] - bv[i % bn];
    if (rg) {
        OpCtx::record(out, [a, b, out] {
            auto g = OpCtx::grad_of(out);
            if (a.requires_grad()) {
                auto ga = OpCtx::grad_acc(a);
                for (size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
            }
            if (b.requires_grad()) {
                auto gb = OpCtx::grad_acc(b);
                int64_t n = static_cast<int64_t>(gb.size());
                for (int64_t i = 0; i < out.numel(); ++i) gb[i % n] -= g[i];
            }
        });
    }
    return out;
}

Tensor mul(const Tensor& a, const Tensor& b) {
    check_binary_shapes("mul", a.shape(), b.shape());
    bool rg = want_grad({&a, &b});
    Tensor out = OpCtx::make(a.shape(), rg);
    auto av = a.data();
    auto bv = b.data();
    auto ov = out.mutable_data();
    int64_t bn = b.numel();
    for (int64_t i = 0; i < a.numel(); ++i) ov[i] = av[i] * bv[i % bn];
    if (rg) {
        OpCtx::record(out, [a, b, out] {
            auto g = OpCtx::grad_of(out);
            auto av = a.data();
            auto bv = b.data();
            int64_t bn = b.numel();
            if (a.requires_grad()) {
                auto ga = OpCtx::grad_acc(a);
                for (int64_t i = 0; i < a.numel(); ++i) ga[i] += g[i] * bv[i % bn];
            }
            if (b.requires_grad()) {
                auto gb = OpCtx::grad_acc(b);
                for (int64_t i = 0; i < a.numel(); ++i) gb[i % bn] += g[i] * av[i];
            }
        });
    }
    return out;
}

Tensor add_scalar(const Tensor& a, float c) {
    bool rg = want_grad({&a});
    Tensor out = OpCtx::make(a.shape(), rg);
    auto av = a.data();
    auto ov = out.mutable_data();
    for (int64_t i = 0; i < a.numel(); ++i) ov[i] = av[i] + c;
    if (rg) {
        OpCtx::record(out, [a, out] {
            auto g = OpCtx::grad_of(out);
            auto ga = OpCtx::grad_acc(a);
            for (size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
        });
    }
    return out;
}

Tensor mul_scalar(const Tensor& a, float c) {
    bool rg = want_grad({&a});
    Tensor out = OpCtx::make(a.shape(), rg);
    auto av = a.data();
    auto ov = out.mutable_data();
    for (int64_t i = 0; i < a.numel(); ++i) ov[i] = av[i] * c;
    if (rg) {
        OpCtx::record(out, [a, out, c] {
            auto g = OpCtx::grad_of(out);
            auto ga = OpCtx::grad_acc(a);
            for (size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * c;
        });
    }
    return out;
}

namespace {

float act_forward(float x, Act kind) {
    double xd = x;
    switch (kind) {
        case Act::Gelu:
            return static_cast<float>(0.5 * xd * (1.0 + std::erf(xd * kInvSqrt2)));
        case Act::Silu:
            return static_cast<float>(xd / (1.0 + std::exp(-xd)));
        case Act::Tanh:
            return static_cast<float>(std::tanh(xd));
        case Act::Sigmoid:
            return static_cast<float>(1.0 / (1.0 + std::exp(-xd)));
        case Act::Relu:
            return x > 0.0f ? x : 0.0f;
    }
    return 0.0f;
}

float act_backward(float x, Act kind) {
    double xd = x;
    switch (kind) {
        case Act::Gelu: {
            double phi = 0.5 * (1.0 + std::erf(xd * kInvSqrt2));
            double pdf = kInvSqrt2Pi * std::exp(-0.5 * xd * xd);
            return static_cast<float>(phi + xd * pdf);
        }
        case Act::Silu: {
            double s = 1.0 / (1.0 + std::exp(-xd));
            return static_cast<float>(s * (1.0 + xd * (1.0 - s)));
        }
        case Act::Tanh: {
            double t = std::tanh(xd);
            return static_cast<float>(1.0 - t * t);
        }
        case Act::Sigmoid: {
            double s = 1.0 / (1.0 + std::exp(-xd));
            return static_cast<float>(s * (1.0 - s));
        }
        case Act::Relu:
            return x > 0.0f ? 1.0f : 0.0f;
    }
    return 0.0f;
}

}  // namespace

Tensor activation(const Tensor& x, Act kind) {
    bool rg = want_grad({&x});
    Tensor out = OpCtx::make(x.shape(), rg);
    auto xv = x.data();
    auto ov = out.mutable_data();
    for (int64_t i = 0; i < x.numel(); ++i) ov[i] = act_forward(xv[i], kind);
    if (rg) {
        OpCtx::record(out, [x, out, kind] {
            auto g = OpCtx::grad_of(out);
            auto xv = x.data();
            auto gx = OpCtx::grad_acc(x);
            for (size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * act_backward(xv[i], kind);
        });
    }
    return out;
}

Tensor sqrt_elem(const Tensor& x) {
    bool rg = want_grad({&x});
    Tensor out = OpCtx::make(x.shape(), rg);
    auto xv = x.data();
    auto ov = out.mutable_data();
    for (int64_t i = 0; i < x.numel(); ++i) ov[i] = std::sqrt(std::max(xv[i], 0.0f));
    if (rg) {
        OpCtx::record(out, [x, out] {
            auto g = OpCtx::grad_of(out);
            auto ov = out.data();
            auto gx = OpCtx::grad_acc(x);
            for (size_t i = 0; i < g.size(); ++i) {
                if (ov[i] > 0.0f) gx[i] += g[i] * 0.5f / ov[i];
            }
        });
    }
    return out;
}

// --- shape -------------------------------------------------------------------

Tensor reshape(const Tensor& x, Shape s) {
    if (shape_numel(s) != x.numel()) {
        throw ShapeError("reshape: " + shape_str(x.shape()) + " to " + shape_str(s) + " changes element count");
    }
    bool rg = want_grad({&x});
    Tensor out = Tensor::from_data(std::move(s), std::vector<float>(x.data().begin(), x.data().end()), rg);
    if (rg) {
        OpCtx::record(out, [x, out] {
            auto g = OpCtx::grad_of(out);
            auto gx = OpCtx::grad_acc(x);
            for (size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
        });
    }
    return out;
}

namespace {

std::vector<int64_t> row_strides(const Shape& s) {
    std::vector<int64_t> st(s.size());
    int64_t acc = 1;
    for (size_t i = s.size(); i-- > 0;) {
        st[i] = acc;
        acc *= s[i];
    }
    return st;
}

void transpose_copy(const Shape& in_shape, std::span<const float> in, int64_t a, int64_t b,
                    std::span<float> out) {
    Shape os = in_shape;
    std::swap(os[static_cast<size_t>(a)], os[static_cast<size_t>(b)]);
    auto ist = row_strides(in_shape);
    auto ost = row_strides(os);
    size_t nd = in_shape.size();
    int64_t n = shape_numel(in_shape);
    std::vector<int64_t> idx(nd, 0);
    for (int64_t lin = 0; lin < n; ++lin) {
        int64_t rem = lin;
        int64_t src = 0;
        for (size_t d = 0; d < nd; ++d) {
            idx[d] = rem / ist[d];
            rem %= ist[d];
            src += idx[d] * ist[d];
        }
        int64_t dst = 0;
        for (size_t d = 0; d < nd; ++d) {
            size_t od = d;
            if (d == static_cast<size_t>(a)) od = static_cast<size_t>(b);
            else if (d == static_cast<size_t>(b)) od = static_cast<size_t>(a);
            dst += idx[d] * ost[od];
        }
        out[static_cast<size_t>(dst)] = in[static_cast<size_t>(src)];
    }
}

}  // namespace

Tensor transpose(const Tensor& x, int64_t a, int64_t b) {
    int64_t nd = x.ndim();
    if (a < 0 || b < 0 || a >= nd || b >= nd) {
        throw ShapeError("transpose: axes out of range for " + shape_str(x.shape()));
    }
    Shape os = x.shape();
    std::swap(os[static_cast<size_t>(a)], os[static_cast<size_t>(b)]);
    bool rg = want_grad({&x});
    Tensor out = OpCtx::make(os, rg);
    transpose_copy(x.shape(), x.data(), a, b, out.mutable_data());
    if (rg) {
        OpCtx::record(out, [x, out, a, b] {
            auto g = OpCtx::grad_of(out);
            std::vector<float> gt(g.size());
            transpose_copy(out.shape(), g, a, b, {gt.data(), gt.size()});
            auto gx = OpCtx::grad_acc(x);
            for (size_t i = 0; i < gt.size(); ++i) gx[i] += gt[i];
        });
    }
    return out;
}

Tensor slice_axis1(const Tensor& x, int64_t index) {
    if (x.ndim() != 3) throw ShapeError("slice_axis1: expected rank-3 tensor, got " + shape_str(x.shape()));
    int64_t b = x.dim(0), l = x.dim(1), n = x.dim(2);
    if (index < 0 || index >= l) throw ContractError("slice_axis1: index out of range");
    bool rg = want_grad({&x});
    Tensor out = OpCtx::make({b, n}, rg);
    auto xv = x.data();
    auto ov = out.mutable_data();
    for (int64_t i = 0; i < b; ++i) {
        const float* src = xv.data() + (i * l + index) * n;
        std::copy(src, src + n, ov.data() + i * n);
    }
    if (rg) {
        OpCtx::record(out, [x, out, index, b, l, n] {
            auto g = OpCtx::grad_of(out);
            auto gx = OpCtx::grad_acc(x);
            for (int64_t i = 0; i < b; ++i) {
                float* dst = gx.data() + (i * l + index) * n;
                const float* src = g.data() + i * n;
                for (int64_t j = 0; j < n; ++j) dst[j] += src[j];
            }
        });
    }
    return out;
}

Tensor slice_last(const Tensor& x, int64_t count) {
    int64_t d = x.dim(x.ndim() - 1);
    if (count < 1 || count > d) throw ContractError("slice_last: count outside [1, last extent]");
    if (count == d) return reshape(x, x.shape());
    int64_t rows = x.numel() / d;
    Shape os = x.shape();
    os.back() = count;
    bool rg = want_grad({&x});
    Tensor out = OpCtx::make(os, rg);
    auto xv = x.data();
    auto ov = out.mutable_data();
    for (int64_t r = 0; r < rows; ++r) {
        std::copy(xv.data() + r * d, xv.data() + r * d + count, ov.data() + r * count);
    }
    if (rg) {
        OpCtx::record(out, [x, out, rows, d, count] {
            auto g = OpCtx::grad_of(out);
            auto gx = OpCtx::grad_acc(x);
            for (int64_t r = 0; r < rows; ++r) {
                for (int64_t j = 0; j < count; ++j) gx[r * d + j] += g[r * count + j];
            }
        });
    }
    return out;
}

Tensor override_rows(const Tensor& x, const std::vector<uint8_t>& flags, const Tensor& override_values) {
    if (x.shape() != override_values.shape()) {
        throw ShapeError("override_rows: shapes differ: " + shape_str(x.shape()) + " vs " +
                         shape_str(override_values.shape()));
    }
    int64_t rows = x.dim(0);
    if (static_cast<int64_t>(flags.size()) != rows) {
        throw ContractError("override_rows: flag count does not match leading extent");
    }
    int64_t stride = x.numel() / rows;
    bool rg = want_grad({&x});
    Tensor out = OpCtx::make(x.shape(), rg);
    auto xv = x.data();
    auto sv = override_values.data();
    auto ov = out.mutable_data();
    for (int64_t r = 0; r < rows; ++r) {
        const float* src = (flags[static_cast<size_t>(r)] ? sv.data() : xv.data()) + r * stride;
        std::copy(src, src + stride, ov.data() + r * stride);
    }
    if (rg) {
        OpCtx::record(out, [x, out, flags, rows, stride] {
            auto g = OpCtx::grad_of(out);
            auto gx = OpCtx::grad_acc(x);
            for (int64_t r = 0; r < rows; ++r) {
                if (flags[static_cast<size_t>(r)]) continue;
                const float* src = g.data() + r * stride;
                float* dst = gx.data() + r * stride;
                for (int64_t j = 0; j < stride; ++j) dst[j] += src[j];
            }
        });
    }
    return out;
}

// --- contraction ---------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
    const Shape& as = a.shape();
    const Shape& bs = b.shape();
    if (as.size() < 2 || bs.size() < 2) {
        throw ShapeError("matmul: need rank >= 2, got " + shape_str(as) + " and " + shape_str(bs));
    }
    int64_t m = as[as.size() - 2], p = as[as.size() - 1];
    int64_t p2 = bs[bs.size() - 2], n = bs[bs.size() - 1];
    if (p != p2) {
        throw ShapeError("matmul: inner extents differ: " + shape_str(as) + " x " + shape_str(bs));
    }
    size_t nb = std::max(as.size(), bs.size()) - 2;
    Shape abatch(nb, 1), bbatch(nb, 1), obatch(nb, 1);
    for (size_t i = 0; i < as.size() - 2; ++i) abatch[nb - (as.size() - 2) + i] = as[i];
    for (size_t i = 0; i < bs.size() - 2; ++i) bbatch[nb - (bs.size() - 2) + i] = bs[i];
    for (size_t i = 0; i < nb; ++i) {
        if (abatch[i] != bbatch[i] && abatch[i] != 1 && bbatch[i] != 1) {
            throw ShapeError("matmul: batch extents incompatible: " + shape_str(as) + " x " + shape_str(bs));
        }
        obatch[i] = std::max(abatch[i], bbatch[i]);
    }
    Shape oshape = obatch;
    oshape.push_back(m);
    oshape.push_back(n);
    int64_t batches = shape_numel(obatch);

    // Per-flat-batch offsets into a and b (stride 0 on broadcast axes).
    auto batch_offsets = [&](int64_t flat, const Shape& dims) {
        int64_t off = 0, mulacc = 1;
        std::vector<int64_t> idx(nb);
        for (size_t d = nb; d-- > 0;) {
            idx[d] = (flat / mulacc) % obatch[d];
            mulacc *= obatch[d];
        }
        mulacc = 1;
        for (size_t d = nb; d-- > 0;) {
            int64_t i = dims[d] == 1 ? 0 : idx[d];
            off += i * mulacc;
            mulacc *= dims[d];
        }
        return off;
    };

    bool rg = want_grad({&a, &b});
    Tensor out = OpCtx::make(oshape, rg);
    auto av = a.data();
    auto bv = b.data();
    auto ov = out.mutable_data();
    for (int64_t bt = 0; bt < batches; ++bt) {
        const float* A = av.data() + batch_offsets(bt, abatch) * m * p;
        const float* B = bv.data() + batch_offsets(bt, bbatch) * p * n;
        float* O = ov.data() + bt * m * n;
        for (int64_t i = 0; i < m; ++i) {
            float* orow = O + i * n;
            std::fill(orow, orow + n, 0.0f);
            for (int64_t kk = 0; kk < p; ++kk) {
                float aik = A[i * p + kk];
                const float* brow = B + kk * n;
                for (int64_t j = 0; j < n; ++j) orow[j] += aik * brow[j];
            }
        }
    }
    if (rg) {
        OpCtx::record(out, [a, b, out, abatch, bbatch, obatch, batch_offsets, batches, m, p, n] {
            auto g = OpCtx::grad_of(out);
            auto av = a.data();
            auto bv = b.data();
            if (a.requires_grad()) {
                auto ga = OpCtx::grad_acc(a);
                for (int64_t bt = 0; bt < batches; ++bt) {
                    float* GA = ga.data() + batch_offsets(bt, abatch) * m * p;
                    const float* B = bv.data() + batch_offsets(bt, bbatch) * p * n;
                    const float* G = g.data() + bt * m * n;
                    // dA = dY . B^T
                    for (int64_t i = 0; i < m; ++i) {
                        for (int64_t kk = 0; kk < p; ++kk) {
                            const float* grow = G + i * n;
                            const float* brow = B + kk * n;
                            float acc = 0.0f;
                            for (int64_t j = 0; j < n; ++j) acc += grow[j] * brow[j];
                            GA[i * p + kk] += acc;
                        }
                    }
                }
            }
            if (b.requires_grad()) {
                auto gb = OpCtx::grad_acc(b);
                for (int64_t bt = 0; bt < batches; ++bt) {
                    const float* A = av.data() + batch_offsets(bt, abatch) * m * p;
                    float* GB = gb.data() + batch_offsets(bt, bbatch) * p * n;
                    const float* G = g.data() + bt * m * n;
                    // dB = A^T . dY
                    for (int64_t i = 0; i < m; ++i) {
                        const float* grow = G + i * n;
                        for (int64_t kk = 0; kk < p; ++kk) {
                            float aik = A[i * p + kk];
                            float* gbrow = GB + kk * n;
                            for (int64_t j = 0; j < n; ++j) gbrow[j] += aik * grow[j];
                        }
                    }
                }
            }
        });
    }
    return out;
}

Tensor linear(const Tensor& x, const Tensor& w) {
    if (w.ndim() != 2) throw ShapeError("linear: weight must be rank 2, got " + shape_str(w.shape()));
    int64_t din = w.dim(1), dout = w.dim(0);
    if (x.dim(x.ndim() - 1) != din) {
        throw ShapeError("linear: input " + shape_str(x.shape()) + " incompatible with weight " +
                         shape_str(w.shape()));
    }
    int64_t rows = x.numel() / din;
    Shape os = x.shape();
    os.back() = dout;
    bool rg = want_grad({&x, &w});
    Tensor out = OpCtx::make(os, rg);
    auto xv = x.data();
    auto wv = w.data();
    auto ov = out.mutable_data();
    for (int64_t r = 0; r < rows; ++r) {
        const float* xr = xv.data() + r * din;
        float* orow = ov.data() + r * dout;
        for (int64_t o = 0; o < dout; ++o) {
            const float* wr = wv.data() + o * din;
            float acc = 0.0f;
            for (int64_t i = 0; i < din; ++i) acc += xr[i] * wr[i];
            orow[o] = acc;
        }
    }
    if (rg) {
        OpCtx::record(out, [x, w, out, rows, din, dout] {
            auto g = OpCtx::grad_of(out);
            auto xv = x.data();
            auto wv = w.data();
            if (x.requires_grad()) {
                auto gx = OpCtx::grad_acc(x);
                for (int64_t r = 0; r < rows; ++r) {
                    const float* grow = g.data() + r * dout;
                    float* gxr = gx.data() + r * din;
                    for (int64_t o = 0; o < dout; ++o) {
                        float go = grow[o];
                        if (go == 0.0f) continue;
                        const float* wr = wv.data() + o * din;
                        for (int64_t i = 0; i < din; ++i) gxr[i] += go * wr[i];
                    }
                }
            }
            if (w.requires_grad()) {
                auto gw = OpCtx::grad_acc(w);
                for (int64_t r = 0; r < rows; ++r) {
                    const float* grow = g.data() + r * dout;
                    const float* xr = xv.data() + r * din;
                    for (int64_t o = 0; o < dout; ++o) {
                        float go = grow[o];
                        if (go == 0.0f) continue;
                        float* gwr = gw.data() + o * din;
                        for (int64_t i = 0; i < din; ++i) gwr[i] += go * xr[i];
                    }
                }
            }
        });
    }
    return out;
}

Tensor embedding(const Tensor& table, const IntArray& ids) {
    if (table.ndim() != 2) throw ShapeError("embedding: table must be rank 2");
    int64_t v = table.dim(0), d = table.dim(1);
    for (int32_t id : ids.v) {
        if (id < 0 || id >= v) {
            throw ContractError("embedding: id " + std::to_string(id) + " outside vocabulary of size " +
                                std::to_string(v));
        }
    }
    Shape os = ids.shape;
    os.push_back(d);
    bool rg = want_grad({&table});
    Tensor out = OpCtx::make(os, rg);
    auto tv = table.data();
    auto ov = out.mutable_data();
    for (int64_t i = 0; i < ids.numel(); ++i) {
        const float* src = tv.data() + static_cast<int64_t>(ids.v[static_cast<size_t>(i)]) * d;
        std::copy(src, src + d, ov.data() + i * d);
    }
    if (rg) {
        OpCtx::record(out, [table, out, ids, d] {
            auto g = OpCtx::grad_of(out);
            auto gt = OpCtx::grad_acc(table);
            for (int64_t i = 0; i < ids.numel(); ++i) {
                float* dst = gt.data() + static_cast<int64_t>(ids.v[static_cast<size_t>(i)]) * d;
                const float* src = g.data() + i * d;
                for (int64_t j = 0; j < d; ++j) dst[j] += src[j];
            }
        });
    }
    return out;
}

// --- neural ------------------------------------------------------------------

Tensor softmax(const Tensor& x, int64_t axis) {
    int64_t nd = x.ndim();
    if (axis < 0 || axis >= nd) throw ShapeError("softmax: axis out of range for " + shape_str(x.shape()));
    int64_t lane = x.dim(axis);
    int64_t inner = 1;
    for (int64_t i = axis + 1; i < nd; ++i) inner *= x.dim(i);
    int64_t outer = x.numel() / (lane * inner);
    bool rg = want_grad({&x});
    Tensor out = OpCtx::make(x.shape(), rg);
    auto xv = x.data();
    auto ov = out.mutable_data();
    for (int64_t o = 0; o < outer; ++o) {
        for (int64_t in = 0; in < inner; ++in) {
            const float* base = xv.data() + o * lane * inner + in;
            float* obase = ov.data() + o * lane * inner + in;
            float mx = base[0];
            for (int64_t l = 1; l < lane; ++l) mx = std::max(mx, base[l * inner]);
            double denom = 0.0;
            for (int64_t l = 0; l < lane; ++l) {
                float e = std::exp(base[l * inner] - mx);
                obase[l * inner] = e;
                denom += e;
            }
            float inv = static_cast<float>(1.0 / denom);
            for (int64_t l = 0; l < lane; ++l) obase[l * inner] *= inv;
        }
    }
    if (rg) {
        OpCtx::record(out, [x, out, lane, inner, outer] {
            auto g = OpCtx::grad_of(out);
            auto yv = out.data();
            auto gx = OpCtx::grad_acc(x);
            for (int64_t o = 0; o < outer; ++o) {
                for (int64_t in = 0; in < inner; ++in) {
                    int64_t off = o * lane * inner + in;
                    double dot = 0.0;
                    for (int64_t l = 0; l < lane; ++l) dot += static_cast<double>(g[off + l * inner]) * yv[off + l * inner];
                    for (int64_t l = 0; l < lane; ++l) {
                        int64_t i = off + l * inner;
                        gx[i] += yv[i] * (g[i] - static_cast<float>(dot));
                    }
                }
            }
        });
    }
    return out;
}

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, float eps) {
    int64_t d = x.dim(x.ndim() - 1);
    if (gain.numel() != d || bias.numel() != d) {
        throw ShapeError("layer_norm: gain/bias must match last extent " + std::to_string(d));
    }
    if (eps <= 0.0f) throw ContractError("layer_norm: eps must be positive");
    int64_t rows = x.numel() / d;
    bool rg = want_grad({&x, &gain, &bias});
    Tensor out = OpCtx::make(x.shape(), rg);
    auto xv = x.data();
    auto gv = gain.data();
    auto bv = bias.data();
    auto ov = out.mutable_data();
    std::vector<float> mean_c(static_cast<size_t>(rows)), inv_c(static_cast<size_t>(rows));
    for (int64_t r = 0; r < rows; ++r) {
        const float* xr = xv.data() + r * d;
        double mu = 0.0;
        for (int64_t i = 0; i < d; ++i) mu += xr[i];
        mu /= d;
        double var = 0.0;
        for (int64_t i = 0; i < d; ++i) {
            double c = xr[i] - mu;
            var += c * c;
        }
        var /= d;
        float inv = static_cast<float>(1.0 / std::sqrt(var + eps));
        mean_c[static_cast<size_t>(r)] = static_cast<float>(mu);
        inv_c[static_cast<size_t>(r)] = inv;
        float* orow = ov.data() + r * d;
        for (int64_t i = 0; i < d; ++i) {
            float xhat = (xr[i] - static_cast<float>(mu)) * inv;
            orow[i] = xhat * gv[i] + bv[i];
        }
    }
    if (rg) {
        OpCtx::record(out, [x, gain, bias, out, rows, d, mean_c, inv_c] {
            auto g = OpCtx::grad_of(out);
            auto xv = x.data();
            auto gv = gain.data();
            for (int64_t r = 0; r < rows; ++r) {
                const float* grow = g.data() + r * d;
                const float* xr = xv.data() + r * d;
                float mu = mean_c[static_cast<size_t>(r)];
                float inv = inv_c[static_cast<size_t>(r)];
                if (gain.requires_grad()) {
                    auto gg = OpCtx::grad_acc(gain);
                    for (int64_t i = 0; i < d; ++i) gg[i] += grow[i] * (xr[i] - mu) * inv;
                }
                if (bias.requires_grad()) {
                    auto gb = OpCtx::grad_acc(bias);
                    for (int64_t i = 0; i < d; ++i) gb[i] += grow[i];
                }
                if (x.requires_grad()) {
                    auto gx = OpCtx::grad_acc(x);
                    double sum_dxhat = 0.0, sum_dxhat_xhat = 0.0;
                    for (int64_t i = 0; i < d; ++i) {
                        double dxhat = static_cast<double>(grow[i]) * gv[i];
                        double xhat = (xr[i] - mu) * inv;
                        sum_dxhat += dxhat;
                        sum_dxhat_xhat += dxhat * xhat;
                    }
                    float* gxr = gx.data() + r * d;
                    for (int64_t i = 0; i < d; ++i) {
                        double dxhat = static_cast<double>(grow[i]) * gv[i];
                        double xhat = (xr[i] - mu) * inv;
                        gxr[i] += static_cast<float>(inv * (dxhat - sum_dxhat / d - xhat * sum_dxhat_xhat / d));
                    }
                }
            }
        });
    }
    return out;
}

Tensor rms_norm(const Tensor& x, const Tensor& gain, float eps) {
    int64_t d = x.dim(x.ndim() - 1);
    if (gain.numel() != d) throw ShapeError("rms_norm: gain must match last extent " + std::to_string(d));
    int64_t rows = x.numel() / d;
    bool rg = want_grad({&x, &gain});
    Tensor out = OpCtx::make(x.shape(), rg);
    auto xv = x.data();
    auto gv = gain.data();
    auto ov = out.mutable_data();
    std::vector<float> inv_c(static_cast<size_t>(rows));
    for (int64_t r = 0; r < rows; ++r) {
        const float* xr = xv.data() + r * d;
        double ms = 0.0;
        for (int64_t i = 0; i < d; ++i) ms += static_cast<double>(xr[i]) * xr[i];
        ms /= d;
        float inv = static_cast<float>(1.0 / std::sqrt(ms + eps));
        inv_c[static_cast<size_t>(r)] = inv;
        float* orow = ov.data() + r * d;
        for (int64_t i = 0; i < d; ++i) orow[i] = xr[i] * inv * gv[i];
    }
    if (rg) {
        OpCtx::record(out, [x, gain, out, rows, d, inv_c] {
            auto g = OpCtx::grad_of(out);
            auto xv = x.data();
            auto gv = gain.data();
            for (int64_t r = 0; r < rows; ++r) {
                const float* grow = g.data() + r * d;
                const float* xr = xv.data() + r * d;
                float inv = inv_c[static_cast<size_t>(r)];
                if (gain.requires_grad()) {
                    auto gg = OpCtx::grad_acc(gain);
                    for (int64_t i = 0; i < d; ++i) gg[i] += grow[i] * xr[i] * inv;
                }
                if (x.requires_grad()) {
                    auto gx = OpCtx::grad_acc(x);
                    double dot = 0.0;
                    for (int64_t i = 0; i < d; ++i) dot += static_cast<double>(grow[i]) * gv[i] * xr[i];
                    double k = dot * inv * inv * inv / d;
                    float* gxr = gx.data() + r * d;
                    for (int64_t i = 0; i < d; ++i) {
                        gxr[i] += static_cast<float>(static_cast<double>(grow[i]) * gv[i] * inv - k * xr[i]);
                    }
                }
            }
        });
    }
    return out;
}

Tensor mean_pool(const Tensor& x, int64_t axis) {
    if (x.ndim() != 3 || axis != 1) {
        throw ContractError("mean_pool: expects [B,T,D] pooled over axis 1");
    }
    int64_t b = x.dim(0), t = x.dim(1), d = x.dim(2);
    bool rg = want_grad({&x});
    Tensor out = OpCtx::make({b, d}, rg);
    auto xv = x.data();
    auto ov = out.mutable_data();
    for (int64_t i = 0; i < b; ++i) {
        for (int64_t j = 0; j < d; ++j) {
            double acc = 0.0;
            for (int64_t s = 0; s < t; ++s) acc += xv[(i * t + s) * d + j];
            ov[i * d + j] = static_cast<float>(acc / t);
        }
    }
    if (rg) {
        OpCtx::record(out, [x, out, b, t, d] {
            auto g = OpCtx::grad_of(out);
            auto gx = OpCtx::grad_acc(x);
            float invt = 1.0f / static_cast<float>(t);
            for (int64_t i = 0; i < b; ++i) {
                for (int64_t s = 0; s < t; ++s) {
                    float* dst = gx.data() + (i * t + s) * d;
                    const float* src = g.data() + i * d;
                    for (int64_t j = 0; j < d; ++j) dst[j] += src[j] * invt;
                }
            }
        });
    }
    return out;
}

TopKResult top_k(const Tensor& x, int64_t k) {
    int64_t n = x.dim(x.ndim() - 1);
    if (k < 1 || k > n) {
        throw ContractError("top_k: k=" + std::to_string(k) + " outside [1, " + std::to_string(n) + "]");
    }
    int64_t rows = x.numel() / n;
    Shape os = x.shape();
    os.back() = k;
    bool rg = want_grad({&x});
    Tensor values = OpCtx::make(os, rg);
    IntArray indices = IntArray::zeros(os);
    auto xv = x.data();
    auto vv = values.mutable_data();
    std::vector<int32_t> order(static_cast<size_t>(n));
    for (int64_t r = 0; r < rows; ++r) {
        const float* xr = xv.data() + r * n;
        std::iota(order.begin(), order.end(), 0);
        // descending by value; stable_sort keeps the lower index first on ties
        std::stable_sort(order.begin(), order.end(),
                         [&](int32_t i, int32_t j) { return xr[i] > xr[j]; });
        for (int64_t j = 0; j < k; ++j) {
            indices.v[static_cast<size_t>(r * k + j)] = order[static_cast<size_t>(j)];
            vv[r * k + j] = xr[order[static_cast<size_t>(j)]];
        }
    }
    if (rg) {
        std::vector<int32_t> saved = indices.v;
        OpCtx::record(values, [x, values, saved, rows, n, k] {
            auto g = OpCtx::grad_of(values);
            auto gx = OpCtx::grad_acc(x);
            for (int64_t r = 0; r < rows; ++r) {
                for (int64_t j = 0; j < k; ++j) {
                    gx[r * n + saved[static_cast<size_t>(r * k + j)]] += g[r * k + j];
                }
            }
        });
    }
    return {values, indices};
}

Tensor cross_entropy_nll(const Tensor& logits, const IntArray& targets, const IntArray& mask) {
    if (logits.ndim() != 3) throw ShapeError("cross_entropy_nll: logits must be [B,T,V]");
    int64_t b = logits.dim(0), t = logits.dim(1), v = logits.dim(2);
    if (targets.numel() != b * t || mask.numel() != b * t) {
        throw ShapeError("cross_entropy_nll: targets/mask must be [B,T]");
    }
    int64_t count = 0;
    auto xv = logits.data();
    double total = 0.0;
    std::vector<float> lse(static_cast<size_t>(b * t), 0.0f);
    for (int64_t i = 0; i < b * t; ++i) {
        if (mask.v[static_cast<size_t>(i)] == 0) continue;
        int32_t tgt = targets.v[static_cast<size_t>(i)];
        if (tgt < 0 || tgt >= v) {
            throw ContractError("cross_entropy_nll: target " + std::to_string(tgt) + " outside [0, " +
                                std::to_string(v) + ")");
        }
        const float* row = xv.data() + i * v;
        float mx = row[0];
        for (int64_t j = 1; j < v; ++j) mx = std::max(mx, row[j]);
        double s = 0.0;
        for (int64_t j = 0; j < v; ++j) s += std::exp(static_cast<double>(row[j]) - mx);
        double l = mx + std::log(s);
        lse[static_cast<size_t>(i)] = static_cast<float>(l);
        total += l - row[tgt];
        ++count;
    }
    if (count == 0) throw ContractError("cross_entropy_nll: mask selects no positions");
    double nll = total / count;
    bool rg = want_grad({&logits});
    Tensor out = OpCtx::make({1}, rg);
    out.mutable_data()[0] = static_cast<float>(nll);
    OpCtx::set_f64(out, nll);
    if (rg) {
        OpCtx::record(out, [logits, out, targets, mask, lse, b, t, v, count] {
            auto g = OpCtx::grad_of(out);
            float go = g[0] / static_cast<float>(count);
            auto xv = logits.data();
            auto gx = OpCtx::grad_acc(logits);
            for (int64_t i = 0; i < b * t; ++i) {
                if (mask.v[static_cast<size_t>(i)] == 0) continue;
                const float* row = xv.data() + i * v;
                float* grow = gx.data() + i * v;
                float l = lse[static_cast<size_t>(i)];
                int32_t tgt = targets.v[static_cast<size_t>(i)];
                for (int64_t j = 0; j < v; ++j) {
                    float p = std::exp(row[j] - l);
                    grow[j] += go * (p - (j == tgt ? 1.0f : 0.0f));
                }
            }
        });
    }
    return out;
}

Tensor attention_mask_add(const Tensor& scores, const IntArray& valid) {
    if (scores.ndim() != 4) throw ShapeError("attention_mask_add: scores must be [B,H,T,T]");
    int64_t b = scores.dim(0), h = scores.dim(1), t = scores.dim(2);
    if (scores.dim(3) != t || valid.numel() != b * t) {
        throw ShapeError("attention_mask_add: mask [B,T] must match scores " + shape_str(scores.shape()));
    }
    bool rg = want_grad({&scores});
    Tensor out = OpCtx::make(scores.shape(), rg);
    auto sv = scores.data();
    auto ov = out.mutable_data();
    for (int64_t bi = 0; bi < b; ++bi) {
        for (int64_t hi = 0; hi < h; ++hi) {
            for (int64_t i = 0; i < t; ++i) {
                const float* src = sv.data() + ((bi * h + hi) * t + i) * t;
                float* dst = ov.data() + ((bi * h + hi) * t + i) * t;
                for (int64_t j = 0; j < t; ++j) {
                    bool blocked = j > i || valid.v[static_cast<size_t>(bi * t + j)] == 0;
                    dst[j] = src[j] + (blocked ? kMaskValue : 0.0f);
                }
            }
        }
    }
    if (rg) {
        OpCtx::record(out, [scores, out] {
            auto g = OpCtx::grad_of(out);
            auto gx = OpCtx::grad_acc(scores);
            for (size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
        });
    }
    return out;
}

// --- reductions ----------------------------------------------------------

Tensor sum_all(const Tensor& x) {
    bool rg = want_grad({&x});
    auto xv = x.data();
    double acc = 0.0;
    for (float v : xv) acc += v;
    Tensor out = OpCtx::make({1}, rg);
    out.mutable_data()[0] = static_cast<float>(acc);
    OpCtx::set_f64(out, acc);
    if (rg) {
        OpCtx::record(out, [x, out] {
            auto g = OpCtx::grad_of(out);
            auto gx = OpCtx::grad_acc(x);
            for (size_t i = 0; i < gx.size(); ++i) gx[i] += g[0];
        });
    }
    return out;
}

Tensor mean_all(const Tensor& x) {
    bool rg = want_grad({&x});
    auto xv = x.data();
    double acc = 0.0;
    for (float v : xv) acc += v;
    acc /= static_cast<double>(x.numel());
    Tensor out = OpCtx::make({1}, rg);
    out.mutable_data()[0] = static_cast<float>(acc);
    OpCtx::set_f64(out, acc);
    if (rg) {
        int64_t n = x.numel();
        OpCtx::record(out, [x, out, n] {
            auto g = OpCtx::grad_of(out);
            auto gx = OpCtx::grad_acc(x);
            float s = g[0] / static_cast<float>(n);
            for (size_t i = 0; i < gx.size(); ++i) gx[i] += s;
        });
    }
    return out;
}

Tensor sum_last(const Tensor& x) {
    if (x.ndim() < 1) throw ShapeError("sum_last: rank must be >= 1");
    int64_t d = x.dim(x.ndim() - 1);
    int64_t rows = x.numel() / d;
    Shape os(x.shape().begin(), x.shape().end() - 1);
    if (os.empty()) os.push_back(1);
    bool rg = want_grad({&x});
    Tensor out = OpCtx::make(os, rg);
    auto xv = x.data();
    auto ov = out.mutable_data();
    for (int64_t r = 0; r < rows; ++r) {
        double acc = 0.0;
        const float* xr = xv.data() + r * d;
        for (int64_t i = 0; i < d; ++i) acc += xr[i];
        ov[r] = static_cast<float>(acc);
    }
    if (rg) {
        OpCtx::record(out, [x, out, rows, d] {
            auto g = OpCtx::grad_of(out);
            auto gx = OpCtx::grad_acc(x);
            for (int64_t r = 0; r < rows; ++r) {
                float go = g[r];
                float* dst = gx.data() + r * d;
                for (int64_t i = 0; i < d; ++i) dst[i] += go;
            }
        });
    }
    return out;
}

}  // namespace niwf
