#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace flowood {

using Shape = std::vector<std::int64_t>;

std::int64_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

namespace detail {

struct TensorNode {
    Shape shape;
    std::vector<double> data;
    bool requires_grad = false;
    std::vector<double> grad; // empty until first accumulation

    // Graph record: present only on op outputs recorded under grad mode.
    std::vector<std::shared_ptr<TensorNode>> parents;
    std::function<void(TensorNode&)> backward_fn;
    const char* op = "";

    std::int64_t numel() const { return static_cast<std::int64_t>(data.size()); }
    void accumulate(const double* g, std::int64_t n);
};

} // namespace detail

// Dense row-major tensor of 64-bit floats. Copying a Tensor shares the
// underlying node, so ops can record the compute graph without copying data.
class Tensor {
public:
    Tensor() = default;
    explicit Tensor(Shape shape, double fill = 0.0);

    static Tensor scalar(double value);
    static Tensor zeros(Shape shape) { return Tensor(std::move(shape), 0.0); }
    static Tensor full(Shape shape, double v) { return Tensor(std::move(shape), v); }
    static Tensor from_data(Shape shape, std::vector<double> data);

    bool defined() const { return node_ != nullptr; }
    const Shape& shape() const;
    std::int64_t numel() const;
    std::int64_t rank() const { return static_cast<std::int64_t>(shape().size()); }

    std::span<const double> data() const;
    std::span<double> data(); // direct writes are for leaves only; op outputs are never mutated
    double item() const;      // value of a single-element tensor
    double at(std::int64_t flat) const { return data()[static_cast<std::size_t>(flat)]; }

    bool requires_grad() const;
    Tensor& set_requires_grad(bool v);
    bool has_grad() const;
    Tensor grad() const; // copy of accumulated gradient, same shape
    std::span<const double> grad_data() const;
    void zero_grad();

    // Value copy detached from any graph.
    Tensor detach() const;
    Tensor reshaped(Shape shape) const; // non-graph reshape of a detached copy

    std::shared_ptr<detail::TensorNode> node() const { return node_; }
    static Tensor wrap(std::shared_ptr<detail::TensorNode> node);

private:
    std::shared_ptr<detail::TensorNode> node_;
};

// Scoped switch that disables graph recording (inference paths).
class NoGradGuard {
public:
    NoGradGuard();
    ~NoGradGuard();
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool prev_;
};

bool grad_enabled();

// Topologically ordered view of the graph reachable from a root. backward()
// seeds d(root)/d(root) = 1 and applies each node's rule exactly once in
// reverse order; the graph edges are released afterwards unless retained.
class ComputeGraph {
public:
    static ComputeGraph from(const Tensor& root);
    const std::vector<std::shared_ptr<detail::TensorNode>>& nodes() const { return order_; }
    void run_backward(bool retain = false);

private:
    std::vector<std::shared_ptr<detail::TensorNode>> order_; // parents before children
    std::shared_ptr<detail::TensorNode> root_;
};

// Reverse-mode differentiation from a scalar loss into every reachable
// parameter's grad buffer. Contributions from multiple consumers accumulate.
void backward(const Tensor& loss, bool retain_graph = false);

enum class BinaryKind { add, sub, mul, div };
enum class ReduceKind { sum, mean, channel_mean, channel_std };

// Elementwise arithmetic. Shapes must be equal, or one operand may be a
// scalar, a per-channel vector [C] against NCHW, or a tensor matching the
// other's shape with the leading (batch) axis dropped.
Tensor elementwise_binary(const Tensor& a, const Tensor& b, BinaryKind kind);
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
inline Tensor operator/(const Tensor& a, const Tensor& b) { return div(a, b); }
inline Tensor operator+(const Tensor& a, double s) { return add(a, Tensor::scalar(s)); }
inline Tensor operator-(const Tensor& a, double s) { return sub(a, Tensor::scalar(s)); }
inline Tensor operator*(const Tensor& a, double s) { return mul(a, Tensor::scalar(s)); }
inline Tensor operator/(const Tensor& a, double s) { return div(a, Tensor::scalar(s)); }
inline Tensor operator+(double s, const Tensor& a) { return add(Tensor::scalar(s), a); }
inline Tensor operator-(double s, const Tensor& a) { return sub(Tensor::scalar(s), a); }
inline Tensor operator*(double s, const Tensor& a) { return mul(Tensor::scalar(s), a); }
inline Tensor operator/(double s, const Tensor& a) { return div(Tensor::scalar(s), a); }

Tensor exp(const Tensor& x);
Tensor log(const Tensor& x);
Tensor log_abs(const Tensor& x); // ln|x|
Tensor tanh(const Tensor& x);
Tensor relu(const Tensor& x);
Tensor softplus(const Tensor& x); // ln(1 + e^x), overflow-safe
Tensor sqrt(const Tensor& x);
Tensor square(const Tensor& x);

// Reductions.
Tensor reduce(const Tensor& x, ReduceKind kind);
Tensor sum(const Tensor& x);  // scalar [1]
Tensor mean(const Tensor& x); // scalar [1]
Tensor channel_mean(const Tensor& x); // NCHW -> [C], over batch and spatial axes
Tensor channel_std(const Tensor& x);  // NCHW -> [C], population convention
Tensor sample_sum(const Tensor& x);   // [N, ...] -> [N], sum over all but axis 0
Tensor row_sum(const Tensor& x);      // alias of sample_sum for [N, D] inputs

// Linear algebra.
Tensor matmul(const Tensor& a, const Tensor& b); // [m,k] x [k,n]
Tensor transpose2d(const Tensor& a);
Tensor outer(const Tensor& a, const Tensor& b);        // [n] x [d] -> [n,d]
Tensor scale_rows(const Tensor& x, const Tensor& s);   // x[N,...] * s[N] per row

// 2-D convolution, NCHW input against OIHW kernel with symmetric zero
// padding. Odd kernel extents; padding (k-1)/2 preserves spatial extents.
Tensor conv2d(const Tensor& input, const Tensor& kernel, std::int64_t padding);

// Channel plumbing on NCHW tensors.
Tensor concat_channels(const Tensor& a, const Tensor& b);
Tensor gather_channels(const Tensor& x, const std::vector<std::int64_t>& idx);
// Inverse of two gathers: place a's channels at a_idx and b's at b_idx.
Tensor combine_channels(const Tensor& a, const std::vector<std::int64_t>& a_idx,
                        const Tensor& b, const std::vector<std::int64_t>& b_idx);

// Space-to-depth on NCHW: each 2x2 spatial block becomes 4 channels in fixed
// (TL, TR, BL, BR) order. Volume preserving.
Tensor squeeze2x2(const Tensor& x);
Tensor unsqueeze2x2(const Tensor& x);

Tensor reshape(const Tensor& x, Shape shape);
// Scatter a parameter vector into fixed flat positions of a zero tensor.
Tensor scatter_fixed(const Tensor& values, const std::vector<std::int64_t>& positions, Shape out_shape);
Tensor repeat_scalar(const Tensor& s, std::int64_t n); // [1] -> [n]

} // namespace flowood
