#include "flowood/tensor.hpp"

#include "flowood/errors.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>
#include <unordered_map>
#include <unordered_set>

namespace flowood {

std::int64_t shape_numel(const Shape& shape) {
    std::int64_t n = 1;
    for (auto d : shape) n *= d;
    return n;
}

std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) os << ',';
        os << shape[i];
    }
    os << ']';
    return os.str();
}

namespace detail {

void TensorNode::accumulate(const double* g, std::int64_t n) {
    if (grad.empty()) grad.assign(data.size(), 0.0);
    for (std::int64_t i = 0; i < n; ++i) grad[static_cast<std::size_t>(i)] += g[i];
}

} // namespace detail

using detail::TensorNode;
using NodePtr = std::shared_ptr<TensorNode>;

namespace {

thread_local bool g_grad_enabled = true;

NodePtr make_node(Shape shape) {
    for (auto d : shape)
        if (d <= 0) throw ShapeError("tensor extents must be positive, got " + shape_str(shape));
    auto n = std::make_shared<TensorNode>();
    n->data.assign(static_cast<std::size_t>(shape_numel(shape)), 0.0);
    n->shape = std::move(shape);
    return n;
}

bool track(std::initializer_list<const Tensor*> ins) {
    if (!g_grad_enabled) return false;
    for (const Tensor* t : ins)
        if (t->requires_grad()) return true;
    return false;
}

void record(const NodePtr& out, const char* op, std::vector<NodePtr> parents,
            std::function<void(TensorNode&)> fn) {
    out->requires_grad = true;
    out->op = op;
    out->parents = std::move(parents);
    out->backward_fn = std::move(fn);
}

// Flat-index mapping of a broadcast operand into the output index space.
struct IdxMap {
    enum Kind { identity, zero, modulo, channel } kind = identity;
    std::int64_t m1 = 0; // modulo: suffix size; channel: H*W
    std::int64_t m2 = 0; // channel: C

    std::int64_t operator()(std::int64_t i) const {
        switch (kind) {
        case identity: return i;
        case zero: return 0;
        case modulo: return i % m1;
        case channel: return (i / m1) % m2;
        }
        return i;
    }
};

bool suffix_match(const Shape& big, const Shape& small) {
    if (big.size() != small.size() + 1 || small.empty()) return false;
    return std::equal(small.begin(), small.end(), big.begin() + 1);
}

bool channel_match(const Shape& big, const Shape& small) {
    return big.size() == 4 && small.size() == 1 && small[0] == big[1];
}

} // namespace

Tensor::Tensor(Shape shape, double fill) : node_(make_node(std::move(shape))) {
    if (fill != 0.0) std::fill(node_->data.begin(), node_->data.end(), fill);
}

Tensor Tensor::scalar(double value) {
    Tensor t(Shape{1});
    t.node_->data[0] = value;
    return t;
}

Tensor Tensor::from_data(Shape shape, std::vector<double> data) {
    if (shape_numel(shape) != static_cast<std::int64_t>(data.size()))
        throw ShapeError("from_data: " + shape_str(shape) + " does not hold " +
                         std::to_string(data.size()) + " values");
    Tensor t;
    t.node_ = make_node(std::move(shape));
    t.node_->data = std::move(data);
    return t;
}

Tensor Tensor::wrap(std::shared_ptr<detail::TensorNode> node) {
    Tensor t;
    t.node_ = std::move(node);
    return t;
}

const Shape& Tensor::shape() const { return node_->shape; }
std::int64_t Tensor::numel() const { return node_->numel(); }

std::span<const double> Tensor::data() const { return {node_->data.data(), node_->data.size()}; }
std::span<double> Tensor::data() { return {node_->data.data(), node_->data.size()}; }

double Tensor::item() const {
    if (numel() != 1) throw ShapeError("item(): tensor has " + std::to_string(numel()) + " elements");
    return node_->data[0];
}

bool Tensor::requires_grad() const { return node_ && node_->requires_grad; }

Tensor& Tensor::set_requires_grad(bool v) {
    node_->requires_grad = v;
    return *this;
}

bool Tensor::has_grad() const { return node_ && !node_->grad.empty(); }

Tensor Tensor::grad() const {
    if (!has_grad()) throw ValueError("grad(): no gradient accumulated");
    return Tensor::from_data(node_->shape, node_->grad);
}

std::span<const double> Tensor::grad_data() const {
    if (!has_grad()) throw ValueError("grad_data(): no gradient accumulated");
    return {node_->grad.data(), node_->grad.size()};
}

void Tensor::zero_grad() {
    if (node_) node_->grad.clear();
}

Tensor Tensor::detach() const { return Tensor::from_data(node_->shape, node_->data); }

Tensor Tensor::reshaped(Shape shape) const {
    if (shape_numel(shape) != numel())
        throw ShapeError("reshaped: " + shape_str(shape) + " incompatible with " + shape_str(this->shape()));
    Tensor t = detach();
    t.node_->shape = std::move(shape);
    return t;
}

NoGradGuard::NoGradGuard() : prev_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = prev_; }

bool grad_enabled() { return g_grad_enabled; }

// ---------------------------------------------------------------------------
// Graph traversal
// ---------------------------------------------------------------------------

ComputeGraph ComputeGraph::from(const Tensor& root) {
    ComputeGraph g;
    g.root_ = root.node();
    if (!g.root_ || !g.root_->requires_grad) return g;

    struct Frame {
        NodePtr n;
        std::size_t next = 0;
    };
    std::unordered_set<TensorNode*> visited;
    std::vector<Frame> stack;
    stack.push_back({g.root_});
    visited.insert(g.root_.get());
    while (!stack.empty()) {
        Frame& f = stack.back();
        if (f.next < f.n->parents.size()) {
            NodePtr p = f.n->parents[f.next++];
            if (p->requires_grad && !visited.count(p.get())) {
                visited.insert(p.get());
                stack.push_back({std::move(p)});
            }
        } else {
            g.order_.push_back(f.n);
            stack.pop_back();
        }
    }
    return g;
}

void ComputeGraph::run_backward(bool retain) {
    if (!root_ || order_.empty()) return;
    // Op outputs hold scratch grads from any previous pass; only leaves
    // accumulate across passes.
    for (auto& n : order_)
        if (n->backward_fn) n->grad.clear();
    root_->grad.assign(root_->data.size(), 1.0);
    for (auto it = order_.rbegin(); it != order_.rend(); ++it) {
        TensorNode& n = **it;
        if (n.backward_fn && !n.grad.empty()) n.backward_fn(n);
    }
    if (!retain) {
        for (auto& n : order_) {
            n->backward_fn = nullptr;
            n->parents.clear();
        }
    }
}

void backward(const Tensor& loss, bool retain_graph) {
    if (!loss.defined() || loss.numel() != 1)
        throw ValueError("backward: loss must be a scalar tensor");
    ComputeGraph::from(loss).run_backward(retain_graph);
}

// ---------------------------------------------------------------------------
// Elementwise binary ops with restricted broadcasting
// ---------------------------------------------------------------------------

Tensor elementwise_binary(const Tensor& a, const Tensor& b, BinaryKind kind) {
    const Shape& sa = a.shape();
    const Shape& sb = b.shape();

    IdxMap ma, mb;
    const Shape* out_shape = &sa;
    if (sa == sb) {
        // direct
    } else if (b.numel() == 1) {
        mb.kind = IdxMap::zero;
    } else if (a.numel() == 1) {
        ma.kind = IdxMap::zero;
        out_shape = &sb;
    } else if (suffix_match(sa, sb)) {
        mb = {IdxMap::modulo, shape_numel(sb), 0};
    } else if (suffix_match(sb, sa)) {
        ma = {IdxMap::modulo, shape_numel(sa), 0};
        out_shape = &sb;
    } else if (channel_match(sa, sb)) {
        mb = {IdxMap::channel, sa[2] * sa[3], sa[1]};
    } else if (channel_match(sb, sa)) {
        ma = {IdxMap::channel, sb[2] * sb[3], sb[1]};
        out_shape = &sb;
    } else {
        throw ShapeError("cannot broadcast " + shape_str(sa) + " with " + shape_str(sb));
    }

    NodePtr out = make_node(*out_shape);
    const std::int64_t n = out->numel();
    const double* pa = a.data().data();
    const double* pb = b.data().data();
    double* po = out->data.data();
    switch (kind) {
    case BinaryKind::add:
        for (std::int64_t i = 0; i < n; ++i) po[i] = pa[ma(i)] + pb[mb(i)];
        break;
    case BinaryKind::sub:
        for (std::int64_t i = 0; i < n; ++i) po[i] = pa[ma(i)] - pb[mb(i)];
        break;
    case BinaryKind::mul:
        for (std::int64_t i = 0; i < n; ++i) po[i] = pa[ma(i)] * pb[mb(i)];
        break;
    case BinaryKind::div:
        for (std::int64_t i = 0; i < n; ++i) po[i] = pa[ma(i)] / pb[mb(i)];
        break;
    }

    if (track({&a, &b})) {
        NodePtr na = a.node(), nb = b.node();
        record(out, "binary", {na, nb}, [na, nb, ma, mb, kind, n](TensorNode& o) {
            const double* g = o.grad.data();
            const double* pa = na->data.data();
            const double* pb = nb->data.data();
            const bool wa = na->requires_grad, wb = nb->requires_grad;
            if (wa && na->grad.empty()) na->grad.assign(na->data.size(), 0.0);
            if (wb && nb->grad.empty()) nb->grad.assign(nb->data.size(), 0.0);
            for (std::int64_t i = 0; i < n; ++i) {
                const std::int64_t ia = ma(i), ib = mb(i);
                switch (kind) {
                case BinaryKind::add:
                    if (wa) na->grad[static_cast<std::size_t>(ia)] += g[i];
                    if (wb) nb->grad[static_cast<std::size_t>(ib)] += g[i];
                    break;
                case BinaryKind::sub:
                    if (wa) na->grad[static_cast<std::size_t>(ia)] += g[i];
                    if (wb) nb->grad[static_cast<std::size_t>(ib)] -= g[i];
                    break;
                case BinaryKind::mul:
                    if (wa) na->grad[static_cast<std::size_t>(ia)] += g[i] * pb[ib];
                    if (wb) nb->grad[static_cast<std::size_t>(ib)] += g[i] * pa[ia];
                    break;
                case BinaryKind::div:
                    if (wa) na->grad[static_cast<std::size_t>(ia)] += g[i] / pb[ib];
                    if (wb) nb->grad[static_cast<std::size_t>(ib)] -= g[i] * pa[ia] / (pb[ib] * pb[ib]);
                    break;
                }
            }
        });
    }
    return Tensor::wrap(out);
}

Tensor add(const Tensor& a, const Tensor& b) { return elementwise_binary(a, b, BinaryKind::add); }
Tensor sub(const Tensor& a, const Tensor& b) { return elementwise_binary(a, b, BinaryKind::sub); }
Tensor mul(const Tensor& a, const Tensor& b) { return elementwise_binary(a, b, BinaryKind::mul); }
Tensor div(const Tensor& a, const Tensor& b) { return elementwise_binary(a, b, BinaryKind::div); }

// ---------------------------------------------------------------------------
// Elementwise unary ops
// ---------------------------------------------------------------------------

namespace {

template <typename Fwd, typename Bwd>
Tensor unary_impl(const Tensor& x, const char* name, Fwd fwd, Bwd bwd) {
    NodePtr out = make_node(x.shape());
    const std::int64_t n = out->numel();
    const double* px = x.data().data();
    double* po = out->data.data();
    for (std::int64_t i = 0; i < n; ++i) po[i] = fwd(px[i]);
    if (track({&x})) {
        NodePtr nx = x.node();
        record(out, name, {nx}, [nx, bwd, n](TensorNode& o) {
            if (nx->grad.empty()) nx->grad.assign(nx->data.size(), 0.0);
            const double* g = o.grad.data();
            const double* px = nx->data.data();
            const double* py = o.data.data();
            for (std::int64_t i = 0; i < n; ++i)
                nx->grad[static_cast<std::size_t>(i)] += g[i] * bwd(px[i], py[i]);
        });
    }
    return Tensor::wrap(out);
}

double softplus_val(double x) {
    if (x > 30.0) return x;
    if (x < -30.0) return std::exp(x);
    return std::log1p(std::exp(x));
}

} // namespace

Tensor exp(const Tensor& x) {
    return unary_impl(x, "exp", [](double v) { return std::exp(v); },
                      [](double, double y) { return y; });
}

Tensor log(const Tensor& x) {
    return unary_impl(x, "log", [](double v) { return std::log(v); },
                      [](double v, double) { return 1.0 / v; });
}

Tensor log_abs(const Tensor& x) {
    return unary_impl(x, "log_abs", [](double v) { return std::log(std::abs(v)); },
                      [](double v, double) { return 1.0 / v; });
}

Tensor tanh(const Tensor& x) {
    return unary_impl(x, "tanh", [](double v) { return std::tanh(v); },
                      [](double, double y) { return 1.0 - y * y; });
}

Tensor relu(const Tensor& x) {
    return unary_impl(x, "relu", [](double v) { return v > 0.0 ? v : 0.0; },
                      [](double v, double) { return v > 0.0 ? 1.0 : 0.0; });
}

Tensor softplus(const Tensor& x) {
    return unary_impl(x, "softplus", softplus_val,
                      [](double v, double) { return 1.0 / (1.0 + std::exp(-v)); });
}

Tensor sqrt(const Tensor& x) {
    return unary_impl(x, "sqrt", [](double v) { return std::sqrt(v); },
                      [](double, double y) { return 0.5 / y; });
}

Tensor square(const Tensor& x) {
    return unary_impl(x, "square", [](double v) { return v * v; },
                      [](double v, double) { return 2.0 * v; });
}

// ---------------------------------------------------------------------------
// Reductions
// ---------------------------------------------------------------------------

Tensor sum(const Tensor& x) {
    NodePtr out = make_node(Shape{1});
    double acc = 0.0;
    for (double v : x.data()) acc += v;
    out->data[0] = acc;
    if (track({&x})) {
        NodePtr nx = x.node();
        record(out, "sum", {nx}, [nx](TensorNode& o) {
            if (nx->grad.empty()) nx->grad.assign(nx->data.size(), 0.0);
            const double g = o.grad[0];
            for (auto& v : nx->grad) v += g;
        });
    }
    return Tensor::wrap(out);
}

Tensor mean(const Tensor& x) {
    const double inv = 1.0 / static_cast<double>(x.numel());
    NodePtr out = make_node(Shape{1});
    double acc = 0.0;
    for (double v : x.data()) acc += v;
    out->data[0] = acc * inv;
    if (track({&x})) {
        NodePtr nx = x.node();
        record(out, "mean", {nx}, [nx, inv](TensorNode& o) {
            if (nx->grad.empty()) nx->grad.assign(nx->data.size(), 0.0);
            const double g = o.grad[0] * inv;
            for (auto& v : nx->grad) v += g;
        });
    }
    return Tensor::wrap(out);
}

namespace {

void require_nchw(const Tensor& x, const char* what) {
    if (x.rank() != 4) throw ShapeError(std::string(what) + " requires rank-4 NCHW input, got " + shape_str(x.shape()));
}

} // namespace

Tensor channel_mean(const Tensor& x) {
    require_nchw(x, "channel_mean");
    const Shape& s = x.shape();
    const std::int64_t N = s[0], C = s[1], HW = s[2] * s[3];
    const double inv = 1.0 / static_cast<double>(N * HW);
    NodePtr out = make_node(Shape{C});
    const double* px = x.data().data();
    for (std::int64_t n = 0; n < N; ++n)
        for (std::int64_t c = 0; c < C; ++c) {
            const double* p = px + (n * C + c) * HW;
            double acc = 0.0;
            for (std::int64_t i = 0; i < HW; ++i) acc += p[i];
            out->data[static_cast<std::size_t>(c)] += acc;
        }
    for (auto& v : out->data) v *= inv;
    if (track({&x})) {
        NodePtr nx = x.node();
        record(out, "channel_mean", {nx}, [nx, N, C, HW, inv](TensorNode& o) {
            if (nx->grad.empty()) nx->grad.assign(nx->data.size(), 0.0);
            for (std::int64_t n = 0; n < N; ++n)
                for (std::int64_t c = 0; c < C; ++c) {
                    const double g = o.grad[static_cast<std::size_t>(c)] * inv;
                    double* p = nx->grad.data() + (n * C + c) * HW;
                    for (std::int64_t i = 0; i < HW; ++i) p[i] += g;
                }
        });
    }
    return Tensor::wrap(out);
}

Tensor channel_std(const Tensor& x) {
    require_nchw(x, "channel_std");
    const Shape& s = x.shape();
    const std::int64_t N = s[0], C = s[1], HW = s[2] * s[3];
    const double count = static_cast<double>(N * HW);
    std::vector<double> mu(static_cast<std::size_t>(C), 0.0);
    const double* px = x.data().data();
    for (std::int64_t n = 0; n < N; ++n)
        for (std::int64_t c = 0; c < C; ++c) {
            const double* p = px + (n * C + c) * HW;
            for (std::int64_t i = 0; i < HW; ++i) mu[static_cast<std::size_t>(c)] += p[i];
        }
    for (auto& m : mu) m /= count;
    NodePtr out = make_node(Shape{C});
    for (std::int64_t n = 0; n < N; ++n)
        for (std::int64_t c = 0; c < C; ++c) {
            const double* p = px + (n * C + c) * HW;
            const double m = mu[static_cast<std::size_t>(c)];
            double acc = 0.0;
            for (std::int64_t i = 0; i < HW; ++i) acc += (p[i] - m) * (p[i] - m);
            out->data[static_cast<std::size_t>(c)] += acc;
        }
    for (auto& v : out->data) v = std::sqrt(v / count);
    if (track({&x})) {
        NodePtr nx = x.node();
        record(out, "channel_std", {nx}, [nx, mu, N, C, HW, count](TensorNode& o) {
            if (nx->grad.empty()) nx->grad.assign(nx->data.size(), 0.0);
            const double* px = nx->data.data();
            for (std::int64_t n = 0; n < N; ++n)
                for (std::int64_t c = 0; c < C; ++c) {
                    const double sigma = o.data[static_cast<std::size_t>(c)];
                    const double g = o.grad[static_cast<std::size_t>(c)] / (count * sigma);
                    const double m = mu[static_cast<std::size_t>(c)];
                    const double* p = px + (n * C + c) * HW;
                    double* gp = nx->grad.data() + (n * C + c) * HW;
                    for (std::int64_t i = 0; i < HW; ++i) gp[i] += g * (p[i] - m);
                }
        });
    }
    return Tensor::wrap(out);
}

Tensor reduce(const Tensor& x, ReduceKind kind) {
    switch (kind) {
    case ReduceKind::sum: return sum(x);
    case ReduceKind::mean: return mean(x);
    case ReduceKind::channel_mean: return channel_mean(x);
    case ReduceKind::channel_std: return channel_std(x);
    }
    throw ValueError("reduce: unknown kind");
}

Tensor sample_sum(const Tensor& x) {
    if (x.rank() < 2) throw ShapeError("sample_sum requires rank >= 2, got " + shape_str(x.shape()));
    const std::int64_t N = x.shape()[0];
    const std::int64_t inner = x.numel() / N;
    NodePtr out = make_node(Shape{N});
    const double* px = x.data().data();
    for (std::int64_t n = 0; n < N; ++n) {
        double acc = 0.0;
        const double* p = px + n * inner;
        for (std::int64_t i = 0; i < inner; ++i) acc += p[i];
        out->data[static_cast<std::size_t>(n)] = acc;
    }
    if (track({&x})) {
        NodePtr nx = x.node();
        record(out, "sample_sum", {nx}, [nx, N, inner](TensorNode& o) {
            if (nx->grad.empty()) nx->grad.assign(nx->data.size(), 0.0);
            for (std::int64_t n = 0; n < N; ++n) {
                const double g = o.grad[static_cast<std::size_t>(n)];
                double* p = nx->grad.data() + n * inner;
                for (std::int64_t i = 0; i < inner; ++i) p[i] += g;
            }
        });
    }
    return Tensor::wrap(out);
}

Tensor row_sum(const Tensor& x) { return sample_sum(x); }

// ---------------------------------------------------------------------------
// Linear algebra
// ---------------------------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[0])
        throw ShapeError("matmul: incompatible shapes " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
    const std::int64_t m = a.shape()[0], k = a.shape()[1], n = b.shape()[1];
    NodePtr out = make_node(Shape{m, n});
    const double* pa = a.data().data();
    const double* pb = b.data().data();
    double* po = out->data.data();
    for (std::int64_t i = 0; i < m; ++i)
        for (std::int64_t l = 0; l < k; ++l) {
            const double av = pa[i * k + l];
            const double* brow = pb + l * n;
            double* orow = po + i * n;
            for (std::int64_t j = 0; j < n; ++j) orow[j] += av * brow[j];
        }
    if (track({&a, &b})) {
        NodePtr na = a.node(), nb = b.node();
        record(out, "matmul", {na, nb}, [na, nb, m, k, n](TensorNode& o) {
            const double* g = o.grad.data();
            if (na->requires_grad) {
                if (na->grad.empty()) na->grad.assign(na->data.size(), 0.0);
                const double* pb = nb->data.data();
                for (std::int64_t i = 0; i < m; ++i)
                    for (std::int64_t l = 0; l < k; ++l) {
                        double acc = 0.0;
                        for (std::int64_t j = 0; j < n; ++j) acc += g[i * n + j] * pb[l * n + j];
                        na->grad[static_cast<std::size_t>(i * k + l)] += acc;
                    }
            }
            if (nb->requires_grad) {
                if (nb->grad.empty()) nb->grad.assign(nb->data.size(), 0.0);
                const double* pa = na->data.data();
                for (std::int64_t l = 0; l < k; ++l)
                    for (std::int64_t j = 0; j < n; ++j) {
                        double acc = 0.0;
                        for (std::int64_t i = 0; i < m; ++i) acc += pa[i * k + l] * g[i * n + j];
                        nb->grad[static_cast<std::size_t>(l * n + j)] += acc;
                    }
            }
        });
    }
    return Tensor::wrap(out);
}

Tensor transpose2d(const Tensor& a) {
    if (a.rank() != 2) throw ShapeError("transpose2d requires rank-2 input");
    const std::int64_t m = a.shape()[0], n = a.shape()[1];
    NodePtr out = make_node(Shape{n, m});
    const double* pa = a.data().data();
    for (std::int64_t i = 0; i < m; ++i)
        for (std::int64_t j = 0; j < n; ++j) out->data[static_cast<std::size_t>(j * m + i)] = pa[i * n + j];
    if (track({&a})) {
        NodePtr na = a.node();
        record(out, "transpose2d", {na}, [na, m, n](TensorNode& o) {
            if (na->grad.empty()) na->grad.assign(na->data.size(), 0.0);
            for (std::int64_t i = 0; i < m; ++i)
                for (std::int64_t j = 0; j < n; ++j)
                    na->grad[static_cast<std::size_t>(i * n + j)] += o.grad[static_cast<std::size_t>(j * m + i)];
        });
    }
    return Tensor::wrap(out);
}

Tensor outer(const Tensor& a, const Tensor& b) {
    if (a.rank() != 1 || b.rank() != 1) throw ShapeError("outer requires two rank-1 inputs");
    const std::int64_t n = a.shape()[0], d = b.shape()[0];
    NodePtr out = make_node(Shape{n, d});
    const double* pa = a.data().data();
    const double* pb = b.data().data();
    for (std::int64_t i = 0; i < n; ++i)
        for (std::int64_t j = 0; j < d; ++j) out->data[static_cast<std::size_t>(i * d + j)] = pa[i] * pb[j];
    if (track({&a, &b})) {
        NodePtr na = a.node(), nb = b.node();
        record(out, "outer", {na, nb}, [na, nb, n, d](TensorNode& o) {
            const double* g = o.grad.data();
            if (na->requires_grad) {
                if (na->grad.empty()) na->grad.assign(na->data.size(), 0.0);
                const double* pb = nb->data.data();
                for (std::int64_t i = 0; i < n; ++i) {
                    double acc = 0.0;
                    for (std::int64_t j = 0; j < d; ++j) acc += g[i * d + j] * pb[j];
                    na->grad[static_cast<std::size_t>(i)] += acc;
                }
            }
            if (nb->requires_grad) {
                if (nb->grad.empty()) nb->grad.assign(nb->data.size(), 0.0);
                const double* pa = na->data.data();
                for (std::int64_t j = 0; j < d; ++j) {
                    double acc = 0.0;
                    for (std::int64_t i = 0; i < n; ++i) acc += g[i * d + j] * pa[i];
                    nb->grad[static_cast<std::size_t>(j)] += acc;
                }
            }
        });
    }
    return Tensor::wrap(out);
}

Tensor scale_rows(const Tensor& x, const Tensor& s) {
    if (x.rank() < 2 || s.rank() != 1 || s.shape()[0] != x.shape()[0])
        throw ShapeError("scale_rows: need x[N,...] and s[N]");
    const std::int64_t N = x.shape()[0];
    const std::int64_t inner = x.numel() / N;
    NodePtr out = make_node(x.shape());
    const double* px = x.data().data();
    const double* ps = s.data().data();
    for (std::int64_t n = 0; n < N; ++n)
        for (std::int64_t i = 0; i < inner; ++i)
            out->data[static_cast<std::size_t>(n * inner + i)] = px[n * inner + i] * ps[n];
    if (track({&x, &s})) {
        NodePtr nx = x.node(), ns = s.node();
        record(out, "scale_rows", {nx, ns}, [nx, ns, N, inner](TensorNode& o) {
            const double* g = o.grad.data();
            if (nx->requires_grad) {
                if (nx->grad.empty()) nx->grad.assign(nx->data.size(), 0.0);
                const double* ps = ns->data.data();
                for (std::int64_t n = 0; n < N; ++n)
                    for (std::int64_t i = 0; i < inner; ++i)
                        nx->grad[static_cast<std::size_t>(n * inner + i)] += g[n * inner + i] * ps[n];
            }
            if (ns->requires_grad) {
                if (ns->grad.empty()) ns->grad.assign(ns->data.size(), 0.0);
                const double* px = nx->data.data();
                for (std::int64_t n = 0; n < N; ++n) {
                    double acc = 0.0;
                    for (std::int64_t i = 0; i < inner; ++i) acc += g[n * inner + i] * px[n * inner + i];
                    ns->grad[static_cast<std::size_t>(n)] += acc;
                }
            }
        });
    }
    return Tensor::wrap(out);
}

// ---------------------------------------------------------------------------
// Convolution
// ---------------------------------------------------------------------------

Tensor conv2d(const Tensor& input, const Tensor& kernel, std::int64_t padding) {
    require_nchw(input, "conv2d input");
    if (kernel.rank() != 4) throw ShapeError("conv2d kernel must be OIHW");
    const Shape& si = input.shape();
    const Shape& sk = kernel.shape();
    const std::int64_t N = si[0], I = si[1], H = si[2], W = si[3];
    const std::int64_t O = sk[0], KI = sk[1], KH = sk[2], KW = sk[3];
    if (I != KI)
        throw ShapeError("conv2d: input channels " + std::to_string(I) + " != kernel channels " + std::to_string(KI));
    if (KH % 2 == 0 || KW % 2 == 0) throw ValueError("conv2d: kernel spatial extents must be odd");
    const std::int64_t OH = H + 2 * padding - KH + 1;
    const std::int64_t OW = W + 2 * padding - KW + 1;
    if (OH <= 0 || OW <= 0) throw ShapeError("conv2d: output extent would be non-positive");

    NodePtr out = make_node(Shape{N, O, OH, OW});
    const double* px = input.data().data();
    const double* pk = kernel.data().data();
    double* po = out->data.data();
    for (std::int64_t n = 0; n < N; ++n)
        for (std::int64_t o = 0; o < O; ++o)
            for (std::int64_t i = 0; i < I; ++i) {
                const double* kbase = pk + ((o * I + i) * KH) * KW;
                const double* xbase = px + ((n * I + i) * H) * W;
                double* obase = po + ((n * O + o) * OH) * OW;
                for (std::int64_t oy = 0; oy < OH; ++oy)
                    for (std::int64_t ky = 0; ky < KH; ++ky) {
                        const std::int64_t iy = oy + ky - padding;
                        if (iy < 0 || iy >= H) continue;
                        for (std::int64_t kx = 0; kx < KW; ++kx) {
                            const double kv = kbase[ky * KW + kx];
                            if (kv == 0.0) continue;
                            const std::int64_t x0 = std::max<std::int64_t>(0, padding - kx);
                            const std::int64_t x1 = std::min<std::int64_t>(OW, W + padding - kx);
                            const double* xrow = xbase + iy * W + (x0 + kx - padding);
                            double* orow = obase + oy * OW + x0;
                            for (std::int64_t ox = x0; ox < x1; ++ox) *orow++ += kv * *xrow++;
                        }
                    }
            }

    if (track({&input, &kernel})) {
        NodePtr nx = input.node(), nk = kernel.node();
        record(out, "conv2d", {nx, nk}, [nx, nk, N, I, H, W, O, KH, KW, OH, OW, padding](TensorNode& o) {
            const double* g = o.grad.data();
            if (nx->requires_grad) {
                if (nx->grad.empty()) nx->grad.assign(nx->data.size(), 0.0);
                const double* pk = nk->data.data();
                for (std::int64_t n = 0; n < N; ++n)
                    for (std::int64_t oc = 0; oc < O; ++oc)
                        for (std::int64_t i = 0; i < I; ++i) {
                            const double* kbase = pk + ((oc * I + i) * KH) * KW;
                            const double* gbase = g + ((n * O + oc) * OH) * OW;
                            double* xg = nx->grad.data() + ((n * I + i) * H) * W;
                            for (std::int64_t oy = 0; oy < OH; ++oy)
                                for (std::int64_t ky = 0; ky < KH; ++ky) {
                                    const std::int64_t iy = oy + ky - padding;
                                    if (iy < 0 || iy >= H) continue;
                                    for (std::int64_t kx = 0; kx < KW; ++kx) {
                                        const double kv = kbase[ky * KW + kx];
                                        if (kv == 0.0) continue;
                                        const std::int64_t x0 = std::max<std::int64_t>(0, padding - kx);
                                        const std::int64_t x1 = std::min<std::int64_t>(OW, W + padding - kx);
                                        const double* grow = gbase + oy * OW + x0;
                                        double* xrow = xg + iy * W + (x0 + kx - padding);
                                        for (std::int64_t ox = x0; ox < x1; ++ox) *xrow++ += kv * *grow++;
                                    }
                                }
                        }
            }
            if (nk->requires_grad) {
                if (nk->grad.empty()) nk->grad.assign(nk->data.size(), 0.0);
                const double* px = nx->data.data();
                for (std::int64_t n = 0; n < N; ++n)
                    for (std::int64_t oc = 0; oc < O; ++oc)
                        for (std::int64_t i = 0; i < I; ++i) {
                            double* kg = nk->grad.data() + ((oc * I + i) * KH) * KW;
                            const double* gbase = g + ((n * O + oc) * OH) * OW;
                            const double* xbase = px + ((n * I + i) * H) * W;
                            for (std::int64_t ky = 0; ky < KH; ++ky)
                                for (std::int64_t kx = 0; kx < KW; ++kx) {
                                    double acc = 0.0;
                                    for (std::int64_t oy = 0; oy < OH; ++oy) {
                                        const std::int64_t iy = oy + ky - padding;
                                        if (iy < 0 || iy >= H) continue;
                                        const std::int64_t x0 = std::max<std::int64_t>(0, padding - kx);
                                        const std::int64_t x1 = std::min<std::int64_t>(OW, W + padding - kx);
                                        const double* grow = gbase + oy * OW + x0;
                                        const double* xrow = xbase + iy * W + (x0 + kx - padding);
                                        for (std::int64_t ox = x0; ox < x1; ++ox) acc += *grow++ * *xrow++;
                                    }
                                    kg[ky * KW + kx] += acc;
                                }
                        }
            }
        });
    }
    return Tensor::wrap(out);
}

// ---------------------------------------------------------------------------
// Channel plumbing
// ---------------------------------------------------------------------------

Tensor concat_channels(const Tensor& a, const Tensor& b) {
    require_nchw(a, "concat_channels");
    require_nchw(b, "concat_channels");
    const Shape& sa = a.shape();
    const Shape& sb = b.shape();
    if (sa[0] != sb[0] || sa[2] != sb[2] || sa[3] != sb[3])
        throw ShapeError("concat_channels: mismatched batch/spatial " + shape_str(sa) + " vs " + shape_str(sb));
    const std::int64_t N = sa[0], Ca = sa[1], Cb = sb[1], HW = sa[2] * sa[3];
    NodePtr out = make_node(Shape{N, Ca + Cb, sa[2], sa[3]});
    const double* pa = a.data().data();
    const double* pb = b.data().data();
    for (std::int64_t n = 0; n < N; ++n) {
        std::copy_n(pa + n * Ca * HW, Ca * HW, out->data.data() + n * (Ca + Cb) * HW);
        std::copy_n(pb + n * Cb * HW, Cb * HW, out->data.data() + n * (Ca + Cb) * HW + Ca * HW);
    }
    if (track({&a, &b})) {
        NodePtr na = a.node(), nb = b.node();
        record(out, "concat_channels", {na, nb}, [na, nb, N, Ca, Cb, HW](TensorNode& o) {
            const double* g = o.grad.data();
            if (na->requires_grad) {
                if (na->grad.empty()) na->grad.assign(na->data.size(), 0.0);
                for (std::int64_t n = 0; n < N; ++n)
                    for (std::int64_t i = 0; i < Ca * HW; ++i)
                        na->grad[static_cast<std::size_t>(n * Ca * HW + i)] += g[n * (Ca + Cb) * HW + i];
            }
            if (nb->requires_grad) {
                if (nb->grad.empty()) nb->grad.assign(nb->data.size(), 0.0);
                for (std::int64_t n = 0; n < N; ++n)
                    for (std::int64_t i = 0; i < Cb * HW; ++i)
                        nb->grad[static_cast<std::size_t>(n * Cb * HW + i)] += g[n * (Ca + Cb) * HW + Ca * HW + i];
            }
        });
    }
    return Tensor::wrap(out);
}

Tensor gather_channels(const Tensor& x, const std::vector<std::int64_t>& idx) {
    require_nchw(x, "gather_channels");
    const Shape& s = x.shape();
    const std::int64_t N = s[0], C = s[1], HW = s[2] * s[3];
    const std::int64_t K = static_cast<std::int64_t>(idx.size());
    for (auto c : idx)
        if (c < 0 || c >= C) throw ShapeError("gather_channels: index out of range");
    NodePtr out = make_node(Shape{N, K, s[2], s[3]});
    const double* px = x.data().data();
    for (std::int64_t n = 0; n < N; ++n)
        for (std::int64_t j = 0; j < K; ++j)
            std::copy_n(px + (n * C + idx[static_cast<std::size_t>(j)]) * HW, HW,
                        out->data.data() + (n * K + j) * HW);
    if (track({&x})) {
        NodePtr nx = x.node();
        record(out, "gather_channels", {nx}, [nx, idx, N, C, HW, K](TensorNode& o) {
            if (nx->grad.empty()) nx->grad.assign(nx->data.size(), 0.0);
            const double* g = o.grad.data();
            for (std::int64_t n = 0; n < N; ++n)
                for (std::int64_t j = 0; j < K; ++j) {
                    double* dst = nx->grad.data() + (n * C + idx[static_cast<std::size_t>(j)]) * HW;
                    const double* src = g + (n * K + j) * HW;
                    for (std::int64_t i = 0; i < HW; ++i) dst[i] += src[i];
                }
        });
    }
    return Tensor::wrap(out);
}

Tensor combine_channels(const Tensor& a, const std::vector<std::int64_t>& a_idx,
                        const Tensor& b, const std::vector<std::int64_t>& b_idx) {
    require_nchw(a, "combine_channels");
    require_nchw(b, "combine_channels");
    const Shape& sa = a.shape();
    const Shape& sb = b.shape();
    if (sa[0] != sb[0] || sa[2] != sb[2] || sa[3] != sb[3])
        throw ShapeError("combine_channels: mismatched batch/spatial");
    if (sa[1] != static_cast<std::int64_t>(a_idx.size()) || sb[1] != static_cast<std::int64_t>(b_idx.size()))
        throw ShapeError("combine_channels: index count != channel count");
    const std::int64_t C = sa[1] + sb[1];
    std::vector<std::int8_t> seen(static_cast<std::size_t>(C), 0);
    for (auto c : a_idx) seen.at(static_cast<std::size_t>(c))++;
    for (auto c : b_idx) seen.at(static_cast<std::size_t>(c))++;
    for (auto v : seen)
        if (v != 1) throw ShapeError("combine_channels: indices must partition [0,C)");

    const std::int64_t N = sa[0], HW = sa[2] * sa[3];
    NodePtr out = make_node(Shape{N, C, sa[2], sa[3]});
    const double* pa = a.data().data();
    const double* pb = b.data().data();
    for (std::int64_t n = 0; n < N; ++n) {
        for (std::size_t j = 0; j < a_idx.size(); ++j)
            std::copy_n(pa + (n * sa[1] + static_cast<std::int64_t>(j)) * HW, HW,
                        out->data.data() + (n * C + a_idx[j]) * HW);
        for (std::size_t j = 0; j < b_idx.size(); ++j)
            std::copy_n(pb + (n * sb[1] + static_cast<std::int64_t>(j)) * HW, HW,
                        out->data.data() + (n * C + b_idx[j]) * HW);
    }
    if (track({&a, &b})) {
        NodePtr na = a.node(), nb = b.node();
        const std::int64_t Ca = sa[1], Cb = sb[1];
        record(out, "combine_channels", {na, nb}, [na, nb, a_idx, b_idx, N, C, Ca, Cb, HW](TensorNode& o) {
            const double* g = o.grad.data();
            if (na->requires_grad) {
                if (na->grad.empty()) na->grad.assign(na->data.size(), 0.0);
                for (std::int64_t n = 0; n < N; ++n)
                    for (std::size_t j = 0; j < a_idx.size(); ++j) {
                        double* dst = na->grad.data() + (n * Ca + static_cast<std::int64_t>(j)) * HW;
                        const double* src = g + (n * C + a_idx[j]) * HW;
                        for (std::int64_t i = 0; i < HW; ++i) dst[i] += src[i];
                    }
            }
            if (nb->requires_grad) {
                if (nb->grad.empty()) nb->grad.assign(nb->data.size(), 0.0);
                for (std::int64_t n = 0; n < N; ++n)
                    for (std::size_t j = 0; j < b_idx.size(); ++j) {
                        double* dst = nb->grad.data() + (n * Cb + static_cast<std::int64_t>(j)) * HW;
                        const double* src = g + (n * C + b_idx[j]) * HW;
                        for (std::int64_t i = 0; i < HW; ++i) dst[i] += src[i];
                    }
            }
        });
    }
    return Tensor::wrap(out);
}

// ---------------------------------------------------------------------------
// Space-to-depth
// ---------------------------------------------------------------------------

namespace {

// Flat index map for squeeze: out[n, 4c + (dy*2+dx), y, x] = in[n, c, 2y+dy, 2x+dx].
std::vector<std::int64_t> squeeze_source_index(std::int64_t N, std::int64_t C, std::int64_t H, std::int64_t W) {
    const std::int64_t OH = H / 2, OW = W / 2;
    std::vector<std::int64_t> src(static_cast<std::size_t>(N * C * H * W));
    std::int64_t o = 0;
    for (std::int64_t n = 0; n < N; ++n)
        for (std::int64_t c = 0; c < C; ++c)
            for (std::int64_t k = 0; k < 4; ++k) {
                const std::int64_t dy = k / 2, dx = k % 2;
                for (std::int64_t y = 0; y < OH; ++y)
                    for (std::int64_t x = 0; x < OW; ++x)
                        src[static_cast<std::size_t>(o++)] = ((n * C + c) * H + 2 * y + dy) * W + 2 * x + dx;
            }
    return src;
}

Tensor permute_op(const Tensor& x, Shape out_shape, std::vector<std::int64_t> src, const char* name) {
    NodePtr out = make_node(std::move(out_shape));
    const double* px = x.data().data();
    for (std::size_t i = 0; i < src.size(); ++i) out->data[i] = px[src[i]];
    if (track({&x})) {
        NodePtr nx = x.node();
        record(out, name, {nx}, [nx, src = std::move(src)](TensorNode& o) {
            if (nx->grad.empty()) nx->grad.assign(nx->data.size(), 0.0);
            for (std::size_t i = 0; i < src.size(); ++i)
                nx->grad[static_cast<std::size_t>(src[i])] += o.grad[i];
        });
    }
    return Tensor::wrap(out);
}

} // namespace

Tensor squeeze2x2(const Tensor& x) {
    require_nchw(x, "squeeze2x2");
    const Shape& s = x.shape();
    if (s[2] % 2 != 0 || s[3] % 2 != 0)
        throw ShapeError("squeeze2x2: spatial extents must be even, got " + shape_str(s));
    return permute_op(x, Shape{s[0], s[1] * 4, s[2] / 2, s[3] / 2},
                      squeeze_source_index(s[0], s[1], s[2], s[3]), "squeeze2x2");
}

Tensor unsqueeze2x2(const Tensor& x) {
    require_nchw(x, "unsqueeze2x2");
    const Shape& s = x.shape();
    if (s[1] % 4 != 0) throw ShapeError("unsqueeze2x2: channel count must be divisible by 4");
    const std::int64_t N = s[0], C = s[1] / 4, H = s[2] * 2, W = s[3] * 2;
    // Invert the squeeze map: src[dst_index_in_image_space] = flat squeezed index.
    std::vector<std::int64_t> fwd = squeeze_source_index(N, C, H, W);
    std::vector<std::int64_t> src(fwd.size());
    for (std::size_t i = 0; i < fwd.size(); ++i) src[static_cast<std::size_t>(fwd[i])] = static_cast<std::int64_t>(i);
    return permute_op(x, Shape{N, C, H, W}, std::move(src), "unsqueeze2x2");
}

Tensor reshape(const Tensor& x, Shape shape) {
    if (shape_numel(shape) != x.numel())
        throw ShapeError("reshape: " + shape_str(shape) + " incompatible with " + shape_str(x.shape()));
    NodePtr out = make_node(std::move(shape));
    std::copy(x.data().begin(), x.data().end(), out->data.begin());
    if (track({&x})) {
        NodePtr nx = x.node();
        record(out, "reshape", {nx}, [nx](TensorNode& o) { nx->accumulate(o.grad.data(), o.numel()); });
    }
    return Tensor::wrap(out);
}

Tensor scatter_fixed(const Tensor& values, const std::vector<std::int64_t>& positions, Shape out_shape) {
    if (values.numel() != static_cast<std::int64_t>(positions.size()))
        throw ShapeError("scatter_fixed: value/position count mismatch");
    NodePtr out = make_node(std::move(out_shape));
    const std::int64_t total = out->numel();
    for (auto p : positions)
        if (p < 0 || p >= total) throw ShapeError("scatter_fixed: position out of range");
    const double* pv = values.data().data();
    for (std::size_t i = 0; i < positions.size(); ++i)
        out->data[static_cast<std::size_t>(positions[i])] = pv[i];
    if (track({&values})) {
        NodePtr nv = values.node();
        record(out, "scatter_fixed", {nv}, [nv, positions](TensorNode& o) {
            if (nv->grad.empty()) nv->grad.assign(nv->data.size(), 0.0);
            for (std::size_t i = 0; i < positions.size(); ++i)
                nv->grad[i] += o.grad[static_cast<std::size_t>(positions[i])];
        });
    }
    return Tensor::wrap(out);
}

Tensor repeat_scalar(const Tensor& s, std::int64_t n) {
    if (s.numel() != 1) throw ShapeError("repeat_scalar: input must be a single element");
    NodePtr out = make_node(Shape{n});
    std::fill(out->data.begin(), out->data.end(), s.data()[0]);
    if (track({&s})) {
        NodePtr ns = s.node();
        record(out, "repeat_scalar", {ns}, [ns](TensorNode& o) {
            if (ns->grad.empty()) ns->grad.assign(1, 0.0);
            double acc = 0.0;
            for (double g : o.grad) acc += g;
            ns->grad[0] += acc;
        });
    }
    return Tensor::wrap(out);
}

} // namespace flowood
