#pragma once

// Dense 64-bit tensors and a per-pass reverse-mode tape.
//
// A Graph records every operation in insertion order. backward() walks the
// tape once in reverse, so an operation's gradient closure runs after all of
// its consumers have contributed. Parameters enter the tape as aliasing leaves
// (Graph::param); their gradients are accumulated into Tensor::grad() when the
// tensor is marked requires_grad.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <deque>
#include <functional>
#include <initializer_list>
#include <memory>
#include <numeric>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "l3prune/error.hpp"

namespace l3p {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_size(const Shape& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) os << ", ";
        os << shape[i];
    }
    os << ']';
    return os.str();
}

class Tensor {
public:
    Tensor() : data_(1, 0.0) {}
    explicit Tensor(Shape shape, double fill = 0.0)
        : shape_(std::move(shape)), data_(shape_size(shape_), fill) {}
    Tensor(Shape shape, std::vector<double> data) : shape_(std::move(shape)), data_(std::move(data)) {
        if (shape_size(shape_) != data_.size()) {
            throw ShapeError("tensor data length " + std::to_string(data_.size()) +
                             " does not match shape " + shape_str(shape_));
        }
    }

    static Tensor scalar(double v) { return Tensor(Shape{}, std::vector<double>{v}); }

    const Shape& shape() const noexcept { return shape_; }
    std::size_t rank() const noexcept { return shape_.size(); }
    std::size_t dim(std::size_t i) const { return shape_.at(i); }
    std::size_t size() const noexcept { return data_.size(); }

    std::span<double> data() noexcept { return data_; }
    std::span<const double> data() const noexcept { return data_; }
    double& operator[](std::size_t i) { return data_[i]; }
    double operator[](std::size_t i) const { return data_[i]; }
    double item() const {
        if (data_.size() != 1) throw ShapeError("item() on tensor of shape " + shape_str(shape_));
        return data_[0];
    }

    // Row-major 2-D access.
    double& at(std::size_t r, std::size_t c) { return data_[r * shape_.back() + c]; }
    double at(std::size_t r, std::size_t c) const { return data_[r * shape_.back() + c]; }

    bool requires_grad() const noexcept { return requires_grad_; }
    void set_requires_grad(bool on) {
        requires_grad_ = on;
        if (!on) grad_.reset();
    }

    bool has_grad() const noexcept { return grad_.has_value(); }
    std::span<const double> grad() const {
        if (!grad_) throw NumericError("tensor has no gradient");
        return *grad_;
    }
    std::vector<double>& grad_storage() {
        if (!grad_) grad_.emplace(data_.size(), 0.0);
        return *grad_;
    }
    void zero_grad() { grad_.reset(); }

    void reshape(Shape shape) {
        if (shape_size(shape) != data_.size()) {
            throw ShapeError("cannot reshape " + shape_str(shape_) + " to " + shape_str(shape));
        }
        shape_ = std::move(shape);
    }

    bool all_finite() const {
        return std::all_of(data_.begin(), data_.end(), [](double x) { return std::isfinite(x); });
    }

    // Bitwise comparison of shape and values.
    friend bool operator==(const Tensor& a, const Tensor& b) {
        return a.shape_ == b.shape_ && a.data_ == b.data_;
    }

private:
    Shape shape_;
    std::vector<double> data_;
    bool requires_grad_ = false;
    std::optional<std::vector<double>> grad_;
};

class Graph;

struct Var {
    Graph* graph = nullptr;
    std::size_t id = 0;

    const Tensor& value() const;
    const Shape& shape() const { return value().shape(); }
};

class Graph {
public:
    using BackwardFn = std::function<void(Graph&, std::size_t)>;

    Graph() = default;
    Graph(const Graph&) = delete;
    Graph& operator=(const Graph&) = delete;

    // Aliasing leaf. The tensor must outlive the graph.
    Var param(Tensor& t) {
        Node node;
        node.external = &t;
        node.grad_target = t.requires_grad() ? &t : nullptr;
        node.needs_grad = t.requires_grad();
        return push(std::move(node));
    }

    // Aliasing leaf that never receives gradient.
    Var constant(const Tensor& t) {
        Node node;
        node.external = &t;
        return push(std::move(node));
    }

    // Owned leaf; gradient readable through grad() when t.requires_grad().
    Var input(Tensor t) {
        check_finite(t, "input");
        Node node;
        node.needs_grad = t.requires_grad();
        node.owned = std::move(t);
        return push(std::move(node));
    }

    const Tensor& value(Var v) const { return nodes_.at(v.id).value(); }
    bool needs_grad(Var v) const { return nodes_.at(v.id).needs_grad; }
    bool needs_grad(std::size_t id) const { return nodes_[id].needs_grad; }
    std::size_t node_count() const noexcept { return nodes_.size(); }

    // Gradient of the last backward() with respect to v, if any reached it.
    std::optional<Tensor> grad(Var v) const {
        const Node& n = nodes_.at(v.id);
        if (n.grad.empty()) return std::nullopt;
        return Tensor(n.value().shape(), n.grad);
    }

    void backward(Var loss) {
        const Tensor& out = value(loss);
        if (out.size() != 1) {
            throw ShapeError("backward() needs a scalar loss, got shape " + shape_str(out.shape()));
        }
        if (backward_done_) {
            throw NumericError("backward() already ran on this graph; call zero_grad() first");
        }
        backward_done_ = true;
        if (!nodes_[loss.id].needs_grad) return;
        grad_buffer(loss.id)[0] = 1.0;
        for (std::size_t id = loss.id + 1; id-- > 0;) {
            Node& n = nodes_[id];
            if (!n.needs_grad || n.grad.empty()) continue;
            if (n.backward) n.backward(*this, id);
            if (n.grad_target) {
                auto& g = n.grad_target->grad_storage();
                for (std::size_t i = 0; i < g.size(); ++i) g[i] += n.grad[i];
            }
        }
    }

    void zero_grad() {
        for (Node& n : nodes_) n.grad.clear();
        backward_done_ = false;
    }

    // Operation authoring.
    Var record(Tensor value, std::initializer_list<Var> parents, BackwardFn fn) {
        check_finite(value, "operation output");
        Node node;
        node.owned = std::move(value);
        for (Var p : parents) node.needs_grad = node.needs_grad || nodes_.at(p.id).needs_grad;
        if (node.needs_grad) node.backward = std::move(fn);
        return push(std::move(node));
    }

    std::span<double> grad_buffer(std::size_t id) {
        Node& n = nodes_[id];
        if (n.grad.empty()) n.grad.assign(n.value().size(), 0.0);
        return n.grad;
    }

    std::span<const double> out_grad(std::size_t id) const { return nodes_[id].grad; }

private:
    struct Node {
        Tensor owned;
        const Tensor* external = nullptr;
        Tensor* grad_target = nullptr;
        std::vector<double> grad;
        bool needs_grad = false;
        BackwardFn backward;

        const Tensor& value() const { return external ? *external : owned; }
    };

    static void check_finite(const Tensor& t, std::string_view what) {
        if (!t.all_finite()) {
            throw NumericError("non-finite value in " + std::string(what) + " of shape " +
                               shape_str(t.shape()));
        }
    }

    Var push(Node node) {
        nodes_.push_back(std::move(node));
        return Var{this, nodes_.size() - 1};
    }

    std::deque<Node> nodes_;
    bool backward_done_ = false;
};

inline const Tensor& Var::value() const { return graph->value(*this); }

namespace detail {

inline void require_same_graph(Var a, Var b) {
    if (a.graph != b.graph) throw NumericError("operands belong to different graphs");
}

inline void require_same_shape(const Tensor& a, const Tensor& b, std::string_view op) {
    if (a.shape() != b.shape()) {
        throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
    }
}

inline std::size_t leading_rows(const Tensor& t) {
    if (t.rank() == 0) throw ShapeError("expected at least one dimension");
    return t.size() / t.shape().back();
}

// Y[r, o] = sum_i X[r, i] W[o, i]
inline void linear_kernel(std::span<const double> x, std::span<const double> w, std::span<double> y,
                          std::size_t rows, std::size_t in, std::size_t out) {
    for (std::size_t r = 0; r < rows; ++r) {
        const double* xr = x.data() + r * in;
        double* yr = y.data() + r * out;
        for (std::size_t o = 0; o < out; ++o) {
            const double* wo = w.data() + o * in;
            double acc = 0.0;
            for (std::size_t i = 0; i < in; ++i) acc += xr[i] * wo[i];
            yr[o] = acc;
        }
    }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise

inline Var add(Var a, Var b) {
    detail::require_same_graph(a, b);
    const Tensor& av = a.value();
    const Tensor& bv = b.value();
    detail::require_same_shape(av, bv, "add");
    Tensor out(av.shape());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] + bv[i];
    return a.graph->record(std::move(out), {a, b}, [a, b](Graph& g, std::size_t self) {
        auto dy = g.out_grad(self);
        for (Var p : {a, b}) {
            if (!g.needs_grad(p)) continue;
            auto dp = g.grad_buffer(p.id);
            for (std::size_t i = 0; i < dy.size(); ++i) dp[i] += dy[i];
        }
    });
}

inline Var mul(Var a, Var b) {
    detail::require_same_graph(a, b);
    const Tensor& av = a.value();
    const Tensor& bv = b.value();
    detail::require_same_shape(av, bv, "mul");
    Tensor out(av.shape());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * bv[i];
    return a.graph->record(std::move(out), {a, b}, [a, b](Graph& g, std::size_t self) {
        auto dy = g.out_grad(self);
        const Tensor& av = g.value(a);
        const Tensor& bv = g.value(b);
        if (g.needs_grad(a)) {
            auto da = g.grad_buffer(a.id);
            for (std::size_t i = 0; i < dy.size(); ++i) da[i] += dy[i] * bv[i];
        }
        if (g.needs_grad(b)) {
            auto db = g.grad_buffer(b.id);
            for (std::size_t i = 0; i < dy.size(); ++i) db[i] += dy[i] * av[i];
        }
    });
}

inline Var scale(Var a, double c) {
    const Tensor& av = a.value();
    Tensor out(av.shape());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = c * av[i];
    return a.graph->record(std::move(out), {a}, [a, c](Graph& g, std::size_t self) {
        auto dy = g.out_grad(self);
        auto da = g.grad_buffer(a.id);
        for (std::size_t i = 0; i < dy.size(); ++i) da[i] += c * dy[i];
    });
}

inline Var square(Var a) {
    const Tensor& av = a.value();
    Tensor out(av.shape());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * av[i];
    return a.graph->record(std::move(out), {a}, [a](Graph& g, std::size_t self) {
        auto dy = g.out_grad(self);
        const Tensor& av = g.value(a);
        auto da = g.grad_buffer(a.id);
        for (std::size_t i = 0; i < dy.size(); ++i) da[i] += 2.0 * av[i] * dy[i];
    });
}

// x * sigmoid(x)
inline Var silu(Var a) {
    const Tensor& av = a.value();
    Tensor out(av.shape());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] / (1.0 + std::exp(-av[i]));
    return a.graph->record(std::move(out), {a}, [a](Graph& g, std::size_t self) {
        auto dy = g.out_grad(self);
        const Tensor& av = g.value(a);
        auto da = g.grad_buffer(a.id);
        for (std::size_t i = 0; i < dy.size(); ++i) {
            const double s = 1.0 / (1.0 + std::exp(-av[i]));
            da[i] += dy[i] * s * (1.0 + av[i] * (1.0 - s));
        }
    });
}

// ---------------------------------------------------------------------------
// Reductions

inline Var sum(Var a) {
    const Tensor& av = a.value();
    double acc = 0.0;
    for (double x : av.data()) acc += x;
    return a.graph->record(Tensor::scalar(acc), {a}, [a](Graph& g, std::size_t self) {
        const double dy = g.out_grad(self)[0];
        for (double& d : g.grad_buffer(a.id)) d += dy;
    });
}

inline Var mean(Var a) { return scale(sum(a), 1.0 / static_cast<double>(a.value().size())); }

// ---------------------------------------------------------------------------
// Linear algebra

inline Var matmul(Var a, Var b) {
    detail::require_same_graph(a, b);
    const Tensor& av = a.value();
    const Tensor& bv = b.value();
    if (av.rank() != 2 || bv.rank() != 2 || av.dim(1) != bv.dim(0)) {
        throw ShapeError("matmul: dimension mismatch " + shape_str(av.shape()) + " x " +
                         shape_str(bv.shape()));
    }
    const std::size_t m = av.dim(0), k = av.dim(1), n = bv.dim(1);
    Tensor out(Shape{m, n});
    for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t p = 0; p < k; ++p) {
            const double aip = av[i * k + p];
            for (std::size_t j = 0; j < n; ++j) out[i * n + j] += aip * bv[p * n + j];
        }
    }
    return a.graph->record(std::move(out), {a, b}, [a, b, m, k, n](Graph& g, std::size_t self) {
        auto dy = g.out_grad(self);
        const Tensor& av = g.value(a);
        const Tensor& bv = g.value(b);
        if (g.needs_grad(a)) {
            auto da = g.grad_buffer(a.id);
            for (std::size_t i = 0; i < m; ++i)
                for (std::size_t p = 0; p < k; ++p) {
                    double acc = 0.0;
                    for (std::size_t j = 0; j < n; ++j) acc += dy[i * n + j] * bv[p * n + j];
                    da[i * k + p] += acc;
                }
        }
        if (g.needs_grad(b)) {
            auto db = g.grad_buffer(b.id);
            for (std::size_t i = 0; i < m; ++i)
                for (std::size_t p = 0; p < k; ++p) {
                    const double aip = av[i * k + p];
                    for (std::size_t j = 0; j < n; ++j) db[p * n + j] += aip * dy[i * n + j];
                }
        }
    });
}

inline Var transpose(Var a) {
    const Tensor& av = a.value();
    if (av.rank() != 2) throw ShapeError("transpose: expected rank 2, got " + shape_str(av.shape()));
    const std::size_t r = av.dim(0), c = av.dim(1);
    Tensor out(Shape{c, r});
    for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) out[j * r + i] = av[i * c + j];
    return a.graph->record(std::move(out), {a}, [a, r, c](Graph& g, std::size_t self) {
        auto dy = g.out_grad(self);
        auto da = g.grad_buffer(a.id);
        for (std::size_t i = 0; i < r; ++i)
            for (std::size_t j = 0; j < c; ++j) da[i * c + j] += dy[j * r + i];
    });
}

// x[..., in] times w[out, in] transposed, giving [..., out]. Rows are computed
// independently, so a row's result never depends on how many rows are present.
inline Var linear(Var x, Var w) {
    detail::require_same_graph(x, w);
    const Tensor& xv = x.value();
    const Tensor& wv = w.value();
    if (wv.rank() != 2 || xv.rank() == 0 || xv.shape().back() != wv.dim(1)) {
        throw ShapeError("linear: dimension mismatch " + shape_str(xv.shape()) + " x " +
                         shape_str(wv.shape()) + "^T");
    }
    const std::size_t rows = detail::leading_rows(xv), in = wv.dim(1), out = wv.dim(0);
    Shape shape = xv.shape();
    shape.back() = out;
    Tensor y(std::move(shape));
    detail::linear_kernel(xv.data(), wv.data(), y.data(), rows, in, out);
    return x.graph->record(std::move(y), {x, w}, [x, w, rows, in, out](Graph& g, std::size_t self) {
        auto dy = g.out_grad(self);
        const Tensor& xv = g.value(x);
        const Tensor& wv = g.value(w);
        if (g.needs_grad(x)) {
            auto dx = g.grad_buffer(x.id);
            for (std::size_t r = 0; r < rows; ++r) {
                double* dxr = dx.data() + r * in;
                for (std::size_t o = 0; o < out; ++o) {
                    const double d = dy[r * out + o];
                    const double* wo = wv.data().data() + o * in;
                    for (std::size_t i = 0; i < in; ++i) dxr[i] += d * wo[i];
                }
            }
        }
        if (g.needs_grad(w)) {
            auto dw = g.grad_buffer(w.id);
            for (std::size_t r = 0; r < rows; ++r) {
                const double* xr = xv.data().data() + r * in;
                for (std::size_t o = 0; o < out; ++o) {
                    const double d = dy[r * out + o];
                    double* dwo = dw.data() + o * in;
                    for (std::size_t i = 0; i < in; ++i) dwo[i] += d * xr[i];
                }
            }
        }
    });
}

// ---------------------------------------------------------------------------
// Normalization and probability

// Softmax along `axis`, stabilized by subtracting the running maximum.
inline Var softmax(Var a, std::size_t axis) {
    const Tensor& av = a.value();
    if (axis >= av.rank()) {
        throw ShapeError("softmax: axis " + std::to_string(axis) + " out of range for " +
                         shape_str(av.shape()));
    }
    const std::size_t n = av.dim(axis);
    if (n == 0) throw ShapeError("softmax: empty axis");
    std::size_t inner = 1;
    for (std::size_t d = axis + 1; d < av.rank(); ++d) inner *= av.dim(d);
    const std::size_t outer = av.size() / (n * inner);
    Tensor out(av.shape());
    for (std::size_t o = 0; o < outer; ++o) {
        for (std::size_t in = 0; in < inner; ++in) {
            const std::size_t base = o * n * inner + in;
            double mx = av[base];
            for (std::size_t j = 1; j < n; ++j) mx = std::max(mx, av[base + j * inner]);
            double z = 0.0;
            for (std::size_t j = 0; j < n; ++j) {
                const double e = std::exp(av[base + j * inner] - mx);
                out[base + j * inner] = e;
                z += e;
            }
            for (std::size_t j = 0; j < n; ++j) out[base + j * inner] /= z;
        }
    }
    return a.graph->record(std::move(out), {a}, [a, n, inner, outer](Graph& g, std::size_t self) {
        auto dy = g.out_grad(self);
        const Tensor& y = g.value(Var{&g, self});
        auto da = g.grad_buffer(a.id);
        for (std::size_t o = 0; o < outer; ++o)
            for (std::size_t in = 0; in < inner; ++in) {
                const std::size_t base = o * n * inner + in;
                double dot = 0.0;
                for (std::size_t j = 0; j < n; ++j) dot += y[base + j * inner] * dy[base + j * inner];
                for (std::size_t j = 0; j < n; ++j)
                    da[base + j * inner] += y[base + j * inner] * (dy[base + j * inner] - dot);
            }
    });
}

// x / sqrt(mean(x^2) + eps) * gain over the last dimension.
inline Var rmsnorm(Var x, Var gain, double eps = 1e-5) {
    detail::require_same_graph(x, gain);
    const Tensor& xv = x.value();
    const Tensor& gv = gain.value();
    const std::size_t d = xv.shape().back();
    if (gv.rank() != 1 || gv.dim(0) != d) {
        throw ShapeError("rmsnorm: gain " + shape_str(gv.shape()) + " does not match " +
                         shape_str(xv.shape()));
    }
    const std::size_t rows = detail::leading_rows(xv);
    Tensor y(xv.shape());
    std::vector<double> inv(rows);
    for (std::size_t r = 0; r < rows; ++r) {
        double ms = 0.0;
        for (std::size_t k = 0; k < d; ++k) ms += xv[r * d + k] * xv[r * d + k];
        inv[r] = 1.0 / std::sqrt(ms / static_cast<double>(d) + eps);
        for (std::size_t k = 0; k < d; ++k) y[r * d + k] = xv[r * d + k] * inv[r] * gv[k];
    }
    return x.graph->record(
        std::move(y), {x, gain},
        [x, gain, rows, d, inv = std::move(inv)](Graph& g, std::size_t self) {
            auto dy = g.out_grad(self);
            const Tensor& xv = g.value(x);
            const Tensor& gv = g.value(gain);
            if (g.needs_grad(x)) {
                auto dx = g.grad_buffer(x.id);
                for (std::size_t r = 0; r < rows; ++r) {
                    double dot = 0.0;
                    for (std::size_t k = 0; k < d; ++k) dot += gv[k] * dy[r * d + k] * xv[r * d + k];
                    const double c = inv[r] * inv[r] * inv[r] * dot / static_cast<double>(d);
                    for (std::size_t k = 0; k < d; ++k)
                        dx[r * d + k] += inv[r] * gv[k] * dy[r * d + k] - c * xv[r * d + k];
                }
            }
            if (g.needs_grad(gain)) {
                auto dg = g.grad_buffer(gain.id);
                for (std::size_t r = 0; r < rows; ++r)
                    for (std::size_t k = 0; k < d; ++k) dg[k] += dy[r * d + k] * xv[r * d + k] * inv[r];
            }
        });
}

// Row-wise unit normalization of a [rows, d] tensor. A zero row has no
// direction and is reported as an error.
inline Var l2_normalize_rows(Var x) {
    const Tensor& xv = x.value();
    if (xv.rank() != 2) throw ShapeError("l2_normalize_rows: expected rank 2, got " + shape_str(xv.shape()));
    const std::size_t rows = xv.dim(0), d = xv.dim(1);
    Tensor y(xv.shape());
    std::vector<double> norms(rows);
    for (std::size_t r = 0; r < rows; ++r) {
        double ss = 0.0;
        for (std::size_t k = 0; k < d; ++k) ss += xv[r * d + k] * xv[r * d + k];
        norms[r] = std::sqrt(ss);
        if (!(norms[r] > 0.0)) {
            throw NumericError("zero-norm embedding at row " + std::to_string(r) +
                               "; cosine similarity is undefined");
        }
        for (std::size_t k = 0; k < d; ++k) y[r * d + k] = xv[r * d + k] / norms[r];
    }
    return x.graph->record(
        std::move(y), {x}, [x, rows, d, norms = std::move(norms)](Graph& g, std::size_t self) {
            auto dy = g.out_grad(self);
            const Tensor& y = g.value(Var{&g, self});
            auto dx = g.grad_buffer(x.id);
            for (std::size_t r = 0; r < rows; ++r) {
                double dot = 0.0;
                for (std::size_t k = 0; k < d; ++k) dot += y[r * d + k] * dy[r * d + k];
                for (std::size_t k = 0; k < d; ++k)
                    dx[r * d + k] += (dy[r * d + k] - y[r * d + k] * dot) / norms[r];
            }
        });
}

// Mean negative log-likelihood of target columns under a row softmax.
inline Var cross_entropy(Var logits, std::vector<std::size_t> targets) {
    const Tensor& lv = logits.value();
    if (lv.rank() != 2 || lv.dim(0) != targets.size()) {
        throw ShapeError("cross_entropy: logits " + shape_str(lv.shape()) + " vs " +
                         std::to_string(targets.size()) + " targets");
    }
    const std::size_t rows = lv.dim(0), cols = lv.dim(1);
    Tensor probs(lv.shape());
    double total = 0.0;
    for (std::size_t r = 0; r < rows; ++r) {
        if (targets[r] >= cols) throw ShapeError("cross_entropy: target out of range");
        double mx = lv[r * cols];
        for (std::size_t c = 1; c < cols; ++c) mx = std::max(mx, lv[r * cols + c]);
        double z = 0.0;
        for (std::size_t c = 0; c < cols; ++c) {
            probs[r * cols + c] = std::exp(lv[r * cols + c] - mx);
            z += probs[r * cols + c];
        }
        for (std::size_t c = 0; c < cols; ++c) probs[r * cols + c] /= z;
        total += std::log(z) + mx - lv[r * cols + targets[r]];
    }
    const double n = static_cast<double>(rows);
    return logits.graph->record(
        Tensor::scalar(total / n), {logits},
        [logits, rows, cols, n, probs = std::move(probs), targets = std::move(targets)](
            Graph& g, std::size_t self) {
            const double dy = g.out_grad(self)[0];
            auto dl = g.grad_buffer(logits.id);
            for (std::size_t r = 0; r < rows; ++r)
                for (std::size_t c = 0; c < cols; ++c) {
                    const double onehot = c == targets[r] ? 1.0 : 0.0;
                    dl[r * cols + c] += dy * (probs[r * cols + c] - onehot) / n;
                }
        });
}

// ---------------------------------------------------------------------------
// Shape plumbing

inline Var concat_rows(Var a, Var b) {
    detail::require_same_graph(a, b);
    const Tensor& av = a.value();
    const Tensor& bv = b.value();
    if (av.rank() != 2 || bv.rank() != 2 || av.dim(1) != bv.dim(1)) {
        throw ShapeError("concat_rows: " + shape_str(av.shape()) + " and " + shape_str(bv.shape()));
    }
    Tensor out(Shape{av.dim(0) + bv.dim(0), av.dim(1)});
    std::copy(av.data().begin(), av.data().end(), out.data().begin());
    std::copy(bv.data().begin(), bv.data().end(), out.data().begin() + static_cast<std::ptrdiff_t>(av.size()));
    const std::size_t split = av.size();
    return a.graph->record(std::move(out), {a, b}, [a, b, split](Graph& g, std::size_t self) {
        auto dy = g.out_grad(self);
        if (g.needs_grad(a)) {
            auto da = g.grad_buffer(a.id);
            for (std::size_t i = 0; i < da.size(); ++i) da[i] += dy[i];
        }
        if (g.needs_grad(b)) {
            auto db = g.grad_buffer(b.id);
            for (std::size_t i = 0; i < db.size(); ++i) db[i] += dy[split + i];
        }
    });
}

// Rows [begin, end) of a [rows, d] tensor.
inline Var slice_rows(Var a, std::size_t begin, std::size_t end) {
    const Tensor& av = a.value();
    if (av.rank() != 2 || begin > end || end > av.dim(0)) {
        throw ShapeError("slice_rows: [" + std::to_string(begin) + ", " + std::to_string(end) + ") of " +
                         shape_str(av.shape()));
    }
    const std::size_t d = av.dim(1);
    Tensor out(Shape{end - begin, d});
    std::copy_n(av.data().begin() + static_cast<std::ptrdiff_t>(begin * d), out.size(), out.data().begin());
    return a.graph->record(std::move(out), {a}, [a, begin, d](Graph& g, std::size_t self) {
        auto dy = g.out_grad(self);
        auto da = g.grad_buffer(a.id);
        for (std::size_t i = 0; i < dy.size(); ++i) da[begin * d + i] += dy[i];
    });
}

// Rows of `table` indexed by `ids`, shaped [ids.shape..., d].
inline Var embedding(Var table, const std::vector<std::size_t>& ids, Shape index_shape) {
    const Tensor& tv = table.value();
    if (tv.rank() != 2) throw ShapeError("embedding: table must be rank 2");
    if (shape_size(index_shape) != ids.size()) throw ShapeError("embedding: index shape mismatch");
    const std::size_t vocab = tv.dim(0), d = tv.dim(1);
    index_shape.push_back(d);
    Tensor out(std::move(index_shape));
    for (std::size_t i = 0; i < ids.size(); ++i) {
        if (ids[i] >= vocab) {
            throw DataError("token id " + std::to_string(ids[i]) + " out of range for vocabulary of " +
                            std::to_string(vocab));
        }
        std::copy_n(tv.data().begin() + static_cast<std::ptrdiff_t>(ids[i] * d), d,
                    out.data().begin() + static_cast<std::ptrdiff_t>(i * d));
    }
    return table.graph->record(std::move(out), {table}, [table, ids, d](Graph& g, std::size_t self) {
        auto dy = g.out_grad(self);
        auto dt = g.grad_buffer(table.id);
        for (std::size_t i = 0; i < ids.size(); ++i)
            for (std::size_t k = 0; k < d; ++k) dt[ids[i] * d + k] += dy[i * d + k];
    });
}

// ---------------------------------------------------------------------------
// Attention

// Rotary position embedding on x[batch, seq, d] split into n_heads heads.
// Adjacent pairs within a head are rotated by position * base^(-2i/head_dim).
inline Var rope(Var x, std::size_t n_heads, double base = 10000.0) {
    const Tensor& xv = x.value();
    if (xv.rank() != 3) throw ShapeError("rope: expected [batch, seq, d], got " + shape_str(xv.shape()));
    const std::size_t batch = xv.dim(0), seq = xv.dim(1), d = xv.dim(2);
    const std::size_t hd = d / n_heads;
    if (hd * n_heads != d || hd % 2 != 0) throw ShapeError("rope: head dimension must be even");
    std::vector<double> cosv(seq * hd / 2), sinv(seq * hd / 2);
    for (std::size_t s = 0; s < seq; ++s)
        for (std::size_t i = 0; i < hd / 2; ++i) {
            const double freq = std::pow(base, -2.0 * static_cast<double>(i) / static_cast<double>(hd));
            const double angle = static_cast<double>(s) * freq;
            cosv[s * hd / 2 + i] = std::cos(angle);
            sinv[s * hd / 2 + i] = std::sin(angle);
        }
    Tensor y(xv.shape());
    auto rotate = [=](std::span<const double> in, std::span<double> out, bool inverse) {
        for (std::size_t b = 0; b < batch; ++b)
            for (std::size_t s = 0; s < seq; ++s)
                for (std::size_t h = 0; h < n_heads; ++h)
                    for (std::size_t i = 0; i < hd / 2; ++i) {
                        const std::size_t at = ((b * seq + s) * d) + h * hd + 2 * i;
                        const double c = cosv[s * hd / 2 + i];
                        const double sn = inverse ? -sinv[s * hd / 2 + i] : sinv[s * hd / 2 + i];
                        const double x0 = in[at], x1 = in[at + 1];
                        out[at] += x0 * c - x1 * sn;
                        out[at + 1] += x0 * sn + x1 * c;
                    }
    };
    rotate(xv.data(), y.data(), false);
    return x.graph->record(std::move(y), {x}, [x, rotate](Graph& g, std::size_t self) {
        rotate(g.out_grad(self), g.grad_buffer(x.id), true);
    });
}

// Causal multi-head scaled dot-product attention over [batch, seq, d]
// inputs. Position i attends to positions 0..i only, and its output does not
// depend on the sequence length beyond i.
inline Var causal_attention(Var q, Var k, Var v, std::size_t n_heads) {
    detail::require_same_graph(q, k);
    detail::require_same_graph(q, v);
    const Tensor& qv = q.value();
    const Tensor& kv = k.value();
    const Tensor& vv = v.value();
    detail::require_same_shape(qv, kv, "causal_attention");
    detail::require_same_shape(qv, vv, "causal_attention");
    if (qv.rank() != 3) throw ShapeError("causal_attention: expected [batch, seq, d]");
    const std::size_t batch = qv.dim(0), seq = qv.dim(1), d = qv.dim(2);
    const std::size_t hd = d / n_heads;
    if (hd * n_heads != d) throw ShapeError("causal_attention: d not divisible by heads");
    const double scl = 1.0 / std::sqrt(static_cast<double>(hd));

    auto probs = std::make_shared<std::vector<double>>(batch * n_heads * seq * seq, 0.0);
    Tensor out(qv.shape());
    std::vector<double> row(seq);
    for (std::size_t b = 0; b < batch; ++b)
        for (std::size_t h = 0; h < n_heads; ++h)
            for (std::size_t i = 0; i < seq; ++i) {
                const double* qi = qv.data().data() + (b * seq + i) * d + h * hd;
                double mx = -INFINITY;
                for (std::size_t j = 0; j <= i; ++j) {
                    const double* kj = kv.data().data() + (b * seq + j) * d + h * hd;
                    double dot = 0.0;
                    for (std::size_t c = 0; c < hd; ++c) dot += qi[c] * kj[c];
                    row[j] = dot * scl;
                    mx = std::max(mx, row[j]);
                }
                double z = 0.0;
                for (std::size_t j = 0; j <= i; ++j) {
                    row[j] = std::exp(row[j] - mx);
                    z += row[j];
                }
                double* p = probs->data() + ((b * n_heads + h) * seq + i) * seq;
                double* oi = out.data().data() + (b * seq + i) * d + h * hd;
                for (std::size_t j = 0; j <= i; ++j) {
                    p[j] = row[j] / z;
                    const double* vj = vv.data().data() + (b * seq + j) * d + h * hd;
                    for (std::size_t c = 0; c < hd; ++c) oi[c] += p[j] * vj[c];
                }
            }
    return q.graph->record(
        std::move(out), {q, k, v},
        [q, k, v, batch, seq, d, hd, n_heads, scl, probs](Graph& g, std::size_t self) {
            auto dy = g.out_grad(self);
            const Tensor& qv = g.value(q);
            const Tensor& kv = g.value(k);
            const Tensor& vv = g.value(v);
            const bool gq = g.needs_grad(q), gk = g.needs_grad(k), gv = g.needs_grad(v);
            std::span<double> dq, dk, dv;
            if (gq) dq = g.grad_buffer(q.id);
            if (gk) dk = g.grad_buffer(k.id);
            if (gv) dv = g.grad_buffer(v.id);
            std::vector<double> dp(seq);
            for (std::size_t b = 0; b < batch; ++b)
                for (std::size_t h = 0; h < n_heads; ++h)
                    for (std::size_t i = 0; i < seq; ++i) {
                        const double* p = probs->data() + ((b * n_heads + h) * seq + i) * seq;
                        const std::size_t oi = (b * seq + i) * d + h * hd;
                        double dot = 0.0;
                        for (std::size_t j = 0; j <= i; ++j) {
                            const std::size_t oj = (b * seq + j) * d + h * hd;
                            double acc = 0.0;
                            for (std::size_t c = 0; c < hd; ++c) acc += dy[oi + c] * vv[oj + c];
                            dp[j] = acc;
                            dot += p[j] * acc;
                            if (gv)
                                for (std::size_t c = 0; c < hd; ++c) dv[oj + c] += p[j] * dy[oi + c];
                        }
                        for (std::size_t j = 0; j <= i; ++j) {
                            const double ds = p[j] * (dp[j] - dot) * scl;
                            const std::size_t oj = (b * seq + j) * d + h * hd;
                            if (gq)
                                for (std::size_t c = 0; c < hd; ++c) dq[oi + c] += ds * kv[oj + c];
                            if (gk)
                                for (std::size_t c = 0; c < hd; ++c) dk[oj + c] += ds * qv[oi + c];
                        }
                    }
        });
}

// ---------------------------------------------------------------------------
// Pooling primitive

// out[b, :] = sum_s weights[b, s] * x[b, s, :], with constant weights.
inline Var weighted_sum_seq(Var x, const Tensor& weights) {
    const Tensor& xv = x.value();
    if (xv.rank() != 3 || weights.rank() != 2 || weights.dim(0) != xv.dim(0) ||
        weights.dim(1) != xv.dim(1)) {
        throw ShapeError("weighted_sum_seq: hidden " + shape_str(xv.shape()) + " vs weights " +
                         shape_str(weights.shape()));
    }
    const std::size_t batch = xv.dim(0), seq = xv.dim(1), d = xv.dim(2);
    Tensor out(Shape{batch, d});
    for (std::size_t b = 0; b < batch; ++b)
        for (std::size_t s = 0; s < seq; ++s) {
            const double w = weights[b * seq + s];
            if (w == 0.0) continue;
            for (std::size_t k = 0; k < d; ++k) out[b * d + k] += w * xv[(b * seq + s) * d + k];
        }
    return x.graph->record(std::move(out), {x}, [x, weights, batch, seq, d](Graph& g, std::size_t self) {
        auto dy = g.out_grad(self);
        auto dx = g.grad_buffer(x.id);
        for (std::size_t b = 0; b < batch; ++b)
            for (std::size_t s = 0; s < seq; ++s) {
                const double w = weights[b * seq + s];
                if (w == 0.0) continue;
                for (std::size_t k = 0; k < d; ++k) dx[(b * seq + s) * d + k] += w * dy[b * d + k];
            }
    });
}

}  // namespace l3p
