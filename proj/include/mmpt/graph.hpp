#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "mmpt/errors.hpp"
#include "mmpt/rng.hpp"
#include "mmpt/tensor.hpp"

namespace mmpt {

// Learnable tensor with externally owned storage. Graphs bind leaves to
// Params; backward() accumulates into Param::grad.
struct Param {
    std::string name;
    Tensor value;
    Tensor grad;

    Param() = default;
    Param(std::string n, Tensor v) : name(std::move(n)), value(std::move(v)) {
        grad = Tensor::zeros(value.shape);
    }

    void zero_grad() { grad.fill(0.0); }
};

struct Var {
    std::uint32_t id = UINT32_MAX;
    bool valid() const { return id != UINT32_MAX; }
};

namespace detail {

// c[m,n] += a[m,k] * b[k,n]
inline void mm_nn(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
                  std::size_t n) {
    for (std::size_t i = 0; i < m; ++i) {
        const double* arow = a + i * k;
        double* crow = c + i * n;
        for (std::size_t p = 0; p < k; ++p) {
            const double av = arow[p];
            const double* brow = b + p * n;
            for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
}

// c[m,k] += a[m,n] * b[k,n]^T
inline void mm_nt(const double* a, const double* b, double* c, std::size_t m, std::size_t n,
                  std::size_t k) {
    for (std::size_t i = 0; i < m; ++i) {
        const double* arow = a + i * n;
        double* crow = c + i * k;
        for (std::size_t p = 0; p < k; ++p) {
            const double* brow = b + p * n;
            double acc = 0.0;
            for (std::size_t j = 0; j < n; ++j) acc += arow[j] * brow[j];
            crow[p] += acc;
        }
    }
}

// c[k,n] += a[m,k]^T * b[m,n]
inline void mm_tn(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
                  std::size_t n) {
    for (std::size_t i = 0; i < m; ++i) {
        const double* arow = a + i * k;
        const double* brow = b + i * n;
        for (std::size_t p = 0; p < k; ++p) {
            const double av = arow[p];
            double* crow = c + p * n;
            for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
}

}  // namespace detail

// Reverse-mode differentiation tape. Define-by-run: every op records its
// value and a closure that scatters output-grad into input-grads. Nodes are
// replayed in exact reverse creation order, with sequential reductions, so
// forward and backward are bit-deterministic for fixed inputs.
class Graph {
  public:
    Graph() = default;
    Graph(const Graph&) = delete;
    Graph& operator=(const Graph&) = delete;

    // ---- leaves -----------------------------------------------------------

    Var param(Param& p) {
        Var v = push(p.value, true);
        nodes_[v.id].bound = &p;
        return v;
    }

    Var constant(Tensor t) { return push(std::move(t), false); }

    Var constant_scalar(double v) { return constant(Tensor::scalar(v)); }

    // ---- accessors --------------------------------------------------------

    const Tensor& value(Var v) const { return nodes_.at(v.id).value; }

    // Gradient of the given node from the last backward(); null when the node
    // was not reached.
    const Tensor* grad(Var v) const {
        const Node& n = nodes_.at(v.id);
        return n.has_grad ? &n.grad : nullptr;
    }

    std::size_t size() const { return nodes_.size(); }

    // ---- elementwise / scalar ---------------------------------------------

    // b may match a exactly, broadcast as a row [1,m], a column [n,1], or a
    // strict trailing-shape suffix of a. Anything else is a ShapeError.
    Var add(Var a, Var b) { return add_impl(a, b, +1.0); }
    Var sub(Var a, Var b) { return add_impl(a, b, -1.0); }

    Var mul(Var a, Var b) {
        const Tensor& ta = value(a);
        const Tensor& tb = value(b);
        if (!ta.same_shape(tb)) throw ShapeError("mul: shape mismatch " + shape_str(ta.shape) + " vs " + shape_str(tb.shape));
        Tensor out(ta.shape);
        for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] = ta.data[i] * tb.data[i];
        Var v = push_checked(std::move(out), "mul", {a, b});
        record(v, [this, v, a, b] {
            const Tensor& g = nodes_[v.id].grad;
            const Tensor& ta2 = value(a);
            const Tensor& tb2 = value(b);
            if (wants(a)) {
                Tensor& da = grad_buf(a);
                for (std::size_t i = 0; i < g.data.size(); ++i) da.data[i] += g.data[i] * tb2.data[i];
            }
            if (wants(b)) {
                Tensor& db = grad_buf(b);
                for (std::size_t i = 0; i < g.data.size(); ++i) db.data[i] += g.data[i] * ta2.data[i];
            }
        });
        return v;
    }

    Var scale(Var a, double c) {
        const Tensor& ta = value(a);
        Tensor out(ta.shape);
        for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] = ta.data[i] * c;
        Var v = push_checked(std::move(out), "scale", {a});
        record(v, [this, v, a, c] {
            if (!wants(a)) return;
            const Tensor& g = nodes_[v.id].grad;
            Tensor& da = grad_buf(a);
            for (std::size_t i = 0; i < g.data.size(); ++i) da.data[i] += g.data[i] * c;
        });
        return v;
    }

    Var add_scalar(Var a, double c) {
        const Tensor& ta = value(a);
        Tensor out(ta.shape);
        for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] = ta.data[i] + c;
        Var v = push_checked(std::move(out), "add_scalar", {a});
        record(v, [this, v, a] {
            if (!wants(a)) return;
            const Tensor& g = nodes_[v.id].grad;
            Tensor& da = grad_buf(a);
            for (std::size_t i = 0; i < g.data.size(); ++i) da.data[i] += g.data[i];
        });
        return v;
    }

    // ---- linear algebra ----------------------------------------------------

    Var matmul(Var a, Var b) {
        const Tensor& ta = value(a);
        const Tensor& tb = value(b);
        if (ta.ndim() != 2 || tb.ndim() != 2 || ta.cols() != tb.rows())
            throw ShapeError("matmul: incompatible " + shape_str(ta.shape) + " x " + shape_str(tb.shape));
        const std::size_t m = ta.rows(), k = ta.cols(), n = tb.cols();
        Tensor out({m, n});
        detail::mm_nn(ta.data.data(), tb.data.data(), out.data.data(), m, k, n);
        Var v = push_checked(std::move(out), "matmul", {a, b});
        record(v, [this, v, a, b, m, k, n] {
            const Tensor& g = nodes_[v.id].grad;
            if (wants(a))
                detail::mm_nt(g.data.data(), value(b).data.data(), grad_buf(a).data.data(), m, n, k);
            if (wants(b))
                detail::mm_tn(value(a).data.data(), g.data.data(), grad_buf(b).data.data(), m, k, n);
        });
        return v;
    }

    Var transpose(Var a) {
        const Tensor& ta = value(a);
        if (ta.ndim() != 2) throw ShapeError("transpose: need 2-D, got " + shape_str(ta.shape));
        const std::size_t r = ta.rows(), c = ta.cols();
        Tensor out({c, r});
        for (std::size_t i = 0; i < r; ++i)
            for (std::size_t j = 0; j < c; ++j) out.data[j * r + i] = ta.data[i * c + j];
        Var v = push_checked(std::move(out), "transpose", {a});
        record(v, [this, v, a, r, c] {
            if (!wants(a)) return;
            const Tensor& g = nodes_[v.id].grad;
            Tensor& da = grad_buf(a);
            for (std::size_t i = 0; i < r; ++i)
                for (std::size_t j = 0; j < c; ++j) da.data[i * c + j] += g.data[j * r + i];
        });
        return v;
    }

    Var reshape(Var a, Shape s) {
        const Tensor& ta = value(a);
        if (shape_numel(s) != ta.numel())
            throw ShapeError("reshape: numel mismatch " + shape_str(ta.shape) + " -> " + shape_str(s));
        Tensor out = ta;
        out.shape = std::move(s);
        Var v = push_checked(std::move(out), "reshape", {a});
        record(v, [this, v, a] {
            if (!wants(a)) return;
            const Tensor& g = nodes_[v.id].grad;
            Tensor& da = grad_buf(a);
            for (std::size_t i = 0; i < g.data.size(); ++i) da.data[i] += g.data[i];
        });
        return v;
    }

    // ---- structure ops -----------------------------------------------------

    Var concat_rows(const std::vector<Var>& vs) {
        if (vs.empty()) throw InvalidArgument("concat_rows: empty input list");
        const std::size_t c = value(vs[0]).cols();
        std::size_t total = 0;
        for (Var x : vs) {
            if (value(x).ndim() != 2 || value(x).cols() != c)
                throw ShapeError("concat_rows: column mismatch");
            total += value(x).rows();
        }
        Tensor out({total, c});
        std::size_t r0 = 0;
        for (Var x : vs) {
            const Tensor& t = value(x);
            std::copy(t.data.begin(), t.data.end(), out.data.begin() + static_cast<std::ptrdiff_t>(r0 * c));
            r0 += t.rows();
        }
        Var v = push_checked(std::move(out), "concat_rows", vs);
        record(v, [this, v, vs, c] {
            const Tensor& g = nodes_[v.id].grad;
            std::size_t r = 0;
            for (Var x : vs) {
                const std::size_t nr = value(x).rows();
                if (wants(x)) {
                    Tensor& dx = grad_buf(x);
                    for (std::size_t i = 0; i < nr * c; ++i) dx.data[i] += g.data[r * c + i];
                }
                r += nr;
            }
        });
        return v;
    }

    Var concat_cols(const std::vector<Var>& vs) {
        if (vs.empty()) throw InvalidArgument("concat_cols: empty input list");
        const std::size_t r = value(vs[0]).rows();
        std::size_t total = 0;
        for (Var x : vs) {
            if (value(x).ndim() != 2 || value(x).rows() != r)
                throw ShapeError("concat_cols: row mismatch");
            total += value(x).cols();
        }
        Tensor out({r, total});
        std::size_t c0 = 0;
        for (Var x : vs) {
            const Tensor& t = value(x);
            const std::size_t nc = t.cols();
            for (std::size_t i = 0; i < r; ++i)
                std::copy(t.data.begin() + static_cast<std::ptrdiff_t>(i * nc),
                          t.data.begin() + static_cast<std::ptrdiff_t>((i + 1) * nc),
                          out.data.begin() + static_cast<std::ptrdiff_t>(i * total + c0));
            c0 += nc;
        }
        Var v = push_checked(std::move(out), "concat_cols", vs);
        record(v, [this, v, vs, r, total] {
            const Tensor& g = nodes_[v.id].grad;
            std::size_t c = 0;
            for (Var x : vs) {
                const std::size_t nc = value(x).cols();
                if (wants(x)) {
                    Tensor& dx = grad_buf(x);
                    for (std::size_t i = 0; i < r; ++i)
                        for (std::size_t j = 0; j < nc; ++j) dx.data[i * nc + j] += g.data[i * total + c + j];
                }
                c += nc;
            }
        });
        return v;
    }

    Var slice_rows(Var a, std::size_t r0, std::size_t len) {
        const Tensor& ta = value(a);
        if (ta.ndim() != 2 || r0 + len > ta.rows()) throw ShapeError("slice_rows: out of range");
        const std::size_t c = ta.cols();
        Tensor out({len, c});
        std::copy(ta.data.begin() + static_cast<std::ptrdiff_t>(r0 * c),
                  ta.data.begin() + static_cast<std::ptrdiff_t>((r0 + len) * c), out.data.begin());
        Var v = push_checked(std::move(out), "slice_rows", {a});
        record(v, [this, v, a, r0, c, len] {
            if (!wants(a)) return;
            const Tensor& g = nodes_[v.id].grad;
            Tensor& da = grad_buf(a);
            for (std::size_t i = 0; i < len * c; ++i) da.data[r0 * c + i] += g.data[i];
        });
        return v;
    }

    Var slice_cols(Var a, std::size_t c0, std::size_t len) {
        const Tensor& ta = value(a);
        if (ta.ndim() != 2 || c0 + len > ta.cols()) throw ShapeError("slice_cols: out of range");
        const std::size_t r = ta.rows(), c = ta.cols();
        Tensor out({r, len});
        for (std::size_t i = 0; i < r; ++i)
            for (std::size_t j = 0; j < len; ++j) out.data[i * len + j] = ta.data[i * c + c0 + j];
        Var v = push_checked(std::move(out), "slice_cols", {a});
        record(v, [this, v, a, c0, r, c, len] {
            if (!wants(a)) return;
            const Tensor& g = nodes_[v.id].grad;
            Tensor& da = grad_buf(a);
            for (std::size_t i = 0; i < r; ++i)
                for (std::size_t j = 0; j < len; ++j) da.data[i * c + c0 + j] += g.data[i * len + j];
        });
        return v;
    }

    // Row gather; duplicate indices are allowed (grads accumulate).
    Var gather_rows(Var a, std::vector<std::size_t> idx) {
        const Tensor& ta = value(a);
        if (ta.ndim() != 2) throw ShapeError("gather_rows: need 2-D");
        const std::size_t c = ta.cols();
        for (auto i : idx)
            if (i >= ta.rows()) throw InvalidArgument("gather_rows: index out of range");
        Tensor out({idx.size(), c});
        for (std::size_t r = 0; r < idx.size(); ++r)
            std::copy(ta.data.begin() + static_cast<std::ptrdiff_t>(idx[r] * c),
                      ta.data.begin() + static_cast<std::ptrdiff_t>((idx[r] + 1) * c),
                      out.data.begin() + static_cast<std::ptrdiff_t>(r * c));
        Var v = push_checked(std::move(out), "gather_rows", {a});
        record(v, [this, v, a, idx = std::move(idx), c] {
            if (!wants(a)) return;
            const Tensor& g = nodes_[v.id].grad;
            Tensor& da = grad_buf(a);
            for (std::size_t r = 0; r < idx.size(); ++r)
                for (std::size_t j = 0; j < c; ++j) da.data[idx[r] * c + j] += g.data[r * c + j];
        });
        return v;
    }

    Var repeat_rows(Var a, std::size_t n) {
        return gather_rows(a, std::vector<std::size_t>(n, 0));
    }

    // ---- nonlinearities -----------------------------------------------------

    // Numerically stable shifted softmax over the last axis.
    Var softmax(Var a) {
        const Tensor& ta = value(a);
        if (ta.ndim() < 1) throw ShapeError("softmax: need at least 1-D");
        const std::size_t c = ta.shape.back();
        const std::size_t r = ta.numel() / c;
        Tensor out(ta.shape);
        for (std::size_t i = 0; i < r; ++i) {
            const double* xr = ta.data.data() + i * c;
            double* yr = out.data.data() + i * c;
            double mx = xr[0];
            for (std::size_t j = 1; j < c; ++j) mx = std::max(mx, xr[j]);
            double sum = 0.0;
            for (std::size_t j = 0; j < c; ++j) {
                yr[j] = std::exp(xr[j] - mx);
                sum += yr[j];
            }
            const double inv = 1.0 / sum;
            for (std::size_t j = 0; j < c; ++j) yr[j] *= inv;
        }
        Var v = push_checked(std::move(out), "softmax", {a});
        record(v, [this, v, a, r, c] {
            if (!wants(a)) return;
            const Tensor& g = nodes_[v.id].grad;
            const Tensor& y = nodes_[v.id].value;
            Tensor& da = grad_buf(a);
            for (std::size_t i = 0; i < r; ++i) {
                const double* gr = g.data.data() + i * c;
                const double* yr = y.data.data() + i * c;
                double dot = 0.0;
                for (std::size_t j = 0; j < c; ++j) dot += gr[j] * yr[j];
                double* dr = da.data.data() + i * c;
                for (std::size_t j = 0; j < c; ++j) dr[j] += (gr[j] - dot) * yr[j];
            }
        });
        return v;
    }

    Var layer_norm(Var a, Var gamma, Var beta, double eps = 1e-5) {
        const Tensor& ta = value(a);
        const std::size_t c = ta.shape.back();
        const std::size_t r = ta.numel() / c;
        if (value(gamma).numel() != c || value(beta).numel() != c)
            throw ShapeError("layer_norm: gain/bias width mismatch");
        Tensor out(ta.shape);
        Tensor xhat(ta.shape);
        std::vector<double> inv_std(r);
        const Tensor& tg = value(gamma);
        const Tensor& tb = value(beta);
        for (std::size_t i = 0; i < r; ++i) {
            const double* xr = ta.data.data() + i * c;
            double mean = 0.0;
            for (std::size_t j = 0; j < c; ++j) mean += xr[j];
            mean /= static_cast<double>(c);
            double var = 0.0;
            for (std::size_t j = 0; j < c; ++j) var += (xr[j] - mean) * (xr[j] - mean);
            var /= static_cast<double>(c);
            const double is = 1.0 / std::sqrt(var + eps);
            inv_std[i] = is;
            double* hr = xhat.data.data() + i * c;
            double* yr = out.data.data() + i * c;
            for (std::size_t j = 0; j < c; ++j) {
                hr[j] = (xr[j] - mean) * is;
                yr[j] = hr[j] * tg.data[j] + tb.data[j];
            }
        }
        Var v = push_checked(std::move(out), "layer_norm", {a, gamma, beta});
        record(v, [this, v, a, gamma, beta, xhat = std::move(xhat), inv_std = std::move(inv_std), r, c] {
            const Tensor& g = nodes_[v.id].grad;
            const Tensor& tg = value(gamma);
            if (wants(gamma)) {
                Tensor& dg = grad_buf(gamma);
                for (std::size_t i = 0; i < r; ++i)
                    for (std::size_t j = 0; j < c; ++j)
                        dg.data[j] += g.data[i * c + j] * xhat.data[i * c + j];
            }
            if (wants(beta)) {
                Tensor& db = grad_buf(beta);
                for (std::size_t i = 0; i < r; ++i)
                    for (std::size_t j = 0; j < c; ++j) db.data[j] += g.data[i * c + j];
            }
            if (wants(a)) {
                Tensor& da = grad_buf(a);
                for (std::size_t i = 0; i < r; ++i) {
                    const double* gr = g.data.data() + i * c;
                    const double* hr = xhat.data.data() + i * c;
                    double sum_gw = 0.0, sum_gwh = 0.0;
                    for (std::size_t j = 0; j < c; ++j) {
                        const double gw = gr[j] * tg.data[j];
                        sum_gw += gw;
                        sum_gwh += gw * hr[j];
                    }
                    const double inv_c = 1.0 / static_cast<double>(c);
                    for (std::size_t j = 0; j < c; ++j) {
                        const double gw = gr[j] * tg.data[j];
                        da.data[i * c + j] += (gw - inv_c * sum_gw - hr[j] * inv_c * sum_gwh) * inv_std[i];
                    }
                }
            }
        });
        return v;
    }

    // Exact-erf GELU.
    Var gelu(Var a) {
        return unary(a, "gelu",
                     [](double x) { return 0.5 * x * (1.0 + std::erf(x * M_SQRT1_2)); },
                     [](double x, double) {
                         const double cdf = 0.5 * (1.0 + std::erf(x * M_SQRT1_2));
                         const double pdf = std::exp(-0.5 * x * x) / std::sqrt(2.0 * M_PI);
                         return cdf + x * pdf;
                     });
    }

    Var relu(Var a) {
        return unary(a, "relu", [](double x) { return x > 0 ? x : 0.0; },
                     [](double x, double) { return x > 0 ? 1.0 : 0.0; });
    }

    Var sigmoid(Var a) {
        return unary(a, "sigmoid",
                     [](double x) { return x >= 0 ? 1.0 / (1.0 + std::exp(-x))
                                                  : std::exp(x) / (1.0 + std::exp(x)); },
                     [](double, double y) { return y * (1.0 - y); });
    }

    Var exp(Var a) {
        return unary(a, "exp", [](double x) { return std::exp(x); },
                     [](double, double y) { return y; });
    }

    Var log(Var a) {
        return unary(a, "log", [](double x) { return std::log(x); },
                     [](double x, double) { return 1.0 / x; });
    }

    Var sqrt_op(Var a) {
        return unary(a, "sqrt", [](double x) { return std::sqrt(x); },
                     [](double, double y) { return 0.5 / y; });
    }

    // Pass-through gradient strictly inside (lo, hi), zero outside.
    Var clamp(Var a, double lo, double hi) {
        return unary(a, "clamp",
                     [lo, hi](double x) { return std::min(std::max(x, lo), hi); },
                     [lo, hi](double x, double) { return (x > lo && x < hi) ? 1.0 : 0.0; });
    }

    // ---- reductions ---------------------------------------------------------

    // [n,d] -> [1,d]; gradient routes to the first maximal element per column.
    Var max_rows(Var a) {
        const Tensor& ta = value(a);
        if (ta.ndim() != 2) throw ShapeError("max_rows: need 2-D");
        const std::size_t r = ta.rows(), c = ta.cols();
        Tensor out({1, c});
        std::vector<std::size_t> arg(c, 0);
        for (std::size_t j = 0; j < c; ++j) {
            double best = ta.data[j];
            std::size_t bi = 0;
            for (std::size_t i = 1; i < r; ++i)
                if (ta.data[i * c + j] > best) {
                    best = ta.data[i * c + j];
                    bi = i;
                }
            out.data[j] = best;
            arg[j] = bi;
        }
        Var v = push_checked(std::move(out), "max_rows", {a});
        record(v, [this, v, a, arg = std::move(arg), c] {
            if (!wants(a)) return;
            const Tensor& g = nodes_[v.id].grad;
            Tensor& da = grad_buf(a);
            for (std::size_t j = 0; j < c; ++j) da.data[arg[j] * c + j] += g.data[j];
        });
        return v;
    }

    // [n,m] -> [n,1]; first-max ties.
    Var max_cols(Var a) {
        const Tensor& ta = value(a);
        if (ta.ndim() != 2) throw ShapeError("max_cols: need 2-D");
        const std::size_t r = ta.rows(), c = ta.cols();
        Tensor out({r, 1});
        std::vector<std::size_t> arg(r, 0);
        for (std::size_t i = 0; i < r; ++i) {
            const double* xr = ta.data.data() + i * c;
            double best = xr[0];
            std::size_t bj = 0;
            for (std::size_t j = 1; j < c; ++j)
                if (xr[j] > best) {
                    best = xr[j];
                    bj = j;
                }
            out.data[i] = best;
            arg[i] = bj;
        }
        Var v = push_checked(std::move(out), "max_cols", {a});
        record(v, [this, v, a, arg = std::move(arg), c] {
            if (!wants(a)) return;
            const Tensor& g = nodes_[v.id].grad;
            Tensor& da = grad_buf(a);
            for (std::size_t i = 0; i < arg.size(); ++i) da.data[i * c + arg[i]] += g.data[i];
        });
        return v;
    }

    Var mean_rows(Var a) {
        const Tensor& ta = value(a);
        if (ta.ndim() != 2) throw ShapeError("mean_rows: need 2-D");
        const std::size_t r = ta.rows(), c = ta.cols();
        Tensor out({1, c});
        for (std::size_t i = 0; i < r; ++i)
            for (std::size_t j = 0; j < c; ++j) out.data[j] += ta.data[i * c + j];
        const double inv = 1.0 / static_cast<double>(r);
        for (auto& x : out.data) x *= inv;
        Var v = push_checked(std::move(out), "mean_rows", {a});
        record(v, [this, v, a, r, c, inv] {
            if (!wants(a)) return;
            const Tensor& g = nodes_[v.id].grad;
            Tensor& da = grad_buf(a);
            for (std::size_t i = 0; i < r; ++i)
                for (std::size_t j = 0; j < c; ++j) da.data[i * c + j] += g.data[j] * inv;
        });
        return v;
    }

    Var sum_cols(Var a) {
        const Tensor& ta = value(a);
        if (ta.ndim() != 2) throw ShapeError("sum_cols: need 2-D");
        const std::size_t r = ta.rows(), c = ta.cols();
        Tensor out({r, 1});
        for (std::size_t i = 0; i < r; ++i) {
            double acc = 0.0;
            for (std::size_t j = 0; j < c; ++j) acc += ta.data[i * c + j];
            out.data[i] = acc;
        }
        Var v = push_checked(std::move(out), "sum_cols", {a});
        record(v, [this, v, a, r, c] {
            if (!wants(a)) return;
            const Tensor& g = nodes_[v.id].grad;
            Tensor& da = grad_buf(a);
            for (std::size_t i = 0; i < r; ++i)
                for (std::size_t j = 0; j < c; ++j) da.data[i * c + j] += g.data[i];
        });
        return v;
    }

    Var sum_all(Var a) {
        const Tensor& ta = value(a);
        double acc = 0.0;
        for (double x : ta.data) acc += x;
        Var v = push_checked(Tensor::scalar(acc), "sum_all", {a});
        record(v, [this, v, a] {
            if (!wants(a)) return;
            const double g = nodes_[v.id].grad.data[0];
            Tensor& da = grad_buf(a);
            for (auto& x : da.data) x += g;
        });
        return v;
    }

    Var mean_all(Var a) {
        const std::size_t n = value(a).numel();
        return scale(sum_all(a), 1.0 / static_cast<double>(n));
    }

    // Row-wise L2 normalization: y_i = x_i / max(||x_i||, eps).
    Var l2_normalize_rows(Var a, double eps = 1e-12) {
        const Tensor& ta = value(a);
        if (ta.ndim() != 2) throw ShapeError("l2_normalize_rows: need 2-D");
        const std::size_t r = ta.rows(), c = ta.cols();
        Tensor out(ta.shape);
        std::vector<double> inv_norm(r);
        for (std::size_t i = 0; i < r; ++i) {
            const double* xr = ta.data.data() + i * c;
            double nrm = 0.0;
            for (std::size_t j = 0; j < c; ++j) nrm += xr[j] * xr[j];
            nrm = std::max(std::sqrt(nrm), eps);
            inv_norm[i] = 1.0 / nrm;
            for (std::size_t j = 0; j < c; ++j) out.data[i * c + j] = xr[j] * inv_norm[i];
        }
        Var v = push_checked(std::move(out), "l2_normalize_rows", {a});
        record(v, [this, v, a, inv_norm = std::move(inv_norm), r, c] {
            if (!wants(a)) return;
            const Tensor& g = nodes_[v.id].grad;
            const Tensor& y = nodes_[v.id].value;
            Tensor& da = grad_buf(a);
            for (std::size_t i = 0; i < r; ++i) {
                const double* gr = g.data.data() + i * c;
                const double* yr = y.data.data() + i * c;
                double dot = 0.0;
                for (std::size_t j = 0; j < c; ++j) dot += gr[j] * yr[j];
                for (std::size_t j = 0; j < c; ++j)
                    da.data[i * c + j] += (gr[j] - yr[j] * dot) * inv_norm[i];
            }
        });
        return v;
    }

    // ---- convolution ---------------------------------------------------------

    // x [Cin,H,W], w [Cout,Cin,KH,KW], bias [Cout] -> [Cout,Ho,Wo].
    Var conv2d(Var x, Var w, Var bias, std::size_t stride, std::size_t pad) {
        const Tensor& tx = value(x);
        const Tensor& tw = value(w);
        const Tensor& tb = value(bias);
        if (tx.ndim() != 3 || tw.ndim() != 4 || tb.ndim() != 1)
            throw ShapeError("conv2d: expected x[C,H,W], w[O,C,KH,KW], b[O]");
        const std::size_t cin = tx.shape[0], h = tx.shape[1], wd = tx.shape[2];
        const std::size_t cout = tw.shape[0], kh = tw.shape[2], kw = tw.shape[3];
        if (tw.shape[1] != cin || tb.shape[0] != cout) throw ShapeError("conv2d: channel mismatch");
        if (h + 2 * pad < kh || wd + 2 * pad < kw) throw ShapeError("conv2d: kernel larger than input");
        const std::size_t ho = (h + 2 * pad - kh) / stride + 1;
        const std::size_t wo = (wd + 2 * pad - kw) / stride + 1;
        Tensor out({cout, ho, wo});
        for (std::size_t oc = 0; oc < cout; ++oc)
            for (std::size_t oy = 0; oy < ho; ++oy)
                for (std::size_t ox = 0; ox < wo; ++ox) {
                    double acc = tb.data[oc];
                    for (std::size_t ic = 0; ic < cin; ++ic)
                        for (std::size_t ky = 0; ky < kh; ++ky)
                            for (std::size_t kx = 0; kx < kw; ++kx) {
                                const long iy = static_cast<long>(oy * stride + ky) - static_cast<long>(pad);
                                const long ix = static_cast<long>(ox * stride + kx) - static_cast<long>(pad);
                                if (iy < 0 || ix < 0 || iy >= static_cast<long>(h) || ix >= static_cast<long>(wd)) continue;
                                acc += tx.data[(ic * h + static_cast<std::size_t>(iy)) * wd + static_cast<std::size_t>(ix)] *
                                       tw.data[((oc * cin + ic) * kh + ky) * kw + kx];
                            }
                    out.data[(oc * ho + oy) * wo + ox] = acc;
                }
        Var v = push_checked(std::move(out), "conv2d", {x, w, bias});
        record(v, [this, v, x, w, bias, cin, h, wd, cout, kh, kw, ho, wo, stride, pad] {
            const Tensor& g = nodes_[v.id].grad;
            const Tensor& tx2 = value(x);
            const Tensor& tw2 = value(w);
            Tensor* dx = wants(x) ? &grad_buf(x) : nullptr;
            Tensor* dw = wants(w) ? &grad_buf(w) : nullptr;
            Tensor* db = wants(bias) ? &grad_buf(bias) : nullptr;
            for (std::size_t oc = 0; oc < cout; ++oc)
                for (std::size_t oy = 0; oy < ho; ++oy)
                    for (std::size_t ox = 0; ox < wo; ++ox) {
                        const double go = g.data[(oc * ho + oy) * wo + ox];
                        if (db) db->data[oc] += go;
                        for (std::size_t ic = 0; ic < cin; ++ic)
                            for (std::size_t ky = 0; ky < kh; ++ky)
                                for (std::size_t kx = 0; kx < kw; ++kx) {
                                    const long iy = static_cast<long>(oy * stride + ky) - static_cast<long>(pad);
                                    const long ix = static_cast<long>(ox * stride + kx) - static_cast<long>(pad);
                                    if (iy < 0 || ix < 0 || iy >= static_cast<long>(h) || ix >= static_cast<long>(wd)) continue;
                                    const std::size_t xi = (ic * h + static_cast<std::size_t>(iy)) * wd + static_cast<std::size_t>(ix);
                                    const std::size_t wi = ((oc * cin + ic) * kh + ky) * kw + kx;
                                    if (dx) dx->data[xi] += go * tw2.data[wi];
                                    if (dw) dw->data[wi] += go * tx2.data[xi];
                                }
                    }
        });
        return v;
    }

    // Global average pool [C,H,W] -> [1,C].
    Var global_avg_pool(Var x) {
        const Tensor& tx = value(x);
        if (tx.ndim() != 3) throw ShapeError("global_avg_pool: need 3-D");
        const std::size_t c = tx.shape[0], hw = tx.shape[1] * tx.shape[2];
        Tensor out({1, c});
        for (std::size_t i = 0; i < c; ++i) {
            double acc = 0.0;
            for (std::size_t j = 0; j < hw; ++j) acc += tx.data[i * hw + j];
            out.data[i] = acc / static_cast<double>(hw);
        }
        Var v = push_checked(std::move(out), "global_avg_pool", {x});
        record(v, [this, v, x, c, hw] {
            if (!wants(x)) return;
            const Tensor& g = nodes_[v.id].grad;
            Tensor& dx = grad_buf(x);
            const double inv = 1.0 / static_cast<double>(hw);
            for (std::size_t i = 0; i < c; ++i)
                for (std::size_t j = 0; j < hw; ++j) dx.data[i * hw + j] += g.data[i] * inv;
        });
        return v;
    }

    // ---- backward ------------------------------------------------------------

    // Populates gradients of every reachable requires_grad node and
    // accumulates leaf gradients into their bound Params. A graph can be
    // differentiated once; rebuild for the next step.
    void backward(Var root) {
        if (backward_done_) throw InvalidState("backward: graph already differentiated; rebuild it");
        Node& r = nodes_.at(root.id);
        if (r.value.numel() != 1)
            throw InvalidArgument("backward: root must be scalar, got " + shape_str(r.value.shape));
        if (!r.requires_grad)
            throw InvalidArgument("backward: root does not depend on any parameter");
        backward_done_ = true;
        grad_buf(root).data[0] = 1.0;
        for (std::size_t i = nodes_.size(); i-- > 0;) {
            Node& n = nodes_[i];
            if (!n.has_grad) continue;
            if (n.backprop) n.backprop();
            if (n.bound) {
                for (std::size_t j = 0; j < n.grad.data.size(); ++j)
                    n.bound->grad.data[j] += n.grad.data[j];
            }
        }
    }

  private:
    struct Node {
        Tensor value;
        Tensor grad;
        bool has_grad = false;
        bool requires_grad = false;
        Param* bound = nullptr;
        std::function<void()> backprop;
    };

    Var push(Tensor value, bool requires_grad) {
        Node n;
        n.value = std::move(value);
        n.requires_grad = requires_grad;
        nodes_.push_back(std::move(n));
        return Var{static_cast<std::uint32_t>(nodes_.size() - 1)};
    }

    // All non-leaf values flow through here: the NaN/Inf tripwire.
    Var push_checked(Tensor value, const char* op, const std::vector<Var>& inputs) {
        if (!value.all_finite())
            throw NumericError(std::string("non-finite result in op '") + op + "'");
        bool rg = false;
        for (Var in : inputs) rg = rg || nodes_.at(in.id).requires_grad;
        return push(std::move(value), rg);
    }

    void record(Var v, std::function<void()> fn) {
        if (nodes_[v.id].requires_grad) nodes_[v.id].backprop = std::move(fn);
    }

    bool wants(Var v) const { return nodes_[v.id].requires_grad; }

    Tensor& grad_buf(Var v) {
        Node& n = nodes_[v.id];
        if (!n.has_grad) {
            n.grad = Tensor::zeros(n.value.shape);
            n.has_grad = true;
        }
        return n.grad;
    }

    template <typename F, typename DF>
    Var unary(Var a, const char* name, F f, DF df) {
        const Tensor& ta = value(a);
        Tensor out(ta.shape);
        for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] = f(ta.data[i]);
        Var v = push_checked(std::move(out), name, {a});
        record(v, [this, v, a, df] {
            if (!wants(a)) return;
            const Tensor& g = nodes_[v.id].grad;
            const Tensor& x = value(a);
            const Tensor& y = nodes_[v.id].value;
            Tensor& da = grad_buf(a);
            for (std::size_t i = 0; i < g.data.size(); ++i)
                da.data[i] += g.data[i] * df(x.data[i], y.data[i]);
        });
        return v;
    }

    enum class Broadcast { None, Row, Col, Suffix };

    Var add_impl(Var a, Var b, double sign) {
        const Tensor& ta = value(a);
        const Tensor& tb = value(b);
        Broadcast mode;
        if (ta.same_shape(tb)) {
            mode = Broadcast::None;
        } else if (ta.ndim() == 2 && tb.ndim() == 2 && tb.shape[0] == 1 && tb.shape[1] == ta.shape[1]) {
            mode = Broadcast::Row;
        } else if (ta.ndim() == 2 && tb.ndim() == 2 && tb.shape[1] == 1 && tb.shape[0] == ta.shape[0]) {
            mode = Broadcast::Col;
        } else if (tb.ndim() < ta.ndim() &&
                   std::equal(tb.shape.begin(), tb.shape.end(), ta.shape.end() - static_cast<std::ptrdiff_t>(tb.ndim()))) {
            mode = Broadcast::Suffix;
        } else {
            throw ShapeError("add: incompatible shapes " + shape_str(ta.shape) + " vs " + shape_str(tb.shape));
        }
        Tensor out(ta.shape);
        const std::size_t bn = tb.numel();
        switch (mode) {
            case Broadcast::None:
            case Broadcast::Row:  // row layout matches modular indexing below
            case Broadcast::Suffix:
                for (std::size_t i = 0; i < out.data.size(); ++i)
                    out.data[i] = ta.data[i] + sign * tb.data[i % bn];
                break;
            case Broadcast::Col: {
                const std::size_t c = ta.shape[1];
                for (std::size_t i = 0; i < ta.shape[0]; ++i)
                    for (std::size_t j = 0; j < c; ++j)
                        out.data[i * c + j] = ta.data[i * c + j] + sign * tb.data[i];
                break;
            }
        }
        Var v = push_checked(std::move(out), sign > 0 ? "add" : "sub", {a, b});
        record(v, [this, v, a, b, mode, sign] {
            const Tensor& g = nodes_[v.id].grad;
            if (wants(a)) {
                Tensor& da = grad_buf(a);
                for (std::size_t i = 0; i < g.data.size(); ++i) da.data[i] += g.data[i];
            }
            if (wants(b)) {
                Tensor& db = grad_buf(b);
                const std::size_t bn = db.data.size();
                if (mode == Broadcast::Col) {
                    const std::size_t c = value(a).shape[1];
                    for (std::size_t i = 0; i < value(a).shape[0]; ++i)
                        for (std::size_t j = 0; j < c; ++j) db.data[i] += sign * g.data[i * c + j];
                } else {
                    for (std::size_t i = 0; i < g.data.size(); ++i) db.data[i % bn] += sign * g.data[i];
                }
            }
        });
        return v;
    }

    std::vector<Node> nodes_;
    bool backward_done_ = false;
};

// ---------------------------------------------------------------------------
// Central finite-difference gradient verification.
// ---------------------------------------------------------------------------

struct GradCheckEntry {
    std::string name;
    double max_rel_err = 0.0;
};

struct GradCheckReport {
    bool pass = false;
    double max_rel_err = 0.0;
    std::string worst_param;
    std::size_t elements_checked = 0;
    std::vector<GradCheckEntry> per_param;
};

// `run(true)` must build a graph from the current parameter values, call
// backward, and return the loss; `run(false)` must return the loss without
// touching gradients. Both must be deterministic functions of the parameter
// values (fix every RNG inside the closure). Set max_elems_per_param to
// bound the sweep on large tensors; elements are then chosen by a fixed
// subsampling stream.
inline GradCheckReport grad_check(const std::vector<Param*>& params,
                                  const std::function<double(bool)>& run, double h = 1e-5,
                                  double tol = 1e-4, std::size_t max_elems_per_param = 0) {
    for (Param* p : params) p->zero_grad();
    run(true);
    std::vector<Tensor> analytic;
    analytic.reserve(params.size());
    for (Param* p : params) analytic.push_back(p->grad);

    GradCheckReport report;
    for (std::size_t pi = 0; pi < params.size(); ++pi) {
        Param& p = *params[pi];
        std::vector<std::size_t> elems;
        if (max_elems_per_param > 0 && p.value.numel() > max_elems_per_param) {
            Rng sub = Rng::substream(0x6772616463686bull, pi);
            elems = sub.sample_without_replacement(p.value.numel(), max_elems_per_param);
            std::sort(elems.begin(), elems.end());
        } else {
            elems.resize(p.value.numel());
            for (std::size_t i = 0; i < elems.size(); ++i) elems[i] = i;
        }
        GradCheckEntry entry{p.name, 0.0};
        for (std::size_t ei : elems) {
            const double orig = p.value.data[ei];
            p.value.data[ei] = orig + h;
            const double f_plus = run(false);
            p.value.data[ei] = orig - h;
            const double f_minus = run(false);
            p.value.data[ei] = orig;
            const double numeric = (f_plus - f_minus) / (2.0 * h);
            const double rel = std::fabs(analytic[pi].data[ei] - numeric) / (std::fabs(numeric) + 1e-8);
            entry.max_rel_err = std::max(entry.max_rel_err, rel);
            ++report.elements_checked;
        }
        if (entry.max_rel_err > report.max_rel_err) {
            report.max_rel_err = entry.max_rel_err;
            report.worst_param = entry.name;
        }
        report.per_param.push_back(std::move(entry));
    }
    report.pass = report.max_rel_err < tol;
    return report;
}

}  // namespace mmpt
