#pragma once

#include <cmath>
#include <cstddef>
#include <numeric>
#include <string>
#include <vector>

#include "mmpt/errors.hpp"
#include "mmpt/rng.hpp"

namespace mmpt {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& s) {
    std::size_t n = 1;
    for (auto d : s) n *= d;
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::string out = "[";
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (i) out += ",";
        out += std::to_string(s[i]);
    }
    return out + "]";
}

// Dense row-major double tensor. Plain value type: the autodiff graph, the
// parameter store and the checkpoint format all pass these around by value.
struct Tensor {
    Shape shape;
    std::vector<double> data;

    Tensor() = default;
    explicit Tensor(Shape s) : shape(std::move(s)), data(shape_numel(shape), 0.0) {}
    Tensor(Shape s, std::vector<double> values) : shape(std::move(s)), data(std::move(values)) {
        if (data.size() != shape_numel(shape))
            throw ShapeError("Tensor: data size " + std::to_string(data.size()) +
                             " does not match shape " + shape_str(shape));
    }

    static Tensor zeros(Shape s) { return Tensor(std::move(s)); }

    static Tensor full(Shape s, double v) {
        Tensor t(std::move(s));
        std::fill(t.data.begin(), t.data.end(), v);
        return t;
    }

    static Tensor scalar(double v) { return Tensor({1}, {v}); }

    static Tensor randn(Shape s, Rng& rng, double sigma = 1.0) {
        Tensor t(std::move(s));
        for (auto& v : t.data) v = rng.normal(0.0, sigma);
        return t;
    }

    static Tensor rand_uniform(Shape s, Rng& rng, double lo, double hi) {
        Tensor t(std::move(s));
        for (auto& v : t.data) v = rng.uniform(lo, hi);
        return t;
    }

    static Tensor identity(std::size_t n) {
        Tensor t({n, n});
        for (std::size_t i = 0; i < n; ++i) t.data[i * n + i] = 1.0;
        return t;
    }

    std::size_t numel() const { return data.size(); }
    std::size_t ndim() const { return shape.size(); }

    // 2-D accessors; most of the model works on matrices.
    std::size_t rows() const {
        require_ndim(2);
        return shape[0];
    }
    std::size_t cols() const {
        require_ndim(2);
        return shape[1];
    }
    double& at(std::size_t r, std::size_t c) { return data[r * cols_unchecked() + c]; }
    double at(std::size_t r, std::size_t c) const { return data[r * cols_unchecked() + c]; }

    bool same_shape(const Tensor& o) const { return shape == o.shape; }

    bool all_finite() const {
        for (double v : data)
            if (!std::isfinite(v)) return false;
        return true;
    }

    void fill(double v) { std::fill(data.begin(), data.end(), v); }

    double item() const {
        if (numel() != 1) throw ShapeError("Tensor::item: numel " + std::to_string(numel()));
        return data[0];
    }

  private:
    void require_ndim(std::size_t n) const {
        if (shape.size() != n)
            throw ShapeError("Tensor: expected ndim " + std::to_string(n) + ", got shape " +
                             shape_str(shape));
    }
    std::size_t cols_unchecked() const { return shape.back(); }
};

inline bool tensors_equal(const Tensor& a, const Tensor& b) {
    return a.shape == b.shape && a.data == b.data;
}

inline double max_abs_diff(const Tensor& a, const Tensor& b) {
    if (!a.same_shape(b)) throw ShapeError("max_abs_diff: shape mismatch");
    double m = 0.0;
    for (std::size_t i = 0; i < a.data.size(); ++i)
        m = std::max(m, std::fabs(a.data[i] - b.data[i]));
    return m;
}

}  // namespace mmpt
