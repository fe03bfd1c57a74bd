#pragma once

#include <algorithm>
#include <cstdint>
#include <initializer_list>
#include <numeric>
#include <vector>

#include "asdm/common.hpp"

namespace asdm {

using Shape = std::vector<std::int64_t>;

inline std::int64_t shape_numel(const Shape& s) {
    std::int64_t n = 1;
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

// Dense row-major fp64 tensor. Plain value type; autograd lives in Node/Var.
struct Tensor {
    Shape shape;
    std::vector<double> data;

    Tensor() = default;
    explicit Tensor(Shape s) : shape(std::move(s)), data(static_cast<std::size_t>(shape_numel(shape)), 0.0) {}
    Tensor(Shape s, std::vector<double> d) : shape(std::move(s)), data(std::move(d)) {
        if (static_cast<std::int64_t>(data.size()) != shape_numel(shape))
            throw ShapeError(msg("tensor data length ", data.size(), " does not match shape ", shape_str(shape)));
    }

    static Tensor zeros(Shape s) { return Tensor(std::move(s)); }

    static Tensor full(Shape s, double v) {
        Tensor t(std::move(s));
        std::fill(t.data.begin(), t.data.end(), v);
        return t;
    }

    static Tensor scalar(double v) { return Tensor({1}, {v}); }

    static Tensor randn(Shape s, Rng& rng, double scale = 1.0) {
        Tensor t(std::move(s));
        for (auto& v : t.data) v = rng.normal() * scale;
        return t;
    }

    static Tensor rand_uniform(Shape s, Rng& rng, double lo, double hi) {
        Tensor t(std::move(s));
        for (auto& v : t.data) v = rng.uniform(lo, hi);
        return t;
    }

    std::int64_t numel() const { return static_cast<std::int64_t>(data.size()); }
    std::int64_t dim(std::size_t i) const { return shape.at(i); }
    std::size_t ndim() const { return shape.size(); }

    double& operator[](std::int64_t i) { return data[static_cast<std::size_t>(i)]; }
    double operator[](std::int64_t i) const { return data[static_cast<std::size_t>(i)]; }

    // 4-d index helper (NCHW and friends)
    double& at4(std::int64_t a, std::int64_t b, std::int64_t c, std::int64_t d) {
        return data[static_cast<std::size_t>(((a * shape[1] + b) * shape[2] + c) * shape[3] + d)];
    }
    double at4(std::int64_t a, std::int64_t b, std::int64_t c, std::int64_t d) const {
        return data[static_cast<std::size_t>(((a * shape[1] + b) * shape[2] + c) * shape[3] + d)];
    }
    double& at3(std::int64_t a, std::int64_t b, std::int64_t c) {
        return data[static_cast<std::size_t>((a * shape[1] + b) * shape[2] + c)];
    }
    double at3(std::int64_t a, std::int64_t b, std::int64_t c) const {
        return data[static_cast<std::size_t>((a * shape[1] + b) * shape[2] + c)];
    }
    double& at2(std::int64_t a, std::int64_t b) { return data[static_cast<std::size_t>(a * shape[1] + b)]; }
    double at2(std::int64_t a, std::int64_t b) const { return data[static_cast<std::size_t>(a * shape[1] + b)]; }

    bool same_shape(const Tensor& o) const { return shape == o.shape; }

    bool all_finite() const {
        for (double v : data)
            if (!std::isfinite(v)) return false;
        return true;
    }

    double max_abs() const {
        double m = 0.0;
        for (double v : data) m = std::max(m, std::abs(v));
        return m;
    }

    double l2_norm() const {
        double s = 0.0;
        for (double v : data) s += v * v;
        return std::sqrt(s);
    }
};

inline bool bitwise_equal(const Tensor& a, const Tensor& b) {
    if (a.shape != b.shape) return false;
    for (std::size_t i = 0; i < a.data.size(); ++i)
        if (a.data[i] != b.data[i]) return false;
    return true;
}

inline double max_rel_err(const Tensor& a, const Tensor& b, double floor = 1e-12) {
    if (a.shape != b.shape)
        throw ShapeError(msg("max_rel_err shape mismatch ", shape_str(a.shape), " vs ", shape_str(b.shape)));
    double m = 0.0;
    for (std::size_t i = 0; i < a.data.size(); ++i) {
        double denom = std::max({std::abs(a.data[i]), std::abs(b.data[i]), floor});
        m = std::max(m, std::abs(a.data[i] - b.data[i]) / denom);
    }
    return m;
}

inline double max_abs_err(const Tensor& a, const Tensor& b) {
    if (a.shape != b.shape)
        throw ShapeError(msg("max_abs_err shape mismatch ", shape_str(a.shape), " vs ", shape_str(b.shape)));
    double m = 0.0;
    for (std::size_t i = 0; i < a.data.size(); ++i) m = std::max(m, std::abs(a.data[i] - b.data[i]));
    return m;
}

}  // namespace asdm
