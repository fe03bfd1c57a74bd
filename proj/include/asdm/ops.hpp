#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

#include "asdm/autograd.hpp"

namespace asdm {

// ---------------------------------------------------------------------------
// FLOP accounting. Operators add to the active counter (if any) on the
// forward pass. Multiply-accumulates count as 2 FLOPs; elementwise math is
// counted at 1 FLOP per output element under "other".
// ---------------------------------------------------------------------------

struct FlopCounts {
    double conv = 0.0;
    double linear = 0.0;
    double attention = 0.0;
    double other = 0.0;

    double total() const { return conv + linear + attention + other; }

    FlopCounts& operator+=(const FlopCounts& o) {
        conv += o.conv;
        linear += o.linear;
        attention += o.attention;
        other += o.other;
        return *this;
    }
};

inline FlopCounts*& active_flop_counter() {
    static FlopCounts* active = nullptr;
    return active;
}

// RAII scope that captures runtime FLOP counts of every op executed inside it.
struct FlopScope {
    FlopCounts counts;
    FlopCounts* prev;
    FlopScope() : prev(active_flop_counter()) { active_flop_counter() = &counts; }
    ~FlopScope() { active_flop_counter() = prev; }
    FlopScope(const FlopScope&) = delete;
    FlopScope& operator=(const FlopScope&) = delete;
};

namespace flops {
inline void conv(double f) {
    if (auto* c = active_flop_counter()) c->conv += f;
}
inline void linear(double f) {
    if (auto* c = active_flop_counter()) c->linear += f;
}
inline void attention(double f) {
    if (auto* c = active_flop_counter()) c->attention += f;
}
inline void other(double f) {
    if (auto* c = active_flop_counter()) c->other += f;
}
}  // namespace flops

// ---------------------------------------------------------------------------
// Elementwise and reduction ops
// ---------------------------------------------------------------------------

inline Var add(const Var& a, const Var& b) {
    if (a->value.shape != b->value.shape)
        throw ShapeError(msg("add shape mismatch ", shape_str(a->value.shape), " vs ", shape_str(b->value.shape)));
    Tensor out(a->value.shape);
    for (std::int64_t i = 0; i < out.numel(); ++i) out[i] = a->value[i] + b->value[i];
    flops::other(static_cast<double>(out.numel()));
    return make_op(std::move(out), "add", {a, b}, [](Node& n) {
        for (int k = 0; k < 2; ++k) {
            auto& in = n.inputs[k];
            if (!in->requires_grad) continue;
            Tensor& g = in->ensure_grad();
            for (std::int64_t i = 0; i < g.numel(); ++i) g[i] += n.grad[i];
        }
    });
}

inline Var sub(const Var& a, const Var& b) {
    if (a->value.shape != b->value.shape)
        throw ShapeError(msg("sub shape mismatch ", shape_str(a->value.shape), " vs ", shape_str(b->value.shape)));
    Tensor out(a->value.shape);
    for (std::int64_t i = 0; i < out.numel(); ++i) out[i] = a->value[i] - b->value[i];
    flops::other(static_cast<double>(out.numel()));
    return make_op(std::move(out), "sub", {a, b}, [](Node& n) {
        if (n.inputs[0]->requires_grad) {
            Tensor& g = n.inputs[0]->ensure_grad();
            for (std::int64_t i = 0; i < g.numel(); ++i) g[i] += n.grad[i];
        }
        if (n.inputs[1]->requires_grad) {
            Tensor& g = n.inputs[1]->ensure_grad();
            for (std::int64_t i = 0; i < g.numel(); ++i) g[i] -= n.grad[i];
        }
    });
}

inline Var mul(const Var& a, const Var& b) {
    if (a->value.shape != b->value.shape)
        throw ShapeError(msg("mul shape mismatch ", shape_str(a->value.shape), " vs ", shape_str(b->value.shape)));
    Tensor out(a->value.shape);
    for (std::int64_t i = 0; i < out.numel(); ++i) out[i] = a->value[i] * b->value[i];
    flops::other(static_cast<double>(out.numel()));
    return make_op(std::move(out), "mul", {a, b}, [](Node& n) {
        if (n.inputs[0]->requires_grad) {
            Tensor& g = n.inputs[0]->ensure_grad();
            for (std::int64_t i = 0; i < g.numel(); ++i) g[i] += n.grad[i] * n.inputs[1]->value[i];
        }
        if (n.inputs[1]->requires_grad) {
            Tensor& g = n.inputs[1]->ensure_grad();
            for (std::int64_t i = 0; i < g.numel(); ++i) g[i] += n.grad[i] * n.inputs[0]->value[i];
        }
    });
}

inline Var scale(const Var& a, double c) {
    Tensor out(a->value.shape);
    for (std::int64_t i = 0; i < out.numel(); ++i) out[i] = a->value[i] * c;
    flops::other(static_cast<double>(out.numel()));
    return make_op(std::move(out), "scale", {a}, [c](Node& n) {
        if (!n.inputs[0]->requires_grad) return;
        Tensor& g = n.inputs[0]->ensure_grad();
        for (std::int64_t i = 0; i < g.numel(); ++i) g[i] += n.grad[i] * c;
    });
}

// x: NCHW, b: [C]; adds b[c] to every spatial position
inline Var add_channel_bias(const Var& x, const Var& b) {
    const Tensor& xv = x->value;
    if (xv.ndim() != 4 || b->value.ndim() != 1 || b->value.dim(0) != xv.dim(1))
        throw ShapeError(msg("add_channel_bias expects NCHW + [C], got ", shape_str(xv.shape), " and ",
                             shape_str(b->value.shape)));
    Tensor out(xv.shape);
    std::int64_t N = xv.dim(0), C = xv.dim(1), HW = xv.dim(2) * xv.dim(3);
    for (std::int64_t n = 0; n < N; ++n)
        for (std::int64_t c = 0; c < C; ++c) {
            double bv = b->value[c];
            const double* xp = xv.data.data() + (n * C + c) * HW;
            double* op = out.data.data() + (n * C + c) * HW;
            for (std::int64_t i = 0; i < HW; ++i) op[i] = xp[i] + bv;
        }
    flops::other(static_cast<double>(out.numel()));
    return make_op(std::move(out), "add_channel_bias", {x, b}, [N, C, HW](Node& n) {
        if (n.inputs[0]->requires_grad) {
            Tensor& g = n.inputs[0]->ensure_grad();
            for (std::int64_t i = 0; i < g.numel(); ++i) g[i] += n.grad[i];
        }
        if (n.inputs[1]->requires_grad) {
            Tensor& g = n.inputs[1]->ensure_grad();
            for (std::int64_t s = 0; s < N; ++s)
                for (std::int64_t c = 0; c < C; ++c) {
                    const double* gp = n.grad.data.data() + (s * C + c) * HW;
                    double acc = 0.0;
                    for (std::int64_t i = 0; i < HW; ++i) acc += gp[i];
                    g[c] += acc;
                }
        }
    });
}

inline Var sum_all(const Var& a) {
    double s = 0.0;
    for (std::int64_t i = 0; i < a->value.numel(); ++i) s += a->value[i];
    flops::other(static_cast<double>(a->value.numel()));
    return make_op(Tensor::scalar(s), "sum", {a}, [](Node& n) {
        if (!n.inputs[0]->requires_grad) return;
        Tensor& g = n.inputs[0]->ensure_grad();
        double gv = n.grad[0];
        for (std::int64_t i = 0; i < g.numel(); ++i) g[i] += gv;
    });
}

inline Var mean_all(const Var& a) {
    std::int64_t m = a->value.numel();
    double s = 0.0;
    for (std::int64_t i = 0; i < m; ++i) s += a->value[i];
    flops::other(static_cast<double>(m));
    return make_op(Tensor::scalar(s / static_cast<double>(m)), "mean", {a}, [m](Node& n) {
        if (!n.inputs[0]->requires_grad) return;
        Tensor& g = n.inputs[0]->ensure_grad();
        double gv = n.grad[0] / static_cast<double>(m);
        for (std::int64_t i = 0; i < g.numel(); ++i) g[i] += gv;
    });
}

// mean squared error over all elements
inline Var mse(const Var& a, const Var& b) {
    if (a->value.shape != b->value.shape)
        throw ShapeError(msg("mse shape mismatch ", shape_str(a->value.shape), " vs ", shape_str(b->value.shape)));
    std::int64_t m = a->value.numel();
    double s = 0.0;
    for (std::int64_t i = 0; i < m; ++i) {
        double d = a->value[i] - b->value[i];
        s += d * d;
    }
    flops::other(3.0 * static_cast<double>(m));
    return make_op(Tensor::scalar(s / static_cast<double>(m)), "mse", {a, b}, [m](Node& n) {
        double gv = 2.0 * n.grad[0] / static_cast<double>(m);
        const Tensor& av = n.inputs[0]->value;
        const Tensor& bv = n.inputs[1]->value;
        if (n.inputs[0]->requires_grad) {
            Tensor& g = n.inputs[0]->ensure_grad();
            for (std::int64_t i = 0; i < m; ++i) g[i] += gv * (av[i] - bv[i]);
        }
        if (n.inputs[1]->requires_grad) {
            Tensor& g = n.inputs[1]->ensure_grad();
            for (std::int64_t i = 0; i < m; ++i) g[i] -= gv * (av[i] - bv[i]);
        }
    });
}

// ---------------------------------------------------------------------------
// Activations
// ---------------------------------------------------------------------------

inline Var silu(const Var& a) {
    Tensor out(a->value.shape);
    for (std::int64_t i = 0; i < out.numel(); ++i) {
        double x = a->value[i];
        out[i] = x / (1.0 + std::exp(-x));
    }
    flops::other(static_cast<double>(out.numel()));
    return make_op(std::move(out), "silu", {a}, [](Node& n) {
        if (!n.inputs[0]->requires_grad) return;
        Tensor& g = n.inputs[0]->ensure_grad();
        for (std::int64_t i = 0; i < g.numel(); ++i) {
            double x = n.inputs[0]->value[i];
            double s = 1.0 / (1.0 + std::exp(-x));
            g[i] += n.grad[i] * (s * (1.0 + x * (1.0 - s)));
        }
    });
}

inline Var gelu(const Var& a) {
    constexpr double inv_sqrt2 = 0.70710678118654752440;
    constexpr double inv_sqrt2pi = 0.39894228040143267794;
    Tensor out(a->value.shape);
    for (std::int64_t i = 0; i < out.numel(); ++i) {
        double x = a->value[i];
        out[i] = 0.5 * x * (1.0 + std::erf(x * inv_sqrt2));
    }
    flops::other(static_cast<double>(out.numel()));
    return make_op(std::move(out), "gelu", {a}, [](Node& n) {
        if (!n.inputs[0]->requires_grad) return;
        Tensor& g = n.inputs[0]->ensure_grad();
        for (std::int64_t i = 0; i < g.numel(); ++i) {
            double x = n.inputs[0]->value[i];
            double cdf = 0.5 * (1.0 + std::erf(x * inv_sqrt2));
            double pdf = inv_sqrt2pi * std::exp(-0.5 * x * x);
            g[i] += n.grad[i] * (cdf + x * pdf);
        }
    });
}

// softmax over the last dimension
inline Var softmax_lastdim(const Var& a) {
    const Tensor& av = a->value;
    if (av.ndim() < 1) throw ShapeError("softmax_lastdim requires rank >= 1");
    std::int64_t D = av.shape.back();
    std::int64_t rows = av.numel() / D;
    Tensor out(av.shape);
    for (std::int64_t r = 0; r < rows; ++r) {
        const double* xp = av.data.data() + r * D;
        double* op = out.data.data() + r * D;
        double mx = xp[0];
        for (std::int64_t i = 1; i < D; ++i) mx = std::max(mx, xp[i]);
        double s = 0.0;
        for (std::int64_t i = 0; i < D; ++i) {
            op[i] = std::exp(xp[i] - mx);
            s += op[i];
        }
        for (std::int64_t i = 0; i < D; ++i) op[i] /= s;
    }
    flops::other(3.0 * static_cast<double>(av.numel()));
    return make_op(std::move(out), "softmax", {a}, [D, rows](Node& n) {
        if (!n.inputs[0]->requires_grad) return;
        Tensor& g = n.inputs[0]->ensure_grad();
        for (std::int64_t r = 0; r < rows; ++r) {
            const double* sp = n.value.data.data() + r * D;
            const double* gy = n.grad.data.data() + r * D;
            double dot = 0.0;
            for (std::int64_t i = 0; i < D; ++i) dot += gy[i] * sp[i];
            double* gx = g.data.data() + r * D;
            for (std::int64_t i = 0; i < D; ++i) gx[i] += sp[i] * (gy[i] - dot);
        }
    });
}

// ---------------------------------------------------------------------------
// Shape manipulation
// ---------------------------------------------------------------------------

inline Var reshape(const Var& a, Shape s) {
    if (shape_numel(s) != a->value.numel())
        throw ShapeError(msg("reshape ", shape_str(a->value.shape), " -> ", shape_str(s), ": element count differs"));
    Tensor out(std::move(s), a->value.data);
    return make_op(std::move(out), "reshape", {a}, [](Node& n) {
        if (!n.inputs[0]->requires_grad) return;
        Tensor& g = n.inputs[0]->ensure_grad();
        for (std::int64_t i = 0; i < g.numel(); ++i) g[i] += n.grad[i];
    });
}

// NCHW concat along channels
inline Var concat_channels(const Var& a, const Var& b) {
    const Tensor& av = a->value;
    const Tensor& bv = b->value;
    if (av.ndim() != 4 || bv.ndim() != 4 || av.dim(0) != bv.dim(0) || av.dim(2) != bv.dim(2) ||
        av.dim(3) != bv.dim(3))
        throw ShapeError(
            msg("concat_channels shape mismatch ", shape_str(av.shape), " vs ", shape_str(bv.shape)));
    std::int64_t N = av.dim(0), Ca = av.dim(1), Cb = bv.dim(1), HW = av.dim(2) * av.dim(3);
    Tensor out({N, Ca + Cb, av.dim(2), av.dim(3)});
    for (std::int64_t n = 0; n < N; ++n) {
        std::copy_n(av.data.data() + n * Ca * HW, Ca * HW, out.data.data() + n * (Ca + Cb) * HW);
        std::copy_n(bv.data.data() + n * Cb * HW, Cb * HW, out.data.data() + (n * (Ca + Cb) + Ca) * HW);
    }
    return make_op(std::move(out), "concat_channels", {a, b}, [N, Ca, Cb, HW](Node& n) {
        for (std::int64_t s = 0; s < N; ++s) {
            const double* gp = n.grad.data.data() + s * (Ca + Cb) * HW;
            if (n.inputs[0]->requires_grad) {
                Tensor& g = n.inputs[0]->ensure_grad();
                double* gx = g.data.data() + s * Ca * HW;
                for (std::int64_t i = 0; i < Ca * HW; ++i) gx[i] += gp[i];
            }
            if (n.inputs[1]->requires_grad) {
                Tensor& g = n.inputs[1]->ensure_grad();
                double* gx = g.data.data() + s * Cb * HW;
                for (std::int64_t i = 0; i < Cb * HW; ++i) gx[i] += gp[Ca * HW + i];
            }
        }
    });
}

// slice of the last dimension
inline Var narrow_lastdim(const Var& a, std::int64_t start, std::int64_t len) {
    const Tensor& av = a->value;
    std::int64_t D = av.shape.back();
    if (start < 0 || len <= 0 || start + len > D)
        throw ShapeError(msg("narrow_lastdim [", start, ",", start + len, ") out of range for dim ", D));
    Shape os = av.shape;
    os.back() = len;
    std::int64_t rows = av.numel() / D;
    Tensor out(os);
    for (std::int64_t r = 0; r < rows; ++r)
        std::copy_n(av.data.data() + r * D + start, len, out.data.data() + r * len);
    return make_op(std::move(out), "narrow", {a}, [start, len, D, rows](Node& n) {
        if (!n.inputs[0]->requires_grad) return;
        Tensor& g = n.inputs[0]->ensure_grad();
        for (std::int64_t r = 0; r < rows; ++r) {
            const double* gy = n.grad.data.data() + r * len;
            double* gx = g.data.data() + r * D + start;
            for (std::int64_t i = 0; i < len; ++i) gx[i] += gy[i];
        }
    });
}

inline Var concat_lastdim(const std::vector<Var>& parts) {
    if (parts.empty()) throw ShapeError("concat_lastdim on empty list");
    Shape base = parts[0]->value.shape;
    std::int64_t D = 0;
    for (auto& p : parts) {
        Shape s = p->value.shape;
        if (Shape(s.begin(), s.end() - 1) != Shape(base.begin(), base.end() - 1))
            throw ShapeError(msg("concat_lastdim shape mismatch ", shape_str(base), " vs ", shape_str(s)));
        D += s.back();
    }
    Shape os = base;
    os.back() = D;
    std::int64_t rows = shape_numel(os) / D;
    Tensor out(os);
    std::vector<std::int64_t> widths, offsets;
    std::int64_t off = 0;
    for (auto& p : parts) {
        widths.push_back(p->value.shape.back());
        offsets.push_back(off);
        off += widths.back();
    }
    for (std::size_t k = 0; k < parts.size(); ++k) {
        std::int64_t w = widths[k];
        for (std::int64_t r = 0; r < rows; ++r)
            std::copy_n(parts[k]->value.data.data() + r * w, w, out.data.data() + r * D + offsets[k]);
    }
    return make_op(std::move(out), "concat_lastdim", parts, [D, rows, widths, offsets](Node& n) {
        for (std::size_t k = 0; k < n.inputs.size(); ++k) {
            if (!n.inputs[k]->requires_grad) continue;
            Tensor& g = n.inputs[k]->ensure_grad();
            std::int64_t w = widths[k];
            for (std::int64_t r = 0; r < rows; ++r) {
                const double* gy = n.grad.data.data() + r * D + offsets[k];
                double* gx = g.data.data() + r * w;
                for (std::int64_t i = 0; i < w; ++i) gx[i] += gy[i];
            }
        }
    });
}

// (N, A, B) -> (N, B, A)
inline Var transpose_12(const Var& a) {
    const Tensor& av = a->value;
    if (av.ndim() != 3) throw ShapeError(msg("transpose_12 expects rank-3, got ", shape_str(av.shape)));
    std::int64_t N = av.dim(0), A = av.dim(1), B = av.dim(2);
    Tensor out({N, B, A});
    for (std::int64_t n = 0; n < N; ++n)
        for (std::int64_t i = 0; i < A; ++i)
            for (std::int64_t j = 0; j < B; ++j) out.at3(n, j, i) = av.at3(n, i, j);
    return make_op(std::move(out), "transpose_12", {a}, [N, A, B](Node& n) {
        if (!n.inputs[0]->requires_grad) return;
        Tensor& g = n.inputs[0]->ensure_grad();
        for (std::int64_t s = 0; s < N; ++s)
            for (std::int64_t i = 0; i < A; ++i)
                for (std::int64_t j = 0; j < B; ++j) g.at3(s, i, j) += n.grad.at3(s, j, i);
    });
}

// nearest-neighbour 2x upsample, NCHW
inline Var upsample_nearest2x(const Var& a) {
    const Tensor& av = a->value;
    if (av.ndim() != 4) throw ShapeError(msg("upsample expects NCHW, got ", shape_str(av.shape)));
    std::int64_t N = av.dim(0), C = av.dim(1), H = av.dim(2), W = av.dim(3);
    Tensor out({N, C, 2 * H, 2 * W});
    for (std::int64_t nc = 0; nc < N * C; ++nc) {
        const double* xp = av.data.data() + nc * H * W;
        double* op = out.data.data() + nc * 4 * H * W;
        for (std::int64_t h = 0; h < H; ++h)
            for (std::int64_t w = 0; w < W; ++w) {
                double v = xp[h * W + w];
                op[(2 * h) * 2 * W + 2 * w] = v;
                op[(2 * h) * 2 * W + 2 * w + 1] = v;
                op[(2 * h + 1) * 2 * W + 2 * w] = v;
                op[(2 * h + 1) * 2 * W + 2 * w + 1] = v;
            }
    }
    return make_op(std::move(out), "upsample2x", {a}, [N, C, H, W](Node& n) {
        if (!n.inputs[0]->requires_grad) return;
        Tensor& g = n.inputs[0]->ensure_grad();
        for (std::int64_t nc = 0; nc < N * C; ++nc) {
            const double* gy = n.grad.data.data() + nc * 4 * H * W;
            double* gx = g.data.data() + nc * H * W;
            for (std::int64_t h = 0; h < H; ++h)
                for (std::int64_t w = 0; w < W; ++w)
                    gx[h * W + w] += gy[(2 * h) * 2 * W + 2 * w] + gy[(2 * h) * 2 * W + 2 * w + 1] +
                                     gy[(2 * h + 1) * 2 * W + 2 * w] + gy[(2 * h + 1) * 2 * W + 2 * w + 1];
        }
    });
}

// NCHW -> (N, C) spatial mean
inline Var global_avg_pool(const Var& a) {
    const Tensor& av = a->value;
    if (av.ndim() != 4) throw ShapeError(msg("global_avg_pool expects NCHW, got ", shape_str(av.shape)));
    std::int64_t N = av.dim(0), C = av.dim(1), HW = av.dim(2) * av.dim(3);
    Tensor out({N, C});
    for (std::int64_t nc = 0; nc < N * C; ++nc) {
        const double* xp = av.data.data() + nc * HW;
        double s = 0.0;
        for (std::int64_t i = 0; i < HW; ++i) s += xp[i];
        out[nc] = s / static_cast<double>(HW);
    }
    flops::other(static_cast<double>(av.numel()));
    return make_op(std::move(out), "gap", {a}, [N, C, HW](Node& n) {
        if (!n.inputs[0]->requires_grad) return;
        Tensor& g = n.inputs[0]->ensure_grad();
        for (std::int64_t nc = 0; nc < N * C; ++nc) {
            double gv = n.grad[nc] / static_cast<double>(HW);
            double* gx = g.data.data() + nc * HW;
            for (std::int64_t i = 0; i < HW; ++i) gx[i] += gv;
        }
    });
}

// rows of table selected by token id; ids: (N, L) -> (N, L, D)
inline Var embed(const Var& table, const std::vector<std::vector<int>>& ids) {
    const Tensor& tv = table->value;
    if (tv.ndim() != 2) throw ShapeError(msg("embed table must be 2-d, got ", shape_str(tv.shape)));
    std::int64_t V = tv.dim(0), D = tv.dim(1);
    std::int64_t N = static_cast<std::int64_t>(ids.size());
    if (N == 0) throw ShapeError("embed: empty id batch");
    std::int64_t L = static_cast<std::int64_t>(ids[0].size());
    Tensor out({N, L, D});
    for (std::int64_t n = 0; n < N; ++n) {
        if (static_cast<std::int64_t>(ids[n].size()) != L) throw ShapeError("embed: ragged id batch");
        for (std::int64_t l = 0; l < L; ++l) {
            int id = ids[n][l];
            if (id < 0 || id >= V) throw ContractError(msg("token id ", id, " out of vocab range ", V));
            std::copy_n(tv.data.data() + id * D, D, out.data.data() + (n * L + l) * D);
        }
    }
    auto ids_copy = ids;
    return make_op(std::move(out), "embed", {table}, [ids_copy, D, L](Node& n) {
        if (!n.inputs[0]->requires_grad) return;
        Tensor& g = n.inputs[0]->ensure_grad();
        for (std::size_t s = 0; s < ids_copy.size(); ++s)
            for (std::int64_t l = 0; l < L; ++l) {
                const double* gy = n.grad.data.data() + (static_cast<std::int64_t>(s) * L + l) * D;
                double* gx = g.data.data() + ids_copy[s][l] * D;
                for (std::int64_t i = 0; i < D; ++i) gx[i] += gy[i];
            }
    });
}

// ---------------------------------------------------------------------------
// Linear algebra
// ---------------------------------------------------------------------------

// x: (..., In), W: (Out, In), b: (Out) -> (..., Out)
inline Var linear(const Var& x, const Var& W, const Var& b) {
    const Tensor& xv = x->value;
    const Tensor& Wv = W->value;
    if (Wv.ndim() != 2) throw ShapeError(msg("linear weight must be 2-d, got ", shape_str(Wv.shape)));
    std::int64_t Out = Wv.dim(0), In = Wv.dim(1);
    if (xv.shape.back() != In)
        throw ShapeError(msg("linear input ", shape_str(xv.shape), " incompatible with weight ", shape_str(Wv.shape)));
    if (b->value.ndim() != 1 || b->value.dim(0) != Out)
        throw ShapeError(msg("linear bias must be [", Out, "], got ", shape_str(b->value.shape)));
    std::int64_t rows = xv.numel() / In;
    Shape os = xv.shape;
    os.back() = Out;
    Tensor out(os);
    // transposed weight scratch so the inner loop streams over outputs
    thread_local std::vector<double> Wt;
    Wt.resize(static_cast<std::size_t>(In * Out));
    for (std::int64_t o = 0; o < Out; ++o)
        for (std::int64_t i = 0; i < In; ++i) Wt[i * Out + o] = Wv.data[o * In + i];
    for (std::int64_t r = 0; r < rows; ++r) {
        const double* xp = xv.data.data() + r * In;
        double* op = out.data.data() + r * Out;
        for (std::int64_t o = 0; o < Out; ++o) op[o] = b->value[o];
        for (std::int64_t i = 0; i < In; ++i) {
            double xi = xp[i];
            const double* wp = Wt.data() + i * Out;
            for (std::int64_t o = 0; o < Out; ++o) op[o] += xi * wp[o];
        }
    }
    flops::linear(2.0 * static_cast<double>(In) * static_cast<double>(Out) * static_cast<double>(rows));
    return make_op(std::move(out), "linear", {x, W, b}, [rows, In, Out](Node& n) {
        const Tensor& xv2 = n.inputs[0]->value;
        const Tensor& Wv2 = n.inputs[1]->value;
        if (n.inputs[0]->requires_grad) {
            Tensor& gx = n.inputs[0]->ensure_grad();
            for (std::int64_t r = 0; r < rows; ++r) {
                const double* gy = n.grad.data.data() + r * Out;
                double* gp = gx.data.data() + r * In;
                for (std::int64_t o = 0; o < Out; ++o) {
                    const double* wp = Wv2.data.data() + o * In;
                    double gv = gy[o];
                    for (std::int64_t i = 0; i < In; ++i) gp[i] += gv * wp[i];
                }
            }
        }
        if (n.inputs[1]->requires_grad) {
            Tensor& gW = n.inputs[1]->ensure_grad();
            for (std::int64_t r = 0; r < rows; ++r) {
                const double* gy = n.grad.data.data() + r * Out;
                const double* xp = xv2.data.data() + r * In;
                for (std::int64_t o = 0; o < Out; ++o) {
                    double gv = gy[o];
                    double* wp = gW.data.data() + o * In;
                    for (std::int64_t i = 0; i < In; ++i) wp[i] += gv * xp[i];
                }
            }
        }
        if (n.inputs[2]->requires_grad) {
            Tensor& gb = n.inputs[2]->ensure_grad();
            for (std::int64_t r = 0; r < rows; ++r) {
                const double* gy = n.grad.data.data() + r * Out;
                for (std::int64_t o = 0; o < Out; ++o) gb[o] += gy[o];
            }
        }
    });
}

// a: (N, Lq, D), b: (N, Lk, D) -> (N, Lq, Lk) = a @ b^T, batched
inline Var matmul_nt(const Var& a, const Var& b) {
    const Tensor& av = a->value;
    const Tensor& bv = b->value;
    if (av.ndim() != 3 || bv.ndim() != 3 || av.dim(0) != bv.dim(0) || av.dim(2) != bv.dim(2))
        throw ShapeError(msg("matmul_nt shape mismatch ", shape_str(av.shape), " vs ", shape_str(bv.shape)));
    std::int64_t N = av.dim(0), Lq = av.dim(1), D = av.dim(2), Lk = bv.dim(1);
    Tensor out({N, Lq, Lk});
    thread_local std::vector<double> bt;  // per-batch transpose of b, (D, Lk)
    bt.resize(static_cast<std::size_t>(D * Lk));
    for (std::int64_t n = 0; n < N; ++n) {
        const double* bb = bv.data.data() + n * Lk * D;
        for (std::int64_t j = 0; j < Lk; ++j)
            for (std::int64_t d = 0; d < D; ++d) bt[d * Lk + j] = bb[j * D + d];
        for (std::int64_t i = 0; i < Lq; ++i) {
            const double* ap = av.data.data() + (n * Lq + i) * D;
            double* op = out.data.data() + (n * Lq + i) * Lk;
            for (std::int64_t j = 0; j < Lk; ++j) op[j] = 0.0;
            for (std::int64_t d = 0; d < D; ++d) {
                double avd = ap[d];
                const double* bp = bt.data() + d * Lk;
                for (std::int64_t j = 0; j < Lk; ++j) op[j] += avd * bp[j];
            }
        }
    }
    flops::attention(2.0 * static_cast<double>(N) * Lq * Lk * D);
    return make_op(std::move(out), "matmul_nt", {a, b}, [N, Lq, Lk, D](Node& n) {
        const Tensor& av2 = n.inputs[0]->value;
        const Tensor& bv2 = n.inputs[1]->value;
        for (std::int64_t s = 0; s < N; ++s)
            for (std::int64_t i = 0; i < Lq; ++i) {
                const double* gy = n.grad.data.data() + (s * Lq + i) * Lk;
                for (std::int64_t j = 0; j < Lk; ++j) {
                    double gv = gy[j];
                    if (gv == 0.0) continue;
                    if (n.inputs[0]->requires_grad) {
                        double* ga = n.inputs[0]->ensure_grad().data.data() + (s * Lq + i) * D;
                        const double* bp = bv2.data.data() + (s * Lk + j) * D;
                        for (std::int64_t d = 0; d < D; ++d) ga[d] += gv * bp[d];
                    }
                    if (n.inputs[1]->requires_grad) {
                        double* gb = n.inputs[1]->ensure_grad().data.data() + (s * Lk + j) * D;
                        const double* ap = av2.data.data() + (s * Lq + i) * D;
                        for (std::int64_t d = 0; d < D; ++d) gb[d] += gv * ap[d];
                    }
                }
            }
    });
}

// a: (N, Lq, Lk), b: (N, Lk, Dv) -> (N, Lq, Dv), batched
inline Var matmul_nn(const Var& a, const Var& b) {
    const Tensor& av = a->value;
    const Tensor& bv = b->value;
    if (av.ndim() != 3 || bv.ndim() != 3 || av.dim(0) != bv.dim(0) || av.dim(2) != bv.dim(1))
        throw ShapeError(msg("matmul_nn shape mismatch ", shape_str(av.shape), " vs ", shape_str(bv.shape)));
    std::int64_t N = av.dim(0), Lq = av.dim(1), Lk = av.dim(2), Dv = bv.dim(2);
    Tensor out({N, Lq, Dv});
    for (std::int64_t n = 0; n < N; ++n)
        for (std::int64_t i = 0; i < Lq; ++i) {
            const double* ap = av.data.data() + (n * Lq + i) * Lk;
            double* op = out.data.data() + (n * Lq + i) * Dv;
            for (std::int64_t j = 0; j < Lk; ++j) {
                double w = ap[j];
                if (w == 0.0) continue;
                const double* bp = bv.data.data() + (n * Lk + j) * Dv;
                for (std::int64_t d = 0; d < Dv; ++d) op[d] += w * bp[d];
            }
        }
    flops::attention(2.0 * static_cast<double>(N) * Lq * Lk * Dv);
    return make_op(std::move(out), "matmul_nn", {a, b}, [N, Lq, Lk, Dv](Node& n) {
        const Tensor& av2 = n.inputs[0]->value;
        const Tensor& bv2 = n.inputs[1]->value;
        for (std::int64_t s = 0; s < N; ++s)
            for (std::int64_t i = 0; i < Lq; ++i) {
                const double* gy = n.grad.data.data() + (s * Lq + i) * Dv;
                if (n.inputs[0]->requires_grad) {
                    double* ga = n.inputs[0]->ensure_grad().data.data() + (s * Lq + i) * Lk;
                    for (std::int64_t j = 0; j < Lk; ++j) {
                        const double* bp = bv2.data.data() + (s * Lk + j) * Dv;
                        double acc = 0.0;
                        for (std::int64_t d = 0; d < Dv; ++d) acc += gy[d] * bp[d];
                        ga[j] += acc;
                    }
                }
                if (n.inputs[1]->requires_grad) {
                    const double* ap = av2.data.data() + (s * Lq + i) * Lk;
                    for (std::int64_t j = 0; j < Lk; ++j) {
                        double w = ap[j];
                        if (w == 0.0) continue;
                        double* gb = n.inputs[1]->ensure_grad().data.data() + (s * Lk + j) * Dv;
                        for (std::int64_t d = 0; d < Dv; ++d) gb[d] += w * gy[d];
                    }
                }
            }
    });
}

// scaled dot-product attention: q (N,Lq,D), k (N,Lk,D), v (N,Lk,Dv)
inline Var attention(const Var& q, const Var& k, const Var& v) {
    const Tensor& qv = q->value;
    const Tensor& kv = k->value;
    const Tensor& vv = v->value;
    if (qv.ndim() != 3 || kv.ndim() != 3 || vv.ndim() != 3)
        throw ShapeError("attention expects rank-3 q, k, v");
    if (kv.dim(1) == 0) throw ShapeError("attention: empty context (Lk = 0)");
    if (qv.dim(0) != kv.dim(0) || qv.dim(0) != vv.dim(0) || qv.dim(2) != kv.dim(2) || kv.dim(1) != vv.dim(1))
        throw ShapeError(msg("attention shape mismatch q=", shape_str(qv.shape), " k=", shape_str(kv.shape),
                             " v=", shape_str(vv.shape)));
    std::int64_t D = qv.dim(2);
    Var scores = matmul_nt(q, k);
    Var weights = softmax_lastdim(scale(scores, 1.0 / std::sqrt(static_cast<double>(D))));
    return matmul_nn(weights, v);
}

// ---------------------------------------------------------------------------
// Convolution
// ---------------------------------------------------------------------------

namespace detail {

inline std::int64_t conv_out_dim(std::int64_t in, std::int64_t k, std::int64_t stride, std::int64_t pad) {
    return (in + 2 * pad - k) / stride + 1;
}

// im2col for one sample, k-major: patch[(ic*KH+kh)*KW+kw][oh*OW+ow]
// fills every slot, writing explicit zeros for padded positions
inline void conv2d_gather_patches(const double* x, double* patch, std::int64_t IC, std::int64_t H, std::int64_t W,
                                  std::int64_t KH, std::int64_t KW, std::int64_t stride, std::int64_t pad,
                                  std::int64_t OH, std::int64_t OW) {
    for (std::int64_t ic = 0; ic < IC; ++ic) {
        const double* xc = x + ic * H * W;
        for (std::int64_t kh = 0; kh < KH; ++kh)
            for (std::int64_t kw = 0; kw < KW; ++kw) {
                double* pk = patch + ((ic * KH + kh) * KW + kw) * OH * OW;
                std::int64_t sh = kw - pad;  // iw = ow*stride + sh
                std::int64_t lo = sh < 0 ? (-sh + stride - 1) / stride : 0;
                std::int64_t hi = std::min(OW, sh >= W ? std::int64_t{0} : (W - sh + stride - 1) / stride);
                for (std::int64_t oh = 0; oh < OH; ++oh) {
                    std::int64_t ih = oh * stride - pad + kh;
                    double* prow = pk + oh * OW;
                    if (ih < 0 || ih >= H) {
                        for (std::int64_t ow = 0; ow < OW; ++ow) prow[ow] = 0.0;
                        continue;
                    }
                    const double* xrow = xc + ih * W + sh;
                    for (std::int64_t ow = 0; ow < lo; ++ow) prow[ow] = 0.0;
                    if (stride == 1)
                        for (std::int64_t ow = lo; ow < hi; ++ow) prow[ow] = xrow[ow];
                    else
                        for (std::int64_t ow = lo; ow < hi; ++ow) prow[ow] = xrow[ow * stride];
                    for (std::int64_t ow = hi; ow < OW; ++ow) prow[ow] = 0.0;
                }
            }
    }
}

// y[oc,:,:] for one sample; accumulation order fixed (ic, kh, kw innermost)
inline void conv2d_sample_forward(const double* x, const double* w, const double* b, double* y,
                                  std::int64_t IC, std::int64_t H, std::int64_t W, std::int64_t OC,
                                  std::int64_t KH, std::int64_t KW, std::int64_t stride, std::int64_t pad,
                                  std::int64_t OH, std::int64_t OW) {
    const std::int64_t K = IC * KH * KW, R = OH * OW;
    const double* pdata;
    thread_local std::vector<double> patch;
    if (KH == 1 && KW == 1 && stride == 1 && pad == 0) {
        pdata = x;  // 1x1: the input already is the patch matrix
    } else {
        patch.resize(static_cast<std::size_t>(K * R));
        conv2d_gather_patches(x, patch.data(), IC, H, W, KH, KW, stride, pad, OH, OW);
        pdata = patch.data();
    }
    // y = w * patch, streaming over output pixels; per pixel the terms land in
    // (ic, kh, kw) order just like the naive loop (padding contributes +0.0)
    for (std::int64_t oc = 0; oc < OC; ++oc) {
        const double* wc = w + oc * K;
        double* yc = y + oc * R;
        double bias = b ? b[oc] : 0.0;
        for (std::int64_t r = 0; r < R; ++r) yc[r] = bias;
        for (std::int64_t k = 0; k < K; ++k) {
            double wv = wc[k];
            const double* pk = pdata + k * R;
            for (std::int64_t r = 0; r < R; ++r) yc[r] += wv * pk[r];
        }
    }
}

inline void conv2d_sample_backward(const double* x, const double* w, const double* gy, double* gx, double* gw,
                                   double* gb, std::int64_t IC, std::int64_t H, std::int64_t W, std::int64_t OC,
                                   std::int64_t KH, std::int64_t KW, std::int64_t stride, std::int64_t pad,
                                   std::int64_t OH, std::int64_t OW) {
    const std::int64_t K = IC * KH * KW, R = OH * OW;
    if (gb)
        for (std::int64_t oc = 0; oc < OC; ++oc) {
            const double* gyc = gy + oc * R;
            for (std::int64_t r = 0; r < R; ++r) gb[oc] += gyc[r];
        }
    const bool one_by_one = (KH == 1 && KW == 1 && stride == 1 && pad == 0);
    if (gw) {
        const double* pdata;
        thread_local std::vector<double> patch;
        if (one_by_one) {
            pdata = x;
        } else {
            patch.resize(static_cast<std::size_t>(K * R));
            conv2d_gather_patches(x, patch.data(), IC, H, W, KH, KW, stride, pad, OH, OW);
            pdata = patch.data();
        }
        for (std::int64_t oc = 0; oc < OC; ++oc) {
            const double* gyc = gy + oc * R;
            double* gwc = gw + oc * K;
            for (std::int64_t k = 0; k < K; ++k) {
                const double* pk = pdata + k * R;
                // four partial sums to break the fp dependency chain
                double a0 = 0, a1 = 0, a2 = 0, a3 = 0;
                std::int64_t r = 0;
                for (; r + 4 <= R; r += 4) {
                    a0 += pk[r] * gyc[r];
                    a1 += pk[r + 1] * gyc[r + 1];
                    a2 += pk[r + 2] * gyc[r + 2];
                    a3 += pk[r + 3] * gyc[r + 3];
                }
                for (; r < R; ++r) a0 += pk[r] * gyc[r];
                gwc[k] += (a0 + a1) + (a2 + a3);
            }
        }
    }
    if (gx) {
        if (one_by_one) {
            // patch-gradient rows are the input-gradient rows themselves
            for (std::int64_t k = 0; k < K; ++k) {
                double* gp = gx + k * R;
                for (std::int64_t oc = 0; oc < OC; ++oc) {
                    double wv = w[oc * K + k];
                    const double* gyc = gy + oc * R;
                    for (std::int64_t r = 0; r < R; ++r) gp[r] += wv * gyc[r];
                }
            }
            return;
        }
        thread_local std::vector<double> gpatch;
        gpatch.resize(static_cast<std::size_t>(K * R));
        for (std::int64_t k = 0; k < K; ++k) {
            double* gp = gpatch.data() + k * R;
            {
                double wv = w[k];
                const double* gyc = gy;
                for (std::int64_t r = 0; r < R; ++r) gp[r] = wv * gyc[r];
            }
            for (std::int64_t oc = 1; oc < OC; ++oc) {
                double wv = w[oc * K + k];
                const double* gyc = gy + oc * R;
                for (std::int64_t r = 0; r < R; ++r) gp[r] += wv * gyc[r];
            }
        }
        // col2im scatter-add back into the input gradient
        for (std::int64_t ic = 0; ic < IC; ++ic) {
            double* gxc = gx + ic * H * W;
            for (std::int64_t kh = 0; kh < KH; ++kh)
                for (std::int64_t kw = 0; kw < KW; ++kw) {
                    const double* gp = gpatch.data() + ((ic * KH + kh) * KW + kw) * R;
                    std::int64_t sh = kw - pad;
                    std::int64_t lo = sh < 0 ? (-sh + stride - 1) / stride : 0;
                    std::int64_t hi = std::min(OW, sh >= W ? std::int64_t{0} : (W - sh + stride - 1) / stride);
                    for (std::int64_t oh = 0; oh < OH; ++oh) {
                        std::int64_t ih = oh * stride - pad + kh;
                        if (ih < 0 || ih >= H) continue;
                        double* gxrow = gxc + ih * W + sh;
                        const double* grow = gp + oh * OW;
                        if (stride == 1)
                            for (std::int64_t ow = lo; ow < hi; ++ow) gxrow[ow] += grow[ow];
                        else
                            for (std::int64_t ow = lo; ow < hi; ++ow) gxrow[ow * stride] += grow[ow];
                    }
                }
        }
    }
}

}  // namespace detail

// x: (N,IC,H,W), w: (OC,IC,KH,KW), b: (OC); zero padding, cross-correlation
inline Var conv2d(const Var& x, const Var& w, const Var& b, std::int64_t stride = 1, std::int64_t pad = 0) {
    const Tensor& xv = x->value;
    const Tensor& wv = w->value;
    if (xv.ndim() != 4 || wv.ndim() != 4)
        throw ShapeError(msg("conv2d expects 4-d input and kernel, got ", shape_str(xv.shape), " and ",
                             shape_str(wv.shape)));
    if (xv.dim(1) != wv.dim(1))
        throw ShapeError(msg("conv2d channel mismatch: input ", shape_str(xv.shape), " vs kernel ",
                             shape_str(wv.shape)));
    if (stride < 1 || pad < 0) throw ContractError("conv2d: stride must be >= 1 and pad >= 0");
    std::int64_t N = xv.dim(0), IC = xv.dim(1), H = xv.dim(2), W = xv.dim(3);
    std::int64_t OC = wv.dim(0), KH = wv.dim(2), KW = wv.dim(3);
    if (b->value.ndim() != 1 || b->value.dim(0) != OC)
        throw ShapeError(msg("conv2d bias must be [", OC, "], got ", shape_str(b->value.shape)));
    std::int64_t OH = detail::conv_out_dim(H, KH, stride, pad);
    std::int64_t OW = detail::conv_out_dim(W, KW, stride, pad);
    if (OH <= 0 || OW <= 0)
        throw ShapeError(msg("conv2d: kernel ", shape_str(wv.shape), " too large for input ", shape_str(xv.shape)));
    Tensor out({N, OC, OH, OW});
    for (std::int64_t n = 0; n < N; ++n)
        detail::conv2d_sample_forward(xv.data.data() + n * IC * H * W, wv.data.data(), b->value.data.data(),
                                      out.data.data() + n * OC * OH * OW, IC, H, W, OC, KH, KW, stride, pad,
                                      OH, OW);
    flops::conv(2.0 * static_cast<double>(KH * KW) * IC * OC * OH * OW * N);
    return make_op(std::move(out), "conv2d", {x, w, b},
                   [N, IC, H, W, OC, KH, KW, stride, pad, OH, OW](Node& n) {
                       const Tensor& xv2 = n.inputs[0]->value;
                       const Tensor& wv2 = n.inputs[1]->value;
                       double* gx = n.inputs[0]->requires_grad ? n.inputs[0]->ensure_grad().data.data() : nullptr;
                       double* gw = n.inputs[1]->requires_grad ? n.inputs[1]->ensure_grad().data.data() : nullptr;
                       double* gb = n.inputs[2]->requires_grad ? n.inputs[2]->ensure_grad().data.data() : nullptr;
                       for (std::int64_t s = 0; s < N; ++s)
                           detail::conv2d_sample_backward(
                               xv2.data.data() + s * IC * H * W, wv2.data.data(),
                               n.grad.data.data() + s * OC * OH * OW, gx ? gx + s * IC * H * W : nullptr, gw,
                               gb, IC, H, W, OC, KH, KW, stride, pad, OH, OW);
                   });
}

// per-sample kernels: x (N,IC,H,W), w (N,OC,IC,KH,KW), b (OC)
inline Var conv2d_batched_kernels(const Var& x, const Var& w, const Var& b, std::int64_t stride = 1,
                                  std::int64_t pad = 0) {
    const Tensor& xv = x->value;
    const Tensor& wv = w->value;
    if (xv.ndim() != 4 || wv.ndim() != 5 || xv.dim(0) != wv.dim(0) || xv.dim(1) != wv.dim(2))
        throw ShapeError(msg("conv2d_batched_kernels shape mismatch: input ", shape_str(xv.shape),
                             " vs kernels ", shape_str(wv.shape)));
    std::int64_t N = xv.dim(0), IC = xv.dim(1), H = xv.dim(2), W = xv.dim(3);
    std::int64_t OC = wv.dim(1), KH = wv.dim(3), KW = wv.dim(4);
    if (b->value.ndim() != 1 || b->value.dim(0) != OC)
        throw ShapeError(msg("conv2d_batched_kernels bias must be [", OC, "], got ", shape_str(b->value.shape)));
    std::int64_t OH = detail::conv_out_dim(H, KH, stride, pad);
    std::int64_t OW = detail::conv_out_dim(W, KW, stride, pad);
    std::int64_t ksz = OC * IC * KH * KW;
    Tensor out({N, OC, OH, OW});
    for (std::int64_t n = 0; n < N; ++n)
        detail::conv2d_sample_forward(xv.data.data() + n * IC * H * W, wv.data.data() + n * ksz,
                                      b->value.data.data(), out.data.data() + n * OC * OH * OW, IC, H, W, OC,
                                      KH, KW, stride, pad, OH, OW);
    flops::conv(2.0 * static_cast<double>(KH * KW) * IC * OC * OH * OW * N);
    return make_op(std::move(out), "conv2d_batched", {x, w, b},
                   [N, IC, H, W, OC, KH, KW, stride, pad, OH, OW, ksz](Node& n) {
                       const Tensor& xv2 = n.inputs[0]->value;
                       const Tensor& wv2 = n.inputs[1]->value;
                       double* gx = n.inputs[0]->requires_grad ? n.inputs[0]->ensure_grad().data.data() : nullptr;
                       double* gw = n.inputs[1]->requires_grad ? n.inputs[1]->ensure_grad().data.data() : nullptr;
                       double* gb = n.inputs[2]->requires_grad ? n.inputs[2]->ensure_grad().data.data() : nullptr;
                       for (std::int64_t s = 0; s < N; ++s)
                           detail::conv2d_sample_backward(
                               xv2.data.data() + s * IC * H * W, wv2.data.data() + s * ksz,
                               n.grad.data.data() + s * OC * OH * OW, gx ? gx + s * IC * H * W : nullptr,
                               gw ? gw + s * ksz : nullptr, gb, IC, H, W, OC, KH, KW, stride, pad, OH, OW);
                   });
}

// r: (N, E) routing weights, experts: (E, ...) -> per-sample mix (N, ...)
inline Var mix_kernels(const Var& r, const Var& experts) {
    const Tensor& rv = r->value;
    const Tensor& ev = experts->value;
    if (rv.ndim() != 2 || ev.ndim() < 2 || rv.dim(1) != ev.dim(0))
        throw ShapeError(msg("mix_kernels shape mismatch: routing ", shape_str(rv.shape), " vs experts ",
                             shape_str(ev.shape)));
    std::int64_t N = rv.dim(0), E = rv.dim(1);
    std::int64_t K = ev.numel() / E;
    Shape os;
    os.push_back(N);
    for (std::size_t i = 1; i < ev.shape.size(); ++i) os.push_back(ev.shape[i]);
    Tensor out(os);
    for (std::int64_t n = 0; n < N; ++n) {
        double* op = out.data.data() + n * K;
        for (std::int64_t e = 0; e < E; ++e) {
            double w = rv.at2(n, e);
            const double* ep = ev.data.data() + e * K;
            for (std::int64_t i = 0; i < K; ++i) op[i] += w * ep[i];
        }
    }
    flops::other(2.0 * static_cast<double>(N * E) * K);
    return make_op(std::move(out), "mix_kernels", {r, experts}, [N, E, K](Node& n) {
        const Tensor& rv2 = n.inputs[0]->value;
        const Tensor& ev2 = n.inputs[1]->value;
        for (std::int64_t s = 0; s < N; ++s) {
            const double* gy = n.grad.data.data() + s * K;
            for (std::int64_t e = 0; e < E; ++e) {
                const double* ep = ev2.data.data() + e * K;
                if (n.inputs[0]->requires_grad) {
                    double acc = 0.0;
                    for (std::int64_t i = 0; i < K; ++i) acc += gy[i] * ep[i];
                    n.inputs[0]->ensure_grad().at2(s, e) += acc;
                }
                if (n.inputs[1]->requires_grad) {
                    double w = rv2.at2(s, e);
                    double* ge = n.inputs[1]->ensure_grad().data.data() + e * K;
                    for (std::int64_t i = 0; i < K; ++i) ge[i] += w * gy[i];
                }
            }
        }
    });
}

// ---------------------------------------------------------------------------
// Normalization
// ---------------------------------------------------------------------------

// x: NCHW; statistics over each (sample, group); gamma/beta per channel
inline Var group_norm(const Var& x, std::int64_t groups, const Var& gamma, const Var& beta,
                      double eps = 1e-5) {
    const Tensor& xv = x->value;
    if (xv.ndim() != 4) throw ShapeError(msg("group_norm expects NCHW, got ", shape_str(xv.shape)));
    std::int64_t N = xv.dim(0), C = xv.dim(1), HW = xv.dim(2) * xv.dim(3);
    if (groups < 1 || C % groups != 0)
        throw ConfigError(msg("group_norm: C=", C, " not divisible by groups=", groups));
    if (gamma->value.numel() != C || beta->value.numel() != C)
        throw ShapeError(msg("group_norm affine params must be [", C, "]"));
    std::int64_t cpg = C / groups;
    std::int64_t m = cpg * HW;  // elements per (n, group)
    Tensor out(xv.shape);
    Tensor mean({N, groups}), inv_std({N, groups});
    for (std::int64_t n = 0; n < N; ++n)
        for (std::int64_t g = 0; g < groups; ++g) {
            const double* xp = xv.data.data() + (n * C + g * cpg) * HW;
            double mu = 0.0;
            for (std::int64_t i = 0; i < m; ++i) mu += xp[i];
            mu /= static_cast<double>(m);
            double var = 0.0;
            for (std::int64_t i = 0; i < m; ++i) {
                double d = xp[i] - mu;
                var += d * d;
            }
            var /= static_cast<double>(m);
            double is = 1.0 / std::sqrt(var + eps);
            mean.at2(n, g) = mu;
            inv_std.at2(n, g) = is;
            for (std::int64_t c = 0; c < cpg; ++c) {
                double ga = gamma->value[g * cpg + c];
                double be = beta->value[g * cpg + c];
                const double* xc = xp + c * HW;
                double* oc = out.data.data() + (n * C + g * cpg + c) * HW;
                for (std::int64_t i = 0; i < HW; ++i) oc[i] = (xc[i] - mu) * is * ga + be;
            }
        }
    flops::other(static_cast<double>(xv.numel()));
    return make_op(std::move(out), "group_norm", {x, gamma, beta},
                   [N, C, HW, groups, cpg, m, mean, inv_std](Node& n) {
                       const Tensor& xv2 = n.inputs[0]->value;
                       const Tensor& ga = n.inputs[1]->value;
                       for (std::int64_t s = 0; s < N; ++s)
                           for (std::int64_t g = 0; g < groups; ++g) {
                               double mu = mean.at2(s, g);
                               double is = inv_std.at2(s, g);
                               // dxhat, plus reductions for the mean/var terms
                               double sum_dxhat = 0.0, sum_dxhat_xhat = 0.0;
                               for (std::int64_t c = 0; c < cpg; ++c) {
                                   std::int64_t base = (s * C + g * cpg + c) * HW;
                                   double gch = ga[g * cpg + c];
                                   for (std::int64_t i = 0; i < HW; ++i) {
                                       double xhat = (xv2.data[base + i] - mu) * is;
                                       double dxh = n.grad.data[base + i] * gch;
                                       sum_dxhat += dxh;
                                       sum_dxhat_xhat += dxh * xhat;
                                   }
                               }
                               double inv_m = 1.0 / static_cast<double>(m);
                               for (std::int64_t c = 0; c < cpg; ++c) {
                                   std::int64_t base = (s * C + g * cpg + c) * HW;
                                   double gch = ga[g * cpg + c];
                                   for (std::int64_t i = 0; i < HW; ++i) {
                                       double xhat = (xv2.data[base + i] - mu) * is;
                                       double gy = n.grad.data[base + i];
                                       if (n.inputs[0]->requires_grad) {
                                           double dxh = gy * gch;
                                           n.inputs[0]->ensure_grad().data[base + i] +=
                                               is * (dxh - inv_m * sum_dxhat - xhat * inv_m * sum_dxhat_xhat);
                                       }
                                       if (n.inputs[1]->requires_grad)
                                           n.inputs[1]->ensure_grad()[g * cpg + c] += gy * xhat;
                                       if (n.inputs[2]->requires_grad)
                                           n.inputs[2]->ensure_grad()[g * cpg + c] += gy;
                                   }
                               }
                           }
                   });
}

// x: (..., D), statistics per row over the last dim; gamma/beta: [D]
inline Var layer_norm(const Var& x, const Var& gamma, const Var& beta, double eps = 1e-5) {
    const Tensor& xv = x->value;
    std::int64_t D = xv.shape.back();
    if (gamma->value.numel() != D || beta->value.numel() != D)
        throw ShapeError(msg("layer_norm affine params must be [", D, "]"));
    std::int64_t rows = xv.numel() / D;
    Tensor out(xv.shape);
    Tensor mean({rows}), inv_std({rows});
    for (std::int64_t r = 0; r < rows; ++r) {
        const double* xp = xv.data.data() + r * D;
        double mu = 0.0;
        for (std::int64_t i = 0; i < D; ++i) mu += xp[i];
        mu /= static_cast<double>(D);
        double var = 0.0;
        for (std::int64_t i = 0; i < D; ++i) {
            double d = xp[i] - mu;
            var += d * d;
        }
        var /= static_cast<double>(D);
        double is = 1.0 / std::sqrt(var + eps);
        mean[r] = mu;
        inv_std[r] = is;
        double* op = out.data.data() + r * D;
        for (std::int64_t i = 0; i < D; ++i) op[i] = (xp[i] - mu) * is * gamma->value[i] + beta->value[i];
    }
    flops::other(static_cast<double>(xv.numel()));
    return make_op(std::move(out), "layer_norm", {x, gamma, beta}, [rows, D, mean, inv_std](Node& n) {
        const Tensor& xv2 = n.inputs[0]->value;
        const Tensor& ga = n.inputs[1]->value;
        for (std::int64_t r = 0; r < rows; ++r) {
            double mu = mean[r];
            double is = inv_std[r];
            const double* xp = xv2.data.data() + r * D;
            const double* gy = n.grad.data.data() + r * D;
            double sum_dxhat = 0.0, sum_dxhat_xhat = 0.0;
            for (std::int64_t i = 0; i < D; ++i) {
                double xhat = (xp[i] - mu) * is;
                double dxh = gy[i] * ga[i];
                sum_dxhat += dxh;
                sum_dxhat_xhat += dxh * xhat;
            }
            double inv_d = 1.0 / static_cast<double>(D);
            for (std::int64_t i = 0; i < D; ++i) {
                double xhat = (xp[i] - mu) * is;
                if (n.inputs[0]->requires_grad) {
                    double dxh = gy[i] * ga[i];
                    n.inputs[0]->ensure_grad().data[r * D + i] +=
                        is * (dxh - inv_d * sum_dxhat - xhat * inv_d * sum_dxhat_xhat);
                }
                if (n.inputs[1]->requires_grad) n.inputs[1]->ensure_grad()[i] += gy[i] * xhat;
                if (n.inputs[2]->requires_grad) n.inputs[2]->ensure_grad()[i] += gy[i];
            }
        }
    });
}

}  // namespace asdm
