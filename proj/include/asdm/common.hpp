#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>

namespace asdm {

struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Tensor/operator dimension mismatches.
struct ShapeError : Error {
    using Error::Error;
};

// Invalid specs, plans, or config documents.
struct ConfigError : Error {
    using Error::Error;
};

// API contract violations (non-scalar backward root, out-of-range step, ...).
struct ContractError : Error {
    using Error::Error;
};

// Non-finite values during sampling or training.
struct DivergenceError : Error {
    using Error::Error;
};

// Corrupt or unsupported checkpoint files.
struct IoError : Error {
    using Error::Error;
};

namespace detail {
inline void msg_append(std::ostringstream&) {}
template <typename T, typename... Rest>
void msg_append(std::ostringstream& oss, T&& v, Rest&&... rest) {
    oss << std::forward<T>(v);
    msg_append(oss, std::forward<Rest>(rest)...);
}
}  // namespace detail

template <typename... Args>
std::string msg(Args&&... args) {
    std::ostringstream oss;
    detail::msg_append(oss, std::forward<Args>(args)...);
    return oss.str();
}

// Deterministic RNG. All randomness in the project flows through this class so
// results are bit-reproducible across runs and platforms: uniforms come from
// the top 53 bits of a mt19937_64 draw, normals from a cache-free Box-Muller.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : gen_(seed) {}

    std::uint64_t next_u64() { return gen_(); }

    double uniform() {  // [0, 1)
        return static_cast<double>(gen_() >> 11) * 0x1.0p-53;
    }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    double normal() {
        double u1 = uniform();
        double u2 = uniform();
        // shift u1 into (0,1] so log is finite
        u1 = 1.0 - u1;
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * 3.14159265358979323846 * u2);
    }

    // uniform integer in [0, n)
    std::int64_t randint(std::int64_t n) {
        return static_cast<std::int64_t>(gen_() % static_cast<std::uint64_t>(n));
    }

private:
    std::mt19937_64 gen_;
};

}  // namespace asdm
