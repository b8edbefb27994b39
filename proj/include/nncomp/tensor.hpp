#pragma once

#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <functional>
#include <initializer_list>
#include <numeric>
#include <random>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

namespace nncomp {

using Shape = std::vector<int64_t>;

inline int64_t shape_numel(const Shape& s) {
    int64_t n = 1;
    for (int64_t d : s) n *= d;
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::string r = "[";
    for (size_t i = 0; i < s.size(); ++i) {
        if (i) r += ",";
        r += std::to_string(s[i]);
    }
    return r + "]";
}

/// Dense row-major tensor of real values. Immutable by convention once it
/// enters a forward graph; ops allocate fresh outputs.
template <typename T>
struct Tensor {
    Shape shape;
    std::vector<T> data;

    Tensor() = default;
    explicit Tensor(Shape s) : shape(std::move(s)), data(static_cast<size_t>(shape_numel(shape)), T(0)) {}
    Tensor(Shape s, std::vector<T> d) : shape(std::move(s)), data(std::move(d)) {
        if (static_cast<int64_t>(data.size()) != shape_numel(shape))
            throw std::invalid_argument("tensor: data length does not match shape " + shape_str(shape));
    }

    static Tensor zeros(Shape s) { return Tensor(std::move(s)); }
    static Tensor full(Shape s, T v) {
        Tensor t(std::move(s));
        std::fill(t.data.begin(), t.data.end(), v);
        return t;
    }
    static Tensor vec(std::initializer_list<T> v) {
        Tensor t;
        t.shape = {static_cast<int64_t>(v.size())};
        t.data.assign(v.begin(), v.end());
        return t;
    }

    int64_t size() const { return static_cast<int64_t>(data.size()); }
    int64_t dim(size_t i) const { return shape.at(i); }
    int rank() const { return static_cast<int>(shape.size()); }

    T& operator[](int64_t i) { return data[static_cast<size_t>(i)]; }
    const T& operator[](int64_t i) const { return data[static_cast<size_t>(i)]; }

    bool same_shape(const Tensor& o) const { return shape == o.shape; }

    bool all_finite() const {
        for (T v : data)
            if (!std::isfinite(static_cast<double>(v))) return false;
        return true;
    }

    template <typename U>
    Tensor<U> cast() const {
        Tensor<U> out;
        out.shape = shape;
        out.data.resize(data.size());
        for (size_t i = 0; i < data.size(); ++i) out.data[i] = static_cast<U>(data[i]);
        return out;
    }
};

/// Single deterministic RNG stream; every random draw in the artifact flows
/// from one seed through instances of this.
struct Rng {
    std::mt19937_64 eng;
    explicit Rng(uint64_t seed) : eng(seed) {}

    double normal() {
        // Box-Muller on explicit uniforms: identical sequences across
        // standard libraries for a given seed.
        for (;;) {
            double u1 = uniform();
            double u2 = uniform();
            if (u1 <= 1e-300) continue;
            return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
        }
    }
    double uniform() {
        return (eng() >> 11) * (1.0 / 9007199254740992.0);  // 53-bit mantissa
    }
    int64_t uniform_int(int64_t lo, int64_t hi) {  // inclusive bounds
        return lo + static_cast<int64_t>(eng() % static_cast<uint64_t>(hi - lo + 1));
    }
};

template <typename T>
Tensor<T> randn(Shape s, Rng& rng, double stddev = 1.0) {
    Tensor<T> t(std::move(s));
    for (auto& v : t.data) v = static_cast<T>(rng.normal() * stddev);
    return t;
}

inline int env_thread_count() {
    const char* s = std::getenv("NNCOMP_THREADS");
    if (!s) return 1;
    int n = std::atoi(s);
    return n > 0 ? n : 1;
}

/// Chunked parallel loop over [0, n). Work items must write disjoint outputs;
/// results are independent of the thread count.
inline void parallel_for(int64_t n, const std::function<void(int64_t, int64_t)>& body) {
    int threads = env_thread_count();
    if (threads <= 1 || n < 2) {
        body(0, n);
        return;
    }
    if (threads > static_cast<int>(n)) threads = static_cast<int>(n);
    std::vector<std::thread> pool;
    int64_t chunk = (n + threads - 1) / threads;
    for (int t = 0; t < threads; ++t) {
        int64_t lo = t * chunk;
        int64_t hi = std::min(n, lo + chunk);
        if (lo >= hi) break;
        pool.emplace_back([&body, lo, hi] { body(lo, hi); });
    }
    for (auto& th : pool) th.join();
}

}  // namespace nncomp
