#pragma once

#include <cstdint>

#include "nncomp/tensor.hpp"

namespace nncomp {

// E4M3, no-infinity variant: bias 7, max finite 448, the two codes with
// exponent 1111 / mantissa 111 are NaN.

inline double e4m3_decode(uint8_t code) {
    int sign = code >> 7 ? -1 : 1;
    int e = (code >> 3) & 0xF;
    int m = code & 0x7;
    if (e == 15 && m == 7) return std::numeric_limits<double>::quiet_NaN();
    double mag = e == 0 ? std::ldexp(m / 8.0, -6) : std::ldexp(1.0 + m / 8.0, e - 7);
    return sign * mag;
}

namespace detail {

struct E4M3Table {
    // non-negative finite values in increasing order with their codes
    std::vector<double> values;
    std::vector<uint8_t> codes;
    E4M3Table() {
        for (uint8_t c = 0; c < 0x7F; ++c) {
            values.push_back(e4m3_decode(c));
            codes.push_back(c);
        }
    }
};

inline const E4M3Table& e4m3_table() {
    static const E4M3Table t;
    return t;
}

}  // namespace detail

constexpr double E4M3_MAX = 448.0;

/// Round to nearest representable, ties to even mantissa; saturates at ±448.
inline uint8_t e4m3_round(double x) {
    if (std::isnan(x)) return 0x7F;
    uint8_t sign = x < 0 || (x == 0 && std::signbit(x)) ? 0x80 : 0x00;
    double a = std::abs(x);
    if (a >= E4M3_MAX) return sign | 0x7E;  // saturate
    const auto& t = detail::e4m3_table();
    auto it = std::lower_bound(t.values.begin(), t.values.end(), a);
    size_t hi = static_cast<size_t>(it - t.values.begin());
    if (hi == 0) return sign | t.codes[0];
    size_t lo = hi - 1;
    double dlo = a - t.values[lo], dhi = t.values[hi] - a;
    size_t pick = dlo < dhi ? lo : dhi < dlo ? hi : (t.codes[lo] & 1) == 0 ? lo : hi;
    return sign | t.codes[pick];
}

enum class QuantMode { WeightBlock, ActivationTile };

/// Blockwise-quantized tensor: 128x128 blocks for weights, 1x128 tiles for
/// activations, one max-abs/448 scale per block.
struct QuantizedBlockTensor {
    Shape shape;
    QuantMode mode = QuantMode::WeightBlock;
    std::vector<uint8_t> codes;   // row-major, same layout as the source
    std::vector<double> scales;   // one per block/tile
    int64_t block_rows = 128, block_cols = 128;

    int64_t rows() const { return shape.size() == 1 ? 1 : shape_numel(shape) / shape.back(); }
    int64_t cols() const { return shape.empty() ? 0 : shape.back(); }
    int64_t blocks_per_row() const { return (cols() + block_cols - 1) / block_cols; }
    int64_t block_index(int64_t r, int64_t c) const { return (r / block_rows) * blocks_per_row() + c / block_cols; }
};

template <typename T>
QuantizedBlockTensor quantize(const Tensor<T>& t, QuantMode mode) {
    if (!t.all_finite()) throw std::invalid_argument("quantize: tensor must be finite");
    QuantizedBlockTensor q;
    q.shape = t.shape;
    q.mode = mode;
    q.block_rows = mode == QuantMode::WeightBlock ? 128 : 1;
    q.block_cols = 128;
    int64_t rows = q.rows(), cols = q.cols();
    int64_t brows = (rows + q.block_rows - 1) / q.block_rows;
    q.codes.resize(static_cast<size_t>(t.size()));
    q.scales.assign(static_cast<size_t>(brows * q.blocks_per_row()), 1.0);
    for (int64_t br = 0; br < brows; ++br)
        for (int64_t bc = 0; bc < q.blocks_per_row(); ++bc) {
            double amax = 0;
            for (int64_t r = br * q.block_rows; r < std::min(rows, (br + 1) * q.block_rows); ++r)
                for (int64_t c = bc * q.block_cols; c < std::min(cols, (bc + 1) * q.block_cols); ++c)
                    amax = std::max(amax, std::abs(static_cast<double>(t[r * cols + c])));
            // snapped so that (448*scale)/448 == scale, which makes
            // quantize(dequantize(q)) reproduce the scale bit-exactly
            double scale = amax > 0 ? (E4M3_MAX * (amax / E4M3_MAX)) / E4M3_MAX : 1.0;
            q.scales[static_cast<size_t>(br * q.blocks_per_row() + bc)] = scale;
            for (int64_t r = br * q.block_rows; r < std::min(rows, (br + 1) * q.block_rows); ++r)
                for (int64_t c = bc * q.block_cols; c < std::min(cols, (bc + 1) * q.block_cols); ++c)
                    q.codes[static_cast<size_t>(r * cols + c)] = e4m3_round(static_cast<double>(t[r * cols + c]) / scale);
        }
    return q;
}

template <typename T = double>
Tensor<T> dequantize(const QuantizedBlockTensor& q) {
    Tensor<T> out(q.shape);
    int64_t cols = q.cols();
    for (int64_t r = 0; r < q.rows(); ++r)
        for (int64_t c = 0; c < cols; ++c)
            out[r * cols + c] =
                static_cast<T>(e4m3_decode(q.codes[static_cast<size_t>(r * cols + c)]) * q.scales[static_cast<size_t>(q.block_index(r, c))]);
    return out;
}

struct Fp8MatmulReport {
    double max_abs_error = 0;
    double rel_frobenius_error = 0;
};

/// Dequantize-then-multiply simulation of a quantized GEMM; the report
/// measures the drift against the exact product.
template <typename T>
Tensor<T> fp8_matmul_sim(const Tensor<T>& a, const Tensor<T>& w, Fp8MatmulReport* report = nullptr) {
    if (a.shape.size() != 2 || w.shape.size() != 2 || a.shape[1] != w.shape[0])
        throw std::invalid_argument("fp8_matmul_sim: incompatible shapes");
    Tensor<T> ad = dequantize<T>(quantize(a, QuantMode::ActivationTile));
    Tensor<T> wd = dequantize<T>(quantize(w, QuantMode::WeightBlock));
    int64_t m = a.shape[0], k = a.shape[1], n = w.shape[1];
    Tensor<T> out({m, n});
    for (int64_t i = 0; i < m; ++i)
        for (int64_t j = 0; j < n; ++j) {
            double acc = 0;
            for (int64_t p = 0; p < k; ++p)
                acc += static_cast<double>(ad[i * k + p]) * static_cast<double>(wd[p * n + j]);
            out[i * n + j] = static_cast<T>(acc);
        }
    if (report) {
        double err2 = 0, ref2 = 0;
        for (int64_t i = 0; i < m; ++i)
            for (int64_t j = 0; j < n; ++j) {
                double acc = 0;
                for (int64_t p = 0; p < k; ++p)
                    acc += static_cast<double>(a[i * k + p]) * static_cast<double>(w[p * n + j]);
                double d = static_cast<double>(out[i * n + j]) - acc;
                report->max_abs_error = std::max(report->max_abs_error, std::abs(d));
                err2 += d * d;
                ref2 += acc * acc;
            }
        report->rel_frobenius_error = ref2 > 0 ? std::sqrt(err2 / ref2) : 0.0;
    }
    return out;
}

/// Checkpoint-level pass: quantize every 2-d tensor except those on the
/// skip list; skipped and 1-d tensors pass through untouched.
template <typename T>
struct QuantizedCheckpoint {
    std::map<std::string, QuantizedBlockTensor> quantized;
    std::map<std::string, Tensor<T>> passthrough;
};

template <typename T>
QuantizedCheckpoint<T> quantize_tensors(const std::map<std::string, Tensor<T>>& tensors,
                                        const std::set<std::string>& skip) {
    QuantizedCheckpoint<T> out;
    for (const auto& [name, t] : tensors) {
        if (skip.count(name) || t.shape.size() < 2)
            out.passthrough[name] = t;
        else
            out.quantized[name] = quantize(t, QuantMode::WeightBlock);
    }
    return out;
}

}  // namespace nncomp
