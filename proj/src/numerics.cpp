#include "rscope/numerics.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "rscope/errors.hpp"

namespace rscope {

Matrix::Matrix(std::size_t rows, std::size_t cols, float fill)
    : rows_(rows), cols_(cols), data_(rows * cols, fill) {}

Matrix::Matrix(std::size_t rows, std::size_t cols, std::vector<float> data)
    : rows_(rows), cols_(cols), data_(std::move(data)) {
    if (data_.size() != rows_ * cols_) {
        throw InvalidInput("matrix data has " + std::to_string(data_.size()) +
                           " elements, shape requires " + std::to_string(rows_ * cols_));
    }
}

Matrix Matrix::transposed() const {
    Matrix out(cols_, rows_);
    for (std::size_t r = 0; r < rows_; ++r) {
        for (std::size_t c = 0; c < cols_; ++c) out(c, r) = (*this)(r, c);
    }
    return out;
}

Distribution Distribution::from_probs(std::vector<double> probs, double tolerance) {
    if (probs.empty()) throw InvalidInput("distribution is empty");
    double sum = 0.0;
    for (double p : probs) {
        if (!std::isfinite(p) || p < 0.0) throw InvalidInput("distribution has a negative or non-finite entry");
        sum += p;
    }
    if (std::abs(sum - 1.0) > tolerance) {
        throw InvalidInput("distribution sums to " + std::to_string(sum));
    }
    return Distribution(std::move(probs));
}

std::size_t Distribution::argmax() const {
    return static_cast<std::size_t>(std::max_element(probs_.begin(), probs_.end()) - probs_.begin());
}

Distribution softmax(std::span<const double> logits) {
    if (logits.empty()) throw InvalidInput("softmax of empty vector");
    if (!all_finite(logits)) throw InvalidInput("softmax input is not finite");
    const double max = *std::max_element(logits.begin(), logits.end());
    std::vector<double> out(logits.size());
    double sum = 0.0;
    for (std::size_t i = 0; i < logits.size(); ++i) {
        out[i] = std::exp(logits[i] - max);
        sum += out[i];
    }
    for (double& v : out) v /= sum;
    return Distribution(std::move(out));
}

namespace {

template <typename T>
std::vector<T> rms_normalize_impl(std::span<const T> x, double eps) {
    double sq = 0.0;
    for (T v : x) sq += static_cast<double>(v) * static_cast<double>(v);
    const double inv = 1.0 / std::sqrt(sq / static_cast<double>(x.size()) + eps);
    std::vector<T> out(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) out[i] = static_cast<T>(static_cast<double>(x[i]) * inv);
    return out;
}

template <typename A, typename B>
double dot_impl(std::span<const A> a, std::span<const B> b) {
    if (a.size() != b.size()) throw InvalidInput("dot product of mismatched lengths");
    double acc = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) acc += static_cast<double>(a[i]) * static_cast<double>(b[i]);
    return acc;
}

}  // namespace

std::vector<float> rms_normalize(std::span<const float> x, double eps) {
    if (x.empty()) throw InvalidInput("rms_normalize of empty vector");
    return rms_normalize_impl(x, eps);
}

std::vector<double> rms_normalize(std::span<const double> x, double eps) {
    if (x.empty()) throw InvalidInput("rms_normalize of empty vector");
    return rms_normalize_impl(x, eps);
}

double entropy(const Distribution& p) {
    double h = 0.0;
    for (double v : p.probs()) {
        if (v > 0.0) h -= v * std::log(v);
    }
    return std::max(h, 0.0);
}

double kl_divergence(const Distribution& p, const Distribution& q) {
    if (p.size() != q.size()) {
        throw InvalidInput("kl_divergence length mismatch: " + std::to_string(p.size()) + " vs " +
                           std::to_string(q.size()));
    }
    double kl = 0.0;
    for (std::size_t i = 0; i < p.size(); ++i) {
        if (p[i] <= 0.0) continue;
        kl += p[i] * (std::log(p[i]) - std::log(std::max(q[i], kKlFloor)));
    }
    return std::max(kl, 0.0);
}

double dot(std::span<const float> a, std::span<const float> b) { return dot_impl(a, b); }
double dot(std::span<const double> a, std::span<const double> b) { return dot_impl(a, b); }

double l2_norm(std::span<const float> x) { return std::sqrt(dot_impl(x, x)); }
double l2_norm(std::span<const double> x) { return std::sqrt(dot_impl(x, x)); }

bool all_finite(std::span<const float> x) {
    return std::all_of(x.begin(), x.end(), [](float v) { return std::isfinite(v); });
}

bool all_finite(std::span<const double> x) {
    return std::all_of(x.begin(), x.end(), [](double v) { return std::isfinite(v); });
}

}  // namespace rscope
