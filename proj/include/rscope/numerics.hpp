#pragma once

#include <cstddef>
#include <span>
#include <vector>

namespace rscope {

// Row-major float32 matrix. Reductions over its contents accumulate in double.
class Matrix {
public:
    Matrix() = default;
    Matrix(std::size_t rows, std::size_t cols, float fill = 0.0f);
    Matrix(std::size_t rows, std::size_t cols, std::vector<float> data);

    std::size_t rows() const { return rows_; }
    std::size_t cols() const { return cols_; }
    std::size_t size() const { return data_.size(); }

    float& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
    float operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }

    std::span<float> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
    std::span<const float> row(std::size_t r) const { return {data_.data() + r * cols_, cols_}; }

    std::span<float> data() { return data_; }
    std::span<const float> data() const { return data_; }

    Matrix transposed() const;

    bool operator==(const Matrix&) const = default;

private:
    std::size_t rows_ = 0;
    std::size_t cols_ = 0;
    std::vector<float> data_;
};

// Probabilities over a vocabulary. Entries are non-negative and sum to 1
// within 1e-6; construction through softmax() or from_probs() enforces it.
class Distribution {
public:
    Distribution() = default;

    // Validates; throws InvalidInput when entries are negative, non-finite,
    // or do not sum to 1 within `tolerance`.
    static Distribution from_probs(std::vector<double> probs, double tolerance = 1e-6);

    std::size_t size() const { return probs_.size(); }
    double operator[](std::size_t i) const { return probs_[i]; }
    std::span<const double> probs() const { return probs_; }

    std::size_t argmax() const;

private:
    explicit Distribution(std::vector<double> probs) : probs_(std::move(probs)) {}
    friend Distribution softmax(std::span<const double> logits);

    std::vector<double> probs_;
};

inline constexpr double kRmsEps = 1e-6;
inline constexpr double kKlFloor = 1e-12;

// Max-subtracted softmax. Throws InvalidInput on empty or non-finite input.
Distribution softmax(std::span<const double> logits);

// x / sqrt(mean(x^2) + eps)
std::vector<float> rms_normalize(std::span<const float> x, double eps = kRmsEps);
std::vector<double> rms_normalize(std::span<const double> x, double eps = kRmsEps);

// Natural-log entropy, 0 ln 0 := 0.
double entropy(const Distribution& p);

// KL(p || q) in nats with q floored at kKlFloor. Throws InvalidInput on
// length mismatch.
double kl_divergence(const Distribution& p, const Distribution& q);

double dot(std::span<const float> a, std::span<const float> b);
double dot(std::span<const double> a, std::span<const double> b);
double l2_norm(std::span<const float> x);
double l2_norm(std::span<const double> x);

bool all_finite(std::span<const float> x);
bool all_finite(std::span<const double> x);

}  // namespace rscope
