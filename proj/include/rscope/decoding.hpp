#pragma once

#include <cstddef>
#include <memory>
#include <optional>
#include <span>
#include <vector>

#include "rscope/decoder_spec.hpp"
#include "rscope/model.hpp"
#include "rscope/numerics.hpp"

namespace rscope {

inline constexpr std::size_t kDefaultTopK = 5;

struct TokenProb {
    TokenId id = 0;
    double p = 0.0;

    bool operator==(const TokenProb&) const = default;
};

enum class DecoderSource { input, output };
std::string_view to_string(DecoderSource s);

struct DecodedState {
    Distribution distribution;     // the reported distribution (winner for max_of_both)
    std::vector<TokenProb> top_k;  // descending, ties broken by lower id
    // max_of_both only
    std::optional<DecoderSource> source;
    std::vector<TokenProb> input_top_k;
    std::vector<TokenProb> output_top_k;
    // iterative only: one entry per stripped component
    std::vector<TokenProb> iterations;

    TokenId token() const { return top_k.front().id; }
    double probability() const { return top_k.front().p; }
};

// Up to k (id, probability) pairs with probability > 0, sorted descending.
std::vector<TokenProb> top_k(const Distribution& dist, std::size_t k);

// The d x |V| matrix a single-matrix strategy decodes with at `depth`.
// Iterative decoding strips components against the interpolated matrix.
// Throws InvalidInput for max_of_both (it uses two matrices) and for depth
// outside [0, L].
std::shared_ptr<const Matrix> decoder_matrix(const Model& model, const DecoderSpec& spec, std::size_t depth);

// softmax(rms_normalize(x * scale) . decoder). Throws InvalidInput on shape
// mismatch.
Distribution decode_state(std::span<const float> x, const Matrix& decoder,
                          std::optional<std::span<const float>> scale = std::nullopt);

// Decodes with W_in^T and W_out and keeps the decoding whose argmax is more
// probable. Ties go to the output decoder.
DecodedState decode_max_of_both(std::span<const float> x, const Model& model,
                                std::optional<std::span<const float>> scale = std::nullopt,
                                std::size_t k = kDefaultTopK);

struct IterativeParams {
    std::size_t max_iters = 5;
    double norm_threshold_ratio = 0.25;
};

// Decode, record the argmax, subtract the state's projection onto that
// token's unit-normalized decoder column; repeat until the residual norm
// drops below ratio * |x| or max_iters entries were produced. Also stops when
// a removal fails to shrink the residual.
std::vector<TokenProb> decode_iterative(std::span<const float> x, const Matrix& decoder, IterativeParams params,
                                        std::optional<std::span<const float>> scale = std::nullopt);

// Dispatches on spec.strategy; `depth` follows the layer convention (states
// inside layer l decode at l, block inputs x^(l-1) at l-1).
DecodedState decode(const Model& model, const DecoderSpec& spec, std::span<const float> x, std::size_t depth,
                    std::size_t k = kDefaultTopK);

// Column `token` of `decoder`, scaled to unit L2 norm. Throws InvalidInput
// for a zero column.
std::vector<double> unit_embedding(const Matrix& decoder, TokenId token);

// Argmax token of `x` under `spec` at `depth` together with the matrix its
// embedding should be drawn from (the winning matrix for max_of_both).
struct DecodedArgmax {
    TokenId token = 0;
    std::shared_ptr<const Matrix> decoder;
};
DecodedArgmax decode_argmax(const Model& model, const DecoderSpec& spec, std::span<const float> x,
                            std::size_t depth);

}  // namespace rscope
