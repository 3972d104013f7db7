#pragma once

#include <cstddef>
#include <cstdint>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <vector>

#include "rscope/numerics.hpp"
#include "rscope/tokenizer.hpp"

namespace rscope {

struct ModelConfig {
    std::size_t n_layers = 2;
    std::size_t d_model = 8;
    std::size_t n_heads = 2;
    std::size_t d_ff = 32;
    std::size_t vocab_size = 32;
    std::size_t max_seq_len = 64;
    bool tied_embeddings = false;
    double rms_eps = 1e-6;
    TokenizerKind tokenizer = TokenizerKind::byte;

    std::size_t head_dim() const { return d_model / n_heads; }

    // Throws ConfigError naming the first violated constraint.
    void validate() const;

    bool operator==(const ModelConfig&) const = default;
};

// Projections are stored as (in, out) so a row vector times the matrix
// gives the output: y = x * W.
struct LayerWeights {
    std::vector<float> attn_norm;  // d
    Matrix wq, wk, wv, wo;         // d x d
    std::vector<float> ffn_norm;   // d
    Matrix ffn_up;                 // d x d_ff
    Matrix ffn_down;               // d_ff x d

    bool operator==(const LayerWeights&) const = default;
};

struct ModelWeights {
    Matrix embed;  // |V| x d, row t is the input embedding of token t
    std::vector<LayerWeights> layers;
    std::vector<float> final_norm;  // d
    // d x |V|; absent for tied models, where W_out is embed^T.
    std::optional<Matrix> lm_head;

    bool operator==(const ModelWeights&) const = default;
};

// Throws ConfigError/LoadError when any tensor shape disagrees with `config`
// or the tie flag is inconsistent with lm_head presence.
void validate_weights(const ModelConfig& config, const ModelWeights& weights);

// Deterministic fixture weights: same (config, seed) gives bit-identical
// tensors. Values are uniform draws built from raw mt19937_64 output, so no
// implementation-defined std:: distribution is involved.
ModelWeights seeded_random_model(const ModelConfig& config, std::uint64_t seed);

// Immutable, shareable model. Owns the decoder matrices derived from the
// weights; interpolated decoders are memoized per depth.
class Model {
public:
    Model(ModelConfig config, ModelWeights weights, Tokenizer tokenizer);

    const ModelConfig& config() const { return config_; }
    const ModelWeights& weights() const { return weights_; }
    const Tokenizer& tokenizer() const { return tokenizer_; }

    // SHA-256 hex over config and weights; identifies the model in trace ids.
    const std::string& fingerprint() const { return fingerprint_; }

    // d x |V| matrices. For tied models both return the same object.
    std::shared_ptr<const Matrix> input_decoder() const { return input_decoder_; }
    std::shared_ptr<const Matrix> output_decoder() const { return output_decoder_; }
    // (1 - l/L) W_in^T + (l/L) W_out; the endpoints return the stored
    // matrices themselves.
    std::shared_ptr<const Matrix> interpolated_decoder(std::size_t depth) const;

private:
    ModelConfig config_;
    ModelWeights weights_;
    Tokenizer tokenizer_;
    std::string fingerprint_;
    std::shared_ptr<const Matrix> input_decoder_;
    std::shared_ptr<const Matrix> output_decoder_;

    mutable std::mutex cache_mutex_;
    mutable std::map<std::size_t, std::shared_ptr<const Matrix>> interpolated_cache_;
};

}  // namespace rscope
