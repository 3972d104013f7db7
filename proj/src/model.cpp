#include "rscope/model.hpp"

#include <cmath>
#include <random>
#include <string>

#include "rscope/errors.hpp"
#include "rscope/model_io.hpp"

namespace rscope {

void ModelConfig::validate() const {
    if (n_layers < 1) throw ConfigError("n_layers must be >= 1");
    if (d_model < 2) throw ConfigError("d_model must be >= 2");
    if (n_heads < 1) throw ConfigError("n_heads must be >= 1");
    if (d_model % n_heads != 0) throw ConfigError("d_model must be divisible by n_heads");
    if (d_ff < 1) throw ConfigError("d_ff must be >= 1");
    if (vocab_size < 2) throw ConfigError("vocab_size must be >= 2");
    if (max_seq_len < 1) throw ConfigError("max_seq_len must be >= 1");
    if (!(rms_eps > 0.0)) throw ConfigError("rms_eps must be positive");
}

namespace {

void expect_shape(const Matrix& m, std::size_t rows, std::size_t cols, const std::string& name) {
    if (m.rows() != rows || m.cols() != cols) {
        throw LoadError("tensor " + name + " has shape " + std::to_string(m.rows()) + "x" +
                        std::to_string(m.cols()) + ", expected " + std::to_string(rows) + "x" +
                        std::to_string(cols));
    }
}

void expect_len(const std::vector<float>& v, std::size_t n, const std::string& name) {
    if (v.size() != n) {
        throw LoadError("tensor " + name + " has " + std::to_string(v.size()) + " elements, expected " +
                        std::to_string(n));
    }
}

// Uniform in [-amplitude, amplitude) from the top 53 bits of the engine.
class UniformSource {
public:
    explicit UniformSource(std::uint64_t seed) : engine_(seed) {}

    float next(double amplitude) {
        const double u = static_cast<double>(engine_() >> 11) * 0x1.0p-53;
        return static_cast<float>((2.0 * u - 1.0) * amplitude);
    }

    void fill(std::span<float> out, double amplitude, double offset = 0.0) {
        for (float& v : out) v = static_cast<float>(offset + next(amplitude));
    }

private:
    std::mt19937_64 engine_;
};

}  // namespace

void validate_weights(const ModelConfig& config, const ModelWeights& w) {
    config.validate();
    const std::size_t d = config.d_model;
    expect_shape(w.embed, config.vocab_size, d, "tok_embeddings");
    if (w.layers.size() != config.n_layers) {
        throw LoadError("weights hold " + std::to_string(w.layers.size()) + " layers, config says " +
                        std::to_string(config.n_layers));
    }
    for (std::size_t l = 0; l < w.layers.size(); ++l) {
        const auto& lw = w.layers[l];
        const std::string p = "layers." + std::to_string(l) + ".";
        expect_len(lw.attn_norm, d, p + "attn_norm");
        expect_shape(lw.wq, d, d, p + "wq");
        expect_shape(lw.wk, d, d, p + "wk");
        expect_shape(lw.wv, d, d, p + "wv");
        expect_shape(lw.wo, d, d, p + "wo");
        expect_len(lw.ffn_norm, d, p + "ffn_norm");
        expect_shape(lw.ffn_up, d, config.d_ff, p + "ffn_up");
        expect_shape(lw.ffn_down, config.d_ff, d, p + "ffn_down");
    }
    expect_len(w.final_norm, d, "final_norm");
    if (config.tied_embeddings && w.lm_head) {
        throw LoadError("tied_embeddings=true but a separate lm_head tensor is present");
    }
    if (!config.tied_embeddings) {
        if (!w.lm_head) throw LoadError("untied model is missing tensor lm_head");
        expect_shape(*w.lm_head, d, config.vocab_size, "lm_head");
    }
}

ModelWeights seeded_random_model(const ModelConfig& config, std::uint64_t seed) {
    config.validate();
    const std::size_t d = config.d_model;
    const double sqrt3 = 1.7320508075688772;
    // amplitude a gives standard deviation a / sqrt(3)
    const double proj_amp = sqrt3 / std::sqrt(static_cast<double>(d));
    const double down_amp = sqrt3 / std::sqrt(static_cast<double>(config.d_ff));

    UniformSource rng(seed);
    ModelWeights w;
    w.embed = Matrix(config.vocab_size, d);
    rng.fill(w.embed.data(), 0.5 * sqrt3);
    w.layers.resize(config.n_layers);
    for (auto& lw : w.layers) {
        lw.attn_norm.resize(d);
        rng.fill(lw.attn_norm, 0.1, 1.0);
        for (Matrix* m : {&lw.wq, &lw.wk, &lw.wv, &lw.wo}) {
            *m = Matrix(d, d);
            rng.fill(m->data(), proj_amp);
        }
        lw.ffn_norm.resize(d);
        rng.fill(lw.ffn_norm, 0.1, 1.0);
        lw.ffn_up = Matrix(d, config.d_ff);
        rng.fill(lw.ffn_up.data(), proj_amp);
        lw.ffn_down = Matrix(config.d_ff, d);
        rng.fill(lw.ffn_down.data(), down_amp);
    }
    w.final_norm.resize(d);
    rng.fill(w.final_norm, 0.1, 1.0);
    if (!config.tied_embeddings) {
        Matrix head(d, config.vocab_size);
        rng.fill(head.data(), 2.0 * proj_amp);
        w.lm_head = std::move(head);
    }
    return w;
}

Model::Model(ModelConfig config, ModelWeights weights, Tokenizer tokenizer)
    : config_(std::move(config)), weights_(std::move(weights)), tokenizer_(std::move(tokenizer)) {
    validate_weights(config_, weights_);
    if (tokenizer_.vocab_size() != config_.vocab_size) {
        throw LoadError("tokenizer covers " + std::to_string(tokenizer_.vocab_size()) +
                        " ids but vocab_size is " + std::to_string(config_.vocab_size));
    }
    std::string identity = config_to_json(config_).dump();
    const auto payload = weights_payload(config_, weights_);
    identity.append(reinterpret_cast<const char*>(payload.data()), payload.size());
    fingerprint_ = sha256_hex(identity);

    input_decoder_ = std::make_shared<const Matrix>(weights_.embed.transposed());
    output_decoder_ = config_.tied_embeddings ? input_decoder_ : std::make_shared<const Matrix>(*weights_.lm_head);
}

std::shared_ptr<const Matrix> Model::interpolated_decoder(std::size_t depth) const {
    const std::size_t L = config_.n_layers;
    if (depth > L) {
        throw InvalidInput("decoder depth " + std::to_string(depth) + " outside [0, " + std::to_string(L) + "]");
    }
    if (depth == 0) return input_decoder_;
    if (depth == L || config_.tied_embeddings) return output_decoder_;

    std::lock_guard lock(cache_mutex_);
    auto& slot = interpolated_cache_[depth];
    if (!slot) {
        const double t = static_cast<double>(depth) / static_cast<double>(L);
        const auto in = input_decoder_->data();
        const auto out = output_decoder_->data();
        std::vector<float> blend(in.size());
        for (std::size_t i = 0; i < blend.size(); ++i) {
            blend[i] = static_cast<float>((1.0 - t) * in[i] + t * out[i]);
        }
        slot = std::make_shared<const Matrix>(input_decoder_->rows(), input_decoder_->cols(), std::move(blend));
    }
    return slot;
}

}  // namespace rscope
