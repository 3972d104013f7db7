#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "rscope/decoder_spec.hpp"
#include "rscope/model.hpp"

namespace rscope {

struct GenerationSettings {
    std::size_t max_new_tokens = 16;
    // 0 selects greedy decoding; otherwise softmax(logits / temperature)
    // restricted to the top_k most likely tokens (0 = no restriction).
    double temperature = 0.0;
    std::size_t top_k = 0;
    std::uint64_t seed = 0;
    bool stop_at_eos = true;

    bool greedy() const { return temperature == 0.0; }
    bool operator==(const GenerationSettings&) const = default;
};

enum class InjectionMode { component_swap, full_replace };
std::string_view to_string(InjectionMode m);
std::optional<InjectionMode> parse_injection_mode(std::string_view s);

struct InjectionSpec {
    std::size_t layer = 1;  // 1-based
    std::size_t position = 0;
    StateKind state_kind = StateKind::x;
    TokenId new_token = 0;
    InjectionMode mode = InjectionMode::component_swap;
    bool scaled = true;
    DecoderSpec decoder;

    bool operator==(const InjectionSpec&) const = default;
};

struct InjectionRecord {
    InjectionSpec spec;
    // argmax token whose embedding was removed; set once the target position
    // was computed
    std::optional<TokenId> removed_token;

    bool operator==(const InjectionRecord&) const = default;
};

// Every hidden vector, attention map and output distribution of one
// generation run. Produced once and never modified afterwards.
struct TraceRecord {
    std::string id;
    std::string model_id;
    std::string model_fingerprint;
    std::size_t n_layers = 0;
    std::size_t d_model = 0;
    std::size_t n_heads = 0;
    std::size_t vocab_size = 0;

    std::vector<TokenId> tokens;  // prompt followed by completion
    std::size_t prompt_len = 0;
    GenerationSettings settings;
    std::vector<InjectionRecord> injections;

    // Tensors, row-major:
    //   x             (L+1) x T x d   x^(0) is the input embedding
    //   intermediate  L x T x d       x'^(l), stored at index l-1
    //   delta_att     L x T x d
    //   delta_ff      L x T x d
    //   attention     L x H x T x T   post-softmax, zero above the diagonal
    //   final_probs   T x |V|         model output distribution
    std::vector<float> x;
    std::vector<float> intermediate;
    std::vector<float> delta_att;
    std::vector<float> delta_ff;
    std::vector<float> attention;
    std::vector<float> final_probs;

    std::size_t length() const { return tokens.size(); }

    // `layer` is 0..L for StateKind::x and 1..L otherwise. Throws
    // InvalidInput for out-of-range coordinates.
    std::span<const float> state(StateKind kind, std::size_t layer, std::size_t position) const;
    // Row `query` of head `head` at `layer` (1-based), length T.
    std::span<const float> attention_row(std::size_t layer, std::size_t head, std::size_t query) const;
    std::span<const float> output_distribution(std::size_t position) const;

    void check_coordinates(StateKind kind, std::size_t layer, std::size_t position) const;

    bool operator==(const TraceRecord&) const = default;
};

// h + (h . e_old)(e_new - e_old) for the scaled swap, h + (e_new - e_old)
// unscaled, and e_new * |h| for full replacement. e_old and e_new are
// normalized to unit length first; zero-norm embeddings throw InvalidInput.
std::vector<float> apply_injection(std::span<const float> h, const InjectionSpec& spec,
                                   std::span<const double> e_old, std::span<const double> e_new);

// Auto-regressive generation that captures every intermediate state.
// Injections apply whenever their position is computed, before any
// downstream use, and fold their change into the sub-layer delta that
// produced the replaced residual so the residual accounting stays exact.
// Throws ContextOverflow, InvalidInjection, InvalidInput.
TraceRecord generate_with_trace(const Model& model, std::span<const TokenId> prompt,
                                const GenerationSettings& settings, std::span<const InjectionSpec> injections = {},
                                std::string model_id = {});

// Content address of a run: identical model, prompt, settings and
// injections give the same id.
std::string compute_trace_id(const std::string& model_fingerprint, std::span<const TokenId> prompt,
                             const GenerationSettings& settings, std::span<const InjectionSpec> injections);

std::string completion_text(const Model& model, const TraceRecord& trace);

}  // namespace rscope
