#include "rscope/decoding.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "rscope/errors.hpp"

namespace rscope {

std::string_view to_string(DecoderStrategy s) {
    switch (s) {
        case DecoderStrategy::input_transpose: return "input_transpose";
        case DecoderStrategy::output: return "output";
        case DecoderStrategy::interpolated: return "interpolated";
        case DecoderStrategy::max_of_both: return "max_of_both";
        case DecoderStrategy::iterative: return "iterative";
    }
    return "?";
}

std::string_view to_string(StateKind k) {
    switch (k) {
        case StateKind::x: return "x";
        case StateKind::intermediate: return "intermediate";
        case StateKind::delta_att: return "delta_att";
        case StateKind::delta_ff: return "delta_ff";
    }
    return "?";
}

std::string_view to_string(DecoderSource s) { return s == DecoderSource::input ? "input" : "output"; }

std::optional<DecoderStrategy> parse_decoder_strategy(std::string_view s) {
    for (auto v : {DecoderStrategy::input_transpose, DecoderStrategy::output, DecoderStrategy::interpolated,
                   DecoderStrategy::max_of_both, DecoderStrategy::iterative}) {
        if (to_string(v) == s) return v;
    }
    return std::nullopt;
}

std::optional<StateKind> parse_state_kind(std::string_view s) {
    for (auto v : {StateKind::x, StateKind::intermediate, StateKind::delta_att, StateKind::delta_ff}) {
        if (to_string(v) == s) return v;
    }
    return std::nullopt;
}

std::vector<TokenProb> top_k(const Distribution& dist, std::size_t k) {
    std::vector<TokenId> ids(dist.size());
    std::iota(ids.begin(), ids.end(), TokenId{0});
    const std::size_t n = std::min(k, ids.size());
    auto by_prob = [&](TokenId a, TokenId b) { return dist[a] > dist[b] || (dist[a] == dist[b] && a < b); };
    std::partial_sort(ids.begin(), ids.begin() + static_cast<std::ptrdiff_t>(n), ids.end(), by_prob);
    std::vector<TokenProb> out;
    for (std::size_t i = 0; i < n && dist[ids[i]] > 0.0; ++i) out.push_back({ids[i], dist[ids[i]]});
    return out;
}

std::shared_ptr<const Matrix> decoder_matrix(const Model& model, const DecoderSpec& spec, std::size_t depth) {
    if (depth > model.config().n_layers) {
        throw InvalidInput("depth " + std::to_string(depth) + " outside [0, " +
                           std::to_string(model.config().n_layers) + "]");
    }
    switch (spec.strategy) {
        case DecoderStrategy::input_transpose: return model.input_decoder();
        case DecoderStrategy::output: return model.output_decoder();
        case DecoderStrategy::interpolated:
        case DecoderStrategy::iterative: return model.interpolated_decoder(depth);
        case DecoderStrategy::max_of_both: break;
    }
    throw InvalidInput("max_of_both decodes with two matrices");
}

namespace {

std::vector<double> prepare_state(std::span<const float> x, std::optional<std::span<const float>> scale) {
    std::vector<double> y(x.begin(), x.end());
    if (scale) {
        if (scale->size() != x.size()) throw InvalidInput("scale length does not match state dimension");
        for (std::size_t i = 0; i < y.size(); ++i) y[i] *= static_cast<double>((*scale)[i]);
    }
    return y;
}

Distribution project(std::span<const double> normalized, const Matrix& decoder) {
    std::vector<double> logits(decoder.cols(), 0.0);
    for (std::size_t i = 0; i < decoder.rows(); ++i) {
        const double xi = normalized[i];
        if (xi == 0.0) continue;
        const auto row = decoder.row(i);
        for (std::size_t v = 0; v < logits.size(); ++v) logits[v] += xi * static_cast<double>(row[v]);
    }
    return softmax(logits);
}

void check_shape(std::span<const float> x, const Matrix& decoder) {
    if (x.size() != decoder.rows()) {
        throw InvalidInput("state has dimension " + std::to_string(x.size()) + ", decoder expects " +
                           std::to_string(decoder.rows()));
    }
}

}  // namespace

Distribution decode_state(std::span<const float> x, const Matrix& decoder,
                          std::optional<std::span<const float>> scale) {
    check_shape(x, decoder);
    if (!all_finite(x)) throw InvalidInput("state is not finite");
    const auto y = prepare_state(x, scale);
    return project(rms_normalize(std::span<const double>(y)), decoder);
}

DecodedState decode_max_of_both(std::span<const float> x, const Model& model,
                                std::optional<std::span<const float>> scale, std::size_t k) {
    Distribution in = decode_state(x, *model.input_decoder(), scale);
    Distribution out = decode_state(x, *model.output_decoder(), scale);
    DecodedState s;
    s.input_top_k = top_k(in, k);
    s.output_top_k = top_k(out, k);
    const bool input_wins = in[in.argmax()] > out[out.argmax()];
    s.source = input_wins ? DecoderSource::input : DecoderSource::output;
    s.top_k = input_wins ? s.input_top_k : s.output_top_k;
    s.distribution = input_wins ? std::move(in) : std::move(out);
    return s;
}

std::vector<TokenProb> decode_iterative(std::span<const float> x, const Matrix& decoder, IterativeParams params,
                                        std::optional<std::span<const float>> scale) {
    check_shape(x, decoder);
    std::vector<double> h = prepare_state(x, scale);
    const double norm0 = l2_norm(std::span<const double>(h));
    std::vector<TokenProb> out;
    if (norm0 == 0.0) return out;
    const double stop_below = params.norm_threshold_ratio * norm0;
    double norm = norm0;
    while (out.size() < params.max_iters) {
        const Distribution dist = project(rms_normalize(std::span<const double>(h)), decoder);
        const auto token = static_cast<TokenId>(dist.argmax());
        out.push_back({token, dist[token]});

        const auto e = unit_embedding(decoder, token);
        const double c = dot(std::span<const double>(h), std::span<const double>(e));
        for (std::size_t i = 0; i < h.size(); ++i) h[i] -= c * e[i];
        const double next = l2_norm(std::span<const double>(h));
        if (next < stop_below || !(next < norm)) break;
        norm = next;
    }
    return out;
}

DecodedState decode(const Model& model, const DecoderSpec& spec, std::span<const float> x, std::size_t depth,
                    std::size_t k) {
    std::optional<std::span<const float>> scale;
    if (spec.apply_final_norm_scale) scale = std::span<const float>(model.weights().final_norm);
    if (spec.strategy == DecoderStrategy::max_of_both) return decode_max_of_both(x, model, scale, k);

    const auto matrix = decoder_matrix(model, spec, depth);
    DecodedState s;
    s.distribution = decode_state(x, *matrix, scale);
    s.top_k = top_k(s.distribution, k);
    if (spec.strategy == DecoderStrategy::iterative) {
        s.iterations = decode_iterative(x, *matrix, {spec.max_iters, spec.norm_threshold_ratio}, scale);
    }
    return s;
}

std::vector<double> unit_embedding(const Matrix& decoder, TokenId token) {
    if (token >= decoder.cols()) throw InvalidToken("token " + std::to_string(token) + " outside decoder");
    std::vector<double> e(decoder.rows());
    for (std::size_t i = 0; i < e.size(); ++i) e[i] = decoder(i, token);
    const double n = l2_norm(std::span<const double>(e));
    if (n == 0.0) throw InvalidInput("embedding of token " + std::to_string(token) + " has zero norm");
    for (double& v : e) v /= n;
    return e;
}

DecodedArgmax decode_argmax(const Model& model, const DecoderSpec& spec, std::span<const float> x,
                            std::size_t depth) {
    std::optional<std::span<const float>> scale;
    if (spec.apply_final_norm_scale) scale = std::span<const float>(model.weights().final_norm);
    if (spec.strategy == DecoderStrategy::max_of_both) {
        const auto s = decode_max_of_both(x, model, scale, 1);
        return {s.token(), s.source == DecoderSource::input ? model.input_decoder() : model.output_decoder()};
    }
    auto matrix = decoder_matrix(model, spec, depth);
    const auto dist = decode_state(x, *matrix, scale);
    return {static_cast<TokenId>(dist.argmax()), std::move(matrix)};
}

}  // namespace rscope
