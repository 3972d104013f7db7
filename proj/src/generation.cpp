#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "rscope/decoding.hpp"
#include "rscope/errors.hpp"
#include "rscope/model_io.hpp"
#include "rscope/serialize.hpp"
#include "rscope/trace.hpp"

namespace rscope {

std::string_view to_string(InjectionMode m) {
    return m == InjectionMode::component_swap ? "component_swap" : "full_replace";
}

std::optional<InjectionMode> parse_injection_mode(std::string_view s) {
    if (s == "component_swap") return InjectionMode::component_swap;
    if (s == "full_replace") return InjectionMode::full_replace;
    return std::nullopt;
}

void TraceRecord::check_coordinates(StateKind kind, std::size_t layer, std::size_t position) const {
    const std::size_t lo = kind == StateKind::x ? 0 : 1;
    if (layer < lo || layer > n_layers) {
        throw InvalidInput("layer " + std::to_string(layer) + " outside [" + std::to_string(lo) + ", " +
                           std::to_string(n_layers) + "] for state " + std::string(to_string(kind)));
    }
    if (position >= length()) {
        throw InvalidInput("position " + std::to_string(position) + " outside trace of length " +
                           std::to_string(length()));
    }
}

std::span<const float> TraceRecord::state(StateKind kind, std::size_t layer, std::size_t position) const {
    check_coordinates(kind, layer, position);
    const std::size_t T = length();
    switch (kind) {
        case StateKind::x: return {x.data() + (layer * T + position) * d_model, d_model};
        case StateKind::intermediate: return {intermediate.data() + ((layer - 1) * T + position) * d_model, d_model};
        case StateKind::delta_att: return {delta_att.data() + ((layer - 1) * T + position) * d_model, d_model};
        case StateKind::delta_ff: return {delta_ff.data() + ((layer - 1) * T + position) * d_model, d_model};
    }
    return {};
}

std::span<const float> TraceRecord::attention_row(std::size_t layer, std::size_t head, std::size_t query) const {
    check_coordinates(StateKind::delta_att, layer, query);
    if (head >= n_heads) throw InvalidInput("head " + std::to_string(head) + " out of range");
    const std::size_t T = length();
    return {attention.data() + (((layer - 1) * n_heads + head) * T + query) * T, T};
}

std::span<const float> TraceRecord::output_distribution(std::size_t position) const {
    if (position >= length()) throw InvalidInput("position out of range");
    return {final_probs.data() + position * vocab_size, vocab_size};
}

std::vector<float> apply_injection(std::span<const float> h, const InjectionSpec& spec,
                                   std::span<const double> e_old, std::span<const double> e_new) {
    if (e_old.size() != h.size() || e_new.size() != h.size()) {
        throw InvalidInput("injection embeddings do not match the state dimension");
    }
    const double n_old = l2_norm(e_old);
    const double n_new = l2_norm(e_new);
    if (n_old == 0.0 || n_new == 0.0) throw InvalidInput("injection embedding has zero norm");

    std::vector<float> out(h.size());
    if (spec.mode == InjectionMode::full_replace) {
        const double scale = l2_norm(h) / n_new;
        for (std::size_t i = 0; i < h.size(); ++i) out[i] = static_cast<float>(e_new[i] * scale);
        return out;
    }
    double coeff = 1.0;
    if (spec.scaled) {
        coeff = 0.0;
        for (std::size_t i = 0; i < h.size(); ++i) coeff += static_cast<double>(h[i]) * (e_old[i] / n_old);
    }
    for (std::size_t i = 0; i < h.size(); ++i) {
        const double diff = e_new[i] / n_new - e_old[i] / n_old;
        out[i] = static_cast<float>(static_cast<double>(h[i]) + coeff * diff);
    }
    return out;
}

std::string compute_trace_id(const std::string& model_fingerprint, std::span<const TokenId> prompt,
                             const GenerationSettings& settings, std::span<const InjectionSpec> injections) {
    Json recipe;
    recipe["model"] = model_fingerprint;
    recipe["prompt"] = std::vector<TokenId>(prompt.begin(), prompt.end());
    recipe["settings"] = to_json(settings);
    recipe["injections"] = Json::array();
    for (const auto& inj : injections) recipe["injections"].push_back(to_json(inj));
    return sha256_hex(recipe.dump()).substr(0, 32);
}

std::string completion_text(const Model& model, const TraceRecord& trace) {
    return model.tokenizer().decode(std::span<const TokenId>(trace.tokens).subspan(trace.prompt_len));
}

namespace {

// out = x * W with double accumulation
void matvec(std::span<const float> x, const Matrix& w, std::span<float> out) {
    std::vector<double> acc(w.cols(), 0.0);
    for (std::size_t r = 0; r < w.rows(); ++r) {
        const double xr = x[r];
        const auto row = w.row(r);
        for (std::size_t c = 0; c < acc.size(); ++c) acc[c] += xr * static_cast<double>(row[c]);
    }
    for (std::size_t c = 0; c < acc.size(); ++c) out[c] = static_cast<float>(acc[c]);
}

std::vector<float> rms_norm_scaled(std::span<const float> x, std::span<const float> scale, double eps) {
    double sq = 0.0;
    for (float v : x) sq += static_cast<double>(v) * v;
    const double inv = 1.0 / std::sqrt(sq / static_cast<double>(x.size()) + eps);
    std::vector<float> out(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) out[i] = static_cast<float>(x[i] * inv * scale[i]);
    return out;
}

void apply_rope(std::span<float> v, std::size_t n_heads, std::size_t position) {
    const std::size_t hd = v.size() / n_heads;
    for (std::size_t h = 0; h < n_heads; ++h) {
        float* head = v.data() + h * hd;
        for (std::size_t i = 0; i + 1 < hd; i += 2) {
            const double freq = std::pow(10000.0, -static_cast<double>(i) / static_cast<double>(hd));
            const double angle = static_cast<double>(position) * freq;
            const double c = std::cos(angle), s = std::sin(angle);
            const double a = head[i], b = head[i + 1];
            head[i] = static_cast<float>(a * c - b * s);
            head[i + 1] = static_cast<float>(a * s + b * c);
        }
    }
}

double gelu(double v) { return 0.5 * v * (1.0 + std::erf(v / std::sqrt(2.0))); }

class TokenSampler {
public:
    explicit TokenSampler(const GenerationSettings& s) : settings_(s), rng_(s.seed) {}

    TokenId next(std::span<const double> logits) {
        std::vector<TokenId> ids(logits.size());
        std::iota(ids.begin(), ids.end(), TokenId{0});
        auto better = [&](TokenId a, TokenId b) { return logits[a] > logits[b] || (logits[a] == logits[b] && a < b); };
        if (settings_.greedy()) return *std::min_element(ids.begin(), ids.end(), better);

        std::size_t keep = settings_.top_k == 0 ? ids.size() : std::min(settings_.top_k, ids.size());
        std::partial_sort(ids.begin(), ids.begin() + static_cast<std::ptrdiff_t>(keep), ids.end(), better);
        ids.resize(keep);
        std::vector<double> scaled(keep);
        for (std::size_t i = 0; i < keep; ++i) scaled[i] = logits[ids[i]] / settings_.temperature;
        const Distribution p = softmax(scaled);
        const double u = static_cast<double>(rng_() >> 11) * 0x1.0p-53;
        double cum = 0.0;
        for (std::size_t i = 0; i < keep; ++i) {
            cum += p[i];
            if (u < cum) return ids[i];
        }
        return ids.back();
    }

private:
    GenerationSettings settings_;
    std::mt19937_64 rng_;
};

struct PendingInjection {
    InjectionSpec spec;
    std::size_t record_index;
};

class ForwardPass {
public:
    ForwardPass(const Model& model, TraceRecord& trace, std::size_t capacity,
                std::span<const InjectionSpec> injections)
        : model_(model), cfg_(model.config()), trace_(trace), capacity_(capacity) {
        const std::size_t d = cfg_.d_model;
        k_cache_.assign(cfg_.n_layers, std::vector<float>(capacity * d));
        v_cache_.assign(cfg_.n_layers, std::vector<float>(capacity * d));
        x_.assign((cfg_.n_layers + 1) * capacity * d, 0.0f);
        mid_.assign(cfg_.n_layers * capacity * d, 0.0f);
        datt_.assign(cfg_.n_layers * capacity * d, 0.0f);
        dff_.assign(cfg_.n_layers * capacity * d, 0.0f);
        attn_.assign(cfg_.n_layers * cfg_.n_heads * capacity * capacity, 0.0f);
        for (std::size_t i = 0; i < injections.size(); ++i) pending_.push_back({injections[i], i});
    }

    // Computes every captured state of position t (token already appended to
    // trace.tokens) and returns the model's output logits there.
    std::vector<double> step(std::size_t t) {
        const std::size_t d = cfg_.d_model;
        const std::size_t H = cfg_.n_heads;
        const std::size_t hd = cfg_.head_dim();
        const auto& w = model_.weights();

        auto x0 = slot(x_, 0, t);
        const auto emb = w.embed.row(trace_.tokens[t]);
        std::copy(emb.begin(), emb.end(), x0.begin());

        std::vector<float> q(d), ctx(d);
        std::vector<double> scores(t + 1), ctx_acc(hd);
        for (std::size_t l = 1; l <= cfg_.n_layers; ++l) {
            const auto& lw = w.layers[l - 1];
            auto prev = slot(x_, l - 1, t);
            auto datt = slot(datt_, l - 1, t);
            auto mid = slot(mid_, l - 1, t);
            auto dff = slot(dff_, l - 1, t);
            auto out = slot(x_, l, t);

            const auto a = rms_norm_scaled(prev, lw.attn_norm, cfg_.rms_eps);
            std::span<float> k_t(k_cache_[l - 1].data() + t * d, d);
            std::span<float> v_t(v_cache_[l - 1].data() + t * d, d);
            matvec(a, lw.wq, q);
            matvec(a, lw.wk, k_t);
            matvec(a, lw.wv, v_t);
            apply_rope(q, H, t);
            apply_rope(k_t, H, t);

            const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(hd));
            for (std::size_t h = 0; h < H; ++h) {
                for (std::size_t j = 0; j <= t; ++j) {
                    const float* kj = k_cache_[l - 1].data() + j * d + h * hd;
                    double s = 0.0;
                    for (std::size_t i = 0; i < hd; ++i) s += static_cast<double>(q[h * hd + i]) * kj[i];
                    scores[j] = s * inv_sqrt;
                }
                const Distribution p = softmax(std::span<const double>(scores.data(), t + 1));
                float* row = attn_.data() + (((l - 1) * H + h) * capacity_ + t) * capacity_;
                std::fill(ctx_acc.begin(), ctx_acc.end(), 0.0);
                for (std::size_t j = 0; j <= t; ++j) {
                    row[j] = static_cast<float>(p[j]);
                    const float* vj = v_cache_[l - 1].data() + j * d + h * hd;
                    for (std::size_t i = 0; i < hd; ++i) ctx_acc[i] += p[j] * vj[i];
                }
                for (std::size_t i = 0; i < hd; ++i) ctx[h * hd + i] = static_cast<float>(ctx_acc[i]);
            }
            matvec(ctx, lw.wo, datt);
            inject(StateKind::delta_att, l, t, datt);
            for (std::size_t i = 0; i < d; ++i) mid[i] = prev[i] + datt[i];
            inject_residual(StateKind::intermediate, l, t, mid, prev, datt);

            const auto f = rms_norm_scaled(mid, lw.ffn_norm, cfg_.rms_eps);
            std::vector<float> up(cfg_.d_ff);
            matvec(f, lw.ffn_up, up);
            for (float& u : up) u = static_cast<float>(gelu(u));
            matvec(up, lw.ffn_down, dff);
            inject(StateKind::delta_ff, l, t, dff);
            for (std::size_t i = 0; i < d; ++i) out[i] = mid[i] + dff[i];
            inject_residual(StateKind::x, l, t, out, mid, dff);
        }

        const auto top = rms_norm_scaled(slot(x_, cfg_.n_layers, t), w.final_norm, cfg_.rms_eps);
        const Matrix& head = *model_.output_decoder();
        std::vector<double> logits(cfg_.vocab_size, 0.0);
        for (std::size_t r = 0; r < d; ++r) {
            const auto row = head.row(r);
            for (std::size_t c = 0; c < logits.size(); ++c) logits[c] += static_cast<double>(top[r]) * row[c];
        }
        const Distribution probs = softmax(logits);
        for (std::size_t c = 0; c < probs.size(); ++c) final_.push_back(static_cast<float>(probs[c]));
        return logits;
    }

    // Copies the first T positions into the trace tensors.
    void finish(std::size_t T) {
        const std::size_t d = cfg_.d_model;
        const std::size_t L = cfg_.n_layers;
        auto compact = [&](const std::vector<float>& src, std::size_t layers) {
            std::vector<float> out;
            out.reserve(layers * T * d);
            for (std::size_t l = 0; l < layers; ++l) {
                const float* base = src.data() + l * capacity_ * d;
                out.insert(out.end(), base, base + T * d);
            }
            return out;
        };
        trace_.x = compact(x_, L + 1);
        trace_.intermediate = compact(mid_, L);
        trace_.delta_att = compact(datt_, L);
        trace_.delta_ff = compact(dff_, L);
        trace_.attention.clear();
        trace_.attention.reserve(L * cfg_.n_heads * T * T);
        for (std::size_t lh = 0; lh < L * cfg_.n_heads; ++lh) {
            for (std::size_t i = 0; i < T; ++i) {
                const float* row = attn_.data() + (lh * capacity_ + i) * capacity_;
                trace_.attention.insert(trace_.attention.end(), row, row + T);
            }
        }
        trace_.final_probs = std::move(final_);
    }

private:
    std::span<float> slot(std::vector<float>& buf, std::size_t layer, std::size_t t) {
        return {buf.data() + (layer * capacity_ + t) * cfg_.d_model, cfg_.d_model};
    }

    std::vector<float> injected(StateKind kind, std::size_t l, std::size_t t, std::span<const float> h) {
        std::vector<float> cur(h.begin(), h.end());
        for (const auto& p : pending_) {
            const auto& spec = p.spec;
            if (spec.state_kind != kind || spec.layer != l || spec.position != t) continue;
            const DecodedArgmax old = decode_argmax(model_, spec.decoder, cur, l);
            const auto e_old = unit_embedding(*old.decoder, old.token);
            const auto e_new = unit_embedding(*old.decoder, spec.new_token);
            cur = apply_injection(cur, spec, e_old, e_new);
            trace_.injections[p.record_index].removed_token = old.token;
        }
        return cur;
    }

    void inject(StateKind kind, std::size_t l, std::size_t t, std::span<float> h) {
        const auto cur = injected(kind, l, t, h);
        std::copy(cur.begin(), cur.end(), h.begin());
    }

    // Replaces a residual state and moves the change into the delta that
    // produced it, element by element, so base + delta == state stays exact
    // and untouched elements keep their bits.
    void inject_residual(StateKind kind, std::size_t l, std::size_t t, std::span<float> state,
                         std::span<const float> base, std::span<float> delta) {
        const auto cur = injected(kind, l, t, state);
        for (std::size_t i = 0; i < state.size(); ++i) {
            if (cur[i] == state[i]) continue;
            delta[i] = cur[i] - base[i];
            state[i] = base[i] + delta[i];
        }
    }

    const Model& model_;
    const ModelConfig& cfg_;
    TraceRecord& trace_;
    std::size_t capacity_;
    std::vector<std::vector<float>> k_cache_, v_cache_;
    std::vector<float> x_, mid_, datt_, dff_, attn_, final_;
    std::vector<PendingInjection> pending_;
};

void validate_injection(const ModelConfig& cfg, const InjectionSpec& spec, std::size_t max_len) {
    if (spec.layer < 1 || spec.layer > cfg.n_layers) {
        throw InvalidInjection("injection layer " + std::to_string(spec.layer) + " outside [1, " +
                               std::to_string(cfg.n_layers) + "]");
    }
    if (spec.position >= max_len) {
        throw InvalidInjection("injection position " + std::to_string(spec.position) +
                               " beyond the sequence length " + std::to_string(max_len));
    }
    if (spec.new_token >= cfg.vocab_size) {
        throw InvalidInjection("injection token " + std::to_string(spec.new_token) + " outside vocabulary");
    }
}

}  // namespace

TraceRecord generate_with_trace(const Model& model, std::span<const TokenId> prompt,
                                const GenerationSettings& settings, std::span<const InjectionSpec> injections,
                                std::string model_id) {
    const ModelConfig& cfg = model.config();
    if (prompt.empty()) throw InvalidInput("prompt is empty");
    for (TokenId id : prompt) {
        if (id >= cfg.vocab_size) throw InvalidToken("prompt token " + std::to_string(id) + " outside vocabulary");
    }
    const std::size_t capacity = prompt.size() + settings.max_new_tokens;
    if (capacity > cfg.max_seq_len) {
        throw ContextOverflow("prompt of " + std::to_string(prompt.size()) + " tokens plus " +
                              std::to_string(settings.max_new_tokens) + " new tokens exceeds max_seq_len " +
                              std::to_string(cfg.max_seq_len));
    }
    if (!settings.greedy() && !(settings.temperature > 0.0 && std::isfinite(settings.temperature))) {
        throw InvalidInput("temperature must be finite and >= 0");
    }
    for (const auto& inj : injections) validate_injection(cfg, inj, capacity);

    TraceRecord trace;
    trace.id = compute_trace_id(model.fingerprint(), prompt, settings, injections);
    trace.model_id = std::move(model_id);
    trace.model_fingerprint = model.fingerprint();
    trace.n_layers = cfg.n_layers;
    trace.d_model = cfg.d_model;
    trace.n_heads = cfg.n_heads;
    trace.vocab_size = cfg.vocab_size;
    trace.prompt_len = prompt.size();
    trace.settings = settings;
    for (const auto& inj : injections) trace.injections.push_back({inj, std::nullopt});
    trace.tokens.assign(prompt.begin(), prompt.end());

    ForwardPass pass(model, trace, capacity, injections);
    TokenSampler sampler(settings);
    const auto eos = model.tokenizer().eos();
    std::vector<double> logits;
    for (std::size_t t = 0; t < trace.tokens.size(); ++t) logits = pass.step(t);
    for (std::size_t n = 0; n < settings.max_new_tokens; ++n) {
        const TokenId next = sampler.next(logits);
        trace.tokens.push_back(next);
        logits = pass.step(trace.tokens.size() - 1);
        if (settings.stop_at_eos && eos && next == *eos) break;
    }
    pass.finish(trace.tokens.size());
    return trace;
}

}  // namespace rscope
