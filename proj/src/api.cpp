#include "rscope/api.hpp"

#include <algorithm>
#include <charconv>

#include "rscope/errors.hpp"
#include "rscope/trace_io.hpp"

namespace rscope {

namespace {

const std::vector<std::string> kStrategies{"input_transpose", "output", "interpolated", "max_of_both", "iterative"};
const std::vector<std::string> kStates{"x", "intermediate", "delta_att", "delta_ff"};
const std::vector<std::string> kMetrics{"probability", "entropy", "att_contribution", "ff_contribution"};
const std::vector<std::string> kWeightings{"norm", "kl"};
constexpr std::size_t kMaxK = 1000;

std::string join(const std::vector<std::string>& v) {
    std::string out;
    for (const auto& s : v) out += (out.empty() ? "" : ", ") + s;
    return out;
}

[[noreturn]] void bad_enum(const std::string& name, const std::string& value, const std::vector<std::string>& valid) {
    throw ApiError(400, "invalid " + name + " '" + value + "'; valid values: " + join(valid), valid);
}

void reject_unknown(const Params& params, const std::vector<std::string>& allowed) {
    for (const auto& [name, value] : params) {
        if (std::find(allowed.begin(), allowed.end(), name) == allowed.end()) {
            throw ApiError(400, "unknown parameter '" + name + "'; valid parameters: " + join(allowed), allowed);
        }
    }
}

std::size_t parse_count(const std::string& name, const std::string& s, std::size_t lo, std::size_t hi) {
    std::size_t v = 0;
    const auto [end, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (ec != std::errc() || end != s.data() + s.size() || v < lo || v > hi) {
        throw ApiError(400, "parameter " + name + " must be an integer in [" + std::to_string(lo) + ", " +
                                std::to_string(hi) + "], got '" + s + "'");
    }
    return v;
}

bool parse_flag(const std::string& name, const std::string& s) {
    if (s == "1" || s == "true") return true;
    if (s == "0" || s == "false") return false;
    bad_enum(name, s, {"true", "false", "1", "0"});
}

// decoder, scale, max_iters, ratio
DecoderSpec parse_decoder_params(const Params& p) {
    DecoderSpec d;
    if (auto it = p.find("decoder"); it != p.end()) {
        auto s = parse_decoder_strategy(it->second);
        if (!s) bad_enum("decoder", it->second, kStrategies);
        d.strategy = *s;
    }
    if (auto it = p.find("scale"); it != p.end()) d.apply_final_norm_scale = parse_flag("scale", it->second);
    if (auto it = p.find("max_iters"); it != p.end()) d.max_iters = parse_count("max_iters", it->second, 1, 64);
    if (auto it = p.find("ratio"); it != p.end()) {
        try {
            std::size_t used = 0;
            d.norm_threshold_ratio = std::stod(it->second, &used);
            if (used != it->second.size()) throw std::invalid_argument("trailing");
        } catch (const std::exception&) {
            throw ApiError(400, "parameter ratio must be a number, got '" + it->second + "'");
        }
        if (!(d.norm_threshold_ratio >= 0.0 && d.norm_threshold_ratio < 1.0)) {
            throw ApiError(400, "parameter ratio must lie in [0, 1)");
        }
    }
    return d;
}

Json token_list(const Tokenizer& tok, std::span<const TokenId> ids) {
    Json out = Json::array();
    for (auto id : ids) out.push_back({{"id", id}, {"text", tok.display(id)}});
    return out;
}

}  // namespace

HeatmapRequest parse_heatmap_params(const Params& p) {
    reject_unknown(p, {"decoder", "state", "metric", "k", "scale", "max_iters", "ratio"});
    HeatmapRequest r;
    r.decoder = parse_decoder_params(p);
    if (auto it = p.find("state"); it != p.end()) {
        auto s = parse_state_kind(it->second);
        if (!s) bad_enum("state", it->second, kStates);
        r.state = *s;
    }
    if (auto it = p.find("metric"); it != p.end()) {
        auto m = parse_heatmap_metric(it->second);
        if (!m) bad_enum("metric", it->second, kMetrics);
        r.metric = *m;
    }
    if (auto it = p.find("k"); it != p.end()) r.k = parse_count("k", it->second, 1, kMaxK);
    return r;
}

FlowOptions parse_sankey_params(const Params& p) {
    reject_unknown(p, {"layers", "seed", "weighting", "topk", "decoder", "scale", "k", "max_iters", "ratio"});
    FlowOptions o;
    o.decoder = parse_decoder_params(p);
    if (auto it = p.find("layers"); it != p.end()) {
        const std::string& s = it->second;
        if (s == "all") {
            o.layer_lo = 1;
        } else if (auto dash = s.find('-'); dash != std::string::npos) {
            o.layer_lo = parse_count("layers", s.substr(0, dash), 1, 100000);
            o.layer_hi = parse_count("layers", s.substr(dash + 1), 1, 100000);
        } else {
            o.layer_lo = o.layer_hi = parse_count("layers", s, 1, 100000);
        }
    }
    if (auto it = p.find("seed"); it != p.end() && it->second != "all") {
        o.seed = SeedMode::single_column;
        o.seed_column = parse_count("seed", it->second, 0, 1000000);
    }
    if (auto it = p.find("weighting"); it != p.end()) {
        auto w = parse_flow_weighting(it->second);
        if (!w) bad_enum("weighting", it->second, kWeightings);
        o.weighting = *w;
    }
    if (auto it = p.find("topk"); it != p.end() && it->second != "all") {
        o.topk_attention = parse_count("topk", it->second, 1, 1000000);
    }
    if (auto it = p.find("k"); it != p.end()) o.k = parse_count("k", it->second, 1, kMaxK);
    return o;
}

std::string cache_key(const HeatmapRequest& r) {
    return dump_compact(Json{{"heatmap", to_json(r.decoder)},
                             {"state", to_string(r.state)},
                             {"metric", to_string(r.metric)},
                             {"k", r.k}});
}

std::string cache_key(const FlowOptions& o) {
    return dump_compact(Json{{"sankey", to_json(o.decoder)},
                             {"lo", o.layer_lo ? Json(*o.layer_lo) : Json(nullptr)},
                             {"hi", o.layer_hi ? Json(*o.layer_hi) : Json(nullptr)},
                             {"seed", o.seed == SeedMode::all_columns ? Json("all") : Json(o.seed_column)},
                             {"weighting", to_string(o.weighting)},
                             {"topk", o.topk_attention},
                             {"k", o.k}});
}

Json error_json(int status, const std::string& message, const std::vector<std::string>& valid) {
    Json j{{"error", message}, {"status", status}};
    if (!valid.empty()) j["valid"] = valid;
    return j;
}

std::string body_text(const Json& j) { return dump_compact(j) + "\n"; }

std::string default_model_id(const std::filesystem::path& dir) {
    auto p = std::filesystem::absolute(dir).lexically_normal();
    if (p.filename().empty()) p = p.parent_path();
    return p.filename().string();
}

Json model_summary(const std::string& model_id, const ModelConfig& c) {
    return Json{{"model_id", model_id},
                {"n_layers", c.n_layers},
                {"d_model", c.d_model},
                {"n_heads", c.n_heads},
                {"d_ff", c.d_ff},
                {"vocab_size", c.vocab_size},
                {"max_seq_len", c.max_seq_len},
                {"tied_embeddings", c.tied_embeddings},
                {"tokenizer", c.tokenizer == TokenizerKind::byte ? "byte" : "vocab"}};
}

Json generate_response(const Model& model, const TraceRecord& t) {
    return Json{{"trace_id", t.id},
                {"model_id", t.model_id},
                {"completion", completion_text(model, t)},
                {"prompt_len", t.prompt_len},
                {"length", t.length()},
                {"tokens", token_list(model.tokenizer(), t.tokens)}};
}

Json trace_response(const Model& model, const TraceRecord& t) {
    Json j = trace_metadata(t);
    j["completion"] = completion_text(model, t);
    j["tokens"] = token_list(model.tokenizer(), t.tokens);
    return j;
}

Json heatmap_response(const Model& model, const TraceRecord& t, const HeatmapRequest& r) {
    return to_json(build_heatmap(model, t, r.decoder, r.state, r.metric, r.k), model.tokenizer());
}

Json sankey_response(const Model& model, const TraceRecord& t, const FlowOptions& o) {
    try {
        return to_json(build_flow_graph(model, t, o), model.tokenizer());
    } catch (const InvalidInput& e) {
        throw ApiError(400, e.what());
    }
}

InjectionSpec parse_inject_body(const Json& body, const Tokenizer& tok) {
    if (!body.is_object()) throw ApiError(400, "injection body must be a JSON object");
    Json j = body;
    if (j.contains("new_token") && j["new_token"].is_string()) {
        try {
            j["new_token"] = tok.lookup(j["new_token"].get<std::string>());
        } catch (const InvalidToken& e) {
            throw ApiError(422, e.what());
        }
    }
    try {
        return injection_from_json(j);
    } catch (const InvalidInput& e) {
        throw ApiError(400, e.what());
    }
}

TraceRecord fork_with_injection(const Model& model, const TraceRecord& source, const InjectionSpec& spec) {
    if (spec.position >= source.length()) {
        throw ApiError(422, "injection position " + std::to_string(spec.position) + " outside trace of length " +
                                std::to_string(source.length()));
    }
    std::vector<InjectionSpec> all;
    for (const auto& r : source.injections) all.push_back(r.spec);
    all.push_back(spec);
    const std::span<const TokenId> prompt(source.tokens.data(), source.prompt_len);
    try {
        return generate_with_trace(model, prompt, source.settings, all, source.model_id);
    } catch (const InvalidInjection& e) {
        throw ApiError(422, e.what());
    } catch (const InvalidToken& e) {
        throw ApiError(422, e.what());
    } catch (const ContextOverflow& e) {
        throw ApiError(422, e.what());
    }
}

Json inject_response(const Model& model, const TraceRecord& source, const TraceRecord& forked) {
    const std::size_t n = std::max(source.length(), forked.length());
    Json diff = Json::array();
    bool identical = source.tokens == forked.tokens;
    for (std::size_t p = 0; p < n; ++p) {
        const Json before = p < source.length() ? Json(source.tokens[p]) : Json(nullptr);
        const Json after = p < forked.length() ? Json(forked.tokens[p]) : Json(nullptr);
        diff.push_back({{"position", p}, {"changed", before != after}, {"old_token", before}, {"new_token", after}});
    }
    const auto& applied = forked.injections.back();
    return Json{{"trace_id", forked.id},
                {"source_trace_id", source.id},
                {"completion", completion_text(model, forked)},
                {"source_completion", completion_text(model, source)},
                {"identical", identical},
                {"injection", to_json(applied)},
                {"removed_token", applied.removed_token ? Json(*applied.removed_token) : Json(nullptr)},
                {"diff", std::move(diff)}};
}

}  // namespace rscope
