#include "rscope/serialize.hpp"

#include <cmath>

#include "rscope/errors.hpp"

namespace rscope {

namespace {

template <typename T>
T field(const Json& j, const char* key, T fallback) {
    if (!j.contains(key) || j.at(key).is_null()) return fallback;
    try {
        return j.at(key).get<T>();
    } catch (const nlohmann::json::exception&) {
        throw InvalidInput(std::string("field '") + key + "' has the wrong type");
    }
}

std::size_t count_field(const Json& j, const char* key, std::size_t fallback) {
    if (!j.contains(key) || j.at(key).is_null()) return fallback;
    const Json& v = j.at(key);
    if (!v.is_number_integer() || v.get<long long>() < 0) {
        throw InvalidInput(std::string("field '") + key + "' must be a non-negative integer");
    }
    return v.get<std::size_t>();
}

}  // namespace

Json to_json(const DecoderSpec& spec) {
    Json j;
    j["strategy"] = to_string(spec.strategy);
    j["apply_final_norm_scale"] = spec.apply_final_norm_scale;
    if (spec.strategy == DecoderStrategy::iterative) {
        j["max_iters"] = spec.max_iters;
        j["norm_threshold_ratio"] = spec.norm_threshold_ratio;
    }
    return j;
}

Json to_json(const GenerationSettings& s) {
    return Json{{"max_new_tokens", s.max_new_tokens},
                {"temperature", s.temperature},
                {"top_k", s.top_k},
                {"seed", s.seed},
                {"stop_at_eos", s.stop_at_eos},
                {"sampling", s.greedy() ? "greedy" : "sample"}};
}

Json to_json(const InjectionSpec& s) {
    return Json{{"layer", s.layer},
                {"position", s.position},
                {"state_kind", to_string(s.state_kind)},
                {"new_token", s.new_token},
                {"mode", to_string(s.mode)},
                {"scaled", s.scaled},
                {"decoder", to_json(s.decoder)}};
}

Json to_json(const InjectionRecord& r) {
    Json j = to_json(r.spec);
    j["removed_token"] = r.removed_token ? Json(*r.removed_token) : Json(nullptr);
    return j;
}

DecoderSpec decoder_spec_from_json(const Json& j, const DecoderSpec& defaults) {
    if (!j.is_object()) throw InvalidInput("decoder must be an object");
    DecoderSpec s = defaults;
    if (j.contains("strategy")) {
        const auto name = field<std::string>(j, "strategy", "");
        auto parsed = parse_decoder_strategy(name);
        if (!parsed) throw InvalidInput("unknown decoder strategy '" + name + "'");
        s.strategy = *parsed;
    }
    s.apply_final_norm_scale = field<bool>(j, "apply_final_norm_scale", s.apply_final_norm_scale);
    s.max_iters = count_field(j, "max_iters", s.max_iters);
    s.norm_threshold_ratio = field<double>(j, "norm_threshold_ratio", s.norm_threshold_ratio);
    return s;
}

GenerationSettings settings_from_json(const Json& j, const GenerationSettings& defaults) {
    if (j.is_null()) return defaults;
    if (!j.is_object()) throw InvalidInput("settings must be an object");
    GenerationSettings s = defaults;
    s.max_new_tokens = count_field(j, "max_new_tokens", s.max_new_tokens);
    s.temperature = field<double>(j, "temperature", s.temperature);
    s.top_k = count_field(j, "top_k", s.top_k);
    s.seed = field<std::uint64_t>(j, "seed", s.seed);
    s.stop_at_eos = field<bool>(j, "stop_at_eos", s.stop_at_eos);
    if (!(s.temperature >= 0.0) || !std::isfinite(s.temperature)) {
        throw InvalidInput("temperature must be finite and >= 0");
    }
    return s;
}

InjectionSpec injection_from_json(const Json& j) {
    if (!j.is_object()) throw InvalidInput("injection must be an object");
    InjectionSpec s;
    if (!j.contains("layer") || !j.contains("position") || !j.contains("new_token")) {
        throw InvalidInput("injection needs layer, position and new_token");
    }
    s.layer = count_field(j, "layer", 0);
    s.position = count_field(j, "position", 0);
    s.new_token = static_cast<TokenId>(count_field(j, "new_token", 0));
    const auto kind = field<std::string>(j, "state_kind", "x");
    auto parsed_kind = parse_state_kind(kind);
    if (!parsed_kind) throw InvalidInput("unknown state_kind '" + kind + "'");
    s.state_kind = *parsed_kind;
    const auto mode = field<std::string>(j, "mode", "component_swap");
    auto parsed_mode = parse_injection_mode(mode);
    if (!parsed_mode) throw InvalidInput("unknown mode '" + mode + "'");
    s.mode = *parsed_mode;
    s.scaled = field<bool>(j, "scaled", true);
    if (j.contains("decoder") && !j.at("decoder").is_null()) s.decoder = decoder_spec_from_json(j.at("decoder"));
    return s;
}

InjectionRecord injection_record_from_json(const Json& j) {
    InjectionRecord r{injection_from_json(j), std::nullopt};
    if (j.contains("removed_token") && !j.at("removed_token").is_null()) {
        r.removed_token = static_cast<TokenId>(count_field(j, "removed_token", 0));
    }
    return r;
}

std::string dump_compact(const Json& j) { return j.dump(-1, ' ', false, Json::error_handler_t::replace); }

}  // namespace rscope
