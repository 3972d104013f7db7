#pragma once

#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "rscope/analysis.hpp"
#include "rscope/errors.hpp"
#include "rscope/serialize.hpp"
#include "rscope/trace.hpp"

namespace rscope {

// Request/response layer shared by the HTTP service and the CLI, so both
// produce the same bytes for the same trace and parameters.

// Failure carrying the HTTP status it maps to. `valid` lists accepted values
// when an enum parameter was wrong.
class ApiError : public Error {
public:
    ApiError(int status, const std::string& message, std::vector<std::string> valid = {})
        : Error(message), status_(status), valid_(std::move(valid)) {}
    int status() const { return status_; }
    const std::vector<std::string>& valid() const { return valid_; }

private:
    int status_;
    std::vector<std::string> valid_;
};

using Params = std::map<std::string, std::string>;

struct HeatmapRequest {
    DecoderSpec decoder;
    StateKind state = StateKind::x;
    HeatmapMetric metric = HeatmapMetric::probability;
    std::size_t k = kDefaultTopK;

    bool operator==(const HeatmapRequest&) const = default;
};

// Query parameters: decoder, state, metric, k, scale, max_iters, ratio.
// Unknown names and bad values throw ApiError(400).
HeatmapRequest parse_heatmap_params(const Params& params);
// Query parameters: layers (lo-hi | all), seed (all | column), weighting,
// topk (n | all), decoder, scale, k, max_iters, ratio.
FlowOptions parse_sankey_params(const Params& params);

// Canonical text of a request, for cache keys.
std::string cache_key(const HeatmapRequest& r);
std::string cache_key(const FlowOptions& o);

Json error_json(int status, const std::string& message, const std::vector<std::string>& valid = {});
// Compact JSON plus a trailing newline: the exact body the service sends.
std::string body_text(const Json& j);

// Name of the model directory, used when no explicit id is given.
std::string default_model_id(const std::filesystem::path& dir);

Json model_summary(const std::string& model_id, const ModelConfig& config);
Json generate_response(const Model& model, const TraceRecord& trace);
Json trace_response(const Model& model, const TraceRecord& trace);
Json heatmap_response(const Model& model, const TraceRecord& trace, const HeatmapRequest& request);
Json sankey_response(const Model& model, const TraceRecord& trace, const FlowOptions& options);

// Injection request body; new_token may be an id or token text. Throws
// ApiError(400) for malformed bodies and ApiError(422) for unknown tokens.
InjectionSpec parse_inject_body(const Json& body, const Tokenizer& tokenizer);
// Re-runs the source prompt with its injections plus `spec`. Throws
// ApiError(422) when the coordinates fall outside the source trace.
TraceRecord fork_with_injection(const Model& model, const TraceRecord& source, const InjectionSpec& spec);
Json inject_response(const Model& model, const TraceRecord& source, const TraceRecord& forked);

}  // namespace rscope
