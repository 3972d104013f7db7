#pragma once

#include <cstddef>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "rscope/decoding.hpp"
#include "rscope/serialize.hpp"
#include "rscope/trace.hpp"

namespace rscope {

// ---- contributions and attention ------------------------------------------

struct Contribution {
    double att = 0.0;
    double ff = 0.0;
};

// |delta| / (|delta| + |input|), 0 when both are zero.
double norm_share(std::span<const float> delta, std::span<const float> input);

// Share of the attention delta against x^(l-1) and of the feed-forward
// delta against x'^(l) at layer l (1-based). Throws InvalidInput for bad
// coordinates.
Contribution contribution_percentages(const TraceRecord& trace, std::size_t layer, std::size_t position);

// Head-averaged attention row of query position `query` at `layer`, over key
// positions 0..query. Renormalized in double so it sums to 1.
std::vector<double> mean_attention(const TraceRecord& trace, std::size_t layer, std::size_t query);

// Keeps the k largest entries (lower index wins ties), zeroes the rest and
// renormalizes. k = 0 or k >= size leaves the weights unchanged.
std::vector<double> keep_top_k(std::span<const double> weights, std::size_t k);

// softmax of -KL(p_out || p_b) over the branches.
std::vector<double> kl_branch_weights(const Distribution& p_out, std::span<const Distribution> branches);

// ---- heatmap --------------------------------------------------------------

enum class HeatmapMetric { probability, entropy, att_contribution, ff_contribution };
std::string_view to_string(HeatmapMetric m);
std::optional<HeatmapMetric> parse_heatmap_metric(std::string_view s);

struct HeatmapCell {
    std::size_t layer = 0;
    std::size_t position = 0;
    DecodedState decoded;
    double probability = 0.0;  // of the shown (top-1) token
    double entropy = 0.0;
    // contributions of the layer the row belongs to; 0 on the embedding row
    double att_contribution = 0.0;
    double ff_contribution = 0.0;
    double value = 0.0;  // the selected metric
};

struct HeatmapGrid {
    std::string trace_id;
    StateKind state = StateKind::x;
    HeatmapMetric metric = HeatmapMetric::probability;
    DecoderSpec decoder;
    std::size_t k = kDefaultTopK;
    std::size_t first_layer = 0;  // 0 for x, 1 for the other kinds
    std::size_t rows = 0;
    std::size_t cols = 0;
    std::size_t prompt_len = 0;
    std::size_t vocab_size = 0;
    std::vector<TokenId> tokens;
    std::vector<HeatmapCell> cells;  // row-major, row r is layer first_layer + r

    const HeatmapCell& at(std::size_t layer, std::size_t position) const;
    // Fixed bounds of the metric: ln|V| for entropy, 1 otherwise.
    double value_max() const;
};

// Throws InvalidInput when the trace was produced by a different model.
HeatmapGrid build_heatmap(const Model& model, const TraceRecord& trace, const DecoderSpec& decoder, StateKind state,
                          HeatmapMetric metric, std::size_t k = kDefaultTopK);

Json to_json(const HeatmapGrid& grid, const Tokenizer& tokenizer);

// ---- flow graph -----------------------------------------------------------

enum class SeedMode { all_columns, single_column };
enum class FlowWeighting { norm, kl };
std::string_view to_string(FlowWeighting w);
std::optional<FlowWeighting> parse_flow_weighting(std::string_view s);

inline constexpr std::size_t kDefaultFlowLayers = 5;

struct FlowOptions {
    // Inclusive 1-based layer range; unset means the top kDefaultFlowLayers.
    std::optional<std::size_t> layer_lo;
    std::optional<std::size_t> layer_hi;
    SeedMode seed = SeedMode::all_columns;
    std::size_t seed_column = 0;
    FlowWeighting weighting = FlowWeighting::norm;
    std::size_t topk_attention = 0;  // 0 keeps every attention entry
    DecoderSpec decoder;
    std::size_t k = kDefaultTopK;  // decoration length

    bool operator==(const FlowOptions&) const = default;
};

// Per-layer inputs of the flow recursion. mu[i] holds weights over key
// positions 0..i and must sum to 1.
struct FlowLayerInputs {
    std::vector<double> pct_att;
    std::vector<double> pct_ff;
    std::vector<std::vector<double>> mu;
};

struct FlowLayerResult {
    std::vector<double> x_top;
    std::vector<double> ffnn;
    std::vector<double> x_mid;  // x'
    std::vector<double> att;
    std::vector<double> x_bottom;
};

// One step of the recursion: flow at x^(l) pushed down to x^(l-1).
FlowLayerResult propagate_layer(std::span<const double> x_top, const FlowLayerInputs& in);

enum class FlowNodeKind { residual_x, residual_x_mid, attention, ffnn };
enum class FlowEdgeKind { residual, attention, ffnn };
std::string_view to_string(FlowNodeKind k);
std::string_view to_string(FlowEdgeKind k);

struct FlowNode {
    std::string id;
    FlowNodeKind kind = FlowNodeKind::residual_x;
    std::size_t layer = 0;
    std::size_t position = 0;
    double flow = 0.0;
    std::vector<TokenProb> state_top_k;
    std::vector<TokenProb> delta_top_k;  // empty for the embedding row
};

struct FlowEdge {
    std::string source;
    std::string target;
    FlowEdgeKind kind = FlowEdgeKind::residual;
    double weight = 0.0;
};

struct BoundarySum {
    std::size_t layer = 0;
    double total = 0.0;
};

struct FlowGraph {
    std::string trace_id;
    std::size_t layer_lo = 0;
    std::size_t layer_hi = 0;
    FlowOptions options;
    std::vector<TokenId> tokens;
    std::size_t prompt_len = 0;
    double seeded = 0.0;
    // nodes and edges with zero flow are left out
    std::vector<FlowNode> nodes;
    std::vector<FlowEdge> edges;
    // sum of x flow at every layer boundary, from layer_lo - 1 to layer_hi
    std::vector<BoundarySum> boundaries;
};

std::string flow_node_id(FlowNodeKind kind, std::size_t layer, std::size_t position);

// Throws InvalidInput for a bad range or seed column, or a trace from a
// different model.
FlowGraph build_flow_graph(const Model& model, const TraceRecord& trace, const FlowOptions& options);

Json to_json(const FlowGraph& graph, const Tokenizer& tokenizer);

}  // namespace rscope
