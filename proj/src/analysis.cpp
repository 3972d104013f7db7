#include "rscope/analysis.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <tuple>

#include "rscope/errors.hpp"

namespace rscope {

namespace {

void check_same_model(const Model& model, const TraceRecord& trace) {
    if (trace.model_fingerprint != model.fingerprint()) {
        throw InvalidInput("trace " + trace.id + " was not produced by this model");
    }
}

std::vector<float> difference(std::span<const float> a, std::span<const float> b) {
    std::vector<float> out(a.size());
    for (std::size_t i = 0; i < a.size(); ++i) out[i] = a[i] - b[i];
    return out;
}

Json top_k_json(const std::vector<TokenProb>& list, const Tokenizer& tok) {
    Json out = Json::array();
    for (const auto& e : list) out.push_back({{"id", e.id}, {"text", tok.display(e.id)}, {"p", e.p}});
    return out;
}

}  // namespace

double norm_share(std::span<const float> delta, std::span<const float> input) {
    const double nd = l2_norm(delta);
    const double ni = l2_norm(input);
    if (nd + ni == 0.0) return 0.0;
    return nd / (nd + ni);
}

Contribution contribution_percentages(const TraceRecord& trace, std::size_t layer, std::size_t position) {
    if (layer == 0) throw InvalidInput("contributions exist only for layers 1..L");
    Contribution c;
    c.att = norm_share(trace.state(StateKind::delta_att, layer, position), trace.state(StateKind::x, layer - 1, position));
    c.ff = norm_share(trace.state(StateKind::delta_ff, layer, position),
                      trace.state(StateKind::intermediate, layer, position));
    return c;
}

std::vector<double> mean_attention(const TraceRecord& trace, std::size_t layer, std::size_t query) {
    if (trace.n_heads == 0) throw InvalidInput("trace has no attention heads");
    std::vector<double> mu(query + 1, 0.0);
    for (std::size_t h = 0; h < trace.n_heads; ++h) {
        const auto row = trace.attention_row(layer, h, query);
        for (std::size_t j = 0; j <= query; ++j) mu[j] += row[j];
    }
    // float storage leaves each row a few ulps off 1
    const double total = std::accumulate(mu.begin(), mu.end(), 0.0);
    if (!(total > 0.0)) throw InvalidInput("attention row sums to zero");
    for (double& v : mu) v /= total;
    return mu;
}

std::vector<double> keep_top_k(std::span<const double> weights, std::size_t k) {
    std::vector<double> out(weights.begin(), weights.end());
    if (k == 0 || k >= out.size()) return out;
    std::vector<std::size_t> order(out.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return out[a] > out[b]; });
    double kept = 0.0;
    for (std::size_t r = 0; r < k; ++r) kept += out[order[r]];
    for (std::size_t r = k; r < order.size(); ++r) out[order[r]] = 0.0;
    if (kept > 0.0) {
        for (double& v : out) v /= kept;
    }
    return out;
}

std::vector<double> kl_branch_weights(const Distribution& p_out, std::span<const Distribution> branches) {
    if (branches.empty()) throw InvalidInput("kl_branch_weights needs at least one branch");
    std::vector<double> neg(branches.size());
    for (std::size_t b = 0; b < branches.size(); ++b) neg[b] = -kl_divergence(p_out, branches[b]);
    const auto w = softmax(neg);
    return {w.probs().begin(), w.probs().end()};
}

// ---- heatmap --------------------------------------------------------------

std::string_view to_string(HeatmapMetric m) {
    switch (m) {
        case HeatmapMetric::probability: return "probability";
        case HeatmapMetric::entropy: return "entropy";
        case HeatmapMetric::att_contribution: return "att_contribution";
        case HeatmapMetric::ff_contribution: return "ff_contribution";
    }
    return "?";
}

std::optional<HeatmapMetric> parse_heatmap_metric(std::string_view s) {
    for (auto m : {HeatmapMetric::probability, HeatmapMetric::entropy, HeatmapMetric::att_contribution,
                   HeatmapMetric::ff_contribution}) {
        if (s == to_string(m)) return m;
    }
    return std::nullopt;
}

const HeatmapCell& HeatmapGrid::at(std::size_t layer, std::size_t position) const {
    if (layer < first_layer || layer - first_layer >= rows || position >= cols) {
        throw InvalidInput("heatmap cell (" + std::to_string(layer) + ", " + std::to_string(position) +
                           ") out of range");
    }
    return cells[(layer - first_layer) * cols + position];
}

double HeatmapGrid::value_max() const {
    return metric == HeatmapMetric::entropy ? std::log(static_cast<double>(vocab_size)) : 1.0;
}

HeatmapGrid build_heatmap(const Model& model, const TraceRecord& trace, const DecoderSpec& decoder, StateKind state,
                          HeatmapMetric metric, std::size_t k) {
    check_same_model(model, trace);
    HeatmapGrid g;
    g.trace_id = trace.id;
    g.state = state;
    g.metric = metric;
    g.decoder = decoder;
    g.k = k;
    g.first_layer = state == StateKind::x ? 0 : 1;
    g.rows = trace.n_layers + 1 - g.first_layer;
    g.cols = trace.length();
    g.prompt_len = trace.prompt_len;
    g.vocab_size = trace.vocab_size;
    g.tokens = trace.tokens;
    g.cells.reserve(g.rows * g.cols);

    for (std::size_t r = 0; r < g.rows; ++r) {
        const std::size_t layer = g.first_layer + r;
        for (std::size_t p = 0; p < g.cols; ++p) {
            HeatmapCell c;
            c.layer = layer;
            c.position = p;
            c.decoded = decode(model, decoder, trace.state(state, layer, p), layer, k);
            c.probability = c.decoded.probability();
            c.entropy = entropy(c.decoded.distribution);
            if (layer > 0) {
                const auto share = contribution_percentages(trace, layer, p);
                c.att_contribution = share.att;
                c.ff_contribution = share.ff;
            }
            switch (metric) {
                case HeatmapMetric::probability: c.value = c.probability; break;
                case HeatmapMetric::entropy: c.value = c.entropy; break;
                case HeatmapMetric::att_contribution: c.value = c.att_contribution; break;
                case HeatmapMetric::ff_contribution: c.value = c.ff_contribution; break;
            }
            g.cells.push_back(std::move(c));
        }
    }
    return g;
}

Json to_json(const HeatmapGrid& g, const Tokenizer& tok) {
    Json j;
    j["trace_id"] = g.trace_id;
    j["state"] = to_string(g.state);
    j["metric"] = to_string(g.metric);
    j["decoder"] = to_json(g.decoder);
    j["k"] = g.k;
    j["rows"] = g.rows;
    j["cols"] = g.cols;
    j["first_layer"] = g.first_layer;
    j["layers"] = Json::array();
    for (std::size_t r = 0; r < g.rows; ++r) j["layers"].push_back(g.first_layer + r);
    j["prompt_len"] = g.prompt_len;
    j["value_range"] = Json::array({0.0, g.value_max()});
    j["tokens"] = Json::array();
    for (auto id : g.tokens) j["tokens"].push_back({{"id", id}, {"text", tok.display(id)}});

    Json cells = Json::array();
    for (const auto& c : g.cells) {
        Json cell{{"layer", c.layer},
                  {"position", c.position},
                  {"token", c.decoded.token()},
                  {"text", tok.display(c.decoded.token())},
                  {"value", c.value},
                  {"probability", c.probability},
                  {"entropy", c.entropy},
                  {"att_contribution", c.att_contribution},
                  {"ff_contribution", c.ff_contribution},
                  {"top_k", top_k_json(c.decoded.top_k, tok)}};
        if (c.decoded.source) {
            cell["source"] = to_string(*c.decoded.source);
            cell["input_top_k"] = top_k_json(c.decoded.input_top_k, tok);
            cell["output_top_k"] = top_k_json(c.decoded.output_top_k, tok);
        }
        if (g.decoder.strategy == DecoderStrategy::iterative) {
            cell["iterations"] = top_k_json(c.decoded.iterations, tok);
        }
        cells.push_back(std::move(cell));
    }
    j["cells"] = std::move(cells);
    return j;
}

// ---- flow graph -----------------------------------------------------------

std::string_view to_string(FlowWeighting w) { return w == FlowWeighting::norm ? "norm" : "kl"; }

std::optional<FlowWeighting> parse_flow_weighting(std::string_view s) {
    if (s == "norm") return FlowWeighting::norm;
    if (s == "kl") return FlowWeighting::kl;
    return std::nullopt;
}

std::string_view to_string(FlowNodeKind k) {
    switch (k) {
        case FlowNodeKind::residual_x: return "residual_x";
        case FlowNodeKind::residual_x_mid: return "residual_x'";
        case FlowNodeKind::attention: return "attention";
        case FlowNodeKind::ffnn: return "ffnn";
    }
    return "?";
}

std::string_view to_string(FlowEdgeKind k) {
    switch (k) {
        case FlowEdgeKind::residual: return "residual";
        case FlowEdgeKind::attention: return "attention";
        case FlowEdgeKind::ffnn: return "ffnn";
    }
    return "?";
}

std::string flow_node_id(FlowNodeKind kind, std::size_t layer, std::size_t position) {
    static constexpr const char* prefix[] = {"x", "xp", "att", "ffn"};
    return std::string(prefix[static_cast<int>(kind)]) + ":" + std::to_string(layer) + ":" + std::to_string(position);
}

FlowLayerResult propagate_layer(std::span<const double> x_top, const FlowLayerInputs& in) {
    const std::size_t T = x_top.size();
    if (in.pct_att.size() != T || in.pct_ff.size() != T || in.mu.size() != T) {
        throw InvalidInput("flow layer inputs do not match the column count");
    }
    FlowLayerResult r;
    r.x_top.assign(x_top.begin(), x_top.end());
    r.ffnn.resize(T);
    r.x_mid.resize(T);
    r.att.resize(T);
    r.x_bottom.assign(T, 0.0);
    for (std::size_t j = 0; j < T; ++j) {
        r.ffnn[j] = in.pct_ff[j] * x_top[j];
        r.x_mid[j] = x_top[j];
        r.att[j] = in.pct_att[j] * r.x_mid[j];
    }
    for (std::size_t i = 0; i < T; ++i) {
        if (in.mu[i].size() > T) throw InvalidInput("attention weights longer than the sequence");
        for (std::size_t j = 0; j < in.mu[i].size(); ++j) r.x_bottom[j] += in.mu[i][j] * r.att[i];
    }
    for (std::size_t j = 0; j < T; ++j) r.x_bottom[j] += (1.0 - in.pct_att[j]) * r.x_mid[j];
    return r;
}

namespace {

// Memoized decodings of the trace states needed for decorations and KL
// weights.
class StateDecoder {
public:
    StateDecoder(const Model& model, const TraceRecord& trace, const FlowOptions& o)
        : model_(model), trace_(trace), spec_(o.decoder), k_(o.k) {}

    // `layer` doubles as the decoding depth.
    const DecodedState& state(StateKind kind, std::size_t layer, std::size_t pos) {
        const auto key = std::make_tuple(static_cast<int>(kind), layer, pos);
        auto it = cache_.find(key);
        if (it == cache_.end()) {
            it = cache_.emplace(key, decode(model_, spec_, trace_.state(kind, layer, pos), layer, k_)).first;
        }
        return it->second;
    }

    std::vector<TokenProb> difference_top_k(std::span<const float> out, std::span<const float> in, std::size_t depth) {
        return decode(model_, spec_, difference(out, in), depth, k_).top_k;
    }

private:
    const Model& model_;
    const TraceRecord& trace_;
    DecoderSpec spec_;
    std::size_t k_;
    std::map<std::tuple<int, std::size_t, std::size_t>, DecodedState> cache_;
};

}  // namespace

FlowGraph build_flow_graph(const Model& model, const TraceRecord& trace, const FlowOptions& o) {
    check_same_model(model, trace);
    const std::size_t L = trace.n_layers;
    const std::size_t T = trace.length();
    const std::size_t hi = o.layer_hi.value_or(L);
    const std::size_t lo = o.layer_lo.value_or(hi > kDefaultFlowLayers ? hi - kDefaultFlowLayers + 1 : 1);
    if (lo < 1 || hi > L || lo > hi) {
        throw InvalidInput("layer range " + std::to_string(lo) + "-" + std::to_string(hi) + " not within 1-" +
                           std::to_string(L));
    }
    if (o.seed == SeedMode::single_column && o.seed_column >= T) {
        throw InvalidInput("seed column " + std::to_string(o.seed_column) + " outside sequence of length " +
                           std::to_string(T));
    }

    FlowGraph g;
    g.trace_id = trace.id;
    g.layer_lo = lo;
    g.layer_hi = hi;
    g.options = o;
    g.options.layer_lo = lo;
    g.options.layer_hi = hi;
    g.tokens = trace.tokens;
    g.prompt_len = trace.prompt_len;

    std::vector<double> top(T, 0.0);
    if (o.seed == SeedMode::all_columns) {
        std::fill(top.begin(), top.end(), 1.0);
    } else {
        top[o.seed_column] = 1.0;
    }
    g.seeded = std::accumulate(top.begin(), top.end(), 0.0);

    StateDecoder dec(model, trace, o);
    std::vector<FlowLayerInputs> inputs(hi + 1);
    std::vector<FlowLayerResult> results(hi + 1);
    for (std::size_t l = hi; l >= lo; --l) {
        auto& in = inputs[l];
        in.pct_att.resize(T);
        in.pct_ff.resize(T);
        in.mu.resize(T);
        for (std::size_t p = 0; p < T; ++p) {
            if (o.weighting == FlowWeighting::norm) {
                const auto c = contribution_percentages(trace, l, p);
                in.pct_att[p] = c.att;
                in.pct_ff[p] = c.ff;
            } else {
                const std::vector<Distribution> ff_branches{dec.state(StateKind::delta_ff, l, p).distribution,
                                                            dec.state(StateKind::intermediate, l, p).distribution};
                in.pct_ff[p] = kl_branch_weights(dec.state(StateKind::x, l, p).distribution, ff_branches)[0];
                const std::vector<Distribution> att_branches{dec.state(StateKind::delta_att, l, p).distribution,
                                                             dec.state(StateKind::x, l - 1, p).distribution};
                in.pct_att[p] =
                    kl_branch_weights(dec.state(StateKind::intermediate, l, p).distribution, att_branches)[0];
            }
            in.mu[p] = keep_top_k(mean_attention(trace, l, p), o.topk_attention);
        }
        results[l] = propagate_layer(top, in);
        top = results[l].x_bottom;
    }

    auto add_node = [&](FlowNodeKind kind, std::size_t layer, std::size_t pos, double flow) {
        if (flow <= 0.0) return;
        FlowNode n;
        n.id = flow_node_id(kind, layer, pos);
        n.kind = kind;
        n.layer = layer;
        n.position = pos;
        n.flow = flow;
        switch (kind) {
            case FlowNodeKind::residual_x:
                n.state_top_k = dec.state(StateKind::x, layer, pos).top_k;
                if (layer > 0) {
                    n.delta_top_k = dec.difference_top_k(trace.state(StateKind::x, layer, pos),
                                                         trace.state(StateKind::intermediate, layer, pos), layer);
                }
                break;
            case FlowNodeKind::residual_x_mid:
                n.state_top_k = dec.state(StateKind::intermediate, layer, pos).top_k;
                n.delta_top_k = dec.difference_top_k(trace.state(StateKind::intermediate, layer, pos),
                                                     trace.state(StateKind::x, layer - 1, pos), layer);
                break;
            case FlowNodeKind::attention:
                n.state_top_k = dec.state(StateKind::delta_att, layer, pos).top_k;
                n.delta_top_k = n.state_top_k;
                break;
            case FlowNodeKind::ffnn:
                n.state_top_k = dec.state(StateKind::delta_ff, layer, pos).top_k;
                n.delta_top_k = n.state_top_k;
                break;
        }
        g.nodes.push_back(std::move(n));
    };
    auto add_edge = [&](std::string src, std::string dst, FlowEdgeKind kind, double w) {
        if (w <= 0.0) return;
        g.edges.push_back({std::move(src), std::move(dst), kind, w});
    };

    // bottom-up so the listing reads in forward order
    for (std::size_t p = 0; p < T; ++p) add_node(FlowNodeKind::residual_x, lo - 1, p, results[lo].x_bottom[p]);
    g.boundaries.push_back({lo - 1, std::accumulate(results[lo].x_bottom.begin(), results[lo].x_bottom.end(), 0.0)});
    for (std::size_t l = lo; l <= hi; ++l) {
        const auto& r = results[l];
        const auto& in = inputs[l];
        for (std::size_t p = 0; p < T; ++p) add_node(FlowNodeKind::attention, l, p, r.att[p]);
        for (std::size_t p = 0; p < T; ++p) add_node(FlowNodeKind::residual_x_mid, l, p, r.x_mid[p]);
        for (std::size_t p = 0; p < T; ++p) add_node(FlowNodeKind::ffnn, l, p, r.ffnn[p]);
        for (std::size_t p = 0; p < T; ++p) add_node(FlowNodeKind::residual_x, l, p, r.x_top[p]);

        for (std::size_t i = 0; i < T; ++i) {
            const auto att = flow_node_id(FlowNodeKind::attention, l, i);
            for (std::size_t j = 0; j < in.mu[i].size(); ++j) {
                add_edge(flow_node_id(FlowNodeKind::residual_x, l - 1, j), att, FlowEdgeKind::attention,
                         in.mu[i][j] * r.att[i]);
            }
        }
        for (std::size_t p = 0; p < T; ++p) {
            const auto below = flow_node_id(FlowNodeKind::residual_x, l - 1, p);
            const auto mid = flow_node_id(FlowNodeKind::residual_x_mid, l, p);
            const auto att = flow_node_id(FlowNodeKind::attention, l, p);
            const auto ffn = flow_node_id(FlowNodeKind::ffnn, l, p);
            const auto above = flow_node_id(FlowNodeKind::residual_x, l, p);
            add_edge(below, mid, FlowEdgeKind::residual, (1.0 - in.pct_att[p]) * r.x_mid[p]);
            add_edge(att, mid, FlowEdgeKind::attention, r.att[p]);
            add_edge(mid, ffn, FlowEdgeKind::ffnn, r.ffnn[p]);
            add_edge(ffn, above, FlowEdgeKind::ffnn, r.ffnn[p]);
            add_edge(mid, above, FlowEdgeKind::residual, (1.0 - in.pct_ff[p]) * r.x_top[p]);
        }
        g.boundaries.push_back({l, std::accumulate(r.x_top.begin(), r.x_top.end(), 0.0)});
    }
    return g;
}

Json to_json(const FlowGraph& g, const Tokenizer& tok) {
    Json j;
    j["trace_id"] = g.trace_id;
    j["layers"] = Json::array({g.layer_lo, g.layer_hi});
    if (g.options.seed == SeedMode::all_columns) {
        j["seed"] = "all";
    } else {
        j["seed"] = g.options.seed_column;
    }
    j["weighting"] = to_string(g.options.weighting);
    j["topk"] = g.options.topk_attention == 0 ? Json(nullptr) : Json(g.options.topk_attention);
    j["decoder"] = to_json(g.options.decoder);
    j["k"] = g.options.k;
    j["seeded"] = g.seeded;
    j["prompt_len"] = g.prompt_len;
    j["tokens"] = Json::array();
    for (auto id : g.tokens) j["tokens"].push_back({{"id", id}, {"text", tok.display(id)}});

    Json nodes = Json::array();
    for (const auto& n : g.nodes) {
        nodes.push_back({{"id", n.id},
                         {"kind", to_string(n.kind)},
                         {"layer", n.layer},
                         {"position", n.position},
                         {"flow", n.flow},
                         {"state_top_k", top_k_json(n.state_top_k, tok)},
                         {"delta_top_k", top_k_json(n.delta_top_k, tok)}});
    }
    j["nodes"] = std::move(nodes);
    Json edges = Json::array();
    for (const auto& e : g.edges) {
        edges.push_back({{"source", e.source}, {"target", e.target}, {"kind", to_string(e.kind)}, {"weight", e.weight}});
    }
    j["edges"] = std::move(edges);
    j["conservation"] = Json::array();
    for (const auto& b : g.boundaries) j["conservation"].push_back({{"layer", b.layer}, {"total", b.total}});
    return j;
}

}  // namespace rscope
