#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <map>
#include <set>

#include "rscope/analysis.hpp"
#include "rscope/errors.hpp"
#include "test_support.hpp"

using namespace rscope;
using namespace rscope::testing;

namespace {

TraceRecord run(const Model& m, const std::string& prompt, std::size_t max_new = 6) {
    GenerationSettings s;
    s.max_new_tokens = max_new;
    s.stop_at_eos = false;
    return generate_with_trace(m, m.tokenizer().encode(prompt), s);
}

// Bare trace with a hand-written attention tensor (L = 1, T = 2).
TraceRecord attention_only_trace(std::size_t heads, const std::vector<float>& attention) {
    TraceRecord t;
    t.n_layers = 1;
    t.d_model = 2;
    t.n_heads = heads;
    t.vocab_size = 2;
    t.tokens = {0, 1};
    t.prompt_len = 2;
    t.attention = attention;
    return t;
}

double sum(std::span<const double> v) {
    double s = 0.0;
    for (double x : v) s += x;
    return s;
}

std::vector<std::shared_ptr<const Model>> graph_models() {
    auto c = small_config();
    c.n_layers = 8;
    c.n_heads = 4;
    return {make_model(small_config()), make_model(c, 3)};
}

}  // namespace

TEST_CASE("norm_share examples") {
    const std::vector<float> three{3.0f, 0.0f};
    const std::vector<float> one{0.0f, 1.0f};
    CHECK(norm_share(three, one) == doctest::Approx(0.75).epsilon(1e-15));
    const std::vector<float> zero{0.0f, 0.0f};
    CHECK(norm_share(zero, one) == 0.0);
    CHECK(norm_share(zero, zero) == 0.0);
    const std::vector<float> a{0.6f, 0.8f};
    const std::vector<float> b{-0.8f, 0.6f};
    CHECK(norm_share(a, b) == 0.5);
    CHECK(norm_share(one, one) == 0.5);
}

TEST_CASE("contribution_percentages match the captured norms") {
    const auto m = make_model(small_config());
    const auto t = run(*m, "hello");
    for (std::size_t l = 1; l <= 3; ++l) {
        for (std::size_t p = 0; p < t.length(); ++p) {
            const auto c = contribution_percentages(t, l, p);
            REQUIRE(c.att >= 0.0);
            REQUIRE(c.att <= 1.0);
            REQUIRE(c.ff >= 0.0);
            REQUIRE(c.ff <= 1.0);
            const double na = l2_norm(t.state(StateKind::delta_att, l, p));
            const double nx = l2_norm(t.state(StateKind::x, l - 1, p));
            REQUIRE(std::abs(c.att - na / (na + nx)) < 1e-12);
            const double nf = l2_norm(t.state(StateKind::delta_ff, l, p));
            const double nm = l2_norm(t.state(StateKind::intermediate, l, p));
            REQUIRE(std::abs(c.ff - nf / (nf + nm)) < 1e-12);
        }
    }
    CHECK_THROWS_AS(contribution_percentages(t, 0, 0), InvalidInput);
    CHECK_THROWS_AS(contribution_percentages(t, 4, 0), InvalidInput);
    CHECK_THROWS_AS(contribution_percentages(t, 1, t.length()), InvalidInput);
}

TEST_CASE("mean_attention examples") {
    // one head: row 1 = (0.3, 0.7) comes back unchanged
    auto one = attention_only_trace(1, {1.0f, 0.0f, 0.3f, 0.7f});
    auto mu = mean_attention(one, 1, 1);
    REQUIRE(mu.size() == 2);
    CHECK(mu[0] == doctest::Approx(0.3));
    CHECK(mu[1] == doctest::Approx(0.7));
    CHECK(mean_attention(one, 1, 0) == std::vector<double>{1.0});

    // two heads with rows (1, 0) and (0, 1)
    auto two = attention_only_trace(2, {1.0f, 0.0f, 1.0f, 0.0f, 1.0f, 0.0f, 0.0f, 1.0f});
    mu = mean_attention(two, 1, 1);
    CHECK(mu == std::vector<double>{0.5, 0.5});
    CHECK_THROWS_AS(mean_attention(two, 2, 0), InvalidInput);
    CHECK_THROWS_AS(mean_attention(two, 1, 2), InvalidInput);

    const auto m = make_model(small_config());
    const auto t = run(*m, "attention rows");
    for (std::size_t l = 1; l <= 3; ++l) {
        for (std::size_t i = 0; i < t.length(); ++i) {
            const auto row = mean_attention(t, l, i);
            REQUIRE(row.size() == i + 1);
            REQUIRE(std::abs(sum(row) - 1.0) < 1e-12);
        }
    }
}

TEST_CASE("keep_top_k renormalizes the kept entries") {
    const std::vector<double> w{0.6, 0.4};
    CHECK(keep_top_k(w, 1) == std::vector<double>{1.0, 0.0});
    CHECK(keep_top_k(w, 2) == w);
    CHECK(keep_top_k(w, 0) == w);
    const std::vector<double> ties{0.25, 0.25, 0.5};
    const auto kept = keep_top_k(ties, 2);
    CHECK(kept[0] == doctest::Approx(1.0 / 3));
    CHECK(kept[1] == 0.0);
    CHECK(kept[2] == doctest::Approx(2.0 / 3));
}

TEST_CASE("kl_branch_weights examples") {
    const auto p_out = Distribution::from_probs({1.0, 0.0});
    const std::vector<Distribution> branches{Distribution::from_probs({1.0, 0.0}),
                                             Distribution::from_probs({0.5, 0.5})};
    // KL values (0, ln 2)
    auto w = kl_branch_weights(p_out, branches);
    CHECK(std::abs(w[0] - 2.0 / 3.0) < 1e-12);
    CHECK(std::abs(w[1] - 1.0 / 3.0) < 1e-12);

    const std::vector<Distribution> same{Distribution::from_probs({0.2, 0.8}), Distribution::from_probs({0.2, 0.8})};
    w = kl_branch_weights(Distribution::from_probs({0.6, 0.4}), same);
    CHECK(w == std::vector<double>{0.5, 0.5});

    const std::vector<Distribution> far{Distribution::from_probs({0.999, 0.001}),
                                        Distribution::from_probs({0.001, 0.999})};
    w = kl_branch_weights(Distribution::from_probs({0.999, 0.001}), far);
    CHECK(w[0] > 0.99);
    CHECK(w[1] < 0.01);
    CHECK_THROWS_AS(kl_branch_weights(p_out, std::vector<Distribution>{}), InvalidInput);
}

TEST_CASE("flow recursion hand-computed case") {
    FlowLayerInputs in;
    in.pct_att = {0.4, 0.5};
    in.pct_ff = {0.2, 0.9};
    in.mu = {{1.0}, {0.3, 0.7}};
    const std::vector<double> seeds{1.0, 1.0};
    const auto r = propagate_layer(seeds, in);
    CHECK(std::abs(r.x_bottom[0] - 1.15) < 1e-9);
    CHECK(std::abs(r.x_bottom[1] - 0.85) < 1e-9);
    CHECK(std::abs(sum(r.x_bottom) - 2.0) < 1e-12);
    CHECK(r.x_mid == seeds);
    CHECK(std::abs(r.ffnn[0] - 0.2) < 1e-15);
    CHECK(std::abs(r.att[1] - 0.5) < 1e-15);

    SUBCASE("diagonal attention keeps a single column") {
        FlowLayerInputs diag;
        diag.pct_att = {0.3, 0.8};
        diag.pct_ff = {0.5, 0.5};
        diag.mu = {{1.0}, {0.0, 1.0}};
        const std::vector<double> seed{0.0, 1.0};
        const auto d = propagate_layer(seed, diag);
        CHECK(d.x_bottom[0] == 0.0);
        CHECK(std::abs(d.x_bottom[1] - 1.0) < 1e-15);
    }
}

TEST_CASE("heatmap shapes and bounds") {
    const auto m = make_model(small_config());
    const auto t = run(*m, "grid", 3);
    const std::size_t T = t.length();
    const double log_v = std::log(300.0);
    for (auto kind : {StateKind::x, StateKind::intermediate, StateKind::delta_att, StateKind::delta_ff}) {
        for (auto metric : {HeatmapMetric::probability, HeatmapMetric::entropy, HeatmapMetric::att_contribution,
                            HeatmapMetric::ff_contribution}) {
            const auto g = build_heatmap(*m, t, DecoderSpec{}, kind, metric);
            REQUIRE(g.rows == (kind == StateKind::x ? 4u : 3u));
            REQUIRE(g.cols == T);
            REQUIRE(g.cells.size() == g.rows * g.cols);
            for (const auto& c : g.cells) {
                REQUIRE(std::isfinite(c.value));
                REQUIRE(c.entropy >= 0.0);
                REQUIRE(c.entropy <= log_v + 1e-9);
                REQUIRE(c.att_contribution >= 0.0);
                REQUIRE(c.att_contribution <= 1.0);
                REQUIRE(c.ff_contribution >= 0.0);
                REQUIRE(c.ff_contribution <= 1.0);
                REQUIRE(c.probability == c.decoded.probability());
            }
            if (metric == HeatmapMetric::entropy) {
                CHECK(g.at(1, 0).value == g.at(1, 0).entropy);
            }
        }
    }
    const auto g = build_heatmap(*m, t, DecoderSpec{}, StateKind::x, HeatmapMetric::probability);
    CHECK(g.at(0, 0).att_contribution == 0.0);
    CHECK(g.at(2, 1).att_contribution == contribution_percentages(t, 2, 1).att);
    CHECK(g.prompt_len == 4);
    CHECK_THROWS_AS(g.at(4, 0), InvalidInput);
}

TEST_CASE("heatmap delta_ff cells equal independent decoding of the raw tensor") {
    const auto m = make_model(small_config());
    const auto t = run(*m, "spot check", 4);
    const auto g = build_heatmap(*m, t, DecoderSpec{}, StateKind::delta_ff, HeatmapMetric::probability);
    const std::size_t T = t.length();
    const std::size_t d = t.d_model;
    for (std::size_t l : {1u, 2u, 3u}) {
        for (std::size_t p : {std::size_t{0}, T / 2, T - 1}) {
            // layer l lives at index l - 1 of the L x T x d tensor
            const float* raw = t.delta_ff.data() + ((l - 1) * T + p) * d;
            const auto expect = decode_state(std::span<const float>(raw, d), *m->interpolated_decoder(l));
            const auto& cell = g.at(l, p);
            for (std::size_t v = 0; v < expect.size(); ++v) {
                REQUIRE(cell.decoded.distribution[v] == expect[v]);
            }
        }
    }
}

TEST_CASE("top x cell of generated columns equals the generated token") {
    const auto m = make_model(small_config());
    const auto t = run(*m, "consistency", 8);
    DecoderSpec spec;
    spec.strategy = DecoderStrategy::output;
    spec.apply_final_norm_scale = true;
    const auto g = build_heatmap(*m, t, spec, StateKind::x, HeatmapMetric::probability);
    for (std::size_t p = t.prompt_len - 1; p + 1 < t.length(); ++p) {
        REQUIRE(g.at(3, p).decoded.token() == t.tokens[p + 1]);
    }
}

TEST_CASE("tied model heatmaps agree across strategies") {
    const auto m = make_model(small_config(true));
    const auto t = run(*m, "tied", 4);
    DecoderSpec spec;
    spec.strategy = DecoderStrategy::output;
    const auto ref = build_heatmap(*m, t, spec, StateKind::x, HeatmapMetric::probability);
    for (auto s : {DecoderStrategy::input_transpose, DecoderStrategy::interpolated, DecoderStrategy::max_of_both,
                   DecoderStrategy::iterative}) {
        spec.strategy = s;
        const auto g = build_heatmap(*m, t, spec, StateKind::x, HeatmapMetric::probability);
        for (std::size_t i = 0; i < g.cells.size(); ++i) {
            const auto& a = g.cells[i].decoded.distribution;
            const auto& b = ref.cells[i].decoded.distribution;
            for (std::size_t v = 0; v < a.size(); ++v) REQUIRE(std::abs(a[v] - b[v]) <= 1e-6);
        }
    }
}

TEST_CASE("heatmap rejects a trace from another model") {
    const auto m = make_model(small_config());
    const auto other = make_model(small_config(), 99);
    const auto t = run(*m, "x", 1);
    CHECK_THROWS_AS(build_heatmap(*other, t, DecoderSpec{}, StateKind::x, HeatmapMetric::probability), InvalidInput);
}

TEST_CASE("heatmap json") {
    const auto m = make_model(small_config());
    const auto t = run(*m, "json", 2);
    const auto g = build_heatmap(*m, t, DecoderSpec{}, StateKind::delta_att, HeatmapMetric::entropy);
    const auto j = to_json(g, m->tokenizer());
    CHECK(j["rows"] == 3);
    CHECK(j["cols"] == t.length());
    CHECK(j["state"] == "delta_att");
    CHECK(j["metric"] == "entropy");
    CHECK(j["layers"] == Json::array({1, 2, 3}));
    CHECK(j["cells"].size() == 3 * t.length());
    CHECK(j["cells"][0]["top_k"].size() == 5);
    CHECK(j["tokens"][0]["text"] == "j");
    CHECK(dump_compact(j) == dump_compact(to_json(build_heatmap(*m, t, DecoderSpec{}, StateKind::delta_att,
                                                                 HeatmapMetric::entropy),
                                                   m->tokenizer())));
}

TEST_CASE("enum parsing") {
    CHECK(parse_heatmap_metric("entropy") == HeatmapMetric::entropy);
    CHECK_FALSE(parse_heatmap_metric("flux").has_value());
    CHECK(parse_flow_weighting("kl") == FlowWeighting::kl);
    CHECK_FALSE(parse_flow_weighting("l2").has_value());
    CHECK(to_string(FlowNodeKind::residual_x_mid) == "residual_x'");
}

namespace {

void check_graph(const FlowGraph& g, double seeded, bool node_balance) {
    std::map<std::string, double> in, out;
    std::map<std::string, const FlowNode*> by_id;
    for (const auto& n : g.nodes) {
        REQUIRE(n.flow >= 0.0);
        by_id[n.id] = &n;
    }
    for (const auto& e : g.edges) {
        REQUIRE(e.weight >= 0.0);
        REQUIRE(by_id.count(e.source) == 1);
        REQUIRE(by_id.count(e.target) == 1);
        out[e.source] += e.weight;
        in[e.target] += e.weight;
    }
    CHECK(g.seeded == seeded);
    REQUIRE(g.boundaries.size() == g.layer_hi - g.layer_lo + 2);
    for (const auto& b : g.boundaries) REQUIRE(std::abs(b.total - seeded) < 1e-6);
    if (!node_balance) return;
    for (const auto& n : g.nodes) {
        const bool top = n.kind == FlowNodeKind::residual_x && n.layer == g.layer_hi;
        const bool bottom = n.kind == FlowNodeKind::residual_x && n.layer == g.layer_lo - 1;
        INFO(n.id);
        if (!bottom) REQUIRE(std::abs(in[n.id] - n.flow) < 1e-6);
        if (!top) REQUIRE(std::abs(out[n.id] - n.flow) < 1e-6);
    }
}

}  // namespace

TEST_CASE("flow graph conserves flow") {
    for (const auto& m : graph_models()) {
        const auto t = run(*m, "flow of info", 5);
        const std::size_t L = m->config().n_layers;
        for (std::size_t k : {0u, 1u, 2u, 5u}) {
            FlowOptions o;
            o.topk_attention = k;
            const auto g = build_flow_graph(*m, t, o);
            CHECK(g.layer_hi == L);
            CHECK(g.layer_lo == (L > 5 ? L - 4 : 1));
            check_graph(g, static_cast<double>(t.length()), true);
            o.layer_lo = 1;
            check_graph(build_flow_graph(*m, t, o), static_cast<double>(t.length()), true);
        }
    }
}

TEST_CASE("flow graph with kl weighting stays conserved") {
    const auto m = make_model(small_config());
    const auto t = run(*m, "kl mode", 3);
    FlowOptions o;
    o.weighting = FlowWeighting::kl;
    const auto kl = build_flow_graph(*m, t, o);
    check_graph(kl, static_cast<double>(t.length()), true);
    o.weighting = FlowWeighting::norm;
    const auto norm = build_flow_graph(*m, t, o);
    // the two modes apportion differently
    bool differs = false;
    for (std::size_t i = 0; i < kl.nodes.size() && i < norm.nodes.size(); ++i) {
        differs |= std::abs(kl.nodes[i].flow - norm.nodes[i].flow) > 1e-9;
    }
    CHECK(differs);
    CHECK(to_json(kl, m->tokenizer())["weighting"] == "kl");
}

TEST_CASE("topk = 1 leaves one attention edge into each attention node") {
    const auto m = make_model(small_config());
    const auto t = run(*m, "single ribbon", 3);
    FlowOptions o;
    o.topk_attention = 1;
    const auto g = build_flow_graph(*m, t, o);
    std::map<std::string, int> inbound;
    for (const auto& e : g.edges) {
        if (e.kind == FlowEdgeKind::attention && e.target.rfind("att:", 0) == 0) ++inbound[e.target];
    }
    std::size_t att_nodes = 0;
    for (const auto& n : g.nodes) {
        if (n.kind != FlowNodeKind::attention) continue;
        ++att_nodes;
        REQUIRE(inbound[n.id] == 1);
    }
    CHECK(att_nodes == 3 * t.length());
}

TEST_CASE("single column seeding") {
    const auto m = make_model(small_config());
    const auto t = run(*m, "column", 2);
    FlowOptions o;
    o.seed = SeedMode::single_column;
    o.seed_column = 3;
    const auto g = build_flow_graph(*m, t, o);
    check_graph(g, 1.0, true);
    // causal attention never moves flow to later columns
    for (const auto& n : g.nodes) REQUIRE(n.position <= 3);
    const auto top = std::find_if(g.nodes.begin(), g.nodes.end(),
                                  [&](const FlowNode& n) { return n.id == flow_node_id(FlowNodeKind::residual_x, 3, 3); });
    REQUIRE(top != g.nodes.end());
    CHECK(top->flow == 1.0);

    o.seed_column = t.length();
    CHECK_THROWS_AS(build_flow_graph(*m, t, o), InvalidInput);
}

TEST_CASE("flow graph range validation and decorations") {
    const auto m = make_model(small_config());
    const auto t = run(*m, "range", 2);
    FlowOptions o;
    o.layer_lo = 0;
    CHECK_THROWS_AS(build_flow_graph(*m, t, o), InvalidInput);
    o.layer_lo = 3;
    o.layer_hi = 2;
    CHECK_THROWS_AS(build_flow_graph(*m, t, o), InvalidInput);
    o.layer_lo = 2;
    o.layer_hi = 4;
    CHECK_THROWS_AS(build_flow_graph(*m, t, o), InvalidInput);
    o.layer_lo = 2;
    o.layer_hi = 2;
    const auto g = build_flow_graph(*m, t, o);
    CHECK(g.layer_lo == 2);
    std::set<std::size_t> layers;
    for (const auto& n : g.nodes) {
        layers.insert(n.layer);
        REQUIRE(n.state_top_k.size() == 5);
        REQUIRE(n.delta_top_k.size() == 5);
    }
    CHECK(layers == std::set<std::size_t>{1, 2});

    // the embedding row has no delta decoration
    o.layer_lo = 1;
    o.layer_hi = 1;
    for (const auto& n : build_flow_graph(*m, t, o).nodes) {
        if (n.layer == 0) REQUIRE(n.delta_top_k.empty());
    }
}

TEST_CASE("flow graph json") {
    const auto m = make_model(small_config());
    const auto t = run(*m, "sankey", 2);
    const auto g = build_flow_graph(*m, t, FlowOptions{});
    const auto j = to_json(g, m->tokenizer());
    CHECK(j["layers"] == Json::array({1, 3}));
    CHECK(j["seed"] == "all");
    CHECK(j["topk"].is_null());
    CHECK(j["weighting"] == "norm");
    CHECK(j["nodes"].size() == g.nodes.size());
    CHECK(j["edges"].size() == g.edges.size());
    CHECK(j["conservation"].size() == 4);
    CHECK(j["nodes"][0].contains("state_top_k"));
}
