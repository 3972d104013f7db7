// Property checks on seeded toy models. Prints one PASS/FAIL line per
// criterion and exits non-zero when any fails.

#include <unistd.h>

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "httplib.h"

#include "rscope/analysis.hpp"
#include "rscope/api.hpp"
#include "rscope/cli.hpp"
#include "rscope/decoding.hpp"
#include "rscope/model_io.hpp"
#include "rscope/service.hpp"
#include "rscope/trace_io.hpp"

using namespace rscope;
namespace fs = std::filesystem;

namespace {

struct Verdict {
    bool ok = true;
    std::string detail;
};

int failures = 0;

void check(const std::string& name, const std::function<Verdict()>& body) {
    Verdict v;
    try {
        v = body();
    } catch (const std::exception& e) {
        v = {false, std::string("exception: ") + e.what()};
    }
    if (!v.ok) ++failures;
    std::cout << (v.ok ? "PASS " : "FAIL ") << name << " (" << v.detail << ")" << std::endl;
}

std::string fmt(double x) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.3g", x);
    return buf;
}

ModelConfig toy_config(bool tied) {
    ModelConfig c;
    c.n_layers = 8;
    c.d_model = 128;
    c.n_heads = 4;
    c.d_ff = 512;
    c.vocab_size = 512;
    c.max_seq_len = 128;
    c.tied_embeddings = tied;
    return c;
}

std::shared_ptr<const Model> toy_model(bool tied, std::uint64_t seed) {
    const auto c = toy_config(tied);
    return std::make_shared<const Model>(c, seeded_random_model(c, seed), Tokenizer::byte_level(c.vocab_size));
}

// 40 prompt tokens + 24 generated = 64 columns
const std::string kPrompt = "The quick brown fox jumps over the lazy ";

GenerationSettings full_length(std::size_t max_new = 24) {
    GenerationSettings s;
    s.max_new_tokens = max_new;
    s.stop_at_eos = false;
    return s;
}

TraceRecord run(const Model& model, const std::string& prompt, const GenerationSettings& s,
                std::span<const InjectionSpec> injections = {}) {
    const auto tokens = model.tokenizer().encode(prompt);
    return generate_with_trace(model, tokens, s, injections, "toy");
}

double max_abs_diff(std::span<const double> a, std::span<const double> b) {
    double m = a.size() == b.size() ? 0.0 : INFINITY;
    for (std::size_t i = 0; i < a.size() && i < b.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
    return m;
}

const std::vector<DecoderStrategy> kStrategies{DecoderStrategy::input_transpose, DecoderStrategy::output,
                                               DecoderStrategy::interpolated, DecoderStrategy::max_of_both,
                                               DecoderStrategy::iterative};
const std::vector<StateKind> kStates{StateKind::x, StateKind::intermediate, StateKind::delta_att,
                                     StateKind::delta_ff};

std::string cli_stdout(std::vector<std::string> args) {
    args.insert(args.begin(), "rscope");
    std::vector<const char*> argv;
    for (const auto& a : args) argv.push_back(a.c_str());
    std::ostringstream out, err;
    const int code = run_cli(static_cast<int>(argv.size()), argv.data(), out, err);
    if (code != kExitOk) throw Error("rscope " + args[1] + " exited " + std::to_string(code) + ": " + err.str());
    return out.str();
}

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    return {std::istreambuf_iterator<char>(in), {}};
}

// The API bodies for a fixed request sequence against a fresh service.
std::vector<std::string> api_session(const fs::path& model_dir) {
    ServiceConfig c;
    c.port = 0;
    c.model_dirs = {model_dir};
    Service svc(c);
    httplib::Client client("127.0.0.1", svc.start());
    std::vector<std::string> bodies;
    auto keep = [&](const httplib::Result& r) {
        if (!r || r->status != 200) throw Error("api request failed");
        bodies.push_back(r->body);
        return Json::parse(r->body);
    };
    const Json req{{"model_id", "toy"},
                   {"prompt", kPrompt},
                   {"settings", {{"max_new_tokens", 24}, {"stop_at_eos", false}, {"temperature", 0.7}, {"seed", 9}}}};
    const std::string id = keep(client.Post("/api/generate", req.dump(), "application/json"))["trace_id"];
    const std::string t = "/api/trace/" + id;
    keep(client.Get(t));
    keep(client.Get(t + "/heatmap?metric=entropy&decoder=max_of_both"));
    keep(client.Get(t + "/sankey?weighting=kl&topk=2"));
    keep(client.Post(t + "/inject", Json{{"layer", 4}, {"position", 10}, {"new_token", "#65"}}.dump(),
                     "application/json"));
    svc.stop();
    return bodies;
}

}  // namespace

int main() {
    const auto model = toy_model(false, 1234);
    const auto tied = toy_model(true, 99);
    const std::size_t L = model->config().n_layers;
    const auto trace = run(*model, kPrompt, full_length());
    std::cout << "toy model L=" << L << " d=" << model->config().d_model << " H=" << model->config().n_heads
              << " V=" << model->config().vocab_size << ", trace T=" << trace.length() << std::endl;

    check("distribution validity: 1000 (state, decoder) pairs sum to 1 within 1e-6, no negatives", [&] {
        std::mt19937_64 rng(2024);
        double worst = 0.0;
        double min_p = 1.0;
        for (int n = 0; n < 1000; ++n) {
            const auto kind = kStates[rng() % kStates.size()];
            const std::size_t layer = kind == StateKind::x ? rng() % (L + 1) : 1 + rng() % L;
            const std::size_t pos = rng() % trace.length();
            DecoderSpec spec;
            spec.strategy = kStrategies[rng() % kStrategies.size()];
            spec.apply_final_norm_scale = rng() % 2 == 1;
            const auto d = decode(*model, spec, trace.state(kind, layer, pos), layer).distribution;
            double sum = 0.0;
            for (double p : d.probs()) {
                sum += p;
                min_p = std::min(min_p, p);
            }
            worst = std::max(worst, std::abs(sum - 1.0));
        }
        return Verdict{worst <= 1e-6 && min_p >= 0.0, "max |sum-1| = " + fmt(worst) + ", min p = " + fmt(min_p)};
    });

    check("interpolated decoder endpoints match input-transpose at l=0 and output at l=L within 1e-7", [&] {
        DecoderSpec interp, input, output;
        interp.strategy = DecoderStrategy::interpolated;
        input.strategy = DecoderStrategy::input_transpose;
        output.strategy = DecoderStrategy::output;
        double worst = 0.0;
        std::size_t pairs = 0;
        for (std::size_t pos = 0; pos < trace.length(); ++pos) {
            const auto bottom = trace.state(StateKind::x, 0, pos);
            worst = std::max(worst, max_abs_diff(decode(*model, interp, bottom, 0).distribution.probs(),
                                                 decode(*model, input, bottom, 0).distribution.probs()));
            for (auto kind : kStates) {
                const auto top = trace.state(kind, L, pos);
                worst = std::max(worst, max_abs_diff(decode(*model, interp, top, L).distribution.probs(),
                                                     decode(*model, output, top, L).distribution.probs()));
            }
            pairs += 5;
        }
        return Verdict{worst <= 1e-7, std::to_string(pairs) + " states, max deviation " + fmt(worst)};
    });

    check("tied model: four decoding strategies agree within 1e-6 on every heatmap cell", [&] {
        const auto t = run(*tied, kPrompt, full_length());
        double worst = 0.0;
        std::size_t cells = 0;
        bool argmax_agree = true;
        for (auto kind : kStates) {
            std::vector<HeatmapGrid> grids;
            for (auto s : {DecoderStrategy::input_transpose, DecoderStrategy::output, DecoderStrategy::interpolated,
                           DecoderStrategy::max_of_both}) {
                DecoderSpec spec;
                spec.strategy = s;
                grids.push_back(build_heatmap(*tied, t, spec, kind, HeatmapMetric::probability));
            }
            for (std::size_t i = 0; i < grids[0].cells.size(); ++i) {
                const auto& ref = grids[0].cells[i];
                for (std::size_t g = 1; g < grids.size(); ++g) {
                    const auto& c = grids[g].cells[i];
                    worst = std::max(worst, max_abs_diff(ref.decoded.distribution.probs(),
                                                         c.decoded.distribution.probs()));
                    worst = std::max(worst, std::abs(ref.entropy - c.entropy));
                    argmax_agree = argmax_agree && ref.decoded.token() == c.decoded.token();
                }
                ++cells;
            }
        }
        return Verdict{worst <= 1e-6 && argmax_agree,
                       std::to_string(cells) + " cells, max deviation " + fmt(worst) +
                           (argmax_agree ? "" : ", argmax disagreement")};
    });

    check("residual accounting: x' = x_prev + d_att and x = x' + d_ff within 1e-5", [&] {
        // also on a trace carrying injections, whose changes fold into the deltas
        std::vector<InjectionSpec> inj(2);
        inj[0].layer = 3, inj[0].position = 5, inj[0].new_token = 'z';
        inj[1].layer = 6, inj[1].position = 20, inj[1].state_kind = StateKind::intermediate;
        inj[1].mode = InjectionMode::full_replace, inj[1].new_token = 'q';
        const auto injected = run(*model, kPrompt, full_length(), inj);
        double worst = 0.0;
        std::size_t elements = 0;
        for (const auto* t : {&trace, &injected}) {
            for (std::size_t l = 1; l <= L; ++l) {
                for (std::size_t p = 0; p < t->length(); ++p) {
                    const auto prev = t->state(StateKind::x, l - 1, p);
                    const auto mid = t->state(StateKind::intermediate, l, p);
                    const auto out = t->state(StateKind::x, l, p);
                    const auto da = t->state(StateKind::delta_att, l, p);
                    const auto df = t->state(StateKind::delta_ff, l, p);
                    for (std::size_t i = 0; i < prev.size(); ++i) {
                        worst = std::max(worst, std::abs(double(mid[i]) - (double(prev[i]) + da[i])));
                        worst = std::max(worst, std::abs(double(out[i]) - (double(mid[i]) + df[i])));
                        elements += 2;
                    }
                }
            }
        }
        return Verdict{worst <= 1e-5, std::to_string(elements) + " identities (plain + injected trace), max error " +
                                          fmt(worst)};
    });

    check("flow conservation within 1e-6 for topk all/1/2/5; oracle (1.15, 0.85) within 1e-9", [&] {
        double worst = 0.0;
        std::size_t boundaries = 0;
        for (std::size_t topk : {0, 1, 2, 5}) {
            for (auto seed : {SeedMode::all_columns, SeedMode::single_column}) {
                FlowOptions o;
                o.layer_lo = 1;
                o.layer_hi = L;
                o.topk_attention = topk;
                o.seed = seed;
                o.seed_column = trace.length() - 1;
                const auto g = build_flow_graph(*model, trace, o);
                for (const auto& b : g.boundaries) {
                    worst = std::max(worst, std::abs(b.total - g.seeded));
                    ++boundaries;
                }
            }
        }
        FlowLayerInputs in;
        in.pct_att = {0.4, 0.5};
        in.pct_ff = {0.2, 0.9};
        in.mu = {{1.0}, {0.3, 0.7}};
        const std::vector<double> seeds{1.0, 1.0};
        const auto r = propagate_layer(seeds, in);
        const double oracle = std::max(std::abs(r.x_bottom[0] - 1.15), std::abs(r.x_bottom[1] - 0.85));
        return Verdict{worst <= 1e-6 && oracle <= 1e-9,
                       std::to_string(boundaries) + " boundaries, max drift " + fmt(worst) + "; oracle error " +
                           fmt(oracle)};
    });

    check("injection identities: no-op swap, h = e_old -> e_new (1e-6), h orthogonal to e_old unchanged (1e-7)",
          [&] {
              // (a) swapping the current argmax for itself
              std::size_t noops = 0;
              bool identical = true;
              const std::string source_text = completion_text(*model, trace);
              for (std::size_t layer : {1, 4, 8}) {
                  for (std::size_t pos : {0, 17, 39}) {
                      for (auto kind : {StateKind::x, StateKind::intermediate}) {
                          for (bool scaled : {true, false}) {
                              InjectionSpec s;
                              s.layer = layer, s.position = pos, s.state_kind = kind, s.scaled = scaled;
                              s.new_token = decode_argmax(*model, s.decoder, trace.state(kind, layer, pos), layer).token;
                              const auto forked = run(*model, kPrompt, full_length(), std::span(&s, 1));
                              identical = identical && completion_text(*model, forked) == source_text &&
                                          forked.tokens == trace.tokens;
                              ++noops;
                          }
                      }
                  }
              }
              // (b) and (c) on unit embedding columns of the toy model
              std::mt19937_64 rng(7);
              const auto& w = *model->output_decoder();
              double err_b = 0.0, err_c = 0.0;
              for (int n = 0; n < 200; ++n) {
                  const auto e_old = unit_embedding(w, rng() % w.cols());
                  const auto e_new = unit_embedding(w, rng() % w.cols());
                  InjectionSpec spec;
                  std::vector<float> h(e_old.begin(), e_old.end());
                  auto out = apply_injection(h, spec, e_old, e_new);
                  for (std::size_t i = 0; i < out.size(); ++i) err_b = std::max(err_b, std::abs(out[i] - e_new[i]));

                  std::normal_distribution<double> gauss;
                  std::vector<double> v(e_old.size());
                  for (auto& x : v) x = gauss(rng);
                  const double along = dot(std::span<const double>(v), std::span<const double>(e_old));
                  for (std::size_t i = 0; i < v.size(); ++i) v[i] -= along * e_old[i];
                  std::vector<float> ortho(v.begin(), v.end());
                  out = apply_injection(ortho, spec, e_old, e_new);
                  for (std::size_t i = 0; i < out.size(); ++i)
                      err_c = std::max(err_c, std::abs(double(out[i]) - ortho[i]));
              }
              return Verdict{identical && err_b <= 1e-6 && err_c <= 1e-7,
                             std::to_string(noops) + " no-op forks " + (identical ? "identical" : "DIFFER") +
                                 "; unit case error " + fmt(err_b) + "; orthogonal drift " + fmt(err_c)};
          });

    check("causality: appending tokens leaves earlier columns unchanged within 1e-6", [&] {
        const std::string short_prompt = kPrompt.substr(0, 20);
        const auto a = run(*model, short_prompt, full_length(4));
        const auto b = run(*model, short_prompt + "and then some more text", full_length(4));
        const std::size_t cols = short_prompt.size();
        double worst = 0.0;
        for (std::size_t p = 0; p < cols; ++p) {
            for (std::size_t l = 0; l <= L; ++l) {
                for (auto kind : kStates) {
                    if (l == 0 && kind != StateKind::x) continue;
                    const auto sa = a.state(kind, l, p), sb = b.state(kind, l, p);
                    for (std::size_t i = 0; i < sa.size(); ++i)
                        worst = std::max(worst, std::abs(double(sa[i]) - sb[i]));
                }
                if (l == 0) continue;
                for (std::size_t h = 0; h < model->config().n_heads; ++h) {
                    const auto ra = a.attention_row(l, h, p), rb = b.attention_row(l, h, p);
                    for (std::size_t j = 0; j <= p; ++j) worst = std::max(worst, std::abs(double(ra[j]) - rb[j]));
                }
            }
            worst = std::max(worst, max_abs_diff(std::vector<double>(a.output_distribution(p).begin(),
                                                                     a.output_distribution(p).end()),
                                                 std::vector<double>(b.output_distribution(p).begin(),
                                                                     b.output_distribution(p).end())));
        }
        return Verdict{worst <= 1e-6, std::to_string(cols) + " shared columns, max deviation " + fmt(worst)};
    });

    const fs::path scratch = fs::temp_directory_path() / ("rscope-acceptance-" + std::to_string(::getpid()));
    fs::remove_all(scratch);
    fs::create_directories(scratch);

    check("determinism: identical runs give byte-identical traces, CLI outputs and API bodies", [&] {
        GenerationSettings sampled = full_length();
        sampled.temperature = 0.7;
        sampled.top_k = 20;
        sampled.seed = 9;
        const bool traces = serialize_trace(run(*model, kPrompt, sampled)) == serialize_trace(run(*model, kPrompt, sampled));

        std::vector<std::string> cli_runs[2];
        for (int r = 0; r < 2; ++r) {
            // same paths both times: the text outputs name them
            const auto dir = scratch / "cli";
            fs::remove_all(dir);
            const auto m = (dir / "toy").string(), t = (dir / "t.trace").string();
            auto& o = cli_runs[r];
            o.push_back(cli_stdout({"make-toy-model", "--out", m, "--seed", "5"}));
            for (const auto& entry : fs::directory_iterator(m)) o.push_back(slurp(entry.path()));
            o.push_back(cli_stdout({"generate", "--model", m, "--prompt", kPrompt, "--max-new", "24",
                                    "--no-eos-stop", "--temperature", "0.7", "--seed", "9", "--trace-out", t}));
            o.push_back(slurp(t));
            o.push_back(cli_stdout({"heatmap", "--trace", t, "--model", m, "--format", "svg"}));
            o.push_back(cli_stdout({"heatmap", "--trace", t, "--model", m, "--format", "csv", "--decoder", "iterative"}));
            o.push_back(cli_stdout({"sankey", "--trace", t, "--model", m}));
            o.push_back(cli_stdout({"sankey", "--trace", t, "--model", m, "--format", "svg"}));
            o.push_back(cli_stdout({"inject", "--trace", t, "--model", m, "--layer", "2", "--pos", "3", "--token",
                                    "#66", "--format", "json"}));
        }
        const bool cli = cli_runs[0] == cli_runs[1];

        const auto model_dir = scratch / "api" / "toy";
        save_model(model_dir, toy_config(false), seeded_random_model(toy_config(false), 1234));
        const auto first = api_session(model_dir), second = api_session(model_dir);
        const bool api = first == second;
        return Verdict{traces && cli && api, std::string("traces ") + (traces ? "equal" : "DIFFER") + ", " +
                                                 std::to_string(cli_runs[0].size()) + " CLI outputs " +
                                                 (cli ? "equal" : "DIFFER") + ", " + std::to_string(first.size()) +
                                                 " API bodies " + (api ? "equal" : "DIFFER")};
    });

    check("performance: trace + heatmap + 5-layer sankey at L=8, d=128, T=64 under 2 s", [&] {
        const auto start = std::chrono::steady_clock::now();
        const auto t = run(*model, kPrompt, full_length());
        const auto heat = heatmap_response(*model, t, HeatmapRequest{});
        const auto flow = sankey_response(*model, t, FlowOptions{});
        const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
        const bool shape = t.length() == 64 && flow["layers"] == Json::array({4, 8}) && heat["rows"] == 9;
        return Verdict{secs < 2.0 && shape, fmt(secs) + " s for T=" + std::to_string(t.length())};
    });

    check("runs with library + CLI + service only (no UI bundle)", [&] {
        ServiceConfig c;
        c.port = 0;
        Service svc(c);
        httplib::Client client("127.0.0.1", svc.start());
        const auto health = client.Get("/api/health");
        const auto root = client.Get("/");
        svc.stop();
        const bool ok = health && health->status == 200 && root && root->status == 404;
        return Verdict{ok, "service answers /api/health without a static directory; every check above ran headless"};
    });

    fs::remove_all(scratch);
    std::cout << (failures == 0 ? "all acceptance checks passed" : std::to_string(failures) + " check(s) failed")
              << std::endl;
    return failures == 0 ? 0 : 1;
}
