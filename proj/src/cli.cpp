#include "rscope/cli.hpp"

#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"

#include "rscope/api.hpp"
#include "rscope/errors.hpp"
#include "rscope/model_io.hpp"
#include "rscope/render.hpp"
#include "rscope/service.hpp"
#include "rscope/trace_io.hpp"

namespace rscope {

namespace {

// Bad flag combinations found after parsing.
class UsageError : public Error {
public:
    using Error::Error;
};

struct Output {
    std::optional<std::string> path;
    std::ostream* out;

    void write(const std::string& payload) const {
        if (!path) {
            *out << payload;
            return;
        }
        std::ofstream f(*path, std::ios::binary);
        if (!f) throw Error("cannot write " + *path);
        f << payload;
        if (!f) throw Error("failed writing " + *path);
    }
};

Json read_json_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error("cannot read " + path);
    try {
        return Json::parse(in);
    } catch (const nlohmann::json::exception& e) {
        throw Error(path + " is not valid JSON: " + e.what());
    }
}

bool wants_json(int argc, const char* const* argv) {
    for (int i = 1; i < argc; ++i) {
        const std::string a = argv[i];
        if (a == "--format=json") return true;
        if (a == "--format" && i + 1 < argc && std::string(argv[i + 1]) == "json") return true;
    }
    return false;
}

void report(std::ostream& err, bool json, int code, const std::string& message) {
    if (json) {
        err << dump_compact(Json{{"error", message}, {"exit_code", code}}) << "\n";
    } else {
        err << "rscope: " << message << "\n";
    }
}

// Shared decoder flags, kept as raw strings so they go through the same
// validation as the HTTP query parameters.
struct DecoderFlags {
    std::optional<std::string> decoder, max_iters, ratio;
    bool scale = false;

    void add(CLI::App* app) {
        app->add_option("--decoder", decoder, "input_transpose|output|interpolated|max_of_both|iterative");
        app->add_flag("--scale", scale, "multiply states by the final norm scale before decoding");
        app->add_option("--max-iters", max_iters, "iterative decoding: components to strip");
        app->add_option("--ratio", ratio, "iterative decoding: stop below this fraction of the input norm");
    }
    void fill(Params& p) const {
        if (decoder) p["decoder"] = *decoder;
        if (scale) p["scale"] = "true";
        if (max_iters) p["max_iters"] = *max_iters;
        if (ratio) p["ratio"] = *ratio;
    }
};

std::pair<std::shared_ptr<const Model>, TraceRecord> load_pair(const std::string& model_dir,
                                                               const std::string& trace_file) {
    auto model = load_model_shared(model_dir);
    auto trace = load_trace(trace_file);
    if (trace.model_fingerprint != model->fingerprint()) {
        throw Error("trace " + trace_file + " was not produced by the model in " + model_dir);
    }
    return {std::move(model), std::move(trace)};
}

std::string render(const Json& doc, const std::string& format, bool heatmap) {
    if (format == "json") return body_text(doc);
    if (format == "svg") return heatmap ? heatmap_svg(doc) : sankey_svg(doc);
    return heatmap ? heatmap_csv(doc) : sankey_csv(doc);
}

}  // namespace

int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
    const bool json_errors = wants_json(argc, argv);
    CLI::App app{"Inspect the hidden states of small decoder-only transformers.", "rscope"};
    app.require_subcommand(1);
    app.set_help_all_flag("--help-all", "Expand all help");

    // generate
    auto* gen = app.add_subcommand("generate", "Run a prompt and capture every hidden state");
    std::string gen_model, gen_prompt, gen_model_id, gen_format = "text";
    std::optional<std::string> gen_trace_out, gen_out;
    GenerationSettings settings;
    bool no_eos_stop = false;
    gen->add_option("--model", gen_model, "model directory")->required()->check(CLI::ExistingDirectory);
    gen->add_option("--prompt", gen_prompt, "prompt text")->required();
    gen->add_option("--max-new", settings.max_new_tokens, "tokens to generate")->capture_default_str();
    gen->add_option("--temperature", settings.temperature, "0 selects greedy decoding")
        ->check(CLI::NonNegativeNumber)
        ->capture_default_str();
    gen->add_option("--top-k", settings.top_k, "sample from the k most likely tokens (0 = all)");
    gen->add_option("--seed", settings.seed, "sampling seed")->capture_default_str();
    gen->add_flag("--no-eos-stop", no_eos_stop, "keep generating after the end-of-sequence token");
    gen->add_option("--model-id", gen_model_id, "id recorded in the trace (default: directory name)");
    gen->add_option("--trace-out", gen_trace_out, "write the trace file here");
    gen->add_option("--format", gen_format, "text|json")->check(CLI::IsMember({"text", "json"}));
    gen->add_option("--out", gen_out, "write the payload to a file instead of stdout");

    // heatmap
    auto* heat = app.add_subcommand("heatmap", "Decode every captured state into a grid");
    std::optional<std::string> heat_trace, heat_model, heat_from, heat_out, heat_state, heat_metric, heat_k;
    std::string heat_format = "json";
    DecoderFlags heat_dec;
    heat->add_option("--trace", heat_trace, "trace file");
    heat->add_option("--model", heat_model, "model directory that produced the trace")->check(CLI::ExistingDirectory);
    heat->add_option("--from-json", heat_from, "render a saved heatmap document instead");
    heat->add_option("--state", heat_state, "x|intermediate|delta_att|delta_ff");
    heat->add_option("--metric", heat_metric, "probability|entropy|att_contribution|ff_contribution");
    heat->add_option("--k", heat_k, "tokens listed per cell");
    heat_dec.add(heat);
    heat->add_option("--format", heat_format, "json|svg|csv")->check(CLI::IsMember({"json", "svg", "csv"}));
    heat->add_option("--out", heat_out, "write the payload to a file instead of stdout");

    // sankey
    auto* flow = app.add_subcommand("sankey", "Attribute flow through residual, attention and feed-forward paths");
    std::optional<std::string> flow_trace, flow_model, flow_from, flow_out, flow_layers, flow_seed, flow_weighting,
        flow_topk, flow_k;
    std::string flow_format = "json";
    DecoderFlags flow_dec;
    flow->add_option("--trace", flow_trace, "trace file");
    flow->add_option("--model", flow_model, "model directory that produced the trace")->check(CLI::ExistingDirectory);
    flow->add_option("--from-json", flow_from, "render a saved flow document instead");
    flow->add_option("--layers", flow_layers, "lo-hi, a single layer, or all (default: top 5)");
    flow->add_option("--flow-seed", flow_seed, "all, or the column to seed");
    flow->add_option("--weighting", flow_weighting, "norm|kl");
    flow->add_option("--topk", flow_topk, "attention entries kept per node, or all");
    flow->add_option("--k", flow_k, "tokens listed per decoration");
    flow_dec.add(flow);
    flow->add_option("--format", flow_format, "json|svg|csv")->check(CLI::IsMember({"json", "svg", "csv"}));
    flow->add_option("--out", flow_out, "write the payload to a file instead of stdout");

    // inject
    auto* inj = app.add_subcommand("inject", "Swap a token embedding into a hidden state and regenerate");
    std::string inj_trace, inj_model, inj_token, inj_state = "x", inj_mode = "component_swap", inj_format = "text";
    std::size_t inj_layer = 1, inj_pos = 0;
    bool inj_unscaled = false;
    std::optional<std::string> inj_trace_out, inj_out;
    DecoderFlags inj_dec;
    inj->add_option("--trace", inj_trace, "source trace file")->required();
    inj->add_option("--model", inj_model, "model directory")->required()->check(CLI::ExistingDirectory);
    inj->add_option("--layer", inj_layer, "1-based layer")->required()->check(CLI::Range(std::size_t{1}, std::size_t{1} << 20));
    inj->add_option("--pos", inj_pos, "0-based position")->required();
    inj->add_option("--token", inj_token, "token text, or #id")->required();
    inj->add_option("--state", inj_state, "x|intermediate|delta_att|delta_ff")
        ->check(CLI::IsMember({"x", "intermediate", "delta_att", "delta_ff"}));
    inj->add_option("--mode", inj_mode, "component_swap|full_replace")
        ->check(CLI::IsMember({"component_swap", "full_replace"}));
    inj->add_flag("--unscaled", inj_unscaled, "add e_new - e_old without scaling by the projection");
    inj_dec.add(inj);
    inj->add_option("--trace-out", inj_trace_out, "write the new trace file here");
    inj->add_option("--format", inj_format, "text|json")->check(CLI::IsMember({"text", "json"}));
    inj->add_option("--out", inj_out, "write the payload to a file instead of stdout");

    // serve
    auto* serve = app.add_subcommand("serve", "Run the HTTP service");
    std::optional<std::string> sv_config, sv_host, sv_spill, sv_static;
    std::optional<int> sv_port;
    std::optional<std::size_t> sv_max_conc, sv_retention, sv_cache, sv_max_new;
    std::vector<std::string> sv_models;
    serve->add_option("--config", sv_config, "JSON config file")->check(CLI::ExistingFile);
    serve->add_option("--host", sv_host, "listen address");
    serve->add_option("--port", sv_port, "listen port");
    serve->add_option("--model", sv_models, "model directory (repeatable)")->check(CLI::ExistingDirectory);
    serve->add_option("--max-concurrent", sv_max_conc, "generations in flight");
    serve->add_option("--retention", sv_retention, "traces kept in memory");
    serve->add_option("--analysis-cache", sv_cache, "cached analysis bodies");
    serve->add_option("--spill-dir", sv_spill, "directory for evicted traces");
    serve->add_option("--static-dir", sv_static, "UI bundle to serve at /");
    serve->add_option("--max-new", sv_max_new, "default max_new_tokens");

    // make-toy-model
    auto* toy = app.add_subcommand("make-toy-model", "Write a seeded random model directory");
    std::string toy_out, toy_format = "text";
    ModelConfig toy_cfg;
    toy_cfg.n_layers = 8;
    toy_cfg.d_model = 128;
    toy_cfg.n_heads = 4;
    toy_cfg.d_ff = 0;
    toy_cfg.vocab_size = 512;
    toy_cfg.max_seq_len = 128;
    std::uint64_t toy_seed = 0;
    toy->add_option("--out", toy_out, "output directory")->required();
    toy->add_option("--layers", toy_cfg.n_layers, "transformer blocks")->capture_default_str();
    toy->add_option("--dim", toy_cfg.d_model, "model width")->capture_default_str();
    toy->add_option("--heads", toy_cfg.n_heads, "attention heads")->capture_default_str();
    toy->add_option("--ff", toy_cfg.d_ff, "feed-forward width (default 4 x dim)");
    toy->add_option("--vocab", toy_cfg.vocab_size, "vocabulary size")->capture_default_str();
    toy->add_option("--max-seq", toy_cfg.max_seq_len, "context length")->capture_default_str();
    toy->add_option("--seed", toy_seed, "weight seed")->capture_default_str();
    toy->add_flag("--tied", toy_cfg.tied_embeddings, "share the input embedding with the output head");
    toy->add_option("--format", toy_format, "text|json")->check(CLI::IsMember({"text", "json"}));

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e, out, err);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e, out, err);
    } catch (const CLI::ParseError& e) {
        report(err, json_errors, kExitUsage, e.what());
        if (!json_errors) err << "Run with --help for usage.\n";
        return kExitUsage;
    }

    try {
        if (gen->parsed()) {
            settings.stop_at_eos = !no_eos_stop;
            const auto model = load_model_shared(gen_model);
            const auto prompt = model->tokenizer().encode(gen_prompt);
            const std::string id = gen_model_id.empty() ? default_model_id(gen_model) : gen_model_id;
            const auto trace = generate_with_trace(*model, prompt, settings, {}, id);
            if (gen_trace_out) save_trace(*gen_trace_out, trace);
            const Output o{gen_out, &out};
            if (gen_format == "json") {
                o.write(body_text(generate_response(*model, trace)));
            } else {
                o.write(completion_text(*model, trace) + "\n");
            }
            return kExitOk;
        }

        if (heat->parsed() || flow->parsed()) {
            const bool is_heat = heat->parsed();
            const auto& from = is_heat ? heat_from : flow_from;
            const auto& trace_file = is_heat ? heat_trace : flow_trace;
            const auto& model_dir = is_heat ? heat_model : flow_model;
            const Output o{is_heat ? heat_out : flow_out, &out};
            const std::string& format = is_heat ? heat_format : flow_format;
            Json doc;
            if (from) {
                if (trace_file || model_dir) throw UsageError("--from-json cannot be combined with --trace/--model");
                doc = read_json_file(*from);
            } else {
                if (!trace_file || !model_dir) throw UsageError("--trace and --model are required (or --from-json)");
                Params p;
                if (is_heat) {
                    heat_dec.fill(p);
                    if (heat_state) p["state"] = *heat_state;
                    if (heat_metric) p["metric"] = *heat_metric;
                    if (heat_k) p["k"] = *heat_k;
                    const auto request = parse_heatmap_params(p);
                    const auto [model, trace] = load_pair(*model_dir, *trace_file);
                    doc = heatmap_response(*model, trace, request);
                } else {
                    flow_dec.fill(p);
                    if (flow_layers) p["layers"] = *flow_layers;
                    if (flow_seed) p["seed"] = *flow_seed;
                    if (flow_weighting) p["weighting"] = *flow_weighting;
                    if (flow_topk) p["topk"] = *flow_topk;
                    if (flow_k) p["k"] = *flow_k;
                    const auto options = parse_sankey_params(p);
                    const auto [model, trace] = load_pair(*model_dir, *trace_file);
                    doc = sankey_response(*model, trace, options);
                }
            }
            o.write(render(doc, format, is_heat));
            return kExitOk;
        }

        if (inj->parsed()) {
            const auto [model, source] = load_pair(inj_model, inj_trace);
            Params p;
            inj_dec.fill(p);
            const auto decoder = parse_heatmap_params(p).decoder;
            const Json body{{"layer", inj_layer},       {"position", inj_pos},   {"new_token", inj_token},
                            {"state_kind", inj_state},  {"mode", inj_mode},      {"scaled", !inj_unscaled},
                            {"decoder", to_json(decoder)}};
            const auto spec = parse_inject_body(body, model->tokenizer());
            const auto forked = fork_with_injection(*model, source, spec);
            if (inj_trace_out) save_trace(*inj_trace_out, forked);
            const Json response = inject_response(*model, source, forked);
            const Output o{inj_out, &out};
            if (inj_format == "json") {
                o.write(body_text(response));
                return kExitOk;
            }
            std::ostringstream text;
            text << "source:   " << response["source_completion"].get<std::string>() << "\n";
            text << "injected: " << response["completion"].get<std::string>() << "\n";
            std::vector<std::size_t> changed;
            std::string marks;
            for (const auto& d : response["diff"]) {
                const bool c = d["changed"].get<bool>();
                marks += c ? '^' : '.';
                if (c) changed.push_back(d["position"].get<std::size_t>());
            }
            text << "diff:     " << marks << "\n";
            if (changed.empty()) {
                text << "completions identical\n";
            } else {
                text << "completions differ at " << changed.size() << " position" << (changed.size() == 1 ? "" : "s")
                     << ", first at " << changed.front() << "\n";
            }
            text << "trace:    " << forked.id << "\n";
            o.write(text.str());
            return kExitOk;
        }

        if (serve->parsed()) {
            Json cli = Json::object();
            if (sv_config) cli["config"] = *sv_config;
            if (sv_host) cli["host"] = *sv_host;
            if (sv_port) cli["port"] = *sv_port;
            if (!sv_models.empty()) cli["models"] = sv_models;
            if (sv_max_conc) cli["max_concurrent"] = *sv_max_conc;
            if (sv_retention) cli["retention"] = *sv_retention;
            if (sv_cache) cli["analysis_cache"] = *sv_cache;
            if (sv_spill) cli["spill_dir"] = *sv_spill;
            if (sv_static) cli["static_dir"] = *sv_static;
            if (sv_max_new) cli["defaults"] = {{"max_new_tokens", *sv_max_new}};
            ServiceConfig cfg;
            try {
                cfg = resolve_service_config(cli);
            } catch (const ConfigError& e) {
                throw UsageError(e.what());
            }
            Service service(cfg);
            err << "rscope: serving " << service.models().list().size() << " model(s) on " << cfg.host << ":"
                << cfg.port << "\n";
            service.run();
            return kExitOk;
        }

        if (toy->parsed()) {
            if (toy_cfg.d_ff == 0) toy_cfg.d_ff = 4 * toy_cfg.d_model;
            try {
                toy_cfg.validate();
            } catch (const ConfigError& e) {
                throw UsageError(e.what());
            }
            save_model(toy_out, toy_cfg, seeded_random_model(toy_cfg, toy_seed));
            if (toy_format == "json") {
                out << body_text(model_summary(default_model_id(toy_out), toy_cfg));
            } else {
                out << "wrote " << toy_out << ": " << toy_cfg.n_layers << " layers, d_model " << toy_cfg.d_model << ", "
                    << toy_cfg.n_heads << " heads, vocab " << toy_cfg.vocab_size
                    << (toy_cfg.tied_embeddings ? ", tied" : "") << "\n";
            }
            return kExitOk;
        }
    } catch (const UsageError& e) {
        report(err, json_errors, kExitUsage, e.what());
        return kExitUsage;
    } catch (const ApiError& e) {
        const int code = e.status() == 400 ? kExitUsage : kExitFailure;
        report(err, json_errors, code, e.what());
        return code;
    } catch (const std::exception& e) {
        report(err, json_errors, kExitFailure, e.what());
        return kExitFailure;
    }
    return kExitUsage;
}

}  // namespace rscope
