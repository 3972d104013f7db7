#include "rscope/service.hpp"

#include <cstdlib>
#include <fstream>

#include "httplib.h"

#include "rscope/errors.hpp"
#include "rscope/model_io.hpp"
#include "rscope/trace_io.hpp"

namespace rscope {

// ---- configuration ----------------------------------------------------------

void ServiceConfig::validate() const {
    if (port < 0 || port > 65535) throw ConfigError("port must lie in [0, 65535]");
    if (max_concurrent == 0) throw ConfigError("max_concurrent must be positive");
    if (trace_retention == 0) throw ConfigError("trace retention must be positive");
    if (analysis_cache == 0) throw ConfigError("analysis cache size must be positive");
}

std::optional<std::string> process_env(const std::string& name) {
    if (const char* v = std::getenv(name.c_str())) return std::string(v);
    return std::nullopt;
}

namespace {

std::vector<std::string> split(const std::string& s, char sep) {
    std::vector<std::string> out;
    std::size_t start = 0;
    while (start <= s.size()) {
        const auto end = s.find(sep, start);
        const auto piece = s.substr(start, end == std::string::npos ? std::string::npos : end - start);
        if (!piece.empty()) out.push_back(piece);
        if (end == std::string::npos) break;
        start = end + 1;
    }
    return out;
}

Json env_number(const std::string& name, const std::string& value, bool integral) {
    try {
        std::size_t used = 0;
        Json out;
        if (integral) {
            const unsigned long long v = std::stoull(value, &used);
            out = v;
        } else {
            out = std::stod(value, &used);
        }
        if (used != value.size()) throw std::invalid_argument(value);
        return out;
    } catch (const std::exception&) {
        throw ConfigError(name + " must be a number, got '" + value + "'");
    }
}

Json env_layer(const EnvLookup& env) {
    Json j = Json::object();
    if (auto v = env("RSCOPE_HOST")) j["host"] = *v;
    if (auto v = env("RSCOPE_PORT")) j["port"] = env_number("RSCOPE_PORT", *v, true);
    if (auto v = env("RSCOPE_MODELS")) j["models"] = split(*v, ':');
    if (auto v = env("RSCOPE_MAX_CONCURRENT")) j["max_concurrent"] = env_number("RSCOPE_MAX_CONCURRENT", *v, true);
    if (auto v = env("RSCOPE_RETENTION")) j["retention"] = env_number("RSCOPE_RETENTION", *v, true);
    if (auto v = env("RSCOPE_ANALYSIS_CACHE")) j["analysis_cache"] = env_number("RSCOPE_ANALYSIS_CACHE", *v, true);
    if (auto v = env("RSCOPE_SPILL_DIR")) j["spill_dir"] = *v;
    if (auto v = env("RSCOPE_STATIC_DIR")) j["static_dir"] = *v;
    Json defaults = Json::object();
    if (auto v = env("RSCOPE_MAX_NEW_TOKENS")) defaults["max_new_tokens"] = env_number("RSCOPE_MAX_NEW_TOKENS", *v, true);
    if (auto v = env("RSCOPE_TEMPERATURE")) defaults["temperature"] = env_number("RSCOPE_TEMPERATURE", *v, false);
    if (auto v = env("RSCOPE_TOP_K")) defaults["top_k"] = env_number("RSCOPE_TOP_K", *v, true);
    if (auto v = env("RSCOPE_SEED")) defaults["seed"] = env_number("RSCOPE_SEED", *v, true);
    if (!defaults.empty()) j["defaults"] = defaults;
    return j;
}

void apply_layer(ServiceConfig& c, const Json& j, const std::string& origin) {
    if (!j.is_object()) throw ConfigError(origin + ": configuration must be a JSON object");
    try {
        for (const auto& [key, v] : j.items()) {
            if (v.is_null()) continue;
            if (key == "config") {
                continue;
            } else if (key == "host") {
                c.host = v.get<std::string>();
            } else if (key == "port") {
                c.port = v.get<int>();
            } else if (key == "models") {
                c.model_dirs.clear();
                for (const auto& m : v) c.model_dirs.emplace_back(m.get<std::string>());
            } else if (key == "max_concurrent") {
                c.max_concurrent = v.get<std::size_t>();
            } else if (key == "retention") {
                c.trace_retention = v.get<std::size_t>();
            } else if (key == "analysis_cache") {
                c.analysis_cache = v.get<std::size_t>();
            } else if (key == "spill_dir") {
                c.spill_dir = v.get<std::string>();
            } else if (key == "static_dir") {
                c.static_dir = v.get<std::string>();
            } else if (key == "defaults") {
                c.defaults = settings_from_json(v, c.defaults);
            } else {
                throw ConfigError(origin + ": unknown key '" + key + "'");
            }
        }
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(origin + ": " + e.what());
    } catch (const InvalidInput& e) {
        throw ConfigError(origin + ": " + e.what());
    }
}

}  // namespace

ServiceConfig resolve_service_config(const Json& cli, const EnvLookup& env) {
    ServiceConfig c;
    std::optional<std::string> file;
    if (cli.contains("config") && cli["config"].is_string()) {
        file = cli["config"].get<std::string>();
    } else {
        file = env("RSCOPE_CONFIG");
    }
    if (file) {
        std::ifstream in(*file);
        if (!in) throw ConfigError("cannot read config file " + *file);
        Json j;
        try {
            j = Json::parse(in);
        } catch (const nlohmann::json::exception& e) {
            throw ConfigError("config file " + *file + ": " + e.what());
        }
        apply_layer(c, j, *file);
    }
    apply_layer(c, env_layer(env), "environment");
    apply_layer(c, cli, "command line");
    c.validate();
    return c;
}

// ---- models -----------------------------------------------------------------

std::string ModelRegistry::load(const std::filesystem::path& dir, std::string model_id) {
    if (model_id.empty()) model_id = default_model_id(dir);
    add(model_id, load_model_shared(dir));
    return model_id;
}

void ModelRegistry::add(const std::string& model_id, std::shared_ptr<const Model> model) {
    std::unique_lock lock(mutex_);
    if (!models_.emplace(model_id, std::move(model)).second) {
        throw ApiError(409, "model id '" + model_id + "' is already loaded");
    }
}

std::shared_ptr<const Model> ModelRegistry::find(const std::string& model_id) const {
    std::shared_lock lock(mutex_);
    auto it = models_.find(model_id);
    return it == models_.end() ? nullptr : it->second;
}

std::vector<std::pair<std::string, std::shared_ptr<const Model>>> ModelRegistry::list() const {
    std::shared_lock lock(mutex_);
    return {models_.begin(), models_.end()};
}

// ---- traces -----------------------------------------------------------------

TraceStore::TraceStore(std::size_t retention, std::optional<std::filesystem::path> spill_dir)
    : retention_(retention), spill_dir_(std::move(spill_dir)) {
    if (spill_dir_) std::filesystem::create_directories(*spill_dir_);
}

void TraceStore::put(std::shared_ptr<const TraceRecord> trace) {
    std::lock_guard lock(mutex_);
    const std::string id = trace->id;
    if (!recipes_.count(id)) {
        Recipe r{trace->model_id,
                 {trace->tokens.begin(), trace->tokens.begin() + static_cast<std::ptrdiff_t>(trace->prompt_len)},
                 trace->settings,
                 {}};
        for (const auto& inj : trace->injections) r.injections.push_back(inj.spec);
        recipes_.emplace(id, std::move(r));
    }
    if (auto it = resident_.find(id); it != resident_.end()) {
        lru_.erase(it->second.second);
        resident_.erase(it);
    }
    lru_.push_front(id);
    resident_.emplace(id, std::make_pair(std::move(trace), lru_.begin()));
    evict_locked();
}

void TraceStore::evict_locked() {
    while (resident_.size() > retention_) {
        const std::string victim = lru_.back();
        lru_.pop_back();
        auto it = resident_.find(victim);
        if (spill_dir_) {
            const auto path = *spill_dir_ / (victim + ".trace");
            if (!std::filesystem::exists(path)) save_trace(path, *it->second.first);
        }
        resident_.erase(it);
    }
}

std::shared_ptr<const TraceRecord> TraceStore::get(const std::string& id, const ModelRegistry& models) {
    Recipe recipe;
    {
        std::lock_guard lock(mutex_);
        if (auto it = resident_.find(id); it != resident_.end()) {
            lru_.splice(lru_.begin(), lru_, it->second.second);
            return it->second.first;
        }
        auto r = recipes_.find(id);
        if (r == recipes_.end()) return nullptr;
        recipe = r->second;
    }
    std::shared_ptr<const TraceRecord> trace;
    if (spill_dir_) {
        const auto path = *spill_dir_ / (id + ".trace");
        try {
            if (std::filesystem::exists(path)) trace = std::make_shared<const TraceRecord>(load_trace(path));
        } catch (const LoadError&) {
            trace = nullptr;
        }
    }
    if (!trace) {
        const auto model = models.find(recipe.model_id);
        if (!model) return nullptr;
        auto rebuilt = std::make_shared<const TraceRecord>(
            generate_with_trace(*model, recipe.prompt, recipe.settings, recipe.injections, recipe.model_id));
        if (rebuilt->id != id) return nullptr;
        trace = std::move(rebuilt);
    }
    put(trace);
    return trace;
}

std::size_t TraceStore::resident() const {
    std::lock_guard lock(mutex_);
    return resident_.size();
}

bool TraceStore::known(const std::string& id) const {
    std::lock_guard lock(mutex_);
    return recipes_.count(id) > 0;
}

// ---- analysis cache ---------------------------------------------------------

std::optional<std::string> BodyCache::get(const std::string& key) {
    std::lock_guard lock(mutex_);
    auto it = bodies_.find(key);
    if (it == bodies_.end()) return std::nullopt;
    order_.splice(order_.begin(), order_, it->second.second);
    return it->second.first;
}

void BodyCache::put(const std::string& key, std::string body) {
    std::lock_guard lock(mutex_);
    if (auto it = bodies_.find(key); it != bodies_.end()) {
        // identical content from a racing request
        order_.splice(order_.begin(), order_, it->second.second);
        it->second.first = std::move(body);
        return;
    }
    order_.push_front(key);
    bodies_.emplace(key, std::make_pair(std::move(body), order_.begin()));
    while (bodies_.size() > capacity_) {
        bodies_.erase(order_.back());
        order_.pop_back();
    }
}

// ---- HTTP -------------------------------------------------------------------

namespace {

void send(httplib::Response& res, int status, const Json& j) {
    res.status = status;
    res.set_content(body_text(j), "application/json");
}

void send_error(httplib::Response& res, int status, const std::string& message,
                const std::vector<std::string>& valid = {}) {
    send(res, status, error_json(status, message, valid));
}

Json parse_body(const httplib::Request& req) {
    try {
        return Json::parse(req.body);
    } catch (const nlohmann::json::exception& e) {
        throw ApiError(400, std::string("request body is not valid JSON: ") + e.what());
    }
}

Params query_params(const httplib::Request& req) {
    Params p;
    for (const auto& [k, v] : req.params) {
        if (!p.emplace(k, v).second) throw ApiError(400, "parameter '" + k + "' given more than once");
    }
    return p;
}

// Runs a handler and maps library exceptions to status codes.
template <typename F>
httplib::Server::Handler guarded(F f) {
    return [f](const httplib::Request& req, httplib::Response& res) {
        try {
            f(req, res);
        } catch (const ApiError& e) {
            send_error(res, e.status(), e.what(), e.valid());
        } catch (const InvalidInput& e) {
            send_error(res, 400, e.what());
        } catch (const Error& e) {
            send_error(res, 500, e.what());
        } catch (const std::exception& e) {
            send_error(res, 500, std::string("internal error: ") + e.what());
        }
    };
}

}  // namespace

Service::Service(ServiceConfig config)
    : config_(std::move(config)),
      traces_(config_.trace_retention, config_.spill_dir),
      cache_(config_.analysis_cache),
      server_(std::make_unique<httplib::Server>()) {
    config_.validate();
    for (const auto& dir : config_.model_dirs) models_.load(dir);
    install_routes();
}

Service::~Service() { stop(); }

std::optional<Service::Permit> Service::try_acquire() {
    std::size_t cur = active_.load();
    while (cur < config_.max_concurrent) {
        if (active_.compare_exchange_weak(cur, cur + 1)) return Permit(active_);
    }
    return std::nullopt;
}

void Service::install_routes() {
    auto& s = *server_;
    s.set_default_headers({{"Access-Control-Allow-Origin", "*"}});
    s.Options(R"(/api/.*)", [](const httplib::Request&, httplib::Response& res) {
        res.set_header("Access-Control-Allow-Methods", "GET, POST, OPTIONS");
        res.set_header("Access-Control-Allow-Headers", "Content-Type");
        res.status = 204;
    });

    s.Get("/api/health", guarded([this](const httplib::Request&, httplib::Response& res) {
        send(res, 200, Json{{"status", "ok"}, {"models", models_.list().size()}, {"traces", traces_.resident()}});
    }));

    s.Get("/api/models", guarded([this](const httplib::Request&, httplib::Response& res) {
        Json list = Json::array();
        for (const auto& [id, m] : models_.list()) list.push_back(model_summary(id, m->config()));
        send(res, 200, list);
    }));

    s.Post("/api/models", guarded([this](const httplib::Request& req, httplib::Response& res) {
        const Json body = parse_body(req);
        if (!body.is_object() || !body.contains("path") || !body["path"].is_string()) {
            throw ApiError(400, "body needs a string field 'path'");
        }
        std::string id = body.value("model_id", std::string());
        try {
            id = models_.load(body["path"].get<std::string>(), id);
        } catch (const LoadError& e) {
            throw ApiError(422, e.what());
        } catch (const ConfigError& e) {
            throw ApiError(422, e.what());
        }
        send(res, 201, model_summary(id, models_.find(id)->config()));
    }));

    s.Post("/api/generate", guarded([this](const httplib::Request& req, httplib::Response& res) {
        const Json body = parse_body(req);
        if (!body.is_object() || !body.contains("model_id") || !body["model_id"].is_string() ||
            !body.contains("prompt") || !body["prompt"].is_string()) {
            throw ApiError(400, "body needs string fields 'model_id' and 'prompt'");
        }
        const std::string model_id = body["model_id"].get<std::string>();
        const auto model = models_.find(model_id);
        if (!model) throw ApiError(404, "unknown model '" + model_id + "'");
        const auto settings = settings_from_json(body.value("settings", Json()), config_.defaults);

        auto permit = try_acquire();
        if (!permit) throw ApiError(429, "too many generations in flight");
        std::shared_ptr<const TraceRecord> trace;
        try {
            const auto prompt = model->tokenizer().encode(body["prompt"].get<std::string>());
            trace = std::make_shared<const TraceRecord>(generate_with_trace(*model, prompt, settings, {}, model_id));
        } catch (const ContextOverflow& e) {
            throw ApiError(422, e.what());
        } catch (const InvalidToken& e) {
            throw ApiError(422, e.what());
        } catch (const InvalidInput& e) {
            throw ApiError(422, e.what());
        }
        traces_.put(trace);
        send(res, 200, generate_response(*model, *trace));
    }));

    // trace lookup shared by the per-trace routes
    auto lookup = [this](const std::string& id) {
        auto trace = traces_.get(id, models_);
        if (!trace) throw ApiError(404, "unknown trace '" + id + "'");
        auto model = models_.find(trace->model_id);
        if (!model || model->fingerprint() != trace->model_fingerprint) {
            throw ApiError(404, "model '" + trace->model_id + "' of trace " + id + " is not loaded");
        }
        return std::make_pair(trace, model);
    };

    s.Get(R"(/api/trace/([^/]+))", guarded([lookup](const httplib::Request& req, httplib::Response& res) {
        const auto [trace, model] = lookup(req.matches[1]);
        send(res, 200, trace_response(*model, *trace));
    }));

    s.Get(R"(/api/trace/([^/]+)/heatmap)", guarded([this, lookup](const httplib::Request& req,
                                                                   httplib::Response& res) {
        const std::string id = req.matches[1];
        const auto request = parse_heatmap_params(query_params(req));
        const auto [trace, model] = lookup(id);
        const std::string key = id + "|" + cache_key(request);
        auto body = cache_.get(key);
        if (!body) {
            body = body_text(heatmap_response(*model, *trace, request));
            cache_.put(key, *body);
        }
        res.set_content(*body, "application/json");
    }));

    s.Get(R"(/api/trace/([^/]+)/sankey)", guarded([this, lookup](const httplib::Request& req,
                                                                  httplib::Response& res) {
        const std::string id = req.matches[1];
        const auto options = parse_sankey_params(query_params(req));
        const auto [trace, model] = lookup(id);
        const std::string key = id + "|" + cache_key(options);
        auto body = cache_.get(key);
        if (!body) {
            body = body_text(sankey_response(*model, *trace, options));
            cache_.put(key, *body);
        }
        res.set_content(*body, "application/json");
    }));

    s.Post(R"(/api/trace/([^/]+)/inject)", guarded([this, lookup](const httplib::Request& req,
                                                                   httplib::Response& res) {
        const auto [source, model] = lookup(req.matches[1]);
        const auto spec = parse_inject_body(parse_body(req), model->tokenizer());
        auto permit = try_acquire();
        if (!permit) throw ApiError(429, "too many generations in flight");
        auto forked = std::make_shared<const TraceRecord>(fork_with_injection(*model, *source, spec));
        traces_.put(forked);
        send(res, 200, inject_response(*model, *source, *forked));
    }));

    if (config_.static_dir) {
        if (!s.set_mount_point("/", config_.static_dir->string())) {
            throw ConfigError("static directory " + config_.static_dir->string() + " does not exist");
        }
    }
}

int Service::start() {
    int port = config_.port;
    if (port == 0) {
        port = server_->bind_to_any_port(config_.host);
        if (port < 0) throw Error("cannot bind " + config_.host);
    } else if (!server_->bind_to_port(config_.host, port)) {
        throw Error("cannot bind " + config_.host + ":" + std::to_string(port));
    }
    thread_ = std::thread([this] { server_->listen_after_bind(); });
    server_->wait_until_ready();
    return port;
}

void Service::run() {
    if (!server_->listen(config_.host, config_.port)) {
        throw Error("cannot listen on " + config_.host + ":" + std::to_string(config_.port));
    }
}

void Service::stop() {
    if (server_) server_->stop();
    if (thread_.joinable()) thread_.join();
}

}  // namespace rscope
