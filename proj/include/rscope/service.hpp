#pragma once

#include <atomic>
#include <filesystem>
#include <functional>
#include <list>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <shared_mutex>
#include <string>
#include <thread>
#include <unordered_map>
#include <utility>
#include <vector>

#include "rscope/api.hpp"
#include "rscope/model.hpp"
#include "rscope/trace.hpp"

namespace httplib {
class Server;
}

namespace rscope {

struct ServiceConfig {
    std::string host = "127.0.0.1";
    int port = 8080;
    std::vector<std::filesystem::path> model_dirs;
    std::size_t max_concurrent = 2;     // generations in flight
    std::size_t trace_retention = 64;   // traces kept in memory
    std::size_t analysis_cache = 256;   // cached analysis bodies
    std::optional<std::filesystem::path> spill_dir;
    std::optional<std::filesystem::path> static_dir;
    GenerationSettings defaults;

    // Throws ConfigError when a limit is not positive.
    void validate() const;
};

using EnvLookup = std::function<std::optional<std::string>(const std::string&)>;
std::optional<std::string> process_env(const std::string& name);

// Layers, lowest first: defaults, the JSON config file (path from
// cli["config"] or RSCOPE_CONFIG), RSCOPE_* environment variables, then the
// CLI values in `cli` (same keys as the config file). Throws ConfigError.
ServiceConfig resolve_service_config(const Json& cli, const EnvLookup& env = process_env);

class ModelRegistry {
public:
    // Loads a model directory; the id defaults to the directory name. Throws
    // LoadError/ConfigError, or ApiError(409) for a duplicate id.
    std::string load(const std::filesystem::path& dir, std::string model_id = {});
    void add(const std::string& model_id, std::shared_ptr<const Model> model);
    std::shared_ptr<const Model> find(const std::string& model_id) const;
    std::vector<std::pair<std::string, std::shared_ptr<const Model>>> list() const;

private:
    mutable std::shared_mutex mutex_;
    std::map<std::string, std::shared_ptr<const Model>> models_;
};

// Trace-id -> trace map with LRU retention. Evicted traces are spilled to
// disk when a spill directory is set; otherwise they are regenerated from
// their recipe (prompt, settings, injections) on the next lookup.
class TraceStore {
public:
    TraceStore(std::size_t retention, std::optional<std::filesystem::path> spill_dir);

    void put(std::shared_ptr<const TraceRecord> trace);
    // nullptr when the id was never stored or can no longer be rebuilt.
    std::shared_ptr<const TraceRecord> get(const std::string& id, const ModelRegistry& models);
    std::size_t resident() const;
    bool known(const std::string& id) const;

private:
    struct Recipe {
        std::string model_id;
        std::vector<TokenId> prompt;
        GenerationSettings settings;
        std::vector<InjectionSpec> injections;
    };
    void evict_locked();

    std::size_t retention_;
    std::optional<std::filesystem::path> spill_dir_;
    mutable std::mutex mutex_;
    std::list<std::string> lru_;  // front is most recent
    std::unordered_map<std::string, std::pair<std::shared_ptr<const TraceRecord>, std::list<std::string>::iterator>>
        resident_;
    std::unordered_map<std::string, Recipe> recipes_;
};

// Bounded map of rendered analysis bodies.
class BodyCache {
public:
    explicit BodyCache(std::size_t capacity) : capacity_(capacity) {}
    std::optional<std::string> get(const std::string& key);
    void put(const std::string& key, std::string body);

private:
    std::size_t capacity_;
    std::mutex mutex_;
    std::list<std::string> order_;
    std::unordered_map<std::string, std::pair<std::string, std::list<std::string>::iterator>> bodies_;
};

class Service {
public:
    explicit Service(ServiceConfig config);
    ~Service();
    Service(const Service&) = delete;
    Service& operator=(const Service&) = delete;

    // Binds (port 0 picks a free port), serves on a background thread and
    // returns the bound port. Throws Error when binding fails.
    int start();
    // Binds and serves on the calling thread until stop().
    void run();
    void stop();

    ModelRegistry& models() { return models_; }
    TraceStore& traces() { return traces_; }
    const ServiceConfig& config() const { return config_; }

    // Generation slot; empty when max_concurrent generations are running.
    class Permit {
    public:
        explicit Permit(std::atomic<std::size_t>& counter) : counter_(&counter) {}
        Permit(Permit&& o) noexcept : counter_(std::exchange(o.counter_, nullptr)) {}
        Permit(const Permit&) = delete;
        ~Permit() {
            if (counter_) --*counter_;
        }

    private:
        std::atomic<std::size_t>* counter_;
    };
    std::optional<Permit> try_acquire();

private:
    void install_routes();

    ServiceConfig config_;
    ModelRegistry models_;
    TraceStore traces_;
    BodyCache cache_;
    std::atomic<std::size_t> active_{0};
    std::unique_ptr<httplib::Server> server_;
    std::thread thread_;
};

}  // namespace rscope
