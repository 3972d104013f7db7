#pragma once

#include <unistd.h>

#include <atomic>
#include <filesystem>
#include <memory>
#include <random>
#include <string>
#include <vector>

#include "rscope/model.hpp"
#include "rscope/model_io.hpp"

namespace rscope::testing {

inline ModelConfig small_config(bool tied = false) {
    ModelConfig c;
    c.n_layers = 3;
    c.d_model = 16;
    c.n_heads = 2;
    c.d_ff = 32;
    c.vocab_size = 300;
    c.max_seq_len = 48;
    c.tied_embeddings = tied;
    return c;
}

inline std::shared_ptr<const Model> make_model(const ModelConfig& c, std::uint64_t seed = 7) {
    return std::make_shared<const Model>(c, seeded_random_model(c, seed), Tokenizer::byte_level(c.vocab_size));
}

// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
public:
    TempDir() {
        static std::atomic<int> counter{0};
        path_ = std::filesystem::temp_directory_path() /
                ("rscope-test-" + std::to_string(::getpid()) + "-" + std::to_string(counter++));
        std::filesystem::remove_all(path_);
        std::filesystem::create_directories(path_);
    }
    ~TempDir() {
        std::error_code ec;
        std::filesystem::remove_all(path_, ec);
    }
    TempDir(const TempDir&) = delete;
    TempDir& operator=(const TempDir&) = delete;

    const std::filesystem::path& path() const { return path_; }

private:
    std::filesystem::path path_;
};

inline std::vector<float> random_vector(std::mt19937_64& rng, std::size_t n, double amplitude = 1.0) {
    std::uniform_real_distribution<double> dist(-amplitude, amplitude);
    std::vector<float> v(n);
    for (auto& x : v) x = static_cast<float>(dist(rng));
    return v;
}

}  // namespace rscope::testing
