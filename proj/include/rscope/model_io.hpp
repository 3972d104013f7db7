#pragma once

#include <cstdint>
#include <filesystem>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"

#include "rscope/model.hpp"

namespace rscope {

// weights.bin header: 8-byte magic, u32 format version, u32 CRC-32 of the
// payload that follows. All little-endian.
inline constexpr char kWeightsMagic[8] = {'R', 'S', 'C', 'O', 'P', 'E', 'W', '\0'};
inline constexpr std::uint32_t kWeightsVersion = 1;
inline constexpr std::size_t kWeightsHeaderSize = 16;

struct TensorEntry {
    std::string name;
    std::size_t rows = 0;
    std::size_t cols = 0;  // 1 for vectors

    std::size_t count() const { return rows * cols; }
};

// Fixed manifest order of the tensors in weights.bin for `config`.
std::vector<TensorEntry> weights_manifest(const ModelConfig& config);

// Tensor payload (no header) in manifest order, little-endian float32.
std::vector<unsigned char> weights_payload(const ModelConfig& config, const ModelWeights& weights);

nlohmann::ordered_json config_to_json(const ModelConfig& config);
ModelConfig config_from_json(const nlohmann::json& j);

struct LoadedModel {
    ModelConfig config;
    ModelWeights weights;
    std::vector<std::string> vocab;  // empty unless tokenizer == vocab
};

// Reads config.json, weights.bin, and (for vocab tokenizers) vocab.txt.
// Throws LoadError naming the offending file or tensor.
LoadedModel load_model(const std::filesystem::path& dir);
std::shared_ptr<const Model> load_model_shared(const std::filesystem::path& dir);

// Writes the three files; output is a pure function of the arguments.
void save_model(const std::filesystem::path& dir, const ModelConfig& config, const ModelWeights& weights,
                const std::vector<std::string>& vocab = {});

std::uint32_t crc32_of(std::span<const unsigned char> bytes);
std::string sha256_hex(std::span<const unsigned char> bytes);
std::string sha256_hex(std::string_view text);

// Little-endian float32 helpers shared by the weight and trace formats.
void append_f32(std::vector<unsigned char>& out, std::span<const float> values);
void append_u32(std::vector<unsigned char>& out, std::uint32_t v);
void append_u64(std::vector<unsigned char>& out, std::uint64_t v);
float read_f32(const unsigned char* p);
std::uint32_t read_u32(const unsigned char* p);
std::uint64_t read_u64(const unsigned char* p);

std::vector<unsigned char> read_file_bytes(const std::filesystem::path& path);
void write_file_bytes(const std::filesystem::path& path, std::span<const unsigned char> bytes);

}  // namespace rscope
