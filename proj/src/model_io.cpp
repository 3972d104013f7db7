#include "rscope/model_io.hpp"

#include <openssl/evp.h>
#include <zlib.h>

#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

#include "rscope/errors.hpp"

namespace rscope {

static_assert(std::endian::native == std::endian::little, "tensor formats assume a little-endian host");

namespace fs = std::filesystem;

std::vector<TensorEntry> weights_manifest(const ModelConfig& c) {
    std::vector<TensorEntry> m;
    m.push_back({"tok_embeddings", c.vocab_size, c.d_model});
    for (std::size_t l = 0; l < c.n_layers; ++l) {
        const std::string p = "layers." + std::to_string(l) + ".";
        m.push_back({p + "attn_norm", c.d_model, 1});
        m.push_back({p + "wq", c.d_model, c.d_model});
        m.push_back({p + "wk", c.d_model, c.d_model});
        m.push_back({p + "wv", c.d_model, c.d_model});
        m.push_back({p + "wo", c.d_model, c.d_model});
        m.push_back({p + "ffn_norm", c.d_model, 1});
        m.push_back({p + "ffn_up", c.d_model, c.d_ff});
        m.push_back({p + "ffn_down", c.d_ff, c.d_model});
    }
    m.push_back({"final_norm", c.d_model, 1});
    if (!c.tied_embeddings) m.push_back({"lm_head", c.d_model, c.vocab_size});
    return m;
}

namespace {

// Flat views of the weights in manifest order.
std::vector<std::span<const float>> tensor_views(const ModelConfig& c, const ModelWeights& w) {
    std::vector<std::span<const float>> v;
    v.push_back(w.embed.data());
    for (const auto& lw : w.layers) {
        v.push_back(lw.attn_norm);
        v.push_back(lw.wq.data());
        v.push_back(lw.wk.data());
        v.push_back(lw.wv.data());
        v.push_back(lw.wo.data());
        v.push_back(lw.ffn_norm);
        v.push_back(lw.ffn_up.data());
        v.push_back(lw.ffn_down.data());
    }
    v.push_back(w.final_norm);
    if (!c.tied_embeddings) v.push_back(w.lm_head->data());
    return v;
}

std::vector<float> take(const unsigned char*& p, std::size_t n) {
    std::vector<float> out(n);
    std::memcpy(out.data(), p, n * sizeof(float));
    p += n * sizeof(float);
    return out;
}

std::size_t payload_bytes(const std::vector<TensorEntry>& manifest) {
    std::size_t n = 0;
    for (const auto& e : manifest) n += e.count() * sizeof(float);
    return n;
}

std::string read_text(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw LoadError("cannot open " + path.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

}  // namespace

std::vector<unsigned char> weights_payload(const ModelConfig& config, const ModelWeights& weights) {
    std::vector<unsigned char> out;
    out.reserve(payload_bytes(weights_manifest(config)));
    for (auto view : tensor_views(config, weights)) append_f32(out, view);
    return out;
}

nlohmann::ordered_json config_to_json(const ModelConfig& c) {
    nlohmann::ordered_json j;
    j["n_layers"] = c.n_layers;
    j["d_model"] = c.d_model;
    j["n_heads"] = c.n_heads;
    j["d_ff"] = c.d_ff;
    j["vocab_size"] = c.vocab_size;
    j["max_seq_len"] = c.max_seq_len;
    j["tied_embeddings"] = c.tied_embeddings;
    j["rms_eps"] = c.rms_eps;
    j["tokenizer"] = c.tokenizer == TokenizerKind::byte ? "byte" : "vocab";
    return j;
}

ModelConfig config_from_json(const nlohmann::json& j) {
    ModelConfig c;
    try {
        c.n_layers = j.at("n_layers").get<std::size_t>();
        c.d_model = j.at("d_model").get<std::size_t>();
        c.n_heads = j.at("n_heads").get<std::size_t>();
        c.d_ff = j.at("d_ff").get<std::size_t>();
        c.vocab_size = j.at("vocab_size").get<std::size_t>();
        c.max_seq_len = j.at("max_seq_len").get<std::size_t>();
        c.tied_embeddings = j.at("tied_embeddings").get<bool>();
        c.rms_eps = j.value("rms_eps", 1e-6);
        const std::string tok = j.value("tokenizer", "byte");
        if (tok == "byte") {
            c.tokenizer = TokenizerKind::byte;
        } else if (tok == "vocab") {
            c.tokenizer = TokenizerKind::vocab;
        } else {
            throw LoadError("config.json: unknown tokenizer '" + tok + "'");
        }
    } catch (const nlohmann::json::exception& e) {
        throw LoadError(std::string("config.json: ") + e.what());
    }
    try {
        c.validate();
    } catch (const ConfigError& e) {
        throw LoadError(std::string("config.json: ") + e.what());
    }
    return c;
}

LoadedModel load_model(const fs::path& dir) {
    LoadedModel out;
    nlohmann::json cj;
    try {
        cj = nlohmann::json::parse(read_text(dir / "config.json"));
    } catch (const nlohmann::json::parse_error& e) {
        throw LoadError(std::string("config.json: ") + e.what());
    }
    out.config = config_from_json(cj);
    const ModelConfig& c = out.config;

    const auto bytes = read_file_bytes(dir / "weights.bin");
    if (bytes.size() < kWeightsHeaderSize || std::memcmp(bytes.data(), kWeightsMagic, 8) != 0) {
        throw LoadError("weights.bin: bad magic header");
    }
    const std::uint32_t version = read_u32(bytes.data() + 8);
    if (version != kWeightsVersion) {
        throw LoadError("weights.bin: unsupported format version " + std::to_string(version));
    }
    const auto manifest = weights_manifest(c);
    const std::size_t expected = payload_bytes(manifest);
    const std::size_t actual = bytes.size() - kWeightsHeaderSize;
    if (actual != expected) {
        if (c.tied_embeddings && actual == expected + c.d_model * c.vocab_size * sizeof(float)) {
            throw LoadError("weights.bin: tied_embeddings=true but a separate lm_head tensor is present");
        }
        // name the first tensor that the file cannot fully hold
        std::string culprit = "trailing data";
        std::size_t offset = 0;
        for (const auto& e : manifest) {
            offset += e.count() * sizeof(float);
            if (offset > actual) {
                culprit = e.name;
                break;
            }
        }
        throw LoadError("weights.bin: size mismatch: payload has " + std::to_string(actual) + " bytes, expected " +
                        std::to_string(expected) + " (at tensor " + culprit + ")");
    }
    const std::uint32_t crc = read_u32(bytes.data() + 12);
    if (crc != crc32_of({bytes.data() + kWeightsHeaderSize, actual})) {
        throw LoadError("weights.bin: checksum mismatch");
    }

    const unsigned char* p = bytes.data() + kWeightsHeaderSize;
    ModelWeights& w = out.weights;
    w.embed = Matrix(c.vocab_size, c.d_model, take(p, c.vocab_size * c.d_model));
    w.layers.resize(c.n_layers);
    const std::size_t dd = c.d_model * c.d_model;
    for (auto& lw : w.layers) {
        lw.attn_norm = take(p, c.d_model);
        lw.wq = Matrix(c.d_model, c.d_model, take(p, dd));
        lw.wk = Matrix(c.d_model, c.d_model, take(p, dd));
        lw.wv = Matrix(c.d_model, c.d_model, take(p, dd));
        lw.wo = Matrix(c.d_model, c.d_model, take(p, dd));
        lw.ffn_norm = take(p, c.d_model);
        lw.ffn_up = Matrix(c.d_model, c.d_ff, take(p, c.d_model * c.d_ff));
        lw.ffn_down = Matrix(c.d_ff, c.d_model, take(p, c.d_model * c.d_ff));
    }
    w.final_norm = take(p, c.d_model);
    if (!c.tied_embeddings) w.lm_head = Matrix(c.d_model, c.vocab_size, take(p, c.d_model * c.vocab_size));
    for (std::size_t i = 0; const auto view : tensor_views(c, w)) {
        if (!all_finite(view)) throw LoadError("weights.bin: tensor " + manifest[i].name + " has non-finite values");
        ++i;
    }
    validate_weights(c, w);

    if (c.tokenizer == TokenizerKind::vocab) {
        std::istringstream in(read_text(dir / "vocab.txt"));
        std::string line;
        while (std::getline(in, line)) out.vocab.push_back(unescape_vocab_line(line));
        if (out.vocab.size() != c.vocab_size) {
            throw LoadError("vocab.txt: " + std::to_string(out.vocab.size()) + " entries, vocab_size is " +
                            std::to_string(c.vocab_size));
        }
    }
    return out;
}

std::shared_ptr<const Model> load_model_shared(const fs::path& dir) {
    LoadedModel m = load_model(dir);
    Tokenizer tok = m.config.tokenizer == TokenizerKind::byte ? Tokenizer::byte_level(m.config.vocab_size)
                                                              : Tokenizer::from_vocab(std::move(m.vocab));
    return std::make_shared<const Model>(std::move(m.config), std::move(m.weights), std::move(tok));
}

void save_model(const fs::path& dir, const ModelConfig& config, const ModelWeights& weights,
                const std::vector<std::string>& vocab) {
    validate_weights(config, weights);
    if (config.tokenizer == TokenizerKind::vocab && vocab.size() != config.vocab_size) {
        throw InvalidInput("vocab tokenizer needs exactly vocab_size entries");
    }
    fs::create_directories(dir);
    const std::string cfg = config_to_json(config).dump(2) + "\n";
    write_file_bytes(dir / "config.json", {reinterpret_cast<const unsigned char*>(cfg.data()), cfg.size()});

    const auto payload = weights_payload(config, weights);
    std::vector<unsigned char> file(kWeightsMagic, kWeightsMagic + 8);
    append_u32(file, kWeightsVersion);
    append_u32(file, crc32_of(payload));
    file.insert(file.end(), payload.begin(), payload.end());
    write_file_bytes(dir / "weights.bin", file);

    if (config.tokenizer == TokenizerKind::vocab) {
        std::string text;
        for (const auto& e : vocab) text += escape_vocab_entry(e) + "\n";
        write_file_bytes(dir / "vocab.txt", {reinterpret_cast<const unsigned char*>(text.data()), text.size()});
    }
}

std::uint32_t crc32_of(std::span<const unsigned char> bytes) {
    uLong crc = crc32(0L, Z_NULL, 0);
    // zlib takes uInt lengths
    std::size_t done = 0;
    while (done < bytes.size()) {
        const auto chunk = static_cast<uInt>(std::min<std::size_t>(bytes.size() - done, 1u << 30));
        crc = crc32(crc, bytes.data() + done, chunk);
        done += chunk;
    }
    return static_cast<std::uint32_t>(crc);
}

std::string sha256_hex(std::span<const unsigned char> bytes) {
    unsigned char digest[EVP_MAX_MD_SIZE];
    unsigned int len = 0;
    if (EVP_Digest(bytes.data(), bytes.size(), digest, &len, EVP_sha256(), nullptr) != 1) {
        throw Error("sha256 failed");
    }
    static constexpr char hex[] = "0123456789abcdef";
    std::string out;
    out.reserve(2 * len);
    for (unsigned int i = 0; i < len; ++i) {
        out.push_back(hex[digest[i] >> 4]);
        out.push_back(hex[digest[i] & 0xf]);
    }
    return out;
}

std::string sha256_hex(std::string_view text) {
    return sha256_hex({reinterpret_cast<const unsigned char*>(text.data()), text.size()});
}

void append_f32(std::vector<unsigned char>& out, std::span<const float> values) {
    const auto* p = reinterpret_cast<const unsigned char*>(values.data());
    out.insert(out.end(), p, p + values.size_bytes());
}

void append_u32(std::vector<unsigned char>& out, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<unsigned char>(v >> (8 * i)));
}

void append_u64(std::vector<unsigned char>& out, std::uint64_t v) {
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<unsigned char>(v >> (8 * i)));
}

float read_f32(const unsigned char* p) {
    float f;
    std::memcpy(&f, p, sizeof f);
    return f;
}

std::uint32_t read_u32(const unsigned char* p) {
    std::uint32_t v = 0;
    for (int i = 3; i >= 0; --i) v = (v << 8) | p[i];
    return v;
}

std::uint64_t read_u64(const unsigned char* p) {
    std::uint64_t v = 0;
    for (int i = 7; i >= 0; --i) v = (v << 8) | p[i];
    return v;
}

std::vector<unsigned char> read_file_bytes(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw LoadError("cannot open " + path.string());
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_file_bytes(const fs::path& path, std::span<const unsigned char> bytes) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw Error("cannot write " + path.string());
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw Error("write failed for " + path.string());
}

}  // namespace rscope
