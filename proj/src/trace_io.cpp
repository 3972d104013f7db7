#include "rscope/trace_io.hpp"

#include <cstring>

#include "rscope/errors.hpp"
#include "rscope/model_io.hpp"

namespace rscope {

namespace {

struct TensorSlot {
    const char* name;
    std::vector<float> TraceRecord::*member;
};

constexpr TensorSlot kSlots[] = {
    {"x", &TraceRecord::x},
    {"intermediate", &TraceRecord::intermediate},
    {"delta_att", &TraceRecord::delta_att},
    {"delta_ff", &TraceRecord::delta_ff},
    {"attention", &TraceRecord::attention},
    {"final_probs", &TraceRecord::final_probs},
};

std::vector<std::size_t> tensor_shape(const TraceRecord& t, std::string_view name) {
    const std::size_t T = t.length();
    if (name == "x") return {t.n_layers + 1, T, t.d_model};
    if (name == "attention") return {t.n_layers, t.n_heads, T, T};
    if (name == "final_probs") return {T, t.vocab_size};
    return {t.n_layers, T, t.d_model};
}

std::size_t product(const std::vector<std::size_t>& shape) {
    std::size_t n = 1;
    for (auto s : shape) n *= s;
    return n;
}

}  // namespace

Json trace_metadata(const TraceRecord& t) {
    Json j;
    j["trace_id"] = t.id;
    j["model_id"] = t.model_id;
    j["model_fingerprint"] = t.model_fingerprint;
    j["n_layers"] = t.n_layers;
    j["d_model"] = t.d_model;
    j["n_heads"] = t.n_heads;
    j["vocab_size"] = t.vocab_size;
    j["tokens"] = t.tokens;
    j["prompt_len"] = t.prompt_len;
    j["settings"] = to_json(t.settings);
    j["injections"] = Json::array();
    for (const auto& inj : t.injections) j["injections"].push_back(to_json(inj));
    return j;
}

std::vector<unsigned char> serialize_trace(const TraceRecord& t) {
    Json meta = trace_metadata(t);
    meta["format_version"] = kTraceVersion;
    meta["tensors"] = Json::array();
    std::size_t offset = 0;
    for (const auto& slot : kSlots) {
        const auto shape = tensor_shape(t, slot.name);
        const auto& data = t.*slot.member;
        if (data.size() != product(shape)) {
            throw InvalidInput(std::string("trace tensor ") + slot.name + " does not match its shape");
        }
        meta["tensors"].push_back({{"name", slot.name}, {"shape", shape}, {"offset", offset}});
        offset += data.size() * sizeof(float);
    }
    const std::string text = dump_compact(meta);

    std::vector<unsigned char> out(kTraceMagic, kTraceMagic + 8);
    append_u32(out, kTraceVersion);
    append_u32(out, 0);
    append_u64(out, text.size());
    out.insert(out.end(), text.begin(), text.end());
    out.reserve(out.size() + offset);
    for (const auto& slot : kSlots) append_f32(out, t.*slot.member);
    return out;
}

TraceRecord deserialize_trace(std::span<const unsigned char> bytes) {
    constexpr std::size_t header = 24;
    if (bytes.size() < header || std::memcmp(bytes.data(), kTraceMagic, 8) != 0) {
        throw LoadError("not a trace file (bad magic)");
    }
    if (read_u32(bytes.data() + 8) != kTraceVersion) throw LoadError("unsupported trace format version");
    const std::uint64_t meta_len = read_u64(bytes.data() + 16);
    if (meta_len > bytes.size() - header) throw LoadError("trace metadata length exceeds file size");

    Json meta;
    try {
        meta = Json::parse(bytes.begin() + header, bytes.begin() + header + static_cast<std::ptrdiff_t>(meta_len));
    } catch (const nlohmann::json::exception& e) {
        throw LoadError(std::string("trace metadata: ") + e.what());
    }

    TraceRecord t;
    try {
        t.id = meta.at("trace_id").get<std::string>();
        t.model_id = meta.at("model_id").get<std::string>();
        t.model_fingerprint = meta.at("model_fingerprint").get<std::string>();
        t.n_layers = meta.at("n_layers").get<std::size_t>();
        t.d_model = meta.at("d_model").get<std::size_t>();
        t.n_heads = meta.at("n_heads").get<std::size_t>();
        t.vocab_size = meta.at("vocab_size").get<std::size_t>();
        t.tokens = meta.at("tokens").get<std::vector<TokenId>>();
        t.prompt_len = meta.at("prompt_len").get<std::size_t>();
        t.settings = settings_from_json(meta.at("settings"));
        for (const auto& inj : meta.at("injections")) t.injections.push_back(injection_record_from_json(inj));
    } catch (const nlohmann::json::exception& e) {
        throw LoadError(std::string("trace metadata: ") + e.what());
    } catch (const InvalidInput& e) {
        throw LoadError(std::string("trace metadata: ") + e.what());
    }
    if (t.prompt_len == 0 || t.prompt_len > t.tokens.size()) throw LoadError("trace prompt_len inconsistent");

    const unsigned char* blob = bytes.data() + header + meta_len;
    std::size_t remaining = bytes.size() - header - meta_len;
    for (const auto& slot : kSlots) {
        const std::size_t n = product(tensor_shape(t, slot.name));
        if (n * sizeof(float) > remaining) throw LoadError(std::string("trace tensor ") + slot.name + " truncated");
        auto& data = t.*slot.member;
        data.resize(n);
        std::memcpy(data.data(), blob, n * sizeof(float));
        blob += n * sizeof(float);
        remaining -= n * sizeof(float);
    }
    if (remaining != 0) throw LoadError("trailing bytes after trace tensors");
    return t;
}

void save_trace(const std::filesystem::path& path, const TraceRecord& trace) {
    write_file_bytes(path, serialize_trace(trace));
}

TraceRecord load_trace(const std::filesystem::path& path) { return deserialize_trace(read_file_bytes(path)); }

}  // namespace rscope
