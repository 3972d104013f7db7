#pragma once

#include <filesystem>
#include <span>
#include <vector>

#include "rscope/serialize.hpp"
#include "rscope/trace.hpp"

namespace rscope {

// Trace file: 8-byte magic "RSCOPETR", u32 version, u32 reserved (0), u64
// metadata length, UTF-8 JSON metadata, then the float32 tensor blob in the
// order listed under metadata["tensors"]. Little-endian throughout.
inline constexpr char kTraceMagic[8] = {'R', 'S', 'C', 'O', 'P', 'E', 'T', 'R'};
inline constexpr std::uint32_t kTraceVersion = 1;

// Everything except the tensors: ids, tokens, settings, injections, shapes.
Json trace_metadata(const TraceRecord& trace);

std::vector<unsigned char> serialize_trace(const TraceRecord& trace);
// Throws LoadError on malformed input.
TraceRecord deserialize_trace(std::span<const unsigned char> bytes);

void save_trace(const std::filesystem::path& path, const TraceRecord& trace);
TraceRecord load_trace(const std::filesystem::path& path);

}  // namespace rscope
