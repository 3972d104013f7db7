#pragma once

#include <string>

#include "json.hpp"

#include "rscope/decoder_spec.hpp"
#include "rscope/trace.hpp"

namespace rscope {

using Json = nlohmann::json;

Json to_json(const DecoderSpec& spec);
Json to_json(const GenerationSettings& settings);
Json to_json(const InjectionSpec& spec);
Json to_json(const InjectionRecord& record);

// Missing keys keep the values of `defaults`; wrong types and unknown enum
// values throw InvalidInput.
DecoderSpec decoder_spec_from_json(const Json& j, const DecoderSpec& defaults = {});
GenerationSettings settings_from_json(const Json& j, const GenerationSettings& defaults = {});
InjectionSpec injection_from_json(const Json& j);
InjectionRecord injection_record_from_json(const Json& j);

// Compact single-line dump; invalid UTF-8 in strings is replaced so any
// token text can be emitted.
std::string dump_compact(const Json& j);

}  // namespace rscope
