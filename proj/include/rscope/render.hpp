#pragma once

#include <string>

#include "rscope/serialize.hpp"

namespace rscope {

// Static renderings of the analysis JSON documents. They read only the JSON,
// so rendering a saved document gives the same bytes as rendering directly.
// Throws InvalidInput when required fields are missing.

// Cells shaded on a white-to-navy scale over [0, value_range[1]], top layer
// drawn first, dashed separator before the first generated column.
std::string heatmap_svg(const Json& grid);

// Positions left to right, layers bottom to top. Residual nodes and edges are
// blue, attention green, feed-forward pink; widths follow flow.
std::string sankey_svg(const Json& graph);

std::string heatmap_csv(const Json& grid);
std::string sankey_csv(const Json& graph);

// Hex colour of the heatmap scale at t in [0, 1] (clamped).
std::string heat_colour(double t);

inline constexpr const char* kResidualColour = "#1f77b4";
inline constexpr const char* kAttentionColour = "#2ca02c";
inline constexpr const char* kFfnnColour = "#e377c2";

}  // namespace rscope
