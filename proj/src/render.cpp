#include "rscope/render.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <map>
#include <sstream>

#include "rscope/errors.hpp"

namespace rscope {

namespace {

std::string fmt(double v, int decimals = 2) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.*f", decimals, v);
    return buf;
}

std::string xml_escape(std::string_view s) {
    std::string out;
    for (char c : s) {
        switch (c) {
            case '&': out += "&amp;"; break;
            case '<': out += "&lt;"; break;
            case '>': out += "&gt;"; break;
            case '"': out += "&quot;"; break;
            case '\'': out += "&apos;"; break;
            default:
                // control bytes are not allowed in XML 1.0
                if (static_cast<unsigned char>(c) < 0x20) {
                    out += '?';
                } else {
                    out += c;
                }
        }
    }
    return out;
}

std::string csv_field(std::string_view s) {
    if (s.find_first_of(",\"\n\r") == std::string_view::npos) return std::string(s);
    std::string out = "\"";
    for (char c : s) {
        if (c == '"') out += '"';
        out += c;
    }
    return out + "\"";
}

// Display text trimmed to a few UTF-8 code points.
std::string short_label(const std::string& s, std::size_t max_chars = 6) {
    std::size_t chars = 0;
    for (std::size_t i = 0; i < s.size(); ++i) {
        if ((static_cast<unsigned char>(s[i]) & 0xC0) != 0x80 && chars++ == max_chars) {
            return s.substr(0, i) + "..";
        }
    }
    return s;
}

const Json& need(const Json& j, const char* key) {
    if (!j.is_object() || !j.contains(key)) throw InvalidInput(std::string("document lacks field '") + key + "'");
    return j.at(key);
}

std::string num(const Json& v) { return v.dump(); }

const char* node_colour(const std::string& kind) {
    if (kind == "attention") return kAttentionColour;
    if (kind == "ffnn") return kFfnnColour;
    return kResidualColour;
}

}  // namespace

std::string heat_colour(double t) {
    if (!(t >= 0.0)) t = 0.0;
    t = std::min(t, 1.0);
    // #f7fbff -> #08306b
    const int r = static_cast<int>(std::lround(247 + (8 - 247) * t));
    const int g = static_cast<int>(std::lround(251 + (48 - 251) * t));
    const int b = static_cast<int>(std::lround(255 + (107 - 255) * t));
    char buf[8];
    std::snprintf(buf, sizeof buf, "#%02x%02x%02x", r, g, b);
    return buf;
}

std::string heatmap_svg(const Json& grid) {
    try {
        const std::size_t rows = need(grid, "rows").get<std::size_t>();
        const std::size_t cols = need(grid, "cols").get<std::size_t>();
        const std::size_t prompt_len = need(grid, "prompt_len").get<std::size_t>();
        const double vmax = need(grid, "value_range").at(1).get<double>();
        const auto& layers = need(grid, "layers");
        const auto& tokens = need(grid, "tokens");
        const auto& cells = need(grid, "cells");
        if (cells.size() != rows * cols) throw InvalidInput("heatmap cell count does not match rows x cols");

        constexpr double cw = 48, ch = 22, left = 48, top = 40;
        const double width = left + cw * static_cast<double>(cols) + 10;
        const double height = top + ch * static_cast<double>(rows) + 10;

        std::ostringstream o;
        o << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << fmt(width, 0) << "\" height=\"" << fmt(height, 0)
          << "\" font-family=\"monospace\" font-size=\"10\">\n";
        o << "<title>" << xml_escape(need(grid, "state").get<std::string>()) << " / "
          << xml_escape(need(grid, "metric").get<std::string>()) << "</title>\n";
        for (std::size_t c = 0; c < cols && c < tokens.size(); ++c) {
            const double x = left + cw * (static_cast<double>(c) + 0.5);
            o << "<text x=\"" << fmt(x) << "\" y=\"" << fmt(top - 8) << "\" text-anchor=\"middle\">"
              << xml_escape(short_label(tokens[c].at("text").get<std::string>())) << "</text>\n";
        }
        for (std::size_t r = 0; r < rows; ++r) {
            // highest layer on top
            const double y = top + ch * static_cast<double>(rows - 1 - r);
            o << "<text x=\"" << fmt(left - 6) << "\" y=\"" << fmt(y + ch * 0.68) << "\" text-anchor=\"end\">"
              << num(layers.at(r)) << "</text>\n";
            for (std::size_t c = 0; c < cols; ++c) {
                const auto& cell = cells[r * cols + c];
                const double v = cell.at("value").get<double>();
                const double t = vmax > 0 ? v / vmax : 0.0;
                const double x = left + cw * static_cast<double>(c);
                o << "<rect x=\"" << fmt(x) << "\" y=\"" << fmt(y) << "\" width=\"" << fmt(cw) << "\" height=\""
                  << fmt(ch) << "\" fill=\"" << heat_colour(t) << "\"><title>"
                  << xml_escape(cell.at("text").get<std::string>()) << " " << fmt(v, 4) << "</title></rect>\n";
                o << "<text x=\"" << fmt(x + cw / 2) << "\" y=\"" << fmt(y + ch * 0.68)
                  << "\" text-anchor=\"middle\" fill=\"" << (t > 0.5 ? "#ffffff" : "#000000") << "\">"
                  << xml_escape(short_label(cell.at("text").get<std::string>())) << "</text>\n";
            }
        }
        if (prompt_len < cols) {
            const double x = left + cw * static_cast<double>(prompt_len);
            o << "<line x1=\"" << fmt(x) << "\" y1=\"" << fmt(top - 20) << "\" x2=\"" << fmt(x) << "\" y2=\""
              << fmt(top + ch * static_cast<double>(rows)) << "\" stroke=\"#d62728\" stroke-width=\"2\" "
              << "stroke-dasharray=\"4 3\"/>\n";
        }
        o << "</svg>\n";
        return o.str();
    } catch (const nlohmann::json::exception& e) {
        throw InvalidInput(std::string("malformed heatmap document: ") + e.what());
    }
}

std::string sankey_svg(const Json& graph) {
    try {
        const auto& range = need(graph, "layers");
        const std::size_t lo = range.at(0).get<std::size_t>();
        const std::size_t hi = range.at(1).get<std::size_t>();
        const auto& tokens = need(graph, "tokens");
        const auto& nodes = need(graph, "nodes");
        const auto& edges = need(graph, "edges");
        const std::size_t cols = tokens.size();
        const double seeded = need(graph, "seeded").get<double>();

        // Five sub-levels per layer: x^(l-1), attention, x', ffnn, x^(l).
        constexpr double colw = 64, levelh = 36, left = 40, top = 30;
        const std::size_t levels = 4 * (hi - lo + 1) + 1;
        const double width = left + colw * static_cast<double>(cols) + 20;
        const double height = top + levelh * static_cast<double>(levels) + 20;
        double max_flow = 0.0;
        for (const auto& n : nodes) max_flow = std::max(max_flow, n.at("flow").get<double>());
        const double unit = max_flow > 0 ? colw * 0.7 / max_flow : 0.0;

        struct Pos {
            double x, y;
        };
        std::map<std::string, Pos> where;
        for (const auto& n : nodes) {
            const std::string kind = n.at("kind").get<std::string>();
            const std::size_t layer = n.at("layer").get<std::size_t>();
            const std::size_t pos = n.at("position").get<std::size_t>();
            std::size_t level = 0;
            double dx = 0.0;
            if (kind == "residual_x") {
                level = 4 * (layer - (lo - 1));
            } else {
                const std::size_t base = 4 * (layer - lo);
                if (kind == "attention") {
                    level = base + 1;
                    dx = -colw * 0.3;
                } else if (kind == "residual_x'") {
                    level = base + 2;
                } else {
                    level = base + 3;
                    dx = colw * 0.3;
                }
            }
            const double x = left + colw * (static_cast<double>(pos) + 0.5) + dx;
            const double y = top + levelh * static_cast<double>(levels - 1 - level) + levelh / 2;
            where[n.at("id").get<std::string>()] = {x, y};
        }

        std::ostringstream o;
        o << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << fmt(width, 0) << "\" height=\"" << fmt(height, 0)
          << "\" font-family=\"monospace\" font-size=\"10\">\n";
        o << "<title>flow layers " << lo << "-" << hi << " (" << xml_escape(need(graph, "weighting").get<std::string>())
          << ")</title>\n";
        for (std::size_t c = 0; c < cols; ++c) {
            o << "<text x=\"" << fmt(left + colw * (static_cast<double>(c) + 0.5)) << "\" y=\"" << fmt(height - 6)
              << "\" text-anchor=\"middle\">" << xml_escape(short_label(tokens[c].at("text").get<std::string>()))
              << "</text>\n";
        }
        for (const auto& e : edges) {
            const auto& a = where.at(e.at("source").get<std::string>());
            const auto& b = where.at(e.at("target").get<std::string>());
            const std::string kind = e.at("kind").get<std::string>();
            const double w = std::max(0.5, e.at("weight").get<double>() * unit * 0.2);
            const double my = (a.y + b.y) / 2;
            o << "<path d=\"M" << fmt(a.x) << " " << fmt(a.y) << " C" << fmt(a.x) << " " << fmt(my) << " " << fmt(b.x)
              << " " << fmt(my) << " " << fmt(b.x) << " " << fmt(b.y) << "\" fill=\"none\" stroke=\""
              << node_colour(kind == "residual" ? "residual_x" : kind) << "\" stroke-opacity=\"0.45\" stroke-width=\""
              << fmt(w) << "\"/>\n";
        }
        for (const auto& n : nodes) {
            const auto& p = where.at(n.at("id").get<std::string>());
            const double flow = n.at("flow").get<double>();
            const double w = std::max(2.0, flow * unit);
            o << "<rect x=\"" << fmt(p.x - w / 2) << "\" y=\"" << fmt(p.y - 4) << "\" width=\"" << fmt(w)
              << "\" height=\"8\" fill=\"" << node_colour(n.at("kind").get<std::string>()) << "\"><title>"
              << xml_escape(n.at("id").get<std::string>()) << " " << fmt(seeded > 0 ? 100.0 * flow / seeded : 0.0)
              << "%</title></rect>\n";
        }
        o << "</svg>\n";
        return o.str();
    } catch (const nlohmann::json::exception& e) {
        throw InvalidInput(std::string("malformed flow document: ") + e.what());
    } catch (const std::out_of_range&) {
        throw InvalidInput("flow document has an edge to an unknown node");
    }
}

std::string heatmap_csv(const Json& grid) {
    try {
        std::string out = "layer,position,token,text,value,probability,entropy,att_contribution,ff_contribution\n";
        for (const auto& c : need(grid, "cells")) {
            out += num(c.at("layer")) + "," + num(c.at("position")) + "," + num(c.at("token")) + "," +
                   csv_field(c.at("text").get<std::string>()) + "," + num(c.at("value")) + "," +
                   num(c.at("probability")) + "," + num(c.at("entropy")) + "," + num(c.at("att_contribution")) + "," +
                   num(c.at("ff_contribution")) + "\n";
        }
        return out;
    } catch (const nlohmann::json::exception& e) {
        throw InvalidInput(std::string("malformed heatmap document: ") + e.what());
    }
}

std::string sankey_csv(const Json& graph) {
    try {
        std::string out = "source,target,kind,weight\n";
        for (const auto& e : need(graph, "edges")) {
            out += e.at("source").get<std::string>() + "," + e.at("target").get<std::string>() + "," +
                   e.at("kind").get<std::string>() + "," + num(e.at("weight")) + "\n";
        }
        return out;
    } catch (const nlohmann::json::exception& e) {
        throw InvalidInput(std::string("malformed flow document: ") + e.what());
    }
}

}  // namespace rscope
