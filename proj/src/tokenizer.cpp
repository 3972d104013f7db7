#include "rscope/tokenizer.hpp"

#include <algorithm>
#include <charconv>
#include <cstdio>

#include "rscope/errors.hpp"

namespace rscope {

namespace {

constexpr TokenId kByteBos = 256;
constexpr TokenId kByteEos = 257;

}  // namespace

Tokenizer Tokenizer::byte_level(std::size_t vocab_size, bool add_bos) {
    Tokenizer t;
    t.kind_ = TokenizerKind::byte;
    t.vocab_size_ = vocab_size;
    t.add_bos_ = add_bos;
    if (vocab_size > kByteBos) t.bos_ = kByteBos;
    if (vocab_size > kByteEos) t.eos_ = kByteEos;
    if (add_bos && !t.bos_) throw InvalidInput("byte tokenizer needs vocab_size > 256 to emit BOS");
    return t;
}

Tokenizer Tokenizer::from_vocab(std::vector<std::string> entries, bool add_bos) {
    Tokenizer t;
    t.kind_ = TokenizerKind::vocab;
    t.vocab_size_ = entries.size();
    t.add_bos_ = add_bos;
    for (std::size_t i = 0; i < entries.size(); ++i) {
        const auto id = static_cast<TokenId>(i);
        if (entries[i] == "<bos>") t.bos_ = id;
        if (entries[i] == "<eos>") t.eos_ = id;
        // first occurrence wins for duplicated entries
        if (!entries[i].empty()) t.index_.try_emplace(entries[i], id);
        t.longest_ = std::max(t.longest_, entries[i].size());
    }
    t.entries_ = std::move(entries);
    if (add_bos && !t.bos_) throw InvalidInput("vocabulary has no <bos> entry");
    return t;
}

void Tokenizer::check_id(TokenId id) const {
    if (id >= vocab_size_) {
        throw InvalidToken("token id " + std::to_string(id) + " out of range for vocabulary of " +
                           std::to_string(vocab_size_));
    }
}

std::vector<TokenId> Tokenizer::encode(std::string_view text) const {
    std::vector<TokenId> ids;
    if (add_bos_) ids.push_back(*bos_);
    if (kind_ == TokenizerKind::byte) {
        for (unsigned char c : text) {
            if (c >= vocab_size_) {
                throw InvalidToken("byte " + std::to_string(c) + " does not fit a vocabulary of " +
                                   std::to_string(vocab_size_));
            }
            ids.push_back(c);
        }
        return ids;
    }
    std::size_t pos = 0;
    while (pos < text.size()) {
        std::size_t len = std::min(longest_, text.size() - pos);
        for (; len > 0; --len) {
            auto it = index_.find(std::string(text.substr(pos, len)));
            if (it != index_.end()) {
                ids.push_back(it->second);
                break;
            }
        }
        if (len == 0) {
            throw InvalidToken("no vocabulary entry matches input at byte offset " + std::to_string(pos));
        }
        pos += len;
    }
    return ids;
}

std::string Tokenizer::decode(std::span<const TokenId> ids) const {
    std::string out;
    for (TokenId id : ids) {
        check_id(id);
        if (kind_ == TokenizerKind::vocab) {
            if (id == bos_ || id == eos_) continue;
            out += entries_[id];
        } else if (id < 256) {
            out.push_back(static_cast<char>(id));
        } else if (id != bos_ && id != eos_) {
            out += "<|" + std::to_string(id) + "|>";
        }
    }
    return out;
}

std::string Tokenizer::display(TokenId id) const {
    check_id(id);
    if (kind_ == TokenizerKind::vocab) {
        const std::string& e = entries_[id];
        return e.empty() ? "<" + std::to_string(id) + ">" : escape_vocab_entry(e);
    }
    if (bos_ && id == *bos_) return "<bos>";
    if (eos_ && id == *eos_) return "<eos>";
    if (id >= 256) return "<|" + std::to_string(id) + "|>";
    if (id >= 0x20 && id < 0x7f) return std::string(1, static_cast<char>(id));
    char buf[8];
    std::snprintf(buf, sizeof(buf), "<0x%02X>", static_cast<unsigned>(id));
    return buf;
}

TokenId Tokenizer::lookup(std::string_view token) const {
    if (token.size() > 1 && token.front() == '#') {
        TokenId id = 0;
        auto [p, ec] = std::from_chars(token.data() + 1, token.data() + token.size(), id);
        if (ec != std::errc() || p != token.data() + token.size()) {
            throw InvalidToken("malformed token id '" + std::string(token) + "'");
        }
        check_id(id);
        return id;
    }
    if (kind_ == TokenizerKind::byte) {
        if (token.size() != 1) throw InvalidToken("'" + std::string(token) + "' is not a single byte token");
        const auto id = static_cast<TokenId>(static_cast<unsigned char>(token[0]));
        check_id(id);
        return id;
    }
    auto it = index_.find(std::string(token));
    if (it == index_.end()) throw InvalidToken("'" + std::string(token) + "' is not in the vocabulary");
    return it->second;
}

std::string unescape_vocab_line(std::string_view line) {
    std::string out;
    for (std::size_t i = 0; i < line.size(); ++i) {
        if (line[i] != '\\' || i + 1 == line.size()) {
            out.push_back(line[i]);
            continue;
        }
        switch (line[++i]) {
            case 'n': out.push_back('\n'); break;
            case 't': out.push_back('\t'); break;
            case 'r': out.push_back('\r'); break;
            case '\\': out.push_back('\\'); break;
            default:
                out.push_back('\\');
                out.push_back(line[i]);
        }
    }
    return out;
}

std::string escape_vocab_entry(std::string_view entry) {
    std::string out;
    for (char c : entry) {
        switch (c) {
            case '\n': out += "\\n"; break;
            case '\t': out += "\\t"; break;
            case '\r': out += "\\r"; break;
            case '\\': out += "\\\\"; break;
            default: out.push_back(c);
        }
    }
    return out;
}

}  // namespace rscope
