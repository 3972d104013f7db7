#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace rscope {

using TokenId = std::uint32_t;

enum class TokenizerKind { byte, vocab };

// Byte mode maps each UTF-8 byte to its value; ids 256 and 257 are BOS and
// EOS when the vocabulary is large enough to hold them. Vocab mode does a
// greedy longest-match over the entries of vocab.txt.
class Tokenizer {
public:
    static Tokenizer byte_level(std::size_t vocab_size, bool add_bos = false);
    static Tokenizer from_vocab(std::vector<std::string> entries, bool add_bos = false);

    TokenizerKind kind() const { return kind_; }
    std::size_t vocab_size() const { return vocab_size_; }
    std::optional<TokenId> bos() const { return bos_; }
    std::optional<TokenId> eos() const { return eos_; }

    // Throws InvalidToken when some input cannot be represented.
    std::vector<TokenId> encode(std::string_view text) const;
    // Throws InvalidToken for ids >= vocab_size.
    std::string decode(std::span<const TokenId> ids) const;
    // Printable label for heatmaps and graphs; never fails for valid ids.
    std::string display(TokenId id) const;

    // Resolves a user-typed token: an exact vocabulary entry, a single byte,
    // or "#<id>".
    TokenId lookup(std::string_view token) const;

private:
    TokenizerKind kind_ = TokenizerKind::byte;
    std::size_t vocab_size_ = 0;
    bool add_bos_ = false;
    std::optional<TokenId> bos_;
    std::optional<TokenId> eos_;
    std::vector<std::string> entries_;
    std::unordered_map<std::string, TokenId> index_;
    std::size_t longest_ = 0;

    void check_id(TokenId id) const;
};

// vocab.txt escapes: "\n", "\t", "\r", "\\".
std::string unescape_vocab_line(std::string_view line);
std::string escape_vocab_entry(std::string_view entry);

}  // namespace rscope
