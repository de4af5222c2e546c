#pragma once

#include <algorithm>
#include <array>
#include <string>
#include <vector>

#include "butler/common.hpp"

namespace butler {

// Character-level tokenizer built from the corpus alphabet. Id 0 is the
// reserved begin-of-text token; characters map to 1..V-1 in byte order.
class CharTokenizer {
public:
    static constexpr int kBot = 0;

    CharTokenizer() = default;

    static CharTokenizer from_corpus(const std::string& corpus) {
        std::array<bool, 256> seen{};
        for (unsigned char c : corpus) seen[c] = true;
        CharTokenizer t;
        t.id_to_char_.push_back('\0');  // placeholder slot for BOT
        for (int c = 0; c < 256; ++c) {
            if (seen[size_t(c)]) {
                t.char_to_id_[size_t(c)] = int(t.id_to_char_.size());
                t.id_to_char_.push_back(char(c));
            }
        }
        return t;
    }

    static CharTokenizer from_alphabet(const std::string& alphabet) {
        return from_corpus(alphabet);
    }

    // alphabet in id order (excluding BOT), used for checkpoint round trips
    std::string alphabet() const { return std::string(id_to_char_.begin() + 1, id_to_char_.end()); }

    int vocab_size() const { return int(id_to_char_.size()); }

    std::vector<int> tokenize(const std::string& text) const {
        std::vector<int> ids;
        ids.reserve(text.size());
        for (unsigned char c : text) {
            int id = char_to_id_[c];
            if (id == 0)
                throw VocabError("character 0x" + to_hex(c) + " not in tokenizer alphabet");
            ids.push_back(id);
        }
        return ids;
    }

    std::string detokenize(const std::vector<int>& ids) const {
        std::string out;
        out.reserve(ids.size());
        for (int id : ids) {
            if (id < 0 || id >= vocab_size())
                throw VocabError("token id " + std::to_string(id) + " outside vocabulary of " +
                                 std::to_string(vocab_size()));
            if (id == kBot) continue;  // begin-of-text renders as nothing
            out.push_back(id_to_char_[size_t(id)]);
        }
        return out;
    }

    bool knows(unsigned char c) const { return char_to_id_[c] != 0; }

private:
    static std::string to_hex(unsigned char c) {
        static const char* k = "0123456789abcdef";
        return std::string{k[c >> 4], k[c & 15]};
    }

    std::array<int, 256> char_to_id_{};  // 0 = unknown (BOT never maps from a char)
    std::vector<char> id_to_char_;
};

}  // namespace butler
