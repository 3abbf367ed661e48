#pragma once

#include "memat/common.hpp"

#include <filesystem>
#include <string>
#include <unordered_map>
#include <vector>

namespace memat {

// Word-level vocabulary with a character fallback. Unknown words are spelled
// out between <sp> brackets, so decode(encode(x)) == x holds for any text the
// character set covers. Texts are single-space separated words.
class Tokenizer {
public:
    // Deterministic vocabulary: <sp>, then every character seen, then words by
    // descending count (ties lexicographic) until vocab_size is reached.
    static Tokenizer train(const std::vector<std::string>& texts, int vocab_size);

    std::vector<int> encode(const std::string& text) const;
    std::string decode(const std::vector<int>& ids) const;

    int vocab() const { return static_cast<int>(tokens_.size()); }
    const std::vector<std::string>& tokens() const { return tokens_; }
    int sp_id() const { return sp_id_; }

    // id of a word present as a single token; InputError when absent
    int word_id(const std::string& word) const;
    bool has_word(const std::string& word) const;

    // number of tokens encode() would produce for one word
    int word_cost(const std::string& word) const;

    void save(const std::filesystem::path& path) const;
    static Tokenizer load(const std::filesystem::path& path);

private:
    explicit Tokenizer(std::vector<std::string> tokens);
    std::vector<std::string> tokens_;
    std::unordered_map<std::string, int> token_to_id_;
    std::unordered_map<char, int> char_to_id_;
    int sp_id_ = -1;
};

// Splits on single spaces; empty fragments (leading, trailing or doubled
// spaces) raise InputError since decode cannot reproduce them.
std::vector<std::string> split_words(const std::string& text);

}  // namespace memat
