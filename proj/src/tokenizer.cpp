#include "memat/tokenizer.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <fstream>
#include <map>
#include <set>

namespace memat {

namespace {
constexpr const char* kSp = "<sp>";
constexpr uint32_t kVersion = 1;
}  // namespace

std::vector<std::string> split_words(const std::string& text) {
    std::vector<std::string> words;
    if (text.empty()) return words;
    size_t start = 0;
    while (true) {
        const size_t space = text.find(' ', start);
        const std::string word = text.substr(start, space == std::string::npos ? space : space - start);
        if (word.empty()) throw InputError("text has leading, trailing or repeated spaces: '" + text + "'");
        words.push_back(word);
        if (space == std::string::npos) break;
        start = space + 1;
    }
    return words;
}

Tokenizer::Tokenizer(std::vector<std::string> tokens) : tokens_(std::move(tokens)) {
    for (size_t i = 0; i < tokens_.size(); ++i) {
        const std::string& t = tokens_[i];
        if (t.empty()) throw InputError("empty token in vocabulary");
        if (!token_to_id_.emplace(t, static_cast<int>(i)).second)
            throw InputError("duplicate token '" + t + "' in vocabulary");
        if (t == kSp) sp_id_ = static_cast<int>(i);
        if (t.size() == 1) char_to_id_[t[0]] = static_cast<int>(i);
    }
    if (sp_id_ < 0) throw InputError("vocabulary lacks the <sp> separator");
}

Tokenizer Tokenizer::train(const std::vector<std::string>& texts, int vocab_size) {
    std::set<char> chars;
    std::map<std::string, int64_t> counts;
    for (const std::string& text : texts) {
        if (text.empty()) continue;
        for (const std::string& word : split_words(text)) {
            ++counts[word];
            for (char c : word) {
                if (c == ' ') continue;
                chars.insert(c);
            }
        }
    }
    std::vector<std::string> tokens;
    tokens.emplace_back(kSp);
    for (char c : chars) tokens.emplace_back(1, c);
    if (static_cast<int>(tokens.size()) > vocab_size)
        throw InputError("vocab_size " + std::to_string(vocab_size) + " cannot hold the separator and " +
                         std::to_string(chars.size()) + " characters");

    std::vector<std::pair<std::string, int64_t>> by_freq(counts.begin(), counts.end());
    std::stable_sort(by_freq.begin(), by_freq.end(), [](const auto& a, const auto& b) {
        if (a.second != b.second) return a.second > b.second;
        return a.first < b.first;
    });
    std::set<std::string> seen(tokens.begin(), tokens.end());
    for (const auto& [word, count] : by_freq) {
        if (static_cast<int>(tokens.size()) >= vocab_size) break;
        if (seen.insert(word).second) tokens.push_back(word);
    }
    return Tokenizer(std::move(tokens));
}

int Tokenizer::word_id(const std::string& word) const {
    auto it = token_to_id_.find(word);
    if (it == token_to_id_.end()) throw InputError("word '" + word + "' is not a vocabulary token");
    return it->second;
}

bool Tokenizer::has_word(const std::string& word) const { return token_to_id_.count(word) > 0; }

int Tokenizer::word_cost(const std::string& word) const {
    if (has_word(word)) return 1;
    return static_cast<int>(word.size()) + 2;
}

std::vector<int> Tokenizer::encode(const std::string& text) const {
    std::vector<int> ids;
    if (text.empty()) return ids;
    for (const std::string& word : split_words(text)) {
        auto it = token_to_id_.find(word);
        if (it != token_to_id_.end()) {
            ids.push_back(it->second);
            continue;
        }
        ids.push_back(sp_id_);
        for (char c : word) {
            auto ct = char_to_id_.find(c);
            if (ct == char_to_id_.end())
                throw InputError("cannot encode character '" + std::string(1, c) + "' in word '" + word + "'");
            ids.push_back(ct->second);
        }
        ids.push_back(sp_id_);
    }
    return ids;
}

std::string Tokenizer::decode(const std::vector<int>& ids) const {
    std::string out;
    bool spelling = false;
    for (int id : ids) {
        if (id < 0 || id >= vocab()) throw InputError("token id " + std::to_string(id) + " out of range");
        if (id == sp_id_) {
            if (!spelling && !out.empty()) out.push_back(' ');
            spelling = !spelling;
            continue;
        }
        if (!spelling && !out.empty()) out.push_back(' ');
        out += tokens_[static_cast<size_t>(id)];
    }
    if (spelling) throw InputError("token stream ends inside a spelled word");
    return out;
}

void Tokenizer::save(const std::filesystem::path& path) const {
    nlohmann::ordered_json j;
    j["version"] = kVersion;
    j["tokens"] = tokens_;
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw IoError("cannot open " + path.string() + " for writing");
    out << j.dump(2) << '\n';
    if (!out) throw IoError("write failed for " + path.string());
}

Tokenizer Tokenizer::load(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open " + path.string());
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& e) {
        throw IoError(path.string() + " is not valid JSON: " + e.what());
    }
    if (!j.contains("version") || !j.contains("tokens"))
        throw IoError(path.string() + " lacks tokenizer fields");
    if (j["version"].get<uint32_t>() != kVersion)
        throw IoError("unsupported tokenizer version in " + path.string());
    return Tokenizer(j["tokens"].get<std::vector<std::string>>());
}

}  // namespace memat
