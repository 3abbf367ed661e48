#pragma once

#include "memat/common.hpp"

#include <filesystem>
#include <string>
#include <vector>

namespace memat {

enum class Language { la, lb };  // serialized as "L_A" / "L_B"

// Subject-overlap stratum of a record's pair: counterparts share the exact
// subject string, or differ in at least half their subject tokens.
enum class Stratum { identical, low };

struct NeighborhoodPrompt {
    std::string prompt;
    std::string subject;
    bool operator==(const NeighborhoodPrompt&) const = default;
};

struct FactRecord {
    int id = 0;
    int pair_id = 0;
    Language language = Language::la;
    std::string subject;
    std::string relation_template;  // contains one "{}" subject slot
    std::string target_true;
    std::string target_new;
    std::string efficacy_prompt;
    std::vector<std::string> paraphrase_prompts;          // exactly 2
    std::vector<NeighborhoodPrompt> neighborhood_prompts;  // exactly 10, other subjects
    Stratum stratum = Stratum::identical;

    void validate() const;
    bool operator==(const FactRecord&) const = default;
};

struct JaccardProfile {
    double identical = 1.0;
    double low = 0.0;
};

struct CorpusConfig {
    int n_pairs = 24;
    JaccardProfile jaccard_profile;
    // word-pool partition sizes
    int subject_words = 64;
    int relation_words_per_language = 96;
    int object_words_per_language = 72;
    int filler_words_per_language = 12;
    // paraphrase noise prefix length range (tokens)
    int noise_min = 0;
    int noise_max = 8;
    bool duplication_on_gender = false;
    uint64_t seed = 0;

    void validate() const;
};

// Builds n_pairs cross-lingual fact pairs. Counterparts share a pair_id and
// describe the same fact through language-disjoint relation and object words;
// subject strings are shared in the identical stratum and mutated in the low
// one. With duplication_on_gender the L_B side adds a second surface variant.
std::vector<FactRecord> generate_corpus(const CorpusConfig& cfg);

// Every word the generator may emit for this config (tokenizer coverage).
std::vector<std::string> corpus_vocabulary(const CorpusConfig& cfg);

// All strings of a corpus that a tokenizer must encode.
std::vector<std::string> corpus_texts(const std::vector<FactRecord>& records);

// |A ∩ B| / |A ∪ B| over unique tokens. Both-empty input is undefined.
double jaccard_index(const std::vector<std::string>& a, const std::vector<std::string>& b);

struct Histogram {
    std::vector<double> edges;    // 11 edges for 10 bins over [0, 1]
    std::vector<int64_t> counts;  // 10 entries
};

struct SimilarityHistograms {
    Histogram subject, relation, target;
};

// Distribution of cross-lingual token overlap per field over matched pairs.
SimilarityHistograms similarity_histogram(const std::vector<FactRecord>& records);

void save_corpus(const std::filesystem::path& path, const std::vector<FactRecord>& records);
std::vector<FactRecord> load_corpus(const std::filesystem::path& path);

std::string to_string(Language lang);
std::string to_string(Stratum stratum);
Language language_from_string(const std::string& s);
Stratum stratum_from_string(const std::string& s);

// template instantiation helper; the template must contain exactly one "{}"
std::string fill_template(const std::string& tmpl, const std::string& subject);

}  // namespace memat
