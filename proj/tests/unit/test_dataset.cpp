#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "memat/dataset.hpp"
#include "memat/tokenizer.hpp"

#include <doctest.h>

#include <filesystem>
#include <set>

using namespace memat;
namespace fs = std::filesystem;

// ---------------------------------------------------------------- tokenizer

TEST_CASE("tokenizer round trips plain and fallback text") {
    Tokenizer tok = Tokenizer::train({"s1 r1 o1", "s1 r2 o2", "xy r1 o1"}, 64);
    for (const std::string text :
         {"s1 r1 o1", "xy r2", "s1", "", "xxx", "r1 xxx r2", "yy xx", "s1 rrrr", "x s1", "s1 x"}) {
        CAPTURE(text);
        CHECK(tok.decode(tok.encode(text)) == text);
    }
    // known words cost one token
    CHECK(tok.encode("s1 r1 o1").size() == 3);
    // unknown words are spelled between separators
    CHECK(tok.encode("xxx").size() == 5);
    // characters never seen in training cannot fall back
    CHECK_THROWS_AS(tok.encode("zzz"), InputError);
}

TEST_CASE("tokenizer vocabulary is deterministic and frequency-ordered") {
    const std::vector<std::string> texts = {"b a", "b c", "b a"};
    Tokenizer t1 = Tokenizer::train(texts, 32), t2 = Tokenizer::train(texts, 32);
    CHECK(t1.tokens() == t2.tokens());
    // order: <sp>, chars a/b/c, then words by count (all single chars here,
    // already present)
    CHECK(t1.tokens()[0] == "<sp>");
    Tokenizer t3 = Tokenizer::train({"bb aa", "bb cc", "bb aa"}, 32);
    CHECK(t3.word_id("bb") < t3.word_id("aa"));
    CHECK(t3.word_id("aa") < t3.word_id("cc"));  // tie broken lexicographically
}

TEST_CASE("tokenizer rejects what it cannot reproduce") {
    Tokenizer tok = Tokenizer::train({"ab cd"}, 32);
    CHECK_THROWS_AS(tok.encode("ab  cd"), InputError);   // double space
    CHECK_THROWS_AS(tok.encode(" ab"), InputError);      // leading space
    CHECK_THROWS_AS(tok.encode("ab "), InputError);      // trailing space
    CHECK_THROWS_AS(tok.encode("xyz"), InputError);      // 'x','y','z' unseen
    CHECK_THROWS_AS(tok.decode({999}), InputError);
    CHECK_THROWS_AS(Tokenizer::train({"abcdefgh"}, 4), InputError);  // vocab too small
}

TEST_CASE("tokenizer truncates the word list at vocab_size") {
    // 1 separator + 5 chars, vocab 7 leaves room for one word: the most
    // frequent one wins and the rest fall back to spelling
    Tokenizer tok = Tokenizer::train({"ab ab cd ce"}, 7);
    CHECK(tok.vocab() == 7);
    CHECK(tok.has_word("ab"));
    CHECK(!tok.has_word("cd"));
    CHECK(tok.decode(tok.encode("ab cd")) == "ab cd");  // falls back for cd
}

TEST_CASE("tokenizer file round trip") {
    Tokenizer tok = Tokenizer::train({"s1 r1 o1 longword"}, 64);
    fs::path file = fs::temp_directory_path() / "tok_test.json";
    tok.save(file);
    Tokenizer loaded = Tokenizer::load(file);
    CHECK(loaded.tokens() == tok.tokens());
    CHECK(loaded.decode(loaded.encode("longword s1")) == "longword s1");
    fs::remove(file);
    CHECK_THROWS_AS(Tokenizer::load(file), IoError);
}

// ---------------------------------------------------------------- jaccard

TEST_CASE("jaccard index") {
    CHECK(jaccard_index({"a", "b"}, {"a", "b"}) == 1.0);
    CHECK(jaccard_index({"a"}, {"b"}) == 0.0);
    CHECK(jaccard_index({"t1", "t2"}, {"t2", "t3"}) == doctest::Approx(1.0 / 3.0));
    CHECK(jaccard_index({"a", "a", "b"}, {"b", "a"}) == 1.0);  // set semantics
    CHECK(jaccard_index({"a"}, {}) == 0.0);
    CHECK_THROWS_AS(jaccard_index({}, {}), InputError);
}

// ---------------------------------------------------------------- generation

namespace {

CorpusConfig test_config() {
    CorpusConfig cfg;
    cfg.n_pairs = 12;
    cfg.jaccard_profile = {0.5, 0.5};
    cfg.subject_words = 24;
    cfg.relation_words_per_language = 24;
    cfg.object_words_per_language = 36;
    cfg.filler_words_per_language = 6;
    cfg.seed = 3;
    return cfg;
}

}  // namespace

TEST_CASE("generated corpus satisfies the structural contract") {
    const auto records = generate_corpus(test_config());
    REQUIRE(records.size() == 24);
    std::set<int> ids;
    for (const auto& r : records) {
        r.validate();
        CHECK(ids.insert(r.id).second);
    }
    // each pair: exactly one record per language, same stratum, matched targets
    for (int pair = 0; pair < 12; ++pair) {
        const FactRecord *ra = nullptr, *rb = nullptr;
        for (const auto& r : records)
            if (r.pair_id == pair) (r.language == Language::la ? ra : rb) = &r;
        REQUIRE(ra);
        REQUIRE(rb);
        CHECK(ra->stratum == rb->stratum);
        const double j = jaccard_index(split_words(ra->subject), split_words(rb->subject));
        if (ra->stratum == Stratum::identical) {
            CHECK(j == 1.0);
            CHECK(ra->subject == rb->subject);
        } else {
            CHECK(j <= 0.5);
        }
        // language-disjoint relation and object words
        for (const auto& w : split_words(ra->target_true)) CHECK(w.starts_with("oa"));
        for (const auto& w : split_words(rb->target_true)) CHECK(w.starts_with("ob"));
    }
}

TEST_CASE("strata counts follow the profile") {
    CorpusConfig cfg = test_config();
    cfg.n_pairs = 400;
    cfg.subject_words = 96;
    cfg.relation_words_per_language = 800;
    cfg.object_words_per_language = 1200;
    const auto records = generate_corpus(cfg);
    int identical = 0, low = 0;
    for (const auto& r : records)
        if (r.language == Language::la) (r.stratum == Stratum::identical ? identical : low)++;
    CHECK(identical + low == 400);
    CHECK(identical > 400 * 0.45 - 20);
    CHECK(identical < 400 * 0.55 + 20);
}

TEST_CASE("all-identical profile and empty corpus edge cases") {
    CorpusConfig cfg = test_config();
    cfg.jaccard_profile = {1.0, 0.0};
    for (const auto& r : generate_corpus(cfg)) CHECK(r.stratum == Stratum::identical);

    cfg.n_pairs = 0;
    CHECK(generate_corpus(cfg).empty());

    cfg.n_pairs = 1;
    cfg.jaccard_profile = {1.5, -0.5};
    CHECK_THROWS_AS(generate_corpus(cfg), ConfigError);
}

TEST_CASE("generation is deterministic and seed-sensitive") {
    const auto a = generate_corpus(test_config());
    const auto b = generate_corpus(test_config());
    CHECK(a == b);
    CorpusConfig other = test_config();
    other.seed = 4;
    CHECK(generate_corpus(other) != a);
}

TEST_CASE("pool exhaustion raises a generation error") {
    CorpusConfig cfg = test_config();
    cfg.relation_words_per_language = 4;  // 12 pairs need 24
    CHECK_THROWS_AS(generate_corpus(cfg), GenerationError);
    cfg = test_config();
    cfg.object_words_per_language = 3;
    CHECK_THROWS_AS(generate_corpus(cfg), GenerationError);
}

TEST_CASE("gender duplication adds a second L_B surface") {
    CorpusConfig cfg = test_config();
    cfg.n_pairs = 4;
    cfg.duplication_on_gender = true;
    const auto records = generate_corpus(cfg);
    REQUIRE(records.size() == 12);
    for (int pair = 0; pair < 4; ++pair) {
        std::vector<const FactRecord*> lb;
        for (const auto& r : records)
            if (r.pair_id == pair && r.language == Language::lb) lb.push_back(&r);
        REQUIRE(lb.size() == 2);
        CHECK(lb[0]->subject == lb[1]->subject);
        CHECK(lb[0]->target_new == lb[1]->target_new);
        CHECK(lb[0]->relation_template != lb[1]->relation_template);
    }
}

TEST_CASE("neighborhood subjects never collide with main subjects") {
    const auto records = generate_corpus(test_config());
    std::set<std::string> mains;
    for (const auto& r : records) mains.insert(r.subject);
    for (const auto& r : records)
        for (const auto& np : r.neighborhood_prompts) CHECK(!mains.count(np.subject));
}

TEST_CASE("paraphrases differ from the efficacy prompt and carry noise") {
    CorpusConfig cfg = test_config();
    cfg.noise_min = 2;
    cfg.noise_max = 5;
    for (const auto& r : generate_corpus(cfg)) {
        for (const auto& p : r.paraphrase_prompts) {
            CHECK(p != r.efficacy_prompt);
            const auto words = split_words(p);
            const auto subject_words = split_words(r.subject);
            // noise prefix length within range: subject appears after >= 2 words
            size_t at = 0;
            while (at < words.size() && words[at] != subject_words[0]) ++at;
            CHECK(at >= 2);
            CHECK(at <= 5);
        }
    }
}

TEST_CASE("tokenizer covers a generated corpus without fallback") {
    CorpusConfig cfg = test_config();
    std::vector<std::string> texts = corpus_texts(generate_corpus(cfg));
    std::vector<std::string> vocab_line;
    for (const auto& w : corpus_vocabulary(cfg)) vocab_line.push_back(w);
    texts.push_back("is a gb");
    for (const auto& w : vocab_line) texts.push_back(w);
    Tokenizer tok = Tokenizer::train(texts, 512);
    for (const auto& r : generate_corpus(cfg)) {
        for (const auto& w : split_words(r.target_true)) CHECK(tok.word_cost(w) == 1);
        for (const auto& w : split_words(r.target_new)) CHECK(tok.word_cost(w) == 1);
        CHECK(tok.decode(tok.encode(r.efficacy_prompt)) == r.efficacy_prompt);
        CHECK(tok.encode(r.efficacy_prompt).size() == split_words(r.efficacy_prompt).size());
    }
}

// ---------------------------------------------------------------- histograms

TEST_CASE("similarity histogram strata recomputation") {
    CorpusConfig cfg = test_config();
    cfg.n_pairs = 40;
    cfg.subject_words = 48;
    cfg.relation_words_per_language = 80;
    cfg.object_words_per_language = 120;
    const auto records = generate_corpus(cfg);
    const SimilarityHistograms h = similarity_histogram(records);

    // oracle: recount strata directly
    int64_t identical = 0, low = 0;
    for (const auto& r : records)
        if (r.language == Language::la) (r.stratum == Stratum::identical ? identical : low)++;
    CHECK(h.subject.counts[9] == identical);  // J=1 lands in the last bin
    int64_t low_mass = 0;
    for (int b = 0; b <= 5; ++b) low_mass += h.subject.counts[static_cast<size_t>(b)];
    CHECK(low_mass == low);
    // relation and target words are disjoint across languages
    CHECK(h.relation.counts[0] == identical + low);
    CHECK(h.target.counts[0] == identical + low);
}

TEST_CASE("similarity histogram on hand-built pairs") {
    const auto records = generate_corpus(test_config());
    SimilarityHistograms h = similarity_histogram(records);
    int64_t total = 0;
    for (auto c : h.subject.counts) total += c;
    CHECK(total == 12);
    CHECK_THROWS_AS(similarity_histogram({}), InputError);
    // single-language corpus has no matched pairs
    std::vector<FactRecord> only_a;
    for (const auto& r : records)
        if (r.language == Language::la) only_a.push_back(r);
    CHECK_THROWS_AS(similarity_histogram(only_a), InputError);
}

// ---------------------------------------------------------------- file io

TEST_CASE("corpus file round trip is field exact") {
    CorpusConfig cfg = test_config();
    cfg.duplication_on_gender = true;
    const auto records = generate_corpus(cfg);
    fs::path file = fs::temp_directory_path() / "corpus_test.json";
    save_corpus(file, records);
    const auto loaded = load_corpus(file);
    CHECK(loaded == records);
    fs::remove(file);
    CHECK_THROWS_AS(load_corpus(file), IoError);
}

TEST_CASE("load_corpus rejects malformed files") {
    fs::path file = fs::temp_directory_path() / "corpus_bad.json";
    {
        std::ofstream out(file);
        out << "{\"not\": \"an array\"}";
    }
    CHECK_THROWS_AS(load_corpus(file), IoError);
    {
        std::ofstream out(file, std::ios::trunc);
        out << "[{\"id\": 1}]";
    }
    CHECK_THROWS_AS(load_corpus(file), IoError);
    fs::remove(file);
}
