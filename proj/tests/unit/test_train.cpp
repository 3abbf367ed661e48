#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "memat/train.hpp"

#include <doctest.h>

#include <cmath>

using namespace memat;

namespace {

ModelConfig train_config() {
    ModelConfig cfg;
    cfg.n_layers = 2;
    cfg.n_heads = 2;
    cfg.d_model = 16;
    cfg.d_ff = 48;
    cfg.vocab_size = 160;
    cfg.max_seq_len = 24;
    cfg.seed = 5;
    return cfg;
}

CorpusConfig small_corpus_config() {
    CorpusConfig cfg;
    cfg.n_pairs = 3;
    cfg.jaccard_profile = {1.0, 0.0};
    cfg.subject_words = 12;
    cfg.relation_words_per_language = 8;
    cfg.object_words_per_language = 12;
    cfg.filler_words_per_language = 4;
    cfg.noise_max = 3;
    cfg.seed = 9;
    return cfg;
}

struct Fixture {
    std::vector<FactRecord> records;
    Tokenizer tok;
};

Fixture make_fixture() {
    CorpusConfig cc = small_corpus_config();
    auto records = generate_corpus(cc);
    auto texts = corpus_texts(records);
    for (const auto& w : corpus_vocabulary(cc)) texts.push_back(w);
    return {records, Tokenizer::train(texts, 160)};
}

}  // namespace

TEST_CASE("adam minimizes a simple quadratic") {
    Adam adam({0.1});
    Mat x = Mat::Constant(1, 1, 10.0);
    for (int i = 0; i < 300; ++i) {
        adam.step_begin();
        Mat g = Mat::Constant(1, 1, 2.0 * (x(0, 0) - 3.0));
        adam.update("x", x, g);
    }
    CHECK(x(0, 0) == doctest::Approx(3.0).epsilon(1e-3));
}

TEST_CASE("forward_many matches per-sequence forwards and captures heads") {
    ModelParams p = init_model(train_config());
    const std::vector<std::vector<int>> seqs = {{1, 2, 3}, {9, 8, 7, 6, 5}, {4}, {11, 12}};
    const std::vector<HeadKey> heads = {{1, 1}, {2, 2}};
    PackedForward pf = forward_many(p, seqs, nullptr, &heads, 7);  // forces several graphs
    REQUIRE(pf.probs.size() == 4);
    for (size_t i = 0; i < seqs.size(); ++i) {
        TraceRequest req;
        const int last = static_cast<int>(seqs[i].size()) - 1;
        req.head_outputs = {{1, 1, last}, {2, 2, last}};
        ForwardResult fr = forward(p, seqs[i], nullptr, &req);
        CHECK((pf.probs[i] - fr.probs).cwiseAbs().maxCoeff() < 1e-12);
        CHECK((pf.head_last[i].at({1, 1}) - fr.trace.head_outputs.at({1, 1, last}))
                  .cwiseAbs()
                  .maxCoeff() < 1e-12);
        CHECK((pf.head_last[i].at({2, 2}) - fr.trace.head_outputs.at({2, 2, last}))
                  .cwiseAbs()
                  .maxCoeff() < 1e-12);
    }
}

TEST_CASE("pretrain with zero steps leaves parameters untouched") {
    Fixture fx = make_fixture();
    ModelParams p = init_model(train_config());
    const uint64_t before = p.content_hash();
    PretrainOptions opts;
    opts.max_steps = 0;
    PretrainReport rep = pretrain(p, fx.tok, fx.records, opts);
    CHECK(p.content_hash() == before);
    CHECK(rep.steps_run == 0);
    CHECK(rep.recall >= 0.0);
}

TEST_CASE("pretraining lowers the loss and lifts recall deterministically") {
    Fixture fx = make_fixture();
    PretrainOptions opts;
    opts.max_steps = 120;
    opts.lr = 3e-3;
    opts.batch_rows = 96;
    opts.gate_interval = 40;
    opts.seed = 1;

    ModelParams p1 = init_model(train_config());
    PretrainReport r1 = pretrain(p1, fx.tok, fx.records, opts);
    CHECK(r1.final_loss < r1.initial_loss);
    CHECK(r1.recall > 0.5);

    ModelParams p2 = init_model(train_config());
    PretrainReport r2 = pretrain(p2, fx.tok, fx.records, opts);
    CHECK(p1.content_hash() == p2.content_hash());
    CHECK(r1.final_loss == r2.final_loss);

    opts.seed = 2;
    ModelParams p3 = init_model(train_config());
    pretrain(p3, fx.tok, fx.records, opts);
    CHECK(p3.content_hash() != p1.content_hash());
}

TEST_CASE("divergent training reports a training error") {
    Fixture fx = make_fixture();
    ModelParams p = init_model(train_config());
    PretrainOptions opts;
    opts.max_steps = 40;
    // layernorm keeps moderate blowups finite, so force a true overflow
    opts.lr = 1e150;
    opts.grad_clip = 0.0;  // no safety net
    opts.batch_rows = 64;
    CHECK_THROWS_AS(pretrain(p, fx.tok, fx.records, opts), TrainingError);
}

TEST_CASE("pretrain validates inputs") {
    Fixture fx = make_fixture();
    ModelParams p = init_model(train_config());
    CHECK_THROWS_AS(pretrain(p, fx.tok, {}, PretrainOptions{}), InputError);
    PretrainOptions bad;
    bad.filler_fraction = 1.0;
    CHECK_THROWS_AS(pretrain(p, fx.tok, fx.records, bad), ConfigError);
    ModelConfig tiny = train_config();
    tiny.vocab_size = 8;  // smaller than the tokenizer's vocabulary
    ModelParams q = init_model(tiny);
    CHECK_THROWS_AS(pretrain(q, fx.tok, fx.records, PretrainOptions{}), ConfigError);
}
