#include "memat/corrections.hpp"

#include "memat/checkpoint.hpp"
#include "memat/train.hpp"

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>

using namespace memat;

namespace {

struct Fixture {
    std::vector<FactRecord> la;
    std::vector<FactRecord> lb;
    Tokenizer tok;
    ModelParams params;
};

Fixture make_fixture() {
    CorpusConfig cc;
    cc.n_pairs = 12;
    cc.subject_words = 24;
    cc.relation_words_per_language = 24;
    cc.object_words_per_language = 36;
    cc.filler_words_per_language = 6;
    cc.noise_min = 0;
    cc.noise_max = 2;
    cc.seed = 3;
    std::vector<FactRecord> records = generate_corpus(cc);
    Tokenizer tok = Tokenizer::train(corpus_vocabulary(cc), 512);

    ModelConfig mc;
    mc.n_layers = 4;
    mc.n_heads = 4;
    mc.d_model = 32;
    mc.d_ff = 64;
    mc.vocab_size = tok.vocab();
    mc.max_seq_len = 48;
    mc.seed = 21;

    Fixture f{{}, {}, std::move(tok), init_model(mc)};
    for (const FactRecord& r : records)
        (r.language == Language::la ? f.la : f.lb).push_back(r);
    return f;
}

const Fixture& fix() {
    static Fixture f = make_fixture();
    return f;
}

MematConfig tiny_config(int k, int r) {
    MematConfig cfg;
    cfg.k = k;
    cfg.r_prefixes = r;
    cfg.max_epochs = 2;
    cfg.kl_template = fix().la[0].relation_template;
    return cfg;
}

std::vector<HeadKey> small_psi() { return {HeadKey{1, 2}, HeadKey{2, 1}, HeadKey{3, 4}}; }

std::vector<Vec> zero_omegas(size_t n) {
    return std::vector<Vec>(n, Vec::Zero(fix().params.config.head_dim()));
}

PrefixSet empty_prefixes(size_t n_records, int r) {
    return PrefixSet(n_records, std::vector<std::vector<int>>(static_cast<size_t>(r)));
}

}  // namespace

TEST_CASE("config validation rejects bad settings") {
    MematConfig cfg;
    CHECK_NOTHROW(cfg.validate());
    auto broken = [&](auto&& mutate) {
        MematConfig c;
        mutate(c);
        CHECK_THROWS_AS(c.validate(), ConfigError);
    };
    broken([](MematConfig& c) { c.k = 0; });
    broken([](MematConfig& c) { c.lambda_omega = -1.0; });
    broken([](MematConfig& c) { c.r_prefixes = -1; });
    broken([](MematConfig& c) { c.adam_lr = 0.0; });
    broken([](MematConfig& c) { c.adam_beta1 = 1.0; });
    broken([](MematConfig& c) { c.adam_beta2 = -0.1; });
    broken([](MematConfig& c) { c.adam_eps = 0.0; });
    broken([](MematConfig& c) { c.batch_size = 0; });
    broken([](MematConfig& c) { c.grad_accum = 0; });
    broken([](MematConfig& c) { c.max_epochs = 0; });
    broken([](MematConfig& c) { c.kl_template = "no slot"; });
}

TEST_CASE("sampled prefixes are keyed to the record, not its position") {
    const auto& f = fix();
    std::vector<FactRecord> subset(f.la.begin(), f.la.begin() + 5);
    const PrefixSet a = make_correction_prefixes(f.params, subset, 3, 17);
    REQUIRE(a.size() == 5);
    for (const auto& per_record : a) {
        REQUIRE(per_record.size() == 3);
        for (const auto& prefix : per_record) {
            CHECK(prefix.size() >= 2);
            CHECK(prefix.size() <= 10);
            for (int t : prefix) {
                CHECK(t >= 0);
                CHECK(t < f.params.config.vocab_size);
            }
        }
    }
    std::vector<FactRecord> reversed(subset.rbegin(), subset.rend());
    const PrefixSet b = make_correction_prefixes(f.params, reversed, 3, 17);
    for (size_t i = 0; i < subset.size(); ++i) CHECK(a[i] == b[subset.size() - 1 - i]);
    const PrefixSet c = make_correction_prefixes(f.params, subset, 3, 18);
    CHECK(a != c);
}

TEST_CASE("with a single empty prefix the recall term is the plain target loss") {
    const auto& f = fix();
    std::vector<FactRecord> subset(f.la.begin(), f.la.begin() + 4);
    MematConfig cfg = tiny_config(3, 1);
    const PrefixSet prefixes = empty_prefixes(subset.size(), 1);
    auto [loss, grads] = corrections_loss_grad(f.params, f.tok, subset, small_psi(),
                                               zero_omegas(3), cfg, prefixes);
    REQUIRE(grads.size() == 3);
    double expected = 0.0;
    for (const FactRecord& rec : subset) {
        const auto prompt = f.tok.encode(rec.efficacy_prompt);
        const auto target = f.tok.encode(rec.target_new);
        expected -= sequence_logprob(f.params, prompt, target);
    }
    expected /= static_cast<double>(subset.size());
    CHECK(loss == doctest::Approx(expected).epsilon(1e-9));
}

TEST_CASE("the held-prompt divergence vanishes at zero offsets") {
    const auto& f = fix();
    std::vector<FactRecord> subset(f.la.begin(), f.la.begin() + 4);
    MematConfig cfg = tiny_config(3, 0);
    cfg.lambda_omega = 0.0;  // isolate the divergence term
    const PrefixSet prefixes = empty_prefixes(subset.size(), 0);
    auto [loss, grads] = corrections_loss_grad(f.params, f.tok, subset, small_psi(),
                                               zero_omegas(3), cfg, prefixes);
    CHECK(loss == 0.0);
    for (const Vec& g : grads) CHECK(g.norm() < 1e-10);

    std::vector<Vec> shifted = zero_omegas(3);
    Rng rng(91);
    for (Vec& w : shifted)
        for (Eigen::Index i = 0; i < w.size(); ++i) w(i) = 0.5 * rng.normal();
    auto [loss2, grads2] = corrections_loss_grad(f.params, f.tok, subset, small_psi(),
                                                 shifted, cfg, prefixes);
    (void)grads2;
    CHECK(loss2 > 0.0);
}

TEST_CASE("analytic gradients match central differences") {
    const auto& f = fix();
    std::vector<FactRecord> subset(f.la.begin(), f.la.begin() + 3);
    MematConfig cfg = tiny_config(3, 2);
    const auto psi = small_psi();
    const PrefixSet prefixes = make_correction_prefixes(f.params, subset, 2, 23);
    std::vector<Vec> omegas = zero_omegas(3);
    Rng rng(37);
    for (Vec& w : omegas)
        for (Eigen::Index i = 0; i < w.size(); ++i) w(i) = 0.05 * rng.normal();

    const auto [loss, grads] =
        corrections_loss_grad(f.params, f.tok, subset, psi, omegas, cfg, prefixes);
    (void)loss;
    const double eps = 1e-5;
    for (size_t p = 0; p < psi.size(); ++p) {
        Vec fd = Vec::Zero(omegas[p].size());
        for (Eigen::Index i = 0; i < omegas[p].size(); ++i) {
            std::vector<Vec> hi = omegas, lo = omegas;
            hi[p](i) += eps;
            lo[p](i) -= eps;
            const double up =
                corrections_loss_grad(f.params, f.tok, subset, psi, hi, cfg, prefixes).first;
            const double dn =
                corrections_loss_grad(f.params, f.tok, subset, psi, lo, cfg, prefixes).first;
            fd(i) = (up - dn) / (2.0 * eps);
        }
        CHECK((fd - grads[p]).norm() <= 1e-4 * std::max(grads[p].norm(), 1e-8));
    }
}

TEST_CASE("a growing penalty weight drives the offsets toward zero") {
    const auto& f = fix();
    std::vector<FactRecord> subset(f.la.begin(), f.la.begin() + 6);
    const std::vector<HeadKey> psi = {HeadKey{2, 2}, HeadKey{3, 1}};
    std::vector<double> norms;
    for (double lambda : {1.0, 100.0, 1e6}) {
        MematConfig cfg = tiny_config(2, 1);
        cfg.lambda_omega = lambda;
        cfg.adam_lr = 1e-5;
        cfg.max_epochs = 100;  // long enough for each run to settle at its equilibrium
        const HeadCorrectionSet set =
            optimize_corrections(f.params, f.tok, subset, psi, cfg, 29);
        double total = 0.0;
        for (const Vec& w : set.omegas) total += w.norm();
        norms.push_back(total);
    }
    CHECK(norms[0] >= norms[1]);
    CHECK(norms[1] >= norms[2]);

    // typical activation scale at the selected heads
    std::vector<std::vector<int>> prompts;
    for (const FactRecord& rec : subset) prompts.push_back(f.tok.encode(rec.efficacy_prompt));
    const PackedForward packed = forward_many(f.params, prompts, nullptr, &psi);
    double head_scale = 0.0;
    for (const auto& per_seq : packed.head_last)
        for (const auto& [key, vec] : per_seq) head_scale += vec.norm();
    head_scale /= static_cast<double>(packed.head_last.size() * psi.size());
    CHECK(norms[2] / 2.0 < 1e-3 * head_scale);
}

// the full pipeline at small scale: pretrained model, edited facts, then
// corrections trained on the second-language prompts of the same facts
TEST_CASE("training reduces the mean loss on fifty records") {
    CorpusConfig cc;
    cc.n_pairs = 50;
    cc.subject_words = 140;
    cc.relation_words_per_language = 200;
    cc.object_words_per_language = 150;
    cc.filler_words_per_language = 12;
    cc.noise_min = 0;
    cc.noise_max = 2;
    cc.seed = 7;
    std::vector<FactRecord> records = generate_corpus(cc);
    std::vector<FactRecord> la, lb;
    for (const FactRecord& r : records)
        (r.language == Language::la ? la : lb).push_back(r);
    REQUIRE(la.size() == 50);
    Tokenizer tok = Tokenizer::train(corpus_vocabulary(cc), 1024);

    ModelConfig mc;
    mc.n_layers = 4;
    mc.n_heads = 4;
    mc.d_model = 32;
    mc.d_ff = 64;
    mc.vocab_size = tok.vocab();
    mc.max_seq_len = 48;
    mc.seed = 33;
    ModelParams params = init_model(mc);

    PretrainOptions po;
    po.max_steps = 300;
    po.lr = 3e-3;
    po.batch_rows = 192;
    po.recall_gate = 0.85;
    po.seed = 1;
    const PretrainReport rep = pretrain(params, tok, records, po);
    REQUIRE(rep.final_loss < rep.initial_loss);

    EditConfig ec;
    ec.critical_layers = {2, 3};
    ec.key_prefix_count = 2;
    ec.covariance_sample_count = 400;
    const KeyBank bank =
        build_key_bank(params, tok, corpus_texts(records), {2, 3}, 400, 77);
    const auto [edited, delta] = apply_edit(params, tok, la, bank, ec, 5);

    MematConfig cfg;
    cfg.k = 4;
    cfg.r_prefixes = 2;
    cfg.lambda_omega = 1.0;  // the toy heads are small, so give them room to move
    cfg.grad_accum = 1;
    cfg.kl_template = lb[0].relation_template;
    const std::vector<HeadKey> psi = {HeadKey{3, 1}, HeadKey{3, 2}, HeadKey{3, 3},
                                      HeadKey{3, 4}};
    const HeadCorrectionSet set = optimize_corrections(edited, tok, lb, psi, cfg, 41);

    REQUIRE(set.epoch_losses.size() == 10);
    CHECK(set.epoch_losses.back() < set.epoch_losses.front());
    CHECK(set.positions == psi);
    CHECK(set.record_ids.size() == 50);
    CHECK(set.language_probe == "L_B");
    CHECK(set.lambda_omega == 1.0);
    CHECK(set.r_prefixes == 2);
    CHECK(set.epochs == 10);
    for (const Vec& w : set.omegas) CHECK(w.norm() > 0.0);
}

TEST_CASE("optimization is deterministic in the seed") {
    const auto& f = fix();
    std::vector<FactRecord> subset(f.la.begin(), f.la.begin() + 4);
    MematConfig cfg = tiny_config(3, 1);
    const auto a = optimize_corrections(f.params, f.tok, subset, small_psi(), cfg, 59);
    const auto b = optimize_corrections(f.params, f.tok, subset, small_psi(), cfg, 59);
    for (size_t p = 0; p < a.omegas.size(); ++p)
        CHECK((a.omegas[p] - b.omegas[p]).norm() == 0.0);
    CHECK(a.epoch_losses == b.epoch_losses);
    const auto c = optimize_corrections(f.params, f.tok, subset, small_psi(), cfg, 60);
    CHECK(a.epoch_losses != c.epoch_losses);
}

TEST_CASE("a poisoned model surfaces as a training error") {
    const auto& f = fix();
    ModelParams broken = f.params;
    broken.layers[0].w_in(0, 0) = std::numeric_limits<double>::quiet_NaN();
    std::vector<FactRecord> subset(f.la.begin(), f.la.begin() + 3);
    MematConfig cfg = tiny_config(3, 1);
    cfg.lambda_omega = 0.0;  // norms would trip on NaN before the loss does
    CHECK_THROWS_AS(optimize_corrections(broken, f.tok, subset, small_psi(), cfg, 5),
                    TrainingError);
}

TEST_CASE("optimization rejects malformed inputs") {
    const auto& f = fix();
    std::vector<FactRecord> subset(f.la.begin(), f.la.begin() + 3);
    MematConfig cfg = tiny_config(3, 1);
    CHECK_THROWS_AS(optimize_corrections(f.params, f.tok, subset, {}, cfg, 1), InputError);
    CHECK_THROWS_AS(
        optimize_corrections(f.params, f.tok, subset, {HeadKey{1, 1}}, cfg, 1),
        InputError);
    CHECK_THROWS_AS(optimize_corrections(f.params, f.tok, subset,
                                         {HeadKey{1, 1}, HeadKey{1, 1}, HeadKey{2, 2}}, cfg, 1),
                    InputError);
    CHECK_THROWS_AS(optimize_corrections(f.params, f.tok, subset,
                                         {HeadKey{1, 1}, HeadKey{9, 1}, HeadKey{2, 2}}, cfg, 1),
                    InputError);
    CHECK_THROWS_AS(optimize_corrections(f.params, f.tok, {}, small_psi(), cfg, 1), InputError);
    const PrefixSet wrong(2, std::vector<std::vector<int>>(1));
    CHECK_THROWS_AS(optimize_corrections(f.params, f.tok, subset, small_psi(), cfg, 1, &wrong),
                    InputError);
    CHECK_THROWS_AS(corrections_loss_grad(f.params, f.tok, subset, small_psi(),
                                          zero_omegas(2), cfg, empty_prefixes(3, 1)),
                    InputError);
    std::vector<Vec> bad(3, Vec::Zero(5));
    CHECK_THROWS_AS(
        corrections_loss_grad(f.params, f.tok, subset, small_psi(), bad, cfg,
                              empty_prefixes(3, 1)),
        InputError);
}

TEST_CASE("corrections apply as a removable patch") {
    const auto& f = fix();
    const std::vector<int> toks = f.tok.encode(f.la[0].efficacy_prompt);
    const Mat base = forward(f.params, toks).probs;

    HeadCorrectionSet zeros;
    zeros.positions = small_psi();
    zeros.omegas = zero_omegas(3);
    const HeadPatch zero_patch = apply_corrections(f.params, zeros);
    CHECK((forward(f.params, toks, &zero_patch).probs - base).norm() == 0.0);

    HeadCorrectionSet set = zeros;
    Rng rng(71);
    for (Vec& w : set.omegas)
        for (Eigen::Index i = 0; i < w.size(); ++i) w(i) = rng.normal();
    const HeadPatch patch = apply_corrections(f.params, set);
    CHECK((forward(f.params, toks, &patch).probs - base).norm() > 0.0);
    // removing the patch restores the original outputs bit for bit
    CHECK((forward(f.params, toks).probs - base).norm() == 0.0);
}

TEST_CASE("a patched head shifts the residual by omega through its projection") {
    const auto& f = fix();
    const std::vector<int> toks = f.tok.encode(f.la[1].efficacy_prompt);
    const int pos = static_cast<int>(toks.size()) - 1;

    HeadCorrectionSet set;
    set.positions = {HeadKey{2, 3}};
    Vec omega(f.params.config.head_dim());
    Rng rng(83);
    for (Eigen::Index i = 0; i < omega.size(); ++i) omega(i) = rng.normal();
    set.omegas = {omega};
    const HeadPatch patch = apply_corrections(f.params, set);

    TraceRequest req;
    req.residuals = {{1, pos}, {2, pos}};
    const Trace plain = forward(f.params, toks, nullptr, &req).trace;
    const Trace patched = forward(f.params, toks, &patch, &req).trace;

    CHECK((patched.residuals.at({1, pos}) - plain.residuals.at({1, pos})).norm() == 0.0);
    const Vec expected = omega * f.params.layers[1].w_o[2];
    const Vec got = patched.residuals.at({2, pos}) - plain.residuals.at({2, pos});
    CHECK((got - expected).norm() == doctest::Approx(0.0).epsilon(1e-12));
}

TEST_CASE("the averaging baseline scales the truthful mean") {
    const auto& f = fix();
    const ProbeDataset ds = collect_probe_data(f.params, f.tok, f.lb, false, 9);
    const auto psi = small_psi();

    const HeadCorrectionSet zero = iti_baseline(f.params, ds, psi, 0.0);
    for (const Vec& w : zero.omegas) CHECK(w.norm() == 0.0);

    const HeadCorrectionSet one = iti_baseline(f.params, ds, psi, 1.0);
    const HeadCorrectionSet two = iti_baseline(f.params, ds, psi, 2.0);
    for (size_t p = 0; p < psi.size(); ++p) {
        Vec mean = Vec::Zero(ds.head_dim);
        int count = 0;
        const Mat& acts =
            ds.activations[static_cast<size_t>(ds.head_index(psi[p].layer, psi[p].head))];
        for (size_t i = 0; i < ds.labels.size(); ++i)
            if (ds.labels[i] == 1) {
                mean += acts.row(static_cast<Eigen::Index>(i));
                ++count;
            }
        mean /= static_cast<double>(count);
        CHECK((one.omegas[p] - mean).norm() == doctest::Approx(0.0).epsilon(1e-12));
        CHECK((two.omegas[p] - 2.0 * one.omegas[p]).norm() == 0.0);
    }
    CHECK(one.record_ids.size() == f.lb.size());

    ProbeDataset hostile = ds;
    std::fill(hostile.labels.begin(), hostile.labels.end(), 0);
    CHECK_THROWS_AS(iti_baseline(f.params, hostile, psi, 1.0), InputError);
    ProbeDataset narrow = ds;
    narrow.head_dim = 4;
    CHECK_THROWS_AS(iti_baseline(f.params, narrow, psi, 1.0), InputError);
}

TEST_CASE("recycling requires disjoint facts unless overridden") {
    const auto& f = fix();
    std::vector<FactRecord> train(f.la.begin(), f.la.begin() + 4);
    MematConfig cfg = tiny_config(2, 1);
    cfg.max_epochs = 1;
    const std::vector<HeadKey> psi = {HeadKey{2, 2}, HeadKey{3, 1}};
    const HeadCorrectionSet set = optimize_corrections(f.params, f.tok, train, psi, cfg, 3);

    EditConfig ec;
    ec.critical_layers = {2, 3};
    ec.key_prefix_count = 2;
    ec.covariance_sample_count = 200;
    const KeyBank bank =
        build_key_bank(f.params, f.tok, corpus_texts(f.la), {2, 3}, 200, 77);

    CHECK_THROWS_AS(recycle_corrections(f.params, f.tok, train, set, bank, ec, 5),
                    ProtocolError);

    const RecycleResult same =
        recycle_corrections(f.params, f.tok, train, set, bank, ec, 5, true);
    const auto direct = apply_edit(f.params, f.tok, train, bank, ec, 5);
    CHECK(same.params.content_hash() == direct.first.content_hash());
    CHECK(same.delta.config_hash == direct.second.config_hash);
    const HeadPatch expect = apply_corrections(direct.first, set);
    REQUIRE(same.patch.entries.size() == expect.entries.size());
    for (const auto& [key, vec] : expect.entries)
        CHECK((same.patch.entries.at(key) - vec).norm() == 0.0);

    std::vector<FactRecord> fresh(f.lb.begin(), f.lb.begin() + 4);
    const RecycleResult other =
        recycle_corrections(f.params, f.tok, fresh, set, bank, ec, 5);
    CHECK(other.delta.language == "L_B");
    CHECK(other.patch.entries.size() == psi.size());
}

TEST_CASE("correction sets round-trip through their file format") {
    const auto& f = fix();
    std::vector<FactRecord> subset(f.la.begin(), f.la.begin() + 3);
    MematConfig cfg = tiny_config(3, 1);
    cfg.max_epochs = 1;
    HeadCorrectionSet set = optimize_corrections(f.params, f.tok, subset, small_psi(), cfg, 13);
    set.language_edit = "L_A";

    const auto path = std::filesystem::temp_directory_path() / "memat_corr.bin";
    save_corrections(path, set);
    const HeadCorrectionSet back = load_corrections(path);
    CHECK(back.positions == set.positions);
    CHECK(back.language_edit == "L_A");
    CHECK(back.language_probe == set.language_probe);
    CHECK(back.lambda_omega == set.lambda_omega);
    CHECK(back.r_prefixes == set.r_prefixes);
    CHECK(back.epochs == set.epochs);
    CHECK(back.record_ids == set.record_ids);
    CHECK(back.epoch_losses == set.epoch_losses);
    REQUIRE(back.omegas.size() == set.omegas.size());
    for (size_t p = 0; p < set.omegas.size(); ++p) {
        REQUIRE(back.omegas[p].size() == set.omegas[p].size());
        for (Eigen::Index i = 0; i < set.omegas[p].size(); ++i)
            CHECK(back.omegas[p](i) == static_cast<double>(static_cast<float>(set.omegas[p](i))));
    }
    std::filesystem::remove(path);
}

TEST_CASE("foreign or corrupt files are rejected on load") {
    const auto dir = std::filesystem::temp_directory_path();
    const auto wrong = dir / "memat_corr_wrong.bin";
    {
        TensorFile file;
        file.meta["x"] = "y";
        file.tensors.push_back({"t", Mat::Zero(1, 4)});
        save_tensor_file(wrong, "edit-delta", file);
    }
    CHECK_THROWS_WITH_AS(load_corrections(wrong), doctest::Contains("expected"), IoError);

    const auto bad_meta = dir / "memat_corr_badmeta.bin";
    {
        TensorFile file;
        file.meta["json"] = "{broken";
        save_tensor_file(bad_meta, "head-corrections", file);
    }
    CHECK_THROWS_AS(load_corrections(bad_meta), IoError);

    const auto no_meta = dir / "memat_corr_nometa.bin";
    {
        TensorFile file;
        file.tensors.push_back({"omega.1.1", Mat::Zero(1, 8)});
        save_tensor_file(no_meta, "head-corrections", file);
    }
    CHECK_THROWS_AS(load_corrections(no_meta), IoError);

    std::filesystem::remove(wrong);
    std::filesystem::remove(bad_meta);
    std::filesystem::remove(no_meta);
}

TEST_CASE("correction set validation guards shapes and ranges") {
    const ModelConfig& cfg = fix().params.config;
    HeadCorrectionSet set;
    CHECK_THROWS_AS(set.validate(cfg), ContractError);
    set.positions = {HeadKey{1, 1}};
    CHECK_THROWS_AS(set.validate(cfg), ContractError);  // no offsets
    set.omegas = {Vec::Zero(cfg.head_dim())};
    CHECK_NOTHROW(set.validate(cfg));
    set.positions = {HeadKey{1, 9}};
    CHECK_THROWS_AS(set.validate(cfg), ContractError);
    set.positions = {HeadKey{1, 1}};
    set.omegas = {Vec::Zero(3)};
    CHECK_THROWS_AS(set.validate(cfg), ContractError);
    set.omegas = {Vec::Constant(cfg.head_dim(), std::numeric_limits<double>::infinity())};
    CHECK_THROWS_AS(set.validate(cfg), ContractError);
}
