"""End-to-end smoke checks for the python bindings."""

import math

import pytest

import memat


@pytest.fixture(scope="module")
def corpus():
    cfg = memat.CorpusConfig()
    cfg.n_pairs = 6
    cfg.subject_words = 16
    cfg.relation_words_per_language = 16
    cfg.object_words_per_language = 24
    cfg.filler_words_per_language = 6
    cfg.noise_max = 1
    cfg.seed = 5
    records = memat.generate_corpus(cfg)
    tok = memat.Tokenizer.train(memat.corpus_vocabulary(cfg), 256)
    return cfg, records, tok


@pytest.fixture(scope="module")
def model(corpus):
    _, _, tok = corpus
    mc = memat.ModelConfig()
    mc.n_layers = 2
    mc.n_heads = 2
    mc.d_model = 16
    mc.d_ff = 32
    mc.vocab_size = tok.vocab()
    mc.max_seq_len = 48
    mc.seed = 9
    return memat.init_model(mc)


def test_corpus_shape(corpus):
    cfg, records, tok = corpus
    assert len(records) == 2 * cfg.n_pairs
    languages = {r.language for r in records}
    assert languages == {memat.Language.LA, memat.Language.LB}
    rec = records[0]
    assert "{}" in rec.relation_template
    assert len(rec.paraphrase_prompts) == 2
    assert len(rec.neighborhood_prompts) == 10
    assert rec.target_true != rec.target_new


def test_tokenizer_round_trip(corpus):
    _, records, tok = corpus
    text = records[0].efficacy_prompt
    ids = tok.encode(text)
    assert tok.decode(ids) == text
    assert tok.vocab() > 0


def test_model_basics(corpus, model):
    _, records, tok = corpus
    prompt = tok.encode(records[0].efficacy_prompt)
    out = memat.generate(model, prompt, 3)
    assert len(out) == 3
    lp = memat.sequence_logprob(model, prompt, tok.encode(records[0].target_true))
    assert lp < 0.0 and math.isfinite(lp)


def test_edit_changes_model(corpus, model):
    _, records, tok = corpus
    la = [r for r in records if r.language == memat.Language.LA]
    bank = memat.build_key_bank(model, tok, memat.corpus_texts(records), [1], 100, 3)
    cfg = memat.EditConfig()
    cfg.critical_layers = [1]
    cfg.key_prefix_count = 2
    cfg.covariance_sample_count = 100
    edited, delta = memat.apply_edit(model, tok, la, bank, cfg, 11)
    assert delta.language == "L_A"
    assert sorted(delta.record_ids) == sorted(r.id for r in la)
    assert edited.content_hash() != model.content_hash()

    report = memat.evaluate(edited, tok, records, memat.Language.LA)
    assert set(report) >= {"es", "ps", "ns", "em", "pm", "nm", "ea", "pa", "na"}
    value, ci = report["em"]
    assert -100.0 <= value <= 100.0 and ci >= 0.0
    assert report["n_records"] == len(la)


def test_errors_carry_types(corpus, model):
    _, records, tok = corpus
    cfg = memat.EditConfig()
    cfg.critical_layers = [model.config.n_layers]  # final layer: inert edit
    bank = memat.build_key_bank(model, tok, memat.corpus_texts(records), [1], 50, 3)
    with pytest.raises(memat.ConfigError):
        memat.apply_edit(model, tok, records, bank, cfg, 0)
    assert issubclass(memat.ProtocolError, RuntimeError)


def test_pipeline_stages(tmp_path):
    cfg = memat.default_config()
    for key, value in [
        ("model.n_layers", "2"), ("model.n_heads", "2"), ("model.d_model", "16"),
        ("model.d_ff", "32"), ("model.vocab_size", "256"), ("model.max_seq_len", "48"),
        ("corpus.n_pairs", "6"), ("corpus.subject_words", "16"),
        ("corpus.relation_words_per_language", "16"),
        ("corpus.object_words_per_language", "24"),
        ("corpus.filler_words_per_language", "6"), ("corpus.noise_max", "1"),
        ("pretrain.max_steps", "20"), ("pretrain.lr", "0.003"),
        ("pretrain.batch_rows", "96"), ("pretrain.gate_interval", "20"),
        ("edit.critical_layers", "[1]"), ("edit.key_prefix_count", "2"),
        ("edit.covariance_sample_count", "100"), ("seed", "13"),
    ]:
        cfg.set(key, value)
    for key in ["corpus", "tokenizer", "checkpoint", "delta"]:
        cfg.set(f"paths.{key}", str(tmp_path / f"{key}.bin"))
    cfg.set("paths.report_dir", str(tmp_path / "reports"))
    cfg.set("paths.manifest_path", str(tmp_path / "manifest.json")) if False else None
    cfg.set("paths.manifest", str(tmp_path / "manifest.json"))
    cfg.validate()

    with pytest.raises(memat.ProtocolError):
        memat.run_edit(cfg)

    assert "generated" in memat.run_gen(cfg).summary
    memat.run_pretrain(cfg)
    outcome = memat.run_edit(cfg)
    assert all(p.exists() for p in outcome.artifacts)

    eval_cfg = memat.default_config()
    assert eval_cfg.hash() != cfg.hash()
