#include "memat/pipeline.hpp"

#include "memat/checkpoint.hpp"
#include "memat/probe.hpp"
#include "nlohmann/json.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <set>
#include <sstream>

namespace memat {
namespace fs = std::filesystem;
namespace {

using nlohmann::ordered_json;

std::string fmt17(double v) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

std::string fmt3(double v) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.3g", v);
    return buf;
}

std::string activation_str(Activation a) { return a == Activation::gelu ? "gelu" : "relu"; }

Activation activation_from(const std::string& s) {
    if (s == "gelu") return Activation::gelu;
    if (s == "relu") return Activation::relu;
    throw ConfigError("unknown activation \"" + s + "\"; use gelu or relu");
}

std::string positional_str(Positional p) {
    switch (p) {
        case Positional::rotary: return "rotary";
        case Positional::learned: return "learned";
        default: return "none";
    }
}

Positional positional_from(const std::string& s) {
    if (s == "rotary") return Positional::rotary;
    if (s == "learned") return Positional::learned;
    if (s == "none") return Positional::none;
    throw ConfigError("unknown positional scheme \"" + s + "\"; use rotary, learned or none");
}

std::string language_str(Language l) { return to_string(l); }

Language language_from(const std::string& s) {
    if (s == "L_A") return Language::la;
    if (s == "L_B") return Language::lb;
    throw ConfigError("unknown language \"" + s + "\"; use L_A or L_B");
}

ordered_json config_to_json(const ExperimentConfig& c) {
    ordered_json j;
    j["kind"] = "experiment-config";
    j["version"] = 1;

    ordered_json paths;
    paths["corpus"] = c.corpus_path.string();
    paths["tokenizer"] = c.tokenizer_path.string();
    paths["checkpoint"] = c.checkpoint_path.string();
    paths["delta"] = c.delta_path.string();
    paths["recycled_delta"] = c.recycled_delta_path.string();
    paths["corrections"] = c.corrections_path.string();
    paths["probe_dir"] = c.probe_dir.string();
    paths["report_dir"] = c.report_dir.string();
    paths["manifest"] = c.manifest_path.string();
    j["paths"] = std::move(paths);

    ordered_json model;
    model["n_layers"] = c.model.n_layers;
    model["n_heads"] = c.model.n_heads;
    model["d_model"] = c.model.d_model;
    model["d_ff"] = c.model.d_ff;
    model["vocab_size"] = c.model.vocab_size;
    model["max_seq_len"] = c.model.max_seq_len;
    model["activation"] = activation_str(c.model.activation);
    model["positional"] = positional_str(c.model.positional);
    model["layernorm"] = c.model.layernorm;
    model["seed"] = c.model.seed;
    j["model"] = std::move(model);

    ordered_json corpus;
    corpus["n_pairs"] = c.corpus.n_pairs;
    corpus["jaccard_identical"] = c.corpus.jaccard_profile.identical;
    corpus["jaccard_low"] = c.corpus.jaccard_profile.low;
    corpus["subject_words"] = c.corpus.subject_words;
    corpus["relation_words_per_language"] = c.corpus.relation_words_per_language;
    corpus["object_words_per_language"] = c.corpus.object_words_per_language;
    corpus["filler_words_per_language"] = c.corpus.filler_words_per_language;
    corpus["noise_min"] = c.corpus.noise_min;
    corpus["noise_max"] = c.corpus.noise_max;
    corpus["duplication_on_gender"] = c.corpus.duplication_on_gender;
    corpus["seed"] = c.corpus.seed;
    j["corpus"] = std::move(corpus);

    ordered_json pretrain;
    pretrain["max_steps"] = c.pretrain.max_steps;
    pretrain["lr"] = c.pretrain.lr;
    pretrain["seed"] = c.pretrain.seed;
    pretrain["filler_fraction"] = c.pretrain.filler_fraction;
    pretrain["filler_words"] = c.pretrain.filler_words;
    pretrain["recall_gate"] = c.pretrain.recall_gate;
    pretrain["gate_interval"] = c.pretrain.gate_interval;
    pretrain["batch_rows"] = c.pretrain.batch_rows;
    pretrain["grad_clip"] = c.pretrain.grad_clip;
    j["pretrain"] = std::move(pretrain);

    ordered_json edit;
    edit["critical_layers"] = c.edit.critical_layers;
    edit["target_opt_steps"] = c.edit.target_opt_steps;
    edit["target_lr"] = c.edit.target_lr;
    edit["target_nll_gate"] = c.edit.target_nll_gate;
    edit["key_prefix_count"] = c.edit.key_prefix_count;
    edit["covariance_sample_count"] = c.edit.covariance_sample_count;
    edit["covariance_scale"] = c.edit.covariance_scale;
    j["edit"] = std::move(edit);

    ordered_json memat;
    memat["k"] = c.memat.k;
    memat["lambda_omega"] = c.memat.lambda_omega;
    memat["r_prefixes"] = c.memat.r_prefixes;
    memat["adam_lr"] = c.memat.adam_lr;
    memat["adam_beta1"] = c.memat.adam_beta1;
    memat["adam_beta2"] = c.memat.adam_beta2;
    memat["adam_eps"] = c.memat.adam_eps;
    memat["batch_size"] = c.memat.batch_size;
    memat["grad_accum"] = c.memat.grad_accum;
    memat["max_epochs"] = c.memat.max_epochs;
    memat["kl_template"] = c.memat.kl_template;
    j["memat"] = std::move(memat);

    j["edit_language"] = language_str(c.edit_language);
    j["eval_language"] = language_str(c.eval_language);
    j["probe_refine"] = c.probe_refine;
    j["probe_val_fraction"] = c.probe_val_fraction;
    j["eval_against"] = c.eval_against;
    j["sweep_k"] = c.sweep_k;
    j["scale_begin"] = c.scale_begin;
    j["scale_end"] = c.scale_end;
    j["scale_exclude_correction_records"] = c.scale_exclude_correction_records;
    j["workers"] = c.workers;
    j["seed"] = c.seed;
    return j;
}

ExperimentConfig config_from_json(const ordered_json& j, const std::string& origin) {
    try {
        if (j.value("kind", std::string()) != "experiment-config")
            throw ConfigError(origin + " is not an experiment config");
        const int version = j.at("version").get<int>();
        if (version != 1)
            throw ConfigError(origin + " uses config version " + std::to_string(version) +
                              "; this build reads version 1");

        ExperimentConfig c;
        const ordered_json& paths = j.at("paths");
        c.corpus_path = paths.at("corpus").get<std::string>();
        c.tokenizer_path = paths.at("tokenizer").get<std::string>();
        c.checkpoint_path = paths.at("checkpoint").get<std::string>();
        c.delta_path = paths.at("delta").get<std::string>();
        c.recycled_delta_path = paths.at("recycled_delta").get<std::string>();
        c.corrections_path = paths.at("corrections").get<std::string>();
        c.probe_dir = paths.at("probe_dir").get<std::string>();
        c.report_dir = paths.at("report_dir").get<std::string>();
        c.manifest_path = paths.at("manifest").get<std::string>();

        const ordered_json& model = j.at("model");
        c.model.n_layers = model.at("n_layers").get<int>();
        c.model.n_heads = model.at("n_heads").get<int>();
        c.model.d_model = model.at("d_model").get<int>();
        c.model.d_ff = model.at("d_ff").get<int>();
        c.model.vocab_size = model.at("vocab_size").get<int>();
        c.model.max_seq_len = model.at("max_seq_len").get<int>();
        c.model.activation = activation_from(model.at("activation").get<std::string>());
        c.model.positional = positional_from(model.at("positional").get<std::string>());
        c.model.layernorm = model.at("layernorm").get<bool>();
        c.model.seed = model.at("seed").get<uint64_t>();

        const ordered_json& corpus = j.at("corpus");
        c.corpus.n_pairs = corpus.at("n_pairs").get<int>();
        c.corpus.jaccard_profile.identical = corpus.at("jaccard_identical").get<double>();
        c.corpus.jaccard_profile.low = corpus.at("jaccard_low").get<double>();
        c.corpus.subject_words = corpus.at("subject_words").get<int>();
        c.corpus.relation_words_per_language =
            corpus.at("relation_words_per_language").get<int>();
        c.corpus.object_words_per_language = corpus.at("object_words_per_language").get<int>();
        c.corpus.filler_words_per_language = corpus.at("filler_words_per_language").get<int>();
        c.corpus.noise_min = corpus.at("noise_min").get<int>();
        c.corpus.noise_max = corpus.at("noise_max").get<int>();
        c.corpus.duplication_on_gender = corpus.at("duplication_on_gender").get<bool>();
        c.corpus.seed = corpus.at("seed").get<uint64_t>();

        const ordered_json& pretrain = j.at("pretrain");
        c.pretrain.max_steps = pretrain.at("max_steps").get<int>();
        c.pretrain.lr = pretrain.at("lr").get<double>();
        c.pretrain.seed = pretrain.at("seed").get<uint64_t>();
        c.pretrain.filler_fraction = pretrain.at("filler_fraction").get<double>();
        c.pretrain.filler_words = pretrain.at("filler_words").get<std::vector<std::string>>();
        c.pretrain.recall_gate = pretrain.at("recall_gate").get<double>();
        c.pretrain.gate_interval = pretrain.at("gate_interval").get<int>();
        c.pretrain.batch_rows = pretrain.at("batch_rows").get<int>();
        c.pretrain.grad_clip = pretrain.at("grad_clip").get<double>();

        const ordered_json& edit = j.at("edit");
        c.edit.critical_layers = edit.at("critical_layers").get<std::vector<int>>();
        c.edit.target_opt_steps = edit.at("target_opt_steps").get<int>();
        c.edit.target_lr = edit.at("target_lr").get<double>();
        c.edit.target_nll_gate = edit.at("target_nll_gate").get<double>();
        c.edit.key_prefix_count = edit.at("key_prefix_count").get<int>();
        c.edit.covariance_sample_count = edit.at("covariance_sample_count").get<int>();
        c.edit.covariance_scale = edit.at("covariance_scale").get<double>();

        const ordered_json& memat = j.at("memat");
        c.memat.k = memat.at("k").get<int>();
        c.memat.lambda_omega = memat.at("lambda_omega").get<double>();
        c.memat.r_prefixes = memat.at("r_prefixes").get<int>();
        c.memat.adam_lr = memat.at("adam_lr").get<double>();
        c.memat.adam_beta1 = memat.at("adam_beta1").get<double>();
        c.memat.adam_beta2 = memat.at("adam_beta2").get<double>();
        c.memat.adam_eps = memat.at("adam_eps").get<double>();
        c.memat.batch_size = memat.at("batch_size").get<int>();
        c.memat.grad_accum = memat.at("grad_accum").get<int>();
        c.memat.max_epochs = memat.at("max_epochs").get<int>();
        c.memat.kl_template = memat.at("kl_template").get<std::string>();

        c.edit_language = language_from(j.at("edit_language").get<std::string>());
        c.eval_language = language_from(j.at("eval_language").get<std::string>());
        c.probe_refine = j.at("probe_refine").get<bool>();
        c.probe_val_fraction = j.at("probe_val_fraction").get<double>();
        c.eval_against = j.at("eval_against").get<std::string>();
        c.sweep_k = j.at("sweep_k").get<std::vector<int>>();
        c.scale_begin = j.at("scale_begin").get<int>();
        c.scale_end = j.at("scale_end").get<int>();
        c.scale_exclude_correction_records =
            j.at("scale_exclude_correction_records").get<bool>();
        c.workers = j.at("workers").get<int>();
        c.seed = j.at("seed").get<uint64_t>();
        return c;
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(origin + " is missing or mistypes a field: " + e.what());
    }
}

// ---------------------------------------------------------------- manifest

struct StageStamp {
    std::string config_hash;
    uint64_t seed = 0;
    std::vector<std::string> artifacts;
};

using Manifest = std::map<std::string, StageStamp>;

Manifest load_manifest(const fs::path& path) {
    if (!fs::exists(path)) return {};
    std::ifstream in(path);
    if (!in) throw IoError("cannot read " + path.string());
    ordered_json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& e) {
        throw IoError(path.string() + " is not valid JSON: " + e.what());
    }
    try {
        if (j.value("kind", std::string()) != "run-manifest")
            throw IoError(path.string() + " is not a run manifest");
        Manifest m;
        for (const auto& [stage, entry] : j.at("stages").items()) {
            StageStamp s;
            s.config_hash = entry.at("config_hash").get<std::string>();
            s.seed = entry.at("seed").get<uint64_t>();
            s.artifacts = entry.at("artifacts").get<std::vector<std::string>>();
            m[stage] = std::move(s);
        }
        return m;
    } catch (const nlohmann::json::exception& e) {
        throw IoError(path.string() + " is missing manifest fields: " + e.what());
    }
}

void ensure_parent(const fs::path& p) {
    if (p.has_parent_path()) fs::create_directories(p.parent_path());
}

void save_manifest(const fs::path& path, const Manifest& m) {
    ordered_json stages;
    for (const auto& [stage, stamp] : m) {
        ordered_json e;
        e["config_hash"] = stamp.config_hash;
        e["seed"] = stamp.seed;
        e["artifacts"] = stamp.artifacts;
        stages[stage] = std::move(e);
    }
    ordered_json j;
    j["kind"] = "run-manifest";
    j["version"] = 1;
    j["stages"] = std::move(stages);
    ensure_parent(path);
    std::ofstream out(path);
    if (!out) throw IoError("cannot write " + path.string());
    out << j.dump(2) << '\n';
    if (!out) throw IoError("failed while writing " + path.string());
}

std::string hex_digest(const std::string& text) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(fnv1a64(text)));
    return buf;
}

// The fields a stage's artifacts depend on, so that leaf-stage knobs (the
// evaluation target, sweep and scale ranges, worker count) never invalidate
// upstream artifacts. Stages outside this map are never anyone's upstream and
// hash the whole config.
std::string stage_hash(const ExperimentConfig& cfg, const std::string& stage) {
    static const std::map<std::string, std::vector<std::string>> keys = {
        {"gen", {"corpus", "model"}},
        {"pretrain", {"corpus", "model", "pretrain"}},
        {"edit", {"corpus", "model", "pretrain", "edit", "edit_language", "seed"}},
        {"probe",
         {"corpus", "model", "pretrain", "edit", "edit_language", "seed", "eval_language",
          "probe_refine", "probe_val_fraction", "memat.k"}},
        {"optimize",
         {"corpus", "model", "pretrain", "edit", "edit_language", "seed", "eval_language",
          "probe_refine", "probe_val_fraction", "memat"}},
    };
    const ordered_json full = config_to_json(cfg);
    const auto it = keys.find(stage);
    if (it == keys.end()) return hex_digest(full.dump());
    ordered_json view;
    for (const std::string& key : it->second) {
        const ordered_json* node = &full;
        std::istringstream parts(key);
        std::string part;
        while (std::getline(parts, part, '.')) node = &node->at(part);
        view[key] = *node;
    }
    return hex_digest(view.dump());
}

void require_stage(const Manifest& m, const std::string& stage, const ExperimentConfig& cfg,
                   bool force) {
    const auto it = m.find(stage);
    if (it == m.end())
        throw ProtocolError("the " + stage + " stage has not been run; run `memat " + stage +
                            "` first");
    if (!force && it->second.config_hash != stage_hash(cfg, stage))
        throw ProtocolError("the " + stage + " stage was built from config " +
                            it->second.config_hash + " but the current config hashes to " +
                            stage_hash(cfg, stage) + "; rerun `memat " + stage +
                            "` or pass --force");
    for (const std::string& artifact : it->second.artifacts)
        if (!fs::exists(artifact))
            throw ProtocolError("artifact " + artifact + " from the " + stage +
                                " stage is missing; rerun `memat " + stage + "`");
}

void record_stage(const ExperimentConfig& cfg, const std::string& stage,
                  const std::vector<fs::path>& artifacts) {
    Manifest m = load_manifest(cfg.manifest_path);
    StageStamp stamp;
    stamp.config_hash = stage_hash(cfg, stage);
    stamp.seed = cfg.seed;
    for (const fs::path& p : artifacts) stamp.artifacts.push_back(p.string());
    m[stage] = std::move(stamp);
    save_manifest(cfg.manifest_path, m);
}

// ------------------------------------------------------------- stage inputs

uint64_t stage_seed(const ExperimentConfig& cfg, std::string_view name) {
    return mix_seed(cfg.seed, fnv1a64(name));
}

struct Inputs {
    std::vector<FactRecord> records;
    Tokenizer tok;
};

Inputs load_inputs(const ExperimentConfig& cfg) {
    return {load_corpus(cfg.corpus_path), Tokenizer::load(cfg.tokenizer_path)};
}

std::vector<FactRecord> records_in(const std::vector<FactRecord>& records, Language lang) {
    std::vector<FactRecord> out;
    for (const FactRecord& r : records)
        if (r.language == lang) out.push_back(r);
    return out;
}

ModelParams load_base(const ExperimentConfig& cfg) {
    return load_model(cfg.checkpoint_path).params;
}

KeyBank stage_bank(const ExperimentConfig& cfg, const ModelParams& params, const Tokenizer& tok,
                   const std::vector<FactRecord>& records) {
    return build_key_bank(params, tok, corpus_texts(records), cfg.edit.critical_layers,
                          cfg.edit.covariance_sample_count, stage_seed(cfg, "bank"));
}

void stamp(MetricsReport& report, const ExperimentConfig& cfg) {
    report.metadata["config_hash"] = cfg.hash();
    report.metadata["seed"] = std::to_string(cfg.seed);
}

// Held-out records of the edit language: the corrections' own training facts
// are removed so recycling stays on disjoint blocks.
std::vector<FactRecord> held_out_block(const ExperimentConfig& cfg,
                                       const std::vector<FactRecord>& records,
                                       const HeadCorrectionSet& corrections, bool exclude) {
    std::vector<FactRecord> pool = records_in(records, cfg.edit_language);
    if (!exclude) return pool;
    const std::set<int> used(corrections.record_ids.begin(), corrections.record_ids.end());
    std::erase_if(pool, [&](const FactRecord& r) { return used.count(r.id) > 0; });
    if (pool.empty())
        throw InputError("every " + to_string(cfg.edit_language) +
                         " record was used to train the corrections; grow the corpus or change "
                         "edit_language");
    return pool;
}

}  // namespace

void ExperimentConfig::validate() const {
    model.validate();
    corpus.validate();
    edit.validate(model.n_layers);
    memat.validate();
    for (const auto* p :
         {&corpus_path, &tokenizer_path, &checkpoint_path, &delta_path, &recycled_delta_path,
          &corrections_path, &probe_dir, &report_dir, &manifest_path})
        if (p->empty()) throw ConfigError("every artifact path must be set");
    if (pretrain.max_steps <= 0) throw ConfigError("pretrain.max_steps must be positive");
    if (pretrain.lr <= 0.0) throw ConfigError("pretrain.lr must be positive");
    if (pretrain.filler_fraction < 0.0 || pretrain.filler_fraction >= 1.0)
        throw ConfigError("pretrain.filler_fraction must lie in [0, 1)");
    if (pretrain.recall_gate < 0.0 || pretrain.recall_gate > 1.0)
        throw ConfigError("pretrain.recall_gate must lie in [0, 1]");
    if (pretrain.gate_interval <= 0) throw ConfigError("pretrain.gate_interval must be positive");
    if (pretrain.batch_rows <= 0) throw ConfigError("pretrain.batch_rows must be positive");
    if (pretrain.grad_clip <= 0.0) throw ConfigError("pretrain.grad_clip must be positive");
    if (probe_val_fraction <= 0.0 || probe_val_fraction >= 1.0)
        throw ConfigError("probe_val_fraction must lie strictly between 0 and 1");
    if (eval_against != "baseline" && eval_against != "memit" && eval_against != "memat")
        throw ConfigError("eval_against must be baseline, memit or memat; got \"" + eval_against +
                          "\"");
    if (sweep_k.empty()) throw ConfigError("sweep_k must list at least one K");
    for (int k : sweep_k)
        if (k < 0) throw ConfigError("sweep_k entries must be non-negative");
    if (scale_begin < 0 || scale_end < scale_begin)
        throw ConfigError("scale indices must satisfy 0 <= scale_begin <= scale_end");
    if (workers < 0) throw ConfigError("workers must be non-negative");
}

std::string ExperimentConfig::hash() const { return hex_digest(config_to_json(*this).dump()); }

ExperimentConfig default_experiment_config() {
    ExperimentConfig cfg;
    cfg.memat.kl_template = "{}";  // the bare subject encodes under any corpus
    return cfg;
}

void save_experiment_config(const fs::path& path, const ExperimentConfig& cfg) {
    cfg.validate();
    ensure_parent(path);
    std::ofstream out(path);
    if (!out) throw IoError("cannot write " + path.string());
    out << config_to_json(cfg).dump(2) << '\n';
    if (!out) throw IoError("failed while writing " + path.string());
}

ExperimentConfig load_experiment_config(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot read config " + path.string());
    ordered_json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(path.string() + " is not valid JSON: " + e.what());
    }
    return config_from_json(j, path.string());
}

void apply_override(ExperimentConfig& cfg, const std::string& key, const std::string& value) {
    ordered_json j = config_to_json(cfg);
    ordered_json* node = &j;
    std::istringstream parts(key);
    std::string part;
    while (std::getline(parts, part, '.')) {
        if (!node->is_object())
            throw ConfigError("unknown config field \"" + key + "\"");
        const auto it = node->find(part);
        if (it == node->end())
            throw ConfigError("unknown config field \"" + key + "\"");
        node = &*it;
    }
    if (node->is_object())
        throw ConfigError("\"" + key + "\" is a section; set one of its fields");

    if (node->is_string()) {
        *node = value;
    } else {
        const ordered_json parsed = ordered_json::parse(value, nullptr, false);
        if (parsed.is_discarded())
            throw ConfigError("cannot parse \"" + value + "\" as a value for " + key);
        const bool ok = (node->is_boolean() && parsed.is_boolean()) ||
                        (node->is_number_float() && parsed.is_number()) ||
                        (node->is_number_integer() && parsed.is_number_integer()) ||
                        (node->is_number_unsigned() &&
                         (parsed.is_number_unsigned() || parsed.is_number_integer())) ||
                        (node->is_array() && parsed.is_array());
        if (!ok)
            throw ConfigError("value \"" + value + "\" does not match the type of " + key);
        *node = parsed;
    }
    cfg = config_from_json(j, "override of " + key);
}

std::string dump_config(const ExperimentConfig& cfg) { return config_to_json(cfg).dump(2); }

std::string config_schema() { return dump_config(default_experiment_config()); }

// -------------------------------------------------------------------- stages

StageOutcome run_gen(const ExperimentConfig& cfg, bool force) {
    (void)force;
    cfg.validate();
    const std::vector<FactRecord> records = generate_corpus(cfg.corpus);
    const Tokenizer tok = Tokenizer::train(corpus_vocabulary(cfg.corpus), cfg.model.vocab_size);
    ensure_parent(cfg.corpus_path);
    save_corpus(cfg.corpus_path, records);
    ensure_parent(cfg.tokenizer_path);
    tok.save(cfg.tokenizer_path);
    record_stage(cfg, "gen", {cfg.corpus_path, cfg.tokenizer_path});
    return {{cfg.corpus_path, cfg.tokenizer_path},
            "generated " + std::to_string(records.size()) + " records (" +
                std::to_string(cfg.corpus.n_pairs) + " pairs), vocabulary " +
                std::to_string(tok.vocab()) + " tokens"};
}

StageOutcome run_pretrain(const ExperimentConfig& cfg, bool force) {
    cfg.validate();
    const Manifest m = load_manifest(cfg.manifest_path);
    require_stage(m, "gen", cfg, force);
    const Inputs in = load_inputs(cfg);

    ModelConfig mc = cfg.model;
    mc.vocab_size = in.tok.vocab();
    ModelParams params = init_model(mc);
    const PretrainReport rep = pretrain(params, in.tok, in.records, cfg.pretrain);
    if (!rep.gate_passed)
        std::cerr << "warning: recall gate " << cfg.pretrain.recall_gate
                  << " not reached (recall " << rep.recall << " after " << rep.steps_run
                  << " steps); downstream results may be weak\n";

    CheckpointMeta meta;
    meta["config_hash"] = cfg.hash();
    meta["seed"] = std::to_string(cfg.seed);
    meta["steps_run"] = std::to_string(rep.steps_run);
    meta["recall"] = fmt17(rep.recall);
    meta["final_loss"] = fmt17(rep.final_loss);
    ensure_parent(cfg.checkpoint_path);
    save_model(cfg.checkpoint_path, params, meta);
    record_stage(cfg, "pretrain", {cfg.checkpoint_path});
    return {{cfg.checkpoint_path},
            "pretrained " + std::to_string(rep.steps_run) + " steps, recall " +
                fmt3(rep.recall) + ", loss " + fmt3(rep.initial_loss) + " -> " +
                fmt3(rep.final_loss)};
}

StageOutcome run_edit(const ExperimentConfig& cfg, bool force) {
    cfg.validate();
    const Manifest m = load_manifest(cfg.manifest_path);
    require_stage(m, "gen", cfg, force);
    require_stage(m, "pretrain", cfg, force);
    const Inputs in = load_inputs(cfg);
    const ModelParams base = load_base(cfg);

    const std::vector<FactRecord> edit_records = records_in(in.records, cfg.edit_language);
    if (edit_records.empty())
        throw InputError("the corpus has no " + to_string(cfg.edit_language) +
                         " records to edit");
    const KeyBank bank = stage_bank(cfg, base, in.tok, in.records);
    const auto [edited, delta] =
        apply_edit(base, in.tok, edit_records, bank, cfg.edit, stage_seed(cfg, "edit"));
    (void)edited;

    ensure_parent(cfg.delta_path);
    save_delta(cfg.delta_path, delta);
    record_stage(cfg, "edit", {cfg.delta_path});
    std::string layers;
    for (int l : cfg.edit.critical_layers) layers += (layers.empty() ? "" : ",") + std::to_string(l);
    return {{cfg.delta_path},
            "edited " + std::to_string(edit_records.size()) + " " +
                to_string(cfg.edit_language) + " facts across layers {" + layers + "}"};
}

StageOutcome run_probe(const ExperimentConfig& cfg, bool force) {
    cfg.validate();
    const Manifest m = load_manifest(cfg.manifest_path);
    require_stage(m, "gen", cfg, force);
    require_stage(m, "pretrain", cfg, force);
    require_stage(m, "edit", cfg, force);
    const Inputs in = load_inputs(cfg);
    const ModelParams edited = apply_delta(load_base(cfg), load_delta(cfg.delta_path));

    const std::vector<FactRecord> probe_records = records_in(in.records, cfg.eval_language);
    if (probe_records.empty())
        throw InputError("the corpus has no " + to_string(cfg.eval_language) +
                         " records to probe");
    const ProbeDataset ds =
        collect_probe_data(edited, in.tok, probe_records, cfg.probe_refine,
                           stage_seed(cfg, "probe"), cfg.probe_val_fraction);
    const auto [classifiers, accuracy] = train_probes(ds);
    const std::vector<HeadKey> psi = select_top_k(accuracy, cfg.memat.k);

    fs::create_directories(cfg.probe_dir);
    const fs::path acc_path = cfg.probe_dir / "accuracy.csv";
    const fs::path heads_path = cfg.probe_dir / "heads.json";
    const fs::path clf_path = cfg.probe_dir / "classifiers.json";
    save_accuracy_csv(acc_path, accuracy);
    save_heads_json(heads_path, psi, &accuracy);
    save_classifiers_json(clf_path, {ds.n_layers, ds.n_heads, classifiers});
    record_stage(cfg, "probe", {acc_path, heads_path, clf_path});
    return {{acc_path, heads_path, clf_path},
            "probed " + std::to_string(ds.n_layers * ds.n_heads) + " heads, peak accuracy " +
                fmt3(accuracy.peak()) + ", kept " + std::to_string(psi.size())};
}

StageOutcome run_optimize(const ExperimentConfig& cfg, bool force) {
    cfg.validate();
    const Manifest m = load_manifest(cfg.manifest_path);
    require_stage(m, "gen", cfg, force);
    require_stage(m, "pretrain", cfg, force);
    require_stage(m, "edit", cfg, force);
    require_stage(m, "probe", cfg, force);
    const Inputs in = load_inputs(cfg);
    const EditDelta delta = load_delta(cfg.delta_path);
    const ModelParams edited = apply_delta(load_base(cfg), delta);

    const std::vector<FactRecord> probe_records = records_in(in.records, cfg.eval_language);
    std::vector<HeadKey> psi = load_heads_json(cfg.probe_dir / "heads.json");
    if (static_cast<int>(psi.size()) != cfg.memat.k)
        throw InputError("the probe stage kept " + std::to_string(psi.size()) +
                         " heads but memat.k is " + std::to_string(cfg.memat.k) +
                         "; rerun `memat probe`");

    HeadCorrectionSet corr = optimize_corrections(edited, in.tok, probe_records, psi, cfg.memat,
                                                  stage_seed(cfg, "optimize"));
    corr.language_edit = delta.language;
    ensure_parent(cfg.corrections_path);
    save_corrections(cfg.corrections_path, corr);
    record_stage(cfg, "optimize", {cfg.corrections_path});
    const double first = corr.epoch_losses.empty() ? 0.0 : corr.epoch_losses.front();
    const double last = corr.epoch_losses.empty() ? 0.0 : corr.epoch_losses.back();
    return {{cfg.corrections_path},
            "trained " + std::to_string(corr.positions.size()) + " corrections over " +
                std::to_string(corr.epochs) + " epochs, loss " + fmt3(first) + " -> " +
                fmt3(last)};
}

StageOutcome run_eval(const ExperimentConfig& cfg, bool force) {
    cfg.validate();
    const Manifest m = load_manifest(cfg.manifest_path);
    require_stage(m, "gen", cfg, force);
    require_stage(m, "pretrain", cfg, force);
    if (cfg.eval_against != "baseline") require_stage(m, "edit", cfg, force);
    if (cfg.eval_against == "memat") require_stage(m, "optimize", cfg, force);

    const Inputs in = load_inputs(cfg);
    ModelParams composed = load_base(cfg);
    if (cfg.eval_against != "baseline")
        composed = apply_delta(composed, load_delta(cfg.delta_path));
    HeadPatch patch;
    bool use_patch = false;
    if (cfg.eval_against == "memat") {
        patch = apply_corrections(composed, load_corrections(cfg.corrections_path));
        use_patch = true;
    }

    fs::create_directories(cfg.report_dir);
    std::vector<fs::path> artifacts;
    std::vector<std::pair<std::string, MetricsReport>> rows;
    std::string summary = "evaluated " + cfg.eval_against + ":";
    for (const Language lang : {Language::la, Language::lb}) {
        if (records_in(in.records, lang).empty()) continue;
        MetricsReport rep =
            evaluate(composed, in.tok, in.records, lang, use_patch ? &patch : nullptr);
        stamp(rep, cfg);
        rep.metadata["against"] = cfg.eval_against;
        const fs::path path =
            cfg.report_dir / ("eval_" + cfg.eval_against + "_" + to_string(lang) + ".json");
        save_report_json(path, rep);
        artifacts.push_back(path);
        summary += " " + to_string(lang) + " ES " + fmt3(rep.es.value) + " EM " +
                   fmt3(rep.em.value);
        rows.emplace_back(cfg.eval_against + "/" + to_string(lang), std::move(rep));
    }
    const fs::path csv = cfg.report_dir / ("eval_" + cfg.eval_against + ".csv");
    save_metrics_csv(csv, rows);
    artifacts.push_back(csv);
    record_stage(cfg, "eval", artifacts);
    return {artifacts, summary};
}

StageOutcome run_sweep(const ExperimentConfig& cfg, bool force) {
    cfg.validate();
    const Manifest m = load_manifest(cfg.manifest_path);
    require_stage(m, "gen", cfg, force);
    require_stage(m, "pretrain", cfg, force);
    const Inputs in = load_inputs(cfg);
    const ModelParams base = load_base(cfg);

    const std::vector<FactRecord> edit_records = records_in(in.records, cfg.edit_language);
    const std::vector<FactRecord> probe_records = records_in(in.records, cfg.eval_language);
    const KeyBank bank = stage_bank(cfg, base, in.tok, in.records);
    std::vector<SweepEntry> entries =
        k_sweep(base, in.tok, edit_records, probe_records, bank, cfg.edit, cfg.memat,
                cfg.sweep_k, cfg.probe_refine, stage_seed(cfg, "sweep"));

    fs::create_directories(cfg.report_dir);
    std::vector<fs::path> artifacts;
    std::vector<std::pair<std::string, MetricsReport>> rows;
    for (size_t i = 0; i < entries.size(); ++i) {
        stamp(entries[i].report, cfg);
        const fs::path path = cfg.report_dir / ("sweep_" + std::to_string(i) + "_k" +
                                                std::to_string(entries[i].k) + ".json");
        save_report_json(path, entries[i].report);
        artifacts.push_back(path);
        rows.emplace_back("K=" + std::to_string(entries[i].k), entries[i].report);
    }
    const fs::path csv = cfg.report_dir / "sweep.csv";
    save_metrics_csv(csv, rows);
    artifacts.push_back(csv);
    record_stage(cfg, "sweep", artifacts);

    double best = 0.0;
    for (size_t i = 1; i < entries.size(); ++i)
        best = std::max(best, harmonic_success(entries[i].report));
    return {artifacts, "swept " + std::to_string(entries.size() - 1) +
                           " K values; harmonic success baseline " +
                           fmt3(harmonic_success(entries[0].report)) + ", best " + fmt3(best)};
}

StageOutcome run_scale(const ExperimentConfig& cfg, bool force) {
    cfg.validate();
    const Manifest m = load_manifest(cfg.manifest_path);
    require_stage(m, "gen", cfg, force);
    require_stage(m, "pretrain", cfg, force);
    require_stage(m, "optimize", cfg, force);
    const Inputs in = load_inputs(cfg);
    const ModelParams base = load_base(cfg);
    const HeadCorrectionSet corr = load_corrections(cfg.corrections_path);

    const std::vector<FactRecord> pool =
        held_out_block(cfg, in.records, corr, cfg.scale_exclude_correction_records);
    const ScalingSchedule schedule = ScalingSchedule::build(cfg.scale_begin, cfg.scale_end);
    const KeyBank bank = stage_bank(cfg, base, in.tok, in.records);
    std::vector<ScalePoint> points = scaling_curves(base, in.tok, pool, corr, bank, cfg.edit,
                                                    schedule, stage_seed(cfg, "scale"));

    fs::create_directories(cfg.report_dir);
    std::vector<fs::path> artifacts;
    std::vector<std::pair<std::string, MetricsReport>> rows;
    for (ScalePoint& p : points) {
        stamp(p.memit, cfg);
        stamp(p.memat, cfg);
        const fs::path a = cfg.report_dir / ("scale_n" + std::to_string(p.n) + "_memit.json");
        const fs::path b = cfg.report_dir / ("scale_n" + std::to_string(p.n) + "_memat.json");
        save_report_json(a, p.memit);
        save_report_json(b, p.memat);
        artifacts.push_back(a);
        artifacts.push_back(b);
        rows.emplace_back("n=" + std::to_string(p.n) + "/memit", p.memit);
        rows.emplace_back("n=" + std::to_string(p.n) + "/memat", p.memat);
    }
    const fs::path csv = cfg.report_dir / "scale.csv";
    save_metrics_csv(csv, rows);
    artifacts.push_back(csv);
    record_stage(cfg, "scale", artifacts);
    return {artifacts, "scaled over " + std::to_string(points.size()) + " sample counts up to " +
                           std::to_string(points.back().n)};
}

StageOutcome run_recycle(const ExperimentConfig& cfg, bool force) {
    cfg.validate();
    const Manifest m = load_manifest(cfg.manifest_path);
    require_stage(m, "gen", cfg, force);
    require_stage(m, "pretrain", cfg, force);
    require_stage(m, "optimize", cfg, force);
    const Inputs in = load_inputs(cfg);
    const ModelParams base = load_base(cfg);
    const HeadCorrectionSet corr = load_corrections(cfg.corrections_path);

    const std::vector<FactRecord> block = held_out_block(cfg, in.records, corr, true);
    const KeyBank bank = stage_bank(cfg, base, in.tok, in.records);
    const RecycleResult rr = recycle_corrections(base, in.tok, block, corr, bank, cfg.edit,
                                                 stage_seed(cfg, "recycle"));

    ensure_parent(cfg.recycled_delta_path);
    save_delta(cfg.recycled_delta_path, rr.delta);
    fs::create_directories(cfg.report_dir);
    MetricsReport memit = evaluate(rr.params, in.tok, block, cfg.edit_language);
    MetricsReport memat = evaluate(rr.params, in.tok, block, cfg.edit_language, &rr.patch);
    stamp(memit, cfg);
    stamp(memat, cfg);
    memit.metadata["variant"] = "memit";
    memat.metadata["variant"] = "memat";
    const fs::path a = cfg.report_dir / "recycle_memit.json";
    const fs::path b = cfg.report_dir / "recycle_memat.json";
    const fs::path csv = cfg.report_dir / "recycle.csv";
    save_report_json(a, memit);
    save_report_json(b, memat);
    save_metrics_csv(csv, {{"memit", memit}, {"memat", memat}});
    record_stage(cfg, "recycle", {cfg.recycled_delta_path, a, b, csv});
    return {{cfg.recycled_delta_path, a, b, csv},
            "recycled onto " + std::to_string(block.size()) + " held-out facts: EM " +
                fmt3(memit.em.value) + " -> " + fmt3(memat.em.value)};
}

int exit_code_for(const std::exception& e) {
    if (dynamic_cast<const ConfigError*>(&e)) return 2;
    if (dynamic_cast<const InputError*>(&e)) return 3;
    if (dynamic_cast<const IoError*>(&e)) return 4;
    if (dynamic_cast<const ProtocolError*>(&e)) return 5;
    if (dynamic_cast<const TrainingError*>(&e)) return 6;
    if (dynamic_cast<const SolverError*>(&e)) return 7;
    if (dynamic_cast<const GenerationError*>(&e)) return 8;
    if (dynamic_cast<const ContractError*>(&e)) return 9;
    return 1;
}

const char* error_category(const std::exception& e) {
    if (dynamic_cast<const ConfigError*>(&e)) return "config";
    if (dynamic_cast<const InputError*>(&e)) return "input";
    if (dynamic_cast<const IoError*>(&e)) return "io";
    if (dynamic_cast<const ProtocolError*>(&e)) return "protocol";
    if (dynamic_cast<const TrainingError*>(&e)) return "training";
    if (dynamic_cast<const SolverError*>(&e)) return "solver";
    if (dynamic_cast<const GenerationError*>(&e)) return "generation";
    if (dynamic_cast<const ContractError*>(&e)) return "contract";
    return "internal";
}

}  // namespace memat
