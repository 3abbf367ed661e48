// Python surface: corpus generation, tokenization, the model itself, edits,
// head probes and corrections, the metric suite and the staged pipeline.
// Heavy state (models, banks, correction sets) stays opaque; everything
// numeric crosses as plain floats, lists and dicts.
#include "memat/checkpoint.hpp"
#include "memat/pipeline.hpp"

#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include <sstream>

namespace py = pybind11;
using namespace memat;

namespace {

std::vector<int> to_ids(const py::sequence& seq) {
    std::vector<int> out;
    out.reserve(py::len(seq));
    for (const auto& item : seq) out.push_back(py::cast<int>(item));
    return out;
}

py::dict metric_dict(const MetricsReport& r) {
    py::dict d;
    const std::pair<const char*, const MetricValue*> named[] = {
        {"es", &r.es}, {"ps", &r.ps}, {"ns", &r.ns}, {"em", &r.em}, {"pm", &r.pm},
        {"nm", &r.nm}, {"ea", &r.ea}, {"pa", &r.pa}, {"na", &r.na}};
    for (const auto& [name, v] : named) d[name] = py::make_tuple(v->value, v->ci);
    d["n_records"] = r.n_records;
    d["language"] = r.language;
    d["metadata"] = r.metadata;
    return d;
}

template <typename Err>
void register_error(py::module_& m, py::object base, const char* name) {
    static py::exception<Err> exc(m, name, base.ptr());
    py::register_exception_translator([](std::exception_ptr p) {
        try {
            if (p) std::rethrow_exception(p);
        } catch (const Err& e) {
            exc(e.what());
        }
    });
}

}  // namespace

PYBIND11_MODULE(_memat, m) {
    m.doc() = "memory editing laboratory for toy transformers";

    py::object base_error = py::module_::import("builtins").attr("RuntimeError");
    register_error<ConfigError>(m, base_error, "ConfigError");
    register_error<InputError>(m, base_error, "InputError");
    register_error<IoError>(m, base_error, "IoError");
    register_error<ProtocolError>(m, base_error, "ProtocolError");
    register_error<TrainingError>(m, base_error, "TrainingError");
    register_error<SolverError>(m, base_error, "SolverError");
    register_error<GenerationError>(m, base_error, "GenerationError");
    register_error<ContractError>(m, base_error, "ContractError");

    py::enum_<Language>(m, "Language")
        .value("LA", Language::la)
        .value("LB", Language::lb);
    py::enum_<Stratum>(m, "Stratum")
        .value("IDENTICAL", Stratum::identical)
        .value("LOW", Stratum::low);

    // ------------------------------------------------------------- dataset
    py::class_<JaccardProfile>(m, "JaccardProfile")
        .def(py::init<>())
        .def_readwrite("identical", &JaccardProfile::identical)
        .def_readwrite("low", &JaccardProfile::low);

    py::class_<CorpusConfig>(m, "CorpusConfig")
        .def(py::init<>())
        .def_readwrite("n_pairs", &CorpusConfig::n_pairs)
        .def_readwrite("jaccard_profile", &CorpusConfig::jaccard_profile)
        .def_readwrite("subject_words", &CorpusConfig::subject_words)
        .def_readwrite("relation_words_per_language", &CorpusConfig::relation_words_per_language)
        .def_readwrite("object_words_per_language", &CorpusConfig::object_words_per_language)
        .def_readwrite("filler_words_per_language", &CorpusConfig::filler_words_per_language)
        .def_readwrite("noise_min", &CorpusConfig::noise_min)
        .def_readwrite("noise_max", &CorpusConfig::noise_max)
        .def_readwrite("duplication_on_gender", &CorpusConfig::duplication_on_gender)
        .def_readwrite("seed", &CorpusConfig::seed);

    py::class_<NeighborhoodPrompt>(m, "NeighborhoodPrompt")
        .def_readonly("prompt", &NeighborhoodPrompt::prompt)
        .def_readonly("subject", &NeighborhoodPrompt::subject);

    py::class_<FactRecord>(m, "FactRecord")
        .def_readonly("id", &FactRecord::id)
        .def_readonly("pair_id", &FactRecord::pair_id)
        .def_readonly("language", &FactRecord::language)
        .def_readonly("subject", &FactRecord::subject)
        .def_readonly("relation_template", &FactRecord::relation_template)
        .def_readonly("target_true", &FactRecord::target_true)
        .def_readonly("target_new", &FactRecord::target_new)
        .def_readonly("efficacy_prompt", &FactRecord::efficacy_prompt)
        .def_readonly("paraphrase_prompts", &FactRecord::paraphrase_prompts)
        .def_readonly("neighborhood_prompts", &FactRecord::neighborhood_prompts)
        .def("__repr__", [](const FactRecord& r) {
            return "FactRecord(id=" + std::to_string(r.id) + ", " + to_string(r.language) +
                   ", subject='" + r.subject + "')";
        });

    m.def("generate_corpus", &generate_corpus, py::arg("config"));
    m.def("corpus_vocabulary", &corpus_vocabulary, py::arg("config"));
    m.def("corpus_texts", &corpus_texts, py::arg("records"));
    m.def("jaccard_index", &jaccard_index, py::arg("a"), py::arg("b"));
    m.def("save_corpus", &save_corpus, py::arg("path"), py::arg("records"));
    m.def("load_corpus", &load_corpus, py::arg("path"));
    m.def("fill_template", &fill_template, py::arg("template"), py::arg("subject"));
    m.def("language_name", [](Language l) { return to_string(l); });

    // ----------------------------------------------------------- tokenizer
    py::class_<Tokenizer>(m, "Tokenizer")
        .def_static("train", &Tokenizer::train, py::arg("texts"), py::arg("vocab_size"))
        .def_static("load", &Tokenizer::load, py::arg("path"))
        .def("save", &Tokenizer::save, py::arg("path"))
        .def("encode", &Tokenizer::encode, py::arg("text"))
        .def("decode", &Tokenizer::decode, py::arg("ids"))
        .def("vocab", &Tokenizer::vocab)
        .def("has_word", &Tokenizer::has_word, py::arg("word"))
        .def("word_id", &Tokenizer::word_id, py::arg("word"));

    // --------------------------------------------------------------- model
    py::class_<ModelConfig>(m, "ModelConfig")
        .def(py::init<>())
        .def_readwrite("n_layers", &ModelConfig::n_layers)
        .def_readwrite("n_heads", &ModelConfig::n_heads)
        .def_readwrite("d_model", &ModelConfig::d_model)
        .def_readwrite("d_ff", &ModelConfig::d_ff)
        .def_readwrite("vocab_size", &ModelConfig::vocab_size)
        .def_readwrite("max_seq_len", &ModelConfig::max_seq_len)
        .def_readwrite("seed", &ModelConfig::seed);

    py::class_<ModelParams>(m, "Model")
        .def_property_readonly("config", [](const ModelParams& p) { return p.config; })
        .def("content_hash", &ModelParams::content_hash)
        .def("__repr__", [](const ModelParams& p) {
            std::ostringstream ss;
            ss << "Model(layers=" << p.config.n_layers << ", heads=" << p.config.n_heads
               << ", d=" << p.config.d_model << ", vocab=" << p.config.vocab_size << ")";
            return ss.str();
        });

    m.def("init_model", &init_model, py::arg("config"));
    m.def(
        "sequence_logprob",
        [](const ModelParams& p, const py::sequence& prompt, const py::sequence& cont) {
            return sequence_logprob(p, to_ids(prompt), to_ids(cont));
        },
        py::arg("model"), py::arg("prompt"), py::arg("continuation"));
    m.def(
        "generate",
        [](const ModelParams& p, const py::sequence& prompt, int n, double temp, uint64_t seed) {
            return generate(p, to_ids(prompt), n, temp, seed);
        },
        py::arg("model"), py::arg("prompt"), py::arg("n_tokens"), py::arg("temperature") = 0.0,
        py::arg("seed") = 0);

    m.def(
        "save_model",
        [](const std::filesystem::path& path, const ModelParams& p, const CheckpointMeta& meta) {
            save_model(path, p, meta);
        },
        py::arg("path"), py::arg("model"), py::arg("meta") = CheckpointMeta{});
    m.def(
        "load_model",
        [](const std::filesystem::path& path) {
            LoadedModel lm = load_model(path);
            return py::make_tuple(std::move(lm.params), lm.meta);
        },
        py::arg("path"));

    // ------------------------------------------------------------ pretrain
    py::class_<PretrainOptions>(m, "PretrainOptions")
        .def(py::init<>())
        .def_readwrite("max_steps", &PretrainOptions::max_steps)
        .def_readwrite("lr", &PretrainOptions::lr)
        .def_readwrite("seed", &PretrainOptions::seed)
        .def_readwrite("filler_fraction", &PretrainOptions::filler_fraction)
        .def_readwrite("recall_gate", &PretrainOptions::recall_gate)
        .def_readwrite("gate_interval", &PretrainOptions::gate_interval)
        .def_readwrite("batch_rows", &PretrainOptions::batch_rows);

    py::class_<PretrainReport>(m, "PretrainReport")
        .def_readonly("steps_run", &PretrainReport::steps_run)
        .def_readonly("initial_loss", &PretrainReport::initial_loss)
        .def_readonly("final_loss", &PretrainReport::final_loss)
        .def_readonly("recall", &PretrainReport::recall)
        .def_readonly("gate_passed", &PretrainReport::gate_passed);

    m.def("pretrain", &pretrain, py::arg("model"), py::arg("tokenizer"), py::arg("records"),
          py::arg("options"));
    m.def("fact_recall", &fact_recall, py::arg("model"), py::arg("tokenizer"),
          py::arg("records"), py::arg("patch") = nullptr);

    // ---------------------------------------------------------------- edit
    py::class_<EditConfig>(m, "EditConfig")
        .def(py::init<>())
        .def_readwrite("critical_layers", &EditConfig::critical_layers)
        .def_readwrite("target_opt_steps", &EditConfig::target_opt_steps)
        .def_readwrite("target_lr", &EditConfig::target_lr)
        .def_readwrite("target_nll_gate", &EditConfig::target_nll_gate)
        .def_readwrite("key_prefix_count", &EditConfig::key_prefix_count)
        .def_readwrite("covariance_sample_count", &EditConfig::covariance_sample_count)
        .def_readwrite("covariance_scale", &EditConfig::covariance_scale);

    py::class_<KeyBank>(m, "KeyBank");
    py::class_<EditDelta>(m, "EditDelta")
        .def_readonly("language", &EditDelta::language)
        .def_readonly("record_ids", &EditDelta::record_ids);

    m.def("build_key_bank", &build_key_bank, py::arg("model"), py::arg("tokenizer"),
          py::arg("texts"), py::arg("layers"), py::arg("samples"), py::arg("seed"));
    m.def("apply_edit", &apply_edit, py::arg("model"), py::arg("tokenizer"), py::arg("records"),
          py::arg("bank"), py::arg("config"), py::arg("seed"));
    m.def("joint_edit", &joint_edit, py::arg("model"), py::arg("tokenizer"), py::arg("records"),
          py::arg("bank"), py::arg("config"), py::arg("seed"));
    m.def("apply_delta", &apply_delta, py::arg("model"), py::arg("delta"));
    m.def("save_delta", &save_delta, py::arg("path"), py::arg("delta"));
    m.def("load_delta", &load_delta, py::arg("path"));

    // --------------------------------------------------------------- probe
    py::class_<HeadKey>(m, "HeadKey")
        .def(py::init<int, int>(), py::arg("layer"), py::arg("head"))
        .def_readwrite("layer", &HeadKey::layer)
        .def_readwrite("head", &HeadKey::head)
        .def("__repr__", [](const HeadKey& k) {
            return "HeadKey(layer=" + std::to_string(k.layer) +
                   ", head=" + std::to_string(k.head) + ")";
        });

    py::class_<ProbeDataset>(m, "ProbeDataset")
        .def_readonly("n_layers", &ProbeDataset::n_layers)
        .def_readonly("n_heads", &ProbeDataset::n_heads)
        .def_readonly("labels", &ProbeDataset::labels)
        .def_readonly("record_ids", &ProbeDataset::record_ids);

    py::class_<AccuracyMap>(m, "AccuracyMap")
        .def("peak", &AccuracyMap::peak)
        .def("at", [](const AccuracyMap& a, int layer, int head) {
            return a.values(layer - 1, head - 1);
        }, py::arg("layer"), py::arg("head"));

    m.def("collect_probe_data", &collect_probe_data, py::arg("model"), py::arg("tokenizer"),
          py::arg("records"), py::arg("refine"), py::arg("seed"),
          py::arg("val_fraction") = 0.4);
    m.def(
        "train_probes",
        [](const ProbeDataset& ds) { return train_probes(ds).second; },
        py::arg("dataset"), "Validation accuracies per head; classifiers stay internal.");
    m.def("select_top_k", &select_top_k, py::arg("accuracies"), py::arg("k"));

    // --------------------------------------------------------- corrections
    py::class_<MematConfig>(m, "MematConfig")
        .def(py::init<>())
        .def_readwrite("k", &MematConfig::k)
        .def_readwrite("lambda_omega", &MematConfig::lambda_omega)
        .def_readwrite("r_prefixes", &MematConfig::r_prefixes)
        .def_readwrite("adam_lr", &MematConfig::adam_lr)
        .def_readwrite("batch_size", &MematConfig::batch_size)
        .def_readwrite("grad_accum", &MematConfig::grad_accum)
        .def_readwrite("max_epochs", &MematConfig::max_epochs)
        .def_readwrite("kl_template", &MematConfig::kl_template);

    py::class_<HeadCorrectionSet>(m, "HeadCorrectionSet")
        .def_readonly("positions", &HeadCorrectionSet::positions)
        .def_readonly("language_edit", &HeadCorrectionSet::language_edit)
        .def_readonly("language_probe", &HeadCorrectionSet::language_probe)
        .def_readonly("epochs", &HeadCorrectionSet::epochs)
        .def_readonly("record_ids", &HeadCorrectionSet::record_ids)
        .def_readonly("epoch_losses", &HeadCorrectionSet::epoch_losses);

    py::class_<HeadPatch>(m, "HeadPatch").def("empty", &HeadPatch::empty);

    py::class_<RecycleResult>(m, "RecycleResult")
        .def_readonly("params", &RecycleResult::params)
        .def_readonly("delta", &RecycleResult::delta)
        .def_readonly("patch", &RecycleResult::patch);

    m.def(
        "optimize_corrections",
        [](const ModelParams& p, const Tokenizer& tok, const std::vector<FactRecord>& records,
           const std::vector<HeadKey>& psi, const MematConfig& cfg, uint64_t seed) {
            return optimize_corrections(p, tok, records, psi, cfg, seed);
        },
        py::arg("model"), py::arg("tokenizer"), py::arg("records"), py::arg("heads"),
        py::arg("config"), py::arg("seed"));
    m.def("apply_corrections", &apply_corrections, py::arg("model"), py::arg("corrections"));
    m.def("recycle_corrections", &recycle_corrections, py::arg("base"), py::arg("tokenizer"),
          py::arg("new_records"), py::arg("corrections"), py::arg("bank"), py::arg("edit_config"),
          py::arg("seed"), py::arg("allow_overlap") = false);
    m.def("save_corrections", &save_corrections, py::arg("path"), py::arg("corrections"));
    m.def("load_corrections", &load_corrections, py::arg("path"));

    // ---------------------------------------------------------- evaluation
    m.def(
        "evaluate",
        [](const ModelParams& p, const Tokenizer& tok, const std::vector<FactRecord>& records,
           Language lang, const HeadPatch* patch) {
            return metric_dict(evaluate(p, tok, records, lang, patch));
        },
        py::arg("model"), py::arg("tokenizer"), py::arg("records"), py::arg("language"),
        py::arg("patch") = nullptr,
        "Returns {metric: (value, ci)} plus n_records, language and metadata.");
    m.def(
        "k_sweep",
        [](const ModelParams& base, const Tokenizer& tok,
           const std::vector<FactRecord>& edit_records,
           const std::vector<FactRecord>& probe_records, const KeyBank& bank,
           const EditConfig& edit_cfg, const MematConfig& memat_cfg,
           const std::vector<int>& ks, bool refine, uint64_t seed) {
            py::list out;
            for (const SweepEntry& e :
                 k_sweep(base, tok, edit_records, probe_records, bank, edit_cfg, memat_cfg, ks,
                         refine, seed)) {
                py::dict d = metric_dict(e.report);
                d["k"] = e.k;
                out.append(d);
            }
            return out;
        },
        py::arg("base"), py::arg("tokenizer"), py::arg("edit_records"), py::arg("probe_records"),
        py::arg("bank"), py::arg("edit_config"), py::arg("memat_config"), py::arg("k_values"),
        py::arg("refine") = false, py::arg("seed") = 0);
    m.def(
        "crosslingual_matrix",
        [](const ModelParams& base, const Tokenizer& tok, const std::vector<FactRecord>& records,
           const KeyBank& bank, const EditConfig& cfg, uint64_t seed) {
            py::list out;
            for (const CrossLingualCell& c :
                 crosslingual_matrix(base, tok, records, bank, cfg, seed)) {
                py::dict d = metric_dict(c.report);
                d["edit_language"] = to_string(c.edit_language);
                d["eval_language"] = to_string(c.eval_language);
                d["stratum"] = to_string(c.stratum);
                out.append(d);
            }
            return out;
        },
        py::arg("base"), py::arg("tokenizer"), py::arg("records"), py::arg("bank"),
        py::arg("edit_config"), py::arg("seed"));
    m.def("scaling_counts", [](int i_begin, int i_end) {
        return ScalingSchedule::build(i_begin, i_end).counts;
    }, py::arg("i_begin"), py::arg("i_end"));

    // ------------------------------------------------------------ pipeline
    py::class_<ExperimentConfig>(m, "ExperimentConfig")
        .def("validate", &ExperimentConfig::validate)
        .def("hash", &ExperimentConfig::hash)
        .def("set", &apply_override, py::arg("key"), py::arg("value"),
             "Assign one field through its dotted name, e.g. set('model.n_layers', '4').")
        .def("dump", &dump_config)
        .def("__repr__", [](const ExperimentConfig& c) {
            return "ExperimentConfig(hash=" + c.hash() + ")";
        });

    m.def("default_config", &default_experiment_config);
    m.def("load_config", &load_experiment_config, py::arg("path"));
    m.def("save_config", &save_experiment_config, py::arg("path"), py::arg("config"));

    py::class_<StageOutcome>(m, "StageOutcome")
        .def_readonly("artifacts", &StageOutcome::artifacts)
        .def_readonly("summary", &StageOutcome::summary)
        .def("__repr__", [](const StageOutcome& o) { return "StageOutcome(" + o.summary + ")"; });

    m.def("run_gen", &run_gen, py::arg("config"), py::arg("force") = false);
    m.def("run_pretrain", &run_pretrain, py::arg("config"), py::arg("force") = false);
    m.def("run_edit", &run_edit, py::arg("config"), py::arg("force") = false);
    m.def("run_probe", &run_probe, py::arg("config"), py::arg("force") = false);
    m.def("run_optimize", &run_optimize, py::arg("config"), py::arg("force") = false);
    m.def("run_eval", &run_eval, py::arg("config"), py::arg("force") = false);
    m.def("run_sweep", &run_sweep, py::arg("config"), py::arg("force") = false);
    m.def("run_scale", &run_scale, py::arg("config"), py::arg("force") = false);
    m.def("run_recycle", &run_recycle, py::arg("config"), py::arg("force") = false);
}
