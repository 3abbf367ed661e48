#pragma once

#include "memat/corrections.hpp"
#include "memat/dataset.hpp"
#include "memat/evaluation.hpp"
#include "memat/memit.hpp"
#include "memat/model.hpp"
#include "memat/train.hpp"

#include <filesystem>
#include <string>
#include <vector>

namespace memat {

// One experiment end to end: where artifacts live, how each stage is
// parameterized, and the seed everything derives from. The file format is
// versioned JSON mirroring the field names below; model.vocab_size acts as
// the tokenizer budget, and the models built downstream use the trained
// vocabulary size.
struct ExperimentConfig {
    std::filesystem::path corpus_path = "run/corpus.json";
    std::filesystem::path tokenizer_path = "run/tokenizer.json";
    std::filesystem::path checkpoint_path = "run/base.ckpt";
    std::filesystem::path delta_path = "run/edit.delta";
    std::filesystem::path recycled_delta_path = "run/recycle.delta";
    std::filesystem::path corrections_path = "run/heads.corr";
    std::filesystem::path probe_dir = "run/probe";
    std::filesystem::path report_dir = "run/reports";
    std::filesystem::path manifest_path = "run/manifest.json";

    ModelConfig model;
    CorpusConfig corpus;
    PretrainOptions pretrain;
    EditConfig edit;
    MematConfig memat;

    Language edit_language = Language::la;
    Language eval_language = Language::lb;
    bool probe_refine = false;
    double probe_val_fraction = 0.4;
    std::string eval_against = "memit";  // baseline | memit | memat
    std::vector<int> sweep_k = {2, 4};
    int scale_begin = 0;
    int scale_end = 8;
    // drop the corrections' own training records from the scaling pool, so
    // same-language recycling stays on held-out facts
    bool scale_exclude_correction_records = true;
    int workers = 0;  // 0 = all cores; results never depend on the count
    uint64_t seed = 0;

    void validate() const;
    std::string hash() const;  // stable digest over every field
};

// The stock configuration; kl_template is just the subject so it stays inside
// any generated vocabulary.
ExperimentConfig default_experiment_config();

void save_experiment_config(const std::filesystem::path& path, const ExperimentConfig& cfg);
ExperimentConfig load_experiment_config(const std::filesystem::path& path);

// Sets one field through its dotted JSON name ("seed", "model.n_layers",
// "edit.critical_layers"). Values are parsed as JSON except when the field
// holds a string. Unknown names or type mismatches are config errors.
void apply_override(ExperimentConfig& cfg, const std::string& key, const std::string& value);

// A configuration serialized the same way save_experiment_config writes it.
std::string dump_config(const ExperimentConfig& cfg);

// The default configuration serialized, for help text.
std::string config_schema();

struct StageOutcome {
    std::vector<std::filesystem::path> artifacts;
    std::string summary;  // one line for the terminal
};

// Each stage checks its upstream stages in the manifest (same config hash
// unless force is set, artifacts still on disk), writes only its declared
// artifacts and records itself. Reruns with one config and seed are
// byte-identical.
StageOutcome run_gen(const ExperimentConfig& cfg, bool force = false);
StageOutcome run_pretrain(const ExperimentConfig& cfg, bool force = false);
StageOutcome run_edit(const ExperimentConfig& cfg, bool force = false);
StageOutcome run_probe(const ExperimentConfig& cfg, bool force = false);
StageOutcome run_optimize(const ExperimentConfig& cfg, bool force = false);
StageOutcome run_eval(const ExperimentConfig& cfg, bool force = false);
StageOutcome run_sweep(const ExperimentConfig& cfg, bool force = false);
StageOutcome run_scale(const ExperimentConfig& cfg, bool force = false);
StageOutcome run_recycle(const ExperimentConfig& cfg, bool force = false);

// Exit code and label for the error taxonomy, shared by the command line
// front end and its tests.
int exit_code_for(const std::exception& e);
const char* error_category(const std::exception& e);

}  // namespace memat
