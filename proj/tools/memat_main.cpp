#include "memat/pipeline.hpp"

#include "CLI11.hpp"

#include <filesystem>
#include <iostream>
#include <map>
#include <string>
#include <vector>

namespace {

using memat::ExperimentConfig;
using memat::StageOutcome;

using StageFn = StageOutcome (*)(const ExperimentConfig&, bool);

const std::map<std::string, std::pair<const char*, StageFn>> kStages = {
    {"gen", {"generate the bilingual fact corpus and its tokenizer", &memat::run_gen}},
    {"pretrain", {"train the base model until it recalls the corpus", &memat::run_pretrain}},
    {"edit", {"apply the closed-form weight edit for the edit-language facts", &memat::run_edit}},
    {"probe", {"train per-head truthfulness probes on the edited model", &memat::run_probe}},
    {"optimize", {"fit additive head corrections on the probed positions", &memat::run_optimize}},
    {"eval", {"score a model composition on every language", &memat::run_eval}},
    {"sweep", {"rerun probing and correction across the configured K values", &memat::run_sweep}},
    {"scale", {"edit growing record counts and recycle the trained corrections",
               &memat::run_scale}},
    {"recycle", {"re-edit held-out facts and reuse the trained corrections",
                 &memat::run_recycle}},
};

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"desk-scale laboratory for editing factual memories in toy transformers"};
    app.require_subcommand(1);
    app.fallthrough();

    std::string config_path = "experiment.json";
    std::vector<std::string> overrides;
    bool force = false;
    int workers = -1;
    app.add_option("-c,--config", config_path, "experiment config file")->capture_default_str();
    app.add_option("--set", overrides,
                   "override one config field as name=value (dotted names, repeatable)");
    app.add_flag("--force", force, "ignore config-hash mismatches on upstream artifacts");
    app.add_option("--workers", workers, "bound parallel per-record work (0 = all cores)");

    const std::string footer = "Config fields and defaults:\n" + memat::config_schema();
    std::string chosen;
    for (const auto& [name, entry] : kStages) {
        CLI::App* sub = app.add_subcommand(name, entry.first);
        sub->footer(footer);
        sub->callback([&chosen, name = name] { chosen = name; });
    }

    std::string against;
    app.get_subcommand("eval")->add_option(
        "--against", against, "model composition to score: baseline, memit or memat");

    bool print_only = false;
    CLI::App* init = app.add_subcommand("init", "write a config file: defaults plus any --set");
    init->footer(footer);
    init->add_flag("--print", print_only, "print the config instead of writing it");
    init->callback([&chosen] { chosen = "init"; });

    CLI11_PARSE(app, argc, argv);

    try {
        const auto apply_sets = [&overrides](ExperimentConfig& cfg) {
            for (const std::string& kv : overrides) {
                const size_t eq = kv.find('=');
                if (eq == std::string::npos || eq == 0)
                    throw memat::ConfigError("--set expects name=value, got \"" + kv + "\"");
                memat::apply_override(cfg, kv.substr(0, eq), kv.substr(eq + 1));
            }
        };

        if (chosen == "init") {
            ExperimentConfig cfg = memat::default_experiment_config();
            apply_sets(cfg);
            if (print_only) {
                cfg.validate();
                std::cout << memat::dump_config(cfg) << '\n';
                return 0;
            }
            if (std::filesystem::exists(config_path) && !force)
                throw memat::IoError(config_path + " already exists; pass --force to replace it");
            memat::save_experiment_config(config_path, cfg);
            std::cout << "wrote " << config_path << '\n';
            return 0;
        }

        ExperimentConfig cfg = memat::load_experiment_config(config_path);
        apply_sets(cfg);
        if (!against.empty()) cfg.eval_against = against;
        if (workers >= 0) cfg.workers = workers;

        const StageOutcome outcome = kStages.at(chosen).second(cfg, force);
        std::cout << outcome.summary << '\n';
        for (const std::filesystem::path& artifact : outcome.artifacts)
            std::cout << "  wrote " << artifact.string() << '\n';
        return 0;
    } catch (const std::exception& e) {
        std::cerr << "error (" << memat::error_category(e) << "): " << e.what() << '\n';
        return memat::exit_code_for(e);
    }
}
