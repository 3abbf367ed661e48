#pragma once

#include "memat/corrections.hpp"
#include "memat/dataset.hpp"
#include "memat/memit.hpp"
#include "memat/model.hpp"
#include "memat/tokenizer.hpp"

#include <filesystem>
#include <map>
#include <string>
#include <utility>
#include <vector>

namespace memat {

// Point estimate with its 95% half-width, both in percent.
struct MetricValue {
    double value = 0.0;
    double ci = 0.0;
};

// Everything measured about one record, kept around so any metric can be
// recounted from first principles.
struct RecordEval {
    int record_id = 0;
    double p_new_ep = 0.0;  // P(o* | efficacy prompt)
    double p_true_ep = 0.0;
    std::vector<double> p_new_pp, p_true_pp;  // per paraphrase prompt
    std::vector<double> p_new_np, p_true_np;  // per neighborhood prompt
    int hit_ea = 0;           // greedy completion reproduces o*
    std::vector<int> hit_pa;  // per paraphrase prompt
    std::vector<int> hit_na;  // per neighborhood prompt; o^c is the target there
};

// Success counts the binary preference P(o*) > P(o^c), magnitude averages the
// probability gap, accuracy requires the greedy completion to reproduce every
// object token in order. Neighborhood metrics run the other way around: the
// old object should stay preferred on other subjects' prompts. Values are
// percentages; magnitudes live in [-100, 100].
struct MetricsReport {
    MetricValue es, ps, ns;  // success
    MetricValue em, pm, nm;  // magnitude
    MetricValue ea, pa, na;  // accuracy
    int n_records = 0;
    std::string language;
    std::map<std::string, std::string> metadata;
    std::vector<RecordEval> records;  // the evidence behind the numbers

    void validate() const;
};

// Aggregation step behind evaluate, exposed so the metric arithmetic can be
// driven with hand-built evidence. Paraphrase and neighborhood terms are each
// averaged inside the record first; a record with no such prompts simply
// drops out of those three metrics. Confidence intervals use the normal
// approximation 1.96 * sqrt(var / n) over per-record values.
MetricsReport summarize(const std::vector<RecordEval>& evals, Language language);

// Scores every record of the requested language, optionally under a head
// patch. The model is read-only throughout.
MetricsReport evaluate(const ModelParams& params, const Tokenizer& tok,
                       const std::vector<FactRecord>& records, Language language,
                       const HeadPatch* patch = nullptr);

// Harmonic mean of the three success rates; zero whenever one of them is.
double harmonic_success(const MetricsReport& report);

struct CrossLingualCell {
    Language edit_language = Language::la;
    Language eval_language = Language::la;
    Stratum stratum = Stratum::identical;
    MetricsReport report;
};

// Edits a copy of the base model once per language present, then scores every
// (edit language, eval language, subject-overlap stratum) cell. Empty cells
// are skipped with a warning on stderr.
std::vector<CrossLingualCell> crosslingual_matrix(const ModelParams& base, const Tokenizer& tok,
                                                  const std::vector<FactRecord>& records,
                                                  const KeyBank& bank, const EditConfig& edit_cfg,
                                                  uint64_t seed);

struct SweepEntry {
    int k = 0;  // 0 marks the uncorrected baseline
    MetricsReport report;
};

// One probe-and-correct run per K on top of a single shared edit. The first
// entry is always the bare-edit baseline, and a requested K of 0 reproduces
// it exactly; memat_cfg.k is overridden per entry.
std::vector<SweepEntry> k_sweep(const ModelParams& base, const Tokenizer& tok,
                                const std::vector<FactRecord>& edit_records,
                                const std::vector<FactRecord>& probe_records, const KeyBank& bank,
                                const EditConfig& edit_cfg, const MematConfig& memat_cfg,
                                const std::vector<int>& k_values, bool refine, uint64_t seed);

// Sample counts n_i = round(exp(ln(10000) * i / 16)) over an index range, so
// sixteen steps span 1 to 10,000 log-uniformly.
struct ScalingSchedule {
    int i_begin = 0;
    int i_end = 16;
    std::vector<int> counts;

    static ScalingSchedule build(int i_begin, int i_end);
    void validate() const;
};

struct ScalePoint {
    int n = 0;
    MetricsReport memit;
    MetricsReport memat;
};

// For each sample count, edits a fresh copy of the base model on the first n
// pool records and scores it bare and under the recycled corrections. The
// pool must be disjoint from the records the corrections were trained on.
std::vector<ScalePoint> scaling_curves(const ModelParams& base, const Tokenizer& tok,
                                       const std::vector<FactRecord>& pool,
                                       const HeadCorrectionSet& corrections, const KeyBank& bank,
                                       const EditConfig& edit_cfg, const ScalingSchedule& schedule,
                                       uint64_t seed);

void save_report_json(const std::filesystem::path& path, const MetricsReport& report);
MetricsReport load_report_json(const std::filesystem::path& path);

// One labeled summary row per report, ready for external plotting.
void save_metrics_csv(const std::filesystem::path& path,
                      const std::vector<std::pair<std::string, MetricsReport>>& rows);

}  // namespace memat
