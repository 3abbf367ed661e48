#pragma once

#include "memat/dataset.hpp"
#include "memat/model.hpp"
#include "memat/tokenizer.hpp"

#include <filesystem>
#include <map>

namespace memat {

// Settings for the MLP edit. Layers are 1-based; the last critical layer is
// where target residuals are optimized before being spread downward.
struct EditConfig {
    std::vector<int> critical_layers{3, 4, 5};  // strictly increasing, all below the final layer
    int target_opt_steps = 25;
    double target_lr = 0.2;
    double target_nll_gate = 0.05;        // early stop once mean NLL drops below
    int key_prefix_count = 4;             // context 0 is always the empty prefix
    int covariance_sample_count = 10000;  // rows of K0
    double covariance_scale = 1.0;        // weight of the preservation term

    void validate(int n_layers) const;
    std::string hash() const;  // stable digest over every field
};

// Preexisting keys sampled from pretraining text, one block per critical
// layer, with the derived covariance C0 = K0^T K0.
struct KeyBank {
    std::map<int, Mat> k0;  // layer -> n x d_ff
    std::map<int, Mat> c0;  // layer -> d_ff x d_ff
};

// Additive updates to w_out per critical layer plus provenance.
struct EditDelta {
    std::map<int, Mat> deltas;  // layer -> d_ff x d
    std::string config_hash;
    std::vector<int> record_ids;
    std::string language;
};

struct TargetResult {
    Mat residuals;            // one row per record: the optimized z - h
    Mat targets;              // h (mean over contexts) + residual
    std::vector<double> nll;  // mean sequence NLL of target_new at return
    std::vector<char> gated;  // 1 when the NLL gate stopped the record early
};

// Prefix contexts shared by key collection and target optimization. Context 0
// is empty; the rest are model-generated at temperature 1.0 with lengths in
// [2, 10]. Prefix j depends only on (params, seed, j), never on the count.
std::vector<std::vector<int>> make_edit_prefixes(const ModelParams& params, int count,
                                                 uint64_t seed);

// Mean over prefix contexts of the MLP activation at the final subject token
// of each record's prompt; one row per record.
Mat collect_keys(const ModelParams& params, const Tokenizer& tok,
                 const std::vector<FactRecord>& records, int layer,
                 const std::vector<std::vector<int>>& prefixes);
Mat collect_keys(const ModelParams& params, const Tokenizer& tok,
                 const std::vector<FactRecord>& records, int layer, int prefix_count,
                 uint64_t seed);

// K0 rows drawn with replacement from the keys at every position of the given
// texts (the same sampled positions serve all layers).
KeyBank build_key_bank(const ModelParams& params, const Tokenizer& tok,
                       const std::vector<std::string>& texts, const std::vector<int>& layers,
                       int n, uint64_t seed);

// Gradient descent on a per-record residual injected into x^{top_layer} at the
// final subject token, minimizing the mean NLL of target_new over the prefix
// contexts. The gate is checked before each update, so an already-correct
// record keeps a zero residual.
TargetResult optimize_targets(const ModelParams& params, const Tokenizer& tok,
                              const std::vector<FactRecord>& records, int top_layer, int steps,
                              double lr, double nll_gate,
                              const std::vector<std::vector<int>>& prefixes);

// Closed-form minimizer of
//     lambda_c ||K0 D||_F^2 + ||K1 D - R1||_F^2
// through the normal equations (lambda_c C0 + K1^T K1) D = K1^T R1. The
// result must pass a relative stationarity check.
Mat solve_delta(const Mat& k1, const Mat& r1, const Mat& c0, double lambda_c);

// ||K0 D||_F / ||K0 W||_F: how strongly an update disturbs preexisting keys.
double preservation_ratio(const Mat& k0, const Mat& w_out, const Mat& delta);

// Collect keys, optimize targets at the top critical layer, then walk the
// critical layers upward, each time re-collecting keys, solving for the
// remaining residual share and adding the delta into w_out. Records must all
// be in one language.
std::pair<ModelParams, EditDelta> apply_edit(const ModelParams& params, const Tokenizer& tok,
                                             const std::vector<FactRecord>& records,
                                             const KeyBank& bank, const EditConfig& cfg,
                                             uint64_t seed);

// Same procedure with every record's keys and targets stacked into one
// system, whatever the language mix.
std::pair<ModelParams, EditDelta> joint_edit(const ModelParams& params, const Tokenizer& tok,
                                             const std::vector<FactRecord>& records,
                                             const KeyBank& bank, const EditConfig& cfg,
                                             uint64_t seed);

// Element-wise sum; requires matching configs and layer sets.
EditDelta merge_deltas(const EditDelta& a, const EditDelta& b);

// Adds each stored delta onto w_out of its layer.
ModelParams apply_delta(const ModelParams& params, const EditDelta& delta);

void save_delta(const std::filesystem::path& path, const EditDelta& delta);
EditDelta load_delta(const std::filesystem::path& path);

}  // namespace memat
