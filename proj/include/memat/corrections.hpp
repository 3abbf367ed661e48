#pragma once

#include "memat/memit.hpp"
#include "memat/probe.hpp"

namespace memat {

// Settings for training head corrections on top of an edited model.
struct MematConfig {
    int k = 16;                 // size of the selected head set
    double lambda_omega = 10.0; // weight of the relative-norm penalty
    int r_prefixes = 4;         // random prefixes per record in the recall term
    double adam_lr = 5e-3;
    double adam_beta1 = 0.9;
    double adam_beta2 = 0.999;
    double adam_eps = 1e-8;
    int batch_size = 32;
    int grad_accum = 4;         // micro-batches per optimizer step
    int max_epochs = 10;
    // Prompt whose next-token distribution is held in place by the divergence
    // term; "{}" is replaced with each record's subject.
    std::string kl_template = "{} is a";
    void validate() const;
};

// Trained additive offsets for a ranked set of heads, with enough metadata to
// recycle them onto a different edit.
struct HeadCorrectionSet {
    std::vector<HeadKey> positions;  // ranked, best head first
    std::vector<Vec> omegas;         // parallel to positions, each 1 x d/H
    std::string language_edit;       // language the underlying edit used
    std::string language_probe;      // language the corrections were trained on
    double lambda_omega = 0.0;
    int r_prefixes = 0;
    int epochs = 0;
    std::vector<int> record_ids;         // records seen during training
    std::vector<double> epoch_losses;    // mean loss per epoch, for monitoring
    void validate(const ModelConfig& cfg) const;
};

// prefixes[i][j] is the j-th sampled prefix for records[i]
using PrefixSet = std::vector<std::vector<std::vector<int>>>;

// Model-sampled prefixes (temperature 1.0, lengths 2-10), derived from the
// record id so they are stable across epochs and record orderings.
PrefixSet make_correction_prefixes(const ModelParams& params,
                                   const std::vector<FactRecord>& records, int count,
                                   uint64_t seed);

// Mean training loss over `records` at fixed offsets, and its gradient with
// respect to each offset. The loss is the penalty + recall + divergence sum
// that optimize_corrections minimizes; exposed for direct inspection.
std::pair<double, std::vector<Vec>> corrections_loss_grad(
    const ModelParams& params, const Tokenizer& tok, const std::vector<FactRecord>& records,
    const std::vector<HeadKey>& psi, const std::vector<Vec>& omegas, const MematConfig& cfg,
    const PrefixSet& prefixes);

// Adam over all records jointly with micro-batching and gradient accumulation.
// Offsets start at zero, so the initial model is exactly the edited one.
HeadCorrectionSet optimize_corrections(const ModelParams& params, const Tokenizer& tok,
                                       const std::vector<FactRecord>& records,
                                       const std::vector<HeadKey>& psi, const MematConfig& cfg,
                                       uint64_t seed,
                                       const PrefixSet* prefix_override = nullptr);

// Removable patch handle; the underlying weights are never touched.
HeadPatch apply_corrections(const ModelParams& params, const HeadCorrectionSet& corrections);

struct RecycleResult {
    ModelParams params;  // base model edited on the new records
    EditDelta delta;
    HeadPatch patch;     // the old corrections, unchanged
};

// Edits the base model on a fresh record set and re-applies corrections that
// were trained against a different edit. The two record sets must be disjoint
// unless allow_overlap is set.
RecycleResult recycle_corrections(const ModelParams& base, const Tokenizer& tok,
                                  const std::vector<FactRecord>& new_records,
                                  const HeadCorrectionSet& corrections, const KeyBank& bank,
                                  const EditConfig& edit_cfg, uint64_t seed,
                                  bool allow_overlap = false);

// Averaging baseline: each offset is alpha times the mean activation of the
// truthful-label examples at that head. No optimization.
HeadCorrectionSet iti_baseline(const ModelParams& params, const ProbeDataset& dataset,
                               const std::vector<HeadKey>& psi, double alpha);

void save_corrections(const std::filesystem::path& path, const HeadCorrectionSet& set);
HeadCorrectionSet load_corrections(const std::filesystem::path& path);

}  // namespace memat
