#pragma once

#include "memat/dataset.hpp"
#include "memat/model.hpp"
#include "memat/tokenizer.hpp"

#include <filesystem>

namespace memat {

// Labeled head activations at the final token of "prompt + object" sentences.
// Every (layer, head) slot holds the same examples in the same order; each
// record contributes one label-0 row (old object) and one label-1 row (edited
// object), so labels are balanced by construction.
struct ProbeDataset {
    int n_layers = 0;
    int n_heads = 0;
    int head_dim = 0;
    std::vector<Mat> activations;  // per head slot: examples x head_dim
    std::vector<int> labels;       // shared across heads, values 0/1
    std::vector<int> record_ids;   // provenance, one entry per example
    std::vector<int> train_idx;    // disjoint example indices
    std::vector<int> val_idx;

    int head_index(int layer, int head) const;  // 1-based in, flat slot out
    void validate() const;
};

// One logistic probe; the prediction is the Heaviside step on the logit.
struct HeadClassifier {
    Vec theta;  // 1 x head_dim
    double bias = 0.0;
    bool trained = false;

    double logit(const Vec& head) const;
    int predict(const Vec& head) const { return logit(head) > 0.0 ? 1 : 0; }
};

// Validation accuracy per (layer, head).
struct AccuracyMap {
    Mat values;  // n_layers x n_heads, entries in [0, 1]
    double peak() const { return values.size() ? values.maxCoeff() : 0.0; }
};

// Traces every head at the final token of "prompt + old object" (label 0) and
// "prompt + edited object" (label 1). With refine set, only records whose
// greedy completion already equals the edited object are kept; fewer than 10
// surviving records is an error. The train/validation split is by record, so
// the two sentences of a record never straddle the split.
ProbeDataset collect_probe_data(const ModelParams& params, const Tokenizer& tok,
                                const std::vector<FactRecord>& records, bool refine,
                                uint64_t seed, double val_fraction = 0.4);

// Full-batch logistic regression per head (L2 1e-3, 500 iterations) on the
// train split, scored on the validation split.
std::pair<std::vector<HeadClassifier>, AccuracyMap> train_probes(const ProbeDataset& ds);

// The K most accurate positions, ranked best first; ties go to the lower
// layer, then the lower head, which makes the sets nest across K.
std::vector<HeadKey> select_top_k(const AccuracyMap& map, int k);

void save_accuracy_csv(const std::filesystem::path& path, const AccuracyMap& map);
AccuracyMap load_accuracy_csv(const std::filesystem::path& path);

void save_heads_json(const std::filesystem::path& path, const std::vector<HeadKey>& heads,
                     const AccuracyMap* accuracies = nullptr);
std::vector<HeadKey> load_heads_json(const std::filesystem::path& path);

struct ClassifierSet {
    int n_layers = 0;
    int n_heads = 0;
    std::vector<HeadClassifier> classifiers;  // one per head slot, (l, h) order
};

void save_classifiers_json(const std::filesystem::path& path, const ClassifierSet& set);
ClassifierSet load_classifiers_json(const std::filesystem::path& path);

}  // namespace memat
