#pragma once

#include "memat/dataset.hpp"
#include "memat/model.hpp"
#include "memat/tokenizer.hpp"

#include <map>

namespace memat {

struct AdamParams {
    double lr = 3e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

// Per-tensor Adam moments, keyed by tensor name.
class Adam {
public:
    explicit Adam(AdamParams p) : p_(p) {}
    void step_begin() { ++t_; }
    void update(const std::string& name, Mat& param, const Mat& grad);
    int64_t steps() const { return t_; }

private:
    AdamParams p_;
    int64_t t_ = 0;
    std::map<std::string, Mat> m_, v_;
};

struct PretrainOptions {
    int max_steps = 4000;  // hard budget; the recall gate may stop earlier
    double lr = 3e-4;
    uint64_t seed = 0;
    double filler_fraction = 0.30;
    // filler sentence vocabulary; empty = harvest the paraphrase noise words
    std::vector<std::string> filler_words;
    double recall_gate = 0.90;
    int gate_interval = 50;
    int batch_rows = 256;
    double grad_clip = 1.0;
};

struct PretrainReport {
    int steps_run = 0;
    double initial_loss = 0.0;
    double final_loss = 0.0;
    double recall = 0.0;  // greedy-argmax fraction of efficacy prompts answering o^c
    bool gate_passed = false;
};

// Next-token training over fact sentences (efficacy, paraphrase and
// neighborhood prompts, each completed with o^c) mixed with filler sequences.
// Stops once recall reaches the gate or the step budget runs out; a run that
// exhausts the budget without passing the gate is reported, not an error.
PretrainReport pretrain(ModelParams& params, const Tokenizer& tok,
                        const std::vector<FactRecord>& records, const PretrainOptions& opts);

// Fraction of records whose greedy completion of the efficacy prompt equals
// target_true (all target tokens).
double fact_recall(const ModelParams& params, const Tokenizer& tok,
                   const std::vector<FactRecord>& records, const HeadPatch* patch = nullptr);

}  // namespace memat
