#include "memat/train.hpp"

#include <algorithm>
#include <cmath>
#include <set>

namespace memat {

void Adam::update(const std::string& name, Mat& param, const Mat& grad) {
    if (t_ < 1) throw ContractError("Adam::step_begin must run before update");
    Mat& m = m_.try_emplace(name, Mat::Zero(param.rows(), param.cols())).first->second;
    Mat& v = v_.try_emplace(name, Mat::Zero(param.rows(), param.cols())).first->second;
    if (m.rows() != grad.rows() || m.cols() != grad.cols())
        throw ContractError("Adam moment shape mismatch for " + name);
    m = p_.beta1 * m + (1.0 - p_.beta1) * grad;
    v = p_.beta2 * v.array().matrix() + (1.0 - p_.beta2) * grad.cwiseProduct(grad);
    const double bc1 = 1.0 - std::pow(p_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(p_.beta2, static_cast<double>(t_));
    param.array() -=
        (p_.lr / bc1) * (m.array() / ((v.array() / bc2).sqrt() + p_.eps));
}

double fact_recall(const ModelParams& params, const Tokenizer& tok,
                   const std::vector<FactRecord>& records, const HeadPatch* patch) {
    if (records.empty()) throw InputError("fact_recall needs at least one record");
    struct Item {
        std::vector<int> seq;
        std::vector<int> target;
        size_t done = 0;
        bool alive = true;
    };
    std::vector<Item> items;
    for (const FactRecord& r : records) {
        Item it;
        it.seq = tok.encode(r.efficacy_prompt);
        it.target = tok.encode(r.target_true);
        if (it.seq.empty() || it.target.empty())
            throw InputError("record " + std::to_string(r.id) + " encodes to an empty sequence");
        items.push_back(std::move(it));
    }
    size_t max_len = 0;
    for (const auto& it : items) max_len = std::max(max_len, it.target.size());
    for (size_t step = 0; step < max_len; ++step) {
        std::vector<std::vector<int>> batch;
        std::vector<size_t> who;
        for (size_t i = 0; i < items.size(); ++i)
            if (items[i].alive && items[i].done < items[i].target.size()) {
                batch.push_back(items[i].seq);
                who.push_back(i);
            }
        if (batch.empty()) break;
        PackedForward pf = forward_many(params, batch, patch);
        for (size_t b = 0; b < who.size(); ++b) {
            Item& it = items[who[b]];
            const Mat& probs = pf.probs[b];
            int best = 0;
            probs.row(probs.rows() - 1).maxCoeff(&best);
            if (best != it.target[it.done]) {
                it.alive = false;
            } else {
                it.seq.push_back(best);
                ++it.done;
            }
        }
    }
    int64_t hits = 0;
    for (const auto& it : items)
        if (it.alive && it.done == it.target.size()) ++hits;
    return static_cast<double>(hits) / static_cast<double>(items.size());
}

namespace {

std::vector<std::string> harvest_noise_words(const Tokenizer& tok,
                                             const std::vector<FactRecord>& records) {
    std::set<std::string> words;
    for (const FactRecord& r : records) {
        const auto subject_words = split_words(r.subject);
        for (const auto& p : r.paraphrase_prompts) {
            for (const auto& w : split_words(p)) {
                if (w == subject_words[0]) break;  // noise prefix ends at the subject
                words.insert(w);
            }
        }
    }
    std::vector<std::string> out;
    for (const auto& w : words)
        if (tok.has_word(w)) out.push_back(w);
    return out;
}

}  // namespace

PretrainReport pretrain(ModelParams& params, const Tokenizer& tok,
                        const std::vector<FactRecord>& records, const PretrainOptions& opts) {
    if (records.empty()) throw InputError("pretrain needs a non-empty corpus");
    if (opts.max_steps < 0) throw ConfigError("max_steps must be non-negative");
    if (opts.filler_fraction < 0.0 || opts.filler_fraction >= 1.0)
        throw ConfigError("filler_fraction must be in [0, 1)");
    if (tok.vocab() > params.config.vocab_size)
        throw ConfigError("tokenizer vocabulary exceeds the model's vocab_size");

    PretrainReport report;
    if (opts.max_steps == 0) {
        report.recall = fact_recall(params, tok, records);
        report.gate_passed = report.recall >= opts.recall_gate;
        return report;
    }

    // fact sentences: every prompt completed with the true object
    std::vector<std::vector<int>> sentences;
    auto add_sentence = [&](const std::string& prompt, const std::string& completion) {
        std::vector<int> ids = tok.encode(prompt + " " + completion);
        if (static_cast<int>(ids.size()) > params.config.max_seq_len)
            throw InputError("sentence too long for max_seq_len: '" + prompt + "'");
        if (ids.size() >= 2) sentences.push_back(std::move(ids));
    };
    for (const FactRecord& r : records) {
        add_sentence(r.efficacy_prompt, r.target_true);
        for (const auto& p : r.paraphrase_prompts) add_sentence(p, r.target_true);
        for (const auto& np : r.neighborhood_prompts) add_sentence(np.prompt, r.target_true);
    }

    Rng rng(mix_seed(opts.seed, 0x77A1));
    std::vector<std::string> fillers =
        opts.filler_words.empty() ? harvest_noise_words(tok, records) : opts.filler_words;
    if (opts.filler_fraction > 0.0 && !fillers.empty()) {
        const auto n_filler = static_cast<size_t>(
            std::llround(opts.filler_fraction / (1.0 - opts.filler_fraction) *
                         static_cast<double>(sentences.size())));
        for (size_t i = 0; i < n_filler; ++i) {
            const auto len = rng.uniform_int(4, 12);
            std::vector<int> ids;
            for (int64_t w = 0; w < len; ++w)
                ids.push_back(tok.word_id(
                    fillers[static_cast<size_t>(rng.uniform_int(0, static_cast<int64_t>(fillers.size()) - 1))]));
            sentences.push_back(std::move(ids));
        }
    }

    Adam adam({opts.lr});
    std::vector<size_t> order(sentences.size());
    for (size_t i = 0; i < order.size(); ++i) order[i] = i;
    size_t cursor = order.size();  // triggers a shuffle on first use

    bool first_loss = true;
    for (int step = 1; step <= opts.max_steps; ++step) {
        // pack sentences up to the row budget, reshuffling each epoch
        std::vector<int> tokens, offsets = {0};
        std::vector<std::pair<int, int>> coords;
        while (static_cast<int>(tokens.size()) < opts.batch_rows) {
            if (cursor >= order.size()) {
                rng.shuffle(order);
                cursor = 0;
            }
            const auto& s = sentences[order[cursor++]];
            const int base = static_cast<int>(tokens.size());
            tokens.insert(tokens.end(), s.begin(), s.end());
            offsets.push_back(static_cast<int>(tokens.size()));
            for (size_t r = 0; r + 1 < s.size(); ++r)
                coords.emplace_back(base + static_cast<int>(r), s[r + 1]);
        }

        ad::Tape tape;
        graph::ParamVars pv = graph::bind(tape, params, true);
        ad::Var logits = graph::lm_logits(tape, pv, tokens, offsets);
        ad::Var loss = tape.scale(tape.pick_sum(tape.log_softmax_rows(logits), coords),
                                  -1.0 / static_cast<double>(coords.size()));
        const double loss_value = tape.scalar(loss);
        if (!std::isfinite(loss_value))
            throw TrainingError("pretraining loss diverged (non-finite) at step " +
                                std::to_string(step));
        if (first_loss) {
            report.initial_loss = loss_value;
            first_loss = false;
        }
        report.final_loss = loss_value;
        tape.backward(loss);

        auto vars = graph::named_vars(pv);
        std::vector<Mat> grads;
        grads.reserve(vars.size());
        double sq_norm = 0.0;
        for (const auto& [name, var] : vars) {
            grads.push_back(tape.grad(var));
            sq_norm += grads.back().squaredNorm();
        }
        double scale = 1.0;
        if (opts.grad_clip > 0.0 && std::sqrt(sq_norm) > opts.grad_clip)
            scale = opts.grad_clip / std::sqrt(sq_norm);

        adam.step_begin();
        size_t gi = 0;
        std::map<std::string, Mat*> slots;
        params.for_each_tensor([&](const std::string& name, Mat& m) { slots[name] = &m; });
        for (const auto& [name, var] : vars) {
            Mat g = scale == 1.0 ? std::move(grads[gi]) : Mat(grads[gi] * scale);
            adam.update(name, *slots.at(name), g);
            ++gi;
        }
        report.steps_run = step;

        if (step % opts.gate_interval == 0 || step == opts.max_steps) {
            report.recall = fact_recall(params, tok, records);
            if (report.recall >= opts.recall_gate) {
                report.gate_passed = true;
                break;
            }
        }
    }
    params.check_finite("pretrained parameters");
    return report;
}

}  // namespace memat
