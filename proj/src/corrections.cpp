#include "memat/corrections.hpp"

#include "memat/checkpoint.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <set>

namespace memat {

namespace {

void validate_psi(const std::vector<HeadKey>& psi, const ModelConfig& cfg) {
    if (psi.empty()) throw InputError("the head set is empty");
    std::set<HeadKey> seen;
    for (const HeadKey& key : psi) {
        if (key.layer < 1 || key.layer > cfg.n_layers || key.head < 1 || key.head > cfg.n_heads)
            throw InputError("head (" + std::to_string(key.layer) + "," +
                             std::to_string(key.head) + ") out of range");
        if (!seen.insert(key).second)
            throw InputError("head (" + std::to_string(key.layer) + "," +
                             std::to_string(key.head) + ") listed twice");
    }
}

std::string language_tag(const std::vector<FactRecord>& records) {
    std::set<std::string> langs;
    for (const FactRecord& rec : records) langs.insert(to_string(rec.language));
    std::string out;
    for (const std::string& l : langs) {
        if (!out.empty()) out += '+';
        out += l;
    }
    return out;
}

// One micro-batch worth of packed sequences plus everything the loss needs.
struct BatchPlan {
    std::vector<int> tokens;
    std::vector<int> offsets;
    std::vector<std::pair<int, int>> nll_coords;  // rows predicting target tokens
    std::vector<int> kl_rows;                     // final row of each record's held prompt
    Mat ref_logp;           // unpatched log distribution at kl_rows, batch x V
    std::vector<double> penalty_coef;  // per psi entry, summed over batch records
    int n_records = 0;
};

BatchPlan build_plan(const ModelParams& params, const Tokenizer& tok,
                     std::span<const FactRecord> records, const MematConfig& cfg,
                     std::span<const std::vector<std::vector<int>>> prefixes,
                     const Mat* inv_sq_norms, std::span<const size_t> norm_rows,
                     size_t psi_count) {
    const int max_len = params.config.max_seq_len;
    BatchPlan plan;
    plan.n_records = static_cast<int>(records.size());
    plan.offsets.push_back(0);
    plan.penalty_coef.assign(psi_count, 0.0);
    for (size_t i = 0; i < records.size(); ++i) {
        const FactRecord& rec = records[i];
        const std::vector<int> prompt = tok.encode(rec.efficacy_prompt);
        const std::vector<int> target = tok.encode(rec.target_new);
        if (target.empty())
            throw InputError("record " + std::to_string(rec.id) + " has an empty new target");
        for (const std::vector<int>& prefix : prefixes[i]) {
            const int base = static_cast<int>(plan.tokens.size());
            plan.tokens.insert(plan.tokens.end(), prefix.begin(), prefix.end());
            plan.tokens.insert(plan.tokens.end(), prompt.begin(), prompt.end());
            const int tgt0 = static_cast<int>(plan.tokens.size());
            plan.tokens.insert(plan.tokens.end(), target.begin(), target.end());
            if (static_cast<int>(plan.tokens.size()) - base > max_len)
                throw InputError("record " + std::to_string(rec.id) +
                                 " with its prefix exceeds the model context");
            for (size_t t = 0; t < target.size(); ++t)
                plan.nll_coords.push_back(
                    {tgt0 + static_cast<int>(t) - 1, target[t]});
            plan.offsets.push_back(static_cast<int>(plan.tokens.size()));
        }
        const std::vector<int> held =
            tok.encode(fill_template(cfg.kl_template, rec.subject));
        if (held.empty())
            throw InputError("record " + std::to_string(rec.id) +
                             " yields an empty held prompt");
        if (static_cast<int>(held.size()) > max_len)
            throw InputError("held prompt of record " + std::to_string(rec.id) +
                             " exceeds the model context");
        plan.tokens.insert(plan.tokens.end(), held.begin(), held.end());
        plan.kl_rows.push_back(static_cast<int>(plan.tokens.size()) - 1);
        plan.offsets.push_back(static_cast<int>(plan.tokens.size()));

        if (inv_sq_norms)
            for (size_t p = 0; p < psi_count; ++p)
                plan.penalty_coef[p] +=
                    cfg.lambda_omega / static_cast<double>(psi_count) *
                    (*inv_sq_norms)(static_cast<Eigen::Index>(norm_rows[i]),
                                    static_cast<Eigen::Index>(p));
    }
    return plan;
}

struct GraphParts {
    ad::Var logits;
    ad::Var kl_lsm;  // log distribution at kl_rows under the current offsets
};

GraphParts build_graph(ad::Tape& tape, const graph::ParamVars& pv, const BatchPlan& plan,
                       const std::map<HeadKey, ad::Var>& patch) {
    graph::Options opts;
    opts.head_patch = &patch;
    GraphParts parts;
    parts.logits = graph::lm_logits(tape, pv, plan.tokens, plan.offsets, opts);
    parts.kl_lsm = tape.log_softmax_rows(tape.gather_rows(parts.logits, plan.kl_rows));
    return parts;
}

// log distribution of the unpatched model at the held prompts, computed with
// the same graph so a zero offset reproduces it bit for bit
void fill_reference(BatchPlan& plan, const ModelParams& params,
                    const std::vector<HeadKey>& psi) {
    ad::Tape tape;
    const graph::ParamVars pv = graph::bind(tape, params, false);
    std::map<HeadKey, ad::Var> patch;
    for (const HeadKey& key : psi)
        patch[key] = tape.constant(Mat::Zero(1, params.config.head_dim()));
    const GraphParts parts = build_graph(tape, pv, plan, patch);
    plan.ref_logp = tape.val(parts.kl_lsm);
}

// Loss summed over the plan's records; gradients likewise summed.
std::pair<double, std::vector<Mat>> eval_plan(const BatchPlan& plan, const ModelParams& params,
                                              const std::vector<HeadKey>& psi,
                                              const std::vector<Vec>& omegas,
                                              const MematConfig& cfg, bool want_grad) {
    ad::Tape tape;
    const graph::ParamVars pv = graph::bind(tape, params, false);
    std::map<HeadKey, ad::Var> patch;
    std::vector<ad::Var> omega_vars(psi.size());
    for (size_t p = 0; p < psi.size(); ++p) {
        omega_vars[p] = tape.leaf(Mat(omegas[p]));
        patch[psi[p]] = omega_vars[p];
    }
    const GraphParts parts = build_graph(tape, pv, plan, patch);

    std::vector<ad::Var> terms;
    if (!plan.nll_coords.empty())
        terms.push_back(tape.scale(
            tape.pick_sum(tape.log_softmax_rows(parts.logits), plan.nll_coords),
            -1.0 / static_cast<double>(cfg.r_prefixes)));
    const ad::Var pt = tape.exp(parts.kl_lsm);
    const ad::Var diff = tape.sub(parts.kl_lsm, tape.constant(plan.ref_logp));
    terms.push_back(tape.sum_all(tape.hadamard(pt, diff)));
    if (cfg.lambda_omega > 0.0)
        for (size_t p = 0; p < psi.size(); ++p)
            terms.push_back(tape.scale(tape.sum_sq(omega_vars[p]), plan.penalty_coef[p]));

    ad::Var total = terms.front();
    for (size_t t = 1; t < terms.size(); ++t) total = tape.add(total, terms[t]);

    const double loss = tape.scalar(total);
    if (!std::isfinite(loss))
        throw TrainingError("correction loss is not finite; the model or offsets are degenerate");

    std::vector<Mat> grads;
    if (want_grad) {
        tape.backward(total);
        grads.reserve(psi.size());
        for (size_t p = 0; p < psi.size(); ++p) grads.push_back(tape.grad(omega_vars[p]));
    }
    return {loss, std::move(grads)};
}

// Per-record inverse squared norms of the unpatched head activations at the
// prompt's final token; these normalize the penalty term.
Mat head_norm_weights(const ModelParams& params, const Tokenizer& tok,
                      const std::vector<FactRecord>& records,
                      const std::vector<HeadKey>& psi) {
    std::vector<std::vector<int>> prompts;
    prompts.reserve(records.size());
    for (const FactRecord& rec : records) prompts.push_back(tok.encode(rec.efficacy_prompt));
    const PackedForward packed = forward_many(params, prompts, nullptr, &psi);
    Mat out(static_cast<Eigen::Index>(records.size()), static_cast<Eigen::Index>(psi.size()));
    for (size_t i = 0; i < records.size(); ++i)
        for (size_t p = 0; p < psi.size(); ++p) {
            const double n = packed.head_last[i].at(psi[p]).norm();
            if (n == 0.0)
                throw TrainingError("head activation vanished for record " +
                                    std::to_string(records[i].id));
            out(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(p)) = 1.0 / (n * n);
        }
    return out;
}

void check_prefixes(const PrefixSet& prefixes, const std::vector<FactRecord>& records,
                    int expected) {
    if (prefixes.size() != records.size())
        throw InputError("prefix set covers " + std::to_string(prefixes.size()) +
                         " records, expected " + std::to_string(records.size()));
    for (const auto& per_record : prefixes)
        if (static_cast<int>(per_record.size()) != expected)
            throw InputError("every record needs exactly " + std::to_string(expected) +
                             " prefixes");
}

}  // namespace

void MematConfig::validate() const {
    if (k < 1) throw ConfigError("k must be positive");
    if (lambda_omega < 0.0) throw ConfigError("lambda_omega must be >= 0");
    if (r_prefixes < 0) throw ConfigError("r_prefixes must be >= 0");
    if (!(adam_lr > 0.0)) throw ConfigError("adam_lr must be positive");
    if (!(adam_beta1 >= 0.0 && adam_beta1 < 1.0)) throw ConfigError("adam_beta1 must be in [0,1)");
    if (!(adam_beta2 >= 0.0 && adam_beta2 < 1.0)) throw ConfigError("adam_beta2 must be in [0,1)");
    if (!(adam_eps > 0.0)) throw ConfigError("adam_eps must be positive");
    if (batch_size < 1) throw ConfigError("batch_size must be positive");
    if (grad_accum < 1) throw ConfigError("grad_accum must be positive");
    if (max_epochs < 1) throw ConfigError("max_epochs must be positive");
    if (kl_template.find("{}") == std::string::npos)
        throw ConfigError("kl_template needs a {} subject slot");
}

void HeadCorrectionSet::validate(const ModelConfig& cfg) const {
    if (positions.empty()) throw ContractError("correction set has no positions");
    if (omegas.size() != positions.size())
        throw ContractError("correction set has " + std::to_string(omegas.size()) +
                            " offsets for " + std::to_string(positions.size()) + " positions");
    std::set<HeadKey> seen;
    for (size_t p = 0; p < positions.size(); ++p) {
        const HeadKey& key = positions[p];
        if (key.layer < 1 || key.layer > cfg.n_layers || key.head < 1 ||
            key.head > cfg.n_heads)
            throw ContractError("correction position (" + std::to_string(key.layer) + "," +
                                std::to_string(key.head) + ") out of range");
        if (!seen.insert(key).second)
            throw ContractError("correction position listed twice");
        if (omegas[p].size() != cfg.head_dim())
            throw ContractError("correction vectors must have length " +
                                std::to_string(cfg.head_dim()));
        if (!omegas[p].allFinite())
            throw ContractError("correction vector has non-finite entries");
    }
}

PrefixSet make_correction_prefixes(const ModelParams& params,
                                   const std::vector<FactRecord>& records, int count,
                                   uint64_t seed) {
    if (count < 0) throw InputError("prefix count must be >= 0");
    PrefixSet out;
    out.reserve(records.size());
    for (const FactRecord& rec : records) {
        auto all = make_edit_prefixes(params, count + 1,
                                      mix_seed(seed, static_cast<uint64_t>(rec.id)));
        out.emplace_back(all.begin() + 1, all.end());  // drop the empty context
    }
    return out;
}

std::pair<double, std::vector<Vec>> corrections_loss_grad(
    const ModelParams& params, const Tokenizer& tok, const std::vector<FactRecord>& records,
    const std::vector<HeadKey>& psi, const std::vector<Vec>& omegas, const MematConfig& cfg,
    const PrefixSet& prefixes) {
    cfg.validate();
    validate_psi(psi, params.config);
    if (static_cast<int>(psi.size()) != cfg.k)
        throw InputError("head set holds " + std::to_string(psi.size()) +
                         " entries but k is " + std::to_string(cfg.k));
    if (omegas.size() != psi.size())
        throw InputError("one offset per selected head is required");
    for (const Vec& w : omegas)
        if (w.size() != params.config.head_dim())
            throw InputError("offsets must have length " +
                             std::to_string(params.config.head_dim()));
    if (records.empty()) throw InputError("no records to evaluate");
    check_prefixes(prefixes, records, cfg.r_prefixes);

    Mat inv_sq;
    const Mat* inv_ptr = nullptr;
    std::vector<size_t> rows(records.size());
    std::iota(rows.begin(), rows.end(), size_t{0});
    if (cfg.lambda_omega > 0.0) {
        inv_sq = head_norm_weights(params, tok, records, psi);
        inv_ptr = &inv_sq;
    }
    BatchPlan plan = build_plan(params, tok, records, cfg, prefixes, inv_ptr, rows, psi.size());
    fill_reference(plan, params, psi);
    auto [loss, grads] = eval_plan(plan, params, psi, omegas, cfg, true);

    const double inv_n = 1.0 / static_cast<double>(records.size());
    std::vector<Vec> out;
    out.reserve(grads.size());
    for (Mat& g : grads) out.push_back(Vec(inv_n * g.row(0)));
    return {loss * inv_n, std::move(out)};
}

HeadCorrectionSet optimize_corrections(const ModelParams& params, const Tokenizer& tok,
                                       const std::vector<FactRecord>& records,
                                       const std::vector<HeadKey>& psi, const MematConfig& cfg,
                                       uint64_t seed, const PrefixSet* prefix_override) {
    cfg.validate();
    validate_psi(psi, params.config);
    if (static_cast<int>(psi.size()) != cfg.k)
        throw InputError("head set holds " + std::to_string(psi.size()) +
                         " entries but k is " + std::to_string(cfg.k));
    if (records.empty()) throw InputError("no records to optimize on");

    PrefixSet prefixes;
    if (prefix_override) {
        check_prefixes(*prefix_override, records, cfg.r_prefixes);
        prefixes = *prefix_override;
    } else {
        prefixes = make_correction_prefixes(params, records, cfg.r_prefixes, seed);
    }

    Mat inv_sq;
    const Mat* inv_ptr = nullptr;
    if (cfg.lambda_omega > 0.0) {
        inv_sq = head_norm_weights(params, tok, records, psi);
        inv_ptr = &inv_sq;
    }

    // fixed micro-batch partition; each batch carries its own reference
    std::vector<BatchPlan> plans;
    for (size_t begin = 0; begin < records.size(); begin += cfg.batch_size) {
        const size_t end = std::min(records.size(), begin + cfg.batch_size);
        std::vector<size_t> rows(end - begin);
        std::iota(rows.begin(), rows.end(), begin);
        plans.push_back(build_plan(
            params, tok, std::span(records).subspan(begin, end - begin), cfg,
            std::span(prefixes).subspan(begin, end - begin), inv_ptr, rows, psi.size()));
        fill_reference(plans.back(), params, psi);
    }

    const int hd = params.config.head_dim();
    std::vector<Vec> omegas(psi.size(), Vec::Zero(hd));
    std::vector<Mat> m(psi.size(), Mat::Zero(1, hd));
    std::vector<Mat> v(psi.size(), Mat::Zero(1, hd));
    int step = 0;

    HeadCorrectionSet set;
    for (int epoch = 0; epoch < cfg.max_epochs; ++epoch) {
        double epoch_sum = 0.0;
        std::vector<Mat> accum(psi.size(), Mat::Zero(1, hd));
        int accum_records = 0;
        int accum_batches = 0;
        for (size_t b = 0; b < plans.size(); ++b) {
            auto [loss, grads] = eval_plan(plans[b], params, psi, omegas, cfg, true);
            epoch_sum += loss;
            for (size_t p = 0; p < psi.size(); ++p) accum[p] += grads[p];
            accum_records += plans[b].n_records;
            ++accum_batches;
            if (accum_batches < cfg.grad_accum && b + 1 < plans.size()) continue;
            ++step;
            const double bc1 = 1.0 - std::pow(cfg.adam_beta1, step);
            const double bc2 = 1.0 - std::pow(cfg.adam_beta2, step);
            for (size_t p = 0; p < psi.size(); ++p) {
                const Mat g = accum[p] / static_cast<double>(accum_records);
                m[p] = cfg.adam_beta1 * m[p] + (1.0 - cfg.adam_beta1) * g;
                v[p] = cfg.adam_beta2 * v[p] + (1.0 - cfg.adam_beta2) * g.cwiseProduct(g);
                const Mat update = ((m[p] / bc1).array() /
                                    ((v[p] / bc2).array().sqrt() + cfg.adam_eps))
                                       .matrix();
                omegas[p] -= cfg.adam_lr * Vec(update.row(0));
                accum[p].setZero();
            }
            accum_records = 0;
            accum_batches = 0;
        }
        set.epoch_losses.push_back(epoch_sum / static_cast<double>(records.size()));
    }

    set.positions = psi;
    set.omegas = std::move(omegas);
    set.language_probe = language_tag(records);
    set.lambda_omega = cfg.lambda_omega;
    set.r_prefixes = cfg.r_prefixes;
    set.epochs = cfg.max_epochs;
    for (const FactRecord& rec : records) set.record_ids.push_back(rec.id);
    set.validate(params.config);
    return set;
}

HeadPatch apply_corrections(const ModelParams& params, const HeadCorrectionSet& corrections) {
    corrections.validate(params.config);
    HeadPatch patch;
    for (size_t p = 0; p < corrections.positions.size(); ++p)
        patch.entries[corrections.positions[p]] = corrections.omegas[p];
    patch.validate(params.config);
    return patch;
}

RecycleResult recycle_corrections(const ModelParams& base, const Tokenizer& tok,
                                  const std::vector<FactRecord>& new_records,
                                  const HeadCorrectionSet& corrections, const KeyBank& bank,
                                  const EditConfig& edit_cfg, uint64_t seed,
                                  bool allow_overlap) {
    if (!allow_overlap) {
        std::set<int> trained(corrections.record_ids.begin(), corrections.record_ids.end());
        for (const FactRecord& rec : new_records)
            if (trained.count(rec.id))
                throw ProtocolError(
                    "record " + std::to_string(rec.id) +
                    " was used to train these corrections; recycling requires disjoint facts");
    }
    auto [edited, delta] = apply_edit(base, tok, new_records, bank, edit_cfg, seed);
    HeadPatch patch = apply_corrections(edited, corrections);
    return {std::move(edited), std::move(delta), std::move(patch)};
}

HeadCorrectionSet iti_baseline(const ModelParams& params, const ProbeDataset& dataset,
                               const std::vector<HeadKey>& psi, double alpha) {
    validate_psi(psi, params.config);
    if (dataset.head_dim != params.config.head_dim())
        throw InputError("probe dataset and model disagree on head width");
    if (dataset.n_layers != params.config.n_layers || dataset.n_heads != params.config.n_heads)
        throw InputError("probe dataset and model disagree on the head grid");
    std::vector<int> truthful;
    for (size_t i = 0; i < dataset.labels.size(); ++i)
        if (dataset.labels[i] == 1) truthful.push_back(static_cast<int>(i));
    if (truthful.empty()) throw InputError("probe dataset has no truthful examples");

    HeadCorrectionSet set;
    set.positions = psi;
    for (const HeadKey& key : psi) {
        const Mat& acts = dataset.activations[static_cast<size_t>(
            dataset.head_index(key.layer, key.head))];
        Vec mean = Vec::Zero(dataset.head_dim);
        for (int idx : truthful) mean += acts.row(idx);
        mean /= static_cast<double>(truthful.size());
        set.omegas.push_back(alpha * mean);
    }
    std::set<int> ids(dataset.record_ids.begin(), dataset.record_ids.end());
    set.record_ids.assign(ids.begin(), ids.end());
    set.validate(params.config);
    return set;
}

void save_corrections(const std::filesystem::path& path, const HeadCorrectionSet& set) {
    nlohmann::ordered_json j;
    j["positions"] = nlohmann::ordered_json::array();
    for (const HeadKey& key : set.positions)
        j["positions"].push_back({{"layer", key.layer}, {"head", key.head}});
    j["language_edit"] = set.language_edit;
    j["language_probe"] = set.language_probe;
    j["lambda_omega"] = set.lambda_omega;
    j["r_prefixes"] = set.r_prefixes;
    j["epochs"] = set.epochs;
    j["record_ids"] = set.record_ids;
    j["epoch_losses"] = set.epoch_losses;

    TensorFile file;
    file.meta["json"] = j.dump();
    for (size_t p = 0; p < set.positions.size(); ++p)
        file.tensors.push_back({"omega." + std::to_string(set.positions[p].layer) + "." +
                                    std::to_string(set.positions[p].head),
                                Mat(set.omegas[p])});
    save_tensor_file(path, "head-corrections", file);
}

HeadCorrectionSet load_corrections(const std::filesystem::path& path) {
    const TensorFile file = load_tensor_file(path, "head-corrections");
    auto it = file.meta.find("json");
    if (it == file.meta.end())
        throw IoError(path.string() + " lacks correction metadata");
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(it->second);
    } catch (const nlohmann::json::exception& e) {
        throw IoError(path.string() + " holds invalid metadata: " + e.what());
    }
    for (const char* key : {"positions", "language_edit", "language_probe", "lambda_omega",
                            "r_prefixes", "epochs", "record_ids", "epoch_losses"})
        if (!j.contains(key)) throw IoError(path.string() + " lacks correction fields");

    HeadCorrectionSet set;
    for (const auto& entry : j["positions"]) {
        if (!entry.contains("layer") || !entry.contains("head"))
            throw IoError("malformed position entry in " + path.string());
        set.positions.push_back({entry["layer"].get<int>(), entry["head"].get<int>()});
    }
    set.language_edit = j["language_edit"].get<std::string>();
    set.language_probe = j["language_probe"].get<std::string>();
    set.lambda_omega = j["lambda_omega"].get<double>();
    set.r_prefixes = j["r_prefixes"].get<int>();
    set.epochs = j["epochs"].get<int>();
    set.record_ids = j["record_ids"].get<std::vector<int>>();
    set.epoch_losses = j["epoch_losses"].get<std::vector<double>>();

    if (file.tensors.size() != set.positions.size())
        throw IoError(path.string() + " holds " + std::to_string(file.tensors.size()) +
                      " offset tensors for " + std::to_string(set.positions.size()) +
                      " positions");
    for (size_t p = 0; p < set.positions.size(); ++p) {
        const auto& [name, tensor] = file.tensors[p];
        const std::string expect = "omega." + std::to_string(set.positions[p].layer) + "." +
                                   std::to_string(set.positions[p].head);
        if (name != expect)
            throw IoError("unexpected tensor '" + name + "' in " + path.string());
        if (tensor.rows() != 1)
            throw IoError("offset tensors must be single rows in " + path.string());
        set.omegas.push_back(Vec(tensor.row(0)));
    }
    return set;
}

}  // namespace memat
