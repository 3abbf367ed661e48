#include "memat/memit.hpp"

#include "memat/checkpoint.hpp"

#include <Eigen/Cholesky>
#include <algorithm>
#include <bit>
#include <numeric>
#include <set>

namespace memat {

namespace {

struct AlignedPrompt {
    std::vector<int> tokens;  // the record's prompt
    int subject_end = 0;      // index of the subject's final token
};

AlignedPrompt align_subject(const Tokenizer& tok, const FactRecord& rec) {
    AlignedPrompt out;
    out.tokens = tok.encode(rec.efficacy_prompt);
    const std::vector<int> subject = tok.encode(rec.subject);
    int found = -1;
    if (!subject.empty() && subject.size() <= out.tokens.size())
        for (size_t s = 0; s + subject.size() <= out.tokens.size(); ++s)
            if (std::equal(subject.begin(), subject.end(),
                           out.tokens.begin() + static_cast<long>(s)))
                found = static_cast<int>(s + subject.size()) - 1;
    if (found < 0)
        throw InputError("cannot align subject of record " + std::to_string(rec.id) +
                         " in its prompt");
    out.subject_end = found;
    return out;
}

// One requested activation: (sequence, layer, position within the sequence).
struct TraceSpec {
    size_t seq = 0;
    int layer = 0;
    int pos = 0;
};

// Forward-only packed traces; one vector per spec, order preserved. `mlp`
// selects the MLP activation (d_ff wide), otherwise the residual stream (d).
std::vector<Vec> packed_traces(const ModelParams& params,
                               const std::vector<std::vector<int>>& seqs,
                               const std::vector<TraceSpec>& specs, bool mlp) {
    constexpr size_t kMaxRows = 4096;
    std::vector<std::vector<size_t>> by_seq(seqs.size());
    for (size_t i = 0; i < specs.size(); ++i) by_seq.at(specs[i].seq).push_back(i);

    std::vector<Vec> out(specs.size());
    size_t i = 0;
    while (i < seqs.size()) {
        std::vector<int> tokens, offsets = {0};
        const size_t begin = i;
        while (i < seqs.size()) {
            const auto& s = seqs[i];
            if (s.empty()) throw InputError("trace contexts must be non-empty");
            if (!tokens.empty() && tokens.size() + s.size() > kMaxRows) break;
            tokens.insert(tokens.end(), s.begin(), s.end());
            offsets.push_back(static_cast<int>(tokens.size()));
            ++i;
        }
        TraceRequest req;
        std::vector<std::pair<size_t, std::pair<int, int>>> slots;
        for (size_t s = begin; s < i; ++s) {
            const int base = offsets[s - begin];
            for (size_t spec_idx : by_seq[s]) {
                const TraceSpec& sp = specs[spec_idx];
                const std::pair<int, int> key{sp.layer, base + sp.pos};
                slots.emplace_back(spec_idx, key);
                if (mlp)
                    req.mlp_keys.push_back(key);
                else
                    req.residuals.push_back(key);
            }
        }
        ad::Tape tape;
        graph::ParamVars pv = graph::bind(tape, params, false);
        Trace trace;
        graph::Options opts;
        opts.trace_req = &req;
        opts.trace_out = &trace;
        graph::lm_logits(tape, pv, tokens, offsets, opts);
        for (const auto& [spec_idx, key] : slots)
            out[spec_idx] = mlp ? trace.mlp_keys.at(key) : trace.residuals.at(key);
    }
    return out;
}

// Mean over prefix contexts of a per-record activation at the final subject
// token: the MLP key when `mlp`, the residual stream otherwise.
Mat subject_point_traces(const ModelParams& params, const Tokenizer& tok,
                         const std::vector<FactRecord>& records, int layer,
                         const std::vector<std::vector<int>>& prefixes, bool mlp) {
    if (prefixes.empty()) throw InputError("at least one prefix context is required");
    const size_t u = records.size();
    std::vector<std::vector<int>> seqs;
    std::vector<TraceSpec> specs;
    seqs.reserve(u * prefixes.size());
    for (size_t r = 0; r < u; ++r) {
        const AlignedPrompt ap = align_subject(tok, records[r]);
        for (const auto& prefix : prefixes) {
            std::vector<int> ctx = prefix;
            ctx.insert(ctx.end(), ap.tokens.begin(), ap.tokens.end());
            specs.push_back(
                {seqs.size(), layer, static_cast<int>(prefix.size()) + ap.subject_end});
            seqs.push_back(std::move(ctx));
        }
    }
    const std::vector<Vec> rows = packed_traces(params, seqs, specs, mlp);
    Mat out = Mat::Zero(static_cast<Eigen::Index>(u),
                        mlp ? params.config.d_ff : params.config.d_model);
    size_t k = 0;
    for (size_t r = 0; r < u; ++r)
        for (size_t p = 0; p < prefixes.size(); ++p) out.row(static_cast<Eigen::Index>(r)) += rows[k++];
    out /= static_cast<double>(prefixes.size());
    return out;
}

std::pair<ModelParams, EditDelta> edit_impl(const ModelParams& params, const Tokenizer& tok,
                                            const std::vector<FactRecord>& records,
                                            const KeyBank& bank, const EditConfig& cfg,
                                            uint64_t seed, bool single_language) {
    cfg.validate(params.config.n_layers);

    EditDelta delta;
    delta.config_hash = cfg.hash();
    std::set<std::string> langs;
    for (const FactRecord& rec : records) {
        delta.record_ids.push_back(rec.id);
        langs.insert(to_string(rec.language));
    }
    if (single_language && langs.size() > 1)
        throw ContractError("apply_edit expects records in one language; joint_edit handles mixes");
    for (const std::string& lang : langs) {
        if (!delta.language.empty()) delta.language += '+';
        delta.language += lang;
    }

    ModelParams edited = params;
    if (records.empty()) {
        for (int layer : cfg.critical_layers)
            delta.deltas[layer] = Mat::Zero(params.config.d_ff, params.config.d_model);
        return {std::move(edited), std::move(delta)};
    }

    for (int layer : cfg.critical_layers) {
        auto it = bank.c0.find(layer);
        if (it == bank.c0.end())
            throw ContractError("key bank is missing layer " + std::to_string(layer));
        if (it->second.rows() != params.config.d_ff || it->second.cols() != params.config.d_ff)
            throw ContractError("key bank C0 has the wrong shape at layer " +
                                std::to_string(layer));
    }

    const auto prefixes = make_edit_prefixes(params, cfg.key_prefix_count, seed);
    const int top = cfg.critical_layers.back();
    const TargetResult targets =
        optimize_targets(params, tok, records, top, cfg.target_opt_steps, cfg.target_lr,
                         cfg.target_nll_gate, prefixes);

    const int m = static_cast<int>(cfg.critical_layers.size());
    for (int j = 0; j < m; ++j) {
        const int layer = cfg.critical_layers[static_cast<size_t>(j)];
        // remaining gap to the targets, measured on the partially edited model
        const Mat hbar = subject_point_traces(edited, tok, records, top, prefixes, false);
        const Mat r1 = (targets.targets - hbar) / static_cast<double>(m - j);
        const Mat k1 = collect_keys(edited, tok, records, layer, prefixes);
        Mat d = solve_delta(k1, r1, bank.c0.at(layer), cfg.covariance_scale);
        edited.layers[static_cast<size_t>(layer) - 1].w_out += d;
        delta.deltas[layer] = std::move(d);
    }
    edited.check_finite("edited model");
    return {std::move(edited), std::move(delta)};
}

}  // namespace

void EditConfig::validate(int n_layers) const {
    if (critical_layers.empty()) throw ConfigError("critical_layers must be non-empty");
    int prev = 0;
    for (int layer : critical_layers) {
        if (layer < 1 || layer > n_layers)
            throw ConfigError("critical layer " + std::to_string(layer) + " outside [1, " +
                              std::to_string(n_layers) + "]");
        if (layer <= prev) throw ConfigError("critical_layers must be strictly increasing");
        prev = layer;
    }
    if (critical_layers.back() >= n_layers)
        throw ConfigError("top critical layer " + std::to_string(critical_layers.back()) +
                          " must be below the final layer " + std::to_string(n_layers) +
                          "; edited rows reach later positions only through the layers above");
    if (target_opt_steps < 0) throw ConfigError("target_opt_steps must be non-negative");
    if (target_lr <= 0) throw ConfigError("target_lr must be positive");
    if (target_nll_gate <= 0) throw ConfigError("target_nll_gate must be positive");
    if (key_prefix_count < 1) throw ConfigError("key_prefix_count must be at least 1");
    if (covariance_sample_count < 1)
        throw ConfigError("covariance_sample_count must be at least 1");
    if (covariance_scale < 0) throw ConfigError("covariance_scale must be non-negative");
}

std::string EditConfig::hash() const {
    uint64_t h = fnv1a64_init();
    auto mix_i = [&h](int64_t v) { h = fnv1a64(h, &v, sizeof v); };
    auto mix_d = [&h](double v) {
        const auto bits = std::bit_cast<uint64_t>(v);
        h = fnv1a64(h, &bits, sizeof bits);
    };
    mix_i(static_cast<int64_t>(critical_layers.size()));
    for (int layer : critical_layers) mix_i(layer);
    mix_i(target_opt_steps);
    mix_d(target_lr);
    mix_d(target_nll_gate);
    mix_i(key_prefix_count);
    mix_i(covariance_sample_count);
    mix_d(covariance_scale);
    return hex64(h);
}

std::vector<std::vector<int>> make_edit_prefixes(const ModelParams& params, int count,
                                                 uint64_t seed) {
    if (count < 1) throw InputError("prefix count must be at least 1");
    std::vector<std::vector<int>> prefixes(1);  // context 0: empty prefix
    for (int j = 1; j < count; ++j) {
        Rng rng(mix_seed(seed, static_cast<uint64_t>(j)));
        const int len = static_cast<int>(rng.uniform_int(2, 10));
        const int start = static_cast<int>(rng.uniform_int(0, params.config.vocab_size - 1));
        std::vector<int> prefix{start};
        const std::vector<int> rest = generate(params, prefix, len - 1, 1.0,
                                               mix_seed(seed, static_cast<uint64_t>(j), 1));
        prefix.insert(prefix.end(), rest.begin(), rest.end());
        prefixes.push_back(std::move(prefix));
    }
    return prefixes;
}

Mat collect_keys(const ModelParams& params, const Tokenizer& tok,
                 const std::vector<FactRecord>& records, int layer,
                 const std::vector<std::vector<int>>& prefixes) {
    if (layer < 1 || layer > params.config.n_layers)
        throw InputError("key layer " + std::to_string(layer) + " out of range");
    if (records.empty()) return Mat::Zero(0, params.config.d_ff);
    return subject_point_traces(params, tok, records, layer, prefixes, true);
}

Mat collect_keys(const ModelParams& params, const Tokenizer& tok,
                 const std::vector<FactRecord>& records, int layer, int prefix_count,
                 uint64_t seed) {
    return collect_keys(params, tok, records, layer,
                        make_edit_prefixes(params, prefix_count, seed));
}

KeyBank build_key_bank(const ModelParams& params, const Tokenizer& tok,
                       const std::vector<std::string>& texts, const std::vector<int>& layers,
                       int n, uint64_t seed) {
    if (layers.empty()) throw InputError("key bank needs at least one layer");
    for (int layer : layers)
        if (layer < 1 || layer > params.config.n_layers)
            throw InputError("key bank layer " + std::to_string(layer) + " out of range");
    if (n < 1) throw InputError("covariance sample count must be positive");

    std::vector<std::vector<int>> seqs;
    for (const std::string& text : texts) {
        std::vector<int> ids = tok.encode(text);
        if (ids.empty()) continue;
        if (static_cast<int>(ids.size()) > params.config.max_seq_len)
            ids.resize(static_cast<size_t>(params.config.max_seq_len));
        seqs.push_back(std::move(ids));
    }
    if (seqs.empty()) throw InputError("no usable text for the key bank");

    std::vector<std::pair<size_t, int>> positions;
    for (size_t s = 0; s < seqs.size(); ++s)
        for (int p = 0; p < static_cast<int>(seqs[s].size()); ++p) positions.emplace_back(s, p);

    // one packed pass harvests the full pool for every layer at once
    std::vector<TraceSpec> specs;
    specs.reserve(layers.size() * positions.size());
    for (int layer : layers)
        for (auto [s, p] : positions) specs.push_back({s, layer, p});
    const std::vector<Vec> pool = packed_traces(params, seqs, specs, true);

    Rng rng(seed);
    std::vector<size_t> picks(static_cast<size_t>(n));
    for (auto& pick : picks)
        pick = static_cast<size_t>(
            rng.uniform_int(0, static_cast<int64_t>(positions.size()) - 1));

    KeyBank bank;
    for (size_t li = 0; li < layers.size(); ++li) {
        const size_t base = li * positions.size();
        Mat k0(n, params.config.d_ff);
        for (int i = 0; i < n; ++i) k0.row(i) = pool[base + picks[static_cast<size_t>(i)]];
        bank.c0[layers[li]] = k0.transpose() * k0;
        bank.k0[layers[li]] = std::move(k0);
    }
    return bank;
}

TargetResult optimize_targets(const ModelParams& params, const Tokenizer& tok,
                              const std::vector<FactRecord>& records, int top_layer, int steps,
                              double lr, double nll_gate,
                              const std::vector<std::vector<int>>& prefixes) {
    const ModelConfig& cfg = params.config;
    if (top_layer < 1 || top_layer > cfg.n_layers) throw InputError("top layer out of range");
    if (steps < 0) throw InputError("step count must be non-negative");
    if (lr <= 0) throw InputError("learning rate must be positive");
    if (prefixes.empty()) throw InputError("at least one prefix context is required");

    const size_t u = records.size();
    TargetResult out;
    out.residuals = Mat::Zero(static_cast<Eigen::Index>(u), cfg.d_model);
    out.targets = Mat::Zero(static_cast<Eigen::Index>(u), cfg.d_model);
    out.nll.assign(u, 0.0);
    out.gated.assign(u, 0);
    if (u == 0) return out;

    // Packed contexts per record: prefix + prompt + target tokens, with the
    // residual injected at the subject's final token of every context.
    struct RecordPlan {
        std::vector<int> tokens;
        std::vector<int> offsets{0};
        std::vector<int> inject_rows;
        std::vector<std::pair<int, int>> coords;  // rows predicting target tokens
        int rows = 0;
    };
    std::vector<RecordPlan> plans(u);
    for (size_t r = 0; r < u; ++r) {
        const AlignedPrompt ap = align_subject(tok, records[r]);
        const std::vector<int> target = tok.encode(records[r].target_new);
        if (target.empty())
            throw InputError("record " + std::to_string(records[r].id) + " has an empty target");
        RecordPlan& plan = plans[r];
        for (const auto& prefix : prefixes) {
            const int base = static_cast<int>(plan.tokens.size());
            plan.tokens.insert(plan.tokens.end(), prefix.begin(), prefix.end());
            plan.tokens.insert(plan.tokens.end(), ap.tokens.begin(), ap.tokens.end());
            plan.tokens.insert(plan.tokens.end(), target.begin(), target.end());
            plan.inject_rows.push_back(base + static_cast<int>(prefix.size()) + ap.subject_end);
            const int tgt0 = base + static_cast<int>(prefix.size() + ap.tokens.size());
            for (size_t t = 0; t < target.size(); ++t)
                plan.coords.emplace_back(tgt0 + static_cast<int>(t) - 1, target[t]);
            plan.offsets.push_back(static_cast<int>(plan.tokens.size()));
        }
        plan.rows = static_cast<int>(plan.tokens.size());
    }

    const double inv_ctx = 1.0 / static_cast<double>(prefixes.size());
    constexpr int kMaxRows = 4096;
    std::vector<Mat> deltas(u, Mat::Zero(1, cfg.d_model));
    std::vector<size_t> active(u);
    std::iota(active.begin(), active.end(), size_t{0});

    for (int it = 0;; ++it) {
        std::vector<size_t> still;
        size_t a = 0;
        while (a < active.size()) {
            // group records into one graph under the row budget
            size_t b = a;
            int rows = 0;
            while (b < active.size()) {
                const int record_rows = plans[active[b]].rows;
                if (b > a && rows + record_rows > kMaxRows) break;
                rows += record_rows;
                ++b;
            }

            ad::Tape tape;
            graph::ParamVars pv = graph::bind(tape, params, false);
            std::vector<int> tokens, offsets = {0};
            std::vector<graph::Injection> injections;
            std::vector<ad::Var> dvars(b - a);
            std::vector<int> bases(b - a);
            for (size_t g = a; g < b; ++g) {
                const RecordPlan& plan = plans[active[g]];
                const int base = static_cast<int>(tokens.size());
                bases[g - a] = base;
                tokens.insert(tokens.end(), plan.tokens.begin(), plan.tokens.end());
                for (size_t c = 1; c < plan.offsets.size(); ++c)
                    offsets.push_back(base + plan.offsets[c]);
                dvars[g - a] = tape.leaf(deltas[active[g]]);
                for (int row : plan.inject_rows)
                    injections.push_back({top_layer, base + row, dvars[g - a]});
            }
            graph::Options opts;
            opts.injections = injections;
            ad::Var logits = graph::lm_logits(tape, pv, tokens, offsets, opts);
            ad::Var logp = tape.log_softmax_rows(logits);

            ad::Var total;
            std::vector<double> nll_now(b - a);
            for (size_t g = a; g < b; ++g) {
                std::vector<std::pair<int, int>> coords = plans[active[g]].coords;
                for (auto& [row, col] : coords) row += bases[g - a];
                ad::Var rec_loss = tape.scale(tape.pick_sum(logp, std::move(coords)), -inv_ctx);
                nll_now[g - a] = tape.scalar(rec_loss);
                total = (g == a) ? rec_loss : tape.add(total, rec_loss);
            }

            bool need_back = false;
            std::vector<char> update(b - a, 0);
            for (size_t g = a; g < b; ++g) {
                const size_t r = active[g];
                const double loss = nll_now[g - a];
                if (!std::isfinite(loss))
                    throw TrainingError("target optimization diverged for record " +
                                        std::to_string(records[r].id));
                out.nll[r] = loss;
                if (loss < nll_gate) {
                    out.gated[r] = 1;
                    continue;
                }
                if (it == steps) continue;
                update[g - a] = 1;
                need_back = true;
                still.push_back(r);
            }
            if (need_back) {
                tape.backward(total);
                for (size_t g = a; g < b; ++g)
                    if (update[g - a]) deltas[active[g]] -= lr * tape.grad(dvars[g - a]);
            }
            a = b;
        }
        if (it == steps || still.empty()) break;
        active = std::move(still);
    }

    for (size_t r = 0; r < u; ++r) out.residuals.row(static_cast<Eigen::Index>(r)) = deltas[r].row(0);
    const Mat hbar = subject_point_traces(params, tok, records, top_layer, prefixes, false);
    out.targets = hbar + out.residuals;
    return out;
}

Mat solve_delta(const Mat& k1, const Mat& r1, const Mat& c0, double lambda_c) {
    if (c0.rows() != c0.cols()) throw InputError("C0 must be square");
    if (k1.cols() != c0.rows()) throw InputError("key width does not match C0");
    if (k1.rows() != r1.rows()) throw InputError("key and residual row counts differ");
    if (lambda_c < 0) throw InputError("covariance scale must be non-negative");
    if (!all_finite(k1) || !all_finite(r1) || !all_finite(c0))
        throw InputError("solve inputs hold non-finite values");

    const Mat b = k1.transpose() * r1;
    if (b.norm() == 0.0) return Mat::Zero(c0.rows(), r1.cols());

    const Mat a = lambda_c * c0 + k1.transpose() * k1;
    const std::string hint =
        "; the normal equations are singular or ill-conditioned - set covariance_scale > 0";
    Eigen::LDLT<Mat> ldlt(a);
    if (ldlt.info() != Eigen::Success) throw SolverError("LDLT factorization failed" + hint);
    Mat d = ldlt.solve(b);
    if (!all_finite(d)) throw SolverError("solve produced non-finite values" + hint);

    const double scale = std::max(1.0, 2.0 * b.norm());
    const double resid = 2.0 * (a * d - b).norm();
    if (!(resid < 1e-5 * scale))
        throw SolverError("stationarity check failed (gradient norm " + std::to_string(resid) +
                          ")" + hint);
    return d;
}

double preservation_ratio(const Mat& k0, const Mat& w_out, const Mat& delta) {
    if (k0.cols() != w_out.rows() || w_out.rows() != delta.rows() ||
        w_out.cols() != delta.cols())
        throw InputError("preservation_ratio shape mismatch");
    const double denom = (k0 * w_out).norm();
    if (denom == 0.0) throw InputError("key bank projects to zero through w_out");
    return (k0 * delta).norm() / denom;
}

std::pair<ModelParams, EditDelta> apply_edit(const ModelParams& params, const Tokenizer& tok,
                                             const std::vector<FactRecord>& records,
                                             const KeyBank& bank, const EditConfig& cfg,
                                             uint64_t seed) {
    return edit_impl(params, tok, records, bank, cfg, seed, true);
}

std::pair<ModelParams, EditDelta> joint_edit(const ModelParams& params, const Tokenizer& tok,
                                             const std::vector<FactRecord>& records,
                                             const KeyBank& bank, const EditConfig& cfg,
                                             uint64_t seed) {
    return edit_impl(params, tok, records, bank, cfg, seed, false);
}

EditDelta merge_deltas(const EditDelta& a, const EditDelta& b) {
    if (a.config_hash != b.config_hash)
        throw ContractError("cannot merge deltas built from different configurations");
    if (a.deltas.size() != b.deltas.size())
        throw ContractError("cannot merge deltas over different layer sets");

    EditDelta out;
    out.config_hash = a.config_hash;

    std::set<std::string> langs;
    for (const EditDelta* d : {&a, &b}) {
        std::string token;
        for (char c : d->language + "+") {
            if (c == '+') {
                if (!token.empty()) langs.insert(token);
                token.clear();
            } else {
                token += c;
            }
        }
    }
    for (const std::string& lang : langs) {
        if (!out.language.empty()) out.language += '+';
        out.language += lang;
    }

    std::set<int> ids(a.record_ids.begin(), a.record_ids.end());
    ids.insert(b.record_ids.begin(), b.record_ids.end());
    out.record_ids.assign(ids.begin(), ids.end());

    for (const auto& [layer, mat] : a.deltas) {
        auto it = b.deltas.find(layer);
        if (it == b.deltas.end())
            throw ContractError("cannot merge deltas over different layer sets");
        if (it->second.rows() != mat.rows() || it->second.cols() != mat.cols())
            throw ContractError("delta shapes differ at layer " + std::to_string(layer));
        out.deltas[layer] = mat + it->second;
    }
    return out;
}

ModelParams apply_delta(const ModelParams& params, const EditDelta& delta) {
    ModelParams out = params;
    for (const auto& [layer, d] : delta.deltas) {
        if (layer < 1 || layer > out.config.n_layers)
            throw ContractError("delta layer " + std::to_string(layer) + " out of range");
        Mat& w = out.layers[static_cast<size_t>(layer) - 1].w_out;
        if (d.rows() != w.rows() || d.cols() != w.cols())
            throw ContractError("delta shape mismatch at layer " + std::to_string(layer));
        w += d;
    }
    out.check_finite("model with delta applied");
    return out;
}

void save_delta(const std::filesystem::path& path, const EditDelta& delta) {
    TensorFile file;
    file.meta["config_hash"] = delta.config_hash;
    file.meta["language"] = delta.language;
    std::string ids;
    for (int id : delta.record_ids) {
        if (!ids.empty()) ids += ',';
        ids += std::to_string(id);
    }
    file.meta["record_ids"] = ids;
    for (const auto& [layer, mat] : delta.deltas)
        file.tensors.emplace_back("delta." + std::to_string(layer), mat);
    save_tensor_file(path, "edit-delta", file);
}

EditDelta load_delta(const std::filesystem::path& path) {
    TensorFile file = load_tensor_file(path, "edit-delta");
    EditDelta out;
    for (const char* key : {"config_hash", "language", "record_ids"})
        if (!file.meta.count(key))
            throw IoError(path.string() + " is missing delta metadata '" + key + "'");
    out.config_hash = file.meta["config_hash"];
    out.language = file.meta["language"];
    std::string token;
    for (char c : file.meta["record_ids"] + ",") {
        if (c == ',') {
            if (!token.empty()) out.record_ids.push_back(std::stoi(token));
            token.clear();
        } else if (c == '-' || (c >= '0' && c <= '9')) {
            token += c;
        } else {
            throw IoError("malformed record id list in " + path.string());
        }
    }
    for (auto& [name, mat] : file.tensors) {
        if (name.rfind("delta.", 0) != 0)
            throw IoError("unexpected tensor " + name + " in delta file");
        int layer = 0;
        try {
            layer = std::stoi(name.substr(6));
        } catch (const std::exception&) {
            throw IoError("malformed tensor name " + name + " in delta file");
        }
        if (out.deltas.count(layer)) throw IoError("duplicate delta for layer " + name.substr(6));
        out.deltas[layer] = std::move(mat);
    }
    return out;
}

}  // namespace memat
