#include "memat/model.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

namespace memat {

void ModelConfig::validate() const {
    if (n_layers < 1) throw ConfigError("n_layers must be at least 1");
    if (n_heads < 1) throw ConfigError("n_heads must be at least 1");
    if (d_model < 1 || d_ff < 1) throw ConfigError("d_model and d_ff must be positive");
    if (vocab_size < 2) throw ConfigError("vocab_size must be at least 2");
    if (max_seq_len < 1) throw ConfigError("max_seq_len must be at least 1");
    if (d_model % n_heads != 0)
        throw ConfigError("d_model (" + std::to_string(d_model) + ") must be divisible by n_heads (" +
                          std::to_string(n_heads) + ")");
    if (positional == Positional::rotary && head_dim() % 2 != 0)
        throw ConfigError("rotary positions need an even head dimension");
}

ModelParams allocate_params(const ModelConfig& cfg) {
    cfg.validate();
    ModelParams p;
    p.config = cfg;
    const ModelConfig& c = p.config;
    const int dh = c.head_dim();
    p.embedding.resize(c.vocab_size, c.d_model);
    if (c.positional == Positional::learned) p.pos_embedding.resize(c.max_seq_len, c.d_model);
    p.layers.resize(c.n_layers);
    for (auto& l : p.layers) {
        l.w_q.assign(c.n_heads, Mat(c.d_model, dh));
        l.w_k.resize(c.d_model, dh);
        l.w_v.resize(c.d_model, dh);
        l.w_o.assign(c.n_heads, Mat(dh, c.d_model));
        l.w_in.resize(c.d_model, c.d_ff);
        l.w_out.resize(c.d_ff, c.d_model);
        if (c.layernorm) {
            l.ln_attn_scale.resize(1, c.d_model);
            l.ln_attn_shift.resize(1, c.d_model);
            l.ln_mlp_scale.resize(1, c.d_model);
            l.ln_mlp_shift.resize(1, c.d_model);
        }
    }
    if (c.layernorm) {
        p.ln_f_scale.resize(1, c.d_model);
        p.ln_f_shift.resize(1, c.d_model);
    }
    p.unembed.resize(c.d_model, c.vocab_size);
    return p;
}

void ModelParams::for_each_tensor(const std::function<void(const std::string&, Mat&)>& fn) {
    fn("embed", embedding);
    if (config.positional == Positional::learned) fn("pos_embed", pos_embedding);
    for (int l = 0; l < config.n_layers; ++l) {
        const std::string pre = "layers." + std::to_string(l) + ".";
        for (int h = 0; h < config.n_heads; ++h) fn(pre + "attn.wq." + std::to_string(h), layers[l].w_q[h]);
        fn(pre + "attn.wk", layers[l].w_k);
        fn(pre + "attn.wv", layers[l].w_v);
        for (int h = 0; h < config.n_heads; ++h) fn(pre + "attn.wo." + std::to_string(h), layers[l].w_o[h]);
        if (config.layernorm) {
            fn(pre + "ln_attn.scale", layers[l].ln_attn_scale);
            fn(pre + "ln_attn.shift", layers[l].ln_attn_shift);
            fn(pre + "ln_mlp.scale", layers[l].ln_mlp_scale);
            fn(pre + "ln_mlp.shift", layers[l].ln_mlp_shift);
        }
        fn(pre + "mlp.win", layers[l].w_in);
        fn(pre + "mlp.wout", layers[l].w_out);
    }
    if (config.layernorm) {
        fn("ln_f.scale", ln_f_scale);
        fn("ln_f.shift", ln_f_shift);
    }
    fn("unembed", unembed);
}

void ModelParams::for_each_tensor(const std::function<void(const std::string&, const Mat&)>& fn) const {
    const_cast<ModelParams*>(this)->for_each_tensor(
        [&fn](const std::string& name, Mat& m) { fn(name, m); });
}

void ModelParams::check_finite(const std::string& context) const {
    for_each_tensor([&](const std::string& name, const Mat& m) {
        if (!m.allFinite()) throw ContractError(context + ": non-finite values in tensor " + name);
    });
}

uint64_t ModelParams::content_hash() const {
    uint64_t h = fnv1a64_init();
    for_each_tensor([&](const std::string& name, const Mat& m) {
        h = fnv1a64(h, name.data(), name.size());
        int64_t dims[2] = {m.rows(), m.cols()};
        h = fnv1a64(h, dims, sizeof(dims));
        for (Eigen::Index i = 0; i < m.size(); ++i) {
            float f = static_cast<float>(m.data()[i]);
            h = fnv1a64(h, &f, sizeof(f));
        }
    });
    return h;
}

ModelParams init_model(const ModelConfig& cfg) {
    ModelParams p = allocate_params(cfg);
    Rng rng(cfg.seed);
    const double resid_scale = 1.0 / std::sqrt(2.0 * cfg.n_layers);
    p.for_each_tensor([&](const std::string& name, Mat& m) {
        if (name.ends_with(".scale")) {
            m.setOnes();
            return;
        }
        if (name.ends_with(".shift")) {
            m.setZero();
            return;
        }
        for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = 0.02 * rng.normal();
        if (name.find("attn.wo.") != std::string::npos || name.ends_with("mlp.wout")) m *= resid_scale;
    });
    return p;
}

void HeadPatch::validate(const ModelConfig& cfg) const {
    for (const auto& [key, vec] : entries) {
        if (key.layer < 1 || key.layer > cfg.n_layers || key.head < 1 || key.head > cfg.n_heads)
            throw InputError("head patch key (" + std::to_string(key.layer) + "," +
                             std::to_string(key.head) + ") out of range");
        if (vec.size() != cfg.head_dim())
            throw InputError("head patch vector must have length " + std::to_string(cfg.head_dim()));
        if (!vec.allFinite()) throw InputError("head patch vector has non-finite entries");
    }
}

void TraceRequest::validate(const ModelConfig& cfg, int seq_len) const {
    auto check_layer = [&](int l, int lo) {
        if (l < lo || l > cfg.n_layers) throw InputError("trace layer " + std::to_string(l) + " out of range");
    };
    auto check_head = [&](int h) {
        if (h < 1 || h > cfg.n_heads) throw InputError("trace head " + std::to_string(h) + " out of range");
    };
    auto check_pos = [&](int t) {
        if (t < 0 || t >= seq_len) throw InputError("trace position " + std::to_string(t) + " out of range");
    };
    for (auto [l, t] : mlp_keys) check_layer(l, 1), check_pos(t);
    for (auto [l, h, t] : head_outputs) check_layer(l, 1), check_head(h), check_pos(t);
    for (auto [l, t] : residuals) check_layer(l, 0), check_pos(t);
    for (auto k : attn_rows) check_layer(k.layer, 1), check_head(k.head);
}

namespace graph {

ParamVars bind(ad::Tape& tape, const ModelParams& params, bool trainable) {
    auto reg = [&](const Mat& m) { return trainable ? tape.leaf(m) : tape.constant(m); };
    ParamVars pv;
    pv.config = params.config;
    pv.embedding = reg(params.embedding);
    if (params.config.positional == Positional::learned) pv.pos_embedding = reg(params.pos_embedding);
    pv.layers.resize(params.layers.size());
    for (size_t l = 0; l < params.layers.size(); ++l) {
        const LayerParams& lp = params.layers[l];
        auto& lv = pv.layers[l];
        for (const Mat& w : lp.w_q) lv.w_q.push_back(reg(w));
        lv.w_k = reg(lp.w_k);
        lv.w_v = reg(lp.w_v);
        for (const Mat& w : lp.w_o) lv.w_o.push_back(reg(w));
        lv.w_in = reg(lp.w_in);
        lv.w_out = reg(lp.w_out);
        if (params.config.layernorm) {
            lv.ln_attn_scale = reg(lp.ln_attn_scale);
            lv.ln_attn_shift = reg(lp.ln_attn_shift);
            lv.ln_mlp_scale = reg(lp.ln_mlp_scale);
            lv.ln_mlp_shift = reg(lp.ln_mlp_shift);
        }
    }
    if (params.config.layernorm) {
        pv.ln_f_scale = reg(params.ln_f_scale);
        pv.ln_f_shift = reg(params.ln_f_shift);
    }
    pv.unembed = reg(params.unembed);
    return pv;
}

ad::Var lm_logits(ad::Tape& tape, const ParamVars& pv, std::span<const int> tokens,
                  std::span<const int> seg_offsets, const Options& opts) {
    const ModelConfig& cfg = pv.config;
    const int total = static_cast<int>(tokens.size());
    if (total == 0) throw InputError("token sequence must be non-empty");
    if (seg_offsets.size() < 2 || seg_offsets.front() != 0 || seg_offsets.back() != total)
        throw InputError("segment offsets must start at 0 and end at the token count");
    for (size_t s = 0; s + 1 < seg_offsets.size(); ++s) {
        const int len = seg_offsets[s + 1] - seg_offsets[s];
        if (len <= 0) throw InputError("segments must be non-empty and ordered");
        if (len > cfg.max_seq_len)
            throw InputError("segment length " + std::to_string(len) + " exceeds max_seq_len " +
                             std::to_string(cfg.max_seq_len));
    }
    std::vector<int> ids(tokens.begin(), tokens.end());
    for (int t : ids)
        if (t < 0 || t >= cfg.vocab_size)
            throw InputError("token id " + std::to_string(t) + " outside vocabulary");

    std::vector<int> positions(total);
    for (size_t s = 0; s + 1 < seg_offsets.size(); ++s)
        for (int r = seg_offsets[s]; r < seg_offsets[s + 1]; ++r) positions[r] = r - seg_offsets[s];
    const std::vector<int> segs(seg_offsets.begin(), seg_offsets.end());

    Trace* trace = opts.trace_out;
    auto grab_row = [&](ad::Var v, int row) { return Vec(tape.val(v).row(row)); };

    ad::Var x = tape.gather_rows(pv.embedding, ids);
    if (cfg.positional == Positional::learned)
        x = tape.add(x, tape.gather_rows(pv.pos_embedding, positions));

    if (trace && opts.trace_req)
        for (auto [l, t] : opts.trace_req->residuals)
            if (l == 0) trace->residuals[{l, t}] = grab_row(x, t);

    for (int l = 0; l < cfg.n_layers; ++l) {
        const auto& lv = pv.layers[l];
        ad::Var xa = cfg.layernorm ? tape.layernorm(x, lv.ln_attn_scale, lv.ln_attn_shift) : x;
        ad::Var xm = cfg.layernorm ? tape.layernorm(x, lv.ln_mlp_scale, lv.ln_mlp_shift) : x;

        ad::Var k = tape.matmul(xa, lv.w_k);
        ad::Var v = tape.matmul(xa, lv.w_v);
        if (cfg.positional == Positional::rotary) k = tape.rotary(k, positions);

        ad::Var attn_sum{};
        for (int h = 0; h < cfg.n_heads; ++h) {
            ad::Var q = tape.matmul(xa, lv.w_q[h]);
            if (cfg.positional == Positional::rotary) q = tape.rotary(q, positions);
            bool want_rows = false;
            if (trace && opts.trace_req)
                for (auto key : opts.trace_req->attn_rows)
                    if (key.layer == l + 1 && key.head == h + 1) want_rows = true;
            ad::AttnCapture capture;
            ad::Var head = tape.causal_attention(q, k, v, segs, want_rows ? &capture : nullptr);
            if (trace && opts.trace_req) {
                for (auto [tl, th, tp] : opts.trace_req->head_outputs)
                    if (tl == l + 1 && th == h + 1) trace->head_outputs[{tl, th, tp}] = grab_row(head, tp);
                if (want_rows) {
                    Mat full = Mat::Zero(total, total);
                    for (size_t s = 0; s + 1 < seg_offsets.size(); ++s) {
                        const int begin = seg_offsets[s];
                        const Mat& block = capture.rows[s];
                        full.block(begin, begin, block.rows(), block.cols()) = block;
                    }
                    trace->attn_rows[{l + 1, h + 1}] = std::move(full);
                }
            }
            if (opts.head_patch) {
                auto it = opts.head_patch->find(HeadKey{l + 1, h + 1});
                if (it != opts.head_patch->end()) head = tape.add_row_broadcast(head, it->second);
            }
            ad::Var contrib = tape.matmul(head, lv.w_o[h]);
            attn_sum = (h == 0) ? contrib : tape.add(attn_sum, contrib);
        }

        ad::Var pre = tape.matmul(xm, lv.w_in);
        ad::Var acts = cfg.activation == Activation::gelu ? tape.gelu(pre) : tape.relu(pre);
        if (trace && opts.trace_req)
            for (auto [tl, tp] : opts.trace_req->mlp_keys)
                if (tl == l + 1) trace->mlp_keys[{tl, tp}] = grab_row(acts, tp);
        ad::Var m = tape.matmul(acts, lv.w_out);

        x = tape.add(tape.add(x, attn_sum), m);
        for (const Injection& inj : opts.injections)
            if (inj.layer == l + 1) x = tape.add_rows_at(x, inj.delta, {inj.row});
        if (trace && opts.trace_req)
            for (auto [tl, tp] : opts.trace_req->residuals)
                if (tl == l + 1) trace->residuals[{tl, tp}] = grab_row(x, tp);
    }

    ad::Var xf = cfg.layernorm ? tape.layernorm(x, pv.ln_f_scale, pv.ln_f_shift) : x;
    return tape.matmul(xf, pv.unembed);
}

std::vector<std::pair<std::string, ad::Var>> named_vars(const ParamVars& pv) {
    std::vector<std::pair<std::string, ad::Var>> out;
    out.emplace_back("embed", pv.embedding);
    if (pv.config.positional == Positional::learned) out.emplace_back("pos_embed", pv.pos_embedding);
    for (size_t l = 0; l < pv.layers.size(); ++l) {
        const std::string pre = "layers." + std::to_string(l) + ".";
        const auto& lv = pv.layers[l];
        for (size_t h = 0; h < lv.w_q.size(); ++h)
            out.emplace_back(pre + "attn.wq." + std::to_string(h), lv.w_q[h]);
        out.emplace_back(pre + "attn.wk", lv.w_k);
        out.emplace_back(pre + "attn.wv", lv.w_v);
        for (size_t h = 0; h < lv.w_o.size(); ++h)
            out.emplace_back(pre + "attn.wo." + std::to_string(h), lv.w_o[h]);
        if (pv.config.layernorm) {
            out.emplace_back(pre + "ln_attn.scale", lv.ln_attn_scale);
            out.emplace_back(pre + "ln_attn.shift", lv.ln_attn_shift);
            out.emplace_back(pre + "ln_mlp.scale", lv.ln_mlp_scale);
            out.emplace_back(pre + "ln_mlp.shift", lv.ln_mlp_shift);
        }
        out.emplace_back(pre + "mlp.win", lv.w_in);
        out.emplace_back(pre + "mlp.wout", lv.w_out);
    }
    if (pv.config.layernorm) {
        out.emplace_back("ln_f.scale", pv.ln_f_scale);
        out.emplace_back("ln_f.shift", pv.ln_f_shift);
    }
    out.emplace_back("unembed", pv.unembed);
    return out;
}

}  // namespace graph

ForwardResult forward(const ModelParams& params, std::span<const int> tokens, const HeadPatch* patch,
                      const TraceRequest* trace_req) {
    const ModelConfig& cfg = params.config;
    if (tokens.empty()) throw InputError("forward needs at least one token");
    if (static_cast<int>(tokens.size()) > cfg.max_seq_len)
        throw InputError("sequence length " + std::to_string(tokens.size()) + " exceeds max_seq_len " +
                         std::to_string(cfg.max_seq_len));
    if (patch) patch->validate(cfg);
    if (trace_req) trace_req->validate(cfg, static_cast<int>(tokens.size()));

    ad::Tape tape;
    graph::ParamVars pv = graph::bind(tape, params, false);
    std::map<HeadKey, ad::Var> patch_vars;
    if (patch)
        for (const auto& [key, vec] : patch->entries) patch_vars[key] = tape.constant(Mat(vec));

    ForwardResult out;
    graph::Options opts;
    if (patch) opts.head_patch = &patch_vars;
    if (trace_req) {
        opts.trace_req = trace_req;
        opts.trace_out = &out.trace;
    }
    const int offsets[2] = {0, static_cast<int>(tokens.size())};
    ad::Var logits = graph::lm_logits(tape, pv, tokens, offsets, opts);
    out.probs = ad::softmax_rows(tape.val(logits));
    return out;
}

double sequence_logprob(const ModelParams& params, std::span<const int> prompt,
                        std::span<const int> continuation, const HeadPatch* patch) {
    if (continuation.empty()) return 0.0;
    if (prompt.empty()) throw InputError("prompt must be non-empty");
    std::vector<int> tokens(prompt.begin(), prompt.end());
    tokens.insert(tokens.end(), continuation.begin(), continuation.end());
    ForwardResult fr = forward(params, tokens, patch, nullptr);
    double total = 0.0;
    const int p = static_cast<int>(prompt.size());
    for (size_t t = 0; t < continuation.size(); ++t)
        total += std::log(fr.probs(p - 1 + static_cast<int>(t), continuation[t]));
    return total;
}

std::vector<int> generate(const ModelParams& params, std::span<const int> prompt, int n_tokens,
                          double temperature, uint64_t seed, const HeadPatch* patch) {
    if (n_tokens < 0) throw InputError("n_tokens must be non-negative");
    if (temperature < 0.0) throw InputError("temperature must be non-negative");
    if (prompt.empty()) throw InputError("prompt must be non-empty");
    if (static_cast<int>(prompt.size()) + n_tokens > params.config.max_seq_len)
        throw InputError("prompt plus n_tokens exceeds max_seq_len");

    std::vector<int> seq(prompt.begin(), prompt.end());
    std::vector<int> out;
    Rng rng(seed);
    for (int step = 0; step < n_tokens; ++step) {
        ForwardResult fr = forward(params, seq, patch, nullptr);
        const Vec row = fr.probs.row(fr.probs.rows() - 1);
        int next = 0;
        if (temperature == 0.0) {
            row.maxCoeff(&next);
        } else {
            // softmax of log p / temperature, sampled by inverse cdf
            Vec logits = (row.array().max(1e-300).log() / temperature).matrix();
            const double mx = logits.maxCoeff();
            Vec weights = (logits.array() - mx).exp().matrix();
            weights /= weights.sum();
            const double u = rng.uniform();
            double cum = 0.0;
            next = static_cast<int>(weights.size()) - 1;
            for (int i = 0; i < weights.size(); ++i) {
                cum += weights(i);
                if (u < cum) {
                    next = i;
                    break;
                }
            }
        }
        seq.push_back(next);
        out.push_back(next);
    }
    return out;
}

PackedForward forward_many(const ModelParams& params, const std::vector<std::vector<int>>& seqs,
                           const HeadPatch* patch, const std::vector<HeadKey>* capture_heads,
                           int max_rows_per_graph) {
    if (max_rows_per_graph < 1) throw InputError("max_rows_per_graph must be positive");
    if (patch) patch->validate(params.config);
    if (capture_heads)
        for (HeadKey key : *capture_heads)
            if (key.layer < 1 || key.layer > params.config.n_layers || key.head < 1 ||
                key.head > params.config.n_heads)
                throw InputError("capture head (" + std::to_string(key.layer) + "," +
                                 std::to_string(key.head) + ") out of range");
    PackedForward out;
    out.probs.resize(seqs.size());
    if (capture_heads) out.head_last.resize(seqs.size());

    size_t i = 0;
    while (i < seqs.size()) {
        // pack a run of sequences into one graph
        std::vector<int> tokens, offsets = {0};
        const size_t begin = i;
        while (i < seqs.size()) {
            const auto& s = seqs[i];
            if (s.empty()) throw InputError("forward_many needs non-empty sequences");
            if (!tokens.empty() && tokens.size() + s.size() > static_cast<size_t>(max_rows_per_graph))
                break;
            tokens.insert(tokens.end(), s.begin(), s.end());
            offsets.push_back(static_cast<int>(tokens.size()));
            ++i;
        }

        ad::Tape tape;
        graph::ParamVars pv = graph::bind(tape, params, false);
        std::map<HeadKey, ad::Var> patch_vars;
        graph::Options opts;
        if (patch) {
            for (const auto& [key, vec] : patch->entries) patch_vars[key] = tape.constant(Mat(vec));
            opts.head_patch = &patch_vars;
        }
        TraceRequest req;
        Trace trace;
        if (capture_heads) {
            for (size_t s = begin; s < i; ++s) {
                const int last_row = offsets[s - begin + 1] - 1;
                for (HeadKey key : *capture_heads)
                    req.head_outputs.emplace_back(key.layer, key.head, last_row);
            }
            opts.trace_req = &req;
            opts.trace_out = &trace;
        }
        ad::Var logits = graph::lm_logits(tape, pv, tokens, offsets, opts);
        const Mat probs = ad::softmax_rows(tape.val(logits));
        for (size_t s = begin; s < i; ++s) {
            const int r0 = offsets[s - begin], r1 = offsets[s - begin + 1];
            out.probs[s] = probs.middleRows(r0, r1 - r0);
            if (capture_heads)
                for (HeadKey key : *capture_heads)
                    out.head_last[s][key] = trace.head_outputs.at({key.layer, key.head, r1 - 1});
        }
    }
    return out;
}

}  // namespace memat
