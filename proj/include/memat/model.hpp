#pragma once

#include "memat/tape.hpp"

#include <map>
#include <span>
#include <string>
#include <tuple>

namespace memat {

enum class Activation { gelu, relu };
enum class Positional { rotary, learned, none };

struct ModelConfig {
    int n_layers = 8;
    int n_heads = 8;
    int d_model = 64;
    int d_ff = 256;
    int vocab_size = 512;
    int max_seq_len = 64;
    Activation activation = Activation::gelu;
    Positional positional = Positional::rotary;
    bool layernorm = true;
    uint64_t seed = 0;

    int head_dim() const { return d_model / n_heads; }
    void validate() const;
    bool operator==(const ModelConfig&) const = default;
};

struct LayerParams {
    std::vector<Mat> w_q;  // per head, d x dh
    Mat w_k, w_v;          // shared across heads, d x dh
    std::vector<Mat> w_o;  // per head, dh x d
    Mat w_in, w_out;       // d x dff, dff x d
    Mat ln_attn_scale, ln_attn_shift, ln_mlp_scale, ln_mlp_shift;  // 1 x d when layernorm on
};

struct ModelParams {
    ModelConfig config;
    Mat embedding;      // V x d
    Mat pos_embedding;  // max_seq_len x d when positional == learned
    std::vector<LayerParams> layers;
    Mat ln_f_scale, ln_f_shift;  // final norm, 1 x d when layernorm on
    Mat unembed;                 // d x V

    // Visits every tensor with its canonical (0-based) name, in a fixed order.
    void for_each_tensor(const std::function<void(const std::string&, Mat&)>& fn);
    void for_each_tensor(const std::function<void(const std::string&, const Mat&)>& fn) const;
    void check_finite(const std::string& context) const;
    uint64_t content_hash() const;
};

// 1-based (layer, head) position.
struct HeadKey {
    int layer = 0;
    int head = 0;
    auto operator<=>(const HeadKey&) const = default;
};

// Per-head offset vectors added to head activations at every position.
struct HeadPatch {
    std::map<HeadKey, Vec> entries;  // each 1 x head_dim
    void validate(const ModelConfig& cfg) const;
    bool empty() const { return entries.empty(); }
};

// Activation capture requests. Layers and heads are 1-based; token positions
// 0-based within the sequence.
struct TraceRequest {
    std::vector<std::pair<int, int>> mlp_keys;            // (layer, pos)
    std::vector<std::tuple<int, int, int>> head_outputs;  // (layer, head, pos)
    std::vector<std::pair<int, int>> residuals;           // (layer, pos)
    std::vector<HeadKey> attn_rows;                       // full attention matrices
    void validate(const ModelConfig& cfg, int seq_len) const;
    bool empty() const {
        return mlp_keys.empty() && head_outputs.empty() && residuals.empty() && attn_rows.empty();
    }
};

struct Trace {
    std::map<std::pair<int, int>, Vec> mlp_keys;
    std::map<std::tuple<int, int, int>, Vec> head_outputs;
    std::map<std::pair<int, int>, Vec> residuals;
    std::map<std::pair<int, int>, Mat> attn_rows;
};

// Allocates every tensor at its configured shape, uninitialized.
ModelParams allocate_params(const ModelConfig& cfg);

// Weights drawn N(0, 0.02), residual projections (w_o, w_out) scaled by
// 1/sqrt(2 L), layer norm at identity. Reproducible from config.seed.
ModelParams init_model(const ModelConfig& cfg);

struct ForwardResult {
    Mat probs;  // N x V; row r is the next-token distribution after position r
    Trace trace;
};

ForwardResult forward(const ModelParams& params, std::span<const int> tokens,
                      const HeadPatch* patch = nullptr, const TraceRequest* trace = nullptr);

// log P(continuation | prompt), summed per token in log space.
double sequence_logprob(const ModelParams& params, std::span<const int> prompt,
                        std::span<const int> continuation, const HeadPatch* patch = nullptr);

// Greedy decoding when temperature == 0 (sentinel), otherwise samples at the
// given temperature with a stream derived from seed.
std::vector<int> generate(const ModelParams& params, std::span<const int> prompt, int n_tokens,
                          double temperature, uint64_t seed, const HeadPatch* patch = nullptr);

struct PackedForward {
    std::vector<Mat> probs;                          // one matrix per sequence
    std::vector<std::map<HeadKey, Vec>> head_last;   // per sequence, when requested
};

// Runs many sequences through shared packed graphs (cheaper than one forward
// per sequence). Optionally captures the listed heads' outputs at each
// sequence's final token.
PackedForward forward_many(const ModelParams& params, const std::vector<std::vector<int>>& seqs,
                           const HeadPatch* patch = nullptr,
                           const std::vector<HeadKey>* capture_heads = nullptr,
                           int max_rows_per_graph = 4096);

// ------------------------------------------------------------ graph building

namespace graph {

// Model weights registered on a tape, either as constants (inference, frozen
// model) or leaves (training).
struct ParamVars {
    ad::Var embedding, pos_embedding;
    struct LayerVars {
        std::vector<ad::Var> w_q, w_o;
        ad::Var w_k, w_v, w_in, w_out;
        ad::Var ln_attn_scale, ln_attn_shift, ln_mlp_scale, ln_mlp_shift;
    };
    std::vector<LayerVars> layers;
    ad::Var ln_f_scale, ln_f_shift;
    ad::Var unembed;
    ModelConfig config;
};

ParamVars bind(ad::Tape& tape, const ModelParams& params, bool trainable);

// Extra vector added into the residual stream x^layer at one stacked row.
struct Injection {
    int layer = 0;  // 1-based; applied after that layer's update
    int row = 0;    // row in the stacked token matrix
    ad::Var delta;  // 1 x d
};

struct Options {
    const std::map<HeadKey, ad::Var>* head_patch = nullptr;
    std::span<const Injection> injections;
    // Trace positions index stacked rows when several segments are packed.
    const TraceRequest* trace_req = nullptr;
    Trace* trace_out = nullptr;
};

// Builds the language-model graph over one or more packed sequences and
// returns the T x V logits. seg_offsets: one start offset per segment plus the
// total length; attention and positions never cross segment boundaries.
ad::Var lm_logits(ad::Tape& tape, const ParamVars& pv, std::span<const int> tokens,
                  std::span<const int> seg_offsets, const Options& opts = {});

// Trainable vars in for_each_tensor order, paired with their canonical names.
std::vector<std::pair<std::string, ad::Var>> named_vars(const ParamVars& pv);

}  // namespace graph

}  // namespace memat
