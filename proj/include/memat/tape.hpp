#pragma once

#include "memat/common.hpp"

#include <span>
#include <utility>

namespace memat::ad {

using memat::Mat;
using memat::Vec;

// Handle into a Tape. Invalid until assigned.
struct Var {
    int32_t id = -1;
    bool valid() const { return id >= 0; }
};

// Capture sink for attention matrices (one entry per segment).
struct AttnCapture {
    std::vector<Mat> rows;
};

// Reverse-mode tape over dense row-major matrices. Graphs are built
// define-by-run; creation order is a valid topological order, so backward()
// walks the node list in reverse. Ops only record a backward closure when at
// least one input requires gradients, which keeps pure inference cheap.
class Tape {
public:
    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    Var leaf(Mat value);
    Var constant(Mat value);
    Var constant_scalar(double value);

    const Mat& val(Var v) const { return node(v).value; }
    double scalar(Var v) const;
    // Zero matrix if the node was never reached by backward().
    Mat grad(Var v) const;
    bool requires_grad(Var v) const { return node(v).needs_grad; }
    size_t size() const { return nodes_.size(); }

    // out = a * b
    Var matmul(Var a, Var b);
    // out = a * b^T
    Var matmul_nt(Var a, Var b);
    Var add(Var a, Var b);
    Var sub(Var a, Var b);
    Var hadamard(Var a, Var b);
    Var scale(Var a, double s);
    Var exp(Var a);
    Var gelu(Var a);
    Var relu(Var a);
    // row (1 x k) added to every row of a (n x k)
    Var add_row_broadcast(Var a, Var row);
    // row (1 x k) added to a at the given row indices
    Var add_rows_at(Var a, Var row, std::vector<int> rows);
    // rows of table selected by ids; backward scatter-adds
    Var gather_rows(Var table, std::vector<int> ids);
    // rotary position transform; positions[r] is the in-segment position of row r
    Var rotary(Var x, std::vector<int> positions, double base = 10000.0);
    // per-row layer norm with learned scale/shift (1 x d each)
    Var layernorm(Var x, Var scale_v, Var shift_v, double eps = 1e-5);
    // fused causal attention over concatenated segments: for each segment
    // softmax(q k^T / sqrt(dh) + causal mask) v. seg_offsets has one entry per
    // segment start plus a final total-length entry. capture, when non-null,
    // receives the per-segment attention matrices.
    Var causal_attention(Var q, Var k, Var v, std::vector<int> seg_offsets,
                         AttnCapture* capture = nullptr);
    Var log_softmax_rows(Var logits);
    // sum of m(r, c) over the index list -> 1x1
    Var pick_sum(Var m, std::vector<std::pair<int, int>> coords);
    Var sum_sq(Var a);
    Var sum_all(Var a);

    // Accumulates gradients of the 1x1 scalar into every reachable node.
    void backward(Var scalar_loss);

private:
    struct Node {
        Mat value;
        Mat grad;  // empty until touched
        bool needs_grad = false;
        std::function<void()> back;
    };

    const Node& node(Var v) const;
    Node& node(Var v);
    Var push(Mat value, bool needs_grad, std::function<void()> back);
    Mat& grad_buf(int32_t id);
    bool seeded(int32_t id) const;

    std::vector<Node> nodes_;
};

// Value-level helpers shared with inference paths.
Mat softmax_rows(const Mat& logits);
Mat log_softmax_rows_value(const Mat& logits);

}  // namespace memat::ad
