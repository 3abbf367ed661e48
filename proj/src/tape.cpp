#include "memat/tape.hpp"

namespace memat::ad {

namespace {

double gelu_scalar(double x) {
    return 0.5 * x * (1.0 + std::erf(x * M_SQRT1_2));
}

double gelu_grad_scalar(double x) {
    const double cdf = 0.5 * (1.0 + std::erf(x * M_SQRT1_2));
    const double pdf = std::exp(-0.5 * x * x) / std::sqrt(2.0 * M_PI);
    return cdf + x * pdf;
}

}  // namespace

const Tape::Node& Tape::node(Var v) const {
    if (!v.valid() || static_cast<size_t>(v.id) >= nodes_.size())
        throw ContractError("invalid tape variable");
    return nodes_[static_cast<size_t>(v.id)];
}

Tape::Node& Tape::node(Var v) {
    return const_cast<Node&>(static_cast<const Tape*>(this)->node(v));
}

Var Tape::push(Mat value, bool needs_grad, std::function<void()> back) {
    nodes_.push_back(Node{std::move(value), Mat(), needs_grad, std::move(back)});
    return Var{static_cast<int32_t>(nodes_.size() - 1)};
}

Mat& Tape::grad_buf(int32_t id) {
    Node& n = nodes_[static_cast<size_t>(id)];
    if (n.grad.size() == 0) n.grad = Mat::Zero(n.value.rows(), n.value.cols());
    return n.grad;
}

bool Tape::seeded(int32_t id) const {
    return nodes_[static_cast<size_t>(id)].grad.size() != 0;
}

Var Tape::leaf(Mat value) {
    return push(std::move(value), true, nullptr);
}

Var Tape::constant(Mat value) {
    return push(std::move(value), false, nullptr);
}

Var Tape::constant_scalar(double value) {
    Mat m(1, 1);
    m(0, 0) = value;
    return constant(std::move(m));
}

double Tape::scalar(Var v) const {
    const Mat& m = val(v);
    if (m.rows() != 1 || m.cols() != 1) throw ContractError("expected scalar node");
    return m(0, 0);
}

Mat Tape::grad(Var v) const {
    const Node& n = node(v);
    if (n.grad.size() == 0) return Mat::Zero(n.value.rows(), n.value.cols());
    return n.grad;
}

Var Tape::matmul(Var a, Var b) {
    const bool req = node(a).needs_grad || node(b).needs_grad;
    Mat out = val(a) * val(b);
    std::function<void()> back;
    if (req) {
        const int32_t ai = a.id, bi = b.id;
        back = [this, ai, bi, out_id = static_cast<int32_t>(nodes_.size())] {
            const Mat& g = nodes_[out_id].grad;
            if (nodes_[ai].needs_grad) grad_buf(ai).noalias() += g * nodes_[bi].value.transpose();
            if (nodes_[bi].needs_grad) grad_buf(bi).noalias() += nodes_[ai].value.transpose() * g;
        };
    }
    return push(std::move(out), req, std::move(back));
}

Var Tape::matmul_nt(Var a, Var b) {
    const bool req = node(a).needs_grad || node(b).needs_grad;
    Mat out = val(a) * val(b).transpose();
    std::function<void()> back;
    if (req) {
        const int32_t ai = a.id, bi = b.id;
        back = [this, ai, bi, out_id = static_cast<int32_t>(nodes_.size())] {
            const Mat& g = nodes_[out_id].grad;
            if (nodes_[ai].needs_grad) grad_buf(ai).noalias() += g * nodes_[bi].value;
            if (nodes_[bi].needs_grad) grad_buf(bi).noalias() += g.transpose() * nodes_[ai].value;
        };
    }
    return push(std::move(out), req, std::move(back));
}

Var Tape::add(Var a, Var b) {
    const bool req = node(a).needs_grad || node(b).needs_grad;
    Mat out = val(a) + val(b);
    std::function<void()> back;
    if (req) {
        const int32_t ai = a.id, bi = b.id;
        back = [this, ai, bi, out_id = static_cast<int32_t>(nodes_.size())] {
            const Mat& g = nodes_[out_id].grad;
            if (nodes_[ai].needs_grad) grad_buf(ai) += g;
            if (nodes_[bi].needs_grad) grad_buf(bi) += g;
        };
    }
    return push(std::move(out), req, std::move(back));
}

Var Tape::sub(Var a, Var b) {
    const bool req = node(a).needs_grad || node(b).needs_grad;
    Mat out = val(a) - val(b);
    std::function<void()> back;
    if (req) {
        const int32_t ai = a.id, bi = b.id;
        back = [this, ai, bi, out_id = static_cast<int32_t>(nodes_.size())] {
            const Mat& g = nodes_[out_id].grad;
            if (nodes_[ai].needs_grad) grad_buf(ai) += g;
            if (nodes_[bi].needs_grad) grad_buf(bi) -= g;
        };
    }
    return push(std::move(out), req, std::move(back));
}

Var Tape::hadamard(Var a, Var b) {
    const bool req = node(a).needs_grad || node(b).needs_grad;
    Mat out = val(a).cwiseProduct(val(b));
    std::function<void()> back;
    if (req) {
        const int32_t ai = a.id, bi = b.id;
        back = [this, ai, bi, out_id = static_cast<int32_t>(nodes_.size())] {
            const Mat& g = nodes_[out_id].grad;
            if (nodes_[ai].needs_grad) grad_buf(ai) += g.cwiseProduct(nodes_[bi].value);
            if (nodes_[bi].needs_grad) grad_buf(bi) += g.cwiseProduct(nodes_[ai].value);
        };
    }
    return push(std::move(out), req, std::move(back));
}

Var Tape::scale(Var a, double s) {
    const bool req = node(a).needs_grad;
    Mat out = val(a) * s;
    std::function<void()> back;
    if (req) {
        const int32_t ai = a.id;
        back = [this, ai, s, out_id = static_cast<int32_t>(nodes_.size())] {
            grad_buf(ai) += nodes_[out_id].grad * s;
        };
    }
    return push(std::move(out), req, std::move(back));
}

Var Tape::exp(Var a) {
    const bool req = node(a).needs_grad;
    Mat out = val(a).array().exp().matrix();
    std::function<void()> back;
    if (req) {
        const int32_t ai = a.id;
        back = [this, ai, out_id = static_cast<int32_t>(nodes_.size())] {
            grad_buf(ai) += nodes_[out_id].grad.cwiseProduct(nodes_[out_id].value);
        };
    }
    return push(std::move(out), req, std::move(back));
}

Var Tape::gelu(Var a) {
    const bool req = node(a).needs_grad;
    Mat out = val(a).unaryExpr([](double x) { return gelu_scalar(x); });
    std::function<void()> back;
    if (req) {
        const int32_t ai = a.id;
        back = [this, ai, out_id = static_cast<int32_t>(nodes_.size())] {
            const Mat d = nodes_[ai].value.unaryExpr([](double x) { return gelu_grad_scalar(x); });
            grad_buf(ai) += nodes_[out_id].grad.cwiseProduct(d);
        };
    }
    return push(std::move(out), req, std::move(back));
}

Var Tape::relu(Var a) {
    const bool req = node(a).needs_grad;
    Mat out = val(a).cwiseMax(0.0);
    std::function<void()> back;
    if (req) {
        const int32_t ai = a.id;
        back = [this, ai, out_id = static_cast<int32_t>(nodes_.size())] {
            const Mat d = (nodes_[ai].value.array() > 0.0).cast<double>().matrix();
            grad_buf(ai) += nodes_[out_id].grad.cwiseProduct(d);
        };
    }
    return push(std::move(out), req, std::move(back));
}

Var Tape::add_row_broadcast(Var a, Var row) {
    if (val(row).rows() != 1 || val(row).cols() != val(a).cols())
        throw ContractError("add_row_broadcast: shape mismatch");
    const bool req = node(a).needs_grad || node(row).needs_grad;
    Mat out = val(a).rowwise() + val(row).row(0);
    std::function<void()> back;
    if (req) {
        const int32_t ai = a.id, ri = row.id;
        back = [this, ai, ri, out_id = static_cast<int32_t>(nodes_.size())] {
            const Mat& g = nodes_[out_id].grad;
            if (nodes_[ai].needs_grad) grad_buf(ai) += g;
            if (nodes_[ri].needs_grad) grad_buf(ri) += g.colwise().sum();
        };
    }
    return push(std::move(out), req, std::move(back));
}

Var Tape::add_rows_at(Var a, Var row, std::vector<int> rows) {
    if (val(row).rows() != 1 || val(row).cols() != val(a).cols())
        throw ContractError("add_rows_at: shape mismatch");
    const bool req = node(a).needs_grad || node(row).needs_grad;
    Mat out = val(a);
    for (int r : rows) out.row(r) += val(row).row(0);
    std::function<void()> back;
    if (req) {
        const int32_t ai = a.id, ri = row.id;
        back = [this, ai, ri, rows = std::move(rows), out_id = static_cast<int32_t>(nodes_.size())] {
            const Mat& g = nodes_[out_id].grad;
            if (nodes_[ai].needs_grad) grad_buf(ai) += g;
            if (nodes_[ri].needs_grad) {
                Mat& rg = grad_buf(ri);
                for (int r : rows) rg.row(0) += g.row(r);
            }
        };
    }
    return push(std::move(out), req, std::move(back));
}

Var Tape::gather_rows(Var table, std::vector<int> ids) {
    const Mat& t = val(table);
    Mat out(static_cast<Eigen::Index>(ids.size()), t.cols());
    for (size_t i = 0; i < ids.size(); ++i) out.row(static_cast<Eigen::Index>(i)) = t.row(ids[i]);
    const bool req = node(table).needs_grad;
    std::function<void()> back;
    if (req) {
        const int32_t ti = table.id;
        back = [this, ti, ids = std::move(ids), out_id = static_cast<int32_t>(nodes_.size())] {
            const Mat& g = nodes_[out_id].grad;
            Mat& tg = grad_buf(ti);
            for (size_t i = 0; i < ids.size(); ++i)
                tg.row(ids[i]) += g.row(static_cast<Eigen::Index>(i));
        };
    }
    return push(std::move(out), req, std::move(back));
}

namespace {

// One cos/sin pair per (row, frequency); rotation acts on dim pairs (2j, 2j+1).
void rotary_tables(const std::vector<int>& positions, int half, double base, Mat& c, Mat& s) {
    const auto n = static_cast<Eigen::Index>(positions.size());
    c.resize(n, half);
    s.resize(n, half);
    for (Eigen::Index r = 0; r < n; ++r) {
        for (int j = 0; j < half; ++j) {
            const double theta =
                positions[static_cast<size_t>(r)] * std::pow(base, -2.0 * j / (2.0 * half));
            c(r, j) = std::cos(theta);
            s(r, j) = std::sin(theta);
        }
    }
}

void rotate_apply(const Mat& x, const Mat& c, const Mat& s, Mat& out) {
    out.resize(x.rows(), x.cols());
    const int half = static_cast<int>(x.cols()) / 2;
    for (Eigen::Index r = 0; r < x.rows(); ++r) {
        for (int j = 0; j < half; ++j) {
            const double a = x(r, 2 * j), b = x(r, 2 * j + 1);
            out(r, 2 * j) = a * c(r, j) - b * s(r, j);
            out(r, 2 * j + 1) = a * s(r, j) + b * c(r, j);
        }
    }
}

}  // namespace

Var Tape::rotary(Var x, std::vector<int> positions, double base) {
    const Mat& v = val(x);
    if (v.cols() % 2 != 0) throw ContractError("rotary needs_grad an even width");
    if (static_cast<Eigen::Index>(positions.size()) != v.rows())
        throw ContractError("rotary: one position per row required");
    const int half = static_cast<int>(v.cols()) / 2;
    Mat c, s;
    rotary_tables(positions, half, base, c, s);
    Mat out;
    rotate_apply(v, c, s, out);
    const bool req = node(x).needs_grad;
    std::function<void()> back;
    if (req) {
        const int32_t xi = x.id;
        back = [this, xi, c = std::move(c), s = std::move(s),
                out_id = static_cast<int32_t>(nodes_.size())] {
            // inverse rotation (transpose) applied to the output gradient
            Mat gi;
            rotate_apply(nodes_[out_id].grad, c, (-s.array()).matrix(), gi);
            grad_buf(xi) += gi;
        };
    }
    return push(std::move(out), req, std::move(back));
}

Var Tape::layernorm(Var x, Var scale_v, Var shift_v, double eps) {
    const Mat& v = val(x);
    const auto d = static_cast<double>(v.cols());
    const Eigen::VectorXd mu = v.rowwise().mean();
    Mat centered = v;
    centered.colwise() -= mu;
    const Eigen::VectorXd inv_sd =
        (centered.array().square().rowwise().sum() / d + eps).sqrt().inverse();
    Mat norm = (centered.array().colwise() * inv_sd.array()).matrix();
    Mat out = (norm.array().rowwise() * val(scale_v).row(0).array()).matrix();
    out.rowwise() += val(shift_v).row(0);
    const bool req = node(x).needs_grad || node(scale_v).needs_grad || node(shift_v).needs_grad;
    std::function<void()> back;
    if (req) {
        const int32_t xi = x.id, si = scale_v.id, bi = shift_v.id;
        back = [this, xi, si, bi, norm = std::move(norm), inv_sd,
                out_id = static_cast<int32_t>(nodes_.size())] {
            const Mat& g = nodes_[out_id].grad;
            if (nodes_[bi].needs_grad) grad_buf(bi) += g.colwise().sum();
            if (nodes_[si].needs_grad) grad_buf(si) += g.cwiseProduct(norm).colwise().sum();
            if (nodes_[xi].needs_grad) {
                const Mat gs = (g.array().rowwise() * nodes_[si].value.row(0).array()).matrix();
                const Eigen::VectorXd m1 = gs.rowwise().mean();
                const Eigen::VectorXd m2 = gs.cwiseProduct(norm).rowwise().mean();
                Mat dx = gs;
                dx.colwise() -= m1;
                dx -= (norm.array().colwise() * m2.array()).matrix();
                dx = (dx.array().colwise() * inv_sd.array()).matrix();
                grad_buf(xi) += dx;
            }
        };
    }
    return push(std::move(out), req, std::move(back));
}

Var Tape::causal_attention(Var q, Var k, Var v, std::vector<int> seg_offsets,
                           AttnCapture* capture) {
    const Mat& qv = val(q);
    const Mat& kv = val(k);
    const Mat& vv = val(v);
    const auto dh = qv.cols();
    if (kv.cols() != dh || vv.cols() != dh) throw ContractError("attention width mismatch");
    if (seg_offsets.size() < 2 || seg_offsets.back() != qv.rows())
        throw ContractError("attention segment offsets invalid");
    const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));
    const size_t nseg = seg_offsets.size() - 1;

    std::vector<Mat> attn(nseg);
    Mat out(qv.rows(), dh);
    for (size_t si = 0; si < nseg; ++si) {
        const int b = seg_offsets[si], e = seg_offsets[si + 1];
        const int n = e - b;
        Mat scores = qv.middleRows(b, n) * kv.middleRows(b, n).transpose() * inv_sqrt;
        Mat& a = attn[si];
        a = Mat::Zero(n, n);
        for (int r = 0; r < n; ++r) {
            double mx = scores(r, 0);
            for (int ci = 1; ci <= r; ++ci) mx = std::max(mx, scores(r, ci));
            double z = 0.0;
            for (int ci = 0; ci <= r; ++ci) {
                const double ev = std::exp(scores(r, ci) - mx);
                a(r, ci) = ev;
                z += ev;
            }
            a.row(r).head(r + 1) /= z;
        }
        out.middleRows(b, n).noalias() = a * vv.middleRows(b, n);
    }
    if (capture) capture->rows = attn;

    const bool req = node(q).needs_grad || node(k).needs_grad || node(v).needs_grad;
    std::function<void()> back;
    if (req) {
        const int32_t qi = q.id, ki = k.id, vi = v.id;
        back = [this, qi, ki, vi, inv_sqrt, attn = std::move(attn),
                seg_offsets = std::move(seg_offsets),
                out_id = static_cast<int32_t>(nodes_.size())] {
            const Mat& g = nodes_[out_id].grad;
            const Mat& kv = nodes_[ki].value;
            const Mat& qv = nodes_[qi].value;
            const Mat& vv = nodes_[vi].value;
            for (size_t si = 0; si + 1 < seg_offsets.size(); ++si) {
                const int b = seg_offsets[si], e = seg_offsets[si + 1];
                const int n = e - b;
                const Mat& a = attn[si];
                if (nodes_[vi].needs_grad)
                    grad_buf(vi).middleRows(b, n).noalias() += a.transpose() * g.middleRows(b, n);
                if (!nodes_[qi].needs_grad && !nodes_[ki].needs_grad) continue;
                Mat da = g.middleRows(b, n) * vv.middleRows(b, n).transpose();
                // softmax backward per row, restricted to the causal span
                Mat ds = Mat::Zero(n, n);
                for (int r = 0; r < n; ++r) {
                    const double dot = da.row(r).head(r + 1).dot(a.row(r).head(r + 1));
                    for (int ci = 0; ci <= r; ++ci)
                        ds(r, ci) = a(r, ci) * (da(r, ci) - dot);
                }
                ds *= inv_sqrt;
                if (nodes_[qi].needs_grad)
                    grad_buf(qi).middleRows(b, n).noalias() += ds * kv.middleRows(b, n);
                if (nodes_[ki].needs_grad)
                    grad_buf(ki).middleRows(b, n).noalias() += ds.transpose() * qv.middleRows(b, n);
            }
        };
    }
    return push(std::move(out), req, std::move(back));
}

Var Tape::log_softmax_rows(Var logits) {
    Mat out = log_softmax_rows_value(val(logits));
    const bool req = node(logits).needs_grad;
    std::function<void()> back;
    if (req) {
        const int32_t li = logits.id;
        back = [this, li, out_id = static_cast<int32_t>(nodes_.size())] {
            const Mat& g = nodes_[out_id].grad;
            const Mat p = nodes_[out_id].value.array().exp().matrix();
            const Eigen::VectorXd rowsum = g.rowwise().sum();
            grad_buf(li) += g - (p.array().colwise() * rowsum.array()).matrix();
        };
    }
    return push(std::move(out), req, std::move(back));
}

Var Tape::pick_sum(Var m, std::vector<std::pair<int, int>> coords) {
    const Mat& v = val(m);
    double s = 0.0;
    for (const auto& [r, c] : coords) s += v(r, c);
    Mat out(1, 1);
    out(0, 0) = s;
    const bool req = node(m).needs_grad;
    std::function<void()> back;
    if (req) {
        const int32_t mi = m.id;
        back = [this, mi, coords = std::move(coords), out_id = static_cast<int32_t>(nodes_.size())] {
            const double g = nodes_[out_id].grad(0, 0);
            Mat& mg = grad_buf(mi);
            for (const auto& [r, c] : coords) mg(r, c) += g;
        };
    }
    return push(std::move(out), req, std::move(back));
}

Var Tape::sum_sq(Var a) {
    Mat out(1, 1);
    out(0, 0) = val(a).squaredNorm();
    const bool req = node(a).needs_grad;
    std::function<void()> back;
    if (req) {
        const int32_t ai = a.id;
        back = [this, ai, out_id = static_cast<int32_t>(nodes_.size())] {
            grad_buf(ai) += 2.0 * nodes_[out_id].grad(0, 0) * nodes_[ai].value;
        };
    }
    return push(std::move(out), req, std::move(back));
}

Var Tape::sum_all(Var a) {
    Mat out(1, 1);
    out(0, 0) = val(a).sum();
    const bool req = node(a).needs_grad;
    std::function<void()> back;
    if (req) {
        const int32_t ai = a.id;
        back = [this, ai, out_id = static_cast<int32_t>(nodes_.size())] {
            grad_buf(ai).array() += nodes_[out_id].grad(0, 0);
        };
    }
    return push(std::move(out), req, std::move(back));
}

void Tape::backward(Var scalar_loss) {
    const Node& loss = node(scalar_loss);
    if (loss.value.rows() != 1 || loss.value.cols() != 1)
        throw ContractError("backward needs_grad a scalar loss");
    grad_buf(scalar_loss.id)(0, 0) += 1.0;
    for (int32_t i = scalar_loss.id; i >= 0; --i) {
        Node& n = nodes_[static_cast<size_t>(i)];
        if (n.back && n.needs_grad && seeded(i)) n.back();
    }
}

Mat softmax_rows(const Mat& logits) {
    Mat out(logits.rows(), logits.cols());
    for (Eigen::Index r = 0; r < logits.rows(); ++r) {
        const double mx = logits.row(r).maxCoeff();
        out.row(r) = (logits.row(r).array() - mx).exp();
        out.row(r) /= out.row(r).sum();
    }
    return out;
}

Mat log_softmax_rows_value(const Mat& logits) {
    Mat out(logits.rows(), logits.cols());
    for (Eigen::Index r = 0; r < logits.rows(); ++r) {
        const double mx = logits.row(r).maxCoeff();
        const double lse = mx + std::log((logits.row(r).array() - mx).exp().sum());
        out.row(r) = logits.row(r).array() - lse;
    }
    return out;
}

}  // namespace memat::ad
