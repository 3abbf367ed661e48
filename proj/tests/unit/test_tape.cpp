#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "fd_check.hpp"

#include <cmath>

using namespace memat;
using namespace memat::testing;

TEST_CASE("matmul forward and gradient") {
    Rng rng(1);
    Mat a = random_mat(rng, 3, 4), b = random_mat(rng, 4, 5);
    {
        ad::Tape t;
        ad::Var p = t.matmul(t.constant(a), t.constant(b));
        CHECK((t.val(p) - Mat(a * b)).cwiseAbs().maxCoeff() == doctest::Approx(0.0));
    }
    check_gradients({a, b}, [](ad::Tape& t, const std::vector<ad::Var>& v) {
        return t.sum_all(t.matmul(v[0], v[1]));
    });
}

TEST_CASE("matmul_nt matches a * b^T") {
    Rng rng(2);
    Mat a = random_mat(rng, 3, 4), b = random_mat(rng, 5, 4);
    ad::Tape t;
    ad::Var p = t.matmul_nt(t.constant(a), t.constant(b));
    CHECK((t.val(p) - Mat(a * b.transpose())).cwiseAbs().maxCoeff() < 1e-12);
    check_gradients({a, b}, [](ad::Tape& t2, const std::vector<ad::Var>& v) {
        return t2.sum_sq(t2.matmul_nt(v[0], v[1]));
    });
}

TEST_CASE("elementwise ops gradients") {
    Rng rng(3);
    Mat a = random_mat(rng, 4, 3), b = random_mat(rng, 4, 3);
    check_gradients({a, b}, [](ad::Tape& t, const std::vector<ad::Var>& v) {
        ad::Var s = t.add(v[0], v[1]);
        ad::Var d = t.sub(v[0], v[1]);
        ad::Var h = t.hadamard(s, d);
        return t.sum_sq(t.scale(h, 0.7));
    });
    check_gradients({a}, [](ad::Tape& t, const std::vector<ad::Var>& v) {
        return t.sum_all(t.exp(t.scale(v[0], 0.3)));
    });
}

TEST_CASE("gelu values and gradient") {
    ad::Tape t;
    Mat x(1, 3);
    x << -1.0, 0.0, 1.0;
    Mat y = t.val(t.gelu(t.constant(x)));
    CHECK(y(0, 0) == doctest::Approx(-0.15865525393145705));
    CHECK(y(0, 1) == doctest::Approx(0.0));
    CHECK(y(0, 2) == doctest::Approx(0.8413447460685429));

    Rng rng(4);
    Mat a = random_mat(rng, 3, 5);
    check_gradients({a}, [](ad::Tape& t2, const std::vector<ad::Var>& v) {
        return t2.sum_sq(t2.gelu(v[0]));
    });
}

TEST_CASE("relu gradient away from the kink") {
    Rng rng(5);
    Mat a = random_mat(rng, 3, 4);
    for (Eigen::Index i = 0; i < a.size(); ++i)
        if (std::abs(a.data()[i]) < 0.05) a.data()[i] = 0.5;  // keep fd well-defined
    check_gradients({a}, [](ad::Tape& t, const std::vector<ad::Var>& v) {
        return t.sum_sq(t.relu(v[0]));
    });
}

TEST_CASE("add_row_broadcast adds one row everywhere") {
    Rng rng(6);
    Mat a = random_mat(rng, 4, 3), r = random_mat(rng, 1, 3);
    ad::Tape t;
    Mat got = t.val(t.add_row_broadcast(t.constant(a), t.constant(r)));
    for (int i = 0; i < 4; ++i)
        CHECK((got.row(i) - (a.row(i) + r.row(0))).cwiseAbs().maxCoeff() < 1e-15);
    check_gradients({a, r}, [](ad::Tape& t2, const std::vector<ad::Var>& v) {
        return t2.sum_sq(t2.add_row_broadcast(v[0], v[1]));
    });
}

TEST_CASE("add_rows_at touches only listed rows and accumulates") {
    Rng rng(7);
    Mat a = random_mat(rng, 5, 3), r = random_mat(rng, 1, 3);
    ad::Tape t;
    Mat got = t.val(t.add_rows_at(t.constant(a), t.constant(r), {1, 3, 3}));
    CHECK((got.row(0) - a.row(0)).cwiseAbs().maxCoeff() == 0.0);
    CHECK((got.row(1) - (a.row(1) + r.row(0))).cwiseAbs().maxCoeff() < 1e-15);
    CHECK((got.row(3) - (a.row(3) + 2.0 * r.row(0))).cwiseAbs().maxCoeff() < 1e-15);
    check_gradients({a, r}, [](ad::Tape& t2, const std::vector<ad::Var>& v) {
        return t2.sum_sq(t2.add_rows_at(v[0], v[1], {1, 3, 3}));
    });
}

TEST_CASE("gather_rows with repeated ids accumulates table gradient") {
    Rng rng(8);
    Mat table = random_mat(rng, 6, 3);
    const std::vector<int> ids = {2, 0, 2, 5};
    ad::Tape t;
    Mat got = t.val(t.gather_rows(t.constant(table), ids));
    REQUIRE(got.rows() == 4);
    for (size_t i = 0; i < ids.size(); ++i)
        CHECK((got.row(static_cast<int>(i)) - table.row(ids[i])).cwiseAbs().maxCoeff() == 0.0);
    check_gradients({table}, [&](ad::Tape& t2, const std::vector<ad::Var>& v) {
        return t2.sum_sq(t2.gather_rows(v[0], ids));
    });
}

TEST_CASE("rotary preserves pair norms and keeps relative dot products") {
    Rng rng(9);
    Mat x = random_mat(rng, 6, 8);
    const std::vector<int> pos = {0, 1, 2, 3, 4, 5};
    ad::Tape t;
    Mat y = t.val(t.rotary(t.constant(x), pos));
    for (int r = 0; r < 6; ++r)
        CHECK(y.row(r).norm() == doctest::Approx(x.row(r).norm()));

    // same content rotated at shifted positions: dot products depend on the
    // position difference only
    Mat two = Mat(2, 8);
    two.row(0) = x.row(0);
    two.row(1) = x.row(1);
    ad::Tape t2;
    Mat ya = t2.val(t2.rotary(t2.constant(two), {0, 3}));
    Mat yb = t2.val(t2.rotary(t2.constant(two), {5, 8}));
    CHECK(ya.row(0).dot(ya.row(1)) == doctest::Approx(yb.row(0).dot(yb.row(1))));

    check_gradients({x}, [&](ad::Tape& t3, const std::vector<ad::Var>& v) {
        return t3.sum_sq(t3.rotary(v[0], pos));
    });
}

TEST_CASE("layernorm normalizes rows and has correct gradients") {
    Rng rng(10);
    Mat x = random_mat(rng, 4, 6, 2.0);
    Mat s = random_mat(rng, 1, 6), b = random_mat(rng, 1, 6);
    {
        ad::Tape t;
        Mat ones = Mat::Ones(1, 6), zeros = Mat::Zero(1, 6);
        Mat y = t.val(t.layernorm(t.constant(x), t.constant(ones), t.constant(zeros)));
        for (int r = 0; r < 4; ++r) {
            CHECK(y.row(r).mean() == doctest::Approx(0.0).epsilon(1e-9));
            const double var = (y.row(r).array() - y.row(r).mean()).square().mean();
            CHECK(var == doctest::Approx(1.0).epsilon(1e-3));
        }
    }
    check_gradients({x, s, b}, [](ad::Tape& t, const std::vector<ad::Var>& v) {
        return t.sum_sq(t.layernorm(v[0], v[1], v[2]));
    });
}

TEST_CASE("causal attention masks the future") {
    Rng rng(11);
    const int T = 5, dh = 4;
    Mat q = random_mat(rng, T, dh), k = random_mat(rng, T, dh), v = random_mat(rng, T, dh);
    ad::Tape t;
    ad::AttnCapture cap;
    t.causal_attention(t.constant(q), t.constant(k), t.constant(v), {0, T}, &cap);
    REQUIRE(cap.rows.size() == 1);
    const Mat& A = cap.rows[0];
    REQUIRE(A.rows() == T);
    for (int r = 0; r < T; ++r) {
        CHECK(A.row(r).sum() == doctest::Approx(1.0));
        for (int c = r + 1; c < T; ++c) CHECK(A(r, c) == 0.0);
    }
}

TEST_CASE("causal attention equals explicit per-row softmax") {
    Rng rng(12);
    const int T = 4, dh = 6;
    Mat q = random_mat(rng, T, dh), k = random_mat(rng, T, dh), v = random_mat(rng, T, dh);
    ad::Tape t;
    Mat got = t.val(t.causal_attention(t.constant(q), t.constant(k), t.constant(v), {0, T}, nullptr));
    for (int r = 0; r < T; ++r) {
        Vec scores = Vec::Zero(r + 1);
        for (int c = 0; c <= r; ++c) scores(c) = q.row(r).dot(k.row(c)) / std::sqrt(double(dh));
        Vec w = (scores.array() - scores.maxCoeff()).exp();
        w /= w.sum();
        Vec expect = Vec::Zero(dh);
        for (int c = 0; c <= r; ++c) expect += w(c) * v.row(c);
        CHECK((got.row(r) - expect).cwiseAbs().maxCoeff() < 1e-12);
    }
}

TEST_CASE("causal attention gradient, single and multiple segments") {
    Rng rng(13);
    const int dh = 4;
    Mat q = random_mat(rng, 5, dh), k = random_mat(rng, 5, dh), v = random_mat(rng, 5, dh);
    check_gradients({q, k, v}, [](ad::Tape& t, const std::vector<ad::Var>& vars) {
        return t.sum_sq(t.causal_attention(vars[0], vars[1], vars[2], {0, 5}, nullptr));
    });
    check_gradients({q, k, v}, [](ad::Tape& t, const std::vector<ad::Var>& vars) {
        return t.sum_sq(t.causal_attention(vars[0], vars[1], vars[2], {0, 2, 5}, nullptr));
    });
}

TEST_CASE("segmented attention equals independent per-segment attention") {
    Rng rng(14);
    const int dh = 4;
    Mat q = random_mat(rng, 7, dh), k = random_mat(rng, 7, dh), v = random_mat(rng, 7, dh);
    ad::Tape t;
    Mat packed = t.val(t.causal_attention(t.constant(q), t.constant(k), t.constant(v), {0, 3, 7}, nullptr));
    Mat first = t.val(t.causal_attention(t.constant(Mat(q.topRows(3))), t.constant(Mat(k.topRows(3))),
                                         t.constant(Mat(v.topRows(3))), {0, 3}, nullptr));
    Mat second = t.val(t.causal_attention(t.constant(Mat(q.bottomRows(4))), t.constant(Mat(k.bottomRows(4))),
                                          t.constant(Mat(v.bottomRows(4))), {0, 4}, nullptr));
    CHECK((packed.topRows(3) - first).cwiseAbs().maxCoeff() < 1e-12);
    CHECK((packed.bottomRows(4) - second).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("log_softmax rows and pick_sum") {
    Rng rng(15);
    Mat logits = random_mat(rng, 3, 6, 2.0);
    ad::Tape t;
    Mat lp = t.val(t.log_softmax_rows(t.constant(logits)));
    for (int r = 0; r < 3; ++r) {
        CHECK(lp.row(r).array().exp().sum() == doctest::Approx(1.0));
        // matches direct computation
        const double mx = logits.row(r).maxCoeff();
        const double lse = mx + std::log((logits.row(r).array() - mx).exp().sum());
        for (int c = 0; c < 6; ++c) CHECK(lp(r, c) == doctest::Approx(logits(r, c) - lse));
    }
    const std::vector<std::pair<int, int>> coords = {{0, 2}, {1, 5}, {2, 0}};
    check_gradients({logits}, [&](ad::Tape& t2, const std::vector<ad::Var>& v) {
        return t2.scale(t2.pick_sum(t2.log_softmax_rows(v[0]), coords), -1.0);
    });
}

TEST_CASE("sum_sq and sum_all") {
    Rng rng(16);
    Mat a = random_mat(rng, 3, 3);
    ad::Tape t;
    CHECK(t.scalar(t.sum_sq(t.constant(a))) == doctest::Approx(a.squaredNorm()));
    CHECK(t.scalar(t.sum_all(t.constant(a))) == doctest::Approx(a.sum()));
}

TEST_CASE("composite graph with shared subexpressions") {
    Rng rng(17);
    Mat a = random_mat(rng, 4, 4), b = random_mat(rng, 4, 4);
    check_gradients({a, b}, [](ad::Tape& t, const std::vector<ad::Var>& v) {
        ad::Var m = t.matmul(v[0], v[1]);
        ad::Var g = t.gelu(m);
        ad::Var h = t.hadamard(g, m);  // m used twice
        ad::Var lp = t.log_softmax_rows(h);
        return t.add(t.pick_sum(lp, {{0, 1}, {3, 2}}), t.scale(t.sum_sq(v[0]), 0.01));
    });
}

TEST_CASE("constants do not accumulate gradients") {
    Rng rng(18);
    Mat a = random_mat(rng, 2, 2), c = random_mat(rng, 2, 2);
    ad::Tape t;
    ad::Var av = t.leaf(a), cv = t.constant(c);
    ad::Var loss = t.sum_sq(t.matmul(av, cv));
    t.backward(loss);
    CHECK(t.requires_grad(av));
    CHECK(!t.requires_grad(cv));
    CHECK(t.grad(av).rows() == 2);
}

TEST_CASE("backward rejects non-scalar roots") {
    ad::Tape t;
    ad::Var v = t.leaf(Mat::Ones(2, 3));
    CHECK_THROWS_AS(t.backward(v), ContractError);
}
