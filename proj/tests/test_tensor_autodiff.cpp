#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "gradcheck.hpp"
#include "nncomp/autodiff.hpp"

using namespace nncomp;
using nncomp::testutil::gradcheck;

namespace {

Tensor<double> rt(Shape s, Rng& rng, double sd = 1.0) { return randn<double>(std::move(s), rng, sd); }

}  // namespace

TEST_CASE("squared_relu values") {
    auto x = constant(Tensor<double>::vec({-2.0, 3.0, 0.0}));
    auto y = squared_relu(x);
    CHECK(y.v()[0] == 0.0);
    CHECK(y.v()[1] == 9.0);
    CHECK(y.v()[2] == 0.0);
}

TEST_CASE("rmsnorm hand values") {
    auto x = constant(Tensor<double>::vec({3.0, 4.0}));
    auto g = constant(Tensor<double>::vec({1.0, 1.0}));
    auto y = rmsnorm(x, g, 0.0);
    CHECK(y.v()[0] == doctest::Approx(0.8485).epsilon(1e-3));
    CHECK(y.v()[1] == doctest::Approx(1.1314).epsilon(1e-3));

    auto xc = constant(Tensor<double>::vec({2.5, 2.5, 2.5}));
    auto g3 = constant(Tensor<double>::full({3}, 1.0));
    auto yc = rmsnorm(xc, g3, 0.0);
    for (int i = 0; i < 3; ++i) CHECK(yc.v()[i] == doctest::Approx(1.0));

    auto gz = constant(Tensor<double>::zeros({2}));
    auto yz = rmsnorm(x, gz, 0.0);
    CHECK(yz.v()[0] == 0.0);
    CHECK(yz.v()[1] == 0.0);
}

TEST_CASE("rmsnorm degenerate") {
    auto x = constant(Tensor<double>::zeros({4}));
    auto g = constant(Tensor<double>::full({4}, 1.0));
    CHECK_THROWS_AS(rmsnorm(x, g, 0.0), std::domain_error);
    CHECK_NOTHROW(rmsnorm(x, g, 1e-5));
}

TEST_CASE("grad of sum(W.x) is broadcast of x") {
    Tape<double> tape;
    Rng rng(7);
    auto W = leaf(tape, rt({3, 2}, rng));
    auto x = constant(rt({1, 2, 3}, rng));  // batch of rows
    auto loss = sum_all(matmul(x, W));
    auto gs = grad(loss, {W});
    const Tensor<double>& gw = gs.at(W.node);
    // dL/dW[k][j] = sum over rows of x[..,k]
    for (int64_t k = 0; k < 3; ++k) {
        double colsum = x.v()[k] + x.v()[3 + k];
        for (int64_t j = 0; j < 2; ++j) CHECK(gw[k * 2 + j] == doctest::Approx(colsum));
    }
}

TEST_CASE("grad of sum(squared_relu(x))") {
    Tape<double> tape;
    auto x = leaf(tape, Tensor<double>::vec({3.0, -1.0}));
    auto loss = sum_all(squared_relu(x));
    auto gs = grad(loss, {x});
    CHECK(gs.at(x.node)[0] == doctest::Approx(6.0));
    CHECK(gs.at(x.node)[1] == 0.0);
}

TEST_CASE("non-scalar loss rejected") {
    Tape<double> tape;
    auto x = leaf(tape, Tensor<double>::vec({1.0, 2.0}));
    auto y = squared_relu(x);
    CHECK_THROWS_AS(grad(y, {x}), std::invalid_argument);
}

TEST_CASE("finite-difference checks: elementwise and matmul") {
    Rng rng(11);
    for (int rep = 0; rep < 5; ++rep) {
        int64_t m = 1 + rep % 3, k = 2 + rep % 4, n = 1 + (rep * 2) % 5;
        auto build_mm = [](Tape<double>& t, std::vector<Var<double>>& l) {
            return sum_all(squared_relu(matmul(l[0], l[1])));
        };
        CHECK(gradcheck(build_mm, {rt({2, m, k}, rng), rt({k, n}, rng)}) < 1e-4);
        auto build_mm_t = [](Tape<double>& t, std::vector<Var<double>>& l) {
            return sum_all(silu(matmul(l[0], l[1], true)));
        };
        CHECK(gradcheck(build_mm_t, {rt({m, k}, rng), rt({n, k}, rng)}) < 1e-4);
        auto build_ew = [](Tape<double>& t, std::vector<Var<double>>& l) {
            return mean_all(mul(add(l[0], l[1]), sub(softplus(l[0]), exp_op(scale(l[1], 0.3)))));
        };
        CHECK(gradcheck(build_ew, {rt({m, n}, rng), rt({m, n}, rng)}) < 1e-4);
    }
}

TEST_CASE("finite-difference checks: rmsnorm, conv, softmax") {
    Rng rng(13);
    for (int rep = 0; rep < 5; ++rep) {
        int64_t d = 2 + rep, s2 = 2 + rep % 3;
        auto build_norm = [](Tape<double>& t, std::vector<Var<double>>& l) {
            return sum_all(silu(rmsnorm(l[0], l[1], 1e-5)));
        };
        CHECK(gradcheck(build_norm, {rt({2, d}, rng), rt({d}, rng)}) < 1e-4);
        auto build_conv = [](Tape<double>& t, std::vector<Var<double>>& l) {
            return sum_all(squared_relu(causal_conv1d(l[0], l[1])));
        };
        CHECK(gradcheck(build_conv, {rt({2, s2 + 2, d}, rng), rt({d, 3}, rng)}) < 1e-4);
        auto build_sm = [](Tape<double>& t, std::vector<Var<double>>& l) {
            return sum_all(mul(causal_softmax(l[0]), l[1]));
        };
        CHECK(gradcheck(build_sm, {rt({2, s2, s2}, rng), rt({2, s2, s2}, rng)}) < 1e-4);
    }
}

TEST_CASE("finite-difference checks: attention") {
    Rng rng(17);
    for (int rep = 0; rep < 5; ++rep) {
        int64_t nq = 2 + 2 * (rep % 2), nkv = rep % 2 ? 2 : 1, hd = 2 + rep % 3, s = 2 + rep % 3;
        auto build = [nq, nkv](Tape<double>& t, std::vector<Var<double>>& l) {
            return sum_all(squared_relu(gqa_attention(l[0], l[1], l[2], nq, nkv)));
        };
        CHECK(gradcheck(build, {rt({2, s, nq * hd}, rng), rt({2, s, nkv * hd}, rng), rt({2, s, nkv * hd}, rng)}) < 1e-4);
    }
}

TEST_CASE("finite-difference checks: ssm scan") {
    Rng rng(19);
    for (int rep = 0; rep < 5; ++rep) {
        int64_t heads = 2 + 2 * (rep % 2), gr = rep % 2 ? 2 : 1, p = 2 + rep % 2, n = 2 + rep % 3, s = 3 + rep % 3;
        auto build = [heads, gr, p, n](Tape<double>& t, std::vector<Var<double>>& l) {
            // softplus keeps dt positive, as in the model
            return sum_all(ssm_scan(l[0], softplus(l[1]), exp_op(l[2]), l[3], l[4], l[5], heads, p, gr, n));
        };
        CHECK(gradcheck(build,
                        {rt({2, s, heads * p}, rng), rt({2, s, heads}, rng), rt({heads}, rng, 0.5), rt({2, s, gr * n}, rng),
                         rt({2, s, gr * n}, rng), rt({heads}, rng)}) < 1e-4);
    }
}

TEST_CASE("finite-difference checks: embedding, cross-entropy, kd") {
    Rng rng(23);
    TokenBatch ids = {{0, 2, 1}, {1, 1, 0}};
    for (int rep = 0; rep < 5; ++rep) {
        int64_t V = 3 + rep % 3, d = 2 + rep % 3;
        auto build_ce = [&ids](Tape<double>& t, std::vector<Var<double>>& l) {
            return cross_entropy(matmul(embedding_lookup(ids, l[0]), l[1]), ids);
        };
        CHECK(gradcheck(build_ce, {rt({V, d}, rng), rt({d, V}, rng)}) < 1e-4);
        Tensor<double> teacher = rt({2, 3, V}, rng);
        auto build_kd = [&teacher](Tape<double>& t, std::vector<Var<double>>& l) {
            return kd_loss(l[0], teacher);
        };
        CHECK(gradcheck(build_kd, {rt({2, 3, V}, rng)}) < 1e-4);
    }
}

TEST_CASE("softmax rows sum to one and causality") {
    Rng rng(29);
    Tensor<double> x = rt({3, 5, 5}, rng);
    auto p = causal_softmax(constant(x)).v();
    for (int64_t gidx = 0; gidx < 3; ++gidx)
        for (int64_t t = 0; t < 5; ++t) {
            double sum = 0;
            for (int64_t j = 0; j < 5; ++j) sum += p[(gidx * 5 + t) * 5 + j];
            CHECK(std::abs(sum - 1.0) < 1e-12);
        }
    // perturbing future entries leaves earlier rows unchanged
    Tensor<double> x2 = x;
    x2[(0 * 5 + 2) * 5 + 4] += 3.0;  // row 2, masked column 4
    auto p2 = causal_softmax(constant(x2)).v();
    for (int64_t j = 0; j < 5; ++j) CHECK(p2[(0 * 5 + 2) * 5 + j] == p[(0 * 5 + 2) * 5 + j]);
}

TEST_CASE("attention causality via perturbation") {
    Rng rng(31);
    Tensor<double> q = rt({1, 4, 4}, rng), k = rt({1, 4, 2}, rng), v = rt({1, 4, 2}, rng);
    auto o1 = gqa_attention(constant(q), constant(k), constant(v), 2, 1).v();
    Tensor<double> k2 = k, v2 = v;
    k2[3 * 2] += 1.0;
    v2[3 * 2 + 1] -= 2.0;
    auto o2 = gqa_attention(constant(q), constant(k2), constant(v2), 2, 1).v();
    for (int64_t t = 0; t < 3; ++t)
        for (int64_t i = 0; i < 4; ++i) CHECK(o1[t * 4 + i] == o2[t * 4 + i]);
}

TEST_CASE("gqa head mapping 4q 2kv") {
    // heads {0,1} read kv head 0, {2,3} read kv head 1: make the two kv
    // streams wildly different and check outputs pair up.
    Rng rng(37);
    int64_t s = 3, hd = 2;
    Tensor<double> q(Shape{1, s, 4 * hd});
    for (auto& vq : q.data) vq = 0.0;  // equal queries => attention ~ value average per kv head
    Tensor<double> k = randn<double>({1, s, 2 * hd}, rng);
    Tensor<double> v = randn<double>({1, s, 2 * hd}, rng);
    auto o = gqa_attention(constant(q), constant(k), constant(v), 4, 2).v();
    for (int64_t t = 0; t < s; ++t)
        for (int64_t i = 0; i < hd; ++i) {
            CHECK(o[t * 8 + 0 * hd + i] == doctest::Approx(o[t * 8 + 1 * hd + i]));
            CHECK(o[t * 8 + 2 * hd + i] == doctest::Approx(o[t * 8 + 3 * hd + i]));
            CHECK(o[t * 8 + 0 * hd + i] != doctest::Approx(o[t * 8 + 2 * hd + i]).epsilon(1e-12));
        }
}

TEST_CASE("ssm memoryless and linear-growth limits") {
    // a == 1 (A=0, so exp(-dt*0)=1) with constant dt*B*x: state grows linearly.
    int64_t s = 3;
    Tensor<double> x = Tensor<double>::full({1, s, 1}, 2.0);
    Tensor<double> dtv = Tensor<double>::full({1, s, 1}, 0.5);
    Tensor<double> A = Tensor<double>::zeros({1});
    Tensor<double> B = Tensor<double>::full({1, s, 1}, 3.0);
    Tensor<double> C = Tensor<double>::full({1, s, 1}, 1.0);
    Tensor<double> D = Tensor<double>::zeros({1});
    auto y = ssm_scan(constant(x), constant(dtv), constant(A), constant(B), constant(C), constant(D), 1, 1, 1, 1).v();
    // h_t = t * (dt*B*x) = t * 3.0
    for (int64_t t = 0; t < s; ++t) CHECK(y[t] == doctest::Approx(3.0 * (t + 1)));

    // saturated decay: huge A makes a ~ 0; y_t then ignores x_{t-1}
    Rng rng(41);
    Tensor<double> xr = randn<double>({1, s, 2}, rng);
    Tensor<double> dtr = Tensor<double>::full({1, s, 2}, 1.0);
    Tensor<double> Abig = Tensor<double>::full({2}, 200.0);
    Tensor<double> Br = randn<double>({1, s, 2}, rng);
    Tensor<double> Cr = randn<double>({1, s, 2}, rng);
    Tensor<double> Dr = randn<double>({2}, rng);
    auto y1 = ssm_scan(constant(xr), constant(dtr), constant(Abig), constant(Br), constant(Cr), constant(Dr), 2, 1, 1, 2).v();
    Tensor<double> xr2 = xr;
    xr2[0] += 5.0;  // perturb t=0
    auto y2 = ssm_scan(constant(xr2), constant(dtr), constant(Abig), constant(Br), constant(Cr), constant(Dr), 2, 1, 1, 2).v();
    for (int64_t i = 0; i < 2; ++i) {
        CHECK(y1[1 * 2 + i] == doctest::Approx(y2[1 * 2 + i]).epsilon(1e-12));
        CHECK(y1[2 * 2 + i] == doctest::Approx(y2[2 * 2 + i]).epsilon(1e-12));
    }
}

TEST_CASE("chunked scan equals sequential recurrence") {
    Rng rng(43);
    int64_t b = 2, s = 37, heads = 4, p = 3, gr = 2, n = 5;
    Tensor<double> x = randn<double>({b, s, heads * p}, rng);
    Tensor<double> dtv = randn<double>({b, s, heads}, rng);
    for (auto& vv : dtv.data) vv = std::log1p(std::exp(vv));  // positive
    Tensor<double> A = randn<double>({heads}, rng);
    for (auto& vv : A.data) vv = std::exp(vv * 0.5);
    Tensor<double> B = randn<double>({b, s, gr * n}, rng);
    Tensor<double> C = randn<double>({b, s, gr * n}, rng);
    Tensor<double> D = randn<double>({heads}, rng);
    auto seq = ssm_scan(constant(x), constant(dtv), constant(A), constant(B), constant(C), constant(D), heads, p, gr, n).v();
    for (int64_t chunk : {1, 8, 16, 64}) {
        auto ch = ssm_scan_chunked(x, dtv, A, B, C, D, heads, p, gr, n, chunk);
        double worst = 0;
        for (int64_t i = 0; i < seq.size(); ++i) worst = std::max(worst, std::abs(ch[i] - seq[i]));
        CHECK(worst < 1e-10);
    }
}

TEST_CASE("kd loss values") {
    Tensor<double> t1 = Tensor<double>::vec({0.3, -1.2, 0.5});
    t1.shape = {1, 1, 3};
    CHECK(kd_loss(constant(t1), t1).v()[0] == doctest::Approx(0.0).epsilon(1e-12));

    Tensor<double> teach(Shape{1, 1, 2}, {std::log(2.0), 0.0});
    Tensor<double> stud = Tensor<double>::zeros({1, 1, 2});
    CHECK(kd_loss(constant(stud), teach).v()[0] == doctest::Approx(0.0566).epsilon(1e-2));

    Rng rng(47);
    for (int rep = 0; rep < 20; ++rep) {
        Tensor<double> a = randn<double>({2, 3, 5}, rng), b = randn<double>({2, 3, 5}, rng);
        CHECK(kd_loss(constant(a), b).v()[0] >= 0.0);
    }
}

TEST_CASE("forward determinism") {
    Rng rng(53);
    Tensor<double> x = randn<double>({2, 4, 6}, rng), w = randn<double>({6, 6}, rng);
    auto y1 = silu(matmul(constant(x), constant(w))).v();
    auto y2 = silu(matmul(constant(x), constant(w))).v();
    for (int64_t i = 0; i < y1.size(); ++i) CHECK(y1[i] == y2[i]);
}

TEST_CASE("unused nodes keep zero gradients") {
    Tape<double> tape;
    auto a = leaf(tape, Tensor<double>::vec({1.0, 2.0}));
    auto b = leaf(tape, Tensor<double>::vec({3.0, 4.0}));
    auto loss = sum_all(squared_relu(a));
    auto gs = grad(loss, {a, b});
    CHECK(gs.at(b.node)[0] == 0.0);
    CHECK(gs.at(b.node)[1] == 0.0);
}
