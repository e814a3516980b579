#include <catch2/catch_amalgamated.hpp>

#include "mmtryon/attention.hpp"
#include "mmtryon/gradcheck.hpp"

using namespace mmtryon;
using namespace mmtryon::attention;

namespace {

// Brute-force multi-head attention written independently of the library
// path: explicit loops, no slicing helpers.
Tensor<double> oracle_attention(const Tensor<double>& q_in, const Tensor<double>& kv_in,
                                const AttentionParams<double>& p) {
    int64_t T = q_in.dim(0), U = kv_in.dim(0), d = p.d_model(), dc = p.d_context();
    int64_t H = p.heads, dh = d / H;
    auto matref = [](const Tensor<double>& m, int64_t i, int64_t j) {
        return m.data()[i * m.dim(1) + j];
    };
    std::vector<double> Q(T * d, 0), K(U * d, 0), V(U * d, 0);
    for (int64_t i = 0; i < T; ++i)
        for (int64_t j = 0; j < d; ++j)
            for (int64_t k = 0; k < d; ++k) Q[i * d + j] += matref(q_in, i, k) * matref(p.w_q, k, j);
    for (int64_t i = 0; i < U; ++i)
        for (int64_t j = 0; j < d; ++j)
            for (int64_t k = 0; k < dc; ++k) {
                K[i * d + j] += matref(kv_in, i, k) * matref(p.w_k, k, j);
                V[i * d + j] += matref(kv_in, i, k) * matref(p.w_v, k, j);
            }
    std::vector<double> merged(T * d, 0);
    for (int64_t h = 0; h < H; ++h)
        for (int64_t i = 0; i < T; ++i) {
            std::vector<double> logits(U, 0);
            double mx = -1e300;
            for (int64_t u = 0; u < U; ++u) {
                double dot = 0;
                for (int64_t k = 0; k < dh; ++k)
                    dot += Q[i * d + h * dh + k] * K[u * d + h * dh + k];
                logits[u] = dot / std::sqrt(static_cast<double>(dh));
                mx = std::max(mx, logits[u]);
            }
            double Z = 0;
            for (int64_t u = 0; u < U; ++u) Z += std::exp(logits[u] - mx);
            for (int64_t u = 0; u < U; ++u) {
                double w = std::exp(logits[u] - mx) / Z;
                for (int64_t k = 0; k < dh; ++k)
                    merged[i * d + h * dh + k] += w * V[u * d + h * dh + k];
            }
        }
    Tensor<double> out(Shape{T, d});
    for (int64_t i = 0; i < T; ++i)
        for (int64_t j = 0; j < d; ++j) {
            double acc = 0;
            for (int64_t k = 0; k < d; ++k) acc += merged[i * d + k] * matref(p.w_o, k, j);
            out.data()[i * d + j] = acc;
        }
    return out;
}

double max_abs_diff(const Tensor<double>& a, const Tensor<double>& b) {
    double m = 0;
    for (int64_t i = 0; i < a.numel(); ++i) m = std::max(m, std::fabs(a.data()[i] - b.data()[i]));
    return m;
}

}  // namespace

TEST_CASE("multi-reference attention with no refs reduces to self-attention") {
    RandomStream rs(31);
    for (int trial = 0; trial < 50; ++trial) {
        int64_t d = 8;
        auto p = AttentionParams<double>::init(d, d, 2, rs);
        FeatureMap<double> target{Tensor<double>::randn({6, d}, rs), 0};
        auto out = multi_reference_attention(target, {}, p);
        auto self_attn = scaled_attention(target.tokens, target.tokens, p);
        REQUIRE(max_abs_diff(out.tokens, self_attn) < 1e-12);
        auto oracle = oracle_attention(target.tokens, target.tokens, p);
        REQUIRE(max_abs_diff(out.tokens, oracle) < 1e-10);
    }
}

TEST_CASE("multi-reference attention is invariant to ref ordering") {
    RandomStream rs(32);
    for (int trial = 0; trial < 50; ++trial) {
        int64_t d = 8;
        auto p = AttentionParams<double>::init(d, d, 4, rs);
        FeatureMap<double> target{Tensor<double>::randn({5, d}, rs), 1};
        FeatureMap<double> a{Tensor<double>::randn({3, d}, rs), 1};
        FeatureMap<double> b{Tensor<double>::randn({4, d}, rs), 1};
        FeatureMap<double> c{Tensor<double>::randn({2, d}, rs), 1};
        auto o1 = multi_reference_attention(target, {a, b, c}, p);
        auto o2 = multi_reference_attention(target, {c, a, b}, p);
        auto o3 = multi_reference_attention(target, {b, c, a}, p);
        REQUIRE(max_abs_diff(o1.tokens, o2.tokens) < 1e-12);
        REQUIRE(max_abs_diff(o1.tokens, o3.tokens) < 1e-12);
    }
}

TEST_CASE("multi-reference attention matches a hand-evaluated 2x3 softmax case") {
    // 1 head, d = 2, identity projections, two target tokens, one ref token
    AttentionParams<double> p;
    p.w_q = Tensor<double>::from_data({2, 2}, {1, 0, 0, 1});
    p.w_k = Tensor<double>::from_data({2, 2}, {1, 0, 0, 1});
    p.w_v = Tensor<double>::from_data({2, 2}, {1, 0, 0, 1});
    p.w_o = Tensor<double>::from_data({2, 2}, {1, 0, 0, 1});
    p.heads = 1;
    FeatureMap<double> target{Tensor<double>::from_data({2, 2}, {1.0, 0.0, 0.0, 2.0}), 0};
    FeatureMap<double> ref{Tensor<double>::from_data({1, 2}, {-1.0, 1.0}), 0};

    auto out = multi_reference_attention(target, {ref}, p);

    // independent scalar evaluation: keys/values are the 3 concatenated rows
    const double keys[3][2] = {{1, 0}, {0, 2}, {-1, 1}};
    const double scale = 1.0 / std::sqrt(2.0);
    for (int i = 0; i < 2; ++i) {
        const double* q = target.tokens.data() + i * 2;
        double w[3], Z = 0;
        for (int u = 0; u < 3; ++u) {
            w[u] = std::exp((q[0] * keys[u][0] + q[1] * keys[u][1]) * scale);
            Z += w[u];
        }
        for (int c = 0; c < 2; ++c) {
            double expect = 0;
            for (int u = 0; u < 3; ++u) expect += w[u] / Z * keys[u][c];
            REQUIRE(out.tokens.data()[i * 2 + c] == Catch::Approx(expect).epsilon(1e-12));
        }
    }
}

TEST_CASE("appending a ref changes the output") {
    RandomStream rs(33);
    int64_t d = 8;
    auto p = AttentionParams<double>::init(d, d, 2, rs);
    FeatureMap<double> target{Tensor<double>::randn({5, d}, rs), 0};
    FeatureMap<double> a{Tensor<double>::randn({3, d}, rs), 0};
    FeatureMap<double> b{Tensor<double>::randn({2, d}, rs), 0};
    auto base = multi_reference_attention(target, {a}, p);
    auto more = multi_reference_attention(target, {a, b}, p);
    REQUIRE(max_abs_diff(base.tokens, more.tokens) > 0.0);
}

TEST_CASE("attention argument validation") {
    RandomStream rs(34);
    auto p = AttentionParams<double>::init(8, 8, 2, rs);
    FeatureMap<double> target{Tensor<double>::randn({4, 8}, rs), 0};
    FeatureMap<double> bad_dim{Tensor<double>::randn({4, 6}, rs), 0};
    FeatureMap<double> bad_level{Tensor<double>::randn({4, 8}, rs), 2};
    FeatureMap<double> empty{};
    REQUIRE_THROWS_AS(multi_reference_attention(target, {bad_dim}, p), std::invalid_argument);
    REQUIRE_THROWS_AS(multi_reference_attention(target, {bad_level}, p), std::invalid_argument);
    REQUIRE_THROWS_AS(multi_reference_attention(empty, {}, p), std::invalid_argument);

    auto pc = AttentionParams<double>::init(8, 12, 2, rs);
    auto ctx_bad = Tensor<double>::randn({5, 9}, rs);
    REQUIRE_THROWS_AS(cross_attention(target, ctx_bad, pc), std::invalid_argument);
}

TEST_CASE("cross-attention with a repeated context row collapses to that row's value") {
    RandomStream rs(35);
    int64_t d = 6, dc = 10;
    auto p = AttentionParams<double>::init(d, dc, 3, rs);
    auto row = Tensor<double>::randn({1, dc}, rs);
    std::vector<double> ctx_data;
    for (int r = 0; r < 7; ++r)
        ctx_data.insert(ctx_data.end(), row.values().begin(), row.values().end());
    auto ctx = Tensor<double>::from_data({7, dc}, ctx_data);
    FeatureMap<double> target{Tensor<double>::randn({4, d}, rs), 0};

    auto out = cross_attention(target, ctx, p);
    // expected: (row * W_v) * W_o for every output token
    auto v = matmul(row, p.w_v);
    auto expect = matmul(v, p.w_o);
    for (int i = 0; i < 4; ++i)
        for (int64_t j = 0; j < d; ++j)
            REQUIRE(out.tokens.data()[i * d + j] == Catch::Approx(expect.data()[j]).margin(1e-10));
}

TEST_CASE("cross-attention preserves target shape across context lengths") {
    RandomStream rs(36);
    int64_t d = 8, dc = 12;
    auto p = AttentionParams<double>::init(d, dc, 2, rs);
    FeatureMap<double> target{Tensor<double>::randn({9, d}, rs), 0};
    for (int64_t L : {10, 21, 32}) {
        auto ctx = Tensor<double>::randn({L, dc}, rs);
        auto out = cross_attention(target, ctx, p);
        REQUIRE(out.tokens.shape() == target.tokens.shape());
    }
    // small hand-checked case vs the brute-force oracle
    auto p2 = AttentionParams<double>::init(2, 2, 1, rs);
    FeatureMap<double> t2{Tensor<double>::randn({2, 2}, rs), 0};
    auto ctx2 = Tensor<double>::randn({3, 2}, rs);
    auto out2 = cross_attention(t2, ctx2, p2);
    auto oracle = oracle_attention(t2.tokens, ctx2, p2);
    REQUIRE(max_abs_diff(out2.tokens, oracle) < 1e-12);
}

TEST_CASE("attention gradients match central finite differences") {
    RandomStream rs(37);
    int64_t d = 6, dc = 8;

    SECTION("multi_reference_attention") {
        auto p = AttentionParams<double>::init(d, d, 2, rs);
        auto target = Tensor<double>::randn({3, d}, rs);
        auto ref1 = Tensor<double>::randn({2, d}, rs);
        auto ref2 = Tensor<double>::randn({2, d}, rs);
        for (auto* t : {&target, &ref1, &ref2, &p.w_q, &p.w_k, &p.w_v, &p.w_o})
            t->set_requires_grad();
        auto fn = [&] {
            FeatureMap<double> tf{target, 0};
            std::vector<FeatureMap<double>> refs{{ref1, 0}, {ref2, 0}};
            auto out = multi_reference_attention(tf, refs, p);
            RandomStream wrs(99);
            std::vector<double> w(static_cast<size_t>(out.tokens.numel()));
            for (auto& x : w) x = wrs.normal();
            return sum_all(mul_const(out.tokens, w));
        };
        auto res = finite_diff_check(fn,
                                     {{"target", &target},
                                      {"ref1", &ref1},
                                      {"ref2", &ref2},
                                      {"w_q", &p.w_q},
                                      {"w_k", &p.w_k},
                                      {"w_v", &p.w_v},
                                      {"w_o", &p.w_o}});
        INFO("max rel err " << res.max_rel_err);
        REQUIRE(res.max_rel_err < 1e-4);
    }
    SECTION("cross_attention") {
        auto p = AttentionParams<double>::init(d, dc, 3, rs);
        auto target = Tensor<double>::randn({3, d}, rs);
        auto ctx = Tensor<double>::randn({5, dc}, rs);
        for (auto* t : {&target, &ctx, &p.w_q, &p.w_k, &p.w_v, &p.w_o}) t->set_requires_grad();
        auto fn = [&] {
            FeatureMap<double> tf{target, 0};
            auto out = cross_attention(tf, ctx, p);
            RandomStream wrs(98);
            std::vector<double> w(static_cast<size_t>(out.tokens.numel()));
            for (auto& x : w) x = wrs.normal();
            return sum_all(mul_const(out.tokens, w));
        };
        auto res = finite_diff_check(fn,
                                     {{"target", &target},
                                      {"ctx", &ctx},
                                      {"w_q", &p.w_q},
                                      {"w_k", &p.w_k},
                                      {"w_v", &p.w_v},
                                      {"w_o", &p.w_o}});
        INFO("max rel err " << res.max_rel_err);
        REQUIRE(res.max_rel_err < 1e-4);
    }
}
