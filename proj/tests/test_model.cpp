#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <numeric>
#include <string>
#include <vector>

#include "bwa/baselines.hpp"
#include "bwa/model.hpp"
#include "bwa/synthetic.hpp"

using namespace bwa;
using Catch::Approx;

namespace {

LabelMatrix binary_items(const std::vector<std::vector<int>>& rows) {
    // rows[i] = labels from workers 0..|row|-1 on item i; -1 = not labelled
    std::size_t w = 0;
    std::vector<Annotation> ann;
    for (std::size_t i = 0; i < rows.size(); ++i) {
        w = std::max(w, rows[i].size());
        for (std::size_t j = 0; j < rows[i].size(); ++j)
            if (rows[i][j] >= 0) ann.push_back({i, j, static_cast<std::size_t>(rows[i][j])});
    }
    return LabelMatrix::from_annotations(rows.size(), w, 2, std::move(ann));
}

HyperParams fixed_prior(double a_v, double b_v, double lambda = 1.0) {
    HyperParams hp;
    hp.a_v = a_v;
    hp.b_v = b_v;
    hp.lambda = lambda;
    hp.epsilon_strategy = EpsilonStrategy::fixed_prior;
    return hp;
}

SyntheticData random_instance(std::uint64_t seed, std::size_t k = 2) {
    CounterRng pick(seed * 7919 + 1);
    SynthSpec spec;
    spec.num_items = 20 + pick.below(60);
    spec.num_workers = 4 + pick.below(10);
    spec.num_classes = k;
    spec.redundancy = 1 + pick.below(std::min<std::size_t>(spec.num_workers, 5));
    spec.workers = SymmetricAccuracy{0.3, 0.95};
    spec.seed = seed;
    return generate(spec);
}

/// Objective written out directly from the model definition, for oracles.
double objective(const std::vector<double>& z, double lambda, double a_v, double b_v,
                 const std::vector<std::vector<int>>& rows) {
    const double mu = std::accumulate(z.begin(), z.end(), 0.0) / static_cast<double>(z.size());
    double f = 0.0;
    std::size_t w = 0;
    for (const auto& r : rows) w = std::max(w, r.size());
    for (double zi : z) f += 0.5 * lambda * (zi - mu) * (zi - mu);
    for (std::size_t j = 0; j < w; ++j) {
        double sse = 0.0, count = 0.0;
        for (std::size_t i = 0; i < rows.size(); ++i)
            if (j < rows[i].size() && rows[i][j] >= 0) {
                sse += (z[i] - rows[i][j]) * (z[i] - rows[i][j]);
                count += 1.0;
            }
        f += 0.5 * (a_v + count) * std::log(b_v + sse);
    }
    return f;
}

}  // namespace

TEST_CASE("estimate_error_rate", "[bwa][epsilon]") {
    SECTION("unanimous data floors at epsilon_floor") {
        auto m = binary_items({{1, 1, 1}, {0, 0}});
        CHECK(raw_error_rate(m) == 0.0);
        CHECK(estimate_error_rate(m, 1e-6) == 1e-6);
    }
    SECTION("balanced split hits the 1/4 bound") {
        CHECK(raw_error_rate(binary_items({{0, 1}})) == 0.25);
        CHECK(raw_error_rate(binary_items({{0, 0, 1, 1, 0, 1}})) == 0.25);
    }
    SECTION("n0=1, n1=3") {
        // (1*3/4) / 4
        CHECK(raw_error_rate(binary_items({{0, 1, 1, 1}})) == Approx(0.1875).epsilon(1e-15));
    }
    SECTION("unlabelled items contribute nothing") {
        auto m = LabelMatrix::from_annotations(3, 4, 2, {{0, 0, 0}, {0, 1, 1}, {0, 2, 1}, {0, 3, 1}});
        CHECK(raw_error_rate(m) == Approx(0.1875));
    }
    SECTION("multi-class pooled rate reduces to the binary formula at K=2") {
        // K=3 item with counts (1,1,2): sum_k n_k (4 - n_k)/4 = (3 + 3 + 4)/4 = 2.5; / (3*4)
        auto m = LabelMatrix::from_annotations(1, 4, 3, {{0, 0, 0}, {0, 1, 1}, {0, 2, 2}, {0, 3, 2}});
        CHECK(raw_error_rate(m) == Approx(2.5 / 12.0));
    }
    SECTION("no labels is an error") {
        auto m = LabelMatrix::from_annotations(2, 1, 2, {});
        CHECK_THROWS_AS(raw_error_rate(m), ValidationError);
    }
}

TEST_CASE("binary error rate never exceeds 1/4", "[bwa][epsilon][property]") {
    for (std::uint64_t seed = 0; seed < 200; ++seed) {
        auto data = random_instance(seed);
        const double eps = raw_error_rate(data.labels);
        CHECK(eps >= 0.0);
        CHECK(eps <= 0.25);
        CHECK(adjust_error_rate(eps, 2) <= 0.5);
    }
    for (std::size_t k = 2; k <= 6; ++k)
        for (std::uint64_t seed = 0; seed < 30; ++seed) {
            auto data = random_instance(seed, k);
            const double adj = adjust_error_rate(raw_error_rate(data.labels), k);
            CHECK(adj <= 1.0 - 1.0 / static_cast<double>(k) + 1e-15);
        }
}

TEST_CASE("adjust_error_rate", "[bwa][epsilon]") {
    CHECK(adjust_error_rate(0.25, 2) == 0.5);
    CHECK(adjust_error_rate(0.1, 2) == 2 * 0.1);
    CHECK(adjust_error_rate(0.0, 7) == 0.0);
    CHECK(adjust_error_rate(0.1875, 4) == Approx(0.5625).epsilon(1e-15));
    CHECK_THROWS_AS(adjust_error_rate(0.1, 1), ValidationError);
    CHECK_THROWS_AS(adjust_error_rate(-0.1, 2), ValidationError);
}

TEST_CASE("derive_bv", "[bwa][epsilon]") {
    CHECK(derive_bv(30, 0.2) == Approx(6.0));
    CHECK(derive_bv(15, 0.5) == Approx(7.5));
    CHECK(derive_bv(15, 0.0, 1e-6) == Approx(15e-6));
    CHECK_THROWS_AS(derive_bv(0, 0.1), ValidationError);

    std::vector<std::string> warnings;
    auto saved = warning_handler();
    warning_handler() = [&](std::string_view m) { warnings.emplace_back(m); };
    derive_bv(10, 0.5);
    CHECK(warnings.empty());
    derive_bv(10, 1.5);
    CHECK(warnings.size() == 1);
    warning_handler() = saved;
}

TEST_CASE("resolve_prior follows the strategy", "[bwa][epsilon]") {
    auto m = binary_items({{0, 1, 1, 1}});
    auto hp = HyperParams::av30_original();
    auto p = resolve_prior(m, hp);
    CHECK(p.epsilon == Approx(0.1875));
    CHECK(p.b_v == Approx(30 * 0.1875));
    hp = HyperParams::av15_adjusted();
    p = resolve_prior(m, hp);
    CHECK(p.epsilon == Approx(0.375));
    CHECK(p.b_v == Approx(15 * 0.375));
    hp = fixed_prior(10, 4);
    CHECK(resolve_prior(m, hp).b_v == 4);
}

TEST_CASE("hyper-parameter validation", "[bwa]") {
    auto hp = HyperParams{};
    CHECK_NOTHROW(hp.validate());
    hp.a_v = 0;
    CHECK_THROWS_AS(hp.validate(), ValidationError);
    hp = {};
    hp.lambda = -1;
    CHECK_THROWS_AS(hp.validate(), ValidationError);
    hp = {};
    hp.max_iters = 0;
    CHECK_THROWS_AS(hp.validate(), ValidationError);
    hp = {};
    hp.tolerance = 0;
    CHECK_THROWS_AS(hp.validate(), ValidationError);
}

TEST_CASE("init_state uses soft majority vote", "[bwa][em]") {
    auto m = LabelMatrix::from_annotations(3, 3, 2, {{0, 0, 1}, {0, 1, 1}, {0, 2, 0}, {1, 0, 1}});
    auto s = init_state(BinaryView(m, 1), fixed_prior(15, 3));
    CHECK(s.z[0] == Approx(2.0 / 3.0));
    CHECK(s.z[1] == 1.0);
    CHECK(s.z[2] == 0.5);
    CHECK(s.mu == Approx((2.0 / 3.0 + 1.0 + 0.5) / 3.0));

    auto all_one = binary_items({{1, 1}, {1}, {1, 1, 1}});
    CHECK(init_state(BinaryView(all_one, 1), fixed_prior(15, 3)).mu == 1.0);
}

TEST_CASE("e_step weights", "[bwa][em]") {
    SECTION("worker without labels gets the prior mean a_v/b_v") {
        auto m = LabelMatrix::from_annotations(1, 2, 2, {{0, 0, 1}});
        BwaState s;
        s.z = {1.0};
        e_step(s, BinaryView(m, 1), fixed_prior(15, 3));
        CHECK(s.eqv[1] == Approx(5.0));
    }
    SECTION("ten perfect labels") {
        std::vector<Annotation> ann;
        for (std::size_t i = 0; i < 10; ++i) ann.push_back({i, 0, i % 2});
        auto m = LabelMatrix::from_annotations(10, 1, 2, ann);
        BwaState s;
        for (std::size_t i = 0; i < 10; ++i) s.z.push_back(static_cast<double>(i % 2));
        e_step(s, BinaryView(m, 1), fixed_prior(15, 3));
        CHECK(s.sse[0] == 0.0);
        CHECK(s.eqv[0] == Approx(25.0 / 3.0));
    }
    SECTION("all-wrong worker keeps the unit minimum weight when b_v = a_v") {
        std::vector<Annotation> ann;
        for (std::size_t i = 0; i < 10; ++i) ann.push_back({i, 0, 1});
        auto m = LabelMatrix::from_annotations(10, 1, 2, ann);
        BwaState s;
        s.z.assign(10, 0.0);
        e_step(s, BinaryView(m, 1), fixed_prior(15, 15));
        CHECK(s.sse[0] == 10.0);
        CHECK(s.eqv[0] == 1.0);
    }
}

TEST_CASE("m_step weighted average", "[bwa][em]") {
    auto run = [](std::vector<int> labels, std::vector<double> weights) {
        std::vector<Annotation> ann;
        for (std::size_t j = 0; j < labels.size(); ++j)
            ann.push_back({0, j, static_cast<std::size_t>(labels[j])});
        auto m = LabelMatrix::from_annotations(1, labels.size(), 2, ann);
        BwaState s;
        s.z = {0.0};
        s.mu = 0.5;
        s.eqv = weights;
        m_step(s, BinaryView(m, 1), fixed_prior(15, 3, 1.0));
        return s;
    };
    CHECK(run({1}, {1.0}).z[0] == Approx(0.75));
    CHECK(run({0, 1}, {1.0, 1.0}).z[0] == 0.5);
    auto s = run({1}, {3.0});
    CHECK(s.z[0] == Approx(0.875));
    CHECK(s.mu == s.z[0]);

    // unlabelled item follows the previous mu
    auto m = LabelMatrix::from_annotations(2, 1, 2, {{0, 0, 1}});
    BwaState st;
    st.z = {0.9, 0.1};
    st.mu = 0.3;
    st.eqv = {1.0};
    m_step(st, BinaryView(m, 1), fixed_prior(15, 3));
    CHECK(st.z[1] == Approx(0.3));
}

TEST_CASE("neg_log_likelihood", "[bwa][em]") {
    auto empty = LabelMatrix::from_annotations(1, 0, 2, {});
    BwaState s;
    s.z = {0.4};
    s.mu = 0.4;
    CHECK(neg_log_likelihood(s, BinaryView(empty, 1), fixed_prior(15, 3)) == 0.0);
    s.z = {1.0};
    s.mu = 0.0;
    CHECK(neg_log_likelihood(s, BinaryView(empty, 1), fixed_prior(15, 3)) == Approx(0.5));

    // lower SSE, lower objective
    auto m = binary_items({{1}, {1}});
    BwaState near, far;
    near.z = far.z = {0.9, 0.9};
    near.mu = far.mu = 0.9;
    far.z = {0.5, 0.9};
    far.mu = 0.9;
    near.z = {0.6, 0.9};
    CHECK(neg_log_likelihood(near, BinaryView(m, 1), fixed_prior(15, 3)) <
          neg_log_likelihood(far, BinaryView(m, 1), fixed_prior(15, 3)));

    // matches the model written out directly
    auto m2 = binary_items({{1, 0, 1}, {0, -1, 1}});
    BwaState t;
    t.z = {0.7, 0.2};
    t.mu = 0.45;
    CHECK(neg_log_likelihood(t, BinaryView(m2, 1), fixed_prior(4, 1.5)) ==
          Approx(objective({0.7, 0.2}, 1.0, 4, 1.5, {{1, 0, 1}, {0, -1, 1}})));
}

TEST_CASE("run_em_binary small cases", "[bwa][em]") {
    SECTION("unanimous data reproduces majority vote") {
        auto m = binary_items({{1, 1, 1}, {0, 0, 0}, {1, 1, -1}, {0, -1, 0}});
        auto r = run_em_binary(BinaryView(m, 1), fixed_prior(15, 1));
        auto mv = majority_vote(m);
        for (std::size_t i = 0; i < 4; ++i) CHECK(r.hard_labels[i] == mv.labels[i]);
        CHECK(r.converged);
    }
    SECTION("single worker labelling 1") {
        auto m = binary_items({{1}});
        auto r = run_em_binary(BinaryView(m, 1), fixed_prior(5, 5));
        // N=1 forces mu=z, so z=1 is a fixed point reached from the MV start
        CHECK(r.scores[0] == 1.0);
        CHECK(r.hard_labels[0] == 1);
    }
    SECTION("exact tie thresholds to 0") {
        auto m = binary_items({{0, 1}, {0, 1}});
        auto r = run_em_binary(BinaryView(m, 1), fixed_prior(15, 3));
        CHECK(r.scores[0] == 0.5);
        CHECK(r.hard_labels[0] == 0);
    }
    SECTION("empty view is an error") {
        auto m = LabelMatrix::from_annotations(2, 2, 2, {});
        CHECK_THROWS_AS(run_em_binary(BinaryView(m, 1), fixed_prior(15, 3)), ValidationError);
    }
    SECTION("iteration cap sets the non-convergence flag") {
        auto data = random_instance(5);
        auto hp = fixed_prior(2, 1);
        hp.max_iters = 1;
        hp.tolerance = 1e-15;
        auto r = run_em_binary(BinaryView(data.labels, 1), hp);
        CHECK_FALSE(r.converged);
        CHECK(r.iterations == 1);
        CHECK(r.nll_trace.size() == 2);
    }
}

TEST_CASE("run_em_binary matches a scalar fixed-point iteration", "[bwa][em][oracle]") {
    // Two items, two workers; iterate the update equations by hand.
    const std::vector<std::vector<int>> rows{{1, 0}, {1, 1}};
    const double lambda = 1.0, a = 4.0, b = 1.0;
    double z0 = 0.5, z1 = 1.0;
    double mu = (z0 + z1) / 2;
    for (int it = 0; it < 2000; ++it) {
        const double sse0 = (z0 - 1) * (z0 - 1) + (z1 - 1) * (z1 - 1);
        const double sse1 = (z0 - 0) * (z0 - 0) + (z1 - 1) * (z1 - 1);
        const double v0 = (a + 2) / (b + sse0), v1 = (a + 2) / (b + sse1);
        const double n0 = (lambda * mu + v0) / (lambda + v0 + v1);
        const double n1 = (lambda * mu + v0 + v1) / (lambda + v0 + v1);
        z0 = n0;
        z1 = n1;
        mu = (z0 + z1) / 2;
    }
    auto hp = fixed_prior(a, b, lambda);
    hp.tolerance = 1e-12;
    hp.max_iters = 5000;
    auto r = run_em_binary(BinaryView(binary_items(rows), 1), hp);
    CHECK(r.scores[0] == Approx(z0).margin(1e-9));
    CHECK(r.scores[1] == Approx(z1).margin(1e-9));
    CHECK(r.mu == Approx(mu).margin(1e-9));
}

TEST_CASE("EM fixed point is no worse than a grid minimum", "[bwa][em][oracle]") {
    const std::vector<std::vector<int>> rows{{1, 0, 1}, {0, 0, 1}};
    const double a = 2.0, b = 1.0;
    double best = std::numeric_limits<double>::infinity();
    for (int x = 0; x <= 1000; ++x)
        for (int y = 0; y <= 1000; ++y)
            best = std::min(best, objective({x * 1e-3, y * 1e-3}, 1.0, a, b, rows));
    auto r = run_em_binary(BinaryView(binary_items(rows), 1), fixed_prior(a, b));
    CHECK(r.nll_trace.back() <= best + 1e-4);
}

TEST_CASE("EM invariants on random instances", "[bwa][em][property]") {
    for (std::uint64_t seed = 0; seed < 60; ++seed) {
        auto data = random_instance(seed);
        const double a_v = 1.0 + static_cast<double>(seed % 30);
        auto hp = fixed_prior(a_v, a_v * (0.05 + 0.9 * static_cast<double>(seed % 7) / 7.0));
        auto view = BinaryView(data.labels, 1);

        bool in_range = true, min_weight = true;
        auto r = run_em_binary(view, hp, [&](const BwaState& s) {
            for (double z : s.z) in_range = in_range && z >= 0.0 && z <= 1.0;
            for (double v : s.eqv) min_weight = min_weight && v >= 1.0;
        });
        CHECK(in_range);
        CHECK(min_weight);
        for (std::size_t t = 1; t < r.nll_trace.size(); ++t)
            CHECK(r.nll_trace[t] <= r.nll_trace[t - 1] + 1e-9);
        for (std::size_t i = 0; i < r.scores.size(); ++i)
            CHECK(r.hard_labels[i] == (r.scores[i] > 0.5 ? 1 : 0));

        // determinism
        auto again = run_em_binary(view, hp);
        CHECK(again.scores == r.scores);
        CHECK(again.nll_trace == r.nll_trace);
    }
}

TEST_CASE("label swap maps z to 1-z", "[bwa][em][property]") {
    for (std::uint64_t seed = 0; seed < 30; ++seed) {
        auto data = random_instance(seed + 100);
        std::vector<Annotation> flipped(data.labels.annotations().begin(),
                                        data.labels.annotations().end());
        for (auto& a : flipped) a.label = 1 - a.label;
        auto swapped = LabelMatrix::from_annotations(data.labels.num_items(), data.labels.num_workers(),
                                                     2, flipped);
        auto hp = fixed_prior(10, 3);
        hp.tolerance = 1e-14;
        hp.max_iters = 100000;
        auto r = run_em_binary(BinaryView(data.labels, 1), hp);
        auto s = run_em_binary(BinaryView(swapped, 1), hp);
        REQUIRE(r.converged);
        REQUIRE(s.converged);
        for (std::size_t i = 0; i < r.scores.size(); ++i) {
            CHECK(std::abs(s.scores[i] - (1.0 - r.scores[i])) <= 1e-12);
            if (std::abs(r.scores[i] - 0.5) > 1e-9) CHECK(s.hard_labels[i] != r.hard_labels[i]);
        }
        CHECK(std::abs(s.mu - (1.0 - r.mu)) <= 1e-12);
        for (std::size_t j = 0; j < r.worker_weights.size(); ++j)
            CHECK(s.worker_weights[j] == Approx(r.worker_weights[j]).epsilon(1e-9));
    }
}

TEST_CASE("relabelling items and workers permutes outputs bit-identically", "[bwa][em][property]") {
    for (std::uint64_t seed = 0; seed < 30; ++seed) {
        auto data = random_instance(seed + 500, 3);
        const auto& m = data.labels;
        CounterRng rng(seed);
        std::vector<std::size_t> pi(m.num_items()), pw(m.num_workers());
        std::iota(pi.begin(), pi.end(), 0);
        std::iota(pw.begin(), pw.end(), 0);
        for (std::size_t x = pi.size(); x > 1; --x) std::swap(pi[x - 1], pi[rng.below(x)]);
        for (std::size_t x = pw.size(); x > 1; --x) std::swap(pw[x - 1], pw[rng.below(x)]);
        std::vector<Annotation> ann;
        for (const auto& a : m.annotations()) ann.push_back({pi[a.item], pw[a.worker], a.label});
        auto relabelled = LabelMatrix::from_annotations(m.num_items(), m.num_workers(), 3, ann);

        auto hp = HyperParams::av15_adjusted();
        auto r = aggregate_multiclass(m, hp);
        auto s = aggregate_multiclass(relabelled, hp);
        for (std::size_t k = 0; k < 3; ++k) {
            CHECK(r.per_class[k].nll_trace == s.per_class[k].nll_trace);
            CHECK(r.per_class[k].mu == s.per_class[k].mu);
            for (std::size_t i = 0; i < m.num_items(); ++i)
                CHECK(r.score(k, i) == s.score(k, pi[i]));
            for (std::size_t j = 0; j < m.num_workers(); ++j)
                CHECK(r.per_class[k].worker_weights[j] == s.per_class[k].worker_weights[pw[j]]);
        }
        for (std::size_t i = 0; i < m.num_items(); ++i)
            CHECK(r.hard_labels[i] == s.hard_labels[pi[i]]);
    }
}

TEST_CASE("aggregate_multiclass", "[bwa][multiclass]") {
    SECTION("unanimous single item") {
        auto m = LabelMatrix::from_annotations(1, 3, 4, {{0, 0, 2}, {0, 1, 2}, {0, 2, 2}});
        auto r = aggregate_multiclass(m, HyperParams::av15_adjusted());
        CHECK(r.hard_labels[0] == 2);
        CHECK(r.epsilon_raw == 0.0);
    }
    SECTION("argmax ties go to the smallest class") {
        auto m = LabelMatrix::from_annotations(1, 2, 3, {{0, 0, 2}, {0, 1, 1}});
        auto r = aggregate_multiclass(m, HyperParams::av15_adjusted());
        CHECK(r.score(1, 0) == r.score(2, 0));
        CHECK(r.hard_labels[0] == 1);
    }
    SECTION("parallel and sequential runs agree exactly") {
        auto data = random_instance(42, 4);
        auto a = aggregate_multiclass(data.labels, HyperParams::av30_original(), false);
        auto b = aggregate_multiclass(data.labels, HyperParams::av30_original(), true);
        CHECK(a.score_matrix == b.score_matrix);
        CHECK(a.hard_labels == b.hard_labels);
    }
    SECTION("class permutation permutes predictions") {
        for (std::uint64_t seed = 0; seed < 20; ++seed) {
            auto data = random_instance(seed + 900, 3);
            const std::vector<std::size_t> perm{2, 0, 1};
            std::vector<Annotation> ann;
            for (const auto& a : data.labels.annotations()) ann.push_back({a.item, a.worker, perm[a.label]});
            auto permuted = LabelMatrix::from_annotations(data.labels.num_items(),
                                                          data.labels.num_workers(), 3, ann);
            auto r = aggregate_multiclass(data.labels, HyperParams::av15_adjusted());
            auto s = aggregate_multiclass(permuted, HyperParams::av15_adjusted());
            for (std::size_t i = 0; i < r.hard_labels.size(); ++i) {
                // compare only where the original maximum is unique
                std::vector<double> col{r.score(0, i), r.score(1, i), r.score(2, i)};
                std::sort(col.begin(), col.end());
                if (col[2] - col[1] > 1e-9) CHECK(s.hard_labels[i] == perm[r.hard_labels[i]]);
            }
        }
    }
    SECTION("binary one-vs-rest agrees with the thresholded binary model") {
        for (std::uint64_t seed = 0; seed < 20; ++seed) {
            auto data = random_instance(seed + 300);
            auto hp = HyperParams::av30_original();
            auto multi = aggregate_multiclass(data.labels, hp);
            auto bin_hp = hp;
            bin_hp.b_v = multi.b_v;
            auto bin = run_em_binary(BinaryView(data.labels, 1), bin_hp);
            for (std::size_t i = 0; i < bin.scores.size(); ++i)
                if (std::abs(bin.scores[i] - 0.5) > 1e-3)
                    CHECK(static_cast<std::size_t>(bin.hard_labels[i]) == multi.hard_labels[i]);
        }
    }
}

TEST_CASE("worker_accuracy", "[bwa]") {
    CHECK(worker_accuracy(0.0) == 0.5);
    CHECK(worker_accuracy(2.0 * std::log(3.0)) == Approx(0.75).epsilon(1e-14));
    CHECK(worker_accuracy(200.0) == Approx(1.0));
    CHECK(worker_accuracy(50.0) < 1.0);
    CHECK_THROWS_AS(worker_accuracy(-0.1), ValidationError);
}
