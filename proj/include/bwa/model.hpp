#pragma once

// Bayesian Weighted Average (BWA) truth inference.
//
// Binary model: each item i has a continuous truth z_i ~ N(mu, 1/lambda);
// worker j's label y_ij ~ N(z_i, 1/v_j) with precision v_j ~ Gamma(a_v/2, b_v/2).
// Integrating out v leaves the objective
//
//   F(z, mu) = sum_i lambda/2 (z_i - mu)^2
//            + sum_j (a_v + |N_j|)/2 * log(b_v + SSE_j),   SSE_j = sum_{i in N_j} (z_i - y_ij)^2
//
// which EM minimises by alternating
//
//   E:  E[v_j] = (a_v + |N_j|) / (b_v + SSE_j)
//   M:  z_i    = (lambda mu + sum_{j in W_i} E[v_j] y_ij) / (lambda + sum_{j in W_i} E[v_j])
//       mu     = mean_i z_i
//
// Multi-class data is reduced to K one-versus-rest binary problems sharing
// one prior, and each item takes the class with the highest score.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <future>
#include <iostream>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "bwa/dataset.hpp"
#include "bwa/errors.hpp"

namespace bwa {

/// Receives non-fatal diagnostics (defaults to stderr).
using WarningHandler = std::function<void(std::string_view)>;

inline WarningHandler& warning_handler() {
    static WarningHandler handler = [](std::string_view msg) {
        std::cerr << "warning: " << msg << '\n';
    };
    return handler;
}

inline void warn(std::string_view msg) {
    if (auto& h = warning_handler()) h(msg);
}

/// How b_v is obtained from a_v.
enum class EpsilonStrategy {
    fixed_prior,  ///< use HyperParams::b_v as given
    original,     ///< b_v = a_v * eps, eps estimated from majority-vote disagreement
    adjusted,     ///< b_v = a_v * eps * 4(1 - 1/K)
};

inline std::string_view to_string(EpsilonStrategy s) {
    switch (s) {
        case EpsilonStrategy::fixed_prior: return "fixed";
        case EpsilonStrategy::original: return "original";
        case EpsilonStrategy::adjusted: return "adjusted";
    }
    return "?";
}

inline std::optional<EpsilonStrategy> parse_epsilon_strategy(std::string_view s) {
    if (s == "fixed") return EpsilonStrategy::fixed_prior;
    if (s == "original") return EpsilonStrategy::original;
    if (s == "adjusted") return EpsilonStrategy::adjusted;
    return std::nullopt;
}

struct HyperParams {
    /// Prior precision of z around mu; the weight of the "default worker".
    double lambda = 1.0;
    /// Prior pseudo-count of items each worker has labelled.
    double a_v = 15.0;
    /// Prior pseudo-count of mistakes. Only read directly under fixed_prior;
    /// the estimating strategies overwrite it.
    double b_v = 1.0;
    EpsilonStrategy epsilon_strategy = EpsilonStrategy::adjusted;
    /// Stop once every z_i moved by at most this fraction of its previous value.
    double tolerance = 1e-3;
    int max_iters = 500;
    double epsilon_floor = 1e-6;

    void validate() const {
        auto positive = [](double x) { return std::isfinite(x) && x > 0.0; };
        if (!positive(lambda)) throw ValidationError("lambda must be > 0");
        if (!positive(a_v)) throw ValidationError("a_v must be > 0");
        if (!positive(b_v)) throw ValidationError("b_v must be > 0");
        if (!positive(tolerance)) throw ValidationError("tolerance must be > 0");
        if (max_iters < 1) throw ValidationError("max_iters must be >= 1");
        if (!positive(epsilon_floor)) throw ValidationError("epsilon_floor must be > 0");
    }

    static HyperParams av30_original() {
        HyperParams hp;
        hp.a_v = 30.0;
        hp.epsilon_strategy = EpsilonStrategy::original;
        return hp;
    }

    static HyperParams av15_adjusted() {
        HyperParams hp;
        hp.a_v = 15.0;
        hp.epsilon_strategy = EpsilonStrategy::adjusted;
        return hp;
    }
};

/// EM iterate for one binary problem.
struct BwaState {
    std::vector<double> z;    ///< per item, in [0, 1]
    double mu = 0.5;
    std::vector<double> eqv;  ///< per worker E_q[v_j]
    std::vector<double> sse;  ///< per worker SSE_j at the current z
    double nll = 0.0;
    int iteration = 0;
};

struct BinaryResult {
    std::vector<double> scores;
    std::vector<std::uint8_t> hard_labels;  ///< 1 iff score > 0.5
    double mu = 0.5;
    std::vector<double> worker_weights;
    std::vector<double> nll_trace;  ///< objective at init, then after every iteration
    bool converged = false;
    int iterations = 0;
};

struct MultiClassResult {
    std::size_t num_classes = 0;
    std::size_t num_items = 0;
    std::vector<double> score_matrix;  ///< row-major K x N
    std::vector<std::size_t> hard_labels;
    std::vector<BinaryResult> per_class;
    double epsilon_raw = 0.0;  ///< disagreement rate before flooring/adjusting
    double epsilon = 0.0;      ///< b_v / a_v actually used
    double b_v = 0.0;

    double score(std::size_t k, std::size_t item) const { return score_matrix[k * num_items + item]; }
};

namespace detail {

/// Sum that depends only on the multiset of terms, not their order, so
/// relabelling items or workers leaves results bit-identical.
inline double order_free_sum(std::vector<double> terms) {
    std::sort(terms.begin(), terms.end());
    double s = 0.0;
    for (double t : terms) s += t;
    return s;
}

inline double order_free_mean(const std::vector<double>& v) {
    if (v.empty()) return 0.5;
    return order_free_sum(v) / static_cast<double>(v.size());
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Prior from data

/// Majority-vote disagreement rate without flooring. Binary data gives
///   sum_i n_i0 n_i1 / (n_i0 + n_i1)  /  sum_i (n_i0 + n_i1)   (at most 1/4);
/// for K > 2 the K one-vs-rest rates are pooled.
inline double raw_error_rate(const LabelMatrix& labels) {
    if (labels.empty()) throw ValidationError("cannot estimate an error rate without labels");
    const VoteCounts counts(labels);
    const std::size_t k_classes = labels.num_classes();
    std::vector<double> terms;
    double total = 0.0;  // integer-valued, exact in any order
    for (std::size_t i = 0; i < counts.num_items(); ++i) {
        const double wi = counts.total(i);
        if (wi == 0.0) continue;
        total += wi;
        if (k_classes == 2) {
            terms.push_back(static_cast<double>(counts.count(i, 0)) * counts.count(i, 1) / wi);
        } else {
            double t = 0.0;
            for (auto nik : counts.row(i)) t += nik * (wi - nik) / wi;
            terms.push_back(t);
        }
    }
    const double numerator = detail::order_free_sum(std::move(terms));
    return k_classes == 2 ? numerator / total
                          : numerator / (static_cast<double>(k_classes) * total);
}

inline double estimate_error_rate(const LabelMatrix& labels, double epsilon_floor = 1e-6) {
    return std::max(raw_error_rate(labels), epsilon_floor);
}

/// Stretches eps from [0, 1/4] to [0, 1 - 1/K] (doubling at K = 2).
inline double adjust_error_rate(double epsilon, std::size_t num_classes) {
    if (!(epsilon >= 0.0)) throw ValidationError("error rate must be >= 0");
    if (num_classes < 2) throw ValidationError("need at least 2 classes");
    return epsilon * 4.0 * (1.0 - 1.0 / static_cast<double>(num_classes));
}

inline double derive_bv(double a_v, double epsilon, double epsilon_floor = 1e-6) {
    if (!(a_v > 0.0)) throw ValidationError("a_v must be > 0");
    if (!(epsilon >= 0.0)) throw ValidationError("error rate must be >= 0");
    const double b_v = a_v * std::max(epsilon, epsilon_floor);
    if (b_v > a_v)
        warn("b_v = " + std::to_string(b_v) + " exceeds a_v = " + std::to_string(a_v) +
             "; worker weights may fall below 1");
    return b_v;
}

struct PriorSetting {
    double epsilon_raw = 0.0;
    double epsilon = 0.0;
    double b_v = 0.0;
};

/// Resolves b_v for `labels` according to hp.epsilon_strategy.
inline PriorSetting resolve_prior(const LabelMatrix& labels, const HyperParams& hp) {
    PriorSetting p;
    if (hp.epsilon_strategy == EpsilonStrategy::fixed_prior) {
        if (hp.b_v > hp.a_v)
            warn("b_v exceeds a_v; worker weights may fall below 1");
        p.b_v = hp.b_v;
        p.epsilon = p.epsilon_raw = hp.b_v / hp.a_v;
        return p;
    }
    p.epsilon_raw = raw_error_rate(labels);
    double eps = std::max(p.epsilon_raw, hp.epsilon_floor);
    if (hp.epsilon_strategy == EpsilonStrategy::adjusted)
        eps = adjust_error_rate(eps, labels.num_classes());
    p.epsilon = eps;
    p.b_v = derive_bv(hp.a_v, eps, hp.epsilon_floor);
    return p;
}

// ---------------------------------------------------------------------------
// EM steps

/// Recomputes SSE_j and E_q[v_j] from the current z.
inline void e_step(BwaState& state, const BinaryView& view, const HyperParams& hp) {
    const auto& m = view.labels();
    const std::size_t w = view.num_workers();
    state.sse.assign(w, 0.0);
    state.eqv.assign(w, 0.0);
    for (std::size_t j = 0; j < w; ++j) {
        const auto items = m.worker_annotations(j);
        double sse = 0.0;
        for (auto a : items) {
            const double d = state.z[m.annotation(a).item] - view.y(a);
            sse += d * d;
        }
        state.sse[j] = sse;
        state.eqv[j] = (hp.a_v + static_cast<double>(items.size())) / (hp.b_v + sse);
    }
}

/// Weighted average update of every z_i using the current mu, then mu <- mean(z).
inline void m_step(BwaState& state, const BinaryView& view, const HyperParams& hp) {
    const auto& m = view.labels();
    const double prior = hp.lambda * state.mu;
    for (std::size_t i = 0; i < view.num_items(); ++i) {
        double num = prior;
        double den = hp.lambda;
        for (auto a : m.item_annotations(i)) {
            const double weight = state.eqv[m.annotation(a).worker];
            num += weight * view.y(a);
            den += weight;
        }
        state.z[i] = num / den;
    }
    state.mu = detail::order_free_mean(state.z);
}

/// Objective F(z, mu) up to an additive constant. Reads state.z and state.mu;
/// SSE is recomputed here rather than taken from state.sse.
inline double neg_log_likelihood(const BwaState& state, const BinaryView& view,
                                 const HyperParams& hp) {
    const auto& m = view.labels();
    std::vector<double> item_terms(view.num_items());
    for (std::size_t i = 0; i < item_terms.size(); ++i) {
        const double d = state.z[i] - state.mu;
        item_terms[i] = 0.5 * hp.lambda * d * d;
    }
    std::vector<double> worker_terms(view.num_workers());
    for (std::size_t j = 0; j < worker_terms.size(); ++j) {
        const auto items = m.worker_annotations(j);
        double sse = 0.0;
        for (auto a : items) {
            const double d = state.z[m.annotation(a).item] - view.y(a);
            sse += d * d;
        }
        worker_terms[j] =
            0.5 * (hp.a_v + static_cast<double>(items.size())) * std::log(hp.b_v + sse);
    }
    return detail::order_free_sum(std::move(item_terms)) +
           detail::order_free_sum(std::move(worker_terms));
}

/// Soft majority-vote start: z_i = fraction of W_i voting for the focal
/// class (0.5 when W_i is empty), mu = mean z, followed by an E-step.
inline BwaState init_state(const BinaryView& view, const HyperParams& hp) {
    const auto& m = view.labels();
    BwaState s;
    s.z.assign(view.num_items(), 0.5);
    for (std::size_t i = 0; i < view.num_items(); ++i) {
        const auto workers = m.item_annotations(i);
        if (workers.empty()) continue;
        double votes = 0.0;
        for (auto a : workers) votes += view.y(a);
        s.z[i] = votes / static_cast<double>(workers.size());
    }
    s.mu = detail::order_free_mean(s.z);
    e_step(s, view, hp);
    s.nll = neg_log_likelihood(s, view, hp);
    return s;
}

/// Called with the state after initialisation and after every iteration.
using EmObserver = std::function<void(const BwaState&)>;

inline bool within_tolerance(const std::vector<double>& prev, const std::vector<double>& next,
                             double tolerance) {
    for (std::size_t i = 0; i < next.size(); ++i)
        if (std::abs(next[i] - prev[i]) / std::max(std::abs(prev[i]), 1e-8) > tolerance)
            return false;
    return true;
}

/// Runs EM on one binary view with hp.b_v as the prior mistake count.
inline BinaryResult run_em_binary(const BinaryView& view, const HyperParams& hp,
                                  const EmObserver& observer = {}) {
    hp.validate();
    if (view.labels().empty()) throw ValidationError("binary view has no annotations");

    BwaState state = init_state(view, hp);
    BinaryResult r;
    r.nll_trace.push_back(state.nll);
    if (observer) observer(state);

    std::vector<double> prev;
    for (int it = 1; it <= hp.max_iters; ++it) {
        prev = state.z;
        m_step(state, view, hp);
        e_step(state, view, hp);
        state.nll = neg_log_likelihood(state, view, hp);
        state.iteration = it;
        r.nll_trace.push_back(state.nll);
        if (observer) observer(state);
        if (within_tolerance(prev, state.z, hp.tolerance)) {
            r.converged = true;
            break;
        }
    }

    r.iterations = state.iteration;
    r.mu = state.mu;
    r.hard_labels.resize(state.z.size());
    for (std::size_t i = 0; i < state.z.size(); ++i) r.hard_labels[i] = state.z[i] > 0.5 ? 1 : 0;
    r.scores = std::move(state.z);
    r.worker_weights = std::move(state.eqv);
    return r;
}

/// One-versus-rest BWA over all K classes. The prior (b_v) is resolved once
/// from the full data and shared by every class. With `parallel`, the K
/// binary runs execute concurrently; results are identical either way.
inline MultiClassResult aggregate_multiclass(const LabelMatrix& labels, const HyperParams& hp,
                                             bool parallel = false) {
    hp.validate();
    if (labels.num_classes() < 2) throw ValidationError("need at least 2 classes");
    if (labels.empty()) throw ValidationError("no annotations to aggregate");

    const PriorSetting prior = resolve_prior(labels, hp);
    HyperParams run_hp = hp;
    run_hp.b_v = prior.b_v;

    const std::size_t k_classes = labels.num_classes();
    const std::size_t n = labels.num_items();
    MultiClassResult out;
    out.num_classes = k_classes;
    out.num_items = n;
    out.epsilon_raw = prior.epsilon_raw;
    out.epsilon = prior.epsilon;
    out.b_v = prior.b_v;

    if (parallel && k_classes > 1) {
        std::vector<std::future<BinaryResult>> jobs;
        jobs.reserve(k_classes);
        for (std::size_t k = 0; k < k_classes; ++k)
            jobs.push_back(std::async(std::launch::async, [&labels, &run_hp, k] {
                return run_em_binary(BinaryView(labels, k), run_hp);
            }));
        for (auto& job : jobs) out.per_class.push_back(job.get());
    } else {
        for (std::size_t k = 0; k < k_classes; ++k)
            out.per_class.push_back(run_em_binary(BinaryView(labels, k), run_hp));
    }

    out.score_matrix.resize(k_classes * n);
    for (std::size_t k = 0; k < k_classes; ++k)
        std::copy(out.per_class[k].scores.begin(), out.per_class[k].scores.end(),
                  out.score_matrix.begin() + static_cast<std::ptrdiff_t>(k * n));

    out.hard_labels.assign(n, 0);
    for (std::size_t i = 0; i < n; ++i) {
        std::size_t best = 0;
        for (std::size_t k = 1; k < k_classes; ++k)
            if (out.score(k, i) > out.score(best, i)) best = k;
        out.hard_labels[i] = best;
    }
    return out;
}

/// Accuracy of a one-coin worker with precision v: sqrt(e^v) / (1 + sqrt(e^v)).
inline double worker_accuracy(double v) {
    if (!(v >= 0.0)) throw ValidationError("worker precision must be >= 0");
    return 1.0 / (1.0 + std::exp(-0.5 * v));
}

}  // namespace bwa
