#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <vector>

#include "bwa/dataset.hpp"
#include "bwa/errors.hpp"

namespace bwa {

struct MajorityVoteResult {
    std::vector<std::size_t> labels;
    /// Items with no annotations; their label is class 0.
    std::vector<std::uint8_t> unlabelled;
};

/// Most frequent class per item, ties to the smallest class index.
inline MajorityVoteResult majority_vote(const LabelMatrix& labels) {
    const VoteCounts counts(labels);
    MajorityVoteResult r;
    r.labels.assign(labels.num_items(), 0);
    r.unlabelled.assign(labels.num_items(), 0);
    for (std::size_t i = 0; i < labels.num_items(); ++i) {
        const auto row = counts.row(i);
        const auto best = std::max_element(row.begin(), row.end());  // first maximum
        r.labels[i] = static_cast<std::size_t>(best - row.begin());
        r.unlabelled[i] = *best == 0 ? 1 : 0;
    }
    return r;
}

struct DsParams {
    int max_iters = 100;
    /// Stop when no class posterior moves by more than this.
    double tolerance = 1e-4;
    /// Additive pseudo-count on every confusion cell and class-prior count.
    double smoothing = 0.01;

    void validate() const {
        if (max_iters < 1) throw ValidationError("DS max_iters must be >= 1");
        if (!(tolerance > 0.0)) throw ValidationError("DS tolerance must be > 0");
        if (!(smoothing > 0.0)) throw ValidationError("DS smoothing must be > 0");
    }
};

struct DawidSkeneResult {
    std::vector<std::size_t> labels;
    std::vector<double> posteriors;  ///< row-major N x K
    std::vector<double> class_prior;
    /// Per-worker K x K row-stochastic confusion matrices, worker-major.
    std::vector<double> confusion;
    /// Log marginal likelihood plus the smoothing log-prior, once per E-step.
    std::vector<double> objective_trace;
    int iterations = 0;
    bool converged = false;
};

/// Dawid-Skene EM with per-worker confusion matrices, started from soft
/// majority-vote class fractions. The smoothing pseudo-count makes each
/// M-step a MAP update under a symmetric Dirichlet(1 + smoothing) prior.
inline DawidSkeneResult dawid_skene(const LabelMatrix& labels, const DsParams& params = {}) {
    params.validate();
    const std::size_t n = labels.num_items();
    const std::size_t w = labels.num_workers();
    const std::size_t kc = labels.num_classes();
    if (kc < 2) throw ValidationError("need at least 2 classes");
    const double s = params.smoothing;

    DawidSkeneResult r;
    auto& post = r.posteriors;
    post.assign(n * kc, 1.0 / static_cast<double>(kc));
    {
        const VoteCounts counts(labels);
        for (std::size_t i = 0; i < n; ++i) {
            const double total = counts.total(i);
            if (total == 0) continue;
            for (std::size_t k = 0; k < kc; ++k) post[i * kc + k] = counts.count(i, k) / total;
        }
    }

    auto& prior = r.class_prior;
    auto& conf = r.confusion;
    std::vector<double> log_prior(kc), log_conf(w * kc * kc), log_joint(kc), next(n * kc);

    for (int it = 1; it <= params.max_iters; ++it) {
        // M-step
        prior.assign(kc, s);
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t k = 0; k < kc; ++k) prior[k] += post[i * kc + k];
        const double prior_total = static_cast<double>(n) + s * static_cast<double>(kc);
        for (auto& p : prior) p /= prior_total;

        conf.assign(w * kc * kc, s);
        for (const auto& a : labels.annotations())
            for (std::size_t k = 0; k < kc; ++k)
                conf[(a.worker * kc + k) * kc + a.label] += post[a.item * kc + k];
        for (std::size_t row = 0; row < w * kc; ++row) {
            double total = 0.0;
            for (std::size_t l = 0; l < kc; ++l) total += conf[row * kc + l];
            for (std::size_t l = 0; l < kc; ++l) conf[row * kc + l] /= total;
        }

        for (std::size_t k = 0; k < kc; ++k) log_prior[k] = std::log(prior[k]);
        for (std::size_t x = 0; x < conf.size(); ++x) log_conf[x] = std::log(conf[x]);

        // E-step
        double loglik = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            for (std::size_t k = 0; k < kc; ++k) log_joint[k] = log_prior[k];
            for (auto ai : labels.item_annotations(i)) {
                const auto& a = labels.annotation(ai);
                for (std::size_t k = 0; k < kc; ++k)
                    log_joint[k] += log_conf[(a.worker * kc + k) * kc + a.label];
            }
            const double top = *std::max_element(log_joint.begin(), log_joint.end());
            double z = 0.0;
            for (std::size_t k = 0; k < kc; ++k) z += std::exp(log_joint[k] - top);
            const double log_norm = top + std::log(z);
            loglik += log_norm;
            for (std::size_t k = 0; k < kc; ++k)
                next[i * kc + k] = std::exp(log_joint[k] - log_norm);
        }
        double log_dirichlet = 0.0;
        for (double lp : log_prior) log_dirichlet += s * lp;
        for (double lc : log_conf) log_dirichlet += s * lc;
        r.objective_trace.push_back(loglik + log_dirichlet);

        double change = 0.0;
        for (std::size_t x = 0; x < next.size(); ++x)
            change = std::max(change, std::abs(next[x] - post[x]));
        post.swap(next);
        r.iterations = it;
        if (change <= params.tolerance) {
            r.converged = true;
            break;
        }
    }

    r.labels.assign(n, 0);
    for (std::size_t i = 0; i < n; ++i) {
        std::size_t best = 0;
        for (std::size_t k = 1; k < kc; ++k)
            if (post[i * kc + k] > post[i * kc + best]) best = k;
        r.labels[i] = best;
    }
    return r;
}

}  // namespace bwa
