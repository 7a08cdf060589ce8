#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <string>
#include <variant>
#include <vector>

#include "bwa/dataset.hpp"
#include "bwa/errors.hpp"

namespace bwa {

/// Counter-based generator: draw n (1-based) is the SplitMix64 finaliser
/// applied to seed + n * 0x9E3779B97F4A7C15. Doubles take the top 53 bits
/// times 2^-53; bounded integers are floor(u * bound). Easy to reproduce in
/// any language.
class CounterRng {
public:
    explicit CounterRng(std::uint64_t seed) : seed_(seed) {}

    std::uint64_t next_u64() {
        std::uint64_t z = seed_ + (++counter_) * 0x9E3779B97F4A7C15ULL;
        z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
        z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
        return z ^ (z >> 31);
    }

    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    std::size_t below(std::size_t bound) {
        return static_cast<std::size_t>(uniform() * static_cast<double>(bound));
    }

    /// Index drawn from a probability vector by inverse CDF.
    std::size_t categorical(const double* probs, std::size_t n) {
        const double u = uniform();
        double acc = 0.0;
        for (std::size_t k = 0; k + 1 < n; ++k) {
            acc += probs[k];
            if (u < acc) return k;
        }
        return n - 1;
    }

    std::uint64_t draws() const noexcept { return counter_; }

private:
    std::uint64_t seed_;
    std::uint64_t counter_ = 0;
};

/// Workers answer correctly with an accuracy drawn from U[min, max] and
/// otherwise pick one of the other K-1 classes uniformly.
struct SymmetricAccuracy {
    double min = 0.55;
    double max = 0.95;
};

/// Explicit K x K row-stochastic matrix per worker, row = true class.
struct ExplicitConfusion {
    std::vector<std::vector<double>> matrices;  ///< worker-major, each K*K row-major
};

struct SynthSpec {
    std::size_t num_items = 100;
    std::size_t num_workers = 10;
    std::size_t num_classes = 2;
    std::size_t redundancy = 5;
    std::vector<double> class_prior;  ///< empty means uniform
    std::variant<SymmetricAccuracy, ExplicitConfusion> workers = SymmetricAccuracy{};
    std::uint64_t seed = 0;
};

struct SyntheticData {
    LabelMatrix labels;
    GroundTruth truth;
    /// Worker-major K x K confusion matrices actually used.
    std::vector<std::vector<double>> confusion;
    /// Mean diagonal of each worker's confusion matrix (the drawn accuracy
    /// in the symmetric model).
    std::vector<double> worker_accuracy;
};

namespace detail {

inline void check_distribution(const std::vector<double>& p, std::string_view what) {
    double total = 0.0;
    for (double x : p) {
        if (!(x >= 0.0)) throw ValidationError(std::string(what) + " has a negative entry");
        total += x;
    }
    if (std::abs(total - 1.0) > 1e-9) throw ValidationError(std::string(what) + " does not sum to 1");
}

}  // namespace detail

/// Draw order: worker accuracies (symmetric model), then per item: truth,
/// r distinct workers (rejection sampling), one label per assigned worker.
inline SyntheticData generate(const SynthSpec& spec) {
    const std::size_t n = spec.num_items, w = spec.num_workers, kc = spec.num_classes;
    if (kc < 2) throw ValidationError("need at least 2 classes");
    if (w == 0 || n == 0) throw ValidationError("need at least one item and one worker");
    if (spec.redundancy == 0) throw ValidationError("redundancy must be >= 1");
    if (spec.redundancy > w)
        throw ValidationError("redundancy " + std::to_string(spec.redundancy) + " exceeds " +
                              std::to_string(w) + " workers");

    std::vector<double> prior = spec.class_prior;
    if (prior.empty()) prior.assign(kc, 1.0 / static_cast<double>(kc));
    if (prior.size() != kc) throw ValidationError("class prior has wrong length");
    detail::check_distribution(prior, "class prior");

    CounterRng rng(spec.seed);
    SyntheticData out;
    out.confusion.resize(w);

    if (const auto* sym = std::get_if<SymmetricAccuracy>(&spec.workers)) {
        if (!(0.0 <= sym->min && sym->min <= sym->max && sym->max <= 1.0))
            throw ValidationError("accuracy interval must satisfy 0 <= min <= max <= 1");
        for (std::size_t j = 0; j < w; ++j) {
            const double acc = rng.uniform(sym->min, sym->max);
            const double off = (1.0 - acc) / static_cast<double>(kc - 1);
            auto& m = out.confusion[j];
            m.assign(kc * kc, off);
            for (std::size_t k = 0; k < kc; ++k) m[k * kc + k] = acc;
        }
    } else {
        const auto& ex = std::get<ExplicitConfusion>(spec.workers);
        if (ex.matrices.size() != w) throw ValidationError("need one confusion matrix per worker");
        for (std::size_t j = 0; j < w; ++j) {
            if (ex.matrices[j].size() != kc * kc)
                throw ValidationError("confusion matrix " + std::to_string(j) + " is not K x K");
            for (std::size_t k = 0; k < kc; ++k)
                detail::check_distribution(
                    {ex.matrices[j].begin() + static_cast<std::ptrdiff_t>(k * kc),
                     ex.matrices[j].begin() + static_cast<std::ptrdiff_t>((k + 1) * kc)},
                    "confusion matrix row");
            out.confusion[j] = ex.matrices[j];
        }
    }
    out.worker_accuracy.resize(w);
    for (std::size_t j = 0; j < w; ++j) {
        double diag = 0.0;
        for (std::size_t k = 0; k < kc; ++k) diag += out.confusion[j][k * kc + k];
        out.worker_accuracy[j] = diag / static_cast<double>(kc);
    }

    std::vector<Annotation> annotations;
    annotations.reserve(n * spec.redundancy);
    std::vector<std::size_t> chosen;
    std::vector<std::uint8_t> taken(w, 0);
    for (std::size_t i = 0; i < n; ++i) {
        const std::size_t truth = rng.categorical(prior.data(), kc);
        out.truth.emplace(i, truth);
        chosen.clear();
        while (chosen.size() < spec.redundancy) {
            const std::size_t j = rng.below(w);
            if (taken[j]) continue;
            taken[j] = 1;
            chosen.push_back(j);
        }
        for (auto j : chosen) {
            taken[j] = 0;
            const std::size_t label = rng.categorical(out.confusion[j].data() + truth * kc, kc);
            annotations.push_back({i, j, label});
        }
    }
    out.labels = LabelMatrix::from_annotations(n, w, kc, std::move(annotations));
    return out;
}

}  // namespace bwa
