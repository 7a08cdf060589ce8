#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <iomanip>
#include <map>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "bwa/dataset.hpp"
#include "bwa/errors.hpp"

namespace bwa {

/// Fraction of truth-covered items predicted correctly.
inline double accuracy(std::span<const std::size_t> predictions, const GroundTruth& truth) {
    if (truth.empty()) throw ValidationError("ground truth is empty");
    std::size_t correct = 0;
    for (const auto& [item, k] : truth) {
        if (item >= predictions.size())
            throw ValidationError("truth item " + std::to_string(item) + " has no prediction");
        if (predictions[item] == k) ++correct;
    }
    return static_cast<double>(correct) / static_cast<double>(truth.size());
}

struct WilcoxonResult {
    std::size_t n_effective = 0;  ///< N_r, nonzero differences
    double w_minus = 0.0;         ///< rank sum where the method loses
    double w_plus = 0.0;
    double p_approx = 1.0;        ///< P(W- <= observed), normal approximation
    std::optional<double> p_exact;

    friend bool operator==(const WilcoxonResult&, const WilcoxonResult&) = default;
};

inline constexpr std::size_t kWilcoxonExactLimit = 25;

inline double standard_normal_cdf(double x) { return 0.5 * std::erfc(-x / std::sqrt(2.0)); }

/// Lower-tail normal approximation for W- with no continuity correction.
inline double wilcoxon_p_approx(double w_minus, std::size_t n_effective) {
    const double n = static_cast<double>(n_effective);
    const double mean = n * (n + 1.0) / 4.0;
    const double sd = std::sqrt(n * (n + 1.0) * (2.0 * n + 1.0) / 24.0);
    return standard_normal_cdf((w_minus - mean) / sd);
}

/// One-sided signed-rank test of "method beats the baseline", given
/// per-dataset differences (method - baseline). Zero differences are
/// discarded; tied magnitudes share their average rank.
inline WilcoxonResult wilcoxon_one_sided(std::span<const double> diffs) {
    std::vector<double> nz;
    for (double d : diffs)
        if (d != 0.0) nz.push_back(d);
    if (nz.empty()) throw ValidationError("all differences are zero; signed-rank test undefined");

    const std::size_t n = nz.size();
    std::vector<std::size_t> order(n);
    for (std::size_t x = 0; x < n; ++x) order[x] = x;
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return std::abs(nz[a]) < std::abs(nz[b]); });

    // Twice the average rank, kept integral for the exact distribution.
    std::vector<std::size_t> twice_rank(n);
    for (std::size_t lo = 0; lo < n;) {
        std::size_t hi = lo;
        while (hi + 1 < n && std::abs(nz[order[hi + 1]]) == std::abs(nz[order[lo]])) ++hi;
        for (std::size_t x = lo; x <= hi; ++x) twice_rank[order[x]] = lo + hi + 2;
        lo = hi + 1;
    }

    WilcoxonResult r;
    r.n_effective = n;
    std::size_t twice_minus = 0;
    std::size_t twice_total = 0;
    for (std::size_t x = 0; x < n; ++x) {
        twice_total += twice_rank[x];
        if (nz[x] < 0) twice_minus += twice_rank[x];
    }
    r.w_minus = twice_minus / 2.0;
    r.w_plus = (twice_total - twice_minus) / 2.0;
    r.p_approx = wilcoxon_p_approx(r.w_minus, n);

    if (n <= kWilcoxonExactLimit) {
        // Null distribution of 2*W- over all 2^n sign patterns, by counting.
        std::vector<double> ways(twice_total + 1, 0.0);
        ways[0] = 1.0;
        std::size_t reach = 0;
        for (auto t : twice_rank) {
            for (std::size_t s = reach + 1; s-- > 0;)
                if (ways[s] != 0.0) ways[s + t] += ways[s];
            reach += t;
        }
        double tail = 0.0;
        for (std::size_t s = 0; s <= twice_minus; ++s) tail += ways[s];
        r.p_exact = tail / std::ldexp(1.0, static_cast<int>(n));
    }
    return r;
}

// ---------------------------------------------------------------------------
// Benchmark report

/// One aggregation run to be scored.
struct RunInput {
    std::string method;
    std::string dataset;
    std::vector<std::size_t> predictions;
    GroundTruth truth;
    double runtime_seconds = 0.0;
};

struct RunRecord {
    std::string method;
    std::string dataset;
    double accuracy = 0.0;
    std::size_t items_evaluated = 0;
    double runtime_seconds = 0.0;

    friend bool operator==(const RunRecord&, const RunRecord&) = default;
};

struct MethodSummary {
    std::string method;
    double mean_accuracy = 0.0;
    std::size_t datasets = 0;
    /// Against the baseline; absent for the baseline itself or when every
    /// paired difference is zero.
    std::optional<WilcoxonResult> wilcoxon;

    friend bool operator==(const MethodSummary&, const MethodSummary&) = default;
};

struct EvalReport {
    std::string baseline = "mv";
    std::vector<RunRecord> records;      ///< sorted by (method, dataset)
    std::vector<MethodSummary> methods;  ///< sorted by method

    friend bool operator==(const EvalReport&, const EvalReport&) = default;
};

inline EvalReport build_report(const std::vector<RunInput>& runs, const std::string& baseline = "mv") {
    EvalReport rep;
    rep.baseline = baseline;
    std::map<std::string, std::map<std::string, RunRecord>> by_method;
    for (const auto& run : runs) {
        RunRecord rec{run.method, run.dataset, accuracy(run.predictions, run.truth), run.truth.size(),
                      run.runtime_seconds};
        if (!by_method[run.method].emplace(run.dataset, rec).second)
            throw ValidationError("duplicate run for method '" + run.method + "' on dataset '" +
                                  run.dataset + "'");
    }
    auto base = by_method.find(baseline);
    if (base == by_method.end())
        throw ValidationError("baseline method '" + baseline + "' missing from runs");

    for (const auto& [method, datasets] : by_method) {
        MethodSummary sum;
        sum.method = method;
        sum.datasets = datasets.size();
        double total = 0.0;
        std::vector<double> diffs;
        for (const auto& [name, rec] : datasets) {
            rep.records.push_back(rec);
            total += rec.accuracy;
            if (method == baseline) continue;
            auto b = base->second.find(name);
            if (b != base->second.end()) diffs.push_back(rec.accuracy - b->second.accuracy);
        }
        sum.mean_accuracy = total / static_cast<double>(datasets.size());
        if (method != baseline &&
            std::any_of(diffs.begin(), diffs.end(), [](double d) { return d != 0.0; }))
            sum.wilcoxon = wilcoxon_one_sided(diffs);
        rep.methods.push_back(std::move(sum));
    }
    return rep;
}

inline nlohmann::json to_json(const EvalReport& rep) {
    nlohmann::json j;
    j["baseline"] = rep.baseline;
    j["runs"] = nlohmann::json::array();
    for (const auto& r : rep.records)
        j["runs"].push_back({{"method", r.method},
                             {"dataset", r.dataset},
                             {"accuracy", r.accuracy},
                             {"items", r.items_evaluated},
                             {"runtime_seconds", r.runtime_seconds}});
    j["methods"] = nlohmann::json::array();
    for (const auto& m : rep.methods) {
        nlohmann::json e{{"method", m.method}, {"mean_accuracy", m.mean_accuracy},
                         {"datasets", m.datasets}};
        if (m.wilcoxon) {
            const auto& w = *m.wilcoxon;
            e["wilcoxon"] = {{"n_r", w.n_effective},
                             {"w_minus", w.w_minus},
                             {"w_plus", w.w_plus},
                             {"p_approx", w.p_approx},
                             {"p_exact", w.p_exact ? nlohmann::json(*w.p_exact) : nlohmann::json()}};
        } else {
            e["wilcoxon"] = nullptr;
        }
        j["methods"].push_back(std::move(e));
    }
    return j;
}

inline EvalReport report_from_json(const nlohmann::json& j) {
    EvalReport rep;
    rep.baseline = j.at("baseline").get<std::string>();
    for (const auto& r : j.at("runs"))
        rep.records.push_back({r.at("method").get<std::string>(), r.at("dataset").get<std::string>(),
                               r.at("accuracy").get<double>(), r.at("items").get<std::size_t>(),
                               r.at("runtime_seconds").get<double>()});
    for (const auto& m : j.at("methods")) {
        MethodSummary s;
        s.method = m.at("method").get<std::string>();
        s.mean_accuracy = m.at("mean_accuracy").get<double>();
        s.datasets = m.at("datasets").get<std::size_t>();
        if (const auto& w = m.at("wilcoxon"); !w.is_null()) {
            WilcoxonResult wr;
            wr.n_effective = w.at("n_r").get<std::size_t>();
            wr.w_minus = w.at("w_minus").get<double>();
            wr.w_plus = w.at("w_plus").get<double>();
            wr.p_approx = w.at("p_approx").get<double>();
            if (!w.at("p_exact").is_null()) wr.p_exact = w.at("p_exact").get<double>();
            s.wilcoxon = wr;
        }
        rep.methods.push_back(std::move(s));
    }
    return rep;
}

/// Aligned plain-text rendering: per-run accuracies, then the per-method
/// comparison against the baseline.
inline std::string render_table(const EvalReport& rep) {
    std::size_t mw = 6, dw = 7;
    for (const auto& r : rep.records) {
        mw = std::max(mw, r.method.size());
        dw = std::max(dw, r.dataset.size());
    }
    std::ostringstream os;
    os << std::left << std::setw(static_cast<int>(mw)) << "method" << "  "
       << std::setw(static_cast<int>(dw)) << "dataset" << "  " << std::right << std::setw(8)
       << "accuracy" << "  " << std::setw(7) << "items" << "  " << std::setw(10) << "runtime_s"
       << '\n';
    os << std::fixed;
    for (const auto& r : rep.records)
        os << std::left << std::setw(static_cast<int>(mw)) << r.method << "  "
           << std::setw(static_cast<int>(dw)) << r.dataset << "  " << std::right << std::setw(8)
           << std::setprecision(4) << r.accuracy << "  " << std::setw(7) << r.items_evaluated
           << "  " << std::setw(10) << std::setprecision(4) << r.runtime_seconds << '\n';

    os << '\n'
       << std::left << std::setw(static_cast<int>(mw)) << "method" << "  " << std::right
       << std::setw(9) << "mean_acc" << "  " << std::setw(4) << "N_r" << "  " << std::setw(6)
       << "W-" << "  " << std::setw(8) << "p_approx" << "  " << std::setw(8) << "p_exact" << '\n';
    for (const auto& m : rep.methods) {
        os << std::left << std::setw(static_cast<int>(mw)) << m.method << "  " << std::right
           << std::setw(9) << std::setprecision(4) << m.mean_accuracy;
        if (m.wilcoxon) {
            const auto& w = *m.wilcoxon;
            os << "  " << std::setw(4) << w.n_effective << "  " << std::setw(6)
               << std::setprecision(1) << w.w_minus << "  " << std::setw(8)
               << std::setprecision(4) << w.p_approx << "  " << std::setw(8);
            if (w.p_exact)
                os << *w.p_exact;
            else
                os << "-";
        }
        os << '\n';
    }
    return os.str();
}

}  // namespace bwa
