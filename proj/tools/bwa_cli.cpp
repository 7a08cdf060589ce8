// bwa: command-line front end for crowd label aggregation.
//
//   bwa aggregate --labels answer.csv --method bwa --profile av15-adjusted --out pred.csv
//   bwa eval      --labels answer.csv --truth truth.csv --method mv
//   bwa bench     --data datasets/ --methods mv,ds,bwa:av30-original,bwa:av15-adjusted --out report/
//   bwa sweep     --labels answer.csv --truth truth.csv --grid 1,5,10,15,30 --out sweep.csv
//   bwa synth     --items 1000 --workers 50 --k 2 --redundancy 5 --seed 7 --out data/

#include <chrono>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "bwa/bwa.hpp"

namespace fs = std::filesystem;

namespace {

struct BwaFlags {
    std::string profile = "av15-adjusted";
    std::optional<double> a_v;
    std::optional<double> b_v;
    std::optional<std::string> epsilon_strategy;
    std::optional<double> lambda;
    std::optional<double> tolerance;
    std::optional<int> max_iters;
};

bwa::HyperParams profile_params(const std::string& profile) {
    if (profile == "av30-original") return bwa::HyperParams::av30_original();
    if (profile == "av15-adjusted" || profile == "custom") return bwa::HyperParams::av15_adjusted();
    throw bwa::ValidationError("unknown BWA profile '" + profile + "'");
}

bwa::HyperParams resolve_params(const BwaFlags& f, const std::string& profile) {
    auto hp = profile_params(profile);
    if (f.a_v) hp.a_v = *f.a_v;
    if (f.b_v) {
        hp.b_v = *f.b_v;
        hp.epsilon_strategy = bwa::EpsilonStrategy::fixed_prior;
    }
    if (f.epsilon_strategy) {
        auto s = bwa::parse_epsilon_strategy(*f.epsilon_strategy);
        if (!s) throw bwa::ValidationError("unknown epsilon strategy '" + *f.epsilon_strategy + "'");
        hp.epsilon_strategy = *s;
    }
    if (f.lambda) hp.lambda = *f.lambda;
    if (f.tolerance) hp.tolerance = *f.tolerance;
    if (f.max_iters) hp.max_iters = *f.max_iters;
    hp.validate();
    return hp;
}

struct Method {
    enum class Kind { mv, ds, bwa };
    std::string name;
    Kind kind = Kind::mv;
    bwa::HyperParams hp;
};

/// "mv", "ds", "bwa" (flag profile) or "bwa:<profile>".
Method parse_method(const std::string& token, const BwaFlags& flags) {
    Method m;
    m.name = token;
    if (token == "mv") {
        m.kind = Method::Kind::mv;
    } else if (token == "ds") {
        m.kind = Method::Kind::ds;
    } else if (token == "bwa") {
        m.kind = Method::Kind::bwa;
        m.hp = resolve_params(flags, flags.profile);
    } else if (token.starts_with("bwa:")) {
        m.kind = Method::Kind::bwa;
        m.hp = resolve_params(flags, token.substr(4));
    } else {
        throw CLI::ValidationError("--method", "unknown method '" + token + "' (mv, ds, bwa, bwa:<profile>)");
    }
    return m;
}

struct Outcome {
    std::vector<std::size_t> labels;
    std::optional<bwa::MultiClassResult> bwa;
    std::optional<bwa::DawidSkeneResult> ds;
    double seconds = 0.0;
};

Outcome run(const Method& m, const bwa::LabelMatrix& labels) {
    Outcome out;
    const auto start = std::chrono::steady_clock::now();
    switch (m.kind) {
        case Method::Kind::mv: out.labels = bwa::majority_vote(labels).labels; break;
        case Method::Kind::ds:
            out.ds = bwa::dawid_skene(labels);
            out.labels = out.ds->labels;
            break;
        case Method::Kind::bwa:
            out.bwa = bwa::aggregate_multiclass(labels, m.hp, /*parallel=*/true);
            out.labels = out.bwa->hard_labels;
            break;
    }
    out.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    return out;
}

std::ofstream open_output(const fs::path& path) {
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    std::ofstream out(path);
    if (!out) throw bwa::ValidationError("cannot write '" + path.string() + "'");
    return out;
}

std::string fmt(double x) {
    std::ostringstream os;
    os << std::setprecision(17) << x;
    return os.str();
}

void write_predictions(std::ostream& out, const bwa::LabelMatrix& labels,
                       const std::vector<std::size_t>& pred) {
    out << "question,label\n";
    for (std::size_t i = 0; i < pred.size(); ++i)
        out << labels.item_id(i) << ',' << labels.class_name(pred[i]) << '\n';
}

/// Mean E_q[v_j] over the K one-vs-rest problems.
std::vector<double> mean_worker_weights(const bwa::MultiClassResult& r) {
    std::vector<double> w(r.per_class.front().worker_weights.size(), 0.0);
    for (const auto& c : r.per_class)
        for (std::size_t j = 0; j < w.size(); ++j) w[j] += c.worker_weights[j];
    for (auto& x : w) x /= static_cast<double>(r.per_class.size());
    return w;
}

nlohmann::json bwa_summary(const bwa::MultiClassResult& r, const bwa::HyperParams& hp) {
    nlohmann::json j;
    j["lambda"] = hp.lambda;
    j["a_v"] = hp.a_v;
    j["b_v"] = r.b_v;
    j["epsilon_strategy"] = std::string(bwa::to_string(hp.epsilon_strategy));
    j["epsilon_raw"] = r.epsilon_raw;
    j["epsilon"] = r.epsilon;
    j["tolerance"] = hp.tolerance;
    j["max_iters"] = hp.max_iters;
    bool converged = true;
    int iterations = 0;
    double objective = 0.0;
    j["classes"] = nlohmann::json::array();
    for (std::size_t k = 0; k < r.per_class.size(); ++k) {
        const auto& c = r.per_class[k];
        converged = converged && c.converged;
        iterations = std::max(iterations, c.iterations);
        objective += c.nll_trace.back();
        j["classes"].push_back({{"class", k},
                                {"iterations", c.iterations},
                                {"converged", c.converged},
                                {"mu", c.mu},
                                {"final_objective", c.nll_trace.back()}});
    }
    j["iterations"] = iterations;
    j["converged"] = converged;
    j["final_objective"] = objective;
    return j;
}

fs::path sibling(const fs::path& out, const std::string& suffix) {
    auto p = out;
    p.replace_extension();
    return p.string() + suffix;
}

// ---------------------------------------------------------------------------

int cmd_aggregate(const std::string& labels_path, std::optional<std::size_t> k,
                  const std::string& method_name, const BwaFlags& flags, const std::string& out_path) {
    const auto method = parse_method(method_name, flags);
    const auto labels = bwa::load_labels(labels_path, k);
    const auto result = run(method, labels);
    std::cerr << "method " << method.name << ": " << labels.num_items() << " items, "
              << labels.num_workers() << " workers, " << labels.size() << " labels, "
              << std::fixed << std::setprecision(3) << result.seconds << " s\n";

    if (out_path.empty()) {
        write_predictions(std::cout, labels, result.labels);
        return 0;
    }
    auto pred = open_output(out_path);
    write_predictions(pred, labels, result.labels);

    if (result.bwa) {
        const auto weights = mean_worker_weights(*result.bwa);
        auto w = open_output(sibling(out_path, ".workers.csv"));
        w << "worker,weight,accuracy\n";
        for (std::size_t j = 0; j < weights.size(); ++j)
            w << labels.worker_id(j) << ',' << fmt(weights[j]) << ','
              << fmt(bwa::worker_accuracy(weights[j])) << '\n';
        const auto summary = bwa_summary(*result.bwa, method.hp);
        open_output(sibling(out_path, ".summary.json")) << summary.dump(2) << '\n';
        if (!summary["converged"].get<bool>())
            std::cerr << "warning: EM hit the iteration cap before converging\n";
    }
    return 0;
}

std::vector<std::size_t> read_predictions(const std::string& path, const bwa::LabelMatrix& labels) {
    std::ifstream in(path);
    if (!in) throw bwa::ValidationError("cannot open '" + path + "'");
    std::vector<std::size_t> pred(labels.num_items(), 0);
    bwa::detail::read_csv(in, "question,label", 2, [&](const auto& f, std::size_t line) {
        auto item = labels.find_item(f[0]);
        auto k = labels.find_class(f[1]);
        if (!item || !k)
            throw bwa::ValidationError("line " + std::to_string(line) + ": unknown question or label");
        pred[*item] = *k;
    });
    return pred;
}

int cmd_eval(const std::string& labels_path, const std::string& truth_path, std::optional<std::size_t> k,
             const std::string& method_name, const std::string& predictions_path, const BwaFlags& flags) {
    const auto labels = bwa::load_labels(labels_path, k);
    const auto truth = bwa::load_truth(truth_path, labels);
    std::vector<std::size_t> pred;
    std::string name = "predictions";
    if (!predictions_path.empty()) {
        pred = read_predictions(predictions_path, labels);
    } else {
        const auto method = parse_method(method_name, flags);
        pred = run(method, labels).labels;
        name = method.name;
    }
    std::cout << "method,items,accuracy\n"
              << name << ',' << truth.size() << ',' << fmt(bwa::accuracy(pred, truth)) << '\n';
    return 0;
}

struct DatasetFiles {
    std::string name;
    fs::path labels, truth;
};

std::vector<DatasetFiles> discover(const fs::path& root) {
    if (!fs::is_directory(root)) throw bwa::ValidationError("'" + root.string() + "' is not a directory");
    std::vector<fs::path> dirs;
    for (const auto& e : fs::directory_iterator(root))
        if (e.is_directory()) dirs.push_back(e.path());
    std::sort(dirs.begin(), dirs.end());
    std::vector<DatasetFiles> out;
    for (const auto& d : dirs) {
        DatasetFiles f{d.filename().string(), {}, d / "truth.csv"};
        for (const char* candidate : {"labels.csv", "answer.csv"})
            if (fs::exists(d / candidate)) {
                f.labels = d / candidate;
                break;
            }
        if (f.labels.empty()) {
            std::cerr << "warning: skipping '" << f.name << "': no labels.csv or answer.csv\n";
            continue;
        }
        if (!fs::exists(f.truth)) {
            std::cerr << "warning: skipping '" << f.name << "': no truth.csv\n";
            continue;
        }
        out.push_back(std::move(f));
    }
    if (out.empty()) throw bwa::ValidationError("no usable datasets under '" + root.string() + "'");
    return out;
}

int cmd_bench(const std::string& data_dir, const std::vector<std::string>& method_names,
              std::optional<std::size_t> k, const BwaFlags& flags, const std::string& out_dir) {
    std::vector<Method> methods;
    for (const auto& m : method_names) methods.push_back(parse_method(m, flags));
    if (std::none_of(methods.begin(), methods.end(), [](const Method& m) { return m.name == "mv"; }))
        methods.insert(methods.begin(), parse_method("mv", flags));

    std::vector<bwa::RunInput> runs;
    for (const auto& ds : discover(data_dir)) {
        const auto labels = bwa::load_labels(ds.labels.string(), k);
        const auto truth = bwa::load_truth(ds.truth.string(), labels);
        if (truth.empty()) {
            std::cerr << "warning: skipping '" << ds.name << "': empty truth\n";
            continue;
        }
        for (const auto& m : methods) {
            auto r = run(m, labels);
            std::cerr << ds.name << " / " << m.name << ": " << std::fixed << std::setprecision(3)
                      << r.seconds << " s\n";
            runs.push_back({m.name, ds.name, std::move(r.labels), truth, r.seconds});
        }
    }
    const auto report = bwa::build_report(runs, "mv");
    const auto table = bwa::render_table(report);
    std::cout << table;
    if (!out_dir.empty()) {
        open_output(fs::path(out_dir) / "report.json") << bwa::to_json(report).dump(2) << '\n';
        open_output(fs::path(out_dir) / "report.txt") << table;
    }
    return 0;
}

int cmd_sweep(const std::string& labels_path, const std::string& truth_path, std::optional<std::size_t> k,
              const std::vector<double>& grid, const BwaFlags& flags, const std::string& out_path) {
    for (double a : grid)
        if (!(a > 0.0)) throw bwa::ValidationError("a_v grid values must be > 0");
    const auto labels = bwa::load_labels(labels_path, k);
    const auto truth = bwa::load_truth(truth_path, labels);

    std::ostringstream rows;
    rows << "a_v,strategy,b_v,accuracy\n";
    for (double a : grid)
        for (auto strategy : {bwa::EpsilonStrategy::original, bwa::EpsilonStrategy::adjusted}) {
            auto hp = resolve_params(flags, "custom");
            hp.a_v = a;
            hp.epsilon_strategy = strategy;
            const auto r = bwa::aggregate_multiclass(labels, hp, true);
            rows << fmt(a) << ',' << bwa::to_string(strategy) << ',' << fmt(r.b_v) << ','
                 << fmt(bwa::accuracy(r.hard_labels, truth)) << '\n';
        }
    if (out_path.empty())
        std::cout << rows.str();
    else
        open_output(out_path) << rows.str();
    return 0;
}

struct SynthFlags {
    std::size_t items = 100, workers = 10, classes = 2, redundancy = 5;
    double acc_min = 0.55, acc_max = 0.95;
    std::uint64_t seed = 0;
};

int cmd_synth(const SynthFlags& f, const std::string& out_dir) {
    bwa::SynthSpec spec;
    spec.num_items = f.items;
    spec.num_workers = f.workers;
    spec.num_classes = f.classes;
    spec.redundancy = f.redundancy;
    spec.workers = bwa::SymmetricAccuracy{f.acc_min, f.acc_max};
    spec.seed = f.seed;
    const auto data = bwa::generate(spec);

    std::cout << "items=" << f.items << " workers=" << f.workers << " k=" << f.classes
              << " redundancy=" << f.redundancy << " acc=[" << f.acc_min << "," << f.acc_max
              << "] seed=" << f.seed << '\n';
    const fs::path dir(out_dir);
    auto labels = open_output(dir / "labels.csv");
    bwa::write_labels(labels, data.labels);
    auto truth = open_output(dir / "truth.csv");
    bwa::write_truth(truth, data.labels, data.truth);
    auto workers = open_output(dir / "workers.csv");
    workers << "worker,accuracy\n";
    for (std::size_t j = 0; j < data.worker_accuracy.size(); ++j)
        workers << data.labels.worker_id(j) << ',' << fmt(data.worker_accuracy[j]) << '\n';
    return 0;
}

void add_bwa_flags(CLI::App* cmd, BwaFlags& f) {
    cmd->add_option("--profile", f.profile, "BWA preset")
        ->check(CLI::IsMember({"av30-original", "av15-adjusted", "custom"}));
    cmd->add_option("--a-v", f.a_v, "prior number of items labelled per worker")->check(CLI::PositiveNumber);
    cmd->add_option("--b-v", f.b_v, "prior number of mistakes (implies --epsilon-strategy fixed)")
        ->check(CLI::PositiveNumber);
    cmd->add_option("--epsilon-strategy", f.epsilon_strategy, "how b_v is derived")
        ->check(CLI::IsMember({"fixed", "original", "adjusted"}));
    cmd->add_option("--lambda", f.lambda, "prior precision of item scores")->check(CLI::PositiveNumber);
    cmd->add_option("--tolerance", f.tolerance, "relative convergence tolerance")->check(CLI::PositiveNumber);
    cmd->add_option("--max-iters", f.max_iters, "EM iteration cap")->check(CLI::Range(1, 1000000));
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Crowd label aggregation with Bayesian weighted averaging"};
    app.require_subcommand(1);

    BwaFlags flags;
    std::string labels_path, truth_path, out_path, method = "bwa", predictions_path, data_dir;
    std::optional<std::size_t> k;
    std::vector<std::string> methods{"mv", "ds", "bwa"};
    std::vector<double> grid{1, 2, 5, 10, 15, 20, 30, 40, 50};
    SynthFlags synth;

    auto* aggregate = app.add_subcommand("aggregate", "infer consensus labels");
    aggregate->add_option("--labels", labels_path, "question,worker,answer file")->required()->check(CLI::ExistingFile);
    aggregate->add_option("--method", method, "mv, ds, bwa or bwa:<profile>");
    aggregate->add_option("--k", k, "number of classes (at least the number present)");
    aggregate->add_option("--out", out_path, "prediction file (stdout if omitted)");
    add_bwa_flags(aggregate, flags);

    auto* eval = app.add_subcommand("eval", "accuracy of a method or prediction file");
    eval->add_option("--labels", labels_path)->required()->check(CLI::ExistingFile);
    eval->add_option("--truth", truth_path)->required()->check(CLI::ExistingFile);
    eval->add_option("--method", method);
    eval->add_option("--predictions", predictions_path, "question,label file to score instead")
        ->check(CLI::ExistingFile);
    eval->add_option("--k", k);
    add_bwa_flags(eval, flags);

    auto* bench = app.add_subcommand("bench", "compare methods over a directory of datasets");
    bench->add_option("--data", data_dir, "directory with one subdirectory per dataset")->required();
    bench->add_option("--methods", methods, "comma-separated method list")->delimiter(',');
    bench->add_option("--k", k);
    bench->add_option("--out", out_path, "directory for report.json and report.txt");
    add_bwa_flags(bench, flags);

    auto* sweep = app.add_subcommand("sweep", "accuracy over an a_v grid for both epsilon strategies");
    sweep->add_option("--labels", labels_path)->required()->check(CLI::ExistingFile);
    sweep->add_option("--truth", truth_path)->required()->check(CLI::ExistingFile);
    sweep->add_option("--grid", grid, "comma-separated a_v values")->delimiter(',');
    sweep->add_option("--k", k);
    sweep->add_option("--out", out_path, "CSV output (stdout if omitted)");
    add_bwa_flags(sweep, flags);

    auto* gen = app.add_subcommand("synth", "generate a synthetic crowd dataset");
    gen->add_option("--items", synth.items)->check(CLI::PositiveNumber);
    gen->add_option("--workers", synth.workers)->check(CLI::PositiveNumber);
    gen->add_option("--k", synth.classes)->check(CLI::Range(2, 1 << 16));
    gen->add_option("--redundancy", synth.redundancy)->check(CLI::PositiveNumber);
    gen->add_option("--acc-min", synth.acc_min)->check(CLI::Range(0.0, 1.0));
    gen->add_option("--acc-max", synth.acc_max)->check(CLI::Range(0.0, 1.0));
    gen->add_option("--seed", synth.seed);
    gen->add_option("--out", out_path, "output directory")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        return app.exit(e);
    }

    try {
        if (*aggregate) return cmd_aggregate(labels_path, k, method, flags, out_path);
        if (*eval) return cmd_eval(labels_path, truth_path, k, method, predictions_path, flags);
        if (*bench) return cmd_bench(data_dir, methods, k, flags, out_path);
        if (*sweep) return cmd_sweep(labels_path, truth_path, k, grid, flags, out_path);
        if (*gen) return cmd_synth(synth, out_path);
    } catch (const CLI::ValidationError& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 1;
    }
    return 0;
}
