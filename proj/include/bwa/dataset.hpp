#pragma once

// Sparse crowd-label storage plus the CSV formats used by the public truth
// inference benchmark collections:
//
//   labels: question,worker,answer
//   truth:  question,truth

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <fstream>
#include <istream>
#include <map>
#include <optional>
#include <ostream>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

#include "bwa/errors.hpp"

namespace bwa {

/// One worker judgement: worker `worker` said item `item` belongs to class `label`.
struct Annotation {
    std::size_t item = 0;
    std::size_t worker = 0;
    std::size_t label = 0;

    friend bool operator==(const Annotation&, const Annotation&) = default;
};

/// External identifiers for the dense indices of a LabelMatrix.
struct IdMaps {
    std::vector<std::string> items;
    std::vector<std::string> workers;
    std::vector<std::string> classes;
    /// Class names are the decimal class indices themselves.
    bool integer_classes = true;

    friend bool operator==(const IdMaps&, const IdMaps&) = default;
};

/// Item index -> true class, defined on a subset of items.
using GroundTruth = std::map<std::size_t, std::size_t>;

/// Immutable sparse item x worker label store with per-item (W_i) and
/// per-worker (N_j) adjacency. Adjacency lists hold annotation indices in
/// ascending annotation order, so traversal order follows input row order
/// and does not depend on how ids were numbered.
class LabelMatrix {
public:
    LabelMatrix() = default;

    /// Validates and indexes `annotations`. Missing id names are generated
    /// ("q<i>", "w<j>", "<k>").
    static LabelMatrix from_annotations(std::size_t num_items, std::size_t num_workers,
                                        std::size_t num_classes,
                                        std::vector<Annotation> annotations, IdMaps ids = {}) {
        LabelMatrix m;
        m.num_items_ = num_items;
        m.num_workers_ = num_workers;
        m.num_classes_ = num_classes;
        m.annotations_ = std::move(annotations);
        m.ids_ = std::move(ids);
        m.fill_default_ids();
        m.validate();
        m.build_index();
        return m;
    }

    std::size_t num_items() const noexcept { return num_items_; }
    std::size_t num_workers() const noexcept { return num_workers_; }
    std::size_t num_classes() const noexcept { return num_classes_; }
    std::size_t size() const noexcept { return annotations_.size(); }
    bool empty() const noexcept { return annotations_.empty(); }

    std::span<const Annotation> annotations() const noexcept { return annotations_; }
    const Annotation& annotation(std::size_t a) const { return annotations_[a]; }

    /// Annotation indices for item i (the worker set W_i).
    std::span<const std::size_t> item_annotations(std::size_t i) const {
        return {by_item_.data() + item_offsets_[i], item_offsets_[i + 1] - item_offsets_[i]};
    }
    /// Annotation indices for worker j (the item set N_j).
    std::span<const std::size_t> worker_annotations(std::size_t j) const {
        return {by_worker_.data() + worker_offsets_[j],
                worker_offsets_[j + 1] - worker_offsets_[j]};
    }

    const IdMaps& ids() const noexcept { return ids_; }
    const std::string& item_id(std::size_t i) const { return ids_.items[i]; }
    const std::string& worker_id(std::size_t j) const { return ids_.workers[j]; }
    const std::string& class_name(std::size_t k) const { return ids_.classes[k]; }

    std::optional<std::size_t> find_item(std::string_view id) const {
        return lookup(item_lookup_, id);
    }
    std::optional<std::size_t> find_worker(std::string_view id) const {
        return lookup(worker_lookup_, id);
    }
    /// Maps an answer string onto a class index using this matrix's label map.
    std::optional<std::size_t> find_class(std::string_view name) const {
        if (ids_.integer_classes) {
            auto v = parse_index(name);
            if (!v || *v >= num_classes_) return std::nullopt;
            return v;
        }
        return lookup(class_lookup_, name);
    }

    friend bool operator==(const LabelMatrix& a, const LabelMatrix& b) {
        return a.num_items_ == b.num_items_ && a.num_workers_ == b.num_workers_ &&
               a.num_classes_ == b.num_classes_ && a.annotations_ == b.annotations_ &&
               a.ids_ == b.ids_;
    }

    /// Non-negative decimal integer, or nullopt.
    static std::optional<std::size_t> parse_index(std::string_view s) {
        if (s.empty() || s.size() > 18) return std::nullopt;
        std::size_t v = 0;
        for (char c : s) {
            if (c < '0' || c > '9') return std::nullopt;
            v = v * 10 + static_cast<std::size_t>(c - '0');
        }
        return v;
    }

private:
    using Lookup = std::unordered_map<std::string, std::size_t>;

    static std::optional<std::size_t> lookup(const Lookup& map, std::string_view key) {
        auto it = map.find(std::string(key));
        if (it == map.end()) return std::nullopt;
        return it->second;
    }

    void fill_default_ids() {
        auto fill = [](std::vector<std::string>& names, std::size_t n, std::string_view prefix) {
            for (std::size_t x = names.size(); x < n; ++x)
                names.push_back(std::string(prefix) + std::to_string(x));
        };
        fill(ids_.items, num_items_, "q");
        fill(ids_.workers, num_workers_, "w");
        fill(ids_.classes, num_classes_, "");
    }

    void validate() {
        if (ids_.items.size() != num_items_ || ids_.workers.size() != num_workers_ ||
            ids_.classes.size() != num_classes_)
            throw ValidationError("id map sizes do not match matrix dimensions");
        for (const auto& a : annotations_) {
            if (a.item >= num_items_) throw ValidationError("item index out of range");
            if (a.worker >= num_workers_) throw ValidationError("worker index out of range");
            if (a.label >= num_classes_)
                throw ValidationError("label " + std::to_string(a.label) +
                                      " outside [0, " + std::to_string(num_classes_) + ")");
        }
        auto index_names = [](const std::vector<std::string>& names, Lookup& out,
                              std::string_view what) {
            out.reserve(names.size());
            for (std::size_t x = 0; x < names.size(); ++x)
                if (!out.emplace(names[x], x).second)
                    throw ValidationError("duplicate " + std::string(what) + " id '" + names[x] +
                                          "'");
        };
        index_names(ids_.items, item_lookup_, "item");
        index_names(ids_.workers, worker_lookup_, "worker");
        index_names(ids_.classes, class_lookup_, "class");
    }

    void build_index() {
        auto bucket = [this](std::size_t n, auto key, std::vector<std::size_t>& offsets,
                             std::vector<std::size_t>& order) {
            offsets.assign(n + 1, 0);
            for (const auto& a : annotations_) ++offsets[key(a) + 1];
            for (std::size_t x = 0; x < n; ++x) offsets[x + 1] += offsets[x];
            order.resize(annotations_.size());
            std::vector<std::size_t> cursor(offsets.begin(), offsets.end() - 1);
            for (std::size_t a = 0; a < annotations_.size(); ++a)
                order[cursor[key(annotations_[a])]++] = a;
        };
        bucket(num_items_, [](const Annotation& a) { return a.item; }, item_offsets_, by_item_);
        bucket(num_workers_, [](const Annotation& a) { return a.worker; }, worker_offsets_,
               by_worker_);

        for (std::size_t i = 0; i < num_items_; ++i) {
            auto span = item_annotations(i);
            std::vector<std::size_t> seen;
            seen.reserve(span.size());
            for (auto a : span) seen.push_back(annotations_[a].worker);
            std::sort(seen.begin(), seen.end());
            if (std::adjacent_find(seen.begin(), seen.end()) != seen.end())
                throw ValidationError("worker '" +
                                      ids_.workers[*std::adjacent_find(seen.begin(), seen.end())] +
                                      "' labelled item '" + ids_.items[i] + "' more than once");
        }
    }

    std::size_t num_items_ = 0;
    std::size_t num_workers_ = 0;
    std::size_t num_classes_ = 0;
    std::vector<Annotation> annotations_;
    IdMaps ids_;
    std::vector<std::size_t> item_offsets_{0};
    std::vector<std::size_t> by_item_;
    std::vector<std::size_t> worker_offsets_{0};
    std::vector<std::size_t> by_worker_;
    Lookup item_lookup_;
    Lookup worker_lookup_;
    Lookup class_lookup_;
};

/// Per-item class histograms n_ik.
class VoteCounts {
public:
    explicit VoteCounts(const LabelMatrix& labels)
        : num_items_(labels.num_items()),
          num_classes_(labels.num_classes()),
          counts_(num_items_ * num_classes_, 0) {
        for (const auto& a : labels.annotations()) ++counts_[a.item * num_classes_ + a.label];
    }

    std::size_t num_items() const noexcept { return num_items_; }
    std::size_t num_classes() const noexcept { return num_classes_; }
    std::uint32_t count(std::size_t item, std::size_t k) const {
        return counts_[item * num_classes_ + k];
    }
    std::span<const std::uint32_t> row(std::size_t item) const {
        return {counts_.data() + item * num_classes_, num_classes_};
    }
    std::uint32_t total(std::size_t item) const {
        std::uint32_t t = 0;
        for (auto c : row(item)) t += c;
        return t;
    }

private:
    std::size_t num_items_;
    std::size_t num_classes_;
    std::vector<std::uint32_t> counts_;
};

inline VoteCounts vote_counts(const LabelMatrix& labels) { return VoteCounts(labels); }

/// One-versus-rest indicator view: y(a) = 1 iff annotation a carries the
/// focal class. Shares the support of the underlying matrix; the matrix
/// must outlive the view.
class BinaryView {
public:
    BinaryView(const LabelMatrix& labels, std::size_t focal_class)
        : labels_(&labels), focal_(focal_class) {
        if (focal_class >= labels.num_classes())
            throw ValidationError("class " + std::to_string(focal_class) + " out of range for K=" +
                                  std::to_string(labels.num_classes()));
    }

    const LabelMatrix& labels() const noexcept { return *labels_; }
    std::size_t focal_class() const noexcept { return focal_; }
    std::size_t num_items() const noexcept { return labels_->num_items(); }
    std::size_t num_workers() const noexcept { return labels_->num_workers(); }

    double y(std::size_t annotation) const {
        return labels_->annotation(annotation).label == focal_ ? 1.0 : 0.0;
    }

private:
    const LabelMatrix* labels_;
    std::size_t focal_;
};

inline BinaryView binary_view(const LabelMatrix& labels, std::size_t k) {
    return BinaryView(labels, k);
}

// ---------------------------------------------------------------------------
// CSV ingestion

namespace detail {

inline std::string_view trim(std::string_view s) {
    constexpr std::string_view ws = " \t\r\n";
    auto b = s.find_first_not_of(ws);
    if (b == std::string_view::npos) return {};
    auto e = s.find_last_not_of(ws);
    return s.substr(b, e - b + 1);
}

inline std::vector<std::string_view> split_fields(std::string_view line) {
    std::vector<std::string_view> out;
    std::size_t start = 0;
    while (true) {
        auto comma = line.find(',', start);
        out.push_back(trim(line.substr(start, comma - start)));
        if (comma == std::string_view::npos) break;
        start = comma + 1;
    }
    return out;
}

/// Reads data rows after checking the header. Blank lines are skipped.
/// Calls row(fields, line_number) for each data row.
template <typename RowFn>
void read_csv(std::istream& in, std::string_view header, std::size_t arity, RowFn&& row) {
    std::string line;
    std::size_t line_no = 0;
    bool have_header = false;
    while (std::getline(in, line)) {
        ++line_no;
        std::string_view view = line;
        if (line_no == 1 && view.starts_with("\xEF\xBB\xBF")) view.remove_prefix(3);
        if (trim(view).empty()) continue;
        auto fields = split_fields(view);
        if (!have_header) {
            std::string joined;
            for (std::size_t f = 0; f < fields.size(); ++f)
                joined.append(f ? "," : "").append(fields[f]);
            if (joined != header)
                throw ParseError(line_no, "expected header '" + std::string(header) + "', got '" +
                                              std::string(trim(view)) + "'");
            have_header = true;
            continue;
        }
        if (fields.size() != arity)
            throw ParseError(line_no, "expected " + std::to_string(arity) + " fields, got " +
                                          std::to_string(fields.size()));
        for (auto f : fields)
            if (f.empty()) throw ParseError(line_no, "empty field");
        row(fields, line_no);
    }
    if (!have_header) throw ValidationError("empty file: missing header '" + std::string(header) + "'");
}

inline std::ifstream open_input(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ValidationError("cannot open '" + path + "'");
    return in;
}

}  // namespace detail

/// Parses a `question,worker,answer` stream. Item and worker indices follow
/// first appearance. If every answer is a non-negative integer the class
/// index is that integer and K = max + 1; otherwise classes are the distinct
/// answer strings in first-appearance order. `num_classes`, when given, must
/// be at least the inferred K and widens the label space.
inline LabelMatrix read_labels(std::istream& in,
                               std::optional<std::size_t> num_classes = std::nullopt) {
    struct Row {
        std::size_t item, worker;
        std::string answer;
        std::size_t line;
    };
    std::vector<Row> rows;
    IdMaps ids;
    std::unordered_map<std::string, std::size_t> items, workers;
    bool all_integer = true;
    std::size_t max_integer = 0;

    auto intern = [](std::unordered_map<std::string, std::size_t>& map,
                     std::vector<std::string>& names, std::string_view key) {
        auto [it, inserted] = map.try_emplace(std::string(key), names.size());
        if (inserted) names.emplace_back(key);
        return it->second;
    };

    detail::read_csv(in, "question,worker,answer", 3, [&](const auto& f, std::size_t line) {
        Row r{intern(items, ids.items, f[0]), intern(workers, ids.workers, f[1]),
              std::string(f[2]), line};
        if (auto v = LabelMatrix::parse_index(f[2]))
            max_integer = std::max(max_integer, *v);
        else
            all_integer = false;
        rows.push_back(std::move(r));
    });
    if (rows.empty()) throw ValidationError("label file contains no annotations");

    std::vector<Annotation> annotations;
    annotations.reserve(rows.size());
    std::size_t inferred_k = 0;
    if (all_integer) {
        inferred_k = max_integer + 1;
        if (inferred_k > (std::size_t{1} << 20))
            throw ValidationError("integer class label " + std::to_string(max_integer) +
                                  " is too large");
        for (const auto& r : rows)
            annotations.push_back({r.item, r.worker, *LabelMatrix::parse_index(r.answer)});
    } else {
        ids.integer_classes = false;
        std::unordered_map<std::string, std::size_t> classes;
        for (const auto& r : rows)
            annotations.push_back({r.item, r.worker, intern(classes, ids.classes, r.answer)});
        inferred_k = ids.classes.size();
    }

    std::size_t k = inferred_k;
    if (num_classes) {
        if (*num_classes < inferred_k)
            throw ValidationError("K override " + std::to_string(*num_classes) +
                                  " is smaller than the " + std::to_string(inferred_k) +
                                  " classes present in the data");
        k = *num_classes;
    }
    if (k < 2) k = 2;  // a one-class label file is still a binary problem
    if (!ids.integer_classes)
        for (std::size_t c = ids.classes.size(); c < k; ++c) ids.classes.push_back("#" + std::to_string(c));

    // Duplicate (item, worker) pairs are reported against the second occurrence.
    {
        std::vector<std::pair<std::pair<std::size_t, std::size_t>, std::size_t>> keys;
        keys.reserve(rows.size());
        for (std::size_t r = 0; r < rows.size(); ++r)
            keys.push_back({{rows[r].item, rows[r].worker}, r});
        std::sort(keys.begin(), keys.end());
        for (std::size_t x = 1; x < keys.size(); ++x)
            if (keys[x].first == keys[x - 1].first) {
                const auto& dup = rows[std::max(keys[x].second, keys[x - 1].second)];
                throw ValidationError("line " + std::to_string(dup.line) + ": worker '" +
                                      ids.workers[dup.worker] + "' labelled question '" +
                                      ids.items[dup.item] + "' more than once");
            }
    }

    const std::size_t n = ids.items.size();
    const std::size_t w = ids.workers.size();
    return LabelMatrix::from_annotations(n, w, k, std::move(annotations), std::move(ids));
}

inline LabelMatrix load_labels(const std::string& path,
                               std::optional<std::size_t> num_classes = std::nullopt) {
    auto in = detail::open_input(path);
    return read_labels(in, num_classes);
}

/// Parses a `question,truth` stream against the id and label maps of `labels`.
inline GroundTruth read_truth(std::istream& in, const LabelMatrix& labels) {
    GroundTruth truth;
    detail::read_csv(in, "question,truth", 2, [&](const auto& f, std::size_t line) {
        auto item = labels.find_item(f[0]);
        if (!item)
            throw ValidationError("line " + std::to_string(line) + ": unknown question '" +
                                  std::string(f[0]) + "'");
        auto k = labels.find_class(f[1]);
        if (!k)
            throw ValidationError("line " + std::to_string(line) + ": unknown label '" +
                                  std::string(f[1]) + "'");
        if (!truth.emplace(*item, *k).second)
            throw ValidationError("line " + std::to_string(line) + ": question '" +
                                  std::string(f[0]) + "' has more than one truth row");
    });
    return truth;
}

inline GroundTruth load_truth(const std::string& path, const LabelMatrix& labels) {
    auto in = detail::open_input(path);
    return read_truth(in, labels);
}

inline void write_labels(std::ostream& out, const LabelMatrix& labels) {
    out << "question,worker,answer\n";
    for (const auto& a : labels.annotations())
        out << labels.item_id(a.item) << ',' << labels.worker_id(a.worker) << ','
            << labels.class_name(a.label) << '\n';
}

inline void write_truth(std::ostream& out, const LabelMatrix& labels, const GroundTruth& truth) {
    out << "question,truth\n";
    for (const auto& [item, k] : truth)
        out << labels.item_id(item) << ',' << labels.class_name(k) << '\n';
}

}  // namespace bwa
