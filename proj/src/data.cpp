#include "sparsyfed/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <random>
#include <sstream>
#include <string>

#include "sparsyfed/error.hpp"
#include "sparsyfed/rng.hpp"

namespace sparsyfed {

void LabeledDataset::validate() const {
    if (labels.empty()) throw ConfigError("dataset is empty");
    if (inputs.rank() != 2 || inputs.dim(0) != labels.size()) {
        throw ConfigError("dataset inputs must be [N, d] with N labels");
    }
    for (int y : labels) {
        if (y < 0 || y >= num_classes) throw ConfigError("label " + std::to_string(y) + " out of range");
    }
}

namespace {

std::size_t test_share(std::size_t n) {
    return std::max<std::size_t>(1, static_cast<std::size_t>(std::llround(0.2 * static_cast<double>(n))));
}

LabeledDataset subset(const LabeledDataset& src, const std::vector<std::size_t>& idx, Split split) {
    const std::size_t d = src.dim();
    std::vector<double> x;
    x.reserve(idx.size() * d);
    std::vector<int> y;
    y.reserve(idx.size());
    for (auto i : idx) {
        auto row = src.inputs.values().subspan(i * d, d);
        x.insert(x.end(), row.begin(), row.end());
        y.push_back(src.labels[i]);
    }
    LabeledDataset out;
    out.inputs = Tensor({idx.size(), d}, std::move(x));
    out.labels = std::move(y);
    out.num_classes = src.num_classes;
    out.split = split;
    return out;
}

}  // namespace

std::pair<LabeledDataset, LabeledDataset> split_train_test(const LabeledDataset& all, std::uint64_t seed) {
    all.validate();
    Rng rng(derive_seed({seed, 0x5917}));
    std::vector<std::vector<std::size_t>> by_class(static_cast<std::size_t>(all.num_classes));
    for (std::size_t i = 0; i < all.size(); ++i) by_class[static_cast<std::size_t>(all.labels[i])].push_back(i);
    std::vector<std::size_t> train, test;
    for (auto& members : by_class) {
        if (members.empty()) continue;
        std::shuffle(members.begin(), members.end(), rng);
        if (members.size() < 2) {
            train.push_back(members.front());
            continue;
        }
        const std::size_t nt = test_share(members.size());
        test.insert(test.end(), members.begin(), members.begin() + static_cast<std::ptrdiff_t>(nt));
        train.insert(train.end(), members.begin() + static_cast<std::ptrdiff_t>(nt), members.end());
    }
    std::shuffle(train.begin(), train.end(), rng);
    if (test.empty()) throw ConfigError("dataset too small for a train/test split");
    return {subset(all, train, Split::train), subset(all, test, Split::test)};
}

std::pair<LabeledDataset, LabeledDataset> make_synthetic(const SyntheticSpec& spec, std::uint64_t seed) {
    if (spec.classes < 2) throw ConfigError("synthetic dataset needs at least 2 classes");
    if (spec.per_class < 2) throw ConfigError("synthetic dataset needs per_class >= 2");
    if (spec.dim == 0) throw ConfigError("synthetic dataset needs dim >= 1");
    if (!(spec.margin > 0.0)) throw ConfigError("synthetic margin must be positive");

    Rng rng(derive_seed({seed, 0xda7a}));
    std::normal_distribution<double> normal(0.0, 1.0);
    const auto C = static_cast<std::size_t>(spec.classes);
    std::vector<double> means(C * spec.dim);
    for (std::size_t c = 0; c < C; ++c) {
        double norm = 0.0;
        for (std::size_t j = 0; j < spec.dim; ++j) {
            means[c * spec.dim + j] = normal(rng);
            norm += means[c * spec.dim + j] * means[c * spec.dim + j];
        }
        norm = std::sqrt(norm);
        for (std::size_t j = 0; j < spec.dim; ++j) means[c * spec.dim + j] *= spec.margin / norm;
    }

    LabeledDataset all;
    all.num_classes = spec.classes;
    std::vector<double> x;
    x.reserve(C * spec.per_class * spec.dim);
    for (std::size_t c = 0; c < C; ++c) {
        for (std::size_t i = 0; i < spec.per_class; ++i) {
            for (std::size_t j = 0; j < spec.dim; ++j) x.push_back(means[c * spec.dim + j] + normal(rng));
            all.labels.push_back(static_cast<int>(c));
        }
    }
    all.inputs = Tensor({all.labels.size(), spec.dim}, std::move(x));
    return split_train_test(all, seed);
}

LabeledDataset load_csv(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open dataset csv '" + path.string() + "'");
    std::string line;
    if (!std::getline(in, line)) throw ConfigError("dataset csv '" + path.string() + "' is empty");

    LabeledDataset out;
    std::vector<double> x;
    std::size_t dim = 0;
    std::size_t row = 1;
    int max_label = -1;
    while (std::getline(in, line)) {
        ++row;
        if (line.empty() || line == "\r") continue;
        std::vector<std::string> cells;
        std::stringstream ss(line);
        std::string cell;
        while (std::getline(ss, cell, ',')) cells.push_back(cell);
        if (cells.size() < 2) throw ConfigError("csv row " + std::to_string(row) + ": need features and a label");
        if (dim == 0) dim = cells.size() - 1;
        if (cells.size() - 1 != dim) throw ConfigError("csv row " + std::to_string(row) + ": ragged row");
        try {
            for (std::size_t j = 0; j < dim; ++j) x.push_back(std::stod(cells[j]));
            std::size_t used = 0;
            const int label = std::stoi(cells.back(), &used);
            if (label < 0) throw ConfigError("csv row " + std::to_string(row) + ": negative label");
            out.labels.push_back(label);
            max_label = std::max(max_label, label);
        } catch (const std::logic_error&) {
            throw ConfigError("csv row " + std::to_string(row) + ": unparsable value");
        }
    }
    if (out.labels.empty()) throw ConfigError("dataset csv '" + path.string() + "' has no rows");
    out.num_classes = max_label + 1;
    out.inputs = Tensor({out.labels.size(), dim}, std::move(x));
    return out;
}

std::size_t ClientPartition::total() const noexcept {
    std::size_t n = 0;
    for (const auto& c : clients) n += c.size();
    return n;
}

namespace {

ClientPartition lda_attempt(std::span<const int> labels, int num_classes, std::size_t num_clients,
                            double alpha, Rng& rng) {
    ClientPartition part;
    part.clients.resize(num_clients);
    std::vector<std::vector<std::size_t>> by_class(static_cast<std::size_t>(num_classes));
    for (std::size_t i = 0; i < labels.size(); ++i) by_class[static_cast<std::size_t>(labels[i])].push_back(i);

    std::gamma_distribution<double> gamma(alpha, 1.0);
    std::vector<double> p(num_clients);
    for (auto& members : by_class) {
        std::shuffle(members.begin(), members.end(), rng);
        double sum = 0.0;
        for (auto& v : p) {
            v = gamma(rng);
            sum += v;
        }
        if (sum == 0.0) {
            // All draws underflowed; fall back to a single random owner.
            std::fill(p.begin(), p.end(), 0.0);
            p[std::uniform_int_distribution<std::size_t>(0, num_clients - 1)(rng)] = 1.0;
            sum = 1.0;
        }
        // Split the shuffled class at the rounded cumulative proportions.
        const auto n = static_cast<double>(members.size());
        double cum = 0.0;
        std::size_t start = 0;
        for (std::size_t c = 0; c < num_clients; ++c) {
            cum += p[c] / sum;
            std::size_t end = c + 1 == num_clients ? members.size()
                                                   : std::min(members.size(), static_cast<std::size_t>(std::llround(cum * n)));
            end = std::max(end, start);
            part.clients[c].insert(part.clients[c].end(), members.begin() + static_cast<std::ptrdiff_t>(start),
                                   members.begin() + static_cast<std::ptrdiff_t>(end));
            start = end;
        }
    }
    for (auto& c : part.clients) std::sort(c.begin(), c.end());
    return part;
}

}  // namespace

ClientPartition lda_partition(std::span<const int> labels, int num_classes, std::size_t num_clients,
                              double alpha, std::uint64_t seed) {
    if (!(alpha > 0.0)) throw ConfigError("LDA alpha must be positive");
    if (num_clients == 0) throw ConfigError("need at least one client");
    if (labels.size() < num_clients) throw ConfigError("fewer samples than clients");
    for (int y : labels) {
        if (y < 0 || y >= num_classes) throw ConfigError("label out of range in lda_partition");
    }
    constexpr int max_attempts = 100;
    for (int attempt = 0; attempt < max_attempts; ++attempt) {
        Rng rng(attempt == 0 ? seed : derive_seed({seed, static_cast<std::uint64_t>(attempt)}));
        auto part = lda_attempt(labels, num_classes, num_clients, alpha, rng);
        const bool any_empty = std::any_of(part.clients.begin(), part.clients.end(),
                                           [](const auto& c) { return c.empty(); });
        if (!any_empty) return part;
    }
    throw ConfigError("LDA partition left a client empty after 100 draws (alpha=" + std::to_string(alpha) +
                      ", clients=" + std::to_string(num_clients) + ")");
}

std::vector<std::vector<std::size_t>> make_batches(std::span<const std::size_t> indices,
                                                   std::size_t batch_size, std::uint64_t seed) {
    if (batch_size == 0) throw ConfigError("batch size must be positive");
    std::vector<std::size_t> order(indices.begin(), indices.end());
    Rng rng(seed);
    std::shuffle(order.begin(), order.end(), rng);
    std::vector<std::vector<std::size_t>> batches;
    for (std::size_t i = 0; i < order.size(); i += batch_size) {
        const auto end = std::min(order.size(), i + batch_size);
        batches.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(i),
                             order.begin() + static_cast<std::ptrdiff_t>(end));
    }
    return batches;
}

Batch gather_batch(const LabeledDataset& data, std::span<const std::size_t> indices) {
    const std::size_t d = data.dim();
    std::vector<double> x;
    x.reserve(indices.size() * d);
    Batch b;
    for (auto i : indices) {
        auto row = data.inputs.values().subspan(i * d, d);
        x.insert(x.end(), row.begin(), row.end());
        b.labels.push_back(data.labels.at(i));
    }
    b.inputs = Tensor({indices.size(), d}, std::move(x));
    return b;
}

std::vector<double> label_distribution(std::span<const int> labels, std::span<const std::size_t> indices,
                                       int num_classes) {
    std::vector<double> h(static_cast<std::size_t>(num_classes), 0.0);
    for (auto i : indices) h[static_cast<std::size_t>(labels[i])] += 1.0;
    if (!indices.empty()) {
        for (auto& v : h) v /= static_cast<double>(indices.size());
    }
    return h;
}

double total_variation(std::span<const double> p, std::span<const double> q) {
    double s = 0.0;
    for (std::size_t i = 0; i < p.size(); ++i) s += std::abs(p[i] - q[i]);
    return 0.5 * s;
}

double mean_pairwise_tv(const ClientPartition& partition, std::span<const int> labels, int num_classes) {
    std::vector<std::vector<double>> dists;
    for (const auto& c : partition.clients) dists.push_back(label_distribution(labels, c, num_classes));
    double sum = 0.0;
    std::size_t pairs = 0;
    for (std::size_t i = 0; i < dists.size(); ++i) {
        for (std::size_t j = i + 1; j < dists.size(); ++j) {
            sum += total_variation(dists[i], dists[j]);
            ++pairs;
        }
    }
    return pairs ? sum / static_cast<double>(pairs) : 0.0;
}

}  // namespace sparsyfed
