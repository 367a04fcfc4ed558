#include "sparsyfed/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iostream>

#include <fmt/format.h>
#include <fmt/os.h>

#include "sparsyfed/error.hpp"

namespace sparsyfed {

CommCost comm_cost(std::span<const double> global_weights, const std::vector<std::vector<double>>& payloads) {
    CommCost c;
    for (double v : global_weights) c.downlink_nnz += (v != 0.0);
    if (payloads.empty()) return c;
    std::size_t total = 0;
    for (const auto& p : payloads) {
        for (double v : p) total += (v != 0.0);
    }
    c.uplink_nnz_mean = static_cast<std::size_t>(
        std::llround(static_cast<double>(total) / static_cast<double>(payloads.size())));
    return c;
}

std::vector<std::vector<double>> iou_matrix(const std::vector<SparseMask>& masks) {
    const std::size_t n = masks.size();
    std::vector<std::vector<double>> m(n, std::vector<double>(n, 1.0));
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = i + 1; j < n; ++j) {
            m[i][j] = m[j][i] = mask_iou(masks[i], masks[j]);
        }
    }
    return m;
}

double cosine_similarity(std::span<const double> a, std::span<const double> b) {
    if (a.size() != b.size()) throw ConfigError("cosine_similarity: length mismatch");
    double dot = 0.0, na = 0.0, nb = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        dot += a[i] * b[i];
        na += a[i] * a[i];
        nb += b[i] * b[i];
    }
    if (na == 0.0 || nb == 0.0) return 0.0;
    const double c = dot / (std::sqrt(na) * std::sqrt(nb));
    return std::clamp(c, -1.0, 1.0);
}

double l2_distance(std::span<const double> a, std::span<const double> b) {
    if (a.size() != b.size()) throw ConfigError("l2_distance: length mismatch");
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
    return std::sqrt(s);
}

WeightMovement weight_movement(std::span<const double> initial, std::span<const double> before,
                               std::span<const double> after,
                               const std::vector<std::vector<double>>& client_updates) {
    WeightMovement w;
    w.global_l2 = l2_distance(after, initial);
    w.round_l2 = l2_distance(after, before);
    w.round_cosine = cosine_similarity(before, after);
    double sum = 0.0;
    std::size_t pairs = 0;
    for (std::size_t i = 0; i < client_updates.size(); ++i) {
        for (std::size_t j = i + 1; j < client_updates.size(); ++j) {
            sum += cosine_similarity(client_updates[i], client_updates[j]);
            ++pairs;
        }
    }
    w.client_cosine_mean = pairs ? sum / static_cast<double>(pairs) : 0.0;
    return w;
}

double evaluate(const Model& model, const ReparamSpec& reparam, const LabeledDataset& test) {
    if (test.size() == 0) throw ConfigError("evaluate: empty test set");
    Reparam session(reparam);
    const Tensor logits = predict(model, session, test.inputs);
    const std::size_t C = logits.dim(1);
    std::size_t correct = 0;
    for (std::size_t b = 0; b < test.size(); ++b) {
        std::size_t best = 0;
        for (std::size_t c = 1; c < C; ++c) {
            if (logits[b * C + c] > logits[b * C + best]) best = c;
        }
        correct += static_cast<int>(best) == test.labels[b];
    }
    return static_cast<double>(correct) / static_cast<double>(test.size());
}

namespace {

fmt::ostream open_csv(const std::filesystem::path& path) {
    try {
        return fmt::output_file(path.string());
    } catch (const std::system_error& e) {
        throw ConfigError("cannot write '" + path.string() + "': " + e.what());
    }
}

}  // namespace

void write_rounds_csv(const std::filesystem::path& path, const std::vector<RoundReport>& reports) {
    auto out = open_csv(path);
    out.print("round,test_accuracy,global_sparsity,downlink_nnz,uplink_nnz_mean,cumulative_comm_nnz,"
              "mean_client_regrowth,global_l2_from_init,round_l2,round_cosine,client_cosine_mean\n");
    for (const auto& r : reports) {
        out.print("{},{:.10g},{:.10g},{},{},{},{},{:.10g},{:.10g},{:.10g},{:.10g}\n", r.round, r.test_accuracy,
                  r.global_sparsity, r.downlink_nnz, r.uplink_nnz_mean, r.cumulative_comm_nnz,
                  r.mean_client_regrowth, r.global_l2_from_init, r.round_l2, r.round_cosine,
                  r.client_cosine_mean);
    }
}

void write_iou_csv(const std::filesystem::path& path, const std::vector<std::vector<double>>& matrix) {
    auto out = open_csv(path);
    for (const auto& row : matrix) {
        for (std::size_t j = 0; j < row.size(); ++j) {
            if (j) out.print(",");
            out.print("{:.10g}", row[j]);
        }
        out.print("\n");
    }
}

void write_layer_sparsity_csv(const std::filesystem::path& path, const std::vector<RoundReport>& reports) {
    auto out = open_csv(path);
    out.print("round");
    const std::size_t layers = reports.empty() ? 0 : reports.front().per_layer_sparsity.size();
    for (std::size_t l = 0; l < layers; ++l) out.print(",layer_{}", l);
    out.print("\n");
    for (const auto& r : reports) {
        out.print("{}", r.round);
        for (double s : r.per_layer_sparsity) out.print(",{:.10g}", s);
        out.print("\n");
    }
}

}  // namespace sparsyfed
