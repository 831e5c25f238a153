#pragma once

#include <cstddef>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "vlbias/corpus_io.hpp"

namespace vlbias {

// Distinguished value for Skew@k when an attribute is absent from the top k.
inline constexpr double NEG_INF = -std::numeric_limits<double>::infinity();

struct RankedList {
    std::size_t query_index = 0;
    std::vector<std::size_t> order;  // image rows, best first
};

struct DesiredDistribution {
    std::vector<double> probs;

    static DesiredDistribution uniform(std::size_t labels);
    void validate() const;
};

// Descending by score, ties broken by ascending index. Throws on NaN.
RankedList rank(const std::vector<double>& scores, std::size_t query_index = 0);

// Attribute label sequence along the ranking (the only thing the metrics use).
std::vector<int> labels_along(const RankedList& tau, const AttributeTable& attrs);

double skew_at_k(const std::vector<int>& ranked_labels, int attribute, std::size_t k,
                 const DesiredDistribution& desired);
double max_skew_at_k(const std::vector<int>& ranked_labels, std::size_t k,
                     const DesiredDistribution& desired);
double kl_divergence(const std::vector<double>& d1, const DesiredDistribution& d2);
double ndkl(const std::vector<int>& ranked_labels, const DesiredDistribution& desired);

double skew_at_k(const RankedList& tau, const AttributeTable& attrs, int attribute, std::size_t k,
                 const DesiredDistribution& desired);
double max_skew_at_k(const RankedList& tau, const AttributeTable& attrs, std::size_t k,
                     const DesiredDistribution& desired);
double ndkl(const RankedList& tau, const AttributeTable& attrs, const DesiredDistribution& desired);

struct MeanWithExclusions {
    double mean = 0.0;
    std::size_t excluded = 0;  // NEG_INF entries skipped
};

// Arithmetic mean ignoring NEG_INF entries. Throws on empty input or when
// every entry is excluded.
MeanWithExclusions aggregate_mean(const std::vector<double>& values);

struct BiasReport {
    std::string query_set;  // identity of the evaluated query set
    std::vector<std::string> query_texts;
    std::vector<double> max_skew;
    std::vector<double> ndkl;
    double mean_max_skew = 0.0;
    double mean_ndkl = 0.0;
    std::size_t max_skew_excluded = 0;
    std::size_t k = 0;
    std::size_t k_requested = 0;
    DesiredDistribution desired;
    std::vector<std::string> label_names;
    std::vector<std::string> warnings;
};

BiasReport aggregate(const std::vector<std::string>& query_texts, std::vector<double> max_skew,
                     std::vector<double> ndkl_values);

// Ranks every column of `scores` (N images x M queries) and computes the
// per-query metrics. `k` is clamped to N with a warning.
BiasReport measure_bias(const Eigen::MatrixXd& scores, const AttributeTable& attrs,
                        const QuerySet& queries, std::size_t k,
                        const std::optional<DesiredDistribution>& desired = std::nullopt,
                        const std::string& query_set_name = "");

// Mean MaxSkew@k over all columns; the quantity tracked during training.
double mean_max_skew(const Eigen::MatrixXd& scores, const std::vector<int>& labels,
                     std::size_t label_count, std::size_t k);

nlohmann::ordered_json to_json(const BiasReport& r);
BiasReport bias_report_from_json(const nlohmann::json& j);

// Nearest integer percent change, e.g. 0.233 -> 0.073 gives "-69%".
std::string percent_change(double baseline, double value);

}  // namespace vlbias
