#include "vlbias/ranking_metrics.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "vlbias/error.hpp"

namespace vlbias {

DesiredDistribution DesiredDistribution::uniform(std::size_t labels) {
    if (labels == 0) fail_data("empty_labels", "uniform distribution over zero labels");
    return {std::vector<double>(labels, 1.0 / static_cast<double>(labels))};
}

void DesiredDistribution::validate() const {
    if (probs.empty()) fail_data("bad_desired", "desired distribution is empty");
    double sum = 0.0;
    for (double p : probs) {
        if (!(p > 0.0)) fail_data("bad_desired", "desired distribution entries must be > 0");
        sum += p;
    }
    if (std::abs(sum - 1.0) > 1e-12) fail_data("bad_desired", "desired distribution must sum to 1");
}

RankedList rank(const std::vector<double>& scores, std::size_t query_index) {
    for (std::size_t i = 0; i < scores.size(); ++i)
        if (std::isnan(scores[i]))
            fail_numeric("invalid_score", "NaN similarity at image " + std::to_string(i) +
                                              " for query " + std::to_string(query_index));
    RankedList r;
    r.query_index = query_index;
    r.order.resize(scores.size());
    std::iota(r.order.begin(), r.order.end(), std::size_t{0});
    std::stable_sort(r.order.begin(), r.order.end(),
                     [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
    return r;
}

std::vector<int> labels_along(const RankedList& tau, const AttributeTable& attrs) {
    std::vector<int> out;
    out.reserve(tau.order.size());
    for (std::size_t i : tau.order) {
        if (i >= attrs.size()) fail_data("shape", "ranked index beyond attribute table");
        out.push_back(attrs.labels[i]);
    }
    return out;
}

static void check_k(std::size_t k, std::size_t n) {
    if (k < 1 || k > n)
        fail_usage("bad_k", "k must satisfy 1 <= k <= N (k=" + std::to_string(k) +
                                ", N=" + std::to_string(n) + ")");
}

double skew_at_k(const std::vector<int>& ranked_labels, int attribute, std::size_t k,
                 const DesiredDistribution& desired) {
    check_k(k, ranked_labels.size());
    if (attribute < 0 || static_cast<std::size_t>(attribute) >= desired.probs.size())
        fail_usage("label_range", "attribute index out of range");
    const auto count = std::count(ranked_labels.begin(), ranked_labels.begin() + k, attribute);
    if (count == 0) return NEG_INF;
    const double actual = static_cast<double>(count) / static_cast<double>(k);
    return std::log(actual / desired.probs[static_cast<std::size_t>(attribute)]);
}

double max_skew_at_k(const std::vector<int>& ranked_labels, std::size_t k,
                     const DesiredDistribution& desired) {
    double best = NEG_INF;
    for (std::size_t a = 0; a < desired.probs.size(); ++a)
        best = std::max(best, skew_at_k(ranked_labels, static_cast<int>(a), k, desired));
    return best;
}

double kl_divergence(const std::vector<double>& d1, const DesiredDistribution& d2) {
    if (d1.size() != d2.probs.size()) fail_data("shape", "KL distributions differ in length");
    double kl = 0.0;
    for (std::size_t j = 0; j < d1.size(); ++j)
        if (d1[j] > 0.0) kl += d1[j] * std::log(d1[j] / d2.probs[j]);
    return kl;
}

double ndkl(const std::vector<int>& ranked_labels, const DesiredDistribution& desired) {
    if (ranked_labels.empty()) fail_usage("empty_ranking", "NDKL of an empty ranking");
    const std::size_t l = desired.probs.size();
    std::vector<double> counts(l, 0.0), dist(l);
    double z = 0.0, acc = 0.0;
    for (std::size_t i = 1; i <= ranked_labels.size(); ++i) {
        const int a = ranked_labels[i - 1];
        if (a < 0 || static_cast<std::size_t>(a) >= l) fail_usage("label_range", "attribute index out of range");
        counts[static_cast<std::size_t>(a)] += 1.0;
        for (std::size_t j = 0; j < l; ++j) dist[j] = counts[j] / static_cast<double>(i);
        const double w = 1.0 / std::log2(static_cast<double>(i) + 1.0);
        acc += w * kl_divergence(dist, desired);
        z += w;
    }
    return acc / z;
}

double skew_at_k(const RankedList& tau, const AttributeTable& attrs, int attribute, std::size_t k,
                 const DesiredDistribution& desired) {
    return skew_at_k(labels_along(tau, attrs), attribute, k, desired);
}

double max_skew_at_k(const RankedList& tau, const AttributeTable& attrs, std::size_t k,
                     const DesiredDistribution& desired) {
    return max_skew_at_k(labels_along(tau, attrs), k, desired);
}

double ndkl(const RankedList& tau, const AttributeTable& attrs, const DesiredDistribution& desired) {
    return ndkl(labels_along(tau, attrs), desired);
}

MeanWithExclusions aggregate_mean(const std::vector<double>& values) {
    if (values.empty()) fail_data("empty_aggregation", "cannot aggregate zero queries");
    MeanWithExclusions r;
    double sum = 0.0;
    std::size_t used = 0;
    for (double v : values) {
        if (v == NEG_INF) {
            ++r.excluded;
            continue;
        }
        sum += v;
        ++used;
    }
    if (used == 0) fail_data("empty_aggregation", "every value was excluded from aggregation");
    r.mean = sum / static_cast<double>(used);
    return r;
}

BiasReport aggregate(const std::vector<std::string>& query_texts, std::vector<double> max_skew,
                     std::vector<double> ndkl_values) {
    if (max_skew.size() != ndkl_values.size() || max_skew.size() != query_texts.size())
        fail_data("shape", "per-query metric rows differ in length");
    BiasReport r;
    auto ms = aggregate_mean(max_skew);
    r.mean_max_skew = ms.mean;
    r.max_skew_excluded = ms.excluded;
    r.mean_ndkl = aggregate_mean(ndkl_values).mean;
    r.query_texts = query_texts;
    r.max_skew = std::move(max_skew);
    r.ndkl = std::move(ndkl_values);
    return r;
}

BiasReport measure_bias(const Eigen::MatrixXd& scores, const AttributeTable& attrs,
                        const QuerySet& queries, std::size_t k,
                        const std::optional<DesiredDistribution>& desired,
                        const std::string& query_set_name) {
    const auto n = static_cast<std::size_t>(scores.rows());
    if (n != attrs.size()) fail_data("shape", "score rows do not match attribute table");
    if (static_cast<std::size_t>(scores.cols()) != queries.size())
        fail_data("shape", "score columns do not match query count");
    if (n == 0) fail_data("empty", "no images to rank");
    DesiredDistribution dd = desired ? *desired : DesiredDistribution::uniform(attrs.label_count());
    dd.validate();
    if (dd.probs.size() != attrs.label_count())
        fail_data("bad_desired", "desired distribution length differs from label count");

    std::vector<std::string> warnings;
    std::size_t kk = k;
    if (kk > n) {
        warnings.push_back("k=" + std::to_string(k) + " exceeds N=" + std::to_string(n) +
                           "; clamped to " + std::to_string(n));
        kk = n;
    }
    std::vector<double> ms, nd;
    std::vector<double> col(n);
    for (Eigen::Index m = 0; m < scores.cols(); ++m) {
        for (std::size_t i = 0; i < n; ++i) col[i] = scores(static_cast<Eigen::Index>(i), m);
        auto labels = labels_along(rank(col, static_cast<std::size_t>(m)), attrs);
        ms.push_back(max_skew_at_k(labels, kk, dd));
        nd.push_back(ndkl(labels, dd));
    }
    BiasReport r = aggregate(queries.texts(), std::move(ms), std::move(nd));
    r.query_set = query_set_name;
    r.k = kk;
    r.k_requested = k;
    r.desired = dd;
    r.label_names = attrs.label_names;
    r.warnings = std::move(warnings);
    return r;
}

double mean_max_skew(const Eigen::MatrixXd& scores, const std::vector<int>& labels,
                     std::size_t label_count, std::size_t k) {
    const auto n = static_cast<std::size_t>(scores.rows());
    check_k(k, n);
    const auto dd = DesiredDistribution::uniform(label_count);
    std::vector<std::size_t> idx(n);
    std::vector<int> top(k);
    double sum = 0.0;
    for (Eigen::Index m = 0; m < scores.cols(); ++m) {
        std::iota(idx.begin(), idx.end(), std::size_t{0});
        auto col = scores.col(m);
        if (col.hasNaN()) fail_numeric("invalid_score", "NaN similarity for query " + std::to_string(m));
        std::partial_sort(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(k), idx.end(),
                          [&](std::size_t a, std::size_t b) {
                              const double sa = col(static_cast<Eigen::Index>(a));
                              const double sb = col(static_cast<Eigen::Index>(b));
                              return sa > sb || (sa == sb && a < b);
                          });
        for (std::size_t i = 0; i < k; ++i) top[i] = labels[idx[i]];
        sum += max_skew_at_k(top, k, dd);
    }
    return sum / static_cast<double>(scores.cols());
}

nlohmann::ordered_json to_json(const BiasReport& r) {
    nlohmann::ordered_json j;
    j["query_set"] = r.query_set;
    j["k"] = r.k;
    j["k_requested"] = r.k_requested;
    j["label_names"] = r.label_names;
    j["desired_distribution"] = r.desired.probs;
    j["mean_max_skew"] = r.mean_max_skew;
    j["mean_ndkl"] = r.mean_ndkl;
    j["max_skew_excluded"] = r.max_skew_excluded;
    j["warnings"] = r.warnings;
    auto rows = nlohmann::ordered_json::array();
    for (std::size_t i = 0; i < r.max_skew.size(); ++i) {
        nlohmann::ordered_json row;
        row["query"] = r.query_texts[i];
        row["max_skew"] = r.max_skew[i];
        row["ndkl"] = r.ndkl[i];
        rows.push_back(row);
    }
    j["per_query"] = rows;
    return j;
}

BiasReport bias_report_from_json(const nlohmann::json& j) {
    try {
        BiasReport r;
        r.query_set = j.at("query_set").get<std::string>();
        r.k = j.at("k").get<std::size_t>();
        r.k_requested = j.value("k_requested", r.k);
        r.label_names = j.at("label_names").get<std::vector<std::string>>();
        r.desired.probs = j.at("desired_distribution").get<std::vector<double>>();
        r.mean_max_skew = j.at("mean_max_skew").get<double>();
        r.mean_ndkl = j.at("mean_ndkl").get<double>();
        r.max_skew_excluded = j.value("max_skew_excluded", std::size_t{0});
        r.warnings = j.value("warnings", std::vector<std::string>{});
        for (const auto& row : j.at("per_query")) {
            r.query_texts.push_back(row.at("query").get<std::string>());
            r.max_skew.push_back(row.at("max_skew").get<double>());
            r.ndkl.push_back(row.at("ndkl").get<double>());
        }
        return r;
    } catch (const nlohmann::json::exception& e) {
        fail_data("bad_report", std::string("malformed bias report: ") + e.what());
    }
}

std::string percent_change(double baseline, double value) {
    if (baseline == 0.0) return value == 0.0 ? "0%" : "n/a";
    const long pct = std::lround(100.0 * (value - baseline) / baseline);
    if (pct > 0) return "+" + std::to_string(pct) + "%";
    return std::to_string(pct) + "%";
}

}  // namespace vlbias
