#include "vlbias/weat.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <vector>

#include "vlbias/error.hpp"

namespace vlbias {

namespace {

void check_unit_rows(const Eigen::MatrixXd& m, const char* name) {
    for (Eigen::Index i = 0; i < m.rows(); ++i)
        if (std::abs(m.row(i).norm() - 1.0) > 1e-9)
            fail_data("not_normalized", std::string("WEAT set ") + name + " has a non-unit row");
}

// Association of every concept, C1 rows first then C2 rows.
std::vector<double> all_associations(const WeatInstance& inst) {
    std::vector<double> s;
    s.reserve(static_cast<std::size_t>(inst.C1.rows() + inst.C2.rows()));
    for (Eigen::Index i = 0; i < inst.C1.rows(); ++i)
        s.push_back(association(inst.C1.row(i).transpose(), inst.A1, inst.A2));
    for (Eigen::Index i = 0; i < inst.C2.rows(); ++i)
        s.push_back(association(inst.C2.row(i).transpose(), inst.A1, inst.A2));
    return s;
}

// s(X, Y) for the partition where `in_first[i]` marks membership of X.
double partition_statistic(const std::vector<double>& assoc, const std::vector<char>& in_first) {
    double a = 0.0, b = 0.0;
    for (std::size_t i = 0; i < assoc.size(); ++i) (in_first[i] ? a : b) += assoc[i];
    return a - b;
}

std::uint64_t binomial_capped(std::uint64_t n, std::uint64_t k, std::uint64_t cap) {
    k = std::min(k, n - k);
    std::uint64_t r = 1;
    for (std::uint64_t i = 1; i <= k; ++i) {
        r = r * (n - k + i) / i;  // exact at every step
        if (r > cap) return cap + 1;
    }
    return r;
}

}  // namespace

void WeatInstance::validate() const {
    if (C1.rows() < 1 || C1.rows() != C2.rows())
        fail_data("bad_weat", "WEAT needs |C1| = |C2| >= 1");
    if (A1.rows() < 1 || A2.rows() < 1) fail_data("bad_weat", "WEAT attribute sets must be non-empty");
    const auto d = C1.cols();
    if (C2.cols() != d || A1.cols() != d || A2.cols() != d) fail_data("shape", "WEAT dimension mismatch");
    check_unit_rows(C1, "C1");
    check_unit_rows(C2, "C2");
    check_unit_rows(A1, "A1");
    check_unit_rows(A2, "A2");
}

double association(const Eigen::VectorXd& w, const Eigen::MatrixXd& A1, const Eigen::MatrixXd& A2) {
    if (A1.rows() == 0 || A2.rows() == 0) fail_data("bad_weat", "empty attribute set");
    return (A1 * w).mean() - (A2 * w).mean();
}

double differential_association(const WeatInstance& inst) {
    inst.validate();
    const auto assoc = all_associations(inst);
    std::vector<char> first(assoc.size(), 0);
    std::fill(first.begin(), first.begin() + inst.C1.rows(), 1);
    return partition_statistic(assoc, first);
}

double effect_size(const WeatInstance& inst) {
    inst.validate();
    const auto assoc = all_associations(inst);
    const auto n1 = static_cast<std::size_t>(inst.C1.rows());
    const double m1 = std::accumulate(assoc.begin(), assoc.begin() + n1, 0.0) / static_cast<double>(n1);
    const double m2 = std::accumulate(assoc.begin() + n1, assoc.end(), 0.0) /
                      static_cast<double>(assoc.size() - n1);
    const double mean = std::accumulate(assoc.begin(), assoc.end(), 0.0) / static_cast<double>(assoc.size());
    double var = 0.0;
    for (double a : assoc) var += (a - mean) * (a - mean);
    const double sd = std::sqrt(var / static_cast<double>(assoc.size()));  // population std
    if (sd < 1e-12) fail_numeric("degenerate_instance", "all association values are equal (zero std)");
    return (m1 - m2) / sd;
}

double permutation_test(const WeatInstance& inst, const PermutationOptions& opt) {
    inst.validate();
    const auto assoc = all_associations(inst);
    const std::size_t n = assoc.size();
    const auto k = static_cast<std::size_t>(inst.C1.rows());

    std::vector<char> first(n, 0);
    std::fill(first.begin(), first.begin() + static_cast<std::ptrdiff_t>(k), 1);
    const double observed = partition_statistic(assoc, first);

    if (opt.mode == PermutationMode::exact) {
        if (binomial_capped(n, k, kExactPartitionCap) > kExactPartitionCap)
            fail_usage("cap_exceeded", "exact enumeration exceeds " + std::to_string(kExactPartitionCap) +
                                           " partitions; use monte_carlo mode");
        // std::prev_permutation over a sorted-descending mask visits every
        // k-subset exactly once.
        std::vector<char> mask = first;
        std::uint64_t total = 0, above = 0;
        do {
            ++total;
            if (partition_statistic(assoc, mask) > observed) ++above;
        } while (std::prev_permutation(mask.begin(), mask.end()));
        return static_cast<double>(above) / static_cast<double>(total);
    }

    if (opt.n_samples == 0) fail_usage("bad_samples", "monte_carlo needs n_samples >= 1");
    std::mt19937_64 rng(opt.seed);
    std::vector<std::size_t> idx(n);
    std::vector<char> mask(n);
    std::uint64_t above = 0;
    for (std::size_t s = 0; s < opt.n_samples; ++s) {
        std::iota(idx.begin(), idx.end(), std::size_t{0});
        std::shuffle(idx.begin(), idx.end(), rng);
        std::fill(mask.begin(), mask.end(), 0);
        for (std::size_t i = 0; i < k; ++i) mask[idx[i]] = 1;
        if (partition_statistic(assoc, mask) > observed) ++above;
    }
    return static_cast<double>(above) / static_cast<double>(opt.n_samples);
}

WeatReport run_weat(const WeatInstance& inst, const PermutationOptions& opt) {
    return {effect_size(inst), permutation_test(inst, opt), opt};
}

nlohmann::ordered_json to_json(const WeatReport& r) {
    nlohmann::ordered_json j;
    j["effect_size"] = r.effect_size;
    j["p_value"] = r.p_value;
    j["mode"] = r.options.mode == PermutationMode::exact ? "exact" : "monte_carlo";
    if (r.options.mode == PermutationMode::monte_carlo) {
        j["n_samples"] = r.options.n_samples;
        j["seed"] = r.options.seed;
    }
    j["std_convention"] = "population";
    j["caveat"] =
        "WEAT is unstable across prompt syntax and model architectures and is not directly "
        "comparable to the ranking metrics; interpret with care.";
    return j;
}

}  // namespace vlbias
