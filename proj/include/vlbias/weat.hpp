#pragma once

#include <cstdint>
#include <optional>
#include <string>

#include <Eigen/Dense>
#include <json.hpp>

namespace vlbias {

// Cross-modal WEAT: target concepts come from text embeddings, attributes
// from image embeddings. Rows are unit vectors.
struct WeatInstance {
    Eigen::MatrixXd C1, C2, A1, A2;
    std::string c1_label = "C1", c2_label = "C2", a1_label = "A1", a2_label = "A2";

    void validate() const;
};

double association(const Eigen::VectorXd& w, const Eigen::MatrixXd& A1, const Eigen::MatrixXd& A2);
double differential_association(const WeatInstance& inst);
double effect_size(const WeatInstance& inst);

enum class PermutationMode { exact, monte_carlo };

struct PermutationOptions {
    PermutationMode mode = PermutationMode::exact;
    std::size_t n_samples = 100000;
    std::uint64_t seed = 0;
};

inline constexpr std::uint64_t kExactPartitionCap = 200000;

double permutation_test(const WeatInstance& inst, const PermutationOptions& opt = {});

struct WeatReport {
    double effect_size = 0.0;
    double p_value = 0.0;
    PermutationOptions options;
};

WeatReport run_weat(const WeatInstance& inst, const PermutationOptions& opt);
nlohmann::ordered_json to_json(const WeatReport& r);

}  // namespace vlbias
