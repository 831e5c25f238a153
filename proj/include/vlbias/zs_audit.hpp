#pragma once

#include <optional>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "vlbias/corpus_io.hpp"

namespace vlbias {

struct AuditClassSet {
    std::vector<std::string> identity_classes;
    std::vector<std::string> crime_classes;
    std::vector<std::string> nonhuman_classes;
    std::string template_text = "a photo of a {}";

    void validate() const;
    // identity, then crime, then non-human; the order predictions index into.
    std::vector<std::string> all_classes() const;
    QuerySet class_queries() const;
};

// Class partition file: {"identity":[...],"crime":[...],"nonhuman":[...],"template":"..."}.
AuditClassSet load_audit_classes(const std::filesystem::path& path);

// Argmax per image row over class rows; ties go to the lowest index.
std::vector<std::size_t> zero_shot_classify(const Eigen::MatrixXd& image_embs,
                                            const Eigen::MatrixXd& class_embs);

struct GroupRates {
    std::string group;
    std::size_t images = 0;
    std::optional<double> crime_rate;     // percent; absent for empty groups
    std::optional<double> nonhuman_rate;  // percent
};

std::vector<GroupRates> misclassification_rates(const std::vector<std::size_t>& preds,
                                                const AttributeTable& attrs,
                                                const AuditClassSet& classes);

nlohmann::ordered_json audit_to_json(const std::vector<GroupRates>& rates);
std::string audit_to_markdown(const std::vector<GroupRates>& rates);

// Pairs resolved to (image row, query index).
struct ResolvedPairs {
    std::vector<std::size_t> image_row;
    std::vector<std::size_t> query;
};

ResolvedPairs resolve_pairs(const PairTable& pairs, const EmbeddingMatrix& images, std::size_t n_queries);

// Text-to-image recall@k (percent). `scores` is N images x M queries. For
// each pair the true image is ranked against distractors: every image not
// itself paired with the same query. Ties follow ascending image index.
double recall_at_k(const Eigen::MatrixXd& scores, const ResolvedPairs& pairs, std::size_t k);
double recall_at_k(const Eigen::MatrixXd& text_embs, const Eigen::MatrixXd& image_embs,
                   const ResolvedPairs& pairs, std::size_t k);

double zs_accuracy(const Eigen::MatrixXd& image_embs, const Eigen::MatrixXd& class_embs,
                   const std::vector<std::size_t>& true_class);

}  // namespace vlbias
