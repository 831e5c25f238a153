#include "vlbias/zs_audit.hpp"

#include <fstream>
#include <set>
#include <sstream>
#include <unordered_map>

#include "vlbias/error.hpp"

namespace vlbias {

void AuditClassSet::validate() const {
    if (identity_classes.empty()) fail_data("empty_classes", "identity class list is empty");
    if (crime_classes.empty()) fail_data("empty_classes", "crime class list is empty");
    if (nonhuman_classes.empty()) fail_data("empty_classes", "non-human class list is empty");
    std::set<std::string> seen;
    for (const auto& c : all_classes())
        if (!seen.insert(c).second) fail_data("overlapping_classes", "class '" + c + "' appears twice");
    fill_templates({template_text}, {"x"});  // throws on a malformed template
}

std::vector<std::string> AuditClassSet::all_classes() const {
    std::vector<std::string> out = identity_classes;
    out.insert(out.end(), crime_classes.begin(), crime_classes.end());
    out.insert(out.end(), nonhuman_classes.begin(), nonhuman_classes.end());
    return out;
}

QuerySet AuditClassSet::class_queries() const {
    validate();
    return fill_templates({template_text}, all_classes(), QueryRole::audit_class);
}

AuditClassSet load_audit_classes(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) fail_data("missing_file", "cannot open " + path.string());
    try {
        auto j = nlohmann::json::parse(in);
        AuditClassSet c;
        c.identity_classes = j.at("identity").get<std::vector<std::string>>();
        c.crime_classes = j.at("crime").get<std::vector<std::string>>();
        c.nonhuman_classes = j.at("nonhuman").get<std::vector<std::string>>();
        c.template_text = j.value("template", c.template_text);
        c.validate();
        return c;
    } catch (const nlohmann::json::exception& e) {
        fail_data("bad_classes", path.string() + ": " + e.what());
    }
}

std::vector<std::size_t> zero_shot_classify(const Eigen::MatrixXd& image_embs,
                                            const Eigen::MatrixXd& class_embs) {
    if (image_embs.cols() != class_embs.cols()) fail_data("shape", "image/class dimension mismatch");
    if (class_embs.rows() == 0) fail_data("empty_classes", "no classes to classify into");
    const Eigen::MatrixXd s = image_embs * class_embs.transpose();
    std::vector<std::size_t> preds(static_cast<std::size_t>(s.rows()));
    for (Eigen::Index i = 0; i < s.rows(); ++i) {
        Eigen::Index best = 0;
        for (Eigen::Index c = 1; c < s.cols(); ++c)
            if (s(i, c) > s(i, best)) best = c;
        preds[static_cast<std::size_t>(i)] = static_cast<std::size_t>(best);
    }
    return preds;
}

std::vector<GroupRates> misclassification_rates(const std::vector<std::size_t>& preds,
                                                const AttributeTable& attrs,
                                                const AuditClassSet& classes) {
    if (preds.size() != attrs.size()) fail_data("shape", "predictions and attributes differ in length");
    const std::size_t n_id = classes.identity_classes.size();
    const std::size_t n_crime = classes.crime_classes.size();
    const std::size_t n_all = n_id + n_crime + classes.nonhuman_classes.size();

    std::vector<std::size_t> total(attrs.label_count(), 0), crime(total), nonhuman(total);
    for (std::size_t i = 0; i < preds.size(); ++i) {
        if (preds[i] >= n_all) fail_data("label_range", "prediction index out of range");
        const auto g = static_cast<std::size_t>(attrs.labels[i]);
        ++total[g];
        if (preds[i] >= n_id + n_crime) ++nonhuman[g];
        else if (preds[i] >= n_id) ++crime[g];
    }
    std::vector<GroupRates> out;
    for (std::size_t g = 0; g < total.size(); ++g) {
        GroupRates r;
        r.group = attrs.label_names[g];
        r.images = total[g];
        if (total[g] > 0) {
            r.crime_rate = 100.0 * static_cast<double>(crime[g]) / static_cast<double>(total[g]);
            r.nonhuman_rate = 100.0 * static_cast<double>(nonhuman[g]) / static_cast<double>(total[g]);
        }
        out.push_back(r);
    }
    return out;
}

nlohmann::ordered_json audit_to_json(const std::vector<GroupRates>& rates) {
    nlohmann::ordered_json groups = nlohmann::ordered_json::array();
    for (const auto& r : rates) {
        nlohmann::ordered_json g;
        g["group"] = r.group;
        g["images"] = r.images;
        g["crime_rate"] = r.crime_rate ? nlohmann::ordered_json(*r.crime_rate) : nullptr;
        g["nonhuman_rate"] = r.nonhuman_rate ? nlohmann::ordered_json(*r.nonhuman_rate) : nullptr;
        groups.push_back(g);
    }
    nlohmann::ordered_json j;
    j["rows"] = {"Crime-related", "Non-human"};
    j["groups"] = groups;
    return j;
}

std::string audit_to_markdown(const std::vector<GroupRates>& rates) {
    auto cell = [](const std::optional<double>& v) {
        if (!v) return std::string("—");
        std::ostringstream ss;
        ss.setf(std::ios::fixed);
        ss.precision(1);
        ss << *v;
        return ss.str();
    };
    std::ostringstream md;
    md << "| Category |";
    for (const auto& r : rates) md << " " << r.group << " |";
    md << "\n|---|";
    for (std::size_t i = 0; i < rates.size(); ++i) md << "---|";
    md << "\n| Crime-related |";
    for (const auto& r : rates) md << " " << cell(r.crime_rate) << " |";
    md << "\n| Non-human |";
    for (const auto& r : rates) md << " " << cell(r.nonhuman_rate) << " |";
    md << "\n";
    return md.str();
}

ResolvedPairs resolve_pairs(const PairTable& pairs, const EmbeddingMatrix& images, std::size_t n_queries) {
    std::unordered_map<std::string, std::size_t> row;
    for (std::size_t i = 0; i < images.ids.size(); ++i) row.emplace(images.ids[i], i);
    ResolvedPairs out;
    for (const auto& [id, q] : pairs.pairs) {
        auto it = row.find(id);
        if (it == row.end()) fail_data("unknown_image", "pair references unknown image '" + id + "'");
        if (q >= n_queries) fail_data("query_range", "pair query index out of range for '" + id + "'");
        out.image_row.push_back(it->second);
        out.query.push_back(q);
    }
    return out;
}

double recall_at_k(const Eigen::MatrixXd& scores, const ResolvedPairs& pairs, std::size_t k) {
    if (k < 1) fail_usage("bad_k", "recall@k needs k >= 1");
    if (pairs.image_row.empty()) fail_data("empty_pairs", "no pairs to evaluate");
    const auto n = static_cast<std::size_t>(scores.rows());
    // Query each image is the ground truth for (if any); images sharing the
    // query are not distractors for one another.
    std::vector<std::vector<std::size_t>> owners(static_cast<std::size_t>(scores.cols()));
    for (std::size_t p = 0; p < pairs.image_row.size(); ++p) owners[pairs.query[p]].push_back(pairs.image_row[p]);

    std::vector<char> excluded(n, 0);
    std::size_t hits = 0;
    for (std::size_t p = 0; p < pairs.image_row.size(); ++p) {
        const std::size_t q = pairs.query[p];
        const std::size_t i = pairs.image_row[p];
        for (std::size_t j : owners[q]) excluded[j] = 1;
        const double si = scores(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(q));
        std::size_t ahead = 0;
        for (std::size_t j = 0; j < n && ahead < k; ++j) {
            if (excluded[j]) continue;
            const double sj = scores(static_cast<Eigen::Index>(j), static_cast<Eigen::Index>(q));
            if (sj > si || (sj == si && j < i)) ++ahead;
        }
        if (ahead < k) ++hits;
        for (std::size_t j : owners[q]) excluded[j] = 0;
    }
    return 100.0 * static_cast<double>(hits) / static_cast<double>(pairs.image_row.size());
}

double recall_at_k(const Eigen::MatrixXd& text_embs, const Eigen::MatrixXd& image_embs,
                   const ResolvedPairs& pairs, std::size_t k) {
    if (text_embs.cols() != image_embs.cols()) fail_data("shape", "text/image dimension mismatch");
    return recall_at_k(Eigen::MatrixXd(image_embs * text_embs.transpose()), pairs, k);
}

double zs_accuracy(const Eigen::MatrixXd& image_embs, const Eigen::MatrixXd& class_embs,
                   const std::vector<std::size_t>& true_class) {
    if (true_class.size() != static_cast<std::size_t>(image_embs.rows()))
        fail_data("shape", "labels and images differ in length");
    if (true_class.empty()) fail_data("empty", "no images to classify");
    const auto preds = zero_shot_classify(image_embs, class_embs);
    std::size_t correct = 0;
    for (std::size_t i = 0; i < preds.size(); ++i) correct += preds[i] == true_class[i];
    return 100.0 * static_cast<double>(correct) / static_cast<double>(preds.size());
}

}  // namespace vlbias
