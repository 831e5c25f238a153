#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>

namespace vlbias {

struct AttributeTable {
    std::vector<std::string> ids;
    std::vector<int> labels;              // index into label_names
    std::vector<std::string> label_names; // sorted, distinct

    std::size_t size() const { return ids.size(); }
    std::size_t label_count() const { return label_names.size(); }
    std::vector<std::size_t> counts() const;
    void validate() const;
};

struct EmbeddingMatrix {
    std::vector<std::string> ids;
    Eigen::MatrixXd data;  // N x d, row-major semantics (row = item)
    bool normalized = false;

    std::size_t rows() const { return static_cast<std::size_t>(data.rows()); }
    std::size_t dim() const { return static_cast<std::size_t>(data.cols()); }
};

enum class QueryRole { train, test, audit_class };

std::string to_string(QueryRole r);
QueryRole parse_query_role(const std::string& s);

struct Query {
    std::string text;
    std::size_t template_index = 0;
    std::size_t concept_index = 0;
};

struct QuerySet {
    std::vector<std::string> templates;
    std::vector<std::string> concepts;
    std::vector<Query> queries;
    QueryRole role = QueryRole::test;

    std::size_t size() const { return queries.size(); }
    std::vector<std::string> texts() const;
};

// Ground-truth (image, query) matches used by the retrieval and
// classification proxies.
struct PairTable {
    std::vector<std::pair<std::string, std::size_t>> pairs;
};

QuerySet fill_templates(const std::vector<std::string>& templates,
                        const std::vector<std::string>& concepts,
                        QueryRole role = QueryRole::test);

// Stereotype query sets from Table 1 of the paper.
QuerySet table1_train_queries();
QuerySet table1_test_queries();

// VLBE binary embedding files.
EmbeddingMatrix load_embeddings(const std::filesystem::path& path);
void save_embeddings(const EmbeddingMatrix& m, const std::filesystem::path& path);

// `id,attribute` CSV.
AttributeTable load_attributes(const std::filesystem::path& path);
void save_attributes(const AttributeTable& t, const std::filesystem::path& path);

// {"templates":[...],"concepts":[...],"role":"..."}
QuerySet load_queryset(const std::filesystem::path& path);
void save_queryset(const QuerySet& q, const std::filesystem::path& path);

// `image_id,query_index` CSV.
PairTable load_pairs(const std::filesystem::path& path);
void save_pairs(const PairTable& p, const std::filesystem::path& path);

// Rounds every entry to the nearest float32, matching on-disk precision.
void round_to_storage(Eigen::MatrixXd& m);

}  // namespace vlbias
