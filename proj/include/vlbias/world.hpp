#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "vlbias/corpus_io.hpp"
#include "vlbias/toy_model.hpp"

namespace vlbias {

struct SyntheticWorldConfig {
    std::size_t n_images = 2000;
    std::size_t dim = 64;
    std::size_t attribute_count = 2;
    double bias_strength = 1.0;  // beta
    double noise_sigma = 0.02;   // per coordinate
    std::uint64_t seed = 0;

    std::size_t content_concepts = 20;
    std::size_t words_per_caption = 3;
    double attribute_scale = 0.05;  // weight of the per-attribute direction
    double score_gap = 0.028;       // planted mean cosine gap at beta = 1
    double direction_ridge = 1.0;   // ridge (relative to mean variance) of the stereotype direction

    void validate() const;
};

// Captions describing image content: the retrieval / zero-shot targets.
QuerySet content_queries(const SyntheticWorldConfig& cfg);

struct WorldQueries {
    QuerySet content;  // one caption per dominant concept
    QuerySet train;    // stereotype queries seen by the adversary
    QuerySet test;     // held-out stereotype queries
};

WorldQueries default_world_queries(const SyntheticWorldConfig& cfg);

// Vocabulary covering every text in the world.
Tokenizer world_tokenizer(const WorldQueries& q, std::size_t max_len = 16);

struct World {
    EmbeddingMatrix images;            // unit rows, float32-representable
    AttributeTable attributes;
    PairTable pairs;                   // image id -> content query index
    std::vector<std::size_t> concept_of;  // dominant content concept per image row
    double kappa = 0.0;                // norm of the stereotype direction before scaling
};

// Planted-bias world built around the encoder's own text embeddings: image
// i = normalize(t_content[m*(i)] + s*u_a(i) + beta*w(i)*(gap/kappa)*g + noise),
// w = +1 for even attribute indices and -1 for odd ones.
World generate_world(const SyntheticWorldConfig& cfg, const WorldQueries& q, const ToyDualEncoder& enc,
                     const Tokenizer& tok);

std::vector<std::size_t> concepts_from_pairs(const PairTable& pairs, const EmbeddingMatrix& images);

// Independent 64-bit stream seeds derived from one run seed.
std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream);

}  // namespace vlbias
