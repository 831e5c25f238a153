#pragma once

// Builds the same planted-bias world `vlbias gen` writes, in memory.

#include <cstdint>

#include "vlbias/adversary.hpp"
#include "vlbias/toy_model.hpp"
#include "vlbias/world.hpp"

namespace fixture {

struct Setup {
    vlbias::SyntheticWorldConfig cfg;
    vlbias::WorldQueries queries;
    vlbias::Tokenizer tok;
    vlbias::ToyDualEncoder enc;
    vlbias::World world;
    vlbias::DebiasData data;
};

inline Setup make_setup(std::uint64_t seed, double beta = 1.0, std::size_t n_images = 2000,
                        double noise_sigma = 0.02, double attribute_scale = 0.05) {
    Setup s;
    s.cfg.n_images = n_images;
    s.cfg.bias_strength = beta;
    s.cfg.noise_sigma = noise_sigma;
    s.cfg.attribute_scale = attribute_scale;
    s.queries = vlbias::default_world_queries(s.cfg);
    s.tok = vlbias::world_tokenizer(s.queries);
    s.enc = vlbias::ToyDualEncoder::init(s.tok.vocab_size(), vlbias::EncoderShape{}, vlbias::derive_seed(seed, 1));
    s.cfg.seed = vlbias::derive_seed(seed, 2);
    s.world = vlbias::generate_world(s.cfg, s.queries, s.enc, s.tok);
    s.data.images = s.world.images.data;
    s.data.attrs = s.world.attributes;
    s.data.concept_of = s.world.concept_of;
    s.data.content = s.queries.content;
    s.data.train = s.queries.train;
    s.data.test = s.queries.test;
    return s;
}

}  // namespace fixture
