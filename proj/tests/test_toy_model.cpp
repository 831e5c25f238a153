#include <doctest.h>

#include <cmath>
#include <cstring>
#include <filesystem>
#include <random>

#include "gradcheck.hpp"
#include "vlbias/error.hpp"
#include "vlbias/toy_model.hpp"
#include "vlbias/world.hpp"
#include "vlbias/zs_audit.hpp"

using namespace vlbias;
namespace fs = std::filesystem;

namespace {

bool bitwise_equal(const Tensor& a, const Tensor& b) {
    return a.rows() == b.rows() && a.cols() == b.cols() &&
           std::memcmp(a.data(), b.data(), sizeof(double) * static_cast<std::size_t>(a.size())) == 0;
}

std::vector<std::string> random_texts(const Tokenizer& tok, std::uint64_t seed, std::size_t n) {
    std::mt19937_64 rng(seed);
    std::vector<std::string> out;
    for (std::size_t i = 0; i < n; ++i) {
        std::string s;
        const std::size_t len = 1 + rng() % 6;
        for (std::size_t w = 0; w < len; ++w) s += tok.words()[2 + rng() % (tok.vocab_size() - 2)] + " ";
        out.push_back(s);
    }
    return out;
}

}  // namespace

TEST_CASE("tokenizer") {
    auto tok = Tokenizer::build({"A photo, of a Person!"}, 4);
    CHECK(tok.words()[0] == "[PAD]");
    CHECK(tok.words()[1] == "[UNK]");
    CHECK(tok.words() == std::vector<std::string>{"[PAD]", "[UNK]", "a", "of", "person", "photo"});
    CHECK(tok.encode("a person") == std::vector<int>{2, 4, 0, 0});
    CHECK(tok.encode("A photo of a person") == std::vector<int>{2, 5, 3, 2});
    CHECK(tok.encode("zebra") == std::vector<int>{1, 0, 0, 0});
    CHECK(tok.encode("") == std::vector<int>{1, 0, 0, 0});
    auto back = Tokenizer::from_json(nlohmann::json::parse(tok.to_json().dump()));
    CHECK(back.words() == tok.words());
    CHECK(back.max_len() == 4);
}

TEST_CASE("text outputs are unit norm and similarities bounded") {
    auto f = gradcheck::make_fixture(1);
    auto texts = random_texts(f.tok, 2, 100);
    auto tr = encode_texts(f.enc, f.tok, texts);
    for (Eigen::Index i = 0; i < tr.out.rows(); ++i) CHECK(std::abs(tr.out.row(i).norm() - 1.0) < 1e-12);
    Tensor img = normalize_rows(Tensor::Random(7, static_cast<Eigen::Index>(f.enc.dim())));
    Tensor s = similarity_matrix(f.enc, img, tr.out);
    CHECK(s.cwiseAbs().maxCoeff() <= 100.0 + 1e-9);
    for (Eigen::Index i = 0; i < 7; ++i)
        for (Eigen::Index m = 0; m < 5; ++m) {
            double dot = 0;
            for (Eigen::Index j = 0; j < img.cols(); ++j) dot += img(i, j) * tr.out(m, j);
            CHECK(std::abs(s(i, m) - 100.0 * dot) < 1e-12);
        }
    Tensor same = tr.out.topRows(1);
    CHECK(similarity_matrix(f.enc, same, same)(0, 0) == doctest::Approx(100.0).epsilon(1e-12));
    CHECK_THROWS_AS(similarity_matrix(f.enc, Tensor::Ones(1, 3), tr.out), Error);
}

TEST_CASE("empty prompt is the identity; a zero prompt changes outputs") {
    auto f = gradcheck::make_fixture(3, 0);
    auto plain = encode_texts(f.enc, f.tok, f.texts, false).out;
    auto with0 = encode_texts(f.enc, f.tok, f.texts, true).out;
    CHECK(bitwise_equal(plain, with0));
    f.enc.prompt = PromptBlock::zeros(2, f.enc.d_tok());
    auto with2 = encode_texts(f.enc, f.tok, f.texts, true).out;
    CHECK((with2 - plain).norm() > 1e-6);
    // Prepend and append are the same function for a pooling encoder.
    f.enc.prompt.position = PromptPosition::append;
    CHECK(bitwise_equal(encode_texts(f.enc, f.tok, f.texts, true).out, with2));
}

TEST_CASE("backward matches finite differences for every mode") {
    for (auto mode : {AdaptMode::prompt, AdaptMode::projection, AdaptMode::text_encoder, AdaptMode::full}) {
        for (std::uint64_t seed = 1; seed <= 5; ++seed) {
            auto f = gradcheck::make_fixture(seed);
            const double err = gradcheck::encoder_check(f, mask_for(mode));
            CHECK_MESSAGE(err <= 1e-4, to_string(mode) << " seed " << seed << " rel err " << err);
        }
    }
}

TEST_CASE("backward: pad row, linearity, masks, staleness") {
    auto f = gradcheck::make_fixture(4);
    auto tr = encode_texts(f.enc, f.tok, f.texts);
    auto g = backward(f.enc, tr, f.upstream, mask_for(AdaptMode::full));
    CHECK(g.at("E").row(Tokenizer::kPad).isZero(0.0));
    CHECK(g.at("E").row(Tokenizer::kUnk).isZero(0.0));  // never used by these texts
    auto g2 = backward(f.enc, tr, 2.0 * f.upstream, mask_for(AdaptMode::full));
    for (const auto& [name, t] : g) CHECK(bitwise_equal(g2.at(name), 2.0 * t));
    auto gp = backward(f.enc, tr, f.upstream, mask_for(AdaptMode::prompt));
    CHECK(gp.size() == 1);
    CHECK(gp.count("P") == 1);

    auto state = AdaptationState::create(AdaptMode::prompt);
    adam_step(state, f.enc, gp, 1e-3);
    CHECK_THROWS_AS(backward(f.enc, tr, f.upstream, mask_for(AdaptMode::prompt)), Error);
}

TEST_CASE("adam first step moves by lr * sign(g)") {
    AdamState adam;
    Tensor x = Tensor::Constant(1, 1, 1.0);
    std::map<std::string, Tensor*> params = {{"x", &x}};
    adam.apply(params, {{"x", Tensor::Constant(1, 1, 0.37)}}, 0.01);
    CHECK(x(0, 0) == doctest::Approx(1.0 - 0.01).epsilon(1e-9));
    Tensor y = Tensor::Constant(1, 1, 1.0);
    std::map<std::string, Tensor*> py = {{"x", &y}};
    AdamState a2;
    a2.apply(py, {{"x", Tensor::Constant(1, 1, -5.0)}}, 0.01);
    CHECK(y(0, 0) == doctest::Approx(1.01).epsilon(1e-9));
    const double keep = y(0, 0);
    AdamState a3;
    a3.apply(py, {{"x", Tensor::Zero(1, 1)}}, 0.01);
    CHECK(y(0, 0) == keep);
    AdamState a4;
    CHECK_THROWS_AS(a4.apply(py, {{"x", Tensor::Constant(1, 1, std::nan(""))}}, 0.01), Error);
}

TEST_CASE("adam steps only move masked tensors") {
    for (auto mode : {AdaptMode::prompt, AdaptMode::projection, AdaptMode::text_encoder, AdaptMode::full}) {
        auto f = gradcheck::make_fixture(6);
        const auto before = f.enc;
        auto tr = encode_texts(f.enc, f.tok, f.texts);
        auto state = AdaptationState::create(mode);
        adam_step(state, f.enc, backward(f.enc, tr, f.upstream, state.mask), 1e-3);
        for (const auto& name : tensor_names()) {
            const bool same = bitwise_equal(before.tensor(name), f.enc.tensor(name));
            CHECK_MESSAGE(same == (state.mask.count(name) == 0), to_string(mode) << " " << name);
        }
        // Pad row stays zero even when E trains.
        CHECK(f.enc.E.row(Tokenizer::kPad).isZero(0.0));
    }
    auto f = gradcheck::make_fixture(6);
    auto state = AdaptationState::create(AdaptMode::prompt);
    CHECK_THROWS_AS(adam_step(state, f.enc, {{"W1", f.enc.W1}}, 1e-3), Error);
}

TEST_CASE("contrastive loss at init is about ln(batch)") {
    std::mt19937_64 rng(0);
    std::normal_distribution<double> nd;
    ToyDualEncoder enc;
    enc.logit_scale = 100.0;
    Tensor img(64, 64), txt(64, 64);
    for (Eigen::Index i = 0; i < img.size(); ++i) {
        img.data()[i] = nd(rng);
        txt.data()[i] = nd(rng);
    }
    // Small logit scale makes the softmax near-uniform for random embeddings.
    enc.logit_scale = 1.0;
    const double loss = contrastive_loss(enc, normalize_rows(img), normalize_rows(txt));
    CHECK(std::abs(loss - std::log(64.0)) < 0.05);
}

TEST_CASE("contrastive gradient matches finite differences") {
    std::mt19937_64 rng(1);
    std::normal_distribution<double> nd;
    ToyDualEncoder enc;
    enc.logit_scale = 5.0;
    Tensor img(4, 3), txt(4, 3);
    for (Eigen::Index i = 0; i < img.size(); ++i) {
        img.data()[i] = nd(rng);
        txt.data()[i] = nd(rng);
    }
    img = normalize_rows(img);
    Tensor g;
    contrastive_loss(enc, img, txt, &g);
    Tensor n(txt.rows(), txt.cols());
    for (Eigen::Index i = 0; i < txt.size(); ++i) {
        const double keep = txt.data()[i];
        txt.data()[i] = keep + 1e-6;
        const double up = contrastive_loss(enc, img, txt);
        txt.data()[i] = keep - 1e-6;
        const double down = contrastive_loss(enc, img, txt);
        txt.data()[i] = keep;
        n.data()[i] = (up - down) / 2e-6;
    }
    CHECK(gradcheck::rel_error(g, n) < 1e-6);
}

TEST_CASE("pretraining on a noise-free world reaches perfect recall@1 and is deterministic") {
    SyntheticWorldConfig cfg;
    cfg.n_images = 400;
    cfg.noise_sigma = 1e-12;
    cfg.bias_strength = 0.0;
    cfg.attribute_scale = 0.0;
    cfg.seed = 5;
    auto q = default_world_queries(cfg);
    auto tok = world_tokenizer(q);
    auto enc = ToyDualEncoder::init(tok.vocab_size(), EncoderShape{}, 11);
    auto world = generate_world(cfg, q, enc, tok);
    // Start from a different encoder so there is something to learn.
    auto student = ToyDualEncoder::init(tok.vocab_size(), EncoderShape{}, 12);
    std::vector<std::size_t> rows;
    std::vector<std::string> caps;
    const auto content = q.content.texts();
    for (std::size_t i = 0; i < world.concept_of.size(); ++i) {
        rows.push_back(i);
        caps.push_back(content[world.concept_of[i]]);
    }
    auto twin = student;
    auto r = pretrain_contrastive(student, tok, world.images.data, rows, caps, 30, 1e-3, 7, 16);
    auto r2 = pretrain_contrastive(twin, tok, world.images.data, rows, caps, 30, 1e-3, 7, 16);
    for (const auto& name : tensor_names()) CHECK(bitwise_equal(student.tensor(name), twin.tensor(name)));
    CHECK(r.epoch_loss == r2.epoch_loss);
    for (std::size_t e = 1; e < 5; ++e) CHECK(r.epoch_loss[e] <= r.epoch_loss[e - 1]);
    const Tensor t = encode_texts(student, tok, content, false).out;
    auto pairs = resolve_pairs(world.pairs, world.images, content.size());
    CHECK(recall_at_k(t, world.images.data, pairs, 1) == 100.0);
    CHECK_THROWS_AS(pretrain_contrastive(student, tok, world.images.data, {0}, {"x"}, 1, 1e-3, 1), Error);
}

TEST_CASE("encoder checkpoints round-trip bitwise") {
    auto f = gradcheck::make_fixture(8);
    f.enc.prompt.position = PromptPosition::append;
    const fs::path p = fs::temp_directory_path() / "vlbias_tests" / "enc.ckpt";
    fs::create_directories(p.parent_path());
    save_encoder(p, f.enc, f.tok);
    auto [enc, tok] = load_encoder(p);
    for (const auto& name : tensor_names()) CHECK(bitwise_equal(enc.tensor(name), f.enc.tensor(name)));
    CHECK(enc.prompt.position == PromptPosition::append);
    CHECK(enc.logit_scale == f.enc.logit_scale);
    CHECK(tok.words() == f.tok.words());
    CHECK(bitwise_equal(encode_texts(enc, tok, f.texts).out, encode_texts(f.enc, f.tok, f.texts).out));
}
