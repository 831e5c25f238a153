#include <doctest.h>

#include <numeric>
#include <random>

#include "audit_fixture.hpp"
#include "vlbias/error.hpp"
#include "vlbias/zs_audit.hpp"

using namespace vlbias;

namespace {

Eigen::MatrixXd random_unit(std::mt19937_64& rng, int n, int d) {
    std::normal_distribution<double> nd;
    Eigen::MatrixXd m(n, d);
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = nd(rng);
    m.rowwise().normalize();
    return m;
}

std::vector<std::size_t> argmax_oracle(const Eigen::MatrixXd& img, const Eigen::MatrixXd& cls) {
    std::vector<std::size_t> out;
    for (Eigen::Index i = 0; i < img.rows(); ++i) {
        std::size_t best = 0;
        double bv = -1e300;
        for (Eigen::Index c = 0; c < cls.rows(); ++c) {
            double v = 0;
            for (Eigen::Index j = 0; j < img.cols(); ++j) v += img(i, j) * cls(c, j);
            if (v > bv) {
                bv = v;
                best = static_cast<std::size_t>(c);
            }
        }
        out.push_back(best);
    }
    return out;
}

}  // namespace

TEST_CASE("zero_shot_classify") {
    Eigen::MatrixXd cls = Eigen::MatrixXd::Identity(3, 3);
    Eigen::MatrixXd img(2, 3);
    img << 1, 0, 0, 0.5, 0.5, 0;
    CHECK(zero_shot_classify(img, cls) == std::vector<std::size_t>{0, 0});
    std::mt19937_64 rng(8);
    auto c5 = random_unit(rng, 5, 7);
    auto im = random_unit(rng, 100, 7);
    CHECK(zero_shot_classify(im, c5) == argmax_oracle(im, c5));
    CHECK_THROWS_AS(zero_shot_classify(im, Eigen::MatrixXd::Identity(3, 3)), Error);
}

TEST_CASE("misclassification rates on the six-image fixture") {
    auto classes = fixture::audit_classes();
    auto imgs = fixture::audit_images();
    auto preds = zero_shot_classify(imgs.data, fixture::class_embeddings());
    auto rates = misclassification_rates(preds, fixture::audit_groups(), classes);
    REQUIRE(rates.size() == 2);
    CHECK(rates[0].group == "a");
    CHECK(*rates[0].crime_rate == 25.0);
    CHECK(*rates[0].nonhuman_rate == 25.0);
    CHECK(*rates[1].crime_rate == 0.0);
    CHECK(*rates[1].nonhuman_rate == 50.0);
    CHECK(audit_to_markdown(rates) == fixture::kExpectedMarkdown);
    auto j = audit_to_json(rates);
    CHECK(j["rows"][0] == "Crime-related");
    CHECK(j["rows"][1] == "Non-human");
}

TEST_CASE("misclassification rates hand counts and empty groups") {
    auto classes = fixture::audit_classes();
    AttributeTable t;
    t.ids = {"a", "b", "c", "d"};
    t.labels = {0, 0, 0, 0};
    t.label_names = {"g", "empty"};
    auto r = misclassification_rates({0, 1, 3, 0}, t, classes);
    CHECK(*r[0].crime_rate == 0.0);
    CHECK(*r[0].nonhuman_rate == 25.0);
    CHECK(!r[1].crime_rate.has_value());
    CHECK(audit_to_markdown(r).find("—") != std::string::npos);
    r = misclassification_rates({0, 1, 1, 0}, t, classes);
    CHECK(*r[0].crime_rate == 0.0);
    CHECK(*r[0].nonhuman_rate == 0.0);
}

TEST_CASE("audit class validation") {
    auto c = fixture::audit_classes();
    c.crime_classes.clear();
    CHECK_THROWS_AS(c.validate(), Error);
    c = fixture::audit_classes();
    c.nonhuman_classes = {"thief"};
    CHECK_THROWS_AS(c.validate(), Error);
    c = fixture::audit_classes();
    CHECK(c.class_queries().queries[2].text == "a photo of a thief");
}

TEST_CASE("recall at k") {
    Eigen::MatrixXd s(3, 3);
    s << 0.9, 0.1, 0.1,
         0.1, 0.9, 0.1,
         0.1, 0.1, 0.9;
    ResolvedPairs p{{0, 1, 2}, {0, 1, 2}};
    CHECK(recall_at_k(s, p, 1) == 100.0);
    // True image always ranked second.
    Eigen::MatrixXd t(3, 3);
    t << 0.5, 0.9, 0.1,
         0.1, 0.5, 0.9,
         0.9, 0.1, 0.5;
    CHECK(recall_at_k(t, p, 1) == 0.0);
    CHECK(recall_at_k(t, p, 2) == 100.0);
}

TEST_CASE("recall at k on random scores matches the analytic expectation") {
    double total = 0;
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
        std::mt19937_64 rng(seed);
        std::uniform_real_distribution<double> u;
        Eigen::MatrixXd s(100, 100);
        for (Eigen::Index i = 0; i < s.size(); ++i) s.data()[i] = u(rng);
        ResolvedPairs p;
        for (std::size_t i = 0; i < 100; ++i) {
            p.image_row.push_back(i);
            p.query.push_back(i);
        }
        double prev = 0;
        for (std::size_t k : {1u, 5u, 10u}) {
            const double r = recall_at_k(s, p, k);
            CHECK(r >= prev);
            prev = r;
        }
        total += recall_at_k(s, p, 5);
    }
    CHECK(std::abs(total / 20 - 5.0) <= 5.0);
}

TEST_CASE("zs accuracy") {
    Eigen::MatrixXd cls = Eigen::MatrixXd::Identity(3, 3);
    Eigen::MatrixXd img = Eigen::MatrixXd::Identity(3, 3);
    CHECK(zs_accuracy(img, cls, {0, 1, 2}) == 100.0);
    CHECK(zs_accuracy(img, cls, {1, 2, 0}) == 0.0);
    std::mt19937_64 rng(3);
    auto c = random_unit(rng, 5, 6);
    auto im = random_unit(rng, 50, 6);
    std::vector<std::size_t> truth(50);
    for (auto& x : truth) x = rng() % 5;
    auto pred = argmax_oracle(im, c);
    double hits = 0;
    for (std::size_t i = 0; i < 50; ++i) hits += pred[i] == truth[i];
    CHECK(zs_accuracy(im, c, truth) == doctest::Approx(100.0 * hits / 50));
}

TEST_CASE("rates are invariant under image reordering") {
    auto classes = fixture::audit_classes();
    auto groups = fixture::audit_groups();
    std::vector<std::size_t> preds = {0, 1, 2, 3, 0, 3};
    std::vector<std::size_t> order = {5, 2, 0, 4, 1, 3};
    AttributeTable g2 = groups;
    std::vector<std::size_t> p2(6);
    for (std::size_t i = 0; i < 6; ++i) {
        g2.ids[i] = groups.ids[order[i]];
        g2.labels[i] = groups.labels[order[i]];
        p2[i] = preds[order[i]];
    }
    CHECK(audit_to_markdown(misclassification_rates(preds, groups, classes)) ==
          audit_to_markdown(misclassification_rates(p2, g2, classes)));
}
