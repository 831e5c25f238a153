#include "vlbias/world.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <random>
#include <unordered_map>

#include "vlbias/error.hpp"

namespace vlbias {

namespace {

const std::vector<std::string>& noun_pool() {
    static const std::vector<std::string> pool = {
        "apple", "anchor", "arrow", "badge", "balloon", "barrel", "basket", "bell", "bicycle",
        "blanket", "bottle", "bucket", "cactus", "candle", "canoe", "carpet", "chain", "chimney",
        "clock", "cloud", "compass", "crown", "drum", "engine", "feather", "fence", "flag", "flute",
        "fountain", "helmet", "kettle", "kite", "ladder", "lantern", "lemon", "magnet", "mirror",
        "needle", "orchid", "paddle", "pillow", "pumpkin", "rocket", "saddle", "scarf", "shovel",
        "spoon", "statue", "teapot", "tent", "tractor", "trumpet", "umbrella", "violin", "wagon",
        "whistle", "window", "yacht", "beach", "forest", "kitchen", "office", "library", "park",
        "stadium", "airport", "museum", "garden", "river", "bridge", "market", "station", "church",
        "harbor", "desert", "mountain", "farm", "school", "hospital", "bakery", "cinema", "concert",
        "lake", "island", "castle", "factory", "garage", "hotel", "restaurant", "subway", "temple",
        "tunnel", "village", "volcano", "waterfall", "zoo", "canyon", "glacier"};
    return pool;
}

// Orthonormal basis (d x r) for the column span of `cols`.
Eigen::MatrixXd span_basis(const Eigen::MatrixXd& cols) {
    if (cols.cols() == 0) return Eigen::MatrixXd(cols.rows(), 0);
    Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(cols);
    qr.setThreshold(1e-10);
    const auto r = qr.rank();
    Eigen::MatrixXd q = qr.householderQ();
    return q.leftCols(r);
}

Eigen::VectorXd project_out(const Eigen::VectorXd& v, const Eigen::MatrixXd& basis) {
    return v - basis * (basis.transpose() * v);
}

}  // namespace

std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream) {
    // splitmix64 finaliser over (seed, stream)
    std::uint64_t z = seed + 0x9E3779B97F4A7C15ULL * (stream + 1);
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
}

void SyntheticWorldConfig::validate() const {
    if (attribute_count < 1) fail_usage("bad_world", "attribute_count must be >= 1");
    if (n_images == 0 || n_images % attribute_count != 0)
        fail_usage("bad_world", "n_images must be a positive multiple of attribute_count");
    if (dim < attribute_count + 1)
        fail_usage("insufficient_dimension", "dim must be at least attribute_count + 1");
    if (bias_strength < 0.0) fail_usage("bad_world", "bias_strength must be >= 0");
    if (!(noise_sigma > 0.0)) fail_usage("bad_world", "noise_sigma must be > 0");
    if (!(direction_ridge > 0.0)) fail_usage("bad_world", "direction_ridge must be > 0");
    if (content_concepts < 2) fail_usage("bad_world", "need at least 2 content concepts");
    if (words_per_caption < 1 || content_concepts * words_per_caption > noun_pool().size())
        fail_usage("bad_world", "content_concepts * words_per_caption exceeds the noun pool (" +
                                    std::to_string(noun_pool().size()) + ")");
}

QuerySet content_queries(const SyntheticWorldConfig& cfg) {
    cfg.validate();
    std::vector<std::string> captions;
    const auto& pool = noun_pool();
    for (std::size_t c = 0; c < cfg.content_concepts; ++c) {
        std::string s;
        for (std::size_t w = 0; w < cfg.words_per_caption; ++w) {
            if (w) s += ' ';
            s += pool[c * cfg.words_per_caption + w];
        }
        captions.push_back(std::move(s));
    }
    return fill_templates({"{}"}, captions, QueryRole::test);
}

WorldQueries default_world_queries(const SyntheticWorldConfig& cfg) {
    return {content_queries(cfg), table1_train_queries(), table1_test_queries()};
}

Tokenizer world_tokenizer(const WorldQueries& q, std::size_t max_len) {
    std::vector<std::string> corpus;
    for (const QuerySet* s : {&q.content, &q.train, &q.test})
        for (const auto& t : s->texts()) corpus.push_back(t);
    return Tokenizer::build(corpus, max_len);
}

World generate_world(const SyntheticWorldConfig& cfg, const WorldQueries& q, const ToyDualEncoder& enc,
                     const Tokenizer& tok) {
    cfg.validate();
    if (q.content.size() == 0 || q.train.size() == 0 || q.test.size() == 0)
        fail_usage("empty_queries", "world generation needs non-empty query sets");
    if (enc.dim() != cfg.dim)
        fail_usage("bad_world", "world dim " + std::to_string(cfg.dim) + " differs from encoder dim " +
                                    std::to_string(enc.dim()));
    const auto d = static_cast<Eigen::Index>(cfg.dim);
    const auto l = cfg.attribute_count;

    const Eigen::MatrixXd tc = encode_texts(enc, tok, q.content.texts(), false).out;  // C x d
    const Eigen::MatrixXd ttr = encode_texts(enc, tok, q.train.texts(), false).out;
    const Eigen::VectorXd tb = ttr.colwise().mean().transpose();
    const Eigen::MatrixXd tt = encode_texts(enc, tok, q.test.texts(), false).out;  // T x d
    const Eigen::VectorXd tte = tt.colwise().mean().transpose();

    const Eigen::MatrixXd content_basis = span_basis(tc.transpose());

    // Stereotype direction g: confined to the subspace that neither content
    // captions, train-query variation nor the train/test mean offset occupy.
    // Within it, a ridge-regularised Fisher direction (cov + lambda I)^-1 mu of
    // the test-query embeddings, so every test query projects onto g with a
    // similar positive loading.
    Eigen::MatrixXd excl(d, content_basis.cols() + ttr.rows() + 1);
    excl << content_basis, (ttr.rowwise() - tb.transpose()).transpose(), tb - tte;
    const Eigen::MatrixXd used = span_basis(excl);
    const Eigen::MatrixXd free = span_basis(Eigen::MatrixXd::Identity(d, d) - used * used.transpose());
    if (free.cols() == 0) fail_usage("insufficient_dimension", "no room for a stereotype direction");
    const Eigen::MatrixXd y = tt * free;
    const Eigen::VectorXd mu = y.colwise().mean().transpose();
    const Eigen::MatrixXd yc = y.rowwise() - mu.transpose();
    Eigen::MatrixXd cov = yc.transpose() * yc / static_cast<double>(y.rows());
    cov.diagonal().array() += cfg.direction_ridge * cov.trace() / static_cast<double>(cov.rows());
    const Eigen::VectorXd g = (free * cov.ldlt().solve(mu)).normalized();
    const double kappa = tte.dot(g);
    if (!(kappa > 1e-9)) fail_usage("insufficient_dimension", "no room for a stereotype direction");

    std::mt19937_64 rng(cfg.seed);
    std::normal_distribution<double> normal(0.0, 1.0);
    auto randn = [&]() {
        Eigen::VectorXd v(d);
        for (Eigen::Index i = 0; i < d; ++i) v(i) = normal(rng);
        return v;
    };

    std::vector<Eigen::VectorXd> u;
    for (std::size_t a = 0; a < l; ++a) {
        const Eigen::Index cb = content_basis.cols(), mt = ttr.rows();
        Eigen::MatrixXd avoid(d, cb + 1 + mt + static_cast<Eigen::Index>(a));
        avoid.leftCols(cb) = content_basis;
        avoid.col(cb) = g;
        avoid.middleCols(cb + 1, mt) = ttr.transpose();
        for (std::size_t b = 0; b < a; ++b) avoid.col(cb + 1 + mt + static_cast<Eigen::Index>(b)) = u[b];
        Eigen::VectorXd v = randn();
        Eigen::VectorXd r = project_out(v, span_basis(avoid));
        // Fall back to orthogonality against earlier directions only when the
        // full constraint set exhausts the space.
        if (r.norm() < 1e-8 * v.norm()) {
            Eigen::MatrixXd prev(d, static_cast<Eigen::Index>(a));
            for (std::size_t b = 0; b < a; ++b) prev.col(static_cast<Eigen::Index>(b)) = u[b];
            r = project_out(v, span_basis(prev));
        }
        u.push_back(r.normalized());
    }

    const std::size_t n = cfg.n_images;
    const std::size_t groups = n / l;
    std::vector<std::size_t> order(groups);
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::shuffle(order.begin(), order.end(), rng);

    World w;
    w.kappa = kappa;
    w.images.normalized = true;
    w.images.data.resize(static_cast<Eigen::Index>(n), d);
    w.attributes.label_names.clear();
    for (std::size_t a = 0; a < l; ++a) w.attributes.label_names.push_back("group" + std::to_string(a));
    const double offset = cfg.bias_strength * cfg.score_gap / kappa;
    const auto n_content = static_cast<std::size_t>(tc.rows());

    char id[32];
    for (std::size_t i = 0; i < n; ++i) {
        const std::size_t a = i % l;
        const std::size_t c = order[i / l] % n_content;
        const double sign = a % 2 == 0 ? 1.0 : -1.0;
        Eigen::VectorXd x = tc.row(static_cast<Eigen::Index>(c)).transpose() + cfg.attribute_scale * u[a] +
                            offset * sign * g;
        x += cfg.noise_sigma * randn();
        w.images.data.row(static_cast<Eigen::Index>(i)) = x.normalized().transpose();
        std::snprintf(id, sizeof id, "img%05zu", i);
        w.images.ids.emplace_back(id);
        w.attributes.ids.emplace_back(id);
        w.attributes.labels.push_back(static_cast<int>(a));
        w.pairs.pairs.emplace_back(id, c);
        w.concept_of.push_back(c);
    }
    round_to_storage(w.images.data);
    return w;
}

std::vector<std::size_t> concepts_from_pairs(const PairTable& pairs, const EmbeddingMatrix& images) {
    std::unordered_map<std::string, std::size_t> row;
    for (std::size_t i = 0; i < images.ids.size(); ++i) row.emplace(images.ids[i], i);
    std::vector<std::size_t> out(images.rows(), static_cast<std::size_t>(-1));
    for (const auto& [id, qi] : pairs.pairs) {
        auto it = row.find(id);
        if (it == row.end()) fail_data("unknown_image", "pair references unknown image '" + id + "'");
        out[it->second] = qi;
    }
    for (std::size_t i = 0; i < out.size(); ++i)
        if (out[i] == static_cast<std::size_t>(-1))
            fail_data("missing_pair", "image '" + images.ids[i] + "' has no ground-truth pair");
    return out;
}

}  // namespace vlbias
