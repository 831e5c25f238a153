#include "vlbias/toy_model.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numeric>
#include <random>
#include <sstream>

#include "vlbias/error.hpp"

namespace vlbias {

// ---- tokenizer -------------------------------------------------------------

std::vector<std::string> Tokenizer::split(const std::string& text) {
    std::vector<std::string> out;
    std::string cur;
    for (unsigned char ch : text) {
        if (std::isalnum(ch)) {
            cur.push_back(static_cast<char>(std::tolower(ch)));
        } else if (!cur.empty()) {
            out.push_back(std::move(cur));
            cur.clear();
        }
    }
    if (!cur.empty()) out.push_back(std::move(cur));
    return out;
}

Tokenizer Tokenizer::build(const std::vector<std::string>& corpus, std::size_t max_len) {
    if (max_len == 0) fail_usage("bad_max_len", "tokenizer max_len must be >= 1");
    std::set<std::string> words;
    for (const auto& text : corpus)
        for (auto& w : split(text)) words.insert(std::move(w));
    Tokenizer t;
    t.max_len_ = max_len;
    t.words_ = {"[PAD]", "[UNK]"};
    t.words_.insert(t.words_.end(), words.begin(), words.end());
    for (std::size_t i = 0; i < t.words_.size(); ++i) t.index_[t.words_[i]] = static_cast<int>(i);
    return t;
}

std::vector<int> Tokenizer::encode(const std::string& text) const {
    std::vector<int> ids;
    for (const auto& w : split(text)) {
        if (ids.size() == max_len_) break;
        auto it = index_.find(w);
        ids.push_back(it == index_.end() ? kUnk : it->second);
    }
    if (ids.empty()) ids.push_back(kUnk);
    ids.resize(max_len_, kPad);
    return ids;
}

nlohmann::ordered_json Tokenizer::to_json() const {
    nlohmann::ordered_json j;
    j["max_len"] = max_len_;
    j["vocab"] = words_;
    return j;
}

Tokenizer Tokenizer::from_json(const nlohmann::json& j) {
    Tokenizer t;
    t.max_len_ = j.at("max_len").get<std::size_t>();
    t.words_ = j.at("vocab").get<std::vector<std::string>>();
    if (t.words_.size() < 2 || t.words_[0] != "[PAD]" || t.words_[1] != "[UNK]")
        fail_data("bad_vocab", "vocabulary must start with [PAD], [UNK]");
    for (std::size_t i = 0; i < t.words_.size(); ++i) t.index_[t.words_[i]] = static_cast<int>(i);
    return t;
}

// ---- encoder ---------------------------------------------------------------

std::string to_string(PromptPosition p) { return p == PromptPosition::prepend ? "prepend" : "append"; }

PromptPosition parse_prompt_position(const std::string& s) {
    if (s == "prepend") return PromptPosition::prepend;
    if (s == "append") return PromptPosition::append;
    fail_usage("bad_prompt_pos", "prompt position must be prepend or append, got '" + s + "'");
}

PromptBlock PromptBlock::zeros(std::size_t n, std::size_t d_tok, PromptPosition pos) {
    return {Tensor::Zero(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(d_tok)), pos};
}

ToyDualEncoder ToyDualEncoder::init(std::size_t vocab_size, const EncoderShape& s, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> normal(0.0, 1.0);
    auto draw = [&](std::size_t r, std::size_t c, double scale) {
        Tensor t(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c));
        for (Eigen::Index i = 0; i < t.rows(); ++i)
            for (Eigen::Index j = 0; j < t.cols(); ++j) t(i, j) = normal(rng) * scale;
        return t;
    };
    ToyDualEncoder e;
    e.E = draw(vocab_size, s.d_tok, s.token_scale);
    e.E.row(Tokenizer::kPad).setZero();
    e.W1 = draw(s.d_tok, s.hidden, s.w1_gain / (s.token_scale * std::sqrt(static_cast<double>(s.d_tok))));
    e.b1 = Tensor::Zero(1, static_cast<Eigen::Index>(s.hidden));
    e.W2 = draw(s.hidden, s.dim, s.w2_scale / std::sqrt(static_cast<double>(s.hidden)));
    e.b2 = Tensor::Zero(1, static_cast<Eigen::Index>(s.dim));
    e.prompt = PromptBlock::zeros(0, s.d_tok);
    return e;
}

const std::vector<std::string>& tensor_names() {
    static const std::vector<std::string> names = {"E", "W1", "b1", "W2", "b2", "P"};
    return names;
}

Tensor& ToyDualEncoder::tensor(const std::string& name) {
    return const_cast<Tensor&>(static_cast<const ToyDualEncoder&>(*this).tensor(name));
}

const Tensor& ToyDualEncoder::tensor(const std::string& name) const {
    if (name == "E") return E;
    if (name == "W1") return W1;
    if (name == "b1") return b1;
    if (name == "W2") return W2;
    if (name == "b2") return b2;
    if (name == "P") return prompt.tokens;
    fail_usage("unknown_tensor", "unknown encoder tensor '" + name + "'");
}

TextTrace encode_texts(const ToyDualEncoder& enc, const Tokenizer& tok, const std::vector<std::string>& texts,
                       bool use_prompt) {
    const auto m = static_cast<Eigen::Index>(texts.size());
    const Eigen::Index n_prompt = use_prompt ? enc.prompt.tokens.rows() : 0;
    TextTrace tr;
    tr.version = enc.version;
    tr.prompt_used = n_prompt > 0;
    tr.count.resize(m);
    tr.pooled = Tensor::Zero(m, enc.E.cols());
    Eigen::RowVectorXd prompt_sum = Eigen::RowVectorXd::Zero(enc.E.cols());
    if (n_prompt > 0) prompt_sum = enc.prompt.tokens.colwise().sum();

    for (Eigen::Index r = 0; r < m; ++r) {
        std::vector<int> ids;
        for (int id : tok.encode(texts[static_cast<std::size_t>(r)])) {
            if (id == Tokenizer::kPad) continue;
            if (id >= enc.E.rows()) fail_data("vocab_mismatch", "token id beyond embedding table");
            ids.push_back(id);
        }
        Eigen::RowVectorXd sum = prompt_sum;
        for (int id : ids) sum += enc.E.row(id);
        tr.count(r) = static_cast<double>(ids.size() + static_cast<std::size_t>(n_prompt));
        tr.pooled.row(r) = sum / tr.count(r);
        tr.token_ids.push_back(std::move(ids));
    }
    tr.hidden = ((tr.pooled * enc.W1).rowwise() + enc.b1.row(0)).array().tanh().matrix();
    Tensor z = (tr.hidden * enc.W2).rowwise() + enc.b2.row(0);
    tr.norm = z.rowwise().norm();
    tr.out = tr.norm.cwiseInverse().asDiagonal() * z;
    return tr;
}

Eigen::VectorXd encode_text(const ToyDualEncoder& enc, const Tokenizer& tok, const std::string& text,
                            bool use_prompt) {
    return encode_texts(enc, tok, {text}, use_prompt).out.row(0).transpose();
}

Tensor normalize_rows(const Tensor& x) {
    Eigen::VectorXd n = x.rowwise().norm();
    for (Eigen::Index i = 0; i < n.size(); ++i)
        if (n(i) == 0.0) fail_numeric("zero_vector", "cannot normalise a zero embedding row");
    return n.cwiseInverse().asDiagonal() * x;
}

Tensor similarity_matrix(const ToyDualEncoder& enc, const Tensor& images, const Tensor& texts) {
    if (images.cols() != texts.cols()) fail_data("shape", "image/text dimension mismatch");
    return enc.logit_scale * images * texts.transpose();
}

TensorMap backward(const ToyDualEncoder& enc, const TextTrace& tr, const Tensor& grad_out,
                   const std::set<std::string>& mask) {
    if (tr.version != enc.version) fail_usage("stale_trace", "trace was recorded before a parameter update");
    if (grad_out.rows() != tr.out.rows() || grad_out.cols() != tr.out.cols())
        fail_data("shape", "upstream gradient shape differs from text outputs");

    TensorMap g;
    // d/dz of z/|z|: (I - t t^T) / |z|
    Eigen::VectorXd proj = (tr.out.array() * grad_out.array()).rowwise().sum();
    Tensor dz = tr.norm.cwiseInverse().asDiagonal() * (grad_out - proj.asDiagonal() * tr.out);
    if (mask.count("W2")) g["W2"] = tr.hidden.transpose() * dz;
    if (mask.count("b2")) g["b2"] = dz.colwise().sum();
    if (!(mask.count("W1") || mask.count("b1") || mask.count("E") || mask.count("P"))) return g;

    Tensor da = ((dz * enc.W2.transpose()).array() * (1.0 - tr.hidden.array().square())).matrix();
    if (mask.count("W1")) g["W1"] = tr.pooled.transpose() * da;
    if (mask.count("b1")) g["b1"] = da.colwise().sum();
    if (!(mask.count("E") || mask.count("P"))) return g;

    Tensor dpool = tr.count.cwiseInverse().asDiagonal() * (da * enc.W1.transpose());
    if (mask.count("E")) {
        Tensor dE = Tensor::Zero(enc.E.rows(), enc.E.cols());
        for (std::size_t r = 0; r < tr.token_ids.size(); ++r)
            for (int id : tr.token_ids[r]) dE.row(id) += dpool.row(static_cast<Eigen::Index>(r));
        g["E"] = std::move(dE);
    }
    if (mask.count("P")) {
        const Eigen::Index n = enc.prompt.tokens.rows();
        Tensor dP(n, enc.prompt.tokens.cols());
        // Every prompt row enters every pooled vector with weight 1/count.
        Eigen::RowVectorXd col = tr.prompt_used ? Eigen::RowVectorXd(dpool.colwise().sum())
                                                : Eigen::RowVectorXd::Zero(enc.prompt.tokens.cols());
        for (Eigen::Index j = 0; j < n; ++j) dP.row(j) = col;
        g["P"] = std::move(dP);
    }
    return g;
}

// ---- adaptation ------------------------------------------------------------

std::string to_string(AdaptMode m) {
    switch (m) {
        case AdaptMode::prompt: return "prompt";
        case AdaptMode::projection: return "projection";
        case AdaptMode::text_encoder: return "text_encoder";
        case AdaptMode::full: return "full";
    }
    return "prompt";
}

AdaptMode parse_adapt_mode(const std::string& s) {
    if (s == "prompt") return AdaptMode::prompt;
    if (s == "projection") return AdaptMode::projection;
    if (s == "text_encoder") return AdaptMode::text_encoder;
    if (s == "full") return AdaptMode::full;
    fail_usage("bad_mode", "mode must be prompt, projection, text_encoder or full; got '" + s + "'");
}

std::set<std::string> mask_for(AdaptMode m) {
    switch (m) {
        case AdaptMode::prompt: return {"P"};
        case AdaptMode::projection: return {"W2", "b2"};
        case AdaptMode::text_encoder: return {"E", "W1", "b1", "W2", "b2"};
        case AdaptMode::full: return {"E", "W1", "b1", "W2", "b2", "P"};
    }
    return {};
}

void AdamState::apply(std::map<std::string, Tensor*>& params, const TensorMap& grads, double lr) {
    for (const auto& [name, g] : grads)
        if (!g.allFinite()) fail_numeric("nan_gradient", "non-finite gradient for tensor " + name);
    ++step;
    const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(step));
    const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(step));
    for (const auto& [name, g] : grads) {
        auto it = params.find(name);
        if (it == params.end()) fail_usage("unknown_tensor", "gradient for untracked tensor " + name);
        Tensor& p = *it->second;
        auto& mm = m[name];
        auto& vv = v[name];
        if (mm.size() == 0) {
            mm = Tensor::Zero(p.rows(), p.cols());
            vv = Tensor::Zero(p.rows(), p.cols());
        }
        mm = cfg.beta1 * mm + (1.0 - cfg.beta1) * g;
        vv = cfg.beta2 * vv + (1.0 - cfg.beta2) * g.cwiseAbs2();
        p.array() -= lr * (mm.array() / bc1) / ((vv.array() / bc2).sqrt() + cfg.eps);
    }
}

AdaptationState AdaptationState::create(AdaptMode mode) {
    AdaptationState s;
    s.mode = mode;
    s.mask = mask_for(mode);
    return s;
}

void adam_step(AdaptationState& state, ToyDualEncoder& enc, const TensorMap& grads, double lr) {
    std::map<std::string, Tensor*> params;
    for (const auto& [name, g] : grads) {
        if (!state.mask.count(name)) fail_usage("mask_violation", "gradient for tensor outside mask: " + name);
        params[name] = &enc.tensor(name);
    }
    state.adam.apply(params, grads, lr);
    ++enc.version;
}

// ---- pretraining -----------------------------------------------------------

double contrastive_loss(const ToyDualEncoder& enc, const Tensor& images, const Tensor& texts, Tensor* grad_texts) {
    const Eigen::Index b = images.rows();
    if (b < 2) fail_usage("small_batch", "contrastive batch must contain at least 2 pairs");
    const Tensor s = similarity_matrix(enc, images, texts);  // images x texts
    auto softmax_rows = [](const Tensor& x) {
        Tensor p = x.colwise() - x.rowwise().maxCoeff();
        p = p.array().exp().matrix();
        return Tensor(p.array().colwise() / p.rowwise().sum().array());
    };
    const Tensor p_i2t = softmax_rows(s);
    const Tensor p_t2i = softmax_rows(s.transpose());
    double loss = 0.0;
    for (Eigen::Index i = 0; i < b; ++i) loss -= std::log(p_i2t(i, i)) + std::log(p_t2i(i, i));
    loss /= 2.0 * static_cast<double>(b);
    if (grad_texts) {
        Tensor ds = (p_i2t + p_t2i.transpose()) / (2.0 * static_cast<double>(b));
        ds.diagonal().array() -= 1.0 / static_cast<double>(b);
        *grad_texts = enc.logit_scale * ds.transpose() * images;
    }
    return loss;
}

PretrainResult pretrain_contrastive(ToyDualEncoder& enc, const Tokenizer& tok, const Tensor& images,
                                    const std::vector<std::size_t>& pair_images,
                                    const std::vector<std::string>& pair_texts, std::size_t epochs, double lr,
                                    std::uint64_t seed, std::size_t batch_size) {
    if (pair_images.size() != pair_texts.size()) fail_data("shape", "pair images/texts differ in length");
    if (pair_images.size() < 2 || batch_size < 2) fail_usage("small_batch", "pretraining needs batches of >= 2 pairs");

    // Group pairs by caption so that no batch contains a caption twice.
    std::map<std::string, std::vector<std::size_t>> by_text;
    for (std::size_t p = 0; p < pair_texts.size(); ++p) by_text[pair_texts[p]].push_back(p);
    if (by_text.size() < 2) fail_usage("small_batch", "pretraining needs at least 2 distinct captions");
    std::vector<std::vector<std::size_t>> groups;
    for (auto& [text, members] : by_text) groups.push_back(members);

    AdaptationState state = AdaptationState::create(AdaptMode::text_encoder);
    std::mt19937_64 rng(seed);
    PretrainResult res;
    for (std::size_t ep = 0; ep < epochs; ++ep) {
        std::size_t rounds = 0;
        for (auto& g : groups) {
            std::shuffle(g.begin(), g.end(), rng);
            rounds = std::max(rounds, g.size());
        }
        double loss_sum = 0.0;
        std::size_t n_batches = 0;
        for (std::size_t r = 0; r < rounds; ++r) {
            std::vector<std::size_t> picks;
            for (const auto& g : groups)
                if (r < g.size()) picks.push_back(g[r]);
            std::shuffle(picks.begin(), picks.end(), rng);
            for (std::size_t start = 0; start + 1 < picks.size(); start += batch_size) {
                const std::size_t end = std::min(picks.size(), start + batch_size);
                if (end - start < 2) break;
                Tensor x(static_cast<Eigen::Index>(end - start), images.cols());
                std::vector<std::string> texts;
                for (std::size_t q = start; q < end; ++q) {
                    x.row(static_cast<Eigen::Index>(q - start)) = images.row(static_cast<Eigen::Index>(pair_images[picks[q]]));
                    texts.push_back(pair_texts[picks[q]]);
                }
                auto tr = encode_texts(enc, tok, texts, false);
                Tensor gt;
                loss_sum += contrastive_loss(enc, x, tr.out, &gt);
                ++n_batches;
                adam_step(state, enc, backward(enc, tr, gt, state.mask), lr);
            }
        }
        res.epoch_loss.push_back(n_batches ? loss_sum / static_cast<double>(n_batches) : 0.0);
    }
    return res;
}

// ---- checkpoints -----------------------------------------------------------

namespace {

constexpr char kTensorMagic[4] = {'V', 'L', 'B', 'T'};

template <typename T>
void put(std::string& buf, T v) {
    char bytes[sizeof(T)];
    std::memcpy(bytes, &v, sizeof(T));
    buf.append(bytes, sizeof(T));  // little-endian host assumed
}

template <typename T>
T take(const std::string& buf, std::size_t& pos, const std::string& path) {
    if (buf.size() - pos < sizeof(T)) fail_data("truncated", "truncated tensor file: " + path);
    T v;
    std::memcpy(&v, buf.data() + pos, sizeof(T));
    pos += sizeof(T);
    return v;
}

}  // namespace

void save_tensor_file(const std::filesystem::path& path, const std::vector<std::pair<std::string, Tensor>>& tensors,
                      const nlohmann::ordered_json& meta) {
    std::string buf(kTensorMagic, 4);
    put<std::uint32_t>(buf, 1);
    put<std::uint32_t>(buf, static_cast<std::uint32_t>(tensors.size()));
    for (const auto& [name, t] : tensors) {
        put<std::uint16_t>(buf, static_cast<std::uint16_t>(name.size()));
        buf += name;
        put<std::uint32_t>(buf, static_cast<std::uint32_t>(t.rows()));
        put<std::uint32_t>(buf, static_cast<std::uint32_t>(t.cols()));
        for (Eigen::Index i = 0; i < t.rows(); ++i)
            for (Eigen::Index j = 0; j < t.cols(); ++j) put<double>(buf, t(i, j));
    }
    const std::string js = meta.dump();
    put<std::uint32_t>(buf, static_cast<std::uint32_t>(js.size()));
    buf += js;
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) fail_data("io", "cannot write " + path.string());
    out.write(buf.data(), static_cast<std::streamsize>(buf.size()));
}

std::pair<std::vector<std::pair<std::string, Tensor>>, nlohmann::json> load_tensor_file(
    const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) fail_data("missing_file", "cannot open " + path.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    const std::string buf = ss.str();
    const std::string p = path.string();
    if (buf.size() < 4 || std::memcmp(buf.data(), kTensorMagic, 4) != 0)
        fail_data("bad_magic", "not a tensor checkpoint (bad magic): " + p);
    std::size_t pos = 4;
    if (take<std::uint32_t>(buf, pos, p) != 1) fail_data("bad_version", "unsupported checkpoint version: " + p);
    const auto count = take<std::uint32_t>(buf, pos, p);
    std::vector<std::pair<std::string, Tensor>> tensors;
    for (std::uint32_t k = 0; k < count; ++k) {
        const auto len = take<std::uint16_t>(buf, pos, p);
        if (buf.size() - pos < len) fail_data("truncated", "truncated tensor file: " + p);
        std::string name = buf.substr(pos, len);
        pos += len;
        const auto rows = take<std::uint32_t>(buf, pos, p);
        const auto cols = take<std::uint32_t>(buf, pos, p);
        if (static_cast<std::uint64_t>(rows) * cols * 8 > buf.size() - pos)
            fail_data("truncated", "truncated tensor payload: " + p);
        Tensor t(rows, cols);
        for (Eigen::Index i = 0; i < t.rows(); ++i)
            for (Eigen::Index j = 0; j < t.cols(); ++j) t(i, j) = take<double>(buf, pos, p);
        tensors.emplace_back(std::move(name), std::move(t));
    }
    const auto js_len = take<std::uint32_t>(buf, pos, p);
    if (buf.size() - pos < js_len) fail_data("truncated", "truncated checkpoint metadata: " + p);
    nlohmann::json meta;
    try {
        meta = nlohmann::json::parse(buf.substr(pos, js_len));
    } catch (const nlohmann::json::exception& e) {
        fail_data("bad_json", p + ": " + e.what());
    }
    return {std::move(tensors), std::move(meta)};
}

void save_encoder(const std::filesystem::path& path, const ToyDualEncoder& enc, const Tokenizer& tok) {
    std::vector<std::pair<std::string, Tensor>> ts;
    for (const auto& n : tensor_names()) ts.emplace_back(n, enc.tensor(n));
    nlohmann::ordered_json meta;
    meta["kind"] = "toy_dual_encoder";
    meta["logit_scale"] = enc.logit_scale;
    meta["prompt_position"] = to_string(enc.prompt.position);
    meta["tokenizer"] = tok.to_json();
    save_tensor_file(path, ts, meta);
}

std::pair<ToyDualEncoder, Tokenizer> load_encoder(const std::filesystem::path& path) {
    auto [ts, meta] = load_tensor_file(path);
    if (meta.value("kind", "") != "toy_dual_encoder")
        fail_data("bad_checkpoint", "not an encoder checkpoint: " + path.string());
    ToyDualEncoder enc;
    std::set<std::string> seen;
    for (auto& [name, t] : ts) {
        enc.tensor(name) = std::move(t);
        seen.insert(name);
    }
    for (const auto& n : tensor_names())
        if (!seen.count(n)) fail_data("bad_checkpoint", "checkpoint lacks tensor " + n);
    enc.logit_scale = meta.at("logit_scale").get<double>();
    enc.prompt.position = parse_prompt_position(meta.at("prompt_position").get<std::string>());
    Tokenizer tok = Tokenizer::from_json(meta.at("tokenizer"));
    if (static_cast<std::size_t>(enc.E.rows()) != tok.vocab_size())
        fail_data("bad_checkpoint", "vocabulary size differs from embedding table");
    return {std::move(enc), std::move(tok)};
}

}  // namespace vlbias
