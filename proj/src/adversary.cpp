#include "vlbias/adversary.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "vlbias/error.hpp"
#include "vlbias/ranking_metrics.hpp"
#include "vlbias/world.hpp"

namespace vlbias {

using json = nlohmann::ordered_json;

// ---- adversary network -----------------------------------------------------

Adversary Adversary::init(std::size_t inputs, std::size_t labels, std::uint64_t seed) {
    if (inputs == 0 || labels == 0) fail_usage("bad_adversary", "adversary needs inputs >= 1 and labels >= 1");
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> normal(0.0, 1.0);
    auto he = [&](std::size_t r, std::size_t c) {
        Tensor t(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c));
        const double s = std::sqrt(2.0 / static_cast<double>(r));
        for (Eigen::Index i = 0; i < t.rows(); ++i)
            for (Eigen::Index j = 0; j < t.cols(); ++j) t(i, j) = normal(rng) * s;
        return t;
    };
    Adversary a;
    a.A1 = he(inputs, kHidden);
    a.a1 = Tensor::Zero(1, kHidden);
    a.A2 = he(kHidden, kHidden);
    a.a2 = Tensor::Zero(1, kHidden);
    a.A3 = Tensor::Zero(kHidden, static_cast<Eigen::Index>(labels));
    a.a3 = Tensor::Zero(1, static_cast<Eigen::Index>(labels));
    return a;
}

std::map<std::string, Tensor*> Adversary::params() {
    return {{"A1", &A1}, {"a1", &a1}, {"A2", &A2}, {"a2", &a2}, {"A3", &A3}, {"a3", &a3}};
}

std::vector<std::pair<std::string, Tensor>> Adversary::named_tensors() const {
    return {{"A1", A1}, {"a1", a1}, {"A2", A2}, {"a2", a2}, {"A3", A3}, {"a3", a3}};
}

std::pair<double, AdvTrace> adv_forward_loss(const Adversary& adv, const Tensor& S, const std::vector<int>& labels) {
    if (S.cols() != adv.A1.rows()) fail_data("shape", "similarity width differs from adversary input size");
    if (static_cast<std::size_t>(S.rows()) != labels.size() || labels.empty())
        fail_data("shape", "adversary batch and labels differ in length");
    for (int y : labels)
        if (y < 0 || static_cast<std::size_t>(y) >= adv.labels())
            fail_data("label_range", "attribute label out of range for adversary");

    AdvTrace tr;
    tr.S = S;
    tr.labels = labels;
    tr.h1 = ((S * adv.A1).rowwise() + adv.a1.row(0)).cwiseMax(0.0);
    tr.h2 = ((tr.h1 * adv.A2).rowwise() + adv.a2.row(0)).cwiseMax(0.0);
    Tensor logits = (tr.h2 * adv.A3).rowwise() + adv.a3.row(0);
    Tensor shifted = logits.colwise() - logits.rowwise().maxCoeff();
    Eigen::VectorXd lse = shifted.array().exp().rowwise().sum().log();
    tr.probs = (shifted.colwise() - lse).array().exp();
    double loss = 0.0;
    for (std::size_t i = 0; i < labels.size(); ++i)
        loss += lse(static_cast<Eigen::Index>(i)) - shifted(static_cast<Eigen::Index>(i), labels[i]);
    return {loss / static_cast<double>(labels.size()), std::move(tr)};
}

AdvGrads adv_backward(const Adversary& adv, const AdvTrace& tr) {
    const auto b = static_cast<double>(tr.labels.size());
    Tensor dlogits = tr.probs;
    for (std::size_t i = 0; i < tr.labels.size(); ++i) dlogits(static_cast<Eigen::Index>(i), tr.labels[i]) -= 1.0;
    dlogits /= b;

    AdvGrads g;
    g.params["A3"] = tr.h2.transpose() * dlogits;
    g.params["a3"] = dlogits.colwise().sum();
    Tensor dz2 = ((dlogits * adv.A3.transpose()).array() * (tr.h2.array() > 0.0).cast<double>()).matrix();
    g.params["A2"] = tr.h1.transpose() * dz2;
    g.params["a2"] = dz2.colwise().sum();
    Tensor dz1 = ((dz2 * adv.A2.transpose()).array() * (tr.h1.array() > 0.0).cast<double>()).matrix();
    g.params["A1"] = tr.S.transpose() * dz1;
    g.params["a1"] = dz1.colwise().sum();
    g.dS = dz1 * adv.A1.transpose();
    return g;
}

// ---- schedule / metrics ----------------------------------------------------

void TrainSchedule::validate() const {
    if (batch_size == 0 || alternation_block == 0 || max_epochs == 0 || bias_k == 0 || recall_k == 0)
        fail_usage("bad_schedule", "schedule counts must be positive");
    if (!(lr_model > 0.0) || !(lr_adv > 0.0)) fail_usage("bad_schedule", "learning rates must be positive");
    if (!(early_stop_fraction > 0.0 && early_stop_fraction <= 1.0))
        fail_usage("bad_schedule", "early_stop_fraction must lie in (0, 1]");
}

json TrainSchedule::to_json() const {
    json j;
    j["batch_size"] = batch_size;
    j["lr_model"] = lr_model;
    j["lr_adv"] = lr_adv;
    j["warmup_adv_epochs"] = warmup_adv_epochs;
    j["alternation_block"] = alternation_block;
    j["max_epochs"] = max_epochs;
    j["early_stop_fraction"] = early_stop_fraction;
    j["seed"] = seed;
    j["bias_k"] = bias_k;
    j["recall_k"] = recall_k;
    return j;
}

json EvalMetrics::to_json() const {
    json j;
    j["test_max_skew"] = test_max_skew;
    j["test_ndkl"] = test_ndkl;
    j["train_max_skew"] = train_max_skew;
    j["recall"] = recall;
    j["zs_accuracy"] = zs_accuracy;
    return j;
}

EvalMetrics EvalMetrics::from_json(const nlohmann::json& j) {
    EvalMetrics m;
    m.test_max_skew = j.at("test_max_skew").get<double>();
    m.test_ndkl = j.at("test_ndkl").get<double>();
    m.train_max_skew = j.at("train_max_skew").get<double>();
    m.recall = j.at("recall").get<double>();
    m.zs_accuracy = j.at("zs_accuracy").get<double>();
    return m;
}

EvalMetrics evaluate(const ToyDualEncoder& enc, const Tokenizer& tok, const DebiasData& data, std::size_t bias_k,
                     std::size_t recall_k, bool use_prompt) {
    EvalMetrics m;
    const Tensor t_test = encode_texts(enc, tok, data.test.texts(), use_prompt).out;
    const auto test = measure_bias(similarity_matrix(enc, data.images, t_test), data.attrs, data.test, bias_k);
    m.test_max_skew = test.mean_max_skew;
    m.test_ndkl = test.mean_ndkl;
    const Tensor t_train = encode_texts(enc, tok, data.train.texts(), use_prompt).out;
    m.train_max_skew = mean_max_skew(similarity_matrix(enc, data.images, t_train), data.attrs.labels,
                                     data.attrs.label_count(), std::min(bias_k, data.attrs.size()));

    const Tensor t_content = encode_texts(enc, tok, data.content.texts(), use_prompt).out;
    ResolvedPairs pairs;
    pairs.query = data.concept_of;
    pairs.image_row.resize(data.concept_of.size());
    std::iota(pairs.image_row.begin(), pairs.image_row.end(), std::size_t{0});
    m.recall = recall_at_k(similarity_matrix(enc, data.images, t_content), pairs, recall_k);
    m.zs_accuracy = zs_accuracy(data.images, t_content, data.concept_of);
    return m;
}

// ---- training steps --------------------------------------------------------

double adversary_step(Adversary& adv, const ToyDualEncoder& enc, const Tokenizer& tok, const Tensor& x,
                      const std::vector<int>& y, const QuerySet& train, double lr) {
    const Tensor t = encode_texts(enc, tok, train.texts()).out;
    auto [loss, tr] = adv_forward_loss(adv, similarity_matrix(enc, x, t), y);
    if (!std::isfinite(loss)) fail_numeric("nan_loss", "non-finite adversary loss");
    auto g = adv_backward(adv, tr);
    auto params = adv.params();
    adv.adam.apply(params, g.params, lr);
    return loss;
}

double debias_step(ToyDualEncoder& enc, AdaptationState& state, const Adversary& adv, const Tokenizer& tok,
                   const Tensor& x, const std::vector<int>& y, const QuerySet& train, double lr) {
    const TextTrace trace = encode_texts(enc, tok, train.texts());
    auto [loss, tr] = adv_forward_loss(adv, similarity_matrix(enc, x, trace.out), y);
    if (!std::isfinite(loss)) fail_numeric("nan_loss", "non-finite adversary loss");
    const Tensor dS = adv_backward(adv, tr).dS;
    // S = scale * X T^T; ascend L by descending -L.
    const Tensor dT = -enc.logit_scale * dS.transpose() * x;
    adam_step(state, enc, backward(enc, trace, dT, state.mask), lr);
    return loss;
}

// ---- run state -------------------------------------------------------------

namespace {

void put_encoder(std::vector<std::pair<std::string, Tensor>>& out, const std::string& prefix,
                 const ToyDualEncoder& e) {
    for (const auto& n : tensor_names()) out.emplace_back(prefix + n, e.tensor(n));
}

void put_adam(std::vector<std::pair<std::string, Tensor>>& out, const std::string& prefix, const AdamState& a) {
    for (const auto& [n, t] : a.m) out.emplace_back(prefix + "m." + n, t);
    for (const auto& [n, t] : a.v) out.emplace_back(prefix + "v." + n, t);
}

bool starts_with(const std::string& s, const std::string& p) { return s.rfind(p, 0) == 0; }

}  // namespace

void save_run_state(const std::filesystem::path& path, const RunState& s, const Tokenizer& tok) {
    std::vector<std::pair<std::string, Tensor>> ts;
    put_encoder(ts, "enc.", s.encoder);
    put_encoder(ts, "best.", s.best_encoder);
    put_adam(ts, "adapt.", s.adapt.adam);
    for (auto& [n, t] : s.adversary.named_tensors()) ts.emplace_back("adv." + n, t);
    put_adam(ts, "advopt.", s.adversary.adam);
    json meta;
    meta["kind"] = "debias_run_state";
    meta["next_epoch"] = s.next_epoch;
    meta["global_batch"] = s.global_batch;
    meta["mode"] = to_string(s.adapt.mode);
    meta["adapt_step"] = s.adapt.adam.step;
    meta["adv_step"] = s.adversary.adam.step;
    meta["logit_scale"] = s.encoder.logit_scale;
    meta["prompt_position"] = to_string(s.encoder.prompt.position);
    meta["baseline"] = s.baseline.to_json();
    meta["best_epoch"] = s.best_epoch ? json(*s.best_epoch) : json(nullptr);
    meta["best"] = s.best_metrics.to_json();
    meta["record_lines"] = s.record_lines;
    meta["tokenizer"] = tok.to_json();
    save_tensor_file(path, ts, meta);
}

RunState load_run_state(const std::filesystem::path& path) {
    auto [ts, meta] = load_tensor_file(path);
    if (meta.value("kind", "") != "debias_run_state")
        fail_data("bad_checkpoint", "not a debias run state: " + path.string());
    RunState s;
    s.adapt = AdaptationState::create(parse_adapt_mode(meta.at("mode").get<std::string>()));
    for (auto& [name, t] : ts) {
        if (starts_with(name, "enc.")) s.encoder.tensor(name.substr(4)) = t;
        else if (starts_with(name, "best.")) s.best_encoder.tensor(name.substr(5)) = t;
        else if (starts_with(name, "adapt.m.")) s.adapt.adam.m[name.substr(8)] = t;
        else if (starts_with(name, "adapt.v.")) s.adapt.adam.v[name.substr(8)] = t;
        else if (starts_with(name, "advopt.m.")) s.adversary.adam.m[name.substr(9)] = t;
        else if (starts_with(name, "advopt.v.")) s.adversary.adam.v[name.substr(9)] = t;
        else if (starts_with(name, "adv.")) *s.adversary.params().at(name.substr(4)) = t;
        else fail_data("bad_checkpoint", "unexpected tensor '" + name + "' in run state");
    }
    s.next_epoch = meta.at("next_epoch").get<std::size_t>();
    s.global_batch = meta.at("global_batch").get<std::uint64_t>();
    s.adapt.adam.step = meta.at("adapt_step").get<std::uint64_t>();
    s.adversary.adam.step = meta.at("adv_step").get<std::uint64_t>();
    for (ToyDualEncoder* e : {&s.encoder, &s.best_encoder}) {
        e->logit_scale = meta.at("logit_scale").get<double>();
        e->prompt.position = parse_prompt_position(meta.at("prompt_position").get<std::string>());
    }
    s.baseline = EvalMetrics::from_json(meta.at("baseline"));
    if (!meta.at("best_epoch").is_null()) s.best_epoch = meta.at("best_epoch").get<std::size_t>();
    s.best_metrics = EvalMetrics::from_json(meta.at("best"));
    s.record_lines = meta.at("record_lines").get<std::size_t>();
    return s;
}

// ---- loop ------------------------------------------------------------------

double DebiasResult::proxy_retention() const {
    return std::min(best.recall / baseline.recall, best.zs_accuracy / baseline.zs_accuracy);
}

double DebiasResult::final_retention() const {
    return std::min(last.recall / baseline.recall, last.zs_accuracy / baseline.zs_accuracy);
}

double DebiasResult::bias_reduction() const { return 1.0 - best.test_max_skew / baseline.test_max_skew; }

namespace {

std::vector<std::size_t> epoch_order(std::size_t n, std::uint64_t seed, std::size_t epoch) {
    std::vector<std::size_t> perm(n);
    std::iota(perm.begin(), perm.end(), std::size_t{0});
    std::mt19937_64 rng(derive_seed(seed, 1000 + epoch));
    std::shuffle(perm.begin(), perm.end(), rng);
    return perm;
}

DebiasResult run_loop(const DebiasData& data, RunState s, const Tokenizer& tok, const TrainSchedule& sch,
                      const DebiasOptions& opt) {
    sch.validate();
    const std::size_t n = static_cast<std::size_t>(data.images.rows());
    const std::size_t n_batches = (n + sch.batch_size - 1) / sch.batch_size;
    const double floor_recall = sch.early_stop_fraction * s.baseline.recall;
    const double floor_acc = sch.early_stop_fraction * s.baseline.zs_accuracy;

    DebiasResult res;
    res.baseline = s.baseline;
    res.stop_reason = "max_epochs";
    auto& rec = res.record;
    const std::size_t lines_before = s.record_lines;

    std::size_t epoch = s.next_epoch;
    bool evaluated = false;
    try {
        for (; epoch < sch.max_epochs; ++epoch) {
            const auto perm = epoch_order(n, sch.seed, epoch);
            const bool warmup = epoch < sch.warmup_adv_epochs;
            for (std::size_t b = 0; b < n_batches; ++b) {
                const std::size_t lo = b * sch.batch_size, hi = std::min(n, lo + sch.batch_size);
                Tensor x(static_cast<Eigen::Index>(hi - lo), data.images.cols());
                std::vector<int> y;
                for (std::size_t i = lo; i < hi; ++i) {
                    x.row(static_cast<Eigen::Index>(i - lo)) = data.images.row(static_cast<Eigen::Index>(perm[i]));
                    y.push_back(data.attrs.labels[perm[i]]);
                }
                bool adv_turn = true;
                if (!warmup) {
                    adv_turn = (s.global_batch / sch.alternation_block) % 2 == 0;
                    ++s.global_batch;
                }
                json line;
                line["type"] = "step";
                line["step"] = epoch * n_batches + b;
                line["epoch"] = epoch;
                line["phase"] = warmup ? "warmup" : (adv_turn ? "adversary" : "model");
                if (adv_turn) {
                    line["adv_loss"] = adversary_step(s.adversary, s.encoder, tok, x, y, data.train, sch.lr_adv);
                } else {
                    const double l = debias_step(s.encoder, s.adapt, s.adversary, tok, x, y, data.train, sch.lr_model);
                    line["adv_loss"] = l;
                    line["model_loss"] = -l;
                }
                if (opt.log_steps) rec.push_back(std::move(line));
            }

            const EvalMetrics m = evaluate(s.encoder, tok, data, sch.bias_k, sch.recall_k);
            const bool ok = m.recall >= floor_recall && m.zs_accuracy >= floor_acc;
            json line;
            line["type"] = "eval";
            line["epoch"] = epoch;
            line["step"] = (epoch + 1) * n_batches - 1;
            line["metrics"] = m.to_json();
            line["passes_floor"] = ok;
            rec.push_back(std::move(line));
            res.last = m;
            evaluated = true;
            if (!std::isfinite(m.test_max_skew) || !std::isfinite(m.recall))
                fail_numeric("nan_metric", "non-finite evaluation metric");
            if (ok && (!s.best_epoch || m.test_max_skew < s.best_metrics.test_max_skew)) {
                s.best_epoch = epoch;
                s.best_metrics = m;
                s.best_encoder = s.encoder;
            }
            if (!ok) {
                res.stop_reason = "early_stop";
                ++epoch;
                break;
            }
            s.next_epoch = epoch + 1;
            s.record_lines = lines_before + rec.size();
            if (opt.on_epoch) opt.on_epoch(s);
        }
    } catch (const Error& e) {
        if (e.kind() != ErrorKind::numerical) throw;
        res.stop_reason = "nan_abort";
        json line;
        line["type"] = "abort";
        line["epoch"] = epoch;
        line["error"] = e.what();
        rec.push_back(std::move(line));
        ++epoch;
    }

    if (!evaluated) {
        try {
            res.last = evaluate(s.encoder, tok, data, sch.bias_k, sch.recall_k);
        } catch (const Error&) {
            res.last = s.best_metrics;
        }
    }
    res.epochs_run = epoch;
    res.best_epoch = s.best_epoch;
    res.best = s.best_metrics;
    res.encoder = s.best_encoder;
    json summary;
    summary["type"] = "summary";
    summary["stop_reason"] = res.stop_reason;
    summary["epochs_run"] = res.epochs_run;
    summary["best_epoch"] = s.best_epoch ? json(*s.best_epoch) : json(nullptr);
    summary["baseline"] = s.baseline.to_json();
    summary["best"] = s.best_metrics.to_json();
    summary["final"] = res.last.to_json();
    summary["config_hash"] = opt.config_hash;
    rec.push_back(std::move(summary));
    s.record_lines = lines_before + rec.size();
    res.final_state = std::move(s);
    return res;
}

}  // namespace

DebiasResult run_debias(const DebiasData& data, const ToyDualEncoder& encoder, const Tokenizer& tok,
                        const TrainSchedule& schedule, const DebiasOptions& opt) {
    schedule.validate();
    if (data.images.rows() == 0) fail_data("empty", "no images to debias on");
    RunState s;
    s.baseline = evaluate(encoder, tok, data, schedule.bias_k, schedule.recall_k);
    s.encoder = encoder;
    s.encoder.prompt = PromptBlock::zeros(opt.prompt_n, encoder.d_tok(), opt.prompt_pos);
    s.adapt = AdaptationState::create(opt.mode);
    s.adversary = Adversary::init(data.train.size(), data.attrs.label_count(), derive_seed(schedule.seed, 7));
    // The zero-prompt initial state is the fallback checkpoint.
    s.best_encoder = s.encoder;
    s.best_metrics = evaluate(s.encoder, tok, data, schedule.bias_k, schedule.recall_k);

    json head;
    head["type"] = "baseline";
    head["metrics"] = s.baseline.to_json();
    head["init_metrics"] = s.best_metrics.to_json();
    head["mode"] = to_string(opt.mode);
    head["prompt_n"] = opt.prompt_n;
    head["prompt_pos"] = to_string(opt.prompt_pos);
    head["schedule"] = schedule.to_json();
    head["config_hash"] = opt.config_hash;
    s.record_lines = 1;
    DebiasResult r = run_loop(data, std::move(s), tok, schedule, opt);
    r.record.insert(r.record.begin(), std::move(head));
    return r;
}

DebiasResult resume_debias(const DebiasData& data, RunState state, const Tokenizer& tok,
                           const TrainSchedule& schedule, const DebiasOptions& opt) {
    return run_loop(data, std::move(state), tok, schedule, opt);
}

}  // namespace vlbias
