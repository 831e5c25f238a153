#include "vlbias/commands.hpp"

#include <cstdio>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>

#include <CLI11.hpp>

#include "vlbias/adversary.hpp"
#include "vlbias/corpus_io.hpp"
#include "vlbias/error.hpp"
#include "vlbias/ranking_metrics.hpp"
#include "vlbias/toy_model.hpp"
#include "vlbias/weat.hpp"
#include "vlbias/world.hpp"
#include "vlbias/zs_audit.hpp"

namespace vlbias {

namespace fs = std::filesystem;
using json = nlohmann::json;
using ojson = nlohmann::ordered_json;

std::string config_hash(const json& resolved) {
    const std::string s = resolved.dump();  // json objects iterate in key order
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : s) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
    return buf;
}

namespace {

struct Overrides {
    std::optional<std::string> config;
    std::optional<std::uint64_t> seed;
    std::optional<std::string> out_dir;
    bool force = false;
    std::optional<std::size_t> k;
    std::optional<std::string> mode;
    std::optional<std::size_t> prompt_n;
    std::optional<std::string> prompt_pos;
    std::vector<std::string> positional;
};

json defaults_for(const std::string& sub) {
    const json sensitive_c1 = {"A photo of a good person", "A photo of a smart person",
                               "A photo of a attractive person", "A photo of a lawful person",
                               "A photo of a friendly person"};
    const json sensitive_c2 = {"A photo of a evil person", "A photo of a dumb person",
                               "A photo of a unattractive person", "A photo of a criminal person",
                               "A photo of a unfriendly person"};
    if (sub == "gen")
        return {{"seed", 0},           {"n_images", 2000},          {"dim", 64},
                {"attribute_count", 2}, {"bias_strength", 1.0},     {"noise_sigma", 0.02},
                {"content_concepts", 20}, {"words_per_caption", 3}, {"attribute_scale", 0.05},
                {"score_gap", 0.028},  {"direction_ridge", 1.0},   {"d_tok", 32},
                {"hidden", 64},        {"token_scale", 0.02},       {"w1_gain", 1.0},
                {"w2_scale", 0.01},    {"max_len", 16}};
    if (sub == "pretrain")
        return {{"encoder", "encoder.ckpt"}, {"images", "images.vlbe"}, {"pairs", "pairs.csv"},
                {"content_queries", "queries_content.json"}, {"epochs", 5}, {"lr", 1e-4},
                {"batch_size", 256}, {"seed", 0}};
    if (sub == "measure")
        return {{"encoder", "encoder.ckpt"}, {"images", "images.vlbe"}, {"attributes", "attributes.csv"},
                {"queries", "queries_test.json"}, {"k", 1000}, {"desired", nullptr},
                {"pairs", nullptr}, {"content_queries", nullptr}, {"recall_k", 5},
                {"weat_c1", sensitive_c1}, {"weat_c2", sensitive_c2}, {"weat_a1", nullptr},
                {"weat_a2", nullptr}, {"weat_mode", "exact"}, {"weat_samples", 100000}, {"seed", 0}};
    if (sub == "debias")
        return {{"encoder", "encoder.ckpt"}, {"images", "images.vlbe"}, {"attributes", "attributes.csv"},
                {"pairs", "pairs.csv"}, {"content_queries", "queries_content.json"},
                {"train_queries", "queries_train.json"}, {"test_queries", "queries_test.json"},
                {"mode", "prompt"}, {"prompt_n", 2}, {"prompt_pos", "prepend"}, {"seed", 0},
                {"batch_size", 256}, {"lr_model", 2e-5}, {"lr_adv", 2e-4}, {"warmup_adv_epochs", 2},
                {"alternation_block", 10}, {"max_epochs", 600}, {"early_stop_fraction", 0.5},
                {"bias_k", 100}, {"recall_k", 5}, {"log_steps", true}, {"checkpoint_every", 0},
                {"resume", nullptr}};
    if (sub == "audit")
        return {{"encoder", "encoder.ckpt"}, {"images", "images.vlbe"}, {"attributes", "attributes.csv"},
                {"classes", "audit_classes.json"}, {"class_queries", nullptr}};
    if (sub == "report") return {{"baseline", nullptr}, {"candidate", nullptr}};
    fail_usage("bad_subcommand", "unknown subcommand " + sub);
}

struct Context {
    std::string sub;
    json cfg;  // resolved; excludes output location
    std::string hash;
    fs::path base;  // relative input paths resolve against this
    fs::path out_dir;
    bool force = false;

    fs::path input(const std::string& key) const {
        const auto& v = cfg.at(key);
        if (!v.is_string()) fail_usage("missing_path", "config key '" + key + "' must name a file");
        fs::path p = v.get<std::string>();
        return p.is_absolute() ? p : base / p;
    }
    bool has(const std::string& key) const { return !cfg.at(key).is_null(); }
    template <typename T>
    T get(const std::string& key) const {
        try {
            return cfg.at(key).get<T>();
        } catch (const json::exception&) {
            fail_usage("bad_config", "config key '" + key + "' has the wrong type");
        }
    }

    fs::path output(const std::string& name) const {
        fs::path p = out_dir / name;
        if (fs::exists(p) && !force) fail_data("path_collision", p.string() + " exists; pass --force to overwrite");
        return p;
    }
    void write(const std::string& name, const std::string& content) const {
        const fs::path p = output(name);
        std::ofstream out(p, std::ios::binary | std::ios::trunc);
        if (!out) fail_data("io", "cannot write " + p.string());
        out << content;
    }
    ojson header(const std::string& kind) const {
        ojson h;
        h["tool"] = "vlbias";
        h["tool_version"] = kToolVersion;
        h["report"] = kind;
        h["config_hash"] = hash;
        h["config"] = cfg;
        return h;
    }
};

Context resolve(const std::string& sub, const Overrides& o) {
    Context c;
    c.sub = sub;
    c.cfg = defaults_for(sub);
    c.base = fs::current_path();
    if (o.config) {
        std::ifstream in(*o.config);
        if (!in) fail_data("missing_file", "cannot open config " + *o.config);
        json file;
        try {
            file = json::parse(in);
        } catch (const json::parse_error& e) {
            fail_usage("bad_config", *o.config + ": " + e.what());
        }
        if (!file.is_object()) fail_usage("bad_config", "config must be a JSON object");
        for (auto it = file.begin(); it != file.end(); ++it) {
            if (!c.cfg.contains(it.key()))
                fail_usage("unknown_key", "unknown config key '" + it.key() + "' for " + sub);
            c.cfg[it.key()] = it.value();
        }
        c.base = fs::absolute(*o.config).parent_path();
    }
    auto set = [&](const char* flag, const std::string& key, const json& v) {
        if (!c.cfg.contains(key)) fail_usage("bad_flag", std::string(flag) + " does not apply to " + sub);
        c.cfg[key] = v;
    };
    if (o.seed) set("--seed", "seed", *o.seed);
    if (o.k) set("--k", sub == "debias" ? "bias_k" : "k", *o.k);
    if (o.mode) set("--mode", "mode", *o.mode);
    if (o.prompt_n) set("--prompt-n", "prompt_n", *o.prompt_n);
    if (o.prompt_pos) set("--prompt-pos", "prompt_pos", *o.prompt_pos);
    if (sub == "report") {
        if (o.positional.size() == 2) {
            c.cfg["baseline"] = o.positional[0];
            c.cfg["candidate"] = o.positional[1];
        } else if (!o.positional.empty()) {
            fail_usage("bad_args", "report takes exactly two report paths");
        }
    } else if (!o.positional.empty()) {
        fail_usage("bad_args", "unexpected positional argument '" + o.positional[0] + "'");
    }
    c.hash = config_hash(json{{"subcommand", sub}, {"config", c.cfg}});
    c.out_dir = o.out_dir ? fs::path(*o.out_dir) : fs::current_path();
    c.force = o.force;
    fs::create_directories(c.out_dir);
    return c;
}

std::string dump(const ojson& j) { return j.dump(2) + "\n"; }

std::string fixed(double v, int prec = 3) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.*f", prec, v);
    return buf;
}

EmbeddingMatrix load_images(const Context& c) {
    auto m = load_embeddings(c.input("images"));
    m.data = normalize_rows(m.data);
    return m;
}

AttributeTable load_aligned_attributes(const Context& c, const EmbeddingMatrix& images) {
    AttributeTable raw = load_attributes(c.input("attributes"));
    std::unordered_map<std::string, std::size_t> row;
    for (std::size_t i = 0; i < raw.ids.size(); ++i) row.emplace(raw.ids[i], i);
    AttributeTable t;
    t.label_names = raw.label_names;
    for (const auto& id : images.ids) {
        auto it = row.find(id);
        if (it == row.end()) fail_data("missing_attribute", "image '" + id + "' has no attribute label");
        t.ids.push_back(id);
        t.labels.push_back(raw.labels[it->second]);
    }
    return t;
}

// ---- gen -------------------------------------------------------------------

int cmd_gen(const Context& c) {
    SyntheticWorldConfig w;
    w.seed = c.get<std::uint64_t>("seed");
    w.n_images = c.get<std::size_t>("n_images");
    w.dim = c.get<std::size_t>("dim");
    w.attribute_count = c.get<std::size_t>("attribute_count");
    w.bias_strength = c.get<double>("bias_strength");
    w.noise_sigma = c.get<double>("noise_sigma");
    w.content_concepts = c.get<std::size_t>("content_concepts");
    w.words_per_caption = c.get<std::size_t>("words_per_caption");
    w.attribute_scale = c.get<double>("attribute_scale");
    w.score_gap = c.get<double>("score_gap");
    w.direction_ridge = c.get<double>("direction_ridge");
    EncoderShape shape;
    shape.d_tok = c.get<std::size_t>("d_tok");
    shape.hidden = c.get<std::size_t>("hidden");
    shape.dim = w.dim;
    shape.token_scale = c.get<double>("token_scale");
    shape.w1_gain = c.get<double>("w1_gain");
    shape.w2_scale = c.get<double>("w2_scale");

    const std::uint64_t run_seed = w.seed;
    const auto queries = default_world_queries(w);
    const Tokenizer tok = world_tokenizer(queries, c.get<std::size_t>("max_len"));
    const ToyDualEncoder enc = ToyDualEncoder::init(tok.vocab_size(), shape, derive_seed(run_seed, 1));
    w.seed = derive_seed(run_seed, 2);
    const World world = generate_world(w, queries, enc, tok);

    const std::vector<std::string> names = {"images.vlbe", "attributes.csv", "pairs.csv", "queries_content.json",
                                            "queries_train.json", "queries_test.json", "encoder.ckpt", "world.json"};
    for (const auto& n : names) c.output(n);  // check collisions before writing anything
    save_embeddings(world.images, c.output("images.vlbe"));
    save_attributes(world.attributes, c.output("attributes.csv"));
    save_pairs(world.pairs, c.output("pairs.csv"));
    save_queryset(queries.content, c.output("queries_content.json"));
    save_queryset(queries.train, c.output("queries_train.json"));
    save_queryset(queries.test, c.output("queries_test.json"));
    save_encoder(c.output("encoder.ckpt"), enc, tok);
    ojson meta = c.header("world");
    meta["kappa"] = world.kappa;
    meta["vocab_size"] = tok.vocab_size();
    meta["files"] = names;
    c.write("world.json", dump(meta));
    std::cout << "wrote world (" << w.n_images << " images, d=" << w.dim << ") to " << c.out_dir.string() << "\n";
    return 0;
}

// ---- pretrain --------------------------------------------------------------

int cmd_pretrain(const Context& c) {
    auto [enc, tok] = load_encoder(c.input("encoder"));
    const auto images = load_images(c);
    const auto content = load_queryset(c.input("content_queries"));
    const auto pairs = resolve_pairs(load_pairs(c.input("pairs")), images, content.size());
    std::vector<std::string> texts;
    for (std::size_t q : pairs.query) texts.push_back(content.queries[q].text);
    const auto res = pretrain_contrastive(enc, tok, images.data, pairs.image_row, texts, c.get<std::size_t>("epochs"),
                                          c.get<double>("lr"), c.get<std::uint64_t>("seed"),
                                          c.get<std::size_t>("batch_size"));
    save_encoder(c.output("encoder_pretrained.ckpt"), enc, tok);
    ojson r = c.header("pretrain");
    r["epoch_loss"] = res.epoch_loss;
    c.write("pretrain_report.json", dump(r));
    std::cout << "pretrained " << res.epoch_loss.size() << " epochs";
    if (!res.epoch_loss.empty()) std::cout << ", final loss " << fixed(res.epoch_loss.back(), 4);
    std::cout << "\n";
    return 0;
}

// ---- measure ---------------------------------------------------------------

Eigen::MatrixXd rows_for_label(const EmbeddingMatrix& images, const AttributeTable& attrs, const std::string& label) {
    auto it = std::find(attrs.label_names.begin(), attrs.label_names.end(), label);
    if (it == attrs.label_names.end()) fail_data("unknown_label", "no attribute label '" + label + "'");
    const int l = static_cast<int>(it - attrs.label_names.begin());
    std::vector<Eigen::Index> rows;
    for (std::size_t i = 0; i < attrs.size(); ++i)
        if (attrs.labels[i] == l) rows.push_back(static_cast<Eigen::Index>(i));
    Eigen::MatrixXd out(static_cast<Eigen::Index>(rows.size()), images.data.cols());
    for (std::size_t i = 0; i < rows.size(); ++i) out.row(static_cast<Eigen::Index>(i)) = images.data.row(rows[i]);
    return out;
}

int cmd_measure(const Context& c) {
    const auto [enc, tok] = load_encoder(c.input("encoder"));
    const auto images = load_images(c);
    const auto attrs = load_aligned_attributes(c, images);
    const auto queries = load_queryset(c.input("queries"));

    std::optional<DesiredDistribution> desired;
    if (c.has("desired")) desired = DesiredDistribution{c.get<std::vector<double>>("desired")};
    const Tensor texts = encode_texts(enc, tok, queries.texts()).out;
    const BiasReport bias = measure_bias(similarity_matrix(enc, images.data, texts), attrs, queries,
                                         c.get<std::size_t>("k"), desired, c.cfg.at("queries").get<std::string>());
    for (const auto& w : bias.warnings) std::cerr << "warning: " << w << "\n";

    ojson summary;
    summary["max_skew@" + std::to_string(bias.k)] = bias.mean_max_skew;
    summary["ndkl"] = bias.mean_ndkl;
    if (c.has("pairs") && c.has("content_queries")) {
        const auto content = load_queryset(c.input("content_queries"));
        const auto pairs = resolve_pairs(load_pairs(c.input("pairs")), images, content.size());
        const Tensor tc = encode_texts(enc, tok, content.texts()).out;
        const auto k = c.get<std::size_t>("recall_k");
        summary["recall@" + std::to_string(k)] = recall_at_k(similarity_matrix(enc, images.data, tc), pairs, k);
        summary["zs_accuracy"] = zs_accuracy(images.data, tc, concepts_from_pairs(load_pairs(c.input("pairs")), images));
    }

    ojson report = c.header("bias");
    report["k"] = bias.k;
    report["summary_metrics"] = summary;
    report["proxy_note"] = "recall and zs_accuracy are synthetic proxies for Flickr-1k recall@5 and CIFAR100 accuracy";
    report["bias"] = to_json(bias);

    // WEAT over the two attribute groups.
    WeatInstance inst;
    const auto c1 = c.get<std::vector<std::string>>("weat_c1");
    const auto c2 = c.get<std::vector<std::string>>("weat_c2");
    inst.C1 = encode_texts(enc, tok, c1).out;
    inst.C2 = encode_texts(enc, tok, c2).out;
    if (attrs.label_count() < 2 && !(c.has("weat_a1") && c.has("weat_a2")))
        fail_data("bad_weat", "WEAT needs two attribute groups");
    const std::string a1 = c.has("weat_a1") ? c.get<std::string>("weat_a1") : attrs.label_names[0];
    const std::string a2 = c.has("weat_a2") ? c.get<std::string>("weat_a2") : attrs.label_names[1];
    inst.A1 = rows_for_label(images, attrs, a1);
    inst.A2 = rows_for_label(images, attrs, a2);
    inst.a1_label = a1;
    inst.a2_label = a2;
    PermutationOptions popt;
    const auto mode = c.get<std::string>("weat_mode");
    if (mode == "exact") popt.mode = PermutationMode::exact;
    else if (mode == "monte_carlo") popt.mode = PermutationMode::monte_carlo;
    else fail_usage("bad_weat_mode", "weat_mode must be exact or monte_carlo");
    popt.n_samples = c.get<std::size_t>("weat_samples");
    popt.seed = c.get<std::uint64_t>("seed");
    ojson weat = c.header("weat");
    weat["attribute_groups"] = {a1, a2};
    weat.update(to_json(run_weat(inst, popt)));

    std::ostringstream md;
    md << "# Bias report\n\n";
    md << "tool vlbias " << kToolVersion << ", config " << c.hash << "\n\n";
    md << "| Metric | Value |\n|---|---|\n";
    for (auto it = summary.begin(); it != summary.end(); ++it)
        md << "| " << it.key() << " | " << fixed(it.value().get<double>()) << " |\n";
    md << "\nk = " << bias.k << " (requested " << bias.k_requested << "), desired distribution over {";
    for (std::size_t i = 0; i < bias.label_names.size(); ++i)
        md << (i ? ", " : "") << bias.label_names[i] << ": " << fixed(bias.desired.probs[i]);
    md << "}\n\n| Query | MaxSkew@" << bias.k << " | NDKL |\n|---|---|---|\n";
    for (std::size_t i = 0; i < bias.query_texts.size(); ++i)
        md << "| " << bias.query_texts[i] << " | " << fixed(bias.max_skew[i]) << " | " << fixed(bias.ndkl[i]) << " |\n";

    c.write("bias_report.json", dump(report));
    c.write("bias_report.md", md.str());
    c.write("weat_report.json", dump(weat));
    std::cout << "MaxSkew@" << bias.k << " " << fixed(bias.mean_max_skew, 4) << "  NDKL " << fixed(bias.mean_ndkl, 4)
              << "  WEAT d=" << fixed(weat["effect_size"].get<double>(), 3) << "\n";
    return 0;
}

// ---- debias ----------------------------------------------------------------

int cmd_debias(const Context& c) {
    auto [enc, tok] = load_encoder(c.input("encoder"));
    const auto images = load_images(c);
    DebiasData data;
    data.images = images.data;
    data.attrs = load_aligned_attributes(c, images);
    data.content = load_queryset(c.input("content_queries"));
    data.train = load_queryset(c.input("train_queries"));
    data.test = load_queryset(c.input("test_queries"));
    data.concept_of = concepts_from_pairs(load_pairs(c.input("pairs")), images);
    for (std::size_t q : data.concept_of)
        if (q >= data.content.size()) fail_data("query_range", "pair query index out of range");

    TrainSchedule s;
    s.batch_size = c.get<std::size_t>("batch_size");
    s.lr_model = c.get<double>("lr_model");
    s.lr_adv = c.get<double>("lr_adv");
    s.warmup_adv_epochs = c.get<std::size_t>("warmup_adv_epochs");
    s.alternation_block = c.get<std::size_t>("alternation_block");
    s.max_epochs = c.get<std::size_t>("max_epochs");
    s.early_stop_fraction = c.get<double>("early_stop_fraction");
    s.seed = c.get<std::uint64_t>("seed");
    s.bias_k = c.get<std::size_t>("bias_k");
    s.recall_k = c.get<std::size_t>("recall_k");

    DebiasOptions opt;
    opt.mode = parse_adapt_mode(c.get<std::string>("mode"));
    opt.prompt_n = c.get<std::size_t>("prompt_n");
    opt.prompt_pos = parse_prompt_position(c.get<std::string>("prompt_pos"));
    opt.config_hash = c.hash;
    opt.log_steps = c.get<bool>("log_steps");
    const auto every = c.get<std::size_t>("checkpoint_every");
    if (every > 0) {
        fs::create_directories(c.out_dir / "states");
        opt.on_epoch = [&, every](const RunState& st) {
            if (st.next_epoch % every != 0) return;
            char name[64];
            std::snprintf(name, sizeof name, "epoch_%05zu.state", st.next_epoch);
            save_run_state(c.out_dir / "states" / name, st, tok);
        };
    }

    const fs::path record_path = c.out_dir / "debias_record.jsonl";
    std::vector<std::string> kept;  // record lines carried over on resume
    DebiasResult res;
    if (c.has("resume")) {
        RunState st = load_run_state(c.input("resume"));
        if (st.adapt.mode != opt.mode) fail_usage("resume_mismatch", "resume state was trained in another mode");
        std::ifstream in(record_path);
        if (!in) fail_data("missing_file", "resume needs the existing record " + record_path.string());
        std::string line;
        while (kept.size() < st.record_lines && std::getline(in, line)) kept.push_back(line);
        if (kept.size() != st.record_lines) fail_data("truncated", "record shorter than the resume state expects");
        res = resume_debias(data, std::move(st), tok, s, opt);
    } else {
        if (fs::exists(record_path) && !c.force)
            fail_data("path_collision", record_path.string() + " exists; pass --force to overwrite");
        res = run_debias(data, enc, tok, s, opt);
    }

    std::string rec;
    for (const auto& l : kept) rec += l + "\n";
    for (const auto& l : res.record) rec += l.dump() + "\n";
    {
        std::ofstream out(record_path, std::ios::binary | std::ios::trunc);
        if (!out) fail_data("io", "cannot write " + record_path.string());
        out << rec;
    }
    save_encoder(c.out_dir / "encoder_debiased.ckpt", res.encoder, tok);
    save_tensor_file(c.out_dir / "adversary.ckpt", res.final_state.adversary.named_tensors(),
                     ojson{{"kind", "adversary"}, {"config_hash", c.hash}});

    ojson report = c.header("debias");
    report["k"] = s.bias_k;
    report["stop_reason"] = res.stop_reason;
    report["epochs_run"] = res.epochs_run;
    report["best_epoch"] = res.best_epoch ? ojson(*res.best_epoch) : ojson(nullptr);
    const std::string mk = "max_skew@" + std::to_string(s.bias_k);
    const std::string rk = "recall@" + std::to_string(s.recall_k);
    auto summarize = [&](const EvalMetrics& m) {
        return ojson{{mk, m.test_max_skew}, {"ndkl", m.test_ndkl}, {rk, m.recall}, {"zs_accuracy", m.zs_accuracy}};
    };
    report["baseline_metrics"] = summarize(res.baseline);
    report["summary_metrics"] = summarize(res.best);
    report["bias_reduction"] = res.bias_reduction();
    report["proxy_retention"] = res.proxy_retention();
    report["final_metrics"] = summarize(res.last);
    report["final_retention"] = res.final_retention();
    c.write("debias_report.json", dump(report));
    std::cout << "stop=" << res.stop_reason << " epochs=" << res.epochs_run << " " << mk << " "
              << fixed(res.baseline.test_max_skew, 4) << " -> " << fixed(res.best.test_max_skew, 4) << " ("
              << percent_change(res.baseline.test_max_skew, res.best.test_max_skew) << "), retention "
              << fixed(res.proxy_retention(), 3) << " (at stop " << fixed(res.final_retention(), 3) << ")\n";
    return res.stop_reason == "nan_abort" ? static_cast<int>(ErrorKind::numerical) : 0;
}

// ---- audit -----------------------------------------------------------------

int cmd_audit(const Context& c) {
    const auto [enc, tok] = load_encoder(c.input("encoder"));
    const auto images = load_images(c);
    const auto attrs = load_aligned_attributes(c, images);
    AuditClassSet classes = load_audit_classes(c.input("classes"));
    QuerySet qs = classes.class_queries();
    if (c.has("class_queries")) {
        const QuerySet given = load_queryset(c.input("class_queries"));
        if (given.role != QueryRole::audit_class) fail_data("bad_role", "class queries must have role audit-class");
        if (given.templates.size() != 1) fail_data("bad_classes", "class queries need exactly one template");
        std::vector<std::string> a = given.concepts, b = classes.all_classes();
        std::sort(a.begin(), a.end());
        std::sort(b.begin(), b.end());
        if (a != b) fail_data("bad_classes", "class queries and class partition name different classes");
        classes.template_text = given.templates[0];
        qs = classes.class_queries();
    }
    const Tensor class_embs = encode_texts(enc, tok, qs.texts()).out;
    const auto preds = zero_shot_classify(images.data, class_embs);
    const auto rates = misclassification_rates(preds, attrs, classes);
    ojson report = c.header("audit");
    report["template"] = classes.template_text;
    report.update(audit_to_json(rates));
    std::ostringstream md;
    md << "# Harmful zero-shot misclassification (%)\n\ntool vlbias " << kToolVersion << ", config " << c.hash
       << "\n\n" << audit_to_markdown(rates);
    c.write("audit_report.json", dump(report));
    c.write("audit_report.md", md.str());
    std::cout << audit_to_markdown(rates);
    return 0;
}

// ---- report ----------------------------------------------------------------

ojson read_json(const fs::path& p) {
    std::ifstream in(p);
    if (!in) fail_data("missing_file", "cannot open " + p.string());
    try {
        return ojson::parse(in);
    } catch (const json::exception& e) {
        fail_data("bad_json", p.string() + ": " + e.what());
    }
}

int cmd_report(const Context& c) {
    if (!c.has("baseline") || !c.has("candidate"))
        fail_usage("bad_args", "report needs a baseline and a candidate report");
    const ojson base = read_json(c.input("baseline"));
    const ojson cand = read_json(c.input("candidate"));
    for (const ojson* r : {&base, &cand})
        if (!r->contains("summary_metrics") || !r->contains("k"))
            fail_data("bad_report", "reports must carry summary_metrics and k");
    if (base.at("k") != cand.at("k"))
        fail_data("k_mismatch", "reports were computed with different k (" + base.at("k").dump() + " vs " +
                                    cand.at("k").dump() + ")");
    std::ostringstream md;
    md << "# Comparison\n\ntool vlbias " << kToolVersion << ", config " << c.hash << "\n\n";
    md << "baseline: " << c.cfg.at("baseline").get<std::string>() << " (config "
       << base.value("config_hash", std::string("?")) << ")\n";
    md << "candidate: " << c.cfg.at("candidate").get<std::string>() << " (config "
       << cand.value("config_hash", std::string("?")) << ")\n\n";
    md << "| Metric | Baseline | Candidate |\n|---|---|---|\n";
    const auto& bm = base.at("summary_metrics");
    const auto& cm = cand.at("summary_metrics");
    for (auto it = bm.begin(); it != bm.end(); ++it) {
        if (!cm.contains(it.key())) continue;
        const double b = it.value().get<double>(), v = cm.at(it.key()).get<double>();
        md << "| " << it.key() << " | " << fixed(b) << " | " << fixed(v) << "(" << percent_change(b, v) << ") |\n";
    }
    c.write("comparison.md", md.str());
    std::cout << md.str();
    return 0;
}

int dispatch(const std::string& sub, const Overrides& o) {
    const Context c = resolve(sub, o);
    if (sub == "gen") return cmd_gen(c);
    if (sub == "pretrain") return cmd_pretrain(c);
    if (sub == "measure") return cmd_measure(c);
    if (sub == "debias") return cmd_debias(c);
    if (sub == "audit") return cmd_audit(c);
    return cmd_report(c);
}

}  // namespace

int cli_main(int argc, const char* const* argv) {
    CLI::App app{"Bias measurement and adversarial prompt debiasing for dual encoders", "vlbias"};
    app.require_subcommand(1);
    app.set_version_flag("--version", kToolVersion);
    Overrides o;
    const std::vector<std::pair<const char*, const char*>> subs = {
        {"gen", "generate a planted-bias synthetic world and its encoder"},
        {"pretrain", "contrastively pretrain an encoder on image/caption pairs"},
        {"measure", "MaxSkew@k, NDKL and WEAT on an embedding set"},
        {"debias", "adversarial debiasing run"},
        {"audit", "harmful zero-shot misclassification audit"},
        {"report", "compare two reports"}};
    for (const auto& [name, desc] : subs) {
        CLI::App* s = app.add_subcommand(name, desc);
        s->add_option("--config", o.config, "JSON config file");
        s->add_option("--seed", o.seed, "run seed");
        s->add_option("--out-dir", o.out_dir, "output directory");
        s->add_flag("--force", o.force, "overwrite existing outputs");
        s->add_option("--k", o.k, "ranking cutoff");
        s->add_option("--mode", o.mode, "adaptation mode")
            ->check(CLI::IsMember({"prompt", "projection", "text_encoder", "full"}));
        s->add_option("--prompt-n", o.prompt_n, "number of prompt tokens");
        s->add_option("--prompt-pos", o.prompt_pos, "prompt position")->check(CLI::IsMember({"prepend", "append"}));
        if (std::string(name) == "report") s->add_option("reports", o.positional, "baseline and candidate reports");
    }
    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? 0 : static_cast<int>(ErrorKind::usage);
    }
    try {
        return dispatch(app.get_subcommands().front()->get_name(), o);
    } catch (const Error& e) {
        std::cerr << "error [" << e.code() << "]: " << e.what() << "\n";
        return static_cast<int>(e.kind());
    } catch (const fs::filesystem_error& e) {
        std::cerr << "error [io]: " << e.what() << "\n";
        return static_cast<int>(ErrorKind::data);
    } catch (const json::exception& e) {
        std::cerr << "error [bad_json]: " << e.what() << "\n";
        return static_cast<int>(ErrorKind::data);
    }
}

int cli_main(const std::vector<std::string>& args) {
    std::vector<const char*> argv;
    argv.push_back("vlbias");
    for (const auto& a : args) argv.push_back(a.c_str());
    return cli_main(static_cast<int>(argv.size()), argv.data());
}

}  // namespace vlbias
