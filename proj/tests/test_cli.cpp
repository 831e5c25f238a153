#include <doctest.h>

#include <filesystem>

#include "audit_fixture.hpp"
#include "cli_util.hpp"
#include "vlbias/corpus_io.hpp"
#include "vlbias/commands.hpp"
#include "vlbias/ranking_metrics.hpp"

namespace fs = std::filesystem;
using cli::slurp;

namespace {

const fs::path& root() {
    static const fs::path r = [] {
        fs::path p = fs::temp_directory_path() / "vlbias_cli_tests";
        fs::remove_all(p);
        fs::create_directories(p);
        return p;
    }();
    return r;
}

// A small world shared by the tests below.
const fs::path& small_world() {
    static const fs::path dir = [] {
        fs::path d = root() / "world";
        cli::write(d / "gen.json", R"({"n_images": 400})");
        REQUIRE(cli::run(d, "gen --config gen.json").code == 0);
        return d;
    }();
    return dir;
}

const std::vector<std::string> kWorldFiles = {"images.vlbe",         "attributes.csv",     "pairs.csv",
                                              "queries_content.json", "queries_train.json", "queries_test.json",
                                              "encoder.ckpt",        "world.json"};

}  // namespace

TEST_CASE("gen is byte-deterministic, reloadable and refuses to overwrite") {
    const fs::path a = root() / "gen_a", b = root() / "gen_b", c = root() / "gen_c";
    cli::write(a / "gen.json", R"({"n_images": 200})");
    cli::write(b / "gen.json", R"({"n_images": 200})");
    cli::write(c / "gen.json", R"({"n_images": 200, "bias_strength": 0.0})");
    REQUIRE(cli::run(a, "gen --config gen.json").code == 0);
    REQUIRE(cli::run(b, "gen --config gen.json").code == 0);
    REQUIRE(cli::run(c, "gen --config gen.json").code == 0);
    for (const auto& f : kWorldFiles) CHECK_MESSAGE(slurp(a / f) == slurp(b / f), f);
    CHECK(slurp(a / "images.vlbe") != slurp(c / "images.vlbe"));

    CHECK_NOTHROW(vlbias::load_embeddings(a / "images.vlbe"));
    CHECK_NOTHROW(vlbias::load_attributes(a / "attributes.csv"));
    CHECK_NOTHROW(vlbias::load_pairs(a / "pairs.csv"));
    CHECK_NOTHROW(vlbias::load_queryset(a / "queries_test.json"));
    CHECK_NOTHROW(vlbias::load_encoder(a / "encoder.ckpt"));

    auto again = cli::run(a, "gen --config gen.json");
    CHECK(again.code == 2);
    CHECK(again.err.find("--force") != std::string::npos);
    CHECK(cli::run(a, "gen --config gen.json --force").code == 0);
    CHECK(slurp(a / "images.vlbe") == slurp(b / "images.vlbe"));
}

TEST_CASE("usage errors exit 1") {
    const fs::path d = root() / "usage";
    cli::write(d / "bad.json", R"({"n_images": 200, "colour": "blue"})");
    auto r = cli::run(d, "gen --config bad.json");
    CHECK(r.code == 1);
    CHECK(r.err.find("colour") != std::string::npos);
    CHECK(cli::run(d, "debias --mode sideways").code == 1);
    CHECK(cli::run(d, "gen --mode full").code == 1);  // flag does not apply
    CHECK(cli::run(d, "frobnicate").code == 1);
    CHECK(cli::run(d, "").code == 1);
}

TEST_CASE("missing input files exit 2 and name the path") {
    const auto& w = small_world();
    cli::write(w / "missing.json", R"({"images": "nowhere.vlbe"})");
    auto r = cli::run(w, "measure --config missing.json --out-dir missing");
    CHECK(r.code == 2);
    CHECK(r.err.find("nowhere.vlbe") != std::string::npos);
}

TEST_CASE("measure is byte-identical across re-runs") {
    const auto& w = small_world();
    REQUIRE(cli::run(w, "measure --k 100 --out-dir m1").code == 0);
    REQUIRE(cli::run(w, "measure --k 100 --out-dir m2").code == 0);
    for (const auto& f : {"bias_report.json", "bias_report.md", "weat_report.json"})
        CHECK_MESSAGE(slurp(w / "m1" / f) == slurp(w / "m2" / f), f);
    auto j = nlohmann::json::parse(slurp(w / "m1" / "bias_report.json"));
    CHECK(j["k"] == 100);
    CHECK(j.contains("config_hash"));
    CHECK(j["tool_version"] == vlbias::kToolVersion);
    auto weat = nlohmann::json::parse(slurp(w / "m1" / "weat_report.json"));
    CHECK(weat["std_convention"] == "population");
}

TEST_CASE("measure on an unbiased noise-free world is at shuffle-noise level") {
    const fs::path d = root() / "unbiased";
    cli::write(d / "gen.json", R"({"n_images": 2000, "bias_strength": 0.0, "noise_sigma": 1e-9})");
    REQUIRE(cli::run(d, "gen --config gen.json").code == 0);
    REQUIRE(cli::run(d, "measure --k 100").code == 0);
    auto j = nlohmann::json::parse(slurp(d / "bias_report.json"));
    // Balanced attributes within every concept: skew is bounded by sampling
    // noise of 100 draws (about 0.1 for a two-way split).
    CHECK(j["summary_metrics"]["max_skew@100"].get<double>() < 0.1);
}

TEST_CASE("report renders percentage changes and refuses mismatched k") {
    const fs::path d = root() / "report";
    cli::write(d / "a.json", R"({"k": 1000, "summary_metrics": {"max_skew@1000": 0.233, "ndkl": 0.1}})");
    cli::write(d / "b.json", R"({"k": 1000, "summary_metrics": {"max_skew@1000": 0.073, "ndkl": 0.1}})");
    cli::write(d / "c.json", R"({"k": 100, "summary_metrics": {"max_skew@1000": 0.073}})");
    auto r = cli::run(d, "report a.json b.json --out-dir ab");
    REQUIRE(r.code == 0);
    const std::string md = slurp(d / "ab" / "comparison.md");
    CHECK(md.find("| max_skew@1000 | 0.233 | 0.073(-69%) |") != std::string::npos);
    CHECK(md.find("| ndkl | 0.100 | 0.100(0%) |") != std::string::npos);
    REQUIRE(cli::run(d, "report a.json a.json --out-dir aa").code == 0);
    const std::string same = slurp(d / "aa" / "comparison.md");
    auto count = [](const std::string& text, const std::string& what) {
        std::size_t n = 0;
        for (auto p = text.find(what); p != std::string::npos; p = text.find(what, p + 1)) ++n;
        return n;
    };
    CHECK(count(same, "(0%)") == 2);
    CHECK(count(same, "%)") == 2);
    auto bad = cli::run(d, "report a.json c.json --out-dir ac");
    CHECK(bad.code == 2);
    CHECK(bad.err.find("k") != std::string::npos);
    CHECK(cli::run(d, "report a.json").code == 1);
}

TEST_CASE("report compares two measure runs") {
    const auto& w = small_world();
    REQUIRE(cli::run(w, "measure --k 100 --out-dir r1").code == 0);
    REQUIRE(cli::run(w, "report r1/bias_report.json r1/bias_report.json --out-dir r1cmp").code == 0);
    const std::string md = slurp(w / "r1cmp" / "comparison.md");
    CHECK(md.find("max_skew@100") != std::string::npos);
    CHECK(md.find("(+") == std::string::npos);
    CHECK(md.find("(-") == std::string::npos);
}

TEST_CASE("audit reproduces the hand fixture and labels groups") {
    const auto& w = small_world();
    fixture::write_cli_fixture(w, w / "encoder.ckpt");
    auto r = cli::run(w, "audit --config audit_config.json --out-dir audit");
    REQUIRE(r.code == 0);
    const std::string md = slurp(w / "audit" / "audit_report.md");
    CHECK(md.find(fixture::kExpectedMarkdown) != std::string::npos);
    auto j = nlohmann::json::parse(slurp(w / "audit" / "audit_report.json"));
    CHECK(j["groups"][0]["group"] == "a");
    CHECK(j["groups"][1]["nonhuman_rate"].get<double>() == 50.0);

    cli::write(w / "empty_crime.json", R"({"identity":["kind"],"crime":[],"nonhuman":["villainous"]})");
    cli::write(w / "audit_empty.json", R"({"encoder":"encoder.ckpt","images":"audit_images.vlbe",)"
                                       R"("attributes":"audit_groups.csv","classes":"empty_crime.json"})");
    auto bad = cli::run(w, "audit --config audit_empty.json --out-dir audit_bad");
    CHECK(bad.code == 2);
    CHECK(bad.err.find("crime") != std::string::npos);
}

TEST_CASE("debias is byte-deterministic and resumes exactly") {
    const auto& w = small_world();
    cli::write(w / "debias.json", R"({"max_epochs": 6, "alternation_block": 2, "checkpoint_every": 3})");
    REQUIRE(cli::run(w, "debias --config debias.json --out-dir d1").code == 0);
    REQUIRE(cli::run(w, "debias --config debias.json --out-dir d2").code == 0);
    for (const auto& f : {"debias_record.jsonl", "debias_report.json", "encoder_debiased.ckpt", "adversary.ckpt"})
        CHECK_MESSAGE(slurp(w / "d1" / f) == slurp(w / "d2" / f), f);
    CHECK(fs::exists(w / "d1" / "states" / "epoch_00003.state"));
    CHECK(cli::run(w, "debias --config debias.json --out-dir d1").code == 2);  // record exists

    // Resume d2 from epoch 3: every record line except the summary's config
    // hash (the resume path is part of the config) matches the straight run.
    cli::write(w / "resume.json", R"({"max_epochs": 6, "alternation_block": 2, "checkpoint_every": 3,)"
                                  R"( "resume": "d2/states/epoch_00003.state"})");
    REQUIRE(cli::run(w, "debias --config resume.json --out-dir d2 --force").code == 0);
    std::istringstream straight(slurp(w / "d1" / "debias_record.jsonl"));
    std::istringstream resumed(slurp(w / "d2" / "debias_record.jsonl"));
    std::string l1, l2;
    std::size_t lines = 0;
    while (std::getline(straight, l1)) {
        REQUIRE(std::getline(resumed, l2));
        auto j1 = nlohmann::json::parse(l1), j2 = nlohmann::json::parse(l2);
        if (j1["type"] == "summary") {
            j1.erase("config_hash");
            j2.erase("config_hash");
        }
        CHECK(j1 == j2);
        ++lines;
    }
    CHECK(!std::getline(resumed, l2));
    CHECK(lines > 10);
    CHECK(slurp(w / "d1" / "encoder_debiased.ckpt") != "");
}

TEST_CASE("config hash ignores key order") {
    auto a = nlohmann::json::parse(R"({"x": 1, "y": [1, 2]})");
    auto b = nlohmann::json::parse(R"({"y": [1, 2], "x": 1})");
    CHECK(vlbias::config_hash(a) == vlbias::config_hash(b));
    CHECK(vlbias::config_hash(a) != vlbias::config_hash(nlohmann::json::parse(R"({"x": 2, "y": [1, 2]})")));
}
