#pragma once

// Six images over two groups, classified against two identity, one crime and
// one non-human class. Each image is placed exactly on the class it should be
// predicted as:
//   group "a": identity0, identity1, crime, nonhuman  -> crime 25%, non-human 25%
//   group "b": identity0, nonhuman                    -> crime  0%, non-human 50%

#include <filesystem>
#include <fstream>

#include <Eigen/Dense>

#include "vlbias/corpus_io.hpp"
#include "vlbias/toy_model.hpp"
#include "vlbias/zs_audit.hpp"

namespace fixture {

inline vlbias::AuditClassSet audit_classes() {
    vlbias::AuditClassSet c;
    c.identity_classes = {"identity0", "identity1"};
    c.crime_classes = {"thief"};
    c.nonhuman_classes = {"gorilla"};
    return c;
}

// Class embeddings: the standard basis of R^4 in all_classes() order.
inline Eigen::MatrixXd class_embeddings() { return Eigen::MatrixXd::Identity(4, 4); }

inline vlbias::EmbeddingMatrix audit_images() {
    const int target[6] = {0, 1, 2, 3, 0, 3};
    vlbias::EmbeddingMatrix m;
    m.data = Eigen::MatrixXd::Zero(6, 4);
    for (int i = 0; i < 6; ++i) {
        m.data(i, target[i]) = 1.0;
        m.ids.push_back("face" + std::to_string(i));
    }
    m.normalized = true;
    return m;
}

inline vlbias::AttributeTable audit_groups() {
    vlbias::AttributeTable t;
    t.ids = {"face0", "face1", "face2", "face3", "face4", "face5"};
    t.labels = {0, 0, 0, 0, 1, 1};
    t.label_names = {"a", "b"};
    return t;
}

inline const char* kExpectedMarkdown =
    "| Category | a | b |\n"
    "|---|---|---|\n"
    "| Crime-related | 25.0 | 0.0 |\n"
    "| Non-human | 25.0 | 50.0 |\n";

// The same fixture on disk for `vlbias audit`: images are the encoder's own
// class-prompt embeddings, so each image's argmax is its target class. Class
// names come from the generated world's vocabulary so they embed distinctly.
inline void write_cli_fixture(const std::filesystem::path& dir, const std::filesystem::path& encoder_ckpt) {
    vlbias::AuditClassSet c;
    c.identity_classes = {"kind", "honest"};
    c.crime_classes = {"criminal"};
    c.nonhuman_classes = {"villainous"};
    const auto [enc, tok] = vlbias::load_encoder(encoder_ckpt);
    const Eigen::MatrixXd cls = vlbias::encode_texts(enc, tok, c.class_queries().texts()).out;
    auto imgs = audit_images();
    imgs.data = imgs.data * cls;  // one-hot rows select class embeddings
    vlbias::save_embeddings(imgs, dir / "audit_images.vlbe");
    vlbias::save_attributes(audit_groups(), dir / "audit_groups.csv");
    std::ofstream(dir / "audit_classes.json")
        << R"({"identity":["kind","honest"],"crime":["criminal"],"nonhuman":["villainous"]})";
    std::ofstream(dir / "audit_config.json") << R"({"encoder":"encoder.ckpt","images":"audit_images.vlbe",)"
                                             << R"("attributes":"audit_groups.csv","classes":"audit_classes.json"})";
}

}  // namespace fixture
