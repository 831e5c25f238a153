#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "vlbias/corpus_io.hpp"
#include "vlbias/toy_model.hpp"
#include "vlbias/zs_audit.hpp"

namespace vlbias {

// theta_adv: M -> 32 -> ReLU -> 32 -> ReLU -> l.
struct Adversary {
    Tensor A1, a1, A2, a2, A3, a3;
    AdamState adam;

    static constexpr std::size_t kHidden = 32;
    // He-normal hidden layers; the output layer starts at zero so the
    // initial prediction is uniform regardless of input scale.
    static Adversary init(std::size_t inputs, std::size_t labels, std::uint64_t seed);

    std::size_t inputs() const { return static_cast<std::size_t>(A1.rows()); }
    std::size_t labels() const { return static_cast<std::size_t>(A3.cols()); }
    std::map<std::string, Tensor*> params();
    std::vector<std::pair<std::string, Tensor>> named_tensors() const;
};

struct AdvTrace {
    Tensor S, h1, h2, probs;
    std::vector<int> labels;
};

// Mean cross-entropy of softmax(theta_adv(S)) against `labels`.
std::pair<double, AdvTrace> adv_forward_loss(const Adversary& adv, const Tensor& S, const std::vector<int>& labels);

struct AdvGrads {
    TensorMap params;  // adversary tensors
    Tensor dS;         // loss gradient w.r.t. the similarity logits
};

AdvGrads adv_backward(const Adversary& adv, const AdvTrace& trace);

struct TrainSchedule {
    std::size_t batch_size = 256;
    double lr_model = 2e-5;
    double lr_adv = 2e-4;
    std::size_t warmup_adv_epochs = 2;
    std::size_t alternation_block = 10;
    std::size_t max_epochs = 600;  // includes warm-up epochs
    double early_stop_fraction = 0.5;
    std::uint64_t seed = 0;
    std::size_t bias_k = 100;
    std::size_t recall_k = 5;

    void validate() const;
    nlohmann::ordered_json to_json() const;
};

// Everything the loop reads: fixed images plus the three query sets.
struct DebiasData {
    Tensor images;  // N x d, unit rows
    AttributeTable attrs;
    std::vector<std::size_t> concept_of;  // ground-truth content query per image
    QuerySet content, train, test;
};

struct EvalMetrics {
    double test_max_skew = 0.0;
    double test_ndkl = 0.0;
    double train_max_skew = 0.0;
    double recall = 0.0;       // recall@k over content pairs, percent
    double zs_accuracy = 0.0;  // percent

    nlohmann::ordered_json to_json() const;
    static EvalMetrics from_json(const nlohmann::json& j);
};

EvalMetrics evaluate(const ToyDualEncoder& enc, const Tokenizer& tok, const DebiasData& data, std::size_t bias_k,
                     std::size_t recall_k, bool use_prompt = true);

// Complete loop state at an epoch boundary; enough to resume bit-exactly.
struct RunState {
    std::size_t next_epoch = 0;
    std::uint64_t global_batch = 0;  // counts post-warm-up batches
    ToyDualEncoder encoder;
    AdaptationState adapt;
    Adversary adversary;
    EvalMetrics baseline;
    std::optional<std::size_t> best_epoch;
    EvalMetrics best_metrics;
    ToyDualEncoder best_encoder;
    std::size_t record_lines = 0;
};

void save_run_state(const std::filesystem::path& path, const RunState& s, const Tokenizer& tok);
RunState load_run_state(const std::filesystem::path& path);

struct DebiasResult {
    ToyDualEncoder encoder;  // best-by-bias checkpoint
    std::string stop_reason;  // max_epochs | early_stop | nan_abort
    std::optional<std::size_t> best_epoch;
    EvalMetrics baseline, best;
    EvalMetrics last;  // encoder state when the run stopped
    std::size_t epochs_run = 0;
    std::vector<nlohmann::ordered_json> record;  // JSON-lines entries
    RunState final_state;

    // min(recall ratio, accuracy ratio) of the returned checkpoint.
    double proxy_retention() const;
    // The same ratio for the encoder at the point the run stopped.
    double final_retention() const;
    double bias_reduction() const;  // 1 - best/baseline test MaxSkew
};

struct DebiasOptions {
    AdaptMode mode = AdaptMode::prompt;
    std::size_t prompt_n = 2;
    PromptPosition prompt_pos = PromptPosition::prepend;
    std::string config_hash;
    bool log_steps = true;
    // Called after each epoch with the state needed to resume from there.
    std::function<void(const RunState&)> on_epoch;
};

// Fresh run: attaches a zero-initialised prompt block of `prompt_n` rows and
// trains per the schedule.
DebiasResult run_debias(const DebiasData& data, const ToyDualEncoder& encoder, const Tokenizer& tok,
                        const TrainSchedule& schedule, const DebiasOptions& opt);

// Continues a run from a saved epoch boundary.
DebiasResult resume_debias(const DebiasData& data, RunState state, const Tokenizer& tok,
                           const TrainSchedule& schedule, const DebiasOptions& opt);

// One alternation step for the model: gradient ascent on the adversary loss
// through S = similarity(images, train queries). Returns the adversary loss
// before the update.
double debias_step(ToyDualEncoder& enc, AdaptationState& state, const Adversary& adv, const Tokenizer& tok,
                   const Tensor& batch_images, const std::vector<int>& batch_labels, const QuerySet& train,
                   double lr);

double adversary_step(Adversary& adv, const ToyDualEncoder& enc, const Tokenizer& tok, const Tensor& batch_images,
                      const std::vector<int>& batch_labels, const QuerySet& train, double lr);

}  // namespace vlbias
