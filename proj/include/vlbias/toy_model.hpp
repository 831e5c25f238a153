#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <set>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

namespace vlbias {

using Tensor = Eigen::MatrixXd;
using TensorMap = std::map<std::string, Tensor>;

// Lowercasing whitespace/punctuation tokenizer with a closed vocabulary.
class Tokenizer {
public:
    static constexpr int kPad = 0;
    static constexpr int kUnk = 1;

    Tokenizer() = default;
    // Vocabulary = [PAD], [UNK], then every word of `corpus` in sorted order.
    static Tokenizer build(const std::vector<std::string>& corpus, std::size_t max_len = 16);

    static std::vector<std::string> split(const std::string& text);
    // Exactly max_len ids; truncated or padded with kPad. A text without any
    // word encodes as a single [UNK].
    std::vector<int> encode(const std::string& text) const;

    std::size_t vocab_size() const { return words_.size(); }
    std::size_t max_len() const { return max_len_; }
    const std::vector<std::string>& words() const { return words_; }

    nlohmann::ordered_json to_json() const;
    static Tokenizer from_json(const nlohmann::json& j);

private:
    std::vector<std::string> words_;
    std::map<std::string, int> index_;
    std::size_t max_len_ = 16;
};

struct EncoderShape {
    std::size_t d_tok = 32;
    std::size_t hidden = 64;
    std::size_t dim = 64;
    double token_scale = 0.02;  // std of token embeddings
    double w1_gain = 1.0;       // W1 std = w1_gain / (token_scale * sqrt(d_tok))
    double w2_scale = 0.01;     // W2 std = w2_scale / sqrt(hidden)
};

enum class PromptPosition { prepend, append };

std::string to_string(PromptPosition p);
PromptPosition parse_prompt_position(const std::string& s);

struct PromptBlock {
    Tensor tokens;  // n x d_tok
    PromptPosition position = PromptPosition::prepend;

    std::size_t size() const { return static_cast<std::size_t>(tokens.rows()); }
    // Initialised to the zero-pad embedding.
    static PromptBlock zeros(std::size_t n, std::size_t d_tok, PromptPosition pos = PromptPosition::prepend);
};

// Text tower: token table -> (prompt insertion) -> mean pool -> affine ->
// tanh -> affine -> L2 normalise. Image side is identity + normalisation.
struct ToyDualEncoder {
    Tensor E;   // V x d_tok, row 0 is the pad embedding (zero)
    Tensor W1;  // d_tok x h
    Tensor b1;  // 1 x h
    Tensor W2;  // h x d
    Tensor b2;  // 1 x d
    PromptBlock prompt;
    double logit_scale = 100.0;
    // Bumped on every parameter update; traces remember the value they saw.
    std::uint64_t version = 0;

    static ToyDualEncoder init(std::size_t vocab_size, const EncoderShape& shape, std::uint64_t seed);

    std::size_t d_tok() const { return static_cast<std::size_t>(E.cols()); }
    std::size_t hidden() const { return static_cast<std::size_t>(W1.cols()); }
    std::size_t dim() const { return static_cast<std::size_t>(W2.cols()); }

    Tensor& tensor(const std::string& name);
    const Tensor& tensor(const std::string& name) const;
};

// Tensor names in canonical order; "P" is the prompt block.
const std::vector<std::string>& tensor_names();

struct TextTrace {
    std::uint64_t version = 0;
    bool prompt_used = false;
    std::vector<std::vector<int>> token_ids;  // non-pad ids per text
    Eigen::VectorXd count;                    // rows pooled per text (incl. prompt)
    Tensor pooled;                            // M x d_tok
    Tensor hidden;                            // M x h, post-tanh
    Eigen::VectorXd norm;                     // |z| per text
    Tensor out;                               // M x d, unit rows
};

TextTrace encode_texts(const ToyDualEncoder& enc, const Tokenizer& tok,
                       const std::vector<std::string>& texts, bool use_prompt = true);
Eigen::VectorXd encode_text(const ToyDualEncoder& enc, const Tokenizer& tok, const std::string& text,
                            bool use_prompt = true);

// Row-normalises image embeddings.
Tensor normalize_rows(const Tensor& x);

// S[i][m] = logit_scale * x_i . t_m.
Tensor similarity_matrix(const ToyDualEncoder& enc, const Tensor& images, const Tensor& texts);

// Gradients of a scalar loss given dL/d(text outputs) (M x d). Only tensors
// named in `mask` are returned. Throws if the trace predates an update.
TensorMap backward(const ToyDualEncoder& enc, const TextTrace& trace, const Tensor& grad_out,
                   const std::set<std::string>& mask);

enum class AdaptMode { prompt, projection, text_encoder, full };

std::string to_string(AdaptMode m);
AdaptMode parse_adapt_mode(const std::string& s);
std::set<std::string> mask_for(AdaptMode m);

struct AdamConfig {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

// First/second moments for a named set of tensors.
struct AdamState {
    AdamConfig cfg;
    TensorMap m, v;
    std::uint64_t step = 0;

    // One update of `params` (only names present in `grads`). Throws a
    // numerical error, leaving parameters untouched, if any gradient is
    // non-finite.
    void apply(std::map<std::string, Tensor*>& params, const TensorMap& grads, double lr);
};

struct AdaptationState {
    AdaptMode mode = AdaptMode::prompt;
    std::set<std::string> mask;
    AdamState adam;

    static AdaptationState create(AdaptMode mode);
};

void adam_step(AdaptationState& state, ToyDualEncoder& enc, const TensorMap& grads, double lr);

struct PretrainResult {
    std::vector<double> epoch_loss;
};

// Symmetric in-batch contrastive training of every encoder tensor (prompt
// excluded). `pair_images` holds image rows (unit) and `pair_texts` the
// caption of each pair. Batches never repeat a caption.
PretrainResult pretrain_contrastive(ToyDualEncoder& enc, const Tokenizer& tok, const Tensor& images,
                                    const std::vector<std::size_t>& pair_images,
                                    const std::vector<std::string>& pair_texts, std::size_t epochs,
                                    double lr, std::uint64_t seed, std::size_t batch_size = 256);

// Mean of the two cross-entropy directions over an in-batch similarity
// matrix (targets on the diagonal) and its gradient w.r.t. the texts.
double contrastive_loss(const ToyDualEncoder& enc, const Tensor& images, const Tensor& texts,
                        Tensor* grad_texts = nullptr);

// Named float64 tensor blocks plus a JSON metadata block.
void save_tensor_file(const std::filesystem::path& path, const std::vector<std::pair<std::string, Tensor>>& tensors,
                      const nlohmann::ordered_json& meta);
std::pair<std::vector<std::pair<std::string, Tensor>>, nlohmann::json> load_tensor_file(
    const std::filesystem::path& path);

void save_encoder(const std::filesystem::path& path, const ToyDualEncoder& enc, const Tokenizer& tok);
std::pair<ToyDualEncoder, Tokenizer> load_encoder(const std::filesystem::path& path);

}  // namespace vlbias
