#pragma once

// Hierarchical patch/character decoder. A patch-level causal transformer maps
// flattened one-hot patches to hidden states; a character-level causal
// transformer conditions on the hidden state of row k and the previous
// characters of patch k+1 to predict patch k+1 one character at a time.
// Everything runs in double precision with hand-written backprop so gradient
// checks against finite differences are exact to rounding.

#include <cstddef>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "barstream/errors.hpp"
#include "barstream/patching.hpp"
#include "barstream/rng.hpp"

namespace barstream::model {

BARSTREAM_DEFINE_ERROR(ContextOverflow);
BARSTREAM_DEFINE_ERROR(NonFiniteGradient);
BARSTREAM_DEFINE_ERROR(MaxLengthExceeded);

struct ModelConfig {
    int patch_layers = 2;
    int char_layers = 2;
    int hidden = 64;
    int heads = 4;
    int context_patches = 128;
    int patch_size = 16;
    int vocab = 259;
    std::uint64_t seed = 1;

    // Desk-scale default exercised by the test suite.
    static ModelConfig desk();
    // Full-scale preset (20/6/1280/1024); constructible, never trained here.
    static ModelConfig paper_scale();
    void validate() const;

    friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

// One named tensor inside the flat parameter store.
struct TensorSpec {
    std::string name;
    std::size_t rows = 0;
    std::size_t cols = 0; // 1 for vectors
    std::size_t offset = 0;
    bool decay = false; // weight decay applies (2-D weights only)

    std::size_t size() const { return rows * cols; }
};

struct ParamLayout {
    std::vector<TensorSpec> tensors;
    std::size_t total = 0;

    const TensorSpec& find(const std::string& name) const;
};

ParamLayout build_layout(const ModelConfig& cfg);
std::size_t param_count(const ModelConfig& cfg);

struct Policy {
    ModelConfig config;
    std::vector<double> params;

    double* tensor(const ParamLayout& layout, const std::string& name);
};

// Seeded normal(0, 0.02) weights, zero biases, unit LayerNorm gains.
Policy init_policy(const ModelConfig& cfg);

// Logits for every patch row: row k holds the S x V character predictions of
// patch k+1 (the final row predicts the patch after the sequence).
struct Logits {
    std::size_t patches = 0;
    std::size_t patch_size = 0;
    std::size_t vocab = 0;
    std::vector<double> data; // [patches][patch_size][vocab]

    double at(std::size_t k, std::size_t i, std::size_t v) const {
        return data[(k * patch_size + i) * vocab + v];
    }
};

// ContextOverflow if the sequence is longer than context_patches.
Logits forward(const Policy& policy, const patching::PatchSequence& ps);

// Characters of a target patch that enter the loss: the content characters
// plus the first PAD, which acts as the end-of-patch terminator a sampler
// needs to see. The PAD tail beyond it is masked out.
std::size_t scored_length(const patching::Patch& p, std::size_t vocab);

// Mean NLL per scored character over the batch.
double nll_loss(const Policy& policy, const std::vector<patching::PatchSequence>& batch);

// Loss plus parameter gradient (accumulated into grad, which is resized and
// zeroed). Used by train_step and the finite-difference tests.
double nll_loss_grad(const Policy& policy, const std::vector<patching::PatchSequence>& batch,
                     std::vector<double>& grad);

struct OptimizerConfig {
    double lr = 1e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.01;
    int warmup_steps = 50;
};

struct AdamState {
    std::vector<double> m;
    std::vector<double> v;
    std::int64_t step = 0;
};

// One AdamW step with linear warmup; weight decay skips vectors (biases,
// LayerNorm, positions are 1-D in the layout). NonFiniteGradient aborts
// before touching the parameters.
double train_step(Policy& policy, const std::vector<patching::PatchSequence>& batch,
                  AdamState& state, const OptimizerConfig& opt);

// The update half of train_step, for externally computed objectives; state
// resizes on first use. NonFiniteGradient leaves the parameters untouched.
void adamw_update(Policy& policy, const std::vector<double>& grad, AdamState& state,
                  const OptimizerConfig& opt);

struct ScoreOptions {
    bool with_eos = true;      // score the EOS patch after the piece
    bool allow_windowing = true; // slide a 50%-overlap window past the context
};

// Sum of log p(char | context) over the piece characters only; the prompt is
// conditioned on but never scored. Long sequences are scored in windows of
// context_patches with stride context/2, each window scoring its second half.
// ContextOverflow when windowing is disabled and the sequence does not fit.
double sequence_log_prob(const Policy& policy, const std::string& prompt_text,
                         const std::string& piece_text, const ScoreOptions& opts = {});

// Scored character count of the piece under the same masking (used by tests
// and perplexity reporting).
std::size_t scored_char_count(const Policy& policy, const std::string& prompt_text,
                              const std::string& piece_text, const ScoreOptions& opts = {});

// Same score, additionally adding scale times its parameter gradient into
// grad (zeroed first unless already params-sized). Lets a preference
// objective combine several sequences with signed weights.
double sequence_log_prob_grad(const Policy& policy, const std::string& prompt_text,
                              const std::string& piece_text, const ScoreOptions& opts,
                              double scale, std::vector<double>& grad);

struct SamplingConfig {
    double temperature = 1.0; // 0 selects argmax
    double top_p = 1.0;
    int max_new_patches = 2048;
    std::uint64_t seed = 0;
};

// Header plus the second half of the body lines, used to restart a full
// context mid-stream. Header means everything through the K: line.
std::string stream_reseed_text(const std::string& generated_text);

struct GenerateStats {
    int new_patches = 0;
    int reseeds = 0;
    bool ended_by_countdown = false;
    bool ended_by_eos = false;
};

// Autoregressive patch-by-patch sampling from a prompt. When the context is
// 90% full and the bar countdown has not reached zero, the context is
// re-seeded with stream_reseed_text at the next line boundary and generation
// continues. Returns the full detokenized text (prompt included).
// MaxLengthExceeded once max_new_patches is spent.
std::string generate(const Policy& policy, const std::string& prompt_text,
                     const SamplingConfig& sampling, GenerateStats* stats = nullptr);

// --- checkpoints -------------------------------------------------------------

// Versioned binary dump of config + parameters (+ optimizer state when
// present); bytes round-trip exactly.
void save_checkpoint(const std::string& path, const Policy& policy,
                     const AdamState* state = nullptr);
Policy load_checkpoint(const std::string& path, AdamState* state = nullptr);

// --- training log ------------------------------------------------------------

struct TrainLogRow {
    std::int64_t step = 0;
    double loss = 0;
    double lr = 0;
};

std::string format_train_log(const std::vector<TrainLogRow>& rows);
void save_train_log(const std::string& path, const std::vector<TrainLogRow>& rows);

} // namespace barstream::model
