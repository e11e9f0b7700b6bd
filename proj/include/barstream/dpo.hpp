#pragma once

// Preference optimization against the semantic-feature evaluator: pool
// selection with eligibility filters, the preference losses, and the
// iterative generate / score / select / optimize driver.

#include <cstddef>
#include <cstdint>
#include <string>
#include <unordered_set>
#include <vector>

#include "barstream/abc.hpp"
#include "barstream/errors.hpp"
#include "barstream/evaluator.hpp"
#include "barstream/model.hpp"
#include "barstream/preprocess.hpp"
#include "barstream/rng.hpp"

namespace barstream::dpo {

BARSTREAM_DEFINE_ERROR(InsufficientEligible);

struct DpoConfig {
    double beta = 0.1;
    double lambda = 10.0;
    int iterations = 2;            // K
    int steps_per_iteration = 200; // N; production runs use thousands
    model::OptimizerConfig opt;    // production preset drops lr to 1e-6
    int generations_per_prompt = 100;
    double select_fraction = 0.10;
    model::SamplingConfig sampling; // per-piece seeds override sampling.seed
    std::uint64_t seed = 1;
    int threads = 0;               // generation workers; 0 = hardware count
    std::string artifact_dir;      // empty keeps everything in memory

    void validate() const;
};

// --- losses -------------------------------------------------------------------

// -log sigmoid(beta * (chosen log-ratio - rejected log-ratio)).
double dpo_loss(double lp_w_theta, double lp_w_ref, double lp_l_theta, double lp_l_ref,
                double beta);

// dpo_loss with a hinge penalty inside the sigmoid that activates when the
// chosen sequence loses probability against the reference.
double dpop_loss(double lp_w_theta, double lp_w_ref, double lp_l_theta, double lp_l_ref,
                 double beta, double lambda);

struct DpopGrad {
    double d_lp_w = 0; // partial w.r.t. lp_w_theta
    double d_lp_l = 0; // partial w.r.t. lp_l_theta
};

// Loss plus partials. At the hinge boundary lp_w_theta == lp_w_ref the
// subgradient of the inactive side is used (penalty slope zero).
double dpop_loss_grad(double lp_w_theta, double lp_w_ref, double lp_l_theta,
                      double lp_l_ref, double beta, double lambda, DpopGrad* g);

// --- eligibility filters ------------------------------------------------------

struct FilterFlags {
    bool syntax_error = false;
    bool staves_ungrouped = false;
    bool plagiarized = false;
};

struct FilterReport {
    std::string id;
    FilterFlags flags;
    bool eligible_chosen = true;   // no flags at all
    bool eligible_rejected = true; // staves grouping only blocks the chosen side
};

FilterReport make_filter_report(const std::string& id, const FilterFlags& flags);

// Parses, checks every bar against the prevailing meter, and verifies that
// [r:k/m] prefixes count down contiguously to zero. Prompt lines are ignored.
bool check_syntax(const std::string& piece_text);

// True when the voices sharing an instrument name sit at contiguous header
// positions. Unnamed voices are unconstrained.
bool check_staves_grouped(const abc::Sheet& sheet);

struct PlagiarismConfig {
    int ngram = 50;         // character n-gram size
    double threshold = 0.8; // max per-piece containment above this flags
};

// Rolling-hash n-gram index over the ground-truth body texts (lines after the
// key line, annotations and prompts stripped). Pieces shorter than one n-gram
// fall back to exact body comparison.
class PlagiarismIndex {
public:
    PlagiarismIndex() = default;
    explicit PlagiarismIndex(const std::vector<std::string>& ground_truth,
                             PlagiarismConfig cfg = {});

    // Largest fraction of the piece's n-grams contained in a single
    // ground-truth piece.
    double max_containment(const std::string& piece_text) const;
    bool contains(const std::string& piece_text) const;

private:
    PlagiarismConfig cfg_;
    std::vector<std::unordered_set<std::uint64_t>> grams_;
    std::vector<std::string> bodies_;
};

bool check_plagiarism(const std::string& piece_text, const PlagiarismIndex& index);

// --- preference pair selection ------------------------------------------------

struct ScoredPiece {
    std::string id; // unique within one pool; sort tie-break
    std::string text;
    double score = 0;
};

struct PreferencePair {
    prep::Prompt prompt;
    std::string chosen;
    std::string rejected;
    std::string chosen_id;
    std::string rejected_id;
    double lp_w_ref = 0; // cached reference log-probs, filled by the driver
    double lp_l_ref = 0;
};

// Index pools into the scored list. chosen holds the best ceil(fraction*n)
// eligible pieces in score order; rejected holds the worst ceil(fraction*n)
// eligible pieces, worst first, restricted to scores strictly below the
// lowest chosen score so every cross pair has a real margin.
struct SelectionPools {
    std::vector<std::size_t> chosen;
    std::vector<std::size_t> rejected;
};

SelectionPools select_pools(const std::vector<ScoredPiece>& scored,
                            const std::vector<FilterReport>& filters, double fraction);

// min(|chosen| * |rejected|, 4 * ceil(fraction*n)) pairs sampled uniformly
// with replacement from the pool cross product.
std::vector<PreferencePair> select_pairs(const prep::Prompt& prompt,
                                         const std::vector<ScoredPiece>& scored,
                                         const std::vector<FilterReport>& filters,
                                         const DpoConfig& cfg, Rng& rng);

// --- iterative driver ---------------------------------------------------------

// Report i describes the pool generated by policy i; entries 0..K-1 carry the
// selection and optimization stats of the iteration that consumed the pool,
// and entry K is evaluation only.
struct IterationReport {
    int policy_index = 0;
    double acs = 0; // mean evaluator score over the scoreable pieces
    double bae = 0;
    std::size_t generated = 0;
    std::size_t scored = 0;
    std::size_t syntax_errors = 0;
    std::size_t staves_ungrouped = 0;
    std::size_t plagiarized = 0;
    std::size_t chosen_pool = 0;
    std::size_t rejected_pool = 0;
    std::size_t pairs = 0;
    std::size_t skipped_prompts = 0;
    int steps = 0;
    double mean_dpop_start = 0;
    double mean_dpop_end = 0;
    std::vector<std::string> warnings;
};

std::string format_iteration_report(const IterationReport& r);

struct ClampDpoResult {
    model::Policy policy;
    std::vector<IterationReport> reports; // K+1 entries
};

// Iteratively: generate per prompt with the current policy, score against the
// prompt profiles, select preference pairs (prompts without eligible pools
// are skipped with a warning), then optimize the policy against a frozen
// reference for steps_per_iteration single-pair steps. Reference log-probs
// are cached per pair. A non-finite gradient rolls the policy back to the
// iteration start and stops. With artifact_dir set, generations, score
// tables, pair manifests, checkpoints, and reports are written under it.
ClampDpoResult clamp_dpo(const model::Policy& start,
                         const std::vector<evaluator::PromptProfile>& profiles,
                         const std::vector<std::string>& ground_truth,
                         const DpoConfig& cfg);

} // namespace barstream::dpo
