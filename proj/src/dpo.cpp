#include "barstream/dpo.hpp"

#include <algorithm>
#include <atomic>
#include <cctype>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <limits>
#include <sstream>
#include <thread>

#include "barstream/metrics.hpp"

namespace barstream::dpo {

namespace {

double softplus(double x) {
    return x > 0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x));
}

double sigmoid(double x) {
    return x >= 0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
}

std::string fmt_double(double v) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

} // namespace

void DpoConfig::validate() const {
    if (!(beta > 0)) throw Error("beta must be positive");
    if (lambda < 0) throw Error("lambda must be non-negative");
    if (iterations < 0) throw Error("iterations must be non-negative");
    if (steps_per_iteration < 0) throw Error("steps_per_iteration must be non-negative");
    if (generations_per_prompt <= 0) throw Error("generations_per_prompt must be positive");
    if (!(select_fraction > 0) || select_fraction > 0.5)
        throw Error("select_fraction must be in (0, 0.5]");
    if (threads < 0) throw Error("threads must be non-negative");
}

// --- losses -------------------------------------------------------------------

double dpo_loss(double lp_w_theta, double lp_w_ref, double lp_l_theta, double lp_l_ref,
                double beta) {
    double inner = beta * ((lp_w_theta - lp_w_ref) - (lp_l_theta - lp_l_ref));
    return softplus(-inner);
}

double dpop_loss_grad(double lp_w_theta, double lp_w_ref, double lp_l_theta,
                      double lp_l_ref, double beta, double lambda, DpopGrad* g) {
    double hinge = lp_w_ref - lp_w_theta;
    bool active = hinge > 0; // the boundary itself takes the inactive slope
    double inner = beta * ((lp_w_theta - lp_w_ref) - (lp_l_theta - lp_l_ref));
    if (active) inner -= beta * lambda * hinge;
    double loss = softplus(-inner);
    if (g) {
        double dinner = -sigmoid(-inner);
        g->d_lp_w = dinner * (active ? beta * (1.0 + lambda) : beta);
        g->d_lp_l = dinner * -beta;
    }
    return loss;
}

double dpop_loss(double lp_w_theta, double lp_w_ref, double lp_l_theta, double lp_l_ref,
                 double beta, double lambda) {
    return dpop_loss_grad(lp_w_theta, lp_w_ref, lp_l_theta, lp_l_ref, beta, lambda,
                          nullptr);
}

// --- eligibility filters ------------------------------------------------------

FilterReport make_filter_report(const std::string& id, const FilterFlags& flags) {
    FilterReport r;
    r.id = id;
    r.flags = flags;
    r.eligible_chosen = !flags.syntax_error && !flags.staves_ungrouped && !flags.plagiarized;
    r.eligible_rejected = !flags.syntax_error && !flags.plagiarized;
    return r;
}

namespace {

// [r:k/m] prefixes must step k by +1 and m by -1 per annotated line and end
// at m == 0. Text without annotations passes vacuously.
bool annotations_consistent(const std::string& text) {
    std::istringstream in(text);
    std::string line;
    long prev_k = 0, prev_m = 0;
    bool any = false;
    while (std::getline(in, line)) {
        if (line.rfind("[r:", 0) != 0) continue;
        long k = 0, m = 0;
        int consumed = 0;
        if (std::sscanf(line.c_str(), "[r:%ld/%ld]%n", &k, &m, &consumed) != 2 ||
            consumed == 0)
            return false;
        if (k < 1 || m < 0) return false;
        if (any && (k != prev_k + 1 || m != prev_m - 1)) return false;
        prev_k = k;
        prev_m = m;
        any = true;
    }
    return !any || prev_m == 0;
}

} // namespace

bool check_syntax(const std::string& piece_text) {
    const std::string no_prompt = prep::strip_prompt(piece_text);
    if (!annotations_consistent(no_prompt)) return false;
    return metrics::bar_alignment({piece_text}).misaligned == 0;
}

bool check_staves_grouped(const abc::Sheet& sheet) {
    const auto& voices = sheet.header.voices;
    for (std::size_t i = 0; i < voices.size(); ++i) {
        if (!voices[i].instrument) continue;
        // find the run of this name and make sure it never reappears later
        std::size_t j = i;
        while (j + 1 < voices.size() && voices[j + 1].instrument &&
               *voices[j + 1].instrument == *voices[i].instrument)
            ++j;
        for (std::size_t t = j + 1; t < voices.size(); ++t)
            if (voices[t].instrument && *voices[t].instrument == *voices[i].instrument)
                return false;
    }
    return true;
}

namespace {

constexpr std::uint64_t kHashBase = 1099511628211ULL;

// Body text used for plagiarism comparison: prompt and annotations removed,
// lines after the key line joined verbatim.
std::string plagiarism_body(const std::string& text) {
    const std::string clean = prep::strip_bar_annotations(prep::strip_prompt(text));
    std::istringstream in(clean);
    std::string line, body;
    bool seen_key = false;
    while (std::getline(in, line)) {
        if (!seen_key) {
            if (line.rfind("K:", 0) == 0) seen_key = true;
            continue;
        }
        body += line;
        body += '\n';
    }
    return seen_key ? body : clean;
}

std::vector<std::uint64_t> gram_hashes(const std::string& s, int n) {
    std::vector<std::uint64_t> out;
    if (s.size() < static_cast<std::size_t>(n)) return out;
    std::uint64_t top = 1;
    for (int i = 0; i < n - 1; ++i) top *= kHashBase;
    std::uint64_t h = 0;
    for (int i = 0; i < n; ++i)
        h = h * kHashBase + static_cast<unsigned char>(s[static_cast<std::size_t>(i)]);
    out.push_back(h);
    for (std::size_t i = 1; i + static_cast<std::size_t>(n) <= s.size(); ++i) {
        h -= static_cast<unsigned char>(s[i - 1]) * top;
        h = h * kHashBase + static_cast<unsigned char>(s[i + static_cast<std::size_t>(n) - 1]);
        out.push_back(h);
    }
    return out;
}

} // namespace

PlagiarismIndex::PlagiarismIndex(const std::vector<std::string>& ground_truth,
                                 PlagiarismConfig cfg)
    : cfg_(cfg) {
    if (cfg_.ngram < 1) throw Error("n-gram size must be positive");
    for (const std::string& text : ground_truth) {
        bodies_.push_back(plagiarism_body(text));
        const std::vector<std::uint64_t> hs = gram_hashes(bodies_.back(), cfg_.ngram);
        grams_.emplace_back(hs.begin(), hs.end());
    }
}

double PlagiarismIndex::max_containment(const std::string& piece_text) const {
    const std::string body = plagiarism_body(piece_text);
    if (body.size() < static_cast<std::size_t>(cfg_.ngram)) {
        for (const std::string& gt : bodies_)
            if (gt == body) return 1.0;
        return 0.0;
    }
    const std::vector<std::uint64_t> hs = gram_hashes(body, cfg_.ngram);
    double best = 0.0;
    for (const auto& set : grams_) {
        std::size_t hits = 0;
        for (std::uint64_t h : hs) hits += set.count(h);
        best = std::max(best, static_cast<double>(hits) / static_cast<double>(hs.size()));
    }
    return best;
}

bool PlagiarismIndex::contains(const std::string& piece_text) const {
    return max_containment(piece_text) > cfg_.threshold;
}

bool check_plagiarism(const std::string& piece_text, const PlagiarismIndex& index) {
    return index.contains(piece_text);
}

// --- preference pair selection ------------------------------------------------

namespace {

// ceil(fraction * n) with a guard against fp noise pushing an exact product
// over the next integer.
std::size_t pool_size(double fraction, std::size_t n) {
    return static_cast<std::size_t>(
        std::ceil(fraction * static_cast<double>(n) - 1e-9));
}

std::vector<std::size_t> score_order(const std::vector<ScoredPiece>& scored) {
    std::vector<std::size_t> order(scored.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
        if (scored[a].score != scored[b].score) return scored[a].score > scored[b].score;
        return scored[a].id < scored[b].id;
    });
    return order;
}

} // namespace

SelectionPools select_pools(const std::vector<ScoredPiece>& scored,
                            const std::vector<FilterReport>& filters, double fraction) {
    if (scored.empty()) throw InsufficientEligible("empty scored pool");
    if (scored.size() != filters.size())
        throw Error("one filter report per scored piece required");
    for (std::size_t i = 0; i < scored.size(); ++i)
        if (scored[i].id != filters[i].id)
            throw Error("filter report order does not match the scored pieces");

    const std::size_t m = pool_size(fraction, scored.size());
    const std::vector<std::size_t> order = score_order(scored);

    SelectionPools pools;
    for (std::size_t pos = 0; pos < order.size() && pools.chosen.size() < m; ++pos)
        if (filters[order[pos]].eligible_chosen) pools.chosen.push_back(order[pos]);
    if (pools.chosen.empty()) throw InsufficientEligible("no eligible chosen pieces");

    const double min_chosen = scored[pools.chosen.back()].score;
    for (std::size_t pos = order.size(); pos > 0 && pools.rejected.size() < m; --pos) {
        std::size_t idx = order[pos - 1];
        if (filters[idx].eligible_rejected && scored[idx].score < min_chosen)
            pools.rejected.push_back(idx);
    }
    if (pools.rejected.empty()) throw InsufficientEligible("no eligible rejected pieces");
    return pools;
}

std::vector<PreferencePair> select_pairs(const prep::Prompt& prompt,
                                         const std::vector<ScoredPiece>& scored,
                                         const std::vector<FilterReport>& filters,
                                         const DpoConfig& cfg, Rng& rng) {
    const SelectionPools pools = select_pools(scored, filters, cfg.select_fraction);
    const std::size_t m = pool_size(cfg.select_fraction, scored.size());
    const std::size_t count =
        std::min(pools.chosen.size() * pools.rejected.size(), 4 * m);

    std::vector<PreferencePair> pairs;
    pairs.reserve(count);
    for (std::size_t i = 0; i < count; ++i) {
        const ScoredPiece& w =
            scored[pools.chosen[static_cast<std::size_t>(
                rand_index(rng, static_cast<int>(pools.chosen.size())))]];
        const ScoredPiece& l =
            scored[pools.rejected[static_cast<std::size_t>(
                rand_index(rng, static_cast<int>(pools.rejected.size())))]];
        PreferencePair pr;
        pr.prompt = prompt;
        pr.chosen = w.text;
        pr.rejected = l.text;
        pr.chosen_id = w.id;
        pr.rejected_id = l.id;
        pairs.push_back(std::move(pr));
    }
    return pairs;
}

// --- iterative driver ---------------------------------------------------------

std::string format_iteration_report(const IterationReport& r) {
    std::string out;
    out += "policy: " + std::to_string(r.policy_index) + "\n";
    out += "acs: " + fmt_double(r.acs) + "\n";
    out += "bae: " + fmt_double(r.bae) + "\n";
    out += "generated: " + std::to_string(r.generated) + "\n";
    out += "scored: " + std::to_string(r.scored) + "\n";
    out += "syntax_errors: " + std::to_string(r.syntax_errors) + "\n";
    out += "staves_ungrouped: " + std::to_string(r.staves_ungrouped) + "\n";
    out += "plagiarized: " + std::to_string(r.plagiarized) + "\n";
    out += "chosen_pool: " + std::to_string(r.chosen_pool) + "\n";
    out += "rejected_pool: " + std::to_string(r.rejected_pool) + "\n";
    out += "pairs: " + std::to_string(r.pairs) + "\n";
    out += "skipped_prompts: " + std::to_string(r.skipped_prompts) + "\n";
    out += "steps: " + std::to_string(r.steps) + "\n";
    out += "mean_dpop_start: " + fmt_double(r.mean_dpop_start) + "\n";
    out += "mean_dpop_end: " + fmt_double(r.mean_dpop_end) + "\n";
    for (const std::string& w : r.warnings) out += "warning: " + w + "\n";
    return out;
}

namespace {

namespace fs = std::filesystem;

void write_file(const fs::path& path, const std::string& content) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw Error("cannot write " + path.string());
    out << content;
    if (!out) throw Error("short write to " + path.string());
}

std::string prompt_text_of(const prep::Prompt& p) {
    return prep::prompt_line(p) + "\n";
}

std::string piece_file_name(std::size_t prompt_index, int gen_index) {
    char buf[48];
    std::snprintf(buf, sizeof(buf), "p%02zu-g%04d.abc", prompt_index, gen_index);
    return buf;
}

struct GenPool {
    std::vector<ScoredPiece> scored;
    std::vector<FilterReport> filters;
};

// Generates and scores one pool per prompt with a worker-thread fan-out; the
// per-piece seed stream makes the result independent of the thread count.
std::vector<GenPool> generate_pools(const model::Policy& policy,
                                    const std::vector<evaluator::PromptProfile>& profiles,
                                    int k, const DpoConfig& cfg,
                                    const PlagiarismIndex& plag, IterationReport& rep) {
    struct GenOut {
        std::string piece;
        double score = std::numeric_limits<double>::lowest();
        FilterFlags flags;
        bool scoreable = false;
    };

    const std::size_t n_jobs =
        profiles.size() * static_cast<std::size_t>(cfg.generations_per_prompt);
    std::vector<GenOut> outs(n_jobs);
    std::atomic<std::size_t> next{0};

    auto run_job = [&](std::size_t j) {
        const std::size_t pi = j / static_cast<std::size_t>(cfg.generations_per_prompt);
        const int gi = static_cast<int>(j % static_cast<std::size_t>(cfg.generations_per_prompt));
        const std::string ptext = prompt_text_of(profiles[pi].prompt);
        GenOut& o = outs[j];

        model::SamplingConfig sc = cfg.sampling;
        sc.seed = mix_seed(cfg.seed, {0x9eULL, static_cast<std::uint64_t>(k), pi,
                                      static_cast<std::uint64_t>(gi)});
        try {
            const std::string full = model::generate(policy, ptext, sc);
            o.piece = full.substr(ptext.size());
        } catch (const Error&) {
            o.piece.clear();
        }
        o.flags.syntax_error = !check_syntax(o.piece);
        try {
            const abc::Sheet sheet =
                abc::parse_sheet(prep::strip_bar_annotations(prep::strip_prompt(o.piece)));
            o.flags.staves_ungrouped = !check_staves_grouped(sheet);
        } catch (const Error&) {
            // unparseable pieces are already syntax-flagged
        }
        o.flags.plagiarized = plag.contains(o.piece);
        try {
            const evaluator::SemanticFeature f = evaluator::extract_features(o.piece);
            o.score = evaluator::clamp2_score(f, profiles[pi].mean_feature);
            o.scoreable = true;
        } catch (const Error&) {
        }
    };

    int workers = cfg.threads > 0 ? cfg.threads
                                  : static_cast<int>(std::thread::hardware_concurrency());
    workers = std::max(1, std::min<int>(workers, static_cast<int>(n_jobs)));
    std::vector<std::thread> threads;
    for (int t = 0; t < workers; ++t)
        threads.emplace_back([&]() {
            for (;;) {
                std::size_t j = next.fetch_add(1);
                if (j >= outs.size()) return;
                run_job(j);
            }
        });
    for (auto& t : threads) t.join();

    std::vector<GenPool> pools(profiles.size());
    std::vector<std::string> texts;
    double score_sum = 0;
    for (std::size_t j = 0; j < outs.size(); ++j) {
        const std::size_t pi = j / static_cast<std::size_t>(cfg.generations_per_prompt);
        const int gi = static_cast<int>(j % static_cast<std::size_t>(cfg.generations_per_prompt));
        GenOut& o = outs[j];
        char id[16];
        std::snprintf(id, sizeof(id), "g%04d", gi);

        pools[pi].scored.push_back({id, o.piece, o.score});
        pools[pi].filters.push_back(make_filter_report(id, o.flags));
        texts.push_back(o.piece);

        ++rep.generated;
        rep.syntax_errors += o.flags.syntax_error;
        rep.staves_ungrouped += o.flags.staves_ungrouped;
        rep.plagiarized += o.flags.plagiarized;
        if (o.scoreable) {
            ++rep.scored;
            score_sum += o.score;
        }
    }
    rep.acs = rep.scored ? score_sum / static_cast<double>(rep.scored) : 0.0;
    rep.bae = metrics::bar_alignment_error(texts);

    if (!cfg.artifact_dir.empty()) {
        const fs::path dir = fs::path(cfg.artifact_dir) / ("pool_" + std::to_string(k));
        fs::create_directories(dir);
        std::string table = "id\tprompt\tscore\tsyntax_error\tstaves_ungrouped\tplagiarized\n";
        for (std::size_t pi = 0; pi < pools.size(); ++pi) {
            const std::string ptext = prompt_text_of(profiles[pi].prompt);
            for (std::size_t g = 0; g < pools[pi].scored.size(); ++g) {
                const ScoredPiece& sp = pools[pi].scored[g];
                const FilterFlags& fl = pools[pi].filters[g].flags;
                write_file(dir / piece_file_name(pi, static_cast<int>(g)),
                           ptext + sp.text);
                table += sp.id + "\t" + std::to_string(pi) + "\t" + fmt_double(sp.score) +
                         "\t" + std::to_string(fl.syntax_error) + "\t" +
                         std::to_string(fl.staves_ungrouped) + "\t" +
                         std::to_string(fl.plagiarized) + "\n";
            }
        }
        write_file(dir / "scores.tsv", table);
        model::save_checkpoint((fs::path(cfg.artifact_dir) /
                                ("policy_" + std::to_string(k) + ".ckpt"))
                                   .string(),
                               policy);
    }
    return pools;
}

double mean_dpop(const model::Policy& policy,
                 const std::vector<std::vector<PreferencePair>>& groups, double beta,
                 double lambda) {
    double sum = 0;
    std::size_t n = 0;
    for (const auto& group : groups) {
        for (const PreferencePair& pr : group) {
            const std::string pt = prompt_text_of(pr.prompt);
            const double lw = model::sequence_log_prob(policy, pt, pr.chosen);
            const double ll = model::sequence_log_prob(policy, pt, pr.rejected);
            sum += dpop_loss(lw, pr.lp_w_ref, ll, pr.lp_l_ref, beta, lambda);
            ++n;
        }
    }
    return n ? sum / static_cast<double>(n) : 0.0;
}

} // namespace

ClampDpoResult clamp_dpo(const model::Policy& start,
                         const std::vector<evaluator::PromptProfile>& profiles,
                         const std::vector<std::string>& ground_truth,
                         const DpoConfig& cfg) {
    cfg.validate();
    if (profiles.empty()) throw Error("no prompt profiles");

    ClampDpoResult res{start, {}};
    model::Policy& policy = res.policy;
    const PlagiarismIndex plag(ground_truth);
    bool aborted = false;

    for (int k = 0; k <= cfg.iterations && !aborted; ++k) {
        IterationReport rep;
        rep.policy_index = k;
        std::vector<GenPool> pools = generate_pools(policy, profiles, k, cfg, plag, rep);

        if (k < cfg.iterations) {
            // selection
            std::vector<std::vector<PreferencePair>> groups;
            std::string pairs_table = "prompt\tchosen\trejected\n";
            for (std::size_t pi = 0; pi < pools.size(); ++pi) {
                Rng rng(mix_seed(cfg.seed, {0xA1ULL, static_cast<std::uint64_t>(k), pi}));
                try {
                    const SelectionPools sp =
                        select_pools(pools[pi].scored, pools[pi].filters, cfg.select_fraction);
                    rep.chosen_pool += sp.chosen.size();
                    rep.rejected_pool += sp.rejected.size();
                    std::vector<PreferencePair> pairs = select_pairs(
                        profiles[pi].prompt, pools[pi].scored, pools[pi].filters, cfg, rng);
                    for (const PreferencePair& pr : pairs)
                        pairs_table += std::to_string(pi) + "\t" + pr.chosen_id + "\t" +
                                       pr.rejected_id + "\n";
                    rep.pairs += pairs.size();
                    groups.push_back(std::move(pairs));
                } catch (const InsufficientEligible& e) {
                    ++rep.skipped_prompts;
                    rep.warnings.push_back("prompt " + std::to_string(pi) +
                                           " skipped: " + e.what());
                }
            }

            if (groups.empty()) {
                rep.warnings.push_back("no preference pairs; optimization skipped");
            } else {
                // freeze the reference and cache its log-probs per pair
                const model::Policy ref = policy;
                for (auto& group : groups) {
                    for (PreferencePair& pr : group) {
                        const std::string pt = prompt_text_of(pr.prompt);
                        pr.lp_w_ref = model::sequence_log_prob(ref, pt, pr.chosen);
                        pr.lp_l_ref = model::sequence_log_prob(ref, pt, pr.rejected);
                    }
                }
                rep.mean_dpop_start = mean_dpop(policy, groups, cfg.beta, cfg.lambda);

                const std::vector<double> snapshot = policy.params;
                model::AdamState state;
                Rng orng(mix_seed(cfg.seed, {0x09ULL, static_cast<std::uint64_t>(k)}));
                std::vector<double> grad;
                for (int i = 0; i < cfg.steps_per_iteration; ++i) {
                    const auto& group = groups[static_cast<std::size_t>(
                        rand_index(orng, static_cast<int>(groups.size())))];
                    const PreferencePair& pr = group[static_cast<std::size_t>(
                        rand_index(orng, static_cast<int>(group.size())))];
                    const std::string pt = prompt_text_of(pr.prompt);
                    try {
                        const double lw = model::sequence_log_prob(policy, pt, pr.chosen);
                        const double ll = model::sequence_log_prob(policy, pt, pr.rejected);
                        DpopGrad dg;
                        const double loss = dpop_loss_grad(lw, pr.lp_w_ref, ll, pr.lp_l_ref,
                                                           cfg.beta, cfg.lambda, &dg);
                        if (!std::isfinite(loss))
                            throw model::NonFiniteGradient("non-finite preference loss");
                        grad.assign(policy.params.size(), 0.0);
                        model::sequence_log_prob_grad(policy, pt, pr.chosen, {}, dg.d_lp_w,
                                                      grad);
                        model::sequence_log_prob_grad(policy, pt, pr.rejected, {}, dg.d_lp_l,
                                                      grad);
                        model::adamw_update(policy, grad, state, cfg.opt);
                    } catch (const model::NonFiniteGradient& e) {
                        policy.params = snapshot;
                        rep.warnings.push_back("iteration " + std::to_string(k + 1) +
                                               " rolled back after step " +
                                               std::to_string(rep.steps) + ": " + e.what());
                        aborted = true;
                        break;
                    }
                    ++rep.steps;
                }
                rep.mean_dpop_end = mean_dpop(policy, groups, cfg.beta, cfg.lambda);
            }

            if (!cfg.artifact_dir.empty())
                write_file(fs::path(cfg.artifact_dir) / ("pool_" + std::to_string(k)) /
                               "pairs.tsv",
                           pairs_table);
        }

        if (!cfg.artifact_dir.empty())
            write_file(fs::path(cfg.artifact_dir) / ("pool_" + std::to_string(k)) /
                           "report.txt",
                       format_iteration_report(rep));
        res.reports.push_back(std::move(rep));
    }
    return res;
}

} // namespace barstream::dpo
