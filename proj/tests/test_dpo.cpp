#include "barstream/dpo.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <set>
#include <string>
#include <vector>

#include "barstream/patching.hpp"
#include "doctest.h"

using namespace barstream;
using namespace barstream::dpo;

namespace {

ScoredPiece piece(const std::string& id, double score) {
    return {id, "body-" + id, score};
}

std::vector<FilterReport> clean_filters(const std::vector<ScoredPiece>& scored) {
    std::vector<FilterReport> out;
    for (const auto& sp : scored) out.push_back(make_filter_report(sp.id, {}));
    return out;
}

// twenty pieces with scores 0.01..0.20, id g00 lowest
std::vector<ScoredPiece> ladder20() {
    std::vector<ScoredPiece> out;
    for (int i = 0; i < 20; ++i) {
        char id[8];
        std::snprintf(id, sizeof(id), "g%02d", i);
        out.push_back(piece(id, 0.01 * (i + 1)));
    }
    return out;
}

std::set<std::string> ids_of(const std::vector<ScoredPiece>& scored,
                             const std::vector<std::size_t>& pool) {
    std::set<std::string> out;
    for (std::size_t i : pool) out.insert(scored[i].id);
    return out;
}

} // namespace

TEST_SUITE("dpo.loss") {

TEST_CASE("matched policies sit at ln 2") {
    for (double beta : {0.1, 0.5, 2.0}) {
        CHECK(dpo_loss(0, 0, 0, 0, beta) ==
              doctest::Approx(0.69314718055994529).epsilon(1e-15));
        CHECK(dpo_loss(-3.5, -3.5, -9.25, -9.25, beta) ==
              doctest::Approx(0.69314718055994529).epsilon(1e-15));
        CHECK(dpop_loss(-3.5, -3.5, -9.25, -9.25, beta, 10.0) ==
              doctest::Approx(0.69314718055994529).epsilon(1e-15));
    }
}

TEST_CASE("frozen margin values") {
    // beta 0.1, chosen log-ratio +2, rejected log-ratio -2
    CHECK(dpo_loss(2.0, 0.0, -2.0, 0.0, 0.1) ==
          doctest::Approx(0.5130152523999526).epsilon(1e-15));
    // same margin but the chosen sequence dropped by 1 nat under theta
    CHECK(dpop_loss(-1.0, 0.0, -5.0, 0.0, 0.1, 10.0) ==
          doctest::Approx(1.0374879504858856).epsilon(1e-15));
}

TEST_CASE("lambda zero reduces to the plain loss") {
    Rng rng(31);
    double worst = 0;
    for (int i = 0; i < 1000000; ++i) {
        double a = 10.0 * rand_unit(rng) - 5.0;
        double b = 10.0 * rand_unit(rng) - 5.0;
        double c = 10.0 * rand_unit(rng) - 5.0;
        double d = 10.0 * rand_unit(rng) - 5.0;
        double beta = rand_unit(rng) + 1e-3;
        worst = std::max(worst,
                         std::abs(dpop_loss(a, b, c, d, beta, 0.0) -
                                  dpo_loss(a, b, c, d, beta)));
    }
    CHECK(worst < 1e-12);
}

TEST_CASE("inactive hinge reduces to the plain loss exactly") {
    Rng rng(32);
    for (int i = 0; i < 10000; ++i) {
        double lpw_r = 10.0 * rand_unit(rng) - 5.0;
        double lpw_t = lpw_r + 5.0 * rand_unit(rng); // theta never loses mass
        double lpl_t = 10.0 * rand_unit(rng) - 5.0;
        double lpl_r = 10.0 * rand_unit(rng) - 5.0;
        CHECK(dpop_loss(lpw_t, lpw_r, lpl_t, lpl_r, 0.3, 25.0) ==
              dpo_loss(lpw_t, lpw_r, lpl_t, lpl_r, 0.3));
    }
}

TEST_CASE("monotone in the chosen log-prob, positive, saturating") {
    double prev = std::numeric_limits<double>::infinity();
    for (double lpw = -3.0; lpw <= 3.0; lpw += 0.5) {
        double v = dpo_loss(lpw, 0.0, 0.0, 0.0, 0.5);
        CHECK(v > 0.0);
        CHECK(v < prev);
        prev = v;
    }
    CHECK(dpo_loss(100.0, 0.0, -100.0, 0.0, 1.0) < 1e-40);
    CHECK(dpo_loss(-100.0, 0.0, 100.0, 0.0, 1.0) > 100.0);
}

TEST_CASE("analytic partials match finite differences") {
    Rng rng(33);
    double h = 1e-6;
    for (int i = 0; i < 200; ++i) {
        double lpw_t = 8.0 * rand_unit(rng) - 4.0;
        double lpw_r = 8.0 * rand_unit(rng) - 4.0;
        double lpl_t = 8.0 * rand_unit(rng) - 4.0;
        double lpl_r = 8.0 * rand_unit(rng) - 4.0;
        if (std::abs(lpw_r - lpw_t) < 1e-3) continue; // keep clear of the kink
        double beta = 0.05 + rand_unit(rng);
        double lambda = i % 2 ? 10.0 * rand_unit(rng) : 0.0;
        DpopGrad g;
        dpop_loss_grad(lpw_t, lpw_r, lpl_t, lpl_r, beta, lambda, &g);
        double fd_w = (dpop_loss(lpw_t + h, lpw_r, lpl_t, lpl_r, beta, lambda) -
                       dpop_loss(lpw_t - h, lpw_r, lpl_t, lpl_r, beta, lambda)) /
                      (2 * h);
        double fd_l = (dpop_loss(lpw_t, lpw_r, lpl_t + h, lpl_r, beta, lambda) -
                       dpop_loss(lpw_t, lpw_r, lpl_t - h, lpl_r, beta, lambda)) /
                      (2 * h);
        CHECK(g.d_lp_w ==
              doctest::Approx(fd_w).epsilon(1e-6).scale(std::abs(fd_w) + 1e-9));
        CHECK(g.d_lp_l ==
              doctest::Approx(fd_l).epsilon(1e-6).scale(std::abs(fd_l) + 1e-9));
    }
}

TEST_CASE("the hinge boundary uses the inactive-side slope") {
    double beta = 0.1, lambda = 10.0;
    double lpl_t = -2.0, lpl_r = -1.0;
    DpopGrad g;
    dpop_loss_grad(-3.0, -3.0, lpl_t, lpl_r, beta, lambda, &g);
    double inner = beta * (0.0 - (lpl_t - lpl_r));
    double expect = -(1.0 / (1.0 + std::exp(inner))) * beta; // no (1+lambda) factor
    CHECK(g.d_lp_w == doctest::Approx(expect).epsilon(1e-15));
}

} // TEST_SUITE

TEST_SUITE("dpo.select") {

TEST_CASE("clean ladder takes the extremes") {
    auto scored = ladder20();
    auto filters = clean_filters(scored);
    SelectionPools pools = select_pools(scored, filters, 0.10);
    CHECK(ids_of(scored, pools.chosen) == std::set<std::string>{"g19", "g18"});
    CHECK(ids_of(scored, pools.rejected) == std::set<std::string>{"g00", "g01"});
    // order within the pools: best first / worst first
    CHECK(scored[pools.chosen[0]].id == "g19");
    CHECK(scored[pools.rejected[0]].id == "g00");
}

TEST_CASE("an ungrouped top piece is skipped and the next best promoted") {
    auto scored = ladder20();
    auto filters = clean_filters(scored);
    filters[19] = make_filter_report("g19", {false, true, false});
    SelectionPools pools = select_pools(scored, filters, 0.10);
    CHECK(ids_of(scored, pools.chosen) == std::set<std::string>{"g18", "g17"});
    CHECK(ids_of(scored, pools.rejected) == std::set<std::string>{"g00", "g01"});
}

TEST_CASE("syntax and plagiarism flags block both sides") {
    auto scored = ladder20();
    auto filters = clean_filters(scored);
    filters[0] = make_filter_report("g00", {true, false, false});
    filters[1] = make_filter_report("g01", {false, false, true});
    SelectionPools pools = select_pools(scored, filters, 0.10);
    CHECK(ids_of(scored, pools.rejected) == std::set<std::string>{"g02", "g03"});

    CHECK(make_filter_report("x", {false, true, false}).eligible_rejected);
    CHECK_FALSE(make_filter_report("x", {false, true, false}).eligible_chosen);
}

TEST_CASE("insufficient pools are rejected") {
    auto scored = ladder20();
    std::vector<FilterReport> filters;
    for (const auto& sp : scored)
        filters.push_back(make_filter_report(sp.id, {true, false, false}));
    CHECK_THROWS_AS(select_pools(scored, filters, 0.10), InsufficientEligible);

    // a single eligible piece fills the chosen pool and starves the rejected one
    filters[10] = make_filter_report("g10", {});
    CHECK_THROWS_AS(select_pools(scored, filters, 0.10), InsufficientEligible);

    CHECK_THROWS_AS(select_pools({}, {}, 0.10), InsufficientEligible);
}

TEST_CASE("equal scores leave no strict margin") {
    std::vector<ScoredPiece> scored;
    for (int i = 0; i < 20; ++i) scored.push_back(piece("g" + std::to_string(i), 0.5));
    CHECK_THROWS_AS(select_pools(scored, clean_filters(scored), 0.10),
                    InsufficientEligible);
}

TEST_CASE("mismatched filter lists are rejected") {
    auto scored = ladder20();
    auto filters = clean_filters(scored);
    filters.pop_back();
    CHECK_THROWS_AS(select_pools(scored, filters, 0.10), Error);
    filters = clean_filters(scored);
    std::swap(filters[0], filters[1]);
    CHECK_THROWS_AS(select_pools(scored, filters, 0.10), Error);
}

TEST_CASE("fuzzed pools match a brute-force oracle") {
    Rng rng(2025);
    for (int trial = 0; trial < 1000; ++trial) {
        std::size_t n = 1 + static_cast<std::size_t>(rand_index(rng, 40));
        std::vector<ScoredPiece> scored;
        std::vector<FilterReport> filters;
        for (std::size_t i = 0; i < n; ++i) {
            char id[16];
            std::snprintf(id, sizeof(id), "g%02u", static_cast<unsigned>(i));
            // coarse scores force occasional ties
            double s = std::floor(rand_unit(rng) * 50.0) / 50.0;
            scored.push_back({id, "", s});
            FilterFlags flags;
            flags.syntax_error = rand_unit(rng) < 0.2;
            flags.staves_ungrouped = rand_unit(rng) < 0.2;
            flags.plagiarized = rand_unit(rng) < 0.1;
            filters.push_back(make_filter_report(id, flags));
        }

        // oracle: explicit sort and scans
        std::vector<std::size_t> order(n);
        for (std::size_t i = 0; i < n; ++i) order[i] = i;
        std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
            if (scored[a].score != scored[b].score)
                return scored[a].score > scored[b].score;
            return scored[a].id < scored[b].id;
        });
        std::size_t m = static_cast<std::size_t>(
            std::ceil(0.10 * static_cast<double>(n) - 1e-9));
        std::vector<std::size_t> want_chosen, want_rejected;
        for (std::size_t idx : order)
            if (want_chosen.size() < m && filters[idx].eligible_chosen)
                want_chosen.push_back(idx);
        bool oracle_throws = want_chosen.empty();
        if (!oracle_throws) {
            double floor_score = scored[want_chosen.back()].score;
            for (std::size_t i = n; i > 0 && want_rejected.size() < m; --i) {
                std::size_t idx = order[i - 1];
                if (filters[idx].eligible_rejected && scored[idx].score < floor_score)
                    want_rejected.push_back(idx);
            }
            oracle_throws = want_rejected.empty();
        }

        if (oracle_throws) {
            CHECK_THROWS_AS(select_pools(scored, filters, 0.10), InsufficientEligible);
        } else {
            SelectionPools pools = select_pools(scored, filters, 0.10);
            CHECK(pools.chosen == want_chosen);
            CHECK(pools.rejected == want_rejected);
        }
    }
}

TEST_CASE("pair sampling draws from the pools deterministically") {
    auto scored = ladder20();
    auto filters = clean_filters(scored);
    DpoConfig cfg;
    prep::Prompt prompt{"Baroque", "Bach", "Keyboard"};

    Rng rng(7);
    auto pairs = select_pairs(prompt, scored, filters, cfg, rng);
    CHECK(pairs.size() == 4); // min(2*2, 4*2)
    std::set<std::string> chosen_ids{"g19", "g18"}, rejected_ids{"g00", "g01"};
    for (const auto& pr : pairs) {
        CHECK(chosen_ids.count(pr.chosen_id) == 1);
        CHECK(rejected_ids.count(pr.rejected_id) == 1);
        CHECK(pr.chosen == "body-" + pr.chosen_id);
        CHECK(pr.rejected == "body-" + pr.rejected_id);
        CHECK(pr.prompt == prompt);
    }

    Rng rng2(7);
    auto again = select_pairs(prompt, scored, filters, cfg, rng2);
    REQUIRE(again.size() == pairs.size());
    for (std::size_t i = 0; i < pairs.size(); ++i) {
        CHECK(again[i].chosen_id == pairs[i].chosen_id);
        CHECK(again[i].rejected_id == pairs[i].rejected_id);
    }
}

} // TEST_SUITE

TEST_SUITE("dpo.filters") {

static const char* kGood =
    "%%prompt Baroque|Bach|Keyboard\n"
    "X:1\n"
    "L:1/8\n"
    "M:2/4\n"
    "K:C\n"
    "[r:1/2][V:1]CDEF|\n"
    "[r:2/1][V:1]GABc|\n"
    "[r:3/0][V:1]cBAG|\n";

TEST_CASE("well-formed annotated sheets pass the syntax check") {
    CHECK(check_syntax(kGood));
    // plain sheet without annotations passes vacuously
    CHECK(check_syntax("X:1\nL:1/8\nM:2/4\nK:C\nCDEF|GABc|\n"));
}

TEST_CASE("broken sheets fail the syntax check") {
    CHECK_FALSE(check_syntax("total garbage"));
    CHECK_FALSE(check_syntax(""));
    // short interior bar
    CHECK_FALSE(check_syntax("X:1\nL:1/8\nM:2/4\nK:C\nCDEF|GAB|CDEF|\n"));
    // annotation index skip
    CHECK_FALSE(check_syntax("X:1\nL:1/8\nM:2/4\nK:C\n"
                             "[r:3/1][V:1]CDEF|\n"
                             "[r:5/0][V:1]GABc|\n"));
    // countdown never reaches zero
    CHECK_FALSE(check_syntax("X:1\nL:1/8\nM:2/4\nK:C\n"
                             "[r:1/2][V:1]CDEF|\n"
                             "[r:2/1][V:1]GABc|\n"));
}

TEST_CASE("stave grouping looks at contiguous instrument runs") {
    auto sheet_with_voices = [](const std::vector<std::string>& names) {
        std::string text = "X:1\nL:1/8\nM:2/4\n";
        for (std::size_t i = 0; i < names.size(); ++i) {
            text += "V:" + std::to_string(i + 1);
            if (!names[i].empty()) text += " name=\"" + names[i] + "\"";
            text += "\n";
        }
        text += "K:C\n";
        for (std::size_t i = 0; i < names.size(); ++i)
            text += "[V:" + std::to_string(i + 1) + "]C2D2|";
        text += "\n";
        return abc::parse_sheet(text);
    };
    CHECK(check_staves_grouped(sheet_with_voices({"Violin", "Violin", "Cello"})));
    CHECK_FALSE(check_staves_grouped(sheet_with_voices({"Violin", "Cello", "Violin"})));
    CHECK(check_staves_grouped(sheet_with_voices({"", "", ""})));
    CHECK(check_staves_grouped(sheet_with_voices({"Cello", "Violin", "Violin"})));
}

TEST_CASE("plagiarism containment against the ground-truth index") {
    // deterministic long bodies built from a fixed cycle of note letters
    auto long_body = [](int seed, int bars) {
        static const char* notes = "CDEFGABcdefgab";
        std::string body;
        Rng rng(static_cast<std::uint64_t>(seed));
        for (int b = 0; b < bars; ++b) {
            for (int i = 0; i < 4; ++i) {
                body += notes[rand_index(rng, 14)];
                body += '2';
            }
            body += '|';
            if (b % 4 == 3) body += '\n';
        }
        if (body.back() != '\n') body += '\n';
        return body;
    };
    const std::string header = "X:1\nL:1/8\nM:4/4\nK:C\n";
    const std::string gt1 = header + long_body(1, 24);
    const std::string gt2 = header + long_body(2, 24);
    PlagiarismIndex index({gt1, gt2});

    CHECK(check_plagiarism(gt1, index));
    CHECK(index.max_containment(gt1) == doctest::Approx(1.0));
    CHECK_FALSE(check_plagiarism(header + "z8|z8|z8|z8|\n", index));

    // a copied prefix plus a novel tail: containment stays under the bar
    const std::string body1 = long_body(1, 24);
    const std::string partial = header + body1.substr(0, 100) + long_body(9, 14);
    const double contained = index.max_containment(partial);
    CHECK(contained > 0.2);
    CHECK(contained < 0.8);
    CHECK_FALSE(check_plagiarism(partial, index));

    // string-based oracle for the same containment number
    {
        const std::string pb = long_body(1, 24).substr(0, 100) + long_body(9, 14);
        std::set<std::string> gt_grams;
        for (std::size_t i = 0; i + 50 <= body1.size(); ++i)
            gt_grams.insert(body1.substr(i, 50));
        std::size_t hits = 0, total = 0;
        for (std::size_t i = 0; i + 50 <= pb.size(); ++i, ++total)
            hits += gt_grams.count(pb.substr(i, 50));
        CHECK(contained ==
              doctest::Approx(static_cast<double>(hits) / static_cast<double>(total))
                  .epsilon(1e-12));
    }

    // mostly-copied piece crosses the threshold
    const std::string near_copy = header + body1.substr(0, body1.size() - 6) + "c2d2|\n";
    CHECK(check_plagiarism(near_copy, index));

    // a tighter threshold flips the partial copy
    PlagiarismIndex strict({gt1, gt2}, PlagiarismConfig{50, 0.25});
    CHECK(check_plagiarism(partial, strict));

    // short bodies fall back to exact comparison
    const std::string tiny = header + "CDEF|\n";
    PlagiarismIndex tiny_index({tiny});
    CHECK(check_plagiarism(tiny, tiny_index));
    CHECK_FALSE(check_plagiarism(header + "CDEG|\n", tiny_index));
}

} // TEST_SUITE

TEST_SUITE("dpo.gradflow") {

TEST_CASE("sequence gradient matches finite differences") {
    const std::string prompt = "%%prompt Baroque|Bach|Keyboard\n";
    const std::string piece =
        "X:1\nL:1/8\nM:2/4\nK:C\n[r:1/1][V:1]CDEF|\n[r:2/0][V:1]GABc|\n";

    model::ModelConfig cfg = model::ModelConfig::desk();
    cfg.hidden = 8;
    cfg.heads = 2;
    cfg.patch_layers = 1;
    cfg.char_layers = 1;
    for (int variant = 0; variant < 2; ++variant) {
        cfg.context_patches = variant == 0 ? 64 : 4; // second run forces windowing
        model::Policy policy = model::init_policy(cfg);
        const double scale = 0.7;
        std::vector<double> grad;
        model::sequence_log_prob_grad(policy, prompt, piece, {}, scale, grad);
        REQUIRE(grad.size() == policy.params.size());

        Rng rng(55);
        const double h = 1e-5;
        for (int probe = 0; probe < 25; ++probe) {
            std::size_t i = static_cast<std::size_t>(
                rand_index(rng, static_cast<int>(policy.params.size())));
            const double keep = policy.params[i];
            policy.params[i] = keep + h;
            const double up = model::sequence_log_prob(policy, prompt, piece);
            policy.params[i] = keep - h;
            const double dn = model::sequence_log_prob(policy, prompt, piece);
            policy.params[i] = keep;
            const double fd = scale * (up - dn) / (2 * h);
            CHECK(grad[i] == doctest::Approx(fd).epsilon(5e-4).scale(std::abs(fd) + 1e-7));
        }
    }
}

TEST_CASE("gradient accumulation sums scaled contributions") {
    const std::string prompt = "%%prompt Baroque|Bach|Keyboard\n";
    const std::string a = "X:1\nL:1/8\nM:2/4\nK:C\n[r:1/0][V:1]CDEF|\n";
    const std::string b = "X:1\nL:1/8\nM:2/4\nK:C\n[r:1/0][V:1]GABc|\n";
    model::ModelConfig cfg = model::ModelConfig::desk();
    cfg.hidden = 8;
    cfg.heads = 2;
    cfg.patch_layers = 1;
    cfg.char_layers = 1;
    model::Policy policy = model::init_policy(cfg);

    std::vector<double> ga, gb, combined;
    model::sequence_log_prob_grad(policy, prompt, a, {}, 0.3, ga);
    model::sequence_log_prob_grad(policy, prompt, b, {}, -1.1, gb);
    model::sequence_log_prob_grad(policy, prompt, a, {}, 0.3, combined);
    model::sequence_log_prob_grad(policy, prompt, b, {}, -1.1, combined);
    for (std::size_t i = 0; i < combined.size(); i += 97)
        CHECK(combined[i] == doctest::Approx(ga[i] + gb[i]).epsilon(1e-12));
}

TEST_CASE("adamw update rejects mismatched gradients") {
    model::ModelConfig cfg = model::ModelConfig::desk();
    cfg.hidden = 8;
    cfg.heads = 2;
    model::Policy policy = model::init_policy(cfg);
    model::AdamState state;
    std::vector<double> bad(3, 0.0);
    CHECK_THROWS_AS(model::adamw_update(policy, bad, state, {}), Error);
}

} // TEST_SUITE

TEST_SUITE("dpo.loop") {

static const char* kPieceA =
    "X:1\n"
    "L:1/8\n"
    "M:2/4\n"
    "K:C\n"
    "[r:1/2][V:1]CDEC|\n"
    "[r:2/1][V:1]EGEC|\n"
    "[r:3/0][V:1]GEDC|\n";

static const char* kPieceB =
    "X:1\n"
    "L:1/8\n"
    "M:2/4\n"
    "K:C\n"
    "[r:1/2][V:1]B,DFB|\n"
    "[r:2/1][V:1]FAFD|\n"
    "[r:3/0][V:1]AFED|\n";

struct TrainedFixture {
    model::Policy policy{model::ModelConfig::desk(), {}};
    prep::Prompt prompt{"Baroque", "Bach", "Keyboard"};
    double final_loss = 1e9;
};

const TrainedFixture& trained_fixture() {
    static const TrainedFixture fx = [] {
        TrainedFixture f;
        model::ModelConfig cfg = model::ModelConfig::desk();
        cfg.hidden = 32;
        cfg.heads = 4;
        cfg.context_patches = 32;
        cfg.seed = 11;
        f.policy = model::init_policy(cfg);
        const std::string pl = prep::prompt_line(f.prompt) + "\n";
        const std::vector<patching::PatchSequence> batch{
            patching::to_patches(patching::segment_units(pl + kPieceA)),
            patching::to_patches(patching::segment_units(pl + kPieceB))};
        model::AdamState state;
        model::OptimizerConfig oc;
        oc.lr = 2e-3;
        oc.weight_decay = 0.0;
        oc.warmup_steps = 10;
        for (int s = 0; s < 4000 && f.final_loss > 0.08; ++s)
            f.final_loss = model::train_step(f.policy, batch, state, oc);
        return f;
    }();
    return fx;
}

std::vector<evaluator::PromptProfile> fixture_profiles() {
    const TrainedFixture& fx = trained_fixture();
    evaluator::PromptProfile profile;
    profile.prompt = fx.prompt;
    profile.mean_feature = evaluator::extract_features(kPieceA);
    profile.ground_truth_count = 1;
    return {profile};
}

TEST_CASE("zero iterations return the policy unchanged") {
    model::ModelConfig cfg = model::ModelConfig::desk();
    cfg.hidden = 16;
    cfg.heads = 2;
    cfg.context_patches = 16;
    model::Policy policy = model::init_policy(cfg);

    evaluator::PromptProfile profile;
    profile.prompt = {"Baroque", "Bach", "Keyboard"};
    profile.mean_feature = evaluator::extract_features(kPieceA);

    DpoConfig dc;
    dc.iterations = 0;
    dc.generations_per_prompt = 3;
    dc.sampling.max_new_patches = 6;
    dc.threads = 2;
    ClampDpoResult res = clamp_dpo(policy, {profile}, {}, dc);
    CHECK(res.policy.params == policy.params);
    REQUIRE(res.reports.size() == 1);
    CHECK(res.reports[0].generated == 3);
    CHECK(res.reports[0].pairs == 0);

    // per-piece seeding makes the run reproducible across thread counts
    DpoConfig serial = dc;
    serial.threads = 1;
    ClampDpoResult again = clamp_dpo(policy, {profile}, {}, serial);
    CHECK(again.reports[0].acs == res.reports[0].acs);
    CHECK(again.reports[0].syntax_errors == res.reports[0].syntax_errors);
}

TEST_CASE("untrained policies skip every prompt but still report") {
    model::ModelConfig cfg = model::ModelConfig::desk();
    cfg.hidden = 16;
    cfg.heads = 2;
    cfg.context_patches = 16;
    model::Policy policy = model::init_policy(cfg);

    evaluator::PromptProfile profile;
    profile.prompt = {"Baroque", "Bach", "Keyboard"};
    profile.mean_feature = evaluator::extract_features(kPieceA);

    DpoConfig dc;
    dc.iterations = 2;
    dc.steps_per_iteration = 0;
    dc.generations_per_prompt = 3;
    dc.sampling.max_new_patches = 6;
    dc.threads = 2;
    const std::string dir =
        (std::filesystem::temp_directory_path() / "bs_dpo_artifacts").string();
    std::filesystem::remove_all(dir);
    dc.artifact_dir = dir;

    ClampDpoResult res = clamp_dpo(policy, {profile}, {kPieceA}, dc);
    REQUIRE(res.reports.size() == 3);
    CHECK(res.policy.params == policy.params);
    for (int k = 0; k < 2; ++k) {
        // a garbage pool yields no eligible pieces for this prompt
        CHECK(res.reports[k].skipped_prompts == 1);
        CHECK(res.reports[k].pairs == 0);
        CHECK_FALSE(res.reports[k].warnings.empty());
    }
    CHECK(res.reports[2].policy_index == 2);

    namespace fs = std::filesystem;
    CHECK(fs::exists(fs::path(dir) / "pool_0" / "scores.tsv"));
    CHECK(fs::exists(fs::path(dir) / "pool_0" / "pairs.tsv"));
    CHECK(fs::exists(fs::path(dir) / "pool_0" / "report.txt"));
    CHECK(fs::exists(fs::path(dir) / "pool_2" / "report.txt"));
    CHECK(fs::exists(fs::path(dir) / "policy_0.ckpt"));
    CHECK(fs::exists(fs::path(dir) / "policy_2.ckpt"));
    CHECK(fs::exists(fs::path(dir) / "pool_0" / "p00-g0000.abc"));
    std::filesystem::remove_all(dir);
}

TEST_CASE("preference optimization lowers the pair loss") {
    const TrainedFixture& fx = trained_fixture();
    REQUIRE(fx.final_loss <= 0.08);

    DpoConfig dc;
    dc.iterations = 1;
    dc.steps_per_iteration = 40;
    dc.generations_per_prompt = 16;
    dc.sampling.temperature = 0.9;
    dc.sampling.top_p = 0.95;
    dc.sampling.max_new_patches = 48;
    dc.opt.lr = 1e-3;
    dc.opt.warmup_steps = 5;
    dc.opt.weight_decay = 0.0;
    dc.threads = 4;
    dc.seed = 71;

    ClampDpoResult res = clamp_dpo(fx.policy, fixture_profiles(), {}, dc);
    REQUIRE(res.reports.size() == 2);
    const IterationReport& it = res.reports[0];
    REQUIRE(it.pairs > 0);
    CHECK(it.chosen_pool > 0);
    CHECK(it.rejected_pool > 0);
    CHECK(it.steps == 40);
    CHECK(it.mean_dpop_start == doctest::Approx(0.69314718055994529).epsilon(1e-9));
    CHECK(it.mean_dpop_end < it.mean_dpop_start * 0.999);
    CHECK(res.policy.params != fx.policy.params);

    const std::string text = format_iteration_report(it);
    CHECK(text.find("mean_dpop_start: ") != std::string::npos);
    CHECK(text.find("pairs: ") != std::string::npos);
}

TEST_CASE("a non-finite step rolls the policy back and stops") {
    const TrainedFixture& fx = trained_fixture();
    REQUIRE(fx.final_loss <= 0.08);

    DpoConfig dc;
    dc.iterations = 1;
    dc.steps_per_iteration = 5;
    dc.generations_per_prompt = 16;
    dc.sampling.temperature = 0.9;
    dc.sampling.top_p = 0.95;
    dc.sampling.max_new_patches = 48;
    dc.opt.lr = 1e200; // first update detonates the parameters
    dc.opt.warmup_steps = 1;
    dc.opt.weight_decay = 0.0;
    dc.threads = 4;
    dc.seed = 71;

    ClampDpoResult res = clamp_dpo(fx.policy, fixture_profiles(), {}, dc);
    REQUIRE(res.reports.size() == 1); // aborted before the final evaluation
    CHECK(res.policy.params == fx.policy.params);
    bool mentioned = false;
    for (const std::string& w : res.reports[0].warnings)
        mentioned = mentioned || w.find("rolled back") != std::string::npos;
    CHECK(mentioned);
}

TEST_CASE("config validation") {
    DpoConfig dc;
    dc.beta = 0.0;
    CHECK_THROWS_AS(dc.validate(), Error);
    dc = {};
    dc.select_fraction = 0.6;
    CHECK_THROWS_AS(dc.validate(), Error);
    dc = {};
    dc.generations_per_prompt = 0;
    CHECK_THROWS_AS(dc.validate(), Error);
    dc = {};
    CHECK_NOTHROW(dc.validate());
}

} // TEST_SUITE
