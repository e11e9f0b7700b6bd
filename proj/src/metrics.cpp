#include "barstream/metrics.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <sstream>

#include "barstream/abc.hpp"
#include "barstream/preprocess.hpp"
#include "barstream/rng.hpp"

namespace barstream::metrics {

namespace {

std::string fmt_double(double v) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

} // namespace

double acs(const std::vector<double>& scores) {
    if (scores.empty()) throw EmptyInput("acs over an empty score list");
    double sum = 0.0;
    for (double s : scores) sum += s;
    return sum / static_cast<double>(scores.size());
}

// --- bar alignment ------------------------------------------------------------

namespace {

// Bar estimate for text that failed to parse: barline-bearing slices of the
// non-field lines, at least one.
std::size_t fallback_bar_count(const std::string& text) {
    std::size_t n = 0;
    std::istringstream in(text);
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty() || line[0] == '%') continue;
        if (line.size() >= 2 && line[1] == ':' &&
            std::isalpha(static_cast<unsigned char>(line[0])))
            continue;
        try {
            for (const std::string& slice : abc::split_line_into_bars(line))
                if (slice.find('|') != std::string::npos) ++n;
        } catch (const Error&) {
            // unclosed group; a raw barline count still bounds the damage
            const std::size_t bars =
                static_cast<std::size_t>(std::count(line.begin(), line.end(), '|'));
            n += bars ? bars : 1;
        }
    }
    return n ? n : 1;
}

} // namespace

BarAlignment bar_alignment(const std::vector<std::string>& sheets) {
    BarAlignment out;
    for (const std::string& raw : sheets) {
        const std::string text = prep::strip_bar_annotations(prep::strip_prompt(raw));
        abc::Sheet sheet;
        try {
            sheet = abc::parse_sheet(text);
        } catch (const Error&) {
            const std::size_t bars = fallback_bar_count(text);
            out.total += bars;
            out.misaligned += bars;
            continue;
        }
        const Rational unit = sheet.header.unit_note_length();
        for (const auto& voice : sheet.body) {
            abc::Meter meter = sheet.header.meter;
            bool first = true;
            for (const abc::Bar& bar : voice) {
                bool exempt = meter.kind == abc::Meter::Kind::None;
                for (const abc::Token& t : bar.tokens) {
                    if (t.kind == abc::TokenKind::InlineField && t.field_letter == 'M') {
                        meter = abc::parse_meter(t.field_value);
                        exempt = true;
                    }
                }
                const Duration dur = abc::bar_duration(bar, unit);
                if (first && dur < meter.value() && !exempt) exempt = true;
                ++out.total;
                if (!exempt && dur != meter.value()) ++out.misaligned;
                first = false;
            }
        }
    }
    return out;
}

double bar_alignment_error(const std::vector<std::string>& sheets) {
    return bar_alignment(sheets).error();
}

// --- label probes -------------------------------------------------------------

std::size_t LinearClassifier::predict(const std::vector<double>& x) const {
    if (x.size() != dim)
        throw evaluator::DimensionMismatch("classifier input has dim " +
                                           std::to_string(x.size()) + ", expected " +
                                           std::to_string(dim));
    std::size_t best = 0;
    double best_v = -std::numeric_limits<double>::infinity();
    for (std::size_t c = 0; c < labels.size(); ++c) {
        double v = bias[c];
        const double* w = weights.data() + c * dim;
        for (std::size_t j = 0; j < dim; ++j) v += w[j] * x[j];
        if (v > best_v) {
            best_v = v;
            best = c;
        }
    }
    return best;
}

namespace {

struct ProbeData {
    std::size_t dim = 0;
    std::vector<std::string> classes;       // sorted
    std::vector<std::size_t> y;             // class index per example
    std::vector<std::size_t> train_idx;
    std::vector<std::size_t> test_idx;
};

ProbeData split_probe_data(const std::vector<evaluator::SemanticFeature>& features,
                           const std::vector<std::string>& labels,
                           const ProbeOptions& opts) {
    if (features.size() != labels.size())
        throw evaluator::DimensionMismatch("feature/label count mismatch");
    if (features.empty()) throw EmptyInput("probe training set is empty");

    ProbeData d;
    d.dim = features[0].values.size();
    for (const auto& f : features)
        if (f.values.size() != d.dim)
            throw evaluator::DimensionMismatch("inconsistent feature dimensions");

    d.classes = labels;
    std::sort(d.classes.begin(), d.classes.end());
    d.classes.erase(std::unique(d.classes.begin(), d.classes.end()), d.classes.end());
    if (d.classes.size() < 2)
        throw DegenerateLabels("probe needs at least two classes");

    d.y.resize(labels.size());
    std::vector<std::vector<std::size_t>> by_class(d.classes.size());
    for (std::size_t i = 0; i < labels.size(); ++i) {
        const auto it = std::lower_bound(d.classes.begin(), d.classes.end(), labels[i]);
        d.y[i] = static_cast<std::size_t>(it - d.classes.begin());
        by_class[d.y[i]].push_back(i);
    }
    for (std::size_t c = 0; c < by_class.size(); ++c)
        if (by_class[c].size() < 5)
            throw DegenerateLabels("class '" + d.classes[c] + "' has " +
                                   std::to_string(by_class[c].size()) +
                                   " examples, need 5");

    for (std::size_t c = 0; c < by_class.size(); ++c) {
        auto& idx = by_class[c];
        Rng rng(mix_seed(opts.seed, {static_cast<std::uint64_t>(c)}));
        std::shuffle(idx.begin(), idx.end(), rng);
        std::size_t test_n = static_cast<std::size_t>(
            static_cast<double>(idx.size()) * opts.test_fraction);
        test_n = std::max<std::size_t>(1, std::min(test_n, idx.size() - 1));
        d.test_idx.insert(d.test_idx.end(), idx.begin(), idx.begin() + test_n);
        d.train_idx.insert(d.train_idx.end(), idx.begin() + test_n, idx.end());
    }
    std::sort(d.train_idx.begin(), d.train_idx.end());
    std::sort(d.test_idx.begin(), d.test_idx.end());
    return d;
}

double accuracy_on(const LinearClassifier& clf,
                   const std::vector<evaluator::SemanticFeature>& features,
                   const std::vector<std::size_t>& y,
                   const std::vector<std::size_t>& idx) {
    if (idx.empty()) return 0.0;
    std::size_t hits = 0;
    for (std::size_t i : idx)
        if (clf.predict(features[i].values) == y[i]) ++hits;
    return static_cast<double>(hits) / static_cast<double>(idx.size());
}

} // namespace

ProbeFit train_label_classifier(const std::vector<evaluator::SemanticFeature>& features,
                                const std::vector<std::string>& labels,
                                const ProbeOptions& opts) {
    const ProbeData d = split_probe_data(features, labels, opts);
    const std::size_t C = d.classes.size();
    const std::size_t D = d.dim;
    const std::size_t N = d.train_idx.size();

    ProbeFit fit;
    fit.clf.dim = D;
    fit.clf.labels = d.classes;
    fit.clf.weights.assign(C * D, 0.0);
    fit.clf.bias.assign(C, 0.0);

    std::vector<double> logits(C), probs(C), dw(C * D), db(C);
    double prev_loss = std::numeric_limits<double>::infinity();
    for (int epoch = 0; epoch < opts.max_epochs; ++epoch) {
        std::fill(dw.begin(), dw.end(), 0.0);
        std::fill(db.begin(), db.end(), 0.0);
        double loss = 0.0;
        for (std::size_t i : d.train_idx) {
            const double* x = features[i].values.data();
            double mx = -std::numeric_limits<double>::infinity();
            for (std::size_t c = 0; c < C; ++c) {
                double v = fit.clf.bias[c];
                const double* w = fit.clf.weights.data() + c * D;
                for (std::size_t j = 0; j < D; ++j) v += w[j] * x[j];
                logits[c] = v;
                mx = std::max(mx, v);
            }
            double z = 0.0;
            for (std::size_t c = 0; c < C; ++c) {
                probs[c] = std::exp(logits[c] - mx);
                z += probs[c];
            }
            loss += std::log(z) + mx - logits[d.y[i]];
            for (std::size_t c = 0; c < C; ++c) {
                double g = probs[c] / z - (c == d.y[i] ? 1.0 : 0.0);
                g /= static_cast<double>(N);
                db[c] += g;
                double* gw = dw.data() + c * D;
                for (std::size_t j = 0; j < D; ++j) gw[j] += g * x[j];
            }
        }
        loss /= static_cast<double>(N);
        for (std::size_t k = 0; k < C * D; ++k) fit.clf.weights[k] -= opts.lr * dw[k];
        for (std::size_t c = 0; c < C; ++c) fit.clf.bias[c] -= opts.lr * db[c];
        if (std::abs(prev_loss - loss) <= opts.rel_tol * std::max(prev_loss, 1e-12)) break;
        prev_loss = loss;
    }

    fit.train_count = N;
    fit.test_count = d.test_idx.size();
    fit.train_accuracy = accuracy_on(fit.clf, features, d.y, d.train_idx);
    fit.test_accuracy = accuracy_on(fit.clf, features, d.y, d.test_idx);
    return fit;
}

double label_accuracy(const LinearClassifier& clf,
                      const std::vector<evaluator::SemanticFeature>& features,
                      const std::vector<std::string>& labels) {
    if (features.size() != labels.size())
        throw evaluator::DimensionMismatch("feature/label count mismatch");
    if (features.empty()) throw EmptyInput("label accuracy over an empty set");
    std::size_t hits = 0;
    for (std::size_t i = 0; i < features.size(); ++i)
        if (clf.labels[clf.predict(features[i].values)] == labels[i]) ++hits;
    return static_cast<double>(hits) / static_cast<double>(features.size());
}

// --- perplexity ---------------------------------------------------------------

double perplexity(const model::Policy& policy, const std::vector<std::string>& pieces) {
    if (pieces.empty()) throw EmptyInput("perplexity over an empty corpus");
    double total_lp = 0.0;
    std::size_t total_chars = 0;
    for (const std::string& text : pieces) {
        total_lp += model::sequence_log_prob(policy, "", text);
        total_chars += model::scored_char_count(policy, "", text);
    }
    if (total_chars == 0) throw EmptyInput("perplexity corpus has no scored characters");
    return std::exp(-total_lp / static_cast<double>(total_chars));
}

// --- reporting ----------------------------------------------------------------

std::string format_metric_report(const MetricReport& r) {
    std::string out;
    out += "acs: " + fmt_double(r.acs) + "\n";
    out += "la_period: " + fmt_double(r.la_period) + "\n";
    out += "la_instrumentation: " + fmt_double(r.la_instrumentation) + "\n";
    out += "bae: " + fmt_double(r.bae) + "\n";
    out += "ppl: " + fmt_double(r.ppl) + "\n";
    out += "pieces: " + std::to_string(r.pieces) + "\n";
    out += "bars: " + std::to_string(r.bars) + "\n";
    return out;
}

MetricReport parse_metric_report(const std::string& text) {
    MetricReport r;
    std::istringstream in(text);
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        const std::size_t colon = line.find(": ");
        if (colon == std::string::npos)
            throw Error("bad metric report line: " + line);
        const std::string key = line.substr(0, colon);
        const std::string val = line.substr(colon + 2);
        try {
            if (key == "acs") r.acs = std::stod(val);
            else if (key == "la_period") r.la_period = std::stod(val);
            else if (key == "la_instrumentation") r.la_instrumentation = std::stod(val);
            else if (key == "bae") r.bae = std::stod(val);
            else if (key == "ppl") r.ppl = std::stod(val);
            else if (key == "pieces") r.pieces = std::stoull(val);
            else if (key == "bars") r.bars = std::stoull(val);
        } catch (const std::exception&) {
            throw Error("bad metric report value for " + key + ": " + val);
        }
    }
    return r;
}

void save_metric_report(const std::string& path, const MetricReport& r) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw Error("cannot write " + path);
    out << format_metric_report(r);
    if (!out) throw Error("short write to " + path);
}

MetricReport load_metric_report(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error("cannot read " + path);
    std::ostringstream buf;
    buf << in.rdbuf();
    return parse_metric_report(buf.str());
}

std::string metric_report_csv_header() {
    return "tag,acs,la_period,la_instrumentation,bae,ppl,pieces,bars\n";
}

std::string metric_report_csv_row(const std::string& tag, const MetricReport& r) {
    std::string out = tag;
    out += ',';
    out += fmt_double(r.acs) + ',' + fmt_double(r.la_period) + ',' +
           fmt_double(r.la_instrumentation) + ',' + fmt_double(r.bae) + ',' +
           fmt_double(r.ppl) + ',' + std::to_string(r.pieces) + ',' +
           std::to_string(r.bars);
    out += '\n';
    return out;
}

} // namespace barstream::metrics
