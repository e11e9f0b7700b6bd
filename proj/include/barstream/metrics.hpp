#pragma once

// Objective evaluation: average prompt-similarity score, label accuracy via
// linear probes on semantic features, bar alignment against the prevailing
// meter, and character perplexity under a policy.

#include <cstddef>
#include <string>
#include <vector>

#include "barstream/errors.hpp"
#include "barstream/evaluator.hpp"
#include "barstream/model.hpp"

namespace barstream::metrics {

BARSTREAM_DEFINE_ERROR(EmptyInput);
BARSTREAM_DEFINE_ERROR(DegenerateLabels);

// Arithmetic mean of similarity scores.
double acs(const std::vector<double>& scores);

// --- bar alignment ------------------------------------------------------------

struct BarAlignment {
    std::size_t misaligned = 0;
    std::size_t total = 0;

    double error() const {
        return total ? static_cast<double>(misaligned) / static_cast<double>(total) : 0.0;
    }
};

// Scans every voice fragment of every sheet. A fragment is misaligned when its
// summed duration differs from the prevailing meter's bar length (exact
// rational comparison). Exempt and counted as aligned: a first bar shorter
// than the meter (anacrusis) and any bar carrying an inline [M:] change (the
// new meter applies from the next bar). A sheet that fails to parse
// contributes all its bars as misaligned, estimated by a tolerant barline
// scan, at least one.
BarAlignment bar_alignment(const std::vector<std::string>& sheets);
double bar_alignment_error(const std::vector<std::string>& sheets);

// --- label probes -------------------------------------------------------------

struct LinearClassifier {
    std::size_t dim = 0;
    std::vector<std::string> labels;  // sorted class names
    std::vector<double> weights;      // [classes][dim]
    std::vector<double> bias;         // [classes]

    // argmax of the affine map; ties break toward the lowest class index
    std::size_t predict(const std::vector<double>& x) const;
};

struct ProbeOptions {
    double lr = 0.5;
    int max_epochs = 5000;
    double rel_tol = 1e-6;
    double test_fraction = 0.2;
    std::uint64_t seed = 9;
};

struct ProbeFit {
    LinearClassifier clf;
    double train_accuracy = 0;
    double test_accuracy = 0;
    std::size_t train_count = 0;
    std::size_t test_count = 0;
};

// Multinomial logistic regression, full-batch gradient descent from zero
// weights until the relative loss change drops below rel_tol. The 80/20
// split is stratified per class and seeded. DegenerateLabels unless there
// are >= 2 classes with >= 5 examples each.
ProbeFit train_label_classifier(const std::vector<evaluator::SemanticFeature>& features,
                                const std::vector<std::string>& labels,
                                const ProbeOptions& opts = {});

// Fraction of pieces whose predicted class matches the prompt label.
double label_accuracy(const LinearClassifier& clf,
                      const std::vector<evaluator::SemanticFeature>& features,
                      const std::vector<std::string>& labels);

// --- perplexity ---------------------------------------------------------------

// exp(mean per-character NLL) over the scored characters of every piece,
// windowing past the model context as needed.
double perplexity(const model::Policy& policy, const std::vector<std::string>& pieces);

// --- reporting ----------------------------------------------------------------

struct MetricReport {
    double acs = 0;
    double la_period = 0;
    double la_instrumentation = 0;
    double bae = 0;
    double ppl = 0;
    std::size_t pieces = 0;
    std::size_t bars = 0;
};

// key: value lines, one metric per line
std::string format_metric_report(const MetricReport& r);
MetricReport parse_metric_report(const std::string& text);
void save_metric_report(const std::string& path, const MetricReport& r);
MetricReport load_metric_report(const std::string& path);

// flat CSV for cross-run aggregation
std::string metric_report_csv_header();
std::string metric_report_csv_row(const std::string& tag, const MetricReport& r);

} // namespace barstream::metrics
