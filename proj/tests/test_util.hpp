#pragma once

#include <cstddef>
#include <vector>

// Pearson chi-square statistic against a uniform expectation.
inline double chi_square_uniform(const std::vector<std::size_t>& counts) {
    std::size_t total = 0;
    for (std::size_t c : counts) total += c;
    double expected = static_cast<double>(total) / static_cast<double>(counts.size());
    double stat = 0;
    for (std::size_t c : counts) {
        double d = static_cast<double>(c) - expected;
        stat += d * d / expected;
    }
    return stat;
}

// Chi-square statistic against arbitrary probabilities (must sum to 1).
inline double chi_square(const std::vector<std::size_t>& counts,
                         const std::vector<double>& probs) {
    std::size_t total = 0;
    for (std::size_t c : counts) total += c;
    double stat = 0;
    for (std::size_t i = 0; i < counts.size(); ++i) {
        double expected = static_cast<double>(total) * probs[i];
        double d = static_cast<double>(counts[i]) - expected;
        stat += d * d / expected;
    }
    return stat;
}
