#pragma once

// Deliberately naive reference implementations used to cross-check the
// library. They share no code with src/.

#include <cmath>
#include <cstddef>
#include <vector>

namespace oracle {

// Selection-sort ranking: repeatedly take the highest remaining score,
// lowest index first on ties.
inline std::vector<std::size_t> ranking(const std::vector<double>& scores) {
    std::vector<bool> taken(scores.size(), false);
    std::vector<std::size_t> order;
    for (std::size_t pos = 0; pos < scores.size(); ++pos) {
        std::size_t best = scores.size();
        for (std::size_t i = 0; i < scores.size(); ++i) {
            if (taken[i]) continue;
            if (best == scores.size() || scores[i] > scores[best]) best = i;
        }
        taken[best] = true;
        order.push_back(best);
    }
    return order;
}

inline double max_skew(const std::vector<double>& scores, const std::vector<int>& labels,
                       const std::vector<double>& desired, std::size_t k) {
    const auto order = ranking(scores);
    double best = -INFINITY;
    for (std::size_t a = 0; a < desired.size(); ++a) {
        double count = 0;
        for (std::size_t i = 0; i < k; ++i)
            if (labels[order[i]] == static_cast<int>(a)) count += 1;
        if (count == 0) continue;
        const double v = std::log((count / k) / desired[a]);
        if (v > best) best = v;
    }
    return best;
}

inline double ndkl(const std::vector<double>& scores, const std::vector<int>& labels,
                   const std::vector<double>& desired) {
    const auto order = ranking(scores);
    double num = 0, den = 0;
    for (std::size_t i = 1; i <= order.size(); ++i) {
        double kl = 0;
        for (std::size_t a = 0; a < desired.size(); ++a) {
            double count = 0;
            for (std::size_t j = 0; j < i; ++j)
                if (labels[order[j]] == static_cast<int>(a)) count += 1;
            const double p = count / static_cast<double>(i);
            if (p > 0) kl += p * (std::log(p) - std::log(desired[a]));
        }
        const double w = std::log(2.0) / std::log(static_cast<double>(i) + 1.0);
        num += w * kl;
        den += w;
    }
    return num / den;
}

}  // namespace oracle
