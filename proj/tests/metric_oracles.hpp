#pragma once

// Independent reference computations used by the metric tests and the
// acceptance binary. Deliberately naive: plain loops, string-keyed n-grams.

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <map>
#include <random>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include "llavaseg/datakit.hpp"

namespace oracle {

using llavaseg::data::BinaryMask;

inline std::pair<BinaryMask, BinaryMask> random_mask_pair(std::mt19937_64& rng) {
  std::uniform_int_distribution<int> dim(1, 40);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  const int h = dim(rng), w = dim(rng);
  const double pa = u(rng), pb = u(rng);
  BinaryMask a(h, w), b(h, w);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      a(y, x) = u(rng) < pa ? 1 : 0;
      b(y, x) = u(rng) < pb ? 1 : 0;
    }
  }
  return {a, b};
}

inline std::pair<std::uint64_t, std::uint64_t> pixel_counts(const BinaryMask& a, const BinaryMask& b) {
  std::uint64_t inter = 0, uni = 0;
  for (int y = 0; y < a.rows(); ++y) {
    for (int x = 0; x < a.cols(); ++x) {
      const bool p = a(y, x) != 0, q = b(y, x) != 0;
      inter += (p && q) ? 1 : 0;
      uni += (p || q) ? 1 : 0;
    }
  }
  return {inter, uni};
}

inline std::vector<std::string> words(const std::string& s) {
  std::vector<std::string> out;
  std::string cur;
  for (char ch : s) {
    const auto c = static_cast<unsigned char>(ch);
    if (std::isspace(c)) {
      if (!cur.empty()) out.push_back(cur);
      cur.clear();
    } else if (std::isalnum(c)) {
      cur.push_back(static_cast<char>(std::tolower(c)));
    }
  }
  if (!cur.empty()) out.push_back(cur);
  return out;
}

// n-gram of order n as a space-joined key, counted with multiplicity.
inline std::map<std::string, int> grams(const std::vector<std::string>& w, int n) {
  std::map<std::string, int> out;
  for (int i = 0; i + n <= static_cast<int>(w.size()); ++i) {
    std::string key;
    for (int k = 0; k < n; ++k) key += (k ? " " : "") + w[i + k];
    out[key] += 1;
  }
  return out;
}

/// CIDEr-D per item, sigma 6, n = 1..4, IDF from the reference sets.
inline std::vector<double> cider_brute_force(const std::vector<std::string>& hyps,
                                             const std::vector<std::vector<std::string>>& refs) {
  const int items = static_cast<int>(hyps.size());
  std::vector<double> scores(items, 0.0);
  for (int i = 0; i < items; ++i) {
    const auto hw = words(hyps[i]);
    double sum_refs = 0.0;
    for (const auto& ref : refs[i]) {
      const auto rw = words(ref);
      const double dl = static_cast<double>(hw.size()) - static_cast<double>(rw.size());
      const double pen = std::exp(-dl * dl / 72.0);
      double sum_n = 0.0;
      for (int n = 1; n <= 4; ++n) {
        auto idf = [&](const std::string& g) {
          int df = 0;
          for (int j = 0; j < items; ++j) {
            bool found = false;
            for (const auto& r : refs[j]) found = found || grams(words(r), n).count(g) > 0;
            df += found ? 1 : 0;
          }
          return std::log(static_cast<double>(items)) - std::log(std::max(1.0, static_cast<double>(df)));
        };
        const auto hg = grams(hw, n), rg = grams(rw, n);
        std::map<std::string, double> hv, rv;
        for (const auto& [g, c] : hg) hv[g] = c * idf(g);
        for (const auto& [g, c] : rg) rv[g] = c * idf(g);
        double hn = 0.0, rn = 0.0, dot = 0.0;
        for (const auto& [g, v] : hv) hn += v * v;
        for (const auto& [g, v] : rv) rn += v * v;
        for (const auto& [g, v] : hv) {
          if (rv.count(g)) dot += std::min(v, rv[g]) * rv[g];
        }
        if (hn > 0.0 && rn > 0.0) dot /= std::sqrt(hn) * std::sqrt(rn);
        sum_n += dot * pen;
      }
      sum_refs += sum_n / 4.0 * 10.0;
    }
    scores[i] = sum_refs / static_cast<double>(refs[i].size());
  }
  return scores;
}

}  // namespace oracle
