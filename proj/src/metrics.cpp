#include "llavaseg/metrics.hpp"

#include <algorithm>
#include <array>
#include <cctype>
#include <cmath>
#include <map>
#include <set>

namespace llavaseg::metrics {

Overlap overlap(const BinaryMask& pred, const BinaryMask& gt) {
  if (pred.rows() != gt.rows() || pred.cols() != gt.cols()) {
    throw ShapeError("mask shapes differ: " + std::to_string(pred.rows()) + "x" + std::to_string(pred.cols()) +
                     " vs " + std::to_string(gt.rows()) + "x" + std::to_string(gt.cols()));
  }
  Overlap o;
  for (Eigen::Index i = 0; i < pred.size(); ++i) {
    const bool p = pred.data()[i] != 0, g = gt.data()[i] != 0;
    o.intersection += static_cast<std::uint64_t>(p && g);
    o.union_ += static_cast<std::uint64_t>(p || g);
  }
  return o;
}

double iou(const BinaryMask& pred, const BinaryMask& gt) { return overlap(pred, gt).iou(); }

double giou(const std::vector<Overlap>& pairs, EmptyPairs policy) {
  double sum = 0.0;
  std::size_t n = 0;
  for (const auto& o : pairs) {
    if (o.union_ == 0 && policy == EmptyPairs::skip) continue;
    sum += o.iou();
    ++n;
  }
  if (n == 0) throw InvalidInput("gIoU of an empty batch is undefined");
  return sum / static_cast<double>(n);
}

double ciou(const std::vector<Overlap>& pairs) {
  if (pairs.empty()) throw InvalidInput("cIoU of an empty batch is undefined");
  std::uint64_t i = 0, u = 0;
  for (const auto& o : pairs) {
    i += o.intersection;
    u += o.union_;
  }
  return u == 0 ? 1.0 : static_cast<double>(i) / static_cast<double>(u);
}

std::vector<std::string> tokenize(std::string_view text) {
  std::vector<std::string> out;
  std::string cur;
  for (unsigned char c : text) {
    if (std::isspace(c)) {
      if (!cur.empty()) out.push_back(std::move(cur));
      cur.clear();
    } else if (!std::ispunct(c)) {
      cur.push_back(static_cast<char>(std::tolower(c)));
    }
  }
  if (!cur.empty()) out.push_back(std::move(cur));
  return out;
}

namespace {

std::size_t lcs_length(const std::vector<std::string>& a, const std::vector<std::string>& b) {
  std::vector<std::size_t> prev(b.size() + 1, 0), cur(b.size() + 1, 0);
  for (std::size_t i = 1; i <= a.size(); ++i) {
    for (std::size_t j = 1; j <= b.size(); ++j) {
      cur[j] = a[i - 1] == b[j - 1] ? prev[j - 1] + 1 : std::max(prev[j], cur[j - 1]);
    }
    std::swap(prev, cur);
  }
  return prev[b.size()];
}

double f_beta(double precision, double recall) {
  if (precision <= 0.0 || recall <= 0.0) return 0.0;
  const double b2 = kRougeBeta * kRougeBeta;
  return (1.0 + b2) * recall * precision / (recall + b2 * precision);
}

}  // namespace

TextScore rouge_l(std::string_view hypothesis, std::string_view reference) {
  return rouge_l(hypothesis, std::vector<std::string>{std::string(reference)});
}

TextScore rouge_l(std::string_view hypothesis, const std::vector<std::string>& references) {
  const auto hyp = tokenize(hypothesis);
  if (hyp.empty() || references.empty()) return {0.0, true};
  double best_p = 0.0, best_r = 0.0;
  bool degenerate = false;
  for (const auto& r : references) {
    const auto ref = tokenize(r);
    if (ref.empty()) {
      degenerate = true;
      continue;
    }
    const auto l = static_cast<double>(lcs_length(hyp, ref));
    best_p = std::max(best_p, l / static_cast<double>(hyp.size()));
    best_r = std::max(best_r, l / static_cast<double>(ref.size()));
  }
  return {f_beta(best_p, best_r), degenerate};
}

namespace {

constexpr int kMaxN = 4;
using Ngram = std::vector<std::string>;
using Counts = std::map<Ngram, double>;

Counts count_ngrams(const std::vector<std::string>& words) {
  Counts c;
  for (int n = 1; n <= kMaxN; ++n) {
    for (std::size_t i = 0; i + static_cast<std::size_t>(n) <= words.size(); ++i) {
      c[Ngram(words.begin() + static_cast<std::ptrdiff_t>(i), words.begin() + static_cast<std::ptrdiff_t>(i) + n)] +=
          1.0;
    }
  }
  return c;
}

struct TfIdf {
  std::array<std::map<Ngram, double>, kMaxN> vec;
  std::array<double, kMaxN> norm{};
  double length = 0.0;
};

TfIdf to_vector(const Counts& counts, const std::map<Ngram, double>& df, double log_items, double length) {
  TfIdf v;
  v.length = length;
  for (const auto& [gram, tf] : counts) {
    const auto it = df.find(gram);
    const double d = std::log(std::max(1.0, it == df.end() ? 0.0 : it->second));
    const std::size_t n = gram.size() - 1;
    const double w = tf * (log_items - d);
    v.vec[n][gram] = w;
    v.norm[n] += w * w;
  }
  for (auto& x : v.norm) x = std::sqrt(x);
  return v;
}

double similarity(const TfIdf& hyp, const TfIdf& ref) {
  const double delta = hyp.length - ref.length;
  const double penalty = std::exp(-(delta * delta) / (2.0 * kCiderSigma * kCiderSigma));
  double total = 0.0;
  for (int n = 0; n < kMaxN; ++n) {
    double dot = 0.0;
    for (const auto& [gram, w] : hyp.vec[n]) {
      const auto it = ref.vec[n].find(gram);
      if (it != ref.vec[n].end()) dot += std::min(w, it->second) * it->second;
    }
    if (hyp.norm[n] != 0.0 && ref.norm[n] != 0.0) dot /= hyp.norm[n] * ref.norm[n];
    total += dot * penalty;
  }
  return total;
}

}  // namespace

CiderResult cider(const std::vector<std::string>& hypotheses, const std::vector<std::vector<std::string>>& references) {
  if (hypotheses.empty()) throw InvalidInput("CIDEr of an empty corpus is undefined");
  if (hypotheses.size() != references.size()) throw InvalidInput("one reference set per hypothesis is required");

  // Document frequency: number of items whose reference set contains the n-gram.
  std::vector<std::vector<std::pair<Counts, double>>> refs(references.size());
  std::map<Ngram, double> df;
  for (std::size_t i = 0; i < references.size(); ++i) {
    std::set<Ngram> seen;
    for (const auto& r : references[i]) {
      const auto words = tokenize(r);
      Counts c = count_ngrams(words);
      for (const auto& [g, _] : c) seen.insert(g);
      refs[i].emplace_back(std::move(c), static_cast<double>(words.size()));
    }
    for (const auto& g : seen) df[g] += 1.0;
  }
  const double log_items = std::log(static_cast<double>(hypotheses.size()));

  CiderResult out;
  out.degenerate_idf = hypotheses.size() < 2;
  for (std::size_t i = 0; i < hypotheses.size(); ++i) {
    const auto words = tokenize(hypotheses[i]);
    const TfIdf h = to_vector(count_ngrams(words), df, log_items, static_cast<double>(words.size()));
    double score = 0.0;
    for (const auto& [counts, len] : refs[i]) score += similarity(h, to_vector(counts, df, log_items, len));
    if (!refs[i].empty()) score /= static_cast<double>(refs[i].size());
    score = score / kMaxN * 10.0;
    out.per_item.push_back(score);
    out.corpus += score;
  }
  out.corpus /= static_cast<double>(hypotheses.size());
  return out;
}

}  // namespace llavaseg::metrics
