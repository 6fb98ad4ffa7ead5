#pragma once

#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include "llavaseg/datakit.hpp"

namespace llavaseg::metrics {

using data::BinaryMask;

// ---- masks ----------------------------------------------------------------

struct Overlap {
  std::uint64_t intersection = 0;
  std::uint64_t union_ = 0;
  double iou() const { return union_ == 0 ? 1.0 : static_cast<double>(intersection) / static_cast<double>(union_); }
};

/// Pixel counts of pred ∧ gt and pred ∨ gt; any non-zero value is foreground.
Overlap overlap(const BinaryMask& pred, const BinaryMask& gt);

/// Both masks empty counts as a perfect prediction (1.0).
double iou(const BinaryMask& pred, const BinaryMask& gt);

enum class EmptyPairs { count_as_one, skip };

/// Mean of per-pair IoU.
double giou(const std::vector<Overlap>& pairs, EmptyPairs policy = EmptyPairs::count_as_one);
/// Cumulative intersection over cumulative union.
double ciou(const std::vector<Overlap>& pairs);

// ---- text -----------------------------------------------------------------

/// Lowercase, punctuation stripped, whitespace split.
std::vector<std::string> tokenize(std::string_view text);

struct TextScore {
  double value = 0.0;
  bool degenerate = false;  // empty input or single-item corpus
};

inline constexpr double kRougeBeta = 1.2;

TextScore rouge_l(std::string_view hypothesis, std::string_view reference);
/// Multi-reference form: best precision and best recall over the references.
TextScore rouge_l(std::string_view hypothesis, const std::vector<std::string>& references);

struct CiderResult {
  double corpus = 0.0;
  std::vector<double> per_item;
  bool degenerate_idf = false;  // fewer than two items
};

inline constexpr double kCiderSigma = 6.0;

/// CIDEr-D over n = 1..4 with document frequencies taken from the reference
/// sets, count clipping, and a Gaussian length penalty.
CiderResult cider(const std::vector<std::string>& hypotheses, const std::vector<std::vector<std::string>>& references);

}  // namespace llavaseg::metrics
