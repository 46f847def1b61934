#pragma once

// Aggregate statistics over attention and contribution rows: correlation
// summaries per head, relative-position histograms and centers of mass.
// Every accumulator merges associatively so shards can be combined.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "attnscope/error.hpp"

namespace attnscope::analysis {

namespace detail {

inline void check_pair(std::span<const double> x, std::span<const double> y) {
  if (x.size() != y.size()) {
    throw InputError("correlation inputs differ in length: " + std::to_string(x.size()) +
                     " vs " + std::to_string(y.size()));
  }
  if (x.size() < 2) throw InputError("correlation needs at least 2 points");
}

inline bool constant(std::span<const double> v) {
  return std::all_of(v.begin(), v.end(), [&](double e) { return e == v.front(); });
}

}  // namespace detail

/// Sample Pearson r; nullopt when either input has zero variance.
inline std::optional<double> pearson(std::span<const double> x, std::span<const double> y) {
  detail::check_pair(x, y);
  if (detail::constant(x) || detail::constant(y)) return std::nullopt;
  const double n = static_cast<double>(x.size());
  const double mx = std::accumulate(x.begin(), x.end(), 0.0) / n;
  const double my = std::accumulate(y.begin(), y.end(), 0.0) / n;
  double sxy = 0.0, sxx = 0.0, syy = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double dx = x[i] - mx, dy = y[i] - my;
    sxy += dx * dy;
    sxx += dx * dx;
    syy += dy * dy;
  }
  if (sxx == 0.0 || syy == 0.0) return std::nullopt;
  return std::clamp(sxy / std::sqrt(sxx * syy), -1.0, 1.0);
}

/// 1-based ranks; tied values share the mean of the ranks they span.
inline std::vector<double> average_ranks(std::span<const double> v) {
  std::vector<std::size_t> order(v.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return v[a] < v[b]; });
  std::vector<double> ranks(v.size());
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i + 1;
    while (j < order.size() && v[order[j]] == v[order[i]]) ++j;
    const double r = 0.5 * static_cast<double>(i + 1 + j);  // mean of i+1..j
    for (std::size_t k = i; k < j; ++k) ranks[order[k]] = r;
    i = j;
  }
  return ranks;
}

/// Spearman rho as the Pearson r of average ranks.
inline std::optional<double> spearman(std::span<const double> x, std::span<const double> y) {
  detail::check_pair(x, y);
  const auto rx = average_ranks(x);
  const auto ry = average_ranks(y);
  return pearson(rx, ry);
}

struct HeadCorrelationSummary {
  std::size_t layer = 0;
  std::size_t head = 0;
  std::optional<double> mean_pearson;
  std::optional<double> mean_spearman;
  std::size_t n_pairs = 0;
  std::size_t n_skipped = 0;
};

enum class Averaging { PerToken, PerSequence };

/// Running sums of per-token correlations for one head. Degenerate pairs are
/// counted but excluded from the means.
class CorrelationAccumulator {
 public:
  /// Returns false when the pair was degenerate and skipped.
  bool add(std::span<const double> attention, std::span<const double> contribution) {
    const auto p = pearson(attention, contribution);
    const auto s = spearman(attention, contribution);
    if (!p || !s) {
      ++n_skipped_;
      return false;
    }
    sum_pearson_ += *p;
    sum_spearman_ += *s;
    ++n_pairs_;
    return true;
  }

  /// Counts a pair that has no usable contribution row.
  void skip() { ++n_skipped_; }

  /// Folds in all pairs of one sequence and records its mean for
  /// per-sequence averaging.
  void add_sequence(const CorrelationAccumulator& seq) {
    merge(seq);
    if (seq.n_pairs_ > 0) {
      seq_sum_pearson_ += seq.sum_pearson_ / static_cast<double>(seq.n_pairs_);
      seq_sum_spearman_ += seq.sum_spearman_ / static_cast<double>(seq.n_pairs_);
      ++n_sequences_;
    }
  }

  void merge(const CorrelationAccumulator& o) {
    sum_pearson_ += o.sum_pearson_;
    sum_spearman_ += o.sum_spearman_;
    n_pairs_ += o.n_pairs_;
    n_skipped_ += o.n_skipped_;
    seq_sum_pearson_ += o.seq_sum_pearson_;
    seq_sum_spearman_ += o.seq_sum_spearman_;
    n_sequences_ += o.n_sequences_;
  }

  std::size_t n_pairs() const noexcept { return n_pairs_; }
  std::size_t n_skipped() const noexcept { return n_skipped_; }

  HeadCorrelationSummary summary(std::size_t layer, std::size_t head,
                                 Averaging mode = Averaging::PerToken) const {
    HeadCorrelationSummary s{layer, head, std::nullopt, std::nullopt, n_pairs_, n_skipped_};
    if (mode == Averaging::PerToken && n_pairs_ > 0) {
      s.mean_pearson = sum_pearson_ / static_cast<double>(n_pairs_);
      s.mean_spearman = sum_spearman_ / static_cast<double>(n_pairs_);
    } else if (mode == Averaging::PerSequence && n_sequences_ > 0) {
      s.mean_pearson = seq_sum_pearson_ / static_cast<double>(n_sequences_);
      s.mean_spearman = seq_sum_spearman_ / static_cast<double>(n_sequences_);
    }
    return s;
  }

 private:
  double sum_pearson_ = 0.0;
  double sum_spearman_ = 0.0;
  std::size_t n_pairs_ = 0;
  std::size_t n_skipped_ = 0;
  double seq_sum_pearson_ = 0.0;
  double seq_sum_spearman_ = 0.0;
  std::size_t n_sequences_ = 0;
};

struct RowPair {
  std::span<const double> attention;
  std::span<const double> contribution;
};

inline HeadCorrelationSummary head_correlation_summary(std::span<const RowPair> pairs,
                                                       std::size_t layer, std::size_t head) {
  if (pairs.empty()) throw InputError("no attention/contribution pairs for head summary");
  CorrelationAccumulator acc;
  for (const auto& p : pairs) acc.add(p.attention, p.contribution);
  return acc.summary(layer, head);
}

/// Mass by offset from the attending token, for offsets -(L_max-1)..L_max-1.
class RelPosHistogram {
 public:
  explicit RelPosHistogram(std::size_t max_len)
      : max_len_(max_len), weight_(bins(max_len), 0.0), count_(bins(max_len), 0) {
    if (max_len == 0) throw InputError("histogram needs max_len >= 1");
  }

  std::size_t max_len() const noexcept { return max_len_; }
  int min_offset() const noexcept { return -static_cast<int>(max_len_) + 1; }
  int max_offset() const noexcept { return static_cast<int>(max_len_) - 1; }
  std::size_t size() const noexcept { return weight_.size(); }

  /// Row of the token at position p in a sequence of length row.size().
  void add_row(std::size_t p, std::span<const double> row) {
    const std::size_t len = row.size();
    if (len == 0 || len > max_len_) {
      throw InputError("row length " + std::to_string(len) + " outside 1.." +
                       std::to_string(max_len_));
    }
    if (p >= len) {
      throw InputError("attending position " + std::to_string(p) + " outside sequence of " +
                       std::to_string(len));
    }
    const std::size_t origin = max_len_ - 1 - p;  // bin of offset k - p at k = 0
    for (std::size_t k = 0; k < len; ++k) {
      weight_[origin + k] += row[k];
      count_[origin + k] += 1;
    }
  }

  void merge(const RelPosHistogram& o) {
    if (o.max_len_ != max_len_) throw InputError("cannot merge histograms of different max_len");
    for (std::size_t i = 0; i < weight_.size(); ++i) {
      weight_[i] += o.weight_[i];
      count_[i] += o.count_[i];
    }
  }

  double weight(int offset) const { return weight_.at(bin(offset)); }
  std::uint64_t count(int offset) const { return count_.at(bin(offset)); }

  /// weight / count, or 0 where the offset never occurred.
  double normalized(int offset) const {
    const std::size_t b = bin(offset);
    return count_.at(b) ? weight_[b] / static_cast<double>(count_[b]) : 0.0;
  }

  std::vector<double> normalized_values() const {
    std::vector<double> out(size());
    for (std::size_t b = 0; b < size(); ++b)
      out[b] = count_[b] ? weight_[b] / static_cast<double>(count_[b]) : 0.0;
    return out;
  }

  /// normalized / max(normalized); all zero when there is no mass.
  std::vector<double> display_values() const {
    auto out = normalized_values();
    const double mx = out.empty() ? 0.0 : *std::max_element(out.begin(), out.end());
    for (double& v : out) v = mx > 0.0 ? v / mx : 0.0;
    return out;
  }

  double total_weight() const { return std::accumulate(weight_.begin(), weight_.end(), 0.0); }
  std::uint64_t total_count() const {
    return std::accumulate(count_.begin(), count_.end(), std::uint64_t{0});
  }

 private:
  static std::size_t bins(std::size_t max_len) { return max_len ? 2 * max_len - 1 : 0; }

  std::size_t bin(int offset) const {
    if (offset < min_offset() || offset > max_offset()) {
      throw IndexError("offset " + std::to_string(offset) + " outside histogram range");
    }
    return static_cast<std::size_t>(offset - min_offset());
  }

  std::size_t max_len_;
  std::vector<double> weight_;
  std::vector<std::uint64_t> count_;
};

/// Mean offset of `values`, where values[b] sits at offset first_offset + b.
/// nullopt when the total mass is zero.
inline std::optional<double> center_of_mass(std::span<const double> values, int first_offset) {
  double mass = 0.0, moment = 0.0;
  for (std::size_t b = 0; b < values.size(); ++b) {
    mass += values[b];
    moment += static_cast<double>(first_offset + static_cast<int>(b)) * values[b];
  }
  if (mass == 0.0) return std::nullopt;
  return moment / mass;
}

/// Center of mass of the occurrence-normalized histogram.
inline std::optional<double> center_of_mass(const RelPosHistogram& h) {
  const auto v = h.normalized_values();
  return center_of_mass(v, h.min_offset());
}

/// Mean of the per-head centers of mass of one layer.
inline std::optional<double> layer_center_of_mass(std::span<const double> head_cms) {
  if (head_cms.empty()) return std::nullopt;
  return std::accumulate(head_cms.begin(), head_cms.end(), 0.0) /
         static_cast<double>(head_cms.size());
}

template <class T>
double median(std::vector<T> v) {
  if (v.empty()) throw InputError("median of empty set");
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  if (n % 2) return static_cast<double>(v[n / 2]);
  return 0.5 * (static_cast<double>(v[n / 2 - 1]) + static_cast<double>(v[n / 2]));
}

}  // namespace attnscope::analysis
