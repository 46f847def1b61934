#pragma once

// Hidden Token Attribution: the contribution of a source vector x_i to a
// target vector y is ||dy/dx_i||_F normalized by the sum over all sources.

#include <cmath>
#include <cstddef>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "attnscope/autodiff.hpp"
#include "attnscope/error.hpp"
#include "attnscope/model.hpp"
#include "attnscope/tensor.hpp"

namespace attnscope::attribution {

/// A row of a rank-2 node, or the whole of a rank-1 node (row 0).
struct VectorRef {
  ad::NodeId node = 0;
  std::size_t row = 0;

  friend bool operator==(const VectorRef&, const VectorRef&) = default;
};

enum class TargetKind { HeadOutput, HiddenEmbedding };
enum class SourceKind { Input, PreviousLayer };

inline const char* target_name(TargetKind t) {
  return t == TargetKind::HeadOutput ? "head-output" : "hidden-embedding";
}
inline const char* source_name(SourceKind s) {
  return s == SourceKind::Input ? "input" : "previous-layer";
}

struct Options {
  ad::Mode mode = ad::Mode::Reverse;
  std::size_t max_batch = 0;  // 0: as large as the memory budget allows
  /// Anchor input attribution at the normalized embeddings instead of E^0.
  bool e0_post_norm = false;
};

/// Row j holds c_{i,j} over sources i. Rows whose Jacobians all vanish are
/// marked undefined and left at zero.
struct ContributionMatrix {
  std::size_t layer = 0;
  std::optional<std::size_t> head;
  TargetKind target = TargetKind::HeadOutput;
  SourceKind source = SourceKind::Input;
  Tensor values;
  std::vector<bool> defined;

  std::size_t undefined_rows() const {
    std::size_t n = 0;
    for (bool d : defined) n += d ? 0 : 1;
    return n;
  }
};

namespace detail {

struct RowLayout {
  std::size_t rows;
  std::size_t width;
};

inline RowLayout layout(const ad::Graph& g, ad::NodeId node) {
  if (node >= g.size()) throw IndexError("unknown node " + std::to_string(node));
  const Tensor& v = g.value(node);
  if (v.rank() == 1) return {1, v.numel()};
  if (v.rank() == 2) return {v.dim(0), v.dim(1)};
  throw DimensionError("attribution vectors must come from rank-1 or rank-2 nodes, got " +
                       shape_string(v.shape()));
}

inline std::vector<std::size_t> row_indices(const RowLayout& lay, std::size_t row) {
  std::vector<std::size_t> idx(lay.width);
  for (std::size_t k = 0; k < lay.width; ++k) idx[k] = row * lay.width + k;
  return idx;
}

// Squared Frobenius norms of every (target row j, source row i) block of
// d target / d source, accumulated without materializing the Jacobian.
inline Tensor block_sq_norms(const ad::Graph& g, ad::NodeId target, ad::NodeId source,
                             const Options& opt) {
  const auto t = layout(g, target);
  const auto s = layout(g, source);
  const auto ty = ad::detail::iota_indices(t.rows * t.width);
  const auto sx = ad::detail::iota_indices(s.rows * s.width);
  Tensor sq({t.rows, s.rows});
  ad::JacobianOptions jo;
  jo.mode = opt.mode;
  jo.max_batch = opt.max_batch;
  ad::for_each_jacobian_block(g, target, ty, source, sx, jo,
                              [&](std::size_t r0, std::size_t c0, const Tensor& block) {
                                for (std::size_t r = 0; r < block.dim(0); ++r) {
                                  const std::size_t j = (r0 + r) / t.width;
                                  for (std::size_t c = 0; c < block.dim(1); ++c) {
                                    const double v = block.at(r, c);
                                    sq.at(j, (c0 + c) / s.width) += v * v;
                                  }
                                }
                              });
  return sq;
}

inline std::optional<std::vector<double>> normalize(std::span<const double> norms) {
  double total = 0.0;
  for (double n : norms) total += n;
  if (total == 0.0) return std::nullopt;
  std::vector<double> out(norms.size());
  for (std::size_t i = 0; i < norms.size(); ++i) out[i] = norms[i] / total;
  return out;
}

}  // namespace detail

/// Contribution of each source to `target`; nullopt when no source reaches it.
inline std::optional<std::vector<double>> contribution(const ad::Graph& g, VectorRef target,
                                                       std::span<const VectorRef> sources,
                                                       const Options& opt = {}) {
  const auto tl = detail::layout(g, target.node);
  if (target.row >= tl.rows) {
    throw IndexError("target row " + std::to_string(target.row) + " outside node of " +
                     std::to_string(tl.rows) + " rows");
  }
  for (std::size_t a = 0; a < sources.size(); ++a) {
    const auto sl = detail::layout(g, sources[a].node);
    if (sources[a].row >= sl.rows) {
      throw IndexError("source row " + std::to_string(sources[a].row) + " outside node of " +
                       std::to_string(sl.rows) + " rows");
    }
    for (std::size_t b = 0; b < a; ++b)
      if (sources[a] == sources[b]) throw InputError("duplicate attribution source");
  }
  if (sources.empty()) throw InputError("contribution needs at least one source");

  const auto ty = detail::row_indices(tl, target.row);
  std::vector<double> norms(sources.size(), 0.0);
  std::map<ad::NodeId, std::vector<std::size_t>> by_node;  // node -> source positions
  for (std::size_t a = 0; a < sources.size(); ++a) by_node[sources[a].node].push_back(a);

  ad::JacobianOptions jo;
  jo.mode = opt.mode;
  jo.max_batch = opt.max_batch;
  for (const auto& [node, members] : by_node) {
    const auto sl = detail::layout(g, node);
    std::vector<std::size_t> sx;
    std::vector<std::size_t> owner;  // column -> source position
    for (std::size_t a : members)
      for (std::size_t k = 0; k < sl.width; ++k) {
        sx.push_back(sources[a].row * sl.width + k);
        owner.push_back(a);
      }
    ad::for_each_jacobian_block(g, target.node, ty, node, sx, jo,
                                [&](std::size_t, std::size_t c0, const Tensor& block) {
                                  for (std::size_t r = 0; r < block.dim(0); ++r)
                                    for (std::size_t c = 0; c < block.dim(1); ++c) {
                                      const double v = block.at(r, c);
                                      norms[owner[c0 + c]] += v * v;
                                    }
                                });
  }
  for (double& n : norms) n = std::sqrt(n);
  return detail::normalize(norms);
}

/// Full matrix C(source row i, target row j) for two trace nodes.
inline ContributionMatrix contribution_matrix(const ad::Graph& g, ad::NodeId target,
                                              ad::NodeId source, const Options& opt = {}) {
  const Tensor sq = detail::block_sq_norms(g, target, source, opt);
  ContributionMatrix m;
  m.values = Tensor({sq.dim(0), sq.dim(1)});
  m.defined.assign(sq.dim(0), false);
  std::vector<double> norms(sq.dim(1));
  for (std::size_t j = 0; j < sq.dim(0); ++j) {
    for (std::size_t i = 0; i < sq.dim(1); ++i) norms[i] = std::sqrt(sq.at(j, i));
    if (auto row = detail::normalize(norms)) {
      std::copy(row->begin(), row->end(), m.values.row(j).begin());
      m.defined[j] = true;
    }
  }
  return m;
}

inline ad::NodeId input_source_node(const EncoderTrace& trace, const Options& opt) {
  return opt.e0_post_norm ? trace.e0_normed_node() : trace.e0_node();
}

/// C(e_i^{l-1}, o_{h,j}^l): head output against the head's own input rows.
inline ContributionMatrix previous_layer_contribution(const EncoderTrace& trace, std::size_t l,
                                                      std::size_t h, const Options& opt = {}) {
  auto m = contribution_matrix(trace.graph(), trace.head_output_node(l, h),
                               trace.layer_input_node(l), opt);
  m.layer = l;
  m.head = h;
  m.target = TargetKind::HeadOutput;
  m.source = SourceKind::PreviousLayer;
  return m;
}

/// C(e_i^0, o_{h,j}^l): head output against the model input.
inline ContributionMatrix input_contribution(const EncoderTrace& trace, std::size_t l,
                                             std::size_t h, const Options& opt = {}) {
  auto m = contribution_matrix(trace.graph(), trace.head_output_node(l, h),
                               input_source_node(trace, opt), opt);
  m.layer = l;
  m.head = h;
  m.target = TargetKind::HeadOutput;
  m.source = SourceKind::Input;
  return m;
}

/// C(e_i^0, e_j^l): layer output against the model input.
inline ContributionMatrix hidden_contribution(const EncoderTrace& trace, std::size_t l,
                                              const Options& opt = {}) {
  auto m = contribution_matrix(trace.graph(), trace.hidden_node(l),
                               input_source_node(trace, opt), opt);
  m.layer = l;
  m.target = TargetKind::HiddenEmbedding;
  m.source = SourceKind::Input;
  return m;
}

}  // namespace attnscope::attribution
