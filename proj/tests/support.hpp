#pragma once

// Shared fixtures for the test suites: toy configurations, random tensors and
// finite-difference oracles that never touch the autodiff sweeps.

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>
#include <vector>

#include "attnscope/attnscope.hpp"

namespace attnscope::testing {

inline EncoderConfig toy_config(std::size_t n_layers = 2, std::size_t n_heads = 2,
                                std::size_t d_e = 8, std::size_t d_head = 4,
                                std::size_t d_ff = 16) {
  EncoderConfig c;
  c.n_layers = n_layers;
  c.n_heads = n_heads;
  c.d_e = d_e;
  c.d_q = d_head;
  c.d_v = d_head;
  c.d_ff = d_ff;
  c.vocab_size = 20;
  c.max_position = 16;
  c.type_vocab_size = 2;
  return c;
}

inline Tensor random_tensor(Shape shape, std::mt19937_64& rng, double stddev = 1.0) {
  std::normal_distribution<double> n(0.0, stddev);
  Tensor t(std::move(shape));
  for (auto& v : t.data()) v = n(rng);
  return t;
}

inline TokenizedSequence random_sequence(const EncoderConfig& c, std::size_t len,
                                         std::mt19937_64& rng, std::string id = "s") {
  std::uniform_int_distribution<std::size_t> tok(0, c.vocab_size - 1);
  TokenizedSequence s;
  s.id = std::move(id);
  for (std::size_t i = 0; i < len; ++i) {
    s.token_ids.push_back(tok(rng));
    s.segment_ids.push_back(i < len / 2 ? 0 : 1);
  }
  return s;
}

/// Replaces one named tensor of a weight set.
inline ModelWeights with_tensor(const ModelWeights& w, const std::string& name, Tensor t) {
  auto m = w.to_tensors();
  m.at(name) = std::move(t);
  return ModelWeights::from_tensors(std::move(m), w.config());
}

/// Encoder graph rooted at a free E^0 leaf, so E^0 can be perturbed directly.
struct FreeEncoder {
  ad::Graph g;
  ad::NodeId e0 = 0;
  ad::NodeId e0_normed = 0;
  std::vector<detail::LayerNodes> layers;
};

inline FreeEncoder build_from_e0(const Tensor& e0, const ModelWeights& w) {
  FreeEncoder f;
  const auto& c = w.config();
  f.e0 = f.g.leaf(e0);
  f.e0_normed = f.g.layer_norm(f.e0, f.g.leaf(w.get("embeddings.ln.gamma")),
                               f.g.leaf(w.get("embeddings.ln.beta")), c.ln_eps);
  ad::NodeId x = f.e0_normed;
  for (std::size_t l = 0; l < c.n_layers; ++l) {
    f.layers.push_back(detail::record_layer(f.g, x, w.layer(l), c));
    x = f.layers.back().output;
  }
  return f;
}

/// Central-difference Jacobian of f: R^q -> R^p at x, as p x q.
inline Tensor fd_jacobian(const std::function<std::vector<double>(const std::vector<double>&)>& f,
                          std::vector<double> x, double step = 1e-5) {
  const std::size_t q = x.size();
  std::size_t p = 0;
  std::vector<std::vector<double>> cols(q);
  for (std::size_t i = 0; i < q; ++i) {
    const double x0 = x[i];
    x[i] = x0 + step;
    const auto fp = f(x);
    x[i] = x0 - step;
    const auto fm = f(x);
    x[i] = x0;
    p = fp.size();
    cols[i].resize(p);
    for (std::size_t r = 0; r < p; ++r) cols[i][r] = (fp[r] - fm[r]) / (2.0 * step);
  }
  Tensor j({p, q});
  for (std::size_t i = 0; i < q; ++i)
    for (std::size_t r = 0; r < p; ++r) j.at(r, i) = cols[i][r];
  return j;
}

/// max |a - b| / max(max |b|, floor): error relative to the Jacobian scale.
inline double max_rel_error(const Tensor& a, const Tensor& b, double floor = 1e-12) {
  double diff = 0.0, scale = floor;
  for (std::size_t i = 0; i < a.numel(); ++i) {
    diff = std::max(diff, std::abs(a[i] - b[i]));
    scale = std::max(scale, std::abs(b[i]));
  }
  return diff / scale;
}

inline double max_abs_diff(const Tensor& a, const Tensor& b) {
  double d = 0.0;
  for (std::size_t i = 0; i < a.numel(); ++i) d = std::max(d, std::abs(a[i] - b[i]));
  return d;
}

/// Contribution matrix (row j = target row, column i = source row) from a
/// dense Jacobian of the flattened target with respect to the flattened source.
inline std::vector<std::vector<double>> contributions_from_jacobian(const Tensor& jac,
                                                                    std::size_t target_rows,
                                                                    std::size_t source_rows) {
  const std::size_t tw = jac.dim(0) / target_rows;
  const std::size_t sw = jac.dim(1) / source_rows;
  std::vector<std::vector<double>> out(target_rows, std::vector<double>(source_rows, 0.0));
  for (std::size_t j = 0; j < target_rows; ++j) {
    double total = 0.0;
    for (std::size_t i = 0; i < source_rows; ++i) {
      double sq = 0.0;
      for (std::size_t r = 0; r < tw; ++r)
        for (std::size_t c = 0; c < sw; ++c) {
          const double v = jac.at(j * tw + r, i * sw + c);
          sq += v * v;
        }
      out[j][i] = std::sqrt(sq);
      total += out[j][i];
    }
    for (auto& v : out[j]) v /= total;
  }
  return out;
}

/// Finite-difference contributions of E^0 rows to a node picked from a
/// FreeEncoder built on the perturbed input.
inline std::vector<std::vector<double>> fd_input_contributions(
    const Tensor& e0, const ModelWeights& w,
    const std::function<ad::NodeId(const FreeEncoder&)>& pick) {
  auto f = [&](const std::vector<double>& x) {
    const auto enc = build_from_e0(Tensor(e0.shape(), x), w);
    return enc.g.value(pick(enc)).values();
  };
  const auto jac = fd_jacobian(f, e0.values());
  const auto ref = build_from_e0(e0, w);
  return contributions_from_jacobian(jac, ref.g.value(pick(ref)).dim(0), e0.dim(0));
}

/// Direct-formula Pearson in extended precision; no shared code with the library.
inline double oracle_pearson(const std::vector<double>& x, const std::vector<double>& y) {
  const long double n = static_cast<long double>(x.size());
  long double sx = 0, sy = 0, sxx = 0, syy = 0, sxy = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    sx += x[i];
    sy += y[i];
  }
  const long double mx = sx / n, my = sy / n;
  for (std::size_t i = 0; i < x.size(); ++i) {
    sxx += (x[i] - mx) * (x[i] - mx);
    syy += (y[i] - my) * (y[i] - my);
    sxy += (x[i] - mx) * (y[i] - my);
  }
  return static_cast<double>(sxy / std::sqrt(sxx * syy));
}

/// Mid-ranks by counting: rank = #smaller + (#equal + 1) / 2.
inline std::vector<double> oracle_ranks(const std::vector<double>& v) {
  std::vector<double> r(v.size());
  for (std::size_t i = 0; i < v.size(); ++i) {
    std::size_t less = 0, equal = 0;
    for (double u : v) {
      less += u < v[i];
      equal += u == v[i];
    }
    r[i] = static_cast<double>(less) + (static_cast<double>(equal) + 1.0) / 2.0;
  }
  return r;
}

inline double oracle_spearman(const std::vector<double>& x, const std::vector<double>& y) {
  return oracle_pearson(oracle_ranks(x), oracle_ranks(y));
}

/// Random vector of length n drawn from a small pool so ties are common.
inline std::vector<double> tied_vector(std::size_t n, std::mt19937_64& rng) {
  std::normal_distribution<double> normal;
  std::vector<double> pool(1 + rng() % 6);
  for (auto& p : pool) p = normal(rng);
  std::vector<double> v(n);
  for (auto& e : v) e = (rng() % 3 == 0) ? pool[rng() % pool.size()] : normal(rng);
  return v;
}

}  // namespace attnscope::testing
