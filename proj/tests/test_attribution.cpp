#include <gtest/gtest.h>

#include <cmath>

#include "support.hpp"

using namespace attnscope;
using attribution::Options;
using attribution::VectorRef;
using attnscope::testing::random_sequence;
using attnscope::testing::random_tensor;
using attnscope::testing::toy_config;

namespace {

void expect_rows_normalized(const attribution::ContributionMatrix& m) {
  for (std::size_t j = 0; j < m.values.dim(0); ++j) {
    ASSERT_TRUE(m.defined[j]);
    double s = 0.0;
    for (double v : m.values.row(j)) {
      EXPECT_GE(v, 0.0);
      EXPECT_LE(v, 1.0);
      s += v;
    }
    EXPECT_NEAR(s, 1.0, 1e-9);
  }
}

void expect_matches(const attribution::ContributionMatrix& m,
                    const std::vector<std::vector<double>>& ref, double tol) {
  for (std::size_t j = 0; j < ref.size(); ++j)
    for (std::size_t i = 0; i < ref[j].size(); ++i)
      EXPECT_NEAR(m.values.at(j, i), ref[j][i], tol) << "j=" << j << " i=" << i;
}

ModelWeights zero_query(const ModelWeights& w, std::size_t layer0) {
  auto m = w.to_tensors();
  const std::string p = "layer." + std::to_string(layer0) + ".attn.q.";
  m.at(p + "weight") = Tensor(m.at(p + "weight").shape());
  m.at(p + "bias") = Tensor(m.at(p + "bias").shape());
  return ModelWeights::from_tensors(m, w.config());
}

}  // namespace

TEST(Contribution, SingleTokenIsOne) {
  const auto cfg = toy_config();
  const auto w = random_weights(cfg, 1, 0.3);
  std::mt19937_64 rng(1);
  const auto trace = forward(random_sequence(cfg, 1, rng), w);
  for (std::size_t l = 1; l <= 2; ++l) {
    EXPECT_EQ(attribution::previous_layer_contribution(trace, l, 0).values,
              Tensor::from_rows({{1.0}}));
    EXPECT_EQ(attribution::input_contribution(trace, l, 1).values, Tensor::from_rows({{1.0}}));
    EXPECT_EQ(attribution::hidden_contribution(trace, l).values, Tensor::from_rows({{1.0}}));
  }
}

TEST(Contribution, RowsAreNormalizedOnRandomTraces) {
  const auto cfg = toy_config();
  std::mt19937_64 rng(2);
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const auto w = random_weights(cfg, seed, 0.4);
    const auto trace = forward(random_sequence(cfg, 2 + seed, rng), w);
    for (std::size_t l = 1; l <= 2; ++l) {
      expect_rows_normalized(attribution::hidden_contribution(trace, l));
      for (std::size_t h = 0; h < 2; ++h) {
        expect_rows_normalized(attribution::previous_layer_contribution(trace, l, h));
        expect_rows_normalized(attribution::input_contribution(trace, l, h));
      }
    }
  }
}

TEST(Contribution, ZeroQueryHeadIsExactlyUniform) {
  const auto cfg = toy_config();
  const auto w = zero_query(random_weights(cfg, 3, 0.5), 1);
  std::mt19937_64 rng(3);
  const auto trace = forward(random_sequence(cfg, 5, rng), w);
  for (std::size_t h = 0; h < 2; ++h) {
    for (double v : trace.attention(2, h).data()) EXPECT_NEAR(v, 0.2, 1e-12);
    const auto m = attribution::previous_layer_contribution(trace, 2, h);
    for (double v : m.values.data()) EXPECT_NEAR(v, 0.2, 1e-12);
  }
}

TEST(Contribution, InputContributionMatchesFiniteDifferences) {
  const auto cfg = toy_config();
  const auto w = random_weights(cfg, 4, 0.5);
  std::mt19937_64 rng(4);
  const auto trace = forward(random_sequence(cfg, 3, rng), w);
  for (std::size_t l = 1; l <= 2; ++l) {
    for (std::size_t h = 0; h < 2; ++h) {
      const auto ref = attnscope::testing::fd_input_contributions(
          trace.e0(), w, [&](const auto& enc) { return enc.layers[l - 1].heads[h].output; });
      expect_matches(attribution::input_contribution(trace, l, h), ref, 1e-6);
    }
    const auto ref = attnscope::testing::fd_input_contributions(
        trace.e0(), w, [&](const auto& enc) { return enc.layers[l - 1].output; });
    expect_matches(attribution::hidden_contribution(trace, l), ref, 1e-6);
  }
}

TEST(Contribution, TwoTokenOneLayerMatchesFiniteDifferences) {
  const auto cfg = toy_config(1, 2);
  const auto w = random_weights(cfg, 5, 0.5);
  std::mt19937_64 rng(5);
  const auto trace = forward(random_sequence(cfg, 2, rng), w);
  const auto ref = attnscope::testing::fd_input_contributions(
      trace.e0(), w, [](const auto& enc) { return enc.layers[0].heads[1].output; });
  expect_matches(attribution::input_contribution(trace, 1, 1), ref, 1e-6);
}

TEST(Contribution, PreviousLayerMatchesFiniteDifferences) {
  const auto cfg = toy_config();
  const auto w = random_weights(cfg, 6, 0.5);
  std::mt19937_64 rng(6);
  const auto trace = forward(random_sequence(cfg, 4, rng), w);
  for (std::size_t l = 1; l <= 2; ++l) {
    const Tensor x = trace.layer_input(l);
    for (std::size_t h = 0; h < 2; ++h) {
      auto f = [&](const std::vector<double>& v) {
        ad::Graph g;
        const auto nodes = detail::record_layer(g, g.leaf(Tensor(x.shape(), v)), w.layer(l - 1), cfg);
        return g.value(nodes.heads[h].output).values();
      };
      const auto jac = attnscope::testing::fd_jacobian(f, x.values());
      const auto ref = attnscope::testing::contributions_from_jacobian(jac, 4, 4);
      expect_matches(attribution::previous_layer_contribution(trace, l, h), ref, 1e-6);
    }
  }
}

TEST(Contribution, ReverseAndForwardModesAgree) {
  const auto cfg = toy_config();
  const auto w = random_weights(cfg, 7, 0.5);
  std::mt19937_64 rng(7);
  const auto trace = forward(random_sequence(cfg, 5, rng), w);
  Options fwd;
  fwd.mode = ad::Mode::Forward;
  Options small;
  small.max_batch = 3;
  for (std::size_t l = 1; l <= 2; ++l) {
    const auto a = attribution::input_contribution(trace, l, 1);
    const auto b = attribution::input_contribution(trace, l, 1, fwd);
    const auto c = attribution::input_contribution(trace, l, 1, small);
    EXPECT_LT(attnscope::testing::max_abs_diff(a.values, b.values), 1e-10);
    EXPECT_EQ(a.values, c.values);
    const auto ha = attribution::hidden_contribution(trace, l);
    const auto hb = attribution::hidden_contribution(trace, l, fwd);
    EXPECT_LT(attnscope::testing::max_abs_diff(ha.values, hb.values), 1e-10);
  }
}

TEST(Contribution, InputEqualsPreviousAtFirstLayerWhenAnchoredPostNorm) {
  const auto cfg = toy_config();
  const auto w = random_weights(cfg, 8, 0.5);
  std::mt19937_64 rng(8);
  const auto trace = forward(random_sequence(cfg, 4, rng), w);
  Options post;
  post.e0_post_norm = true;
  for (std::size_t h = 0; h < 2; ++h) {
    EXPECT_EQ(attribution::input_contribution(trace, 1, h, post).values,
              attribution::previous_layer_contribution(trace, 1, h).values);
  }
}

// With tiny W_q, W_k the attention deviation from uniform and the gradient
// term through the softmax are both first order in the scale; they line up
// once W_v W_v^T is close to isotropic, which needs a wider model than the
// 8-dimensional toy.
TEST(Contribution, SmallQueryKeyRegimeTracksAttention) {
  const auto cfg = toy_config(2, 4, 64, 16, 128);
  auto m = random_weights(cfg, 9, 0.5).to_tensors();
  for (auto& [name, t] : m) {
    if (name.find(".attn.q.weight") != std::string::npos ||
        name.find(".attn.k.weight") != std::string::npos)
      for (auto& v : t.data()) v *= 0.01;
  }
  const auto w = ModelWeights::from_tensors(m, cfg);
  std::mt19937_64 rng(9);
  for (int s = 0; s < 3; ++s) {
    const auto trace = forward(random_sequence(cfg, 6, rng), w);
    for (std::size_t l = 1; l <= 2; ++l) {
      for (std::size_t h = 0; h < cfg.n_heads; ++h) {
        const auto c = attribution::previous_layer_contribution(trace, l, h);
        analysis::CorrelationAccumulator acc;
        for (std::size_t j = 0; j < 6; ++j) acc.add(trace.attention(l, h).row(j), c.values.row(j));
        const auto sum = acc.summary(l, h);
        ASSERT_TRUE(sum.mean_pearson.has_value());
        EXPECT_GT(*sum.mean_pearson, 0.99) << "layer " << l << " head " << h;
      }
    }
  }
}

TEST(Contribution, DisconnectedTargetIsUndefined) {
  ad::Graph g;
  const auto x = g.leaf(Tensor::from_rows({{1, 2}, {3, 4}}));
  const auto z = g.leaf(Tensor::from_rows({{1, 2}, {3, 4}}));
  const auto y = g.add(g.scale(x, 0.0), z);
  const std::vector<VectorRef> sources = {{x, 0}, {x, 1}};
  EXPECT_FALSE(attribution::contribution(g, {y, 0}, sources).has_value());
  const auto m = attribution::contribution_matrix(g, y, x);
  EXPECT_EQ(m.undefined_rows(), 2u);
  for (double v : m.values.data()) EXPECT_EQ(v, 0.0);
}

TEST(Contribution, ZeroSourceGetsZeroShare) {
  ad::Graph g;
  const auto x = g.leaf(Tensor::from_rows({{1, 2}, {3, 4}}));
  const auto row0 = g.slice_row(x, 0);
  const auto y = g.gelu(g.scale(row0, 2.0));
  const std::vector<VectorRef> sources = {{x, 0}, {x, 1}};
  const auto c = attribution::contribution(g, {y, 0}, sources);
  ASSERT_TRUE(c.has_value());
  EXPECT_EQ((*c)[0], 1.0);
  EXPECT_EQ((*c)[1], 0.0);
}

TEST(Contribution, GenericCallMatchesMatrixRow) {
  const auto cfg = toy_config();
  const auto w = random_weights(cfg, 10, 0.5);
  std::mt19937_64 rng(10);
  const auto trace = forward(random_sequence(cfg, 4, rng), w);
  const auto m = attribution::input_contribution(trace, 2, 0);
  std::vector<VectorRef> sources;
  for (std::size_t i = 0; i < 4; ++i) sources.push_back({trace.e0_node(), i});
  for (std::size_t j = 0; j < 4; ++j) {
    const auto c = attribution::contribution(trace.graph(), {trace.head_output_node(2, 0), j}, sources);
    ASSERT_TRUE(c.has_value());
    for (std::size_t i = 0; i < 4; ++i) EXPECT_NEAR((*c)[i], m.values.at(j, i), 1e-15);
  }
  // Sources may also come from different nodes.
  const std::vector<VectorRef> mixed = {{trace.e0_node(), 0}, {trace.hidden_node(1), 2}};
  const auto c = attribution::contribution(trace.graph(), {trace.hidden_node(2), 1}, mixed);
  ASSERT_TRUE(c.has_value());
  EXPECT_NEAR((*c)[0] + (*c)[1], 1.0, 1e-12);
}

TEST(Contribution, LocatorErrors) {
  const auto cfg = toy_config();
  const auto w = random_weights(cfg, 11, 0.5);
  std::mt19937_64 rng(11);
  const auto trace = forward(random_sequence(cfg, 3, rng), w);
  const auto& g = trace.graph();
  const std::vector<VectorRef> ok = {{trace.e0_node(), 0}};
  const std::vector<VectorRef> bad = {{trace.e0_node(), 3}};
  const std::vector<VectorRef> dup = {{trace.e0_node(), 1}, {trace.e0_node(), 1}};
  EXPECT_THROW(attribution::contribution(g, {trace.hidden_node(1), 3}, ok), IndexError);
  EXPECT_THROW(attribution::contribution(g, {trace.hidden_node(1), 0}, bad), IndexError);
  EXPECT_THROW(attribution::contribution(g, {trace.hidden_node(1), 0}, dup), InputError);
  EXPECT_THROW(attribution::contribution(g, {trace.hidden_node(1), 0}, {}), InputError);
  EXPECT_THROW(attribution::previous_layer_contribution(trace, 3, 0), IndexError);
  EXPECT_THROW(attribution::input_contribution(trace, 1, 2), IndexError);
}
