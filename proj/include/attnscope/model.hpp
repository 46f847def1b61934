#pragma once

// BERT-style post-LN encoder recorded on an autodiff graph. The forward pass
// returns an EncoderTrace holding every intermediate needed for attribution.

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <optional>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "attnscope/archive.hpp"
#include "attnscope/autodiff.hpp"
#include "attnscope/error.hpp"
#include "attnscope/tensor.hpp"

namespace attnscope {

struct EncoderConfig {
  std::size_t n_layers = 12;
  std::size_t n_heads = 12;
  std::size_t d_e = 768;
  std::size_t d_q = 64;
  std::size_t d_v = 64;
  std::size_t d_ff = 3072;
  std::size_t vocab_size = 30522;
  std::size_t max_position = 512;
  std::size_t type_vocab_size = 2;
  double ln_eps = 1e-12;
  ad::GeluVariant activation = ad::GeluVariant::Exact;
  /// Token ids treated as special (CLS/SEP) when filtering is requested.
  std::vector<std::size_t> special_token_ids;

  static EncoderConfig bert_base() {
    EncoderConfig c;
    c.special_token_ids = {101, 102};
    return c;
  }

  void validate() const {
    auto positive = [](std::size_t v, const char* name) {
      if (v == 0) throw InputError(std::string("config field ") + name + " must be positive");
    };
    positive(n_layers, "n_layers");
    positive(n_heads, "n_heads");
    positive(d_e, "d_e");
    positive(d_q, "d_q");
    positive(d_v, "d_v");
    positive(d_ff, "d_ff");
    positive(vocab_size, "vocab_size");
    positive(max_position, "max_position");
    positive(type_vocab_size, "type_vocab_size");
    if (d_e < 2) throw InputError("config field d_e must be at least 2");
    if (!(ln_eps >= 0.0)) throw InputError("config field ln_eps must be non-negative");
  }
};

inline const char* activation_name(ad::GeluVariant v) {
  return v == ad::GeluVariant::Exact ? "exact-gelu" : "tanh-gelu";
}

inline void to_json(nlohmann::json& j, const EncoderConfig& c) {
  j = nlohmann::json{{"n_layers", c.n_layers},
                     {"n_heads", c.n_heads},
                     {"d_e", c.d_e},
                     {"d_q", c.d_q},
                     {"d_v", c.d_v},
                     {"d_ff", c.d_ff},
                     {"vocab_size", c.vocab_size},
                     {"max_position", c.max_position},
                     {"type_vocab_size", c.type_vocab_size},
                     {"ln_eps", c.ln_eps},
                     {"activation", activation_name(c.activation)},
                     {"special_token_ids", c.special_token_ids}};
}

inline void from_json(const nlohmann::json& j, EncoderConfig& c) {
  c = EncoderConfig{};
  j.at("n_layers").get_to(c.n_layers);
  j.at("n_heads").get_to(c.n_heads);
  j.at("d_e").get_to(c.d_e);
  j.at("d_q").get_to(c.d_q);
  j.at("d_v").get_to(c.d_v);
  j.at("d_ff").get_to(c.d_ff);
  j.at("vocab_size").get_to(c.vocab_size);
  j.at("max_position").get_to(c.max_position);
  j.at("type_vocab_size").get_to(c.type_vocab_size);
  if (j.contains("ln_eps")) j.at("ln_eps").get_to(c.ln_eps);
  if (j.contains("activation")) {
    const auto a = j.at("activation").get<std::string>();
    if (a == "exact-gelu") c.activation = ad::GeluVariant::Exact;
    else if (a == "tanh-gelu") c.activation = ad::GeluVariant::Tanh;
    else throw InputError("unknown activation '" + a + "' (expected exact-gelu or tanh-gelu)");
  }
  if (j.contains("special_token_ids")) j.at("special_token_ids").get_to(c.special_token_ids);
}

inline EncoderConfig load_config(const std::filesystem::path& path) {
  std::ifstream f(path);
  if (!f) throw Error("cannot open config " + path.string());
  EncoderConfig c;
  try {
    c = nlohmann::json::parse(f).get<EncoderConfig>();
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("config " + path.string() + ": " + e.what());
  }
  c.validate();
  return c;
}

struct TokenizedSequence {
  std::string id;
  std::vector<std::size_t> token_ids;
  std::vector<std::size_t> segment_ids;
  std::vector<std::string> display_tokens;  // may be empty

  std::size_t size() const noexcept { return token_ids.size(); }
};

/// Archive names and shapes implied by a configuration.
inline std::map<std::string, Shape> expected_tensor_shapes(const EncoderConfig& c) {
  std::map<std::string, Shape> s;
  s["embeddings.word"] = {c.vocab_size, c.d_e};
  s["embeddings.position"] = {c.max_position, c.d_e};
  s["embeddings.type"] = {c.type_vocab_size, c.d_e};
  s["embeddings.ln.gamma"] = {c.d_e};
  s["embeddings.ln.beta"] = {c.d_e};
  for (std::size_t l = 0; l < c.n_layers; ++l) {
    const std::string p = "layer." + std::to_string(l) + ".";
    s[p + "attn.q.weight"] = {c.d_e, c.n_heads * c.d_q};
    s[p + "attn.q.bias"] = {c.n_heads * c.d_q};
    s[p + "attn.k.weight"] = {c.d_e, c.n_heads * c.d_q};
    s[p + "attn.k.bias"] = {c.n_heads * c.d_q};
    s[p + "attn.v.weight"] = {c.d_e, c.n_heads * c.d_v};
    s[p + "attn.v.bias"] = {c.n_heads * c.d_v};
    s[p + "attn.out.weight"] = {c.n_heads * c.d_v, c.d_e};
    s[p + "attn.out.bias"] = {c.d_e};
    s[p + "attn.ln.gamma"] = {c.d_e};
    s[p + "attn.ln.beta"] = {c.d_e};
    s[p + "mlp.fc1.weight"] = {c.d_e, c.d_ff};
    s[p + "mlp.fc1.bias"] = {c.d_ff};
    s[p + "mlp.fc2.weight"] = {c.d_ff, c.d_e};
    s[p + "mlp.fc2.bias"] = {c.d_e};
    s[p + "mlp.ln.gamma"] = {c.d_e};
    s[p + "mlp.ln.beta"] = {c.d_e};
  }
  return s;
}

using TensorPtr = std::shared_ptr<const Tensor>;

struct HeadWeights {
  TensorPtr wq, bq, wk, bk, wv, bv;
};

struct LayerWeights {
  std::vector<HeadWeights> heads;
  TensorPtr out_w, out_b, attn_ln_gamma, attn_ln_beta;
  TensorPtr fc1_w, fc1_b, fc2_w, fc2_b, mlp_ln_gamma, mlp_ln_beta;
};

namespace detail {

inline Tensor column_slice(const Tensor& t, std::size_t begin, std::size_t width) {
  if (t.rank() == 1) {
    return Tensor::vector(std::vector<double>(t.data().begin() + begin,
                                              t.data().begin() + begin + width));
  }
  Tensor out({t.dim(0), width});
  for (std::size_t i = 0; i < t.dim(0); ++i)
    for (std::size_t j = 0; j < width; ++j) out.at(i, j) = t.at(i, begin + j);
  return out;
}

}  // namespace detail

/// Immutable, 64-bit model parameters; safe to share across threads.
class ModelWeights {
 public:
  /// Validates names and shapes against `config`. Tensors the configuration
  /// does not use are kept out and listed in unused_names().
  static ModelWeights from_tensors(archive::TensorMap tensors, const EncoderConfig& config) {
    config.validate();
    const auto expected = expected_tensor_shapes(config);
    ModelWeights w;
    w.config_ = config;
    std::vector<std::string> missing;
    for (const auto& [name, shape] : expected) {
      auto it = tensors.find(name);
      if (it == tensors.end()) {
        missing.push_back(name);
        continue;
      }
      if (it->second.shape() != shape) {
        throw LoadError("tensor '" + name + "' has shape " + shape_string(it->second.shape()) +
                        ", expected " + shape_string(shape));
      }
    }
    if (!missing.empty()) {
      std::string msg = "weight archive is missing tensor(s):";
      for (const auto& m : missing) msg += " '" + m + "'";
      throw LoadError(msg);
    }
    for (auto& [name, t] : tensors) {
      if (expected.count(name)) {
        w.named_.emplace(name, std::make_shared<const Tensor>(std::move(t)));
      } else {
        w.unused_.push_back(name);
      }
    }
    w.build_views();
    return w;
  }

  const EncoderConfig& config() const noexcept { return config_; }
  const std::map<std::string, TensorPtr>& named() const noexcept { return named_; }
  const TensorPtr& get(const std::string& name) const {
    auto it = named_.find(name);
    if (it == named_.end()) throw LoadError("no tensor named '" + name + "'");
    return it->second;
  }
  const std::vector<std::string>& unused_names() const noexcept { return unused_; }
  std::size_t tensor_count() const noexcept { return named_.size(); }

  const LayerWeights& layer(std::size_t l) const { return layers_.at(l); }

  archive::TensorMap to_tensors() const {
    archive::TensorMap out;
    for (const auto& [name, t] : named_) out.emplace(name, *t);
    return out;
  }

 private:
  void build_views() {
    const auto& c = config_;
    layers_.clear();
    for (std::size_t l = 0; l < c.n_layers; ++l) {
      const std::string p = "layer." + std::to_string(l) + ".";
      LayerWeights lw;
      for (std::size_t h = 0; h < c.n_heads; ++h) {
        auto cut = [&](const std::string& name, std::size_t width) {
          return std::make_shared<const Tensor>(
              detail::column_slice(*named_.at(p + name), h * width, width));
        };
        lw.heads.push_back(HeadWeights{cut("attn.q.weight", c.d_q), cut("attn.q.bias", c.d_q),
                                       cut("attn.k.weight", c.d_q), cut("attn.k.bias", c.d_q),
                                       cut("attn.v.weight", c.d_v), cut("attn.v.bias", c.d_v)});
      }
      lw.out_w = named_.at(p + "attn.out.weight");
      lw.out_b = named_.at(p + "attn.out.bias");
      lw.attn_ln_gamma = named_.at(p + "attn.ln.gamma");
      lw.attn_ln_beta = named_.at(p + "attn.ln.beta");
      lw.fc1_w = named_.at(p + "mlp.fc1.weight");
      lw.fc1_b = named_.at(p + "mlp.fc1.bias");
      lw.fc2_w = named_.at(p + "mlp.fc2.weight");
      lw.fc2_b = named_.at(p + "mlp.fc2.bias");
      lw.mlp_ln_gamma = named_.at(p + "mlp.ln.gamma");
      lw.mlp_ln_beta = named_.at(p + "mlp.ln.beta");
      layers_.push_back(std::move(lw));
    }
  }

  EncoderConfig config_;
  std::map<std::string, TensorPtr> named_;
  std::vector<LayerWeights> layers_;
  std::vector<std::string> unused_;
};

inline ModelWeights load_weights(const std::filesystem::path& path, const EncoderConfig& config) {
  return ModelWeights::from_tensors(archive::read(path), config);
}

/// N(0, stddev) projections and embeddings, zero biases, unit LN gains.
inline ModelWeights random_weights(const EncoderConfig& config, std::uint64_t seed,
                                   double stddev = 0.02) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, stddev);
  archive::TensorMap tensors;
  for (const auto& [name, shape] : expected_tensor_shapes(config)) {
    Tensor t(shape);
    const bool gain = name.ends_with(".gamma");
    const bool zero = name.ends_with(".beta") || name.ends_with(".bias");
    for (double& v : t.data()) v = gain ? 1.0 : zero ? 0.0 : normal(rng);
    tensors.emplace(name, std::move(t));
  }
  return ModelWeights::from_tensors(std::move(tensors), config);
}

inline void validate_sequence(const TokenizedSequence& seq, const EncoderConfig& c) {
  if (seq.token_ids.empty()) throw InputError("sequence '" + seq.id + "' is empty");
  if (seq.token_ids.size() > c.max_position) {
    throw InputError("sequence '" + seq.id + "' has " + std::to_string(seq.size()) +
                     " tokens, more than max_position " + std::to_string(c.max_position));
  }
  if (seq.segment_ids.size() != seq.token_ids.size()) {
    throw InputError("sequence '" + seq.id + "' has " + std::to_string(seq.segment_ids.size()) +
                     " segment ids for " + std::to_string(seq.size()) + " tokens");
  }
  for (std::size_t i = 0; i < seq.size(); ++i) {
    if (seq.token_ids[i] >= c.vocab_size) {
      throw InputError("sequence '" + seq.id + "': token id " + std::to_string(seq.token_ids[i]) +
                       " at position " + std::to_string(i) + " exceeds vocab_size " +
                       std::to_string(c.vocab_size));
    }
    if (seq.segment_ids[i] >= c.type_vocab_size) {
      throw InputError("sequence '" + seq.id + "': segment id " +
                       std::to_string(seq.segment_ids[i]) + " at position " +
                       std::to_string(i) + " exceeds type_vocab_size " +
                       std::to_string(c.type_vocab_size));
    }
  }
}

namespace detail {

inline ad::NodeId record_embedding(ad::Graph& g, const TokenizedSequence& seq,
                                   const ModelWeights& w) {
  validate_sequence(seq, w.config());
  std::vector<std::size_t> positions(seq.size());
  for (std::size_t i = 0; i < positions.size(); ++i) positions[i] = i;
  const auto word = g.gather(g.leaf(w.get("embeddings.word"), "embeddings.word"), seq.token_ids);
  const auto pos = g.gather(g.leaf(w.get("embeddings.position"), "embeddings.position"), positions);
  const auto type = g.gather(g.leaf(w.get("embeddings.type"), "embeddings.type"), seq.segment_ids);
  return g.add(g.add(word, pos), type);
}

struct HeadNodes {
  ad::NodeId attention;
  ad::NodeId output;
};

inline HeadNodes record_head(ad::Graph& g, ad::NodeId x, const HeadWeights& hw) {
  const auto q = g.linear(x, g.leaf(hw.wq), g.leaf(hw.bq));
  const auto k = g.linear(x, g.leaf(hw.wk), g.leaf(hw.bk));
  const auto v = g.linear(x, g.leaf(hw.wv), g.leaf(hw.bv));
  const double inv_sqrt_dq = 1.0 / std::sqrt(static_cast<double>(hw.wq->dim(1)));
  const auto logits = g.scale(g.matmul(q, g.transpose(k)), inv_sqrt_dq);
  const auto attn = g.softmax(logits);
  // Row i of attn * V is V . a_i in column-vector notation.
  return {attn, g.matmul(attn, v)};
}

struct LayerNodes {
  std::vector<HeadNodes> heads;
  ad::NodeId output;
};

inline LayerNodes record_layer(ad::Graph& g, ad::NodeId x, const LayerWeights& lw,
                               const EncoderConfig& c) {
  LayerNodes out;
  std::vector<ad::NodeId> head_outputs;
  for (const auto& hw : lw.heads) {
    out.heads.push_back(record_head(g, x, hw));
    head_outputs.push_back(out.heads.back().output);
  }
  const auto merged = g.linear(g.concat_cols(head_outputs), g.leaf(lw.out_w), g.leaf(lw.out_b));
  const auto h = g.layer_norm(g.add(x, merged), g.leaf(lw.attn_ln_gamma),
                              g.leaf(lw.attn_ln_beta), c.ln_eps);
  const auto inner = g.gelu(g.linear(h, g.leaf(lw.fc1_w), g.leaf(lw.fc1_b)), c.activation);
  const auto mlp = g.linear(inner, g.leaf(lw.fc2_w), g.leaf(lw.fc2_b));
  out.output = g.layer_norm(g.add(h, mlp), g.leaf(lw.mlp_ln_gamma), g.leaf(lw.mlp_ln_beta),
                            c.ln_eps);
  return out;
}

}  // namespace detail

/// E^0: word + position + segment embeddings, before the embedding layer norm.
inline Tensor embed(const TokenizedSequence& seq, const ModelWeights& w) {
  ad::Graph g;
  return g.value(detail::record_embedding(g, seq, w));
}

struct HeadResult {
  Tensor attention;  // d_s x d_s, row i is a_i
  Tensor output;     // d_s x d_v, row i is o_i
};

/// One self-attention head applied to the rows of `e`.
inline HeadResult attention_head(const Tensor& e, const HeadWeights& hw) {
  ad::Graph g;
  const auto nodes = detail::record_head(g, g.leaf(e), hw);
  return {g.value(nodes.attention), g.value(nodes.output)};
}

/// Everything recorded by one forward pass. Layers are 1-based (1..n_layers),
/// heads 0-based. Copies share the underlying graph.
class EncoderTrace {
 public:
  EncoderTrace(std::shared_ptr<const ad::Graph> graph, ad::NodeId e0, ad::NodeId e0_normed,
               std::vector<ad::NodeId> hidden, std::vector<std::vector<ad::NodeId>> attention,
               std::vector<std::vector<ad::NodeId>> head_output)
      : graph_(std::move(graph)),
        e0_(e0),
        e0_normed_(e0_normed),
        hidden_(std::move(hidden)),
        attention_(std::move(attention)),
        head_output_(std::move(head_output)) {}

  const ad::Graph& graph() const noexcept { return *graph_; }
  std::size_t seq_len() const { return graph_->value(e0_).dim(0); }
  std::size_t n_layers() const noexcept { return hidden_.size(); }
  std::size_t n_heads() const noexcept { return attention_.empty() ? 0 : attention_[0].size(); }

  ad::NodeId e0_node() const noexcept { return e0_; }
  ad::NodeId e0_normed_node() const noexcept { return e0_normed_; }
  ad::NodeId hidden_node(std::size_t l) const { return hidden_.at(check_layer(l) - 1); }
  /// Input of layer l: the normalized embeddings for l = 1, E^{l-1} otherwise.
  ad::NodeId layer_input_node(std::size_t l) const {
    return check_layer(l) == 1 ? e0_normed_ : hidden_.at(l - 2);
  }
  ad::NodeId attention_node(std::size_t l, std::size_t h) const {
    return attention_.at(check_layer(l) - 1).at(check_head(h));
  }
  ad::NodeId head_output_node(std::size_t l, std::size_t h) const {
    return head_output_.at(check_layer(l) - 1).at(check_head(h));
  }

  const Tensor& e0() const { return graph_->value(e0_); }
  const Tensor& e0_normed() const { return graph_->value(e0_normed_); }
  const Tensor& hidden(std::size_t l) const { return graph_->value(hidden_node(l)); }
  const Tensor& layer_input(std::size_t l) const { return graph_->value(layer_input_node(l)); }
  const Tensor& attention(std::size_t l, std::size_t h) const {
    return graph_->value(attention_node(l, h));
  }
  const Tensor& head_output(std::size_t l, std::size_t h) const {
    return graph_->value(head_output_node(l, h));
  }

  std::size_t check_layer(std::size_t l) const {
    if (l < 1 || l > hidden_.size()) {
      throw IndexError("layer " + std::to_string(l) + " outside 1.." +
                       std::to_string(hidden_.size()));
    }
    return l;
  }
  std::size_t check_head(std::size_t h) const {
    if (h >= n_heads()) {
      throw IndexError("head " + std::to_string(h) + " outside 0.." +
                       std::to_string(n_heads() - 1));
    }
    return h;
  }

 private:
  std::shared_ptr<const ad::Graph> graph_;
  ad::NodeId e0_;
  ad::NodeId e0_normed_;
  std::vector<ad::NodeId> hidden_;
  std::vector<std::vector<ad::NodeId>> attention_;
  std::vector<std::vector<ad::NodeId>> head_output_;
};

inline EncoderTrace forward(const TokenizedSequence& seq, const ModelWeights& w) {
  const auto& c = w.config();
  auto g = std::make_shared<ad::Graph>();
  const auto e0 = detail::record_embedding(*g, seq, w);
  const auto normed = g->layer_norm(e0, g->leaf(w.get("embeddings.ln.gamma")),
                                    g->leaf(w.get("embeddings.ln.beta")), c.ln_eps);
  std::vector<ad::NodeId> hidden;
  std::vector<std::vector<ad::NodeId>> attention, head_output;
  ad::NodeId x = normed;
  for (std::size_t l = 0; l < c.n_layers; ++l) {
    auto nodes = detail::record_layer(*g, x, w.layer(l), c);
    std::vector<ad::NodeId> a, o;
    for (const auto& h : nodes.heads) {
      a.push_back(h.attention);
      o.push_back(h.output);
    }
    attention.push_back(std::move(a));
    head_output.push_back(std::move(o));
    hidden.push_back(nodes.output);
    x = nodes.output;
  }
  return EncoderTrace(std::move(g), e0, normed, std::move(hidden), std::move(attention),
                      std::move(head_output));
}

/// Applies layer l (1-based) to `input` on a fresh graph.
inline Tensor layer_forward(const Tensor& input, const ModelWeights& w, std::size_t l) {
  if (l < 1 || l > w.config().n_layers) throw IndexError("layer " + std::to_string(l) + " out of range");
  ad::Graph g;
  const auto nodes = detail::record_layer(g, g.leaf(input), w.layer(l - 1), w.config());
  return g.value(nodes.output);
}

}  // namespace attnscope
