#pragma once

// Run orchestration behind the attnscope subcommands. `extract` writes one
// tensor archive per (sequence, kind, layer, head) plus extract_manifest.json;
// the analysis commands read those artifacts back and write CSV, SVG and a
// JSON manifest. Aggregation always merges per-sequence partials in dataset
// order, so outputs do not depend on the thread count.

#include <algorithm>
#include <atomic>
#include <cstdio>
#include <exception>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <mutex>
#include <optional>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "attnscope/analysis.hpp"
#include "attnscope/archive.hpp"
#include "attnscope/attribution.hpp"
#include "attnscope/dataset.hpp"
#include "attnscope/error.hpp"
#include "attnscope/model.hpp"
#include "attnscope/svg.hpp"

namespace attnscope::run {

namespace fs = std::filesystem;
using nlohmann::json;

inline constexpr const char* kToolVersion = "attnscope 0.1.0";
inline constexpr int kCsvSchemaVersion = 1;

enum class Kind { Attention, PrevContribution, InputContribution, HiddenContribution };

inline const char* kind_name(Kind k) {
  switch (k) {
    case Kind::Attention: return "attention";
    case Kind::PrevContribution: return "prev-contribution";
    case Kind::InputContribution: return "input-contribution";
    case Kind::HiddenContribution: return "hidden-contribution";
  }
  return "?";
}

inline Kind parse_kind(const std::string& s) {
  for (Kind k : {Kind::Attention, Kind::PrevContribution, Kind::InputContribution,
                 Kind::HiddenContribution})
    if (s == kind_name(k)) return k;
  throw InputError("unknown kind '" + s +
                   "' (expected attention, prev-contribution, input-contribution or "
                   "hidden-contribution)");
}

inline bool per_head(Kind k) { return k != Kind::HiddenContribution; }

/// Everything a subcommand needs; mirrors the command-line flags.
struct AnalysisRun {
  fs::path config_path;
  fs::path weights_path;
  fs::path data_path;
  fs::path out_dir;
  std::size_t max_len = 64;
  std::vector<std::size_t> layers;  // 1-based; empty = all
  std::vector<std::size_t> heads;   // 0-based; empty = all
  std::vector<Kind> kinds;
  bool e0_post_norm = false;
  bool exclude_special = false;
  bool allow_nonidentifiable = false;
  bool per_sequence_mean = false;
  bool shared_scale = false;
  std::size_t threads = 1;
  // maps
  std::string seq_id;
  std::size_t map_layer = 1;
  std::size_t map_head = 0;
};

namespace detail {

inline std::string fmt17(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

inline std::string opt17(const std::optional<double>& v) { return v ? fmt17(*v) : ""; }

inline void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw Error("cannot open " + path.string() + " for writing");
  f << text;
  if (!f) throw Error("failed writing " + path.string());
}

inline json read_json(const fs::path& path) {
  std::ifstream f(path);
  if (!f) throw Error("cannot open " + path.string());
  try {
    return json::parse(f);
  } catch (const json::exception& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
}

/// Runs fn(i) for i in [0, n) on up to `threads` workers; rethrows the first
/// failure after all workers stop.
template <class Fn>
void parallel_for(std::size_t n, std::size_t threads, Fn&& fn) {
  threads = std::clamp<std::size_t>(threads, 1, std::max<std::size_t>(n, 1));
  if (threads == 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr failure;
  std::mutex mu;
  std::vector<std::thread> pool;
  for (std::size_t t = 0; t < threads; ++t)
    pool.emplace_back([&] {
      for (std::size_t i; (i = next.fetch_add(1)) < n;) {
        try {
          fn(i);
        } catch (...) {
          std::lock_guard lock(mu);
          if (!failure) failure = std::current_exception();
          next = n;
        }
      }
    });
  for (auto& th : pool) th.join();
  if (failure) std::rethrow_exception(failure);
}

inline std::vector<std::size_t> select(const std::vector<std::size_t>& requested,
                                       std::size_t first, std::size_t count, const char* what) {
  if (requested.empty()) {
    std::vector<std::size_t> all(count);
    for (std::size_t i = 0; i < count; ++i) all[i] = first + i;
    return all;
  }
  std::set<std::size_t> uniq(requested.begin(), requested.end());
  for (std::size_t v : uniq)
    if (v < first || v >= first + count) {
      throw IndexError(std::string(what) + " " + std::to_string(v) + " outside " +
                       std::to_string(first) + ".." + std::to_string(first + count - 1));
    }
  return {uniq.begin(), uniq.end()};
}

inline std::string artifact_name(Kind k, std::size_t l, std::optional<std::size_t> h) {
  std::string name = std::string(kind_name(k)) + "_l" + std::to_string(l);
  if (h) name += "_h" + std::to_string(*h);
  return name + ".hta";
}

inline bool is_special(const TokenizedSequence& s, std::size_t i, const EncoderConfig& c) {
  if (std::find(c.special_token_ids.begin(), c.special_token_ids.end(), s.token_ids[i]) !=
      c.special_token_ids.end())
    return true;
  if (i < s.display_tokens.size()) {
    const auto& t = s.display_tokens[i];
    return t == "[CLS]" || t == "[SEP]";
  }
  return false;
}

inline json flags_json(const AnalysisRun& r, const json& recorded = json::object()) {
  json f = {{"max_len", r.max_len},
            {"e0_post_norm", r.e0_post_norm},
            {"exclude_special", r.exclude_special},
            {"allow_nonidentifiable", r.allow_nonidentifiable},
            {"per_sequence_mean", r.per_sequence_mean},
            {"shared_scale", r.shared_scale},
            {"self_offset_included", true},
            {"degenerate_pairs", "skipped"},
            {"contribution_norm", "frobenius"},
            {"jacobian_mode", "reverse"},
            {"residual_order", "post-ln"}};
  for (auto it = recorded.begin(); it != recorded.end(); ++it) f["extract_" + it.key()] = it.value();
  return f;
}

inline json versions_json() {
  return {{"tool", kToolVersion}, {"csv_schema", kCsvSchemaVersion}, {"archive_format", "HTA1"}};
}

}  // namespace detail

/// Sequence-level view of an extraction, as recorded in extract_manifest.json.
struct ExtractedSequence {
  std::string id;
  std::size_t length = 0;
  std::vector<std::string> tokens;
  std::vector<bool> special;
};

struct ExtractIndex {
  fs::path dir;
  json manifest;
  std::size_t max_len = 0;
  std::size_t n_layers = 0;
  std::size_t n_heads = 0;
  std::vector<std::size_t> layers;
  std::vector<std::size_t> heads;
  std::vector<Kind> kinds;
  std::vector<ExtractedSequence> sequences;

  bool has_kind(Kind k) const { return std::find(kinds.begin(), kinds.end(), k) != kinds.end(); }
};

struct ExtractResult {
  std::size_t sequences = 0;
  std::size_t archives = 0;
  std::size_t undefined_rows = 0;
  std::size_t filtered_too_long = 0;
  std::size_t effective_max_len = 0;
};

inline ExtractResult extract(const AnalysisRun& run) {
  const EncoderConfig config = load_config(run.config_path);
  const ModelWeights weights = load_weights(run.weights_path, config);

  std::size_t max_len = std::min(run.max_len, config.max_position);
  if (!run.allow_nonidentifiable && max_len > config.d_v) {
    std::cerr << "attnscope: limiting --max-len " << max_len << " to d_v = " << config.d_v
              << " (identifiability filter; pass --allow-nonidentifiable to keep longer "
                 "sequences)\n";
    max_len = config.d_v;
  }
  Dataset data = load_sequences(run.data_path, max_len);
  for (const auto& w : data.warnings) std::cerr << "attnscope: warning: " << w << "\n";
  for (const auto& s : data.sequences) {
    try {
      validate_sequence(s, config);
    } catch (const InputError& e) {
      throw InputError(std::string("dataset ") + run.data_path.string() + ": " + e.what());
    }
  }

  const auto layers = detail::select(run.layers, 1, config.n_layers, "layer");
  const auto heads = detail::select(run.heads, 0, config.n_heads, "head");
  std::vector<Kind> kinds = run.kinds;
  if (kinds.empty())
    kinds = {Kind::Attention, Kind::PrevContribution, Kind::InputContribution};

  attribution::Options aopt;
  aopt.e0_post_norm = run.e0_post_norm;

  const auto& seqs = data.sequences;
  std::vector<std::size_t> archives(seqs.size(), 0);
  std::vector<std::map<std::string, std::size_t>> undefined(seqs.size());

  detail::parallel_for(seqs.size(), run.threads, [&](std::size_t si) {
    const auto& seq = seqs[si];
    try {
      const EncoderTrace trace = forward(seq, weights);
      const fs::path dir = run.out_dir / seq.id;
      auto save_matrix = [&](Kind k, std::size_t l, std::optional<std::size_t> h,
                             const attribution::ContributionMatrix& m) {
        Tensor defined({m.defined.size()});
        for (std::size_t j = 0; j < m.defined.size(); ++j) defined[j] = m.defined[j] ? 1.0 : 0.0;
        archive::write(dir / detail::artifact_name(k, l, h),
                       {{"values", m.values}, {"defined", defined}});
        undefined[si][kind_name(k)] += m.undefined_rows();
        ++archives[si];
      };
      for (std::size_t l : layers) {
        for (std::size_t h : heads) {
          for (Kind k : kinds) {
            switch (k) {
              case Kind::Attention:
                archive::write(dir / detail::artifact_name(k, l, h),
                               {{"values", trace.attention(l, h)}});
                ++archives[si];
                break;
              case Kind::PrevContribution:
                save_matrix(k, l, h, attribution::previous_layer_contribution(trace, l, h, aopt));
                break;
              case Kind::InputContribution:
                save_matrix(k, l, h, attribution::input_contribution(trace, l, h, aopt));
                break;
              case Kind::HiddenContribution:
                break;
            }
          }
        }
        if (std::find(kinds.begin(), kinds.end(), Kind::HiddenContribution) != kinds.end())
          save_matrix(Kind::HiddenContribution, l, std::nullopt,
                      attribution::hidden_contribution(trace, l, aopt));
      }
    } catch (const Error& e) {
      throw Error("sequence '" + seq.id + "': " + e.what());
    }
  });

  ExtractResult res;
  res.sequences = seqs.size();
  res.filtered_too_long = data.filtered_too_long;
  res.effective_max_len = max_len;
  json seq_list = json::array();
  json undefined_total = json::object();
  std::vector<std::size_t> lengths;
  std::size_t n_tokens = 0;
  for (std::size_t si = 0; si < seqs.size(); ++si) {
    const auto& s = seqs[si];
    std::vector<std::size_t> special;
    for (std::size_t i = 0; i < s.size(); ++i)
      if (detail::is_special(s, i, config)) special.push_back(i);
    json entry = {{"id", s.id}, {"length", s.size()}, {"special_positions", special}};
    if (!s.display_tokens.empty()) entry["tokens"] = s.display_tokens;
    seq_list.push_back(entry);
    lengths.push_back(s.size());
    n_tokens += s.size();
    res.archives += archives[si];
    for (const auto& [k, n] : undefined[si]) {
      undefined_total[k] = undefined_total.value(k, std::size_t{0}) + n;
      res.undefined_rows += n;
    }
  }
  json kind_names = json::array();
  for (Kind k : kinds) kind_names.push_back(kind_name(k));
  json dataset = {{"n_sequences", seqs.size()},
                  {"n_tokens", n_tokens},
                  {"filtered_too_long", data.filtered_too_long},
                  {"requested_max_len", run.max_len},
                  {"effective_max_len", max_len}};
  if (!lengths.empty()) {
    dataset["min_length"] = *std::min_element(lengths.begin(), lengths.end());
    dataset["max_length"] = *std::max_element(lengths.begin(), lengths.end());
    dataset["median_length"] = analysis::median(lengths);
  }
  json manifest = {{"command", "extract"},
                   {"versions", detail::versions_json()},
                   {"inputs",
                    {{"config", run.config_path.string()},
                     {"weights", run.weights_path.string()},
                     {"data", run.data_path.string()}}},
                   {"config", config},
                   {"flags", detail::flags_json(run)},
                   {"layers", layers},
                   {"heads", heads},
                   {"kinds", kind_names},
                   {"dataset", dataset},
                   {"undefined_contribution_rows", undefined_total},
                   {"unused_weight_tensors", weights.unused_names()},
                   {"sequences", seq_list}};
  detail::write_text(run.out_dir / "extract_manifest.json", manifest.dump(2) + "\n");
  return res;
}

inline ExtractIndex open_extract(const fs::path& dir) {
  const fs::path path = dir / "extract_manifest.json";
  if (!fs::exists(path)) {
    throw Error("no extract artifacts in " + dir.string() +
                " (missing extract_manifest.json); run `attnscope extract --out " + dir.string() +
                " ...` first");
  }
  ExtractIndex idx;
  idx.dir = dir;
  idx.manifest = detail::read_json(path);
  try {
    const auto& m = idx.manifest;
    idx.max_len = m.at("dataset").at("effective_max_len").get<std::size_t>();
    idx.n_layers = m.at("config").at("n_layers").get<std::size_t>();
    idx.n_heads = m.at("config").at("n_heads").get<std::size_t>();
    idx.layers = m.at("layers").get<std::vector<std::size_t>>();
    idx.heads = m.at("heads").get<std::vector<std::size_t>>();
    for (const auto& k : m.at("kinds")) idx.kinds.push_back(parse_kind(k.get<std::string>()));
    for (const auto& s : m.at("sequences")) {
      ExtractedSequence e;
      e.id = s.at("id").get<std::string>();
      e.length = s.at("length").get<std::size_t>();
      if (s.contains("tokens")) e.tokens = s.at("tokens").get<std::vector<std::string>>();
      e.special.assign(e.length, false);
      for (std::size_t p : s.at("special_positions").get<std::vector<std::size_t>>())
        if (p < e.length) e.special[p] = true;
      idx.sequences.push_back(std::move(e));
    }
  } catch (const json::exception& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
  return idx;
}

/// A stored attention or contribution matrix with its defined-row mask.
struct StoredMatrix {
  Tensor values;
  std::vector<bool> defined;
};

/// Loads one artifact and checks that every defined row sums to 1 within 1e-9.
inline StoredMatrix load_matrix(const ExtractIndex& idx, const std::string& seq_id, Kind k,
                                std::size_t l, std::optional<std::size_t> h) {
  const fs::path path = idx.dir / seq_id / detail::artifact_name(k, l, h);
  if (!fs::exists(path)) {
    throw Error("missing extract artifact " + path.string() + "; rerun `attnscope extract --kind " +
                kind_name(k) + "` covering layer " + std::to_string(l) +
                (h ? " head " + std::to_string(*h) : std::string()));
  }
  auto tensors = archive::read(path);
  auto it = tensors.find("values");
  if (it == tensors.end()) throw FormatError(path.string() + ": no 'values' tensor");
  StoredMatrix m{std::move(it->second), {}};
  if (m.values.rank() != 2 || m.values.dim(0) != m.values.dim(1)) {
    throw FormatError(path.string() + ": expected a square matrix, got " +
                      shape_string(m.values.shape()));
  }
  m.defined.assign(m.values.dim(0), true);
  if (auto d = tensors.find("defined"); d != tensors.end()) {
    if (d->second.numel() != m.defined.size()) throw FormatError(path.string() + ": bad 'defined' mask");
    for (std::size_t j = 0; j < m.defined.size(); ++j) m.defined[j] = d->second[j] != 0.0;
  }
  for (std::size_t j = 0; j < m.values.dim(0); ++j) {
    if (!m.defined[j]) continue;
    double sum = 0.0;
    for (double v : m.values.row(j)) sum += v;
    if (std::abs(sum - 1.0) > 1e-9) {
      throw FormatError(path.string() + ": row " + std::to_string(j) + " sums to " +
                        detail::fmt17(sum) + ", not 1");
    }
  }
  return m;
}

namespace detail {

struct HeadKey {
  std::size_t layer;
  std::optional<std::size_t> head;
};

inline std::vector<HeadKey> head_keys(const ExtractIndex& idx, const AnalysisRun& run, Kind k) {
  const auto layers = select(run.layers, 1, idx.n_layers, "layer");
  const auto heads = select(run.heads, 0, idx.n_heads, "head");
  std::vector<HeadKey> keys;
  for (std::size_t l : layers) {
    if (std::find(idx.layers.begin(), idx.layers.end(), l) == idx.layers.end())
      throw Error("layer " + std::to_string(l) + " was not extracted; rerun extract with it");
    if (!per_head(k)) {
      keys.push_back({l, std::nullopt});
      continue;
    }
    for (std::size_t h : heads) {
      if (std::find(idx.heads.begin(), idx.heads.end(), h) == idx.heads.end())
        throw Error("head " + std::to_string(h) + " was not extracted; rerun extract with it");
      keys.push_back({l, h});
    }
  }
  return keys;
}

inline void require_kind(const ExtractIndex& idx, Kind k) {
  if (!idx.has_kind(k)) {
    throw Error(std::string("kind '") + kind_name(k) + "' was not extracted into " +
                idx.dir.string() + "; rerun `attnscope extract --kind " + kind_name(k) + " ...`");
  }
}

struct HistogramSet {
  std::vector<HeadKey> keys;
  std::vector<analysis::RelPosHistogram> hists;
  std::size_t undefined_rows = 0;
  std::size_t special_rows = 0;
};

inline HistogramSet build_histograms(const ExtractIndex& idx, const AnalysisRun& run, Kind k) {
  require_kind(idx, k);
  HistogramSet out;
  out.keys = head_keys(idx, run, k);
  const std::size_t nseq = idx.sequences.size();
  struct Partial {
    std::vector<analysis::RelPosHistogram> hists;
    std::size_t undefined = 0, special = 0;
  };
  std::vector<Partial> parts(nseq);
  parallel_for(nseq, run.threads, [&](std::size_t si) {
    const auto& s = idx.sequences[si];
    Partial p;
    for (const auto& key : out.keys) {
      analysis::RelPosHistogram h(idx.max_len);
      const auto m = load_matrix(idx, s.id, k, key.layer, key.head);
      for (std::size_t row = 0; row < m.values.dim(0); ++row) {
        if (run.exclude_special && s.special[row]) {
          ++p.special;
          continue;
        }
        if (!m.defined[row]) {
          ++p.undefined;
          continue;
        }
        h.add_row(row, m.values.row(row));
      }
      p.hists.push_back(std::move(h));
    }
    parts[si] = std::move(p);
  });
  for (std::size_t i = 0; i < out.keys.size(); ++i) out.hists.emplace_back(idx.max_len);
  for (const auto& p : parts) {
    for (std::size_t i = 0; i < out.keys.size(); ++i) out.hists[i].merge(p.hists[i]);
    out.undefined_rows += p.undefined;
    out.special_rows += p.special;
  }
  return out;
}

inline json base_manifest(const std::string& command, const ExtractIndex& idx,
                          const AnalysisRun& run) {
  return {{"command", command},
          {"versions", versions_json()},
          {"flags", flags_json(run, idx.manifest.value("flags", json::object()))},
          {"dataset", idx.manifest.at("dataset")}};
}

inline std::string head_label(const std::optional<std::size_t>& h) {
  return h ? std::to_string(*h) : std::string("-1");
}

}  // namespace detail

struct HistogramResult {
  fs::path csv;
  std::vector<fs::path> svgs;
  std::size_t rows = 0;
};

/// CSV columns: layer, head, offset, weight, count, normalized, display.
inline HistogramResult histogram(const AnalysisRun& run, Kind kind) {
  const auto idx = open_extract(run.out_dir);
  const auto set = detail::build_histograms(idx, run, kind);
  HistogramResult res;
  std::ostringstream csv;
  csv << "layer,head,offset,weight,count,normalized,display\n";
  std::map<std::size_t, std::vector<svg::HistogramPanel>> panels;
  json cms = json::array();
  for (std::size_t i = 0; i < set.keys.size(); ++i) {
    const auto& key = set.keys[i];
    const auto& h = set.hists[i];
    const auto norm = h.normalized_values();
    const auto disp = h.display_values();
    for (std::size_t b = 0; b < h.size(); ++b) {
      const int off = h.min_offset() + static_cast<int>(b);
      csv << key.layer << ',' << detail::head_label(key.head) << ',' << off << ','
          << detail::fmt17(h.weight(off)) << ',' << h.count(off) << ',' << detail::fmt17(norm[b])
          << ',' << detail::fmt17(disp[b]) << '\n';
      ++res.rows;
    }
    panels[key.layer].push_back(
        {key.head ? "head " + std::to_string(*key.head) : std::string("layer output"),
         h.min_offset(), disp});
    cms.push_back({{"layer", key.layer},
                   {"head", key.head ? json(*key.head) : json(nullptr)},
                   {"center_of_mass", analysis::center_of_mass(h) ? json(*analysis::center_of_mass(h))
                                                                  : json(nullptr)}});
  }
  const std::string stem = std::string("histogram_") + kind_name(kind);
  res.csv = run.out_dir / (stem + ".csv");
  detail::write_text(res.csv, csv.str());
  for (const auto& [layer, ps] : panels) {
    const fs::path p = run.out_dir / (stem + "_l" + std::to_string(layer) + ".svg");
    detail::write_text(p, svg::histogram_grid(std::string(kind_name(kind)) +
                                                  " histogram, layer " + std::to_string(layer),
                                              ps));
    res.svgs.push_back(p);
  }
  json manifest = detail::base_manifest("histogram", idx, run);
  manifest["kind"] = kind_name(kind);
  manifest["csv_columns"] = {"layer", "head", "offset", "weight", "count", "normalized", "display"};
  manifest["undefined_rows_skipped"] = set.undefined_rows;
  manifest["special_rows_excluded"] = set.special_rows;
  manifest["centers_of_mass"] = cms;
  detail::write_text(run.out_dir / (stem + "_manifest.json"), manifest.dump(2) + "\n");
  return res;
}

struct ComRow {
  Kind kind;
  std::size_t layer;
  std::optional<double> mean_cm;
  std::size_t n_heads;
};

/// Per-layer mean center of mass for each kind; CSV columns:
/// kind, layer, mean_center_of_mass, n_heads.
inline std::vector<ComRow> com(const AnalysisRun& run) {
  const auto idx = open_extract(run.out_dir);
  std::vector<Kind> kinds = run.kinds;
  if (kinds.empty()) {
    for (Kind k : {Kind::Attention, Kind::InputContribution})
      if (idx.has_kind(k)) kinds.push_back(k);
  }
  if (kinds.empty()) throw Error("no attention or input-contribution artifacts to summarize");
  std::vector<ComRow> rows;
  std::vector<svg::Series> series;
  json skipped = json::object();
  for (Kind k : kinds) {
    const auto set = detail::build_histograms(idx, run, k);
    std::map<std::size_t, std::vector<double>> per_layer;
    for (std::size_t i = 0; i < set.keys.size(); ++i) {
      auto& bucket = per_layer[set.keys[i].layer];
      if (auto cm = analysis::center_of_mass(set.hists[i])) bucket.push_back(*cm);
    }
    svg::Series s{kind_name(k), {}};
    for (const auto& [layer, cms] : per_layer) {
      const auto mean = analysis::layer_center_of_mass(cms);
      rows.push_back({k, layer, mean, cms.size()});
      if (mean) s.points.emplace_back(static_cast<double>(layer), *mean);
    }
    series.push_back(std::move(s));
    skipped[kind_name(k)] = {{"undefined_rows_skipped", set.undefined_rows},
                             {"special_rows_excluded", set.special_rows}};
  }
  std::ostringstream csv;
  csv << "kind,layer,mean_center_of_mass,n_heads\n";
  for (const auto& r : rows)
    csv << kind_name(r.kind) << ',' << r.layer << ',' << detail::opt17(r.mean_cm) << ','
        << r.n_heads << '\n';
  detail::write_text(run.out_dir / "com.csv", csv.str());
  detail::write_text(run.out_dir / "com.svg",
                     svg::line_chart("Mean center of mass per layer", "layer",
                                     "center of mass (tokens)", series));
  json manifest = detail::base_manifest("com", idx, run);
  manifest["csv_columns"] = {"kind", "layer", "mean_center_of_mass", "n_heads"};
  manifest["skipped"] = skipped;
  detail::write_text(run.out_dir / "com_manifest.json", manifest.dump(2) + "\n");
  return rows;
}

/// Per-head mean Pearson/Spearman between attention rows and the rows of
/// `source` (prev-contribution or input-contribution).
inline std::vector<analysis::HeadCorrelationSummary> correlate(const AnalysisRun& run, Kind source) {
  if (source != Kind::PrevContribution && source != Kind::InputContribution) {
    throw InputError("correlate --kind must be prev-contribution or input-contribution");
  }
  const auto idx = open_extract(run.out_dir);
  detail::require_kind(idx, Kind::Attention);
  detail::require_kind(idx, source);
  const auto keys = detail::head_keys(idx, run, source);
  const std::size_t nseq = idx.sequences.size();
  std::vector<std::vector<analysis::CorrelationAccumulator>> parts(nseq);
  std::vector<std::size_t> special(nseq, 0);
  detail::parallel_for(nseq, run.threads, [&](std::size_t si) {
    const auto& s = idx.sequences[si];
    std::vector<analysis::CorrelationAccumulator> accs(keys.size());
    for (std::size_t i = 0; i < keys.size(); ++i) {
      const auto a = load_matrix(idx, s.id, Kind::Attention, keys[i].layer, keys[i].head);
      const auto c = load_matrix(idx, s.id, source, keys[i].layer, keys[i].head);
      for (std::size_t row = 0; row < a.values.dim(0); ++row) {
        if (run.exclude_special && s.special[row]) {
          ++special[si];
          continue;
        }
        if (!c.defined[row] || a.values.dim(1) < 2) {
          accs[i].skip();
          continue;
        }
        accs[i].add(a.values.row(row), c.values.row(row));
      }
    }
    parts[si] = std::move(accs);
  });
  std::vector<analysis::CorrelationAccumulator> total(keys.size());
  for (const auto& p : parts)
    for (std::size_t i = 0; i < keys.size(); ++i) total[i].add_sequence(p[i]);

  const auto mode = run.per_sequence_mean ? analysis::Averaging::PerSequence
                                          : analysis::Averaging::PerToken;
  std::vector<analysis::HeadCorrelationSummary> out;
  std::ostringstream csv;
  csv << "layer,head,mean_pearson,mean_spearman,n_pairs,n_skipped\n";
  std::map<std::size_t, std::pair<std::vector<double>, std::vector<double>>> by_layer;
  std::size_t skipped_total = 0;
  for (std::size_t i = 0; i < keys.size(); ++i) {
    auto s = total[i].summary(keys[i].layer, *keys[i].head, mode);
    csv << s.layer << ',' << s.head << ',' << detail::opt17(s.mean_pearson) << ','
        << detail::opt17(s.mean_spearman) << ',' << s.n_pairs << ',' << s.n_skipped << '\n';
    auto& [pv, sv] = by_layer[s.layer];
    if (s.mean_pearson) pv.push_back(*s.mean_pearson);
    if (s.mean_spearman) sv.push_back(*s.mean_spearman);
    skipped_total += s.n_skipped;
    out.push_back(s);
  }
  const std::string stem = std::string("correlate_") + kind_name(source);
  detail::write_text(run.out_dir / (stem + ".csv"), csv.str());
  std::vector<svg::Category> pc, sc;
  for (const auto& [layer, vals] : by_layer) {
    pc.push_back({std::to_string(layer), vals.first});
    sc.push_back({std::to_string(layer), vals.second});
  }
  detail::write_text(run.out_dir / (stem + "_pearson.svg"),
                     svg::strip_chart("Pearson: attention vs " + std::string(kind_name(source)),
                                      "mean Pearson per head", pc));
  detail::write_text(run.out_dir / (stem + "_spearman.svg"),
                     svg::strip_chart("Spearman: attention vs " + std::string(kind_name(source)),
                                      "mean Spearman per head", sc));
  json manifest = detail::base_manifest("correlate", idx, run);
  manifest["kind"] = kind_name(source);
  manifest["csv_columns"] = {"layer", "head", "mean_pearson", "mean_spearman", "n_pairs", "n_skipped"};
  manifest["averaging"] = run.per_sequence_mean ? "per-sequence" : "per-token";
  manifest["skipped_pairs"] = skipped_total;
  std::size_t special_total = 0;
  for (std::size_t n : special) special_total += n;
  manifest["special_rows_excluded"] = special_total;
  detail::write_text(run.out_dir / (stem + "_manifest.json"), manifest.dump(2) + "\n");
  return out;
}

/// Attention and input-contribution heatmaps of one head for one sequence.
inline fs::path maps(const AnalysisRun& run) {
  const auto idx = open_extract(run.out_dir);
  auto it = std::find_if(idx.sequences.begin(), idx.sequences.end(),
                         [&](const ExtractedSequence& s) { return s.id == run.seq_id; });
  if (it == idx.sequences.end()) {
    std::string ids;
    for (const auto& s : idx.sequences) ids += (ids.empty() ? "" : ", ") + s.id;
    throw InputError("unknown sequence id '" + run.seq_id + "'; available: " + ids);
  }
  detail::require_kind(idx, Kind::Attention);
  detail::require_kind(idx, Kind::InputContribution);
  const auto attn = load_matrix(idx, it->id, Kind::Attention, run.map_layer, run.map_head);
  const auto contrib = load_matrix(idx, it->id, Kind::InputContribution, run.map_layer, run.map_head);
  std::vector<std::string> tokens = it->tokens;
  if (tokens.size() != it->length) {
    tokens.clear();
    for (std::size_t i = 0; i < it->length; ++i) tokens.push_back(std::to_string(i));
  }
  const std::string where = "layer " + std::to_string(run.map_layer) + ", head " +
                            std::to_string(run.map_head);
  const fs::path path = run.out_dir / ("maps_" + it->id + "_l" + std::to_string(run.map_layer) +
                                       "_h" + std::to_string(run.map_head) + ".svg");
  detail::write_text(path, svg::heatmap_stack(it->id + " (" + where + ")", tokens,
                                              {{"attention", attn.values},
                                               {"input contribution", contrib.values}},
                                              run.shared_scale));
  return path;
}

/// Writes a small random model, its config and a synthetic dataset.
inline void make_toy(const fs::path& dir, std::uint64_t seed, std::size_t n_sequences = 6) {
  EncoderConfig c;
  c.n_layers = 2;
  c.n_heads = 2;
  c.d_e = 16;
  c.d_q = 8;
  c.d_v = 8;
  c.d_ff = 32;
  c.vocab_size = 50;
  c.max_position = 16;
  c.type_vocab_size = 2;
  c.special_token_ids = {1, 2};
  const auto w = random_weights(c, seed, 0.5);
  fs::create_directories(dir);
  archive::write(dir / "weights.hta", w.to_tensors(), archive::DType::F32);
  detail::write_text(dir / "config.json", json(c).dump(2) + "\n");
  std::mt19937_64 rng(seed ^ 0x9e3779b97f4a7c15ULL);
  std::ostringstream data;
  for (std::size_t s = 0; s < n_sequences; ++s) {
    const std::size_t len = 3 + rng() % 6;  // 3..8
    std::vector<std::size_t> ids{1}, seg{0};
    std::vector<std::string> toks{"[CLS]"};
    const std::size_t sep = len / 2;
    for (std::size_t i = 1; i + 1 < len; ++i) {
      const std::size_t id = 3 + rng() % (c.vocab_size - 3);
      ids.push_back(i == sep ? 2 : id);
      toks.push_back(i == sep ? "[SEP]" : "w" + std::to_string(id));
      seg.push_back(i <= sep ? 0 : 1);
    }
    ids.push_back(2);
    toks.push_back("[SEP]");
    seg.push_back(len > 2 ? 1 : 0);
    data << json({{"id", "s" + std::to_string(s)}, {"token_ids", ids}, {"segment_ids", seg},
                  {"tokens", toks}})
                .dump()
         << "\n";
  }
  detail::write_text(dir / "data.jsonl", data.str());
}

}  // namespace attnscope::run
