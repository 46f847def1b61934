#pragma once

#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "attnscope/commands.hpp"

namespace attnscope::cli {

/// Parses "1,3,5-7" into {1,3,5,6,7}.
inline std::vector<std::size_t> parse_index_list(const std::string& text) {
  std::vector<std::size_t> out;
  std::size_t pos = 0;
  while (pos <= text.size()) {
    const std::size_t comma = std::min(text.find(',', pos), text.size());
    const std::string item = text.substr(pos, comma - pos);
    if (item.empty()) throw InputError("empty entry in index list '" + text + "'");
    try {
      const std::size_t dash = item.find('-');
      if (dash == std::string::npos) {
        out.push_back(std::stoul(item));
      } else {
        const std::size_t lo = std::stoul(item.substr(0, dash));
        const std::size_t hi = std::stoul(item.substr(dash + 1));
        if (hi < lo) throw InputError("descending range '" + item + "'");
        for (std::size_t v = lo; v <= hi; ++v) out.push_back(v);
      }
    } catch (const std::logic_error&) {
      throw InputError("bad index list entry '" + item + "'");
    }
    pos = comma + 1;
  }
  return out;
}

inline std::vector<run::Kind> parse_kinds(const std::string& text) {
  std::vector<run::Kind> out;
  std::size_t pos = 0;
  while (pos <= text.size()) {
    const std::size_t comma = std::min(text.find(',', pos), text.size());
    out.push_back(run::parse_kind(text.substr(pos, comma - pos)));
    pos = comma + 1;
  }
  return out;
}

/// Entry point shared by the attnscope binary and the tests.
inline int run_cli(int argc, const char* const* argv) {
  CLI::App app{"Attention and Hidden Token Attribution analysis for BERT-style encoders",
               "attnscope"};
  app.require_subcommand(1);

  run::AnalysisRun r;
  std::string layers, heads, kinds;
  std::uint64_t seed = 1;

  auto common = [&](CLI::App* sub) {
    sub->add_option("--out", r.out_dir, "Output (and extract artifact) directory")->required();
    sub->add_option("--layers", layers, "Layers to process, 1-based, e.g. 1,2,5-8 (default all)");
    sub->add_option("--heads", heads, "Heads to process, 0-based (default all)");
    sub->add_option("--threads", r.threads, "Worker threads")->check(CLI::PositiveNumber);
  };
  auto special = [&](CLI::App* sub) {
    sub->add_flag("--exclude-special", r.exclude_special,
                  "Skip rows whose attending token is [CLS]/[SEP]");
  };

  auto* extract = app.add_subcommand("extract", "Run the encoder and store attention/contribution matrices");
  common(extract);
  extract->add_option("--config", r.config_path, "Model config JSON")->required();
  extract->add_option("--weights", r.weights_path, "Weight archive (.hta)")->required();
  extract->add_option("--data", r.data_path, "JSON-Lines dataset")->required();
  extract->add_option("--max-len", r.max_len, "Drop sequences longer than this (default 64)");
  extract->add_option("--kind", kinds,
                      "Comma-separated kinds (default attention,prev-contribution,input-contribution)");
  extract->add_flag("--e0-post-norm", r.e0_post_norm,
                    "Attribute input contribution to the normalized embeddings");
  extract->add_flag("--allow-nonidentifiable", r.allow_nonidentifiable,
                    "Keep sequences longer than the head dimension d_v");

  auto* hist = app.add_subcommand("histogram", "Relative-position histograms per layer and head");
  common(hist);
  special(hist);
  hist->add_option("--kind", kinds, "Kind to aggregate (default attention)");

  auto* com = app.add_subcommand("com", "Mean center of mass per layer");
  common(com);
  special(com);
  com->add_option("--kind", kinds, "Kinds to compare (default attention,input-contribution)");

  auto* corr = app.add_subcommand("correlate", "Per-head correlation of attention and contribution");
  common(corr);
  special(corr);
  corr->add_option("--kind", kinds, "prev-contribution (default) or input-contribution");
  corr->add_flag("--per-sequence-mean", r.per_sequence_mean,
                 "Average correlations within each sequence first");

  auto* maps = app.add_subcommand("maps", "Attention vs input-contribution heatmaps for one sequence");
  maps->add_option("--out", r.out_dir, "Extract artifact directory")->required();
  maps->add_option("--seq", r.seq_id, "Sequence id")->required();
  maps->add_option("--layer", r.map_layer, "Layer (1-based)")->required();
  maps->add_option("--head", r.map_head, "Head (0-based)")->required();
  maps->add_flag("--shared-scale", r.shared_scale, "Use one color scale for both maps");

  auto* toy = app.add_subcommand("make-toy", "Write a small random model and synthetic dataset");
  toy->add_option("--out", r.out_dir, "Destination directory")->required();
  toy->add_option("--seed", seed, "Random seed");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  }

  try {
    if (!layers.empty()) r.layers = parse_index_list(layers);
    if (!heads.empty()) r.heads = parse_index_list(heads);
    if (!kinds.empty()) r.kinds = parse_kinds(kinds);

    if (*extract) {
      const auto res = run::extract(r);
      std::cout << "extracted " << res.archives << " archives for " << res.sequences
                << " sequences (" << res.filtered_too_long << " filtered, max length "
                << res.effective_max_len << ")\n";
    } else if (*hist) {
      if (r.kinds.size() > 1) throw InputError("histogram takes a single --kind");
      const auto kind = r.kinds.empty() ? run::Kind::Attention : r.kinds.front();
      const auto res = run::histogram(r, kind);
      std::cout << "wrote " << res.csv.string() << " and " << res.svgs.size() << " SVG files\n";
    } else if (*com) {
      const auto rows = run::com(r);
      std::cout << "wrote " << (r.out_dir / "com.csv").string() << " (" << rows.size()
                << " rows)\n";
    } else if (*corr) {
      if (r.kinds.size() > 1) throw InputError("correlate takes a single --kind");
      const auto kind = r.kinds.empty() ? run::Kind::PrevContribution : r.kinds.front();
      const auto rows = run::correlate(r, kind);
      std::cout << "wrote correlations for " << rows.size() << " heads\n";
    } else if (*maps) {
      const auto svg = run::maps(r);
      std::cout << "wrote " << svg.string() << "\n";
    } else if (*toy) {
      run::make_toy(r.out_dir, seed);
      std::cout << "wrote toy model to " << r.out_dir.string() << "\n";
    }
  } catch (const std::exception& e) {
    std::cerr << "attnscope: error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}

inline int run_cli(const std::vector<std::string>& args) {
  std::vector<const char*> argv{"attnscope"};
  for (const auto& a : args) argv.push_back(a.c_str());
  return run_cli(static_cast<int>(argv.size()), argv.data());
}

}  // namespace attnscope::cli
