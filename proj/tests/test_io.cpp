#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include "attnscope/cli.hpp"
#include "support.hpp"

using namespace attnscope;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

fs::path fresh_dir(const std::string& name) {
  auto p = fs::temp_directory_path() / ("attnscope_test_io_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  std::ostringstream s;
  s << f.rdbuf();
  return s.str();
}

void write_file(const fs::path& p, const std::string& text) {
  std::ofstream f(p, std::ios::binary);
  f << text;
}

std::vector<std::vector<std::string>> read_csv(const fs::path& p) {
  std::ifstream f(p);
  std::vector<std::vector<std::string>> rows;
  std::string line;
  while (std::getline(f, line)) {
    std::vector<std::string> cells;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) cells.push_back(cell);
    if (!line.empty() && line.back() == ',') cells.emplace_back();
    rows.push_back(std::move(cells));
  }
  return rows;
}

std::string seq_line(const std::string& id, std::size_t len, std::size_t first_id = 3) {
  json ids = json::array(), seg = json::array();
  for (std::size_t i = 0; i < len; ++i) {
    ids.push_back(first_id + i % 7);
    seg.push_back(0);
  }
  return json({{"id", id}, {"token_ids", ids}, {"segment_ids", seg}}).dump() + "\n";
}

// Every file under `dir` with its bytes, keyed by relative path.
std::map<std::string, std::string> snapshot(const fs::path& dir) {
  std::map<std::string, std::string> out;
  for (const auto& e : fs::recursive_directory_iterator(dir))
    if (e.is_regular_file()) out[fs::relative(e.path(), dir).string()] = slurp(e.path());
  return out;
}

// Writes an extract directory by hand: one head, one layer, caller-built rows.
void write_synthetic_extract(const fs::path& dir, const std::vector<Tensor>& attention,
                             std::size_t max_len, bool inject_contribution) {
  fs::create_directories(dir);
  json seqs = json::array();
  for (std::size_t s = 0; s < attention.size(); ++s) {
    const std::string id = "q" + std::to_string(s);
    archive::write(dir / id / "attention_l1_h0.hta", {{"values", attention[s]}});
    if (inject_contribution) {
      Tensor defined({attention[s].dim(0)}, std::vector<double>(attention[s].dim(0), 1.0));
      archive::write(dir / id / "prev-contribution_l1_h0.hta",
                     {{"values", attention[s]}, {"defined", defined}});
    }
    seqs.push_back({{"id", id}, {"length", attention[s].dim(0)},
                    {"special_positions", json::array()}});
  }
  json kinds = {"attention"};
  if (inject_contribution) kinds.push_back("prev-contribution");
  json m = {{"dataset", {{"effective_max_len", max_len}}},
            {"config", {{"n_layers", 1}, {"n_heads", 1}}},
            {"layers", {1}},
            {"heads", {0}},
            {"kinds", kinds},
            {"sequences", seqs}};
  write_file(dir / "extract_manifest.json", m.dump(2));
}

Tensor left_neighbour(std::size_t len) {
  Tensor t({len, len});
  t.at(0, 0) = 1.0;
  for (std::size_t p = 1; p < len; ++p) t.at(p, p - 1) = 1.0;
  return t;
}

Tensor uniform(std::size_t len) {
  return Tensor({len, len}, std::vector<double>(len * len, 1.0 / static_cast<double>(len)));
}

struct Toy {
  fs::path dir;
  run::AnalysisRun run;
};

Toy make_toy_run(const std::string& name, std::uint64_t seed = 3) {
  Toy t;
  t.dir = fresh_dir(name);
  run::make_toy(t.dir / "model", seed);
  t.run.config_path = t.dir / "model" / "config.json";
  t.run.weights_path = t.dir / "model" / "weights.hta";
  t.run.data_path = t.dir / "model" / "data.jsonl";
  t.run.out_dir = t.dir / "out";
  return t;
}

}  // namespace

TEST(Dataset, EmptyFileGivesEmptyListAndWarning) {
  const auto dir = fresh_dir("empty");
  write_file(dir / "d.jsonl", "");
  const auto d = load_sequences(dir / "d.jsonl", 64);
  EXPECT_TRUE(d.sequences.empty());
  EXPECT_EQ(d.warnings.size(), 1u);
}

TEST(Dataset, ValidLineAndLengthFilter) {
  const auto dir = fresh_dir("filter");
  write_file(dir / "d.jsonl", seq_line("a", 6) + "\n" + seq_line("b", 65) + seq_line("c", 64));
  const auto d = load_sequences(dir / "d.jsonl", 64);
  ASSERT_EQ(d.sequences.size(), 2u);
  EXPECT_EQ(d.sequences[0].id, "a");
  EXPECT_EQ(d.sequences[0].size(), 6u);
  EXPECT_EQ(d.sequences[1].size(), 64u);
  EXPECT_EQ(d.filtered_too_long, 1u);
}

TEST(Dataset, MalformedLineReportsLineNumber) {
  const auto dir = fresh_dir("malformed");
  write_file(dir / "d.jsonl", seq_line("a", 3) + seq_line("b", 3) + "{\"id\": \"c\", \n");
  try {
    load_sequences(dir / "d.jsonl", 64);
    FAIL() << "expected FormatError";
  } catch (const FormatError& e) {
    EXPECT_NE(std::string(e.what()).find("line 3"), std::string::npos) << e.what();
  }
}

TEST(Dataset, ArrayLengthMismatchNamesId) {
  const auto dir = fresh_dir("mismatch");
  write_file(dir / "d.jsonl", R"({"id": "pair-7", "token_ids": [1, 2, 3], "segment_ids": [0, 0]})");
  try {
    load_sequences(dir / "d.jsonl", 64);
    FAIL() << "expected InputError";
  } catch (const InputError& e) {
    EXPECT_NE(std::string(e.what()).find("pair-7"), std::string::npos) << e.what();
  }
}

TEST(Dataset, RejectsDuplicateAndUnsafeIds) {
  const auto dir = fresh_dir("ids");
  write_file(dir / "dup.jsonl", seq_line("a", 3) + seq_line("a", 4));
  EXPECT_THROW(load_sequences(dir / "dup.jsonl", 64), InputError);
  write_file(dir / "bad.jsonl", seq_line("../x", 3));
  EXPECT_THROW(load_sequences(dir / "bad.jsonl", 64), InputError);
  EXPECT_THROW(load_sequences(dir / "missing.jsonl", 64), Error);
}

TEST(Extract, AttentionOnlyArchiveCount) {
  auto t = make_toy_run("count");
  write_file(t.dir / "two.jsonl", seq_line("x", 5) + seq_line("y", 7));
  t.run.data_path = t.dir / "two.jsonl";
  t.run.kinds = {run::Kind::Attention};
  const auto res = run::extract(t.run);
  EXPECT_EQ(res.sequences, 2u);
  EXPECT_EQ(res.archives, 2u * 2u * 2u);
  std::size_t files = 0;
  for (const auto& e : fs::recursive_directory_iterator(t.run.out_dir))
    files += e.path().extension() == ".hta";
  EXPECT_EQ(files, 8u);
  EXPECT_TRUE(fs::exists(t.run.out_dir / "x" / "attention_l2_h1.hta"));
}

TEST(Extract, RerunAndThreadCountGiveIdenticalBytes) {
  auto t = make_toy_run("determinism");
  t.run.kinds = {run::Kind::Attention, run::Kind::PrevContribution, run::Kind::InputContribution,
                 run::Kind::HiddenContribution};
  run::extract(t.run);
  const auto first = snapshot(t.run.out_dir);
  fs::remove_all(t.run.out_dir);
  t.run.threads = 3;
  run::extract(t.run);
  EXPECT_EQ(snapshot(t.run.out_dir), first);
  EXPECT_EQ(first.size(), 6u * (2u * 2u * 3u + 2u) + 1u);
}

TEST(Extract, StoredMatricesRoundTripBitExactly) {
  auto t = make_toy_run("roundtrip");
  t.run.kinds = {run::Kind::Attention, run::Kind::InputContribution, run::Kind::HiddenContribution};
  run::extract(t.run);
  const auto idx = run::open_extract(t.run.out_dir);
  const auto cfg = load_config(t.run.config_path);
  const auto w = load_weights(t.run.weights_path, cfg);
  const auto data = load_sequences(t.run.data_path, 64);
  for (const auto& seq : data.sequences) {
    const auto trace = forward(seq, w);
    for (std::size_t l = 1; l <= 2; ++l) {
      for (std::size_t h = 0; h < 2; ++h) {
        EXPECT_EQ(run::load_matrix(idx, seq.id, run::Kind::Attention, l, h).values,
                  trace.attention(l, h));
        EXPECT_EQ(run::load_matrix(idx, seq.id, run::Kind::InputContribution, l, h).values,
                  attribution::input_contribution(trace, l, h).values);
      }
      EXPECT_EQ(run::load_matrix(idx, seq.id, run::Kind::HiddenContribution, l, std::nullopt).values,
                attribution::hidden_contribution(trace, l).values);
    }
  }
}

TEST(Extract, LoadRejectsRowsThatDoNotSumToOne) {
  const auto dir = fresh_dir("badrows");
  Tensor bad = uniform(3);
  bad.at(1, 1) += 1e-6;
  write_synthetic_extract(dir, {bad}, 3, false);
  const auto idx = run::open_extract(dir);
  EXPECT_THROW(run::load_matrix(idx, "q0", run::Kind::Attention, 1, 0), FormatError);
}

TEST(Extract, ManifestRecordsFlagsAndDatasetStats) {
  auto t = make_toy_run("manifest");
  write_file(t.dir / "d.jsonl", seq_line("a", 3) + seq_line("b", 6) + seq_line("c", 5) +
                                    seq_line("d", 12));
  t.run.data_path = t.dir / "d.jsonl";
  t.run.kinds = {run::Kind::Attention};
  const auto res = run::extract(t.run);
  EXPECT_EQ(res.effective_max_len, 8u);  // clamped to d_v
  EXPECT_EQ(res.filtered_too_long, 1u);
  const auto m = json::parse(slurp(t.run.out_dir / "extract_manifest.json"));
  EXPECT_EQ(m.at("dataset").at("median_length"), 5.0);
  EXPECT_EQ(m.at("dataset").at("min_length"), 3);
  EXPECT_EQ(m.at("dataset").at("max_length"), 6);
  EXPECT_EQ(m.at("dataset").at("filtered_too_long"), 1);
  for (const char* flag : {"max_len", "e0_post_norm", "exclude_special", "allow_nonidentifiable",
                           "per_sequence_mean", "shared_scale", "self_offset_included",
                           "degenerate_pairs", "contribution_norm", "residual_order"})
    EXPECT_TRUE(m.at("flags").contains(flag)) << flag;
  const auto text = slurp(t.run.out_dir / "extract_manifest.json");
  EXPECT_EQ(text.find("time"), std::string::npos);

  fs::remove_all(t.run.out_dir);
  t.run.allow_nonidentifiable = true;
  EXPECT_EQ(run::extract(t.run).filtered_too_long, 0u);
}

TEST(Histogram, LeftNeighbourPeakAndSchema) {
  const auto dir = fresh_dir("hist_left");
  std::vector<Tensor> attn = {left_neighbour(4), left_neighbour(6), left_neighbour(3)};
  write_synthetic_extract(dir, attn, 6, false);
  run::AnalysisRun r;
  r.out_dir = dir;
  const auto res = run::histogram(r, run::Kind::Attention);
  const auto rows = read_csv(res.csv);
  ASSERT_EQ(rows.size(), 1u + 11u);
  for (const auto& row : rows) EXPECT_EQ(row.size(), 7u);
  EXPECT_EQ(rows[0], (std::vector<std::string>{"layer", "head", "offset", "weight", "count",
                                               "normalized", "display"}));
  double best = -1.0;
  int peak = 0;
  for (std::size_t i = 1; i < rows.size(); ++i) {
    const double d = std::stod(rows[i][6]);
    if (d > best) {
      best = d;
      peak = std::stoi(rows[i][2]);
    }
    if (std::stoi(rows[i][2]) == -1) {
      EXPECT_EQ(std::stod(rows[i][3]), 4 + 6 + 3 - 3);
    }
  }
  EXPECT_EQ(peak, -1);
  EXPECT_EQ(res.svgs.size(), 1u);
  EXPECT_TRUE(fs::exists(dir / "histogram_attention_l1.svg"));
}

TEST(Histogram, UniformDataGivesFlatDisplay) {
  const auto dir = fresh_dir("hist_uniform");
  write_synthetic_extract(dir, {uniform(5), uniform(5)}, 5, false);
  run::AnalysisRun r;
  r.out_dir = dir;
  auto rows = read_csv(run::histogram(r, run::Kind::Attention).csv);
  for (std::size_t i = 1; i < rows.size(); ++i) EXPECT_NEAR(std::stod(rows[i][6]), 1.0, 1e-12);

  // 1/4 sums without rounding, so the flat row is exact.
  write_synthetic_extract(dir, {uniform(4), uniform(4), uniform(4)}, 4, false);
  rows = read_csv(run::histogram(r, run::Kind::Attention).csv);
  ASSERT_EQ(rows.size(), 1u + 7u);
  for (std::size_t i = 1; i < rows.size(); ++i) EXPECT_EQ(std::stod(rows[i][6]), 1.0);
}

TEST(Histogram, MissingArtifactsGiveActionableError) {
  const auto dir = fresh_dir("hist_missing");
  run::AnalysisRun r;
  r.out_dir = dir;
  try {
    run::histogram(r, run::Kind::Attention);
    FAIL() << "expected Error";
  } catch (const Error& e) {
    EXPECT_NE(std::string(e.what()).find("attnscope extract"), std::string::npos) << e.what();
  }
  write_synthetic_extract(dir, {uniform(3)}, 3, false);
  EXPECT_THROW(run::histogram(r, run::Kind::InputContribution), Error);
}

TEST(Com, SymmetricDataGivesZeroAndTwoKindsGiveTwoSeries) {
  const auto dir = fresh_dir("com_sym");
  write_synthetic_extract(dir, {uniform(4), uniform(6)}, 6, true);
  run::AnalysisRun r;
  r.out_dir = dir;
  r.kinds = {run::Kind::Attention, run::Kind::PrevContribution};
  const auto rows = run::com(r);
  ASSERT_EQ(rows.size(), 2u);
  for (const auto& row : rows) EXPECT_NEAR(*row.mean_cm, 0.0, 1e-15);
  const auto csv = read_csv(dir / "com.csv");
  ASSERT_EQ(csv.size(), 3u);
  EXPECT_EQ(csv[1][0], "attention");
  EXPECT_EQ(csv[2][0], "prev-contribution");
  const auto svg = slurp(dir / "com.svg");
  EXPECT_NE(svg.find("attention"), std::string::npos);
  EXPECT_NE(svg.find("prev-contribution"), std::string::npos);
}

TEST(Com, MatchesRecomputationOnToyModel) {
  auto t = make_toy_run("com_toy");
  run::extract(t.run);
  const auto rows = run::com(t.run);
  const auto cfg = load_config(t.run.config_path);
  const auto w = load_weights(t.run.weights_path, cfg);
  const auto data = load_sequences(t.run.data_path, 8);
  for (const auto& row : rows) {
    std::vector<double> cms;
    for (std::size_t h = 0; h < 2; ++h) {
      analysis::RelPosHistogram hist(8);
      for (const auto& seq : data.sequences) {
        const auto trace = forward(seq, w);
        const Tensor m = row.kind == run::Kind::Attention
                             ? trace.attention(row.layer, h)
                             : attribution::input_contribution(trace, row.layer, h).values;
        for (std::size_t p = 0; p < seq.size(); ++p) hist.add_row(p, m.row(p));
      }
      cms.push_back(*analysis::center_of_mass(hist));
    }
    EXPECT_NEAR(*row.mean_cm, (cms[0] + cms[1]) / 2.0, 1e-12);
  }
  EXPECT_EQ(rows.size(), 4u);
}

TEST(Correlate, InjectedContributionGivesOne) {
  const auto dir = fresh_dir("corr_inject");
  write_synthetic_extract(dir, {left_neighbour(4), left_neighbour(5)}, 5, true);
  run::AnalysisRun r;
  r.out_dir = dir;
  const auto s = run::correlate(r, run::Kind::PrevContribution);
  ASSERT_EQ(s.size(), 1u);
  EXPECT_NEAR(*s[0].mean_pearson, 1.0, 1e-15);
  EXPECT_NEAR(*s[0].mean_spearman, 1.0, 1e-15);
  EXPECT_EQ(s[0].n_pairs + s[0].n_skipped, 9u);
}

TEST(Correlate, UniformRowsAreSkippedAndCounted) {
  const auto dir = fresh_dir("corr_uniform");
  write_synthetic_extract(dir, {uniform(4), left_neighbour(3)}, 4, true);
  run::AnalysisRun r;
  r.out_dir = dir;
  const auto s = run::correlate(r, run::Kind::PrevContribution);
  EXPECT_EQ(s[0].n_skipped, 4u);
  EXPECT_EQ(s[0].n_pairs, 3u);
  const auto m = json::parse(slurp(dir / "correlate_prev-contribution_manifest.json"));
  EXPECT_EQ(m.at("skipped_pairs"), 4);
}

TEST(Correlate, MatchesRecomputationAndCountsTokens) {
  auto t = make_toy_run("corr_toy");
  run::extract(t.run);
  const auto cfg = load_config(t.run.config_path);
  const auto w = load_weights(t.run.weights_path, cfg);
  const auto data = load_sequences(t.run.data_path, 8);
  std::size_t tokens = 0;
  for (const auto& s : data.sequences) tokens += s.size();
  for (auto kind : {run::Kind::PrevContribution, run::Kind::InputContribution}) {
    const auto out = run::correlate(t.run, kind);
    ASSERT_EQ(out.size(), 4u);
    for (const auto& s : out) {
      double sp = 0.0, ss = 0.0;
      std::size_t n = 0;
      for (const auto& seq : data.sequences) {
        const auto trace = forward(seq, w);
        const auto c = kind == run::Kind::PrevContribution
                           ? attribution::previous_layer_contribution(trace, s.layer, s.head)
                           : attribution::input_contribution(trace, s.layer, s.head);
        for (std::size_t j = 0; j < seq.size(); ++j) {
          const auto p = analysis::pearson(trace.attention(s.layer, s.head).row(j), c.values.row(j));
          const auto r = analysis::spearman(trace.attention(s.layer, s.head).row(j), c.values.row(j));
          if (!p) continue;
          sp += *p;
          ss += *r;
          ++n;
        }
      }
      EXPECT_EQ(s.n_pairs, n);
      EXPECT_EQ(s.n_pairs + s.n_skipped, tokens);
      EXPECT_NEAR(*s.mean_pearson, sp / static_cast<double>(n), 1e-12);
      EXPECT_NEAR(*s.mean_spearman, ss / static_cast<double>(n), 1e-12);
    }
  }
}

TEST(Correlate, ExcludeSpecialDropsSpecialRows) {
  auto t = make_toy_run("corr_special");
  run::extract(t.run);
  const auto all = run::correlate(t.run, run::Kind::PrevContribution);
  t.run.exclude_special = true;
  const auto some = run::correlate(t.run, run::Kind::PrevContribution);
  const auto idx = run::open_extract(t.run.out_dir);
  std::size_t special = 0;
  for (const auto& s : idx.sequences)
    for (bool b : s.special) special += b;
  EXPECT_GT(special, 0u);
  EXPECT_EQ(all[0].n_pairs + all[0].n_skipped, some[0].n_pairs + some[0].n_skipped + special);
}

TEST(Maps, UnknownIdListsAvailableIds) {
  auto t = make_toy_run("maps_unknown");
  run::extract(t.run);
  t.run.seq_id = "nope";
  try {
    run::maps(t.run);
    FAIL() << "expected InputError";
  } catch (const InputError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("s0"), std::string::npos) << msg;
    EXPECT_NE(msg.find("s5"), std::string::npos) << msg;
  }
}

TEST(Maps, SingleTokenAndStableOutput) {
  auto t = make_toy_run("maps_single");
  write_file(t.dir / "one.jsonl",
             R"({"id": "solo", "token_ids": [7], "segment_ids": [0], "tokens": ["hello"]})" "\n");
  t.run.data_path = t.dir / "one.jsonl";
  run::extract(t.run);
  const auto idx = run::open_extract(t.run.out_dir);
  EXPECT_EQ(run::load_matrix(idx, "solo", run::Kind::Attention, 1, 0).values,
            Tensor::from_rows({{1.0}}));
  EXPECT_EQ(run::load_matrix(idx, "solo", run::Kind::InputContribution, 1, 0).values,
            Tensor::from_rows({{1.0}}));
  t.run.seq_id = "solo";
  const auto path = run::maps(t.run);
  const auto first = slurp(path);
  EXPECT_NE(first.find("hello"), std::string::npos);
  EXPECT_NE(first.find("<svg"), std::string::npos);
  EXPECT_EQ(slurp(run::maps(t.run)), first);
}

TEST(Cli, FullPipelineInProcess) {
  const auto dir = fresh_dir("cli");
  const std::string m = (dir / "m").string(), o = (dir / "o").string();
  ASSERT_EQ(cli::run_cli({"make-toy", "--out", m, "--seed", "5"}), 0);
  ASSERT_EQ(cli::run_cli({"extract", "--config", m + "/config.json", "--weights",
                          m + "/weights.hta", "--data", m + "/data.jsonl", "--out", o, "--kind",
                          "attention,prev-contribution,input-contribution,hidden-contribution",
                          "--threads", "2"}),
            0);
  EXPECT_EQ(cli::run_cli({"histogram", "--out", o, "--kind", "hidden-contribution"}), 0);
  EXPECT_EQ(cli::run_cli({"histogram", "--out", o, "--layers", "2", "--heads", "1"}), 0);
  EXPECT_EQ(cli::run_cli({"com", "--out", o}), 0);
  EXPECT_EQ(cli::run_cli({"correlate", "--out", o, "--kind", "input-contribution",
                          "--per-sequence-mean"}),
            0);
  EXPECT_EQ(cli::run_cli({"maps", "--out", o, "--seq", "s1", "--layer", "2", "--head", "1",
                          "--shared-scale"}),
            0);
  EXPECT_TRUE(fs::exists(dir / "o" / "maps_s1_l2_h1.svg"));
  const auto h = read_csv(dir / "o" / "histogram_hidden-contribution.csv");
  EXPECT_EQ(h[1][1], "-1");
  const auto a = read_csv(dir / "o" / "histogram_attention.csv");
  EXPECT_EQ(a.size(), 1u + 15u);
  EXPECT_EQ(a[1][0], "2");
  EXPECT_EQ(a[1][1], "1");

  EXPECT_NE(cli::run_cli({"maps", "--out", o, "--seq", "zzz", "--layer", "1", "--head", "0"}), 0);
  EXPECT_NE(cli::run_cli({"histogram", "--out", (dir / "none").string()}), 0);
  EXPECT_NE(cli::run_cli({"histogram", "--out", o, "--layers", "9"}), 0);
  EXPECT_NE(cli::run_cli({"histogram", "--out", o, "--kind", "bogus"}), 0);
  EXPECT_NE(cli::run_cli({"frobnicate"}), 0);
  EXPECT_NE(cli::run_cli({"extract", "--out", o}), 0);
}

TEST(Cli, IndexListParsing) {
  EXPECT_EQ(cli::parse_index_list("1,3,5-7"), (std::vector<std::size_t>{1, 3, 5, 6, 7}));
  EXPECT_EQ(cli::parse_index_list("0"), (std::vector<std::size_t>{0}));
  EXPECT_THROW(cli::parse_index_list("1,,2"), InputError);
  EXPECT_THROW(cli::parse_index_list("3-1"), InputError);
  EXPECT_THROW(cli::parse_index_list("a"), InputError);
}
