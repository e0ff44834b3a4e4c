#include "protoparts/pipeline.hpp"

#include <gtest/gtest.h>
#include <sys/wait.h>
#include <unistd.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

namespace protoparts {
namespace {

namespace fs = std::filesystem;

fs::path scratch_dir(const std::string& name) {
  auto dir = fs::temp_directory_path() / ("protoparts_" + std::to_string(::getpid()) + "_" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

int cli(const std::string& args, const fs::path& log) {
  const std::string cmd = std::string(PROTOPARTS_CLI_PATH) + " " + args + " > '" + log.string() + "' 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

ErrorCode code_of(const std::function<void()>& f) {
  try {
    f();
  } catch (const Error& e) {
    return e.code();
  }
  ADD_FAILURE() << "expected a typed error";
  return ErrorCode::InvariantViolation;
}

// ---------------------------------------------------------------------------
// Config

TEST(RunConfigText, ParsesKeysCommentsAndBlankLines) {
  const auto cfg = parse_config_text("# comment\n\n  k = 7\nbeta=0.5\nfg = gt\nno_ppc = true\nsynth_sigma = 0\r\n");
  EXPECT_EQ(cfg.k, 7u);
  EXPECT_EQ(cfg.beta, 0.5);
  EXPECT_EQ(cfg.fg, ForegroundMethod::GroundTruthMask);
  EXPECT_TRUE(cfg.no_ppc);
  EXPECT_EQ(cfg.synth.sigma, 0.0);
  EXPECT_EQ(cfg.lr_w, RunConfig{}.lr_w);
}

TEST(RunConfigText, RejectsUnknownKeysBadValuesAndDuplicates) {
  for (const char* text : {"kk = 3\n", "k = -1\n", "k = 3x\n", "beta = fast\n", "fg = rollout\n", "no_ppc = maybe\n",
                           "k = 3\nk = 4\n", "just a line\n", "k =\n"}) {
    EXPECT_EQ(code_of([&] { parse_config_text(text); }), ErrorCode::ConfigError) << text;
  }
}

TEST(RunConfigText, WrittenTextParsesBackToTheSameConfig) {
  RunConfig cfg = RunConfig::synthetic_benchmark();
  cfg.train = "a b.ptfd";
  cfg.tau = 0.1 + 0.2;  // not representable in short decimal
  cfg.seed = 18446744073709551615ull;
  cfg.no_foreground = true;
  cfg.fg = ForegroundMethod::None;
  cfg.synth.decoy_noise = 1e-300;
  const auto back = parse_config_text(config_to_text(cfg));
  EXPECT_EQ(back, cfg);
  EXPECT_EQ(back.tau, cfg.tau);
  EXPECT_NE(back, RunConfig{});
}

TEST(RunConfigText, BenchmarkFileMatchesPreset) {
  EXPECT_EQ(load_config(fs::path(PROTOPARTS_SOURCE_DIR) / "configs" / "synthetic.cfg"), RunConfig::synthetic_benchmark());
}

TEST(RunConfigText, AblationFlagsMapOntoStageSettings) {
  RunConfig cfg;
  EXPECT_TRUE(cfg.stage1().equipartition);
  EXPECT_EQ(cfg.stage2().lambda_ppc, 0.8);
  cfg.no_ppc = true;
  cfg.no_constraints = true;
  cfg.no_foreground = true;
  EXPECT_EQ(cfg.stage2().lambda_ppc, 0.0);
  EXPECT_FALSE(cfg.stage1().equipartition);
  EXPECT_FALSE(cfg.stage2().equipartition);
  EXPECT_EQ(cfg.stage1().fg_method, ForegroundMethod::None);
  EXPECT_EQ(cfg.stage2().fg_method, ForegroundMethod::None);

  std::set<std::uint64_t> seeds;
  for (auto s : {SeedStream::Synth, SeedStream::Init, SeedStream::Stage1, SeedStream::Stage2}) {
    seeds.insert(stream_seed(0, s));
    seeds.insert(stream_seed(1, s));
  }
  EXPECT_EQ(seeds.size(), 8u);
}

TEST(RunConfigText, InvalidRangesAreParameterErrors) {
  RunConfig cfg;
  cfg.tau = 1.0;
  EXPECT_EQ(code_of([&] { cfg.validate(); }), ErrorCode::InvalidParams);
  cfg = RunConfig{};
  cfg.box_frac = 0.0;
  EXPECT_EQ(code_of([&] { cfg.validate(); }), ErrorCode::InvalidParams);
  cfg = RunConfig{};
  cfg.lr_adapter = 0.0;
  EXPECT_EQ(code_of([&] { cfg.validate(); }), ErrorCode::InvalidParams);
}

// ---------------------------------------------------------------------------
// Bundle

ModelBundle sample_bundle() {
  RunConfig cfg;
  cfg.k = 2;
  cfg.seed = 3;
  auto m = initial_bundle(3, 4, cfg);
  for (std::size_t i = 0; i < m.head.adapter.size(); ++i) m.head.adapter.data()[i] = 0.01 * static_cast<double>(i) - 0.05;
  m.head.w(1, 0) = -0.75;
  return m;
}

TEST(Bundle, RoundTripAndLayoutSize) {
  const auto m = sample_bundle();
  const auto bytes = encode_bundle(m);
  EXPECT_EQ(bytes.size(), 4 + 4 + 12 + 8 * (3 * 2 * 4 + 3 * 2 + 4 * 4) + 4 + m.config.size());
  EXPECT_EQ(std::string(bytes.begin(), bytes.begin() + 4), "PTMB");
  EXPECT_EQ(bytes[4], 1);
  EXPECT_EQ(bytes[8], 3);   // C
  EXPECT_EQ(bytes[12], 2);  // K
  EXPECT_EQ(bytes[16], 4);  // D
  EXPECT_EQ(decode_bundle(bytes), m);

  const auto dir = scratch_dir("bundle");
  save_bundle(m, dir / "m.ptmb");
  EXPECT_EQ(load_bundle(dir / "m.ptmb"), m);
  EXPECT_EQ(code_of([&] { load_bundle(dir / "missing.ptmb"); }), ErrorCode::IoError);
  fs::remove_all(dir);
}

TEST(Bundle, TypedErrorsOnCorruption) {
  const auto bytes = encode_bundle(sample_bundle());
  auto with = [&](std::size_t pos, std::uint8_t v) {
    auto b = bytes;
    b[pos] = v;
    return b;
  };
  EXPECT_EQ(code_of([&] { decode_bundle(with(0, 'X')); }), ErrorCode::BadMagic);
  EXPECT_EQ(code_of([&] { decode_bundle(with(4, 2)); }), ErrorCode::UnsupportedVersion);
  EXPECT_EQ(code_of([&] { decode_bundle(with(9, 0x10)); }), ErrorCode::TruncatedFile);
  // Misaligned read: a head weight lands where a prototype should be.
  EXPECT_EQ(code_of([&] { decode_bundle(with(8, 4)); }), ErrorCode::InvariantViolation);
  EXPECT_EQ(code_of([&] { decode_bundle(with(8, 0)); }), ErrorCode::DimMismatch);
  EXPECT_EQ(code_of([&] { decode_bundle(std::vector<std::uint8_t>(bytes.begin(), bytes.end() - 1)); }),
            ErrorCode::TruncatedFile);
  auto longer = bytes;
  longer.push_back(0);
  EXPECT_EQ(code_of([&] { decode_bundle(longer); }), ErrorCode::DimMismatch);
  // Exponent of the first prototype coordinate pushed above 2.
  EXPECT_EQ(code_of([&] { decode_bundle(with(20 + 7, 0x40)); }), ErrorCode::InvariantViolation);
}

TEST(Bundle, ReloadedModelPredictsBitIdentically) {
  auto cfg = RunConfig::synthetic_benchmark();
  cfg.stage2_epochs = 3;
  const auto data = synthesize(cfg);
  const auto m = train_model(data.train, cfg);
  const auto back = decode_bundle(encode_bundle(m));
  for (std::size_t b = 0; b < data.test.batch(); ++b) {
    const auto p = predict(image_tokens(data.test, b), m.bank, m.head);
    const auto q = predict(image_tokens(data.test, b), back.bank, back.head);
    EXPECT_EQ(p.label, q.label);
    EXPECT_EQ(p.logits, q.logits);
  }
}

// ---------------------------------------------------------------------------
// Synthetic data

std::vector<std::vector<double>> read_csv_rows(const fs::path& p) {
  std::vector<std::vector<double>> rows;
  std::ifstream in(p);
  std::string line;
  while (std::getline(in, line)) {
    std::vector<double> row;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) row.push_back(std::stod(cell));
    rows.push_back(row);
  }
  return rows;
}

TEST(Synthetic, SidecarHasUnitNearOrthogonalCenters) {
  RunConfig cfg;
  const auto dir = scratch_dir("synth");
  const auto data = write_synthetic(cfg, dir);
  const auto train = read_ptfd(dir / "train.ptfd");
  EXPECT_EQ(train, data.train);
  EXPECT_EQ(read_ptfd(dir / "test.ptfd"), data.test);
  EXPECT_EQ(train.batch(), 250u);
  EXPECT_EQ(data.test.batch(), 100u);

  const auto rows = read_csv_rows(dir / "centers.csv");
  ASSERT_EQ(rows.size(), 16u);  // 15 centers plus the background
  std::vector<std::vector<double>> centers;
  for (std::size_t r = 0; r < 15; ++r) {
    EXPECT_EQ(rows[r][0], static_cast<double>(r / 3));
    EXPECT_EQ(rows[r][1], static_cast<double>(r % 3));
    centers.emplace_back(rows[r].begin() + 2, rows[r].end());
    ASSERT_EQ(centers.back().size(), 16u);
    EXPECT_NEAR(norm(centers.back()), 1.0, 1e-12);
  }
  for (std::size_t i = 0; i < 15; ++i)
    for (std::size_t j = i + 1; j < 15; ++j) EXPECT_LT(std::abs(dot(centers[i], centers[j])), 0.1);
  fs::remove_all(dir);
}

TEST(Synthetic, ZeroNoisePartTokensEqualTheirCenters) {
  RunConfig cfg;
  cfg.synth.sigma = 0.0;
  const auto data = synthesize(cfg);
  const auto slots = part_slots(3, 8);
  for (std::size_t b = 0; b < 10; ++b) {
    const auto cls = data.train.labels[b];
    for (std::size_t j = 0; j < 3; ++j)
      for (std::size_t dy = 0; dy < 2; ++dy)
        for (std::size_t dx = 0; dx < 2; ++dx) {
          const auto tok = data.train.token(b, slots[j][0] + dy, slots[j][1] + dx);
          const auto center = data.centers.slice(cls, j);
          for (std::size_t e = 0; e < 16; ++e) EXPECT_EQ(tok[e], static_cast<float>(center[e]));
        }
  }
}

TEST(Synthetic, GroundTruthMarksPartPixels) {
  const auto data = synthesize(RunConfig{});
  const auto& m = *data.train.gt_masks;
  // 8x8 grid on 64x64 pixels; part 0 covers tokens (1..2, 1..2).
  EXPECT_EQ(m(0, 0, 0), 0);
  EXPECT_EQ(m(0, 14, 14), 1);
  EXPECT_EQ(m(0, 63, 63), 0);
}

TEST(Synthetic, InfeasibleLayoutsAreParameterErrors) {
  SynthParams p;
  p.dim = 15;  // 15 centers + background need 16 directions
  EXPECT_EQ(code_of([&] { make_synthetic(p); }), ErrorCode::InvalidParams);
  p = SynthParams{};
  p.parts = 5;  // 3x3 lattice needs a 10-wide grid
  EXPECT_EQ(code_of([&] { make_synthetic(p); }), ErrorCode::InvalidParams);
  p.strict_orthogonal = false;
  p.grid = 10;
  EXPECT_NO_THROW(make_synthetic(p));
}

TEST(Predict, ImageOfClassTwoPartsOnlyIsClassTwo) {
  const auto data = synthesize(RunConfig{});
  const PrototypeBank bank(data.centers);
  Tensor<double> tokens({64, 16});
  for (std::size_t t = 0; t < 64; ++t) {
    auto c = data.centers.slice(2, t % 3);
    std::copy(c.begin(), c.end(), tokens.slice(t).begin());
  }
  EXPECT_EQ(predict(tokens, bank, ClassifierHead::initial(5, 3, 16)).label, 2u);
}

// ---------------------------------------------------------------------------
// Training and evaluation

TEST(Pipeline, FreshBundleScoresAtChance) {
  double mean = 0.0;
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    auto cfg = RunConfig::synthetic_benchmark();
    cfg.seed = seed;
    const auto data = synthesize(cfg);
    mean += *evaluate(initial_bundle(5, 16, cfg), data.test, cfg).accuracy / 10.0;
  }
  EXPECT_NEAR(mean, 0.2, 0.1);
}

TEST(Pipeline, SyntheticBenchmarkIsLearnedPerfectly) {
  const auto cfg = RunConfig::synthetic_benchmark();
  const auto data = synthesize(cfg);
  const auto r = evaluate(train_model(data.train, cfg), data.test, cfg);
  EXPECT_EQ(*r.accuracy, 1.0);
  EXPECT_GE(r.distinctiveness, 0.9);
  EXPECT_GE(*r.comprehensiveness, 0.7);
}

TEST(Pipeline, NoFinetuneKeepsTheStageOneModel) {
  auto cfg = RunConfig::synthetic_benchmark();
  const auto data = synthesize(cfg);
  const auto stage1 = learn(data.train, cfg);
  cfg.no_finetune = true;
  const auto m = finetune(data.train, stage1, cfg);
  EXPECT_EQ(m.bank, stage1.bank);
  EXPECT_EQ(m.head, stage1.head);
  EXPECT_EQ(m.head, ClassifierHead::initial(5, 3, 16));
}

TEST(Pipeline, StageTwoLossNeverRisesOnTheBenchmark) {
  const auto cfg = RunConfig::synthetic_benchmark();
  const auto data = synthesize(cfg);
  const auto m = learn(data.train, cfg);
  std::vector<double> losses;
  finetune_stage2(data.train, m.bank, m.head, cfg.stage2(), &losses);
  ASSERT_EQ(losses.size(), 60u);
  for (std::size_t e = 1; e < losses.size(); ++e) EXPECT_LE(losses[e], losses[e - 1]) << e;
}

double mean_assigned_cosine(const FeatureBatch& data, const ModelBundle& m, const Stage2Config& s2) {
  const auto fg = compute_foreground(data, s2.fg_method);
  double sum = 0.0;
  std::size_t n = 0;
  for (std::uint32_t c = 0; c < data.num_classes; ++c) {
    std::vector<double> flat;
    for (std::size_t b = 0; b < data.batch(); ++b) {
      if (data.labels[b] != c) continue;
      const auto a = adapt_features(image_tokens(data, b), m.head);
      for (std::size_t t = 0; t < data.tokens_per_image(); ++t)
        if (fg.at(b, t)) flat.insert(flat.end(), a.slice(t).begin(), a.slice(t).end());
    }
    const std::size_t rows = flat.size() / data.feature_dim();
    Tensor<double> patches({rows, data.feature_dim()}, std::move(flat));
    const auto block = m.bank.class_block(c);
    const auto assign = assign_patches(patches, block, s2.sinkhorn, s2.equipartition);
    const auto sim = cosine_similarity(patches, block);
    for (std::size_t i = 0; i < rows; ++i) sum += sim(i, assign.assign[i]);
    n += rows;
  }
  return sum / static_cast<double>(n);
}

// Default (small) step sizes: the contrastive pull raises alignment. Far
// larger steps trade cosine for dot-product margin.
TEST(Pipeline, LargeContrastiveWeightRaisesAssignedCosine) {
  for (std::uint64_t seed = 0; seed < 2; ++seed) {
    auto cfg = RunConfig::synthetic_benchmark();
    cfg.seed = seed;
    const auto data = synthesize(cfg);
    const auto stage1 = learn(data.train, cfg);
    RunConfig tuned = cfg;
    tuned.lambda_ppc = 100.0;
    tuned.lr_adapter = RunConfig{}.lr_adapter;
    tuned.lr_w = RunConfig{}.lr_w;
    tuned.stage2_epochs = RunConfig{}.stage2_epochs;
    const auto after = finetune(data.train, stage1, tuned);
    EXPECT_GT(mean_assigned_cosine(data.train, after, tuned.stage2()),
              mean_assigned_cosine(data.train, stage1, tuned.stage2()));
  }
}

TEST(Pipeline, ReportAggregatesAreMeansOfRows) {
  auto cfg = RunConfig::synthetic_benchmark();
  cfg.stage2_epochs = 2;
  const auto data = synthesize(cfg);
  const auto r = evaluate(learn(data.train, cfg), data.test, cfg);
  ASSERT_EQ(r.images.size(), 100u);
  double overlap = 0.0, iou = 0.0, correct = 0.0;
  for (const auto& row : r.images) {
    overlap += row.overlap / 100.0;
    iou += row.iou / 100.0;
    correct += (*row.predicted == row.label) / 100.0;
  }
  EXPECT_NEAR(r.distinctiveness, 1.0 - overlap, 1e-12);
  EXPECT_NEAR(*r.comprehensiveness, iou, 1e-12);
  EXPECT_NEAR(*r.accuracy, correct, 1e-12);
  ASSERT_EQ(r.box_sweep.size(), 3u);
  EXPECT_EQ(r.box_sweep[1].second, r.distinctiveness);
  ASSERT_EQ(r.tau_sweep.size(), 4u);
  EXPECT_EQ(r.tau_sweep[0].first, 0.2);

  const auto text = r.to_text();
  EXPECT_EQ(text.rfind("accuracy ", 0), 0u);
  EXPECT_NE(text.find("comprehensiveness_sweep tau 0.80000000000000004 "), std::string::npos);
}

TEST(Pipeline, ReportWithoutMasksOmitsComprehensiveness) {
  auto cfg = RunConfig::synthetic_benchmark();
  auto data = synthesize(cfg);
  data.test.gt_masks.reset();
  const auto r = evaluate(initial_bundle(5, 16, cfg), data.test, cfg);
  EXPECT_FALSE(r.comprehensiveness.has_value());
  EXPECT_TRUE(r.tau_sweep.empty());
  EXPECT_NE(r.to_text().find("comprehensiveness n/a"), std::string::npos);
}

TEST(Explain, RendersOneHeatmapPerPrototypeAndRejectsUnknownIds) {
  const auto cfg = RunConfig::synthetic_benchmark();
  const auto data = synthesize(cfg);
  const auto m = learn(data.train, cfg);
  const auto dir = scratch_dir("explain");
  const auto items = explain(m, data.test, {data.test.ids[3], data.test.ids[7]}, dir, 0);
  ASSERT_EQ(items.size(), 6u);
  for (const auto& it : items) {
    EXPECT_TRUE(fs::exists(it.heatmap));
    auto csv = it.heatmap;
    EXPECT_TRUE(fs::exists(csv.replace_extension(".csv")));
    EXPECT_EQ(slurp(it.heatmap).rfind("P5\n64 64\n255\n", 0), 0u);
  }
  EXPECT_GE(items[0].contribution, items[1].contribution);
  EXPECT_GE(items[1].contribution, items[2].contribution);
  EXPECT_EQ(items[0].id, data.test.ids[3]);
  EXPECT_TRUE(fs::exists(dir / "explanations.tsv"));
  EXPECT_EQ(explain(m, data.test, {data.test.ids[0]}, dir, 1).size(), 1u);
  EXPECT_EQ(code_of([&] { explain(m, data.test, {"no_such_image"}, dir, 0); }), ErrorCode::NotFound);
  fs::remove_all(dir);
}

TEST(Metrics, ExternalMapsAreReadAsKChannels) {
  FeatureBatch maps;
  maps.num_classes = 1;
  maps.image_size = {16, 16};
  maps.labels = {0, 0};
  maps.ids = {"a", "b"};
  maps.tokens = Tensor<float>({2, 4, 4, 2}, 0.0f);
  maps.tokens(0, 0, 0, 0) = 1.0f;  // image a: peaks in opposite corners
  maps.tokens(0, 3, 3, 1) = 1.0f;
  maps.tokens(1, 2, 2, 0) = 1.0f;  // image b: both maps peak together
  maps.tokens(1, 2, 2, 1) = 1.0f;
  RunConfig cfg;
  const auto r = evaluate_maps(maps, cfg);
  EXPECT_FALSE(r.accuracy.has_value());
  EXPECT_DOUBLE_EQ(r.images[0].overlap, 0.0);
  EXPECT_DOUBLE_EQ(r.images[1].overlap, 1.0);
  EXPECT_DOUBLE_EQ(r.distinctiveness, 0.5);
  EXPECT_FALSE(r.comprehensiveness.has_value());
}

// ---------------------------------------------------------------------------
// Command line

TEST(Cli, FullRunIsPerfectAndDeterministic) {
  const auto dir = scratch_dir("cli");
  const std::string cfg = std::string("--config '") + PROTOPARTS_SOURCE_DIR + "/configs/synthetic.cfg'";
  const std::string d = "'" + dir.string() + "/";
  const auto log = dir / "log.txt";
  ASSERT_EQ(cli("synth " + cfg + " --out " + d + "data'", log), 0) << slurp(log);
  // Same paths both times: the bundle embeds its resolved config, paths included.
  std::string first_bundle, first_report;
  for (int run = 0; run < 2; ++run) {
    ASSERT_EQ(cli("learn " + cfg + " --train " + d + "data/train.ptfd' --out " + d + "s1.ptmb'", log), 0) << slurp(log);
    ASSERT_EQ(cli("finetune " + cfg + " --train " + d + "data/train.ptfd' --bundle " + d + "s1.ptmb' --out " + d +
                      "s2.ptmb'",
                  log),
              0)
        << slurp(log);
    ASSERT_EQ(cli("eval " + cfg + " --test " + d + "data/test.ptfd' --bundle " + d + "s2.ptmb' --out " + d +
                      "report.txt'",
                  log),
              0)
        << slurp(log);
    if (run == 0) {
      first_bundle = slurp(dir / "s2.ptmb");
      first_report = slurp(dir / "report.txt");
      fs::remove(dir / "s1.ptmb");
      fs::remove(dir / "s2.ptmb");
    }
  }
  EXPECT_TRUE(first_bundle == slurp(dir / "s2.ptmb"));
  EXPECT_EQ(first_report, slurp(dir / "report.txt"));
  EXPECT_EQ(first_report.rfind("accuracy 1\n", 0), 0u) << first_report;

  // The bundle snapshot is the resolved config.
  const auto bundle = load_bundle(dir / "s2.ptmb");
  auto expected = RunConfig::synthetic_benchmark();
  expected.train = dir.string() + "/data/train.ptfd";
  expected.out = dir.string() + "/s2.ptmb";
  expected.bundle = dir.string() + "/s1.ptmb";
  EXPECT_EQ(parse_config_text(bundle.config), expected);

  const auto test = read_ptfd(dir / "data/test.ptfd");
  ASSERT_EQ(cli("explain " + cfg + " --test " + d + "data/test.ptfd' --bundle " + d + "s2.ptmb' --ids '" +
                    test.ids[0] + "," + test.ids[1] + "' --out " + d + "heat'",
                log),
            0)
      << slurp(log);
  std::size_t pgm = 0;
  for (const auto& e : fs::directory_iterator(dir / "heat")) pgm += e.path().extension() == ".pgm";
  EXPECT_EQ(pgm, 6u);
  fs::remove_all(dir);
}

TEST(Cli, FlagsOverrideTheConfigFile) {
  const auto dir = scratch_dir("cli_override");
  const auto log = dir / "log.txt";
  RunConfig small;
  small.synth.train_per_class = 4;
  small.synth.test_per_class = 2;
  write_synthetic(small, dir);
  std::ofstream(dir / "run.cfg") << "k = 3\nstage1_batch = 4\n";
  ASSERT_EQ(cli("learn --config '" + (dir / "run.cfg").string() + "' --k 2 --train '" + (dir / "train.ptfd").string() +
                    "' --out '" + (dir / "m.ptmb").string() + "'",
                log),
            0)
      << slurp(log);
  const auto m = load_bundle(dir / "m.ptmb");
  EXPECT_EQ(m.bank.per_class(), 2u);
  EXPECT_EQ(parse_config_text(m.config).stage1_batch, 4u);
  fs::remove_all(dir);
}

TEST(Cli, ExitCodesFollowErrorKinds) {
  const auto dir = scratch_dir("cli_codes");
  const auto log = dir / "log.txt";
  RunConfig small;
  small.synth.train_per_class = 2;
  small.synth.test_per_class = 1;
  write_synthetic(small, dir);
  const std::string train = "'" + (dir / "train.ptfd").string() + "'";
  const std::string out = "'" + (dir / "m.ptmb").string() + "'";

  EXPECT_EQ(cli("--help", log), 0);
  EXPECT_EQ(cli("", log), 2);
  EXPECT_EQ(cli("learn --no-such-flag", log), 2);
  std::ofstream(dir / "bad.cfg") << "kappa_typo = 1\n";
  EXPECT_EQ(cli("learn --config '" + (dir / "bad.cfg").string() + "' --train " + train + " --out " + out, log), 2);
  EXPECT_EQ(cli("eval --tau 1.5 --test " + train + " --bundle " + out, log), 2);
  EXPECT_EQ(cli("learn --out " + out, log), 2);  // train missing
  EXPECT_EQ(cli("learn --train '" + (dir / "absent.ptfd").string() + "' --out " + out, log), 3);

  ASSERT_EQ(cli("learn --k 3 --train " + train + " --out " + out, log), 0) << slurp(log);
  EXPECT_EQ(cli("explain --test " + train + " --bundle " + out + " --ids nobody --out '" + (dir / "h").string() + "'",
                log),
            3);
  EXPECT_NE(slurp(log).find("NotFound"), std::string::npos);

  FeatureBatch flat = read_ptfd(dir / "train.ptfd");
  for (auto& v : flat.tokens.values()) v = 0.5f;
  write_ptfd(flat, dir / "flat.ptfd");
  EXPECT_EQ(cli("learn --train '" + (dir / "flat.ptfd").string() + "' --out " + out, log), 4);
  EXPECT_NE(slurp(log).find("DegenerateFeatures"), std::string::npos);
  fs::remove_all(dir);
}

}  // namespace
}  // namespace protoparts
