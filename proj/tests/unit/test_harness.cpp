#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>
#include <sstream>

#include "tstcnn/harness.hpp"
#include "tstcnn/serialize.hpp"

using namespace tstcnn;
using namespace tstcnn::harness;
namespace fs = std::filesystem;

namespace {

std::string slurp(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  std::ostringstream s;
  s << f.rdbuf();
  return s.str();
}

std::vector<std::string> lines(const fs::path& p) {
  std::ifstream f(p);
  std::vector<std::string> out;
  for (std::string l; std::getline(f, l);) out.push_back(l);
  return out;
}

fs::path fresh_dir(const std::string& name) {
  auto d = fs::temp_directory_path() / ("tstcnn_harness_" + name);
  fs::remove_all(d);
  return d;
}

RunConfig tiny(const std::string& name) {
  RunConfig c = RunConfig::parse(
      "model=twin\nclasses=3\nclips_per_class=8\nratios=0.5,0.25,0.25\n"
      "frames=8\nheight=8\nwidth=8\nfilters=4,4,4\nfc_width=8\nbatch_size=4\n"
      "epochs=3\nverbose=false\n");
  c.out_dir = fresh_dir(name).string();
  return c;
}

RunConfig tiny_attention(const std::string& name) {
  RunConfig c = tiny(name);
  c.classes = 2;
  c.clips_per_class = 4;
  c.frames = c.height = c.width = 16;
  c.blocks = BlockMode::attention;
  c.n_blocks = 1;
  c.epochs = 1;
  return c;
}

}  // namespace

TEST(RunConfig, ParsesCommentsAndOverrides) {
  auto c = RunConfig::parse("# run\nepochs = 12  # short\nblocks=attention\nn_blocks=1\n\nratios=0.8,0.1,0.1\n");
  EXPECT_EQ(c.epochs, 12u);
  EXPECT_EQ(c.blocks, BlockMode::attention);
  EXPECT_EQ(c.ratios[0], 0.8);
  c.set_assignment("lr=0.05");
  EXPECT_EQ(c.lr, 0.05);
  EXPECT_EQ(RunConfig{}.epochs, 200u);
  EXPECT_EQ(RunConfig{}.lr, 0.01);
  EXPECT_EQ(RunConfig{}.patience, 50u);
}

TEST(RunConfig, RejectsUnknownKeysAndBadValues) {
  EXPECT_THROW(RunConfig::parse("epoch=3\n"), ConfigError);
  EXPECT_THROW(RunConfig::parse("epochs=three\n"), ConfigError);
  EXPECT_THROW(RunConfig::parse("epochs=-1\n"), ConfigError);
  EXPECT_THROW(RunConfig::parse("filters=1,2\n"), ConfigError);
  EXPECT_THROW(RunConfig::parse("augment=maybe\n"), ConfigError);
  EXPECT_THROW(RunConfig::parse("model=mono\n"), ConfigError);
  EXPECT_THROW(RunConfig{}.set_assignment("lr"), ConfigError);
  EXPECT_THROW(RunConfig::load("/nonexistent/run.cfg"), ConfigError);
  try {
    RunConfig::parse("epochs=1\nbogus=2\n");
    FAIL();
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("line 2"), std::string::npos);
  }
}

TEST(RunConfig, TextRoundTripAndPathFreeForm) {
  RunConfig c;
  c.lr = 0.1 + 0.2;  // not representable in few digits
  c.out_dir = "/somewhere";
  c.filters = {8, 16, 24};
  const auto text = c.to_text();
  EXPECT_EQ(RunConfig::parse(text).to_text(), text);
  EXPECT_EQ(RunConfig::parse(text).lr, c.lr);
  EXPECT_NE(text.find("out_dir=/somewhere"), std::string::npos);
  EXPECT_EQ(c.to_text(false).find("out_dir"), std::string::npos);
  EXPECT_EQ(RunConfig::keys().size(), std::size_t(std::count(text.begin(), text.end(), '\n')));
}

TEST(RunConfig, ValidationCatchesInconsistency) {
  RunConfig c;
  EXPECT_NO_THROW(c.validate());
  c.blocks = BlockMode::attention;  // n_blocks still 0
  EXPECT_THROW(c.validate(), ConfigError);
  c = {};
  c.batch_size = 0;
  EXPECT_THROW(c.validate(), ConfigError);
  c = {};
  c.max_rotation = 80;
  EXPECT_THROW(c.validate(), ConfigError);
  c.augment = false;
  EXPECT_NO_THROW(c.validate());
}

TEST(Metrics, RowFormatRoundTrips) {
  EpochMetrics m{7, 0.123456789012, 0.5, 2.0 / 3.0, 1e-4, ScheduleAction::reload_decay};
  const auto row = format_metrics_row(m);
  EXPECT_EQ(row.substr(0, 2), "7,");
  EXPECT_NE(row.find(",0.0001,reload_decay"), std::string::npos) << row;
  const auto dir = fresh_dir("metrics");
  fs::create_directories(dir);
  std::ofstream(dir / "m.csv") << kMetricsHeader << "\n" << row << "\n";
  auto back = read_metrics((dir / "m.csv").string());
  ASSERT_EQ(back.size(), 1u);
  EXPECT_EQ(back[0].epoch, 7u);
  EXPECT_NEAR(back[0].val_acc, 2.0 / 3.0, 1e-9);
  EXPECT_EQ(back[0].action, ScheduleAction::reload_decay);
  fs::remove_all(dir);
}

TEST(Metrics, MedianHandlesUnreachedRuns) {
  const double inf = std::numeric_limits<double>::infinity();
  EXPECT_EQ(median({3, 1, 2}), 2);
  EXPECT_EQ(median({4, 1, 2, 3}), 2.5);
  EXPECT_EQ(median({5, inf, inf}), inf);
  EXPECT_EQ(median({5, 7, inf}), 7);
  EXPECT_THROW(median({}), ContractError);
}

TEST(Pgm, NormalizationAndHeader) {
  const float plane[] = {-1.0f, 1.0f, 0.0f, -1.0f};
  auto b = normalize_to_bytes(plane);
  EXPECT_EQ(b, (std::vector<std::uint8_t>{0, 255, 128, 0}));
  const float flat[] = {0.5f, 0.5f, 0.5f};
  for (auto v : normalize_to_bytes(flat)) EXPECT_EQ(v, 0);
  const auto dir = fresh_dir("pgm");
  fs::create_directories(dir);
  write_pgm((dir / "a.pgm").string(), 2, 2, b);
  const auto bytes = slurp(dir / "a.pgm");
  EXPECT_EQ(bytes.substr(0, 11), "P5\n2 2\n255\n");
  EXPECT_EQ(bytes.size(), 11u + 4);
  EXPECT_THROW(write_pgm((dir / "b.pgm").string(), 3, 2, b), DimensionError);
  fs::remove_all(dir);
}

TEST(Dataset, SplitSizesAndBatching) {
  auto c = tiny("data");
  auto d = load_dataset(c, true);
  EXPECT_EQ(d.train.size(), 12u);
  EXPECT_EQ(d.val.size(), 6u);
  EXPECT_EQ(d.test.size(), 6u);
  EXPECT_EQ(d.train[0].frames(), 8u + 2);  // jitter margin on both sides
  EXPECT_TRUE(load_dataset(c, false).test.empty());
  auto w0 = synth::extract_window(d.val[0], 1, 8), w1 = synth::extract_window(d.val[1], 1, 8);
  auto in = make_batch({&w0, &w1}, ModelKind::twin);
  EXPECT_EQ(in.rgb.shape(), (Shape{2, 3, 8, 8, 8}));
  EXPECT_EQ(in.flow.shape(), (Shape{2, 2, 8, 8, 8}));
  EXPECT_EQ(in.rgb.data()[3 * 512], w1.rgb.data()[0]);
  EXPECT_FALSE(make_batch({&w0}, ModelKind::rgb).flow.defined());
}

TEST(Train, ZeroEpochsWritesInitialState) {
  auto c = tiny("zero");
  c.epochs = 0;
  auto r = train(c);
  EXPECT_TRUE(r.metrics.empty());
  const fs::path out = c.out_dir;
  EXPECT_EQ(lines(out / "metrics.csv"), std::vector<std::string>{kMetricsHeader});
  EXPECT_EQ(lines(out / "checkpoints.log"), std::vector<std::string>{"epoch 0 save initial"});
  EXPECT_TRUE(fs::exists(out / "best.ckpt"));
  EXPECT_TRUE(fs::exists(out / "last.ckpt"));
  EXPECT_EQ(RunConfig::load((out / "config.txt").string()).to_text(), c.to_text());
  fs::remove_all(out);
}

TEST(Train, ArtifactsAndBestCheckpointAgree) {
  auto c = tiny("artifacts");
  auto r = train(c);
  const fs::path out = c.out_dir;
  auto rows = read_metrics((out / "metrics.csv").string());
  ASSERT_EQ(rows.size(), 3u);
  for (std::size_t i = 0; i < 3; ++i) {
    EXPECT_EQ(rows[i].epoch, i + 1);
    EXPECT_EQ(rows[i].lr, 0.01);
    EXPECT_TRUE(std::isfinite(rows[i].train_loss));
  }
  auto best = load_model((out / "best.ckpt").string());
  EXPECT_EQ(best.checkpoint.epoch, r.best_epoch);
  const auto data = load_dataset(c, false);
  EXPECT_EQ(evaluate(best.net, data.val, c.frames, c.batch_size).accuracy, r.best_val_acc);
  EXPECT_EQ(load_model((out / "last.ckpt").string()).checkpoint.epoch, 3u);
  auto log = lines(out / "checkpoints.log");
  EXPECT_EQ(log[0], "epoch 0 save initial");
  EXPECT_EQ(log[1].substr(0, 18), "epoch 1 save best ");
  fs::remove_all(out);
}

TEST(Train, SeededRunsAreBitIdentical) {
  auto a = tiny("det_a"), b = tiny("det_b"), d = tiny("det_d");
  d.seed = 2;
  train(a);
  train(b);
  train(d);
  for (const char* f : {"metrics.csv", "best.ckpt", "last.ckpt", "checkpoints.log"})
    EXPECT_EQ(slurp(fs::path(a.out_dir) / f), slurp(fs::path(b.out_dir) / f)) << f;
  EXPECT_NE(slurp(fs::path(a.out_dir) / "metrics.csv"), slurp(fs::path(d.out_dir) / "metrics.csv"));
  for (const auto& c : {a, b, d}) fs::remove_all(c.out_dir);
}

TEST(Train, ReloadEventsMatchMetricsAndRestoreBest) {
  // a ratio of 1 turns every drop below the best into an emergency reload
  auto c = tiny("reload");
  c.emergency_ratio = 1.0;
  c.epochs = 8;
  c.lr = 0.05;
  auto r = train(c);
  const fs::path out = c.out_dir;
  auto log = lines(out / "checkpoints.log");
  std::size_t reloads = 0;
  for (std::size_t i = 0; i < r.metrics.size(); ++i) {
    const auto& m = r.metrics[i];
    if (m.action == ScheduleAction::continue_training) {
      if (i + 1 < r.metrics.size()) EXPECT_EQ(r.metrics[i + 1].lr, m.lr);
      continue;
    }
    ++reloads;
    const std::string prefix = "epoch " + std::to_string(m.epoch) + " " + to_string(m.action) + " restore epoch ";
    EXPECT_TRUE(std::any_of(log.begin(), log.end(), [&](const auto& l) { return l.starts_with(prefix); }))
        << prefix;
    if (i + 1 < r.metrics.size()) EXPECT_NE(r.metrics[i + 1].lr, m.lr);
  }
  EXPECT_GT(reloads, 0u) << "trace did not exercise a reload";
  fs::remove_all(out);
}

TEST(Train, DatasetDirectoryMatchesRegeneration) {
  auto gen = tiny("gen");
  gen.dataset_dir = fresh_dir("gen_data").string();
  cmd_gen_data(gen);
  EXPECT_TRUE(fs::exists(fs::path(gen.dataset_dir) / "manifest.csv"));
  auto from_disk = gen;
  auto regen = tiny("regen");
  train(from_disk);
  train(regen);
  EXPECT_EQ(slurp(fs::path(from_disk.out_dir) / "metrics.csv"), slurp(fs::path(regen.out_dir) / "metrics.csv"));
  auto mismatched = gen;
  mismatched.frames = 10;
  EXPECT_THROW(load_dataset(mismatched, false), ConfigError);
  for (const auto& d : {gen.dataset_dir, from_disk.out_dir, regen.out_dir}) fs::remove_all(d);
}

TEST(Eval, ConfusionMatrixIsConsistent) {
  auto c = tiny("eval");
  c.epochs = 1;
  train(c);
  RunConfig e;
  e.checkpoint = (fs::path(c.out_dir) / "best.ckpt").string();
  e.out_dir = (fs::path(c.out_dir) / "eval").string();
  e.split = synth::Split::test;
  e.verbose = false;
  auto rep = cmd_eval(e);
  EXPECT_EQ(rep.total, 6u);
  std::size_t sum = 0, diag = 0;
  for (std::size_t i = 0; i < rep.confusion.size(); ++i) {
    std::size_t row = 0;
    for (std::size_t j = 0; j < rep.confusion[i].size(); ++j) {
      row += rep.confusion[i][j];
      diag += i == j ? rep.confusion[i][j] : 0;
    }
    EXPECT_EQ(row, 2u);  // two test clips per class
    sum += row;
  }
  EXPECT_EQ(sum, rep.total);
  EXPECT_EQ(diag, rep.correct);
  EXPECT_DOUBLE_EQ(rep.accuracy, double(rep.correct) / double(rep.total));
  EXPECT_TRUE(fs::exists(fs::path(e.out_dir) / "eval.txt"));
  RunConfig missing;
  EXPECT_THROW(cmd_eval(missing), ConfigError);
  fs::remove_all(c.out_dir);
}

TEST(ExportMasks, WritesTensorsAndImagesInsideUnitInterval) {
  auto c = tiny_attention("masks");
  train(c);
  RunConfig e;
  e.checkpoint = (fs::path(c.out_dir) / "best.ckpt").string();
  e.out_dir = (fs::path(c.out_dir) / "masks").string();
  e.clip = 1;
  e.mask_channel = 2;
  e.verbose = false;
  auto ex = cmd_export_masks(e);
  EXPECT_GT(ex.min, 0.0);
  EXPECT_LT(ex.max, 1.0);
  const fs::path dir = e.out_dir;
  auto raw = load_tensor<float>((dir / "mask_rgb_block1.tensor").string());
  EXPECT_EQ(raw.shape(), (Shape{4, 8, 8, 8}));
  EXPECT_TRUE(fs::exists(dir / "mask_flow_block1_c2_t07.pgm"));
  EXPECT_EQ(ex.files.size(), 2u * (1 + 8));
  const auto pgm = slurp(dir / "mask_rgb_block1_c2_t00.pgm");
  EXPECT_EQ(pgm.substr(0, 11), "P5\n8 8\n255\n");
  e.mask_channel = 4;
  EXPECT_THROW(cmd_export_masks(e), ConfigError);
  e.mask_channel = 0;
  e.clip = 999;
  EXPECT_THROW(cmd_export_masks(e), ConfigError);
  fs::remove_all(c.out_dir);
}

TEST(ExportMasks, ModelWithoutAttentionRejected) {
  auto c = tiny("nomask");
  c.epochs = 0;
  train(c);
  RunConfig e;
  e.checkpoint = (fs::path(c.out_dir) / "best.ckpt").string();
  e.out_dir = (fs::path(c.out_dir) / "m").string();
  EXPECT_THROW(cmd_export_masks(e), ConfigError);
  fs::remove_all(c.out_dir);
}

TEST(Compare, SingleSeedWritesReport) {
  auto c = tiny("compare");
  c.frames = c.height = c.width = 16;
  c.classes = 2;
  c.clips_per_class = 4;
  c.epochs = 1;
  c.n_seeds = 1;
  c.compare_a = BlockMode::residual;
  c.threshold = 0.0;
  auto rep = cmd_compare(c);
  ASSERT_EQ(rep.rows.size(), 2u);
  EXPECT_EQ(rep.rows[0].mode, BlockMode::residual);
  EXPECT_EQ(rep.rows[1].mode, BlockMode::none);
  EXPECT_EQ(rep.median_a, 1.0);  // threshold 0 is met at the first epoch
  EXPECT_EQ(rep.median_b, 1.0);
  const fs::path out = c.out_dir;
  EXPECT_EQ(lines(out / "compare.csv")[0], "seed,side,blocks,epochs_to_threshold,best_val_acc");
  EXPECT_TRUE(fs::exists(out / "seed1_a_residual" / "metrics.csv"));
  EXPECT_TRUE(fs::exists(out / "seed1_b_none" / "metrics.csv"));
  EXPECT_NE(slurp(out / "compare.txt").find("median a (residual) 1"), std::string::npos);
  fs::remove_all(out);
}
