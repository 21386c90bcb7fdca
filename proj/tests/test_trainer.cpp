#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <random>
#include <sstream>

#include "cocokit/trainer.hpp"

using namespace cocokit;
namespace fs = std::filesystem;

namespace {

fs::path scratch_dir() {
  const auto* info = ::testing::UnitTest::GetInstance()->current_test_info();
  auto dir = fs::temp_directory_path() / (std::string("cocokit_") + info->test_suite_name() + "_" + info->name());
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

std::vector<ClassId> block_labels(int classes, int per_class) {
  std::vector<ClassId> labels;
  for (int c = 0; c < classes; ++c) labels.insert(labels.end(), per_class, c);
  return labels;
}

TrainConfig tiny_config() {
  TrainConfig c = TrainConfig::desk();
  c.image_size = 16;
  c.feature_dim = 8;
  c.softmax_epochs = 4;
  c.collab_epochs = 4;
  c.batch_size = 8;
  return c;
}

LabeledImageSet tiny_data(int classes = 3, int per_class = 12) {
  SynthConfig s;
  s.classes = classes;
  s.per_class = per_class;
  s.image_size = 16;
  s.jitter = 2;
  return synth_finegrained(s);
}

// Two classes of 8x8 grey images: mean intensity 0.25 or 0.75 plus small noise.
LabeledImageSet blobs(int per_class, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> noise(0.0, 0.05);
  LabeledImageSet set;
  set.class_names = {"dark", "bright"};
  for (int c = 0; c < 2; ++c)
    for (int k = 0; k < per_class; ++k) {
      Image im{8, 8, 1, std::vector<double>(64)};
      for (double& v : im.pixels) v = std::clamp((c ? 0.75 : 0.25) + noise(rng), 0.0, 1.0);
      set.images.push_back(std::move(im));
      set.labels.push_back(c);
    }
  return set;
}

std::string bytes_of(const TrainedModel& m) {
  std::ostringstream out;
  save_model(m, out);
  return out.str();
}

}  // namespace

TEST(Partitions, HalfOfEveryClass) {
  const auto labels = block_labels(8, 100);
  const auto parts = split_partitions(labels, 0.5, 3);
  std::vector<int> p1(8, 0), p2(8, 0);
  for (auto i : parts.p1) ++p1[labels[i]];
  for (auto i : parts.p2) ++p2[labels[i]];
  for (int c = 0; c < 8; ++c) {
    EXPECT_EQ(p1[c], 50);
    EXPECT_EQ(p2[c], 50);
  }
  const auto again = split_partitions(labels, 0.5, 3);
  EXPECT_EQ(again.p1, parts.p1);
  EXPECT_EQ(again.p2, parts.p2);
  EXPECT_NE(split_partitions(labels, 0.5, 4).p1, parts.p1);
}

TEST(Partitions, TwoPerClassAndRounding) {
  const auto two = split_partitions(block_labels(4, 2), 0.5, 1);
  EXPECT_EQ(two.p1.size(), 4u);
  EXPECT_EQ(two.p2.size(), 4u);
  for (double f : {0.1, 0.3, 0.5, 0.77, 0.9}) {
    std::vector<ClassId> labels;
    for (int c = 0; c < 5; ++c) labels.insert(labels.end(), 3 + 4 * c, c);
    const auto parts = split_partitions(labels, f, 9);
    for (int c = 0; c < 5; ++c) {
      const double n = 3 + 4 * c;
      const auto got = std::count_if(parts.p1.begin(), parts.p1.end(), [&](auto i) { return labels[i] == c; });
      EXPECT_LE(std::abs(static_cast<double>(got) - f * n), 1.0);
      EXPECT_GE(got, 1);
      EXPECT_LE(got, n - 1);
    }
    EXPECT_EQ(parts.p1.size() + parts.p2.size(), labels.size());
  }
}

TEST(Partitions, SingletonClassRejected) {
  const std::vector<ClassId> labels{0, 0, 1, 2, 2};
  try {
    split_partitions(labels, 0.5, 1);
    FAIL();
  } catch (const InvalidArgument& e) {
    EXPECT_NE(std::string(e.what()).find("class 1"), std::string::npos);
  }
}

TEST(Plateau, ReducesOnceThenStops) {
  PlateauSchedule s(1e-3, 1e-4, 3, 1e-4);
  EXPECT_EQ(s.observe(5.0), PlateauSchedule::Event::kNone);
  EXPECT_EQ(s.observe(4.0), PlateauSchedule::Event::kNone);
  EXPECT_EQ(s.observe(3.0), PlateauSchedule::Event::kNone);
  EXPECT_EQ(s.observe(3.0), PlateauSchedule::Event::kNone);
  EXPECT_EQ(s.observe(3.0), PlateauSchedule::Event::kNone);
  EXPECT_DOUBLE_EQ(s.lr(), 1e-3);
  EXPECT_EQ(s.observe(3.0), PlateauSchedule::Event::kReduced);
  EXPECT_EQ(s.lr(), 1e-4);
  for (int i = 0; i < 3; ++i) EXPECT_EQ(s.observe(2.0), PlateauSchedule::Event::kNone);
  EXPECT_EQ(s.observe(2.00001), PlateauSchedule::Event::kStop);
  EXPECT_EQ(s.lr(), 1e-4);
}

TEST(Config, RoundTripAndOverrides) {
  TrainConfig c = TrainConfig::desk();
  c.lambda = 0.1;
  c.gamma = 1e-7;
  c.seed = 18446744073709551615ull;
  c.weighting = ResidualWeighting::kPerColumn;
  c.enable_grad_Y = true;
  const auto text = c.serialize();
  EXPECT_EQ(TrainConfig::parse(text).serialize(), text);
  const auto over = TrainConfig::parse("# comment\n\nlambda = 3\nmode=cascade_crc\n", c);
  EXPECT_EQ(over.lambda, 3.0);
  EXPECT_EQ(over.mode, TrainMode::kCascadeCrc);
  EXPECT_EQ(over.seed, c.seed);
  EXPECT_THROW(TrainConfig::parse("colour=blue\n"), InvalidArgument);
  EXPECT_THROW(TrainConfig::parse("lambda\n"), InvalidArgument);
  EXPECT_THROW(TrainConfig::parse("max_epochs=ten\n"), InvalidArgument);
  EXPECT_NE(c.fingerprint(), over.fingerprint());
}

TEST(Config, Invariants) {
  TrainConfig c;
  EXPECT_NO_THROW(c.validate());
  EXPECT_EQ(c.lr_initial, 1e-3);
  EXPECT_EQ(c.lr_reduced, 1e-4);
  EXPECT_EQ(c.max_epochs, 1000);
  c.max_epochs = 1001;
  EXPECT_THROW(c.validate(), InvalidArgument);
  c = TrainConfig();
  c.lr_reduced = c.lr_initial;
  EXPECT_THROW(c.validate(), InvalidArgument);
  c = TrainConfig();
  c.partition_fraction = 1.0;
  EXPECT_THROW(c.validate(), InvalidArgument);
  c = TrainConfig();
  c.softmax_epochs = c.max_epochs + 1;
  EXPECT_THROW(c.validate(), InvalidArgument);
}

TEST(Softmax, SeparableBlobsFitTrainingSet) {
  const auto data = blobs(16, 1);
  TrainConfig c = tiny_config();
  c.image_size = 8;
  c.softmax_epochs = 30;
  c.mode = TrainMode::kSoftmax;
  // Oracle: the mean intensity alone separates the classes.
  for (std::size_t i = 0; i < data.size(); ++i) {
    const double mean = std::accumulate(data.images[i].pixels.begin(), data.images[i].pixels.end(), 0.0) / 64;
    ASSERT_EQ(mean > 0.5, data.labels[i] == 1);
  }
  const auto m = train_baseline(c, data);
  EXPECT_DOUBLE_EQ(evaluate(m, data), 100.0);
  EXPECT_FALSE(m.collab.has_value());
  ASSERT_TRUE(m.head.has_value());
}

TEST(Cascade, SeparableBlobsHeldOut) {
  TrainConfig c = tiny_config();
  c.image_size = 8;
  c.softmax_epochs = 30;
  c.mode = TrainMode::kCascadeCrc;
  const auto m = train_baseline(c, blobs(16, 2));
  const auto test = blobs(20, 99);
  EXPECT_DOUBLE_EQ(evaluate(m, test), 100.0);
  EXPECT_FALSE(m.head.has_value());
  c.mode = TrainMode::kCascadeProcrc;
  EXPECT_DOUBLE_EQ(evaluate(train_baseline(c, blobs(16, 2)), test), 100.0);
}

TEST(Coconet, ModelShapeAndLog) {
  const auto dir = scratch_dir();
  const auto data = tiny_data();
  TrainConfig c = tiny_config();
  const auto m = train_coconet(c, data, dir / "loss.csv");
  EXPECT_EQ(m.mode, TrainMode::kCoconet);
  EXPECT_FALSE(m.head.has_value());
  ASSERT_TRUE(m.collab.has_value());
  EXPECT_EQ(m.collab->A.rows(), 18);
  EXPECT_EQ(m.collab->A.cols(), 18);
  EXPECT_EQ(m.dictionary.features.cols(), 36);
  EXPECT_EQ(m.dictionary.features, m.net.extract(detail::prepare_images(data, 16), 8));
  std::ifstream in(dir / "loss.csv");
  std::string line;
  std::getline(in, line);
  EXPECT_EQ(line, "epoch,phase,cost,accuracy,lr");
  int softmax = 0, coconet = 0;
  while (std::getline(in, line)) {
    softmax += line.find(",softmax,") != std::string::npos;
    coconet += line.find(",coconet,") != std::string::npos;
  }
  EXPECT_EQ(softmax, c.softmax_epochs);
  EXPECT_EQ(coconet, c.collab_epochs);
}

// Identical images: p1 features reproduce p2 exactly, so the collaborative
// cost is ~0 from the start and grad_X vanishes.
TEST(Coconet, ZeroGradientFixedPoint) {
  auto data = tiny_data(2, 6);
  for (auto& im : data.images) im = data.images.front();
  TrainConfig c = tiny_config();
  c.softmax_epochs = 0;
  c.collab_epochs = 3;
  c.lambda = 1e-12;
  c.tune_lambda = false;
  LossLog log;
  const auto images = detail::prepare_images(data, 16);
  FeatNet net({16, 16, 3}, default_layers(8));
  net.init_he(5);
  const auto run = train_coconet_phase(c, net, images, data.labels, log);
  const Mat y = net.extract(images);
  const double scale = (y * Vec::Ones(y.cols())).squaredNorm();
  EXPECT_LT(log.rows().front().cost, 1e-12 * scale);
  EXPECT_LT((run.net.params() - net.params()).cwiseAbs().maxCoeff(), 1e-4);
}

TEST(Coconet, CostSequenceAfterReduction) {
  SynthConfig s;
  s.classes = 3;
  const auto data = synth_finegrained(s);
  TrainConfig c = TrainConfig::desk();
  c.collab_epochs = 20;
  LossLog log;
  const auto images = detail::prepare_images(data, c.image_size);
  const auto base = train_softmax_phase(c, images, data.labels, 3, log);
  LossLog collab;
  train_coconet_phase(c, base.net, images, data.labels, collab);
  std::vector<double> after;
  for (const auto& r : collab.rows()) {
    ASSERT_TRUE(std::isfinite(r.cost));
    if (r.lr == c.lr_reduced) after.push_back(r.cost);
  }
  ASSERT_GE(after.size(), 2u) << "learning rate was not reduced within " << c.collab_epochs << " epochs";
  int non_increasing = 0;
  for (std::size_t i = 1; i < after.size(); ++i) non_increasing += after[i] <= after[i - 1];
  EXPECT_GE(non_increasing, 0.9 * static_cast<double>(after.size() - 1));
}

TEST(Coconet, DivergenceAborts) {
  TrainConfig c = tiny_config();
  c.softmax_epochs = 0;
  c.collab_epochs = 30;
  c.lr_initial = 5.0;
  c.lr_reduced = 1.0;
  c.divergence_factor = 1.5;
  EXPECT_THROW(train_coconet(c, tiny_data()), Divergence);
}

TEST(Determinism, SeededRunsAreIdentical) {
  const auto data = tiny_data();
  TrainConfig c = tiny_config();
  const auto a = train_coconet(c, data);
  const auto b = train_coconet(c, data);
  EXPECT_EQ(a.net.params(), b.net.params());
  EXPECT_EQ(bytes_of(a), bytes_of(b));
  c.seed = 2;
  EXPECT_NE(train_coconet(c, data).net.params(), a.net.params());
}

TEST(Checkpoint, RoundTripAndAtomicWrite) {
  const auto dir = scratch_dir();
  const auto data = tiny_data();
  for (TrainMode mode : {TrainMode::kSoftmax, TrainMode::kCascadeProcrc, TrainMode::kCoconet}) {
    TrainConfig c = tiny_config();
    c.mode = mode;
    const auto m = train(c, data);
    save_model(m, dir / "model.ckmd");
    EXPECT_FALSE(fs::exists(dir / "model.ckmd.tmp"));
    const auto back = load_model(dir / "model.ckmd");
    EXPECT_EQ(bytes_of(back), bytes_of(m));
    EXPECT_EQ(back.config, m.config);
    EXPECT_EQ(infer(back, data.images), infer(m, data.images));
  }
  std::ofstream(dir / "junk.ckmd") << "CKMDxxxx";
  EXPECT_THROW(load_model(dir / "junk.ckmd"), IoError);
  EXPECT_THROW(load_model(dir / "absent.ckmd"), IoError);
}

TEST(Infer, TrainingSamplesAndRepeatability) {
  const auto data = blobs(10, 4);
  TrainConfig c = tiny_config();
  c.image_size = 8;
  c.softmax_epochs = 10;
  c.mode = TrainMode::kCascadeCrc;
  const auto m = train(c, data);
  const auto first = infer(m, data.images);
  EXPECT_EQ(first, data.labels);
  EXPECT_EQ(infer(m, data.images), first);
  EXPECT_TRUE(infer(m, std::vector<Image>{}).empty());
}

TEST(Stages, SingleStageMatchesDirectTraining) {
  const auto data = tiny_data();
  TrainConfig c = tiny_config();
  c.mode = TrainMode::kCascadeCrc;
  const std::vector<LabeledImageSet> stages{data};
  EXPECT_EQ(bytes_of(pretrain_then_finetune(stages, c)), bytes_of(train(c, data)));
  EXPECT_THROW(pretrain_then_finetune(std::vector<LabeledImageSet>{}, c), InvalidArgument);
  SynthConfig other;
  other.classes = 2;
  other.per_class = 6;
  other.image_size = 24;
  other.jitter = 2;
  const std::vector<LabeledImageSet> mismatched{synth_finegrained(other), data};
  EXPECT_THROW(pretrain_then_finetune(mismatched, c), InvalidArgument);
}

TEST(Stages, TwoStagesCarryTheNetwork) {
  SynthConfig coarse;
  coarse.classes = 4;
  coarse.per_class = 10;
  coarse.image_size = 16;
  coarse.jitter = 2;
  coarse.seed = 11;
  const std::vector<LabeledImageSet> stages{synth_finegrained(coarse), tiny_data()};
  TrainConfig c = tiny_config();
  c.mode = TrainMode::kCoconet;
  const auto two = pretrain_then_finetune(stages, c);
  const auto one = train(c, stages.back());
  EXPECT_NE(two.net.params(), one.net.params());
  EXPECT_EQ(two.num_classes, 3);
  EXPECT_FALSE(two.head.has_value());
}

TEST(Crossval, FiveFoldsPerMode) {
  SynthConfig s;
  s.classes = 3;
  s.per_class = 10;
  s.image_size = 16;
  s.jitter = 2;
  const auto data = synth_finegrained(s);
  TrainConfig c = tiny_config();
  c.softmax_epochs = 2;
  c.collab_epochs = 2;
  const TrainMode modes[] = {TrainMode::kSoftmax, TrainMode::kCoconet};
  const auto reports = crossval(c, data, 5, modes);
  ASSERT_EQ(reports.size(), 2u);
  for (const auto& [mode, r] : reports) {
    EXPECT_EQ(r.folds.size(), 5u);
    for (double a : r.folds) {
      EXPECT_GE(a, 0.0);
      EXPECT_LE(a, 100.0);
    }
  }
  EXPECT_NE(reports.at(TrainMode::kSoftmax).config_hash, reports.at(TrainMode::kCoconet).config_hash);
  const auto again = crossval(c, data, 5, modes);
  EXPECT_EQ(again.at(TrainMode::kCoconet).folds, reports.at(TrainMode::kCoconet).folds);
}
