#include <gtest/gtest.h>

#include <cmath>
#include <sstream>

#include "fdseg/data.hpp"
#include "fdseg/trainer.hpp"

using namespace fdseg;

namespace {

UNetConfig tiny_model() {
  UNetConfig m;
  m.base_channels = 4;
  m.input_height = m.input_width = 16;
  return m;
}

DatasetSplit tiny_data(std::uint64_t seed = 0, int n = 30) {
  SiteConfig s = default_base_site();
  s.image_height = s.image_width = 16;
  return split_dataset(generate_site(s, n, seed), {0.7, 0.2, 0.1}, seed);
}

TrainConfig tiny_train(LossMode mode, int p1 = 2, int p2 = 2) {
  TrainConfig c;
  c.phase1_epochs = p1;
  c.phase2_epochs = p2;
  c.batch_size = 4;
  c.loss_mode = mode;
  c.augment = false;
  c.eta_alpha = 0.01;
  return c;
}

std::string header_of(const TrainResult& r) {
  std::ostringstream os;
  write_history_csv(os, r);
  return os.str().substr(0, os.str().find('\n'));
}

}  // namespace

TEST(TrainConfig, ValidationRules) {
  auto bad = [](auto edit) {
    TrainConfig c;
    edit(c);
    EXPECT_THROW(c.validate(), ConfigError);
  };
  bad([](TrainConfig& c) { c.phase1_epochs = 0; });
  bad([](TrainConfig& c) { c.phase2_epochs = -1; });
  bad([](TrainConfig& c) { c.batch_size = 0; });
  bad([](TrainConfig& c) { c.lr = 0; });
  bad([](TrainConfig& c) { c.momentum = 1.0; });
  bad([](TrainConfig& c) { c.alpha_max = -1; });
  EXPECT_NO_THROW(TrainConfig{}.validate());
}

TEST(Train, EmptyPartitionsAreConfigErrors) {
  auto d = tiny_data();
  d.val.clear();
  EXPECT_THROW(train(tiny_train(LossMode::SegOnly), init_params(tiny_model(), 0), d), ConfigError);
}

TEST(Train, DeterministicHistories) {
  const auto d = tiny_data(1);
  for (LossMode mode : {LossMode::SegOnly, LossMode::SegFdExch}) {
    auto cfg = tiny_train(mode);
    cfg.seed = 5;
    const auto a = train(cfg, init_params(tiny_model(), 5), d);
    const auto b = train(cfg, init_params(tiny_model(), 5), d);
    ASSERT_EQ(a.history.size(), b.history.size());
    for (std::size_t e = 0; e < a.history.size(); ++e) {
      EXPECT_NEAR(a.history[e].mean.total, b.history[e].mean.total, 1e-6);
      EXPECT_EQ(a.history[e].val_dice, b.history[e].val_dice);
      EXPECT_EQ(a.history[e].alpha, b.history[e].alpha);
    }
  }
}

TEST(Train, ReturnedCheckpointHasBestValidationDice) {
  const auto d = tiny_data(2);
  const auto r = train(tiny_train(LossMode::SegFd, 3, 2), init_params(tiny_model(), 2), d);
  double best = -1;
  for (const auto& h : r.history) best = std::max(best, h.val_dice);
  EXPECT_EQ(r.best_val_dice, best);
  EXPECT_EQ(mean_dice(evaluate(r.best_model, d.val)), best);
}

TEST(Train, WarmupMatchesSegOnlyBitForBit) {
  const auto d = tiny_data(3);
  for (LossMode mode : {LossMode::SegFd, LossMode::SegFdExch, LossMode::SegConStub, LossMode::SegDeepsStub}) {
    const auto plain = train(tiny_train(LossMode::SegOnly, 3, 0), init_params(tiny_model(), 3), d);
    const auto with = train(tiny_train(mode, 3, 0), init_params(tiny_model(), 3), d);
    for (std::size_t i = 0; i < plain.best_model.params().size(); ++i)
      EXPECT_EQ(plain.best_model.params()[i].value, with.best_model.params()[i].value) << to_string(mode);
    const auto longer = train(tiny_train(mode, 3, 2), init_params(tiny_model(), 3), d);
    for (int e = 0; e < 3; ++e) {
      EXPECT_EQ(longer.history[e].mean.seg, plain.history[e].mean.seg);
      EXPECT_EQ(longer.history[e].mean.total, longer.history[e].mean.seg);
      for (double a : longer.history[e].alpha) EXPECT_EQ(a, 0.0);
    }
  }
}

TEST(Train, AlphaRisesWhileDiscrepancyIsPositive) {
  const auto d = tiny_data(4);
  auto cfg = tiny_train(LossMode::SegFd, 1, 4);
  const auto r = train(cfg, init_params(tiny_model(), 4), d);
  const std::size_t taps = r.tap_names.size();
  for (std::size_t l = 0; l < taps; ++l) {
    double min_fd = 1e300;
    for (const auto& h : r.history)
      if (h.phase == 2) min_fd = std::min(min_fd, h.mean.fd_per_tap[l]);
    if (min_fd <= 1.0) continue;
    for (std::size_t e = 1; e < r.history.size(); ++e) EXPECT_GE(r.history[e].alpha[l], r.history[e - 1].alpha[l]);
    EXPECT_GT(r.history.back().alpha[l], 0.0);
    EXPECT_LE(r.history.back().alpha[l], cfg.alpha_max);
  }
}

TEST(Train, AugmentationMultipliesSteps) {
  const auto d = tiny_data(5);
  auto cfg = tiny_train(LossMode::SegOnly, 1, 0);
  const long plain = train(cfg, init_params(tiny_model(), 5), d).steps;
  cfg.augment = true;
  const long aug = train(cfg, init_params(tiny_model(), 5), d).steps;
  EXPECT_EQ(plain, static_cast<long>((d.train.size() + 3) / 4));
  EXPECT_EQ(aug, static_cast<long>((5 * d.train.size() + 3) / 4));
}

TEST(Train, DivergenceAbortsWithTapAndLastGoodModel) {
  const auto d = tiny_data(6);
  auto cfg = tiny_train(LossMode::SegFd, 2, 0);
  cfg.lr = 1e30;
  try {
    train(cfg, init_params(tiny_model(), 6), d);
    FAIL() << "expected abort";
  } catch (const TrainingAborted& e) {
    EXPECT_FALSE(e.tap().empty());
    for (const auto& p : e.last_good().params())
      for (float v : p.value) ASSERT_TRUE(std::isfinite(v));
  }
}

TEST(History, CsvColumnsFollowTheMode) {
  const auto d = tiny_data(7);
  const auto seg = train(tiny_train(LossMode::SegOnly, 1, 0), init_params(tiny_model(), 7), d);
  EXPECT_EQ(header_of(seg), "epoch,phase,total,seg,dice_loss,bce,val_dice");
  const auto fd = train(tiny_train(LossMode::SegFd, 1, 1), init_params(tiny_model(), 7), d);
  EXPECT_EQ(header_of(fd),
            "epoch,phase,total,seg,dice_loss,bce,fd_enc_1,fd_enc_2,fd_bottleneck,fd_dec_1,fd_dec_2,alpha_enc_1,"
            "alpha_enc_2,alpha_bottleneck,alpha_dec_1,alpha_dec_2,val_dice");
  std::ostringstream os;
  write_history_csv(os, fd);
  std::istringstream is(os.str());
  std::string line;
  std::getline(is, line);
  std::getline(is, line);  // phase 1 row: alpha columns are zero
  EXPECT_NE(line.find(",0.000000,0.000000,0.000000,0.000000,0.000000,"), std::string::npos);
}

TEST(Evaluate, OverlapIdentitiesAndTieRule) {
  const std::vector<float> mask = {1, 1, 0, 0, 1, 0};
  const auto exact = hard_overlap(mask, mask);
  EXPECT_EQ(exact.dice, 1.0);
  EXPECT_EQ(exact.iou, 1.0);
  const std::vector<float> half(6, 0.5f);
  EXPECT_EQ(hard_overlap(half, mask).dice, 0.0);
  std::mt19937_64 rng(1);
  std::uniform_real_distribution<float> u(0, 1);
  for (int trial = 0; trial < 100; ++trial) {
    std::vector<float> p(6);
    for (float& v : p) v = u(rng);
    const auto o = hard_overlap(p, mask);
    EXPECT_LE(o.iou, o.dice);
    EXPECT_NEAR(o.iou, o.dice / (2 - o.dice), 1e-12);
  }
}

TEST(Evaluate, MatchesConfusionMatrixOracle) {
  const auto d = tiny_data(8, 30);
  const UNet m = init_params(tiny_model(), 8);
  std::vector<SiteSample> five(d.test.begin(), d.test.begin() + 5);
  const auto recs = evaluate(m, five, 0.5, 17, 2);
  ASSERT_EQ(recs.size(), 5u);
  for (std::size_t i = 0; i < 5; ++i) {
    const auto pred = m.predict(five[i].image, 1);
    double tp = 0, fp = 0, fn = 0;
    for (std::size_t p = 0; p < pred.size(); ++p) {
      const bool on = pred[p] > 0.5f, y = five[i].mask[p] == 1.0f;
      tp += on && y;
      fp += on && !y;
      fn += !on && y;
    }
    const double dice = tp + fp + fn == 0 ? 1.0 : 2 * tp / (2 * tp + fp + fn);
    EXPECT_NEAR(recs[i].dice, dice, 1e-12);
    EXPECT_EQ(recs[i].sample_id, five[i].id);
    EXPECT_EQ(recs[i].checkpoint_step, 17);
    EXPECT_TRUE(std::isfinite(recs[i].fd_last_decoder));
  }
  EXPECT_THROW(evaluate(m, {}), ContractError);
}

TEST(Partition, ForcedExample) {
  std::vector<MetricsRecord> r(4);
  const double dice[] = {0.2, 0.5, 0.9, 0.95};
  for (int i = 0; i < 4; ++i) {
    r[i].sample_id = i;
    r[i].dice = dice[i];
  }
  const auto p = partition_worst_off(r, 0.4);
  EXPECT_EQ(p.worst, std::vector<int>{0});
  EXPECT_EQ(p.best, std::vector<int>{3});
  EXPECT_TRUE(p.warnings.empty());
}

TEST(Partition, DegenerateCasesWarn) {
  std::vector<MetricsRecord> r(3);
  for (int i = 0; i < 3; ++i) r[i].dice = 0.8 + 0.05 * i;
  auto p = partition_worst_off(r, 0.5);
  EXPECT_TRUE(p.worst.empty() && p.best.empty());
  EXPECT_FALSE(p.warnings.empty());
  p = partition_worst_off(r, 0.99);
  EXPECT_TRUE(p.worst.empty() && p.best.empty());
  EXPECT_FALSE(p.warnings.empty());
  EXPECT_THROW(partition_worst_off(r, 1.0), ContractError);
  EXPECT_THROW(partition_worst_off(r, 0.0), ContractError);
}

TEST(Partition, PropertiesOnRandomRecords) {
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> u(0, 1);
  for (int trial = 0; trial < 200; ++trial) {
    std::vector<MetricsRecord> r(1 + trial % 17);
    for (std::size_t i = 0; i < r.size(); ++i) {
      r[i].sample_id = static_cast<int>(i);
      r[i].dice = u(rng);
    }
    const double thr = 0.05 + 0.9 * u(rng);
    const auto p = partition_worst_off(r, thr);
    for (int id : p.worst) EXPECT_LT(r[id].dice, thr);
    for (int id : p.best) {
      EXPECT_GE(r[id].dice, thr);
      EXPECT_EQ(std::count(p.worst.begin(), p.worst.end(), id), 0);
    }
    EXPECT_LE(p.best.size(), p.worst.size());
    if (!p.best.empty()) {
      double lowest_best = 1;
      for (int id : p.best) lowest_best = std::min(lowest_best, r[id].dice);
      int above = 0;
      for (const auto& x : r) above += x.dice > lowest_best;
      EXPECT_LT(above, static_cast<int>(p.best.size()));
    }
  }
}

TEST(Partition, SeededRunsReproduceTheGap) {
  const auto d = tiny_data(9, 40);
  auto gap = [&]() {
    const auto r = train(tiny_train(LossMode::SegOnly, 2, 0), init_params(tiny_model(), 9), d);
    const auto recs = evaluate(r.best_model, d.test);
    const auto p = partition_worst_off(recs, 0.7);
    double w = 0, b = 0;
    for (int id : p.worst)
      for (const auto& x : recs) w += x.sample_id == id ? x.dice : 0;
    for (int id : p.best)
      for (const auto& x : recs) b += x.sample_id == id ? x.dice : 0;
    return p.worst.empty() ? 0.0 : (b - w) / p.worst.size();
  };
  EXPECT_NEAR(gap(), gap(), 0.02);
}

TEST(TTest, OneToFiveAgainstZero) {
  const std::vector<double> runs = {1, 2, 3, 4, 5};
  const auto r = one_sample_t_test(0.0, runs);
  EXPECT_NEAR(r.t, 4.242640687119285, 1e-9);
  EXPECT_NEAR(r.p, 0.013235599563682695, 1e-9);
  EXPECT_EQ(r.dof, 4);
  EXPECT_NEAR(r.sd, std::sqrt(2.5), 1e-12);
  EXPECT_FALSE(r.degenerate_variance);
}

TEST(TTest, SecondFixture) {
  const std::vector<double> runs = {0.81, 0.84, 0.79, 0.86, 0.83};
  const auto r = one_sample_t_test(0.8, runs);
  EXPECT_NEAR(r.t, 2.151775310366152, 1e-9);
  EXPECT_NEAR(r.p, 0.09778665378822528, 1e-9);
}

TEST(TTest, DegenerateVariance) {
  const std::vector<double> same = {0.7, 0.7, 0.7};
  auto r = one_sample_t_test(0.7, same);
  EXPECT_EQ(r.p, 1.0);
  EXPECT_TRUE(r.degenerate_variance);
  r = one_sample_t_test(0.5, same);
  EXPECT_EQ(r.p, 0.0);
  EXPECT_TRUE(r.degenerate_variance);
  const std::vector<double> one = {1.0};
  EXPECT_THROW(one_sample_t_test(0.0, one), ContractError);
}

TEST(StudentT, MatchesReferenceValues) {
  EXPECT_NEAR(student_t_cdf(1.5, 2), 0.8638034375544995, 1e-9);
  EXPECT_NEAR(student_t_cdf(-2.0, 7), 0.04280966428148798, 1e-9);
  EXPECT_NEAR(student_t_cdf(0.3, 1), 0.5927735790777423, 1e-9);
  EXPECT_NEAR(student_t_cdf(3.1, 30), 0.9979077575697246, 1e-9);
}

TEST(StudentT, ClosedFormsForOneAndTwoDof) {
  for (double t = -20; t <= 20; t += 0.37) {
    EXPECT_NEAR(student_t_cdf(t, 1), 0.5 + std::atan(t) / M_PI, 1e-9);
    EXPECT_NEAR(student_t_cdf(t, 2), 0.5 + t / (2 * std::sqrt(2 + t * t)), 1e-9);
    for (int dof : {3, 9, 40}) EXPECT_NEAR(student_t_cdf(t, dof) + student_t_cdf(-t, dof), 1.0, 1e-9);
  }
}

TEST(Csv, EvalFormat) {
  MetricsRecord r;
  r.sample_id = 3;
  r.dice = 0.5;
  r.iou = 1.0 / 3;
  r.fd_last_decoder = -1.25;
  std::ostringstream os;
  write_eval_csv(os, {r});
  EXPECT_EQ(os.str(), "sample_id,dice,iou,fd_last_decoder\n3,0.500000,0.333333,-1.250000\n");
}
