// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include "uamvse/training.hpp"

using namespace uamvse;

namespace {

struct SmallRun {
  Dataset data;
  ModelConfig model;
  TrainConfig train;
};

SmallRun small_run() {
  SmallRun r;
  SynthConfig sc;
  sc.num_images = 60;
  sc.captions_per_image = 3;
  sc.latent_dim = 6;
  sc.d1 = 10;
  sc.d2 = 8;
  sc.regions_per_image = 4;
  sc.tokens_per_caption = 3;
  sc.seed = 2;
  r.data = generate_synthetic(sc);
  r.model.d1 = 10;
  r.model.d2 = 8;
  r.model.d_emb = 8;
  r.model.K = 2;
  r.model.hidden = 16;
  r.train.epochs = 6;
  r.train.batch_size = 16;
  r.train.lr0 = 5e-3;
  return r;
}

}  // namespace

TEST(LrSchedule, StepDecay) {
  const TrainConfig tc;
  EXPECT_DOUBLE_EQ(lr_at(0, tc), 5e-4);
  EXPECT_DOUBLE_EQ(lr_at(9, tc), 5e-4);
  EXPECT_DOUBLE_EQ(lr_at(10, tc), 4.5e-4);
  EXPECT_DOUBLE_EQ(lr_at(20, tc), 4.05e-4);
  EXPECT_DOUBLE_EQ(lr_at(29, tc), 4.05e-4);
}

TEST(CentralDifference, QuadraticIsExact) {
  auto f = [](std::span<const double> x) { return 3.0 * x[0] * x[0] - 2.0 * x[0] * x[1] + x[1]; };
  const Vec x{0.7, -1.3};
  EXPECT_NEAR(central_difference(f, x, 0, 1e-5), 6.0 * 0.7 + 2.6, 1e-10);
  EXPECT_NEAR(central_difference(f, x, 1, 1e-5), -1.4 + 1.0, 1e-10);
  EXPECT_THROW(central_difference(f, x, 2, 1e-5), Error);
  EXPECT_THROW(central_difference(f, x, 0, 0.0), Error);
}

TEST(GradientCheck, AllLossesAndPoolings) {
  const auto rep = gradient_check_suite(3, 10, 2);
  EXPECT_EQ(rep.cases.size(), 12u);
  for (const auto &c : rep.cases) {
    EXPECT_LT(c.max_rel_error, 1e-4) << to_string(c.loss) << " " << to_string(c.pooling) << " seed " << c.seed;
    EXPECT_EQ(c.checked, 10u);
  }
  EXPECT_TRUE(rep.passed());
}

TEST(GradientCheck, EveryEntryOnOneProblem) {
  for (Pooling pooling : {Pooling::Mean, Pooling::GpoLite}) {
    const auto prob = make_grad_check_problem(pooling, 4);
    ModelParams p = init_params(prob.model, 4);
    Vec flat = p.flatten();
    Rng j(5);
    for (double &x : flat) x += 0.1 * j.normal();
    p.unflatten(flat);
    for (LossKind loss : {LossKind::Triplet, LossKind::GlobalNll}) {
      TrainConfig tc;
      tc.loss = loss;
      const auto fb = forward_backward(prob.data, prob.batch, p, prob.model, tc);
      const Vec g = fb.grads.flatten();
      for (std::size_t i = 0; i < g.size(); ++i) {
        const double fd = finite_diff_gradient(prob.data, prob.batch, p, prob.model, tc, i, 1e-5, &fb.branch);
        EXPECT_LT(relative_error(g[i], fd), 1e-4) << "param " << i;
      }
    }
  }
}

TEST(GradientCheck, UnusedCoefficientsHaveZeroGradient) {
  // Mean pooling never reads the gpo coefficients.
  const auto prob = make_grad_check_problem(Pooling::Mean, 1);
  const ModelParams p = init_params(prob.model, 1);
  const TrainConfig tc;
  const auto fb = forward_backward(prob.data, prob.batch, p, prob.model, tc);
  const std::size_t first = p.num_values() - p.pool_img.size() - p.pool_txt.size();
  for (std::size_t i = first; i < p.num_values(); ++i) {
    EXPECT_EQ(fb.grads.flatten()[i], 0.0);
    EXPECT_LT(std::abs(finite_diff_gradient(prob.data, prob.batch, p, prob.model, tc, i, 1e-5)), 1e-8);
  }
}

TEST(ForwardBackward, LossEqualsLossModule) {
  const auto prob = make_grad_check_problem(Pooling::Max, 2);
  const ModelParams p = init_params(prob.model, 2);
  for (LossKind loss : {LossKind::Triplet, LossKind::GlobalNll}) {
    TrainConfig tc;
    tc.loss = loss;
    std::vector<Mat> views;
    Mat texts(prob.batch.size(), prob.model.d_emb);
    for (std::size_t b = 0; b < prob.batch.size(); ++b) {
      views.push_back(encode_image(prob.data.images[prob.batch[b].image], p, prob.model));
      const Vec t = encode_text(prob.data.captions[prob.batch[b].caption], p, prob.model);
      std::copy(t.begin(), t.end(), texts.row(b).begin());
    }
    const SimilarityTensor S = similarity_tensor(views, texts);
    const auto W = uncertainty_weights(S);
    const double expected =
        loss == LossKind::Triplet ? weighted_triplet_loss(S, W, {}).loss : global_nll_loss(S, W);
    EXPECT_EQ(forward_backward(prob.data, prob.batch, p, prob.model, tc).loss, expected);
  }
}

TEST(ForwardBackward, ZeroLossBatchLeavesParamsUnchanged) {
  // One pair repeated: every score ties, so no hinge with margin 0 is active.
  const auto prob = make_grad_check_problem(Pooling::Mean, 3);
  const ModelParams p = init_params(prob.model, 3);
  TrainConfig tc;
  tc.margin = 0.0;
  const Batch same{{0, 0}, {0, 0}, {0, 0}};
  const auto fb = forward_backward(prob.data, same, p, prob.model, tc);
  EXPECT_EQ(fb.loss, 0.0);
  for (double g : fb.grads.flatten()) EXPECT_EQ(g, 0.0);
  ModelParams q = p;
  AdamState st;
  adam_step(q, fb.grads, st, 1e-3);
  EXPECT_EQ(q, p);
}

TEST(ForwardBackward, RepeatedBatchMeanEqualsSingleBatch) {
  const auto prob = make_grad_check_problem(Pooling::GpoLite, 5);
  const ModelParams p = init_params(prob.model, 5);
  const TrainConfig tc;
  const auto one = forward_backward(prob.data, prob.batch, p, prob.model, tc);
  const std::vector<Batch> twice{prob.batch, prob.batch};
  const auto two = forward_backward_mean(prob.data, twice, p, prob.model, tc);
  EXPECT_EQ(two.loss, one.loss);
  EXPECT_EQ(two.grads.flatten(), one.grads.flatten());
}

TEST(Adam, FirstStepMovesByLrTimesSign) {
  ModelConfig mc;
  mc.d1 = 3;
  mc.d2 = 2;
  mc.d_emb = 2;
  mc.K = 1;
  mc.hidden = 2;
  mc.gpo_points = 2;
  ModelParams p = init_params(mc, 1);
  Gradients g = ModelParams::zeros(mc);
  Vec gf = g.flatten();
  Rng rng(2);
  for (double &x : gf) x = rng.uniform(-1.0, 1.0);
  gf[0] = 0.0;
  g.unflatten(gf);
  const Vec before = p.flatten();
  AdamState st;
  adam_step(p, g, st, 1e-3);
  const Vec after = p.flatten();
  EXPECT_EQ(after[0], before[0]);
  for (std::size_t i = 1; i < gf.size(); ++i) {
    const double sign = gf[i] > 0 ? 1.0 : -1.0;
    EXPECT_NEAR(after[i] - before[i], -1e-3 * sign, 1e-9);
  }
  ModelParams p2 = init_params(mc, 1);
  AdamState st2;
  adam_step(p2, g, st2, 1e-3);
  EXPECT_EQ(p2, p);
  EXPECT_EQ(st2, st);
}

TEST(Sgd, PlainStep) {
  ModelConfig mc;
  mc.d1 = 2;
  mc.d2 = 2;
  mc.d_emb = 1;
  mc.K = 1;
  mc.hidden = 1;
  mc.gpo_points = 1;
  ModelParams p = ModelParams::zeros(mc);
  Gradients g = ModelParams::zeros(mc);
  g.W1(0, 1) = 2.0;
  sgd_step(p, g, 0.25);
  EXPECT_EQ(p.W1(0, 1), -0.5);
  EXPECT_EQ(p.W1(0, 0), 0.0);
}

TEST(ClipGlobalNorm, RescalesOnlyAboveThreshold) {
  ModelConfig mc;
  mc.d1 = 2;
  mc.d2 = 2;
  mc.d_emb = 1;
  mc.K = 1;
  mc.hidden = 1;
  mc.gpo_points = 1;
  Gradients g = ModelParams::zeros(mc);
  g.W1(0, 0) = 3.0;
  g.bt[0] = 4.0;
  Gradients small = g;
  EXPECT_DOUBLE_EQ(clip_global_norm(g, 2.0), 5.0);
  EXPECT_DOUBLE_EQ(g.W1(0, 0), 1.2);
  EXPECT_DOUBLE_EQ(g.bt[0], 1.6);
  EXPECT_DOUBLE_EQ(clip_global_norm(small, 10.0), 5.0);
  EXPECT_EQ(small.W1(0, 0), 3.0);
  clip_global_norm(small, 0.0);
  EXPECT_EQ(small.bt[0], 4.0);
}

TEST(Train, ZeroEpochsReturnsInitialization) {
  SmallRun r = small_run();
  r.train.epochs = 0;
  const auto res = train(r.data, r.model, r.train);
  EXPECT_EQ(res.params, init_params(r.model, r.train.seed));
  EXPECT_TRUE(res.log.empty());
}

TEST(Train, Deterministic) {
  const SmallRun r = small_run();
  const auto a = train(r.data, r.model, r.train);
  const auto b = train(r.data, r.model, r.train);
  EXPECT_EQ(a.params, b.params);
  EXPECT_EQ(a.last_params, b.last_params);
  EXPECT_EQ(a.log, b.log);
}

TEST(Train, LossDecreasesForBothObjectives) {
  for (LossKind loss : {LossKind::Triplet, LossKind::GlobalNll}) {
    SmallRun r = small_run();
    r.train.loss = loss;
    const auto res = train(r.data, r.model, r.train);
    ASSERT_EQ(res.log.size(), r.train.epochs);
    for (std::size_t e = 1; e < 5; ++e) {
      EXPECT_LT(res.log[e].train_loss, res.log[e - 1].train_loss) << to_string(loss) << " epoch " << e;
    }
    EXPECT_LT(res.log.back().train_loss, res.log.front().train_loss);
    const double best = std::max_element(res.log.begin(), res.log.end(), [](const auto &x, const auto &y) {
                          return x.val_rsum < y.val_rsum;
                        })->val_rsum;
    EXPECT_EQ(res.log[res.best_epoch].val_rsum, best);
  }
}

TEST(Train, WritesRunDirectory) {
  SmallRun r = small_run();
  r.train.epochs = 2;
  const auto dir = std::filesystem::temp_directory_path() / "uamvse_test_run";
  std::filesystem::remove_all(dir);
  const auto res = train(r.data, r.model, r.train, {dir, {}});
  EXPECT_TRUE(std::filesystem::exists(dir / "epoch_000.uamp"));
  EXPECT_TRUE(std::filesystem::exists(dir / "epoch_001.uamp"));
  EXPECT_EQ(load_checkpoint(dir / "best.uamp").params, res.params);
  std::ifstream log(dir / "log.jsonl");
  std::string line;
  std::size_t lines = 0;
  while (std::getline(log, line)) {
    const auto j = nlohmann::json::parse(line);
    EXPECT_EQ(j.at("epoch").get<std::size_t>(), lines);
    ++lines;
  }
  EXPECT_EQ(lines, 2u);
  std::filesystem::remove_all(dir);
}

TEST(Train, RejectsMismatchedDims) {
  SmallRun r = small_run();
  r.model.d1 = 11;
  EXPECT_THROW(train(r.data, r.model, r.train), DataError);
  r = small_run();
  r.train.batch_size = 1;
  EXPECT_THROW(train(r.data, r.model, r.train), Error);
}

TEST(Train, UntrainedModelRetrievesNearChance) {
  double i2t = 0.0, t2i = 0.0, i2t_chance = 0.0, t2i_chance = 0.0;
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    SynthConfig sc;
    sc.seed = seed;
    const Dataset ds = generate_synthetic(sc);
    const ModelConfig mc;
    const Dataset test = ds.subset(ds.splits.test);
    const auto r = report(aggregate_scores(score_dataset(test, init_params(mc, seed), mc)).values, test.caption_to_image);
    i2t += r.i2t_r1 / 5.0;
    t2i += r.t2i_r1 / 5.0;
    i2t_chance = 100.0 / static_cast<double>(test.captions.size());
    t2i_chance = 100.0 / static_cast<double>(test.images.size());
  }
  EXPECT_LE(i2t, 5.0 * i2t_chance);
  EXPECT_LE(t2i, 5.0 * t2i_chance);
}
