#include <gtest/gtest.h>

#include "support.hpp"

using namespace dcc;
using testing_support::bit_equal;
using testing_support::Gen;

namespace {

const ToyBackbone& toy() {
  static const auto b = make_toy_backbone();
  return *b;
}

TrainConfig fixed_ratio(double r, int patch = 0) {
  TrainConfig c;
  c.mask_ratio_min = r;
  c.mask_ratio_max = r;
  c.patch_size = patch;
  return c;
}

TrainConfig small_config(int steps = 3, int batch = 4) {
  TrainConfig c;
  c.steps = steps;
  c.batch_size = batch;
  c.seed = 11;
  return c;
}

// Parameters moved away from initialisation so that every loss term is
// non-trivial and differentiable.
TrainableParams perturbed(const Concept& c, std::uint64_t seed) {
  Gen g(seed);
  auto p = TrainableParams::from_concept(c);
  for (auto& v : p.v_star.data) v += 0.2 * g.normal();
  for (auto& m : p.key_outputs)
    for (auto& v : m.data) v = 0.3 * g.normal();
  for (auto& m : p.value_outputs)
    for (auto& v : m.data) v = 0.3 * g.normal();
  return p;
}

}  // namespace

TEST(RandomMask, ZeroRatioKeepsEverything) {
  Rng rng(1);
  const auto m = generate_random_mask(32, 8, fixed_ratio(0.0), ConceptKind::identity, nullptr, rng);
  EXPECT_EQ(m.occluded_patches, 0);
  for (double v : m.latent_mask.data) EXPECT_EQ(v, 1.0);
  for (float v : m.pixel_mask.data) EXPECT_EQ(v, 1.0f);
}

TEST(RandomMask, HalfRatioOccludesExactlyHalfThePatches) {
  Rng rng(2);
  const auto m = generate_random_mask(64, 8, fixed_ratio(0.5, 8), ConceptKind::identity, nullptr, rng);
  EXPECT_EQ(m.total_patches, 64);
  EXPECT_EQ(m.occluded_patches, 32);
  int zero_patches = 0;
  for (int py = 0; py < 8; ++py)
    for (int px = 0; px < 8; ++px) {
      const float v = m.occlusion.at(px * 8, py * 8, 0);
      // Patches are all-or-nothing.
      for (int y = 0; y < 8; ++y)
        for (int x = 0; x < 8; ++x) ASSERT_EQ(m.occlusion.at(px * 8 + x, py * 8 + y, 0), v);
      if (v == 0.0f) ++zero_patches;
    }
  EXPECT_EQ(zero_patches, 32);
}

TEST(RandomMask, PropertiesOverRandomDraws) {
  Gen g(3);
  const Image region = testing_support::face_region(32);
  for (int trial = 0; trial < 200; ++trial) {
    TrainConfig cfg;
    cfg.mask_ratio_min = g.uniform(0, 0.5);
    cfg.mask_ratio_max = g.uniform(cfg.mask_ratio_min, 1.0);
    Rng rng(static_cast<std::uint64_t>(trial));
    const auto kind = g.coin() ? ConceptKind::identity : ConceptKind::style;
    const Image* r = g.coin() ? &region : nullptr;
    const auto m = generate_random_mask(32, 8, cfg, kind, r, rng);
    ASSERT_EQ(m.latent_mask.rows, 64u);
    ASSERT_EQ(m.latent_mask.cols, 1u);
    for (double v : m.latent_mask.data) {
      EXPECT_GE(v, 0.0);
      EXPECT_LE(v, 1.0);
    }
    EXPECT_GE(m.occluded_patches, static_cast<int>(std::lround(cfg.mask_ratio_min * 64)));
    EXPECT_LE(m.occluded_patches, static_cast<int>(std::lround(cfg.mask_ratio_max * 64)));
    int zeros = 0;
    for (float v : m.occlusion.data) zeros += v == 0.0f;
    EXPECT_EQ(zeros, m.occluded_patches * 16);
  }
}

TEST(RandomMask, StyleDownweightsFaceCells) {
  const Image region = testing_support::face_region(32);
  TrainConfig cfg = fixed_ratio(0.5);
  Rng rng(4);
  const auto m = generate_random_mask(32, 8, cfg, ConceptKind::style, &region, rng);
  int face_cells = 0;
  for (int y = 0; y < 32; ++y)
    for (int x = 0; x < 32; ++x) {
      const float occ = m.occlusion.at(x, y, 0);
      const float want = region.at(x, y, 0) > 0.5f ? occ * 0.2f : occ;
      EXPECT_FLOAT_EQ(m.pixel_mask.at(x, y, 0), want);
    }
  // Latent cells whose 4x4 footprint lies fully inside the face.
  for (int cy = 0; cy < 8; ++cy)
    for (int cx = 0; cx < 8; ++cx) {
      bool inside = true;
      for (int y = 0; y < 4; ++y)
        for (int x = 0; x < 4; ++x) inside = inside && region.at(cx * 4 + x, cy * 4 + y, 0) > 0.5f;
      if (!inside) continue;
      ++face_cells;
      const double occ = m.occlusion.at(cx * 4, cy * 4, 0);
      EXPECT_NEAR(m.latent_mask.data[static_cast<std::size_t>(cy * 8 + cx)], 0.2 * occ, 1e-7);
    }
  EXPECT_GT(face_cells, 4);
}

TEST(RandomMask, IdentityZeroesBackground) {
  const Image region = testing_support::face_region(32);
  Rng rng(5);
  const auto m = generate_random_mask(32, 8, fixed_ratio(0.25), ConceptKind::identity, &region, rng);
  int background_cells = 0;
  for (int cy = 0; cy < 8; ++cy)
    for (int cx = 0; cx < 8; ++cx) {
      bool outside = true;
      for (int y = 0; y < 4; ++y)
        for (int x = 0; x < 4; ++x) outside = outside && region.at(cx * 4 + x, cy * 4 + y, 0) < 0.5f;
      if (!outside) continue;
      ++background_cells;
      EXPECT_EQ(m.latent_mask.data[static_cast<std::size_t>(cy * 8 + cx)], 0.0);
    }
  EXPECT_GT(background_cells, 4);
}

TEST(RandomMask, Errors) {
  Rng rng(6);
  const Image region = testing_support::face_region(16);
  EXPECT_THROW(generate_random_mask(32, 8, fixed_ratio(0.5), ConceptKind::style, &region, rng), ResolutionMismatch);
  EXPECT_THROW(generate_random_mask(32, 8, fixed_ratio(0.5, 5), ConceptKind::style, nullptr, rng), std::invalid_argument);
}

TEST(ApplyOcclusion, OccludedPixelsBecomeMidGrey) {
  Rng rng(7);
  const Image img = testing_support::face_image(32);
  const auto m = generate_random_mask(32, 8, fixed_ratio(0.5), ConceptKind::identity, nullptr, rng);
  const Image out = apply_occlusion(img, m.occlusion);
  for (int y = 0; y < 32; ++y)
    for (int x = 0; x < 32; ++x)
      for (int c = 0; c < 3; ++c)
        EXPECT_EQ(out.at(x, y, c), m.occlusion.at(x, y, 0) == 0.0f ? 0.5f : img.at(x, y, c));
}

TEST(TrainConfig, ValidationAndStepDefaults) {
  TrainConfig c;
  EXPECT_NO_THROW(c.validate());
  EXPECT_EQ(c.steps_for(ConceptKind::identity), c.identity_steps);
  EXPECT_EQ(c.steps_for(ConceptKind::style), c.style_steps);
  EXPECT_EQ(c.patch_for(32), 4);
  EXPECT_EQ(c.patch_for(512), 64);
  c.steps = 7;
  EXPECT_EQ(c.steps_for(ConceptKind::style), 7);
  auto bad = [](auto mutate) {
    TrainConfig t;
    mutate(t);
    EXPECT_THROW(t.validate(), std::invalid_argument);
  };
  bad([](TrainConfig& t) { t.batch_size = 0; });
  bad([](TrainConfig& t) { t.lr_outputs = 0; });
  bad([](TrainConfig& t) { t.lambda_encoding = -1; });
  bad([](TrainConfig& t) { t.mask_ratio_min = 0.8; t.mask_ratio_max = 0.2; });
  bad([](TrainConfig& t) { t.mask_ratio_max = 1.5; });
  bad([](TrainConfig& t) { t.ema_beta = 1.0; });
  bad([](TrainConfig& t) { t.steps = -1; });
}

TEST(TrainingSetup, ResolutionAndReferenceValues) {
  EXPECT_THROW(TrainingSetup::create(testing_support::face_image(16), "man", ConceptKind::identity, toy(), nullptr),
               ResolutionMismatch);
  const auto s = TrainingSetup::create(testing_support::face_image(32), "man", ConceptKind::identity, toy(), nullptr);
  EXPECT_EQ(s.concept_index, s.prompt.placeholders.front().token_index);
  const Concept c = init_concept("man", ConceptKind::identity, toy());
  ASSERT_EQ(s.superclass_embedding.size(), c.v_star.size());
  for (std::size_t i = 0; i < c.v_star.size(); ++i) EXPECT_EQ(s.superclass_embedding.data[i], c.v_star[i]);
  for (std::size_t i = 0; i < c.i_star.size(); ++i)
    EXPECT_EQ(static_cast<float>(s.superclass_token_encoding[i]), c.i_star[i]);
}

TEST(DrawBatch, SizeAndShapes) {
  const auto s = TrainingSetup::create(testing_support::face_image(32), "man", ConceptKind::identity, toy(), nullptr);
  TrainConfig cfg;
  Rng rng(8);
  const auto batch = draw_batch(s, toy(), cfg, rng);
  ASSERT_EQ(batch.size(), 16u);
  for (const auto& e : batch) {
    EXPECT_GE(e.timestep, 0);
    EXPECT_LT(e.timestep, toy().schedule().steps);
    EXPECT_EQ(e.noise.rows, e.masked_latent.rows);
    EXPECT_EQ(e.noise.cols, e.masked_latent.cols);
    EXPECT_EQ(e.mask.latent_mask.rows, e.masked_latent.rows);
  }
}

TEST(TotalLoss, RegularisersVanishAtInitialisation) {
  const auto s = TrainingSetup::create(testing_support::face_image(32), "man", ConceptKind::identity, toy(), nullptr);
  const Concept c = init_concept("man", ConceptKind::identity, toy());
  Rng rng(9);
  const auto batch = draw_batch(s, toy(), small_config(), rng);
  const auto t = total_loss(toy(), s, TrainableParams::from_concept(c), to_double(c.i_star), batch, small_config(),
                            nullptr);
  EXPECT_EQ(t.reg_embedding, 0.0);
  EXPECT_EQ(t.reg_encoding, 0.0);
  EXPECT_GT(t.masked, 0.0);
  EXPECT_NEAR(t.total, t.masked, 1e-12);
}

TEST(TotalLoss, EmbeddingRegulariserIsSquaredOffset) {
  const auto s = TrainingSetup::create(testing_support::face_image(32), "man", ConceptKind::identity, toy(), nullptr);
  const Concept c = init_concept("man", ConceptKind::identity, toy());
  Rng rng(10);
  const auto batch = draw_batch(s, toy(), small_config(3, 1), rng);
  for (double delta : {1e-3, 0.1, 0.7}) {
    auto p = TrainableParams::from_concept(c);
    p.v_star.data[0] += delta;
    const auto t = total_loss(toy(), s, p, to_double(c.i_star), batch, small_config(3, 1), nullptr);
    EXPECT_NEAR(t.reg_embedding, delta * delta, 1e-7);
  }
}

TEST(TotalLoss, ZeroLambdasLeaveOnlyMaskedTerm) {
  const auto s = TrainingSetup::create(testing_support::face_image(32), "man", ConceptKind::identity, toy(), nullptr);
  const Concept c = init_concept("man", ConceptKind::identity, toy());
  TrainConfig cfg = small_config(3, 2);
  cfg.lambda_embedding = 0;
  cfg.lambda_encoding = 0;
  Rng rng(11);
  const auto batch = draw_batch(s, toy(), cfg, rng);
  const auto t = total_loss(toy(), s, perturbed(c, 1), to_double(c.i_star), batch, cfg, nullptr);
  EXPECT_GT(t.reg_embedding, 0.0);
  EXPECT_GT(t.reg_encoding, 0.0);
  EXPECT_EQ(t.total, t.masked);
}

TEST(TotalLoss, TermsCombineWithLambdas) {
  const auto s = TrainingSetup::create(testing_support::face_image(32), "man", ConceptKind::style, toy(), nullptr);
  const Concept c = init_concept("man", ConceptKind::style, toy());
  TrainConfig cfg = small_config(3, 2);
  cfg.lambda_embedding = 0.3;
  cfg.lambda_encoding = 2.0;
  Rng rng(12);
  const auto batch = draw_batch(s, toy(), cfg, rng);
  const auto t = total_loss(toy(), s, perturbed(c, 2), to_double(c.i_star), batch, cfg, nullptr);
  EXPECT_NEAR(t.total, t.masked + 0.3 * t.reg_embedding + 2.0 * t.reg_encoding, 1e-12);
}

TEST(TotalLoss, GradientsMatchFiniteDifferences) {
  const auto s = TrainingSetup::create(testing_support::face_image(32), "man", ConceptKind::identity, toy(), nullptr);
  const Concept c = init_concept("man", ConceptKind::identity, toy());
  const TrainConfig cfg = small_config(3, 2);
  Rng rng(13);
  const auto batch = draw_batch(s, toy(), cfg, rng);
  const auto target = to_double(c.i_star);
  TrainableParams p = perturbed(c, 3);
  Gradients g;
  total_loss(toy(), s, p, target, batch, cfg, &g);

  Gen gen(14);
  const double h = 1e-5;
  auto probe = [&](Matrix& m, const Matrix& grad, const char* what) {
    for (int k = 0; k < 10; ++k) {
      const auto i = static_cast<std::size_t>(gen.integer(0, static_cast<long>(m.data.size()) - 1));
      const double saved = m.data[i];
      m.data[i] = saved + h;
      const double up = total_loss(toy(), s, p, target, batch, cfg, nullptr).total;
      m.data[i] = saved - h;
      const double down = total_loss(toy(), s, p, target, batch, cfg, nullptr).total;
      m.data[i] = saved;
      const double fd = (up - down) / (2 * h);
      EXPECT_NEAR(grad.data[i], fd, 1e-3 * std::max(std::abs(fd), 1e-4)) << what << " entry " << i;
    }
  };
  probe(p.v_star, g.v_star, "v*");
  const auto l = static_cast<std::size_t>(gen.integer(0, static_cast<long>(p.key_outputs.size()) - 1));
  probe(p.key_outputs[l], g.key_outputs[l], "o*_K");
  probe(p.value_outputs[l], g.value_outputs[l], "o*_V");
}

TEST(TotalLoss, GradientReachesEveryTrainableTensorAtInit) {
  const auto s = TrainingSetup::create(testing_support::face_image(32), "man", ConceptKind::identity, toy(), nullptr);
  const Concept c = init_concept("man", ConceptKind::identity, toy());
  Rng rng(15);
  const auto batch = draw_batch(s, toy(), small_config(3, 2), rng);
  Gradients g;
  total_loss(toy(), s, TrainableParams::from_concept(c), to_double(c.i_star), batch, small_config(3, 2), &g);
  auto norm = [](const Matrix& m) {
    double n = 0;
    for (double v : m.data) n += v * v;
    return n;
  };
  EXPECT_GT(norm(g.v_star), 0.0);
  ASSERT_EQ(g.key_outputs.size(), toy().info().layers.size());
  for (std::size_t l = 0; l < g.key_outputs.size(); ++l) {
    EXPECT_GT(norm(g.key_outputs[l]), 0.0) << "layer " << l;
    EXPECT_GT(norm(g.value_outputs[l]), 0.0) << "layer " << l;
  }
}

TEST(TotalLoss, OccludedPixelsDoNotAffectTheLoss) {
  Gen g(16);
  const Image base = testing_support::face_image(32);
  const auto s0 = TrainingSetup::create(base, "man", ConceptKind::identity, toy(), nullptr);
  const Concept c = init_concept("man", ConceptKind::identity, toy());
  const TrainConfig cfg = small_config(3, 1);
  const auto params = perturbed(c, 4);
  int checked = 0;
  for (std::uint64_t seed = 0; seed < 6; ++seed) {
    Rng rng(seed);
    const auto batch = draw_batch(s0, toy(), cfg, rng);
    Image other = base;
    for (int y = 0; y < 32; ++y)
      for (int x = 0; x < 32; ++x)
        if (batch[0].mask.occlusion.at(x, y, 0) == 0.0f)
          for (int ch = 0; ch < 3; ++ch) other.at(x, y, ch) = static_cast<float>(g.uniform(0, 1));
    const auto s1 = TrainingSetup::create(other, "man", ConceptKind::identity, toy(), nullptr);
    Rng rng1(seed);
    const auto batch1 = draw_batch(s1, toy(), cfg, rng1);
    ASSERT_TRUE(bit_equal(batch[0].masked_latent, batch1[0].masked_latent));
    const double a = total_loss(toy(), s0, params, to_double(c.i_star), batch, cfg, nullptr).total;
    const double b = total_loss(toy(), s1, params, to_double(c.i_star), batch1, cfg, nullptr).total;
    EXPECT_EQ(a, b);
    ++checked;
  }
  EXPECT_EQ(checked, 6);
}

TEST(Trainer, DeterministicForASeed) {
  const Image img = testing_support::face_image(32);
  const auto a = finetune(img, "man", ConceptKind::identity, toy(), small_config());
  const auto b = finetune(img, "man", ConceptKind::identity, toy(), small_config());
  EXPECT_EQ(serialize_concept(a), serialize_concept(b));
  TrainConfig other = small_config();
  other.seed = 12;
  const auto d = finetune(img, "man", ConceptKind::identity, toy(), other);
  EXPECT_NE(serialize_concept(a), serialize_concept(d));
}

TEST(Trainer, LeavesFrozenWeightsUntouched) {
  const std::string before = toy().weights_digest();
  finetune(testing_support::face_image(32), "woman", ConceptKind::style, toy(), small_config(2, 2));
  EXPECT_EQ(toy().weights_digest(), before);
}

TEST(Trainer, UpdatesOnlyConceptParametersAndRecordsMetadata) {
  Trainer t(toy(), testing_support::face_image(32), "man", ConceptKind::identity, small_config(4, 2));
  EXPECT_EQ(t.total_steps(), 4);
  const Concept init = init_concept("man", ConceptKind::identity, toy());
  EXPECT_EQ(t.params().count(), concept_parameter_count(toy().info()));
  EXPECT_EQ(t.params().count(), 576u);
  std::vector<int> seen;
  const Concept c = t.run([&](int step, int total, const LossTerms& terms) {
    seen.push_back(step);
    EXPECT_EQ(total, 4);
    EXPECT_TRUE(std::isfinite(terms.total));
  });
  EXPECT_EQ(seen, (std::vector<int>{1, 2, 3, 4}));
  EXPECT_EQ(c.parameter_count(), init.parameter_count());
  EXPECT_NE(c.v_star, init.v_star);
  bool outputs_moved = false;
  for (const auto& o : c.outputs)
    for (float v : o.value) outputs_moved = outputs_moved || v != 0.0f;
  EXPECT_TRUE(outputs_moved);
  EXPECT_NE(c.i_star, init.i_star);
  EXPECT_EQ(c.backbone_fingerprint, toy().info().fingerprint());
  EXPECT_EQ(c.training.at("steps").get<int>(), 4);
  EXPECT_EQ(c.training.at("steps_done").get<int>(), 4);
  EXPECT_EQ(c.training.at("batch_size").get<int>(), 2);
  EXPECT_DOUBLE_EQ(c.training.at("lambda_encoding").get<double>(), 0.1);
  EXPECT_EQ(c.training.at("optimizer"), "adamw");
  EXPECT_EQ(c.training.at("prompt"), training_prompt(ConceptKind::identity));
  EXPECT_TRUE(c.training.contains("final_masked_loss"));
}

TEST(Trainer, TargetInputFollowsEmaOfEncodedToken) {
  Trainer t(toy(), testing_support::face_image(32), "man", ConceptKind::identity, small_config(2, 1));
  const auto before = t.target_input();
  const auto terms = t.step();
  const auto after = t.target_input();
  ASSERT_EQ(after.size(), before.size());
  for (std::size_t i = 0; i < after.size(); ++i)
    EXPECT_NEAR(after[i], 0.98 * before[i] + 0.02 * terms.encoded_token[i], 1e-12);
}

TEST(Trainer, RejectsBadConfigAndResolution) {
  TrainConfig bad = small_config();
  bad.batch_size = 0;
  EXPECT_THROW(Trainer(toy(), testing_support::face_image(32), "man", ConceptKind::identity, bad),
               std::invalid_argument);
  EXPECT_THROW(Trainer(toy(), testing_support::face_image(24), "man", ConceptKind::identity, small_config()),
               ResolutionMismatch);
}
