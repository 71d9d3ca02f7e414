#include <gtest/gtest.h>

#include <cmath>

#include "gradcheck.hpp"
#include "magma/error.hpp"
#include "magma/objectives.hpp"
#include "toy_model.hpp"

using namespace magma;
using magma::testing::check_gradient;
using magma::testing::find_param;
using magma::testing::random_tensor;
using magma::testing::toy_config;

namespace {

MaskPlan manual_plan(std::vector<std::vector<std::size_t>> order, std::size_t visible) {
  MaskPlan p;
  p.num_patches = order.front().size();
  p.num_visible = visible;
  for (const auto& o : order) {
    std::vector<bool> m(o.size(), true);
    for (std::size_t j = 0; j < visible; ++j) m[o[j]] = false;
    p.masked.push_back(m);
  }
  p.order = std::move(order);
  return p;
}

ObjectiveConfig objective(Method m, int depth) {
  ObjectiveConfig c;
  c.method = m;
  c.reg = RegConfig::for_depth(depth);
  c.sched = Schedule::for_method(m);
  return c;
}

// The adaptive bandwidth at the current weights, so finite differences see
// the same constant the tape does.
double base_sigma(const VitMae& model, const Tensor& img, const MaskPlan& plan, const RegConfig& reg) {
  NoGradGuard guard;
  Encoded e = model.encode(img, plan);
  return adaptive_sigma(pairwise_sq_dists(pool_patches(e.blocks.at(reg.ref_layer), true)), reg.sigma_floor);
}

std::vector<double> grads_of(const VitMae& m) {
  std::vector<double> g;
  for (const auto& p : m.parameters()) {
    const auto pg = p.value.grad();
    if (pg.empty()) {
      g.insert(g.end(), p.value.numel(), 0.0);
    } else {
      g.insert(g.end(), pg.begin(), pg.end());
    }
  }
  return g;
}

}  // namespace

TEST(Reconstruction, ZeroWhenMaskedPatchesMatch) {
  MaskPlan plan = manual_plan({{0, 1, 2}}, 1);
  Tensor target = random_tensor({1, 3, 4}, 1);
  EXPECT_EQ(reconstruction_loss(target, target, plan, false).item(), 0.0);
}

TEST(Reconstruction, IgnoresVisiblePatches) {
  MaskPlan plan = make_mask(3, 0, 0, 4, 16, 0.75);
  Tensor target = random_tensor({4, 16, 3}, 1), pred = random_tensor({4, 16, 3}, 2);
  std::vector<double> perturbed(pred.data().begin(), pred.data().end());
  for (std::size_t b = 0; b < 4; ++b)
    for (std::size_t j = 0; j < plan.num_visible; ++j)
      for (std::size_t e = 0; e < 3; ++e) perturbed[(b * 16 + plan.order[b][j]) * 3 + e] += 100.0 * (e + 1);
  for (bool norm : {false, true}) {
    EXPECT_EQ(reconstruction_loss(pred, target, plan, norm).item(),
              reconstruction_loss(Tensor(pred.shape(), perturbed), target, plan, norm).item());
  }
}

TEST(Reconstruction, HandCase) {
  MaskPlan plan = manual_plan({{0, 1}}, 1);  // patch 1 masked
  Tensor target({1, 2, 2}, {5, 5, 0.5, 0.25});
  Tensor pred({1, 2, 2}, {-9, 9, 1.5, -0.75});
  EXPECT_DOUBLE_EQ(reconstruction_loss(pred, target, plan, false).item(), 1.0);
}

TEST(Reconstruction, NormalizedTargets) {
  MaskPlan plan = manual_plan({{0, 1}}, 1);
  Tensor target({1, 2, 2}, {0, 0, 1, 3});
  // mean 2, population variance 1
  const double s = 1.0 / std::sqrt(1.0 + 1e-6);
  Tensor pred({1, 2, 2}, {7, 7, -s, s});
  EXPECT_NEAR(reconstruction_loss(pred, target, plan, true).item(), 0.0, 1e-30);
  EXPECT_THROW(reconstruction_loss(pred, target, MaskPlan::none(1, 2), true), ContractError);
}

TEST(Reconstruction, GradientAudit) {
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    MaskPlan plan = make_mask(seed, 0, 0, 3, 4, 0.5);
    Tensor target = random_tensor({3, 4, 5}, seed + 100);
    for (bool norm : {false, true}) {
      auto f = [&](const auto& in) { return reconstruction_loss(in[0], target, plan, norm); };
      EXPECT_LT(check_gradient(f, {random_tensor({3, 4, 5}, seed)}, 0).relative(), 1e-4);
    }
  }
}

TEST(Uniformity, HandCases) {
  EXPECT_DOUBLE_EQ(uniformity_loss(Tensor({3, 2}, {1, 2, 1, 2, 1, 2})).item(), 0.0);
  EXPECT_NEAR(uniformity_loss(Tensor({2, 1}, {1, -1})).item(), -8.0, 1e-12);
  // scale invariance of the normalized rows
  EXPECT_NEAR(uniformity_loss(Tensor({2, 1}, {3, -0.5})).item(), -8.0, 1e-12);
  EXPECT_THROW(uniformity_loss(Tensor({2, 2}, {0, 0, 1, 1})), DegenerateInputError);
  EXPECT_THROW(uniformity_loss(Tensor({1, 2}, {1, 1})), DegenerateInputError);
}

TEST(Uniformity, SpreadingDuplicatesDecreasesLoss) {
  for (std::uint64_t seed = 1; seed <= 20; ++seed) {
    Tensor base = random_tensor({4, 3}, seed);
    std::vector<double> v(base.data().begin(), base.data().end());
    std::copy_n(v.begin(), 3, v.begin() + 3);  // row 1 duplicates row 0
    const double dup = uniformity_loss(Tensor({4, 3}, v)).item();
    for (std::size_t e = 0; e < 3; ++e) v[3 + e] = -v[e];  // move it to the antipode
    EXPECT_LT(uniformity_loss(Tensor({4, 3}, v)).item(), dup);
  }
}

TEST(Uniformity, GradientAudit) {
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    auto f = [](const auto& in) { return uniformity_loss(in[0]); };
    EXPECT_LT(check_gradient(f, {random_tensor({2 + seed, 4}, seed, 0.1, 1.0)}, 0).relative(), 1e-4);
  }
}

TEST(Schedule, EffectiveLambdaWindow) {
  Schedule s;
  EXPECT_EQ(effective_lambda(9, s), 0.0);
  EXPECT_EQ(effective_lambda(10, s), 1.0);
  EXPECT_EQ(effective_lambda(109, s), 1.0);
  EXPECT_EQ(effective_lambda(110, s), 0.0);
  s.lambda = 0.5;
  s.e_st = 0;
  s.e_dur = 1;
  EXPECT_EQ(effective_lambda(0, s), 0.5);
  EXPECT_EQ(effective_lambda(1, s), 0.0);
  s.e_dur = 0;
  EXPECT_THROW(s.validate(), ConfigError);
}

TEST(Schedule, MethodPresets) {
  EXPECT_EQ(Schedule::for_method(Method::mae).lambda, 0.0);
  EXPECT_EQ(Schedule::for_method(Method::m_mae).lambda, 1.0);
  EXPECT_EQ(Schedule::for_method(Method::u_mae).uniformity_weight, 0.01);
  EXPECT_EQ(Schedule::for_method(Method::mu_mae).uniformity_weight, 0.01);
  EXPECT_EQ(Schedule::for_method(Method::m_mae).uniformity_weight, 0.0);
  for (Method m : {Method::mae, Method::m_mae, Method::u_mae, Method::mu_mae}) EXPECT_EQ(parse_method(to_string(m)), m);
  EXPECT_THROW(parse_method("simclr"), ConfigError);
}

class TotalLossTest : public ::testing::Test {
 protected:
  VitConfig cfg = toy_config();
  Tensor img = random_tensor({4, 2, 8, 8}, 21);
  MaskPlan plan = make_mask(5, 0, 0, 4, 4, 0.5);

  LossResult run(const VitMae& m, const ObjectiveConfig& oc, int epoch) {
    Encoded e = m.encode(img, plan);
    return total_loss(m.decode(e, plan), patchify(img, cfg), plan, e, oc, epoch);
  }
};

TEST_F(TotalLossTest, BreakdownIdentity) {
  VitMae m(cfg, 3);
  ObjectiveConfig oc = objective(Method::mu_mae, 2);
  oc.sched.e_st = 0;
  for (int epoch : {0, 5, 200}) {
    const LossBreakdown b = run(m, oc, epoch).parts;
    EXPECT_NEAR(b.total, b.reconstruction + 0.01 * b.uniformity + b.effective_lambda * b.regularizer, 1e-12);
    EXPECT_GT(b.regularizer, 0.0);
    EXPECT_LT(b.uniformity, 0.0);
  }
  ObjectiveConfig zero = oc;
  zero.sched.lambda = 0.0;
  const LossBreakdown z = run(m, zero, 1).parts;
  EXPECT_EQ(z.total, run(m, objective(Method::u_mae, 2), 1).parts.total);
  EXPECT_EQ(run(m, objective(Method::mae, 2), 1).parts.total, run(m, objective(Method::mae, 2), 1).parts.reconstruction);
}

TEST_F(TotalLossTest, ReconstructionIndependentOfRegularizerSettings) {
  VitMae m(cfg, 3);
  const double rec = run(m, objective(Method::mae, 2), 0).parts.reconstruction;
  ObjectiveConfig oc = objective(Method::m_mae, 2);
  oc.sched.e_st = 0;
  for (auto mode : {LaplacianMode::unnormalized, LaplacianMode::literal_paper}) {
    oc.reg.laplacian_mode = mode;
    oc.sched.lambda = 3.0;
    EXPECT_EQ(run(m, oc, 0).parts.reconstruction, rec);
  }
}

TEST_F(TotalLossTest, PreWindowGradientsMatchPlainMae) {
  VitMae a(cfg, 8), b(cfg, 8);
  ObjectiveConfig mm = objective(Method::m_mae, 2);  // e_st = 10
  {
    Tape t;
    t.backward(run(a, objective(Method::mae, 2), 3).total);
  }
  LossBreakdown parts;
  {
    Tape t;
    LossResult r = run(b, mm, 3);
    parts = r.parts;
    t.backward(r.total);
  }
  EXPECT_EQ(grads_of(a), grads_of(b));
  EXPECT_EQ(parts.effective_lambda, 0.0);
  EXPECT_GT(parts.regularizer, 0.0);  // still reported
}

TEST_F(TotalLossTest, ActiveWindowChangesGradients) {
  VitMae a(cfg, 8), b(cfg, 8);
  ObjectiveConfig mm = objective(Method::m_mae, 2);
  mm.sched.e_st = 0;
  {
    Tape t;
    t.backward(run(a, objective(Method::mae, 2), 0).total);
  }
  {
    Tape t;
    t.backward(run(b, mm, 0).total);
  }
  EXPECT_NE(grads_of(a), grads_of(b));
}

TEST_F(TotalLossTest, FullStepGradientAudit) {
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    VitMae m(cfg, seed);
    ObjectiveConfig oc = objective(Method::mu_mae, 2);
    oc.sched.e_st = 0;
    oc.reg.fixed_sigma = base_sigma(m, img, plan, oc.reg);
    auto f = [&](const std::vector<Tensor>&) { return run(m, oc, 0).total; };
    for (const char* name : {"patch_embed.weight", "enc.block1.attn.qkv.weight", "enc.block2.mlp.fc1.weight",
                             "cls_token", "dec.head.weight"}) {
      EXPECT_LT(check_gradient(f, {find_param(m, name)}, 0).relative(), 1e-4) << name << " seed " << seed;
    }
  }
}

TEST_F(TotalLossTest, MissingLayerIsConfigError) {
  VitMae m(cfg, 1);
  ObjectiveConfig oc = objective(Method::m_mae, 4);  // layers 3, 4 on a depth-2 model
  EXPECT_THROW(run(m, oc, 20), ConfigError);
}
