// Acceptance runner: one PASS/FAIL line per criterion. `--only 3,7` runs a
// subset; the exit status is nonzero when any selected criterion fails.

#include <Eigen/Dense>
#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <numeric>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "gradcheck.hpp"
#include "magma/binary_io.hpp"
#include "magma/cli.hpp"
#include "magma/config.hpp"
#include "magma/eval.hpp"
#include "magma/manifold_reg.hpp"
#include "magma/objectives.hpp"
#include "magma/rng.hpp"
#include "magma/train.hpp"
#include "toy_model.hpp"

using namespace magma;
using magma::testing::check_gradient;
using magma::testing::find_param;
using magma::testing::random_tensor;
using magma::testing::toy_config;
namespace fs = std::filesystem;

namespace {

// Collects failed checks with a short reason; a criterion passes when none
// were recorded.
struct Verdict {
  std::vector<std::string> failures;
  std::string detail;

  void require(bool ok, const std::string& what) {
    if (!ok && failures.size() < 5) failures.push_back(what);
    if (!ok && failures.size() == 5) failures.push_back("...");
  }
};

std::string num(double v, int digits = 4) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*g", digits, v);
  return buf;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

Tensor random_rows(Rng& rng, std::size_t b, std::size_t d, double scale = 1.0) {
  std::vector<double> v(b * d);
  for (double& x : v) x = rng.normal() * scale;
  return Tensor({b, d}, std::move(v));
}

double pair_loop_double_sum(const Tensor& zr, const Tensor& zt, double sigma) {
  const std::size_t b = zr.dim(0);
  double total = 0.0;
  for (std::size_t i = 0; i < b; ++i)
    for (std::size_t j = 0; j < b; ++j) {
      double ref = 0.0, tgt = 0.0;
      for (std::size_t k = 0; k < zr.dim(1); ++k) ref += std::pow(zr.at(i, k) - zr.at(j, k), 2);
      for (std::size_t k = 0; k < zt.dim(1); ++k) tgt += std::pow(zt.at(i, k) - zt.at(j, k), 2);
      total += std::exp(-ref / (2.0 * sigma)) * tgt;
    }
  return total / static_cast<double>(b * b);
}

double population_sigma(const Tensor& z) {
  std::vector<double> ds;
  for (std::size_t i = 0; i < z.dim(0); ++i)
    for (std::size_t j = 0; j < z.dim(0); ++j) {
      if (i == j) continue;
      double s = 0.0;
      for (std::size_t k = 0; k < z.dim(1); ++k) s += std::pow(z.at(i, k) - z.at(j, k), 2);
      ds.push_back(s);
    }
  const double mu = std::accumulate(ds.begin(), ds.end(), 0.0) / ds.size();
  double var = 0.0;
  for (double v : ds) var += (v - mu) * (v - mu);
  return std::sqrt(std::max(var / ds.size(), 1e-8));
}

RegConfig pair_cfg(LaplacianMode mode) {
  RegConfig c;
  c.ref_layer = 1;
  c.target_layer = 2;
  c.laplacian_mode = mode;
  return c;
}

Tensor permute_rows(const Tensor& z, const std::vector<std::size_t>& perm) {
  std::vector<double> out(z.numel());
  const std::size_t d = z.dim(1);
  for (std::size_t i = 0; i < perm.size(); ++i)
    for (std::size_t k = 0; k < d; ++k) out[i * d + k] = z.at(perm[i], k);
  return Tensor(z.shape(), std::move(out));
}

// ---------------------------------------------------------------- 1

Verdict criterion1() {
  Verdict v;
  Rng rng(101);
  const auto t0 = std::chrono::steady_clock::now();
  double worst = 0.0, worst_oracle = 0.0;
  const RegConfig cfg = pair_cfg(LaplacianMode::unnormalized);
  for (int n = 0; n < 200; ++n) {
    const std::size_t b = 2 + rng.uniform_int(7), d = 1 + rng.uniform_int(4);
    const Tensor zr = random_rows(rng, b, d), zt = random_rows(rng, b, d);
    const double ds = reg_loss_double_sum(zr, zt, cfg).item();
    const double tr = reg_loss_trace(zr, zt, cfg).item();
    const double rel = std::abs(ds - 2.0 * tr) / std::max(std::abs(ds), 1e-300);
    const double oracle = pair_loop_double_sum(zr, zt, population_sigma(zr));
    worst = std::max(worst, rel);
    worst_oracle = std::max(worst_oracle, std::abs(ds - oracle) / std::max(std::abs(oracle), 1e-300));
  }
  const double secs = seconds_since(t0);
  v.require(worst <= 1e-10, "double sum vs 2*trace relative error " + num(worst));
  v.require(worst_oracle <= 1e-10, "double sum vs pair-loop oracle relative error " + num(worst_oracle));
  v.require(secs < 5.0, "runtime " + num(secs) + " s >= 5 s");
  v.detail = "200 instances, max rel err " + num(worst) + " (oracle " + num(worst_oracle) + "), " + num(secs, 3) + " s";
  return v;
}

// ---------------------------------------------------------------- 2

Verdict criterion2() {
  Verdict v;
  const auto t0 = std::chrono::steady_clock::now();
  double worst = 0.0;
  auto audit = [&](const std::string& what, double rel) {
    worst = std::max(worst, rel);
    v.require(rel < 1e-4, what + " relative error " + num(rel));
  };
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    const std::size_t b = 3 + seed % 4;
    const Tensor zr = random_tensor({b, 3}, seed), zt = random_tensor({b, 2}, seed + 50);
    for (KernelGrad kg : {KernelGrad::flow, KernelGrad::detach}) {
      RegConfig cfg = pair_cfg(LaplacianMode::symmetric_normalized);
      cfg.kernel_grad = kg;
      // The bandwidth is a constant of the backward pass; the oracle holds it too.
      cfg.fixed_sigma = adaptive_sigma(pairwise_sq_dists(zr), cfg.sigma_floor);
      auto f = [&](const std::vector<Tensor>& in) { return reg_loss_trace(in[0], in[1], cfg); };
      const std::string tag = "regularizer (" + to_string(kg) + ") seed " + std::to_string(seed);
      audit(tag + " d/dZ_tgt", check_gradient(f, {zr, zt}, 1).relative());
      if (kg == KernelGrad::flow) {
        audit(tag + " d/dZ_ref", check_gradient(f, {zr, zt}, 0).relative());
      } else {
        Tensor a = zr.detach(), c = zt.detach();
        a.set_requires_grad(true);
        c.set_requires_grad(true);
        Tape tape;
        tape.backward(reg_loss_trace(a, c, cfg));
        bool zero = true;
        for (double g : a.grad()) zero = zero && g == 0.0;
        v.require(zero, tag + " reference gradient not exactly zero");
      }
    }
    const MaskPlan plan = make_mask(seed, 0, 0, 3, 6, 0.5);
    const Tensor pred = random_tensor({3, 6, 4}, seed + 7), target = random_tensor({3, 6, 4}, seed + 8);
    for (bool norm : {false, true}) {
      auto f = [&](const std::vector<Tensor>& in) { return reconstruction_loss(in[0], in[1], plan, norm); };
      audit("reconstruction seed " + std::to_string(seed), check_gradient(f, {pred, target}, 0).relative());
    }
    auto u = [&](const std::vector<Tensor>& in) { return uniformity_loss(in[0]); };
    audit("uniformity seed " + std::to_string(seed), check_gradient(u, {random_tensor({5, 3}, seed + 9)}, 0).relative());

    // One full objective step on the toy model, regularizer active.
    const VitConfig vc = toy_config();
    VitMae m(vc, seed);
    const Tensor img = random_tensor({4, 2, 8, 8}, seed + 20);
    const MaskPlan mp = make_mask(seed, 0, 0, 4, vc.num_patches(), vc.mask_ratio);
    ObjectiveConfig oc;
    oc.method = Method::mu_mae;
    oc.reg = RegConfig::for_depth(2);
    oc.sched = Schedule::for_method(Method::mu_mae);
    oc.sched.e_st = 0;
    {
      NoGradGuard guard;
      const Encoded e = m.encode(img, mp);
      oc.reg.fixed_sigma = adaptive_sigma(pairwise_sq_dists(pool_patches(e.blocks.at(oc.reg.ref_layer), true)), oc.reg.sigma_floor);
    }
    auto total = [&](const std::vector<Tensor>&) {
      const Encoded e = m.encode(img, mp);
      return total_loss(m.decode(e, mp), patchify(img, vc), mp, e, oc, 0).total;
    };
    for (const char* name : {"patch_embed.weight", "enc.block1.attn.qkv.weight", "enc.block2.mlp.fc1.weight",
                             "cls_token", "dec.head.weight"}) {
      audit(std::string("total_loss ") + name + " seed " + std::to_string(seed),
            check_gradient(total, {find_param(m, name)}, 0).relative());
    }
  }
  const double secs = seconds_since(t0);
  v.require(secs < 60.0, "runtime " + num(secs) + " s >= 60 s");
  v.detail = "5 instances per audit, worst rel err " + num(worst) + ", " + num(secs, 3) + " s";
  return v;
}

// ---------------------------------------------------------------- 3

Verdict criterion3() {
  Verdict v;
  Rng rng(303);
  for (int n = 0; n < 100; ++n) {
    const std::size_t b = 2 + rng.uniform_int(9), dr = 1 + rng.uniform_int(6), dt = 1 + rng.uniform_int(6);
    const Tensor zr = random_rows(rng, b, dr, 0.2 + rng.uniform(0.0, 3.0)), zt = random_rows(rng, b, dt);
    const std::string at = " (instance " + std::to_string(n) + ")";
    const KernelMatrix k = reference_kernel(zr, pair_cfg(LaplacianMode::unnormalized));
    const Tensor d2 = pairwise_sq_dists(zr);
    for (std::size_t i = 0; i < b; ++i) {
      v.require(k.w.at(i, i) == 1.0, "diagonal not 1" + at);
      for (std::size_t j = 0; j < b; ++j) {
        v.require(k.w.at(i, j) == k.w.at(j, i), "kernel not symmetric" + at);
        // Strict positivity holds wherever exp(-d/2sigma) is representable.
        const double arg = d2.at(i, j) / (2.0 * k.sigma);
        v.require(k.w.at(i, j) <= 1.0 && k.w.at(i, j) >= 0.0, "kernel entry outside [0,1]" + at);
        v.require(arg > 700.0 || k.w.at(i, j) > 0.0, "representable kernel entry is zero" + at);
      }
    }
    for (auto mode : {LaplacianMode::unnormalized, LaplacianMode::symmetric_normalized, LaplacianMode::literal_paper}) {
      const Tensor l = laplacian(k, mode);
      for (std::size_t i = 0; i < b; ++i)
        for (std::size_t j = 0; j < b; ++j)
          v.require(std::abs(l.at(i, j) - l.at(j, i)) <= 1e-15, "laplacian not symmetric" + at);
      const RegConfig cfg = pair_cfg(mode);
      const double base = reg_loss_trace(zr, zt, cfg).item();
      if (mode != LaplacianMode::literal_paper) v.require(base >= -1e-12, "negative loss in PSD mode" + at);
      const auto perm = rng.permutation(b);
      const double permuted = reg_loss_trace(permute_rows(zr, perm), permute_rows(zt, perm), cfg).item();
      v.require(std::abs(base - permuted) <= 1e-12 * std::max(1.0, std::abs(base)), "permutation changed loss" + at);
    }
    std::vector<double> shifted(zt.data().begin(), zt.data().end());
    std::vector<double> offset(dt);
    for (double& o : offset) o = rng.uniform(-5.0, 5.0);
    for (std::size_t i = 0; i < b; ++i)
      for (std::size_t j = 0; j < dt; ++j) shifted[i * dt + j] += offset[j];
    const RegConfig un = pair_cfg(LaplacianMode::unnormalized);
    const double base = reg_loss_trace(zr, zt, un).item();
    const double moved = reg_loss_trace(zr, Tensor(zt.shape(), shifted), un).item();
    v.require(std::abs(base - moved) <= 1e-10 * std::max(1.0, base), "constant shift changed loss" + at);
    // Identical target rows: zero for a true Laplacian, positive for the literal form.
    const Tensor same = repeat_batch(random_rows(rng, 1, dt), b);
    v.require(std::abs(reg_loss_trace(zr, same, un).item()) <= 1e-12, "identical rows not zero (unnormalized)" + at);
    v.require(reg_loss_trace(zr, same, pair_cfg(LaplacianMode::literal_paper)).item() > 0.0,
              "literal form zero on identical rows" + at);
  }
  // Documented case: z_ref = {0, 2}, sigma 1, identical target rows (1, 2).
  RegConfig lit = pair_cfg(LaplacianMode::literal_paper);
  lit.fixed_sigma = 1.0;
  const double documented = reg_loss_trace(Tensor({2, 1}, {0, 2}), Tensor({2, 2}, {1, 2, 1, 2}), lit).item();
  v.require(std::abs(documented - 2.5) < 1e-14, "documented literal case " + num(documented, 17) + " != 2.5");
  v.detail = "100 random instances, documented literal case = " + num(documented);
  return v;
}

// ---------------------------------------------------------------- 4

Dataset toy_dataset(std::size_t per_class, std::uint64_t seed) {
  SyntheticSpec s;
  s.image_size = 8;
  s.channels = 2;
  s.per_class = per_class;
  s.seed = seed;
  return generate_synthetic(s);
}

Verdict criterion4() {
  Verdict v;
  const Schedule s = Schedule::for_method(Method::m_mae);
  const std::vector<int> epochs = {0, s.e_st, s.e_st + s.e_dur, 399};
  const std::vector<double> expect = {0.0, 1.0, 0.0, 0.0};
  std::string trace;
  for (std::size_t i = 0; i < epochs.size(); ++i) {
    const double l = effective_lambda(epochs[i], s);
    trace += (i ? ", " : "") + num(l);
    v.require(l == expect[i], "lambda_eff at epoch " + std::to_string(epochs[i]) + " = " + num(l));
  }
  v.require(s.lambda == 1.0 && s.e_st == 10 && s.e_dur == 100, "preset is not lambda=1, e_st=10, e_dur=100");

  // Two toy epochs before the window: identical trajectory to plain MAE.
  const Dataset train = toy_dataset(10, 1);
  std::vector<std::vector<double>> weights[2];
  std::vector<EpochMetrics> metrics[2];
  for (int which = 0; which < 2; ++which) {
    const Method m = which == 0 ? Method::mae : Method::m_mae;
    VitMae model(toy_config(), 7);
    PretrainInputs in;
    in.train = &train;
    in.augment.output_size = 8;
    in.augment.norm = compute_norm_stats(train);
    ObjectiveConfig oc;
    oc.method = m;
    oc.reg = RegConfig::for_depth(2);
    oc.sched = Schedule::for_method(m);
    TrainConfig tc;
    tc.epochs = 2;
    tc.warmup_epochs = 1;
    tc.batch_size = 10;
    metrics[which] = pretrain(model, in, oc, tc).epochs;
    for (const auto& p : model.parameters()) weights[which].emplace_back(p.value.data().begin(), p.value.data().end());
  }
  v.require(weights[0] == weights[1], "pre-window M-MAE weights differ from MAE");
  for (std::size_t e = 0; e < 2; ++e) {
    v.require(metrics[0][e].loss.total == metrics[1][e].loss.total, "pre-window losses differ");
    v.require(metrics[0][e].loss.regularizer == metrics[1][e].loss.regularizer, "logged regularizer differs");
  }
  v.detail = "lambda_eff trace [" + trace + "], 2-epoch gating run bit-exact";
  return v;
}

// ---------------------------------------------------------------- 5

Verdict criterion5() {
  Verdict v;
  std::size_t plans = 0;
  for (std::size_t p : {16u, 64u}) {
    const std::size_t expect = p == 16 ? 12 : 48;
    for (std::uint64_t seed = 0; seed < 20; ++seed)
      for (std::size_t epoch = 0; epoch < 3; ++epoch)
        for (std::size_t step = 0; step < 12; ++step) {
          const MaskPlan plan = make_mask(seed, epoch, step, 16, p, 0.75);
          ++plans;
          v.require(plan.num_masked() == expect, "P=" + std::to_string(p) + " masked " + std::to_string(plan.num_masked()));
          for (std::size_t b = 0; b < plan.batch(); ++b) {
            const auto count = std::count(plan.masked[b].begin(), plan.masked[b].end(), true);
            v.require(static_cast<std::size_t>(count) == expect, "sample mask count " + std::to_string(count));
            std::vector<std::size_t> sorted = plan.order[b];
            std::sort(sorted.begin(), sorted.end());
            for (std::size_t i = 0; i < p; ++i) v.require(sorted[i] == i, "order is not a permutation");
            for (std::size_t j = 0; j < plan.num_visible; ++j)
              v.require(!plan.masked[b][plan.order[b][j]], "visible index marked masked");
          }
        }
  }
  v.detail = std::to_string(plans) + " batches of 16 over 20 seeds: 12/16 and 48/64 masked in every sample";
  return v;
}

// ---------------------------------------------------------------- 6

RunConfig preset(const std::string& name) {
  return build_config(parse_config_text(binio::read_file(MAGMA_SOURCE_DIR "/configs/" + name + ".cfg")));
}

Verdict criterion6() {
  Verdict v;
  const auto t0 = std::chrono::steady_clock::now();
  SyntheticSpec spec;
  spec.class_count = 3;
  spec.image_size = 32;
  spec.per_class = 200;
  spec.seed = 1;
  const Dataset train = generate_synthetic(spec);
  spec.per_class = 50;
  spec.seed = 2;
  const Dataset test = generate_synthetic(spec);
  const std::vector<std::string> methods = {"mae", "m_mae", "u_mae", "mu_mae"};
  std::vector<double> mean(4, 0.0);
  std::string per_seed;
  for (std::size_t mi = 0; mi < methods.size(); ++mi) {
    RunConfig cfg = preset(methods[mi] + "_tiny");
    cfg.train.probe_interval = 0;  // only the final accuracy is scored
    cfg.validate();
    per_seed += (mi ? "; " : "") + methods[mi] + ":";
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
      cfg.train.seed = seed;
      VitMae model(cfg.vit, model_init_seed(seed));
      PretrainInputs in;
      in.train = &train;
      in.augment = cfg.augment;
      in.augment.norm = compute_norm_stats(train);
      pretrain(model, in, cfg.objective, cfg.train);
      const Features a = extract_features(model, train, in.augment.norm, cfg.feature);
      const Features b = extract_features(model, test, in.augment.norm, cfg.feature);
      const double acc = knn_accuracy(a, b, 10);
      per_seed += " " + num(acc, 3);
      mean[mi] += acc / 5.0;
      std::fprintf(stderr, "  [6] %s seed %llu kNN %.4f (%.0f s elapsed)\n", methods[mi].c_str(),
                   static_cast<unsigned long long>(seed), acc, seconds_since(t0));
    }
  }
  const double chance = 1.0 / 3.0, secs = seconds_since(t0);
  v.require(mean[1] >= mean[0], "M-MAE mean " + num(mean[1]) + " < MAE mean " + num(mean[0]));
  v.require(mean[3] >= mean[2], "MU-MAE mean " + num(mean[3]) + " < U-MAE mean " + num(mean[2]));
  for (std::size_t mi = 0; mi < 4; ++mi) {
    v.require(mean[mi] >= 1.5 * chance, methods[mi] + " mean " + num(mean[mi]) + " below 1.5x chance");
  }
  v.require(secs < 7200.0, "runtime " + num(secs) + " s >= 2 h");
  v.detail = "mean kNN mae " + num(mean[0]) + ", m_mae " + num(mean[1]) + ", u_mae " + num(mean[2]) + ", mu_mae " +
             num(mean[3]) + " [" + per_seed + "], " + num(secs / 60.0, 3) + " min";
  return v;
}

// ---------------------------------------------------------------- 7

std::vector<std::size_t> brute_knn(const Features& tr, const Features& te, std::size_t k) {
  std::vector<std::size_t> out;
  const std::size_t classes = *std::max_element(tr.labels.begin(), tr.labels.end()) + 1;
  for (std::size_t i = 0; i < te.rows; ++i) {
    std::vector<double> dist(tr.rows);
    for (std::size_t j = 0; j < tr.rows; ++j) {
      double s = 0.0;
      for (std::size_t c = 0; c < tr.dim; ++c) s += std::pow(te.row(i)[c] - tr.row(j)[c], 2);
      dist[j] = s;
    }
    std::vector<std::size_t> idx(tr.rows);
    std::iota(idx.begin(), idx.end(), 0);
    std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return dist[a] < dist[b]; });
    std::vector<int> votes(classes, 0);
    std::vector<double> sums(classes, 0.0);
    for (std::size_t r = 0; r < k; ++r) {
      ++votes[tr.labels[idx[r]]];
      sums[tr.labels[idx[r]]] += std::sqrt(dist[idx[r]]);
    }
    std::size_t best = 0;
    for (std::size_t c = 1; c < classes; ++c) {
      if (votes[c] > votes[best] || (votes[c] == votes[best] && sums[c] < sums[best])) best = c;
    }
    out.push_back(best);
  }
  return out;
}

Features random_features(Rng& rng, std::size_t n, std::size_t dim, std::size_t classes, bool integer) {
  Features f;
  f.rows = n;
  f.dim = dim;
  for (std::size_t i = 0; i < n * dim; ++i) f.values.push_back(integer ? double(rng.uniform_int(4)) : rng.normal());
  for (std::size_t i = 0; i < n; ++i) f.labels.push_back(rng.uniform_int(classes));
  return f;
}

Verdict criterion7() {
  Verdict v;
  ProbeConfig pc;
  for (auto [epoch, lr] : {std::pair{0ul, 0.1}, {60ul, 0.01}, {80ul, 0.001}}) {
    const double got = probe_lr(epoch, pc);
    v.require(std::abs(got - lr) <= 1e-15, "probe lr at epoch " + std::to_string(epoch) + " = " + num(got, 17));
  }
  Rng rng(707);
  for (int n = 0; n < 50; ++n) {
    const std::size_t classes = 2 + n % 3, k = 1 + n % 10;
    const Features tr = random_features(rng, 40, 1 + n % 3, classes, n % 2 == 0);
    const Features te = random_features(rng, 20, tr.dim, classes, n % 2 == 0);
    v.require(knn_predict(tr, te, k) == brute_knn(tr, te, k), "kNN differs from oracle on instance " + std::to_string(n));
  }
  Features f;
  f.rows = 4;
  f.dim = 1;
  f.values = {0.0, 2.0, 10.0, 12.0};
  f.labels = {0, 0, 1, 1};
  const double dbi = davies_bouldin(f);
  v.require(std::abs(dbi - 0.2) <= 1e-12, "DBI hand case " + num(dbi, 17));
  v.detail = "probe lr 0.1/0.01/0.001 at 0/60/80, 50/50 kNN oracle matches, DBI " + num(dbi, 17);
  return v;
}

// ---------------------------------------------------------------- 8

Verdict criterion8() {
  Verdict v;
  Rng rng(808);
  double worst = 0.0;
  for (int n = 0; n < 20; ++n) {
    Eigen::MatrixXd x(12, 6);
    for (int i = 0; i < 12; ++i)
      for (int j = 0; j < 6; ++j) x(i, j) = rng.normal() * (1.0 + 0.5 * j);
    const Eigen::MatrixXd c = x.transpose() * x / 12.0;
    std::vector<double> flat(36);
    for (int i = 0; i < 6; ++i)
      for (int j = 0; j < 6; ++j) flat[i * 6 + j] = c(i, j);
    const PowerIteration pi = leading_eigenpair(flat, 6);
    const Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(c);
    Eigen::VectorXd e = es.eigenvectors().col(5);
    Eigen::Index arg;
    e.cwiseAbs().maxCoeff(&arg);
    if (e(arg) < 0) e = -e;
    double err = std::abs(pi.eigenvalue - es.eigenvalues()(5)) / es.eigenvalues()(5);
    for (int i = 0; i < 6; ++i) err = std::max(err, std::abs(pi.vector[i] - e(i)));
    worst = std::max(worst, err);
  }
  v.require(worst <= 1e-8, "6x6 eigenpair error " + num(worst));

  const VitConfig vc = toy_config();
  VitMae model(vc, 3);
  double row_err = 0.0;
  for (std::uint64_t s = 0; s < 10; ++s) {
    EncodeOptions opts;
    opts.keep_attention = true;
    NoGradGuard guard;
    const Encoded e = model.encode(random_tensor({1, 2, 8, 8}, s), MaskPlan::none(1, vc.num_patches()), opts);
    const auto att = e.attention.back().data();
    const std::size_t t = vc.num_patches() + 1;
    for (std::size_t h = 0; h < vc.enc_heads; ++h) {
      double row = 0.0;
      for (std::size_t j = 0; j < t; ++j) row += att[h * t * t + j];
      row_err = std::max(row_err, std::abs(row - 1.0));
    }
  }
  v.require(row_err <= 1e-12, "class-token attention row sum off by " + num(row_err));

  // Extraction through the CLI, twice, compared byte for byte.
  const fs::path dir = fs::temp_directory_path() / "magma_acceptance_8";
  fs::remove_all(dir);
  fs::create_directories(dir);
  const std::string data = (dir / "d.mgds").string(), ckpt = (dir / "w.mgwt").string();
  std::ostringstream out, err;
  run_cli({"gen-data", "--per-class", "2", "--size", "32", "--seed", "4", "--out", data}, out, err);
  RunConfig cfg = preset("m_mae_tiny");
  save_checkpoint(ckpt, VitMae(cfg.vit, 11).parameters());
  std::size_t files = 0;
  bool identical = true;
  for (const char* kind : {"pca", "attention"}) {
    for (const char* run : {"a", "b"}) {
      const int code = run_cli({"extract", "--config", MAGMA_SOURCE_DIR "/configs/m_mae_tiny.cfg", "--checkpoint", ckpt,
                                "--data", data, "--kind", kind, "--images", "0-2", "--out",
                                (dir / (std::string(kind) + run)).string()},
                               out, err);
      v.require(code == 0, std::string("extract ") + kind + " failed: " + err.str());
    }
    for (const auto& f : fs::directory_iterator(dir / (std::string(kind) + "a"))) {
      ++files;
      identical = identical && binio::read_file(f.path().string()) ==
                                   binio::read_file((dir / (std::string(kind) + "b") / f.path().filename()).string());
    }
  }
  v.require(files == 3 * 4 * 2 * 2, "unexpected extract file count " + std::to_string(files));
  v.require(identical, "extract rerun not byte-identical");
  fs::remove_all(dir);
  v.detail = "eigenpair err " + num(worst) + ", attention row err " + num(row_err) + ", " + std::to_string(files) +
             " extract files identical on rerun";
  return v;
}

// ---------------------------------------------------------------- 9

std::vector<std::string> lines_without_throughput(const std::string& text) {
  std::vector<std::string> out;
  std::istringstream in(text);
  for (std::string line; std::getline(in, line);) {
    const auto a = line.find("\"imgs_per_sec\"");
    out.push_back(a == std::string::npos ? line : line.substr(0, a) + line.substr(line.find(',', a) + 1));
  }
  return out;
}

Verdict criterion9() {
  Verdict v;
  const auto t0 = std::chrono::steady_clock::now();
  const fs::path dir = fs::temp_directory_path() / "magma_acceptance_9";
  fs::remove_all(dir);
  fs::create_directories(dir);
  const std::string tr = (dir / "train.mgds").string(), te = (dir / "test.mgds").string();
  std::ostringstream out, err;
  run_cli({"gen-data", "--per-class", "200", "--seed", "1", "--out", tr}, out, err);
  run_cli({"gen-data", "--per-class", "50", "--seed", "2", "--out", te}, out, err);
  const fs::path a = dir / "a", b = dir / "b";
  int code = run_cli({"pretrain", "--config", MAGMA_SOURCE_DIR "/configs/mu_mae_tiny.cfg", "--train", tr, "--test", te,
                      "--out", a.string()},
                     out, err);
  v.require(code == 0, "preset run failed: " + err.str());
  code = run_cli({"pretrain", "--config", (a / "resolved_config.txt").string(), "--out", b.string()}, out, err);
  v.require(code == 0, "resolved-config rerun failed: " + err.str());
  std::size_t compared = 0;
  if (v.failures.empty()) {
    const std::string ma = binio::read_file((a / "metrics.jsonl").string());
    const std::string mb = binio::read_file((b / "metrics.jsonl").string());
    v.require(lines_without_throughput(ma) == lines_without_throughput(mb), "metrics.jsonl differs");
    for (const auto& f : fs::directory_iterator(a)) {
      if (f.path().extension() != ".mgwt") continue;
      ++compared;
      v.require(binio::read_file(f.path().string()) == binio::read_file((b / f.path().filename()).string()),
                f.path().filename().string() + " differs");
    }
    v.require(compared >= 1, "no checkpoint written");
    v.require(binio::read_file((a / "resolved_config.txt").string()) ==
                  binio::read_file((b / "resolved_config.txt").string()),
              "resolved config changed on rerun");
  }
  fs::remove_all(dir);
  v.detail = "mu_mae_tiny preset, 60 epochs twice: metrics (all fields but wall-clock imgs_per_sec) and " +
             std::to_string(compared) + " checkpoint(s) identical, " + num(seconds_since(t0), 3) + " s";
  return v;
}

// ---------------------------------------------------------------- 10

Verdict criterion10() {
  Verdict v;
  SyntheticSpec spec;
  spec.per_class = 200;
  spec.seed = 1;
  const Dataset train = generate_synthetic(spec);
  double best[2] = {0.0, 0.0};
  for (int round = 0; round < 3; ++round) {
    for (int which = 0; which < 2; ++which) {
      RunConfig cfg = preset(which == 0 ? "mae_tiny" : "m_mae_tiny");
      cfg.train.epochs = 2;
      cfg.train.warmup_epochs = 1;
      cfg.train.probe_interval = 0;
      cfg.objective.sched.e_st = 0;  // regularizer active in every timed step
      VitMae model(cfg.vit, model_init_seed(round));
      PretrainInputs in;
      in.train = &train;
      in.augment = cfg.augment;
      in.augment.norm = compute_norm_stats(train);
      for (const auto& e : pretrain(model, in, cfg.objective, cfg.train).epochs) {
        best[which] = std::max(best[which], e.imgs_per_sec);
      }
    }
  }
  const double ratio = best[1] / best[0];
  v.require(ratio >= 0.85, "m_mae/mae throughput ratio " + num(ratio));
  v.detail = "best imgs/s mae " + num(best[0]) + ", m_mae " + num(best[1]) + " (ratio " + num(ratio, 3) + ")";
  return v;
}

}  // namespace

int main(int argc, char** argv) {
  const std::vector<std::pair<std::string, std::function<Verdict()>>> criteria = {
      {"double-sum and trace forms agree", criterion1},
      {"gradient audits against central differences", criterion2},
      {"kernel and Laplacian invariants", criterion3},
      {"schedule trace and pre-window gating", criterion4},
      {"exact mask counts", criterion5},
      {"desk-scale directional kNN comparison", criterion6},
      {"probe schedule, kNN oracle, DBI hand case", criterion7},
      {"PCA eigenpair, attention rows, extract determinism", criterion8},
      {"resolved-config rerun reproducibility", criterion9},
      {"regularizer throughput overhead", criterion10},
  };
  std::set<std::size_t> only;
  for (int i = 1; i < argc; ++i) {
    if (std::string(argv[i]) == "--only" && i + 1 < argc) {
      std::stringstream ss(argv[++i]);
      for (std::string part; std::getline(ss, part, ',');) only.insert(std::stoul(part));
    } else {
      std::fprintf(stderr, "usage: acceptance [--only N[,N...]]\n");
      return 2;
    }
  }
  int failed = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    if (!only.empty() && !only.count(i + 1)) continue;
    Verdict v;
    try {
      v = criteria[i].second();
    } catch (const std::exception& e) {
      v.failures.push_back(std::string("exception: ") + e.what());
    }
    const bool ok = v.failures.empty();
    failed += !ok;
    std::printf("%s  criterion %zu: %s: %s\n", ok ? "PASS" : "FAIL", i + 1, criteria[i].first.c_str(),
                v.detail.c_str());
    for (const auto& f : v.failures) std::printf("      - %s\n", f.c_str());
    std::fflush(stdout);
  }
  return failed == 0 ? 0 : 1;
}
