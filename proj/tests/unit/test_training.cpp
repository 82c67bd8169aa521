#include <doctest.h>

#include <cmath>
#include <limits>
#include <map>
#include <numbers>

#include "gradient_suite.hpp"
#include "pointdif/errors.hpp"
#include "pointdif/training.hpp"

using namespace pointdif;
using namespace pointdif::testing;

namespace {

TrainConfig small_config() {
  TrainConfig cfg;
  cfg.dims = toy_dims();
  cfg.patches = {8, 8, false};
  cfg.steps = 50;
  cfg.beta_start = 1e-3;
  cfg.beta_end = 0.1;
  cfg.timesteps.h = 4;
  cfg.epochs = 3;
  cfg.batch_size = 4;
  return cfg;
}

std::vector<PointCloud> small_clouds() {
  auto ds = make_toy_dataset(4, 64, 3);
  return ds.clouds;
}

}  // namespace

TEST_CASE("profiles") {
  auto p = TrainConfig::paper();
  CHECK(p.steps == 2000);
  CHECK(p.beta_start == 1e-4);
  CHECK(p.beta_end == 1e-2);
  CHECK(p.mask_ratio == 0.8);
  CHECK(p.timesteps.h == 4);
  CHECK(p.lr == 1e-3);
  CHECK(p.weight_decay == 0.05);
  CHECK(p.epochs == 300);
  CHECK(p.batch_size == 128);
  CHECK(p.patches.num_patches == 64);
  CHECK(p.patches.patch_size == 32);
  CHECK(p.dims == ModelDims::paper());
  CHECK_NOTHROW(p.validate());
  auto d = TrainConfig::desk();
  CHECK(d.steps == 200);
  CHECK(d.dims == ModelDims::desk());
  CHECK_NOTHROW(d.validate());
}

TEST_CASE("validation lists every violation") {
  TrainConfig cfg;
  cfg.mask_ratio = 1.0;
  cfg.timesteps.h = 0;
  cfg.lr = -1.0;
  try {
    cfg.validate();
    FAIL("expected ValidationError");
  } catch (const ValidationError& e) {
    std::string msg = e.what();
    CHECK(msg.find("mask ratio") != std::string::npos);
    CHECK(msg.find("h must") != std::string::npos);
    CHECK(msg.find("learning rate") != std::string::npos);
  }
  TrainConfig few;
  few.patches.num_patches = 4;
  few.mask_ratio = 0.9;  // floor(3.6) = 3 of 4 masked, one visible
  CHECK_NOTHROW(few.validate());
  few.patches.num_patches = 10;
  few.mask_ratio = 0.95;  // floor(9.5) = 9 of 10, still fine
  CHECK_NOTHROW(few.validate());
  few.patches.num_patches = 1;
  few.mask_ratio = 0.5;
  CHECK_NOTHROW(few.validate());
  few.patches.num_patches = 20;
  few.mask_ratio = 0.99;  // floor(19.8) = 19, fine
  CHECK_NOTHROW(few.validate());
}

TEST_CASE("augmentation stays in range") {
  Rng rng(1);
  PointCloud pc(Points::Zero(4, 3));
  pc.points(0, 0) = 1.0;
  AugmentRanges r;
  for (int i = 0; i < 200; ++i) {
    auto out = augment(pc, rng, r);
    const Eigen::RowVector3d shift = out.points.row(1);
    CHECK(shift.cwiseAbs().maxCoeff() <= 0.2);
    const double s = out.points(0, 0) - shift(0);
    CHECK(s >= 0.66 - 1e-12);
    CHECK(s <= 1.5 + 1e-12);
  }
  r.enabled = false;
  CHECK(augment(pc, rng, r).points == pc.points);
}

TEST_CASE("perfect noise oracle gives zero loss") {
  Model m = randomized_model(GuidanceMode::pcnet, 1);
  auto cfg = small_config();
  auto sched = cfg.schedule();
  auto clouds = small_clouds();
  Rng rng(2);
  NoisePredictor oracle = [](Net& net, const NoiseDraw& d, ag::Var) { return net.constant(d.eps); };
  std::vector<const PointCloud*> batch{&clouds[0], &clouds[5]};
  CHECK(batch_loss(batch, m, cfg, sched, rng, oracle) == 0.0);
}

TEST_CASE("h = 1 reduces to the single-draw objective") {
  Model m = randomized_model(GuidanceMode::pcnet, 3);
  auto cfg = small_config();
  cfg.timesteps.h = 1;
  auto sched = cfg.schedule();
  auto pc = small_clouds()[2];

  ag::Tape t1;
  Net n1(t1, std::as_const(m));
  Rng r1(4);
  const double via_loss = cloud_loss(n1, pc, cfg, sched, r1).scalar();

  // Same rng stream consumed by hand.
  Rng r2(4);
  PointCloud x0 = augment(pc, r2, cfg.augment);
  const auto patch_seed = r2.engine()();
  const auto mask_seed = r2.engine()();
  PatchSet ps = make_patches(x0, cfg.patches, patch_seed);
  apply_mask(ps, cfg.mask_ratio, mask_seed);
  const int t = static_cast<int>(r2.uniform_int(1, cfg.steps));
  Matrix eps = r2.normal_matrix(x0.size(), 3);
  Matrix xt = q_sample(x0.points, t, eps, sched);
  Matrix eps_hat = predict_noise(m, xt, condition_vector(m, ps), t);
  const double direct = (eps_hat - eps).squaredNorm() / static_cast<double>(eps.size());
  CHECK(via_loss == doctest::Approx(direct).epsilon(1e-14));
}

TEST_CASE("denoising loss is invariant to point order") {
  Model m = randomized_model(GuidanceMode::pcnet, 5);
  auto cfg = small_config();
  auto sched = cfg.schedule();
  Rng rng(6);
  Matrix x0 = rng.normal_matrix(20, 3);
  auto draws = draw_noise(x0, cfg.timesteps, sched, rng);
  auto flipped = draws;
  for (auto& d : flipped) {
    d.eps = d.eps.colwise().reverse().eval();
    d.x_t = d.x_t.colwise().reverse().eval();
  }
  ag::Tape t;
  Net net(t, std::as_const(m));
  ag::Var c = net.constant(rng.normal_matrix(1, 6));
  const double a = denoising_loss(net, c, draws).scalar();
  const double b = denoising_loss(net, c, flipped).scalar();
  CHECK(std::abs(a - b) <= 1e-12 * std::abs(a));
  CHECK(draws.size() == 4);
  CHECK(draws[0].eps != draws[1].eps);
}

TEST_CASE("restricted sampling only draws inside the interval") {
  auto cfg = small_config();
  cfg.timesteps.restricted = true;
  cfg.timesteps.restriction = {10, 20};
  auto sched = cfg.schedule();
  Rng rng(7);
  for (int i = 0; i < 200; ++i)
    for (const auto& d : draw_noise(Matrix::Zero(5, 3), cfg.timesteps, sched, rng)) {
      CHECK(d.t >= 10);
      CHECK(d.t <= 20);
    }
}

TEST_CASE("one step sends gradient to every parameter group") {
  auto cfg = small_config();
  TrainState st = init_state(cfg);
  auto clouds = small_clouds();
  std::vector<const PointCloud*> batch{&clouds[0], &clouds[4], &clouds[8]};
  pretrain_step(batch, st, cfg, cfg.schedule(), cfg.lr);
  std::map<ParamGroup, double> reach;
  for (const auto& p : st.model.parameters()) reach[param_group(p.name)] += p.grad.cwiseAbs().sum();
  for (auto g : {ParamGroup::embedder, ParamGroup::position, ParamGroup::encoder, ParamGroup::mask_token,
                 ParamGroup::canet, ParamGroup::time, ParamGroup::cpdm}) {
    INFO(to_string(g));
    CHECK(reach[g] > 0.0);
  }
}

TEST_CASE("cosine schedule") {
  CHECK(cosine_lr(1e-3, 0, 100) == 1e-3);
  CHECK(cosine_lr(1e-3, 50, 100) == doctest::Approx(5e-4).epsilon(1e-12));
  CHECK(cosine_lr(1e-3, 100, 100) == doctest::Approx(0.0).epsilon(1e-15));
  CHECK(cosine_lr(1e-3, 25, 100) == doctest::Approx(0.5e-3 * (1 + std::cos(std::numbers::pi / 4))));
}

TEST_CASE("AdamW update matches a hand computation") {
  auto cfg = small_config();
  TrainState st(Model(toy_dims(), GuidanceMode::pcnet, 1), 0);
  auto& w = st.model.parameters()[0];
  auto& b = st.model.parameters()[1];
  REQUIRE(w.decay);
  REQUIRE_FALSE(b.decay);
  const double w0 = w.value(0, 0), b0 = b.value(0, 0);
  for (auto& p : st.model.parameters()) p.grad.setConstant(0.0);
  w.grad(0, 0) = 0.3;
  b.grad(0, 0) = -0.2;
  const double lr = 0.01;
  adamw_update(st, cfg, lr);
  auto expect = [&](double p0, double g, bool decay) {
    double p = decay ? p0 * (1 - lr * cfg.weight_decay) : p0;
    double m = (1 - cfg.adam_beta1) * g, v = (1 - cfg.adam_beta2) * g * g;
    double mh = m / (1 - cfg.adam_beta1), vh = v / (1 - cfg.adam_beta2);
    return p - lr * mh / (std::sqrt(vh) + cfg.adam_eps);
  };
  CHECK(w.value(0, 0) == doctest::Approx(expect(w0, 0.3, true)).epsilon(1e-14));
  CHECK(b.value(0, 0) == doctest::Approx(expect(b0, -0.2, false)).epsilon(1e-14));
  CHECK(st.step == 1);
}

TEST_CASE("fit is deterministic and reduces the loss") {
  auto cfg = small_config();
  cfg.epochs = 6;
  auto clouds = small_clouds();
  auto a = fit(clouds, cfg);
  auto b = fit(clouds, cfg);
  CHECK(a.loss_history == b.loss_history);
  CHECK(a.loss_history.size() == 6);
  CHECK(a.lr_history.size() == 6);
  CHECK(a.epoch == 6);
  CHECK(a.step == 6 * steps_per_epoch(clouds.size(), cfg.batch_size));
  CHECK(a.loss_history.back() < a.loss_history.front());
  int callbacks = 0;
  TrainState c = init_state(cfg);
  fit(clouds, cfg, c, 2, [&](const TrainState& s) { CHECK(s.epoch == ++callbacks); });
  CHECK(callbacks == 2);
  CHECK_THROWS_AS(fit(std::vector<PointCloud>{}, cfg), ValidationError);
}

TEST_CASE("non-finite loss is reported") {
  auto cfg = small_config();
  TrainState st = init_state(cfg);
  st.model.find("cpdm.l2.bh")->value.setConstant(std::numeric_limits<double>::infinity());
  auto clouds = small_clouds();
  std::vector<const PointCloud*> batch{&clouds[0]};
  CHECK_THROWS_AS(pretrain_step(batch, st, cfg, cfg.schedule(), cfg.lr), NumericalError);
}
