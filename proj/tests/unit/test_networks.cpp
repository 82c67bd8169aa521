#include <doctest.h>

#include <algorithm>
#include <numeric>
#include <set>

#include "gradient_suite.hpp"
#include "pointdif/errors.hpp"
#include "pointdif/networks.hpp"

using namespace pointdif;
using namespace pointdif::testing;

namespace {

std::vector<Index> shuffled(Index n, std::uint64_t seed) {
  std::vector<Index> p(static_cast<std::size_t>(n));
  std::iota(p.begin(), p.end(), 0);
  Rng rng(seed);
  std::shuffle(p.begin(), p.end(), rng.engine());
  return p;
}

Matrix permute_rows(const Matrix& m, const std::vector<Index>& p) {
  Matrix out(m.rows(), m.cols());
  for (std::size_t i = 0; i < p.size(); ++i) out.row(static_cast<Index>(i)) = m.row(p[i]);
  return out;
}

}  // namespace

TEST_CASE("network components pass central-difference gradient checks") {
  for (const auto& c : network_gradient_cases()) {
    auto r = c.run();
    INFO(c.name << " worst " << r.worst << " rel " << r.max_rel << " analytic " << r.worst_analytic
                << " numeric " << r.worst_numeric);
    CHECK(r.checked > 0);
    CHECK(r.max_rel < 1e-4);
  }
}

TEST_CASE("attention key biases receive no gradient") {
  for (auto mode : {GuidanceMode::pcnet, GuidanceMode::concat, GuidanceMode::cross_attention}) {
    Model m = randomized_model(mode, 8);
    TrainConfig cfg;
    cfg.dims = toy_dims();
    cfg.guidance = mode;
    cfg.patches = {6, 4, false};
    cfg.steps = 20;
    cfg.beta_start = 1e-3;
    cfg.beta_end = 0.2;
    cfg.mask_ratio = 0.5;
    Rng data(28);
    PointCloud pc(data.normal_matrix(24, 3));
    m.zero_grad();
    {
      ag::Tape t;
      Net net(t, m);
      Rng rng(29);
      t.backward(cloud_loss(net, pc, cfg, cfg.schedule(), rng));
    }
    double key_bias = 0.0, overall = 0.0;
    int seen = 0;
    for (const auto& p : m.parameters()) {
      overall = std::max(overall, p.grad.cwiseAbs().maxCoeff());
      if (!is_key_bias(p.name)) continue;
      ++seen;
      key_bias = std::max(key_bias, p.grad.cwiseAbs().maxCoeff());
    }
    CHECK(seen == toy_dims().blocks);
    CHECK(overall > 0.0);
    CHECK(key_bias <= 1e-12 * overall);
  }
}

TEST_CASE("model dims and parameter layout") {
  CHECK(ModelDims::paper().dim == 384);
  CHECK(ModelDims::paper().heads == 6);
  CHECK(ModelDims::paper().blocks == 12);
  CHECK(ModelDims::paper().cond_dim == 768);
  CHECK(ModelDims::paper().pcnet_dims == std::vector<int>{3, 128, 256, 512, 256, 128});
  CHECK(ModelDims::desk().pcnet_dims == std::vector<int>{3, 32, 64, 128, 64, 32});
  ModelDims bad = ModelDims::desk();
  bad.heads = 5;
  CHECK_THROWS_AS(bad.validate(), ValidationError);

  Model m(ModelDims::desk(), GuidanceMode::pcnet, 1);
  std::set<std::string> names;
  std::set<ParamGroup> groups;
  for (const auto& p : m.parameters()) {
    names.insert(p.name);
    groups.insert(param_group(p.name));
    CHECK(p.value.allFinite());
  }
  CHECK(names.size() == m.parameters().size());
  CHECK(groups.size() == 7);
  CHECK(m.layout().cpdm.size() == 6);
  CHECK(m.find("cpdm.l5.wh")->value.isZero());
  CHECK(m.find("cpdm.l0.wr")->value.rows() == 256);
  CHECK(m.find("mask_token")->value.cols() == 64);
  CHECK_FALSE(m.find("mask_token")->decay);
  CHECK(m.find("encoder.block0.q.w")->decay);
  CHECK_FALSE(m.find("encoder.block0.q.b")->decay);

  Model again(ModelDims::desk(), GuidanceMode::pcnet, 1);
  for (std::size_t i = 0; i < m.parameters().size(); ++i)
    CHECK(m.parameters()[i].value == again.parameters()[i].value);

  CHECK(parse_guidance_mode("cross-attention") == GuidanceMode::cross_attention);
  CHECK(to_string(GuidanceMode::concat) == "concat");
  CHECK_THROWS_AS(parse_guidance_mode("film"), ValidationError);
  CHECK_THROWS_AS(param_group("stray"), ValidationError);
}

TEST_CASE("patch embedding is invariant to point order within a patch") {
  Model m = randomized_model(GuidanceMode::pcnet, 1);
  Rng rng(2);
  const Index s = 3, k = 5;
  Matrix patches = rng.normal_matrix(s * k, 3);
  Matrix perm = patches;
  for (Index p = 0; p < s; ++p) perm.middleRows(p * k, k) = permute_rows(patches.middleRows(p * k, k), shuffled(k, p));
  ag::Tape t;
  Net net(t, std::as_const(m));
  Matrix a = patch_embed(net, patches, k).value();
  Matrix b = patch_embed(net, perm, k).value();
  CHECK(a == b);
  Matrix twin(2 * k, 3);
  twin << patches.topRows(k), patches.topRows(k);
  Matrix tw = patch_embed(net, twin, k).value();
  CHECK(tw.row(0) == tw.row(1));
  CHECK_THROWS_AS(patch_embed(net, rng.normal_matrix(7, 3), 5), ValidationError);
}

TEST_CASE("position embedding") {
  Model m = randomized_model(GuidanceMode::pcnet, 3);
  for (auto* p : model_params(m, "pos.")) p->value.setZero();
  m.find("pos.l1.b")->value.setConstant(0.25);
  ag::Tape t;
  Net net(t, std::as_const(m));
  Rng rng(1);
  Matrix out = pos_embed(net, rng.normal_matrix(4, 3)).value();
  CHECK((out.array() == 0.25).all());
}

TEST_CASE("encoder is permutation equivariant and handles one token") {
  Model m = randomized_model(GuidanceMode::pcnet, 4);
  Rng rng(5);
  Matrix tok = rng.normal_matrix(6, 8), pos = rng.normal_matrix(6, 8);
  auto p = shuffled(6, 1);
  ag::Tape t;
  Net net(t, std::as_const(m));
  Matrix a = encoder_forward(net, net.constant(tok), net.constant(pos)).value();
  Matrix b = encoder_forward(net, net.constant(permute_rows(tok, p)), net.constant(permute_rows(pos, p))).value();
  CHECK((permute_rows(a, p) - b).cwiseAbs().maxCoeff() < 1e-12);
  Matrix one = encoder_forward(net, net.constant(tok.topRows(1)), net.constant(pos.topRows(1))).value();
  CHECK(one.rows() == 1);
  CHECK(one.allFinite());
  CHECK_THROWS_AS(encoder_forward(net, net.constant(Matrix(0, 8)), net.constant(Matrix(0, 8))), ValidationError);
}

TEST_CASE("canet is invariant to token order") {
  Model m = randomized_model(GuidanceMode::pcnet, 6);
  Rng rng(7);
  Matrix lat = rng.normal_matrix(5, 8), vpos = rng.normal_matrix(5, 8), mpos = rng.normal_matrix(3, 8);
  ag::Tape t;
  Net net(t, std::as_const(m));
  Matrix a = canet_forward(net, net.constant(lat), net.constant(vpos), net.constant(mpos)).value();
  auto pv = shuffled(5, 2), pm = shuffled(3, 3);
  Matrix b = canet_forward(net, net.constant(permute_rows(lat, pv)), net.constant(permute_rows(vpos, pv)),
                           net.constant(permute_rows(mpos, pm))).value();
  CHECK(a == b);
  CHECK(a.cols() == 6);
  Matrix none = canet_forward(net, net.constant(lat), net.constant(vpos), net.constant(Matrix(0, 8))).value();
  CHECK(none.allFinite());
}

TEST_CASE("mask token gradient equals the sum over its replicas") {
  Model m = randomized_model(GuidanceMode::pcnet, 8);
  Rng rng(9);
  Matrix lat = rng.normal_matrix(3, 8), vpos = rng.normal_matrix(3, 8);
  ag::Parameter mpos{"masked_pos", rng.normal_matrix(5, 8), {}, true};
  mpos.zero_grad();
  m.zero_grad();
  ag::Tape t;
  Net net(t, m);
  t.backward(project(canet_forward(net, net.constant(lat), net.constant(vpos), t.parameter(mpos)), 4));
  const Matrix shared = m.find("mask_token")->grad;

  // Oracle: a copy of the model with a zero mask token, each replica
  // materialized into its own row so every copy has its own gradient.
  Model copy = m;
  const Matrix token = copy.find("mask_token")->value;
  copy.find("mask_token")->value.setZero();
  ag::Parameter replicas{"replicas", mpos.value.rowwise() + Eigen::RowVectorXd(token.row(0)), {}, true};
  replicas.zero_grad();
  ag::Tape t2;
  Net net2(t2, std::as_const(copy));
  t2.backward(project(canet_forward(net2, net2.constant(lat), net2.constant(vpos), t2.parameter(replicas)), 4));
  Matrix summed = replicas.grad.colwise().sum();
  CHECK((summed - shared).cwiseAbs().maxCoeff() < 1e-12);
  CHECK(shared.cwiseAbs().maxCoeff() > 0.0);
}

TEST_CASE("time embedding") {
  auto f = sinusoid_features(1, 8);
  CHECK(f(0) == doctest::Approx(std::sin(1.0)));
  CHECK(f(3) == doctest::Approx(std::sin(1e-4)));
  CHECK(f(4) == doctest::Approx(std::cos(1.0)));
  std::set<std::vector<double>> seen;
  for (int t = 1; t <= 200; ++t) {
    auto v = sinusoid_features(t, 128);
    seen.insert(std::vector<double>(v.data(), v.data() + v.size()));
  }
  CHECK(seen.size() == 200);
  Model m(ModelDims::desk(), GuidanceMode::pcnet, 2);
  ag::Tape t;
  Net net(t, std::as_const(m));
  CHECK(time_embed(net, 7).value() == time_embed(net, 7).value());
}

TEST_CASE("pcnet layer special cases") {
  Model m = randomized_model(GuidanceMode::pcnet, 10);
  const auto& g = m.layout().cpdm[0];
  m.param(g.wr).value.setZero();
  m.param(g.br).value.setZero();
  Rng rng(11);
  Matrix h = rng.normal_matrix(4, 3);
  Matrix y = rng.normal_matrix(1, 10);
  ag::Tape t;
  Net net(t, std::as_const(m));
  Matrix out = pcnet_forward(net, 0, net.constant(h), net.constant(y)).value();
  Matrix expect = 0.5 * ((h * m.param(g.wh).value).rowwise() + Eigen::RowVectorXd(m.param(g.bh).value.row(0)));
  expect.rowwise() += Eigen::RowVectorXd((y * m.param(g.wb).value).row(0));
  CHECK((out - expect).cwiseAbs().maxCoeff() < 1e-12);

  Matrix zero_y = pcnet_forward(net, 0, net.constant(h), net.constant(Matrix::Zero(1, 10))).value();
  Matrix gated = 0.5 * ((h * m.param(g.wh).value).rowwise() + Eigen::RowVectorXd(m.param(g.bh).value.row(0)));
  CHECK((zero_y - gated).cwiseAbs().maxCoeff() < 1e-12);

  Model other = randomized_model(GuidanceMode::concat, 1);
  ag::Tape t2;
  Net net2(t2, std::as_const(other));
  CHECK_THROWS_AS(pcnet_forward(net2, 0, net2.constant(h), net2.constant(y)), ValidationError);
}

TEST_CASE("cpdm is per-point in every guidance mode") {
  for (GuidanceMode mode : {GuidanceMode::pcnet, GuidanceMode::concat, GuidanceMode::cross_attention}) {
    Model m = randomized_model(mode, 12);
    Rng rng(13);
    Matrix x = rng.normal_matrix(9, 3);
    Matrix c = rng.normal_matrix(1, 6);
    Matrix a = predict_noise(m, x, c, 5);
    CHECK(a.rows() == 9);
    CHECK(a.allFinite());
    auto p = shuffled(9, 4);
    Matrix b = predict_noise(m, permute_rows(x, p), c, 5);
    CHECK((permute_rows(a, p) - b).cwiseAbs().maxCoeff() == 0.0);
    Matrix dup = x;
    dup.row(3) = x.row(0);
    Matrix d = predict_noise(m, dup, c, 5);
    CHECK(d.row(3) == d.row(0));
    CHECK(predict_noise(m, x, c, 5) == a);
  }
}

TEST_CASE("concat guidance with zero guidance is an unconditional MLP") {
  Model m = randomized_model(GuidanceMode::concat, 14);
  auto& lays = m.layout().cpdm;
  for (const auto& g : lays) m.param(g.bh).value.setZero();
  Rng rng(15);
  Matrix x = rng.normal_matrix(5, 3);
  // y = [c, time_embed(t)] vanishes when c = 0 and the time projection is zeroed.
  m.find("time.proj.w")->value.setZero();
  m.find("time.proj.b")->value.setZero();
  Matrix out = predict_noise(m, x, Matrix::Zero(1, 6), 3);
  Matrix h = x;
  for (std::size_t l = 0; l < lays.size(); ++l) {
    h = h * m.param(lays[l].wh).value;
    if (l + 1 < lays.size()) h = h.unaryExpr([](double v) { return v > 0 ? v : 0.1 * v; });
  }
  CHECK((out - h).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("freshly initialized model predicts near-zero noise") {
  Model m(ModelDims::desk(), GuidanceMode::pcnet, 3);
  Rng rng(1);
  Matrix eps = predict_noise(m, rng.normal_matrix(64, 3), rng.normal_matrix(1, 128), 50);
  CHECK(eps.cwiseAbs().maxCoeff() < 0.1);
}

TEST_CASE("encode and condition from a patch set") {
  Model m(ModelDims::desk(), GuidanceMode::pcnet, 4);
  Rng rng(5);
  PointCloud pc(rng.normal_matrix(256, 3));
  auto ps = make_patches(pc, PatchOptions{32, 16, false}, 1);
  apply_mask(ps, 0.8, 2);
  Matrix lat = encoder_latents(m, ps);
  CHECK(lat.rows() == 7);
  CHECK(lat.cols() == 64);
  auto c = condition_vector(m, ps);
  CHECK(c.size() == 128);
  CHECK(c.allFinite());
  CHECK(condition_vector(m, ps) == c);
}
