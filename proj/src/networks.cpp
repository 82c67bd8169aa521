#include "pointdif/networks.hpp"

#include <cmath>

#include "pointdif/errors.hpp"
#include "pointdif/rng.hpp"

namespace pointdif {

using ag::Var;

ModelDims ModelDims::paper() {
  ModelDims d;
  d.dim = 384;
  d.heads = 6;
  d.blocks = 12;
  d.cond_dim = 768;
  d.time_dim = 128;
  d.embed_widths = {128, 256};
  d.pos_hidden = 128;
  d.canet_hidden = 512;
  d.pcnet_dims = {3, 128, 256, 512, 256, 128};
  d.attn_dim = 64;
  d.cond_tokens = 16;
  return d;
}

ModelDims ModelDims::desk() { return ModelDims{}; }

void ModelDims::validate() const {
  auto fail = [](const std::string& m) { throw ValidationError("model dims: " + m); };
  if (dim < 1 || heads < 1 || blocks < 0 || mlp_ratio < 1) fail("dim/heads/blocks must be positive");
  if (dim % heads != 0) fail("dim must be divisible by heads");
  if (cond_dim < 1 || time_dim < 2 || time_dim % 2 != 0) fail("cond_dim >= 1 and even time_dim >= 2");
  if (embed_widths.empty()) fail("embed_widths must not be empty");
  for (int w : embed_widths)
    if (w < 1) fail("embed widths must be positive");
  if (pos_hidden < 1 || canet_hidden < 1) fail("hidden widths must be positive");
  if (pcnet_dims.empty() || pcnet_dims.front() != 3) fail("pcnet_dims must start at 3");
  for (int w : pcnet_dims)
    if (w < 1) fail("pcnet widths must be positive");
  if (attn_dim < 1 || cond_tokens < 1 || guidance_dim() % cond_tokens != 0)
    fail("cond_tokens must divide cond_dim + time_dim");
}

GuidanceMode parse_guidance_mode(std::string_view name) {
  if (name == "pcnet") return GuidanceMode::pcnet;
  if (name == "concat") return GuidanceMode::concat;
  if (name == "cross_attention" || name == "cross-attention") return GuidanceMode::cross_attention;
  throw ValidationError("unknown guidance mode '" + std::string(name) + "'");
}

std::string_view to_string(GuidanceMode mode) {
  switch (mode) {
    case GuidanceMode::pcnet: return "pcnet";
    case GuidanceMode::concat: return "concat";
    case GuidanceMode::cross_attention: return "cross_attention";
  }
  return "?";
}

ParamGroup param_group(std::string_view name) {
  auto starts = [&](std::string_view p) { return name.substr(0, p.size()) == p; };
  if (starts("embed.")) return ParamGroup::embedder;
  if (starts("pos.")) return ParamGroup::position;
  if (starts("encoder.")) return ParamGroup::encoder;
  if (name == "mask_token") return ParamGroup::mask_token;
  if (starts("canet.")) return ParamGroup::canet;
  if (starts("time.")) return ParamGroup::time;
  if (starts("cpdm.")) return ParamGroup::cpdm;
  throw ValidationError("parameter '" + std::string(name) + "' belongs to no group");
}

std::string_view to_string(ParamGroup group) {
  switch (group) {
    case ParamGroup::embedder: return "embedder";
    case ParamGroup::position: return "position";
    case ParamGroup::encoder: return "encoder";
    case ParamGroup::mask_token: return "mask_token";
    case ParamGroup::canet: return "canet";
    case ParamGroup::time: return "time";
    case ParamGroup::cpdm: return "cpdm";
  }
  return "?";
}

// ---------------------------------------------------------------------------

std::size_t Model::add(std::string name, Matrix value, bool decay) {
  ag::Parameter p;
  p.name = std::move(name);
  p.value = std::move(value);
  p.decay = decay;
  p.zero_grad();
  params_.push_back(std::move(p));
  return params_.size() - 1;
}

Model::Linear Model::add_linear(const std::string& name, int in, int out, std::uint64_t seed,
                                double gain) {
  Rng rng(seed);
  const double a = gain * std::sqrt(6.0 / (in + out));
  Matrix w(in, out);
  for (Index i = 0; i < w.size(); ++i) w.data()[i] = rng.uniform(-a, a);
  Linear l;
  l.w = add(name + ".w", std::move(w), true);
  l.b = add(name + ".b", Matrix::Zero(1, out), false);
  return l;
}

Model::Model(const ModelDims& dims, GuidanceMode guidance, std::uint64_t seed)
    : dims_(dims), guidance_(guidance) {
  dims_.validate();
  std::uint64_t stream = 0;
  auto next = [&] { return derive_seed(seed, stream++); };
  auto uniform = [&](int rows, int cols, double gain) {
    Rng rng(next());
    const double a = gain * std::sqrt(6.0 / (rows + cols));
    Matrix w(rows, cols);
    for (Index i = 0; i < w.size(); ++i) w.data()[i] = rng.uniform(-a, a);
    return w;
  };

  const int D = dims_.dim;
  int in = 3;
  for (std::size_t i = 0; i < dims_.embed_widths.size(); ++i) {
    layout_.embed.push_back(add_linear("embed.l" + std::to_string(i), in, dims_.embed_widths[i], next()));
    in = dims_.embed_widths[i];
  }
  layout_.embed_out = add_linear("embed.out", in, D, next());

  layout_.pos1 = add_linear("pos.l0", 3, dims_.pos_hidden, next());
  layout_.pos2 = add_linear("pos.l1", dims_.pos_hidden, D, next());

  layout_.enc_in = add_linear("encoder.in", 2 * D, D, next());
  for (int b = 0; b < dims_.blocks; ++b) {
    const std::string pre = "encoder.block" + std::to_string(b);
    Block blk;
    blk.ln1_g = add(pre + ".ln1.g", Matrix::Ones(1, D), false);
    blk.ln1_b = add(pre + ".ln1.b", Matrix::Zero(1, D), false);
    blk.q = add_linear(pre + ".q", D, D, next());
    blk.k = add_linear(pre + ".k", D, D, next());
    blk.v = add_linear(pre + ".v", D, D, next());
    blk.o = add_linear(pre + ".o", D, D, next());
    blk.ln2_g = add(pre + ".ln2.g", Matrix::Ones(1, D), false);
    blk.ln2_b = add(pre + ".ln2.b", Matrix::Zero(1, D), false);
    blk.fc1 = add_linear(pre + ".fc1", D, dims_.mlp_ratio * D, next());
    blk.fc2 = add_linear(pre + ".fc2", dims_.mlp_ratio * D, D, next());
    layout_.blocks.push_back(blk);
  }

  {
    Rng rng(next());
    Matrix token(1, D);
    for (Index i = 0; i < D; ++i) token(0, i) = 0.02 * rng.normal();
    layout_.mask_token = add("mask_token", std::move(token), false);
  }

  const int H = dims_.canet_hidden;
  layout_.canet1 = add_linear("canet.a1", D, H, next());
  layout_.canet2 = add_linear("canet.a2", H, H, next());
  layout_.canet3 = add_linear("canet.a3", 2 * H, H, next());
  layout_.canet4 = add_linear("canet.a4", H, dims_.cond_dim, next());

  layout_.time_proj = add_linear("time.proj", dims_.time_dim, dims_.time_dim, next());

  const int Y = dims_.guidance_dim();
  const std::size_t L = dims_.pcnet_dims.size();
  for (std::size_t l = 0; l < L; ++l) {
    const std::string pre = "cpdm.l" + std::to_string(l);
    GuidedLayer g;
    g.in = dims_.pcnet_dims[l];
    g.out = l + 1 < L ? dims_.pcnet_dims[l + 1] : 3;
    const bool last = l + 1 == L;
    // The output layer starts with a zero main path and a tiny guidance path
    // so the initial noise prediction is close to zero.
    const double cond_gain = last ? 0.01 : 1.0;
    g.wh = add(pre + ".wh", last ? Matrix::Zero(g.in, g.out) : uniform(g.in, g.out, 1.0), true);
    g.bh = add(pre + ".bh", Matrix::Zero(1, g.out), false);
    switch (guidance_) {
      case GuidanceMode::pcnet:
        g.wb = add(pre + ".wb", uniform(Y, g.out, cond_gain), true);
        g.wr = add(pre + ".wr", uniform(Y, g.out, 1.0), true);
        g.br = add(pre + ".br", Matrix::Zero(1, g.out), false);
        break;
      case GuidanceMode::concat:
        g.wy = add(pre + ".wy", uniform(Y, g.out, cond_gain), true);
        break;
      case GuidanceMode::cross_attention: {
        const int chunk = Y / dims_.cond_tokens;
        g.wq = add(pre + ".wq", uniform(g.in, dims_.attn_dim, 1.0), true);
        g.wk = add(pre + ".wk", uniform(chunk, dims_.attn_dim, 1.0), true);
        g.wv = add(pre + ".wv", uniform(chunk, g.out, cond_gain), true);
        Rng rng(next());
        Matrix tok(dims_.cond_tokens, dims_.attn_dim);
        for (Index i = 0; i < tok.size(); ++i) tok.data()[i] = 0.02 * rng.normal();
        g.tok = add(pre + ".tok", std::move(tok), false);
        break;
      }
    }
    layout_.cpdm.push_back(g);
  }
}

const ag::Parameter* Model::find(std::string_view name) const {
  for (const auto& p : params_)
    if (p.name == name) return &p;
  return nullptr;
}

ag::Parameter* Model::find(std::string_view name) {
  for (auto& p : params_)
    if (p.name == name) return &p;
  return nullptr;
}

void Model::zero_grad() {
  for (auto& p : params_) p.zero_grad();
}

std::size_t Model::num_scalars() const {
  std::size_t n = 0;
  for (const auto& p : params_) n += static_cast<std::size_t>(p.value.size());
  return n;
}

// ---------------------------------------------------------------------------

Var Net::p(std::size_t index) {
  if (cache_.size() <= index) cache_.resize(cmodel_.parameters().size());
  auto& slot = cache_[index];
  if (!slot) {
    slot = model_ != nullptr ? tape_.parameter(model_->param(index))
                             : tape_.constant(cmodel_.param(index).value);
  }
  return *slot;
}

namespace {

Var affine(Net& net, const Model::Linear& l, Var x) { return ag::linear(x, net.p(l.w), net.p(l.b)); }

Var attention(Net& net, const Model::Block& blk, Var x) {
  const int D = net.dims().dim, H = net.dims().heads, dh = D / H;
  Var q = affine(net, blk.q, x), k = affine(net, blk.k, x), v = affine(net, blk.v, x);
  std::vector<Var> heads;
  heads.reserve(static_cast<std::size_t>(H));
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
  for (int h = 0; h < H; ++h) {
    Var qh = ag::slice_cols(q, h * dh, dh);
    Var kh = ag::slice_cols(k, h * dh, dh);
    Var vh = ag::slice_cols(v, h * dh, dh);
    Var att = ag::softmax_rows(ag::scale(ag::matmul(qh, ag::transpose(kh)), scale));
    heads.push_back(ag::matmul(att, vh));
  }
  return affine(net, blk.o, ag::concat_cols(heads));
}

}  // namespace

Var patch_embed(Net& net, const Matrix& patches, Index k) {
  if (patches.cols() != 3 || k < 1 || patches.rows() % k != 0)
    throw ValidationError("patch_embed: expected (s*k) x 3 patches");
  const auto& lay = net.layout();
  Var h = net.constant(patches);
  for (std::size_t i = 0; i < lay.embed.size(); ++i) {
    h = affine(net, lay.embed[i], h);
    if (i + 1 < lay.embed.size()) h = ag::gelu(h);
  }
  return affine(net, lay.embed_out, ag::group_max_rows(h, k));
}

Var pos_embed(Net& net, const Matrix& centers) {
  if (centers.cols() != 3) throw ValidationError("pos_embed: expected s x 3 centers");
  const auto& lay = net.layout();
  return affine(net, lay.pos2, ag::gelu(affine(net, lay.pos1, net.constant(centers))));
}

Var encoder_forward(Net& net, Var tokens, Var pos) {
  if (tokens.rows() == 0) throw ValidationError("encoder: at least one visible patch is required");
  if (tokens.rows() != pos.rows()) throw ValidationError("encoder: token/position count mismatch");
  const auto& lay = net.layout();
  Var x = affine(net, lay.enc_in, ag::concat_cols({tokens, pos}));
  for (const auto& blk : lay.blocks) {
    x = ag::add(x, attention(net, blk, ag::layer_norm(x, net.p(blk.ln1_g), net.p(blk.ln1_b))));
    Var f = ag::layer_norm(x, net.p(blk.ln2_g), net.p(blk.ln2_b));
    f = affine(net, blk.fc2, ag::gelu(affine(net, blk.fc1, f)));
    x = ag::add(x, f);
  }
  return x;
}

Var canet_forward(Net& net, Var vis_latents, Var vis_pos, Var masked_pos) {
  if (vis_latents.rows() == 0) throw ValidationError("canet: at least one visible patch is required");
  const auto& lay = net.layout();
  std::vector<Var> rows{ag::add(vis_latents, vis_pos)};
  if (masked_pos.valid() && masked_pos.rows() > 0)
    rows.push_back(ag::add(ag::broadcast_rows(net.p(lay.mask_token), masked_pos.rows()), masked_pos));
  Var tokens = ag::concat_rows(rows);
  const Index s = tokens.rows();

  Var f = affine(net, lay.canet2, ag::gelu(affine(net, lay.canet1, tokens)));
  Var pooled = ag::max_rows(f);
  Var g = ag::concat_cols({f, ag::broadcast_rows(pooled, s)});
  g = affine(net, lay.canet4, ag::gelu(affine(net, lay.canet3, g)));
  return ag::max_rows(g);
}

Eigen::RowVectorXd sinusoid_features(int t, int width) {
  const int half = width / 2;
  Eigen::RowVectorXd out(width);
  for (int j = 0; j < half; ++j) {
    const double freq = half > 1 ? std::pow(1e-4, static_cast<double>(j) / (half - 1)) : 1.0;
    out(j) = std::sin(t * freq);
    out(half + j) = std::cos(t * freq);
  }
  return out;
}

Var time_embed(Net& net, int t) {
  const auto& lay = net.layout();
  return affine(net, lay.time_proj, net.constant(sinusoid_features(t, net.dims().time_dim)));
}

Var pcnet_forward(Net& net, std::size_t layer, Var h, Var y) {
  const auto& g = net.layout().cpdm.at(layer);
  if (net.model().guidance() != GuidanceMode::pcnet)
    throw ValidationError("pcnet_forward on a model with a different guidance mode");
  Var gate = ag::sigmoid(ag::linear(y, net.p(g.wr), net.p(g.br)));
  Var main = ag::mul_row(ag::linear(h, net.p(g.wh), net.p(g.bh)), gate);
  return ag::add(main, ag::broadcast_rows(ag::matmul(y, net.p(g.wb)), h.rows()));
}

namespace {

Var concat_layer(Net& net, const Model::GuidedLayer& g, Var h, Var y) {
  // [h, y] W = h Wh + y Wy, the y part shared by every point.
  Var main = ag::linear(h, net.p(g.wh), net.p(g.bh));
  return ag::add(main, ag::broadcast_rows(ag::matmul(y, net.p(g.wy)), h.rows()));
}

Var cross_attention_layer(Net& net, const Model::GuidedLayer& g, Var h, Var y) {
  const auto& d = net.dims();
  const Index chunk = d.guidance_dim() / d.cond_tokens;
  Var tokens = ag::reshape(y, d.cond_tokens, chunk);
  Var keys = ag::add(ag::matmul(tokens, net.p(g.wk)), net.p(g.tok));
  Var values = ag::matmul(tokens, net.p(g.wv));
  Var queries = ag::matmul(h, net.p(g.wq));
  const double scale = 1.0 / std::sqrt(static_cast<double>(d.attn_dim));
  Var att = ag::softmax_rows(ag::scale(ag::matmul(queries, ag::transpose(keys)), scale));
  return ag::add(ag::linear(h, net.p(g.wh), net.p(g.bh)), ag::matmul(att, values));
}

}  // namespace

Var cpdm_forward(Net& net, Var x_t, Var c, int t) {
  if (x_t.cols() != 3) throw ValidationError("cpdm: expected n x 3 input");
  if (c.rows() != 1 || c.cols() != net.dims().cond_dim)
    throw ValidationError("cpdm: condition has the wrong width");
  Var y = ag::concat_cols({c, time_embed(net, t)});
  const auto& layers = net.layout().cpdm;
  Var h = x_t;
  for (std::size_t l = 0; l < layers.size(); ++l) {
    switch (net.model().guidance()) {
      case GuidanceMode::pcnet: h = pcnet_forward(net, l, h, y); break;
      case GuidanceMode::concat: h = concat_layer(net, layers[l], h, y); break;
      case GuidanceMode::cross_attention: h = cross_attention_layer(net, layers[l], h, y); break;
    }
    if (l + 1 < layers.size()) h = ag::leaky_relu(h, kCpdmLeakySlope);
  }
  return h;
}

EncodedPatches encode_patches(Net& net, const PatchSet& ps) {
  if (ps.visible.empty()) throw ValidationError("encode: no visible patches");
  EncodedPatches out;
  Var tokens = patch_embed(net, gather_patch_rows(ps, ps.visible), ps.k);
  out.vis_pos = pos_embed(net, gather_centers(ps, ps.visible));
  out.masked_pos = pos_embed(net, gather_centers(ps, ps.masked));
  out.latents = encoder_forward(net, tokens, out.vis_pos);
  return out;
}

Var condition_from_patches(Net& net, const PatchSet& ps) {
  auto enc = encode_patches(net, ps);
  return canet_forward(net, enc.latents, enc.vis_pos, enc.masked_pos);
}

Matrix encoder_latents(const Model& model, const PatchSet& ps) {
  ag::Tape tape;
  Net net(tape, model);
  return encode_patches(net, ps).latents.value();
}

Eigen::RowVectorXd condition_vector(const Model& model, const PatchSet& ps) {
  ag::Tape tape;
  Net net(tape, model);
  return condition_from_patches(net, ps).value().row(0);
}

Matrix predict_noise(const Model& model, const Matrix& x_t, const Eigen::RowVectorXd& c, int t) {
  ag::Tape tape;
  Net net(tape, model);
  return cpdm_forward(net, net.constant(x_t), net.constant(c), t).value();
}

}  // namespace pointdif
