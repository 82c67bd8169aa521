#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "pointdif/autograd.hpp"
#include "pointdif/patching.hpp"
#include "pointdif/point_cloud.hpp"

namespace pointdif {

struct ModelDims {
  int dim = 64;         // token width D
  int heads = 4;
  int blocks = 4;
  int mlp_ratio = 4;    // transformer feedforward widening
  int cond_dim = 128;   // width of the condition vector c
  int time_dim = 128;   // width of the time-step embedding
  std::vector<int> embed_widths{32, 64};  // shared per-point layers of the patch embedder
  int pos_hidden = 64;
  int canet_hidden = 128;
  std::vector<int> pcnet_dims{3, 32, 64, 128, 64, 32};  // input width of each PCNet; output 3
  int attn_dim = 16;     // query/key width of the cross-attention guidance variant
  int cond_tokens = 16;  // the guidance vector is split into this many tokens there

  static ModelDims paper();
  static ModelDims desk();

  int guidance_dim() const { return cond_dim + time_dim; }
  void validate() const;
  bool operator==(const ModelDims&) const = default;
};

enum class GuidanceMode { pcnet, concat, cross_attention };

GuidanceMode parse_guidance_mode(std::string_view name);
std::string_view to_string(GuidanceMode mode);

// Parameter families that are trained jointly.
enum class ParamGroup { embedder, position, encoder, mask_token, canet, time, cpdm };
ParamGroup param_group(std::string_view name);
std::string_view to_string(ParamGroup group);

// All trainable weights. Parameters live in a flat vector in creation order;
// the layout structs below hold indices into it so copies stay valid.
class Model {
 public:
  struct Linear {
    std::size_t w, b;
  };
  struct Block {
    std::size_t ln1_g, ln1_b;
    Linear q, k, v, o;
    std::size_t ln2_g, ln2_b;
    Linear fc1, fc2;
  };
  struct GuidedLayer {
    int in = 0, out = 0;
    std::size_t wh = 0, bh = 0;
    std::size_t wb = 0, wr = 0, br = 0;  // pcnet
    std::size_t wy = 0;                  // concat
    std::size_t wq = 0, wk = 0, wv = 0, tok = 0;  // cross attention
  };
  struct Layout {
    std::vector<Linear> embed;  // shared per-point layers
    Linear embed_out;
    Linear pos1, pos2;
    Linear enc_in;
    std::vector<Block> blocks;
    std::size_t mask_token;
    Linear canet1, canet2, canet3, canet4;
    Linear time_proj;
    std::vector<GuidedLayer> cpdm;
  };

  Model(const ModelDims& dims, GuidanceMode guidance, std::uint64_t seed);

  const ModelDims& dims() const { return dims_; }
  GuidanceMode guidance() const { return guidance_; }
  const Layout& layout() const { return layout_; }

  std::vector<ag::Parameter>& parameters() { return params_; }
  const std::vector<ag::Parameter>& parameters() const { return params_; }
  ag::Parameter& param(std::size_t i) { return params_[i]; }
  const ag::Parameter& param(std::size_t i) const { return params_[i]; }
  const ag::Parameter* find(std::string_view name) const;
  ag::Parameter* find(std::string_view name);

  void zero_grad();
  std::size_t num_scalars() const;

 private:
  std::size_t add(std::string name, Matrix value, bool decay);
  Linear add_linear(const std::string& name, int in, int out, std::uint64_t seed,
                    double gain = 1.0);

  ModelDims dims_;
  GuidanceMode guidance_;
  std::vector<ag::Parameter> params_;
  Layout layout_;
};

// Binds model weights onto a tape. With a mutable model the weights are
// differentiable parameters; with a const model they enter as constants.
class Net {
 public:
  Net(ag::Tape& tape, Model& model) : tape_(tape), model_(&model), cmodel_(model) {}
  Net(ag::Tape& tape, const Model& model) : tape_(tape), cmodel_(model) {}

  ag::Tape& tape() { return tape_; }
  const Model& model() const { return cmodel_; }
  const ModelDims& dims() const { return cmodel_.dims(); }
  const Model::Layout& layout() const { return cmodel_.layout(); }

  ag::Var p(std::size_t index);
  ag::Var constant(Matrix m) { return tape_.constant(std::move(m)); }

 private:
  ag::Tape& tape_;
  Model* model_ = nullptr;
  const Model& cmodel_;
  std::vector<std::optional<ag::Var>> cache_;
};

// (s*k) x 3 centered patches -> s x D tokens. Shared per-point layers, max over
// the k points of each patch, then an affine map to D.
ag::Var patch_embed(Net& net, const Matrix& patches, Index k);

// s x 3 raw centers -> s x D, affine -> GELU -> affine.
ag::Var pos_embed(Net& net, const Matrix& centers);

// Concat(token, position) projected to D, then pre-norm transformer blocks.
// Requires at least one token.
ag::Var encoder_forward(Net& net, ag::Var tokens, ag::Var pos);

// Condition vector (1 x cond_dim) from visible latents and the shared mask
// token, each row carrying its patch position embedding. masked_pos may have
// zero rows.
ag::Var canet_forward(Net& net, ag::Var vis_latents, ag::Var vis_pos, ag::Var masked_pos);

// Sinusoidal features: width/2 frequencies from 1 down to 1e-4 (geometric),
// laid out as [sin..., cos...].
Eigen::RowVectorXd sinusoid_features(int t, int width);
ag::Var time_embed(Net& net, int t);

// One gated PCNet layer: sigmoid(y Wr + br) * (H Wh + bh) + y Wb.
ag::Var pcnet_forward(Net& net, std::size_t layer, ag::Var h, ag::Var y);

// Noise prediction for an n x 3 noisy cloud. Per-point network; the guidance
// vector y = [c, time_embed(t)] enters each layer according to the model's
// GuidanceMode.
ag::Var cpdm_forward(Net& net, ag::Var x_t, ag::Var c, int t);

inline constexpr double kCpdmLeakySlope = 0.1;

struct EncodedPatches {
  ag::Var latents;     // g x D
  ag::Var vis_pos;     // g x D
  ag::Var masked_pos;  // r x D
};

// Embed visible patches, encode them and embed every center's position.
EncodedPatches encode_patches(Net& net, const PatchSet& ps);
ag::Var condition_from_patches(Net& net, const PatchSet& ps);

// Inference helpers without gradient tracking.
Matrix encoder_latents(const Model& model, const PatchSet& ps);
Eigen::RowVectorXd condition_vector(const Model& model, const PatchSet& ps);
Matrix predict_noise(const Model& model, const Matrix& x_t, const Eigen::RowVectorXd& c, int t);

}  // namespace pointdif
