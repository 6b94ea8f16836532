#pragma once

#include <optional>
#include <vector>

#include "sbir/autodiff.hpp"
#include "sbir/rng.hpp"
#include "sbir/types.hpp"

namespace sbir {

// Dense layer; when `mask` is non-empty the effective weight is
// weight .* mask at all times (mask entries are 0/1 and fixed after
// construction).
struct LinearLayer {
  Matrix weight;  // out x in
  Matrix bias;    // 1 x out
  Matrix mask;    // empty, or same shape as weight

  bool masked() const { return mask.size() != 0; }
  Index in_dim() const { return weight.cols(); }
  Index out_dim() const { return weight.rows(); }
};

LinearLayer make_linear(Index in, Index out, RngStream& rng);
LinearLayer make_linear_zero(Index in, Index out);

// Tape-side view of a layer: the weight and bias lifted as leaves. The
// source layer must outlive the tape (the mask is referenced, not copied).
struct TapedLinear {
  ad::Var weight;
  ad::Var bias;
  const Matrix* mask = nullptr;
};

TapedLinear lift(ad::Tape& tape, const LinearLayer& layer);
ad::Var apply(const TapedLinear& layer, const ad::Var& x);

// MADE mask construction with sequential degrees. Inputs get degrees
// 1..d_in; hidden units cycle through 1..max(1, d_in-1); output degrees are
// the input degrees tiled d_out_multiplier times. Hidden masks connect
// degree >= previous degree, the output mask connects strictly greater, so
// output block i depends only on inputs with degree < i.
std::vector<Matrix> made_masks(Index d_in, const std::vector<Index>& hidden_sizes,
                               Index d_out_multiplier);

enum class Activation { kTanh, kRelu };

// Plain feedforward stack. The last layer is linear unless activate_output
// is set.
struct Mlp {
  std::vector<LinearLayer> layers;
  Activation activation = Activation::kTanh;
  bool activate_output = false;

  Index in_dim() const { return layers.front().in_dim(); }
  Index out_dim() const { return layers.back().out_dim(); }
};

// zero_init_last makes the freshly built net the zero map, which keeps
// untrained estimator heads analytically predictable.
Mlp make_mlp(Index in, const std::vector<Index>& hidden, Index out, Activation act,
             RngStream& rng, bool zero_init_last, bool activate_output = false);

struct TapedMlp {
  std::vector<TapedLinear> layers;
  Activation activation = Activation::kTanh;
  bool activate_output = false;
};

TapedMlp lift(ad::Tape& tape, const Mlp& mlp);
ad::Var apply(const TapedMlp& mlp, const ad::Var& x);

void collect_params(Mlp& mlp, ad::ParamRefs& out);
void collect_params(const Mlp& mlp, ad::ConstParamRefs& out);
void collect_leaves(const TapedMlp& mlp, std::vector<ad::Var>& out);

// ---- Adam -------------------------------------------------------------------

struct AdamConfig {
  double lr = 5e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

struct AdamState {
  Index step = 0;
  Vector m;  // first moment
  Vector v;  // second moment
  AdamConfig cfg;
};

AdamState adam_init(Index n_params, const AdamConfig& cfg = {});

// Standard bias-corrected Adam update, in place. Throws on dimension
// mismatch between params, grads, and state.
void adam_step(Vector& params, const Vector& grads, AdamState& state);

// Rescales grads in place so its 2-norm is at most max_norm.
void clip_global_norm(Vector& grads, double max_norm);

}  // namespace sbir
