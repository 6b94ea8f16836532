#include "sbir/nn.hpp"

#include <cmath>

#include "sbir/errors.hpp"

namespace sbir {

LinearLayer make_linear(Index in, Index out, RngStream& rng) {
  LinearLayer l;
  // Xavier-style scale; fine for the tanh/relu stacks used here.
  const double s = 1.0 / std::sqrt(static_cast<double>(in > 0 ? in : 1));
  l.weight = s * rng.normal_matrix(out, in);
  l.bias = Matrix::Zero(1, out);
  return l;
}

LinearLayer make_linear_zero(Index in, Index out) {
  LinearLayer l;
  l.weight = Matrix::Zero(out, in);
  l.bias = Matrix::Zero(1, out);
  return l;
}

TapedLinear lift(ad::Tape& tape, const LinearLayer& layer) {
  TapedLinear t;
  t.weight = tape.leaf(layer.weight);
  t.bias = tape.leaf(layer.bias);
  t.mask = layer.masked() ? &layer.mask : nullptr;
  return t;
}

ad::Var apply(const TapedLinear& layer, const ad::Var& x) {
  return ad::linear(x, layer.weight, layer.bias, layer.mask);
}

std::vector<Matrix> made_masks(Index d_in, const std::vector<Index>& hidden_sizes,
                               Index d_out_multiplier) {
  if (d_in < 1) throw Error("made_masks: d_in must be >= 1");
  if (d_out_multiplier < 1) throw Error("made_masks: d_out_multiplier must be >= 1");
  for (Index h : hidden_sizes)
    if (h < 1) throw Error("made_masks: hidden sizes must be >= 1");

  auto input_degrees = [&](Index i) { return i + 1; };
  const Index cycle = std::max<Index>(1, d_in - 1);
  auto hidden_degrees = [&](Index j) { return 1 + (j % cycle); };

  std::vector<Matrix> masks;
  masks.reserve(hidden_sizes.size() + 1);

  // Degrees of the layer feeding the mask currently being built.
  std::vector<Index> prev(static_cast<std::size_t>(d_in));
  for (Index i = 0; i < d_in; ++i) prev[static_cast<std::size_t>(i)] = input_degrees(i);

  for (Index h : hidden_sizes) {
    Matrix m(h, static_cast<Index>(prev.size()));
    for (Index j = 0; j < h; ++j)
      for (Index i = 0; i < static_cast<Index>(prev.size()); ++i)
        m(j, i) = hidden_degrees(j) >= prev[static_cast<std::size_t>(i)] ? 1.0 : 0.0;
    masks.push_back(std::move(m));
    prev.resize(static_cast<std::size_t>(h));
    for (Index j = 0; j < h; ++j) prev[static_cast<std::size_t>(j)] = hidden_degrees(j);
  }

  // Output: degree strictly greater than the feeding unit's degree, with
  // output degrees broadcast over the multiplier blocks.
  Matrix out(d_in * d_out_multiplier, static_cast<Index>(prev.size()));
  for (Index k = 0; k < d_out_multiplier; ++k)
    for (Index d = 0; d < d_in; ++d)
      for (Index i = 0; i < static_cast<Index>(prev.size()); ++i)
        out(k * d_in + d, i) =
            input_degrees(d) > prev[static_cast<std::size_t>(i)] ? 1.0 : 0.0;
  masks.push_back(std::move(out));
  return masks;
}

Mlp make_mlp(Index in, const std::vector<Index>& hidden, Index out, Activation act,
             RngStream& rng, bool zero_init_last, bool activate_output) {
  Mlp mlp;
  mlp.activation = act;
  mlp.activate_output = activate_output;
  Index prev = in;
  for (Index h : hidden) {
    mlp.layers.push_back(make_linear(prev, h, rng));
    prev = h;
  }
  mlp.layers.push_back(zero_init_last ? make_linear_zero(prev, out)
                                      : make_linear(prev, out, rng));
  return mlp;
}

TapedMlp lift(ad::Tape& tape, const Mlp& mlp) {
  TapedMlp t;
  t.activation = mlp.activation;
  t.activate_output = mlp.activate_output;
  t.layers.reserve(mlp.layers.size());
  for (const LinearLayer& l : mlp.layers) t.layers.push_back(lift(tape, l));
  return t;
}

ad::Var apply(const TapedMlp& mlp, const ad::Var& x) {
  ad::Var h = x;
  for (std::size_t i = 0; i < mlp.layers.size(); ++i) {
    h = apply(mlp.layers[i], h);
    if (i + 1 < mlp.layers.size() || mlp.activate_output)
      h = mlp.activation == Activation::kTanh ? ad::tanh(h) : ad::relu(h);
  }
  return h;
}

void collect_params(Mlp& mlp, ad::ParamRefs& out) {
  for (LinearLayer& l : mlp.layers) {
    out.push_back(&l.weight);
    out.push_back(&l.bias);
  }
}

void collect_params(const Mlp& mlp, ad::ConstParamRefs& out) {
  for (const LinearLayer& l : mlp.layers) {
    out.push_back(&l.weight);
    out.push_back(&l.bias);
  }
}

void collect_leaves(const TapedMlp& mlp, std::vector<ad::Var>& out) {
  for (const TapedLinear& l : mlp.layers) {
    out.push_back(l.weight);
    out.push_back(l.bias);
  }
}

AdamState adam_init(Index n_params, const AdamConfig& cfg) {
  AdamState s;
  s.m = Vector::Zero(n_params);
  s.v = Vector::Zero(n_params);
  s.cfg = cfg;
  return s;
}

void adam_step(Vector& params, const Vector& grads, AdamState& state) {
  if (params.size() != grads.size() || params.size() != state.m.size() ||
      params.size() != state.v.size())
    throw Error("adam_step: dimension mismatch between params, grads, and state");
  const AdamConfig& c = state.cfg;
  state.step += 1;
  state.m = c.beta1 * state.m + (1.0 - c.beta1) * grads;
  state.v = (c.beta2 * state.v.array() + (1.0 - c.beta2) * grads.array().square()).matrix();
  const double t = static_cast<double>(state.step);
  const double bias1 = 1.0 - std::pow(c.beta1, t);
  const double bias2 = 1.0 - std::pow(c.beta2, t);
  Vector m_hat = state.m / bias1;
  Vector v_hat = state.v / bias2;
  params.array() -= c.lr * m_hat.array() / (v_hat.array().sqrt() + c.eps);
}

void clip_global_norm(Vector& grads, double max_norm) {
  const double n = grads.norm();
  if (n > max_norm && n > 0.0) grads *= max_norm / n;
}

}  // namespace sbir
