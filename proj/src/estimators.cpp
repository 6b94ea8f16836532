#include "sbir/estimators.hpp"

#include <cmath>
#include <string>

#include "sbir/errors.hpp"

namespace sbir {

namespace {

IndexVec identity_perm(Index d) {
  IndexVec p(static_cast<std::size_t>(d));
  for (Index i = 0; i < d; ++i) p[static_cast<std::size_t>(i)] = i;
  return p;
}

IndexVec reversal_perm(Index d) {
  IndexVec p(static_cast<std::size_t>(d));
  for (Index i = 0; i < d; ++i) p[static_cast<std::size_t>(i)] = d - 1 - i;
  return p;
}

IndexVec invert_perm(const IndexVec& p) {
  IndexVec inv(p.size());
  for (std::size_t j = 0; j < p.size(); ++j)
    inv[static_cast<std::size_t>(p[j])] = static_cast<Index>(j);
  return inv;
}

void check_context(Index expected, Index got, const char* who) {
  if (expected != got)
    throw Error(std::string(who) + ": context dimension mismatch");
}

}  // namespace

// ---- MAF --------------------------------------------------------------------

ConditionalMaf make_maf(const MafConfig& cfg, RngStream& rng) {
  if (cfg.event_dim < 1) throw Error("make_maf: event_dim must be >= 1");
  if (cfg.n_blocks < 1) throw Error("make_maf: n_blocks must be >= 1");
  ConditionalMaf m;
  m.cfg = cfg;
  const auto masks = made_masks(cfg.event_dim, cfg.hidden, 2);
  for (Index k = 0; k < cfg.n_blocks; ++k) {
    MadeBlock b;
    b.perm = k == 0 ? identity_perm(cfg.event_dim) : reversal_perm(cfg.event_dim);
    b.input = make_linear(cfg.event_dim, cfg.hidden.front(), rng);
    b.input.mask = masks.front();
    if (cfg.context_dim > 0) {
      const double s = 1.0 / std::sqrt(static_cast<double>(cfg.context_dim));
      b.context_weight = s * rng.normal_matrix(cfg.context_dim, cfg.hidden.front());
    }
    for (std::size_t i = 1; i < cfg.hidden.size(); ++i) {
      LinearLayer l = make_linear(cfg.hidden[i - 1], cfg.hidden[i], rng);
      l.mask = masks[i];
      b.hidden.push_back(std::move(l));
    }
    b.output = make_linear_zero(cfg.hidden.back(), 2 * cfg.event_dim);
    b.output.mask = masks.back();
    m.blocks.push_back(std::move(b));
  }
  return m;
}

TapedMaf lift(ad::Tape& tape, const ConditionalMaf& model) {
  TapedMaf t;
  t.model = &model;
  for (const MadeBlock& b : model.blocks) {
    TapedMadeBlock tb;
    tb.input = lift(tape, b.input);
    if (model.cfg.context_dim > 0) tb.context_weight = tape.leaf(b.context_weight);
    for (const LinearLayer& l : b.hidden) tb.hidden.push_back(lift(tape, l));
    tb.output = lift(tape, b.output);
    t.blocks.push_back(std::move(tb));
  }
  return t;
}

void collect_params(ConditionalMaf& model, ad::ParamRefs& out) {
  for (MadeBlock& b : model.blocks) {
    out.push_back(&b.input.weight);
    out.push_back(&b.input.bias);
    if (model.cfg.context_dim > 0) out.push_back(&b.context_weight);
    for (LinearLayer& l : b.hidden) {
      out.push_back(&l.weight);
      out.push_back(&l.bias);
    }
    out.push_back(&b.output.weight);
    out.push_back(&b.output.bias);
  }
}

void collect_params(const ConditionalMaf& model, ad::ConstParamRefs& out) {
  for (const MadeBlock& b : model.blocks) {
    out.push_back(&b.input.weight);
    out.push_back(&b.input.bias);
    if (model.cfg.context_dim > 0) out.push_back(&b.context_weight);
    for (const LinearLayer& l : b.hidden) {
      out.push_back(&l.weight);
      out.push_back(&l.bias);
    }
    out.push_back(&b.output.weight);
    out.push_back(&b.output.bias);
  }
}

void collect_leaves(const TapedMaf& model, std::vector<ad::Var>& out) {
  for (const TapedMadeBlock& b : model.blocks) {
    out.push_back(b.input.weight);
    out.push_back(b.input.bias);
    if (model.model->cfg.context_dim > 0) out.push_back(b.context_weight);
    for (const TapedLinear& l : b.hidden) {
      out.push_back(l.weight);
      out.push_back(l.bias);
    }
    out.push_back(b.output.weight);
    out.push_back(b.output.bias);
  }
}

namespace {

// Shift and clamped log-scale of one MADE block, as a function of the
// (already permuted) event y and the context.
std::pair<ad::Var, ad::Var> made_shift_scale(const MafConfig& cfg,
                                             const TapedMadeBlock& block,
                                             const ad::Var& y, const ad::Var& ctx,
                                             Index block_index) {
  ad::Var h = apply(block.input, y);
  if (cfg.context_dim > 0) h = h + ad::matmul(ctx, block.context_weight);
  h = ad::tanh(h);
  for (const TapedLinear& l : block.hidden) h = ad::tanh(apply(l, h));
  ad::Var o = apply(block.output, h);
  if (!o.value().allFinite())
    throw NumericError("maf: non-finite activations in flow block " +
                       std::to_string(block_index));
  const Index d = cfg.event_dim;
  ad::Var mu = ad::slice_cols(o, 0, d);
  ad::Var raw = ad::slice_cols(o, d, d);
  ad::Var alpha = ad::scale(ad::tanh(ad::scale(raw, 1.0 / cfg.scale_clamp)),
                            cfg.scale_clamp);
  return {mu, alpha};
}

}  // namespace

ad::Var maf_log_prob(ad::Tape& tape, const TapedMaf& model, const ad::Var& theta,
                     const ad::Var& context) {
  const MafConfig& cfg = model.model->cfg;
  if (theta.cols() != cfg.event_dim) throw Error("maf_log_prob: event dim mismatch");
  if (cfg.context_dim > 0) check_context(cfg.context_dim, context.cols(), "maf_log_prob");

  ad::Var cur = theta;
  ad::Var logdet = tape.constant(Matrix::Zero(theta.rows(), 1));
  for (std::size_t k = 0; k < model.blocks.size(); ++k) {
    const MadeBlock& spec = model.model->blocks[k];
    cur = ad::permute_cols(cur, spec.perm);
    auto [mu, alpha] = made_shift_scale(cfg, model.blocks[k], cur, context,
                                        static_cast<Index>(k));
    cur = (cur - mu) * ad::exp(-alpha);
    logdet = logdet - ad::row_sum(alpha);
  }
  ad::Var base = ad::add_scalar(ad::scale(ad::row_sum(ad::square(cur)), -0.5),
                                -0.5 * static_cast<double>(cfg.event_dim) * kLogTwoPi);
  return base + logdet;
}

Vector maf_log_prob(const ConditionalMaf& model, const ParameterBatch& theta,
                    const DataBatch& context) {
  ad::Tape tape(false);
  TapedMaf taped = lift(tape, model);
  ad::Var lp = maf_log_prob(tape, taped, tape.constant(theta), tape.constant(context));
  return lp.value().col(0);
}

Matrix maf_forward(const ConditionalMaf& model, const ParameterBatch& theta,
                   const DataBatch& context, Vector* logdet) {
  ad::Tape tape(false);
  TapedMaf taped = lift(tape, model);
  const MafConfig& cfg = model.cfg;
  ad::Var ctx = tape.constant(context);
  ad::Var cur = tape.constant(theta);
  Vector ld = Vector::Zero(theta.rows());
  for (std::size_t k = 0; k < taped.blocks.size(); ++k) {
    cur = ad::permute_cols(cur, model.blocks[k].perm);
    auto [mu, alpha] = made_shift_scale(cfg, taped.blocks[k], cur, ctx,
                                        static_cast<Index>(k));
    cur = (cur - mu) * ad::exp(-alpha);
    ld -= alpha.value().rowwise().sum();
  }
  if (logdet) *logdet = ld;
  return cur.value();
}

Matrix maf_inverse(const ConditionalMaf& model, const Matrix& noise,
                   const DataBatch& context) {
  const MafConfig& cfg = model.cfg;
  if (noise.cols() != cfg.event_dim) throw Error("maf_inverse: event dim mismatch");
  Matrix cur = noise;
  // Blocks invert in reverse order; within a block each autoregressive
  // dimension needs one masked forward pass.
  for (std::size_t kk = model.blocks.size(); kk-- > 0;) {
    const MadeBlock& spec = model.blocks[kk];
    Matrix y = Matrix::Zero(cur.rows(), cur.cols());
    for (Index d = 0; d < cfg.event_dim; ++d) {
      ad::Tape tape(false);
      TapedMaf taped = lift(tape, model);  // only block kk is used below
      auto [mu, alpha] = made_shift_scale(cfg, taped.blocks[kk], tape.constant(y),
                                          tape.constant(context),
                                          static_cast<Index>(kk));
      y.col(d) = cur.col(d).cwiseProduct(alpha.value().col(d).array().exp().matrix()) +
                 mu.value().col(d);
    }
    // Undo the column permutation applied before the block.
    Matrix unperm(y.rows(), y.cols());
    for (Index j = 0; j < y.cols(); ++j)
      unperm.col(spec.perm[static_cast<std::size_t>(j)]) = y.col(j);
    cur = std::move(unperm);
  }
  return cur;
}

ParameterBatch maf_sample(const ConditionalMaf& model, Index n, const Vector& context,
                          RngStream& rng) {
  if (n < 0) throw Error("maf_sample: n must be >= 0");
  const MafConfig& cfg = model.cfg;
  Matrix noise = rng.normal_matrix(n, cfg.event_dim);
  Matrix ctx(n, cfg.context_dim);
  if (cfg.context_dim > 0) {
    check_context(cfg.context_dim, context.size(), "maf_sample");
    ctx = context.transpose().replicate(n, 1);
  }
  return maf_inverse(model, noise, ctx);
}

// ---- MDN --------------------------------------------------------------------

MixtureDensityNet make_mdn(const MdnConfig& cfg, RngStream& rng) {
  if (cfg.event_dim < 1) throw Error("make_mdn: event_dim must be >= 1");
  if (cfg.n_components < 1) throw Error("make_mdn: n_components must be >= 1");
  MixtureDensityNet m;
  m.cfg = cfg;
  std::vector<Index> trunk_hidden(cfg.hidden.begin(), cfg.hidden.end() - 1);
  m.trunk = make_mlp(cfg.context_dim, trunk_hidden, cfg.hidden.back(),
                     Activation::kTanh, rng, /*zero_init_last=*/false,
                     /*activate_output=*/true);
  m.logits_head = make_linear_zero(cfg.hidden.back(), cfg.n_components);
  m.means_head = make_linear_zero(cfg.hidden.back(), cfg.n_components * cfg.event_dim);
  m.logvars_head = make_linear_zero(cfg.hidden.back(), cfg.n_components * cfg.event_dim);
  return m;
}

TapedMdn lift(ad::Tape& tape, const MixtureDensityNet& model) {
  TapedMdn t;
  t.model = &model;
  t.trunk = lift(tape, model.trunk);
  t.logits_head = lift(tape, model.logits_head);
  t.means_head = lift(tape, model.means_head);
  t.logvars_head = lift(tape, model.logvars_head);
  return t;
}

void collect_params(MixtureDensityNet& model, ad::ParamRefs& out) {
  collect_params(model.trunk, out);
  for (LinearLayer* l : {&model.logits_head, &model.means_head, &model.logvars_head}) {
    out.push_back(&l->weight);
    out.push_back(&l->bias);
  }
}

void collect_params(const MixtureDensityNet& model, ad::ConstParamRefs& out) {
  collect_params(model.trunk, out);
  for (const LinearLayer* l :
       {&model.logits_head, &model.means_head, &model.logvars_head}) {
    out.push_back(&l->weight);
    out.push_back(&l->bias);
  }
}

void collect_leaves(const TapedMdn& model, std::vector<ad::Var>& out) {
  collect_leaves(model.trunk, out);
  for (const TapedLinear* l :
       {&model.logits_head, &model.means_head, &model.logvars_head}) {
    out.push_back(l->weight);
    out.push_back(l->bias);
  }
}

ad::Var mdn_log_prob(ad::Tape& tape, const TapedMdn& model, const ad::Var& theta,
                     const ad::Var& context) {
  const MdnConfig& cfg = model.model->cfg;
  if (theta.cols() != cfg.event_dim) throw Error("mdn_log_prob: event dim mismatch");
  check_context(cfg.context_dim, context.cols(), "mdn_log_prob");

  ad::Var feats = apply(model.trunk, context);
  ad::Var logits = apply(model.logits_head, feats);
  ad::Var means = apply(model.means_head, feats);
  ad::Var logvars = apply(model.logvars_head, feats);
  ad::Var logw = ad::sub_col(logits, ad::logsumexp_rows(logits));

  const Index d = cfg.event_dim;
  std::vector<ad::Var> comp_cols;
  comp_cols.reserve(static_cast<std::size_t>(cfg.n_components));
  for (Index k = 0; k < cfg.n_components; ++k) {
    ad::Var mu_k = ad::slice_cols(means, k * d, d);
    ad::Var lv_k = ad::slice_cols(logvars, k * d, d);
    ad::Var diff = theta - mu_k;
    ad::Var quad = ad::square(diff) * ad::exp(-lv_k);
    ad::Var row = ad::add_scalar(
        ad::scale(ad::row_sum(lv_k + quad), -0.5),
        -0.5 * static_cast<double>(d) * kLogTwoPi);
    comp_cols.push_back(row + ad::slice_cols(logw, k, 1));
  }
  return ad::logsumexp_rows(ad::hstack(comp_cols));
}

Vector mdn_log_prob(const MixtureDensityNet& model, const ParameterBatch& theta,
                    const DataBatch& context) {
  ad::Tape tape(false);
  TapedMdn taped = lift(tape, model);
  ad::Var lp = mdn_log_prob(tape, taped, tape.constant(theta), tape.constant(context));
  return lp.value().col(0);
}

ParameterBatch mdn_sample(const MixtureDensityNet& model, Index n, const Vector& context,
                          RngStream& rng) {
  const MdnConfig& cfg = model.cfg;
  check_context(cfg.context_dim, context.size(), "mdn_sample");
  ad::Tape tape(false);
  TapedMdn taped = lift(tape, model);
  ad::Var feats = apply(taped.trunk, tape.constant(Matrix(context.transpose())));
  Matrix logits = apply(taped.logits_head, feats).value();
  Matrix means = apply(taped.means_head, feats).value();
  Matrix logvars = apply(taped.logvars_head, feats).value();

  // Mixture weights for this single context row.
  Vector w = logits.row(0).transpose();
  w.array() -= w.maxCoeff();
  w = w.array().exp();
  w /= w.sum();

  ParameterBatch out(n, cfg.event_dim);
  for (Index i = 0; i < n; ++i) {
    double u = rng.uniform();
    Index k = 0;
    double acc = 0.0;
    for (; k < cfg.n_components - 1; ++k) {
      acc += w[k];
      if (u < acc) break;
    }
    for (Index dd = 0; dd < cfg.event_dim; ++dd) {
      const Index col = k * cfg.event_dim + dd;
      out(i, dd) = means(0, col) + std::exp(0.5 * logvars(0, col)) * rng.normal();
    }
  }
  return out;
}

// ---- Ratio classifier ---------------------------------------------------------

RatioClassifier make_classifier(const ClassifierConfig& cfg, RngStream& rng) {
  if (cfg.theta_dim < 1 || cfg.x_dim < 1) throw Error("make_classifier: bad dims");
  RatioClassifier c;
  c.cfg = cfg;
  c.net = make_mlp(cfg.theta_dim + cfg.x_dim, cfg.hidden, 1, Activation::kRelu, rng,
                   /*zero_init_last=*/true);
  return c;
}

TapedClassifier lift(ad::Tape& tape, const RatioClassifier& model) {
  TapedClassifier t;
  t.model = &model;
  t.net = lift(tape, model.net);
  return t;
}

void collect_params(RatioClassifier& model, ad::ParamRefs& out) {
  collect_params(model.net, out);
}
void collect_params(const RatioClassifier& model, ad::ConstParamRefs& out) {
  collect_params(model.net, out);
}
void collect_leaves(const TapedClassifier& model, std::vector<ad::Var>& out) {
  collect_leaves(model.net, out);
}

ad::Var classifier_logit(ad::Tape& tape, const TapedClassifier& model,
                         const ad::Var& theta, const ad::Var& x) {
  const ClassifierConfig& cfg = model.model->cfg;
  if (theta.cols() != cfg.theta_dim || x.cols() != cfg.x_dim)
    throw Error("classifier_logit: dimension mismatch");
  (void)tape;
  return apply(model.net, ad::hstack({theta, x}));
}

Vector classifier_logit(const RatioClassifier& model, const ParameterBatch& theta,
                        const DataBatch& x) {
  ad::Tape tape(false);
  TapedClassifier taped = lift(tape, model);
  ad::Var logit =
      classifier_logit(tape, taped, tape.constant(theta), tape.constant(x));
  return logit.value().col(0);
}

// ---- Embedding net --------------------------------------------------------------

EmbeddingNet make_embedding(const EmbeddingConfig& cfg, RngStream& rng) {
  if (cfg.raw_dim < 1 || cfg.feature_dim < 1) throw Error("make_embedding: bad dims");
  EmbeddingNet e;
  e.cfg = cfg;
  e.residual = cfg.raw_dim == cfg.feature_dim;
  e.net = make_mlp(cfg.raw_dim, cfg.hidden, cfg.feature_dim, Activation::kRelu, rng,
                   /*zero_init_last=*/true);
  return e;
}

TapedEmbedding lift(ad::Tape& tape, const EmbeddingNet& model) {
  TapedEmbedding t;
  t.model = &model;
  t.net = lift(tape, model.net);
  t.residual = model.residual;
  return t;
}

void collect_params(EmbeddingNet& model, ad::ParamRefs& out) {
  collect_params(model.net, out);
}
void collect_params(const EmbeddingNet& model, ad::ConstParamRefs& out) {
  collect_params(model.net, out);
}
void collect_leaves(const TapedEmbedding& model, std::vector<ad::Var>& out) {
  collect_leaves(model.net, out);
}

ad::Var embed(ad::Tape& tape, const TapedEmbedding& model, const ad::Var& raw) {
  if (raw.cols() != model.model->cfg.raw_dim)
    throw Error("embed: raw dimension mismatch");
  (void)tape;
  ad::Var out = apply(model.net, raw);
  if (model.residual) out = out + raw;
  return out;
}

DataBatch embed(const EmbeddingNet& model, const DataBatch& raw) {
  ad::Tape tape(false);
  TapedEmbedding taped = lift(tape, model);
  return embed(tape, taped, tape.constant(raw)).value();
}

}  // namespace sbir
