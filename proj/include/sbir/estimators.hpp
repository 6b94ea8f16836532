#pragma once

#include <optional>
#include <vector>

#include "sbir/autodiff.hpp"
#include "sbir/nn.hpp"
#include "sbir/rng.hpp"
#include "sbir/types.hpp"

namespace sbir {

// ---- Conditional masked autoregressive flow ---------------------------------
//
// A stack of MADE-parameterized affine autoregressive transforms with fixed
// reversal permutations between blocks and a standard normal base. Density
// evaluation maps theta -> noise in one masked feedforward pass per block;
// sampling inverts the stack one autoregressive dimension at a time.

struct MafConfig {
  Index event_dim = 0;
  Index context_dim = 0;
  Index n_blocks = 5;
  std::vector<Index> hidden{50, 50};
  // Raw log-scales pass through clamp * tanh(s / clamp), keeping every block
  // numerically invertible during early training.
  double scale_clamp = 5.0;
};

struct MadeBlock {
  IndexVec perm;            // column permutation applied before the block
  LinearLayer input;        // masked, event -> hidden
  Matrix context_weight;    // context_dim x hidden, added into the first layer
  std::vector<LinearLayer> hidden;  // masked hidden->hidden layers
  LinearLayer output;       // masked, hidden -> 2 * event (shift, raw scale)
};

struct ConditionalMaf {
  MafConfig cfg;
  std::vector<MadeBlock> blocks;
};

ConditionalMaf make_maf(const MafConfig& cfg, RngStream& rng);

struct TapedMadeBlock {
  TapedLinear input, output;
  ad::Var context_weight;
  std::vector<TapedLinear> hidden;
};

struct TapedMaf {
  const ConditionalMaf* model = nullptr;
  std::vector<TapedMadeBlock> blocks;
};

TapedMaf lift(ad::Tape& tape, const ConditionalMaf& model);
void collect_params(ConditionalMaf& model, ad::ParamRefs& out);
void collect_params(const ConditionalMaf& model, ad::ConstParamRefs& out);
void collect_leaves(const TapedMaf& model, std::vector<ad::Var>& out);

// Per-row conditional log density (B x 1 on the tape).
ad::Var maf_log_prob(ad::Tape& tape, const TapedMaf& model, const ad::Var& theta,
                     const ad::Var& context);

// Convenience evaluation without gradients.
Vector maf_log_prob(const ConditionalMaf& model, const ParameterBatch& theta,
                    const DataBatch& context);

// Forward map theta -> base noise; logdet receives the per-row summed
// log |det J| when non-null.
Matrix maf_forward(const ConditionalMaf& model, const ParameterBatch& theta,
                   const DataBatch& context, Vector* logdet = nullptr);

// Inverse map base noise -> theta (sequential per dimension).
Matrix maf_inverse(const ConditionalMaf& model, const Matrix& noise,
                   const DataBatch& context);

ParameterBatch maf_sample(const ConditionalMaf& model, Index n, const Vector& context,
                          RngStream& rng);

// ---- Mixture density network ------------------------------------------------

struct MdnConfig {
  Index event_dim = 0;
  Index context_dim = 0;
  Index n_components = 10;
  std::vector<Index> hidden{50, 50};
};

// Feedforward trunk over the context; three heads emit mixture logits,
// component means, and diagonal log-variances. Heads are zero-initialized so
// a fresh model is a standard normal for every context.
struct MixtureDensityNet {
  MdnConfig cfg;
  Mlp trunk;              // context -> hidden features (tanh)
  LinearLayer logits_head;   // hidden -> K
  LinearLayer means_head;    // hidden -> K * D
  LinearLayer logvars_head;  // hidden -> K * D
};

MixtureDensityNet make_mdn(const MdnConfig& cfg, RngStream& rng);

struct TapedMdn {
  const MixtureDensityNet* model = nullptr;
  TapedMlp trunk;
  TapedLinear logits_head, means_head, logvars_head;
};

TapedMdn lift(ad::Tape& tape, const MixtureDensityNet& model);
void collect_params(MixtureDensityNet& model, ad::ParamRefs& out);
void collect_params(const MixtureDensityNet& model, ad::ConstParamRefs& out);
void collect_leaves(const TapedMdn& model, std::vector<ad::Var>& out);

ad::Var mdn_log_prob(ad::Tape& tape, const TapedMdn& model, const ad::Var& theta,
                     const ad::Var& context);
Vector mdn_log_prob(const MixtureDensityNet& model, const ParameterBatch& theta,
                    const DataBatch& context);
ParameterBatch mdn_sample(const MixtureDensityNet& model, Index n, const Vector& context,
                          RngStream& rng);

// ---- Density-ratio classifier -------------------------------------------------

struct ClassifierConfig {
  Index theta_dim = 0;
  Index x_dim = 0;
  std::vector<Index> hidden{50, 50};
};

// Feedforward net over [theta, x] emitting one logit; zero-initialized head
// so a fresh classifier implies ratio 1 everywhere.
struct RatioClassifier {
  ClassifierConfig cfg;
  Mlp net;
};

RatioClassifier make_classifier(const ClassifierConfig& cfg, RngStream& rng);

struct TapedClassifier {
  const RatioClassifier* model = nullptr;
  TapedMlp net;
};

TapedClassifier lift(ad::Tape& tape, const RatioClassifier& model);
void collect_params(RatioClassifier& model, ad::ParamRefs& out);
void collect_params(const RatioClassifier& model, ad::ConstParamRefs& out);
void collect_leaves(const TapedClassifier& model, std::vector<ad::Var>& out);

ad::Var classifier_logit(ad::Tape& tape, const TapedClassifier& model,
                         const ad::Var& theta, const ad::Var& x);
Vector classifier_logit(const RatioClassifier& model, const ParameterBatch& theta,
                        const DataBatch& x);

// ---- Embedding network --------------------------------------------------------

struct EmbeddingConfig {
  Index raw_dim = 0;
  Index feature_dim = 0;
  std::vector<Index> hidden{50};
};

// Trainable summary map from raw simulator output to features, trained
// jointly with the downstream estimator. When raw_dim == feature_dim the net
// is residual, so the zero-initialized model is the identity summary.
struct EmbeddingNet {
  EmbeddingConfig cfg;
  Mlp net;
  bool residual = false;
};

EmbeddingNet make_embedding(const EmbeddingConfig& cfg, RngStream& rng);

struct TapedEmbedding {
  const EmbeddingNet* model = nullptr;
  TapedMlp net;
  bool residual = false;
};

TapedEmbedding lift(ad::Tape& tape, const EmbeddingNet& model);
void collect_params(EmbeddingNet& model, ad::ParamRefs& out);
void collect_params(const EmbeddingNet& model, ad::ConstParamRefs& out);
void collect_leaves(const TapedEmbedding& model, std::vector<ad::Var>& out);

ad::Var embed(ad::Tape& tape, const TapedEmbedding& model, const ad::Var& raw);
DataBatch embed(const EmbeddingNet& model, const DataBatch& raw);

}  // namespace sbir
