#include "sapt/encoder.hpp"

#include <fmt/format.h>

#include <cmath>
#include <numbers>

#include "sapt/rng.hpp"

namespace sapt {

using nlohmann::json;

void ArchConfig::validate() const {
  auto check = [](bool ok, const char* what) {
    if (!ok) throw ConfigError(fmt::format("arch: {}", what));
  };
  check(feat_dim >= 1, "feat_dim must be >= 1");
  check(frame_stack >= 1, "frame_stack must be >= 1");
  check(model_dim >= 1, "model_dim must be >= 1");
  check(num_layers >= 0, "num_layers must be >= 0");
  check(num_heads >= 1, "num_heads must be >= 1");
  check(model_dim % num_heads == 0, "model_dim must be divisible by num_heads");
  check(ffn_dim >= 1, "ffn_dim must be >= 1");
  check(num_classes >= 2, "num_classes must be >= 2");
  check(proj_dim >= 1, "proj_dim must be >= 1");
}

json to_json(const ArchConfig& a) {
  return {{"feat_dim", a.feat_dim},   {"frame_stack", a.frame_stack}, {"model_dim", a.model_dim},
          {"num_layers", a.num_layers}, {"num_heads", a.num_heads},   {"ffn_dim", a.ffn_dim},
          {"num_classes", a.num_classes}, {"proj_dim", a.proj_dim},
          {"positional_encoding", a.positional_encoding}};
}

ArchConfig arch_from_json(const json& j) {
  ArchConfig a;
  a.feat_dim = j.at("feat_dim").get<int>();
  a.frame_stack = j.at("frame_stack").get<int>();
  a.model_dim = j.at("model_dim").get<int>();
  a.num_layers = j.at("num_layers").get<int>();
  a.num_heads = j.at("num_heads").get<int>();
  a.ffn_dim = j.at("ffn_dim").get<int>();
  a.num_classes = j.at("num_classes").get<int>();
  a.proj_dim = j.at("proj_dim").get<int>();
  a.positional_encoding = j.at("positional_encoding").get<bool>();
  a.validate();
  return a;
}

ParamLayout::ParamLayout(const ArchConfig& arch) {
  arch.validate();
  const int d = arch.model_dim;
  auto slot = [this](std::string name, int rows, int cols) {
    TensorSlot s{std::move(name), rows, cols, total};
    total += s.size();
    return s;
  };
  fe_weight = slot("feature_encoder.weight", arch.feat_dim * arch.frame_stack, d);
  fe_bias = slot("feature_encoder.bias", 1, d);
  fe_ln_scale = slot("feature_encoder.ln_scale", 1, d);
  fe_ln_bias = slot("feature_encoder.ln_bias", 1, d);
  mask_embedding = slot("mask_embedding", 1, d);
  for (int i = 0; i < arch.num_layers; ++i) {
    const std::string p = fmt::format("block{}.", i);
    BlockSlots b;
    b.ln1_scale = slot(p + "ln1_scale", 1, d);
    b.ln1_bias = slot(p + "ln1_bias", 1, d);
    b.wq = slot(p + "wq", d, d);
    b.bq = slot(p + "bq", 1, d);
    b.wk = slot(p + "wk", d, d);
    b.bk = slot(p + "bk", 1, d);
    b.wv = slot(p + "wv", d, d);
    b.bv = slot(p + "bv", 1, d);
    b.wo = slot(p + "wo", d, d);
    b.bo = slot(p + "bo", 1, d);
    b.ln2_scale = slot(p + "ln2_scale", 1, d);
    b.ln2_bias = slot(p + "ln2_bias", 1, d);
    b.ffn_w1 = slot(p + "ffn_w1", d, arch.ffn_dim);
    b.ffn_b1 = slot(p + "ffn_b1", 1, arch.ffn_dim);
    b.ffn_w2 = slot(p + "ffn_w2", arch.ffn_dim, d);
    b.ffn_b2 = slot(p + "ffn_b2", 1, d);
    blocks.push_back(std::move(b));
  }
  target_w = slot("target_projection.weight", d, arch.proj_dim);
  target_b = slot("target_projection.bias", 1, arch.proj_dim);
  context_w = slot("context_projection.weight", d, arch.proj_dim);
  context_b = slot("context_projection.bias", 1, arch.proj_dim);
  classifier_w = slot("classifier.weight", d, arch.num_classes);
  classifier_b = slot("classifier.bias", 1, arch.num_classes);
}

std::vector<const TensorSlot*> ParamLayout::slots() const {
  std::vector<const TensorSlot*> out{&fe_weight, &fe_bias, &fe_ln_scale, &fe_ln_bias, &mask_embedding};
  for (const auto& b : blocks) {
    for (const auto* s : {&b.ln1_scale, &b.ln1_bias, &b.wq, &b.bq, &b.wk, &b.bk, &b.wv, &b.bv, &b.wo, &b.bo,
                          &b.ln2_scale, &b.ln2_bias, &b.ffn_w1, &b.ffn_b1, &b.ffn_w2, &b.ffn_b2}) {
      out.push_back(s);
    }
  }
  for (const auto* s : {&target_w, &target_b, &context_w, &context_b, &classifier_w, &classifier_b}) {
    out.push_back(s);
  }
  return out;
}

std::size_t parameter_count(const ArchConfig& arch) { return ParamLayout(arch).total; }

ModelParams::ModelParams(const ArchConfig& arch)
    : arch_(arch), layout_(arch), values_(Vector::Zero(static_cast<Eigen::Index>(layout_.total))) {}

namespace {

void fill_normal(ModelParams::MatrixMap m, Rng& rng, double scale) {
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = scale * rng.normal();
}

double fan_in_scale(const TensorSlot& s) { return 1.0 / std::sqrt(static_cast<double>(s.rows)); }

}  // namespace

void init_classifier(ModelParams& params, std::uint64_t seed) {
  Rng rng(seed);
  const auto& l = params.layout();
  fill_normal(params.at(l.classifier_w), rng, fan_in_scale(l.classifier_w));
  params.at(l.classifier_b).setZero();
}

ModelParams init_params(const ArchConfig& arch, std::uint64_t seed) {
  ModelParams params(arch);
  const auto& l = params.layout();
  Rng rng(seed);
  auto linear = [&](const TensorSlot& w) { fill_normal(params.at(w), rng, fan_in_scale(w)); };

  linear(l.fe_weight);
  params.at(l.fe_ln_scale).setOnes();
  fill_normal(params.at(l.mask_embedding), rng, 0.01);
  for (const auto& b : l.blocks) {
    params.at(b.ln1_scale).setOnes();
    params.at(b.ln2_scale).setOnes();
    for (const auto* w : {&b.wq, &b.wk, &b.wv, &b.wo, &b.ffn_w1, &b.ffn_w2}) linear(*w);
  }
  linear(l.target_w);
  linear(l.context_w);
  init_classifier(params, derive_seed(seed, "classifier"));
  return params;
}

namespace {

constexpr double kLayerNormEps = 1e-5;
constexpr double kInvSqrt2 = 1.0 / std::numbers::sqrt2;

double gelu(double x) { return 0.5 * x * (1.0 + std::erf(x * kInvSqrt2)); }

double gelu_grad(double x) {
  const double cdf = 0.5 * (1.0 + std::erf(x * kInvSqrt2));
  const double pdf = std::exp(-0.5 * x * x) * 0.5 * std::numbers::inv_sqrtpi * std::numbers::sqrt2;
  return cdf + x * pdf;
}

RowMatrix apply_gelu(const RowMatrix& x) { return x.unaryExpr([](double v) { return gelu(v); }); }

struct LayerNormCache {
  RowMatrix normalized;  // x_hat
  Vector inv_std;
};

RowMatrix layer_norm(const RowMatrix& x, const RowVector& scale, const RowVector& bias, LayerNormCache& cache) {
  const Eigen::Index n = x.rows();
  const double d = static_cast<double>(x.cols());
  cache.normalized.resize(n, x.cols());
  cache.inv_std.resize(n);
  RowMatrix y(n, x.cols());
  for (Eigen::Index i = 0; i < n; ++i) {
    const double mean = x.row(i).sum() / d;
    const RowVector centered = x.row(i).array() - mean;
    const double var = centered.squaredNorm() / d;
    const double inv_std = 1.0 / std::sqrt(var + kLayerNormEps);
    cache.inv_std(i) = inv_std;
    cache.normalized.row(i) = centered * inv_std;
    y.row(i) = cache.normalized.row(i).cwiseProduct(scale) + bias;
  }
  return y;
}

RowMatrix layer_norm_backward(const RowMatrix& dy, const LayerNormCache& cache, const RowVector& scale,
                              ModelParams::MatrixMap dscale, ModelParams::MatrixMap dbias) {
  const double d = static_cast<double>(dy.cols());
  RowMatrix dx(dy.rows(), dy.cols());
  for (Eigen::Index i = 0; i < dy.rows(); ++i) {
    const RowVector xhat = cache.normalized.row(i);
    dscale.row(0) += dy.row(i).cwiseProduct(xhat);
    dbias.row(0) += dy.row(i);
    const RowVector dxhat = dy.row(i).cwiseProduct(scale);
    const double mean_dxhat = dxhat.sum() / d;
    const double mean_dxhat_xhat = dxhat.dot(xhat) / d;
    dx.row(i) = cache.inv_std(i) * (dxhat.array() - mean_dxhat - xhat.array() * mean_dxhat_xhat).matrix();
  }
  return dx;
}

RowMatrix affine(const RowMatrix& x, const ModelParams& p, const TensorSlot& w, const TensorSlot& b) {
  RowMatrix y = x * p.at(w);
  y.rowwise() += p.at(b).row(0);
  return y;
}

// Accumulates the weight and bias gradients of y = x W + b and returns dL/dx.
RowMatrix affine_backward(const RowMatrix& dy, const RowMatrix& x, const ModelParams& p, ModelParams& g,
                          const TensorSlot& w, const TensorSlot& b) {
  g.at(w).noalias() += x.transpose() * dy;
  g.at(b).row(0) += dy.colwise().sum();
  return dy * p.at(w).transpose();
}

RowMatrix positional_encoding(int length, int dim) {
  RowMatrix pe(length, dim);
  for (int t = 0; t < length; ++t) {
    for (int i = 0; i < dim; ++i) {
      const double rate = std::pow(10000.0, -static_cast<double>(2 * (i / 2)) / dim);
      pe(t, i) = (i % 2 == 0) ? std::sin(t * rate) : std::cos(t * rate);
    }
  }
  return pe;
}

struct BlockCache {
  RowMatrix input;
  LayerNormCache ln1;
  RowMatrix normed1;
  RowMatrix q, k, v;
  std::vector<RowMatrix> probs;  // per head, T' x T'
  RowMatrix attended;            // concatenated head outputs
  RowMatrix residual1;
  LayerNormCache ln2;
  RowMatrix normed2;
  RowMatrix hidden_pre;
  RowMatrix hidden;
};

struct ForwardCache {
  RowMatrix stacked;
  RowMatrix fe_pre;
  RowMatrix fe_act;
  LayerNormCache fe_ln;
  RowMatrix latents;
  std::vector<int> mask;
  std::vector<BlockCache> blocks;
  RowMatrix contexts;
};

RowMatrix stack_frames(const RowMatrix& features, int r) {
  const int out_len = static_cast<int>(features.rows()) / r;
  const int f = static_cast<int>(features.cols());
  RowMatrix stacked(out_len, f * r);
  for (int t = 0; t < out_len; ++t) {
    for (int k = 0; k < r; ++k) stacked.block(t, k * f, 1, f) = features.row(t * r + k);
  }
  return stacked;
}

RowMatrix block_forward(const ModelParams& p, const BlockSlots& s, const RowMatrix& x, int heads, BlockCache& c) {
  const Eigen::Index n = x.rows();
  const int d = static_cast<int>(x.cols());
  const int dh = d / heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
  c.input = x;
  c.normed1 = layer_norm(x, p.at(s.ln1_scale).row(0), p.at(s.ln1_bias).row(0), c.ln1);
  c.q = affine(c.normed1, p, s.wq, s.bq);
  c.k = affine(c.normed1, p, s.wk, s.bk);
  c.v = affine(c.normed1, p, s.wv, s.bv);
  c.attended.resize(n, d);
  c.probs.assign(heads, RowMatrix());
  for (int h = 0; h < heads; ++h) {
    RowMatrix scores = (c.q.middleCols(h * dh, dh) * c.k.middleCols(h * dh, dh).transpose()) * scale;
    for (Eigen::Index i = 0; i < n; ++i) {
      const double m = scores.row(i).maxCoeff();
      scores.row(i) = (scores.row(i).array() - m).exp();
      scores.row(i) /= scores.row(i).sum();
    }
    c.attended.middleCols(h * dh, dh) = scores * c.v.middleCols(h * dh, dh);
    c.probs[h] = std::move(scores);
  }
  c.residual1 = x + affine(c.attended, p, s.wo, s.bo);
  c.normed2 = layer_norm(c.residual1, p.at(s.ln2_scale).row(0), p.at(s.ln2_bias).row(0), c.ln2);
  c.hidden_pre = affine(c.normed2, p, s.ffn_w1, s.ffn_b1);
  c.hidden = apply_gelu(c.hidden_pre);
  return c.residual1 + affine(c.hidden, p, s.ffn_w2, s.ffn_b2);
}

RowMatrix block_backward(const ModelParams& p, ModelParams& g, const BlockSlots& s, const BlockCache& c,
                         const RowMatrix& dout, int heads) {
  const int d = static_cast<int>(dout.cols());
  const int dh = d / heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));

  RowMatrix dhidden = affine_backward(dout, c.hidden, p, g, s.ffn_w2, s.ffn_b2);
  RowMatrix dhidden_pre = dhidden.cwiseProduct(c.hidden_pre.unaryExpr([](double v) { return gelu_grad(v); }));
  RowMatrix dnormed2 = affine_backward(dhidden_pre, c.normed2, p, g, s.ffn_w1, s.ffn_b1);
  RowMatrix dres1 = dout + layer_norm_backward(dnormed2, c.ln2, p.at(s.ln2_scale).row(0), g.at(s.ln2_scale),
                                               g.at(s.ln2_bias));

  RowMatrix dattended = affine_backward(dres1, c.attended, p, g, s.wo, s.bo);
  RowMatrix dq(c.q.rows(), d), dk(c.k.rows(), d), dv(c.v.rows(), d);
  for (int h = 0; h < heads; ++h) {
    const RowMatrix& probs = c.probs[h];
    const RowMatrix dhead = dattended.middleCols(h * dh, dh);
    dv.middleCols(h * dh, dh) = probs.transpose() * dhead;
    RowMatrix dprobs = dhead * c.v.middleCols(h * dh, dh).transpose();
    RowMatrix dscores(probs.rows(), probs.cols());
    for (Eigen::Index i = 0; i < probs.rows(); ++i) {
      const double inner = dprobs.row(i).dot(probs.row(i));
      dscores.row(i) = probs.row(i).cwiseProduct((dprobs.row(i).array() - inner).matrix());
    }
    dscores *= scale;
    dq.middleCols(h * dh, dh) = dscores * c.k.middleCols(h * dh, dh);
    dk.middleCols(h * dh, dh) = dscores.transpose() * c.q.middleCols(h * dh, dh);
  }
  RowMatrix dnormed1 = affine_backward(dq, c.normed1, p, g, s.wq, s.bq);
  dnormed1 += affine_backward(dk, c.normed1, p, g, s.wk, s.bk);
  dnormed1 += affine_backward(dv, c.normed1, p, g, s.wv, s.bv);
  return dres1 + layer_norm_backward(dnormed1, c.ln1, p.at(s.ln1_scale).row(0), g.at(s.ln1_scale),
                                     g.at(s.ln1_bias));
}

ForwardCache run_forward(const ModelParams& p, const RowMatrix& features, std::span<const int> mask) {
  const ArchConfig& arch = p.arch();
  const auto& l = p.layout();
  require(features.cols() == arch.feat_dim,
          fmt::format("forward: feature dim {} does not match arch feat_dim {}", features.cols(), arch.feat_dim));
  require(features.rows() >= arch.frame_stack,
          fmt::format("forward: {} frames is shorter than frame_stack {}", features.rows(), arch.frame_stack));
  ForwardCache c;
  c.stacked = stack_frames(features, arch.frame_stack);
  const int length = static_cast<int>(c.stacked.rows());
  for (int t : mask) {
    require(t >= 0 && t < length, fmt::format("forward: mask index {} out of range [0, {})", t, length));
  }
  c.mask.assign(mask.begin(), mask.end());

  c.fe_pre = affine(c.stacked, p, l.fe_weight, l.fe_bias);
  c.fe_act = apply_gelu(c.fe_pre);
  c.latents = layer_norm(c.fe_act, p.at(l.fe_ln_scale).row(0), p.at(l.fe_ln_bias).row(0), c.fe_ln);

  RowMatrix x = c.latents;
  for (int t : c.mask) x.row(t) = p.at(l.mask_embedding).row(0);
  if (arch.num_layers > 0 && arch.positional_encoding) x += positional_encoding(length, arch.model_dim);
  c.blocks.resize(arch.num_layers);
  for (int i = 0; i < arch.num_layers; ++i) x = block_forward(p, l.blocks[i], x, arch.num_heads, c.blocks[i]);
  c.contexts = std::move(x);
  return c;
}

void run_backward(const ModelParams& p, ModelParams& g, const ForwardCache& c, const RowMatrix* dlatents,
                  RowMatrix dcontexts) {
  const auto& l = p.layout();
  const int layers = p.arch().num_layers;
  RowMatrix dx = std::move(dcontexts);
  for (int i = layers - 1; i >= 0; --i) dx = block_backward(p, g, l.blocks[i], c.blocks[i], dx, p.arch().num_heads);
  // Positional encodings are constants; masked rows route into the mask embedding.
  for (int t : c.mask) {
    g.at(l.mask_embedding).row(0) += dx.row(t);
    dx.row(t).setZero();
  }
  if (dlatents) dx += *dlatents;
  RowMatrix dact = layer_norm_backward(dx, c.fe_ln, p.at(l.fe_ln_scale).row(0), g.at(l.fe_ln_scale),
                                       g.at(l.fe_ln_bias));
  RowMatrix dpre = dact.cwiseProduct(c.fe_pre.unaryExpr([](double v) { return gelu_grad(v); }));
  g.at(l.fe_weight).noalias() += c.stacked.transpose() * dpre;
  g.at(l.fe_bias).row(0) += dpre.colwise().sum();
}

}  // namespace

EncodedBatch forward(const ModelParams& params, const RowMatrix& features, std::optional<std::span<const int>> mask) {
  ForwardCache c = run_forward(params, features, mask.value_or(std::span<const int>{}));
  EncodedBatch out;
  out.pooled = c.contexts.colwise().mean();
  out.latents = std::move(c.latents);
  out.contexts = std::move(c.contexts);
  return out;
}

RowVector classifier_logits(const ModelParams& params, const RowVector& pooled) {
  const auto& l = params.layout();
  return pooled * params.at(l.classifier_w) + params.at(l.classifier_b).row(0);
}

namespace {

std::vector<int> example_mask(const ModelParams& params, const Example& ex, const SelfSupervisedObjective& obj) {
  const int length = params.arch().stacked_length(static_cast<int>(ex.features.rows()));
  require(length >= 1, fmt::format("utterance '{}' is shorter than frame_stack", ex.id));
  MaskSpec spec = obj.mask;
  spec.seed = derive_seed(ex.seed, "mask");
  return sample_mask(length, spec);
}

double accumulate_self_supervised(const ModelParams& p, ModelParams* g, const Example& ex,
                                  const SelfSupervisedObjective& obj) {
  const auto& l = p.layout();
  const std::vector<int> mask = example_mask(p, ex, obj);
  if (mask.empty()) return 0.0;
  ForwardCache c = run_forward(p, ex.features, mask);
  RowMatrix q = affine(c.latents, p, l.target_w, l.target_b);
  RowMatrix ctx = affine(c.contexts, p, l.context_w, l.context_b);
  ContrastiveResult r = contrastive_on_projections(ctx, q, mask, obj.contrastive, derive_seed(ex.seed, "distractors"));
  if (!std::isfinite(r.loss)) {
    throw NumericalFailure(fmt::format("non-finite self-supervised loss on utterance '{}'", ex.id), ex.id);
  }
  if (g) {
    RowMatrix dlatents = affine_backward(r.grad_target, c.latents, p, *g, l.target_w, l.target_b);
    RowMatrix dcontexts = affine_backward(r.grad_context, c.contexts, p, *g, l.context_w, l.context_b);
    run_backward(p, *g, c, &dlatents, std::move(dcontexts));
  }
  return r.loss;
}

double accumulate_supervised(const ModelParams& p, ModelParams& g, const Example& ex) {
  const auto& l = p.layout();
  require(ex.label >= 0 && ex.label < p.arch().num_classes,
          fmt::format("utterance '{}': label {} out of range", ex.id, ex.label));
  ForwardCache c = run_forward(p, ex.features, {});
  const RowVector pooled = c.contexts.colwise().mean();
  const RowVector logits = classifier_logits(p, pooled);
  if (!logits.allFinite()) {
    throw NumericalFailure(fmt::format("non-finite logits on utterance '{}'", ex.id), ex.id);
  }
  const CrossEntropyResult ce = cross_entropy_with_grad(logits, ex.label);
  g.at(l.classifier_w).noalias() += pooled.transpose() * ce.grad;
  g.at(l.classifier_b).row(0) += ce.grad;
  const RowVector dpooled = ce.grad * p.at(l.classifier_w).transpose();
  RowMatrix dcontexts = RowMatrix::Ones(c.contexts.rows(), 1) * (dpooled / static_cast<double>(c.contexts.rows()));
  run_backward(p, g, c, nullptr, std::move(dcontexts));
  return ce.loss;
}

}  // namespace

LossAndGradients loss_and_gradients(const ModelParams& params, std::span<const Example> batch,
                                    const ObjectiveSpec& objective) {
  LossAndGradients out{0.0, ModelParams(params.arch())};
  for (const Example& ex : batch) {
    const double loss = std::visit(
        [&](const auto& obj) -> double {
          using T = std::decay_t<decltype(obj)>;
          if constexpr (std::is_same_v<T, SelfSupervisedObjective>) {
            return accumulate_self_supervised(params, &out.gradients, ex, obj);
          } else {
            return accumulate_supervised(params, out.gradients, ex);
          }
        },
        objective);
    out.loss += loss;
    if (!std::isfinite(loss) || !out.gradients.values().allFinite()) {
      throw NumericalFailure(fmt::format("non-finite loss or gradient on utterance '{}'", ex.id), ex.id);
    }
  }
  return out;
}

double self_supervised_loss(const ModelParams& params, const Example& example, const SelfSupervisedObjective& obj) {
  return accumulate_self_supervised(params, nullptr, example, obj);
}

}  // namespace sapt
