#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "fsqs/types.hpp"

namespace fsqs {

/// How batch normalization behaves at inference time.
/// Conventional: running statistics, a fixed per-sample affine map.
/// Transductive: statistics of the batch at hand, which is expected to be
/// the support-union-query concatenation of an episode.
enum class BnMode { Conventional, Transductive };

enum class Activation { Relu, Identity };

struct BackboneConfig {
  std::vector<int> layer_sizes;  // [d_in, hidden..., d_feature]
  bool batch_norm = true;        // BN after each hidden layer
  Activation activation = Activation::Relu;
  double bn_momentum = 0.1;
  double bn_eps = 1e-5;
};

struct LayerParams {
  Matrix weight;  // fan_in x fan_out
  Vector bias;
  bool has_bn = false;
  Vector gamma, beta, running_mean, running_var;
};

struct BackboneParams {
  BackboneConfig config;
  std::vector<LayerParams> layers;

  int input_dim() const { return config.layer_sizes.front(); }
  int feature_dim() const { return config.layer_sizes.back(); }

  /// Throws InputError if layer shapes do not chain, running variances are
  /// not positive, or the momentum is outside (0,1).
  void validate() const;
};

/// He-style fan-in uniform init, deterministic in the seed. Biases zero,
/// BN scale 1 / shift 0, running stats (0, 1).
BackboneParams init_backbone(const BackboneConfig& config, std::uint64_t seed);

/// Pass-through network: identity weights, identity activation, optionally
/// one neutral BN stage over the features. With BN enabled the network is
/// exactly the chosen normalization mode applied to raw inputs, which is
/// the cleanest probe for what TBN alone contributes.
BackboneParams identity_backbone(int dim, bool with_bn);

struct LayerCache {
  Matrix input;
  Matrix linear_out;  // input * W + b
  // BN intermediates (batch-statistics path only)
  Vector batch_mean, batch_var;
  Matrix x_hat;
  Matrix bn_out;  // pre-activation
};

struct ForwardCache {
  std::vector<LayerCache> layers;
  std::vector<int> layer_sizes;
  Eigen::Index batch_size = 0;
  bool training = false;
};

struct ForwardResult {
  Matrix output;  // batch x d_feature
  ForwardCache cache;
};

/// Runs the network on a batch (rows are samples).
/// training=true: BN uses batch statistics and running stats are updated in
/// place; the returned cache supports backward(). training=false: params are
/// left untouched; Transductive mode reads batch statistics, Conventional
/// mode reads running statistics. Any batch-statistics path requires at
/// least 2 rows (variance is undefined otherwise).
ForwardResult forward(BackboneParams& params, const Matrix& batch, BnMode mode, bool training);

/// Inference-only forward on immutable params; safe to call concurrently.
Matrix embed(const BackboneParams& params, const Matrix& batch, BnMode mode);

struct LayerGrads {
  Matrix d_weight;
  Vector d_bias;
  Vector d_gamma, d_beta;  // empty when the layer has no BN
};

struct BackboneGrads {
  std::vector<LayerGrads> layers;
  bool all_finite() const;
  BackboneGrads& operator+=(const BackboneGrads& other);
};

/// Gradients of a scalar loss w.r.t. every trainable tensor, given the loss
/// gradient w.r.t. the network output. Flows through batch statistics (the
/// full BN backward), so the cache must come from a training forward.
BackboneGrads backward(const BackboneParams& params, const ForwardCache& cache,
                       const Matrix& grad_output);

/// theta <- theta - lr * grad for weights, biases, gamma, beta. Running BN
/// statistics are not touched. Non-finite gradients are a divergence signal
/// and throw NumericsError.
void sgd_step(BackboneParams& params, const BackboneGrads& grads, double lr);

/// Versioned JSON checkpoint of all tensors plus layer-size metadata.
/// Doubles round-trip exactly. Loading re-validates the shape chain.
void save_checkpoint(const BackboneParams& params, const std::string& path);
BackboneParams load_checkpoint(const std::string& path);

}  // namespace fsqs
