#include "fsqs/backbone.hpp"

#include <cmath>
#include <fstream>
#include <string>

#include "json.hpp"

#include "fsqs/error.hpp"
#include "fsqs/rng.hpp"

namespace fsqs {

namespace {

constexpr int kCheckpointVersion = 1;

bool layer_has_bn(const BackboneConfig& cfg, std::size_t layer_index) {
  // BN sits after each hidden layer; the final projection stays raw.
  return cfg.batch_norm && layer_index + 1 < cfg.layer_sizes.size() - 1;
}

Matrix apply_activation(const Matrix& x, Activation act) {
  if (act == Activation::Relu) return x.cwiseMax(0.0);
  return x;
}

}  // namespace

void BackboneParams::validate() const {
  if (config.layer_sizes.size() < 2) throw InputError("backbone: need at least one layer");
  for (int s : config.layer_sizes) {
    if (s < 1) throw InputError("backbone: layer sizes must be positive");
  }
  if (layers.size() != config.layer_sizes.size() - 1) {
    throw InputError("backbone: layer count does not match layer_sizes");
  }
  if (!(config.bn_momentum > 0.0 && config.bn_momentum < 1.0)) {
    throw InputError("backbone: bn_momentum must be in (0,1)");
  }
  if (!(config.bn_eps > 0.0)) throw InputError("backbone: bn_eps must be > 0");
  for (std::size_t i = 0; i < layers.size(); ++i) {
    const auto& l = layers[i];
    const int fan_in = config.layer_sizes[i];
    const int fan_out = config.layer_sizes[i + 1];
    if (l.weight.rows() != fan_in || l.weight.cols() != fan_out || l.bias.size() != fan_out) {
      throw InputError("backbone: layer " + std::to_string(i) + " shapes do not chain");
    }
    if (l.has_bn != layer_has_bn(config, i)) {
      throw InputError("backbone: layer " + std::to_string(i) + " BN flag inconsistent");
    }
    if (l.has_bn) {
      if (l.gamma.size() != fan_out || l.beta.size() != fan_out ||
          l.running_mean.size() != fan_out || l.running_var.size() != fan_out) {
        throw InputError("backbone: layer " + std::to_string(i) + " BN vectors wrong length");
      }
      if (!(l.running_var.array() > 0.0).all()) {
        throw InputError("backbone: layer " + std::to_string(i) + " running variance must be > 0");
      }
    }
  }
}

BackboneParams init_backbone(const BackboneConfig& config, std::uint64_t seed) {
  BackboneParams p;
  p.config = config;
  Rng rng(seed);
  for (std::size_t i = 0; i + 1 < config.layer_sizes.size(); ++i) {
    const int fan_in = config.layer_sizes[i];
    const int fan_out = config.layer_sizes[i + 1];
    LayerParams l;
    l.weight = Matrix(fan_in, fan_out);
    const double limit = std::sqrt(6.0 / static_cast<double>(fan_in));
    for (Eigen::Index r = 0; r < l.weight.rows(); ++r) {
      for (Eigen::Index c = 0; c < l.weight.cols(); ++c) {
        l.weight(r, c) = rng.uniform(-limit, limit);
      }
    }
    l.bias = Vector::Zero(fan_out);
    l.has_bn = layer_has_bn(config, i);
    if (l.has_bn) {
      l.gamma = Vector::Ones(fan_out);
      l.beta = Vector::Zero(fan_out);
      l.running_mean = Vector::Zero(fan_out);
      l.running_var = Vector::Ones(fan_out);
    }
    p.layers.push_back(std::move(l));
  }
  p.validate();
  return p;
}

BackboneParams identity_backbone(int dim, bool with_bn) {
  BackboneConfig cfg;
  cfg.layer_sizes = {dim, dim, dim};
  cfg.batch_norm = with_bn;
  cfg.activation = Activation::Identity;
  BackboneParams p = init_backbone(cfg, 0);
  for (auto& l : p.layers) {
    l.weight = Matrix::Identity(dim, dim);
    l.bias.setZero();
  }
  return p;
}

namespace {

Matrix forward_impl(const BackboneParams& params, const Matrix& batch, bool use_batch_stats,
                    ForwardCache* cache, BackboneParams* running_update_target) {
  params.validate();
  if (batch.cols() != params.input_dim()) {
    throw InputError("forward: batch feature dimension " + std::to_string(batch.cols()) +
                     " does not match input layer " + std::to_string(params.input_dim()));
  }
  if (use_batch_stats && batch.rows() < 2) {
    throw InputError("forward: batch statistics need at least 2 samples");
  }
  if (!batch.allFinite()) throw InputError("forward: batch contains non-finite values");

  const double eps = params.config.bn_eps;
  const double momentum = params.config.bn_momentum;
  const auto n = static_cast<double>(batch.rows());

  Matrix x = batch;
  if (cache) {
    cache->layers.clear();
    cache->layer_sizes = params.config.layer_sizes;
    cache->batch_size = batch.rows();
  }

  for (std::size_t i = 0; i < params.layers.size(); ++i) {
    const LayerParams& l = params.layers[i];
    LayerCache lc;
    lc.input = x;
    Matrix z = x * l.weight;
    z.rowwise() += l.bias.transpose();
    lc.linear_out = z;

    if (l.has_bn) {
      Vector mean, var;
      if (use_batch_stats) {
        mean = z.colwise().mean();
        var = (z.rowwise() - mean.transpose()).array().square().colwise().sum() / n;
        if (running_update_target) {
          LayerParams& target = running_update_target->layers[i];
          target.running_mean = (1.0 - momentum) * target.running_mean + momentum * mean;
          target.running_var = (1.0 - momentum) * target.running_var + momentum * var;
        }
      } else {
        mean = l.running_mean;
        var = l.running_var;
      }
      const Vector inv_std = (var.array() + eps).rsqrt();
      Matrix x_hat = (z.rowwise() - mean.transpose()).array().rowwise() *
                     inv_std.transpose().array();
      Matrix bn = (x_hat.array().rowwise() * l.gamma.transpose().array()).matrix();
      bn.rowwise() += l.beta.transpose();
      lc.batch_mean = mean;
      lc.batch_var = var;
      lc.x_hat = x_hat;
      lc.bn_out = bn;
      x = apply_activation(bn, params.config.activation);
    } else if (i + 1 < params.layers.size()) {
      lc.bn_out = z;
      x = apply_activation(z, params.config.activation);
    } else {
      x = z;  // final projection, no activation
    }
    if (cache) cache->layers.push_back(std::move(lc));
  }
  return x;
}

}  // namespace

ForwardResult forward(BackboneParams& params, const Matrix& batch, BnMode mode, bool training) {
  ForwardResult res;
  res.cache.training = training;
  const bool batch_stats = training || mode == BnMode::Transductive;
  res.output = forward_impl(params, batch, batch_stats, &res.cache,
                            training ? &params : nullptr);
  return res;
}

Matrix embed(const BackboneParams& params, const Matrix& batch, BnMode mode) {
  return forward_impl(params, batch, mode == BnMode::Transductive, nullptr, nullptr);
}

bool BackboneGrads::all_finite() const {
  for (const auto& l : layers) {
    if (!l.d_weight.allFinite() || !l.d_bias.allFinite()) return false;
    if (l.d_gamma.size() > 0 && (!l.d_gamma.allFinite() || !l.d_beta.allFinite())) return false;
  }
  return true;
}

BackboneGrads& BackboneGrads::operator+=(const BackboneGrads& other) {
  if (layers.empty()) {
    layers = other.layers;
    return *this;
  }
  if (layers.size() != other.layers.size()) throw InputError("grad accumulate: layer mismatch");
  for (std::size_t i = 0; i < layers.size(); ++i) {
    layers[i].d_weight += other.layers[i].d_weight;
    layers[i].d_bias += other.layers[i].d_bias;
    if (layers[i].d_gamma.size() > 0) {
      layers[i].d_gamma += other.layers[i].d_gamma;
      layers[i].d_beta += other.layers[i].d_beta;
    }
  }
  return *this;
}

BackboneGrads backward(const BackboneParams& params, const ForwardCache& cache,
                       const Matrix& grad_output) {
  if (!cache.training) {
    throw InputError("backward: cache must come from a training-mode forward");
  }
  if (cache.layer_sizes != params.config.layer_sizes ||
      cache.layers.size() != params.layers.size()) {
    throw InputError("backward: cache does not match these params (stale cache?)");
  }
  if (grad_output.rows() != cache.batch_size || grad_output.cols() != params.feature_dim()) {
    throw InputError("backward: grad_output shape mismatch");
  }

  const double eps = params.config.bn_eps;
  const auto n = static_cast<double>(cache.batch_size);

  BackboneGrads grads;
  grads.layers.resize(params.layers.size());
  Matrix d = grad_output;

  for (std::size_t idx = params.layers.size(); idx-- > 0;) {
    const LayerParams& l = params.layers[idx];
    const LayerCache& lc = cache.layers[idx];
    LayerGrads& lg = grads.layers[idx];
    const bool is_last = idx + 1 == params.layers.size();

    if (!is_last && params.config.activation == Activation::Relu) {
      d = (lc.bn_out.array() > 0.0).cast<double>() * d.array();
    }

    Matrix d_linear;  // gradient w.r.t. lc.linear_out
    if (l.has_bn) {
      // d is the gradient w.r.t. bn_out = gamma * x_hat + beta.
      lg.d_gamma = (d.array() * lc.x_hat.array()).colwise().sum();
      lg.d_beta = d.colwise().sum();
      const Matrix d_xhat = d.array().rowwise() * l.gamma.transpose().array();

      const Vector inv_std = (lc.batch_var.array() + eps).rsqrt();
      const Matrix centered = lc.linear_out.rowwise() - lc.batch_mean.transpose();

      // Through the batch statistics:
      //   d_var  = sum_i d_xhat_i * centered_i * (-1/2) (var+eps)^(-3/2)
      //   d_mean = sum_i d_xhat_i * (-inv_std) + d_var * (-2/n) sum_i centered_i
      //   d_z_i  = d_xhat_i * inv_std + d_var * 2 centered_i / n + d_mean / n
      const Vector d_var = ((d_xhat.array() * centered.array()).colwise().sum().transpose() *
                            (-0.5) * inv_std.array().cube())
                               .matrix();
      const Vector d_mean =
          (-(d_xhat.array().rowwise() * inv_std.transpose().array()).colwise().sum().transpose() +
           d_var.array() * (-2.0 / n) * centered.colwise().sum().transpose().array())
              .matrix();
      d_linear = (d_xhat.array().rowwise() * inv_std.transpose().array() +
                  (centered.array().rowwise() * d_var.transpose().array()) * (2.0 / n))
                     .matrix();
      d_linear.rowwise() += (d_mean / n).transpose();
    } else {
      d_linear = d;
    }

    lg.d_weight = lc.input.transpose() * d_linear;
    lg.d_bias = d_linear.colwise().sum();
    if (idx > 0) d = d_linear * l.weight.transpose();
  }
  return grads;
}

void sgd_step(BackboneParams& params, const BackboneGrads& grads, double lr) {
  if (!(lr > 0.0)) throw InputError("sgd_step: learning rate must be > 0");
  if (grads.layers.size() != params.layers.size()) throw InputError("sgd_step: layer mismatch");
  if (!grads.all_finite()) throw NumericsError("sgd_step: non-finite gradients");
  for (std::size_t i = 0; i < params.layers.size(); ++i) {
    LayerParams& l = params.layers[i];
    const LayerGrads& g = grads.layers[i];
    if (g.d_weight.rows() != l.weight.rows() || g.d_weight.cols() != l.weight.cols()) {
      throw InputError("sgd_step: gradient shape mismatch at layer " + std::to_string(i));
    }
    l.weight -= lr * g.d_weight;
    l.bias -= lr * g.d_bias;
    if (l.has_bn) {
      l.gamma -= lr * g.d_gamma;
      l.beta -= lr * g.d_beta;
    }
  }
}

namespace {

using nlohmann::json;

json vector_to_json(const Vector& v) {
  json a = json::array();
  for (Eigen::Index i = 0; i < v.size(); ++i) a.push_back(v(i));
  return a;
}

json matrix_to_json(const Matrix& m) {
  json rows = json::array();
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    json row = json::array();
    for (Eigen::Index c = 0; c < m.cols(); ++c) row.push_back(m(r, c));
    rows.push_back(std::move(row));
  }
  return rows;
}

Vector vector_from_json(const json& a) {
  Vector v(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) v(static_cast<Eigen::Index>(i)) = a[i].get<double>();
  return v;
}

Matrix matrix_from_json(const json& rows) {
  if (rows.empty()) return Matrix(0, 0);
  Matrix m(rows.size(), rows[0].size());
  for (std::size_t r = 0; r < rows.size(); ++r) {
    if (rows[r].size() != rows[0].size()) throw IoError("checkpoint: ragged matrix");
    for (std::size_t c = 0; c < rows[r].size(); ++c) {
      m(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c)) = rows[r][c].get<double>();
    }
  }
  return m;
}

}  // namespace

void save_checkpoint(const BackboneParams& params, const std::string& path) {
  params.validate();
  json j;
  j["format_version"] = kCheckpointVersion;
  j["layer_sizes"] = params.config.layer_sizes;
  j["batch_norm"] = params.config.batch_norm;
  j["activation"] = params.config.activation == Activation::Relu ? "relu" : "identity";
  j["bn_momentum"] = params.config.bn_momentum;
  j["bn_eps"] = params.config.bn_eps;
  json layers = json::array();
  for (const auto& l : params.layers) {
    json lj;
    lj["weight"] = matrix_to_json(l.weight);
    lj["bias"] = vector_to_json(l.bias);
    if (l.has_bn) {
      lj["gamma"] = vector_to_json(l.gamma);
      lj["beta"] = vector_to_json(l.beta);
      lj["running_mean"] = vector_to_json(l.running_mean);
      lj["running_var"] = vector_to_json(l.running_var);
    }
    layers.push_back(std::move(lj));
  }
  j["layers"] = std::move(layers);

  std::ofstream out(path);
  if (!out) throw IoError("cannot open checkpoint for writing: " + path);
  out << j.dump(2) << "\n";
  if (!out) throw IoError("failed writing checkpoint: " + path);
}

BackboneParams load_checkpoint(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open checkpoint: " + path);
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw IoError("malformed checkpoint " + path + ": " + e.what());
  }
  if (j.value("format_version", -1) != kCheckpointVersion) {
    throw IoError("unsupported checkpoint format_version in " + path);
  }
  BackboneParams p;
  p.config.layer_sizes = j.at("layer_sizes").get<std::vector<int>>();
  p.config.batch_norm = j.at("batch_norm").get<bool>();
  const std::string act = j.at("activation").get<std::string>();
  if (act == "relu") {
    p.config.activation = Activation::Relu;
  } else if (act == "identity") {
    p.config.activation = Activation::Identity;
  } else {
    throw IoError("checkpoint: unknown activation '" + act + "'");
  }
  p.config.bn_momentum = j.at("bn_momentum").get<double>();
  p.config.bn_eps = j.at("bn_eps").get<double>();
  for (std::size_t i = 0; i < j.at("layers").size(); ++i) {
    const json& lj = j.at("layers")[i];
    LayerParams l;
    l.weight = matrix_from_json(lj.at("weight"));
    l.bias = vector_from_json(lj.at("bias"));
    l.has_bn = lj.contains("gamma");
    if (l.has_bn) {
      l.gamma = vector_from_json(lj.at("gamma"));
      l.beta = vector_from_json(lj.at("beta"));
      l.running_mean = vector_from_json(lj.at("running_mean"));
      l.running_var = vector_from_json(lj.at("running_var"));
    }
    p.layers.push_back(std::move(l));
  }
  try {
    p.validate();
  } catch (const InputError& e) {
    throw IoError("checkpoint " + path + " failed validation: " + e.what());
  }
  return p;
}

}  // namespace fsqs
