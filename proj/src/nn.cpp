#include "otd/nn.hpp"

#include <cmath>
#include <numbers>

#include "otd/random.hpp"

namespace otd::nn {

std::string_view to_string(Activation a) {
  switch (a) {
    case Activation::kRelu: return "relu";
    case Activation::kGelu: return "gelu";
    case Activation::kMish: return "mish";
  }
  return "unknown";
}

Activation activation_from_string(std::string_view s) {
  if (s == "relu") return Activation::kRelu;
  if (s == "gelu") return Activation::kGelu;
  if (s == "mish") return Activation::kMish;
  throw std::invalid_argument("unknown activation '" + std::string(s) + "'");
}

void MlpSpec::validate() const {
  if (widths.size() < 3) throw ShapeError("MLP needs at least one hidden layer");
  for (int w : widths) {
    if (w <= 0) throw ShapeError("MLP widths must be positive");
  }
  if (static_cast<int>(layer_norm.size()) != num_hidden()) {
    throw ShapeError("layer_norm needs one flag per hidden layer");
  }
}

MlpParams::MlpParams(MlpSpec spec) : spec_(std::move(spec)) {
  spec_.validate();
  Eigen::Index off = 0;
  for (int l = 0; l < spec_.num_layers(); ++l) {
    const Eigen::Index in = spec_.widths[l], out = spec_.widths[l + 1];
    Offsets o{};
    o.weight = off;
    off += in * out;
    o.bias = off;
    off += out;
    o.gain = o.shift = -1;
    if (has_norm(l)) {
      o.gain = off;
      off += out;
      o.shift = off;
      off += out;
    }
    offsets_.push_back(o);
  }
  values_ = Eigen::VectorXd::Zero(off);
}

bool MlpParams::has_norm(int layer) const {
  return layer < spec_.num_hidden() && spec_.layer_norm[layer];
}

Eigen::Map<Eigen::MatrixXd> MlpParams::weight(int l) {
  return {values_.data() + offsets_.at(l).weight, spec_.widths[l + 1], spec_.widths[l]};
}
Eigen::Map<const Eigen::MatrixXd> MlpParams::weight(int l) const {
  return {values_.data() + offsets_.at(l).weight, spec_.widths[l + 1], spec_.widths[l]};
}
Eigen::Map<Eigen::VectorXd> MlpParams::bias(int l) {
  return {values_.data() + offsets_.at(l).bias, spec_.widths[l + 1]};
}
Eigen::Map<const Eigen::VectorXd> MlpParams::bias(int l) const {
  return {values_.data() + offsets_.at(l).bias, spec_.widths[l + 1]};
}
Eigen::Map<Eigen::VectorXd> MlpParams::gain(int l) {
  if (!has_norm(l)) throw ShapeError("layer has no normalization");
  return {values_.data() + offsets_[l].gain, spec_.widths[l + 1]};
}
Eigen::Map<const Eigen::VectorXd> MlpParams::gain(int l) const {
  if (!has_norm(l)) throw ShapeError("layer has no normalization");
  return {values_.data() + offsets_[l].gain, spec_.widths[l + 1]};
}
Eigen::Map<Eigen::VectorXd> MlpParams::shift(int l) {
  if (!has_norm(l)) throw ShapeError("layer has no normalization");
  return {values_.data() + offsets_[l].shift, spec_.widths[l + 1]};
}
Eigen::Map<const Eigen::VectorXd> MlpParams::shift(int l) const {
  if (!has_norm(l)) throw ShapeError("layer has no normalization");
  return {values_.data() + offsets_[l].shift, spec_.widths[l + 1]};
}

MlpParams init_params(const MlpSpec& spec, std::uint64_t seed) {
  MlpParams p(spec);
  Rng rng(seed);
  for (int l = 0; l < spec.num_layers(); ++l) {
    const double bound = std::sqrt(6.0 / spec.widths[l]);
    auto w = p.weight(l);
    for (Eigen::Index j = 0; j < w.cols(); ++j) {
      for (Eigen::Index i = 0; i < w.rows(); ++i) w(i, j) = rng.uniform(-bound, bound);
    }
    if (p.has_norm(l)) p.gain(l).setOnes();
  }
  return p;
}

namespace {

// tanh(softplus(v)) = (e^2 + 2e) / (e^2 + 2e + 2) with e = exp(v)
double mish(double v) {
  if (v > 20.0) return v;
  const double e = std::exp(v);
  const double n = e * (e + 2.0);
  return v * n / (n + 2.0);
}

double mish_derivative(double v) {
  if (v > 20.0) return 1.0;
  const double e = std::exp(v);
  const double n = e * (e + 2.0);
  const double t = n / (n + 2.0);
  return t + v * (1.0 - t * t) * e / (1.0 + e);
}

void activate(Activation a, const Eigen::MatrixXd& x, Eigen::MatrixXd& y) {
  switch (a) {
    case Activation::kRelu:
      y = x.cwiseMax(0.0);
      break;
    case Activation::kGelu:
      y = x.unaryExpr([](double v) { return 0.5 * v * (1.0 + std::erf(v / std::numbers::sqrt2)); });
      break;
    case Activation::kMish:
      y = x.unaryExpr(&mish);
      break;
  }
}

double activation_derivative(Activation a, double v) {
  switch (a) {
    case Activation::kRelu:
      return v > 0.0 ? 1.0 : 0.0;
    case Activation::kGelu: {
      const double pdf = std::exp(-0.5 * v * v) / std::sqrt(2.0 * std::numbers::pi);
      return 0.5 * (1.0 + std::erf(v / std::numbers::sqrt2)) + v * pdf;
    }
    case Activation::kMish:
      return mish_derivative(v);
  }
  return 0.0;
}

}  // namespace

Eigen::MatrixXd forward(const MlpParams& params, const Eigen::MatrixXd& x, MlpCache* cache) {
  const auto& spec = params.spec();
  if (x.rows() != spec.input_dim()) {
    throw ShapeError("MLP input has " + std::to_string(x.rows()) + " rows, expected " +
                     std::to_string(spec.input_dim()));
  }
  const int hidden = spec.num_hidden();
  if (cache) {
    cache->input = x;
    cache->pre.assign(hidden, {});
    cache->normed.assign(hidden, {});
    cache->inv_std.assign(hidden, {});
    cache->act_in.assign(hidden, {});
    cache->act_out.assign(hidden, {});
  }
  Eigen::MatrixXd h = x;
  for (int l = 0; l < hidden; ++l) {
    Eigen::MatrixXd pre = params.weight(l) * h;
    pre.colwise() += params.bias(l);
    Eigen::MatrixXd act_in;
    Eigen::MatrixXd normed;
    Eigen::RowVectorXd inv_std;
    if (params.has_norm(l)) {
      const double n = static_cast<double>(pre.rows());
      const Eigen::RowVectorXd mean = pre.colwise().sum() / n;
      normed = pre.rowwise() - mean;
      inv_std = ((normed.array().square().colwise().sum() / n) + kLayerNormEps).rsqrt().matrix();
      normed = normed * inv_std.asDiagonal();
      act_in = params.gain(l).asDiagonal() * normed;
      act_in.colwise() += params.shift(l);
    } else {
      act_in = pre;
    }
    Eigen::MatrixXd out;
    activate(spec.activation, act_in, out);
    if (cache) {
      cache->pre[l] = std::move(pre);
      cache->normed[l] = std::move(normed);
      cache->inv_std[l] = std::move(inv_std);
      cache->act_in[l] = std::move(act_in);
      cache->act_out[l] = out;
    }
    h = std::move(out);
  }
  Eigen::MatrixXd y = params.weight(hidden) * h;
  y.colwise() += params.bias(hidden);
  return y;
}

MlpGradients backward(const MlpParams& params, const MlpCache& cache, const Eigen::MatrixXd& dy) {
  const auto& spec = params.spec();
  const int hidden = spec.num_hidden();
  if (dy.rows() != spec.output_dim() || dy.cols() != cache.input.cols()) {
    throw ShapeError("MLP output gradient shape mismatch");
  }
  MlpGradients g;
  g.params = Eigen::VectorXd::Zero(params.size());
  auto grad_weight = [&](int l) {
    return Eigen::Map<Eigen::MatrixXd>(g.params.data() + params.offsets(l).weight, spec.widths[l + 1],
                                       spec.widths[l]);
  };
  auto grad_vec = [&](Eigen::Index off, int l) {
    return Eigen::Map<Eigen::VectorXd>(g.params.data() + off, spec.widths[l + 1]);
  };

  const Eigen::MatrixXd& last_in = hidden > 0 ? cache.act_out[hidden - 1] : cache.input;
  grad_weight(hidden).noalias() = dy * last_in.transpose();
  grad_vec(params.offsets(hidden).bias, hidden) = dy.rowwise().sum();
  Eigen::MatrixXd dh = params.weight(hidden).transpose() * dy;

  for (int l = hidden - 1; l >= 0; --l) {
    const auto& act_in = cache.act_in[l];
    Eigen::MatrixXd d_act_in(act_in.rows(), act_in.cols());
    for (Eigen::Index j = 0; j < act_in.cols(); ++j) {
      for (Eigen::Index i = 0; i < act_in.rows(); ++i) {
        d_act_in(i, j) = dh(i, j) * activation_derivative(spec.activation, act_in(i, j));
      }
    }
    Eigen::MatrixXd dpre;
    if (params.has_norm(l)) {
      const auto& normed = cache.normed[l];
      grad_vec(params.offsets(l).gain, l) = (d_act_in.array() * normed.array()).rowwise().sum().matrix();
      grad_vec(params.offsets(l).shift, l) = d_act_in.rowwise().sum();
      const Eigen::MatrixXd dn = params.gain(l).asDiagonal() * d_act_in;
      const double n = static_cast<double>(dn.rows());
      const Eigen::RowVectorXd mean_dn = dn.colwise().sum() / n;
      const Eigen::RowVectorXd mean_dn_n = (dn.array() * normed.array()).colwise().sum().matrix() / n;
      dpre = (dn.rowwise() - mean_dn) - normed * mean_dn_n.asDiagonal();
      dpre = dpre * cache.inv_std[l].asDiagonal();
    } else {
      dpre = std::move(d_act_in);
    }
    const Eigen::MatrixXd& in = l > 0 ? cache.act_out[l - 1] : cache.input;
    grad_weight(l).noalias() = dpre * in.transpose();
    grad_vec(params.offsets(l).bias, l) = dpre.rowwise().sum();
    dh = params.weight(l).transpose() * dpre;
  }
  g.input = std::move(dh);
  return g;
}

void adam_update(Eigen::VectorXd& params, const Eigen::VectorXd& grads, AdamState& state,
                 const AdamConfig& cfg, double lr) {
  if (params.size() != grads.size()) throw ShapeError("Adam: gradient size mismatch");
  if (state.m.size() != params.size()) state = AdamState::Zeros(params.size());
  const double rate = lr > 0.0 ? lr : cfg.lr;
  ++state.step;
  state.m = cfg.beta1 * state.m + (1.0 - cfg.beta1) * grads;
  state.v = cfg.beta2 * state.v + (1.0 - cfg.beta2) * grads.cwiseProduct(grads);
  const double c1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.step));
  const double c2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.step));
  params.array() -= rate * (state.m.array() / c1) / ((state.v.array() / c2).sqrt() + cfg.eps);
}

double cosine_lr(double base_lr, long step, long total_steps) {
  if (total_steps <= 0) return base_lr;
  const double s = std::clamp(static_cast<double>(step) / static_cast<double>(total_steps), 0.0, 1.0);
  return 0.5 * base_lr * (1.0 + std::cos(std::numbers::pi * s));
}

Json to_json(const MlpSpec& spec) {
  std::vector<int> norms(spec.layer_norm.begin(), spec.layer_norm.end());
  return Json{{"widths", spec.widths},
              {"activation", std::string(to_string(spec.activation))},
              {"layer_norm", norms}};
}

MlpSpec mlp_spec_from_json(const Json& j) {
  MlpSpec s;
  s.widths = j.at("widths").get<std::vector<int>>();
  s.activation = activation_from_string(j.at("activation").get<std::string>());
  for (int f : j.at("layer_norm").get<std::vector<int>>()) s.layer_norm.push_back(f != 0);
  s.validate();
  return s;
}

Json to_json(const MlpParams& params) {
  Json shapes = Json::array();
  for (int l = 0; l < params.spec().num_layers(); ++l) {
    shapes.push_back(Json{{"weight", {params.spec().widths[l + 1], params.spec().widths[l]}},
                          {"bias", params.spec().widths[l + 1]},
                          {"norm", params.has_norm(l)}});
  }
  return Json{{"spec", to_json(params.spec())},
              {"shapes", std::move(shapes)},
              {"count", params.size()},
              {"values", vector_to_json(params.values())}};
}

MlpParams mlp_params_from_json(const Json& j) {
  MlpParams p(mlp_spec_from_json(j.at("spec")));
  const Eigen::VectorXd v = vector_from_json(j.at("values"));
  if (v.size() != p.size()) {
    throw ShapeError("parameter array has " + std::to_string(v.size()) + " values, spec needs " +
                     std::to_string(p.size()));
  }
  p.values() = v;
  return p;
}

}  // namespace otd::nn
