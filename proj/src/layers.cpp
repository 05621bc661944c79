#include "litediff/layers.hpp"

#include <algorithm>
#include <cmath>

namespace litediff {

// ---------------------------------------------------------------- ParamStore

Tensor& ParamStore::add(const std::string& name, Tensor tensor, bool trainable) {
  if (entries_.count(name)) throw std::invalid_argument("ParamStore: duplicate parameter '" + name + "'");
  tensor.set_requires_grad(trainable);
  auto& e = entries_[name];
  e.tensor = std::move(tensor);
  e.trainable = trainable;
  return e.tensor;
}

const Tensor& ParamStore::get(const std::string& name) const {
  auto it = entries_.find(name);
  if (it == entries_.end()) throw std::out_of_range("ParamStore: no parameter '" + name + "'");
  return it->second.tensor;
}

Tensor& ParamStore::get(const std::string& name) {
  auto it = entries_.find(name);
  if (it == entries_.end()) throw std::out_of_range("ParamStore: no parameter '" + name + "'");
  return it->second.tensor;
}

bool ParamStore::trainable(const std::string& name) const {
  auto it = entries_.find(name);
  if (it == entries_.end()) throw std::out_of_range("ParamStore: no parameter '" + name + "'");
  return it->second.trainable;
}

void ParamStore::set_trainable(const std::string& name, bool trainable) {
  auto it = entries_.find(name);
  if (it == entries_.end()) throw std::out_of_range("ParamStore: no parameter '" + name + "'");
  it->second.trainable = trainable;
  it->second.tensor.set_requires_grad(trainable);
}

void ParamStore::set_all_trainable(bool trainable) {
  for (auto& [name, e] : entries_) {
    e.trainable = trainable;
    e.tensor.set_requires_grad(trainable);
  }
}

std::size_t ParamStore::param_count() const {
  std::size_t n = 0;
  for (const auto& [name, e] : entries_) n += e.tensor.numel();
  return n;
}

std::size_t ParamStore::trainable_count() const {
  std::size_t n = 0;
  for (const auto& [name, e] : entries_)
    if (e.trainable) n += e.tensor.numel();
  return n;
}

void ParamStore::clear_grads() {
  for (auto& [name, e] : entries_) e.tensor.clear_grad();
}

ParamStore ParamStore::clone() const {
  ParamStore out;
  for (const auto& [name, e] : entries_) out.add(name, e.tensor.clone(), e.trainable);
  return out;
}

void ParamStore::merge(const ParamStore& other, const std::string& prefix) {
  for (const auto& [name, e] : other.entries_) add(prefix + name, e.tensor.clone(), e.trainable);
}

ParamsAsConstants::ParamsAsConstants(ParamStore& store) : store_(store) {
  for (const auto& [name, e] : store.entries()) {
    if (e.tensor.requires_grad()) restored_.push_back(name);
  }
  for (const auto& name : restored_) store_.get(name).impl()->requires_grad = false;
}

ParamsAsConstants::~ParamsAsConstants() {
  for (const auto& name : restored_) store_.get(name).impl()->requires_grad = true;
}

// ------------------------------------------------------------ initialisation

Tensor init_normal(Shape shape, double stddev, Rng& rng, bool requires_grad) {
  std::vector<double> v(shape_numel(shape));
  for (auto& x : v) x = stddev * rng.normal();
  return Tensor(std::move(shape), std::move(v), requires_grad);
}

void register_conv(ParamStore& store, const std::string& name, std::size_t in, std::size_t out,
                   std::size_t k, Rng& rng, bool trainable) {
  const double stddev = std::sqrt(2.0 / static_cast<double>(in * k * k));
  store.add(name + ".weight", init_normal({out, in, k, k}, stddev, rng), trainable);
  store.add(name + ".bias", Tensor::zeros({out}), trainable);
}

void register_dense(ParamStore& store, const std::string& name, std::size_t in, std::size_t out,
                    Rng& rng, bool trainable) {
  const double stddev = std::sqrt(2.0 / static_cast<double>(in));
  store.add(name + ".weight", init_normal({in, out}, stddev, rng), trainable);
  store.add(name + ".bias", Tensor::zeros({out}), trainable);
}

void register_group_norm(ParamStore& store, const std::string& name, std::size_t channels, bool trainable) {
  store.add(name + ".gamma", Tensor::full({channels}, 1.0), trainable);
  store.add(name + ".beta", Tensor::zeros({channels}), trainable);
}

Tensor conv(const ParamStore& store, const std::string& name, const Tensor& x, std::size_t stride,
            std::size_t padding) {
  return conv2d(x, store.get(name + ".weight"), store.get(name + ".bias"), stride, padding);
}

Tensor dense(const ParamStore& store, const std::string& name, const Tensor& x) {
  return add_row_bias(matmul(x, store.get(name + ".weight")), store.get(name + ".bias"));
}

// ---------------------------------------------------------------- group norm

std::size_t default_groups(std::size_t channels) { return std::min<std::size_t>(8, channels); }

Tensor group_norm(const Tensor& x, std::size_t groups, const Tensor& gamma, const Tensor& beta, double eps) {
  if (x.rank() != 4) throw std::invalid_argument("group_norm: expected NCHW, got " + shape_str(x.shape()));
  const std::size_t n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
  if (groups == 0 || c % groups != 0) {
    throw std::invalid_argument("group_norm: " + std::to_string(c) + " channels not divisible by " +
                                std::to_string(groups) + " groups");
  }
  if (gamma.numel() != c || beta.numel() != c) throw ShapeError("group_norm: affine", x.shape(), gamma.shape());
  const std::size_t cpg = c / groups;
  const std::size_t group_size = cpg * hw;

  std::vector<double> xhat(x.numel());
  std::vector<double> inv_std(n * groups);
  std::vector<double> out(x.numel());
  const double* src = x.data().data();
  for (std::size_t i = 0; i < n * groups; ++i) {
    const double* gx = src + i * group_size;
    double mean = 0.0;
    for (std::size_t j = 0; j < group_size; ++j) mean += gx[j];
    mean /= static_cast<double>(group_size);
    double var = 0.0;
    for (std::size_t j = 0; j < group_size; ++j) {
      const double d = gx[j] - mean;
      var += d * d;
    }
    var /= static_cast<double>(group_size);
    const double is = 1.0 / std::sqrt(var + eps);
    inv_std[i] = is;
    for (std::size_t j = 0; j < group_size; ++j) xhat[i * group_size + j] = (gx[j] - mean) * is;
  }
  for (std::size_t s = 0; s < n; ++s)
    for (std::size_t ch = 0; ch < c; ++ch) {
      const std::size_t off = (s * c + ch) * hw;
      const double g = gamma[ch], b = beta[ch];
      for (std::size_t j = 0; j < hw; ++j) out[off + j] = xhat[off + j] * g + b;
    }

  auto xi = x.impl(), gi = gamma.impl(), bi = beta.impl();
  return record_op(x.shape(), std::move(out), {x, gamma, beta},
                   [xi, gi, bi, xhat = std::move(xhat), inv_std = std::move(inv_std), n, c, hw, cpg, groups,
                    group_size](const std::vector<double>& g) {
    if (gi->requires_grad || bi->requires_grad) {
      std::vector<double> dg(c, 0.0), db(c, 0.0);
      for (std::size_t s = 0; s < n; ++s)
        for (std::size_t ch = 0; ch < c; ++ch) {
          const std::size_t off = (s * c + ch) * hw;
          for (std::size_t j = 0; j < hw; ++j) {
            dg[ch] += g[off + j] * xhat[off + j];
            db[ch] += g[off + j];
          }
        }
      if (gi->requires_grad) {
        auto& d = grad_buffer(*gi);
        for (std::size_t ch = 0; ch < c; ++ch) d[ch] += dg[ch];
      }
      if (bi->requires_grad) {
        auto& d = grad_buffer(*bi);
        for (std::size_t ch = 0; ch < c; ++ch) d[ch] += db[ch];
      }
    }
    if (!xi->requires_grad) return;
    auto& dx = grad_buffer(*xi);
    std::vector<double> dxhat(group_size);
    for (std::size_t s = 0; s < n; ++s)
      for (std::size_t gr = 0; gr < groups; ++gr) {
        const std::size_t base = (s * groups + gr) * group_size;
        double mean_d = 0.0, mean_dx = 0.0;
        for (std::size_t j = 0; j < group_size; ++j) {
          const std::size_t ch = gr * cpg + j / hw;
          dxhat[j] = g[base + j] * gi->data[ch];
          mean_d += dxhat[j];
          mean_dx += dxhat[j] * xhat[base + j];
        }
        mean_d /= static_cast<double>(group_size);
        mean_dx /= static_cast<double>(group_size);
        const double is = inv_std[s * groups + gr];
        for (std::size_t j = 0; j < group_size; ++j) {
          dx[base + j] += is * (dxhat[j] - mean_d - xhat[base + j] * mean_dx);
        }
      }
  });
}

Tensor group_norm(const ParamStore& store, const std::string& name, const Tensor& x) {
  return group_norm(x, default_groups(x.dim(1)), store.get(name + ".gamma"), store.get(name + ".beta"));
}

// --------------------------------------------------------------- activations

Tensor activation(const Activation& act, const Tensor& x) {
  const std::size_t n = x.numel();
  std::vector<double> out(n);
  const double* src = x.data().data();
  auto xi = x.impl();
  switch (act.kind) {
    case Activation::Kind::Relu: {
      for (std::size_t i = 0; i < n; ++i) out[i] = src[i] > 0.0 ? src[i] : 0.0;
      return record_op(x.shape(), std::move(out), {x}, [xi](const std::vector<double>& g) {
        auto& dx = grad_buffer(*xi);
        for (std::size_t i = 0; i < g.size(); ++i)
          if (xi->data[i] > 0.0) dx[i] += g[i];
      });
    }
    case Activation::Kind::LeakyRelu: {
      const double slope = act.slope;
      if (!(slope > 0.0 && slope < 1.0)) {
        throw std::invalid_argument("leaky_relu: slope must lie in (0, 1), got " + std::to_string(slope));
      }
      for (std::size_t i = 0; i < n; ++i) out[i] = src[i] > 0.0 ? src[i] : slope * src[i];
      return record_op(x.shape(), std::move(out), {x}, [xi, slope](const std::vector<double>& g) {
        auto& dx = grad_buffer(*xi);
        for (std::size_t i = 0; i < g.size(); ++i) dx[i] += xi->data[i] > 0.0 ? g[i] : slope * g[i];
      });
    }
    case Activation::Kind::Sigmoid: {
      for (std::size_t i = 0; i < n; ++i) {
        const double s = 1.0 / (1.0 + std::exp(-src[i]));
        out[i] = std::clamp(s, kProbFloor, 1.0 - kProbFloor);
      }
      std::vector<double> y = out;
      return record_op(x.shape(), std::move(out), {x}, [xi, y = std::move(y)](const std::vector<double>& g) {
        auto& dx = grad_buffer(*xi);
        for (std::size_t i = 0; i < g.size(); ++i) {
          // Clamped entries are locally constant.
          if (y[i] <= kProbFloor || y[i] >= 1.0 - kProbFloor) continue;
          dx[i] += g[i] * y[i] * (1.0 - y[i]);
        }
      });
    }
    case Activation::Kind::Tanh: {
      for (std::size_t i = 0; i < n; ++i) out[i] = std::tanh(src[i]);
      std::vector<double> y = out;
      return record_op(x.shape(), std::move(out), {x}, [xi, y = std::move(y)](const std::vector<double>& g) {
        auto& dx = grad_buffer(*xi);
        for (std::size_t i = 0; i < g.size(); ++i) dx[i] += g[i] * (1.0 - y[i] * y[i]);
      });
    }
  }
  throw std::logic_error("activation: unknown kind");
}

// ------------------------------------------------------------ spectral norm

SpectralState SpectralState::random(std::size_t out_channels, Rng& rng) {
  SpectralState st;
  st.u.resize(out_channels);
  double norm = 0.0;
  for (auto& v : st.u) {
    v = rng.normal();
    norm += v * v;
  }
  norm = std::sqrt(norm);
  for (auto& v : st.u) v /= norm;
  return st;
}

double spectral_sigma(const Tensor& weight, SpectralState& state) {
  const std::size_t rows = weight.dim(0);
  const std::size_t cols = weight.numel() / rows;
  if (state.u.size() != rows) {
    throw ShapeError("spectral_conv2d: u length", weight.shape(), Shape{state.u.size()});
  }
  const double* w = weight.data().data();
  std::vector<double> v(cols), wv(rows);
  double sigma = 0.0;
  for (int it = 0; it < state.iterations; ++it) {
    std::fill(v.begin(), v.end(), 0.0);
    for (std::size_t r = 0; r < rows; ++r) {
      const double ur = state.u[r];
      for (std::size_t c = 0; c < cols; ++c) v[c] += w[r * cols + c] * ur;
    }
    double nv = 0.0;
    for (double x : v) nv += x * x;
    nv = std::sqrt(nv);
    if (nv < kSigmaFloor) return 0.0;
    for (auto& x : v) x /= nv;
    double nw = 0.0;
    for (std::size_t r = 0; r < rows; ++r) {
      double s = 0.0;
      for (std::size_t c = 0; c < cols; ++c) s += w[r * cols + c] * v[c];
      wv[r] = s;
      nw += s * s;
    }
    nw = std::sqrt(nw);
    if (nw < kSigmaFloor) return 0.0;
    for (std::size_t r = 0; r < rows; ++r) state.u[r] = wv[r] / nw;
    sigma = nw;  // u·Wv with u = Wv/|Wv|
  }
  return sigma;
}

Tensor spectral_conv2d(const Tensor& x, const Tensor& weight, const Tensor& bias, SpectralState& state,
                       std::size_t stride, std::size_t padding) {
  const double sigma = std::max(spectral_sigma(weight, state), kSigmaFloor);
  return conv2d(x, scale(weight, 1.0 / sigma), bias, stride, padding);
}

// -------------------------------------------------------------------- losses

Tensor mse_loss(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) throw ShapeError("mse_loss", a.shape(), b.shape());
  const std::size_t n = a.numel();
  double s = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double d = a[i] - b[i];
    s += d * d;
  }
  const double inv = 1.0 / static_cast<double>(n);
  auto ai = a.impl(), bi = b.impl();
  return record_op({1}, {s * inv}, {a, b}, [ai, bi, inv](const std::vector<double>& g) {
    const double k = 2.0 * inv * g[0];
    if (ai->requires_grad) {
      auto& d = grad_buffer(*ai);
      for (std::size_t i = 0; i < d.size(); ++i) d[i] += k * (ai->data[i] - bi->data[i]);
    }
    if (bi->requires_grad) {
      auto& d = grad_buffer(*bi);
      for (std::size_t i = 0; i < d.size(); ++i) d[i] -= k * (ai->data[i] - bi->data[i]);
    }
  });
}

Tensor bce_loss(const Tensor& p, double target) {
  const std::size_t n = p.numel();
  double s = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double q = std::clamp(p[i], kProbFloor, 1.0 - kProbFloor);
    s -= target * std::log(q) + (1.0 - target) * std::log(1.0 - q);
  }
  const double inv = 1.0 / static_cast<double>(n);
  auto pi = p.impl();
  return record_op({1}, {s * inv}, {p}, [pi, target, inv](const std::vector<double>& g) {
    auto& d = grad_buffer(*pi);
    for (std::size_t i = 0; i < d.size(); ++i) {
      const double q = std::clamp(pi->data[i], kProbFloor, 1.0 - kProbFloor);
      d[i] += g[0] * inv * (-target / q + (1.0 - target) / (1.0 - q));
    }
  });
}

// ---------------------------------------------------------------- optimisers

void Optimizer::step(ParamStore& store) {
  for (const auto& [name, e] : store.entries()) {
    if (e.trainable && !e.tensor.has_grad()) throw MissingGradientError(name);
  }
  ++steps_;
  for (const auto& [name, e] : store.entries()) {
    if (!e.trainable) continue;
    Tensor t = e.tensor;
    auto p = t.mutable_data();
    auto g = t.grad();
    if (const auto* sgd = std::get_if<Sgd>(&rule_)) {
      for (std::size_t i = 0; i < p.size(); ++i) p[i] -= sgd->lr * g[i];
    } else {
      const auto& adam = std::get<Adam>(rule_);
      auto& m = m_[name];
      auto& v = v_[name];
      if (m.empty()) {
        m.assign(p.size(), 0.0);
        v.assign(p.size(), 0.0);
      }
      const double c1 = 1.0 - std::pow(adam.beta1, static_cast<double>(steps_));
      const double c2 = 1.0 - std::pow(adam.beta2, static_cast<double>(steps_));
      for (std::size_t i = 0; i < p.size(); ++i) {
        m[i] = adam.beta1 * m[i] + (1.0 - adam.beta1) * g[i];
        v[i] = adam.beta2 * v[i] + (1.0 - adam.beta2) * g[i] * g[i];
        const double mhat = m[i] / c1;
        const double vhat = v[i] / c2;
        p[i] -= adam.lr * mhat / (std::sqrt(vhat) + adam.eps);
      }
    }
    t.clear_grad();
  }
}

void Optimizer::export_state(ParamStore& out, const std::string& prefix) const {
  out.add(prefix + "steps", Tensor::scalar(static_cast<double>(steps_)), false);
  for (const auto& [name, m] : m_) {
    out.add(prefix + "m." + name, Tensor({m.size()}, m), false);
    const auto& v = v_.at(name);
    out.add(prefix + "v." + name, Tensor({v.size()}, v), false);
  }
}

void Optimizer::import_state(const ParamStore& in, const std::string& prefix) {
  steps_ = static_cast<std::int64_t>(in.get(prefix + "steps").item());
  m_.clear();
  v_.clear();
  const std::string mp = prefix + "m.", vp = prefix + "v.";
  for (const auto& [name, e] : in.entries()) {
    if (name.rfind(mp, 0) == 0) {
      m_[name.substr(mp.size())].assign(e.tensor.data().begin(), e.tensor.data().end());
    } else if (name.rfind(vp, 0) == 0) {
      v_[name.substr(vp.size())].assign(e.tensor.data().begin(), e.tensor.data().end());
    }
  }
}

double clip_grad_norm(ParamStore& store, double max_norm) {
  double sq = 0.0;
  for (const auto& [name, e] : store.entries()) {
    if (!e.trainable || !e.tensor.has_grad()) continue;
    for (double g : e.tensor.grad()) sq += g * g;
  }
  const double norm = std::sqrt(sq);
  if (norm > max_norm) {
    const double k = max_norm / norm;
    for (auto& [name, e] : store.entries()) {
      if (!e.trainable || !e.tensor.has_grad()) continue;
      Tensor t = e.tensor;
      for (auto& g : t.mutable_grad()) g *= k;
    }
  }
  return norm;
}

}  // namespace litediff
