#include "litediff/metrics.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstring>
#include <iomanip>
#include <numeric>
#include <sstream>
#include <stdexcept>

#include "litediff/checkpoint.hpp"
#include "litediff/diffusion.hpp"

namespace litediff {

// ------------------------------------------------------------------ gaussian

GaussianStats fit_gaussian(const Eigen::MatrixXd& f) {
  if (f.rows() == 0 || f.cols() == 0) throw std::invalid_argument("fit_gaussian: no samples");
  GaussianStats g;
  g.mean = f.colwise().mean().transpose();
  g.mean += (f.rowwise() - g.mean.transpose()).colwise().mean().transpose();  // second-pass correction
  const Eigen::MatrixXd centered = f.rowwise() - g.mean.transpose();
  g.cov = Eigen::MatrixXd::Zero(f.cols(), f.cols());
  if (f.rows() > 1) g.cov = (centered.transpose() * centered) / static_cast<double>(f.rows() - 1);
  g.cov = 0.5 * (g.cov + g.cov.transpose());
  if (f.rows() <= f.cols()) g.cov += 1e-6 * Eigen::MatrixXd::Identity(f.cols(), f.cols());
  return g;
}

GaussianStats fit_gaussian(const Tensor& features) {
  if (features.rank() != 2) throw std::invalid_argument("fit_gaussian: expected N×D, got " + shape_str(features.shape()));
  Eigen::MatrixXd m(features.dim(0), features.dim(1));
  for (std::size_t i = 0; i < features.dim(0); ++i)
    for (std::size_t j = 0; j < features.dim(1); ++j) m(i, j) = features[i * features.dim(1) + j];
  return fit_gaussian(m);
}

namespace {

Eigen::MatrixXd psd_sqrt(const Eigen::MatrixXd& m) {
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(0.5 * (m + m.transpose()));
  const Eigen::VectorXd root = es.eigenvalues().cwiseMax(0.0).cwiseSqrt();
  return es.eigenvectors() * root.asDiagonal() * es.eigenvectors().transpose();
}

}  // namespace

double frechet_distance(const GaussianStats& a, const GaussianStats& b) {
  if (a.mean.size() != b.mean.size() || a.cov.rows() != b.cov.rows()) {
    throw std::invalid_argument("frechet_distance: dimension mismatch (" + std::to_string(a.mean.size()) + " vs " +
                                std::to_string(b.mean.size()) + ")");
  }
  const Eigen::MatrixXd ra = psd_sqrt(a.cov);
  const Eigen::MatrixXd inner = ra * b.cov * ra;
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(0.5 * (inner + inner.transpose()), Eigen::EigenvaluesOnly);
  const double cross = es.eigenvalues().cwiseMax(0.0).cwiseSqrt().sum();
  const double d = (a.mean - b.mean).squaredNorm() + a.cov.trace() + b.cov.trace() - 2.0 * cross;
  return std::max(d, 0.0);
}

// ------------------------------------------------------------- eval encoder

namespace {

constexpr std::size_t kEvalC1 = 8, kEvalC2 = 16, kEvalC3 = 32;

void check_images(const char* op, const Tensor& x, std::size_t res) {
  if (x.rank() != 4 || x.dim(1) != 1 || x.dim(2) != res || x.dim(3) != res) throw ShapeError(op, {0, 1, res, res}, x.shape());
}

}  // namespace

EvalEncoder::EvalEncoder(std::uint64_t seed, std::size_t resolution) : resolution_(resolution) {
  if (resolution == 0 || resolution % 8 != 0) throw std::invalid_argument("EvalEncoder: resolution must be a multiple of 8");
  Rng rng(seed);
  const std::size_t flat = kEvalC3 * (resolution / 8) * (resolution / 8);
  register_conv(params_, "enc.conv1", 1, kEvalC1, 3, rng, true);
  register_conv(params_, "enc.conv2", kEvalC1, kEvalC2, 3, rng, true);
  register_conv(params_, "enc.conv3", kEvalC2, kEvalC3, 3, rng, true);
  register_dense(params_, "enc.fc", flat, kFeatureDim, rng, true);
  register_dense(params_, "dec.fc", kFeatureDim, flat, rng, true);
  register_conv(params_, "dec.conv1", kEvalC3, kEvalC2, 3, rng, true);
  register_conv(params_, "dec.conv2", kEvalC2, kEvalC1, 3, rng, true);
  register_conv(params_, "dec.conv3", kEvalC1, 1, 3, rng, true);
}

EvalEncoder::EvalEncoder(ParamStore params, std::size_t resolution) : resolution_(resolution), params_(std::move(params)) {
  const EvalEncoder reference(0, resolution);
  for (const auto& [name, e] : reference.params().entries()) {
    if (!params_.contains(name)) throw std::invalid_argument("EvalEncoder: checkpoint lacks parameter '" + name + "'");
    if (params_.get(name).shape() != e.tensor.shape()) {
      throw ShapeError("EvalEncoder parameter " + name, e.tensor.shape(), params_.get(name).shape());
    }
  }
}

std::vector<Tensor> EvalEncoder::layer_activations(const Tensor& x) const {
  check_images("eval_encoder", x, resolution_);
  std::vector<Tensor> out;
  auto h = leaky_relu(conv(params_, "enc.conv1", x, 2, 1));
  out.push_back(h);
  h = leaky_relu(conv(params_, "enc.conv2", h, 2, 1));
  out.push_back(h);
  h = leaky_relu(conv(params_, "enc.conv3", h, 2, 1));
  out.push_back(h);
  return out;
}

Tensor EvalEncoder::encode(const Tensor& x) const {
  const auto h = layer_activations(x).back();
  return dense(params_, "enc.fc", reshape(h, {x.dim(0), h.numel() / x.dim(0)}));
}

Tensor EvalEncoder::decode(const Tensor& z) const {
  if (z.rank() != 2 || z.dim(1) != kFeatureDim) throw ShapeError("eval_decode", {0, kFeatureDim}, z.shape());
  const std::size_t q = resolution_ / 8;
  auto h = reshape(leaky_relu(dense(params_, "dec.fc", z)), {z.dim(0), kEvalC3, q, q});
  h = resample(leaky_relu(conv(params_, "dec.conv1", resample(h, Resample::Up2), 1, 1)), Resample::Up2);
  h = leaky_relu(conv(params_, "dec.conv2", h, 1, 1));
  return activation(Activation::tanh(), conv(params_, "dec.conv3", resample(h, Resample::Up2), 1, 1));
}

Tensor EvalEncoder::features(const Tensor& images) const {
  check_images("eval_features", images, resolution_);
  constexpr std::size_t kChunk = 64;
  const std::size_t n = images.dim(0);
  std::vector<double> out;
  out.reserve(n * kFeatureDim);
  for (std::size_t i = 0; i < n; i += kChunk) {
    std::vector<std::size_t> idx(std::min(kChunk, n - i));
    std::iota(idx.begin(), idx.end(), i);
    const auto f = encode(gather_rows(images, idx));
    out.insert(out.end(), f.data().begin(), f.data().end());
  }
  return Tensor({n, kFeatureDim}, std::move(out));
}

std::string EvalEncoder::checksum() const {
  std::uint64_t h = 1469598103934665603ULL;
  auto mix = [&](const void* p, std::size_t len) {
    const auto* b = static_cast<const unsigned char*>(p);
    for (std::size_t i = 0; i < len; ++i) {
      h ^= b[i];
      h *= 1099511628211ULL;
    }
  };
  for (const auto& [name, e] : params_.entries()) {
    mix(name.data(), name.size());
    mix(e.tensor.data().data(), e.tensor.numel() * sizeof(double));
  }
  std::ostringstream os;
  os << std::hex << std::setw(16) << std::setfill('0') << h;
  return os.str();
}

EvalEncoder train_eval_encoder(const Tensor& images, const EvalEncoderConfig& cfg, std::vector<double>* losses) {
  if (images.rank() != 4 || images.dim(0) == 0) throw std::invalid_argument("train_eval_encoder: empty dataset");
  if (cfg.batch_size == 0 || !(cfg.learning_rate > 0.0)) throw std::invalid_argument("train_eval_encoder: bad config");
  EvalEncoder enc(Rng::derive(cfg.seed, 1), images.dim(2));
  Optimizer opt(Adam{cfg.learning_rate});
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    double total = 0.0;
    const auto batches = epoch_batches(images.dim(0), cfg.batch_size, Rng::derive(cfg.seed, 100 + epoch));
    for (const auto& idx : batches) {
      const auto x = gather_rows(images, idx);
      Tape tape;
      Tensor loss;
      {
        TapeScope scope(tape);
        loss = mse_loss(enc.decode(enc.encode(x)), x);
      }
      backward(loss, tape);
      clip_grad_norm(enc.params(), 1.0);
      opt.step(enc.params());
      total += loss.item();
    }
    if (losses) losses->push_back(total / static_cast<double>(batches.size()));
  }
  enc.params().freeze_all();
  return enc;
}

// ------------------------------------------------------------------- metrics

double fid_desk(const Tensor& real, const Tensor& gen, const EvalEncoder& enc) {
  for (const auto* set : {&real, &gen}) {
    if (set->rank() != 4 || set->dim(0) < kMinFidImages) {
      throw std::invalid_argument("fid_desk: need at least " + std::to_string(kMinFidImages) + " images per set, got " +
                                  (set->rank() == 4 ? std::to_string(set->dim(0)) : shape_str(set->shape())));
    }
  }
  return frechet_distance(fit_gaussian(enc.features(real)), fit_gaussian(enc.features(gen)));
}

namespace {

// Per-position unit-normalised channel vectors, N×C×H×W layout.
std::vector<double> channel_normalised(const Tensor& a) {
  const std::size_t n = a.dim(0), c = a.dim(1), hw = a.dim(2) * a.dim(3);
  std::vector<double> out(a.numel());
  for (std::size_t s = 0; s < n; ++s)
    for (std::size_t p = 0; p < hw; ++p) {
      double norm = 0.0;
      for (std::size_t ch = 0; ch < c; ++ch) norm += a[(s * c + ch) * hw + p] * a[(s * c + ch) * hw + p];
      norm = std::sqrt(norm) + 1e-10;
      for (std::size_t ch = 0; ch < c; ++ch) out[(s * c + ch) * hw + p] = a[(s * c + ch) * hw + p] / norm;
    }
  return out;
}

}  // namespace

double perceptual_proxy(const Tensor& a, const Tensor& b, const EvalEncoder& enc) {
  if (a.shape() != b.shape()) throw ShapeError("perceptual_proxy", a.shape(), b.shape());
  if (a.rank() != 4 || a.dim(0) == 0) throw std::invalid_argument("perceptual_proxy: need at least one pair");
  const std::size_t n = a.dim(0);
  const auto la = enc.layer_activations(a), lb = enc.layer_activations(b);
  double total = 0.0;
  for (std::size_t l = 0; l < la.size(); ++l) {
    const auto na = channel_normalised(la[l]), nb = channel_normalised(lb[l]);
    const std::size_t hw = la[l].dim(2) * la[l].dim(3);
    double layer = 0.0;
    for (std::size_t i = 0; i < na.size(); ++i) layer += (na[i] - nb[i]) * (na[i] - nb[i]);
    total += layer / static_cast<double>(n * hw);
  }
  return total / static_cast<double>(la.size());
}

// -------------------------------------------------------------------- report

std::vector<ReportRow> build_report(std::vector<ReportRow> rows) {
  if (rows.empty()) throw std::invalid_argument("build_report: no arms");
  std::stable_sort(rows.begin(), rows.end(), [](const ReportRow& x, const ReportRow& y) { return x.fid_desk < y.fid_desk; });
  return rows;
}

namespace {

constexpr const char* kReportHeader = "arm,fid_desk,perceptual_proxy,trainable_fraction,wall_seconds,seed,encoder_checksum";

std::string fmt(double v) {
  char buf[32];
  const auto r = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, r.ptr);
}

double parse_num(const std::string& s) {
  double v = 0.0;
  const auto r = std::from_chars(s.data(), s.data() + s.size(), v);
  if (r.ec != std::errc{} || r.ptr != s.data() + s.size()) throw std::invalid_argument("report CSV: bad number '" + s + "'");
  return v;
}

}  // namespace

std::string report_csv(const std::vector<ReportRow>& rows) {
  std::string out = std::string(kReportHeader) + "\n";
  for (const auto& r : rows) {
    if (r.arm.find_first_of(",\n\"") != std::string::npos) throw std::invalid_argument("report: arm name '" + r.arm + "' needs quoting");
    out += r.arm + "," + fmt(r.fid_desk) + "," + fmt(r.perceptual_proxy) + "," + fmt(r.trainable_fraction) + "," +
           fmt(r.wall_seconds) + "," + std::to_string(r.seed) + "," + r.encoder_checksum + "\n";
  }
  return out;
}

std::vector<ReportRow> parse_report_csv(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  if (!std::getline(in, line) || line != kReportHeader) throw std::invalid_argument("report CSV: bad header");
  std::vector<ReportRow> rows;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::vector<std::string> f;
    std::stringstream ss(line);
    for (std::string cell; std::getline(ss, cell, ',');) f.push_back(cell);
    if (line.back() == ',') f.emplace_back();
    if (f.size() != 7) throw std::invalid_argument("report CSV: expected 7 columns in '" + line + "'");
    ReportRow r;
    r.arm = f[0];
    r.fid_desk = parse_num(f[1]);
    r.perceptual_proxy = parse_num(f[2]);
    r.trainable_fraction = parse_num(f[3]);
    r.wall_seconds = parse_num(f[4]);
    r.seed = std::stoull(f[5]);
    r.encoder_checksum = f[6];
    rows.push_back(r);
  }
  return rows;
}

void write_report_csv(const std::filesystem::path& path, const std::vector<ReportRow>& rows) {
  write_file_atomic(path, report_csv(rows));
}

std::vector<ReportRow> read_report_csv(const std::filesystem::path& path) { return parse_report_csv(read_file(path)); }

std::string report_table(const std::vector<ReportRow>& rows) {
  std::size_t arm_w = 3;
  for (const auto& r : rows) arm_w = std::max(arm_w, r.arm.size());
  std::ostringstream os;
  os << std::left << std::setw(static_cast<int>(arm_w)) << "arm" << std::right << std::setw(12) << "fid_desk"
     << std::setw(12) << "proxy" << std::setw(12) << "trainable" << std::setw(12) << "seconds" << std::setw(8) << "seed"
     << "  encoder\n";
  os << std::fixed;
  for (const auto& r : rows) {
    os << std::left << std::setw(static_cast<int>(arm_w)) << r.arm << std::right << std::setprecision(4)
       << std::setw(12) << r.fid_desk << std::setw(12) << r.perceptual_proxy << std::setw(12) << r.trainable_fraction
       << std::setprecision(1) << std::setw(12) << r.wall_seconds << std::setw(8) << r.seed << "  "
       << r.encoder_checksum << "\n";
  }
  return os.str();
}

}  // namespace litediff
