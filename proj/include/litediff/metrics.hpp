#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "litediff/layers.hpp"

namespace litediff {

// ------------------------------------------------------------------ gaussian

struct GaussianStats {
  Eigen::VectorXd mean;
  Eigen::MatrixXd cov;
};

// Rows of `features` are samples. Unbiased covariance; +1e-6·I when there are
// no more samples than dimensions.
GaussianStats fit_gaussian(const Eigen::MatrixXd& features);
GaussianStats fit_gaussian(const Tensor& features);  // N×D

/// ‖μa − μb‖² + Tr(Σa + Σb − 2(Σa^½ Σb Σa^½)^½), eigenvalues floored at 0.
double frechet_distance(const GaussianStats& a, const GaussianStats& b);

// ------------------------------------------------------------- eval encoder

struct EvalEncoderConfig {
  int epochs = 10;
  std::size_t batch_size = 16;
  double learning_rate = 1e-3;
  std::uint64_t seed = 0;
};

/// Small convolutional autoencoder (1→8→16→32, stride 2, then dense to 32)
/// whose frozen encoder provides the features for fid_desk and the
/// perceptual proxy. Unrelated to the LMA.
class EvalEncoder {
 public:
  static constexpr std::size_t kFeatureDim = 32;

  EvalEncoder(std::uint64_t seed, std::size_t resolution = 64);
  EvalEncoder(ParamStore params, std::size_t resolution);

  // N×32 features, computed in chunks without recording.
  Tensor features(const Tensor& images) const;
  // Activations after each conv layer (N×C×h×w), three in total.
  std::vector<Tensor> layer_activations(const Tensor& images) const;
  Tensor encode(const Tensor& images) const;  // differentiable
  Tensor decode(const Tensor& z) const;

  std::size_t resolution() const { return resolution_; }
  ParamStore& params() { return params_; }
  const ParamStore& params() const { return params_; }
  // Hex digest of every parameter, recorded alongside each report.
  std::string checksum() const;

 private:
  std::size_t resolution_;
  ParamStore params_;
};

// Trains on reconstruction MSE and freezes. `losses`, when given, receives
// the mean loss per epoch.
EvalEncoder train_eval_encoder(const Tensor& images, const EvalEncoderConfig& cfg,
                               std::vector<double>* losses = nullptr);

// ------------------------------------------------------------------- metrics

constexpr std::size_t kMinFidImages = 64;

/// Fréchet distance between EvalEncoder features of two image sets (N×1×R×R),
/// each of at least kMinFidImages images.
double fid_desk(const Tensor& real, const Tensor& gen, const EvalEncoder& enc);

/// Mean over row pairs (a_i, b_i) of the layer-averaged distance between
/// channel-normalised activations.
double perceptual_proxy(const Tensor& a, const Tensor& b, const EvalEncoder& enc);

// -------------------------------------------------------------------- report

struct ReportRow {
  std::string arm;
  double fid_desk = 0.0;
  double perceptual_proxy = 0.0;
  double trainable_fraction = 0.0;
  double wall_seconds = 0.0;
  std::uint64_t seed = 0;
  std::string encoder_checksum;
};

// Rows sorted by ascending FID (ties keep input order).
std::vector<ReportRow> build_report(std::vector<ReportRow> rows);
std::string report_csv(const std::vector<ReportRow>& rows);
std::vector<ReportRow> parse_report_csv(const std::string& text);
void write_report_csv(const std::filesystem::path& path, const std::vector<ReportRow>& rows);
std::vector<ReportRow> read_report_csv(const std::filesystem::path& path);
std::string report_table(const std::vector<ReportRow>& rows);

}  // namespace litediff
