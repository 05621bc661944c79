#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "litediff/rng.hpp"
#include "litediff/tensor.hpp"

namespace litediff {

enum class Domain { BaseTextures, MorphLungs };

std::string domain_name(Domain d);
Domain parse_domain(const std::string& name);

/// Grayscale image, row-major, values in [-1, 1].
struct ImageGray {
  std::size_t width = 0;
  std::size_t height = 0;
  std::vector<double> pixels;

  ImageGray() = default;
  ImageGray(std::size_t w, std::size_t h, double fill = -1.0) : width(w), height(h), pixels(w * h, fill) {}
  double& at(std::size_t x, std::size_t y) { return pixels[y * width + x]; }
  double at(std::size_t x, std::size_t y) const { return pixels[y * width + x]; }
};

struct LabeledImage {
  ImageGray image;
  int class_id = 0;
  std::uint64_t seed = 0;  // per-image generator seed
};

struct GeneratorParams {
  Domain domain = Domain::MorphLungs;
  std::size_t n = 1;
  std::uint64_t seed = 0;
  std::size_t resolution = 64;
};

// Image i is drawn from its own stream derived from (seed, i), so a dataset of
// n images is a prefix of any larger dataset with the same seed.
std::vector<LabeledImage> generate(const GeneratorParams& params);
LabeledImage generate_one(Domain domain, std::uint64_t image_seed, std::size_t resolution);

class PgmError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Binary P5, maxval 255, one "# seed N" comment line.
void save_pgm(const ImageGray& img, const std::filesystem::path& path, std::uint64_t seed = 0);
std::string encode_pgm(const ImageGray& img, std::uint64_t seed = 0);
ImageGray load_pgm(const std::filesystem::path& path);
ImageGray decode_pgm(const std::string& bytes);

std::uint8_t quantize(double v);
inline double dequantize(std::uint8_t b) { return static_cast<double>(b) / 127.5 - 1.0; }

// Seeded shuffle then cut at round(train_fraction * n).
template <typename T>
std::pair<std::vector<T>, std::vector<T>> split(const std::vector<T>& items, double train_fraction,
                                                double eval_fraction, std::uint64_t seed);

// L2 distance between the image and its horizontal mirror over the nominal
// lung-field region.
double symmetry_score(const ImageGray& img);

// N×1×H×W batch of the selected images.
Tensor to_batch(const std::vector<ImageGray>& images);
Tensor to_batch(const std::vector<ImageGray>& images, const std::vector<std::size_t>& indices);
ImageGray image_from_batch(const Tensor& batch, std::size_t index);
std::vector<ImageGray> images_from_batch(const Tensor& batch);
std::vector<ImageGray> images_of(const std::vector<LabeledImage>& items);

// Tiles images into a grid with one-pixel -1 gutters.
ImageGray make_grid(const std::vector<ImageGray>& images, std::size_t columns);

// ------------------------------------------------------------------ template

std::vector<std::size_t> shuffled_indices(std::size_t n, std::uint64_t seed);
void check_split_fractions(double train_fraction, double eval_fraction);

template <typename T>
std::pair<std::vector<T>, std::vector<T>> split(const std::vector<T>& items, double train_fraction,
                                                double eval_fraction, std::uint64_t seed) {
  check_split_fractions(train_fraction, eval_fraction);
  const auto order = shuffled_indices(items.size(), seed);
  const auto cut = static_cast<std::size_t>(std::llround(train_fraction * static_cast<double>(items.size())));
  std::pair<std::vector<T>, std::vector<T>> out;
  for (std::size_t i = 0; i < order.size(); ++i) (i < cut ? out.first : out.second).push_back(items[order[i]]);
  return out;
}

}  // namespace litediff
