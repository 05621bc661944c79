#include "litediff/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>

namespace litediff {

std::string domain_name(Domain d) { return d == Domain::BaseTextures ? "base_textures" : "morph_lungs"; }

Domain parse_domain(const std::string& name) {
  if (name == "base_textures") return Domain::BaseTextures;
  if (name == "morph_lungs") return Domain::MorphLungs;
  throw std::invalid_argument("unknown domain '" + name + "' (expected base_textures or morph_lungs)");
}

// ---------------------------------------------------------------- generators

namespace {

double smoothstep_edge(double signed_dist, double sharpness) { return 1.0 / (1.0 + std::exp(-sharpness * signed_dist)); }

// Smooth linear gradient plus 2-5 Gaussian blobs. Class = number of blobs - 2.
LabeledImage gen_texture(Rng& rng, std::size_t res) {
  ImageGray img(res, res, 0.0);
  const double gx = rng.uniform(-0.6, 0.6), gy = rng.uniform(-0.6, 0.6), g0 = rng.uniform(-0.3, 0.3);
  const int blobs = static_cast<int>(rng.uniform_int(2, 5));
  struct Blob {
    double cx, cy, s, amp;
  };
  std::vector<Blob> bl;
  for (int b = 0; b < blobs; ++b) {
    bl.push_back({rng.uniform(0.1, 0.9), rng.uniform(0.1, 0.9), rng.uniform(0.05, 0.2),
                  rng.uniform(0.3, 0.9) * (rng.uniform() < 0.5 ? -1.0 : 1.0)});
  }
  for (std::size_t y = 0; y < res; ++y) {
    for (std::size_t x = 0; x < res; ++x) {
      const double u = (static_cast<double>(x) + 0.5) / static_cast<double>(res);
      const double v = (static_cast<double>(y) + 0.5) / static_cast<double>(res);
      double val = g0 + gx * (2 * u - 1) + gy * (2 * v - 1);
      for (const auto& b : bl) {
        const double d2 = (u - b.cx) * (u - b.cx) + (v - b.cy) * (v - b.cy);
        val += b.amp * std::exp(-d2 / (2 * b.s * b.s));
      }
      img.at(x, y) = std::clamp(val, -1.0, 1.0);
    }
  }
  return {std::move(img), blobs - 2, 0};
}

// Dark field, two bright soft ellipses, 4-6 faint rib arcs, a central wedge,
// Gaussian noise sigma 0.03. Class = rib count - 4.
LabeledImage gen_lungs(Rng& rng, std::size_t res) {
  const double W = static_cast<double>(res), H = static_cast<double>(res);
  struct Ellipse {
    double cx, cy, a, b;
  };
  Ellipse lungs[2];
  const double xs[2] = {0.32, 0.68};
  for (int i = 0; i < 2; ++i) {
    lungs[i] = {(xs[i] + rng.uniform(-0.015, 0.015)) * W, (0.55 + rng.uniform(-0.015, 0.015)) * H,
                rng.uniform(0.10, 0.16) * W, rng.uniform(0.18, 0.26) * H};
  }
  const int ribs = static_cast<int>(rng.uniform_int(4, 6));
  const double rib_top = rng.uniform(0.30, 0.36), rib_gap = rng.uniform(0.08, 0.10);
  const double rib_bend = rng.uniform(0.10, 0.20), rib_amp = rng.uniform(0.10, 0.16);
  const double wedge_top = rng.uniform(0.25, 0.32), wedge_half = rng.uniform(0.05, 0.08);
  const double bg = rng.uniform(-0.85, -0.75), lung_level = rng.uniform(0.95, 1.15);

  ImageGray img(res, res, 0.0);
  for (std::size_t y = 0; y < res; ++y) {
    for (std::size_t x = 0; x < res; ++x) {
      const double px = static_cast<double>(x) + 0.5, py = static_cast<double>(y) + 0.5;
      double val = bg;
      for (const auto& e : lungs) {
        const double r = std::sqrt((px - e.cx) * (px - e.cx) / (e.a * e.a) + (py - e.cy) * (py - e.cy) / (e.b * e.b));
        val += lung_level * smoothstep_edge(1.0 - r, 12.0);
      }
      const double u = px / W, v = py / H;
      for (int k = 0; k < ribs; ++k) {
        const double centre = rib_top + k * rib_gap + rib_bend * (u - 0.5) * (u - 0.5);
        const double d = (v - centre) / 0.012;
        val += rib_amp * std::exp(-0.5 * d * d);
      }
      // Wedge widens linearly from its apex down to the bottom edge.
      if (v > wedge_top) {
        const double half = wedge_half * (v - wedge_top) / (1.0 - wedge_top) + 0.01;
        val += 0.9 * smoothstep_edge(half - std::abs(u - 0.5), 150.0);
      }
      val += 0.03 * rng.normal();
      img.at(x, y) = std::clamp(val, -1.0, 1.0);
    }
  }
  return {std::move(img), ribs - 4, 0};
}

}  // namespace

LabeledImage generate_one(Domain domain, std::uint64_t image_seed, std::size_t resolution) {
  if (resolution != 64 && resolution != 128 && resolution != 256) {
    throw std::invalid_argument("resolution must be 64, 128 or 256, got " + std::to_string(resolution));
  }
  Rng rng(image_seed);
  auto out = domain == Domain::BaseTextures ? gen_texture(rng, resolution) : gen_lungs(rng, resolution);
  out.seed = image_seed;
  return out;
}

std::vector<LabeledImage> generate(const GeneratorParams& params) {
  if (params.n == 0) throw std::invalid_argument("generate: n must be >= 1");
  std::vector<LabeledImage> out;
  out.reserve(params.n);
  for (std::size_t i = 0; i < params.n; ++i) {
    out.push_back(generate_one(params.domain, Rng::derive(params.seed, i), params.resolution));
  }
  return out;
}

// ----------------------------------------------------------------------- PGM

std::uint8_t quantize(double v) {
  const double q = std::round((std::clamp(v, -1.0, 1.0) + 1.0) * 127.5);
  return static_cast<std::uint8_t>(q);
}

std::string encode_pgm(const ImageGray& img, std::uint64_t seed) {
  std::ostringstream os;
  os << "P5\n# seed " << seed << "\n" << img.width << " " << img.height << "\n255\n";
  std::string out = os.str();
  out.reserve(out.size() + img.pixels.size());
  for (double v : img.pixels) out.push_back(static_cast<char>(quantize(v)));
  return out;
}

void save_pgm(const ImageGray& img, const std::filesystem::path& path, std::uint64_t seed) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw PgmError("cannot open " + path.string() + " for writing");
  const auto bytes = encode_pgm(img, seed);
  f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw PgmError("write failed: " + path.string());
}

ImageGray decode_pgm(const std::string& bytes) {
  std::size_t pos = 0;
  auto skip_space_and_comments = [&] {
    while (pos < bytes.size()) {
      if (bytes[pos] == '#') {
        while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
      } else if (std::isspace(static_cast<unsigned char>(bytes[pos]))) {
        ++pos;
      } else {
        break;
      }
    }
  };
  auto read_uint = [&](const char* what) {
    skip_space_and_comments();
    std::size_t start = pos;
    while (pos < bytes.size() && std::isdigit(static_cast<unsigned char>(bytes[pos]))) ++pos;
    if (start == pos) throw PgmError(std::string("malformed PGM header: missing ") + what);
    return static_cast<std::size_t>(std::stoull(bytes.substr(start, pos - start)));
  };
  if (bytes.size() < 2 || bytes[0] != 'P' || bytes[1] != '5') throw PgmError("malformed PGM header: not P5");
  pos = 2;
  const std::size_t w = read_uint("width");
  const std::size_t h = read_uint("height");
  const std::size_t maxval = read_uint("maxval");
  if (w == 0 || h == 0) throw PgmError("malformed PGM header: zero dimension");
  if (maxval != 255) throw PgmError("unsupported PGM maxval " + std::to_string(maxval));
  if (pos >= bytes.size() || !std::isspace(static_cast<unsigned char>(bytes[pos]))) {
    throw PgmError("malformed PGM header: no separator before payload");
  }
  ++pos;
  if (bytes.size() - pos < w * h) {
    throw PgmError("truncated PGM payload: expected " + std::to_string(w * h) + " bytes, got " +
                   std::to_string(bytes.size() - pos));
  }
  ImageGray img(w, h);
  for (std::size_t i = 0; i < w * h; ++i) img.pixels[i] = dequantize(static_cast<std::uint8_t>(bytes[pos + i]));
  return img;
}

ImageGray load_pgm(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw PgmError("cannot open " + path.string());
  std::ostringstream ss;
  ss << f.rdbuf();
  return decode_pgm(ss.str());
}

// --------------------------------------------------------------------- misc

std::vector<std::size_t> shuffled_indices(std::size_t n, std::uint64_t seed) {
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  Rng rng(seed);
  // Fisher-Yates with our own draws; std::shuffle's use of the engine is
  // implementation-defined.
  for (std::size_t i = n; i > 1; --i) {
    const auto j = static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(i - 1)));
    std::swap(idx[i - 1], idx[j]);
  }
  return idx;
}

void check_split_fractions(double train_fraction, double eval_fraction) {
  if (train_fraction < 0 || eval_fraction < 0 || std::abs(train_fraction + eval_fraction - 1.0) > 1e-9) {
    throw std::invalid_argument("split: fractions must be non-negative and sum to 1");
  }
}

double symmetry_score(const ImageGray& img) {
  const double W = static_cast<double>(img.width), H = static_cast<double>(img.height);
  double s = 0.0;
  for (std::size_t y = 0; y < img.height; ++y) {
    for (std::size_t x = 0; x < img.width / 2; ++x) {
      const double px = static_cast<double>(x) + 0.5, py = static_cast<double>(y) + 0.5;
      const double dx = (px - 0.32 * W) / (0.13 * W), dy = (py - 0.55 * H) / (0.22 * H);
      if (dx * dx + dy * dy > 1.0) continue;
      const double d = img.at(x, y) - img.at(img.width - 1 - x, y);
      s += d * d;
    }
  }
  return std::sqrt(s);
}

Tensor to_batch(const std::vector<ImageGray>& images) {
  std::vector<std::size_t> idx(images.size());
  std::iota(idx.begin(), idx.end(), 0);
  return to_batch(images, idx);
}

Tensor to_batch(const std::vector<ImageGray>& images, const std::vector<std::size_t>& indices) {
  if (indices.empty()) throw std::invalid_argument("to_batch: empty selection");
  const auto& first = images.at(indices[0]);
  const std::size_t hw = first.width * first.height;
  std::vector<double> data;
  data.reserve(indices.size() * hw);
  for (auto i : indices) {
    const auto& im = images.at(i);
    if (im.width != first.width || im.height != first.height) {
      throw ShapeError("to_batch", {first.height, first.width}, {im.height, im.width});
    }
    data.insert(data.end(), im.pixels.begin(), im.pixels.end());
  }
  return Tensor({indices.size(), 1, first.height, first.width}, std::move(data));
}

ImageGray image_from_batch(const Tensor& batch, std::size_t index) {
  if (batch.rank() != 4 || batch.dim(1) != 1) {
    throw std::invalid_argument("image_from_batch: expected N×1×H×W, got " + shape_str(batch.shape()));
  }
  const std::size_t h = batch.dim(2), w = batch.dim(3);
  ImageGray img(w, h);
  const auto src = batch.data().subspan(index * h * w, h * w);
  std::copy(src.begin(), src.end(), img.pixels.begin());
  return img;
}

std::vector<ImageGray> images_from_batch(const Tensor& batch) {
  std::vector<ImageGray> out;
  for (std::size_t i = 0; i < batch.dim(0); ++i) out.push_back(image_from_batch(batch, i));
  return out;
}

std::vector<ImageGray> images_of(const std::vector<LabeledImage>& items) {
  std::vector<ImageGray> out;
  out.reserve(items.size());
  for (const auto& it : items) out.push_back(it.image);
  return out;
}

ImageGray make_grid(const std::vector<ImageGray>& images, std::size_t columns) {
  if (images.empty() || columns == 0) throw std::invalid_argument("make_grid: nothing to tile");
  const std::size_t w = images[0].width, h = images[0].height;
  const std::size_t cols = std::min(columns, images.size());
  const std::size_t rows = (images.size() + cols - 1) / cols;
  ImageGray grid(cols * (w + 1) - 1, rows * (h + 1) - 1, -1.0);
  for (std::size_t i = 0; i < images.size(); ++i) {
    const std::size_t ox = (i % cols) * (w + 1), oy = (i / cols) * (h + 1);
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t x = 0; x < w; ++x) grid.at(ox + x, oy + y) = images[i].at(x, y);
  }
  return grid;
}

}  // namespace litediff
