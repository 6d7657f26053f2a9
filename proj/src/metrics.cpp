#include "arra/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <iostream>

#include <Eigen/Dense>

#include "arra/error.hpp"

namespace arra::metrics {

namespace {

Eigen::MatrixXd to_matrix(const num::Tensor& t) {
  const int64_t n = t.dim(0), d = t.dim(1);
  Eigen::MatrixXd m(n, d);
  auto v = t.data();
  for (int64_t i = 0; i < n; ++i)
    for (int64_t j = 0; j < d; ++j) m(i, j) = v[static_cast<size_t>(i * d + j)];
  return m;
}

Eigen::MatrixXd covariance(const Eigen::MatrixXd& x) {
  const Eigen::RowVectorXd mean = x.colwise().mean();
  const Eigen::MatrixXd centered = x.rowwise() - mean;
  return centered.transpose() * centered / static_cast<double>(x.rows() - 1);
}

// eigenvalue clamp shared by both decompositions in frechet_distance
Eigen::VectorXd clamped_eigenvalues(const Eigen::VectorXd& ev, const char* what) {
  Eigen::VectorXd out = ev;
  for (Eigen::Index i = 0; i < out.size(); ++i) {
    if (out[i] < -1e-6)
      throw NumericalError(std::string("frechet_distance: ") + what + " has eigenvalue " + std::to_string(out[i]));
    out[i] = std::max(out[i], 0.0);
  }
  return out;
}

Eigen::MatrixXd sqrt_psd(const Eigen::MatrixXd& s, const char* what) {
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(s);
  const Eigen::VectorXd ev = clamped_eigenvalues(es.eigenvalues(), what);
  return es.eigenvectors() * ev.cwiseSqrt().asDiagonal() * es.eigenvectors().transpose();
}

}  // namespace

void FeatureSet::validate() const {
  if (features.shape().size() != 2) throw ShapeError("feature set must be an n x D matrix");
  const int64_t n = features.dim(0), d = features.dim(1);
  if (n < 2) throw ConfigError("feature set '" + source + "' needs at least 2 rows, got " + std::to_string(n));
  for (double v : features.data())
    if (!std::isfinite(v)) throw NumericalError("feature set '" + source + "' holds non-finite values");
  if (n < d + 1)
    std::cerr << "warning: feature set '" << source << "' fits a " << d << "-dim Gaussian from only " << n
              << " rows\n";
}

FeatureSet features_for(const std::vector<num::Tensor>& images, const found::FoundationEncoder& encoder,
                        std::string source, found::AggMode mode) {
  if (images.empty()) throw ConfigError("features_for: no images");
  std::vector<num::Tensor> rows;
  rows.reserve(images.size());
  for (const num::Tensor& img : images)
    rows.push_back(found::aggregate(encoder.encode_image_patches(img), mode, encoder.config().kind));
  return {num::concat_rows(rows), std::move(source)};
}

double frechet_distance(const FeatureSet& a, const FeatureSet& b) {
  a.validate();
  b.validate();
  if (a.features.dim(1) != b.features.dim(1))
    throw ShapeError("frechet_distance: feature widths " + std::to_string(a.features.dim(1)) + " and " +
                     std::to_string(b.features.dim(1)) + " differ");

  const Eigen::MatrixXd fa = to_matrix(a.features), fb = to_matrix(b.features);
  const Eigen::VectorXd mu_a = fa.colwise().mean(), mu_b = fb.colwise().mean();
  const Eigen::MatrixXd cov_a = covariance(fa), cov_b = covariance(fb);

  const Eigen::MatrixXd root_a = sqrt_psd(cov_a, "covariance");
  Eigen::MatrixXd prod = root_a * cov_b * root_a;
  prod = 0.5 * (prod + prod.transpose().eval());
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(prod);
  const Eigen::VectorXd ev = clamped_eigenvalues(es.eigenvalues(), "covariance product");

  const double d = (mu_a - mu_b).squaredNorm() + cov_a.trace() + cov_b.trace() - 2.0 * ev.cwiseSqrt().sum();
  return std::max(d, 0.0);
}

double clip_score(const std::vector<num::Tensor>& images, const std::vector<std::string>& captions,
                  const found::FoundationEncoder& encoder) {
  if (encoder.config().kind != found::EncoderKind::cross_modal)
    throw ConfigError("clip_score needs the cross-modal encoder");
  if (images.size() != captions.size())
    throw ShapeError("clip_score: " + std::to_string(images.size()) + " images vs " +
                     std::to_string(captions.size()) + " captions");
  if (images.empty()) throw ConfigError("clip_score: no pairs");

  double total = 0.0;
  for (size_t i = 0; i < images.size(); ++i) {
    const num::Tensor img = found::aggregate(encoder.encode_image_patches(images[i]), found::AggMode::cls,
                                             encoder.config().kind);
    const num::Tensor txt = encoder.encode_text_global(captions[i]);
    double dot = 0.0;
    for (int64_t k = 0; k < img.dim(1); ++k)
      dot += img.data()[static_cast<size_t>(k)] * txt.data()[static_cast<size_t>(k)];
    total += dot;
  }
  return total / static_cast<double>(images.size());
}

namespace {

constexpr int kWindow = 7;
constexpr int kRadius = kWindow / 2;
constexpr double kC1 = 0.01 * 0.01;
constexpr double kC2 = 0.03 * 0.03;

const std::array<double, kWindow * kWindow>& gaussian_window() {
  static const auto w = [] {
    std::array<double, kWindow * kWindow> out{};
    double sum = 0.0;
    for (int y = 0; y < kWindow; ++y)
      for (int x = 0; x < kWindow; ++x) {
        const double dy = y - kRadius, dx = x - kRadius;
        out[static_cast<size_t>(y * kWindow + x)] = std::exp(-(dy * dy + dx * dx) / (2.0 * 1.5 * 1.5));
        sum += out[static_cast<size_t>(y * kWindow + x)];
      }
    for (double& v : out) v /= sum;
    return out;
  }();
  return w;
}

int reflect(int i, int n) {
  if (i < 0) return -1 - i;
  if (i >= n) return 2 * n - 1 - i;
  return i;
}

using Plane = std::vector<double>;  // side x side, row-major

Plane blur(const Plane& img, int side) {
  const auto& w = gaussian_window();
  Plane out(img.size());
  for (int y = 0; y < side; ++y)
    for (int x = 0; x < side; ++x) {
      double acc = 0.0;
      for (int dy = -kRadius; dy <= kRadius; ++dy)
        for (int dx = -kRadius; dx <= kRadius; ++dx)
          acc += w[static_cast<size_t>((dy + kRadius) * kWindow + dx + kRadius)] *
                 img[static_cast<size_t>(reflect(y + dy, side) * side + reflect(x + dx, side))];
      out[static_cast<size_t>(y * side + x)] = acc;
    }
  return out;
}

Plane downsample(const Plane& img, int side) {
  const int half = side / 2;
  Plane out(static_cast<size_t>(half) * half);
  for (int y = 0; y < half; ++y)
    for (int x = 0; x < half; ++x)
      out[static_cast<size_t>(y * half + x)] =
          0.25 * (img[static_cast<size_t>(2 * y * side + 2 * x)] + img[static_cast<size_t>(2 * y * side + 2 * x + 1)] +
                  img[static_cast<size_t>((2 * y + 1) * side + 2 * x)] +
                  img[static_cast<size_t>((2 * y + 1) * side + 2 * x + 1)]);
  return out;
}

// means of the luminance-free contrast/structure term and the full SSIM term
std::pair<double, double> ssim_terms(const Plane& a, const Plane& b, int side) {
  Plane aa(a.size()), bb(a.size()), ab(a.size());
  for (size_t i = 0; i < a.size(); ++i) {
    aa[i] = a[i] * a[i];
    bb[i] = b[i] * b[i];
    ab[i] = a[i] * b[i];
  }
  const Plane mu_a = blur(a, side), mu_b = blur(b, side);
  const Plane raw_aa = blur(aa, side), raw_bb = blur(bb, side), raw_ab = blur(ab, side);
  double cs_sum = 0.0, ssim_sum = 0.0;
  for (size_t i = 0; i < a.size(); ++i) {
    const double va = raw_aa[i] - mu_a[i] * mu_a[i];
    const double vb = raw_bb[i] - mu_b[i] * mu_b[i];
    const double vab = raw_ab[i] - mu_a[i] * mu_b[i];
    const double cs = (2.0 * vab + kC2) / (va + vb + kC2);
    const double lum = (2.0 * mu_a[i] * mu_b[i] + kC1) / (mu_a[i] * mu_a[i] + mu_b[i] * mu_b[i] + kC1);
    cs_sum += cs;
    ssim_sum += lum * cs;
  }
  const double n = static_cast<double>(a.size());
  return {cs_sum / n, ssim_sum / n};
}

}  // namespace

double ms_ssim(const num::Tensor& a, const num::Tensor& b) {
  if (a.shape() != b.shape()) throw ShapeError("ms_ssim: image shapes differ");
  if (a.shape().size() != 3 || a.dim(2) != 3 || a.dim(0) != a.dim(1))
    throw ShapeError("ms_ssim: expected side x side x 3 images");
  const int side = static_cast<int>(a.dim(0));
  if (side < 16) throw ConfigError("ms_ssim: side must be at least 16, got " + std::to_string(side));

  // canonical weights for the 3 kept scales, renormalized
  std::array<double, 3> weights{0.0448, 0.2856, 0.3001};
  const double wsum = weights[0] + weights[1] + weights[2];
  for (double& w : weights) w /= wsum;

  double result = 0.0;
  for (int ch = 0; ch < 3; ++ch) {
    Plane pa(static_cast<size_t>(side) * side), pb(pa.size());
    for (size_t i = 0; i < pa.size(); ++i) {
      pa[i] = a.data()[i * 3 + static_cast<size_t>(ch)];
      pb[i] = b.data()[i * 3 + static_cast<size_t>(ch)];
    }
    double channel = 1.0;
    int s = side;
    for (int scale = 0; scale < 3; ++scale) {
      const auto [cs, ssim] = ssim_terms(pa, pb, s);
      const double term = std::max(scale == 2 ? ssim : cs, 0.0);
      channel *= std::pow(term, weights[static_cast<size_t>(scale)]);
      if (scale < 2) {
        pa = downsample(pa, s);
        pb = downsample(pb, s);
        s /= 2;
      }
    }
    result += channel;
  }
  return result / 3.0;
}

namespace {

// binary masks; zero-variance inputs report no correlation
double mask_correlation(const std::vector<char>& m, const std::vector<char>& t) {
  const double n = static_cast<double>(m.size());
  double sm = 0.0, st = 0.0, smt = 0.0;
  for (size_t i = 0; i < m.size(); ++i) {
    sm += m[i];
    st += t[i];
    smt += m[i] && t[i] ? 1.0 : 0.0;
  }
  const double var_m = sm - sm * sm / n;
  const double var_t = st - st * st / n;
  if (var_m < 1e-12 || var_t < 1e-12) return 0.0;
  return (smt - sm * st / n) / std::sqrt(var_m * var_t);
}

double color_dist2(const double* rgb, const corpus::Rgb& c) {
  const double d0 = rgb[0] - c[0], d1 = rgb[1] - c[1], d2 = rgb[2] - c[2];
  return d0 * d0 + d1 * d1 + d2 * d2;
}

// 0..5 palette index, 6 background
int nearest_color(const double* rgb, const corpus::Palette& palette) {
  int cls = 6;
  double best = color_dist2(rgb, corpus::kBackground);
  for (int c = 0; c < 6; ++c)
    if (const double d = color_dist2(rgb, palette[static_cast<size_t>(c)]); d < best) {
      best = d;
      cls = c;
    }
  return cls;
}

std::array<std::vector<char>, 4> shape_templates(int canvas) {
  const int unit = canvas / 32;
  const int cell_px = 10 * unit;
  std::array<std::vector<char>, 4> out;
  for (int s = 0; s < 4; ++s) {
    corpus::SceneSpec spec;
    spec.objects.push_back({s, 0, 0});
    spec.canvas = canvas;
    const num::Tensor img = corpus::render(spec);
    std::vector<char> mask(static_cast<size_t>(cell_px) * cell_px);
    for (int y = 0; y < cell_px; ++y)
      for (int x = 0; x < cell_px; ++x) {
        const size_t px = (static_cast<size_t>(unit + y) * canvas + unit + x) * 3;
        mask[static_cast<size_t>(y * cell_px + x)] = nearest_color(&img.data()[px], corpus::kDefaultPalette) != 6;
      }
    out[static_cast<size_t>(s)] = std::move(mask);
  }
  return out;
}

constexpr double kConfidence = 0.6;

}  // namespace

corpus::SceneSpec detect_attributes(const num::Tensor& image, const corpus::Palette& palette) {
  if (image.shape().size() != 3 || image.dim(2) != 3 || image.dim(0) != image.dim(1))
    throw ShapeError("detect_attributes: expected side x side x 3 images");
  const int canvas = static_cast<int>(image.dim(0));
  if (canvas < 32 || canvas % 32 != 0)
    throw ConfigError("detect_attributes: canvas side must be a multiple of 32, got " + std::to_string(canvas));
  const int unit = canvas / 32;
  const int cell_px = 10 * unit;
  const auto templates = shape_templates(canvas);

  corpus::SceneSpec spec;
  spec.canvas = canvas;
  for (int cell = 0; cell < 9; ++cell) {
    const int oy = unit * (1 + 10 * (cell / 3)), ox = unit * (1 + 10 * (cell % 3));

    // nearest-color class per pixel: 0..5 palette, 6 background
    std::vector<int> pixel_class(static_cast<size_t>(cell_px) * cell_px);
    std::array<int, 6> count{};
    for (int y = 0; y < cell_px; ++y)
      for (int x = 0; x < cell_px; ++x) {
        const size_t px = (static_cast<size_t>(oy + y) * canvas + ox + x) * 3;
        const int cls = nearest_color(&image.data()[px], palette);
        pixel_class[static_cast<size_t>(y * cell_px + x)] = cls;
        if (cls < 6) ++count[static_cast<size_t>(cls)];
      }

    const int color =
        static_cast<int>(std::max_element(count.begin(), count.end()) - count.begin());
    if (count[static_cast<size_t>(color)] == 0) continue;

    std::vector<char> mask(pixel_class.size());
    for (size_t i = 0; i < mask.size(); ++i) mask[i] = pixel_class[i] == color;
    int shape = 0;
    double confidence = -1.0;
    for (int s = 0; s < 4; ++s) {
      const double corr = mask_correlation(mask, templates[static_cast<size_t>(s)]);
      if (corr > confidence) {
        confidence = corr;
        shape = s;
      }
    }
    if (confidence < kConfidence) continue;
    spec.objects.push_back({shape, color, cell});
  }
  return spec;
}

nlohmann::json AttributeAccuracy::to_json() const {
  return {{"object_recall", object_recall},
          {"position_accuracy", position_accuracy},
          {"color_accuracy", color_accuracy},
          {"exact_match", exact_match}};
}

AttributeAccuracy attribute_accuracy(const std::vector<num::Tensor>& images, const std::vector<std::string>& captions,
                                     const corpus::Palette& palette) {
  if (images.size() != captions.size())
    throw ShapeError("attribute_accuracy: " + std::to_string(images.size()) + " images vs " +
                     std::to_string(captions.size()) + " captions");
  if (images.empty()) throw ConfigError("attribute_accuracy: no samples");

  double objects = 0.0, shape_hits = 0.0, cell_hits = 0.0, color_hits = 0.0, exact = 0.0;
  for (size_t i = 0; i < images.size(); ++i) {
    const corpus::SceneSpec truth = corpus::parse_caption(captions[i], static_cast<int>(images[i].dim(0)));
    const corpus::SceneSpec seen = detect_attributes(images[i], palette);
    for (const corpus::ObjectSpec& want : truth.objects) {
      objects += 1.0;
      const auto at = std::find_if(seen.objects.begin(), seen.objects.end(),
                                   [&](const corpus::ObjectSpec& o) { return o.cell == want.cell; });
      if (at == seen.objects.end()) continue;
      cell_hits += 1.0;
      if (at->shape == want.shape) shape_hits += 1.0;
      if (at->color == want.color) color_hits += 1.0;
    }
    if (seen.objects == truth.objects) exact += 1.0;
  }
  const double n = static_cast<double>(images.size());
  return {shape_hits / objects, cell_hits / objects, color_hits / objects, exact / n};
}

}  // namespace arra::metrics
