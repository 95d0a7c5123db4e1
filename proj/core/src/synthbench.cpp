#include "gendf/synthbench.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <numeric>
#include <sstream>

#include "gendf/rng.hpp"
#include "io_util.hpp"

namespace gendf {

namespace {

constexpr std::size_t kFieldGrid = 4;
constexpr double kFieldMean = 0.5;
constexpr double kFieldStd = 0.015;
constexpr std::uint64_t kDonorSeedOffset = 1000000;

double clamp01(double v) { return std::min(std::max(v, 0.0), 1.0); }

void check_size(std::size_t height, std::size_t width) {
  if (height < 16 || width < 16) {
    throw ConfigError("synthetic images must be at least 16x16");
  }
}

// Corner-aligned bilinear interpolation of a kFieldGrid^2 field.
double bilinear(const double* field, double v, double u) {
  const std::size_t y0 = static_cast<std::size_t>(v);
  const std::size_t x0 = static_cast<std::size_t>(u);
  const std::size_t y1 = std::min(y0 + 1, kFieldGrid - 1);
  const std::size_t x1 = std::min(x0 + 1, kFieldGrid - 1);
  const double fy = v - static_cast<double>(y0);
  const double fx = u - static_cast<double>(x0);
  const double top = field[y0 * kFieldGrid + x0] * (1.0 - fx) + field[y0 * kFieldGrid + x1] * fx;
  const double bot = field[y1 * kFieldGrid + x0] * (1.0 - fx) + field[y1 * kFieldGrid + x1] * fx;
  return top * (1.0 - fy) + bot * fy;
}

}  // namespace

SyntheticSample generate_real(std::uint64_t seed, std::size_t height, std::size_t width) {
  check_size(height, width);
  Rng rng(seed);
  std::vector<double> pixels(3 * height * width);
  const double vy = static_cast<double>(kFieldGrid - 1) / static_cast<double>(height - 1);
  const double vx = static_cast<double>(kFieldGrid - 1) / static_cast<double>(width - 1);
  for (std::size_t c = 0; c < 3; ++c) {
    double field[kFieldGrid * kFieldGrid];
    for (double& f : field) f = rng.normal(kFieldMean, kFieldStd);
    struct Wave {
      double fx, fy, phase, amp;
    } waves[2];
    for (Wave& w : waves) {
      w.fx = rng.uniform(0.5, 1.5);
      w.fy = rng.uniform(0.5, 1.5);
      w.phase = rng.uniform(0.0, 6.283185307179586);
      w.amp = rng.uniform(0.002, 0.01);
    }
    double* plane = pixels.data() + c * height * width;
    for (std::size_t y = 0; y < height; ++y) {
      for (std::size_t x = 0; x < width; ++x) {
        double v = bilinear(field, static_cast<double>(y) * vy, static_cast<double>(x) * vx);
        for (const Wave& w : waves) {
          v += w.amp * std::sin(6.283185307179586 *
                                    (w.fx * static_cast<double>(x) / static_cast<double>(width) +
                                     w.fy * static_cast<double>(y) / static_cast<double>(height)) +
                                w.phase);
        }
        plane[y * width + x] = clamp01(v);
      }
    }
  }
  SyntheticSample s;
  s.image = Tensor::from_values({3, height, width}, std::move(pixels));
  s.label = 0;
  s.seed = seed;
  return s;
}

SyntheticSample generate_fake(std::uint64_t seed, std::size_t height, std::size_t width) {
  check_size(height, width);
  SyntheticSample base = generate_real(seed, height, width);
  SyntheticSample donor = generate_real(seed + kDonorSeedOffset, height, width);

  Rng rng(derive_seed(seed, 0x51ce));
  const std::size_t lo_h = std::max<std::size_t>(2, height / 4);
  const std::size_t hi_h = height / 2;
  const std::size_t lo_w = std::max<std::size_t>(2, width / 4);
  const std::size_t hi_w = width / 2;
  ForgeryBox box;
  box.height = lo_h + rng.uniform_index(hi_h - lo_h + 1);
  box.width = lo_w + rng.uniform_index(hi_w - lo_w + 1);
  // Keep a 1-pixel margin so the blend ring stays inside the image.
  box.y0 = 1 + rng.uniform_index(height - box.height - 1);
  box.x0 = 1 + rng.uniform_index(width - box.width - 1);

  double gain[3], bias[3];
  for (std::size_t c = 0; c < 3; ++c) {
    gain[c] = rng.uniform(0.85, 1.15);
    bias[c] = rng.uniform(-0.08, 0.08);
  }

  std::vector<double> pixels(base.image.values().begin(), base.image.values().end());
  const auto dv = donor.image.values();
  for (std::size_t c = 0; c < 3; ++c) {
    for (std::size_t y = box.y0 - 1; y <= box.y0 + box.height; ++y) {
      for (std::size_t x = box.x0 - 1; x <= box.x0 + box.width; ++x) {
        const bool inside = y >= box.y0 && y < box.y0 + box.height && x >= box.x0 &&
                            x < box.x0 + box.width;
        const std::size_t idx = (c * height + y) * width + x;
        const double shifted = clamp01(dv[idx] * gain[c] + bias[c]);
        pixels[idx] = inside ? shifted : 0.5 * (pixels[idx] + shifted);
      }
    }
  }

  SyntheticSample s;
  s.image = Tensor::from_values({3, height, width}, std::move(pixels));
  s.label = 1;
  s.seed = seed;
  s.forgery_box = box;
  return s;
}

// ---------------------------------------------------------------------------
// perturbations
// ---------------------------------------------------------------------------

namespace {

const char* kind_name(PerturbationKind k) {
  switch (k) {
    case PerturbationKind::Contrast:
      return "contrast";
    case PerturbationKind::Saturation:
      return "saturation";
    case PerturbationKind::Pixelate:
      return "pixelate";
    case PerturbationKind::Blur:
      return "blur";
  }
  return "?";
}

std::string format_severity(double severity) {
  char buf[32];
  auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), severity);
  return std::string(buf, ptr);
}

// Reflect-101 indexing; the edge pixel is not repeated.
std::size_t reflect_index(std::ptrdiff_t i, std::size_t n) {
  if (i < 0) i = -i;
  if (i >= static_cast<std::ptrdiff_t>(n)) i = 2 * static_cast<std::ptrdiff_t>(n) - 2 - i;
  return static_cast<std::size_t>(i);
}

}  // namespace

std::string PerturbationSpec::str() const {
  return std::string(kind_name(kind)) + ":" + format_severity(severity);
}

PerturbationSpec PerturbationSpec::parse(const std::string& text) {
  const auto colon = text.find(':');
  const std::string name = text.substr(0, colon);
  PerturbationSpec spec;
  if (name == "contrast") {
    spec.kind = PerturbationKind::Contrast;
    spec.severity = 1.5;
  } else if (name == "saturation") {
    spec.kind = PerturbationKind::Saturation;
    spec.severity = 2.0;
  } else if (name == "pixelate") {
    spec.kind = PerturbationKind::Pixelate;
    spec.severity = 2.0;
  } else if (name == "blur") {
    spec.kind = PerturbationKind::Blur;
    spec.severity = 1.0;
  } else {
    throw ConfigError("unknown perturbation '" + name + "'");
  }
  if (colon != std::string::npos) {
    const std::string sev = text.substr(colon + 1);
    try {
      spec.severity = std::stod(sev);
    } catch (const std::exception&) {
      throw ConfigError("bad perturbation severity '" + sev + "'");
    }
  }
  return spec;
}

Tensor perturb(const Tensor& image, const PerturbationSpec& spec) {
  if (image.rank() != 3) {
    throw ShapeError("perturb: expected [c x h x w], got " + shape_str(image.shape()));
  }
  const std::size_t channels = image.shape()[0], height = image.shape()[1],
                    width = image.shape()[2];
  const auto src = image.values();
  std::vector<double> out(src.begin(), src.end());

  switch (spec.kind) {
    case PerturbationKind::Contrast: {
      if (spec.severity <= 0.0) throw ConfigError("contrast severity must be positive");
      if (spec.severity == 1.0) break;  // bit-exact identity
      for (double& v : out) v = clamp01((v - 0.5) * spec.severity + 0.5);
      break;
    }
    case PerturbationKind::Saturation: {
      if (spec.severity < 0.0) throw ConfigError("saturation severity must be nonnegative");
      if (spec.severity == 1.0) break;
      if (channels != 3) throw ShapeError("saturation requires a 3-channel image");
      const std::size_t plane = height * width;
      for (std::size_t p = 0; p < plane; ++p) {
        const double luma = 0.299 * src[p] + 0.587 * src[plane + p] + 0.114 * src[2 * plane + p];
        for (std::size_t c = 0; c < 3; ++c) {
          out[c * plane + p] = clamp01(luma + spec.severity * (src[c * plane + p] - luma));
        }
      }
      break;
    }
    case PerturbationKind::Pixelate: {
      const long long factor = std::llround(spec.severity);
      if (factor < 1) throw ConfigError("pixelate severity must round to at least 1");
      if (factor == 1) break;
      const std::size_t f = static_cast<std::size_t>(factor);
      // Pad right/bottom by edge replication to a multiple of f, average-pool,
      // nearest-neighbor upsample, crop back to h x w.
      const std::size_t hp = (height + f - 1) / f;
      const std::size_t wp = (width + f - 1) / f;
      for (std::size_t c = 0; c < channels; ++c) {
        const double* plane = src.data() + c * height * width;
        std::vector<double> pooled(hp * wp, 0.0);
        for (std::size_t by = 0; by < hp; ++by) {
          for (std::size_t bx = 0; bx < wp; ++bx) {
            double acc = 0.0;
            for (std::size_t dy = 0; dy < f; ++dy) {
              const std::size_t y = std::min(by * f + dy, height - 1);
              for (std::size_t dx = 0; dx < f; ++dx) {
                const std::size_t x = std::min(bx * f + dx, width - 1);
                acc += plane[y * width + x];
              }
            }
            pooled[by * wp + bx] = acc / static_cast<double>(f * f);
          }
        }
        double* dplane = out.data() + c * height * width;
        for (std::size_t y = 0; y < height; ++y)
          for (std::size_t x = 0; x < width; ++x)
            dplane[y * width + x] = pooled[(y / f) * wp + (x / f)];
      }
      break;
    }
    case PerturbationKind::Blur: {
      if (spec.severity < 0.0) throw ConfigError("blur severity must be nonnegative");
      if (spec.severity == 0.0) break;  // zero-blur limit: identity
      const double sigma = spec.severity;
      std::size_t ksize = static_cast<std::size_t>(std::ceil(6.0 * sigma));
      if (ksize % 2 == 0) ++ksize;
      const std::size_t radius = ksize / 2;
      if (radius >= height || radius >= width) {
        throw ConfigError("blur kernel larger than the image");
      }
      std::vector<double> kernel(ksize);
      double total = 0.0;
      for (std::size_t i = 0; i < ksize; ++i) {
        const double t = static_cast<double>(i) - static_cast<double>(radius);
        kernel[i] = std::exp(-0.5 * t * t / (sigma * sigma));
        total += kernel[i];
      }
      for (double& k : kernel) k /= total;
      std::vector<double> tmp(height * width);
      for (std::size_t c = 0; c < channels; ++c) {
        const double* plane = src.data() + c * height * width;
        for (std::size_t y = 0; y < height; ++y) {  // horizontal pass
          for (std::size_t x = 0; x < width; ++x) {
            double acc = 0.0;
            for (std::size_t i = 0; i < ksize; ++i) {
              const std::size_t xi = reflect_index(
                  static_cast<std::ptrdiff_t>(x + i) - static_cast<std::ptrdiff_t>(radius),
                  width);
              acc += kernel[i] * plane[y * width + xi];
            }
            tmp[y * width + x] = acc;
          }
        }
        double* dplane = out.data() + c * height * width;
        for (std::size_t y = 0; y < height; ++y) {  // vertical pass
          for (std::size_t x = 0; x < width; ++x) {
            double acc = 0.0;
            for (std::size_t i = 0; i < ksize; ++i) {
              const std::size_t yi = reflect_index(
                  static_cast<std::ptrdiff_t>(y + i) - static_cast<std::ptrdiff_t>(radius),
                  height);
              acc += kernel[i] * tmp[yi * width + x];
            }
            dplane[y * width + x] = clamp01(acc);
          }
        }
      }
      break;
    }
  }
  return Tensor::from_values(image.shape(), std::move(out));
}

// ---------------------------------------------------------------------------
// metrics
// ---------------------------------------------------------------------------

namespace {

void check_scores(const ScoreSet& s, const char* op, bool need_both_classes) {
  if (s.scores.size() != s.labels.size()) {
    throw ShapeError(std::string(op) + ": scores and labels differ in length");
  }
  if (s.scores.empty()) throw ConfigError(std::string(op) + ": empty score set");
  for (double v : s.scores) {
    if (!std::isfinite(v)) throw NumericError(std::string(op) + ": non-finite score");
  }
  if (need_both_classes) {
    const bool has_real = std::find(s.labels.begin(), s.labels.end(), 0) != s.labels.end();
    const bool has_fake = std::find(s.labels.begin(), s.labels.end(), 1) != s.labels.end();
    if (!has_real || !has_fake) {
      throw ConfigError(std::string(op) + ": both classes must be present");
    }
  }
}

}  // namespace

double auc(const ScoreSet& s) {
  check_scores(s, "auc", true);
  const std::size_t n = s.scores.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(),
            [&](std::size_t a, std::size_t b) { return s.scores[a] < s.scores[b]; });
  // Average ranks over tie groups make the rank-sum formula exactly the
  // all-pairs count with ties worth 0.5.
  std::vector<double> rank(n);
  std::size_t i = 0;
  while (i < n) {
    std::size_t j = i;
    while (j + 1 < n && s.scores[order[j + 1]] == s.scores[order[i]]) ++j;
    const double avg = 0.5 * static_cast<double>(i + j) + 1.0;
    for (std::size_t k = i; k <= j; ++k) rank[order[k]] = avg;
    i = j + 1;
  }
  double fake_rank_sum = 0.0;
  std::size_t n_fake = 0;
  for (std::size_t k = 0; k < n; ++k) {
    if (s.labels[k] == 1) {
      fake_rank_sum += rank[k];
      ++n_fake;
    }
  }
  const std::size_t n_real = n - n_fake;
  const double u = fake_rank_sum - 0.5 * static_cast<double>(n_fake) *
                                       static_cast<double>(n_fake + 1);
  return u / (static_cast<double>(n_fake) * static_cast<double>(n_real));
}

double eer(const ScoreSet& s) {
  check_scores(s, "eer", true);
  std::vector<double> reals, fakes;
  for (std::size_t i = 0; i < s.scores.size(); ++i) {
    (s.labels[i] == 1 ? fakes : reals).push_back(s.scores[i]);
  }
  std::sort(reals.begin(), reals.end());
  std::sort(fakes.begin(), fakes.end());
  std::vector<double> thresholds(s.scores);
  std::sort(thresholds.begin(), thresholds.end());
  thresholds.erase(std::unique(thresholds.begin(), thresholds.end()), thresholds.end());

  double best_gap = std::numeric_limits<double>::infinity();
  double best_eer = 0.0;
  for (double t : thresholds) {  // ascending: ties resolve to the lower threshold
    const auto above_real = reals.end() - std::upper_bound(reals.begin(), reals.end(), t);
    const auto below_fake = std::upper_bound(fakes.begin(), fakes.end(), t) - fakes.begin();
    const double fpr = static_cast<double>(above_real) / static_cast<double>(reals.size());
    const double fnr = static_cast<double>(below_fake) / static_cast<double>(fakes.size());
    const double gap = std::abs(fpr - fnr);
    if (gap < best_gap) {
      best_gap = gap;
      best_eer = 0.5 * (fpr + fnr);
    }
  }
  return best_eer;
}

double accuracy(const ScoreSet& s, double threshold) {
  check_scores(s, "accuracy", false);
  std::size_t correct = 0;
  for (std::size_t i = 0; i < s.scores.size(); ++i) {
    const bool predicted_fake = s.scores[i] > threshold;
    if (predicted_fake == (s.labels[i] == 1)) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(s.scores.size());
}

// ---------------------------------------------------------------------------
// dataset
// ---------------------------------------------------------------------------

Dataset make_dataset(std::uint64_t seed_base, std::size_t count, std::size_t height,
                     std::size_t width) {
  Dataset ds;
  ds.height = height;
  ds.width = width;
  ds.samples.reserve(count);
  for (std::size_t i = 0; i < count; ++i) {
    const std::uint64_t seed = seed_base + i;
    ds.samples.push_back(i % 2 == 0 ? generate_real(seed, height, width)
                                    : generate_fake(seed, height, width));
  }
  return ds;
}

std::string serialize_dataset(const Dataset& ds) {
  std::string out;
  io::write_pod<std::uint32_t>(out, static_cast<std::uint32_t>(ds.samples.size()));
  io::write_pod<std::uint32_t>(out, static_cast<std::uint32_t>(ds.height));
  io::write_pod<std::uint32_t>(out, static_cast<std::uint32_t>(ds.width));
  for (const SyntheticSample& s : ds.samples) {
    io::write_pod<std::uint8_t>(out, static_cast<std::uint8_t>(s.label));
    io::write_pod<std::uint64_t>(out, s.seed);
    for (double v : s.image.values()) io::write_pod<double>(out, v);
  }
  return out;
}

void save_dataset(const Dataset& ds, const std::string& path) {
  io::write_file(path, serialize_dataset(ds));
}

Dataset load_dataset(const std::string& path) {
  const std::string data = io::read_file(path);
  std::size_t off = 0;
  Dataset ds;
  const auto count = io::read_pod<std::uint32_t>(data, off);
  ds.height = io::read_pod<std::uint32_t>(data, off);
  ds.width = io::read_pod<std::uint32_t>(data, off);
  const std::size_t pixels = 3 * ds.height * ds.width;
  ds.samples.reserve(count);
  for (std::uint32_t i = 0; i < count; ++i) {
    SyntheticSample s;
    s.label = io::read_pod<std::uint8_t>(data, off);
    s.seed = io::read_pod<std::uint64_t>(data, off);
    std::vector<double> v(pixels);
    for (double& x : v) x = io::read_pod<double>(data, off);
    s.image = Tensor::from_values({3, ds.height, ds.width}, std::move(v));
    // The forgery box is generator metadata and is not persisted.
    ds.samples.push_back(std::move(s));
  }
  if (off != data.size()) throw IoError("trailing bytes in dataset file " + path);
  return ds;
}

std::uint64_t dataset_digest(const Dataset& ds) {
  const std::string bytes = serialize_dataset(ds);
  return fnv1a64(bytes.data(), bytes.size());
}

void write_manifest(const Dataset& ds, const std::string& path) {
  std::size_t real = 0, fake = 0;
  for (const SyntheticSample& s : ds.samples) (s.label == 0 ? real : fake)++;
  std::ostringstream json;
  json << "{\"count\":" << ds.samples.size() << ",\"height\":" << ds.height
       << ",\"width\":" << ds.width << ",\"real\":" << real << ",\"fake\":" << fake
       << ",\"digest\":\"" << hex64(dataset_digest(ds)) << "\"}\n";
  io::write_file(path, json.str());
}

}  // namespace gendf
