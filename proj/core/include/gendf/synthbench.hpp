#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "gendf/tensor.hpp"

namespace gendf {

struct ForgeryBox {
  std::size_t x0 = 0, y0 = 0, width = 0, height = 0;
};

// One benchmark image. Real images are smooth fields; fakes splice an
// affine-shifted rectangle from a sibling field, leaving a discontinuity at
// the patch boundary. forgery_box is present iff label == 1.
struct SyntheticSample {
  Tensor image;  // [3 x h x w], values in [0, 1]
  int label = 0;
  std::uint64_t seed = 0;
  std::optional<ForgeryBox> forgery_box;
};

// Bilinear upsampling of a seeded 4x4 Gaussian field plus low-amplitude
// smooth sinusoids, per channel. Deterministic per seed.
SyntheticSample generate_real(std::uint64_t seed, std::size_t height, std::size_t width);

// generate_real(seed) with a rectangle (sides 25-50% of the image) pasted
// from generate_real(seed + 1e6) after a per-channel affine shift; hard edge
// with a 1-pixel linear blend just outside the box.
SyntheticSample generate_fake(std::uint64_t seed, std::size_t height, std::size_t width);

enum class PerturbationKind { Contrast, Saturation, Pixelate, Blur };

struct PerturbationSpec {
  PerturbationKind kind = PerturbationKind::Contrast;
  double severity = 1.0;

  std::string str() const;
  static PerturbationSpec parse(const std::string& text);  // "blur:1.0"
};

// Test-time image corruption. Identity severities (contrast 1, saturation 1,
// pixelate rounding to 1, blur 0) return the input bit-exactly.
Tensor perturb(const Tensor& image, const PerturbationSpec& spec);

struct ScoreSet {
  std::vector<double> scores;  // probability of fake
  std::vector<int> labels;     // 0 real, 1 fake
};

// Probability that a random fake outscores a random real, ties at 0.5.
double auc(const ScoreSet& s);
// Threshold sweep over all distinct scores; (FPR+FNR)/2 at the threshold
// minimizing |FPR-FNR|, ties broken toward the lower threshold.
double eer(const ScoreSet& s);
double accuracy(const ScoreSet& s, double threshold = 0.5);

struct Dataset {
  std::size_t height = 0, width = 0;
  std::vector<SyntheticSample> samples;
};

// Alternating real/fake samples with seeds seed_base, seed_base+1, ...
Dataset make_dataset(std::uint64_t seed_base, std::size_t count, std::size_t height,
                     std::size_t width);

std::string serialize_dataset(const Dataset& ds);
void save_dataset(const Dataset& ds, const std::string& path);
Dataset load_dataset(const std::string& path);
// FNV-1a over the serialized bytes.
std::uint64_t dataset_digest(const Dataset& ds);
void write_manifest(const Dataset& ds, const std::string& path);

}  // namespace gendf
