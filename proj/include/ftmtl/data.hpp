#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "ftmtl/boxes.hpp"
#include "ftmtl/rng.hpp"
#include "ftmtl/tensor.hpp"

namespace ftmtl {

enum class MassLabel : int { Benign = 0, Malignant = 1 };

inline const char* to_string(MassLabel l) { return l == MassLabel::Benign ? "benign" : "malignant"; }

/// One annotated mass: tight bounding box, full-resolution binary mask and a
/// benign/malignant label.
struct MassAnnotation {
  Box bbox;
  std::vector<std::uint8_t> mask;  // row-major, image dimensions, values 0/1
  MassLabel label = MassLabel::Benign;
};

/// One grayscale image with its per-mass annotations. Pixel values live in
/// [0,1] on the 16-bit grid so on-disk round trips are lossless.
struct Sample {
  std::string id;
  int width = 0, height = 0;
  std::vector<float> pixels;  // row-major, width*height
  std::vector<MassAnnotation> masses;

  float at(int y, int x) const { return pixels[static_cast<std::size_t>(y) * width + x]; }
  bool image_is_malignant() const {
    for (const auto& m : masses)
      if (m.label == MassLabel::Malignant) return true;
    return false;
  }
};

/// Sample image as a [1,H,W] tensor.
Tensor<float> image_tensor(const Sample& s);

/// Tight bounding rectangle (corner form -> Box) of a mask's nonzero pixels.
std::optional<Box> tight_bbox(const std::vector<std::uint8_t>& mask, int width, int height);

/// Snap a value in [0,1] onto the 16-bit storage grid.
inline float quantize16(float v) {
  const double c = std::clamp(static_cast<double>(v), 0.0, 1.0);
  return static_cast<float>(std::lround(c * 65535.0) / 65535.0);
}

// ---------------------------------------------------------------------------
// Synthetic data
// ---------------------------------------------------------------------------

/// Deterministic synthetic dataset: low-frequency noise backgrounds, smooth
/// bright ellipses for benign masses and spiculated star polygons for
/// malignant ones, each with an exact mask and tight box.
std::vector<Sample> generate_synthetic(int n, std::uint64_t seed, double benign_fraction, int image_size = 64);

// ---------------------------------------------------------------------------
// Preprocessing
// ---------------------------------------------------------------------------

struct CropResult {
  Sample sample;
  bool all_background = false;
};

/// Crops to the tight box of pixels above 5% of the max intensity, shifts the
/// annotations and re-pads to a multiple of 16. All-background images are
/// returned unchanged with the flag set.
CropResult crop_breast_region(const Sample& s);

/// One output sample per (image, mass) pair; zero-mass inputs are dropped.
std::vector<Sample> split_per_mass(const std::vector<Sample>& samples, int* dropped = nullptr);

// Individual geometric transforms (image bilinear, masks nearest-neighbor;
// boxes are NOT refreshed -- augment() recomputes them tight afterwards).
Sample rotate_sample_90cw(const Sample& s, int quarter_turns);
Sample rotate_sample(const Sample& s, double degrees);
Sample flip_sample(const Sample& s, bool horizontal);
Sample zoom_sample(const Sample& s, double factor);

/// Applies 2-5 distinct augmentation operations drawn from {rotate, flip,
/// zoom, crop, contrast, smooth} in draw order. Geometric operations move the
/// mask (nearest neighbor) and the box is recomputed tight from the moved
/// mask. Returns nothing when ten redraws in a row push the mass out of frame.
std::optional<Sample> augment(const Sample& s, Rng& rng);

/// Originals plus per-class augmentation replicas; replica k of sample id uses
/// the substream (seed, id, k) so the expansion is reproducible bitwise.
std::vector<Sample> build_training_set(const std::vector<Sample>& samples, int benign_reps, int malignant_reps,
                                       std::uint64_t seed, int* skipped = nullptr);

struct FoldSplit {
  int k = 5;
  std::vector<std::vector<std::string>> test_ids;  // one list per fold
  bool stratified = true;

  std::vector<std::string> train_ids(int fold) const;
};

/// Stratified-by-label k-fold partition; falls back to an unstratified split
/// (stratified=false) when some class has fewer than k members.
FoldSplit kfold(const std::vector<Sample>& samples, int k, std::uint64_t seed);

// ---------------------------------------------------------------------------
// On-disk datasets (manifest.json + 16-bit image PNGs + 8-bit mask PNGs)
// ---------------------------------------------------------------------------

void save_dataset(const std::vector<Sample>& samples, const std::string& dir);
std::vector<Sample> load_dataset(const std::string& dir);

}  // namespace ftmtl
