#include "ftmtl/data.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <json.hpp>

#include "ftmtl/errors.hpp"
#include "ftmtl/png_io.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace ftmtl {

Tensor<float> image_tensor(const Sample& s) {
  Tensor<float> t({1, s.height, s.width});
  std::copy(s.pixels.begin(), s.pixels.end(), t.data());
  return t;
}

std::optional<Box> tight_bbox(const std::vector<std::uint8_t>& mask, int width, int height) {
  int min_x = width, min_y = height, max_x = -1, max_y = -1;
  for (int y = 0; y < height; ++y)
    for (int x = 0; x < width; ++x)
      if (mask[static_cast<std::size_t>(y) * width + x]) {
        min_x = std::min(min_x, x);
        min_y = std::min(min_y, y);
        max_x = std::max(max_x, x);
        max_y = std::max(max_y, y);
      }
  if (max_x < 0) return std::nullopt;
  return Box::from_corners(min_x, min_y, max_x + 1, max_y + 1);
}

namespace {

int pad16(int v) { return (v + 15) / 16 * 16; }

void refresh_bboxes(Sample& s) {
  for (auto& m : s.masses) {
    auto b = tight_bbox(m.mask, s.width, s.height);
    if (b) m.bbox = *b;
  }
}

bool any_empty_mass(const Sample& s) {
  for (const auto& m : s.masses)
    if (!tight_bbox(m.mask, s.width, s.height)) return true;
  return false;
}

void pad_to_16(Sample& s) {
  const int nw = pad16(s.width), nh = pad16(s.height);
  if (nw == s.width && nh == s.height) return;
  std::vector<float> px(static_cast<std::size_t>(nw) * nh, 0.0f);
  for (int y = 0; y < s.height; ++y)
    std::copy_n(s.pixels.begin() + static_cast<std::size_t>(y) * s.width, s.width,
                px.begin() + static_cast<std::size_t>(y) * nw);
  for (auto& m : s.masses) {
    std::vector<std::uint8_t> mk(static_cast<std::size_t>(nw) * nh, 0);
    for (int y = 0; y < s.height; ++y)
      std::copy_n(m.mask.begin() + static_cast<std::size_t>(y) * s.width, s.width,
                  mk.begin() + static_cast<std::size_t>(y) * nw);
    m.mask = std::move(mk);
  }
  s.pixels = std::move(px);
  s.width = nw;
  s.height = nh;
}

void quantize_image(Sample& s) {
  for (auto& v : s.pixels) v = quantize16(v);
}

}  // namespace

// ---------------------------------------------------------------------------
// Synthetic generation
// ---------------------------------------------------------------------------

namespace {

std::vector<float> low_freq_background(int size, Rng& rng) {
  const int cell = 16;
  const int nodes = size / cell + 1;
  std::vector<double> grid(static_cast<std::size_t>(nodes) * nodes);
  for (auto& g : grid) g = rng.uniform(0.08, 0.35);
  std::vector<float> img(static_cast<std::size_t>(size) * size);
  for (int y = 0; y < size; ++y)
    for (int x = 0; x < size; ++x) {
      const double gx = static_cast<double>(x) / cell, gy = static_cast<double>(y) / cell;
      const int x0 = std::min(static_cast<int>(gx), nodes - 2), y0 = std::min(static_cast<int>(gy), nodes - 2);
      const double ax = gx - x0, ay = gy - y0;
      const double v = (1 - ay) * ((1 - ax) * grid[static_cast<std::size_t>(y0) * nodes + x0] +
                                   ax * grid[static_cast<std::size_t>(y0) * nodes + x0 + 1]) +
                       ay * ((1 - ax) * grid[static_cast<std::size_t>(y0 + 1) * nodes + x0] +
                             ax * grid[static_cast<std::size_t>(y0 + 1) * nodes + x0 + 1]);
      img[static_cast<std::size_t>(y) * size + x] = static_cast<float>(v);
    }
  return img;
}

// smooth bright ellipse with soft falloff
void paint_benign(Sample& s, Rng& rng, MassAnnotation& m) {
  const int size = s.width;
  const double r = rng.uniform(0.12, 0.20) * size;
  const double sa = rng.uniform(0.85, 1.15), sb = rng.uniform(0.85, 1.15);
  const double phi = rng.uniform(0.0, M_PI);
  const double amp = rng.uniform(0.35, 0.55);
  // masses may clip at the border; the center always stays in frame
  const double margin = 0.75 * r * std::max(sa, sb);
  const double cx = rng.uniform(margin, size - margin);
  const double cy = rng.uniform(margin, size - margin);
  const double ca = std::cos(phi), sn = std::sin(phi);
  for (int y = 0; y < size; ++y)
    for (int x = 0; x < size; ++x) {
      const double dx = x - cx, dy = y - cy;
      const double u = (ca * dx + sn * dy) / (r * sa);
      const double v = (-sn * dx + ca * dy) / (r * sb);
      const double d2 = u * u + v * v;
      if (d2 <= 1.0) {
        m.mask[static_cast<std::size_t>(y) * size + x] = 1;
        s.pixels[static_cast<std::size_t>(y) * size + x] += static_cast<float>(amp * std::pow(1.0 - d2, 1.5));
      }
    }
}

// spiculated star polygon with an irregular boundary and a sharper edge
void paint_malignant(Sample& s, Rng& rng, MassAnnotation& m) {
  const int size = s.width;
  const double r = rng.uniform(0.12, 0.20) * size;
  const int spikes = static_cast<int>(rng.uniform_int(8, 14));
  const double phi0 = rng.uniform(0.0, 2 * M_PI);
  const double amp = rng.uniform(0.35, 0.5);
  const double sharp = rng.uniform(2.0, 4.0);
  const double j1 = rng.uniform(0.0, 2 * M_PI), j2 = rng.uniform(0.0, 2 * M_PI);
  const double margin = 0.8 * r;
  const double cx = rng.uniform(margin, size - margin);
  const double cy = rng.uniform(margin, size - margin);
  const double bright = rng.uniform(0.4, 0.55);
  for (int y = 0; y < size; ++y)
    for (int x = 0; x < size; ++x) {
      const double dx = x - cx, dy = y - cy;
      const double rho = std::sqrt(dx * dx + dy * dy);
      const double theta = std::atan2(dy, dx);
      const double jitter = 1.0 + 0.07 * std::sin(2 * theta + j1) + 0.05 * std::sin(3 * theta + j2);
      const double spike = std::pow(std::abs(std::cos(spikes * theta / 2.0 + phi0)), sharp);
      const double edge = r * jitter * (1.0 - amp + amp * spike);
      if (rho <= edge) {
        m.mask[static_cast<std::size_t>(y) * size + x] = 1;
        const double d = rho / edge;
        s.pixels[static_cast<std::size_t>(y) * size + x] +=
            static_cast<float>(bright * std::pow(std::max(0.0, 1.0 - d * d), 0.7));
      }
    }
}

}  // namespace

std::vector<Sample> generate_synthetic(int n, std::uint64_t seed, double benign_fraction, int image_size) {
  if (n < 1) throw std::invalid_argument("generate_synthetic: n must be >= 1");
  if (image_size % 16 != 0) throw std::invalid_argument("generate_synthetic: image_size must be divisible by 16");

  const int n_benign = static_cast<int>(std::lround(n * benign_fraction));
  std::vector<MassLabel> labels(static_cast<std::size_t>(n), MassLabel::Malignant);
  std::fill_n(labels.begin(), n_benign, MassLabel::Benign);
  Rng shuffle_rng(mix_seed(seed, "labels"));
  for (int i = n - 1; i > 0; --i)
    std::swap(labels[static_cast<std::size_t>(i)],
              labels[static_cast<std::size_t>(shuffle_rng.uniform_int(0, i))]);

  std::vector<Sample> out;
  out.reserve(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) {
    Rng rng(mix_seed(seed, "sample", static_cast<std::uint64_t>(i)));
    Sample s;
    char buf[32];
    std::snprintf(buf, sizeof buf, "syn-%05d", i);
    s.id = buf;
    s.width = s.height = image_size;
    s.pixels = low_freq_background(image_size, rng);

    MassAnnotation mass;
    mass.label = labels[static_cast<std::size_t>(i)];
    mass.mask.assign(static_cast<std::size_t>(image_size) * image_size, 0);
    if (mass.label == MassLabel::Benign)
      paint_benign(s, rng, mass);
    else
      paint_malignant(s, rng, mass);
    mass.bbox = *tight_bbox(mass.mask, s.width, s.height);
    s.masses.push_back(std::move(mass));
    quantize_image(s);
    out.push_back(std::move(s));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Preprocessing
// ---------------------------------------------------------------------------

CropResult crop_breast_region(const Sample& s) {
  float max_v = 0;
  for (float v : s.pixels) max_v = std::max(max_v, v);
  const float thr = 0.05f * max_v;
  int min_x = s.width, min_y = s.height, max_x = -1, max_y = -1;
  for (int y = 0; y < s.height; ++y)
    for (int x = 0; x < s.width; ++x)
      if (s.at(y, x) > thr) {
        min_x = std::min(min_x, x);
        min_y = std::min(min_y, y);
        max_x = std::max(max_x, x);
        max_y = std::max(max_y, y);
      }
  if (max_x < 0) return CropResult{s, true};

  const int cw = max_x - min_x + 1, ch = max_y - min_y + 1;
  Sample out;
  out.id = s.id;
  out.width = cw;
  out.height = ch;
  out.pixels.resize(static_cast<std::size_t>(cw) * ch);
  for (int y = 0; y < ch; ++y)
    std::copy_n(s.pixels.begin() + static_cast<std::size_t>(y + min_y) * s.width + min_x, cw,
                out.pixels.begin() + static_cast<std::size_t>(y) * cw);
  for (const auto& m : s.masses) {
    MassAnnotation nm;
    nm.label = m.label;
    nm.mask.resize(static_cast<std::size_t>(cw) * ch);
    for (int y = 0; y < ch; ++y)
      std::copy_n(m.mask.begin() + static_cast<std::size_t>(y + min_y) * s.width + min_x, cw,
                  nm.mask.begin() + static_cast<std::size_t>(y) * cw);
    if (!tight_bbox(nm.mask, cw, ch)) {
      std::cerr << "warning: mass of sample " << s.id << " lies outside the breast region, dropped\n";
      continue;
    }
    out.masses.push_back(std::move(nm));
  }
  refresh_bboxes(out);
  pad_to_16(out);
  return CropResult{std::move(out), false};
}

std::vector<Sample> split_per_mass(const std::vector<Sample>& samples, int* dropped) {
  std::vector<Sample> out;
  int skipped = 0;
  for (const auto& s : samples) {
    if (s.masses.empty()) {
      ++skipped;
      std::cerr << "warning: sample " << s.id << " has no masses, dropped\n";
      continue;
    }
    if (s.masses.size() == 1) {
      out.push_back(s);
      continue;
    }
    for (std::size_t k = 0; k < s.masses.size(); ++k) {
      Sample c;
      c.id = s.id + "#m" + std::to_string(k);
      c.width = s.width;
      c.height = s.height;
      c.pixels = s.pixels;
      c.masses.push_back(s.masses[k]);
      out.push_back(std::move(c));
    }
  }
  if (dropped) *dropped = skipped;
  return out;
}

// ---------------------------------------------------------------------------
// Augmentation
// ---------------------------------------------------------------------------

namespace {

float bilinear_at(const std::vector<float>& img, int w, int h, double fx, double fy) {
  const int x0 = static_cast<int>(std::floor(fx)), y0 = static_cast<int>(std::floor(fy));
  float acc = 0;
  const double ax = fx - x0, ay = fy - y0;
  const double ws[4] = {(1 - ay) * (1 - ax), (1 - ay) * ax, ay * (1 - ax), ay * ax};
  const int xs[4] = {x0, x0 + 1, x0, x0 + 1};
  const int ys[4] = {y0, y0, y0 + 1, y0 + 1};
  for (int i = 0; i < 4; ++i)
    if (xs[i] >= 0 && xs[i] < w && ys[i] >= 0 && ys[i] < h)
      acc += static_cast<float>(ws[i]) * img[static_cast<std::size_t>(ys[i]) * w + xs[i]];
  return acc;
}

std::uint8_t nearest_at(const std::vector<std::uint8_t>& mask, int w, int h, double fx, double fy) {
  const int x = static_cast<int>(std::lround(fx)), y = static_cast<int>(std::lround(fy));
  if (x < 0 || x >= w || y < 0 || y >= h) return 0;
  return mask[static_cast<std::size_t>(y) * w + x];
}

// inverse_map: output pixel center -> input pixel center
template <typename Fn>
Sample warp(const Sample& s, int out_w, int out_h, Fn&& inverse_map) {
  Sample o;
  o.id = s.id;
  o.width = out_w;
  o.height = out_h;
  o.pixels.resize(static_cast<std::size_t>(out_w) * out_h);
  o.masses.resize(s.masses.size());
  for (std::size_t k = 0; k < s.masses.size(); ++k) {
    o.masses[k].label = s.masses[k].label;
    o.masses[k].bbox = s.masses[k].bbox;
    o.masses[k].mask.assign(static_cast<std::size_t>(out_w) * out_h, 0);
  }
  for (int y = 0; y < out_h; ++y)
    for (int x = 0; x < out_w; ++x) {
      const auto [fx, fy] = inverse_map(x, y);
      o.pixels[static_cast<std::size_t>(y) * out_w + x] = bilinear_at(s.pixels, s.width, s.height, fx, fy);
      for (std::size_t k = 0; k < s.masses.size(); ++k)
        o.masses[k].mask[static_cast<std::size_t>(y) * out_w + x] =
            nearest_at(s.masses[k].mask, s.width, s.height, fx, fy);
    }
  return o;
}

}  // namespace

Sample rotate_sample_90cw(const Sample& s, int quarter_turns) {
  Sample cur = s;
  for (int t = 0; t < quarter_turns; ++t) {
    const int h = cur.height;
    Sample next = warp(cur, h, cur.width, [&](int x, int y) { return std::pair<double, double>(y, h - 1 - x); });
    cur = std::move(next);
  }
  return cur;
}

Sample rotate_sample(const Sample& s, double degrees) {
  const double rad = degrees * M_PI / 180.0;
  const double c = std::cos(-rad), sn = std::sin(-rad);
  const double cx = (s.width - 1) / 2.0, cy = (s.height - 1) / 2.0;
  return warp(s, s.width, s.height, [&](int x, int y) {
    const double dx = x - cx, dy = y - cy;
    return std::pair<double, double>(cx + c * dx - sn * dy, cy + sn * dx + c * dy);
  });
}

Sample flip_sample(const Sample& s, bool horizontal) {
  const int w = s.width, h = s.height;
  if (horizontal) return warp(s, w, h, [&](int x, int y) { return std::pair<double, double>(w - 1 - x, y); });
  return warp(s, w, h, [&](int x, int y) { return std::pair<double, double>(x, h - 1 - y); });
}

Sample zoom_sample(const Sample& s, double factor) {
  const double cx = (s.width - 1) / 2.0, cy = (s.height - 1) / 2.0;
  return warp(s, s.width, s.height, [&](int x, int y) {
    return std::pair<double, double>(cx + (x - cx) / factor, cy + (y - cy) / factor);
  });
}

namespace {

Box union_bbox(const Sample& s) {
  double x1 = s.width, y1 = s.height, x2 = 0, y2 = 0;
  bool any = false;
  for (const auto& m : s.masses) {
    auto b = tight_bbox(m.mask, s.width, s.height);
    if (!b) continue;
    any = true;
    x1 = std::min(x1, b->x1());
    y1 = std::min(y1, b->y1());
    x2 = std::max(x2, b->x2());
    y2 = std::max(y2, b->y2());
  }
  if (!any)
    return Box{static_cast<double>(s.width), static_cast<double>(s.height), s.width / 2.0, s.height / 2.0};
  return Box::from_corners(x1, y1, x2, y2);
}

// random sub-rectangle keeping >= 70% of the area and the whole mass
Sample crop_op(const Sample& s, Rng& rng) {
  const double f = std::sqrt(rng.uniform(0.7, 1.0));
  const Box bb = union_bbox(s);
  int cw = std::clamp(static_cast<int>(std::lround(s.width * f)), 1, s.width);
  int ch = std::clamp(static_cast<int>(std::lround(s.height * f)), 1, s.height);
  const int bx1 = static_cast<int>(std::floor(bb.x1())), bx2 = static_cast<int>(std::ceil(bb.x2()));
  const int by1 = static_cast<int>(std::floor(bb.y1())), by2 = static_cast<int>(std::ceil(bb.y2()));
  cw = std::min(s.width, std::max(cw, bx2 - bx1));
  ch = std::min(s.height, std::max(ch, by2 - by1));
  const int x_lo = std::max(0, bx2 - cw), x_hi = std::min(s.width - cw, bx1);
  const int y_lo = std::max(0, by2 - ch), y_hi = std::min(s.height - ch, by1);
  const int x0 =
      x_hi < x_lo ? std::clamp(bx1, 0, s.width - cw) : static_cast<int>(rng.uniform_int(x_lo, x_hi));
  const int y0 =
      y_hi < y_lo ? std::clamp(by1, 0, s.height - ch) : static_cast<int>(rng.uniform_int(y_lo, y_hi));
  return warp(s, cw, ch, [&](int x, int y) { return std::pair<double, double>(x + x0, y + y0); });
}

Sample contrast_op(const Sample& s, Rng& rng) {
  const double gamma = rng.uniform(0.7, 1.4);
  Sample o = s;
  for (auto& v : o.pixels)
    v = static_cast<float>(std::pow(std::clamp(static_cast<double>(v), 0.0, 1.0), gamma));
  return o;
}

Sample smooth_op(const Sample& s, Rng& rng) {
  const double sigma = rng.uniform(0.5, 1.5);
  const int radius = std::max(1, static_cast<int>(std::ceil(3 * sigma)));
  std::vector<double> kernel(static_cast<std::size_t>(2 * radius + 1));
  double norm = 0;
  for (int i = -radius; i <= radius; ++i) {
    kernel[static_cast<std::size_t>(i + radius)] = std::exp(-0.5 * i * i / (sigma * sigma));
    norm += kernel[static_cast<std::size_t>(i + radius)];
  }
  for (auto& k : kernel) k /= norm;

  Sample o = s;
  std::vector<float> tmp(o.pixels.size());
  // horizontal then vertical, replicated borders
  for (int y = 0; y < s.height; ++y)
    for (int x = 0; x < s.width; ++x) {
      double acc = 0;
      for (int i = -radius; i <= radius; ++i)
        acc += kernel[static_cast<std::size_t>(i + radius)] * s.at(y, std::clamp(x + i, 0, s.width - 1));
      tmp[static_cast<std::size_t>(y) * s.width + x] = static_cast<float>(acc);
    }
  for (int y = 0; y < s.height; ++y)
    for (int x = 0; x < s.width; ++x) {
      double acc = 0;
      for (int i = -radius; i <= radius; ++i)
        acc += kernel[static_cast<std::size_t>(i + radius)] *
               tmp[static_cast<std::size_t>(std::clamp(y + i, 0, s.height - 1)) * s.width + x];
      o.pixels[static_cast<std::size_t>(y) * s.width + x] = static_cast<float>(acc);
    }
  return o;
}

}  // namespace

std::optional<Sample> augment(const Sample& s, Rng& rng) {
  for (int attempt = 0; attempt < 10; ++attempt) {
    // draw 2-5 distinct operations; application order = draw order
    const int count = static_cast<int>(rng.uniform_int(2, 5));
    int ops[6] = {0, 1, 2, 3, 4, 5};
    for (int i = 0; i < count; ++i) {
      const int j = static_cast<int>(rng.uniform_int(i, 5));
      std::swap(ops[i], ops[j]);
    }
    Sample cur = s;
    for (int i = 0; i < count; ++i) {
      switch (ops[i]) {
        case 0:  // rotate
          if (rng.bernoulli(0.5))
            cur = rotate_sample_90cw(cur, static_cast<int>(rng.uniform_int(1, 3)));
          else
            cur = rotate_sample(cur, rng.uniform(-15.0, 15.0));
          break;
        case 1:
          cur = flip_sample(cur, rng.bernoulli(0.5));
          break;
        case 2:
          cur = zoom_sample(cur, rng.uniform(0.8, 1.2));
          break;
        case 3:
          cur = crop_op(cur, rng);
          break;
        case 4:
          cur = contrast_op(cur, rng);
          break;
        case 5:
          cur = smooth_op(cur, rng);
          break;
      }
    }
    if (any_empty_mass(cur)) continue;  // mass left the frame, redraw
    refresh_bboxes(cur);
    pad_to_16(cur);
    quantize_image(cur);
    return cur;
  }
  std::cerr << "warning: augmentation of sample " << s.id << " kept losing the mass, skipped\n";
  return std::nullopt;
}

std::vector<Sample> build_training_set(const std::vector<Sample>& samples, int benign_reps, int malignant_reps,
                                       std::uint64_t seed, int* skipped) {
  if (benign_reps < 0 || malignant_reps < 0)
    throw std::invalid_argument("build_training_set: negative repetition counts");
  std::vector<Sample> out = samples;
  int lost = 0;
  for (const auto& s : samples) {
    const int reps = s.image_is_malignant() ? malignant_reps : benign_reps;
    for (int k = 0; k < reps; ++k) {
      Rng rng(mix_seed(seed, s.id, static_cast<std::uint64_t>(k)));
      auto aug = augment(s, rng);
      if (!aug) {
        ++lost;
        continue;
      }
      aug->id = s.id + "#a" + std::to_string(k);
      out.push_back(std::move(*aug));
    }
  }
  if (skipped) *skipped = lost;
  return out;
}

// ---------------------------------------------------------------------------
// Folds
// ---------------------------------------------------------------------------

std::vector<std::string> FoldSplit::train_ids(int fold) const {
  std::vector<std::string> out;
  for (int f = 0; f < k; ++f) {
    if (f == fold) continue;
    out.insert(out.end(), test_ids[static_cast<std::size_t>(f)].begin(),
               test_ids[static_cast<std::size_t>(f)].end());
  }
  return out;
}

FoldSplit kfold(const std::vector<Sample>& samples, int k, std::uint64_t seed) {
  if (static_cast<int>(samples.size()) < k) throw std::invalid_argument("kfold: fewer samples than folds");
  FoldSplit split;
  split.k = k;
  split.test_ids.resize(static_cast<std::size_t>(k));

  std::vector<std::string> benign, malignant;
  for (const auto& s : samples) (s.image_is_malignant() ? malignant : benign).push_back(s.id);

  Rng rng(mix_seed(seed, "kfold"));
  auto shuffle = [&rng](std::vector<std::string>& v) {
    for (int i = static_cast<int>(v.size()) - 1; i > 0; --i)
      std::swap(v[static_cast<std::size_t>(i)], v[static_cast<std::size_t>(rng.uniform_int(0, i))]);
  };

  split.stratified = static_cast<int>(benign.size()) >= k && static_cast<int>(malignant.size()) >= k;
  if (!split.stratified) {
    std::cerr << "warning: a class has fewer than " << k << " members; falling back to an unstratified split\n";
    std::vector<std::string> all;
    for (const auto& s : samples) all.push_back(s.id);
    shuffle(all);
    for (std::size_t i = 0; i < all.size(); ++i)
      split.test_ids[i % static_cast<std::size_t>(k)].push_back(all[i]);
    return split;
  }

  shuffle(benign);
  shuffle(malignant);
  // rolling counter across class groups keeps fold sizes equal
  std::size_t counter = 0;
  for (const auto* group : {&benign, &malignant})
    for (const auto& id : *group) split.test_ids[counter++ % static_cast<std::size_t>(k)].push_back(id);
  return split;
}

// ---------------------------------------------------------------------------
// Dataset I/O
// ---------------------------------------------------------------------------

void save_dataset(const std::vector<Sample>& samples, const std::string& dir) {
  std::error_code ec;
  fs::create_directories(fs::path(dir) / "images", ec);
  if (!ec) fs::create_directories(fs::path(dir) / "masks", ec);
  if (ec) throw IoError("save_dataset: cannot create " + dir + ": " + ec.message());

  json manifest;
  manifest["format"] = "ftmtl-dataset";
  manifest["version"] = 1;
  json recs = json::array();
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const Sample& s = samples[i];
    char stem[32];
    std::snprintf(stem, sizeof stem, "img_%05zu", i);
    const std::string img_rel = std::string("images/") + stem + ".png";

    std::vector<std::uint16_t> px(s.pixels.size());
    for (std::size_t p = 0; p < px.size(); ++p)
      px[p] = static_cast<std::uint16_t>(
          std::lround(std::clamp(static_cast<double>(s.pixels[p]), 0.0, 1.0) * 65535.0));
    write_png_gray16((fs::path(dir) / img_rel).string(), s.width, s.height, px);

    json rec;
    rec["id"] = s.id;
    rec["image"] = img_rel;
    rec["width"] = s.width;
    rec["height"] = s.height;
    json masses = json::array();
    for (std::size_t m = 0; m < s.masses.size(); ++m) {
      const auto& mass = s.masses[m];
      const std::string mask_rel = std::string("masks/") + stem + "_m" + std::to_string(m) + ".png";
      std::vector<std::uint8_t> mk(mass.mask.size());
      for (std::size_t p = 0; p < mk.size(); ++p) mk[p] = mass.mask[p] ? 255 : 0;
      write_png_gray8((fs::path(dir) / mask_rel).string(), s.width, s.height, mk);
      json jm;
      jm["mask"] = mask_rel;
      jm["label"] = to_string(mass.label);
      jm["bbox"] = {mass.bbox.x1(), mass.bbox.y1(), mass.bbox.x2(), mass.bbox.y2()};
      masses.push_back(jm);
    }
    rec["masses"] = masses;
    recs.push_back(rec);
  }
  manifest["samples"] = recs;

  std::ofstream out(fs::path(dir) / "manifest.json");
  if (!out) throw IoError("save_dataset: cannot write manifest in " + dir);
  out << manifest.dump(2) << "\n";
}

std::vector<Sample> load_dataset(const std::string& dir) {
  std::ifstream in(fs::path(dir) / "manifest.json");
  if (!in) throw IoError("load_dataset: missing manifest.json in " + dir);
  json manifest;
  try {
    in >> manifest;
  } catch (const json::exception& e) {
    throw DataMismatchError("load_dataset: malformed manifest.json in " + dir + ": " + e.what());
  }
  if (manifest.value("format", "") != "ftmtl-dataset")
    throw DataMismatchError("load_dataset: not a dataset manifest: " + dir);

  std::vector<Sample> out;
  for (const auto& rec : manifest.at("samples")) {
    const std::string id = rec.value("id", "<missing id>");
    try {
      Sample s;
      s.id = id;
      int w = 0, h = 0;
      const auto px = read_png_gray16((fs::path(dir) / rec.at("image").get<std::string>()).string(), w, h);
      if (w != rec.at("width").get<int>() || h != rec.at("height").get<int>())
        throw DataMismatchError("image dimensions disagree with the manifest");
      s.width = w;
      s.height = h;
      s.pixels.resize(px.size());
      for (std::size_t p = 0; p < px.size(); ++p) s.pixels[p] = static_cast<float>(px[p] / 65535.0);

      for (const auto& jm : rec.at("masses")) {
        MassAnnotation mass;
        const std::string label = jm.at("label").get<std::string>();
        if (label == "benign")
          mass.label = MassLabel::Benign;
        else if (label == "malignant")
          mass.label = MassLabel::Malignant;
        else
          throw DataMismatchError("unknown label '" + label + "'");
        int mw = 0, mh = 0;
        const auto mk = read_png_gray8((fs::path(dir) / jm.at("mask").get<std::string>()).string(), mw, mh);
        if (mw != w || mh != h) throw DataMismatchError("mask dimensions disagree with the image");
        mass.mask.resize(mk.size());
        for (std::size_t p = 0; p < mk.size(); ++p) mass.mask[p] = mk[p] ? 1 : 0;
        const auto& bb = jm.at("bbox");
        if (!bb.is_array() || bb.size() != 4) throw DataMismatchError("bbox must be [x1,y1,x2,y2]");
        mass.bbox =
            Box::from_corners(bb[0].get<double>(), bb[1].get<double>(), bb[2].get<double>(), bb[3].get<double>());
        if (!mass.bbox.valid()) throw DataMismatchError("bbox has non-positive extent");
        if (!tight_bbox(mass.mask, w, h)) throw DataMismatchError("mask has no foreground pixels");
        s.masses.push_back(std::move(mass));
      }
      pad_to_16(s);
      out.push_back(std::move(s));
    } catch (const IoError& e) {
      throw DataMismatchError("load_dataset: sample '" + id + "': " + e.what());
    } catch (const json::exception& e) {
      throw DataMismatchError("load_dataset: sample '" + id + "': bad record: " + e.what());
    } catch (const DataMismatchError& e) {
      throw DataMismatchError("load_dataset: sample '" + id + "': " + e.what());
    }
  }
  return out;
}

}  // namespace ftmtl
