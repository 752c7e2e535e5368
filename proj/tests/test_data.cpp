#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <set>

#include "ftmtl/data.hpp"
#include "ftmtl/errors.hpp"
#include "ftmtl/png_io.hpp"
#include "oracles.hpp"

using namespace ftmtl;
namespace fs = std::filesystem;

namespace {

bool samples_equal(const Sample& a, const Sample& b) {
  if (a.id != b.id || a.width != b.width || a.height != b.height) return false;
  if (a.pixels != b.pixels) return false;
  if (a.masses.size() != b.masses.size()) return false;
  for (std::size_t i = 0; i < a.masses.size(); ++i) {
    const auto &ma = a.masses[i], &mb = b.masses[i];
    if (ma.label != mb.label || ma.mask != mb.mask || !(ma.bbox == mb.bbox)) return false;
  }
  return true;
}

bool bbox_is_tight(const MassAnnotation& m, int w, int h) {
  double x1, y1, x2, y2;
  if (!oracle::tight_bbox(m.mask, w, h, x1, y1, x2, y2)) return false;
  return m.bbox == Box::from_corners(x1, y1, x2, y2);
}

fs::path temp_dir(const std::string& tag) {
  auto p = fs::temp_directory_path() / ("ftmtl_test_" + tag);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

}  // namespace

TEST_CASE("generate_synthetic: counts, determinism and mask contracts") {
  auto a = generate_synthetic(10, 42, 0.5);
  auto b = generate_synthetic(10, 42, 0.5);
  REQUIRE(a.size() == 10);
  int benign = 0;
  for (const auto& s : a) benign += s.masses[0].label == MassLabel::Benign ? 1 : 0;
  CHECK(benign == 5);
  for (std::size_t i = 0; i < a.size(); ++i) CHECK(samples_equal(a[i], b[i]));

  for (const auto& s : a) {
    REQUIRE(s.masses.size() == 1);
    const auto& m = s.masses[0];
    long on = 0;
    for (auto v : m.mask) on += v ? 1 : 0;
    CHECK(on > 0);
    CHECK(on < static_cast<long>(s.pixels.size()) / 2);
    CHECK(bbox_is_tight(m, s.width, s.height));
    for (float p : s.pixels) {
      CHECK(p >= 0.0f);
      CHECK(p <= 1.0f);
    }
  }

  CHECK(generate_synthetic(7, 1, 1.0)[6].masses[0].label == MassLabel::Benign);
  CHECK_THROWS_AS(generate_synthetic(0, 1, 0.5), std::invalid_argument);
  CHECK_THROWS_AS(generate_synthetic(4, 1, 0.5, 60), std::invalid_argument);
}

TEST_CASE("dataset save/load round trip") {
  auto dir = temp_dir("roundtrip");
  auto samples = generate_synthetic(10, 7, 0.4);
  save_dataset(samples, dir.string());
  auto loaded = load_dataset(dir.string());
  REQUIRE(loaded.size() == samples.size());
  for (std::size_t i = 0; i < samples.size(); ++i) CHECK(samples_equal(samples[i], loaded[i]));

  SUBCASE("missing file is reported with the sample id") {
    fs::remove(dir / "images" / "img_00003.png");
    try {
      load_dataset(dir.string());
      FAIL("expected DataMismatchError");
    } catch (const DataMismatchError& e) {
      CHECK(std::string(e.what()).find(samples[3].id) != std::string::npos);
    }
  }
  SUBCASE("image/mask dimension mismatch rejected") {
    std::vector<std::uint8_t> tiny(16 * 16, 0);
    tiny[0] = 255;
    write_png_gray8((dir / "masks" / "img_00002_m0.png").string(), 16, 16, tiny);
    CHECK_THROWS_AS(load_dataset(dir.string()), DataMismatchError);
  }
  SUBCASE("missing manifest is an I/O error") {
    fs::remove(dir / "manifest.json");
    CHECK_THROWS_AS(load_dataset(dir.string()), IoError);
  }
}

TEST_CASE("crop_breast_region") {
  SUBCASE("dark right half is cropped away, then padded to 16") {
    auto base = generate_synthetic(1, 3, 1.0, 64)[0];
    Sample s = base;
    s.width = 128;
    s.pixels.assign(static_cast<std::size_t>(128) * 64, 0.0f);
    s.masses[0].mask.assign(static_cast<std::size_t>(128) * 64, 0);
    for (int y = 0; y < 64; ++y) {
      std::copy_n(base.pixels.begin() + static_cast<std::size_t>(y) * 64, 64,
                  s.pixels.begin() + static_cast<std::size_t>(y) * 128);
      std::copy_n(base.masses[0].mask.begin() + static_cast<std::size_t>(y) * 64, 64,
                  s.masses[0].mask.begin() + static_cast<std::size_t>(y) * 128);
    }
    auto res = crop_breast_region(s);
    CHECK_FALSE(res.all_background);
    CHECK(res.sample.width == 64);  // half of 128, already a multiple of 16
    CHECK(res.sample.height == 64);
    CHECK(bbox_is_tight(res.sample.masses[0], res.sample.width, res.sample.height));
  }
  SUBCASE("full-foreground image is unchanged apart from padding") {
    auto s = generate_synthetic(1, 5, 0.0, 64)[0];
    auto res = crop_breast_region(s);
    CHECK_FALSE(res.all_background);
    CHECK(res.sample.width == 64);
    CHECK(res.sample.height == 64);
    CHECK(res.sample.pixels == s.pixels);
  }
  SUBCASE("all-background image returned unchanged with a flag") {
    Sample s;
    s.id = "blank";
    s.width = s.height = 32;
    s.pixels.assign(32 * 32, 0.0f);
    auto res = crop_breast_region(s);
    CHECK(res.all_background);
    CHECK(res.sample.pixels == s.pixels);
  }
}

TEST_CASE("split_per_mass") {
  auto samples = generate_synthetic(4, 11, 0.5);
  SUBCASE("single-mass inputs pass through") {
    auto out = split_per_mass(samples);
    CHECK(out.size() == samples.size());
    CHECK(out[0].id == samples[0].id);
  }
  SUBCASE("multi-mass samples expand to one output per mass") {
    std::vector<Sample> multi = samples;
    multi[0].masses.push_back(samples[1].masses[0]);
    multi[0].masses.push_back(samples[2].masses[0]);
    // 4 samples carrying 6 masses in total
    auto out = split_per_mass(multi);
    CHECK(out.size() == 6);
    for (const auto& s : out) CHECK(s.masses.size() == 1);
  }
  SUBCASE("zero-mass input dropped with a count") {
    std::vector<Sample> with_empty = samples;
    with_empty.push_back(Sample{"empty", 64, 64, std::vector<float>(64 * 64, 0.1f), {}});
    int dropped = 0;
    auto out = split_per_mass(with_empty, &dropped);
    CHECK(out.size() == samples.size());
    CHECK(dropped == 1);
  }
}

TEST_CASE("geometric transforms") {
  auto s = generate_synthetic(1, 17, 1.0, 64)[0];
  SUBCASE("double flip restores the original") {
    auto once = flip_sample(s, true);
    auto twice = flip_sample(once, true);
    CHECK(twice.pixels == s.pixels);
    CHECK(twice.masses[0].mask == s.masses[0].mask);
    CHECK(once.masses[0].mask != s.masses[0].mask);
  }
  SUBCASE("rotation by 90 degrees swaps bbox dimensions") {
    Sample t = s;
    auto& mask = t.masses[0].mask;
    mask.assign(mask.size(), 0);
    for (int y = 20; y < 26; ++y)
      for (int x = 10; x < 30; ++x) mask[static_cast<std::size_t>(y) * 64 + x] = 1;
    const auto before = *tight_bbox(mask, 64, 64);
    auto rot = rotate_sample_90cw(t, 1);
    const auto after = *tight_bbox(rot.masses[0].mask, rot.width, rot.height);
    CHECK(after.w == before.h);
    CHECK(after.h == before.w);
    auto full = rotate_sample_90cw(t, 4);
    CHECK(full.pixels == t.pixels);
    CHECK(full.masses[0].mask == t.masses[0].mask);
  }
  SUBCASE("zoom keeps the mask binary and nonempty") {
    auto z = zoom_sample(s, 1.15);
    for (auto v : z.masses[0].mask) CHECK((v == 0 || v == 1));
    CHECK(tight_bbox(z.masses[0].mask, z.width, z.height).has_value());
  }
}

TEST_CASE("augment keeps the bbox tight and the output padded") {
  auto samples = generate_synthetic(6, 23, 0.5);
  int produced = 0;
  for (const auto& s : samples)
    for (int k = 0; k < 5; ++k) {
      Rng rng(mix_seed(99, s.id, static_cast<std::uint64_t>(k)));
      auto aug = augment(s, rng);
      if (!aug) continue;
      ++produced;
      CHECK(aug->width % 16 == 0);
      CHECK(aug->height % 16 == 0);
      for (const auto& m : aug->masses) CHECK(bbox_is_tight(m, aug->width, aug->height));
      for (float p : aug->pixels) CHECK(p == quantize16(p));
    }
  CHECK(produced >= 25);  // the occasional skip is fine, wholesale failure is not

  SUBCASE("reproducible bitwise from (seed, id, rep)") {
    Rng r1(mix_seed(7, samples[0].id, 3));
    Rng r2(mix_seed(7, samples[0].id, 3));
    auto a = augment(samples[0], r1);
    auto b = augment(samples[0], r2);
    REQUIRE(a.has_value());
    REQUIRE(b.has_value());
    CHECK(samples_equal(*a, *b));
  }
}

TEST_CASE("build_training_set") {
  auto samples = generate_synthetic(8, 31, 0.5);  // 4 benign, 4 malignant
  SUBCASE("reps=0 keeps originals only") {
    auto out = build_training_set(samples, 0, 0, 5);
    CHECK(out.size() == samples.size());
  }
  SUBCASE("class counts follow the reps arithmetic") {
    int skipped = 0;
    auto out = build_training_set(samples, 3, 2, 5, &skipped);
    CHECK(skipped == 0);
    int benign = 0, malignant = 0;
    for (const auto& s : out) (s.image_is_malignant() ? malignant : benign)++;
    CHECK(benign == 4 * (1 + 3));
    CHECK(malignant == 4 * (1 + 2));
    for (const auto& s : out) {
      const auto hash_pos = s.id.find("#a");
      if (hash_pos != std::string::npos) {
        const std::string src = s.id.substr(0, hash_pos);
        bool found = false;
        for (const auto& orig : samples) found |= orig.id == src;
        CHECK(found);
      }
    }
  }
}

TEST_CASE("kfold") {
  SUBCASE("115 samples split into five folds of 23") {
    auto samples = generate_synthetic(115, 13, 41.0 / 115.0);
    auto split = kfold(samples, 5, 3);
    CHECK(split.stratified);
    std::set<std::string> seen;
    int global_benign = 0;
    for (const auto& s : samples) global_benign += s.image_is_malignant() ? 0 : 1;
    for (const auto& fold : split.test_ids) {
      CHECK(fold.size() == 23);
      for (const auto& id : fold) CHECK(seen.insert(id).second);  // pairwise disjoint
    }
    CHECK(seen.size() == samples.size());  // union covers the dataset

    const double share = static_cast<double>(global_benign) / 5.0;
    for (const auto& fold : split.test_ids) {
      int benign = 0;
      for (const auto& id : fold)
        for (const auto& s : samples)
          if (s.id == id && !s.image_is_malignant()) ++benign;
      CHECK(std::abs(benign - share) <= 1.0);
    }
  }
  SUBCASE("class smaller than k falls back to unstratified") {
    auto samples = generate_synthetic(12, 19, 3.0 / 12.0);
    auto split = kfold(samples, 5, 3);
    CHECK_FALSE(split.stratified);
    std::size_t total = 0;
    for (const auto& fold : split.test_ids) total += fold.size();
    CHECK(total == samples.size());
  }
  SUBCASE("augmentation never leaks across folds") {
    auto samples = generate_synthetic(20, 29, 0.5);
    auto split = kfold(samples, 5, 11);
    const auto train = split.train_ids(0);
    std::vector<Sample> train_samples;
    for (const auto& id : train)
      for (const auto& s : samples)
        if (s.id == id) train_samples.push_back(s);
    auto expanded = build_training_set(train_samples, 2, 2, 77);
    std::set<std::string> test_fold(split.test_ids[0].begin(), split.test_ids[0].end());
    for (const auto& s : expanded) {
      const std::string src = s.id.substr(0, s.id.find("#a"));
      CHECK(test_fold.count(src) == 0);
    }
  }
}
