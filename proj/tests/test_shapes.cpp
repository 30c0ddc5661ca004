#include <gtest/gtest.h>

#include <cmath>
#include <fstream>
#include <functional>
#include <numbers>
#include <set>
#include <string>
#include <vector>

#include "abstractnet/error.hpp"
#include "abstractnet/selftest.hpp"
#include "abstractnet/shapes.hpp"
#include "test_support.hpp"

namespace an = abstractnet;

namespace {

constexpr an::ShapeClass kClasses[] = {an::ShapeClass::horizontal, an::ShapeClass::vertical};

bool is_untextured(an::ShapeFamily f) { return f != an::ShapeFamily::random_textured; }

/// Crossing-number test at a point, with the same half-open edge rule the
/// scanline fill uses, written independently of it.
bool inside(const std::vector<an::Point>& poly, double x, double y) {
  bool in = false;
  for (std::size_t i = 0, j = poly.size() - 1; i < poly.size(); j = i++) {
    const an::Point& a = poly[j];
    const an::Point& b = poly[i];
    if ((a.y <= y) != (b.y <= y)) {
      const double xi = a.x + (y - a.y) * (b.x - a.x) / (b.y - a.y);
      if (xi <= x) in = !in;
    }
  }
  return in;
}

struct Box {
  int r0 = 1 << 30, c0 = 1 << 30, r1 = -1, c1 = -1;
  int w() const { return c1 - c0 + 1; }
  int h() const { return r1 - r0 + 1; }
};

Box bbox(const an::ImageGray& img) {
  Box b;
  for (int r = 0; r < img.height; ++r)
    for (int c = 0; c < img.width; ++c)
      if (img.at(r, c) == 0.0) {
        b.r0 = std::min(b.r0, r);
        b.r1 = std::max(b.r1, r);
        b.c0 = std::min(b.c0, c);
        b.c1 = std::max(b.c1, c);
      }
  return b;
}

std::size_t pixel_hash(const an::ImageGray& img) {
  std::size_t h = 1469598103934665603ULL;
  for (double v : img.pixels) h = (h ^ std::hash<double>{}(v)) * 1099511628211ULL;
  return h;
}

}  // namespace

TEST(Names, RoundTrip) {
  for (an::ShapeFamily f : an::kAllFamilies) EXPECT_EQ(an::parse_family(an::to_string(f)), f);
  for (an::ShapeClass c : kClasses) EXPECT_EQ(an::parse_class(an::to_string(c)), c);
  EXPECT_THROW(an::parse_family("triangle"), an::ParamError);
  EXPECT_THROW(an::parse_class("diagonal"), an::ParamError);
  EXPECT_EQ(an::label_of(an::ShapeClass::horizontal), 0);
  EXPECT_EQ(an::label_of(an::ShapeClass::vertical), 1);
}

TEST(RenderParams, Validation) {
  an::RenderParams p;
  EXPECT_NO_THROW(p.validate());
  p.margin = 32;
  EXPECT_THROW(p.validate(), an::ParamError);
  p = {};
  p.aspect_min = 1.0;
  EXPECT_THROW(p.validate(), an::ParamError);
  p = {};
  p.outline_thickness = 0;
  EXPECT_THROW(p.validate(), an::ParamError);
  p = {};
  p.stripe_duty = 1.0;
  EXPECT_THROW(p.validate(), an::ParamError);
  p = {};
  p.margin = 28;  // legal margin, but no elongated shape fits in 8 px
  EXPECT_THROW(an::gen_scene(an::ShapeFamily::filled_rect, an::ShapeClass::horizontal, 1, p), an::ParamError);
}

TEST(GenScene, ClassAspectHoldsForEveryFamily) {
  const an::RenderParams p;
  for (an::ShapeFamily f : an::kAllFamilies)
    for (an::ShapeClass c : kClasses)
      for (std::uint64_t seed = 0; seed < 100; ++seed) {
        const an::ShapeScene s = an::gen_scene(f, c, seed, p);
        double x0 = 1e9, x1 = -1e9, y0 = 1e9, y1 = -1e9;
        for (const an::Point& q : s.contour) {
          x0 = std::min(x0, q.x);
          x1 = std::max(x1, q.x);
          y0 = std::min(y0, q.y);
          y1 = std::max(y1, q.y);
        }
        const double w = x1 - x0, h = y1 - y0;
        if (c == an::ShapeClass::horizontal) {
          EXPECT_GE(w / h, p.aspect_min - 1e-12) << an::to_string(f) << " seed " << seed;
        } else {
          EXPECT_GE(h / w, p.aspect_min - 1e-12) << an::to_string(f) << " seed " << seed;
        }
        EXPECT_GE(x0, p.margin - 1e-9);
        EXPECT_GE(y0, p.margin - 1e-9);
        EXPECT_LE(x1, p.width - p.margin + 1e-9);
        EXPECT_LE(y1, p.height - p.margin + 1e-9);
      }
}

TEST(GenScene, Deterministic) {
  const an::RenderParams p;
  for (an::ShapeFamily f : an::kAllFamilies) {
    const an::ShapeScene a = an::gen_scene(f, an::ShapeClass::vertical, 123, p);
    const an::ShapeScene b = an::gen_scene(f, an::ShapeClass::vertical, 123, p);
    ASSERT_EQ(a.contour.size(), b.contour.size());
    for (std::size_t i = 0; i < a.contour.size(); ++i) {
      EXPECT_EQ(a.contour[i].x, b.contour[i].x);
      EXPECT_EQ(a.contour[i].y, b.contour[i].y);
    }
    EXPECT_EQ(an::rasterize(a).pixels, an::rasterize(b).pixels);
  }
}

TEST(GenScene, RandomContourHasConfiguredPointCount) {
  an::RenderParams p;
  p.contour_points = 11;
  EXPECT_EQ(an::gen_scene(an::ShapeFamily::random_outline, an::ShapeClass::horizontal, 4, p).contour.size(), 11u);
  EXPECT_EQ(an::gen_scene(an::ShapeFamily::filled_ellipse, an::ShapeClass::horizontal, 4, p).contour.size(),
            static_cast<std::size_t>(an::kEllipseSegments));
}

TEST(Rasterize, FilledRectCountEqualsArea) {
  an::ShapeScene s;
  s.family = an::ShapeFamily::filled_rect;
  s.params.height = 24;
  s.params.width = 32;
  s.contour = {{5, 7}, {15, 7}, {15, 13}, {5, 13}};
  const an::ImageGray img = an::rasterize(s);
  EXPECT_EQ(an::count_value(img, 0.0), 60u);
  const Box b = bbox(img);
  EXPECT_EQ(b.c0, 5);
  EXPECT_EQ(b.c1, 14);
  EXPECT_EQ(b.r0, 7);
  EXPECT_EQ(b.r1, 12);
}

TEST(Rasterize, GeneratedRectanglesFillTheirIntegerBox) {
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    const an::ShapeScene s = an::gen_scene(an::ShapeFamily::filled_rect, an::ShapeClass::horizontal, seed, {});
    const double w = 2 * s.half_width, h = 2 * s.half_height;
    EXPECT_EQ(an::count_value(an::rasterize(s), 0.0), static_cast<std::size_t>(w * h));
  }
}

TEST(Rasterize, FillMatchesCrossingNumberOracle) {
  for (an::ShapeFamily f : {an::ShapeFamily::filled_rect, an::ShapeFamily::filled_ellipse,
                            an::ShapeFamily::random_filled})
    for (an::ShapeClass c : kClasses)
      for (std::uint64_t seed = 0; seed < 40; ++seed) {
        const an::ShapeScene s = an::gen_scene(f, c, seed, {});
        const an::ImageGray img = an::rasterize(s);
        for (int r = 0; r < img.height; ++r)
          for (int col = 0; col < img.width; ++col) {
            const bool expect = inside(s.contour, col + 0.5, r + 0.5);
            ASSERT_EQ(img.at(r, col) == 0.0, expect) << an::to_string(f) << " seed " << seed << " at " << r << ","
                                                     << col;
          }
      }
}

TEST(Rasterize, EllipseAreaNearAnalytic) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const an::ShapeScene s = an::gen_scene(an::ShapeFamily::filled_ellipse, an::ShapeClass::vertical, seed, {});
    const double area = std::numbers::pi * s.half_width * s.half_height;
    const double count = static_cast<double>(an::count_value(an::rasterize(s), 0.0));
    // Boundary pixels: at most about one perimeter's worth of error.
    const double perimeter = 2 * std::numbers::pi * std::max(s.half_width, s.half_height);
    EXPECT_NEAR(count, area, perimeter) << "seed " << seed;
  }
}

TEST(Rasterize, RectOutlinePixelAudit) {
  const an::RenderParams p;
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    const an::ShapeScene s = an::gen_scene(an::ShapeFamily::rect_outline, an::ShapeClass::horizontal, seed, p);
    const an::ImageGray img = an::rasterize(s);
    const double perimeter = 4 * (s.half_width + s.half_height);
    const int t = p.outline_thickness;
    EXPECT_LE(static_cast<double>(an::count_value(img, 0.0)), perimeter * t + 4.0 * t * t);
    EXPECT_EQ(img.at(static_cast<int>(s.center.y), static_cast<int>(s.center.x)), p.background);
  }
}

TEST(Rasterize, TexturedStripesAreOrthogonalAndInside) {
  const an::RenderParams p;
  const double band = p.stripe_duty * p.stripe_period;
  for (an::ShapeClass c : kClasses)
    for (std::uint64_t seed = 0; seed < 30; ++seed) {
      const an::ShapeScene s = an::gen_scene(an::ShapeFamily::random_textured, c, seed, p);
      const an::ImageGray img = an::rasterize(s);
      for (int r = 0; r < img.height; ++r)
        for (int col = 0; col < img.width; ++col) {
          if (img.at(r, col) != p.foreground) {
            EXPECT_EQ(img.at(r, col), p.background);
            continue;
          }
          const int phase = (c == an::ShapeClass::horizontal ? col : r) % p.stripe_period;
          EXPECT_LT(phase, band);
          EXPECT_TRUE(inside(s.contour, col + 0.5, r + 0.5));
        }
    }
}

TEST(Rasterize, UntexturedImagesAreBinaryAndLargeEnough) {
  for (an::ShapeFamily f : an::kAllFamilies)
    for (an::ShapeClass c : kClasses)
      for (std::uint64_t seed = 0; seed < 200; ++seed) {
        const an::ImageGray img = an::rasterize(an::gen_scene(f, c, seed, {}));
        const std::size_t fg = an::count_value(img, 0.0);
        EXPECT_GE(fg, 16u) << an::to_string(f) << " seed " << seed;
        if (is_untextured(f)) EXPECT_EQ(fg + an::count_value(img, 1.0), img.pixels.size());
      }
}

TEST(Separability, OracleIsPerfectOnAThousandPerClass) {
  for (an::ShapeFamily f : an::kAllFamilies) {
    const an::Dataset d = an::generate_dataset(std::span<const an::ShapeFamily>(&f, 1), 1000, 2024, {});
    int correct = 0;
    for (const an::LabeledImage& s : d) {
      const Box b = bbox(s.image);
      const int predicted = b.w() > b.h() ? 0 : 1;
      correct += predicted == s.label;
      ASSERT_EQ(an::bbox_aspect_oracle(s.image), predicted);
    }
    EXPECT_EQ(correct, 2000) << an::to_string(f);
  }
}

TEST(Separability, SelftestCheckAgrees) {
  const an::selftest::CheckResult r =
      an::selftest::check_generator_separability(an::ShapeFamily::random_outline, 1000, 77);
  EXPECT_TRUE(r.passed) << r.detail;
}

TEST(Dataset, CountsLabelsAndSeeds) {
  const an::ShapeFamily f = an::ShapeFamily::filled_ellipse;
  const an::Dataset d = an::generate_dataset(std::span<const an::ShapeFamily>(&f, 1), 250, 9, {});
  ASSERT_EQ(d.size(), 500u);
  int vertical = 0;
  for (std::size_t i = 0; i < d.size(); ++i) {
    vertical += d[i].label;
    const int cls = i < 250 ? 0 : 1;
    EXPECT_EQ(d[i].label, cls);
    EXPECT_EQ(d[i].seed, an::derive_seed(9, {static_cast<std::uint64_t>(cls), i % 250}));
  }
  EXPECT_EQ(vertical, 250);
}

TEST(Dataset, DisjointSeedsShareNoImages) {
  const an::ShapeFamily f = an::ShapeFamily::random_outline;
  const an::Dataset a = an::generate_dataset(std::span<const an::ShapeFamily>(&f, 1), 200, 1, {});
  const an::Dataset b = an::generate_dataset(std::span<const an::ShapeFamily>(&f, 1), 200, 2, {});
  std::set<std::size_t> hashes;
  for (const an::LabeledImage& s : a) hashes.insert(pixel_hash(s.image));
  for (const an::LabeledImage& s : b) EXPECT_EQ(hashes.count(pixel_hash(s.image)), 0u);
}

TEST(Dataset, FamilyMixAlternates) {
  const an::ShapeFamily mix[] = {an::ShapeFamily::rect_outline, an::ShapeFamily::ellipse_outline};
  const an::Dataset d = an::generate_dataset(mix, 10, 3, {});
  for (int label : {0, 1}) {
    int rect = 0, ellipse = 0;
    for (const an::LabeledImage& s : d) {
      if (s.label != label) continue;
      rect += s.family == an::ShapeFamily::rect_outline;
      ellipse += s.family == an::ShapeFamily::ellipse_outline;
    }
    EXPECT_EQ(rect, 5);
    EXPECT_EQ(ellipse, 5);
  }
  EXPECT_EQ(d[0].family, an::ShapeFamily::rect_outline);
  EXPECT_EQ(d[1].family, an::ShapeFamily::ellipse_outline);
}

TEST(Dataset, RejectsBadArguments) {
  const an::ShapeFamily f = an::ShapeFamily::filled_rect;
  EXPECT_THROW(an::generate_dataset(std::span<const an::ShapeFamily>(&f, 1), 0, 1, {}), an::ParamError);
  EXPECT_THROW(an::generate_dataset(std::span<const an::ShapeFamily>(), 1, 1, {}), an::ParamError);
}

TEST(Pgm, RoundTripIsExactForBinaryImages) {
  testing_support::TempDir dir("pgm");
  const an::ImageGray img = an::rasterize(an::gen_scene(an::ShapeFamily::random_filled, an::ShapeClass::vertical, 5, {}));
  an::write_pgm(img, dir / "a.pgm");
  const std::string bytes = testing_support::slurp(dir / "a.pgm");
  EXPECT_EQ(bytes.rfind("P5\n64 64\n255\n", 0), 0u);
  EXPECT_EQ(bytes.size(), 13u + 64u * 64u);
  const an::ImageGray back = an::read_pgm(dir / "a.pgm");
  EXPECT_EQ(back.height, 64);
  EXPECT_EQ(back.width, 64);
  EXPECT_EQ(back.pixels, img.pixels);
}

TEST(Pgm, BadFilesAreIoErrors) {
  testing_support::TempDir dir("pgmbad");
  EXPECT_THROW(an::read_pgm(dir / "none.pgm"), an::IoError);
  std::ofstream(dir / "bad.pgm") << "P2\n2 2\n255\n0 0 0 0\n";
  EXPECT_THROW(an::read_pgm(dir / "bad.pgm"), an::IoError);
  std::ofstream(dir / "short.pgm", std::ios::binary) << "P5\n4 4\n255\nabc";
  EXPECT_THROW(an::read_pgm(dir / "short.pgm"), an::IoError);
}

TEST(Export, LayoutManifestAndRoundTrip) {
  testing_support::TempDir dir("export");
  const an::ShapeFamily mix[] = {an::ShapeFamily::rect_outline, an::ShapeFamily::ellipse_outline};
  const an::Dataset d = an::generate_dataset(mix, 3, 8, {});
  an::export_dataset(d, dir.path());
  EXPECT_TRUE(std::filesystem::exists(dir / "horizontal/0.pgm"));
  EXPECT_TRUE(std::filesystem::exists(dir / "vertical/2.pgm"));
  const std::string manifest = testing_support::slurp(dir / "manifest.csv");
  EXPECT_EQ(manifest.rfind("path,label,family,seed\n", 0), 0u);
  EXPECT_NE(manifest.find("horizontal/0.pgm,0,rect_outline," + std::to_string(d[0].seed) + "\n"), std::string::npos);

  const an::Dataset back = an::load_dataset(dir.path());
  ASSERT_EQ(back.size(), d.size());
  for (std::size_t i = 0; i < d.size(); ++i) {
    EXPECT_EQ(back[i].label, d[i].label);
    EXPECT_EQ(back[i].family, d[i].family);
    EXPECT_EQ(back[i].seed, d[i].seed);
    EXPECT_EQ(back[i].image.pixels, d[i].image.pixels);
  }
}
