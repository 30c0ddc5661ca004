#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

namespace abstractnet {

enum class ShapeClass { horizontal = 0, vertical = 1 };

enum class ShapeFamily {
  filled_rect,
  filled_ellipse,
  rect_outline,
  ellipse_outline,
  random_outline,
  random_filled,
  random_textured,
};

inline constexpr ShapeFamily kAllFamilies[] = {
    ShapeFamily::filled_rect,    ShapeFamily::filled_ellipse, ShapeFamily::rect_outline,
    ShapeFamily::ellipse_outline, ShapeFamily::random_outline, ShapeFamily::random_filled,
    ShapeFamily::random_textured,
};

std::string to_string(ShapeFamily family);
std::string to_string(ShapeClass cls);
ShapeFamily parse_family(const std::string& name);
ShapeClass parse_class(const std::string& name);
inline int label_of(ShapeClass cls) noexcept { return static_cast<int>(cls); }

struct RenderParams {
  int height = 64;
  int width = 64;
  int margin = 4;
  double aspect_min = 1.6;
  int outline_thickness = 2;
  int stripe_period = 6;
  double stripe_duty = 0.5;
  int contour_points = 16;
  double radial_noise = 0.35;
  double foreground = 0.0;
  double background = 1.0;

  /// Throws ParamError when any invariant fails or no shape of the required
  /// aspect fits inside the margins.
  void validate() const;

  friend bool operator==(const RenderParams&, const RenderParams&) = default;
};

/// Shorter side of every generated shape, in pixels.
inline constexpr double kMinShortExtent = 6.0;
/// Upper bound of the sampled aspect ratio for random contours.
inline constexpr double kMaxRandomAspect = 3.0;
/// Ellipses are rendered as regular 64-gons in parameter space.
inline constexpr int kEllipseSegments = 64;
/// Textured shapes are redrawn until at least this many pixels are foreground
/// and the striped bounding box still has the class orientation.
inline constexpr std::size_t kMinTexturedForeground = 16;
inline constexpr std::uint64_t kMaxTexturedAttempts = 1000;

struct Point {
  double x = 0.0;
  double y = 0.0;
};

/// Everything needed to render one image. Coordinates are in pixel units with
/// the origin at the top-left image corner; pixel (r, c) has its center at
/// (c + 0.5, r + 0.5).
struct ShapeScene {
  ShapeFamily family = ShapeFamily::filled_rect;
  ShapeClass cls = ShapeClass::horizontal;
  std::uint64_t seed = 0;
  RenderParams params;
  Point center;
  double half_width = 0.0;
  double half_height = 0.0;
  /// Closed polygon (last vertex connects back to the first).
  std::vector<Point> contour;
};

struct ImageGray {
  int height = 0;
  int width = 0;
  std::vector<double> pixels;

  double at(int row, int col) const noexcept { return pixels[static_cast<std::size_t>(row) * width + col]; }
  double& at(int row, int col) noexcept { return pixels[static_cast<std::size_t>(row) * width + col]; }
};

/// Samples geometry for one shape. Class membership is enforced exactly:
/// bounding-box long/short >= aspect_min, resampling until satisfied.
ShapeScene gen_scene(ShapeFamily family, ShapeClass cls, std::uint64_t seed, const RenderParams& params);

/// Hard-edged rendering: even-odd scanline fill sampled at pixel centers,
/// square-brush stroking for outlines, orthogonal stripes for the textured family.
ImageGray rasterize(const ShapeScene& scene);

struct LabeledImage {
  ImageGray image;
  int label = 0;
  ShapeFamily family = ShapeFamily::filled_rect;
  std::uint64_t seed = 0;
};

using Dataset = std::vector<LabeledImage>;

/// n_per_class images per class; image i of class c uses seed
/// derive_seed(base_seed, {c, i}) and family families[i % families.size()].
/// Ordered class-major: all horizontal images, then all vertical ones.
Dataset generate_dataset(std::span<const ShapeFamily> families, int n_per_class, std::uint64_t base_seed,
                         const RenderParams& params);

/// Reference classifier: compares the width and height of the bounding box of
/// foreground pixels. Returns the predicted label.
int bbox_aspect_oracle(const ImageGray& image, double foreground = 0.0);

struct PixelBox {
  int row0 = 0, col0 = 0, row1 = -1, col1 = -1;  // inclusive; empty if row1 < row0
  int width() const noexcept { return col1 - col0 + 1; }
  int height() const noexcept { return row1 - row0 + 1; }
  bool empty() const noexcept { return row1 < row0; }
};
PixelBox foreground_bbox(const ImageGray& image, double foreground = 0.0);
std::size_t count_value(const ImageGray& image, double value);

/// Binary PGM (P5, maxval 255); values are mapped by round(v * 255).
void write_pgm(const ImageGray& image, const std::filesystem::path& path);
ImageGray read_pgm(const std::filesystem::path& path);

/// Writes `<root>/<class>/<index>.pgm` and `<root>/manifest.csv`
/// (path,label,family,seed; paths relative to root).
void export_dataset(const Dataset& data, const std::filesystem::path& root);
Dataset load_dataset(const std::filesystem::path& root);

}  // namespace abstractnet
