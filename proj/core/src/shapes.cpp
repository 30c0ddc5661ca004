#include "abstractnet/shapes.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <sstream>

#include "abstractnet/error.hpp"
#include "abstractnet/rng.hpp"

namespace abstractnet {

namespace {

constexpr const char* kFamilyNames[] = {
    "filled_rect", "filled_ellipse", "rect_outline", "ellipse_outline", "random_outline", "random_filled",
    "random_textured",
};

using Mask = std::vector<unsigned char>;

// Extents available to the long and short axis of a shape of class `cls`.
struct Room {
  double long_max;
  double short_max;
};

Room room_for(ShapeClass cls, const RenderParams& p) {
  const double w = p.width - 2.0 * p.margin;
  const double h = p.height - 2.0 * p.margin;
  return cls == ShapeClass::horizontal ? Room{w, h} : Room{h, w};
}

double min_long_extent(const RenderParams& p) { return std::ceil(p.aspect_min * kMinShortExtent); }

// Uniform on [lo, hi], tolerating lo == hi.
double uniform_closed(SeededRng& rng, double lo, double hi) { return lo < hi ? rng.uniform(lo, hi) : lo; }

// Even-odd fill sampled at pixel centers. Edges are half-open in y so shared
// vertices are counted once.
Mask fill_polygon(const std::vector<Point>& poly, int height, int width) {
  Mask mask(static_cast<std::size_t>(height) * width, 0);
  std::vector<double> xs;
  const std::size_t n = poly.size();
  for (int row = 0; row < height; ++row) {
    const double yc = row + 0.5;
    xs.clear();
    for (std::size_t i = 0; i < n; ++i) {
      const Point& a = poly[i];
      const Point& b = poly[(i + 1) % n];
      if ((a.y <= yc && yc < b.y) || (b.y <= yc && yc < a.y)) {
        xs.push_back(a.x + (yc - a.y) * (b.x - a.x) / (b.y - a.y));
      }
    }
    std::sort(xs.begin(), xs.end());
    for (std::size_t k = 0; k + 1 < xs.size(); k += 2) {
      // Pixel columns whose center lies in [xs[k], xs[k+1]).
      const int c0 = std::max(0, static_cast<int>(std::ceil(xs[k] - 0.5)));
      const int c1 = std::min(width, static_cast<int>(std::ceil(xs[k + 1] - 0.5)));
      for (int col = c0; col < c1; ++col) {
        mask[static_cast<std::size_t>(row) * width + col] = 1;
      }
    }
  }
  return mask;
}

void stamp(Mask& mask, int height, int width, Point p, int thickness) {
  const int col0 = static_cast<int>(std::floor(p.x - thickness / 2.0 + 0.5));
  const int row0 = static_cast<int>(std::floor(p.y - thickness / 2.0 + 0.5));
  for (int r = std::max(0, row0); r < std::min(height, row0 + thickness); ++r) {
    for (int c = std::max(0, col0); c < std::min(width, col0 + thickness); ++c) {
      mask[static_cast<std::size_t>(r) * width + c] = 1;
    }
  }
}

// Strokes every edge of the closed polygon with a square brush, sampled at
// half-pixel steps along the edge.
Mask stroke_polygon(const std::vector<Point>& poly, int thickness, int height, int width) {
  Mask mask(static_cast<std::size_t>(height) * width, 0);
  const std::size_t n = poly.size();
  for (std::size_t i = 0; i < n; ++i) {
    const Point& a = poly[i];
    const Point& b = poly[(i + 1) % n];
    const double len = std::max(std::abs(b.x - a.x), std::abs(b.y - a.y));
    const int steps = std::max(1, static_cast<int>(std::ceil(len * 2.0)));
    for (int s = 0; s <= steps; ++s) {
      const double t = static_cast<double>(s) / steps;
      stamp(mask, height, width, Point{a.x + t * (b.x - a.x), a.y + t * (b.y - a.y)}, thickness);
    }
  }
  return mask;
}

void set_box(ShapeScene& scene, double x0, double y0, double w, double h) {
  scene.center = {x0 + w / 2.0, y0 + h / 2.0};
  scene.half_width = w / 2.0;
  scene.half_height = h / 2.0;
}

void gen_rect(ShapeScene& scene, SeededRng& rng) {
  const RenderParams& p = scene.params;
  const Room room = room_for(scene.cls, p);
  const auto long_lo = static_cast<std::int64_t>(min_long_extent(p));
  const auto long_hi = static_cast<std::int64_t>(room.long_max);
  const auto short_lo = static_cast<std::int64_t>(kMinShortExtent);
  std::int64_t long_side = 0;
  std::int64_t short_side = 0;
  for (;;) {
    long_side = rng.uniform_int(long_lo, long_hi);
    std::int64_t short_hi = std::min(static_cast<std::int64_t>(room.short_max),
                                     static_cast<std::int64_t>(std::floor(long_side / p.aspect_min)));
    while (short_hi > 0 && static_cast<double>(short_hi) * p.aspect_min > static_cast<double>(long_side)) {
      --short_hi;
    }
    if (short_hi < short_lo) {
      continue;
    }
    short_side = rng.uniform_int(short_lo, short_hi);
    if (static_cast<double>(long_side) >= p.aspect_min * static_cast<double>(short_side)) {
      break;
    }
  }
  const bool horiz = scene.cls == ShapeClass::horizontal;
  const auto w = static_cast<int>(horiz ? long_side : short_side);
  const auto h = static_cast<int>(horiz ? short_side : long_side);
  const auto x0 = static_cast<double>(rng.uniform_int(p.margin, p.width - p.margin - w));
  const auto y0 = static_cast<double>(rng.uniform_int(p.margin, p.height - p.margin - h));
  scene.contour = {{x0, y0}, {x0 + w, y0}, {x0 + w, y0 + h}, {x0, y0 + h}};
  set_box(scene, x0, y0, w, h);
}

void gen_ellipse(ShapeScene& scene, SeededRng& rng) {
  const RenderParams& p = scene.params;
  const Room room = room_for(scene.cls, p);
  double long_side = 0.0;
  double short_side = 0.0;
  for (;;) {
    long_side = uniform_closed(rng, min_long_extent(p), room.long_max);
    const double short_hi = std::min(room.short_max, long_side / p.aspect_min);
    if (short_hi < kMinShortExtent) {
      continue;
    }
    short_side = uniform_closed(rng, kMinShortExtent, short_hi);
    if (long_side >= p.aspect_min * short_side) {
      break;
    }
  }
  const bool horiz = scene.cls == ShapeClass::horizontal;
  const double w = horiz ? long_side : short_side;
  const double h = horiz ? short_side : long_side;
  const double x0 = uniform_closed(rng, p.margin, p.width - p.margin - w);
  const double y0 = uniform_closed(rng, p.margin, p.height - p.margin - h);
  set_box(scene, x0, y0, w, h);
  scene.contour.clear();
  for (int k = 0; k < kEllipseSegments; ++k) {
    const double theta = 2.0 * std::numbers::pi * k / kEllipseSegments;
    scene.contour.push_back({scene.center.x + scene.half_width * std::cos(theta),
                             scene.center.y + scene.half_height * std::sin(theta)});
  }
}

// Radially perturbed circle, stretched so its bounding box has the sampled
// aspect ratio along the class axis. Positive radii keep the contour
// star-shaped, hence simple.
void gen_random(ShapeScene& scene, SeededRng& rng) {
  const RenderParams& p = scene.params;
  const int n = p.contour_points;
  const double phase = rng.uniform(0.0, 2.0 * std::numbers::pi / n);
  std::vector<Point> raw;
  raw.reserve(static_cast<std::size_t>(n));
  for (int k = 0; k < n; ++k) {
    const double theta = phase + 2.0 * std::numbers::pi * k / n;
    const double r = 1.0 + rng.uniform(-p.radial_noise, p.radial_noise);
    raw.push_back({r * std::cos(theta), r * std::sin(theta)});
  }
  double minx = raw[0].x, maxx = raw[0].x, miny = raw[0].y, maxy = raw[0].y;
  for (const Point& q : raw) {
    minx = std::min(minx, q.x);
    maxx = std::max(maxx, q.x);
    miny = std::min(miny, q.y);
    maxy = std::max(maxy, q.y);
  }

  const Room room = room_for(scene.cls, p);
  double long_side = 0.0;
  double short_side = 0.0;
  for (;;) {
    const double aspect = uniform_closed(rng, p.aspect_min, std::max(p.aspect_min, kMaxRandomAspect));
    const double lo = std::max(min_long_extent(p), aspect * kMinShortExtent);
    const double hi = std::min(room.long_max, aspect * room.short_max);
    if (lo > hi) {
      continue;
    }
    long_side = uniform_closed(rng, lo, hi);
    short_side = long_side / aspect;
    if (short_side >= kMinShortExtent && short_side <= room.short_max && long_side >= p.aspect_min * short_side) {
      break;
    }
  }
  const bool horiz = scene.cls == ShapeClass::horizontal;
  const double w = horiz ? long_side : short_side;
  const double h = horiz ? short_side : long_side;
  const double x0 = uniform_closed(rng, p.margin, p.width - p.margin - w);
  const double y0 = uniform_closed(rng, p.margin, p.height - p.margin - h);
  const double sx = w / (maxx - minx);
  const double sy = h / (maxy - miny);
  scene.contour.clear();
  for (const Point& q : raw) {
    scene.contour.push_back({x0 + (q.x - minx) * sx, y0 + (q.y - miny) * sy});
  }
  set_box(scene, x0, y0, w, h);
}

}  // namespace

std::string to_string(ShapeFamily family) { return kFamilyNames[static_cast<int>(family)]; }

std::string to_string(ShapeClass cls) { return cls == ShapeClass::horizontal ? "horizontal" : "vertical"; }

ShapeFamily parse_family(const std::string& name) {
  for (ShapeFamily f : kAllFamilies) {
    if (to_string(f) == name) {
      return f;
    }
  }
  throw ParamError("unknown shape family '" + name + "'");
}

ShapeClass parse_class(const std::string& name) {
  if (name == "horizontal" || name == "0") return ShapeClass::horizontal;
  if (name == "vertical" || name == "1") return ShapeClass::vertical;
  throw ParamError("unknown shape class '" + name + "' (expected horizontal or vertical)");
}

void RenderParams::validate() const {
  if (height < 1 || width < 1) throw ParamError("render: image size must be positive");
  if (margin < 0 || 2 * margin >= std::min(height, width)) {
    throw ParamError("render: margin " + std::to_string(margin) + " leaves no drawable area");
  }
  if (!(aspect_min > 1.0)) throw ParamError("render: aspect_min must exceed 1");
  if (outline_thickness < 1) throw ParamError("render: outline_thickness must be >= 1");
  if (stripe_period < 1) throw ParamError("render: stripe_period must be >= 1");
  if (!(stripe_duty > 0.0 && stripe_duty < 1.0)) throw ParamError("render: stripe_duty must lie in (0, 1)");
  if (contour_points < 3) throw ParamError("render: contour_points must be >= 3");
  if (!(radial_noise >= 0.0 && radial_noise < 1.0)) throw ParamError("render: radial_noise must lie in [0, 1)");
  const double short_room = std::min(height, width) - 2.0 * margin;
  const double long_room = std::max(height, width) - 2.0 * margin;
  if (short_room < kMinShortExtent || short_room < min_long_extent(*this) || long_room < min_long_extent(*this)) {
    throw ParamError("render: no shape with aspect >= " + std::to_string(aspect_min) + " and short side >= " +
                     std::to_string(kMinShortExtent) + " px fits inside the margins");
  }
}

ShapeScene gen_scene(ShapeFamily family, ShapeClass cls, std::uint64_t seed, const RenderParams& params) {
  params.validate();
  ShapeScene scene;
  scene.family = family;
  scene.cls = cls;
  scene.seed = seed;
  scene.params = params;
  SeededRng rng(seed);
  switch (family) {
    case ShapeFamily::filled_rect:
    case ShapeFamily::rect_outline:
      gen_rect(scene, rng);
      break;
    case ShapeFamily::filled_ellipse:
    case ShapeFamily::ellipse_outline:
      gen_ellipse(scene, rng);
      break;
    case ShapeFamily::random_outline:
    case ShapeFamily::random_filled:
      gen_random(scene, rng);
      break;
    case ShapeFamily::random_textured:
      // Background bands can erase the extreme columns (or rows) of a thin
      // contour and flip its foreground bounding box. Redraw from derived
      // seeds until the striped image still carries the class.
      for (std::uint64_t attempt = 0;; ++attempt) {
        if (attempt == kMaxTexturedAttempts) {
          throw ParamError("render: no textured shape keeps its class under the stripe settings");
        }
        SeededRng local = attempt == 0 ? rng : SeededRng(derive_seed(seed, {attempt}));
        gen_random(scene, local);
        const ImageGray img = rasterize(scene);
        if (bbox_aspect_oracle(img, params.foreground) == label_of(cls) &&
            count_value(img, params.foreground) >= kMinTexturedForeground) {
          break;
        }
      }
      break;
  }
  return scene;
}

ImageGray rasterize(const ShapeScene& scene) {
  const RenderParams& p = scene.params;
  Mask mask;
  switch (scene.family) {
    case ShapeFamily::filled_rect:
    case ShapeFamily::filled_ellipse:
    case ShapeFamily::random_filled:
      mask = fill_polygon(scene.contour, p.height, p.width);
      break;
    case ShapeFamily::rect_outline:
    case ShapeFamily::ellipse_outline:
    case ShapeFamily::random_outline:
      mask = stroke_polygon(scene.contour, p.outline_thickness, p.height, p.width);
      break;
    case ShapeFamily::random_textured: {
      mask = fill_polygon(scene.contour, p.height, p.width);
      // Stripes run orthogonal to the class axis: a horizontal shape gets
      // vertical bands (selected by column), a vertical shape horizontal ones.
      const double band = p.stripe_duty * p.stripe_period;
      const bool by_column = scene.cls == ShapeClass::horizontal;
      for (int r = 0; r < p.height; ++r) {
        for (int c = 0; c < p.width; ++c) {
          const int phase = (by_column ? c : r) % p.stripe_period;
          if (static_cast<double>(phase) >= band) {
            mask[static_cast<std::size_t>(r) * p.width + c] = 0;
          }
        }
      }
      break;
    }
  }
  ImageGray img{p.height, p.width, std::vector<double>(mask.size(), p.background)};
  for (std::size_t i = 0; i < mask.size(); ++i) {
    if (mask[i]) {
      img.pixels[i] = p.foreground;
    }
  }
  return img;
}

Dataset generate_dataset(std::span<const ShapeFamily> families, int n_per_class, std::uint64_t base_seed,
                         const RenderParams& params) {
  if (families.empty()) {
    throw ParamError("generate_dataset: no shape families given");
  }
  if (n_per_class < 1) {
    throw ParamError("generate_dataset: n_per_class must be >= 1");
  }
  params.validate();
  Dataset out;
  out.reserve(2 * static_cast<std::size_t>(n_per_class));
  for (ShapeClass cls : {ShapeClass::horizontal, ShapeClass::vertical}) {
    for (int i = 0; i < n_per_class; ++i) {
      const std::uint64_t seed =
          derive_seed(base_seed, {static_cast<std::uint64_t>(label_of(cls)), static_cast<std::uint64_t>(i)});
      const ShapeFamily family = families[static_cast<std::size_t>(i) % families.size()];
      out.push_back({rasterize(gen_scene(family, cls, seed, params)), label_of(cls), family, seed});
    }
  }
  return out;
}

PixelBox foreground_bbox(const ImageGray& image, double foreground) {
  PixelBox box{image.height, image.width, -1, -1};
  for (int r = 0; r < image.height; ++r) {
    for (int c = 0; c < image.width; ++c) {
      if (image.at(r, c) == foreground) {
        box.row0 = std::min(box.row0, r);
        box.row1 = std::max(box.row1, r);
        box.col0 = std::min(box.col0, c);
        box.col1 = std::max(box.col1, c);
      }
    }
  }
  return box;
}

int bbox_aspect_oracle(const ImageGray& image, double foreground) {
  const PixelBox box = foreground_bbox(image, foreground);
  if (box.empty()) {
    return label_of(ShapeClass::horizontal);
  }
  return box.width() > box.height() ? label_of(ShapeClass::horizontal) : label_of(ShapeClass::vertical);
}

std::size_t count_value(const ImageGray& image, double value) {
  return static_cast<std::size_t>(std::count(image.pixels.begin(), image.pixels.end(), value));
}

// PGM -----------------------------------------------------------------------

void write_pgm(const ImageGray& image, const std::filesystem::path& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) {
    throw IoError("cannot open for writing: " + path.string());
  }
  os << "P5\n" << image.width << ' ' << image.height << "\n255\n";
  std::string bytes(image.pixels.size(), '\0');
  for (std::size_t i = 0; i < image.pixels.size(); ++i) {
    const double v = std::clamp(image.pixels[i], 0.0, 1.0);
    bytes[i] = static_cast<char>(static_cast<unsigned char>(std::lround(v * 255.0)));
  }
  os.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!os) {
    throw IoError("write failed: " + path.string());
  }
}

namespace {

// Reads the next header token, skipping whitespace and '#' comments.
std::string pgm_token(std::istream& is) {
  std::string tok;
  int ch = is.get();
  for (;;) {
    while (ch != EOF && std::isspace(ch)) ch = is.get();
    if (ch == '#') {
      while (ch != EOF && ch != '\n') ch = is.get();
      continue;
    }
    break;
  }
  while (ch != EOF && !std::isspace(ch)) {
    tok.push_back(static_cast<char>(ch));
    ch = is.get();
  }
  return tok;
}

}  // namespace

ImageGray read_pgm(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) {
    throw IoError("cannot open: " + path.string());
  }
  if (pgm_token(is) != "P5") {
    throw IoError("not a binary PGM: " + path.string());
  }
  ImageGray img;
  int maxval = 0;
  try {
    img.width = std::stoi(pgm_token(is));
    img.height = std::stoi(pgm_token(is));
    maxval = std::stoi(pgm_token(is));
  } catch (const std::exception&) {
    throw IoError("bad PGM header: " + path.string());
  }
  if (img.width < 1 || img.height < 1 || maxval != 255) {
    throw IoError("unsupported PGM (need maxval 255): " + path.string());
  }
  std::string bytes(static_cast<std::size_t>(img.width) * img.height, '\0');
  is.read(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!is) {
    throw IoError("truncated PGM: " + path.string());
  }
  img.pixels.resize(bytes.size());
  for (std::size_t i = 0; i < bytes.size(); ++i) {
    img.pixels[i] = static_cast<unsigned char>(bytes[i]) / 255.0;
  }
  return img;
}

void export_dataset(const Dataset& data, const std::filesystem::path& root) {
  namespace fs = std::filesystem;
  std::error_code ec;
  fs::create_directories(root, ec);
  if (ec) {
    throw IoError("cannot create " + root.string() + ": " + ec.message());
  }
  std::ofstream manifest(root / "manifest.csv");
  if (!manifest) {
    throw IoError("cannot open for writing: " + (root / "manifest.csv").string());
  }
  manifest << "path,label,family,seed\n";
  int counters[2] = {0, 0};
  for (const LabeledImage& item : data) {
    const auto cls = static_cast<ShapeClass>(item.label);
    const fs::path dir = root / to_string(cls);
    fs::create_directories(dir, ec);
    if (ec) {
      throw IoError("cannot create " + dir.string() + ": " + ec.message());
    }
    const std::string rel = to_string(cls) + "/" + std::to_string(counters[item.label]++) + ".pgm";
    write_pgm(item.image, root / rel);
    manifest << rel << ',' << item.label << ',' << to_string(item.family) << ',' << item.seed << '\n';
  }
  if (!manifest) {
    throw IoError("write failed: " + (root / "manifest.csv").string());
  }
}

Dataset load_dataset(const std::filesystem::path& root) {
  const auto manifest_path = root / "manifest.csv";
  std::ifstream is(manifest_path);
  if (!is) {
    throw IoError("cannot open manifest: " + manifest_path.string());
  }
  std::string line;
  std::getline(is, line);
  if (line != "path,label,family,seed") {
    throw IoError("unexpected manifest header in " + manifest_path.string());
  }
  Dataset out;
  int lineno = 1;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::istringstream row(line);
    std::string path, label, family, seed;
    if (!std::getline(row, path, ',') || !std::getline(row, label, ',') || !std::getline(row, family, ',') ||
        !std::getline(row, seed)) {
      throw IoError(manifest_path.string() + ":" + std::to_string(lineno) + ": malformed row");
    }
    LabeledImage item;
    item.image = read_pgm(root / path);
    try {
      item.label = std::stoi(label);
      item.seed = std::stoull(seed);
    } catch (const std::exception&) {
      throw IoError(manifest_path.string() + ":" + std::to_string(lineno) + ": bad number");
    }
    item.family = parse_family(family);
    out.push_back(std::move(item));
  }
  return out;
}

}  // namespace abstractnet
