#include "patchflow/scene.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "patchflow/rng.hpp"
#include "patchflow/util.hpp"

namespace patchflow {

namespace {

// One box-blur pass (clamped window) over a single channel plane.
void box_blur(std::vector<double>& plane, int h, int w, int radius) {
  std::vector<double> tmp(plane.size());
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      double acc = 0.0;
      int cnt = 0;
      for (int k = -radius; k <= radius; ++k) {
        const int xx = std::clamp(x + k, 0, w - 1);
        acc += plane[static_cast<std::size_t>(y) * w + xx];
        ++cnt;
      }
      tmp[static_cast<std::size_t>(y) * w + x] = acc / cnt;
    }
  }
  for (int x = 0; x < w; ++x) {
    for (int y = 0; y < h; ++y) {
      double acc = 0.0;
      int cnt = 0;
      for (int k = -radius; k <= radius; ++k) {
        const int yy = std::clamp(y + k, 0, h - 1);
        acc += tmp[static_cast<std::size_t>(yy) * w + x];
        ++cnt;
      }
      plane[static_cast<std::size_t>(y) * w + x] = acc / cnt;
    }
  }
}

// Band-limited noise: white noise blurred twice with a fixed small box
// kernel, then standardized per channel and mapped around mid-gray with a
// small random tint. The blur keeps enough bandwidth for feature matching to
// be locally unambiguous while staying smooth at the sub-pixel level, and the
// fixed-contrast z-score mapping maximizes usable signal amplitude after
// input normalization instead of letting min/max outliers compress it.
Image make_noise_texture(Rng& rng, int h, int w) {
  Image im = Image::zeros(h, w);
  for (double& v : im.data) v = rng.uniform01();
  for (int c = 0; c < 3; ++c) {
    std::vector<double> plane(im.data.begin() + c * im.plane(),
                              im.data.begin() + (c + 1) * im.plane());
    box_blur(plane, h, w, 4);
    box_blur(plane, h, w, 4);
    double mu = 0.0;
    for (double v : plane) mu += v;
    mu /= static_cast<double>(plane.size());
    double var = 0.0;
    for (double v : plane) var += (v - mu) * (v - mu);
    var /= static_cast<double>(plane.size());
    const double sd = var > 0.0 ? std::sqrt(var) : 1.0;
    const double tint = rng.uniform(-0.08, 0.08);
    for (std::size_t i = 0; i < plane.size(); ++i) {
      const double z = std::clamp((plane[i] - mu) / sd, -2.2, 2.2);
      im.data[c * im.plane() + i] = std::clamp(0.5 + tint + 0.22 * z, 0.0, 1.0);
    }
  }
  return im;
}

double sample_clamped(const Image& im, int c, double y, double x) {
  const int x0 = std::clamp(static_cast<int>(std::floor(x)), 0, im.width - 1);
  const int y0 = std::clamp(static_cast<int>(std::floor(y)), 0, im.height - 1);
  const int x1 = std::min(x0 + 1, im.width - 1);
  const int y1 = std::min(y0 + 1, im.height - 1);
  const double fx = std::clamp(x - x0, 0.0, 1.0);
  const double fy = std::clamp(y - y0, 0.0, 1.0);
  const double top = (1.0 - fx) * im.at(c, y0, x0) + fx * im.at(c, y0, x1);
  const double bot = (1.0 - fx) * im.at(c, y1, x0) + fx * im.at(c, y1, x1);
  return (1.0 - fy) * top + fy * bot;
}

struct Shape {
  ShapeKind kind = ShapeKind::rectangle;
  double cx = 0.0, cy = 0.0;  // center in frame_t coordinates
  int rx = 1, ry = 1;         // half extents
  double angle = 0.0;         // polygon orientation
  double dx = 0.0, dy = 0.0;  // displacement frame_t -> frame_t1
  Image texture;              // anchored to the shape, (2*ry+1) x (2*rx+1)

  bool contains_local(double lx, double ly) const {
    switch (kind) {
      case ShapeKind::rectangle:
        return std::abs(lx) <= rx && std::abs(ly) <= ry;
      case ShapeKind::ellipse: {
        const double nx = lx / rx, ny = ly / ry;
        return nx * nx + ny * ny <= 1.0;
      }
      case ShapeKind::polygon: {
        // triangle inscribed in the half-extent ellipse
        double vx[3], vy[3];
        for (int i = 0; i < 3; ++i) {
          const double a = angle + i * 2.0943951023931953;  // 2*pi/3
          vx[i] = rx * std::cos(a);
          vy[i] = ry * std::sin(a);
        }
        bool pos = false, neg = false;
        for (int i = 0; i < 3; ++i) {
          const int j = (i + 1) % 3;
          const double cross =
              (vx[j] - vx[i]) * (ly - vy[i]) - (vy[j] - vy[i]) * (lx - vx[i]);
          if (cross > 0) pos = true;
          if (cross < 0) neg = true;
        }
        return !(pos && neg);
      }
    }
    return false;
  }
};

}  // namespace

Tensor image_to_tensor(const Image& im) {
  return Tensor::from_values({1, 3, im.height, im.width}, im.data);
}

Image tensor_to_image(const Tensor& t) {
  if (t.ndim() != 4 || t.dim(0) != 1 || t.dim(1) != 3)
    throw ShapeError("tensor_to_image: need (1,3,H,W), got " + shape_string(t.shape()));
  Image im = Image::zeros(t.dim(2), t.dim(3));
  im.data = t.values();
  return im;
}

std::string shape_kind_name(ShapeKind k) {
  switch (k) {
    case ShapeKind::rectangle: return "rectangle";
    case ShapeKind::ellipse: return "ellipse";
    case ShapeKind::polygon: return "polygon";
  }
  throw ConfigError("unknown shape kind value");
}

ShapeKind shape_kind_from_name(const std::string& name) {
  if (name == "rectangle") return ShapeKind::rectangle;
  if (name == "ellipse") return ShapeKind::ellipse;
  if (name == "polygon") return ShapeKind::polygon;
  throw ConfigError("unknown shape kind: " + name);
}

SceneSample generate_scene(const SceneConfig& config) {
  if (config.height < 8 || config.width < 8)
    throw ConfigError("scene extents must be at least 8x8, got " +
                      std::to_string(config.height) + "x" + std::to_string(config.width));
  if (config.shape_kinds.empty() && config.num_shapes > 0)
    throw ConfigError("num_shapes > 0 but shape_kinds is empty");
  Rng rng(config.seed);
  const int h = config.height, w = config.width;

  // Background displacement and oversized canvas so the shifted window stays
  // on real texture.
  double bg_dx, bg_dy;
  if (config.forced_background_translation) {
    bg_dx = config.forced_background_translation->first;
    bg_dy = config.forced_background_translation->second;
  } else if (config.subpixel) {
    bg_dx = rng.uniform(-config.max_background_translation, config.max_background_translation);
    bg_dy = rng.uniform(-config.max_background_translation, config.max_background_translation);
  } else {
    bg_dx = rng.uniform_int(2 * config.max_background_translation + 1) -
            config.max_background_translation;
    bg_dy = rng.uniform_int(2 * config.max_background_translation + 1) -
            config.max_background_translation;
  }
  const int margin = static_cast<int>(std::ceil(
                         std::max({std::abs(bg_dx), std::abs(bg_dy),
                                   static_cast<double>(config.max_background_translation)}))) +
                     1;
  Image canvas = make_noise_texture(rng, h + 2 * margin, w + 2 * margin);

  std::vector<Shape> shapes;
  shapes.reserve(config.num_shapes);
  for (int k = 0; k < config.num_shapes; ++k) {
    Shape s;
    s.kind = config.shape_kinds[k % config.shape_kinds.size()];
    s.rx = config.min_shape_radius +
           rng.uniform_int(config.max_shape_radius - config.min_shape_radius + 1);
    s.ry = config.min_shape_radius +
           rng.uniform_int(config.max_shape_radius - config.min_shape_radius + 1);
    if (k < static_cast<int>(config.forced_shape_translations.size())) {
      s.dx = config.forced_shape_translations[k].first;
      s.dy = config.forced_shape_translations[k].second;
    } else if (config.subpixel) {
      s.dx = rng.uniform(-config.max_shape_translation, config.max_shape_translation);
      s.dy = rng.uniform(-config.max_shape_translation, config.max_shape_translation);
    } else {
      s.dx = rng.uniform_int(2 * config.max_shape_translation + 1) - config.max_shape_translation;
      s.dy = rng.uniform_int(2 * config.max_shape_translation + 1) - config.max_shape_translation;
    }
    // Keep the shape inside the frame in both frames when there is room.
    const int mx = s.rx + static_cast<int>(std::ceil(std::abs(s.dx)));
    const int my = s.ry + static_cast<int>(std::ceil(std::abs(s.dy)));
    s.cx = (2 * mx + 1 <= w) ? mx + rng.uniform_int(w - 2 * mx) : w / 2;
    s.cy = (2 * my + 1 <= h) ? my + rng.uniform_int(h - 2 * my) : h / 2;
    s.angle = rng.uniform(0.0, 6.283185307179586);
    s.texture = make_noise_texture(rng, 2 * s.ry + 2, 2 * s.rx + 2);
    shapes.push_back(std::move(s));
  }

  SceneSample sample;
  sample.pair.frame_t = Image::zeros(h, w);
  sample.pair.frame_t1 = Image::zeros(h, w);
  sample.flow = FlowField::zeros(h, w);
  sample.occluded.assign(static_cast<std::size_t>(h) * w, 0);

  std::vector<int> id_t(static_cast<std::size_t>(h) * w, 0);
  std::vector<int> id_t1(static_cast<std::size_t>(h) * w, 0);

  for (int frame = 0; frame < 2; ++frame) {
    Image& img = frame == 0 ? sample.pair.frame_t : sample.pair.frame_t1;
    std::vector<int>& ids = frame == 0 ? id_t : id_t1;
    const double shift_x = frame == 0 ? 0.0 : bg_dx;
    const double shift_y = frame == 0 ? 0.0 : bg_dy;
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x)
        for (int c = 0; c < 3; ++c)
          img.at(c, y, x) = sample_clamped(canvas, c, margin + y - shift_y, margin + x - shift_x);
    for (std::size_t k = 0; k < shapes.size(); ++k) {
      const Shape& s = shapes[k];
      const double cx = s.cx + (frame == 0 ? 0.0 : s.dx);
      const double cy = s.cy + (frame == 0 ? 0.0 : s.dy);
      const int x_lo = std::max(0, static_cast<int>(std::floor(cx)) - s.rx - 1);
      const int x_hi = std::min(w - 1, static_cast<int>(std::ceil(cx)) + s.rx + 1);
      const int y_lo = std::max(0, static_cast<int>(std::floor(cy)) - s.ry - 1);
      const int y_hi = std::min(h - 1, static_cast<int>(std::ceil(cy)) + s.ry + 1);
      for (int y = y_lo; y <= y_hi; ++y)
        for (int x = x_lo; x <= x_hi; ++x) {
          const double lx = x - cx, ly = y - cy;
          if (!s.contains_local(lx, ly)) continue;
          ids[static_cast<std::size_t>(y) * w + x] = static_cast<int>(k) + 1;
          for (int c = 0; c < 3; ++c)
            img.at(c, y, x) = sample_clamped(s.texture, c, ly + s.ry, lx + s.rx);
        }
    }
  }

  // Ground truth: background translation everywhere, shape displacement on
  // each shape's frame_t footprint; later (topmost) shapes win on overlap.
  for (std::size_t i = 0; i < sample.flow.size(); ++i) {
    sample.flow.u[i] = bg_dx;
    sample.flow.v[i] = bg_dy;
  }
  for (std::size_t k = 0; k < shapes.size(); ++k) {
    const Shape& s = shapes[k];
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x)
        if (id_t[static_cast<std::size_t>(y) * w + x] == static_cast<int>(k) + 1) {
          sample.flow.u[sample.flow.index(y, x)] = s.dx;
          sample.flow.v[sample.flow.index(y, x)] = s.dy;
        }
  }

  // Occlusion: destination pixel leaves the frame or shows different content.
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      const std::size_t i = static_cast<std::size_t>(y) * w + x;
      const long tx = std::lround(x + sample.flow.u[i]);
      const long ty = std::lround(y + sample.flow.v[i]);
      if (tx < 0 || tx >= w || ty < 0 || ty >= h) {
        sample.occluded[i] = 1;
        continue;
      }
      sample.occluded[i] = id_t1[static_cast<std::size_t>(ty) * w + tx] != id_t[i] ? 1 : 0;
    }
  return sample;
}

}  // namespace patchflow
