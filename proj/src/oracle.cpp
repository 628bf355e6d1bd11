#include "cocosplat/oracle.hpp"

#include "cocosplat/storage.hpp"

#include <cmath>
#include <cstdio>
#include <numbers>
#include <random>
#include <stdexcept>

namespace cocosplat {
namespace fs = std::filesystem;

namespace {

constexpr double kPi = std::numbers::pi;

struct Builder {
  GaussianSet set;
  Eigen::Index next = 0;

  explicit Builder(Eigen::Index n) : set(n) { set.set_zero(); }

  void add(const Eigen::Vector3d& mu, const Eigen::Vector3d& scale, const Eigen::Vector3d& rgb, double opacity) {
    const Eigen::Index i = next++;
    set.mean.row(i) = mu.transpose();
    set.log_scale.row(i) = scale.array().log().transpose();
    set.rot.row(i) << 1, 0, 0, 0;
    set.opacity_logit[i] = logit(opacity);
    for (int c = 0; c < 3; ++c) set.sh(i, c * kShCoeffs) = (rgb[c] - 0.5) / kShC0;
  }
};

struct Rect {
  double x0, x1, y0, y1, z;
};

// Jittered grid of exactly `count` flat splats on an axis-aligned rectangle at depth z. `paint`
// maps the in-plane position to a colour.
template <typename Paint>
void fill_plane(Builder& b, const Rect& r, Eigen::Index count, std::mt19937_64& rng, Paint paint) {
  if (count <= 0) return;
  const double w = r.x1 - r.x0, h = r.y1 - r.y0;
  const auto cols = static_cast<Eigen::Index>(std::ceil(std::sqrt(count * w / h)));
  const Eigen::Index rows = (count + cols - 1) / cols;
  const double sx = w / cols, sy = h / rows;
  std::uniform_real_distribution<double> jitter(-0.15, 0.15);
  for (Eigen::Index k = 0; k < count; ++k) {
    const Eigen::Index i = k % cols, j = k / cols;
    const double x = r.x0 + (i + 0.5 + jitter(rng)) * sx;
    const double y = r.y0 + (j + 0.5 + jitter(rng)) * sy;
    const double s = 0.6 * std::max(sx, sy);
    b.add({x, y, r.z}, {s, s, 0.05 * s}, paint(x, y), 0.95);
  }
}

int checker(double x, double y, double cell) {
  return (static_cast<int>(std::floor(x / cell)) + static_cast<int>(std::floor(y / cell))) & 1;
}

void planes3(Builder& b, const SceneSpec& spec, std::mt19937_64& rng) {
  const double f = spec.focus;
  const Eigen::Index n = spec.n;
  const Eigen::Index far = n / 2, mid = (3 * n) / 10, near = n - far - mid;
  const double reach = 1.35 * f + 0.15 * f;
  fill_plane(b, {-reach, reach, -reach, reach, 2.3 * f}, far, rng, [&](double x, double) {
    return static_cast<int>(std::floor(x / (0.25 * f))) & 1 ? Eigen::Vector3d(0.15, 0.25, 0.8)
                                                           : Eigen::Vector3d(0.9, 0.9, 0.85);
  });
  fill_plane(b, {-0.1 * f, 0.4 * f, -0.4 * f, 0.1 * f, f}, mid, rng, [&](double x, double y) {
    return checker(x, y, 0.12 * f) ? Eigen::Vector3d(0.85, 0.15, 0.1) : Eigen::Vector3d(0.95, 0.8, 0.2);
  });
  fill_plane(b, {-0.18 * f, -0.02 * f, -0.04 * f, 0.16 * f, 0.4 * f}, near, rng, [&](double x, double y) {
    return checker(x, y, 0.05 * f) ? Eigen::Vector3d(0.1, 0.7, 0.25) : Eigen::Vector3d(0.8, 0.2, 0.75);
  });
}

void sphere_cluster(Builder& b, const SceneSpec& spec, std::mt19937_64& rng) {
  const double f = spec.focus;
  struct Sphere {
    Eigen::Vector3d centre;
    double radius;
    double share;
  };
  const Sphere spheres[] = {{{-0.1 * f, 0.05 * f, 0.42 * f}, 0.05 * f, 0.2},
                            {{0.1 * f, -0.05 * f, f}, 0.15 * f, 0.3},
                            {{0.0, 0.0, 2.2 * f}, 0.45 * f, 0.5}};
  std::uniform_real_distribution<double> hue(0.0, 1.0);
  Eigen::Index used = 0;
  for (int s = 0; s < 3; ++s) {
    const Eigen::Index count = s == 2 ? spec.n - used : static_cast<Eigen::Index>(spheres[s].share * spec.n);
    used += count;
    const double spacing = spheres[s].radius * std::sqrt(4 * kPi / static_cast<double>(count));
    const Eigen::Vector3d base(hue(rng), hue(rng), hue(rng));
    for (Eigen::Index k = 0; k < count; ++k) {
      // Fibonacci sphere.
      const double z = 1.0 - 2.0 * (k + 0.5) / static_cast<double>(count);
      const double r = std::sqrt(1 - z * z), phi = k * kPi * (3.0 - std::sqrt(5.0));
      const Eigen::Vector3d dir(r * std::cos(phi), z, r * std::sin(phi));
      const Eigen::Vector3d rgb = (k / 7) % 2 ? base : Eigen::Vector3d(Eigen::Vector3d::Ones() - base);
      b.add(spheres[s].centre + spheres[s].radius * dir, Eigen::Vector3d::Constant(0.6 * spacing),
            rgb.cwiseMax(0.05).cwiseMin(0.95), 0.95);
    }
  }
}

CameraView ring_camera(const SceneSpec& spec, double angle, double focus) {
  const double ring = 0.15 * spec.focus;
  CameraView v;
  v.width = v.height = spec.width;
  v.fx = v.fy = spec.width;
  v.cx = v.cy = spec.width / 2.0;
  const Eigen::Vector3d eye(ring * std::cos(angle), ring * std::sin(angle), 0.0);
  v.world_to_camera = look_at(eye, Eigen::Vector3d(0, 0, spec.focus));
  v.focus_plane = focus;
  return v;
}

double radical_inverse(int i, int base) {
  double inv = 1.0 / base, f = inv, r = 0;
  while (i > 0) {
    r += f * (i % base);
    i /= base;
    f *= inv;
  }
  return r;
}

std::string indexed(const char* pattern, std::size_t i) {
  char buf[64];
  std::snprintf(buf, sizeof buf, pattern, static_cast<int>(i));
  return buf;
}

}  // namespace

ToyScene gen_scene(const SceneSpec& spec) {
  if (spec.n < 10) throw std::invalid_argument("gen_scene: need at least 10 Gaussians");
  if (spec.train_views < 1 || spec.eval_views < 0) throw std::invalid_argument("gen_scene: bad view counts");
  if (spec.width < 8) throw std::invalid_argument("gen_scene: width must be >= 8");
  if (!(spec.focus > spec.lens.focal_length) || !(spec.lens.focal_length > 0) || !(spec.lens.aperture >= 0)) {
    throw std::invalid_argument("gen_scene: invalid lens");
  }
  std::mt19937_64 rng(spec.seed);
  Builder b(spec.n);
  if (spec.preset == "planes3") {
    planes3(b, spec, rng);
  } else if (spec.preset == "reflectance-stress") {
    planes3(b, spec, rng);
    std::normal_distribution<double> g(0.0, 0.45);
    for (Eigen::Index i = 0; i < b.set.size(); ++i) {
      for (int c = 0; c < 3; ++c) {
        for (int k = 1; k < kShCoeffs; ++k) b.set.sh(i, c * kShCoeffs + k) = g(rng);
      }
    }
  } else if (spec.preset == "sphere-cluster") {
    sphere_cluster(b, spec, rng);
  } else {
    throw std::invalid_argument("gen_scene: unknown preset '" + spec.preset + "'");
  }

  ToyScene scene;
  scene.spec = spec;
  scene.gaussians = std::move(b.set);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  for (int v = 0; v < spec.train_views; ++v) {
    scene.train.push_back(ring_camera(spec, 2 * kPi * v / spec.train_views, spec.focus * (1.0 + 0.1 * u(rng))));
  }
  for (int v = 0; v < spec.eval_views; ++v) {
    scene.eval.push_back(ring_camera(spec, 2 * kPi * (v + 0.5) / std::max(spec.eval_views, 1) + 0.3, spec.focus));
  }

  const Eigen::Vector3d lo = scene.gaussians.mean.colwise().minCoeff().transpose();
  const Eigen::Vector3d hi = scene.gaussians.mean.colwise().maxCoeff().transpose();
  std::normal_distribution<double> noise(0.0, 0.002 * (hi - lo).norm());
  scene.points = scene.gaussians.mean;
  for (Eigen::Index i = 0; i < scene.points.size(); ++i) scene.points.data()[i] += noise(rng);
  return scene;
}

Eigen::Vector2d halton_disk(int i) {
  const double a = 2.0 * radical_inverse(i + 1, 2) - 1.0;
  const double b = 2.0 * radical_inverse(i + 1, 3) - 1.0;
  if (a == 0 && b == 0) return Eigen::Vector2d::Zero();
  double r, theta;
  if (std::abs(a) > std::abs(b)) {
    r = a;
    theta = kPi / 4 * (b / a);
  } else {
    r = b;
    theta = kPi / 2 - kPi / 4 * (a / b);
  }
  return {r * std::cos(theta), r * std::sin(theta)};
}

CameraView sheared_view(const CameraView& view, const Eigen::Vector2d& offset, double focus) {
  CameraView v = view;
  // Camera moves by `offset` in its own x/y, so t' = t - (ox, oy, 0).
  v.world_to_camera(0, 3) -= offset.x();
  v.world_to_camera(1, 3) -= offset.y();
  v.cx += view.fx * offset.x() / focus;
  v.cy += view.fy * offset.y() / focus;
  return v;
}

Image render_defocused_oracle(const GaussianSet& set, const CameraView& view, const LensParams& lens, double focus,
                              int samples, const RenderOptions& opts) {
  if (samples < 1) throw std::invalid_argument("render_defocused_oracle: need at least one sample");
  if (!(focus > lens.focal_length) || !(lens.focal_length > 0) || !(lens.aperture >= 0)) {
    throw std::invalid_argument("render_defocused_oracle: invalid lens");
  }
  if (lens.aperture == 0 || samples == 1) return render(set, view, opts);
  Image acc(view.width, view.height);
  for (int i = 0; i < samples; ++i) {
    const Eigen::Vector2d off = 0.5 * lens.aperture * halton_disk(i);
    acc.rgb += render(set, sheared_view(view, off, focus), opts).rgb;
  }
  acc.rgb /= static_cast<double>(samples);
  return acc;
}

double second_moment_diameter(const Image& sharp, const Image& blurred) {
  require_same_shape(sharp, blurred, "second_moment_diameter");
  auto variance = [](const Image& img) {
    double w = 0, mx = 0, my = 0, sxx = 0, syy = 0;
    for (int y = 0; y < img.height; ++y) {
      for (int x = 0; x < img.width; ++x) {
        const double l = img.at(x, y).mean();
        const double px = x + 0.5, py = y + 0.5;
        w += l;
        mx += l * px;
        my += l * py;
        sxx += l * px * px;
        syy += l * py * py;
      }
    }
    if (!(w > 0)) throw std::invalid_argument("second_moment_diameter: image has no intensity");
    mx /= w;
    my /= w;
    return 0.5 * ((sxx / w - mx * mx) + (syy / w - my * my));
  };
  return 4.0 * std::sqrt(std::max(0.0, variance(blurred) - variance(sharp)));
}

double blur_diameter_px(const CameraView& view, const LensParams& lens, double focus, double depth) {
  return view.fx * lens.aperture * std::abs(1.0 / focus - 1.0 / depth);
}

void emit_dataset(const fs::path& dir, const ToyScene& scene, int samples) {
  std::error_code ec;
  fs::create_directories(dir / "train", ec);
  if (ec) throw StorageError((dir / "train").string() + ": " + ec.message());
  fs::create_directories(dir / "eval", ec);
  if (ec) throw StorageError((dir / "eval").string() + ": " + ec.message());

  SceneFile sf{scene.gaussians, scene.train};
  sf.views.insert(sf.views.end(), scene.eval.begin(), scene.eval.end());
  write_scene(dir / "scene.json", sf);

  ViewsFile vf{scene.train, scene.eval};
  for (CameraView& v : vf.train) v.focus_plane = 0;
  for (CameraView& v : vf.eval) v.focus_plane = 0;
  write_views(dir / "views.json", vf);
  write_points(dir / "points.json", scene.points);

  nlohmann::json train = nlohmann::json::array(), eval = nlohmann::json::array();
  for (std::size_t i = 0; i < scene.train.size(); ++i) {
    const std::string name = indexed("train/defocus_%03d.png", i);
    write_image(dir / name, render_defocused_oracle(scene.gaussians, scene.train[i], scene.spec.lens,
                                                    scene.train[i].focus_plane, samples));
    train.push_back({{"index", i}, {"image", name}, {"role", "defocused"}, {"d_f", scene.train[i].focus_plane}});
  }
  for (std::size_t i = 0; i < scene.eval.size(); ++i) {
    const std::string name = indexed("eval/sharp_%03d.png", i);
    write_image(dir / name, render(scene.gaussians, scene.eval[i]));
    eval.push_back({{"index", i}, {"image", name}, {"role", "sharp"}});
  }
  const nlohmann::json manifest = {{"version", 1},
                                   {"preset", scene.spec.preset},
                                   {"seed", scene.spec.seed},
                                   {"n", scene.spec.n},
                                   {"width", scene.spec.width},
                                   {"focal_length", scene.spec.lens.focal_length},
                                   {"aperture", scene.spec.lens.aperture},
                                   {"k", scene.spec.lens.k()},
                                   {"samples", samples},
                                   {"train", train},
                                   {"eval", eval}};
  write_file_atomic(dir / "manifest.json", manifest.dump(1) + "\n");
}

}  // namespace cocosplat
