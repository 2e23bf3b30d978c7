#include "lara/synthdata.hpp"

#include <algorithm>
#include <filesystem>
#include <fstream>

#include "json.hpp"
#include "lara/rng.hpp"

namespace lara {

namespace fs = std::filesystem;

CameraRig default_rig(int cameras, int image_h, int image_w, double fov_deg, double camera_height,
                      double camera_offset) {
  LARA_CHECK_ARG(cameras >= 1, "rig needs at least one camera");
  LARA_CHECK_ARG(fov_deg > 10.0 && fov_deg < 170.0, "fov ", fov_deg, " out of range");
  CameraRig rig;
  // ego frame: x forward, y left, z up. A yaw-0 camera looks along +x with
  // image right = -y and image down = -z.
  Eigen::Matrix3d forward;
  forward.col(0) = Eigen::Vector3d(0, -1, 0);
  forward.col(1) = Eigen::Vector3d(0, 0, -1);
  forward.col(2) = Eigen::Vector3d(1, 0, 0);
  for (int k = 0; k < cameras; ++k) {
    const double yaw = 2.0 * M_PI * k / cameras;
    Camera cam;
    cam.width = image_w;
    cam.height = image_h;
    cam.intrinsics.fx = (image_w / 2.0) / std::tan(fov_deg * M_PI / 360.0);
    cam.intrinsics.fy = cam.intrinsics.fx;
    cam.intrinsics.cx = (image_w - 1) / 2.0;
    cam.intrinsics.cy = (image_h - 1) / 2.0;
    cam.extrinsics.rotation =
        Eigen::AngleAxisd(yaw, Eigen::Vector3d::UnitZ()).toRotationMatrix() * forward;
    cam.extrinsics.translation =
        Eigen::Vector3d(camera_offset * std::cos(yaw), camera_offset * std::sin(yaw),
                        camera_height);
    rig.cameras.push_back(cam);
  }
  return rig;
}

SceneSpec sample_scene(uint64_t seed, double extent_x_m, double extent_y_m, int min_boxes,
                       int max_boxes) {
  LARA_CHECK_ARG(extent_x_m > 0 && extent_y_m > 0, "scene extent must be positive");
  LARA_CHECK_ARG(min_boxes >= 0 && max_boxes >= min_boxes, "bad box count range [", min_boxes,
                 ",", max_boxes, "]");
  Rng rng(seed);
  SceneSpec scene;
  scene.seed = seed;
  const int count = static_cast<int>(rng.uniform_int(min_boxes, max_boxes));
  for (int b = 0; b < count; ++b) {
    Box box;
    box.cx = rng.uniform(-extent_x_m / 2, extent_x_m / 2);
    box.cy = rng.uniform(-extent_y_m / 2, extent_y_m / 2);
    box.yaw = rng.uniform(0, 2.0 * M_PI);
    box.length = rng.uniform(3.5, 5.5);
    box.width = rng.uniform(1.6, 2.2);
    box.height = rng.uniform(1.4, 1.8);
    box.albedo = Eigen::Vector3d(rng.uniform(0.15, 0.9), rng.uniform(0.15, 0.9),
                                 rng.uniform(0.15, 0.9));
    scene.boxes.push_back(box);
  }
  const double g = rng.uniform(0.28, 0.40);
  scene.ground_color_a = Eigen::Vector3d(g, g + 0.01, g + 0.03);
  scene.ground_color_b = scene.ground_color_a + Eigen::Vector3d(0.13, 0.13, 0.13);
  return scene;
}

bool point_in_box_footprint(const Eigen::Vector2d& p, const Box& box) {
  const double c = std::cos(box.yaw), s = std::sin(box.yaw);
  const double dx = p.x() - box.cx, dy = p.y() - box.cy;
  const double u = c * dx + s * dy;   // along length
  const double v = -s * dx + c * dy;  // along width
  return std::abs(u) <= box.length / 2 && std::abs(v) <= box.width / 2;
}

std::vector<uint8_t> rasterize_bev_gt(const SceneSpec& scene, int h_bev, int w_bev,
                                      double cell_m) {
  std::vector<uint8_t> grid(static_cast<size_t>(h_bev) * w_bev, 0);
  for (int i = 0; i < h_bev; ++i) {
    for (int j = 0; j < w_bev; ++j) {
      const Eigen::Vector2d p = bev_cell_center(i, j, h_bev, w_bev, cell_m);
      for (const Box& box : scene.boxes) {
        if (point_in_box_footprint(p, box)) {
          grid[static_cast<size_t>(i) * w_bev + j] = 1;
          break;
        }
      }
    }
  }
  return grid;
}

namespace {

constexpr double kNearPlane = 0.05;
const Eigen::Vector3d kSunDir = Eigen::Vector3d(0.4, 0.25, 1.0).normalized();

struct CamVertex {
  Eigen::Vector3d cam;  // camera-frame position
};

// 8 corners, 12 triangles with outward winding.
void box_mesh(const Box& box, std::vector<Eigen::Vector3d>& verts,
              std::vector<std::array<int, 3>>& tris) {
  const double c = std::cos(box.yaw), s = std::sin(box.yaw);
  const double hl = box.length / 2, hw = box.width / 2;
  verts.clear();
  tris.clear();
  for (int zi = 0; zi < 2; ++zi) {
    const double z = zi * box.height;
    // footprint corners counter-clockwise seen from above
    const double local[4][2] = {{+hl, +hw}, {-hl, +hw}, {-hl, -hw}, {+hl, -hw}};
    for (const auto& q : local) {
      verts.emplace_back(box.cx + c * q[0] - s * q[1], box.cy + s * q[0] + c * q[1], z);
    }
  }
  auto quad = [&tris](int a, int b, int cc, int d) {
    tris.push_back({a, b, cc});
    tris.push_back({a, cc, d});
  };
  quad(0, 3, 2, 1);  // bottom (z=0), outward = down
  quad(4, 5, 6, 7);  // top, outward = up
  quad(0, 1, 5, 4);  // +v side
  quad(1, 2, 6, 5);  // -u side
  quad(2, 3, 7, 6);  // -v side
  quad(3, 0, 4, 7);  // +u side
}

// Sutherland-Hodgman against the near plane z = kNearPlane in camera space.
std::vector<Eigen::Vector3d> clip_near(const std::vector<Eigen::Vector3d>& poly) {
  std::vector<Eigen::Vector3d> out;
  const size_t n = poly.size();
  for (size_t i = 0; i < n; ++i) {
    const Eigen::Vector3d& a = poly[i];
    const Eigen::Vector3d& b = poly[(i + 1) % n];
    const bool ina = a.z() >= kNearPlane, inb = b.z() >= kNearPlane;
    if (ina) out.push_back(a);
    if (ina != inb) {
      const double t = (kNearPlane - a.z()) / (b.z() - a.z());
      out.push_back(a + t * (b - a));
    }
  }
  return out;
}

struct FrameBuffers {
  int w = 0, h = 0;
  std::vector<double> zinv;    // 1/depth, 0 = empty
  std::vector<int> winner;     // box id or -1
  std::vector<Eigen::Vector3d> color;
};

void raster_triangle(FrameBuffers& fb, const Camera& cam, const Eigen::Vector3d& v0c,
                     const Eigen::Vector3d& v1c, const Eigen::Vector3d& v2c,
                     const Eigen::Vector3d& shade, int box_id,
                     std::vector<uint8_t>* coverage) {
  auto to_pix = [&cam](const Eigen::Vector3d& v) {
    return Eigen::Vector2d(cam.intrinsics.fx * v.x() / v.z() + cam.intrinsics.cx,
                           cam.intrinsics.fy * v.y() / v.z() + cam.intrinsics.cy);
  };
  const Eigen::Vector2d p0 = to_pix(v0c), p1 = to_pix(v1c), p2 = to_pix(v2c);
  const double area = (p1.x() - p0.x()) * (p2.y() - p0.y()) - (p1.y() - p0.y()) * (p2.x() - p0.x());
  if (std::abs(area) < 1e-12) return;
  const int min_x = std::max(0, static_cast<int>(std::ceil(std::min({p0.x(), p1.x(), p2.x()}))));
  const int max_x =
      std::min(fb.w - 1, static_cast<int>(std::floor(std::max({p0.x(), p1.x(), p2.x()}))));
  const int min_y = std::max(0, static_cast<int>(std::ceil(std::min({p0.y(), p1.y(), p2.y()}))));
  const int max_y =
      std::min(fb.h - 1, static_cast<int>(std::floor(std::max({p0.y(), p1.y(), p2.y()}))));
  const double zi0 = 1.0 / v0c.z(), zi1 = 1.0 / v1c.z(), zi2 = 1.0 / v2c.z();
  for (int y = min_y; y <= max_y; ++y) {
    for (int x = min_x; x <= max_x; ++x) {
      const double w1 = ((x - p0.x()) * (p2.y() - p0.y()) - (y - p0.y()) * (p2.x() - p0.x())) / area;
      const double w2 = ((p1.x() - p0.x()) * (y - p0.y()) - (p1.y() - p0.y()) * (x - p0.x())) / area;
      const double w0 = 1.0 - w1 - w2;
      if (w0 < 0 || w1 < 0 || w2 < 0) continue;
      const double zinv = w0 * zi0 + w1 * zi1 + w2 * zi2;  // perspective-correct
      const size_t idx = static_cast<size_t>(y) * fb.w + x;
      if (coverage != nullptr) (*coverage)[idx] = 1;
      if (zinv > fb.zinv[idx]) {
        fb.zinv[idx] = zinv;
        fb.winner[idx] = box_id;
        fb.color[idx] = shade;
      }
    }
  }
}

Eigen::Vector3d sky_color(const Eigen::Vector3d& dir) {
  const double t = std::clamp(dir.normalized().z() * 2.0, 0.0, 1.0);
  return (1.0 - t) * Eigen::Vector3d(0.72, 0.78, 0.85) + t * Eigen::Vector3d(0.35, 0.52, 0.78);
}

}  // namespace

RenderResult render_cameras(const SceneSpec& scene, const CameraRig& rig) {
  rig.validate();
  const int w = rig.cameras.front().width, h = rig.cameras.front().height;
  RenderResult result;
  std::vector<int64_t> covered(scene.boxes.size(), 0), visible(scene.boxes.size(), 0);

  std::vector<Eigen::Vector3d> verts;
  std::vector<std::array<int, 3>> tris;

  for (const Camera& cam : rig.cameras) {
    FrameBuffers fb;
    fb.w = w;
    fb.h = h;
    fb.zinv.assign(static_cast<size_t>(w) * h, 0.0);
    fb.winner.assign(static_cast<size_t>(w) * h, -1);
    fb.color.assign(static_cast<size_t>(w) * h, Eigen::Vector3d::Zero());

    const Eigen::Matrix3d cam_from_ego = cam.extrinsics.rotation.transpose();
    std::vector<uint8_t> coverage(static_cast<size_t>(w) * h, 0);

    for (size_t b = 0; b < scene.boxes.size(); ++b) {
      const Box& box = scene.boxes[b];
      box_mesh(box, verts, tris);
      std::fill(coverage.begin(), coverage.end(), 0);
      for (const auto& tri : tris) {
        const Eigen::Vector3d n = (verts[size_t(tri[1])] - verts[size_t(tri[0])])
                                      .cross(verts[size_t(tri[2])] - verts[size_t(tri[0])])
                                      .normalized();
        const double lambert = 0.35 + 0.65 * std::max(0.0, n.dot(kSunDir));
        const Eigen::Vector3d shade = box.albedo * lambert;
        std::vector<Eigen::Vector3d> poly = {
            cam_from_ego * (verts[size_t(tri[0])] - cam.extrinsics.translation),
            cam_from_ego * (verts[size_t(tri[1])] - cam.extrinsics.translation),
            cam_from_ego * (verts[size_t(tri[2])] - cam.extrinsics.translation)};
        poly = clip_near(poly);
        for (size_t k = 2; k < poly.size(); ++k)
          raster_triangle(fb, cam, poly[0], poly[k - 1], poly[k], shade, static_cast<int>(b),
                          &coverage);
      }
      for (uint8_t cv : coverage) covered[b] += cv;
    }
    for (size_t i = 0; i < fb.winner.size(); ++i)
      if (fb.winner[i] >= 0) ++visible[size_t(fb.winner[i])];

    // ground + sky behind the boxes, ray-cast per pixel
    const Eigen::Matrix3d kinv = cam.intrinsics.matrix().inverse();
    ImageU8 img;
    img.width = w;
    img.height = h;
    img.channels = 3;
    img.data.resize(static_cast<size_t>(w) * h * 3);
    for (int y = 0; y < h; ++y) {
      for (int x = 0; x < w; ++x) {
        const size_t idx = static_cast<size_t>(y) * w + x;
        Eigen::Vector3d rgb;
        if (fb.winner[idx] >= 0) {
          rgb = fb.color[idx];
        } else {
          const Eigen::Vector3d dir =
              cam.extrinsics.rotation * (kinv * Eigen::Vector3d(x, y, 1.0));
          if (dir.z() < -1e-9) {
            const double t = -cam.extrinsics.translation.z() / dir.z();
            const Eigen::Vector3d hit = cam.extrinsics.translation + t * dir;
            const int64_t qx = static_cast<int64_t>(std::floor(hit.x() / 2.0));
            const int64_t qy = static_cast<int64_t>(std::floor(hit.y() / 2.0));
            rgb = ((qx + qy) & 1) == 0 ? scene.ground_color_a : scene.ground_color_b;
            // fade distant ground toward the horizon color
            const double fade = std::clamp(t / 120.0, 0.0, 1.0);
            rgb = (1.0 - fade) * rgb + fade * Eigen::Vector3d(0.6, 0.65, 0.7);
          } else {
            rgb = sky_color(dir);
          }
        }
        for (int ch = 0; ch < 3; ++ch)
          img.data[idx * 3 + ch] =
              static_cast<uint8_t>(std::lround(std::clamp(rgb[ch], 0.0, 1.0) * 255.0));
      }
    }
    result.images.push_back(std::move(img));
  }

  result.occlusion.resize(scene.boxes.size());
  for (size_t b = 0; b < scene.boxes.size(); ++b) {
    result.occlusion[b] =
        covered[b] > 0 ? 1.0 - static_cast<double>(visible[b]) / static_cast<double>(covered[b])
                       : 1.0;
  }
  return result;
}

RenderedSample render_sample(const SceneSpec& scene, const CameraRig& rig, int h_bev, int w_bev,
                             double cell_m) {
  RenderedSample s;
  RenderResult r = render_cameras(scene, rig);
  s.images = std::move(r.images);
  s.occlusion = std::move(r.occlusion);
  s.rig = rig;
  s.bev_h = h_bev;
  s.bev_w = w_bev;
  s.bev_gt = rasterize_bev_gt(scene, h_bev, w_bev, cell_m);
  s.scene = scene;
  return s;
}

std::string scene_to_json(const SceneSpec& scene) {
  nlohmann::json boxes = nlohmann::json::array();
  for (const Box& b : scene.boxes) {
    boxes.push_back({{"cx", b.cx},
                     {"cy", b.cy},
                     {"yaw", b.yaw},
                     {"length", b.length},
                     {"width", b.width},
                     {"height", b.height},
                     {"albedo", {b.albedo.x(), b.albedo.y(), b.albedo.z()}}});
  }
  nlohmann::json j{{"seed", scene.seed},
                   {"ground_color_a",
                    {scene.ground_color_a.x(), scene.ground_color_a.y(), scene.ground_color_a.z()}},
                   {"ground_color_b",
                    {scene.ground_color_b.x(), scene.ground_color_b.y(), scene.ground_color_b.z()}},
                   {"boxes", boxes}};
  return j.dump(2);
}

SceneSpec scene_from_json(const std::string& text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw IoError(std::string("scene JSON parse error: ") + e.what());
  }
  SceneSpec s;
  s.seed = j.at("seed").get<uint64_t>();
  auto vec3 = [](const nlohmann::json& a) {
    return Eigen::Vector3d(a.at(0).get<double>(), a.at(1).get<double>(), a.at(2).get<double>());
  };
  s.ground_color_a = vec3(j.at("ground_color_a"));
  s.ground_color_b = vec3(j.at("ground_color_b"));
  for (const auto& bj : j.at("boxes")) {
    Box b;
    b.cx = bj.at("cx").get<double>();
    b.cy = bj.at("cy").get<double>();
    b.yaw = bj.at("yaw").get<double>();
    b.length = bj.at("length").get<double>();
    b.width = bj.at("width").get<double>();
    b.height = bj.at("height").get<double>();
    b.albedo = vec3(bj.at("albedo"));
    s.boxes.push_back(b);
  }
  return s;
}

namespace {

std::string sample_dir_name(int index) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "sample_%05d", index);
  return buf;
}

}  // namespace

void write_dataset(const std::vector<RenderedSample>& samples, const std::string& dir,
                   const AppConfig& cfg) {
  fs::create_directories(dir);
  nlohmann::json manifest;
  manifest["version"] = 1;
  manifest["count"] = samples.size();
  manifest["config"] = config_to_toml(cfg);
  nlohmann::json per_sample = nlohmann::json::array();

  for (size_t i = 0; i < samples.size(); ++i) {
    const RenderedSample& s = samples[i];
    const fs::path sd = fs::path(dir) / sample_dir_name(static_cast<int>(i));
    fs::create_directories(sd);
    for (size_t k = 0; k < s.images.size(); ++k)
      write_png(s.images[k], (sd / ("cam_" + std::to_string(k) + ".png")).string());
    save_rig(s.rig, (sd / "calib.json").string());
    ImageU8 gt;
    gt.width = s.bev_w;
    gt.height = s.bev_h;
    gt.channels = 1;
    gt.data.resize(s.bev_gt.size());
    for (size_t p = 0; p < s.bev_gt.size(); ++p) gt.data[p] = s.bev_gt[p] ? 255 : 0;
    write_pgm(gt, (sd / "bev_gt.pgm").string());
    std::ofstream sj(sd / "scene.json");
    sj << scene_to_json(s.scene) << "\n";
    LARA_CHECK_IO(sj.good(), "write failed: ", (sd / "scene.json").string());
    per_sample.push_back({{"boxes", s.scene.boxes.size()}, {"occlusion", s.occlusion}});
  }
  manifest["samples"] = per_sample;
  std::ofstream mf(fs::path(dir) / "manifest.json");
  mf << manifest.dump(2) << "\n";
  LARA_CHECK_IO(mf.good(), "write failed: ", dir, "/manifest.json");
}

std::vector<RenderedSample> read_dataset(const std::string& dir) {
  std::ifstream mf(fs::path(dir) / "manifest.json");
  LARA_CHECK_IO(mf.good(), "missing manifest: ", dir, "/manifest.json");
  nlohmann::json manifest;
  try {
    mf >> manifest;
  } catch (const nlohmann::json::exception& e) {
    throw IoError(std::string("manifest parse error: ") + e.what());
  }
  LARA_CHECK_IO(manifest.value("version", 0) == 1, "unsupported dataset version in ", dir);
  const size_t count = manifest.at("count").get<size_t>();

  std::vector<RenderedSample> samples;
  samples.reserve(count);
  for (size_t i = 0; i < count; ++i) {
    const fs::path sd = fs::path(dir) / sample_dir_name(static_cast<int>(i));
    try {
      RenderedSample s;
      s.rig = load_rig((sd / "calib.json").string());
      for (int k = 0; k < s.rig.camera_count(); ++k)
        s.images.push_back(read_png((sd / ("cam_" + std::to_string(k) + ".png")).string()));
      ImageU8 gt = read_pgm((sd / "bev_gt.pgm").string());
      s.bev_h = gt.height;
      s.bev_w = gt.width;
      s.bev_gt.resize(gt.data.size());
      for (size_t p = 0; p < gt.data.size(); ++p) s.bev_gt[p] = gt.data[p] >= 128 ? 1 : 0;
      std::ifstream sj(sd / "scene.json");
      LARA_CHECK_IO(sj.good(), "missing scene.json");
      std::string text((std::istreambuf_iterator<char>(sj)), std::istreambuf_iterator<char>());
      s.scene = scene_from_json(text);
      if (manifest.contains("samples") && i < manifest["samples"].size())
        s.occlusion = manifest["samples"][i].value("occlusion", std::vector<double>{});
      samples.push_back(std::move(s));
    } catch (const std::exception& e) {
      throw IoError("dataset sample " + std::to_string(i) + " in " + dir + ": " + e.what());
    }
  }
  return samples;
}

std::vector<RenderedSample> generate_dataset(const AppConfig& cfg, int count, uint64_t seed) {
  LARA_CHECK_ARG(count >= 0, "sample count must be non-negative");
  const CameraRig rig = default_rig(cfg.model.cameras, cfg.model.image_h, cfg.model.image_w,
                                    cfg.data.fov_deg, cfg.data.camera_height,
                                    cfg.data.camera_offset);
  std::vector<RenderedSample> out;
  out.reserve(static_cast<size_t>(count));
  for (int i = 0; i < count; ++i) {
    const SceneSpec scene =
        sample_scene(seed + static_cast<uint64_t>(i), cfg.model.extent_h_meters(),
                     cfg.model.extent_w_meters(), cfg.data.min_boxes, cfg.data.max_boxes);
    out.push_back(render_sample(scene, rig, cfg.model.bev_h, cfg.model.bev_w,
                                cfg.model.cell_meters));
  }
  return out;
}

}  // namespace lara
