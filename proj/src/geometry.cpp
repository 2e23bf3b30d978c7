#include "lara/geometry.hpp"

#include <fstream>

#include "json.hpp"

namespace lara {

void validate_rotation(const Eigen::Matrix3d& r) {
  const double ortho_err = (r.transpose() * r - Eigen::Matrix3d::Identity()).cwiseAbs().maxCoeff();
  LARA_CHECK_ARG(ortho_err < 1e-6, "rotation is not orthonormal (max deviation ", ortho_err, ")");
  LARA_CHECK_ARG(std::abs(r.determinant() - 1.0) < 1e-6, "rotation determinant is ",
                 r.determinant(), ", expected +1");
}

void CameraRig::validate() const {
  LARA_CHECK_ARG(!cameras.empty(), "rig must contain at least one camera");
  const int h = cameras.front().height, w = cameras.front().width;
  for (const auto& cam : cameras) {
    LARA_CHECK_ARG(cam.width == w && cam.height == h, "all rig images must share (H, W)");
    LARA_CHECK_ARG(cam.intrinsics.fx > 0 && cam.intrinsics.fy > 0,
                   "focal lengths must be positive");
    validate_rotation(cam.extrinsics.rotation);
  }
}

CameraIntrinsics scale_intrinsics(const CameraIntrinsics& k, int stride) {
  LARA_CHECK_ARG(stride > 0, "stride must be positive, got ", stride);
  const double s = static_cast<double>(stride);
  CameraIntrinsics out;
  out.fx = k.fx / s;
  out.fy = k.fy / s;
  out.cx = (k.cx + 0.5) / s - 0.5;
  out.cy = (k.cy + 0.5) / s - 0.5;
  return out;
}

Eigen::Vector3d pixel_ray_direction(const Eigen::Vector2d& pixel, const CameraIntrinsics& k,
                                    const Eigen::Matrix3d& cam_from_ego) {
  const Eigen::Vector3d homo(pixel.x(), pixel.y(), 1.0);
  return cam_from_ego.inverse() * (k.matrix().inverse() * homo);
}

RayField rig_ray_field(const CameraRig& rig, int feature_h, int feature_w) {
  rig.validate();
  LARA_CHECK_ARG(feature_h >= 1 && feature_w >= 1, "feature grid must be non-empty");
  const int h = rig.cameras.front().height, w = rig.cameras.front().width;
  LARA_CHECK_ARG(h % feature_h == 0 && w % feature_w == 0,
                 "feature grid ", feature_h, "x", feature_w, " does not divide image ", h, "x", w);
  const int stride_h = h / feature_h, stride_w = w / feature_w;
  LARA_CHECK_ARG(stride_h == stride_w, "implied strides differ: H/", feature_h, "=", stride_h,
                 " vs W/", feature_w, "=", stride_w);

  RayField field;
  field.cameras = rig.camera_count();
  field.height = feature_h;
  field.width = feature_w;
  field.origins.resize(static_cast<size_t>(field.token_count()));
  field.directions.resize(static_cast<size_t>(field.token_count()));
  for (int c = 0; c < field.cameras; ++c) {
    const Camera& cam = rig.cameras[static_cast<size_t>(c)];
    const CameraIntrinsics ks = scale_intrinsics(cam.intrinsics, stride_h);
    const Eigen::Matrix3d cam_from_ego = cam.extrinsics.rotation.transpose();
    for (int i = 0; i < feature_h; ++i) {
      for (int j = 0; j < feature_w; ++j) {
        const int64_t t = field.index(c, i, j);
        field.origins[static_cast<size_t>(t)] = cam.extrinsics.translation;
        field.directions[static_cast<size_t>(t)] = pixel_ray_direction(
            Eigen::Vector2d(static_cast<double>(j), static_cast<double>(i)), ks, cam_from_ego);
      }
    }
  }
  return field;
}

std::optional<PixelProjection> project_point(const Eigen::Vector3d& point, const Camera& cam) {
  const Eigen::Vector3d in_cam =
      cam.extrinsics.rotation.transpose() * (point - cam.extrinsics.translation);
  if (in_cam.z() <= 1e-6) return std::nullopt;
  PixelProjection p;
  p.depth = in_cam.z();
  p.pixel.x() = cam.intrinsics.fx * in_cam.x() / in_cam.z() + cam.intrinsics.cx;
  p.pixel.y() = cam.intrinsics.fy * in_cam.y() / in_cam.z() + cam.intrinsics.cy;
  return p;
}

std::string rig_to_json(const CameraRig& rig) {
  nlohmann::json cams = nlohmann::json::array();
  for (const auto& cam : rig.cameras) {
    nlohmann::json j;
    j["fx"] = cam.intrinsics.fx;
    j["fy"] = cam.intrinsics.fy;
    j["cx"] = cam.intrinsics.cx;
    j["cy"] = cam.intrinsics.cy;
    std::vector<double> rot(9);
    for (int r = 0; r < 3; ++r)
      for (int c = 0; c < 3; ++c) rot[static_cast<size_t>(r * 3 + c)] = cam.extrinsics.rotation(r, c);
    j["rotation"] = rot;
    j["translation"] = std::vector<double>{cam.extrinsics.translation.x(),
                                           cam.extrinsics.translation.y(),
                                           cam.extrinsics.translation.z()};
    j["width"] = cam.width;
    j["height"] = cam.height;
    cams.push_back(std::move(j));
  }
  return nlohmann::json{{"cameras", cams}}.dump(2);
}

CameraRig rig_from_json(const std::string& json_text) {
  nlohmann::json root;
  try {
    root = nlohmann::json::parse(json_text);
  } catch (const nlohmann::json::exception& e) {
    throw IoError(std::string("calibration JSON parse error: ") + e.what());
  }
  LARA_CHECK_IO(root.contains("cameras") && root["cameras"].is_array(),
                "calibration JSON missing \"cameras\" array");
  CameraRig rig;
  for (const auto& j : root["cameras"]) {
    Camera cam;
    cam.intrinsics.fx = j.at("fx").get<double>();
    cam.intrinsics.fy = j.at("fy").get<double>();
    cam.intrinsics.cx = j.at("cx").get<double>();
    cam.intrinsics.cy = j.at("cy").get<double>();
    const auto rot = j.at("rotation").get<std::vector<double>>();
    LARA_CHECK_IO(rot.size() == 9, "rotation must hold 9 row-major floats");
    for (int r = 0; r < 3; ++r)
      for (int c = 0; c < 3; ++c) cam.extrinsics.rotation(r, c) = rot[static_cast<size_t>(r * 3 + c)];
    const auto t = j.at("translation").get<std::vector<double>>();
    LARA_CHECK_IO(t.size() == 3, "translation must hold 3 floats");
    cam.extrinsics.translation = Eigen::Vector3d(t[0], t[1], t[2]);
    cam.width = j.at("width").get<int>();
    cam.height = j.at("height").get<int>();
    rig.cameras.push_back(cam);
  }
  rig.validate();
  return rig;
}

void save_rig(const CameraRig& rig, const std::string& path) {
  std::ofstream f(path, std::ios::binary);
  LARA_CHECK_IO(f.good(), "cannot open for write: ", path);
  f << rig_to_json(rig) << "\n";
  LARA_CHECK_IO(f.good(), "write failed: ", path);
}

CameraRig load_rig(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  LARA_CHECK_IO(f.good(), "cannot open: ", path);
  std::string text((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  return rig_from_json(text);
}

}  // namespace lara
