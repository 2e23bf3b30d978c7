#include "lara/analysis.hpp"

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>

#include "json.hpp"
#include "lara/checkpoint.hpp"

namespace lara {

namespace fs = std::filesystem;

AttentionRecord capture_attention(const LaRaModel& model, const CameraRig& rig,
                                  const std::vector<Tensor>& images) {
  auto out = model.forward(rig, images, true);
  LARA_CHECK_ARG(out.input_attention.has_value(),
                 "forward pass did not produce an input attention map");
  AttentionRecord rec;
  rec.weights = *out.input_attention;
  rec.feature_h = model.config().feature_h();
  rec.feature_w = model.config().feature_w();
  rec.image_h = model.config().image_h;
  rec.image_w = model.config().image_w;
  rec.token_index = build_token_index(model.config().cameras, rec.feature_h, rec.feature_w);
  rec.rig = rig;
  return rec;
}

std::string Selection::tag() const {
  const std::string n = latent < 0 ? "avg" : std::to_string(latent);
  const std::string h = head < 0 ? "avg" : std::to_string(head);
  return "n" + n + "_h" + h;
}

Selection parse_selection(const std::string& expr) {
  Selection sel;
  size_t pos = 0;
  while (pos < expr.size()) {
    size_t end = expr.find(',', pos);
    if (end == std::string::npos) end = expr.size();
    std::string part = expr.substr(pos, end - pos);
    part.erase(std::remove_if(part.begin(), part.end(), ::isspace), part.end());
    if (!part.empty()) {
      const size_t eq = part.find('=');
      LARA_CHECK_ARG(eq != std::string::npos, "bad selection term \"", part,
                     "\" (use n=<idx|avg>,h=<idx|avg>)");
      const std::string key = part.substr(0, eq), value = part.substr(eq + 1);
      int parsed = -1;
      if (value != "avg") {
        try {
          parsed = std::stoi(value);
        } catch (...) {
          throw ArgumentError("bad selection value \"" + value + "\"");
        }
        LARA_CHECK_ARG(parsed >= 0, "selection index must be non-negative");
      }
      if (key == "n") sel.latent = parsed;
      else if (key == "h") sel.head = parsed;
      else throw ArgumentError("unknown selection key \"" + key + "\" (use n or h)");
    }
    pos = end + 1;
  }
  return sel;
}

std::vector<double> select_token_mass(const AttentionRecord& rec, const Selection& sel) {
  const int64_t heads = rec.heads(), latents = rec.latents(), tokens = rec.tokens();
  LARA_CHECK_ARG(sel.head < heads, "head index ", sel.head, " out of range (", heads, " heads)");
  LARA_CHECK_ARG(sel.latent < latents, "latent index ", sel.latent, " out of range (", latents,
                 " latents)");
  const int64_t h0 = sel.head < 0 ? 0 : sel.head;
  const int64_t h1 = sel.head < 0 ? heads : sel.head + 1;
  const int64_t n0 = sel.latent < 0 ? 0 : sel.latent;
  const int64_t n1 = sel.latent < 0 ? latents : sel.latent + 1;
  std::vector<double> mass(static_cast<size_t>(tokens), 0.0);
  for (int64_t h = h0; h < h1; ++h)
    for (int64_t n = n0; n < n1; ++n)
      for (int64_t t = 0; t < tokens; ++t)
        mass[size_t(t)] += rec.weights.at((h * latents + n) * tokens + t);
  const double scale = 1.0 / (double(h1 - h0) * double(n1 - n0));
  for (double& v : mass) v *= scale;
  return mass;
}

CameraHeatmaps reproject_to_images(const AttentionRecord& rec, const Selection& sel,
                                   bool upsample_to_image) {
  const std::vector<double> mass = select_token_mass(rec, sel);
  const int cameras = rec.rig.camera_count();
  CameraHeatmaps maps;
  maps.height = rec.feature_h;
  maps.width = rec.feature_w;
  maps.maps.assign(static_cast<size_t>(cameras),
                   std::vector<float>(static_cast<size_t>(rec.feature_h) * rec.feature_w, 0.0f));
  for (size_t t = 0; t < mass.size(); ++t) {
    const TokenCoord& tc = rec.token_index[t];
    maps.maps[size_t(tc.camera)][size_t(tc.row) * rec.feature_w + tc.col] +=
        static_cast<float>(mass[t]);
  }
  if (upsample_to_image) {
    const int stride = rec.image_h / rec.feature_h;
    for (auto& m : maps.maps) {
      Tensor t = Tensor::from_data({1, rec.feature_h, rec.feature_w},
                                   std::vector<float>(m.begin(), m.end()));
      int up = 1;
      while (up < stride) {
        const int f = (stride / up) % 4 == 0 ? 4 : 2;
        t = bilinear_upsample(t, f);
        up *= f;
      }
      m.assign(t.data().begin(), t.data().end());
    }
    maps.height = rec.image_h;
    maps.width = rec.image_w;
  }
  return maps;
}

PolarProfile polar_collapse(const AttentionRecord& rec, const Selection& sel, int buckets) {
  LARA_CHECK_ARG(buckets >= 4, "polar profile needs at least 4 buckets");
  const std::vector<double> mass = select_token_mass(rec, sel);
  PolarProfile profile;
  profile.buckets = buckets;
  profile.intensity.assign(static_cast<size_t>(buckets), 0.0);
  std::vector<std::vector<double>> per_camera(
      rec.rig.cameras.size(), std::vector<double>(static_cast<size_t>(buckets), 0.0));

  const RayField field = rig_ray_field(rec.rig, rec.feature_h, rec.feature_w);
  const int central_row = (rec.feature_h - 1) / 2;

  // collapse the vertical dimension: per (camera, column), accumulate the
  // column's total mass into the bucket of the central-row ray azimuth
  const int cameras = rec.rig.camera_count();
  for (int cam = 0; cam < cameras; ++cam) {
    for (int col = 0; col < rec.feature_w; ++col) {
      double column_mass = 0.0;
      for (int row = 0; row < rec.feature_h; ++row)
        column_mass += mass[size_t(field.index(cam, row, col))];
      const Eigen::Vector3d dir =
          field.directions[size_t(field.index(cam, central_row, col))];
      const double az = std::atan2(dir.y(), dir.x());
      int bucket = static_cast<int>(std::floor((az + M_PI) / (2.0 * M_PI) * buckets));
      bucket = std::clamp(bucket, 0, buckets - 1);
      profile.intensity[size_t(bucket)] += column_mass;
      per_camera[size_t(cam)][size_t(bucket)] += column_mass;
    }
  }

  profile.dominant_camera.assign(static_cast<size_t>(buckets), -1);
  for (int b = 0; b < buckets; ++b) {
    double best = 0.0;
    for (int cam = 0; cam < cameras; ++cam) {
      if (per_camera[size_t(cam)][size_t(b)] > best) {
        best = per_camera[size_t(cam)][size_t(b)];
        profile.dominant_camera[size_t(b)] = cam;
      }
    }
    profile.raw_max = std::max(profile.raw_max, profile.intensity[size_t(b)]);
  }
  return profile;
}

namespace {

const char* kCameraPalette[] = {"#e6553a", "#3a7be6", "#3ab54a", "#e6a23a", "#9b59b6", "#16a2b8"};

std::string fmt(double v) {
  char buf[48];
  std::snprintf(buf, sizeof buf, "%.2f", v);
  return buf;
}

}  // namespace

std::string polar_profile_svg(const PolarProfile& profile) {
  const int size = 440;
  const double cx = size / 2.0, cy = size / 2.0;
  const double r_max = 190.0;
  const double scale = profile.raw_max > 0 ? r_max / profile.raw_max : 0.0;

  std::string svg;
  svg += "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" + std::to_string(size) +
         "\" height=\"" + std::to_string(size) + "\" viewBox=\"0 0 " + std::to_string(size) +
         " " + std::to_string(size) + "\">\n";
  svg += "<desc>directional attention profile; raw_max=" + fmt(profile.raw_max * 1e6) +
         "e-6; buckets=" + std::to_string(profile.buckets) + "</desc>\n";
  svg += "<rect width=\"100%\" height=\"100%\" fill=\"#ffffff\"/>\n";
  for (double frac : {0.25, 0.5, 0.75, 1.0}) {
    svg += "<circle cx=\"" + fmt(cx) + "\" cy=\"" + fmt(cy) + "\" r=\"" + fmt(r_max * frac) +
           "\" fill=\"none\" stroke=\"#dddddd\" stroke-width=\"1\"/>\n";
  }
  // ego-forward (+x) points up; azimuth grows counter-clockwise (to the left)
  for (int b = 0; b < profile.buckets; ++b) {
    const double az = -M_PI + (b + 0.5) * (2.0 * M_PI / profile.buckets);
    const double r = profile.intensity[size_t(b)] * scale;
    const double x = cx - r * std::sin(az);
    const double y = cy - r * std::cos(az);
    const int cam = profile.dominant_camera[size_t(b)];
    const char* color =
        cam >= 0 ? kCameraPalette[size_t(cam) % 6] : "#bbbbbb";
    svg += "<line class=\"spoke\" x1=\"" + fmt(cx) + "\" y1=\"" + fmt(cy) + "\" x2=\"" + fmt(x) +
           "\" y2=\"" + fmt(y) + "\" stroke=\"" + color + "\" stroke-width=\"1.5\"/>\n";
  }
  svg += "<circle cx=\"" + fmt(cx) + "\" cy=\"" + fmt(cy) +
         "\" r=\"3\" fill=\"#222222\"/>\n</svg>\n";
  return svg;
}

ImageU8 overlay_heatmap(const ImageU8& camera, const std::vector<float>& heat, int heat_h,
                        int heat_w) {
  LARA_CHECK_ARG(camera.channels == 3, "overlay expects an RGB camera image");
  LARA_CHECK_ARG(heat_h == camera.height && heat_w == camera.width,
                 "heatmap dims ", heat_h, "x", heat_w, " must match the image ", camera.height,
                 "x", camera.width);
  float max_heat = 0.0f;
  for (float v : heat) max_heat = std::max(max_heat, v);
  ImageU8 out = camera;
  if (max_heat <= 0.0f) return out;
  for (int y = 0; y < camera.height; ++y) {
    for (int x = 0; x < camera.width; ++x) {
      const float a = 0.85f * heat[size_t(y) * camera.width + x] / max_heat;
      // blend toward a warm highlight
      const float rgb[3] = {255.0f, 64.0f, 32.0f};
      for (int c = 0; c < 3; ++c) {
        const float v = (1.0f - a) * out.at(y, x, c) + a * rgb[c];
        out.at(y, x, c) = static_cast<uint8_t>(std::lround(std::clamp(v, 0.0f, 255.0f)));
      }
    }
  }
  return out;
}

std::vector<std::string> emit_plots(const AttentionRecord& rec,
                                    const std::vector<ImageU8>& camera_images,
                                    const std::vector<Selection>& selections,
                                    const std::string& out_dir) {
  LARA_CHECK_ARG(static_cast<int>(camera_images.size()) == rec.rig.camera_count(),
                 "camera image count mismatch");
  fs::create_directories(out_dir);
  std::vector<std::string> files;
  nlohmann::json index;
  index["buckets"] = 360;
  nlohmann::json sel_index = nlohmann::json::array();

  for (const Selection& sel : selections) {
    const std::string tag = sel.tag();
    const PolarProfile profile = polar_collapse(rec, sel);
    const std::string svg_name = "polar_" + tag + ".svg";
    {
      std::ofstream f(fs::path(out_dir) / svg_name, std::ios::binary);
      LARA_CHECK_IO(f.good(), "cannot write ", svg_name);
      f << polar_profile_svg(profile);
    }
    files.push_back(svg_name);

    const CameraHeatmaps maps = reproject_to_images(rec, sel, true);
    for (int cam = 0; cam < rec.rig.camera_count(); ++cam) {
      const std::string png_name = "cam" + std::to_string(cam) + "_" + tag + ".png";
      write_png(overlay_heatmap(camera_images[size_t(cam)], maps.maps[size_t(cam)], maps.height,
                                maps.width),
                (fs::path(out_dir) / png_name).string());
      files.push_back(png_name);
    }
    sel_index.push_back({{"selection", tag}, {"raw_max", profile.raw_max}});
  }
  index["selections"] = sel_index;
  index["files"] = files;
  {
    std::ofstream f(fs::path(out_dir) / "index.json", std::ios::binary);
    LARA_CHECK_IO(f.good(), "cannot write index.json");
    f << index.dump(2) << "\n";
  }
  files.push_back("index.json");
  return files;
}

void save_attention_record(const AttentionRecord& rec, const std::string& path) {
  std::vector<std::pair<std::string, Tensor>> tensors;
  const int64_t latents = rec.latents(), tokens = rec.tokens();
  for (int64_t h = 0; h < rec.heads(); ++h) {
    Tensor head = Tensor::zeros({latents, tokens});
    std::copy_n(rec.weights.data().begin() + h * latents * tokens, latents * tokens,
                head.data().begin());
    tensors.emplace_back("attn.input.head" + std::to_string(h), std::move(head));
  }
  save_tensors(path, tensors);

  nlohmann::json sidecar;
  nlohmann::json toks = nlohmann::json::array();
  for (const TokenCoord& tc : rec.token_index)
    toks.push_back({tc.camera, tc.row, tc.col});
  sidecar["token_index"] = toks;
  sidecar["feature_h"] = rec.feature_h;
  sidecar["feature_w"] = rec.feature_w;
  std::ofstream f(path + ".tokens.json", std::ios::binary);
  LARA_CHECK_IO(f.good(), "cannot write ", path, ".tokens.json");
  f << sidecar.dump(2) << "\n";
}

}  // namespace lara
