#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <filesystem>
#include <fstream>

#include "doctest.h"
#include "lara/analysis.hpp"
#include "lara/checkpoint.hpp"
#include "lara/rng.hpp"
#include "lara/synthdata.hpp"

using namespace lara;

namespace {

// Hand-built record with a controllable weight tensor.
AttentionRecord make_record(const CameraRig& rig, int fh, int fw, int heads, int latents,
                            uint64_t seed) {
  AttentionRecord rec;
  rec.rig = rig;
  rec.feature_h = fh;
  rec.feature_w = fw;
  rec.image_h = rig.cameras[0].height;
  rec.image_w = rig.cameras[0].width;
  rec.token_index = build_token_index(rig.camera_count(), fh, fw);
  const int64_t tokens = static_cast<int64_t>(rig.camera_count()) * fh * fw;
  rec.weights = Tensor::zeros({heads, latents, tokens});
  Rng rng(seed);
  for (int64_t h = 0; h < heads; ++h)
    for (int64_t n = 0; n < latents; ++n) {
      double sum = 0;
      std::vector<double> row(static_cast<size_t>(tokens));
      for (auto& v : row) {
        v = -std::log(1.0 - rng.uniform());  // exponential, positive
        sum += v;
      }
      for (int64_t t = 0; t < tokens; ++t)
        rec.weights.at((h * latents + n) * tokens + t) = static_cast<float>(row[size_t(t)] / sum);
    }
  return rec;
}

double total(const std::vector<double>& v) {
  double s = 0;
  for (double x : v) s += x;
  return s;
}

}  // namespace

TEST_CASE("selection parsing") {
  Selection s1 = parse_selection("n=10,h=5");
  CHECK(s1.latent == 10);
  CHECK(s1.head == 5);
  Selection s2 = parse_selection("n=avg");
  CHECK(s2.latent == -1);
  CHECK(s2.head == -1);
  Selection s3 = parse_selection("h=avg,n=3");
  CHECK(s3.latent == 3);
  CHECK(s3.head == -1);
  CHECK(s3.tag() == "n3_havg");
  CHECK_THROWS_AS(parse_selection("x=1"), ArgumentError);
  CHECK_THROWS_AS(parse_selection("n=-2"), ArgumentError);
  CHECK_THROWS_AS(parse_selection("n"), ArgumentError);
}

TEST_CASE("select_token_mass: rows are distributions; averaging stays convex") {
  CameraRig rig = default_rig(3, 32, 64, 100.0);
  AttentionRecord rec = make_record(rig, 4, 8, 2, 5, 1);
  CHECK(rec.tokens() == 3 * 4 * 8);

  for (int h = 0; h < 2; ++h)
    for (int n = 0; n < 5; ++n) {
      auto mass = select_token_mass(rec, {n, h});
      CHECK(std::abs(total(mass) - 1.0) < 1e-5);
      for (double v : mass) CHECK(v >= 0.0);
    }
  // averaged over everything: still a distribution over tokens
  auto avg = select_token_mass(rec, {-1, -1});
  CHECK(std::abs(total(avg) - 1.0) < 1e-6);

  CHECK_THROWS_AS(select_token_mass(rec, {7, 0}), ArgumentError);
  CHECK_THROWS_AS(select_token_mass(rec, {0, 4}), ArgumentError);
}

TEST_CASE("reproject_to_images: hot token, camera mass split, conservation") {
  CameraRig rig = default_rig(3, 32, 64, 100.0);
  AttentionRecord rec = make_record(rig, 4, 8, 2, 4, 2);

  SUBCASE("all mass on one token paints a single hot cell in one camera") {
    AttentionRecord hot = rec;
    hot.weights = Tensor::zeros({1, 1, rec.tokens()});
    const int64_t target = rec.tokens() / 2 + 3;
    hot.weights.at(target) = 1.0f;
    CameraHeatmaps maps = reproject_to_images(hot, {0, 0});
    const TokenCoord tc = hot.token_index[size_t(target)];
    int nonzero = 0;
    for (int cam = 0; cam < 3; ++cam)
      for (int i = 0; i < 4; ++i)
        for (int j = 0; j < 8; ++j)
          if (maps.maps[size_t(cam)][size_t(i) * 8 + j] != 0.0f) {
            ++nonzero;
            CHECK(cam == tc.camera);
            CHECK(i == tc.row);
            CHECK(j == tc.col);
          }
    CHECK(nonzero == 1);
  }

  SUBCASE("per-camera mass equals direct summation over token groups") {
    const Selection sel{1, 0};
    CameraHeatmaps maps = reproject_to_images(rec, sel);
    auto mass = select_token_mass(rec, sel);
    double grand = 0;
    for (int cam = 0; cam < 3; ++cam) {
      double map_mass = 0;
      for (float v : maps.maps[size_t(cam)]) map_mass += v;
      double direct = 0;
      for (size_t t = 0; t < mass.size(); ++t)
        if (rec.token_index[t].camera == cam) direct += mass[t];
      CHECK(map_mass == doctest::Approx(direct).epsilon(1e-6));
      grand += map_mass;
    }
    CHECK(grand == doctest::Approx(1.0).epsilon(1e-6));
  }

  SUBCASE("upsampled overlays match the camera image dims") {
    CameraHeatmaps maps = reproject_to_images(rec, {0, 0}, true);
    CHECK(maps.height == 32);
    CHECK(maps.width == 64);
  }
}

TEST_CASE("polar_collapse: uniformity, single column, conservation, continuity") {
  CameraRig rig = default_rig(4, 32, 64, 100.0);
  const int fh = 4, fw = 8;

  SUBCASE("uniform attention: every camera column carries equal mass") {
    AttentionRecord rec = make_record(rig, fh, fw, 1, 1, 3);
    const int64_t tokens = rec.tokens();
    for (int64_t t = 0; t < tokens; ++t) rec.weights.at(t) = 1.0f / float(tokens);
    PolarProfile profile = polar_collapse(rec, {0, 0}, 720);
    // analytic oracle: each of the 4*8 columns holds fh/tokens of the mass
    const double column_mass = double(fh) / double(tokens);
    int nonzero = 0;
    for (int b = 0; b < 720; ++b) {
      if (profile.intensity[size_t(b)] == 0.0) continue;
      ++nonzero;
      const double units = profile.intensity[size_t(b)] / column_mass;
      // buckets hold an integer number of columns, each within 5% of the
      // uniform column mass
      const double rounded = std::round(units);
      CHECK(rounded >= 1.0);
      CHECK(std::abs(units - rounded) < 0.05);
    }
    CHECK(nonzero >= 24);  // 32 columns, some pairs may share a bucket
    CHECK(std::abs(total(profile.intensity) - 1.0) < 1e-6);
  }

  SUBCASE("single-column attention: exactly one nonzero bucket") {
    AttentionRecord rec = make_record(rig, fh, fw, 1, 1, 4);
    for (int64_t t = 0; t < rec.tokens(); ++t) rec.weights.at(t) = 0.0f;
    // camera 2, column 5, all rows
    const RayField field = rig_ray_field(rig, fh, fw);
    for (int row = 0; row < fh; ++row)
      rec.weights.at(field.index(2, row, 5)) = 0.25f;
    PolarProfile profile = polar_collapse(rec, {0, 0});
    int nonzero = 0, where = -1;
    for (int b = 0; b < 360; ++b)
      if (profile.intensity[size_t(b)] > 0) {
        ++nonzero;
        where = b;
      }
    CHECK(nonzero == 1);
    // bucket azimuth matches the central-row ray of that column
    const Eigen::Vector3d dir = field.directions[size_t(field.index(2, (fh - 1) / 2, 5))];
    const double az = std::atan2(dir.y(), dir.x());
    const int expect = std::clamp(int(std::floor((az + M_PI) / (2 * M_PI) * 360)), 0, 359);
    CHECK(where == expect);
    CHECK(profile.dominant_camera[size_t(where)] == 2);
  }

  SUBCASE("mass conservation across representations (1e-6)") {
    AttentionRecord rec = make_record(rig, fh, fw, 3, 5, 5);
    for (const Selection& sel : {Selection{0, 0}, Selection{-1, 1}, Selection{2, -1},
                                 Selection{-1, -1}}) {
      const double raw = total(select_token_mass(rec, sel));
      CameraHeatmaps maps = reproject_to_images(rec, sel);
      double repro = 0;
      for (const auto& m : maps.maps)
        for (float v : m) repro += v;
      PolarProfile profile = polar_collapse(rec, sel);
      const double polar = total(profile.intensity);
      CHECK(std::abs(raw - repro) < 1e-6);
      CHECK(std::abs(raw - polar) < 1e-6);
      CHECK(std::abs(raw - 1.0) < 1e-5);
    }
  }

  SUBCASE("averaging commutes: mean of per-head profiles == profile of head average") {
    AttentionRecord rec = make_record(rig, fh, fw, 4, 2, 6);
    PolarProfile averaged = polar_collapse(rec, {0, -1});
    std::vector<double> mean(360, 0.0);
    for (int h = 0; h < 4; ++h) {
      PolarProfile per = polar_collapse(rec, {0, h});
      for (int b = 0; b < 360; ++b) mean[size_t(b)] += per.intensity[size_t(b)] / 4.0;
    }
    for (int b = 0; b < 360; ++b)
      CHECK(std::abs(mean[size_t(b)] - averaged.intensity[size_t(b)]) < 1e-12);
  }

  SUBCASE("continuity: same-azimuth columns of same-center cameras share a bucket") {
    // two cameras with one optical center; camera B yawed so that its
    // central column points exactly along one of camera A's column rays
    const Eigen::Vector3d center(0.0, 0.0, 1.5);
    CameraRig shared = default_rig(2, 32, 64, 100.0);
    shared.cameras[0].extrinsics.translation = center;
    shared.cameras[1].extrinsics.translation = center;
    const RayField probe = rig_ray_field(shared, fh, fw);
    const Eigen::Vector3d target = probe.directions[size_t(probe.index(0, (fh - 1) / 2, 5))];
    const double target_az = std::atan2(target.y(), target.x());
    // the central column of a yaw-phi camera has azimuth phi + az_offset
    // where az_offset is the central column's azimuth for yaw 0
    CameraRig base = default_rig(1, 32, 64, 100.0);
    base.cameras[0].extrinsics.translation = center;
    const RayField base_field = rig_ray_field(base, fh, fw);
    const Eigen::Vector3d base_dir =
        base_field.directions[size_t(base_field.index(0, (fh - 1) / 2, 3))];
    const double base_az = std::atan2(base_dir.y(), base_dir.x());
    const double yaw_b = target_az - base_az;
    shared.cameras[1].extrinsics.rotation =
        Eigen::AngleAxisd(yaw_b, Eigen::Vector3d::UnitZ()).toRotationMatrix() *
        default_rig(1, 32, 64, 100.0).cameras[0].extrinsics.rotation;

    AttentionRecord rec = make_record(shared, fh, fw, 1, 1, 7);
    const RayField field = rig_ray_field(shared, fh, fw);
    for (int64_t t = 0; t < rec.tokens(); ++t) rec.weights.at(t) = 0.0f;
    for (int row = 0; row < fh; ++row) {
      rec.weights.at(field.index(0, row, 5)) = 0.125f;
      rec.weights.at(field.index(1, row, 3)) = 0.125f;
    }
    PolarProfile profile = polar_collapse(rec, {0, 0});
    int nonzero = 0;
    for (int b = 0; b < 360; ++b) nonzero += profile.intensity[size_t(b)] > 0 ? 1 : 0;
    CHECK(nonzero == 1);  // both cameras' columns landed in the same bucket
  }
}

TEST_CASE("emit_plots: deterministic bytes, spoke count, file set") {
  namespace fs = std::filesystem;
  CameraRig rig = default_rig(2, 32, 64, 100.0);
  AttentionRecord rec = make_record(rig, 4, 8, 2, 4, 8);

  std::vector<ImageU8> cams;
  for (int k = 0; k < 2; ++k) {
    ImageU8 img;
    img.width = 64;
    img.height = 32;
    img.channels = 3;
    img.data.assign(64 * 32 * 3, uint8_t(40 + 60 * k));
    cams.push_back(img);
  }

  const std::string dir1 = (fs::temp_directory_path() / "lara_plots1").string();
  const std::string dir2 = (fs::temp_directory_path() / "lara_plots2").string();
  fs::remove_all(dir1);
  fs::remove_all(dir2);
  std::vector<Selection> sels = {parse_selection("n=0,h=0"), parse_selection("n=avg,h=1")};
  auto files1 = emit_plots(rec, cams, sels, dir1);
  auto files2 = emit_plots(rec, cams, sels, dir2);
  REQUIRE(files1 == files2);
  // per selection: 1 svg + 2 pngs; plus index.json
  CHECK(files1.size() == 2 * 3 + 1);

  auto slurp = [](const fs::path& p) {
    std::ifstream f(p, std::ios::binary);
    REQUIRE(f.good());
    return std::string((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  };
  for (const std::string& name : files1)
    CHECK(slurp(fs::path(dir1) / name) == slurp(fs::path(dir2) / name));

  // the polar SVG contains exactly 360 radial spokes
  const std::string svg = slurp(fs::path(dir1) / "polar_n0_h0.svg");
  size_t count = 0, pos = 0;
  while ((pos = svg.find("class=\"spoke\"", pos)) != std::string::npos) {
    ++count;
    pos += 10;
  }
  CHECK(count == 360);

  // overlays match camera dims
  ImageU8 overlay = read_png((fs::path(dir1) / "cam0_n0_h0.png").string());
  CHECK(overlay.width == 64);
  CHECK(overlay.height == 32);
}

TEST_CASE("attention record dump: tensors plus token sidecar") {
  namespace fs = std::filesystem;
  CameraRig rig = default_rig(2, 32, 64, 100.0);
  AttentionRecord rec = make_record(rig, 4, 8, 3, 4, 9);
  const std::string path = (fs::temp_directory_path() / "lara_attn.lara").string();
  save_attention_record(rec, path);

  auto tensors = load_tensors(path);
  REQUIRE(tensors.size() == 3);
  CHECK(tensors[0].first == "attn.input.head0");
  CHECK(tensors[2].first == "attn.input.head2");
  CHECK(tensors[0].second.dims() == std::vector<int64_t>{4, rec.tokens()});
  // bit-exact payload
  for (int64_t i = 0; i < 4 * rec.tokens(); ++i)
    CHECK(tensors[1].second.at(i) == rec.weights.at(1 * 4 * rec.tokens() + i));

  std::ifstream sidecar(path + ".tokens.json");
  REQUIRE(sidecar.good());
  std::string text((std::istreambuf_iterator<char>(sidecar)), std::istreambuf_iterator<char>());
  CHECK(text.find("token_index") != std::string::npos);
}
