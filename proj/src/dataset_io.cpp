#include "slrf/dataset_io.hpp"

#include <filesystem>
#include <fstream>

#include <json.hpp>

#include "slrf/common.hpp"

namespace slrf {

namespace fs = std::filesystem;
using nlohmann::json;

std::string image_path(const std::string& dir, int cam, int frame) {
  return dir + "/images/cam" + std::to_string(cam) + "/frame" +
         std::to_string(frame) + ".png";
}

std::string mask_path(const std::string& dir, int cam, int frame) {
  return dir + "/masks/cam" + std::to_string(cam) + "/frame" +
         std::to_string(frame) + ".png";
}

namespace {

void write_json_atomic(const json& j, const std::string& path) {
  std::string tmp = path + ".tmp";
  {
    std::ofstream os(tmp);
    if (!os) fail_io("cannot write: " + tmp);
    os << j.dump(1, '\t') << "\n";
  }
  std::error_code ec;
  fs::rename(tmp, path, ec);
  if (ec) fail_io("cannot move into place: " + path);
}

json load_json(const std::string& path) {
  std::ifstream is(path);
  if (!is) fail_io("missing file: " + path);
  json j;
  try {
    is >> j;
  } catch (const std::exception& e) {
    fail_usage("malformed JSON in " + path + ": " + e.what());
  }
  return j;
}

json camera_to_json(const Camera& c, int id) {
  std::vector<double> m(16, 0.0);
  for (int r = 0; r < 3; ++r) {
    for (int k = 0; k < 3; ++k) m[r * 4 + k] = c.world_from_camera.a[r * 3 + k];
  }
  m[3] = c.world_from_camera.t.x;
  m[7] = c.world_from_camera.t.y;
  m[11] = c.world_from_camera.t.z;
  m[15] = 1.0;
  return json{{"id", id},         {"fx", c.fx},       {"fy", c.fy},
              {"cx", c.cx},       {"cy", c.cy},       {"width", c.width},
              {"height", c.height}, {"near", c.near}, {"far", c.far},
              {"world_from_camera", m}};
}

Camera camera_from_json(const json& j) {
  Camera c;
  c.fx = j.at("fx");
  c.fy = j.at("fy");
  c.cx = j.at("cx");
  c.cy = j.at("cy");
  c.width = j.at("width");
  c.height = j.at("height");
  c.near = j.at("near");
  c.far = j.at("far");
  std::vector<double> m = j.at("world_from_camera");
  if (m.size() != 16) fail_usage("world_from_camera must hold 16 values");
  for (int r = 0; r < 3; ++r)
    for (int k = 0; k < 3; ++k) c.world_from_camera.a[r * 3 + k] = m[r * 4 + k];
  c.world_from_camera.t = {m[3], m[7], m[11]};
  c.validate();
  return c;
}

}  // namespace

void write_dataset(const SyntheticScene& scene, const std::vector<Camera>& cams,
                   const std::string& dir, int oracle_samples) {
  if (cams.empty()) fail_usage("write_dataset: no cameras");
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec || !fs::is_directory(dir)) fail_io("cannot create dataset dir: " + dir);

  int T = static_cast<int>(scene.poses.size());
  int C = static_cast<int>(cams.size());

  json meta{{"frames", T},
            {"cameras", C},
            {"width", cams[0].width},
            {"height", cams[0].height},
            {"near", cams[0].near},
            {"far", cams[0].far},
            {"seed", scene.seed},
            {"difficulty", scene.difficulty},
            {"joints", scene.tpl.joint_count()}};
  write_json_atomic(meta, dir + "/meta.json");

  json jcams = json::array();
  for (int c = 0; c < C; ++c) jcams.push_back(camera_to_json(cams[c], c));
  write_json_atomic(jcams, dir + "/cameras.json");

  json jposes = json::array();
  for (const Pose& p : scene.poses) {
    jposes.push_back(json{{"frame", p.frame_index},
                          {"theta", p.theta},
                          {"root", {p.root_translation.x, p.root_translation.y,
                                    p.root_translation.z}},
                          {"time_norm", p.time_norm}});
  }
  write_json_atomic(jposes, dir + "/poses.json");

  json jtpl;
  {
    json pos = json::array(), par = json::array();
    for (const Vec3& p : scene.tpl.joint_rest)
      pos.push_back({p.x, p.y, p.z});
    for (int p : scene.tpl.joint_parent) par.push_back(p);
    jtpl["joints"] = {{"positions", pos}, {"parents", par}};
    json verts = json::array();
    for (const Vec3& v : scene.tpl.vertices) verts.push_back({v.x, v.y, v.z});
    jtpl["vertices"] = verts;
    json faces = json::array();
    for (const auto& f : scene.tpl.faces) faces.push_back({f[0], f[1], f[2]});
    jtpl["faces"] = faces;
    jtpl["skin_weights"] = scene.tpl.skin_weights;
  }
  write_json_atomic(jtpl, dir + "/template.json");

  for (int c = 0; c < C; ++c) {
    fs::create_directories(dir + "/images/cam" + std::to_string(c));
    fs::create_directories(dir + "/masks/cam" + std::to_string(c));
    for (int t = 0; t < T; ++t) {
      Image rgba = oracle_render(scene, cams[c], t, oracle_samples);
      Image rgb(rgba.width, rgba.height, 3);
      Image mask(rgba.width, rgba.height, 1);
      for (int y = 0; y < rgba.height; ++y)
        for (int x = 0; x < rgba.width; ++x) {
          for (int ch = 0; ch < 3; ++ch) rgb.at(x, y, ch) = rgba.at(x, y, ch);
          mask.at(x, y, 0) = rgba.at(x, y, 3) > 0.5f ? 1.0f : 0.0f;
        }
      save_png(rgb, image_path(dir, c, t));
      save_png(mask, mask_path(dir, c, t));
    }
  }
}

Dataset read_dataset(const std::string& dir) {
  Dataset ds;
  json meta = load_json(dir + "/meta.json");
  int T = meta.at("frames");
  int C = meta.at("cameras");
  ds.width = meta.at("width");
  ds.height = meta.at("height");
  ds.near = meta.at("near");
  ds.far = meta.at("far");
  ds.seed = meta.value("seed", 0ull);
  ds.difficulty = meta.value("difficulty", "dynamic");
  if (T < 1 || C < 1) fail_usage("meta.json: frame and camera counts must be positive");

  json jcams = load_json(dir + "/cameras.json");
  if (static_cast<int>(jcams.size()) != C)
    fail_usage("cameras.json: expected " + std::to_string(C) + " cameras, found " +
               std::to_string(jcams.size()));
  for (const auto& jc : jcams) ds.cameras.push_back(camera_from_json(jc));

  json jposes = load_json(dir + "/poses.json");
  if (static_cast<int>(jposes.size()) != T)
    fail_usage("poses.json: expected " + std::to_string(T) + " poses, found " +
               std::to_string(jposes.size()));
  for (const auto& jp : jposes) {
    Pose p;
    p.frame_index = jp.at("frame");
    p.theta = jp.at("theta").get<std::vector<double>>();
    std::vector<double> root = jp.at("root");
    if (root.size() != 3) fail_usage("poses.json: root must have 3 components");
    p.root_translation = {root[0], root[1], root[2]};
    p.time_norm = jp.at("time_norm");
    ds.poses.push_back(std::move(p));
  }

  json jtpl = load_json(dir + "/template.json");
  {
    const json& jj = jtpl.at("joints");
    for (const auto& p : jj.at("positions"))
      ds.tpl.joint_rest.push_back({p[0], p[1], p[2]});
    ds.tpl.joint_parent = jj.at("parents").get<std::vector<int>>();
    for (const auto& v : jtpl.at("vertices"))
      ds.tpl.vertices.push_back({v[0], v[1], v[2]});
    for (const auto& f : jtpl.at("faces"))
      ds.tpl.faces.push_back({f[0], f[1], f[2]});
    ds.tpl.skin_weights =
        jtpl.at("skin_weights").get<std::vector<std::vector<double>>>();
    ds.tpl.validate();
  }
  for (const Pose& p : ds.poses) p.validate(ds.tpl.joint_count());

  ds.images.resize(C);
  ds.masks.resize(C);
  for (int c = 0; c < C; ++c) {
    ds.images[c].reserve(T);
    ds.masks[c].reserve(T);
    for (int t = 0; t < T; ++t) {
      std::string ip = image_path(dir, c, t);
      if (!fs::exists(ip)) fail_io("missing image: " + ip);
      Image img = load_png(ip);
      if (img.channels != 3 || img.width != ds.width || img.height != ds.height)
        fail_usage("image has wrong format: " + ip);
      ds.images[c].push_back(std::move(img));

      std::string mp = mask_path(dir, c, t);
      if (!fs::exists(mp)) fail_io("missing mask: " + mp);
      Image m = load_png(mp);
      if (m.channels != 1 || m.width != ds.width || m.height != ds.height)
        fail_usage("mask has wrong format: " + mp);
      ds.masks[c].push_back(std::move(m));
    }
  }
  return ds;
}

}  // namespace slrf
