#include "quadfit/io.hpp"

#include <openssl/sha.h>

#include <algorithm>
#include <bit>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <sstream>

namespace quadfit {

namespace fs = std::filesystem;

static_assert(std::endian::native == std::endian::little, "flat binary I/O assumes a little-endian host");

namespace {

constexpr char kMagic[4] = {'Q', 'F', 'S', 'B'};
constexpr std::uint16_t kVersion = 1;

template <typename T>
void put(std::ostream& out, T v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T get(std::istream& in, const std::string& path) {
  T v;
  in.read(reinterpret_cast<char*>(&v), sizeof(T));
  require(in.gcount() == static_cast<std::streamsize>(sizeof(T)), ErrorCode::Format, path + ": truncated header");
  return v;
}

std::string hex(const unsigned char* d, std::size_t n) {
  std::ostringstream s;
  for (std::size_t i = 0; i < n; ++i) s << std::hex << std::setw(2) << std::setfill('0') << static_cast<int>(d[i]);
  return s.str();
}

std::string sha1(const std::string& data) {
  unsigned char out[SHA_DIGEST_LENGTH];
  SHA1(reinterpret_cast<const unsigned char*>(data.data()), data.size(), out);
  return hex(out, SHA_DIGEST_LENGTH);
}

std::ofstream open_out(const std::string& path, bool binary) {
  std::ofstream out(path, binary ? std::ios::binary : std::ios::out);
  require(out.good(), ErrorCode::Io, "cannot write " + path);
  return out;
}

}  // namespace

void write_flat(const std::string& path, const Mat& m) {
  std::ofstream out = open_out(path, true);
  out.write(kMagic, 4);
  put<std::uint16_t>(out, kVersion);
  put<std::uint16_t>(out, 0);
  put<std::uint32_t>(out, static_cast<std::uint32_t>(m.rows()));
  put<std::uint32_t>(out, static_cast<std::uint32_t>(m.cols()));
  std::vector<float> buf(m.size());
  for (Eigen::Index i = 0; i < m.size(); ++i) buf[i] = static_cast<float>(m.data()[i]);
  out.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size() * sizeof(float)));
  require(out.good(), ErrorCode::Io, "write failed: " + path);
}

Mat read_flat(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  require(in.good(), ErrorCode::Io, "cannot open " + path);
  char magic[4];
  in.read(magic, 4);
  require(in.gcount() == 4 && std::memcmp(magic, kMagic, 4) == 0, ErrorCode::Format, path + ": bad magic");
  const auto version = get<std::uint16_t>(in, path);
  require(version == kVersion, ErrorCode::Format, path + ": unsupported version " + std::to_string(version));
  get<std::uint16_t>(in, path);
  const auto rows = get<std::uint32_t>(in, path);
  const auto cols = get<std::uint32_t>(in, path);
  std::vector<float> buf(static_cast<std::size_t>(rows) * cols);
  in.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size() * sizeof(float)));
  require(in.gcount() == static_cast<std::streamsize>(buf.size() * sizeof(float)), ErrorCode::Format,
          path + ": truncated data");
  Mat m(rows, cols);
  for (std::size_t i = 0; i < buf.size(); ++i) m.data()[i] = buf[i];
  return m;
}

Mat round_to_float(const Mat& m) {
  Mat r(m.rows(), m.cols());
  for (Eigen::Index i = 0; i < m.size(); ++i) r.data()[i] = static_cast<float>(m.data()[i]);
  return r;
}

void write_obj(const std::string& path, const Mat& vertices, const Faces& faces) {
  std::ofstream out = open_out(path, false);
  out << std::setprecision(17);
  for (Eigen::Index i = 0; i < vertices.rows(); ++i)
    out << "v " << vertices(i, 0) << ' ' << vertices(i, 1) << ' ' << vertices(i, 2) << '\n';
  for (Eigen::Index f = 0; f < faces.rows(); ++f)
    out << "f " << faces(f, 0) + 1 << ' ' << faces(f, 1) + 1 << ' ' << faces(f, 2) + 1 << '\n';
}

void read_obj(const std::string& path, Mat& vertices, Faces& faces) {
  std::ifstream in(path);
  require(in.good(), ErrorCode::Io, "cannot open " + path);
  std::vector<std::array<double, 3>> v;
  std::vector<std::array<int, 3>> f;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    std::istringstream s(line);
    std::string tag;
    if (!(s >> tag) || tag[0] == '#') continue;
    if (tag == "v") {
      std::array<double, 3> p;
      require(static_cast<bool>(s >> p[0] >> p[1] >> p[2]), ErrorCode::Format,
              path + ":" + std::to_string(lineno) + ": bad vertex");
      v.push_back(p);
    } else if (tag == "f") {
      std::array<int, 3> t;
      for (int k = 0; k < 3; ++k) {
        std::string tok;
        require(static_cast<bool>(s >> tok), ErrorCode::Format, path + ":" + std::to_string(lineno) + ": bad face");
        t[k] = std::stoi(tok.substr(0, tok.find('/'))) - 1;
      }
      std::string extra;
      require(!(s >> extra), ErrorCode::Format, path + ":" + std::to_string(lineno) + ": only triangles are supported");
      f.push_back(t);
    }
  }
  vertices.resize(static_cast<Eigen::Index>(v.size()), 3);
  for (std::size_t i = 0; i < v.size(); ++i)
    for (int k = 0; k < 3; ++k) vertices(i, k) = v[i][k];
  faces.resize(static_cast<Eigen::Index>(f.size()), 3);
  for (std::size_t i = 0; i < f.size(); ++i) {
    for (int k = 0; k < 3; ++k) {
      require(f[i][k] >= 0 && f[i][k] < static_cast<int>(v.size()), ErrorCode::Format,
              path + ": face references a missing vertex");
      faces(i, k) = f[i][k];
    }
  }
}

std::string read_text(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  require(in.good(), ErrorCode::Io, "cannot open " + path);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

void write_text(const std::string& path, const std::string& text) {
  std::ofstream out = open_out(path, true);
  out << text;
}

void check_json_keys(const Json& j, std::initializer_list<const char*> allowed, const std::string& where) {
  require(j.is_object(), ErrorCode::InvalidArgument, where + ": expected an object");
  for (const auto& [key, value] : j.items()) {
    bool ok = false;
    for (const char* a : allowed) ok = ok || key == a;
    require(ok, ErrorCode::InvalidArgument, where + ": unknown field '" + key + "'");
  }
}

Json read_json(const std::string& path) {
  const std::string text = read_text(path);
  try {
    return Json::parse(text);
  } catch (const Json::parse_error& e) {
    fail(ErrorCode::Format, path + ": " + e.what());
  }
}

void write_json(const std::string& path, const Json& j) { write_text(path, j.dump(2) + "\n"); }

Json skeleton_to_json(const Skeleton& s, const std::vector<KeypointDef>& keypoints) {
  Json j;
  for (const auto& joint : s.joints) {
    j["joints"].push_back({{"name", joint.name},
                           {"parent", joint.parent},
                           {"offset", {joint.offset.x(), joint.offset.y(), joint.offset.z()}}});
  }
  for (const auto& leg : s.leg_joint_ids) j["leg_joint_ids"].push_back(leg);
  j["head_bone_id"] = s.head_bone_id;
  j["torso_endpoint_vertex_ids"] = {s.torso_endpoint_vertex_ids[0], s.torso_endpoint_vertex_ids[1]};
  for (const auto& t : s.scale_targets) j["scale_targets"].push_back({{"name", t.name}, {"joints", t.joints}});
  j["abduction_axis"] = {s.abduction_axis.x(), s.abduction_axis.y(), s.abduction_axis.z()};
  for (const auto& k : keypoints) {
    j["keypoints"].push_back({{"name", k.name},
                              {"weight", k.weight},
                              {"anchor", k.anchor == KeypointDef::Anchor::Vertex ? "vertex" : "joint"},
                              {"index", k.index}});
  }
  return j;
}

void skeleton_from_json(const Json& j, Skeleton& s, std::vector<KeypointDef>& keypoints) {
  try {
    s = Skeleton{};
    for (const auto& jj : j.at("joints")) {
      const auto& o = jj.at("offset");
      s.joints.push_back({jj.at("name").get<std::string>(), jj.at("parent").get<int>(),
                          Vec3(o.at(0).get<double>(), o.at(1).get<double>(), o.at(2).get<double>())});
    }
    const auto& legs = j.at("leg_joint_ids");
    require(legs.size() == 4, ErrorCode::Format, "skeleton.json: expected four legs");
    for (int i = 0; i < 4; ++i) s.leg_joint_ids[i] = legs.at(i).get<std::vector<int>>();
    s.head_bone_id = j.at("head_bone_id").get<int>();
    const auto& te = j.at("torso_endpoint_vertex_ids");
    s.torso_endpoint_vertex_ids = {te.at(0).get<int>(), te.at(1).get<int>()};
    for (const auto& t : j.at("scale_targets"))
      s.scale_targets.push_back({t.at("name").get<std::string>(), t.at("joints").get<std::vector<int>>()});
    if (j.contains("abduction_axis")) {
      const auto& a = j.at("abduction_axis");
      s.abduction_axis = Vec3(a.at(0).get<double>(), a.at(1).get<double>(), a.at(2).get<double>()).normalized();
    }
    keypoints.clear();
    for (const auto& k : j.at("keypoints")) {
      const std::string anchor = k.at("anchor").get<std::string>();
      require(anchor == "vertex" || anchor == "joint", ErrorCode::Format, "skeleton.json: bad keypoint anchor");
      keypoints.push_back({k.at("name").get<std::string>(), k.at("weight").get<double>(),
                           anchor == "vertex" ? KeypointDef::Anchor::Vertex : KeypointDef::Anchor::Joint,
                           k.at("index").get<int>()});
    }
  } catch (const Json::exception& e) {
    fail(ErrorCode::Format, std::string("skeleton.json: ") + e.what());
  }
}

void save_bundle(const std::string& dir, const ModelBundle& model) {
  fs::create_directories(dir);
  const fs::path d(dir);
  write_json((d / "skeleton.json").string(), skeleton_to_json(model.skeleton, model.mesh.keypoints));
  write_obj((d / "template.obj").string(), model.mesh.vertices, model.mesh.faces);
  write_flat((d / "lbs_weights.bin").string(), model.mesh.lbs_weights);
  write_flat((d / "shape_basis.bin").string(), model.space.basis);
  write_flat((d / "shape_eigenvalues.bin").string(), Mat(model.space.eigenvalues.transpose()));
  write_flat((d / "joint_regressor.bin").string(), model.joint_regressor);
}

ModelBundle load_bundle(const std::string& dir) {
  const fs::path d(dir);
  for (const char* f : {"skeleton.json", "template.obj", "lbs_weights.bin", "shape_basis.bin",
                        "shape_eigenvalues.bin", "joint_regressor.bin"}) {
    require(fs::exists(d / f), ErrorCode::Io, "model bundle is missing " + (d / f).string());
  }
  ModelBundle m;
  skeleton_from_json(read_json((d / "skeleton.json").string()), m.skeleton, m.mesh.keypoints);
  read_obj((d / "template.obj").string(), m.mesh.vertices, m.mesh.faces);
  m.mesh.lbs_weights = read_flat((d / "lbs_weights.bin").string());
  // float32 storage: restore exact row sums
  for (Eigen::Index i = 0; i < m.mesh.lbs_weights.rows(); ++i) {
    const double s = m.mesh.lbs_weights.row(i).sum();
    if (s > 0.0) m.mesh.lbs_weights.row(i) /= s;
  }
  m.space.basis = read_flat((d / "shape_basis.bin").string());
  const Mat ev = read_flat((d / "shape_eigenvalues.bin").string());
  m.space.eigenvalues = Eigen::Map<const Vec>(ev.data(), ev.size());
  m.space.mean_vertices = m.mesh.vertices;
  m.space.mean_coeffs = Vec::Zero(m.space.basis.rows());
  m.joint_regressor = read_flat((d / "joint_regressor.bin").string());
  m.finalize();
  return m;
}

std::string content_hash(const std::string& dir) {
  std::vector<std::string> names;
  for (const auto& e : fs::directory_iterator(dir)) {
    if (e.is_regular_file()) names.push_back(e.path().filename().string());
  }
  std::sort(names.begin(), names.end());
  std::string listing;
  for (const auto& n : names) {
    const std::string body = read_text((fs::path(dir) / n).string());
    listing += n + " " + sha1("blob " + std::to_string(body.size()) + '\0' + body) + "\n";
  }
  return sha1(listing);
}

}  // namespace quadfit
