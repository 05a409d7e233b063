#pragma once

#include "quadfit/model.hpp"

#include <json.hpp>

#include <string>

namespace quadfit {

using Json = nlohmann::json;

/// Flat binary matrix: "QFSB", u16 version, u16 reserved, u32 rows, u32 cols,
/// then row-major little-endian float32 data.
void write_flat(const std::string& path, const Mat& m);
Mat read_flat(const std::string& path);

/// Wavefront OBJ with vertices and triangular faces only.
void write_obj(const std::string& path, const Mat& vertices, const Faces& faces);
void read_obj(const std::string& path, Mat& vertices, Faces& faces);

Json read_json(const std::string& path);
void write_json(const std::string& path, const Json& j);
void write_text(const std::string& path, const std::string& text);
std::string read_text(const std::string& path);

/// Throws InvalidArgument if j is not an object or has a key outside `allowed`.
void check_json_keys(const Json& j, std::initializer_list<const char*> allowed, const std::string& where);

/// Reads j[key] into out when present; a wrong type throws InvalidArgument.
template <class T>
void read_json_field(const Json& j, const char* key, T& out, const std::string& where) {
  if (!j.contains(key)) return;
  try {
    out = j.at(key).get<T>();
  } catch (const nlohmann::json::exception&) {
    fail(ErrorCode::InvalidArgument, where + ": field '" + key + "' has the wrong type");
  }
}

Json skeleton_to_json(const Skeleton& s, const std::vector<KeypointDef>& keypoints);
void skeleton_from_json(const Json& j, Skeleton& s, std::vector<KeypointDef>& keypoints);

/// Writes skeleton.json, template.obj, lbs_weights.bin, shape_basis.bin,
/// shape_eigenvalues.bin and joint_regressor.bin into dir.
void save_bundle(const std::string& dir, const ModelBundle& model);
ModelBundle load_bundle(const std::string& dir);

/// Git-style content hash of a directory's regular files (non-recursive):
/// SHA-1 over sorted "name blob-sha1" lines, blob hashes as in git.
std::string content_hash(const std::string& dir);

/// Rounds every entry to the nearest float32, i.e. what a flat-binary round trip keeps.
Mat round_to_float(const Mat& m);

}  // namespace quadfit
