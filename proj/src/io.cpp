#include "spreg/io.hpp"

#include <cstdint>
#include <cstring>
#include <fstream>
#include <sstream>

namespace spreg {

namespace {

void require(bool ok, const std::string& msg) {
  if (!ok) throw IoError(msg);
}

std::ifstream open_in(const std::string& path, bool binary) {
  std::ifstream in(path, binary ? std::ios::binary : std::ios::in);
  require(in.good(), "cannot open for reading: " + path);
  return in;
}

std::ofstream open_out(const std::string& path, bool binary) {
  std::ofstream out(path, binary ? std::ios::binary : std::ios::out);
  require(out.good(), "cannot open for writing: " + path);
  return out;
}

void check_cloud(const PointCloud& c, const std::string& path) {
  require(c.valid(), "non-finite coordinates or inconsistent attributes in " + path);
}

std::string format_double(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

}  // namespace

PointCloud read_kitti_bin(const std::string& path) {
  auto in = open_in(path, true);
  in.seekg(0, std::ios::end);
  const std::streamoff len = in.tellg();
  in.seekg(0, std::ios::beg);
  require(len % 16 == 0, "KITTI bin length not a multiple of 16: " + path);

  const Index n = static_cast<Index>(len / 16);
  PointCloud cloud;
  cloud.points.resize(n, 3);
  cloud.attributes.resize(n);
  std::vector<float> buf(static_cast<size_t>(n) * 4);
  in.read(reinterpret_cast<char*>(buf.data()), len);
  require(in.gcount() == len, "short read: " + path);
  for (Index i = 0; i < n; ++i) {
    cloud.points(i, 0) = buf[static_cast<size_t>(i) * 4 + 0];
    cloud.points(i, 1) = buf[static_cast<size_t>(i) * 4 + 1];
    cloud.points(i, 2) = buf[static_cast<size_t>(i) * 4 + 2];
    cloud.attributes[i] = buf[static_cast<size_t>(i) * 4 + 3];
  }
  check_cloud(cloud, path);
  return cloud;
}

void write_kitti_bin(const std::string& path, const PointCloud& cloud) {
  auto out = open_out(path, true);
  std::vector<float> buf(static_cast<size_t>(cloud.size()) * 4);
  for (Index i = 0; i < cloud.size(); ++i) {
    buf[static_cast<size_t>(i) * 4 + 0] = static_cast<float>(cloud.points(i, 0));
    buf[static_cast<size_t>(i) * 4 + 1] = static_cast<float>(cloud.points(i, 1));
    buf[static_cast<size_t>(i) * 4 + 2] = static_cast<float>(cloud.points(i, 2));
    buf[static_cast<size_t>(i) * 4 + 3] =
        cloud.has_attributes() ? static_cast<float>(cloud.attributes[i]) : 0.0f;
  }
  out.write(reinterpret_cast<const char*>(buf.data()),
            static_cast<std::streamsize>(buf.size() * sizeof(float)));
  require(out.good(), "write failed: " + path);
}

namespace {

struct PlyProperty {
  std::string name;
  int byte_size = 4;  // float32 only in our files; others skipped by size
};

struct PlyHeader {
  bool binary = false;
  Index vertex_count = 0;
  std::vector<PlyProperty> properties;
  std::streampos data_start;
};

int ply_type_size(const std::string& t) {
  if (t == "char" || t == "uchar" || t == "int8" || t == "uint8") return 1;
  if (t == "short" || t == "ushort" || t == "int16" || t == "uint16") return 2;
  if (t == "int" || t == "uint" || t == "int32" || t == "uint32" ||
      t == "float" || t == "float32")
    return 4;
  if (t == "double" || t == "float64" || t == "int64" || t == "uint64") return 8;
  throw IoError("unsupported PLY property type: " + t);
}

PlyHeader read_ply_header(std::ifstream& in, const std::string& path) {
  PlyHeader h;
  std::string line;
  require(static_cast<bool>(std::getline(in, line)), "empty PLY: " + path);
  if (!line.empty() && line.back() == '\r') line.pop_back();
  require(line == "ply", "not a PLY file: " + path);

  bool in_vertex_element = false;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    std::istringstream ss(line);
    std::string tok;
    ss >> tok;
    if (tok == "comment") continue;
    if (tok == "format") {
      std::string fmt;
      ss >> fmt;
      if (fmt == "ascii")
        h.binary = false;
      else if (fmt == "binary_little_endian")
        h.binary = true;
      else
        throw IoError("unsupported PLY format '" + fmt + "' in " + path);
    } else if (tok == "element") {
      std::string name;
      Index count;
      ss >> name >> count;
      in_vertex_element = (name == "vertex");
      if (in_vertex_element) h.vertex_count = count;
      else require(count == 0 || !h.properties.empty() || name != "vertex",
                   "unexpected element in " + path);
    } else if (tok == "property") {
      if (!in_vertex_element) continue;  // properties of other elements
      std::string type, name;
      ss >> type >> name;
      require(type != "list", "list properties unsupported in " + path);
      h.properties.push_back({name, ply_type_size(type)});
    } else if (tok == "end_header") {
      h.data_start = in.tellg();
      return h;
    }
  }
  throw IoError("PLY header without end_header: " + path);
}

}  // namespace

PointCloud read_ply(const std::string& path) {
  auto in = open_in(path, true);
  const PlyHeader h = read_ply_header(in, path);

  int ix = -1, iy = -1, iz = -1, ii = -1;
  for (size_t p = 0; p < h.properties.size(); ++p) {
    const auto& name = h.properties[p].name;
    if (name == "x") ix = static_cast<int>(p);
    else if (name == "y") iy = static_cast<int>(p);
    else if (name == "z") iz = static_cast<int>(p);
    else if (name == "intensity") ii = static_cast<int>(p);
  }
  require(ix >= 0 && iy >= 0 && iz >= 0, "PLY lacks x/y/z: " + path);

  PointCloud cloud;
  cloud.points.resize(h.vertex_count, 3);
  if (ii >= 0) cloud.attributes.resize(h.vertex_count);

  if (h.binary) {
    int stride = 0;
    std::vector<int> offsets(h.properties.size());
    for (size_t p = 0; p < h.properties.size(); ++p) {
      offsets[p] = stride;
      stride += h.properties[p].byte_size;
    }
    std::vector<char> row(static_cast<size_t>(stride));
    auto read_f32 = [&](int prop) {
      float v;
      std::memcpy(&v, row.data() + offsets[static_cast<size_t>(prop)], 4);
      return static_cast<double>(v);
    };
    for (Index i = 0; i < h.vertex_count; ++i) {
      in.read(row.data(), stride);
      require(in.gcount() == stride, "short PLY read: " + path);
      cloud.points(i, 0) = read_f32(ix);
      cloud.points(i, 1) = read_f32(iy);
      cloud.points(i, 2) = read_f32(iz);
      if (ii >= 0) cloud.attributes[i] = read_f32(ii);
    }
  } else {
    std::vector<double> vals(h.properties.size());
    for (Index i = 0; i < h.vertex_count; ++i) {
      for (auto& v : vals) require(static_cast<bool>(in >> v), "short PLY: " + path);
      cloud.points(i, 0) = vals[static_cast<size_t>(ix)];
      cloud.points(i, 1) = vals[static_cast<size_t>(iy)];
      cloud.points(i, 2) = vals[static_cast<size_t>(iz)];
      if (ii >= 0) cloud.attributes[i] = vals[static_cast<size_t>(ii)];
    }
  }
  check_cloud(cloud, path);
  return cloud;
}

namespace {

void write_ply_impl(const std::string& path, const Points& pts,
                    const Vector* intensity, const Vector* radius, bool binary) {
  auto out = open_out(path, true);
  out << "ply\n"
      << (binary ? "format binary_little_endian 1.0\n" : "format ascii 1.0\n")
      << "element vertex " << pts.rows() << "\n"
      << "property float x\nproperty float y\nproperty float z\n";
  if (intensity) out << "property float intensity\n";
  if (radius) out << "property float radius\n";
  out << "end_header\n";

  for (Index i = 0; i < pts.rows(); ++i) {
    float row[5];
    int n = 0;
    row[n++] = static_cast<float>(pts(i, 0));
    row[n++] = static_cast<float>(pts(i, 1));
    row[n++] = static_cast<float>(pts(i, 2));
    if (intensity) row[n++] = static_cast<float>((*intensity)[i]);
    if (radius) row[n++] = static_cast<float>((*radius)[i]);
    if (binary) {
      out.write(reinterpret_cast<const char*>(row),
                static_cast<std::streamsize>(n * sizeof(float)));
    } else {
      for (int c = 0; c < n; ++c) out << (c ? " " : "") << row[c];
      out << "\n";
    }
  }
  require(out.good(), "write failed: " + path);
}

}  // namespace

void write_ply(const std::string& path, const PointCloud& cloud, bool binary) {
  write_ply_impl(path, cloud.points,
                 cloud.has_attributes() ? &cloud.attributes : nullptr, nullptr,
                 binary);
}

void write_skeleton_ply(const std::string& path, const Points& points,
                        const Vector& radii, bool binary) {
  require(points.rows() == radii.size(), "skeleton points/radii size mismatch");
  write_ply_impl(path, points, nullptr, &radii, binary);
}

std::vector<RigidTransform> read_pose_file(const std::string& path) {
  auto in = open_in(path, false);
  std::vector<RigidTransform> poses;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::istringstream ss(line);
    double v[12];
    for (double& x : v)
      require(static_cast<bool>(ss >> x), "pose line with fewer than 12 numbers: " + path);
    RigidTransform T;
    T.rotation << v[0], v[1], v[2], v[4], v[5], v[6], v[8], v[9], v[10];
    T.translation << v[3], v[7], v[11];
    poses.push_back(T);
  }
  return poses;
}

void write_pose_file(const std::string& path,
                     const std::vector<RigidTransform>& poses) {
  auto out = open_out(path, false);
  for (const auto& T : poses) {
    const Mat3& R = T.rotation;
    const Vec3& t = T.translation;
    const double v[12] = {R(0, 0), R(0, 1), R(0, 2), t(0), R(1, 0), R(1, 1),
                          R(1, 2), t(1),    R(2, 0), R(2, 1), R(2, 2), t(2)};
    for (int i = 0; i < 12; ++i) out << (i ? " " : "") << format_double(v[i]);
    out << "\n";
  }
  require(out.good(), "write failed: " + path);
}

PointCloud read_cloud(const std::string& path) {
  if (path.size() >= 4 && path.compare(path.size() - 4, 4, ".bin") == 0)
    return read_kitti_bin(path);
  return read_ply(path);
}

std::vector<PairSpec> read_manifest(const std::string& path) {
  auto in = open_in(path, false);
  std::vector<PairSpec> pairs;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty() || line[0] == '#') continue;
    std::istringstream ss(line);
    PairSpec p;
    std::string field;
    require(static_cast<bool>(std::getline(ss, p.src_path, '\t')),
            "manifest missing src: " + path);
    require(static_cast<bool>(std::getline(ss, p.tgt_path, '\t')),
            "manifest missing tgt: " + path);
    double v[12];
    for (double& x : v) {
      require(static_cast<bool>(std::getline(ss, field, '\t')),
              "manifest missing GT number: " + path);
      x = std::stod(field);
    }
    p.gt.rotation << v[0], v[1], v[2], v[4], v[5], v[6], v[8], v[9], v[10];
    p.gt.translation << v[3], v[7], v[11];
    require(static_cast<bool>(std::getline(ss, p.split, '\t')) || !p.split.empty(),
            "manifest missing split tag: " + path);
    if (std::getline(ss, field, '\t') && !field.empty()) p.overlap = std::stod(field);

    if (!p.gt.valid(1e-9)) {
      // Tolerate mild drift from textual poses, reject anything worse.
      const RigidTransform fixed = p.gt.orthonormalized();
      require((fixed.rotation - p.gt.rotation).cwiseAbs().maxCoeff() < 1e-6,
              "manifest GT is not a rotation: " + path);
      p.gt = fixed;
    }
    pairs.push_back(std::move(p));
  }
  return pairs;
}

void write_manifest(const std::string& path, const std::vector<PairSpec>& pairs) {
  auto out = open_out(path, false);
  for (const auto& p : pairs) {
    const Mat3& R = p.gt.rotation;
    const Vec3& t = p.gt.translation;
    const double v[12] = {R(0, 0), R(0, 1), R(0, 2), t(0), R(1, 0), R(1, 1),
                          R(1, 2), t(1),    R(2, 0), R(2, 1), R(2, 2), t(2)};
    out << p.src_path << '\t' << p.tgt_path;
    for (double x : v) out << '\t' << format_double(x);
    out << '\t' << p.split;
    if (p.overlap >= 0) out << '\t' << format_double(p.overlap);
    out << "\n";
  }
  require(out.good(), "write failed: " + path);
}

}  // namespace spreg
