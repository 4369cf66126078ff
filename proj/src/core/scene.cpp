#include "scene.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>

#include "common.hpp"
#include "config.hpp"

namespace mm {

namespace {

struct Vec3 {
  float x = 0, y = 0, z = 0;
};

inline Vec3 operator+(Vec3 a, Vec3 b) { return {a.x + b.x, a.y + b.y, a.z + b.z}; }
inline Vec3 operator-(Vec3 a, Vec3 b) { return {a.x - b.x, a.y - b.y, a.z - b.z}; }
inline Vec3 operator*(Vec3 a, float s) { return {a.x * s, a.y * s, a.z * s}; }
inline float dot(Vec3 a, Vec3 b) { return a.x * b.x + a.y * b.y + a.z * b.z; }
inline Vec3 normalize(Vec3 v) {
  float n = std::sqrt(dot(v, v));
  return {v.x / n, v.y / n, v.z / n};
}

// Camera frame: x right, y down, z forward. The ground plane sits below
// the camera at y = +kCameraHeight.
constexpr float kCameraHeight = 1.5f;
constexpr float kMaxRange = 40.0f;

struct Primitive {
  enum Kind { box, sphere, cylinder } kind = box;
  Vec3 center;
  Vec3 half;    // box half extents; sphere/cylinder use half.x as radius, half.y as half height
  float yaw = 0;  // rotation about the vertical (y) axis
  int cls = 0;
  Vec3 albedo;
};

struct Hit {
  float t = -1;
  Vec3 normal;
  int cls = -1;
  Vec3 albedo;
  bool ok() const { return t > 0; }
};

struct Scene {
  std::vector<Primitive> solids;
  Vec3 ground_albedo;
};

inline Vec3 rotate_y(Vec3 v, float c, float s) {
  return {c * v.x + s * v.z, v.y, -s * v.x + c * v.z};
}

bool intersect_box(const Primitive& p, Vec3 origin, Vec3 dir, float& t, Vec3& normal) {
  float c = std::cos(p.yaw), s = std::sin(p.yaw);
  Vec3 o = rotate_y(origin - p.center, c, -s);
  Vec3 d = rotate_y(dir, c, -s);
  float tmin = 0.01f, tmax = kMaxRange;
  int axis = -1;
  float sign = 0;
  const float ocoord[3] = {o.x, o.y, o.z};
  const float dcoord[3] = {d.x, d.y, d.z};
  const float hcoord[3] = {p.half.x, p.half.y, p.half.z};
  for (int a = 0; a < 3; ++a) {
    if (std::fabs(dcoord[a]) < 1e-9f) {
      if (std::fabs(ocoord[a]) > hcoord[a]) return false;
      continue;
    }
    float inv = 1.0f / dcoord[a];
    float t0 = (-hcoord[a] - ocoord[a]) * inv;
    float t1 = (hcoord[a] - ocoord[a]) * inv;
    float sgn = -1;
    if (t0 > t1) {
      std::swap(t0, t1);
      sgn = 1;
    }
    if (t0 > tmin) {
      tmin = t0;
      axis = a;
      sign = sgn;
    }
    tmax = std::min(tmax, t1);
    if (tmin > tmax) return false;
  }
  if (axis < 0) return false;  // origin inside the box
  t = tmin;
  Vec3 n{0, 0, 0};
  if (axis == 0) n.x = sign;
  if (axis == 1) n.y = sign;
  if (axis == 2) n.z = sign;
  normal = rotate_y(n, c, s);
  return true;
}

bool intersect_sphere(const Primitive& p, Vec3 origin, Vec3 dir, float& t, Vec3& normal) {
  Vec3 oc = origin - p.center;
  float r = p.half.x;
  float b = dot(oc, dir);
  float cterm = dot(oc, oc) - r * r;
  float disc = b * b - cterm;
  if (disc < 0) return false;
  float sq = std::sqrt(disc);
  float t0 = -b - sq;
  if (t0 < 0.01f) return false;
  t = t0;
  normal = normalize(origin + dir * t - p.center);
  return true;
}

bool intersect_cylinder(const Primitive& p, Vec3 origin, Vec3 dir, float& t, Vec3& normal) {
  // Vertical axis through the center; no caps (side surface only).
  float ox = origin.x - p.center.x, oz = origin.z - p.center.z;
  float a = dir.x * dir.x + dir.z * dir.z;
  if (a < 1e-12f) return false;
  float r = p.half.x;
  float b = ox * dir.x + oz * dir.z;
  float cterm = ox * ox + oz * oz - r * r;
  float disc = b * b - a * cterm;
  if (disc < 0) return false;
  float t0 = (-b - std::sqrt(disc)) / a;
  if (t0 < 0.01f) return false;
  float y = origin.y + dir.y * t0;
  if (std::fabs(y - p.center.y) > p.half.y) return false;
  t = t0;
  Vec3 hitp = origin + dir * t0;
  normal = normalize(Vec3{hitp.x - p.center.x, 0, hitp.z - p.center.z});
  return true;
}

Hit cast_ray(const Scene& scene, Vec3 origin, Vec3 dir) {
  Hit best;
  best.t = kMaxRange;
  bool found = false;
  // Ground plane y = +kCameraHeight, normal pointing up (-y).
  if (dir.y > 1e-6f) {
    float t = (kCameraHeight - origin.y) / dir.y;
    if (t > 0.01f && t < best.t) {
      best.t = t;
      best.normal = {0, -1, 0};
      best.cls = 0;
      best.albedo = scene.ground_albedo;
      found = true;
    }
  }
  for (const auto& p : scene.solids) {
    float t;
    Vec3 n;
    bool hit = false;
    switch (p.kind) {
      case Primitive::box: hit = intersect_box(p, origin, dir, t, n); break;
      case Primitive::sphere: hit = intersect_sphere(p, origin, dir, t, n); break;
      case Primitive::cylinder: hit = intersect_cylinder(p, origin, dir, t, n); break;
    }
    if (hit && t < best.t) {
      best.t = t;
      best.normal = n;
      best.cls = p.cls;
      best.albedo = p.albedo;
      found = true;
    }
  }
  if (!found) best.t = -1;
  return best;
}

int scaled_count(Rng& rng, int lo, int hi, float density) {
  int n = rng.uniform_int(lo, hi);
  return std::max(0, static_cast<int>(std::lround(n * density)));
}

Scene build_layout(const SceneSpec& spec, Rng rng) {
  Scene scene;
  float g = static_cast<float>(rng.uniform(0.28, 0.38));
  scene.ground_albedo = {g + 0.02f, g, g - 0.03f};

  float s = spec.size_scale;
  int nb = scaled_count(rng, spec.buildings_min, spec.buildings_max, spec.density);
  int nv = scaled_count(rng, spec.vehicles_min, spec.vehicles_max, spec.density);
  int ng = scaled_count(rng, spec.vegetation_min, spec.vegetation_max, spec.density);

  if (spec.occlusion) {
    // Foreground vehicle on the optical axis with a building wall behind it.
    Primitive veh;
    veh.kind = Primitive::box;
    float hw = static_cast<float>(rng.uniform(0.85, 1.1)) * s;
    float hh = static_cast<float>(rng.uniform(0.55, 0.8)) * s;
    float hd = static_cast<float>(rng.uniform(1.6, 2.2)) * s;
    veh.half = {hw, hh, hd};
    veh.center = {static_cast<float>(rng.uniform(-1.0, 1.0)), kCameraHeight - hh,
                  static_cast<float>(rng.uniform(4.5, 6.5))};
    veh.yaw = static_cast<float>(rng.uniform(-0.4, 0.4));
    veh.cls = 2;
    veh.albedo = {0.72f, 0.14f, 0.12f};
    scene.solids.push_back(veh);

    Primitive wall;
    wall.kind = Primitive::box;
    float wh = static_cast<float>(rng.uniform(2.8, 4.5)) * s;
    wall.half = {static_cast<float>(rng.uniform(3.5, 6.0)) * s, wh,
                 static_cast<float>(rng.uniform(0.8, 1.6)) * s};
    wall.center = {veh.center.x + static_cast<float>(rng.uniform(-1.0, 1.0)),
                   kCameraHeight - wh, static_cast<float>(rng.uniform(10.0, 14.0))};
    wall.yaw = 0;
    wall.cls = 1;
    float shade = static_cast<float>(rng.uniform(0.5, 0.75));
    wall.albedo = {shade, shade * 0.95f, shade * 0.88f};
    scene.solids.push_back(wall);
    nv = std::max(0, nv - 1);
    nb = std::max(0, nb - 1);
  }

  for (int i = 0; i < nb; ++i) {
    Primitive b;
    b.kind = Primitive::box;
    b.half = {static_cast<float>(rng.uniform(1.5, 3.5)) * s,
              static_cast<float>(rng.uniform(2.0, 4.5)) * s,
              static_cast<float>(rng.uniform(1.0, 2.5)) * s};
    b.center = {static_cast<float>(rng.uniform(-10.0, 10.0)), kCameraHeight - b.half.y,
                static_cast<float>(rng.uniform(8.0, 22.0))};
    b.yaw = static_cast<float>(rng.uniform(-0.3, 0.3));
    b.cls = 1;
    float shade = static_cast<float>(rng.uniform(0.45, 0.78));
    b.albedo = {shade, shade * static_cast<float>(rng.uniform(0.9, 1.0)),
                shade * static_cast<float>(rng.uniform(0.82, 0.95))};
    scene.solids.push_back(b);
  }
  for (int i = 0; i < nv; ++i) {
    Primitive v;
    v.kind = Primitive::box;
    float hh = static_cast<float>(rng.uniform(0.5, 0.8)) * s;
    v.half = {static_cast<float>(rng.uniform(0.8, 1.1)) * s, hh,
              static_cast<float>(rng.uniform(1.5, 2.3)) * s};
    v.center = {static_cast<float>(rng.uniform(-4.5, 4.5)), kCameraHeight - hh,
                static_cast<float>(rng.uniform(3.5, 15.0))};
    v.yaw = static_cast<float>(rng.uniform(-0.5, 0.5));
    v.cls = 2;
    switch (rng.uniform_int(0, 3)) {
      case 0: v.albedo = {0.70f, 0.13f, 0.10f}; break;
      case 1: v.albedo = {0.12f, 0.22f, 0.68f}; break;
      case 2: v.albedo = {0.80f, 0.80f, 0.82f}; break;
      default: v.albedo = {0.17f, 0.17f, 0.18f}; break;
    }
    scene.solids.push_back(v);
  }
  for (int i = 0; i < ng; ++i) {
    Primitive t;
    t.kind = Primitive::sphere;
    float r = static_cast<float>(rng.uniform(0.7, 1.5)) * s;
    t.half = {r, r, r};
    t.center = {static_cast<float>(rng.uniform(-8.0, 8.0)),
                kCameraHeight - r - static_cast<float>(rng.uniform(0.3, 1.2)),
                static_cast<float>(rng.uniform(4.0, 18.0))};
    t.cls = 3;
    t.albedo = {static_cast<float>(rng.uniform(0.08, 0.18)),
                static_cast<float>(rng.uniform(0.40, 0.60)),
                static_cast<float>(rng.uniform(0.10, 0.20))};
    scene.solids.push_back(t);
  }
  return scene;
}

const Vec3 kLightDir = normalize({0.35f, -0.80f, -0.48f});  // from surface toward the light

Vec3 shade(const Hit& hit, const SceneSpec& spec) {
  float lambert = std::max(0.0f, dot(hit.normal, kLightDir));
  float lit = 0.25f + 0.75f * lambert;
  Vec3 c = hit.albedo * (lit * spec.brightness);
  c.x *= 1.0f + 0.25f * spec.color_temp;
  c.z *= 1.0f - 0.25f * spec.color_temp;
  return c;
}

Tensor render_image(const Scene& scene, const SceneSpec& spec, const Intrinsics& K, Rng rng) {
  Tensor img = Tensor::zeros({3, K.height, K.width});
  float* data = img.data();
  std::size_t plane = static_cast<std::size_t>(K.height) * K.width;
  Vec3 sky{0.55f, 0.70f, 0.90f};
  sky = sky * spec.brightness;
  sky.x *= 1.0f + 0.25f * spec.color_temp;
  sky.z *= 1.0f - 0.25f * spec.color_temp;
  for (int v = 0; v < K.height; ++v)
    for (int u = 0; u < K.width; ++u) {
      Vec3 dir = normalize({(u - K.cx) / K.fx, (v - K.cy) / K.fy, 1.0f});
      Hit hit = cast_ray(scene, {0, 0, 0}, dir);
      Vec3 c = hit.ok() ? shade(hit, spec) : sky;
      std::size_t pix = static_cast<std::size_t>(v) * K.width + u;
      data[0 * plane + pix] = c.x;
      data[1 * plane + pix] = c.y;
      data[2 * plane + pix] = c.z;
    }
  if (spec.pixel_noise > 0) {
    for (std::size_t i = 0; i < img.numel(); ++i)
      data[i] += static_cast<float>(rng.normal(0.0, spec.pixel_noise));
  }
  for (std::size_t i = 0; i < img.numel(); ++i) data[i] = std::clamp(data[i], 0.0f, 1.0f);
  return img;
}

// Each lidar ray is re-cast through the center of the pixel it lands in,
// so a returned point projects exactly onto its pixel and carries the
// class rendered there. Range noise moves points along the ray and can
// never push them off their pixel.
PointCloud simulate_lidar(const Scene& scene, const SceneSpec& spec, const Intrinsics& K,
                          Rng rng) {
  PointCloud cloud;
  float half_fov = std::atan(0.5f * K.width / K.fx);
  float az_span = 0.92f * half_fov;
  float elev_lo = -20.0f * 3.14159265f / 180.0f;
  float elev_hi = 7.0f * 3.14159265f / 180.0f;
  for (int line = 0; line < spec.lidar_lines; ++line) {
    float theta = spec.lidar_lines > 1
                      ? elev_lo + (elev_hi - elev_lo) * line / (spec.lidar_lines - 1)
                      : elev_lo;
    for (int a = 0; a < spec.lidar_azimuth_steps; ++a) {
      float phi = -az_span + 2 * az_span * a / (spec.lidar_azimuth_steps - 1);
      Vec3 dir{std::cos(theta) * std::sin(phi), -std::sin(theta), std::cos(theta) * std::cos(phi)};
      if (dir.z <= 0.05f) continue;
      int pu = round_half_up(K.fx * dir.x / dir.z + K.cx);
      int pv = round_half_up(K.fy * dir.y / dir.z + K.cy);
      if (pu < 0 || pu >= K.width || pv < 0 || pv >= K.height) continue;
      Vec3 pixel_dir = normalize({(pu - K.cx) / K.fx, (pv - K.cy) / K.fy, 1.0f});
      Hit hit = cast_ray(scene, {0, 0, 0}, pixel_dir);
      if (!hit.ok()) continue;
      float t = hit.t + static_cast<float>(rng.normal(0.0, spec.noise_sigma));
      if (t < 0.2f) continue;
      Vec3 p = pixel_dir * t;
      if (p.z <= 0.2f) continue;
      cloud.positions.insert(cloud.positions.end(), {p.x, p.y, p.z});
      cloud.labels.push_back(hit.cls);
    }
  }
  return cloud;
}

// --- binary I/O helpers -----------------------------------------------------

struct Reader {
  std::ifstream in;
  std::size_t offset = 0;
  std::string path;

  void read(void* dst, std::size_t n) {
    in.read(static_cast<char*>(dst), static_cast<std::streamsize>(n));
    if (static_cast<std::size_t>(in.gcount()) != n)
      throw DataError(path + ": truncated at offset " + std::to_string(offset));
    offset += n;
  }
  std::uint32_t u32() {
    std::uint32_t v;
    read(&v, 4);
    return v;
  }
  std::uint8_t u8() {
    std::uint8_t v;
    read(&v, 1);
    return v;
  }
  void f32v(float* dst, std::size_t n) { read(dst, n * 4); }
  void i32v(std::int32_t* dst, std::size_t n) { read(dst, n * 4); }
};

struct Writer {
  std::ofstream out;
  std::string path;

  void write(const void* src, std::size_t n) {
    out.write(static_cast<const char*>(src), static_cast<std::streamsize>(n));
    if (!out) throw DataError(path + ": write failed");
  }
  void u32(std::uint32_t v) { write(&v, 4); }
  void u8(std::uint8_t v) { write(&v, 1); }
  void f32v(const float* src, std::size_t n) { write(src, n * 4); }
  void i32v(const std::int32_t* src, std::size_t n) { write(src, n * 4); }
};

constexpr char kMagic[4] = {'M', 'M', '2', '3'};
constexpr std::uint32_t kVersion = 1;

}  // namespace

void SceneSpec::validate() const {
  auto fail = [](const std::string& msg) { throw DataError("scene spec: " + msg); };
  if (width < 16 || height < 16) fail("image size must be at least 16x16");
  if (brightness <= 0.0f || brightness > 1.0f) fail("brightness must be in (0,1]");
  if (color_temp < -1.0f || color_temp > 1.0f) fail("color_temp must be in [-1,1]");
  if (pixel_noise < 0.0f || pixel_noise > 0.5f) fail("pixel_noise must be in [0,0.5]");
  if (buildings_min < 0 || buildings_min > buildings_max) fail("bad building count range");
  if (vehicles_min < 0 || vehicles_min > vehicles_max) fail("bad vehicle count range");
  if (vegetation_min < 0 || vegetation_min > vegetation_max) fail("bad vegetation count range");
  if (size_scale <= 0.0f || size_scale > 3.0f) fail("size_scale must be in (0,3]");
  if (density <= 0.0f || density > 4.0f) fail("density must be in (0,4]");
  if (lidar_lines < 1 || lidar_lines > 256) fail("lidar_lines must be in [1,256]");
  if (lidar_azimuth_steps < 2 || lidar_azimuth_steps > 2048) fail("bad lidar_azimuth_steps");
  if (noise_sigma < 0.0f || noise_sigma > 1.0f) fail("noise_sigma must be in [0,1]");
}

Sample generate_sample(const SceneSpec& spec, std::uint64_t index) {
  Rng base = Rng(spec.seed).fork(index, 0x5ce7e5);
  Sample s;
  s.intrinsics.width = spec.width;
  s.intrinsics.height = spec.height;
  s.intrinsics.fx = s.intrinsics.fy = 0.875f * spec.width;
  s.intrinsics.cx = 0.5f * spec.width - 0.5f;
  s.intrinsics.cy = 0.5f * spec.height - 0.5f;
  s.domain = spec.domain;

  Scene scene = build_layout(spec, base.fork(1));
  s.image = render_image(scene, spec, s.intrinsics, base.fork(2));
  s.cloud = simulate_lidar(scene, spec, s.intrinsics, base.fork(3));

  SampledColors sc = sample_colors(s.image, s.cloud, s.intrinsics);
  s.cloud.colors = std::move(sc.colors);
  return s;
}

std::vector<std::int32_t> render_class_map(const SceneSpec& spec, std::uint64_t index) {
  Rng base = Rng(spec.seed).fork(index, 0x5ce7e5);
  Intrinsics K;
  K.width = spec.width;
  K.height = spec.height;
  K.fx = K.fy = 0.875f * spec.width;
  K.cx = 0.5f * spec.width - 0.5f;
  K.cy = 0.5f * spec.height - 0.5f;
  Scene scene = build_layout(spec, base.fork(1));
  std::vector<std::int32_t> out(static_cast<std::size_t>(K.width) * K.height, -1);
  for (int v = 0; v < K.height; ++v)
    for (int u = 0; u < K.width; ++u) {
      Vec3 dir = normalize({(u - K.cx) / K.fx, (v - K.cy) / K.fy, 1.0f});
      Hit hit = cast_ray(scene, {0, 0, 0}, dir);
      if (hit.ok()) out[static_cast<std::size_t>(v) * K.width + u] = hit.cls;
    }
  return out;
}

Dataset generate(const SceneSpec& spec, int n, int threads) {
  spec.validate();
  if (n < 1) throw UsageError("generate: sample count must be >= 1");
  Dataset ds;
  ds.samples.resize(static_cast<std::size_t>(n));
  parallel_for(static_cast<std::size_t>(n), threads, [&](std::size_t i) {
    ds.samples[i] = generate_sample(spec, i);
  });
  return ds;
}

void save_dataset(const Dataset& ds, const std::string& path) {
  Writer w;
  w.path = path;
  w.out.open(path, std::ios::binary);
  if (!w.out) throw DataError("cannot open for writing: " + path);
  w.write(kMagic, 4);
  w.u32(kVersion);
  w.u32(static_cast<std::uint32_t>(ds.samples.size()));
  for (const auto& s : ds.samples) {
    std::uint32_t h = static_cast<std::uint32_t>(s.intrinsics.height);
    std::uint32_t wid = static_cast<std::uint32_t>(s.intrinsics.width);
    w.u32(h);
    w.u32(wid);
    w.f32v(s.image.data(), s.image.numel());
    std::uint32_t n = static_cast<std::uint32_t>(s.cloud.size());
    w.u32(n);
    w.f32v(s.cloud.positions.data(), n * 3);
    w.f32v(s.cloud.colors.data(), n * 3);
    w.i32v(s.cloud.labels.data(), n);
    float k[6] = {s.intrinsics.fx, s.intrinsics.fy, s.intrinsics.cx, s.intrinsics.cy,
                  static_cast<float>(s.intrinsics.width), static_cast<float>(s.intrinsics.height)};
    w.f32v(k, 6);
    w.u8(static_cast<std::uint8_t>(s.domain));
  }
}

Dataset load_dataset(const std::string& path) {
  Reader r;
  r.path = path;
  r.in.open(path, std::ios::binary);
  if (!r.in) throw DataError("cannot open dataset: " + path);
  char magic[4];
  r.read(magic, 4);
  if (std::memcmp(magic, kMagic, 4) != 0)
    throw DataError(path + ": bad magic at offset 0 (not a dataset file)");
  std::uint32_t version = r.u32();
  if (version != kVersion)
    throw DataError(path + ": unsupported version " + std::to_string(version));
  std::uint32_t count = r.u32();
  Dataset ds;
  ds.samples.resize(count);
  for (std::uint32_t i = 0; i < count; ++i) {
    Sample& s = ds.samples[i];
    std::uint32_t h = r.u32();
    std::uint32_t w = r.u32();
    if (h == 0 || w == 0 || h > 8192 || w > 8192)
      throw DataError(path + ": implausible image size at offset " + std::to_string(r.offset));
    s.image = Tensor::zeros({3, static_cast<int>(h), static_cast<int>(w)});
    r.f32v(s.image.data(), s.image.numel());
    std::uint32_t n = r.u32();
    if (n == 0 || n > (1u << 24))
      throw DataError(path + ": implausible point count at offset " + std::to_string(r.offset));
    s.cloud.positions.resize(n * 3);
    r.f32v(s.cloud.positions.data(), n * 3);
    s.cloud.colors.resize(n * 3);
    r.f32v(s.cloud.colors.data(), n * 3);
    s.cloud.labels.resize(n);
    r.i32v(s.cloud.labels.data(), n);
    float k[6];
    r.f32v(k, 6);
    s.intrinsics = {k[0], k[1], k[2], k[3], static_cast<int>(k[4]), static_cast<int>(k[5])};
    if (s.intrinsics.width != static_cast<int>(w) || s.intrinsics.height != static_cast<int>(h))
      throw DataError(path + ": intrinsics disagree with image size at offset " +
                      std::to_string(r.offset));
    std::uint8_t dom = r.u8();
    if (dom > 1) throw DataError(path + ": bad domain tag at offset " + std::to_string(r.offset));
    s.domain = static_cast<Domain>(dom);
  }
  return ds;
}

SceneSpec load_scene_spec(const std::string& path) {
  Config cfg = Config::parse_file(path);
  SceneSpec s;
  s.seed = static_cast<std::uint64_t>(cfg.get_int("scene", "seed", 1));
  s.width = static_cast<int>(cfg.get_int("scene", "width", s.width));
  s.height = static_cast<int>(cfg.get_int("scene", "height", s.height));
  s.buildings_min = static_cast<int>(cfg.get_int("scene", "buildings_min", s.buildings_min));
  s.buildings_max = static_cast<int>(cfg.get_int("scene", "buildings_max", s.buildings_max));
  s.vehicles_min = static_cast<int>(cfg.get_int("scene", "vehicles_min", s.vehicles_min));
  s.vehicles_max = static_cast<int>(cfg.get_int("scene", "vehicles_max", s.vehicles_max));
  s.vegetation_min = static_cast<int>(cfg.get_int("scene", "vegetation_min", s.vegetation_min));
  s.vegetation_max = static_cast<int>(cfg.get_int("scene", "vegetation_max", s.vegetation_max));
  s.size_scale = static_cast<float>(cfg.get_double("scene", "size_scale", s.size_scale));
  s.density = static_cast<float>(cfg.get_double("scene", "density", s.density));
  s.brightness = static_cast<float>(cfg.get_double("scene", "brightness", s.brightness));
  s.color_temp = static_cast<float>(cfg.get_double("scene", "color_temp", s.color_temp));
  s.pixel_noise = static_cast<float>(cfg.get_double("scene", "pixel_noise", s.pixel_noise));
  s.lidar_lines = static_cast<int>(cfg.get_int("scene", "lidar_lines", s.lidar_lines));
  s.lidar_azimuth_steps =
      static_cast<int>(cfg.get_int("scene", "lidar_azimuth_steps", s.lidar_azimuth_steps));
  s.noise_sigma = static_cast<float>(cfg.get_double("scene", "noise_sigma", s.noise_sigma));
  s.occlusion = cfg.get_bool("scene", "occlusion", s.occlusion);
  std::string dom = cfg.get("scene", "domain", "source");
  if (dom == "source") s.domain = Domain::source;
  else if (dom == "target") s.domain = Domain::target;
  else throw DataError("scene spec: domain must be source or target");
  s.validate();
  return s;
}

}  // namespace mm
