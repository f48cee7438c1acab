#include "tstcnn/synth.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <random>
#include <sstream>

#include "tstcnn/rng.hpp"
#include "tstcnn/serialize.hpp"

namespace tstcnn::synth {

namespace {

constexpr double kPi = std::numbers::pi;
constexpr std::array<float, 3> kActorColor{0.95f, 0.85f, 0.20f};

/// Shared low-frequency background texture.
std::array<double, 3> background(double x, double y, double m) {
  const double u = 2.0 * kPi * x / m, v = 2.0 * kPi * y / m;
  return {0.45 + 0.10 * std::sin(u + 0.3) + 0.06 * std::cos(v - 0.7),
          0.40 + 0.08 * std::sin(0.5 * u + v + 1.1) + 0.05 * std::cos(u - 0.5 * v),
          0.50 + 0.09 * std::cos(v + 0.2) + 0.05 * std::sin(u + v - 0.4)};
}

double alpha(double r, const std::array<double, 2>& radii) {
  if (r <= radii[0]) return 1.0;
  if (r >= radii[1]) return 0.0;
  return 0.5 * (1.0 + std::cos(kPi * (r - radii[0]) / (radii[1] - radii[0])));
}

std::size_t at4(std::size_t c, std::size_t t, std::size_t y, std::size_t x, std::size_t T,
                std::size_t H, std::size_t W) {
  return ((c * T + t) * H + y) * W + x;
}

}  // namespace

void Geometry::validate() const {
  if (frames < 2) throw ConfigError("clip needs >= 2 frames, got " + std::to_string(frames));
  if (height < 8 || width < 8)
    throw ConfigError("clip frames must be >= 8x8, got " + std::to_string(height) + "x" +
                      std::to_string(width));
}

std::array<double, 2> MotionProgram::position(double t) const {
  switch (kind) {
    case Kind::still: return origin;
    case Kind::translate: return {origin[0] + t * velocity[0], origin[1] + t * velocity[1]};
    case Kind::stroke: break;
  }
  const double tau = std::clamp((t - onset) / duration, 0.0, 1.0);
  const double phase = static_cast<double>(legs) * tau;
  const double f = std::fmod(phase, 2.0);
  const double s = f <= 1.0 ? f : 2.0 - f;
  double side = 0.0;
  switch (shape) {
    case PathShape::line: break;
    case PathShape::arc_pos: side = bend * std::sin(kPi * s); break;
    case PathShape::arc_neg: side = -bend * std::sin(kPi * s); break;
    case PathShape::wave: side = bend * std::sin(2.0 * kPi * s); break;
  }
  const double along = (s - 0.5) * length;
  const double ux = std::cos(angle), uy = std::sin(angle);
  return {origin[0] + along * ux - side * uy, origin[1] + along * uy + side * ux};
}

std::array<double, 2> actor_radii(const Geometry& g) {
  const double m = static_cast<double>(std::min(g.height, g.width));
  return {0.06 * m, 0.12 * m};
}

MotionProgram class_program(int label, std::size_t n_classes, const Geometry& g, std::size_t margin,
                            std::uint64_t seed) {
  g.validate();
  if (n_classes < 2 || n_classes > 21) throw ConfigError("n_classes must be in [2, 21]");
  if (label < 0 || static_cast<std::size_t>(label) >= n_classes)
    throw ConfigError("label " + std::to_string(label) + " outside [0, " + std::to_string(n_classes) + ")");

  const double m = static_cast<double>(std::min(g.height, g.width));
  MotionProgram p;
  p.kind = MotionProgram::Kind::stroke;
  p.length = 0.3 * m;
  if (label == 0) {
    p.legs = 6;
  } else {
    p.legs = 1 + static_cast<std::size_t>(label - 1) % 5;
    p.shape = static_cast<PathShape>((label - 1) / 5);
  }
  p.bend = p.shape == PathShape::line ? 0.0 : 0.25 * p.length;
  p.onset = static_cast<double>(margin);
  p.duration = static_cast<double>(g.frames - 1);

  std::mt19937_64 rng(derive_seed(seed, {0xC1A55ull, static_cast<std::uint64_t>(label)}));
  std::uniform_real_distribution<double> angle(0.0, 2.0 * kPi);
  p.angle = angle(rng);
  const double reach = 0.5 * p.length + 0.25 * p.length + actor_radii(g)[1] + 1.0;
  auto coord = [&](std::size_t extent) {
    const double lo = reach, hi = static_cast<double>(extent) - 1.0 - reach;
    if (hi <= lo) return 0.5 * (static_cast<double>(extent) - 1.0);
    return std::uniform_real_distribution<double>(lo, hi)(rng);
  };
  p.origin[0] = coord(g.width);
  p.origin[1] = coord(g.height);
  return p;
}

Clip generate_clip(const SceneSpec& spec, std::uint64_t seed) {
  spec.geometry.validate();
  const MotionProgram program =
      spec.program ? *spec.program
                   : class_program(spec.label, spec.n_classes, spec.geometry, spec.margin, seed);
  const std::size_t T = spec.geometry.frames + 2 * spec.margin;
  const std::size_t H = spec.geometry.height, W = spec.geometry.width;
  const double m = static_cast<double>(std::min(H, W));
  const auto radii = actor_radii(spec.geometry);

  Clip clip;
  clip.label = spec.label;
  clip.seed = seed;
  clip.rgb = Tensor<float>(Shape{3, T, H, W});
  clip.flow = Tensor<float>(Shape{2, T, H, W});
  auto rgb = clip.rgb.mutable_data();
  auto flow = clip.flow.mutable_data();

  for (std::size_t t = 0; t < T; ++t) {
    const auto p0 = program.position(static_cast<double>(t));
    const auto p1 = program.position(static_cast<double>(t + 1));
    const double dx = p1[0] - p0[0], dy = p1[1] - p0[1];
    for (std::size_t y = 0; y < H; ++y) {
      for (std::size_t x = 0; x < W; ++x) {
        const double fx = static_cast<double>(x), fy = static_cast<double>(y);
        const double a0 = alpha(std::hypot(fx - p0[0], fy - p0[1]), radii);
        const double a1 = alpha(std::hypot(fx - p1[0], fy - p1[1]), radii);
        const auto bg = background(fx, fy, m);
        for (std::size_t c = 0; c < 3; ++c)
          rgb[at4(c, t, y, x, T, H, W)] = static_cast<float>(bg[c] * (1.0 - a0) + kActorColor[c] * a0);
        if (a0 > 0.0 || a1 > 0.0) {
          flow[at4(0, t, y, x, T, H, W)] = static_cast<float>(dx);
          flow[at4(1, t, y, x, T, H, W)] = static_cast<float>(dy);
        }
      }
    }
  }
  return clip;
}

// ---------------------------------------------------------------- spatial

void SpatialAugmentParams::validate() const {
  if (!(max_rotation_deg >= 0.0 && max_rotation_deg <= 45.0))
    throw ConfigError("max rotation must be in [0, 45] degrees");
  if (!(min_scale > 0.0 && min_scale <= 1.0 && max_scale >= 1.0 && max_scale <= 2.0))
    throw ConfigError("scale range must satisfy 0 < min <= 1 <= max <= 2");
  if (!(max_translation >= 0.0 && max_translation <= 0.5))
    throw ConfigError("max translation must be in [0, 0.5] of the extent");
}

Clip apply_spatial(const Clip& clip, const SpatialTransform& tf) {
  if (!(tf.scale > 0.0) || !std::isfinite(tf.scale) || !std::isfinite(tf.rotation_deg) ||
      !std::isfinite(tf.tx) || !std::isfinite(tf.ty))
    throw ConfigError("spatial transform needs a finite positive scale and finite angle/offsets");
  Clip out{clip.rgb.clone(), clip.flow.clone(), clip.label, clip.seed};
  if (tf.is_identity()) return out;

  const std::size_t T = clip.rgb.dim(1), H = clip.rgb.dim(2), W = clip.rgb.dim(3);
  const double th = tf.rotation_deg * kPi / 180.0;
  const double c = std::cos(th), s = std::sin(th);
  const double cx = 0.5 * (static_cast<double>(W) - 1.0), cy = 0.5 * (static_cast<double>(H) - 1.0);

  auto src_rgb = clip.rgb.data();
  auto src_flow = clip.flow.data();
  auto dst_rgb = out.rgb.mutable_data();
  auto dst_flow = out.flow.mutable_data();

  for (std::size_t y = 0; y < H; ++y) {
    for (std::size_t x = 0; x < W; ++x) {
      // inverse map: x = c + R^T (x' - c - t) / s
      const double qx = static_cast<double>(x) - cx - tf.tx, qy = static_cast<double>(y) - cy - tf.ty;
      double sx = cx + (c * qx + s * qy) / tf.scale;
      double sy = cy + (-s * qx + c * qy) / tf.scale;
      sx = std::clamp(sx, 0.0, static_cast<double>(W) - 1.0);
      sy = std::clamp(sy, 0.0, static_cast<double>(H) - 1.0);
      const std::size_t x0 = static_cast<std::size_t>(std::floor(sx));
      const std::size_t y0 = static_cast<std::size_t>(std::floor(sy));
      const std::size_t x1 = std::min(x0 + 1, W - 1), y1 = std::min(y0 + 1, H - 1);
      const double wx = sx - static_cast<double>(x0), wy = sy - static_cast<double>(y0);
      const double w00 = (1 - wx) * (1 - wy), w01 = wx * (1 - wy), w10 = (1 - wx) * wy, w11 = wx * wy;
      auto sample = [&](std::span<const float> src, std::size_t ch, std::size_t t) {
        return w00 * src[at4(ch, t, y0, x0, T, H, W)] + w01 * src[at4(ch, t, y0, x1, T, H, W)] +
               w10 * src[at4(ch, t, y1, x0, T, H, W)] + w11 * src[at4(ch, t, y1, x1, T, H, W)];
      };
      for (std::size_t t = 0; t < T; ++t) {
        for (std::size_t ch = 0; ch < 3; ++ch)
          dst_rgb[at4(ch, t, y, x, T, H, W)] = static_cast<float>(sample(src_rgb, ch, t));
        const double vx = sample(src_flow, 0, t), vy = sample(src_flow, 1, t);
        dst_flow[at4(0, t, y, x, T, H, W)] = static_cast<float>(tf.scale * (c * vx - s * vy));
        dst_flow[at4(1, t, y, x, T, H, W)] = static_cast<float>(tf.scale * (s * vx + c * vy));
      }
    }
  }
  return out;
}

SpatialTransform sample_spatial(const SpatialAugmentParams& p, const Geometry& g, std::uint64_t seed) {
  p.validate();
  std::mt19937_64 rng(derive_seed(seed, {0x5BA7ull}));
  auto uniform = [&](double lo, double hi) {
    return lo == hi ? lo : std::uniform_real_distribution<double>(lo, hi)(rng);
  };
  SpatialTransform t;
  t.rotation_deg = uniform(-p.max_rotation_deg, p.max_rotation_deg);
  t.scale = uniform(p.min_scale, p.max_scale);
  t.tx = uniform(-p.max_translation, p.max_translation) * static_cast<double>(g.width);
  t.ty = uniform(-p.max_translation, p.max_translation) * static_cast<double>(g.height);
  return t;
}

Clip augment_spatial(const Clip& clip, const SpatialAugmentParams& p, std::uint64_t seed) {
  Geometry g{clip.rgb.dim(1), clip.rgb.dim(2), clip.rgb.dim(3)};
  return apply_spatial(clip, sample_spatial(p, g, seed));
}

// ---------------------------------------------------------------- temporal

Clip extract_window(const Clip& source, std::size_t start, std::size_t frames) {
  const std::size_t S = source.rgb.dim(1), H = source.rgb.dim(2), W = source.rgb.dim(3);
  if (frames == 0 || start + frames > S)
    throw DimensionError("window [" + std::to_string(start) + ", " + std::to_string(start + frames) +
                         ") outside a " + std::to_string(S) + "-frame clip");
  Clip out;
  out.label = source.label;
  out.seed = source.seed;
  out.rgb = Tensor<float>(Shape{3, frames, H, W});
  out.flow = Tensor<float>(Shape{2, frames, H, W});
  const std::size_t plane = H * W;
  auto copy = [&](const Tensor<float>& src, Tensor<float>& dst, std::size_t channels) {
    auto s = src.data();
    auto d = dst.mutable_data();
    for (std::size_t c = 0; c < channels; ++c)
      std::copy_n(s.begin() + static_cast<std::ptrdiff_t>((c * S + start) * plane), frames * plane,
                  d.begin() + static_cast<std::ptrdiff_t>(c * frames * plane));
  };
  copy(source.rgb, out.rgb, 3);
  copy(source.flow, out.flow, 2);
  return out;
}

std::ptrdiff_t sample_temporal_offset(std::size_t source_frames, std::size_t frames, std::size_t jitter,
                                      std::uint64_t seed) {
  if (source_frames < frames)
    throw ConfigError("source clip has " + std::to_string(source_frames) + " frames, window needs " +
                      std::to_string(frames));
  const auto base = static_cast<std::ptrdiff_t>((source_frames - frames) / 2);
  const auto last = static_cast<std::ptrdiff_t>(source_frames - frames);
  if (jitter == 0) return 0;
  std::mt19937_64 rng(derive_seed(seed, {0x7E39ull}));
  std::uniform_int_distribution<std::ptrdiff_t> dist(-static_cast<std::ptrdiff_t>(jitter),
                                                     static_cast<std::ptrdiff_t>(jitter));
  std::ptrdiff_t o = 0;
  for (int attempt = 0; attempt < 8; ++attempt) {
    o = dist(rng);
    if (base + o >= 0 && base + o <= last) return o;
  }
  return std::clamp(base + o, std::ptrdiff_t{0}, last) - base;
}

Clip augment_temporal(const Clip& source, std::size_t frames, std::size_t jitter, std::uint64_t seed) {
  const std::size_t S = source.rgb.dim(1);
  const auto o = sample_temporal_offset(S, frames, jitter, seed);
  const auto start = static_cast<std::ptrdiff_t>((S - frames) / 2) + o;
  return extract_window(source, static_cast<std::size_t>(start), frames);
}

// ---------------------------------------------------------------- dataset

std::string to_string(Split s) {
  switch (s) {
    case Split::train: return "train";
    case Split::val: return "val";
    case Split::test: return "test";
  }
  return "?";
}

Split parse_split(const std::string& s) {
  if (s == "train") return Split::train;
  if (s == "val") return Split::val;
  if (s == "test") return Split::test;
  throw ConfigError("unknown split '" + s + "' (expected train, val or test)");
}

std::vector<ClipRecord> DatasetIndex::of(Split s) const {
  std::vector<ClipRecord> out;
  for (const auto& r : records)
    if (r.split == s) out.push_back(r);
  return out;
}

DatasetIndex build_dataset(std::size_t n_classes, std::size_t per_class, std::array<double, 3> ratios,
                           std::uint64_t seed) {
  if (n_classes == 0 || per_class == 0) throw ConfigError("dataset needs >= 1 class and >= 1 clip per class");
  for (double r : ratios)
    if (!(r >= 0.0)) throw ConfigError("split ratios must be non-negative");
  if (std::abs(ratios[0] + ratios[1] + ratios[2] - 1.0) > 1e-6) throw ConfigError("split ratios must sum to 1");

  const double pc = static_cast<double>(per_class);
  const auto n_val = static_cast<std::size_t>(std::floor(pc * ratios[1] + 1e-9));
  const auto n_test = static_cast<std::size_t>(std::floor(pc * ratios[2] + 1e-9));
  if (n_val + n_test > per_class) throw ConfigError("split ratios exceed the clips per class");
  const std::size_t n_train = per_class - n_val - n_test;
  const std::array<std::size_t, 3> counts{n_train, n_val, n_test};
  for (int s = 0; s < 3; ++s)
    if (ratios[s] > 0.0 && counts[s] == 0)
      throw ConfigError(std::to_string(per_class) + " clips per class leave the " +
                        to_string(static_cast<Split>(s)) + " split empty");

  DatasetIndex idx;
  for (std::size_t c = 0; c < n_classes; ++c) {
    std::vector<std::size_t> order(per_class);
    for (std::size_t i = 0; i < per_class; ++i) order[i] = i;
    std::mt19937_64 rng(derive_seed(seed, {0x5B117ull, c}));
    std::shuffle(order.begin(), order.end(), rng);
    std::vector<Split> split_of(per_class, Split::train);
    for (std::size_t k = 0; k < n_val; ++k) split_of[order[k]] = Split::val;
    for (std::size_t k = n_val; k < n_val + n_test; ++k) split_of[order[k]] = Split::test;
    for (std::size_t i = 0; i < per_class; ++i)
      idx.records.push_back({c * per_class + i, static_cast<int>(c), derive_seed(seed, {c, i}), split_of[i]});
  }
  return idx;
}

void DatasetSpec::validate() const {
  geometry.validate();
  if (n_classes < 2 || n_classes > 21) throw ConfigError("n_classes must be in [2, 21]");
  if (margin > geometry.frames) throw ConfigError("temporal margin must be <= frames");
  (void)build_dataset(n_classes, per_class, ratios, seed);
}

Clip generate_record(const DatasetSpec& spec, const ClipRecord& r) {
  SceneSpec scene;
  scene.label = r.label;
  scene.n_classes = spec.n_classes;
  scene.geometry = spec.geometry;
  scene.margin = spec.margin;
  return generate_clip(scene, r.seed);
}

void write_clip(const std::string& path, const Clip& clip) {
  std::ostringstream os(std::ios::binary);
  write_tensor(os, clip.rgb);
  write_tensor(os, clip.flow);
  write_u32(os, static_cast<std::uint32_t>(clip.label));
  write_u64(os, clip.seed);
  write_file_atomic(path, os.str());
}

Clip read_clip(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw FormatError("cannot open clip file '" + path + "'");
  Clip c;
  c.rgb = read_tensor<float>(f);
  c.flow = read_tensor<float>(f);
  c.label = static_cast<int>(read_u32(f));
  c.seed = read_u64(f);
  return c;
}

namespace {

std::string clip_filename(std::size_t id) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "clip_%06zu.bin", id);
  return buf;
}

// shortest text that parses back to the same double
std::string fmt_double(double v) {
  char buf[40];
  const auto r = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, r.ptr);
}

}  // namespace

void write_dataset(const std::string& dir, const DatasetSpec& spec) {
  spec.validate();
  std::filesystem::create_directories(dir);
  const auto idx = build_dataset(spec.n_classes, spec.per_class, spec.ratios, spec.seed);
  std::ostringstream m;
  m << "# n_classes=" << spec.n_classes << "\n"
    << "# per_class=" << spec.per_class << "\n"
    << "# ratios=" << fmt_double(spec.ratios[0]) << "," << fmt_double(spec.ratios[1]) << ","
    << fmt_double(spec.ratios[2]) << "\n"
    << "# frames=" << spec.geometry.frames << "\n"
    << "# height=" << spec.geometry.height << "\n"
    << "# width=" << spec.geometry.width << "\n"
    << "# margin=" << spec.margin << "\n"
    << "# seed=" << spec.seed << "\n"
    << "clip_id,class,seed,split\n";
  for (const auto& r : idx.records) {
    write_clip((std::filesystem::path(dir) / clip_filename(r.clip_id)).string(), generate_record(spec, r));
    m << r.clip_id << "," << r.label << "," << r.seed << "," << to_string(r.split) << "\n";
  }
  write_file_atomic((std::filesystem::path(dir) / "manifest.csv").string(), m.str());
}

LoadedManifest read_manifest(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw ConfigError("cannot open manifest '" + path + "'");
  LoadedManifest out;
  std::string line;
  bool header = false;
  std::size_t lineno = 0;
  auto fail = [&](const std::string& why) {
    throw ConfigError(path + ":" + std::to_string(lineno) + ": " + why);
  };
  while (std::getline(f, line)) {
    ++lineno;
    if (line.empty()) continue;
    if (line[0] == '#') {
      const auto eq = line.find('=');
      if (eq == std::string::npos) continue;
      const std::string key = line.substr(2, eq - 2), val = line.substr(eq + 1);
      try {
        if (key == "n_classes") out.spec.n_classes = std::stoul(val);
        else if (key == "per_class") out.spec.per_class = std::stoul(val);
        else if (key == "frames") out.spec.geometry.frames = std::stoul(val);
        else if (key == "height") out.spec.geometry.height = std::stoul(val);
        else if (key == "width") out.spec.geometry.width = std::stoul(val);
        else if (key == "margin") out.spec.margin = std::stoul(val);
        else if (key == "seed") out.spec.seed = std::stoull(val);
        else if (key == "ratios") {
          std::istringstream rs(val);
          std::string part;
          for (int i = 0; i < 3; ++i) {
            if (!std::getline(rs, part, ',')) fail("ratios needs three values");
            out.spec.ratios[i] = std::stod(part);
          }
        }
      } catch (const std::logic_error&) {
        fail("bad value for " + key);
      }
      continue;
    }
    if (!header) {
      if (line != "clip_id,class,seed,split") fail("expected header clip_id,class,seed,split");
      header = true;
      continue;
    }
    std::istringstream ls(line);
    std::string a, b, c, d;
    if (!std::getline(ls, a, ',') || !std::getline(ls, b, ',') || !std::getline(ls, c, ',') ||
        !std::getline(ls, d))
      fail("expected 4 fields");
    try {
      out.index.records.push_back({std::stoul(a), std::stoi(b), std::stoull(c), parse_split(d)});
    } catch (const std::logic_error&) {
      fail("malformed row");
    }
  }
  if (!header) throw ConfigError("manifest '" + path + "' has no header row");
  return out;
}

}  // namespace tstcnn::synth
