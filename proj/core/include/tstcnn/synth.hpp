#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "tstcnn/tensor.hpp"

namespace tstcnn::synth {

struct Geometry {
  std::size_t frames = 16;
  std::size_t height = 32;
  std::size_t width = 32;

  void validate() const;  // ConfigError for T < 2 or H, W < 8
  bool operator==(const Geometry&) const = default;
};

enum class PathShape { line, arc_pos, arc_neg, wave };

/**
 * Trajectory of the disc actor's center in pixel coordinates (x right,
 * y down) as a function of source frame index t.
 *
 *  - still: fixed at `origin`.
 *  - translate: origin + t * velocity.
 *  - stroke: a segment of `length` through `origin` at `angle` (radians),
 *    traversed `legs` times at constant speed during the frames
 *    [onset, onset + duration]; held at the end points outside. Non-line
 *    shapes bend the segment sideways by up to `bend` pixels.
 */
struct MotionProgram {
  enum class Kind { still, translate, stroke };
  Kind kind = Kind::still;
  std::array<double, 2> origin{0, 0};
  std::array<double, 2> velocity{0, 0};
  double angle = 0.0;
  double length = 0.0;
  std::size_t legs = 1;
  PathShape shape = PathShape::line;
  double bend = 0.0;
  double onset = 0.0;
  double duration = 1.0;

  std::array<double, 2> position(double t) const;
};

/// One scene; classes share appearance and differ only in their program.
struct SceneSpec {
  int label = 0;
  std::size_t n_classes = 6;
  Geometry geometry;
  /// Extra source frames on each side of the T-frame stroke window.
  std::size_t margin = 0;
  /// Sampled from (label, seed) when empty.
  std::optional<MotionProgram> program;
};

struct Clip {
  Tensor<float> rgb;   // (3, T, H, W) in [0, 1]
  Tensor<float> flow;  // (2, T, H, W): (v_x, v_y) in pixels/frame
  int label = 0;
  std::uint64_t seed = 0;

  std::size_t frames() const { return rgb.dim(1); }
};

/// Legs and path shape of a class. Class 0 (rejection) is a rapid 6-leg
/// shake; class c >= 1 has legs 1 + (c-1) % 5 and shape (c-1) / 5.
MotionProgram class_program(int label, std::size_t n_classes, const Geometry& g, std::size_t margin,
                            std::uint64_t seed);

/// Actor radius (full-opacity core, soft rim end) for a geometry.
std::array<double, 2> actor_radii(const Geometry& g);

/**
 * Renders T + 2 * margin frames. flow_t is the displacement
 * p(t + 1) - p(t) on the pixels covered by the actor at t or t + 1 and zero
 * elsewhere.
 */
Clip generate_clip(const SceneSpec& spec, std::uint64_t seed);

/// Rotation (degrees, positive turns +x toward +y), homothety ratio and
/// translation (pixels) about the frame center.
struct SpatialTransform {
  double rotation_deg = 0.0;
  double scale = 1.0;
  double tx = 0.0;
  double ty = 0.0;
  bool is_identity() const { return rotation_deg == 0.0 && scale == 1.0 && tx == 0.0 && ty == 0.0; }
};

struct SpatialAugmentParams {
  double max_rotation_deg = 10.0;
  double min_scale = 0.9;
  double max_scale = 1.1;
  double max_translation = 0.05;  // fraction of the extent
  void validate() const;
};

/// Resamples every frame bilinearly with edge padding; flow vectors become
/// scale * R * v. The identity returns a bit-exact copy.
Clip apply_spatial(const Clip& clip, const SpatialTransform& t);
SpatialTransform sample_spatial(const SpatialAugmentParams& p, const Geometry& g, std::uint64_t seed);
Clip augment_spatial(const Clip& clip, const SpatialAugmentParams& p, std::uint64_t seed);

/// Frames [start, start + frames) of a source clip.
Clip extract_window(const Clip& source, std::size_t start, std::size_t frames);

/// Picks an offset uniform in [-jitter, jitter] around the centered window,
/// re-drawing up to 8 times when the window leaves the source, then clamps.
std::ptrdiff_t sample_temporal_offset(std::size_t source_frames, std::size_t frames, std::size_t jitter,
                                      std::uint64_t seed);
Clip augment_temporal(const Clip& source, std::size_t frames, std::size_t jitter, std::uint64_t seed);

enum class Split { train, val, test };
std::string to_string(Split s);
Split parse_split(const std::string& s);

struct ClipRecord {
  std::size_t clip_id = 0;
  int label = 0;
  std::uint64_t seed = 0;
  Split split = Split::train;
  bool operator==(const ClipRecord&) const = default;
};

struct DatasetIndex {
  std::vector<ClipRecord> records;  // ordered by clip_id
  std::vector<ClipRecord> of(Split s) const;
};

/// Per class floor(per_class * ratio) clips go to val and test, the rest to
/// train. Ratios (train, val, test) sum to 1.
DatasetIndex build_dataset(std::size_t n_classes, std::size_t per_class, std::array<double, 3> ratios,
                           std::uint64_t seed);

struct DatasetSpec {
  std::size_t n_classes = 6;
  std::size_t per_class = 40;
  std::array<double, 3> ratios{0.7, 0.15, 0.15};
  Geometry geometry;
  std::size_t margin = 1;
  std::uint64_t seed = 1;

  void validate() const;
};

/// Source clip (with margins) for one record.
Clip generate_record(const DatasetSpec& spec, const ClipRecord& r);

/// Clip file: rgb tensor, flow tensor, u32 label, u64 seed.
void write_clip(const std::string& path, const Clip& clip);
Clip read_clip(const std::string& path);

/// Writes clip_<id>.bin files and manifest.csv (clip_id,class,seed,split)
/// whose leading '#' lines hold the generation settings.
void write_dataset(const std::string& dir, const DatasetSpec& spec);
struct LoadedManifest {
  DatasetSpec spec;
  DatasetIndex index;
};
LoadedManifest read_manifest(const std::string& path);

}  // namespace tstcnn::synth
