#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "flowseg/flow_io.hpp"
#include "flowseg/mask.hpp"

namespace flowseg {

enum class ShapeKind { Rectangle, Ellipse };

/// A translating object. The shape is given by its bounding box at frame 0;
/// on frame t the box is shifted by t * trajectory. An ellipse is inscribed in
/// its box. A pixel belongs to the shape when its center lies inside it.
struct SceneObject {
  ShapeKind shape = ShapeKind::Rectangle;
  double x = 0.0;
  double y = 0.0;
  double w = 0.0;
  double h = 0.0;
  FlowVector motion;
  FlowVector trajectory;
};

struct SceneSpec {
  int width = 0;
  int height = 0;
  FlowVector background_motion;
  std::vector<SceneObject> objects;
  double noise_sigma = 0.0;
  int frames = 1;
  std::uint64_t seed = 0;
};

struct LabeledSequence {
  std::vector<FlowField> flows;
  std::vector<Mask> masks;
};

/// Renders every frame. Later objects occlude earlier ones. Noise is i.i.d.
/// N(0, sigma^2) per flow component, drawn from a generator seeded with spec.seed.
/// Throws ShapeOutOfBounds if any box leaves the frame, InvalidArgument for bad specs.
LabeledSequence generate(const SceneSpec& spec);

bool contains(const SceneObject& object, int frame, double px, double py);

// Flat key=value text form. Keys:
//   width, height, frames, seed, noise_sigma, background = u,v
//   objectN.shape = rect|ellipse, objectN.box = x,y,w,h,
//   objectN.motion = u,v, objectN.trajectory = u,v (defaults to motion)
// Blank lines and lines starting with '#' are ignored.
SceneSpec parse_scene_spec(const std::string& text);
std::string format_scene_spec(const SceneSpec& spec);
SceneSpec read_scene_spec(const std::filesystem::path& path);

/// Writes out/flow/NNNNN.flo and out/gt/NNNNN.pgm.
void write_sequence(const std::filesystem::path& out_dir, const LabeledSequence& sequence);

std::string frame_stem(int index);

}  // namespace flowseg
