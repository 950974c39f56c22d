#include "flowseg/synth.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <random>
#include <sstream>

#include "flowseg/error.hpp"

namespace flowseg {

namespace {

std::string trim(const std::string& s) {
  const auto first = s.find_first_not_of(" \t\r");
  if (first == std::string::npos) return {};
  const auto last = s.find_last_not_of(" \t\r");
  return s.substr(first, last - first + 1);
}

std::vector<double> parse_numbers(const std::string& key, const std::string& value,
                                  std::size_t expected) {
  std::vector<double> out;
  std::stringstream ss(value);
  std::string item;
  while (std::getline(ss, item, ',')) {
    try {
      std::size_t used = 0;
      const auto t = trim(item);
      out.push_back(std::stod(t, &used));
      if (used != t.size()) throw std::invalid_argument(t);
    } catch (const std::exception&) {
      fail(ErrorCode::InvalidArgument, "bad number in '" + key + "': " + item);
    }
  }
  if (out.size() != expected) {
    fail(ErrorCode::InvalidArgument, "'" + key + "' expects " + std::to_string(expected) + " values");
  }
  return out;
}

FlowVector parse_vector(const std::string& key, const std::string& value) {
  const auto n = parse_numbers(key, value, 2);
  return {static_cast<float>(n[0]), static_cast<float>(n[1])};
}

void validate(const SceneSpec& spec) {
  if (spec.width <= 0 || spec.height <= 0) fail(ErrorCode::InvalidArgument, "scene dims must be positive");
  if (spec.frames < 1) fail(ErrorCode::InvalidArgument, "frames must be >= 1");
  if (!(spec.noise_sigma >= 0.0)) fail(ErrorCode::InvalidArgument, "noise_sigma must be >= 0");
  for (std::size_t i = 0; i < spec.objects.size(); ++i) {
    const auto& o = spec.objects[i];
    if (!(o.w > 0.0) || !(o.h > 0.0)) fail(ErrorCode::InvalidArgument, "object size must be positive");
    for (int t = 0; t < spec.frames; ++t) {
      const double x0 = o.x + t * double{o.trajectory.u};
      const double y0 = o.y + t * double{o.trajectory.v};
      if (x0 < 0.0 || y0 < 0.0 || x0 + o.w > spec.width || y0 + o.h > spec.height) {
        fail(ErrorCode::ShapeOutOfBounds,
             "object " + std::to_string(i) + " leaves the frame on frame " + std::to_string(t));
      }
    }
  }
}

}  // namespace

bool contains(const SceneObject& object, int frame, double px, double py) {
  const double x0 = object.x + frame * double{object.trajectory.u};
  const double y0 = object.y + frame * double{object.trajectory.v};
  if (object.shape == ShapeKind::Rectangle) {
    return px >= x0 && px < x0 + object.w && py >= y0 && py < y0 + object.h;
  }
  const double rx = object.w / 2.0;
  const double ry = object.h / 2.0;
  const double dx = (px - (x0 + rx)) / rx;
  const double dy = (py - (y0 + ry)) / ry;
  return dx * dx + dy * dy <= 1.0;
}

LabeledSequence generate(const SceneSpec& spec) {
  validate(spec);
  std::mt19937_64 rng(spec.seed);
  std::normal_distribution<double> noise(0.0, spec.noise_sigma > 0.0 ? spec.noise_sigma : 1.0);

  LabeledSequence seq;
  seq.flows.reserve(spec.frames);
  seq.masks.reserve(spec.frames);
  for (int t = 0; t < spec.frames; ++t) {
    FlowField flow(spec.width, spec.height, spec.background_motion);
    Mask mask(spec.width, spec.height);
    for (int y = 0; y < spec.height; ++y) {
      for (int x = 0; x < spec.width; ++x) {
        for (const auto& object : spec.objects) {
          if (contains(object, t, x + 0.5, y + 0.5)) {
            flow.at(x, y) = object.motion;
            mask.at(x, y) = 1;
          }
        }
      }
    }
    if (spec.noise_sigma > 0.0) {
      for (auto& vec : flow.vectors) {
        vec.u = static_cast<float>(vec.u + noise(rng));
        vec.v = static_cast<float>(vec.v + noise(rng));
      }
    }
    seq.flows.push_back(std::move(flow));
    seq.masks.push_back(std::move(mask));
  }
  return seq;
}

SceneSpec parse_scene_spec(const std::string& text) {
  SceneSpec spec;
  std::map<int, SceneObject> objects;
  std::map<int, bool> has_trajectory;
  std::stringstream in(text);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    line = trim(line);
    if (line.empty() || line[0] == '#') continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      fail(ErrorCode::InvalidArgument, "line " + std::to_string(lineno) + ": expected key=value");
    }
    const auto key = trim(line.substr(0, eq));
    const auto value = trim(line.substr(eq + 1));

    if (key == "width") {
      spec.width = static_cast<int>(parse_numbers(key, value, 1)[0]);
    } else if (key == "height") {
      spec.height = static_cast<int>(parse_numbers(key, value, 1)[0]);
    } else if (key == "frames") {
      spec.frames = static_cast<int>(parse_numbers(key, value, 1)[0]);
    } else if (key == "seed") {
      try {
        spec.seed = std::stoull(value);
      } catch (const std::exception&) {
        fail(ErrorCode::InvalidArgument, "bad seed: " + value);
      }
    } else if (key == "noise_sigma") {
      spec.noise_sigma = parse_numbers(key, value, 1)[0];
    } else if (key == "background") {
      spec.background_motion = parse_vector(key, value);
    } else if (key.rfind("object", 0) == 0) {
      const auto dot = key.find('.');
      int index = -1;
      try {
        index = std::stoi(key.substr(6, dot - 6));
      } catch (const std::exception&) {
      }
      if (dot == std::string::npos || index < 0) {
        fail(ErrorCode::InvalidArgument, "bad object key: " + key);
      }
      auto& obj = objects[index];
      const auto field = key.substr(dot + 1);
      if (field == "shape") {
        if (value == "rect") {
          obj.shape = ShapeKind::Rectangle;
        } else if (value == "ellipse") {
          obj.shape = ShapeKind::Ellipse;
        } else {
          fail(ErrorCode::InvalidArgument, "unknown shape: " + value);
        }
      } else if (field == "box") {
        const auto b = parse_numbers(key, value, 4);
        obj.x = b[0];
        obj.y = b[1];
        obj.w = b[2];
        obj.h = b[3];
      } else if (field == "motion") {
        obj.motion = parse_vector(key, value);
      } else if (field == "trajectory") {
        obj.trajectory = parse_vector(key, value);
        has_trajectory[index] = true;
      } else {
        fail(ErrorCode::InvalidArgument, "unknown object field: " + field);
      }
    } else {
      fail(ErrorCode::InvalidArgument, "unknown key: " + key);
    }
  }
  for (auto& [index, obj] : objects) {
    if (!has_trajectory[index]) obj.trajectory = obj.motion;
    spec.objects.push_back(obj);
  }
  return spec;
}

std::string format_scene_spec(const SceneSpec& spec) {
  std::ostringstream out;
  out.precision(9);
  out << "width=" << spec.width << '\n'
      << "height=" << spec.height << '\n'
      << "frames=" << spec.frames << '\n'
      << "seed=" << spec.seed << '\n'
      << "noise_sigma=" << spec.noise_sigma << '\n'
      << "background=" << spec.background_motion.u << ',' << spec.background_motion.v << '\n';
  for (std::size_t i = 0; i < spec.objects.size(); ++i) {
    const auto& o = spec.objects[i];
    const auto prefix = "object" + std::to_string(i) + ".";
    out << prefix << "shape=" << (o.shape == ShapeKind::Rectangle ? "rect" : "ellipse") << '\n'
        << prefix << "box=" << o.x << ',' << o.y << ',' << o.w << ',' << o.h << '\n'
        << prefix << "motion=" << o.motion.u << ',' << o.motion.v << '\n'
        << prefix << "trajectory=" << o.trajectory.u << ',' << o.trajectory.v << '\n';
  }
  return out.str();
}

SceneSpec read_scene_spec(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) fail(ErrorCode::Io, "cannot open " + path.string());
  std::stringstream buffer;
  buffer << in.rdbuf();
  return parse_scene_spec(buffer.str());
}

std::string frame_stem(int index) {
  char buf[16];
  std::snprintf(buf, sizeof(buf), "%05d", index);
  return buf;
}

void write_sequence(const std::filesystem::path& out_dir, const LabeledSequence& sequence) {
  namespace fs = std::filesystem;
  fs::create_directories(out_dir / "flow");
  fs::create_directories(out_dir / "gt");
  for (std::size_t t = 0; t < sequence.flows.size(); ++t) {
    const auto stem = frame_stem(static_cast<int>(t));
    write_flo_file(out_dir / "flow" / (stem + ".flo"), sequence.flows[t]);
    write_pgm(out_dir / "gt" / (stem + ".pgm"), sequence.masks[t]);
  }
}

}  // namespace flowseg
