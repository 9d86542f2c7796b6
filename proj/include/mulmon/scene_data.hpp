#pragma once

#include <optional>
#include <string>
#include <vector>

#include "mulmon/rng.hpp"
#include "mulmon/tensor.hpp"
#include "mulmon/viewpoint.hpp"

namespace mulmon {

// Procedural multi-view scene data: a 2.5-D orthographic sprite compositor
// with a horizontal orbiting camera. Azimuth rotates object positions about
// the scene center before projection, and occlusion order is the per-view
// camera distance, so vertical-axis rotation and view-dependent occlusion
// are both present in the data.

enum class ShapeKind : int32_t { Background = 0, Circle = 1, Square = 2, Triangle = 3 };

struct ObjectSpec {
  ShapeKind shape = ShapeKind::Circle;
  float color[3] = {0, 0, 0};
  float size = 0;        // canvas units
  float position[2] = {0, 0};  // world-plane coordinates
  int32_t depth_rank = 0;      // unique per scene; deterministic draw tie-break
  int32_t material = 0;        // 0 matte, 1 shiny
};

struct ViewObservation {
  Tensor<float> image;            // [3, H, W] in [0,1]
  Viewpoint viewpoint;
  std::optional<Tensor<uint8_t>> gt_masks;  // [H, W], object index, 0 = background
};

struct SceneRecord {
  std::string scene_id;
  std::vector<ObjectSpec> objects;  // objects[0] is always the background
  std::vector<ViewObservation> views;
  Tensor<float> factors;  // [num_objects, F]; column schema in DatasetManifest

  int64_t num_foreground() const { return static_cast<int64_t>(objects.size()) - 1; }
};

struct DatasetManifest {
  std::string name = "toy-mv";
  int64_t train_scenes = 500;
  int64_t test_scenes = 100;
  int64_t H = 64, W = 64;
  int64_t J = 3;
  int64_t T_total = 10;
  int64_t max_foreground = 3;  // 1..max_foreground objects plus background
  uint64_t rng_seed = 0;
  double camera_radius = 2.0;
  std::vector<std::string> factor_schema = {"shape", "color_r", "color_g", "color_b",
                                            "size", "pos_x", "pos_y", "material"};

  void validate() const;
};

// Deterministic in (manifest geometry, seed). Throws DataError if object
// placement cannot be satisfied after bounded retries.
SceneRecord generate_scene(const DatasetManifest& m, uint64_t seed);

// Renders one view of a scene at the given azimuth; exposed for tests
// (occlusion oracle) and the predict CLI's ground-truth panels.
ViewObservation render_view(const std::vector<ObjectSpec>& objects, int64_t H,
                            int64_t W, double azimuth, double radius);

struct Dataset {
  DatasetManifest manifest;
  std::vector<SceneRecord> train;
  std::vector<SceneRecord> test;
};

// Generates the full dataset; scene i of a split uses the substream
// (seed, split, i) so generation is order-independent and parallel-safe.
Dataset generate_dataset(const DatasetManifest& m);

// Directory layout: <path>/manifest.json plus per-scene array chunks
// train/scene_#####.bin, test/scene_#####.bin (see docs/formats.md).
void save_dataset(const Dataset& d, const std::string& path);
Dataset load_dataset(const std::string& path);
// Loads manifest + scene file lists only; scenes are then read on demand.
DatasetManifest load_manifest(const std::string& path);
SceneRecord load_scene(const std::string& path, const std::string& split, int64_t index,
                       const DatasetManifest& m);
int64_t split_size(const DatasetManifest& m, const std::string& split);

bool scene_equal(const SceneRecord& a, const SceneRecord& b);

}  // namespace mulmon
