#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "idmorph/dataset.hpp"

// Procedural vehicle sprites: identities are parameter tuples, viewpoints
// are fixed affine transforms of a canonical side view.

namespace idmorph {

constexpr std::size_t kNumViewpoints = 5;

/// Viewpoint labels (1-based, as in manifests).
enum class Viewpoint : int { frontal = 1, frontal_left = 2, frontal_right = 3, left = 4, right = 5 };

struct IdentitySpec {
  double aspect;        // body length relative to height
  int canopy;           // 0 sedan, 1 hatch, 2 box
  double wheel_radius;
  double stripe_offset; // accent stripe height within the body
  double hue;           // [0, 1)

  static IdentitySpec from_index(std::size_t identity);
  bool operator==(const IdentitySpec&) const = default;
};

/// Planar [3,S,S] image in [-1,1]; deterministic in (spec, viewpoint, seed).
/// Values are quantized to 8 bits so that PNG round trips are exact.
std::vector<float> render_sample(const IdentitySpec& spec, int viewpoint, std::uint64_t jitter_seed,
                                 std::size_t image_size = 64);

struct ManifestRow {
  std::string path;  // relative to the manifest directory
  std::size_t identity;   // 1-based
  std::size_t viewpoint;  // 1-based
  Split split;
};

struct DatasetManifest {
  std::filesystem::path path;
  std::vector<ManifestRow> rows;
  std::size_t auxiliary_identities = 0;
  std::size_t standard_identities = 0;
};

/// Renders n_identities x 5 viewpoints x per_cell images under out_dir and
/// writes out_dir/manifest.csv. The first 80% of identities (rounded) form
/// the auxiliary split, the rest the standard split.
DatasetManifest build_dataset(std::size_t n_identities, std::size_t per_cell, const std::filesystem::path& out_dir,
                              std::uint64_t seed, std::size_t image_size = 64);

std::string manifest_csv(const std::vector<ManifestRow>& rows);
std::vector<ManifestRow> parse_manifest(const std::string& text, const std::string& source, std::size_t num_attributes);

/// Loads a manifest (synthetic or external). Images of another size are
/// resampled to image_size. Labels become 0-based.
Dataset load_dataset(const std::filesystem::path& manifest_path, std::size_t image_size = 64,
                     std::size_t num_attributes = kNumViewpoints);

}  // namespace idmorph
