#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "idmorph/tensor.hpp"

namespace idmorph {

enum class Split : std::uint8_t { auxiliary, standard };

std::string to_string(Split s);
Split parse_split(const std::string& s);

/// In-memory labeled images. Labels are 0-based here; files use 1-based.
struct Dataset {
  std::size_t image_size = 0;
  std::vector<float> pixels;            // [n, 3, S, S], values in [-1, 1]
  std::vector<std::size_t> identity;
  std::vector<std::size_t> viewpoint;
  std::vector<std::uint8_t> real;       // 1 for real images, 0 for generated
  std::vector<Split> split;
  std::vector<std::string> paths;       // source file, empty for generated

  std::size_t size() const { return identity.size(); }
  bool empty() const { return identity.empty(); }
  std::size_t image_numel() const { return 3 * image_size * image_size; }
  std::span<const float> image(std::size_t i) const { return {pixels.data() + i * image_numel(), image_numel()}; }

  void add(std::span<const float> img, std::size_t id, std::size_t view, bool is_real = true,
           Split s = Split::auxiliary, std::string path = {});

  Dataset subset(const std::vector<std::size_t>& indices) const;
  Dataset filter(Split s) const;
  /// Sorted distinct identity labels.
  std::vector<std::size_t> identities() const;
  /// Copy with identities renumbered 0..K-1 in sorted order of the originals.
  Dataset relabeled() const;
  /// Keeps only the first `count` distinct identities (sorted).
  Dataset first_identities(std::size_t count) const;

  template <typename T>
  TensorPtr<T> images(const std::vector<std::size_t>& indices) const;
};

class Rng;

/// Splits off round(fraction * n) samples of every (identity, viewpoint)
/// cell, at least one when the cell has two or more. Returns {kept, held_out}.
std::pair<Dataset, Dataset> split_holdout(const Dataset& data, double fraction, Rng& rng);

}  // namespace idmorph
