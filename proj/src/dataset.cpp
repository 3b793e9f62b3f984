#include "idmorph/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <map>

#include "idmorph/rng.hpp"

namespace idmorph {

std::string to_string(Split s) { return s == Split::auxiliary ? "auxiliary" : "standard"; }

Split parse_split(const std::string& s) {
  if (s == "auxiliary") return Split::auxiliary;
  if (s == "standard") return Split::standard;
  throw DataError("unknown split '" + s + "' (expected auxiliary or standard)");
}

void Dataset::add(std::span<const float> img, std::size_t id, std::size_t view, bool is_real, Split s,
                  std::string path) {
  if (img.size() != image_numel()) {
    throw DimensionError("dataset image has " + std::to_string(img.size()) + " values, expected " +
                         std::to_string(image_numel()));
  }
  pixels.insert(pixels.end(), img.begin(), img.end());
  identity.push_back(id);
  viewpoint.push_back(view);
  real.push_back(is_real ? 1 : 0);
  split.push_back(s);
  paths.push_back(std::move(path));
}

Dataset Dataset::subset(const std::vector<std::size_t>& indices) const {
  Dataset out;
  out.image_size = image_size;
  out.pixels.reserve(indices.size() * image_numel());
  for (auto i : indices) {
    if (i >= size()) throw IndexError("dataset index " + std::to_string(i) + " out of range");
    out.add(image(i), identity[i], viewpoint[i], real[i] != 0, split[i], paths[i]);
  }
  return out;
}

Dataset Dataset::filter(Split s) const {
  std::vector<std::size_t> keep;
  for (std::size_t i = 0; i < size(); ++i)
    if (split[i] == s) keep.push_back(i);
  return subset(keep);
}

std::vector<std::size_t> Dataset::identities() const {
  std::vector<std::size_t> ids(identity);
  std::sort(ids.begin(), ids.end());
  ids.erase(std::unique(ids.begin(), ids.end()), ids.end());
  return ids;
}

Dataset Dataset::relabeled() const {
  std::map<std::size_t, std::size_t> dense;
  for (auto id : identities()) dense.emplace(id, dense.size());
  Dataset out = *this;
  for (auto& id : out.identity) id = dense.at(id);
  return out;
}

Dataset Dataset::first_identities(std::size_t count) const {
  auto ids = identities();
  if (ids.size() > count) ids.resize(count);
  std::vector<std::size_t> keep;
  for (std::size_t i = 0; i < size(); ++i)
    if (std::binary_search(ids.begin(), ids.end(), identity[i])) keep.push_back(i);
  return subset(keep);
}

std::pair<Dataset, Dataset> split_holdout(const Dataset& data, double fraction, Rng& rng) {
  if (!(fraction >= 0 && fraction < 1)) throw ConfigError("hold-out fraction must lie in [0, 1)");
  std::map<std::pair<std::size_t, std::size_t>, std::vector<std::size_t>> cells;
  for (std::size_t i = 0; i < data.size(); ++i) cells[{data.identity[i], data.viewpoint[i]}].push_back(i);
  std::vector<std::size_t> keep, held;
  for (auto& [cell, members] : cells) {
    shuffle(members.begin(), members.end(), rng);
    auto n_held = static_cast<std::size_t>(std::lround(fraction * double(members.size())));
    if (fraction > 0 && n_held == 0 && members.size() >= 2) n_held = 1;
    for (std::size_t j = 0; j < members.size(); ++j) (j < n_held ? held : keep).push_back(members[j]);
  }
  std::sort(keep.begin(), keep.end());
  std::sort(held.begin(), held.end());
  return {data.subset(keep), data.subset(held)};
}

template <typename T>
TensorPtr<T> Dataset::images(const std::vector<std::size_t>& indices) const {
  if (indices.empty()) throw BatchSizeError("empty image batch");
  std::vector<T> buf(indices.size() * image_numel());
  for (std::size_t b = 0; b < indices.size(); ++b) {
    if (indices[b] >= size()) throw IndexError("dataset index " + std::to_string(indices[b]) + " out of range");
    auto src = image(indices[b]);
    std::copy(src.begin(), src.end(), buf.begin() + static_cast<std::ptrdiff_t>(b * image_numel()));
  }
  return tensor_new<T>({indices.size(), 3, image_size, image_size}, std::move(buf));
}

template TensorPtr<float> Dataset::images<float>(const std::vector<std::size_t>&) const;
template TensorPtr<double> Dataset::images<double>(const std::vector<std::size_t>&) const;

}  // namespace idmorph
