#include "idmorph/synthdata.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <fstream>
#include <sstream>

#include <fmt/format.h>

#include "idmorph/image_io.hpp"
#include "idmorph/rng.hpp"

namespace idmorph {

IdentitySpec IdentitySpec::from_index(std::size_t k) {
  IdentitySpec s{};
  s.canopy = static_cast<int>(k % 3);
  s.wheel_radius = 0.09 + 0.02 * double((k / 3) % 3);
  s.stripe_offset = 0.3 + 0.2 * double((k / 9) % 3);
  s.aspect = 2.4 + 0.2 * double((k / 27) % 4);
  s.hue = std::fmod(0.037 * double(k), 1.0);
  return s;
}

namespace {

using Rgb = std::array<double, 3>;

Rgb hsv(double h, double s, double v) {
  h = std::fmod(h, 1.0) * 6.0;
  const int i = static_cast<int>(h) % 6;
  const double f = h - std::floor(h);
  const double p = v * (1 - s), q = v * (1 - s * f), t = v * (1 - s * (1 - f));
  switch (i) {
    case 0: return {v, t, p};
    case 1: return {q, v, p};
    case 2: return {p, v, t};
    case 3: return {p, q, v};
    case 4: return {t, p, v};
    default: return {v, p, q};
  }
}

struct Affine {
  double a, b, c, d;  // canonical -> view: [x;y] = [a b; c d] [u;v]

  // view -> canonical
  std::array<double, 2> inverse(double x, double y) const {
    const double det = a * d - b * c;
    return {(d * x - b * y) / det, (-c * x + a * y) / det};
  }
};

Affine view_transform(int viewpoint) {
  switch (static_cast<Viewpoint>(viewpoint)) {
    case Viewpoint::frontal: return {0.42, 0.0, 0.0, 1.0};
    case Viewpoint::frontal_left: return {-0.7, 0.0, 0.18, 1.0};
    case Viewpoint::frontal_right: return {0.7, 0.0, -0.18, 1.0};
    case Viewpoint::left: return {-1.0, 0.0, 0.0, 1.0};
    case Viewpoint::right: return {1.0, 0.0, 0.0, 1.0};
  }
  throw LabelError("viewpoint " + std::to_string(viewpoint) + " outside 1..5");
}

// Colour of the canonical side-view sprite at (u, v); front faces +u.
Rgb sprite(const IdentitySpec& s, double u, double v) {
  const double len = 0.36 * s.aspect;  // half-length of body
  const double body_lo = -0.30, body_hi = 0.02;
  const double wheel_y = body_lo;
  const double wheel_x = 0.62 * len;
  const Rgb body = hsv(s.hue, 0.65, 0.85);

  for (double wx : {-wheel_x, wheel_x}) {
    const double r2 = (u - wx) * (u - wx) + (v - wheel_y) * (v - wheel_y);
    if (r2 < s.wheel_radius * s.wheel_radius) {
      return r2 < 0.25 * s.wheel_radius * s.wheel_radius ? Rgb{0.6, 0.6, 0.62} : Rgb{0.08, 0.08, 0.09};
    }
  }
  if (std::abs(u) <= len && v >= body_lo && v <= body_hi) {
    const double stripe = body_lo + s.stripe_offset * (body_hi - body_lo);
    if (std::abs(v - stripe) < 0.03) return hsv(s.hue + 0.5, 0.7, 0.95);
    if (u > len - 0.07 && v > body_hi - 0.1) return {1.0, 0.92, 0.35};  // headlight
    if (u < -len + 0.05 && v > body_hi - 0.1) return {0.85, 0.1, 0.1};   // tail light
    return body;
  }
  // Cabin above the body: trapezoid whose extent depends on the canopy type.
  const double cab_hi = s.canopy == 2 ? 0.34 : 0.26;
  if (v > body_hi && v <= cab_hi) {
    const double t = (v - body_hi) / (cab_hi - body_hi);
    double rear = -0.55 * len, front = 0.35 * len;
    if (s.canopy == 1) rear = -0.95 * len;
    if (s.canopy == 2) {
      rear = -0.92 * len;
      front = 0.45 * len;
    }
    const double lo = rear + t * (s.canopy == 0 ? 0.25 * len : 0.05 * len);
    const double hi = front - t * 0.3 * len;
    if (u >= lo && u <= hi) {
      const bool window = t > 0.18 && t < 0.85 && u > lo + 0.04 && u < hi - 0.04 && std::abs(u - 0.5 * (lo + hi)) > 0.02;
      return window ? Rgb{0.35, 0.45, 0.55} : body;
    }
  }
  // Ground shadow, then a vertical background gradient.
  if (v < wheel_y - 0.08 && v > wheel_y - 0.14 && std::abs(u) < len) return {0.55, 0.55, 0.55};
  const double g = 0.78 + 0.12 * v;
  return {g, g, g + 0.03};
}

}  // namespace

std::vector<float> render_sample(const IdentitySpec& spec, int viewpoint, std::uint64_t jitter_seed,
                                 std::size_t image_size) {
  if (image_size == 0) throw DimensionError("render_sample: image size must be positive");
  const Affine view = view_transform(viewpoint);
  Rng rng(jitter_seed);
  const double tx = rng.uniform(-0.06, 0.06), ty = rng.uniform(-0.06, 0.06);
  const double brightness = rng.uniform(0.92, 1.08);

  const std::size_t S = image_size, plane = S * S;
  std::vector<float> out(3 * plane);
  for (std::size_t row = 0; row < S; ++row) {
    for (std::size_t col = 0; col < S; ++col) {
      // Pairs are summed left+right first so that mirrored views round identically.
      Rgb acc{0, 0, 0};
      for (double oy : {-0.5, 0.5}) {
        const double y = (double(S) - 2.0 * double(row) - 1.0 - oy) / double(S);
        Rgb pair{0, 0, 0};
        for (double ox : {-0.5, 0.5}) {
          const double x = (2.0 * double(col) + 1.0 + ox - double(S)) / double(S);
          const auto [u, v] = view.inverse(x, y);
          const Rgb c = sprite(spec, u - tx, v - ty);
          for (int k = 0; k < 3; ++k) pair[k] += c[k];
        }
        for (int k = 0; k < 3; ++k) acc[k] += pair[k];
      }
      for (std::size_t k = 0; k < 3; ++k) {
        const double v = std::clamp(acc[k] * 0.25 * brightness, 0.0, 1.0);
        const double byte = std::round(v * 255.0);
        out[k * plane + row * S + col] = float(byte / 127.5 - 1.0);
      }
    }
  }
  return out;
}

std::string manifest_csv(const std::vector<ManifestRow>& rows) {
  std::string out = "path,identity,viewpoint,split\n";
  for (const auto& r : rows) out += fmt::format("{},{},{},{}\n", r.path, r.identity, r.viewpoint, to_string(r.split));
  return out;
}

DatasetManifest build_dataset(std::size_t n_identities, std::size_t per_cell, const std::filesystem::path& out_dir,
                              std::uint64_t seed, std::size_t image_size) {
  if (n_identities < 2) throw ConfigError("build_dataset: need at least 2 identities for an auxiliary/standard split");
  if (per_cell == 0) throw ConfigError("build_dataset: samples per identity and viewpoint must be positive");
  std::error_code ec;
  std::filesystem::create_directories(out_dir / "images", ec);
  if (ec) throw IoError("cannot create '" + (out_dir / "images").string() + "': " + ec.message());

  DatasetManifest m;
  m.auxiliary_identities = std::clamp<std::size_t>((n_identities * 4 + 2) / 5, 1, n_identities - 1);
  m.standard_identities = n_identities - m.auxiliary_identities;
  for (std::size_t k = 0; k < n_identities; ++k) {
    const auto spec = IdentitySpec::from_index(k);
    const Split split = k < m.auxiliary_identities ? Split::auxiliary : Split::standard;
    for (int v = 1; v <= int(kNumViewpoints); ++v) {
      for (std::size_t s = 0; s < per_cell; ++s) {
        const std::uint64_t jitter = mix_seed(mix_seed(seed, k), std::uint64_t(v) * 100003u + s);
        const auto planar = render_sample(spec, v, jitter, image_size);
        const std::string rel = fmt::format("images/id{:04}_v{}_s{:03}.png", k + 1, v, s);
        write_png(out_dir / rel, from_planar(planar, image_size, image_size));
        m.rows.push_back({rel, k + 1, std::size_t(v), split});
      }
    }
  }
  std::sort(m.rows.begin(), m.rows.end(), [](const auto& a, const auto& b) { return a.path < b.path; });
  m.path = out_dir / "manifest.csv";
  std::ofstream f(m.path, std::ios::binary | std::ios::trunc);
  if (!f) throw IoError("cannot write manifest '" + m.path.string() + "'");
  f << manifest_csv(m.rows);
  if (!f) throw IoError("write failed for manifest '" + m.path.string() + "'");
  return m;
}

std::vector<ManifestRow> parse_manifest(const std::string& text, const std::string& source, std::size_t num_attributes) {
  std::istringstream in(text);
  std::string line;
  std::size_t lineno = 0;
  std::vector<ManifestRow> rows;
  auto fail = [&](const std::string& why) -> DataError {
    return DataError(source + ":" + std::to_string(lineno) + ": " + why + " (row: '" + line + "')");
  };
  auto parse_uint = [&](const std::string& field, const char* what) {
    std::size_t pos = 0;
    unsigned long long v = 0;
    try {
      v = std::stoull(field, &pos);
    } catch (const std::exception&) {
      pos = 0;
    }
    if (pos == 0 || pos != field.size() || field[0] == '-') throw fail(std::string("malformed ") + what + " '" + field + "'");
    return static_cast<std::size_t>(v);
  };
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (lineno == 1) {
      if (line != "path,identity,viewpoint,split") throw fail("expected header 'path,identity,viewpoint,split'");
      continue;
    }
    if (line.empty()) continue;
    std::vector<std::string> fields;
    std::string field;
    std::istringstream ls(line);
    while (std::getline(ls, field, ',')) fields.push_back(field);
    if (!line.empty() && line.back() == ',') fields.emplace_back();
    if (fields.size() != 4) throw fail("expected 4 comma-separated fields, got " + std::to_string(fields.size()));
    if (fields[0].empty()) throw fail("empty path");
    ManifestRow r;
    r.path = fields[0];
    r.identity = parse_uint(fields[1], "identity");
    r.viewpoint = parse_uint(fields[2], "viewpoint");
    try {
      r.split = parse_split(fields[3]);
    } catch (const DataError& e) {
      throw fail(e.what());
    }
    if (r.identity < 1) {
      throw LabelError(source + ":" + std::to_string(lineno) + ": identity " + fields[1] + " must be >= 1");
    }
    if (r.viewpoint < 1 || r.viewpoint > num_attributes) {
      throw LabelError(source + ":" + std::to_string(lineno) + ": viewpoint " + fields[2] + " outside 1.." +
                       std::to_string(num_attributes));
    }
    rows.push_back(std::move(r));
  }
  if (lineno == 0) throw DataError(source + ": empty manifest");
  return rows;
}

Dataset load_dataset(const std::filesystem::path& manifest_path, std::size_t image_size, std::size_t num_attributes) {
  std::ifstream f(manifest_path, std::ios::binary);
  if (!f) throw IoError("cannot open manifest '" + manifest_path.string() + "'");
  std::stringstream buf;
  buf << f.rdbuf();
  const auto rows = parse_manifest(buf.str(), manifest_path.string(), num_attributes);
  const auto base = manifest_path.parent_path();
  Dataset d;
  d.image_size = image_size;
  d.pixels.reserve(rows.size() * d.image_numel());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const auto& r = rows[i];
    std::filesystem::path p = r.path;
    if (p.is_relative()) p = base / p;
    if (!std::filesystem::exists(p)) {
      throw IoError(manifest_path.string() + ":" + std::to_string(i + 2) + ": missing image file '" + p.string() + "'");
    }
    auto img = read_png(p);
    img = resize_bilinear(img, image_size, image_size);
    d.add(to_planar(img), r.identity - 1, r.viewpoint - 1, true, r.split, r.path);
  }
  return d;
}

}  // namespace idmorph
