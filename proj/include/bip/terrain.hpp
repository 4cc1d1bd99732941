#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "bip/errors.hpp"
#include "bip/linalg.hpp"
#include "bip/rng.hpp"

namespace bip::terrain {

enum class Kind {
  Flat,
  UniformNoise,
  Wave,
  SteppingStones,
  Slope,
  Stairs,
  Obstacles,
};

inline const char* kind_name(Kind k) {
  switch (k) {
    case Kind::Flat: return "flat";
    case Kind::UniformNoise: return "uniform_noise";
    case Kind::Wave: return "wave";
    case Kind::SteppingStones: return "stepping_stones";
    case Kind::Slope: return "slope";
    case Kind::Stairs: return "stairs";
    case Kind::Obstacles: return "obstacles";
  }
  return "flat";
}

inline Kind kind_from_name(const std::string& s) {
  if (s == "flat") return Kind::Flat;
  if (s == "uniform_noise" || s == "uniform") return Kind::UniformNoise;
  if (s == "wave") return Kind::Wave;
  if (s == "stepping_stones") return Kind::SteppingStones;
  if (s == "slope" || s == "sloped") return Kind::Slope;
  if (s == "stairs") return Kind::Stairs;
  if (s == "obstacles") return Kind::Obstacles;
  throw ConfigError("unknown terrain kind: " + s);
}

/// 1D heightfield sampled on a regular grid starting at x = x0; height
/// lookups interpolate linearly and clamp beyond the grid.
struct HeightField {
  double x0 = 0.0;
  double spacing = 0.05;
  Vec samples;  // heights in m
  Kind kind = Kind::Flat;
  double difficulty = 0.0;
  std::uint64_t seed = 0;

  double span() const { return spacing * static_cast<double>(samples.size() - 1); }
};

inline double height_at(const HeightField& f, double x) {
  if (f.samples.empty()) return 0.0;
  const double s = (x - f.x0) / f.spacing;
  if (s <= 0.0) return f.samples.front();
  const double last = static_cast<double>(f.samples.size() - 1);
  if (s >= last) return f.samples.back();
  const auto i = static_cast<std::size_t>(s);
  const double frac = s - static_cast<double>(i);
  return f.samples[i] * (1.0 - frac) + f.samples[i + 1] * frac;
}

// The first metre of every terrain is a flat spawn pad; features start
// beyond kFeatureStart.
inline constexpr double kFeatureStart = 0.5;

/// Generates one terrain of the given family. Feature scale grows
/// linearly with difficulty in [0, 1]; identical (kind, difficulty,
/// seed, length) always produce identical samples.
inline HeightField generate_terrain(Kind kind, double difficulty, std::uint64_t seed,
                                    double length) {
  if (difficulty < 0.0 || difficulty > 1.0) throw ConfigError("terrain difficulty must be in [0,1]");
  if (!(length > 0.0)) throw ConfigError("terrain length must be positive");
  HeightField f;
  f.kind = kind;
  f.difficulty = difficulty;
  f.seed = seed;
  f.x0 = -2.0;  // extend behind the spawn so backward motion stays defined
  const auto n = static_cast<std::size_t>(std::ceil((length + 2.0) / f.spacing)) + 1;
  f.samples.assign(n, 0.0);
  Rng rng(seed ^ 0x7e22a1);
  const double d = difficulty;

  auto xs = [&](std::size_t i) { return f.x0 + f.spacing * static_cast<double>(i); };
  switch (kind) {
    case Kind::Flat:
      break;
    case Kind::UniformNoise: {
      const double amp = 0.03 + 0.07 * d;
      for (std::size_t i = 0; i < n; ++i) {
        const double u = rng.uniform(-1.0, 1.0);  // draw unconditionally for determinism
        if (xs(i) > kFeatureStart) f.samples[i] = amp * u;
      }
      break;
    }
    case Kind::Wave: {
      const double amp = 0.05 + 0.10 * d;
      const double period = 1.5;
      const double phase = rng.uniform(0.0, 2.0 * M_PI);
      for (std::size_t i = 0; i < n; ++i) {
        const double x = xs(i);
        if (x > kFeatureStart)
          f.samples[i] = amp * std::sin(2.0 * M_PI * (x - kFeatureStart) / period + phase);
      }
      break;
    }
    case Kind::SteppingStones: {
      // Gapped platforms; gap width is capped at 0.1 m so the planar
      // robot can always cross, gap depth scales with difficulty.
      const double stone = 0.30;
      const double gap = 0.08;
      const double depth = 0.10 + 0.10 * d;
      for (std::size_t i = 0; i < n; ++i) {
        const double x = xs(i);
        if (x <= kFeatureStart) continue;
        const double ph = std::fmod(x - kFeatureStart, stone + gap);
        if (ph > stone) f.samples[i] = -depth;
      }
      break;
    }
    case Kind::Slope: {
      const double grade = 0.05 + 0.15 * d;
      for (std::size_t i = 0; i < n; ++i) {
        const double x = xs(i);
        if (x > kFeatureStart) f.samples[i] = grade * (x - kFeatureStart);
      }
      break;
    }
    case Kind::Stairs: {
      const double rise = 0.05 + 0.10 * d;
      const double run = 0.30;
      for (std::size_t i = 0; i < n; ++i) {
        const double x = xs(i);
        if (x > kFeatureStart)
          f.samples[i] = rise * std::floor((x - kFeatureStart) / run + 1.0);
      }
      break;
    }
    case Kind::Obstacles: {
      // Random rectangular blocks on otherwise flat ground.
      const double max_h = 0.05 + 0.10 * d;
      double x = kFeatureStart;
      while (x < length) {
        const double spacing = rng.uniform(0.4, 0.9);
        const double block_len = rng.uniform(0.15, 0.40);
        const double h = max_h * rng.uniform(0.3, 1.0);
        x += spacing;
        for (std::size_t i = 0; i < n; ++i) {
          const double xi = xs(i);
          if (xi >= x && xi < x + block_len) f.samples[i] = h;
        }
        x += block_len;
      }
      break;
    }
  }
  return f;
}

inline constexpr std::size_t kScanPoints = 11;
inline constexpr double kScanHalfWidth = 0.5;

/// Height of the base above the terrain at 11 points spanning +-0.5 m
/// around base_x in 0.1 m increments.
inline Vec height_scan(const HeightField& f, double base_x, double base_z) {
  Vec out(kScanPoints);
  for (std::size_t i = 0; i < kScanPoints; ++i) {
    const double dx = -kScanHalfWidth + 0.1 * static_cast<double>(i);
    out[i] = base_z - height_at(f, base_x + dx);
  }
  return out;
}

/// CSV export (x, height) for plotting.
inline std::string to_csv(const HeightField& f) {
  std::string out = "x,height\n";
  char buf[64];
  for (std::size_t i = 0; i < f.samples.size(); ++i) {
    std::snprintf(buf, sizeof(buf), "%.17g,%.17g\n",
                  f.x0 + f.spacing * static_cast<double>(i), f.samples[i]);
    out += buf;
  }
  return out;
}

}  // namespace bip::terrain
