#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include <zlib.h>

#include "hyperlora/errors.hpp"
#include "hyperlora/rng.hpp"
#include "hyperlora/serialize.hpp"
#include "hyperlora/tensor.hpp"

namespace hyperlora {

// ---------------------------------------------------------------------------
// Weight-space visualization: flattened adapters are projected to 2D with a
// seeded t-SNE and exported as a CSV plus a PNG scatter plot.
// ---------------------------------------------------------------------------

struct WeightMapEntry {
  std::string label;    // e.g. "reverse/ft_0031"
  std::string task_id;  // cluster key
  bool generated = false;
  std::vector<float> weights;  // flattened adapter
};

struct WeightMapPoint {
  std::string label;
  std::string task_id;
  bool generated = false;
  double x = 0.0, y = 0.0;
};

struct TsneConfig {
  double perplexity = 8.0;
  int iters = 500;
  double learning_rate = 10.0;
  double early_exaggeration = 12.0;
  int exaggeration_iters = 100;
  double initial_momentum = 0.5;
  double final_momentum = 0.8;
};

namespace detail {

// Binary search the Gaussian precision for one row so the conditional
// distribution hits the target perplexity.
inline void calibrate_row(const std::vector<double>& d2_row, std::size_t i,
                          double target_entropy, std::vector<double>& p_row) {
  double beta = 1.0, beta_min = 0.0, beta_max = 0.0;
  bool has_min = false, has_max = false;
  const std::size_t n = d2_row.size();
  for (int it = 0; it < 60; ++it) {
    double sum = 0.0, dot = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      if (j == i) {
        p_row[j] = 0.0;
        continue;
      }
      const double pj = std::exp(-beta * d2_row[j]);
      p_row[j] = pj;
      sum += pj;
      dot += pj * d2_row[j];
    }
    if (sum <= 0.0) {
      // all other points infinitely far; fall back to uniform
      for (std::size_t j = 0; j < n; ++j) p_row[j] = j == i ? 0.0 : 1.0;
      sum = static_cast<double>(n - 1);
      for (std::size_t j = 0; j < n; ++j) p_row[j] /= sum;
      return;
    }
    const double entropy = std::log(sum) + beta * dot / sum;
    const double diff = entropy - target_entropy;
    if (std::abs(diff) < 1e-7) break;
    if (diff > 0) {
      beta_min = beta;
      has_min = true;
      beta = has_max ? (beta + beta_max) / 2.0 : beta * 2.0;
    } else {
      beta_max = beta;
      has_max = true;
      beta = has_min ? (beta + beta_min) / 2.0 : beta / 2.0;
    }
  }
  double sum = 0.0;
  for (std::size_t j = 0; j < n; ++j) sum += p_row[j];
  for (std::size_t j = 0; j < n; ++j) p_row[j] /= sum;
}

// Classical MDS on a squared-distance matrix: top-2 eigenpairs of the
// double-centered Gram matrix via power iteration. Rows with identical
// inputs get bitwise-identical coordinates, which keeps exact duplicates
// coincident through the whole optimization.
inline void mds_init(const std::vector<std::vector<double>>& d2,
                     const std::vector<std::uint64_t>& row_hashes,
                     std::uint64_t seed, std::vector<double>& yx,
                     std::vector<double>& yy) {
  const std::size_t n = d2.size();
  // B = -1/2 * J D^2 J with J = I - 11^T/n
  std::vector<double> row_mean(n, 0.0);
  double grand = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) row_mean[i] += d2[i][j];
    row_mean[i] /= static_cast<double>(n);
    grand += row_mean[i];
  }
  grand /= static_cast<double>(n);
  std::vector<std::vector<double>> b(n, std::vector<double>(n));
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j)
      b[i][j] = -0.5 * (d2[i][j] - row_mean[i] - row_mean[j] + grand);

  auto power_iter = [&](std::vector<double>& v) {
    double lambda = 0.0;
    std::vector<double> w(n);
    for (int it = 0; it < 200; ++it) {
      for (std::size_t i = 0; i < n; ++i) {
        double s = 0.0;
        for (std::size_t j = 0; j < n; ++j) s += b[i][j] * v[j];
        w[i] = s;
      }
      double norm = 0.0;
      for (double x : w) norm += x * x;
      norm = std::sqrt(norm);
      if (norm < 1e-30) return 0.0;
      for (std::size_t i = 0; i < n; ++i) v[i] = w[i] / norm;
      lambda = norm;
    }
    return lambda;
  };
  // Content-derived start vectors keep duplicate rows exactly equal.
  std::vector<double> v1(n), v2(n);
  for (std::size_t i = 0; i < n; ++i) {
    v1[i] = 1.0 + 1e-3 * static_cast<double>(row_hashes[i] % 1009);
    v2[i] = 1.0 + 1e-3 * static_cast<double>((row_hashes[i] >> 13) % 1013);
  }
  const double l1 = power_iter(v1);
  if (l1 > 0.0) {
    // deflate and find the second component
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < n; ++j) b[i][j] -= l1 * v1[i] * v1[j];
  }
  const double l2 = power_iter(v2);

  double max_abs = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    yx[i] = v1[i] * std::sqrt(std::max(l1, 0.0));
    yy[i] = v2[i] * std::sqrt(std::max(l2, 0.0));
    max_abs = std::max({max_abs, std::abs(yx[i]), std::abs(yy[i])});
  }
  if (max_abs < 1e-30) {
    // fully degenerate input (all rows identical): seeded random spread
    Rng rng(derive_seed(seed, "weight_map/fallback"));
    for (std::size_t i = 0; i < n; ++i) {
      yx[i] = rng.normal() * 1e-2;
      yy[i] = rng.normal() * 1e-2;
    }
    return;
  }
  for (std::size_t i = 0; i < n; ++i) {
    yx[i] = yx[i] / max_abs * 1e-2;
    yy[i] = yy[i] / max_abs * 1e-2;
    // Seeded jitter derived from the row content, so identical rows move
    // identically while different seeds explore different optima.
    Rng jit(derive_seed(seed, "weight_map/jitter/" + hash_hex(row_hashes[i])));
    yx[i] += jit.normal() * 1e-4;
    yy[i] += jit.normal() * 1e-4;
  }
}

}  // namespace detail

// Deterministic t-SNE on row vectors; returns n 2D points.
inline std::vector<std::pair<double, double>> tsne_embed(
    const std::vector<std::vector<float>>& rows, std::uint64_t seed,
    const TsneConfig& cfg = {}) {
  const std::size_t n = rows.size();
  if (n < 3) throw DomainError("weight map needs at least 3 points");
  for (const auto& r : rows)
    if (r.size() != rows[0].size())
      throw StructuralError("weight map rows have mixed lengths");

  // pairwise squared distances
  std::vector<std::vector<double>> d2(n, std::vector<double>(n, 0.0));
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i + 1; j < n; ++j) {
      double s = 0.0;
      for (std::size_t k = 0; k < rows[i].size(); ++k) {
        const double d = static_cast<double>(rows[i][k]) -
                         static_cast<double>(rows[j][k]);
        s += d * d;
      }
      d2[i][j] = d2[j][i] = s;
    }

  // conditional then symmetrized affinities
  const double perplexity =
      std::min(cfg.perplexity, static_cast<double>(n - 1) / 3.0);
  const double target_entropy = std::log(std::max(perplexity, 1.01));
  std::vector<std::vector<double>> p(n, std::vector<double>(n, 0.0));
  for (std::size_t i = 0; i < n; ++i)
    detail::calibrate_row(d2[i], i, target_entropy, p[i]);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i + 1; j < n; ++j) {
      const double v = std::max((p[i][j] + p[j][i]) / (2.0 * n), 1e-12);
      p[i][j] = p[j][i] = v;
    }

  std::vector<std::uint64_t> row_hashes(n);
  for (std::size_t i = 0; i < n; ++i)
    row_hashes[i] = fnv1a64_bytes(rows[i].data(),
                                  rows[i].size() * sizeof(float));
  std::vector<double> yx(n), yy(n), gx(n), gy(n), vx(n, 0.0), vy(n, 0.0);
  detail::mds_init(d2, row_hashes, seed, yx, yy);

  for (int iter = 0; iter < cfg.iters; ++iter) {
    const double exa = iter < cfg.exaggeration_iters ? cfg.early_exaggeration
                                                     : 1.0;
    // Student-t affinities in the embedding
    std::vector<std::vector<double>> num(n, std::vector<double>(n, 0.0));
    double qsum = 0.0;
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = i + 1; j < n; ++j) {
        const double dx = yx[i] - yx[j], dy = yy[i] - yy[j];
        const double v = 1.0 / (1.0 + dx * dx + dy * dy);
        num[i][j] = num[j][i] = v;
        qsum += 2.0 * v;
      }
    qsum = std::max(qsum, 1e-12);

    for (std::size_t i = 0; i < n; ++i) {
      gx[i] = gy[i] = 0.0;
      for (std::size_t j = 0; j < n; ++j) {
        if (j == i) continue;
        const double q = std::max(num[i][j] / qsum, 1e-12);
        const double mult = (exa * p[i][j] - q) * num[i][j];
        gx[i] += 4.0 * mult * (yx[i] - yx[j]);
        gy[i] += 4.0 * mult * (yy[i] - yy[j]);
      }
    }
    const double momentum = iter < cfg.exaggeration_iters
                                ? cfg.initial_momentum
                                : cfg.final_momentum;
    for (std::size_t i = 0; i < n; ++i) {
      vx[i] = momentum * vx[i] - cfg.learning_rate * gx[i];
      vy[i] = momentum * vy[i] - cfg.learning_rate * gy[i];
      yx[i] += vx[i];
      yy[i] += vy[i];
    }
    // re-center to keep coordinates bounded
    double mx = 0.0, my = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      mx += yx[i];
      my += yy[i];
    }
    mx /= static_cast<double>(n);
    my /= static_cast<double>(n);
    for (std::size_t i = 0; i < n; ++i) {
      yx[i] -= mx;
      yy[i] -= my;
    }
  }

  std::vector<std::pair<double, double>> out(n);
  for (std::size_t i = 0; i < n; ++i) out[i] = {yx[i], yy[i]};
  return out;
}

// Mean pairwise 2D distance within tasks vs across tasks.
struct ClusterStats {
  double intra = 0.0;
  double inter = 0.0;
};

inline ClusterStats cluster_distances(const std::vector<WeightMapPoint>& pts) {
  double intra = 0.0, inter = 0.0;
  std::int64_t n_intra = 0, n_inter = 0;
  for (std::size_t i = 0; i < pts.size(); ++i)
    for (std::size_t j = i + 1; j < pts.size(); ++j) {
      const double d = std::hypot(pts[i].x - pts[j].x, pts[i].y - pts[j].y);
      if (pts[i].task_id == pts[j].task_id) {
        intra += d;
        ++n_intra;
      } else {
        inter += d;
        ++n_inter;
      }
    }
  ClusterStats s;
  if (n_intra > 0) s.intra = intra / static_cast<double>(n_intra);
  if (n_inter > 0) s.inter = inter / static_cast<double>(n_inter);
  return s;
}

// ---------------------------------------------------------------------------
// PNG scatter plot (8-bit RGB, zlib-compressed)
// ---------------------------------------------------------------------------

namespace detail {

inline void png_put_u32(std::string& s, std::uint32_t v) {
  s.push_back(static_cast<char>((v >> 24) & 0xff));
  s.push_back(static_cast<char>((v >> 16) & 0xff));
  s.push_back(static_cast<char>((v >> 8) & 0xff));
  s.push_back(static_cast<char>(v & 0xff));
}

inline void png_chunk(std::string& out, const char type[4],
                      const std::string& data) {
  png_put_u32(out, static_cast<std::uint32_t>(data.size()));
  std::string body(type, 4);
  body += data;
  out += body;
  const auto crc =
      crc32(0L, reinterpret_cast<const Bytef*>(body.data()),
            static_cast<uInt>(body.size()));
  png_put_u32(out, static_cast<std::uint32_t>(crc));
}

}  // namespace detail

// rgb is row-major, 3 bytes per pixel.
inline void write_png_rgb(const std::filesystem::path& path, int width,
                          int height, const std::vector<std::uint8_t>& rgb) {
  if (width < 1 || height < 1 ||
      rgb.size() != static_cast<std::size_t>(width) * height * 3)
    throw DomainError("png buffer does not match its dimensions");

  std::string raw;
  raw.reserve(rgb.size() + static_cast<std::size_t>(height));
  for (int y = 0; y < height; ++y) {
    raw.push_back('\0');  // filter type 0 per scanline
    raw.append(reinterpret_cast<const char*>(&rgb[static_cast<std::size_t>(y) *
                                                  width * 3]),
               static_cast<std::size_t>(width) * 3);
  }
  uLongf bound = compressBound(static_cast<uLong>(raw.size()));
  std::string compressed(bound, '\0');
  if (compress2(reinterpret_cast<Bytef*>(compressed.data()), &bound,
                reinterpret_cast<const Bytef*>(raw.data()),
                static_cast<uLong>(raw.size()), 9) != Z_OK)
    throw IoError("png compression failed");
  compressed.resize(bound);

  std::string png("\x89PNG\r\n\x1a\n", 8);
  std::string ihdr;
  detail::png_put_u32(ihdr, static_cast<std::uint32_t>(width));
  detail::png_put_u32(ihdr, static_cast<std::uint32_t>(height));
  ihdr.push_back(8);   // bit depth
  ihdr.push_back(2);   // color type: truecolor
  ihdr.push_back(0);   // compression
  ihdr.push_back(0);   // filter
  ihdr.push_back(0);   // interlace
  detail::png_chunk(png, "IHDR", ihdr);
  detail::png_chunk(png, "IDAT", compressed);
  detail::png_chunk(png, "IEND", "");
  write_file(path, png);
}

namespace detail {

struct Rgb {
  std::uint8_t r, g, b;
};

inline Rgb task_color(std::size_t index) {
  static const Rgb palette[] = {
      {31, 119, 180}, {255, 127, 14},  {44, 160, 44},  {214, 39, 40},
      {148, 103, 189}, {140, 86, 75},  {227, 119, 194}, {127, 127, 127},
      {188, 189, 34}, {23, 190, 207},
  };
  return palette[index % (sizeof(palette) / sizeof(palette[0]))];
}

inline void draw_disc(std::vector<std::uint8_t>& rgb, int width, int height,
                      double cx, double cy, double radius, Rgb color) {
  const int x0 = std::max(0, static_cast<int>(cx - radius) - 1);
  const int x1 = std::min(width - 1, static_cast<int>(cx + radius) + 1);
  const int y0 = std::max(0, static_cast<int>(cy - radius) - 1);
  const int y1 = std::min(height - 1, static_cast<int>(cy + radius) + 1);
  for (int y = y0; y <= y1; ++y)
    for (int x = x0; x <= x1; ++x) {
      const double dx = x - cx, dy = y - cy;
      if (dx * dx + dy * dy > radius * radius) continue;
      auto* px = &rgb[(static_cast<std::size_t>(y) * width + x) * 3];
      px[0] = color.r;
      px[1] = color.g;
      px[2] = color.b;
    }
}

}  // namespace detail

// Renders the scatter: one color per task, generated points as rings.
inline void render_weight_map_png(const std::filesystem::path& path,
                                  const std::vector<WeightMapPoint>& pts,
                                  int width = 640, int height = 480) {
  std::vector<std::uint8_t> rgb(static_cast<std::size_t>(width) * height * 3,
                                255);
  double xmin = 0, xmax = 0, ymin = 0, ymax = 0;
  bool first = true;
  for (const auto& p : pts) {
    if (first) {
      xmin = xmax = p.x;
      ymin = ymax = p.y;
      first = false;
    }
    xmin = std::min(xmin, p.x);
    xmax = std::max(xmax, p.x);
    ymin = std::min(ymin, p.y);
    ymax = std::max(ymax, p.y);
  }
  const double xspan = std::max(xmax - xmin, 1e-9);
  const double yspan = std::max(ymax - ymin, 1e-9);
  const double margin = 30.0;
  auto px = [&](double x) {
    return margin + (x - xmin) / xspan * (width - 2 * margin);
  };
  auto py = [&](double y) {
    return margin + (ymax - y) / yspan * (height - 2 * margin);
  };

  std::map<std::string, std::size_t> task_index;
  for (const auto& p : pts)
    if (!task_index.count(p.task_id))
      task_index.emplace(p.task_id, task_index.size());

  for (const auto& p : pts) {
    const detail::Rgb c = detail::task_color(task_index[p.task_id]);
    if (p.generated) {
      detail::draw_disc(rgb, width, height, px(p.x), py(p.y), 7.0, c);
      detail::draw_disc(rgb, width, height, px(p.x), py(p.y), 3.5,
                        {255, 255, 255});
    } else {
      detail::draw_disc(rgb, width, height, px(p.x), py(p.y), 4.0, c);
    }
  }
  write_png_rgb(path, width, height, rgb);
}

// Projects the entries and writes <stem>.csv and <stem>.png next to each
// other. Returns the projected points in entry order.
inline std::vector<WeightMapPoint> export_weight_map(
    const std::vector<WeightMapEntry>& entries,
    const std::filesystem::path& stem, std::uint64_t seed,
    const TsneConfig& cfg = {}) {
  std::vector<std::vector<float>> rows;
  rows.reserve(entries.size());
  for (const auto& e : entries) rows.push_back(e.weights);
  auto coords = tsne_embed(rows, seed, cfg);

  std::vector<WeightMapPoint> pts(entries.size());
  for (std::size_t i = 0; i < entries.size(); ++i) {
    pts[i].label = entries[i].label;
    pts[i].task_id = entries[i].task_id;
    pts[i].generated = entries[i].generated;
    pts[i].x = coords[i].first;
    pts[i].y = coords[i].second;
  }

  std::string csv = "label,task_id,kind,x,y\n";
  for (const auto& p : pts) {
    char line[256];
    std::snprintf(line, sizeof line, "%s,%s,%s,%.10g,%.10g\n",
                  p.label.c_str(), p.task_id.c_str(),
                  p.generated ? "generated" : "checkpoint", p.x, p.y);
    csv += line;
  }
  write_file(stem.string() + ".csv", csv);
  render_weight_map_png(stem.string() + ".png", pts);
  return pts;
}

}  // namespace hyperlora
