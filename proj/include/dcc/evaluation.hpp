#pragma once

// ID / Style / Shape fidelity scores for generated caricatures.
//
// ID and Style are cosine similarities of image embeddings; Shape compares
// the edge map of the caricature with the conditioning sketch in the same
// embedding space.

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "dcc/image.hpp"
#include "dcc/rome_edit.hpp"
#include "json.hpp"

namespace dcc::eval {

class Embedder {
 public:
  virtual ~Embedder() = default;
  virtual std::vector<double> embed(const Image& image) const = 0;
  // Identifies the embedder (and version) in reports.
  virtual std::string name() const = 0;
};

// Fixed seeded projection of a downsampled RGB image mapped to [-1, 1].
// Only meaningful for exercising the pipeline.
class RandomProjectionEmbedder final : public Embedder {
 public:
  explicit RandomProjectionEmbedder(std::uint64_t seed = 0, std::size_t dim = 128, int side = 16)
      : seed_(seed), side_(side) {
    Rng rng(seed);
    projection_ = rng.normal_matrix(static_cast<std::size_t>(side * side * 3), dim,
                                    1.0 / std::sqrt(static_cast<double>(side * side * 3)));
  }

  std::vector<double> embed(const Image& image) const override {
    const Image small = resize_bilinear(to_rgb(image), side_, side_);
    Matrix x(1, small.data.size());
    for (std::size_t i = 0; i < small.data.size(); ++i) x.data[i] = 2.0 * small.data[i] - 1.0;
    return matmul(x, projection_).data;
  }

  std::string name() const override {
    return "random-projection-v1(seed=" + std::to_string(seed_) + ",dim=" + std::to_string(projection_.cols) +
           ",side=" + std::to_string(side_) + ")";
  }

 private:
  std::uint64_t seed_;
  int side_;
  Matrix projection_;
};

inline double embedding_score(const Image& a, const Image& b, const Embedder& embedder) {
  return rome::cosine_similarity(embedder.embed(a), embedder.embed(b));
}

inline constexpr const char* kEdgeExtractor = "sobel-otsu-v1";

// Otsu threshold of values in [0, max] over a 256-bin histogram.
inline double otsu_threshold(const std::vector<double>& values) {
  double hi = 0.0;
  for (double v : values) hi = std::max(hi, v);
  if (hi <= 0.0) return 0.0;
  std::vector<double> hist(256, 0.0);
  for (double v : values) hist[std::min<std::size_t>(255, static_cast<std::size_t>(v / hi * 255.0))] += 1.0;
  const double total = static_cast<double>(values.size());
  double sum_all = 0.0;
  for (int i = 0; i < 256; ++i) sum_all += i * hist[static_cast<std::size_t>(i)];
  double w0 = 0.0;
  double sum0 = 0.0;
  double best = -1.0;
  int best_bin = 0;
  for (int i = 0; i < 256; ++i) {
    w0 += hist[static_cast<std::size_t>(i)];
    sum0 += i * hist[static_cast<std::size_t>(i)];
    const double w1 = total - w0;
    if (w0 == 0.0 || w1 == 0.0) continue;
    const double m0 = sum0 / w0;
    const double m1 = (sum_all - sum0) / w1;
    const double between = w0 * w1 * (m0 - m1) * (m0 - m1);
    if (between > best) {
      best = between;
      best_bin = i;
    }
  }
  // Values in bins <= best_bin are background.
  return (best_bin + 1) / 255.0 * hi;
}

// Sobel gradient magnitude of the luminance, binarised with Otsu's threshold.
// Returns a single-channel image with values in {0, 1}.
inline Image edge_map(const Image& image) {
  const Image g = to_grayscale(image);
  const int w = g.width;
  const int h = g.height;
  auto px = [&](int x, int y) {
    x = std::clamp(x, 0, w - 1);
    y = std::clamp(y, 0, h - 1);
    return static_cast<double>(g.at(x, y, 0));
  };
  std::vector<double> mag(static_cast<std::size_t>(w) * h);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      const double gx = (px(x + 1, y - 1) + 2 * px(x + 1, y) + px(x + 1, y + 1)) -
                        (px(x - 1, y - 1) + 2 * px(x - 1, y) + px(x - 1, y + 1));
      const double gy = (px(x - 1, y + 1) + 2 * px(x, y + 1) + px(x + 1, y + 1)) -
                        (px(x - 1, y - 1) + 2 * px(x, y - 1) + px(x + 1, y - 1));
      mag[static_cast<std::size_t>(y) * w + x] = std::sqrt(gx * gx + gy * gy);
    }
  Image out(w, h, 1, 0.0f);
  const double t = otsu_threshold(mag);
  if (t <= 0.0) return out;
  for (std::size_t i = 0; i < mag.size(); ++i) out.data[i] = mag[i] >= t ? 1.0f : 0.0f;
  return out;
}

struct EvalTuple {
  std::filesystem::path identity;
  std::optional<std::filesystem::path> style;
  std::filesystem::path sketch;
  std::filesystem::path caricature;
};

// Manifest: {"tuples": [{"identity", "style"?, "sketch", "caricature"}]} or a
// bare array of such objects. Relative paths resolve against the manifest.
inline std::vector<EvalTuple> parse_manifest(const nlohmann::json& j, const std::filesystem::path& base = {}) {
  const nlohmann::json& list = j.is_array() ? j : j.at("tuples");
  if (!list.is_array()) throw FormatError("manifest: \"tuples\" must be an array");
  auto resolve = [&](const std::string& s) {
    std::filesystem::path p(s);
    return p.is_relative() && !base.empty() ? base / p : p;
  };
  std::vector<EvalTuple> out;
  for (const auto& item : list) {
    try {
      EvalTuple t;
      t.identity = resolve(item.at("identity").get<std::string>());
      if (item.contains("style") && !item.at("style").is_null()) t.style = resolve(item.at("style").get<std::string>());
      t.sketch = resolve(item.at("sketch").get<std::string>());
      t.caricature = resolve(item.at("caricature").get<std::string>());
      out.push_back(std::move(t));
    } catch (const nlohmann::json::exception& e) {
      throw FormatError("manifest entry " + std::to_string(out.size()) + ": " + e.what());
    }
  }
  return out;
}

inline std::vector<EvalTuple> load_manifest(const std::filesystem::path& path) {
  const auto bytes = read_file(path);
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(bytes.begin(), bytes.end());
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
  return parse_manifest(j, path.parent_path());
}

struct EvalRow {
  EvalTuple tuple;
  std::optional<double> id;
  std::optional<double> style;
  std::optional<double> shape;
  std::string error;
};

struct EvalReport {
  std::string embedder;
  std::string edge_extractor = kEdgeExtractor;
  std::vector<EvalRow> rows;
  std::optional<double> mean_id;
  std::optional<double> mean_style;
  std::optional<double> mean_shape;
  std::size_t failed = 0;
};

inline EvalRow evaluate_tuple(const EvalTuple& t, const Embedder& embedder) {
  EvalRow row;
  row.tuple = t;
  try {
    const Image caricature = read_image(t.caricature);
    row.id = embedding_score(caricature, read_image(t.identity), embedder);
    if (t.style) row.style = embedding_score(caricature, read_image(*t.style), embedder);
    row.shape = embedding_score(edge_map(caricature), normalise_sketch(read_image(t.sketch)), embedder);
  } catch (const std::exception& e) {
    row.id.reset();
    row.style.reset();
    row.shape.reset();
    row.error = e.what();
  }
  return row;
}

inline EvalReport evaluate_suite(const std::vector<EvalTuple>& tuples, const Embedder& embedder) {
  if (tuples.empty()) throw std::invalid_argument("evaluate_suite: no tuples to evaluate");
  EvalReport r;
  r.embedder = embedder.name();
  double sums[3] = {0, 0, 0};
  std::size_t counts[3] = {0, 0, 0};
  for (const auto& t : tuples) {
    r.rows.push_back(evaluate_tuple(t, embedder));
    const auto& row = r.rows.back();
    if (!row.error.empty()) {
      ++r.failed;
      continue;
    }
    const std::optional<double>* vals[3] = {&row.id, &row.style, &row.shape};
    for (int k = 0; k < 3; ++k)
      if (*vals[k]) {
        sums[k] += **vals[k];
        ++counts[k];
      }
  }
  auto mean = [&](int k) -> std::optional<double> {
    if (counts[k] == 0) return std::nullopt;
    return sums[k] / static_cast<double>(counts[k]);
  };
  r.mean_id = mean(0);
  r.mean_style = mean(1);
  r.mean_shape = mean(2);
  return r;
}

inline nlohmann::json report_to_json(const EvalReport& r) {
  auto opt = [](const std::optional<double>& v) { return v ? nlohmann::json(*v) : nlohmann::json(nullptr); };
  nlohmann::json rows = nlohmann::json::array();
  for (const auto& row : r.rows) {
    nlohmann::json j = {{"identity", row.tuple.identity.string()},
                        {"style_image", row.tuple.style ? nlohmann::json(row.tuple.style->string()) : nlohmann::json(nullptr)},
                        {"sketch", row.tuple.sketch.string()},
                        {"caricature", row.tuple.caricature.string()},
                        {"id", opt(row.id)},
                        {"style", opt(row.style)},
                        {"shape", opt(row.shape)}};
    if (!row.error.empty()) j["error"] = row.error;
    rows.push_back(std::move(j));
  }
  return {{"embedder", r.embedder},
          {"edge_extractor", r.edge_extractor},
          {"rows", rows},
          {"mean", {{"id", opt(r.mean_id)}, {"style", opt(r.mean_style)}, {"shape", opt(r.mean_shape)}}},
          {"count", r.rows.size()},
          {"failed", r.failed}};
}

inline std::string report_to_text(const EvalReport& r) {
  auto cell = [](const std::optional<double>& v) {
    char buf[32];
    if (v) std::snprintf(buf, sizeof buf, "%8.3f", *v);
    else std::snprintf(buf, sizeof buf, "%8s", "-");
    return std::string(buf);
  };
  std::string out = "embedder: " + r.embedder + "\nedges:    " + r.edge_extractor + "\n\n";
  char head[96];
  std::snprintf(head, sizeof head, "%-8s%8s%8s%8s\n", "row", "ID", "Style", "Shape");
  out += head;
  for (std::size_t i = 0; i < r.rows.size(); ++i) {
    const auto& row = r.rows[i];
    char label[16];
    std::snprintf(label, sizeof label, "%-8zu", i);
    out += label + cell(row.id) + cell(row.style) + cell(row.shape);
    if (!row.error.empty()) out += "  error: " + row.error;
    out += "\n";
  }
  char label[16];
  std::snprintf(label, sizeof label, "%-8s", "mean");
  out += label + cell(r.mean_id) + cell(r.mean_style) + cell(r.mean_shape) + "\n";
  return out;
}

}  // namespace dcc::eval
