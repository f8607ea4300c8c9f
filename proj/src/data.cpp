#include "poseroi/data.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <sstream>

#include <json.hpp>

#include "poseroi/error.hpp"

namespace poseroi {

namespace {

using nlohmann::json;
namespace fs = std::filesystem;

// A JSON value together with its path from the document root, so every schema
// complaint can say where it happened.
struct Node {
  const json& value;
  std::string path;

  [[noreturn]] void fail(const std::string& what) const { throw DataError(path + ": " + what); }

  bool has(const char* key) const { return value.is_object() && value.contains(key); }

  Node field(const char* key) const {
    if (!value.is_object()) fail("expected an object");
    const auto it = value.find(key);
    if (it == value.end()) throw DataError(path + "." + key + ": missing");
    return {*it, path + "." + key};
  }

  Node item(std::size_t i) const { return {value[i], path + "[" + std::to_string(i) + "]"}; }

  const json& array() const {
    if (!value.is_array()) fail("expected an array");
    return value;
  }

  double number() const {
    if (!value.is_number()) fail("expected a number");
    const double v = value.get<double>();
    if (!std::isfinite(v)) fail("expected a finite number");
    return v;
  }

  long long integer() const {
    if (!value.is_number_integer() && !value.is_number_unsigned()) {
      if (value.is_number_float()) {
        const double v = value.get<double>();
        if (v == std::floor(v) && std::abs(v) < 9.0e15) return static_cast<long long>(v);
      }
      fail("expected an integer");
    }
    return value.get<long long>();
  }

  int small_int() const {
    const long long v = integer();
    if (v < INT32_MIN || v > INT32_MAX) fail("integer out of range");
    return static_cast<int>(v);
  }

  std::string string() const {
    if (!value.is_string()) fail("expected a string");
    return value.get<std::string>();
  }
};

std::string read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path.string());
  std::ostringstream out;
  out << in.rdbuf();
  if (in.bad()) throw DataError("cannot read " + path.string());
  return std::move(out).str();
}

void write_file(const fs::path& path, std::string_view bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot write " + path.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  out.close();
  if (!out) throw DataError("cannot write " + path.string());
}

int person_category(const Node& root) {
  if (!root.has("categories")) return 1;
  const Node categories = root.field("categories");
  const json& list = categories.array();
  for (std::size_t i = 0; i < list.size(); ++i) {
    const Node c = categories.item(i);
    if (c.has("name") && c.field("name").string() == "person") return c.field("id").small_int();
  }
  categories.fail("no \"person\" category");
}

Annotation parse_annotation(const Node& a) {
  Annotation out;
  out.id = a.has("id") ? a.field("id").small_int() : 0;

  const Node bbox = a.field("bbox");
  if (bbox.array().size() != 4) bbox.fail("expected 4 numbers [x, y, w, h], got " + std::to_string(bbox.value.size()));
  const double x = bbox.item(0).number(), y = bbox.item(1).number();
  const double w = bbox.item(2).number(), h = bbox.item(3).number();
  if (!(w > 0.0 && h > 0.0)) bbox.fail("width and height must be positive");
  out.box = {x, y, x + w, y + h};

  const Node kps = a.field("keypoints");
  if (kps.array().size() != 3 * kNumKeypoints) {
    kps.fail("expected " + std::to_string(3 * kNumKeypoints) + " numbers, got " + std::to_string(kps.value.size()));
  }
  for (int k = 0; k < kNumKeypoints; ++k) {
    const int v = static_cast<int>(kps.item(3 * k + 2).integer());
    if (v < 0 || v > 2) kps.item(3 * k + 2).fail("visibility must be 0, 1 or 2");
    out.keypoints[k] = {kps.item(3 * k).number(), kps.item(3 * k + 1).number(), v > 0 ? 1.0 : 0.0, v};
  }

  out.area = a.has("area") ? a.field("area").number() : out.box.area();
  if (!(out.area > 0.0)) out.area = out.box.area();
  return out;
}

int labeled_in(const Node& a, const Annotation& parsed) {
  if (a.has("num_keypoints")) return a.field("num_keypoints").small_int();
  return labeled_count(parsed.keypoints);
}

}  // namespace

std::size_t Dataset::annotation_count() const {
  std::size_t n = 0;
  for (const ImageRecord& r : images) n += r.annotations.size();
  return n;
}

std::uint64_t fnv1a(std::span<const std::byte> bytes, std::uint64_t seed) {
  std::uint64_t h = seed;
  for (std::byte b : bytes) {
    h ^= static_cast<std::uint64_t>(b);
    h *= 1099511628211ull;
  }
  return h;
}

std::uint64_t fnv1a(std::string_view bytes) { return fnv1a(std::as_bytes(std::span(bytes.data(), bytes.size()))); }

std::string hex64(std::uint64_t value) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(value));
  return buf;
}

Dataset parse_coco_json(std::string_view text, const fs::path& image_root) {
  json doc;
  try {
    doc = json::parse(text);
  } catch (const json::parse_error& e) {
    throw DataError(std::string("$: not valid JSON: ") + e.what());
  }
  const Node root{doc, "$"};
  if (!doc.is_object()) root.fail("expected an object");
  const int person = person_category(root);

  Dataset out;
  std::map<int, std::size_t> by_id;
  const Node images = root.field("images");
  for (std::size_t i = 0; i < images.array().size(); ++i) {
    const Node im = images.item(i);
    ImageRecord r;
    r.id = im.field("id").small_int();
    r.file_name = im.has("file_name") ? im.field("file_name").string() : std::string();
    if (!im.has("width") || !im.has("height")) im.fail("missing image size (width/height)");
    r.size = {im.field("width").small_int(), im.field("height").small_int()};
    if (r.size.width <= 0 || r.size.height <= 0) im.fail("image size must be positive");
    if (!by_id.emplace(r.id, out.images.size()).second) im.field("id").fail("duplicate image id");
    out.images.push_back(std::move(r));
  }

  const Node annotations = root.field("annotations");
  for (std::size_t i = 0; i < annotations.array().size(); ++i) {
    const Node a = annotations.item(i);
    if (a.has("category_id") && a.field("category_id").small_int() != person) continue;
    if (a.has("iscrowd") && a.field("iscrowd").integer() != 0) continue;
    const int image_id = a.field("image_id").small_int();
    const auto it = by_id.find(image_id);
    if (it == by_id.end()) a.field("image_id").fail("unknown image id " + std::to_string(image_id));
    Annotation parsed = parse_annotation(a);
    if (labeled_in(a, parsed) == 0) continue;
    ImageRecord& r = out.images[it->second];
    const Box& b = parsed.box;
    if (b.x2 <= 0.0 || b.y2 <= 0.0 || b.x1 >= r.size.width || b.y1 >= r.size.height) {
      a.field("bbox").fail("box does not intersect its image");
    }
    r.annotations.push_back(parsed);
  }

  if (!image_root.empty()) {
    for (ImageRecord& r : out.images) {
      r.pixels = read_ppm(image_root / r.file_name);
      if (r.pixels.dim(1) != r.size.height || r.pixels.dim(2) != r.size.width) {
        throw DataError(r.file_name + ": image is " + std::to_string(r.pixels.dim(2)) + "x" +
                        std::to_string(r.pixels.dim(1)) + " but annotations say " + std::to_string(r.size.width) +
                        "x" + std::to_string(r.size.height));
      }
    }
  }
  return out;
}

Dataset load_coco_json(const fs::path& path, const fs::path& image_root) {
  try {
    return parse_coco_json(read_file(path), image_root);
  } catch (const DataError& e) {
    throw DataError(path.string() + ": " + e.what());
  }
}

std::string to_coco_json(const Dataset& dataset) {
  json images = json::array(), annotations = json::array();
  int next_id = 1;
  for (const ImageRecord& r : dataset.images) {
    images.push_back({{"id", r.id}, {"file_name", r.file_name}, {"width", r.size.width}, {"height", r.size.height}});
    for (const Annotation& a : r.annotations) {
      json kps = json::array();
      for (const Keypoint& k : a.keypoints) {
        kps.push_back(k.x);
        kps.push_back(k.y);
        kps.push_back(k.visibility);
      }
      annotations.push_back({{"id", a.id != 0 ? a.id : next_id},
                             {"image_id", r.id},
                             {"category_id", 1},
                             {"iscrowd", 0},
                             {"bbox", {a.box.x1, a.box.y1, a.box.width(), a.box.height()}},
                             {"area", a.area},
                             {"num_keypoints", labeled_count(a.keypoints)},
                             {"keypoints", std::move(kps)}});
      ++next_id;
    }
  }
  json names = json::array();
  for (std::string_view n : kKeypointNames) names.push_back(std::string(n));
  const json skeleton = {{16, 14}, {14, 12}, {17, 15}, {15, 13}, {12, 13}, {6, 12}, {7, 13}, {6, 7}, {6, 8}, {7, 9},
                         {8, 10}, {9, 11}, {2, 3},   {1, 2},   {1, 3},   {2, 4}, {3, 5}, {4, 6}, {5, 7}};
  const json doc = {
      {"images", std::move(images)},
      {"annotations", std::move(annotations)},
      {"categories",
       {{{"id", 1}, {"name", "person"}, {"supercategory", "person"}, {"keypoints", names}, {"skeleton", skeleton}}}}};
  return doc.dump(1);
}

Tensor read_ppm(const fs::path& path) {
  const std::string bytes = read_file(path);
  std::size_t pos = 0;
  const auto fail = [&](const std::string& what) -> void { throw DataError(path.string() + ": " + what); };
  const auto token = [&]() {
    for (;;) {
      while (pos < bytes.size() && std::isspace(static_cast<unsigned char>(bytes[pos]))) ++pos;
      if (pos < bytes.size() && bytes[pos] == '#') {
        while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
        continue;
      }
      break;
    }
    const std::size_t start = pos;
    while (pos < bytes.size() && !std::isspace(static_cast<unsigned char>(bytes[pos]))) ++pos;
    return bytes.substr(start, pos - start);
  };
  const auto number = [&]() {
    const std::string t = token();
    if (t.empty() || !std::all_of(t.begin(), t.end(), [](char c) { return c >= '0' && c <= '9'; }) ||
        t.size() > 6) {
      fail("malformed PPM header");
    }
    return std::stoi(t);
  };
  if (token() != "P6") fail("not a binary PPM (P6)");
  const int w = number(), h = number(), maxval = number();
  if (w <= 0 || h <= 0) fail("image size must be positive");
  if (maxval != 255) fail("only maxval 255 is supported");
  ++pos;  // single whitespace before the raster
  const std::size_t plane = static_cast<std::size_t>(w) * h;
  if (bytes.size() < pos + 3 * plane) fail("truncated pixel data");
  Tensor out({3, h, w});
  for (std::size_t i = 0; i < plane; ++i) {
    for (std::size_t c = 0; c < 3; ++c) {
      out[c * plane + i] = static_cast<unsigned char>(bytes[pos + 3 * i + c]) / 255.0;
    }
  }
  return out;
}

void write_ppm(const fs::path& path, const Tensor& pixels) {
  if (pixels.rank() != 3 || pixels.dim(0) != 3) throw ShapeError("write_ppm: expected 3 x H x W, got " + to_string(pixels.shape()));
  const int h = pixels.dim(1), w = pixels.dim(2);
  const std::size_t plane = static_cast<std::size_t>(w) * h;
  std::string bytes = "P6\n" + std::to_string(w) + " " + std::to_string(h) + "\n255\n";
  const std::size_t header = bytes.size();
  bytes.resize(header + 3 * plane);
  for (std::size_t i = 0; i < plane; ++i) {
    for (std::size_t c = 0; c < 3; ++c) {
      const double v = std::clamp(pixels[c * plane + i], 0.0, 1.0);
      bytes[header + 3 * i + c] = static_cast<char>(static_cast<unsigned char>(std::lround(v * 255.0)));
    }
  }
  write_file(path, bytes);
}

bool extremity_near_border(const Annotation& a, double fraction) {
  static constexpr int kExtremities[] = {7, 8, 9, 10, 15, 16};  // elbows, wrists, ankles
  const Box& b = a.box;
  const double mx = fraction * b.width(), my = fraction * b.height();
  for (int k : kExtremities) {
    const Keypoint& p = a.keypoints[k];
    if (!p.labeled()) continue;
    if (p.x - b.x1 <= mx || b.x2 - p.x <= mx || p.y - b.y1 <= my || b.y2 - p.y <= my) return true;
  }
  return false;
}

ImageRecord flip_horizontal(const ImageRecord& record) {
  ImageRecord out = record;
  const double width = record.size.width;
  if (!record.pixels.empty()) {
    const int c = record.pixels.dim(0), h = record.pixels.dim(1), w = record.pixels.dim(2);
    for (int ch = 0; ch < c; ++ch) {
      for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) out.pixels.at(ch, y, x) = record.pixels.at(ch, y, w - 1 - x);
      }
    }
  }
  for (std::size_t i = 0; i < record.annotations.size(); ++i) {
    const Annotation& a = record.annotations[i];
    Annotation& f = out.annotations[i];
    f.box.x1 = width - a.box.x2;
    f.box.x2 = width - a.box.x1;
    for (int k = 0; k < kNumKeypoints; ++k) {
      Keypoint p = a.keypoints[k];
      if (p.labeled()) p.x = width - p.x;
      f.keypoints[kFlipIndex[k]] = p;
    }
  }
  return out;
}

ImageRecord augment(const ImageRecord& record, double flip_probability, Rng& rng) {
  if (!(flip_probability >= 0.0 && flip_probability <= 1.0)) {
    throw ConfigError("augment: flip probability must lie in [0, 1]");
  }
  const bool flip = std::uniform_real_distribution<double>(0.0, 1.0)(rng) < flip_probability;
  return flip ? flip_horizontal(record) : record;
}

ImageRecord resize_shorter_side(const ImageRecord& record, int shorter_side, int max_side) {
  if (shorter_side <= 0 || max_side < shorter_side) throw ConfigError("resize: need 0 < shorter_side <= max_side");
  const int w = record.size.width, h = record.size.height;
  double s = static_cast<double>(shorter_side) / std::min(w, h);
  if (s * std::max(w, h) > max_side) s = static_cast<double>(max_side) / std::max(w, h);
  const int nw = std::max(1, static_cast<int>(std::lround(w * s)));
  const int nh = std::max(1, static_cast<int>(std::lround(h * s)));
  const double sx = static_cast<double>(nw) / w, sy = static_cast<double>(nh) / h;

  ImageRecord out = record;
  out.size = {nw, nh};
  if (!record.pixels.empty()) {
    const int c = record.pixels.dim(0);
    out.pixels = Tensor({c, nh, nw});
    for (int y = 0; y < nh; ++y) {
      const double fy = std::clamp((y + 0.5) / sy - 0.5, 0.0, h - 1.0);
      const int y0 = static_cast<int>(fy), y1 = std::min(y0 + 1, h - 1);
      const double ty = fy - y0;
      for (int x = 0; x < nw; ++x) {
        const double fx = std::clamp((x + 0.5) / sx - 0.5, 0.0, w - 1.0);
        const int x0 = static_cast<int>(fx), x1 = std::min(x0 + 1, w - 1);
        const double tx = fx - x0;
        for (int ch = 0; ch < c; ++ch) {
          const Tensor& p = record.pixels;
          out.pixels.at(ch, y, x) = (1 - ty) * ((1 - tx) * p.at(ch, y0, x0) + tx * p.at(ch, y0, x1)) +
                                    ty * ((1 - tx) * p.at(ch, y1, x0) + tx * p.at(ch, y1, x1));
        }
      }
    }
  }
  for (Annotation& a : out.annotations) {
    a.box = {a.box.x1 * sx, a.box.y1 * sy, a.box.x2 * sx, a.box.y2 * sy, a.box.score, a.box.magnification};
    a.area *= sx * sy;
    for (Keypoint& k : a.keypoints) {
      if (!k.labeled()) continue;
      k.x *= sx;
      k.y *= sy;
    }
  }
  return out;
}

ImageRecord pad_to_multiple(const ImageRecord& record, int multiple) {
  if (multiple <= 0) throw ConfigError("pad_to_multiple: multiple must be positive");
  if (record.pixels.empty()) return record;
  const int c = record.pixels.dim(0), h = record.pixels.dim(1), w = record.pixels.dim(2);
  const int ph = (h + multiple - 1) / multiple * multiple, pw = (w + multiple - 1) / multiple * multiple;
  if (ph == h && pw == w) return record;
  ImageRecord out = record;
  out.pixels = Tensor({c, ph, pw});
  for (int ch = 0; ch < c; ++ch) {
    for (int y = 0; y < h; ++y) {
      for (int x = 0; x < w; ++x) out.pixels.at(ch, y, x) = record.pixels.at(ch, y, x);
    }
  }
  // Annotations keep their coordinates; `size` stays the original extent so
  // flips and evaluation still refer to the real image.
  return out;
}

Manifest write_dataset(const fs::path& dir, const Dataset& dataset, const std::string& source_json) {
  fs::create_directories(dir / "images");
  Dataset named = dataset;
  for (ImageRecord& r : named.images) {
    if (r.pixels.empty()) throw DataError("write_dataset: image " + std::to_string(r.id) + " has no pixels");
    if (r.file_name.empty()) {
      char buf[32];
      std::snprintf(buf, sizeof buf, "%06d.ppm", r.id);
      r.file_name = buf;
    }
  }

  Manifest manifest;
  manifest.source = source_json;
  const auto record = [&](const std::string& rel) {
    const std::string bytes = read_file(dir / rel);
    manifest.files.push_back({rel, bytes.size(), hex64(fnv1a(bytes))});
  };
  for (const ImageRecord& r : named.images) {
    write_ppm(dir / "images" / r.file_name, r.pixels);
    record("images/" + r.file_name);
  }
  write_file(dir / "annotations.json", to_coco_json(named));
  record("annotations.json");

  std::sort(manifest.files.begin(), manifest.files.end(),
            [](const Manifest::Entry& a, const Manifest::Entry& b) { return a.path < b.path; });
  std::string listing;
  for (const auto& f : manifest.files) listing += f.path + " " + f.fnv1a + "\n";
  manifest.hash = hex64(fnv1a(listing));

  json files = json::array();
  for (const auto& f : manifest.files) files.push_back({{"path", f.path}, {"bytes", f.bytes}, {"fnv1a", f.fnv1a}});
  json source = source_json.empty() ? json::object() : json::parse(source_json);
  const json doc = {{"format", "poseroi-dataset 1"},
                    {"images", named.images.size()},
                    {"annotations", named.annotation_count()},
                    {"files", std::move(files)},
                    {"hash", manifest.hash},
                    {"source", std::move(source)}};
  write_file(dir / "manifest.json", doc.dump(1) + "\n");
  return manifest;
}

Manifest read_manifest(const fs::path& dir) {
  json doc;
  try {
    doc = json::parse(read_file(dir / "manifest.json"));
  } catch (const json::parse_error& e) {
    throw DataError((dir / "manifest.json").string() + ": not valid JSON: " + e.what());
  }
  const Node root{doc, "$"};
  if (root.field("format").string() != "poseroi-dataset 1") root.field("format").fail("unsupported manifest format");
  Manifest m;
  const Node files = root.field("files");
  for (std::size_t i = 0; i < files.array().size(); ++i) {
    const Node f = files.item(i);
    m.files.push_back({f.field("path").string(), static_cast<std::uint64_t>(f.field("bytes").integer()),
                       f.field("fnv1a").string()});
  }
  m.hash = root.field("hash").string();
  m.source = root.has("source") ? doc["source"].dump() : "{}";
  return m;
}

Dataset read_dataset(const fs::path& dir) {
  const Manifest m = read_manifest(dir);
  for (const auto& f : m.files) {
    const std::string bytes = read_file(dir / f.path);
    if (bytes.size() != f.bytes || hex64(fnv1a(bytes)) != f.fnv1a) {
      throw DataError((dir / f.path).string() + ": contents do not match manifest.json");
    }
  }
  return load_coco_json(dir / "annotations.json", dir / "images");
}

}  // namespace poseroi
