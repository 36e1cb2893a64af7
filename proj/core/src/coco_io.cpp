#include "hce/coco_io.hpp"

#include <json.hpp>

#include <cmath>
#include <fstream>
#include <stdexcept>

namespace hce {

using nlohmann::json;

void write_ppm(const std::string& path, const Tensor<float>& pixels) {
  if (pixels.shape.size() != 3 || pixels.shape[0] != 3)
    throw std::invalid_argument("write_ppm: expected (3, H, W) pixels, got " + pixels.shape_str());
  const int h = pixels.shape[1], w = pixels.shape[2];
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("write_ppm: cannot open " + path);
  f << "P6\n" << w << " " << h << "\n255\n";
  std::vector<unsigned char> row(static_cast<std::size_t>(w) * 3);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x)
      for (int c = 0; c < 3; ++c) {
        float v = pixels.at(c, y, x);
        v = v < 0.f ? 0.f : (v > 1.f ? 1.f : v);
        row[static_cast<std::size_t>(x) * 3 + static_cast<std::size_t>(c)] =
            static_cast<unsigned char>(std::lround(v * 255.f));
      }
    f.write(reinterpret_cast<const char*>(row.data()), static_cast<std::streamsize>(row.size()));
  }
  if (!f) throw std::runtime_error("write_ppm: short write to " + path);
}

Tensor<float> read_ppm(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("read_ppm: cannot open " + path);
  std::string magic;
  int w = 0, h = 0, maxval = 0;
  f >> magic >> w >> h >> maxval;
  if (magic != "P6" || maxval != 255 || w <= 0 || h <= 0)
    throw std::runtime_error("read_ppm: unsupported PPM header in " + path);
  f.get();  // the single whitespace byte after maxval
  std::vector<unsigned char> raw(static_cast<std::size_t>(w) * static_cast<std::size_t>(h) * 3);
  f.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
  if (static_cast<std::size_t>(f.gcount()) != raw.size())
    throw std::runtime_error("read_ppm: truncated pixel data in " + path);
  Tensor<float> t({3, h, w});
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      for (int c = 0; c < 3; ++c)
        t.at(c, y, x) =
            static_cast<float>(raw[(static_cast<std::size_t>(y) * static_cast<std::size_t>(w) +
                                    static_cast<std::size_t>(x)) *
                                       3 +
                                   static_cast<std::size_t>(c)]) /
            255.f;
  return t;
}

static json box_to_xywh(const Box& b) {
  return json::array({b.x1, b.y1, b.x2 - b.x1, b.y2 - b.y1});
}

static Box xywh_to_box(const json& a) {
  double x = a.at(0), y = a.at(1), w = a.at(2), h = a.at(3);
  return Box{x, y, x + w, y + h};
}

void write_coco(const std::string& path, const CocoDataset& ds) {
  json j;
  j["images"] = json::array();
  for (const auto& im : ds.images)
    j["images"].push_back({{"id", im.id},
                           {"file_name", im.file_name},
                           {"width", im.width},
                           {"height", im.height}});
  j["annotations"] = json::array();
  for (const auto& a : ds.annotations)
    j["annotations"].push_back({{"id", a.id},
                                {"image_id", a.image_id},
                                {"category_id", a.category_id},
                                {"bbox", box_to_xywh(a.box)},
                                {"area", a.box.area()},
                                {"iscrowd", 0}});
  j["categories"] = json::array();
  for (const auto& c : ds.categories) j["categories"].push_back({{"id", c.id}, {"name", c.name}});
  std::ofstream f(path);
  if (!f) throw std::runtime_error("write_coco: cannot open " + path);
  f << j.dump(1) << "\n";
}

CocoDataset load_coco(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw std::runtime_error("load_coco: cannot open " + path);
  json j = json::parse(f);
  CocoDataset ds;
  for (const auto& im : j.at("images"))
    ds.images.push_back(
        {im.at("id"), im.at("file_name"), im.at("width"), im.at("height")});
  for (const auto& a : j.at("annotations"))
    ds.annotations.push_back(
        {a.at("id"), a.at("image_id"), a.at("category_id"), xywh_to_box(a.at("bbox"))});
  for (const auto& c : j.at("categories")) ds.categories.push_back({c.at("id"), c.at("name")});
  return ds;
}

void write_detections(const std::string& path, const std::vector<DetectionRecord>& dets) {
  json j = json::array();
  for (const auto& d : dets)
    j.push_back({{"image_id", d.image_id},
                 {"category_id", d.category_id},
                 {"bbox", box_to_xywh(d.box)},
                 {"score", d.score},
                 {"branch", d.branch}});
  std::ofstream f(path);
  if (!f) throw std::runtime_error("write_detections: cannot open " + path);
  f << j.dump(1) << "\n";
}

std::vector<DetectionRecord> load_detections(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw std::runtime_error("load_detections: cannot open " + path);
  json j = json::parse(f);
  std::vector<DetectionRecord> out;
  for (const auto& d : j)
    out.push_back({d.at("image_id"), d.at("category_id"), xywh_to_box(d.at("bbox")),
                   d.at("score"), d.value("branch", std::string("feature_fusion"))});
  return out;
}

}  // namespace hce
