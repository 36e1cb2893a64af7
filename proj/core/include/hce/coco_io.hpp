#pragma once

#include <string>
#include <vector>

#include "hce/box.hpp"
#include "hce/tensor.hpp"

namespace hce {

// 8-bit binary PPM (P6). Pixels are (3, H, W) floats in [0,1]; values are
// rounded to the nearest 1/255 step on write, so data already on that grid
// round-trips exactly.
void write_ppm(const std::string& path, const Tensor<float>& pixels);
Tensor<float> read_ppm(const std::string& path);

struct CocoImage {
  int id = 0;
  std::string file_name;
  int width = 0;
  int height = 0;
};

struct CocoAnnotation {
  int id = 0;
  int image_id = 0;
  int category_id = 0;
  Box box;  // corner form in memory; serialized as COCO [x, y, w, h]
};

struct CocoCategory {
  int id = 0;
  std::string name;
};

struct CocoDataset {
  std::vector<CocoImage> images;
  std::vector<CocoAnnotation> annotations;
  std::vector<CocoCategory> categories;
};

void write_coco(const std::string& path, const CocoDataset& ds);
CocoDataset load_coco(const std::string& path);

struct DetectionRecord {
  int image_id = 0;
  int category_id = 0;
  Box box;
  double score = 0.0;
  std::string branch;  // "feature_fusion" or "confidence_fusion"
};

void write_detections(const std::string& path, const std::vector<DetectionRecord>& dets);
std::vector<DetectionRecord> load_detections(const std::string& path);

}  // namespace hce
