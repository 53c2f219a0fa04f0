#pragma once

#include <json.hpp>

#include "aitl/transforms.hpp"

namespace aitl {

/// Machine-readable transform catalog: kind ids, names, per-profile
/// parameter ranges. The shipped data/transform_catalog.json is generated
/// from this function and a test keeps the two in sync.
inline nlohmann::json transform_catalog_json() {
  using nlohmann::json;
  json kinds = json::array();
  auto fixed = [](const char* name, double lo, double hi) {
    return json{{"name", name}, {"lo", lo}, {"hi", hi}};
  };
  auto pixel = [](const char* name, json desk, json paper) {
    return json{{"name", name}, {"desk", desk}, {"paper-299", paper}};
  };
  auto data_dep = [](const char* name) { return json{{"name", name}, {"data_dependent", true}}; };

  for (int id = 0; id < kNumTransformKinds; ++id) {
    TransformKind k = kind_from_id(id);
    json entry = {{"id", id}, {"name", kind_name(k)}};
    json params = json::array();
    switch (k) {
      case TransformKind::Admix:
        params.push_back(fixed("eta", 0.2, 0.2));
        params.push_back(data_dep("aux_image"));
        break;
      case TransformKind::Scale:
        params.push_back(fixed("m", 0.0, 4.0));
        break;
      case TransformKind::AdmixAndScale:
        params.push_back(fixed("eta", 0.2, 0.2));
        params.push_back(fixed("m", 0.0, 4.0));
        params.push_back(data_dep("aux_image"));
        break;
      case TransformKind::Brightness:
      case TransformKind::Color:
      case TransformKind::Contrast:
      case TransformKind::Sharpness:
      case TransformKind::Saturation:
        params.push_back(fixed("alpha", 0.5, 1.5));
        break;
      case TransformKind::Invert:
        break;
      case TransformKind::Hue:
        params.push_back(fixed("alpha", -0.2, 0.2));
        break;
      case TransformKind::Gamma:
        params.push_back(fixed("alpha", 0.6, 1.4));
        break;
      case TransformKind::Crop:
        params.push_back(pixel("h", {28, 32}, {279, 299}));
        params.push_back(pixel("w", {28, 32}, {279, 299}));
        params.push_back(data_dep("y0"));
        params.push_back(data_dep("x0"));
        break;
      case TransformKind::Resize:
        params.push_back(pixel("h", {32, 36}, {299, 330}));
        params.push_back(pixel("w", {32, 36}, {299, 330}));
        params.push_back(data_dep("oy"));
        params.push_back(data_dep("ox"));
        params.push_back(pixel("pad", {36, 36}, {330, 330}));
        break;
      case TransformKind::Rotate:
        params.push_back(fixed("theta_deg", -30.0, 30.0));
        break;
      case TransformKind::ShearX:
      case TransformKind::ShearY:
        params.push_back(fixed("a", -0.5, 0.5));
        break;
      case TransformKind::TranslateX:
      case TransformKind::TranslateY:
        params.push_back(fixed("a_fraction", -0.4, 0.4));
        break;
      case TransformKind::Reshape:
        params.push_back(fixed("a11", 0.5, 1.5));
        params.push_back(fixed("a12", -0.5, 0.5));
        params.push_back(fixed("a13_fraction", -0.5, 0.5));
        params.push_back(fixed("a21", -0.5, 0.5));
        params.push_back(fixed("a22", 0.5, 1.5));
        params.push_back(fixed("a23_fraction", -0.5, 0.5));
        break;
      case TransformKind::Cutout:
        params.push_back(pixel("size", {6, 6}, {60, 60}));
        params.push_back(data_dep("y0"));
        params.push_back(data_dep("x0"));
        break;
    }
    entry["params"] = params;
    entry["in_random_subset"] =
        std::find(random_subset_kinds().begin(), random_subset_kinds().end(), k) != random_subset_kinds().end();
    kinds.push_back(entry);
  }

  json profiles = {{"desk", {{"image_size", 32}, {"resize_hi", 36}, {"crop_lo", 28}, {"cutout", 6}}},
                   {"paper-299", {{"image_size", 299}, {"resize_hi", 330}, {"crop_lo", 279}, {"cutout", 60}}}};
  return json{{"kinds", kinds}, {"profiles", profiles}};
}

}  // namespace aitl
