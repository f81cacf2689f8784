#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

namespace partseg {

struct LayerInfo {
  int id = 0;
  int64_t height = 0;
  int64_t width = 0;
  int64_t channels = 0;

  friend bool operator==(const LayerInfo&, const LayerInfo&) = default;
};

// Coarse / middle / fine groups follow the style-mixing split:
// A = 4..8, B = 16..32, C = 64 up to the generator's largest layer.
enum class SelectionMode { all, all_but_last, group_A, group_B, group_C, explicit_ids };

struct LayerSelection {
  SelectionMode mode = SelectionMode::all_but_last;
  std::vector<int> ids;  // explicit_ids only
  // Optional extra filter on the layer's side length, inclusive.
  std::optional<std::pair<int64_t, int64_t>> resolution_range;

  static LayerSelection all() { return {SelectionMode::all, {}, {}}; }
  static LayerSelection all_but_last() { return {SelectionMode::all_but_last, {}, {}}; }
  static LayerSelection group(char g);
  static LayerSelection explicit_layers(std::vector<int> ids) {
    return {SelectionMode::explicit_ids, std::move(ids), {}};
  }
};

// Layer ids selected from `table`, in table (depth) order.
// Throws for an explicit id missing from the table or an empty explicit list.
std::vector<int> resolve_selection(const LayerSelection& sel, const std::vector<LayerInfo>& table);

// Parses "all", "all_but_last", "A", "B", "C", "A-B", "B-C" or "0,2,3".
LayerSelection parse_selection(const std::string& text);
std::string to_string(const LayerSelection& sel);

// Layer table of a 1024^2 StyleGAN2 generator (one entry per conv pair).
std::vector<LayerInfo> stylegan2_layer_table();

void to_json(nlohmann::json& j, const LayerInfo& info);
void from_json(const nlohmann::json& j, LayerInfo& info);

}  // namespace partseg
