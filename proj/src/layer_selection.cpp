#include "partseg/layer_selection.hpp"

#include <algorithm>
#include <sstream>

#include "partseg/error.hpp"

namespace partseg {
namespace {

std::pair<int64_t, int64_t> group_range(char g) {
  switch (g) {
    case 'A': return {4, 8};
    case 'B': return {16, 32};
    case 'C': return {64, INT64_MAX};
    default: fail(ErrorCode::invalid_argument, std::string("unknown layer group '") + g + "'");
  }
}

}  // namespace

LayerSelection LayerSelection::group(char g) {
  switch (g) {
    case 'A': return {SelectionMode::group_A, {}, {}};
    case 'B': return {SelectionMode::group_B, {}, {}};
    case 'C': return {SelectionMode::group_C, {}, {}};
    default: fail(ErrorCode::invalid_argument, std::string("unknown layer group '") + g + "'");
  }
}

std::vector<int> resolve_selection(const LayerSelection& sel, const std::vector<LayerInfo>& table) {
  require(!table.empty(), ErrorCode::invalid_argument, "layer table is empty");
  std::vector<int> out;
  auto side = [](const LayerInfo& l) { return std::max(l.height, l.width); };
  switch (sel.mode) {
    case SelectionMode::all:
      for (const auto& l : table) out.push_back(l.id);
      break;
    case SelectionMode::all_but_last:
      for (size_t i = 0; i + 1 < table.size(); ++i) out.push_back(table[i].id);
      break;
    case SelectionMode::group_A:
    case SelectionMode::group_B:
    case SelectionMode::group_C: {
      const char g = sel.mode == SelectionMode::group_A   ? 'A'
                     : sel.mode == SelectionMode::group_B ? 'B'
                                                          : 'C';
      const auto [lo, hi] = group_range(g);
      for (const auto& l : table)
        if (side(l) >= lo && side(l) <= hi) out.push_back(l.id);
      break;
    }
    case SelectionMode::explicit_ids: {
      require(!sel.ids.empty(), ErrorCode::invalid_argument, "explicit selection is empty");
      for (int id : sel.ids) {
        auto it = std::find_if(table.begin(), table.end(), [&](const auto& l) { return l.id == id; });
        require(it != table.end(), ErrorCode::invalid_argument,
                "layer id " + std::to_string(id) + " not in layer table");
      }
      for (const auto& l : table)
        if (std::find(sel.ids.begin(), sel.ids.end(), l.id) != sel.ids.end()) out.push_back(l.id);
      break;
    }
  }
  if (sel.resolution_range) {
    const auto [lo, hi] = *sel.resolution_range;
    std::erase_if(out, [&](int id) {
      auto it = std::find_if(table.begin(), table.end(), [&](const auto& l) { return l.id == id; });
      return side(*it) < lo || side(*it) > hi;
    });
  }
  return out;
}

LayerSelection parse_selection(const std::string& text) {
  if (text == "all") return LayerSelection::all();
  if (text == "all_but_last") return LayerSelection::all_but_last();
  if (text == "A" || text == "B" || text == "C") return LayerSelection::group(text[0]);
  if (text == "A-B") return {SelectionMode::all, {}, std::pair<int64_t, int64_t>{4, 32}};
  if (text == "B-C") return {SelectionMode::all, {}, std::pair<int64_t, int64_t>{16, INT64_MAX}};
  std::vector<int> ids;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    try {
      size_t used = 0;
      ids.push_back(std::stoi(item, &used));
      if (used != item.size()) throw std::invalid_argument(item);
    } catch (const std::exception&) {
      fail(ErrorCode::invalid_argument, "bad layer selection '" + text + "'");
    }
  }
  require(!ids.empty(), ErrorCode::invalid_argument, "bad layer selection '" + text + "'");
  return LayerSelection::explicit_layers(std::move(ids));
}

std::string to_string(const LayerSelection& sel) {
  std::string base;
  switch (sel.mode) {
    case SelectionMode::all: base = "all"; break;
    case SelectionMode::all_but_last: base = "all_but_last"; break;
    case SelectionMode::group_A: base = "A"; break;
    case SelectionMode::group_B: base = "B"; break;
    case SelectionMode::group_C: base = "C"; break;
    case SelectionMode::explicit_ids:
      for (size_t i = 0; i < sel.ids.size(); ++i) base += (i ? "," : "") + std::to_string(sel.ids[i]);
      break;
  }
  if (sel.mode == SelectionMode::all && sel.resolution_range) {
    if (sel.resolution_range->first == 4 && sel.resolution_range->second == 32) return "A-B";
    if (sel.resolution_range->first == 16 && sel.resolution_range->second == INT64_MAX) return "B-C";
  }
  return base;
}

std::vector<LayerInfo> stylegan2_layer_table() {
  const int64_t channels[] = {512, 512, 512, 512, 512, 256, 128, 64, 32};
  std::vector<LayerInfo> table;
  for (int i = 0; i < 9; ++i) {
    const int64_t res = int64_t{4} << i;
    table.push_back({i, res, res, channels[i]});
  }
  return table;
}

void to_json(nlohmann::json& j, const LayerInfo& info) {
  j = nlohmann::json{{"id", info.id}, {"h", info.height}, {"w", info.width}, {"c", info.channels}};
}

void from_json(const nlohmann::json& j, LayerInfo& info) {
  info.id = j.at("id").get<int>();
  info.height = j.at("h").get<int64_t>();
  info.width = j.at("w").get<int64_t>();
  info.channels = j.at("c").get<int64_t>();
}

}  // namespace partseg
