#pragma once

#include <map>
#include <set>
#include <string>
#include <vector>

#include "walkgpt/errors.hpp"

namespace walkgpt {

inline constexpr int kNumClassIds = 31;  // ids 0..30, 0 = background
inline constexpr int kMaxClassId = 30;

enum class Accessibility { kAccessible, kHarmful };

enum class OntologyLabel { kAccessible, kHarmful, kIgnore };

inline const char* ToString(Accessibility a) {
  return a == Accessibility::kAccessible ? "accessible" : "harmful";
}

template <typename T>
struct Grid {
  int rows = 0;
  int cols = 0;
  std::vector<T> data;

  Grid() = default;
  Grid(int r, int c, T fill = T{}) : rows(r), cols(c), data(static_cast<size_t>(r) * c, fill) {}

  T& at(int r, int c) { return data[static_cast<size_t>(r) * cols + c]; }
  const T& at(int r, int c) const { return data[static_cast<size_t>(r) * cols + c]; }
  bool SameShape(int r, int c) const { return rows == r && cols == c; }
  template <typename U>
  bool SameShape(const Grid<U>& o) const { return rows == o.rows && cols == o.cols; }
  bool operator==(const Grid&) const = default;
};

using LabelGrid = Grid<int>;
using DepthGrid = Grid<double>;

// Multi-channel integer image, channel-interleaved (row, col, channel).
struct ChannelGrid {
  int rows = 0;
  int cols = 0;
  int channels = 0;
  std::vector<int> data;

  ChannelGrid() = default;
  ChannelGrid(int r, int c, int ch, int fill = 0)
      : rows(r), cols(c), channels(ch), data(static_cast<size_t>(r) * c * ch, fill) {}

  int& at(int r, int c, int ch) { return data[(static_cast<size_t>(r) * cols + c) * channels + ch]; }
  int at(int r, int c, int ch) const {
    return data[(static_cast<size_t>(r) * cols + c) * channels + ch];
  }
};

// Everything known about one frame after curation. Present classes exclude
// nothing; class_min_depth only holds non-ignore classes with a valid pixel.
struct SceneAnnotation {
  std::string sample_id;
  std::string image_ref;
  LabelGrid semantic_mask;
  DepthGrid depth_map;
  std::map<int, double> class_min_depth;
  std::set<int> present_classes;
  std::map<int, std::string> class_names;              // non-ignore present classes
  std::map<int, Accessibility> class_accessibility;    // non-ignore present classes
};

}  // namespace walkgpt
