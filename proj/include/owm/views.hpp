#pragma once

#include <array>
#include <string>
#include <string_view>

#include "owm/errors.hpp"

namespace owm {

/// Camera views: global third-person view and two gripper-centred crops.
enum class View { R = 0, W1 = 1, W2 = 2 };

inline constexpr int kViewCount = 3;
inline constexpr std::array<View, kViewCount> kViews{View::R, View::W1, View::W2};

inline std::string_view view_name(View v) {
  switch (v) {
    case View::R: return "r";
    case View::W1: return "w1";
    case View::W2: return "w2";
  }
  return "?";
}

inline View parse_view(std::string_view s) {
  for (View v : kViews)
    if (view_name(v) == s) return v;
  throw InputError("unknown view '" + std::string(s) + "'");
}

inline int view_index(View v) { return static_cast<int>(v); }

}  // namespace owm
