#pragma once

namespace rtpp {

inline constexpr const char* kVersion = "0.1.0";

}  // namespace rtpp
