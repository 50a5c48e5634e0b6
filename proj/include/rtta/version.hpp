#pragma once

namespace rtta {

inline constexpr const char* kVersion = "rtta-0.1.0";

}  // namespace rtta
