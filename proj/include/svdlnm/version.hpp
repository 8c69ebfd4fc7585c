#pragma once

namespace svdlnm {

inline constexpr const char* kVersion = "0.1.0";

}  // namespace svdlnm
