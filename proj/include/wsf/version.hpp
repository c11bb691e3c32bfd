#pragma once

namespace wsf {

inline constexpr const char* wsf_version = "0.1.0";

} // namespace wsf
