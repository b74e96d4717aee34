#pragma once

namespace cprompt {

// Bumped whenever a serialized layout changes; checkpoints and caches embed
// this and refuse to load across versions.
inline constexpr const char* kCodeVersion = "cprompt-0.1.0";

}  // namespace cprompt
