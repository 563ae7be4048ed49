#pragma once

#include <optional>
#include <string>

namespace kd {

enum class Task { classify, segment };

inline const char* to_string(Task t) {
    return t == Task::classify ? "classify" : "segment";
}

inline std::optional<Task> task_from_string(const std::string& s) {
    if (s == "classify") return Task::classify;
    if (s == "segment") return Task::segment;
    return std::nullopt;
}

}  // namespace kd
