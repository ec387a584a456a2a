#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

namespace beatframe::process {

struct Result {
  int exit_code = -1;
  std::vector<std::uint8_t> stdout_bytes;
  std::string stderr_text;
};

/// Runs `argv[0]` with the given arguments, waits for it and captures both
/// output streams. No shell is involved.
Result run(const std::vector<std::string>& argv);

/// Locates an executable: the path in `env_var` if set, otherwise `name` on PATH.
/// Returns an empty path when nothing usable is found.
std::filesystem::path find_executable(const std::string& name, const char* env_var = nullptr);

/// ffmpeg is used for MP3 decoding and for MP4 muxing. Honors BEATFRAME_FFMPEG.
/// Throws Error naming the executable when it cannot be found.
std::filesystem::path require_ffmpeg();

}  // namespace beatframe::process
