#include "beatframe/process.hpp"

#include <fcntl.h>
#include <poll.h>
#include <spawn.h>
#include <sys/wait.h>
#include <unistd.h>

#include <array>
#include <cerrno>
#include <cstdlib>
#include <cstring>
#include <sstream>

#include "beatframe/error.hpp"

extern char** environ;

namespace beatframe::process {

Result run(const std::vector<std::string>& argv) {
  if (argv.empty()) throw Error("process::run: empty argument list");

  int out_pipe[2];
  int err_pipe[2];
  if (pipe(out_pipe) != 0 || pipe(err_pipe) != 0) {
    throw Error(std::string("pipe failed: ") + std::strerror(errno));
  }

  posix_spawn_file_actions_t actions;
  posix_spawn_file_actions_init(&actions);
  posix_spawn_file_actions_addopen(&actions, 0, "/dev/null", O_RDONLY, 0);
  posix_spawn_file_actions_adddup2(&actions, out_pipe[1], 1);
  posix_spawn_file_actions_adddup2(&actions, err_pipe[1], 2);
  posix_spawn_file_actions_addclose(&actions, out_pipe[0]);
  posix_spawn_file_actions_addclose(&actions, err_pipe[0]);

  std::vector<char*> args;
  args.reserve(argv.size() + 1);
  for (const auto& a : argv) args.push_back(const_cast<char*>(a.c_str()));
  args.push_back(nullptr);

  pid_t pid = 0;
  const int rc = posix_spawnp(&pid, args[0], &actions, nullptr, args.data(), environ);
  posix_spawn_file_actions_destroy(&actions);
  close(out_pipe[1]);
  close(err_pipe[1]);
  if (rc != 0) {
    close(out_pipe[0]);
    close(err_pipe[0]);
    throw Error("failed to launch " + argv[0] + ": " + std::strerror(rc));
  }

  Result result;
  std::array<pollfd, 2> fds{pollfd{out_pipe[0], POLLIN, 0}, pollfd{err_pipe[0], POLLIN, 0}};
  std::array<char, 65536> buf{};
  int open_fds = 2;
  while (open_fds > 0) {
    if (poll(fds.data(), fds.size(), -1) < 0) {
      if (errno == EINTR) continue;
      break;
    }
    for (std::size_t i = 0; i < fds.size(); ++i) {
      if (fds[i].fd < 0 || (fds[i].revents & (POLLIN | POLLHUP | POLLERR)) == 0) continue;
      const ssize_t n = read(fds[i].fd, buf.data(), buf.size());
      if (n <= 0) {
        close(fds[i].fd);
        fds[i].fd = -1;
        --open_fds;
        continue;
      }
      if (i == 0) {
        result.stdout_bytes.insert(result.stdout_bytes.end(), buf.data(), buf.data() + n);
      } else {
        result.stderr_text.append(buf.data(), static_cast<std::size_t>(n));
      }
    }
  }

  int status = 0;
  while (waitpid(pid, &status, 0) < 0 && errno == EINTR) {
  }
  result.exit_code = WIFEXITED(status) ? WEXITSTATUS(status) : 128 + WTERMSIG(status);
  return result;
}

std::filesystem::path find_executable(const std::string& name, const char* env_var) {
  namespace fs = std::filesystem;
  if (env_var != nullptr) {
    if (const char* value = std::getenv(env_var); value != nullptr && *value != '\0') {
      fs::path p(value);
      if (fs::exists(p) && access(p.c_str(), X_OK) == 0) return p;
      return {};
    }
  }
  const char* path_env = std::getenv("PATH");
  if (path_env == nullptr) return {};
  std::stringstream ss(path_env);
  std::string dir;
  while (std::getline(ss, dir, ':')) {
    if (dir.empty()) continue;
    fs::path candidate = fs::path(dir) / name;
    if (fs::exists(candidate) && access(candidate.c_str(), X_OK) == 0) return candidate;
  }
  return {};
}

std::filesystem::path require_ffmpeg() {
  auto exe = find_executable("ffmpeg", "BEATFRAME_FFMPEG");
  if (exe.empty()) {
    throw Error(
        "the 'ffmpeg' executable is required but was not found; install ffmpeg or point "
        "BEATFRAME_FFMPEG at an ffmpeg binary");
  }
  return exe;
}

}  // namespace beatframe::process
