#include "tlg/run_dir.hpp"

#include <array>
#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <ctime>
#include <filesystem>
#include <fstream>

#include <fcntl.h>
#include <unistd.h>

#include "tlg/errors.hpp"

namespace tlg::run {

namespace fs = std::filesystem;

std::string runs_root() {
  const char* env = std::getenv("TLG_RUNS_DIR");
  return env && *env ? std::string(env) : std::string("runs");
}

std::string timestamp_utc() {
  const auto now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&now, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

std::string git_revision() {
  std::string out;
  if (FILE* p = popen("git -C \"" TLG_DATA_DIR "/..\" rev-parse HEAD 2>/dev/null", "r")) {
    std::array<char, 128> buf{};
    while (fgets(buf.data(), buf.size(), p)) out += buf.data();
    pclose(p);
  }
  while (!out.empty() && (out.back() == '\n' || out.back() == '\r')) out.pop_back();
  return out.empty() ? "unknown" : out;
}

RunDir::RunDir(const std::string& root, const std::string& command, const std::string& config_hash,
               const std::string& run_id) {
  if (run_id.empty()) {
    std::string stamp = timestamp_utc();
    for (auto& c : stamp)
      if (c == ':') c = '-';
    id_ = command + "-" + stamp + "-" + config_hash.substr(0, 8);
  } else {
    id_ = run_id;
  }
  std::error_code ec;
  fs::create_directories(fs::path(root) / id_, ec);
  if (ec) throw LoadError("cannot create run directory '" + root + "/" + id_ + "': " + ec.message());
  path_ = (fs::path(root) / id_).string();
  lock_ = path_ + "/.lock";
  const int fd = ::open(lock_.c_str(), O_CREAT | O_EXCL | O_WRONLY, 0644);
  if (fd < 0) {
    lock_.clear();
    throw LoadError("run directory '" + path_ + "' is locked by another writer (remove .lock if stale)");
  }
  const auto pid = std::to_string(::getpid()) + "\n";
  [[maybe_unused]] auto w = ::write(fd, pid.data(), pid.size());
  ::close(fd);
  manifest_["command"] = command;
  manifest_["run_id"] = id_;
  manifest_["config_hash"] = config_hash;
  manifest_["git_revision"] = git_revision();
  manifest_["started"] = timestamp_utc();
}

RunDir::~RunDir() {
  if (!lock_.empty()) ::unlink(lock_.c_str());
}

void RunDir::write_manifest() const {
  const auto tmp = path_ + "/manifest.tmp";
  std::ofstream(tmp) << manifest_.dump(2) << "\n";
  fs::rename(tmp, path_ + "/manifest");
}

}  // namespace tlg::run
