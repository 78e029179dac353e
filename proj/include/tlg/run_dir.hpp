#pragma once

#include <string>

#include <json.hpp>

namespace tlg::run {

// $TLG_RUNS_DIR, else "runs" under the working directory.
std::string runs_root();

std::string timestamp_utc();  // ISO-8601, second resolution
std::string git_revision();   // "unknown" outside a work tree

// A run directory guarded by an exclusive lock file for its lifetime. Holds exactly one
// `manifest` (JSON), rewritten in place on every update.
class RunDir {
 public:
  // Creates root/run_id (run_id generated from the command and config hash when empty).
  RunDir(const std::string& root, const std::string& command, const std::string& config_hash,
         const std::string& run_id = {});
  ~RunDir();
  RunDir(const RunDir&) = delete;
  RunDir& operator=(const RunDir&) = delete;

  const std::string& path() const { return path_; }
  const std::string& id() const { return id_; }
  std::string file(const std::string& name) const { return path_ + "/" + name; }

  nlohmann::json& manifest() { return manifest_; }
  void write_manifest() const;

 private:
  std::string path_;
  std::string id_;
  std::string lock_;
  nlohmann::json manifest_;
};

}  // namespace tlg::run
