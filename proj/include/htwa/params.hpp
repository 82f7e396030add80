#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "htwa/engine.hpp"
#include "htwa/rng.hpp"

namespace htwa {

// Named trainable arrays. Paths are dot-separated ("video.stage0.layer1.attn.q.w")
// and the first component is the parameter group used for freezing.
class ParamStore {
 public:
  enum class Init { kZeros, kOnes, kNormal };

  engine::DiffArray create(const std::string& path, engine::Shape shape, Init init, Rng& rng,
                           double stddev = 0.02);
  void insert(const std::string& path, engine::DiffArray value);

  const engine::DiffArray& get(const std::string& path) const;
  bool contains(const std::string& path) const { return params_.count(path) != 0; }
  const std::map<std::string, engine::DiffArray>& all() const { return params_; }
  std::size_t size() const { return params_.size(); }
  std::size_t element_count() const;

  std::vector<std::string> paths_in_groups(const std::vector<std::string>& groups) const;
  void zero_grad();

  // FNV-1a over path names, shapes and the raw value bytes of the groups.
  std::uint64_t digest(const std::vector<std::string>& groups = {}) const;

 private:
  std::map<std::string, engine::DiffArray> params_;
};

std::string group_of(const std::string& path);

}  // namespace htwa
