#include "htwa/params.hpp"

#include <algorithm>
#include <cstring>
#include <stdexcept>

namespace htwa {

using engine::DiffArray;

std::string group_of(const std::string& path) { return path.substr(0, path.find('.')); }

DiffArray ParamStore::create(const std::string& path, engine::Shape shape, Init init, Rng& rng,
                             double stddev) {
  if (contains(path)) throw std::invalid_argument("ParamStore: duplicate parameter " + path);
  std::vector<double> data(engine::numel(shape));
  switch (init) {
    case Init::kZeros:
      break;
    case Init::kOnes:
      std::fill(data.begin(), data.end(), 1.0);
      break;
    case Init::kNormal:
      for (double& v : data) v = rng.normal(0.0, stddev);
      break;
  }
  DiffArray value(std::move(shape), std::move(data), true);
  params_.emplace(path, value);
  return value;
}

void ParamStore::insert(const std::string& path, DiffArray value) {
  value.set_requires_grad(true);
  params_.insert_or_assign(path, std::move(value));
}

const DiffArray& ParamStore::get(const std::string& path) const {
  auto it = params_.find(path);
  if (it == params_.end()) throw std::out_of_range("ParamStore: no parameter " + path);
  return it->second;
}

std::size_t ParamStore::element_count() const {
  std::size_t n = 0;
  for (const auto& [path, value] : params_) n += value.numel();
  return n;
}

std::vector<std::string> ParamStore::paths_in_groups(const std::vector<std::string>& groups) const {
  std::vector<std::string> out;
  for (const auto& [path, value] : params_) {
    if (groups.empty() || std::find(groups.begin(), groups.end(), group_of(path)) != groups.end())
      out.push_back(path);
  }
  return out;
}

void ParamStore::zero_grad() {
  for (auto& [path, value] : params_) {
    DiffArray v = value;
    v.zero_grad();
  }
}

namespace {

void fnv(std::uint64_t& h, const void* bytes, std::size_t n) {
  const auto* p = static_cast<const unsigned char*>(bytes);
  for (std::size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ULL;
  }
}

}  // namespace

std::uint64_t ParamStore::digest(const std::vector<std::string>& groups) const {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (const auto& path : paths_in_groups(groups)) {
    const DiffArray& v = params_.at(path);
    fnv(h, path.data(), path.size());
    for (std::size_t d : v.shape()) {
      const std::uint64_t d64 = d;
      fnv(h, &d64, sizeof d64);
    }
    fnv(h, v.data().data(), v.numel() * sizeof(double));
  }
  return h;
}

}  // namespace htwa
