// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <functional>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "fmoe/federation/checkpoint.hpp"

namespace fmoe::federation {

using CacheSnapshot = std::map<std::string, ExpertCheckpoint>;

// Latest uploaded encoder per domain. Writes happen only at the round
// barrier; readers always get a copy.
class ServerCache {
 public:
  using UploadObserver = std::function<void(const std::string& domain, const ExpertCheckpoint&)>;

  // Sees every upload before it is staged.
  void set_observer(UploadObserver observer) { observer_ = std::move(observer); }

  void upload(const std::string& domain, ExpertCheckpoint checkpoint);
  std::size_t staged() const noexcept { return staged_.size(); }

  // Overwrites each uploading domain's entry in upload order, advances the
  // round and clears the staging area.
  void commit();
  // FedAvg: every uploading domain's entry becomes the mean of the uploads.
  void commit_average();

  CacheSnapshot snapshot() const { return entries_; }
  const ExpertCheckpoint& at(const std::string& domain) const;
  bool contains(const std::string& domain) const { return entries_.count(domain) != 0; }
  std::size_t size() const noexcept { return entries_.size(); }
  std::size_t round() const noexcept { return round_; }

 private:
  CacheSnapshot entries_;
  std::vector<std::pair<std::string, ExpertCheckpoint>> staged_;
  std::size_t round_ = 0;
  UploadObserver observer_;
};

}  // namespace fmoe::federation
