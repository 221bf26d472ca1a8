// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <iosfwd>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "fmoe/data/dataset.hpp"

namespace fmoe::eval {

// Values are percentages (x100), matching the usual table convention.
struct RankingMetrics {
  double mrr = 0.0;
  double hr_at_10 = 0.0;
  double ndcg_at_10 = 0.0;
};

// 1-based rank of `target` under full-catalog ranking. scores[i] belongs to
// item i + 1. Ties go to the smaller item id. `exclude` must not contain the
// target.
template <typename S>
std::size_t rank_target(std::span<const S> scores, data::ItemId target,
                        std::span<const data::ItemId> exclude = {});

RankingMetrics compute_metrics(std::span<const std::size_t> ranks);

// Percentage of ranks <= k.
double hit_rate(std::span<const std::size_t> ranks, std::size_t k);

struct DomainMetrics {
  std::string domain;
  RankingMetrics metrics;
  std::size_t samples = 0;
};

struct MetricsReport {
  std::size_t round = 0;
  std::string mode;
  std::string split;  // "valid" or "test"
  std::vector<DomainMetrics> domains;
  RankingMetrics average;  // arithmetic mean over domains
};

MetricsReport make_report(std::size_t round, std::string mode, std::string split,
                          std::vector<DomainMetrics> domains);

// One JSON object per (round, mode, split, domain, metric); the average row
// uses domain "avg".
void write_records(std::ostream& out, const MetricsReport& report);

// Rows are (method label, report); columns per domain then Avg.
std::string format_table(std::span<const std::pair<std::string, MetricsReport>> rows);

}  // namespace fmoe::eval
