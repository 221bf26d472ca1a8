// SPDX-License-Identifier: Apache-2.0
#include "fmoe/eval/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <ostream>
#include <sstream>

#include <json.hpp>

#include "fmoe/errors.hpp"

namespace fmoe::eval {

template <typename S>
std::size_t rank_target(std::span<const S> scores, data::ItemId target,
                        std::span<const data::ItemId> exclude) {
  if (target == data::kPadding || target > scores.size()) {
    throw IndexError("rank_target: target " + std::to_string(target) + " outside catalog of " +
                     std::to_string(scores.size()));
  }
  if (std::find(exclude.begin(), exclude.end(), target) != exclude.end()) {
    throw ContractError("rank_target: target is excluded");
  }
  std::vector<char> skip;
  if (!exclude.empty()) {
    skip.assign(scores.size() + 1, 0);
    for (auto e : exclude) {
      if (e <= scores.size()) skip[e] = 1;
    }
  }
  const S ts = scores[target - 1];
  std::size_t rank = 1;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    const auto item = static_cast<data::ItemId>(i + 1);
    if (item == target || (!skip.empty() && skip[item])) continue;
    if (scores[i] > ts || (scores[i] == ts && item < target)) ++rank;
  }
  return rank;
}

template std::size_t rank_target<float>(std::span<const float>, data::ItemId,
                                        std::span<const data::ItemId>);
template std::size_t rank_target<double>(std::span<const double>, data::ItemId,
                                         std::span<const data::ItemId>);

RankingMetrics compute_metrics(std::span<const std::size_t> ranks) {
  if (ranks.empty()) throw ContractError("compute_metrics: no ranks");
  double mrr = 0.0, hr = 0.0, ndcg = 0.0;
  for (std::size_t r : ranks) {
    if (r == 0) throw ContractError("compute_metrics: ranks are 1-based");
    mrr += 1.0 / static_cast<double>(r);
    if (r <= 10) {
      hr += 1.0;
      ndcg += 1.0 / std::log2(static_cast<double>(r) + 1.0);
    }
  }
  const double n = static_cast<double>(ranks.size());
  return {100.0 * mrr / n, 100.0 * hr / n, 100.0 * ndcg / n};
}

double hit_rate(std::span<const std::size_t> ranks, std::size_t k) {
  if (ranks.empty()) throw ContractError("hit_rate: no ranks");
  const auto hits = std::count_if(ranks.begin(), ranks.end(), [k](std::size_t r) { return r <= k; });
  return 100.0 * static_cast<double>(hits) / static_cast<double>(ranks.size());
}

MetricsReport make_report(std::size_t round, std::string mode, std::string split,
                          std::vector<DomainMetrics> domains) {
  MetricsReport rep{round, std::move(mode), std::move(split), std::move(domains), {}};
  if (!rep.domains.empty()) {
    for (const auto& d : rep.domains) {
      rep.average.mrr += d.metrics.mrr;
      rep.average.hr_at_10 += d.metrics.hr_at_10;
      rep.average.ndcg_at_10 += d.metrics.ndcg_at_10;
    }
    const double n = static_cast<double>(rep.domains.size());
    rep.average.mrr /= n;
    rep.average.hr_at_10 /= n;
    rep.average.ndcg_at_10 /= n;
  }
  return rep;
}

void write_records(std::ostream& out, const MetricsReport& report) {
  auto emit = [&](const std::string& domain, const RankingMetrics& m) {
    for (const auto& [name, value] : {std::pair{"mrr", m.mrr}, std::pair{"hr@10", m.hr_at_10},
                                      std::pair{"ndcg@10", m.ndcg_at_10}}) {
      nlohmann::json rec{{"round", report.round}, {"mode", report.mode},
                         {"split", report.split}, {"domain", domain},
                         {"metric", name},        {"value", value}};
      out << rec.dump() << '\n';
    }
  };
  for (const auto& d : report.domains) emit(d.domain, d.metrics);
  emit("avg", report.average);
}

std::string format_table(std::span<const std::pair<std::string, MetricsReport>> rows) {
  if (rows.empty()) return {};
  std::size_t label_width = 6;
  for (const auto& [label, _] : rows) label_width = std::max(label_width, label.size());
  std::vector<std::string> columns;
  for (const auto& d : rows.front().second.domains) columns.push_back(d.domain);
  columns.push_back("Avg");

  std::ostringstream os;
  char buf[64];
  auto pad = [](std::string s, std::size_t w) {
    s.resize(std::max(s.size(), w), ' ');
    return s;
  };
  const std::size_t cell = 23;
  os << pad("Method", label_width);
  for (const auto& c : columns) os << " | " << pad(c, cell);
  os << '\n' << pad("", label_width);
  for (std::size_t i = 0; i < columns.size(); ++i) os << " | " << pad("  MRR  HR@10 NDCG@10", cell);
  os << '\n' << std::string(label_width + columns.size() * (cell + 3), '-') << '\n';
  for (const auto& [label, rep] : rows) {
    os << pad(label, label_width);
    auto cellf = [&](const RankingMetrics& m) {
      std::snprintf(buf, sizeof(buf), "%6.2f %6.2f %6.2f", m.mrr, m.hr_at_10, m.ndcg_at_10);
      os << " | " << pad(buf, cell);
    };
    for (const auto& d : rep.domains) cellf(d.metrics);
    cellf(rep.average);
    os << '\n';
  }
  return os.str();
}

}  // namespace fmoe::eval
