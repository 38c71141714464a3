#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include "rarl/errors.hpp"

namespace rarl {

// Inclusive label range carrying M totally ordered ranks, represented as
// reals within [value_lo, value_hi].
struct RankScale {
  int num_ranks = 2;
  double value_lo = 0.0;
  double value_hi = 1.0;

  void validate() const {
    if (num_ranks < 2) throw ConfigInvalid("RankScale: num_ranks must be >= 2");
    if (!(value_lo < value_hi)) throw ConfigInvalid("RankScale: value_lo must be < value_hi");
  }
};

// An explicit ordering of item ids.
struct Permutation {
  std::vector<int> order;

  std::size_t size() const { return order.size(); }

  void validate() const {
    std::unordered_set<int> seen;
    for (int id : order) {
      if (!seen.insert(id).second) {
        throw DuplicateIds("Permutation: duplicate id " + std::to_string(id));
      }
    }
  }
};

// One ordered-label task instance: N items with ground-truth values plus
// the ascending-truth permutation.
struct ItemBatch {
  struct Item {
    int image_id = 0;
    double truth_value = 0.0;
  };

  std::string batch_id;
  std::vector<Item> items;
  Permutation truth_perm;
  RankScale scale;

  std::size_t size() const { return items.size(); }

  std::vector<int> ids() const {
    std::vector<int> out;
    out.reserve(items.size());
    for (const auto& it : items) out.push_back(it.image_id);
    return out;
  }

  // Enforces the full batch contract: ids cover {1..N}, truths stay inside
  // the scale, truth_perm sorts ascending by value with id tie-breaks.
  void validate() const {
    scale.validate();
    const std::size_t n = items.size();
    if (n == 0) throw ConfigInvalid("ItemBatch: empty batch");
    std::unordered_set<int> seen;
    for (const auto& it : items) {
      if (it.image_id < 1 || static_cast<std::size_t>(it.image_id) > n) {
        throw ConfigInvalid("ItemBatch: image_id " + std::to_string(it.image_id) +
                            " outside {1.." + std::to_string(n) + "}");
      }
      if (!seen.insert(it.image_id).second) {
        throw DuplicateIds("ItemBatch: duplicate image_id " + std::to_string(it.image_id));
      }
      if (it.truth_value < scale.value_lo || it.truth_value > scale.value_hi) {
        throw ConfigInvalid("ItemBatch: truth_value out of scale range");
      }
    }
    if (truth_perm.size() != n) throw ConfigInvalid("ItemBatch: truth_perm length mismatch");
    std::unordered_map<int, double> truth_of;
    for (const auto& it : items) truth_of[it.image_id] = it.truth_value;
    std::unordered_set<int> in_perm;
    for (std::size_t i = 0; i < truth_perm.order.size(); ++i) {
      const int id = truth_perm.order[i];
      if (truth_of.find(id) == truth_of.end() || !in_perm.insert(id).second) {
        throw ConfigInvalid("ItemBatch: truth_perm is not a permutation of the item ids");
      }
      if (i > 0) {
        const int prev = truth_perm.order[i - 1];
        const double a = truth_of[prev], b = truth_of[id];
        if (a > b || (a == b && prev > id)) {
          throw ConfigInvalid("ItemBatch: truth_perm not sorted by ascending truth value");
        }
      }
    }
  }

  double truth_value_of(int image_id) const {
    for (const auto& it : items) {
      if (it.image_id == image_id) return it.truth_value;
    }
    throw ConfigInvalid("ItemBatch: unknown image_id " + std::to_string(image_id));
  }
};

namespace detail {

// Counts inversions of v by merge sort.
inline std::uint64_t count_inversions(std::vector<std::size_t>& v) {
  const std::size_t n = v.size();
  if (n < 2) return 0;
  std::vector<std::size_t> buf(n);
  std::uint64_t inversions = 0;
  for (std::size_t width = 1; width < n; width *= 2) {
    for (std::size_t lo = 0; lo < n; lo += 2 * width) {
      const std::size_t mid = std::min(lo + width, n);
      const std::size_t hi = std::min(lo + 2 * width, n);
      std::size_t i = lo, j = mid, k = lo;
      while (i < mid && j < hi) {
        if (v[i] <= v[j]) {
          buf[k++] = v[i++];
        } else {
          inversions += mid - i;
          buf[k++] = v[j++];
        }
      }
      while (i < mid) buf[k++] = v[i++];
      while (j < hi) buf[k++] = v[j++];
      std::copy(buf.begin() + static_cast<std::ptrdiff_t>(lo),
                buf.begin() + static_cast<std::ptrdiff_t>(hi),
                v.begin() + static_cast<std::ptrdiff_t>(lo));
    }
  }
  return inversions;
}

// Average (fractional) ranks, ties sharing their mean rank.
inline std::vector<double> average_ranks(const std::vector<double>& values) {
  const std::size_t n = values.size();
  std::vector<std::size_t> idx(n);
  for (std::size_t i = 0; i < n; ++i) idx[i] = i;
  std::sort(idx.begin(), idx.end(),
            [&](std::size_t a, std::size_t b) { return values[a] < values[b]; });
  std::vector<double> ranks(n, 0.0);
  std::size_t i = 0;
  while (i < n) {
    std::size_t j = i;
    while (j + 1 < n && values[idx[j + 1]] == values[idx[i]]) ++j;
    const double r = 0.5 * (static_cast<double>(i) + static_cast<double>(j)) + 1.0;
    for (std::size_t k = i; k <= j; ++k) ranks[idx[k]] = r;
    i = j + 1;
  }
  return ranks;
}

}  // namespace detail

// Kendall's tau-a between two orderings of the same id set. Explicit
// permutations carry no ties, so concordant + discordant = n(n-1)/2 and
// the coefficient reduces to an exact inversion count.
inline double kendall_tau(const Permutation& a, const Permutation& b) {
  const std::size_t n = a.size();
  if (n < 2 || b.size() < 2) {
    throw DegenerateLength("kendall_tau: need at least 2 elements");
  }
  if (b.size() != n) throw MismatchedIdSets("kendall_tau: length mismatch");
  a.validate();
  b.validate();
  std::unordered_map<int, std::size_t> pos_b;
  pos_b.reserve(n);
  for (std::size_t i = 0; i < n; ++i) pos_b[b.order[i]] = i;
  std::vector<std::size_t> seq(n);
  for (std::size_t i = 0; i < n; ++i) {
    auto it = pos_b.find(a.order[i]);
    if (it == pos_b.end()) {
      throw MismatchedIdSets("kendall_tau: id " + std::to_string(a.order[i]) +
                             " missing from second permutation");
    }
    seq[i] = it->second;
  }
  const std::uint64_t discordant = detail::count_inversions(seq);
  const std::uint64_t total = static_cast<std::uint64_t>(n) * (n - 1) / 2;
  const std::uint64_t concordant = total - discordant;
  return (static_cast<double>(concordant) - static_cast<double>(discordant)) /
         static_cast<double>(total);
}

// Spearman's rho: Pearson correlation of the average-rank vectors.
inline double spearman_rho(const std::vector<double>& pred_values,
                           const std::vector<double>& truth_values) {
  const std::size_t n = pred_values.size();
  if (n != truth_values.size()) throw DegenerateInput("spearman_rho: length mismatch");
  if (n < 2) throw DegenerateInput("spearman_rho: need at least 2 values");
  const std::vector<double> ra = detail::average_ranks(pred_values);
  const std::vector<double> rb = detail::average_ranks(truth_values);
  double ma = 0.0, mb = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    ma += ra[i];
    mb += rb[i];
  }
  ma /= static_cast<double>(n);
  mb /= static_cast<double>(n);
  double saa = 0.0, sbb = 0.0, sab = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double da = ra[i] - ma, db = rb[i] - mb;
    saa += da * da;
    sbb += db * db;
    sab += da * db;
  }
  if (saa == 0.0 || sbb == 0.0) {
    throw DegenerateInput("spearman_rho: constant input sequence");
  }
  return sab / std::sqrt(saa * sbb);
}

// Sorts ids ascending by value, ties broken by ascending id. This is the
// implicit order induced by regression outputs.
inline Permutation order_by_value(const std::vector<std::pair<int, double>>& items) {
  if (items.empty()) throw DegenerateInput("order_by_value: empty input");
  std::unordered_set<int> seen;
  for (const auto& [id, value] : items) {
    (void)value;
    if (!seen.insert(id).second) {
      throw DuplicateIds("order_by_value: duplicate id " + std::to_string(id));
    }
  }
  std::vector<std::pair<int, double>> sorted = items;
  std::sort(sorted.begin(), sorted.end(), [](const auto& a, const auto& b) {
    if (a.second != b.second) return a.second < b.second;
    return a.first < b.first;
  });
  Permutation out;
  out.order.reserve(sorted.size());
  for (const auto& [id, value] : sorted) {
    (void)value;
    out.order.push_back(id);
  }
  return out;
}

// Restriction of two permutations to their shared ids, order preserved.
inline std::pair<Permutation, Permutation> restrict_to_common(const Permutation& a,
                                                              const Permutation& b) {
  std::unordered_set<int> in_a(a.order.begin(), a.order.end());
  std::unordered_set<int> in_b(b.order.begin(), b.order.end());
  Permutation ra, rb;
  for (int id : a.order) {
    if (in_b.count(id)) ra.order.push_back(id);
  }
  for (int id : b.order) {
    if (in_a.count(id)) rb.order.push_back(id);
  }
  return {std::move(ra), std::move(rb)};
}

}  // namespace rarl
