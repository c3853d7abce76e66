#pragma once

// Randomized rounding with alteration for covering D slices with K contiguous
// windows of B slices, each slice at least r times.

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "psi3d/errors.hpp"
#include "psi3d/rng.hpp"
#include "psi3d/volume.hpp"

namespace psi3d {

struct CoverSpec {
  std::size_t depth = 0;
  std::size_t batch_size = 0;
  std::size_t coverage = 1;
  std::size_t budget = 0;
  std::uint64_t seed = 0;

  std::size_t starts() const noexcept { return depth - batch_size + 1; }

  /// Fewest windows that can cover every slice r times: slice 0 lies only in
  /// the window at 0, so r copies of a ceil(D/B) tiling are needed.
  std::size_t min_budget() const noexcept { return coverage * ((depth + batch_size - 1) / batch_size); }

  void validate() const {
    require(depth >= 1, "cover: depth must be >= 1");
    require(batch_size >= 1 && batch_size <= depth, "cover: batch size must be in [1, depth]");
    require(coverage >= 1, "cover: coverage must be >= 1");
    require(budget * batch_size >= coverage * depth,
            "cover: infeasible, budget*batch (" + std::to_string(budget * batch_size) + ") < coverage*depth (" +
                std::to_string(coverage * depth) + ")");
    require(budget >= min_budget(), "cover: infeasible, contiguous windows need at least " +
                                        std::to_string(min_budget()) + " batches, budget is " +
                                        std::to_string(budget));
  }
};

struct BatchCover {
  std::size_t depth = 0;
  std::size_t batch_size = 0;
  std::vector<std::size_t> starts;        ///< window starts, sorted ascending
  std::vector<std::size_t> multiplicity;  ///< per-slice window count
  std::size_t swaps = 0;                  ///< alteration swaps performed
  std::size_t redraws = 0;                ///< stage-one redraws after a stalled search
  bool fallback = false;                  ///< local search stalled; repaired constructively

  std::size_t window_count() const noexcept { return starts.size(); }
  std::size_t min_multiplicity() const {
    return multiplicity.empty() ? 0 : *std::min_element(multiplicity.begin(), multiplicity.end());
  }

  static std::vector<std::size_t> count(std::size_t depth, std::size_t batch, std::span<const std::size_t> starts) {
    std::vector<std::size_t> m(depth, 0);
    for (std::size_t s : starts) {
      require(s + batch <= depth, "cover window exceeds depth");
      for (std::size_t j = s; j < s + batch; ++j) ++m[j];
    }
    return m;
  }

  static BatchCover from_starts(std::size_t depth, std::size_t batch, std::vector<std::size_t> starts) {
    BatchCover c;
    c.depth = depth;
    c.batch_size = batch;
    std::sort(starts.begin(), starts.end());
    c.multiplicity = count(depth, batch, starts);
    c.starts = std::move(starts);
    return c;
  }
};

/// Stage-one window-start distribution. Interior starts get weight 1; a start
/// whose window touches edge slices is up-weighted by the mean of
/// (max coverage / windows covering slice) over its slices.
inline std::vector<double> rounding_weights(std::size_t depth, std::size_t batch) {
  const std::size_t starts = depth - batch + 1;
  std::vector<double> cover_count(depth, 0.0);
  for (std::size_t s = 0; s < starts; ++s)
    for (std::size_t j = s; j < s + batch; ++j) cover_count[j] += 1.0;
  const double peak = *std::max_element(cover_count.begin(), cover_count.end());
  std::vector<double> w(starts, 0.0);
  for (std::size_t s = 0; s < starts; ++s) {
    double acc = 0.0;
    for (std::size_t j = s; j < s + batch; ++j) acc += peak / cover_count[j];
    w[s] = acc / static_cast<double>(batch);
  }
  return w;
}

namespace detail {

inline std::size_t deficiency(std::span<const std::size_t> m, std::size_t r) {
  std::size_t d = 0;
  for (std::size_t v : m) d += v < r ? r - v : 0;
  return d;
}

// Share of satisfied coverage a window holds: sum over its slices of
// min(m_j, r) / m_j. Redundant windows hold little.
inline double coverage_share(std::span<const std::size_t> m, std::size_t start, std::size_t batch, std::size_t r) {
  double share = 0.0;
  for (std::size_t j = start; j < start + batch; ++j)
    share += static_cast<double>(std::min(m[j], r)) / static_cast<double>(m[j]);
  return share;
}

struct Swap {
  std::size_t remove_index = 0;
  std::size_t add_start = 0;
  std::ptrdiff_t net = 0;  ///< deficiency reduction
};

// Alteration step: drop the window with the smallest coverage share, then add
// the start covering the most under-covered slices. Ties are broken uniformly
// at random from the cover's own stream (reservoir choice), so the result is
// still a pure function of the seed.
inline Swap greedy_swap(const std::vector<std::size_t>& starts, std::vector<std::size_t> m, std::size_t batch,
                        std::size_t r, SplitMix64& bits) {
  const std::size_t depth = m.size();
  Swap sw;
  double best_share = std::numeric_limits<double>::infinity();
  std::size_t ties = 0;
  for (std::size_t wi = 0; wi < starts.size(); ++wi) {
    const double share = coverage_share(m, starts[wi], batch, r);
    if (share < best_share - 1e-12) {
      best_share = share;
      sw.remove_index = wi;
      ties = 1;
    } else if (share <= best_share + 1e-12 && bits.uniform() * static_cast<double>(++ties) < 1.0) {
      sw.remove_index = wi;
    }
  }
  const std::size_t before = deficiency(m, r);
  for (std::size_t j = starts[sw.remove_index]; j < starts[sw.remove_index] + batch; ++j) --m[j];
  std::vector<std::size_t> prefix(depth + 1, 0);
  for (std::size_t j = 0; j < depth; ++j) prefix[j + 1] = prefix[j] + (m[j] < r ? 1 : 0);
  std::size_t best_gain = 0;
  ties = 0;
  for (std::size_t a = 0; a + batch <= depth; ++a) {
    const std::size_t gain = prefix[a + batch] - prefix[a];
    if (gain > best_gain) {
      best_gain = gain;
      sw.add_start = a;
      ties = 1;
    } else if (gain == best_gain && gain > 0 && bits.uniform() * static_cast<double>(++ties) < 1.0) {
      sw.add_start = a;
    }
  }
  for (std::size_t j = sw.add_start; j < sw.add_start + batch; ++j) ++m[j];
  sw.net = static_cast<std::ptrdiff_t>(before) - static_cast<std::ptrdiff_t>(deficiency(m, r));
  return sw;
}

// Exhaustive single swap by net deficiency reduction; used when the greedy
// step makes no progress. Ties go to the lowest removed start, then the lowest
// added start.
inline Swap best_swap(const std::vector<std::size_t>& starts, std::vector<std::size_t> m, std::size_t batch,
                      std::size_t r) {
  const std::size_t depth = m.size();
  const std::size_t n_starts = depth - batch + 1;
  Swap best;
  best.net = std::numeric_limits<std::ptrdiff_t>::min();
  std::vector<std::size_t> prefix(depth + 1, 0);
  std::size_t last_start = std::numeric_limits<std::size_t>::max();
  for (std::size_t wi = 0; wi < starts.size(); ++wi) {
    const std::size_t s = starts[wi];
    if (s == last_start) continue;  // identical windows give identical swaps
    last_start = s;
    std::ptrdiff_t loss = 0;
    for (std::size_t j = s; j < s + batch; ++j) {
      if (m[j] <= r) ++loss;
      --m[j];
    }
    for (std::size_t j = 0; j < depth; ++j) prefix[j + 1] = prefix[j] + (m[j] < r ? 1 : 0);
    for (std::size_t a = 0; a < n_starts; ++a) {
      const auto gain = static_cast<std::ptrdiff_t>(prefix[a + batch] - prefix[a]);
      const std::ptrdiff_t net = gain - loss;
      if (net > best.net) best = Swap{wi, a, net};
    }
    for (std::size_t j = s; j < s + batch; ++j) ++m[j];
  }
  return best;
}

}  // namespace detail

/// Sample a cover. Stage 1 draws K starts i.i.d. from rounding_weights. Stage 2
/// swaps windows (greedy_swap, else best_swap) until every slice reaches r. If
/// no improving swap exists, stage 1 is redrawn from the same stream, up to
/// kCoverRedraws times. After that the cover is rebuilt as r canonical tilings
/// plus the lowest remaining drawn windows, which always satisfies the coverage.
inline constexpr std::size_t kCoverRedraws = 64;

inline BatchCover sample_cover(const CoverSpec& spec) {
  spec.validate();
  const std::size_t batch = spec.batch_size;
  const std::size_t r = spec.coverage;
  SplitMix64 bits(derive_seed(spec.seed, StreamTag::cover, {}));
  const std::vector<double> weights = rounding_weights(spec.depth, batch);
  std::vector<double> cdf(weights.size());
  double acc = 0.0;
  for (std::size_t i = 0; i < weights.size(); ++i) cdf[i] = (acc += weights[i]);

  BatchCover cover;
  cover.depth = spec.depth;
  cover.batch_size = batch;
  std::vector<std::size_t> starts(spec.budget), m;
  for (std::size_t attempt = 0; attempt <= kCoverRedraws; ++attempt) {
    for (std::size_t& s : starts) {
      const double u = bits.uniform() * acc;
      s = static_cast<std::size_t>(std::upper_bound(cdf.begin(), cdf.end(), u) - cdf.begin());
      s = std::min(s, weights.size() - 1);
    }
    std::sort(starts.begin(), starts.end());
    m = BatchCover::count(spec.depth, batch, starts);
    cover.fallback = false;
    while (detail::deficiency(m, r) > 0) {
      detail::Swap sw = detail::greedy_swap(starts, m, batch, r, bits);
      if (sw.net <= 0) sw = detail::best_swap(starts, m, batch, r);
      if (sw.net <= 0) {
        cover.fallback = true;
        break;
      }
      const std::size_t old = starts[sw.remove_index];
      for (std::size_t j = old; j < old + batch; ++j) --m[j];
      for (std::size_t j = sw.add_start; j < sw.add_start + batch; ++j) ++m[j];
      starts[sw.remove_index] = sw.add_start;
      std::sort(starts.begin(), starts.end());
      ++cover.swaps;
    }
    if (!cover.fallback) break;
    ++cover.redraws;
  }

  if (cover.fallback) {
    std::vector<std::size_t> tiling;
    for (std::size_t s = 0; s < spec.depth; s += batch) tiling.push_back(std::min(s, spec.depth - batch));
    std::vector<std::size_t> rebuilt;
    for (std::size_t c = 0; c < r; ++c) rebuilt.insert(rebuilt.end(), tiling.begin(), tiling.end());
    std::vector<std::size_t> keep = starts;
    keep.resize(spec.budget - rebuilt.size());
    rebuilt.insert(rebuilt.end(), keep.begin(), keep.end());
    starts = std::move(rebuilt);
    std::sort(starts.begin(), starts.end());
    m = BatchCover::count(spec.depth, batch, starts);
  }
  cover.starts = std::move(starts);
  cover.multiplicity = std::move(m);
  return cover;
}

/// Deterministic sliding-window cover (comparison baseline): K evenly spaced
/// starts from 0 to D - B.
inline BatchCover sliding_window_cover(const CoverSpec& spec) {
  spec.validate();
  std::vector<std::size_t> starts(spec.budget);
  const std::size_t span = spec.depth - spec.batch_size;
  for (std::size_t i = 0; i < spec.budget; ++i)
    starts[i] = spec.budget == 1 ? 0 : (i * span + (spec.budget - 1) / 2) / (spec.budget - 1);
  return BatchCover::from_starts(spec.depth, spec.batch_size, std::move(starts));
}

/// Per-slice running sums of window results.
template <class Acc = double>
class MergeAccumulator {
 public:
  MergeAccumulator(Dims dims) : dims_(dims), sums_(dims.size(), Acc{0}), counts_(dims.depth, 0) {}

  void add(std::size_t z, std::span<const double> values) {
    require(z < dims_.depth && values.size() == dims_.slice_size(), "merge: slice out of range or wrong size");
    Acc* dst = sums_.data() + z * dims_.slice_size();
    for (std::size_t i = 0; i < values.size(); ++i) dst[i] += static_cast<Acc>(values[i]);
    ++counts_[z];
  }
  void add(std::size_t z, const Plane& p) { add(z, std::span<const double>(p.data(), static_cast<std::size_t>(p.size()))); }

  std::size_t count(std::size_t z) const { return counts_[z]; }

  /// Write means into `target`; slices with no contribution keep their value.
  void finish(Volume& target) const {
    require(target.dims() == dims_, "merge: target dims mismatch");
    for (std::size_t z = 0; z < dims_.depth; ++z) {
      if (counts_[z] == 0) continue;
      const Acc* src = sums_.data() + z * dims_.slice_size();
      auto dst = target.slice_span(z);
      const auto n = static_cast<Acc>(counts_[z]);
      for (std::size_t i = 0; i < dst.size(); ++i) dst[i] = static_cast<float>(src[i] / n);
    }
  }

 private:
  Dims dims_;
  std::vector<Acc> sums_;
  std::vector<std::size_t> counts_;
};

/// Average per-window results into a volume. results[w] holds the B slices of
/// window cover.starts[w]. Slices outside every window are copied from `base`
/// (zeros when no base is given).
inline Volume merge_multicovered(std::span<const Volume> results, const BatchCover& cover,
                                 const Volume* base = nullptr) {
  require(results.size() == cover.starts.size(),
          "merge: " + std::to_string(results.size()) + " window results for " + std::to_string(cover.starts.size()) +
              " windows");
  require(!results.empty(), "merge: no window results");
  const Dims wd = results.front().dims();
  const Dims full{cover.depth, wd.height, wd.width};
  MergeAccumulator<double> acc(full);
  for (std::size_t w = 0; w < results.size(); ++w) {
    const Volume& r = results[w];
    if (r.depth() != cover.batch_size || r.height() != wd.height || r.width() != wd.width)
      throw InvalidInput("merge: window " + std::to_string(w) + " result has dims " + r.dims().str());
    for (std::size_t j = 0; j < cover.batch_size; ++j) {
      auto src = r.slice_span(j);
      std::vector<double> tmp(src.begin(), src.end());
      acc.add(cover.starts[w] + j, tmp);
    }
  }
  Volume out = base ? *base : Volume(full);
  require(out.dims() == full, "merge: base volume dims mismatch");
  acc.finish(out);
  return out;
}

}  // namespace psi3d
