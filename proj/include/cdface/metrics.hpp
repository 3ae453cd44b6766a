#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <string>
#include <vector>

#include "cdface/common.hpp"
#include "cdface/geometry.hpp"
#include "cdface/tensor.hpp"

namespace cdface {

namespace detail {

template <class T>
T vertex_error(const Tensor<T>& a, const Tensor<T>& b, std::size_t t,
               std::size_t v) {
  T acc{};
  for (std::size_t k = 0; k < 3; ++k) {
    const T d = a(t, 3 * v + k) - b(t, 3 * v + k);
    acc += d * d;
  }
  return std::sqrt(acc);
}

template <class T>
void check_comparable(const MotionSequence<T>& a, const MotionSequence<T>& b) {
  require(a.offsets.same_shape(b.offsets),
          "metric: sequences must have equal frame and vertex counts");
}

}  // namespace detail

/// Lip vertex error: mean over frames of the worst per-vertex L2 error in
/// the lip region.
template <class T>
T lve(const MotionSequence<T>& pred, const MotionSequence<T>& gt,
      const RegionPartition& part) {
  detail::check_comparable(pred, gt);
  require(pred.vertex_count() == part.total_count(),
          "lve: partition does not match sequence width");
  T total{};
  for (std::size_t t = 0; t < pred.frames(); ++t) {
    T worst{};
    for (std::size_t v : part.lip_indices)
      worst = std::max(worst,
                       detail::vertex_error(pred.offsets, gt.offsets, t, v));
    total += worst;
  }
  return total / static_cast<T>(pred.frames());
}

/// Mean vertex error over every frame and every vertex.
template <class T>
T mve(const MotionSequence<T>& pred, const MotionSequence<T>& gt) {
  detail::check_comparable(pred, gt);
  T total{};
  for (std::size_t t = 0; t < pred.frames(); ++t)
    for (std::size_t v = 0; v < pred.vertex_count(); ++v)
      total += detail::vertex_error(pred.offsets, gt.offsets, t, v);
  return total / static_cast<T>(pred.frames() * pred.vertex_count());
}

/// Upper-face dynamics deviation: per upper-face vertex, the standard
/// deviation over time of the offset magnitude, differenced against ground
/// truth and averaged. Signed; population std (divide by T).
template <class T>
T fdd(const MotionSequence<T>& pred, const MotionSequence<T>& gt,
      const RegionPartition& part) {
  detail::check_comparable(pred, gt);
  require(pred.vertex_count() == part.total_count(),
          "fdd: partition does not match sequence width");
  require(!part.upper_indices.empty(), "fdd: empty upper region");
  const auto std_of_magnitude = [](const Tensor<T>& x, std::size_t v) {
    const std::size_t frames = x.rows();
    std::vector<T> mag(frames);
    for (std::size_t t = 0; t < frames; ++t) {
      T acc{};
      for (std::size_t k = 0; k < 3; ++k) acc += x(t, 3 * v + k) * x(t, 3 * v + k);
      mag[t] = std::sqrt(acc);
    }
    T mean{};
    for (T m : mag) mean += m;
    mean /= static_cast<T>(frames);
    T var{};
    for (T m : mag) var += (m - mean) * (m - mean);
    return std::sqrt(var / static_cast<T>(frames));
  };
  T total{};
  for (std::size_t v : part.upper_indices)
    total += std_of_magnitude(pred.offsets, v) - std_of_magnitude(gt.offsets, v);
  return total / static_cast<T>(part.upper_indices.size());
}

namespace detail {

/// Mean over ordered pairs of whole-sequence distances, restricted to the
/// given flat columns (empty = all).
template <class T>
T pairwise_mean_distance(const std::vector<MotionSequence<T>>& samples,
                         const std::vector<std::size_t>& cols) {
  require(samples.size() >= 2, "pairwise distance: needs at least two samples");
  for (const auto& s : samples)
    require(s.offsets.same_shape(samples[0].offsets),
            "pairwise distance: unequal sequence shapes");
  std::vector<Tensor<T>> views;
  views.reserve(samples.size());
  for (const auto& s : samples)
    views.push_back(cols.empty() ? s.offsets
                                 : select_columns(s.offsets, cols));
  T total{};
  const std::size_t s = samples.size();
  for (std::size_t i = 0; i < s; ++i)
    for (std::size_t j = 0; j < s; ++j)
      if (j != i) total += tensor_distance(views[i], views[j]);
  return total / static_cast<T>(s * (s - 1));
}

}  // namespace detail

/// Average pairwise distance across the full face.
template <class T>
T apd(const std::vector<MotionSequence<T>>& samples) {
  return detail::pairwise_mean_distance(samples, {});
}

template <class T>
T upd(const std::vector<MotionSequence<T>>& samples,
      const RegionPartition& part) {
  require(!part.upper_indices.empty(), "upd: empty upper region");
  return detail::pairwise_mean_distance(samples,
                                        region_columns(part.upper_indices));
}

template <class T>
T lpd(const std::vector<MotionSequence<T>>& samples,
      const RegionPartition& part) {
  return detail::pairwise_mean_distance(samples,
                                        region_columns(part.lip_indices));
}

/// Minimum pairwise distance: how close the two most similar samples are.
template <class T>
T mpd(const std::vector<MotionSequence<T>>& samples) {
  require(samples.size() >= 2, "mpd: needs at least two samples");
  T best = std::numeric_limits<T>::infinity();
  for (std::size_t i = 0; i < samples.size(); ++i)
    for (std::size_t j = i + 1; j < samples.size(); ++j) {
      require(samples[j].offsets.same_shape(samples[i].offsets),
              "mpd: unequal sequence shapes");
      best = std::min(best,
                      tensor_distance(samples[i].offsets, samples[j].offsets));
    }
  return best;
}

/// Mean of lve over all samples against the one ground truth.
template <class T>
T alve(const std::vector<MotionSequence<T>>& samples,
       const MotionSequence<T>& gt, const RegionPartition& part) {
  require(!samples.empty(), "alve: empty sample set");
  T total{};
  for (const auto& s : samples) total += lve(s, gt, part);
  return total / static_cast<T>(samples.size());
}

/// Per-sample lip aperture curves, for plotting mouth open/close behavior.
template <class T>
std::vector<std::vector<T>> aperture_curves(
    const std::vector<MotionSequence<T>>& samples, const FaceTemplate<T>& face,
    const RegionPartition& part) {
  std::vector<std::vector<T>> out;
  out.reserve(samples.size());
  for (const auto& s : samples) out.push_back(lip_aperture(s, face, part));
  return out;
}

/// Named metric values with units, in insertion order.
struct MetricReport {
  struct Entry {
    std::string name;
    double value;
    std::string units;
  };
  std::vector<Entry> entries;
  std::size_t sample_count = 0;
  std::size_t clip_count = 0;

  void add(const std::string& name, double value, const std::string& units) {
    entries.push_back({name, value, units});
  }
  bool has(const std::string& name) const {
    for (const auto& e : entries)
      if (e.name == name) return true;
    return false;
  }
  double get(const std::string& name) const {
    for (const auto& e : entries)
      if (e.name == name) return e.value;
    throw ContractError("metric report: no entry named " + name);
  }
};

}  // namespace cdface
