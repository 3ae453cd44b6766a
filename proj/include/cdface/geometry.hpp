#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "cdface/common.hpp"
#include "cdface/tensor.hpp"

namespace cdface {

/// Neutral face: V vertices as a flat xyz array. All motion in the toolkit
/// is expressed as per-frame offsets over this template.
template <class T>
struct FaceTemplate {
  std::vector<T> vertices;  // length 3V, vertex v at [3v, 3v+2]

  std::size_t vertex_count() const { return vertices.size() / 3; }
};

template <class T>
void validate(const FaceTemplate<T>& f) {
  require(!f.vertices.empty() && f.vertices.size() % 3 == 0,
          "face template: vertex array length must be a positive multiple of 3");
  for (const T& v : f.vertices)
    require(std::isfinite(static_cast<double>(v)),
            "face template: non-finite coordinate");
}

/// Disjoint lip / upper-face split of the vertex ids, plus the vertex pair
/// whose distance defines the lip aperture.
struct RegionPartition {
  std::vector<std::size_t> lip_indices;    // sorted, unique
  std::vector<std::size_t> upper_indices;  // sorted, unique
  std::pair<std::size_t, std::size_t> closure_pair{0, 0};  // (upper, lower) lip vertex

  std::size_t upper_count() const { return upper_indices.size(); }
  std::size_t total_count() const {
    return lip_indices.size() + upper_indices.size();
  }
};

inline void validate(const RegionPartition& p, std::size_t vertex_count) {
  auto check_sorted = [](const std::vector<std::size_t>& ids,
                         const char* which) {
    for (std::size_t i = 1; i < ids.size(); ++i)
      require(ids[i - 1] < ids[i],
              std::string("partition: ") + which +
                  " indices must be sorted and unique");
  };
  check_sorted(p.lip_indices, "lip");
  check_sorted(p.upper_indices, "upper");
  require(!p.lip_indices.empty(), "partition: lip region is empty");
  require(p.total_count() == vertex_count,
          "partition: regions must cover every vertex exactly once");
  // Sorted-unique sides whose sizes sum to V partition iff they are disjoint.
  std::vector<std::size_t> merged;
  merged.reserve(vertex_count);
  std::merge(p.lip_indices.begin(), p.lip_indices.end(),
             p.upper_indices.begin(), p.upper_indices.end(),
             std::back_inserter(merged));
  for (std::size_t i = 0; i < merged.size(); ++i)
    require(merged[i] == i, "partition: regions overlap or skip a vertex id");
  const bool pair_in_lip =
      std::binary_search(p.lip_indices.begin(), p.lip_indices.end(),
                         p.closure_pair.first) &&
      std::binary_search(p.lip_indices.begin(), p.lip_indices.end(),
                         p.closure_pair.second);
  require(pair_in_lip, "partition: closure pair must lie in the lip region");
  require(p.closure_pair.first != p.closure_pair.second,
          "partition: closure pair must be two distinct vertices");
}

/// Offsets over the template, one row per frame (T x 3V).
template <class T>
struct MotionSequence {
  Tensor<T> offsets;
  double fps = 0.0;
  std::string subject_id;  // empty when unknown

  std::size_t frames() const { return offsets.rows(); }
  std::size_t vertex_count() const { return offsets.cols() / 3; }
};

template <class T>
void validate(const MotionSequence<T>& m) {
  require(m.frames() >= 1, "motion: at least one frame required");
  require(m.offsets.cols() % 3 == 0, "motion: width must be a multiple of 3");
  require(m.offsets.all_finite(), "motion: non-finite offset");
}

/// Per-frame binary gate: 1 where the ground-truth lip aperture exceeds the
/// threshold (mouth open), 0 on closure frames.
struct ClosureMask {
  std::vector<std::uint8_t> values;
  double threshold = 0.0;

  std::size_t size() const { return values.size(); }
  bool open(std::size_t t) const { return values[t] != 0; }
};

/// Flat column ids (x,y,z per vertex) for a region's vertex list.
inline std::vector<std::size_t> region_columns(
    const std::vector<std::size_t>& vertex_ids) {
  std::vector<std::size_t> cols;
  cols.reserve(vertex_ids.size() * 3);
  for (std::size_t v : vertex_ids) {
    cols.push_back(3 * v);
    cols.push_back(3 * v + 1);
    cols.push_back(3 * v + 2);
  }
  return cols;
}

template <class T>
Tensor<T> select_columns(const Tensor<T>& x,
                         const std::vector<std::size_t>& cols) {
  Tensor<T> out(x.rows(), cols.size());
  for (std::size_t c = 0; c < cols.size(); ++c) {
    require(cols[c] < x.cols(), "select_columns: column out of range");
    for (std::size_t r = 0; r < x.rows(); ++r) out(r, c) = x(r, cols[c]);
  }
  return out;
}

/// Distance between the closure-pair vertices of (template + offsets), per
/// frame.
template <class T>
std::vector<T> lip_aperture(const MotionSequence<T>& motion,
                            const FaceTemplate<T>& face,
                            const RegionPartition& part) {
  const std::size_t v = face.vertex_count();
  require(motion.vertex_count() == v,
          "lip_aperture: motion and template vertex counts disagree");
  require(part.closure_pair.first < v && part.closure_pair.second < v,
          "lip_aperture: closure pair out of range for this template");
  const std::size_t a = 3 * part.closure_pair.first;
  const std::size_t b = 3 * part.closure_pair.second;
  std::vector<T> out(motion.frames());
  for (std::size_t t = 0; t < motion.frames(); ++t) {
    T acc{};
    for (std::size_t k = 0; k < 3; ++k) {
      const T pa = face.vertices[a + k] + motion.offsets(t, a + k);
      const T pb = face.vertices[b + k] + motion.offsets(t, b + k);
      const T d = pa - pb;
      acc += d * d;
    }
    out[t] = std::sqrt(acc);
  }
  return out;
}

/// m_t = 1 iff aperture[t] > eps, strictly.
template <class T>
ClosureMask closure_mask(const std::vector<T>& aperture, double eps) {
  require(eps > 0.0, "closure_mask: threshold must be positive");
  ClosureMask mask;
  mask.threshold = eps;
  mask.values.resize(aperture.size());
  for (std::size_t t = 0; t < aperture.size(); ++t) {
    require(std::isfinite(static_cast<double>(aperture[t])),
            "closure_mask: non-finite aperture");
    mask.values[t] = static_cast<double>(aperture[t]) > eps ? 1 : 0;
  }
  return mask;
}

/// Pure index selection into (lip, upper) views, in sorted-vertex-id order.
template <class T>
std::pair<MotionSequence<T>, MotionSequence<T>> split_regions(
    const MotionSequence<T>& motion, const RegionPartition& part) {
  require(motion.vertex_count() == part.total_count(),
          "split_regions: partition does not match motion width");
  MotionSequence<T> lip{select_columns(motion.offsets,
                                       region_columns(part.lip_indices)),
                        motion.fps, motion.subject_id};
  MotionSequence<T> upper{select_columns(motion.offsets,
                                         region_columns(part.upper_indices)),
                          motion.fps, motion.subject_id};
  return {std::move(lip), std::move(upper)};
}

/// Inverse of split_regions; scatter both views back into full-face order.
template <class T>
MotionSequence<T> merge_regions(const MotionSequence<T>& lip,
                                const MotionSequence<T>& upper,
                                const RegionPartition& part) {
  require(lip.offsets.cols() == 3 * part.lip_indices.size(),
          "merge_regions: lip view width mismatch");
  require(upper.offsets.cols() == 3 * part.upper_indices.size(),
          "merge_regions: upper view width mismatch");
  require(lip.frames() == upper.frames(),
          "merge_regions: frame counts disagree");
  require(lip.fps == upper.fps, "merge_regions: fps disagree");
  MotionSequence<T> out{Tensor<T>(lip.frames(), 3 * part.total_count()),
                        lip.fps, lip.subject_id};
  const auto scatter = [&](const Tensor<T>& view,
                           const std::vector<std::size_t>& ids) {
    const std::vector<std::size_t> cols = region_columns(ids);
    for (std::size_t c = 0; c < cols.size(); ++c)
      for (std::size_t r = 0; r < view.rows(); ++r)
        out.offsets(r, cols[c]) = view(r, c);
  };
  scatter(lip.offsets, part.lip_indices);
  scatter(upper.offsets, part.upper_indices);
  return out;
}

}  // namespace cdface
