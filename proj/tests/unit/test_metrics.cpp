#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <numeric>
#include <vector>

#include <catch2/catch_amalgamated.hpp>

#include "cdface/metrics.hpp"
#include "test_util.hpp"

using namespace cdface;
using namespace testutil;

namespace {

MotionSequence<double> random_motion(std::size_t frames, std::size_t vertices,
                                     Rng& rng) {
  return {random_tensor<double>(frames, 3 * vertices, rng), 25.0, ""};
}

std::vector<MotionSequence<double>> random_motion_set(std::size_t n,
                                                      std::size_t frames,
                                                      std::size_t vertices,
                                                      Rng& rng) {
  std::vector<MotionSequence<double>> out;
  for (std::size_t i = 0; i < n; ++i)
    out.push_back(random_motion(frames, vertices, rng));
  return out;
}

RegionPartition random_partition(std::size_t vertices, Rng& rng) {
  std::vector<std::size_t> ids(vertices);
  std::iota(ids.begin(), ids.end(), std::size_t{0});
  rng.shuffle(ids.begin(), ids.end());
  const std::size_t lips = 2 + rng.index(vertices - 2);  // >=2 lip, >=1 upper
  RegionPartition part;
  part.lip_indices.assign(ids.begin(), ids.begin() + lips);
  part.upper_indices.assign(ids.begin() + lips, ids.end());
  std::sort(part.lip_indices.begin(), part.lip_indices.end());
  std::sort(part.upper_indices.begin(), part.upper_indices.end());
  part.closure_pair = {part.lip_indices[0], part.lip_indices[1]};
  validate(part, vertices);
  return part;
}

double vert_err(const MotionSequence<double>& a, const MotionSequence<double>& b,
                std::size_t t, std::size_t v) {
  double sq = 0;
  for (std::size_t k = 0; k < 3; ++k) {
    const double d = a.offsets(t, 3 * v + k) - b.offsets(t, 3 * v + k);
    sq += d * d;
  }
  return std::sqrt(sq);
}

double oracle_lve(const MotionSequence<double>& p, const MotionSequence<double>& g,
                  const RegionPartition& part) {
  double total = 0;
  for (std::size_t t = 0; t < p.frames(); ++t) {
    double worst = 0;
    for (std::size_t v : part.lip_indices)
      worst = std::max(worst, vert_err(p, g, t, v));
    total += worst;
  }
  return total / static_cast<double>(p.frames());
}

double oracle_mve(const MotionSequence<double>& p,
                  const MotionSequence<double>& g) {
  double total = 0;
  for (std::size_t t = 0; t < p.frames(); ++t)
    for (std::size_t v = 0; v < p.vertex_count(); ++v)
      total += vert_err(p, g, t, v);
  return total / static_cast<double>(p.frames() * p.vertex_count());
}

double popstd_magnitude(const MotionSequence<double>& m, std::size_t v) {
  std::vector<double> mag(m.frames());
  for (std::size_t t = 0; t < m.frames(); ++t) {
    double sq = 0;
    for (std::size_t k = 0; k < 3; ++k)
      sq += m.offsets(t, 3 * v + k) * m.offsets(t, 3 * v + k);
    mag[t] = std::sqrt(sq);
  }
  const double mean =
      std::accumulate(mag.begin(), mag.end(), 0.0) / mag.size();
  double var = 0;
  for (double x : mag) var += (x - mean) * (x - mean);
  return std::sqrt(var / mag.size());
}

double oracle_fdd(const MotionSequence<double>& p, const MotionSequence<double>& g,
                  const RegionPartition& part) {
  double total = 0;
  for (std::size_t v : part.upper_indices)
    total += popstd_magnitude(p, v) - popstd_magnitude(g, v);
  return total / static_cast<double>(part.upper_indices.size());
}

double seq_dist(const MotionSequence<double>& a, const MotionSequence<double>& b,
                const std::vector<std::size_t>& verts) {
  double sq = 0;
  for (std::size_t t = 0; t < a.frames(); ++t)
    for (std::size_t v : verts)
      for (std::size_t k = 0; k < 3; ++k) {
        const double d = a.offsets(t, 3 * v + k) - b.offsets(t, 3 * v + k);
        sq += d * d;
      }
  return std::sqrt(sq);
}

std::vector<std::size_t> all_vertices(std::size_t v) {
  std::vector<std::size_t> ids(v);
  std::iota(ids.begin(), ids.end(), std::size_t{0});
  return ids;
}

double oracle_pairwise(const std::vector<MotionSequence<double>>& s,
                       const std::vector<std::size_t>& verts) {
  double total = 0;
  for (std::size_t i = 0; i < s.size(); ++i)
    for (std::size_t j = 0; j < s.size(); ++j)
      if (j != i) total += seq_dist(s[i], s[j], verts);
  return total / static_cast<double>(s.size() * (s.size() - 1));
}

double oracle_mpd(const std::vector<MotionSequence<double>>& s,
                  const std::vector<std::size_t>& verts) {
  double best = std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < s.size(); ++i)
    for (std::size_t j = i + 1; j < s.size(); ++j)
      best = std::min(best, seq_dist(s[i], s[j], verts));
  return best;
}

}  // namespace

TEST_CASE("error metrics against brute-force oracles", "[metrics]") {
  Rng rng(51);
  for (int rep = 0; rep < 120; ++rep) {
    const std::size_t frames = 1 + rng.index(20);
    const std::size_t vertices = 3 + rng.index(8);
    const RegionPartition part = random_partition(vertices, rng);
    const MotionSequence<double> pred = random_motion(frames, vertices, rng);
    const MotionSequence<double> gt = random_motion(frames, vertices, rng);
    REQUIRE(close(lve(pred, gt, part), oracle_lve(pred, gt, part), 1e-6));
    REQUIRE(close(mve(pred, gt), oracle_mve(pred, gt), 1e-6));
    REQUIRE(close(fdd(pred, gt, part), oracle_fdd(pred, gt, part), 1e-6, 1e-9));
  }
}

TEST_CASE("diversity metrics against brute-force oracles", "[metrics]") {
  Rng rng(52);
  for (int rep = 0; rep < 120; ++rep) {
    const std::size_t n = 2 + rng.index(5);
    const std::size_t frames = 1 + rng.index(12);
    const std::size_t vertices = 3 + rng.index(8);
    const RegionPartition part = random_partition(vertices, rng);
    const auto s = random_motion_set(n, frames, vertices, rng);
    const auto all = all_vertices(vertices);
    REQUIRE(close(apd(s), oracle_pairwise(s, all), 1e-6));
    REQUIRE(close(upd(s, part), oracle_pairwise(s, part.upper_indices), 1e-6));
    REQUIRE(close(lpd(s, part), oracle_pairwise(s, part.lip_indices), 1e-6));
    REQUIRE(close(mpd(s), oracle_mpd(s, all), 1e-6));
    const MotionSequence<double> gt = random_motion(frames, vertices, rng);
    double alve_expect = 0;
    for (const auto& x : s) alve_expect += oracle_lve(x, gt, part);
    REQUIRE(close(alve(s, gt, part), alve_expect / n, 1e-6));
  }
}

TEST_CASE("error metric examples", "[metrics]") {
  Rng rng(53);
  const std::size_t frames = 5, vertices = 6;
  const RegionPartition part = random_partition(vertices, rng);
  const MotionSequence<double> gt = random_motion(frames, vertices, rng);

  SECTION("self-comparison is exactly zero") {
    REQUIRE(lve(gt, gt, part) == 0.0);
    REQUIRE(mve(gt, gt) == 0.0);
    REQUIRE(fdd(gt, gt, part) == 0.0);
    REQUIRE(alve<double>({gt, gt}, gt, part) == 0.0);
  }
  SECTION("uniform displacement gives its own norm everywhere") {
    // Every vertex moved by (0.3, -0.4, 1.2), norm 1.3.
    MotionSequence<double> pred = gt;
    for (std::size_t t = 0; t < frames; ++t)
      for (std::size_t v = 0; v < vertices; ++v) {
        pred.offsets(t, 3 * v) += 0.3;
        pred.offsets(t, 3 * v + 1) += -0.4;
        pred.offsets(t, 3 * v + 2) += 1.2;
      }
    REQUIRE(close(mve(pred, gt), 1.3, 1e-12));
    REQUIRE(close(lve(pred, gt, part), 1.3, 1e-12));
  }
  SECTION("lve takes the worst lip vertex, not the mean") {
    MotionSequence<double> pred = gt;
    const std::size_t a = part.lip_indices[0], b = part.lip_indices[1];
    for (std::size_t t = 0; t < frames; ++t) {
      pred.offsets(t, 3 * a) += 1.0;
      pred.offsets(t, 3 * b) += 5.0;
    }
    REQUIRE(close(lve(pred, gt, part), 5.0, 1e-12));
  }
  SECTION("fdd doubles with doubled dynamics") {
    // One upper vertex oscillating along x between 0 and 2: magnitude std 1.
    MotionSequence<double> base{Tensor<double>(4, 3 * vertices), 25.0, ""};
    const std::size_t v = part.upper_indices[0];
    for (std::size_t t = 0; t < 4; ++t)
      base.offsets(t, 3 * v) = (t % 2 == 0) ? 0.0 : 2.0;
    MotionSequence<double> doubled = base;
    for (auto& x : doubled.offsets) x *= 2.0;
    const double expect = 1.0 / static_cast<double>(part.upper_count());
    REQUIRE(close(fdd(doubled, base, part), expect, 1e-12));
  }
  SECTION("fdd is antisymmetric") {
    const MotionSequence<double> pred = random_motion(frames, vertices, rng);
    REQUIRE(close(fdd(pred, gt, part), -fdd(gt, pred, part), 1e-12, 1e-15));
  }
}

TEST_CASE("diversity metric properties", "[metrics]") {
  Rng rng(54);
  const std::size_t frames = 6, vertices = 5;
  const RegionPartition part = random_partition(vertices, rng);
  auto s = random_motion_set(4, frames, vertices, rng);

  SECTION("identical samples collapse every distance to zero") {
    const std::vector<MotionSequence<double>> same(3, s[0]);
    REQUIRE(apd(same) == 0.0);
    REQUIRE(upd(same, part) == 0.0);
    REQUIRE(lpd(same, part) == 0.0);
    REQUIRE(mpd(same) == 0.0);
  }
  SECTION("mean pairwise distance dominates the minimum") {
    REQUIRE(apd(s) >= mpd(s));
  }
  SECTION("sample order does not matter") {
    const double a = apd(s), m = mpd(s), u = upd(s, part), l = lpd(s, part);
    std::reverse(s.begin(), s.end());
    REQUIRE(close(apd(s), a, 1e-12));
    REQUIRE(close(mpd(s), m, 1e-12));
    REQUIRE(close(upd(s, part), u, 1e-12));
    REQUIRE(close(lpd(s, part), l, 1e-12));
  }
  SECTION("for two samples the regions compose in quadrature") {
    const std::vector<MotionSequence<double>> two = {s[0], s[1]};
    const double full = apd(two), lip = lpd(two, part), up = upd(two, part);
    REQUIRE(close(full, std::sqrt(lip * lip + up * up), 1e-9));
  }
}

TEST_CASE("metric error contracts", "[metrics]") {
  Rng rng(55);
  const RegionPartition part = random_partition(5, rng);
  const MotionSequence<double> gt = random_motion(6, 5, rng);

  SECTION("unequal frame counts are an error, never truncated") {
    const MotionSequence<double> shorter = random_motion(5, 5, rng);
    REQUIRE_THROWS_AS(lve(shorter, gt, part), ContractError);
    REQUIRE_THROWS_AS(mve(shorter, gt), ContractError);
    REQUIRE_THROWS_AS(fdd(shorter, gt, part), ContractError);
    REQUIRE_THROWS_AS(apd<double>({shorter, gt}), ContractError);
    REQUIRE_THROWS_AS(mpd<double>({shorter, gt}), ContractError);
  }
  SECTION("unequal vertex counts are an error") {
    const MotionSequence<double> narrow = random_motion(6, 4, rng);
    REQUIRE_THROWS_AS(mve(narrow, gt), ContractError);
  }
  SECTION("partition must match the sequence width") {
    const RegionPartition other = random_partition(7, rng);
    REQUIRE_THROWS_AS(lve(gt, gt, other), ContractError);
    REQUIRE_THROWS_AS(fdd(gt, gt, other), ContractError);
  }
  SECTION("pairwise metrics need at least two samples") {
    REQUIRE_THROWS_AS(apd<double>({gt}), ContractError);
    REQUIRE_THROWS_AS(mpd<double>({gt}), ContractError);
    REQUIRE_THROWS_AS(upd<double>({gt}, part), ContractError);
    REQUIRE_THROWS_AS(lpd<double>({gt}, part), ContractError);
  }
  SECTION("alve rejects an empty sample set") {
    REQUIRE_THROWS_AS(alve<double>({}, gt, part), ContractError);
  }
  SECTION("fdd and upd reject an empty upper region") {
    RegionPartition lips_only;
    lips_only.lip_indices = {0, 1, 2, 3, 4};
    lips_only.closure_pair = {0, 1};
    REQUIRE_THROWS_AS(fdd(gt, gt, lips_only), ContractError);
    REQUIRE_THROWS_AS(upd<double>({gt, gt}, lips_only), ContractError);
  }
}

TEST_CASE("aperture curves per sample", "[metrics]") {
  Rng rng(56);
  const std::size_t vertices = 5;
  const RegionPartition part = random_partition(vertices, rng);
  FaceTemplate<double> face;
  face.vertices.assign(3 * vertices, 0.0);
  const auto s = random_motion_set(3, 4, vertices, rng);
  const auto curves = aperture_curves(s, face, part);
  REQUIRE(curves.size() == 3);
  for (std::size_t i = 0; i < 3; ++i) {
    const auto expect = lip_aperture(s[i], face, part);
    REQUIRE(curves[i].size() == expect.size());
    for (std::size_t t = 0; t < expect.size(); ++t)
      REQUIRE(curves[i][t] == expect[t]);
  }
}

TEST_CASE("metric report lookup", "[metrics]") {
  MetricReport report;
  report.add("lve", 0.25, "mesh units");
  report.add("apd", 1.5, "mesh units");
  report.sample_count = 4;
  report.clip_count = 2;
  REQUIRE(report.has("lve"));
  REQUIRE(!report.has("mpd"));
  REQUIRE(report.get("apd") == 1.5);
  REQUIRE(report.entries.size() == 2);
  REQUIRE(report.entries[0].name == "lve");
  REQUIRE(report.entries[0].units == "mesh units");
  REQUIRE_THROWS_AS(report.get("mpd"), ContractError);
}
