#include <algorithm>
#include <filesystem>
#include <vector>

#include <catch2/catch_amalgamated.hpp>

#include "cdface/audio.hpp"
#include "test_util.hpp"

using namespace cdface;
using namespace testutil;

namespace {

std::filesystem::path fresh_dir(const std::string& tag) {
  const auto dir = std::filesystem::temp_directory_path() /
                   ("cdface_audio_" + tag);
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

AudioFeatureSequence<double> ramp_track(std::size_t rows, std::size_t cols) {
  AudioFeatureSequence<double> f;
  f.features = Tensor<double>(rows, cols);
  for (std::size_t t = 0; t < rows; ++t)
    for (std::size_t c = 0; c < cols; ++c)
      f.features(t, c) = static_cast<double>(t) + 0.1 * static_cast<double>(c);
  f.native_rate = 100.0;
  return f;
}

}  // namespace

TEST_CASE("alignment interpolates linearly with endpoints fixed", "[audio]") {
  SECTION("three-row ramp stretched to five rows") {
    const AudioFeatureSequence<double> f = ramp_track(3, 1);
    const Tensor<double> out = align_to_motion(f, 25.0, 5);
    const std::vector<double> expect = {0.0, 0.5, 1.0, 1.5, 2.0};
    REQUIRE(out.rows() == 5);
    for (std::size_t t = 0; t < 5; ++t)
      REQUIRE(close(out(t, 0), expect[t], 1e-15));
  }
  SECTION("same length is the identity") {
    Rng rng(71);
    const AudioFeatureSequence<double> f{random_tensor<double>(7, 3, rng),
                                         100.0, ""};
    REQUIRE(align_to_motion(f, 25.0, 7) == f.features);
  }
  SECTION("single target row takes the first input row") {
    const AudioFeatureSequence<double> f = ramp_track(4, 2);
    const Tensor<double> out = align_to_motion(f, 25.0, 1);
    REQUIRE(out.rows() == 1);
    REQUIRE(out(0, 0) == f.features(0, 0));
    REQUIRE(out(0, 1) == f.features(0, 1));
  }
  SECTION("single input row broadcasts to every target row") {
    const AudioFeatureSequence<double> f = ramp_track(1, 3);
    const Tensor<double> out = align_to_motion(f, 25.0, 6);
    for (std::size_t t = 0; t < 6; ++t)
      for (std::size_t c = 0; c < 3; ++c)
        REQUIRE(out(t, c) == f.features(0, c));
  }
  SECTION("endpoints, convex bounds, and monotonicity on random tracks") {
    Rng rng(72);
    for (int rep = 0; rep < 50; ++rep) {
      const std::size_t ta = 2 + rng.index(12);
      const std::size_t target = 2 + rng.index(12);
      const std::size_t cols = 1 + rng.index(4);
      const AudioFeatureSequence<double> f{
          random_tensor<double>(ta, cols, rng), 100.0, ""};
      const Tensor<double> out = align_to_motion(f, 25.0, target);
      for (std::size_t c = 0; c < cols; ++c) {
        REQUIRE(out(0, c) == f.features(0, c));
        REQUIRE(out(target - 1, c) == f.features(ta - 1, c));
        double lo = f.features(0, c), hi = lo;
        for (std::size_t t = 0; t < ta; ++t) {
          lo = std::min(lo, f.features(t, c));
          hi = std::max(hi, f.features(t, c));
        }
        for (std::size_t t = 0; t < target; ++t) {
          REQUIRE(out(t, c) >= lo - 1e-12);
          REQUIRE(out(t, c) <= hi + 1e-12);
        }
      }
      // A monotone ramp stays monotone under linear resampling.
      const Tensor<double> mono =
          align_to_motion(ramp_track(ta, 1), 25.0, target);
      for (std::size_t t = 1; t < target; ++t)
        REQUIRE(mono(t, 0) >= mono(t - 1, 0));
    }
  }
  SECTION("degenerate targets are errors") {
    const AudioFeatureSequence<double> f = ramp_track(3, 1);
    REQUIRE_THROWS_AS(align_to_motion(f, 25.0, 0), ContractError);
    const AudioFeatureSequence<double> empty{Tensor<double>(), 100.0, ""};
    REQUIRE_THROWS_AS(align_to_motion(empty, 25.0, 4), ContractError);
  }
}

TEST_CASE("precomputed feature containers round-trip", "[audio]") {
  Rng rng(73);
  const auto dir = fresh_dir("precomputed");
  Tensor<float> features(6, 4);
  for (auto& v : features) v = static_cast<float>(rng.uniform(-2, 2));
  save_feature_container(dir, features, 16000.0);

  const auto provider = make_provider<float>("precomputed");
  REQUIRE(provider->name() == "precomputed");
  const AudioFeatureSequence<float> got = provider->extract(dir);
  REQUIRE(got.features == features);
  REQUIRE(got.native_rate == 16000.0);
  REQUIRE(got.source_tag == "precomputed");

  SECTION("missing native_rate is an io error") {
    const auto bad = fresh_dir("no_rate");
    io::json manifest;
    io::save_array(bad, manifest, "features", features);
    io::write_json(bad / "manifest.json", manifest);
    REQUIRE_THROWS_AS(provider->extract(bad), IoError);
  }
  SECTION("missing directory is an io error") {
    REQUIRE_THROWS_AS(provider->extract(dir / "nope"), IoError);
  }
}

TEST_CASE("synthetic provider reads the clip audio track", "[audio]") {
  Rng rng(74);
  const auto dir = fresh_dir("synthetic");
  Tensor<float> audio(5, 9);
  for (auto& v : audio) v = static_cast<float>(rng.uniform(-1, 1));
  io::json manifest;
  manifest["fps"] = 25.0;
  io::save_array(dir, manifest, "audio", audio);
  io::write_json(dir / "manifest.json", manifest);

  const auto provider = make_provider<double>("synthetic");
  REQUIRE(provider->name() == "synthetic");
  const AudioFeatureSequence<double> got = provider->extract(dir);
  REQUIRE(got.features.rows() == 5);
  REQUIRE(got.features.cols() == 9);
  for (std::size_t i = 0; i < audio.size(); ++i)
    REQUIRE(got.features.data()[i] == static_cast<double>(audio.data()[i]));
  REQUIRE(got.native_rate == 25.0);

  SECTION("manifest without fps is an io error") {
    io::json stripped;
    io::save_array(dir, stripped, "audio", audio);
    io::write_json(dir / "manifest.json", stripped);
    REQUIRE_THROWS_AS(provider->extract(dir), IoError);
  }
}

TEST_CASE("unknown provider id is an io error", "[audio]") {
  REQUIRE_THROWS_AS(make_provider<double>("wav2vec"), IoError);
}
