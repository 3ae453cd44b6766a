#pragma once

#include <cmath>
#include <cstddef>
#include <filesystem>
#include <memory>
#include <string>

#include "cdface/common.hpp"
#include "cdface/container.hpp"
#include "cdface/tensor.hpp"

namespace cdface {

template <class T>
struct AudioFeatureSequence {
  Tensor<T> features;  // T_a x d_a
  double native_rate = 0.0;
  std::string source_tag;
};

/// Linear time interpolation to exactly target_T rows, endpoints preserved.
/// Both tracks cover the same clip, so index-space mapping is duration
/// preserving; the fps argument is kept for validation at call sites.
template <class T>
Tensor<T> align_to_motion(const AudioFeatureSequence<T>& f, double target_fps,
                          std::size_t target_T) {
  (void)target_fps;
  require(target_T >= 1, "align_to_motion: target frame count must be >= 1");
  const std::size_t ta = f.features.rows();
  require(ta >= 1, "align_to_motion: empty feature track");
  Tensor<T> out(target_T, f.features.cols());
  for (std::size_t t = 0; t < target_T; ++t) {
    double pos = 0.0;
    if (target_T > 1)
      pos = static_cast<double>(t) * static_cast<double>(ta - 1) /
            static_cast<double>(target_T - 1);
    const std::size_t i0 = static_cast<std::size_t>(pos);
    const std::size_t i1 = std::min(i0 + 1, ta - 1);
    const T frac = static_cast<T>(pos - static_cast<double>(i0));
    for (std::size_t c = 0; c < out.cols(); ++c)
      out(t, c) = f.features(i0, c) +
                  frac * (f.features(i1, c) - f.features(i0, c));
  }
  return out;
}

/// Feature source abstraction. The paper-scale pretrained speech encoder is
/// out of scope; shipped providers read corpus ground truth or precomputed
/// feature containers, and a real extractor slots in as another provider.
template <class T>
class AudioProvider {
 public:
  virtual ~AudioProvider() = default;
  virtual AudioFeatureSequence<T> extract(
      const std::filesystem::path& source) const = 0;
  virtual std::string name() const = 0;
};

/// Reads the phoneme-embedding track stored with a synthetic corpus clip.
template <class T>
class SyntheticCorpusProvider : public AudioProvider<T> {
 public:
  AudioFeatureSequence<T> extract(
      const std::filesystem::path& clip_dir) const override {
    const io::json manifest = io::read_json(clip_dir / "manifest.json");
    Tensor<float> raw = io::load_array(clip_dir, manifest, "audio");
    require_io(manifest.contains("fps"), "clip manifest: missing fps");
    return {raw.template cast<T>(), manifest["fps"].get<double>(),
            name()};
  }
  std::string name() const override { return "synthetic"; }
};

/// Reads a standalone feature container: manifest.json + features array.
template <class T>
class PrecomputedProvider : public AudioProvider<T> {
 public:
  AudioFeatureSequence<T> extract(
      const std::filesystem::path& dir) const override {
    const io::json manifest = io::read_json(dir / "manifest.json");
    Tensor<float> raw = io::load_array(dir, manifest, "features");
    require_io(manifest.contains("native_rate"),
               "feature container: missing native_rate");
    return {raw.template cast<T>(), manifest["native_rate"].get<double>(),
            name()};
  }
  std::string name() const override { return "precomputed"; }
};

template <class T>
std::unique_ptr<AudioProvider<T>> make_provider(const std::string& id) {
  if (id == "synthetic") return std::make_unique<SyntheticCorpusProvider<T>>();
  if (id == "precomputed") return std::make_unique<PrecomputedProvider<T>>();
  throw IoError("unknown audio provider: " + id);
}

/// Writes a standalone feature container readable by PrecomputedProvider.
inline void save_feature_container(const std::filesystem::path& dir,
                                   const Tensor<float>& features,
                                   double native_rate) {
  std::filesystem::create_directories(dir);
  io::json manifest;
  manifest["native_rate"] = native_rate;
  io::save_array(dir, manifest, "features", features);
  io::write_json(dir / "manifest.json", manifest);
}

}  // namespace cdface
