#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "cdface/audio.hpp"
#include "cdface/common.hpp"
#include "cdface/container.hpp"
#include "cdface/geometry.hpp"
#include "cdface/metrics.hpp"
#include "cdface/rng.hpp"
#include "cdface/tensor.hpp"

namespace cdface {

namespace fs = std::filesystem;

struct PhonemeSpec {
  std::string id;
  std::vector<float> embedding;  // d_a entries; the last channel is reserved
                                 // for within-phoneme progress in the track
  float aperture_target = 0.0f;  // mesh units; at or below the generator
                                 // threshold means full closure (plosive)
  std::size_t duration_frames = 4;
};

struct StyleSpec {
  std::string id;
  float lip_amplitude = 1.0f;  // scales mouth opening
  float lip_phase = 0.0f;      // shifts the within-phoneme envelope; never
                               // moves closure frames
  std::vector<float> upper_coeffs;  // expression basis coefficients
};

struct GeneratorConfig {
  std::uint64_t seed = 1;
  std::size_t num_styles = 2;
  std::size_t num_sentences = 20;
  std::size_t vertices = 30;
  double fps = 25.0;
  double epsilon = 0.05;  // closure threshold baked into the corpus
  std::size_t phonemes_per_sentence = 6;
  double test_fraction = 0.2;
};

struct CorpusClip {
  AudioFeatureSequence<float> audio;
  MotionSequence<float> motion;
  ClosureMask mask_gt;
  std::string style_id;
  std::size_t style_index = 0;
  std::size_t sentence = 0;
  std::string split;  // "train" | "test"
  std::string dir_name;
  std::vector<std::pair<std::size_t, std::size_t>> phoneme_timeline;  // (phoneme, start frame)
};

struct Corpus {
  GeneratorConfig gen;
  FaceTemplate<float> face;
  RegionPartition part;
  std::vector<StyleSpec> styles;
  std::vector<PhonemeSpec> phonemes;
  std::size_t d_a = 0;
  std::vector<CorpusClip> clips;  // manifest order

  std::vector<std::size_t> clip_indices(const std::string& split) const {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < clips.size(); ++i)
      if (split == "all" || clips[i].split == split) out.push_back(i);
    return out;
  }
};

/// Fixed inventory: three full-closure consonants plus five vowels with
/// distinct opening targets. Embeddings are one-hot over the inventory with
/// one extra progress channel.
inline std::vector<PhonemeSpec> phoneme_inventory() {
  struct Row {
    const char* id;
    float target;
    std::size_t dur;
  };
  const Row rows[] = {{"p", 0.0f, 3},  {"b", 0.0f, 3},   {"m", 0.0f, 4},
                      {"aa", 0.6f, 6}, {"eh", 0.5f, 5},  {"ow", 0.45f, 5},
                      {"iy", 0.35f, 4}, {"uw", 0.3f, 4}};
  const std::size_t n = sizeof(rows) / sizeof(rows[0]);
  std::vector<PhonemeSpec> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    out[i].id = rows[i].id;
    out[i].aperture_target = rows[i].target;
    out[i].duration_frames = rows[i].dur;
    out[i].embedding.assign(n + 1, 0.0f);
    out[i].embedding[i] = 1.0f;
  }
  return out;
}

inline constexpr std::size_t kUpperBases = 3;

namespace detail {

inline double envelope(double u) { return 0.75 + 0.25 * std::sin(6.283185307179586 * u); }

inline double basis_response(std::size_t b, std::size_t phoneme) {
  return 0.5 + 0.5 * std::sin(1.3 * static_cast<double>(b + 1) +
                              2.1 * static_cast<double>(phoneme));
}

inline double basis_pattern(std::size_t b, std::size_t ordinal,
                            std::size_t coord) {
  return 0.25 * std::sin(0.9 * static_cast<double>(b + 1) *
                             static_cast<double>(ordinal) +
                         1.7 * static_cast<double>(coord) + 0.5);
}

inline double pearson(const std::vector<float>& a,
                      const std::vector<float>& b) {
  const std::size_t n = a.size();
  double ma = 0, mb = 0;
  for (std::size_t i = 0; i < n; ++i) {
    ma += a[i];
    mb += b[i];
  }
  ma /= static_cast<double>(n);
  mb /= static_cast<double>(n);
  double cov = 0, va = 0, vb = 0;
  for (std::size_t i = 0; i < n; ++i) {
    cov += (a[i] - ma) * (b[i] - mb);
    va += (a[i] - ma) * (a[i] - ma);
    vb += (b[i] - mb) * (b[i] - mb);
  }
  if (va == 0 || vb == 0) return 1.0;  // flat curves: treat as aligned
  return cov / std::sqrt(va * vb);
}

}  // namespace detail

/// Lip strip is the low vertex ids, closure pair in its middle; the strip
/// size grows with V but stays a minority of the face.
inline RegionPartition toy_partition(std::size_t vertices) {
  require(vertices >= 6, "generator: need at least 6 vertices");
  const std::size_t lip_count = std::max<std::size_t>(4, vertices / 3);
  require(vertices - lip_count >= 2, "generator: upper region too small");
  RegionPartition part;
  for (std::size_t v = 0; v < lip_count; ++v) part.lip_indices.push_back(v);
  for (std::size_t v = lip_count; v < vertices; ++v)
    part.upper_indices.push_back(v);
  part.closure_pair = {lip_count / 2 - 1, lip_count / 2};
  return part;
}

/// Abstract vertex cloud; only the closure pair's coincidence matters, so
/// zero offsets mean a fully closed mouth.
inline FaceTemplate<float> toy_template(std::size_t vertices,
                                        const RegionPartition& part) {
  FaceTemplate<float> face;
  face.vertices.resize(3 * vertices);
  for (std::size_t v = 0; v < vertices; ++v) {
    face.vertices[3 * v + 0] =
        0.1f * (static_cast<float>(v) - static_cast<float>(vertices) / 2.0f);
    face.vertices[3 * v + 1] = (v < part.lip_indices.size()) ? 0.0f : 0.5f;
    face.vertices[3 * v + 2] = 0.05f * static_cast<float>((v * 7) % 5);
  }
  const auto [cu, cl] = part.closure_pair;
  for (std::size_t k = 0; k < 3; ++k)
    face.vertices[3 * cu + k] = face.vertices[3 * cl + k];
  return face;
}

inline std::vector<StyleSpec> make_styles(std::size_t n, Rng& rng) {
  require(n >= 2, "generator: need at least two styles");
  std::vector<StyleSpec> styles(n);
  for (std::size_t k = 0; k < n; ++k) {
    char buf[16];
    std::snprintf(buf, sizeof(buf), "style%02zu", k);
    styles[k].id = buf;
    const float frac = static_cast<float>(k) / static_cast<float>(n - 1);
    styles[k].lip_amplitude = 0.8f + 0.4f * frac;
    styles[k].lip_phase = 0.1f * frac;
    styles[k].upper_coeffs.resize(kUpperBases);
    for (std::size_t b = 0; b < kUpperBases; ++b) {
      const float mag = static_cast<float>(rng.uniform(0.4, 1.2));
      styles[k].upper_coeffs[b] = rng.uniform() < 0.5 ? -mag : mag;
    }
  }
  return styles;
}

/// Random phoneme string; guaranteed to contain at least one full closure so
/// every clip exercises the mask.
inline std::vector<std::size_t> make_sentence(
    const std::vector<PhonemeSpec>& inventory, std::size_t length, double eps,
    Rng& rng) {
  std::vector<std::size_t> plosives;
  for (std::size_t i = 0; i < inventory.size(); ++i)
    if (inventory[i].aperture_target <= eps) plosives.push_back(i);
  require(!plosives.empty(), "generator: inventory has no closure phoneme");
  std::vector<std::size_t> sentence(length);
  bool has_plosive = false;
  for (std::size_t s = 0; s < length; ++s) {
    sentence[s] = rng.index(inventory.size());
    if (inventory[sentence[s]].aperture_target <= eps) has_plosive = true;
  }
  if (!has_plosive)
    sentence[rng.index(length)] = plosives[rng.index(plosives.size())];
  return sentence;
}

/// Deterministic per-vertex opening weights; the closure pair moves with
/// weight one so the aperture equals the scripted curve exactly.
inline float lip_weight(std::size_t v, const RegionPartition& part) {
  if (v == part.closure_pair.first || v == part.closure_pair.second)
    return 1.0f;
  return 0.35f + 0.4f * static_cast<float>((v * 13) % 7) / 7.0f;
}

/// Renders one (sentence, style) pair. The audio track depends only on the
/// sentence; lip amplitude/phase and upper-face coefficients are the only
/// style inputs, so every style shares the closure frames.
inline CorpusClip render_clip(const std::vector<std::size_t>& sentence,
                              std::size_t sentence_idx,
                              const std::vector<PhonemeSpec>& inventory,
                              const StyleSpec& style, std::size_t style_index,
                              const GeneratorConfig& cfg,
                              const RegionPartition& part,
                              const FaceTemplate<float>& face) {
  const std::size_t d_a = inventory[0].embedding.size();
  std::size_t frames = 0;
  for (std::size_t p : sentence) frames += inventory[p].duration_frames;

  CorpusClip clip;
  clip.style_id = style.id;
  clip.style_index = style_index;
  clip.sentence = sentence_idx;
  clip.audio.features = Tensor<float>(frames, d_a);
  clip.audio.native_rate = cfg.fps;
  clip.audio.source_tag = "synthetic";
  clip.motion.offsets = Tensor<float>(frames, 3 * cfg.vertices);
  clip.motion.fps = cfg.fps;
  clip.motion.subject_id = style.id;

  const std::size_t lip_count = part.lip_indices.size();
  std::vector<std::uint8_t> expected_mask(frames);
  std::size_t t = 0;
  for (std::size_t p : sentence) {
    const PhonemeSpec& ph = inventory[p];
    clip.phoneme_timeline.emplace_back(p, t);
    const bool closed = ph.aperture_target <= cfg.epsilon;
    const std::size_t ph_index = static_cast<std::size_t>(
        std::find_if(inventory.begin(), inventory.end(),
                     [&](const PhonemeSpec& q) { return q.id == ph.id; }) -
        inventory.begin());
    for (std::size_t f = 0; f < ph.duration_frames; ++f, ++t) {
      const double u = (static_cast<double>(f) + 0.5) /
                       static_cast<double>(ph.duration_frames);
      for (std::size_t c = 0; c < d_a; ++c)
        clip.audio.features(t, c) = ph.embedding[c];
      clip.audio.features(t, d_a - 1) = static_cast<float>(u);

      const double aperture =
          closed ? 0.0
                 : ph.aperture_target * style.lip_amplitude *
                       detail::envelope(u + style.lip_phase);
      expected_mask[t] = closed ? 0 : 1;
      for (std::size_t v : part.lip_indices) {
        const float w = lip_weight(v, part);
        const float side = (v <= part.closure_pair.first) ? 1.0f : -1.0f;
        clip.motion.offsets(t, 3 * v + 0) =
            0.2f * static_cast<float>(aperture) * w;
        clip.motion.offsets(t, 3 * v + 1) =
            side * 0.5f * static_cast<float>(aperture) * w;
      }
      for (std::size_t v : part.upper_indices) {
        const std::size_t ordinal = v - lip_count;
        for (std::size_t k = 0; k < 3; ++k) {
          double off = 0.0;
          for (std::size_t b = 0; b < style.upper_coeffs.size(); ++b)
            off += style.upper_coeffs[b] *
                   detail::basis_response(b, ph_index) * std::sin(3.141592653589793 * u) *
                   detail::basis_pattern(b, ordinal, k);
          clip.motion.offsets(t, 3 * v + k) = static_cast<float>(off);
        }
      }
    }
  }

  clip.mask_gt = closure_mask(lip_aperture(clip.motion, face, part),
                              cfg.epsilon);
  require(clip.mask_gt.values == expected_mask,
          "generator self-check: geometry mask disagrees with the timeline");
  return clip;
}

inline io::json partition_to_json(const RegionPartition& part) {
  return io::json{{"lip", part.lip_indices},
                  {"upper", part.upper_indices},
                  {"closure_pair", {part.closure_pair.first,
                                    part.closure_pair.second}}};
}

inline RegionPartition partition_from_json(const io::json& j) {
  RegionPartition part;
  part.lip_indices = j.at("lip").get<std::vector<std::size_t>>();
  part.upper_indices = j.at("upper").get<std::vector<std::size_t>>();
  part.closure_pair = {j.at("closure_pair")[0].get<std::size_t>(),
                       j.at("closure_pair")[1].get<std::size_t>()};
  return part;
}

/// Writes one clip directory: manifest plus raw arrays. The manifest repeats
/// the partition and closure pair so a clip is self-describing.
inline void save_clip(const fs::path& dir, const CorpusClip& clip,
                      const RegionPartition& part, double epsilon) {
  fs::create_directories(dir);
  io::json manifest;
  manifest["fps"] = clip.motion.fps;
  manifest["style"] = clip.style_id;
  manifest["style_index"] = clip.style_index;
  manifest["sentence"] = clip.sentence;
  manifest["split"] = clip.split;
  manifest["epsilon"] = epsilon;
  manifest["V"] = clip.motion.vertex_count();
  manifest["T"] = clip.motion.frames();
  manifest["d_a"] = clip.audio.features.cols();
  manifest["partition"] = partition_to_json(part);
  manifest["phoneme_timeline"] = clip.phoneme_timeline;
  io::save_array(dir, manifest, "audio", clip.audio.features);
  io::save_array(dir, manifest, "motion", clip.motion.offsets);
  Tensor<float> mask(clip.mask_gt.size(), 1);
  for (std::size_t t = 0; t < clip.mask_gt.size(); ++t)
    mask(t, 0) = clip.mask_gt.open(t) ? 1.0f : 0.0f;
  io::save_array(dir, manifest, "mask", mask);
  io::write_json(dir / "manifest.json", manifest);
}

inline CorpusClip load_clip(const fs::path& dir) {
  const io::json manifest = io::read_json(dir / "manifest.json");
  CorpusClip clip;
  clip.audio.features = io::load_array(dir, manifest, "audio");
  clip.audio.native_rate = manifest.at("fps").get<double>();
  clip.audio.source_tag = "synthetic";
  clip.motion.offsets = io::load_array(dir, manifest, "motion");
  clip.motion.fps = clip.audio.native_rate;
  clip.motion.subject_id = manifest.at("style").get<std::string>();
  clip.style_id = clip.motion.subject_id;
  clip.style_index = manifest.at("style_index").get<std::size_t>();
  clip.sentence = manifest.at("sentence").get<std::size_t>();
  clip.split = manifest.at("split").get<std::string>();
  clip.dir_name = dir.filename().string();
  const Tensor<float> mask = io::load_array(dir, manifest, "mask");
  require_io(mask.rows() == clip.motion.frames() && mask.cols() == 1,
             "clip: mask shape disagrees with motion");
  clip.mask_gt.threshold = manifest.at("epsilon").get<double>();
  clip.mask_gt.values.resize(mask.rows());
  for (std::size_t t = 0; t < mask.rows(); ++t)
    clip.mask_gt.values[t] = mask(t, 0) != 0.0f ? 1 : 0;
  for (const auto& e : manifest.at("phoneme_timeline"))
    clip.phoneme_timeline.emplace_back(e[0].get<std::size_t>(),
                                       e[1].get<std::size_t>());
  require_io(clip.audio.features.rows() == clip.motion.frames(),
             "clip: audio and motion frame counts disagree");
  return clip;
}

/// Renders every (sentence, style) pair, runs the generator self-checks, and
/// writes the corpus. Byte-identical output for identical configs.
inline void generate_corpus(const GeneratorConfig& cfg, const fs::path& root) {
  require(cfg.num_sentences >= 1, "generator: need at least one sentence");
  require(cfg.fps > 0 && cfg.epsilon > 0, "generator: fps and epsilon must be positive");
  require(cfg.phonemes_per_sentence >= 2, "generator: sentences too short");
  const RegionPartition part = toy_partition(cfg.vertices);
  validate(part, cfg.vertices);
  const FaceTemplate<float> face = toy_template(cfg.vertices, part);
  const std::vector<PhonemeSpec> inventory = phoneme_inventory();

  Rng rng(cfg.seed);
  const std::vector<StyleSpec> styles = make_styles(cfg.num_styles, rng);
  std::vector<std::vector<std::size_t>> sentences(cfg.num_sentences);
  for (auto& s : sentences)
    s = make_sentence(inventory, cfg.phonemes_per_sentence, cfg.epsilon, rng);

  const std::size_t train_sentences = cfg.num_sentences -
      static_cast<std::size_t>(std::floor(cfg.test_fraction *
                                          static_cast<double>(cfg.num_sentences)));

  std::vector<CorpusClip> clips;
  for (std::size_t s = 0; s < cfg.num_sentences; ++s) {
    std::vector<MotionSequence<float>> per_style;
    std::vector<std::vector<float>> curves;
    for (std::size_t k = 0; k < styles.size(); ++k) {
      CorpusClip clip = render_clip(sentences[s], s, inventory, styles[k], k,
                                    cfg, part, face);
      clip.split = s < train_sentences ? "train" : "test";
      char buf[32];
      std::snprintf(buf, sizeof(buf), "s%03zu_%s", s, styles[k].id.c_str());
      clip.dir_name = buf;
      per_style.push_back(clip.motion);
      curves.push_back(lip_aperture(clip.motion, face, part));
      clips.push_back(std::move(clip));
    }
    // Self-checks: one audio, many motions; closures shared bit-exactly.
    const std::size_t base = clips.size() - styles.size();
    for (std::size_t k = 1; k < styles.size(); ++k) {
      require(clips[base].audio.features == clips[base + k].audio.features,
              "generator self-check: audio must not depend on style");
      require(clips[base].mask_gt.values == clips[base + k].mask_gt.values,
              "generator self-check: closure mask must not depend on style");
      require(detail::pearson(curves[0], curves[k]) > 0.9,
              "generator self-check: aperture curves diverged across styles");
    }
    require(apd(per_style) > 0,
            "generator self-check: styles produced identical motion");
  }

  fs::create_directories(root);
  io::json manifest;
  manifest["generator"] = {{"seed", cfg.seed},
                           {"num_styles", cfg.num_styles},
                           {"num_sentences", cfg.num_sentences},
                           {"vertices", cfg.vertices},
                           {"fps", cfg.fps},
                           {"epsilon", cfg.epsilon},
                           {"phonemes_per_sentence", cfg.phonemes_per_sentence},
                           {"test_fraction", cfg.test_fraction}};
  manifest["d_a"] = inventory[0].embedding.size();
  manifest["template"] = face.vertices;
  manifest["partition"] = partition_to_json(part);
  io::json style_list = io::json::array();
  for (const auto& st : styles)
    style_list.push_back({{"id", st.id},
                          {"lip_amplitude", st.lip_amplitude},
                          {"lip_phase", st.lip_phase},
                          {"upper_coeffs", st.upper_coeffs}});
  manifest["styles"] = style_list;
  io::json ph_list = io::json::array();
  for (const auto& ph : inventory)
    ph_list.push_back({{"id", ph.id},
                       {"aperture_target", ph.aperture_target},
                       {"duration_frames", ph.duration_frames},
                       {"embedding", ph.embedding}});
  manifest["phonemes"] = ph_list;
  manifest["sentences"] = sentences;
  io::json clip_list = io::json::array();
  for (const auto& clip : clips)
    clip_list.push_back({{"dir", clip.dir_name},
                         {"sentence", clip.sentence},
                         {"style", clip.style_id},
                         {"split", clip.split}});
  manifest["clips"] = clip_list;
  io::write_json(root / "corpus.json", manifest);
  for (const auto& clip : clips)
    save_clip(root / "clips" / clip.dir_name, clip, part, cfg.epsilon);
}

inline Corpus load_corpus(const fs::path& root) {
  const io::json manifest = io::read_json(root / "corpus.json");
  Corpus corpus;
  const io::json& g = manifest.at("generator");
  corpus.gen.seed = g.at("seed").get<std::uint64_t>();
  corpus.gen.num_styles = g.at("num_styles").get<std::size_t>();
  corpus.gen.num_sentences = g.at("num_sentences").get<std::size_t>();
  corpus.gen.vertices = g.at("vertices").get<std::size_t>();
  corpus.gen.fps = g.at("fps").get<double>();
  corpus.gen.epsilon = g.at("epsilon").get<double>();
  corpus.gen.phonemes_per_sentence =
      g.at("phonemes_per_sentence").get<std::size_t>();
  corpus.gen.test_fraction = g.at("test_fraction").get<double>();
  corpus.face.vertices = manifest.at("template").get<std::vector<float>>();
  corpus.part = partition_from_json(manifest.at("partition"));
  validate(corpus.part, corpus.face.vertex_count());
  corpus.d_a = manifest.at("d_a").get<std::size_t>();
  for (const auto& st : manifest.at("styles")) {
    StyleSpec s;
    s.id = st.at("id").get<std::string>();
    s.lip_amplitude = st.at("lip_amplitude").get<float>();
    s.lip_phase = st.at("lip_phase").get<float>();
    s.upper_coeffs = st.at("upper_coeffs").get<std::vector<float>>();
    corpus.styles.push_back(std::move(s));
  }
  for (const auto& ph : manifest.at("phonemes")) {
    PhonemeSpec p;
    p.id = ph.at("id").get<std::string>();
    p.aperture_target = ph.at("aperture_target").get<float>();
    p.duration_frames = ph.at("duration_frames").get<std::size_t>();
    p.embedding = ph.at("embedding").get<std::vector<float>>();
    corpus.phonemes.push_back(std::move(p));
  }
  for (const auto& entry : manifest.at("clips"))
    corpus.clips.push_back(
        load_clip(root / "clips" / entry.at("dir").get<std::string>()));
  return corpus;
}

/// Ground-truth multimodality of one sentence: pairwise distance across its
/// per-style motions. The trained sampler's APD is judged against this.
inline double gt_interstyle_apd(const Corpus& corpus, std::size_t sentence) {
  std::vector<MotionSequence<float>> motions;
  for (const auto& clip : corpus.clips)
    if (clip.sentence == sentence) motions.push_back(clip.motion);
  require(motions.size() >= 2, "gt_interstyle_apd: sentence has one render");
  return apd(motions);
}

struct ExternalLayout {
  std::string name;
  std::size_t vertices;
  double fps;
};

inline ExternalLayout external_layout(const std::string& name) {
  if (name == "biwi") return {"biwi", 23370, 25.0};
  if (name == "vocaset") return {"vocaset", 5023, 60.0};
  throw IoError("unknown external layout: " + name);
}

/// Shape-validating loader stub for externally prepared data in the clip
/// container format. Checks every clip manifest against the layout's vertex
/// count and rate, and returns the clip directories in sorted order.
/// Untested against the real licensed datasets.
inline std::vector<fs::path> scan_external_dataset(const std::string& layout_name,
                                                   const fs::path& root) {
  const ExternalLayout layout = external_layout(layout_name);
  const fs::path clips = root / "clips";
  require_io(fs::is_directory(clips),
             "external dataset: missing clips directory under " + root.string());
  std::vector<fs::path> dirs;
  for (const auto& entry : fs::directory_iterator(clips))
    if (entry.is_directory()) dirs.push_back(entry.path());
  std::sort(dirs.begin(), dirs.end());
  for (const auto& dir : dirs) {
    const io::json manifest = io::read_json(dir / "manifest.json");
    require_io(manifest.at("V").get<std::size_t>() == layout.vertices,
               dir.string() + ": vertex count does not match " + layout.name);
    require_io(manifest.at("fps").get<double>() == layout.fps,
               dir.string() + ": fps does not match " + layout.name);
  }
  return dirs;
}

}  // namespace cdface
