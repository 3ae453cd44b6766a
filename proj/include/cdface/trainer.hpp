#pragma once

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <map>
#include <numeric>
#include <optional>
#include <ostream>
#include <string>
#include <utility>
#include <vector>

#include "cdface/audio.hpp"
#include "cdface/autodiff.hpp"
#include "cdface/codebook.hpp"
#include "cdface/common.hpp"
#include "cdface/container.hpp"
#include "cdface/corpus.hpp"
#include "cdface/geometry.hpp"
#include "cdface/losses.hpp"
#include "cdface/metrics.hpp"
#include "cdface/nn.hpp"
#include "cdface/optim.hpp"
#include "cdface/querier.hpp"
#include "cdface/rng.hpp"
#include "cdface/tensor.hpp"

namespace cdface {

struct TrainConfig {
  std::string stage = "prior";  // prior | query
  std::string region = "both";  // prior stage scope: lip | upper | both
  std::uint64_t seed = 7;
  double lr = 1e-4;
  double weight_decay = 1e-4;
  std::size_t batch = 8;
  std::size_t d_a = 0;  // 0: take from corpus

  std::size_t prior_epochs = 200;
  std::size_t K = 256, d = 64, h = 1;
  std::size_t prior_d_model = 64, prior_heads = 4, prior_depth = 2,
              prior_ffn_mult = 4;
  bool causal_context = true;

  std::size_t query_epochs = 100;
  std::size_t n_lip = 5, n_upper = 3;
  std::size_t query_d_model = 64, query_heads = 4, query_depth = 2,
              query_ffn_mult = 4;
  bool per_sequence_min = false;
  bool use_closure_mask = true;  // ablation switch: false routes the lip
                                 // losses through the unmasked forms
  LossWeights weights;
};

inline void validate(const TrainConfig& c) {
  require(c.stage == "prior" || c.stage == "query",
          "config: stage must be prior or query");
  require(c.region == "lip" || c.region == "upper" || c.region == "both",
          "config: region must be lip, upper or both");
  require(c.lr > 0 && c.weight_decay >= 0, "config: bad optimizer settings");
  require(c.batch >= 1, "config: batch must be positive");
  require(c.K >= 1 && c.d >= 1 && c.h >= 1, "config: bad codebook shape");
  require(c.n_lip >= 1 && c.n_upper >= 1, "config: sample counts must be >= 1");
  validate(c.weights);
}

inline io::json loss_weights_to_json(const LossWeights& w) {
  return io::json{{"lambda_div_lip", w.lambda_div_lip},
                  {"lambda_div_upper", w.lambda_div_upper},
                  {"lambda_rec_lip", w.lambda_rec_lip},
                  {"lambda_rec_upper", w.lambda_rec_upper},
                  {"lambda_reg", w.lambda_reg},
                  {"epsilon", w.epsilon}};
}

inline LossWeights loss_weights_from_json(const io::json& j) {
  LossWeights w;
  w.lambda_div_lip = j.at("lambda_div_lip").get<double>();
  w.lambda_div_upper = j.at("lambda_div_upper").get<double>();
  w.lambda_rec_lip = j.at("lambda_rec_lip").get<double>();
  w.lambda_rec_upper = j.at("lambda_rec_upper").get<double>();
  w.lambda_reg = j.at("lambda_reg").get<double>();
  w.epsilon = j.at("epsilon").get<double>();
  return w;
}

inline io::json train_config_to_json(const TrainConfig& c) {
  return io::json{{"stage", c.stage},
                  {"region", c.region},
                  {"seed", c.seed},
                  {"lr", c.lr},
                  {"weight_decay", c.weight_decay},
                  {"batch", c.batch},
                  {"d_a", c.d_a},
                  {"prior_epochs", c.prior_epochs},
                  {"K", c.K},
                  {"d", c.d},
                  {"h", c.h},
                  {"prior_d_model", c.prior_d_model},
                  {"prior_heads", c.prior_heads},
                  {"prior_depth", c.prior_depth},
                  {"prior_ffn_mult", c.prior_ffn_mult},
                  {"causal_context", c.causal_context},
                  {"query_epochs", c.query_epochs},
                  {"n_lip", c.n_lip},
                  {"n_upper", c.n_upper},
                  {"query_d_model", c.query_d_model},
                  {"query_heads", c.query_heads},
                  {"query_depth", c.query_depth},
                  {"query_ffn_mult", c.query_ffn_mult},
                  {"per_sequence_min", c.per_sequence_min},
                  {"use_closure_mask", c.use_closure_mask},
                  {"weights", loss_weights_to_json(c.weights)}};
}

inline TrainConfig train_config_from_json(const io::json& j) {
  TrainConfig c;
  c.stage = j.at("stage").get<std::string>();
  c.region = j.at("region").get<std::string>();
  c.seed = j.at("seed").get<std::uint64_t>();
  c.lr = j.at("lr").get<double>();
  c.weight_decay = j.at("weight_decay").get<double>();
  c.batch = j.at("batch").get<std::size_t>();
  c.d_a = j.at("d_a").get<std::size_t>();
  c.prior_epochs = j.at("prior_epochs").get<std::size_t>();
  c.K = j.at("K").get<std::size_t>();
  c.d = j.at("d").get<std::size_t>();
  c.h = j.at("h").get<std::size_t>();
  c.prior_d_model = j.at("prior_d_model").get<std::size_t>();
  c.prior_heads = j.at("prior_heads").get<std::size_t>();
  c.prior_depth = j.at("prior_depth").get<std::size_t>();
  c.prior_ffn_mult = j.at("prior_ffn_mult").get<std::size_t>();
  c.causal_context = j.at("causal_context").get<bool>();
  c.query_epochs = j.at("query_epochs").get<std::size_t>();
  c.n_lip = j.at("n_lip").get<std::size_t>();
  c.n_upper = j.at("n_upper").get<std::size_t>();
  c.query_d_model = j.at("query_d_model").get<std::size_t>();
  c.query_heads = j.at("query_heads").get<std::size_t>();
  c.query_depth = j.at("query_depth").get<std::size_t>();
  c.query_ffn_mult = j.at("query_ffn_mult").get<std::size_t>();
  c.per_sequence_min = j.at("per_sequence_min").get<bool>();
  c.use_closure_mask = j.at("use_closure_mask").get<bool>();
  c.weights = loss_weights_from_json(j.at("weights"));
  validate(c);
  return c;
}

template <typename T, typename U>
Tensor<T> cast_tensor(const Tensor<U>& x) {
  Tensor<T> out(x.rows(), x.cols());
  for (std::size_t r = 0; r < x.rows(); ++r)
    for (std::size_t c = 0; c < x.cols(); ++c)
      out(r, c) = static_cast<T>(x(r, c));
  return out;
}

/// Everything a checkpoint must carry besides parameters, so a saved model
/// can synthesize without the corpus it was trained on.
template <typename T>
struct ModelDims {
  RegionPartition part;
  FaceTemplate<T> face;
  std::vector<std::string> style_ids;
  double fps = 25.0;
  std::size_t d_a = 0;
};

template <typename T>
ModelDims<T> model_dims_from_corpus(const Corpus& corpus) {
  ModelDims<T> dims;
  dims.part = corpus.part;
  dims.face.vertices.reserve(corpus.face.vertices.size());
  for (float v : corpus.face.vertices)
    dims.face.vertices.push_back(static_cast<T>(v));
  for (const auto& s : corpus.styles) dims.style_ids.push_back(s.id);
  dims.fps = corpus.gen.fps;
  dims.d_a = corpus.d_a;
  return dims;
}

/// The full model bundle: two region priors and two code queriers, each in
/// its own parameter store so stages can be frozen and checkpointed
/// independently.
template <typename T>
struct FaceModel {
  PriorConfig lip_prior_cfg, upper_prior_cfg;
  QuerierConfig lip_query_cfg, upper_query_cfg;
  nn::ParamStore<T> lip_prior_ps, upper_prior_ps, lip_query_ps, upper_query_ps;
  std::optional<RegionPrior<T>> lip_prior, upper_prior;
  std::optional<CodeQuerier<T>> lip_query, upper_query;
  ModelDims<T> dims;
  LossWeights weights;
  bool per_sequence_min = false;

  std::size_t style_index(const std::string& id) const {
    for (std::size_t i = 0; i < dims.style_ids.size(); ++i)
      if (dims.style_ids[i] == id) return i;
    throw ContractError("unknown style id: " + id);
  }

  std::size_t style_index_or(const std::string& id, std::size_t fallback) const {
    for (std::size_t i = 0; i < dims.style_ids.size(); ++i)
      if (dims.style_ids[i] == id) return i;
    require(fallback < dims.style_ids.size(), "style fallback out of range");
    return fallback;
  }

  nn::ParamStore<T>& store(const std::string& group) {
    if (group == "lip_prior") return lip_prior_ps;
    if (group == "upper_prior") return upper_prior_ps;
    if (group == "lip_query") return lip_query_ps;
    if (group == "upper_query") return upper_query_ps;
    throw ContractError("unknown parameter group: " + group);
  }
  const nn::ParamStore<T>& store(const std::string& group) const {
    return const_cast<FaceModel*>(this)->store(group);
  }
};

inline const std::vector<std::string>& model_groups() {
  static const std::vector<std::string> groups = {"lip_prior", "upper_prior",
                                                  "lip_query", "upper_query"};
  return groups;
}

template <typename T>
FaceModel<T> make_face_model(const ModelDims<T>& dims, const TrainConfig& cfg) {
  validate(cfg);
  require(dims.d_a > 0, "model: audio width unknown");
  require(!dims.style_ids.empty(), "model: no styles");
  validate(dims.part, dims.face.vertex_count());

  FaceModel<T> m;
  m.dims = dims;
  m.weights = cfg.weights;
  m.per_sequence_min = cfg.per_sequence_min;

  PriorConfig pc;
  pc.K = cfg.K;
  pc.d = cfg.d;
  pc.h = cfg.h;
  pc.d_model = cfg.prior_d_model;
  pc.heads = cfg.prior_heads;
  pc.depth = cfg.prior_depth;
  pc.ffn_mult = cfg.prior_ffn_mult;
  pc.causal_context = cfg.causal_context;
  m.lip_prior_cfg = pc;
  m.lip_prior_cfg.frame_dim = 3 * dims.part.lip_indices.size();
  m.upper_prior_cfg = pc;
  m.upper_prior_cfg.frame_dim = 3 * dims.part.upper_count();

  QuerierConfig qc;
  qc.code_dim = pc.code_dim();
  qc.audio_dim = dims.d_a;
  qc.d_model = cfg.query_d_model;
  qc.heads = cfg.query_heads;
  qc.depth = cfg.query_depth;
  qc.ffn_mult = cfg.query_ffn_mult;
  qc.num_styles = dims.style_ids.size();
  m.lip_query_cfg = qc;
  m.lip_query_cfg.n_samples = cfg.n_lip;
  m.lip_query_cfg.motion_dim = m.lip_prior_cfg.frame_dim;
  m.upper_query_cfg = qc;
  m.upper_query_cfg.n_samples = cfg.n_upper;
  m.upper_query_cfg.motion_dim = m.upper_prior_cfg.frame_dim;
  m.upper_query_cfg.lip_dim = m.lip_prior_cfg.frame_dim;

  Rng rng(cfg.seed);
  m.lip_prior.emplace(m.lip_prior_ps, "lip_prior", m.lip_prior_cfg, "lip", rng);
  m.upper_prior.emplace(m.upper_prior_ps, "upper_prior", m.upper_prior_cfg,
                        "upper", rng);
  m.lip_query.emplace(m.lip_query_ps, "lip_query", m.lip_query_cfg, rng);
  m.upper_query.emplace(m.upper_query_ps, "upper_query", m.upper_query_cfg,
                        rng);
  return m;
}

template <typename T>
FaceModel<T> make_face_model(const Corpus& corpus, const TrainConfig& cfg) {
  return make_face_model(model_dims_from_corpus<T>(corpus), cfg);
}

// -- checkpointing ----------------------------------------------------------

template <typename T>
void save_params(const fs::path& dir, io::json& manifest,
                 const std::string& group, const nn::ParamStore<T>& ps) {
  for (const auto& [name, var] : ps.items())
    io::save_array(dir, manifest, group + "." + name,
                   cast_tensor<float>(var->value));
}

template <typename T>
void load_params(const fs::path& dir, const io::json& manifest,
                 const std::string& group, nn::ParamStore<T>& ps) {
  for (const auto& [name, var] : ps.items()) {
    const Tensor<float> raw = io::load_array(dir, manifest, group + "." + name);
    require_io(raw.rows() == var->value.rows() &&
                   raw.cols() == var->value.cols(),
               "checkpoint: shape mismatch for " + group + "." + name);
    var->value = cast_tensor<T>(raw);
  }
}

/// Per-group training bookkeeping that rides along in a checkpoint: epochs
/// completed, loss curves, and optimizer moments so a resumed run continues
/// the interrupted one exactly.
template <typename T>
struct TrainState {
  std::map<std::string, std::size_t> epochs_done;
  std::map<std::string, std::vector<double>> loss_log;
  std::map<std::string, typename AdamW<T>::Snapshot> optimizer;
};

template <typename T>
void save_checkpoint(const fs::path& dir, const FaceModel<T>& model,
                     const TrainConfig& cfg, const TrainState<T>& state) {
  fs::create_directories(dir);
  io::json manifest;
  manifest["kind"] = "cdface-checkpoint";
  manifest["config"] = train_config_to_json(cfg);
  io::json md;
  md["fps"] = model.dims.fps;
  md["d_a"] = model.dims.d_a;
  md["style_ids"] = model.dims.style_ids;
  md["partition"] = partition_to_json(model.dims.part);
  md["weights"] = loss_weights_to_json(model.weights);
  md["per_sequence_min"] = model.per_sequence_min;
  manifest["model"] = md;
  Tensor<float> tmpl(1, model.dims.face.vertices.size());
  for (std::size_t i = 0; i < model.dims.face.vertices.size(); ++i)
    tmpl(0, i) = static_cast<float>(model.dims.face.vertices[i]);
  io::save_array(dir, manifest, "face_template", tmpl);

  for (const auto& group : model_groups())
    save_params(dir, manifest, group, model.store(group));

  io::json progress, logj, optj;
  for (const auto& [group, n] : state.epochs_done) progress[group] = n;
  for (const auto& [group, curve] : state.loss_log) logj[group] = curve;
  for (const auto& [group, snap] : state.optimizer) {
    optj[group] = {{"t", snap.t}, {"slots", snap.m.size()}};
    for (std::size_t i = 0; i < snap.m.size(); ++i) {
      io::save_array(dir, manifest, group + ".opt.m" + std::to_string(i),
                     cast_tensor<float>(snap.m[i]));
      io::save_array(dir, manifest, group + ".opt.v" + std::to_string(i),
                     cast_tensor<float>(snap.v[i]));
    }
  }
  manifest["progress"] = progress;
  manifest["log"] = logj;
  manifest["optimizer"] = optj;
  io::write_json(dir / "manifest.json", manifest);
}

template <typename T>
struct Checkpoint {
  FaceModel<T> model;
  TrainConfig cfg;
  TrainState<T> state;
};

template <typename T>
Checkpoint<T> load_checkpoint(const fs::path& dir) {
  const io::json manifest = io::read_json(dir / "manifest.json");
  require_io(manifest.value("kind", "") == "cdface-checkpoint",
             dir.string() + ": not a checkpoint directory");
  const TrainConfig cfg = train_config_from_json(manifest.at("config"));
  const io::json& md = manifest.at("model");

  ModelDims<T> dims;
  dims.fps = md.at("fps").get<double>();
  dims.d_a = md.at("d_a").get<std::size_t>();
  dims.style_ids = md.at("style_ids").get<std::vector<std::string>>();
  dims.part = partition_from_json(md.at("partition"));
  const Tensor<float> tmpl = io::load_array(dir, manifest, "face_template");
  dims.face.vertices.reserve(tmpl.cols());
  for (std::size_t i = 0; i < tmpl.cols(); ++i)
    dims.face.vertices.push_back(static_cast<T>(tmpl(0, i)));

  Checkpoint<T> out{make_face_model(dims, cfg), cfg, {}};
  out.model.weights = loss_weights_from_json(md.at("weights"));
  out.model.per_sequence_min = md.at("per_sequence_min").get<bool>();
  for (const auto& group : model_groups())
    load_params(dir, manifest, group, out.model.store(group));

  if (manifest.contains("progress"))
    for (const auto& [group, n] : manifest.at("progress").items())
      out.state.epochs_done[group] = n.template get<std::size_t>();
  if (manifest.contains("log"))
    for (const auto& [group, curve] : manifest.at("log").items())
      out.state.loss_log[group] = curve.template get<std::vector<double>>();
  if (manifest.contains("optimizer"))
    for (const auto& [group, meta] : manifest.at("optimizer").items()) {
      typename AdamW<T>::Snapshot snap;
      snap.t = meta.at("t").template get<long>();
      const std::size_t slots = meta.at("slots").template get<std::size_t>();
      for (std::size_t i = 0; i < slots; ++i) {
        snap.m.push_back(cast_tensor<T>(io::load_array(
            dir, manifest, group + ".opt.m" + std::to_string(i))));
        snap.v.push_back(cast_tensor<T>(io::load_array(
            dir, manifest, group + ".opt.v" + std::to_string(i))));
      }
      out.state.optimizer[group] = std::move(snap);
    }
  return out;
}

// -- training ---------------------------------------------------------------

template <typename T>
std::vector<ad::Var<T>> store_params(const nn::ParamStore<T>& ps) {
  std::vector<ad::Var<T>> out;
  for (const auto& [name, var] : ps.items()) out.push_back(var);
  return out;
}

inline std::vector<std::size_t> shuffled_indices(std::size_t n, Rng& rng) {
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  rng.shuffle(order.begin(), order.end());
  return order;
}

inline Rng epoch_rng(std::uint64_t seed, std::size_t epoch) {
  return Rng(seed ^ (0x9E3779B97F4A7C15ULL * (epoch + 1)));
}

/// Region frame sequences of one corpus split, in manifest order.
template <typename T>
std::vector<Tensor<T>> region_sequences(const Corpus& corpus,
                                        const std::string& region,
                                        const std::string& split) {
  require(region == "lip" || region == "upper", "unknown region: " + region);
  std::vector<Tensor<T>> out;
  for (std::size_t idx : corpus.clip_indices(split)) {
    const auto [lip_view, upper_view] =
        split_regions(corpus.clips[idx].motion, corpus.part);
    out.push_back(cast_tensor<T>(region == "lip" ? lip_view.offsets
                                                 : upper_view.offsets));
  }
  return out;
}

/// Distinct codebook tokens hit when encoding the given sequences.
template <typename T>
std::size_t codebook_usage(const RegionPrior<T>& prior,
                           const std::vector<Tensor<T>>& clips) {
  std::vector<bool> used(prior.config().K, false);
  for (const auto& frames : clips) {
    const ad::Var<T> z = prior.encode(ad::constant(frames));
    for (std::size_t id : prior.quantize_sequence(z->value).second)
      used[id] = true;
  }
  return static_cast<std::size_t>(std::count(used.begin(), used.end(), true));
}

/// VQ-VAE training loop for one region prior: shuffled clips, gradient
/// accumulation over each batch, AdamW step per batch. Resumes from
/// state.epochs_done[group] with restored optimizer moments.
template <typename T>
void train_region_prior(const std::string& group, RegionPrior<T>& prior,
                        nn::ParamStore<T>& ps,
                        const std::vector<Tensor<T>>& clips,
                        const TrainConfig& cfg, TrainState<T>& state,
                        std::ostream* log = nullptr) {
  require(!clips.empty(), "train_region_prior: no clips");
  typename AdamW<T>::Options opts;
  opts.lr = static_cast<T>(cfg.lr);
  opts.weight_decay = static_cast<T>(cfg.weight_decay);
  AdamW<T> opt(store_params(ps), opts);
  if (auto it = state.optimizer.find(group); it != state.optimizer.end())
    opt.restore(it->second);

  std::vector<double>& curve = state.loss_log[group];
  for (std::size_t e = state.epochs_done[group]; e < cfg.prior_epochs; ++e) {
    Rng order_rng = epoch_rng(cfg.seed, e);
    const std::vector<std::size_t> order =
        shuffled_indices(clips.size(), order_rng);
    double total = 0;
    for (std::size_t b0 = 0; b0 < order.size(); b0 += cfg.batch) {
      const std::size_t bs = std::min(cfg.batch, order.size() - b0);
      opt.zero_grad();
      for (std::size_t k = 0; k < bs; ++k) {
        const auto g = prior.vq_training_graph(clips[order[b0 + k]]);
        ad::backward(ad::scale(g.loss, T(1) / static_cast<T>(bs)));
        total += static_cast<double>(g.loss->value(0, 0));
      }
      opt.step();
    }
    curve.push_back(total / static_cast<double>(clips.size()));
    state.epochs_done[group] = e + 1;
    if (log)
      *log << group << " epoch " << (e + 1) << " loss " << curve.back()
           << "\n";
  }
  state.optimizer.insert_or_assign(group, opt.snapshot());
  if (log)
    *log << group << " codebook usage " << codebook_usage(prior, clips) << "/"
         << prior.config().K << "\n";
}

/// Trains the selected region priors on the train split.
template <typename T>
void train_priors(FaceModel<T>& model, const Corpus& corpus,
                  const TrainConfig& cfg, TrainState<T>& state,
                  std::ostream* log = nullptr) {
  validate(cfg);
  if (cfg.region == "lip" || cfg.region == "both")
    train_region_prior("lip_prior", *model.lip_prior, model.lip_prior_ps,
                       region_sequences<T>(corpus, "lip", "train"), cfg, state,
                       log);
  if (cfg.region == "upper" || cfg.region == "both")
    train_region_prior("upper_prior", *model.upper_prior, model.upper_prior_ps,
                       region_sequences<T>(corpus, "upper", "train"), cfg,
                       state, log);
}

/// Per-clip tensors the query stage consumes, precomputed once: region views
/// of the ground truth, aligned audio, the closure mask at the loss
/// threshold, and the style row.
template <typename T>
struct QueryClipData {
  Tensor<T> lip_gt, upper_gt, audio;
  ClosureMask mask;
  std::size_t style = 0;
};

template <typename T>
std::vector<QueryClipData<T>> prepare_query_clips(const FaceModel<T>& model,
                                                  const Corpus& corpus,
                                                  const std::string& split) {
  std::vector<QueryClipData<T>> out;
  for (std::size_t idx : corpus.clip_indices(split)) {
    const CorpusClip& clip = corpus.clips[idx];
    QueryClipData<T> cd;
    MotionSequence<T> motion{cast_tensor<T>(clip.motion.offsets),
                             clip.motion.fps, clip.motion.subject_id};
    const auto [lip_view, upper_view] = split_regions(motion, model.dims.part);
    cd.lip_gt = lip_view.offsets;
    cd.upper_gt = upper_view.offsets;
    AudioFeatureSequence<T> audio{cast_tensor<T>(clip.audio.features),
                                  clip.audio.native_rate,
                                  clip.audio.source_tag};
    cd.audio = align_to_motion(audio, model.dims.fps, motion.frames());
    cd.mask = closure_mask(lip_aperture(motion, model.dims.face,
                                        model.dims.part),
                           model.weights.epsilon);
    cd.style = model.style_index(clip.style_id);
    out.push_back(std::move(cd));
  }
  return out;
}

/// Min-of-N reconstruction plus the closure penalty, with the frame-wise or
/// sequence-wise winner per configuration.
template <typename T>
ad::Var<T> masked_reconstruction(const std::vector<ad::Var<T>>& motions,
                                 const Tensor<T>& gt, const ClosureMask& mask,
                                 bool per_sequence) {
  if (!per_sequence) return lip_reconstruction_loss(motions, gt, mask);
  const ad::Var<T> gt_c = ad::constant(gt);
  const std::vector<T> closed = mask_row_weights<T>(mask, /*invert=*/true);
  ad::Var<T> closure;
  for (const auto& s : motions) {
    const ad::Var<T> term =
        ad::sum_all(ad::rows_norm(ad::mul_rows(ad::sub(s, gt_c), closed)));
    closure = closure ? ad::add(closure, term) : term;
  }
  return ad::add(min_reconstruction_loss_sequence(motions, gt),
                 ad::scale(closure, T(1) / static_cast<T>(motions.size())));
}

template <typename T>
struct ClipLossNodes {
  ad::Var<T> lip_total, upper_total;
  double lip_div = 0, lip_rec = 0, lip_reg = 0;
  double upper_div = 0, upper_rec = 0, upper_reg = 0;
};

namespace detail {

template <typename T>
std::vector<Tensor<T>> quantized_targets(const RegionPrior<T>& prior,
                                         const std::vector<ad::Var<T>>& codes) {
  std::vector<Tensor<T>> out;
  for (const auto& c : codes)
    out.push_back(prior.quantize_sequence(c->value).first);
  return out;
}

template <typename T>
double scalar(const ad::Var<T>& v) {
  return v ? static_cast<double>(v->value(0, 0)) : 0.0;
}

template <typename T>
void add_term(ad::Var<T>& total, const ad::Var<T>& term, double lambda) {
  if (!term || lambda == 0.0) return;
  const ad::Var<T> scaled = ad::scale(term, static_cast<T>(lambda));
  total = total ? ad::add(total, scaled) : scaled;
}

}  // namespace detail

/// Builds the weighted teacher-forced objectives of one clip. The lip side
/// follows the masked forms unless use_closure_mask is off (the ablation);
/// the upper side charges its losses once per lip parent, which duplicates
/// the shared prediction nodes and scales their gradients accordingly.
template <typename T>
ClipLossNodes<T> build_clip_losses(const FaceModel<T>& model,
                                   const QueryClipData<T>& cd,
                                   bool use_closure_mask, bool build_lip,
                                   bool build_upper) {
  const LossWeights& w = model.weights;
  const bool per_seq = model.per_sequence_min;
  require(cd.mask.size() == cd.lip_gt.rows(),
          "query loss: mask length disagrees with frame count");
  ClipLossNodes<T> out;

  if (build_lip) {
    const Tensor<T> hist = detail::take_rows(cd.lip_gt, cd.lip_gt.rows() - 1);
    const ad::Var<T> trunk =
        model.lip_query->trunk(hist, cd.audio, nullptr, cd.style);
    std::vector<ad::Var<T>> codes, motions;
    for (std::size_t i = 0; i < model.lip_query_cfg.n_samples; ++i) {
      codes.push_back(model.lip_query->head(i, trunk));
      motions.push_back(model.lip_prior->decode(codes.back()));
    }
    ad::Var<T> div;
    if (motions.size() >= 2 && w.lambda_div_lip > 0)
      div = use_closure_mask ? lip_diversity_loss(motions, cd.mask)
                             : diversity_loss(motions);
    ad::Var<T> rec;
    if (use_closure_mask) {
      rec = masked_reconstruction(motions, cd.lip_gt, cd.mask, per_seq);
    } else {
      rec = per_seq ? min_reconstruction_loss_sequence(motions, cd.lip_gt)
                    : min_reconstruction_loss(motions, cd.lip_gt);
    }
    const ad::Var<T> reg = code_regularizer(
        codes, detail::quantized_targets(*model.lip_prior, codes));
    detail::add_term(out.lip_total, div, w.lambda_div_lip);
    detail::add_term(out.lip_total, rec, w.lambda_rec_lip);
    detail::add_term(out.lip_total, reg, w.lambda_reg);
    require(bool(out.lip_total), "query loss: all lip weights are zero");
    out.lip_div = detail::scalar(div);
    out.lip_rec = detail::scalar(rec);
    out.lip_reg = detail::scalar(reg);
  }

  if (build_upper) {
    const Tensor<T> uhist =
        detail::take_rows(cd.upper_gt, cd.upper_gt.rows() - 1);
    const Tensor<T> lhist = detail::take_rows(cd.lip_gt, cd.lip_gt.rows() - 1);
    const ad::Var<T> trunk =
        model.upper_query->trunk(uhist, cd.audio, &lhist, cd.style);
    std::vector<ad::Var<T>> codes, motions;
    for (std::size_t j = 0; j < model.upper_query_cfg.n_samples; ++j) {
      codes.push_back(model.upper_query->head(j, trunk));
      motions.push_back(model.upper_prior->decode(codes.back()));
    }
    // Ground-truth lip conditioning makes every parent's set identical, so
    // the per-parent sum reuses the shared prediction nodes n_lip times.
    const std::size_t n_parents = model.lip_query_cfg.n_samples;
    ad::Var<T> div, rec;
    for (std::size_t i = 0; i < n_parents; ++i) {
      if (motions.size() >= 2 && w.lambda_div_upper > 0) {
        const ad::Var<T> d = diversity_loss(motions);
        div = div ? ad::add(div, d) : d;
      }
      const ad::Var<T> r =
          per_seq ? min_reconstruction_loss_sequence(motions, cd.upper_gt)
                  : min_reconstruction_loss(motions, cd.upper_gt);
      rec = rec ? ad::add(rec, r) : r;
    }
    std::vector<ad::Var<T>> codes_all;
    for (std::size_t i = 0; i < n_parents; ++i)
      codes_all.insert(codes_all.end(), codes.begin(), codes.end());
    const ad::Var<T> reg = code_regularizer(
        codes_all, detail::quantized_targets(*model.upper_prior, codes_all));
    detail::add_term(out.upper_total, div, w.lambda_div_upper);
    detail::add_term(out.upper_total, rec, w.lambda_rec_upper);
    detail::add_term(out.upper_total, reg, w.lambda_reg);
    require(bool(out.upper_total), "query loss: all upper weights are zero");
    out.upper_div = detail::scalar(div);
    out.upper_rec = detail::scalar(rec);
    out.upper_reg = detail::scalar(reg);
  }
  return out;
}

/// One optimization stage over a query store: lip_stage selects which side's
/// objective drives the updates.
template <typename T>
void train_query_stage(const std::string& group, FaceModel<T>& model,
                       const std::vector<QueryClipData<T>>& clips,
                       const TrainConfig& cfg, TrainState<T>& state,
                       bool lip_stage, std::ostream* log = nullptr) {
  require(!clips.empty(), "train_query_stage: no clips");
  nn::ParamStore<T>& ps = model.store(group);
  typename AdamW<T>::Options opts;
  opts.lr = static_cast<T>(cfg.lr);
  opts.weight_decay = static_cast<T>(cfg.weight_decay);
  AdamW<T> opt(store_params(ps), opts);
  if (auto it = state.optimizer.find(group); it != state.optimizer.end())
    opt.restore(it->second);

  std::vector<double>& curve = state.loss_log[group];
  for (std::size_t e = state.epochs_done[group]; e < cfg.query_epochs; ++e) {
    Rng order_rng = epoch_rng(cfg.seed + (lip_stage ? 101 : 202), e);
    const std::vector<std::size_t> order =
        shuffled_indices(clips.size(), order_rng);
    double total = 0;
    for (std::size_t b0 = 0; b0 < order.size(); b0 += cfg.batch) {
      const std::size_t bs = std::min(cfg.batch, order.size() - b0);
      opt.zero_grad();
      for (std::size_t k = 0; k < bs; ++k) {
        const ClipLossNodes<T> nodes =
            build_clip_losses(model, clips[order[b0 + k]],
                              cfg.use_closure_mask, lip_stage, !lip_stage);
        const ad::Var<T> loss =
            lip_stage ? nodes.lip_total : nodes.upper_total;
        ad::backward(ad::scale(loss, T(1) / static_cast<T>(bs)));
        total += static_cast<double>(loss->value(0, 0));
      }
      opt.step();
    }
    curve.push_back(total / static_cast<double>(clips.size()));
    state.epochs_done[group] = e + 1;
    if (log)
      *log << group << " epoch " << (e + 1) << " loss " << curve.back()
           << "\n";
  }
  state.optimizer.insert_or_assign(group, opt.snapshot());
}

/// Sequential query training: lip stage, then upper stage, with both prior
/// stores frozen throughout. The frozen contract is enforced by content
/// hashes, not trust.
template <typename T>
void train_queriers(FaceModel<T>& model, const Corpus& corpus,
                    const TrainConfig& cfg, TrainState<T>& state,
                    std::ostream* log = nullptr) {
  validate(cfg);
  const std::uint64_t lip_hash = model.lip_prior_ps.content_hash();
  const std::uint64_t upper_hash = model.upper_prior_ps.content_hash();
  model.lip_prior_ps.set_trainable(false);
  model.upper_prior_ps.set_trainable(false);

  const std::vector<QueryClipData<T>> clips =
      prepare_query_clips(model, corpus, "train");
  train_query_stage("lip_query", model, clips, cfg, state, /*lip_stage=*/true,
                    log);
  train_query_stage("upper_query", model, clips, cfg, state,
                    /*lip_stage=*/false, log);

  require(model.lip_prior_ps.content_hash() == lip_hash &&
              model.upper_prior_ps.content_hash() == upper_hash,
          "frozen prior parameters changed during query training");
}

/// Teacher-forced loss values over a split, without updates. Used to compare
/// held-out against training losses.
struct QueryLossValues {
  double lip_div = 0, lip_rec = 0, lip_reg = 0, lip_total = 0;
  double upper_div = 0, upper_rec = 0, upper_reg = 0, upper_total = 0;
};

template <typename T>
QueryLossValues mean_query_losses(const FaceModel<T>& model,
                                  const Corpus& corpus,
                                  const std::string& split,
                                  bool use_closure_mask) {
  const std::vector<QueryClipData<T>> clips =
      prepare_query_clips(model, corpus, split);
  require(!clips.empty(), "mean_query_losses: empty split");
  QueryLossValues out;
  for (const auto& cd : clips) {
    const ClipLossNodes<T> nodes =
        build_clip_losses(model, cd, use_closure_mask, true, true);
    out.lip_div += nodes.lip_div;
    out.lip_rec += nodes.lip_rec;
    out.lip_reg += nodes.lip_reg;
    out.lip_total += static_cast<double>(nodes.lip_total->value(0, 0));
    out.upper_div += nodes.upper_div;
    out.upper_rec += nodes.upper_rec;
    out.upper_reg += nodes.upper_reg;
    out.upper_total += static_cast<double>(nodes.upper_total->value(0, 0));
  }
  const double n = static_cast<double>(clips.size());
  out.lip_div /= n;
  out.lip_rec /= n;
  out.lip_reg /= n;
  out.lip_total /= n;
  out.upper_div /= n;
  out.upper_rec /= n;
  out.upper_reg /= n;
  out.upper_total /= n;
  return out;
}

// -- evaluation --------------------------------------------------------------

struct EvalOptions {
  std::string split = "test";
  std::size_t n_upper = 0;  // 0: model head count
  bool control_mode = false;
  std::ptrdiff_t style_override = -1;  // -1: clip's own style (fallback 0)
};

struct ClipEval {
  std::string clip;
  std::size_t samples = 0;
  double lve = 0, mve = 0, fdd = 0, alve = 0;
  double apd = 0, upd = 0, lpd = 0, mpd = 0;
  std::size_t closed_frame_samples = 0;  // (closed frame, sample) pairs
  std::size_t closure_violations = 0;    // pairs with aperture > 2 epsilon
  double apd_ratio = 0;  // vs ground-truth inter-style APD of the sentence
  std::vector<std::vector<double>> aperture;  // gt curve first, then samples
};

struct EvalResult {
  MetricReport report;
  std::vector<ClipEval> per_clip;
};

/// Rolls the trained model over a corpus split and aggregates the metric
/// battery. Accuracy metrics (lve, mve, fdd) are taken on the sample with
/// the lowest lip error; alve averages lip error over all samples; diversity
/// metrics of a single-sample rollout are zero by convention.
template <typename T>
EvalResult evaluate(const FaceModel<T>& model, const Corpus& corpus,
                    const EvalOptions& opt) {
  const std::vector<std::size_t> indices = corpus.clip_indices(opt.split);
  require(!indices.empty(), "evaluate: empty split " + opt.split);
  const RegionPartition& part = model.dims.part;
  EvalResult result;
  double sum_lve = 0, sum_mve = 0, sum_fdd = 0, sum_alve = 0;
  double sum_apd = 0, sum_upd = 0, sum_lpd = 0, sum_mpd = 0;
  double sum_ratio = 0, min_ratio = 0;
  std::size_t violations = 0, closed_pairs = 0;

  for (std::size_t idx : indices) {
    const CorpusClip& clip = corpus.clips[idx];
    ClipEval ce;
    ce.clip = clip.dir_name;
    const std::size_t style =
        opt.style_override >= 0
            ? static_cast<std::size_t>(opt.style_override)
            : model.style_index_or(clip.style_id, 0);
    const MotionSequence<T> gt{cast_tensor<T>(clip.motion.offsets),
                               clip.motion.fps, clip.motion.subject_id};
    AudioFeatureSequence<T> audio{cast_tensor<T>(clip.audio.features),
                                  clip.audio.native_rate,
                                  clip.audio.source_tag};
    const Tensor<T> aligned =
        align_to_motion(audio, model.dims.fps, gt.frames());
    const RolloutResult<T> roll = rollout(
        *model.lip_query, *model.lip_prior, *model.upper_query,
        *model.upper_prior, aligned, style, gt.frames(), part,
        model.dims.fps, clip.style_id, opt.control_mode);
    std::vector<MotionSequence<T>> faces = roll.faces;
    if (opt.n_upper > 0) {
      // restrict to the first n_upper variants of each lip parent
      std::vector<MotionSequence<T>> kept;
      for (std::size_t k = 0; k < faces.size(); ++k)
        if (roll.lineage[k].second < opt.n_upper)
          kept.push_back(std::move(faces[k]));
      faces = std::move(kept);
    }
    require(!faces.empty(), "evaluate: rollout produced no samples");
    ce.samples = faces.size();

    std::size_t best = 0;
    double best_lve = std::numeric_limits<double>::infinity();
    for (std::size_t s = 0; s < faces.size(); ++s) {
      const double v = static_cast<double>(lve(faces[s], gt, part));
      sum_alve += v / static_cast<double>(faces.size());
      ce.alve += v / static_cast<double>(faces.size());
      if (v < best_lve) {
        best_lve = v;
        best = s;
      }
    }
    ce.lve = best_lve;
    ce.mve = static_cast<double>(mve(faces[best], gt));
    ce.fdd = static_cast<double>(fdd(faces[best], gt, part));
    if (faces.size() >= 2) {
      ce.apd = static_cast<double>(apd(faces));
      ce.upd = static_cast<double>(upd(faces, part));
      ce.lpd = static_cast<double>(lpd(faces, part));
      ce.mpd = static_cast<double>(mpd(faces));
    }
    const double gt_apd = gt_interstyle_apd(corpus, clip.sentence);
    ce.apd_ratio = gt_apd > 0 ? ce.apd / gt_apd : 0.0;

    const std::vector<T> gt_curve = lip_aperture(gt, model.dims.face, part);
    ce.aperture.emplace_back(gt_curve.begin(), gt_curve.end());
    const double limit = 2.0 * model.weights.epsilon;
    for (const auto& face : faces) {
      const std::vector<T> curve = lip_aperture(face, model.dims.face, part);
      ce.aperture.emplace_back(curve.begin(), curve.end());
      for (std::size_t t = 0; t < clip.mask_gt.size(); ++t) {
        if (clip.mask_gt.open(t)) continue;
        ++ce.closed_frame_samples;
        if (static_cast<double>(curve[t]) > limit) ++ce.closure_violations;
      }
    }

    sum_lve += ce.lve;
    sum_mve += ce.mve;
    sum_fdd += ce.fdd;
    sum_apd += ce.apd;
    sum_upd += ce.upd;
    sum_lpd += ce.lpd;
    sum_mpd += ce.mpd;
    sum_ratio += ce.apd_ratio;
    min_ratio = result.per_clip.empty() ? ce.apd_ratio
                                        : std::min(min_ratio, ce.apd_ratio);
    violations += ce.closure_violations;
    closed_pairs += ce.closed_frame_samples;
    result.per_clip.push_back(std::move(ce));
  }

  const double n = static_cast<double>(result.per_clip.size());
  MetricReport& r = result.report;
  r.clip_count = result.per_clip.size();
  r.sample_count = result.per_clip.front().samples;
  r.add("lve", sum_lve / n, "mesh units");
  r.add("mve", sum_mve / n, "mesh units");
  r.add("fdd", sum_fdd / n, "mesh units");
  r.add("alve", sum_alve / n, "mesh units");
  r.add("apd", sum_apd / n, "mesh units");
  r.add("upd", sum_upd / n, "mesh units");
  r.add("lpd", sum_lpd / n, "mesh units");
  r.add("mpd", sum_mpd / n, "mesh units");
  r.add("apd_ratio_mean", sum_ratio / n, "ratio");
  r.add("apd_ratio_min", min_ratio, "ratio");
  r.add("closure_violations", static_cast<double>(violations), "count");
  r.add("closed_frame_samples", static_cast<double>(closed_pairs), "count");
  return result;
}

}  // namespace cdface
