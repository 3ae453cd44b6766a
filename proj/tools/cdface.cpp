#include <algorithm>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "cdface/trainer.hpp"

namespace fs = std::filesystem;
using Real = float;

namespace cdface::cli {

fs::path resolve_corpus(const std::string& flag) {
  if (!flag.empty()) return flag;
  const char* env = std::getenv("CDFACE_DATA_ROOT");
  require_io(env != nullptr && *env != '\0',
             "no --corpus given and CDFACE_DATA_ROOT is not set");
  return fs::path(env);
}

const CorpusClip& find_clip(const Corpus& corpus, const std::string& name) {
  for (const auto& c : corpus.clips)
    if (c.dir_name == name) return c;
  throw ContractError("no clip named '" + name + "' in the corpus");
}

io::json report_to_json(const MetricReport& r) {
  io::json metrics = io::json::object();
  for (const auto& e : r.entries)
    metrics[e.name] = {{"value", e.value}, {"units", e.units}};
  return {{"metrics", metrics},
          {"sample_count", r.sample_count},
          {"clip_count", r.clip_count}};
}

void print_report(const MetricReport& r) {
  for (const auto& e : r.entries)
    std::cout << "  " << e.name << " = " << e.value << " [" << e.units
              << "]\n";
}

struct GenArgs {
  std::string out;
  GeneratorConfig gc;
};

void run_gen_corpus(const GenArgs& a) {
  generate_corpus(a.gc, a.out);
  const Corpus corpus = load_corpus(a.out);
  std::cout << "wrote " << corpus.clips.size() << " clips ("
            << corpus.clip_indices("train").size() << " train, "
            << corpus.clip_indices("test").size() << " test) to " << a.out
            << "\n";
}

struct TrainPriorArgs {
  std::string corpus_dir, out;
  bool resume = false;
  bool epsilon_given = false;
  TrainConfig cfg;
  std::size_t epochs = 0;  // 0: keep config value
};

void run_train_prior(TrainPriorArgs& a) {
  const Corpus corpus = load_corpus(resolve_corpus(a.corpus_dir));
  a.cfg.stage = "prior";
  if (!a.epsilon_given) a.cfg.weights.epsilon = corpus.gen.epsilon;
  if (a.epochs > 0) a.cfg.prior_epochs = a.epochs;

  if (a.resume && fs::exists(fs::path(a.out) / "manifest.json")) {
    auto ck = load_checkpoint<Real>(a.out);
    ck.cfg.stage = "prior";
    ck.cfg.region = a.cfg.region;
    if (a.epochs > 0) ck.cfg.prior_epochs = a.epochs;
    train_priors(ck.model, corpus, ck.cfg, ck.state, &std::cout);
    save_checkpoint(a.out, ck.model, ck.cfg, ck.state);
  } else {
    auto model = make_face_model<Real>(corpus, a.cfg);
    TrainState<Real> state;
    train_priors(model, corpus, a.cfg, state, &std::cout);
    save_checkpoint(a.out, model, a.cfg, state);
  }
  std::cout << "checkpoint written to " << a.out << "\n";
}

struct TrainQueryArgs {
  std::string corpus_dir, ckpt, out;
  std::size_t epochs = 0;
  std::size_t nl = 0, nu = 0;  // 0: keep the model's head counts
  bool unmasked = false;
  bool per_sequence_min = false;
};

void run_train_query(TrainQueryArgs& a) {
  const Corpus corpus = load_corpus(resolve_corpus(a.corpus_dir));
  auto ck = load_checkpoint<Real>(a.ckpt);
  ck.cfg.stage = "query";
  if (a.epochs > 0) ck.cfg.query_epochs = a.epochs;
  require(a.nl == 0 || a.nl == ck.cfg.n_lip,
          "lip head count is fixed when the model is built; retrain priors "
          "with the desired --nl");
  require(a.nu == 0 || a.nu == ck.cfg.n_upper,
          "upper head count is fixed when the model is built; retrain priors "
          "with the desired --nu");
  if (a.unmasked) ck.cfg.use_closure_mask = false;
  if (a.per_sequence_min) {
    ck.cfg.per_sequence_min = true;
    ck.model.per_sequence_min = true;
  }
  train_queriers(ck.model, corpus, ck.cfg, ck.state, &std::cout);
  const std::string out = a.out.empty() ? a.ckpt : a.out;
  save_checkpoint(out, ck.model, ck.cfg, ck.state);
  std::cout << "checkpoint written to " << out << "\n";
}

/// Full rollout for one clip's audio track; shared by synthesize and control.
RolloutResult<Real> clip_rollout(const FaceModel<Real>& model,
                                 const Corpus& corpus, const CorpusClip& clip,
                                 std::size_t style, bool control_mode) {
  const std::size_t steps = clip.motion.frames();
  const Tensor<Real> audio = align_to_motion(clip.audio, corpus.gen.fps, steps);
  return rollout(*model.lip_query, *model.lip_prior, *model.upper_query,
                 *model.upper_prior, audio, style, steps, corpus.part,
                 corpus.gen.fps, corpus.styles[style].id, control_mode);
}

void write_samples(const fs::path& out, const Corpus& corpus,
                   const std::vector<MotionSequence<Real>>& faces,
                   const std::vector<std::pair<std::size_t, std::size_t>>& lineage,
                   const std::string& clip_name, const std::string& style_id,
                   io::json& manifest) {
  fs::create_directories(out);
  manifest["kind"] = "cdface-synthesis";
  manifest["clip"] = clip_name;
  manifest["style"] = style_id;
  manifest["fps"] = corpus.gen.fps;
  io::json lin = io::json::array();
  for (std::size_t k = 0; k < faces.size(); ++k) {
    const auto [i, j] = lineage[k];
    const std::string name =
        "sample_" + std::to_string(i) + "_" + std::to_string(j);
    io::save_array(out, manifest, name, faces[k].offsets);
    lin.push_back({{"sample", name}, {"lip", i}, {"upper", j}});
  }
  manifest["lineage"] = lin;

  MetricReport r;
  r.sample_count = faces.size();
  r.clip_count = 1;
  if (faces.size() >= 2) {
    r.add("apd", apd(faces), "mesh units");
    r.add("upd", upd(faces, corpus.part), "mesh units");
    r.add("lpd", lpd(faces, corpus.part), "mesh units");
    r.add("mpd", mpd(faces), "mesh units");
  }
  io::json rep = report_to_json(r);
  io::json curves = io::json::array();
  for (const auto& curve : aperture_curves(faces, corpus.face, corpus.part))
    curves.push_back(curve);
  rep["aperture"] = std::move(curves);
  io::write_json(out / "report.json", rep);
  io::write_json(out / "manifest.json", manifest);
  print_report(r);
}

struct SynthArgs {
  std::string corpus_dir, ckpt, out, clip, style;
  std::size_t nl = 0, nu = 0;  // 0: all heads
};

void run_synthesize(const SynthArgs& a) {
  const Corpus corpus = load_corpus(resolve_corpus(a.corpus_dir));
  auto ck = load_checkpoint<Real>(a.ckpt);
  const CorpusClip& clip = find_clip(corpus, a.clip);
  const std::size_t style = a.style.empty()
                                ? clip.style_index
                                : ck.model.style_index(a.style);
  const std::size_t heads_l = ck.model.lip_query_cfg.n_samples;
  const std::size_t heads_u = ck.model.upper_query_cfg.n_samples;
  const std::size_t nl = a.nl == 0 ? heads_l : a.nl;
  const std::size_t nu = a.nu == 0 ? heads_u : a.nu;
  require(nl <= heads_l, "synthesize: --nl exceeds the model's lip heads");
  require(nu <= heads_u, "synthesize: --nu exceeds the model's upper heads");

  const auto ro = clip_rollout(ck.model, corpus, clip, style, false);
  std::vector<MotionSequence<Real>> faces;
  std::vector<std::pair<std::size_t, std::size_t>> lineage;
  for (std::size_t k = 0; k < ro.faces.size(); ++k)
    if (ro.lineage[k].first < nl && ro.lineage[k].second < nu) {
      faces.push_back(ro.faces[k]);
      lineage.push_back(ro.lineage[k]);
    }
  fs::create_directories(a.out);
  io::json manifest;
  for (std::size_t i = 0; i < nl; ++i)
    io::save_array(a.out, manifest, "lip_codes_" + std::to_string(i),
                   ro.lip_codes[i]);
  write_samples(a.out, corpus, faces, lineage, a.clip,
                corpus.styles[style].id, manifest);
  std::cout << "wrote " << faces.size() << " samples to " << a.out << "\n";
}

struct ControlArgs {
  std::string corpus_dir, ckpt, out, clip, style;
  std::string fix_lip_from = "0";  // lip head index or lip-code container
  std::size_t nu = 0;
};

void run_control(const ControlArgs& a) {
  const Corpus corpus = load_corpus(resolve_corpus(a.corpus_dir));
  auto ck = load_checkpoint<Real>(a.ckpt);
  const CorpusClip& clip = find_clip(corpus, a.clip);
  const std::size_t style = a.style.empty()
                                ? clip.style_index
                                : ck.model.style_index(a.style);
  const std::size_t heads_u = ck.model.upper_query_cfg.n_samples;
  const std::size_t nu = a.nu == 0 ? heads_u : a.nu;
  require(nu <= heads_u, "control: --nu exceeds the model's upper heads");

  const bool is_index =
      !a.fix_lip_from.empty() &&
      a.fix_lip_from.find_first_not_of("0123456789") == std::string::npos;

  std::vector<MotionSequence<Real>> faces;
  std::vector<std::pair<std::size_t, std::size_t>> lineage;
  if (is_index) {
    const std::size_t k = std::stoul(a.fix_lip_from);
    require(k < ck.model.lip_query_cfg.n_samples,
            "control: lip sample index exceeds the model's lip heads");
    // Head 0 is what control-mode rollout pins; other heads need the full
    // rollout, from which one lip lineage is kept.
    const auto ro = clip_rollout(ck.model, corpus, clip, style, k == 0);
    for (std::size_t f = 0; f < ro.faces.size(); ++f) {
      const auto [i, j] = ro.lineage[f];
      if (i == k && j < nu) {
        faces.push_back(ro.faces[f]);
        lineage.emplace_back(i, j);
      }
    }
  } else {
    // External lip codes: decode through the frozen lip prior, then condition
    // every upper head on the one decoded track.
    fs::path src(a.fix_lip_from);
    if (fs::is_directory(src)) src /= "manifest.json";
    const io::json manifest = io::read_json(src);
    const Tensor<Real> codes =
        io::load_array(src.parent_path(), manifest, "codes");
    const std::size_t steps = codes.rows();
    require(steps == clip.motion.frames(),
            "control: lip-code frame count disagrees with the audio clip");
    const Tensor<Real> lip_track =
        ck.model.lip_prior->decode(ad::constant(codes))->value;
    const Tensor<Real> audio =
        align_to_motion(clip.audio, corpus.gen.fps, steps);
    for (std::size_t j = 0; j < nu; ++j) {
      auto [ucodes, umotion] =
          generate_stream(*ck.model.upper_query, *ck.model.upper_prior, j,
                          audio, style, steps, &lip_track);
      const MotionSequence<Real> lip_view{lip_track, corpus.gen.fps,
                                          corpus.styles[style].id};
      const MotionSequence<Real> upper_view{umotion, corpus.gen.fps,
                                            corpus.styles[style].id};
      faces.push_back(merge_regions(lip_view, upper_view, corpus.part));
      lineage.emplace_back(0, j);
    }
  }

  if (faces.size() >= 2) {
    const double shared = lpd(faces, corpus.part);
    require(shared == 0.0, "control: lip tracks diverged across samples");
    std::cout << "lip tracks shared across " << faces.size()
              << " samples (lpd = 0)\n";
  }
  io::json manifest;
  write_samples(a.out, corpus, faces, lineage, a.clip,
                corpus.styles[style].id, manifest);
  std::cout << "wrote " << faces.size() << " samples to " << a.out << "\n";
}

struct EvalArgs {
  std::string corpus_dir, ckpt, out, style;
  EvalOptions opt;
  bool self = false;
};

void run_evaluate(EvalArgs& a) {
  const Corpus corpus = load_corpus(resolve_corpus(a.corpus_dir));
  fs::create_directories(a.out);

  if (a.self) {
    // Ground truth against itself: every error metric must be exactly zero.
    MetricReport r;
    double sum_lve = 0, sum_mve = 0, sum_fdd = 0;
    const auto indices = corpus.clip_indices(a.opt.split);
    require(!indices.empty(), "evaluate: empty split");
    for (std::size_t idx : indices) {
      const MotionSequence<float>& gt = corpus.clips[idx].motion;
      sum_lve += lve(gt, gt, corpus.part);
      sum_mve += mve(gt, gt);
      sum_fdd += fdd(gt, gt, corpus.part);
    }
    const double n = static_cast<double>(indices.size());
    r.add("lve", sum_lve / n, "mesh units");
    r.add("mve", sum_mve / n, "mesh units");
    r.add("fdd", sum_fdd / n, "mesh units");
    r.sample_count = 1;
    r.clip_count = indices.size();
    io::write_json(fs::path(a.out) / "report.json", report_to_json(r));
    print_report(r);
    return;
  }

  auto ck = load_checkpoint<Real>(a.ckpt);
  if (!a.style.empty())
    a.opt.style_override =
        static_cast<std::ptrdiff_t>(ck.model.style_index(a.style));
  const EvalResult res = evaluate(ck.model, corpus, a.opt);

  io::write_json(fs::path(a.out) / "report.json", report_to_json(res.report));
  io::json clips = io::json::array();
  for (const auto& ce : res.per_clip) {
    io::json c = {{"clip", ce.clip},
                  {"samples", ce.samples},
                  {"lve", ce.lve},
                  {"mve", ce.mve},
                  {"fdd", ce.fdd},
                  {"alve", ce.alve},
                  {"apd", ce.apd},
                  {"upd", ce.upd},
                  {"lpd", ce.lpd},
                  {"mpd", ce.mpd},
                  {"apd_ratio", ce.apd_ratio},
                  {"closure_violations", ce.closure_violations},
                  {"closed_frame_samples", ce.closed_frame_samples}};
    io::json curves = io::json::array();
    for (const auto& curve : ce.aperture) curves.push_back(curve);
    c["aperture"] = std::move(curves);  // ground truth first, then samples
    clips.push_back(std::move(c));
  }
  io::write_json(fs::path(a.out) / "clips.json", clips);
  print_report(res.report);
  std::cout << "report written to " << a.out << "\n";
}

struct ReportArgs {
  std::vector<std::string> inputs;  // evaluate/synthesize output dirs
  std::string ckpt, out;
};

void write_tsv(const fs::path& path, const std::vector<std::string>& header,
               const std::vector<std::vector<std::string>>& rows) {
  std::ofstream f(path, std::ios::trunc);
  require_io(f.good(), "cannot open for writing: " + path.string());
  for (std::size_t c = 0; c < header.size(); ++c)
    f << header[c] << (c + 1 < header.size() ? '\t' : '\n');
  for (const auto& row : rows)
    for (std::size_t c = 0; c < row.size(); ++c)
      f << row[c] << (c + 1 < row.size() ? '\t' : '\n');
  require_io(f.good(), "write failed: " + path.string());
}

std::string fmt(double v) {
  std::ostringstream s;
  s.precision(10);
  s << v;
  return s.str();
}

void run_report(const ReportArgs& a) {
  require(!a.inputs.empty() || !a.ckpt.empty(),
          "report: nothing to merge; give --in and/or --ckpt");
  fs::create_directories(a.out);

  std::vector<std::vector<std::string>> metric_rows;
  for (const auto& in : a.inputs) {
    const fs::path dir(in);
    const io::json rep = io::read_json(dir / "report.json");
    const std::string source = dir.filename().string();
    for (const auto& [name, entry] : rep.at("metrics").items())
      metric_rows.push_back({name, fmt(entry.at("value").get<double>()),
                             entry.at("units").get<std::string>(), source});

    // Aperture curves live either per clip (evaluate) or flat (synthesize).
    const fs::path clips_file = dir / "clips.json";
    if (fs::exists(clips_file)) {
      const io::json clips = io::read_json(clips_file);
      for (const auto& c : clips) {
        const auto curves = c.at("aperture")
                                .get<std::vector<std::vector<double>>>();
        std::vector<std::string> header = {"frame", "gt"};
        for (std::size_t s = 1; s < curves.size(); ++s)
          header.push_back("sample" + std::to_string(s - 1));
        std::vector<std::vector<std::string>> rows;
        for (std::size_t t = 0; t < curves.at(0).size(); ++t) {
          std::vector<std::string> row = {std::to_string(t)};
          for (const auto& curve : curves) row.push_back(fmt(curve.at(t)));
          rows.push_back(std::move(row));
        }
        write_tsv(fs::path(a.out) /
                      ("aperture_" + c.at("clip").get<std::string>() + ".tsv"),
                  header, rows);
      }
    } else if (rep.contains("aperture")) {
      const auto curves =
          rep.at("aperture").get<std::vector<std::vector<double>>>();
      if (!curves.empty()) {
        std::vector<std::string> header = {"frame"};
        for (std::size_t s = 0; s < curves.size(); ++s)
          header.push_back("sample" + std::to_string(s));
        std::vector<std::vector<std::string>> rows;
        for (std::size_t t = 0; t < curves.at(0).size(); ++t) {
          std::vector<std::string> row = {std::to_string(t)};
          for (const auto& curve : curves) row.push_back(fmt(curve.at(t)));
          rows.push_back(std::move(row));
        }
        write_tsv(fs::path(a.out) / ("aperture_" + source + ".tsv"), header,
                  rows);
      }
    }
  }
  if (!metric_rows.empty())
    write_tsv(fs::path(a.out) / "metrics.tsv",
              {"metric", "value", "units", "source"}, metric_rows);

  if (!a.ckpt.empty()) {
    const auto ck = load_checkpoint<Real>(a.ckpt);
    std::vector<std::string> header = {"epoch"};
    std::size_t longest = 0;
    for (const auto& [group, curve] : ck.state.loss_log) {
      header.push_back(group);
      longest = std::max(longest, curve.size());
    }
    std::vector<std::vector<std::string>> rows;
    for (std::size_t e = 0; e < longest; ++e) {
      std::vector<std::string> row = {std::to_string(e)};
      for (const auto& [group, curve] : ck.state.loss_log)
        row.push_back(e < curve.size() ? fmt(curve[e]) : "");
      rows.push_back(std::move(row));
    }
    write_tsv(fs::path(a.out) / "losses.tsv", header, rows);
  }
  std::cout << "tables written to " << a.out << "\n";
}

}  // namespace cdface::cli

int main(int argc, char** argv) {
  using namespace cdface;
  using namespace cdface::cli;

  CLI::App app{"Vector-quantized facial priors with diverse audio-driven "
               "code queries"};
  app.require_subcommand(1);

  GenArgs gen;
  auto* g = app.add_subcommand("gen-corpus",
                               "generate a synthetic audio-motion corpus");
  g->add_option("--out", gen.out, "corpus directory")->required();
  g->add_option("--seed", gen.gc.seed, "generator seed");
  g->add_option("--styles", gen.gc.num_styles, "number of speaking styles");
  g->add_option("--sentences", gen.gc.num_sentences, "sentences per style");
  g->add_option("--vertices", gen.gc.vertices, "mesh vertex count");
  g->add_option("--fps", gen.gc.fps, "frame rate");
  g->add_option("--epsilon", gen.gc.epsilon, "lip closure threshold");
  g->add_option("--phonemes-per-sentence", gen.gc.phonemes_per_sentence,
                "phonemes per sentence");
  g->add_option("--test-fraction", gen.gc.test_fraction,
                "fraction of sentences held out");
  g->callback([&] { run_gen_corpus(gen); });

  TrainPriorArgs tp;
  auto* p = app.add_subcommand("train-prior",
                               "train the region motion priors");
  p->add_option("--corpus", tp.corpus_dir,
                "corpus directory (default: CDFACE_DATA_ROOT)");
  p->add_option("--out", tp.out, "checkpoint directory")->required();
  p->add_option("--region", tp.cfg.region, "lip | upper | both")
      ->check(CLI::IsMember({"lip", "upper", "both"}));
  p->add_flag("--resume", tp.resume, "continue from the checkpoint if present");
  p->add_option("--epochs", tp.epochs, "total prior epochs");
  p->add_option("--seed", tp.cfg.seed, "training seed");
  p->add_option("--lr", tp.cfg.lr, "learning rate");
  p->add_option("--batch", tp.cfg.batch, "clips per optimizer step");
  p->add_option("--codebook", tp.cfg.K, "tokens per region codebook");
  p->add_option("--code-dim", tp.cfg.d, "token embedding width");
  p->add_option("--codes-per-frame", tp.cfg.h, "code slots per frame");
  p->add_option("--d-model", tp.cfg.prior_d_model, "prior transformer width");
  p->add_option("--heads", tp.cfg.prior_heads, "prior attention heads");
  p->add_option("--depth", tp.cfg.prior_depth, "prior transformer depth");
  p->add_option("--nl", tp.cfg.n_lip, "lip samples per query (fixed at build)");
  p->add_option("--nu", tp.cfg.n_upper,
                "upper samples per query (fixed at build)");
  p->add_option("--query-d-model", tp.cfg.query_d_model,
                "querier transformer width");
  auto* eps = p->add_option("--epsilon", tp.cfg.weights.epsilon,
                            "loss closure threshold (default: corpus value)");
  p->callback([&] {
    tp.epsilon_given = eps->count() > 0;
    run_train_prior(tp);
  });

  TrainQueryArgs tq;
  auto* q = app.add_subcommand("train-query",
                               "train the code queriers over frozen priors");
  q->add_option("--corpus", tq.corpus_dir,
                "corpus directory (default: CDFACE_DATA_ROOT)");
  q->add_option("--ckpt", tq.ckpt, "checkpoint with trained priors")
      ->required();
  q->add_option("--out", tq.out, "output checkpoint (default: --ckpt)");
  q->add_option("--epochs", tq.epochs, "total query epochs");
  q->add_option("--nl", tq.nl, "must match the model's lip heads");
  q->add_option("--nu", tq.nu, "must match the model's upper heads");
  q->add_flag("--unmasked", tq.unmasked,
              "ablation: ignore closure masks in the lip losses");
  q->add_flag("--per-sequence-min", tq.per_sequence_min,
              "min-of-N over whole sequences instead of per frame");
  q->callback([&] { run_train_query(tq); });

  SynthArgs sy;
  auto* s = app.add_subcommand("synthesize",
                               "sample diverse faces for one audio clip");
  s->add_option("--corpus", sy.corpus_dir,
                "corpus directory (default: CDFACE_DATA_ROOT)");
  s->add_option("--ckpt", sy.ckpt, "trained checkpoint")->required();
  s->add_option("--audio", sy.clip, "clip directory name, e.g. s000_sent00")
      ->required();
  s->add_option("--style", sy.style, "style id (default: the clip's own)");
  s->add_option("--out", sy.out, "output directory")->required();
  s->add_option("--nl", sy.nl, "lip variants to keep (default: all heads)");
  s->add_option("--nu", sy.nu, "upper variants to keep (default: all heads)");
  s->callback([&] { run_synthesize(sy); });

  ControlArgs ct;
  auto* c = app.add_subcommand(
      "control", "vary the upper face over one pinned lip track");
  c->add_option("--corpus", ct.corpus_dir,
                "corpus directory (default: CDFACE_DATA_ROOT)");
  c->add_option("--ckpt", ct.ckpt, "trained checkpoint")->required();
  c->add_option("--audio", ct.clip, "clip directory name")->required();
  c->add_option("--style", ct.style, "style id (default: the clip's own)");
  c->add_option("--out", ct.out, "output directory")->required();
  c->add_option("--fix-lip-from", ct.fix_lip_from,
                "lip sample index, or a lip-code container from synthesize");
  c->add_option("--nu", ct.nu, "upper variants (default: all heads)");
  c->callback([&] { run_control(ct); });

  EvalArgs ev;
  auto* e = app.add_subcommand("evaluate",
                               "run the metric battery against ground truth");
  e->add_option("--corpus", ev.corpus_dir,
                "corpus directory (default: CDFACE_DATA_ROOT)");
  auto* ck_opt = e->add_option("--ckpt", ev.ckpt, "trained checkpoint");
  e->add_option("--out", ev.out, "report directory")->required();
  e->add_option("--split", ev.opt.split, "train | test | all");
  e->add_flag("--control", ev.opt.control_mode,
              "evaluate with the lip track pinned to head 0");
  e->add_option("--nu", ev.opt.n_upper,
                "cap upper variants per lip sample (default: all)");
  e->add_option("--style", ev.style, "force one style id for every clip");
  e->add_flag("--self", ev.self,
              "compare ground truth against itself (errors must be zero)");
  e->callback([&] {
    require_io(ev.self || ck_opt->count() > 0,
               "evaluate: --ckpt is required unless --self is given");
    run_evaluate(ev);
  });

  ReportArgs rp;
  auto* r = app.add_subcommand(
      "report", "merge metric tables and emit plot-ready data");
  r->add_option("--in", rp.inputs,
                "evaluate/synthesize output directories (repeatable)");
  r->add_option("--ckpt", rp.ckpt, "checkpoint for loss curves");
  r->add_option("--out", rp.out, "table directory")->required();
  r->callback([&] { run_report(rp); });

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& err) {
    const int rc = app.exit(err);
    return rc == 0 ? 0 : 2;
  } catch (const cdface::ContractError& err) {
    std::cerr << "contract violation: " << err.what() << "\n";
    return 1;
  } catch (const cdface::IoError& err) {
    std::cerr << "io error: " << err.what() << "\n";
    return 2;
  }
  return 0;
}
