#include <cstddef>
#include <optional>
#include <vector>

#include <catch2/catch_amalgamated.hpp>

#include "cdface/metrics.hpp"
#include "cdface/querier.hpp"
#include "test_util.hpp"

using namespace cdface;
using namespace testutil;

namespace {

struct Rig {
  nn::ParamStore<double> lip_prior_ps, upper_prior_ps, lip_ps, upper_ps;
  std::optional<RegionPrior<double>> lip_prior, upper_prior;
  std::optional<CodeQuerier<double>> lip, upper;
  RegionPartition part;
  std::size_t audio_dim = 4;

  explicit Rig(std::size_t n_lip = 2, std::size_t n_upper = 2,
               std::uint64_t seed = 81) {
    part.lip_indices = {0, 1, 2};
    part.upper_indices = {3, 4, 5};
    part.closure_pair = {0, 1};
    Rng rng(seed);
    PriorConfig pc;
    pc.frame_dim = 9;
    pc.K = 6;
    pc.d = 3;
    pc.h = 1;
    pc.d_model = 8;
    pc.heads = 2;
    pc.depth = 1;
    pc.ffn_mult = 2;
    lip_prior.emplace(lip_prior_ps, "lip_prior", pc, "lip", rng);
    upper_prior.emplace(upper_prior_ps, "upper_prior", pc, "upper", rng);

    QuerierConfig qc;
    qc.n_samples = n_lip;
    qc.code_dim = pc.code_dim();
    qc.motion_dim = 9;
    qc.audio_dim = audio_dim;
    qc.d_model = 8;
    qc.heads = 2;
    qc.depth = 2;
    qc.ffn_mult = 2;
    qc.num_styles = 2;
    lip.emplace(lip_ps, "lip_query", qc, rng);
    qc.n_samples = n_upper;
    qc.lip_dim = 9;
    upper.emplace(upper_ps, "upper_query", qc, rng);
  }
};

bool tensors_differ(const Tensor<double>& a, const Tensor<double>& b) {
  return !(a == b);
}

// Typed null for template-argument deduction at free-function call sites.
constexpr const Tensor<double>* kNoLip = nullptr;

}  // namespace

TEST_CASE("trunk shapes and the empty-history boundary", "[querier]") {
  Rig rig;
  Rng rng(82);
  const Tensor<double> audio = random_tensor<double>(5, rig.audio_dim, rng);

  SECTION("no history yields one finite trunk row") {
    const auto out = rig.lip->trunk(Tensor<double>(0, 9), audio, nullptr, 0);
    REQUIRE(out->value.rows() == 1);
    REQUIRE(out->value.cols() == 8);
    REQUIRE(out->value.all_finite());
    const auto code = rig.lip->head(0, out);
    REQUIRE(code->value.rows() == 1);
    REQUIRE(code->value.cols() == 3);
  }
  SECTION("t committed frames yield t+1 rows") {
    const Tensor<double> hist = random_tensor<double>(3, 9, rng);
    const auto out = rig.lip->trunk(hist, audio, nullptr, 0);
    REQUIRE(out->value.rows() == 4);
    REQUIRE(out->value.all_finite());
  }
  SECTION("contract violations") {
    const Tensor<double> hist = random_tensor<double>(3, 9, rng);
    const Tensor<double> lip_hist = random_tensor<double>(3, 9, rng);
    REQUIRE_THROWS_AS(rig.lip->trunk(hist, audio, nullptr, 5), ContractError);
    REQUIRE_THROWS_AS(
        rig.lip->trunk(random_tensor<double>(3, 8, rng), audio, nullptr, 0),
        ContractError);
    REQUIRE_THROWS_AS(
        rig.lip->trunk(hist, random_tensor<double>(5, 3, rng), nullptr, 0),
        ContractError);
    // Audio shorter than the history needs to cover.
    REQUIRE_THROWS_AS(
        rig.lip->trunk(random_tensor<double>(6, 9, rng), audio, nullptr, 0),
        ContractError);
    // Lip stream presence must match the model.
    REQUIRE_THROWS_AS(rig.lip->trunk(hist, audio, &lip_hist, 0),
                      ContractError);
    REQUIRE_THROWS_AS(rig.upper->trunk(hist, audio, nullptr, 0),
                      ContractError);
    REQUIRE_THROWS_AS(rig.lip->head(7, rig.lip->trunk(hist, audio, nullptr, 0)),
                      ContractError);
  }
}

TEST_CASE("trunk is deterministic and style-sensitive", "[querier]") {
  Rig rig;
  Rng rng(83);
  const Tensor<double> audio = random_tensor<double>(4, rig.audio_dim, rng);
  const Tensor<double> hist = random_tensor<double>(2, 9, rng);
  const auto a = rig.lip->trunk(hist, audio, nullptr, 0);
  const auto b = rig.lip->trunk(hist, audio, nullptr, 0);
  REQUIRE(a->value == b->value);
  const auto other = rig.lip->trunk(hist, audio, nullptr, 1);
  REQUIRE(tensors_differ(a->value, other->value));
}

TEST_CASE("causal masks hide the future", "[querier]") {
  Rig rig;
  Rng rng(84);
  const std::size_t t = 3;
  const Tensor<double> hist = random_tensor<double>(t, 9, rng);
  const Tensor<double> audio = random_tensor<double>(8, rig.audio_dim, rng);

  SECTION("audio rows past the current step do not matter") {
    Tensor<double> perturbed = audio;
    for (std::size_t r = t + 1; r < perturbed.rows(); ++r)
      for (std::size_t c = 0; c < perturbed.cols(); ++c)
        perturbed(r, c) += 10.0;
    const auto a = rig.lip->trunk(hist, audio, nullptr, 0);
    const auto b = rig.lip->trunk(hist, perturbed, nullptr, 0);
    REQUIRE(a->value == b->value);
  }
  SECTION("audio at the current step does matter") {
    Tensor<double> perturbed = audio;
    perturbed(t, 0) += 10.0;
    const auto a = rig.lip->trunk(hist, audio, nullptr, 0);
    const auto b = rig.lip->trunk(hist, perturbed, nullptr, 0);
    for (std::size_t r = 0; r < t; ++r)
      for (std::size_t c = 0; c < a->value.cols(); ++c)
        REQUIRE(a->value(r, c) == b->value(r, c));
    REQUIRE(tensors_differ(a->value, b->value));
  }
  SECTION("own history is seen strictly causally") {
    Tensor<double> perturbed = hist;
    perturbed(t - 1, 4) += 10.0;
    const auto a = rig.lip->trunk(hist, audio, nullptr, 0);
    const auto b = rig.lip->trunk(perturbed, audio, nullptr, 0);
    for (std::size_t r = 0; r < t; ++r)
      for (std::size_t c = 0; c < a->value.cols(); ++c)
        REQUIRE(a->value(r, c) == b->value(r, c));
    REQUIRE(tensors_differ(a->value, b->value));
  }
  SECTION("lip conditioning is strictly past") {
    const Tensor<double> lip_hist = random_tensor<double>(t, 9, rng);
    Tensor<double> perturbed = lip_hist;
    perturbed(t - 1, 2) += 10.0;  // lip frame t-1 is visible only to row t
    const auto a = rig.upper->trunk(hist, audio, &lip_hist, 0);
    const auto b = rig.upper->trunk(hist, audio, &perturbed, 0);
    for (std::size_t r = 0; r < t; ++r)
      for (std::size_t c = 0; c < a->value.cols(); ++c)
        REQUIRE(a->value(r, c) == b->value(r, c));
    REQUIRE(tensors_differ(a->value, b->value));
  }
}

TEST_CASE("query_step reads one new code per head", "[querier]") {
  Rig rig;
  Rng rng(85);
  const Tensor<double> audio = random_tensor<double>(6, rig.audio_dim, rng);
  const std::size_t t = 2;
  std::vector<Tensor<double>> histories = {random_tensor<double>(t, 9, rng),
                                           random_tensor<double>(t, 9, rng)};
  const auto codes = query_step(*rig.lip, histories, kNoLip, audio, 0);
  REQUIRE(codes.size() == 2);
  for (std::size_t i = 0; i < 2; ++i) {
    REQUIRE(codes[i].rows() == 1);
    REQUIRE(codes[i].cols() == 3);
    const auto direct =
        rig.lip->head(i, rig.lip->trunk(histories[i], audio, nullptr, 0));
    for (std::size_t c = 0; c < 3; ++c)
      REQUIRE(codes[i](0, c) == direct->value(t, c));
  }
  SECTION("contract violations") {
    REQUIRE_THROWS_AS(query_step(*rig.lip, {histories[0]}, kNoLip, audio, 0),
                      ContractError);
    std::vector<Tensor<double>> uneven = {histories[0],
                                          random_tensor<double>(t + 1, 9, rng)};
    REQUIRE_THROWS_AS(query_step(*rig.lip, uneven, kNoLip, audio, 0),
                      ContractError);
    const Tensor<double> short_lip = random_tensor<double>(t + 1, 9, rng);
    REQUIRE_THROWS_AS(
        query_step(*rig.upper, histories, &short_lip, audio, 0),
        ContractError);
  }
}

TEST_CASE("generated streams commit decoded prefix frames", "[querier]") {
  Rig rig;
  Rng rng(86);
  const std::size_t steps = 4;
  const Tensor<double> audio = random_tensor<double>(steps, rig.audio_dim, rng);
  const auto [codes, motion] =
      generate_stream(*rig.lip, *rig.lip_prior, 1, audio, 0, steps, kNoLip);
  REQUIRE(codes.rows() == steps);
  REQUIRE(codes.cols() == 3);
  REQUIRE(motion.rows() == steps);
  REQUIRE(motion.cols() == 9);

  SECTION("replaying the loop reproduces the stream bit for bit") {
    Tensor<double> replay_codes(steps, 3), replay_motion(steps, 9);
    for (std::size_t t = 0; t < steps; ++t) {
      Tensor<double> hist(t, 9);
      for (std::size_t r = 0; r < t; ++r)
        for (std::size_t c = 0; c < 9; ++c) hist(r, c) = replay_motion(r, c);
      const auto out =
          rig.lip->head(1, rig.lip->trunk(hist, audio, nullptr, 0));
      for (std::size_t c = 0; c < 3; ++c)
        replay_codes(t, c) = out->value(t, c);
      Tensor<double> prefix(t + 1, 3);
      for (std::size_t r = 0; r <= t; ++r)
        for (std::size_t c = 0; c < 3; ++c) prefix(r, c) = replay_codes(r, c);
      const auto decoded = rig.lip_prior->decode(ad::constant(prefix));
      for (std::size_t c = 0; c < 9; ++c)
        replay_motion(t, c) = decoded->value(t, c);
    }
    REQUIRE(codes == replay_codes);
    REQUIRE(motion == replay_motion);
  }
  SECTION("prefix commits equal the full decode of the code sequence") {
    const auto full = rig.lip_prior->decode(ad::constant(codes));
    for (std::size_t t = 0; t < steps; ++t)
      for (std::size_t c = 0; c < 9; ++c)
        REQUIRE(close(motion(t, c), full->value(t, c), 1e-12, 1e-12));
  }
  SECTION("raw codes are committed without inference-time quantization") {
    // Head outputs of an untrained model land between tokens, so requantizing
    // the committed codes would move them.
    const auto [q, ids] = rig.lip_prior->quantize_sequence(codes);
    REQUIRE(tensors_differ(q, codes));
  }
}

TEST_CASE("rollout produces every lip-upper pairing", "[querier]") {
  Rig rig(2, 3);
  Rng rng(87);
  const std::size_t steps = 4;
  const Tensor<double> audio = random_tensor<double>(steps, rig.audio_dim, rng);
  const auto result = rollout(*rig.lip, *rig.lip_prior, *rig.upper,
                              *rig.upper_prior, audio, 0, steps, rig.part,
                              25.0, "subjA");
  REQUIRE(result.faces.size() == 6);
  REQUIRE(result.lip_motions.size() == 2);
  REQUIRE(result.upper_motions.size() == 6);
  REQUIRE(result.lineage.size() == 6);

  SECTION("lineage maps faces to their region streams") {
    for (std::size_t k = 0; k < result.faces.size(); ++k) {
      const auto [i, j] = result.lineage[k];
      REQUIRE(i == k / 3);
      REQUIRE(j == k % 3);
      const auto [lip_view, upper_view] =
          split_regions(result.faces[k], rig.part);
      REQUIRE(lip_view.offsets == result.lip_motions[i]);
      REQUIRE(upper_view.offsets == result.upper_motions[k]);
      REQUIRE(result.faces[k].fps == 25.0);
      REQUIRE(result.faces[k].subject_id == "subjA");
    }
  }
  SECTION("distinct lip parents condition distinct upper streams") {
    // Faces (0, j) and (1, j) share the upper head but not the lip parent.
    for (std::size_t j = 0; j < 3; ++j)
      REQUIRE(tensors_differ(result.upper_motions[j],
                             result.upper_motions[3 + j]));
  }
  SECTION("repeat runs are bit-identical") {
    const auto again = rollout(*rig.lip, *rig.lip_prior, *rig.upper,
                               *rig.upper_prior, audio, 0, steps, rig.part,
                               25.0, "subjA");
    for (std::size_t k = 0; k < result.faces.size(); ++k)
      REQUIRE(result.faces[k].offsets == again.faces[k].offsets);
  }
  SECTION("contract violations") {
    const Tensor<double> long_audio =
        random_tensor<double>(steps + 1, rig.audio_dim, rng);
    REQUIRE_THROWS_AS(rollout(*rig.lip, *rig.lip_prior, *rig.upper,
                              *rig.upper_prior, long_audio, 0, steps, rig.part,
                              25.0, "subjA"),
                      ContractError);
    // A lip-conditioned model cannot drive the lip region.
    REQUIRE_THROWS_AS(rollout(*rig.upper, *rig.lip_prior, *rig.upper,
                              *rig.upper_prior, audio, 0, steps, rig.part,
                              25.0, "subjA"),
                      ContractError);
  }
}

TEST_CASE("control mode pins the lip track", "[querier]") {
  Rig rig(3, 2);
  Rng rng(88);
  const std::size_t steps = 4;
  const Tensor<double> audio = random_tensor<double>(steps, rig.audio_dim, rng);
  const auto control = rollout(*rig.lip, *rig.lip_prior, *rig.upper,
                               *rig.upper_prior, audio, 0, steps, rig.part,
                               25.0, "subjA", /*control_mode=*/true);
  REQUIRE(control.faces.size() == 2);
  REQUIRE(control.lip_motions.size() == 1);

  SECTION("every face carries the head-0 lip stream bit for bit") {
    const auto full = rollout(*rig.lip, *rig.lip_prior, *rig.upper,
                              *rig.upper_prior, audio, 0, steps, rig.part,
                              25.0, "subjA");
    REQUIRE(control.lip_motions[0] == full.lip_motions[0]);
    for (const auto& face : control.faces) {
      const auto [lip_view, upper_view] = split_regions(face, rig.part);
      REQUIRE(lip_view.offsets == control.lip_motions[0]);
    }
  }
  SECTION("lip diversity is exactly zero while upper diversity is not") {
    REQUIRE(lpd(control.faces, rig.part) == 0.0);
    REQUIRE(upd(control.faces, rig.part) > 0.0);
    REQUIRE(apd(control.faces) > 0.0);
  }
}

TEST_CASE("single-head rollout and control rollout coincide", "[querier]") {
  Rig rig(1, 1);
  Rng rng(89);
  const std::size_t steps = 3;
  const Tensor<double> audio = random_tensor<double>(steps, rig.audio_dim, rng);
  const auto normal = rollout(*rig.lip, *rig.lip_prior, *rig.upper,
                              *rig.upper_prior, audio, 1, steps, rig.part,
                              25.0, "s");
  const auto control = rollout(*rig.lip, *rig.lip_prior, *rig.upper,
                               *rig.upper_prior, audio, 1, steps, rig.part,
                               25.0, "s", /*control_mode=*/true);
  REQUIRE(normal.faces.size() == 1);
  REQUIRE(control.faces.size() == 1);
  REQUIRE(normal.faces[0].offsets == control.faces[0].offsets);
}

TEST_CASE("teacher forcing shares trunks and reaches only the querier",
          "[querier]") {
  Rig rig(2, 3);
  Rng rng(90);
  const std::size_t frames = 5;
  const Tensor<double> gt_lip = random_tensor<double>(frames, 9, rng);
  const Tensor<double> gt_upper = random_tensor<double>(frames, 9, rng);
  const Tensor<double> audio =
      random_tensor<double>(frames, rig.audio_dim, rng);

  const auto out = teacher_forced_forward(*rig.lip, *rig.lip_prior, *rig.upper,
                                          *rig.upper_prior, gt_lip, gt_upper,
                                          audio, 0);
  SECTION("shapes") {
    REQUIRE(out.lip_codes.size() == 2);
    REQUIRE(out.upper_codes.size() == 3);
    for (const auto& c : out.lip_codes) {
      REQUIRE(c->value.rows() == frames);
      REQUIRE(c->value.cols() == 3);
    }
    for (const auto& m : out.lip_motions) {
      REQUIRE(m->value.rows() == frames);
      REQUIRE(m->value.cols() == 9);
    }
    for (const auto& m : out.upper_motions) {
      REQUIRE(m->value.rows() == frames);
      REQUIRE(m->value.cols() == 9);
    }
  }
  SECTION("first-step codes match a fresh-history query") {
    const auto first = query_step<double>(
        *rig.lip, {Tensor<double>(0, 9), Tensor<double>(0, 9)}, nullptr, audio,
        0);
    for (std::size_t i = 0; i < 2; ++i)
      for (std::size_t c = 0; c < 3; ++c)
        REQUIRE(out.lip_codes[i]->value(0, c) == first[i](0, c));
  }
  SECTION("frozen priors receive no gradients; queriers do") {
    rig.lip_prior_ps.set_trainable(false);
    rig.upper_prior_ps.set_trainable(false);
    const auto fresh = teacher_forced_forward(*rig.lip, *rig.lip_prior,
                                              *rig.upper, *rig.upper_prior,
                                              gt_lip, gt_upper, audio, 0);
    ad::Var<double> total;
    for (const auto& m : fresh.lip_motions) {
      total = total ? ad::add(total, ad::sum_all(m)) : ad::sum_all(m);
    }
    for (const auto& m : fresh.upper_motions)
      total = ad::add(total, ad::sum_all(m));
    ad::backward(total);
    for (const auto& [name, var] : rig.lip_prior_ps.items())
      REQUIRE(var->grad.empty());
    for (const auto& [name, var] : rig.upper_prior_ps.items())
      REQUIRE(var->grad.empty());
    bool lip_hit = false, upper_hit = false;
    for (const auto& [name, var] : rig.lip_ps.items())
      lip_hit = lip_hit || !var->grad.empty();
    for (const auto& [name, var] : rig.upper_ps.items())
      upper_hit = upper_hit || !var->grad.empty();
    REQUIRE(lip_hit);
    REQUIRE(upper_hit);
  }
  SECTION("contract violations") {
    REQUIRE_THROWS_AS(
        teacher_forced_forward(*rig.lip, *rig.lip_prior, *rig.upper,
                               *rig.upper_prior, gt_lip,
                               random_tensor<double>(frames + 1, 9, rng), audio,
                               0),
        ContractError);
    REQUIRE_THROWS_AS(
        teacher_forced_forward(*rig.lip, *rig.lip_prior, *rig.upper,
                               *rig.upper_prior, gt_lip, gt_upper,
                               random_tensor<double>(frames - 1, rig.audio_dim,
                                                     rng),
                               0),
        ContractError);
  }
}
