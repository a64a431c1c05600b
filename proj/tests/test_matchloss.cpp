// SPDX-License-Identifier: Apache-2.0
//
// gIoU values, matching-cost arithmetic, the assignment solver against an
// exhaustive oracle, and the assembled loss against a straight-line
// recomputation.
#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <vector>

#include "oracles.hpp"
#include "simdetr/grad_check.hpp"
#include "simdetr/matchloss.hpp"
#include "simdetr/rng.hpp"

using namespace simdetr;

TEST_CASE("giou_1d values") {
  CHECK(giou_1d({0.2, 0.5}, {0.2, 0.5}) == Catch::Approx(1.0).margin(1e-12));
  // inter .2, union .4, hull .4 -> 0.5
  CHECK(giou_1d({0.1, 0.4}, {0.2, 0.5}) == Catch::Approx(0.5).margin(1e-12));
  // disjoint: IoU 0, slack (1.0-0.4)/1.0 -> -0.6
  CHECK(giou_1d({0.0, 0.2}, {0.8, 1.0}) == Catch::Approx(-0.6).margin(1e-12));
}

TEST_CASE("giou_1d properties") {
  Rng rng(17, "giou");
  for (int rep = 0; rep < 200; ++rep) {
    double a1 = rng.uniform(), a2 = rng.uniform(), b1 = rng.uniform(), b2 = rng.uniform();
    Span a{std::min(a1, a2), std::max(a1, a2)};
    Span b{std::min(b1, b2), std::max(b1, b2)};
    double g = giou_1d(a, b);
    double i = temporal_iou(a, b);
    CHECK(g <= i + 1e-15);
    CHECK(g >= -1.0);
    CHECK(g <= 1.0);
    CHECK(giou_1d(b, a) == Catch::Approx(g).margin(1e-15));
    double hull = std::max(a.end, b.end) - std::min(a.start, b.start);
    double uni = a.length() + b.length() - std::max(0.0, std::min(a.end, b.end) - std::max(a.start, b.start));
    if (std::fabs(hull - uni) < 1e-15) {
      CHECK(g == Catch::Approx(i).margin(1e-12));
    } else {
      CHECK(g < i);
    }
  }
  // degenerate conventions
  CHECK(giou_1d({0.3, 0.3}, {0.3, 0.3}) == 0.0);
  CHECK(giou_1d({0.3, 0.3}, {0.2, 0.6}) == Catch::Approx(0.0).margin(1e-12));  // point in span
}

TEST_CASE("giou_var matches giou_1d and is differentiable") {
  Rng rng(18, "giouvar");
  for (int rep = 0; rep < 100; ++rep) {
    double a1 = rng.uniform(), a2 = rng.uniform(), b1 = rng.uniform(), b2 = rng.uniform();
    Span a{std::min(a1, a2), std::max(a1, a2)};
    Span b{std::min(b1, b2), std::max(b1, b2)};
    if (a.length() < 1e-3 && b.length() < 1e-3) continue;
    Tape tape;
    Var g = giou_var(tape.constant(a.start), tape.constant(a.end), tape.constant(b.start),
                     tape.constant(b.end));
    CHECK(g.scalar() == Catch::Approx(giou_1d(a, b)).margin(1e-12));
  }
  // gradient at a generic configuration (away from min/max ties)
  auto f = [](Tape& t, Var x) {
    Var as = select(x, 0), ae = select(x, 1), bs = select(x, 2), be = select(x, 3);
    return giou_var(as, ae, bs, be);
  };
  auto rep = grad_check(f, Tensor({4}, {0.12, 0.43, 0.27, 0.81}), 1e-6, 1e-5);
  INFO(rep.worst_rel_err << " " << rep.note);
  CHECK(rep.pass);
}

TEST_CASE("matching_cost") {
  SECTION("perfect prediction has zero cost") {
    auto cost = matching_cost({{0.2, 0.5}}, {1.0}, {{0.2, 0.5}}, 10, 1, 4);
    CHECK(cost[0][0] == Catch::Approx(0.0).margin(1e-12));
  }
  SECTION("hand value 4.5") {
    auto cost = matching_cost({{0.1, 0.4}}, {0.5}, {{0.2, 0.5}}, 10, 1, 4);
    CHECK(cost[0][0] == Catch::Approx(4.5).margin(1e-12));
  }
  SECTION("permuting ground truths permutes rows") {
    std::vector<Span> preds{{0.1, 0.2}, {0.5, 0.9}};
    std::vector<double> pc{0.3, 0.8};
    std::vector<Span> gts{{0.0, 0.25}, {0.4, 0.8}};
    auto c1 = matching_cost(preds, pc, gts, 10, 1, 4);
    auto c2 = matching_cost(preds, pc, {gts[1], gts[0]}, 10, 1, 4);
    CHECK(c1[0] == c2[1]);
    CHECK(c1[1] == c2[0]);
  }
}

TEST_CASE("hungarian_match examples") {
  SECTION("2x2") {
    MatchResult r = hungarian_match({{1, 2}, {3, 1}});
    CHECK(r.pairs == std::vector<std::pair<int, int>>{{0, 0}, {1, 1}});
    CHECK(r.total_cost == 2.0);
  }
  SECTION("1x1") {
    MatchResult r = hungarian_match({{7}});
    CHECK(r.pairs == std::vector<std::pair<int, int>>{{0, 0}});
    CHECK(r.total_cost == 7.0);
  }
  SECTION("rectangular 2x3") {
    MatchResult r = hungarian_match({{5, 2, 3}, {1, 6, 3}});
    CHECK(r.pairs == std::vector<std::pair<int, int>>{{0, 1}, {1, 0}});
    CHECK(r.total_cost == 3.0);
  }
  SECTION("more targets than queries is an error") {
    CHECK_THROWS_AS(hungarian_match({{1, 2}, {3, 4}, {5, 6}}), std::invalid_argument);
  }
  SECTION("ties resolve to the lexicographically smallest pair list") {
    MatchResult r = hungarian_match({{0, 0, 0}, {0, 0, 0}, {0, 0, 0}});
    CHECK(r.pairs == std::vector<std::pair<int, int>>{{0, 0}, {1, 1}, {2, 2}});
  }
}

TEST_CASE("hungarian_match equals brute force on 200 random rectangular matrices") {
  Rng rng(19, "hungarian");
  for (int rep = 0; rep < 200; ++rep) {
    std::size_t m = 1 + rng.below(7);
    std::size_t k = 1 + rng.below(m);
    std::vector<std::vector<double>> cost(k, std::vector<double>(m));
    for (auto& row : cost) {
      for (double& v : row) v = rng.uniform(0.0, 10.0);
    }
    MatchResult got = hungarian_match(cost);
    MatchResult want = oracles::brute_force_assignment(cost);
    CHECK(got.total_cost == want.total_cost);
    CHECK(got.pairs == want.pairs);
  }
}

namespace {

// builds a hand-specified single-layer trace around one ground truth setup
struct FakeTraceBuilder {
  Tape tape;
  ParamStore store;
  std::unique_ptr<ParamBinder> pb;

  FakeTraceBuilder() {
    store.add("glb.log_tau", Tensor::scalar(std::log(100.0), true));
    pb = std::make_unique<ParamBinder>(tape, store);
  }
};

}  // namespace

TEST_CASE("total_loss at the optimum") {
  // predictions equal the two ground truths; confident heads; memory aligned
  // with matched queries inside their spans and anti-aligned outside
  VideoSample sample;
  sample.id = "opt";
  sample.n_frames = 8;
  sample.feature_dim = 4;
  sample.text_len = 2;
  sample.gt_spans = {Span(0.0, 0.25), Span(0.5, 0.75)};
  sample.frame_features.assign(8, std::vector<double>(4, 0.0));
  sample.text_features.assign(2, std::vector<double>(4, 0.0));
  sample.saliency = frames_inside_any(sample.gt_spans, 8);

  ModelConfig cfg;
  cfg.hidden_dim = 4;
  cfg.num_queries = 3;
  cfg.num_decoder_layers = 1;

  FakeTraceBuilder fb;
  std::size_t m = 3, c = 4, n = 8;

  // query 0 -> gt 0, query 2 -> gt 1; query 1 unmatched
  std::vector<double> starts{0.0, 0.9, 0.5};
  std::vector<double> ends{0.25, 0.95, 0.75};
  std::vector<double> cls_logits{40.0, -40.0, 40.0};
  std::vector<double> p_iou{1.0, 0.0, 1.0};

  // memory: each frame is aligned with its own segment's query direction and
  // anti-aligned with every other region
  std::vector<double> mem(n * c, 0.0);
  for (std::size_t j = 0; j < n; ++j) {
    if (frame_inside(sample.gt_spans[0], j, n)) {
      mem[j * c + 0] = 1.0;
      mem[j * c + 1] = -1.0;
    } else if (frame_inside(sample.gt_spans[1], j, n)) {
      mem[j * c + 0] = -1.0;
      mem[j * c + 1] = 1.0;
    } else {
      mem[j * c + 0] = -1.0;
      mem[j * c + 1] = -1.0;
    }
  }
  std::vector<double> queries(m * c, 0.0);
  queries[0 * c + 0] = 1.0;  // aligned with gt0 frames
  queries[1 * c + 2] = 1.0;
  queries[2 * c + 1] = 1.0;  // aligned with gt1 frames

  // saliency scores separate perfectly
  std::vector<double> sal(n);
  for (std::size_t j = 0; j < n; ++j) sal[j] = sample.saliency[j] ? 1.0 : 0.0;

  DecoderTrace trace;
  trace.memory = fb.tape.constant({n, c}, mem);
  trace.saliency_logits = fb.tape.constant({n}, std::vector<double>(n, 0.0));
  trace.saliency = fb.tape.constant({n}, sal);
  LayerTrace lt;
  lt.queries = fb.tape.constant({m, c}, queries);
  lt.starts = fb.tape.constant({m}, starts);
  lt.ends = fb.tape.constant({m}, ends);
  lt.cls_logits = fb.tape.constant({m}, cls_logits);
  lt.p_cls = sigmoid(lt.cls_logits);
  lt.p_iou = fb.tape.constant({m}, p_iou);
  lt.cross_attn = softmax_rows(fb.tape.constant({m, n}, std::vector<double>(m * n, 0.0)));
  trace.layers.push_back(std::move(lt));

  LossResult r = total_loss(*fb.pb, trace, sample, cfg);
  CHECK(r.breakdown.l1 == Catch::Approx(0.0).margin(1e-12));
  CHECK(r.breakdown.giou == Catch::Approx(0.0).margin(1e-12));
  CHECK(r.breakdown.cls == Catch::Approx(0.0).margin(1e-10));
  CHECK(r.breakdown.iou == Catch::Approx(0.0).margin(1e-12));
  CHECK(r.breakdown.saliency == 0.0);
  CHECK(r.breakdown.bridge == Catch::Approx(-1.0).margin(1e-10));
  // matched pairs recorded
  REQUIRE(trace.layers[0].match.has_value());
  CHECK(trace.layers[0].match->pairs ==
        std::vector<std::pair<int, int>>{{0, 0}, {1, 2}});
}

TEST_CASE("doubling a lambda doubles that contribution exactly") {
  Rng rng(77, "lambda");
  GenConfig g;
  g.samples = 1;
  g.n_frames = 12;
  g.feature_dim = 6;
  g.text_len = 3;
  g.segments_min = 2;
  g.segments_max = 2;
  g.min_seg_len = 0.1;
  g.max_seg_len = 0.2;
  g.noise_sigma = 0.1;
  Rng srng(3, "sample");
  VideoSample sample = generate_sample(g, srng, "s");

  ModelConfig cfg;
  cfg.hidden_dim = 8;
  cfg.num_queries = 4;
  cfg.num_decoder_layers = 2;
  cfg.mlp_hidden = 4;
  ParamStore store = init_params(cfg, g.feature_dim);

  auto run = [&](double lambda_giou) {
    Tape tape;
    ParamBinder pb(tape, store);
    ModelConfig c2 = cfg;
    c2.lambda_giou = lambda_giou;
    DecoderTrace trace = forward(pb, sample, c2);
    return total_loss(pb, trace, sample, c2);
  };
  LossResult r1 = run(1.0);
  LossResult r2 = run(2.0);
  CHECK(r1.breakdown.giou == r2.breakdown.giou);  // unweighted term unchanged
  CHECK(r2.breakdown.total - r1.breakdown.total ==
        Catch::Approx(r1.breakdown.giou).margin(1e-12));
}

TEST_CASE("total_loss matches a straight-line recomputation on random traces") {
  Rng rng(101, "formula");
  for (int rep = 0; rep < 5; ++rep) {
    GenConfig g;
    g.samples = 1;
    g.n_frames = 10;
    g.feature_dim = 5;
    g.text_len = 4;
    g.segments_min = 1;
    g.segments_max = 3;
    g.min_seg_len = 0.12;
    g.max_seg_len = 0.22;
    g.noise_sigma = 0.2;
    g.distractor_sim = 0.3;
    Rng srng(200 + rep, "sample");
    VideoSample sample = generate_sample(g, srng, "s" + std::to_string(rep));

    ModelConfig cfg;
    cfg.hidden_dim = 8;
    cfg.num_queries = 5;
    cfg.num_decoder_layers = 2;
    cfg.mlp_hidden = 4;
    cfg.seed = 300 + rep;
    ParamStore store = init_params(cfg, g.feature_dim);

    Tape tape;
    ParamBinder pb(tape, store);
    DecoderTrace trace = forward(pb, sample, cfg);
    LossResult got = total_loss(pb, trace, sample, cfg);
    LossBreakdown want = oracles::reference_total_loss(trace, sample, cfg, store);

    CHECK(got.breakdown.l1 == Catch::Approx(want.l1).margin(1e-12));
    CHECK(got.breakdown.giou == Catch::Approx(want.giou).margin(1e-12));
    CHECK(got.breakdown.cls == Catch::Approx(want.cls).margin(1e-12));
    CHECK(got.breakdown.saliency == Catch::Approx(want.saliency).margin(1e-12));
    CHECK(got.breakdown.bridge == Catch::Approx(want.bridge).margin(1e-12));
    CHECK(got.breakdown.iou == Catch::Approx(want.iou).margin(1e-12));
    CHECK(got.breakdown.total == Catch::Approx(want.total).margin(1e-12));
    CHECK(got.breakdown.bridge >= -1.0);
    CHECK(got.breakdown.bridge <= 0.0);
  }
}

TEST_CASE("total_loss is invariant to ground-truth order") {
  GenConfig g;
  g.samples = 1;
  g.n_frames = 12;
  g.feature_dim = 6;
  g.text_len = 3;
  g.segments_min = 3;
  g.segments_max = 3;
  g.min_seg_len = 0.1;
  g.max_seg_len = 0.18;
  g.noise_sigma = 0.15;
  Rng srng(5, "sample");
  VideoSample sample = generate_sample(g, srng, "s");

  ModelConfig cfg;
  cfg.hidden_dim = 8;
  cfg.num_queries = 5;
  cfg.num_decoder_layers = 2;
  cfg.mlp_hidden = 4;
  ParamStore store = init_params(cfg, g.feature_dim);

  auto run = [&](const VideoSample& s) {
    Tape tape;
    ParamBinder pb(tape, store);
    DecoderTrace trace = forward(pb, s, cfg);
    return total_loss(pb, trace, s, cfg).breakdown;
  };
  LossBreakdown a = run(sample);
  VideoSample reversed = sample;
  std::reverse(reversed.gt_spans.begin(), reversed.gt_spans.end());
  LossBreakdown b = run(reversed);
  CHECK(a.total == b.total);
  CHECK(a.l1 == b.l1);
  CHECK(a.giou == b.giou);
  CHECK(a.bridge == b.bridge);

  // sample without ground truths is rejected
  VideoSample empty = sample;
  empty.gt_spans.clear();
  Tape tape;
  ParamBinder pb(tape, store);
  DecoderTrace trace = forward(pb, sample, cfg);
  CHECK_THROWS_AS(total_loss(pb, trace, empty, cfg), std::invalid_argument);
}
