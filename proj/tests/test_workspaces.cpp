#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "sigma/action.hpp"
#include "sigma/errors.hpp"
#include "sigma/language.hpp"
#include "sigma/vision.hpp"
#include "test_util.hpp"

using namespace sigma;
using namespace sigma::testing;

namespace {

// FD check of one loss over the named parameter groups (prefix match).
double fd_check(SigmaModel& model, const std::vector<std::string>& prefixes,
                const std::function<double(SigmaModel&, std::map<std::string, Tensor>*)>& loss) {
  for (const auto& name : model.params().names()) {
    bool on = false;
    for (const auto& p : prefixes) {
      if (name.rfind(p, 0) == 0) on = true;
    }
    model.params().set_trainable(name, on);
  }
  std::map<std::string, Tensor> analytic;
  loss(model, &analytic);
  auto numeric = finite_diff_gradient(
      [&](ParamStore&) { return loss(model, nullptr); }, model.params(), 1e-5);
  return max_rel_gradient_error(analytic, numeric);
}

}  // namespace

// --------------------------------------------------------------------------
// vision workspace

TEST_CASE("encode_state: zero state gives zero tokens of fixed shape") {
  SigmaModel model = tiny_model();
  Graph g;
  Var tokens = vision::encode_state(g, model.params(), model.config(),
                                    g.input(Tensor::zeros({3})));
  const Tensor& t = g.value(tokens);
  CHECK(t.rows() == model.config().n_s);
  CHECK(t.cols() == model.config().d_model);
  for (std::size_t i = 0; i < t.size(); ++i) CHECK(t[i] == 0.0);

  CHECK_THROWS_AS(
      vision::encode_state(g, model.params(), model.config(), g.input(Tensor::zeros({5}))),
      DimensionError);
}

TEST_CASE("encode_state gradients match finite differences") {
  SigmaModel model = tiny_model(3);
  Rng rng(8);
  Tensor state = normal_tensor(rng, {3}, 1.0);
  double err = fd_check(model, {"state."},
                        [&](SigmaModel& m, std::map<std::string, Tensor>* grads) {
                          Graph g;
                          Var t = vision::encode_state(g, m.params(), m.config(), g.input(state));
                          Var loss = g.mean_all(g.mul(t, t));
                          if (grads) {
                            g.backward(loss);
                            *grads = g.param_grads();
                          }
                          return g.value(loss)[0];
                        });
  CHECK(err < 1e-4);
}

TEST_CASE("resample: fixed token budget for any feature count") {
  SigmaModel model = tiny_model();
  Rng rng(5);
  for (std::size_t nf : {1u, 5u, 12u}) {
    Graph g;
    Var f = vision::project_features(g, model.params(), model.config(),
                                     g.input(normal_tensor(rng, {nf, 5}, 1.0)));
    Var v = vision::resample(g, model.params(), model.config(), f);
    CHECK(g.value(v).rows() == model.config().n_v);
    CHECK(g.value(v).cols() == model.config().d_model);
  }
  Graph g;
  CHECK_THROWS_AS(vision::resample(g, model.params(), model.config(), g.input(Tensor::zeros({0, 8}))),
                  InputError);
}

TEST_CASE("resample: single feature row acts as the only key") {
  SigmaModel model = tiny_model();
  Rng rng(6);
  Tensor one = normal_tensor(rng, {1, 8}, 1.0);
  Tensor three({3, 8});
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t j = 0; j < 8; ++j) three(i, j) = one(0, j);
  Graph g;
  Var a = vision::resample(g, model.params(), model.config(), g.input(one));
  Var b = vision::resample(g, model.params(), model.config(), g.input(three));
  CHECK(max_abs_diff(g.value(a), g.value(b)) < 1e-12);
}

TEST_CASE("resample attention rows sum to one") {
  SigmaModel model = tiny_model();
  ParamStore& ps = model.params();
  Rng rng(61);
  Tensor f = normal_tensor(rng, {5, 8}, 1.2);
  // Reconstruct A from the same parameters.
  Graph g;
  Var q = g.matmul(g.param(ps, "vision.resample.queries"), g.param(ps, "vision.resample.wq"));
  Var k = g.matmul(g.input(f), g.param(ps, "vision.resample.wk"));
  Var attn = g.softmax_rows(g.scale(g.matmul_nt(q, k), 1.0 / std::sqrt(8.0)));
  for (std::size_t i = 0; i < g.value(attn).rows(); ++i) {
    double sum = 0.0;
    for (std::size_t j = 0; j < 5; ++j) sum += g.value(attn)(i, j);
    CHECK(std::fabs(sum - 1.0) <= 1e-12);
  }
}

TEST_CASE("film gate closes as theta_mod goes to minus infinity") {
  SigmaModel model = tiny_model();
  model.params().get("heads.gate.theta_mod")[0] = -40.0;
  Rng rng(9);
  Tensor vb = normal_tensor(rng, {3, 8}, 1.0);
  Tensor tau = normal_tensor(rng, {1, 4}, 1.0);
  Graph g;
  auto film = vision::film_modulate(g, model.params(), model.config(), g.input(vb), g.input(tau));
  CHECK(max_abs_diff(g.value(film.v_mod), vb) < 1e-12);
}

TEST_CASE("identity film leaves the base tokens untouched") {
  SigmaModel model = tiny_model();
  // gamma = 1, beta = 0 exactly: zero the generator weights, keep the biases.
  for (double& v : model.params().get("heads.film.w2").data()) v = 0.0;
  Rng rng(10);
  Tensor vb = normal_tensor(rng, {3, 8}, 1.0);
  Tensor tau = normal_tensor(rng, {1, 4}, 1.0);
  Graph g;
  auto film = vision::film_modulate(g, model.params(), model.config(), g.input(vb), g.input(tau));
  CHECK(bit_equal(g.value(film.v_mod), vb));
  for (std::size_t j = 0; j < 8; ++j) {
    CHECK(g.value(film.gamma)[j] == 1.0);
    CHECK(g.value(film.beta)[j] == 0.0);
  }
}

TEST_CASE("film interpolates between base and film tokens") {
  SigmaModel model = tiny_model();
  Rng rng(12);
  Tensor vb = normal_tensor(rng, {4, 8}, 1.0);
  Tensor tau = normal_tensor(rng, {1, 4}, 0.7);
  Graph g;
  auto film = vision::film_modulate(g, model.params(), model.config(), g.input(vb), g.input(tau));
  double gate = std::exp(model.params().get("heads.gate.theta_mod")[0]);
  for (std::size_t i = 0; i < 4; ++i) {
    for (std::size_t j = 0; j < 8; ++j) {
      double vfilm = g.value(film.gamma)[j] * vb(i, j) + g.value(film.beta)[j];
      double expect = (1.0 - gate) * vb(i, j) + gate * vfilm;
      CHECK(g.value(film.v_mod)(i, j) == doctest::Approx(expect).epsilon(1e-12));
    }
  }
}

TEST_CASE("film is channel-wise: permuting tokens permutes the output") {
  SigmaModel model = tiny_model();
  Rng rng(13);
  Tensor vb = normal_tensor(rng, {4, 8}, 1.0);
  Tensor tau = normal_tensor(rng, {1, 4}, 0.7);
  Tensor permuted({4, 8});
  std::size_t perm[4] = {2, 0, 3, 1};
  for (std::size_t i = 0; i < 4; ++i)
    for (std::size_t j = 0; j < 8; ++j) permuted(i, j) = vb(perm[i], j);
  Graph g;
  auto a = vision::film_modulate(g, model.params(), model.config(), g.input(vb), g.input(tau));
  auto b = vision::film_modulate(g, model.params(), model.config(), g.input(permuted), g.input(tau));
  for (std::size_t i = 0; i < 4; ++i)
    for (std::size_t j = 0; j < 8; ++j) {
      CHECK(g.value(b.v_mod)(i, j) == g.value(a.v_mod)(perm[i], j));
    }
}

TEST_CASE("refine preserves shape and reduces to identity with zero blocks") {
  SigmaModel model = tiny_model();
  Rng rng(14);
  Tensor vm = normal_tensor(rng, {3, 8}, 1.0);
  {
    Graph g;
    Var out = vision::refine(g, model.params(), model.config(), g.input(vm));
    CHECK(g.value(out).rows() == 3);
    CHECK(g.value(out).cols() == 8);
  }
  for (const auto& name : model.params().names()) {
    if (name.rfind("vision.refine.", 0) == 0) {
      for (double& v : model.params().get(name).data()) v = 0.0;
    }
  }
  Graph g;
  Var out = vision::refine(g, model.params(), model.config(), g.input(vm));
  CHECK(max_abs_diff(g.value(out), vm) == 0.0);
}

TEST_CASE("refine gradients match finite differences") {
  SigmaModel model = tiny_model(15);
  Rng rng(16);
  Tensor vm = normal_tensor(rng, {3, 8}, 1.0);
  double err = fd_check(model, {"vision.refine."},
                        [&](SigmaModel& m, std::map<std::string, Tensor>* grads) {
                          Graph g;
                          Var out = vision::refine(g, m.params(), m.config(), g.input(vm));
                          Var loss = g.mean_all(g.mul(out, out));
                          if (grads) {
                            g.backward(loss);
                            *grads = g.param_grads();
                          }
                          return g.value(loss)[0];
                        });
  CHECK(err < 1e-4);
}

// --------------------------------------------------------------------------
// language workspace

TEST_CASE("encode_text is deterministic and pads consistently") {
  SigmaModel model = tiny_model();
  Graph g;
  Var a = lang::encode_text(g, model.params(), model.config(), model.vocab(), "pick the red block");
  Var b = lang::encode_text(g, model.params(), model.config(), model.vocab(), "pick the red block");
  CHECK(bit_equal(g.value(a), g.value(b)));
  CHECK(g.value(a).rows() == model.config().n_t);

  Var c = lang::encode_text(g, model.params(), model.config(), model.vocab(), "hold still");
  Var d = lang::encode_text(g, model.params(), model.config(), model.vocab(), "pick the");
  // Rows beyond each command are padded; pad rows agree across commands.
  for (std::size_t j = 0; j < 8; ++j) {
    CHECK(g.value(d)(2, j) == g.value(c)(2, j));
    CHECK(g.value(d)(3, j) == g.value(c)(3, j));
  }

  // One-hot algebra: token row equals the projection row of the word.
  std::size_t red = model.vocab().index_of("red");
  for (std::size_t j = 0; j < 8; ++j) {
    CHECK(g.value(a)(2, j) == model.params().get("text.proj")(red, j));
  }

  CHECK_THROWS_WITH_AS(
      lang::encode_text(g, model.params(), model.config(), model.vocab(), "pick the purple block"),
      doctest::Contains("purple"), VocabError);
}

TEST_CASE("backbone output covers all segments and zero blocks pass through") {
  SigmaModel model = tiny_model();
  const SigmaConfig& cfg = model.config();
  Rng rng(17);
  Tensor text = normal_tensor(rng, {cfg.n_t, 8}, 1.0);
  Tensor vis = normal_tensor(rng, {cfg.n_v, 8}, 1.0);
  Tensor state = normal_tensor(rng, {cfg.n_s, 8}, 1.0);
  {
    Graph g;
    Var h = lang::backbone_forward(g, model.params(), cfg, g.input(text), g.input(vis),
                                   g.input(state));
    CHECK(g.value(h).rows() == cfg.n_t + cfg.n_v + cfg.n_s);
  }
  for (const auto& name : model.params().names()) {
    if (name.rfind("lm.block", 0) == 0) {
      for (double& v : model.params().get(name).data()) v = 0.0;
    }
  }
  Graph g;
  Var h = lang::backbone_forward(g, model.params(), cfg, g.input(text), g.input(vis),
                                 g.input(state));
  // Residual path only: output = input + segment embeddings.
  const Tensor& seg_t = model.params().get("lm.segment.text");
  for (std::size_t j = 0; j < 8; ++j) {
    CHECK(g.value(h)(0, j) == doctest::Approx(text(0, j) + seg_t[j]).epsilon(1e-15));
  }
}

TEST_CASE("backbone gradients (LoRA factors live) match finite differences") {
  SigmaModel model = tiny_model(18);
  // Nonzero LoRA B so the low-rank path carries signal.
  Rng rng(19);
  for (const auto& name : model.params().names()) {
    if (name.find("lora_b") != std::string::npos) {
      model.params().get(name) = normal_tensor(rng, model.params().get(name).shape(), 0.3);
    }
  }
  const SigmaConfig& cfg = model.config();
  Tensor text = normal_tensor(rng, {cfg.n_t, 8}, 1.0);
  Tensor vis = normal_tensor(rng, {cfg.n_v, 8}, 1.0);
  Tensor state = normal_tensor(rng, {cfg.n_s, 8}, 1.0);
  double err = fd_check(model, {"lm.block", "lm.segment."},
                        [&](SigmaModel& m, std::map<std::string, Tensor>* grads) {
                          Graph g;
                          Var h = lang::backbone_forward(g, m.params(), m.config(), g.input(text),
                                                         g.input(vis), g.input(state));
                          Var loss = g.mean_all(g.mul(h, h));
                          if (grads) {
                            g.backward(loss);
                            *grads = g.param_grads();
                          }
                          return g.value(loss)[0];
                        });
  CHECK(err < 1e-4);
}

TEST_CASE("semantic factors: shape and single-token reading") {
  SigmaModel model = tiny_model();
  Rng rng(20);
  Graph g;
  Var hidden = g.input(normal_tensor(rng, {6, 8}, 1.0));
  Var z = lang::read_semantic_factors(g, model.params(), model.config(), hidden);
  CHECK(g.value(z).rows() == model.config().k_sem);
  CHECK(g.value(z).cols() == 8);

  Var one = g.input(normal_tensor(rng, {1, 8}, 1.0));
  Var zf = lang::read_semantic_factors(g, model.params(), model.config(), one);
  Var vproj = g.matmul(one, g.param(model.params(), "heads.sem.wv"));
  for (std::size_t i = 0; i < model.config().k_sem; ++i)
    for (std::size_t j = 0; j < 8; ++j) {
      CHECK(g.value(zf)(i, j) == doctest::Approx(g.value(vproj)(0, j)).epsilon(1e-15));
    }
}

TEST_CASE("memory gate limits: open keeps, closed replaces, always convex") {
  SigmaModel model = tiny_model();
  Rng rng(22);
  Tensor m_prev = normal_tensor(rng, {1, 8}, 1.0);
  Tensor z_pool = normal_tensor(rng, {1, 8}, 1.0);

  auto run = [&](double bias) {
    for (double& v : model.params().get("heads.mem.bl").data()) v = bias;
    Graph g;
    auto upd = lang::update_memory(g, model.params(), model.config(), g.input(m_prev),
                                   g.input(z_pool));
    Graph g2;
    Var u = g2.gelu(g2.affine(g2.input(z_pool), g2.param(model.params(), "heads.mem.wu"),
                              g2.param(model.params(), "heads.mem.bu")));
    return std::make_pair(g.value(upd.m), g2.value(u));
  };

  auto [m_open, u_open] = run(40.0);
  CHECK(max_abs_diff(m_open, m_prev) < 1e-12);
  auto [m_closed, u_closed] = run(-40.0);
  CHECK(max_abs_diff(m_closed, u_closed) < 1e-12);

  for (double& v : model.params().get("heads.mem.bl").data()) v = 0.0;
  for (int trial = 0; trial < 20; ++trial) {
    Tensor mp = normal_tensor(rng, {1, 8}, 1.5);
    Tensor zp = normal_tensor(rng, {1, 8}, 1.5);
    Graph g;
    auto upd = lang::update_memory(g, model.params(), model.config(), g.input(mp), g.input(zp));
    Graph g2;
    Var u = g2.gelu(g2.affine(g2.input(zp), g2.param(model.params(), "heads.mem.wu"),
                              g2.param(model.params(), "heads.mem.bu")));
    for (std::size_t j = 0; j < 8; ++j) {
      double lo = std::min(mp[j], g2.value(u)[j]);
      double hi = std::max(mp[j], g2.value(u)[j]);
      CHECK(g.value(upd.m)[j] >= lo - 1e-12);
      CHECK(g.value(upd.m)[j] <= hi + 1e-12);
      CHECK(g.value(upd.lambda)[j] > 0.0);
      CHECK(g.value(upd.lambda)[j] < 1.0);
    }
  }
}

TEST_CASE("summary heads have disjoint parameters") {
  SigmaModel model = tiny_model();
  Rng rng(23);
  Tensor hidden = normal_tensor(rng, {9, 8}, 1.0);
  auto run = [&]() {
    Graph g;
    auto s = lang::summarize(g, model.params(), model.config(), g.input(hidden));
    return std::array<Tensor, 3>{g.value(s.c_env), g.value(s.c_beh), g.value(s.c_text)};
  };
  auto before = run();
  CHECK(before[0].size() == 8);
  for (double& v : model.params().get("heads.sum_env.w").data()) v += 0.5;
  model.params().get("heads.sum_env.q")[0] += 1.0;
  auto after = run();
  CHECK_FALSE(bit_equal(before[0], after[0]));
  CHECK(bit_equal(before[1], after[1]));
  CHECK(bit_equal(before[2], after[2]));
}

TEST_CASE("intent head: zero inputs map to zero, gradients check out") {
  SigmaModel model = tiny_model(24);
  {
    Graph g;
    Var zero = g.input(Tensor::zeros({1, 8}));
    Var z = lang::infer_intent(g, model.params(), model.config(), zero, zero, zero);
    CHECK(g.value(z).cols() == 8);
    for (std::size_t j = 0; j < 8; ++j) CHECK(g.value(z)[j] == 0.0);
  }
  Rng rng(25);
  Tensor m = normal_tensor(rng, {1, 8}, 1.0);
  Tensor ce = normal_tensor(rng, {1, 8}, 1.0);
  Tensor cb = normal_tensor(rng, {1, 8}, 1.0);
  double err = fd_check(model, {"heads.intent."},
                        [&](SigmaModel& mod, std::map<std::string, Tensor>* grads) {
                          Graph g;
                          Var z = lang::infer_intent(g, mod.params(), mod.config(), g.input(m),
                                                     g.input(ce), g.input(cb));
                          Var loss = g.mean_all(g.mul(z, z));
                          if (grads) {
                            g.backward(loss);
                            *grads = g.param_grads();
                          }
                          return g.value(loss)[0];
                        });
  CHECK(err < 1e-4);
}

TEST_CASE("telepathy projection depends on concatenation order") {
  SigmaModel model = tiny_model();
  Rng rng(26);
  Tensor parts[6];
  for (auto& p : parts) p = normal_tensor(rng, {1, 8}, 1.0);
  auto project = [&](int a, int b) {
    Graph g;
    Var tau = lang::project_telepathy(g, model.params(), model.config(), g.input(parts[a]),
                                      g.input(parts[b]), g.input(parts[2]), g.input(parts[3]),
                                      g.input(parts[4]), g.input(parts[5]));
    return g.value(tau);
  };
  Tensor normal_order = project(0, 1);
  Tensor swapped = project(1, 0);
  CHECK(normal_order.size() == model.config().d_t);
  CHECK_FALSE(bit_equal(normal_order, swapped));
  CHECK(bit_equal(normal_order, project(0, 1)));  // deterministic

  Graph g;
  Var zero = g.input(Tensor::zeros({1, 8}));
  Var tau0 = lang::project_telepathy(g, model.params(), model.config(), zero, zero, zero, zero,
                                     zero, zero);
  for (std::size_t j = 0; j < model.config().d_t; ++j) CHECK(g.value(tau0)[j] == 0.0);
}

TEST_CASE("language modulation: closed gate and zero tau are no-ops") {
  SigmaModel model = tiny_model();
  Rng rng(27);
  Tensor hidden = normal_tensor(rng, {9, 8}, 1.0);
  Tensor tau = normal_tensor(rng, {1, 4}, 1.0);

  // Parameter leaves snapshot the store at first lookup, so each mutation
  // gets its own graph.
  Tensor unmod;
  {
    Graph g;
    unmod = g.value(lang::pool_high_level(g, model.params(), model.config(), g.input(hidden)));
  }
  model.params().get("heads.lmod.theta_lm")[0] = -40.0;
  {
    Graph g;
    Var closed = lang::modulate_language(g, model.params(), model.config(), g.input(hidden),
                                         g.input(tau));
    CHECK(max_abs_diff(g.value(closed), unmod) < 1e-12);
  }
  model.params().get("heads.lmod.theta_lm")[0] = 0.5;
  {
    Graph g;
    Var zero_tau = lang::modulate_language(g, model.params(), model.config(), g.input(hidden),
                                           g.input(Tensor::zeros({1, 4})));
    CHECK(max_abs_diff(g.value(zero_tau), unmod) == 0.0);
    Var open = lang::modulate_language(g, model.params(), model.config(), g.input(hidden),
                                       g.input(tau));
    CHECK(max_abs_diff(g.value(open), unmod) > 0.0);
  }
}

TEST_CASE("language-head gradients match finite differences") {
  SigmaModel model = tiny_model(28);
  Rng rng(29);
  Tensor hidden = normal_tensor(rng, {9, 8}, 1.0);
  Tensor m_prev = normal_tensor(rng, {1, 8}, 0.5);
  double err = fd_check(
      model, {"heads.sem.", "heads.mem.", "heads.sum_", "heads.intent.", "heads.tau.",
              "heads.lmod.", "lm.pool."},
      [&](SigmaModel& mod, std::map<std::string, Tensor>* grads) {
        Graph g;
        ParamStore& ps = mod.params();
        const SigmaConfig& cfg = mod.config();
        Var h = g.input(hidden);
        Var z_sem = lang::read_semantic_factors(g, ps, cfg, h);
        Var z_pool = g.mean_rows(z_sem);
        auto mem = lang::update_memory(g, ps, cfg, g.input(m_prev), z_pool);
        auto sums = lang::summarize(g, ps, cfg, h);
        Var z_int = lang::infer_intent(g, ps, cfg, mem.m, sums.c_env, sums.c_beh);
        Var tau = lang::project_telepathy(g, ps, cfg, mem.m, z_int, sums.c_env, sums.c_beh,
                                          z_pool, sums.c_text);
        Var n_high = lang::modulate_language(g, ps, cfg, h, tau);
        Var loss = g.add(g.mean_all(g.mul(n_high, n_high)), g.mean_all(g.mul(tau, tau)));
        if (grads) {
          g.backward(loss);
          *grads = g.param_grads();
        }
        return g.value(loss)[0];
      });
  CHECK(err < 1e-4);
}

// --------------------------------------------------------------------------
// action workspace

TEST_CASE("condition projector: baseline call is the zero-tau path") {
  SigmaModel model = tiny_model();
  Rng rng(30);
  Tensor n_high = normal_tensor(rng, {1, 8}, 1.0);
  Graph g;
  Var a = action::project_condition(g, model.params(), model.config(), g.input(n_high),
                                    g.input(Tensor::zeros({1, 4})));
  Var b = action::project_condition_base(g, model.params(), model.config(), g.input(n_high));
  CHECK(bit_equal(g.value(a), g.value(b)));

  Var zero = action::project_condition(g, model.params(), model.config(),
                                       g.input(Tensor::zeros({1, 8})),
                                       g.input(Tensor::zeros({1, 4})));
  for (std::size_t j = 0; j < 8; ++j) CHECK(g.value(zero)[j] == 0.0);
}

TEST_CASE("query generation: shape, norm statistics, condition sensitivity") {
  SigmaModel model = tiny_model();
  const SigmaConfig& cfg = model.config();
  Rng rng(31);
  Tensor c_act = normal_tensor(rng, {1, 8}, 1.0);
  for (std::size_t ns : {1u, 2u, 4u}) {
    Graph g;
    Var q = action::generate_queries(g, model.params(), cfg, g.input(c_act),
                                     g.input(normal_tensor(rng, {ns, 8}, 1.0)));
    CHECK(g.value(q).rows() == cfg.n_q);
    CHECK(g.value(q).cols() == cfg.d_model);
    for (std::size_t i = 0; i < cfg.n_q; ++i) {
      double mean = 0.0, var = 0.0;
      for (std::size_t j = 0; j < 8; ++j) mean += g.value(q)(i, j);
      mean /= 8.0;
      for (std::size_t j = 0; j < 8; ++j) {
        double d = g.value(q)(i, j) - mean;
        var += d * d;
      }
      var /= 8.0;
      CHECK(std::fabs(mean) < 1e-12);
      CHECK(var == doctest::Approx(1.0).epsilon(1e-2));
    }
  }
  Tensor state = normal_tensor(rng, {2, 8}, 1.0);
  Graph g;
  Var q1 = action::generate_queries(g, model.params(), cfg, g.input(c_act), g.input(state));
  Var q2 = action::generate_queries(g, model.params(), cfg,
                                    g.input(normal_tensor(rng, {1, 8}, 1.0)), g.input(state));
  CHECK_FALSE(bit_equal(g.value(q1), g.value(q2)));
}

TEST_CASE("action heads: shapes and zero-query behavior") {
  SigmaModel model = tiny_model();
  const SigmaConfig& cfg = model.config();
  Graph g;
  Var zero_q = g.input(Tensor::zeros({cfg.n_q, 8}));
  Var v = action::head_vector(g, model.params(), cfg, zero_q);
  Var c = action::head_chunk(g, model.params(), cfg, zero_q);
  CHECK(g.value(v).cols() == cfg.d_a);
  CHECK(g.value(c).rows() == cfg.chunk_c);
  CHECK(g.value(c).cols() == cfg.d_a);
  for (std::size_t j = 0; j < g.value(v).size(); ++j) CHECK(g.value(v)[j] == 0.0);
  for (std::size_t j = 0; j < g.value(c).size(); ++j) CHECK(g.value(c)[j] == 0.0);
}

TEST_CASE("denoiser is deterministic per seed and steps matter") {
  SigmaModel model = tiny_model();
  const SigmaConfig& cfg = model.config();
  Rng rng(33);
  Tensor q = normal_tensor(rng, {cfg.n_q, 8}, 1.0);
  Tensor n_high = normal_tensor(rng, {1, 8}, 1.0);
  Tensor c_act = normal_tensor(rng, {1, 8}, 1.0);
  auto run = [&](std::size_t steps, std::uint64_t seed) {
    Graph g;
    Var t = action::denoise_trajectory(g, model.params(), cfg, g.input(q), g.input(n_high),
                                       g.input(c_act), steps, seed);
    return g.value(t);
  };
  CHECK(bit_equal(run(2, 5), run(2, 5)));
  CHECK_FALSE(bit_equal(run(2, 5), run(2, 6)));
  CHECK_FALSE(bit_equal(run(1, 5), run(2, 5)));
  CHECK(run(2, 5).rows() == cfg.horizon_t);
}

TEST_CASE("denoiser gradients match finite differences") {
  SigmaModel model = tiny_model(34);
  const SigmaConfig& cfg = model.config();
  Rng rng(35);
  Tensor q = normal_tensor(rng, {cfg.n_q, 8}, 1.0);
  Tensor n_high = normal_tensor(rng, {1, 8}, 1.0);
  Tensor c_act = normal_tensor(rng, {1, 8}, 1.0);
  Tensor target = normal_tensor(rng, {cfg.horizon_t, cfg.d_a}, 0.5);
  double err = fd_check(model, {"act.denoise."},
                        [&](SigmaModel& m, std::map<std::string, Tensor>* grads) {
                          Graph g;
                          Var t = action::denoise_trajectory(g, m.params(), cfg, g.input(q),
                                                             g.input(n_high), g.input(c_act),
                                                             cfg.denoise_steps, 77);
                          Var loss = g.mse(t, g.input(target));
                          if (grads) {
                            g.backward(loss);
                            *grads = g.param_grads();
                          }
                          return g.value(loss)[0];
                        });
  CHECK(err < 1e-4);
}

TEST_CASE("residual head splits its output across the three branches") {
  SigmaModel model = tiny_model();
  const SigmaConfig& cfg = model.config();
  {
    Graph g;
    Var zero8 = g.input(Tensor::zeros({1, 8}));
    Var zero4 = g.input(Tensor::zeros({1, 4}));
    auto r = action::residual_head(g, model.params(), cfg, zero8, zero4);
    for (std::size_t j = 0; j < g.value(r.d_vec).size(); ++j) CHECK(g.value(r.d_vec)[j] == 0.0);
    CHECK(g.value(r.d_vec).cols() == cfg.d_a);
    CHECK(g.value(r.d_chunk).rows() == cfg.chunk_c);
    CHECK(g.value(r.d_traj).rows() == cfg.horizon_t);
    CHECK(g.value(r.d_vec).size() + g.value(r.d_chunk).size() + g.value(r.d_traj).size() ==
          model.params().get("heads.residual.b2").size());
  }
}

TEST_CASE("fusion is convex and clamps to the joint box") {
  SigmaConfig cfg = tiny_config();
  Tensor v = Tensor::row({0.5, -0.5});
  Tensor c = Tensor::matrix(2, 2, {0.5, -0.5, 9, 9});
  Tensor t = Tensor::matrix(4, 2, {0.5, -0.5, 9, 9, 9, 9, 9, 9});
  auto cmd = action::fuse_and_drive(v, c, t, cfg);
  CHECK(cmd.u[0] == doctest::Approx(0.5).epsilon(1e-15));
  CHECK(cmd.u[1] == doctest::Approx(-0.5).epsilon(1e-15));

  SigmaConfig only_vec = cfg;
  only_vec.fuse_w_vec = 1.0;
  only_vec.fuse_w_chunk = 0.0;
  only_vec.fuse_w_traj = 0.0;
  Tensor v2 = Tensor::row({1.5, -2.0});
  auto cmd2 = action::fuse_and_drive(v2, c, t, only_vec);
  CHECK(cmd2.u[0] == 1.5);
  CHECK(cmd2.u[1] == -2.0);

  SigmaConfig tight = only_vec;
  tight.joint_limit = 1.0;
  auto cmd3 = action::fuse_and_drive(v2, c, t, tight);
  CHECK(cmd3.m[0] == 1.0);
  CHECK(cmd3.m[1] == -1.0);
  CHECK(cmd3.u[0] == 1.5);  // fused representation stays unclamped

  SigmaConfig bad = cfg;
  bad.fuse_w_vec = 0.9;
  CHECK_THROWS_AS(action::fuse_and_drive(v, c, t, bad), ConfigError);
}

// --------------------------------------------------------------------------
// composed policy

TEST_CASE("telepathy off: final equals base bit-exactly") {
  SigmaModel model = tiny_model(40);
  auto sample = tiny_sample();
  action::ForwardOptions opt;
  opt.telepathy_on = false;
  opt.noise_seed = 3;
  auto res = action::forward_policy(model, sample, Tensor(), opt);
  CHECK(bit_equal(res.bundle.final_vec, res.bundle.base_vec));
  CHECK(bit_equal(res.bundle.final_chunk, res.bundle.base_chunk));
  CHECK(bit_equal(res.bundle.final_traj, res.bundle.base_traj));
  for (std::size_t j = 0; j < res.bundle.d_vec.size(); ++j) CHECK(res.bundle.d_vec[j] == 0.0);
}

TEST_CASE("zero residual weights make telepathy-on match base") {
  SigmaModel model = tiny_model(41);  // residual output layer is zero at init
  auto sample = tiny_sample();
  action::ForwardOptions opt;
  opt.telepathy_on = true;
  opt.noise_seed = 3;
  auto res = action::forward_policy(model, sample, Tensor(), opt);
  CHECK(max_abs_diff(res.bundle.final_vec, res.bundle.base_vec) == 0.0);
  CHECK(max_abs_diff(res.bundle.final_chunk, res.bundle.base_chunk) == 0.0);
  CHECK(max_abs_diff(res.bundle.final_traj, res.bundle.base_traj) == 0.0);
}

TEST_CASE("policy forward is deterministic and baselines ignore the switch") {
  SigmaModel model = tiny_model(42);
  // Give the residual head real output so on/off actually differ.
  Rng rng(43);
  model.params().get("heads.residual.w2") =
      normal_tensor(rng, model.params().get("heads.residual.w2").shape(), 0.2);
  auto sample = tiny_sample();
  action::ForwardOptions on;
  on.telepathy_on = true;
  on.noise_seed = 11;
  action::ForwardOptions off = on;
  off.telepathy_on = false;

  auto r1 = action::forward_policy(model, sample, Tensor(), on);
  auto r2 = action::forward_policy(model, sample, Tensor(), on);
  CHECK(bit_equal(r1.bundle.final_traj, r2.bundle.final_traj));
  CHECK(bit_equal(r1.state.tau, r2.state.tau));

  auto roff = action::forward_policy(model, sample, Tensor(), off);
  CHECK(bit_equal(r1.bundle.base_vec, roff.bundle.base_vec));
  CHECK(bit_equal(r1.bundle.base_chunk, roff.bundle.base_chunk));
  CHECK(bit_equal(r1.bundle.base_traj, roff.bundle.base_traj));
  // Pass-1 state is shared verbatim between the two modes.
  CHECK(bit_equal(r1.state.tau, roff.state.tau));
  CHECK(bit_equal(r1.state.z_pool, roff.state.z_pool));
  CHECK_FALSE(bit_equal(r1.bundle.final_vec, roff.bundle.final_vec));
}

TEST_CASE("residual composition holds elementwise") {
  SigmaModel model = tiny_model(44);
  Rng rng(45);
  model.params().get("heads.residual.w2") =
      normal_tensor(rng, model.params().get("heads.residual.w2").shape(), 0.2);
  auto sample = tiny_sample();
  action::ForwardOptions opt;
  opt.telepathy_on = true;
  opt.noise_seed = 5;
  auto res = action::forward_policy(model, sample, Tensor(), opt);
  auto check_branch = [](const Tensor& base, const Tensor& d, const Tensor& fin) {
    REQUIRE(base.size() == d.size());
    for (std::size_t i = 0; i < base.size(); ++i) {
      CHECK(fin[i] == base[i] + d[i]);  // the displayed composition, bit for bit
    }
  };
  check_branch(res.bundle.base_vec, res.bundle.d_vec, res.bundle.final_vec);
  check_branch(res.bundle.base_chunk, res.bundle.d_chunk, res.bundle.final_chunk);
  check_branch(res.bundle.base_traj, res.bundle.d_traj, res.bundle.final_traj);
}

TEST_CASE("off-mode actions are independent of telepathy-head parameters") {
  SigmaModel model = tiny_model(46);
  auto sample = tiny_sample();
  action::ForwardOptions off;
  off.telepathy_on = false;
  off.noise_seed = 9;
  auto before = action::forward_policy(model, sample, Tensor(), off);
  Rng rng(47);
  for (const auto& name : model.telepathy_head_names()) {
    Tensor& p = model.params().get(name);
    for (double& v : p.data()) v += rng.normal(0.0, 0.5);
  }
  auto after = action::forward_policy(model, sample, Tensor(), off);
  CHECK(bit_equal(before.bundle.base_vec, after.bundle.base_vec));
  CHECK(bit_equal(before.bundle.base_chunk, after.bundle.base_chunk));
  CHECK(bit_equal(before.bundle.base_traj, after.bundle.base_traj));
  CHECK(bit_equal(before.bundle.final_vec, after.bundle.final_vec));
  CHECK(bit_equal(before.bundle.final_chunk, after.bundle.final_chunk));
  CHECK(bit_equal(before.bundle.final_traj, after.bundle.final_traj));
  // The telepathy state itself does change.
  CHECK_FALSE(bit_equal(before.state.tau, after.state.tau));
}

TEST_CASE("z_pool is exactly the row mean of z_sem") {
  SigmaModel model = tiny_model(48);
  auto sample = tiny_sample();
  action::ForwardOptions opt;
  opt.telepathy_on = true;
  auto res = action::forward_policy(model, sample, Tensor(), opt);
  const Tensor& z = res.state.z_sem;
  for (std::size_t j = 0; j < z.cols(); ++j) {
    double sum = 0.0;
    for (std::size_t i = 0; i < z.rows(); ++i) sum += z(i, j);
    CHECK(res.state.z_pool[j] == sum / double(z.rows()));
  }
}
