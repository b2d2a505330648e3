#include <doctest.h>

#include <cmath>
#include <vector>

#include "extradiff/denoiser.hpp"
#include "extradiff/error.hpp"
#include "test_util.hpp"

using namespace extradiff;

namespace {

DenoiserConfig tiny() {
  DenoiserConfig c;
  c.n_tokens = 4;
  c.d_latent = 2;
  c.d_model = 8;
  c.n_layers = 4;
  c.layers_per_rat = 4;
  c.d_text = 3;
  c.d_time = 4;
  c.d_hidden = 6;
  c.seed = 5;
  return c;
}

void randomize(DenoiserParams& p, std::uint64_t seed, double scale) {
  Rng rng(seed);
  p.values = scale * standard_normal(rng, p.size());
}

void zero_tensor(DenoiserParams& p, const std::string& suffix) {
  for (const auto& [name, slot] : p.layout.named)
    if (name.ends_with(suffix)) p[slot].setZero();
}

Latent projection_only(const DenoiserParams& p, const Latent& x) {
  Latent c = x * p[p.layout.in_w].transpose();
  c.rowwise() += p[p.layout.in_b].col(0).transpose();
  c += p[p.layout.in_pos].transpose();
  Latent out = c * p[p.layout.out_w].transpose();
  out.rowwise() += p[p.layout.out_b].col(0).transpose();
  return out;
}

using V = std::vector<double>;
using M = std::vector<V>;

double sig(double v) { return 1.0 / (1.0 + std::exp(-v)); }
double swish(double v) { return v * sig(v); }

/// y = W x, read element by element from the column-major parameter buffer.
V linear(const DenoiserParams& p, const TensorSlot& w, const V& x) {
  V y(static_cast<std::size_t>(w.rows), 0.0);
  for (Eigen::Index i = 0; i < w.rows; ++i)
    for (Eigen::Index j = 0; j < w.cols; ++j)
      y[static_cast<std::size_t>(i)] += p.values[w.offset + j * w.rows + i] * x[static_cast<std::size_t>(j)];
  return y;
}

V affine(const DenoiserParams& p, const TensorSlot& w, const TensorSlot& b, const V& x) {
  V y = linear(p, w, x);
  for (Eigen::Index i = 0; i < w.rows; ++i) y[static_cast<std::size_t>(i)] += p.values[b.offset + i];
  return y;
}

V mlp(const DenoiserParams& p, const TensorSlot& w1, const TensorSlot& b1, const TensorSlot& w2, const TensorSlot& b2,
      const V& x) {
  V h = affine(p, w1, b1, x);
  for (double& v : h) v = swish(v);
  return affine(p, w2, b2, h);
}

/// Scalar-loop transcription of the block equations for a single RAT block
/// holding a single transformer block:
///   h1 = GRU(h0, cond); c += shift(h1)
///   c += a_a * Attn((1 + g_a) c + b_a);  c += a_f * FF((1 + g_f) c + b_f)
Latent single_block_oracle(const DenoiserParams& p, const Latent& x, int t, const Eigen::VectorXd& cond) {
  const auto& L = p.layout;
  const std::size_t n = static_cast<std::size_t>(x.rows());
  const std::size_t d = static_cast<std::size_t>(p.config.d_model);
  const V cv(cond.data(), cond.data() + cond.size());
  M c(n);
  for (std::size_t i = 0; i < n; ++i) {
    V xi(static_cast<std::size_t>(x.cols()));
    for (Eigen::Index j = 0; j < x.cols(); ++j) xi[static_cast<std::size_t>(j)] = x(static_cast<Eigen::Index>(i), j);
    c[i] = affine(p, L.in_w, L.in_b, xi);
    for (std::size_t k = 0; k < d; ++k) c[i][k] += p.values[L.in_pos.offset + static_cast<Eigen::Index>(i * d + k)];
  }
  V h = affine(p, L.h0_w, L.h0_b, cv);
  for (double& v : h) v = std::tanh(v);
  if (p.config.recurrent) {
    auto sum3 = [&](const TensorSlot& w, const TensorSlot& u, const TensorSlot& b, const V& hh) {
      V a = affine(p, w, b, cv);
      const V uh = linear(p, u, hh);
      for (std::size_t i = 0; i < d; ++i) a[i] += uh[i];
      return a;
    };
    V z = sum3(L.gru_wz, L.gru_uz, L.gru_bz, h);
    V r = sum3(L.gru_wr, L.gru_ur, L.gru_br, h);
    V hn = affine(p, L.gru_un, L.gru_bun, h);
    V nn = affine(p, L.gru_wn, L.gru_bn, cv);
    V next(d);
    for (std::size_t i = 0; i < d; ++i) {
      z[i] = sig(z[i]);
      r[i] = sig(r[i]);
      nn[i] = std::tanh(nn[i] + r[i] * hn[i]);
      next[i] = (1 - z[i]) * nn[i] + z[i] * h[i];
    }
    h = next;
  }
  const auto& rs = L.rat[0];
  const V shift = mlp(p, rs.w1, rs.b1, rs.w2, rs.b2, h);
  for (auto& row : c)
    for (std::size_t k = 0; k < d; ++k) row[k] += shift[k];

  const auto& s = L.blocks[0];
  const Eigen::VectorXd e = time_embedding(t, p.config.d_time);
  const V ev(e.data(), e.data() + e.size());
  const V mod = mlp(p, s.mod_w1, s.mod_b1, s.mod_w2, s.mod_b2, ev);
  const V gate = mlp(p, s.gate_w1, s.gate_b1, s.gate_w2, s.gate_b2, ev);

  M u(n, V(d));
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t k = 0; k < d; ++k) u[i][k] = (1 + mod[k]) * c[i][k] + mod[d + k];
  M q(n), kk(n), v(n);
  for (std::size_t i = 0; i < n; ++i) {
    q[i] = linear(p, s.wq, u[i]);
    kk[i] = linear(p, s.wk, u[i]);
    v[i] = linear(p, s.wv, u[i]);
  }
  for (std::size_t i = 0; i < n; ++i) {
    V score(n);
    double mx = -1e300;
    for (std::size_t j = 0; j < n; ++j) {
      double dot = 0;
      for (std::size_t k = 0; k < d; ++k) dot += q[i][k] * kk[j][k];
      score[j] = dot / std::sqrt(static_cast<double>(d));
      mx = std::max(mx, score[j]);
    }
    double total = 0;
    for (double& sc : score) total += (sc = std::exp(sc - mx));
    V mixed(d, 0.0);
    for (std::size_t j = 0; j < n; ++j)
      for (std::size_t k = 0; k < d; ++k) mixed[k] += score[j] / total * v[j][k];
    const V o = affine(p, s.wo, s.bo, mixed);
    for (std::size_t k = 0; k < d; ++k) c[i][k] += gate[k] * o[k];
  }
  for (std::size_t i = 0; i < n; ++i) {
    V uf(d);
    for (std::size_t k = 0; k < d; ++k) uf[k] = (1 + mod[2 * d + k]) * c[i][k] + mod[3 * d + k];
    V hid = affine(p, s.ff_w1, s.ff_b1, uf);
    for (double& x1 : hid) x1 = swish(x1);
    const V o = affine(p, s.ff_w2, s.ff_b2, hid);
    for (std::size_t k = 0; k < d; ++k) c[i][k] += gate[d + k] * o[k];
  }
  Latent out(x.rows(), x.cols());
  for (std::size_t i = 0; i < n; ++i) {
    const V y = affine(p, L.out_w, L.out_b, c[i]);
    for (Eigen::Index j = 0; j < x.cols(); ++j) out(static_cast<Eigen::Index>(i), j) = y[static_cast<std::size_t>(j)];
  }
  return out;
}

double loss_at(const DenoiserParams& p, const std::vector<TrainingPair>& batch, const std::vector<NoiseDraw>& draws,
               const NoiseSchedule& s) {
  return ddpm_loss(batch, draws, as_epsilon_model(p), s);
}

}  // namespace

TEST_CASE("init_denoiser: seeded, sized by the closed-form count, finite") {
  const auto cfg = tiny();
  const auto a = init_denoiser(cfg), b = init_denoiser(cfg);
  CHECK(a.values == b.values);
  CHECK(a.content_hash() == b.content_hash());
  auto other = cfg;
  other.seed = 6;
  CHECK(init_denoiser(other).values != a.values);
  CHECK(a.all_finite());

  // Hand count for the tiny config (d_model 8, d_hidden 6, d_time 4, d_text 3, d_latent 2):
  // projections 16+8+32+16+2+24+8 = 106 (token offsets 8x4); recurrent cell 3*(24+64+8)+8 = 296; one RAT MLP 48+6+48+8 = 110;
  // per block: modulation 24+6+192+32 = 254, gate 24+6+96+16 = 142, attention 4*64+8 = 264, ff 110.
  CHECK(a.size() == 106 + 296 + 110 + 4 * (254 + 142 + 264 + 110));
  CHECK(parameter_count(cfg) == a.size());
  for (const auto& c : {DenoiserConfig{}, [] { DenoiserConfig d; d.recurrent = false; d.n_layers = 6; d.layers_per_rat = 2; return d; }()})
    CHECK(parameter_count(c) == DenoiserLayout(c).size);

  for (const auto& [name, slot] : a.layout.named) {
    if (name.ends_with("gate.w2") || (name.starts_with("rat") && name.ends_with(".w2")))
      CHECK(a[slot].isZero(0.0));
  }
}

TEST_CASE("config validation") {
  auto c = tiny();
  c.layers_per_rat = 3;
  CHECK_THROWS_AS(init_denoiser(c), ConfigError);
  c = tiny();
  c.d_model = 0;
  CHECK_THROWS_AS(parameter_count(c), ConfigError);
}

TEST_CASE("fresh network is the projection composition, independent of the condition") {
  const auto p = init_denoiser(tiny());
  Rng rng(1);
  const Latent x = standard_normal(rng, 4, 2);
  const Latent expect = projection_only(p, x);
  for (int t : {1, 17, 50}) {
    const Eigen::VectorXd cond = standard_normal(rng, 3);
    CHECK((denoise(p, x, t, cond) - expect).norm() < 1e-12);
  }
}

TEST_CASE("forcing every conditioning output to zero restores the projection identity") {
  auto p = init_denoiser(tiny());
  randomize(p, 99, 0.5);
  for (const char* s : {"mod.w2", "mod.b2", "gate.w2", "gate.b2", ".w2", "b2"}) {
    for (const auto& [name, slot] : p.layout.named)
      if (name.ends_with(s) && (name.starts_with("rat") || name.find("mod.") != std::string::npos ||
                                name.find("gate.") != std::string::npos))
        p[slot].setZero();
  }
  Rng rng(3);
  const Latent x = standard_normal(rng, 4, 2);
  const Latent expect = projection_only(p, x);
  CHECK((denoise(p, x, 7, standard_normal(rng, 3)) - expect).norm() < 1e-12);
  CHECK((denoise(p, x, 33, standard_normal(rng, 3)) - expect).norm() < 1e-12);
}

TEST_CASE("single block with d_model=2 matches the scalar-loop oracle") {
  for (bool recurrent : {true, false}) {
    DenoiserConfig c;
    c.n_tokens = 3;
    c.d_latent = 2;
    c.d_model = 2;
    c.n_layers = 1;
    c.layers_per_rat = 1;
    c.d_text = 2;
    c.d_time = 4;
    c.d_hidden = 3;
    c.recurrent = recurrent;
    DenoiserParams p(c);
    randomize(p, 1234, 0.7);
    Rng rng(8);
    for (int trial = 0; trial < 5; ++trial) {
      const Latent x = standard_normal(rng, 3, 2);
      const Eigen::VectorXd cond = standard_normal(rng, 2);
      const int t = 1 + trial * 11;
      CHECK((denoise(p, x, t, cond) - single_block_oracle(p, x, t, cond)).cwiseAbs().maxCoeff() < 1e-12);
    }
  }
}

TEST_CASE("denoise: shapes, determinism and errors") {
  auto c = tiny();
  c.n_tokens = 5;
  c.d_latent = 3;
  const auto p = init_denoiser(c);
  Rng rng(2);
  const Latent x = standard_normal(rng, 5, 3);
  const Eigen::VectorXd cond = standard_normal(rng, 3);
  const Latent y = denoise(p, x, 4, cond);
  CHECK(y.rows() == 5);
  CHECK(y.cols() == 3);
  CHECK(denoise(p, x, 4, cond) == y);
  CHECK_THROWS_AS(denoise(p, Latent::Zero(4, 3), 4, cond), InputError);
  CHECK_THROWS_AS(denoise(p, x, 4, Eigen::VectorXd::Zero(2)), InputError);
}

TEST_CASE("time_embedding: formula oracle, bounds and injectivity") {
  const Eigen::VectorXd e = time_embedding(7, 4);
  CHECK(e[0] == doctest::Approx(std::sin(7.0)).epsilon(1e-15));
  CHECK(e[1] == doctest::Approx(std::cos(7.0)).epsilon(1e-15));
  CHECK(e[2] == doctest::Approx(std::sin(7.0 / 100.0)).epsilon(1e-15));
  CHECK(e[3] == doctest::Approx(std::cos(7.0 / 100.0)).epsilon(1e-15));
  std::vector<Eigen::VectorXd> seen;
  for (int t = 1; t <= 1000; ++t) {
    const Eigen::VectorXd v = time_embedding(t, 2);
    CHECK(v.cwiseAbs().maxCoeff() <= 1.0);
    seen.push_back(v);
  }
  for (std::size_t i = 0; i < seen.size(); ++i)
    for (std::size_t j = i + 1; j < seen.size(); j += 37) CHECK((seen[i] - seen[j]).norm() > 0.0);
  CHECK_THROWS_AS(time_embedding(0, 4), ConfigError);
}

TEST_CASE("denoiser_grad matches central finite differences on every parameter") {
  for (bool recurrent : {true, false}) {
    auto cfg = tiny();
    cfg.recurrent = recurrent;
    auto p = init_denoiser(cfg);
    randomize(p, 42, 0.4);
    const auto sched = build_schedule(50, 0.002, 0.4);
    Rng rng(7);
    std::vector<TrainingPair> batch;
    for (int i = 0; i < 2; ++i) batch.push_back({standard_normal(rng, 4, 2), standard_normal(rng, 3)});
    const auto draws = draw_noise(batch, sched, rng);
    const auto lg = denoiser_grad(p, batch, draws, sched);
    CHECK(lg.loss == doctest::Approx(loss_at(p, batch, draws, sched)).epsilon(1e-13));

    const double h = 1e-5;
    double worst = 0;
    std::string worst_name;
    for (const auto& [name, slot] : p.layout.named) {
      for (Eigen::Index i = 0; i < slot.size(); ++i) {
        const Eigen::Index k = slot.offset + i;
        const double keep = p.values[k];
        p.values[k] = keep + h;
        const double up = loss_at(p, batch, draws, sched);
        p.values[k] = keep - h;
        const double down = loss_at(p, batch, draws, sched);
        p.values[k] = keep;
        const double fd = (up - down) / (2 * h);
        const double an = lg.grad.values[k];
        const double rel = std::abs(an - fd) / std::max({std::abs(an), std::abs(fd), 1e-6});
        if (rel > worst) {
          worst = rel;
          worst_name = name;
        }
      }
    }
    INFO("worst tensor: ", worst_name);
    CHECK(worst < 1e-4);
  }
}

TEST_CASE("gradient reachability at the zero-gate init") {
  const auto p = init_denoiser(tiny());
  const auto sched = build_schedule(50, 0.002, 0.4);
  Rng rng(11);
  std::vector<TrainingPair> batch;
  for (int i = 0; i < 3; ++i) batch.push_back({standard_normal(rng, 4, 2), standard_normal(rng, 3)});
  const auto g = denoiser_grad(p, batch, sched, rng).grad;
  // With every gate at zero the sublayers are cut off from the loss, but the
  // gates themselves see their sublayer outputs, and the RAT shift lands on the
  // residual stream directly.
  for (const auto& [name, slot] : p.layout.named) {
    const bool live = name.starts_with("in.") || name.starts_with("out.") || name.ends_with("gate.w2") ||
                      name.ends_with("gate.b2") || (name.starts_with("rat") && (name.ends_with(".w2") || name.ends_with(".b2")));
    INFO(name);
    if (live)
      CHECK(g[slot].norm() > 0.0);
    else
      CHECK(g[slot].norm() == 0.0);
  }
}

TEST_CASE("denoiser_grad: loss scaling and thread-count invariance") {
  auto p = init_denoiser(tiny());
  randomize(p, 3, 0.3);
  const auto sched = build_schedule(50, 0.002, 0.4);
  Rng rng(13);
  std::vector<TrainingPair> batch;
  for (int i = 0; i < 6; ++i) batch.push_back({standard_normal(rng, 4, 2), standard_normal(rng, 3)});
  const auto draws = draw_noise(batch, sched, rng);
  const auto base = denoiser_grad(p, batch, draws, sched);
  const auto doubled = denoiser_grad(p, batch, draws, sched, {.threads = 1, .loss_scale = 2.0});
  CHECK(doubled.grad.values == 2.0 * base.grad.values);
  const auto threaded = denoiser_grad(p, batch, draws, sched, {.threads = 4});
  CHECK(threaded.grad.values == base.grad.values);
  CHECK(threaded.loss == base.loss);
  CHECK_THROWS_AS(denoiser_grad(p, {}, {}, sched), InputError);
}
