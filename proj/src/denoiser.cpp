#include "extradiff/denoiser.hpp"

#include <cmath>
#include <cstring>

#include "extradiff/error.hpp"
#include "extradiff/hash.hpp"
#include "extradiff/parallel.hpp"

namespace extradiff {

using Mat = Eigen::MatrixXd;
using Vec = Eigen::VectorXd;

void DenoiserConfig::validate() const {
  if (n_tokens < 1 || d_latent < 1 || d_model < 1 || n_layers < 1 || layers_per_rat < 1 || d_text < 1 ||
      d_time < 1 || d_hidden < 1)
    throw ConfigError("denoiser: every width and count must be >= 1");
  if (n_layers % layers_per_rat != 0)
    throw ConfigError("denoiser: n_layers must be divisible by layers_per_rat");
}

DenoiserLayout::DenoiserLayout(const DenoiserConfig& c) {
  c.validate();
  const Eigen::Index dm = c.d_model, dh = c.d_hidden, dt = c.d_time;
  auto add = [&](const std::string& name, Eigen::Index rows, Eigen::Index cols) {
    TensorSlot s{size, rows, cols};
    size += rows * cols;
    named.emplace_back(name, s);
    return s;
  };
  in_w = add("in.w", dm, c.d_latent);
  in_b = add("in.b", dm, 1);
  in_pos = add("in.pos", dm, c.n_tokens);
  out_w = add("out.w", c.d_latent, dm);
  out_b = add("out.b", c.d_latent, 1);
  h0_w = add("h0.w", dm, c.d_text);
  h0_b = add("h0.b", dm, 1);
  if (c.recurrent) {
    gru_wz = add("gru.wz", dm, c.d_text);
    gru_uz = add("gru.uz", dm, dm);
    gru_bz = add("gru.bz", dm, 1);
    gru_wr = add("gru.wr", dm, c.d_text);
    gru_ur = add("gru.ur", dm, dm);
    gru_br = add("gru.br", dm, 1);
    gru_wn = add("gru.wn", dm, c.d_text);
    gru_un = add("gru.un", dm, dm);
    gru_bn = add("gru.bn", dm, 1);
    gru_bun = add("gru.bun", dm, 1);
  }
  for (int r = 0; r < c.n_rat_blocks(); ++r) {
    const std::string p = "rat" + std::to_string(r) + ".";
    RatBlockSlots s;
    s.w1 = add(p + "w1", dh, dm);
    s.b1 = add(p + "b1", dh, 1);
    s.w2 = add(p + "w2", dm, dh);
    s.b2 = add(p + "b2", dm, 1);
    rat.push_back(s);
  }
  for (int l = 0; l < c.n_layers; ++l) {
    const std::string p = "block" + std::to_string(l) + ".";
    TransformerBlockSlots s;
    s.mod_w1 = add(p + "mod.w1", dh, dt);
    s.mod_b1 = add(p + "mod.b1", dh, 1);
    s.mod_w2 = add(p + "mod.w2", 4 * dm, dh);
    s.mod_b2 = add(p + "mod.b2", 4 * dm, 1);
    s.gate_w1 = add(p + "gate.w1", dh, dt);
    s.gate_b1 = add(p + "gate.b1", dh, 1);
    s.gate_w2 = add(p + "gate.w2", 2 * dm, dh);
    s.gate_b2 = add(p + "gate.b2", 2 * dm, 1);
    s.wq = add(p + "attn.wq", dm, dm);
    s.wk = add(p + "attn.wk", dm, dm);
    s.wv = add(p + "attn.wv", dm, dm);
    s.wo = add(p + "attn.wo", dm, dm);
    s.bo = add(p + "attn.bo", dm, 1);
    s.ff_w1 = add(p + "ff.w1", dh, dm);
    s.ff_b1 = add(p + "ff.b1", dh, 1);
    s.ff_w2 = add(p + "ff.w2", dm, dh);
    s.ff_b2 = add(p + "ff.b2", dm, 1);
    blocks.push_back(s);
  }
}

Eigen::Index parameter_count(const DenoiserConfig& c) {
  c.validate();
  const Eigen::Index dm = c.d_model, dh = c.d_hidden, dt = c.d_time, dx = c.d_text, dl = c.d_latent;
  const Eigen::Index projections = dm * dl + dm + dm * c.n_tokens + dl * dm + dl + dm * dx + dm;
  const Eigen::Index gru = c.recurrent ? 3 * (dm * dx + dm * dm + dm) + dm : 0;
  const Eigen::Index rat = dh * dm + dh + dm * dh + dm;
  const Eigen::Index mlp_mod = dh * dt + dh + 4 * dm * dh + 4 * dm;
  const Eigen::Index mlp_gate = dh * dt + dh + 2 * dm * dh + 2 * dm;
  const Eigen::Index attention = 4 * dm * dm + dm;
  const Eigen::Index feed_forward = dh * dm + dh + dm * dh + dm;
  return projections + gru + c.n_rat_blocks() * rat + c.n_layers * (mlp_mod + mlp_gate + attention + feed_forward);
}

DenoiserParams::DenoiserParams(const DenoiserConfig& cfg)
    : config(cfg), layout(cfg), values(Vec::Zero(layout.size)) {}

std::string DenoiserParams::content_hash() const {
  static_assert(sizeof(double) == 8);
  std::vector<unsigned char> bytes(static_cast<std::size_t>(values.size()) * 8);
  for (Eigen::Index i = 0; i < values.size(); ++i) {
    std::uint64_t bits;
    std::memcpy(&bits, &values[i], 8);
    for (int b = 0; b < 8; ++b) bytes[static_cast<std::size_t>(i) * 8 + b] = static_cast<unsigned char>(bits >> (8 * b));
  }
  return sha256_hex(bytes);
}

DenoiserParams init_denoiser(const DenoiserConfig& config) {
  DenoiserParams p(config);
  Rng rng(config.seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  for (const auto& [name, slot] : p.layout.named) {
    const bool bias = name[name.rfind('.') + 1] == 'b';
    const bool zero_output = name == "in.pos" || name.find("gate.w2") != std::string::npos ||
                             (name.rfind("rat", 0) == 0 && name.ends_with(".w2"));
    if (bias || zero_output) continue;
    const double scale = 1.0 / std::sqrt(static_cast<double>(slot.cols));
    auto m = p[slot];
    for (Eigen::Index j = 0; j < slot.cols; ++j)
      for (Eigen::Index i = 0; i < slot.rows; ++i) m(i, j) = scale * normal(rng);
  }
  return p;
}

Eigen::VectorXd time_embedding(int t, int d_time) {
  if (t < 1) throw ConfigError("time_embedding: timestep must be >= 1");
  if (d_time < 1) throw ConfigError("time_embedding: width must be >= 1");
  Vec e(d_time);
  for (int j = 0; j < d_time; ++j) {
    const int pair = j / 2;
    const double freq = std::pow(10000.0, -2.0 * pair / static_cast<double>(d_time));
    e[j] = (j % 2 == 0) ? std::sin(t * freq) : std::cos(t * freq);
  }
  return e;
}

namespace {

double silu(double x) { return x / (1.0 + std::exp(-x)); }
double silu_grad(double x) {
  const double s = 1.0 / (1.0 + std::exp(-x));
  return s * (1.0 + x * (1.0 - s));
}
double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

template <class Derived>
Mat silu(const Eigen::MatrixBase<Derived>& m) {
  return m.unaryExpr([](double v) { return silu(v); });
}

Vec column_sums(const Mat& m) { return m.colwise().sum().transpose(); }

/// (1 + gamma) * c + beta applied to every token row.
Mat modulate(const Mat& c, const Vec& gamma, const Vec& beta) {
  Mat u = c;
  for (Eigen::Index j = 0; j < c.cols(); ++j) u.col(j) = c.col(j) * (1.0 + gamma[j]) + Vec::Constant(c.rows(), beta[j]);
  return u;
}

Mat scale_columns(const Mat& m, const Vec& s) { return m * s.asDiagonal(); }

struct MlpCache {
  Vec pre, hidden;
};

Vec mlp_forward(const DenoiserParams& p, const TensorSlot& w1, const TensorSlot& b1, const TensorSlot& w2,
                const TensorSlot& b2, const Vec& in, MlpCache& cache) {
  cache.pre = p[w1] * in + p[b1];
  cache.hidden = silu(cache.pre);
  return p[w2] * cache.hidden + p[b2];
}

/// Accumulates weight gradients and returns d(input).
Vec mlp_backward(const DenoiserParams& p, DenoiserGradient& g, const TensorSlot& w1, const TensorSlot& b1,
                 const TensorSlot& w2, const TensorSlot& b2, const Vec& in, const MlpCache& cache,
                 const Vec& d_out) {
  g[w2] += d_out * cache.hidden.transpose();
  g[b2] += d_out;
  const Vec d_hidden = p[w2].transpose() * d_out;
  const Vec d_pre = d_hidden.cwiseProduct(cache.pre.unaryExpr([](double v) { return silu_grad(v); }));
  g[w1] += d_pre * in.transpose();
  g[b1] += d_pre;
  return p[w1].transpose() * d_pre;
}

struct RatCache {
  Vec h_prev, z, r, hn, n, h;
  MlpCache shift;
};

struct BlockCache {
  MlpCache mod, gate;
  Vec gamma_a, beta_a, gamma_f, beta_f, alpha_a, alpha_f;
  Mat c_in, u_a, Q, K, V, P, Z, O_a, c_mid, u_f, ff_pre, ff_h, O_f;
};

struct ForwardCache {
  Mat x, c_final;
  Vec e, cond, h0;
  std::vector<RatCache> rat;
  std::vector<BlockCache> blocks;
};

Mat forward(const DenoiserParams& p, const Latent& x, int t, const Vec& cond, ForwardCache* cache) {
  const auto& cfg = p.config;
  const auto& L = p.layout;
  if (x.rows() != cfg.n_tokens || x.cols() != cfg.d_latent)
    throw InputError("denoise: latent is " + std::to_string(x.rows()) + "x" + std::to_string(x.cols()) +
                     ", expected " + std::to_string(cfg.n_tokens) + "x" + std::to_string(cfg.d_latent));
  if (cond.size() != cfg.d_text)
    throw InputError("denoise: condition has length " + std::to_string(cond.size()) + ", expected " +
                     std::to_string(cfg.d_text));
  const Eigen::Index dm = cfg.d_model;
  const double attn_scale = 1.0 / std::sqrt(static_cast<double>(dm));
  const Vec e = time_embedding(t, cfg.d_time);

  Mat c = x * p[L.in_w].transpose();
  c.rowwise() += p[L.in_b].col(0).transpose();
  // Per-token offsets; without them every block is permutation-equivariant
  // over tokens.
  c += p[L.in_pos].transpose();

  const Vec h0 = (p[L.h0_w] * cond + p[L.h0_b]).array().tanh().matrix();
  Vec h = h0;
  if (cache) {
    cache->x = x;
    cache->e = e;
    cache->cond = cond;
    cache->h0 = h0;
    cache->rat.assign(static_cast<std::size_t>(cfg.n_rat_blocks()), {});
    cache->blocks.assign(static_cast<std::size_t>(cfg.n_layers), {});
  }
  RatCache rat_scratch;
  BlockCache block_scratch;

  for (int l = 0; l < cfg.n_layers; ++l) {
    if (l % cfg.layers_per_rat == 0) {
      const int r = l / cfg.layers_per_rat;
      RatCache& rc = cache ? cache->rat[static_cast<std::size_t>(r)] : rat_scratch;
      rc.h_prev = h;
      if (cfg.recurrent) {
        rc.z = (p[L.gru_wz] * cond + p[L.gru_uz] * h + p[L.gru_bz]).unaryExpr([](double v) { return sigmoid(v); });
        rc.r = (p[L.gru_wr] * cond + p[L.gru_ur] * h + p[L.gru_br]).unaryExpr([](double v) { return sigmoid(v); });
        rc.hn = p[L.gru_un] * h + p[L.gru_bun];
        rc.n = (p[L.gru_wn] * cond + p[L.gru_bn] + rc.r.cwiseProduct(rc.hn)).array().tanh().matrix();
        h = (Vec::Ones(dm) - rc.z).cwiseProduct(rc.n) + rc.z.cwiseProduct(h);
      }
      rc.h = h;
      const auto& s = L.rat[static_cast<std::size_t>(r)];
      // Channel-wise shift only; h never scales c.
      const Vec shift = mlp_forward(p, s.w1, s.b1, s.w2, s.b2, h, rc.shift);
      c.rowwise() += shift.transpose();
    }

    const auto& s = L.blocks[static_cast<std::size_t>(l)];
    BlockCache& bc = cache ? cache->blocks[static_cast<std::size_t>(l)] : block_scratch;
    const Vec mod = mlp_forward(p, s.mod_w1, s.mod_b1, s.mod_w2, s.mod_b2, e, bc.mod);
    const Vec gate = mlp_forward(p, s.gate_w1, s.gate_b1, s.gate_w2, s.gate_b2, e, bc.gate);
    bc.gamma_a = mod.segment(0, dm);
    bc.beta_a = mod.segment(dm, dm);
    bc.gamma_f = mod.segment(2 * dm, dm);
    bc.beta_f = mod.segment(3 * dm, dm);
    bc.alpha_a = gate.segment(0, dm);
    bc.alpha_f = gate.segment(dm, dm);

    // Gated residual token mixing.
    bc.c_in = c;
    bc.u_a = modulate(c, bc.gamma_a, bc.beta_a);
    bc.Q = bc.u_a * p[s.wq].transpose();
    bc.K = bc.u_a * p[s.wk].transpose();
    bc.V = bc.u_a * p[s.wv].transpose();
    Mat scores = (bc.Q * bc.K.transpose()) * attn_scale;
    bc.P.resize(scores.rows(), scores.cols());
    for (Eigen::Index i = 0; i < scores.rows(); ++i) {
      const double m = scores.row(i).maxCoeff();
      Eigen::RowVectorXd ex = (scores.row(i).array() - m).exp().matrix();
      bc.P.row(i) = ex / ex.sum();
    }
    bc.Z = bc.P * bc.V;
    bc.O_a = bc.Z * p[s.wo].transpose();
    bc.O_a.rowwise() += p[s.bo].col(0).transpose();
    c += scale_columns(bc.O_a, bc.alpha_a);

    // Gated residual feed-forward.
    bc.c_mid = c;
    bc.u_f = modulate(c, bc.gamma_f, bc.beta_f);
    bc.ff_pre = bc.u_f * p[s.ff_w1].transpose();
    bc.ff_pre.rowwise() += p[s.ff_b1].col(0).transpose();
    bc.ff_h = silu(bc.ff_pre);
    bc.O_f = bc.ff_h * p[s.ff_w2].transpose();
    bc.O_f.rowwise() += p[s.ff_b2].col(0).transpose();
    c += scale_columns(bc.O_f, bc.alpha_f);
  }

  if (cache) cache->c_final = c;
  Mat out = c * p[L.out_w].transpose();
  out.rowwise() += p[L.out_b].col(0).transpose();
  return out;
}

void backward(const DenoiserParams& p, const ForwardCache& cache, const Mat& d_out, DenoiserGradient& g) {
  const auto& cfg = p.config;
  const auto& L = p.layout;
  const Eigen::Index dm = cfg.d_model;
  const double attn_scale = 1.0 / std::sqrt(static_cast<double>(dm));

  g[L.out_w] += d_out.transpose() * cache.c_final;
  g[L.out_b] += column_sums(d_out);
  Mat dc = d_out * p[L.out_w];
  Vec dh = Vec::Zero(dm);

  for (int l = cfg.n_layers - 1; l >= 0; --l) {
    const auto& s = L.blocks[static_cast<std::size_t>(l)];
    const BlockCache& bc = cache.blocks[static_cast<std::size_t>(l)];

    // Feed-forward sublayer.
    const Mat dO_f = scale_columns(dc, bc.alpha_f);
    const Vec d_alpha_f = column_sums(dc.cwiseProduct(bc.O_f));
    g[s.ff_w2] += dO_f.transpose() * bc.ff_h;
    g[s.ff_b2] += column_sums(dO_f);
    const Mat d_ff_pre =
        (dO_f * p[s.ff_w2]).cwiseProduct(bc.ff_pre.unaryExpr([](double v) { return silu_grad(v); }));
    g[s.ff_w1] += d_ff_pre.transpose() * bc.u_f;
    g[s.ff_b1] += column_sums(d_ff_pre);
    const Mat du_f = d_ff_pre * p[s.ff_w1];
    const Vec d_gamma_f = column_sums(du_f.cwiseProduct(bc.c_mid));
    const Vec d_beta_f = column_sums(du_f);
    dc += scale_columns(du_f, (Vec::Ones(dm) + bc.gamma_f).eval());

    // Attention sublayer.
    const Mat dO_a = scale_columns(dc, bc.alpha_a);
    const Vec d_alpha_a = column_sums(dc.cwiseProduct(bc.O_a));
    g[s.wo] += dO_a.transpose() * bc.Z;
    g[s.bo] += column_sums(dO_a);
    const Mat dZ = dO_a * p[s.wo];
    const Mat dP = dZ * bc.V.transpose();
    const Mat dV = bc.P.transpose() * dZ;
    const Vec row_dot = dP.cwiseProduct(bc.P).rowwise().sum();
    const Mat dS = bc.P.cwiseProduct(dP.colwise() - row_dot);
    const Mat dQ = dS * bc.K * attn_scale;
    const Mat dK = dS.transpose() * bc.Q * attn_scale;
    g[s.wq] += dQ.transpose() * bc.u_a;
    g[s.wk] += dK.transpose() * bc.u_a;
    g[s.wv] += dV.transpose() * bc.u_a;
    const Mat du_a = dQ * p[s.wq] + dK * p[s.wk] + dV * p[s.wv];
    const Vec d_gamma_a = column_sums(du_a.cwiseProduct(bc.c_in));
    const Vec d_beta_a = column_sums(du_a);
    dc += scale_columns(du_a, (Vec::Ones(dm) + bc.gamma_a).eval());

    Vec d_mod(4 * dm);
    d_mod << d_gamma_a, d_beta_a, d_gamma_f, d_beta_f;
    mlp_backward(p, g, s.mod_w1, s.mod_b1, s.mod_w2, s.mod_b2, cache.e, bc.mod, d_mod);
    Vec d_gate(2 * dm);
    d_gate << d_alpha_a, d_alpha_f;
    mlp_backward(p, g, s.gate_w1, s.gate_b1, s.gate_w2, s.gate_b2, cache.e, bc.gate, d_gate);

    if (l % cfg.layers_per_rat == 0) {
      const int r = l / cfg.layers_per_rat;
      const auto& rs = L.rat[static_cast<std::size_t>(r)];
      const RatCache& rc = cache.rat[static_cast<std::size_t>(r)];
      dh += mlp_backward(p, g, rs.w1, rs.b1, rs.w2, rs.b2, rc.h, rc.shift, column_sums(dc));
      if (cfg.recurrent) {
        const Vec& x = cache.cond;
        const Vec& hp = rc.h_prev;
        const Vec dn = dh.cwiseProduct(Vec::Ones(dm) - rc.z);
        const Vec dz = dh.cwiseProduct(hp - rc.n);
        Vec dh_prev = dh.cwiseProduct(rc.z);
        const Vec dan = dn.cwiseProduct((Vec::Ones(dm) - rc.n.cwiseAbs2()));
        g[L.gru_wn] += dan * x.transpose();
        g[L.gru_bn] += dan;
        const Vec dr = dan.cwiseProduct(rc.hn);
        const Vec dhn = dan.cwiseProduct(rc.r);
        g[L.gru_un] += dhn * hp.transpose();
        g[L.gru_bun] += dhn;
        dh_prev += p[L.gru_un].transpose() * dhn;
        const Vec dar = dr.cwiseProduct(rc.r).cwiseProduct(Vec::Ones(dm) - rc.r);
        g[L.gru_wr] += dar * x.transpose();
        g[L.gru_ur] += dar * hp.transpose();
        g[L.gru_br] += dar;
        dh_prev += p[L.gru_ur].transpose() * dar;
        const Vec daz = dz.cwiseProduct(rc.z).cwiseProduct(Vec::Ones(dm) - rc.z);
        g[L.gru_wz] += daz * x.transpose();
        g[L.gru_uz] += daz * hp.transpose();
        g[L.gru_bz] += daz;
        dh_prev += p[L.gru_uz].transpose() * daz;
        dh = dh_prev;
      }
      // Without the recurrent cell every block reads h0, so dh keeps accumulating.
    }
  }

  const Vec dh0_pre = dh.cwiseProduct(Vec::Ones(dm) - cache.h0.cwiseAbs2());
  g[L.h0_w] += dh0_pre * cache.cond.transpose();
  g[L.h0_b] += dh0_pre;
  g[L.in_w] += dc.transpose() * cache.x;
  g[L.in_b] += column_sums(dc);
  g[L.in_pos] += dc.transpose();
}

}  // namespace

Latent denoise(const DenoiserParams& params, const Latent& x_t, int t, const Eigen::VectorXd& cond) {
  return forward(params, x_t, t, cond, nullptr);
}

EpsilonModel as_epsilon_model(const DenoiserParams& params) {
  return [&params](const Latent& x_t, int t, const Eigen::VectorXd& cond) { return denoise(params, x_t, t, cond); };
}

LossGradient denoiser_grad(const DenoiserParams& params, const std::vector<TrainingPair>& batch,
                           const std::vector<NoiseDraw>& draws, const NoiseSchedule& sched, GradOptions options) {
  if (batch.empty()) throw InputError("denoiser_grad: empty batch");
  if (draws.size() != batch.size()) throw InputError("denoiser_grad: one draw per batch element required");
  const double inv_b = 1.0 / static_cast<double>(batch.size());

  LossGradient out{0.0, DenoiserGradient(params.config)};
  std::vector<double> losses(batch.size());
  auto one = [&](std::size_t i, DenoiserGradient& g) {
    const Latent x_t = forward_noise(batch[i].x0, draws[i].t, draws[i].eps, sched);
    ForwardCache cache;
    const Mat eps_hat = forward(params, x_t, draws[i].t, batch[i].cond, &cache);
    const Mat diff = eps_hat - draws[i].eps;
    losses[i] = diff.squaredNorm();
    backward(params, cache, (2.0 * options.loss_scale * inv_b) * diff, g);
  };

  if (options.threads <= 1) {
    DenoiserGradient scratch(params.config);
    for (std::size_t i = 0; i < batch.size(); ++i) {
      scratch.values.setZero();
      one(i, scratch);
      out.grad.values += scratch.values;
    }
  } else {
    std::vector<DenoiserGradient> per_sample(batch.size());
    parallel_for(batch.size(), options.threads, [&](std::size_t i) {
      per_sample[i] = DenoiserGradient(params.config);
      one(i, per_sample[i]);
    });
    for (const auto& g : per_sample) out.grad.values += g.values;
  }
  for (double l : losses) out.loss += l;
  out.loss *= inv_b;
  return out;
}

LossGradient denoiser_grad(const DenoiserParams& params, const std::vector<TrainingPair>& batch,
                           const NoiseSchedule& sched, Rng& rng, GradOptions options) {
  if (batch.empty()) throw InputError("denoiser_grad: empty batch");
  return denoiser_grad(params, batch, draw_noise(batch, sched, rng), sched, options);
}

}  // namespace extradiff
