#include "u2o/hilp.hpp"

#include <cmath>
#include <filesystem>
#include <fstream>
#include <nlohmann/json.hpp>

namespace u2o::hilp {

namespace fs = std::filesystem;
using nlohmann::json;

Eigen::MatrixXd features(const FeatureNet& net, const Eigen::MatrixXd& S) {
  nn::Cache cache;
  return nn::forward(net.spec, net.p, S, cache);
}

double hilbert_value(const FeatureNet& net, const Eigen::VectorXd& s, const Eigen::VectorXd& g) {
  return -(nn::forward1(net.spec, net.p, s) - nn::forward1(net.spec, net.p, g)).norm();
}

bool goal_match(const env::EnvSpec& spec, const Eigen::Ref<const Eigen::VectorXd>& s2,
                const Eigen::Ref<const Eigen::VectorXd>& g) {
  if (spec.is_grid())
    return env::decode_cell(spec, s2.head<2>()) == env::decode_cell(spec, g.head<2>());
  return (s2 - g).norm() <= 0.05;
}

GoalBatch sample_goal_batch(const env::TransitionDataset& data, int batch_size, double gamma_h,
                            rng::Stream& stream) {
  std::size_t n = data.size();
  if (n == 0) throw Error("sample_goal_batch on empty dataset");
  GoalBatch batch;
  auto B = static_cast<Eigen::Index>(batch_size);
  batch.s.resize(data.s.rows(), B);
  batch.s2.resize(data.s.rows(), B);
  batch.g.resize(data.s.rows(), B);
  batch.r.resize(B);
  batch.mask.resize(B);
  double log_gamma = std::log(gamma_h);
  for (Eigen::Index c = 0; c < B; ++c) {
    auto i = static_cast<std::size_t>(stream.bounded(n));
    auto ic = static_cast<Eigen::Index>(i);
    batch.s.col(c) = data.s.col(ic);
    batch.s2.col(c) = data.s2.col(ic);
    double u = stream.uniform();
    std::size_t gi;
    if (u < 0.2) {
      gi = i;  // goal = this transition's next state
    } else if (u < 0.7) {
      // future state of the same episode, geometric offset, clamped to its end
      double ug = stream.uniform();
      double k = std::floor(std::log(1.0 - ug) / log_gamma);
      std::size_t end = data.episode_end(i);
      gi = i + static_cast<std::size_t>(std::min(k, 1e18));
      if (gi >= end) gi = end - 1;
    } else {
      gi = static_cast<std::size_t>(stream.bounded(n));
    }
    batch.g.col(c) = data.s2.col(static_cast<Eigen::Index>(gi));
    bool match = goal_match(data.spec, batch.s2.col(c), batch.g.col(c));
    batch.r[c] = match ? 0.0 : -1.0;
    batch.mask[c] = match ? 0.0 : 1.0;
  }
  return batch;
}

namespace {

// Column norms of xi(S)-xi(G) plus the unit direction matrix (zero where the
// difference vanishes exactly, the subgradient choice at the cone tip).
void embed_distance(const nn::MlpSpec& spec, const nn::Params& p, const Eigen::MatrixXd& S,
                    const Eigen::MatrixXd& G, nn::Cache* cs, nn::Cache* cg,
                    Eigen::RowVectorXd& dist, Eigen::MatrixXd* unit) {
  nn::Cache local_s, local_g;
  nn::Cache& cache_s = cs ? *cs : local_s;
  nn::Cache& cache_g = cg ? *cg : local_g;
  Eigen::MatrixXd diff = nn::forward(spec, p, S, cache_s) - nn::forward(spec, p, G, cache_g);
  dist = diff.colwise().norm();
  if (unit) {
    *unit = diff;
    for (Eigen::Index c = 0; c < diff.cols(); ++c) {
      if (dist[c] > 0.0) unit->col(c) /= dist[c];
      else unit->col(c).setZero();
    }
  }
}

double hilbert_loss_impl(const FeatureNet& net, const GoalBatch& batch, double tau, double gamma,
                         nn::Params* grad) {
  nn::Cache cache_s, cache_g;
  Eigen::RowVectorXd dist, tdist;
  Eigen::MatrixXd unit;
  embed_distance(net.spec, net.p, batch.s, batch.g, &cache_s, &cache_g, dist,
                 grad ? &unit : nullptr);
  embed_distance(net.spec, net.target, batch.s2, batch.g, nullptr, nullptr, tdist, nullptr);

  double B = static_cast<double>(batch.size());
  double loss = 0.0;
  Eigen::RowVectorXd dloss_ddist(batch.size());
  for (Eigen::Index c = 0; c < batch.size(); ++c) {
    // x = r + gamma*mask*V_target(s2,g) - V(s,g), V = -dist
    double x = batch.r[c] + gamma * batch.mask[c] * (-tdist[c]) + dist[c];
    double w = offline_rl::expectile_weight(x, tau);
    loss += w * x * x / B;
    dloss_ddist[c] = 2.0 * w * x / B;
  }
  if (!std::isfinite(loss)) throw NumericalFailure("hilbert_loss is not finite");
  if (grad) {
    if (grad->w.size() != net.p.w.size()) *grad = nn::zeros_like(net.p);
    else grad->set_zero();
    Eigen::MatrixXd dYs = unit.array().rowwise() * dloss_ddist.array();
    Eigen::MatrixXd dYg = -dYs;
    nn::backward(net.spec, net.p, cache_s, dYs, *grad);
    nn::backward(net.spec, net.p, cache_g, dYg, *grad);
  }
  return loss;
}

}  // namespace

double hilbert_loss(const FeatureNet& net, const GoalBatch& batch, double tau, double gamma) {
  return hilbert_loss_impl(net, batch, tau, gamma, nullptr);
}

double hilbert_loss_grad(const FeatureNet& net, const GoalBatch& batch, double tau, double gamma,
                         nn::Params& grad) {
  return hilbert_loss_impl(net, batch, tau, gamma, &grad);
}

FeatureNet train_hilbert_features(const env::TransitionDataset& data, const HilpConfig& hcfg,
                                  const offline_rl::TrainConfig& tcfg, std::uint64_t seed,
                                  const PretrainHooks& hooks) {
  if (data.size() == 0) throw Error("dataset has no complete episodes");
  bool any_done = false;
  for (std::uint8_t d : data.done) any_done |= d != 0;
  if (!any_done) throw Error("dataset has no complete episodes");

  FeatureNet net;
  net.d = hcfg.d;
  std::vector<int> widths{data.spec.obs_dim()};
  widths.insert(widths.end(), tcfg.hidden.begin(), tcfg.hidden.end());
  widths.push_back(hcfg.d);
  net.spec = {widths, nn::Act::relu, nn::OutAct::identity};
  net.p = nn::init_params(net.spec, rng::derive(seed, "feature"));
  net.target = net.p;

  nn::Adam opt(net.p, {.lr = tcfg.lr_feature});
  rng::Stream goals(rng::derive(seed, "goals"));
  nn::Params grad;
  double interval_loss = 0.0;
  std::int64_t interval_n = 0;
  for (std::int64_t t = 1; t <= hcfg.feature_steps; ++t) {
    GoalBatch batch = sample_goal_batch(data, tcfg.batch_size, hcfg.gamma, goals);
    interval_loss += hilbert_loss_grad(net, batch, hcfg.expectile, hcfg.gamma, grad);
    ++interval_n;
    opt.step(net.p, grad);
    nn::polyak_update(net.target, net.p, hcfg.polyak);
    if (hooks.sink && (t % hooks.interval == 0 || t == hcfg.feature_steps)) {
      PretrainProgress prog;
      prog.step = t;
      prog.feature_stage = true;
      prog.feature_loss = interval_loss / static_cast<double>(interval_n);
      prog.feature = &net;
      hooks.sink(prog);
      interval_loss = 0.0;
      interval_n = 0;
    }
  }
  return net;
}

Eigen::MatrixXd successor_features(const FeatureNet& net, const Eigen::MatrixXd& S,
                                   const Eigen::MatrixXd& S2) {
  return features(net, S2) - features(net, S);
}

Eigen::VectorXd successor_feature(const FeatureNet& net, const Eigen::VectorXd& s,
                                  const Eigen::VectorXd& s2) {
  return nn::forward1(net.spec, net.p, s2) - nn::forward1(net.spec, net.p, s);
}

double intrinsic_reward(const FeatureNet& net, const Eigen::VectorXd& s,
                        const Eigen::VectorXd& s2, const Eigen::VectorXd& z) {
  return successor_feature(net, s, s2).dot(z);
}

Eigen::VectorXd sample_skill(rng::Stream& stream, int d) {
  if (d < 1) throw Error("skill dimension must be >= 1");
  Eigen::VectorXd z(d);
  double norm = 0.0;
  do {
    for (int i = 0; i < d; ++i) z[i] = stream.gaussian();
    norm = z.norm();
  } while (norm == 0.0);
  return z / norm;
}

PretrainBundle pretrain_skills(const env::TransitionDataset& data, const HilpConfig& hcfg,
                               const offline_rl::TrainConfig& tcfg, std::int64_t n_steps,
                               std::uint64_t seed, std::optional<FeatureNet> pre,
                               const PretrainHooks& hooks) {
  PretrainBundle bundle;
  bundle.spec = data.spec;
  bundle.d = hcfg.d;
  bundle.feature = pre ? std::move(*pre)
                       : train_hilbert_features(data, hcfg, tcfg, rng::derive(seed, "features"),
                                                hooks);
  env::ActionSpec aspec = data.spec.action_spec();
  bundle.agent = offline_rl::make_agent(data.spec.obs_dim() + hcfg.d, aspec, tcfg,
                                        rng::derive(seed, "agent"));
  offline_rl::Optimizers opt = offline_rl::make_optimizers(bundle.agent);

  rng::Stream batch_stream(rng::derive(seed, "batch"));
  rng::Stream skill_stream(rng::derive(seed, "skills"));
  rng::Stream update_stream(rng::derive(seed, "update"));

  std::size_t n = data.size();
  bool disc = aspec.type == env::ActionType::discrete;
  auto B = static_cast<Eigen::Index>(tcfg.batch_size);
  int obs_dim = data.spec.obs_dim();

  offline_rl::Batch batch;
  batch.s.resize(obs_dim + hcfg.d, B);
  batch.s2.resize(obs_dim + hcfg.d, B);
  if (disc) batch.ad.resize(static_cast<std::size_t>(B));
  else batch.a.resize(aspec.dim, B);
  batch.r.resize(B);
  batch.mask = Eigen::VectorXd::Ones(B);

  Eigen::MatrixXd S(obs_dim, B), S2(obs_dim, B);
  offline_rl::LossReport interval_losses;
  RunningStats interval_raw, interval_norm;
  std::int64_t interval_n = 0;

  for (std::int64_t t = 1; t <= n_steps; ++t) {
    for (Eigen::Index c = 0; c < B; ++c) {
      auto i = static_cast<Eigen::Index>(batch_stream.bounded(n));
      S.col(c) = data.s.col(i);
      S2.col(c) = data.s2.col(i);
      if (disc) batch.ad[static_cast<std::size_t>(c)] = data.ad[static_cast<std::size_t>(i)];
      else batch.a.col(c) = data.a.col(i) / aspec.high;
      batch.s.col(c).tail(hcfg.d) = sample_skill(skill_stream, hcfg.d);
    }
    batch.s.topRows(obs_dim) = S;
    batch.s2.topRows(obs_dim) = S2;
    batch.s2.bottomRows(hcfg.d) = batch.s.bottomRows(hcfg.d);

    Eigen::MatrixXd f = successor_features(bundle.feature, S, S2);
    for (Eigen::Index c = 0; c < B; ++c) {
      double raw = f.col(c).dot(batch.s.col(c).tail(hcfg.d));
      bundle.stats.update(raw);
      interval_raw.update(raw);
      batch.r[c] = raw;  // normalized below, after the whole batch updates stats
    }
    for (Eigen::Index c = 0; c < B; ++c) {
      batch.r[c] = bundle.stats.normalize(batch.r[c]);
      interval_norm.update(batch.r[c]);
    }

    offline_rl::LossReport rep = offline_rl::update_step(bundle.agent, opt, batch, update_stream);
    interval_losses.critic += rep.critic;
    interval_losses.value += rep.value;
    interval_losses.actor += rep.actor;
    ++interval_n;

    if (hooks.sink && (t % hooks.interval == 0 || t == n_steps)) {
      PretrainProgress prog;
      prog.step = t;
      double k = static_cast<double>(interval_n);
      prog.losses = {interval_losses.critic / k, interval_losses.value / k,
                     interval_losses.actor / k};
      prog.reward_raw_mean = interval_raw.mean;
      prog.reward_norm_mean = interval_norm.mean;
      prog.reward_norm_std = interval_norm.stddev();
      prog.feature = &bundle.feature;
      prog.agent = &bundle.agent;
      prog.stats = &bundle.stats;
      hooks.sink(prog);
      interval_losses = {};
      interval_raw = {};
      interval_norm = {};
      interval_n = 0;
    }
  }
  return bundle;
}

// --- bundle serialization -------------------------------------------------------

void save_bundle(const PretrainBundle& bundle, const std::string& dir) {
  fs::create_directories(dir);
  nn::save_tensors(dir + "/feature.ckpt",
                   {{"xi", &bundle.feature.p}, {"xi_target", &bundle.feature.target}});
  offline_rl::save_agent(bundle.agent, dir);

  json stats{{"count", bundle.stats.count}, {"mean", bundle.stats.mean}, {"m2", bundle.stats.m2}};
  std::ofstream(dir + "/stats.json") << stats.dump(2) << "\n";

  json meta{{"d", bundle.d},
            {"env_id", bundle.spec.canonical_id()},
            {"max_episode_len", bundle.spec.episode_limit()},
            {"obs_dim", bundle.spec.obs_dim()},
            {"feature_widths", bundle.feature.spec.widths}};
  std::ofstream(dir + "/meta.json") << meta.dump(2) << "\n";
}

PretrainBundle load_bundle(const std::string& dir) {
  std::ifstream mf(dir + "/meta.json");
  if (!mf) throw Error("missing bundle meta: " + dir);
  json meta = json::parse(mf);

  PretrainBundle bundle;
  bundle.d = meta.at("d").get<int>();
  bundle.spec = env::spec_from_canonical_id(meta.at("env_id").get<std::string>());
  bundle.spec.max_episode_len = meta.at("max_episode_len").get<int>();
  bundle.agent = offline_rl::load_agent(dir);

  bundle.feature.d = bundle.d;
  bundle.feature.spec = {meta.at("feature_widths").get<std::vector<int>>(), nn::Act::relu,
                         nn::OutAct::identity};
  bundle.feature.p = nn::init_params(bundle.feature.spec, 0);
  bundle.feature.target = bundle.feature.p;
  nn::load_tensors(dir + "/feature.ckpt",
                   {{"xi", &bundle.feature.p}, {"xi_target", &bundle.feature.target}});

  std::ifstream sf(dir + "/stats.json");
  if (!sf) throw Error("missing bundle stats: " + dir);
  json stats = json::parse(sf);
  bundle.stats.count = stats.at("count").get<std::int64_t>();
  bundle.stats.mean = stats.at("mean").get<double>();
  bundle.stats.m2 = stats.at("m2").get<double>();
  return bundle;
}

}  // namespace u2o::hilp
