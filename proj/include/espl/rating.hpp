#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "espl/errors.hpp"
#include "espl/normal.hpp"

// Bayesian skill ratings for prompt tournaments: Gaussian skills with a
// performance-noise link, drift dynamics, draw margins, truncated-Gaussian
// corrections and EP message passing along the chain of adjacent ranking
// constraints. Everything here is a pure function of its inputs.

namespace espl {

struct Rating {
  double mu = 0.0;
  double sigma = 0.0;

  bool valid() const {
    return std::isfinite(mu) && std::isfinite(sigma) && sigma > 0.0;
  }
};

struct RatingConfig {
  double mu0 = 25.0;
  double sigma0 = 25.0 / 3.0;
  double perf_beta = 25.0 / 6.0;
  double tau = 25.0 / 300.0;
  double p_draw = 0.10;
  int ep_max_sweeps = 10;
  double ep_tolerance = 1e-4;

  Rating initial() const { return {mu0, sigma0}; }

  void validate() const {
    if (!(sigma0 > 0.0)) throw ConfigError("rating: sigma0 must be > 0");
    if (!(perf_beta > 0.0)) throw ConfigError("rating: perf_beta must be > 0");
    if (!(tau >= 0.0)) throw ConfigError("rating: tau must be >= 0");
    if (!(p_draw >= 0.0 && p_draw < 1.0))
      throw ConfigError("rating: p_draw must lie in [0, 1)");
    if (ep_max_sweeps < 1) throw ConfigError("rating: ep_max_sweeps must be >= 1");
    if (!(ep_tolerance > 0.0)) throw ConfigError("rating: ep_tolerance must be > 0");
  }
};

// A match outcome: `order` lists player indices best-first; equal adjacent
// values in `ties` mark the corresponding sorted positions as drawn.
struct Ranking {
  std::vector<int> order;
  std::vector<int> ties;

  void validate(std::size_t player_count) const {
    if (order.size() != player_count || ties.size() != player_count)
      throw MatchError("ranking: order/ties length must equal player count");
    std::vector<bool> seen(player_count, false);
    for (int p : order) {
      if (p < 0 || static_cast<std::size_t>(p) >= player_count || seen[p])
        throw MatchError("ranking: order is not a permutation of players");
      seen[p] = true;
    }
  }
};

// Descending-value ranking; exact value equality becomes a draw. Ties in the
// sort order resolve by player index for reproducibility.
inline Ranking ranking_from_values(const std::vector<double>& values) {
  Ranking r;
  r.order.resize(values.size());
  std::iota(r.order.begin(), r.order.end(), 0);
  std::stable_sort(r.order.begin(), r.order.end(), [&](int a, int b) {
    if (values[a] != values[b]) return values[a] > values[b];
    return a < b;
  });
  r.ties.resize(values.size());
  int group = 0;
  for (std::size_t s = 0; s < r.order.size(); ++s) {
    if (s > 0 && values[r.order[s]] != values[r.order[s - 1]]) ++group;
    r.ties[s] = group;
  }
  return r;
}

// sigma' = sqrt(sigma^2 + tau^2): skill drift between tournaments.
inline Rating apply_dynamics(const Rating& r, const RatingConfig& cfg) {
  return {r.mu, std::sqrt(r.sigma * r.sigma + cfg.tau * cfg.tau)};
}

// Global draw margin in performance-difference units.
inline double draw_margin(const RatingConfig& cfg) {
  if (!(cfg.p_draw >= 0.0 && cfg.p_draw < 1.0))
    throw ConfigError("draw_margin: p_draw must lie in [0, 1)");
  if (cfg.p_draw == 0.0) return 0.0;
  return probit((cfg.p_draw + 1.0) / 2.0) * std::sqrt(2.0) * cfg.perf_beta;
}

struct CorrectionTerms {
  double v = 0.0;
  double w = 0.0;
};

// One-sided (win/loss) truncation corrections. Finite for any finite inputs;
// the deep-loss tail goes through the scaled-erfc path instead of a 0/0 ratio.
inline CorrectionTerms vw_win(double t, double eps) {
  const double d = t - eps;
  const double v = inverse_mills(d);
  return {v, v * (v + d)};
}

// Two-sided (draw) corrections: mean shift and variance loss of a standard
// normal centered at t truncated to the band [-eps, eps].
inline CorrectionTerms vw_draw(double t, double eps) {
  if (t < 0.0) {
    CorrectionTerms r = vw_draw(-t, eps);
    return {-r.v, r.w};
  }
  const double a = eps - t;  // near edge (in mean-centered units)
  const double b = -eps - t; // far edge
  // Far-edge terms decay like exp(-2*eps*t) relative to the near edge; once
  // they are below double precision the band acts as a single truncation.
  if (2.0 * eps * t > 40.0) {
    const double m = inverse_mills(a);
    return {-m, m * (m + a)};
  }
  const double z = norm_cdf(a) - norm_cdf(b);
  if (!(z > 0.0)) {
    // Degenerate band (eps == 0 or full underflow): all mass at the band.
    return {-t, 1.0};
  }
  const double v = (norm_pdf(b) - norm_pdf(a)) / z;
  const double w = v * v + (a * norm_pdf(a) - b * norm_pdf(b)) / z;
  return {v, w};
}

// mu + lambda * sigma: the optimistic selection score.
inline double ucb_score(const Rating& r, double lambda) {
  return r.mu + lambda * r.sigma;
}

// Child of a mutation: parent mean, uncertainty inflated in variance.
inline Rating mutation_child_rating(const Rating& parent, double delta_sigma) {
  return {parent.mu,
          std::sqrt(parent.sigma * parent.sigma + delta_sigma * delta_sigma)};
}

// Alternative child initialization that adds delta_sigma in std-dev units.
inline Rating mutation_child_rating_additive(const Rating& parent,
                                             double delta_sigma) {
  return {parent.mu, parent.sigma + delta_sigma};
}

// Precision-weighted fusion of the parents, then delta_sigma^2 inflation.
inline Rating crossover_fusion_rating(const std::vector<Rating>& parents,
                                      double delta_sigma) {
  if (parents.empty())
    throw Error("crossover_fusion_rating: needs at least one parent");
  double precision = 0.0;
  double weighted = 0.0;
  for (const Rating& p : parents) {
    double pr = 1.0 / (p.sigma * p.sigma);
    precision += pr;
    weighted += pr * p.mu;
  }
  return {weighted / precision,
          std::sqrt(1.0 / precision + delta_sigma * delta_sigma)};
}

struct EpDiagnostics {
  int sweeps = 0;
  double last_delta = 0.0;
};

// Posterior ratings for a ranked match, returned in the players' original
// index order. Applies drift dynamics once, then runs EP message passing
// over the adjacent win/draw constraints in performance space and maps the
// result back through the noise link.
inline std::vector<Rating> rank_update(const std::vector<Rating>& ratings,
                                       const Ranking& ranking,
                                       const RatingConfig& cfg,
                                       EpDiagnostics* diag = nullptr) {
  const std::size_t n = ratings.size();
  if (n < 2) throw MatchError("rank_update: needs at least two players");
  ranking.validate(n);
  cfg.validate();

  std::vector<Rating> prior(n);
  for (std::size_t i = 0; i < n; ++i) {
    if (!ratings[i].valid())
      throw MatchError("rank_update: invalid prior rating");
    prior[i] = apply_dynamics(ratings[i], cfg);
  }

  const double beta2 = cfg.perf_beta * cfg.perf_beta;
  const double eps_abs = draw_margin(cfg);

  // Performance-space priors in ranked order (best first).
  std::vector<double> pi0(n), tau0(n);
  for (std::size_t s = 0; s < n; ++s) {
    const Rating& r = prior[ranking.order[s]];
    double var = r.sigma * r.sigma + beta2;
    pi0[s] = 1.0 / var;
    tau0[s] = r.mu / var;
  }

  struct Msg {
    double pi = 0.0;
    double tau = 0.0;
  };
  // Constraint k joins sorted positions k (better) and k+1 (worse).
  std::vector<Msg> to_upper(n - 1), to_lower(n - 1);
  std::vector<bool> is_draw(n - 1);
  for (std::size_t k = 0; k + 1 < n; ++k)
    is_draw[k] = ranking.ties[k] == ranking.ties[k + 1];

  auto fail = [&](const char* what) {
    std::ostringstream os;
    os << what << "; priors:";
    for (std::size_t i = 0; i < n; ++i)
      os << " (" << prior[i].mu << ", " << prior[i].sigma << ")";
    throw NumericError("rank_update", os.str());
  };

  int sweep = 0;
  double delta = 0.0;
  for (; sweep < cfg.ep_max_sweeps; ++sweep) {
    delta = 0.0;
    for (std::size_t k = 0; k + 1 < n; ++k) {
      // Cavity: prior plus the message from the player's other constraint.
      double cav_pi_i = pi0[k] + (k > 0 ? to_lower[k - 1].pi : 0.0);
      double cav_tau_i = tau0[k] + (k > 0 ? to_lower[k - 1].tau : 0.0);
      double cav_pi_j = pi0[k + 1] + (k + 2 < n ? to_upper[k + 1].pi : 0.0);
      double cav_tau_j = tau0[k + 1] + (k + 2 < n ? to_upper[k + 1].tau : 0.0);

      double var_i = 1.0 / cav_pi_i;
      double var_j = 1.0 / cav_pi_j;
      double mu_i = cav_tau_i * var_i;
      double mu_j = cav_tau_j * var_j;

      double c = std::sqrt(var_i + var_j);
      double t = (mu_i - mu_j) / c;
      double eps = eps_abs / c;
      CorrectionTerms vw = is_draw[k] ? vw_draw(t, eps) : vw_win(t, eps);

      double mu_post_i = mu_i + var_i / c * vw.v;
      double mu_post_j = mu_j - var_j / c * vw.v;
      double var_post_i = var_i * (1.0 - var_i / (c * c) * vw.w);
      double var_post_j = var_j * (1.0 - var_j / (c * c) * vw.w);
      if (!(var_post_i > 0.0) || !(var_post_j > 0.0))
        fail("non-positive posterior variance");

      Msg up{std::max(0.0, 1.0 / var_post_i - cav_pi_i),
             mu_post_i / var_post_i - cav_tau_i};
      Msg dn{std::max(0.0, 1.0 / var_post_j - cav_pi_j),
             mu_post_j / var_post_j - cav_tau_j};
      if (!std::isfinite(up.pi) || !std::isfinite(up.tau) ||
          !std::isfinite(dn.pi) || !std::isfinite(dn.tau))
        fail("non-finite message");

      delta = std::max({delta, std::abs(up.pi - to_upper[k].pi),
                        std::abs(up.tau - to_upper[k].tau),
                        std::abs(dn.pi - to_lower[k].pi),
                        std::abs(dn.tau - to_lower[k].tau)});
      to_upper[k] = up;
      to_lower[k] = dn;
    }
    if (delta < cfg.ep_tolerance) {
      ++sweep;
      break;
    }
  }
  if (diag) *diag = {sweep, delta};

  std::vector<Rating> out(n);
  for (std::size_t s = 0; s < n; ++s) {
    double msg_pi = (s > 0 ? to_lower[s - 1].pi : 0.0) +
                    (s + 1 < n ? to_upper[s].pi : 0.0);
    double msg_tau = (s > 0 ? to_lower[s - 1].tau : 0.0) +
                     (s + 1 < n ? to_upper[s].tau : 0.0);
    // Map the truncation message through the performance-noise link.
    double link = 1.0 + beta2 * msg_pi;
    double skill_msg_pi = msg_pi / link;
    double skill_msg_tau = msg_tau / link;

    const Rating& r = prior[ranking.order[s]];
    double prior_pi = 1.0 / (r.sigma * r.sigma);
    double pi = prior_pi + skill_msg_pi;
    double tau = prior_pi * r.mu + skill_msg_tau;
    Rating post{tau / pi, std::sqrt(1.0 / pi)};
    if (!post.valid()) fail("non-finite posterior");
    out[ranking.order[s]] = post;
  }
  return out;
}

} // namespace espl
