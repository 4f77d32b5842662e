#pragma once

#include <sdl/model.hpp>

#include <functional>
#include <limits>
#include <memory>

namespace sdl {

/// Outcome of one l1-regularized solve.
struct CodeResult {
  Vec alpha;
  double objective = std::numeric_limits<double>::quiet_NaN();
  int iterations = 0;
  bool converged = false;
  double kkt_residual = std::numeric_limits<double>::infinity();
  /// Objective decrease per continuation stage (start minus end); diagnostic.
  std::vector<double> stage_drops;
};

/// Smooth part f of an objective f + t * ||alpha||_1.
struct SmoothObjective {
  std::function<double(const Vec&)> value_at;
  std::function<Vec(const Vec&)> grad_at;
  double lipschitz_bound = 0.0;
  /// Optional point-dependent curvature bound; when set the solver prefers
  /// it and falls back to lipschitz_bound whenever a step fails to descend.
  std::function<double(const Vec&)> lipschitz_at;
};

/// Reporting threshold under which a coefficient counts as zero.
inline constexpr double sparsity_epsilon = 1e-10;

inline int count_nonzeros(const Vec& alpha) {
  int nnz = 0;
  for (int i = 0; i < alpha.size(); ++i) {
    if (std::abs(alpha[i]) > sparsity_epsilon) ++nnz;
  }
  return nnz;
}

/// Proximal map of t * ||.||_1: component-wise shrink toward zero by t.
inline Vec soft_threshold(const Vec& v, double t) {
  require(t >= 0.0, "soft_threshold: negative threshold");
  Vec out(v.size());
  for (int i = 0; i < v.size(); ++i) {
    const double a = std::abs(v[i]) - t;
    out[i] = a > 0.0 ? (v[i] > 0.0 ? a : -a) : 0.0;
  }
  return out;
}

/// Max violation of the l1 subgradient optimality conditions of
/// f + t * ||.||_1 at alpha, given g = grad f(alpha).  Zero at a minimizer.
inline double l1_kkt_residual(const Vec& alpha, const Vec& g, double t) {
  double r = 0.0;
  for (int i = 0; i < alpha.size(); ++i) {
    double v;
    if (alpha[i] > 0.0) {
      v = std::abs(g[i] + t);
    } else if (alpha[i] < 0.0) {
      v = std::abs(g[i] - t);
    } else {
      v = std::max(std::abs(g[i]) - t, 0.0);
    }
    r = std::max(r, v);
  }
  return r;
}

/// Largest eigenvalue of a symmetric positive semidefinite matrix by power
/// iteration, relative tolerance 1e-8.  Deterministic start vector.
inline double spectral_norm_sym(const Mat& s) {
  const int n = static_cast<int>(s.rows());
  if (n == 0) return 0.0;
  if (n == 1) return std::abs(s(0, 0));
  Vec v(n);
  for (int i = 0; i < n; ++i) v[i] = 1.0 + 0.01 * i;
  v.normalize();
  double lambda = 0.0;
  for (int it = 0; it < 10000; ++it) {
    Vec w = s * v;
    const double nw = w.norm();
    if (nw == 0.0) return 0.0;
    v = w / nw;
    const double next = v.dot(s * v);
    if (std::abs(next - lambda) <= 1e-8 * std::max(std::abs(next), 1e-300)) {
      lambda = next;
      break;
    }
    lambda = next;
  }
  return std::max(lambda, 0.0);
}

namespace detail {

/// Power iteration approaches the top eigenvalue from below; widen slightly
/// so callers can rely on the result as an upper bound.
inline double inflated_spectral_norm(const Mat& s) {
  return spectral_norm_sym(s) * (1.0 + 1e-7);
}

inline double gram_spectral_norm(const Mat& d) {
  return inflated_spectral_norm(Mat(d.transpose() * d));
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Fixed-point continuation
//
// Iterates alpha <- shrink(alpha - tau * grad f(alpha), tau * w) with
// tau = 0.99 / curvature bound, over a geometric continuation schedule of
// effective l1 weights w (factor 0.25 per stage) that starts at the initial
// gradient's max norm and ends at the target weight.  Non-final stages stop
// on iterate stagnation; the final stage stops on the KKT residual.
// ---------------------------------------------------------------------------

inline CodeResult fpc_solve(const SmoothObjective& objective, double l1_weight,
                            const Vec& alpha0, double tol, int max_iter) {
  require(l1_weight >= 0.0, "fpc_solve: negative l1 weight");
  require(tol > 0.0, "fpc_solve: tolerance must be positive");
  require(max_iter > 0, "fpc_solve: iteration cap must be positive");
  require(std::isfinite(objective.lipschitz_bound) &&
              objective.lipschitz_bound > 0.0,
          "fpc_solve: Lipschitz bound must be positive and finite");

  const auto grad_checked = [&](const Vec& a) {
    Vec g = objective.grad_at(a);
    if (!g.allFinite()) {
      throw std::runtime_error("fpc_solve: non-finite gradient encountered");
    }
    return g;
  };

  CodeResult res;
  Vec alpha = alpha0;
  Vec g = grad_checked(alpha);

  // Continuation schedule down to the target weight.
  std::vector<double> stages;
  const double w_start = g.lpNorm<Eigen::Infinity>();
  if (l1_weight <= 0.0 || w_start <= l1_weight) {
    stages.push_back(l1_weight);
  } else {
    for (double w = w_start; w > l1_weight; w *= 0.25) stages.push_back(w);
    stages.push_back(l1_weight);
  }

  const double global_tau = 0.99 / objective.lipschitz_bound;
  bool have_fresh_grad = true;
  for (std::size_t s = 0; s < stages.size() && res.iterations < max_iter; ++s) {
    const double w = stages[s];
    const bool final_stage = (s + 1 == stages.size());
    const double stage_start =
        objective.value_at(alpha) + w * alpha.lpNorm<1>();

    while (res.iterations < max_iter) {
      if (!have_fresh_grad) g = grad_checked(alpha);
      have_fresh_grad = false;
      if (final_stage) {
        res.kkt_residual = l1_kkt_residual(alpha, g, l1_weight);
        if (res.kkt_residual <= tol) {
          res.converged = true;
          break;
        }
      }
      double tau = global_tau;
      if (objective.lipschitz_at) {
        const double local = objective.lipschitz_at(alpha);
        if (std::isfinite(local) && local > 0.0) {
          tau = std::max(tau, 0.99 / local);
        }
      }
      Vec next = soft_threshold(alpha - tau * g, tau * w);
      if (objective.lipschitz_at && tau > global_tau) {
        // A point-local bound may understate curvature ahead; retake the
        // conservative step whenever the bold one fails to descend.
        const double cur = objective.value_at(alpha) + w * alpha.lpNorm<1>();
        const double trial = objective.value_at(next) + w * next.lpNorm<1>();
        if (trial > cur) {
          next = soft_threshold(alpha - global_tau * g, global_tau * w);
        }
      }
      ++res.iterations;
      const double delta = (next - alpha).lpNorm<Eigen::Infinity>();
      alpha = std::move(next);
      if (!final_stage &&
          delta <= tol * std::max(1.0, alpha.lpNorm<Eigen::Infinity>())) {
        break;
      }
    }
    res.stage_drops.push_back(stage_start - (objective.value_at(alpha) +
                                             w * alpha.lpNorm<1>()));
  }

  // A warm start close to the minimizer must never come out worse than it
  // went in; the continuation detour could otherwise undo it by a rounding
  // margin.
  const double final_obj =
      objective.value_at(alpha) + l1_weight * alpha.lpNorm<1>();
  const double warm_obj =
      objective.value_at(alpha0) + l1_weight * alpha0.lpNorm<1>();
  if (warm_obj < final_obj) {
    alpha = alpha0;
  }

  g = grad_checked(alpha);
  res.kkt_residual = l1_kkt_residual(alpha, g, l1_weight);
  res.converged = res.kkt_residual <= tol;
  res.objective = objective.value_at(alpha) + l1_weight * alpha.lpNorm<1>();
  res.alpha = std::move(alpha);
  return res;
}

// ---------------------------------------------------------------------------
// Reconstructive coding
// ---------------------------------------------------------------------------

namespace detail {

/// Smooth part recon_weight * ||x - D alpha||^2 with precomputed products.
struct ReconParts {
  Mat gram;    // D'D
  Vec dtx;     // D'x
  double xsq;  // x'x
  double weight;

  double value(const Vec& a) const {
    return weight * (xsq - 2.0 * a.dot(dtx) + a.dot(gram * a));
  }
  Vec grad(const Vec& a) const { return 2.0 * weight * (gram * a - dtx); }
};

}  // namespace detail

/// Solve min over alpha of recon_weight * ||x - D alpha||^2 + l1 * ||alpha||_1.
inline CodeResult weighted_reconstructive_code(
    const Vec& x, const Dictionary& dict, double recon_weight, double l1,
    const SolverOptions& opts = {}, const Vec* warm_start = nullptr) {
  require(dict.n() == x.size(),
          "reconstructive_code: signal length does not match dictionary rows");
  require(recon_weight > 0.0, "reconstructive_code: reconstruction weight "
                              "must be positive");
  require(l1 >= 0.0, "reconstructive_code: negative l1 weight");

  auto parts = std::make_shared<detail::ReconParts>();
  parts->gram = dict.atoms.transpose() * dict.atoms;
  parts->dtx = dict.atoms.transpose() * x;
  parts->xsq = x.squaredNorm();
  parts->weight = recon_weight;

  SmoothObjective smooth;
  smooth.value_at = [parts](const Vec& a) { return parts->value(a); };
  smooth.grad_at = [parts](const Vec& a) { return parts->grad(a); };
  smooth.lipschitz_bound = std::max(
      2.0 * recon_weight * detail::inflated_spectral_norm(parts->gram),
      1e-12);

  const Vec alpha0 =
      warm_start != nullptr ? *warm_start : Vec(Vec::Zero(dict.k()));
  return fpc_solve(smooth, l1, alpha0, opts.tol, opts.max_iter);
}

/// Classical sparse coding: min ||x - D alpha||^2 + lambda1 * ||alpha||_1.
inline CodeResult reconstructive_code(const Vec& x, const Dictionary& dict,
                                      double lambda1,
                                      const SolverOptions& opts = {},
                                      const Vec* warm_start = nullptr) {
  return weighted_reconstructive_code(x, dict, 1.0, lambda1, opts, warm_start);
}

// ---------------------------------------------------------------------------
// Supervised coding
// ---------------------------------------------------------------------------

/// Exact value of the class-i supervised coding objective
///   C_i({g_j(x, alpha)}) + lambda0 ||x - D alpha||^2 + lambda1 ||alpha||_1.
inline double supervised_objective(const Vec& alpha, const Vec& x, int i,
                                   const Dictionary& dict,
                                   const DecisionParams& params,
                                   const Hyperparams& hyper) {
  require(x.size() == dict.n(),
          "supervised_objective: signal length does not match dictionary");
  require(alpha.size() == dict.k(),
          "supervised_objective: code length does not match dictionary");
  detail::check_class_index(i, params.p());
  const double classifier = softmax_cost(i, decision_values(x, alpha, params));
  const double recon = (x - dict.atoms * alpha).squaredNorm();
  return classifier + hyper.lambda0 * recon + hyper.lambda1 * alpha.lpNorm<1>();
}

/// Step bound for the supervised coding smooth part.
///
/// General class counts: (1 - 1/p) * max(||A'A||_2, ||A'A||_2^2)
///                       + 2 lambda0 ||D'D||_2.
/// Both powers of the Gram norm are computed and the larger kept, so the
/// result stays a true curvature envelope either way.
///
/// Two classes with a supplied alpha: the softmax curvature factor at that
/// point, q1 q2 ||a2 - a1||^2 + 2 lambda0 ||D'D||_2, capped by the general
/// envelope.  The probabilities q are taken at A'alpha + b (b defaults to
/// zero when not supplied).
inline double hessian_bound(const Mat& A, const Dictionary& dict,
                            double lambda0, int p, const Vec* alpha = nullptr,
                            const Vec* biases = nullptr) {
  require(p >= 2, "hessian_bound: need at least two classes");
  require(lambda0 >= 0.0, "hessian_bound: negative lambda0");
  require(A.cols() == p, "hessian_bound: A must have one column per class");
  require(all_finite(A), "hessian_bound: non-finite A");

  const double gram_norm = detail::gram_spectral_norm(dict.atoms);
  const double recon_term = 2.0 * lambda0 * gram_norm;
  const double ata = detail::inflated_spectral_norm(Mat(A.transpose() * A));
  const double factor = 1.0 - 1.0 / static_cast<double>(p);
  const double general = factor * std::max(ata, ata * ata) + recon_term;

  if (p == 2 && alpha != nullptr) {
    require(alpha->size() == A.rows(),
            "hessian_bound: alpha length does not match A rows");
    Vec z = A.transpose() * (*alpha);
    if (biases != nullptr) z += *biases;
    const Vec q = detail::stable_softmax(z);
    const double tight =
        q[0] * q[1] * (A.col(1) - A.col(0)).squaredNorm() + recon_term;
    return std::min(general, tight);
  }
  return general;
}

/// Supervised sparse coding for class i: minimize the class-i objective over
/// alpha by FPC on the smooth part
///   f(alpha) = C_i(A' alpha + b) + lambda0 ||x - D alpha||^2,
///   grad f   = A grad C_i(A' alpha + b) - 2 lambda0 D'(x - D alpha).
inline CodeResult supervised_code(const Vec& x, int i, const Dictionary& dict,
                                  const DecisionParams& params,
                                  const Hyperparams& hyper,
                                  const Vec* warm_start = nullptr) {
  require(x.size() == dict.n(),
          "supervised_code: signal length does not match dictionary");
  detail::check_class_index(i, params.p());
  params.validate(dict.n(), dict.k());

  struct Shared {
    Mat A;
    Vec b;
    detail::ReconParts recon;
    int cls;
  };
  auto sh = std::make_shared<Shared>();
  AffineScores aff = affine_reduction(x, params);
  sh->A = std::move(aff.A);
  sh->b = std::move(aff.b);
  sh->recon.gram = dict.atoms.transpose() * dict.atoms;
  sh->recon.dtx = dict.atoms.transpose() * x;
  sh->recon.xsq = x.squaredNorm();
  sh->recon.weight = hyper.lambda0;
  sh->cls = i;

  SmoothObjective smooth;
  smooth.value_at = [sh](const Vec& a) {
    return softmax_cost(sh->cls, Vec(sh->A.transpose() * a + sh->b)) +
           sh->recon.value(a);
  };
  smooth.grad_at = [sh](const Vec& a) {
    const Vec gc = softmax_cost_grad(sh->cls, Vec(sh->A.transpose() * a + sh->b));
    return Vec(sh->A * gc + sh->recon.grad(a));
  };
  smooth.lipschitz_bound =
      std::max(hessian_bound(sh->A, dict, hyper.lambda0, params.p()), 1e-12);

  if (hyper.solver.tight_two_class_bound && params.p() == 2) {
    const double recon_term =
        2.0 * hyper.lambda0 * detail::inflated_spectral_norm(sh->recon.gram);
    const double diff_sq = (sh->A.col(1) - sh->A.col(0)).squaredNorm();
    smooth.lipschitz_at = [sh, recon_term, diff_sq](const Vec& a) {
      const Vec q = detail::stable_softmax(Vec(sh->A.transpose() * a + sh->b));
      return q[0] * q[1] * diff_sq + recon_term;
    };
  }

  const Vec alpha0 =
      warm_start != nullptr ? *warm_start : Vec(Vec::Zero(dict.k()));
  return fpc_solve(smooth, hyper.lambda1, alpha0, hyper.solver.tol,
                   hyper.solver.max_iter);
}

}  // namespace sdl
