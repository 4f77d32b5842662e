#pragma once

#include <sdl/data.hpp>
#include <sdl/sparse_coding.hpp>

#include <functional>

namespace sdl {

/// Sdl: mixed generative/discriminative objective over the full mu schedule.
/// SdlG: generative-only run (single stage at mu = 0).
/// Rec: classical reconstructive dictionary plus a posterior classifier.
enum class TrainMode { Sdl, SdlG, Rec };

inline const char* to_string(TrainMode m) {
  switch (m) {
    case TrainMode::Sdl: return "sdl";
    case TrainMode::SdlG: return "sdl-g";
    default: return "rec";
  }
}

/// Projected-gradient settings for the dictionary/parameter update.
struct UpdatePolicy {
  int steps = 5;
  double initial_step = 1.0;
  int max_halvings = 30;
};

struct TrainConfig {
  Hyperparams hyper;
  DecisionVariant variant = DecisionVariant::Linear;
  TrainMode mode = TrainMode::Sdl;
  std::uint64_t seed = 0;
  int workers = 1;
  int outer_iterations_per_mu = 10;
  double objective_rel_tol = 1e-5;
  UpdatePolicy update;
  /// First-stage iterations allowed to rescale (lambda0, lambda1).
  int gamma_rescale_iterations = 10;
  /// Measure validation error every iteration instead of once per stage.
  bool validate_each_iteration = false;

  void validate() const {
    hyper.validate();
    require(outer_iterations_per_mu >= 1,
            "TrainConfig: iteration count must be positive");
    require(objective_rel_tol > 0.0,
            "TrainConfig: objective tolerance must be positive");
    require(update.steps >= 1 && update.max_halvings >= 1 &&
                update.initial_step > 0.0,
            "TrainConfig: bad update policy");
    require(gamma_rescale_iterations >= 0,
            "TrainConfig: negative rescale window");
  }
};

/// One completed outer iteration.  validation_error and gamma are NaN when
/// not measured / not applied at that iteration.
struct TraceRecord {
  int mu_index = 0;
  double mu = 0.0;
  int iteration = 0;
  double mixed_objective = 0.0;
  double generative_term = 0.0;
  double discriminative_term = 0.0;
  double mean_sparsity = 0.0;
  double validation_error = std::numeric_limits<double>::quiet_NaN();
  double gamma = std::numeric_limits<double>::quiet_NaN();
};

struct TrainTrace {
  std::vector<TraceRecord> records;
  double chosen_mu = 0.0;
  double chosen_validation_error = std::numeric_limits<double>::quiet_NaN();
};

/// Divergence abort that still carries the progress made so far.
class train_abort_with_trace : public train_abort {
public:
  TrainTrace trace;
  train_abort_with_trace(const std::string& what, TrainTrace t)
      : train_abort(what), trace(std::move(t)) {}
};

// ---------------------------------------------------------------------------
// Dictionary initialization and the norm-ball projection
// ---------------------------------------------------------------------------

/// Seeded Gaussian dictionary with exactly unit-norm columns.
inline Dictionary init_dictionary(int n, int k, std::uint64_t seed) {
  require(n >= 1 && k >= 1, "init_dictionary: bad dimensions");
  Rng rng(seed);
  Mat atoms(n, k);
  for (int c = 0; c < k; ++c) {
    for (int r = 0; r < n; ++r) atoms(r, c) = rng.gaussian();
    const double norm = atoms.col(c).norm();
    if (norm > 0.0) {
      atoms.col(c) /= norm;
    } else {
      atoms.col(c).setZero();
      atoms(0, c) = 1.0;
    }
  }
  return Dictionary(std::move(atoms));
}

/// Scale any column with l2 norm above one back onto the unit ball.
inline void project_columns(Mat& atoms) {
  require(all_finite(atoms), "project_columns: non-finite entries");
  for (int c = 0; c < atoms.cols(); ++c) {
    const double norm = atoms.col(c).norm();
    if (norm > 1.0) atoms.col(c) /= norm;
  }
}

inline Dictionary project_columns(Dictionary d) {
  project_columns(d.atoms);
  return d;
}

// ---------------------------------------------------------------------------
// Mixed objective pieces
// ---------------------------------------------------------------------------

/// Per-class weights of the mixed objective's gradient through the cost
/// vector: mu * grad of the discriminative cost plus (1 - mu) on the true
/// class.  Entries sum to 1 - mu.
inline Vec omega_weights(int i, const Vec& costs, double mu) {
  detail::check_class_index(i, static_cast<int>(costs.size()));
  require(mu >= 0.0 && mu <= 1.0, "omega_weights: mu outside [0, 1]");
  Vec w = mu * residual_softmax_grad(i, costs);
  w[i - 1] += 1.0 - mu;
  return w;
}

namespace detail {

/// S values of every (sample, class) pair at the given fixed codes.
inline Mat supervised_cost_matrix(const LabeledDataset& data,
                                  const std::vector<Mat>& codes,
                                  const Dictionary& dict,
                                  const DecisionParams& params,
                                  const Hyperparams& hyper, int workers) {
  const int p = params.p();
  Mat s(data.m(), p);
  parallel_for(static_cast<std::size_t>(data.m()), workers, [&](std::size_t j) {
    const Vec x = data.signals.row(static_cast<Eigen::Index>(j)).transpose();
    for (int l = 1; l <= p; ++l) {
      s(static_cast<Eigen::Index>(j), l - 1) =
          supervised_objective(codes[j].col(l - 1), x, l, dict, params, hyper);
    }
  });
  return s;
}

}  // namespace detail

struct ObjectiveParts {
  double mixed = 0.0;
  double generative = 0.0;
  double discriminative = 0.0;
  double penalty = 0.0;
};

/// Mixed update objective at fixed codes:
///   mu * sum_j disc(i_j, S_j.) + (1 - mu) * sum_j S_{j,i_j}
///   + lambda2 * ||theta||^2.
inline ObjectiveParts update_objective_parts(const LabeledDataset& data,
                                             const std::vector<Mat>& codes,
                                             const Dictionary& dict,
                                             const DecisionParams& params,
                                             const Hyperparams& hyper,
                                             double mu, int workers = 1) {
  const Mat s = detail::supervised_cost_matrix(data, codes, dict, params,
                                               hyper, workers);
  ObjectiveParts parts;
  for (int j = 0; j < data.m(); ++j) {
    const int i = data.labels[j];
    parts.generative += s(j, i - 1);
    parts.discriminative += residual_softmax_cost(i, s.row(j).transpose());
  }
  parts.penalty = hyper.lambda2 * params.squared_norm(hyper.regularize_bias);
  parts.mixed = mu * parts.discriminative + (1.0 - mu) * parts.generative +
                parts.penalty;
  return parts;
}

struct ModelGrads {
  Mat dict_grad;             // n x k
  DecisionParams param_grad;  // same shape as the parameters
};

/// Gradient of the mixed update objective in (D, theta) at fixed codes.
/// Accumulation runs in sample order so results do not depend on workers.
inline ModelGrads dictionary_update_grads(const LabeledDataset& data,
                                          const std::vector<Mat>& codes,
                                          const Dictionary& dict,
                                          const DecisionParams& params,
                                          const Hyperparams& hyper, double mu,
                                          int workers = 1) {
  const int p = params.p();
  const Mat s = detail::supervised_cost_matrix(data, codes, dict, params,
                                               hyper, workers);
  ModelGrads g;
  g.dict_grad = Mat::Zero(dict.n(), dict.k());
  g.param_grad = DecisionParams::zeros(params.variant, dict.n(), dict.k(), p);

  for (int j = 0; j < data.m(); ++j) {
    const Vec x = data.signals.row(j).transpose();
    const Vec w = omega_weights(data.labels[j], s.row(j).transpose(), mu);
    for (int l = 1; l <= p; ++l) {
      const double wl = w[l - 1];
      if (wl == 0.0) continue;
      const Vec alpha = codes[j].col(l - 1);
      const Vec resid = x - dict.atoms * alpha;
      g.dict_grad.noalias() -=
          (2.0 * hyper.lambda0 * wl) * (resid * alpha.transpose());
      const Vec z = decision_values(x, alpha, params);
      const Vec gc = softmax_cost_grad(l, z);
      if (params.variant == DecisionVariant::Linear) {
        g.param_grad.weights.noalias() += wl * (alpha * gc.transpose());
      } else {
        for (int c = 0; c < p; ++c) {
          g.param_grad.filters[c].noalias() +=
              (wl * gc[c]) * (x * alpha.transpose());
        }
      }
      g.param_grad.biases.noalias() += wl * gc;
    }
  }

  const double two_l2 = 2.0 * hyper.lambda2;
  if (params.variant == DecisionVariant::Linear) {
    g.param_grad.weights.noalias() += two_l2 * params.weights;
  } else {
    for (int c = 0; c < p; ++c) {
      g.param_grad.filters[c].noalias() += two_l2 * params.filters[c];
    }
  }
  if (hyper.regularize_bias) {
    g.param_grad.biases.noalias() += two_l2 * params.biases;
  }
  return g;
}

namespace detail {

inline DecisionParams step_params(const DecisionParams& base, double scale,
                                  const DecisionParams& dir) {
  DecisionParams out = base;
  out.biases.noalias() += scale * dir.biases;
  if (base.variant == DecisionVariant::Linear) {
    out.weights.noalias() += scale * dir.weights;
  } else {
    for (std::size_t c = 0; c < out.filters.size(); ++c) {
      out.filters[c].noalias() += scale * dir.filters[c];
    }
  }
  return out;
}

inline double grads_squared_norm(const ModelGrads& g) {
  double s = g.dict_grad.squaredNorm() + g.param_grad.biases.squaredNorm();
  if (g.param_grad.variant == DecisionVariant::Linear) {
    s += g.param_grad.weights.squaredNorm();
  } else {
    for (const Mat& w : g.param_grad.filters) s += w.squaredNorm();
  }
  return s;
}

}  // namespace detail

struct UpdateResult {
  Dictionary dictionary;
  DecisionParams params;
  double objective = 0.0;
  bool improved = false;
  bool line_search_failed = false;
  int steps_taken = 0;
};

/// A few projected-gradient steps on (D, theta) at fixed codes, each step
/// halved until the mixed objective strictly decreases.  Momentum carries
/// the accepted step size to the next step (doubled once).
inline UpdateResult dictionary_update(const LabeledDataset& data,
                                      const std::vector<Mat>& codes,
                                      Dictionary dict, DecisionParams params,
                                      const Hyperparams& hyper, double mu,
                                      const UpdatePolicy& policy = {},
                                      int workers = 1) {
  require(policy.steps >= 1 && policy.max_halvings >= 1 &&
              policy.initial_step > 0.0,
          "dictionary_update: bad policy");
  UpdateResult out;
  out.objective =
      update_objective_parts(data, codes, dict, params, hyper, mu, workers)
          .mixed;
  out.dictionary = std::move(dict);
  out.params = std::move(params);

  double step = policy.initial_step;
  for (int t = 0; t < policy.steps; ++t) {
    const ModelGrads g = dictionary_update_grads(
        data, codes, out.dictionary, out.params, hyper, mu, workers);
    if (detail::grads_squared_norm(g) == 0.0) break;

    bool accepted = false;
    double eta = step;
    for (int h = 0; h <= policy.max_halvings; ++h, eta *= 0.5) {
      Dictionary d_try(out.dictionary.atoms - eta * g.dict_grad);
      project_columns(d_try.atoms);
      DecisionParams p_try = detail::step_params(out.params, -eta,
                                                 g.param_grad);
      const double obj_try =
          update_objective_parts(data, codes, d_try, p_try, hyper, mu,
                                 workers)
              .mixed;
      if (std::isfinite(obj_try) && obj_try < out.objective) {
        out.dictionary = std::move(d_try);
        out.params = std::move(p_try);
        out.objective = obj_try;
        out.improved = true;
        ++out.steps_taken;
        step = eta * 2.0;
        accepted = true;
        break;
      }
    }
    if (!accepted) {
      out.line_search_failed = true;
      break;
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Cost-scale calibration
// ---------------------------------------------------------------------------

struct RescaleResult {
  double gamma = 1.0;
  bool degenerate = false;
};

/// Pick gamma in [1e-4, 1e4] minimizing the summed discriminative cost of
/// the scaled rows gamma * S_j. by golden-section search on log gamma.
/// Rows with no spread between classes cannot determine a scale; when all
/// rows are flat the result is marked degenerate with gamma = 1.
inline RescaleResult rescale_lambda(const Mat& s_values,
                                    const std::vector<int>& labels) {
  require(s_values.rows() == static_cast<Eigen::Index>(labels.size()),
          "rescale_lambda: row count does not match label count");
  require(s_values.cols() >= 2, "rescale_lambda: need at least two classes");
  require(all_finite(s_values), "rescale_lambda: non-finite cost values");

  bool any_spread = false;
  for (int j = 0; j < s_values.rows(); ++j) {
    const double hi = s_values.row(j).maxCoeff();
    const double lo = s_values.row(j).minCoeff();
    if (hi - lo > 1e-12 * std::max(1.0, std::abs(hi))) {
      any_spread = true;
      break;
    }
  }
  if (!any_spread) return {1.0, true};

  const auto h = [&](double t) {
    const double gamma = std::exp(t);
    double total = 0.0;
    for (int j = 0; j < s_values.rows(); ++j) {
      total += residual_softmax_cost(labels[j],
                                     Vec(gamma * s_values.row(j).transpose()));
    }
    return total;
  };

  double a = std::log(1e-4), b = std::log(1e4);
  const double gr = (std::sqrt(5.0) - 1.0) / 2.0;
  double c = b - gr * (b - a), d = a + gr * (b - a);
  double fc = h(c), fd = h(d);
  for (int it = 0; it < 200 && b - a > 1e-6; ++it) {
    if (fc < fd) {
      b = d;
      d = c;
      fd = fc;
      c = b - gr * (b - a);
      fc = h(c);
    } else {
      a = c;
      c = d;
      fc = fd;
      d = a + gr * (b - a);
      fd = h(d);
    }
  }
  return {std::exp((a + b) / 2.0), false};
}

// ---------------------------------------------------------------------------
// Reconstructive baseline
// ---------------------------------------------------------------------------

namespace detail {

/// Reconstruction objective at fixed codes: ||X' - D C||_F^2.
inline double recon_fit(const Mat& xt, const Mat& atoms, const Mat& codes) {
  return (xt - atoms * codes).squaredNorm();
}

/// One pass of exact per-column minimization of ||E_c - d row||^2 over the
/// unit ball.  Never increases the objective.
inline void column_sweep(Mat& atoms, const Mat& xt, const Mat& codes) {
  Mat e = xt - atoms * codes;
  for (int c = 0; c < atoms.cols(); ++c) {
    const auto row = codes.row(c);
    const double rs = row.squaredNorm();
    if (rs == 0.0) continue;
    e.noalias() += atoms.col(c) * row;
    Vec d = (e * row.transpose()) / rs;
    const double norm = d.norm();
    if (norm > 1.0) d /= norm;
    if (norm > 0.0) atoms.col(c) = d;
    e.noalias() -= atoms.col(c) * row;
  }
}

}  // namespace detail

/// Classical dictionary learning: alternate lasso coding with a least-squares
/// dictionary update projected onto the unit ball, falling back to an exact
/// column sweep whenever the projected solve fails to descend.
inline Dictionary learn_reconstructive(const LabeledDataset& data,
                                       const Hyperparams& hyper,
                                       const TrainConfig& config,
                                       TrainTrace* trace = nullptr) {
  data.validate();
  hyper.validate();
  require(data.m() >= 1, "learn_reconstructive: empty dataset");

  const int n = data.n();
  const int k = hyper.k;
  const int m = data.m();
  Dictionary dict = init_dictionary(n, k, config.seed);
  const Mat xt = data.signals.transpose();  // n x m
  Mat codes = Mat::Zero(k, m);

  double prev = std::numeric_limits<double>::quiet_NaN();
  for (int it = 0; it < config.outer_iterations_per_mu; ++it) {
    parallel_for(static_cast<std::size_t>(m), config.workers,
                 [&](std::size_t j) {
                   const Vec warm = codes.col(static_cast<Eigen::Index>(j));
                   const auto res = reconstructive_code(
                       xt.col(static_cast<Eigen::Index>(j)), dict,
                       hyper.lambda1, hyper.solver, &warm);
                   codes.col(static_cast<Eigen::Index>(j)) = res.alpha;
                 });

    // Least-squares update D G = B, projected; keep only if it descends.
    Mat gram = codes * codes.transpose();
    gram.diagonal().array() += 1e-10;
    const Mat b = xt * codes.transpose();
    Mat d_try = gram.ldlt().solve(b.transpose()).transpose();
    project_columns(d_try);
    if (all_finite(d_try) &&
        detail::recon_fit(xt, d_try, codes) <=
            detail::recon_fit(xt, dict.atoms, codes)) {
      dict.atoms = std::move(d_try);
    } else {
      detail::column_sweep(dict.atoms, xt, codes);
    }

    const double objective = detail::recon_fit(xt, dict.atoms, codes) +
                             hyper.lambda1 * codes.lpNorm<1>();
    if (!std::isfinite(objective)) {
      throw train_abort("learn_reconstructive: non-finite objective");
    }
    if (trace != nullptr) {
      TraceRecord rec;
      rec.mu_index = 0;
      rec.mu = 0.0;
      rec.iteration = it;
      rec.mixed_objective = objective;
      rec.generative_term = objective;
      rec.discriminative_term = 0.0;
      double nnz = 0.0;
      for (int j = 0; j < m; ++j) nnz += count_nonzeros(codes.col(j));
      rec.mean_sparsity = nnz / (double(k) * m);
      trace->records.push_back(rec);
    }
    if (std::isfinite(prev) &&
        std::abs(objective - prev) <=
            config.objective_rel_tol * std::max(1.0, std::abs(prev))) {
      break;
    }
    prev = objective;
  }
  return dict;
}

// ---------------------------------------------------------------------------
// Posterior classifier (multinomial ridge regression on features)
// ---------------------------------------------------------------------------

namespace detail {

/// Minimize sum_j softmax_cost(i_j, Theta' phi_j) + lambda2 * ||Theta_reg||^2
/// over Theta (d x p).  The last feature row is the bias slot; it joins the
/// penalty only when regularize_last is set.  Newton when the packed size
/// allows a dense solve, otherwise accelerated gradient with restarts.
inline Mat fit_multinomial_ridge(const Mat& features,
                                 const std::vector<int>& labels, int p,
                                 double lambda2, bool regularize_last,
                                 double tol = 1e-6, int max_iter = 200) {
  const int d = static_cast<int>(features.rows());
  const int m = static_cast<int>(features.cols());
  require(m == static_cast<int>(labels.size()),
          "fit_multinomial_ridge: feature/label count mismatch");
  require(p >= 2, "fit_multinomial_ridge: need at least two classes");

  const auto penalty_weight = [&](int r) {
    return (regularize_last || r + 1 < d) ? lambda2 : 0.0;
  };
  const auto value = [&](const Mat& theta) {
    double v = 0.0;
    for (int j = 0; j < m; ++j) {
      v += softmax_cost(labels[j], Vec(theta.transpose() * features.col(j)));
    }
    for (int r = 0; r < d; ++r) {
      v += penalty_weight(r) * theta.row(r).squaredNorm();
    }
    return v;
  };
  const auto gradient = [&](const Mat& theta) {
    Mat g = Mat::Zero(d, p);
    for (int j = 0; j < m; ++j) {
      const Vec gc =
          softmax_cost_grad(labels[j], Vec(theta.transpose() * features.col(j)));
      g.noalias() += features.col(j) * gc.transpose();
    }
    for (int r = 0; r < d; ++r) {
      g.row(r) += 2.0 * penalty_weight(r) * theta.row(r);
    }
    return g;
  };

  Mat theta = Mat::Zero(d, p);
  const int packed = d * p;
  if (packed <= 1200) {
    // Damped Newton on the packed column-major parameter vector.  A tiny
    // uniform ridge keeps the system solvable along the per-score shift
    // direction the softmax cannot see.
    double fx = value(theta);
    for (int it = 0; it < max_iter; ++it) {
      const Mat g = gradient(theta);
      if (g.norm() <= tol) break;
      Mat h = Mat::Zero(packed, packed);
      for (int j = 0; j < m; ++j) {
        const Vec q =
            stable_softmax(Vec(theta.transpose() * features.col(j)));
        const Mat outer = features.col(j) * features.col(j).transpose();
        for (int l1 = 0; l1 < p; ++l1) {
          for (int l2 = 0; l2 < p; ++l2) {
            const double mll = (l1 == l2 ? q[l1] : 0.0) - q[l1] * q[l2];
            if (mll != 0.0) {
              h.block(l1 * d, l2 * d, d, d).noalias() += mll * outer;
            }
          }
        }
      }
      for (int l = 0; l < p; ++l) {
        for (int r = 0; r < d; ++r) {
          h(l * d + r, l * d + r) += 2.0 * penalty_weight(r) + 1e-10;
        }
      }
      const Eigen::Map<const Vec> gv(g.data(), packed);
      const Vec dir = h.ldlt().solve(gv);
      const Eigen::Map<const Mat> dirm(dir.data(), d, p);
      const double slope = gv.dot(dir);
      double s = 1.0;
      bool moved = false;
      for (int hlv = 0; hlv < 60; ++hlv, s *= 0.5) {
        const Mat cand = theta - s * dirm;
        const double fc = value(cand);
        if (std::isfinite(fc) && fc <= fx - 1e-4 * s * slope) {
          theta = cand;
          fx = fc;
          moved = true;
          break;
        }
      }
      if (!moved) break;
    }
    return theta;
  }

  // Accelerated gradient with adaptive curvature and restart on increase.
  Mat x = theta, x_prev = theta;
  double fx = value(x);
  double lip = 1.0;
  double t = 1.0, t_prev = 1.0;
  const int cap = std::max(max_iter, 20000);
  for (int it = 0; it < cap; ++it) {
    const Mat y = x + ((t_prev - 1.0) / t) * (x - x_prev);
    const Mat gy = gradient(y);
    if (gradient(x).norm() <= tol) break;
    const double fy = value(y);
    lip *= 0.7;
    Mat cand;
    double fc = 0.0;
    for (int bt = 0; bt < 200; ++bt) {
      cand = y - (1.0 / lip) * gy;
      fc = value(cand);
      if (fc <= fy - gy.squaredNorm() / (2.0 * lip)) break;
      lip *= 2.0;
    }
    if (fc > fx) {
      // Momentum overshot; restart from the best point.
      t = t_prev = 1.0;
      x_prev = x;
      const Mat gx = gradient(x);
      for (int bt = 0; bt < 200; ++bt) {
        cand = x - (1.0 / lip) * gx;
        fc = value(cand);
        if (fc <= fx - gx.squaredNorm() / (2.0 * lip)) break;
        lip *= 2.0;
      }
    }
    x_prev = x;
    x = cand;
    fx = fc;
    t_prev = t;
    t = (1.0 + std::sqrt(1.0 + 4.0 * t * t)) / 2.0;
  }
  return x;
}

}  // namespace detail

/// Fit per-class decision parameters on reconstructive codes of the training
/// samples, leaving the dictionary untouched.  With the linear variant this
/// is multinomial ridge regression on [alpha; 1]; the bilinear variant uses
/// the flattened outer products x alpha'.
inline DecisionParams fit_posterior_classifier(const LabeledDataset& data,
                                               const Dictionary& dict,
                                               const Hyperparams& hyper,
                                               DecisionVariant variant,
                                               int workers = 1) {
  data.validate();
  require(data.n() == dict.n(),
          "fit_posterior_classifier: signal length does not match dictionary");
  const int p = data.p();
  if (p < 2) {
    throw data_error("fit_posterior_classifier: need at least two classes");
  }
  const int k = dict.k();
  const int n = dict.n();
  const int m = data.m();

  Mat codes(k, m);
  parallel_for(static_cast<std::size_t>(m), workers, [&](std::size_t j) {
    const auto res =
        reconstructive_code(data.signals.row(static_cast<Eigen::Index>(j))
                                .transpose(),
                            dict, hyper.lambda1, hyper.solver);
    codes.col(static_cast<Eigen::Index>(j)) = res.alpha;
  });

  const int d = variant == DecisionVariant::Linear ? k + 1 : n * k + 1;
  Mat features(d, m);
  for (int j = 0; j < m; ++j) {
    if (variant == DecisionVariant::Linear) {
      features.col(j).head(k) = codes.col(j);
    } else {
      const Mat outer =
          data.signals.row(j).transpose() * codes.col(j).transpose();
      features.col(j).head(n * k) =
          Eigen::Map<const Vec>(outer.data(), n * k);
    }
    features(d - 1, j) = 1.0;
  }

  const Mat theta =
      detail::fit_multinomial_ridge(features, data.labels, p, hyper.lambda2,
                                    hyper.regularize_bias);

  DecisionParams params = DecisionParams::zeros(variant, n, k, p);
  for (int l = 0; l < p; ++l) {
    if (variant == DecisionVariant::Linear) {
      params.weights.col(l) = theta.col(l).head(k);
    } else {
      params.filters[l] =
          Eigen::Map<const Mat>(theta.col(l).head(n * k).data(), n, k);
    }
    params.biases[l] = theta(d - 1, l);
  }
  return params;
}

// ---------------------------------------------------------------------------
// Full training loop
// ---------------------------------------------------------------------------

struct TrainResult {
  SdlModel model;
  TrainTrace trace;
};

namespace detail {

/// Residual-rule error of (dict, params) on a dataset, with warm-started
/// per-class codes cached across calls.
inline double residual_rule_error(const LabeledDataset& ds,
                                  const Dictionary& dict,
                                  const DecisionParams& params,
                                  const Hyperparams& hyper, int workers,
                                  std::vector<Mat>& warm) {
  if (ds.m() == 0) return std::numeric_limits<double>::quiet_NaN();
  const int p = params.p();
  std::vector<int> predicted(ds.m(), 0);
  parallel_for(static_cast<std::size_t>(ds.m()), workers,
               [&](std::size_t j) {
                 const Vec x =
                     ds.signals.row(static_cast<Eigen::Index>(j)).transpose();
                 double best = std::numeric_limits<double>::infinity();
                 int arg = 1;
                 for (int l = 1; l <= p; ++l) {
                   const Vec w = warm[j].col(l - 1);
                   const auto res =
                       supervised_code(x, l, dict, params, hyper, &w);
                   warm[j].col(l - 1) = res.alpha;
                   if (res.objective < best) {
                     best = res.objective;
                     arg = l;
                   }
                 }
                 predicted[j] = arg;
               });
  int wrong = 0;
  for (int j = 0; j < ds.m(); ++j) {
    if (predicted[j] != ds.labels[j]) ++wrong;
  }
  return double(wrong) / ds.m();
}

}  // namespace detail

/// Block coordinate descent over the mu schedule: supervised coding sweeps
/// alternating with projected-gradient updates of (D, theta).  With a
/// nonempty validation set the returned model is the stage snapshot with the
/// lowest validation error (earliest stage on ties); otherwise the last
/// stage wins.  Throws train_abort_with_trace if the objective leaves the
/// finite range.
inline TrainResult train_sdl(const LabeledDataset& data,
                             const LabeledDataset& validation,
                             const TrainConfig& config) {
  data.validate();
  config.validate();
  require(data.m() >= 1, "train_sdl: empty dataset");
  const int p = data.p();
  if (p < 2) throw data_error("train_sdl: need at least two classes");
  {
    const auto counts = data.class_counts();
    for (int c = 1; c <= p; ++c) {
      if (counts[c - 1] == 0) {
        throw data_error("train_sdl: class " + std::to_string(c) + " (\"" +
                         data.class_labels[c - 1] + "\") has no samples");
      }
    }
  }
  if (validation.m() > 0) {
    validation.validate();
    if (validation.n() != data.n() || validation.p() != data.p()) {
      throw data_error(
          "train_sdl: validation set shape does not match training set");
    }
  }

  Hyperparams hyper = config.hyper;
  const int n = data.n();
  const int k = hyper.k;
  const int m = data.m();
  TrainTrace trace;

  if (config.mode == TrainMode::Rec) {
    const Dictionary dict = learn_reconstructive(data, hyper, config, &trace);
    SdlModel model;
    model.dictionary = dict;
    model.params = fit_posterior_classifier(data, dict, hyper, config.variant,
                                            config.workers);
    model.hyper = hyper;
    model.class_labels = data.class_labels;
    for (const auto& rec : trace.records) {
      model.trace.objective.push_back(rec.mixed_objective);
    }
    model.trace.chosen_mu = 0.0;
    model.trace.present = true;
    trace.chosen_mu = 0.0;
    if (validation.m() > 0) {
      std::vector<Mat> warm(validation.m(), Mat::Zero(k, p));
      trace.chosen_validation_error = detail::residual_rule_error(
          validation, model.dictionary, model.params, hyper, config.workers,
          warm);
    }
    model.validate();
    return {std::move(model), std::move(trace)};
  }

  const std::vector<double> schedule = config.mode == TrainMode::SdlG
                                           ? std::vector<double>{0.0}
                                           : hyper.mu_schedule;

  Dictionary dict = init_dictionary(n, k, config.seed);
  DecisionParams params = DecisionParams::zeros(config.variant, n, k, p);
  std::vector<Mat> codes(m, Mat::Zero(k, p));
  std::vector<Mat> val_warm(validation.m(), Mat::Zero(k, p));

  struct Snapshot {
    Dictionary dict;
    DecisionParams params;
    Hyperparams hyper;
    double mu = 0.0;
    double val_error = std::numeric_limits<double>::quiet_NaN();
  };
  Snapshot best;
  bool have_best = false;

  Mat s_mat(m, p);
  for (std::size_t mi = 0; mi < schedule.size(); ++mi) {
    const double mu = schedule[mi];
    double prev = std::numeric_limits<double>::quiet_NaN();
    for (int it = 0; it < config.outer_iterations_per_mu; ++it) {
      try {
        parallel_for(static_cast<std::size_t>(m), config.workers,
                     [&](std::size_t j) {
                       const Vec x =
                           data.signals.row(static_cast<Eigen::Index>(j))
                               .transpose();
                       for (int l = 1; l <= p; ++l) {
                         const Vec w = codes[j].col(l - 1);
                         const auto res =
                             supervised_code(x, l, dict, params, hyper, &w);
                         codes[j].col(l - 1) = res.alpha;
                         s_mat(static_cast<Eigen::Index>(j), l - 1) =
                             res.objective;
                       }
                     });
      } catch (const std::exception& e) {
        throw train_abort_with_trace(
            std::string("train_sdl: coding sweep failed: ") + e.what(),
            std::move(trace));
      }
      if (!s_mat.allFinite()) {
        throw train_abort_with_trace("train_sdl: non-finite coding cost",
                                     std::move(trace));
      }

      double gamma_applied = std::numeric_limits<double>::quiet_NaN();
      if (mi == 0 && it < config.gamma_rescale_iterations) {
        const RescaleResult rr = rescale_lambda(s_mat, data.labels);
        if (!rr.degenerate && std::abs(rr.gamma - 1.0) > 1e-9) {
          hyper.scale_lambdas(rr.gamma);
          gamma_applied = rr.gamma;
        }
      }

      const UpdateResult ur =
          dictionary_update(data, codes, std::move(dict), std::move(params),
                            hyper, mu, config.update, config.workers);
      dict = ur.dictionary;
      params = ur.params;

      const ObjectiveParts parts = update_objective_parts(
          data, codes, dict, params, hyper, mu, config.workers);
      if (!std::isfinite(parts.mixed)) {
        throw train_abort_with_trace("train_sdl: non-finite objective",
                                     std::move(trace));
      }

      TraceRecord rec;
      rec.mu_index = static_cast<int>(mi);
      rec.mu = mu;
      rec.iteration = it;
      rec.mixed_objective = parts.mixed;
      rec.generative_term = parts.generative;
      rec.discriminative_term = parts.discriminative;
      double nnz = 0.0;
      for (int j = 0; j < m; ++j) {
        nnz += count_nonzeros(codes[j].col(data.labels[j] - 1));
      }
      rec.mean_sparsity = nnz / (double(k) * m);
      rec.gamma = gamma_applied;
      if (config.validate_each_iteration && validation.m() > 0) {
        rec.validation_error = detail::residual_rule_error(
            validation, dict, params, hyper, config.workers, val_warm);
      }
      trace.records.push_back(rec);

      if (std::isnan(gamma_applied) && std::isfinite(prev) &&
          std::abs(parts.mixed - prev) <=
              config.objective_rel_tol * std::max(1.0, std::abs(prev))) {
        break;
      }
      prev = std::isnan(gamma_applied)
                 ? parts.mixed
                 : std::numeric_limits<double>::quiet_NaN();
    }

    if (validation.m() > 0) {
      double ve = trace.records.empty()
                      ? std::numeric_limits<double>::quiet_NaN()
                      : trace.records.back().validation_error;
      if (std::isnan(ve)) {
        ve = detail::residual_rule_error(validation, dict, params, hyper,
                                         config.workers, val_warm);
        if (!trace.records.empty()) {
          trace.records.back().validation_error = ve;
        }
      }
      if (!have_best || ve < best.val_error) {
        best = {dict, params, hyper, mu, ve};
        have_best = true;
      }
    } else {
      best = {dict, params, hyper, mu,
              std::numeric_limits<double>::quiet_NaN()};
      have_best = true;
    }
  }

  SdlModel model;
  model.dictionary = std::move(best.dict);
  model.params = std::move(best.params);
  model.hyper = std::move(best.hyper);
  model.class_labels = data.class_labels;
  for (const auto& rec : trace.records) {
    model.trace.objective.push_back(rec.mixed_objective);
  }
  model.trace.chosen_mu = best.mu;
  model.trace.present = true;
  trace.chosen_mu = best.mu;
  trace.chosen_validation_error = best.val_error;
  model.validate();
  return {std::move(model), std::move(trace)};
}

/// Single-dataset convenience overload: no validation set, last stage wins.
inline TrainResult train_sdl(const LabeledDataset& data,
                             const TrainConfig& config) {
  LabeledDataset empty;
  empty.class_labels = data.class_labels;
  empty.signals.resize(0, data.n());
  return train_sdl(data, empty, config);
}

}  // namespace sdl
