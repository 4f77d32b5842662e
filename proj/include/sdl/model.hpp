#pragma once

#include <sdl/base.hpp>

#include <optional>
#include <utility>

namespace sdl {

// ---------------------------------------------------------------------------
// Domain types
// ---------------------------------------------------------------------------

/// Shared dictionary: n x k matrix of column atoms, each with l2 norm <= 1.
struct Dictionary {
  Mat atoms;  // n x k

  Dictionary() = default;
  explicit Dictionary(Mat a) : atoms(std::move(a)) {}

  int n() const { return static_cast<int>(atoms.rows()); }
  int k() const { return static_cast<int>(atoms.cols()); }

  static constexpr double column_norm_slack = 1e-9;

  void validate() const {
    require(atoms.size() > 0, "Dictionary: empty atom matrix");
    require(all_finite(atoms), "Dictionary: non-finite entries");
    for (int c = 0; c < k(); ++c) {
      require(atoms.col(c).norm() <= 1.0 + column_norm_slack,
              "Dictionary: column " + std::to_string(c + 1) +
                  " exceeds unit l2 norm");
    }
  }
};

enum class DecisionVariant { Linear, Bilinear };

inline const char* to_string(DecisionVariant v) {
  return v == DecisionVariant::Linear ? "linear" : "bilinear";
}

/// Per-class decision function parameters theta.
///
/// Linear:    g_i(x, alpha) = w_i . alpha + b_i       (weights column i = w_i)
/// Bilinear:  g_i(x, alpha) = x' W_i alpha + b_i      (filters[i-1] = W_i)
///
/// Class indices are 1-based throughout the library, matching dataset labels.
struct DecisionParams {
  DecisionVariant variant = DecisionVariant::Linear;
  Mat weights;               // Linear: k x p
  std::vector<Mat> filters;  // Bilinear: p matrices, each n x k
  Vec biases;                // p

  int p() const { return static_cast<int>(biases.size()); }

  static DecisionParams zeros(DecisionVariant variant, int n, int k, int p) {
    require(p >= 2, "DecisionParams: need at least two classes");
    require(n >= 1 && k >= 1, "DecisionParams: bad dimensions");
    DecisionParams out;
    out.variant = variant;
    out.biases = Vec::Zero(p);
    if (variant == DecisionVariant::Linear) {
      out.weights = Mat::Zero(k, p);
    } else {
      out.filters.assign(p, Mat::Zero(n, k));
    }
    return out;
  }

  void validate(int n, int k) const {
    require(p() >= 2, "DecisionParams: need at least two classes");
    require(biases.allFinite(), "DecisionParams: non-finite biases");
    if (variant == DecisionVariant::Linear) {
      require(weights.rows() == k && weights.cols() == p(),
              "DecisionParams: weight matrix must be k x p");
      require(all_finite(weights), "DecisionParams: non-finite weights");
    } else {
      require(static_cast<int>(filters.size()) == p(),
              "DecisionParams: need one filter per class");
      for (const Mat& w : filters) {
        require(w.rows() == n && w.cols() == k,
                "DecisionParams: filter matrix must be n x k");
        require(all_finite(w), "DecisionParams: non-finite filter");
      }
    }
  }

  /// Squared l2 norm of all parameters, optionally excluding the biases.
  double squared_norm(bool include_bias) const {
    double s = include_bias ? biases.squaredNorm() : 0.0;
    if (variant == DecisionVariant::Linear) {
      s += weights.squaredNorm();
    } else {
      for (const Mat& w : filters) s += w.squaredNorm();
    }
    return s;
  }
};

struct SolverOptions {
  double tol = 1e-6;
  int max_iter = 2000;
  /// Recompute the two-class curvature bound at every iterate instead of
  /// using the class-count bound (only meaningful when p == 2).
  bool tight_two_class_bound = false;
};

/// Scalar knobs of the model.  kappa = lambda1 / lambda0 is the canonical
/// sparsity setting; set_kappa keeps the pair consistent.
struct Hyperparams {
  double lambda0 = 1.0;
  double lambda1 = 0.15;
  double lambda2 = 1e-4;
  double kappa = 0.15;
  std::vector<double> mu_schedule = default_mu_schedule();
  int k = 32;
  SolverOptions solver;
  bool regularize_bias = true;

  static std::vector<double> default_mu_schedule() {
    std::vector<double> s;
    for (int i = 0; i <= 10; ++i) s.push_back(0.1 * i);
    return s;
  }

  void set_kappa(double new_kappa) {
    require(new_kappa >= 0.0, "Hyperparams: kappa must be nonnegative");
    kappa = new_kappa;
    lambda1 = kappa * lambda0;
  }

  /// Rescale (lambda0, lambda1) jointly; kappa is unchanged.
  void scale_lambdas(double gamma) {
    require(gamma > 0.0, "Hyperparams: scale factor must be positive");
    lambda0 *= gamma;
    lambda1 *= gamma;
  }

  void validate() const {
    require(lambda0 >= 0.0 && lambda1 >= 0.0 && lambda2 >= 0.0 && kappa >= 0.0,
            "Hyperparams: negative regularization weight");
    require(k >= 1, "Hyperparams: dictionary size must be positive");
    require(solver.tol > 0.0 && solver.max_iter > 0,
            "Hyperparams: bad solver options");
    require(!mu_schedule.empty(), "Hyperparams: empty mu schedule");
    require(mu_schedule.front() >= 0.0 && mu_schedule.back() <= 1.0,
            "Hyperparams: mu schedule must lie in [0, 1]");
    for (std::size_t i = 1; i < mu_schedule.size(); ++i) {
      require(mu_schedule[i] >= mu_schedule[i - 1],
              "Hyperparams: mu schedule must be nondecreasing");
    }
    require(std::abs(lambda1 - kappa * lambda0) <=
                1e-12 * std::max(1.0, lambda1),
            "Hyperparams: lambda1 inconsistent with kappa * lambda0");
  }
};

/// Objective values per completed outer iteration plus the mixing value the
/// returned snapshot was taken at.
struct TrainingSummary {
  std::vector<double> objective;
  double chosen_mu = 0.0;
  bool present = false;
};

/// A trained model: dictionary, decision parameters and the settings they
/// were produced under.
struct SdlModel {
  Dictionary dictionary;
  DecisionParams params;
  Hyperparams hyper;
  std::vector<std::string> class_labels;
  TrainingSummary trace;

  int n() const { return dictionary.n(); }
  int k() const { return dictionary.k(); }
  int p() const { return params.p(); }

  void validate() const {
    dictionary.validate();
    params.validate(n(), k());
    hyper.validate();
    require(static_cast<int>(class_labels.size()) == p(),
            "SdlModel: class label count must match class count");
  }
};

// ---------------------------------------------------------------------------
// Softmax costs
// ---------------------------------------------------------------------------

namespace detail {

inline void check_class_index(int i, int p) {
  require(i >= 1 && i <= p, "class index " + std::to_string(i) +
                                " out of range [1, " + std::to_string(p) + "]");
}

/// Softmax probabilities with max-shift, exact unit sum.
inline Vec stable_softmax(const Vec& scores) {
  const double shift = scores.maxCoeff();
  Vec q = (scores.array() - shift).exp();
  q /= q.sum();
  return q;
}

}  // namespace detail

/// Multiclass logistic cost on scores: log sum_j exp(scores_j - scores_i).
/// Small when class i's score dominates; equals log p on equal scores.
inline double softmax_cost(int i, const Vec& scores) {
  detail::check_class_index(i, static_cast<int>(scores.size()));
  require(scores.allFinite(), "softmax_cost: non-finite scores");
  // Grouping (shift - scores_i) first keeps equal scores exact even when the
  // common value is large; shift + log(sum) - scores_i would round first.
  const double shift = scores.maxCoeff();
  const double log_sum = std::log((scores.array() - shift).exp().sum());
  return log_sum + (shift - scores[i - 1]);
}

/// Gradient of softmax_cost in its score argument: softmax(scores) - e_i.
inline Vec softmax_cost_grad(int i, const Vec& scores) {
  detail::check_class_index(i, static_cast<int>(scores.size()));
  require(scores.allFinite(), "softmax_cost_grad: non-finite scores");
  Vec g = detail::stable_softmax(scores);
  g[i - 1] -= 1.0;
  return g;
}

/// Discriminative cost on per-class residual values, where *smaller* means
/// "belongs".  Equals the softmax negative log-likelihood with logits
/// -costs: log sum_l exp(costs_i - costs_l).  Small when class i's residual
/// is the smallest, which is the orientation the argmin classification rule
/// needs.
inline double residual_softmax_cost(int i, const Vec& costs) {
  return softmax_cost(i, -costs);
}

/// Gradient of residual_softmax_cost in the residual vector:
/// e_i - softmax(-costs).
inline Vec residual_softmax_grad(int i, const Vec& costs) {
  return -softmax_cost_grad(i, -costs);
}

// ---------------------------------------------------------------------------
// Decision-function evaluation
// ---------------------------------------------------------------------------

/// All p decision values g_i(x, alpha) under the active variant.
inline Vec decision_values(const Vec& x, const Vec& alpha,
                           const DecisionParams& params) {
  const int p = params.p();
  Vec g(p);
  if (params.variant == DecisionVariant::Linear) {
    require(params.weights.rows() == alpha.size(),
            "decision_values: alpha length does not match weight rows");
    g = params.weights.transpose() * alpha + params.biases;
  } else {
    for (int c = 0; c < p; ++c) {
      const Mat& w = params.filters[c];
      require(w.rows() == x.size() && w.cols() == alpha.size(),
              "decision_values: filter dimensions do not match inputs");
      g[c] = x.dot(w * alpha) + params.biases[c];
    }
  }
  return g;
}

/// For fixed x the decision values are affine in alpha: g = A' alpha + b.
struct AffineScores {
  Mat A;  // k x p
  Vec b;  // p
};

/// Reduce the decision functions at signal x to their affine form.
/// Linear: A = weights.  Bilinear: column i of A equals W_i' x.
inline AffineScores affine_reduction(const Vec& x,
                                     const DecisionParams& params) {
  AffineScores out;
  out.b = params.biases;
  if (params.variant == DecisionVariant::Linear) {
    out.A = params.weights;
  } else {
    const int p = params.p();
    const int k = static_cast<int>(params.filters.front().cols());
    require(params.filters.front().rows() == x.size(),
            "affine_reduction: signal length does not match filter rows");
    out.A.resize(k, p);
    for (int c = 0; c < p; ++c) {
      out.A.col(c) = params.filters[c].transpose() * x;
    }
  }
  return out;
}

}  // namespace sdl
