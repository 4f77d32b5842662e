#pragma once

#include <sdl/sdl.hpp>

namespace sdl_test {

using namespace sdl;

inline double rel_inf_err(const Vec& analytic, const Vec& reference) {
  return (analytic - reference).lpNorm<Eigen::Infinity>() /
         std::max(1.0, analytic.lpNorm<Eigen::Infinity>());
}

/// Central finite differences of a scalar functional, coordinate-scaled step.
template <typename F>
Vec fd_gradient(F&& f, const Vec& x, double h_scale = 5e-6) {
  Vec g(x.size());
  for (int i = 0; i < x.size(); ++i) {
    const double h = h_scale * std::max(1.0, std::abs(x[i]));
    Vec xp = x, xm = x;
    xp[i] += h;
    xm[i] -= h;
    g[i] = (f(xp) - f(xm)) / (2.0 * h);
  }
  return g;
}

/// Symmetrized finite-difference Hessian built from an analytic gradient.
template <typename G>
Mat fd_hessian(G&& grad, const Vec& x, double h = 1e-5) {
  const int n = static_cast<int>(x.size());
  Mat hm(n, n);
  for (int i = 0; i < n; ++i) {
    Vec xp = x, xm = x;
    xp[i] += h;
    xm[i] -= h;
    hm.col(i) = (grad(xp) - grad(xm)) / (2.0 * h);
  }
  return (hm + hm.transpose()) / 2.0;
}

/// Largest absolute eigenvalue through Eigen's symmetric eigensolver, kept
/// independent of the library's power iteration.
inline double eig_spectral_norm(const Mat& s) {
  Eigen::SelfAdjointEigenSolver<Mat> es((s + s.transpose()) / 2.0);
  return es.eigenvalues().cwiseAbs().maxCoeff();
}

// ---------------------------------------------------------------------------
// Exhaustive lasso oracle: minimize w_r ||x - D a||^2 + t ||a||_1 by solving
// the stationarity system of every sign pattern and keeping the best
// candidate.  The true minimizer's pattern is among them, so the minimum
// over candidates is the global optimum.  Only for small k (3^k patterns).
// ---------------------------------------------------------------------------

struct LassoOracle {
  Vec alpha;
  double objective = std::numeric_limits<double>::infinity();
};

inline double lasso_objective(const Vec& a, const Vec& x, const Mat& d,
                              double w_r, double t) {
  return w_r * (x - d * a).squaredNorm() + t * a.lpNorm<1>();
}

inline LassoOracle lasso_enumeration_oracle(const Vec& x, const Mat& d,
                                            double w_r, double t) {
  const int k = static_cast<int>(d.cols());
  if (k > 12) throw std::invalid_argument("oracle: k too large to enumerate");
  LassoOracle best;
  best.alpha = Vec::Zero(k);
  best.objective = lasso_objective(best.alpha, x, d, w_r, t);

  std::vector<int> pattern(k, 0);
  long total = 1;
  for (int i = 0; i < k; ++i) total *= 3;
  for (long code = 0; code < total; ++code) {
    long rest = code;
    int support = 0;
    for (int i = 0; i < k; ++i) {
      pattern[i] = static_cast<int>(rest % 3) - 1;  // -1, 0, +1
      rest /= 3;
      if (pattern[i] != 0) ++support;
    }
    if (support == 0) continue;  // zero candidate handled above
    Mat ds(d.rows(), support);
    Vec signs(support);
    std::vector<int> idx(support);
    int c = 0;
    for (int i = 0; i < k; ++i) {
      if (pattern[i] != 0) {
        ds.col(c) = d.col(i);
        signs[c] = pattern[i];
        idx[c] = i;
        ++c;
      }
    }
    const Mat gram = 2.0 * w_r * (ds.transpose() * ds);
    const Vec rhs = 2.0 * w_r * (ds.transpose() * x) - t * signs;
    const Vec as = gram.fullPivLu().solve(rhs);
    bool consistent = gram.fullPivLu().isInvertible();
    for (int i = 0; i < support && consistent; ++i) {
      if (as[i] * signs[i] <= 0.0) consistent = false;
    }
    if (!consistent) continue;
    Vec a = Vec::Zero(k);
    for (int i = 0; i < support; ++i) a[idx[i]] = as[i];
    const double obj = lasso_objective(a, x, d, w_r, t);
    if (obj < best.objective) {
      best.objective = obj;
      best.alpha = a;
    }
  }
  return best;
}

// ---------------------------------------------------------------------------
// Random instances
// ---------------------------------------------------------------------------

inline Vec random_vec(Rng& rng, int n, double scale = 1.0) {
  Vec v(n);
  for (int i = 0; i < n; ++i) v[i] = scale * rng.gaussian();
  return v;
}

inline Mat random_matrix(Rng& rng, int r, int c, double scale = 1.0) {
  Mat m(r, c);
  for (int j = 0; j < c; ++j) {
    for (int i = 0; i < r; ++i) m(i, j) = scale * rng.gaussian();
  }
  return m;
}

inline Dictionary random_dictionary(Rng& rng, int n, int k) {
  Mat atoms = random_matrix(rng, n, k);
  for (int c = 0; c < k; ++c) atoms.col(c).normalize();
  return Dictionary(std::move(atoms));
}

inline DecisionParams random_params(Rng& rng, DecisionVariant variant, int n,
                                    int k, int p, double scale = 0.7) {
  DecisionParams params = DecisionParams::zeros(variant, n, k, p);
  params.biases = random_vec(rng, p, scale);
  if (variant == DecisionVariant::Linear) {
    params.weights = random_matrix(rng, k, p, scale);
  } else {
    for (int c = 0; c < p; ++c) {
      params.filters[c] = random_matrix(rng, n, k, scale);
    }
  }
  return params;
}

// ---------------------------------------------------------------------------
// Synthetic task generators
// ---------------------------------------------------------------------------

struct SyntheticSplits {
  LabeledDataset train;
  LabeledDataset validation;
  LabeledDataset test;
  Dictionary true_dict;
};

/// Two classes drawn from one shared dictionary with overlapping but
/// class-dependent coefficient supports and positive coefficients.  Signals
/// are scaled to unit norm.
inline SyntheticSplits make_shared_support_data(std::uint64_t seed,
                                                int train_per_class,
                                                int val_per_class,
                                                int test_per_class,
                                                double noise = 0.12) {
  const int n = 16;
  const int k_true = 8;
  Rng dict_rng(seed * 1000003ull + 17);
  Dictionary dict = random_dictionary(dict_rng, n, k_true);

  const std::vector<std::vector<int>> supports = {{0, 1, 2, 3, 4},
                                                  {3, 4, 5, 6, 7}};
  Rng rng(seed);
  const auto sample_class = [&](int cls) {
    const auto& sup = supports[cls - 1];
    std::vector<int> pool = sup;
    rng.shuffle(pool);
    Vec x = Vec::Zero(n);
    for (int t = 0; t < 3; ++t) {
      const double coeff = 0.5 + 0.7 * rng.uniform();
      x += coeff * dict.atoms.col(pool[t]);
    }
    for (int i = 0; i < n; ++i) x[i] += noise * rng.gaussian();
    return x;
  };

  const auto build = [&](int per_class) {
    LabeledDataset ds;
    ds.class_labels = {"one", "two"};
    ds.signals.resize(2 * per_class, n);
    ds.labels.resize(2 * per_class);
    for (int j = 0; j < 2 * per_class; ++j) {
      const int cls = (j % 2) + 1;
      ds.signals.row(j) = sample_class(cls).transpose();
      ds.labels[j] = cls;
    }
    return normalize_unit(ds);
  };

  SyntheticSplits out;
  out.train = build(train_per_class);
  out.validation = val_per_class > 0 ? build(val_per_class) : LabeledDataset{};
  if (val_per_class == 0) {
    out.validation.class_labels = out.train.class_labels;
    out.validation.signals.resize(0, n);
  }
  out.test = build(test_per_class);
  out.true_dict = std::move(dict);
  return out;
}

/// Class equals the parity of two coefficient signs on orthogonal atoms, so
/// no decision rule linear in the code can separate the classes, while a
/// bilinear form x' W alpha can read the product of signs directly.
inline SyntheticSplits make_xor_data(std::uint64_t seed, int train_per_class,
                                     int val_per_class, int test_per_class,
                                     double noise = 0.05) {
  const int n = 16;
  Rng dict_rng(seed * 2000003ull + 29);
  Mat basis = random_matrix(dict_rng, n, 2);
  // Orthonormal pair via Gram-Schmidt.
  basis.col(0).normalize();
  basis.col(1) -= basis.col(0).dot(basis.col(1)) * basis.col(0);
  basis.col(1).normalize();
  Dictionary dict(basis);

  Rng rng(seed);
  const auto build = [&](int per_class) {
    LabeledDataset ds;
    ds.class_labels = {"same", "mixed"};
    std::vector<Vec> rows;
    std::vector<int> labels;
    // Rejection-free: draw sign pairs until each class has its quota.
    std::vector<int> want = {per_class, per_class};
    while (want[0] > 0 || want[1] > 0) {
      const double s1 = rng.uniform() < 0.5 ? -1.0 : 1.0;
      const double s2 = rng.uniform() < 0.5 ? -1.0 : 1.0;
      const int cls = s1 * s2 > 0 ? 1 : 2;
      if (want[cls - 1] == 0) continue;
      --want[cls - 1];
      const double a1 = 0.6 + 0.4 * rng.uniform();
      const double a2 = 0.6 + 0.4 * rng.uniform();
      Vec x = s1 * a1 * dict.atoms.col(0) + s2 * a2 * dict.atoms.col(1);
      for (int i = 0; i < n; ++i) x[i] += noise * rng.gaussian();
      rows.push_back(std::move(x));
      labels.push_back(cls);
    }
    ds.signals.resize(static_cast<Eigen::Index>(rows.size()), n);
    for (std::size_t j = 0; j < rows.size(); ++j) {
      ds.signals.row(static_cast<Eigen::Index>(j)) = rows[j].transpose();
    }
    ds.labels = std::move(labels);
    return normalize_unit(ds);
  };

  SyntheticSplits out;
  out.train = build(train_per_class);
  out.validation = val_per_class > 0 ? build(val_per_class) : LabeledDataset{};
  if (val_per_class == 0) {
    out.validation.class_labels = out.train.class_labels;
    out.validation.signals.resize(0, n);
  }
  out.test = build(test_per_class);
  out.true_dict = std::move(dict);
  return out;
}

/// Small well-separated two-blob task for smoke-scale checks.
inline SyntheticSplits make_blob_data(std::uint64_t seed, int train_per_class,
                                      int test_per_class, double noise = 0.05) {
  const int n = 8;
  Rng dict_rng(seed * 3000017ull + 41);
  Dictionary dict = random_dictionary(dict_rng, n, 2);
  Rng rng(seed);
  const auto build = [&](int per_class) {
    LabeledDataset ds;
    ds.class_labels = {"a", "b"};
    ds.signals.resize(2 * per_class, n);
    ds.labels.resize(2 * per_class);
    for (int j = 0; j < 2 * per_class; ++j) {
      const int cls = (j % 2) + 1;
      Vec x = (1.0 + 0.2 * rng.gaussian()) * dict.atoms.col(cls - 1);
      for (int i = 0; i < n; ++i) x[i] += noise * rng.gaussian();
      ds.signals.row(j) = x.transpose();
      ds.labels[j] = cls;
    }
    return normalize_unit(ds);
  };
  SyntheticSplits out;
  out.train = build(train_per_class);
  out.validation.class_labels = out.train.class_labels;
  out.validation.signals.resize(0, n);
  out.test = build(test_per_class);
  out.true_dict = std::move(dict);
  return out;
}

// ---------------------------------------------------------------------------
// Model-update gradient checking: a random fixed-code instance, a flat packing
// of (dictionary, decision parameters) for finite differences, and the update
// objective evaluated term by term through supervised_objective so it is
// independent of update_objective_parts.
// ---------------------------------------------------------------------------

inline double update_objective_naive(const LabeledDataset& data,
                                     const std::vector<Mat>& codes,
                                     const Dictionary& dict,
                                     const DecisionParams& params,
                                     const Hyperparams& hyper, double mu) {
  const int p = params.p();
  double total = 0.0;
  for (int j = 0; j < data.m(); ++j) {
    const Vec x = data.signals.row(j).transpose();
    Vec s(p);
    for (int l = 1; l <= p; ++l) {
      s[l - 1] =
          supervised_objective(codes[j].col(l - 1), x, l, dict, params, hyper);
    }
    const int i = data.labels[j];
    total += mu * residual_softmax_cost(i, s) + (1.0 - mu) * s[i - 1];
  }
  return total + hyper.lambda2 * params.squared_norm(hyper.regularize_bias);
}

inline int model_dim(int n, int k, int p, DecisionVariant variant) {
  const int theta = variant == DecisionVariant::Linear ? k * p : n * k * p;
  return n * k + theta + p;
}

inline Vec pack_model(const Mat& atoms, const DecisionParams& params) {
  const int n = static_cast<int>(atoms.rows());
  const int k = static_cast<int>(atoms.cols());
  const int p = params.p();
  Vec v(model_dim(n, k, p, params.variant));
  int at = 0;
  for (int c = 0; c < k; ++c) {
    for (int r = 0; r < n; ++r) v[at++] = atoms(r, c);
  }
  if (params.variant == DecisionVariant::Linear) {
    for (int c = 0; c < p; ++c) {
      for (int r = 0; r < k; ++r) v[at++] = params.weights(r, c);
    }
  } else {
    for (int f = 0; f < p; ++f) {
      for (int c = 0; c < k; ++c) {
        for (int r = 0; r < n; ++r) v[at++] = params.filters[f](r, c);
      }
    }
  }
  for (int c = 0; c < p; ++c) v[at++] = params.biases[c];
  return v;
}

inline void unpack_model(const Vec& v, Mat& atoms, DecisionParams& params) {
  const int n = static_cast<int>(atoms.rows());
  const int k = static_cast<int>(atoms.cols());
  const int p = params.p();
  int at = 0;
  for (int c = 0; c < k; ++c) {
    for (int r = 0; r < n; ++r) atoms(r, c) = v[at++];
  }
  if (params.variant == DecisionVariant::Linear) {
    for (int c = 0; c < p; ++c) {
      for (int r = 0; r < k; ++r) params.weights(r, c) = v[at++];
    }
  } else {
    for (int f = 0; f < p; ++f) {
      for (int c = 0; c < k; ++c) {
        for (int r = 0; r < n; ++r) params.filters[f](r, c) = v[at++];
      }
    }
  }
  for (int c = 0; c < p; ++c) params.biases[c] = v[at++];
}

struct GradInstance {
  LabeledDataset data;
  std::vector<Mat> codes;
  Dictionary dict;
  DecisionParams params;
  Hyperparams hyper;
};

inline GradInstance random_grad_instance(Rng& rng, int n, int k, int p,
                                         DecisionVariant variant, int m) {
  GradInstance gi;
  gi.dict = random_dictionary(rng, n, k);
  gi.dict.atoms *= 0.9;  // headroom so finite differences stay in the ball
  gi.params = random_params(rng, variant, n, k, p, 0.7);
  gi.hyper.k = k;
  gi.hyper.lambda0 = 0.4 + rng.uniform();
  gi.hyper.set_kappa(0.15);
  gi.hyper.lambda2 = 1e-3;
  gi.data.signals = random_matrix(rng, m, n);
  for (int j = 0; j < m; ++j) {
    gi.data.labels.push_back(1 + static_cast<int>(rng.index(p)));
    gi.codes.push_back(random_matrix(rng, k, p, 0.8));
  }
  for (int c = 1; c <= p; ++c) {
    gi.data.class_labels.push_back(std::to_string(c));
  }
  return gi;
}

}  // namespace sdl_test
