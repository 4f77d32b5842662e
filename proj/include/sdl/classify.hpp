#pragma once

#include <sdl/io.hpp>
#include <sdl/training.hpp>

namespace sdl {

struct Classification {
  int predicted = 0;  // 1-based class index
  Vec residuals;      // per-class supervised coding costs S*
};

/// Classify by coding x once per class and picking the smallest supervised
/// cost.  Ties resolve to the lowest class index.  An optional k x p warm
/// start matrix speeds up repeated calls on related signals.
inline Classification classify_one(const Vec& x, const SdlModel& model,
                                   Mat* warm = nullptr) {
  model.validate();
  require(x.size() == model.n(),
          "classify_one: signal length does not match model");
  const int p = model.p();
  Classification out;
  out.residuals.resize(p);
  for (int l = 1; l <= p; ++l) {
    const Vec w0 = warm != nullptr ? Vec(warm->col(l - 1))
                                   : Vec(Vec::Zero(model.k()));
    const auto res = supervised_code(x, l, model.dictionary, model.params,
                                     model.hyper, &w0);
    if (!std::isfinite(res.objective)) {
      throw std::runtime_error("classify_one: solver failure for class " +
                               std::to_string(l));
    }
    out.residuals[l - 1] = res.objective;
    if (warm != nullptr) warm->col(l - 1) = res.alpha;
  }
  out.predicted = 1;
  for (int l = 2; l <= p; ++l) {
    if (out.residuals[l - 1] < out.residuals[out.predicted - 1]) {
      out.predicted = l;
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Ensembles for more than two classes
// ---------------------------------------------------------------------------

enum class EnsembleScheme { Multiclass, Pairwise, OneVsAll };

inline const char* to_string(EnsembleScheme s) {
  switch (s) {
    case EnsembleScheme::Multiclass: return "multiclass";
    case EnsembleScheme::Pairwise: return "pairwise";
    default: return "one_vs_all";
  }
}

struct EnsembleMember {
  SdlModel model;
  /// Original 1-based class indices this member separates: both classes for
  /// a pairwise member, the target class for one-vs-all, all classes for
  /// the single multiclass member.
  std::vector<int> classes;
};

struct EnsembleModel {
  EnsembleScheme scheme = EnsembleScheme::Multiclass;
  std::vector<EnsembleMember> members;
  std::vector<std::string> class_labels;

  int p() const { return static_cast<int>(class_labels.size()); }

  void validate() const {
    require(p() >= 2, "EnsembleModel: need at least two classes");
    require(!members.empty(), "EnsembleModel: no members");
    for (const auto& member : members) member.model.validate();
  }
};

/// Train one model per pair / per class / for all classes at once.  Member
/// seeds derive from config.seed plus the member index, so the result is a
/// pure function of (data, scheme, config).  A nonempty validation set is
/// restricted alongside the training data for each member's mu selection.
inline EnsembleModel train_ensemble(const LabeledDataset& data,
                                    const LabeledDataset& validation,
                                    EnsembleScheme scheme,
                                    const TrainConfig& config) {
  data.validate();
  const int p = data.p();
  if (p < 2) throw data_error("train_ensemble: need at least two classes");
  const bool have_val = validation.m() > 0;

  EnsembleModel ens;
  ens.scheme = scheme;
  ens.class_labels = data.class_labels;

  auto member_config = [&](std::size_t idx) {
    TrainConfig c = config;
    c.seed = config.seed + idx;
    return c;
  };

  if (scheme == EnsembleScheme::Multiclass) {
    EnsembleMember member;
    for (int c = 1; c <= p; ++c) member.classes.push_back(c);
    member.model = have_val
                       ? train_sdl(data, validation, member_config(0)).model
                       : train_sdl(data, member_config(0)).model;
    ens.members.push_back(std::move(member));
    return ens;
  }

  if (scheme == EnsembleScheme::Pairwise) {
    std::size_t idx = 0;
    for (int a = 1; a <= p; ++a) {
      for (int b = a + 1; b <= p; ++b, ++idx) {
        EnsembleMember member;
        member.classes = {a, b};
        const LabeledDataset sub = restrict_to_classes(data, {a, b});
        if (have_val) {
          const LabeledDataset vsub = restrict_to_classes(validation, {a, b});
          member.model = train_sdl(sub, vsub, member_config(idx)).model;
        } else {
          member.model = train_sdl(sub, member_config(idx)).model;
        }
        ens.members.push_back(std::move(member));
      }
    }
    return ens;
  }

  for (int c = 1; c <= p; ++c) {
    EnsembleMember member;
    member.classes = {c};
    const LabeledDataset sub = relabel_one_vs_rest(data, c, "rest");
    if (have_val) {
      const LabeledDataset vsub = relabel_one_vs_rest(validation, c, "rest");
      member.model = train_sdl(sub, vsub, member_config(c - 1)).model;
    } else {
      member.model = train_sdl(sub, member_config(c - 1)).model;
    }
    ens.members.push_back(std::move(member));
  }
  return ens;
}

inline EnsembleModel train_ensemble(const LabeledDataset& data,
                                    EnsembleScheme scheme,
                                    const TrainConfig& config) {
  LabeledDataset empty;
  empty.class_labels = data.class_labels;
  empty.signals.resize(0, data.n());
  return train_ensemble(data, empty, scheme, config);
}

/// Predict with an ensemble.  Pairwise: majority vote, ties broken by the
/// smaller summed residual, then by the lower class index.  One-vs-all: the
/// class whose member gives its target the smallest residual, ties to the
/// lower index.
inline int classify_ensemble(const Vec& x, const EnsembleModel& ens) {
  ens.validate();
  const int p = ens.p();

  if (ens.scheme == EnsembleScheme::Multiclass) {
    require(ens.members.size() == 1,
            "classify_ensemble: multiclass scheme expects a single member");
    return classify_one(x, ens.members.front().model).predicted;
  }

  if (ens.scheme == EnsembleScheme::Pairwise) {
    std::vector<int> votes(p, 0);
    Vec aggregate = Vec::Zero(p);
    for (const auto& member : ens.members) {
      require(member.classes.size() == 2,
              "classify_ensemble: pairwise member without two classes");
      const Classification r = classify_one(x, member.model);
      const int a = member.classes[0];
      const int b = member.classes[1];
      ++votes[(r.predicted == 1 ? a : b) - 1];
      aggregate[a - 1] += r.residuals[0];
      aggregate[b - 1] += r.residuals[1];
    }
    int winner = 1;
    for (int c = 2; c <= p; ++c) {
      if (votes[c - 1] > votes[winner - 1] ||
          (votes[c - 1] == votes[winner - 1] &&
           aggregate[c - 1] < aggregate[winner - 1])) {
        winner = c;
      }
    }
    return winner;
  }

  require(ens.members.size() == static_cast<std::size_t>(p),
          "classify_ensemble: one-vs-all needs one member per class");
  Vec target_residual(p);
  for (const auto& member : ens.members) {
    require(member.classes.size() == 1,
            "classify_ensemble: one-vs-all member without a target class");
    const Classification r = classify_one(x, member.model);
    target_residual[member.classes[0] - 1] = r.residuals[0];
  }
  int winner = 1;
  for (int c = 2; c <= p; ++c) {
    if (target_residual[c - 1] < target_residual[winner - 1]) winner = c;
  }
  return winner;
}

// ---------------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------------

struct EvalReport {
  int samples = 0;
  int errors = 0;
  double error_rate = 0.0;
  std::vector<std::vector<int>> confusion;  // [true class][predicted class]
  std::vector<std::string> class_labels;
  std::string scheme;
  std::string digest;
};

inline nlohmann::json to_json(const EvalReport& r) {
  nlohmann::json j;
  j["samples"] = r.samples;
  j["errors"] = r.errors;
  j["error_rate"] = r.error_rate;
  j["confusion"] = r.confusion;
  j["class_labels"] = r.class_labels;
  j["scheme"] = r.scheme;
  j["model_digest"] = r.digest;
  return j;
}

inline std::string ensemble_digest(const EnsembleModel& ens) {
  std::string bytes = to_string(ens.scheme);
  for (const auto& member : ens.members) {
    bytes += model_digest(member.model);
    for (int c : member.classes) bytes += "," + std::to_string(c);
  }
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ull;
  }
  std::ostringstream os;
  os << std::hex << std::setw(16) << std::setfill('0') << h;
  return os.str();
}

namespace detail {

template <typename Predict>
EvalReport evaluate_with(const LabeledDataset& data, int p,
                         const std::vector<std::string>& class_labels,
                         int workers, Predict&& predict) {
  std::vector<int> predicted(data.m(), 0);
  parallel_for(static_cast<std::size_t>(data.m()), workers,
               [&](std::size_t j) {
                 predicted[j] = predict(
                     Vec(data.signals.row(static_cast<Eigen::Index>(j))
                             .transpose()));
               });
  EvalReport report;
  report.samples = data.m();
  report.class_labels = class_labels;
  report.confusion.assign(p, std::vector<int>(p, 0));
  for (int j = 0; j < data.m(); ++j) {
    ++report.confusion[data.labels[j] - 1][predicted[j] - 1];
    if (predicted[j] != data.labels[j]) ++report.errors;
  }
  report.error_rate =
      data.m() == 0 ? 0.0 : double(report.errors) / data.m();
  return report;
}

}  // namespace detail

inline EvalReport evaluate(const LabeledDataset& data, const SdlModel& model,
                           int workers = 1) {
  data.validate();
  model.validate();
  if (data.n() != model.n()) {
    throw data_error("evaluate: signal length " + std::to_string(data.n()) +
                     " does not match model input length " +
                     std::to_string(model.n()));
  }
  if (data.p() != model.p()) {
    throw data_error("evaluate: dataset has " + std::to_string(data.p()) +
                     " classes but the model has " +
                     std::to_string(model.p()));
  }
  EvalReport report = detail::evaluate_with(
      data, model.p(), model.class_labels, workers,
      [&](const Vec& x) { return classify_one(x, model).predicted; });
  report.scheme = "multiclass";
  report.digest = model_digest(model);
  return report;
}

inline EvalReport evaluate(const LabeledDataset& data,
                           const EnsembleModel& ens, int workers = 1) {
  data.validate();
  ens.validate();
  const int n = ens.members.front().model.n();
  if (data.n() != n) {
    throw data_error("evaluate: signal length " + std::to_string(data.n()) +
                     " does not match model input length " +
                     std::to_string(n));
  }
  if (data.p() != ens.p()) {
    throw data_error("evaluate: dataset has " + std::to_string(data.p()) +
                     " classes but the ensemble has " +
                     std::to_string(ens.p()));
  }
  EvalReport report = detail::evaluate_with(
      data, ens.p(), ens.class_labels, workers,
      [&](const Vec& x) { return classify_ensemble(x, ens); });
  report.scheme = to_string(ens.scheme);
  report.digest = ensemble_digest(ens);
  return report;
}

/// How informative a dictionary's reconstructive codes are on their own:
/// fit a multinomial ridge readout on training codes and report the test
/// error of its argmax rule.
inline double rec_dictionary_probe(const LabeledDataset& train,
                                   const LabeledDataset& test,
                                   const Dictionary& dict, double lambda1,
                                   double lambda2 = 1e-4, int workers = 1) {
  train.validate();
  test.validate();
  require(train.n() == dict.n() && test.n() == dict.n(),
          "rec_dictionary_probe: signal length does not match dictionary");
  require(train.p() == test.p(),
          "rec_dictionary_probe: class counts differ");
  const int p = train.p();
  if (p < 2) {
    throw data_error("rec_dictionary_probe: need at least two classes");
  }
  require(lambda1 >= 0.0 && lambda2 >= 0.0,
          "rec_dictionary_probe: negative regularization");

  const int k = dict.k();
  const auto code_features = [&](const LabeledDataset& ds) {
    Mat f(k + 1, ds.m());
    parallel_for(static_cast<std::size_t>(ds.m()), workers,
                 [&](std::size_t j) {
                   const auto res = reconstructive_code(
                       ds.signals.row(static_cast<Eigen::Index>(j))
                           .transpose(),
                       dict, lambda1);
                   f.col(static_cast<Eigen::Index>(j)).head(k) = res.alpha;
                   f(k, static_cast<Eigen::Index>(j)) = 1.0;
                 });
    return f;
  };

  const Mat train_features = code_features(train);
  const Mat theta = detail::fit_multinomial_ridge(train_features, train.labels,
                                                  p, lambda2, true);
  const Mat test_features = code_features(test);
  int wrong = 0;
  for (int j = 0; j < test.m(); ++j) {
    const Vec scores = theta.transpose() * test_features.col(j);
    int arg = 1;
    for (int l = 2; l <= p; ++l) {
      if (scores[l - 1] > scores[arg - 1]) arg = l;
    }
    if (arg != test.labels[j]) ++wrong;
  }
  return test.m() == 0 ? 0.0 : double(wrong) / test.m();
}

}  // namespace sdl
