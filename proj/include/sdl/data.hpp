#pragma once

#include <sdl/base.hpp>

#include <cstdint>
#include <fstream>
#include <sstream>
#include <string>

namespace sdl {

/// Row-per-sample dataset with 1-based class indices.
struct LabeledDataset {
  Mat signals;                            // m x n, one signal per row
  std::vector<int> labels;                // size m, values in 1..p
  std::vector<std::string> class_labels;  // size p
  bool normalized = false;

  int m() const { return static_cast<int>(signals.rows()); }
  int n() const { return static_cast<int>(signals.cols()); }
  int p() const { return static_cast<int>(class_labels.size()); }

  void validate() const {
    require(p() >= 1, "dataset: no classes declared");
    require(static_cast<int>(labels.size()) == m(),
            "dataset: label count does not match signal count");
    require(all_finite(signals), "dataset: non-finite signal entries");
    for (int j = 0; j < m(); ++j) {
      require(labels[j] >= 1 && labels[j] <= p(),
              "dataset: label out of range at sample " + std::to_string(j));
    }
  }

  std::vector<int> class_counts() const {
    std::vector<int> counts(p(), 0);
    for (int l : labels) {
      if (l >= 1 && l <= p()) ++counts[l - 1];
    }
    return counts;
  }
};

namespace detail {

inline std::uint32_t read_u32be(std::istream& in, const std::string& what) {
  unsigned char b[4];
  in.read(reinterpret_cast<char*>(b), 4);
  if (in.gcount() != 4) {
    throw data_error("idx: truncated " + what + " (expected 4 bytes, got " +
                     std::to_string(in.gcount()) + ")");
  }
  return (std::uint32_t(b[0]) << 24) | (std::uint32_t(b[1]) << 16) |
         (std::uint32_t(b[2]) << 8) | std::uint32_t(b[3]);
}

inline std::string hex_u32(std::uint32_t v) {
  std::ostringstream os;
  os << "0x" << std::hex << v;
  return os.str();
}

inline std::ifstream open_binary(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw data_error("cannot open file: " + path);
  return in;
}

inline std::vector<unsigned char> read_bytes(std::istream& in,
                                             std::size_t count,
                                             const std::string& what) {
  std::vector<unsigned char> buf(count);
  in.read(reinterpret_cast<char*>(buf.data()),
          static_cast<std::streamsize>(count));
  const auto got = static_cast<std::size_t>(in.gcount());
  if (got != count) {
    throw data_error("truncated " + what + " (expected " +
                     std::to_string(count) + " bytes, got " +
                     std::to_string(got) + ")");
  }
  return buf;
}

}  // namespace detail

/// Load an image/label pair in IDX format (big-endian headers, u8 payload).
/// Pixels are scaled to [0, 1]; label byte v maps to class index v + 1.
inline LabeledDataset load_idx(std::istream& img, std::istream& lab) {
  const std::uint32_t img_magic = detail::read_u32be(img, "image magic");
  if (img_magic != 0x00000803u) {
    throw data_error("idx: bad image magic " + detail::hex_u32(img_magic) +
                     " (expected 0x803)");
  }
  const std::uint32_t count = detail::read_u32be(img, "image count");
  const std::uint32_t rows = detail::read_u32be(img, "image rows");
  const std::uint32_t cols = detail::read_u32be(img, "image cols");
  if (rows == 0 || cols == 0 || count == 0) {
    throw data_error("idx: empty image stream");
  }
  const std::size_t n = std::size_t(rows) * cols;
  const auto pixels =
      detail::read_bytes(img, std::size_t(count) * n, "idx image payload");

  const std::uint32_t lab_magic = detail::read_u32be(lab, "label magic");
  if (lab_magic != 0x00000801u) {
    throw data_error("idx: bad label magic " + detail::hex_u32(lab_magic) +
                     " (expected 0x801)");
  }
  const std::uint32_t lab_count = detail::read_u32be(lab, "label count");
  if (lab_count != count) {
    throw data_error("idx: image count " + std::to_string(count) +
                     " does not match label count " +
                     std::to_string(lab_count));
  }
  const auto raw_labels =
      detail::read_bytes(lab, lab_count, "idx label payload");

  LabeledDataset ds;
  ds.signals.resize(count, static_cast<Eigen::Index>(n));
  for (std::uint32_t j = 0; j < count; ++j) {
    for (std::size_t i = 0; i < n; ++i) {
      ds.signals(j, static_cast<Eigen::Index>(i)) =
          double(pixels[std::size_t(j) * n + i]) / 255.0;
    }
  }
  int max_label = 0;
  ds.labels.resize(count);
  for (std::uint32_t j = 0; j < count; ++j) {
    const int v = raw_labels[j];
    ds.labels[j] = v + 1;
    max_label = std::max(max_label, v);
  }
  for (int v = 0; v <= max_label; ++v) {
    ds.class_labels.push_back(std::to_string(v));
  }
  ds.validate();
  return ds;
}

inline LabeledDataset load_idx(const std::string& images_path,
                               const std::string& labels_path) {
  auto img = detail::open_binary(images_path);
  auto lab = detail::open_binary(labels_path);
  return load_idx(static_cast<std::istream&>(img),
                  static_cast<std::istream&>(lab));
}

/// Load a binary (P5) PGM image as a rows x cols matrix scaled to [0, 1].
inline Mat load_pgm(std::istream& in) {
  auto next_token = [&in]() {
    std::string tok;
    int c = in.get();
    while (c != EOF) {
      if (c == '#') {
        while (c != EOF && c != '\n') c = in.get();
      } else if (std::isspace(c)) {
        c = in.get();
      } else {
        break;
      }
    }
    while (c != EOF && !std::isspace(c)) {
      tok.push_back(static_cast<char>(c));
      c = in.get();
    }
    if (tok.empty()) throw data_error("pgm: truncated header");
    return tok;
  };

  const std::string magic = next_token();
  if (magic != "P5") {
    throw data_error("pgm: unsupported format \"" + magic +
                     "\" (only binary P5)");
  }
  long w = 0, h = 0, maxval = 0;
  try {
    w = std::stol(next_token());
    h = std::stol(next_token());
    maxval = std::stol(next_token());
  } catch (const std::exception&) {
    throw data_error("pgm: malformed header");
  }
  if (w <= 0 || h <= 0) throw data_error("pgm: bad dimensions");
  if (maxval <= 0 || maxval > 255) {
    throw data_error("pgm: unsupported maxval " + std::to_string(maxval) +
                     " (only 8-bit)");
  }
  const auto pixels = detail::read_bytes(in, std::size_t(w) * std::size_t(h),
                                         "pgm payload");
  Mat img(h, w);
  for (long r = 0; r < h; ++r) {
    for (long c = 0; c < w; ++c) {
      img(r, c) = double(pixels[std::size_t(r) * std::size_t(w) + c]) /
                  double(maxval);
    }
  }
  return img;
}

inline Mat load_pgm(const std::string& path) {
  auto in = detail::open_binary(path);
  try {
    return load_pgm(static_cast<std::istream&>(in));
  } catch (const data_error& e) {
    throw data_error(std::string(e.what()) + " in " + path);
  }
}

/// Which horizontal band of the image to tile with patches.  Left covers
/// columns [0, floor(w/2)), Right covers [floor(w/2), w).
enum class Region { Full, Left, Right };

struct PatchSpec {
  int patch = 12;
  int stride = 1;
  Region region = Region::Full;
  bool subtract_mean = false;
};

/// Tile the selected region with patch x patch windows at the given stride,
/// flattening each window row-major.  All patches carry the given label.
inline LabeledDataset extract_patches(const Mat& image, const PatchSpec& spec,
                                      int label) {
  require(spec.patch >= 1, "extract_patches: patch size must be positive");
  require(spec.stride >= 1, "extract_patches: stride must be positive");
  require(label >= 1, "extract_patches: label must be a 1-based class index");
  require(all_finite(image), "extract_patches: non-finite image");

  const int h = static_cast<int>(image.rows());
  const int w = static_cast<int>(image.cols());
  const int half = w / 2;
  int c0 = 0, c1 = w;
  if (spec.region == Region::Left) c1 = half;
  if (spec.region == Region::Right) c0 = half;
  require(c1 - c0 >= spec.patch && h >= spec.patch,
          "extract_patches: region smaller than patch");

  std::vector<std::pair<int, int>> origins;
  for (int r = 0; r + spec.patch <= h; r += spec.stride) {
    for (int c = c0; c + spec.patch <= c1; c += spec.stride) {
      origins.emplace_back(r, c);
    }
  }

  LabeledDataset ds;
  const int n = spec.patch * spec.patch;
  ds.signals.resize(static_cast<Eigen::Index>(origins.size()), n);
  ds.labels.assign(origins.size(), label);
  for (std::size_t j = 0; j < origins.size(); ++j) {
    const auto [r, c] = origins[j];
    for (int pr = 0; pr < spec.patch; ++pr) {
      for (int pc = 0; pc < spec.patch; ++pc) {
        ds.signals(static_cast<Eigen::Index>(j), pr * spec.patch + pc) =
            image(r + pr, c + pc);
      }
    }
    if (spec.subtract_mean) {
      const Eigen::Index row = static_cast<Eigen::Index>(j);
      ds.signals.row(row).array() -= ds.signals.row(row).mean();
    }
  }
  for (int v = 1; v <= label; ++v) ds.class_labels.push_back(std::to_string(v));
  return ds;
}

/// Concatenate two datasets with the same signal length.  Class label lists
/// must agree where they overlap; the longer list wins.
inline LabeledDataset merge_datasets(const LabeledDataset& a,
                                     const LabeledDataset& b) {
  require(a.n() == b.n() || a.m() == 0 || b.m() == 0,
          "merge_datasets: signal lengths differ");
  const auto& longer = a.p() >= b.p() ? a.class_labels : b.class_labels;
  const auto& shorter = a.p() >= b.p() ? b.class_labels : a.class_labels;
  for (std::size_t i = 0; i < shorter.size(); ++i) {
    require(shorter[i] == longer[i],
            "merge_datasets: class label lists disagree at index " +
                std::to_string(i + 1));
  }
  LabeledDataset out;
  out.class_labels = longer;
  const int n = a.m() > 0 ? a.n() : b.n();
  out.signals.resize(a.m() + b.m(), n);
  if (a.m() > 0) out.signals.topRows(a.m()) = a.signals;
  if (b.m() > 0) out.signals.bottomRows(b.m()) = b.signals;
  out.labels = a.labels;
  out.labels.insert(out.labels.end(), b.labels.begin(), b.labels.end());
  out.normalized = a.normalized && b.normalized;
  out.validate();
  return out;
}

/// Scale every signal to unit l2 norm.  Zero signals are an error unless
/// drop_zero_rows is set, in which case they are removed and counted.
inline LabeledDataset normalize_unit(const LabeledDataset& ds,
                                     bool drop_zero_rows = false,
                                     int* dropped = nullptr) {
  ds.validate();
  std::vector<int> keep;
  keep.reserve(ds.m());
  for (int j = 0; j < ds.m(); ++j) {
    if (ds.signals.row(j).norm() > 0.0) {
      keep.push_back(j);
    } else if (!drop_zero_rows) {
      throw data_error("normalize_unit: zero signal at sample " +
                       std::to_string(j));
    }
  }
  if (dropped != nullptr) *dropped = ds.m() - static_cast<int>(keep.size());
  LabeledDataset out;
  out.class_labels = ds.class_labels;
  out.signals.resize(static_cast<Eigen::Index>(keep.size()), ds.n());
  out.labels.resize(keep.size());
  for (std::size_t r = 0; r < keep.size(); ++r) {
    const int j = keep[r];
    out.signals.row(static_cast<Eigen::Index>(r)) =
        ds.signals.row(j) / ds.signals.row(j).norm();
    out.labels[r] = ds.labels[j];
  }
  out.normalized = true;
  return out;
}

struct SplitResult {
  LabeledDataset train;
  LabeledDataset validation;
  LabeledDataset test;
};

namespace detail {

inline LabeledDataset take_rows(const LabeledDataset& ds,
                                std::vector<int> rows) {
  std::sort(rows.begin(), rows.end());
  LabeledDataset out;
  out.class_labels = ds.class_labels;
  out.normalized = ds.normalized;
  out.signals.resize(static_cast<Eigen::Index>(rows.size()), ds.n());
  out.labels.resize(rows.size());
  for (std::size_t r = 0; r < rows.size(); ++r) {
    out.signals.row(static_cast<Eigen::Index>(r)) = ds.signals.row(rows[r]);
    out.labels[r] = ds.labels[rows[r]];
  }
  return out;
}

}  // namespace detail

/// Seeded stratified split.  Fractions apply per class; floor rounding sends
/// the remainder to the training part.  Rejects splits that would leave any
/// class without training samples.
inline SplitResult split_dataset(const LabeledDataset& ds, double train_frac,
                                 double val_frac, double test_frac,
                                 std::uint64_t seed) {
  ds.validate();
  require(train_frac > 0.0, "split_dataset: training fraction must be positive");
  require(val_frac >= 0.0 && test_frac >= 0.0,
          "split_dataset: negative fraction");
  require(train_frac + val_frac + test_frac <= 1.0 + 1e-12,
          "split_dataset: fractions sum to more than one");

  Rng rng(seed);
  std::vector<int> train_rows, val_rows, test_rows;
  for (int c = 1; c <= ds.p(); ++c) {
    std::vector<int> rows;
    for (int j = 0; j < ds.m(); ++j) {
      if (ds.labels[j] == c) rows.push_back(j);
    }
    if (rows.empty()) {
      throw data_error("split_dataset: class " + std::to_string(c) + " (" +
                       ds.class_labels[static_cast<std::size_t>(c - 1)] +
                       ") has no samples to place in the training part");
    }
    rng.shuffle(rows);
    const int mc = static_cast<int>(rows.size());
    const int n_tr = static_cast<int>(std::floor(train_frac * mc));
    const int n_va = static_cast<int>(std::floor(val_frac * mc));
    const int n_te = static_cast<int>(std::floor(test_frac * mc));
    const int leftover = mc - n_tr - n_va - n_te;
    const int take_tr = n_tr + leftover;
    if (take_tr < 1) {
      throw data_error("split_dataset: class " + std::to_string(c) +
                       " would have no training samples");
    }
    int pos = 0;
    for (int i = 0; i < take_tr; ++i) train_rows.push_back(rows[pos++]);
    for (int i = 0; i < n_va; ++i) val_rows.push_back(rows[pos++]);
    for (int i = 0; i < n_te; ++i) test_rows.push_back(rows[pos++]);
  }

  SplitResult out;
  out.train = detail::take_rows(ds, std::move(train_rows));
  out.validation = detail::take_rows(ds, std::move(val_rows));
  out.test = detail::take_rows(ds, std::move(test_rows));
  return out;
}

/// Seeded uniform subsample without replacement, keeping at most
/// max_per_class samples of each class.  Row order is preserved.
inline LabeledDataset cap_per_class(const LabeledDataset& ds, int max_per_class,
                                    unsigned long seed) {
  ds.validate();
  require(max_per_class >= 1, "cap_per_class: cap must be positive");
  Rng rng(seed);
  std::vector<int> keep;
  for (int c = 1; c <= ds.p(); ++c) {
    std::vector<int> rows;
    for (int j = 0; j < ds.m(); ++j) {
      if (ds.labels[static_cast<std::size_t>(j)] == c) rows.push_back(j);
    }
    rng.shuffle(rows);
    if (static_cast<int>(rows.size()) > max_per_class) {
      rows.resize(static_cast<std::size_t>(max_per_class));
    }
    keep.insert(keep.end(), rows.begin(), rows.end());
  }
  return detail::take_rows(ds, std::move(keep));
}

/// Keep only samples of the listed (1-based) classes, renumbering them
/// 1..classes.size() in the given order.
inline LabeledDataset restrict_to_classes(const LabeledDataset& ds,
                                          const std::vector<int>& classes) {
  ds.validate();
  require(!classes.empty(), "restrict_to_classes: empty class list");
  std::vector<int> remap(ds.p() + 1, 0);
  LabeledDataset out;
  for (std::size_t i = 0; i < classes.size(); ++i) {
    const int c = classes[i];
    require(c >= 1 && c <= ds.p(),
            "restrict_to_classes: class index out of range");
    require(remap[c] == 0, "restrict_to_classes: duplicate class index");
    remap[c] = static_cast<int>(i) + 1;
    out.class_labels.push_back(ds.class_labels[c - 1]);
  }
  std::vector<int> rows;
  for (int j = 0; j < ds.m(); ++j) {
    if (remap[ds.labels[j]] != 0) rows.push_back(j);
  }
  out.signals.resize(static_cast<Eigen::Index>(rows.size()), ds.n());
  out.labels.resize(rows.size());
  for (std::size_t r = 0; r < rows.size(); ++r) {
    out.signals.row(static_cast<Eigen::Index>(r)) = ds.signals.row(rows[r]);
    out.labels[r] = remap[ds.labels[rows[r]]];
  }
  out.normalized = ds.normalized;
  return out;
}

/// Two-class view: the target class keeps its name and becomes class 1,
/// everything else becomes class 2.
inline LabeledDataset relabel_one_vs_rest(const LabeledDataset& ds, int target,
                                          const std::string& rest_name) {
  ds.validate();
  require(target >= 1 && target <= ds.p(),
          "relabel_one_vs_rest: class index out of range");
  LabeledDataset out;
  out.signals = ds.signals;
  out.normalized = ds.normalized;
  out.class_labels = {ds.class_labels[target - 1], rest_name};
  out.labels.resize(ds.labels.size());
  for (std::size_t j = 0; j < ds.labels.size(); ++j) {
    out.labels[j] = ds.labels[j] == target ? 1 : 2;
  }
  return out;
}

}  // namespace sdl
