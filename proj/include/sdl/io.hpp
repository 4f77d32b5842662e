#pragma once

#include <sdl/data.hpp>
#include <sdl/model.hpp>

#include <json.hpp>

#include <bit>
#include <cstdint>
#include <fstream>
#include <iomanip>
#include <sstream>

namespace sdl {

namespace detail {

using nlohmann::json;

inline void write_u64le(std::ostream& out, std::uint64_t v) {
  unsigned char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
  out.write(reinterpret_cast<const char*>(b), 8);
}

inline std::uint64_t read_u64le(std::istream& in, const std::string& what) {
  unsigned char b[8];
  in.read(reinterpret_cast<char*>(b), 8);
  if (in.gcount() != 8) throw data_error("truncated " + what);
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= std::uint64_t(b[i]) << (8 * i);
  return v;
}

inline void write_f64_array(std::ostream& out, const double* p,
                            std::size_t count) {
  for (std::size_t i = 0; i < count; ++i) {
    write_u64le(out, std::bit_cast<std::uint64_t>(p[i]));
  }
}

inline void read_f64_array(std::istream& in, double* p, std::size_t count,
                           const std::string& what) {
  for (std::size_t i = 0; i < count; ++i) {
    unsigned char b[8];
    in.read(reinterpret_cast<char*>(b), 8);
    if (in.gcount() != 8) {
      throw data_error("truncated " + what + " (expected " +
                       std::to_string(count) + " values, got " +
                       std::to_string(i) + ")");
    }
    std::uint64_t v = 0;
    for (int k = 0; k < 8; ++k) v |= std::uint64_t(b[k]) << (8 * k);
    p[i] = std::bit_cast<double>(v);
  }
}

inline void check_magic(std::istream& in, const char* magic,
                        const std::string& kind) {
  char got[8];
  in.read(got, 8);
  if (in.gcount() != 8) throw data_error(kind + ": truncated magic");
  if (std::string_view(got, 8) == std::string_view(magic, 8)) return;
  if (std::string_view(got, 7) == std::string_view(magic, 7)) {
    throw data_error(kind + ": unsupported format version '" +
                     std::string(1, got[7]) + "' (this build reads '" +
                     std::string(1, magic[7]) + "')");
  }
  throw data_error(kind + ": bad magic");
}

inline json hyper_to_json(const Hyperparams& h) {
  json j;
  j["lambda0"] = h.lambda0;
  j["lambda1"] = h.lambda1;
  j["lambda2"] = h.lambda2;
  j["kappa"] = h.kappa;
  j["mu_schedule"] = h.mu_schedule;
  j["k"] = h.k;
  j["regularize_bias"] = h.regularize_bias;
  j["solver"] = {{"tol", h.solver.tol},
                 {"max_iter", h.solver.max_iter},
                 {"tight_two_class_bound", h.solver.tight_two_class_bound}};
  return j;
}

inline Hyperparams hyper_from_json(const json& j) {
  Hyperparams h;
  h.lambda0 = j.at("lambda0").get<double>();
  h.lambda1 = j.at("lambda1").get<double>();
  h.lambda2 = j.at("lambda2").get<double>();
  h.kappa = j.at("kappa").get<double>();
  h.mu_schedule = j.at("mu_schedule").get<std::vector<double>>();
  h.k = j.at("k").get<int>();
  h.regularize_bias = j.at("regularize_bias").get<bool>();
  const auto& s = j.at("solver");
  h.solver.tol = s.at("tol").get<double>();
  h.solver.max_iter = s.at("max_iter").get<int>();
  h.solver.tight_two_class_bound = s.at("tight_two_class_bound").get<bool>();
  return h;
}

inline json parse_header(std::istream& in, const std::string& kind) {
  const std::uint64_t len = read_u64le(in, kind + " header length");
  if (len == 0 || len > (1u << 30)) {
    throw data_error(kind + ": implausible header length " +
                     std::to_string(len));
  }
  std::string text(len, '\0');
  in.read(text.data(), static_cast<std::streamsize>(len));
  if (static_cast<std::uint64_t>(in.gcount()) != len) {
    throw data_error(kind + ": truncated header");
  }
  try {
    return json::parse(text);
  } catch (const json::exception& e) {
    throw data_error(kind + ": malformed header: " + e.what());
  }
}

inline void write_header(std::ostream& out, const json& j) {
  const std::string text = j.dump();
  write_u64le(out, text.size());
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Model files: 8-byte magic "SDLMODL1", u64 LE header length, JSON header,
// then raw little-endian f64 arrays (dictionary column-major, decision
// weights, biases).
// ---------------------------------------------------------------------------

inline void save_model(const SdlModel& model, std::ostream& out) {
  model.validate();
  detail::json header;
  header["variant"] = to_string(model.params.variant);
  header["n"] = model.n();
  header["k"] = model.k();
  header["p"] = model.p();
  header["class_labels"] = model.class_labels;
  header["hyper"] = detail::hyper_to_json(model.hyper);
  if (model.trace.present) {
    for (double v : model.trace.objective) {
      require(std::isfinite(v), "save_model: non-finite trace objective");
    }
    require(std::isfinite(model.trace.chosen_mu),
            "save_model: non-finite chosen mu");
    header["trace"] = {{"objective", model.trace.objective},
                       {"chosen_mu", model.trace.chosen_mu}};
  } else {
    header["trace"] = nullptr;
  }

  out.write("SDLMODL1", 8);
  detail::write_header(out, header);
  detail::write_f64_array(out, model.dictionary.atoms.data(),
                          std::size_t(model.n()) * model.k());
  if (model.params.variant == DecisionVariant::Linear) {
    detail::write_f64_array(out, model.params.weights.data(),
                            std::size_t(model.k()) * model.p());
  } else {
    for (const Mat& w : model.params.filters) {
      detail::write_f64_array(out, w.data(),
                              std::size_t(model.n()) * model.k());
    }
  }
  detail::write_f64_array(out, model.params.biases.data(), model.p());
  if (!out) throw data_error("save_model: write failed");
}

inline SdlModel load_model(std::istream& in) {
  detail::check_magic(in, "SDLMODL1", "model");
  const detail::json header = detail::parse_header(in, "model");

  SdlModel model;
  int n = 0, k = 0, p = 0;
  try {
    const std::string variant = header.at("variant").get<std::string>();
    if (variant == "linear") {
      model.params.variant = DecisionVariant::Linear;
    } else if (variant == "bilinear") {
      model.params.variant = DecisionVariant::Bilinear;
    } else {
      throw data_error("model: unknown variant \"" + variant + "\"");
    }
    n = header.at("n").get<int>();
    k = header.at("k").get<int>();
    p = header.at("p").get<int>();
    model.class_labels = header.at("class_labels")
                             .get<std::vector<std::string>>();
    model.hyper = detail::hyper_from_json(header.at("hyper"));
    if (!header.at("trace").is_null()) {
      model.trace.objective =
          header.at("trace").at("objective").get<std::vector<double>>();
      model.trace.chosen_mu =
          header.at("trace").at("chosen_mu").get<double>();
      model.trace.present = true;
    }
  } catch (const detail::json::exception& e) {
    throw data_error(std::string("model: malformed header: ") + e.what());
  }

  if (n < 1 || k < 1 || p < 1) {
    throw data_error("model: non-positive dimensions in header");
  }
  if (static_cast<int>(model.class_labels.size()) != p) {
    throw data_error("model: class label count " +
                     std::to_string(model.class_labels.size()) +
                     " does not match p = " + std::to_string(p));
  }
  if (model.hyper.k != k) {
    throw data_error("model: header field k = " + std::to_string(k) +
                     " disagrees with hyper.k = " +
                     std::to_string(model.hyper.k));
  }

  model.dictionary.atoms.resize(n, k);
  detail::read_f64_array(in, model.dictionary.atoms.data(),
                         std::size_t(n) * k, "model dictionary payload");
  if (model.params.variant == DecisionVariant::Linear) {
    model.params.weights.resize(k, p);
    detail::read_f64_array(in, model.params.weights.data(),
                           std::size_t(k) * p, "model weight payload");
  } else {
    model.params.filters.assign(p, Mat(n, k));
    for (Mat& w : model.params.filters) {
      detail::read_f64_array(in, w.data(), std::size_t(n) * k,
                             "model filter payload");
    }
  }
  model.params.biases.resize(p);
  detail::read_f64_array(in, model.params.biases.data(), p,
                         "model bias payload");

  try {
    model.validate();
  } catch (const std::exception& e) {
    throw data_error(std::string("model: invalid payload: ") + e.what());
  }
  return model;
}

inline void save_model(const SdlModel& model, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw data_error("cannot open file for writing: " + path);
  save_model(model, out);
}

inline SdlModel load_model(const std::string& path) {
  auto in = detail::open_binary(path);
  return load_model(static_cast<std::istream&>(in));
}

/// FNV-1a 64-bit hash of the serialized model, as 16 hex digits.
inline std::string model_digest(const SdlModel& model) {
  std::ostringstream buf(std::ios::binary);
  save_model(model, buf);
  const std::string bytes = buf.str();
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ull;
  }
  std::ostringstream os;
  os << std::hex << std::setw(16) << std::setfill('0') << h;
  return os.str();
}

// ---------------------------------------------------------------------------
// Dataset cache: magic "SDLDATA1", JSON header, row-major f64 signals,
// u32 LE labels.
// ---------------------------------------------------------------------------

inline void save_dataset_cache(const LabeledDataset& ds, std::ostream& out) {
  ds.validate();
  require(ds.p() <= 255,
          "save_dataset_cache: more than 255 classes (labels are bytes)");
  detail::json header;
  header["m"] = ds.m();
  header["n"] = ds.n();
  header["p"] = ds.p();
  header["labels"] = ds.class_labels;
  header["normalized"] = ds.normalized;

  out.write("SDLDATA1", 8);
  detail::write_header(out, header);
  std::vector<double> row(ds.n());
  for (int j = 0; j < ds.m(); ++j) {
    for (int i = 0; i < ds.n(); ++i) row[i] = ds.signals(j, i);
    detail::write_f64_array(out, row.data(), row.size());
  }
  for (int l : ds.labels) {
    const unsigned char b = static_cast<unsigned char>(l);
    out.write(reinterpret_cast<const char*>(&b), 1);
  }
  if (!out) throw data_error("save_dataset_cache: write failed");
}

inline LabeledDataset load_dataset_cache(std::istream& in) {
  detail::check_magic(in, "SDLDATA1", "dataset cache");
  const detail::json header = detail::parse_header(in, "dataset cache");
  LabeledDataset ds;
  int m = 0, n = 0, p = 0;
  try {
    m = header.at("m").get<int>();
    n = header.at("n").get<int>();
    p = header.at("p").get<int>();
    ds.class_labels = header.at("labels").get<std::vector<std::string>>();
    ds.normalized = header.at("normalized").get<bool>();
  } catch (const detail::json::exception& e) {
    throw data_error(std::string("dataset cache: malformed header: ") +
                     e.what());
  }
  if (m < 0 || n < 1) {
    throw data_error("dataset cache: bad dimensions in header");
  }
  if (p != static_cast<int>(ds.class_labels.size())) {
    throw data_error("dataset cache: header field p = " + std::to_string(p) +
                     " disagrees with " +
                     std::to_string(ds.class_labels.size()) +
                     " label names");
  }
  ds.signals.resize(m, n);
  std::vector<double> row(n);
  for (int j = 0; j < m; ++j) {
    detail::read_f64_array(in, row.data(), row.size(),
                           "dataset cache signal payload");
    for (int i = 0; i < n; ++i) ds.signals(j, i) = row[i];
  }
  ds.labels.resize(m);
  for (int j = 0; j < m; ++j) {
    unsigned char b = 0;
    in.read(reinterpret_cast<char*>(&b), 1);
    if (in.gcount() != 1) {
      throw data_error("dataset cache: truncated label payload");
    }
    ds.labels[j] = static_cast<int>(b);
  }
  try {
    ds.validate();
  } catch (const std::exception& e) {
    throw data_error(std::string("dataset cache: invalid payload: ") +
                     e.what());
  }
  return ds;
}

inline void save_dataset_cache(const LabeledDataset& ds,
                               const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw data_error("cannot open file for writing: " + path);
  save_dataset_cache(ds, out);
}

inline LabeledDataset load_dataset_cache(const std::string& path) {
  auto in = detail::open_binary(path);
  return load_dataset_cache(static_cast<std::istream&>(in));
}

}  // namespace sdl
