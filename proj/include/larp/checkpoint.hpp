#pragma once

// Model checkpoints. A checkpoint is a directory holding
//   model.txt    — text manifest: format/layout versions, dt, variant,
//                  activation, per-type architecture and normalization stats
//                  (full precision), and a table declaring every weight
//                  tensor's name, shape, and offset;
//   weights.f32  — one little-endian 32-bit float blob, all tensors
//                  concatenated row-major in the declared order.
// Normalization statistics live in the manifest at full double precision;
// the learned weights are stored in single precision.

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "larp/body.hpp"
#include "larp/features.hpp"
#include "larp/model.hpp"
#include "larp/nn.hpp"

namespace larp {

inline constexpr const char* model_format_version = "larp-model-v1";

namespace detail {

inline void write_stat_line(std::ostream& out, const std::string& key,
                            const std::vector<double>& v) {
  out << key << " =";
  for (double x : v) out << ' ' << x;
  out << "\n";
}

inline void write_weights_blob(const std::filesystem::path& path,
                               const std::vector<float>& v) {
  std::FILE* f = std::fopen(path.string().c_str(), "wb");
  if (!f) throw std::runtime_error("cannot open for writing: " + path.string());
  if (!v.empty() && std::fwrite(v.data(), sizeof(float), v.size(), f) != v.size()) {
    std::fclose(f);
    throw std::runtime_error("short write: " + path.string());
  }
  std::fclose(f);
}

inline std::vector<float> read_weights_blob(const std::filesystem::path& path,
                                            size_t expected) {
  std::error_code ec;
  const auto bytes = std::filesystem::file_size(path, ec);
  if (ec) throw std::runtime_error("missing model weights blob: " + path.string());
  if (bytes < expected * sizeof(float))
    throw std::runtime_error("model weights blob truncated: " + path.string());
  if (bytes != expected * sizeof(float))
    throw std::runtime_error("model weights blob size disagrees with manifest: " +
                             path.string());
  std::vector<float> v(expected);
  std::FILE* f = std::fopen(path.string().c_str(), "rb");
  if (!f) throw std::runtime_error("cannot open: " + path.string());
  const size_t got = expected ? std::fread(v.data(), sizeof(float), expected, f) : 0;
  std::fclose(f);
  if (got != expected)
    throw std::runtime_error("model weights blob truncated: " + path.string());
  return v;
}

inline NormStats read_stats(const std::map<std::string, std::string>& kv,
                            const std::string& mu_key, const std::string& sigma_key,
                            size_t dim) {
  NormStats st;
  st.mu = parse_numbers<double>(require_key(kv, mu_key), dim, mu_key);
  st.sigma = parse_numbers<double>(require_key(kv, sigma_key), dim, sigma_key);
  for (double s : st.sigma)
    if (!(s > 0) || !std::isfinite(s))
      throw std::runtime_error("model stats contain a non-positive sigma under " + sigma_key);
  return st;
}

}  // namespace detail

inline void write_model(const std::string& dir, const ModelParams& p) {
  namespace fs = std::filesystem;
  fs::create_directories(dir);
  const auto params = named_params(p);

  std::vector<float> blob;
  {
    size_t total = 0;
    for (const auto& [name, t] : params) total += t->d.size();
    blob.reserve(total);
  }

  std::ofstream out(fs::path(dir) / "model.txt");
  if (!out) throw std::runtime_error("cannot open for writing: " + dir + "/model.txt");
  out.precision(17);
  out << "format = " << model_format_version << "\n";
  out << "layout = " << p.layout << "\n";
  out << "dt = " << p.dt << "\n";
  out << "variant = " << contact_variant_name(p.variant) << "\n";
  out << "disp_feature = " << (p.disp_feature ? 1 : 0) << "\n";
  out << "activation = " << act_name(p.act) << "\n";
  out << "n_types = " << p.types.size() << "\n";
  for (size_t t = 0; t < p.types.size(); ++t) {
    const TypeParams& tp = p.types[t];
    const std::string pre = "type" + std::to_string(t) + ".";
    out << pre << "name = " << tp.name << "\n";
    out << pre << "links = " << tp.n_links << "\n";
    out << pre << "layers = " << tp.spec.layers << "\n";
    out << pre << "hidden = " << tp.spec.hidden << "\n";
    detail::write_stat_line(out, pre + "mu", tp.in_stats.mu);
    detail::write_stat_line(out, pre + "sigma", tp.in_stats.sigma);
    detail::write_stat_line(out, pre + "out_mu", tp.out_stats.mu);
    detail::write_stat_line(out, pre + "out_sigma", tp.out_stats.sigma);
  }
  out << "contact.layers = " << p.contact_spec.layers << "\n";
  out << "contact.hidden = " << p.contact_spec.hidden << "\n";
  detail::write_stat_line(out, "contact.mu", p.contact_stats.mu);
  detail::write_stat_line(out, "contact.sigma", p.contact_stats.sigma);

  out << "n_tensors = " << params.size() << "\n";
  size_t offset = 0;
  for (size_t i = 0; i < params.size(); ++i) {
    const auto& [name, t] = params[i];
    out << "tensor" << i << " = " << name << ' ' << t->rows << ' ' << t->cols << ' '
        << offset << "\n";
    for (double x : t->d) blob.push_back(static_cast<float>(x));
    offset += t->d.size();
  }
  out << "weights = weights.f32\n";
  out.close();
  detail::write_weights_blob(fs::path(dir) / "weights.f32", blob);
}

inline ModelParams read_model(const std::string& dir) {
  namespace fs = std::filesystem;
  std::ifstream in(fs::path(dir) / "model.txt");
  if (!in) throw std::runtime_error("missing model manifest in " + dir);
  auto kv = detail::parse_kv_file(in);
  if (detail::require_key(kv, "format") != model_format_version)
    throw std::runtime_error("model format version mismatch (have " + kv["format"] +
                             ", want " + std::string(model_format_version) + ")");

  ModelParams p;
  p.layout = detail::require_key(kv, "layout");
  if (p.layout != feature_layout_version)
    throw std::runtime_error("model feature layout mismatch (have " + p.layout + ", want " +
                             std::string(feature_layout_version) + ")");
  p.dt = std::stod(detail::require_key(kv, "dt"));
  if (!(p.dt > 0)) throw std::runtime_error("model manifest has a non-positive dt");
  p.variant = contact_variant_from_name(detail::require_key(kv, "variant"));
  p.disp_feature = std::stoi(detail::require_key(kv, "disp_feature")) != 0;
  p.act = act_from_name(detail::require_key(kv, "activation"));

  const int n_types = std::stoi(detail::require_key(kv, "n_types"));
  if (n_types <= 0) throw std::runtime_error("model manifest declares no body types");
  for (int t = 0; t < n_types; ++t) {
    const std::string pre = "type" + std::to_string(t) + ".";
    TypeParams tp;
    tp.name = detail::require_key(kv, pre + "name");
    tp.n_links = std::stoi(detail::require_key(kv, pre + "links"));
    const int layers = std::stoi(detail::require_key(kv, pre + "layers"));
    const int hidden = std::stoi(detail::require_key(kv, pre + "hidden"));
    if (tp.n_links <= 0 || layers <= 0 || hidden <= 0)
      throw std::runtime_error("model manifest has non-positive dimensions for " + tp.name);
    tp.spec = MlpSpec{dyn_feature_dim(tp.n_links), vel_dim * tp.n_links, hidden, layers, p.act};
    tp.in_stats = detail::read_stats(kv, pre + "mu", pre + "sigma",
                                     static_cast<size_t>(tp.spec.in));
    tp.out_stats = detail::read_stats(kv, pre + "out_mu", pre + "out_sigma",
                                      static_cast<size_t>(tp.spec.out));
    tp.mlp.w.resize(static_cast<size_t>(layers));
    tp.mlp.b.resize(static_cast<size_t>(layers));
    for (int l = 0; l < layers; ++l) {
      tp.mlp.w[static_cast<size_t>(l)] = Tensor(tp.spec.layer_in(l), tp.spec.layer_out(l));
      tp.mlp.b[static_cast<size_t>(l)] = Tensor(1, tp.spec.layer_out(l));
    }
    p.types.push_back(std::move(tp));
  }
  {
    const int layers = std::stoi(detail::require_key(kv, "contact.layers"));
    const int hidden = std::stoi(detail::require_key(kv, "contact.hidden"));
    if (layers <= 0 || hidden <= 0)
      throw std::runtime_error("model manifest has non-positive contact dimensions");
    p.contact_spec = MlpSpec{pair_dim, phat_dim, hidden, layers, p.act};
    p.contact_stats = detail::read_stats(kv, "contact.mu", "contact.sigma", pair_dim);
    p.contact_mlp.w.resize(static_cast<size_t>(layers));
    p.contact_mlp.b.resize(static_cast<size_t>(layers));
    for (int l = 0; l < layers; ++l) {
      p.contact_mlp.w[static_cast<size_t>(l)] =
          Tensor(p.contact_spec.layer_in(l), p.contact_spec.layer_out(l));
      p.contact_mlp.b[static_cast<size_t>(l)] = Tensor(1, p.contact_spec.layer_out(l));
    }
  }

  // The tensor table must agree exactly with the architecture declared above:
  // same names, shapes, and consecutive offsets in the canonical order.
  auto params = named_params(p);
  const size_t n_tensors = std::stoul(detail::require_key(kv, "n_tensors"));
  if (n_tensors != params.size())
    throw std::runtime_error("model manifest tensor table disagrees with the declared "
                             "architecture (have " + std::to_string(n_tensors) + " tensors, "
                             "expected " + std::to_string(params.size()) + ")");
  size_t offset = 0;
  for (size_t i = 0; i < params.size(); ++i) {
    const std::string key = "tensor" + std::to_string(i);
    std::istringstream ss(detail::require_key(kv, key));
    std::string name;
    long long rows = -1, cols = -1, off = -1;
    ss >> name >> rows >> cols >> off;
    if (!ss || name != params[i].first || rows != params[i].second->rows ||
        cols != params[i].second->cols || off != static_cast<long long>(offset))
      throw std::runtime_error("model manifest tensor table disagrees with the declared "
                               "architecture at " + key);
    offset += params[i].second->d.size();
  }

  const std::vector<float> blob = detail::read_weights_blob(
      fs::path(dir) / detail::require_key(kv, "weights"), offset);
  size_t pos = 0;
  for (auto& [name, t] : params) {
    for (double& x : t->d) x = static_cast<double>(blob[pos++]);
  }
  return p;
}

}  // namespace larp
