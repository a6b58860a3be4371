#include "gmoe/data/synthetic.hpp"

#include <algorithm>
#include <cmath>

#include "gmoe/data/container.hpp"
#include "gmoe/error.hpp"

namespace gmoe {

void SyntheticSpec::validate() const {
  if (patches < 2) throw ShapeError("synthetic spec: patches must be >= 2");
  if (classes < 2) throw ShapeError("synthetic spec: classes must be >= 2");
  if (!(p1 > 0.0 && p1 <= 1.0) || !(p2 > 0.0 && p2 <= 1.0))
    throw ShapeError("synthetic spec: p1, p2 must lie in (0, 1]");
  if (n_train == 0 || n_eval == 0)
    throw ShapeError("synthetic spec: empty split requested");
}

void TokenClusterSpec::validate() const {
  if (clusters < 2) throw ShapeError("token clusters: need at least 2 clusters");
  if (dim < clusters)
    throw ShapeError("token clusters: dim must be >= clusters for separated centers");
  if (tokens == 0 || n_train == 0 || n_eval == 0)
    throw ShapeError("token clusters: empty dimension");
}

const Split& SyntheticDataset::split(const std::string& name) const {
  if (name == "train") return train;
  if (name == "val") return val;
  if (name == "test1") return test1;
  if (name == "test2") return test2;
  throw ShapeError("unknown split '" + name + "'");
}

Tensor<double> make_feature_basis(std::size_t k, RngStream& rng) {
  if (k == 0) throw ShapeError("make_feature_basis: k must be >= 1");
  Tensor<double> basis({k, k});  // columns are the feature vectors
  std::vector<std::vector<double>> cols;
  while (cols.size() < k) {
    std::vector<double> v(k);
    for (auto& x : v) x = rng.gaussian();
    // Gram-Schmidt against accepted columns.
    for (const auto& u : cols) {
      double dot = 0;
      for (std::size_t i = 0; i < k; ++i) dot += v[i] * u[i];
      for (std::size_t i = 0; i < k; ++i) v[i] -= dot * u[i];
    }
    double norm = 0;
    for (double x : v) norm += x * x;
    norm = std::sqrt(norm);
    if (norm < 1e-6) continue;  // redraw near-dependent vectors
    for (auto& x : v) x /= norm;
    cols.push_back(std::move(v));
  }
  for (std::size_t c = 0; c < k; ++c)
    for (std::size_t r = 0; r < k; ++r) basis.at(r, c) = cols[c][r];
  return basis;
}

namespace {

enum class Corrupt { none, patch_feature, pixel_feature };

// Feature class index: the base class with probability p, otherwise a
// uniformly chosen different class.
std::size_t noisy_class(std::size_t base, std::size_t k, double p,
                        RngStream& rng) {
  if (p >= 1.0 || rng.uniform() < p) return base;
  std::size_t other = rng.uniform_int(k - 1);
  if (other >= base) ++other;
  return other;
}

Split generate_split(const SyntheticSpec& spec, const Tensor<double>& basis,
                     std::size_t n, Corrupt corrupt, RngStream rng) {
  const std::size_t p = spec.patches, k = spec.classes;
  Split out;
  out.x = Tensor<double>({n, p * k});
  out.labels.resize(n);
  out.feature_patch.resize(n);
  out.pixel_index.resize(n);

  for (std::size_t s = 0; s < n; ++s) {
    const std::size_t y = rng.uniform_int(k);
    out.labels[s] = static_cast<std::int32_t>(y);
    double* row = out.x.data() + s * p * k;

    const std::size_t pixel_base =
        corrupt == Corrupt::pixel_feature ? (y + 1) % k : y;
    const std::size_t patch_base =
        corrupt == Corrupt::patch_feature ? (y + 1) % k : y;

    // Pixel-level feature in patch 0: all pixels noise, one pinned to 1.
    for (std::size_t j = 0; j < k; ++j) row[j] = rng.gaussian();
    const std::size_t pix = noisy_class(pixel_base, k, spec.p1, rng);
    row[pix] = 1.0;
    out.pixel_index[s] = static_cast<std::int32_t>(pix);

    // Patch-level feature: one patch among 1..P-1 set to a basis column.
    const std::size_t fpatch = 1 + rng.uniform_int(p - 1);
    const std::size_t fclass = noisy_class(patch_base, k, spec.p2, rng);
    out.feature_patch[s] = static_cast<std::int32_t>(fpatch);
    for (std::size_t q = 1; q < p; ++q) {
      double* patch = row + q * k;
      if (q == fpatch) {
        for (std::size_t j = 0; j < k; ++j) patch[j] = basis.at(j, fclass);
      } else {
        for (std::size_t j = 0; j < k; ++j) patch[j] = rng.gaussian();
      }
    }
  }
  return out;
}

}  // namespace

SyntheticDataset generate(const SyntheticSpec& spec) {
  spec.validate();
  RngPool pool(spec.seed);
  SyntheticDataset ds;
  ds.kind = SyntheticDataset::Kind::patches;
  ds.spec = spec;
  RngStream basis_rng = pool.stream("basis");
  ds.basis = make_feature_basis(spec.classes, basis_rng);
  ds.train = generate_split(spec, ds.basis, spec.n_train, Corrupt::none,
                            pool.stream("split:train"));
  ds.val = generate_split(spec, ds.basis, spec.n_eval, Corrupt::none,
                          pool.stream("split:val"));
  ds.test1 = generate_split(spec, ds.basis, spec.n_eval, Corrupt::patch_feature,
                            pool.stream("split:test1"));
  ds.test2 = generate_split(spec, ds.basis, spec.n_eval, Corrupt::pixel_feature,
                            pool.stream("split:test2"));
  return ds;
}

namespace {

Split generate_cluster_split(const TokenClusterSpec& spec,
                             const Tensor<double>& centers, std::size_t n,
                             RngStream rng) {
  const std::size_t t = spec.tokens, d = spec.dim, c = spec.clusters;
  Split out;
  out.x = Tensor<double>({n, t * d});
  out.labels.resize(n);
  out.token_attr.resize(n * t);

  std::vector<std::size_t> counts(c);
  for (std::size_t s = 0; s < n; ++s) {
    std::fill(counts.begin(), counts.end(), 0);
    double* row = out.x.data() + s * t * d;
    for (std::size_t tok = 0; tok < t; ++tok) {
      const std::size_t cid = rng.uniform_int(c);
      out.token_attr[s * t + tok] = static_cast<std::int32_t>(cid);
      ++counts[cid];
      for (std::size_t j = 0; j < d; ++j)
        row[tok * d + j] = centers.at(cid, j) + rng.gaussian();
    }
    // Label: most frequent cluster, ties toward the lowest id.
    std::size_t best = 0;
    for (std::size_t j = 1; j < c; ++j)
      if (counts[j] > counts[best]) best = j;
    out.labels[s] = static_cast<std::int32_t>(best);
  }
  return out;
}

}  // namespace

SyntheticDataset generate_token_clusters(const TokenClusterSpec& spec) {
  spec.validate();
  RngPool pool(spec.seed);
  SyntheticDataset ds;
  ds.kind = SyntheticDataset::Kind::token_clusters;
  ds.cluster_spec = spec;

  // Orthogonal directions scaled so centers sit ~7 sigma apart (unit token
  // noise): distance between two orthogonal radius-5 centers is 5*sqrt(2).
  RngStream crng = pool.stream("centers");
  const double radius = 5.0;
  Tensor<double> dirs = make_feature_basis(spec.dim, crng);
  ds.basis = Tensor<double>({spec.clusters, spec.dim});
  for (std::size_t i = 0; i < spec.clusters; ++i)
    for (std::size_t j = 0; j < spec.dim; ++j)
      ds.basis.at(i, j) = radius * dirs.at(j, i);

  ds.train = generate_cluster_split(spec, ds.basis, spec.n_train,
                                    pool.stream("split:train"));
  ds.val = generate_cluster_split(spec, ds.basis, spec.n_eval,
                                  pool.stream("split:val"));
  ds.test1 = generate_cluster_split(spec, ds.basis, spec.n_eval,
                                    pool.stream("split:test1"));
  ds.test2 = generate_cluster_split(spec, ds.basis, spec.n_eval,
                                    pool.stream("split:test2"));
  return ds;
}

// ------------------------------------------------------------------- i/o ---

namespace {

void add_split(ContainerWriter& w, const std::string& name, const Split& s,
               SyntheticDataset::Kind kind, std::size_t tokens) {
  w.add_f64(name + ".x", {s.x.rows(), s.x.cols()}, s.x.data());
  w.add_i32(name + ".labels", {s.labels.size()}, s.labels.data());
  if (kind == SyntheticDataset::Kind::patches) {
    w.add_i32(name + ".feature_patch", {s.feature_patch.size()},
              s.feature_patch.data());
    w.add_i32(name + ".pixel_index", {s.pixel_index.size()},
              s.pixel_index.data());
  } else {
    w.add_i32(name + ".token_attr", {s.labels.size(), tokens},
              s.token_attr.data());
  }
}

Split read_split(const Container& c, const std::string& name,
                 SyntheticDataset::Kind kind) {
  Split s;
  const auto& xa = c.at(name + ".x");
  s.x = Tensor<double>::from({xa.shape[0], xa.shape[1]}, xa.as_f64());
  s.labels = c.at(name + ".labels").as_i32();
  if (kind == SyntheticDataset::Kind::patches) {
    s.feature_patch = c.at(name + ".feature_patch").as_i32();
    s.pixel_index = c.at(name + ".pixel_index").as_i32();
  } else {
    s.token_attr = c.at(name + ".token_attr").as_i32();
  }
  return s;
}

}  // namespace

void save_dataset(const SyntheticDataset& ds, const std::filesystem::path& path) {
  ContainerWriter w(kDatasetMagic);
  auto& meta = w.meta();
  if (ds.kind == SyntheticDataset::Kind::patches) {
    meta["kind"] = "patches";
    meta["spec"] = {{"patches", ds.spec.patches}, {"classes", ds.spec.classes},
                    {"n_train", ds.spec.n_train}, {"n_eval", ds.spec.n_eval},
                    {"p1", ds.spec.p1},           {"p2", ds.spec.p2},
                    {"seed", ds.spec.seed}};
  } else {
    meta["kind"] = "token_clusters";
    meta["spec"] = {{"clusters", ds.cluster_spec.clusters},
                    {"tokens", ds.cluster_spec.tokens},
                    {"dim", ds.cluster_spec.dim},
                    {"n_train", ds.cluster_spec.n_train},
                    {"n_eval", ds.cluster_spec.n_eval},
                    {"seed", ds.cluster_spec.seed}};
  }
  w.add_f64("basis", {ds.basis.rows(), ds.basis.cols()}, ds.basis.data());
  const std::size_t tokens = ds.kind == SyntheticDataset::Kind::patches
                                 ? ds.spec.patches
                                 : ds.cluster_spec.tokens;
  add_split(w, "train", ds.train, ds.kind, tokens);
  add_split(w, "val", ds.val, ds.kind, tokens);
  add_split(w, "test1", ds.test1, ds.kind, tokens);
  add_split(w, "test2", ds.test2, ds.kind, tokens);
  w.write(path);
}

SyntheticDataset load_dataset(const std::filesystem::path& path) {
  Container c = Container::read(path, kDatasetMagic);
  SyntheticDataset ds;
  const std::string kind = c.meta.at("kind").get<std::string>();
  const auto& spec = c.meta.at("spec");
  if (kind == "patches") {
    ds.kind = SyntheticDataset::Kind::patches;
    ds.spec.patches = spec.at("patches").get<std::size_t>();
    ds.spec.classes = spec.at("classes").get<std::size_t>();
    ds.spec.n_train = spec.at("n_train").get<std::size_t>();
    ds.spec.n_eval = spec.at("n_eval").get<std::size_t>();
    ds.spec.p1 = spec.at("p1").get<double>();
    ds.spec.p2 = spec.at("p2").get<double>();
    ds.spec.seed = spec.at("seed").get<std::uint64_t>();
  } else if (kind == "token_clusters") {
    ds.kind = SyntheticDataset::Kind::token_clusters;
    ds.cluster_spec.clusters = spec.at("clusters").get<std::size_t>();
    ds.cluster_spec.tokens = spec.at("tokens").get<std::size_t>();
    ds.cluster_spec.dim = spec.at("dim").get<std::size_t>();
    ds.cluster_spec.n_train = spec.at("n_train").get<std::size_t>();
    ds.cluster_spec.n_eval = spec.at("n_eval").get<std::size_t>();
    ds.cluster_spec.seed = spec.at("seed").get<std::uint64_t>();
  } else {
    throw IoError("unknown dataset kind '" + kind + "' in " + path.string());
  }
  const auto& ba = c.at("basis");
  ds.basis = Tensor<double>::from({ba.shape[0], ba.shape[1]}, ba.as_f64());
  ds.train = read_split(c, "train", ds.kind);
  ds.val = read_split(c, "val", ds.kind);
  ds.test1 = read_split(c, "test1", ds.kind);
  ds.test2 = read_split(c, "test2", ds.kind);
  return ds;
}

}  // namespace gmoe
