#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "gmoe/core/tensor.hpp"
#include "gmoe/model/config.hpp"
#include "gmoe/rng.hpp"

// Synthetic distribution-shift data. Patch datasets plant two exact
// correlations per sample: a pixel-level feature (pixel y of patch 0 set
// to 1) and a patch-level feature (one of patches 1..P-1 set to basis
// vector c_y). The test splits corrupt exactly one of them:
//   test1: patch feature drawn for class (y+1) mod K  (pixel stays faithful)
//   test2: pixel feature drawn for class (y+1) mod K  (patch stays faithful)
// With p1 = p2 = 1 the train/val features are deterministic; otherwise each
// feature points at the true class with its probability and at a uniformly
// chosen other class with the rest.

namespace gmoe {

struct SyntheticSpec {
  std::size_t patches = 10;   // P
  std::size_t classes = 4;    // K (also the pixel dimension of one patch)
  std::size_t n_train = 100000;
  std::size_t n_eval = 2000;  // val and each test split
  double p1 = 1.0;            // pixel-feature fidelity
  double p2 = 1.0;            // patch-feature fidelity
  std::uint64_t seed = 0;

  void validate() const;
};

struct TokenClusterSpec {
  std::size_t clusters = 4;  // C; also the number of classes
  std::size_t tokens = 8;    // tokens per sample
  std::size_t dim = 16;      // token dimension
  std::size_t n_train = 4096;
  std::size_t n_eval = 1024;
  std::uint64_t seed = 0;

  void validate() const;
};

struct Split {
  Tensor<double> x;  // [n, width] flattened samples
  std::vector<std::int32_t> labels;
  // patch datasets: per-sample metadata
  std::vector<std::int32_t> feature_patch;  // which patch carries c
  std::vector<std::int32_t> pixel_index;    // which pixel of patch 0 is set
  // token-cluster datasets: cluster of each token, [n * tokens]
  std::vector<std::int32_t> token_attr;

  std::size_t size() const { return labels.size(); }
};

struct SyntheticDataset {
  enum class Kind { patches, token_clusters };
  Kind kind = Kind::patches;
  SyntheticSpec spec;
  TokenClusterSpec cluster_spec;
  Tensor<double> basis;  // patches: [K, K] orthonormal columns;
                         // clusters: [C, dim] centers as rows
  Split train, val, test1, test2;

  std::size_t num_classes() const {
    return kind == Kind::patches ? spec.classes : cluster_spec.clusters;
  }
  std::size_t sample_width() const {
    return kind == Kind::patches ? spec.patches * spec.classes
                                 : cluster_spec.tokens * cluster_spec.dim;
  }
  // Token-style input spec for the models.
  InputSpec input_spec() const {
    InputSpec in;
    in.kind = InputSpec::Kind::tokens;
    if (kind == Kind::patches) {
      in.tokens = spec.patches;
      in.token_dim = spec.classes;
    } else {
      in.tokens = cluster_spec.tokens;
      in.token_dim = cluster_spec.dim;
    }
    return in;
  }
  const Split& split(const std::string& name) const;
};

// K orthonormal feature vectors as columns (a random rotation of identity).
Tensor<double> make_feature_basis(std::size_t k, RngStream& rng);

SyntheticDataset generate(const SyntheticSpec& spec);
SyntheticDataset generate_token_clusters(const TokenClusterSpec& spec);

void save_dataset(const SyntheticDataset& ds, const std::filesystem::path& path);
SyntheticDataset load_dataset(const std::filesystem::path& path);

}  // namespace gmoe
