// Synthetic distribution-shift data and the dataset container.

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>

#include "gmoe/data/synthetic.hpp"
#include "gmoe/rng.hpp"

using namespace gmoe;
namespace fs = std::filesystem;

TEST_CASE("feature basis is orthonormal with unit columns") {
  RngStream rng(1);
  for (std::size_t k : {1, 2, 4, 7}) {
    Tensor<double> b = make_feature_basis(k, rng);
    for (std::size_t i = 0; i < k; ++i)
      for (std::size_t j = 0; j < k; ++j) {
        double dot = 0;
        for (std::size_t r = 0; r < k; ++r) dot += b.at(r, i) * b.at(r, j);
        CHECK(std::abs(dot - (i == j ? 1.0 : 0.0)) <= 1e-9);
      }
  }
  Tensor<double> one = make_feature_basis(1, rng);
  CHECK(std::abs(std::abs(one.at(0, 0)) - 1.0) <= 1e-12);
}

TEST_CASE("noiseless generation plants both features exactly") {
  SyntheticSpec spec;
  spec.n_train = 500;
  spec.n_eval = 200;
  spec.seed = 7;
  SyntheticDataset ds = generate(spec);
  CHECK(ds.train.size() == 500);
  CHECK(ds.val.size() == 200);

  const std::size_t k = spec.classes, p = spec.patches;
  for (const Split* s : {&ds.train, &ds.val}) {
    for (std::size_t i = 0; i < s->size(); ++i) {
      const std::int32_t y = s->labels[i];
      // pixel feature: exactly index y of patch 0 set to one
      CHECK(s->pixel_index[i] == y);
      CHECK(s->x.at(i, static_cast<std::size_t>(y)) == 1.0);
      // patch feature: the recorded patch equals basis column y exactly
      const auto fp = static_cast<std::size_t>(s->feature_patch[i]);
      CHECK(fp >= 1);
      CHECK(fp < p);
      for (std::size_t j = 0; j < k; ++j)
        CHECK(s->x.at(i, fp * k + j) ==
              ds.basis.at(j, static_cast<std::size_t>(y)));
    }
  }

  // Labels uniform within 3 sigma of the multinomial expectation.
  std::vector<std::size_t> counts(k, 0);
  for (auto y : ds.train.labels) ++counts[static_cast<std::size_t>(y)];
  const double expect = 500.0 / static_cast<double>(k);
  const double sigma = std::sqrt(500.0 * (1.0 / k) * (1.0 - 1.0 / k));
  for (auto c : counts)
    CHECK(std::abs(static_cast<double>(c) - expect) <= 3 * sigma);
}

TEST_CASE("test splits corrupt exactly one feature") {
  SyntheticSpec spec;
  spec.n_train = 50;
  spec.n_eval = 400;
  spec.seed = 11;
  SyntheticDataset ds = generate(spec);
  const std::size_t k = spec.classes, p = spec.patches;

  // test1: patch feature belongs to class (y+1) mod K; no patch of any
  // sample equals the own-class basis vector. Pixel feature stays faithful.
  for (std::size_t i = 0; i < ds.test1.size(); ++i) {
    const auto y = static_cast<std::size_t>(ds.test1.labels[i]);
    CHECK(ds.test1.pixel_index[i] == ds.test1.labels[i]);
    const auto fp = static_cast<std::size_t>(ds.test1.feature_patch[i]);
    for (std::size_t j = 0; j < k; ++j)
      CHECK(ds.test1.x.at(i, fp * k + j) == ds.basis.at(j, (y + 1) % k));
    // direct scan: own-class vector appears in no patch
    for (std::size_t q = 0; q < p; ++q) {
      bool equal = true;
      for (std::size_t j = 0; j < k; ++j)
        if (ds.test1.x.at(i, q * k + j) != ds.basis.at(j, y)) {
          equal = false;
          break;
        }
      CHECK_FALSE(equal);
    }
  }

  // test2: pixel index points at (y+1) mod K; patch feature stays faithful.
  for (std::size_t i = 0; i < ds.test2.size(); ++i) {
    const auto y = static_cast<std::size_t>(ds.test2.labels[i]);
    CHECK(static_cast<std::size_t>(ds.test2.pixel_index[i]) == (y + 1) % k);
    const auto fp = static_cast<std::size_t>(ds.test2.feature_patch[i]);
    for (std::size_t j = 0; j < k; ++j)
      CHECK(ds.test2.x.at(i, fp * k + j) == ds.basis.at(j, y));
  }
}

TEST_CASE("noisy variant hits the binomial rate within 3 sigma") {
  SyntheticSpec spec;
  spec.n_train = 20000;
  spec.n_eval = 100;
  spec.p1 = 0.9;
  spec.p2 = 0.9;
  spec.seed = 13;
  SyntheticDataset ds = generate(spec);

  std::size_t pixel_hits = 0, patch_hits = 0;
  const std::size_t k = spec.classes;
  for (std::size_t i = 0; i < ds.train.size(); ++i) {
    if (ds.train.pixel_index[i] == ds.train.labels[i]) ++pixel_hits;
    const auto fp = static_cast<std::size_t>(ds.train.feature_patch[i]);
    bool own = true;
    for (std::size_t j = 0; j < k; ++j)
      if (ds.train.x.at(i, fp * k + j) !=
          ds.basis.at(j, static_cast<std::size_t>(ds.train.labels[i]))) {
        own = false;
        break;
      }
    if (own) ++patch_hits;
  }
  const double n = 20000.0;
  const double sigma = std::sqrt(n * 0.9 * 0.1);
  CHECK(std::abs(pixel_hits - 0.9 * n) <= 3 * sigma);
  CHECK(std::abs(patch_hits - 0.9 * n) <= 3 * sigma);
}

TEST_CASE("generation is deterministic in the spec seed") {
  SyntheticSpec spec;
  spec.n_train = 300;
  spec.n_eval = 100;
  spec.seed = 21;
  SyntheticDataset a = generate(spec);
  SyntheticDataset b = generate(spec);
  CHECK(std::memcmp(a.train.x.data(), b.train.x.data(),
                    sizeof(double) * a.train.x.size()) == 0);
  CHECK(a.train.labels == b.train.labels);
  CHECK(a.test2.labels == b.test2.labels);
  spec.seed = 22;
  SyntheticDataset c = generate(spec);
  CHECK(std::memcmp(a.train.x.data(), c.train.x.data(),
                    sizeof(double) * a.train.x.size()) != 0);
}

TEST_CASE("nearest-basis classifier over patches is perfect when p2=1") {
  SyntheticSpec spec;
  spec.n_train = 400;
  spec.n_eval = 100;
  spec.seed = 31;
  SyntheticDataset ds = generate(spec);
  const std::size_t k = spec.classes, p = spec.patches;

  std::size_t correct = 0;
  for (std::size_t i = 0; i < ds.train.size(); ++i) {
    // Classify by the patch closest to any basis column.
    double best = 1e300;
    std::size_t best_class = 0;
    for (std::size_t q = 1; q < p; ++q)
      for (std::size_t c = 0; c < k; ++c) {
        double dist = 0;
        for (std::size_t j = 0; j < k; ++j) {
          const double d = ds.train.x.at(i, q * k + j) - ds.basis.at(j, c);
          dist += d * d;
        }
        if (dist < best) {
          best = dist;
          best_class = c;
        }
      }
    if (static_cast<std::int32_t>(best_class) == ds.train.labels[i]) ++correct;
  }
  CHECK(correct == ds.train.size());
}

TEST_CASE("token clusters: recoverable assignments and balanced labels") {
  TokenClusterSpec spec;
  spec.n_train = 500;
  spec.n_eval = 200;
  spec.seed = 41;
  SyntheticDataset ds = generate_token_clusters(spec);
  const std::size_t t = spec.tokens, d = spec.dim, c = spec.clusters;

  std::size_t hits = 0, total = 0;
  for (std::size_t s = 0; s < ds.train.size(); ++s)
    for (std::size_t tok = 0; tok < t; ++tok) {
      double best = 1e300;
      std::size_t nearest = 0;
      for (std::size_t cid = 0; cid < c; ++cid) {
        double dist = 0;
        for (std::size_t j = 0; j < d; ++j) {
          const double diff =
              ds.train.x.at(s, tok * d + j) - ds.basis.at(cid, j);
          dist += diff * diff;
        }
        if (dist < best) {
          best = dist;
          nearest = cid;
        }
      }
      ++total;
      if (static_cast<std::int32_t>(nearest) ==
          ds.train.token_attr[s * t + tok])
        ++hits;
    }
  CHECK(static_cast<double>(hits) / static_cast<double>(total) >= 0.999);

  // Majority-label rule and 3-sigma balance.
  std::vector<std::size_t> counts(c, 0);
  for (auto y : ds.train.labels) ++counts[static_cast<std::size_t>(y)];
  const double expect = 500.0 / static_cast<double>(c);
  const double sigma = std::sqrt(500.0 * (1.0 / c) * (1.0 - 1.0 / c));
  for (auto cnt : counts)
    CHECK(std::abs(static_cast<double>(cnt) - expect) <= 3.5 * sigma);

  CHECK_THROWS_AS(generate_token_clusters(TokenClusterSpec{1, 4, 8, 10, 10, 0}),
                  ShapeError);
}

TEST_CASE("dataset save/load round trip is bit-identical") {
  SyntheticSpec spec;
  spec.n_train = 120;
  spec.n_eval = 40;
  spec.p1 = 0.8;
  spec.p2 = 0.95;
  spec.seed = 51;
  SyntheticDataset ds = generate(spec);

  const fs::path path = fs::temp_directory_path() / "gmoe_test_ds.gmds";
  save_dataset(ds, path);
  SyntheticDataset back = load_dataset(path);

  CHECK(back.spec.patches == spec.patches);
  CHECK(back.spec.classes == spec.classes);
  CHECK(back.spec.p1 == spec.p1);
  CHECK(back.spec.p2 == spec.p2);
  CHECK(back.spec.seed == spec.seed);
  CHECK(std::memcmp(back.train.x.data(), ds.train.x.data(),
                    sizeof(double) * ds.train.x.size()) == 0);
  CHECK(back.train.labels == ds.train.labels);
  CHECK(back.test1.pixel_index == ds.test1.pixel_index);
  CHECK(std::memcmp(back.basis.data(), ds.basis.data(),
                    sizeof(double) * ds.basis.size()) == 0);

  // A flipped byte must surface as a checksum error.
  {
    std::fstream f(path, std::ios::in | std::ios::out | std::ios::binary);
    f.seekp(200);
    char c;
    f.seekg(200);
    f.get(c);
    f.seekp(200);
    f.put(static_cast<char>(c ^ 0x5A));
  }
  CHECK_THROWS_AS(load_dataset(path), IoError);

  // Wrong magic is reported as such.
  save_dataset(ds, path);
  {
    std::fstream f(path, std::ios::in | std::ios::out | std::ios::binary);
    f.seekp(0);
    f.write("XXXX0001", 8);
  }
  try {
    load_dataset(path);
    FAIL("expected IoError");
  } catch (const IoError& e) {
    const std::string what = e.what();
    CHECK(what.find("magic") != std::string::npos);
  }
  fs::remove(path);
}
