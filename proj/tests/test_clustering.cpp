#include <doctest.h>

#include <algorithm>
#include <filesystem>
#include <numeric>
#include <random>
#include <set>

#include "encodenet/clustering.hpp"
#include "encodenet/model_spec.hpp"
#include "encodenet/network.hpp"
#include "support/kmeans_oracle.hpp"

using namespace encodenet;

namespace {

FeatureMatrix random_points(std::size_t n, std::size_t d, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<float> g(0.0f, 1.0f);
  std::vector<float> v(n * d);
  for (auto& x : v) x = g(rng);
  return FeatureMatrix(n, d, std::move(v));
}

// Three tight, well separated groups in d dimensions.
FeatureMatrix blobs(std::size_t per, std::size_t d, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<float> g(0.0f, 0.1f);
  std::vector<float> v;
  for (int c = 0; c < 3; ++c)
    for (std::size_t i = 0; i < per; ++i)
      for (std::size_t j = 0; j < d; ++j) v.push_back(static_cast<float>(10 * c * (j == 0)) + g(rng));
  return FeatureMatrix(3 * per, d, std::move(v));
}

}  // namespace

TEST_CASE("12 random 2-D points, k=2: nearest-centroid and member-mean oracle") {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const FeatureMatrix f = random_points(12, 2, 100 + seed);
    const ClusterModel m = kmeans(f, 2, seed);
    CHECK(m.converged);
    CHECK(kmeans_oracle::check(f, m).ok());
    for (std::size_t i = 0; i < 12; ++i) CHECK(nearest_centroid(m, f.row(i)) == m.assignments[i]);
  }
}

TEST_CASE("property sweep on random instances up to 100 points") {
  std::mt19937_64 rng(77);
  for (int trial = 0; trial < 60; ++trial) {
    const std::size_t n = 5 + rng() % 96;
    const std::size_t d = 1 + rng() % 8;
    const int k = 1 + static_cast<int>(rng() % std::min<std::size_t>(n, 8));
    const FeatureMatrix f = random_points(n, d, rng());
    const ClusterModel m = kmeans(f, k, rng());
    const auto v = kmeans_oracle::check(f, m);
    INFO("n=" << n << " d=" << d << " k=" << k);
    CHECK(v.sse_monotone);
    CHECK(v.fixed_point);
    CHECK(v.no_empty_cluster);
    CHECK(v.centroid_error < 1e-5);
  }
}

TEST_CASE("k = N gives zero SSE; duplicated pairs co-cluster") {
  const FeatureMatrix f = random_points(7, 3, 5);
  const ClusterModel m = kmeans(f, 7, 1);
  CHECK(m.sse() == doctest::Approx(0.0).epsilon(1e-12));
  CHECK(std::set<int>(m.assignments.begin(), m.assignments.end()).size() == 7);

  const FeatureMatrix pairs(4, 2, {0, 0, 0, 0, 50, 50, 50, 50});
  const ClusterModel p = kmeans(pairs, 2, 3);
  CHECK(p.sse() == 0.0);
  CHECK(p.assignments[0] == p.assignments[1]);
  CHECK(p.assignments[2] == p.assignments[3]);
  CHECK(p.assignments[0] != p.assignments[2]);

  CHECK_THROWS_AS(kmeans(f, 0, 1), ValidationError);
  CHECK_THROWS_AS(kmeans(f, 8, 1), ValidationError);
}

TEST_CASE("k-means is invariant to row permutation, up to labels") {
  const FeatureMatrix f = blobs(10, 3, 2);
  std::vector<std::size_t> perm(f.rows);
  std::iota(perm.begin(), perm.end(), 0);
  std::shuffle(perm.begin(), perm.end(), std::mt19937_64(4));
  const FeatureMatrix g = f.select(perm);
  const ClusterModel a = kmeans(f, 3, 8), b = kmeans(g, 3, 8);
  CHECK(a.sse() == doctest::Approx(b.sse()).epsilon(1e-9));
  // same partition: two points share a cluster in one iff they do in the other
  for (std::size_t i = 0; i < f.rows; ++i)
    for (std::size_t j = 0; j < f.rows; ++j) {
      const std::size_t pi = static_cast<std::size_t>(std::find(perm.begin(), perm.end(), i) - perm.begin());
      const std::size_t pj = static_cast<std::size_t>(std::find(perm.begin(), perm.end(), j) - perm.begin());
      CHECK((a.assignments[i] == a.assignments[j]) == (b.assignments[pi] == b.assignments[pj]));
    }
}

TEST_CASE("k-means++ seeds are distinct points and deterministic") {
  const FeatureMatrix f = blobs(8, 2, 3);
  const auto s = kmeans_plus_plus(f, 3, 11);
  CHECK(s.size() == 3);
  CHECK(std::set<std::size_t>(s.begin(), s.end()).size() == 3);
  CHECK(kmeans_plus_plus(f, 3, 11) == s);
  // one seed per blob, since every other point has ~zero weight
  std::set<std::size_t> groups;
  for (const auto i : s) groups.insert(i / 8);
  CHECK(groups.size() == 3);
}

TEST_CASE("explicit initial centroids with an empty cluster get reseeded") {
  const FeatureMatrix f(6, 1, {0, 0.1f, 0.2f, 10, 10.1f, 10.2f});
  // second centroid far from every point starts empty
  const ClusterModel m = kmeans_from_centroids(f, {0.1, 1000.0}, 2);
  CHECK(kmeans_oracle::check(f, m).ok());
  CHECK(m.sse() == doctest::Approx(0.04).epsilon(1e-5));
}

TEST_CASE("elbow on the hand-worked curve picks k = 3") {
  // Axis-normalised points (x = (k-1)/5, y = (sse-11)/89); chord x + y = 1.
  // Distances |x + y - 1| / sqrt 2: k=2 0.3353, k=3 0.3925, k=4 0.2670.
  const int ks[] = {1, 2, 3, 4, 5, 6};
  const double sse[] = {100, 40, 15, 13, 12, 11};
  const ElbowResult r = elbow_from_curve(ks, sse);
  CHECK(r.k == 3);
  CHECK_FALSE(r.degenerate);
  CHECK(r.chord_distance[1] == doctest::Approx((1 - 0.2 - 29.0 / 89) / std::sqrt(2.0)));
  CHECK(r.chord_distance[2] == doctest::Approx((1 - 0.4 - 4.0 / 89) / std::sqrt(2.0)));
  CHECK(r.chord_distance[3] == doctest::Approx((1 - 0.6 - 2.0 / 89) / std::sqrt(2.0)));
  CHECK(r.chord_distance.front() == doctest::Approx(0.0));
  CHECK(r.chord_distance.back() == doctest::Approx(0.0));
}

TEST_CASE("elbow choice does not depend on SSE units") {
  const int ks[] = {1, 2, 3, 4, 5, 6};
  std::mt19937_64 rng(6);
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<double> sse{1000};
    std::uniform_real_distribution<double> drop(0.05, 0.9);
    for (int i = 1; i < 6; ++i) sse.push_back(sse.back() * drop(rng));
    std::vector<double> scaled = sse;
    for (auto& s : scaled) s *= 3.7e-4;
    CHECK(elbow_from_curve(ks, sse).k == elbow_from_curve(ks, scaled).k);
  }
}

TEST_CASE("linear and flat curves are degenerate and return the smallest k") {
  const int ks[] = {2, 3, 4, 5};
  const double linear[] = {40, 30, 20, 10};
  const auto r = elbow_from_curve(ks, linear);
  CHECK(r.degenerate);
  CHECK(r.k == 2);
  const double flat[] = {5, 5, 5, 5};
  CHECK(elbow_from_curve(ks, flat).degenerate);
  const int two[] = {1, 2};
  const double two_sse[] = {3, 1};
  CHECK_THROWS_AS(elbow_from_curve(two, two_sse), ValidationError);
}

TEST_CASE("elbow_select finds three blobs") {
  const FeatureMatrix f = blobs(15, 2, 9);
  const int range[] = {1, 2, 3, 4, 5, 6};
  const ElbowResult r = elbow_select(f, range, 4);
  CHECK(r.k == 3);
  for (std::size_t i = 1; i < r.sse.size(); ++i) CHECK(r.sse[i] <= r.sse[i - 1] + 1e-9);
}

TEST_CASE("per-class clustering bookkeeping") {
  std::vector<int> labels;
  std::vector<float> v;
  std::mt19937_64 rng(1);
  std::normal_distribution<float> g;
  for (int c = 0; c < 10; ++c)
    for (int i = 0; i < 12; ++i) {
      labels.push_back(c);
      for (int j = 0; j < 4; ++j) v.push_back(g(rng));
    }
  const FeatureMatrix f(labels.size(), 4, v);
  const DatasetClusters dc = cluster_all_classes(f, labels, 10, {}, 5);
  CHECK(dc.classes.size() == 10);
  CHECK(dc.cell_count() == 30);
  for (std::size_t i = 0; i < labels.size(); ++i) {
    CHECK(dc.cluster_of[i] >= 0);
    CHECK(dc.cluster_of[i] < 3);
  }
  for (const auto& cc : dc.classes) CHECK(kmeans_oracle::check(f.select(cc.members), cc.model).ok());
  CHECK(cluster_all_classes(f, labels, 10, {}, 5).cluster_of == dc.cluster_of);

  // A two-image class falls back to k = 2.
  const std::vector<int> small_labels{0, 0, 1, 1, 1, 1};
  const FeatureMatrix s(6, 1, {0, 1, 0, 1, 5, 6});
  const DatasetClusters sc = cluster_all_classes(s, small_labels, 2, {}, 1);
  CHECK(sc.classes[0].fallback);
  CHECK(sc.classes[0].model.k == 2);
  CHECK_FALSE(sc.classes[1].fallback);
  CHECK(sc.cell_count() == 5);
}

TEST_CASE("embedding features") {
  const ModelSpec spec = parse_model_spec("name e\ninput 1 4 4\nconv 3 3 1 same\nrelu\nflatten\ndense 2\nsoftmax\n");
  Network net(spec, 1);
  Tensor images({3, 1, 4, 4}, 0.0f);
  std::mt19937_64 rng(2);
  for (std::size_t i = 16; i < 48; ++i) images[i] = std::uniform_real_distribution<float>(0, 1)(rng);
  for (std::size_t i = 0; i < 16; ++i) images[32 + i] = images[16 + i];
  CHECK_THROWS_AS(embed_features(net, images), StateError);
  net.mark_trained();
  for (const auto& p : net.layer_parameters(0)) {
    if (p.value.rank() == 1) const_cast<Tensor&>(p.value).fill(0.0f);  // zero conv bias
  }
  const FeatureMatrix f = embed_features(net, images);
  CHECK(f.rows == 3);
  CHECK(f.cols == 3);
  for (std::size_t j = 0; j < 3; ++j) {
    CHECK(f.row(0)[j] == 0.0f);
    CHECK(f.row(1)[j] == f.row(2)[j]);
  }
}

TEST_CASE("elbow CSV round trip") {
  const auto dir = std::filesystem::temp_directory_path() / "encodenet_tests" / "elbow";
  std::filesystem::create_directories(dir);
  const int ks[] = {1, 2, 3, 4, 5, 6};
  const double sse[] = {100, 40, 15, 13, 12, 11};
  const auto r = elbow_from_curve(ks, sse);
  write_elbow_csv(dir / "e.csv", r);
  const auto back = read_elbow_csv(dir / "e.csv");
  CHECK(back.ks == r.ks);
  CHECK(back.sse == r.sse);
  CHECK(back.k == 3);
}
