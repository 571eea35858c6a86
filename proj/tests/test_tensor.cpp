#include <cmath>
#include <set>

#include "doctest.h"
#include "shardweave/params.hpp"
#include "shardweave/rng.hpp"
#include "shardweave/tensor.hpp"

using namespace shardweave;

TEST_CASE("tensor construction and shape accounting") {
  Tensor<double> t({2, 3}, {1, 2, 3, 4, 5, 6});
  CHECK(t.rank() == 2);
  CHECK(t.numel() == 6);
  CHECK(t.dim(0) == 2);
  CHECK(t.dim(1) == 3);
  CHECK(t[4] == 5.0);

  Tensor<double> s = Tensor<double>::scalar(7.5);
  CHECK(s.rank() == 0);
  CHECK(s.numel() == 1);
  CHECK(s.item() == 7.5);

  CHECK(Tensor<float>::zeros({4, 4}).numel() == 16);
  CHECK(Tensor<float>::full({2}, 3.0f)[1] == 3.0f);

  CHECK_THROWS_AS(Tensor<double>({2, 3}, {1, 2}), ShapeError);
  CHECK_THROWS_AS(t.item(), ShapeError);
}

TEST_CASE("tensor rejects non-positive dims") {
  CHECK_THROWS_AS(Tensor<double>::zeros({2, 0}), ShapeError);
  CHECK_THROWS_AS(Tensor<double>::zeros({-1}), ShapeError);
}

TEST_CASE("eigen matrix view multiplies") {
  Tensor<double> a({2, 2}, {1, 2, 3, 4});
  Tensor<double> eye({2, 2}, {1, 0, 0, 1});
  Tensor<double> out = Tensor<double>::zeros({2, 2});
  out.mat(2, 2).noalias() = a.mat(2, 2) * eye.mat(2, 2);
  CHECK(out.bit_equal(a));
}

TEST_CASE("finiteness scan") {
  Tensor<double> t({3}, {1.0, 2.0, 3.0});
  CHECK(t.all_finite());
  t[1] = std::numeric_limits<double>::infinity();
  CHECK_FALSE(t.all_finite());
  t[1] = std::nan("");
  CHECK_FALSE(t.all_finite());
}

TEST_CASE("shape_str renders like a shape") {
  CHECK(shape_str({2, 3, 4}) == "[2,3,4]");
  CHECK(shape_str({}) == "[]");
}

TEST_CASE("rng streams are deterministic and independent") {
  RngStream a(42, "train");
  RngStream b(42, "train");
  for (int i = 0; i < 100; ++i) CHECK(a.next_u64() == b.next_u64());

  RngStream c(42, "predict");
  RngStream d(42, "train");
  bool any_diff = false;
  for (int i = 0; i < 10; ++i) any_diff |= (c.next_u64() != d.next_u64());
  CHECK(any_diff);

  RngStream e(43, "train");
  RngStream f(42, "train");
  CHECK(e.next_u64() != f.next_u64());
}

TEST_CASE("rng resumes from a saved counter") {
  RngStream a(7, "shuffle");
  for (int i = 0; i < 5; ++i) a.next_uniform();
  RngStream b(a.seed(), a.stream_id(), a.counter());
  for (int i = 0; i < 20; ++i) CHECK(a.next_u64() == b.next_u64());
}

TEST_CASE("rng uniform and normal land in sane ranges") {
  RngStream s(1, "init");
  double sum = 0.0;
  for (int i = 0; i < 1000; ++i) {
    const double u = s.next_uniform();
    CHECK(u >= 0.0);
    CHECK(u < 1.0);
    sum += u;
  }
  CHECK(sum / 1000.0 == doctest::Approx(0.5).epsilon(0.1));

  double mean = 0.0;
  double var = 0.0;
  const int n = 4000;
  std::vector<double> draws(n);
  for (int i = 0; i < n; ++i) {
    draws[i] = s.next_normal();
    mean += draws[i];
  }
  mean /= n;
  for (int i = 0; i < n; ++i) var += (draws[i] - mean) * (draws[i] - mean);
  var /= n;
  CHECK(mean == doctest::Approx(0.0).epsilon(0.1));
  CHECK(var == doctest::Approx(1.0).epsilon(0.15));
}

TEST_CASE("rng child streams do not disturb the parent") {
  RngStream root(9, "init");
  RngStream c1 = root.child("w1");
  RngStream c2 = root.child("w2");
  CHECK(root.counter() == 0);
  const std::uint64_t first = c1.next_u64();
  CHECK(first != c2.next_u64());

  RngStream again = RngStream(9, "init").child("w1");
  CHECK(again.next_u64() == first);
}

TEST_CASE("rng permutation is a permutation and seed-stable") {
  RngStream s(5, "shuffle");
  auto perm = s.permutation(50);
  std::set<std::int64_t> seen(perm.begin(), perm.end());
  CHECK(seen.size() == 50);
  CHECK(*seen.begin() == 0);
  CHECK(*seen.rbegin() == 49);

  RngStream s2(5, "shuffle");
  CHECK(s2.permutation(50) == perm);
}

TEST_CASE("param tree preserves insertion order and rejects duplicates") {
  ParamTree<double> params;
  params.add("b/kernel", Tensor<double>::zeros({2, 2}));
  params.add("a/bias", Tensor<double>::zeros({2}));
  CHECK(params.size() == 2);
  CHECK(params.names() == std::vector<std::string>{"b/kernel", "a/bias"});
  CHECK(params.total_elements() == 6);
  CHECK_THROWS_AS(params.add("b/kernel", Tensor<double>::zeros({2, 2})), ShapeError);
  CHECK_THROWS_AS(params.at("missing"), ShapeError);
}

TEST_CASE("param init is per-name deterministic regardless of order") {
  RngStream root(11, "init");
  Tensor<double> w1 = init_normal<double>(root, "w1", {4, 4}, 0.5);
  Tensor<double> w2 = init_normal<double>(root, "w2", {4, 4}, 0.5);

  RngStream root2(11, "init");
  Tensor<double> w2_first = init_normal<double>(root2, "w2", {4, 4}, 0.5);
  Tensor<double> w1_second = init_normal<double>(root2, "w1", {4, 4}, 0.5);

  CHECK(w1.bit_equal(w1_second));
  CHECK(w2.bit_equal(w2_first));
  CHECK_FALSE(w1.bit_equal(w2));
}
