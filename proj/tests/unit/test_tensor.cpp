#include <doctest.h>

#include <stdexcept>

#include <cmath>
#include <limits>

#include "csmamba/tensor.hpp"

using csm::Shape;
using csm::Tensor;

TEST_SUITE("tensor") {

TEST_CASE("construction checks element count") {
  const Tensor t(Shape{2, 3}, 1.5);
  CHECK(t.size() == 6);
  CHECK(t.rank() == 2);
  CHECK(t[5] == 1.5);
  CHECK_THROWS_AS(Tensor(Shape{2, 2}, std::vector<double>{1, 2, 3}), std::invalid_argument);
  CHECK_THROWS_AS(Tensor(Shape{2, 0}), std::invalid_argument);
}

TEST_CASE("row-major layout, last axis fastest") {
  Tensor t(Shape{2, 3, 4});
  for (std::size_t i = 0; i < t.size(); ++i) t[i] = static_cast<double>(i);
  CHECK(t.at(1, 2, 3) == 23.0);
  CHECK(t.at(0, 1, 0) == 4.0);
}

TEST_CASE("reshape keeps data and rejects count changes") {
  Tensor t(Shape{2, 3}, std::vector<double>{1, 2, 3, 4, 5, 6});
  const Tensor r = t.reshaped(Shape{3, 2});
  CHECK(r.vec() == t.vec());
  CHECK(r.shape() == Shape{3, 2});
  CHECK_THROWS(t.reshaped(Shape{4}));
}

TEST_CASE("finiteness and scalar access") {
  Tensor t(Shape{2}, 0.0);
  CHECK(t.all_finite());
  t[1] = std::numeric_limits<double>::quiet_NaN();
  CHECK_FALSE(t.all_finite());
  CHECK(Tensor::scalar(3.0).item() == 3.0);
  CHECK_THROWS(Tensor(Shape{2}).item());
  CHECK(csm::shape_str(Shape{2, 3}) == "[2,3]");
}

}
