#include <doctest.h>

#include "drarmor/errors.hpp"
#include "drarmor/serialize.hpp"
#include "test_support.hpp"

using namespace drarmor;

TEST_CASE("model container round-trips every layer kind bit-exactly") {
  Model m = test_support::random_cnn(3);
  const std::string bytes = serialize_model(m);
  CHECK(bytes.substr(0, 8) == "DRMODEL1");
  const Model back = deserialize_model(bytes);
  CHECK(back == m);
  CHECK(parameter_hash(back) == parameter_hash(m));
}

TEST_CASE("reshape and bias-free dense survive the container") {
  Model m = init_model({Flatten{}, Dense{16, 8, false}, Reshape{Shape{2, 2, 2}}, Flatten{}, Dense{8, 3}, LogSoftmax{}},
                       Shape{1, 4, 4}, 11);
  CHECK(deserialize_model(serialize_model(m)) == m);
}

TEST_CASE("truncated or corrupted model containers are rejected with an offset") {
  const std::string bytes = serialize_model(test_support::random_mlp(5, 3, 8));
  for (std::size_t cut : {std::size_t{0}, std::size_t{7}, std::size_t{12}, bytes.size() / 2, bytes.size() - 1}) {
    CHECK_THROWS_AS(deserialize_model(bytes.substr(0, cut)), IngestionError);
  }
  std::string bad = bytes;
  bad[0] = 'X';
  try {
    deserialize_model(bad);
    FAIL("accepted bad magic");
  } catch (const IngestionError& e) {
    CHECK(e.offset() == 0);
  }
  CHECK_THROWS_AS(deserialize_model(bytes + "z"), IngestionError);
}

TEST_CASE("batch container round-trips") {
  LabelledBatch b{test_support::random_batch(2, 4, Shape{1, 3, 3}), {0, 2, 1, 1}};
  const LabelledBatch back = deserialize_batch(serialize_batch(b));
  CHECK(back.inputs == b.inputs);
  CHECK(back.labels == b.labels);
}
