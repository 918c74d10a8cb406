#include <catch_amalgamated.hpp>

#include "colearn/pipeline.hpp"

TEST_CASE("headers compile and a tape runs", "[smoke]") {
  colearn::Tape<float> tape;
  auto a = tape.input(colearn::Tensor<float>({1, 2}, 1.0f), true);
  auto b = tape.relu(a);
  REQUIRE(tape.value(b).numel() == 2);
}
