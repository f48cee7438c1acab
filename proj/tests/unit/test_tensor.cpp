#include <gtest/gtest.h>

#include "tstcnn/ops.hpp"
#include "tstcnn/tape.hpp"
#include "tstcnn/tensor.hpp"

using namespace tstcnn;

TEST(Tensor, ConstructionAndShape) {
  TensorF t(Shape{2, 3}, 1.5f);
  EXPECT_EQ(t.rank(), 2u);
  EXPECT_EQ(t.dim(1), 3u);
  EXPECT_EQ(t.numel(), 6u);
  for (float v : t.data()) EXPECT_EQ(v, 1.5f);
  EXPECT_THROW(t.dim(2), DimensionError);
  EXPECT_THROW(TensorF(Shape{}), DimensionError);
  EXPECT_THROW(TensorF(Shape{2, 0}), DimensionError);
  EXPECT_THROW(TensorF(Shape{2}, std::vector<float>{1, 2, 3}), DimensionError);
}

TEST(Tensor, HandleSharesStorage) {
  TensorF a(Shape{3});
  TensorF b = a;
  b.mutable_data()[1] = 4.0f;
  EXPECT_EQ(a.data()[1], 4.0f);
  EXPECT_TRUE(a.same(b));
  auto c = a.clone();
  c.mutable_data()[1] = 0.0f;
  EXPECT_EQ(a.data()[1], 4.0f);
  EXPECT_FALSE(a.same(c));
}

TEST(Tensor, GradientSlot) {
  TensorD t(Shape{2}, 0.0, true);
  EXPECT_FALSE(t.has_grad());
  EXPECT_THROW(t.grad(), ContractError);
  const double d[2] = {1.0, -2.0};
  t.accumulate_grad(d);
  t.accumulate_grad(d);
  EXPECT_EQ(t.grad()[0], 2.0);
  EXPECT_EQ(t.grad()[1], -4.0);
  const double bad[3] = {0, 0, 0};
  EXPECT_THROW(t.accumulate_grad(bad), DimensionError);
  t.clear_grad();
  EXPECT_FALSE(t.has_grad());
}

TEST(Tensor, UndefinedHandleIsAContractError) {
  TensorF t;
  EXPECT_FALSE(t.defined());
  EXPECT_THROW(t.data(), ContractError);
}

TEST(Tensor, CastPreservesValues) {
  TensorF f(Shape{3}, std::vector<float>{0.5f, -1.25f, 3.0f}, true);
  auto d = cast<double>(f);
  EXPECT_TRUE(d.requires_grad());
  EXPECT_EQ(d.data()[1], -1.25);
}

TEST(Tape, ChainRuleOnSmallGraph) {
  // f = sum((a * b) + a) ; df/da = b + 1, df/db = a
  TensorD a(Shape{3}, std::vector<double>{1, 2, 3}, true);
  TensorD b(Shape{3}, std::vector<double>{4, 5, 6}, true);
  Tape<double> tape;
  auto f = ops::sum(tape, ops::add(tape, ops::mul(tape, a, b), a));
  EXPECT_DOUBLE_EQ(f.item(), 4 + 10 + 18 + 6);
  auto reached = tape.backward(f);
  EXPECT_EQ(reached.size(), 2u);
  EXPECT_TRUE(reached.contains(a));
  for (int i = 0; i < 3; ++i) {
    EXPECT_DOUBLE_EQ(a.grad()[i], b.data()[i] + 1);
    EXPECT_DOUBLE_EQ(b.grad()[i], a.data()[i]);
  }
}

TEST(Tape, NothingRecordedWithoutGradInputs) {
  TensorD a(Shape{3}, 1.0);
  Tape<double> tape;
  auto s = ops::sum(tape, ops::mul_scalar(tape, a, 2.0));
  EXPECT_EQ(tape.size(), 0u);
  EXPECT_FALSE(s.requires_grad());
  EXPECT_TRUE(tape.backward(s).empty());
}

TEST(Tape, NonRecordingTapeSkipsNodes) {
  TensorD a(Shape{3}, 1.0, true);
  Tape<double> tape(false);
  ops::sum(tape, a);
  EXPECT_EQ(tape.size(), 0u);
}

TEST(Tape, NonScalarRootRejected) {
  TensorD a(Shape{3}, 1.0, true);
  Tape<double> tape;
  auto y = ops::mul_scalar(tape, a, 2.0);
  EXPECT_THROW(tape.backward(y), ContractError);
}

TEST(Tape, LeafRootGetsUnitGradient) {
  TensorD a(Shape{1}, 3.0, true);
  Tape<double> tape;
  auto reached = tape.backward(a);
  EXPECT_EQ(reached.size(), 1u);
  EXPECT_EQ(a.grad()[0], 1.0);
}

TEST(Tape, ReplayAccumulatesIntoLeaves) {
  TensorD a(Shape{2}, std::vector<double>{1, 2}, true);
  Tape<double> tape;
  auto f = ops::sum(tape, ops::mul(tape, a, a));
  tape.backward(f);
  tape.backward(f);
  EXPECT_DOUBLE_EQ(a.grad()[0], 4.0);
  EXPECT_DOUBLE_EQ(a.grad()[1], 8.0);
}

TEST(Tape, SharedSubexpressionSumsBothPaths) {
  TensorD a(Shape{1}, 3.0, true);
  Tape<double> tape;
  auto b = ops::mul_scalar(tape, a, 2.0);
  auto f = ops::sum(tape, ops::mul(tape, b, b));  // 4 a^2
  tape.backward(f);
  EXPECT_DOUBLE_EQ(a.grad()[0], 24.0);
}

TEST(Tape, ProducerBookkeeping) {
  TensorD a(Shape{2}, 1.0, true);
  Tape<double> tape;
  auto b = ops::add_scalar(tape, a, 1.0);
  EXPECT_EQ(tape.producer_of(a), -1);
  EXPECT_EQ(tape.producer_of(b), 0);
  EXPECT_EQ(tape.op_name(0), "add_scalar");
  EXPECT_TRUE(tape.inputs_of(0)[0].same(a));
  tape.clear();
  EXPECT_EQ(tape.size(), 0u);
}
