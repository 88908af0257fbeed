#include "test_util.hpp"

using namespace xdyna;
using namespace xdyna::test;

TEST(Tensor, ReshapeKeepsDataAndRejectsBadSizes) {
  Tensor<float> t({2, 3}, std::vector<float>{1, 2, 3, 4, 5, 6});
  Tensor<float> r = t.reshaped({3, 2});
  EXPECT_EQ(r.storage(), t.storage());
  EXPECT_THROW(t.reshaped({4, 2}), ShapeError);
  EXPECT_THROW(Tensor<float>({2, 2}, std::vector<float>{1, 2, 3}), ShapeError);
}

TEST(Tensor, FrameAndStackRoundTrip) {
  std::mt19937_64 rng(3);
  Tensor<float> clip = random_tensor_f({4, 3, 5, 6}, rng);
  std::vector<Tensor<float>> parts;
  for (int f = 0; f < 4; ++f) parts.push_back(clip.frame(f));
  EXPECT_EQ(stack_frames(parts), clip);
  parts[2] = parts[2].reshaped({1, 3, 6, 5});
  EXPECT_THROW(stack_frames(parts), ShapeError);
}

TEST(Tensor, ArithmeticChecksShapes) {
  Tensor<double> a({2, 2}, 1.0), b({2, 2}, 2.0), c({4}, 1.0);
  EXPECT_EQ((a + b)[3], 3.0);
  EXPECT_EQ((b - a)[0], 1.0);
  EXPECT_THROW(a += c, ShapeError);
  EXPECT_DOUBLE_EQ(max_abs_diff(a, b), 1.0);
}

TEST(MixSeed, DistinctStreams) {
  std::set<std::uint64_t> seen;
  for (std::uint64_t a = 0; a < 20; ++a)
    for (std::uint64_t b = 0; b < 20; ++b) seen.insert(mix_seed(a, b));
  EXPECT_EQ(seen.size(), 400u);
  EXPECT_EQ(mix_seed(5, 7), mix_seed(5, 7));
}

TEST(Linear, MatchesLoopOracle) {
  std::mt19937_64 rng(1);
  Tensor<double> x = random_tensor({2, 3, 4}, rng), w = random_tensor({3, 5}, rng), b = random_tensor({5}, rng);
  Graph<double> g(false);
  auto y = ops::linear(g, g.constant(x), g.constant(w), g.constant(b))->value;
  ASSERT_EQ(y.shape(), (Shape{2, 5, 4}));
  for (int n = 0; n < 2; ++n)
    for (int o = 0; o < 5; ++o)
      for (int l = 0; l < 4; ++l) {
        double s = b[o];
        for (int i = 0; i < 3; ++i) s += x[(n * 3 + i) * 4 + l] * w[o * 3 + i];  // W {din, dout} column-major
        EXPECT_NEAR(y[(n * 5 + o) * 4 + l], s, 1e-12);
      }
}

TEST(Conv2d, MatchesDirectConvolution) {
  std::mt19937_64 rng(2);
  for (int stride : {1, 2}) {
    Tensor<double> x = random_tensor({2, 3, 6, 6}, rng), w = random_tensor({4, 3, 3, 3}, rng),
                   b = random_tensor({4}, rng);
    Graph<double> g(false);
    auto y = ops::conv2d(g, g.constant(x), g.constant(w), g.constant(b), stride)->value;
    const int ho = y.dim(2), wo = y.dim(3);
    ASSERT_EQ(ho, stride == 1 ? 6 : 3);
    for (int n = 0; n < 2; ++n)
      for (int o = 0; o < 4; ++o)
        for (int oy = 0; oy < ho; ++oy)
          for (int ox = 0; ox < wo; ++ox) {
            double s = b[o];
            for (int c = 0; c < 3; ++c)
              for (int ky = 0; ky < 3; ++ky)
                for (int kx = 0; kx < 3; ++kx) {
                  const int iy = oy * stride + ky - 1, ix = ox * stride + kx - 1;
                  if (iy < 0 || iy >= 6 || ix < 0 || ix >= 6) continue;
                  s += x[((n * 3 + c) * 6 + iy) * 6 + ix] * w[((o * 3 + c) * 3 + ky) * 3 + kx];
                }
            EXPECT_NEAR(y[((n * 4 + o) * ho + oy) * wo + ox], s, 1e-12);
          }
  }
}

TEST(GroupNorm, NormalizesEachGroup) {
  std::mt19937_64 rng(4);
  Tensor<double> x = random_tensor({2, 4, 3, 3}, rng, -3, 5);
  Tensor<double> gamma({4}, 1.0), beta({4}, 0.0);
  Graph<double> g(false);
  auto y = ops::group_norm(g, g.constant(x), g.constant(gamma), g.constant(beta), 2)->value;
  for (int n = 0; n < 2; ++n)
    for (int grp = 0; grp < 2; ++grp) {
      double m = 0, v = 0;
      for (int i = 0; i < 18; ++i) m += x[(n * 4 + grp * 2) * 9 + i];
      m /= 18;
      for (int i = 0; i < 18; ++i) v += std::pow(x[(n * 4 + grp * 2) * 9 + i] - m, 2);
      v /= 18;
      for (int i = 0; i < 18; ++i) {
        const std::size_t k = (n * 4 + grp * 2) * 9 + i;
        EXPECT_NEAR(y[k], (x[k] - m) / std::sqrt(v + 1e-5), 1e-10);
      }
    }
  EXPECT_THROW(ops::group_norm(g, g.constant(x), g.constant(gamma), g.constant(beta), 3), ShapeError);
}

TEST(Attention, MatchesDenseSoftmaxOracleAndRowsSumToOne) {
  std::mt19937_64 rng(5);
  const int d = 6, lq = 5, lk = 7;
  auto q = random_rows(lq, d, rng), k = random_rows(lk, d, rng), v = random_rows(lk, d, rng);
  Graph<double> g(false);
  auto out = ops::attention(g, g.constant(tokens_to_tensor(to_mat(q))), g.constant(tokens_to_tensor(to_mat(k))),
                            g.constant(tokens_to_tensor(to_mat(v))));
  const Mat<double> got = tensor_to_tokens(out->value);
  const auto want = dense_attention(q, k, v);
  for (int i = 0; i < lq; ++i)
    for (int c = 0; c < d; ++c) EXPECT_NEAR(got(i, c), want[i][c], 1e-12);
  // Attending over all-ones values returns exactly the row sums of the softmax.
  std::vector<std::vector<double>> ones(lk, std::vector<double>(1, 1.0));
  auto sums = ops::attention(g, g.constant(tokens_to_tensor(to_mat(q))), g.constant(tokens_to_tensor(to_mat(k))),
                             g.constant(tokens_to_tensor(to_mat(ones))));
  for (double s : sums->value.values()) EXPECT_NEAR(s, 1.0, 1e-6);
}

TEST(Attention, EmptyKeySetIsAShapeError) {
  Graph<double> g(false);
  Tensor<double> q({1, 2, 3}), k({1, 2, 0}), v({1, 2, 0});
  EXPECT_THROW(ops::attention(g, g.constant(q), g.constant(k), g.constant(v)), ShapeError);
}

TEST(FrameAttention, MatchesPerPositionOracle) {
  std::mt19937_64 rng(6);
  const int f = 3, d = 4, l = 5;
  Tensor<double> q = random_tensor({f, d, l}, rng), k = random_tensor({f, d, l}, rng), v = random_tensor({f, d, l}, rng);
  Graph<double> g(false);
  auto y = ops::frame_attention(g, g.constant(q), g.constant(k), g.constant(v))->value;
  for (int p = 0; p < l; ++p) {
    std::vector<std::vector<double>> qs(f, std::vector<double>(d)), ks = qs, vs = qs;
    for (int a = 0; a < f; ++a)
      for (int c = 0; c < d; ++c) {
        qs[a][c] = q[(a * d + c) * l + p];
        ks[a][c] = k[(a * d + c) * l + p];
        vs[a][c] = v[(a * d + c) * l + p];
      }
    const auto want = dense_attention(qs, ks, vs);
    for (int a = 0; a < f; ++a)
      for (int c = 0; c < d; ++c) EXPECT_NEAR(y[(a * d + c) * l + p], want[a][c], 1e-12);
  }
}

TEST(Mse, WeightedAndPlainMeans) {
  Graph<double> g(false);
  Tensor<double> p({4}, std::vector<double>{1, 2, 3, 4}), t({4}, std::vector<double>{1, 1, 1, 1});
  Tensor<double> w({4}, std::vector<double>{0, 1, 0, 1});
  EXPECT_DOUBLE_EQ(ops::mse(g, g.constant(p), t)->value[0], (0 + 1 + 4 + 9) / 4.0);
  EXPECT_DOUBLE_EQ(ops::mse(g, g.constant(p), t, &w)->value[0], (1 + 9) / 2.0);
  Tensor<double> zero({4});
  EXPECT_THROW(ops::mse(g, g.constant(p), t, &zero), ParameterError);
}

TEST(Autograd, OpGradientsMatchFiniteDifferences) {
  std::mt19937_64 rng(7);
  const std::vector<std::pair<std::string, std::pair<GraphFn, std::vector<Shape>>>> cases = {
      {"linear", {[](Graph<double>& g, const std::vector<Var<double>>& v) { return ops::linear(g, v[0], v[1], v[2]); },
                  {{2, 3, 4}, {3, 2}, {2}}}},
      {"conv3x3", {[](Graph<double>& g, const std::vector<Var<double>>& v) { return ops::conv2d(g, v[0], v[1], v[2]); },
                   {{2, 2, 5, 5}, {3, 2, 3, 3}, {3}}}},
      {"conv_stride2",
       {[](Graph<double>& g, const std::vector<Var<double>>& v) { return ops::conv2d(g, v[0], v[1], v[2], 2); },
        {{1, 2, 6, 6}, {2, 2, 3, 3}, {2}}}},
      {"group_norm",
       {[](Graph<double>& g, const std::vector<Var<double>>& v) { return ops::group_norm(g, v[0], v[1], v[2], 2); },
        {{2, 4, 3, 2}, {4}, {4}}}},
      {"silu", {[](Graph<double>& g, const std::vector<Var<double>>& v) { return ops::silu(g, v[0]); }, {{3, 4}}}},
      {"attention",
       {[](Graph<double>& g, const std::vector<Var<double>>& v) { return ops::attention(g, v[0], v[1], v[2]); },
        {{2, 3, 4}, {2, 3, 5}, {2, 2, 5}}}},
      {"shared_kv_attention",
       {[](Graph<double>& g, const std::vector<Var<double>>& v) { return ops::attention(g, v[0], v[1], v[2]); },
        {{3, 3, 4}, {1, 3, 2}, {1, 3, 2}}}},
      {"frame_attention",
       {[](Graph<double>& g, const std::vector<Var<double>>& v) { return ops::frame_attention(g, v[0], v[1], v[2]); },
        {{3, 2, 4}, {3, 2, 4}, {3, 3, 4}}}},
      {"concat_channels",
       {[](Graph<double>& g, const std::vector<Var<double>>& v) { return ops::concat_channels(g, v[0], v[1]); },
        {{2, 2, 3}, {2, 3, 3}}}},
      {"concat_tokens",
       {[](Graph<double>& g, const std::vector<Var<double>>& v) { return ops::concat_tokens(g, v[0], v[1]); },
        {{2, 3, 2}, {1, 3, 4}}}},
      {"upsample",
       {[](Graph<double>& g, const std::vector<Var<double>>& v) { return ops::upsample2x(g, v[0]); }, {{1, 2, 2, 3}}}},
      {"add_bias",
       {[](Graph<double>& g, const std::vector<Var<double>>& v) { return ops::add_bias(g, v[0], v[1]); },
        {{2, 3, 4}, {2, 3, 1}}}},
      {"mse", {[](Graph<double>& g, const std::vector<Var<double>>& v) {
                 Tensor<double> target({2, 3}, 0.25);
                 return ops::mse(g, v[0], target);
               },
               {{2, 3}}}},
  };
  for (const auto& [name, c] : cases) {
    SCOPED_TRACE(name);
    std::vector<Tensor<double>> inputs;
    for (const auto& s : c.second) inputs.push_back(random_tensor(s, rng));
    expect_grads_match(tape_vs_fd(c.first, inputs), 1e-6);
  }
}

TEST(Autograd, ConstantsReceiveNoGradient) {
  Graph<double> g;
  Var<double> x = g.constant(Tensor<double>({2}, 1.0));
  Var<double> w = g.leaf(Tensor<double>({1, 1}, 2.0), true);
  Var<double> y = ops::mse(g, ops::linear(g, ops::reshape(g, x, {1, 1, 2}), w), Tensor<double>({1, 1, 2}));
  g.backward(y);
  EXPECT_FALSE(x->has_grad());
  EXPECT_TRUE(w->has_grad());
}
