#include "test_util.hpp"
#include "xdyna/training.hpp"

using namespace xdyna;
using namespace xdyna::test;

namespace {

struct TemporalWeights {
  Tensor<double> q, k, v, o;
};

TemporalWeights random_weights(int d, std::mt19937_64& rng, bool zero_out = false) {
  TemporalWeights w{random_tensor({d, d}, rng), random_tensor({d, d}, rng), random_tensor({d, d}, rng),
                    random_tensor({d, d}, rng)};
  if (zero_out) w.o = Tensor<double>({d, d});
  return w;
}

Tensor<double> run(const Tensor<double>& z, const TemporalWeights& w, const Tensor<double>& pos) {
  Graph<double> g(false);
  AttnVars<double> a{g.constant(w.q), g.constant(w.k), g.constant(w.v), g.constant(w.o)};
  return temporal_attention(g, g.constant(z), a, g.constant(pos))->value;
}

double at(const Tensor<double>& t, int f, int c, int l) {
  return t[(static_cast<std::size_t>(f) * t.dim(1) + c) * t.dim(2) + l];
}

}  // namespace

TEST(TemporalAttention, ZeroInitIsIdentity) {
  std::mt19937_64 rng(51);
  const Tensor<double> z = random_tensor({5, 8, 6}, rng);
  const auto w = random_weights(8, rng, true);
  EXPECT_EQ(run(z, w, frame_position_table<double>(16, 8)), z);
}

TEST(TemporalAttention, InitTemporalHasZeroOutputProjection) {
  const ParamGroup<double> g = init_temporal<double>(UNetConfig{}, 3);
  for (int i = 0; i < UNetConfig::attention_layers; ++i) {
    EXPECT_EQ(g.at("temporal" + std::to_string(i) + ".o").max_abs(), 0.0);
    EXPECT_GT(g.at("temporal" + std::to_string(i) + ".q").max_abs(), 0.0);
  }
}

TEST(TemporalAttention, SingleFrameAddsProjectedValue) {
  std::mt19937_64 rng(52);
  const int d = 4, L = 3;
  const Tensor<double> z = random_tensor({1, d, L}, rng), pos = random_tensor({1, d, 1}, rng);
  const auto w = random_weights(d, rng);
  const Tensor<double> out = run(z, w, pos);
  // {din, dout} column-major: element (i, o) sits at o * din + i.
  for (int l = 0; l < L; ++l)
    for (int o = 0; o < d; ++o) {
      double e = at(z, 0, o, l);
      for (int m = 0; m < d; ++m) {
        double v = 0;
        for (int i = 0; i < d; ++i) v += (at(z, 0, i, l) + pos[i]) * w.v[m * d + i];
        e += v * w.o[o * d + m];
      }
      EXPECT_NEAR(at(out, 0, o, l), e, 1e-12);
    }
}

TEST(TemporalAttention, TwoFrameScalarOracle) {
  const Tensor<double> z({2, 1, 1}, std::vector<double>{0.3, -0.8});
  const Tensor<double> pos({2, 1, 1}, std::vector<double>{0.1, 0.4});
  TemporalWeights w{Tensor<double>({1, 1}, 1.5), Tensor<double>({1, 1}, -0.7), Tensor<double>({1, 1}, 2.0),
                    Tensor<double>({1, 1}, 0.25)};
  const Tensor<double> out = run(z, w, pos);
  const double x[2] = {0.3 + 0.1, -0.8 + 0.4};
  for (int f = 0; f < 2; ++f) {
    const double s0 = 1.5 * x[f] * -0.7 * x[0], s1 = 1.5 * x[f] * -0.7 * x[1];
    const double p0 = 1.0 / (1.0 + std::exp(s1 - s0));
    const double a = p0 * 2.0 * x[0] + (1 - p0) * 2.0 * x[1];
    EXPECT_NEAR(out[f], z[f] + 0.25 * a, 1e-10);
  }
}

TEST(TemporalAttention, PermutationCovariance) {
  std::mt19937_64 rng(53);
  const int F = 5, d = 6, L = 7;
  const Tensor<double> z = random_tensor({F, d, L}, rng), pos = random_tensor({F, d, 1}, rng);
  const auto w = random_weights(d, rng);
  const std::vector<int> perm{3, 0, 4, 1, 2};
  Tensor<double> zp(z.shape()), pp(pos.shape());
  for (int f = 0; f < F; ++f) {
    std::copy_n(z.data() + perm[f] * d * L, d * L, zp.data() + f * d * L);
    std::copy_n(pos.data() + perm[f] * d, d, pp.data() + f * d);
  }
  const Tensor<double> a = run(z, w, pos), b = run(zp, w, pp);
  for (int f = 0; f < F; ++f)
    for (int i = 0; i < d * L; ++i) EXPECT_NEAR(b[f * d * L + i], a[perm[f] * d * L + i], 1e-10);
}

TEST(TemporalAttention, TooManyFramesIsConfigError) {
  std::mt19937_64 rng(54);
  const auto w = random_weights(4, rng);
  EXPECT_THROW(run(random_tensor({6, 4, 2}, rng), w, frame_position_table<double>(5, 4)), ConfigError);
  EXPECT_NO_THROW(run(random_tensor({5, 4, 2}, rng), w, frame_position_table<double>(5, 4)));
}

TEST(TemporalAttention, PositionTableIsSinusoidal) {
  const Tensor<double> pe = frame_position_table<double>(7, 6);
  for (int f = 0; f < 7; ++f)
    for (int i = 0; i < 3; ++i) {
      const double w = 1.0 / std::pow(10000.0, 2.0 * i / 6.0);
      EXPECT_NEAR(pe[f * 6 + 2 * i], std::sin(f * w), 1e-12);
      EXPECT_NEAR(pe[f * 6 + 2 * i + 1], std::cos(f * w), 1e-12);
    }
}

TEST(TemporalAttention, MatchesFiniteDifferences) {
  std::mt19937_64 rng(55);
  const int d = 3;
  const Tensor<double> pos = random_tensor({3, d, 1}, rng);
  auto f = [&](Graph<double>& g, const std::vector<Var<double>>& in) {
    return temporal_attention(g, in[0], AttnVars<double>{in[1], in[2], in[3], in[4]}, g.constant(pos));
  };
  std::vector<Tensor<double>> in{random_tensor({3, d, 2}, rng)};
  for (int i = 0; i < 4; ++i) in.push_back(random_tensor({d, d}, rng));
  expect_grads_match(tape_vs_fd(f, in, 7), 1e-6);
}

TEST(TemporalAttention, MixesFramesOnlyWhenEnabled) {
  std::mt19937_64 rng(56);
  ModelConfig mc;
  Model<double> m = init_model<double>(mc, 4);
  const Tensor<double> x = random_tensor({3, 3, 16, 16}, rng);
  Tensor<double> x2 = x;
  for (int i = 2 * 3 * 256; i < 3 * 3 * 256; ++i) x2[i] += 0.5;  // change the last frame only
  auto first_frame = [&](const Model<double>& mm, const Tensor<double>& in, bool temporal) {
    Graph<double> g(false);
    Binder<double> b(g, mm.params);
    Conditioning<double> c;
    c.temporal = temporal;
    return unet_forward(b, Group::backbone, mc.arch, g.constant(in), 20, c)->value.frame(0);
  };
  EXPECT_LT(max_abs_diff(first_frame(m, x, true), first_frame(m, x, false)), 1e-12);
  EXPECT_EQ(first_frame(m, x, false), first_frame(m, x2, false));
  perturb_zero_tensors(m.params, Group::temporal, 0.2, 8);
  EXPECT_GT(max_abs_diff(first_frame(m, x, true), first_frame(m, x2, true)), 1e-6);
}

TEST(TemporalAttention, ClipLongerThanTableIsConfigError) {
  ModelConfig mc;
  const Model<float> m = init_model<float>(mc, 4);
  Graph<float> g(false);
  Binder<float> b(g, m.params);
  Conditioning<float> c;
  c.temporal = true;
  Var<float> x = g.constant(Tensor<float>({mc.arch.max_frames + 1, 3, 8, 8}));
  EXPECT_THROW(unet_forward(b, Group::backbone, mc.arch, x, 0, c), ConfigError);
}
