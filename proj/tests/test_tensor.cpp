#include <catch2/catch_amalgamated.hpp>

#include "cldyn/adam.hpp"
#include "cldyn/gradcheck.hpp"
#include "cldyn/ops.hpp"
#include "cldyn/rng.hpp"
#include "oracles.hpp"

using namespace cldyn;

namespace {
Tensor random_tensor(const Shape& s, Rng& rng, bool rg = false, double scale = 1.0) {
  return Tensor::from_data(s, rng.gaussian_vec(static_cast<size_t>(s.numel()), scale), rg);
}
}  // namespace

TEST_CASE("conv2d basic contracts") {
  SECTION("1x1 identity kernel") {
    Rng rng(1);
    Tensor in = random_tensor({2, 4, 5}, rng);
    Tensor ker = Tensor::from_data({2, 2, 1, 1}, {1, 0, 0, 1});
    Tensor out = conv2d(in, ker, 1);
    REQUIRE(out.shape() == in.shape());
    for (size_t i = 0; i < out.data().size(); ++i)
      REQUIRE(out.data()[i] == in.data()[i]);
  }
  SECTION("all-zero input, zero bias") {
    Tensor in = Tensor::zeros({1, 3, 3});
    Rng rng(2);
    Tensor ker = random_tensor({3, 1, 3, 3}, rng);
    Tensor bias = Tensor::zeros({3});
    Tensor out = conv2d(in, ker, 1, bias);
    for (double v : out.data()) REQUIRE(v == 0.0);
  }
  SECTION("3x3 ones: center 9, corner 4 under zero padding") {
    Tensor in = Tensor::full({1, 3, 3}, 1.0);
    Tensor ker = Tensor::full({1, 1, 3, 3}, 1.0);
    Tensor out = conv2d(in, ker, 1);
    auto ref = oracle::conv2d(in.data(), 1, 3, 3, ker.data(), 1, 3, 1);
    REQUIRE(out.data()[4] == 9.0);
    REQUIRE(out.data()[0] == 4.0);
    for (size_t i = 0; i < ref.size(); ++i) REQUIRE(out.data()[i] == ref[i]);
  }
  SECTION("channel mismatch raises a shape error") {
    Tensor in = Tensor::zeros({2, 4, 4});
    Tensor ker = Tensor::zeros({1, 3, 3, 3});
    REQUIRE_THROWS_AS(conv2d(in, ker, 1), ShapeError);
  }
  SECTION("dilation must be 1 for 1x1 kernels") {
    Tensor in = Tensor::zeros({1, 4, 4});
    Tensor ker = Tensor::zeros({1, 1, 1, 1});
    REQUIRE_THROWS_AS(conv2d(in, ker, 2), ShapeError);
  }
}

TEST_CASE("conv2d and depthwise match the nested-loop oracle bitwise") {
  Rng rng(42);
  for (int trial = 0; trial < 30; ++trial) {
    const long ci = rng.uniform_int(1, 4);
    const long co = rng.uniform_int(1, 4);
    const long h = rng.uniform_int(3, 8);
    const long w = rng.uniform_int(3, 8);
    const long k = rng.uniform() < 0.3 ? 1 : 3;
    const long dil = k == 1 ? 1 : rng.uniform_int(1, 3);
    Tensor in = random_tensor({ci, h, w}, rng);
    Tensor ker = random_tensor({co, ci, k, k}, rng);
    Tensor bias = random_tensor({co}, rng);
    Tensor out = conv2d(in, ker, dil, bias);
    auto ref = oracle::conv2d(in.data(), ci, h, w, ker.data(), co, k, dil, &bias.data());
    for (size_t i = 0; i < ref.size(); ++i) REQUIRE(out.data()[i] == ref[i]);

    Tensor dwk = random_tensor({ci, k, k}, rng);
    Tensor dout = depthwise_conv2d(in, dwk, dil);
    auto dref = oracle::depthwise_conv2d(in.data(), ci, h, w, dwk.data(), k, dil);
    for (size_t i = 0; i < dref.size(); ++i) REQUIRE(dout.data()[i] == dref[i]);
  }
}

TEST_CASE("large-shape conv (gemm path) stays within 1e-12 of the oracle") {
  Rng rng(99);
  const long ci = 16, co = 16, h = 32, w = 32;  // above the gemm threshold
  Tensor in = random_tensor({ci, h, w}, rng, true);
  Tensor ker = random_tensor({co, ci, 3, 3}, rng, true);
  Tensor bias = random_tensor({co}, rng, true);
  Tensor out = conv2d(in, ker, 2, bias);
  auto ref = oracle::conv2d(in.data(), ci, h, w, ker.data(), co, 3, 2, &bias.data());
  for (size_t i = 0; i < ref.size(); ++i)
    REQUIRE(out.data()[i] == Catch::Approx(ref[i]).margin(1e-12));
  // gradients through the gemm path agree with finite differences
  auto res = fd_check("conv_gemm", [&] { return mean(mul(conv2d(in, ker, 1, bias), conv2d(in, ker, 1, bias))); },
                      {in, ker, bias}, 1e-5, 1e-4, 1e-7, 24);
  REQUIRE(res.pass);
}

TEST_CASE("depthwise_conv2d simple cases") {
  Rng rng(7);
  Tensor in = random_tensor({3, 5, 5}, rng);
  SECTION("all-zero kernel gives all-zero output") {
    Tensor ker = Tensor::zeros({3, 3, 3});
    Tensor out = depthwise_conv2d(in, ker, 1);
    for (double v : out.data()) REQUIRE(v == 0.0);
  }
  SECTION("k=1 kernel of 2 doubles the input") {
    Tensor ker = Tensor::full({3, 1, 1}, 2.0);
    Tensor out = depthwise_conv2d(in, ker, 1);
    for (size_t i = 0; i < out.data().size(); ++i)
      REQUIRE(out.data()[i] == 2.0 * in.data()[i]);
  }
  SECTION("step edge against oracle") {
    std::vector<double> step(25, 0.0);
    for (long y = 0; y < 5; ++y)
      for (long x = 3; x < 5; ++x) step[static_cast<size_t>(y * 5 + x)] = 1.0;
    Tensor img = Tensor::from_data({1, 5, 5}, step);
    Tensor ker = Tensor::from_data({1, 3, 3}, {0.5, -1, 2, 0, 3, -0.25, 1, 1, -2});
    Tensor out = depthwise_conv2d(img, ker, 1);
    auto ref = oracle::depthwise_conv2d(img.data(), 1, 5, 5, ker.data(), 3, 1);
    for (size_t i = 0; i < ref.size(); ++i) REQUIRE(out.data()[i] == ref[i]);
  }
}

TEST_CASE("linear layer") {
  SECTION("identity weights") {
    Tensor x = Tensor::from_data({3}, {1, -2, 0.5});
    Tensor w = Tensor::from_data({3, 3}, {1, 0, 0, 0, 1, 0, 0, 0, 1});
    Tensor b = Tensor::zeros({3});
    Tensor y = linear(x, w, b);
    for (size_t i = 0; i < 3; ++i) REQUIRE(y.data()[i] == x.data()[i]);
  }
  SECTION("zero weights return the bias") {
    Tensor x = Tensor::from_data({2}, {3, 4});
    Tensor w = Tensor::zeros({2, 5});
    Tensor b = Tensor::from_data({5}, {1, 2, 3, 4, 5});
    Tensor y = linear(x, w, b);
    for (size_t i = 0; i < 5; ++i) REQUIRE(y.data()[i] == b.data()[i]);
  }
  SECTION("pinned orientation: x=[1,2] -> y=[1,2,3]") {
    Tensor x = Tensor::from_data({2}, {1, 2});
    Tensor w = Tensor::from_data({2, 3}, {1, 0, 1, 0, 1, 1});
    Tensor b = Tensor::zeros({3});
    Tensor y = linear(x, w, b);
    REQUIRE(y.data() == std::vector<double>{1, 2, 3});
  }
  SECTION("dimension mismatch") {
    Tensor x = Tensor::zeros({2});
    Tensor w = Tensor::zeros({3, 3});
    Tensor b = Tensor::zeros({3});
    REQUIRE_THROWS_AS(linear(x, w, b), ShapeError);
  }
}

TEST_CASE("softmax") {
  SECTION("zeros give the uniform distribution") {
    Tensor x = Tensor::zeros({4});
    Tensor y = softmax(x);
    for (double v : y.data()) REQUIRE(v == Catch::Approx(0.25).margin(1e-15));
  }
  SECTION("shift invariance") {
    Tensor x = Tensor::from_data({3}, {0.3, -1.2, 2.0});
    Tensor xs = Tensor::from_data({3}, {0.3 + 7.5, -1.2 + 7.5, 2.0 + 7.5});
    Tensor y = softmax(x), ys = softmax(xs);
    for (size_t i = 0; i < 3; ++i)
      REQUIRE(std::abs(y.data()[i] - ys.data()[i]) < 1e-12);
  }
  SECTION("[1,2,3] matches the high-precision oracle values") {
    Tensor y = softmax(Tensor::from_data({3}, {1, 2, 3}));
    REQUIRE(y.data()[0] == Catch::Approx(0.090030573170380458).epsilon(1e-12));
    REQUIRE(y.data()[1] == Catch::Approx(0.24472847105479765).epsilon(1e-12));
    REQUIRE(y.data()[2] == Catch::Approx(0.66524095577482189).epsilon(1e-12));
  }
  SECTION("matrix slices sum to 1 and stay positive") {
    Rng rng(5);
    Tensor x = random_tensor({4, 6}, rng, false, 3.0);
    for (int axis = 0; axis < 2; ++axis) {
      Tensor y = softmax(x, axis);
      const long nslices = axis == 0 ? 6 : 4;
      for (long s = 0; s < nslices; ++s) {
        double total = 0.0;
        for (long i = 0; i < (axis == 0 ? 4 : 6); ++i) {
          const double v = axis == 0 ? y.data()[static_cast<size_t>(i * 6 + s)]
                                     : y.data()[static_cast<size_t>(s * 6 + i)];
          REQUIRE(v > 0.0);
          total += v;
        }
        REQUIRE(std::abs(total - 1.0) < 1e-9);
      }
    }
  }
}

TEST_CASE("sobel") {
  SECTION("constant image: interior magnitude collapses to sqrt(eps)") {
    // borders see the zero padding as an artificial edge; the flat interior
    // is the all-zero claim
    Tensor img = Tensor::full({1, 5, 5}, 0.7);
    Tensor out = sobel(img);
    for (long y = 1; y < 4; ++y)
      for (long x = 1; x < 4; ++x)
        REQUIRE(out.data()[static_cast<size_t>(y * 5 + x)] == Catch::Approx(1e-6).margin(1e-12));
  }
  SECTION("vertical step edge carries 4.0 on interior boundary columns") {
    std::vector<double> step(25, 0.0);
    for (long y = 0; y < 5; ++y)
      for (long x = 2; x < 5; ++x) step[static_cast<size_t>(y * 5 + x)] = 1.0;
    Tensor img = Tensor::from_data({1, 5, 5}, step);
    Tensor out = sobel(img);
    auto ref = oracle::sobel(img.data(), 1, 5, 5);
    for (size_t i = 0; i < ref.mag.size(); ++i)
      REQUIRE(out.data()[i] == Catch::Approx(ref.mag[i]).margin(1e-15));
    REQUIRE(out.data()[1 * 5 + 1] == Catch::Approx(4.0).epsilon(1e-9));
    REQUIRE(out.data()[2 * 5 + 2] == Catch::Approx(4.0).epsilon(1e-9));
  }
  SECTION("pre-magnitude components are homogeneous of degree 1") {
    Rng rng(11);
    std::vector<double> img = rng.gaussian_vec(36);
    std::vector<double> img2(img.size());
    for (size_t i = 0; i < img.size(); ++i) img2[i] = 2.0 * img[i];
    auto a = oracle::sobel(img, 1, 6, 6);
    auto b = oracle::sobel(img2, 1, 6, 6);
    for (size_t i = 0; i < a.gx.size(); ++i) {
      REQUIRE(b.gx[i] == Catch::Approx(2.0 * a.gx[i]).margin(1e-12));
      REQUIRE(b.gy[i] == Catch::Approx(2.0 * a.gy[i]).margin(1e-12));
    }
  }
  SECTION("images smaller than 3x3 are rejected") {
    REQUIRE_THROWS_AS(sobel(Tensor::zeros({1, 2, 4})), ShapeError);
  }
}

TEST_CASE("pooling") {
  SECTION("constant map is a fixed point of all four kinds") {
    Tensor x = Tensor::full({2, 3, 3}, 0.4);
    for (PoolKind k : {PoolKind::GAP, PoolKind::GMP, PoolKind::MeanP, PoolKind::MaxP}) {
      Tensor y = pool(x, k);
      for (double v : y.data()) REQUIRE(v == Catch::Approx(0.4).margin(1e-15));
    }
  }
  SECTION("GAP and GMP of [[1,3],[5,7]]") {
    Tensor x = Tensor::from_data({1, 2, 2}, {1, 3, 5, 7});
    REQUIRE(pool(x, PoolKind::GAP).data()[0] == 4.0);
    REQUIRE(pool(x, PoolKind::GMP).data()[0] == 7.0);
  }
  SECTION("unknown kind string is a config error") {
    REQUIRE_THROWS_AS(pool_kind_from_string("AvgPool"), ConfigError);
  }
  SECTION("max pooling routes gradient to the first maximum") {
    Tensor x = Tensor::from_data({1, 1, 3}, {2.0, 2.0, 1.0}, true);
    Tensor y = pool(x, PoolKind::GMP);
    backward(sum(y));
    REQUIRE(x.grad()[0] == 1.0);
    REQUIRE(x.grad()[1] == 0.0);
  }
}

TEST_CASE("cosine similarity") {
  Rng rng(3);
  Tensor v = random_tensor({16}, rng);
  SECTION("self similarity is 1") {
    REQUIRE(cosine_similarity(v, v).item() == Catch::Approx(1.0).margin(1e-9));
  }
  SECTION("negated vector gives -1") {
    Tensor nv = scale(v, -1.0);
    REQUIRE(cosine_similarity(v, nv).item() == Catch::Approx(-1.0).margin(1e-9));
  }
  SECTION("orthogonal unit vectors give 0") {
    Tensor a = Tensor::from_data({2}, {1, 0});
    Tensor b = Tensor::from_data({2}, {0, 1});
    REQUIRE(cosine_similarity(a, b).item() == 0.0);
  }
  SECTION("zero vector stays finite") {
    Tensor z = Tensor::zeros({16});
    REQUIRE(std::abs(cosine_similarity(z, v).item()) < 1e-9);
  }
}

TEST_CASE("elementwise and l1") {
  SECTION("l1(x, x) = 0") {
    Rng rng(9);
    Tensor x = random_tensor({3, 4, 4}, rng);
    REQUIRE(l1_distance(x, x).item() == 0.0);
  }
  SECTION("max([1,5],[3,2]) = [3,5]") {
    Tensor a = Tensor::from_data({2}, {1, 5});
    Tensor b = Tensor::from_data({2}, {3, 2});
    Tensor m = maximum(a, b);
    REQUIRE(m.data() == std::vector<double>{3, 5});
  }
  SECTION("l1([0,0],[1,3]) = 2 (mean)") {
    Tensor a = Tensor::zeros({2});
    Tensor b = Tensor::from_data({2}, {1, 3});
    REQUIRE(l1_distance(a, b).item() == 2.0);
  }
  SECTION("tie routes max gradient to the first operand") {
    Tensor a = Tensor::from_data({2}, {1.0, 1.0}, true);
    Tensor b = Tensor::from_data({2}, {1.0, 0.0}, true);
    backward(sum(maximum(a, b)));
    REQUIRE(a.grad() == std::vector<double>{1.0, 1.0});
    REQUIRE(b.grad() == std::vector<double>{0.0, 0.0});
  }
  SECTION("shape mismatch") {
    REQUIRE_THROWS_AS(add(Tensor::zeros({2}), Tensor::zeros({3})), ShapeError);
    REQUIRE_THROWS_AS(l1_distance(Tensor::zeros({2}), Tensor::zeros({3})), ShapeError);
  }
}

TEST_CASE("losses") {
  SECTION("mse at the target is 0") {
    Tensor p = Tensor::from_data({4}, {0.1, 0.5, 0.9, 0.3});
    REQUIRE(mse_loss(p, p).item() == 0.0);
  }
  SECTION("bce of constant 0.5 prediction is ln 2") {
    Tensor p = Tensor::full({8}, 0.5);
    Tensor t = Tensor::from_data({8}, {0, 1, 0, 1, 1, 0, 1, 0});
    REQUIRE(bce_loss(p, t).item() == Catch::Approx(0.69314718055994531).epsilon(1e-12));
  }
  SECTION("2x2 random case against scalar arithmetic") {
    Rng rng(13);
    std::vector<double> pv{0.2, 0.7, 0.4, 0.95}, tv{0.0, 1.0, 1.0, 0.0};
    double mse_ref = 0.0, bce_ref = 0.0;
    for (int i = 0; i < 4; ++i) {
      mse_ref += (pv[static_cast<size_t>(i)] - tv[static_cast<size_t>(i)]) * (pv[static_cast<size_t>(i)] - tv[static_cast<size_t>(i)]) / 4.0;
      bce_ref -= (tv[static_cast<size_t>(i)] * std::log(pv[static_cast<size_t>(i)]) +
                  (1 - tv[static_cast<size_t>(i)]) * std::log(1 - pv[static_cast<size_t>(i)])) / 4.0;
    }
    Tensor p = Tensor::from_data({2, 2}, pv);
    Tensor t = Tensor::from_data({2, 2}, tv);
    REQUIRE(mse_loss(p, t).item() == Catch::Approx(mse_ref).epsilon(1e-12));
    REQUIRE(bce_loss(p, t).item() == Catch::Approx(bce_ref).epsilon(1e-12));
  }
}

TEST_CASE("backward basics") {
  SECTION("grad of sum is all ones") {
    Rng rng(21);
    Tensor x = random_tensor({2, 3, 4}, rng, true);
    backward(sum(x));
    for (double g : x.grad()) REQUIRE(g == 1.0);
  }
  SECTION("grad of <x,x> is 2x") {
    Rng rng(22);
    Tensor x = random_tensor({5}, rng, true);
    backward(sum(mul(x, x)));
    for (size_t i = 0; i < 5; ++i)
      REQUIRE(x.grad()[i] == Catch::Approx(2.0 * x.data()[i]).epsilon(1e-12));
  }
  SECTION("non-scalar root is rejected") {
    Tensor x = Tensor::zeros({2}, true);
    REQUIRE_THROWS_AS(backward(add(x, x)), ShapeError);
  }
  SECTION("backward twice on the same record is an error") {
    Tensor x = Tensor::from_data({2}, {1, 2}, true);
    Tensor root = sum(x);
    backward(root);
    REQUIRE_THROWS_AS(backward(root), Error);
  }
  SECTION("gradients accumulate until zero_grad") {
    Tensor x = Tensor::from_data({2}, {1, 2}, true);
    backward(sum(x));
    backward(sum(x));
    REQUIRE(x.grad() == std::vector<double>{2.0, 2.0});
    x.zero_grad();
    REQUIRE(x.grad() == std::vector<double>{0.0, 0.0});
  }
}

TEST_CASE("finite-difference checks for every primitive") {
  Rng rng(1234);
  auto check = [&](const std::string& name, const std::function<Tensor()>& f,
                   std::vector<Tensor> params) {
    auto res = fd_check(name, f, std::move(params));
    INFO(name << " max rel err " << res.max_rel_err);
    REQUIRE(res.pass);
  };

  Tensor a = random_tensor({2, 4, 4}, rng, true);
  Tensor b = random_tensor({2, 4, 4}, rng, true);
  check("add", [&] { return sum(mul(add(a, b), add(a, b))); }, {a, b});
  check("sub", [&] { return sum(mul(sub(a, b), sub(a, b))); }, {a, b});
  check("mul", [&] { return sum(mul(a, b)); }, {a, b});
  check("maximum", [&] { return sum(mul(maximum(a, b), a)); }, {a, b});
  check("scale", [&] { return sum(scale(a, -1.7)); }, {a});
  check("leaky_relu", [&] { return sum(mul(leaky_relu(a), b)); }, {a});
  check("relu", [&] { return sum(mul(relu(a), b)); }, {a});
  check("sigmoid", [&] { return sum(mul(sigmoid(a), b)); }, {a});
  check("mean", [&] { return mean(mul(a, a)); }, {a});
  check("l1_distance", [&] { return l1_distance(a, b); }, {a, b});
  check("mse", [&] { return mse_loss(sigmoid(a), sigmoid(b)); }, {a, b});
  check("bce", [&] { return bce_loss(sigmoid(a), detach(sigmoid(b))); }, {a});

  Tensor x = random_tensor({6}, rng, true);
  Tensor w = random_tensor({6, 3}, rng, true);
  Tensor bias = random_tensor({3}, rng, true);
  check("linear", [&] { return sum(mul(linear(x, w, bias), linear(x, w, bias))); }, {x, w, bias});

  Tensor ma = random_tensor({3, 4}, rng, true);
  Tensor mb = random_tensor({4, 2}, rng, true);
  check("matmul", [&] { return sum(mul(matmul(ma, mb), matmul(ma, mb))); }, {ma, mb});
  check("transpose", [&] { return sum(mul(transpose(ma), transpose(ma))); }, {ma});
  check("reshape", [&] { return sum(mul(reshape(ma, {12}), reshape(ma, {12}))); }, {ma});
  check("select_row", [&] { return sum(mul(select_row(ma, 1), select_row(ma, 1))); }, {ma});
  check("softmax_vec", [&] { return sum(mul(softmax(x), x)); }, {x});
  check("softmax_mat0", [&] { return sum(mul(softmax(ma, 0), ma)); }, {ma});
  check("softmax_mat1", [&] { return sum(mul(softmax(ma, 1), ma)); }, {ma});
  check("cosine", [&] { return cosine_similarity(x, select_row(transpose(w), 2)); }, {x, w});

  Tensor img = random_tensor({2, 5, 6}, rng, true);
  Tensor ker = random_tensor({3, 2, 3, 3}, rng, true);
  Tensor cb = random_tensor({3}, rng, true);
  check("conv2d", [&] { return sum(mul(conv2d(img, ker, 1, cb), conv2d(img, ker, 1, cb))); },
        {img, ker, cb});
  check("conv2d_dil2", [&] { return mean(mul(conv2d(img, ker, 2, cb), conv2d(img, ker, 2, cb))); },
        {img, ker, cb});
  Tensor dwk = random_tensor({2, 3, 3}, rng, true);
  check("depthwise", [&] { return sum(mul(depthwise_conv2d(img, dwk, 1), img)); }, {img, dwk});
  check("depthwise_dil3", [&] { return sum(mul(depthwise_conv2d(img, dwk, 3), img)); }, {img, dwk});
  check("sobel", [&] { return sum(mul(sobel(img), img)); }, {img});
  check("pool_gap", [&] { return sum(mul(pool(img, PoolKind::GAP), pool(img, PoolKind::GAP))); }, {img});
  check("pool_gmp", [&] { return sum(mul(pool(img, PoolKind::GMP), pool(img, PoolKind::GMP))); }, {img});
  check("pool_meanp", [&] { return sum(mul(pool(img, PoolKind::MeanP), img)); }, {img});
  check("pool_maxp", [&] { return sum(mul(pool(img, PoolKind::MaxP), img)); }, {img});
  Tensor c11 = random_tensor({3, 1, 1}, rng, true);
  check("broadcast_hw", [&] { return sum(mul(broadcast_hw(c11, 4, 5), broadcast_hw(c11, 4, 5))); }, {c11});
  check("concat", [&] { return sum(mul(concat_channels(a, b), concat_channels(b, a))); }, {a, b});
  check("bilinear_same", [&] { return sum(mul(bilinear_resize(img, 5, 6), img)); }, {img});
  check("bilinear_up", [&] { return sum(mul(bilinear_resize(img, 9, 4), bilinear_resize(img, 9, 4))); }, {img});
}

TEST_CASE("forward never produces non-finite values on finite input") {
  Rng rng(77);
  Tensor big = random_tensor({2, 4, 4}, rng, false, 500.0);
  REQUIRE(all_finite(softmax(reshape(big, {32}))));
  REQUIRE(all_finite(sigmoid(big)));
  REQUIRE(all_finite(sobel(big)));
  REQUIRE(all_finite(cosine_similarity(Tensor::zeros({4}), Tensor::zeros({4}))));
}

TEST_CASE("determinism: same seed, same graph, same gradients") {
  auto run = [] {
    Rng rng(314);
    Tensor x = Tensor::from_data({2, 4, 4}, rng.gaussian_vec(32), true);
    Tensor k = Tensor::from_data({2, 2, 3, 3}, rng.gaussian_vec(36), true);
    Tensor loss = mean(mul(sigmoid(conv2d(x, k, 1)), sobel(x)));
    backward(loss);
    std::vector<double> out{loss.item()};
    out.insert(out.end(), x.grad().begin(), x.grad().end());
    out.insert(out.end(), k.grad().begin(), k.grad().end());
    return out;
  };
  REQUIRE(run() == run());
}

TEST_CASE("adam_step") {
  SECTION("zero gradient leaves parameters unchanged") {
    Tensor p = Tensor::from_data({3}, {1, 2, 3}, true);
    p.zero_grad();
    Adam opt({p}, 0.1);
    opt.step();
    REQUIRE(p.data() == std::vector<double>{1, 2, 3});
  }
  SECTION("first step magnitude is ~ lr * sign(g)") {
    Tensor p = Tensor::from_data({2}, {0.0, 0.0}, true);
    Tensor w = Tensor::from_data({2}, {3.0, -0.5});
    Adam opt({p}, 0.01);
    opt.zero_grad();
    backward(sum(mul(p, w)));
    opt.step();
    REQUIRE(p.data()[0] == Catch::Approx(-0.01).epsilon(1e-5));
    REQUIRE(p.data()[1] == Catch::Approx(0.01).epsilon(1e-5));
  }
  SECTION("lr = 0 leaves parameters unchanged") {
    Tensor p = Tensor::from_data({2}, {1.5, -2.5}, true);
    Adam opt({p}, 0.0);
    opt.zero_grad();
    backward(sum(mul(p, p)));
    opt.step();
    REQUIRE(p.data() == std::vector<double>{1.5, -2.5});
  }
  SECTION("3-step trace on a scalar quadratic matches a hand-stepped oracle") {
    const double lr = 0.05, b1 = 0.9, b2 = 0.999, eps = 1e-8;
    Tensor p = Tensor::from_data({1}, {2.0}, true);
    Adam opt({p}, lr, b1, b2, eps);
    // oracle state stepped by hand alongside; loss = x^2, grad = 2x
    double x = 2.0, m = 0.0, v = 0.0;
    for (int t = 1; t <= 3; ++t) {
      opt.zero_grad();
      backward(mul(p, p));
      opt.step();
      const double g = 2.0 * x;
      m = b1 * m + (1 - b1) * g;
      v = b2 * v + (1 - b2) * g * g;
      const double mhat = m / (1 - std::pow(b1, t));
      const double vhat = v / (1 - std::pow(b2, t));
      x -= lr * mhat / (std::sqrt(vhat) + eps);
      REQUIRE(p.data()[0] == Catch::Approx(x).margin(1e-15));
    }
  }
}
