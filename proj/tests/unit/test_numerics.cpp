#include <gtest/gtest.h>

#include "test_util.hpp"

using namespace steerlab;
using steerlab::testing::central_diff;
using steerlab::testing::random_matrix;
using steerlab::testing::rel_err;

TEST(Matmul, IdentityAndHandExample) {
	Matrix<double> a{{1, 2}, {3, 4}};
	Matrix<double> eye{{1, 0}, {0, 1}};
	EXPECT_EQ(matmul(a, eye), a);
	Matrix<double> r{{1, 2}};
	Matrix<double> c{{3}, {4}};
	const auto p = matmul(r, c);
	ASSERT_EQ(p.rows(), 1u);
	ASSERT_EQ(p.cols(), 1u);
	EXPECT_EQ(p(0, 0), 11.0);
}

TEST(Matmul, MatchesTripleLoop) {
	Rng rng(7);
	const auto a = random_matrix<double>(5, 7, rng);
	const auto b = random_matrix<double>(7, 3, rng);
	const auto p = matmul(a, b);
	for (std::size_t i = 0; i < 5; ++i)
		for (std::size_t j = 0; j < 3; ++j) {
			double s = 0;
			for (std::size_t k = 0; k < 7; ++k)
				s += a(i, k) * b(k, j);
			EXPECT_LE(rel_err(p(i, j), s, 1e-12), 1e-6);
		}
}

TEST(Matmul, TransposedVariantsAgree) {
	Rng rng(3);
	const auto a = random_matrix<double>(4, 6, rng);
	const auto b = random_matrix<double>(4, 5, rng);
	const auto c = random_matrix<double>(3, 6, rng);
	const auto tn = matmul_tn(a, b);
	const auto ref = matmul(transpose(a), b);
	for (std::size_t i = 0; i < tn.size(); ++i)
		EXPECT_NEAR(tn.data()[i], ref.data()[i], 1e-12);
	const auto nt = matmul_nt(a, c);
	const auto ref2 = matmul(a, transpose(c));
	for (std::size_t i = 0; i < nt.size(); ++i)
		EXPECT_NEAR(nt.data()[i], ref2.data()[i], 1e-12);
}

TEST(Matmul, ShapeMismatchThrows) {
	Matrix<float> a(2, 3), b(2, 3);
	EXPECT_THROW(matmul(a, b), DimensionError);
	EXPECT_THROW(Matrix<float>(2, 2, std::vector<float>(3)), DimensionError);
}

TEST(Matmul, Deterministic) {
	Rng rng(11);
	const auto a = random_matrix<float>(9, 13, rng);
	const auto b = random_matrix<float>(13, 4, rng);
	EXPECT_EQ(matmul(a, b), matmul(a, b));
}

TEST(Softmax, Examples) {
	const auto s = softmax_rows(Matrix<double>{{0, 0}});
	EXPECT_DOUBLE_EQ(s(0, 0), 0.5);
	EXPECT_DOUBLE_EQ(s(0, 1), 0.5);
	const auto big = softmax_rows(Matrix<double>{{1000, 1000, 1000}});
	for (int j = 0; j < 3; ++j)
		EXPECT_NEAR(big(0, j), 1.0 / 3.0, 1e-15);
	const auto t = softmax_rows(Matrix<double>{{1, 2, 3}});
	const double z = std::exp(1.0) + std::exp(2.0) + std::exp(3.0);
	for (int j = 0; j < 3; ++j)
		EXPECT_NEAR(t(0, j), std::exp(j + 1.0) / z, 1e-9);
}

TEST(Softmax, RowsSumToOne) {
	Rng rng(5);
	const auto m = random_matrix<float>(20, 17, rng, 30.0);
	const auto s = softmax_rows(m, 0.7f);
	for (std::size_t i = 0; i < s.rows(); ++i) {
		double sum = 0;
		for (float x : s.row(i))
			sum += x;
		EXPECT_NEAR(sum, 1.0, 1e-6);
	}
}

TEST(RmsNorm, UnitRmsBeforeGain) {
	Rng rng(2);
	const auto x = random_matrix<double>(6, 16, rng, 3.0);
	std::vector<double> gain(16, 1.0);
	const auto y = rms_norm<double>(x, gain);
	for (std::size_t i = 0; i < y.rows(); ++i) {
		double ss = 0;
		for (double v : y.row(i))
			ss += v * v;
		EXPECT_NEAR(std::sqrt(ss / 16), 1.0, 1e-5);
	}
}

TEST(Gelu, ZeroInputGradient) {
	Matrix<double> x(1, 4, 0.0);
	Matrix<double> dy{{1.0, -2.0, 0.5, 3.0}};
	const auto dx = gelu_backward(x, dy);
	for (int j = 0; j < 4; ++j)
		EXPECT_DOUBLE_EQ(dx(0, j), 0.5 * dy(0, j));
	EXPECT_DOUBLE_EQ(gelu_grad(0.0), 0.5);
}

TEST(Backward, LinearLayerOuterProduct) {
	// loss = sum(x W): dL/dW = outer(x, 1)
	Rng rng(1);
	Dense<double> layer(random_matrix<double>(3, 2, rng), {0.0, 0.0});
	Matrix<double> x{{1.5, -2.0, 0.25}};
	layer.forward(x);
	layer.backward(Matrix<double>(1, 2, 1.0));
	for (std::size_t i = 0; i < 3; ++i)
		for (std::size_t j = 0; j < 2; ++j)
			EXPECT_DOUBLE_EQ(layer.grad_weight(i, j), x(0, i));
	EXPECT_DOUBLE_EQ(layer.grad_bias[0], 1.0);
}

TEST(Backward, MissingCacheThrows) {
	Dense<double> layer(Matrix<double>(2, 2), {0.0, 0.0});
	EXPECT_THROW(layer.backward(Matrix<double>(1, 2)), PreconditionError);
}

// Random three-layer MLP with RMS norm and softmax cross-entropy at the top;
// every weight checked against central differences.
TEST(Backward, ThreeLayerMlpFiniteDifference) {
	for (int seed = 0; seed < 20; ++seed) {
		Rng rng(100 + seed);
		const std::size_t n = 3 + seed % 3, d0 = 4 + seed % 4, d1 = 5, d2 = 6, d3 = 4;
		std::vector<Dense<double>> layers;
		layers.emplace_back(random_matrix<double>(d0, d1, rng, 0.5), std::vector<double>(d1, 0.1));
		layers.emplace_back(random_matrix<double>(d1, d2, rng, 0.5), std::vector<double>(d2, -0.1));
		layers.emplace_back(random_matrix<double>(d2, d3, rng, 0.5), std::vector<double>(d3, 0.05));
		const auto x = random_matrix<double>(n, d0, rng);
		std::vector<double> gain(d2);
		for (auto &g : gain)
			g = 1.0 + 0.3 * rng.normal();
		std::vector<int> targets(n);
		for (auto &t : targets)
			t = rng.uniform_int(0, static_cast<int>(d3) - 1);
		targets[0] = -1;

		std::vector<double> dgain(d2, 0.0);
		auto run = [&](bool grad) {
			auto h1 = layers[0].forward(x);
			auto a1 = gelu(h1);
			auto h2 = layers[1].forward(a1);
			std::vector<double> inv;
			auto n2 = rms_norm<double>(h2, gain, &inv);
			auto out = layers[2].forward(n2);
			Matrix<double> dlogits;
			const double loss = cross_entropy(out, targets, grad ? &dlogits : nullptr);
			if (grad) {
				for (auto &l : layers)
					l.zero_grad();
				std::fill(dgain.begin(), dgain.end(), 0.0);
				auto dn2 = layers[2].backward(dlogits);
				auto dh2 = rms_norm_backward<double>(h2, gain, inv, dn2, dgain);
				auto da1 = layers[1].backward(dh2);
				layers[0].backward(gelu_backward(h1, da1));
			}
			return loss;
		};
		run(true);
		auto loss = [&] { return run(false); };
		double worst = 0;
		for (auto &l : layers) {
			for (std::size_t i = 0; i < l.weight.size(); ++i)
				worst = std::max(worst, rel_err(l.grad_weight.data()[i], central_diff(loss, l.weight.data()[i], 1e-5), 1e-6));
			for (std::size_t i = 0; i < l.bias.size(); ++i)
				worst = std::max(worst, rel_err(l.grad_bias[i], central_diff(loss, l.bias[i], 1e-5), 1e-6));
		}
		for (std::size_t i = 0; i < gain.size(); ++i)
			worst = std::max(worst, rel_err(dgain[i], central_diff(loss, gain[i], 1e-5), 1e-6));
		EXPECT_LE(worst, 1e-5) << "seed " << seed;
	}
}

TEST(Backward, SoftmaxFiniteDifference) {
	Rng rng(9);
	auto x = random_matrix<double>(3, 5, rng);
	const auto w = random_matrix<double>(3, 5, rng);
	const double scale = 0.8;
	auto loss = [&] {
		const auto y = softmax_rows(x, scale);
		double s = 0;
		for (std::size_t i = 0; i < y.size(); ++i)
			s += y.data()[i] * w.data()[i];
		return s;
	};
	const auto dx = softmax_rows_backward(softmax_rows(x, scale), w, scale);
	for (std::size_t i = 0; i < x.size(); ++i)
		EXPECT_LE(rel_err(dx.data()[i], central_diff(loss, x.data()[i])), 1e-6);
}

TEST(CrossEntropy, IgnoresNegativeTargets) {
	Matrix<double> logits{{0, 0}, {5, -5}};
	std::vector<int> t{-1, 0};
	Matrix<double> d;
	const double l = cross_entropy(logits, t, &d);
	EXPECT_NEAR(l, std::log1p(std::exp(-10.0)), 1e-12);
	EXPECT_EQ(d(0, 0), 0.0);
	EXPECT_EQ(d(0, 1), 0.0);
}

TEST(Adam, FirstStepMovesBySignTimesLr) {
	Matrix<double> p{{1.0, -1.0, 0.5}};
	Matrix<double> g{{0.3, -4.0, 0.0}};
	AdamState<double> adam(AdamConfig{0.01, 0.9, 0.999, 1e-8});
	std::vector<Matrix<double> *> ps{&p};
	std::vector<const Matrix<double> *> gs{&g};
	adam.update(ps, gs);
	EXPECT_EQ(adam.step, 1);
	// bias-corrected m/sqrt(v) = sign(g) on the first step
	EXPECT_NEAR(p(0, 0), 1.0 - 0.01, 1e-9);
	EXPECT_NEAR(p(0, 1), -1.0 + 0.01, 1e-9);
	EXPECT_DOUBLE_EQ(p(0, 2), 0.5);
	ASSERT_EQ(adam.first_moment.size(), 1u);
	EXPECT_EQ(adam.first_moment[0].rows(), 1u);
	EXPECT_EQ(adam.first_moment[0].cols(), 3u);
}

TEST(Adam, MismatchedShapesThrow) {
	Matrix<double> p(1, 3), g(1, 2);
	AdamState<double> adam;
	std::vector<Matrix<double> *> ps{&p};
	std::vector<const Matrix<double> *> gs{&g};
	EXPECT_THROW(adam.update(ps, gs), DimensionError);
}

TEST(Matrix, FiniteCheck) {
	Matrix<float> m(2, 2);
	EXPECT_TRUE(m.all_finite());
	m(1, 1) = std::numeric_limits<float>::quiet_NaN();
	EXPECT_FALSE(m.all_finite());
	EXPECT_THROW(require_finite(m, "m"), NumericError);
}
