#include <gtest/gtest.h>

#include <algorithm>

#include "steerlab/contrast.hpp"
#include "steerlab/steering.hpp"
#include "test_util.hpp"

using namespace steerlab;
using steerlab::testing::random_matrix;

namespace {

Sae<double> random_sae(std::size_t d, std::size_t m, std::uint64_t seed) {
	Rng rng(seed);
	std::vector<double> mean(d, 0.0);
	auto s = init_sae<double>(1, d, m, mean, seed, 0.5);
	for (auto &x : s.b_enc.storage())
		x = rng.normal(0, 0.2);
	return s;
}

std::vector<Matrix<double>> random_corpus(std::size_t n, std::size_t d, Rng &rng) {
	std::vector<Matrix<double>> out;
	for (std::size_t i = 0; i < n; ++i)
		out.push_back(random_matrix<double>(rng.uniform_int(2, 9), d, rng));
	return out;
}

} // namespace

TEST(Contrast, AntisymmetricAndSelfZero) {
	const auto sae = random_sae(6, 20, 1);
	Rng rng(2);
	const auto a = encode_corpus(sae, random_corpus(30, 6, rng));
	const auto b = encode_corpus(sae, random_corpus(25, 6, rng));
	for (auto mode : {ContrastMode::mean, ContrastMode::final})
		for (bool w : {false, true}) {
			const auto ab = contrast(b, a, mode, 3, w);
			const auto ba = contrast(a, b, mode, 3, w);
			for (std::size_t j = 0; j < 20; ++j)
				EXPECT_EQ(ab.delta[j], -ba.delta[j]);
			const auto self = contrast(a, a, mode, 3, w);
			for (double x : self.delta)
				EXPECT_EQ(x, 0.0);
		}
}

TEST(Contrast, HandExampleMeanVsFinal) {
	// Identity-like SAE on d = m = 2 with zero biases: code = ReLU(h).
	Sae<double> s = Sae<double>::zeros(1, 2, 2);
	s.w_enc = Matrix<double>{{1, 0}, {0, 1}};
	s.w_dec = Matrix<double>{{1, 0}, {0, 1}};
	std::vector<Matrix<double>> base{Matrix<double>{{1, 0}, {1, 0}}};
	std::vector<Matrix<double>> target{Matrix<double>{{1, 0}, {0, 4}}};
	const auto cb = encode_corpus(s, base), ct = encode_corpus(s, target);
	const auto mean = contrast(ct, cb, ContrastMode::mean, 2);
	EXPECT_DOUBLE_EQ(mean.delta[0], -0.5);
	EXPECT_DOUBLE_EQ(mean.delta[1], 2.0);
	const auto fin = contrast(ct, cb, ContrastMode::final, 2);
	EXPECT_DOUBLE_EQ(fin.delta[0], -1.0);
	EXPECT_DOUBLE_EQ(fin.delta[1], 4.0);
	EXPECT_EQ(fin.top_k, (std::vector<std::size_t>{1, 0}));
}

TEST(Contrast, TokenWeightingPoolsTokens) {
	CorpusCodes c;
	c.mean_code = Matrix<double>{{1.0}, {4.0}};
	c.final_code = Matrix<double>{{0.0}, {0.0}};
	c.lengths = {1, 3};
	EXPECT_DOUBLE_EQ(corpus_statistic(c, ContrastMode::mean, false)[0], 2.5);
	EXPECT_DOUBLE_EQ(corpus_statistic(c, ContrastMode::mean, true)[0], (1.0 + 12.0) / 4.0);
}

TEST(TopK, SortedByMagnitudeTiesToLowerIndex) {
	const std::vector<double> d{0.5, -2.0, 2.0, 0.1, -0.5};
	EXPECT_EQ(top_k_by_magnitude(d, 4), (std::vector<std::size_t>{1, 2, 0, 4}));
	EXPECT_THROW(top_k_by_magnitude(d, 6), std::invalid_argument);
	EXPECT_THROW(top_k_by_magnitude(d, 0), std::invalid_argument);
}

TEST(TopK, InvariantToPairOrder) {
	const auto sae = random_sae(5, 16, 3);
	Rng rng(4);
	auto base = random_corpus(20, 5, rng);
	auto target = random_corpus(20, 5, rng);
	const auto r1 = contrast(encode_corpus(sae, target), encode_corpus(sae, base), ContrastMode::mean, 5);
	std::reverse(base.begin(), base.end());
	std::reverse(target.begin(), target.end());
	const auto r2 = contrast(encode_corpus(sae, target), encode_corpus(sae, base), ContrastMode::mean, 5);
	EXPECT_EQ(r1.top_k, r2.top_k);
	for (std::size_t j = 0; j < 16; ++j)
		EXPECT_NEAR(r1.delta[j], r2.delta[j], 1e-12);
}

TEST(Contrast, JsonRoundTripKeepsTopK) {
	ContrastResult r;
	r.layer = 3;
	r.target = 2;
	r.delta = {0.0, -1.5, 0.25, 3.0};
	r.top_k = {3, 1};
	r.n_base = r.n_target = 10;
	const auto q = contrast_from_json(to_json(r, "abc"), 4);
	EXPECT_EQ(q.top_k, r.top_k);
	EXPECT_EQ(q.top_delta(1), -1.5);
	EXPECT_EQ(q.layer, 3);
}

TEST(Steer, ZeroOffsetIsIdentity) {
	const auto sae = random_sae(6, 20, 5);
	Rng rng(6);
	std::vector<double> h(6);
	for (auto &x : h)
		x = rng.normal();
	SteerSpec spec;
	spec.layer = 1;
	spec.interventions = {{3, 0.0}, {7, 0.0}};
	EXPECT_EQ(apply<double>(spec, sae, h), h);
	spec.interventions = {{3, 2.0}};
	spec.scale = 0.0;
	EXPECT_EQ(apply<double>(spec, sae, h), h);
}

TEST(Steer, SingleFeatureAddsScaledColumn) {
	const auto sae = random_sae(6, 20, 7);
	Rng rng(8);
	for (int rep = 0; rep < 20; ++rep) {
		std::vector<double> h(6);
		for (auto &x : h)
			x = rng.normal();
		const std::size_t j = rng.uniform_int(0, 19);
		const double delta = rng.normal(0, 3);
		SteerSpec spec;
		spec.layer = 1;
		spec.interventions = {{j, delta}};
		const auto out = apply<double>(spec, sae, h);
		for (std::size_t i = 0; i < 6; ++i)
			EXPECT_NEAR(out[i] - h[i], delta * sae.w_dec(i, j), 1e-6);
	}
}

TEST(Steer, TwoInterventionsSuperpose) {
	const auto sae = random_sae(6, 20, 9);
	Rng rng(10);
	std::vector<double> h(6);
	for (auto &x : h)
		x = rng.normal();
	SteerSpec a, b, ab;
	a.interventions = {{2, 1.25}};
	b.interventions = {{11, -0.75}};
	ab.interventions = {{2, 1.25}, {11, -0.75}};
	const auto ha = apply<double>(a, sae, h), hb = apply<double>(b, sae, h), hab = apply<double>(ab, sae, h);
	for (std::size_t i = 0; i < 6; ++i)
		EXPECT_NEAR(hab[i] - h[i], (ha[i] - h[i]) + (hb[i] - h[i]), 1e-6);
}

TEST(Steer, SpecValidation) {
	const auto sae = random_sae(4, 8, 11);
	SteerSpec s;
	s.interventions = {{1, 1.0}, {1, 2.0}};
	EXPECT_THROW(s.validate(), std::invalid_argument);
	s.interventions = {{8, 1.0}};
	EXPECT_THROW(apply<double>(s, sae, std::vector<double>(4)), std::out_of_range);
	s.interventions = {{0, std::nan("")}};
	EXPECT_THROW(s.validate(), std::invalid_argument);
	s.interventions = {{0, 1.0}};
	s.layer = 2;
	EXPECT_THROW(apply<double>(s, sae, std::vector<double>(4)), std::invalid_argument);
}

TEST(Steer, SpecJsonRoundTrip) {
	SteerSpec s;
	s.layer = 4;
	s.target = 3;
	s.mode = ContrastMode::mean;
	s.scale = 1.5;
	s.interventions = {{17, -2.5}};
	const auto t = steer_spec_from_json(to_json(s));
	EXPECT_EQ(t.layer, 4);
	EXPECT_EQ(t.target, 3);
	EXPECT_EQ(t.mode, ContrastMode::mean);
	EXPECT_EQ(t.interventions[0].feature, 17u);
	EXPECT_EQ(t.interventions[0].offset, -2.5);
}

TEST(SteeredGenerate, ZeroSpecMatchesUnsteeredBitForBit) {
	ModelConfig cfg;
	cfg.n_layers = 2;
	cfg.n_heads = 2;
	cfg.d_model = 8;
	cfg.d_ff = 16;
	cfg.vocab_size = 12;
	cfg.context_len = 20;
	cfg.init_std = 0.5;
	const auto p = ModelParams<float>::init(cfg);
	auto sae = random_sae(8, 32, 12).cast<float>();
	sae.layer = 2;
	SteerSpec spec;
	spec.layer = 2;
	spec.interventions = {{5, 0.0}};
	GenerateOptions o;
	o.max_new = 15;
	o.eos_token = -1;
	const std::vector<int> prompt{1, 3, 4};
	Rng a(77), b(77);
	EXPECT_EQ(steered_generate<float>(p, sae, spec, prompt, o, a).tokens, generate<float>(p, prompt, o, b).tokens);
	spec.layer = 3;
	Rng c(1);
	EXPECT_THROW(steered_generate<float>(p, sae, spec, prompt, o, c), std::out_of_range);
}
