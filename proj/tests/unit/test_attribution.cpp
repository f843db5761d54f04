#include <gtest/gtest.h>

#include "steerlab/attribution.hpp"
#include "test_util.hpp"

using namespace steerlab;

namespace {

ModelConfig small_config(int layers = 3) {
	ModelConfig c;
	c.n_layers = layers;
	c.n_heads = 4;
	c.d_model = 16;
	c.d_ff = 24;
	c.vocab_size = 13;
	c.context_len = 16;
	c.seed = 21;
	c.init_std = 0.3;
	return c;
}

ModelParams<double> perturbed(const ModelConfig &cfg) {
	auto p = ModelParams<double>::init(cfg);
	Rng rng(split_seed(cfg.seed, "perturb"));
	p.visit([&](const std::string &, Matrix<double> &m) {
		for (auto &x : m.storage())
			x += 0.05 * rng.normal();
	});
	return p;
}

std::vector<LayerTrace<double>> traces_for(const ModelParams<double> &p, int n, std::uint64_t seed) {
	Rng rng(seed);
	std::vector<LayerTrace<double>> out;
	TraceOptions o;
	o.residual = o.heads = true;
	for (int i = 0; i < n; ++i) {
		std::vector<int> s(rng.uniform_int(2, p.config.context_len));
		for (auto &t : s)
			t = rng.uniform_int(0, p.config.vocab_size - 1);
		out.push_back(forward<double>(p, s, o).trace);
	}
	return out;
}

std::vector<double> unit_direction(std::size_t d, std::uint64_t seed) {
	Rng rng(seed);
	std::vector<double> v(d);
	for (auto &x : v)
		x = rng.normal();
	const double n = norm2<double>(v);
	for (auto &x : v)
		x /= n;
	return v;
}

double head_sum(const HeadAttribution &a) {
	double s = a.bias_dot;
	for (double h : a.head_dots)
		s += h;
	return s;
}

} // namespace

TEST(HeadAttribution, ConservesAttentionOutput) {
	const auto p = perturbed(small_config());
	const auto tr = traces_for(p, 30, 1);
	for (int l = 1; l <= 3; ++l) {
		const auto a = head_attribution(tr, l, unit_direction(16, l));
		EXPECT_LE(a.max_residual, 1e-10);
		EXPECT_NEAR(head_sum(a), a.attn_dot, 1e-10);
		EXPECT_NO_THROW(require_conserved(a));
	}
	const auto last = head_attribution(tr, 2, unit_direction(16, 9), PositionFilter{true});
	EXPECT_NEAR(head_sum(last), last.attn_dot, 1e-10);
}

TEST(HeadAttribution, OnlyLiveHeadCarriesContribution) {
	auto p = perturbed(small_config());
	// Zero the W_o rows of every head except head 2 in layer 2.
	auto &wo = p.blocks[1].wo;
	const std::size_t dh = 16 / 4;
	for (std::size_t h = 0; h < 4; ++h)
		if (h != 2)
			for (std::size_t r = h * dh; r < (h + 1) * dh; ++r)
				for (std::size_t c = 0; c < 16; ++c)
					wo(r, c) = 0.0;
	const auto tr = traces_for(p, 20, 2);
	const auto a = head_attribution(tr, 2, unit_direction(16, 3));
	for (std::size_t h = 0; h < 4; ++h)
		if (h != 2)
			EXPECT_EQ(a.head_dots[h], 0.0);
	EXPECT_NEAR(a.head_dots[2], a.attn_dot - a.bias_dot, 1e-10);
	EXPECT_EQ(a.top_heads(1).front(), 2);
}

TEST(HeadAttribution, LinearInDirection) {
	const auto p = perturbed(small_config());
	const auto tr = traces_for(p, 15, 4);
	const auto u = unit_direction(16, 5), v = unit_direction(16, 6);
	std::vector<double> w(16);
	for (std::size_t i = 0; i < 16; ++i)
		w[i] = 2.0 * u[i] - 0.5 * v[i];
	const auto au = head_attribution(tr, 1, u), av = head_attribution(tr, 1, v), aw = head_attribution(tr, 1, w);
	for (std::size_t h = 0; h < 4; ++h)
		EXPECT_NEAR(aw.head_dots[h], 2.0 * au.head_dots[h] - 0.5 * av.head_dots[h], 1e-10);
}

TEST(HeadAttribution, Errors) {
	const auto p = perturbed(small_config());
	auto tr = traces_for(p, 3, 7);
	const auto d = unit_direction(16, 1);
	EXPECT_THROW(head_attribution(tr, 0, d), std::out_of_range);
	EXPECT_THROW(head_attribution(tr, 4, d), std::out_of_range);
	EXPECT_THROW(head_attribution(std::vector<LayerTrace<double>>{}, 1, d), std::invalid_argument);
	Rng rng(1);
	TraceOptions resid_only;
	resid_only.residual = true;
	std::vector<LayerTrace<double>> bare{forward<double>(p, std::vector<int>{1, 4, 5}, resid_only).trace};
	EXPECT_THROW(head_attribution(bare, 1, d), PreconditionError);
}

TEST(Decompose, ConservesResidualAtEveryLayer) {
	const auto p = perturbed(small_config());
	const auto tr = traces_for(p, 25, 8);
	for (int L = 0; L <= 3; ++L) {
		const auto r = decompose(tr, L, unit_direction(16, 10 + L));
		EXPECT_EQ(r.contributions.size(), static_cast<std::size_t>(1 + 2 * L));
		EXPECT_LE(r.max_residual, 1e-10);
		EXPECT_NEAR(r.total(), r.resid_dot, 1e-10);
		EXPECT_NO_THROW(require_conserved(r));
	}
}

TEST(Decompose, LayerZeroIsEmbedding) {
	const auto p = perturbed(small_config());
	const auto tr = traces_for(p, 10, 9);
	const auto d = unit_direction(16, 2);
	const auto r = decompose(tr, 0, d);
	ASSERT_EQ(r.contributions.size(), 1u);
	EXPECT_EQ(r.contributions[0].label, "embed");
	// Independent: mean over sentences of mean over positions of (tok + pos) . d
	double want = 0;
	for (const auto &t : tr) {
		double s = 0;
		for (std::size_t i = 0; i < t.embed_out().rows(); ++i)
			s += dot<double>(t.embed_out().row(i), d);
		want += s / t.embed_out().rows();
	}
	EXPECT_NEAR(r.contributions[0].dot, want / tr.size(), 1e-12);
}

TEST(Decompose, SentenceOrderInvariant) {
	const auto p = perturbed(small_config());
	auto tr = traces_for(p, 12, 11);
	const auto d = unit_direction(16, 3);
	const auto a = decompose(tr, 3, d);
	std::reverse(tr.begin(), tr.end());
	const auto b = decompose(tr, 3, d);
	for (std::size_t c = 0; c < a.contributions.size(); ++c)
		EXPECT_NEAR(a.contributions[c].dot, b.contributions[c].dot, 1e-12);
}

TEST(Conservation, ViolationRaises) {
	HeadAttribution a;
	a.layer = 2;
	a.head_dots = {1.0, 2.0};
	a.bias_dot = 0.5;
	a.attn_dot = 3.6;
	EXPECT_THROW(require_conserved(a), ConservationError);
	DecompReport r;
	r.contributions = {{"embed", 0, 1.0}};
	r.resid_dot = 1.0 + 1e-3;
	EXPECT_THROW(require_conserved(r), ConservationError);
}

namespace {

HeadAttribution diag(int layer, int lang, std::vector<double> dots) {
	HeadAttribution a;
	a.layer = layer;
	a.feature_lang = a.input_lang = lang;
	a.head_dots = std::move(dots);
	return a;
}

} // namespace

TEST(Dominance, FlagsConsistentDominantHead) {
	std::vector<HeadAttribution> grid{diag(3, 0, {0.1, 5.0, 1.0, 0.2}), diag(3, 1, {0.3, 4.0, 1.5, 0.0}),
	                                  diag(2, 0, {1.0, 1.5, 0.0, 0.0}), diag(2, 1, {1.0, 3.0, 0.0, 0.0})};
	// Off-diagonal entries never count.
	auto off = diag(3, 0, {9.0, 0.0, 0.0, 0.0});
	off.input_lang = 1;
	grid.push_back(off);
	const auto s = dominance_report(grid, {}, 2.0);
	ASSERT_EQ(s.heads.size(), 1u);
	EXPECT_EQ(s.heads[0].layer, 3);
	EXPECT_EQ(s.heads[0].head, 1);
	EXPECT_NEAR(s.heads[0].min_ratio, 4.0 / 1.5, 1e-12);
}

TEST(Dominance, DisagreeingHeadsNotFlagged) {
	std::vector<HeadAttribution> grid{diag(1, 0, {5.0, 1.0}), diag(1, 1, {1.0, 5.0})};
	EXPECT_TRUE(dominance_report(grid, {}, 2.0).heads.empty());
}

TEST(Dominance, InfiniteFactorFlagsNothing) {
	std::vector<HeadAttribution> grid{diag(1, 0, {5.0, 0.0}), diag(1, 1, {7.0, -1.0})};
	EXPECT_EQ(dominance_report(grid, {}, 2.0).heads.size(), 1u);
	EXPECT_TRUE(dominance_report(grid, {}, std::numeric_limits<double>::infinity()).heads.empty());
}

TEST(Dominance, InheritanceFromEarlierBlock) {
	DecompReport r;
	r.target_layer = 4;
	r.feature_lang = 2;
	r.contributions = {{"embed", 0, 0.5}, {"1_attn_out", 1, 0.1}, {"1_mlp_out", 1, 0.2}, {"2_attn_out", 2, 3.0},
	                   {"2_mlp_out", 2, 0.4}, {"3_attn_out", 3, 0.0}, {"3_mlp_out", 3, 0.1}, {"4_attn_out", 4, 1.0},
	                   {"4_mlp_out", 4, 2.0}};
	DecompReport own = r;
	own.contributions[8].dot = 5.0;
	const std::vector<DecompReport> reps{r, own};
	const auto s = dominance_report({}, reps);
	ASSERT_EQ(s.inheritance.size(), 1u);
	EXPECT_EQ(s.inheritance[0].top_label, "2_attn_out");
	const auto j = to_json(s);
	EXPECT_EQ(j.at("inheritance").size(), 1u);
}

TEST(Csv, AttributionAndDecompSchemas) {
	std::vector<HeadAttribution> grid{diag(1, 0, {0.5, -0.25})};
	grid[0].bias_dot = 0.125;
	EXPECT_EQ(attribution_csv(grid), "layer,feature_lang,input_lang,head,dot\n"
	                                 "1,0,0,0,0.500000\n1,0,0,1,-0.250000\n1,0,0,bias,0.125000\n");
	DecompReport r;
	r.target_layer = 1;
	r.feature_lang = 3;
	r.contributions = {{"embed", 0, 1.0}, {"1_attn_out", 1, 0.0}, {"1_mlp_out", 1, -2.0}};
	const std::vector<DecompReport> reps{r};
	EXPECT_EQ(decomp_csv(reps), "target_layer,feature_lang,component_label,dot\n"
	                            "1,3,embed,1.000000\n1,3,1_attn_out,0.000000\n1,3,1_mlp_out,-2.000000\n");
}
