#include <gtest/gtest.h>

#include "steerlab/evaluation.hpp"

using namespace steerlab;

namespace {

// K = 2, C = 2, one function token per language: ids 0-2 special, 3-4 tags,
// 5-8 content, 9-10 function.
VocabSpec small_vocab() {
	CorpusConfig c;
	c.languages = 2;
	c.concepts = 2;
	c.function_tokens = 1;
	return build_vocab(c);
}

Sentence sent(int lang, std::vector<int> tokens) {
	Sentence s;
	s.language = lang;
	s.tokens = std::move(tokens);
	return s;
}

} // namespace

// Hand-computed multinomial Bayes; three tokens in play out of six features.
TEST(Classifier, PosteriorsMatchHandComputedBayes) {
	const auto v = small_vocab();
	const int a = v.content_token(0, 0), b = v.content_token(1, 0), f = v.function_token(0, 0);
	std::vector<Sentence> corpus{sent(0, {1, a, a, f}), sent(0, {1, a}), sent(1, {1, b, b, b, a})};
	const auto clf = train_classifier(v, corpus, 0.5);
	// Counts lang 0: a=3, f=1 (total 4); lang 1: b=3, a=1 (total 4).
	// 6 feature tokens, alpha 0.5: denominator 4 + 3 = 7 for both.
	const double p0a = 3.5 / 7, p0b = 0.5 / 7, p1a = 1.5 / 7, p1b = 3.5 / 7;
	const double prior0 = 2.0 / 3, prior1 = 1.0 / 3;
	const std::vector<int> x{a, b, b};
	const double s0 = prior0 * p0a * p0b * p0b, s1 = prior1 * p1a * p1b * p1b;
	const auto verdict = clf.classify(x);
	EXPECT_NEAR(verdict.posterior[0], s0 / (s0 + s1), 1e-9);
	EXPECT_NEAR(verdict.posterior[1], s1 / (s0 + s1), 1e-9);
	EXPECT_EQ(verdict.language, 1);
	EXPECT_NEAR(verdict.posterior[0] + verdict.posterior[1], 1.0, 1e-9);
}

TEST(Classifier, EmptyInputFallsBackToPrior) {
	const auto v = small_vocab();
	std::vector<Sentence> corpus{sent(0, {5}), sent(1, {7}), sent(1, {8})};
	const auto clf = train_classifier(v, corpus);
	const auto r = clf.classify({});
	EXPECT_EQ(r.language, 1);
	EXPECT_NEAR(r.posterior[1], 2.0 / 3, 1e-12);
	// Special and tag tokens are ignored.
	EXPECT_EQ(clf.classify(std::vector<int>{kBos, 3, kEos}).posterior, r.posterior);
}

TEST(Classifier, PureLanguageAndTieBreak) {
	CorpusGenerator gen(CorpusConfig{}, 3);
	std::vector<Sentence> corpus;
	for (int l = 0; l < 5; ++l) {
		const auto s = gen.sentences(l, 1000, streams::classifier(l));
		corpus.insert(corpus.end(), s.begin(), s.end());
	}
	const auto clf = train_classifier(gen.vocab(), corpus);
	const auto &v = gen.vocab();
	std::vector<int> pure;
	for (int c = 0; c < 10; ++c)
		pure.push_back(v.content_token(2, c));
	const auto r = clf.classify(pure);
	EXPECT_EQ(r.language, 2);
	EXPECT_GE(r.posterior[2], 0.99);

	// Languages 1 and 2 mirror each other and outweigh 0; a token none of
	// them saw leaves 1 and 2 exactly tied and the lower index wins.
	CorpusConfig cc;
	cc.languages = 3;
	cc.function_tokens = 1;
	const auto v3 = build_vocab(cc);
	std::vector<Sentence> sym{sent(0, {v3.content_token(0, 0), v3.content_token(0, 1)})};
	for (int rep = 0; rep < 2; ++rep)
		for (int l = 1; l < 3; ++l)
			sym.push_back(sent(l, {v3.content_token(l, 0), v3.content_token(l, 1)}));
	const auto c3 = train_classifier(v3, sym);
	const std::vector<int> unseen{v3.function_token(0, 0)};
	const auto t = c3.classify(unseen);
	EXPECT_EQ(t.language, 1);
	EXPECT_EQ(t.posterior[1], t.posterior[2]);
	EXPECT_GT(t.posterior[1], t.posterior[0]);
}

TEST(Classifier, HeldOutAccuracyOnGeneratedCorpus) {
	CorpusGenerator gen(CorpusConfig{}, 4);
	std::vector<Sentence> corpus;
	for (int l = 0; l < 5; ++l) {
		const auto s = gen.sentences(l, 1000, streams::classifier(l));
		corpus.insert(corpus.end(), s.begin(), s.end());
	}
	const auto clf = train_classifier(gen.vocab(), corpus);
	int hit = 0, n = 0;
	for (int l = 0; l < 5; ++l)
		for (const auto &s : gen.sentences(l, 200, "heldout-test")) {
			hit += clf.classify(s.tokens).language == l;
			++n;
		}
	EXPECT_GE(static_cast<double>(hit) / n, 0.99);
}

TEST(Classifier, MissingLanguageThrows) {
	const auto v = small_vocab();
	std::vector<Sentence> corpus{sent(0, {5})};
	EXPECT_THROW(train_classifier(v, corpus), std::invalid_argument);
}

TEST(Classifier, JsonRoundTrip) {
	const auto v = small_vocab();
	std::vector<Sentence> corpus{sent(0, {5, 9}), sent(1, {7, 10, 10})};
	const auto clf = train_classifier(v, corpus);
	const auto back = classifier_from_json(to_json(clf));
	const std::vector<int> x{5, 10, 7};
	EXPECT_EQ(back.classify(x).posterior, clf.classify(x).posterior);
}

TEST(Semantic, IdentityOrthogonalAndHalfOverlap) {
	CorpusGenerator gen(CorpusConfig{}, 1);
	const auto &v = gen.vocab();
	auto toks = [&](int lang, std::vector<int> cs) {
		std::vector<int> t{kBos};
		for (int c : cs)
			t.push_back(v.content_token(lang, c));
		return t;
	};
	EXPECT_NEAR(semantic_score(v, toks(0, {1, 2, 3}), toks(3, {3, 2, 1})), 1.0, 1e-12);
	EXPECT_EQ(semantic_score(v, toks(0, {1, 2}), toks(1, {4, 5})), 0.0);
	// {1,2} vs {2,3}: cosine = 1 / (sqrt2 * sqrt2) = 0.5
	EXPECT_NEAR(semantic_score(v, toks(0, {1, 2}), toks(2, {2, 3})), 0.5, 1e-12);
	// {1,1,2} vs {1,3}: (2) / (sqrt5 * sqrt2)
	EXPECT_NEAR(semantic_score(v, toks(0, {1, 1, 2}), toks(2, {1, 3})), 2.0 / std::sqrt(10.0), 1e-12);
	// function tokens ignored
	auto with_func = toks(2, {1, 2});
	with_func.push_back(v.function_token(2, 0));
	EXPECT_NEAR(semantic_score(v, toks(0, {1, 2}), with_func), 1.0, 1e-12);
	EXPECT_EQ(semantic_score(v, toks(0, {1}), {}), 0.0);
}

TEST(Record, ZeroOnMismatchAndEmptyFails) {
	const auto v = small_vocab();
	const int c0 = v.content_token(0, 0), c1 = v.content_token(1, 0);
	std::vector<Sentence> corpus{sent(0, {c0, v.function_token(0, 0)}), sent(1, {c1, v.function_token(1, 0)})};
	const auto clf = train_classifier(v, corpus);
	const std::vector<int> source{kBos, c0};
	EvalRecord r;
	r.target = 1;
	r.tokens = {c0, c0};
	score_record(r, clf, v, source);
	EXPECT_EQ(r.verdict, 0);
	EXPECT_EQ(r.semantic, 0.0);
	r.tokens = {c1};
	score_record(r, clf, v, source);
	EXPECT_EQ(r.verdict, 1);
	EXPECT_NEAR(r.semantic, 1.0, 1e-12);
	r.tokens = {};
	score_record(r, clf, v, source);
	EXPECT_EQ(r.verdict, 0);
	r.target = 0;
	score_record(r, clf, v, source);
	EXPECT_EQ(r.verdict, 0);
}

TEST(Summary, MeanAndNormalCi) {
	const std::vector<double> xs{0.0, 1.0, 1.0, 0.0, 1.0};
	const auto m = mean_ci95(xs);
	EXPECT_DOUBLE_EQ(m.mean, 0.6);
	const double sd = std::sqrt((3 * 0.16 + 2 * 0.36) / 4);
	EXPECT_NEAR(m.ci95, 1.959963984540054 * sd / std::sqrt(5.0), 1e-12);
	EXPECT_EQ(m.n, 5u);
}

TEST(Summary, BestOfKAtLeastMean) {
	std::vector<SummaryRow> rows(3);
	rows[0].sem_mean = 0.2;
	rows[1].sem_mean = 0.5;
	rows[2].sem_mean = 0.3;
	const SummaryRow *best = &rows[0];
	double mean = 0;
	for (const auto &r : rows) {
		if (better_row(r, *best))
			best = &r;
		mean += r.sem_mean / 3;
	}
	EXPECT_EQ(best, &rows[1]);
	EXPECT_GE(best->sem_mean, mean);
}

TEST(Csv, SweepSchema) {
	SummaryRow r;
	r.layer = 4;
	r.language = 2;
	r.mode = "final";
	r.feature = 17;
	r.lang_acc = 0.5;
	r.n_prompts = 10;
	const std::vector<SummaryRow> rows{r};
	EXPECT_EQ(sweep_csv(rows), "layer,language,mode,feature,lang_acc,sem_mean,sem_ci95,n_prompts\n"
	                           "4,2,final,17,0.500000,0.000000,0.000000,10\n");
	EXPECT_EQ(baselines_csv(rows).substr(0, 5), "kind,");
}
