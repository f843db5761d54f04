/*
 * Copyright 2026 The steerlab Authors
 *
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 *    http://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */

#ifndef STEERLAB_EVALUATION_HPP
#define STEERLAB_EVALUATION_HPP

// Scoring of generated continuations: a unigram naive Bayes language
// identifier, a concept-overlap semantic score, and summary statistics.

#include <cmath>
#include <iomanip>
#include <limits>
#include <sstream>
#include <string>
#include <vector>

#include "corpus.hpp"
#include "tensor_io.hpp"

namespace steerlab {

// Multinomial unigram naive Bayes with add-alpha smoothing. Only content
// and function tokens are features; special and tag tokens are skipped.
struct LangClassifier {
	int languages = 0;
	double alpha = 0.5;
	std::vector<double> log_prior;  // per language
	Matrix<double> log_likelihood;  // languages x vocab
	std::vector<bool> feature;      // token counts toward the likelihood

	struct Verdict {
		int language = 0;
		std::vector<double> posterior;
	};

	Verdict classify(std::span<const int> tokens) const {
		std::vector<double> lp = log_prior;
		for (int t : tokens) {
			if (t < 0 || static_cast<std::size_t>(t) >= feature.size() || !feature[t])
				continue;
			for (int k = 0; k < languages; ++k)
				lp[k] += log_likelihood(k, t);
		}
		Verdict v;
		v.posterior = lp;
		softmax_inplace(std::span<double>(v.posterior), 1.0);
		v.language = 0;
		for (int k = 1; k < languages; ++k)
			if (lp[k] > lp[v.language])
				v.language = k;
		return v;
	}
};

// Counts are taken from labelled sentences; the prior follows the
// sentence counts.
inline LangClassifier train_classifier(const VocabSpec &vocab, std::span<const Sentence> corpus, double alpha = 0.5) {
	const int K = vocab.languages;
	const std::size_t V = vocab.size;
	LangClassifier clf;
	clf.languages = K;
	clf.alpha = alpha;
	clf.feature.assign(V, false);
	for (std::size_t t = 0; t < V; ++t) {
		const auto k = vocab.kind(static_cast<int>(t));
		clf.feature[t] = k == TokenKind::content || k == TokenKind::function;
	}
	const std::size_t n_features = static_cast<std::size_t>(std::count(clf.feature.begin(), clf.feature.end(), true));
	std::vector<double> docs(K, 0.0);
	Matrix<double> counts(K, V);
	for (const auto &s : corpus) {
		if (s.language < 0 || s.language >= K)
			throw std::invalid_argument("classifier corpus: language out of range");
		docs[s.language] += 1.0;
		for (int t : s.tokens)
			if (t >= 0 && static_cast<std::size_t>(t) < V && clf.feature[t])
				counts(s.language, t) += 1.0;
	}
	double total_docs = 0.0;
	for (int k = 0; k < K; ++k) {
		if (docs[k] == 0.0)
			throw std::invalid_argument("classifier corpus has no sentences for language " + std::to_string(k));
		total_docs += docs[k];
	}
	clf.log_prior.resize(K);
	clf.log_likelihood = Matrix<double>(K, V, -std::numeric_limits<double>::infinity());
	for (int k = 0; k < K; ++k) {
		clf.log_prior[k] = std::log(docs[k] / total_docs);
		double row_total = 0.0;
		for (std::size_t t = 0; t < V; ++t)
			if (clf.feature[t])
				row_total += counts(k, t);
		const double denom = row_total + alpha * static_cast<double>(n_features);
		for (std::size_t t = 0; t < V; ++t)
			if (clf.feature[t])
				clf.log_likelihood(k, t) = std::log((counts(k, t) + alpha) / denom);
	}
	return clf;
}

inline Json to_json(const LangClassifier &c) {
	Json ll = Json::array();
	for (int k = 0; k < c.languages; ++k) {
		Json row = Json::array();
		for (std::size_t t = 0; t < c.feature.size(); ++t)
			row.push_back(c.feature[t] ? Json(c.log_likelihood(k, t)) : Json(nullptr));
		ll.push_back(row);
	}
	return Json{{"languages", c.languages}, {"alpha", c.alpha}, {"log_prior", c.log_prior}, {"log_likelihood", ll}};
}

inline LangClassifier classifier_from_json(const Json &j) {
	LangClassifier c;
	c.languages = j.at("languages");
	c.alpha = j.at("alpha");
	c.log_prior = j.at("log_prior").get<std::vector<double>>();
	const auto &ll = j.at("log_likelihood");
	const std::size_t V = ll.at(0).size();
	c.feature.assign(V, false);
	c.log_likelihood = Matrix<double>(c.languages, V, -std::numeric_limits<double>::infinity());
	for (int k = 0; k < c.languages; ++k)
		for (std::size_t t = 0; t < V; ++t)
			if (!ll[k][t].is_null()) {
				c.feature[t] = true;
				c.log_likelihood(k, t) = ll[k][t].get<double>();
			}
	return c;
}

inline std::vector<double> concept_histogram(const VocabSpec &vocab, std::span<const int> tokens) {
	std::vector<double> h(vocab.concepts, 0.0);
	for (int t : tokens)
		if (auto c = vocab.concept_of(t))
			h[*c] += 1.0;
	return h;
}

// Cosine between concept-frequency vectors; 0 when either side has no
// content tokens.
inline double semantic_score(const VocabSpec &vocab, std::span<const int> source, std::span<const int> generated) {
	const auto a = concept_histogram(vocab, source);
	const auto b = concept_histogram(vocab, generated);
	double ab = 0.0, aa = 0.0, bb = 0.0;
	for (std::size_t i = 0; i < a.size(); ++i) {
		ab += a[i] * b[i];
		aa += a[i] * a[i];
		bb += b[i] * b[i];
	}
	if (aa == 0.0 || bb == 0.0)
		return 0.0;
	return std::clamp(ab / std::sqrt(aa * bb), 0.0, 1.0);
}

struct EvalRecord {
	int prompt_id = 0;
	int layer = 0; // 0 for unsteered runs
	long feature = -1;
	int target = 0;
	std::string mode;
	std::string condition; // "steer", "unsteered", "prompt"
	std::vector<int> tokens;
	int verdict = 0;
	double lang_prob = 0.0;
	double semantic = 0.0;
};

inline Json to_json(const EvalRecord &r) {
	return Json{{"prompt_id", r.prompt_id}, {"layer", r.layer},     {"feature", r.feature},
	            {"target", r.target},       {"mode", r.mode},       {"condition", r.condition},
	            {"tokens", r.tokens},       {"lang_verdict", r.verdict}, {"lang_prob", r.lang_prob},
	            {"semantic", r.semantic}};
}

// Scores one continuation. The verdict is 1 only if the classifier picks
// `target`; the semantic score is forced to 0 otherwise. An empty
// continuation always fails.
inline void score_record(EvalRecord &r, const LangClassifier &clf, const VocabSpec &vocab,
                         std::span<const int> source) {
	bool has_feature = false;
	for (int t : r.tokens)
		has_feature = has_feature || (t >= 0 && static_cast<std::size_t>(t) < clf.feature.size() && clf.feature[t]);
	const auto v = clf.classify(r.tokens);
	r.lang_prob = v.posterior.at(r.target);
	r.verdict = (has_feature && v.language == r.target) ? 1 : 0;
	r.semantic = r.verdict ? semantic_score(vocab, source, r.tokens) : 0.0;
}

struct MeanCi {
	double mean = 0.0;
	double ci95 = 0.0; // half-width, normal approximation
	std::size_t n = 0;
};

inline MeanCi mean_ci95(std::span<const double> xs) {
	MeanCi r;
	r.n = xs.size();
	if (xs.empty())
		return r;
	double s = 0.0;
	for (double x : xs)
		s += x;
	r.mean = s / xs.size();
	if (xs.size() > 1) {
		double ss = 0.0;
		for (double x : xs)
			ss += (x - r.mean) * (x - r.mean);
		r.ci95 = 1.959963984540054 * std::sqrt(ss / (xs.size() - 1)) / std::sqrt(static_cast<double>(xs.size()));
	}
	return r;
}

// One row of sweep.csv / baselines.csv.
struct SummaryRow {
	std::string kind = "steer"; // steer | unsteered | prompt | self_consistency
	int layer = 0;
	int language = 0;
	std::string mode;
	long feature = -1;
	double lang_acc = 0.0;
	double sem_mean = 0.0;
	double sem_ci95 = 0.0;
	std::size_t n_prompts = 0;
};

inline SummaryRow summarize(std::span<const EvalRecord> records) {
	SummaryRow row;
	if (records.empty())
		return row;
	std::vector<double> sem;
	double acc = 0.0;
	for (const auto &r : records) {
		sem.push_back(r.semantic);
		acc += r.verdict;
	}
	const auto ci = mean_ci95(sem);
	row.layer = records.front().layer;
	row.language = records.front().target;
	row.mode = records.front().mode;
	row.feature = records.front().feature;
	row.lang_acc = acc / records.size();
	row.sem_mean = ci.mean;
	row.sem_ci95 = ci.ci95;
	row.n_prompts = records.size();
	return row;
}

// Row ordering for "best feature": semantic mean, then accuracy, then the
// earlier candidate.
inline bool better_row(const SummaryRow &a, const SummaryRow &b) {
	if (a.sem_mean != b.sem_mean)
		return a.sem_mean > b.sem_mean;
	return a.lang_acc > b.lang_acc;
}

inline std::string fmt_real(double x) {
	std::ostringstream ss;
	ss << std::setprecision(6) << std::fixed << x;
	return ss.str();
}

inline std::string sweep_csv(std::span<const SummaryRow> rows) {
	std::string out = "layer,language,mode,feature,lang_acc,sem_mean,sem_ci95,n_prompts\n";
	for (const auto &r : rows)
		out += std::to_string(r.layer) + "," + std::to_string(r.language) + "," + r.mode + "," +
		       std::to_string(r.feature) + "," + fmt_real(r.lang_acc) + "," + fmt_real(r.sem_mean) + "," +
		       fmt_real(r.sem_ci95) + "," + std::to_string(r.n_prompts) + "\n";
	return out;
}

inline std::string baselines_csv(std::span<const SummaryRow> rows) {
	std::string out = "kind,layer,language,mode,feature,lang_acc,sem_mean,sem_ci95,n_prompts\n";
	for (const auto &r : rows)
		out += r.kind + "," + std::to_string(r.layer) + "," + std::to_string(r.language) + "," + r.mode + "," +
		       std::to_string(r.feature) + "," + fmt_real(r.lang_acc) + "," + fmt_real(r.sem_mean) + "," +
		       fmt_real(r.sem_ci95) + "," + std::to_string(r.n_prompts) + "\n";
	return out;
}

} // namespace steerlab

#endif // STEERLAB_EVALUATION_HPP
