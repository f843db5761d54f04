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

#ifndef STEERLAB_CORPUS_HPP
#define STEERLAB_CORPUS_HPP

// The synthetic multilingual world. K languages render one shared space of
// C concepts; sentences are concept sequences drawn from a Markov chain and
// rendered token by token in one language.
//
// Token layout (ids are contiguous, in this order):
//   PAD=0, BOS=1, EOS=2
//   <lang:i>                 tag_base + i
//   content(lang, concept)   content_base + lang*C + concept
//   function(lang, f)        function_base + lang*F + f

#include <cstdint>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "numerics.hpp"
#include "rng.hpp"
#include "tensor_io.hpp"

namespace steerlab {

struct CorpusConfig {
	int languages = 5;
	int concepts = 24;
	int function_tokens = 4;
	int vocab_limit = 0; // 0 = unlimited
	double p_func = 0.25;
	int min_len = 8;
	int max_len = 16;
	int prompt_min_len = 4;
	int prompt_max_len = 8;
	// Concept chain: concepts are grouped into topics of this size. From a
	// concept the chain moves to its successor inside the topic with
	// p_successor, to a uniform topic member with p_topic, else uniformly.
	int topic_size = 6;
	double p_successor = 0.8;
	double p_topic = 0.15;
	std::vector<double> language_weights = {0.6, 0.1, 0.1, 0.1, 0.1};
	double p_tag = 0.5;
	// Probability that a training sequence switches to another language at a
	// uniformly chosen concept boundary.
	double p_switch = 0.5;
};

inline Json to_json(const CorpusConfig &c) {
	return Json{{"languages", c.languages},     {"concepts", c.concepts},
	            {"function_tokens", c.function_tokens}, {"vocab_limit", c.vocab_limit},
	            {"p_func", c.p_func},           {"min_len", c.min_len},
	            {"max_len", c.max_len},         {"prompt_min_len", c.prompt_min_len},
	            {"prompt_max_len", c.prompt_max_len}, {"topic_size", c.topic_size},
	            {"p_successor", c.p_successor}, {"p_topic", c.p_topic},
	            {"language_weights", c.language_weights}, {"p_tag", c.p_tag},
	            {"p_switch", c.p_switch}};
}

enum class TokenKind { special, tag, content, function };

inline constexpr int kPad = 0;
inline constexpr int kBos = 1;
inline constexpr int kEos = 2;

struct VocabSpec {
	int languages = 0;
	int concepts = 0;
	int function_tokens = 0;
	int tag_base = 3;
	int content_base = 0;
	int function_base = 0;
	int size = 0;

	int tag_token(int lang) const { return tag_base + check_lang(lang); }
	int content_token(int lang, int concept_id) const {
		if (concept_id < 0 || concept_id >= concepts)
			throw std::out_of_range("concept_id " + std::to_string(concept_id));
		return content_base + check_lang(lang) * concepts + concept_id;
	}
	int function_token(int lang, int f) const {
		if (f < 0 || f >= function_tokens)
			throw std::out_of_range("function token " + std::to_string(f));
		return function_base + check_lang(lang) * function_tokens + f;
	}

	TokenKind kind(int token) const {
		if (token < 0 || token >= size)
			throw std::out_of_range("token id " + std::to_string(token));
		if (token < tag_base)
			return TokenKind::special;
		if (token < content_base)
			return TokenKind::tag;
		if (token < function_base)
			return TokenKind::content;
		return TokenKind::function;
	}

	// Language of a tag, content or function token.
	std::optional<int> language_of(int token) const {
		switch (kind(token)) {
		case TokenKind::special:
			return std::nullopt;
		case TokenKind::tag:
			return token - tag_base;
		case TokenKind::content:
			return (token - content_base) / concepts;
		case TokenKind::function:
			return (token - function_base) / function_tokens;
		}
		return std::nullopt;
	}

	std::optional<int> concept_of(int token) const {
		if (kind(token) != TokenKind::content)
			return std::nullopt;
		return (token - content_base) % concepts;
	}

	int check_lang(int lang) const {
		if (lang < 0 || lang >= languages)
			throw std::out_of_range("language " + std::to_string(lang));
		return lang;
	}

	friend bool operator==(const VocabSpec &, const VocabSpec &) = default;
};

inline VocabSpec build_vocab(const CorpusConfig &cfg) {
	if (cfg.languages < 2)
		throw std::invalid_argument("need at least 2 languages");
	if (cfg.concepts < 2)
		throw std::invalid_argument("need at least 2 concepts");
	if (cfg.function_tokens < 0)
		throw std::invalid_argument("negative function token count");
	VocabSpec v;
	v.languages = cfg.languages;
	v.concepts = cfg.concepts;
	v.function_tokens = cfg.function_tokens;
	v.tag_base = 3;
	v.content_base = v.tag_base + cfg.languages;
	v.function_base = v.content_base + cfg.languages * cfg.concepts;
	v.size = v.function_base + cfg.languages * cfg.function_tokens;
	if (cfg.vocab_limit > 0 && v.size > cfg.vocab_limit)
		throw std::length_error("vocabulary needs " + std::to_string(v.size) + " ids, limit is " +
		                        std::to_string(cfg.vocab_limit));
	return v;
}

// Row-stochastic concept transition matrix plus a uniform start distribution.
struct MarkovChain {
	Matrix<double> transition;
	std::vector<double> initial;

	int states() const { return static_cast<int>(initial.size()); }

	void validate() const {
		if (transition.rows() != initial.size() || transition.cols() != initial.size())
			throw DimensionError("markov chain: shape mismatch");
		for (std::size_t i = 0; i < transition.rows(); ++i) {
			double s = 0.0;
			for (double p : transition.row(i)) {
				if (p < 0.0)
					throw std::invalid_argument("markov chain: negative probability");
				s += p;
			}
			if (std::abs(s - 1.0) > 1e-9)
				throw std::invalid_argument("markov chain: row " + std::to_string(i) + " sums to " +
				                            std::to_string(s));
		}
	}

	int start(Rng &rng) const { return static_cast<int>(rng.categorical<double>(initial)); }
	int next(int from, Rng &rng) const { return static_cast<int>(rng.categorical<double>(transition.row(from))); }
};

inline MarkovChain build_chain(const CorpusConfig &cfg) {
	const int c = cfg.concepts;
	const int topic = std::max(1, std::min(cfg.topic_size, c));
	if (cfg.p_successor + cfg.p_topic > 1.0 + 1e-12)
		throw std::invalid_argument("p_successor + p_topic exceeds 1");
	MarkovChain chain;
	chain.transition = Matrix<double>(c, c);
	chain.initial.assign(c, 1.0 / c);
	const double rest = 1.0 - cfg.p_successor - cfg.p_topic;
	for (int i = 0; i < c; ++i) {
		const int first = (i / topic) * topic;
		const int members = std::min(topic, c - first);
		const int succ = first + (i - first + 1) % members;
		chain.transition(i, succ) += cfg.p_successor;
		for (int m = first; m < first + members; ++m)
			chain.transition(i, m) += cfg.p_topic / members;
		for (int j = 0; j < c; ++j)
			chain.transition(i, j) += rest / c;
	}
	chain.validate();
	return chain;
}

struct Sentence {
	int language = 0;
	std::vector<int> concepts;
	std::vector<int> tokens;

	friend bool operator==(const Sentence &, const Sentence &) = default;
};

struct ParallelPair {
	Sentence base;
	Sentence target;
};

// Drops special, tag and function tokens and maps content tokens back to
// concepts.
inline std::vector<int> recover_concepts(const VocabSpec &vocab, std::span<const int> tokens) {
	std::vector<int> out;
	for (int t : tokens)
		if (auto c = vocab.concept_of(t))
			out.push_back(*c);
	return out;
}

inline std::vector<int> sample_concepts(const MarkovChain &chain, int length, Rng &rng) {
	std::vector<int> out;
	out.reserve(length);
	if (length <= 0)
		return out;
	out.push_back(chain.start(rng));
	for (int i = 1; i < length; ++i)
		out.push_back(chain.next(out.back(), rng));
	return out;
}

// Appends the surface form of `concepts` in `lang` (no BOS/EOS).
inline void render_into(std::vector<int> &tokens, const VocabSpec &vocab, int lang, std::span<const int> concepts,
                        double p_func, Rng &rng) {
	for (int c : concepts) {
		tokens.push_back(vocab.content_token(lang, c));
		if (vocab.function_tokens > 0 && p_func > 0.0 && rng.bernoulli(p_func))
			tokens.push_back(vocab.function_token(lang, rng.uniform_int(0, vocab.function_tokens - 1)));
	}
}

inline Sentence render_sentence(const VocabSpec &vocab, int lang, std::vector<int> concepts, double p_func,
                                Rng &rng) {
	Sentence s;
	s.language = vocab.check_lang(lang);
	s.tokens.push_back(kBos);
	render_into(s.tokens, vocab, lang, concepts, p_func, rng);
	s.concepts = std::move(concepts);
	return s;
}

inline Sentence sample_sentence(int lang, Rng &rng, const VocabSpec &vocab, const MarkovChain &chain, int min_len,
                                int max_len, double p_func) {
	const int len = rng.uniform_int(min_len, max_len);
	return render_sentence(vocab, lang, sample_concepts(chain, len, rng), p_func, rng);
}

// Named streams of the corpus seed. Every sampler draws from its own stream,
// so prompts, contrast pairs and classifier data never share a seed.
namespace streams {
inline std::string pairs(int target) { return "pairs/" + std::to_string(target); }
inline constexpr const char *prompts = "prompts";
inline std::string classifier(int lang) { return "classifier/" + std::to_string(lang); }
inline std::string attribution(int lang) { return "attribution/" + std::to_string(lang); }
inline constexpr const char *training = "training";
inline constexpr const char *heldout = "heldout";
inline constexpr const char *activations = "activations";
} // namespace streams

class CorpusGenerator {
public:
	CorpusGenerator(CorpusConfig cfg, std::uint64_t seed)
	    : cfg_(std::move(cfg)), vocab_(build_vocab(cfg_)), chain_(build_chain(cfg_)), seed_(seed) {
		if (static_cast<int>(cfg_.language_weights.size()) != cfg_.languages)
			throw std::invalid_argument("language_weights must have one entry per language");
	}

	const CorpusConfig &config() const noexcept { return cfg_; }
	const VocabSpec &vocab() const noexcept { return vocab_; }
	const MarkovChain &chain() const noexcept { return chain_; }
	std::uint64_t seed() const noexcept { return seed_; }
	std::uint64_t stream_seed(std::string_view name) const { return split_seed(seed_, name); }

	Sentence sentence(int lang, Rng &rng) const {
		return sample_sentence(lang, rng, vocab_, chain_, cfg_.min_len, cfg_.max_len, cfg_.p_func);
	}

	std::vector<Sentence> sentences(int lang, int n, std::string_view stream) const {
		Rng rng(stream_seed(stream));
		std::vector<Sentence> out;
		out.reserve(n);
		for (int i = 0; i < n; ++i)
			out.push_back(sentence(lang, rng));
		return out;
	}

	std::vector<ParallelPair> parallel_pairs(int target, int n) const {
		Rng rng(stream_seed(streams::pairs(target)));
		return parallel_pairs(target, n, rng);
	}

	std::vector<ParallelPair> parallel_pairs(int target, int n, Rng &rng) const {
		if (target <= 0 || target >= cfg_.languages)
			throw std::invalid_argument("parallel pairs need a target language in 1.." +
			                            std::to_string(cfg_.languages - 1) + ", got " + std::to_string(target));
		std::vector<ParallelPair> out;
		out.reserve(n);
		for (int i = 0; i < n; ++i) {
			const int len = rng.uniform_int(cfg_.min_len, cfg_.max_len);
			auto concepts = sample_concepts(chain_, len, rng);
			ParallelPair p;
			p.base = render_sentence(vocab_, 0, concepts, cfg_.p_func, rng);
			p.target = render_sentence(vocab_, target, std::move(concepts), cfg_.p_func, rng);
			out.push_back(std::move(p));
		}
		return out;
	}

	// Base-language prefixes used as steering prompts.
	std::vector<Sentence> prompts(int n) const {
		if (n < 1)
			throw std::invalid_argument("need at least one prompt");
		Rng rng(stream_seed(streams::prompts));
		std::vector<Sentence> out;
		out.reserve(n);
		for (int i = 0; i < n; ++i)
			out.push_back(sample_sentence(0, rng, vocab_, chain_, cfg_.prompt_min_len, cfg_.prompt_max_len,
			                              cfg_.p_func));
		return out;
	}

	struct TrainingSequence {
		int language = 0;
		bool tagged = false;
		int switch_language = -1; // -1 when the sequence does not switch
		std::vector<int> tokens;
	};

	// One sequence of the training mixture: [tag] BOS content... EOS.
	TrainingSequence training_sequence(Rng &rng) const {
		TrainingSequence seq;
		seq.language = static_cast<int>(rng.categorical<double>(cfg_.language_weights));
		seq.tagged = rng.bernoulli(cfg_.p_tag);
		const int len = rng.uniform_int(cfg_.min_len, cfg_.max_len);
		const auto concepts = sample_concepts(chain_, len, rng);
		int cut = len;
		if (cfg_.p_switch > 0.0 && len > 1 && rng.bernoulli(cfg_.p_switch)) {
			cut = rng.uniform_int(1, len - 1);
			seq.switch_language = (seq.language + rng.uniform_int(1, cfg_.languages - 1)) % cfg_.languages;
		}
		if (seq.tagged)
			seq.tokens.push_back(vocab_.tag_token(seq.language));
		seq.tokens.push_back(kBos);
		std::span<const int> all(concepts);
		render_into(seq.tokens, vocab_, seq.language, all.first(cut), cfg_.p_func, rng);
		if (cut < len)
			render_into(seq.tokens, vocab_, seq.switch_language, all.subspan(cut), cfg_.p_func, rng);
		seq.tokens.push_back(kEos);
		return seq;
	}

private:
	CorpusConfig cfg_;
	VocabSpec vocab_;
	MarkovChain chain_;
	std::uint64_t seed_;
};

// Infinite stream over the training mixture.
class TrainingStream {
public:
	TrainingStream(const CorpusGenerator &gen, std::uint64_t seed) : gen_(&gen), rng_(seed) {}

	CorpusGenerator::TrainingSequence next() { return gen_->training_sequence(rng_); }

	std::vector<std::vector<int>> batch(int n) {
		std::vector<std::vector<int>> out;
		out.reserve(n);
		for (int i = 0; i < n; ++i)
			out.push_back(next().tokens);
		return out;
	}

private:
	const CorpusGenerator *gen_;
	Rng rng_;
};

inline Json sentence_to_json(const Sentence &s) {
	return Json{{"lang", s.language}, {"concepts", s.concepts}, {"tokens", s.tokens}};
}

inline Sentence sentence_from_json(const Json &j) {
	Sentence s;
	s.language = j.at("lang").get<int>();
	s.concepts = j.at("concepts").get<std::vector<int>>();
	s.tokens = j.at("tokens").get<std::vector<int>>();
	return s;
}

inline std::string sentences_to_jsonl(std::span<const Sentence> sentences) {
	std::string out;
	for (const auto &s : sentences) {
		out += sentence_to_json(s).dump();
		out += '\n';
	}
	return out;
}

inline std::vector<Sentence> sentences_from_jsonl(std::string_view text) {
	std::vector<Sentence> out;
	std::size_t pos = 0;
	while (pos < text.size()) {
		std::size_t end = text.find('\n', pos);
		if (end == std::string_view::npos)
			end = text.size();
		auto line = text.substr(pos, end - pos);
		if (!line.empty())
			out.push_back(sentence_from_json(Json::parse(line)));
		pos = end + 1;
	}
	return out;
}

} // namespace steerlab

#endif // STEERLAB_CORPUS_HPP
