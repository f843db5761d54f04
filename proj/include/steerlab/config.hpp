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

#ifndef STEERLAB_CONFIG_HPP
#define STEERLAB_CONFIG_HPP

// Flat dotted-key configuration. Every key has a default; a config file and
// `--set key=value` overrides may only change known keys.

#include <map>
#include <string>
#include <vector>

#include "corpus.hpp"
#include "rng.hpp"
#include "tensor_io.hpp"
#include "transformer.hpp"

namespace steerlab {

struct ConfigError : std::runtime_error {
	using std::runtime_error::runtime_error;
};

inline Json default_config() {
	// clang-format off
	return Json{
		{"seed", 1},

		{"corpus.languages", 5},
		{"corpus.concepts", 24},
		{"corpus.function_tokens", 4},
		{"corpus.vocab_limit", 0},
		{"corpus.p_func", 0.25},
		{"corpus.min_len", 8},
		{"corpus.max_len", 16},
		{"corpus.prompt_min_len", 4},
		{"corpus.prompt_max_len", 8},
		{"corpus.topic_size", 6},
		{"corpus.p_successor", 0.8},
		{"corpus.p_topic", 0.15},
		{"corpus.language_weights", Json::array({0.6, 0.1, 0.1, 0.1, 0.1})},
		{"corpus.p_tag", 0.5},
		{"corpus.p_switch", 0.5},
		{"corpus.pairs", 1000},
		{"corpus.prompts", 500},
		{"corpus.attribution_sentences", 50},
		{"corpus.classifier_sentences", 1000},

		{"model.n_layers", 6},
		{"model.n_heads", 4},
		{"model.d_model", 64},
		{"model.d_ff", 256},
		{"model.context_len", 64},
		{"model.init_std", 0.02},

		{"train.steps", 1500},
		{"train.batch_size", 32},
		{"train.lr", 3e-3},
		{"train.final_lr_fraction", 0.1},
		{"train.heldout_sequences", 500},

		{"acts.tokens", 1000000},
		{"acts.heldout_tokens", 50000},
		{"acts.batch_size", 64},
		{"acts.drop_first_position", false},

		{"sae.expansion", 8},
		{"sae.l1_grid", Json::array({0.125, 0.25, 0.5, 1.0, 2.0})},
		{"sae.steps", 3000},
		{"sae.batch_size", 256},
		{"sae.lr", 1e-3},
		{"sae.max_l0_fraction", 0.1},
		{"sae.min_explained_variance", 0.8},

		{"contrast.k", 3},
		{"contrast.token_weighted", false},

		{"generate.temperature", 0.5},
		{"generate.max_new", 50},

		{"steer.scale", 1.0},
		{"steer.generated_only", false},

		{"sweep.modes", Json::array({"final"})},
		{"sweep.prompts", 500},

		{"eval.alpha", 0.5},
		{"eval.include_prompt", false},

		{"baselines.prompts", 500},

		{"attribution.last_token_only", false},
		{"attribution.dominance_factor", 2.0},

		{"demo.prompt", 0},
		{"demo.layer", 0},
	};
	// clang-format on
}

class Config {
public:
	Config() : values_(default_config()) {}

	static Config from_json(const Json &overrides) {
		Config c;
		if (!overrides.is_object())
			throw ConfigError("config must be a JSON object with dotted keys");
		for (const auto &[k, v] : overrides.items())
			c.set(k, v);
		return c;
	}

	static Config load(const fs::path &path) {
		Json j;
		try {
			j = Json::parse(read_file(path));
		} catch (const Json::parse_error &e) {
			throw ConfigError("cannot parse " + path.string() + ": " + e.what());
		}
		return from_json(j);
	}

	void set(const std::string &key, const Json &value) {
		if (!values_.contains(key))
			throw ConfigError("unknown config key '" + key + "'");
		const Json &cur = values_.at(key);
		const bool both_numbers = cur.is_number() && value.is_number();
		if (cur.type() != value.type() && !both_numbers)
			throw ConfigError("config key '" + key + "' expects " + std::string(cur.type_name()) + ", got " +
			                  value.type_name());
		values_[key] = value;
	}

	// "key=value"; the value is parsed as JSON, falling back to a string.
	void set_assignment(std::string_view kv) {
		const auto eq = kv.find('=');
		if (eq == std::string_view::npos || eq == 0)
			throw ConfigError("override '" + std::string(kv) + "' is not of the form key=value");
		const std::string key(kv.substr(0, eq));
		const std::string raw(kv.substr(eq + 1));
		Json v;
		try {
			v = Json::parse(raw);
		} catch (const Json::parse_error &) {
			v = raw;
		}
		if (values_.contains(key) && values_.at(key).is_array() && !v.is_array())
			v = Json::array({v});
		set(key, v);
	}

	template <typename T>
	T get(const std::string &key) const {
		auto it = values_.find(key);
		if (it == values_.end())
			throw ConfigError("unknown config key '" + key + "'");
		return it->get<T>();
	}

	const Json &values() const noexcept { return values_; }

	// FNV-1a over the canonical dump of every key starting with one of
	// `prefixes` ("seed" matches only itself).
	std::string hash(std::span<const std::string> prefixes) const {
		Json subset = Json::object();
		for (const auto &[k, v] : values_.items())
			for (const auto &p : prefixes)
				if (k == p || (p.back() == '.' && k.rfind(p, 0) == 0)) {
					subset[k] = v;
					break;
				}
		char buf[17];
		std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(fnv1a(subset.dump())));
		return buf;
	}

	CorpusConfig corpus() const {
		CorpusConfig c;
		c.languages = get<int>("corpus.languages");
		c.concepts = get<int>("corpus.concepts");
		c.function_tokens = get<int>("corpus.function_tokens");
		c.vocab_limit = get<int>("corpus.vocab_limit");
		c.p_func = get<double>("corpus.p_func");
		c.min_len = get<int>("corpus.min_len");
		c.max_len = get<int>("corpus.max_len");
		c.prompt_min_len = get<int>("corpus.prompt_min_len");
		c.prompt_max_len = get<int>("corpus.prompt_max_len");
		c.topic_size = get<int>("corpus.topic_size");
		c.p_successor = get<double>("corpus.p_successor");
		c.p_topic = get<double>("corpus.p_topic");
		c.language_weights = get<std::vector<double>>("corpus.language_weights");
		c.p_tag = get<double>("corpus.p_tag");
		c.p_switch = get<double>("corpus.p_switch");
		return c;
	}

	ModelConfig model(int vocab_size) const {
		ModelConfig m;
		m.n_layers = get<int>("model.n_layers");
		m.n_heads = get<int>("model.n_heads");
		m.d_model = get<int>("model.d_model");
		m.d_ff = get<int>("model.d_ff");
		m.context_len = get<int>("model.context_len");
		m.init_std = get<double>("model.init_std");
		m.vocab_size = vocab_size;
		m.seed = stage_seed("model");
		m.validate();
		return m;
	}

	std::uint64_t seed() const { return get<std::uint64_t>("seed"); }
	std::uint64_t stage_seed(std::string_view name) const { return split_seed(seed(), name); }

private:
	Json values_;
};

} // namespace steerlab

#endif // STEERLAB_CONFIG_HPP
