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

#ifndef STEERLAB_STEERING_HPP
#define STEERLAB_STEERING_HPP

// Feature steering: z = f(h), z' = z + scale * offsets, h' = h + W_dec (z' - z).
// b_dec cancels in the difference, so only the linear decoder is used.

#include <cmath>
#include <set>
#include <utility>
#include <vector>

#include "contrast.hpp"
#include "sae.hpp"
#include "transformer.hpp"

namespace steerlab {

struct Intervention {
	std::size_t feature = 0;
	double offset = 0.0;
};

struct SteerSpec {
	int layer = 1;
	int target = 0;
	std::vector<Intervention> interventions;
	ContrastMode mode = ContrastMode::final;
	double scale = 1.0;

	void validate() const {
		std::set<std::size_t> seen;
		for (const auto &iv : interventions) {
			if (!seen.insert(iv.feature).second)
				throw std::invalid_argument("steer spec: feature " + std::to_string(iv.feature) + " listed twice");
			if (!std::isfinite(iv.offset))
				throw std::invalid_argument("steer spec: non-finite offset");
		}
		if (!std::isfinite(scale))
			throw std::invalid_argument("steer spec: non-finite scale");
	}
};

// Single-feature spec taking the signed offset from a contrast result.
inline SteerSpec spec_from_contrast(const ContrastResult &c, std::size_t rank, double scale = 1.0) {
	SteerSpec s;
	s.layer = c.layer;
	s.target = c.target;
	s.mode = c.mode;
	s.scale = scale;
	s.interventions.push_back({c.top_k.at(rank), c.top_delta(rank)});
	return s;
}

template <typename T>
void check_spec(const SteerSpec &spec, const Sae<T> &sae) {
	spec.validate();
	if (sae.layer != spec.layer)
		throw std::invalid_argument("steer spec targets layer " + std::to_string(spec.layer) +
		                            " but the SAE belongs to layer " + std::to_string(sae.layer));
	for (const auto &iv : spec.interventions)
		if (iv.feature >= sae.m())
			throw std::out_of_range("steer spec: feature " + std::to_string(iv.feature) + " >= " +
			                        std::to_string(sae.m()));
}

// In-place h <- h + W_dec (z' - z). Features whose code does not change
// leave h untouched bit for bit.
template <typename T>
void apply_inplace(const SteerSpec &spec, const Sae<T> &sae, std::span<T> h) {
	const std::size_t d = sae.d(), m = sae.m();
	sae.require_input(h.size(), "steer");
	if (spec.interventions.empty())
		return;
	const std::vector<T> z = encode<T>(sae, std::span<const T>(h.data(), h.size()));
	for (const auto &iv : spec.interventions) {
		const T zj = z[iv.feature];
		const T zj_new = zj + static_cast<T>(spec.scale * iv.offset);
		const T diff = zj_new - zj;
		if (diff == T{0})
			continue;
		for (std::size_t i = 0; i < d; ++i)
			h[i] += sae.w_dec.data()[i * m + iv.feature] * diff;
	}
}

template <typename T>
std::vector<T> apply(const SteerSpec &spec, const Sae<T> &sae, std::span<const T> h) {
	check_spec(spec, sae);
	std::vector<T> out(h.begin(), h.end());
	apply_inplace(spec, sae, std::span<T>(out));
	return out;
}

// Hook for the transformer; spec and sae must outlive it.
template <typename T>
ResidualHook<T> make_hook(const SteerSpec &spec, const Sae<T> &sae) {
	check_spec(spec, sae);
	ResidualHook<T> hook;
	hook.layer = spec.layer;
	hook.edit = [&spec, &sae](std::span<T> h) { apply_inplace(spec, sae, h); };
	return hook;
}

template <typename T>
Generation steered_generate(const ModelParams<T> &params, const Sae<T> &sae, const SteerSpec &spec,
                            std::span<const int> prompt, const GenerateOptions &opts, Rng &rng) {
	if (spec.layer < 1 || spec.layer > params.config.n_layers)
		throw std::out_of_range("steer layer " + std::to_string(spec.layer) + " outside 1.." +
		                        std::to_string(params.config.n_layers));
	const auto hook = make_hook(spec, sae);
	return generate<T>(params, prompt, opts, rng, &hook);
}

inline Json to_json(const SteerSpec &s) {
	Json iv = Json::array();
	for (const auto &x : s.interventions)
		iv.push_back({{"feature", x.feature}, {"offset", x.offset}});
	return Json{{"layer", s.layer},
	            {"target", s.target},
	            {"mode", to_string(s.mode)},
	            {"scale", s.scale},
	            {"interventions", iv}};
}

inline SteerSpec steer_spec_from_json(const Json &j) {
	SteerSpec s;
	s.layer = j.at("layer");
	s.target = j.value("target", 0);
	s.mode = contrast_mode_from_string(j.value("mode", std::string("final")));
	s.scale = j.value("scale", 1.0);
	for (const auto &x : j.at("interventions"))
		s.interventions.push_back({x.at("feature").get<std::size_t>(), x.at("offset").get<double>()});
	s.validate();
	return s;
}

} // namespace steerlab

#endif // STEERLAB_STEERING_HPP
