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

#ifndef STEERLAB_ATTRIBUTION_HPP
#define STEERLAB_ATTRIBUTION_HPP

// Dot products of model components with a feature direction.
//
// Head attribution: each head's pre-residual output (head slice times its
// rows of W_o) against the direction; the output-projection bias is its own
// component. Decomposition: resid_post[L] = embed + sum_{l<=L} attn_out[l] +
// mlp_out[l], so the component dots add up to dot(resid_post[L], d).
//
// Dots are raw (unnormalized) against a unit direction, averaged over token
// positions within a sentence and then over sentences.

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <string>
#include <vector>

#include "evaluation.hpp"
#include "numerics.hpp"
#include "tensor_io.hpp"
#include "transformer.hpp"

namespace steerlab {

// Raised when an additivity identity fails beyond tolerance.
struct ConservationError : std::runtime_error {
	using std::runtime_error::runtime_error;
};

inline constexpr double kConservationTol = 1e-5;

struct PositionFilter {
	bool last_token_only = false;
};

namespace detail {

template <typename T>
double row_dot(const Matrix<T> &m, std::size_t r, std::span<const double> d) {
	return dot_wide<T, double>(m.row(r), d);
}

inline std::pair<std::size_t, std::size_t> position_range(std::size_t n, PositionFilter f) {
	return f.last_token_only ? std::pair{n - 1, n} : std::pair{std::size_t{0}, n};
}

} // namespace detail

struct HeadAttribution {
	int layer = 0;
	int feature_lang = 0;
	int input_lang = 0;
	long feature = -1;
	std::vector<double> head_dots;
	double bias_dot = 0.0;
	double attn_dot = 0.0;
	double max_residual = 0.0; // worst |sum heads + bias - attn| over tokens

	std::vector<int> top_heads(std::size_t k = 3) const {
		std::vector<int> idx(head_dots.size());
		std::iota(idx.begin(), idx.end(), 0);
		std::stable_sort(idx.begin(), idx.end(), [&](int a, int b) { return head_dots[a] > head_dots[b]; });
		idx.resize(std::min(k, idx.size()));
		return idx;
	}
};

// Per-head contribution at `layer` for the sentences of one input language.
// Traces must include per-head outputs.
template <typename T>
HeadAttribution head_attribution(const std::vector<LayerTrace<T>> &traces, int layer, std::span<const double> direction,
                                 PositionFilter filter = {}) {
	if (traces.empty())
		throw std::invalid_argument("head_attribution: no sentences");
	const int L = traces.front().n_layers();
	if (layer < 1 || layer > L)
		throw std::out_of_range("head_attribution: layer " + std::to_string(layer) + " outside 1.." +
		                        std::to_string(L));
	HeadAttribution out;
	out.layer = layer;
	const auto &front = traces.front().head_out;
	const std::size_t nh = static_cast<int>(front.size()) > layer ? front[layer].size() : 0;
	if (nh == 0)
		throw PreconditionError("head_attribution: traces were captured without per-head outputs");
	out.head_dots.assign(nh, 0.0);
	for (const auto &tr : traces) {
		const auto &heads = tr.head_out.at(layer);
		const auto &attn = tr.attn_out.at(layer);
		const double bias = dot_wide<T, double>(tr.attn_bias.at(layer).row(0), direction);
		const auto [b, e] = detail::position_range(attn.rows(), filter);
		std::vector<double> sent(nh, 0.0);
		double sent_attn = 0.0;
		for (std::size_t i = b; i < e; ++i) {
			double sum = bias;
			for (std::size_t h = 0; h < nh; ++h) {
				const double v = detail::row_dot(heads[h], i, direction);
				sent[h] += v;
				sum += v;
			}
			const double a = detail::row_dot(attn, i, direction);
			sent_attn += a;
			out.max_residual = std::max(out.max_residual, std::abs(sum - a));
		}
		const double n = static_cast<double>(e - b);
		for (std::size_t h = 0; h < nh; ++h)
			out.head_dots[h] += sent[h] / n;
		out.attn_dot += sent_attn / n;
		out.bias_dot += bias;
	}
	const double ns = static_cast<double>(traces.size());
	for (auto &x : out.head_dots)
		x /= ns;
	out.attn_dot /= ns;
	out.bias_dot /= ns;
	return out;
}

inline std::string component_label(int layer, bool attn) {
	return layer == 0 ? "embed" : std::to_string(layer) + (attn ? "_attn_out" : "_mlp_out");
}

struct Contribution {
	std::string label;
	int layer = 0; // 0 for the embedding
	double dot = 0.0;
};

struct DecompReport {
	int target_layer = 0;
	int feature_lang = 0;
	long feature = -1;
	std::vector<Contribution> contributions; // embed, 1_attn_out, 1_mlp_out, ...
	double resid_dot = 0.0;
	double max_residual = 0.0; // worst |sum components - resid| over tokens

	double total() const {
		double s = 0.0;
		for (const auto &c : contributions)
			s += c.dot;
		return s;
	}

	std::vector<Contribution> top(std::size_t k = 5) const {
		auto c = contributions;
		std::stable_sort(c.begin(), c.end(), [](const Contribution &a, const Contribution &b) { return a.dot > b.dot; });
		c.resize(std::min(k, c.size()));
		return c;
	}
};

// Splits dot(resid_post[L], d) into its additive sources. Traces need the
// residual view for every layer up to L.
template <typename T>
DecompReport decompose(const std::vector<LayerTrace<T>> &traces, int target_layer, std::span<const double> direction,
                       PositionFilter filter = {}) {
	if (traces.empty())
		throw std::invalid_argument("decompose: no sentences");
	const int L = traces.front().n_layers();
	if (target_layer < 0 || target_layer > L)
		throw std::out_of_range("decompose: layer " + std::to_string(target_layer));
	DecompReport out;
	out.target_layer = target_layer;
	out.contributions.push_back({"embed", 0, 0.0});
	for (int l = 1; l <= target_layer; ++l) {
		out.contributions.push_back({component_label(l, true), l, 0.0});
		out.contributions.push_back({component_label(l, false), l, 0.0});
	}
	for (const auto &tr : traces) {
		const auto &embed = tr.embed_out();
		const auto [b, e] = detail::position_range(embed.rows(), filter);
		std::vector<double> sent(out.contributions.size(), 0.0);
		double sent_resid = 0.0;
		for (std::size_t i = b; i < e; ++i) {
			double sum = detail::row_dot(embed, i, direction);
			sent[0] += sum;
			for (int l = 1; l <= target_layer; ++l) {
				const double a = detail::row_dot(tr.attn_out.at(l), i, direction);
				const double m = detail::row_dot(tr.mlp_out.at(l), i, direction);
				sent[2 * l - 1] += a;
				sent[2 * l] += m;
				sum += a + m;
			}
			const double r = detail::row_dot(tr.resid_post.at(target_layer), i, direction);
			sent_resid += r;
			out.max_residual = std::max(out.max_residual, std::abs(sum - r));
		}
		const double n = static_cast<double>(e - b);
		for (std::size_t c = 0; c < sent.size(); ++c)
			out.contributions[c].dot += sent[c] / n;
		out.resid_dot += sent_resid / n;
	}
	const double ns = static_cast<double>(traces.size());
	for (auto &c : out.contributions)
		c.dot /= ns;
	out.resid_dot /= ns;
	return out;
}

inline void require_conserved(const HeadAttribution &a, double tol = kConservationTol) {
	double sum = a.bias_dot;
	for (double h : a.head_dots)
		sum += h;
	const double err = std::max(a.max_residual, std::abs(sum - a.attn_dot));
	if (!(err <= tol))
		throw ConservationError("head attribution at layer " + std::to_string(a.layer) +
		                        " violates sum(heads)+bias = attn_out by " + std::to_string(err));
}

inline void require_conserved(const DecompReport &r, double tol = kConservationTol) {
	const double err = std::max(r.max_residual, std::abs(r.total() - r.resid_dot));
	if (!(err <= tol))
		throw ConservationError("decomposition at layer " + std::to_string(r.target_layer) +
		                        " violates sum(components) = resid by " + std::to_string(err));
}

struct DominanceFlag {
	int layer = 0;
	int head = 0;
	double min_ratio = 0.0; // smallest top/second ratio over the feature languages
};

struct InheritanceFlag {
	int target_layer = 0;
	int feature_lang = 0;
	std::string top_label;
};

struct DominanceSummary {
	double factor = 2.0;
	std::vector<DominanceFlag> heads;
	std::vector<InheritanceFlag> inheritance;
};

// A head is flagged at a layer when, for every feature language, it is the
// top contributor on the diagonal (input language = feature language) and
// beats the runner-up by `factor`. A decomposition is flagged as inherited
// when its top contributor is an earlier layer's block output.
inline DominanceSummary dominance_report(std::span<const HeadAttribution> grid, std::span<const DecompReport> decomps,
                                         double factor = 2.0) {
	DominanceSummary s;
	s.factor = factor;
	std::vector<int> layers;
	for (const auto &a : grid)
		if (std::find(layers.begin(), layers.end(), a.layer) == layers.end())
			layers.push_back(a.layer);
	std::sort(layers.begin(), layers.end());
	for (int layer : layers) {
		int head = -1;
		double min_ratio = std::numeric_limits<double>::infinity();
		bool ok = true, any = false;
		for (const auto &a : grid) {
			if (a.layer != layer || a.input_lang != a.feature_lang)
				continue;
			any = true;
			const auto top = a.top_heads(2);
			if (top.size() < 2) {
				ok = false;
				break;
			}
			const double first = a.head_dots[top[0]], second = a.head_dots[top[1]];
			double ratio;
			if (first <= 0.0)
				ratio = 0.0;
			else if (second <= 0.0)
				ratio = std::numeric_limits<double>::infinity();
			else
				ratio = first / second;
			if (head == -1)
				head = top[0];
			if (top[0] != head || !(ratio >= factor) || std::isinf(factor)) {
				ok = false;
				break;
			}
			min_ratio = std::min(min_ratio, ratio);
		}
		if (any && ok)
			s.heads.push_back({layer, head, min_ratio});
	}
	for (const auto &r : decomps) {
		if (r.contributions.empty())
			continue;
		const auto best = r.top(1).front();
		if (best.layer >= 1 && best.layer < r.target_layer)
			s.inheritance.push_back({r.target_layer, r.feature_lang, best.label});
	}
	return s;
}

inline Json to_json(const DominanceSummary &s) {
	Json heads = Json::array(), inh = Json::array();
	for (const auto &h : s.heads)
		heads.push_back({{"layer", h.layer},
		                 {"head", h.head},
		                 {"min_ratio", std::isinf(h.min_ratio) ? Json("inf") : Json(h.min_ratio)}});
	for (const auto &i : s.inheritance)
		inh.push_back({{"target_layer", i.target_layer}, {"feature_lang", i.feature_lang}, {"top_label", i.top_label}});
	return Json{{"factor", std::isinf(s.factor) ? Json("inf") : Json(s.factor)},
	            {"dominant_heads", heads},
	            {"inheritance", inh},
	            {"dot_convention", "raw dot with unit-norm decoder direction, mean over positions then sentences"}};
}

inline std::string attribution_csv(std::span<const HeadAttribution> grid) {
	std::string out = "layer,feature_lang,input_lang,head,dot\n";
	for (const auto &a : grid) {
		for (std::size_t h = 0; h < a.head_dots.size(); ++h)
			out += std::to_string(a.layer) + "," + std::to_string(a.feature_lang) + "," +
			       std::to_string(a.input_lang) + "," + std::to_string(h) + "," + fmt_real(a.head_dots[h]) + "\n";
		out += std::to_string(a.layer) + "," + std::to_string(a.feature_lang) + "," + std::to_string(a.input_lang) +
		       ",bias," + fmt_real(a.bias_dot) + "\n";
	}
	return out;
}

inline std::string decomp_csv(std::span<const DecompReport> reports) {
	std::string out = "target_layer,feature_lang,component_label,dot\n";
	for (const auto &r : reports)
		for (const auto &c : r.contributions)
			out += std::to_string(r.target_layer) + "," + std::to_string(r.feature_lang) + "," + c.label + "," +
			       fmt_real(c.dot) + "\n";
	return out;
}

} // namespace steerlab

#endif // STEERLAB_ATTRIBUTION_HPP
