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

#ifndef STEERLAB_CONTRAST_HPP
#define STEERLAB_CONTRAST_HPP

// Contrastive feature differences between a target-language corpus and its
// base-language translation:
//
//   mean:  delta = avg_x fbar(target x) - avg_x fbar(base x)
//          where fbar is the per-sentence token mean of the SAE code
//   final: the same with the code at the last position of each sentence

#include <algorithm>
#include <numeric>
#include <string>
#include <vector>

#include "numerics.hpp"
#include "sae.hpp"
#include "tensor_io.hpp"

namespace steerlab {

enum class ContrastMode { mean, final };

inline std::string to_string(ContrastMode m) { return m == ContrastMode::mean ? "mean" : "final"; }

inline ContrastMode contrast_mode_from_string(std::string_view s) {
	if (s == "mean")
		return ContrastMode::mean;
	if (s == "final")
		return ContrastMode::final;
	throw std::invalid_argument("unknown contrast mode '" + std::string(s) + "' (expected mean or final)");
}

// Per-sentence code statistics for one corpus at one layer. Both modes and
// both weightings are derived from this cache without re-running the model.
struct CorpusCodes {
	Matrix<double> mean_code;  // n x m, token mean per sentence
	Matrix<double> final_code; // n x m, code at the last position
	std::vector<std::size_t> lengths;

	std::size_t size() const noexcept { return lengths.size(); }
};

// `residuals[i]` holds the layer's residual vectors for sentence i (one row
// per token).
template <typename T>
CorpusCodes encode_corpus(const Sae<T> &sae, const std::vector<Matrix<T>> &residuals) {
	if (residuals.empty())
		throw std::invalid_argument("encode_corpus: empty corpus");
	const std::size_t m = sae.m();
	CorpusCodes c;
	c.mean_code = Matrix<double>(residuals.size(), m);
	c.final_code = Matrix<double>(residuals.size(), m);
	for (std::size_t i = 0; i < residuals.size(); ++i) {
		const Matrix<T> &h = residuals[i];
		if (h.rows() == 0)
			throw std::invalid_argument("encode_corpus: sentence " + std::to_string(i) + " has no tokens");
		Matrix<T> z = encode_batch(sae, h);
		auto mrow = c.mean_code.row(i);
		for (std::size_t t = 0; t < z.rows(); ++t)
			for (std::size_t j = 0; j < m; ++j)
				mrow[j] += z(t, j);
		for (auto &x : mrow)
			x /= static_cast<double>(z.rows());
		auto last = z.row(z.rows() - 1);
		std::copy(last.begin(), last.end(), c.final_code.row(i).begin());
		c.lengths.push_back(h.rows());
	}
	return c;
}

// Corpus statistic: unweighted mean over sentences, or (token_weighted) the
// mean over all tokens pooled together. token_weighted only affects mean mode.
inline std::vector<double> corpus_statistic(const CorpusCodes &c, ContrastMode mode, bool token_weighted = false) {
	if (c.size() == 0)
		throw std::invalid_argument("corpus_statistic: empty corpus");
	const Matrix<double> &src = mode == ContrastMode::mean ? c.mean_code : c.final_code;
	std::vector<double> out(src.cols(), 0.0);
	double weight_total = 0.0;
	for (std::size_t i = 0; i < src.rows(); ++i) {
		const double w = (token_weighted && mode == ContrastMode::mean) ? static_cast<double>(c.lengths[i]) : 1.0;
		auto r = src.row(i);
		for (std::size_t j = 0; j < out.size(); ++j)
			out[j] += w * r[j];
		weight_total += w;
	}
	for (auto &x : out)
		x /= weight_total;
	return out;
}

template <typename T>
std::vector<double> mean_feature_activation(const Sae<T> &sae, const std::vector<Matrix<T>> &residuals) {
	return corpus_statistic(encode_corpus(sae, residuals), ContrastMode::mean);
}

template <typename T>
std::vector<double> final_token_activation(const Sae<T> &sae, const std::vector<Matrix<T>> &residuals) {
	return corpus_statistic(encode_corpus(sae, residuals), ContrastMode::final);
}

// Indices of the k largest |delta|, ties to the lower index.
inline std::vector<std::size_t> top_k_by_magnitude(std::span<const double> delta, std::size_t k) {
	if (k < 1)
		throw std::invalid_argument("top_k: k must be >= 1");
	if (k > delta.size())
		throw std::invalid_argument("top_k: k=" + std::to_string(k) + " exceeds feature count " +
		                            std::to_string(delta.size()));
	std::vector<std::size_t> idx(delta.size());
	std::iota(idx.begin(), idx.end(), std::size_t{0});
	std::stable_sort(idx.begin(), idx.end(),
	                 [&](std::size_t a, std::size_t b) { return std::abs(delta[a]) > std::abs(delta[b]); });
	idx.resize(k);
	return idx;
}

struct ContrastResult {
	int layer = 0;
	int target = 0;
	ContrastMode mode = ContrastMode::final;
	std::vector<double> delta;
	std::vector<std::size_t> top_k;
	std::size_t n_base = 0;
	std::size_t n_target = 0;

	double top_delta(std::size_t rank) const { return delta.at(top_k.at(rank)); }
};

// delta = statistic(target side) - statistic(base side).
inline ContrastResult contrast(const CorpusCodes &target_side, const CorpusCodes &base_side, ContrastMode mode,
                               std::size_t k, bool token_weighted = false) {
	const auto t = corpus_statistic(target_side, mode, token_weighted);
	const auto b = corpus_statistic(base_side, mode, token_weighted);
	if (t.size() != b.size())
		throw DimensionError("contrast: code widths differ");
	ContrastResult r;
	r.mode = mode;
	r.delta.resize(t.size());
	for (std::size_t j = 0; j < t.size(); ++j)
		r.delta[j] = t[j] - b[j];
	r.top_k = top_k_by_magnitude(r.delta, k);
	r.n_base = base_side.size();
	r.n_target = target_side.size();
	return r;
}

inline Json to_json(const ContrastResult &r, std::string_view corpus_hash = {}) {
	Json top = Json::array(), dtop = Json::array();
	for (auto j : r.top_k) {
		top.push_back(j);
		dtop.push_back(r.delta[j]);
	}
	return Json{{"layer", r.layer},     {"target", r.target}, {"mode", to_string(r.mode)},
	            {"k", r.top_k.size()},  {"top_k", top},       {"delta_topk", dtop},
	            {"n_base", r.n_base},   {"n_target", r.n_target}, {"corpus_hash", std::string(corpus_hash)}};
}

// Rebuilds a result from JSON; only the top-k entries of delta are known.
inline ContrastResult contrast_from_json(const Json &j, std::size_t m) {
	ContrastResult r;
	r.layer = j.at("layer");
	r.target = j.at("target");
	r.mode = contrast_mode_from_string(j.at("mode").get<std::string>());
	r.n_base = j.at("n_base");
	r.n_target = j.at("n_target");
	r.delta.assign(m, 0.0);
	const auto &top = j.at("top_k");
	const auto &dtop = j.at("delta_topk");
	for (std::size_t i = 0; i < top.size(); ++i) {
		const std::size_t f = top[i];
		if (f >= m)
			throw IoError("contrast: feature index out of range");
		r.top_k.push_back(f);
		r.delta[f] = dtop[i];
	}
	return r;
}

} // namespace steerlab

#endif // STEERLAB_CONTRAST_HPP
