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

#ifndef STEERLAB_TRANSFORMER_HPP
#define STEERLAB_TRANSFORMER_HPP

// Pre-norm decoder-only transformer.
//
//   h_0 = tok_emb[t] + pos_emb[i]
//   h_l = h_{l-1} + attn_l(rms(h_{l-1})) + mlp_l(rms(h_{l-1} + attn_l(...)))
//   logits = rms(h_L) tok_emb^T
//
// Attention has no biases except the output projection; its bias is kept
// apart from the per-head outputs in traces. The residual stream is a plain
// sum of block outputs, so resid_post[l] = resid_post[l-1] + attn_out[l] +
// mlp_out[l] holds exactly.

#include <cmath>
#include <functional>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "numerics.hpp"
#include "rng.hpp"
#include "tensor_io.hpp"

namespace steerlab {

struct ModelConfig {
	int n_layers = 6;
	int n_heads = 4;
	int d_model = 64;
	int d_ff = 256;
	int vocab_size = 148;
	int context_len = 64;
	std::uint64_t seed = 1;
	double init_std = 0.02;

	int head_dim() const { return d_model / n_heads; }

	void validate() const {
		if (n_layers < 1 || n_heads < 1 || d_model < 1 || d_ff < 1 || vocab_size < 1 || context_len < 1)
			throw std::invalid_argument("model config: sizes must be positive");
		if (d_model % n_heads != 0)
			throw std::invalid_argument("model config: d_model must be divisible by n_heads");
	}
};

inline Json to_json(const ModelConfig &c) {
	return Json{{"n_layers", c.n_layers},     {"n_heads", c.n_heads},         {"d_model", c.d_model},
	            {"d_ff", c.d_ff},             {"vocab_size", c.vocab_size}, {"context_len", c.context_len},
	            {"seed", c.seed},             {"init_std", c.init_std}};
}

inline ModelConfig model_config_from_json(const Json &j) {
	ModelConfig c;
	c.n_layers = j.at("n_layers");
	c.n_heads = j.at("n_heads");
	c.d_model = j.at("d_model");
	c.d_ff = j.at("d_ff");
	c.vocab_size = j.at("vocab_size");
	c.context_len = j.at("context_len");
	c.seed = j.at("seed");
	c.init_std = j.at("init_std");
	return c;
}

template <typename T>
struct BlockParams {
	Matrix<T> ln1_gain; // 1 x d
	Matrix<T> wq, wk, wv; // d x d
	Matrix<T> wo;       // d x d
	Matrix<T> bo;       // 1 x d
	Matrix<T> ln2_gain; // 1 x d
	Matrix<T> w_in;     // d x d_ff
	Matrix<T> b_in;     // 1 x d_ff
	Matrix<T> w_out;    // d_ff x d
	Matrix<T> b_out;    // 1 x d
};

template <typename T>
struct ModelParams {
	ModelConfig config;
	Matrix<T> tok_emb; // vocab x d, tied with the unembedding
	Matrix<T> pos_emb; // context x d
	std::vector<BlockParams<T>> blocks;
	Matrix<T> final_gain; // 1 x d

	// Visits every tensor in a fixed canonical order.
	template <typename F>
	void visit(F &&f) {
		f("tok_emb", tok_emb);
		f("pos_emb", pos_emb);
		for (std::size_t l = 0; l < blocks.size(); ++l) {
			auto &b = blocks[l];
			const std::string p = "block" + std::to_string(l + 1) + ".";
			f(p + "ln1_gain", b.ln1_gain);
			f(p + "wq", b.wq);
			f(p + "wk", b.wk);
			f(p + "wv", b.wv);
			f(p + "wo", b.wo);
			f(p + "bo", b.bo);
			f(p + "ln2_gain", b.ln2_gain);
			f(p + "w_in", b.w_in);
			f(p + "b_in", b.b_in);
			f(p + "w_out", b.w_out);
			f(p + "b_out", b.b_out);
		}
		f("final_gain", final_gain);
	}

	template <typename F>
	void visit(F &&f) const {
		const_cast<ModelParams *>(this)->visit([&](const std::string &n, Matrix<T> &m) { f(n, std::as_const(m)); });
	}

	std::vector<Matrix<T> *> tensors() {
		std::vector<Matrix<T> *> out;
		visit([&](const std::string &, Matrix<T> &m) { out.push_back(&m); });
		return out;
	}

	std::size_t parameter_count() const {
		std::size_t n = 0;
		visit([&](const std::string &, const Matrix<T> &m) { n += m.size(); });
		return n;
	}

	// Same-shaped parameters filled with zeros (gradient buffers).
	static ModelParams zeros(const ModelConfig &cfg) {
		cfg.validate();
		const std::size_t d = cfg.d_model, f = cfg.d_ff;
		ModelParams p;
		p.config = cfg;
		p.tok_emb = Matrix<T>(cfg.vocab_size, d);
		p.pos_emb = Matrix<T>(cfg.context_len, d);
		p.blocks.resize(cfg.n_layers);
		for (auto &b : p.blocks) {
			b.ln1_gain = Matrix<T>(1, d);
			b.wq = Matrix<T>(d, d);
			b.wk = Matrix<T>(d, d);
			b.wv = Matrix<T>(d, d);
			b.wo = Matrix<T>(d, d);
			b.bo = Matrix<T>(1, d);
			b.ln2_gain = Matrix<T>(1, d);
			b.w_in = Matrix<T>(d, f);
			b.b_in = Matrix<T>(1, f);
			b.w_out = Matrix<T>(f, d);
			b.b_out = Matrix<T>(1, d);
		}
		p.final_gain = Matrix<T>(1, d);
		return p;
	}

	static ModelParams init(const ModelConfig &cfg) {
		ModelParams p = zeros(cfg);
		Rng rng(split_seed(cfg.seed, "model-init"));
		const double sd = cfg.init_std;
		const double sd_out = sd / std::sqrt(2.0 * cfg.n_layers);
		auto normal = [&](Matrix<T> &m, double s) {
			for (auto &x : m.storage())
				x = static_cast<T>(rng.normal(0.0, s));
		};
		normal(p.tok_emb, sd);
		normal(p.pos_emb, sd);
		for (auto &b : p.blocks) {
			b.ln1_gain.fill(T{1});
			b.ln2_gain.fill(T{1});
			normal(b.wq, sd);
			normal(b.wk, sd);
			normal(b.wv, sd);
			normal(b.wo, sd_out);
			normal(b.w_in, sd);
			normal(b.w_out, sd_out);
		}
		p.final_gain.fill(T{1});
		return p;
	}

	template <typename U>
	ModelParams<U> cast() const {
		ModelParams<U> out = ModelParams<U>::zeros(config);
		auto src = const_cast<ModelParams *>(this)->tensors();
		auto dst = out.tensors();
		for (std::size_t i = 0; i < src.size(); ++i)
			*dst[i] = src[i]->template cast<U>();
		return out;
	}

	void zero() {
		visit([](const std::string &, Matrix<T> &m) { m.fill(T{0}); });
	}

	bool all_finite() const {
		bool ok = true;
		visit([&](const std::string &, const Matrix<T> &m) { ok = ok && m.all_finite(); });
		return ok;
	}
};

// Edits resid_post[layer] (the residual stream after block `layer`) at
// every position >= first_position, before later blocks read it.
template <typename T>
struct ResidualHook {
	int layer = 0;
	std::size_t first_position = 0;
	std::function<void(std::span<T>)> edit;
};

struct TraceOptions {
	bool residual = false; // resid_post, attn_out, mlp_out
	bool heads = false;    // per-head outputs
};

// Per-layer view of one forward pass. Index 0 of resid_post is the
// embedding output h_0; attn_out/mlp_out/head_out are indexed 1..n_layers
// (entry 0 is empty).
template <typename T>
struct LayerTrace {
	std::vector<Matrix<T>> resid_post;
	std::vector<Matrix<T>> attn_out;
	std::vector<Matrix<T>> mlp_out;
	std::vector<std::vector<Matrix<T>>> head_out;
	std::vector<Matrix<T>> attn_bias; // 1 x d per layer

	const Matrix<T> &embed_out() const { return resid_post.at(0); }
	int n_layers() const { return static_cast<int>(resid_post.size()) - 1; }
};

namespace detail {

template <typename T>
struct BlockCache {
	Matrix<T> x_in;
	Matrix<T> ln1;
	std::vector<T> ln1_inv;
	Matrix<T> q, k, v;
	std::vector<std::vector<Matrix<T>>> probs; // [segment][head], L x L
	Matrix<T> o;                               // concatenated head outputs before wo
	Matrix<T> x_mid;
	Matrix<T> ln2;
	std::vector<T> ln2_inv;
	Matrix<T> hidden;
	Matrix<T> act;
};

} // namespace detail

// Cached intermediates of a packed forward pass, consumed by backward().
template <typename T>
struct ForwardCache {
	std::vector<int> tokens;
	std::vector<std::size_t> offsets; // segment starts, plus total length at the end
	std::vector<detail::BlockCache<T>> blocks;
	Matrix<T> x_final;
	Matrix<T> lnf;
	std::vector<T> lnf_inv;
	bool valid = false;
};

inline void check_tokens(const ModelConfig &cfg, std::span<const int> tokens) {
	for (int t : tokens)
		if (t < 0 || t >= cfg.vocab_size)
			throw std::out_of_range("token id " + std::to_string(t) + " outside vocabulary of size " +
			                        std::to_string(cfg.vocab_size));
}

namespace detail {

template <typename T>
Matrix<T> slice_rows(const Matrix<T> &m, std::size_t begin, std::size_t end, std::size_t col0, std::size_t ncols) {
	Matrix<T> out(end - begin, ncols);
	for (std::size_t i = begin; i < end; ++i)
		std::copy_n(m.data() + i * m.cols() + col0, ncols, out.data() + (i - begin) * ncols);
	return out;
}

template <typename T>
void put_rows(Matrix<T> &m, const Matrix<T> &src, std::size_t begin, std::size_t col0) {
	for (std::size_t i = 0; i < src.rows(); ++i)
		std::copy_n(src.data() + i * src.cols(), src.cols(), m.data() + (begin + i) * m.cols() + col0);
}

template <typename T>
void add_rows(Matrix<T> &m, const Matrix<T> &src, std::size_t begin, std::size_t col0) {
	for (std::size_t i = 0; i < src.rows(); ++i) {
		T *dst = m.data() + (begin + i) * m.cols() + col0;
		const T *s = src.data() + i * src.cols();
		for (std::size_t j = 0; j < src.cols(); ++j)
			dst[j] += s[j];
	}
}

// Causal softmax of q k^T * scale for one segment and head.
template <typename T>
Matrix<T> causal_probs(const Matrix<T> &qh, const Matrix<T> &kh, T scale) {
	Matrix<T> s = matmul_nt(qh, kh);
	const std::size_t n = s.rows();
	for (std::size_t i = 0; i < n; ++i) {
		auto r = s.row(i);
		softmax_inplace(r.first(i + 1), scale);
		for (std::size_t j = i + 1; j < n; ++j)
			r[j] = T{0};
	}
	return s;
}

} // namespace detail

// Packed forward pass over independent sequences (each restarts at position
// 0). Returns logits for every token. Fills `cache` for backward() and
// `traces` (one per sequence) when requested.
template <typename T>
Matrix<T> forward_packed(const ModelParams<T> &params, std::span<const std::vector<int>> seqs,
                         ForwardCache<T> *cache = nullptr, std::vector<LayerTrace<T>> *traces = nullptr,
                         TraceOptions trace_opts = {}, const ResidualHook<T> *hook = nullptr) {
	const ModelConfig &cfg = params.config;
	const std::size_t d = cfg.d_model, nh = cfg.n_heads, dh = cfg.head_dim();
	const T scale = T{1} / std::sqrt(static_cast<T>(dh));

	std::vector<std::size_t> offsets{0};
	std::vector<int> tokens;
	for (const auto &s : seqs) {
		if (s.empty())
			throw std::invalid_argument("forward: empty sequence");
		if (static_cast<int>(s.size()) > cfg.context_len)
			throw std::invalid_argument("forward: sequence of length " + std::to_string(s.size()) +
			                            " exceeds context " + std::to_string(cfg.context_len));
		check_tokens(cfg, s);
		tokens.insert(tokens.end(), s.begin(), s.end());
		offsets.push_back(tokens.size());
	}
	const std::size_t n = tokens.size();
	const std::size_t nseg = seqs.size();
	if (hook && (hook->layer < 1 || hook->layer > cfg.n_layers))
		throw std::out_of_range("hook layer " + std::to_string(hook->layer));

	if (traces) {
		traces->assign(nseg, {});
		for (auto &tr : *traces) {
			const std::size_t L = cfg.n_layers;
			if (trace_opts.residual || trace_opts.heads) {
				tr.resid_post.resize(L + 1);
				tr.attn_out.resize(L + 1);
				tr.mlp_out.resize(L + 1);
				tr.attn_bias.resize(L + 1);
			}
			if (trace_opts.heads)
				tr.head_out.resize(L + 1);
		}
	}
	const bool want_trace = traces && (trace_opts.residual || trace_opts.heads);
	auto record = [&](auto member, std::size_t layer, const Matrix<T> &m) {
		for (std::size_t s = 0; s < nseg; ++s)
			((*traces)[s].*member)[layer] = detail::slice_rows(m, offsets[s], offsets[s + 1], 0, d);
	};
	auto apply_hook = [&](std::size_t layer, Matrix<T> &x) {
		if (!hook || static_cast<int>(layer) != hook->layer)
			return;
		for (std::size_t s = 0; s < nseg; ++s)
			for (std::size_t i = offsets[s] + hook->first_position; i < offsets[s + 1]; ++i)
				hook->edit(x.row(i));
	};

	Matrix<T> x(n, d);
	for (std::size_t s = 0; s < nseg; ++s)
		for (std::size_t i = offsets[s]; i < offsets[s + 1]; ++i) {
			auto te = params.tok_emb.row(tokens[i]);
			auto pe = params.pos_emb.row(i - offsets[s]);
			auto xr = x.row(i);
			for (std::size_t j = 0; j < d; ++j)
				xr[j] = te[j] + pe[j];
		}
	if (want_trace)
		record(&LayerTrace<T>::resid_post, 0, x);

	if (cache) {
		cache->tokens = tokens;
		cache->offsets = offsets;
		cache->blocks.assign(cfg.n_layers, {});
		cache->valid = false;
	}

	for (int l = 0; l < cfg.n_layers; ++l) {
		const auto &b = params.blocks[l];
		std::vector<T> ln1_inv;
		Matrix<T> ln1 = rms_norm(x, std::span<const T>(b.ln1_gain.storage()), &ln1_inv);
		Matrix<T> q = matmul(ln1, b.wq), k = matmul(ln1, b.wk), v = matmul(ln1, b.wv);
		Matrix<T> o(n, d);
		std::vector<std::vector<Matrix<T>>> probs(cache ? nseg : 0);
		for (std::size_t s = 0; s < nseg; ++s) {
			const std::size_t b0 = offsets[s], b1 = offsets[s + 1];
			for (std::size_t h = 0; h < nh; ++h) {
				Matrix<T> qh = detail::slice_rows(q, b0, b1, h * dh, dh);
				Matrix<T> kh = detail::slice_rows(k, b0, b1, h * dh, dh);
				Matrix<T> vh = detail::slice_rows(v, b0, b1, h * dh, dh);
				Matrix<T> p = detail::causal_probs(qh, kh, scale);
				detail::put_rows(o, matmul(p, vh), b0, h * dh);
				if (cache)
					probs[s].push_back(std::move(p));
			}
		}
		Matrix<T> attn = matmul(o, b.wo);
		add_row_bias<T>(attn, b.bo.storage());
		if (want_trace && trace_opts.heads) {
			for (std::size_t s = 0; s < nseg; ++s) {
				auto &ho = (*traces)[s].head_out[l + 1];
				ho.clear();
				for (std::size_t h = 0; h < nh; ++h) {
					Matrix<T> oh = detail::slice_rows(o, offsets[s], offsets[s + 1], h * dh, dh);
					Matrix<T> woh = detail::slice_rows(b.wo, h * dh, (h + 1) * dh, 0, d);
					ho.push_back(matmul(oh, woh));
				}
				(*traces)[s].attn_bias[l + 1] = b.bo;
			}
		} else if (want_trace) {
			for (auto &tr : *traces)
				tr.attn_bias[l + 1] = b.bo;
		}

		Matrix<T> x_mid = x + attn;
		std::vector<T> ln2_inv;
		Matrix<T> ln2 = rms_norm(x_mid, std::span<const T>(b.ln2_gain.storage()), &ln2_inv);
		Matrix<T> hidden = matmul(ln2, b.w_in);
		add_row_bias<T>(hidden, b.b_in.storage());
		Matrix<T> act = gelu(hidden);
		Matrix<T> mlp = matmul(act, b.w_out);
		add_row_bias<T>(mlp, b.b_out.storage());
		Matrix<T> x_out = x_mid + mlp;
		apply_hook(l + 1, x_out);

		if (want_trace) {
			record(&LayerTrace<T>::attn_out, l + 1, attn);
			record(&LayerTrace<T>::mlp_out, l + 1, mlp);
			record(&LayerTrace<T>::resid_post, l + 1, x_out);
		}
		if (cache) {
			auto &c = cache->blocks[l];
			c.x_in = std::move(x);
			c.ln1 = std::move(ln1);
			c.ln1_inv = std::move(ln1_inv);
			c.q = std::move(q);
			c.k = std::move(k);
			c.v = std::move(v);
			c.probs = std::move(probs);
			c.o = std::move(o);
			c.x_mid = std::move(x_mid);
			c.ln2 = std::move(ln2);
			c.ln2_inv = std::move(ln2_inv);
			c.hidden = std::move(hidden);
			c.act = std::move(act);
		}
		x = std::move(x_out);
	}

	std::vector<T> lnf_inv;
	Matrix<T> lnf = rms_norm(x, std::span<const T>(params.final_gain.storage()), &lnf_inv);
	Matrix<T> logits = matmul_nt(lnf, params.tok_emb);
	if (cache) {
		cache->x_final = std::move(x);
		cache->lnf = std::move(lnf);
		cache->lnf_inv = std::move(lnf_inv);
		cache->valid = true;
	}
	return logits;
}

template <typename T>
struct ForwardResult {
	Matrix<T> logits;
	LayerTrace<T> trace;
};

// Single-sequence forward pass with an optional trace and intervention.
template <typename T>
ForwardResult<T> forward(const ModelParams<T> &params, std::span<const int> tokens, TraceOptions capture = {},
                         const ResidualHook<T> *hook = nullptr) {
	std::vector<std::vector<int>> seqs{std::vector<int>(tokens.begin(), tokens.end())};
	std::vector<LayerTrace<T>> traces;
	ForwardResult<T> r;
	r.logits = forward_packed<T>(params, seqs, nullptr, &traces, capture, hook);
	r.trace = std::move(traces.front());
	return r;
}

// Next-token targets for a packed batch: the following token inside each
// sequence, -1 at each sequence end.
inline std::vector<int> next_token_targets(std::span<const int> tokens, std::span<const std::size_t> offsets) {
	std::vector<int> targets(tokens.size(), -1);
	for (std::size_t s = 0; s + 1 < offsets.size(); ++s)
		for (std::size_t i = offsets[s]; i + 1 < offsets[s + 1]; ++i)
			targets[i] = tokens[i + 1];
	return targets;
}

// Backward pass for the mean next-token loss given dL/dlogits. Accumulates
// into `grads` (same shapes as params).
template <typename T>
void backward(const ModelParams<T> &params, const ForwardCache<T> &cache, const Matrix<T> &dlogits,
              ModelParams<T> &grads) {
	if (!cache.valid)
		throw PreconditionError("backward() requires a completed forward pass with a cache");
	const ModelConfig &cfg = params.config;
	const std::size_t d = cfg.d_model, nh = cfg.n_heads, dh = cfg.head_dim();
	const T scale = T{1} / std::sqrt(static_cast<T>(dh));
	const std::size_t n = cache.tokens.size();
	const std::size_t nseg = cache.offsets.size() - 1;

	// logits = lnf * tok_emb^T
	matmul_tn_acc(dlogits, cache.lnf, grads.tok_emb);
	Matrix<T> dlnf = matmul(dlogits, params.tok_emb);
	Matrix<T> dx = rms_norm_backward(cache.x_final, std::span<const T>(params.final_gain.storage()),
	                                 std::span<const T>(cache.lnf_inv), dlnf,
	                                 std::span<T>(grads.final_gain.storage()));

	for (int l = cfg.n_layers - 1; l >= 0; --l) {
		const auto &b = params.blocks[l];
		auto &g = grads.blocks[l];
		const auto &c = cache.blocks[l];

		// mlp
		matmul_tn_acc(c.act, dx, g.w_out);
		column_sum_acc<T>(dx, g.b_out.storage());
		Matrix<T> dact = matmul_nt(dx, b.w_out);
		Matrix<T> dhidden = gelu_backward(c.hidden, dact);
		matmul_tn_acc(c.ln2, dhidden, g.w_in);
		column_sum_acc<T>(dhidden, g.b_in.storage());
		Matrix<T> dln2 = matmul_nt(dhidden, b.w_in);
		Matrix<T> dx_mid = dx;
		dx_mid += rms_norm_backward(c.x_mid, std::span<const T>(b.ln2_gain.storage()),
		                            std::span<const T>(c.ln2_inv), dln2, std::span<T>(g.ln2_gain.storage()));

		// attention
		matmul_tn_acc(c.o, dx_mid, g.wo);
		column_sum_acc<T>(dx_mid, g.bo.storage());
		Matrix<T> d_o = matmul_nt(dx_mid, b.wo);
		Matrix<T> dq(n, d), dk(n, d), dv(n, d);
		for (std::size_t s = 0; s < nseg; ++s) {
			const std::size_t b0 = cache.offsets[s], b1 = cache.offsets[s + 1];
			for (std::size_t h = 0; h < nh; ++h) {
				const Matrix<T> &p = c.probs[s][h];
				Matrix<T> qh = detail::slice_rows(c.q, b0, b1, h * dh, dh);
				Matrix<T> kh = detail::slice_rows(c.k, b0, b1, h * dh, dh);
				Matrix<T> vh = detail::slice_rows(c.v, b0, b1, h * dh, dh);
				Matrix<T> doh = detail::slice_rows(d_o, b0, b1, h * dh, dh);
				Matrix<T> dp = matmul_nt(doh, vh);
				detail::put_rows(dv, matmul_tn(p, doh), b0, h * dh);
				Matrix<T> ds = softmax_rows_backward(p, dp, scale);
				detail::put_rows(dq, matmul(ds, kh), b0, h * dh);
				detail::put_rows(dk, matmul_tn(ds, qh), b0, h * dh);
			}
		}
		matmul_tn_acc(c.ln1, dq, g.wq);
		matmul_tn_acc(c.ln1, dk, g.wk);
		matmul_tn_acc(c.ln1, dv, g.wv);
		Matrix<T> dln1 = matmul_nt(dq, b.wq);
		dln1 += matmul_nt(dk, b.wk);
		dln1 += matmul_nt(dv, b.wv);
		dx = dx_mid;
		dx += rms_norm_backward(c.x_in, std::span<const T>(b.ln1_gain.storage()), std::span<const T>(c.ln1_inv),
		                        dln1, std::span<T>(g.ln1_gain.storage()));
	}

	for (std::size_t s = 0; s < nseg; ++s)
		for (std::size_t i = cache.offsets[s]; i < cache.offsets[s + 1]; ++i) {
			auto src = dx.row(i);
			auto te = grads.tok_emb.row(cache.tokens[i]);
			auto pe = grads.pos_emb.row(i - cache.offsets[s]);
			for (std::size_t j = 0; j < d; ++j) {
				te[j] += src[j];
				pe[j] += src[j];
			}
		}
}

// Mean next-token loss of a batch and (optionally) its gradient.
template <typename T>
double loss_and_grad(const ModelParams<T> &params, std::span<const std::vector<int>> batch, ModelParams<T> *grads) {
	ForwardCache<T> cache;
	Matrix<T> logits = forward_packed<T>(params, batch, grads ? &cache : nullptr);
	std::vector<int> tokens;
	std::vector<std::size_t> offsets{0};
	for (const auto &s : batch) {
		tokens.insert(tokens.end(), s.begin(), s.end());
		offsets.push_back(tokens.size());
	}
	const auto targets = next_token_targets(tokens, offsets);
	Matrix<T> dlogits;
	const double loss = cross_entropy<T>(logits, targets, grads ? &dlogits : nullptr);
	if (grads)
		backward(params, cache, dlogits, *grads);
	return loss;
}

struct TrainOptions {
	int steps = 2000;
	int batch_size = 32;
	AdamConfig adam{3e-3, 0.9, 0.999, 1e-8};
	double final_lr_fraction = 0.1; // linear decay to lr * this
	int log_every = 100;
};

struct TrainReport {
	std::vector<double> losses; // per step
};

// Trains in place on batches drawn from `next_batch`. Throws NumericError
// naming the step when the loss stops being finite.
template <typename T, typename BatchFn>
TrainReport train(ModelParams<T> &params, BatchFn &&next_batch, const TrainOptions &opts, AdamState<T> &adam,
                  const std::function<void(int, double)> &log = {}) {
	TrainReport report;
	ModelParams<T> grads = ModelParams<T>::zeros(params.config);
	auto ptensors = params.tensors();
	auto gtensors = grads.tensors();
	std::vector<const Matrix<T> *> gconst(gtensors.begin(), gtensors.end());
	const double base_lr = opts.adam.lr;
	for (int step = 0; step < opts.steps; ++step) {
		const auto batch = next_batch(opts.batch_size);
		grads.zero();
		const double loss = loss_and_grad<T>(params, batch, &grads);
		if (!std::isfinite(loss))
			throw NumericError("non-finite training loss at step " + std::to_string(step));
		const double frac = opts.steps > 1 ? static_cast<double>(step) / (opts.steps - 1) : 0.0;
		adam.config.lr = base_lr * (1.0 - (1.0 - opts.final_lr_fraction) * frac);
		adam.update(ptensors, gconst);
		report.losses.push_back(loss);
		if (log && opts.log_every > 0 && (step % opts.log_every == 0 || step + 1 == opts.steps))
			log(step, loss);
	}
	adam.config.lr = base_lr;
	if (!params.all_finite())
		throw NumericError("non-finite parameters after training");
	return report;
}

// Argmax next-token accuracy over every position that has a target.
template <typename T>
double next_token_accuracy(const ModelParams<T> &params, std::span<const std::vector<int>> seqs) {
	std::size_t hit = 0, total = 0;
	for (const auto &s : seqs) {
		auto r = forward<T>(params, s);
		for (std::size_t i = 0; i + 1 < s.size(); ++i) {
			auto row = r.logits.row(i);
			const auto best = std::max_element(row.begin(), row.end()) - row.begin();
			hit += best == s[i + 1] ? 1 : 0;
			++total;
		}
	}
	return total ? static_cast<double>(hit) / total : 0.0;
}

// Incremental decoder with a key/value cache. Feeding tokens one at a time
// gives the same logits as a full causal forward pass; the hook (if any) is
// applied to each position as it is processed.
template <typename T>
class Decoder {
public:
	explicit Decoder(const ModelParams<T> &params, const ResidualHook<T> *hook = nullptr)
	    : params_(&params), hook_(hook) {
		const auto &cfg = params.config;
		if (hook_ && (hook_->layer < 1 || hook_->layer > cfg.n_layers))
			throw std::out_of_range("hook layer " + std::to_string(hook_->layer));
		keys_.assign(cfg.n_layers, {});
		values_.assign(cfg.n_layers, {});
		x_.resize(cfg.d_model);
		tmp_.resize(std::max(cfg.d_model, cfg.d_ff));
	}

	std::size_t position() const noexcept { return pos_; }

	// Processes one token and returns the next-token logits.
	const std::vector<T> &step(int token) {
		const auto &p = *params_;
		const auto &cfg = p.config;
		if (token < 0 || token >= cfg.vocab_size)
			throw std::out_of_range("token id " + std::to_string(token));
		if (static_cast<int>(pos_) >= cfg.context_len)
			throw std::length_error("decoder context exhausted");
		const std::size_t d = cfg.d_model, nh = cfg.n_heads, dh = cfg.head_dim(), f = cfg.d_ff;
		const T scale = T{1} / std::sqrt(static_cast<T>(dh));
		for (std::size_t j = 0; j < d; ++j)
			x_[j] = p.tok_emb(token, j) + p.pos_emb(pos_, j);

		std::vector<T> ln(d), q(d), o(d), attn(d), hidden(f), mlp(d), scores;
		for (int l = 0; l < cfg.n_layers; ++l) {
			const auto &b = p.blocks[l];
			rms_row(x_, b.ln1_gain.storage(), ln);
			vecmat(ln, b.wq, q);
			auto &K = keys_[l];
			auto &V = values_[l];
			K.resize((pos_ + 1) * d);
			V.resize((pos_ + 1) * d);
			vecmat(ln, b.wk, std::span<T>(K.data() + pos_ * d, d));
			vecmat(ln, b.wv, std::span<T>(V.data() + pos_ * d, d));
			scores.resize(pos_ + 1);
			for (std::size_t h = 0; h < nh; ++h) {
				for (std::size_t t = 0; t <= pos_; ++t) {
					T s{0};
					for (std::size_t j = 0; j < dh; ++j)
						s += q[h * dh + j] * K[t * d + h * dh + j];
					scores[t] = s;
				}
				softmax_inplace(std::span<T>(scores), scale);
				for (std::size_t j = 0; j < dh; ++j)
					o[h * dh + j] = T{0};
				for (std::size_t t = 0; t <= pos_; ++t) {
					const T w = scores[t];
					for (std::size_t j = 0; j < dh; ++j)
						o[h * dh + j] += w * V[t * d + h * dh + j];
				}
			}
			vecmat(o, b.wo, attn);
			for (std::size_t j = 0; j < d; ++j)
				x_[j] += attn[j] + b.bo(0, j);
			rms_row(x_, b.ln2_gain.storage(), ln);
			vecmat(ln, b.w_in, hidden);
			for (std::size_t j = 0; j < f; ++j)
				hidden[j] = gelu(hidden[j] + b.b_in(0, j));
			vecmat(hidden, b.w_out, mlp);
			for (std::size_t j = 0; j < d; ++j)
				x_[j] += mlp[j] + b.b_out(0, j);
			if (hook_ && hook_->layer == l + 1 && pos_ >= hook_->first_position)
				hook_->edit(std::span<T>(x_));
		}
		rms_row(x_, p.final_gain.storage(), ln);
		logits_.assign(cfg.vocab_size, T{0});
		for (int v = 0; v < cfg.vocab_size; ++v) {
			T s{0};
			for (std::size_t j = 0; j < d; ++j)
				s += ln[j] * p.tok_emb(v, j);
			logits_[v] = s;
		}
		++pos_;
		return logits_;
	}

private:
	static void rms_row(std::span<const T> x, std::span<const T> gain, std::span<T> out) {
		T ss{0};
		for (T v : x)
			ss += v * v;
		const T r = T{1} / std::sqrt(ss / static_cast<T>(x.size()) + static_cast<T>(kRmsEps));
		for (std::size_t j = 0; j < x.size(); ++j)
			out[j] = x[j] * r * gain[j];
	}

	// out = x W, W: in x out.
	static void vecmat(std::span<const T> x, const Matrix<T> &w, std::span<T> out) {
		std::fill(out.begin(), out.end(), T{0});
		const std::size_t n = w.cols();
		for (std::size_t p = 0; p < w.rows(); ++p) {
			const T xv = x[p];
			if (xv == T{0})
				continue;
			const T *wr = w.data() + p * n;
			for (std::size_t j = 0; j < n; ++j)
				out[j] += xv * wr[j];
		}
	}

	const ModelParams<T> *params_;
	const ResidualHook<T> *hook_;
	std::vector<std::vector<T>> keys_, values_;
	std::vector<T> x_, tmp_, logits_;
	std::size_t pos_ = 0;
};

struct Generation {
	std::vector<int> tokens; // continuation only, EOS excluded
	bool hit_eos = false;
};

struct GenerateOptions {
	double temperature = 0.5; // 0 selects argmax decoding
	int max_new = 50;
	int eos_token = 2;
	// With steer_prompt = false the hook only touches generated positions.
	bool steer_prompt = true;
};

template <typename T>
int sample_token(std::span<const T> logits, double temperature, Rng &rng) {
	if (temperature < 0.0 || !std::isfinite(temperature))
		throw std::invalid_argument("temperature must be >= 0");
	if (temperature == 0.0)
		return static_cast<int>(std::max_element(logits.begin(), logits.end()) - logits.begin());
	std::vector<double> p(logits.begin(), logits.end());
	const double inv_t = 1.0 / temperature;
	softmax_inplace(std::span<double>(p), inv_t);
	return static_cast<int>(rng.categorical<double>(p));
}

// Autoregressive sampling. Stops at EOS, after max_new tokens, or when the
// context is full.
template <typename T>
Generation generate(const ModelParams<T> &params, std::span<const int> prompt, const GenerateOptions &opts, Rng &rng,
                    const ResidualHook<T> *hook = nullptr) {
	if (prompt.empty())
		throw std::invalid_argument("generate: empty prompt");
	check_tokens(params.config, prompt);
	ResidualHook<T> local;
	if (hook) {
		local = *hook;
		if (!opts.steer_prompt)
			local.first_position = std::max(local.first_position, prompt.size());
	}
	Decoder<T> dec(params, hook ? &local : nullptr);
	const std::vector<T> *logits = nullptr;
	if (static_cast<int>(prompt.size()) > params.config.context_len)
		throw std::length_error("prompt longer than the context");
	for (int t : prompt)
		logits = &dec.step(t);
	Generation g;
	for (int i = 0; i < opts.max_new; ++i) {
		const int next = sample_token<T>(*logits, opts.temperature, rng);
		if (next == opts.eos_token) {
			g.hit_eos = true;
			break;
		}
		g.tokens.push_back(next);
		if (i + 1 == opts.max_new || static_cast<int>(dec.position()) >= params.config.context_len)
			break;
		logits = &dec.step(next);
	}
	return g;
}

// --- checkpoints ---------------------------------------------------------

template <typename T>
TensorFile model_to_file(const ModelParams<T> &params, Json extra = Json::object()) {
	TensorFile f;
	f.header = std::move(extra);
	f.header["kind"] = "model";
	f.header["config"] = to_json(params.config);
	params.visit([&](const std::string &name, const Matrix<T> &m) { f.add_cast(name, m); });
	return f;
}

template <typename T>
ModelParams<T> model_from_file(const TensorFile &f) {
	if (f.header.value("kind", "") != "model")
		throw IoError("not a model checkpoint");
	ModelParams<T> p = ModelParams<T>::zeros(model_config_from_json(f.header.at("config")));
	p.visit([&](const std::string &name, Matrix<T> &m) {
		const auto &src = f.get(name);
		if (src.rows() != m.rows() || src.cols() != m.cols())
			throw IoError("tensor " + name + " has shape " + src.shape_str() + ", expected " + m.shape_str());
		m = src.template cast<T>();
	});
	return p;
}

} // namespace steerlab

#endif // STEERLAB_TRANSFORMER_HPP
