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

#ifndef STEERLAB_SAE_HPP
#define STEERLAB_SAE_HPP

// ReLU sparse autoencoder over residual-stream vectors.
//
//   z = ReLU(W_enc (h - b_dec) + b_enc)
//   h_hat = W_dec z + b_dec
//   loss = mean_batch(|h - h_hat|^2 + l1 * |z|_1)
//
// W_dec columns are renormalized to unit length after every step.

#include <cmath>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "numerics.hpp"
#include "rng.hpp"
#include "tensor_io.hpp"

namespace steerlab {

template <typename T>
struct Sae {
	int layer = 0;
	Matrix<T> w_enc; // m x d
	Matrix<T> b_enc; // 1 x m
	Matrix<T> w_dec; // d x m
	Matrix<T> b_dec; // 1 x d
	double l1 = 0.0;
	double explained_variance = 0.0;
	double mean_l0 = 0.0;

	std::size_t d() const noexcept { return w_dec.rows(); }
	std::size_t m() const noexcept { return w_dec.cols(); }

	static Sae zeros(int layer, std::size_t d, std::size_t m) {
		Sae s;
		s.layer = layer;
		s.w_enc = Matrix<T>(m, d);
		s.b_enc = Matrix<T>(1, m);
		s.w_dec = Matrix<T>(d, m);
		s.b_dec = Matrix<T>(1, d);
		return s;
	}

	std::vector<Matrix<T> *> tensors() { return {&w_enc, &b_enc, &w_dec, &b_dec}; }

	template <typename U>
	Sae<U> cast() const {
		Sae<U> s;
		s.layer = layer;
		s.w_enc = w_enc.template cast<U>();
		s.b_enc = b_enc.template cast<U>();
		s.w_dec = w_dec.template cast<U>();
		s.b_dec = b_dec.template cast<U>();
		s.l1 = l1;
		s.explained_variance = explained_variance;
		s.mean_l0 = mean_l0;
		return s;
	}

	void normalize_decoder() {
		const std::size_t dd = d(), mm = m();
		for (std::size_t j = 0; j < mm; ++j) {
			T ss{0};
			for (std::size_t i = 0; i < dd; ++i)
				ss += w_dec(i, j) * w_dec(i, j);
			const T n = std::sqrt(ss);
			if (n > T{0})
				for (std::size_t i = 0; i < dd; ++i)
					w_dec(i, j) /= n;
		}
	}

	void require_input(std::size_t n, const char *what) const {
		if (n != d())
			throw DimensionError(std::string(what) + ": expected length " + std::to_string(d()) + ", got " +
			                     std::to_string(n));
	}
};

// Random init: W_enc ~ N(0, init_std), W_dec = W_enc^T with unit columns,
// b_dec = data mean.
template <typename T>
Sae<T> init_sae(int layer, std::size_t d, std::size_t m, std::span<const T> data_mean, std::uint64_t seed,
                double init_std = 0.1) {
	if (data_mean.size() != d)
		throw DimensionError("init_sae: mean length mismatch");
	Sae<T> s = Sae<T>::zeros(layer, d, m);
	Rng rng(seed);
	for (auto &x : s.w_enc.storage())
		x = static_cast<T>(rng.normal(0.0, init_std));
	s.w_dec = transpose(s.w_enc);
	s.normalize_decoder();
	std::copy(data_mean.begin(), data_mean.end(), s.b_dec.data());
	return s;
}

template <typename T>
std::vector<T> encode(const Sae<T> &sae, std::span<const T> h) {
	sae.require_input(h.size(), "encode");
	const std::size_t d = sae.d(), m = sae.m();
	std::vector<T> c(d);
	for (std::size_t i = 0; i < d; ++i)
		c[i] = h[i] - sae.b_dec(0, i);
	std::vector<T> z(m);
	for (std::size_t j = 0; j < m; ++j) {
		T s = sae.b_enc(0, j);
		const T *w = sae.w_enc.data() + j * d;
		for (std::size_t i = 0; i < d; ++i)
			s += w[i] * c[i];
		z[j] = s > T{0} ? s : T{0};
	}
	return z;
}

template <typename T>
std::vector<T> decode(const Sae<T> &sae, std::span<const T> z) {
	if (z.size() != sae.m())
		throw DimensionError("decode: expected code length " + std::to_string(sae.m()));
	const std::size_t d = sae.d(), m = sae.m();
	std::vector<T> h(sae.b_dec.storage());
	for (std::size_t i = 0; i < d; ++i) {
		const T *w = sae.w_dec.data() + i * m;
		T s{0};
		for (std::size_t j = 0; j < m; ++j)
			s += w[j] * z[j];
		h[i] += s;
	}
	return h;
}

// Row-wise encode of an n x d batch; also returns the pre-activations.
template <typename T>
Matrix<T> encode_batch(const Sae<T> &sae, const Matrix<T> &h, Matrix<T> *pre_out = nullptr) {
	sae.require_input(h.cols(), "encode_batch");
	Matrix<T> c = h;
	for (std::size_t r = 0; r < c.rows(); ++r) {
		auto row = c.row(r);
		for (std::size_t i = 0; i < row.size(); ++i)
			row[i] -= sae.b_dec(0, i);
	}
	Matrix<T> pre = matmul_nt(c, sae.w_enc);
	add_row_bias<T>(pre, sae.b_enc.storage());
	Matrix<T> z = pre;
	for (auto &x : z.storage())
		x = x > T{0} ? x : T{0};
	if (pre_out)
		*pre_out = std::move(pre);
	return z;
}

template <typename T>
Matrix<T> decode_batch(const Sae<T> &sae, const Matrix<T> &z) {
	if (z.cols() != sae.m())
		throw DimensionError("decode_batch: code width mismatch");
	// Codes are sparse, so accumulate decoder columns of the active entries.
	const std::size_t d = sae.d(), m = sae.m();
	const Matrix<T> cols = transpose(sae.w_dec);
	Matrix<T> h(z.rows(), d);
	for (std::size_t r = 0; r < z.rows(); ++r) {
		T *out = h.data() + r * d;
		std::copy_n(sae.b_dec.data(), d, out);
		const T *zr = z.data() + r * m;
		for (std::size_t j = 0; j < m; ++j) {
			if (zr[j] == T{0})
				continue;
			const T *w = cols.data() + j * d;
			for (std::size_t i = 0; i < d; ++i)
				out[i] += zr[j] * w[i];
		}
	}
	return h;
}

// Unit vector along decoder column j.
template <typename T>
std::vector<T> feature_direction(const Sae<T> &sae, std::size_t j) {
	if (j >= sae.m())
		throw std::out_of_range("feature index " + std::to_string(j) + " >= " + std::to_string(sae.m()));
	std::vector<T> v(sae.d());
	for (std::size_t i = 0; i < v.size(); ++i)
		v[i] = sae.w_dec(i, j);
	const T n = norm2<T>(v);
	if (!(n > T{0}))
		throw NumericError("feature " + std::to_string(j) + " has a zero decoder column");
	for (auto &x : v)
		x /= n;
	return v;
}

struct SaeLoss {
	double total = 0.0;
	double mse = 0.0; // mean squared reconstruction error per row (summed over d)
	double l1 = 0.0;  // mean |z|_1 per row
};

// Loss of one batch; accumulates gradients into `grads` when given.
template <typename T>
SaeLoss sae_loss(const Sae<T> &sae, const Matrix<T> &h, double l1, Sae<T> *grads = nullptr) {
	const std::size_t n = h.rows();
	if (n == 0)
		throw std::invalid_argument("sae_loss: empty batch");
	Matrix<T> pre;
	Matrix<T> z = encode_batch(sae, h, &pre);
	Matrix<T> err = decode_batch(sae, z);
	err -= h;
	SaeLoss out;
	for (T e : err.storage())
		out.mse += static_cast<double>(e) * e;
	for (T v : z.storage())
		out.l1 += v;
	out.mse /= n;
	out.l1 /= n;
	out.total = out.mse + l1 * out.l1;
	if (!grads)
		return out;

	// Only active codes carry gradient (ReLU), which keeps this O(n * L0 * d).
	const std::size_t d = h.cols(), m = sae.m();
	const T scale = T{2} / static_cast<T>(n);
	const T l1_term = static_cast<T>(l1) / static_cast<T>(n);
	const Matrix<T> cols = transpose(sae.w_dec);
	Matrix<T> gcols(m, d);
	auto gb_dec = grads->b_dec.row(0);
	auto gb_enc = grads->b_enc.row(0);
	std::vector<T> dr(d), c(d), dc(d);
	for (std::size_t r = 0; r < n; ++r) {
		for (std::size_t i = 0; i < d; ++i) {
			dr[i] = scale * err(r, i);
			c[i] = h(r, i) - sae.b_dec(0, i);
			gb_dec[i] += dr[i];
		}
		std::fill(dc.begin(), dc.end(), T{0});
		for (std::size_t j = 0; j < m; ++j) {
			if (!(pre(r, j) > T{0}))
				continue;
			const T zj = z(r, j);
			const T *wd = cols.data() + j * d;
			const T *we = sae.w_enc.data() + j * d;
			T *gd = gcols.data() + j * d;
			T *ge = grads->w_enc.data() + j * d;
			T dzj = l1_term;
			for (std::size_t i = 0; i < d; ++i) {
				gd[i] += dr[i] * zj;
				dzj += dr[i] * wd[i];
			}
			gb_enc[j] += dzj;
			for (std::size_t i = 0; i < d; ++i) {
				ge[i] += dzj * c[i];
				dc[i] += dzj * we[i];
			}
		}
		for (std::size_t i = 0; i < d; ++i)
			gb_dec[i] -= dc[i];
	}
	grads->w_dec += transpose(gcols);
	return out;
}

struct SaeMetrics {
	double explained_variance = 0.0;
	double mean_l0 = 0.0;
	std::size_t dead_features = 0; // never active on the evaluated rows
};

// EV = 1 - sum|h - h_hat|^2 / sum|h - mean(h)|^2 over the rows of `data`.
template <typename T>
SaeMetrics evaluate_sae(const Sae<T> &sae, const Matrix<T> &data, std::size_t chunk = 4096) {
	const std::size_t n = data.rows(), d = data.cols();
	if (n == 0)
		throw std::invalid_argument("evaluate_sae: empty data");
	std::vector<double> mean(d, 0.0);
	for (std::size_t r = 0; r < n; ++r)
		for (std::size_t i = 0; i < d; ++i)
			mean[i] += data(r, i);
	for (auto &x : mean)
		x /= n;
	double sse = 0.0, sst = 0.0, l0 = 0.0;
	std::vector<bool> alive(sae.m(), false);
	for (std::size_t b = 0; b < n; b += chunk) {
		const std::size_t e = std::min(n, b + chunk);
		Matrix<T> h(e - b, d);
		std::copy(data.data() + b * d, data.data() + e * d, h.data());
		Matrix<T> z = encode_batch(sae, h);
		Matrix<T> r = decode_batch(sae, z);
		for (std::size_t i = 0; i < h.rows(); ++i) {
			for (std::size_t k = 0; k < d; ++k) {
				const double diff = static_cast<double>(r(i, k)) - h(i, k);
				const double dev = static_cast<double>(h(i, k)) - mean[k];
				sse += diff * diff;
				sst += dev * dev;
			}
			for (std::size_t j = 0; j < sae.m(); ++j)
				if (z(i, j) > T{0}) {
					l0 += 1.0;
					alive[j] = true;
				}
		}
	}
	SaeMetrics m;
	m.explained_variance = sst > 0.0 ? 1.0 - sse / sst : 0.0;
	m.mean_l0 = l0 / n;
	m.dead_features = static_cast<std::size_t>(std::count(alive.begin(), alive.end(), false));
	return m;
}

struct SaeTrainOptions {
	std::size_t expansion = 8;
	double l1 = 3.0;
	int steps = 3000;
	int batch_size = 256;
	double lr = 1e-3;
	std::uint64_t seed = 1;
	int log_every = 500;
};

// Trains on rows of `data` sampled uniformly with replacement.
template <typename T>
Sae<T> train_sae(int layer, const Matrix<T> &data, const SaeTrainOptions &opts,
                 const std::function<void(int, const SaeLoss &)> &log = {}) {
	const std::size_t n = data.rows(), d = data.cols();
	if (n == 0)
		throw std::invalid_argument("train_sae: empty activation set");
	std::vector<T> mean(d, T{0});
	{
		std::vector<double> acc(d, 0.0);
		for (std::size_t r = 0; r < n; ++r)
			for (std::size_t i = 0; i < d; ++i)
				acc[i] += data(r, i);
		for (std::size_t i = 0; i < d; ++i)
			mean[i] = static_cast<T>(acc[i] / n);
	}
	Rng rng(split_seed(opts.seed, static_cast<std::uint64_t>(layer)));
	Sae<T> sae = init_sae<T>(layer, d, opts.expansion * d, mean, rng.split("init").seed());
	sae.l1 = opts.l1;
	Sae<T> grads = Sae<T>::zeros(layer, d, sae.m());
	AdamState<T> adam(AdamConfig{opts.lr, 0.9, 0.999, 1e-8});
	auto ptensors = sae.tensors();
	auto gt = grads.tensors();
	std::vector<const Matrix<T> *> gconst(gt.begin(), gt.end());
	Matrix<T> batch(opts.batch_size, d);
	for (int step = 0; step < opts.steps; ++step) {
		for (int b = 0; b < opts.batch_size; ++b) {
			const auto r = static_cast<std::size_t>(rng.uniform_int(0, static_cast<int>(n - 1)));
			std::copy_n(data.data() + r * d, d, batch.data() + b * d);
		}
		for (auto *g : gt)
			g->fill(T{0});
		const SaeLoss loss = sae_loss(sae, batch, opts.l1, &grads);
		if (!std::isfinite(loss.total))
			throw NumericError("non-finite SAE loss at layer " + std::to_string(layer) + " step " +
			                   std::to_string(step));
		adam.update(ptensors, gconst);
		sae.normalize_decoder();
		if (log && opts.log_every > 0 && (step % opts.log_every == 0 || step + 1 == opts.steps))
			log(step, loss);
	}
	return sae;
}

template <typename T>
TensorFile sae_to_file(const Sae<T> &sae, Json extra = Json::object()) {
	TensorFile f;
	f.header = std::move(extra);
	f.header["kind"] = "sae";
	f.header["layer"] = sae.layer;
	f.header["d"] = sae.d();
	f.header["m"] = sae.m();
	f.header["l1"] = sae.l1;
	f.header["explained_variance"] = sae.explained_variance;
	f.header["mean_l0"] = sae.mean_l0;
	f.add_cast("w_enc", sae.w_enc);
	f.add_cast("b_enc", sae.b_enc);
	f.add_cast("w_dec", sae.w_dec);
	f.add_cast("b_dec", sae.b_dec);
	return f;
}

template <typename T>
Sae<T> sae_from_file(const TensorFile &f) {
	if (f.header.value("kind", "") != "sae")
		throw IoError("not an SAE checkpoint");
	Sae<T> s;
	s.layer = f.header.at("layer");
	s.l1 = f.header.at("l1");
	s.explained_variance = f.header.at("explained_variance");
	s.mean_l0 = f.header.at("mean_l0");
	s.w_enc = f.get("w_enc").cast<T>();
	s.b_enc = f.get("b_enc").cast<T>();
	s.w_dec = f.get("w_dec").cast<T>();
	s.b_dec = f.get("b_dec").cast<T>();
	const std::size_t d = s.w_dec.rows(), m = s.w_dec.cols();
	if (s.w_enc.rows() != m || s.w_enc.cols() != d || s.b_enc.cols() != m || s.b_dec.cols() != d)
		throw IoError("SAE checkpoint has inconsistent shapes");
	return s;
}

} // namespace steerlab

#endif // STEERLAB_SAE_HPP
