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

#ifndef STEERLAB_NUMERICS_HPP
#define STEERLAB_NUMERICS_HPP

// Dense row-major matrices and the differentiable kernels the transformer
// and the sparse autoencoder are built from. Every kernel accumulates in a
// fixed sequential order, so results are bit-reproducible for fixed inputs.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <initializer_list>
#include <numbers>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace steerlab {

struct DimensionError : std::invalid_argument {
	using std::invalid_argument::invalid_argument;
};

struct NumericError : std::runtime_error {
	using std::runtime_error::runtime_error;
};

struct PreconditionError : std::logic_error {
	using std::logic_error::logic_error;
};

template <typename T>
class Matrix {
public:
	using value_type = T;

	Matrix() = default;
	Matrix(std::size_t rows, std::size_t cols, T fill = T{0})
	    : rows_(rows), cols_(cols), data_(rows * cols, fill) {}
	Matrix(std::size_t rows, std::size_t cols, std::vector<T> data)
	    : rows_(rows), cols_(cols), data_(std::move(data)) {
		if (data_.size() != rows_ * cols_)
			throw DimensionError("matrix data length " + std::to_string(data_.size()) +
			                     " != " + std::to_string(rows_) + "x" + std::to_string(cols_));
	}
	Matrix(std::initializer_list<std::initializer_list<T>> rows) {
		rows_ = rows.size();
		cols_ = rows_ ? rows.begin()->size() : 0;
		data_.reserve(rows_ * cols_);
		for (const auto &r : rows) {
			if (r.size() != cols_)
				throw DimensionError("ragged matrix literal");
			data_.insert(data_.end(), r.begin(), r.end());
		}
	}

	static Matrix row_vector(std::span<const T> v) {
		return Matrix(1, v.size(), std::vector<T>(v.begin(), v.end()));
	}

	std::size_t rows() const noexcept { return rows_; }
	std::size_t cols() const noexcept { return cols_; }
	std::size_t size() const noexcept { return data_.size(); }
	bool empty() const noexcept { return data_.empty(); }

	T *data() noexcept { return data_.data(); }
	const T *data() const noexcept { return data_.data(); }
	std::vector<T> &storage() noexcept { return data_; }
	const std::vector<T> &storage() const noexcept { return data_; }

	T &operator()(std::size_t r, std::size_t c) noexcept { return data_[r * cols_ + c]; }
	const T &operator()(std::size_t r, std::size_t c) const noexcept { return data_[r * cols_ + c]; }

	std::span<T> row(std::size_t r) noexcept { return {data_.data() + r * cols_, cols_}; }
	std::span<const T> row(std::size_t r) const noexcept { return {data_.data() + r * cols_, cols_}; }

	void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

	template <typename U>
	Matrix<U> cast() const {
		std::vector<U> out(data_.size());
		std::transform(data_.begin(), data_.end(), out.begin(), [](T x) { return static_cast<U>(x); });
		return Matrix<U>(rows_, cols_, std::move(out));
	}

	bool all_finite() const {
		return std::all_of(data_.begin(), data_.end(), [](T x) { return std::isfinite(x); });
	}

	Matrix &operator+=(const Matrix &o) {
		require_same_shape(o, "+=");
		for (std::size_t i = 0; i < data_.size(); ++i)
			data_[i] += o.data_[i];
		return *this;
	}

	Matrix &operator-=(const Matrix &o) {
		require_same_shape(o, "-=");
		for (std::size_t i = 0; i < data_.size(); ++i)
			data_[i] -= o.data_[i];
		return *this;
	}

	Matrix &operator*=(T s) {
		for (auto &x : data_)
			x *= s;
		return *this;
	}

	friend Matrix operator+(Matrix a, const Matrix &b) { return a += b; }
	friend Matrix operator-(Matrix a, const Matrix &b) { return a -= b; }
	friend bool operator==(const Matrix &a, const Matrix &b) {
		return a.rows_ == b.rows_ && a.cols_ == b.cols_ && a.data_ == b.data_;
	}

	void require_same_shape(const Matrix &o, const char *what) const {
		if (rows_ != o.rows_ || cols_ != o.cols_)
			throw DimensionError(std::string(what) + ": shape " + shape_str() + " vs " + o.shape_str());
	}

	std::string shape_str() const { return std::to_string(rows_) + "x" + std::to_string(cols_); }

private:
	std::size_t rows_ = 0;
	std::size_t cols_ = 0;
	std::vector<T> data_;
};

template <typename T>
void require_finite(const Matrix<T> &m, const char *what) {
	if (!m.all_finite())
		throw NumericError(std::string("non-finite values in ") + what);
}

template <typename T>
T dot(std::span<const T> a, std::span<const T> b) {
	if (a.size() != b.size())
		throw DimensionError("dot: length " + std::to_string(a.size()) + " vs " + std::to_string(b.size()));
	T acc{0};
	for (std::size_t i = 0; i < a.size(); ++i)
		acc += a[i] * b[i];
	return acc;
}

// Dot product accumulated in double regardless of storage precision.
template <typename T, typename U>
double dot_wide(std::span<const T> a, std::span<const U> b) {
	if (a.size() != b.size())
		throw DimensionError("dot: length mismatch");
	double acc = 0.0;
	for (std::size_t i = 0; i < a.size(); ++i)
		acc += static_cast<double>(a[i]) * static_cast<double>(b[i]);
	return acc;
}

template <typename T>
T norm2(std::span<const T> a) {
	return std::sqrt(dot(a, a));
}

// out += a * b, with a: MxK, b: KxN. The i-k-j order keeps the inner loop
// contiguous and each out(i, j) accumulates over k sequentially.
template <typename T>
void matmul_acc(const Matrix<T> &a, const Matrix<T> &b, Matrix<T> &out) {
	if (a.cols() != b.rows())
		throw DimensionError("matmul: " + a.shape_str() + " * " + b.shape_str());
	if (out.rows() != a.rows() || out.cols() != b.cols())
		throw DimensionError("matmul: output shape " + out.shape_str());
	const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
	for (std::size_t i = 0; i < m; ++i) {
		T *o = out.data() + i * n;
		const T *ar = a.data() + i * k;
		for (std::size_t p = 0; p < k; ++p) {
			const T av = ar[p];
			if (av == T{0})
				continue;
			const T *br = b.data() + p * n;
			for (std::size_t j = 0; j < n; ++j)
				o[j] += av * br[j];
		}
	}
}

template <typename T>
Matrix<T> matmul(const Matrix<T> &a, const Matrix<T> &b) {
	if (a.cols() != b.rows())
		throw DimensionError("matmul: " + a.shape_str() + " * " + b.shape_str());
	Matrix<T> out(a.rows(), b.cols());
	matmul_acc(a, b, out);
	return out;
}

template <typename T>
Matrix<T> transpose(const Matrix<T> &a) {
	Matrix<T> t(a.cols(), a.rows());
	for (std::size_t i = 0; i < a.rows(); ++i)
		for (std::size_t j = 0; j < a.cols(); ++j)
			t(j, i) = a(i, j);
	return t;
}

// out += a^T * b, with a: RxM, b: RxN (weight gradients).
template <typename T>
void matmul_tn_acc(const Matrix<T> &a, const Matrix<T> &b, Matrix<T> &out) {
	if (a.rows() != b.rows())
		throw DimensionError("matmul_tn: " + a.shape_str() + "^T * " + b.shape_str());
	if (out.rows() != a.cols() || out.cols() != b.cols())
		throw DimensionError("matmul_tn: output shape " + out.shape_str());
	const std::size_t r = a.rows(), m = a.cols(), n = b.cols();
	for (std::size_t i = 0; i < m; ++i) {
		T *o = out.data() + i * n;
		for (std::size_t p = 0; p < r; ++p) {
			const T av = a.data()[p * m + i];
			if (av == T{0})
				continue;
			const T *br = b.data() + p * n;
			for (std::size_t j = 0; j < n; ++j)
				o[j] += av * br[j];
		}
	}
}

template <typename T>
Matrix<T> matmul_tn(const Matrix<T> &a, const Matrix<T> &b) {
	Matrix<T> out(a.cols(), b.cols());
	matmul_tn_acc(a, b, out);
	return out;
}

// a * b^T, with a: MxK, b: NxK.
template <typename T>
Matrix<T> matmul_nt(const Matrix<T> &a, const Matrix<T> &b) {
	if (a.cols() != b.cols())
		throw DimensionError("matmul_nt: " + a.shape_str() + " * " + b.shape_str() + "^T");
	return matmul(a, transpose(b));
}

template <typename T>
void add_row_bias(Matrix<T> &m, std::span<const T> bias) {
	if (bias.size() != m.cols())
		throw DimensionError("bias length mismatch");
	for (std::size_t i = 0; i < m.rows(); ++i) {
		T *r = m.data() + i * m.cols();
		for (std::size_t j = 0; j < m.cols(); ++j)
			r[j] += bias[j];
	}
}

// Column sums, accumulated row by row (bias gradients).
template <typename T>
void column_sum_acc(const Matrix<T> &m, std::span<T> out) {
	if (out.size() != m.cols())
		throw DimensionError("column_sum: length mismatch");
	for (std::size_t i = 0; i < m.rows(); ++i) {
		const T *r = m.data() + i * m.cols();
		for (std::size_t j = 0; j < m.cols(); ++j)
			out[j] += r[j];
	}
}

template <typename T>
void softmax_inplace(std::span<T> row, T scale) {
	if (row.empty())
		return;
	T mx = row[0] * scale;
	for (T x : row)
		mx = std::max(mx, x * scale);
	T sum{0};
	for (T &x : row) {
		x = std::exp(x * scale - mx);
		sum += x;
	}
	const T inv = T{1} / sum;
	for (T &x : row)
		x *= inv;
}

template <typename T>
Matrix<T> softmax_rows(const Matrix<T> &m, T scale = T{1}) {
	Matrix<T> out = m;
	for (std::size_t i = 0; i < out.rows(); ++i)
		softmax_inplace(out.row(i), scale);
	return out;
}

// Given y = softmax(scale * x) row-wise and dL/dy, returns dL/dx.
template <typename T>
Matrix<T> softmax_rows_backward(const Matrix<T> &y, const Matrix<T> &dy, T scale = T{1}) {
	y.require_same_shape(dy, "softmax_backward");
	Matrix<T> dx(y.rows(), y.cols());
	for (std::size_t i = 0; i < y.rows(); ++i) {
		auto yr = y.row(i);
		auto dyr = dy.row(i);
		const T s = dot<T>(yr, dyr);
		auto dxr = dx.row(i);
		for (std::size_t j = 0; j < yr.size(); ++j)
			dxr[j] = scale * yr[j] * (dyr[j] - s);
	}
	return dx;
}

inline constexpr double kRmsEps = 1e-5;

// y = x / rms(x) * gain, row-wise. inv_rms receives 1/rms per row.
template <typename T>
Matrix<T> rms_norm(const Matrix<T> &x, std::span<const T> gain, std::vector<T> *inv_rms = nullptr) {
	if (gain.size() != x.cols())
		throw DimensionError("rms_norm: gain length mismatch");
	Matrix<T> y(x.rows(), x.cols());
	if (inv_rms)
		inv_rms->resize(x.rows());
	const T eps = static_cast<T>(kRmsEps);
	for (std::size_t i = 0; i < x.rows(); ++i) {
		auto xr = x.row(i);
		T ss{0};
		for (T v : xr)
			ss += v * v;
		const T r = T{1} / std::sqrt(ss / static_cast<T>(xr.size()) + eps);
		if (inv_rms)
			(*inv_rms)[i] = r;
		auto yr = y.row(i);
		for (std::size_t j = 0; j < xr.size(); ++j)
			yr[j] = xr[j] * r * gain[j];
	}
	return y;
}

// Returns dL/dx and accumulates dL/dgain.
template <typename T>
Matrix<T> rms_norm_backward(const Matrix<T> &x, std::span<const T> gain, std::span<const T> inv_rms,
                            const Matrix<T> &dy, std::span<T> dgain) {
	x.require_same_shape(dy, "rms_norm_backward");
	const std::size_t n = x.cols();
	Matrix<T> dx(x.rows(), n);
	for (std::size_t i = 0; i < x.rows(); ++i) {
		auto xr = x.row(i);
		auto dyr = dy.row(i);
		const T r = inv_rms[i];
		T s{0};
		for (std::size_t j = 0; j < n; ++j) {
			dgain[j] += dyr[j] * xr[j] * r;
			s += dyr[j] * gain[j] * xr[j];
		}
		const T c = r * r * r * s / static_cast<T>(n);
		auto dxr = dx.row(i);
		for (std::size_t j = 0; j < n; ++j)
			dxr[j] = dyr[j] * gain[j] * r - xr[j] * c;
	}
	return dx;
}

// tanh approximation of GELU.
template <typename T>
T gelu(T x) {
	const T c = static_cast<T>(std::numbers::sqrt2 * std::numbers::inv_sqrtpi);
	const T u = c * (x + T(0.044715) * x * x * x);
	return T(0.5) * x * (T{1} + std::tanh(u));
}

template <typename T>
T gelu_grad(T x) {
	const T c = static_cast<T>(std::numbers::sqrt2 * std::numbers::inv_sqrtpi);
	const T u = c * (x + T(0.044715) * x * x * x);
	const T t = std::tanh(u);
	const T du = c * (T{1} + T(3 * 0.044715) * x * x);
	return T(0.5) * (T{1} + t) + T(0.5) * x * (T{1} - t * t) * du;
}

template <typename T>
Matrix<T> gelu(const Matrix<T> &x) {
	Matrix<T> y(x.rows(), x.cols());
	for (std::size_t i = 0; i < x.size(); ++i)
		y.data()[i] = gelu(x.data()[i]);
	return y;
}

template <typename T>
Matrix<T> gelu_backward(const Matrix<T> &x, const Matrix<T> &dy) {
	x.require_same_shape(dy, "gelu_backward");
	Matrix<T> dx(x.rows(), x.cols());
	for (std::size_t i = 0; i < x.size(); ++i)
		dx.data()[i] = gelu_grad(x.data()[i]) * dy.data()[i];
	return dx;
}

// Mean next-token cross-entropy over rows whose target is >= 0. Writes the
// gradient of the mean loss into dlogits when given.
template <typename T>
double cross_entropy(const Matrix<T> &logits, std::span<const int> targets, Matrix<T> *dlogits = nullptr) {
	if (targets.size() != logits.rows())
		throw DimensionError("cross_entropy: targets length mismatch");
	std::size_t counted = 0;
	for (int t : targets)
		counted += t >= 0 ? 1 : 0;
	if (dlogits)
		*dlogits = Matrix<T>(logits.rows(), logits.cols());
	if (counted == 0)
		return 0.0;
	double loss = 0.0;
	const T inv_n = T{1} / static_cast<T>(counted);
	std::vector<T> p(logits.cols());
	for (std::size_t i = 0; i < logits.rows(); ++i) {
		const int t = targets[i];
		if (t < 0)
			continue;
		if (static_cast<std::size_t>(t) >= logits.cols())
			throw DimensionError("cross_entropy: target out of range");
		auto lr = logits.row(i);
		std::copy(lr.begin(), lr.end(), p.begin());
		softmax_inplace(std::span<T>(p), T{1});
		loss -= std::log(std::max(static_cast<double>(p[t]), 1e-300));
		if (dlogits) {
			auto dr = dlogits->row(i);
			for (std::size_t j = 0; j < p.size(); ++j)
				dr[j] = p[j] * inv_n;
			dr[t] -= inv_n;
		}
	}
	return loss / static_cast<double>(counted);
}

// Fully connected layer y = x W + b that keeps its input for the backward pass.
template <typename T>
struct Dense {
	Matrix<T> weight; // in x out
	std::vector<T> bias;
	Matrix<T> grad_weight;
	std::vector<T> grad_bias;
	Matrix<T> cached_input;

	Dense(Matrix<T> w, std::vector<T> b)
	    : weight(std::move(w)), bias(std::move(b)), grad_weight(weight.rows(), weight.cols()),
	      grad_bias(weight.cols(), T{0}) {
		if (bias.size() != weight.cols())
			throw DimensionError("Dense: bias length mismatch");
	}

	Matrix<T> forward(const Matrix<T> &x) {
		cached_input = x;
		Matrix<T> y = matmul(x, weight);
		add_row_bias<T>(y, bias);
		return y;
	}

	Matrix<T> backward(const Matrix<T> &dy) {
		if (cached_input.empty())
			throw PreconditionError("Dense::backward called without a cached forward pass");
		matmul_tn_acc(cached_input, dy, grad_weight);
		column_sum_acc<T>(dy, grad_bias);
		return matmul_nt(dy, weight);
	}

	void zero_grad() {
		grad_weight.fill(T{0});
		std::fill(grad_bias.begin(), grad_bias.end(), T{0});
	}
};

struct AdamConfig {
	double lr = 1e-3;
	double beta1 = 0.9;
	double beta2 = 0.999;
	double eps = 1e-8;
};

template <typename T>
struct AdamState {
	AdamConfig config;
	long step = 0;
	std::vector<Matrix<T>> first_moment;
	std::vector<Matrix<T>> second_moment;

	AdamState() = default;
	explicit AdamState(AdamConfig c) : config(c) {}

	// Applies one update. Moments are allocated lazily to match params.
	void update(std::span<Matrix<T> *const> params, std::span<const Matrix<T> *const> grads) {
		if (params.size() != grads.size())
			throw DimensionError("adam: params/grads count mismatch");
		if (first_moment.empty()) {
			for (const auto *p : params) {
				first_moment.emplace_back(p->rows(), p->cols());
				second_moment.emplace_back(p->rows(), p->cols());
			}
		}
		if (first_moment.size() != params.size())
			throw DimensionError("adam: state does not match parameter list");
		++step;
		const double b1 = config.beta1, b2 = config.beta2;
		const double c1 = 1.0 - std::pow(b1, static_cast<double>(step));
		const double c2 = 1.0 - std::pow(b2, static_cast<double>(step));
		const T lr_t = static_cast<T>(config.lr * std::sqrt(c2) / c1);
		const T eps = static_cast<T>(config.eps * std::sqrt(c2));
		for (std::size_t k = 0; k < params.size(); ++k) {
			Matrix<T> &p = *params[k];
			const Matrix<T> &g = *grads[k];
			p.require_same_shape(g, "adam");
			p.require_same_shape(first_moment[k], "adam moment");
			T *pm = p.data();
			const T *gm = g.data();
			T *m = first_moment[k].data();
			T *v = second_moment[k].data();
			for (std::size_t i = 0; i < p.size(); ++i) {
				m[i] = static_cast<T>(b1) * m[i] + static_cast<T>(1 - b1) * gm[i];
				v[i] = static_cast<T>(b2) * v[i] + static_cast<T>(1 - b2) * gm[i] * gm[i];
				pm[i] -= lr_t * m[i] / (std::sqrt(v[i]) + eps);
			}
		}
	}
};

} // namespace steerlab

#endif // STEERLAB_NUMERICS_HPP
