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

#ifndef STEERLAB_RNG_HPP
#define STEERLAB_RNG_HPP

#include <cstdint>
#include <random>
#include <span>
#include <stdexcept>
#include <string_view>

namespace steerlab {

// splitmix64 finalizer; used to derive independent seeds.
constexpr std::uint64_t mix64(std::uint64_t x) noexcept {
	x += 0x9e3779b97f4a7c15ULL;
	x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
	x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
	return x ^ (x >> 31);
}

constexpr std::uint64_t fnv1a(std::string_view s, std::uint64_t h = 0xcbf29ce484222325ULL) noexcept {
	for (unsigned char c : s) {
		h ^= c;
		h *= 0x100000001b3ULL;
	}
	return h;
}

// Seed of the named sub-stream `stream` of `seed`. Workers that sample in
// parallel each take split_seed(seed, worker_index).
constexpr std::uint64_t split_seed(std::uint64_t seed, std::uint64_t stream) noexcept {
	return mix64(mix64(seed) ^ mix64(stream + 0x632be59bd9b4e019ULL));
}

constexpr std::uint64_t split_seed(std::uint64_t seed, std::string_view stream) noexcept {
	return split_seed(seed, fnv1a(stream));
}

class Rng {
public:
	explicit Rng(std::uint64_t seed = 0) : engine_(seed), seed_(seed) {}

	std::uint64_t seed() const noexcept { return seed_; }

	Rng split(std::uint64_t stream) const { return Rng(split_seed(seed_, stream)); }
	Rng split(std::string_view stream) const { return Rng(split_seed(seed_, stream)); }

	// Uniform on [0, 1).
	double uniform() { return std::generate_canonical<double, 53>(engine_); }

	// Uniform integer on [lo, hi].
	int uniform_int(int lo, int hi) {
		if (hi < lo)
			throw std::invalid_argument("uniform_int: empty range");
		return std::uniform_int_distribution<int>(lo, hi)(engine_);
	}

	double normal(double mean = 0.0, double stddev = 1.0) {
		return std::normal_distribution<double>(mean, stddev)(engine_);
	}

	bool bernoulli(double p) { return uniform() < p; }

	// Index drawn from unnormalized nonnegative weights.
	template <typename W>
	std::size_t categorical(std::span<const W> weights) {
		double total = 0.0;
		for (W w : weights)
			total += static_cast<double>(w);
		if (!(total > 0.0))
			throw std::invalid_argument("categorical: weights sum to zero");
		const double u = uniform() * total;
		double acc = 0.0;
		for (std::size_t i = 0; i < weights.size(); ++i) {
			acc += static_cast<double>(weights[i]);
			if (u < acc)
				return i;
		}
		for (std::size_t i = weights.size(); i-- > 0;)
			if (weights[i] > W{0})
				return i;
		return weights.size() - 1;
	}

	std::mt19937_64 &engine() noexcept { return engine_; }

private:
	std::mt19937_64 engine_;
	std::uint64_t seed_;
};

} // namespace steerlab

#endif // STEERLAB_RNG_HPP
