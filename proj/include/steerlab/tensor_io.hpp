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

#ifndef STEERLAB_TENSOR_IO_HPP
#define STEERLAB_TENSOR_IO_HPP

// Container file: a JSON header followed by little-endian tensor blocks.
//
//   "STLB" | u32 version | u64 header_bytes | header JSON
//   then one block per entry of header["tensors"]:
//   u32 rows | u32 cols | f32[rows*cols]
//
// Files are written to "<path>.tmp" and renamed into place.

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "numerics.hpp"

namespace steerlab {

namespace fs = std::filesystem;
using Json = nlohmann::json;

struct IoError : std::runtime_error {
	using std::runtime_error::runtime_error;
};

static_assert(std::endian::native == std::endian::little, "tensor files assume a little-endian host");

inline constexpr char kTensorMagic[4] = {'S', 'T', 'L', 'B'};
inline constexpr std::uint32_t kTensorVersion = 1;

// Writes `content` to path atomically (temp file + rename).
inline void write_file_atomic(const fs::path &path, std::string_view content) {
	if (path.has_parent_path())
		fs::create_directories(path.parent_path());
	fs::path tmp = path;
	tmp += ".tmp";
	{
		std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
		if (!out)
			throw IoError("cannot open " + tmp.string() + " for writing");
		out.write(content.data(), static_cast<std::streamsize>(content.size()));
		if (!out)
			throw IoError("short write to " + tmp.string());
	}
	fs::rename(tmp, path);
}

inline std::string read_file(const fs::path &path) {
	std::ifstream in(path, std::ios::binary);
	if (!in)
		throw IoError("cannot open " + path.string());
	std::ostringstream ss;
	ss << in.rdbuf();
	return ss.str();
}

struct TensorFile {
	Json header = Json::object();
	std::vector<std::pair<std::string, Matrix<float>>> tensors;

	void add(std::string name, Matrix<float> m) { tensors.emplace_back(std::move(name), std::move(m)); }

	template <typename T>
	void add_cast(std::string name, const Matrix<T> &m) {
		add(std::move(name), m.template cast<float>());
	}

	const Matrix<float> &get(std::string_view name) const {
		for (const auto &[n, m] : tensors)
			if (n == name)
				return m;
		throw IoError("tensor '" + std::string(name) + "' missing from file");
	}
};

template <typename Out>
void put_pod(Out &out, const auto &v) {
	char buf[sizeof(v)];
	std::memcpy(buf, &v, sizeof(v));
	out.append(buf, sizeof(v));
}

inline std::string encode_tensor_file(const TensorFile &file) {
	Json header = file.header;
	Json names = Json::array();
	for (const auto &[n, m] : file.tensors)
		names.push_back(n);
	header["tensors"] = names;
	const std::string hdr = header.dump();

	std::string out;
	out.append(kTensorMagic, 4);
	put_pod(out, kTensorVersion);
	put_pod(out, static_cast<std::uint64_t>(hdr.size()));
	out += hdr;
	for (const auto &[n, m] : file.tensors) {
		put_pod(out, static_cast<std::uint32_t>(m.rows()));
		put_pod(out, static_cast<std::uint32_t>(m.cols()));
		out.append(reinterpret_cast<const char *>(m.data()), m.size() * sizeof(float));
	}
	return out;
}

inline void save_tensor_file(const fs::path &path, const TensorFile &file) {
	write_file_atomic(path, encode_tensor_file(file));
}

inline TensorFile decode_tensor_file(std::string_view bytes, const std::string &what = "tensor file") {
	std::size_t pos = 0;
	auto take = [&](void *dst, std::size_t n) {
		if (pos + n > bytes.size())
			throw IoError(what + ": truncated");
		std::memcpy(dst, bytes.data() + pos, n);
		pos += n;
	};
	char magic[4];
	take(magic, 4);
	if (std::memcmp(magic, kTensorMagic, 4) != 0)
		throw IoError(what + ": bad magic");
	std::uint32_t version = 0;
	take(&version, sizeof(version));
	if (version != kTensorVersion)
		throw IoError(what + ": unsupported version " + std::to_string(version));
	std::uint64_t hlen = 0;
	take(&hlen, sizeof(hlen));
	if (pos + hlen > bytes.size())
		throw IoError(what + ": truncated header");
	TensorFile file;
	file.header = Json::parse(bytes.substr(pos, hlen));
	pos += hlen;
	for (const auto &name : file.header.at("tensors")) {
		std::uint32_t rows = 0, cols = 0;
		take(&rows, sizeof(rows));
		take(&cols, sizeof(cols));
		std::vector<float> data(static_cast<std::size_t>(rows) * cols);
		take(data.data(), data.size() * sizeof(float));
		file.tensors.emplace_back(name.get<std::string>(), Matrix<float>(rows, cols, std::move(data)));
	}
	return file;
}

inline TensorFile load_tensor_file(const fs::path &path) {
	return decode_tensor_file(read_file(path), path.string());
}

} // namespace steerlab

#endif // STEERLAB_TENSOR_IO_HPP
