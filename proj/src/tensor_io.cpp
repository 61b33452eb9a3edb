// SPDX-License-Identifier: Apache-2.0
#include "nextshot/tensor_io.hpp"

#include <bit>
#include <cstdint>
#include <fstream>
#include <stdexcept>

namespace nextshot {

static_assert(std::endian::native == std::endian::little, "tensor files assume a little-endian host");

namespace {

template <typename T>
void put(std::ostream& os, T v) {
    os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T get(std::istream& is) {
    T v{};
    is.read(reinterpret_cast<char*>(&v), sizeof(T));
    if (!is) throw std::runtime_error("tensor file truncated");
    return v;
}

constexpr std::uint32_t kMaxRank = 8;

}  // namespace

void write_tensor(std::ostream& os, const Tensor& t) {
    os.write(kTensorMagic.data(), kTensorMagic.size());
    put<std::uint32_t>(os, static_cast<std::uint32_t>(t.rank()));
    for (auto e : t.shape()) put<std::uint64_t>(os, e);
    if (t.size() > 0) os.write(reinterpret_cast<const char*>(t.data()), static_cast<std::streamsize>(t.size() * 4));
    if (!os) throw std::runtime_error("failed writing tensor");
}

Tensor read_tensor(std::istream& is) {
    std::array<char, 8> magic{};
    is.read(magic.data(), magic.size());
    if (!is || magic != kTensorMagic) throw std::runtime_error("not a tensor record (bad magic)");
    const auto rank = get<std::uint32_t>(is);
    if (rank > kMaxRank) throw std::runtime_error("tensor rank " + std::to_string(rank) + " too large");
    std::vector<std::size_t> shape(rank);
    for (auto& e : shape) e = static_cast<std::size_t>(get<std::uint64_t>(is));
    std::vector<float> data(shape_numel(shape));
    if (!data.empty()) {
        is.read(reinterpret_cast<char*>(data.data()), static_cast<std::streamsize>(data.size() * 4));
        if (!is) throw std::runtime_error("tensor payload truncated");
    }
    return Tensor(std::move(shape), std::move(data));
}

void save_tensor(const std::filesystem::path& path, const Tensor& t) {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw std::runtime_error("cannot open " + path.string() + " for writing");
    write_tensor(os, t);
}

Tensor load_tensor(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("cannot open " + path.string());
    return read_tensor(is);
}

}  // namespace nextshot
