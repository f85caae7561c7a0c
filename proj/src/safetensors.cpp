#include "crce/safetensors.hpp"

#include "crce/error.hpp"

#include <json.hpp>

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>

namespace crce {

namespace {

double half_to_double(std::uint16_t h) {
    const std::uint32_t sign = (h >> 15) & 1u;
    const std::uint32_t exp = (h >> 10) & 0x1Fu;
    const std::uint32_t mant = h & 0x3FFu;
    double v;
    if (exp == 0)
        v = std::ldexp(static_cast<double>(mant), -24);
    else if (exp == 31)
        v = mant ? std::numeric_limits<double>::quiet_NaN() : std::numeric_limits<double>::infinity();
    else
        v = std::ldexp(static_cast<double>(mant | 0x400u), static_cast<int>(exp) - 25);
    return sign ? -v : v;
}

std::size_t dtype_size(const std::string& dtype) {
    if (dtype == "F32") return 4;
    if (dtype == "F16" || dtype == "BF16") return 2;
    if (dtype == "F64") return 8;
    throw ParseError("unsupported safetensors dtype " + dtype);
}

} // namespace

SafetensorsFile::SafetensorsFile(const std::filesystem::path& path) : path_(path) {
    static_assert(std::endian::native == std::endian::little, "safetensors reader assumes little-endian host");
    std::ifstream in(path, std::ios::binary);
    if (!in)
        throw Error("cannot open " + path.string());
    std::uint64_t header_len = 0;
    in.read(reinterpret_cast<char*>(&header_len), 8);
    if (!in || header_len > (1ull << 30))
        throw ParseError("bad safetensors header", path.string());
    std::string header(header_len, '\0');
    in.read(header.data(), static_cast<std::streamsize>(header_len));
    if (!in)
        throw ParseError("truncated safetensors header", path.string());
    data_start_ = 8 + header_len;

    auto j = nlohmann::json::parse(header);
    for (auto& [name, meta] : j.items()) {
        if (name == "__metadata__")
            continue;
        Info i;
        i.dtype = meta.at("dtype").get<std::string>();
        i.shape = meta.at("shape").get<std::vector<std::int64_t>>();
        auto offsets = meta.at("data_offsets").get<std::vector<std::uint64_t>>();
        i.begin = offsets.at(0);
        i.end = offsets.at(1);
        tensors_.emplace(name, std::move(i));
    }
}

const SafetensorsFile::Info& SafetensorsFile::info(const std::string& name) const {
    auto it = tensors_.find(name);
    if (it == tensors_.end())
        throw ParseError("tensor '" + name + "' not found", path_.string());
    return it->second;
}

std::vector<std::string> SafetensorsFile::names() const {
    std::vector<std::string> out;
    for (const auto& [n, _] : tensors_)
        out.push_back(n);
    return out;
}

std::vector<double> SafetensorsFile::read(const std::string& name) const {
    const auto& i = info(name);
    const auto elem = dtype_size(i.dtype);
    std::int64_t count = 1;
    for (auto d : i.shape)
        count *= d;
    if (i.end - i.begin != static_cast<std::uint64_t>(count) * elem)
        throw ParseError("size mismatch for tensor " + name, path_.string());

    std::ifstream in(path_, std::ios::binary);
    in.seekg(static_cast<std::streamoff>(data_start_ + i.begin));
    std::vector<char> raw(i.end - i.begin);
    in.read(raw.data(), static_cast<std::streamsize>(raw.size()));
    if (!in)
        throw ParseError("truncated data for tensor " + name, path_.string());

    std::vector<double> out(static_cast<std::size_t>(count));
    for (std::int64_t k = 0; k < count; ++k) {
        const char* p = raw.data() + k * elem;
        if (i.dtype == "F32") {
            float f;
            std::memcpy(&f, p, 4);
            out[k] = f;
        } else if (i.dtype == "F64") {
            std::memcpy(&out[k], p, 8);
        } else if (i.dtype == "F16") {
            std::uint16_t h;
            std::memcpy(&h, p, 2);
            out[k] = half_to_double(h);
        } else {
            std::uint16_t b;
            std::memcpy(&b, p, 2);
            std::uint32_t bits = static_cast<std::uint32_t>(b) << 16;
            float f;
            std::memcpy(&f, &bits, 4);
            out[k] = f;
        }
    }
    return out;
}

} // namespace crce
