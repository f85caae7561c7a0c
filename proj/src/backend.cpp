#include "crce/backend.hpp"

#include "crce/error.hpp"
#include "crce/util.hpp"

#include <cstring>
#include <fstream>

namespace crce {

namespace {

constexpr char kMagic[8] = {'C', 'R', 'C', 'E', 'P', 'A', 'R', '1'};

template <typename T>
void put(std::string& out, const T& v) {
    out.append(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T get(const std::string& in, std::size_t& pos, const std::string& where) {
    if (pos + sizeof(T) > in.size())
        throw ParseError("truncated checkpoint", where);
    T v;
    std::memcpy(&v, in.data() + pos, sizeof(T));
    pos += sizeof(T);
    return v;
}

std::string serialize(const ParamSet& p) {
    std::string out(kMagic, sizeof(kMagic));
    put<std::uint64_t>(out, p.size());
    for (const auto& [name, value] : p) {
        put<std::uint64_t>(out, name.size());
        out += name;
        put<std::int64_t>(out, value.rows());
        put<std::int64_t>(out, value.cols());
        out.append(reinterpret_cast<const char*>(value.data()), sizeof(double) * static_cast<std::size_t>(value.size()));
    }
    return out;
}

} // namespace

void ParamSet::add(std::string name, Eigen::MatrixXd value) {
    if (contains(name))
        throw ValidationError("duplicate parameter " + name);
    tensors_.push_back({std::move(name), std::move(value)});
}

bool ParamSet::contains(std::string_view name) const {
    for (const auto& t : tensors_)
        if (t.name == name)
            return true;
    return false;
}

const Eigen::MatrixXd& ParamSet::at(std::string_view name) const {
    for (const auto& t : tensors_)
        if (t.name == name)
            return t.value;
    throw ValidationError("no parameter named " + std::string(name));
}

Eigen::MatrixXd& ParamSet::at(std::string_view name) {
    return const_cast<Eigen::MatrixXd&>(std::as_const(*this).at(name));
}

Eigen::Index ParamSet::scalar_count() const {
    Eigen::Index n = 0;
    for (const auto& t : tensors_)
        n += t.value.size();
    return n;
}

ParamSet ParamSet::zeros_like() const {
    ParamSet z;
    for (const auto& t : tensors_)
        z.tensors_.push_back({t.name, Eigen::MatrixXd::Zero(t.value.rows(), t.value.cols())});
    return z;
}

bool ParamSet::same_layout(const ParamSet& other) const {
    if (size() != other.size())
        return false;
    for (std::size_t i = 0; i < size(); ++i) {
        const auto& a = tensors_[i];
        const auto& b = other.tensors_[i];
        if (a.name != b.name || a.value.rows() != b.value.rows() || a.value.cols() != b.value.cols())
            return false;
    }
    return true;
}

void ParamSet::axpy(double a, const ParamSet& x) {
    if (!same_layout(x))
        throw ShapeError("ParamSet::axpy: layout mismatch");
    for (std::size_t i = 0; i < size(); ++i)
        tensors_[i].value += a * x.tensors_[i].value;
}

double ParamSet::squared_norm() const {
    double s = 0;
    for (const auto& t : tensors_)
        s += t.value.squaredNorm();
    return s;
}

bool ParamSet::all_finite() const {
    for (const auto& t : tensors_)
        if (!t.value.allFinite())
            return false;
    return true;
}

std::string ParamSet::digest() const { return sha256_hex(serialize(*this)); }

void DiffusionBackend::save_checkpoint(const ParamSet& params, const std::filesystem::path& path) const {
    if (!params.same_layout(pretrained()))
        throw ShapeError("checkpoint layout does not match backend " + id());
    atomic_write(path, serialize(params));
}

ParamSet DiffusionBackend::load_checkpoint(const std::filesystem::path& path) const {
    const std::string where = path.string();
    const std::string in = read_file(path);
    if (in.size() < sizeof(kMagic) || std::memcmp(in.data(), kMagic, sizeof(kMagic)) != 0)
        throw ParseError("not a parameter checkpoint", where);
    std::size_t pos = sizeof(kMagic);
    const auto count = get<std::uint64_t>(in, pos, where);
    ParamSet p;
    for (std::uint64_t i = 0; i < count; ++i) {
        const auto len = get<std::uint64_t>(in, pos, where);
        if (pos + len > in.size())
            throw ParseError("truncated checkpoint", where);
        std::string name = in.substr(pos, len);
        pos += len;
        const auto rows = get<std::int64_t>(in, pos, where);
        const auto cols = get<std::int64_t>(in, pos, where);
        const std::size_t bytes = sizeof(double) * static_cast<std::size_t>(rows * cols);
        if (rows < 0 || cols < 0 || pos + bytes > in.size())
            throw ParseError("truncated checkpoint", where);
        Eigen::MatrixXd m(rows, cols);
        std::memcpy(m.data(), in.data() + pos, bytes);
        pos += bytes;
        p.add(std::move(name), std::move(m));
    }
    if (!p.same_layout(pretrained()))
        throw ShapeError("checkpoint " + where + " does not match backend " + id());
    return p;
}

} // namespace crce
