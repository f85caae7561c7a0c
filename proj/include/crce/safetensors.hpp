#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

namespace crce {

/// Reader for the safetensors container: an 8-byte little-endian header size, a
/// JSON header, then raw tensor bytes. F32, F16, BF16 and F64 are supported.
class SafetensorsFile {
public:
    struct Info {
        std::string dtype;
        std::vector<std::int64_t> shape;
        std::uint64_t begin = 0;
        std::uint64_t end = 0;
    };

    explicit SafetensorsFile(const std::filesystem::path& path);

    bool contains(const std::string& name) const { return tensors_.count(name) != 0; }
    const Info& info(const std::string& name) const;
    std::vector<std::string> names() const;

    /// Flat values in file (row-major) order, converted to double.
    std::vector<double> read(const std::string& name) const;

    /// 2-D tensor as a matrix with the stored [rows, cols] layout.
    template <typename Scalar>
    Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic> matrix(const std::string& name) const;

    template <typename Scalar>
    Eigen::Matrix<Scalar, Eigen::Dynamic, 1> vector(const std::string& name) const;

private:
    std::filesystem::path path_;
    std::uint64_t data_start_ = 0;
    std::map<std::string, Info> tensors_;
};

template <typename Scalar>
Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic> SafetensorsFile::matrix(const std::string& name) const {
    const auto& i = info(name);
    if (i.shape.size() != 2)
        throw std::runtime_error("tensor " + name + " is not 2-D");
    auto flat = read(name);
    using RowMajor = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
    Eigen::Map<const RowMajor> m(flat.data(), i.shape[0], i.shape[1]);
    return m.template cast<Scalar>();
}

template <typename Scalar>
Eigen::Matrix<Scalar, Eigen::Dynamic, 1> SafetensorsFile::vector(const std::string& name) const {
    auto flat = read(name);
    return Eigen::Map<const Eigen::VectorXd>(flat.data(), static_cast<Eigen::Index>(flat.size())).template cast<Scalar>();
}

} // namespace crce
