#include "fedsim/params.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iterator>
#include <stdexcept>
#include <string>

#include "fedsim/tensor.hpp"

namespace fedsim {

std::string shape_to_string(const Shape& shape) {
    std::string s = "(";
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) s += ", ";
        s += std::to_string(shape[i]);
    }
    return s + ")";
}

ParamVector::ParamVector(std::vector<std::size_t> segment_sizes) : sizes_(std::move(segment_sizes)) {
    offsets_.reserve(sizes_.size());
    std::size_t total = 0;
    for (std::size_t n : sizes_) {
        offsets_.push_back(total);
        total += n;
    }
    data_.assign(total, 0.0f);
}

void ParamVector::copy_segment_from(const ParamVector& other, std::size_t s) {
    if (!same_layout(other)) throw std::invalid_argument("copy_segment_from: layout mismatch");
    auto src = other.segment(s);
    std::copy(src.begin(), src.end(), segment(s).begin());
}

bool bit_equal(std::span<const float> a, std::span<const float> b) {
    return a.size() == b.size() && (a.empty() || std::memcmp(a.data(), b.data(), a.size_bytes()) == 0);
}

bool bit_equal(const ParamVector& a, const ParamVector& b) {
    return a.same_layout(b) && bit_equal(a.values(), b.values());
}

ParamMask ParamMask::complement() const {
    ParamMask m{include};
    m.include.flip();
    return m;
}

void copy_masked(ParamVector& dst, const ParamVector& src, const ParamMask& mask) {
    if (!dst.same_layout(src) || mask.num_segments() != dst.num_segments())
        throw std::invalid_argument("copy_masked: layout mismatch");
    for (std::size_t s = 0; s < mask.num_segments(); ++s)
        if (mask[s]) dst.copy_segment_from(src, s);
}

std::vector<std::optional<double>> layer_cosine_similarity(const ParamVector& a, const ParamVector& b) {
    if (!a.same_layout(b)) throw std::invalid_argument("layer_cosine_similarity: layout mismatch");
    std::vector<std::optional<double>> out;
    out.reserve(a.num_segments());
    for (std::size_t s = 0; s < a.num_segments(); ++s) {
        auto x = a.segment(s);
        auto y = b.segment(s);
        double dot = 0, nx = 0, ny = 0;
        for (std::size_t i = 0; i < x.size(); ++i) {
            dot += double(x[i]) * y[i];
            nx += double(x[i]) * x[i];
            ny += double(y[i]) * y[i];
        }
        if (nx == 0.0 || ny == 0.0) {
            out.push_back(std::nullopt);
        } else if (dot == nx && dot == ny) {
            out.push_back(1.0);  // ||x - y||^2 = nx + ny - 2 dot = 0
        } else {
            out.push_back(std::clamp(dot / (std::sqrt(nx) * std::sqrt(ny)), -1.0, 1.0));
        }
    }
    return out;
}

double l2_distance(const ParamVector& a, const ParamVector& b) {
    if (!a.same_layout(b)) throw std::invalid_argument("l2_distance: layout mismatch");
    double acc = 0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        const double d = double(a[i]) - b[i];
        acc += d * d;
    }
    return std::sqrt(acc);
}

bool all_finite(const ParamVector& p) {
    for (float v : p.values())
        if (!std::isfinite(v)) return false;
    return true;
}

namespace {

void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

std::uint32_t get_u32(std::span<const std::uint8_t> in, std::size_t pos) {
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= std::uint32_t(in[pos + i]) << (8 * i);
    return v;
}

}  // namespace

std::vector<std::uint8_t> serialize(const ParamVector& p) {
    std::vector<std::uint8_t> out;
    out.reserve(4 + 4 * p.num_segments() + 4 * p.size());
    put_u32(out, static_cast<std::uint32_t>(p.num_segments()));
    for (std::size_t n : p.segment_sizes()) put_u32(out, static_cast<std::uint32_t>(n));
    for (float v : p.values()) put_u32(out, std::bit_cast<std::uint32_t>(v));
    return out;
}

ParamVector deserialize(std::span<const std::uint8_t> blob) {
    if (blob.size() < 4) throw std::runtime_error("param blob truncated: missing header");
    const std::uint32_t count = get_u32(blob, 0);
    if (blob.size() < 4 + 4ull * count) throw std::runtime_error("param blob truncated: segment table");
    std::vector<std::size_t> sizes(count);
    std::size_t total = 0;
    for (std::uint32_t s = 0; s < count; ++s) {
        sizes[s] = get_u32(blob, 4 + 4 * s);
        total += sizes[s];
    }
    const std::size_t body = 4 + 4ull * count;
    if (blob.size() != body + 4 * total)
        throw std::runtime_error("param blob size " + std::to_string(blob.size()) + " does not match segment table (" +
                                 std::to_string(body + 4 * total) + " expected)");
    ParamVector p(std::move(sizes));
    auto v = p.values();
    for (std::size_t i = 0; i < total; ++i) v[i] = std::bit_cast<float>(get_u32(blob, body + 4 * i));
    return p;
}

void save_params(const ParamVector& p, const std::filesystem::path& path) {
    const auto blob = serialize(p);
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot open " + path.string() + " for writing");
    out.write(reinterpret_cast<const char*>(blob.data()), static_cast<std::streamsize>(blob.size()));
    if (!out) throw std::runtime_error("write failed: " + path.string());
}

ParamVector load_params(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open " + path.string());
    std::vector<std::uint8_t> blob((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    try {
        return deserialize(blob);
    } catch (const std::exception& e) {
        throw std::runtime_error(path.string() + ": " + e.what());
    }
}

}  // namespace fedsim
