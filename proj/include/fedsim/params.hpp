#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <vector>

namespace fedsim {

/// Flat container of every trainable scalar of a network, split into one
/// contiguous segment per parameterized layer (weights followed by bias).
/// This is the unit that is broadcast, trained locally and aggregated.
class ParamVector {
public:
    ParamVector() = default;
    explicit ParamVector(std::vector<std::size_t> segment_sizes);

    std::size_t size() const { return data_.size(); }
    std::size_t num_segments() const { return sizes_.size(); }
    std::size_t segment_size(std::size_t s) const { return sizes_[s]; }
    std::size_t segment_offset(std::size_t s) const { return offsets_[s]; }
    const std::vector<std::size_t>& segment_sizes() const { return sizes_; }

    std::span<float> segment(std::size_t s) { return {data_.data() + offsets_[s], sizes_[s]}; }
    std::span<const float> segment(std::size_t s) const { return {data_.data() + offsets_[s], sizes_[s]}; }

    std::span<float> values() { return data_; }
    std::span<const float> values() const { return data_; }

    float& operator[](std::size_t i) { return data_[i]; }
    float operator[](std::size_t i) const { return data_[i]; }

    bool same_layout(const ParamVector& other) const { return sizes_ == other.sizes_; }

    /// Copies segment s from other (layouts must match).
    void copy_segment_from(const ParamVector& other, std::size_t s);

private:
    std::vector<std::size_t> sizes_;
    std::vector<std::size_t> offsets_;
    std::vector<float> data_;
};

/// Bitwise equality of layout and every scalar (distinguishes -0 from +0 and NaN payloads).
bool bit_equal(const ParamVector& a, const ParamVector& b);
bool bit_equal(std::span<const float> a, std::span<const float> b);

/// Per-segment selection of which parameters a step touches.
struct ParamMask {
    std::vector<bool> include;

    static ParamMask all(std::size_t segments) { return {std::vector<bool>(segments, true)}; }
    static ParamMask none(std::size_t segments) { return {std::vector<bool>(segments, false)}; }

    std::size_t num_segments() const { return include.size(); }
    bool operator[](std::size_t s) const { return include[s]; }
    ParamMask complement() const;
};

/// Overwrites the segments selected by mask in dst with those of src.
void copy_masked(ParamVector& dst, const ParamVector& src, const ParamMask& mask);

/// Cosine similarity of each layer segment; nullopt where either segment has zero norm.
std::vector<std::optional<double>> layer_cosine_similarity(const ParamVector& a, const ParamVector& b);

/// Global Euclidean distance over all scalars.
double l2_distance(const ParamVector& a, const ParamVector& b);

bool all_finite(const ParamVector& p);

// Checkpoint blob: u32 segment count, u32 length per segment, then the
// scalars as little-endian IEEE-754 binary32.
std::vector<std::uint8_t> serialize(const ParamVector& p);
ParamVector deserialize(std::span<const std::uint8_t> blob);
void save_params(const ParamVector& p, const std::filesystem::path& path);
ParamVector load_params(const std::filesystem::path& path);

}  // namespace fedsim
