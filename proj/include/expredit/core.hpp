#pragma once

#include <array>
#include <cstddef>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace expredit {

// Action Units in annotation order. Index j of an AUVector refers to kAUNames[j].
inline constexpr std::array<std::string_view, 17> kAUNames = {
    "AU01", "AU02", "AU04", "AU05", "AU06", "AU07", "AU09", "AU10", "AU12",
    "AU14", "AU15", "AU17", "AU20", "AU23", "AU25", "AU26", "AU45"};

inline constexpr int kNumAUs = static_cast<int>(kAUNames.size());
inline constexpr int kMaxIntensity = 5;

// Returns the index of an AU name ("AU12" -> 8), or -1 if unknown.
int au_index(std::string_view name);

class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class ConfigError : public Error {
public:
    using Error::Error;
};

class DataError : public Error {
public:
    using Error::Error;
};

/// Continuous AU intensities, one per entry of kAUNames, each in [0, m].
class AUVector {
public:
    AUVector() = default;

    /// Clamps every entry into [0, max_intensity]. Throws on non-finite values.
    static AUVector clamped(std::vector<double> values, double max_intensity = kMaxIntensity);
    static AUVector zeros(int d = kNumAUs);

    std::size_t size() const { return values_.size(); }
    double operator[](std::size_t j) const { return values_[j]; }
    std::span<const double> values() const { return values_; }

    AUVector with(std::size_t j, double value, double max_intensity = kMaxIntensity) const;

    friend bool operator==(const AUVector&, const AUVector&) = default;

private:
    explicit AUVector(std::vector<double> values) : values_(std::move(values)) {}
    std::vector<double> values_;
};

/// Square RGB image stored row-major HWC, values in [-1, 1].
class FaceImage {
public:
    FaceImage() = default;

    /// Clamps into [-1, 1]; throws on non-finite pixels or a size mismatch.
    static FaceImage from_hwc(int size, std::vector<float> pixels);
    static FaceImage constant(int size, float value);

    int size() const { return size_; }
    float at(int y, int x, int c) const { return pixels_[(static_cast<std::size_t>(y) * size_ + x) * 3 + c]; }
    std::span<const float> pixels() const { return pixels_; }

    friend bool operator==(const FaceImage&, const FaceImage&) = default;

private:
    int size_ = 0;
    std::vector<float> pixels_;
};

struct LatentCode {
    std::vector<float> values;
};

struct IdentityLabel {
    int index = 0;

    /// Throws unless 0 <= index < n.
    static IdentityLabel checked(int index, int n);

    friend bool operator==(const IdentityLabel&, const IdentityLabel&) = default;
};

/// Nearest integer level per AU; ties round half away from zero.
std::vector<int> au_discretize(const AUVector& u, int max_level = kMaxIntensity);

/// u_i + alpha * (u_t - u_i). alpha must lie in [0, 1].
AUVector interpolate_au(const AUVector& source, const AUVector& target, double alpha);

}  // namespace expredit
