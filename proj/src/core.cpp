#include "expredit/core.hpp"

#include <algorithm>
#include <cmath>

namespace expredit {

int au_index(std::string_view name) {
    for (std::size_t j = 0; j < kAUNames.size(); ++j) {
        if (kAUNames[j] == name) return static_cast<int>(j);
    }
    return -1;
}

AUVector AUVector::clamped(std::vector<double> values, double max_intensity) {
    for (std::size_t j = 0; j < values.size(); ++j) {
        if (!std::isfinite(values[j])) {
            throw DataError("AU intensity at index " + std::to_string(j) + " is not finite");
        }
        values[j] = std::clamp(values[j], 0.0, max_intensity);
    }
    return AUVector(std::move(values));
}

AUVector AUVector::zeros(int d) { return AUVector(std::vector<double>(static_cast<std::size_t>(d), 0.0)); }

AUVector AUVector::with(std::size_t j, double value, double max_intensity) const {
    if (j >= values_.size()) throw DataError("AU index " + std::to_string(j) + " out of range");
    auto copy = values_;
    copy[j] = value;
    return clamped(std::move(copy), max_intensity);
}

FaceImage FaceImage::from_hwc(int size, std::vector<float> pixels) {
    if (size <= 0 || pixels.size() != static_cast<std::size_t>(size) * size * 3) {
        throw DataError("image buffer of " + std::to_string(pixels.size()) + " values does not match " +
                        std::to_string(size) + "x" + std::to_string(size) + "x3");
    }
    for (auto& p : pixels) {
        if (!std::isfinite(p)) throw DataError("image contains a non-finite pixel");
        p = std::clamp(p, -1.0f, 1.0f);
    }
    FaceImage image;
    image.size_ = size;
    image.pixels_ = std::move(pixels);
    return image;
}

FaceImage FaceImage::constant(int size, float value) {
    return from_hwc(size, std::vector<float>(static_cast<std::size_t>(size) * size * 3, value));
}

IdentityLabel IdentityLabel::checked(int index, int n) {
    if (index < 0 || index >= n) {
        throw DataError("identity label " + std::to_string(index) + " outside [0, " + std::to_string(n) + ")");
    }
    return IdentityLabel{index};
}

std::vector<int> au_discretize(const AUVector& u, int max_level) {
    std::vector<int> levels(u.size());
    for (std::size_t j = 0; j < u.size(); ++j) {
        // std::round is half-away-from-zero regardless of the FP rounding mode.
        const auto level = static_cast<int>(std::round(u[j]));
        levels[j] = std::clamp(level, 0, max_level);
    }
    return levels;
}

AUVector interpolate_au(const AUVector& source, const AUVector& target, double alpha) {
    if (!(alpha >= 0.0 && alpha <= 1.0)) {
        throw Error("interpolation alpha " + std::to_string(alpha) + " outside [0, 1]");
    }
    if (source.size() != target.size()) throw Error("AU vectors differ in length");
    std::vector<double> out(source.size());
    for (std::size_t j = 0; j < out.size(); ++j) {
        // Endpoints are exact: alpha==0 gives source, alpha==1 gives target.
        out[j] = alpha == 1.0 ? target[j] : source[j] + alpha * (target[j] - source[j]);
    }
    return AUVector::clamped(std::move(out));
}

}  // namespace expredit
