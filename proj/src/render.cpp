#include <algorithm>
#include <array>
#include <cmath>

#include "expredit/data.hpp"

namespace expredit {

namespace {

struct Rgb {
    double r, g, b;
};

Rgb lerp(const Rgb& a, const Rgb& b, double t) {
    return {a.r + t * (b.r - a.r), a.g + t * (b.g - a.g), a.b + t * (b.b - a.b)};
}

// Coverage of a signed distance (negative inside) with a one-pixel linear ramp.
double coverage(double sd, double pixel) { return std::clamp(0.5 - sd / pixel, 0.0, 1.0); }

// Approximate signed distance to an axis-aligned ellipse, scaled by the minor radius.
double ellipse_sd(double x, double y, double cx, double cy, double rx, double ry) {
    const double dx = (x - cx) / rx;
    const double dy = (y - cy) / ry;
    return (std::sqrt(dx * dx + dy * dy) - 1.0) * std::min(rx, ry);
}

double segment_sd(double x, double y, double ax, double ay, double bx, double by, double radius) {
    const double px = x - ax, py = y - ay;
    const double vx = bx - ax, vy = by - ay;
    const double h = std::clamp((px * vx + py * vy) / (vx * vx + vy * vy), 0.0, 1.0);
    const double dx = px - h * vx, dy = py - h * vy;
    return std::sqrt(dx * dx + dy * dy) - radius;
}

double blob(double x, double y, double cx, double cy, double sigma) {
    const double r2 = (x - cx) * (x - cx) + (y - cy) * (y - cy);
    return std::exp(-r2 / (2.0 * sigma * sigma));
}

std::uint64_t splitmix(std::uint64_t x) {
    x += 0x9E3779B97F4A7C15ULL;
    x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
    x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
    return x ^ (x >> 31);
}

double hash_unit(std::uint64_t seed, std::uint64_t salt) {
    return static_cast<double>(splitmix(seed * 0x100000001B3ULL + salt) >> 11) * 0x1.0p-53;
}

// Geometry constants in normalized coordinates ([-1, 1] on both axes, y down).
constexpr double kFaceCy = 0.05;
constexpr double kEyeY = -0.12;
constexpr double kBrowY = -0.27;
constexpr double kMouthY = 0.42;

// Indices into kAUNames.
enum AU : int { AU01, AU02, AU04, AU05, AU06, AU07, AU09, AU10, AU12, AU14, AU15, AU17, AU20, AU23, AU25, AU26, AU45 };

}  // namespace

FaceImage render_synthetic_face(const SyntheticFaceParams& p, const AUVector& u, int size) {
    if (u.size() != static_cast<std::size_t>(kNumAUs)) throw DataError("renderer needs a 17-entry AU vector");
    std::array<double, kNumAUs> a{};
    for (int j = 0; j < kNumAUs; ++j) a[j] = std::clamp(u[j], 0.0, 5.0) / 5.0;

    const double pixel = 2.0 / size;
    const Rgb background{0.18, 0.22, 0.30};
    const Rgb skin = lerp(Rgb{0.96, 0.84, 0.74}, Rgb{0.42, 0.28, 0.18}, std::clamp(p.skin_tone, 0.0, 1.0));
    const Rgb hair{0.10 + 0.5 * hash_unit(p.identity_seed, 1), 0.07 + 0.35 * hash_unit(p.identity_seed, 2),
                   0.05 + 0.30 * hash_unit(p.identity_seed, 3)};
    const Rgb brow = lerp(hair, Rgb{0.05, 0.04, 0.03}, 0.5);
    const Rgb lip{0.72, 0.30, 0.32};
    const Rgb mouth_inside{0.22, 0.05, 0.08};
    const Rgb sclera{0.95, 0.95, 0.93};
    const Rgb iris{0.16, 0.12, 0.10};

    const double face_rx = 0.58 * p.face_aspect;
    const double face_ry = 0.74 + 0.05 * a[AU26];

    // Eyes.
    const double eye_hw = 0.11;
    const double eye_hh = 0.055 * (1.0 + 0.6 * a[AU05]) * (1.0 - 0.25 * a[AU07]) * (1.0 - 0.1 * a[AU06]);
    // The closing lid covers the eye from the top down.
    const double lid_y = kEyeY - eye_hh + 2.0 * eye_hh * 0.95 * a[AU45];
    const Rgb lid = lerp(skin, Rgb{0.0, 0.0, 0.0}, 0.2);

    // Mouth.
    const double mouth_cy = kMouthY + 0.03 * a[AU26];
    const double mouth_hw = 0.17 * (1.0 + 0.3 * a[AU20] + 0.12 * a[AU12]);
    const double corner_lift = -0.08 * a[AU12] + 0.07 * a[AU15];
    const double opening = 0.008 + 0.06 * a[AU25] + 0.05 * a[AU26];
    const double lip_thickness = 0.03 * (1.0 - 0.5 * a[AU23]);

    std::vector<float> out(static_cast<std::size_t>(size) * size * 3);
    for (int py = 0; py < size; ++py) {
        const double y = (py + 0.5) * pixel - 1.0;
        for (int px = 0; px < size; ++px) {
            const double x = (px + 0.5) * pixel - 1.0;
            Rgb c = background;

            const double hair_cov = coverage(ellipse_sd(x, y, 0.0, -0.12, 0.66 * p.face_aspect, 0.80), pixel);
            c = lerp(c, hair, hair_cov);

            const double face_cov = coverage(ellipse_sd(x, y, 0.0, kFaceCy, face_rx, face_ry), pixel);
            if (face_cov > 0.0) {
                Rgb f = skin;
                // Cheek raise: warm tint on both cheeks.
                const double cheeks = blob(x, y, -0.32, 0.18, 0.09) + blob(x, y, 0.32, 0.18, 0.09);
                f = lerp(f, Rgb{0.85, 0.35, 0.35}, 0.45 * a[AU06] * cheeks);
                // Shading-only AUs.
                f = lerp(f, Rgb{0.30, 0.20, 0.15}, 0.40 * a[AU09] * blob(x, y, 0.0, -0.02, 0.05));
                f = lerp(f, Rgb{0.55, 0.25, 0.25}, 0.40 * a[AU10] * blob(x, y, 0.0, 0.32, 0.04));
                const double dimples = blob(x, y, -(mouth_hw + 0.04), mouth_cy + corner_lift, 0.03) +
                                       blob(x, y, mouth_hw + 0.04, mouth_cy + corner_lift, 0.03);
                f = lerp(f, Rgb{0.25, 0.15, 0.12}, 0.45 * a[AU14] * dimples);
                f = lerp(f, Rgb{0.35, 0.25, 0.20}, 0.40 * a[AU17] * blob(x, y, 0.0, 0.64, 0.05));
                const double creases = blob(x, y, -(mouth_hw + 0.03), mouth_cy - 0.10, 0.03) +
                                       blob(x, y, mouth_hw + 0.03, mouth_cy - 0.10, 0.03);
                f = lerp(f, Rgb{0.40, 0.25, 0.20}, 0.40 * a[AU12] * creases);
                const double corner_shadows = blob(x, y, -mouth_hw, mouth_cy + 0.09, 0.03) + blob(x, y, mouth_hw, mouth_cy + 0.09, 0.03);
                f = lerp(f, Rgb{0.30, 0.25, 0.30}, 0.40 * a[AU15] * corner_shadows);
                f = lerp(f, Rgb{0.30, 0.22, 0.20}, 0.30 * a[AU07] * (blob(x, y, -p.eye_spacing, kEyeY + 0.09, 0.035) +
                                                                   blob(x, y, p.eye_spacing, kEyeY + 0.09, 0.035)));

                for (const double side : {-1.0, 1.0}) {
                    const double ex = side * p.eye_spacing;
                    const double eye_cov = coverage(ellipse_sd(x, y, ex, kEyeY, eye_hw, eye_hh), pixel);
                    if (eye_cov > 0.0) {
                        const double iris_cov = coverage(std::hypot(x - ex, y - kEyeY) - 0.045, pixel);
                        const double lid_cov = coverage(y - lid_y, pixel);
                        f = lerp(f, lerp(lerp(sclera, iris, iris_cov), lid, lid_cov), eye_cov);
                    }
                    // Brow as a capsule from inner to outer end.
                    const double inner_x = side * (p.eye_spacing - 0.09 - 0.03 * a[AU04]);
                    const double outer_x = side * (p.eye_spacing + 0.12);
                    const double inner_y = kBrowY - 0.08 * a[AU01] + 0.07 * a[AU04];
                    const double outer_y = kBrowY - 0.08 * a[AU02] + 0.02 * a[AU04];
                    f = lerp(f, brow, coverage(segment_sd(x, y, inner_x, inner_y, outer_x, outer_y, 0.025), pixel));
                }

                // Mouth: centreline bends with the corners; lips part around it.
                const double t = x / mouth_hw;
                const double width_cov = coverage(std::abs(x) - mouth_hw, pixel);
                if (width_cov > 0.0) {
                    const double tt = std::min(t * t, 1.0);
                    const double centre = mouth_cy + corner_lift * tt;
                    const double upper = centre - (0.4 * opening + 0.025 * a[AU10]) * (1.0 - tt);
                    const double lower = centre + 0.6 * opening * (1.0 - tt);
                    const double inside = coverage(upper - y, pixel) * coverage(y - lower, pixel);
                    const double lips = coverage(upper - lip_thickness - y, pixel) * coverage(y - lower - lip_thickness, pixel);
                    f = lerp(f, lip, lips * width_cov);
                    f = lerp(f, mouth_inside, inside * width_cov);
                }
                c = lerp(c, f, face_cov);
            }

            float* dst = &out[(static_cast<std::size_t>(py) * size + px) * 3];
            dst[0] = static_cast<float>(2.0 * c.r - 1.0);
            dst[1] = static_cast<float>(2.0 * c.g - 1.0);
            dst[2] = static_cast<float>(2.0 * c.b - 1.0);
        }
    }
    return FaceImage::from_hwc(size, std::move(out));
}

namespace {

int to_pixel(double coord, int size) { return std::clamp(static_cast<int>(std::floor((coord + 1.0) * 0.5 * size)), 0, size); }

}  // namespace

PixelBox mouth_box(int size) {
    return {to_pixel(-0.34, size), to_pixel(0.28, size), to_pixel(0.34, size), to_pixel(0.66, size)};
}

PixelBox background_box(int size) { return {0, 0, size / 8, size / 8}; }

double mean_abs_diff(const FaceImage& a, const FaceImage& b, const PixelBox& box) {
    if (a.size() != b.size()) throw DataError("image sizes differ");
    double sum = 0.0;
    std::size_t count = 0;
    for (int y = box.y0; y < box.y1; ++y) {
        for (int x = box.x0; x < box.x1; ++x) {
            for (int c = 0; c < 3; ++c) {
                sum += std::abs(static_cast<double>(a.at(y, x, c)) - b.at(y, x, c));
                ++count;
            }
        }
    }
    return count ? sum / static_cast<double>(count) : 0.0;
}

SyntheticFaceParams synthetic_identity(int index, int n_identities, std::uint64_t seed) {
    SyntheticFaceParams p;
    p.identity_seed = splitmix(seed ^ (0xA24BAED4963EE407ULL * static_cast<std::uint64_t>(index + 1)));
    // Skin tones are spread evenly so identities stay separable.
    const double slot = (index + 0.5) / std::max(n_identities, 1);
    p.skin_tone = std::clamp(slot + 0.15 / std::max(n_identities, 1) * (hash_unit(p.identity_seed, 10) - 0.5), 0.0, 1.0);
    p.face_aspect = 0.85 + 0.25 * hash_unit(p.identity_seed, 11);
    p.eye_spacing = 0.22 + 0.10 * hash_unit(p.identity_seed, 12);
    return p;
}

}  // namespace expredit
