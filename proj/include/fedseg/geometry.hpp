#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <limits>
#include <vector>

#include <json.hpp>

#include "fedseg/errors.hpp"
#include "fedseg/mask.hpp"

namespace fedseg {

using Pixel = std::array<int, 2>;  // (row, col)

// Closed boundary of one 8-connected foreground component. Points start at
// the topmost-then-leftmost boundary pixel and run clockwise (as displayed,
// row axis pointing down). Normals are unit vectors pointing toward the
// background.
struct Contour {
    std::vector<Pixel> points;
    std::vector<std::array<double, 2>> normals;  // (drow, dcol), filled by compute_normals
    int origin_index = 0;
};

// Negative inside the foreground, zero on boundary pixels, positive outside.
struct SignedDistanceField {
    int height = 0;
    int width = 0;
    std::vector<double> values;

    double at(int r, int c) const { return values[static_cast<std::size_t>(r) * width + c]; }
};

// Pixel bands hugging the annotation contour. Contour pixels belong to inner.
struct BandRegions {
    std::vector<Pixel> inner;
    std::vector<Pixel> outer;
    int d = 0;
};

namespace detail {

// Clockwise 8-neighbor ring starting at West (screen orientation, row down).
inline constexpr std::array<Pixel, 8> kRing = {{{0, -1},   // W
                                                {-1, -1},  // NW
                                                {-1, 0},   // N
                                                {-1, 1},   // NE
                                                {0, 1},    // E
                                                {1, 1},    // SE
                                                {1, 0},    // S
                                                {1, -1}}};  // SW

inline int ring_index(int dr, int dc) {
    for (int i = 0; i < 8; ++i)
        if (kRing[i][0] == dr && kRing[i][1] == dc) return i;
    throw NumericError("ring_index: not an 8-neighbor offset");
}

inline bool foreground(const BinaryMask& m, int r, int c) { return m.in_bounds(r, c) && m.at(r, c); }

}  // namespace detail

// 8-connected foreground components in row-major discovery order. Each
// component's first pixel is its topmost-then-leftmost one.
inline std::vector<std::vector<Pixel>> connected_components(const BinaryMask& mask) {
    const int h = mask.height();
    const int w = mask.width();
    std::vector<std::uint8_t> seen(static_cast<std::size_t>(h) * w, 0);
    std::vector<std::vector<Pixel>> components;
    std::vector<Pixel> stack;
    for (int r = 0; r < h; ++r) {
        for (int c = 0; c < w; ++c) {
            if (!mask.at(r, c) || seen[static_cast<std::size_t>(r) * w + c]) continue;
            std::vector<Pixel> comp;
            stack.clear();
            stack.push_back({r, c});
            seen[static_cast<std::size_t>(r) * w + c] = 1;
            while (!stack.empty()) {
                Pixel p = stack.back();
                stack.pop_back();
                comp.push_back(p);
                for (const Pixel& d : detail::kRing) {
                    const int nr = p[0] + d[0];
                    const int nc = p[1] + d[1];
                    if (!mask.in_bounds(nr, nc) || !mask.at(nr, nc)) continue;
                    std::uint8_t& flag = seen[static_cast<std::size_t>(nr) * w + nc];
                    if (!flag) {
                        flag = 1;
                        stack.push_back({nr, nc});
                    }
                }
            }
            // DFS order is arbitrary; sort so downstream iteration is stable
            // and comp.front() is the topmost-then-leftmost pixel.
            std::sort(comp.begin(), comp.end());
            components.push_back(std::move(comp));
        }
    }
    return components;
}

namespace detail {

// Moore-neighbor tracing from the topmost-then-leftmost pixel, clockwise,
// stopping when the initial move out of the start pixel repeats (Jacob's
// criterion). Revisited pixels (1-px spurs) are recorded once.
inline std::vector<Pixel> trace_component_boundary(const BinaryMask& mask, Pixel start) {
    std::vector<Pixel> points{start};
    const int w = mask.width();
    std::vector<std::uint8_t> visited(static_cast<std::size_t>(mask.height()) * w, 0);
    visited[static_cast<std::size_t>(start[0]) * w + start[1]] = 1;

    Pixel cur = start;
    Pixel back = {start[0], start[1] - 1};  // West of the start pixel is background
    int first_dir = -1;
    const long max_steps = 4L * (mask.height() * w + mask.height() + w);
    for (long step = 0; step < max_steps; ++step) {
        const int sidx = ring_index(back[0] - cur[0], back[1] - cur[1]);
        int found = -1;
        for (int t = 1; t <= 8; ++t) {
            const int m = (sidx + t) % 8;
            if (foreground(mask, cur[0] + kRing[m][0], cur[1] + kRing[m][1])) {
                found = m;
                break;
            }
        }
        if (found < 0) break;  // isolated pixel
        if (first_dir < 0) {
            first_dir = found;
        } else if (cur == start && found == first_dir) {
            break;
        }
        const int before = (found + 7) % 8;
        back = {cur[0] + kRing[before][0], cur[1] + kRing[before][1]};
        cur = {cur[0] + kRing[found][0], cur[1] + kRing[found][1]};
        std::uint8_t& flag = visited[static_cast<std::size_t>(cur[0]) * w + cur[1]];
        if (!flag) {
            flag = 1;
            points.push_back(cur);
        }
    }
    return points;
}

}  // namespace detail

// One contour per 8-connected foreground component (outer boundary only;
// interior holes are ignored). Components whose boundary has fewer than 8
// pixels raise DegenerateComponentError, or are skipped when drop_degenerate
// is set.
inline std::vector<Contour> trace_contours(const BinaryMask& mask, bool drop_degenerate = false) {
    if (mask.height() < 8 || mask.width() < 8)
        throw ShapeMismatchError("trace_contours: mask must be at least 8x8");
    if (mask.empty_foreground()) throw EmptyMaskError("trace_contours: no foreground pixels");

    std::vector<Contour> contours;
    for (const auto& comp : connected_components(mask)) {
        std::vector<Pixel> boundary = detail::trace_component_boundary(mask, comp.front());
        if (boundary.size() < 8) {
            if (drop_degenerate) continue;
            throw DegenerateComponentError("trace_contours: component boundary has fewer than 8 pixels");
        }
        Contour contour;
        contour.points = std::move(boundary);
        contour.origin_index = 0;
        contours.push_back(std::move(contour));
    }
    if (contours.empty() && drop_degenerate)
        throw EmptyMaskError("trace_contours: all components degenerate");
    return contours;
}

namespace detail {

// 1-D squared distance transform (lower envelope of parabolas).
inline void dt1d(const std::vector<double>& f, std::vector<double>& d, std::vector<int>& v,
                 std::vector<double>& z, int n) {
    constexpr double kInf = 1e18;
    int k = 0;
    v[0] = 0;
    z[0] = -kInf;
    z[1] = kInf;
    for (int q = 1; q < n; ++q) {
        double s = ((f[q] + static_cast<double>(q) * q) - (f[v[k]] + static_cast<double>(v[k]) * v[k])) /
                   (2.0 * q - 2.0 * v[k]);
        while (s <= z[k]) {
            --k;
            s = ((f[q] + static_cast<double>(q) * q) - (f[v[k]] + static_cast<double>(v[k]) * v[k])) /
                (2.0 * q - 2.0 * v[k]);
        }
        ++k;
        v[k] = q;
        z[k] = s;
        z[k + 1] = kInf;
    }
    k = 0;
    for (int q = 0; q < n; ++q) {
        while (z[k + 1] < q) ++k;
        const double dq = q - v[k];
        d[q] = dq * dq + f[v[k]];
    }
}

}  // namespace detail

inline bool is_boundary_pixel(const BinaryMask& mask, int r, int c) {
    if (!mask.at(r, c)) return false;
    for (const Pixel& d : detail::kRing) {
        const int nr = r + d[0];
        const int nc = c + d[1];
        if (mask.in_bounds(nr, nc) && !mask.at(nr, nc)) return true;
    }
    return false;
}

// Exact Euclidean distance to the nearest boundary pixel, negated inside the
// foreground. Boundary pixels map to exactly 0.
inline SignedDistanceField signed_distance(const BinaryMask& mask) {
    if (mask.empty_foreground()) throw EmptyMaskError("signed_distance: no foreground pixels");
    if (mask.full_foreground()) throw FullMaskError("signed_distance: no background pixels");

    const int h = mask.height();
    const int w = mask.width();
    constexpr double kInf = 1e18;
    std::vector<double> sq(static_cast<std::size_t>(h) * w, kInf);
    for (int r = 0; r < h; ++r)
        for (int c = 0; c < w; ++c)
            if (is_boundary_pixel(mask, r, c)) sq[static_cast<std::size_t>(r) * w + c] = 0.0;

    // Two-pass exact squared EDT: columns, then rows.
    const int n = std::max(h, w);
    std::vector<double> f(n), d(n), z(n + 1);
    std::vector<int> v(n);
    for (int c = 0; c < w; ++c) {
        for (int r = 0; r < h; ++r) f[r] = sq[static_cast<std::size_t>(r) * w + c];
        detail::dt1d(f, d, v, z, h);
        for (int r = 0; r < h; ++r) sq[static_cast<std::size_t>(r) * w + c] = d[r];
    }
    for (int r = 0; r < h; ++r) {
        for (int c = 0; c < w; ++c) f[c] = sq[static_cast<std::size_t>(r) * w + c];
        detail::dt1d(f, d, v, z, w);
        for (int c = 0; c < w; ++c) sq[static_cast<std::size_t>(r) * w + c] = d[c];
    }

    SignedDistanceField field;
    field.height = h;
    field.width = w;
    field.values.resize(sq.size());
    for (int r = 0; r < h; ++r) {
        for (int c = 0; c < w; ++c) {
            const std::size_t i = static_cast<std::size_t>(r) * w + c;
            const double dist = std::sqrt(sq[i]);
            field.values[i] = mask.at(r, c) ? (dist == 0.0 ? 0.0 : -dist) : dist;
        }
    }
    return field;
}

namespace detail {

inline double probe_distance(const SignedDistanceField& sdf, int r, int c) {
    if (r < 0 || r >= sdf.height || c < 0 || c >= sdf.width) return 1e9;  // off-grid counts as far background
    return sdf.at(r, c);
}

}  // namespace detail

// Per-point outward normals from a smoothed central-difference tangent
// rotated 90 degrees. The sign is fixed so a unit step along the normal does
// not decrease the signed distance; exact ties reuse the previous sign.
inline void compute_normals(Contour& contour, const SignedDistanceField& sdf, int window = 5) {
    if (window < 3 || window % 2 == 0) throw ConfigError("compute_normals: window must be odd and >= 3");
    const int n = static_cast<int>(contour.points.size());
    contour.normals.assign(n, {0.0, 0.0});
    std::array<double, 2> prev{0.0, 0.0};
    bool have_prev = false;
    for (int i = 0; i < n; ++i) {
        double tr = 0.0, tc = 0.0;
        for (int half = window / 2; half >= 1; --half) {
            const Pixel& fwd = contour.points[(i + half) % n];
            const Pixel& bwd = contour.points[(i - half + n) % n];
            tr = fwd[0] - bwd[0];
            tc = fwd[1] - bwd[1];
            if (tr != 0.0 || tc != 0.0) break;
        }
        std::array<double, 2> normal;
        if (tr == 0.0 && tc == 0.0) {
            normal = have_prev ? prev : std::array<double, 2>{-1.0, 0.0};
        } else {
            const double len = std::hypot(tr, tc);
            // Both 90-degree rotations of the tangent, unit length.
            const std::array<double, 2> a{-tc / len, tr / len};
            const std::array<double, 2> b{tc / len, -tr / len};
            const Pixel& p = contour.points[i];
            const double da = detail::probe_distance(sdf, p[0] + static_cast<int>(std::lround(a[0])),
                                                     p[1] + static_cast<int>(std::lround(a[1])));
            const double db = detail::probe_distance(sdf, p[0] + static_cast<int>(std::lround(b[0])),
                                                     p[1] + static_cast<int>(std::lround(b[1])));
            if (da > db) {
                normal = a;
            } else if (db > da) {
                normal = b;
            } else if (have_prev) {
                normal = (a[0] * prev[0] + a[1] * prev[1] >= 0.0) ? a : b;
            } else {
                normal = a;
            }
        }
        contour.normals[i] = normal;
        prev = normal;
        have_prev = true;
    }
}

inline void compute_normals(Contour& contour, const BinaryMask& mask, int window = 5) {
    const SignedDistanceField sdf = signed_distance(mask);
    compute_normals(contour, sdf, window);
}

// Bands grown one pixel of distance at a time until the inner or the outer
// band stops absorbing new pixels.
inline BandRegions maximal_bands(const SignedDistanceField& sdf) {
    std::vector<double> depth_in;   // -D over the foreground (D <= 0)
    std::vector<double> depth_out;  // D over the background (D > 0)
    for (double val : sdf.values) {
        if (val <= 0.0)
            depth_in.push_back(-val);
        else
            depth_out.push_back(val);
    }
    std::sort(depth_in.begin(), depth_in.end());
    std::sort(depth_out.begin(), depth_out.end());
    const auto count_below = [](const std::vector<double>& sorted, double x) {
        return static_cast<std::size_t>(std::lower_bound(sorted.begin(), sorted.end(), x) - sorted.begin());
    };

    std::size_t in_prev = count_below(depth_in, 1.0);
    std::size_t out_prev = count_below(depth_out, 1.0);
    const int d_cap = static_cast<int>(std::ceil(std::max(depth_in.empty() ? 0.0 : depth_in.back(),
                                                          depth_out.empty() ? 0.0 : depth_out.back()))) +
                      2;
    int d_stop = d_cap;
    for (int d = 2; d <= d_cap; ++d) {
        const std::size_t in_cur = count_below(depth_in, static_cast<double>(d));
        const std::size_t out_cur = count_below(depth_out, static_cast<double>(d));
        if (in_cur == in_prev || out_cur == out_prev) {
            d_stop = d;
            break;
        }
        in_prev = in_cur;
        out_prev = out_cur;
    }

    BandRegions bands;
    bands.d = d_stop;
    for (int r = 0; r < sdf.height; ++r) {
        for (int c = 0; c < sdf.width; ++c) {
            const double val = sdf.at(r, c);
            if (val <= 0.0 && val > -static_cast<double>(d_stop))
                bands.inner.push_back({r, c});
            else if (val > 0.0 && val < static_cast<double>(d_stop))
                bands.outer.push_back({r, c});
        }
    }
    return bands;
}

inline BandRegions maximal_bands(const BinaryMask& mask) {
    return maximal_bands(signed_distance(mask));
}

// Scanline-free closed fill: a pixel belongs to the polygon if its center
// lies on an edge or an even-odd ray cast crosses an odd number of edges.
// Vertices may lie outside the image; output is clipped to the image bounds.
inline BinaryMask rasterize_polygon(const std::vector<std::array<double, 2>>& points, int height, int width) {
    if (points.size() < 3) throw TooFewPointsError("rasterize_polygon: need at least 3 points");
    BinaryMask out(height, width);

    double rmin = points[0][0], rmax = points[0][0];
    double cmin = points[0][1], cmax = points[0][1];
    for (const auto& p : points) {
        rmin = std::min(rmin, p[0]);
        rmax = std::max(rmax, p[0]);
        cmin = std::min(cmin, p[1]);
        cmax = std::max(cmax, p[1]);
    }
    const int r0 = std::max(0, static_cast<int>(std::floor(rmin)));
    const int r1 = std::min(height - 1, static_cast<int>(std::ceil(rmax)));
    const int c0 = std::max(0, static_cast<int>(std::floor(cmin)));
    const int c1 = std::min(width - 1, static_cast<int>(std::ceil(cmax)));
    if (r0 > r1 || c0 > c1) return out;  // entirely outside, empty by clipping

    const std::size_t n = points.size();
    constexpr double kOnEdgeSq = 1e-18;
    for (int r = r0; r <= r1; ++r) {
        for (int c = c0; c <= c1; ++c) {
            const double pr = r, pc = c;
            bool inside = false;
            bool on_edge = false;
            for (std::size_t i = 0; i < n; ++i) {
                const auto& a = points[i];
                const auto& b = points[(i + 1) % n];
                const double er = b[0] - a[0];
                const double ec = b[1] - a[1];
                const double len_sq = er * er + ec * ec;
                double t = 0.0;
                if (len_sq > 0.0) t = std::clamp(((pr - a[0]) * er + (pc - a[1]) * ec) / len_sq, 0.0, 1.0);
                const double dr = pr - (a[0] + t * er);
                const double dc = pc - (a[1] + t * ec);
                if (dr * dr + dc * dc <= kOnEdgeSq) {
                    on_edge = true;
                    break;
                }
                if ((a[0] > pr) != (b[0] > pr)) {
                    const double cross_col = a[1] + (pr - a[0]) * ec / er;
                    if (cross_col > pc) inside = !inside;
                }
            }
            if (on_edge || inside) out.set(r, c, true);
        }
    }
    return out;
}

inline nlohmann::json contour_to_json(const Contour& contour) {
    nlohmann::json arr = nlohmann::json::array();
    for (const Pixel& p : contour.points) arr.push_back({p[0], p[1]});
    return arr;
}

}  // namespace fedseg
