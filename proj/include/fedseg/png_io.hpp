#pragma once

#include <algorithm>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include <png.h>

#include "fedseg/errors.hpp"
#include "fedseg/mask.hpp"

namespace fedseg {

namespace detail {

struct GrayPng {
    int height = 0;
    int width = 0;
    std::vector<std::uint8_t> pixels;  // row-major
};

inline GrayPng read_gray_png(const std::string& path) {
    png_image image;
    std::memset(&image, 0, sizeof(image));
    image.version = PNG_IMAGE_VERSION;
    if (!png_image_begin_read_from_file(&image, path.c_str()))
        throw IoError("cannot read PNG " + path + ": " + image.message);
    image.format = PNG_FORMAT_GRAY;  // libpng converts whatever is on disk
    GrayPng out;
    out.height = static_cast<int>(image.height);
    out.width = static_cast<int>(image.width);
    out.pixels.resize(PNG_IMAGE_SIZE(image));
    if (!png_image_finish_read(&image, nullptr, out.pixels.data(), 0, nullptr)) {
        const std::string msg = image.message;
        png_image_free(&image);
        throw IoError("cannot decode PNG " + path + ": " + msg);
    }
    return out;
}

inline void write_gray_png(const std::string& path, const std::vector<std::uint8_t>& pixels,
                           int height, int width) {
    png_image image;
    std::memset(&image, 0, sizeof(image));
    image.version = PNG_IMAGE_VERSION;
    image.height = static_cast<png_uint_32>(height);
    image.width = static_cast<png_uint_32>(width);
    image.format = PNG_FORMAT_GRAY;
    if (!png_image_write_to_file(&image, path.c_str(), 0, pixels.data(), 0, nullptr))
        throw IoError("cannot write PNG " + path + ": " + image.message);
}

}  // namespace detail

// Masks persist as 0/255 grayscale; anything read back is binarized at 128.
inline void write_mask_png(const std::string& path, const BinaryMask& mask) {
    std::vector<std::uint8_t> pixels(static_cast<std::size_t>(mask.height()) * mask.width());
    for (int r = 0; r < mask.height(); ++r)
        for (int c = 0; c < mask.width(); ++c)
            pixels[static_cast<std::size_t>(r) * mask.width() + c] = mask.at(r, c) ? 255 : 0;
    detail::write_gray_png(path, pixels, mask.height(), mask.width());
}

inline BinaryMask read_mask_png(const std::string& path) {
    const detail::GrayPng png = detail::read_gray_png(path);
    BinaryMask mask(png.height, png.width);
    for (int r = 0; r < png.height; ++r)
        for (int c = 0; c < png.width; ++c)
            mask.set(r, c, png.pixels[static_cast<std::size_t>(r) * png.width + c] >= 128);
    return mask;
}

inline void write_image_png(const std::string& path, const std::vector<double>& image, int height,
                            int width) {
    if (image.size() != static_cast<std::size_t>(height) * width)
        throw ShapeMismatchError("write_image_png: buffer does not match dimensions");
    std::vector<std::uint8_t> pixels(image.size());
    for (std::size_t i = 0; i < image.size(); ++i) {
        const double v = std::clamp(image[i], 0.0, 1.0);
        pixels[i] = static_cast<std::uint8_t>(std::lround(v * 255.0));
    }
    detail::write_gray_png(path, pixels, height, width);
}

struct LoadedImage {
    int height = 0;
    int width = 0;
    std::vector<double> pixels;  // [0, 1]
};

inline LoadedImage read_image_png(const std::string& path) {
    const detail::GrayPng png = detail::read_gray_png(path);
    LoadedImage out;
    out.height = png.height;
    out.width = png.width;
    out.pixels.reserve(png.pixels.size());
    for (std::uint8_t v : png.pixels) out.pixels.push_back(v / 255.0);
    return out;
}

struct ExternalPair {
    std::string stem;
    LoadedImage image;
    BinaryMask mask;
};

struct ExternalDataset {
    std::vector<ExternalPair> pairs;  // sorted by stem
    std::vector<std::string> warnings;
};

// Pairs <stem>_img.png with <stem>_mask.png from one directory. Unmatched or
// undecodable files are reported and skipped; an empty result is an error.
inline ExternalDataset load_external_masks(const std::string& dir) {
    namespace fs = std::filesystem;
    if (!fs::is_directory(dir)) throw IoError("not a directory: " + dir);
    std::map<std::string, std::string> images, masks;
    for (const auto& entry : fs::directory_iterator(dir)) {
        if (!entry.is_regular_file()) continue;
        const std::string name = entry.path().filename().string();
        const auto ends_with = [&](const std::string& suffix) {
            return name.size() > suffix.size() &&
                   name.compare(name.size() - suffix.size(), suffix.size(), suffix) == 0;
        };
        if (ends_with("_img.png"))
            images[name.substr(0, name.size() - 8)] = entry.path().string();
        else if (ends_with("_mask.png"))
            masks[name.substr(0, name.size() - 9)] = entry.path().string();
    }

    ExternalDataset out;
    for (const auto& [stem, img_path] : images) {
        const auto it = masks.find(stem);
        if (it == masks.end()) {
            out.warnings.push_back("unmatched image: " + img_path);
            continue;
        }
        try {
            ExternalPair pair;
            pair.stem = stem;
            pair.image = read_image_png(img_path);
            pair.mask = read_mask_png(it->second);
            if (pair.mask.height() != pair.image.height ||
                pair.mask.width() != pair.image.width) {
                out.warnings.push_back("dimension mismatch for stem " + stem + "; skipped");
                continue;
            }
            out.pairs.push_back(std::move(pair));
        } catch (const IoError& e) {
            out.warnings.push_back(std::string(e.what()) + "; skipped");
        }
    }
    for (const auto& [stem, mask_path] : masks)
        if (images.find(stem) == images.end())
            out.warnings.push_back("unmatched mask: " + mask_path);

    if (out.pairs.empty()) throw NoPairsFoundError("no usable *_img.png/*_mask.png pairs in " + dir);
    return out;
}

}  // namespace fedseg
