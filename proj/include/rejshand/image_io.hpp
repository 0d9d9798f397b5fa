#pragma once

// Image decoding for ingestion and inference. Kept apart from data_io.hpp so
// that only binaries touching image files depend on OpenCV.

#include <filesystem>
#include <string>
#include <vector>

#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include "rejshand/data_io.hpp"
#include "rejshand/errors.hpp"

namespace rejshand {

/// Decodes an image as RGB in [0, 1], channel-major. Images that are not
/// size x size are resized when `resize` is set and rejected otherwise.
inline LoadedImage load_image_rgb(const std::filesystem::path& path, std::size_t size, bool resize = true) {
    cv::Mat bgr = cv::imread(path.string(), cv::IMREAD_COLOR);
    if (bgr.empty()) throw ValidationError("input error: cannot decode image " + path.string());
    LoadedImage out;
    out.width = static_cast<std::size_t>(bgr.cols);
    out.height = static_cast<std::size_t>(bgr.rows);
    const int s = static_cast<int>(size);
    if (bgr.cols != s || bgr.rows != s) {
        if (!resize) {
            throw ValidationError("input error: image " + path.string() + " is " + std::to_string(bgr.cols) + "x" +
                                  std::to_string(bgr.rows) + ", expected " + std::to_string(size) + "x" +
                                  std::to_string(size) + " (pass --resize)");
        }
        cv::resize(bgr, bgr, cv::Size(s, s), 0, 0, cv::INTER_AREA);
    }
    std::vector<double> data(3 * size * size);
    for (int y = 0; y < s; ++y) {
        const auto* row = bgr.ptr<cv::Vec3b>(y);
        for (int x = 0; x < s; ++x) {
            for (int c = 0; c < 3; ++c) {
                // BGR -> RGB
                data[(static_cast<std::size_t>(c) * size + static_cast<std::size_t>(y)) * size + static_cast<std::size_t>(x)] =
                    row[x][2 - c] / 255.0;
            }
        }
    }
    out.image = Tensor::from({3, size, size}, std::move(data));
    return out;
}

/// Writes a 3 x S x S [0, 1] tensor as an 8-bit image (tests and tooling).
inline void save_image_rgb(const Tensor& image, const std::filesystem::path& path) {
    if (image.rank() != 3 || image.dim(0) != 3) throw DimensionError("save_image_rgb expects 3 x H x W");
    const int h = static_cast<int>(image.dim(1)), w = static_cast<int>(image.dim(2));
    cv::Mat bgr(h, w, CV_8UC3);
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x)
            for (int c = 0; c < 3; ++c) {
                const double v = image[(static_cast<std::size_t>(c) * image.dim(1) + static_cast<std::size_t>(y)) * image.dim(2) +
                                       static_cast<std::size_t>(x)];
                bgr.at<cv::Vec3b>(y, x)[2 - c] = cv::saturate_cast<uchar>(v * 255.0);
            }
    if (!cv::imwrite(path.string(), bgr)) throw LoadError("cannot write image " + path.string());
}

}  // namespace rejshand
