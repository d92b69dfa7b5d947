#include "bags/image.hpp"

#include "bags/error.hpp"
#include "bags/io_util.hpp"

#include <opencv2/core.hpp>
#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include <algorithm>
#include <cmath>

namespace bags {

namespace {

Image from_mat(const cv::Mat& raw, int channels) {
    cv::Mat converted;
    if (channels == 1) {
        if (raw.channels() == 1) {
            converted = raw;
        } else if (raw.channels() == 4) {
            cv::cvtColor(raw, converted, cv::COLOR_BGRA2GRAY);
        } else {
            cv::cvtColor(raw, converted, cv::COLOR_BGR2GRAY);
        }
    } else {
        if (raw.channels() == 1) {
            cv::cvtColor(raw, converted, cv::COLOR_GRAY2RGB);
        } else if (raw.channels() == 4) {
            cv::cvtColor(raw, converted, cv::COLOR_BGRA2RGB);
        } else {
            cv::cvtColor(raw, converted, cv::COLOR_BGR2RGB);
        }
    }
    const double scale = converted.depth() == CV_16U ? 1.0 / 65535.0 : 1.0 / 255.0;
    cv::Mat as_double;
    converted.convertTo(as_double, CV_MAKETYPE(CV_64F, channels), scale);
    Image out(as_double.cols, as_double.rows, channels);
    for (int y = 0; y < out.height; ++y) {
        const auto* row = as_double.ptr<double>(y);
        std::copy_n(row, static_cast<std::size_t>(out.width) * static_cast<std::size_t>(channels),
                    out.data.begin() + static_cast<std::ptrdiff_t>(out.index(0, y)));
    }
    return out;
}

cv::Mat to_mat8(const Image& image) {
    if (image.channels != 1 && image.channels != 3) {
        throw DimensionError("PNG export supports 1 or 3 channels");
    }
    cv::Mat mat(image.height, image.width, CV_MAKETYPE(CV_8U, image.channels));
    for (int y = 0; y < image.height; ++y) {
        auto* row = mat.ptr<std::uint8_t>(y);
        for (int x = 0; x < image.width; ++x) {
            for (int c = 0; c < image.channels; ++c) {
                const double v = std::clamp(image.at(x, y, c), 0.0, 1.0);
                // OpenCV stores BGR.
                const int dst = image.channels == 3 ? 2 - c : c;
                row[x * image.channels + dst] = static_cast<std::uint8_t>(std::lround(v * 255.0));
            }
        }
    }
    return mat;
}

} // namespace

Image load_image(const std::filesystem::path& path, int channels) {
    if (!std::filesystem::exists(path)) {
        throw IoError("image not found: " + path.string());
    }
    const cv::Mat raw = cv::imread(path.string(), cv::IMREAD_UNCHANGED);
    if (raw.empty()) {
        throw FormatError("cannot decode image: " + path.string());
    }
    return from_mat(raw, channels);
}

std::vector<std::uint8_t> encode_png(const Image& image) {
    std::vector<std::uint8_t> bytes;
    if (!cv::imencode(".png", to_mat8(image), bytes)) {
        throw FormatError("PNG encoding failed");
    }
    return bytes;
}

Image decode_png(const std::vector<std::uint8_t>& bytes, int channels) {
    const cv::Mat raw = cv::imdecode(bytes, cv::IMREAD_UNCHANGED);
    if (raw.empty()) {
        throw FormatError("cannot decode PNG bytes");
    }
    return from_mat(raw, channels);
}

void save_png(const std::filesystem::path& path, const Image& image) {
    const auto bytes = encode_png(image);
    write_file_atomic(path, std::string(bytes.begin(), bytes.end()));
}

Image apply_mask(const Image& rgb, const Image& mask) {
    if (rgb.width != mask.width || rgb.height != mask.height || mask.channels != 1) {
        throw DimensionError("apply_mask: mask does not match image");
    }
    Image out = rgb;
    for (int y = 0; y < rgb.height; ++y) {
        for (int x = 0; x < rgb.width; ++x) {
            for (int c = 0; c < rgb.channels; ++c) {
                out.at(x, y, c) *= mask.at(x, y);
            }
        }
    }
    return out;
}

} // namespace bags
