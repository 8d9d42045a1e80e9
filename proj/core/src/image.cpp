#include "sseg/image.hpp"

#include <opencv2/core.hpp>
#include <opencv2/imgcodecs.hpp>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <stdexcept>

namespace sseg {

ImageU8 read_png(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("read_png: cannot open " + path);
    std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)),
                                    std::istreambuf_iterator<char>());
    cv::Mat raw = cv::imdecode(cv::Mat(1, static_cast<int>(bytes.size()), CV_8UC1, bytes.data()),
                               cv::IMREAD_UNCHANGED);
    if (raw.empty()) throw std::runtime_error("read_png: cannot decode " + path);
    if (raw.depth() != CV_8U) throw std::runtime_error("read_png: expected 8-bit data in " + path);

    const int ch = raw.channels();
    ImageU8 img(raw.rows, raw.cols, ch == 1 ? 1 : 3);
    for (int y = 0; y < raw.rows; ++y) {
        const std::uint8_t* row = raw.ptr<std::uint8_t>(y);
        for (int x = 0; x < raw.cols; ++x) {
            if (ch == 1) {
                img.at(y, x) = row[x];
            } else if (ch == 3 || ch == 4) {
                // OpenCV decodes BGR(A)
                img.at(y, x, 0) = row[x * ch + 2];
                img.at(y, x, 1) = row[x * ch + 1];
                img.at(y, x, 2) = row[x * ch + 0];
            } else {
                throw std::runtime_error("read_png: unsupported channel count in " + path);
            }
        }
    }
    return img;
}

void write_png(const std::string& path, const ImageU8& img) {
    if (img.empty()) throw std::invalid_argument("write_png: empty image");
    if (img.channels != 1 && img.channels != 3)
        throw std::invalid_argument("write_png: channels must be 1 or 3");

    cv::Mat mat(img.height, img.width, img.channels == 1 ? CV_8UC1 : CV_8UC3);
    for (int y = 0; y < img.height; ++y) {
        std::uint8_t* row = mat.ptr<std::uint8_t>(y);
        for (int x = 0; x < img.width; ++x) {
            if (img.channels == 1) {
                row[x] = img.at(y, x);
            } else {
                row[x * 3 + 0] = img.at(y, x, 2);
                row[x * 3 + 1] = img.at(y, x, 1);
                row[x * 3 + 2] = img.at(y, x, 0);
            }
        }
    }
    std::vector<std::uint8_t> bytes;
    if (!cv::imencode(".png", mat, bytes)) throw std::runtime_error("write_png: encode failed");

    const std::string tmp = path + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw std::runtime_error("write_png: cannot open " + tmp);
        out.write(reinterpret_cast<const char*>(bytes.data()),
                  static_cast<std::streamsize>(bytes.size()));
        if (!out) throw std::runtime_error("write_png: short write to " + tmp);
    }
    if (std::rename(tmp.c_str(), path.c_str()) != 0) {
        std::remove(tmp.c_str());
        throw std::runtime_error("write_png: rename failed for " + path);
    }
}

ImageU8 resize_bilinear(const ImageU8& img, int out_h, int out_w) {
    if (out_h <= 0 || out_w <= 0) throw std::invalid_argument("resize_bilinear: bad target size");
    if (img.height == out_h && img.width == out_w) return img;
    ImageU8 out(out_h, out_w, img.channels);
    const double sy = static_cast<double>(img.height) / out_h;
    const double sx = static_cast<double>(img.width) / out_w;
    for (int y = 0; y < out_h; ++y) {
        double fy = (y + 0.5) * sy - 0.5;
        fy = std::min(std::max(fy, 0.0), static_cast<double>(img.height - 1));
        const int y0 = static_cast<int>(fy);
        const int y1 = std::min(y0 + 1, img.height - 1);
        const double wy = fy - y0;
        for (int x = 0; x < out_w; ++x) {
            double fx = (x + 0.5) * sx - 0.5;
            fx = std::min(std::max(fx, 0.0), static_cast<double>(img.width - 1));
            const int x0 = static_cast<int>(fx);
            const int x1 = std::min(x0 + 1, img.width - 1);
            const double wx = fx - x0;
            for (int c = 0; c < img.channels; ++c) {
                const double v = (1.0 - wy) * (1.0 - wx) * img.at(y0, x0, c) +
                                 (1.0 - wy) * wx * img.at(y0, x1, c) +
                                 wy * (1.0 - wx) * img.at(y1, x0, c) +
                                 wy * wx * img.at(y1, x1, c);
                out.at(y, x, c) = static_cast<std::uint8_t>(std::lround(std::min(std::max(v, 0.0), 255.0)));
            }
        }
    }
    return out;
}

ImageU8 resize_nearest(const ImageU8& img, int out_h, int out_w) {
    if (out_h <= 0 || out_w <= 0) throw std::invalid_argument("resize_nearest: bad target size");
    if (img.height == out_h && img.width == out_w) return img;
    ImageU8 out(out_h, out_w, img.channels);
    const double sy = static_cast<double>(img.height) / out_h;
    const double sx = static_cast<double>(img.width) / out_w;
    for (int y = 0; y < out_h; ++y) {
        int yy = static_cast<int>((y + 0.5) * sy);
        yy = std::min(yy, img.height - 1);
        for (int x = 0; x < out_w; ++x) {
            int xx = static_cast<int>((x + 0.5) * sx);
            xx = std::min(xx, img.width - 1);
            for (int c = 0; c < img.channels; ++c) out.at(y, x, c) = img.at(yy, xx, c);
        }
    }
    return out;
}

ImageU8 crop(const ImageU8& img, int y0, int x0, int h, int w) {
    if (y0 < 0 || x0 < 0 || h <= 0 || w <= 0 || y0 + h > img.height || x0 + w > img.width)
        throw std::invalid_argument("crop: window out of bounds");
    ImageU8 out(h, w, img.channels);
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x)
            for (int c = 0; c < img.channels; ++c) out.at(y, x, c) = img.at(y0 + y, x0 + x, c);
    return out;
}

Tensor image_to_chw(const ImageU8& img) {
    if (img.channels != 3) throw std::invalid_argument("image_to_chw: expects 3 channels");
    Tensor t({3, img.height, img.width});
    for (int c = 0; c < 3; ++c)
        for (int y = 0; y < img.height; ++y)
            for (int x = 0; x < img.width; ++x) t.at(c, y, x) = img.at(y, x, c) / 255.0;
    return t;
}

}  // namespace sseg
