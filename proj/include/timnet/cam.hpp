#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "timnet/downstream.hpp"
#include "timnet/matcher.hpp"
#include "timnet/pgm.hpp"

namespace timnet {

/// Normalized class activation map at image resolution. raw_min/raw_max are
/// the extrema of the upsampled, ReLU-clipped map before normalization.
struct Heatmap {
    int height = 0, width = 0;
    std::vector<double> values;  // in [0,1]; all zeros when the raw map is constant
    int source_class = 0;
    double raw_min = 0.0, raw_max = 0.0;
};

/// Bilinear upsample with corner alignment off (src = (dst+0.5)*scale - 0.5).
inline std::vector<double> bilinear_upsample(const std::vector<double>& src, int sh, int sw, int dh, int dw) {
    if (static_cast<int>(src.size()) != sh * sw) throw std::invalid_argument("bilinear_upsample: size mismatch");
    std::vector<double> dst(static_cast<std::size_t>(dh) * static_cast<std::size_t>(dw));
    const double scale_y = static_cast<double>(sh) / dh;
    const double scale_x = static_cast<double>(sw) / dw;
    for (int y = 0; y < dh; ++y) {
        double sy = (y + 0.5) * scale_y - 0.5;
        sy = std::clamp(sy, 0.0, static_cast<double>(sh - 1));
        const int y0 = static_cast<int>(std::floor(sy));
        const int y1 = std::min(y0 + 1, sh - 1);
        const double fy = sy - y0;
        for (int x = 0; x < dw; ++x) {
            double sx = (x + 0.5) * scale_x - 0.5;
            sx = std::clamp(sx, 0.0, static_cast<double>(sw - 1));
            const int x0 = static_cast<int>(std::floor(sx));
            const int x1 = std::min(x0 + 1, sw - 1);
            const double fx = sx - x0;
            const double v = (1 - fy) * ((1 - fx) * src[static_cast<std::size_t>(y0 * sw + x0)] +
                                         fx * src[static_cast<std::size_t>(y0 * sw + x1)]) +
                             fy * ((1 - fx) * src[static_cast<std::size_t>(y1 * sw + x0)] +
                                   fx * src[static_cast<std::size_t>(y1 * sw + x1)]);
            dst[static_cast<std::size_t>(y * dw + x)] = v;
        }
    }
    return dst;
}

/// Min-max normalization to [0,1]; a constant map becomes all zeros.
inline void normalize_heatmap(std::vector<double>& values, double* out_min = nullptr, double* out_max = nullptr) {
    if (values.empty()) return;
    const auto [mn_it, mx_it] = std::minmax_element(values.begin(), values.end());
    const double mn = *mn_it, mx = *mx_it;
    if (out_min) *out_min = mn;
    if (out_max) *out_max = mx;
    if (mx == mn) {
        std::fill(values.begin(), values.end(), 0.0);
        return;
    }
    for (auto& v : values) v = (v - mn) / (mx - mn);
}

/// Gradient-at-GAP CAM from a recorded forward pass. pre_gap holds the
/// feature maps GAP consumed ([1,C,Hf,Wf] or [C,Hf,Wf]); gap_vec their GAP;
/// logits the class scores. The raw map sum_c (dlogit/dgap_c) * A_c is
/// ReLU-clipped, bilinearly upsampled to out_h x out_w, then normalized.
/// For a purely linear head this reduces to the classic CAM weighted sum.
template <typename T>
Heatmap compute_cam_from_graph(Tape<T>& tape, const TensorPtr<T>& pre_gap, const TensorPtr<T>& gap_vec,
                               const TensorPtr<T>& logits, int class_index, int out_h, int out_w) {
    if (class_index < 0 || class_index >= logits->size())
        throw std::invalid_argument("compute_cam: class index " + std::to_string(class_index) +
                                    " out of range for " + std::to_string(logits->size()) + " logits");
    const std::size_t rank = pre_gap->rank();
    if (rank != 3 && rank != 4) throw std::invalid_argument("compute_cam: feature maps must be rank 3 or 4");
    const std::int64_t C = pre_gap->dim(rank == 4 ? 1 : 0);
    const std::int64_t HF = pre_gap->dim(rank == 4 ? 2 : 1);
    const std::int64_t WF = pre_gap->dim(rank == 4 ? 3 : 2);
    if (rank == 4 && pre_gap->dim(0) != 1) throw std::invalid_argument("compute_cam: expects a single image");

    auto logit = select_element(tape, logits, class_index);
    tape.backward(logit);
    if (gap_vec->grad.size() != gap_vec->data.size())
        throw std::invalid_argument("compute_cam: GAP vector received no gradient");

    std::vector<double> raw(static_cast<std::size_t>(HF * WF), 0.0);
    for (std::int64_t c = 0; c < C; ++c) {
        const double g = static_cast<double>(gap_vec->grad[static_cast<std::size_t>(c)]);
        const T* plane = pre_gap->data.data() + c * HF * WF;
        for (std::int64_t s = 0; s < HF * WF; ++s)
            raw[static_cast<std::size_t>(s)] += g * static_cast<double>(plane[s]);
    }
    for (auto& v : raw) v = std::max(0.0, v);

    Heatmap h;
    h.height = out_h;
    h.width = out_w;
    h.source_class = class_index;
    h.values = bilinear_upsample(raw, static_cast<int>(HF), static_cast<int>(WF), out_h, out_w);
    normalize_heatmap(h.values, &h.raw_min, &h.raw_max);
    return h;
}

/// CAM for a downstream classifier in eval mode.
template <typename T>
Heatmap compute_cam(const DownstreamModel<T>& model, const std::vector<float>& image, int height, int width,
                    int class_index) {
    LabeledDataset one;
    one.height = height;
    one.width = width;
    one.images.push_back(image);
    one.binary.push_back(0);
    one.multihot.push_back({0, 0, 0});
    Tape<T> tape;
    auto detail = model.forward_detail(tape, labeled_images_to_tensor<T>(one, {0}), false, false);
    return compute_cam_from_graph(tape, detail.pre_gap, detail.gap_vec, detail.logits, class_index, height, width);
}

/// CAM for the matching logit at a fixed text input (logit 1 = match).
template <typename T>
Heatmap compute_cam_matching(const TimNet<T>& net, const std::vector<int>& tokens, const std::vector<float>& image,
                             int height, int width) {
    Corpus one;
    one.height = height;
    one.width = width;
    PairedItem item;
    item.image = image;
    one.items.push_back(item);
    Tape<T> tape;
    auto images = images_to_tensor<T>(one, {0});
    auto vt = net.text_encoder().encode(tape, {tokens});
    auto fm = net.image_encoder().extract_feature_maps(tape, images, false);
    auto gap_vec = global_avg_pool(tape, fm);
    // Rebuild encode_image from its pieces so the GAP vector stays visible.
    auto vi = net.image_encoder().fc().forward(tape, gap_vec);
    auto logits = net.head().forward(tape, abs_diff(tape, vt, vi));
    return compute_cam_from_graph(tape, fm, gap_vec, logits, 1, height, width);
}

/// Side-by-side 8-bit grayscale: original left, heatmap right, separated by a
/// 2-pixel white column. Output is (2*W + 2) x H.
inline PgmImage render_heatmap(const Heatmap& h, const std::vector<float>& image) {
    if (static_cast<int>(image.size()) != h.height * h.width)
        throw std::invalid_argument("render_heatmap: image size does not match heatmap " +
                                    std::to_string(h.width) + "x" + std::to_string(h.height));
    PgmImage out;
    out.height = h.height;
    out.width = 2 * h.width + 2;
    out.pixels.assign(static_cast<std::size_t>(out.height) * static_cast<std::size_t>(out.width), 0);
    for (int y = 0; y < h.height; ++y) {
        for (int x = 0; x < h.width; ++x) {
            const float v = std::clamp(image[static_cast<std::size_t>(y * h.width + x)], 0.0f, 1.0f);
            out.pixels[static_cast<std::size_t>(y * out.width + x)] =
                static_cast<std::uint8_t>(std::lround(v * 255.0f));
        }
        out.pixels[static_cast<std::size_t>(y * out.width + h.width)] = 255;
        out.pixels[static_cast<std::size_t>(y * out.width + h.width + 1)] = 255;
        for (int x = 0; x < h.width; ++x) {
            const double v = h.values[static_cast<std::size_t>(y * h.width + x)];
            out.pixels[static_cast<std::size_t>(y * out.width + h.width + 2 + x)] =
                static_cast<std::uint8_t>(std::lround(v * 255.0));
        }
    }
    return out;
}

inline void write_heatmap(const std::string& path, const Heatmap& h, const std::vector<float>& image) {
    write_pgm(path, render_heatmap(h, image));
}

}  // namespace timnet
