#include "calseg/calibration.hpp"

#include <cmath>
#include <fstream>

namespace calseg {

void CalibConfig::validate() const {
    if (bins < 1) fail_invalid("calib.bins must be >= 1");
    if (!(temperature > 0)) fail_invalid("calib.temperature must be positive");
    if (alpha < 0) fail_invalid("calib.alpha must be non-negative");
}

double ReliabilityDiagram::ece() const {
    if (total == 0) return 0.0;
    double acc_sum = 0;
    for (const auto& b : bins) {
        acc_sum += static_cast<double>(b.count) / static_cast<double>(total) *
                   std::abs(b.acc - b.conf);
    }
    return acc_sum;
}

int bin_index(double confidence, int bins) {
    int idx = static_cast<int>(std::ceil(confidence * bins)) - 1;
    if (idx < 0) idx = 0;
    if (idx >= bins) idx = bins - 1;
    return idx;
}

ReliabilityDiagram compute_ece(const std::vector<double>& confidence,
                               const std::vector<bool>& correct, int bins) {
    if (bins < 1) fail_invalid("compute_ece: bin count must be >= 1");
    if (confidence.empty()) fail_invalid("compute_ece: empty input");
    if (confidence.size() != correct.size()) {
        fail_invalid("compute_ece: confidence and correctness lengths differ");
    }
    ReliabilityDiagram d;
    d.bins.resize(static_cast<std::size_t>(bins));
    d.total = static_cast<std::int64_t>(confidence.size());
    std::vector<double> conf_sum(static_cast<std::size_t>(bins), 0.0);
    std::vector<std::int64_t> hit(static_cast<std::size_t>(bins), 0);
    for (std::size_t i = 0; i < confidence.size(); ++i) {
        const double c = confidence[i];
        if (!(c >= 0.0 && c <= 1.0)) {
            fail_invalid("compute_ece: confidence outside [0,1]");
        }
        const auto m = static_cast<std::size_t>(bin_index(c, bins));
        d.bins[m].count += 1;
        conf_sum[m] += c;
        if (correct[i]) hit[m] += 1;
    }
    for (std::size_t m = 0; m < d.bins.size(); ++m) {
        if (d.bins[m].count > 0) {
            d.bins[m].conf = conf_sum[m] / static_cast<double>(d.bins[m].count);
            d.bins[m].acc = static_cast<double>(hit[m]) / static_cast<double>(d.bins[m].count);
        }
    }
    return d;
}

template <class T>
ConfidencePrediction<T> confidence_and_prediction(const ad::Tensor<T>& logits) {
    if (logits.ndim() != 4) fail_invalid("confidence_and_prediction: logits must be [N,C,H,W]");
    const int N = logits.dim(0), C = logits.dim(1);
    const std::int64_t hw = static_cast<std::int64_t>(logits.dim(2)) * logits.dim(3);
    ConfidencePrediction<T> out;
    out.confidence.resize(static_cast<std::size_t>(N * hw));
    out.prediction.resize(static_cast<std::size_t>(N * hw));
    auto lv = logits.data();
    for (int n = 0; n < N; ++n) {
        const T* img = lv.data() + static_cast<std::int64_t>(n) * C * hw;
        for (std::int64_t i = 0; i < hw; ++i) {
            T best = img[i];
            int arg = 0;
            for (int c = 1; c < C; ++c) {
                const T v = img[c * hw + i];
                if (v > best) {
                    best = v;
                    arg = c;
                }
            }
            if (!std::isfinite(best)) fail_invalid("confidence_and_prediction: non-finite logit");
            T denom = T(0);
            for (int c = 0; c < C; ++c) denom += std::exp(img[c * hw + i] - best);
            const std::int64_t flat = n * hw + i;
            out.confidence[static_cast<std::size_t>(flat)] = T(1) / denom;
            out.prediction[static_cast<std::size_t>(flat)] = arg;
        }
    }
    return out;
}

template <class T>
ad::Tensor<T> diff_ece_loss(const ad::Tensor<T>& logits, const std::vector<int>& labels,
                            const CalibConfig& cfg) {
    cfg.validate();
    if (logits.ndim() != 4) fail_invalid("diff_ece_loss: logits must be [N,C,H,W]");
    const int C = logits.dim(1);
    const std::int64_t samples =
        static_cast<std::int64_t>(logits.dim(0)) * logits.dim(2) * logits.dim(3);
    if (static_cast<std::int64_t>(labels.size()) != samples) {
        fail_invalid("diff_ece_loss: label count does not match pixel count");
    }

    ad::Tensor<T> probs = ad::softmax(logits, 1);
    // Smoothed confidence per pixel, differentiable. Shape [N,H,W].
    ad::Tensor<T> conf = ad::logsumexp(probs, 1, static_cast<T>(cfg.temperature));

    const auto pred = confidence_and_prediction(logits).prediction;
    auto cv = conf.data();

    const int M = cfg.bins;
    std::vector<std::int64_t> count(static_cast<std::size_t>(M), 0);
    std::vector<std::int64_t> hit(static_cast<std::size_t>(M), 0);
    std::vector<std::vector<T>> masks(static_cast<std::size_t>(M));
    for (auto& m : masks) m.assign(static_cast<std::size_t>(samples), T(0));

    std::int64_t valid = 0;
    for (std::int64_t i = 0; i < samples; ++i) {
        const int y = labels[static_cast<std::size_t>(i)];
        if (y == 255) continue;
        if (y < 0 || y >= C) fail_invalid("diff_ece_loss: label out of range");
        ++valid;
        const auto m = static_cast<std::size_t>(bin_index(static_cast<double>(cv[i]), M));
        count[m] += 1;
        masks[m][static_cast<std::size_t>(i)] = T(1);
        if (pred[static_cast<std::size_t>(i)] == y) hit[m] += 1;
    }
    if (valid == 0) fail_invalid("diff_ece_loss: all pixels ignored");

    ad::Tensor<T> loss = ad::Tensor<T>::scalar(T(0));
    for (int m = 0; m < M; ++m) {
        const auto mi = static_cast<std::size_t>(m);
        if (count[mi] == 0) continue;
        const T acc = static_cast<T>(hit[mi]) / static_cast<T>(count[mi]);
        // Mean smoothed confidence of the bin members; the mask is constant.
        ad::Tensor<T> mask = ad::Tensor<T>::from(conf.shape(), masks[mi]);
        ad::Tensor<T> bin_conf =
            ad::scale(ad::sum(ad::mul(conf, mask)), T(1) / static_cast<T>(count[mi]));
        ad::Tensor<T> gap = ad::abs_val(ad::add_scalar(bin_conf, -acc));
        loss = ad::add(loss, ad::scale(gap, static_cast<T>(count[mi]) / static_cast<T>(valid)));
    }
    return loss;
}

template <class T>
std::vector<double> ece_per_image(const ad::Tensor<T>& logits, const std::vector<int>& labels,
                                  int bins) {
    if (logits.ndim() != 4) fail_invalid("ece_per_image: logits must be [N,C,H,W]");
    const int N = logits.dim(0), C = logits.dim(1);
    const std::int64_t hw = static_cast<std::int64_t>(logits.dim(2)) * logits.dim(3);
    if (static_cast<std::int64_t>(labels.size()) != N * hw) {
        fail_invalid("ece_per_image: label count does not match pixel count");
    }
    const auto cp = confidence_and_prediction(logits);
    std::vector<double> out;
    out.reserve(static_cast<std::size_t>(N));
    for (int n = 0; n < N; ++n) {
        std::vector<double> conf;
        std::vector<bool> correct;
        for (std::int64_t i = 0; i < hw; ++i) {
            const std::size_t flat = static_cast<std::size_t>(n * hw + i);
            const int y = labels[flat];
            if (y == 255) continue;
            if (y < 0 || y >= C) fail_invalid("ece_per_image: label out of range");
            conf.push_back(static_cast<double>(cp.confidence[flat]));
            correct.push_back(cp.prediction[flat] == y);
        }
        if (conf.empty()) {
            fail_invalid("ece_per_image: image " + std::to_string(n) + " has no valid pixels");
        }
        out.push_back(compute_ece(conf, correct, bins).ece());
    }
    return out;
}

void export_reliability_csv(const ReliabilityDiagram& d, const std::filesystem::path& path) {
    std::ofstream f(path);
    if (!f) fail_io("cannot write " + path.string());
    f << "bin_lo,bin_hi,count,conf,acc\n";
    const int M = d.num_bins();
    for (int m = 0; m < M; ++m) {
        const auto& b = d.bins[static_cast<std::size_t>(m)];
        f << format_exact(static_cast<double>(m) / M) << ','
          << format_exact(static_cast<double>(m + 1) / M) << ',' << b.count << ','
          << format_exact(b.conf) << ',' << format_exact(b.acc) << '\n';
    }
    if (!f.good()) fail_io("write failed for " + path.string());
}

ReliabilityDiagram load_reliability_csv(const std::filesystem::path& path) {
    std::ifstream f(path);
    if (!f) fail_io("cannot read " + path.string());
    std::string line;
    if (!std::getline(f, line)) fail_io("empty reliability file " + path.string());
    ReliabilityDiagram d;
    while (std::getline(f, line)) {
        if (trim(line).empty()) continue;
        auto cells = split(line, ',');
        if (cells.size() != 5) fail_io("malformed reliability row in " + path.string());
        ReliabilityDiagram::Bin b;
        b.count = parse_int(cells[2], "reliability count");
        b.conf = parse_double(cells[3], "reliability conf");
        b.acc = parse_double(cells[4], "reliability acc");
        d.bins.push_back(b);
        d.total += b.count;
    }
    if (d.bins.empty()) fail_io("no bins in " + path.string());
    return d;
}

void export_reliability_svg(const ReliabilityDiagram& d, const std::filesystem::path& path) {
    const int M = d.num_bins();
    const double size = 360, margin = 40;
    const double plot = size - 2 * margin;
    std::ofstream f(path);
    if (!f) fail_io("cannot write " + path.string());
    f << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << size << "\" height=\"" << size
      << "\" viewBox=\"0 0 " << size << " " << size << "\">\n";
    f << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
    auto px = [&](double x) { return margin + x * plot; };
    auto py = [&](double y) { return size - margin - y * plot; };
    for (int m = 0; m < M; ++m) {
        const auto& b = d.bins[static_cast<std::size_t>(m)];
        const double x0 = static_cast<double>(m) / M;
        const double w = 1.0 / M;
        if (b.count > 0) {
            f << "<rect x=\"" << px(x0) + 1 << "\" y=\"" << py(b.acc) << "\" width=\""
              << w * plot - 2 << "\" height=\"" << py(0) - py(b.acc)
              << "\" fill=\"#4878a8\" fill-opacity=\"0.8\"/>\n";
            // mean-confidence marker
            f << "<line x1=\"" << px(x0) + 1 << "\" y1=\"" << py(b.conf) << "\" x2=\""
              << px(x0 + w) - 1 << "\" y2=\"" << py(b.conf)
              << "\" stroke=\"#c04040\" stroke-width=\"2\"/>\n";
        }
    }
    f << "<line x1=\"" << px(0) << "\" y1=\"" << py(0) << "\" x2=\"" << px(1) << "\" y2=\""
      << py(1) << "\" stroke=\"black\" stroke-dasharray=\"5,4\"/>\n";
    f << "<rect x=\"" << margin << "\" y=\"" << margin << "\" width=\"" << plot
      << "\" height=\"" << plot << "\" fill=\"none\" stroke=\"black\"/>\n";
    f << "<text x=\"" << size / 2 << "\" y=\"" << size - 8
      << "\" text-anchor=\"middle\" font-size=\"12\">confidence</text>\n";
    f << "<text x=\"12\" y=\"" << size / 2 << "\" text-anchor=\"middle\" font-size=\"12\" "
         "transform=\"rotate(-90 12 "
      << size / 2 << ")\">accuracy</text>\n";
    f << "<text x=\"" << size / 2 << "\" y=\"20\" text-anchor=\"middle\" font-size=\"12\">ECE "
      << format_metric(d.ece()) << "</text>\n";
    f << "</svg>\n";
    if (!f.good()) fail_io("write failed for " + path.string());
}

template struct ConfidencePrediction<float>;
template struct ConfidencePrediction<double>;
template ConfidencePrediction<float> confidence_and_prediction(const ad::Tensor<float>&);
template ConfidencePrediction<double> confidence_and_prediction(const ad::Tensor<double>&);
template ad::Tensor<float> diff_ece_loss(const ad::Tensor<float>&, const std::vector<int>&,
                                         const CalibConfig&);
template ad::Tensor<double> diff_ece_loss(const ad::Tensor<double>&, const std::vector<int>&,
                                          const CalibConfig&);
template std::vector<double> ece_per_image(const ad::Tensor<float>&, const std::vector<int>&,
                                           int);
template std::vector<double> ece_per_image(const ad::Tensor<double>&, const std::vector<int>&,
                                           int);

}  // namespace calseg
