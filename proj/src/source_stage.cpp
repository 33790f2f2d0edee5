#include "calseg/source_stage.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "calseg/target_stage.hpp"
#include "stage_util.hpp"

namespace calseg {

template <class T>
ad::Tensor<T> seg_loss(const ad::Tensor<T>& logits, const std::vector<int>& labels) {
    if (logits.ndim() != 4) fail_invalid("seg_loss: logits must be [N,C,H,W]");
    const int C = logits.dim(1);
    const std::int64_t pixels =
        static_cast<std::int64_t>(logits.dim(0)) * logits.dim(2) * logits.dim(3);
    if (static_cast<std::int64_t>(labels.size()) != pixels) {
        fail_invalid("seg_loss: label count does not match pixel count");
    }
    std::vector<int> index(labels.size(), 0);
    std::vector<T> mask(labels.size(), T(0));
    std::int64_t valid = 0;
    for (std::size_t i = 0; i < labels.size(); ++i) {
        const int y = labels[i];
        if (y == 255) continue;
        if (y < 0 || y >= C) fail_invalid("seg_loss: label out of range");
        index[i] = y;
        mask[i] = T(1);
        ++valid;
    }
    if (valid == 0) fail_invalid("seg_loss: all pixels ignored");
    // -log softmax = logsumexp(logits) - logit of the true class
    ad::Tensor<T> lse = ad::logsumexp(logits, 1, T(1));
    ad::Tensor<T> z_true = ad::gather(logits, 1, index);
    ad::Tensor<T> nll = ad::sub(lse, z_true);
    ad::Tensor<T> mask_t = ad::Tensor<T>::from(nll.shape(), std::move(mask));
    return ad::scale(ad::sum(ad::mul(nll, mask_t)), T(1) / static_cast<T>(valid));
}

double poly_lr(double base, std::int64_t iter, std::int64_t max_iter, double power) {
    if (max_iter <= 0) fail_invalid("poly_lr: max_iter must be positive");
    if (iter < 0) fail_invalid("poly_lr: negative iteration");
    const double t = std::min(1.0, static_cast<double>(iter) / static_cast<double>(max_iter));
    return base * std::pow(1.0 - t, power);
}

template <class T>
SgdOptimizer<T>::SgdOptimizer(std::vector<ParamRef<T>> params, const SgdConfig& cfg,
                              std::int64_t max_iter)
    : params_(std::move(params)), cfg_(cfg), max_iter_(std::max<std::int64_t>(1, max_iter)) {
    velocity_.resize(params_.size());
    for (std::size_t i = 0; i < params_.size(); ++i) {
        velocity_[i].assign(static_cast<std::size_t>(params_[i].tensor.numel()), T(0));
    }
}

template <class T>
void SgdOptimizer<T>::zero_grad() {
    for (auto& p : params_) p.tensor.zero_grad();
}

template <class T>
double SgdOptimizer<T>::current_lr() const {
    return poly_lr(cfg_.lr, iter_, max_iter_, cfg_.poly_power);
}

template <class T>
void SgdOptimizer<T>::step() {
    const T lr = static_cast<T>(current_lr());
    const T mom = static_cast<T>(cfg_.momentum);
    const T wd = static_cast<T>(cfg_.weight_decay);
    for (std::size_t i = 0; i < params_.size(); ++i) {
        auto& p = params_[i];
        if (!p.tensor.requires_grad()) continue;
        auto values = p.tensor.data();
        auto grad = p.tensor.grad_view();
        auto& vel = velocity_[i];
        for (std::size_t j = 0; j < values.size(); ++j) {
            const T g = (j < grad.size() ? grad[j] : T(0)) + wd * values[j];
            vel[j] = mom * vel[j] + g;
            values[j] -= lr * vel[j];
        }
    }
    ++iter_;
}

EceStats ece_stats(const std::vector<double>& per_image) {
    if (per_image.empty()) fail_invalid("ece_stats: empty input");
    EceStats s;
    s.mean = std::accumulate(per_image.begin(), per_image.end(), 0.0) /
             static_cast<double>(per_image.size());
    s.max = *std::max_element(per_image.begin(), per_image.end());
    s.min = *std::min_element(per_image.begin(), per_image.end());
    return s;
}

std::size_t select_source_checkpoint(const std::vector<PoolEntry>& pool) {
    if (pool.empty()) fail_invalid("select_source_checkpoint: empty checkpoint pool");
    std::size_t best = 0;
    for (std::size_t i = 1; i < pool.size(); ++i) {
        const bool better = pool[i].val_ece.criterion() < pool[best].val_ece.criterion() ||
                            (pool[i].val_ece.criterion() == pool[best].val_ece.criterion() &&
                             pool[i].epoch < pool[best].epoch);
        if (better) best = i;
    }
    return best;
}

namespace {

struct ValEval {
    EceStats ece;
    double miou_value = 0;
};

ValEval evaluate_split(SegModel<float>& model, const Dataset& data, int bins) {
    std::vector<double> per_image;
    std::vector<int> all_pred;
    std::vector<std::uint8_t> all_labels;
    detail::for_each_eval_batch(
        model, data, 8,
        [&](const SegModel<float>::Output& out, std::size_t lo, std::size_t hi) {
            auto labels = detail::batch_labels(data, lo, hi);
            auto img_ece = ece_per_image(out.logits, labels, bins);
            per_image.insert(per_image.end(), img_ece.begin(), img_ece.end());
            auto cp = confidence_and_prediction(out.logits);
            all_pred.insert(all_pred.end(), cp.prediction.begin(), cp.prediction.end());
            for (std::size_t i = lo; i < hi; ++i) {
                all_labels.insert(all_labels.end(), data[i].labels.begin(),
                                  data[i].labels.end());
            }
        });
    ValEval v;
    v.ece = ece_stats(per_image);
    v.miou_value = miou(all_pred, all_labels, model.num_classes()).mean;
    return v;
}

}  // namespace

void train_source(const Dataset& train, const Dataset& val, SegModel<float>& model,
                  const SourceConfig& cfg, const CalibConfig& calib, std::uint64_t root_seed,
                  const std::function<void(const SourceEpochRecord&)>& on_epoch) {
    if (train.empty() || val.empty()) fail_invalid("train_source: empty dataset");
    calib.validate();
    const int B = cfg.batch;
    const std::int64_t steps = static_cast<std::int64_t>(train.size()) / B;
    if (steps == 0) fail_invalid("train_source: batch size exceeds the training set");

    set_stage_masks(model, static_cast<ValueNet<float>*>(nullptr), Stage::source);
    SgdOptimizer<float> opt(model.params(), cfg, steps * cfg.epochs);
    Rng shuffle_rng(derive_seed(root_seed, "shuffle.source"));
    Rng flip_rng(derive_seed(root_seed, "augment.source"));

    std::vector<std::size_t> order(train.size());
    std::iota(order.begin(), order.end(), 0);

    for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
        shuffle_rng.shuffle(order);
        const bool ece_active = calib.alpha > 0 && epoch > cfg.ece_warmup_epochs;
        double sum_seg = 0, sum_ece = 0;
        for (std::int64_t s = 0; s < steps; ++s) {
            std::vector<char> flips(static_cast<std::size_t>(B), 0);
            if (cfg.flip) {
                for (int i = 0; i < B; ++i) {
                    flips[static_cast<std::size_t>(i)] = flip_rng.bernoulli(0.5) ? 1 : 0;
                }
            }
            std::vector<std::size_t> idx(order.begin() + s * B, order.begin() + (s + 1) * B);
            detail::Batch batch =
                detail::make_batch(train, idx.data(), B, cfg.flip ? &flips : nullptr);

            ad::Tensor<float> logits;
            double ece_value = 0;
            {
                ad::Tape<float> tape;
                auto out = model.forward(batch.images, ad::BNMode::train);
                logits = out.logits;
                ad::Tensor<float> l_seg = seg_loss(out.logits, batch.labels);
                ad::Tensor<float> loss = l_seg;
                if (ece_active) {
                    ad::Tensor<float> l_ece = diff_ece_loss(out.logits, batch.labels, calib);
                    ece_value = l_ece.item();
                    loss = ad::add(loss, ad::scale(l_ece, static_cast<float>(calib.alpha)));
                }
                const double lv = loss.item();
                if (!std::isfinite(lv)) {
                    fail_numeric("train_source: non-finite loss at epoch " +
                                 std::to_string(epoch) + " step " + std::to_string(s));
                }
                sum_seg += l_seg.item();
                opt.zero_grad();
                tape.backward(loss);
                opt.step();
            }
            if (!ece_active) {
                // Metric only; no tape is active here so nothing is recorded.
                ece_value = diff_ece_loss(logits, batch.labels, calib).item();
            }
            sum_ece += ece_value;
        }

        SourceEpochRecord rec;
        rec.epoch = epoch;
        rec.loss_seg = sum_seg / static_cast<double>(steps);
        rec.loss_ece_diff = sum_ece / static_cast<double>(steps);
        auto val_eval = evaluate_split(model, val, calib.bins);
        rec.val_ece = val_eval.ece;
        rec.val_miou = val_eval.miou_value;
        on_epoch(rec);
    }
}

void train_value_net(const Dataset& train, const Dataset& val, SegModel<float>& seg,
                     ValueNet<float>& vnet, const ValueNetConfig& cfg, int bins,
                     std::uint64_t root_seed,
                     const std::function<void(const ValueEpochRecord&)>& on_epoch) {
    if (train.empty() || val.empty()) fail_invalid("train_value_net: empty dataset");
    for (auto& p : seg.params()) {
        if (p.tensor.requires_grad()) {
            fail_state("train_value_net: segmentation parameters must be frozen "
                       "(set_stage_masks valuenet) before training the value net");
        }
    }

    // theta* is frozen, so the tapped features and ground-truth per-image ECE
    // are constants; compute them once.
    struct Cache {
        std::vector<std::vector<float>> features;
        std::vector<double> ece;
    };
    auto build_cache = [&](const Dataset& data) {
        Cache c;
        c.features.resize(data.size());
        detail::for_each_eval_batch(
            seg, data, 8, [&](const SegModel<float>::Output& out, std::size_t lo, std::size_t hi) {
                auto labels = detail::batch_labels(data, lo, hi);
                auto img_ece = ece_per_image(out.logits, labels, bins);
                c.ece.insert(c.ece.end(), img_ece.begin(), img_ece.end());
                const auto fshape = out.feature.shape();
                const std::int64_t per_img =
                    static_cast<std::int64_t>(fshape[1]) * fshape[2] * fshape[3];
                auto fv = out.feature.data();
                for (std::size_t i = lo; i < hi; ++i) {
                    const float* src = fv.data() + static_cast<std::int64_t>(i - lo) * per_img;
                    c.features[i].assign(src, src + per_img);
                }
            });
        return c;
    };
    const Cache train_cache = build_cache(train);
    const Cache val_cache = build_cache(val);
    const int F = seg.feature_channels();
    const int H = train[0].height, W = train[0].width;

    const int B = cfg.batch;
    const std::int64_t steps = static_cast<std::int64_t>(train.size()) / B;
    if (steps == 0) fail_invalid("train_value_net: batch size exceeds the training set");
    SgdOptimizer<float> opt(vnet.params(), cfg, steps * cfg.epochs);
    Rng shuffle_rng(derive_seed(root_seed, "shuffle.valuenet"));

    std::vector<std::size_t> order(train.size());
    std::iota(order.begin(), order.end(), 0);

    auto feature_batch = [&](const Cache& cache, const std::size_t* idx, int count) {
        ad::Tensor<float> t = ad::Tensor<float>::zeros({count, F, H, W});
        auto tv = t.data();
        const std::int64_t per_img = static_cast<std::int64_t>(F) * H * W;
        for (int i = 0; i < count; ++i) {
            std::copy(cache.features[idx[i]].begin(), cache.features[idx[i]].end(),
                      tv.begin() + i * per_img);
        }
        return t;
    };

    auto val_match = [&]() {
        double sq = 0;
        for (std::size_t lo = 0; lo < val.size(); lo += 8) {
            const std::size_t hi = std::min(val.size(), lo + 8);
            std::vector<std::size_t> idx;
            for (std::size_t i = lo; i < hi; ++i) idx.push_back(i);
            auto feats = feature_batch(val_cache, idx.data(), static_cast<int>(idx.size()));
            auto pred = vnet.forward(feats, ad::BNMode::eval);
            auto pv = pred.data();
            for (std::size_t i = lo; i < hi; ++i) {
                const double d = static_cast<double>(pv[i - lo]) - val_cache.ece[i];
                sq += d * d;
            }
        }
        return sq / static_cast<double>(val.size());
    };

    for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
        shuffle_rng.shuffle(order);
        double sum_match = 0;
        for (std::int64_t s = 0; s < steps; ++s) {
            std::vector<std::size_t> idx(order.begin() + s * B, order.begin() + (s + 1) * B);
            auto feats = feature_batch(train_cache, idx.data(), B);
            std::vector<float> targets(static_cast<std::size_t>(B));
            for (int i = 0; i < B; ++i) {
                targets[static_cast<std::size_t>(i)] =
                    static_cast<float>(train_cache.ece[idx[static_cast<std::size_t>(i)]]);
            }
            ad::Tensor<float> target_t = ad::Tensor<float>::from({B, 1}, std::move(targets));
            {
                ad::Tape<float> tape;
                auto pred = vnet.forward(feats, ad::BNMode::train);
                auto diff = ad::sub(pred, target_t);
                auto loss = ad::mean(ad::mul(diff, diff));
                const double lv = loss.item();
                if (!std::isfinite(lv)) {
                    fail_numeric("train_value_net: non-finite loss at epoch " +
                                 std::to_string(epoch));
                }
                sum_match += lv;
                opt.zero_grad();
                tape.backward(loss);
                opt.step();
            }
        }
        ValueEpochRecord rec;
        rec.epoch = epoch;
        rec.match_train = sum_match / static_cast<double>(steps);
        rec.match_val = val_match();
        on_epoch(rec);
    }
}

template ad::Tensor<float> seg_loss(const ad::Tensor<float>&, const std::vector<int>&);
template ad::Tensor<double> seg_loss(const ad::Tensor<double>&, const std::vector<int>&);
template class SgdOptimizer<float>;
template class SgdOptimizer<double>;

}  // namespace calseg
