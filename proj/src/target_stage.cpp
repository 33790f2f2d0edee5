#include "calseg/target_stage.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "stage_util.hpp"

namespace calseg {

float adjusted_confidence(float max_prob, float ece_hat) {
    return (1.0f - ece_hat) * max_prob;
}

ClassThresholds compute_class_thresholds(const std::vector<float>& adjusted_conf,
                                         const std::vector<int>& prediction, int num_classes,
                                         double delta) {
    if (adjusted_conf.empty()) fail_invalid("compute_class_thresholds: empty prediction set");
    if (adjusted_conf.size() != prediction.size()) {
        fail_invalid("compute_class_thresholds: confidence and prediction lengths differ");
    }
    if (!(delta > 0 && delta <= 1)) fail_invalid("compute_class_thresholds: delta must be in (0,1]");

    std::vector<std::vector<float>> per_class(static_cast<std::size_t>(num_classes));
    for (std::size_t i = 0; i < prediction.size(); ++i) {
        const int c = prediction[i];
        if (c < 0 || c >= num_classes) fail_invalid("compute_class_thresholds: class out of range");
        per_class[static_cast<std::size_t>(c)].push_back(adjusted_conf[i]);
    }

    ClassThresholds out;
    out.xi.resize(static_cast<std::size_t>(num_classes), 1.0);
    for (int c = 0; c < num_classes; ++c) {
        auto& ranked = per_class[static_cast<std::size_t>(c)];
        if (ranked.empty()) continue;  // xi stays 1: nothing gets labeled
        std::sort(ranked.begin(), ranked.end(), std::greater<float>());
        const auto m = static_cast<std::int64_t>(ranked.size());
        const auto k = std::min<std::int64_t>(
            static_cast<std::int64_t>(std::floor(delta * static_cast<double>(m))), m - 1);
        out.xi[static_cast<std::size_t>(c)] = static_cast<double>(ranked[static_cast<std::size_t>(k)]);
    }

    // w_c = exp(xi_c) / sum_j exp(xi_j)
    out.weight.resize(static_cast<std::size_t>(num_classes));
    double denom = 0;
    for (double xi : out.xi) denom += std::exp(xi);
    for (int c = 0; c < num_classes; ++c) {
        out.weight[static_cast<std::size_t>(c)] = std::exp(out.xi[static_cast<std::size_t>(c)]) / denom;
    }
    return out;
}

std::int64_t PseudoLabelMap::labeled_count() const {
    std::int64_t n = 0;
    for (auto l : labels) {
        if (l != kIgnoreLabel) ++n;
    }
    return n;
}

PseudoLabelMap assign_pseudo_labels(const std::vector<int>& prediction,
                                    const std::vector<float>& adjusted_conf, int height,
                                    int width, const ClassThresholds& global, int num_classes,
                                    double delta) {
    const std::size_t hw = static_cast<std::size_t>(height) * static_cast<std::size_t>(width);
    if (prediction.size() != hw || adjusted_conf.size() != hw) {
        fail_invalid("assign_pseudo_labels: size mismatch");
    }
    // Image-level thresholds from the same top-delta rule on this image only.
    const ClassThresholds local =
        compute_class_thresholds(adjusted_conf, prediction, num_classes, delta);

    PseudoLabelMap map;
    map.height = height;
    map.width = width;
    map.labels.assign(hw, kIgnoreLabel);
    map.provenance.assign(hw, static_cast<std::uint8_t>(PseudoProvenance::unlabeled));
    for (std::size_t i = 0; i < hw; ++i) {
        const int c = prediction[i];
        const double p = adjusted_conf[i];
        const bool pass_global = p > global.xi[static_cast<std::size_t>(c)];
        const bool pass_local = p > local.xi[static_cast<std::size_t>(c)];
        if (!pass_global && !pass_local) continue;
        map.labels[i] = static_cast<std::uint8_t>(c);
        auto prov = pass_global && pass_local ? PseudoProvenance::both
                    : pass_global            ? PseudoProvenance::global_rule
                                              : PseudoProvenance::local_rule;
        map.provenance[i] = static_cast<std::uint8_t>(prov);
    }
    return map;
}

namespace {

constexpr double kLogFloor = 1e-4;   // floor of log arguments in the SCE loss
constexpr double kNegCap = 1e-7;     // probabilities capped at 1 - 1e-7 in L_neg

template <class T>
struct LabeledView {
    std::vector<int> index;  // gather index, 0 at ignored pixels
    std::vector<T> mask;     // 1 at labeled pixels
    std::int64_t count = 0;
};

template <class T>
LabeledView<T> labeled_view(const std::vector<std::uint8_t>& pseudo, int num_classes) {
    LabeledView<T> v;
    v.index.assign(pseudo.size(), 0);
    v.mask.assign(pseudo.size(), T(0));
    for (std::size_t i = 0; i < pseudo.size(); ++i) {
        if (pseudo[i] == kIgnoreLabel) continue;
        if (pseudo[i] >= num_classes) fail_invalid("pseudo label out of range");
        v.index[i] = pseudo[i];
        v.mask[i] = T(1);
        ++v.count;
    }
    return v;
}

}  // namespace

template <class T>
SceLossResult<T> sce_loss(const ad::Tensor<T>& probs, const std::vector<std::uint8_t>& pseudo,
                          const std::vector<double>& class_weights, double epsilon) {
    if (probs.ndim() != 4) fail_invalid("sce_loss: probs must be [N,C,H,W]");
    const int C = probs.dim(1);
    const std::int64_t pixels =
        static_cast<std::int64_t>(probs.dim(0)) * probs.dim(2) * probs.dim(3);
    if (static_cast<std::int64_t>(pseudo.size()) != pixels) {
        fail_invalid("sce_loss: pseudo-label count does not match pixel count");
    }
    if (static_cast<int>(class_weights.size()) != C) {
        fail_invalid("sce_loss: class weight count mismatch");
    }
    auto view = labeled_view<T>(pseudo, C);
    if (view.count == 0) fail_invalid("sce_loss: no pseudo-labeled pixels");

    std::vector<T> wmask(pseudo.size(), T(0));
    for (std::size_t i = 0; i < pseudo.size(); ++i) {
        if (pseudo[i] != kIgnoreLabel) wmask[i] = static_cast<T>(class_weights[pseudo[i]]);
    }

    const T inv_n = T(1) / static_cast<T>(view.count);
    ad::Tensor<T> pc = ad::gather(probs, 1, view.index);
    ad::Tensor<T> mask_t = ad::Tensor<T>::from(pc.shape(), std::move(view.mask));
    ad::Tensor<T> wmask_t = ad::Tensor<T>::from(pc.shape(), std::move(wmask));

    SceLossResult<T> out;
    // L_wCE = mean over labeled pixels of -w_c * log f_c
    out.wce = ad::scale(ad::sum(ad::mul(ad::log_floor(pc, static_cast<T>(kLogFloor)), wmask_t)),
                        -inv_n);
    // With one-hot pseudo labels, -sum_c f_c log yhat_c = -log(1e-4)*(1 - f_c).
    ad::Tensor<T> miss = ad::mul(ad::add_scalar(ad::scale(pc, T(-1)), T(1)), mask_t);
    out.rce = ad::scale(ad::sum(miss), static_cast<T>(-std::log(kLogFloor)) * inv_n);
    out.total = ad::add(ad::scale(out.wce, static_cast<T>(epsilon)), out.rce);
    return out;
}

template <class T>
ad::Tensor<T> entropy_loss(const ad::Tensor<T>& probs) {
    if (probs.ndim() != 4) fail_invalid("entropy_loss: probs must be [N,C,H,W]");
    const std::int64_t pixels =
        static_cast<std::int64_t>(probs.dim(0)) * probs.dim(2) * probs.dim(3);
    return ad::scale(ad::sum(ad::xlogx(probs)), T(-1) / static_cast<T>(pixels));
}

template <class T>
ad::Tensor<T> negative_loss(const ad::Tensor<T>& probs, const std::vector<std::uint8_t>& pseudo,
                            Rng& rng) {
    if (probs.ndim() != 4) fail_invalid("negative_loss: probs must be [N,C,H,W]");
    const int C = probs.dim(1);
    if (C < 2) fail_invalid("negative_loss: needs at least 2 classes");
    const std::int64_t pixels =
        static_cast<std::int64_t>(probs.dim(0)) * probs.dim(2) * probs.dim(3);
    if (static_cast<std::int64_t>(pseudo.size()) != pixels) {
        fail_invalid("negative_loss: pseudo-label count does not match pixel count");
    }
    // One complementary class per labeled pixel, uniform over the C-1 others.
    std::vector<int> index(pseudo.size(), 0);
    std::vector<T> mask(pseudo.size(), T(0));
    std::int64_t count = 0;
    for (std::size_t i = 0; i < pseudo.size(); ++i) {
        if (pseudo[i] == kIgnoreLabel) continue;
        if (pseudo[i] >= C) fail_invalid("negative_loss: pseudo label out of range");
        const int r = static_cast<int>(rng.uniform_int(static_cast<std::uint64_t>(C - 1)));
        index[i] = r + (r >= pseudo[i] ? 1 : 0);
        mask[i] = T(1);
        ++count;
    }
    if (count == 0) fail_invalid("negative_loss: no pseudo-labeled pixels");

    ad::Tensor<T> p_neg = ad::gather(probs, 1, index);
    ad::Tensor<T> one_minus = ad::add_scalar(ad::scale(p_neg, T(-1)), T(1));
    ad::Tensor<T> log_term = ad::log_floor(one_minus, static_cast<T>(kNegCap));
    ad::Tensor<T> mask_t = ad::Tensor<T>::from(p_neg.shape(), std::move(mask));
    return ad::scale(ad::sum(ad::mul(log_term, mask_t)), T(-1) / static_cast<T>(count));
}

double mean_prediction_entropy(const ad::Tensor<float>& logits) {
    if (logits.ndim() != 4) fail_invalid("mean_prediction_entropy: logits must be [N,C,H,W]");
    const int N = logits.dim(0), C = logits.dim(1);
    const std::int64_t hw = static_cast<std::int64_t>(logits.dim(2)) * logits.dim(3);
    auto lv = logits.data();
    double total = 0;
    for (int n = 0; n < N; ++n) {
        const float* img = lv.data() + static_cast<std::int64_t>(n) * C * hw;
        for (std::int64_t i = 0; i < hw; ++i) {
            float m = img[i];
            for (int c = 1; c < C; ++c) m = std::max(m, img[c * hw + i]);
            double denom = 0;
            for (int c = 0; c < C; ++c) denom += std::exp(static_cast<double>(img[c * hw + i] - m));
            double ent = 0;
            for (int c = 0; c < C; ++c) {
                const double p = std::exp(static_cast<double>(img[c * hw + i] - m)) / denom;
                if (p > 0) ent -= p * std::log(p);
            }
            total += ent;
        }
    }
    return total / static_cast<double>(N * hw);
}

std::size_t select_min_entropy(const std::vector<double>& per_epoch_entropy) {
    if (per_epoch_entropy.empty()) fail_invalid("select_min_entropy: empty pool");
    std::size_t best = 0;
    for (std::size_t i = 1; i < per_epoch_entropy.size(); ++i) {
        if (per_epoch_entropy[i] < per_epoch_entropy[best]) best = i;
    }
    return best;
}

IoUResult miou(const std::vector<int>& prediction, const std::vector<std::uint8_t>& labels,
               int num_classes) {
    if (prediction.size() != labels.size()) fail_invalid("miou: size mismatch");
    std::vector<std::int64_t> tp(static_cast<std::size_t>(num_classes), 0);
    std::vector<std::int64_t> fp(static_cast<std::size_t>(num_classes), 0);
    std::vector<std::int64_t> fn(static_cast<std::size_t>(num_classes), 0);
    for (std::size_t i = 0; i < prediction.size(); ++i) {
        if (labels[i] == kIgnoreLabel) continue;
        const int y = labels[i];
        const int p = prediction[i];
        if (y >= num_classes || p < 0 || p >= num_classes) fail_invalid("miou: class out of range");
        if (p == y) {
            ++tp[static_cast<std::size_t>(p)];
        } else {
            ++fp[static_cast<std::size_t>(p)];
            ++fn[static_cast<std::size_t>(y)];
        }
    }
    IoUResult out;
    out.per_class.resize(static_cast<std::size_t>(num_classes), 0.0);
    out.present.resize(static_cast<std::size_t>(num_classes), false);
    double sum_iou = 0;
    int active = 0;
    for (int c = 0; c < num_classes; ++c) {
        const auto ci = static_cast<std::size_t>(c);
        const auto denom = tp[ci] + fp[ci] + fn[ci];
        if (denom == 0) continue;  // absent from both prediction and label
        out.present[ci] = true;
        out.per_class[ci] = static_cast<double>(tp[ci]) / static_cast<double>(denom);
        sum_iou += out.per_class[ci];
        ++active;
    }
    out.mean = active > 0 ? sum_iou / active : 0.0;
    return out;
}

namespace {

// One SGD epoch on L_tar over the pseudo-labeled target set. In warm-up mode
// BatchNorm runs on batch statistics with the value net forwarded so its
// running estimates update too.
TargetEpochLosses run_target_epoch(SegModel<float>& model, ValueNet<float>* vnet_warmup,
                                   const Dataset& target,
                                   const std::vector<PseudoLabelMap>& pseudo,
                                   const std::vector<double>& class_weights,
                                   const TargetConfig& cfg, ad::BNMode bn_mode,
                                   SgdOptimizer<float>& opt, Rng& shuffle_rng,
                                   Rng& negsample_rng) {
    if (target.size() != pseudo.size()) fail_invalid("target epoch: pseudo map count mismatch");
    const int B = cfg.batch;
    const std::int64_t steps = static_cast<std::int64_t>(target.size()) / B;
    if (steps == 0) fail_invalid("target epoch: batch size exceeds the target set");

    std::vector<std::size_t> order(target.size());
    std::iota(order.begin(), order.end(), 0);
    shuffle_rng.shuffle(order);

    const std::size_t hw = static_cast<std::size_t>(target[0].height) * target[0].width;
    TargetEpochLosses acc;
    for (std::int64_t s = 0; s < steps; ++s) {
        std::vector<std::size_t> idx(order.begin() + s * B, order.begin() + (s + 1) * B);
        detail::Batch batch = detail::make_batch(target, idx.data(), B);
        std::vector<std::uint8_t> batch_pseudo(static_cast<std::size_t>(B) * hw);
        for (int i = 0; i < B; ++i) {
            const auto& map = pseudo[idx[static_cast<std::size_t>(i)]];
            std::copy(map.labels.begin(), map.labels.end(),
                      batch_pseudo.begin() + static_cast<std::ptrdiff_t>(i * hw));
        }
        {
            ad::Tape<float> tape;
            auto out = model.forward(batch.images, bn_mode);
            if (vnet_warmup) {
                // Forward only, to refresh the value net's BatchNorm statistics;
                // the estimate itself does not enter L_tar.
                (void)vnet_warmup->forward(out.feature, bn_mode);
            }
            ad::Tensor<float> probs = ad::softmax(out.logits, 1);
            auto sce = sce_loss(probs, batch_pseudo, class_weights, cfg.epsilon);
            ad::Tensor<float> l_neg = negative_loss(probs, batch_pseudo, negsample_rng);
            ad::Tensor<float> l_ent = entropy_loss(probs);
            ad::Tensor<float> loss = ad::add(
                ad::add(sce.total, l_neg), ad::scale(l_ent, static_cast<float>(cfg.eta)));
            const double lv = loss.item();
            if (!std::isfinite(lv)) fail_numeric("target adaptation: non-finite loss");
            acc.sce += sce.total.item();
            acc.neg += l_neg.item();
            acc.ent += l_ent.item();
            opt.zero_grad();
            tape.backward(loss);
            opt.step();
        }
    }
    acc.sce /= static_cast<double>(steps);
    acc.neg /= static_cast<double>(steps);
    acc.ent /= static_cast<double>(steps);
    return acc;
}

}  // namespace

TargetEpochLosses statistic_warmup(SegModel<float>& model, ValueNet<float>& vnet,
                                   const Dataset& target, const std::vector<PseudoLabelMap>& pseudo,
                                   const ClassThresholds& thresholds, const TargetConfig& cfg,
                                   SgdOptimizer<float>& opt, Rng& shuffle_rng, Rng& negsample_rng) {
    // The warm-up contract: exactly the BatchNorm affine parameters of both
    // networks are trainable.
    auto check = [](auto& net, const char* what) {
        for (auto& p : net.params()) {
            const bool affine = p.name.find(".bn.gamma") != std::string::npos ||
                                p.name.find(".bn.beta") != std::string::npos;
            if (p.tensor.requires_grad() != affine) {
                fail_state(std::string("statistic_warmup: stage mask is not 'warmup' (") + what +
                           " parameter " + p.name + ")");
            }
        }
    };
    check(model, "segmentation");
    check(vnet, "value net");
    return run_target_epoch(model, &vnet, target, pseudo, thresholds.weight, cfg,
                            ad::BNMode::stat_only, opt, shuffle_rng, negsample_rng);
}

AdaptResult adapt(const Dataset& target_train, SegModel<float>& model, ValueNet<float>& vnet,
                  const TargetConfig& cfg, int bins, std::uint64_t root_seed,
                  const AdaptHooks& hooks) {
    if (target_train.empty()) fail_invalid("adapt: empty target set");
    const int C = model.num_classes();
    const std::size_t hw =
        static_cast<std::size_t>(target_train[0].height) * target_train[0].width;

    AdaptResult result;
    if (cfg.rounds == 0) return result;  // no adaptation: theta' stays theta*

    const std::int64_t steps = static_cast<std::int64_t>(target_train.size()) / cfg.batch;
    if (steps == 0) fail_invalid("adapt: batch size exceeds the target set");
    const std::int64_t max_iter =
        steps * static_cast<std::int64_t>(cfg.rounds) * cfg.epochs_per_round;

    // One optimizer across rounds; the stage masks select what moves.
    std::vector<ParamRef<float>> all_params = model.params();
    for (auto& p : vnet.params()) all_params.push_back(p);
    SgdOptimizer<float> opt(all_params, cfg, max_iter);
    Rng shuffle_rng(derive_seed(root_seed, "shuffle.target"));
    Rng negsample_rng(derive_seed(root_seed, "negsample"));

    std::vector<AdaptEpochRecord> records;
    for (int round = 1; round <= cfg.rounds; ++round) {
        // --- ECE-guided thresholding and pseudo-labeling (evaluation mode) ---
        RoundArtifacts art;
        art.round = round;
        std::vector<std::vector<float>> conf_per_image(target_train.size());
        std::vector<std::vector<int>> pred_per_image(target_train.size());
        detail::for_each_eval_batch(
            model, target_train, 8,
            [&](const SegModel<float>::Output& out, std::size_t lo, std::size_t hi) {
                auto cp = confidence_and_prediction(out.logits);
                auto ece_hat = vnet.forward(out.feature, ad::BNMode::eval);
                auto ev = ece_hat.data();
                for (std::size_t i = lo; i < hi; ++i) {
                    const float e = std::clamp(ev[i - lo], 0.01f, 0.99f);
                    art.ece_hat.push_back(static_cast<double>(e));
                    auto& conf = conf_per_image[i];
                    auto& pred = pred_per_image[i];
                    conf.resize(hw);
                    pred.resize(hw);
                    for (std::size_t p = 0; p < hw; ++p) {
                        const std::size_t flat = (i - lo) * hw + p;
                        conf[p] = adjusted_confidence(cp.confidence[flat], e);
                        pred[p] = cp.prediction[flat];
                    }
                }
            });

        std::vector<float> all_conf;
        std::vector<int> all_pred;
        all_conf.reserve(target_train.size() * hw);
        all_pred.reserve(target_train.size() * hw);
        for (std::size_t i = 0; i < target_train.size(); ++i) {
            all_conf.insert(all_conf.end(), conf_per_image[i].begin(), conf_per_image[i].end());
            all_pred.insert(all_pred.end(), pred_per_image[i].begin(), pred_per_image[i].end());
        }
        art.thresholds = compute_class_thresholds(all_conf, all_pred, C, cfg.delta);

        art.pseudo.reserve(target_train.size());
        for (std::size_t i = 0; i < target_train.size(); ++i) {
            art.pseudo.push_back(assign_pseudo_labels(
                pred_per_image[i], conf_per_image[i], target_train[i].height,
                target_train[i].width, art.thresholds, C, cfg.delta));
        }

        std::vector<double> labeled_fraction(static_cast<std::size_t>(C), 0.0);
        {
            std::vector<std::int64_t> member(static_cast<std::size_t>(C), 0);
            std::vector<std::int64_t> labeled(static_cast<std::size_t>(C), 0);
            for (std::size_t i = 0; i < target_train.size(); ++i) {
                for (std::size_t p = 0; p < hw; ++p) {
                    ++member[static_cast<std::size_t>(pred_per_image[i][p])];
                    const auto l = art.pseudo[i].labels[p];
                    if (l != kIgnoreLabel) ++labeled[l];
                }
            }
            for (int c = 0; c < C; ++c) {
                const auto ci = static_cast<std::size_t>(c);
                if (member[ci] > 0) {
                    labeled_fraction[ci] =
                        static_cast<double>(labeled[ci]) / static_cast<double>(member[ci]);
                }
            }
        }
        if (hooks.on_round) hooks.on_round(art);

        // --- warm-up epoch, then self-training epochs ---
        for (int epoch = 1; epoch <= cfg.epochs_per_round; ++epoch) {
            TargetEpochLosses losses;
            if (epoch == 1) {
                set_stage_masks(model, &vnet, Stage::warmup);
                losses = statistic_warmup(model, vnet, target_train, art.pseudo, art.thresholds,
                                          cfg, opt, shuffle_rng, negsample_rng);
            } else {
                set_stage_masks(model, &vnet, Stage::adapt);
                losses = run_target_epoch(model, nullptr, target_train, art.pseudo,
                                          art.thresholds.weight, cfg, ad::BNMode::train, opt,
                                          shuffle_rng, negsample_rng);
            }

            // End-of-epoch entropy over the whole target train set, eval mode.
            double entropy_sum = 0;
            std::int64_t images_seen = 0;
            detail::for_each_eval_batch(
                model, target_train, 8,
                [&](const SegModel<float>::Output& out, std::size_t lo, std::size_t hi) {
                    entropy_sum += mean_prediction_entropy(out.logits) *
                                   static_cast<double>(hi - lo);
                    images_seen += static_cast<std::int64_t>(hi - lo);
                });
            AdaptEpochRecord rec;
            rec.round = round;
            rec.epoch = epoch;
            rec.losses = losses;
            rec.mean_entropy = entropy_sum / static_cast<double>(images_seen);
            rec.labeled_fraction = labeled_fraction;
            records.push_back(rec);
            result.entropies.push_back(rec.mean_entropy);
            if (hooks.on_epoch) hooks.on_epoch(rec);
        }
    }

    result.best_index = select_min_entropy(result.entropies);
    result.best_round = records[result.best_index].round;
    result.best_epoch = records[result.best_index].epoch;
    return result;
}

template struct SceLossResult<float>;
template struct SceLossResult<double>;
template SceLossResult<float> sce_loss(const ad::Tensor<float>&, const std::vector<std::uint8_t>&,
                                       const std::vector<double>&, double);
template SceLossResult<double> sce_loss(const ad::Tensor<double>&,
                                        const std::vector<std::uint8_t>&,
                                        const std::vector<double>&, double);
template ad::Tensor<float> entropy_loss(const ad::Tensor<float>&);
template ad::Tensor<double> entropy_loss(const ad::Tensor<double>&);
template ad::Tensor<float> negative_loss(const ad::Tensor<float>&,
                                         const std::vector<std::uint8_t>&, Rng&);
template ad::Tensor<double> negative_loss(const ad::Tensor<double>&,
                                          const std::vector<std::uint8_t>&, Rng&);

}  // namespace calseg
