#include "calseg/pipeline.hpp"

#include <cstring>
#include <fstream>

#include "calseg/checkpoint.hpp"
#include "calseg/source_stage.hpp"
#include "calseg/target_stage.hpp"
#include "stage_util.hpp"

namespace calseg {

namespace fs = std::filesystem;

namespace {

void write_config_echo(const RunConfig& cfg, const RunPaths& paths) {
    fs::create_directories(paths.root);
    std::ofstream f(paths.config_echo());
    if (!f) fail_io("cannot write " + paths.config_echo().string());
    f << serialize_config(cfg);
    if (!f.good()) fail_io("write failed for " + paths.config_echo().string());
}

Dataset load_split(const RunPaths& paths, const std::string& split) {
    const auto dir = paths.dataset(split);
    if (!fs::exists(dir / "index.txt")) {
        fail_state("dataset split '" + split + "' not found at " + dir.string() +
                   "; run the generate stage first");
    }
    return load_dataset(dir);
}

SegModel<float> build_seg_model(const RunConfig& cfg) {
    return SegModel<float>(3, cfg.classes, cfg.model_widths, cfg.model_tap - 1,
                           derive_seed(cfg.seed, "init.seg"));
}

ValueNet<float> build_value_net(const RunConfig& cfg, const SegModel<float>& seg) {
    return ValueNet<float>(seg.feature_channels(), derive_seed(cfg.seed, "init.value"));
}

std::string epoch_ckpt_name(int epoch) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "epoch_%03d.ckpt", epoch);
    return buf;
}

std::string round_ckpt_name(int round, int epoch) {
    char buf[48];
    std::snprintf(buf, sizeof(buf), "round_%02d_epoch_%02d.ckpt", round, epoch);
    return buf;
}

void copy_file_bytes(const fs::path& from, const fs::path& to) {
    std::error_code ec;
    fs::copy_file(from, to, fs::copy_options::overwrite_existing, ec);
    if (ec) fail_io("cannot copy " + from.string() + " to " + to.string());
}

constexpr char kProvMagic[8] = {'C', 'A', 'L', 'P', 'R', 'O', 'V', '1'};

void write_provenance(const fs::path& path, const PseudoLabelMap& map) {
    std::ofstream f(path, std::ios::binary);
    if (!f) fail_io("cannot write " + path.string());
    f.write(kProvMagic, sizeof(kProvMagic));
    const std::uint32_t h = static_cast<std::uint32_t>(map.height);
    const std::uint32_t w = static_cast<std::uint32_t>(map.width);
    f.write(reinterpret_cast<const char*>(&h), sizeof(h));
    f.write(reinterpret_cast<const char*>(&w), sizeof(w));
    f.write(reinterpret_cast<const char*>(map.provenance.data()),
            static_cast<std::streamsize>(map.provenance.size()));
    if (!f.good()) fail_io("write failed for " + path.string());
}

}  // namespace

void cmd_generate(const RunConfig& cfg, bool force) {
    cfg.validate();
    RunPaths paths(cfg.run_dir());
    if (fs::exists(paths.data_dir()) && !fs::is_empty(paths.data_dir()) && !force) {
        fail_state("output directory " + paths.data_dir().string() +
                   " already contains data; pass --force to overwrite");
    }
    write_config_echo(cfg, paths);

    const DomainSpec source_spec = cfg.source_spec();
    const DomainSpec target_spec = cfg.target_spec();
    Dataset source_all = generate_domain(source_spec);
    Dataset target_all = generate_domain(target_spec);

    auto [source_train, source_val] = split_validation(
        source_all, cfg.source_val_fraction, derive_seed(cfg.seed, "split.source"));
    auto [target_train, target_test] = split_validation(
        target_all, cfg.target_test_fraction, derive_seed(cfg.seed, "split.target"));

    auto write_split = [&](const std::string& name, const Dataset& data, DomainSpec spec) {
        spec.n_images = static_cast<int>(data.size());
        write_dataset(paths.dataset(name), data, spec);
    };
    write_split("source_train", source_train, source_spec);
    write_split("source_val", source_val, source_spec);
    write_split("target_train", target_train, target_spec);
    write_split("target_test", target_test, target_spec);
}

void cmd_train_source(const RunConfig& cfg) {
    cfg.validate();
    RunPaths paths(cfg.run_dir());
    write_config_echo(cfg, paths);
    Dataset train = load_split(paths, "source_train");
    Dataset val = load_split(paths, "source_val");

    SegModel<float> model = build_seg_model(cfg);
    fs::create_directories(paths.source_dir() / "checkpoints");
    std::ofstream csv(paths.source_dir() / "metrics.csv");
    if (!csv) fail_io("cannot write source metrics.csv");
    csv << "epoch,L_seg,L_ECE_diff,val_ece_mean,val_ece_max,val_ece_min,source_miou\n";

    train_source(train, val, model, cfg.source, cfg.calib, cfg.seed,
                 [&](const SourceEpochRecord& rec) {
                     csv << rec.epoch << ',' << format_metric(rec.loss_seg) << ','
                         << format_metric(rec.loss_ece_diff) << ','
                         << format_metric(rec.val_ece.mean) << ','
                         << format_metric(rec.val_ece.max) << ','
                         << format_metric(rec.val_ece.min) << ','
                         << format_metric(rec.val_miou) << '\n';
                     csv.flush();
                     Checkpoint ckpt;
                     ckpt.stage = "source";
                     store_model(ckpt, model);
                     ckpt.metrics = {{"epoch", static_cast<double>(rec.epoch)},
                                     {"L_seg", rec.loss_seg},
                                     {"L_ECE_diff", rec.loss_ece_diff},
                                     {"val_ece_mean", rec.val_ece.mean},
                                     {"val_ece_max", rec.val_ece.max},
                                     {"val_ece_min", rec.val_ece.min},
                                     {"source_miou", rec.val_miou}};
                     save_checkpoint(ckpt,
                                     paths.source_dir() / "checkpoints" / epoch_ckpt_name(rec.epoch));
                 });
    if (!csv.good()) fail_io("write failed for source metrics.csv");
}

void cmd_select_source(const RunConfig& cfg) {
    cfg.validate();
    RunPaths paths(cfg.run_dir());
    write_config_echo(cfg, paths);
    const fs::path ckpt_dir = paths.source_dir() / "checkpoints";
    if (!fs::exists(ckpt_dir)) {
        fail_state("no source checkpoints under " + ckpt_dir.string() +
                   "; run the train-source stage first");
    }
    std::vector<fs::path> files;
    for (const auto& e : fs::directory_iterator(ckpt_dir)) {
        if (e.path().extension() == ".ckpt") files.push_back(e.path());
    }
    std::sort(files.begin(), files.end());
    if (files.empty()) {
        fail_state("no source checkpoints under " + ckpt_dir.string() +
                   "; run the train-source stage first");
    }

    std::vector<PoolEntry> pool;
    for (const auto& f : files) {
        Checkpoint ckpt = load_checkpoint(f);
        PoolEntry entry;
        entry.epoch = static_cast<int>(ckpt.metric("epoch"));
        entry.val_ece.mean = ckpt.metric("val_ece_mean");
        entry.val_ece.max = ckpt.metric("val_ece_max");
        entry.val_ece.min = ckpt.metric("val_ece_min");
        pool.push_back(entry);
    }
    const std::size_t best = select_source_checkpoint(pool);
    copy_file_bytes(files[best], paths.source_selected());
    std::ofstream txt(paths.source_dir() / "selected.txt");
    txt << "epoch = " << pool[best].epoch << "\n"
        << "criterion = " << format_metric(pool[best].val_ece.criterion()) << "\n"
        << "val_ece_mean = " << format_metric(pool[best].val_ece.mean) << "\n"
        << "val_ece_max = " << format_metric(pool[best].val_ece.max) << "\n"
        << "val_ece_min = " << format_metric(pool[best].val_ece.min) << "\n"
        << "checkpoint = " << files[best].filename().string() << "\n";
    if (!txt.good()) fail_io("write failed for source selected.txt");
}

void cmd_train_valuenet(const RunConfig& cfg) {
    cfg.validate();
    RunPaths paths(cfg.run_dir());
    write_config_echo(cfg, paths);
    Dataset train = load_split(paths, "source_train");
    Dataset val = load_split(paths, "source_val");
    if (!fs::exists(paths.source_selected())) {
        fail_state("missing " + paths.source_selected().string() +
                   "; run the select-source stage first");
    }
    SegModel<float> model = build_seg_model(cfg);
    restore_model(load_checkpoint(paths.source_selected()), model);
    ValueNet<float> vnet = build_value_net(cfg, model);
    set_stage_masks(model, &vnet, Stage::valuenet);

    fs::create_directories(paths.valuenet_dir() / "checkpoints");
    std::ofstream csv(paths.valuenet_dir() / "metrics.csv");
    if (!csv) fail_io("cannot write valuenet metrics.csv");
    csv << "epoch,L_match_train,L_match_val\n";

    std::vector<double> val_match;
    train_value_net(train, val, model, vnet, cfg.valuenet, cfg.calib.bins, cfg.seed,
                    [&](const ValueEpochRecord& rec) {
                        csv << rec.epoch << ',' << format_metric(rec.match_train) << ','
                            << format_metric(rec.match_val) << '\n';
                        csv.flush();
                        val_match.push_back(rec.match_val);
                        Checkpoint ckpt;
                        ckpt.stage = "valuenet";
                        store_model(ckpt, vnet);
                        ckpt.metrics = {{"epoch", static_cast<double>(rec.epoch)},
                                        {"L_match_train", rec.match_train},
                                        {"L_match_val", rec.match_val}};
                        save_checkpoint(ckpt, paths.valuenet_dir() / "checkpoints" /
                                                  epoch_ckpt_name(rec.epoch));
                    });
    if (val_match.empty()) fail_state("value-net training produced no checkpoints");
    const std::size_t best = select_min_entropy(val_match);  // argmin, earliest tie
    copy_file_bytes(paths.valuenet_dir() / "checkpoints" /
                        epoch_ckpt_name(static_cast<int>(best) + 1),
                    paths.valuenet_selected());
    std::ofstream txt(paths.valuenet_dir() / "selected.txt");
    txt << "epoch = " << best + 1 << "\n"
        << "L_match_val = " << format_metric(val_match[best]) << "\n";
    if (!txt.good()) fail_io("write failed for valuenet selected.txt");
    if (!csv.good()) fail_io("write failed for valuenet metrics.csv");
}

void cmd_adapt(const RunConfig& cfg) {
    cfg.validate();
    RunPaths paths(cfg.run_dir());
    write_config_echo(cfg, paths);
    Dataset target_train = load_split(paths, "target_train");
    if (!fs::exists(paths.source_selected())) {
        fail_state("missing " + paths.source_selected().string() +
                   "; run the select-source stage first");
    }
    if (!fs::exists(paths.valuenet_selected())) {
        fail_state("missing " + paths.valuenet_selected().string() +
                   "; run the train-valuenet stage first");
    }
    SegModel<float> model = build_seg_model(cfg);
    restore_model(load_checkpoint(paths.source_selected()), model);
    ValueNet<float> vnet = build_value_net(cfg, model);
    restore_model(load_checkpoint(paths.valuenet_selected()), vnet);

    fs::create_directories(paths.adapt_dir() / "checkpoints");
    std::ofstream csv(paths.adapt_dir() / "metrics.csv");
    if (!csv) fail_io("cannot write adapt metrics.csv");
    csv << "round,epoch,L_sce,L_neg,L_ent,mean_entropy";
    for (int c = 0; c < cfg.classes; ++c) csv << ",labeled_frac_" << c;
    csv << "\n";

    DomainSpec target_spec;
    (void)load_dataset(paths.dataset("target_train"), &target_spec);

    AdaptHooks hooks;
    hooks.on_round = [&](const RoundArtifacts& art) {
        const fs::path round_dir =
            paths.adapt_dir() / ("round_" + std::to_string(art.round));
        const fs::path pseudo_dir = round_dir / "pseudo";
        Dataset pseudo_ds;
        pseudo_ds.reserve(target_train.size());
        for (std::size_t i = 0; i < target_train.size(); ++i) {
            LabeledImage img = target_train[i];
            img.labels = art.pseudo[i].labels;
            pseudo_ds.push_back(std::move(img));
        }
        write_dataset(pseudo_dir, pseudo_ds, target_spec);
        char name[40];
        for (std::size_t i = 0; i < art.pseudo.size(); ++i) {
            std::snprintf(name, sizeof(name), "records/img_%06zu.prov", i);
            write_provenance(pseudo_dir / name, art.pseudo[i]);
        }
        std::ofstream th(round_dir / "thresholds.csv");
        th << "class,xi,weight\n";
        for (int c = 0; c < cfg.classes; ++c) {
            th << c << ',' << format_metric(art.thresholds.xi[static_cast<std::size_t>(c)])
               << ',' << format_metric(art.thresholds.weight[static_cast<std::size_t>(c)])
               << '\n';
        }
        std::ofstream eh(round_dir / "ece_hat.csv");
        eh << "image,ece_hat\n";
        for (std::size_t i = 0; i < art.ece_hat.size(); ++i) {
            eh << i << ',' << format_metric(art.ece_hat[i]) << '\n';
        }
    };
    hooks.on_epoch = [&](const AdaptEpochRecord& rec) {
        csv << rec.round << ',' << rec.epoch << ',' << format_metric(rec.losses.sce) << ','
            << format_metric(rec.losses.neg) << ',' << format_metric(rec.losses.ent) << ','
            << format_metric(rec.mean_entropy);
        for (double f : rec.labeled_fraction) csv << ',' << format_metric(f);
        csv << '\n';
        csv.flush();
        Checkpoint ckpt;
        ckpt.stage = "adapt";
        store_model(ckpt, model);
        store_model(ckpt, vnet);
        ckpt.metrics = {{"round", static_cast<double>(rec.round)},
                        {"epoch", static_cast<double>(rec.epoch)},
                        {"L_sce", rec.losses.sce},
                        {"L_neg", rec.losses.neg},
                        {"L_ent", rec.losses.ent},
                        {"mean_entropy", rec.mean_entropy}};
        save_checkpoint(ckpt, paths.adapt_dir() / "checkpoints" /
                                  round_ckpt_name(rec.round, rec.epoch));
    };

    AdaptResult result = adapt(target_train, model, vnet, cfg.target, cfg.calib.bins, cfg.seed,
                               hooks);

    std::ofstream txt(paths.adapt_dir() / "selected.txt");
    if (cfg.target.rounds == 0) {
        // No adaptation: theta' is theta*.
        Checkpoint ckpt;
        ckpt.stage = "adapt";
        store_model(ckpt, model);
        store_model(ckpt, vnet);
        ckpt.metrics = {{"round", 0.0}, {"epoch", 0.0}};
        save_checkpoint(ckpt, paths.adapt_selected());
        txt << "round = 0\nepoch = 0\nnote = no adaptation rounds; selected model equals the "
               "source checkpoint\n";
    } else {
        copy_file_bytes(paths.adapt_dir() / "checkpoints" /
                            round_ckpt_name(result.best_round, result.best_epoch),
                        paths.adapt_selected());
        txt << "round = " << result.best_round << "\nepoch = " << result.best_epoch
            << "\nmean_entropy = " << format_metric(result.entropies[result.best_index]) << "\n";
    }
    if (!txt.good()) fail_io("write failed for adapt selected.txt");
    if (!csv.good()) fail_io("write failed for adapt metrics.csv");
}

EvalSummary cmd_evaluate(const RunConfig& cfg, const std::filesystem::path& checkpoint,
                         const std::string& split, const std::string& name) {
    cfg.validate();
    RunPaths paths(cfg.run_dir());
    write_config_echo(cfg, paths);
    Dataset data = load_split(paths, split);
    if (!fs::exists(checkpoint)) {
        fail_state("checkpoint " + checkpoint.string() + " not found; run its stage first");
    }
    Checkpoint ckpt = load_checkpoint(checkpoint);
    SegModel<float> model = build_seg_model(cfg);
    restore_model(ckpt, model);

    std::vector<double> per_image;
    std::vector<int> all_pred;
    std::vector<std::uint8_t> all_labels;
    std::vector<double> pooled_conf;
    std::vector<bool> pooled_correct;
    detail::for_each_eval_batch(
        model, data, 8, [&](const SegModel<float>::Output& out, std::size_t lo, std::size_t hi) {
            auto labels = detail::batch_labels(data, lo, hi);
            auto img_ece = ece_per_image(out.logits, labels, cfg.calib.bins);
            per_image.insert(per_image.end(), img_ece.begin(), img_ece.end());
            auto cp = confidence_and_prediction(out.logits);
            all_pred.insert(all_pred.end(), cp.prediction.begin(), cp.prediction.end());
            for (std::size_t i = 0; i < labels.size(); ++i) {
                if (labels[i] == 255) continue;
                pooled_conf.push_back(static_cast<double>(cp.confidence[i]));
                pooled_correct.push_back(cp.prediction[i] == labels[i]);
            }
            for (std::size_t i = lo; i < hi; ++i) {
                all_labels.insert(all_labels.end(), data[i].labels.begin(), data[i].labels.end());
            }
        });

    const IoUResult iou = miou(all_pred, all_labels, cfg.classes);
    const EceStats stats = ece_stats(per_image);
    const ReliabilityDiagram pooled = compute_ece(pooled_conf, pooled_correct, cfg.calib.bins);

    EvalSummary summary;
    summary.checkpoint = checkpoint.string();
    summary.stage = ckpt.stage;
    summary.split = split;
    summary.n_images = static_cast<int>(data.size());
    summary.miou = iou.mean;
    summary.ece_mean = stats.mean;
    summary.ece_max = stats.max;
    summary.ece_min = stats.min;
    summary.ece_pooled = pooled.ece();

    const fs::path dir = paths.eval_dir(name);
    fs::create_directories(dir);
    std::ofstream metrics(dir / "metrics.csv");
    metrics << "key,value\n"
            << "checkpoint," << checkpoint.filename().string() << "\n"
            << "stage," << ckpt.stage << "\n"
            << "split," << split << "\n"
            << "n_images," << summary.n_images << "\n"
            << "miou," << format_metric(summary.miou) << "\n"
            << "ece_mean," << format_metric(summary.ece_mean) << "\n"
            << "ece_max," << format_metric(summary.ece_max) << "\n"
            << "ece_min," << format_metric(summary.ece_min) << "\n"
            << "ece_pooled," << format_metric(summary.ece_pooled) << "\n";
    if (!metrics.good()) fail_io("write failed for eval metrics.csv");

    std::ofstream per_class(dir / "per_class_iou.csv");
    per_class << "class,iou,present\n";
    for (int c = 0; c < cfg.classes; ++c) {
        per_class << c << ',' << format_metric(iou.per_class[static_cast<std::size_t>(c)]) << ','
                  << (iou.present[static_cast<std::size_t>(c)] ? 1 : 0) << '\n';
    }
    export_reliability_csv(pooled, dir / "reliability.csv");
    export_reliability_svg(pooled, dir / "reliability.svg");
    return summary;
}

}  // namespace calseg
