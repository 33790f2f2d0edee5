#include "calseg/config.hpp"

#include <fstream>
#include <functional>
#include <sstream>

#include "calseg/rng.hpp"

namespace calseg {

RunConfig::RunConfig() {
    source.epochs = 10;
    valuenet.epochs = 12;
    valuenet.batch = 8;
    valuenet.lr = 0.2;
    valuenet.weight_decay = 0.0;
}

namespace {

std::string bool_str(bool b) { return b ? "1" : "0"; }

bool parse_bool(const std::string& v, const std::string& key) {
    auto t = trim(v);
    if (t == "1" || t == "true") return true;
    if (t == "0" || t == "false") return false;
    fail_invalid("cannot parse '" + v + "' as a boolean for " + key);
}

std::string list_str(const std::vector<double>& v) {
    std::string out;
    for (std::size_t i = 0; i < v.size(); ++i) {
        if (i) out += ",";
        out += format_exact(v[i]);
    }
    return out;
}

std::string list_str(const std::vector<int>& v) {
    std::string out;
    for (std::size_t i = 0; i < v.size(); ++i) {
        if (i) out += ",";
        out += std::to_string(v[i]);
    }
    return out;
}

std::vector<double> parse_dlist(const std::string& v, const std::string& key) {
    std::vector<double> out;
    for (const auto& cell : split(v, ',')) out.push_back(parse_double(cell, key));
    return out;
}

std::vector<int> parse_ilist(const std::string& v, const std::string& key) {
    std::vector<int> out;
    for (const auto& cell : split(v, ',')) out.push_back(static_cast<int>(parse_int(cell, key)));
    return out;
}

std::string palette_str(const std::vector<std::array<double, 3>>& p) {
    std::string out;
    for (std::size_t i = 0; i < p.size(); ++i) {
        if (i) out += ";";
        out += format_exact(p[i][0]) + "," + format_exact(p[i][1]) + "," + format_exact(p[i][2]);
    }
    return out;
}

std::vector<std::array<double, 3>> parse_palette(const std::string& v, const std::string& key) {
    std::vector<std::array<double, 3>> out;
    for (const auto& entry : split(v, ';')) {
        auto rgb = split(entry, ',');
        if (rgb.size() != 3) fail_invalid(key + ": palette entries need 3 components");
        out.push_back({parse_double(rgb[0], key), parse_double(rgb[1], key),
                       parse_double(rgb[2], key)});
    }
    return out;
}

struct Entry {
    const char* key;
    const char* doc;
    std::function<std::string(const RunConfig&)> get;
    std::function<void(RunConfig&, const std::string&)> set;
};

const std::vector<Entry>& schema() {
    static const std::vector<Entry> entries = {
        {"seed", "root seed; every random stream derives from it",
         [](const RunConfig& c) { return std::to_string(c.seed); },
         [](RunConfig& c, const std::string& v) {
             c.seed = static_cast<std::uint64_t>(parse_int(v, "seed"));
         }},
        {"out_dir", "run directory for all artifacts",
         [](const RunConfig& c) { return c.out_dir; },
         [](RunConfig& c, const std::string& v) { c.out_dir = std::string(trim(v)); }},
        {"data.height", "image height in pixels",
         [](const RunConfig& c) { return std::to_string(c.height); },
         [](RunConfig& c, const std::string& v) {
             c.height = static_cast<int>(parse_int(v, "data.height"));
         }},
        {"data.width", "image width in pixels",
         [](const RunConfig& c) { return std::to_string(c.width); },
         [](RunConfig& c, const std::string& v) {
             c.width = static_cast<int>(parse_int(v, "data.width"));
         }},
        {"data.classes", "number of semantic classes",
         [](const RunConfig& c) { return std::to_string(c.classes); },
         [](RunConfig& c, const std::string& v) {
             c.classes = static_cast<int>(parse_int(v, "data.classes"));
         }},
        {"data.source_images", "source images generated (split into train/val)",
         [](const RunConfig& c) { return std::to_string(c.source_images); },
         [](RunConfig& c, const std::string& v) {
             c.source_images = static_cast<int>(parse_int(v, "data.source_images"));
         }},
        {"data.target_images", "target images generated (split into train/test)",
         [](const RunConfig& c) { return std::to_string(c.target_images); },
         [](RunConfig& c, const std::string& v) {
             c.target_images = static_cast<int>(parse_int(v, "data.target_images"));
         }},
        {"data.source_val_fraction", "fraction of source images held out for validation",
         [](const RunConfig& c) { return format_exact(c.source_val_fraction); },
         [](RunConfig& c, const std::string& v) {
             c.source_val_fraction = parse_double(v, "data.source_val_fraction");
         }},
        {"data.target_test_fraction", "fraction of target images held out for testing",
         [](const RunConfig& c) { return format_exact(c.target_test_fraction); },
         [](RunConfig& c, const std::string& v) {
             c.target_test_fraction = parse_double(v, "data.target_test_fraction");
         }},
        {"data.class_freq", "expected pixel share per class, comma separated",
         [](const RunConfig& c) { return list_str(c.class_freq); },
         [](RunConfig& c, const std::string& v) {
             c.class_freq = parse_dlist(v, "data.class_freq");
         }},
        {"data.palette", "per-class mean RGB, 'r,g,b;r,g,b;...'",
         [](const RunConfig& c) { return palette_str(c.palette); },
         [](RunConfig& c, const std::string& v) { c.palette = parse_palette(v, "data.palette"); }},
        {"data.palette_noise", "per-class pixel color jitter sigma",
         [](const RunConfig& c) { return list_str(c.palette_noise); },
         [](RunConfig& c, const std::string& v) {
             c.palette_noise = parse_dlist(v, "data.palette_noise");
         }},
        {"data.shift_hue", "target-domain hue rotation, fraction of a full turn",
         [](const RunConfig& c) { return format_exact(c.shift.hue); },
         [](RunConfig& c, const std::string& v) {
             c.shift.hue = parse_double(v, "data.shift_hue");
         }},
        {"data.shift_brightness", "target-domain additive brightness offset",
         [](const RunConfig& c) { return format_exact(c.shift.brightness); },
         [](RunConfig& c, const std::string& v) {
             c.shift.brightness = parse_double(v, "data.shift_brightness");
         }},
        {"data.shift_noise", "target-domain additive Gaussian noise sigma",
         [](const RunConfig& c) { return format_exact(c.shift.noise_sigma); },
         [](RunConfig& c, const std::string& v) {
             c.shift.noise_sigma = parse_double(v, "data.shift_noise");
         }},
        {"model.widths", "channel widths of the conv blocks",
         [](const RunConfig& c) { return list_str(c.model_widths); },
         [](RunConfig& c, const std::string& v) {
             c.model_widths = parse_ilist(v, "model.widths");
         }},
        {"model.tap", "block whose activations feed the value net (1-based)",
         [](const RunConfig& c) { return std::to_string(c.model_tap); },
         [](RunConfig& c, const std::string& v) {
             c.model_tap = static_cast<int>(parse_int(v, "model.tap"));
         }},
        {"calib.bins", "reliability-diagram bin count M",
         [](const RunConfig& c) { return std::to_string(c.calib.bins); },
         [](RunConfig& c, const std::string& v) {
             c.calib.bins = static_cast<int>(parse_int(v, "calib.bins"));
         }},
        {"calib.temperature", "LogSumExp temperature of the smoothed confidence",
         [](const RunConfig& c) { return format_exact(c.calib.temperature); },
         [](RunConfig& c, const std::string& v) {
             c.calib.temperature = parse_double(v, "calib.temperature");
         }},
        {"calib.alpha", "weight of the calibration loss in the source objective",
         [](const RunConfig& c) { return format_exact(c.calib.alpha); },
         [](RunConfig& c, const std::string& v) {
             c.calib.alpha = parse_double(v, "calib.alpha");
         }},
        {"source.epochs", "source pre-training epochs (one checkpoint each)",
         [](const RunConfig& c) { return std::to_string(c.source.epochs); },
         [](RunConfig& c, const std::string& v) {
             c.source.epochs = static_cast<int>(parse_int(v, "source.epochs"));
         }},
        {"source.batch", "source batch size",
         [](const RunConfig& c) { return std::to_string(c.source.batch); },
         [](RunConfig& c, const std::string& v) {
             c.source.batch = static_cast<int>(parse_int(v, "source.batch"));
         }},
        {"source.lr", "initial learning rate",
         [](const RunConfig& c) { return format_exact(c.source.lr); },
         [](RunConfig& c, const std::string& v) { c.source.lr = parse_double(v, "source.lr"); }},
        {"source.momentum", "SGD momentum",
         [](const RunConfig& c) { return format_exact(c.source.momentum); },
         [](RunConfig& c, const std::string& v) {
             c.source.momentum = parse_double(v, "source.momentum");
         }},
        {"source.weight_decay", "L2 weight decay",
         [](const RunConfig& c) { return format_exact(c.source.weight_decay); },
         [](RunConfig& c, const std::string& v) {
             c.source.weight_decay = parse_double(v, "source.weight_decay");
         }},
        {"source.poly_power", "polynomial learning-rate decay power",
         [](const RunConfig& c) { return format_exact(c.source.poly_power); },
         [](RunConfig& c, const std::string& v) {
             c.source.poly_power = parse_double(v, "source.poly_power");
         }},
        {"source.ece_warmup_epochs", "epochs of pure cross-entropy before the ECE loss joins",
         [](const RunConfig& c) { return std::to_string(c.source.ece_warmup_epochs); },
         [](RunConfig& c, const std::string& v) {
             c.source.ece_warmup_epochs = static_cast<int>(parse_int(v, "source.ece_warmup_epochs"));
         }},
        {"source.flip", "horizontal-flip augmentation during source training",
         [](const RunConfig& c) { return bool_str(c.source.flip); },
         [](RunConfig& c, const std::string& v) {
             c.source.flip = parse_bool(v, "source.flip");
         }},
        {"valuenet.epochs", "value-net training epochs",
         [](const RunConfig& c) { return std::to_string(c.valuenet.epochs); },
         [](RunConfig& c, const std::string& v) {
             c.valuenet.epochs = static_cast<int>(parse_int(v, "valuenet.epochs"));
         }},
        {"valuenet.batch", "value-net batch size",
         [](const RunConfig& c) { return std::to_string(c.valuenet.batch); },
         [](RunConfig& c, const std::string& v) {
             c.valuenet.batch = static_cast<int>(parse_int(v, "valuenet.batch"));
         }},
        {"valuenet.lr", "value-net learning rate",
         [](const RunConfig& c) { return format_exact(c.valuenet.lr); },
         [](RunConfig& c, const std::string& v) {
             c.valuenet.lr = parse_double(v, "valuenet.lr");
         }},
        {"valuenet.momentum", "value-net SGD momentum",
         [](const RunConfig& c) { return format_exact(c.valuenet.momentum); },
         [](RunConfig& c, const std::string& v) {
             c.valuenet.momentum = parse_double(v, "valuenet.momentum");
         }},
        {"valuenet.weight_decay", "value-net weight decay",
         [](const RunConfig& c) { return format_exact(c.valuenet.weight_decay); },
         [](RunConfig& c, const std::string& v) {
             c.valuenet.weight_decay = parse_double(v, "valuenet.weight_decay");
         }},
        {"valuenet.poly_power", "value-net polynomial learning-rate decay power",
         [](const RunConfig& c) { return format_exact(c.valuenet.poly_power); },
         [](RunConfig& c, const std::string& v) {
             c.valuenet.poly_power = parse_double(v, "valuenet.poly_power");
         }},
        {"target.delta", "pseudo-label selection ratio per class",
         [](const RunConfig& c) { return format_exact(c.target.delta); },
         [](RunConfig& c, const std::string& v) {
             c.target.delta = parse_double(v, "target.delta");
         }},
        {"target.epsilon", "weight of the weighted CE inside the SCE loss",
         [](const RunConfig& c) { return format_exact(c.target.epsilon); },
         [](RunConfig& c, const std::string& v) {
             c.target.epsilon = parse_double(v, "target.epsilon");
         }},
        {"target.eta", "weight of the entropy regularizer",
         [](const RunConfig& c) { return format_exact(c.target.eta); },
         [](RunConfig& c, const std::string& v) { c.target.eta = parse_double(v, "target.eta"); }},
        {"target.rounds", "adaptation rounds (pseudo-labels refresh each round)",
         [](const RunConfig& c) { return std::to_string(c.target.rounds); },
         [](RunConfig& c, const std::string& v) {
             c.target.rounds = static_cast<int>(parse_int(v, "target.rounds"));
         }},
        {"target.epochs_per_round", "epochs per round; the first one is the statistic warm-up",
         [](const RunConfig& c) { return std::to_string(c.target.epochs_per_round); },
         [](RunConfig& c, const std::string& v) {
             c.target.epochs_per_round = static_cast<int>(parse_int(v, "target.epochs_per_round"));
         }},
        {"target.batch", "target batch size",
         [](const RunConfig& c) { return std::to_string(c.target.batch); },
         [](RunConfig& c, const std::string& v) {
             c.target.batch = static_cast<int>(parse_int(v, "target.batch"));
         }},
        {"target.lr", "target learning rate",
         [](const RunConfig& c) { return format_exact(c.target.lr); },
         [](RunConfig& c, const std::string& v) { c.target.lr = parse_double(v, "target.lr"); }},
        {"target.momentum", "target SGD momentum",
         [](const RunConfig& c) { return format_exact(c.target.momentum); },
         [](RunConfig& c, const std::string& v) {
             c.target.momentum = parse_double(v, "target.momentum");
         }},
        {"target.weight_decay", "target weight decay",
         [](const RunConfig& c) { return format_exact(c.target.weight_decay); },
         [](RunConfig& c, const std::string& v) {
             c.target.weight_decay = parse_double(v, "target.weight_decay");
         }},
        {"target.poly_power", "target polynomial learning-rate decay power",
         [](const RunConfig& c) { return format_exact(c.target.poly_power); },
         [](RunConfig& c, const std::string& v) {
             c.target.poly_power = parse_double(v, "target.poly_power");
         }},
    };
    return entries;
}

}  // namespace

void apply_config_entry(RunConfig& cfg, const std::string& key, const std::string& value) {
    for (const auto& e : schema()) {
        if (key == e.key) {
            e.set(cfg, value);
            return;
        }
    }
    fail_invalid("unknown config key '" + key + "'");
}

void apply_config_file(RunConfig& cfg, const std::filesystem::path& path) {
    std::ifstream f(path);
    if (!f) fail_io("cannot open config file " + path.string());
    std::string line;
    int lineno = 0;
    while (std::getline(f, line)) {
        ++lineno;
        auto t = std::string(trim(line));
        if (t.empty() || t[0] == '#') continue;
        auto pos = t.find('=');
        if (pos == std::string::npos) {
            fail_invalid(path.string() + ":" + std::to_string(lineno) + ": expected key = value");
        }
        apply_config_entry(cfg, std::string(trim(t.substr(0, pos))),
                           std::string(trim(t.substr(pos + 1))));
    }
}

std::string serialize_config(const RunConfig& cfg) {
    std::string out;
    for (const auto& e : schema()) {
        out += e.key;
        out += " = ";
        out += e.get(cfg);
        out += "\n";
    }
    return out;
}

std::string config_schema_text() {
    const RunConfig defaults;
    std::ostringstream out;
    for (const auto& e : schema()) {
        out << e.key << " (default " << e.get(defaults) << "): " << e.doc << "\n";
    }
    return out.str();
}

void RunConfig::validate() const {
    if (height < 16 || width < 16) fail_invalid("images must be at least 16x16");
    if (classes < 2) fail_invalid("data.classes must be >= 2");
    if (source_images < 2 || target_images < 2) fail_invalid("need at least 2 images per domain");
    if (!(source_val_fraction > 0 && source_val_fraction < 1)) {
        fail_invalid("data.source_val_fraction must lie in (0,1)");
    }
    if (!(target_test_fraction > 0 && target_test_fraction < 1)) {
        fail_invalid("data.target_test_fraction must lie in (0,1)");
    }
    if (static_cast<int>(class_freq.size()) != classes ||
        static_cast<int>(palette.size()) != classes ||
        static_cast<int>(palette_noise.size()) != classes) {
        fail_invalid("data.class_freq, data.palette and data.palette_noise must have one entry "
                     "per class");
    }
    if (model_widths.empty()) fail_invalid("model.widths must not be empty");
    if (model_tap < 1 || model_tap > static_cast<int>(model_widths.size())) {
        fail_invalid("model.tap out of range");
    }
    calib.validate();
    auto check_sgd = [](const SgdConfig& s, const std::string& name) {
        if (s.epochs < 0) fail_invalid(name + ".epochs must be >= 0");
        if (s.batch < 2) fail_invalid(name + ".batch must be >= 2 (BatchNorm)");
        if (!(s.lr >= 0) || !(s.momentum >= 0) || !(s.weight_decay >= 0) || !(s.poly_power >= 0)) {
            fail_invalid(name + " SGD hyperparameters must be non-negative");
        }
    };
    check_sgd(source, "source");
    check_sgd(valuenet, "valuenet");
    check_sgd(target, "target");
    if (source.ece_warmup_epochs < 0) fail_invalid("source.ece_warmup_epochs must be >= 0");
    if (!(target.delta > 0 && target.delta <= 1)) fail_invalid("target.delta must lie in (0,1]");
    if (target.epsilon < 0 || target.eta < 0) {
        fail_invalid("target.epsilon and target.eta must be >= 0");
    }
    if (target.rounds < 0) fail_invalid("target.rounds must be >= 0");
    if (target.epochs_per_round < 1) fail_invalid("target.epochs_per_round must be >= 1");
}

DomainSpec RunConfig::source_spec() const {
    DomainSpec spec;
    spec.n_images = source_images;
    spec.height = height;
    spec.width = width;
    spec.num_classes = classes;
    spec.class_freq_targets = class_freq;
    spec.palette_mean = palette;
    spec.palette_noise = palette_noise;
    spec.shift = DomainShift{};  // the source domain is unshifted
    spec.seed = derive_seed(seed, "datagen.domain");
    return spec;
}

DomainSpec RunConfig::target_spec() const {
    DomainSpec spec = source_spec();
    spec.n_images = target_images;
    spec.shift = shift;
    return spec;
}

}  // namespace calseg
