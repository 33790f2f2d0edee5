#include "calseg/datagen.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numeric>
#include <set>

namespace calseg {

namespace {

constexpr char kRecordMagic[7] = {'C', 'A', 'L', 'S', 'E', 'G', '1'};

void ensure_little_endian() {
    static_assert(std::endian::native == std::endian::little || std::endian::native == std::endian::big);
    if constexpr (std::endian::native != std::endian::little) {
        fail_state("file formats require a little-endian host");
    }
}

void write_u32(std::ofstream& f, std::uint32_t v) {
    f.write(reinterpret_cast<const char*>(&v), sizeof(v));
}

std::uint32_t read_u32(std::ifstream& f, const std::string& what) {
    std::uint32_t v = 0;
    f.read(reinterpret_cast<char*>(&v), sizeof(v));
    if (!f) fail_io("truncated record while reading " + what);
    return v;
}

struct Mat3 {
    double m[3][3];
};

// Rotation about the gray axis (1,1,1)/sqrt(3) by 2*pi*hue.
Mat3 hue_rotation(double hue) {
    const double a = 6.283185307179586476925286766559 * hue;
    const double c = std::cos(a), s = std::sin(a);
    const double k = (1.0 - c) / 3.0;
    const double t = s / std::sqrt(3.0);
    Mat3 r;
    r.m[0][0] = c + k;
    r.m[0][1] = k - t;
    r.m[0][2] = k + t;
    r.m[1][0] = k + t;
    r.m[1][1] = c + k;
    r.m[1][2] = k - t;
    r.m[2][0] = k - t;
    r.m[2][1] = k + t;
    r.m[2][2] = c + k;
    return r;
}

// Occlusion-corrected drawn area per class: classes are painted in index
// order with later classes on top, so class c retains roughly
// drawn_c * prod_{c'>c}(1 - drawn_{c'}) of its drawn share.
std::vector<double> corrected_shares(const std::vector<double>& targets) {
    const int C = static_cast<int>(targets.size());
    std::vector<double> drawn(targets.size(), 0.0);
    double later = 1.0;
    for (int c = C - 1; c >= 1; --c) {
        drawn[static_cast<std::size_t>(c)] =
            std::min(0.9, targets[static_cast<std::size_t>(c)] / later);
        later *= 1.0 - drawn[static_cast<std::size_t>(c)];
    }
    return drawn;
}

void paint_rect(std::vector<std::uint8_t>& labels, int H, int W, std::uint8_t cls, double area,
                Rng& rng) {
    const double aspect = rng.uniform(0.5, 2.0);
    int h = std::max(2, static_cast<int>(std::lround(std::sqrt(area * aspect))));
    h = std::min(h, H - 1);
    int w = std::max(2, static_cast<int>(std::lround(area / h)));
    w = std::min(w, W - 1);
    const int y0 = static_cast<int>(rng.uniform_int(static_cast<std::uint64_t>(H - h + 1)));
    const int x0 = static_cast<int>(rng.uniform_int(static_cast<std::uint64_t>(W - w + 1)));
    for (int y = y0; y < y0 + h; ++y) {
        std::fill(labels.begin() + y * W + x0, labels.begin() + y * W + x0 + w, cls);
    }
}

void paint_ellipse(std::vector<std::uint8_t>& labels, int H, int W, std::uint8_t cls,
                   double area, Rng& rng) {
    const double aspect = rng.uniform(0.6, 1.7);
    double ry = std::sqrt(area * aspect / 3.14159265358979323846);
    double rx = area / (3.14159265358979323846 * ry);
    ry = std::clamp(ry, 1.5, H / 2.0 - 1.0);
    rx = std::clamp(rx, 1.5, W / 2.0 - 1.0);
    const double cy = rng.uniform(ry, H - 1 - ry);
    const double cx = rng.uniform(rx, W - 1 - rx);
    const int ylo = std::max(0, static_cast<int>(cy - ry) - 1);
    const int yhi = std::min(H - 1, static_cast<int>(cy + ry) + 1);
    for (int y = ylo; y <= yhi; ++y) {
        const double dy = (y - cy) / ry;
        const double rem = 1.0 - dy * dy;
        if (rem < 0) continue;
        const double span = rx * std::sqrt(rem);
        const int xlo = std::max(0, static_cast<int>(std::ceil(cx - span)));
        const int xhi = std::min(W - 1, static_cast<int>(std::floor(cx + span)));
        for (int x = xlo; x <= xhi; ++x) labels[static_cast<std::size_t>(y * W + x)] = cls;
    }
}

void paint_strip(std::vector<std::uint8_t>& labels, int H, int W, std::uint8_t cls, double area,
                 Rng& rng) {
    const bool horizontal = rng.bernoulli(0.5);
    if (horizontal) {
        int t = std::clamp(static_cast<int>(std::lround(area / W)), 1, H - 2);
        const int y0 = static_cast<int>(rng.uniform_int(static_cast<std::uint64_t>(H - t + 1)));
        std::fill(labels.begin() + y0 * W, labels.begin() + (y0 + t) * W, cls);
    } else {
        int t = std::clamp(static_cast<int>(std::lround(area / H)), 1, W - 2);
        const int x0 = static_cast<int>(rng.uniform_int(static_cast<std::uint64_t>(W - t + 1)));
        for (int y = 0; y < H; ++y) {
            std::fill(labels.begin() + y * W + x0, labels.begin() + y * W + x0 + t, cls);
        }
    }
}

}  // namespace

void DomainSpec::validate() const {
    if (n_images <= 0) fail_invalid("DomainSpec: n_images must be positive");
    if (height < 16 || width < 16) fail_invalid("DomainSpec: images must be at least 16x16");
    if (num_classes < 2 || num_classes > 254) {
        fail_invalid("DomainSpec: class count must be in [2,254]");
    }
    const auto C = static_cast<std::size_t>(num_classes);
    if (class_freq_targets.size() != C) {
        fail_invalid("DomainSpec: class_freq_targets must have one entry per class");
    }
    double total = 0;
    double min_share = 1.0;
    for (double f : class_freq_targets) {
        if (f <= 0) fail_invalid("DomainSpec: class shares must be positive");
        total += f;
        min_share = std::min(min_share, f);
    }
    if (std::abs(total - 1.0) > 1e-6) fail_invalid("DomainSpec: class shares must sum to 1");
    if (min_share > 0.02 + 1e-12) {
        fail_invalid("DomainSpec: needs at least one tail class with share <= 2%");
    }
    if (palette_mean.size() != C || palette_noise.size() != C) {
        fail_invalid("DomainSpec: palette must have one entry per class");
    }
}

LabeledImage generate_image(const DomainSpec& spec, int index) {
    const int H = spec.height, W = spec.width;
    Rng rng(derive_seed(spec.seed, "datagen.image", static_cast<std::uint64_t>(index)));

    LabeledImage img;
    img.height = H;
    img.width = W;
    img.labels.assign(static_cast<std::size_t>(H) * W, 0);

    const auto drawn = corrected_shares(spec.class_freq_targets);
    const double canvas = static_cast<double>(H) * W;
    for (int c = 1; c < spec.num_classes; ++c) {
        const double share = drawn[static_cast<std::size_t>(c)] * rng.uniform(0.7, 1.3);
        const int nshapes = share > 0.12 ? 1 + static_cast<int>(rng.uniform_int(2)) : 1;
        for (int s = 0; s < nshapes; ++s) {
            const double area = share * canvas / nshapes;
            const auto kind = rng.uniform_int(3);
            const auto cls = static_cast<std::uint8_t>(c);
            if (kind == 0) {
                paint_rect(img.labels, H, W, cls, area, rng);
            } else if (kind == 1) {
                paint_ellipse(img.labels, H, W, cls, area, rng);
            } else {
                paint_strip(img.labels, H, W, cls, area, rng);
            }
        }
    }

    // Colors: class palette plus per-pixel jitter, then the domain shift.
    img.pixels.assign(static_cast<std::size_t>(3) * H * W, 0.f);
    const std::int64_t hw = static_cast<std::int64_t>(H) * W;
    const bool rotate = spec.shift.hue != 0.0;
    const Mat3 rot = hue_rotation(spec.shift.hue);
    for (std::int64_t i = 0; i < hw; ++i) {
        const auto cls = img.labels[static_cast<std::size_t>(i)];
        const auto& base = spec.palette_mean[cls];
        const double sigma = spec.palette_noise[cls];
        double rgb[3];
        for (int ch = 0; ch < 3; ++ch) rgb[ch] = base[static_cast<std::size_t>(ch)] + sigma * rng.normal();
        if (rotate) {
            double rr[3];
            for (int ch = 0; ch < 3; ++ch) {
                rr[ch] = rot.m[ch][0] * rgb[0] + rot.m[ch][1] * rgb[1] + rot.m[ch][2] * rgb[2];
            }
            std::memcpy(rgb, rr, sizeof(rr));
        }
        for (int ch = 0; ch < 3; ++ch) {
            double v = rgb[ch] + spec.shift.brightness;
            if (spec.shift.noise_sigma > 0) v += spec.shift.noise_sigma * rng.normal();
            img.pixels[static_cast<std::size_t>(ch * hw + i)] =
                static_cast<float>(std::clamp(v, 0.0, 1.0));
        }
    }

    std::set<std::uint8_t> distinct(img.labels.begin(), img.labels.end());
    if (distinct.size() < 2) fail_numeric("generated label map has fewer than 2 classes");
    return img;
}

Dataset generate_domain(const DomainSpec& spec) {
    spec.validate();
    Dataset out;
    out.reserve(static_cast<std::size_t>(spec.n_images));
    for (int i = 0; i < spec.n_images; ++i) out.push_back(generate_image(spec, i));
    return out;
}

LabeledImage hflip(const LabeledImage& img) {
    LabeledImage out = img;
    const int H = img.height, W = img.width;
    for (int y = 0; y < H; ++y) {
        for (int x = 0; x < W; ++x) {
            out.labels[static_cast<std::size_t>(y * W + x)] =
                img.labels[static_cast<std::size_t>(y * W + (W - 1 - x))];
            for (int ch = 0; ch < 3; ++ch) {
                out.pixels[static_cast<std::size_t>((ch * H + y) * W + x)] =
                    img.pixels[static_cast<std::size_t>((ch * H + y) * W + (W - 1 - x))];
            }
        }
    }
    return out;
}

LabeledImage augment(const LabeledImage& img, Rng& rng) {
    return rng.bernoulli(0.5) ? hflip(img) : img;
}

std::pair<Dataset, Dataset> split_validation(const Dataset& data, double fraction,
                                             std::uint64_t seed) {
    if (!(fraction > 0.0 && fraction < 1.0)) {
        fail_invalid("split_validation: fraction must be in (0,1)");
    }
    const auto n = data.size();
    const auto k = static_cast<std::size_t>(std::llround(fraction * static_cast<double>(n)));
    if (k == 0 || k >= n) fail_invalid("split_validation: fraction yields an empty side");
    std::vector<std::size_t> idx(n);
    std::iota(idx.begin(), idx.end(), 0);
    Rng rng(derive_seed(seed, "datagen.split"));
    rng.shuffle(idx);
    std::vector<std::size_t> val_idx(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(k));
    std::vector<std::size_t> train_idx(idx.begin() + static_cast<std::ptrdiff_t>(k), idx.end());
    std::sort(val_idx.begin(), val_idx.end());
    std::sort(train_idx.begin(), train_idx.end());
    Dataset train, val;
    for (auto i : train_idx) train.push_back(data[i]);
    for (auto i : val_idx) val.push_back(data[i]);
    return {std::move(train), std::move(val)};
}

void write_record(const std::filesystem::path& path, const LabeledImage& img, int num_classes) {
    ensure_little_endian();
    std::ofstream f(path, std::ios::binary);
    if (!f) fail_io("cannot write record " + path.string());
    f.write(kRecordMagic, sizeof(kRecordMagic));
    write_u32(f, static_cast<std::uint32_t>(img.height));
    write_u32(f, static_cast<std::uint32_t>(img.width));
    write_u32(f, static_cast<std::uint32_t>(num_classes));
    f.write(reinterpret_cast<const char*>(img.pixels.data()),
            static_cast<std::streamsize>(img.pixels.size() * sizeof(float)));
    f.write(reinterpret_cast<const char*>(img.labels.data()),
            static_cast<std::streamsize>(img.labels.size()));
    if (!f.good()) fail_io("write failed for record " + path.string());
}

LabeledImage read_record(const std::filesystem::path& path, int* num_classes) {
    ensure_little_endian();
    std::ifstream f(path, std::ios::binary);
    if (!f) fail_io("cannot open record " + path.string());
    char magic[sizeof(kRecordMagic)];
    f.read(magic, sizeof(magic));
    if (!f || std::memcmp(magic, kRecordMagic, sizeof(magic)) != 0) {
        fail_io("bad magic in record " + path.string());
    }
    LabeledImage img;
    img.height = static_cast<int>(read_u32(f, path.string()));
    img.width = static_cast<int>(read_u32(f, path.string()));
    const auto C = read_u32(f, path.string());
    if (img.height <= 0 || img.width <= 0 || C == 0) {
        fail_io("corrupt header in record " + path.string());
    }
    const std::size_t hw = static_cast<std::size_t>(img.height) * img.width;
    img.pixels.resize(3 * hw);
    img.labels.resize(hw);
    f.read(reinterpret_cast<char*>(img.pixels.data()),
           static_cast<std::streamsize>(img.pixels.size() * sizeof(float)));
    f.read(reinterpret_cast<char*>(img.labels.data()), static_cast<std::streamsize>(hw));
    if (!f) fail_io("truncated record " + path.string());
    for (auto l : img.labels) {
        if (l != kIgnoreLabel && l >= C) fail_io("label out of range in record " + path.string());
    }
    if (num_classes) *num_classes = static_cast<int>(C);
    return img;
}

std::vector<std::pair<std::string, std::string>> serialize_spec(const DomainSpec& spec) {
    std::vector<std::pair<std::string, std::string>> kv;
    kv.emplace_back("n_images", std::to_string(spec.n_images));
    kv.emplace_back("height", std::to_string(spec.height));
    kv.emplace_back("width", std::to_string(spec.width));
    kv.emplace_back("num_classes", std::to_string(spec.num_classes));
    std::string freq;
    for (std::size_t i = 0; i < spec.class_freq_targets.size(); ++i) {
        if (i) freq += ",";
        freq += format_exact(spec.class_freq_targets[i]);
    }
    kv.emplace_back("class_freq_targets", freq);
    std::string palette;
    for (std::size_t i = 0; i < spec.palette_mean.size(); ++i) {
        if (i) palette += ";";
        palette += format_exact(spec.palette_mean[i][0]) + "," +
                   format_exact(spec.palette_mean[i][1]) + "," +
                   format_exact(spec.palette_mean[i][2]);
    }
    kv.emplace_back("palette_mean", palette);
    std::string noise;
    for (std::size_t i = 0; i < spec.palette_noise.size(); ++i) {
        if (i) noise += ",";
        noise += format_exact(spec.palette_noise[i]);
    }
    kv.emplace_back("palette_noise", noise);
    kv.emplace_back("shift_hue", format_exact(spec.shift.hue));
    kv.emplace_back("shift_brightness", format_exact(spec.shift.brightness));
    kv.emplace_back("shift_noise_sigma", format_exact(spec.shift.noise_sigma));
    kv.emplace_back("seed", std::to_string(spec.seed));
    return kv;
}

DomainSpec parse_spec(const std::vector<std::pair<std::string, std::string>>& kv) {
    DomainSpec spec;
    for (const auto& [key, value] : kv) {
        if (key == "n_images") {
            spec.n_images = static_cast<int>(parse_int(value, key));
        } else if (key == "height") {
            spec.height = static_cast<int>(parse_int(value, key));
        } else if (key == "width") {
            spec.width = static_cast<int>(parse_int(value, key));
        } else if (key == "num_classes") {
            spec.num_classes = static_cast<int>(parse_int(value, key));
        } else if (key == "class_freq_targets") {
            spec.class_freq_targets.clear();
            for (const auto& cell : split(value, ',')) {
                spec.class_freq_targets.push_back(parse_double(cell, key));
            }
        } else if (key == "palette_mean") {
            spec.palette_mean.clear();
            for (const auto& entry : split(value, ';')) {
                auto rgb = split(entry, ',');
                if (rgb.size() != 3) fail_invalid("palette_mean entries need 3 components");
                spec.palette_mean.push_back({parse_double(rgb[0], key), parse_double(rgb[1], key),
                                             parse_double(rgb[2], key)});
            }
        } else if (key == "palette_noise") {
            spec.palette_noise.clear();
            for (const auto& cell : split(value, ',')) {
                spec.palette_noise.push_back(parse_double(cell, key));
            }
        } else if (key == "shift_hue") {
            spec.shift.hue = parse_double(value, key);
        } else if (key == "shift_brightness") {
            spec.shift.brightness = parse_double(value, key);
        } else if (key == "shift_noise_sigma") {
            spec.shift.noise_sigma = parse_double(value, key);
        } else if (key == "seed") {
            spec.seed = static_cast<std::uint64_t>(parse_int(value, key));
        } else {
            fail_invalid("unknown domain-spec key '" + key + "'");
        }
    }
    return spec;
}

void write_dataset(const std::filesystem::path& dir, const Dataset& data,
                   const DomainSpec& spec) {
    namespace fs = std::filesystem;
    fs::create_directories(dir / "records");
    std::ofstream index(dir / "index.txt");
    if (!index) fail_io("cannot write " + (dir / "index.txt").string());
    index << "CALSEG-INDEX 1\n[spec]\n";
    for (const auto& [k, v] : serialize_spec(spec)) index << k << "=" << v << "\n";
    index << "[records]\n";
    char name[32];
    for (std::size_t i = 0; i < data.size(); ++i) {
        std::snprintf(name, sizeof(name), "records/img_%06zu.bin", i);
        write_record(dir / name, data[i], spec.num_classes);
        index << name << "\n";
    }
    if (!index.good()) fail_io("write failed for " + (dir / "index.txt").string());
}

Dataset load_dataset(const std::filesystem::path& dir, DomainSpec* spec_out) {
    std::ifstream index(dir / "index.txt");
    if (!index) fail_io("cannot open dataset index " + (dir / "index.txt").string());
    std::string line;
    if (!std::getline(index, line) || trim(line) != "CALSEG-INDEX 1") {
        fail_io("bad dataset index header in " + (dir / "index.txt").string());
    }
    std::vector<std::pair<std::string, std::string>> kv;
    std::vector<std::string> records;
    enum { none, spec_section, record_section } section = none;
    while (std::getline(index, line)) {
        auto t = std::string(trim(line));
        if (t.empty()) continue;
        if (t == "[spec]") {
            section = spec_section;
        } else if (t == "[records]") {
            section = record_section;
        } else if (section == spec_section) {
            auto pos = t.find('=');
            if (pos == std::string::npos) fail_io("malformed spec line in dataset index");
            kv.emplace_back(t.substr(0, pos), t.substr(pos + 1));
        } else if (section == record_section) {
            records.push_back(t);
        } else {
            fail_io("unexpected content in dataset index " + (dir / "index.txt").string());
        }
    }
    DomainSpec spec = parse_spec(kv);
    Dataset data;
    data.reserve(records.size());
    for (const auto& rec : records) {
        int classes = 0;
        data.push_back(read_record(dir / rec, &classes));
        if (classes != spec.num_classes) {
            fail_io("record " + rec + " class count disagrees with the dataset spec");
        }
    }
    if (spec_out) *spec_out = spec;
    return data;
}

}  // namespace calseg
