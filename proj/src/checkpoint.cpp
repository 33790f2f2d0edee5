#include "calseg/checkpoint.hpp"

#include <cstring>
#include <fstream>

namespace calseg {

namespace {

constexpr char kMagic[8] = {'C', 'A', 'L', 'C', 'K', 'P', 'T', '1'};

void write_u32(std::ofstream& f, std::uint32_t v) {
    f.write(reinterpret_cast<const char*>(&v), sizeof(v));
}

void write_f64(std::ofstream& f, double v) {
    f.write(reinterpret_cast<const char*>(&v), sizeof(v));
}

void write_string(std::ofstream& f, const std::string& s) {
    write_u32(f, static_cast<std::uint32_t>(s.size()));
    f.write(s.data(), static_cast<std::streamsize>(s.size()));
}

std::uint32_t read_u32(std::ifstream& f, const std::string& path) {
    std::uint32_t v = 0;
    f.read(reinterpret_cast<char*>(&v), sizeof(v));
    if (!f) fail_io("truncated checkpoint " + path);
    return v;
}

double read_f64(std::ifstream& f, const std::string& path) {
    double v = 0;
    f.read(reinterpret_cast<char*>(&v), sizeof(v));
    if (!f) fail_io("truncated checkpoint " + path);
    return v;
}

std::string read_string(std::ifstream& f, const std::string& path) {
    const auto n = read_u32(f, path);
    if (n > (1u << 20)) fail_io("implausible string length in checkpoint " + path);
    std::string s(n, '\0');
    f.read(s.data(), n);
    if (!f) fail_io("truncated checkpoint " + path);
    return s;
}

}  // namespace

const Checkpoint::Array* Checkpoint::find(const std::string& name) const {
    for (const auto& a : arrays) {
        if (a.name == name) return &a;
    }
    return nullptr;
}

double Checkpoint::metric(const std::string& name) const {
    for (const auto& [k, v] : metrics) {
        if (k == name) return v;
    }
    fail_state("checkpoint has no metric '" + name + "'");
}

bool Checkpoint::has_metric(const std::string& name) const {
    for (const auto& [k, v] : metrics) {
        if (k == name) return true;
    }
    return false;
}

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path) {
    std::ofstream f(path, std::ios::binary);
    if (!f) fail_io("cannot write checkpoint " + path.string());
    f.write(kMagic, sizeof(kMagic));
    write_u32(f, ckpt.version);
    write_string(f, ckpt.stage);
    write_u32(f, static_cast<std::uint32_t>(ckpt.arrays.size()));
    for (const auto& a : ckpt.arrays) {
        write_string(f, a.name);
        write_u32(f, static_cast<std::uint32_t>(a.shape.size()));
        for (int d : a.shape) write_u32(f, static_cast<std::uint32_t>(d));
        f.write(reinterpret_cast<const char*>(a.values.data()),
                static_cast<std::streamsize>(a.values.size() * sizeof(float)));
    }
    write_u32(f, static_cast<std::uint32_t>(ckpt.metrics.size()));
    for (const auto& [k, v] : ckpt.metrics) {
        write_string(f, k);
        write_f64(f, v);
    }
    if (!f.good()) fail_io("write failed for checkpoint " + path.string());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) fail_io("cannot open checkpoint " + path.string());
    char magic[sizeof(kMagic)];
    f.read(magic, sizeof(magic));
    if (!f || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0) {
        fail_io("bad magic in checkpoint " + path.string());
    }
    Checkpoint ckpt;
    ckpt.version = read_u32(f, path.string());
    if (ckpt.version != 1) fail_io("unsupported checkpoint version in " + path.string());
    ckpt.stage = read_string(f, path.string());
    const auto n_arrays = read_u32(f, path.string());
    ckpt.arrays.resize(n_arrays);
    for (auto& a : ckpt.arrays) {
        a.name = read_string(f, path.string());
        const auto ndim = read_u32(f, path.string());
        if (ndim > 8) fail_io("implausible array rank in checkpoint " + path.string());
        std::int64_t numel = 1;
        a.shape.resize(ndim);
        for (auto& d : a.shape) {
            d = static_cast<int>(read_u32(f, path.string()));
            numel *= d;
        }
        if (numel < 0 || numel > (1ll << 30)) {
            fail_io("implausible array size in checkpoint " + path.string());
        }
        a.values.resize(static_cast<std::size_t>(numel));
        f.read(reinterpret_cast<char*>(a.values.data()),
               static_cast<std::streamsize>(a.values.size() * sizeof(float)));
        if (!f) fail_io("truncated checkpoint " + path.string());
    }
    const auto n_metrics = read_u32(f, path.string());
    ckpt.metrics.resize(n_metrics);
    for (auto& [k, v] : ckpt.metrics) {
        k = read_string(f, path.string());
        v = read_f64(f, path.string());
    }
    return ckpt;
}

namespace {

template <class Net>
void store_net(Checkpoint& ckpt, Net& net) {
    for (auto& p : net.params()) {
        Checkpoint::Array a;
        a.name = p.name;
        a.shape = p.tensor.shape();
        auto d = p.tensor.data();
        a.values.assign(d.begin(), d.end());
        ckpt.arrays.push_back(std::move(a));
    }
    for (auto& b : net.buffers()) {
        Checkpoint::Array a;
        a.name = b.name;
        a.shape = {static_cast<int>(b.values->size())};
        a.values.assign(b.values->begin(), b.values->end());
        ckpt.arrays.push_back(std::move(a));
    }
}

template <class Net>
void restore_net(const Checkpoint& ckpt, Net& net) {
    for (auto& p : net.params()) {
        const auto* a = ckpt.find(p.name);
        if (!a) fail_state("checkpoint is missing array '" + p.name + "'");
        if (a->shape != p.tensor.shape()) {
            fail_state("checkpoint array '" + p.name + "' has shape mismatch");
        }
        auto d = p.tensor.data();
        std::copy(a->values.begin(), a->values.end(), d.begin());
    }
    for (auto& b : net.buffers()) {
        const auto* a = ckpt.find(b.name);
        if (!a) fail_state("checkpoint is missing buffer '" + b.name + "'");
        if (a->values.size() != b.values->size()) {
            fail_state("checkpoint buffer '" + b.name + "' has size mismatch");
        }
        std::copy(a->values.begin(), a->values.end(), b.values->begin());
    }
}

}  // namespace

void store_model(Checkpoint& ckpt, SegModel<float>& model) { store_net(ckpt, model); }
void store_model(Checkpoint& ckpt, ValueNet<float>& net) { store_net(ckpt, net); }
void restore_model(const Checkpoint& ckpt, SegModel<float>& model) { restore_net(ckpt, model); }
void restore_model(const Checkpoint& ckpt, ValueNet<float>& net) { restore_net(ckpt, net); }

bool checkpoint_has_valuenet(const Checkpoint& ckpt) {
    for (const auto& a : ckpt.arrays) {
        if (a.name.rfind("value.", 0) == 0) return true;
    }
    return false;
}

template <class T, class Net>
std::uint64_t state_checksum(Net& net, bool include_buffers,
                             const std::function<bool(const std::string&)>& name_filter) {
    std::uint64_t h = 1469598103934665603ull;
    for (auto& p : net.params()) {
        if (name_filter && !name_filter(p.name)) continue;
        h = fnv1a(p.name.data(), p.name.size(), h);
        auto d = p.tensor.data();
        h = fnv1a(d.data(), d.size() * sizeof(T), h);
    }
    if (include_buffers) {
        for (auto& b : net.buffers()) {
            if (name_filter && !name_filter(b.name)) continue;
            h = fnv1a(b.name.data(), b.name.size(), h);
            h = fnv1a(b.values->data(), b.values->size() * sizeof(T), h);
        }
    }
    return h;
}

template std::uint64_t state_checksum<float, SegModel<float>>(
    SegModel<float>&, bool, const std::function<bool(const std::string&)>&);
template std::uint64_t state_checksum<float, ValueNet<float>>(
    ValueNet<float>&, bool, const std::function<bool(const std::string&)>&);
template std::uint64_t state_checksum<double, SegModel<double>>(
    SegModel<double>&, bool, const std::function<bool(const std::string&)>&);
template std::uint64_t state_checksum<double, ValueNet<double>>(
    ValueNet<double>&, bool, const std::function<bool(const std::string&)>&);

}  // namespace calseg
