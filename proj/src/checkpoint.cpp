#include "memat/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>

namespace memat {

static_assert(std::endian::native == std::endian::little, "writer assumes a little-endian host");

namespace {

constexpr char kMagic[9] = {'M', 'E', 'M', 'A', 'T', 'C', 'K', 'P', 'T'};
constexpr char kTensorMagic[9] = {'M', 'E', 'M', 'A', 'T', 'T', 'E', 'N', 'S'};
constexpr uint32_t kVersion = 1;

void put(std::ostream& out, const void* data, size_t n) {
    out.write(static_cast<const char*>(data), static_cast<std::streamsize>(n));
}

template <typename T>
void put_pod(std::ostream& out, T v) {
    put(out, &v, sizeof(T));
}

void put_str(std::ostream& out, const std::string& s) {
    put_pod<uint32_t>(out, static_cast<uint32_t>(s.size()));
    put(out, s.data(), s.size());
}

void get(std::istream& in, void* data, size_t n, const char* what) {
    in.read(static_cast<char*>(data), static_cast<std::streamsize>(n));
    if (static_cast<size_t>(in.gcount()) != n)
        throw IoError(std::string("checkpoint truncated while reading ") + what);
}

template <typename T>
T get_pod(std::istream& in, const char* what) {
    T v;
    get(in, &v, sizeof(T), what);
    return v;
}

std::string get_str(std::istream& in, const char* what) {
    const auto n = get_pod<uint32_t>(in, what);
    if (n > (1u << 20)) throw IoError(std::string("implausible string length for ") + what);
    std::string s(n, '\0');
    get(in, s.data(), n, what);
    return s;
}

}  // namespace

void save_model(const std::filesystem::path& path, const ModelParams& params,
                const CheckpointMeta& meta) {
    params.config.validate();
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open " + path.string() + " for writing");

    put(out, kMagic, sizeof(kMagic));
    put_pod<uint32_t>(out, kVersion);

    const ModelConfig& c = params.config;
    put_pod<int32_t>(out, c.n_layers);
    put_pod<int32_t>(out, c.n_heads);
    put_pod<int32_t>(out, c.d_model);
    put_pod<int32_t>(out, c.d_ff);
    put_pod<int32_t>(out, c.vocab_size);
    put_pod<int32_t>(out, c.max_seq_len);
    put_pod<uint8_t>(out, static_cast<uint8_t>(c.activation));
    put_pod<uint8_t>(out, static_cast<uint8_t>(c.positional));
    put_pod<uint8_t>(out, c.layernorm ? 1 : 0);
    put_pod<uint64_t>(out, c.seed);

    put_pod<uint32_t>(out, static_cast<uint32_t>(meta.size()));
    for (const auto& [key, value] : meta) {
        put_str(out, key);
        put_str(out, value);
    }

    uint32_t count = 0;
    params.for_each_tensor([&](const std::string&, const Mat&) { ++count; });
    put_pod<uint32_t>(out, count);
    std::vector<float> buf;
    params.for_each_tensor([&](const std::string& name, const Mat& m) {
        put_str(out, name);
        put_pod<uint32_t>(out, 2);  // rank
        put_pod<uint32_t>(out, static_cast<uint32_t>(m.rows()));
        put_pod<uint32_t>(out, static_cast<uint32_t>(m.cols()));
        buf.resize(static_cast<size_t>(m.size()));
        for (Eigen::Index i = 0; i < m.size(); ++i) buf[static_cast<size_t>(i)] = static_cast<float>(m.data()[i]);
        put(out, buf.data(), buf.size() * sizeof(float));
    });
    if (!out) throw IoError("write failed for " + path.string());
}

LoadedModel load_model(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open " + path.string());

    char magic[sizeof(kMagic)];
    get(in, magic, sizeof(magic), "magic");
    if (std::memcmp(magic, kMagic, sizeof(kMagic)) != 0)
        throw IoError(path.string() + " is not a model checkpoint");
    const auto version = get_pod<uint32_t>(in, "version");
    if (version != kVersion)
        throw IoError("unsupported checkpoint version " + std::to_string(version));

    LoadedModel out;
    ModelConfig& c = out.params.config;
    c.n_layers = get_pod<int32_t>(in, "n_layers");
    c.n_heads = get_pod<int32_t>(in, "n_heads");
    c.d_model = get_pod<int32_t>(in, "d_model");
    c.d_ff = get_pod<int32_t>(in, "d_ff");
    c.vocab_size = get_pod<int32_t>(in, "vocab_size");
    c.max_seq_len = get_pod<int32_t>(in, "max_seq_len");
    c.activation = static_cast<Activation>(get_pod<uint8_t>(in, "activation"));
    c.positional = static_cast<Positional>(get_pod<uint8_t>(in, "positional"));
    c.layernorm = get_pod<uint8_t>(in, "layernorm") != 0;
    c.seed = get_pod<uint64_t>(in, "seed");
    c.validate();

    const auto meta_count = get_pod<uint32_t>(in, "metadata count");
    for (uint32_t i = 0; i < meta_count; ++i) {
        std::string key = get_str(in, "metadata key");
        out.meta[key] = get_str(in, "metadata value");
    }

    out.params = allocate_params(c);
    struct Slot {
        Mat* mat = nullptr;
        bool filled = false;
    };
    std::map<std::string, Slot> slots;
    out.params.for_each_tensor([&](const std::string& name, Mat& m) { slots[name] = Slot{&m}; });

    const auto tensor_count = get_pod<uint32_t>(in, "tensor count");
    if (tensor_count != slots.size())
        throw IoError("checkpoint lists " + std::to_string(tensor_count) + " tensors, expected " +
                      std::to_string(slots.size()));
    std::vector<float> buf;
    for (uint32_t i = 0; i < tensor_count; ++i) {
        const std::string name = get_str(in, "tensor name");
        auto it = slots.find(name);
        if (it == slots.end()) throw IoError("unknown tensor " + name + " in checkpoint");
        if (it->second.filled) throw IoError("tensor " + name + " appears twice");
        Mat& m = *it->second.mat;
        const auto rank = get_pod<uint32_t>(in, "tensor rank");
        if (rank != 2) throw IoError("tensor " + name + " has unsupported rank");
        const auto rows = get_pod<uint32_t>(in, "tensor rows");
        const auto cols = get_pod<uint32_t>(in, "tensor cols");
        if (rows != static_cast<uint32_t>(m.rows()) || cols != static_cast<uint32_t>(m.cols()))
            throw IoError("tensor " + name + " has shape " + std::to_string(rows) + "x" +
                          std::to_string(cols) + ", expected " + std::to_string(m.rows()) + "x" +
                          std::to_string(m.cols()));
        buf.resize(static_cast<size_t>(rows) * cols);
        get(in, buf.data(), buf.size() * sizeof(float), name.c_str());
        for (Eigen::Index j = 0; j < m.size(); ++j) m.data()[j] = static_cast<double>(buf[static_cast<size_t>(j)]);
        it->second.filled = true;
    }
    out.params.check_finite("loaded checkpoint");
    return out;
}

void save_tensor_file(const std::filesystem::path& path, const std::string& kind,
                      const TensorFile& file) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open " + path.string() + " for writing");

    put(out, kTensorMagic, sizeof(kTensorMagic));
    put_pod<uint32_t>(out, kVersion);
    put_str(out, kind);

    put_pod<uint32_t>(out, static_cast<uint32_t>(file.meta.size()));
    for (const auto& [key, value] : file.meta) {
        put_str(out, key);
        put_str(out, value);
    }

    put_pod<uint32_t>(out, static_cast<uint32_t>(file.tensors.size()));
    std::vector<float> buf;
    for (const auto& [name, m] : file.tensors) {
        put_str(out, name);
        put_pod<uint32_t>(out, 2);  // rank
        put_pod<uint32_t>(out, static_cast<uint32_t>(m.rows()));
        put_pod<uint32_t>(out, static_cast<uint32_t>(m.cols()));
        buf.resize(static_cast<size_t>(m.size()));
        for (Eigen::Index i = 0; i < m.size(); ++i)
            buf[static_cast<size_t>(i)] = static_cast<float>(m.data()[i]);
        put(out, buf.data(), buf.size() * sizeof(float));
    }
    if (!out) throw IoError("write failed for " + path.string());
}

TensorFile load_tensor_file(const std::filesystem::path& path, const std::string& kind) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open " + path.string());

    char magic[sizeof(kTensorMagic)];
    get(in, magic, sizeof(magic), "magic");
    if (std::memcmp(magic, kTensorMagic, sizeof(kTensorMagic)) != 0)
        throw IoError(path.string() + " is not a tensor file");
    const auto version = get_pod<uint32_t>(in, "version");
    if (version != kVersion)
        throw IoError("unsupported tensor file version " + std::to_string(version));
    const std::string have_kind = get_str(in, "kind");
    if (have_kind != kind)
        throw IoError(path.string() + " holds '" + have_kind + "' data, expected '" + kind + "'");

    TensorFile out;
    const auto meta_count = get_pod<uint32_t>(in, "metadata count");
    for (uint32_t i = 0; i < meta_count; ++i) {
        std::string key = get_str(in, "metadata key");
        out.meta[key] = get_str(in, "metadata value");
    }

    const auto tensor_count = get_pod<uint32_t>(in, "tensor count");
    std::vector<float> buf;
    for (uint32_t i = 0; i < tensor_count; ++i) {
        std::string name = get_str(in, "tensor name");
        const auto rank = get_pod<uint32_t>(in, "tensor rank");
        if (rank != 2) throw IoError("tensor " + name + " has unsupported rank");
        const auto rows = get_pod<uint32_t>(in, "tensor rows");
        const auto cols = get_pod<uint32_t>(in, "tensor cols");
        if (static_cast<uint64_t>(rows) * cols > (1ull << 28))
            throw IoError("implausible tensor size for " + name);
        Mat m(rows, cols);
        buf.resize(static_cast<size_t>(m.size()));
        get(in, buf.data(), buf.size() * sizeof(float), name.c_str());
        for (Eigen::Index j = 0; j < m.size(); ++j)
            m.data()[j] = static_cast<double>(buf[static_cast<size_t>(j)]);
        if (!all_finite(m)) throw IoError("tensor " + name + " holds non-finite values");
        out.tensors.emplace_back(std::move(name), std::move(m));
    }
    return out;
}

}  // namespace memat
