#include "dpflow/model.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <stdexcept>

namespace dpflow {

static_assert(std::endian::native == std::endian::little, "container I/O assumes a little-endian host");

template <class T>
DPFlowModel<T> DPFlowModel<T>::make(const ModelConfig& config, std::uint64_t seed) {
    if (config.iters < 1) throw std::invalid_argument("model needs at least one refinement iteration");
    Initializer init(seed);
    DPFlowModel m;
    m.config = config;
    m.encoder = EncoderParams<T>::make(init, config.width);
    m.decoder = DecoderParams<T>::make(init, config.width, config.radius);
    return m;
}

template <class T>
std::vector<nn::Var<T>> DPFlowModel<T>::parameters() const {
    std::vector<nn::Var<T>> out;
    visit([&](const std::string&, const nn::Var<T>& v) { out.push_back(v); });
    return out;
}

template <class T>
std::size_t DPFlowModel<T>::parameter_count() const {
    std::size_t n = 0;
    for (const auto& p : parameters()) n += p->value.numel();
    return n;
}

template <class T>
std::vector<ScalePrediction<T>> DPFlowModel<T>::forward(const ImagePair& pair, int n_levels,
                                                        const DecodeOptions& options) const {
    const auto p1 = encode(encoder, pair.first, n_levels);
    const auto p2 = encode(encoder, pair.second, n_levels);
    return decode(decoder, p1, p2, pair.first.height(), pair.first.width(), options);
}

template <class T>
template <class U>
DPFlowModel<U> DPFlowModel<T>::cast() const {
    auto out = DPFlowModel<U>::make(config, 0);
    const auto src = parameters();
    const auto dst = out.parameters();
    for (std::size_t i = 0; i < src.size(); ++i) dst[i]->value = src[i]->value.template cast<U>();
    return out;
}

namespace {

template <class V>
void put(std::ofstream& os, V value) {
    os.write(reinterpret_cast<const char*>(&value), sizeof(V));
}

template <class V>
V get(std::ifstream& is, const std::string& path) {
    V value{};
    const auto offset = is.tellg();
    if (!is.read(reinterpret_cast<char*>(&value), sizeof(V))) {
        throw std::runtime_error(path + ": truncated container at byte " + std::to_string(offset));
    }
    return value;
}

}  // namespace

void write_container(const std::string& path, const std::vector<NamedArray>& arrays) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw std::runtime_error("cannot open " + path + " for writing");
    os.write("DPFK", 4);
    put(os, kContainerVersion);
    for (const auto& a : arrays) {
        if (a.name.size() > 0xffff) throw std::invalid_argument("array name too long: " + a.name);
        if (a.dims.size() > 0xff) throw std::invalid_argument("array rank too large: " + a.name);
        std::size_t n = 1;
        for (auto d : a.dims) n *= d;
        if (n != a.data.size()) throw std::invalid_argument("array " + a.name + " dims do not match its data");
        put(os, static_cast<std::uint16_t>(a.name.size()));
        os.write(a.name.data(), static_cast<std::streamsize>(a.name.size()));
        put(os, static_cast<std::uint8_t>(a.dims.size()));
        for (auto d : a.dims) put(os, d);
        os.write(reinterpret_cast<const char*>(a.data.data()), static_cast<std::streamsize>(n * sizeof(float)));
    }
    if (!os) throw std::runtime_error("failed writing " + path);
}

std::vector<NamedArray> read_container(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("cannot open " + path);
    char magic[4];
    if (!is.read(magic, 4) || std::memcmp(magic, "DPFK", 4) != 0) {
        throw std::runtime_error(path + ": bad container magic at byte 0");
    }
    const auto version = get<std::uint32_t>(is, path);
    if (version != kContainerVersion) {
        throw std::runtime_error(path + ": unsupported container version " + std::to_string(version));
    }
    std::vector<NamedArray> arrays;
    while (is.peek() != std::ifstream::traits_type::eof()) {
        NamedArray a;
        const auto len = get<std::uint16_t>(is, path);
        a.name.resize(len);
        if (!is.read(a.name.data(), len)) throw std::runtime_error(path + ": truncated array name");
        const auto rank = get<std::uint8_t>(is, path);
        std::size_t n = 1;
        for (int i = 0; i < rank; ++i) {
            a.dims.push_back(get<std::uint32_t>(is, path));
            n *= a.dims.back();
        }
        a.data.resize(n);
        const auto offset = is.tellg();
        if (!is.read(reinterpret_cast<char*>(a.data.data()), static_cast<std::streamsize>(n * sizeof(float)))) {
            throw std::runtime_error(path + ": truncated payload of " + a.name + " at byte " + std::to_string(offset));
        }
        arrays.push_back(std::move(a));
    }
    return arrays;
}

template <class T>
std::vector<NamedArray> model_arrays(const DPFlowModel<T>& model) {
    std::vector<NamedArray> out;
    const auto& c = model.config;
    out.push_back({"config", {5},
                   {float(c.width), float(c.radius), float(c.iters), float(c.reference.width),
                    float(c.reference.height)}});
    model.visit([&](const std::string& name, const nn::Var<T>& v) {
        NamedArray a{name, {}, {}};
        for (int d : v->value.shape()) a.dims.push_back(static_cast<std::uint32_t>(d));
        a.data.assign(v->value.data(), v->value.data() + v->value.numel());
        out.push_back(std::move(a));
    });
    return out;
}

DPFlowModel<float> model_from_arrays(const std::vector<NamedArray>& arrays) {
    std::map<std::string, const NamedArray*> by_name;
    for (const auto& a : arrays) by_name[a.name] = &a;
    auto it = by_name.find("config");
    if (it == by_name.end() || it->second->data.size() != 5) throw std::runtime_error("container has no model config");
    const auto& cv = it->second->data;
    ModelConfig config;
    config.width = static_cast<int>(cv[0]);
    config.radius = static_cast<int>(cv[1]);
    config.iters = static_cast<int>(cv[2]);
    config.reference = {static_cast<int>(cv[3]), static_cast<int>(cv[4])};
    auto model = DPFlowModel<float>::make(config, 0);
    model.visit([&](const std::string& name, const nn::Var<float>& v) {
        auto found = by_name.find(name);
        if (found == by_name.end()) throw std::runtime_error("container is missing parameter " + name);
        const auto& a = *found->second;
        std::vector<int> shape(a.dims.begin(), a.dims.end());
        if (shape != v->value.shape()) throw std::runtime_error("parameter " + name + " has the wrong shape");
        std::copy(a.data.begin(), a.data.end(), v->value.data());
    });
    return model;
}

void save_model(const DPFlowModel<float>& model, const std::string& path) { write_container(path, model_arrays(model)); }

DPFlowModel<float> load_model(const std::string& path) { return model_from_arrays(read_container(path)); }

template struct DPFlowModel<float>;
template struct DPFlowModel<double>;
template DPFlowModel<double> DPFlowModel<float>::cast<double>() const;
template DPFlowModel<float> DPFlowModel<double>::cast<float>() const;
template DPFlowModel<float> DPFlowModel<float>::cast<float>() const;
template std::vector<NamedArray> model_arrays(const DPFlowModel<float>&);
template std::vector<NamedArray> model_arrays(const DPFlowModel<double>&);

}  // namespace dpflow
