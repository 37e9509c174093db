#include "combo/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <map>
#include <stdexcept>
#include <vector>

#include <json.hpp>

namespace combo {

namespace {

using ordered_json = nlohmann::ordered_json;

static_assert(std::endian::native == std::endian::little,
              "checkpoint format assumes a little-endian host");

constexpr char kMagic[8] = {'C', 'M', 'B', 'O', 'C', 'K', 'P', '1'};

template <class T>
void write_pod(std::ostream& out, const T& v) {
    out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <class T>
T read_pod(std::istream& in) {
    T v{};
    in.read(reinterpret_cast<char*>(&v), sizeof(T));
    if (!in) throw std::runtime_error("checkpoint: truncated file");
    return v;
}

void write_string(std::ostream& out, const std::string& s) {
    write_pod<std::uint32_t>(out, static_cast<std::uint32_t>(s.size()));
    out.write(s.data(), static_cast<std::streamsize>(s.size()));
}

std::string read_string(std::istream& in) {
    auto len = read_pod<std::uint32_t>(in);
    std::string s(len, '\0');
    in.read(s.data(), len);
    if (!in) throw std::runtime_error("checkpoint: truncated file");
    return s;
}

template <class T>
void write_array(std::ostream& out, const std::string& name, const Tensor<T>& t,
                 std::uint8_t dtype) {
    write_string(out, name);
    write_pod<std::uint8_t>(out, dtype);
    write_pod<std::uint32_t>(out, static_cast<std::uint32_t>(t.shape.size()));
    for (std::size_t d : t.shape) write_pod<std::uint64_t>(out, d);
    out.write(reinterpret_cast<const char*>(t.data.data()),
              static_cast<std::streamsize>(t.data.size() * sizeof(T)));
}

ordered_json model_config_json(const ModelConfig& cfg) {
    ordered_json j;
    j["n_queries"] = cfg.n_queries;
    j["query_dim"] = cfg.query_dim;
    j["decoder_layers"] = cfg.decoder_layers;
    j["max_classes"] = cfg.max_classes;
    j["adapter_rank"] = cfg.adapter_rank;
    j["backbone_channels"] = cfg.backbone_channels;
    j["height"] = cfg.height;
    j["width"] = cfg.width;
    return j;
}

ModelConfig model_config_from_json(const ordered_json& j) {
    ModelConfig cfg;
    cfg.n_queries = j.at("n_queries").get<std::size_t>();
    cfg.query_dim = j.at("query_dim").get<std::size_t>();
    cfg.decoder_layers = j.at("decoder_layers").get<std::size_t>();
    cfg.max_classes = j.at("max_classes").get<std::size_t>();
    cfg.adapter_rank = j.at("adapter_rank").get<std::size_t>();
    cfg.backbone_channels = j.at("backbone_channels").get<std::size_t>();
    cfg.height = j.at("height").get<std::size_t>();
    cfg.width = j.at("width").get<std::size_t>();
    return cfg;
}

}  // namespace

void save_checkpoint(const ModelState& model, const ImportanceVector& importance,
                     const std::filesystem::path& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("checkpoint: cannot write " + path.string());
    out.write(kMagic, sizeof(kMagic));

    ordered_json meta;
    meta["version"] = 1;
    meta["model_config"] = model_config_json(model.config());
    meta["step"] = model.step();
    ordered_json class_steps;
    for (const auto& [cid, t] : model.class_steps()) class_steps[std::to_string(cid)] = t;
    meta["class_steps"] = class_steps;
    ordered_json adapters = ordered_json::array();
    for (const auto& [cid, adapter] : model.adapters()) {
        ordered_json a;
        a["class_id"] = cid;
        a["frozen"] = adapter.frozen;
        a["created_step"] = adapter.created_step;
        adapters.push_back(a);
    }
    meta["adapters"] = adapters;
    ordered_json trainable;
    model.for_each_param([&](const std::string& name, const ad::Var<float>& v) {
        trainable[name] = v.requires_grad();
    });
    meta["trainable"] = trainable;
    meta["importance_step"] = importance.step;
    std::string meta_str = meta.dump();
    write_pod<std::uint64_t>(out, meta_str.size());
    out.write(meta_str.data(), static_cast<std::streamsize>(meta_str.size()));

    std::uint64_t count = 1;  // importance
    model.for_each_param([&](const std::string&, const ad::Var<float>&) { ++count; });
    write_pod<std::uint64_t>(out, count);
    model.for_each_param([&](const std::string& name, const ad::Var<float>& v) {
        write_array(out, name, v.value(), 0);
    });
    Tensor<double> imp({importance.values.size()}, importance.values);
    write_array(out, "importance", imp, 1);
    if (!out) throw std::runtime_error("checkpoint: write failure on " + path.string());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("checkpoint: cannot read " + path.string());
    char magic[8];
    in.read(magic, 8);
    if (!in || std::memcmp(magic, kMagic, 8) != 0)
        throw std::runtime_error("checkpoint: bad magic in " + path.string());

    auto meta_len = read_pod<std::uint64_t>(in);
    std::string meta_str(meta_len, '\0');
    in.read(meta_str.data(), static_cast<std::streamsize>(meta_len));
    if (!in) throw std::runtime_error("checkpoint: truncated meta");
    ordered_json meta = ordered_json::parse(meta_str);
    if (meta.at("version").get<int>() != 1)
        throw std::runtime_error("checkpoint: unsupported version");

    ModelConfig cfg = model_config_from_json(meta.at("model_config"));
    Checkpoint ckpt{ModelState(cfg, 0), ImportanceVector{}};

    // Adapters first so parameter arrays can land in them.
    std::map<ClassId, std::pair<bool, int>> adapter_meta;
    for (const auto& a : meta.at("adapters"))
        adapter_meta[a.at("class_id").get<int>()] = {a.at("frozen").get<bool>(),
                                                     a.at("created_step").get<int>()};
    for (const auto& [cid, fm] : adapter_meta) {
        ckpt.model.restore_adapter(cid, Tensor<float>({cfg.query_dim, cfg.adapter_rank}),
                                   Tensor<float>({cfg.adapter_rank, cfg.query_dim}), fm.first,
                                   fm.second);
    }

    auto count = read_pod<std::uint64_t>(in);
    bool importance_seen = false;
    for (std::uint64_t i = 0; i < count; ++i) {
        std::string name = read_string(in);
        auto dtype = read_pod<std::uint8_t>(in);
        auto ndim = read_pod<std::uint32_t>(in);
        std::vector<std::size_t> shape(ndim);
        std::size_t total = 1;
        for (auto& d : shape) {
            d = read_pod<std::uint64_t>(in);
            total *= d;
        }
        if (name == "importance") {
            if (dtype != 1) throw std::runtime_error("checkpoint: importance must be f64");
            ckpt.importance.values.resize(total);
            in.read(reinterpret_cast<char*>(ckpt.importance.values.data()),
                    static_cast<std::streamsize>(total * sizeof(double)));
            importance_seen = true;
        } else {
            if (dtype != 0) throw std::runtime_error("checkpoint: parameters must be f32");
            std::vector<float> data(total);
            in.read(reinterpret_cast<char*>(data.data()),
                    static_cast<std::streamsize>(total * sizeof(float)));
            Tensor<float> t(shape, std::move(data));
            if (name.rfind("adapter.", 0) == 0) {
                std::size_t dot = name.rfind('.');
                ClassId cid = std::stoi(name.substr(8, dot - 8));
                auto it = ckpt.model.adapters().find(cid);
                if (it == ckpt.model.adapters().end())
                    throw std::runtime_error("checkpoint: adapter array without metadata: " + name);
                auto& target = name.substr(dot + 1) == "w1" ? it->second.w1 : it->second.w2;
                if (target.value().shape != t.shape)
                    throw std::runtime_error("checkpoint: shape mismatch for " + name);
                target.value_mut() = std::move(t);
            } else {
                auto& var = ckpt.model.param(name);
                if (var.value().shape != t.shape)
                    throw std::runtime_error("checkpoint: shape mismatch for " + name);
                var.value_mut() = std::move(t);
            }
        }
        if (!in) throw std::runtime_error("checkpoint: truncated array data");
    }
    if (!importance_seen) throw std::runtime_error("checkpoint: missing importance array");

    std::map<ClassId, int> class_steps;
    for (const auto& [key, val] : meta.at("class_steps").items())
        class_steps[std::stoi(key)] = val.get<int>();
    ckpt.model.restore_meta(meta.at("step").get<int>(), class_steps);
    ckpt.importance.step = meta.at("importance_step").get<int>();
    return ckpt;
}

}  // namespace combo
