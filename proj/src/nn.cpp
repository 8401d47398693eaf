#include "camo/nn.hpp"

#include <json.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>

namespace camo::nn {

namespace fs = std::filesystem;
using nlohmann::json;

Conv2d::Conv2d(int in_ch, int out_ch, int k, int stride_, int pad_, Rng& rng)
    : stride(stride_), pad(pad_) {
    // He-style init scaled by fan-in.
    const double s = std::sqrt(2.0 / (in_ch * k * k));
    Tensor wt({out_ch, in_ch, k, k});
    for (auto& v : wt.data) v = rng.normal() * s;
    w = param(std::move(wt));
    b = param(Tensor::zeros({out_ch}));
}

Linear::Linear(int in_f, int out_f, Rng& rng) {
    const double s = std::sqrt(2.0 / in_f);
    Tensor wt({out_f, in_f});
    for (auto& v : wt.data) v = rng.normal() * s;
    w = param(std::move(wt));
    b = param(Tensor::zeros({out_f}));
}

void zero_grads(const ParamMap& params) {
    for (auto& [name, p] : params) {
        (void)name;
        p->grad_ready = false;
        p->grad = Tensor();
    }
}

void set_requires_grad(const ParamMap& params, bool value) {
    for (auto& [name, p] : params) {
        (void)name;
        p->requires_grad = value;
    }
}

uint64_t param_hash(const ParamMap& params) {
    // FNV-1a over the raw f64 bytes of every tensor, in map order.
    uint64_t h = 1469598103934665603ULL;
    auto mix = [&h](const void* data, size_t len) {
        const unsigned char* p = static_cast<const unsigned char*>(data);
        for (size_t i = 0; i < len; ++i) {
            h ^= p[i];
            h *= 1099511628211ULL;
        }
    };
    for (const auto& [name, p] : params) {
        mix(name.data(), name.size());
        mix(p->val.data.data(), p->val.data.size() * sizeof(double));
    }
    return h;
}

Adam::Adam(ParamMap params, double lr, double beta1, double beta2, double eps)
    : params_(std::move(params)), lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {
    for (auto& [name, p] : params_) {
        (void)name;
        m_.push_back(Tensor::zeros(p->val.shape));
        v_.push_back(Tensor::zeros(p->val.shape));
    }
}

void Adam::set_lr(double lr) { lr_ = lr; }

void Adam::step() {
    ++t_;
    const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
    for (size_t k = 0; k < params_.size(); ++k) {
        auto& p = params_[k].second;
        if (!p->grad_ready) continue;  // parameter unused this step
        auto& m = m_[k];
        auto& v = v_[k];
        for (size_t i = 0; i < p->val.data.size(); ++i) {
            const double g = p->grad.data[i];
            m.data[i] = beta1_ * m.data[i] + (1.0 - beta1_) * g;
            v.data[i] = beta2_ * v.data[i] + (1.0 - beta2_) * g * g;
            const double mh = m.data[i] / bc1;
            const double vh = v.data[i] / bc2;
            p->val.data[i] -= lr_ * mh / (std::sqrt(vh) + eps_);
        }
    }
}

static std::string blob_name(size_t index) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "tensor_%03zu.bin", index);
    return buf;
}

void save_checkpoint(const std::string& dir, const ParamMap& params, uint64_t config_hash,
                     const std::string& kind) {
    fs::create_directories(dir);
    json manifest;
    manifest["format_version"] = 1;
    manifest["kind"] = kind;
    manifest["config_hash"] = config_hash;
    json tensors = json::array();
    for (size_t k = 0; k < params.size(); ++k) {
        const auto& [name, p] = params[k];
        json t;
        t["name"] = name;
        t["shape"] = p->val.shape;
        t["dtype"] = "f32";
        t["file"] = blob_name(k);
        tensors.push_back(t);

        std::vector<float> buf(p->val.data.size());
        for (size_t i = 0; i < buf.size(); ++i) buf[i] = static_cast<float>(p->val.data[i]);
        // Synchronize in-memory values with the stored precision.
        for (size_t i = 0; i < buf.size(); ++i) p->val.data[i] = static_cast<double>(buf[i]);

        std::ofstream f(fs::path(dir) / blob_name(k), std::ios::binary);
        if (!f) throw LoadError("save_checkpoint: cannot write " + dir + "/" + blob_name(k));
        f.write(reinterpret_cast<const char*>(buf.data()),
                static_cast<std::streamsize>(buf.size() * sizeof(float)));
    }
    manifest["tensors"] = tensors;
    std::ofstream mf(fs::path(dir) / "manifest.json");
    mf << manifest.dump(2) << "\n";
}

uint64_t load_checkpoint(const std::string& dir, const ParamMap& params,
                         const std::string& expected_kind) {
    const fs::path mpath = fs::path(dir) / "manifest.json";
    std::ifstream mf(mpath);
    if (!mf) throw NotReadyError("load_checkpoint: missing manifest " + mpath.string());
    json manifest;
    try {
        mf >> manifest;
    } catch (const std::exception& e) {
        throw LoadError("load_checkpoint: corrupt manifest " + mpath.string() + ": " + e.what());
    }
    if (manifest.value("kind", std::string()) != expected_kind)
        throw ValidationError("load_checkpoint: checkpoint kind mismatch in " + dir +
                              " (expected " + expected_kind + ")");
    const auto& tensors = manifest.at("tensors");
    if (tensors.size() != params.size())
        throw ValidationError("load_checkpoint: tensor count mismatch in " + dir);
    for (size_t k = 0; k < params.size(); ++k) {
        const auto& t = tensors[k];
        const auto& [name, p] = params[k];
        if (t.at("name").get<std::string>() != name)
            throw ValidationError("load_checkpoint: tensor name mismatch: expected " + name);
        const auto shape = t.at("shape").get<std::vector<int>>();
        if (shape != p->val.shape)
            throw ValidationError("load_checkpoint: shape mismatch for tensor " + name);
        const fs::path bpath = fs::path(dir) / t.at("file").get<std::string>();
        std::ifstream bf(bpath, std::ios::binary);
        if (!bf) throw LoadError("load_checkpoint: missing blob " + bpath.string());
        std::vector<float> buf(p->val.data.size());
        bf.read(reinterpret_cast<char*>(buf.data()),
                static_cast<std::streamsize>(buf.size() * sizeof(float)));
        if (bf.gcount() != static_cast<std::streamsize>(buf.size() * sizeof(float)))
            throw LoadError("load_checkpoint: truncated blob " + bpath.string());
        for (size_t i = 0; i < buf.size(); ++i) p->val.data[i] = static_cast<double>(buf[i]);
    }
    return manifest.value("config_hash", uint64_t{0});
}

bool checkpoint_exists(const std::string& dir) {
    return fs::exists(fs::path(dir) / "manifest.json");
}

std::string checkpoint_kind(const std::string& dir) {
    std::ifstream mf(fs::path(dir) / "manifest.json");
    if (!mf) throw NotReadyError("checkpoint_kind: missing manifest in " + dir);
    json manifest;
    mf >> manifest;
    return manifest.value("kind", std::string());
}

}  // namespace camo::nn
