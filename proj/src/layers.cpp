#include "dq/layers.hpp"

#include <cmath>
#include <cstring>
#include <fstream>
#include <stdexcept>

#include "dq/error.hpp"

namespace dq {

NdTensor init_uniform(std::vector<std::size_t> shape, std::size_t fan_in, std::mt19937_64& rng) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
    std::uniform_real_distribution<double> dist(-bound, bound);
    NdTensor t = NdTensor::zeros(std::move(shape));
    for (std::size_t i = 0; i < t.size(); ++i) t[i] = dist(rng);
    return t;
}

DenseLayer::DenseLayer(std::string layer_name, std::size_t in, std::size_t out,
                       std::mt19937_64& rng)
    : name(std::move(layer_name)),
      w(init_uniform({in, out}, in, rng)),
      b(init_uniform({out}, in, rng)) {}

Var DenseLayer::forward(Tape& tape, Var x, std::vector<BoundParam>& bound) {
    Var wv = tape.param(w);
    Var bv = tape.param(b);
    bound.push_back({name + ".w", &w, wv});
    bound.push_back({name + ".b", &b, bv});
    return tape.dense(x, wv, bv);
}

void DenseLayer::collect(std::vector<std::pair<std::string, NdTensor*>>& out) {
    out.emplace_back(name + ".w", &w);
    out.emplace_back(name + ".b", &b);
}

Conv2dLayer::Conv2dLayer(std::string layer_name, std::size_t in, std::size_t out,
                         std::size_t ksize, std::size_t stride_, std::size_t pad_,
                         std::mt19937_64& rng)
    : name(std::move(layer_name)),
      stride(stride_),
      pad(pad_),
      w(init_uniform({out, in, ksize, ksize}, in * ksize * ksize, rng)),
      b(init_uniform({out}, in * ksize * ksize, rng)) {}

Var Conv2dLayer::forward(Tape& tape, Var x, std::vector<BoundParam>& bound) {
    Var wv = tape.param(w);
    Var bv = tape.param(b);
    bound.push_back({name + ".w", &w, wv});
    bound.push_back({name + ".b", &b, bv});
    return tape.conv2d(x, wv, bv, stride, pad);
}

void Conv2dLayer::collect(std::vector<std::pair<std::string, NdTensor*>>& out) {
    out.emplace_back(name + ".w", &w);
    out.emplace_back(name + ".b", &b);
}

ResBlock::ResBlock(const std::string& name, std::size_t ch, std::mt19937_64& rng)
    : c1(name + ".c1", ch, ch, 3, 1, 1, rng), c2(name + ".c2", ch, ch, 3, 1, 1, rng) {}

Var ResBlock::forward(Tape& tape, Var x, std::vector<BoundParam>& bound) {
    Var h = c1.forward(tape, tape.relu(x), bound);
    h = c2.forward(tape, tape.relu(h), bound);
    return tape.add(x, h);
}

void ResBlock::collect(std::vector<std::pair<std::string, NdTensor*>>& out) {
    c1.collect(out);
    c2.collect(out);
}

UpsampleConv::UpsampleConv(const std::string& name, std::size_t in, std::size_t out,
                           std::mt19937_64& rng)
    : conv(name + ".conv", in, out, 3, 1, 1, rng) {}

Var UpsampleConv::forward(Tape& tape, Var x, std::vector<BoundParam>& bound) {
    return conv.forward(tape, tape.upsample2_nearest(x), bound);
}

void UpsampleConv::collect(std::vector<std::pair<std::string, NdTensor*>>& out) {
    conv.collect(out);
}

void AdamW::step(std::vector<BoundParam>& params, const Tape& tape) {
    if (slots_.empty()) {
        slots_.resize(params.size());
        for (std::size_t i = 0; i < params.size(); ++i) {
            slots_[i].m = NdTensor::zeros(params[i].tensor->shape());
            slots_[i].v = NdTensor::zeros(params[i].tensor->shape());
        }
    }
    if (slots_.size() != params.size())
        throw std::invalid_argument("AdamW::step: parameter count changed");

    ++step_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(step_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(step_));

    for (std::size_t i = 0; i < params.size(); ++i) {
        NdTensor g = tape.grad(params[i].var);
        NdTensor& w = *params[i].tensor;
        if (!g.same_shape(w)) throw std::invalid_argument("AdamW::step: gradient shape mismatch");
        Slot& s = slots_[i];
        for (std::size_t j = 0; j < w.size(); ++j) {
            if (std::isnan(g[j]))
                throw std::runtime_error("optimizer step: NaN gradient for parameter '" +
                                         params[i].name + "'");
            s.m[j] = cfg_.beta1 * s.m[j] + (1.0 - cfg_.beta1) * g[j];
            s.v[j] = cfg_.beta2 * s.v[j] + (1.0 - cfg_.beta2) * g[j] * g[j];
            const double m_hat = s.m[j] / bc1;
            const double v_hat = s.v[j] / bc2;
            w[j] -= cfg_.lr * (m_hat / (std::sqrt(v_hat) + cfg_.eps) + cfg_.weight_decay * w[j]);
        }
    }
}

// ---------------------------------------------------------------------------
// DQP1 checkpoints
// ---------------------------------------------------------------------------

namespace {

constexpr char kParamMagic[8] = {'D', 'Q', 'P', 'A', 'R', 'M', '0', '1'};

void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>((v >> (8 * i)) & 0xff));
}

std::uint32_t get_u32(const std::uint8_t* p) {
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(p[i]) << (8 * i);
    return v;
}

}  // namespace

void save_dqp1(const std::vector<std::pair<std::string, const NdTensor*>>& records,
               const std::string& path, Dtype dtype) {
    std::vector<std::uint8_t> buf;
    buf.insert(buf.end(), kParamMagic, kParamMagic + 8);
    put_u32(buf, 1);  // version
    put_u32(buf, static_cast<std::uint32_t>(records.size()));
    for (const auto& [name, tensor] : records) {
        if (name.size() > 0xffff) throw std::invalid_argument("save_dqp1: name too long");
        buf.push_back(static_cast<std::uint8_t>(name.size() & 0xff));
        buf.push_back(static_cast<std::uint8_t>((name.size() >> 8) & 0xff));
        buf.insert(buf.end(), name.begin(), name.end());
        encode_dqt1(*tensor, dtype, buf);
    }
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw IoError("save_dqp1: cannot open " + path);
    f.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
    if (!f) throw IoError("save_dqp1: write failed for " + path);
}

std::vector<std::pair<std::string, NdTensor>> load_dqp1(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("load_dqp1: cannot open " + path);
    std::vector<std::uint8_t> buf((std::istreambuf_iterator<char>(f)),
                                  std::istreambuf_iterator<char>());
    auto fail_at = [&](std::size_t offset, const std::string& what) -> void {
        throw IoError(path + ": " + what + " at byte offset " + std::to_string(offset));
    };
    if (buf.size() < 16) fail_at(buf.size(), "truncated header");
    if (std::memcmp(buf.data(), kParamMagic, 8) != 0) fail_at(0, "bad magic (expected DQPARM01)");
    if (get_u32(buf.data() + 8) != 1) fail_at(8, "unsupported version");
    const std::size_t count = get_u32(buf.data() + 12);

    std::vector<std::pair<std::string, NdTensor>> records;
    records.reserve(count);
    std::size_t off = 16;
    for (std::size_t r = 0; r < count; ++r) {
        if (off + 2 > buf.size()) fail_at(off, "truncated record name length");
        const std::size_t len = buf[off] | (static_cast<std::size_t>(buf[off + 1]) << 8);
        off += 2;
        if (off + len > buf.size()) fail_at(off, "truncated record name");
        std::string name(reinterpret_cast<const char*>(buf.data() + off), len);
        off += len;
        std::size_t consumed = 0;
        NdTensor t = decode_dqt1(buf.data() + off, buf.size() - off, consumed, path);
        off += consumed;
        records.emplace_back(std::move(name), std::move(t));
    }
    if (off != buf.size()) fail_at(off, "trailing bytes after records");
    return records;
}

}  // namespace dq
