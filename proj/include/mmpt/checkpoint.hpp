#pragma once

#include <cstring>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "mmpt/train.hpp"

namespace mmpt {

// Single-file checkpoint:
//   magic "MMCK" | u32 version | u64 config_len | config text |
//   u64 step | u64 opt_t | u64 queue_fill | u64 queue_head | 4 x u64 rng state |
//   u32 tensor_count | { u32 name_len | name | u32 rank | u64 dims... | f64 payload } * |
//   u64 fnv1a checksum of everything before the trailer
// Tensors carry the model parameters, both optimizer moments, the momentum
// key copy and the key queue; loading reproduces bit-identical continuation.

namespace ckpt_detail {

constexpr std::uint32_t kVersion = 1;
constexpr std::uint64_t kFnvOffset = 0xcbf29ce484222325ull;
constexpr std::uint64_t kFnvPrime = 0x100000001b3ull;

class Writer {
  public:
    void bytes(const void* p, std::size_t n) {
        const char* c = static_cast<const char*>(p);
        buf_.insert(buf_.end(), c, c + n);
    }
    void u32(std::uint32_t v) {
        unsigned char b[4];
        for (int i = 0; i < 4; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
        bytes(b, 4);
    }
    void u64(std::uint64_t v) {
        unsigned char b[8];
        for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
        bytes(b, 8);
    }
    void f64(double v) {
        std::uint64_t bits;
        std::memcpy(&bits, &v, 8);
        u64(bits);
    }
    void str(const std::string& s) {
        u32(static_cast<std::uint32_t>(s.size()));
        bytes(s.data(), s.size());
    }
    void tensor(const std::string& name, const Tensor& t) {
        str(name);
        u32(static_cast<std::uint32_t>(t.shape.size()));
        for (auto d : t.shape) u64(d);
        for (double v : t.data) f64(v);
    }
    std::uint64_t checksum() const {
        std::uint64_t h = kFnvOffset;
        for (unsigned char c : buf_) {
            h ^= c;
            h *= kFnvPrime;
        }
        return h;
    }
    const std::vector<unsigned char>& data() const { return buf_; }

  private:
    std::vector<unsigned char> buf_;
};

class Reader {
  public:
    explicit Reader(std::vector<unsigned char> data) : buf_(std::move(data)) {}

    void bytes(void* p, std::size_t n) {
        if (pos_ + n > buf_.size()) throw IoError("checkpoint truncated");
        std::memcpy(p, buf_.data() + pos_, n);
        pos_ += n;
    }
    std::uint32_t u32() {
        unsigned char b[4];
        bytes(b, 4);
        std::uint32_t v = 0;
        for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(b[i]) << (8 * i);
        return v;
    }
    std::uint64_t u64() {
        unsigned char b[8];
        bytes(b, 8);
        std::uint64_t v = 0;
        for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
        return v;
    }
    double f64() {
        const std::uint64_t bits = u64();
        double v;
        std::memcpy(&v, &bits, 8);
        return v;
    }
    std::string str() {
        const std::uint32_t n = u32();
        std::string s(n, '\0');
        bytes(s.data(), n);
        return s;
    }
    Tensor tensor(std::string* name) {
        *name = str();
        const std::uint32_t rank = u32();
        Shape shape(rank);
        for (auto& d : shape) d = u64();
        Tensor t(shape);
        for (auto& v : t.data) v = f64();
        return t;
    }
    std::size_t pos() const { return pos_; }
    std::size_t size() const { return buf_.size(); }
    std::uint64_t peek_u64_at(std::size_t offset) const {
        if (offset + 8 > buf_.size()) throw IoError("checkpoint truncated");
        std::uint64_t v = 0;
        for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(buf_[offset + i]) << (8 * i);
        return v;
    }
    std::uint64_t checksum_until(std::size_t end) const {
        std::uint64_t h = kFnvOffset;
        for (std::size_t i = 0; i < end; ++i) {
            h ^= buf_[i];
            h *= kFnvPrime;
        }
        return h;
    }

  private:
    std::vector<unsigned char> buf_;
    std::size_t pos_ = 0;
};

}  // namespace ckpt_detail

inline void save_checkpoint(const Trainer& t, const std::string& path) {
    using namespace ckpt_detail;
    Writer w;
    w.bytes("MMCK", 4);
    w.u32(kVersion);
    const std::string cfg_text = t.config().to_text();
    w.u64(cfg_text.size());
    w.bytes(cfg_text.data(), cfg_text.size());
    w.u64(t.step_count());
    w.u64(t.optimizer().steps_taken());
    w.u64(t.keys().fill);
    w.u64(t.keys().head);
    const auto rng_state = Rng::substream(t.config().seed ^ detail::kStepSalt, t.step_count()).state();
    for (auto word : rng_state) w.u64(word);

    std::vector<std::pair<std::string, const Tensor*>> table;
    const auto params = t.state().params();
    for (const Param* p : params) table.emplace_back("model." + p->name, &p->value);
    for (std::size_t i = 0; i < params.size(); ++i) {
        table.emplace_back("opt.m." + params[i]->name, &t.optimizer().moment1(i));
        table.emplace_back("opt.v." + params[i]->name, &t.optimizer().moment2(i));
    }
    for (const Param* p : t.keys().key_state.params()) table.emplace_back("key." + p->name, &p->value);
    table.emplace_back("queue", &t.keys().queue);

    w.u32(static_cast<std::uint32_t>(table.size()));
    for (const auto& [name, tensor] : table) w.tensor(name, *tensor);

    const std::uint64_t sum = w.checksum();
    Writer trailer;
    trailer.u64(sum);

    std::ofstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open for writing: " + path);
    f.write(reinterpret_cast<const char*>(w.data().data()), static_cast<std::streamsize>(w.data().size()));
    f.write(reinterpret_cast<const char*>(trailer.data().data()), static_cast<std::streamsize>(trailer.data().size()));
    if (!f) throw IoError("write failed: " + path);
}

inline Trainer load_checkpoint(const std::string& path) {
    using namespace ckpt_detail;
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open checkpoint: " + path);
    std::vector<unsigned char> data((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    if (data.size() < 20) throw IoError("checkpoint too small: " + path);

    Reader r(std::move(data));
    // checksum gate first: nothing gets parsed out of a corrupt file
    const std::size_t body_end = r.size() - 8;
    if (r.peek_u64_at(body_end) != r.checksum_until(body_end))
        throw IoError("checkpoint checksum mismatch: " + path);

    char magic[4];
    r.bytes(magic, 4);
    if (std::memcmp(magic, "MMCK", 4) != 0) throw IoError("bad checkpoint magic in " + path);
    const std::uint32_t version = r.u32();
    if (version != kVersion) throw IoError("unsupported checkpoint version");

    const std::uint64_t cfg_len = r.u64();
    std::string cfg_text(cfg_len, '\0');
    r.bytes(cfg_text.data(), cfg_len);
    const TrainConfig cfg = TrainConfig::from_text(cfg_text);

    const std::uint64_t step = r.u64();
    const std::uint64_t opt_t = r.u64();
    const std::uint64_t queue_fill = r.u64();
    const std::uint64_t queue_head = r.u64();
    for (int i = 0; i < 4; ++i) (void)r.u64();  // rng snapshot; derivable from (seed, step)

    Trainer t = Trainer::fresh(cfg);
    const std::uint32_t count = r.u32();
    auto params = t.state().params();
    for (std::uint32_t i = 0; i < count; ++i) {
        std::string name;
        Tensor tensor = r.tensor(&name);
        auto assign = [&](Tensor& dst) {
            if (dst.shape != tensor.shape)
                throw IoError("checkpoint tensor shape mismatch for " + name);
            dst = std::move(tensor);
        };
        if (name.rfind("model.", 0) == 0) {
            assign(t.state().get(name.substr(6)).value);
        } else if (name.rfind("opt.m.", 0) == 0) {
            const std::string pname = name.substr(6);
            bool found = false;
            for (std::size_t j = 0; j < params.size(); ++j)
                if (params[j]->name == pname) {
                    assign(t.optimizer().moment1(j));
                    found = true;
                    break;
                }
            if (!found) throw IoError("checkpoint moment for unknown parameter: " + pname);
        } else if (name.rfind("opt.v.", 0) == 0) {
            const std::string pname = name.substr(6);
            bool found = false;
            for (std::size_t j = 0; j < params.size(); ++j)
                if (params[j]->name == pname) {
                    assign(t.optimizer().moment2(j));
                    found = true;
                    break;
                }
            if (!found) throw IoError("checkpoint moment for unknown parameter: " + pname);
        } else if (name.rfind("key.", 0) == 0) {
            assign(t.keys().key_state.get(name.substr(4)).value);
        } else if (name == "queue") {
            assign(t.keys().queue);
        } else {
            throw IoError("checkpoint has unknown tensor: " + name);
        }
    }

    if (r.pos() != body_end) throw IoError("checkpoint has trailing bytes: " + path);

    t.set_step_count(step);
    t.optimizer().set_steps_taken(opt_t);
    t.keys().fill = queue_fill;
    t.keys().head = queue_head;
    return t;
}

}  // namespace mmpt
