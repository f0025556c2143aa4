#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <numeric>
#include <string>
#include <vector>

#include "srseg/model.hpp"

namespace srseg {

// ============================================================================
// Model checkpoint format
// ============================================================================
//
// A checkpoint is the 5-byte magic "SRTN1" followed by named tensor records
// until end of file. Each record is, in little-endian byte order:
//
//   u32  name length
//   ...  name bytes
//   u32  rank
//   u64  extent per dimension (rank of them)
//   f32  values (product of extents of them)
//
// A model checkpoint holds every trainable parameter plus the batch-norm
// running statistics (as rank-1 records), so a reloaded model evaluates
// identically. Values are stored as f32 regardless of the in-memory scalar
// type. Readers match records by name and reject shape mismatches.

struct TensorRecord {
    std::string name;
    std::vector<std::int64_t> extents;
    std::vector<float> values;

    std::int64_t numel() const {
        return std::accumulate(extents.begin(), extents.end(), std::int64_t(1), std::multiplies<>());
    }
};

namespace detail {

inline void put_u32(std::string& out, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

inline void put_u64(std::string& out, std::uint64_t v) {
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

inline void put_f32(std::string& out, float v) {
    std::uint32_t bits;
    std::memcpy(&bits, &v, 4);
    put_u32(out, bits);
}

struct ByteReader {
    const std::string& bytes;
    const std::string& path;
    std::size_t pos = 0;

    [[noreturn]] void fail(const std::string& what) const {
        throw std::runtime_error(path + ": " + what + " at byte " + std::to_string(pos));
    }

    void need(std::size_t n, const char* what) {
        if (bytes.size() - pos < n) fail(std::string("truncated ") + what + " (need " + std::to_string(n) +
                                         " bytes, have " + std::to_string(bytes.size() - pos) + ")");
    }

    std::uint32_t u32(const char* what) {
        need(4, what);
        std::uint32_t v = 0;
        for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(static_cast<unsigned char>(bytes[pos + i])) << (8 * i);
        pos += 4;
        return v;
    }

    std::uint64_t u64(const char* what) {
        need(8, what);
        std::uint64_t v = 0;
        for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(bytes[pos + i])) << (8 * i);
        pos += 8;
        return v;
    }

    float f32(const char* what) {
        const std::uint32_t bits = u32(what);
        float v;
        std::memcpy(&v, &bits, 4);
        return v;
    }
};

inline std::string shape_of(const std::vector<std::int64_t>& e) {
    std::string s = "(";
    for (std::size_t i = 0; i < e.size(); ++i) s += (i ? ", " : "") + std::to_string(e[i]);
    return s + ")";
}

}  // namespace detail

inline void write_records(const std::string& path, const std::vector<TensorRecord>& records) {
    std::string out = "SRTN1";
    for (const auto& r : records) {
        detail::put_u32(out, static_cast<std::uint32_t>(r.name.size()));
        out += r.name;
        detail::put_u32(out, static_cast<std::uint32_t>(r.extents.size()));
        for (const std::int64_t e : r.extents) detail::put_u64(out, static_cast<std::uint64_t>(e));
        if (static_cast<std::int64_t>(r.values.size()) != r.numel())
            throw std::logic_error("write_records: record '" + r.name + "' has " + std::to_string(r.values.size()) +
                                   " values for shape " + detail::shape_of(r.extents));
        for (const float v : r.values) detail::put_f32(out, v);
    }
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw std::runtime_error(path + ": cannot open for writing");
    f.write(out.data(), static_cast<std::streamsize>(out.size()));
    if (!f) throw std::runtime_error(path + ": write failed");
}

inline std::vector<TensorRecord> read_records(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error(path + ": cannot open for reading");
    std::string bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());

    detail::ByteReader r{bytes, path};
    if (bytes.size() < 5 || bytes.compare(0, 5, "SRTN1") != 0) r.fail("expected magic 'SRTN1'");
    r.pos = 5;

    std::vector<TensorRecord> records;
    while (r.pos < bytes.size()) {
        TensorRecord rec;
        const std::uint32_t name_len = r.u32("record name length");
        if (name_len == 0 || name_len > 4096) r.fail("record name length " + std::to_string(name_len) + " out of range");
        r.need(name_len, "record name");
        rec.name = bytes.substr(r.pos, name_len);
        r.pos += name_len;
        const std::uint32_t rank = r.u32("record rank");
        if (rank > 8) r.fail("record rank " + std::to_string(rank) + " out of range");
        std::int64_t numel = 1;
        for (std::uint32_t d = 0; d < rank; ++d) {
            const std::uint64_t e = r.u64("record extent");
            if (e == 0 || e > (std::uint64_t(1) << 32)) r.fail("record extent " + std::to_string(e) + " out of range");
            rec.extents.push_back(static_cast<std::int64_t>(e));
            numel *= static_cast<std::int64_t>(e);
        }
        r.need(static_cast<std::size_t>(numel) * 4, "record values");
        rec.values.reserve(static_cast<std::size_t>(numel));
        for (std::int64_t i = 0; i < numel; ++i) rec.values.push_back(r.f32("record value"));
        records.push_back(std::move(rec));
    }
    return records;
}

template <typename T>
std::vector<TensorRecord> model_to_records(Model<T>& model) {
    std::vector<TensorRecord> records;
    model.visit_params([&](const std::string& name, Tensor<T>& t) {
        TensorRecord r;
        r.name = name;
        r.extents.assign(t.shape().begin(), t.shape().end());
        r.values.reserve(t.data().size());
        for (const T v : t.data()) r.values.push_back(static_cast<float>(v));
        records.push_back(std::move(r));
    });
    model.visit_state([&](const std::string& name, std::vector<T>& v) {
        TensorRecord r;
        r.name = name;
        r.extents = {static_cast<std::int64_t>(v.size())};
        r.values.reserve(v.size());
        for (const T x : v) r.values.push_back(static_cast<float>(x));
        records.push_back(std::move(r));
    });
    return records;
}

template <typename T>
void save_model(const std::string& path, Model<T>& model) {
    write_records(path, model_to_records(model));
}

// Reconstructs the architecture a checkpoint was trained with from record
// names and shapes; only the spatial input size cannot be recovered, so
// the caller supplies it (it comes from the dataset being evaluated).
inline ModelConfig infer_model_config(const std::vector<TensorRecord>& records, std::int64_t input_h,
                                      std::int64_t input_w) {
    ModelConfig c;
    c.input_h = input_h;
    c.input_w = input_w;
    c.num_blocks = 0;
    c.channels.clear();
    c.arch = ArchKind::kConv;
    int exits = 0;

    auto find = [&](const std::string& name) -> const TensorRecord* {
        for (const auto& r : records)
            if (r.name == name) return &r;
        return nullptr;
    };

    for (const auto& r : records) {
        if (r.name.rfind("dec", 0) == 0) c.arch = ArchKind::kUShape;
        if (r.name.rfind("exit", 0) == 0) {
            const int k = std::stoi(r.name.substr(4, r.name.find('.') - 4));
            exits = std::max(exits, k);
        }
    }
    for (int i = 1;; ++i) {
        const TensorRecord* r = find("enc" + std::to_string(i) + ".conv1.w");
        if (!r) break;
        if (r->extents.size() != 4)
            throw std::runtime_error("checkpoint: record '" + r->name + "' is not a conv weight");
        c.channels.push_back(static_cast<int>(r->extents[0]));
        ++c.num_blocks;
    }
    if (c.num_blocks == 0) throw std::runtime_error("checkpoint: no encoder blocks found");
    const TensorRecord* first = find("enc1.conv1.w");
    c.in_channels = static_cast<int>(first->extents[1]);

    const TensorRecord* adapter = find("exit1.adapter.conv1.w");
    if (!adapter) throw std::runtime_error("checkpoint: no adapter records found");
    c.adapter_dim = static_cast<int>(adapter->extents[0]);

    const std::string final_prefix = "exit" + std::to_string(exits);
    const TensorRecord* seg = find(final_prefix + ".seg.conv.w");
    const TensorRecord* cls = find(final_prefix + ".cls.w");
    if (!seg || !cls) throw std::runtime_error("checkpoint: final exit heads missing");
    c.seg_classes = static_cast<int>(seg->extents[0]);
    c.cls_classes = static_cast<int>(cls->extents[0]);
    c.validate();
    return c;
}

// Builds a model shaped like the checkpoint and fills it from the records.
template <typename T>
Model<T> load_model_auto(const std::string& path, std::int64_t input_h, std::int64_t input_w) {
    const std::vector<TensorRecord> records = read_records(path);
    Model<T> model = build_model<T>(infer_model_config(records, input_h, input_w), 0);
    load_model(path, model);
    return model;
}

template <typename T>
void load_model(const std::string& path, Model<T>& model) {
    std::map<std::string, TensorRecord> by_name;
    for (auto& r : read_records(path)) {
        if (!by_name.emplace(r.name, std::move(r)).second)
            throw std::runtime_error(path + ": duplicate record '" + r.name + "'");
    }

    std::vector<std::string> missing;
    auto take = [&](const std::string& name, const std::vector<std::int64_t>& extents) -> const TensorRecord* {
        auto it = by_name.find(name);
        if (it == by_name.end()) {
            missing.push_back(name);
            return nullptr;
        }
        if (it->second.extents != extents)
            throw std::runtime_error(path + ": record '" + name + "' has shape " +
                                     detail::shape_of(it->second.extents) + " but the model expects " +
                                     detail::shape_of(extents));
        return &it->second;
    };

    std::vector<std::pair<Tensor<T>*, const TensorRecord*>> param_targets;
    std::vector<std::pair<std::vector<T>*, const TensorRecord*>> state_targets;
    model.visit_params([&](const std::string& name, Tensor<T>& t) {
        const std::vector<std::int64_t> extents(t.shape().begin(), t.shape().end());
        if (const TensorRecord* r = take(name, extents)) param_targets.emplace_back(&t, r);
    });
    model.visit_state([&](const std::string& name, std::vector<T>& v) {
        if (const TensorRecord* r = take(name, {static_cast<std::int64_t>(v.size())}))
            state_targets.emplace_back(&v, r);
    });

    if (!missing.empty()) throw std::runtime_error(path + ": missing record '" + missing.front() + "'");
    std::size_t used = param_targets.size() + state_targets.size();
    if (used != by_name.size()) {
        for (const auto& [name, rec] : by_name) {
            (void)rec;
            bool found = false;
            for (const auto& [t, r] : param_targets) found = found || r->name == name;
            for (const auto& [v, r] : state_targets) found = found || r->name == name;
            if (!found) throw std::runtime_error(path + ": record '" + name + "' does not match any model tensor");
        }
    }

    // all records validated; now commit
    for (auto& [t, r] : param_targets)
        for (std::size_t i = 0; i < t->data().size(); ++i) t->data()[i] = static_cast<T>(r->values[i]);
    for (auto& [v, r] : state_targets)
        for (std::size_t i = 0; i < v->size(); ++i) (*v)[i] = static_cast<T>(r->values[i]);
}

}  // namespace srseg
