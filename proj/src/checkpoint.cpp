#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>
#include <map>

#include <json.hpp>

#include "itl/error.hpp"
#include "itl/federation.hpp"

// Layout: "ITLC" | u32 version | u64 meta length | meta JSON | u64 tensor count |
// directory entries | u64 data length | data | u64 FNV-1a of all preceding bytes.
// Directory entry: u32 name length | name | u8 dtype (1 = f64) | u32 ndim | u64 dims[ndim] | u64 offset.

namespace itl {

using nlohmann::json;

namespace {

static_assert(std::endian::native == std::endian::little, "checkpoint codec assumes a little-endian host");

constexpr char kMagic[4] = {'I', 'T', 'L', 'C'};
constexpr std::uint8_t kDtypeF64 = 1;

std::uint64_t fnv1a(const std::uint8_t* p, std::size_t n) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (std::size_t i = 0; i < n; ++i) {
        h ^= p[i];
        h *= 0x100000001b3ULL;
    }
    return h;
}

class Writer {
public:
    template <class T>
    void put(T v) {
        const auto* p = reinterpret_cast<const std::uint8_t*>(&v);
        out.insert(out.end(), p, p + sizeof v);
    }
    void bytes(const void* p, std::size_t n) {
        const auto* b = static_cast<const std::uint8_t*>(p);
        out.insert(out.end(), b, b + n);
    }
    std::vector<std::uint8_t> out;
};

class Reader {
public:
    explicit Reader(std::span<const std::uint8_t> b) : buf(b) {}
    template <class T>
    T get() {
        T v;
        need(sizeof v);
        std::memcpy(&v, buf.data() + pos, sizeof v);
        pos += sizeof v;
        return v;
    }
    std::span<const std::uint8_t> take(std::size_t n) {
        need(n);
        auto s = buf.subspan(pos, n);
        pos += n;
        return s;
    }
    void need(std::size_t n) const {
        if (n > buf.size() - pos) throw CodecError("checkpoint truncated");
    }
    std::span<const std::uint8_t> buf;
    std::size_t pos = 0;
};

std::uint64_t bits(double d) { return std::bit_cast<std::uint64_t>(d); }
double from_bits(const json& j) { return std::bit_cast<double>(j.get<std::uint64_t>()); }

void add_all(std::map<std::string, const Tensor*>& dir, const std::string& prefix, const ParameterSet& p) {
    for (const auto& [name, t] : p) dir[prefix + name] = &t;
}

ParameterSet take_prefix(std::map<std::string, Tensor>& tensors, const std::string& prefix) {
    ParameterSet out;
    for (auto it = tensors.lower_bound(prefix); it != tensors.end() && it->first.starts_with(prefix);) {
        out.insert(it->first.substr(prefix.size()), std::move(it->second));
        it = tensors.erase(it);
    }
    return out;
}

} // namespace

std::vector<std::uint8_t> encode_checkpoint(const Checkpoint& ck) {
    std::map<std::string, const Tensor*> dir;
    add_all(dir, "model/", ck.params);

    json opt;
    opt["lr_scale"] = bits(ck.optimizer.lr_scale);
    if (const auto* a = std::get_if<AdamState>(&ck.optimizer.state)) {
        opt["kind"] = "adam";
        opt["t"] = a->t;
        opt["beta1"] = bits(a->beta1);
        opt["beta2"] = bits(a->beta2);
        opt["epsilon"] = bits(a->epsilon);
        opt["lr"] = bits(a->lr);
        add_all(dir, "optim/m/", a->m);
        add_all(dir, "optim/v/", a->v);
    } else {
        const auto& s = std::get<SgdState>(ck.optimizer.state);
        opt["kind"] = "sgd";
        opt["base_lr"] = bits(s.base_lr);
        opt["decay_base"] = bits(s.decay_base);
        opt["decay_period_epochs"] = bits(s.decay_period_epochs);
        opt["epoch"] = s.epoch;
    }

    const RegularizerState& r = ck.regularizer;
    json reg{{"artifacts_visit", r.artifacts_visit},
             {"current_visit", r.current_visit},
             {"has_anchor", r.anchor.has_value()},
             {"has_teacher", r.teacher.has_value()},
             {"has_encoder", r.encoder.has_value()}};
    if (r.anchor) add_all(dir, "reg/anchor/", *r.anchor);
    add_all(dir, "reg/omega/", r.omega);
    add_all(dir, "reg/si_w/", r.si.w);
    add_all(dir, "reg/si_start/", r.si.start);
    if (r.teacher) {
        reg["teacher_temperature"] = bits(r.teacher->temperature);
        add_all(dir, "reg/teacher/", r.teacher->params);
    }
    if (r.encoder) {
        reg["encoder"] = {{"code_dim", r.encoder->code_dim},
                          {"alpha", bits(r.encoder->alpha)},
                          {"degenerate", r.encoder->degenerate},
                          {"train_mse", bits(r.encoder->train_mse)},
                          {"feature_variance", bits(r.encoder->feature_variance)}};
        add_all(dir, "reg/encoder/", r.encoder->weights);
    }
    json imm_models = json::array(), imm_fishers = json::array();
    for (const auto& [c, p] : r.archive.models) {
        imm_models.push_back(c);
        add_all(dir, "reg/imm/" + std::to_string(c) + "/theta/", p);
    }
    for (const auto& [c, f] : r.archive.fishers) {
        imm_fishers.push_back(c);
        add_all(dir, "reg/imm/" + std::to_string(c) + "/fisher/", f);
    }
    reg["imm_models"] = imm_models;
    reg["imm_fishers"] = imm_fishers;

    Tensor acc({ck.accuracy.centers(), ck.accuracy.visits()}, ck.accuracy.values());
    if (acc.size() > 0) dir["run/accuracy"] = &acc;

    const Provenance& pv = ck.provenance;
    json meta{{"provenance",
               {{"visit", pv.visit},
                {"center", pv.center},
                {"source_center", pv.source_center},
                {"epoch", pv.epoch},
                {"seed", pv.seed},
                {"config_hash", pv.config_hash},
                {"method", pv.method}}},
              {"optimizer", opt},
              {"regularizer", reg},
              {"accuracy_shape", {ck.accuracy.centers(), ck.accuracy.visits()}},
              {"visited", ck.visited},
              {"next_visit", ck.next_visit},
              {"steps", ck.steps},
              {"fresh_lr", bits(ck.fresh_lr)}};
    const std::string meta_text = meta.dump();

    Writer w;
    w.bytes(kMagic, 4);
    w.put<std::uint32_t>(ck.format_version);
    w.put<std::uint64_t>(meta_text.size());
    w.bytes(meta_text.data(), meta_text.size());
    w.put<std::uint64_t>(dir.size());
    std::uint64_t offset = 0;
    for (const auto& [name, t] : dir) {
        w.put<std::uint32_t>(static_cast<std::uint32_t>(name.size()));
        w.bytes(name.data(), name.size());
        w.put<std::uint8_t>(kDtypeF64);
        w.put<std::uint32_t>(static_cast<std::uint32_t>(t->shape.size()));
        for (auto d : t->shape) w.put<std::uint64_t>(d);
        w.put<std::uint64_t>(offset);
        offset += t->size() * sizeof(double);
    }
    w.put<std::uint64_t>(offset);
    for (const auto& [name, t] : dir) w.bytes(t->data.data(), t->size() * sizeof(double));
    w.put<std::uint64_t>(fnv1a(w.out.data(), w.out.size()));
    return std::move(w.out);
}

Checkpoint decode_checkpoint(std::span<const std::uint8_t> bytes) {
    if (bytes.size() < 4 + 4 + 8 + 8) throw CodecError("checkpoint truncated");
    if (std::memcmp(bytes.data(), kMagic, 4) != 0) throw CodecError("not a checkpoint (bad magic)");
    const std::size_t body = bytes.size() - 8;
    std::uint64_t stored;
    std::memcpy(&stored, bytes.data() + body, 8);
    if (stored != fnv1a(bytes.data(), body)) throw CodecError("checkpoint checksum mismatch");

    Reader rd(bytes.first(body));
    rd.take(4);
    const auto version = rd.get<std::uint32_t>();
    if (version != Checkpoint::kFormatVersion) {
        throw CodecError("checkpoint format version " + std::to_string(version) + " is not supported (expected " +
                         std::to_string(Checkpoint::kFormatVersion) + ")");
    }
    const auto meta_len = rd.get<std::uint64_t>();
    const auto meta_bytes = rd.take(meta_len);
    json meta;
    try {
        meta = json::parse(meta_bytes.begin(), meta_bytes.end());
    } catch (const json::exception& e) {
        throw CodecError(std::string("checkpoint metadata: ") + e.what());
    }

    struct Entry {
        std::string name;
        Shape shape;
        std::uint64_t offset;
    };
    std::vector<Entry> entries;
    const auto count = rd.get<std::uint64_t>();
    for (std::uint64_t i = 0; i < count; ++i) {
        Entry e;
        const auto len = rd.get<std::uint32_t>();
        const auto name = rd.take(len);
        e.name.assign(name.begin(), name.end());
        if (rd.get<std::uint8_t>() != kDtypeF64) throw CodecError("tensor " + e.name + ": unsupported dtype");
        const auto ndim = rd.get<std::uint32_t>();
        for (std::uint32_t d = 0; d < ndim; ++d) e.shape.push_back(rd.get<std::uint64_t>());
        e.offset = rd.get<std::uint64_t>();
        entries.push_back(std::move(e));
    }
    const auto data_len = rd.get<std::uint64_t>();
    const auto data = rd.take(data_len);
    if (rd.pos != body) throw CodecError("trailing bytes after checkpoint data");

    std::map<std::string, Tensor> tensors;
    for (const auto& e : entries) {
        const std::size_t n = shape_size(e.shape);
        if (e.offset > data_len || n * sizeof(double) > data_len - e.offset) {
            throw CodecError("tensor " + e.name + " extends past the data section");
        }
        Tensor t(e.shape);
        std::memcpy(t.data.data(), data.data() + e.offset, n * sizeof(double));
        tensors.emplace(e.name, std::move(t));
    }

    Checkpoint ck;
    ck.format_version = version;
    try {
        const json& pv = meta.at("provenance");
        ck.provenance = {pv.at("visit"),  pv.at("center"),      pv.at("source_center"), pv.at("epoch"),
                         pv.at("seed"),   pv.at("config_hash"), pv.at("method")};
        ck.params = take_prefix(tensors, "model/");

        const json& opt = meta.at("optimizer");
        ck.optimizer.lr_scale = from_bits(opt.at("lr_scale"));
        if (opt.at("kind") == "adam") {
            AdamState a;
            a.t = opt.at("t");
            a.beta1 = from_bits(opt.at("beta1"));
            a.beta2 = from_bits(opt.at("beta2"));
            a.epsilon = from_bits(opt.at("epsilon"));
            a.lr = from_bits(opt.at("lr"));
            a.m = take_prefix(tensors, "optim/m/");
            a.v = take_prefix(tensors, "optim/v/");
            ck.optimizer.state = std::move(a);
        } else {
            SgdState s;
            s.base_lr = from_bits(opt.at("base_lr"));
            s.decay_base = from_bits(opt.at("decay_base"));
            s.decay_period_epochs = from_bits(opt.at("decay_period_epochs"));
            s.epoch = opt.at("epoch");
            ck.optimizer.state = s;
        }

        const json& reg = meta.at("regularizer");
        RegularizerState& r = ck.regularizer;
        r.artifacts_visit = reg.at("artifacts_visit");
        r.current_visit = reg.at("current_visit");
        if (reg.at("has_anchor").get<bool>()) r.anchor = take_prefix(tensors, "reg/anchor/");
        r.omega = take_prefix(tensors, "reg/omega/");
        r.si.w = take_prefix(tensors, "reg/si_w/");
        r.si.start = take_prefix(tensors, "reg/si_start/");
        if (reg.at("has_teacher").get<bool>()) {
            r.teacher = TeacherSnapshot{take_prefix(tensors, "reg/teacher/"), from_bits(reg.at("teacher_temperature"))};
        }
        if (reg.at("has_encoder").get<bool>()) {
            const json& e = reg.at("encoder");
            EncoderState enc;
            enc.weights = take_prefix(tensors, "reg/encoder/");
            enc.code_dim = e.at("code_dim");
            enc.alpha = from_bits(e.at("alpha"));
            enc.degenerate = e.at("degenerate");
            enc.train_mse = from_bits(e.at("train_mse"));
            enc.feature_variance = from_bits(e.at("feature_variance"));
            r.encoder = std::move(enc);
        }
        for (std::size_t c : reg.at("imm_models").get<std::vector<std::size_t>>()) {
            r.archive.models[c] = take_prefix(tensors, "reg/imm/" + std::to_string(c) + "/theta/");
        }
        for (std::size_t c : reg.at("imm_fishers").get<std::vector<std::size_t>>()) {
            r.archive.fishers[c] = take_prefix(tensors, "reg/imm/" + std::to_string(c) + "/fisher/");
        }

        const auto shape = meta.at("accuracy_shape").get<std::array<std::size_t, 2>>();
        ck.accuracy = AccuracyMatrix(shape[0], shape[1]);
        if (shape[0] * shape[1] > 0) {
            auto it = tensors.find("run/accuracy");
            if (it == tensors.end() || it->second.size() != shape[0] * shape[1]) {
                throw CodecError("accuracy history missing or misshapen");
            }
            for (std::size_t c = 0; c < shape[0]; ++c)
                for (std::size_t v = 0; v < shape[1]; ++v) ck.accuracy.set(c, v, it->second[c * shape[1] + v]);
            tensors.erase(it);
        }
        ck.visited = meta.at("visited").get<std::vector<bool>>();
        ck.next_visit = meta.at("next_visit");
        ck.steps = meta.at("steps");
        ck.fresh_lr = from_bits(meta.at("fresh_lr"));
    } catch (const json::exception& e) {
        throw CodecError(std::string("checkpoint metadata: ") + e.what());
    }
    if (!tensors.empty()) throw CodecError("checkpoint has unrecognised tensor " + tensors.begin()->first);
    return ck;
}

void save_checkpoint(const Checkpoint& checkpoint, const std::filesystem::path& path) {
    const auto bytes = encode_checkpoint(checkpoint);
    std::ofstream out(path, std::ios::binary);
    if (!out) throw Error("cannot write " + path.string());
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw Error("write failed: " + path.string());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw CodecError("cannot open " + path.string());
    std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return decode_checkpoint(bytes);
}

} // namespace itl
