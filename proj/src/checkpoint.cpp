#include "lsc/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <unordered_map>

#include <json.hpp>

namespace lsc {

namespace {

using nlohmann::json;

void put_u32(std::ostream& out, std::uint32_t v) {
    char b[4];
    for (int i = 0; i < 4; ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xFF);
    out.write(b, 4);
}

void put_u64(std::ostream& out, std::uint64_t v) {
    char b[8];
    for (int i = 0; i < 8; ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xFF);
    out.write(b, 8);
}

void put_f32(std::ostream& out, float v) {
    std::uint32_t bits;
    std::memcpy(&bits, &v, 4);
    put_u32(out, bits);
}

std::uint32_t get_u32(std::istream& in) {
    unsigned char b[4];
    if (!in.read(reinterpret_cast<char*>(b), 4)) {
        throw CheckpointError("checkpoint: integrity error, file truncated");
    }
    std::uint32_t v = 0;
    for (int i = 3; i >= 0; --i) v = (v << 8) | b[i];
    return v;
}

std::uint64_t get_u64(std::istream& in) {
    unsigned char b[8];
    if (!in.read(reinterpret_cast<char*>(b), 8)) {
        throw CheckpointError("checkpoint: integrity error, file truncated");
    }
    std::uint64_t v = 0;
    for (int i = 7; i >= 0; --i) v = (v << 8) | b[i];
    return v;
}

float get_f32(std::istream& in) {
    const std::uint32_t bits = get_u32(in);
    float v;
    std::memcpy(&v, &bits, 4);
    return v;
}

json meta_to_json(const CheckpointMeta& m) {
    json targets = json::array();
    for (LoraTarget t : m.lora.targets) targets.push_back(lora_target_name(t));
    return json{
        {"task", m.task},
        {"model",
         {{"vocab_size", m.model.vocab_size},
          {"d_model", m.model.d_model},
          {"n_heads", m.model.n_heads},
          {"n_layers", m.model.n_layers},
          {"d_ff", m.model.d_ff},
          {"max_seq_len", m.model.max_seq_len},
          {"dropout_p", m.model.dropout_p},
          {"norm_epsilon", m.model.norm_epsilon},
          {"mask_mode", mask_mode_name(m.model.mask_mode)},
          {"position_mode", position_mode_name(m.model.position_mode)}}},
        {"lora",
         {{"enabled", m.lora_enabled},
          {"rank", m.lora.rank},
          {"alpha", m.lora.alpha},
          {"dropout", m.lora.dropout_p},
          {"targets", targets}}},
        {"labels", m.label_names},
        {"ignore_index", m.ignore_index},
        {"vocab", m.vocab_tokens},
        {"pooling", pooling_name(m.pooling)},
        {"head_hidden", m.head_hidden},
        {"seed", m.seed},
        {"step", m.step},
    };
}

CheckpointMeta meta_from_json(const json& j) {
    CheckpointMeta m;
    try {
        m.task = j.at("task").get<std::string>();
        const json& mj = j.at("model");
        m.model.vocab_size = mj.at("vocab_size").get<std::size_t>();
        m.model.d_model = mj.at("d_model").get<std::size_t>();
        m.model.n_heads = mj.at("n_heads").get<std::size_t>();
        m.model.n_layers = mj.at("n_layers").get<std::size_t>();
        m.model.d_ff = mj.at("d_ff").get<std::size_t>();
        m.model.max_seq_len = mj.at("max_seq_len").get<std::size_t>();
        m.model.dropout_p = mj.at("dropout_p").get<double>();
        m.model.norm_epsilon = mj.at("norm_epsilon").get<double>();
        m.model.mask_mode = parse_mask_mode(mj.at("mask_mode").get<std::string>());
        m.model.position_mode = parse_position_mode(mj.at("position_mode").get<std::string>());
        const json& lj = j.at("lora");
        m.lora_enabled = lj.at("enabled").get<bool>();
        m.lora.rank = lj.at("rank").get<std::size_t>();
        m.lora.alpha = lj.at("alpha").get<double>();
        m.lora.dropout_p = lj.at("dropout").get<double>();
        m.lora.targets.clear();
        for (const auto& t : lj.at("targets")) m.lora.targets.insert(parse_lora_target(t.get<std::string>()));
        m.label_names = j.at("labels").get<std::vector<std::string>>();
        m.ignore_index = j.at("ignore_index").get<int>();
        m.vocab_tokens = j.at("vocab").get<std::vector<std::string>>();
        m.pooling = parse_pooling(j.at("pooling").get<std::string>());
        m.head_hidden = j.at("head_hidden").get<std::size_t>();
        m.seed = j.at("seed").get<std::uint64_t>();
        m.step = j.at("step").get<std::uint64_t>();
    } catch (const json::exception& e) {
        throw CheckpointError(std::string("checkpoint: malformed metadata: ") + e.what());
    }
    return m;
}

}  // namespace

void save_checkpoint(const std::string& path, const CheckpointMeta& meta,
                     const std::vector<NamedTensor>& tensors) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw CheckpointError("checkpoint: cannot write " + path);
    out.write(kCheckpointMagic, 4);
    put_u32(out, kCheckpointVersion);
    const std::string meta_json = meta_to_json(meta).dump();
    put_u64(out, meta_json.size());
    out.write(meta_json.data(), static_cast<std::streamsize>(meta_json.size()));
    put_u64(out, tensors.size());
    for (const NamedTensor& t : tensors) {
        if (shape_numel(t.shape) != t.data.size()) {
            throw CheckpointError("checkpoint: tensor \"" + t.name + "\" data does not match shape " +
                                  shape_str(t.shape));
        }
        put_u64(out, t.name.size());
        out.write(t.name.data(), static_cast<std::streamsize>(t.name.size()));
        put_u32(out, static_cast<std::uint32_t>(t.shape.size()));
        for (std::size_t d : t.shape) put_u64(out, d);
        for (float v : t.data) put_f32(out, v);
    }
    if (!out) throw CheckpointError("checkpoint: write failed for " + path);
}

Checkpoint load_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw CheckpointError("checkpoint: cannot read " + path);
    char magic[4];
    if (!in.read(magic, 4) || std::memcmp(magic, kCheckpointMagic, 4) != 0) {
        throw CheckpointError("checkpoint: " + path + " is not a checkpoint file (bad magic)");
    }
    const std::uint32_t version = get_u32(in);
    if (version != kCheckpointVersion) {
        throw CheckpointError("checkpoint: version " + std::to_string(version) + " not supported (expected " +
                              std::to_string(kCheckpointVersion) + ")");
    }
    const std::uint64_t meta_len = get_u64(in);
    std::string meta_json(meta_len, '\0');
    if (!in.read(meta_json.data(), static_cast<std::streamsize>(meta_len))) {
        throw CheckpointError("checkpoint: integrity error, metadata truncated");
    }
    Checkpoint ckpt;
    json parsed;
    try {
        parsed = json::parse(meta_json);
    } catch (const json::exception& e) {
        throw CheckpointError(std::string("checkpoint: malformed metadata: ") + e.what());
    }
    ckpt.meta = meta_from_json(parsed);
    const std::uint64_t count = get_u64(in);
    ckpt.tensors.reserve(count);
    for (std::uint64_t i = 0; i < count; ++i) {
        NamedTensor t;
        const std::uint64_t name_len = get_u64(in);
        t.name.resize(name_len);
        if (!in.read(t.name.data(), static_cast<std::streamsize>(name_len))) {
            throw CheckpointError("checkpoint: integrity error, tensor name truncated");
        }
        const std::uint32_t rank = get_u32(in);
        t.shape.resize(rank);
        std::size_t numel = 1;
        for (std::uint32_t d = 0; d < rank; ++d) {
            t.shape[d] = get_u64(in);
            numel *= t.shape[d];
        }
        t.data.resize(numel);
        for (std::size_t v = 0; v < numel; ++v) t.data[v] = get_f32(in);
        ckpt.tensors.push_back(std::move(t));
    }
    if (in.peek() != std::char_traits<char>::eof()) {
        throw CheckpointError("checkpoint: integrity error, trailing bytes after tensor table");
    }
    return ckpt;
}

std::vector<NamedTensor> collect_named_tensors(const DecoderStack<float>& model,
                                               const Projection<float>& head) {
    std::vector<NamedTensor> out;
    for (const auto& [name, t] : model.named_parameters()) {
        out.push_back(NamedTensor{name, t.shape(), t.value()});
    }
    for (const auto& [name, t] : head.named_parameters("head")) {
        out.push_back(NamedTensor{name, t.shape(), t.value()});
    }
    return out;
}

RestoredState restore_state(const Checkpoint& ckpt) {
    const CheckpointMeta& meta = ckpt.meta;
    if (meta.task != "sequence" && meta.task != "token") {
        throw CheckpointError("checkpoint: unknown task \"" + meta.task + "\"");
    }
    Rng rng(meta.seed);
    RestoredState st{meta,
                     DecoderStack<float>::init(meta.model, rng),
                     SequenceHead<float>{},
                     TokenHead<float>{},
                     Vocabulary::from_tokens(meta.vocab_tokens),
                     LabelSpace(meta.label_names, meta.ignore_index)};
    if (meta.lora_enabled) inject_lora(st.model, meta.lora, rng);
    Projection<float> proj =
        Projection<float>::init(st.labels.size(), meta.model.d_model, rng, meta.head_hidden);
    if (meta.task == "sequence") {
        st.seq_head = SequenceHead<float>{proj, meta.pooling};
    } else {
        st.tok_head = TokenHead<float>{proj};
    }

    std::unordered_map<std::string, const NamedTensor*> by_name;
    for (const NamedTensor& t : ckpt.tensors) by_name.emplace(t.name, &t);
    auto fill = [&](const std::string& name, Tensor<float> dst) {
        auto it = by_name.find(name);
        if (it == by_name.end()) {
            throw CheckpointError("checkpoint: compatibility error, missing tensor \"" + name + "\"");
        }
        if (it->second->shape != dst.shape()) {
            throw CheckpointError("checkpoint: compatibility error, tensor \"" + name + "\" has shape " +
                                  shape_str(it->second->shape) + ", model expects " + shape_str(dst.shape()));
        }
        dst.value() = it->second->data;
    };
    std::size_t expected = 0;
    for (const auto& [name, t] : st.model.named_parameters()) {
        fill(name, t);
        ++expected;
    }
    for (const auto& [name, t] : proj.named_parameters("head")) {
        fill(name, t);
        ++expected;
    }
    if (expected != ckpt.tensors.size()) {
        throw CheckpointError("checkpoint: compatibility error, " + std::to_string(ckpt.tensors.size()) +
                              " tensors in file, model expects " + std::to_string(expected));
    }
    return st;
}

}  // namespace lsc
