#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "lsc/data.hpp"
#include "lsc/heads.hpp"
#include "lsc/lora.hpp"
#include "lsc/model.hpp"

namespace lsc {

inline constexpr std::uint32_t kCheckpointVersion = 1;
inline constexpr char kCheckpointMagic[4] = {'L', 'S', 'U', 'L'};

struct CheckpointMeta {
    std::string task = "sequence";  // "sequence" | "token"
    ModelConfig model;
    bool lora_enabled = true;
    LoraConfig lora;
    std::vector<std::string> label_names;
    int ignore_index = LabelSpace::kDefaultIgnoreIndex;
    std::vector<std::string> vocab_tokens;  // non-reserved, id order
    Pooling pooling = Pooling::kLast;
    std::size_t head_hidden = 0;
    std::uint64_t seed = 42;
    std::uint64_t step = 0;
};

struct NamedTensor {
    std::string name;
    Shape shape;
    std::vector<float> data;
};

struct Checkpoint {
    CheckpointMeta meta;
    std::vector<NamedTensor> tensors;
};

// Sectioned binary: magic, version, JSON metadata block, then a named tensor
// table with little-endian 32-bit float payloads. Loading validates the magic
// and version and rejects truncated or oversized files.
void save_checkpoint(const std::string& path, const CheckpointMeta& meta,
                     const std::vector<NamedTensor>& tensors);
Checkpoint load_checkpoint(const std::string& path);

// Snapshot of all model + head parameters in named_parameters() order.
std::vector<NamedTensor> collect_named_tensors(const DecoderStack<float>& model,
                                               const Projection<float>& head);

// Trained state rebuilt from a checkpoint. Exactly one of the heads is
// meaningful, selected by meta.task.
struct RestoredState {
    CheckpointMeta meta;
    DecoderStack<float> model;
    SequenceHead<float> seq_head;
    TokenHead<float> tok_head;
    Vocabulary vocab;
    LabelSpace labels;
};

RestoredState restore_state(const Checkpoint& ckpt);

}  // namespace lsc
