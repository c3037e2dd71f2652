#include <doctest.h>

#include <filesystem>
#include <fstream>

#include "lsc/checkpoint.hpp"

using namespace lsc;

namespace {

namespace fs = std::filesystem;

struct Fixture {
    CheckpointMeta meta;
    DecoderStack<float> model;
    SequenceHead<float> head;
    IdMatrix probe_ids;
    BoolMatrix probe_pad;
};

Fixture make_fixture() {
    ModelConfig mcfg;
    mcfg.vocab_size = 32;
    mcfg.d_model = 16;
    mcfg.n_heads = 2;
    mcfg.n_layers = 2;
    mcfg.d_ff = 24;
    mcfg.max_seq_len = 8;

    Rng rng(5);
    Fixture f{CheckpointMeta{}, DecoderStack<float>::init(mcfg, rng), SequenceHead<float>{}, IdMatrix(2, 4),
              BoolMatrix(2, 4, true)};
    LoraConfig lcfg;
    lcfg.rank = 3;
    inject_lora(f.model, lcfg, rng);
    f.head = SequenceHead<float>::init(2, mcfg.d_model, Pooling::kMax, rng);
    // nonzero adapters so the round trip is not trivially the base model
    for (auto& blk : f.model.blocks) {
        for (auto& v : blk.wq.adapter->b.value()) v = static_cast<float>(rng.normal()) * 0.05f;
        for (auto& v : blk.wv.adapter->b.value()) v = static_cast<float>(rng.normal()) * 0.05f;
    }

    f.meta.task = "sequence";
    f.meta.model = mcfg;
    f.meta.lora_enabled = true;
    f.meta.lora = lcfg;
    f.meta.label_names = {"alpha", "beta"};
    f.meta.vocab_tokens = {"one", "two", "three"};
    f.meta.pooling = Pooling::kMax;
    f.meta.seed = 5;
    f.meta.step = 17;

    for (auto& v : f.probe_ids.data) v = static_cast<std::int32_t>(3 + rng.below(mcfg.vocab_size - 3));
    f.probe_pad.set(1, 3, false);
    return f;
}

fs::path temp_ckpt(const std::string& name) {
    return fs::temp_directory_path() / ("lsc_ckpt_test_" + name + ".bin");
}

}  // namespace

TEST_CASE("save/load round trip reproduces probe logits bit-identically") {
    Fixture f = make_fixture();
    Tensor<float> before = sequence_logits(f.model.forward(f.probe_ids, f.probe_pad), f.probe_pad, f.head);

    const auto path = temp_ckpt("roundtrip");
    save_checkpoint(path.string(), f.meta, collect_named_tensors(f.model, f.head.proj));
    RestoredState st = restore_state(load_checkpoint(path.string()));
    CHECK(st.meta.task == "sequence");
    CHECK(st.meta.step == 17);
    CHECK(st.labels.size() == 2);
    CHECK(st.vocab.size() == 3 + Vocabulary::kReserved);
    Tensor<float> after = sequence_logits(st.model.forward(f.probe_ids, f.probe_pad), f.probe_pad, st.seq_head);
    REQUIRE(after.numel() == before.numel());
    for (std::size_t i = 0; i < before.numel(); ++i) CHECK(after.data()[i] == before.data()[i]);
    fs::remove(path);
}

TEST_CASE("tensor table entry count equals named parameters plus adapters") {
    Fixture f = make_fixture();
    const auto tensors = collect_named_tensors(f.model, f.head.proj);
    // base: embed + 2x(2 norms + 4 attn + 3 ffn) + final norm = 20; adapters: 2 layers x {q,v} x {a,b} = 8;
    // head: weight + bias
    CHECK(tensors.size() == 20 + 8 + 2);
    CHECK(tensors.size() == f.model.named_parameters().size() + 2);

    const auto path = temp_ckpt("count");
    save_checkpoint(path.string(), f.meta, tensors);
    Checkpoint ckpt = load_checkpoint(path.string());
    CHECK(ckpt.tensors.size() == tensors.size());
    fs::remove(path);
}

TEST_CASE("truncated files raise integrity errors, not crashes") {
    Fixture f = make_fixture();
    const auto path = temp_ckpt("truncate");
    save_checkpoint(path.string(), f.meta, collect_named_tensors(f.model, f.head.proj));
    const auto size = fs::file_size(path);
    fs::resize_file(path, size - 1);
    CHECK_THROWS_AS(load_checkpoint(path.string()), CheckpointError);
    // truncating into the metadata block is also caught
    fs::resize_file(path, 16);
    CHECK_THROWS_AS(load_checkpoint(path.string()), CheckpointError);
    fs::remove(path);
}

TEST_CASE("trailing bytes are an integrity error") {
    Fixture f = make_fixture();
    const auto path = temp_ckpt("trailing");
    save_checkpoint(path.string(), f.meta, collect_named_tensors(f.model, f.head.proj));
    {
        std::ofstream app(path, std::ios::binary | std::ios::app);
        app << "junk";
    }
    CHECK_THROWS_AS(load_checkpoint(path.string()), CheckpointError);
    fs::remove(path);
}

TEST_CASE("bad magic and unsupported versions are rejected") {
    Fixture f = make_fixture();
    const auto path = temp_ckpt("magic");
    save_checkpoint(path.string(), f.meta, collect_named_tensors(f.model, f.head.proj));
    {
        std::fstream patch(path, std::ios::binary | std::ios::in | std::ios::out);
        patch.seekp(0);
        patch.write("XXXX", 4);
    }
    CHECK_THROWS_AS(load_checkpoint(path.string()), CheckpointError);
    {
        std::fstream patch(path, std::ios::binary | std::ios::in | std::ios::out);
        patch.seekp(0);
        patch.write(kCheckpointMagic, 4);
        const char version9[4] = {9, 0, 0, 0};
        patch.write(version9, 4);
    }
    try {
        load_checkpoint(path.string());
        FAIL("expected CheckpointError");
    } catch (const CheckpointError& e) {
        CHECK(std::string(e.what()).find("version") != std::string::npos);
    }
    fs::remove(path);
}

TEST_CASE("missing tensors are compatibility errors") {
    Fixture f = make_fixture();
    auto tensors = collect_named_tensors(f.model, f.head.proj);
    tensors.pop_back();  // drop head.bias
    const auto path = temp_ckpt("missing");
    save_checkpoint(path.string(), f.meta, tensors);
    Checkpoint ckpt = load_checkpoint(path.string());  // structurally fine
    CHECK_THROWS_AS(restore_state(ckpt), CheckpointError);
    fs::remove(path);
}

TEST_CASE("token-task checkpoints restore the token head") {
    ModelConfig mcfg;
    mcfg.vocab_size = 16;
    mcfg.d_model = 8;
    mcfg.n_heads = 2;
    mcfg.n_layers = 1;
    mcfg.d_ff = 12;
    mcfg.max_seq_len = 8;
    mcfg.mask_mode = MaskMode::kUnmasked;
    Rng rng(7);
    auto model = DecoderStack<float>::init(mcfg, rng);
    auto head = TokenHead<float>::init(3, mcfg.d_model, rng);

    CheckpointMeta meta;
    meta.task = "token";
    meta.model = mcfg;
    meta.lora_enabled = false;
    meta.label_names = {"O", "B-X", "I-X"};
    meta.vocab_tokens = {"a", "b"};

    const auto path = temp_ckpt("token");
    save_checkpoint(path.string(), meta, collect_named_tensors(model, head.proj));
    RestoredState st = restore_state(load_checkpoint(path.string()));
    CHECK(st.meta.model.mask_mode == MaskMode::kUnmasked);
    IdMatrix ids(1, 3);
    for (auto& v : ids.data) v = 3;
    BoolMatrix pad(1, 3, true);
    Tensor<float> a = token_logits(model.forward(ids, pad), head);
    Tensor<float> b = token_logits(st.model.forward(ids, pad), st.tok_head);
    for (std::size_t i = 0; i < a.numel(); ++i) CHECK(a.data()[i] == b.data()[i]);
    fs::remove(path);
}
