#include "doctest.h"

#include <filesystem>
#include <fstream>

#include "support.hpp"
#include "timnet/downstream.hpp"
#include "timnet/matcher.hpp"
#include "timnet/weights.hpp"

using namespace timnet;
namespace fs = std::filesystem;

namespace {

ArchConfig tiny_arch() {
    ArchConfig a;
    a.d_emb = 16;
    a.d_tok = 8;
    a.text_layers = 1;
    a.text_ff = 16;
    a.text_channels = 16;
    a.max_len = 8;
    a.image_stages = 2;
    a.base_width = 8;
    a.head_hidden = 8;
    a.cls_hidden = 8;
    return a;
}

std::vector<char> read_bytes(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    return std::vector<char>((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
}

std::string tmp_path(const std::string& name) { return (fs::temp_directory_path() / name).string(); }

}  // namespace

TEST_CASE("weight file: save -> load -> save is byte-identical") {
    ParamStore<float> store;
    Rng rng(61);
    ImageEncoder<float> enc(store, "image_encoder", tiny_arch(), rng);
    const auto p1 = tmp_path("timnet_w1.timw");
    const auto p2 = tmp_path("timnet_w2.timw");
    save_weights(p1, store);
    auto wf = load_weight_file(p1);
    save_weight_file(p2, wf);
    CHECK(read_bytes(p1) == read_bytes(p2));
    fs::remove(p1);
    fs::remove(p2);
}

TEST_CASE("weight file: load restores bit-identical predictions") {
    DatagenConfig d;
    d.n = 8;
    d.seed = 62;
    d.height = 16;
    d.width = 16;
    d.max_len = 8;
    auto ds = labeled_from_corpus(generate_corpus(d));

    DownstreamModel<float> model(tiny_arch(), 2, 63);
    FinetuneOptions opt;
    opt.lr = 1e-2;
    opt.epochs = 3;
    opt.batch_size = 4;
    finetune(model, ds, nullptr, opt);
    const auto probs = predict(model, ds, 4);

    const auto path = tmp_path("timnet_w3.timw");
    save_weights(path, model.store());
    DownstreamModel<float> fresh(tiny_arch(), 2, 999);  // different init seed
    load_weights(path, fresh.store());
    CHECK(predict(fresh, ds, 4) == probs);
    fs::remove(path);
}

TEST_CASE("weight file: corrupt magic, truncation, shape conflicts") {
    ParamStore<float> store;
    Rng rng(64);
    ImageEncoder<float> enc(store, "image_encoder", tiny_arch(), rng);
    const auto path = tmp_path("timnet_w4.timw");
    save_weights(path, store);

    auto bytes = read_bytes(path);
    bytes[0] = 'X';
    const auto bad_magic = tmp_path("timnet_w4_magic.timw");
    std::ofstream(bad_magic, std::ios::binary).write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    CHECK_THROWS_WITH_AS(load_weight_file(bad_magic), doctest::Contains("magic"), std::runtime_error);

    const auto truncated = tmp_path("timnet_w4_trunc.timw");
    std::ofstream(truncated, std::ios::binary).write(read_bytes(path).data(), 40);
    CHECK_THROWS_WITH_AS(load_weight_file(truncated), doctest::Contains("truncated"), std::runtime_error);

    ArchConfig other = tiny_arch();
    other.base_width = 4;  // shape conflict
    ParamStore<float> store2;
    Rng rng2(65);
    ImageEncoder<float> enc2(store2, "image_encoder", other, rng2);
    auto wf = load_weight_file(path);
    CHECK_THROWS_WITH_AS(load_strict(store2, wf), doctest::Contains("shape"), std::runtime_error);

    ParamStore<float> renamed;
    Rng rng3(66);
    ImageEncoder<float> enc3(renamed, "different_prefix", tiny_arch(), rng3);
    CHECK_THROWS_WITH_AS(load_strict(renamed, wf), doctest::Contains("missing"), std::runtime_error);

    fs::remove(path);
    fs::remove(bad_magic);
    fs::remove(truncated);
}

TEST_CASE("duplicate tensor names are rejected") {
    WeightFile wf;
    WeightEntry e;
    e.name = "a";
    e.shape = {1};
    e.dtype = 0;
    e.raw.assign(4, 0);
    wf.entries.push_back(e);
    wf.entries.push_back(e);
    CHECK_THROWS_WITH_AS(save_weight_file(tmp_path("timnet_dup.timw"), wf), doctest::Contains("duplicate"),
                         std::invalid_argument);
}

TEST_CASE("partial load: matcher checkpoint into a downstream model") {
    const ArchConfig arch = tiny_arch();
    TimNet<float> net(32, arch, 71);
    // Make extractor tensors distinctive.
    for (auto& [name, p] : net.store().params)
        for (auto& v : p->data) v += 0.001f;
    const auto path = tmp_path("timnet_matcher.timw");
    save_weights(path, net.store());

    DownstreamModel<float> model(arch, 2, 72);
    auto report = load_partial(model.store(), load_weight_file(path));

    // Every extractor tensor (params and batchnorm stats) is bit-identical to
    // the checkpoint.
    auto wf = load_weight_file(path);
    std::size_t checked = 0;
    auto check_store = [&](const auto& entries) {
        for (const auto& [name, p] : entries) {
            if (!DownstreamModel<float>::is_extractor_tensor(name)) continue;
            if (name.rfind("image_encoder.fc.", 0) == 0) continue;  // matcher-only projection
            const WeightEntry* e = wf.find(name);
            REQUIRE(e);
            std::vector<float> vals(p->data.size());
            std::memcpy(vals.data(), e->raw.data(), e->raw.size());
            CHECK(p->data == vals);
            ++checked;
        }
    };
    check_store(model.store().params);
    check_store(model.store().buffers);
    CHECK(checked > 10);

    // Head tensors reported as freshly initialized; text branch ignored.
    bool head_fresh = false, text_ignored = false, fc_ignored = false;
    for (const auto& n : report.initialized) head_fresh = head_fresh || n.rfind("cls_head.", 0) == 0;
    for (const auto& n : report.ignored) {
        text_ignored = text_ignored || n.rfind("text_encoder.", 0) == 0;
        fc_ignored = fc_ignored || n.rfind("image_encoder.fc.", 0) == 0;
    }
    CHECK(head_fresh);
    CHECK(text_ignored);
    CHECK(fc_ignored);
    fs::remove(path);
}

TEST_CASE("downstream model is buildable from a file holding only image-branch tensors") {
    const ArchConfig arch = tiny_arch();
    TimNet<float> net(32, arch, 73);
    WeightFile full = snapshot(net.store());
    WeightFile image_only;
    for (const auto& e : full.entries)
        if (e.name.rfind("image_encoder.", 0) == 0) image_only.entries.push_back(e);

    DownstreamModel<float> model(arch, 2, 74);
    auto report = load_partial(model.store(), image_only);
    CHECK(report.loaded.size() > 0);
    for (const auto& n : report.loaded) CHECK(n.rfind("image_encoder.", 0) == 0);
}

TEST_CASE("f64 store round-trips through an f64 file; cross-precision load widens exactly") {
    ParamStore<double> store;
    Rng rng(75);
    ImageEncoder<double> enc(store, "image_encoder", tiny_arch(), rng);
    const auto path = tmp_path("timnet_f64.timw");
    save_weights(path, store);
    auto wf = load_weight_file(path);
    CHECK(wf.entries[0].dtype == 1);

    ParamStore<double> store2;
    Rng rng2(76);
    ImageEncoder<double> enc2(store2, "image_encoder", tiny_arch(), rng2);
    load_strict(store2, wf);
    CHECK(store2.params[0].second->data == store.params[0].second->data);
    fs::remove(path);
}
