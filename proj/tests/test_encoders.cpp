#include "doctest.h"

#include <cmath>

#include "support.hpp"
#include "timnet/encoders.hpp"

using namespace timnet;

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

}  // namespace

TEST_CASE("encode_text: all-pad input is defined via the position-0 fallback") {
    ParamStore<double> store;
    Rng rng(3);
    TextEncoder<double> enc(store, "text_encoder", 10, tiny_arch(), rng);
    Tape<double> tape(false);
    auto v = enc.encode(tape, {std::vector<int>(8, 0)});
    REQUIRE(v->size() == 16);
    for (double x : v->data) CHECK(std::isfinite(x));
}

TEST_CASE("encode_text: determinism") {
    ParamStore<double> store;
    Rng rng(4);
    TextEncoder<double> enc(store, "text_encoder", 20, tiny_arch(), rng);
    std::vector<int> seq{5, 7, 3, 0, 0, 0, 0, 0};
    Tape<double> tape(false);
    auto a = enc.encode(tape, {seq});
    auto b = enc.encode(tape, {seq});
    CHECK(a->data == b->data);
}

TEST_CASE("encode_text: pad positions cannot influence the embedding") {
    // Masked attention keys plus masked GAP mean nothing computed at a pad
    // position can reach the output. Corrupting everything a pad position
    // reads (its token-embedding row and its positional rows) must leave the
    // embedding bit-identical.
    ParamStore<double> store;
    Rng rng(9);
    TextEncoder<double> enc(store, "text_encoder", 20, tiny_arch(), rng);
    std::vector<int> seq{4, 9, 2, 0, 0, 0, 0, 0};
    Tape<double> tape(false);
    auto before = enc.encode(tape, {seq});

    auto pad_row = store.find("text_encoder.token_emb");
    REQUIRE(pad_row);
    for (std::int64_t j = 0; j < 8; ++j) pad_row->data[static_cast<std::size_t>(j)] = 1e6;  // token id 0 row
    auto pos = store.find("text_encoder.pos_emb");
    REQUIRE(pos);
    for (std::int64_t p = 3; p < 8; ++p)  // positions occupied only by pads
        for (std::int64_t j = 0; j < 8; ++j) pos->data[static_cast<std::size_t>(p * 8 + j)] = -1e6;

    auto after = enc.encode(tape, {seq});
    for (std::size_t i = 0; i < before->data.size(); ++i) CHECK(before->data[i] == after->data[i]);
}

TEST_CASE("encode_text: id >= vocab size raises a vocabulary error") {
    ParamStore<double> store;
    Rng rng(5);
    TextEncoder<double> enc(store, "text_encoder", 10, tiny_arch(), rng);
    Tape<double> tape(false);
    std::vector<int> bad{1, 2, 10, 0, 0, 0, 0, 0};
    CHECK_THROWS_WITH_AS(enc.encode(tape, {bad}), doctest::Contains("vocabulary"), std::invalid_argument);
    std::vector<int> wrong_len{1, 2, 3};
    CHECK_THROWS_AS(enc.encode(tape, {wrong_len}), std::invalid_argument);
}

TEST_CASE("encode_image: zero image through a fresh encoder gives the zero FC bias") {
    ParamStore<double> store;
    Rng rng(6);
    ImageEncoder<double> enc(store, "image_encoder", tiny_arch(), rng);
    Tape<double> tape(false);
    auto img = zeros<double>({1, 1, 16, 16});
    auto v = enc.encode(tape, img, false);  // eval mode: running stats are 0/1
    for (double x : v->data) CHECK(x == 0.0);
}

TEST_CASE("encode_image: determinism and spatial-size validation") {
    ParamStore<double> store;
    Rng rng(7);
    ImageEncoder<double> enc(store, "image_encoder", tiny_arch(), rng);
    Rng data_rng(8);
    auto img = testsupport::rand_tensor<double>({2, 1, 16, 16}, data_rng, 0.5, false);
    Tape<double> tape(false);
    auto a = enc.encode(tape, img, false);
    auto b = enc.encode(tape, img, false);
    CHECK(a->data == b->data);

    auto odd = zeros<double>({1, 1, 15, 15});
    CHECK_THROWS_WITH_AS(enc.encode(tape, odd, false), doctest::Contains("divisible"), std::invalid_argument);
}

TEST_CASE("encode_image: gradient of squared embedding norm w.r.t. pixels vs finite differences") {
    ParamStore<double> store;
    Rng rng(10);
    ArchConfig arch = tiny_arch();
    ImageEncoder<double> enc(store, "image_encoder", arch, rng);
    Rng data_rng(11);
    auto img = testsupport::rand_tensor<double>({1, 1, 8, 8}, data_rng, 0.5, true);
    const double err = testsupport::grad_check<double>(
        [&](Tape<double>& t) {
            auto v = enc.encode(t, img, false);
            return scale(t, sum_all(t, mul(t, v, v)), 1.0 / static_cast<double>(v->size()));
        },
        {img});
    CHECK(err < 1e-4);
}

TEST_CASE("extract_feature_maps: GAP + FC equals encode_image; stride schedule shape") {
    ParamStore<double> store;
    Rng rng(12);
    ArchConfig arch;  // defaults: 3 stages, base 16
    ImageEncoder<double> enc(store, "image_encoder", arch, rng);
    Rng data_rng(13);
    auto img = testsupport::rand_tensor<double>({1, 1, 32, 32}, data_rng, 0.5, false);
    Tape<double> tape(false);
    auto fm = enc.extract_feature_maps(tape, img, false);
    CHECK(fm->shape() == std::vector<std::int64_t>{1, 64, 8, 8});
    CHECK(fm->dim(2) >= 4);

    auto manual = enc.fc().forward(tape, global_avg_pool(tape, fm));
    auto direct = enc.encode(tape, img, false);
    for (std::size_t i = 0; i < manual->data.size(); ++i)
        CHECK(std::abs(manual->data[i] - direct->data[i]) < 1e-6);
}

TEST_CASE("GAP is invariant to spatial permutation of the feature map") {
    Rng rng(14);
    auto fm = testsupport::rand_tensor<double>({3, 4, 4}, rng, 1.0, false);
    Tape<double> tape(false);
    auto g1 = global_avg_pool(tape, fm);
    // Reverse every channel's cells.
    auto permuted = make_tensor<double>({3, 4, 4}, fm->data);
    for (int c = 0; c < 3; ++c)
        std::reverse(permuted->data.begin() + c * 16, permuted->data.begin() + (c + 1) * 16);
    auto g2 = global_avg_pool(tape, permuted);
    for (std::size_t i = 0; i < g1->data.size(); ++i) CHECK(std::abs(g1->data[i] - g2->data[i]) < 1e-12);
}

TEST_CASE("parameter counts match the architecture arithmetic") {
    const std::int64_t V = 50;
    ArchConfig a;  // defaults
    ParamStore<double> store;
    Rng rng(15);
    TextEncoder<double> text(store, "text_encoder", V, a, rng);
    const std::int64_t text_expected =
        V * a.d_tok + a.max_len * a.d_tok +
        a.text_layers * (4 * (a.d_tok * a.d_tok + a.d_tok)        // wq wk wv wo
                         + 2 * a.d_tok                            // ln1
                         + a.d_tok * a.text_ff + a.text_ff        // ff1
                         + a.text_ff * a.d_tok + a.d_tok          // ff2
                         + 2 * a.d_tok)                           // ln2
        + a.d_tok * a.text_channels + a.text_channels             // 1x1 conv
        + a.text_channels * a.d_emb + a.d_emb;                    // fc
    CHECK(store.param_count() == text_expected);

    ParamStore<double> istore;
    ImageEncoder<double> image(istore, "image_encoder", a, rng);
    std::int64_t image_expected = a.base_width * a.in_channels * 9;  // stem
    std::int64_t w = a.base_width;
    for (std::int64_t s = 0; s < a.image_stages; ++s) {
        image_expected += 2 * (w * w * 9) + 2 * (2 * w);  // two conv+bn blocks
        if (s + 1 < a.image_stages) {
            image_expected += (2 * w) * w * 4 + 2 * (2 * w);  // transition conv+bn
            w *= 2;
        }
    }
    image_expected += w * w + 2 * w;           // neck 1x1 conv + bn
    image_expected += w * a.d_emb + a.d_emb;   // fc
    CHECK(istore.param_count() == image_expected);
}
