#include "doctest.h"

#include <cmath>
#include <set>

#include "support.hpp"
#include "timnet/matcher.hpp"

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

DatagenConfig tiny_data(std::int64_t n, std::uint64_t seed) {
    DatagenConfig d;
    d.n = n;
    d.seed = seed;
    d.height = 16;
    d.width = 16;
    d.max_len = 8;
    return d;
}

}  // namespace

TEST_CASE("build_pairs: N=2 ratio 1 gives the only possible negatives") {
    auto pairs = build_pairs(2, 1.0, 7);
    REQUIRE(pairs.size() == 4);
    int n_true = 0;
    std::set<std::pair<int, int>> negs;
    for (const auto& p : pairs) {
        if (p.match) {
            CHECK(p.image_index == p.report_index);
            ++n_true;
        } else {
            negs.insert({p.image_index, p.report_index});
        }
    }
    CHECK(n_true == 2);
    CHECK(negs == std::set<std::pair<int, int>>{{0, 1}, {1, 0}});
}

TEST_CASE("build_pairs: exact class balance at ratio 1 and seeded determinism") {
    auto pairs = build_pairs(1000, 1.0, 42);
    std::int64_t n_true = 0, n_neg = 0;
    for (const auto& p : pairs) {
        (p.match ? n_true : n_neg)++;
        if (!p.match) CHECK(p.image_index != p.report_index);  // negative validity
    }
    CHECK(n_true == 1000);
    CHECK(n_neg == 1000);

    auto again = build_pairs(1000, 1.0, 42);
    REQUIRE(again.size() == pairs.size());
    for (std::size_t i = 0; i < pairs.size(); ++i) {
        CHECK(again[i].image_index == pairs[i].image_index);
        CHECK(again[i].report_index == pairs[i].report_index);
        CHECK(again[i].match == pairs[i].match);
    }
    auto other = build_pairs(1000, 1.0, 43);
    bool same = true;
    for (std::size_t i = 0; i < pairs.size(); ++i)
        same = same && other[i].image_index == pairs[i].image_index && other[i].report_index == pairs[i].report_index;
    CHECK_FALSE(same);
}

TEST_CASE("build_pairs: corpus below 2 items cannot form negatives") {
    CHECK_THROWS_AS(build_pairs(1, 1.0, 1), std::invalid_argument);
    CHECK_THROWS_AS(build_pairs(10, 0.0, 1), std::invalid_argument);
}

TEST_CASE("match_forward equals the manual composition bit-exactly") {
    auto corpus = generate_corpus(tiny_data(4, 21));
    TimNet<double> net(corpus.vocab.size(), tiny_arch(), 5);
    std::vector<std::vector<int>> tokens{corpus.items[0].tokens, corpus.items[1].tokens};
    auto images = images_to_tensor<double>(corpus, {1, 0});

    Tape<double> t1(false);
    auto direct = net.forward(t1, tokens, images, false);
    Tape<double> t2(false);
    auto vt = net.text_encoder().encode(t2, tokens);
    auto vi = net.image_encoder().encode(t2, images, false);
    auto manual = net.head().forward(t2, abs_diff(t2, vt, vi));
    CHECK(direct->data == manual->data);
}

TEST_CASE("swapping the abs-diff operands leaves logits bit-identical") {
    auto corpus = generate_corpus(tiny_data(4, 22));
    TimNet<double> net(corpus.vocab.size(), tiny_arch(), 6);
    std::vector<std::vector<int>> tokens{corpus.items[2].tokens};
    auto images = images_to_tensor<double>(corpus, {3});
    Tape<double> tape(false);
    auto vt = net.text_encoder().encode(tape, tokens);
    auto vi = net.image_encoder().encode(tape, images, false);
    auto a = net.head().forward(tape, abs_diff(tape, vt, vi));
    auto b = net.head().forward(tape, abs_diff(tape, vi, vt));
    CHECK(a->data == b->data);
}

TEST_CASE("fresh (zero-init) head: probability 0.5 and loss exactly ln 2") {
    auto corpus = generate_corpus(tiny_data(6, 23));
    TimNet<double> net(corpus.vocab.size(), tiny_arch(), 7);
    auto pairs = build_pairs(corpus.size(), 1.0, 8);
    std::vector<double> scores;
    std::vector<int> labels;
    score_pairs(net, corpus, pairs, 4, scores, labels);
    for (double s : scores) CHECK(s == 0.5);

    std::vector<std::vector<int>> tokens{corpus.items[0].tokens, corpus.items[1].tokens};
    auto images = images_to_tensor<double>(corpus, {0, 1});
    Tape<double> tape;
    auto logits = net.forward(tape, tokens, images, true);
    auto loss = cross_entropy(tape, logits, {1, 0});
    CHECK(std::abs(loss->item() - std::log(2.0)) < 1e-6);
}

TEST_CASE("memorization: one repeated pair reaches loss < 0.01 within 200 steps") {
    auto corpus = generate_corpus(tiny_data(2, 24));
    TimNet<float> net(corpus.vocab.size(), tiny_arch(), 9);
    AdamOptions<float> aopt;
    aopt.lr = 1e-2f;  // the op takes the optimizer config; memorization uses a fast one
    Adam<float> adam(net.store().params, aopt);
    std::vector<std::vector<int>> tokens{corpus.items[0].tokens};
    auto images = images_to_tensor<float>(corpus, {0});
    double loss_val = 1.0;
    for (int step = 0; step < 200 && loss_val >= 0.01; ++step) {
        Tape<float> tape;
        adam.zero_grad();
        auto logits = net.forward(tape, tokens, images, true);
        auto loss = cross_entropy(tape, logits, {1});
        tape.backward(loss);
        adam.step();
        loss_val = static_cast<double>(loss->item());
    }
    CHECK(loss_val < 0.01);
}

TEST_CASE("pretrain: final-epoch training loss below first-epoch loss; log layout") {
    auto corpus = generate_corpus(tiny_data(48, 25));
    auto train = slice_corpus(corpus, 0, 32);
    auto val = slice_corpus(corpus, 32, 16);
    TimNet<float> net(corpus.vocab.size(), tiny_arch(), 10);
    MatchTrainOptions opt;
    opt.lr = 1e-3;
    opt.epochs = 3;
    opt.batch_size = 8;
    opt.seed = 11;
    auto log = pretrain(net, train, val, opt);
    REQUIRE(log.size() == 6);  // train + val per epoch
    CHECK(log[0].split == "train");
    CHECK(log[1].split == "val");
    CHECK(log.back().split == "val");
    const double first = log[0].loss;
    const double last = log[log.size() - 2].loss;
    CHECK(last < first);
}

TEST_CASE("evaluate_matching: single-class pair set is an error") {
    auto corpus = generate_corpus(tiny_data(4, 26));
    TimNet<double> net(corpus.vocab.size(), tiny_arch(), 12);
    std::vector<PairedExample> only_true;
    for (std::int32_t i = 0; i < 4; ++i) only_true.push_back({i, i, true});
    CHECK_THROWS_WITH_AS(evaluate_matching(net, corpus, only_true), doctest::Contains("auROC"),
                         std::invalid_argument);
    CHECK_THROWS_AS(evaluate_matching(net, corpus, {}), std::invalid_argument);
}

TEST_CASE("pretrain determinism: same seed gives bit-identical weights and logs") {
    auto corpus = generate_corpus(tiny_data(24, 27));
    auto train = slice_corpus(corpus, 0, 16);
    auto val = slice_corpus(corpus, 16, 8);
    auto run = [&](std::vector<float>& flat, std::vector<double>& losses) {
        TimNet<float> net(corpus.vocab.size(), tiny_arch(), 13);
        MatchTrainOptions opt;
        opt.epochs = 2;
        opt.batch_size = 8;
        opt.seed = 14;
        auto log = pretrain(net, train, val, opt);
        for (const auto& [name, p] : net.store().params) {
            (void)name;
            flat.insert(flat.end(), p->data.begin(), p->data.end());
        }
        for (const auto& r : log) losses.push_back(r.loss);
    };
    std::vector<float> w1, w2;
    std::vector<double> l1, l2;
    run(w1, l1);
    run(w2, l2);
    CHECK(w1 == w2);
    CHECK(l1 == l2);
}
