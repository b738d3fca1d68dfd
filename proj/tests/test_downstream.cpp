#include "doctest.h"

#include <cmath>
#include <set>

#include "support.hpp"
#include "timnet/downstream.hpp"

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

LabeledDataset tiny_labeled(std::int64_t n, std::uint64_t seed) {
    DatagenConfig d;
    d.n = n;
    d.seed = seed;
    d.height = 16;
    d.width = 16;
    d.max_len = 8;
    return labeled_from_corpus(generate_corpus(d));
}

}  // namespace

TEST_CASE("subsample_fraction: identity at 1.0, exact arithmetic, determinism, error") {
    std::vector<std::string> keys;
    for (int i = 0; i < 50; ++i) keys.push_back("0");
    for (int i = 0; i < 50; ++i) keys.push_back("1");

    auto all = subsample_fraction(keys, 1.0, 3);
    REQUIRE(all.size() == 100);
    for (std::size_t i = 0; i < all.size(); ++i) CHECK(all[i] == static_cast<std::int64_t>(i));

    auto tenth = subsample_fraction(keys, 0.1, 3);
    REQUIRE(tenth.size() == 10);
    int per_class[2] = {0, 0};
    for (auto i : tenth) per_class[keys[static_cast<std::size_t>(i)] == "1" ? 1 : 0]++;
    CHECK(per_class[0] == 5);
    CHECK(per_class[1] == 5);

    CHECK(subsample_fraction(keys, 0.1, 3) == tenth);
    CHECK(subsample_fraction(keys, 0.1, 4) != tenth);

    CHECK_THROWS_WITH_AS(subsample_fraction(keys, 0.01, 3), doctest::Contains("too small"), std::invalid_argument);
    CHECK_THROWS_AS(subsample_fraction(keys, 0.0, 3), std::invalid_argument);
    CHECK_THROWS_AS(subsample_fraction(keys, 1.5, 3), std::invalid_argument);
}

TEST_CASE("subsample_fraction: every class stays present at small fractions") {
    auto ds = tiny_labeled(300, 31);
    for (Task task : {Task::binary, Task::multilabel}) {
        const auto keys = stratification_keys(ds, task);
        std::set<std::string> all_groups(keys.begin(), keys.end());
        const auto picked = subsample_fraction(keys, 0.05, 9);
        std::set<std::string> picked_groups;
        for (auto i : picked) picked_groups.insert(keys[static_cast<std::size_t>(i)]);
        CHECK(picked_groups == all_groups);
    }
}

TEST_CASE("freeze_extractor: extractor tensors bit-identical after training") {
    auto ds = tiny_labeled(24, 32);
    DownstreamModel<float> model(tiny_arch(), 2, 7);
    std::vector<std::vector<float>> before;
    for (const auto& [name, p] : model.store().params)
        if (DownstreamModel<float>::is_extractor_tensor(name)) before.push_back(p->data);
    std::vector<std::vector<float>> before_buffers;
    for (const auto& [name, b] : model.store().buffers)
        if (DownstreamModel<float>::is_extractor_tensor(name)) before_buffers.push_back(b->data);

    FinetuneOptions opt;
    opt.epochs = 2;
    opt.batch_size = 8;
    opt.freeze_extractor = true;
    opt.lr = 1e-2;
    finetune(model, ds, nullptr, opt);

    std::size_t k = 0;
    for (const auto& [name, p] : model.store().params)
        if (DownstreamModel<float>::is_extractor_tensor(name)) CHECK(p->data == before[k++]);
    std::size_t kb = 0;
    for (const auto& [name, b] : model.store().buffers)
        if (DownstreamModel<float>::is_extractor_tensor(name)) CHECK(b->data == before_buffers[kb++]);

    // And the head did move.
    bool head_moved = false;
    for (const auto& [name, p] : model.store().params)
        if (!DownstreamModel<float>::is_extractor_tensor(name))
            for (float v : p->data) head_moved = head_moved || v != 0.0f;
    CHECK(head_moved);
}

TEST_CASE("memorization: 8 labeled examples reach training accuracy 1.0 within 300 steps") {
    auto full = tiny_labeled(64, 33);
    std::vector<std::int64_t> idx;
    int want0 = 4, want1 = 4;
    for (std::int64_t i = 0; i < full.size() && (want0 > 0 || want1 > 0); ++i) {
        if (full.binary[static_cast<std::size_t>(i)] == 0 && want0 > 0) {
            idx.push_back(i);
            --want0;
        } else if (full.binary[static_cast<std::size_t>(i)] == 1 && want1 > 0) {
            idx.push_back(i);
            --want1;
        }
    }
    auto ds = select_items(full, idx);
    REQUIRE(ds.size() == 8);
    DownstreamModel<float> model(tiny_arch(), 2, 11);
    FinetuneOptions opt;
    opt.lr = 1e-2;
    opt.epochs = 300;  // batch of 8 -> one step per epoch
    opt.batch_size = 8;
    bool memorized = false;
    // Run in chunks so we can stop early once training accuracy hits 1.
    for (int chunk = 0; chunk < 10 && !memorized; ++chunk) {
        FinetuneOptions part = opt;
        part.epochs = 30;
        part.seed = 100 + chunk;
        finetune(model, ds, nullptr, part);
        auto probs = predict(model, ds, 8);
        int correct = 0;
        for (std::int64_t i = 0; i < ds.size(); ++i)
            correct += (probs[static_cast<std::size_t>(i)] >= 0.5 ? 1 : 0) == ds.binary[static_cast<std::size_t>(i)];
        memorized = correct == 8;
    }
    CHECK(memorized);
}

TEST_CASE("predict: fresh model outputs 0.5 everywhere; eval is deterministic and batch-independent") {
    auto ds = tiny_labeled(10, 34);
    DownstreamModel<double> model(tiny_arch(), 2, 13);
    auto probs = predict(model, ds, 4);
    for (double p : probs) CHECK(p == 0.5);

    DownstreamModel<double> ml(tiny_arch(), 3, 13);
    auto mprobs = predict(ml, ds, 4);
    for (double p : mprobs) CHECK(p == 0.5);

    // Train a little so outputs are non-trivial, then compare batch sizes.
    FinetuneOptions opt;
    opt.lr = 1e-2;
    opt.epochs = 2;
    opt.batch_size = 5;
    finetune(model, ds, nullptr, opt);
    auto one_at_a_time = predict(model, ds, 1);
    auto as_batch = predict(model, ds, 10);
    REQUIRE(one_at_a_time.size() == as_batch.size());
    for (std::size_t i = 0; i < as_batch.size(); ++i) CHECK(std::abs(one_at_a_time[i] - as_batch[i]) < 1e-6);
    CHECK(predict(model, ds, 10) == as_batch);
}

TEST_CASE("evaluate_downstream: degenerate class flagged and excluded from macro averages") {
    auto ds = tiny_labeled(20, 35);
    for (auto& hot : ds.multihot) hot[2] = 1;  // force class 2 single-outcome
    DownstreamModel<double> model(tiny_arch(), 3, 17);
    auto report = evaluate_downstream(model, ds, Task::multilabel, 8);
    REQUIRE(report.per_class.size() == 3);
    CHECK(report.per_class[2].degenerate);
    CHECK_FALSE(report.per_class[2].auroc.has_value());
    CHECK(report.warnings.size() >= 1);
    CHECK_THROWS_AS(evaluate_downstream(model, LabeledDataset{}, Task::binary), std::invalid_argument);
}

TEST_CASE("multilabel fine-tuning drives training loss down") {
    auto ds = tiny_labeled(32, 36);
    DownstreamModel<float> model(tiny_arch(), 3, 19);
    FinetuneOptions opt;
    opt.lr = 1e-2;
    opt.epochs = 8;
    opt.batch_size = 8;
    opt.task = Task::multilabel;
    auto log = finetune(model, ds, nullptr, opt);
    CHECK(log.back().loss < log.front().loss);
    CHECK(std::abs(log.front().loss - std::log(2.0)) < 0.2);  // starts near chance
}
