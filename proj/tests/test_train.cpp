#include <gtest/gtest.h>

#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "deeptraverse/checkpoint.hpp"
#include "deeptraverse/errors.hpp"
#include "deeptraverse/train.hpp"

namespace dt {
namespace {

namespace fs = std::filesystem;

Dataset blobs(Index n, Index classes, Index size, std::uint64_t seed) {
    Dataset d = synthetic_blobs(n, classes, Shape{3, size, size}, seed);
    d.stats = channel_stats(d);
    return d;
}

TrainConfig plain(double lr, double momentum = 0.0, double wd = 0.0) {
    TrainConfig c;
    c.epochs = 1;
    c.learning_rate = lr;
    c.momentum = momentum;
    c.weight_decay = wd;
    c.schedule = Schedule::Constant;
    c.augment = AugmentPolicy::None;
    return c;
}

std::vector<Tensor> snapshot(const Model& m) {
    std::vector<Tensor> out;
    for (const Parameter* p : m.parameters()) out.push_back(p->value);
    return out;
}

bool same_parameters(const Model& a, const Model& b) {
    const auto pa = a.parameters(), pb = b.parameters();
    if (pa.size() != pb.size()) return false;
    for (std::size_t i = 0; i < pa.size(); ++i)
        if (pa[i]->name != pb[i]->name || !bit_equal(pa[i]->value, pb[i]->value)) return false;
    return true;
}

TEST(Sgd, PlainGradientStep) {
    Parameter p{"theta", Tensor(Shape{1}, 1.0)};
    OptimState st = make_optim_state(plain(0.1));
    Gradients g;
    g[&p] = Tensor(Shape{1}, 0.5);
    sgd_step({&p}, g, st);
    EXPECT_DOUBLE_EQ(p.value[0], 0.95);
    EXPECT_EQ(st.step, 1);
}

TEST(Sgd, ZeroGradientIsFixedPoint) {
    Parameter p{"theta", Tensor(Shape{3}, std::vector<double>{1.5, -2.0, 0.25})};
    const Tensor before = p.value;
    OptimState st = make_optim_state(plain(0.1));
    Gradients g;
    g[&p] = Tensor(Shape{3});
    sgd_step({&p}, g, st);
    sgd_step({&p}, Gradients{}, st);
    EXPECT_TRUE(bit_equal(p.value, before));
}

TEST(Sgd, MomentumHandIteration) {
    Parameter p{"theta", Tensor(Shape{1}, 0.0)};
    OptimState st = make_optim_state(plain(0.1, 0.9));
    Gradients g;
    g[&p] = Tensor(Shape{1}, 1.0);
    sgd_step({&p}, g, st);
    EXPECT_DOUBLE_EQ(st.velocity.at("theta")[0], 1.0);
    EXPECT_DOUBLE_EQ(p.value[0], -0.1);
    sgd_step({&p}, g, st);
    EXPECT_DOUBLE_EQ(st.velocity.at("theta")[0], 1.9);
    EXPECT_DOUBLE_EQ(p.value[0], -0.29);
}

TEST(Sgd, WeightDecaySkipsExcludedParameters) {
    Parameter w{"w", Tensor(Shape{1}, 2.0), true};
    Parameter b{"b", Tensor(Shape{1}, 2.0), false};
    OptimState st = make_optim_state(plain(0.1, 0.0, 0.5));
    sgd_step({&w, &b}, Gradients{}, st);
    EXPECT_DOUBLE_EQ(w.value[0], 2.0 - 0.1 * 0.5 * 2.0);
    EXPECT_EQ(b.value[0], 2.0);
    TrainConfig all = plain(0.1, 0.0, 0.5);
    all.decay_norm_and_bias = true;
    OptimState st_all = make_optim_state(all);
    sgd_step({&b}, Gradients{}, st_all);
    EXPECT_DOUBLE_EQ(b.value[0], 2.0 - 0.1 * 0.5 * 2.0);
}

TEST(Sgd, NonFiniteGradientNamesParameterAndMovesNothing) {
    Parameter a{"blocks.0.ok", Tensor(Shape{2}, 1.0)};
    Parameter b{"blocks.1.bad", Tensor(Shape{2}, 1.0)};
    OptimState st = make_optim_state(plain(0.1));
    Gradients g;
    g[&a] = Tensor(Shape{2}, 1.0);
    g[&b] = Tensor(Shape{2}, std::vector<double>{0.0, std::nan("")});
    try {
        sgd_step({&a, &b}, g, st);
        ADD_FAILURE();
    } catch (const NumericError& e) {
        EXPECT_NE(std::string(e.what()).find("blocks.1.bad"), std::string::npos) << e.what();
    }
    EXPECT_EQ(a.value[0], 1.0);
}

TEST(Schedule, CosineEndpoints) {
    TrainConfig c = plain(0.1);
    c.schedule = Schedule::Cosine;
    c.epochs = 10;
    const OptimState st = make_optim_state(c);
    EXPECT_DOUBLE_EQ(scheduled_lr(st, 0), 0.1);
    EXPECT_NEAR(scheduled_lr(st, 5), 0.05, 1e-15);
    EXPECT_NEAR(scheduled_lr(st, 10), 0.0, 1e-15);
    EXPECT_GT(scheduled_lr(st, 3), scheduled_lr(st, 4));
}

TEST(Evaluate, OneHotLogitsArePerfect) {
    Tensor logits(Shape{20, 10});
    std::vector<int> labels(20);
    for (int i = 0; i < 20; ++i) {
        labels[i] = (i * 7) % 10;
        logits[i * 10 + labels[i]] = 1.0;
    }
    const ScoreSums s = score_logits(logits, labels);
    EXPECT_EQ(s.top1, 20);
    EXPECT_EQ(s.top5, 20);
}

TEST(Evaluate, FiveClassesTopFiveIsAlwaysHit) {
    Rng rng(1);
    Tensor logits(Shape{50, 5});
    for (double& v : logits.values()) v = rng.normal();
    std::vector<int> labels(50);
    for (int i = 0; i < 50; ++i) labels[i] = static_cast<int>(rng.below(5));
    EXPECT_EQ(score_logits(logits, labels).top5, 50);
}

TEST(Evaluate, TopKTiesFavourLowerIndex) {
    const std::vector<double> row = {1.0, 1.0, 1.0, 1.0, 1.0, 1.0};
    EXPECT_TRUE(in_top_k(row, 4, 5));
    EXPECT_FALSE(in_top_k(row, 5, 5));
    EXPECT_TRUE(in_top_k(row, 0, 1));
    EXPECT_FALSE(in_top_k(row, 1, 1));
}

TEST(Evaluate, RandomLogitsNearChance) {
    Rng rng(2024);
    const Index n = 10000;
    Tensor logits(Shape{n, 10});
    for (double& v : logits.values()) v = rng.normal();
    std::vector<int> labels(static_cast<std::size_t>(n));
    for (Index i = 0; i < n; ++i) labels[i] = static_cast<int>(i % 10);
    const double top1 = static_cast<double>(score_logits(logits, labels).top1) / static_cast<double>(n);
    EXPECT_NEAR(top1, 0.10, 0.03);
}

TEST(Evaluate, ModelMetricsInRange) {
    Model m = build_model(dt_tiny(3, 4, 8), 1);
    const EvalMetrics e = evaluate(m, blobs(40, 4, 8, 1), 16);
    EXPECT_EQ(e.samples, 40);
    EXPECT_GE(e.top1, 0.0);
    EXPECT_LE(e.top1, e.top5);
    EXPECT_EQ(e.top5, 1.0);
    EXPECT_GT(e.loss, 0.0);
}

TEST(TrainEpoch, ZeroLearningRateLeavesParameters) {
    Model m = build_model(dt_tiny(3, 4, 8), 3);
    const std::vector<Tensor> before = snapshot(m);
    TrainConfig c = plain(0.0, 0.9, 5e-4);
    OptimState st = make_optim_state(c);
    Rng rng(3);
    train_epoch(m, blobs(64, 4, 8, 3), st, rng, 16, AugmentPolicy::FlipCrop);
    const std::vector<Tensor> after = snapshot(m);
    for (std::size_t i = 0; i < before.size(); ++i) EXPECT_TRUE(bit_equal(before[i], after[i])) << i;
    EXPECT_EQ(st.epoch, 1);
}

TEST(TrainEpoch, Deterministic) {
    const Dataset d = blobs(64, 4, 8, 4);
    std::vector<double> losses[2];
    Model models[2] = {build_model(dt_tiny(3, 4, 8), 4), build_model(dt_tiny(3, 4, 8), 4)};
    for (int run = 0; run < 2; ++run) {
        OptimState st = make_optim_state(plain(0.05, 0.9, 5e-4));
        Rng rng(44);
        for (int e = 0; e < 2; ++e)
            losses[run].push_back(train_epoch(models[run], d, st, rng, 16, AugmentPolicy::FlipCrop).loss);
    }
    EXPECT_EQ(losses[0], losses[1]);
    EXPECT_TRUE(same_parameters(models[0], models[1]));
}

TEST(TrainEpoch, SkipsSingleSampleTail) {
    Model m = build_model(dt_tiny(3, 2, 8), 5);
    OptimState st = make_optim_state(plain(0.01));
    Rng rng(5);
    const EpochMetrics e = train_epoch(m, blobs(33, 2, 8, 5), st, rng, 16, AugmentPolicy::None);
    EXPECT_EQ(e.samples, 32);
    EXPECT_EQ(st.step, 2);
}

TEST(TrainEpoch, OneEpochOnBlobsBeatsChance) {
    Model m = build_model(dt_tiny(3, 4, 16), 1);
    OptimState st = make_optim_state(plain(0.05, 0.9, 5e-4));
    Rng rng(6);
    const EpochMetrics e = train_epoch(m, blobs(256, 4, 16, 6), st, rng, 32, AugmentPolicy::None);
    EXPECT_GT(e.accuracy, 0.25);
}

// Validated once at this seed and frozen: the loss falls on every one of the
// first five epochs at lr 0.01.
TEST(TrainEpoch, BlobsLossDecreasesFrozen) {
    Model m = build_model(dt_tiny(3, 4, 16), 1);
    TrainConfig c = plain(0.01, 0.9, 5e-4);
    c.epochs = 5;
    OptimState st = make_optim_state(c);
    Rng rng(7);
    const Dataset d = blobs(128, 4, 16, 7);
    std::vector<double> losses;
    for (int e = 0; e < 5; ++e) losses.push_back(train_epoch(m, d, st, rng, 32, AugmentPolicy::None).loss);
    for (int e = 1; e < 5; ++e) EXPECT_LT(losses[e], losses[e - 1]) << e;
    const double frozen[5] = {1.5670951048841233, 1.2110597738430227, 0.9691393711158558, 0.77334644973051025,
                              0.47744004392021167};
    for (int e = 0; e < 5; ++e) EXPECT_NEAR(losses[e], frozen[e], 1e-9) << e;
}

TrainState state_for(const OptimState& st, const Rng& rng, const Dataset& d) {
    TrainState s;
    s.optim = st;
    s.rng_state = rng.state();
    s.stats = d.stats;
    s.history.push_back(EpochRecord{st.epoch, st.learning_rate, 1.25, 0.5, 1.5, 0.25, 0.75});
    s.extra.set("dataset", "blobs");
    return s;
}

TEST(Checkpoint, RoundTripLogitsBitIdentical) {
    Model m = build_model(dt_tiny(3, 4, 8), 8);
    const Dataset d = blobs(32, 4, 8, 8);
    OptimState st = make_optim_state(plain(0.05, 0.9, 5e-4));
    Rng rng(8);
    train_epoch(m, d, st, rng, 16, AugmentPolicy::None);
    const TrainState ts = state_for(st, rng, d);
    const Checkpoint ck = decode_checkpoint(encode_checkpoint(m, ts));
    Model loaded = ck.model;
    EXPECT_EQ(ck.config, m.config);
    EXPECT_TRUE(same_parameters(m, loaded));
    Dataset test = d;
    normalize(test);
    EXPECT_TRUE(bit_equal(infer(m, test.images), infer(loaded, test.images)));
    EXPECT_EQ(ck.state.history, ts.history);
    EXPECT_EQ(ck.state.rng_state, ts.rng_state);
    EXPECT_EQ(ck.state.optim.step, st.step);
    EXPECT_EQ(ck.state.optim.velocity.size(), st.velocity.size());
    EXPECT_EQ(ck.state.stats.mean, d.stats.mean);
    EXPECT_EQ(ck.state.extra.get_string("dataset"), "blobs");
}

TEST(Checkpoint, TruncatedAndCorruptAreFormatErrors) {
    const Model m = build_model(dt_tiny(3, 4, 8), 9);
    const std::vector<std::uint8_t> bytes = encode_checkpoint(m, TrainState{});
    for (std::size_t cut : {std::size_t{0}, std::size_t{7}, std::size_t{20}, bytes.size() / 2, bytes.size() - 1})
        EXPECT_THROW(decode_checkpoint(std::span(bytes).first(cut)), FormatError) << cut;
    std::vector<std::uint8_t> bad = bytes;
    bad[0] = 'X';
    EXPECT_THROW(decode_checkpoint(bad), FormatError);
    bad = bytes;
    bad[8] = 99;
    EXPECT_THROW(decode_checkpoint(bad), FormatError);
    std::vector<std::uint8_t> extra = bytes;
    extra.push_back(0);
    EXPECT_THROW(decode_checkpoint(extra), FormatError);
}

TEST(Checkpoint, ShapeDisagreementNamesTensor) {
    const Model m = build_model(dt_tiny(3, 4, 8), 10);
    RawCheckpoint raw = decode_raw(encode_checkpoint(m, TrainState{}));
    for (NamedTensor& t : raw.tensors) {
        if (t.name == "head.bias") t.value = Tensor(Shape{5});
    }
    try {
        decode_checkpoint(encode_raw(raw));
        ADD_FAILURE();
    } catch (const FormatError& e) {
        EXPECT_NE(std::string(e.what()).find("head.bias"), std::string::npos) << e.what();
    }
}

TEST(Checkpoint, RecursionTwoLoadsIntoRecursionFour) {
    ModelConfig c2 = dt_tiny(3, 4, 8), c4 = c2;
    c4.recursion = 4;
    Model source = build_model(c2, 11);
    const Checkpoint ck = decode_checkpoint(encode_checkpoint(source, TrainState{}));
    Model target = build_model(c4, 12);
    load_parameters(ck, target);
    EXPECT_TRUE(same_parameters(source, target));
    const Dataset d = blobs(4, 4, 8, 11);
    const Tensor logits = infer(target, d.images);
    EXPECT_EQ(logits.shape(), (Shape{4, 4}));
    for (double v : logits.values()) EXPECT_TRUE(std::isfinite(v));
    Model wrong = build_model(dt_tiny(3, 5, 8), 1);
    EXPECT_THROW(load_parameters(ck, wrong), FormatError);
}

TEST(Checkpoint, ContainerLayoutGolden) {
    ModelConfig c;
    c.input_height = c.input_width = 4;
    c.stem_channels = 2;
    c.stages = {{2, 1, 1, std::nullopt}};
    c.reduction = 2;
    c.excitation_floor = 1;
    c.num_classes = 2;
    const Model m = build_model(c, 1);
    TrainState ts;
    ts.rng_state = Rng(1).state();
    ts.stats = ChannelStats{{0.5, 0.25, 0.125}, {1.0, 2.0, 0.5}};
    ts.history.push_back(EpochRecord{1, 0.1, 1.5, 0.5, 1.25, 0.5, 1.0});
    const std::vector<std::uint8_t> bytes = encode_checkpoint(m, ts);
    EXPECT_EQ(std::string(bytes.begin(), bytes.begin() + 8), "DTRVCKPT");
    EXPECT_EQ(bytes[8], kCheckpointVersion);
    const fs::path golden = fs::path(DT_SOURCE_DIR) / "tests/golden/tiny_checkpoint.bin";
    if (const char* update = std::getenv("DT_UPDATE_GOLDEN"); update && std::string(update) == "1") {
        std::ofstream(golden, std::ios::binary)
            .write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
        return;
    }
    EXPECT_EQ(read_file(golden), bytes);
}

TEST(Checkpoint, SaveIsAtomicAndLoadable) {
    const fs::path dir = fs::temp_directory_path() / "dt_test_ckpt";
    fs::remove_all(dir);
    fs::create_directories(dir);
    const Model m = build_model(dt_tiny(3, 4, 8), 13);
    save_checkpoint(dir / "a.ckpt", m, TrainState{});
    EXPECT_TRUE(same_parameters(load_checkpoint(dir / "a.ckpt").model, m));
    std::size_t files = 0;
    for ([[maybe_unused]] const auto& e : fs::directory_iterator(dir)) ++files;
    EXPECT_EQ(files, 1u);
    EXPECT_THROW(load_checkpoint(dir / "missing.ckpt"), IoError);
    fs::remove_all(dir);
}

TEST(Checkpoint, ResumeEquivalence) {
    const Dataset d = blobs(48, 4, 8, 14);
    TrainConfig c = plain(0.05, 0.9, 5e-4);
    c.epochs = 3;
    c.schedule = Schedule::Cosine;
    c.augment = AugmentPolicy::FlipCrop;

    Model straight = build_model(dt_tiny(3, 4, 8), 14);
    OptimState st = make_optim_state(c);
    Rng rng(140);
    for (int e = 0; e < 3; ++e) train_epoch(straight, d, st, rng, 16, c.augment);

    Model first = build_model(dt_tiny(3, 4, 8), 14);
    OptimState st2 = make_optim_state(c);
    Rng rng2(140);
    for (int e = 0; e < 2; ++e) train_epoch(first, d, st2, rng2, 16, c.augment);
    Checkpoint ck = decode_checkpoint(encode_checkpoint(first, state_for(st2, rng2, d)));
    Rng resumed_rng;
    resumed_rng.set_state(ck.state.rng_state);
    train_epoch(ck.model, d, ck.state.optim, resumed_rng, 16, c.augment);

    EXPECT_TRUE(same_parameters(straight, ck.model));
    const auto bs = straight.batchnorms(), br = ck.model.batchnorms();
    for (std::size_t i = 0; i < bs.size(); ++i) EXPECT_TRUE(bit_equal(bs[i]->running_mean, br[i]->running_mean));
}

TEST(MetricsCsv, RowRoundTrip) {
    const EpochRecord r{7, 0.0123456789, 0.5, 0.875, 0.625, 0.8125, 0.96875};
    EXPECT_EQ(metrics_csv_header(), "epoch,lr,train_loss,train_acc,test_loss,test_top1,test_top5");
    EXPECT_EQ(parse_metrics_row(metrics_csv_row(r)), r);
}

}  // namespace
}  // namespace dt
