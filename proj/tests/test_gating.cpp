#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <random>

#include "mole/errors.hpp"
#include "mole/gating.hpp"
#include "mole/util.hpp"
#include "oracles.hpp"
#include "tasks.hpp"

using namespace mole;

namespace {

using task::random_batch;
using task::smooth_instance;

GaterConfig small_config(std::size_t k, std::size_t n, std::uint64_t seed) { return task::gater_config(k, n, seed); }

/// Zeroes the output layer so every logit equals its (zero) bias.
void zero_output_layer(GaterModel& m) {
    const auto& last = m.net.shapes().back();
    auto p = m.net.params();
    std::fill(p.begin() + static_cast<std::ptrdiff_t>(last.weight_offset),
              p.begin() + static_cast<std::ptrdiff_t>(last.weight_offset + last.in * last.out), 0.0);
}

}  // namespace

TEST_CASE("init_gater shapes, determinism and zero biases") {
    auto m = init_gater(small_config(4, 4, 3));
    CHECK(m.net.parameter_count() == 4 * 16 + 16 + 16 * 16 + 16 + 16 * 4 + 4);
    CHECK(m.net.parameter_count() == 420);
    CHECK(init_gater(small_config(4, 4, 3)).net.params()[17] == m.net.params()[17]);
    CHECK(std::ranges::equal(init_gater(small_config(4, 4, 3)).net.params(), m.net.params()));
    for (const auto& s : m.net.shapes()) {
        double bound = std::sqrt(6.0 / static_cast<double>(s.in + s.out));
        for (std::size_t i = 0; i < s.in * s.out; ++i) CHECK(std::abs(m.net.params()[s.weight_offset + i]) <= bound);
        for (std::size_t i = 0; i < s.out; ++i) CHECK(m.net.params()[s.bias_offset + i] == 0.0);
    }
    CHECK(std::ranges::all_of(m.moments.first, [](double x) { return x == 0.0; }));
}

TEST_CASE("config validation") {
    auto c = small_config(4, 3, 1);
    c.routing = Routing::top_k(4);
    CHECK_THROWS_AS(c.validate(), DomainError);
    c.routing = Routing::top_k(0);
    CHECK_THROWS_AS(c.validate(), DomainError);
    c = small_config(4, 3, 1);
    c.dropout = 1.0;
    CHECK_THROWS_AS(c.validate(), DomainError);
    c = small_config(4, 3, 1);
    c.batch_size = 0;
    CHECK_THROWS_AS(c.validate(), DomainError);
}

TEST_CASE("routing examples") {
    auto dense = route(std::vector<double>{3, 1, 1, 1}, Routing::dense());
    double z = std::exp(3.0) + 3 * std::exp(1.0);
    CHECK(dense[0] == doctest::Approx(std::exp(3.0) / z).epsilon(1e-12));
    CHECK(dense[1] == doctest::Approx(std::exp(1.0) / z).epsilon(1e-12));
    CHECK(dense[0] == doctest::Approx(0.7112).epsilon(1e-4));

    auto top2 = route(std::vector<double>{3, 1, 0, -1}, Routing::top_k(2));
    CHECK(top2[0] == doctest::Approx(0.8808).epsilon(1e-4));
    CHECK(top2[1] == doctest::Approx(0.1192).epsilon(1e-3));
    CHECK(top2[2] == 0.0);
    CHECK(top2[3] == 0.0);

    auto tie = route(std::vector<double>{1, 2, 2, 2}, Routing::top_k(2));
    CHECK(tie == std::vector<double>{0.0, 0.5, 0.5, 0.0});

    auto huge = route(std::vector<double>{1000, 999}, Routing::dense());
    CHECK(std::isfinite(huge[0]));
    CHECK(huge[0] + huge[1] == doctest::Approx(1.0));
}

TEST_CASE("equal logits give uniform weights") {
    auto m = init_gater(small_config(3, 4, 2));
    zero_output_layer(m);
    auto w = gate_forward(m, std::vector<double>{0.3, -1.0, 2.0}, Routing::dense());
    for (double x : w) CHECK(x == doctest::Approx(0.25).epsilon(1e-15));
    CHECK_THROWS_AS(gate_forward(m, std::vector<double>{1.0}, Routing::dense()), ContractError);
}

TEST_CASE("moe_predict and bce_loss") {
    CHECK(moe_predict(std::vector<double>{1.0}, std::vector<double>{0.0}) == 0.5);
    CHECK(moe_predict(std::vector<double>{0.5, 0.5}, std::vector<double>{2.0, -2.0}) == 0.5);
    CHECK(moe_predict(std::vector<double>{1.0, 0.0}, std::vector<double>{std::log(3.0), 17.0}) ==
          doctest::Approx(0.75).epsilon(1e-15));
    CHECK_THROWS_AS(moe_predict(std::vector<double>{1.0}, std::vector<double>{1.0, 2.0}), ContractError);

    CHECK(bce_loss(std::vector<double>{0.5}, std::vector<int>{1}) == doctest::Approx(std::log(2.0)));
    CHECK(bce_loss(std::vector<double>{1.0, 0.0}, std::vector<int>{1, 0}) < 1e-11);
    CHECK(bce_loss(std::vector<double>{0.9, 0.1}, std::vector<int>{1, 0}) ==
          doctest::Approx(-2 * std::log(0.9)).epsilon(1e-12));
    CHECK(bce_loss(std::vector<double>{0.9, 0.1}, std::vector<int>{1, 0}) == doctest::Approx(0.2107).epsilon(1e-3));
    CHECK(std::isfinite(bce_loss(std::vector<double>{0.0}, std::vector<int>{1})));
}

TEST_CASE("gradients match central differences") {
    std::mt19937_64 rng(99);
    for (int t = 0; t < 10; ++t) {
        auto [m, b] = smooth_instance(rng, 4, 3, 16, Routing::dense());
        CHECK(oracle::max_gradient_error(m, b, Routing::dense()) < 1e-4);
    }
}

TEST_CASE("top-k gradients match central differences away from ties") {
    std::mt19937_64 rng(5);
    for (int t = 0; t < 10; ++t) {
        auto [m, b] = smooth_instance(rng, 3, 4, 8, Routing::top_k(2));
        CHECK(oracle::max_gradient_error(m, b, Routing::top_k(2)) < 1e-4);
    }
}

TEST_CASE("zero-weight network on a balanced batch has equal output-bias gradients") {
    auto m = init_gater(small_config(2, 3, 1));
    std::fill(m.net.params().begin(), m.net.params().end(), 0.0);
    GaterBatch b{Matrix(2, 2, 0.5), Matrix(2, 3, 1.0), {1, 0}};
    auto g = gater_gradients(m, b, Routing::dense());
    const auto& last = m.net.shapes().back();
    CHECK(g.values[last.bias_offset] == doctest::Approx(g.values[last.bias_offset + 1]).epsilon(1e-15));
    CHECK(g.values[last.bias_offset] == doctest::Approx(g.values[last.bias_offset + 2]).epsilon(1e-15));
}

TEST_CASE("duplicating a batch doubles the gradient") {
    std::mt19937_64 rng(3);
    auto m = init_gater(small_config(4, 3, 1));
    auto b = random_batch(rng, 5, 4, 3);
    GaterBatch twice{Matrix(10, 4), Matrix(10, 3), std::vector<int>(10)};
    for (std::size_t r = 0; r < 10; ++r) {
        std::ranges::copy(b.features.row(r % 5), twice.features.row(r).begin());
        std::ranges::copy(b.scores.row(r % 5), twice.scores.row(r).begin());
        twice.labels[r] = b.labels[r % 5];
    }
    auto g1 = gater_gradients(m, b, Routing::dense());
    auto g2 = gater_gradients(m, twice, Routing::dense());
    CHECK(g2.loss == doctest::Approx(2 * g1.loss).epsilon(1e-12));
    for (std::size_t i = 0; i < g1.values.size(); ++i)
        CHECK(g2.values[i] == doctest::Approx(2 * g1.values[i]).epsilon(1e-10));
}

TEST_CASE("adam update") {
    std::vector<double> p{1.0, -2.0};
    AdamMoments mom(2);
    AdamOptions opt{.learning_rate = 0.01};
    adam_update(p, std::vector<double>{0.0, 0.0}, mom, opt, 1);
    CHECK(p == std::vector<double>{1.0, -2.0});

    adam_update(p, std::vector<double>{0.3, -5.0}, mom, opt, 1);
    CHECK(p[0] == doctest::Approx(1.0 - 0.01).epsilon(1e-6));
    CHECK(p[1] == doctest::Approx(-2.0 + 0.01).epsilon(1e-6));

    std::vector<double> q{2.0, 2.0};
    AdamMoments zero(2);
    std::vector<char> mask{1, 0};
    adam_update(q, std::vector<double>{0.0, 0.0}, zero, {.learning_rate = 0.1, .weight_decay = 0.5}, 1, mask);
    CHECK(q[0] == doctest::Approx(2.0 * (1 - 0.1 * 0.5)).epsilon(1e-15));
    CHECK(q[1] == 2.0);

    CHECK_THROWS_AS(adam_update(q, std::vector<double>{NAN, 0.0}, zero, opt, 2), TrainingError);
}

TEST_CASE("adam_step decays weights but not biases") {
    auto m = init_gater(small_config(2, 2, 1));
    m.config.weight_decay = 0.5;
    m.config.learning_rate = 0.1;
    auto before = std::vector<double>(m.net.params().begin(), m.net.params().end());
    GaterGradients zero{std::vector<double>(m.net.parameter_count(), 0.0), 0.0};
    adam_step(m, zero, 1);
    auto mask = m.net.weight_mask();
    for (std::size_t i = 0; i < before.size(); ++i)
        CHECK(m.net.params()[i] == doctest::Approx(mask[i] ? before[i] * 0.95 : before[i]).epsilon(1e-15));
}

TEST_CASE("routing invariants on random instances") {
    std::mt19937_64 rng(17);
    std::normal_distribution<double> d(0.0, 3.0);
    for (int t = 0; t < 200; ++t) {
        std::size_t n = 1 + rng() % 6;
        std::vector<double> logits(n);
        for (auto& x : logits) x = d(rng);
        auto dense = route(logits, Routing::dense());
        auto full = route(logits, Routing::top_k(n));
        for (std::size_t i = 0; i < n; ++i) CHECK(std::abs(dense[i] - full[i]) <= 1e-9);
        std::size_t k = 1 + rng() % n;
        auto sparse = route(logits, Routing::top_k(k));
        CHECK(std::ranges::count_if(sparse, [](double w) { return w != 0.0; }) <= static_cast<long>(k));
        for (const auto* w : {&dense, &sparse}) {
            double s = 0;
            for (double x : *w) {
                CHECK(x >= 0.0);
                s += x;
            }
            CHECK(std::abs(s - 1.0) <= 1e-9);
        }
    }
}

TEST_CASE("single-expert degeneracy and monotone aggregation") {
    std::mt19937_64 rng(8);
    auto m = init_gater(small_config(3, 1, 4));
    for (int t = 0; t < 50; ++t) {
        std::vector<double> h{double(rng() % 7), -1.5, 0.25};
        auto w = gate_forward(m, h, Routing::dense());
        double e = static_cast<double>(static_cast<int>(rng() % 200) - 100) / 10.0;
        CHECK(moe_predict(w, std::vector<double>{e}) == sigmoid(e));
    }
    std::vector<double> w{0.2, 0.0, 0.8};
    std::vector<double> s{0.1, 0.4, -0.3};
    double base = moe_predict(w, s);
    s[0] += 0.5;
    CHECK(moe_predict(w, s) > base);
}

TEST_CASE("training: early stopping, determinism and best snapshot") {
    std::mt19937_64 rng(21);
    auto cfg = small_config(4, 3, 12);
    cfg.max_epochs = 60;
    auto train = random_batch(rng, 300, 4, 3);
    auto val = random_batch(rng, 100, 4, 3);
    auto a = train_gater(init_gater(cfg), train, val);
    auto b = train_gater(init_gater(cfg), train, val);
    CHECK(a.history.train_loss == b.history.train_loss);
    CHECK(a.history.val_loss == b.history.val_loss);
    CHECK(std::ranges::equal(a.net.params(), b.net.params()));

    const auto& h = a.history;
    REQUIRE(h.best_epoch >= 1);
    CHECK(h.val_loss.size() <= std::max<std::size_t>(h.best_epoch + cfg.patience, 1));
    CHECK(h.val_loss.size() <= h.best_epoch + 6);
    double best = *std::ranges::min_element(h.val_loss);
    CHECK(h.val_loss[h.best_epoch - 1] == best);
    CHECK(gater_epoch_loss(a, val, a.config.routing) == doctest::Approx(best).epsilon(1e-12));

    CHECK_THROWS_AS(train_gater(init_gater(cfg), GaterBatch{Matrix(0, 4), Matrix(0, 3), {}}, val), DomainError);
}

TEST_CASE("one decisive expert gives perfect validation accuracy") {
    auto cfg = small_config(2, 1, 3);
    GaterBatch train{Matrix(64, 2), Matrix(64, 1), std::vector<int>(64)};
    for (std::size_t r = 0; r < 64; ++r) {
        train.labels[r] = static_cast<int>(r % 2);
        train.features(r, 0) = static_cast<double>(r % 5);
        train.scores(r, 0) = train.labels[r] ? 5.0 : -5.0;
    }
    auto m = train_gater(init_gater(cfg), train, train);
    auto pred = gater_predict(m, train.features, train.scores);
    for (std::size_t r = 0; r < 64; ++r) CHECK((pred.predictions[r] >= 0.5) == (train.labels[r] == 1));
}

TEST_CASE("trained gating follows the regime-correct expert") {
    auto m = task::train_regime_gater(1);
    auto test = task::regime_batch(1000, 77);
    auto [high, low] = task::regime_weights(m, test);
    CHECK(high > 0.5);
    CHECK(low > 0.5);
}

TEST_CASE("prediction weights form a simplex under both routings") {
    std::mt19937_64 rng(2);
    auto cfg = small_config(4, 3, 5);
    auto b = random_batch(rng, 50, 4, 3);
    auto m = init_gater(cfg);
    for (auto r : {Routing::dense(), Routing::top_k(1), Routing::top_k(2)}) {
        auto p = gater_predict(m, b.features, b.scores, r);
        for (std::size_t i = 0; i < b.size(); ++i) {
            double s = 0;
            for (double w : p.weights.row(i)) s += w;
            CHECK(std::abs(s - 1.0) <= 1e-9);
            CHECK(p.predictions[i] == moe_predict(p.weights.row(i), b.scores.row(i)));
        }
    }
    CHECK(describe(Routing::top_k(2)) == "top2");
    CHECK(describe(Routing::dense()) == "dense");
}
