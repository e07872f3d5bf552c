#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "ppt/env.hpp"

using namespace ppt;

TEST_CASE("default environment shape") {
    const EnvSpec spec = EnvSpec::defaults();
    spec.validate();
    CHECK(spec.num_groups == 3);
    CHECK(spec.num_actions == 4);
    CHECK(spec.context_dim == 3);
    CHECK(spec.noise_sigma == 0.01);
    REQUIRE(spec.reward_table.size() == 3);
    const std::vector<std::vector<double>> want_rows = {
        {7.0, 5.0, 3.0, 1.0}, {1.0, 7.0, 5.0, 3.0}, {3.0, 1.0, 7.0, 5.0}};
    CHECK(spec.reward_table[0] == want_rows[0]);
    CHECK(spec.reward_table[1] == want_rows[1]);
    CHECK(spec.reward_table[2] == want_rows[2]);
}

TEST_CASE("environment validation rejects bad tables") {
    EnvSpec spec = EnvSpec::defaults();
    SECTION("row that is not a permutation of the value set") {
        spec.reward_table[0] = {7.0, 7.0, 3.0, 1.0};
        CHECK_THROWS_AS(spec.validate(), check_error);
    }
    SECTION("duplicate rows") {
        spec.reward_table[1] = spec.reward_table[0];
        CHECK_THROWS_AS(spec.validate(), check_error);
    }
    SECTION("shared argmax") {
        spec.reward_table[1] = {7.0, 1.0, 5.0, 3.0};
        CHECK_THROWS_AS(spec.validate(), check_error);
    }
    SECTION("negative noise") {
        spec.noise_sigma = -0.1;
        CHECK_THROWS_AS(spec.validate(), check_error);
    }
}

TEST_CASE("feature encoder and context scale") {
    const EnvSpec spec = EnvSpec::defaults();
    const Context x{{0.5, 0.5, 0.5}};
    const auto f = spec.encode(x);
    REQUIRE(f.size() == 4);
    for (double v : f) CHECK(v == Catch::Approx(0.25).margin(1e-12));
    CHECK(spec.context_scale(x) == Catch::Approx(1.0).margin(1e-12));
    const Context zero{{0.0, 0.0, 0.0}};
    CHECK(spec.context_scale(zero) == Catch::Approx(0.0).margin(1e-15));
}

TEST_CASE("rewards factor through the encoder") {
    const EnvSpec spec = EnvSpec::defaults();
    const Context x{{0.5, 0.5, 0.5}};
    const UserProfile g0 = UserProfile::pure(0, 3);
    CHECK(spec.reward(g0, 0, x, 0.0) == Catch::Approx(7.0).margin(1e-12));
    CHECK(spec.reward(g0, 3, x, 0.0) == Catch::Approx(1.0).margin(1e-12));
    CHECK(spec.reward(g0, 1, x, 0.5) == Catch::Approx(5.5).margin(1e-12));

    UserProfile mixed;
    mixed.weights = {0.5, 0.5, 0.0};
    CHECK(spec.reward(mixed, 0, x, 0.0) == Catch::Approx(4.0).margin(1e-12));

    Rng r(8);
    for (int trial = 0; trial < 50; ++trial) {
        const Context c = sample_context(r, 3);
        const UserProfile u = sample_mixed_user(r, 3);
        for (int a = 0; a < 4; ++a) {
            double want = 0.0;
            for (int g = 0; g < 3; ++g)
                want += u.weights[static_cast<size_t>(g)] *
                        spec.reward_table[static_cast<size_t>(g)][static_cast<size_t>(a)] *
                        spec.context_scale(c);
            CHECK(spec.reward(u, a, c, 0.0) == Catch::Approx(want).margin(1e-12));
            CHECK(spec.reward(u, a, c, 0.0) >= 0.0);
            CHECK(spec.reward(u, a, c, 0.0) <= 14.0);
        }
    }
}

TEST_CASE("preference probabilities") {
    const EnvSpec spec = EnvSpec::defaults();
    const Context x{{0.5, 0.5, 0.5}};
    const UserProfile g0 = UserProfile::pure(0, 3);
    CHECK(spec.preference_prob(g0, 0, 3, x) == Catch::Approx(0.9975273768433653).margin(1e-12));
    CHECK(spec.preference_prob(g0, 2, 3, x) == Catch::Approx(0.8807970779778823).margin(1e-12));
    CHECK_THROWS_AS(spec.preference_prob(g0, 1, 1, x), check_error);

    Rng r(9);
    for (int trial = 0; trial < 100; ++trial) {
        const Context c = sample_context(r, 3);
        const UserProfile u = sample_mixed_user(r, 3);
        const int a1 = static_cast<int>(r.below(4));
        const int a2 = (a1 + 1 + static_cast<int>(r.below(3))) % 4;
        CHECK(spec.preference_prob(u, a1, a2, c) + spec.preference_prob(u, a2, a1, c) == 1.0);
    }
}

TEST_CASE("preference sampling follows the comparison model") {
    EnvSpec spec = EnvSpec::defaults();
    spec.noise_sigma = 0.0;
    const Context x{{0.5, 0.5, 0.5}};
    const UserProfile g0 = UserProfile::pure(0, 3);
    Rng r(10);
    int wins = 0;
    const int n = 20000;
    for (int i = 0; i < n; ++i) {
        auto [w, l] = spec.sample_preference(r, g0, 2, 3, x);
        CHECK(w != l);
        CHECK(((w == 2 && l == 3) || (w == 3 && l == 2)));
        wins += w == 2 ? 1 : 0;
    }
    CHECK(std::fabs(wins / static_cast<double>(n) - 0.8807970779778823) < 0.01);
}

TEST_CASE("reward noise perturbs comparisons") {
    EnvSpec spec = EnvSpec::defaults();
    spec.noise_sigma = 5.0;
    const Context x{{0.5, 0.5, 0.5}};
    const UserProfile g0 = UserProfile::pure(0, 3);
    Rng r(11);
    int wins = 0;
    const int n = 20000;
    for (int i = 0; i < n; ++i) wins += spec.sample_preference(r, g0, 0, 3, x).first == 0 ? 1 : 0;
    const double rate = wins / static_cast<double>(n);
    CHECK(rate > sigmoid(6.0 / std::sqrt(1.0 + 50.0)));
    CHECK(rate < sigmoid(6.0));
}

TEST_CASE("user profiles") {
    const EnvSpec spec = EnvSpec::defaults();
    for (int g = 0; g < 3; ++g) {
        const UserProfile u = UserProfile::pure(g, 3);
        u.validate();
        CHECK(u.weights[static_cast<size_t>(g)] == 1.0);
        CHECK(u.best_action(spec.reward_table) == std::vector<int>{0, 1, 2}[static_cast<size_t>(g)]);
    }
    UserProfile bad;
    bad.weights = {0.5, 0.2};
    CHECK_THROWS_AS(bad.validate(), check_error);
    bad.weights = {0.5, 0.6, -0.1};
    CHECK_THROWS_AS(bad.validate(), check_error);

    UserProfile tie;
    tie.weights = {0.5, 0.5, 0.0};
    // groups 0 and 1 rank actions (7+1, 5+7, 3+5, 1+3)/2: action 1 wins
    CHECK(tie.best_action(spec.reward_table) == 1);

    Rng r(12);
    for (int i = 0; i < 20; ++i) {
        const UserProfile u = sample_mixed_user(r, 3);
        u.validate();
        double total = 0.0;
        for (double w : u.weights) total += w;
        CHECK(total == Catch::Approx(1.0).margin(1e-12));
    }
}

TEST_CASE("context sampling is uniform on the unit cube") {
    Rng r(13);
    double mean = 0.0;
    const int n = 30000;
    for (int i = 0; i < n; ++i) {
        const Context x = sample_context(r, 3);
        REQUIRE(x.x.size() == 3);
        for (double v : x.x) {
            CHECK(v >= 0.0);
            CHECK(v < 1.0);
            mean += v;
        }
    }
    CHECK(std::fabs(mean / (3 * n) - 0.5) < 0.006);

    const EnvSpec spec = EnvSpec::defaults();
    double s_mean = 0.0;
    Rng r2(14);
    for (int i = 0; i < n; ++i) s_mean += spec.context_scale(sample_context(r2, 3));
    CHECK(std::fabs(s_mean / n - 1.0) < 0.01);
}
