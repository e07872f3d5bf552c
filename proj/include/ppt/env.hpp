#pragma once

#include <algorithm>
#include <vector>

#include "ppt/rng.hpp"

namespace ppt {

struct Context {
    std::vector<double> x;
};

// Simplex weights over the preference groups; pure group g is the one-hot
// vertex at g.
struct UserProfile {
    std::vector<double> weights;

    static UserProfile pure(int group, int num_groups) {
        check(group >= 0 && group < num_groups, "pure: group out of range");
        UserProfile u;
        u.weights.assign(static_cast<size_t>(num_groups), 0.0);
        u.weights[static_cast<size_t>(group)] = 1.0;
        return u;
    }

    void validate() const {
        double total = 0.0;
        for (double w : weights) {
            check(w >= 0.0, "user profile weights must be >= 0");
            total += w;
        }
        check(std::abs(total - 1.0) <= 1e-9, "user profile weights must sum to 1");
    }

    // argmax over mixture-weighted table values, ties to the lowest index
    int best_action(const std::vector<std::vector<double>>& reward_table) const {
        int best = 0;
        double best_v = -1e300;
        for (size_t a = 0; a < reward_table[0].size(); ++a) {
            double v = 0.0;
            for (size_t g = 0; g < weights.size(); ++g) v += weights[g] * reward_table[g][a];
            if (v > best_v) {
                best_v = v;
                best = static_cast<int>(a);
            }
        }
        return best;
    }
};

// Ground-truth world: linear context encoder f(x) = W x + b into R^4, one
// reward row per group (a contrasting permutation of {1,3,5,7}), and a
// Bradley-Terry annotator with per-annotation Gaussian reward noise.
struct EnvSpec {
    static constexpr int kEncDim = 4;

    int num_groups = 3;
    int num_actions = 4;
    int context_dim = 3;
    std::vector<std::vector<double>> encoder_w;  // kEncDim rows x context_dim
    std::vector<double> encoder_b;               // kEncDim
    std::vector<std::vector<double>> reward_table;  // num_groups x num_actions
    double noise_sigma = 0.01;

    static EnvSpec defaults() {
        EnvSpec s;
        s.encoder_w.assign(kEncDim, std::vector<double>(static_cast<size_t>(s.context_dim), 1.0 / 6.0));
        s.encoder_b.assign(kEncDim, 0.0);
        s.reward_table = {{7, 5, 3, 1}, {1, 7, 5, 3}, {3, 1, 7, 5}};
        return s;
    }

    void validate() const {
        check(num_groups >= 2, "env: num_groups must be >= 2");
        check(num_actions == 4, "env: reward rows are permutations of {1,3,5,7}, so num_actions must be 4");
        check(context_dim >= 1, "env: context_dim must be >= 1");
        check(noise_sigma >= 0.0, "env: noise_sigma must be >= 0");
        check(encoder_w.size() == kEncDim, "env: encoder_w must have 4 rows");
        for (const auto& row : encoder_w)
            check(static_cast<int>(row.size()) == context_dim, "env: encoder_w row size mismatch");
        check(static_cast<int>(encoder_b.size()) == kEncDim, "env: encoder_b must have 4 entries");
        check(static_cast<int>(reward_table.size()) == num_groups, "env: one reward row per group");
        std::vector<int> argmaxes;
        for (const auto& row : reward_table) {
            check(static_cast<int>(row.size()) == num_actions, "env: reward row size mismatch");
            std::vector<double> sorted = row;
            std::sort(sorted.begin(), sorted.end());
            check(sorted == std::vector<double>({1, 3, 5, 7}),
                  "env: each reward row must be a permutation of {1,3,5,7}");
            argmaxes.push_back(static_cast<int>(
                std::max_element(row.begin(), row.end()) - row.begin()));
        }
        for (size_t i = 0; i < reward_table.size(); ++i)
            for (size_t j = i + 1; j < reward_table.size(); ++j) {
                check(reward_table[i] != reward_table[j], "env: reward rows must be distinct");
                check(argmaxes[i] != argmaxes[j], "env: each group's best action must differ");
            }
    }

    std::vector<double> encode(const Context& c) const {
        check(static_cast<int>(c.x.size()) == context_dim, "encode: context dim mismatch");
        std::vector<double> f(kEncDim, 0.0);
        for (int i = 0; i < kEncDim; ++i) {
            double acc = encoder_b[static_cast<size_t>(i)];
            for (int j = 0; j < context_dim; ++j)
                acc += encoder_w[static_cast<size_t>(i)][static_cast<size_t>(j)] * c.x[static_cast<size_t>(j)];
            f[static_cast<size_t>(i)] = acc;
        }
        return f;
    }

    // s(x) = 1^T f(x); all rewards factor through this scalar
    double context_scale(const Context& c) const {
        const auto f = encode(c);
        double s = 0.0;
        for (double v : f) s += v;
        return s;
    }

    // r_z(a, x) = sum_g w_g * f(x)^T theta_g(a) + noise, where theta_g(a) has
    // all components equal to reward_table[g][a]
    double reward(const UserProfile& user, int action, const Context& c, double noise_sample) const {
        check(action >= 0 && action < num_actions, "reward: action out of range");
        check(static_cast<int>(user.weights.size()) == num_groups, "reward: profile size mismatch");
        const auto f = encode(c);
        double total = 0.0;
        for (int g = 0; g < num_groups; ++g) {
            double dot = 0.0;
            for (double fv : f) dot += fv * reward_table[static_cast<size_t>(g)][static_cast<size_t>(action)];
            total += user.weights[static_cast<size_t>(g)] * dot;
        }
        return total + noise_sample;
    }

    // Bradley-Terry probability of preferring a1 over a2, noiseless rewards.
    // The losing side is computed as an exact complement so that
    // preference_prob(a1, a2) + preference_prob(a2, a1) == 1 bit-exactly.
    double preference_prob(const UserProfile& user, int a1, int a2, const Context& c) const {
        check(a1 != a2, "preference_prob: actions must differ");
        double diff = reward(user, a1, c, 0.0) - reward(user, a2, c, 0.0);
        if (diff >= 0.0) return sigmoid(diff);
        return 1.0 - sigmoid(-diff);
    }

    // Draws per-candidate reward noise, then samples the winner from the
    // Bradley-Terry probability on the noisy rewards. Returns (winner, loser).
    std::pair<int, int> sample_preference(Rng& rng, const UserProfile& user, int a1, int a2,
                                          const Context& c) const {
        check(a1 != a2, "sample_preference: actions must differ");
        double r1 = reward(user, a1, c, rng.gaussian(0.0, noise_sigma));
        double r2 = reward(user, a2, c, rng.gaussian(0.0, noise_sigma));
        double p = sigmoid(r1 - r2);
        if (rng.uniform() < p) return {a1, a2};
        return {a2, a1};
    }
};

inline Context sample_context(Rng& rng, int context_dim) {
    Context c;
    c.x.reserve(static_cast<size_t>(context_dim));
    for (int i = 0; i < context_dim; ++i) c.x.push_back(rng.uniform());
    return c;
}

// lambda sampled uniformly from the (K-1)-simplex
inline UserProfile sample_mixed_user(Rng& rng, int num_groups) {
    UserProfile u;
    u.weights = rng.dirichlet_uniform(num_groups);
    return u;
}

}  // namespace ppt
