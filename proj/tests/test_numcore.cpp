#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

#include "ppt/adam.hpp"
#include "ppt/checkpoint.hpp"
#include "ppt/common.hpp"
#include "ppt/gradcheck.hpp"
#include "ppt/rng.hpp"
#include "ppt/tape.hpp"
#include "ppt/tensor.hpp"

using namespace ppt;

namespace {

Tensor random_tensor(Rng& r, std::vector<int64_t> shape, double lo = -1.0, double hi = 1.0) {
    Tensor t(std::move(shape));
    for (double& v : t.data) v = lo + (hi - lo) * r.uniform();
    return t;
}

// scalarize through a fixed random weighting so every output entry gets a
// nondegenerate cotangent
Tape::Ref weighted_sum(Tape& tape, Tape::Ref x, const Tensor& w) {
    return tape.sum_all(tape.mul(x, tape.constant(w)));
}

double run_gradcheck(const ParamStore& params,
                     const std::function<Tape::Ref(Tape&, const ParamRefs&)>& build) {
    auto res = gradcheck(params, build);
    INFO("worst " << res.worst_param << "[" << res.worst_index << "] analytic " << res.analytic
                  << " numeric " << res.numeric);
    return res.max_rel_err;
}

std::filesystem::path test_dir() {
    auto dir = std::filesystem::temp_directory_path() / "ppt-test-numcore";
    std::filesystem::create_directories(dir);
    return dir;
}

}  // namespace

TEST_CASE("string and hash helpers") {
    CHECK(fnv1a64("") == 0xcbf29ce484222325ull);
    CHECK(fnv1a64("a") == 0xaf63dc4c8601ec8cull);
    CHECK(fnv1a64("foobar") == 0x85944171f73967e8ull);
    CHECK(hex64(0) == "0000000000000000");
    CHECK(hex64(0xdeadbeefull) == "00000000deadbeef");
    CHECK(hex64(0xffffffffffffffffull) == "ffffffffffffffff");
    CHECK(cat("a", 1, "b") == "a1b");
}

TEST_CASE("scalar nonlinearities") {
    CHECK(sigmoid(0.0) == 0.5);
    CHECK(sigmoid(2.0) == Catch::Approx(0.8807970779778823).epsilon(1e-15));
    CHECK(sigmoid(6.0) == Catch::Approx(0.9975273768433653).epsilon(1e-15));
    CHECK(sigmoid(-2.0) == Catch::Approx(1.0 - 0.8807970779778823).epsilon(1e-14));
    CHECK(sigmoid(-745.0) > 0.0);
    CHECK(sigmoid(745.0) == 1.0);

    CHECK(softplus(0.0) == Catch::Approx(0.6931471805599453).epsilon(1e-15));
    CHECK(softplus(800.0) == 800.0);
    CHECK(softplus(-800.0) == 0.0);
    CHECK(std::isfinite(softplus(-30.0)));
    CHECK(softplus(-30.0) > 0.0);
}

TEST_CASE("tensor shape and indexing") {
    Tensor t({2, 3}, 0.0);
    t.at(1, 2) = 7.0;
    CHECK(t.data[5] == 7.0);
    CHECK(t.rows() == 2);
    CHECK(t.cols() == 3);
    CHECK(t.numel() == 6);
    Tensor v = Tensor::row({1.0, 2.0});
    CHECK(v.rows() == 1);
    CHECK(v.cols() == 2);
    CHECK_THROWS_AS(Tensor({0}), check_error);
    CHECK_THROWS_AS(Tensor({1, 2, 3}), check_error);
}

TEST_CASE("named tensor stores") {
    NamedTensors s;
    s.add("b", Tensor::scalar(1.0));
    s.add("a", Tensor::scalar(2.0));
    CHECK_THROWS_AS(s.add("a", Tensor::scalar(3.0)), check_error);
    std::vector<std::string> order;
    for (const auto& [name, t] : s) order.push_back(name);
    const std::vector<std::string> insertion_order = {"b", "a"};
    CHECK(order == insertion_order);
    CHECK(s.num_values() == 2);
    CHECK_THROWS_AS(s.at("missing"), check_error);

    ParamStore params;
    params.add("w", Tensor::row({1.0, 2.0}));
    GradStore grads;
    grads.add("w", Tensor::row({1.0}));
    CHECK_THROWS_AS(check_mirrors(grads, params), check_error);
}

TEST_CASE("rng streams are keyed, not stateful") {
    Rng parent(42);
    Rng a = parent.fork("alpha");
    Rng b = parent.fork("beta");
    double a0 = a.uniform();
    (void)b.uniform();

    Rng parent2(42);
    Rng b2 = parent2.fork("beta");
    (void)b2.uniform();
    Rng a2 = parent2.fork("alpha");
    CHECK(a2.uniform() == a0);

    Rng c1 = parent.fork("s", 5);
    Rng c2 = parent.fork("s").fork(5);
    for (int i = 0; i < 8; ++i) CHECK(c1.uniform() == c2.uniform());

    std::set<uint64_t> firsts;
    for (uint64_t i = 0; i < 64; ++i) {
        Rng child = parent.fork(i);
        firsts.insert(child.next_u64());
    }
    CHECK(firsts.size() == 64);
}

TEST_CASE("rng draws") {
    Rng r(7);
    SECTION("uniform range") {
        for (int i = 0; i < 1000; ++i) {
            double u = r.uniform();
            CHECK(u >= 0.0);
            CHECK(u < 1.0);
        }
    }
    SECTION("below") {
        CHECK(r.below(1) == 0);
        std::vector<int> hits(5, 0);
        for (int i = 0; i < 20000; ++i) ++hits[static_cast<size_t>(r.below(5))];
        for (int k = 0; k < 5; ++k)
            CHECK(std::fabs(hits[static_cast<size_t>(k)] / 20000.0 - 0.2) < 0.01);
        CHECK_THROWS_AS(r.below(0), check_error);
    }
    SECTION("gaussian moments") {
        const int n = 40000;
        double sum = 0.0, sq = 0.0;
        for (int i = 0; i < n; ++i) {
            double g = r.gaussian(1.5, 2.0);
            sum += g;
            sq += g * g;
        }
        const double mean = sum / n;
        const double var = sq / n - mean * mean;
        CHECK(std::fabs(mean - 1.5) < 0.04);
        CHECK(std::fabs(std::sqrt(var) - 2.0) < 0.04);
        CHECK(r.gaussian(3.25, 0.0) == 3.25);
        CHECK_THROWS_AS(r.gaussian(0.0, -1.0), check_error);
    }
    SECTION("categorical") {
        std::vector<double> point = {0.0, 0.0, 1.0, 0.0};
        for (int i = 0; i < 32; ++i) CHECK(r.categorical(point) == 2);
        std::vector<double> skew = {0.7, 0.3};
        int zeros = 0;
        const int n = 20000;
        for (int i = 0; i < n; ++i) zeros += r.categorical(skew) == 0 ? 1 : 0;
        CHECK(std::fabs(zeros / static_cast<double>(n) - 0.7) < 0.011);
        CHECK_THROWS_AS(r.categorical(std::vector<double>{0.2, 0.2}), check_error);
        CHECK_THROWS_AS(r.categorical(std::vector<double>{1.2, -0.2}), check_error);
        CHECK_THROWS_AS(r.categorical(std::vector<double>{}), check_error);
    }
    SECTION("dirichlet") {
        std::vector<double> mean(4, 0.0);
        const int n = 8000;
        for (int i = 0; i < n; ++i) {
            auto w = r.dirichlet_uniform(4);
            double total = 0.0;
            for (size_t k = 0; k < w.size(); ++k) {
                CHECK(w[k] > 0.0);
                total += w[k];
                mean[k] += w[k];
            }
            CHECK(total == Catch::Approx(1.0).margin(1e-12));
        }
        for (double m : mean) CHECK(std::fabs(m / n - 0.25) < 0.008);
    }
    SECTION("shuffle conserves and permutes") {
        std::vector<int> v = {1, 2, 3, 4, 5, 6, 7, 8};
        std::vector<int> w = v;
        r.shuffle(w);
        std::vector<int> ws = w;
        std::sort(ws.begin(), ws.end());
        CHECK(ws == v);
    }
}

TEST_CASE("tape computes exact simple gradients") {
    ParamStore p;
    p.add("w", Tensor::scalar(3.0));
    auto [v, g] = value_and_grad(p, [](Tape& t, const ParamRefs& r) {
        return t.sum_all(t.mul(r.at("w"), r.at("w")));
    });
    CHECK(v == Catch::Approx(9.0).margin(1e-12));
    CHECK(g.at("w").data[0] == Catch::Approx(6.0).margin(1e-12));

    auto [v2, g2] = value_and_grad(
        p, [](Tape& t, const ParamRefs&) { return t.constant(Tensor::scalar(4.0)); });
    CHECK(v2 == 4.0);
    CHECK(g2.at("w").data[0] == 0.0);
}

TEST_CASE("tape rejects malformed graphs") {
    ParamStore p;
    p.add("w", Tensor::row({1.0, 2.0}));
    CHECK_THROWS_AS(value_and_grad(p,
                                   [](Tape& t, const ParamRefs& r) {
                                       return t.add(r.at("w"),
                                                    t.constant(Tensor::row({1.0, 2.0, 3.0})));
                                   }),
                    check_error);
    CHECK_THROWS_AS(value_and_grad(p, [](Tape& t, const ParamRefs& r) { return r.at("w"); }),
                    check_error);
    CHECK_THROWS_AS(value_and_grad(p,
                                   [](Tape& t, const ParamRefs& r) {
                                       return t.log(t.constant(Tensor::row({-1.0})));
                                   }),
                    check_error);
}

TEST_CASE("finite differences confirm every op gradient") {
    Rng r(1234);
    const double tol = 1e-5;

    SECTION("elementwise") {
        ParamStore p;
        p.add("a", random_tensor(r, {2, 3}));
        p.add("b", random_tensor(r, {2, 3}, 0.5, 2.0));
        Tensor w = random_tensor(r, {2, 3});
        CHECK(run_gradcheck(p, [&](Tape& t, const ParamRefs& q) {
                  Tape::Ref mixed = t.add(t.mul(q.at("a"), q.at("b")), t.sub(q.at("a"), q.at("b")));
                  Tape::Ref curved =
                      t.add(t.sigmoid(q.at("a")),
                            t.add(t.log(q.at("b")), t.add(t.softplus(q.at("a")), t.gelu(q.at("a")))));
                  return weighted_sum(t, t.add(t.scale(mixed, 0.7), t.neg(curved)), w);
              }) < tol);
    }
    SECTION("matmul and affine") {
        ParamStore p;
        p.add("x", random_tensor(r, {3, 4}));
        p.add("w", random_tensor(r, {4, 2}));
        p.add("b", random_tensor(r, {2}));
        Tensor cot = random_tensor(r, {3, 2});
        CHECK(run_gradcheck(p, [&](Tape& t, const ParamRefs& q) {
                  return weighted_sum(t, t.matmul(q.at("x"), q.at("w")), cot);
              }) < tol);
        CHECK(run_gradcheck(p, [&](Tape& t, const ParamRefs& q) {
                  return weighted_sum(t, t.affine(q.at("x"), q.at("w"), q.at("b")), cot);
              }) < tol);
    }
    SECTION("gather and pick") {
        ParamStore p;
        p.add("src", random_tensor(r, {4, 3}));
        Tensor cot = random_tensor(r, {5, 3});
        CHECK(run_gradcheck(p, [&](Tape& t, const ParamRefs& q) {
                  return weighted_sum(t, t.gather_rows(q.at("src"), {0, 2, 2, 3, 1}), cot);
              }) < tol);
        Tensor cot2 = random_tensor(r, {4, 1});
        CHECK(run_gradcheck(p, [&](Tape& t, const ParamRefs& q) {
                  return weighted_sum(t, t.pick_columns(q.at("src"), {0, 2, 1, 1}), cot2);
              }) < tol);
    }
    SECTION("softmax families") {
        ParamStore p;
        p.add("x", random_tensor(r, {3, 5}, -2.0, 2.0));
        Tensor cot = random_tensor(r, {3, 5});
        CHECK(run_gradcheck(p, [&](Tape& t, const ParamRefs& q) {
                  return weighted_sum(t, t.softmax_rows(q.at("x")), cot);
              }) < tol);
        CHECK(run_gradcheck(p, [&](Tape& t, const ParamRefs& q) {
                  return weighted_sum(t, t.log_softmax_rows(q.at("x")), cot);
              }) < tol);
    }
    SECTION("layer norm") {
        ParamStore p;
        p.add("x", random_tensor(r, {4, 6}));
        p.add("g", random_tensor(r, {6}, 0.5, 1.5));
        p.add("b", random_tensor(r, {6}));
        Tensor cot = random_tensor(r, {4, 6});
        CHECK(run_gradcheck(p, [&](Tape& t, const ParamRefs& q) {
                  return weighted_sum(t, t.layer_norm(q.at("x"), q.at("g"), q.at("b")), cot);
              }) < tol);
    }
    SECTION("segmented causal attention") {
        ParamStore p;
        p.add("q", random_tensor(r, {6, 4}));
        p.add("k", random_tensor(r, {6, 4}));
        p.add("v", random_tensor(r, {6, 4}));
        Tensor cot = random_tensor(r, {6, 4});
        CHECK(run_gradcheck(p, [&](Tape& t, const ParamRefs& q) {
                  return weighted_sum(
                      t, t.causal_attention(q.at("q"), q.at("k"), q.at("v"), 2, {{0, 4}, {4, 2}}),
                      cot);
              }) < tol);
    }
    SECTION("reductions") {
        ParamStore p;
        p.add("x", random_tensor(r, {3, 3}));
        CHECK(run_gradcheck(p, [&](Tape& t, const ParamRefs& q) {
                  return t.mean_all(q.at("x"));
              }) < tol);
        CHECK(run_gradcheck(p, [&](Tape& t, const ParamRefs& q) {
                  return t.sum_all(t.sigmoid(q.at("x")));
              }) < tol);
    }
}

TEST_CASE("adam matches a reference implementation") {
    Rng r(99);
    ParamStore p;
    p.add("w", random_tensor(r, {3, 2}));
    p.add("b", random_tensor(r, {2}));

    std::map<std::string, std::vector<double>> rw, rm, rv;
    for (const auto& [name, t] : p) {
        rw[name] = t.data;
        rm[name] = std::vector<double>(t.data.size(), 0.0);
        rv[name] = std::vector<double>(t.data.size(), 0.0);
    }

    AdamHyper h;
    h.learning_rate = 0.01;
    OptState state = OptState::init(p, h);
    for (int step = 1; step <= 5; ++step) {
        GradStore g;
        Rng gr = r.fork(static_cast<uint64_t>(step));
        for (const auto& [name, t] : p) {
            Tensor gt(t.shape);
            for (double& v : gt.data) v = gr.gaussian(0.0, 1.0);
            g.add(name, gt);
        }
        adam_step(p, g, state);
        for (auto& [name, w] : rw) {
            const auto& gd = g.at(name).data;
            for (size_t i = 0; i < w.size(); ++i) {
                rm[name][i] = 0.9 * rm[name][i] + 0.1 * gd[i];
                rv[name][i] = 0.999 * rv[name][i] + 0.001 * gd[i] * gd[i];
                const double mhat = rm[name][i] / (1.0 - std::pow(0.9, step));
                const double vhat = rv[name][i] / (1.0 - std::pow(0.999, step));
                w[i] -= 0.01 * mhat / (std::sqrt(vhat) + 1e-8);
            }
        }
    }
    for (const auto& [name, t] : p)
        for (size_t i = 0; i < t.data.size(); ++i)
            CHECK(t.data[i] == Catch::Approx(rw[name][i]).margin(1e-14));
}

TEST_CASE("adam first step magnitude") {
    ParamStore p;
    p.add("w", Tensor::scalar(1.0));
    GradStore g;
    g.add("w", Tensor::scalar(1.0));
    AdamHyper h;
    h.learning_rate = 0.1;
    OptState s = OptState::init(p, h);
    adam_step(p, g, s);
    CHECK(p.at("w").data[0] == Catch::Approx(1.0 - 0.1 / (1.0 + 1e-8)).margin(1e-12));

    GradStore z;
    z.add("w", Tensor::scalar(0.0));
    ParamStore p2;
    p2.add("w", Tensor::scalar(5.0));
    OptState s2 = OptState::init(p2);
    adam_step(p2, z, s2);
    CHECK(p2.at("w").data[0] == 5.0);
}

TEST_CASE("checkpoints round-trip bit-exactly") {
    const auto dir = test_dir();
    Rng r(5);
    ParamStore p;
    p.add("w", random_tensor(r, {3, 4}));
    p.add("edge", Tensor::row({-0.0, 1e-300, 1e300, 0.1 + 0.2}));
    nlohmann::json meta = {{"label", "unit"}, {"seed", 3}};

    const auto path = dir / "model.json";
    save_checkpoint(path, p, meta);
    nlohmann::json meta2;
    ParamStore q = load_checkpoint(path, &meta2);
    CHECK(meta2 == meta);
    REQUIRE(q.size() == p.size());
    auto ia = p.begin();
    auto ib = q.begin();
    for (; ia != p.end(); ++ia, ++ib) {
        CHECK(ia->first == ib->first);
        REQUIRE(ia->second.shape == ib->second.shape);
        CHECK(std::memcmp(ia->second.data.data(), ib->second.data.data(),
                          ia->second.data.size() * sizeof(double)) == 0);
    }

    SECTION("repeated saves are byte-identical") {
        std::ifstream m1(path, std::ios::binary), b1(blob_path_for(path), std::ios::binary);
        std::stringstream s1, s2;
        s1 << m1.rdbuf() << b1.rdbuf();
        save_checkpoint(path, q, meta2);
        std::ifstream m2(path, std::ios::binary), b2(blob_path_for(path), std::ios::binary);
        s2 << m2.rdbuf() << b2.rdbuf();
        CHECK(s1.str() == s2.str());
    }
    SECTION("truncated blobs are rejected") {
        std::filesystem::resize_file(blob_path_for(path), 8);
        CHECK_THROWS_AS(load_checkpoint(path), check_error);
    }
    SECTION("missing manifests are rejected") {
        CHECK_THROWS_AS(load_checkpoint(dir / "nope.json"), check_error);
    }
}
