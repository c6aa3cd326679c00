#include <catch2/catch_amalgamated.hpp>

#include "calrank/model.hpp"
#include "calrank/util.hpp"

#include <cstdio>
#include <cstring>
#include <fstream>

using namespace calrank;

namespace {

ModelConfig small_config() {
    ModelConfig c;
    c.d_model = 16;
    c.n_layers = 2;
    c.n_heads = 2;
    c.d_ff = 32;
    c.vocab_size = 128;
    c.max_position = 128;
    c.seed = 7;
    return c;
}

LayoutConfig small_layout_config(int m) {
    LayoutConfig c;
    c.num_slots = m;
    c.max_candidate_tokens = 8;
    c.doc_end_id = 1;
    for (int k = 0; k < m; ++k) c.identifier_ids.push_back(2 + k);
    c.instruction_template = {30, 31};
    return c;
}

TokenizedExample random_example(Rng& rng, int m, int lo = 2, int hi = 6) {
    TokenizedExample e;
    for (int i = 0; i < 3; ++i) e.query_tokens.push_back(static_cast<TokenId>(40 + rng.below(80)));
    for (int k = 0; k < m; ++k) {
        std::vector<TokenId> c;
        auto l = rng.range(lo, hi);
        for (int i = 0; i < l; ++i) c.push_back(static_cast<TokenId>(40 + rng.below(80)));
        e.candidate_tokens.push_back(std::move(c));
    }
    return e;
}

bool params_equal(Parameters& a, Parameters& b) {
    bool equal = true;
    std::vector<std::pair<std::string, std::vector<double>>> av, bv;
    a.for_each([&av](const std::string& n, Tensor& t) { av.emplace_back(n, t.values()); });
    b.for_each([&bv](const std::string& n, Tensor& t) { bv.emplace_back(n, t.values()); });
    if (av.size() != bv.size()) return false;
    for (std::size_t i = 0; i < av.size(); ++i) {
        if (av[i].first != bv[i].first) return false;
        if (av[i].second.size() != bv[i].second.size()) return false;
        if (std::memcmp(av[i].second.data(), bv[i].second.data(),
                        av[i].second.size() * sizeof(double)) != 0)
            equal = false;
    }
    return equal;
}

} // namespace

TEST_CASE("init_params determinism and validation") {
    auto cfg = small_config();
    auto a = init_params(cfg);
    auto b = init_params(cfg);
    CHECK(params_equal(a, b));

    ModelConfig other = cfg;
    other.seed = 8;
    auto c = init_params(other);
    CHECK_FALSE(params_equal(a, c));

    ModelConfig bad = cfg;
    bad.d_model = 31;
    bad.n_heads = 2;
    CHECK_THROWS_AS(init_params(bad), std::invalid_argument);
}

TEST_CASE("parameter count matches the closed form") {
    for (auto scheme : {PositionScheme::Rotary, PositionScheme::LearnedAbsolute}) {
        auto cfg = small_config();
        cfg.position_scheme = scheme;
        auto p = init_params(cfg);
        CHECK(p.parameter_count() == expected_parameter_count(cfg));
    }
    ModelConfig desk; // desk-scale defaults
    auto p = init_params(desk);
    CHECK(p.parameter_count() == expected_parameter_count(desk));
}

TEST_CASE("forward emits M finite scores per view") {
    Rng rng(3);
    auto params = init_params(small_config());
    auto layout = build_layout(random_example(rng, 5), small_layout_config(5));
    REQUIRE(validate_layout(layout).empty());
    auto bundle = forward(params, layout);
    REQUIRE(bundle.ls.numel() == 5);
    REQUIRE(bundle.ps.numel() == 5);
    for (double v : bundle.ls.values()) CHECK(std::isfinite(v));
    for (double v : bundle.ps.values()) CHECK(std::isfinite(v));
}

TEST_CASE("layout longer than max_position is rejected") {
    Rng rng(4);
    auto cfg = small_config();
    cfg.max_position = 16;
    auto params = init_params(cfg);
    auto layout = build_layout(random_example(rng, 4, 4, 6), small_layout_config(4));
    CHECK_THROWS_WITH(forward(params, layout), Catch::Matchers::ContainsSubstring("max_position"));
}

TEST_CASE("point-view locality and candidate swaps") {
    Rng rng(5);
    auto params = init_params(small_config());
    auto lcfg = small_layout_config(4);
    auto e = random_example(rng, 4);
    auto base = forward(params, build_layout(e, lcfg));

    SECTION("swapping candidates 2 and 3 permutes ps and leaves ps_1 fixed") {
        auto swapped = e;
        std::swap(swapped.candidate_tokens[1], swapped.candidate_tokens[2]);
        auto got = forward(params, build_layout(swapped, lcfg));
        CHECK(std::abs(got.ps.values()[0] - base.ps.values()[0]) < 1e-6);
        CHECK(std::abs(got.ps.values()[3] - base.ps.values()[3]) < 1e-6);
        CHECK(std::abs(got.ps.values()[1] - base.ps.values()[2]) < 1e-6);
        CHECK(std::abs(got.ps.values()[2] - base.ps.values()[1]) < 1e-6);
    }
    SECTION("replacing one candidate leaves every other score unchanged") {
        for (int replaced : {0, 2}) {
            auto mod = e;
            mod.candidate_tokens[static_cast<std::size_t>(replaced)] = {99, 98, 97};
            auto got = forward(params, build_layout(mod, lcfg));
            for (int k = 0; k < 4; ++k) {
                if (k == replaced) continue;
                CHECK(std::abs(got.ps.values()[static_cast<std::size_t>(k)] -
                               base.ps.values()[static_cast<std::size_t>(k)]) < 1e-9);
                CHECK(std::abs(got.ls.values()[static_cast<std::size_t>(k)] -
                               base.ls.values()[static_cast<std::size_t>(k)]) < 1e-9);
            }
            CHECK(std::abs(got.ps.values()[static_cast<std::size_t>(replaced)] -
                           base.ps.values()[static_cast<std::size_t>(replaced)]) > 1e-9);
        }
    }
    SECTION("changing the prefix changes scores") {
        auto mod = e;
        mod.query_tokens[0] = static_cast<TokenId>(mod.query_tokens[0] == 40 ? 41 : 40);
        auto got = forward(params, build_layout(mod, lcfg));
        CHECK(std::abs(got.ps.values()[0] - base.ps.values()[0]) > 1e-9);
    }
}

TEST_CASE("permutation equivariance under both position schemes") {
    Rng rng(6);
    for (auto scheme : {PositionScheme::Rotary, PositionScheme::LearnedAbsolute}) {
        auto mcfg = small_config();
        mcfg.position_scheme = scheme;
        auto params = init_params(mcfg);
        auto lcfg = small_layout_config(5);
        auto e = random_example(rng, 5);
        auto base = forward(params, build_layout(e, lcfg));

        std::vector<std::size_t> perm{3, 0, 4, 1, 2};
        TokenizedExample permuted;
        permuted.query_tokens = e.query_tokens;
        for (auto s : perm) permuted.candidate_tokens.push_back(e.candidate_tokens[s]);
        auto got = forward(params, build_layout(permuted, lcfg));
        for (std::size_t k = 0; k < perm.size(); ++k) {
            INFO(to_string(scheme) << " slot " << k);
            CHECK(std::abs(got.ls.values()[k] - base.ls.values()[perm[k]]) < 1e-6);
            CHECK(std::abs(got.ps.values()[k] - base.ps.values()[perm[k]]) < 1e-6);
        }
    }
}

TEST_CASE("gradient flow respects the mask") {
    Rng rng(8);
    auto params = init_params(small_config());
    auto lcfg = small_layout_config(3);
    // give each candidate a private token so embedding-row gradients are attributable
    TokenizedExample e;
    e.query_tokens = {50, 51};
    e.candidate_tokens = {{60, 61}, {70, 71}, {80, 81}};
    auto layout = build_layout(e, lcfg);

    auto grad_for = [&](bool list_view, int slot) {
        params.token_embedding.zero_grad();
        auto bundle = forward(params, layout);
        auto target = list_view ? bundle.ls : bundle.ps;
        std::vector<double> onehot(3, 0.0);
        onehot[static_cast<std::size_t>(slot)] = 1.0;
        sum_all(mul(target, Tensor::vec(std::move(onehot)))).backward();
        return params.token_embedding.grad();
    };
    auto row_norm = [&](const std::vector<double>& g, TokenId row) {
        double s = 0.0;
        for (int j = 0; j < 16; ++j) s += std::abs(g[static_cast<std::size_t>(row) * 16 + static_cast<std::size_t>(j)]);
        return s;
    };

    auto g_ps1 = grad_for(false, 0);
    CHECK(row_norm(g_ps1, 60) > 0.0);  // own candidate reaches ps_1
    CHECK(row_norm(g_ps1, 70) == 0.0); // other candidates cannot
    CHECK(row_norm(g_ps1, 80) == 0.0);
    CHECK(row_norm(g_ps1, 50) > 0.0);  // prefix reaches everything

    auto g_ls2 = grad_for(true, 1);
    CHECK(row_norm(g_ls2, 70) > 0.0);  // ls_2 sees its own candidate
    CHECK(row_norm(g_ls2, 60) == 0.0); // and no foreign block
    CHECK(row_norm(g_ls2, 80) == 0.0);
}

TEST_CASE("forward_batch equals the per-item loop") {
    Rng rng(9);
    auto params = init_params(small_config());
    auto lcfg = small_layout_config(3);

    std::vector<SequenceLayout> layouts;
    for (int i = 0; i < 4; ++i) layouts.push_back(build_layout(random_example(rng, 3), lcfg));

    auto batch = forward_batch(params, layouts, {}, 2);
    REQUIRE(batch.size() == 4);
    for (std::size_t i = 0; i < layouts.size(); ++i) {
        auto single = forward(params, layouts[i]);
        for (int k = 0; k < 3; ++k) {
            CHECK(std::abs(batch[i].ls.values()[static_cast<std::size_t>(k)] -
                           single.ls.values()[static_cast<std::size_t>(k)]) < 1e-9);
            CHECK(std::abs(batch[i].ps.values()[static_cast<std::size_t>(k)] -
                           single.ps.values()[static_cast<std::size_t>(k)]) < 1e-9);
        }
    }

    // eight identical layouts produce eight identical bundles
    std::vector<SequenceLayout> same(8, layouts[0]);
    auto bundles = forward_batch(params, same, {}, 2);
    for (const auto& b : bundles) {
        CHECK(b.ls.values() == bundles[0].ls.values());
        CHECK(b.ps.values() == bundles[0].ps.values());
    }

    // per-layout errors carry the index
    auto bad = layouts;
    bad[2].permit.assign(bad[2].size() * bad[2].size(), 0);
    CHECK_THROWS_WITH(forward_batch(params, bad, {}, 2), Catch::Matchers::ContainsSubstring("layout 2"));
}

TEST_CASE("dropout is train-only and seeded") {
    Rng rng(10);
    auto cfg = small_config();
    cfg.dropout = 0.2;
    auto params = init_params(cfg);
    auto layout = build_layout(random_example(rng, 3), small_layout_config(3));

    auto eval1 = forward(params, layout);
    auto eval2 = forward(params, layout);
    CHECK(eval1.ls.values() == eval2.ls.values()); // dropout off outside training

    ForwardOptions train{true, 123};
    auto t1 = forward(params, layout, train);
    auto t2 = forward(params, layout, train);
    CHECK(t1.ls.values() == t2.ls.values());       // same seed, same mask
    ForwardOptions other{true, 124};
    auto t3 = forward(params, layout, other);
    CHECK(t1.ls.values() != t3.ls.values());
}

TEST_CASE("checkpoint round trip is bit-exact") {
    auto cfg = small_config();
    auto params = init_params(cfg);
    auto lcfg = small_layout_config(4);
    const std::string path = "test_checkpoint.json";

    save_checkpoint(params, lcfg, path);
    auto loaded = load_checkpoint<double>(path);
    CHECK(params_equal(params, loaded.params));
    CHECK(loaded.layout_config.num_slots == 4);
    CHECK(loaded.layout_config.identifier_ids == lcfg.identifier_ids);
    CHECK(loaded.params.config.d_model == cfg.d_model);

    const std::string path2 = "test_checkpoint2.json";
    save_checkpoint(loaded.params, loaded.layout_config, path2);
    std::ifstream f1(path, std::ios::binary), f2(path2, std::ios::binary);
    std::string s1((std::istreambuf_iterator<char>(f1)), std::istreambuf_iterator<char>());
    std::string s2((std::istreambuf_iterator<char>(f2)), std::istreambuf_iterator<char>());
    CHECK(s1 == s2);
    std::remove(path.c_str());
    std::remove(path2.c_str());
}
