#include <catch2/catch_amalgamated.hpp>

#include "calrank/evalkit.hpp"
#include "calrank/util.hpp"

#include <cstdio>

using namespace calrank;

namespace {

std::vector<RunRecord> make_run(const std::string& qid, const std::vector<std::string>& docs) {
    std::vector<RunRecord> run;
    for (std::size_t i = 0; i < docs.size(); ++i)
        run.push_back({qid, docs[i], static_cast<int>(i) + 1, 100.0 - static_cast<double>(i), "t"});
    return run;
}

} // namespace

TEST_CASE("ndcg_at_k hand-checked values") {
    std::vector<QrelRecord> qrels{{"q1", "a", 3}, {"q1", "b", 2}, {"q1", "c", 1}, {"q1", "d", 0}};

    SECTION("ideal order scores 1") {
        CHECK(ndcg_at_k(make_run("q1", {"a", "b", "c", "d"}), qrels, 10) == Catch::Approx(1.0).epsilon(1e-12));
    }
    SECTION("nothing relevant in the top k scores 0") {
        std::vector<QrelRecord> one{{"q1", "a", 1}};
        CHECK(ndcg_at_k(make_run("q1", {"x", "y", "z"}), one, 10) == 0.0);
    }
    SECTION("single relevant document at rank 2") {
        std::vector<QrelRecord> one{{"q1", "a", 1}};
        double got = ndcg_at_k(make_run("q1", {"x", "a", "y"}), one, 10);
        CHECK(got == Catch::Approx(1.0 / std::log2(3.0)).epsilon(1e-12));
        CHECK(got == Catch::Approx(0.6309).margin(5e-5));
    }
    SECTION("no positive judgments defines 0") {
        std::vector<QrelRecord> zeros{{"q1", "a", 0}, {"q1", "b", 0}};
        CHECK(ndcg_at_k(make_run("q1", {"a", "b"}), zeros, 10) == 0.0);
    }
    SECTION("rank gaps are rejected") {
        auto run = make_run("q1", {"a", "b"});
        run[1].rank = 3;
        CHECK_THROWS_WITH(ndcg_at_k(run, qrels, 10), Catch::Matchers::ContainsSubstring("rank gap"));
    }
    SECTION("score scale does not matter, order does") {
        auto run = make_run("q1", {"b", "a", "c", "d"});
        double base = ndcg_at_k(run, qrels, 10);
        for (auto& r : run) r.score *= 1e6;
        CHECK(ndcg_at_k(run, qrels, 10) == base);
        CHECK(base < 1.0);
    }
    SECTION("equals 1 iff the top-k order is relevance-sorted") {
        Rng rng(3);
        std::vector<std::string> docs{"a", "b", "c", "d"};
        for (int trial = 0; trial < 20; ++trial) {
            rng.shuffle(docs);
            auto run = make_run("q1", docs);
            double v = ndcg_at_k(run, qrels, 4);
            std::unordered_map<std::string, int> rel{{"a", 3}, {"b", 2}, {"c", 1}, {"d", 0}};
            bool sorted = true;
            for (std::size_t i = 1; i < docs.size(); ++i)
                if (rel[docs[i - 1]] < rel[docs[i]]) sorted = false;
            CHECK((v == Catch::Approx(1.0).epsilon(1e-12)) == sorted);
        }
    }
}

TEST_CASE("kendall_tau hand-checked values") {
    std::vector<std::string> a{"1", "2", "3", "4"};
    CHECK(kendall_tau(a, a) == 1.0);
    CHECK(kendall_tau(a, {"4", "3", "2", "1"}) == -1.0);
    CHECK(kendall_tau(a, {"2", "1", "3", "4"}) == Catch::Approx(4.0 / 6.0).epsilon(1e-12));
    CHECK_THROWS_AS(kendall_tau(a, {"1", "2", "3", "5"}), std::invalid_argument);
    CHECK_THROWS_AS(kendall_tau({"1"}, {"1"}), std::invalid_argument);

    Rng rng(5);
    for (int trial = 0; trial < 20; ++trial) {
        std::vector<std::string> ids;
        int n = static_cast<int>(2 + rng.below(10));
        for (int i = 0; i < n; ++i) ids.push_back("d" + std::to_string(i));
        rng.shuffle(ids);
        auto rev = ids;
        std::reverse(rev.begin(), rev.end());
        CHECK(kendall_tau(ids, ids) == 1.0);
        CHECK(kendall_tau(ids, rev) == -1.0);
    }
}

TEST_CASE("run and qrels file round trips") {
    const std::string run_path = "test_run.txt";
    const std::string qrels_path = "test_qrels.txt";

    SECTION("write then read run records") {
        std::vector<RunRecord> records{
            {"q1", "d1", 1, 1.0 / 3.0, "calrank"},
            {"q1", "d2", 2, 0.1, "calrank"},
            {"q2", "d7", 1, -2.75, "calrank"},
        };
        write_run(run_path, records);
        auto got = read_run(run_path);
        REQUIRE(got.size() == 3);
        for (std::size_t i = 0; i < 3; ++i) {
            CHECK(got[i].qid == records[i].qid);
            CHECK(got[i].docid == records[i].docid);
            CHECK(got[i].rank == records[i].rank);
            CHECK(got[i].score == records[i].score); // bit-exact through %.17g
            CHECK(got[i].tag == records[i].tag);
        }
        std::remove(run_path.c_str());
    }
    SECTION("run line format") {
        std::ofstream(run_path) << "q1 Q0 d42 1 12.5 scalr\n";
        auto got = read_run(run_path);
        REQUIRE(got.size() == 1);
        CHECK(got[0].qid == "q1");
        CHECK(got[0].docid == "d42");
        CHECK(got[0].rank == 1);
        CHECK(got[0].score == 12.5);
        CHECK(got[0].tag == "scalr");
        std::remove(run_path.c_str());
    }
    SECTION("run parse errors carry line numbers") {
        std::ofstream(run_path) << "q1 Q0 d1 1 5.0 tag\nq1 Q0 d2 oops 4.0 tag\n";
        CHECK_THROWS_WITH(read_run(run_path), Catch::Matchers::ContainsSubstring("line 2"));
        std::ofstream(run_path) << "q1 Q0 d1 1 5.0 tag\nq1 Q0 d2 3 4.0 tag\n";
        CHECK_THROWS_WITH(read_run(run_path), Catch::Matchers::ContainsSubstring("rank gap"));
        std::ofstream(run_path) << "q1 Q0 d1 1 5.0 tag\nq1 Q0 d2 2 6.0 tag\n";
        CHECK_THROWS_WITH(read_run(run_path), Catch::Matchers::ContainsSubstring("scores increase"));
        std::remove(run_path.c_str());
    }
    SECTION("qrels round trip and validation") {
        std::vector<QrelRecord> qrels{{"q1", "a", 2}, {"q1", "b", 0}, {"q2", "a", 1}};
        write_qrels(qrels_path, qrels);
        auto got = read_qrels(qrels_path);
        REQUIRE(got.size() == 3);
        CHECK(got[0].qid == "q1");
        CHECK(got[0].docid == "a");
        CHECK(got[0].relevance == 2);

        std::ofstream(qrels_path) << "q1 0 a 1\nq1 0 b -2\n";
        CHECK_THROWS_WITH(read_qrels(qrels_path), Catch::Matchers::ContainsSubstring("line 2"));
        std::ofstream(qrels_path) << "q1 0 a 1\nq1 0 a 2\n";
        CHECK_THROWS_WITH(read_qrels(qrels_path), Catch::Matchers::ContainsSubstring("duplicate"));
        std::remove(qrels_path.c_str());
    }
}

TEST_CASE("mean_ndcg groups by query") {
    std::vector<QrelRecord> qrels{{"q1", "a", 1}, {"q2", "b", 1}};
    std::vector<RunRecord> run;
    auto r1 = make_run("q1", {"a", "x"});
    auto r2 = make_run("q2", {"x", "b"});
    run.insert(run.end(), r1.begin(), r1.end());
    run.insert(run.end(), r2.begin(), r2.end());
    double want = (1.0 + 1.0 / std::log2(3.0)) / 2.0;
    CHECK(mean_ndcg_at_k(run, qrels, 10) == Catch::Approx(want).epsilon(1e-12));
}
