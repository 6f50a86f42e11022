#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "itl/error.hpp"
#include "itl/metrics.hpp"
#include "support.hpp"

using namespace itl;
namespace fs = std::filesystem;

namespace {

AccuracyMatrix from_rows(const std::vector<std::vector<double>>& rows) {
    AccuracyMatrix m(rows.size(), rows.front().size());
    for (std::size_t c = 0; c < rows.size(); ++c)
        for (std::size_t v = 0; v < rows[c].size(); ++v) m.set(c, v, rows[c][v]);
    return m;
}

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

} // namespace

TEST_CASE("accuracy and monotonicity match brute-force loops") {
    Rng rng(12);
    std::uniform_int_distribution<std::size_t> dim(2, 12);
    std::uniform_int_distribution<int> level(0, 20);  // coarse values produce ties
    for (int trial = 0; trial < 100; ++trial) {
        const std::size_t n = dim(rng), total = dim(rng);
        std::vector<std::vector<double>> a(n, std::vector<double>(total));
        for (auto& row : a)
            for (auto& x : row) x = level(rng) * 5.0;
        const AccuracyMatrix m = from_rows(a);
        double acc = 0;
        for (std::size_t mu = 0; mu < n; ++mu) acc += a[mu][total - 1];
        acc /= static_cast<double>(n);
        double mono = 0;
        for (std::size_t mu = 0; mu < n; ++mu)
            for (std::size_t i = 1; i < total; ++i) mono += a[mu][i] >= a[mu][i - 1] ? 1.0 : 0.0;
        mono /= static_cast<double>(n * (total - 1));
        CHECK(std::abs(mean_accuracy(m) - acc) <= 1e-12);
        CHECK(std::abs(monotonicity(m) - mono) <= 1e-12);
    }
}

TEST_CASE("monotonicity of the canonical sequences") {
    CHECK(monotonicity(from_rows({{1, 2, 3}})) == 1.0);
    CHECK(monotonicity(from_rows({{3, 2, 1}})) == 0.0);
    CHECK(monotonicity(from_rows({{1, 2, 1}})) == 0.5);
    CHECK(monotonicity(from_rows({{2, 2, 2}})) == 1.0);
}

TEST_CASE("missing cells are skipped and a missing final cell is an error") {
    AccuracyMatrix m(2, 3);
    m.set(0, 0, 10);
    m.set(0, 1, 20);
    m.set(0, 2, 15);
    m.set(1, 1, 30);
    m.set(1, 2, 40);
    CHECK(monotonicity(m) == doctest::Approx(2.0 / 3.0));
    CHECK(mean_accuracy(m) == 27.5);
    m = AccuracyMatrix(2, 2);
    m.set(0, 1, 1.0);
    CHECK_THROWS_AS(mean_accuracy(m), DataError);
    CHECK_THROWS_AS(monotonicity(AccuracyMatrix(2, 1)), DataError);
}

TEST_CASE("welch test matches reference values") {
    const std::vector<double> a{1.0, 2.0, 3.5, 4.0, 2.2}, b{2.5, 3.1, 4.4, 5.0, 3.9, 4.8};
    const WelchResult r = welch_t_test(a, b);
    CHECK(r.t == doctest::Approx(-2.0939311178453237).epsilon(1e-12));
    CHECK(r.dof == doctest::Approx(7.759833114715998).epsilon(1e-12));
    CHECK(r.p_value == doctest::Approx(0.07066073035653485).epsilon(1e-10));
    const std::vector<double> c{10, 11, 12}, d{10.5, 10.6, 10.7, 10.4};
    CHECK(welch_t_test(c, d).p_value == doctest::Approx(0.5178934519774564).epsilon(1e-10));
    const std::vector<double> one{1.0};
    CHECK_THROWS_AS(welch_t_test(one, a), DataError);
}

TEST_CASE("significance labels follow the direction of the difference") {
    const std::vector<double> ft{50, 51, 49, 50.5, 49.5};
    const std::vector<double> better{60, 61, 59, 60.5, 59.5};
    const std::vector<double> worse{40, 41, 39, 40.5, 39.5};
    const std::vector<double> same{50.2, 50.8, 49.2, 50.1, 49.9};
    CHECK(significance_vs_ft(better, ft) == Significance::YesPlus);
    CHECK(significance_vs_ft(worse, ft) == Significance::YesMinus);
    CHECK(significance_vs_ft(same, ft) == Significance::No);
    CHECK(significance_vs_ft(ft, ft) == Significance::No);
    CHECK(to_string(Significance::YesPlus) == "Yes+");
}

TEST_CASE("aggregation uses the sample standard deviation") {
    const std::vector<double> acc{1, 2, 3, 4}, mono{0.5, 1.0, 0.0, 0.5};
    const Summary s = aggregate(acc, mono);
    CHECK(s.mean == 2.5);
    CHECK(s.std == doctest::Approx(std::sqrt(5.0 / 3.0)).epsilon(1e-14));
    CHECK(s.monotonicity == 0.5);
    const std::vector<double> single{7};
    CHECK(aggregate(single, {}).std_undefined);
}

TEST_CASE("csv quoting round-trips") {
    for (const std::string s : {"plain", "a,b", "say \"hi\"", "", " spaced "}) {
        const auto fields = csv_split(csv_escape(s) + "," + csv_escape("x"));
        REQUIRE(fields.size() == 2);
        CHECK(fields[0] == s);
    }
    CHECK(csv_escape("a,b") == "\"a,b\"");
}

TEST_CASE("result tables round-trip in both formats") {
    ResultSet r;
    r.curves.push_back({"ft", "noisy, c5", 3, 1, 2, 81.25, "abc"});
    r.curves.push_back({"lwf", "iid", 4, 2, 1, 1.0 / 3.0, "abc"});
    SummaryRow s;
    s.method = "lwf";
    s.scenario = "noisy, c5";
    s.summary = {2, 80.5, 0.1, 0.75, false};
    s.significance = Significance::YesPlus;
    s.p_value = 0.01;
    s.config_hash = "abc";
    r.summary.push_back(s);
    SummaryRow joint = s;
    joint.method = "joint";
    joint.significance.reset();
    joint.summary.monotonicity = std::nan("");
    joint.p_value = std::nan("");
    r.summary.push_back(joint);
    r.failures.push_back({"ewc", "iid", 5, "non-finite gradient \"x\"", "abc"});

    for (auto format : {ResultFormat::Csv, ResultFormat::Json}) {
        const fs::path dir = fs::temp_directory_path() / (format == ResultFormat::Csv ? "itl_res_csv" : "itl_res_json");
        fs::remove_all(dir);
        emit_results(r, dir, format);
        const ResultSet back = load_results(dir);
        CHECK(back.curves == r.curves);
        REQUIRE(back.summary.size() == 2);
        CHECK(back.summary[0].summary.mean == 80.5);
        CHECK(back.summary[0].significance == Significance::YesPlus);
        CHECK(back.summary[0].scenario == "noisy, c5");
        CHECK(std::isnan(back.summary[1].summary.monotonicity));
        CHECK_FALSE(back.summary[1].significance.has_value());
        REQUIRE(back.failures.size() == 1);
        CHECK(back.failures[0].reason == r.failures[0].reason);
    }
    const fs::path dir = fs::temp_directory_path() / "itl_res_csv";
    CHECK(slurp(dir / "summary.csv").find("\r\n") != std::string::npos);
    CHECK(slurp(dir / "summary.csv").find("n.a.") != std::string::npos);
}

TEST_CASE("loading a directory without results fails") {
    const fs::path dir = fs::temp_directory_path() / "itl_res_empty";
    fs::remove_all(dir);
    fs::create_directories(dir);
    CHECK_THROWS_AS(load_results(dir), DataError);
}
