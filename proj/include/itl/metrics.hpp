#pragma once

#include <cstddef>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace itl {

/// a[center][visit] in percent; NaN marks a cell that was not evaluated
/// (multi-head runs never evaluate a center whose head is untrained).
class AccuracyMatrix {
public:
    AccuracyMatrix() = default;
    AccuracyMatrix(std::size_t centers, std::size_t visits);

    std::size_t centers() const { return centers_; }
    std::size_t visits() const { return visits_; }

    bool has(std::size_t center, std::size_t visit) const;
    double at(std::size_t center, std::size_t visit) const;
    void set(std::size_t center, std::size_t visit, double value);
    /// Appends an all-missing column and returns its index.
    std::size_t add_visit();

    std::vector<double> row(std::size_t center) const;
    const std::vector<double>& values() const { return values_; }

    friend bool operator==(const AccuracyMatrix& a, const AccuracyMatrix& b);

private:
    std::size_t centers_ = 0;
    std::size_t visits_ = 0;
    std::vector<double> values_;  // center-major
};

/// Mean of the final column. Throws if any final cell is missing.
double mean_accuracy(const AccuracyMatrix& m);

/// Fraction of consecutive evaluated pairs with a[i] >= a[i-1]. Requires at
/// least two visits; pairs with a missing cell are skipped.
double monotonicity(const AccuracyMatrix& m);

enum class Significance { YesPlus, YesMinus, No };
std::string to_string(Significance s);

struct WelchResult {
    double t = 0.0;
    double dof = 0.0;
    double p_value = 1.0;
};

/// Two-sided Welch unequal-variance t-test.
WelchResult welch_t_test(std::span<const double> a, std::span<const double> b);

/// YesPlus / YesMinus when p < alpha and the method mean is above / below FT.
Significance significance_vs_ft(std::span<const double> method, std::span<const double> ft, double alpha = 0.05);

struct Summary {
    std::size_t repeats = 0;
    double mean = 0.0;
    double std = 0.0;  ///< sample standard deviation (n - 1)
    double monotonicity = 0.0;
    bool std_undefined = false;  ///< single repeat
};

/// Aggregates per-repeat final accuracies and monotonicities.
Summary aggregate(std::span<const double> accuracies, std::span<const double> monotonicities);

// ---- result tables ---------------------------------------------------------

/// One evaluated cell of one run.
struct CurveRow {
    std::string method;
    std::string scenario;
    std::uint64_t seed = 0;
    std::size_t center = 0;  ///< 1-based
    std::size_t visit_index = 0;  ///< 1-based
    double accuracy = 0.0;
    std::string config_hash;

    friend bool operator==(const CurveRow&, const CurveRow&) = default;
};

struct SummaryRow {
    std::string method;
    std::string scenario;
    Summary summary;
    std::optional<Significance> significance;  ///< empty for FT and baselines
    double p_value = 1.0;
    std::vector<double> samples;  ///< per-repeat a_mean
    std::string config_hash;
};

struct FailureRow {
    std::string method;
    std::string scenario;
    std::uint64_t seed = 0;
    std::string reason;
    std::string config_hash;
};

struct ResultSet {
    std::vector<CurveRow> curves;
    std::vector<SummaryRow> summary;
    std::vector<FailureRow> failures;
};

enum class ResultFormat { Csv, Json };

/// CSV: curves.csv / summary.csv / failures.csv in `dir`; JSON: dir/results.json.
void emit_results(const ResultSet& results, const std::filesystem::path& dir, ResultFormat format);
ResultSet load_results(const std::filesystem::path& dir);

/// RFC 4180 field quoting.
std::string csv_escape(const std::string& field);
/// Splits one RFC 4180 record (no embedded newlines).
std::vector<std::string> csv_split(const std::string& line);

} // namespace itl
