#pragma once

#include <cstddef>
#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <vector>

namespace itl {

using Shape = std::vector<std::size_t>;

std::size_t shape_size(const Shape& shape);
std::string shape_to_string(const Shape& shape);

/// Dense row-major tensor of 64-bit floats.
struct Tensor {
    Shape shape;
    std::vector<double> data;

    Tensor() = default;
    explicit Tensor(Shape s, double fill = 0.0);
    Tensor(Shape s, std::vector<double> values);

    static Tensor zeros_like(const Tensor& other) { return Tensor(other.shape); }

    std::size_t size() const { return data.size(); }
    std::size_t rank() const { return shape.size(); }
    /// Leading (batch) dimension.
    std::size_t rows() const { return shape.empty() ? 0 : shape.front(); }
    /// Number of entries per leading index.
    std::size_t row_size() const { return rows() == 0 ? 0 : data.size() / rows(); }

    double& operator[](std::size_t i) { return data[i]; }
    double operator[](std::size_t i) const { return data[i]; }

    std::span<double> row(std::size_t r) { return {data.data() + r * row_size(), row_size()}; }
    std::span<const double> row(std::size_t r) const { return {data.data() + r * row_size(), row_size()}; }

    bool all_finite() const;

    friend bool operator==(const Tensor&, const Tensor&) = default;
};

/// Gathers rows of a batch-major tensor.
Tensor gather_rows(const Tensor& t, std::span<const std::size_t> rows);

/// Bitwise comparison (distinguishes -0.0 from 0.0 and compares NaN payloads).
bool bit_identical(const Tensor& a, const Tensor& b);

/// Named tensors, iterated in lexicographic name order.
class ParameterSet {
public:
    using Map = std::map<std::string, Tensor>;

    ParameterSet() = default;
    explicit ParameterSet(Map entries) : entries_(std::move(entries)) {}

    Tensor& operator[](const std::string& name) { return entries_[name]; }
    Tensor& at(const std::string& name);
    const Tensor& at(const std::string& name) const;
    bool contains(const std::string& name) const { return entries_.contains(name); }
    void insert(std::string name, Tensor t) { entries_.insert_or_assign(std::move(name), std::move(t)); }
    void erase(const std::string& name) { entries_.erase(name); }

    std::size_t size() const { return entries_.size(); }
    bool empty() const { return entries_.empty(); }
    /// Total number of scalar entries over all tensors.
    std::size_t num_scalars() const;

    auto begin() { return entries_.begin(); }
    auto end() { return entries_.end(); }
    auto begin() const { return entries_.begin(); }
    auto end() const { return entries_.end(); }

    const Map& entries() const { return entries_; }

    std::vector<std::string> names() const;

    ParameterSet zeros_like() const;
    bool all_finite() const;

    friend bool operator==(const ParameterSet&, const ParameterSet&) = default;

private:
    Map entries_;
};

/// Same names and shapes.
bool aligned(const ParameterSet& a, const ParameterSet& b);
/// Throws AlignmentError naming the first mismatch.
void require_aligned(const ParameterSet& a, const ParameterSet& b, const std::string& context);
bool bit_identical(const ParameterSet& a, const ParameterSet& b);

/// out += scale * x (aligned).
void axpy(ParameterSet& out, double scale, const ParameterSet& x);
/// Elementwise a + b.
ParameterSet add(const ParameterSet& a, const ParameterSet& b);
/// Elementwise a - b.
ParameterSet subtract(const ParameterSet& a, const ParameterSet& b);
void scale_in_place(ParameterSet& p, double s);
double max_abs_diff(const ParameterSet& a, const ParameterSet& b);

/// Subset of entries whose names start with `prefix`.
ParameterSet select_prefix(const ParameterSet& p, const std::string& prefix);
/// Union of two disjoint parameter sets.
ParameterSet merge_disjoint(const ParameterSet& a, const ParameterSet& b);

/// 64-bit FNV-1a over names, shapes and raw bytes; cheap trajectory fingerprint.
std::uint64_t fingerprint(const ParameterSet& p);

} // namespace itl
