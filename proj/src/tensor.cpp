#include "itl/tensor.hpp"

#include <cmath>
#include <cstdint>
#include <cstring>
#include <sstream>

#include "itl/error.hpp"

namespace itl {

std::size_t shape_size(const Shape& shape) {
    std::size_t n = 1;
    for (auto d : shape) n *= d;
    return n;
}

std::string shape_to_string(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) os << ',';
        os << shape[i];
    }
    os << ']';
    return os.str();
}

Tensor::Tensor(Shape s, double fill) : shape(std::move(s)), data(shape_size(shape), fill) {}

Tensor::Tensor(Shape s, std::vector<double> values) : shape(std::move(s)), data(std::move(values)) {
    if (shape_size(shape) != data.size()) {
        throw AlignmentError("tensor shape " + shape_to_string(shape) + " does not match " +
                             std::to_string(data.size()) + " values");
    }
}

bool Tensor::all_finite() const {
    for (double x : data) {
        if (!std::isfinite(x)) return false;
    }
    return true;
}

Tensor gather_rows(const Tensor& t, std::span<const std::size_t> rows) {
    Shape shape = t.shape;
    shape[0] = rows.size();
    Tensor out(shape);
    const std::size_t width = t.row_size();
    for (std::size_t i = 0; i < rows.size(); ++i) {
        auto src = t.row(rows[i]);
        std::copy(src.begin(), src.end(), out.data.begin() + static_cast<std::ptrdiff_t>(i * width));
    }
    return out;
}

bool bit_identical(const Tensor& a, const Tensor& b) {
    return a.shape == b.shape && a.data.size() == b.data.size() &&
           (a.data.empty() || std::memcmp(a.data.data(), b.data.data(), a.data.size() * sizeof(double)) == 0);
}

Tensor& ParameterSet::at(const std::string& name) {
    auto it = entries_.find(name);
    if (it == entries_.end()) throw AlignmentError("missing parameter '" + name + "'");
    return it->second;
}

const Tensor& ParameterSet::at(const std::string& name) const {
    auto it = entries_.find(name);
    if (it == entries_.end()) throw AlignmentError("missing parameter '" + name + "'");
    return it->second;
}

std::size_t ParameterSet::num_scalars() const {
    std::size_t n = 0;
    for (const auto& [_, t] : entries_) n += t.size();
    return n;
}

std::vector<std::string> ParameterSet::names() const {
    std::vector<std::string> out;
    out.reserve(entries_.size());
    for (const auto& [name, _] : entries_) out.push_back(name);
    return out;
}

ParameterSet ParameterSet::zeros_like() const {
    ParameterSet out;
    for (const auto& [name, t] : entries_) out.insert(name, Tensor(t.shape));
    return out;
}

bool ParameterSet::all_finite() const {
    for (const auto& [_, t] : entries_) {
        if (!t.all_finite()) return false;
    }
    return true;
}

bool aligned(const ParameterSet& a, const ParameterSet& b) {
    if (a.size() != b.size()) return false;
    auto ib = b.begin();
    for (auto ia = a.begin(); ia != a.end(); ++ia, ++ib) {
        if (ia->first != ib->first || ia->second.shape != ib->second.shape) return false;
    }
    return true;
}

void require_aligned(const ParameterSet& a, const ParameterSet& b, const std::string& context) {
    if (aligned(a, b)) return;
    for (const auto& [name, t] : a) {
        if (!b.contains(name)) throw AlignmentError(context + ": '" + name + "' missing on right-hand side");
        if (b.at(name).shape != t.shape) {
            throw AlignmentError(context + ": '" + name + "' has shape " + shape_to_string(t.shape) + " vs " +
                                 shape_to_string(b.at(name).shape));
        }
    }
    for (const auto& [name, _] : b) {
        if (!a.contains(name)) throw AlignmentError(context + ": '" + name + "' missing on left-hand side");
    }
    throw AlignmentError(context + ": parameter sets are not aligned");
}

bool bit_identical(const ParameterSet& a, const ParameterSet& b) {
    if (!aligned(a, b)) return false;
    auto ib = b.begin();
    for (auto ia = a.begin(); ia != a.end(); ++ia, ++ib) {
        if (!bit_identical(ia->second, ib->second)) return false;
    }
    return true;
}

void axpy(ParameterSet& out, double scale, const ParameterSet& x) {
    require_aligned(out, x, "axpy");
    auto ix = x.begin();
    for (auto io = out.begin(); io != out.end(); ++io, ++ix) {
        auto& o = io->second.data;
        const auto& v = ix->second.data;
        for (std::size_t i = 0; i < o.size(); ++i) o[i] += scale * v[i];
    }
}

ParameterSet add(const ParameterSet& a, const ParameterSet& b) {
    require_aligned(a, b, "add");
    ParameterSet out = a;
    auto ib = b.begin();
    for (auto io = out.begin(); io != out.end(); ++io, ++ib) {
        auto& o = io->second.data;
        const auto& v = ib->second.data;
        for (std::size_t i = 0; i < o.size(); ++i) o[i] += v[i];
    }
    return out;
}

ParameterSet subtract(const ParameterSet& a, const ParameterSet& b) {
    require_aligned(a, b, "subtract");
    ParameterSet out = a;
    auto ib = b.begin();
    for (auto io = out.begin(); io != out.end(); ++io, ++ib) {
        auto& o = io->second.data;
        const auto& v = ib->second.data;
        for (std::size_t i = 0; i < o.size(); ++i) o[i] -= v[i];
    }
    return out;
}

void scale_in_place(ParameterSet& p, double s) {
    for (auto& [_, t] : p) {
        for (auto& x : t.data) x *= s;
    }
}

double max_abs_diff(const ParameterSet& a, const ParameterSet& b) {
    require_aligned(a, b, "max_abs_diff");
    double m = 0.0;
    auto ib = b.begin();
    for (auto ia = a.begin(); ia != a.end(); ++ia, ++ib) {
        for (std::size_t i = 0; i < ia->second.size(); ++i) {
            m = std::max(m, std::abs(ia->second[i] - ib->second[i]));
        }
    }
    return m;
}

ParameterSet select_prefix(const ParameterSet& p, const std::string& prefix) {
    ParameterSet out;
    for (const auto& [name, t] : p) {
        if (name.starts_with(prefix)) out.insert(name, t);
    }
    return out;
}

ParameterSet merge_disjoint(const ParameterSet& a, const ParameterSet& b) {
    ParameterSet out = a;
    for (const auto& [name, t] : b) {
        if (out.contains(name)) throw AlignmentError("merge_disjoint: duplicate parameter '" + name + "'");
        out.insert(name, t);
    }
    return out;
}

std::uint64_t fingerprint(const ParameterSet& p) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    auto mix = [&h](const void* bytes, std::size_t n) {
        const auto* c = static_cast<const unsigned char*>(bytes);
        for (std::size_t i = 0; i < n; ++i) {
            h ^= c[i];
            h *= 0x100000001b3ULL;
        }
    };
    for (const auto& [name, t] : p) {
        mix(name.data(), name.size());
        for (auto d : t.shape) {
            std::uint64_t d64 = d;
            mix(&d64, sizeof d64);
        }
        mix(t.data.data(), t.data.size() * sizeof(double));
    }
    return h;
}

} // namespace itl
