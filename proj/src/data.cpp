#include "itl/data.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "itl/error.hpp"

namespace itl {

Split Split::subset(std::span<const std::size_t> rows) const {
    Split out;
    out.inputs = gather_rows(inputs, rows);
    out.labels.reserve(rows.size());
    out.ids.reserve(rows.size());
    for (auto r : rows) {
        out.labels.push_back(labels[r]);
        out.ids.push_back(ids[r]);
    }
    return out;
}

Shape CenterDataset::input_shape() const {
    for (const Split* s : {&train, &val, &test}) {
        const Shape& shape = s->inputs.shape;
        if (shape.size() >= 2) return Shape(shape.begin() + 1, shape.end());
    }
    throw DataError("center '" + name + "' has no inputs");
}

std::array<std::size_t, 3> counts_from_fractions(std::size_t per_class_total, std::array<double, 3> fractions) {
    const double sum = fractions[0] + fractions[1] + fractions[2];
    if (std::abs(sum - 1.0) > 1e-9 || fractions[0] < 0 || fractions[1] < 0 || fractions[2] < 0) {
        throw ConfigError("split fractions must be nonnegative and sum to 1");
    }
    const auto total = static_cast<double>(per_class_total);
    std::size_t tr = static_cast<std::size_t>(std::llround(total * fractions[0]));
    std::size_t va = static_cast<std::size_t>(std::llround(total * fractions[1]));
    tr = std::min(tr, per_class_total);
    va = std::min(va, per_class_total - tr);
    return {tr, va, per_class_total - tr - va};
}

std::vector<CenterDataset> make_synthetic_task(const SyntheticTaskSpec& spec) {
    if (spec.num_centers == 0) throw ConfigError("synthetic task needs at least one center");
    if (spec.num_classes < 2) throw ConfigError("synthetic task needs at least two classes");
    if (spec.dim == 0) throw ConfigError("synthetic task dimension must be positive");
    if (spec.train_per_class == 0 || spec.val_per_class == 0 || spec.test_per_class == 0) {
        throw ConfigError("every split needs at least one instance per class and center");
    }
    if (spec.modes_per_class == 0) throw ConfigError("modes_per_class must be positive");

    const std::size_t classes = spec.num_classes, dim = spec.dim, centers = spec.num_centers;
    const std::size_t per_center = spec.train_per_class + spec.val_per_class + spec.test_per_class;
    const std::size_t pool = per_center * centers;

    Rng geometry = make_rng(spec.seed, {0x6e0});
    std::normal_distribution<double> spread(0.0, spec.center_spread);
    std::vector<std::vector<double>> blobs(classes * spec.modes_per_class, std::vector<double>(dim));
    for (auto& b : blobs)
        for (auto& v : b) v = 0.5 + spread(geometry);

    std::vector<CenterDataset> out(centers);
    for (std::size_t k = 0; k < centers; ++k) {
        auto& ds = out[k];
        ds.center = k;
        ds.source_center = k;
        ds.name = "center" + std::to_string(k + 1);
        ds.num_classes = classes;
        const double n = static_cast<double>(per_center);
        ds.fractions = {spec.train_per_class / n, spec.val_per_class / n, spec.test_per_class / n};
    }

    // Per-split row buffers, filled class by class, shuffled at the end.
    struct Rows {
        std::vector<double> x;
        std::vector<int> y;
        std::vector<std::size_t> id;
    };
    std::vector<std::array<Rows, 3>> rows(centers);

    Rng sampler = make_rng(spec.seed, {0x5a3});
    std::normal_distribution<double> within(0.0, spec.within_std);
    for (std::size_t c = 0; c < classes; ++c) {
        std::vector<std::size_t> order(pool);
        std::iota(order.begin(), order.end(), 0);
        std::shuffle(order.begin(), order.end(), sampler);
        std::vector<std::vector<double>> samples(pool, std::vector<double>(dim));
        for (std::size_t i = 0; i < pool; ++i) {
            const auto& centre = blobs[c * spec.modes_per_class + i % spec.modes_per_class];
            for (std::size_t d = 0; d < dim; ++d) samples[i][d] = centre[d] + within(sampler);
        }
        for (std::size_t k = 0; k < centers; ++k) {
            for (std::size_t j = 0; j < per_center; ++j) {
                const std::size_t i = order[k * per_center + j];
                const std::size_t split = j < spec.train_per_class ? 0
                                          : j < spec.train_per_class + spec.val_per_class ? 1
                                                                                          : 2;
                auto& r = rows[k][split];
                r.x.insert(r.x.end(), samples[i].begin(), samples[i].end());
                r.y.push_back(static_cast<int>(c));
                r.id.push_back(c * pool + i);
            }
        }
    }

    for (std::size_t k = 0; k < centers; ++k) {
        Split* splits[3] = {&out[k].train, &out[k].val, &out[k].test};
        for (std::size_t s = 0; s < 3; ++s) {
            auto& r = rows[k][s];
            const std::size_t count = r.y.size();
            std::vector<std::size_t> perm(count);
            std::iota(perm.begin(), perm.end(), 0);
            std::shuffle(perm.begin(), perm.end(), sampler);
            Split full;
            full.inputs = Tensor({count, dim}, std::move(r.x));
            full.labels = std::move(r.y);
            full.ids = std::move(r.id);
            *splits[s] = full.subset(perm);
        }
    }
    return out;
}

CenterDataset apply_noise(const CenterDataset& ds, double sigma, std::uint64_t seed, bool clip) {
    if (sigma < 0.0) throw ConfigError("noise sigma must be nonnegative");
    CenterDataset out = ds;
    if (sigma == 0.0) return out;
    const double scaled = sigma * ds.value_range / 255.0;
    Rng rng = make_rng(seed, {0x7015e, ds.source_center});
    std::normal_distribution<double> noise(0.0, scaled);
    for (Split* s : {&out.train, &out.val, &out.test}) {
        for (auto& v : s->inputs.data) {
            v += noise(rng);
            if (clip) v = std::clamp(v, 0.0, ds.value_range);
        }
    }
    out.heterogeneity = {Heterogeneity::Kind::GaussianNoise, sigma};
    return out;
}

std::vector<CenterDataset> reorder_centers(const std::vector<CenterDataset>& datasets,
                                           std::span<const std::size_t> permutation) {
    if (permutation.size() != datasets.size()) {
        throw ConfigError("center order has " + std::to_string(permutation.size()) + " entries for " +
                          std::to_string(datasets.size()) + " centers");
    }
    std::vector<bool> seen(datasets.size(), false);
    for (auto p : permutation) {
        if (p >= datasets.size() || seen[p]) throw ConfigError("center order is not a permutation");
        seen[p] = true;
    }
    std::vector<CenterDataset> out;
    out.reserve(datasets.size());
    for (std::size_t i = 0; i < permutation.size(); ++i) {
        out.push_back(datasets[permutation[i]]);
        out.back().center = i;
    }
    return out;
}

std::vector<std::vector<std::size_t>> epoch_batches(std::size_t split_size, std::size_t batch_size, Rng& rng) {
    if (batch_size == 0) throw ConfigError("batch size must be positive");
    std::vector<std::size_t> order(split_size);
    std::iota(order.begin(), order.end(), 0);
    std::shuffle(order.begin(), order.end(), rng);
    std::vector<std::vector<std::size_t>> batches;
    for (std::size_t start = 0; start < split_size; start += batch_size) {
        const std::size_t stop = std::min(split_size, start + batch_size);
        batches.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(start),
                             order.begin() + static_cast<std::ptrdiff_t>(stop));
    }
    return batches;
}

BalancedSampler::BalancedSampler(std::span<const int> labels, std::size_t num_classes, std::uint64_t seed)
    : rng_(make_rng(seed, {0xba1})) {
    std::vector<std::size_t> counts(num_classes, 0);
    for (int y : labels) {
        if (y < 0 || static_cast<std::size_t>(y) >= num_classes) {
            throw DataError("balanced sampler: label " + std::to_string(y) + " out of range");
        }
        ++counts[static_cast<std::size_t>(y)];
    }
    for (std::size_t c = 0; c < num_classes; ++c) {
        if (counts[c] == 0) throw DataError("balanced sampler: class " + std::to_string(c) + " missing from split");
    }
    class_weights_.resize(num_classes);
    for (std::size_t c = 0; c < num_classes; ++c) class_weights_[c] = 1.0 / static_cast<double>(counts[c]);
    std::vector<double> w;
    w.reserve(labels.size());
    for (int y : labels) w.push_back(class_weights_[static_cast<std::size_t>(y)]);
    dist_ = std::discrete_distribution<std::size_t>(w.begin(), w.end());
}

std::vector<std::size_t> BalancedSampler::next_batch(std::size_t batch_size) {
    std::vector<std::size_t> batch(batch_size);
    for (auto& i : batch) i = dist_(rng_);
    return batch;
}

std::vector<std::vector<std::size_t>> BalancedSampler::epoch(std::size_t split_size, std::size_t batch_size) {
    if (batch_size == 0) throw ConfigError("batch size must be positive");
    std::vector<std::vector<std::size_t>> out;
    for (std::size_t start = 0; start < split_size; start += batch_size) {
        out.push_back(next_batch(std::min(batch_size, split_size - start)));
    }
    return out;
}

Split pool_splits(const std::vector<CenterDataset>& centers, Split CenterDataset::*member) {
    if (centers.empty()) throw DataError("cannot pool zero centers");
    Split out;
    Shape shape = (centers.front().*member).inputs.shape;
    shape[0] = 0;
    std::vector<double> x;
    for (const auto& ds : centers) {
        const Split& s = ds.*member;
        x.insert(x.end(), s.inputs.data.begin(), s.inputs.data.end());
        out.labels.insert(out.labels.end(), s.labels.begin(), s.labels.end());
        out.ids.insert(out.ids.end(), s.ids.begin(), s.ids.end());
        shape[0] += s.size();
    }
    out.inputs = Tensor(shape, std::move(x));
    return out;
}

} // namespace itl
