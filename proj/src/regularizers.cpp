#include "itl/regularizers.hpp"

#include <algorithm>
#include <cmath>

#include "itl/error.hpp"
#include "itl/optim.hpp"
#include "itl/random.hpp"

namespace itl {

namespace {

// Applies f(theta, anchor, omega) -> value to every aligned scalar.
template <typename F>
ParameterSet zip3(const ParameterSet& params, const ParameterSet& anchor, const ParameterSet* omega, F f) {
    require_aligned(params, anchor, "penalty anchor");
    if (omega) require_aligned(params, *omega, "penalty importance");
    ParameterSet out = params.zeros_like();
    for (auto& [name, g] : out) {
        const auto& th = params.at(name).data;
        const auto& an = anchor.at(name).data;
        const std::vector<double>* om = omega ? &omega->at(name).data : nullptr;
        for (std::size_t i = 0; i < th.size(); ++i) g[i] = f(th[i], an[i], om ? (*om)[i] : 0.0);
    }
    return out;
}

template <typename F>
double sum3(const ParameterSet& params, const ParameterSet& anchor, const ParameterSet* omega, F f) {
    require_aligned(params, anchor, "penalty anchor");
    if (omega) require_aligned(params, *omega, "penalty importance");
    double s = 0.0;
    for (const auto& [name, t] : params) {
        const auto& an = anchor.at(name).data;
        const std::vector<double>* om = omega ? &omega->at(name).data : nullptr;
        for (std::size_t i = 0; i < t.size(); ++i) s += f(t[i], an[i], om ? (*om)[i] : 0.0);
    }
    return s;
}

Tensor single_row(const Tensor& inputs, std::size_t r) {
    Shape s = inputs.shape;
    s[0] = 1;
    auto row = inputs.row(r);
    return Tensor(s, std::vector<double>(row.begin(), row.end()));
}

} // namespace

double importance_penalty(const ParameterSet& params, const ParameterSet& anchor, const ImportanceMap& omega,
                          double lambda) {
    return lambda * sum3(params, anchor, &omega, [](double t, double a, double o) { return o * (a - t) * (a - t); });
}

ParameterSet importance_penalty_gradient(const ParameterSet& params, const ParameterSet& anchor,
                                         const ImportanceMap& omega, double lambda) {
    return zip3(params, anchor, &omega, [lambda](double t, double a, double o) { return 2.0 * lambda * o * (t - a); });
}

double inverse_importance_penalty(const ParameterSet& params, const ParameterSet& anchor,
                                  const ImportanceMap& omega, double lambda) {
    return lambda *
           sum3(params, anchor, &omega, [](double t, double a, double o) { return (a - t) * (a - t) / (1.0 + o); });
}

ParameterSet inverse_importance_gradient(const ParameterSet& params, const ParameterSet& anchor,
                                         const ImportanceMap& omega, double lambda) {
    return zip3(params, anchor, &omega,
                [lambda](double t, double a, double o) { return 2.0 * lambda * (t - a) / (1.0 + o); });
}

double l2_transfer_penalty(const ParameterSet& params, const ParameterSet& anchor, double beta) {
    return beta * sum3(params, anchor, nullptr, [](double t, double a, double) { return (a - t) * (a - t); });
}

ParameterSet l2_transfer_gradient(const ParameterSet& params, const ParameterSet& anchor, double beta) {
    return zip3(params, anchor, nullptr, [beta](double t, double a, double) { return 2.0 * beta * (t - a); });
}

void clamp_nonnegative(ImportanceMap& omega) {
    for (auto& [_, t] : omega) {
        for (auto& x : t.data) x = x > 0.0 ? x : 0.0;
    }
}

ImportanceMap ewc_fisher(const ModelSpec& model, const ParameterSet& params, const Tensor& inputs,
                         std::span<const int> labels, std::optional<std::size_t> head, double loss_scale) {
    if (inputs.rows() == 0) throw DataError("ewc_fisher: empty sample");
    if (labels.size() != inputs.rows()) throw DataError("ewc_fisher: label count does not match sample count");
    ImportanceMap fisher = params.zeros_like();
    for (std::size_t n = 0; n < inputs.rows(); ++n) {
        const int y = labels[n];
        auto trace = forward_trace(model, params, single_row(inputs, n), head);
        // d(-log p_y)/dz; the sign is irrelevant once squared.
        auto ce = cross_entropy(trace.logits, std::span<const int>(&y, 1));
        auto g = backward(model, params, trace, ce.d_logits);
        for (auto& [name, f] : fisher) {
            const auto& gd = g.at(name).data;
            for (std::size_t i = 0; i < gd.size(); ++i) {
                const double s = loss_scale * gd[i];
                f[i] += s * s;
            }
        }
    }
    scale_in_place(fisher, 1.0 / static_cast<double>(inputs.rows()));
    return fisher;
}

ImportanceMap mas_importance(const ModelSpec& model, const ParameterSet& params, const Tensor& inputs,
                             std::optional<std::size_t> head, MasFunctional functional) {
    if (inputs.rows() == 0) throw DataError("mas_importance: empty sample");
    ImportanceMap omega = params.zeros_like();
    auto accumulate_abs = [&omega](const ParameterSet& g) {
        for (auto& [name, o] : omega) {
            const auto& gd = g.at(name).data;
            for (std::size_t i = 0; i < gd.size(); ++i) o[i] += std::abs(gd[i]);
        }
    };
    for (std::size_t n = 0; n < inputs.rows(); ++n) {
        auto trace = forward_trace(model, params, single_row(inputs, n), head);
        if (functional == MasFunctional::SquaredL2) {
            Tensor d = trace.logits;
            for (auto& x : d.data) x *= 2.0;
            accumulate_abs(backward(model, params, trace, d));
        } else {
            for (std::size_t c = 0; c < trace.logits.size(); ++c) {
                Tensor d(trace.logits.shape);
                d[c] = 1.0;
                accumulate_abs(backward(model, params, trace, d));
            }
        }
    }
    scale_in_place(omega, 1.0 / static_cast<double>(inputs.rows()));
    return omega;
}

SiAccumulator SiAccumulator::begin(const ParameterSet& params) { return {params.zeros_like(), params}; }

void si_track_step(SiAccumulator& acc, const ParameterSet& g_task, const ParameterSet& before,
                   const ParameterSet& after) {
    require_aligned(acc.w, g_task, "si_track_step gradient");
    require_aligned(acc.w, before, "si_track_step before");
    require_aligned(acc.w, after, "si_track_step after");
    for (auto& [name, w] : acc.w) {
        const auto& g = g_task.at(name).data;
        const auto& b = before.at(name).data;
        const auto& a = after.at(name).data;
        for (std::size_t i = 0; i < g.size(); ++i) w[i] += g[i] * (a[i] - b[i]);
    }
}

ImportanceMap si_contribution(const SiAccumulator& acc, const ParameterSet& end, double epsilon) {
    require_aligned(acc.w, end, "si_contribution");
    ImportanceMap c = acc.w.zeros_like();
    for (auto& [name, ct] : c) {
        const auto& w = acc.w.at(name).data;
        const auto& s = acc.start.at(name).data;
        const auto& e = end.at(name).data;
        for (std::size_t i = 0; i < w.size(); ++i) {
            const double d = e[i] - s[i];
            const double v = w[i] / (d * d + epsilon);
            ct[i] = v > 0.0 ? v : 0.0;
        }
    }
    return c;
}

void si_update_importance(ImportanceMap& omega, const SiAccumulator& acc, const ParameterSet& end,
                          double epsilon) {
    if (omega.empty()) omega = acc.w.zeros_like();
    axpy(omega, 1.0, si_contribution(acc, end, epsilon));
}

LogitLoss kd_loss(const Tensor& teacher_logits, const Tensor& student_logits, double temperature) {
    if (teacher_logits.shape != student_logits.shape) {
        throw AlignmentError("kd_loss: teacher logits " + shape_to_string(teacher_logits.shape) +
                             " vs student logits " + shape_to_string(student_logits.shape));
    }
    if (!(temperature > 0.0)) throw ConfigError("kd_loss: temperature must be > 0");
    const Tensor pt = softmax(teacher_logits, temperature);
    const Tensor ps = softmax(student_logits, temperature);
    const std::size_t batch = student_logits.rows();
    const double t2 = temperature * temperature;
    LogitLoss out{0.0, Tensor(student_logits.shape)};
    for (std::size_t b = 0; b < batch; ++b) {
        auto z = student_logits.row(b);
        double mx = z[0];
        for (double v : z) mx = std::max(mx, v);
        double sum = 0.0;
        for (double v : z) sum += std::exp(v / temperature - mx / temperature);
        const double lse = mx / temperature + std::log(sum);
        auto t = pt.row(b);
        for (std::size_t j = 0; j < z.size(); ++j) out.loss -= t[j] * (z[j] / temperature - lse);
    }
    out.loss *= t2 / static_cast<double>(batch);
    const double g = temperature / static_cast<double>(batch);
    for (std::size_t i = 0; i < out.d_logits.size(); ++i) out.d_logits[i] = g * (ps[i] - pt[i]);
    return out;
}

LogitLoss kd_loss(const TeacherSnapshot& teacher, const ModelSpec& model, const Tensor& student_logits,
                  const Tensor& batch, std::optional<std::size_t> head) {
    return kd_loss(forward(model, teacher.params, batch, head), student_logits, teacher.temperature);
}

// ---- autoencoder -----------------------------------------------------------

Tensor encode(const EncoderState& enc, const Tensor& features) {
    const auto& w = enc.weights.at("enc.weight");
    const auto& b = enc.weights.at("enc.bias");
    const std::size_t code = w.shape[0], dim = w.shape[1];
    if (features.rank() != 2 || features.row_size() != dim) {
        throw AlignmentError("encoder expects [batch, " + std::to_string(dim) + "] features, got " +
                             shape_to_string(features.shape));
    }
    Tensor out({features.rows(), code});
    for (std::size_t n = 0; n < features.rows(); ++n) {
        auto f = features.row(n);
        for (std::size_t c = 0; c < code; ++c) {
            double acc = b[c];
            for (std::size_t i = 0; i < dim; ++i) acc += w[c * dim + i] * f[i];
            out[n * code + c] = acc;
        }
    }
    return out;
}

namespace {

Tensor decode(const EncoderState& enc, const Tensor& codes, Tensor* pre_activation = nullptr) {
    const auto& w = enc.weights.at("dec.weight");
    const auto& b = enc.weights.at("dec.bias");
    const std::size_t dim = w.shape[0], code = w.shape[1];
    Tensor out({codes.rows(), dim});
    if (pre_activation) *pre_activation = Tensor({codes.rows(), dim});
    for (std::size_t n = 0; n < codes.rows(); ++n) {
        for (std::size_t d = 0; d < dim; ++d) {
            double acc = b[d];
            for (std::size_t c = 0; c < code; ++c) acc += w[d * code + c] * codes[n * code + c];
            if (pre_activation) (*pre_activation)[n * dim + d] = acc;
            out[n * dim + d] = acc > 0.0 ? acc : 0.0;
        }
    }
    return out;
}

Tensor flatten_batch(const Tensor& t) { return Tensor({t.rows(), t.row_size()}, t.data); }

} // namespace

Tensor reconstruct(const EncoderState& enc, const Tensor& features) { return decode(enc, encode(enc, features)); }

double reconstruction_mse(const EncoderState& enc, const Tensor& features) {
    Tensor flat = flatten_batch(features);
    Tensor r = reconstruct(enc, flat);
    double s = 0.0;
    for (std::size_t i = 0; i < r.size(); ++i) s += (r[i] - flat[i]) * (r[i] - flat[i]);
    return s / static_cast<double>(r.size());
}

EbllTerm ebll_loss(const EncoderState& enc, const Tensor& features_now, const Tensor& features_prev) {
    if (features_now.shape != features_prev.shape) throw AlignmentError("ebll_loss: feature shapes differ");
    const Tensor now = flatten_batch(features_now);
    const Tensor prev = flatten_batch(features_prev);
    const Tensor code_now = encode(enc, now);
    const Tensor code_prev = encode(enc, prev);
    const auto& w = enc.weights.at("enc.weight");
    const std::size_t code = w.shape[0], dim = w.shape[1];
    const std::size_t batch = now.rows();
    const double inv_batch = 1.0 / static_cast<double>(batch);
    EbllTerm out{0.0, Tensor(features_now.shape)};
    for (std::size_t n = 0; n < batch; ++n) {
        for (std::size_t c = 0; c < code; ++c) {
            const double diff = code_now[n * code + c] - code_prev[n * code + c];
            out.loss += diff * diff;
            const double g = enc.alpha * diff * inv_batch;
            for (std::size_t i = 0; i < dim; ++i) out.d_features[n * dim + i] += g * w[c * dim + i];
        }
    }
    out.loss *= 0.5 * enc.alpha * inv_batch;
    return out;
}

EncoderState train_autoencoder(const Tensor& features, const AutoencoderOptions& options) {
    const Tensor x = flatten_batch(features);
    const std::size_t n = x.rows(), dim = x.row_size();
    const std::size_t code = options.code_dim == 0 ? std::max<std::size_t>(1, dim / 4) : options.code_dim;
    if (n < code + 1) {
        throw DataError("train_autoencoder: need at least " + std::to_string(code + 1) + " feature vectors, got " +
                        std::to_string(n));
    }
    EncoderState enc;
    enc.code_dim = code;
    enc.alpha = options.alpha;

    std::vector<double> mean(dim, 0.0);
    for (std::size_t r = 0; r < n; ++r)
        for (std::size_t i = 0; i < dim; ++i) mean[i] += x[r * dim + i];
    for (auto& m : mean) m /= static_cast<double>(n);
    double var = 0.0;
    for (std::size_t r = 0; r < n; ++r)
        for (std::size_t i = 0; i < dim; ++i) var += (x[r * dim + i] - mean[i]) * (x[r * dim + i] - mean[i]);
    var /= static_cast<double>(n * dim);
    enc.feature_variance = var;

    Rng rng = make_rng(options.seed, {0xae});
    auto glorot = [&rng](Shape s, double fan_in, double fan_out) {
        std::uniform_real_distribution<double> dist(-std::sqrt(6.0 / (fan_in + fan_out)),
                                                    std::sqrt(6.0 / (fan_in + fan_out)));
        Tensor t(std::move(s));
        for (auto& v : t.data) v = dist(rng);
        return t;
    };
    enc.weights.insert("enc.weight", glorot({code, dim}, double(dim), double(code)));
    enc.weights.insert("enc.bias", Tensor({code}));
    enc.weights.insert("dec.weight", glorot({dim, code}, double(code), double(dim)));
    enc.weights.insert("dec.bias", Tensor({dim}, mean));

    if (var < 1e-12) {
        // Constant features carry no information: zero code, decoder outputs the mean.
        enc.degenerate = true;
        for (auto& v : enc.weights.at("enc.weight").data) v = 0.0;
        for (auto& v : enc.weights.at("dec.weight").data) v = 0.0;
        enc.train_mse = reconstruction_mse(enc, x);
        return enc;
    }

    AdamState adam = AdamState::zeros_like(enc.weights, options.lr);
    std::vector<std::size_t> order(n);
    for (std::size_t i = 0; i < n; ++i) order[i] = i;
    const std::size_t bs = std::max<std::size_t>(1, std::min(options.batch_size, n));
    for (int epoch = 0; epoch < options.epochs; ++epoch) {
        std::shuffle(order.begin(), order.end(), rng);
        for (std::size_t start = 0; start < n; start += bs) {
            const std::size_t stop = std::min(n, start + bs);
            std::span<const std::size_t> idx(order.data() + start, stop - start);
            const Tensor xb = gather_rows(x, idx);
            const std::size_t b = xb.rows();
            const Tensor codes = encode(enc, xb);
            Tensor pre;
            const Tensor recon = decode(enc, codes, &pre);
            ParameterSet g = enc.weights.zeros_like();
            auto& gew = g.at("enc.weight");
            auto& geb = g.at("enc.bias");
            auto& gdw = g.at("dec.weight");
            auto& gdb = g.at("dec.bias");
            const auto& dw = enc.weights.at("dec.weight");
            const double scale = 2.0 / static_cast<double>(b * dim);
            std::vector<double> dcode(code);
            for (std::size_t r = 0; r < b; ++r) {
                std::fill(dcode.begin(), dcode.end(), 0.0);
                for (std::size_t d = 0; d < dim; ++d) {
                    if (pre[r * dim + d] <= 0.0) continue;
                    const double dr = scale * (recon[r * dim + d] - xb[r * dim + d]);
                    gdb[d] += dr;
                    for (std::size_t c = 0; c < code; ++c) {
                        gdw[d * code + c] += dr * codes[r * code + c];
                        dcode[c] += dr * dw[d * code + c];
                    }
                }
                for (std::size_t c = 0; c < code; ++c) {
                    geb[c] += dcode[c];
                    for (std::size_t i = 0; i < dim; ++i) gew[c * dim + i] += dcode[c] * xb[r * dim + i];
                }
            }
            adam_step(adam, enc.weights, g);
        }
    }
    enc.train_mse = reconstruction_mse(enc, x);
    return enc;
}

// ---- merging -----------------------------------------------------------------

namespace {

std::vector<const ParameterSet*> models_upto(const ImmArchive& archive, std::size_t upto_center,
                                             std::vector<std::size_t>* centers = nullptr) {
    std::vector<const ParameterSet*> out;
    for (const auto& [c, p] : archive.models) {
        if (c > upto_center) continue;
        out.push_back(&p);
        if (centers) centers->push_back(c);
    }
    if (out.empty()) throw DataError("imm merge: archive has no models up to center " + std::to_string(upto_center));
    for (const auto* p : out) require_aligned(*out.front(), *p, "imm merge");
    return out;
}

} // namespace

ParameterSet imm_merge_mean(const ImmArchive& archive, std::size_t upto_center) {
    auto models = models_upto(archive, upto_center);
    ParameterSet merged = models.front()->zeros_like();
    const double count = static_cast<double>(models.size());
    for (auto& [name, t] : merged) {
        for (std::size_t i = 0; i < t.size(); ++i) {
            double s = 0.0;
            for (const auto* m : models) s += m->at(name)[i];
            t[i] = s / count;
        }
    }
    return merged;
}

ModeMerge imm_merge_mode(const ImmArchive& archive, std::size_t upto_center, double damping) {
    std::vector<std::size_t> centers;
    auto models = models_upto(archive, upto_center, &centers);
    std::vector<const ImportanceMap*> fishers;
    for (auto c : centers) {
        auto it = archive.fishers.find(c);
        if (it == archive.fishers.end()) {
            throw DataError("imm_merge_mode: no Fisher information archived for center " + std::to_string(c));
        }
        require_aligned(*models.front(), it->second, "imm_merge_mode fisher");
        fishers.push_back(&it->second);
    }
    const std::size_t k = models.size();
    const double count = static_cast<double>(k);
    ModeMerge out;
    out.merged = models.front()->zeros_like();
    for (auto c : centers) out.weights[c] = models.front()->zeros_like();
    std::vector<double> w(k);
    for (auto& [name, t] : out.merged) {
        for (std::size_t i = 0; i < t.size(); ++i) {
            bool all_zero = true, all_equal = true;
            const double f0 = fishers[0]->at(name)[i];
            for (std::size_t j = 0; j < k; ++j) {
                const double f = fishers[j]->at(name)[i];
                all_zero = all_zero && f == 0.0;
                all_equal = all_equal && f == f0;
            }
            if (all_zero) out.uniform_fallback.push_back(name + "[" + std::to_string(i) + "]");
            if (all_equal) {
                // Uniform weights: evaluate exactly as the mean merge does.
                double s = 0.0;
                for (const auto* m : models) s += m->at(name)[i];
                t[i] = s / count;
                for (auto c : centers) out.weights[c].at(name)[i] = 1.0 / count;
                continue;
            }
            double total = 0.0;
            for (std::size_t j = 0; j < k; ++j) {
                w[j] = std::max(0.0, fishers[j]->at(name)[i]) + damping;
                total += w[j];
            }
            double acc = 0.0;
            for (std::size_t j = 0; j < k; ++j) {
                w[j] /= total;
                acc += w[j] * models[j]->at(name)[i];
                out.weights[centers[j]].at(name)[i] = w[j];
            }
            t[i] = acc;
        }
    }
    return out;
}

} // namespace itl
