#include "itl/nn.hpp"

#include <cmath>
#include <cstdio>
#include <limits>

#include "itl/error.hpp"
#include "itl/random.hpp"

namespace itl {

namespace {

std::string two_digits(std::size_t i) {
    char buf[16];
    std::snprintf(buf, sizeof buf, "%02zu", i);
    return buf;
}

Shape layer_output_shape(const LayerSpec& layer, const Shape& in) {
    auto fail = [&](const std::string& why) -> Shape {
        throw ConfigError("layer cannot accept input " + shape_to_string(in) + ": " + why);
    };
    switch (layer.kind) {
    case LayerKind::Dense:
        if (in.size() != 1 || in[0] != layer.in) return fail("dense expects [" + std::to_string(layer.in) + "]");
        if (layer.out == 0) return fail("dense output size is zero");
        return {layer.out};
    case LayerKind::Conv2D:
        if (in.size() != 3 || in[0] != layer.in) return fail("conv2d expects [channels, h, w]");
        if (layer.kernel == 0 || in[1] < layer.kernel || in[2] < layer.kernel) return fail("kernel too large");
        return {layer.out, in[1] - layer.kernel + 1, in[2] - layer.kernel + 1};
    case LayerKind::MaxPool2D:
        if (in.size() != 3) return fail("max_pool2d expects [channels, h, w]");
        if (layer.kernel == 0 || in[1] < layer.kernel || in[2] < layer.kernel) return fail("pool window too large");
        return {in[0], in[1] / layer.kernel, in[2] / layer.kernel};
    case LayerKind::ReLU:
        return in;
    case LayerKind::Flatten:
        return {shape_size(in)};
    }
    return fail("unknown layer kind");
}

Shape with_batch(std::size_t batch, const Shape& sample) {
    Shape s;
    s.reserve(sample.size() + 1);
    s.push_back(batch);
    s.insert(s.end(), sample.begin(), sample.end());
    return s;
}

void init_layer(ParameterSet& params, const LayerSpec& layer, const std::string& prefix, Rng rng) {
    if (!layer.has_params()) return;
    Shape wshape;
    double fan_in = 0, fan_out = 0;
    if (layer.kind == LayerKind::Dense) {
        wshape = {layer.out, layer.in};
        fan_in = static_cast<double>(layer.in);
        fan_out = static_cast<double>(layer.out);
    } else {
        wshape = {layer.out, layer.in, layer.kernel, layer.kernel};
        const double area = static_cast<double>(layer.kernel * layer.kernel);
        fan_in = static_cast<double>(layer.in) * area;
        fan_out = static_cast<double>(layer.out) * area;
    }
    const double a = std::sqrt(6.0 / (fan_in + fan_out));
    std::uniform_real_distribution<double> dist(-a, a);
    Tensor w(wshape);
    for (auto& x : w.data) x = dist(rng);
    params.insert(prefix + "weight", std::move(w));
    params.insert(prefix + "bias", Tensor({layer.out}));
}

std::string head_layer_prefix(const ModelSpec& model, std::size_t head, std::size_t layer) {
    return head_prefix(model, head) + two_digits(layer) + ".";
}

// ---- per-layer kernels -------------------------------------------------

Tensor dense_forward(const Tensor& x, const Tensor& w, const Tensor& b) {
    const std::size_t batch = x.rows(), in = w.shape[1], out = w.shape[0];
    Tensor y({batch, out});
    for (std::size_t n = 0; n < batch; ++n) {
        const double* xr = x.data.data() + n * in;
        double* yr = y.data.data() + n * out;
        for (std::size_t o = 0; o < out; ++o) {
            const double* wr = w.data.data() + o * in;
            double acc = b[o];
            for (std::size_t i = 0; i < in; ++i) acc += wr[i] * xr[i];
            yr[o] = acc;
        }
    }
    return y;
}

void dense_backward(const Tensor& x, const Tensor& w, const Tensor& dy, Tensor& dw, Tensor& db, Tensor* dx) {
    const std::size_t batch = x.rows(), in = w.shape[1], out = w.shape[0];
    for (std::size_t n = 0; n < batch; ++n) {
        const double* xr = x.data.data() + n * in;
        const double* dyr = dy.data.data() + n * out;
        double* dxr = dx ? dx->data.data() + n * in : nullptr;
        for (std::size_t o = 0; o < out; ++o) {
            const double g = dyr[o];
            db[o] += g;
            double* dwr = dw.data.data() + o * in;
            const double* wr = w.data.data() + o * in;
            for (std::size_t i = 0; i < in; ++i) dwr[i] += g * xr[i];
            if (dxr) {
                for (std::size_t i = 0; i < in; ++i) dxr[i] += g * wr[i];
            }
        }
    }
}

Tensor conv_forward(const Tensor& x, const Tensor& w, const Tensor& b) {
    const std::size_t batch = x.shape[0], cin = x.shape[1], h = x.shape[2], wd = x.shape[3];
    const std::size_t cout = w.shape[0], k = w.shape[2];
    const std::size_t oh = h - k + 1, ow = wd - k + 1;
    Tensor y({batch, cout, oh, ow});
    for (std::size_t n = 0; n < batch; ++n)
        for (std::size_t co = 0; co < cout; ++co)
            for (std::size_t r = 0; r < oh; ++r)
                for (std::size_t c = 0; c < ow; ++c) {
                    double acc = b[co];
                    for (std::size_t ci = 0; ci < cin; ++ci)
                        for (std::size_t kr = 0; kr < k; ++kr)
                            for (std::size_t kc = 0; kc < k; ++kc) {
                                acc += w[((co * cin + ci) * k + kr) * k + kc] *
                                       x[((n * cin + ci) * h + r + kr) * wd + c + kc];
                            }
                    y[((n * cout + co) * oh + r) * ow + c] = acc;
                }
    return y;
}

void conv_backward(const Tensor& x, const Tensor& w, const Tensor& dy, Tensor& dw, Tensor& db, Tensor* dx) {
    const std::size_t batch = x.shape[0], cin = x.shape[1], h = x.shape[2], wd = x.shape[3];
    const std::size_t cout = w.shape[0], k = w.shape[2];
    const std::size_t oh = h - k + 1, ow = wd - k + 1;
    for (std::size_t n = 0; n < batch; ++n)
        for (std::size_t co = 0; co < cout; ++co)
            for (std::size_t r = 0; r < oh; ++r)
                for (std::size_t c = 0; c < ow; ++c) {
                    const double g = dy[((n * cout + co) * oh + r) * ow + c];
                    db[co] += g;
                    for (std::size_t ci = 0; ci < cin; ++ci)
                        for (std::size_t kr = 0; kr < k; ++kr)
                            for (std::size_t kc = 0; kc < k; ++kc) {
                                const std::size_t xi = ((n * cin + ci) * h + r + kr) * wd + c + kc;
                                const std::size_t wi = ((co * cin + ci) * k + kr) * k + kc;
                                dw[wi] += g * x[xi];
                                if (dx) (*dx)[xi] += g * w[wi];
                            }
                }
}

Tensor pool_forward(const Tensor& x, std::size_t k, std::vector<std::size_t>& argmax) {
    const std::size_t batch = x.shape[0], ch = x.shape[1], h = x.shape[2], wd = x.shape[3];
    const std::size_t oh = h / k, ow = wd / k;
    Tensor y({batch, ch, oh, ow});
    argmax.assign(y.size(), 0);
    for (std::size_t n = 0; n < batch; ++n)
        for (std::size_t c = 0; c < ch; ++c)
            for (std::size_t r = 0; r < oh; ++r)
                for (std::size_t q = 0; q < ow; ++q) {
                    double best = -std::numeric_limits<double>::infinity();
                    std::size_t best_i = 0;
                    for (std::size_t kr = 0; kr < k; ++kr)
                        for (std::size_t kc = 0; kc < k; ++kc) {
                            const std::size_t xi = ((n * ch + c) * h + r * k + kr) * wd + q * k + kc;
                            if (x[xi] > best) {
                                best = x[xi];
                                best_i = xi;
                            }
                        }
                    const std::size_t yi = ((n * ch + c) * oh + r) * ow + q;
                    y[yi] = best;
                    argmax[yi] = best_i;
                }
    return y;
}

Tensor layer_forward(const LayerSpec& layer, const std::string& prefix, const ParameterSet& params,
                     const Tensor& x, std::vector<std::size_t>& argmax) {
    switch (layer.kind) {
    case LayerKind::Dense:
        return dense_forward(x, params.at(prefix + "weight"), params.at(prefix + "bias"));
    case LayerKind::Conv2D:
        return conv_forward(x, params.at(prefix + "weight"), params.at(prefix + "bias"));
    case LayerKind::MaxPool2D:
        return pool_forward(x, layer.kernel, argmax);
    case LayerKind::ReLU: {
        Tensor y = x;
        for (auto& v : y.data) v = v > 0.0 ? v : 0.0;
        return y;
    }
    case LayerKind::Flatten:
        return Tensor({x.rows(), x.row_size()}, x.data);
    }
    throw ConfigError("unknown layer kind");
}

// Propagates dy through one layer; accumulates parameter gradients into grad.
Tensor layer_backward(const LayerSpec& layer, const std::string& prefix, const ParameterSet& params,
                      ParameterSet& grad, const Tensor& x, const std::vector<std::size_t>& argmax, const Tensor& dy,
                      bool need_dx) {
    Tensor dx;
    if (need_dx) dx = Tensor(x.shape);
    switch (layer.kind) {
    case LayerKind::Dense:
        dense_backward(x, params.at(prefix + "weight"), dy, grad.at(prefix + "weight"), grad.at(prefix + "bias"),
                       need_dx ? &dx : nullptr);
        break;
    case LayerKind::Conv2D:
        conv_backward(x, params.at(prefix + "weight"), dy, grad.at(prefix + "weight"), grad.at(prefix + "bias"),
                      need_dx ? &dx : nullptr);
        break;
    case LayerKind::MaxPool2D:
        if (need_dx) {
            for (std::size_t i = 0; i < dy.size(); ++i) dx[argmax[i]] += dy[i];
        }
        break;
    case LayerKind::ReLU:
        if (need_dx) {
            for (std::size_t i = 0; i < dy.size(); ++i) dx[i] = x[i] > 0.0 ? dy[i] : 0.0;
        }
        break;
    case LayerKind::Flatten:
        if (need_dx) dx.data = dy.data;
        break;
    }
    return dx;
}

std::size_t resolve_head(const ModelSpec& model, std::optional<std::size_t> head_index) {
    if (model.multi_head()) {
        if (!head_index) throw ConfigError("multi-head model requires a head index");
        if (*head_index >= model.num_heads) {
            throw ConfigError("head index " + std::to_string(*head_index) + " out of range [0, " +
                              std::to_string(model.num_heads) + ")");
        }
        return *head_index;
    }
    if (head_index && *head_index != 0) throw ConfigError("single-head model only has head 0");
    return 0;
}

} // namespace

ModelSpec ModelSpec::mlp(std::size_t input_dim, const std::vector<std::size_t>& hidden, std::size_t outputs,
                         HeadSetting setting, std::size_t heads) {
    ModelSpec m;
    m.input_shape = {input_dim};
    std::size_t prev = input_dim;
    std::uint64_t seed = 1;
    for (auto h : hidden) {
        m.feature_layers.push_back(LayerSpec::dense(prev, h, seed++));
        m.feature_layers.push_back(LayerSpec::relu());
        prev = h;
    }
    m.head_layers.push_back(LayerSpec::dense(prev, outputs, seed));
    m.head_setting = setting;
    m.num_heads = setting == HeadSetting::Multi ? heads : 1;
    return m;
}

Shape ModelSpec::feature_shape() const {
    Shape s = input_shape;
    for (const auto& l : feature_layers) s = layer_output_shape(l, s);
    return s;
}

std::size_t ModelSpec::num_outputs() const {
    Shape s = feature_shape();
    for (const auto& l : head_layers) s = layer_output_shape(l, s);
    return shape_size(s);
}

void ModelSpec::validate() const {
    if (input_shape.empty() || shape_size(input_shape) == 0) throw ConfigError("model input shape is empty");
    if (head_layers.empty()) throw ConfigError("model has no head layers");
    if (multi_head() && num_heads == 0) throw ConfigError("multi-head model needs at least one head");
    if (!multi_head() && num_heads != 1) throw ConfigError("single-head model must have exactly one head");
    Shape s = feature_shape();
    for (const auto& l : head_layers) s = layer_output_shape(l, s);
    if (s.size() != 1) throw ConfigError("model output must be a flat vector, got " + shape_to_string(s));
}

std::string feature_param_name(std::size_t layer, const std::string& field) {
    return "features." + two_digits(layer) + "." + field;
}

std::string head_prefix(const ModelSpec& model, std::size_t head) {
    if (!model.multi_head()) return "head.";
    return "head" + two_digits(head) + ".";
}

ParameterSet init_params(const ModelSpec& model, std::uint64_t seed) {
    model.validate();
    ParameterSet params;
    for (std::size_t i = 0; i < model.feature_layers.size(); ++i) {
        const auto& l = model.feature_layers[i];
        init_layer(params, l, "features." + two_digits(i) + ".", make_rng(seed, {1, i, l.init_seed}));
    }
    for (std::size_t h = 0; h < model.num_heads; ++h) {
        for (std::size_t j = 0; j < model.head_layers.size(); ++j) {
            const auto& l = model.head_layers[j];
            init_layer(params, l, head_layer_prefix(model, h, j), make_rng(seed, {2, h, j, l.init_seed}));
        }
    }
    return params;
}

ForwardTrace forward_trace(const ModelSpec& model, const ParameterSet& params, const Tensor& batch,
                           std::optional<std::size_t> head_index) {
    ForwardTrace trace;
    trace.head = resolve_head(model, head_index);
    if (batch.rank() != model.input_shape.size() + 1 ||
        !std::equal(model.input_shape.begin(), model.input_shape.end(), batch.shape.begin() + 1)) {
        throw AlignmentError("batch shape " + shape_to_string(batch.shape) + " does not match model input " +
                             shape_to_string(model.input_shape));
    }
    if (batch.rows() == 0) throw DataError("empty batch");
    const std::size_t nf = model.feature_layers.size(), nh = model.head_layers.size();
    trace.pool_argmax.resize(nf + nh);
    trace.feature_inputs.reserve(nf);
    Tensor x = batch;
    for (std::size_t i = 0; i < nf; ++i) {
        Tensor y = layer_forward(model.feature_layers[i], "features." + two_digits(i) + ".", params, x,
                                 trace.pool_argmax[i]);
        trace.feature_inputs.push_back(std::move(x));
        x = std::move(y);
    }
    trace.features = x;
    trace.head_inputs.reserve(nh);
    for (std::size_t j = 0; j < nh; ++j) {
        Tensor y = layer_forward(model.head_layers[j], head_layer_prefix(model, trace.head, j), params, x,
                                 trace.pool_argmax[nf + j]);
        trace.head_inputs.push_back(std::move(x));
        x = std::move(y);
    }
    Shape logits_shape{x.rows(), x.row_size()};
    trace.logits = Tensor(std::move(logits_shape), std::move(x.data));
    return trace;
}

Tensor forward(const ModelSpec& model, const ParameterSet& params, const Tensor& batch,
               std::optional<std::size_t> head_index) {
    return forward_trace(model, params, batch, head_index).logits;
}

Tensor extract_features(const ModelSpec& model, const ParameterSet& params, const Tensor& batch) {
    Tensor x = batch;
    std::vector<std::size_t> scratch;
    for (std::size_t i = 0; i < model.feature_layers.size(); ++i) {
        x = layer_forward(model.feature_layers[i], "features." + two_digits(i) + ".", params, x, scratch);
    }
    return x;
}

ParameterSet backward(const ModelSpec& model, const ParameterSet& params, const ForwardTrace& trace,
                      const Tensor& d_logits, const Tensor* d_features) {
    if (d_logits.shape != trace.logits.shape) {
        throw AlignmentError("d_logits shape " + shape_to_string(d_logits.shape) + " does not match logits " +
                             shape_to_string(trace.logits.shape));
    }
    ParameterSet grad = params.zeros_like();
    const std::size_t nf = model.feature_layers.size(), nh = model.head_layers.size();
    const std::size_t batch = trace.logits.rows();

    Shape out_shape = model.feature_shape();
    for (const auto& l : model.head_layers) out_shape = layer_output_shape(l, out_shape);
    Tensor dy(with_batch(batch, out_shape), d_logits.data);
    for (std::size_t j = nh; j-- > 0;) {
        dy = layer_backward(model.head_layers[j], head_layer_prefix(model, trace.head, j), params, grad,
                            trace.head_inputs[j], trace.pool_argmax[nf + j], dy, true);
    }
    if (d_features) {
        if (d_features->size() != dy.size()) throw AlignmentError("d_features does not match feature shape");
        for (std::size_t i = 0; i < dy.size(); ++i) dy[i] += (*d_features)[i];
    }
    for (std::size_t i = nf; i-- > 0;) {
        dy = layer_backward(model.feature_layers[i], "features." + two_digits(i) + ".", params, grad,
                            trace.feature_inputs[i], trace.pool_argmax[i], dy, i > 0);
    }
    return grad;
}

LossAndGrad loss_and_grad(const ModelSpec& model, const ParameterSet& params, const Tensor& batch,
                          const Targets& targets, const LossKind& loss, std::optional<std::size_t> head_index) {
    if (batch.rows() == 0) throw DataError("empty batch");
    auto trace = forward_trace(model, params, batch, head_index);
    auto l = task_loss(trace.logits, targets, loss);
    if (!std::isfinite(l.loss)) throw NumericalError("non-finite task loss");
    return {l.loss, backward(model, params, trace, l.d_logits)};
}

std::pair<ParameterSet, ParameterSet> split_params(const ModelSpec& model, const ParameterSet& params) {
    ParameterSet reference = init_params(model, 0);
    require_aligned(params, reference, "split_params");
    ParameterSet features, heads;
    for (const auto& [name, t] : params) {
        if (name.starts_with("features.")) {
            features.insert(name, t);
        } else {
            heads.insert(name, t);
        }
    }
    return {std::move(features), std::move(heads)};
}

ParameterSet replace_head(const ModelSpec& model, const ParameterSet& params, std::size_t head,
                          std::uint64_t new_seed) {
    if (!model.multi_head()) throw ConfigError("replace_head requires a multi-head model");
    resolve_head(model, head);
    ParameterSet out = params;
    for (std::size_t j = 0; j < model.head_layers.size(); ++j) {
        const auto& l = model.head_layers[j];
        ParameterSet fresh;
        const std::string prefix = head_layer_prefix(model, head, j);
        init_layer(fresh, l, prefix, make_rng(new_seed, {2, head, j, l.init_seed}));
        for (auto& [name, t] : fresh) {
            if (!out.contains(name) || out.at(name).shape != t.shape) {
                throw AlignmentError("replace_head: parameters not aligned with model at '" + name + "'");
            }
            out.at(name) = std::move(t);
        }
    }
    return out;
}

} // namespace itl
