#include "surgimap/model.hpp"

#include "surgimap/errors.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <random>

namespace surgimap {

namespace {

constexpr double kLayerNormEps = 1e-5;

template <typename Real>
void layer_norm(const Matrix<Real>& x, const Matrix<Real>& gain, const Matrix<Real>& bias,
                Matrix<Real>& xhat, Matrix<Real>& out, std::vector<Real>& rstd) {
    const auto rows = x.rows();
    const auto cols = x.cols();
    xhat.resize(rows, cols);
    out.resize(rows, cols);
    rstd.resize(static_cast<std::size_t>(rows));
    for (Eigen::Index r = 0; r < rows; ++r) {
        const Real* in = x.data() + r * cols;
        Real mean = 0;
        for (Eigen::Index c = 0; c < cols; ++c) {
            mean += in[c];
        }
        mean /= static_cast<Real>(cols);
        Real var = 0;
        for (Eigen::Index c = 0; c < cols; ++c) {
            Real d = in[c] - mean;
            var += d * d;
        }
        var /= static_cast<Real>(cols);
        Real rs = Real(1) / std::sqrt(var + static_cast<Real>(kLayerNormEps));
        rstd[static_cast<std::size_t>(r)] = rs;
        Real* xh = xhat.data() + r * cols;
        Real* o = out.data() + r * cols;
        for (Eigen::Index c = 0; c < cols; ++c) {
            xh[c] = (in[c] - mean) * rs;
            o[c] = xh[c] * gain(0, c) + bias(0, c);
        }
    }
}

// Returns d(loss)/d(x); accumulates gain and bias gradients.
template <typename Real>
Matrix<Real> layer_norm_backward(const Matrix<Real>& dout, const Matrix<Real>& xhat,
                                 const std::vector<Real>& rstd, const Matrix<Real>& gain,
                                 Matrix<Real>& dgain, Matrix<Real>& dbias) {
    const auto rows = dout.rows();
    const auto cols = dout.cols();
    dgain += (dout.array() * xhat.array()).matrix().colwise().sum();
    dbias += dout.colwise().sum();
    Matrix<Real> dx(rows, cols);
    std::vector<Real> dxhat(static_cast<std::size_t>(cols));
    for (Eigen::Index r = 0; r < rows; ++r) {
        const Real* d = dout.data() + r * cols;
        const Real* xh = xhat.data() + r * cols;
        Real mean_d = 0;
        Real mean_dx = 0;
        for (Eigen::Index c = 0; c < cols; ++c) {
            dxhat[static_cast<std::size_t>(c)] = d[c] * gain(0, c);
            mean_d += dxhat[static_cast<std::size_t>(c)];
            mean_dx += dxhat[static_cast<std::size_t>(c)] * xh[c];
        }
        mean_d /= static_cast<Real>(cols);
        mean_dx /= static_cast<Real>(cols);
        Real rs = rstd[static_cast<std::size_t>(r)];
        Real* out = dx.data() + r * cols;
        for (Eigen::Index c = 0; c < cols; ++c) {
            out[c] = rs * (dxhat[static_cast<std::size_t>(c)] - mean_d - xh[c] * mean_dx);
        }
    }
    return dx;
}

template <typename Real>
void linear(const Matrix<Real>& x, const Matrix<Real>& weight, const Matrix<Real>& bias,
            Matrix<Real>& out) {
    out.noalias() = x * weight;
    out.rowwise() += bias.row(0);
}

template <typename Real>
Real gelu(Real x) {
    return Real(0.5) * x * (Real(1) + std::erf(x * Real(M_SQRT1_2)));
}

template <typename Real>
Real gelu_grad(Real x) {
    const Real cdf = Real(0.5) * (Real(1) + std::erf(x * Real(M_SQRT1_2)));
    const Real pdf = std::exp(Real(-0.5) * x * x) * Real(0.3989422804014327);
    return cdf + x * pdf;
}

template <typename Real>
void require_finite(const Matrix<Real>& m, int layer, const char* stage) {
    if (!m.allFinite()) {
        throw NumericalError(std::string("non-finite activations in ") + stage + " (layer " +
                                 std::to_string(layer) + ")",
                             layer);
    }
}

} // namespace

void ModelConfig::validate() const {
    if (layers < 1) {
        throw ValidationError("model: layers must be >= 1");
    }
    if (heads < 1 || dim < 1 || dim % heads != 0) {
        throw ValidationError("model: dim must be a positive multiple of heads");
    }
    if (instruction_slots < 1 || feature_dim < 1 || max_components < 1) {
        throw ValidationError("model: instruction_slots, feature_dim and max_components must be positive");
    }
    if (vocab_size < 2 || output_size < 1 || output_size > vocab_size) {
        throw ValidationError("model: vocabulary sizes are inconsistent");
    }
}

nlohmann::ordered_json ModelConfig::to_json() const {
    nlohmann::ordered_json j;
    j["layers"] = layers;
    j["heads"] = heads;
    j["dim"] = dim;
    j["instruction_slots"] = instruction_slots;
    j["feature_dim"] = feature_dim;
    j["vocab_size"] = vocab_size;
    j["output_size"] = output_size;
    j["max_components"] = max_components;
    j["task_count"] = task_count;
    return j;
}

ModelConfig ModelConfig::from_json(const nlohmann::json& j) {
    ModelConfig c;
    try {
        c.layers = j.at("layers").get<int>();
        c.heads = j.at("heads").get<int>();
        c.dim = j.at("dim").get<int>();
        c.instruction_slots = j.at("instruction_slots").get<int>();
        c.feature_dim = j.at("feature_dim").get<int>();
        c.vocab_size = j.at("vocab_size").get<int>();
        c.output_size = j.at("output_size").get<int>();
        c.max_components = j.at("max_components").get<int>();
        c.task_count = j.value("task_count", 4);
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("model config: ") + e.what());
    }
    c.validate();
    return c;
}

template <typename Real>
Parameters<Real> Parameters<Real>::zeros(const ModelConfig& config) {
    using M = Matrix<Real>;
    const int d = config.dim;
    Parameters p;
    p.token_embedding = M::Zero(config.vocab_size, d);
    p.position_embedding = M::Zero(config.max_positions(), d);
    if (config.projects_features()) {
        p.feature_weight = M::Zero(config.feature_dim, d);
        p.feature_bias = M::Zero(1, d);
    }
    p.layers.resize(static_cast<std::size_t>(config.layers));
    for (auto& l : p.layers) {
        l.ln1_gain = M::Zero(1, d);
        l.ln1_bias = M::Zero(1, d);
        l.qkv_weight = M::Zero(d, 3 * d);
        l.qkv_bias = M::Zero(1, 3 * d);
        l.out_weight = M::Zero(d, d);
        l.out_bias = M::Zero(1, d);
        l.ln2_gain = M::Zero(1, d);
        l.ln2_bias = M::Zero(1, d);
        l.fc1_weight = M::Zero(d, 4 * d);
        l.fc1_bias = M::Zero(1, 4 * d);
        l.fc2_weight = M::Zero(4 * d, d);
        l.fc2_bias = M::Zero(1, d);
    }
    p.final_gain = M::Zero(1, d);
    p.final_bias = M::Zero(1, d);
    p.head_weight = M::Zero(d, config.output_size);
    p.head_bias = M::Zero(1, config.output_size);
    return p;
}

template <typename Real>
LossValue masked_nll(const Matrix<Real>& logits, std::span<const int> targets,
                     std::span<const std::uint8_t> mask, Matrix<Real>* dlogits, Real scale) {
    const auto rows = logits.rows();
    const auto cols = logits.cols();
    if (static_cast<Eigen::Index>(targets.size()) != rows ||
        static_cast<Eigen::Index>(mask.size()) != rows) {
        throw ValidationError("loss: targets and mask must have one entry per logits row");
    }
    if (dlogits) {
        dlogits->setZero(rows, cols);
    }
    LossValue value;
    double total = 0.0;
    for (Eigen::Index r = 0; r < rows; ++r) {
        if (mask[static_cast<std::size_t>(r)] == 0) {
            continue;
        }
        int t = targets[static_cast<std::size_t>(r)];
        if (t < 0 || t >= cols) {
            throw ValidationError("loss: target " + std::to_string(t) +
                                  " outside the annotation vocabulary");
        }
        const Real* l = logits.data() + r * cols;
        Real mx = *std::max_element(l, l + cols);
        Real sum = 0;
        for (Eigen::Index c = 0; c < cols; ++c) {
            sum += std::exp(l[c] - mx);
        }
        Real lse = mx + std::log(sum);
        total += static_cast<double>(lse - l[t]);
        ++value.tokens;
        if (dlogits) {
            Real* g = dlogits->data() + r * cols;
            for (Eigen::Index c = 0; c < cols; ++c) {
                g[c] = scale * std::exp(l[c] - lse);
            }
            g[t] -= scale;
        }
    }
    value.sum = total;
    value.per_token = value.tokens > 0 ? total / value.tokens : 0.0;
    return value;
}

template <typename Real>
Decoder<Real>::Decoder(const ModelConfig& config, std::uint64_t seed, double init_std)
    : config_(config) {
    config_.validate();
    params_ = Parameters<Real>::zeros(config_);
    grads_ = Parameters<Real>::zeros(config_);
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> normal(0.0, init_std);
    params_.for_each([&](const std::string& name, Matrix<Real>& m) {
        auto ends_with = [&](const char* suffix) {
            std::string s(suffix);
            return name.size() >= s.size() && name.compare(name.size() - s.size(), s.size(), s) == 0;
        };
        if (ends_with("_gain")) {
            m.setOnes();
        } else if (ends_with("_bias")) {
            m.setZero();
        } else {
            for (Eigen::Index i = 0; i < m.size(); ++i) {
                m.data()[i] = static_cast<Real>(normal(rng));
            }
        }
    });
}

template <typename Real>
void Decoder<Real>::zero_grad() {
    grads_.for_each([](const std::string&, Matrix<Real>& m) { m.setZero(); });
}

template <typename Real>
Matrix<Real> Decoder<Real>::build_prefix(std::span<const float> clip,
                                         std::span<const TokenId> instruction) const {
    const int d = config_.dim;
    const int m = config_.instruction_slots;
    if (static_cast<int>(instruction.size()) != m) {
        throw ValidationError("prefix: instruction must have exactly " + std::to_string(m) + " slots");
    }
    if (static_cast<int>(clip.size()) != config_.feature_dim) {
        throw ValidationError("prefix: clip embedding has dim " + std::to_string(clip.size()) +
                              ", model expects " + std::to_string(config_.feature_dim));
    }
    Matrix<Real> rows(m + 1, d);
    Eigen::Map<const Eigen::Matrix<float, 1, Eigen::Dynamic>> e(clip.data(),
                                                                static_cast<Eigen::Index>(clip.size()));
    if (config_.projects_features()) {
        rows.row(0) = e.template cast<Real>() * params_.feature_weight + params_.feature_bias;
    } else {
        rows.row(0) = e.template cast<Real>();
    }
    for (int i = 0; i < m; ++i) {
        auto id = instruction[static_cast<std::size_t>(i)];
        if (id < 0 || id >= config_.vocab_size) {
            throw ValidationError("prefix: token id out of range");
        }
        rows.row(i + 1) = params_.token_embedding.row(id);
    }
    rows += params_.position_embedding.topRows(m + 1);
    return rows;
}

template <typename Real>
ForwardCache<Real> Decoder<Real>::forward(std::span<const Sequence> batch) const {
    const int d = config_.dim;
    const int m = config_.instruction_slots;
    const int heads = config_.heads;
    const int hd = d / heads;
    const Real scale = Real(1) / std::sqrt(static_cast<Real>(hd));

    ForwardCache<Real> c;
    c.offsets.reserve(batch.size() + 1);
    c.offsets.push_back(0);
    for (const auto& s : batch) {
        if (static_cast<int>(s.components.size()) > config_.max_components) {
            throw ValidationError("forward: sequence has more than S_max component tokens");
        }
        const auto n = static_cast<std::size_t>(s.length());
        if (s.targets.size() != n || s.mask.size() != n) {
            throw ValidationError("forward: targets and mask must cover every position");
        }
        c.offsets.push_back(c.offsets.back() + s.length());
    }
    const int rows = c.offsets.back();
    const auto batch_size = static_cast<Eigen::Index>(batch.size());

    Matrix<Real> x(rows, d);
    c.row_token.resize(static_cast<std::size_t>(rows));
    c.row_position.resize(static_cast<std::size_t>(rows));
    c.clips.resize(batch_size, config_.feature_dim);
    c.targets.reserve(static_cast<std::size_t>(rows));
    c.mask.reserve(static_cast<std::size_t>(rows));
    for (std::size_t b = 0; b < batch.size(); ++b) {
        const auto& s = batch[b];
        const int o = c.offsets[b];
        x.middleRows(o, m + 1) = build_prefix(s.clip, s.instruction);
        for (int i = 0; i < config_.feature_dim; ++i) {
            c.clips(static_cast<Eigen::Index>(b), i) = static_cast<Real>(s.clip[static_cast<std::size_t>(i)]);
        }
        c.row_token[static_cast<std::size_t>(o)] = -1;
        for (int p = 0; p < s.length(); ++p) {
            c.row_position[static_cast<std::size_t>(o + p)] = p;
            if (p >= 1 && p <= m) {
                c.row_token[static_cast<std::size_t>(o + p)] = s.instruction[static_cast<std::size_t>(p - 1)];
            }
        }
        for (std::size_t j = 0; j < s.components.size(); ++j) {
            auto id = s.components[j];
            if (id < 0 || id >= config_.vocab_size) {
                throw ValidationError("forward: component token id out of range");
            }
            const int p = m + 1 + static_cast<int>(j);
            x.row(o + p) = params_.token_embedding.row(id) + params_.position_embedding.row(p);
            c.row_token[static_cast<std::size_t>(o + p)] = id;
        }
        c.targets.insert(c.targets.end(), s.targets.begin(), s.targets.end());
        c.mask.insert(c.mask.end(), s.mask.begin(), s.mask.end());
    }
    require_finite(x, -1, "embeddings");

    c.layers.resize(params_.layers.size());
    for (std::size_t l = 0; l < params_.layers.size(); ++l) {
        const auto& p = params_.layers[l];
        auto& lc = c.layers[l];
        lc.input = x;
        layer_norm(x, p.ln1_gain, p.ln1_bias, lc.ln1_xhat, lc.ln1_out, lc.ln1_rstd);
        linear(lc.ln1_out, p.qkv_weight, p.qkv_bias, lc.qkv);

        lc.attention = Matrix<Real>::Zero(rows, d);
        lc.probs.assign(batch.size() * static_cast<std::size_t>(heads), {});
        const Real* qkv = lc.qkv.data();
        const int stride = 3 * d;
        for (std::size_t b = 0; b < batch.size(); ++b) {
            const int o = c.offsets[b];
            const int n = c.offsets[b + 1] - o;
            for (int h = 0; h < heads; ++h) {
                auto& probs = lc.probs[b * static_cast<std::size_t>(heads) + static_cast<std::size_t>(h)];
                probs = Matrix<Real>::Zero(n, n);
                for (int i = 0; i < n; ++i) {
                    // Prefix rows see the whole prefix; component rows also see
                    // earlier components and themselves.
                    const int last = std::max(m, i);
                    const Real* q = qkv + (o + i) * stride + h * hd;
                    Real mx = -std::numeric_limits<Real>::infinity();
                    for (int t = 0; t <= last; ++t) {
                        const Real* k = qkv + (o + t) * stride + d + h * hd;
                        Real s = 0;
                        for (int e = 0; e < hd; ++e) {
                            s += q[e] * k[e];
                        }
                        s *= scale;
                        probs(i, t) = s;
                        mx = std::max(mx, s);
                    }
                    Real sum = 0;
                    for (int t = 0; t <= last; ++t) {
                        probs(i, t) = std::exp(probs(i, t) - mx);
                        sum += probs(i, t);
                    }
                    Real* out = lc.attention.data() + (o + i) * d + h * hd;
                    for (int t = 0; t <= last; ++t) {
                        probs(i, t) /= sum;
                        const Real* v = qkv + (o + t) * stride + 2 * d + h * hd;
                        for (int e = 0; e < hd; ++e) {
                            out[e] += probs(i, t) * v[e];
                        }
                    }
                }
            }
        }

        Matrix<Real> projected;
        linear(lc.attention, p.out_weight, p.out_bias, projected);
        lc.hidden = lc.input + projected;
        layer_norm(lc.hidden, p.ln2_gain, p.ln2_bias, lc.ln2_xhat, lc.ln2_out, lc.ln2_rstd);
        linear(lc.ln2_out, p.fc1_weight, p.fc1_bias, lc.fc1_pre);
        lc.fc1_act = lc.fc1_pre.unaryExpr([](Real v) { return gelu(v); });
        Matrix<Real> ffn;
        linear(lc.fc1_act, p.fc2_weight, p.fc2_bias, ffn);
        x = lc.hidden + ffn;
        require_finite(x, static_cast<int>(l), "decoder layer");
    }

    c.final_input = x;
    layer_norm(x, params_.final_gain, params_.final_bias, c.final_xhat, c.final_out, c.final_rstd);
    linear(c.final_out, params_.head_weight, params_.head_bias, c.logits);
    require_finite(c.logits, config_.layers, "output head");
    return c;
}

template <typename Real>
LossValue Decoder<Real>::loss(const ForwardCache<Real>& cache) const {
    return masked_nll<Real>(cache.logits, cache.targets, cache.mask);
}

template <typename Real>
LossValue Decoder<Real>::backward(const ForwardCache<Real>& cache, Real scale) {
    if (cache.empty()) {
        throw Error("backward: missing forward cache");
    }
    Matrix<Real> dlogits;
    auto value = masked_nll<Real>(cache.logits, cache.targets, cache.mask, &dlogits, scale);
    backward_from_logits(cache, dlogits);
    return value;
}

template <typename Real>
void Decoder<Real>::backward_from_logits(const ForwardCache<Real>& cache, const Matrix<Real>& dlogits) {
    if (cache.empty() || cache.layers.size() != params_.layers.size()) {
        throw Error("backward: missing forward cache");
    }
    if (dlogits.rows() != cache.logits.rows() || dlogits.cols() != cache.logits.cols()) {
        throw ValidationError("backward: logits gradient shape mismatch");
    }
    const int d = config_.dim;
    const int m = config_.instruction_slots;
    const int heads = config_.heads;
    const int hd = d / heads;
    const Real scale = Real(1) / std::sqrt(static_cast<Real>(hd));
    const int rows = cache.offsets.back();

    auto& g = grads_;
    g.head_weight.noalias() += cache.final_out.transpose() * dlogits;
    g.head_bias += dlogits.colwise().sum();
    Matrix<Real> dx = dlogits * params_.head_weight.transpose();
    dx = layer_norm_backward(dx, cache.final_xhat, cache.final_rstd, params_.final_gain,
                             g.final_gain, g.final_bias);

    for (std::size_t li = params_.layers.size(); li-- > 0;) {
        const auto& p = params_.layers[li];
        auto& gl = g.layers[li];
        const auto& lc = cache.layers[li];

        // Feed-forward block: out = hidden + fc2(gelu(fc1(ln2(hidden)))).
        Matrix<Real> dhidden = dx;
        gl.fc2_weight.noalias() += lc.fc1_act.transpose() * dx;
        gl.fc2_bias += dx.colwise().sum();
        Matrix<Real> dpre = dx * p.fc2_weight.transpose();
        dpre.array() *= lc.fc1_pre.unaryExpr([](Real v) { return gelu_grad(v); }).array();
        gl.fc1_weight.noalias() += lc.ln2_out.transpose() * dpre;
        gl.fc1_bias += dpre.colwise().sum();
        Matrix<Real> dln2 = dpre * p.fc1_weight.transpose();
        dhidden += layer_norm_backward(dln2, lc.ln2_xhat, lc.ln2_rstd, p.ln2_gain, gl.ln2_gain,
                                       gl.ln2_bias);

        // Attention block: hidden = input + out_proj(attention(ln1(input))).
        Matrix<Real> dinput = dhidden;
        gl.out_weight.noalias() += lc.attention.transpose() * dhidden;
        gl.out_bias += dhidden.colwise().sum();
        Matrix<Real> datt = dhidden * p.out_weight.transpose();

        Matrix<Real> dqkv = Matrix<Real>::Zero(rows, 3 * d);
        const int stride = 3 * d;
        const Real* qkv = lc.qkv.data();
        Real* dq_base = dqkv.data();
        std::vector<Real> dprob;
        for (std::size_t b = 0; b + 1 < cache.offsets.size(); ++b) {
            const int o = cache.offsets[b];
            const int n = cache.offsets[b + 1] - o;
            for (int h = 0; h < heads; ++h) {
                const auto& probs = lc.probs[b * static_cast<std::size_t>(heads) + static_cast<std::size_t>(h)];
                for (int i = 0; i < n; ++i) {
                    const int last = std::max(m, i);
                    const Real* dout = datt.data() + (o + i) * d + h * hd;
                    const Real* q = qkv + (o + i) * stride + h * hd;
                    Real* dq = dq_base + (o + i) * stride + h * hd;
                    dprob.assign(static_cast<std::size_t>(last + 1), Real(0));
                    Real weighted = 0;
                    for (int t = 0; t <= last; ++t) {
                        const Real* v = qkv + (o + t) * stride + 2 * d + h * hd;
                        Real s = 0;
                        for (int e = 0; e < hd; ++e) {
                            s += dout[e] * v[e];
                        }
                        dprob[static_cast<std::size_t>(t)] = s;
                        weighted += probs(i, t) * s;
                    }
                    for (int t = 0; t <= last; ++t) {
                        const Real pr = probs(i, t);
                        const Real ds = pr * (dprob[static_cast<std::size_t>(t)] - weighted) * scale;
                        const Real* k = qkv + (o + t) * stride + d + h * hd;
                        Real* dk = dq_base + (o + t) * stride + d + h * hd;
                        Real* dv = dq_base + (o + t) * stride + 2 * d + h * hd;
                        for (int e = 0; e < hd; ++e) {
                            dq[e] += ds * k[e];
                            dk[e] += ds * q[e];
                            dv[e] += pr * dout[e];
                        }
                    }
                }
            }
        }
        gl.qkv_weight.noalias() += lc.ln1_out.transpose() * dqkv;
        gl.qkv_bias += dqkv.colwise().sum();
        Matrix<Real> dln1 = dqkv * p.qkv_weight.transpose();
        dinput += layer_norm_backward(dln1, lc.ln1_xhat, lc.ln1_rstd, p.ln1_gain, gl.ln1_gain,
                                      gl.ln1_bias);
        dx = std::move(dinput);
    }

    for (std::size_t b = 0; b + 1 < cache.offsets.size(); ++b) {
        for (int r = cache.offsets[b]; r < cache.offsets[b + 1]; ++r) {
            const auto ur = static_cast<std::size_t>(r);
            g.position_embedding.row(cache.row_position[ur]) += dx.row(r);
            const int token = cache.row_token[ur];
            if (token >= 0) {
                g.token_embedding.row(token) += dx.row(r);
            } else if (config_.projects_features()) {
                g.feature_weight.noalias() +=
                    cache.clips.row(static_cast<Eigen::Index>(b)).transpose() * dx.row(r);
                g.feature_bias += dx.row(r);
            }
        }
    }
}

template <typename Real>
Matrix<Real> Decoder<Real>::export_representation(const ForwardCache<Real>& cache) const {
    if (cache.empty()) {
        throw Error("export_representation: missing forward cache");
    }
    Matrix<Real> out(cache.batch_size(), config_.dim);
    for (int b = 0; b < cache.batch_size(); ++b) {
        const int o = cache.offsets[static_cast<std::size_t>(b)];
        const int n = cache.offsets[static_cast<std::size_t>(b) + 1] - o;
        out.row(b) = cache.final_input.middleRows(o, n).colwise().sum() / static_cast<Real>(n);
    }
    return out;
}

template struct Parameters<float>;
template struct Parameters<double>;
template class Decoder<float>;
template class Decoder<double>;
template LossValue masked_nll<float>(const Matrix<float>&, std::span<const int>,
                                     std::span<const std::uint8_t>, Matrix<float>*, float);
template LossValue masked_nll<double>(const Matrix<double>&, std::span<const int>,
                                      std::span<const std::uint8_t>, Matrix<double>*, double);

} // namespace surgimap
