#include "dabmod/neural_core.hpp"

#include "dabmod/errors.hpp"

#include <fmt/core.h>

#include <algorithm>
#include <cmath>
#include <random>

namespace dabmod::nn {

namespace {

void require_shape(const Matrix& m, Eigen::Index rows, Eigen::Index cols, const char* what) {
    if (m.rows() != rows || m.cols() != cols) {
        throw DimensionError(fmt::format("{} is {}x{}, expected {}x{}", what, m.rows(), m.cols(), rows, cols));
    }
}

void require_size(const Vector& v, Eigen::Index n, const char* what) {
    if (v.size() != n) throw DimensionError(fmt::format("{} has length {}, expected {}", what, v.size(), n));
}

double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

template <typename Fn>
void for_each_block(NetworkParams& net, Fn&& fn) {
    for (auto& layer : net.layers) {
        for (auto& m : layer.w) fn(m.data(), m.size());
        for (auto& m : layer.u) fn(m.data(), m.size());
        for (auto& v : layer.gain) fn(v.data(), v.size());
        for (auto& v : layer.bias) fn(v.data(), v.size());
    }
    fn(net.head.w.data(), net.head.w.size());
    fn(net.head.b.data(), net.head.b.size());
}

template <typename Fn>
void for_each_block(const NetworkParams& net, Fn&& fn) {
    for (const auto& layer : net.layers) {
        for (const auto& m : layer.w) fn(m.data(), m.size());
        for (const auto& m : layer.u) fn(m.data(), m.size());
        for (const auto& v : layer.gain) fn(v.data(), v.size());
        for (const auto& v : layer.bias) fn(v.data(), v.size());
    }
    fn(net.head.w.data(), net.head.w.size());
    fn(net.head.b.data(), net.head.b.size());
}

/// LN (or bias-only) normalization of one pre-activation column. Returns
/// 1/sigma, or 1 when layer norm is disabled; `xhat` receives the normalized
/// values and `post` the block output.
template <typename In, typename Out>
double normalize(const In& a, const Vector& gain, const Vector& bias, bool use_ln, Out&& xhat, Out&& post) {
    if (!use_ln) {
        xhat = a;
        post = a + bias;
        return 1.0;
    }
    const double mean = a.mean();
    const double var = (a.array() - mean).square().mean();
    const double inv = 1.0 / std::sqrt(var + kLayerNormEps);
    xhat = (a.array() - mean) * inv;
    post = gain.cwiseProduct(xhat) + bias;
    return inv;
}

/// Backward through one LN block. Accumulates gain/bias gradients and
/// returns the gradient with respect to the raw pre-activation.
Vector normalize_backward(const Vector& dpost, const Eigen::Ref<const Vector>& xhat, double inv,
                          const Vector& gain, bool use_ln, Vector& dgain, Vector& dbias) {
    dbias += dpost;
    if (!use_ln) return dpost;
    dgain += dpost.cwiseProduct(xhat);
    const Vector dxhat = dpost.cwiseProduct(gain);
    const double m1 = dxhat.mean();
    const double m2 = dxhat.cwiseProduct(xhat).mean();
    return inv * (dxhat.array() - m1 - xhat.array() * m2).matrix();
}

}  // namespace

// =============================================================================
// Parameters
// =============================================================================

LnGruLayerParams::LnGruLayerParams(std::size_t input, std::size_t hidden, bool use_layer_norm)
    : input_dim(input), hidden_dim(hidden), layer_norm(use_layer_norm) {
    const auto in = static_cast<Eigen::Index>(input);
    const auto hid = static_cast<Eigen::Index>(hidden);
    for (std::size_t g = 0; g < 3; ++g) {
        w[g] = Matrix::Zero(hid, in);
        u[g] = Matrix::Zero(hid, hid);
        gain[g] = Vector::Ones(hid);
        bias[g] = Vector::Zero(hid);
    }
}

std::size_t LnGruLayerParams::param_count() const {
    return 3 * (hidden_dim * input_dim + hidden_dim * hidden_dim + 2 * hidden_dim);
}

void LnGruLayerParams::validate() const {
    if (input_dim == 0 || hidden_dim == 0) throw DimensionError("GRU layer dimensions must be positive");
    if (layer_norm && hidden_dim < 2) throw DimensionError("layer norm needs a hidden size of at least 2");
    const auto in = static_cast<Eigen::Index>(input_dim);
    const auto hid = static_cast<Eigen::Index>(hidden_dim);
    for (std::size_t g = 0; g < 3; ++g) {
        require_shape(w[g], hid, in, "GRU input weights");
        require_shape(u[g], hid, hid, "GRU recurrent weights");
        require_size(gain[g], hid, "LN gain");
        require_size(bias[g], hid, "LN bias");
    }
}

std::size_t NetworkParams::input_dim() const {
    return layers.empty() ? 0 : layers.front().input_dim;
}

std::size_t NetworkParams::output_dim() const {
    return static_cast<std::size_t>(head.w.rows());
}

std::size_t NetworkParams::param_count() const {
    std::size_t n = 0;
    for (const auto& l : layers) n += l.param_count();
    return n + static_cast<std::size_t>(head.w.size() + head.b.size());
}

Vector NetworkParams::flatten() const {
    Vector flat(static_cast<Eigen::Index>(param_count()));
    Eigen::Index pos = 0;
    for_each_block(*this, [&](const double* data, Eigen::Index n) {
        flat.segment(pos, n) = Eigen::Map<const Vector>(data, n);
        pos += n;
    });
    return flat;
}

void NetworkParams::unflatten(const Vector& flat) {
    if (flat.size() != static_cast<Eigen::Index>(param_count())) {
        throw DimensionError(
            fmt::format("flat parameter vector has length {}, expected {}", flat.size(), param_count()));
    }
    Eigen::Index pos = 0;
    for_each_block(*this, [&](double* data, Eigen::Index n) {
        Eigen::Map<Vector>(data, n) = flat.segment(pos, n);
        pos += n;
    });
}

NetworkParams NetworkParams::zeros_like() const {
    NetworkParams z = *this;
    for_each_block(z, [](double* data, Eigen::Index n) { Eigen::Map<Vector>(data, n).setZero(); });
    return z;
}

void NetworkParams::validate() const {
    if (layers.empty()) throw DimensionError("network needs at least one recurrent layer");
    for (std::size_t i = 0; i < layers.size(); ++i) {
        layers[i].validate();
        if (i > 0 && layers[i].input_dim != layers[i - 1].hidden_dim) {
            throw DimensionError(fmt::format("layer {} input {} does not match previous hidden {}", i,
                                             layers[i].input_dim, layers[i - 1].hidden_dim));
        }
    }
    if (head.w.rows() == 0) throw DimensionError("dense head has no outputs");
    require_shape(head.w, head.w.rows(), static_cast<Eigen::Index>(layers.back().hidden_dim), "dense head weights");
    require_size(head.b, head.w.rows(), "dense head bias");
}

NetworkParams init_network(std::size_t input_dim, const std::vector<std::size_t>& hidden_dims,
                           std::size_t output_dim, std::uint64_t seed, bool layer_norm) {
    if (hidden_dims.empty()) throw DimensionError("network needs at least one recurrent layer");
    if (input_dim == 0 || output_dim == 0) throw DimensionError("network dimensions must be positive");
    std::mt19937_64 rng(seed);
    auto fill = [&](Matrix& m, std::size_t fan_in) {
        const double a = 1.0 / std::sqrt(static_cast<double>(fan_in));
        std::uniform_real_distribution<double> dist(-a, a);
        for (Eigen::Index c = 0; c < m.cols(); ++c)
            for (Eigen::Index r = 0; r < m.rows(); ++r) m(r, c) = dist(rng);
    };

    NetworkParams net;
    std::size_t in = input_dim;
    for (const std::size_t hid : hidden_dims) {
        LnGruLayerParams layer(in, hid, layer_norm);
        for (std::size_t g = 0; g < 3; ++g) {
            fill(layer.w[g], in);
            fill(layer.u[g], hid);
        }
        net.layers.push_back(std::move(layer));
        in = hid;
    }
    net.head.w = Matrix(static_cast<Eigen::Index>(output_dim), static_cast<Eigen::Index>(in));
    fill(net.head.w, in);
    net.head.b = Vector::Zero(static_cast<Eigen::Index>(output_dim));
    net.validate();
    return net;
}

// =============================================================================
// Forward
// =============================================================================

Vector layer_norm(const Vector& x, const Vector& gain, const Vector& bias, double eps) {
    if (x.size() < 2) throw DimensionError("layer norm needs at least two features");
    require_size(gain, x.size(), "LN gain");
    require_size(bias, x.size(), "LN bias");
    const double mean = x.mean();
    const double var = (x.array() - mean).square().mean();
    return gain.cwiseProduct(((x.array() - mean) / std::sqrt(var + eps)).matrix()) + bias;
}

Vector ln_gru_cell_forward(const LnGruLayerParams& p, const Vector& x, const Vector& h) {
    p.validate();
    require_size(x, static_cast<Eigen::Index>(p.input_dim), "GRU input");
    require_size(h, static_cast<Eigen::Index>(p.hidden_dim), "GRU state");
    auto block = [&](std::size_t g, const Vector& a) {
        return p.layer_norm ? layer_norm(a, p.gain[g], p.bias[g]) : Vector(a + p.bias[g]);
    };
    const Vector z = block(kUpdate, p.w[kUpdate] * x + p.u[kUpdate] * h).unaryExpr(&sigmoid);
    const Vector r = block(kReset, p.w[kReset] * x + p.u[kReset] * h).unaryExpr(&sigmoid);
    const Vector rh = r.cwiseProduct(h);
    const Vector c = block(kCandidate, p.w[kCandidate] * x + p.u[kCandidate] * rh).array().tanh().matrix();
    return (1.0 - z.array()).matrix().cwiseProduct(c) + z.cwiseProduct(h);
}

ForwardResult sequence_forward(const NetworkParams& net, const Matrix& inputs, const std::vector<Vector>& h0) {
    net.validate();
    if (inputs.rows() != static_cast<Eigen::Index>(net.input_dim())) {
        throw DimensionError(fmt::format("input sequence has {} features, network expects {}", inputs.rows(),
                                         net.input_dim()));
    }
    if (!h0.empty() && h0.size() != net.layers.size()) {
        throw DimensionError("initial state must hold one vector per layer");
    }
    const Eigen::Index steps = inputs.cols();

    ForwardResult result;
    result.cache.layers.resize(net.layers.size());
    const Matrix* x = &inputs;
    for (std::size_t li = 0; li < net.layers.size(); ++li) {
        const auto& p = net.layers[li];
        auto& lc = result.cache.layers[li];
        const auto hid = static_cast<Eigen::Index>(p.hidden_dim);
        lc.x = *x;
        lc.h_prev.resize(hid, steps);
        lc.h.resize(hid, steps);
        lc.rh.resize(hid, steps);
        std::array<Matrix, 3> wx;
        for (std::size_t g = 0; g < 3; ++g) {
            wx[g].noalias() = p.w[g] * lc.x;
            lc.act[g].resize(hid, steps);
            lc.xhat[g].resize(hid, steps);
            lc.inv_sigma[g].resize(steps);
        }

        Vector h = h0.empty() ? Vector::Zero(hid) : h0[li];
        require_size(h, hid, "initial state");
        Vector a(hid), xh(hid), post(hid);
        for (Eigen::Index t = 0; t < steps; ++t) {
            lc.h_prev.col(t) = h;
            for (const std::size_t g : {std::size_t{kUpdate}, std::size_t{kReset}}) {
                a.noalias() = wx[g].col(t);
                a.noalias() += p.u[g] * h;
                lc.inv_sigma[g](t) = normalize(a, p.gain[g], p.bias[g], p.layer_norm, xh, post);
                lc.xhat[g].col(t) = xh;
                lc.act[g].col(t) = post.unaryExpr(&sigmoid);
            }
            lc.rh.col(t) = lc.act[kReset].col(t).cwiseProduct(h);
            a.noalias() = wx[kCandidate].col(t);
            a.noalias() += p.u[kCandidate] * lc.rh.col(t);
            lc.inv_sigma[kCandidate](t) =
                normalize(a, p.gain[kCandidate], p.bias[kCandidate], p.layer_norm, xh, post);
            lc.xhat[kCandidate].col(t) = xh;
            lc.act[kCandidate].col(t) = post.array().tanh().matrix();

            const auto z = lc.act[kUpdate].col(t).array();
            h = ((1.0 - z) * lc.act[kCandidate].col(t).array() + z * h.array()).matrix();
            lc.h.col(t) = h;
        }
        x = &lc.h;
    }
    result.outputs = net.head.w * result.cache.layers.back().h;
    result.outputs.colwise() += net.head.b;
    return result;
}

// =============================================================================
// Backward
// =============================================================================

NetworkParams sequence_backward(const NetworkParams& net, const SequenceCache& cache, const Matrix& output_grads) {
    if (cache.layers.size() != net.layers.size()) throw DimensionError("cache does not match network depth");
    const Matrix& top = cache.layers.back().h;
    require_shape(output_grads, static_cast<Eigen::Index>(net.output_dim()), top.cols(), "output gradients");

    NetworkParams grads = net.zeros_like();
    grads.head.w.noalias() = output_grads * top.transpose();
    grads.head.b = output_grads.rowwise().sum();
    Matrix dh_seq = net.head.w.transpose() * output_grads;

    for (std::size_t li = net.layers.size(); li-- > 0;) {
        const auto& p = net.layers[li];
        const auto& lc = cache.layers[li];
        auto& gp = grads.layers[li];
        const auto hid = static_cast<Eigen::Index>(p.hidden_dim);
        const Eigen::Index steps = lc.h.cols();

        std::array<Matrix, 3> da;
        for (auto& m : da) m.resize(hid, steps);
        Vector carry = Vector::Zero(hid);
        Vector dh(hid), dpost(hid);
        for (Eigen::Index t = steps; t-- > 0;) {
            dh = dh_seq.col(t) + carry;
            const auto z = lc.act[kUpdate].col(t);
            const auto r = lc.act[kReset].col(t);
            const auto c = lc.act[kCandidate].col(t);
            const auto hp = lc.h_prev.col(t);

            Vector dh_prev = dh.cwiseProduct(z);
            const Vector dz = dh.cwiseProduct(hp - c);
            const Vector dc = dh.cwiseProduct((1.0 - z.array()).matrix());

            dpost = dc.cwiseProduct((1.0 - c.array().square()).matrix());
            da[kCandidate].col(t) =
                normalize_backward(dpost, lc.xhat[kCandidate].col(t), lc.inv_sigma[kCandidate](t),
                                   p.gain[kCandidate], p.layer_norm, gp.gain[kCandidate], gp.bias[kCandidate]);
            const Vector drh = p.u[kCandidate].transpose() * da[kCandidate].col(t);
            const Vector dr = drh.cwiseProduct(hp);
            dh_prev += drh.cwiseProduct(r);

            dpost = dz.cwiseProduct((z.array() * (1.0 - z.array())).matrix());
            da[kUpdate].col(t) = normalize_backward(dpost, lc.xhat[kUpdate].col(t), lc.inv_sigma[kUpdate](t),
                                                    p.gain[kUpdate], p.layer_norm, gp.gain[kUpdate],
                                                    gp.bias[kUpdate]);
            dh_prev.noalias() += p.u[kUpdate].transpose() * da[kUpdate].col(t);

            dpost = dr.cwiseProduct((r.array() * (1.0 - r.array())).matrix());
            da[kReset].col(t) = normalize_backward(dpost, lc.xhat[kReset].col(t), lc.inv_sigma[kReset](t),
                                                   p.gain[kReset], p.layer_norm, gp.gain[kReset],
                                                   gp.bias[kReset]);
            dh_prev.noalias() += p.u[kReset].transpose() * da[kReset].col(t);

            carry = dh_prev;
        }

        gp.u[kUpdate].noalias() = da[kUpdate] * lc.h_prev.transpose();
        gp.u[kReset].noalias() = da[kReset] * lc.h_prev.transpose();
        gp.u[kCandidate].noalias() = da[kCandidate] * lc.rh.transpose();
        Matrix dx = Matrix::Zero(lc.x.rows(), steps);
        for (std::size_t g = 0; g < 3; ++g) {
            gp.w[g].noalias() = da[g] * lc.x.transpose();
            if (li > 0) dx.noalias() += p.w[g].transpose() * da[g];
        }
        dh_seq = std::move(dx);
    }
    return grads;
}

// =============================================================================
// Stepper
// =============================================================================

Stepper::Stepper(const NetworkParams& net) {
    net.validate();
    input_dim_ = static_cast<Eigen::Index>(net.input_dim());
    for (const auto& p : net.layers) {
        Layer l;
        l.hidden = static_cast<Eigen::Index>(p.hidden_dim);
        l.layer_norm = p.layer_norm;
        const Eigen::Index h = l.hidden;
        l.w.resize(3 * h, static_cast<Eigen::Index>(p.input_dim));
        l.u_zr.resize(2 * h, h);
        l.gain.resize(3 * h);
        l.bias.resize(3 * h);
        for (std::size_t g = 0; g < 3; ++g) {
            const auto off = static_cast<Eigen::Index>(g) * h;
            l.w.middleRows(off, h) = p.w[g];
            if (g < 2) l.u_zr.middleRows(off, h) = p.u[g];
            l.gain.segment(off, h) = p.gain[g];
            l.bias.segment(off, h) = p.bias[g];
        }
        l.u_c = p.u[kCandidate];
        l.pre = Vector::Zero(3 * h);
        l.rh = Vector::Zero(h);
        layers_.push_back(std::move(l));
        h_.push_back(Vector::Zero(h));
    }
    head_w_ = net.head.w;
    head_b_ = net.head.b;
    out_ = Vector::Zero(head_w_.rows());
}

void Stepper::reset() {
    for (auto& h : h_) h.setZero();
}

const Vector& Stepper::step(const Vector& x) {
    require_size(x, input_dim_, "stepper input");
    for (std::size_t li = 0; li < layers_.size(); ++li) {
        Layer& l = layers_[li];
        const Vector& in = li == 0 ? x : h_[li - 1];
        Vector& h = h_[li];
        const Eigen::Index n = l.hidden;

        auto finish = [&](Eigen::Index off) {
            auto v = l.pre.segment(off, n);
            if (l.layer_norm) {
                const double mean = v.mean();
                const double var = (v.array() - mean).square().mean();
                const double inv = 1.0 / std::sqrt(var + kLayerNormEps);
                v.array() = (v.array() - mean) * inv * l.gain.segment(off, n).array() + l.bias.segment(off, n).array();
            } else {
                v += l.bias.segment(off, n);
            }
        };

        l.pre.noalias() = l.w * in;
        l.pre.head(2 * n).noalias() += l.u_zr * h;
        finish(0);
        finish(n);
        l.pre.head(2 * n).array() = 1.0 / (1.0 + (-l.pre.head(2 * n).array()).exp());
        l.rh.array() = l.pre.segment(n, n).array() * h.array();
        l.pre.tail(n).noalias() += l.u_c * l.rh;
        finish(2 * n);
        const auto z = l.pre.head(n).array();
        h.array() = (1.0 - z) * l.pre.tail(n).array().tanh() + z * h.array();
    }
    out_.noalias() = head_w_ * h_.back();
    out_ += head_b_;
    return out_;
}

BatchStepper::BatchStepper(const NetworkParams& net, Eigen::Index batch) : batch_(batch) {
    net.validate();
    if (batch < 1) throw DimensionError("batch size must be >= 1");
    input_dim_ = static_cast<Eigen::Index>(net.input_dim());
    for (const auto& p : net.layers) {
        Layer l;
        l.hidden = static_cast<Eigen::Index>(p.hidden_dim);
        l.layer_norm = p.layer_norm;
        const Eigen::Index h = l.hidden;
        l.w.resize(3 * h, static_cast<Eigen::Index>(p.input_dim));
        l.u_zr.resize(2 * h, h);
        l.gain.resize(3 * h);
        l.bias.resize(3 * h);
        for (std::size_t g = 0; g < 3; ++g) {
            const auto off = static_cast<Eigen::Index>(g) * h;
            l.w.middleRows(off, h) = p.w[g];
            if (g < 2) l.u_zr.middleRows(off, h) = p.u[g];
            l.gain.segment(off, h) = p.gain[g];
            l.bias.segment(off, h) = p.bias[g];
        }
        l.u_c = p.u[kCandidate];
        l.pre = Matrix::Zero(3 * h, batch);
        l.rh = Matrix::Zero(h, batch);
        layers_.push_back(std::move(l));
        h_.push_back(Matrix::Zero(h, batch));
    }
    head_w_ = net.head.w;
    head_b_ = net.head.b;
    out_ = Matrix::Zero(head_w_.rows(), batch);
}

void BatchStepper::reset() {
    for (auto& h : h_) h.setZero();
}

const Matrix& BatchStepper::step(const Matrix& x) {
    if (x.rows() != input_dim_ || x.cols() != batch_) {
        throw DimensionError(fmt::format("batch input is {}x{}, expected {}x{}", x.rows(), x.cols(), input_dim_,
                                         batch_));
    }
    for (std::size_t li = 0; li < layers_.size(); ++li) {
        Layer& l = layers_[li];
        const Matrix& in = li == 0 ? x : h_[li - 1];
        Matrix& h = h_[li];
        const Eigen::Index n = l.hidden;
        const double inv_n = 1.0 / static_cast<double>(n);

        auto finish = [&](Eigen::Index off) {
            auto block = l.pre.middleRows(off, n);
            if (l.layer_norm) {
                const Eigen::RowVectorXd mean = block.colwise().sum() * inv_n;
                block.rowwise() -= mean;
                const Eigen::RowVectorXd inv =
                    ((block.array().square().colwise().sum() * inv_n) + kLayerNormEps).rsqrt().matrix();
                block.array().rowwise() *= inv.array();
                block.array().colwise() *= l.gain.segment(off, n).array();
            }
            block.colwise() += l.bias.segment(off, n);
        };

        l.pre.noalias() = l.w * in;
        l.pre.topRows(2 * n).noalias() += l.u_zr * h;
        finish(0);
        finish(n);
        l.pre.topRows(2 * n).array() = 1.0 / (1.0 + (-l.pre.topRows(2 * n).array()).exp());
        l.rh.array() = l.pre.middleRows(n, n).array() * h.array();
        l.pre.bottomRows(n).noalias() += l.u_c * l.rh;
        finish(2 * n);
        const auto z = l.pre.topRows(n).array();
        h.array() = (1.0 - z) * l.pre.bottomRows(n).array().tanh() + z * h.array();
    }
    out_.noalias() = head_w_ * h_.back();
    out_.colwise() += head_b_;
    return out_;
}

// =============================================================================
// Adam and gradient check
// =============================================================================

AdamState::AdamState(std::size_t param_count, double lr)
    : m(Vector::Zero(static_cast<Eigen::Index>(param_count))),
      v(Vector::Zero(static_cast<Eigen::Index>(param_count))),
      learning_rate(lr) {}

void adam_step(NetworkParams& params, const NetworkParams& grads, AdamState& state) {
    Vector theta = params.flatten();
    const Vector g = grads.flatten();
    if (g.size() != theta.size()) throw DimensionError("gradient shape does not match parameters");
    if (state.m.size() == 0) {
        state.m = Vector::Zero(theta.size());
        state.v = Vector::Zero(theta.size());
    }
    if (state.m.size() != theta.size() || state.v.size() != theta.size()) {
        throw DimensionError("Adam state does not match parameter count");
    }
    if (!g.allFinite()) throw ValidationError("non-finite gradient passed to Adam");

    ++state.step;
    const double t = static_cast<double>(state.step);
    state.m = state.beta1 * state.m + (1.0 - state.beta1) * g;
    state.v = state.beta2 * state.v + (1.0 - state.beta2) * g.cwiseAbs2();
    const double c1 = 1.0 - std::pow(state.beta1, t);
    const double c2 = 1.0 - std::pow(state.beta2, t);
    theta.array() -=
        state.learning_rate * (state.m.array() / c1) / ((state.v.array() / c2).sqrt() + state.epsilon);
    params.unflatten(theta);
}

GradCheckReport finite_difference_check(const NetworkParams& net, const LossFunction& loss,
                                        std::size_t probe_count, double eps, double threshold,
                                        std::uint64_t seed) {
    if (!(eps > 0.0)) throw ValidationError("finite-difference step must be positive");
    const Vector base = net.flatten();
    const Vector analytic = loss(net).grad.flatten();
    if (analytic.size() != base.size()) throw DimensionError("loss returned a gradient of the wrong shape");

    GradCheckReport report;
    report.threshold = threshold;
    const auto n = static_cast<std::size_t>(base.size());
    std::vector<std::size_t> indices(n);
    for (std::size_t i = 0; i < n; ++i) indices[i] = i;
    std::mt19937_64 rng(seed);
    std::shuffle(indices.begin(), indices.end(), rng);
    indices.resize(std::min(probe_count, n));

    NetworkParams probe = net;
    Vector theta = base;
    for (const std::size_t idx : indices) {
        const auto i = static_cast<Eigen::Index>(idx);
        theta(i) = base(i) + eps;
        probe.unflatten(theta);
        const double up = loss(probe).loss;
        theta(i) = base(i) - eps;
        probe.unflatten(theta);
        const double down = loss(probe).loss;
        theta(i) = base(i);

        const double numeric = (up - down) / (2.0 * eps);
        const double a = analytic(i);
        const double rel = std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), 1e-8});
        if (report.probes == 0 || rel > report.max_rel_error) {
            report.max_rel_error = rel;
            report.worst_index = idx;
        }
        ++report.probes;
    }
    report.passed = report.max_rel_error <= threshold;
    return report;
}

// =============================================================================
// Checkpoints
// =============================================================================

void to_json(nlohmann::json& j, const NetworkParams& net) {
    nlohmann::json layers = nlohmann::json::array();
    for (const auto& l : net.layers) {
        layers.push_back({{"input_dim", l.input_dim}, {"hidden_dim", l.hidden_dim}, {"layer_norm", l.layer_norm}});
    }
    const Vector flat = net.flatten();
    j = {{"layers", layers},
         {"output_dim", net.output_dim()},
         {"params", std::vector<double>(flat.data(), flat.data() + flat.size())}};
}

void from_json(const nlohmann::json& j, NetworkParams& net) {
    NetworkParams out;
    for (const auto& l : j.at("layers")) {
        out.layers.emplace_back(l.at("input_dim").get<std::size_t>(), l.at("hidden_dim").get<std::size_t>(),
                                l.at("layer_norm").get<bool>());
    }
    if (out.layers.empty()) throw ValidationError("checkpoint has no recurrent layers");
    const auto out_dim = static_cast<Eigen::Index>(j.at("output_dim").get<std::size_t>());
    out.head.w = Matrix::Zero(out_dim, static_cast<Eigen::Index>(out.layers.back().hidden_dim));
    out.head.b = Vector::Zero(out_dim);
    out.validate();
    const auto values = j.at("params").get<std::vector<double>>();
    out.unflatten(Eigen::Map<const Vector>(values.data(), static_cast<Eigen::Index>(values.size())));
    net = std::move(out);
}

void to_json(nlohmann::json& j, const Checkpoint& c) {
    j = {{"network", c.net}, {"seed", c.seed}, {"metadata", c.metadata}};
}

void from_json(const nlohmann::json& j, Checkpoint& c) {
    j.at("network").get_to(c.net);
    j.at("seed").get_to(c.seed);
    c.metadata = j.value("metadata", nlohmann::json::object());
}

}  // namespace dabmod::nn
