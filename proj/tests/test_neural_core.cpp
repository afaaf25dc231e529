#include "dabmod/errors.hpp"
#include "dabmod/neural_core.hpp"

#include <catch_amalgamated.hpp>

#include <cmath>
#include <random>

using namespace dabmod;
using namespace dabmod::nn;
using Catch::Matchers::WithinAbs;
using Catch::Matchers::WithinRel;

namespace {

Matrix random_matrix(std::mt19937_64& rng, Eigen::Index rows, Eigen::Index cols, double scale = 1.0) {
    std::normal_distribution<double> n(0.0, scale);
    Matrix m(rows, cols);
    for (Eigen::Index c = 0; c < cols; ++c)
        for (Eigen::Index r = 0; r < rows; ++r) m(r, c) = n(rng);
    return m;
}

/// Perturbs every parameter (gains and biases included) so no gradient is
/// trivially zero. Hidden sizes start at 3: layer norm over two features
/// always yields +/-gain, so gradients into such a block are eps-sized and
/// central differences cannot resolve them.
NetworkParams random_small_net(std::mt19937_64& rng, bool layer_norm = true) {
    std::uniform_int_distribution<std::size_t> dim(2, 4);
    std::uniform_int_distribution<std::size_t> hidden_dim(3, 4);
    std::uniform_int_distribution<std::size_t> depth(1, 2);
    std::vector<std::size_t> hidden;
    const std::size_t layers = depth(rng);
    for (std::size_t i = 0; i < layers; ++i) hidden.push_back(hidden_dim(rng));
    NetworkParams net = init_network(dim(rng), hidden, dim(rng), rng(), layer_norm);
    Vector flat = net.flatten();
    std::normal_distribution<double> n(0.0, 0.3);
    for (Eigen::Index i = 0; i < flat.size(); ++i) flat(i) += n(rng);
    net.unflatten(flat);
    return net;
}

/// 0.5 * sum of squared errors against a fixed target sequence.
LossFunction squared_error(const Matrix& inputs, const Matrix& targets) {
    return [inputs, targets](const NetworkParams& p) {
        auto fwd = sequence_forward(p, inputs);
        const Matrix diff = fwd.outputs - targets;
        return LossAndGrad{0.5 * diff.squaredNorm(), sequence_backward(p, fwd.cache, diff)};
    };
}

/// Reference forward that composes single-cell updates.
Matrix naive_forward(const NetworkParams& net, const Matrix& inputs) {
    std::vector<Vector> h;
    for (const auto& l : net.layers) h.push_back(Vector::Zero(static_cast<Eigen::Index>(l.hidden_dim)));
    Matrix out(net.head.w.rows(), inputs.cols());
    for (Eigen::Index t = 0; t < inputs.cols(); ++t) {
        Vector x = inputs.col(t);
        for (std::size_t li = 0; li < net.layers.size(); ++li) {
            h[li] = ln_gru_cell_forward(net.layers[li], x, h[li]);
            x = h[li];
        }
        out.col(t) = net.head.w * x + net.head.b;
    }
    return out;
}

}  // namespace

// =============================================================================
// layer_norm
// =============================================================================

TEST_CASE("layer_norm of a constant vector is zero", "[nn][layer_norm]") {
    const Vector x = Vector::Constant(4, 3.0);
    const Vector y = layer_norm(x, Vector::Ones(4), Vector::Zero(4));
    CHECK(y.cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("layer_norm preserves a symmetric unit pair", "[nn][layer_norm]") {
    Vector x(2);
    x << 1.0, -1.0;
    const Vector y = layer_norm(x, Vector::Ones(2), Vector::Zero(2), 1e-15);
    CHECK_THAT(y(0), WithinAbs(1.0, 1e-12));
    CHECK_THAT(y(1), WithinAbs(-1.0, 1e-12));
}

TEST_CASE("layer_norm with zero gain returns the bias", "[nn][layer_norm]") {
    std::mt19937_64 rng(3);
    const Vector x = random_matrix(rng, 5, 1);
    const Vector b = random_matrix(rng, 5, 1);
    CHECK(layer_norm(x, Vector::Zero(5), b) == b);
}

TEST_CASE("layer_norm rejects short or mismatched inputs", "[nn][layer_norm]") {
    CHECK_THROWS_AS(layer_norm(Vector::Ones(1), Vector::Ones(1), Vector::Zero(1)), DimensionError);
    CHECK_THROWS_AS(layer_norm(Vector::Ones(3), Vector::Ones(2), Vector::Zero(3)), DimensionError);
}

// =============================================================================
// Cell and sequence forward
// =============================================================================

TEST_CASE("zero-parameter cell halves the hidden state", "[nn][cell]") {
    LnGruLayerParams p(3, 2);
    for (auto& g : p.gain) g.setZero();
    Vector h(2);
    h << 0.8, -0.4;
    const Vector next = ln_gru_cell_forward(p, Vector::Ones(3), h);
    CHECK_THAT(next(0), WithinAbs(0.4, 1e-15));
    CHECK_THAT(next(1), WithinAbs(-0.2, 1e-15));
}

TEST_CASE("zero state is a fixed point of a zero-weight cell", "[nn][cell]") {
    LnGruLayerParams p(3, 4);
    const Vector next = ln_gru_cell_forward(p, Vector::Zero(3), Vector::Zero(4));
    CHECK(next.cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("cell forward is deterministic and checks dimensions", "[nn][cell]") {
    const NetworkParams net = init_network(3, {4}, 1, 11);
    std::mt19937_64 rng(5);
    const Vector x = random_matrix(rng, 3, 1);
    const Vector h = random_matrix(rng, 4, 1);
    const Vector a = ln_gru_cell_forward(net.layers[0], x, h);
    const Vector b = ln_gru_cell_forward(net.layers[0], x, h);
    CHECK(a == b);
    CHECK_THROWS_AS(ln_gru_cell_forward(net.layers[0], Vector::Zero(2), h), DimensionError);
    CHECK_THROWS_AS(ln_gru_cell_forward(net.layers[0], x, Vector::Zero(3)), DimensionError);
}

TEST_CASE("length-1 sequence equals one cell update through the head", "[nn][forward]") {
    const NetworkParams net = init_network(3, {4}, 2, 7);
    std::mt19937_64 rng(8);
    const Matrix x = random_matrix(rng, 3, 1);
    const auto fwd = sequence_forward(net, x);
    const Vector h = ln_gru_cell_forward(net.layers[0], x.col(0), Vector::Zero(4));
    const Vector expected = net.head.w * h + net.head.b;
    CHECK((fwd.outputs.col(0) - expected).cwiseAbs().maxCoeff() < 1e-14);
}

TEST_CASE("sequence forward matches composed cell updates", "[nn][forward]") {
    std::mt19937_64 rng(21);
    for (int trial = 0; trial < 10; ++trial) {
        const NetworkParams net = random_small_net(rng, trial % 2 == 0);
        const Matrix x = random_matrix(rng, static_cast<Eigen::Index>(net.input_dim()), 12);
        const Matrix a = sequence_forward(net, x).outputs;
        const Matrix b = naive_forward(net, x);
        CHECK((a - b).cwiseAbs().maxCoeff() < 1e-12);
    }
}

TEST_CASE("zero-weight network outputs the dense bias", "[nn][forward]") {
    NetworkParams net = init_network(2, {3, 3}, 2, 1).zeros_like();
    for (auto& l : net.layers)
        for (auto& g : l.gain) g.setOnes();
    net.head.b << 0.25, -1.5;
    std::mt19937_64 rng(2);
    const Matrix out = sequence_forward(net, random_matrix(rng, 2, 9)).outputs;
    for (Eigen::Index t = 0; t < out.cols(); ++t) CHECK(out.col(t) == net.head.b);
}

TEST_CASE("default-initialized network stays finite over 64 steps", "[nn][forward]") {
    const NetworkParams net = init_network(9, {32, 32}, 2, 42);
    std::mt19937_64 rng(9);
    const Matrix out = sequence_forward(net, random_matrix(rng, 9, 64, 3.0)).outputs;
    CHECK(out.allFinite());
}

TEST_CASE("sequence forward rejects bad shapes", "[nn][forward]") {
    const NetworkParams net = init_network(3, {4}, 1, 1);
    CHECK_THROWS_AS(sequence_forward(net, Matrix::Zero(2, 5)), DimensionError);
    CHECK_THROWS_AS(sequence_forward(net, Matrix::Zero(3, 5), {Vector::Zero(4), Vector::Zero(4)}), DimensionError);
}

TEST_CASE("stepper agrees with sequence forward", "[nn][stepper]") {
    std::mt19937_64 rng(33);
    for (int trial = 0; trial < 6; ++trial) {
        const NetworkParams net = random_small_net(rng, trial % 2 == 1);
        const Matrix x = random_matrix(rng, static_cast<Eigen::Index>(net.input_dim()), 16);
        const Matrix ref = sequence_forward(net, x).outputs;
        Stepper stepper(net);
        for (Eigen::Index t = 0; t < x.cols(); ++t) {
            const Vector out = stepper.step(x.col(t));
            CHECK((out - ref.col(t)).cwiseAbs().maxCoeff() < 1e-12);
        }
        stepper.reset();
        CHECK((stepper.step(x.col(0)) - ref.col(0)).cwiseAbs().maxCoeff() < 1e-12);
    }
}

// =============================================================================
// Backward
// =============================================================================

TEST_CASE("zero output gradients give zero parameter gradients", "[nn][backward]") {
    std::mt19937_64 rng(4);
    const NetworkParams net = random_small_net(rng);
    const Matrix x = random_matrix(rng, static_cast<Eigen::Index>(net.input_dim()), 6);
    const auto fwd = sequence_forward(net, x);
    const NetworkParams g = sequence_backward(net, fwd.cache, Matrix::Zero(fwd.outputs.rows(), 6));
    CHECK(g.flatten().cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("single-step head bias gradient equals the output gradient", "[nn][backward]") {
    std::mt19937_64 rng(6);
    const NetworkParams net = random_small_net(rng);
    const auto fwd = sequence_forward(net, random_matrix(rng, static_cast<Eigen::Index>(net.input_dim()), 1));
    const Matrix dy = random_matrix(rng, fwd.outputs.rows(), 1);
    const NetworkParams g = sequence_backward(net, fwd.cache, dy);
    CHECK(g.head.b == Vector(dy.col(0)));
}

TEST_CASE("backward rejects mismatched gradient shapes", "[nn][backward]") {
    const NetworkParams net = init_network(2, {3}, 2, 1);
    const auto fwd = sequence_forward(net, Matrix::Zero(2, 4));
    CHECK_THROWS_AS(sequence_backward(net, fwd.cache, Matrix::Zero(2, 3)), DimensionError);
    CHECK_THROWS_AS(sequence_backward(net, fwd.cache, Matrix::Zero(1, 4)), DimensionError);
}

TEST_CASE("property: BPTT matches central differences on random small nets", "[nn][backward][property]") {
    std::mt19937_64 rng(2024);
    for (int trial = 0; trial < 20; ++trial) {
        const NetworkParams net = random_small_net(rng, trial % 4 != 3);
        const Matrix x = random_matrix(rng, static_cast<Eigen::Index>(net.input_dim()), 8);
        const Matrix y = random_matrix(rng, static_cast<Eigen::Index>(net.output_dim()), 8);
        const auto report = finite_difference_check(net, squared_error(x, y), 60, 1e-5, 1e-4, rng());
        INFO("trial " << trial << " worst index " << report.worst_index);
        CHECK(report.passed);
        CHECK(report.max_rel_error < 1e-4);
    }
}

// =============================================================================
// Gradient check edge cases
// =============================================================================

TEST_CASE("gradient check is exact for a quadratic dense-only loss", "[nn][gradcheck]") {
    // Loss depends only on the dense head, which enters the output linearly.
    std::mt19937_64 rng(12);
    const NetworkParams net = random_small_net(rng);
    const Matrix x = random_matrix(rng, static_cast<Eigen::Index>(net.input_dim()), 5);
    const Matrix h = sequence_forward(net, x).cache.layers.back().h;
    const Matrix y = random_matrix(rng, static_cast<Eigen::Index>(net.output_dim()), 5);
    const LossFunction loss = [&](const NetworkParams& p) {
        const Matrix out = (p.head.w * h).colwise() + p.head.b;
        const Matrix diff = out - y;
        NetworkParams g = p.zeros_like();
        g.head.w = diff * h.transpose();
        g.head.b = diff.rowwise().sum();
        return LossAndGrad{0.5 * diff.squaredNorm(), g};
    };
    // Restrict probes to head parameters by checking the whole vector; recurrent
    // entries have zero gradient on both sides.
    const auto report = finite_difference_check(net, loss, net.param_count(), 1e-5, 1e-4, 1);
    CHECK(report.max_rel_error < 1e-8);
}

TEST_CASE("gradient check with zero probes passes vacuously", "[nn][gradcheck]") {
    const NetworkParams net = init_network(2, {2}, 1, 0);
    const auto report =
        finite_difference_check(net, squared_error(Matrix::Ones(2, 3), Matrix::Zero(1, 3)), 0);
    CHECK(report.passed);
    CHECK(report.max_rel_error == 0.0);
    CHECK(report.probes == 0);
}

// =============================================================================
// Adam
// =============================================================================

TEST_CASE("first Adam step moves each parameter by about the learning rate", "[nn][adam]") {
    const NetworkParams start = init_network(2, {2}, 1, 5);
    NetworkParams params = start;
    NetworkParams grads = start.zeros_like();
    Vector g = Vector::LinSpaced(static_cast<Eigen::Index>(start.param_count()), -2.0, 3.0);
    g(0) = 0.7;
    grads.unflatten(g);
    AdamState state(start.param_count(), 0.01);
    adam_step(params, grads, state);
    CHECK(state.step == 1);
    const Vector delta = params.flatten() - start.flatten();
    for (Eigen::Index i = 0; i < g.size(); ++i) {
        if (std::abs(g(i)) < 1e-6) continue;
        const double expected = -0.01 * g(i) / (std::abs(g(i)) + 1e-8);
        CHECK_THAT(delta(i), WithinAbs(expected, 1e-9));
    }
}

TEST_CASE("Adam leaves parameters unchanged under zero gradients", "[nn][adam]") {
    const NetworkParams start = init_network(2, {3}, 2, 9);
    NetworkParams params = start;
    AdamState state(start.param_count());
    for (int i = 0; i < 50; ++i) adam_step(params, start.zeros_like(), state);
    CHECK(params.flatten() == start.flatten());
    CHECK(state.step == 50);
}

TEST_CASE("Adam trajectories are bit-identical across runs", "[nn][adam]") {
    auto run = [] {
        std::mt19937_64 rng(77);
        NetworkParams net = random_small_net(rng);
        const Matrix x = random_matrix(rng, static_cast<Eigen::Index>(net.input_dim()), 6);
        const Matrix y = random_matrix(rng, static_cast<Eigen::Index>(net.output_dim()), 6);
        const LossFunction loss = squared_error(x, y);
        AdamState state(net.param_count(), 0.01);
        for (int i = 0; i < 20; ++i) adam_step(net, loss(net).grad, state);
        return net.flatten();
    };
    CHECK(run() == run());
}

TEST_CASE("Adam rejects mismatched sizes", "[nn][adam]") {
    NetworkParams a = init_network(2, {2}, 1, 1);
    const NetworkParams b = init_network(2, {3}, 1, 1);
    AdamState state(a.param_count());
    CHECK_THROWS_AS(adam_step(a, b, state), DimensionError);
    AdamState wrong(3);
    CHECK_THROWS_AS(adam_step(a, a.zeros_like(), wrong), DimensionError);
}

TEST_CASE("Adam reduces a training loss", "[nn][adam]") {
    std::mt19937_64 rng(100);
    NetworkParams net = init_network(2, {6}, 1, 3);
    const Matrix x = random_matrix(rng, 2, 10);
    Matrix y(1, 10);
    for (Eigen::Index t = 0; t < 10; ++t) y(0, t) = 0.5 * x(0, t) - 0.2 * x(1, t);
    const LossFunction loss = squared_error(x, y);
    const double initial = loss(net).loss;
    AdamState state(net.param_count(), 0.02);
    for (int i = 0; i < 300; ++i) adam_step(net, loss(net).grad, state);
    CHECK(loss(net).loss < 0.1 * initial);
}

// =============================================================================
// Parameters and checkpoints
// =============================================================================

TEST_CASE("property: flatten and unflatten are an exact bijection", "[nn][params][property]") {
    std::mt19937_64 rng(55);
    for (int trial = 0; trial < 25; ++trial) {
        const NetworkParams net = random_small_net(rng);
        NetworkParams other = net.zeros_like();
        other.unflatten(net.flatten());
        CHECK(other.flatten() == net.flatten());
        CHECK(other.layers[0].w[kReset] == net.layers[0].w[kReset]);
        CHECK(other.head.w == net.head.w);
    }
    NetworkParams net = init_network(2, {2}, 1, 0);
    CHECK_THROWS_AS(net.unflatten(Vector::Zero(3)), DimensionError);
}

TEST_CASE("property: zero-parameter stack halves the state every step", "[nn][params][property]") {
    LnGruLayerParams p(2, 5);
    for (auto& g : p.gain) g.setZero();
    std::mt19937_64 rng(1);
    Vector h = random_matrix(rng, 5, 1);
    const double h0 = h.norm();
    for (int t = 1; t <= 20; ++t) {
        h = ln_gru_cell_forward(p, random_matrix(rng, 2, 1), h);
        CHECK_THAT(h.norm(), WithinRel(h0 / std::pow(2.0, t), 1e-12));
    }
}

TEST_CASE("initialization respects fan-in bounds and unit gains", "[nn][params]") {
    const NetworkParams net = init_network(9, {32, 32}, 2, 123);
    CHECK(net.param_count() == 3 * (32 * 9 + 32 * 32 + 64) + 3 * (32 * 32 + 32 * 32 + 64) + 2 * 32 + 2);
    CHECK(net.layers[0].w[kUpdate].cwiseAbs().maxCoeff() <= 1.0 / 3.0);
    CHECK(net.layers[1].u[kCandidate].cwiseAbs().maxCoeff() <= 1.0 / std::sqrt(32.0));
    CHECK(net.layers[0].gain[kReset] == Vector::Ones(32));
    CHECK(net.layers[1].bias[kUpdate] == Vector::Zero(32));
    CHECK(init_network(9, {32, 32}, 2, 123).flatten() == net.flatten());
    CHECK(init_network(9, {32, 32}, 2, 124).flatten() != net.flatten());
}

TEST_CASE("checkpoint JSON round-trips exactly", "[nn][checkpoint]") {
    std::mt19937_64 rng(8);
    Checkpoint ck{random_small_net(rng, false), 99, {{"epochs", 12}}};
    const nlohmann::json j = ck;
    CHECK(j.at("seed") == 99);
    CHECK(j.at("network").at("layers").at(0).contains("hidden_dim"));
    const Checkpoint back = nlohmann::json::parse(j.dump()).get<Checkpoint>();
    CHECK(back.net.flatten() == ck.net.flatten());
    CHECK(back.net.layers[0].layer_norm == false);
    CHECK(back.seed == 99);
    CHECK(back.metadata.at("epochs") == 12);

    nlohmann::json bad = j;
    bad["network"]["params"].erase(0);
    CHECK_THROWS_AS(bad.get<Checkpoint>(), DimensionError);
}

TEST_CASE("batch stepper matches per-column steppers", "[nn][stepper]") {
    std::mt19937_64 rng(44);
    for (int trial = 0; trial < 4; ++trial) {
        const NetworkParams net = random_small_net(rng, trial % 2 == 0);
        const auto in = static_cast<Eigen::Index>(net.input_dim());
        const Eigen::Index batch = 5;
        BatchStepper bs(net, batch);
        std::vector<Stepper> singles(static_cast<std::size_t>(batch), Stepper(net));
        for (int t = 0; t < 12; ++t) {
            const Matrix x = random_matrix(rng, in, batch);
            const Matrix out = bs.step(x);
            for (Eigen::Index b = 0; b < batch; ++b) {
                const Vector ref = singles[static_cast<std::size_t>(b)].step(x.col(b));
                CHECK((out.col(b) - ref).cwiseAbs().maxCoeff() < 1e-12);
            }
        }
    }
    const NetworkParams net = init_network(2, {3}, 1, 0);
    BatchStepper bs(net, 3);
    CHECK_THROWS_AS(bs.step(Matrix::Zero(2, 2)), DimensionError);
}
