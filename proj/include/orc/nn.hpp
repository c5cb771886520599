#pragma once

// Small neural-network engine: dense and LSTM layers over one flat parameter
// vector, hand-written backward passes, Adam, finite-difference checks and a
// binary checkpoint format. Activations are column-major batches (features x batch).

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <functional>
#include <sstream>
#include <string>
#include <vector>

#include "orc/errors.hpp"
#include "orc/rng.hpp"

namespace orc::nn {

using Eigen::Index;
using Eigen::MatrixXd;
using Eigen::VectorXd;
using MatMap = Eigen::Map<MatrixXd>;
using ConstMatMap = Eigen::Map<const MatrixXd>;
using VecMap = Eigen::Map<VectorXd>;
using ConstVecMap = Eigen::Map<const VectorXd>;

enum class Activation { identity, tanh, relu };

inline std::string to_string(Activation a) {
    switch (a) {
        case Activation::identity: return "identity";
        case Activation::tanh: return "tanh";
        case Activation::relu: return "relu";
    }
    return "identity";
}

inline Activation activation_from_string(const std::string& s) {
    if (s == "identity") return Activation::identity;
    if (s == "tanh") return Activation::tanh;
    if (s == "relu") return Activation::relu;
    throw CheckpointError("unknown activation '" + s + "'");
}

inline void apply_activation(Activation a, MatrixXd& z) {
    switch (a) {
        case Activation::identity: break;
        case Activation::tanh: z = z.array().tanh(); break;
        case Activation::relu: z = z.array().max(0.0); break;
    }
}

// d(act)/dz expressed through the activated output y
inline MatrixXd activation_grad(Activation a, const MatrixXd& y, const MatrixXd& dy) {
    switch (a) {
        case Activation::identity: return dy;
        case Activation::tanh: return (dy.array() * (1.0 - y.array().square())).matrix();
        case Activation::relu: return (dy.array() * (y.array() > 0.0).cast<double>()).matrix();
    }
    return dy;
}

struct LayerDesc {
    std::string kind;  // "dense" or "lstm"
    int in = 0;
    int out = 0;  // hidden size for lstm
    Activation act = Activation::identity;
    Index offset = 0;
    Index size = 0;

    friend bool operator==(const LayerDesc&, const LayerDesc&) = default;
};

inline Index dense_param_count(int in, int out) { return Index(out) * in + out; }
inline Index lstm_param_count(int in, int hidden) { return Index(4 * hidden) * (in + hidden) + 4 * hidden; }

// Layout descriptor plus contiguous storage. Layers hold only their offset.
class ParamSet {
public:
    Index add_dense(int in, int out, Activation act) {
        return add({"dense", in, out, act, size(), dense_param_count(in, out)});
    }
    Index add_lstm(int in, int hidden) {
        return add({"lstm", in, hidden, Activation::identity, size(), lstm_param_count(in, hidden)});
    }

    const std::vector<LayerDesc>& layout() const noexcept { return layout_; }
    Index size() const noexcept { return values.size(); }

    std::string layout_text() const {
        std::ostringstream os;
        for (const auto& l : layout_)
            os << l.kind << ' ' << l.in << ' ' << l.out << ' ' << to_string(l.act) << ' ' << l.offset << ' '
               << l.size << '\n';
        return os.str();
    }

    VectorXd values;

private:
    Index add(LayerDesc d) {
        layout_.push_back(d);
        values.conservativeResize(d.offset + d.size);
        values.segment(d.offset, d.size).setZero();
        return Index(layout_.size()) - 1;
    }
    std::vector<LayerDesc> layout_;
};

struct DenseCache {
    MatrixXd x;
    MatrixXd y;
};

// Parameters: W (out x in) column-major, then b (out).
class Dense {
public:
    Dense() = default;
    Dense(const ParamSet& ps, Index layer) : d_(ps.layout().at(layer)) {
        if (d_.kind != "dense") throw ShapeError("layer is not dense");
    }

    int in() const noexcept { return d_.in; }
    int out() const noexcept { return d_.out; }
    Activation activation() const noexcept { return d_.act; }

    ConstMatMap w(const VectorXd& p) const { return {p.data() + d_.offset, d_.out, d_.in}; }
    ConstVecMap b(const VectorXd& p) const { return {p.data() + d_.offset + Index(d_.out) * d_.in, d_.out}; }

    void init(VectorXd& p, Rng& rng) const {
        // Glorot uniform, zero bias
        const double lim = std::sqrt(6.0 / (d_.in + d_.out));
        for (Index k = 0; k < Index(d_.out) * d_.in; ++k) p[d_.offset + k] = rng.uniform(-lim, lim);
        for (Index k = 0; k < d_.out; ++k) p[d_.offset + Index(d_.out) * d_.in + k] = 0.0;
    }

    MatrixXd forward(const VectorXd& p, const MatrixXd& x, DenseCache* cache = nullptr) const {
        if (x.rows() != d_.in) {
            std::ostringstream os;
            os << "dense forward: expected " << d_.in << " input rows, got " << x.rows();
            throw ShapeError(os.str());
        }
        MatrixXd z = w(p) * x;
        z.colwise() += b(p);
        apply_activation(d_.act, z);
        if (cache) {
            cache->x = x;
            cache->y = z;
        }
        return z;
    }

    // Accumulates parameter gradients into g, returns dL/dx.
    MatrixXd backward(const VectorXd& p, const DenseCache& c, const MatrixXd& dy, VectorXd& g) const {
        if (dy.rows() != d_.out || dy.cols() != c.y.cols()) throw ShapeError("dense backward: gradient shape mismatch");
        const MatrixXd dz = activation_grad(d_.act, c.y, dy);
        MatMap gw(g.data() + d_.offset, d_.out, d_.in);
        VecMap gb(g.data() + d_.offset + Index(d_.out) * d_.in, d_.out);
        gw.noalias() += dz * c.x.transpose();
        gb.noalias() += dz.rowwise().sum();
        return w(p).transpose() * dz;
    }

private:
    LayerDesc d_;
};

struct LstmStep {
    MatrixXd x, h_prev, c_prev;
    MatrixXd i, f, o, g;  // gate activations, H x B
    MatrixXd c, tc;       // cell state and tanh(c)
};

struct LstmCache {
    std::vector<LstmStep> steps;
};

// Gate rows are stacked [input; forget; output; candidate].
// Parameters: W (4H x in), U (4H x H), b (4H), each column-major.
class Lstm {
public:
    Lstm() = default;
    Lstm(const ParamSet& ps, Index layer) : d_(ps.layout().at(layer)) {
        if (d_.kind != "lstm") throw ShapeError("layer is not lstm");
    }

    int in() const noexcept { return d_.in; }
    int hidden() const noexcept { return d_.out; }

    ConstMatMap w(const VectorXd& p) const { return {p.data() + d_.offset, 4 * d_.out, d_.in}; }
    ConstMatMap u(const VectorXd& p) const {
        return {p.data() + d_.offset + Index(4 * d_.out) * d_.in, 4 * d_.out, d_.out};
    }
    ConstVecMap b(const VectorXd& p) const {
        return {p.data() + d_.offset + Index(4 * d_.out) * (d_.in + d_.out), 4 * d_.out};
    }

    void init(VectorXd& p, Rng& rng) const {
        const double lim = 1.0 / std::sqrt(double(d_.out));
        const Index nw = Index(4 * d_.out) * (d_.in + d_.out);
        for (Index k = 0; k < nw; ++k) p[d_.offset + k] = rng.uniform(-lim, lim);
        for (Index k = 0; k < 4 * d_.out; ++k) p[d_.offset + nw + k] = 0.0;
        // forget-gate bias of one keeps early gradients flowing through the cell
        for (Index k = 0; k < d_.out; ++k) p[d_.offset + nw + d_.out + k] = 1.0;
    }

    // Runs the sequence from zero initial state; returns h_t for every step.
    std::vector<MatrixXd> forward(const VectorXd& p, const std::vector<MatrixXd>& xs, LstmCache* cache = nullptr) const {
        if (xs.empty()) throw ShapeError("lstm forward: empty sequence");
        const Index bsz = xs.front().cols();
        const int h = d_.out;
        MatrixXd h_prev = MatrixXd::Zero(h, bsz), c_prev = MatrixXd::Zero(h, bsz);
        std::vector<MatrixXd> hs;
        hs.reserve(xs.size());
        if (cache) cache->steps.assign(xs.size(), {});
        const auto W = w(p);
        const auto U = u(p);
        const auto B = b(p);
        for (std::size_t t = 0; t < xs.size(); ++t) {
            const MatrixXd& x = xs[t];
            if (x.rows() != d_.in || x.cols() != bsz) {
                std::ostringstream os;
                os << "lstm forward: step " << t << " has shape " << x.rows() << "x" << x.cols() << ", expected "
                   << d_.in << "x" << bsz;
                throw ShapeError(os.str());
            }
            MatrixXd z = W * x;
            z.noalias() += U * h_prev;
            z.colwise() += B;
            MatrixXd ig = sigmoid(z.topRows(h));
            MatrixXd fg = sigmoid(z.middleRows(h, h));
            MatrixXd og = sigmoid(z.middleRows(2 * h, h));
            MatrixXd gg = z.bottomRows(h).array().tanh().matrix();
            MatrixXd c = (fg.array() * c_prev.array() + ig.array() * gg.array()).matrix();
            MatrixXd tc = c.array().tanh().matrix();
            MatrixXd hh = (og.array() * tc.array()).matrix();
            if (cache) {
                auto& s = cache->steps[t];
                s.x = x;
                s.h_prev = std::move(h_prev);
                s.c_prev = std::move(c_prev);
                s.i = std::move(ig);
                s.f = std::move(fg);
                s.o = std::move(og);
                s.g = std::move(gg);
                s.c = c;
                s.tc = std::move(tc);
            }
            hs.push_back(hh);
            h_prev = std::move(hh);
            c_prev = std::move(c);
        }
        return hs;
    }

    // dhs[t] is dL/dh_t from layers above (zero matrices where h_t is unused).
    // Accumulates into g and returns dL/dx_t for every step.
    std::vector<MatrixXd> backward(const VectorXd& p, const LstmCache& cache, const std::vector<MatrixXd>& dhs,
                                   VectorXd& g) const {
        const std::size_t n = cache.steps.size();
        if (dhs.size() != n) throw ShapeError("lstm backward: gradient sequence length mismatch");
        const int h = d_.out;
        const Index bsz = cache.steps.front().x.cols();
        MatMap gW(g.data() + d_.offset, 4 * h, d_.in);
        MatMap gU(g.data() + d_.offset + Index(4 * h) * d_.in, 4 * h, h);
        VecMap gB(g.data() + d_.offset + Index(4 * h) * (d_.in + h), 4 * h);
        const auto W = w(p);
        const auto U = u(p);

        std::vector<MatrixXd> dxs(n);
        MatrixXd dh_next = MatrixXd::Zero(h, bsz), dc_next = MatrixXd::Zero(h, bsz);
        MatrixXd dz(4 * h, bsz);
        for (std::size_t k = n; k-- > 0;) {
            const LstmStep& s = cache.steps[k];
            if (dhs[k].rows() != h || dhs[k].cols() != bsz) throw ShapeError("lstm backward: dh shape mismatch");
            const MatrixXd dh = dhs[k] + dh_next;
            const auto tc = s.tc.array();
            const MatrixXd dc = (dc_next.array() + dh.array() * s.o.array() * (1.0 - tc.square())).matrix();
            dz.topRows(h) = (dc.array() * s.g.array() * s.i.array() * (1.0 - s.i.array())).matrix();
            dz.middleRows(h, h) = (dc.array() * s.c_prev.array() * s.f.array() * (1.0 - s.f.array())).matrix();
            dz.middleRows(2 * h, h) = (dh.array() * tc * s.o.array() * (1.0 - s.o.array())).matrix();
            dz.bottomRows(h) = (dc.array() * s.i.array() * (1.0 - s.g.array().square())).matrix();
            gW.noalias() += dz * s.x.transpose();
            gU.noalias() += dz * s.h_prev.transpose();
            gB.noalias() += dz.rowwise().sum();
            dxs[k] = W.transpose() * dz;
            dh_next = U.transpose() * dz;
            dc_next = (dc.array() * s.f.array()).matrix();
        }
        return dxs;
    }

private:
    static MatrixXd sigmoid(const MatrixXd& z) { return (1.0 / (1.0 + (-z.array()).exp())).matrix(); }
    LayerDesc d_;
};

// Inverted dropout; the mask is kept for the backward pass.
struct Dropout {
    double rate = 0.0;

    MatrixXd forward(const MatrixXd& x, Rng& rng, MatrixXd* mask) const {
        if (rate <= 0.0) {
            if (mask) mask->resize(0, 0);
            return x;
        }
        MatrixXd m(x.rows(), x.cols());
        const double keep = 1.0 - rate;
        for (Index j = 0; j < m.cols(); ++j)
            for (Index i = 0; i < m.rows(); ++i) m(i, j) = rng.uniform() < keep ? 1.0 / keep : 0.0;
        MatrixXd y = (x.array() * m.array()).matrix();
        if (mask) *mask = std::move(m);
        return y;
    }

    static MatrixXd backward(const MatrixXd& mask, const MatrixXd& dy) {
        if (mask.size() == 0) return dy;
        return (dy.array() * mask.array()).matrix();
    }
};

// Multilayer perceptron over its own ParamSet.
class Mlp {
public:
    Mlp() = default;
    Mlp(int in, const std::vector<int>& hidden, Activation hidden_act, int out, Activation out_act) {
        int prev = in;
        for (int hsz : hidden) {
            layers_.emplace_back(params_, params_.add_dense(prev, hsz, hidden_act));
            prev = hsz;
        }
        layers_.emplace_back(params_, params_.add_dense(prev, out, out_act));
    }

    void init(Rng& rng) {
        for (const auto& l : layers_) l.init(params_.values, rng);
    }

    ParamSet& params() noexcept { return params_; }
    const ParamSet& params() const noexcept { return params_; }
    const std::vector<Dense>& layers() const noexcept { return layers_; }
    int in() const { return layers_.front().in(); }
    int out() const { return layers_.back().out(); }

    MatrixXd forward(const MatrixXd& x, std::vector<DenseCache>* caches = nullptr) const {
        return forward_with(params_.values, x, caches);
    }

    MatrixXd forward_with(const VectorXd& p, const MatrixXd& x, std::vector<DenseCache>* caches = nullptr) const {
        if (caches) caches->assign(layers_.size(), {});
        MatrixXd a = x;
        for (std::size_t k = 0; k < layers_.size(); ++k)
            a = layers_[k].forward(p, a, caches ? &(*caches)[k] : nullptr);
        return a;
    }

    // Accumulates into g (sized like params); returns dL/dx.
    MatrixXd backward(const std::vector<DenseCache>& caches, const MatrixXd& dy, VectorXd& g) const {
        return backward_with(params_.values, caches, dy, g);
    }

    MatrixXd backward_with(const VectorXd& p, const std::vector<DenseCache>& caches, const MatrixXd& dy,
                           VectorXd& g) const {
        MatrixXd d = dy;
        for (std::size_t k = layers_.size(); k-- > 0;) d = layers_[k].backward(p, caches[k], d, g);
        return d;
    }

private:
    ParamSet params_;
    std::vector<Dense> layers_;
};

struct AdamConfig {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

class Adam {
public:
    Adam() = default;
    explicit Adam(Index n, AdamConfig cfg = {}) : cfg_(cfg), m_(VectorXd::Zero(n)), v_(VectorXd::Zero(n)) {}

    long step_count() const noexcept { return t_; }
    const VectorXd& first_moment() const noexcept { return m_; }
    const VectorXd& second_moment() const noexcept { return v_; }

    void step(VectorXd& params, const VectorXd& grad, double lr) {
        if (grad.size() != params.size() || grad.size() != m_.size())
            throw ShapeError("adam: parameter/gradient layout mismatch");
        if (!grad.allFinite()) throw NonFiniteError("adam: non-finite gradient, update rejected");
        ++t_;
        m_ = cfg_.beta1 * m_ + (1.0 - cfg_.beta1) * grad;
        v_ = cfg_.beta2 * v_ + (1.0 - cfg_.beta2) * grad.cwiseAbs2();
        const double bc1 = 1.0 - std::pow(cfg_.beta1, double(t_));
        const double bc2 = 1.0 - std::pow(cfg_.beta2, double(t_));
        params.array() -= lr * (m_.array() / bc1) / ((v_.array() / bc2).sqrt() + cfg_.eps);
    }

private:
    AdamConfig cfg_{};
    VectorXd m_, v_;
    long t_ = 0;
};

struct GradCheckResult {
    double max_rel_error = 0.0;
    Index worst_index = -1;
};

// Central differences at eps against an analytic gradient. Coordinates whose
// gradients are both below `floor` in magnitude are compared absolutely.
inline GradCheckResult grad_check(const VectorXd& params, const std::function<double(const VectorXd&)>& loss,
                                  const VectorXd& analytic, double eps = 1e-5, double floor = 1e-7) {
    if (analytic.size() != params.size()) throw ShapeError("grad_check: gradient size mismatch");
    GradCheckResult r;
    VectorXd p = params;
    for (Index k = 0; k < p.size(); ++k) {
        const double orig = p[k];
        p[k] = orig + eps;
        const double lp = loss(p);
        p[k] = orig - eps;
        const double lm = loss(p);
        p[k] = orig;
        const double num = (lp - lm) / (2.0 * eps);
        const double err = std::abs(num - analytic[k]) / std::max({std::abs(num), std::abs(analytic[k]), floor});
        if (err > r.max_rel_error || r.worst_index < 0) {
            r.max_rel_error = err;
            r.worst_index = k;
        }
    }
    return r;
}

// Checkpoint: text header (magic, layout, optional metadata) followed by the raw
// little-endian doubles of the parameter vector.
inline void save_checkpoint(const std::string& path, const ParamSet& ps,
                            const std::vector<std::pair<std::string, std::string>>& meta = {}) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw CheckpointError("cannot open '" + path + "' for writing");
    f << "orc-params 1\n";
    for (const auto& [k, v] : meta) f << "meta " << k << ' ' << v << '\n';
    f << "layers " << ps.layout().size() << '\n' << ps.layout_text();
    f << "count " << ps.size() << "\nend\n";
    f.write(reinterpret_cast<const char*>(ps.values.data()), std::streamsize(ps.size() * sizeof(double)));
    if (!f) throw CheckpointError("write failed for '" + path + "'");
}

struct LoadedCheckpoint {
    std::vector<LayerDesc> layout;
    VectorXd values;
    std::vector<std::pair<std::string, std::string>> meta;

    std::string meta_value(const std::string& key) const {
        for (const auto& [k, v] : meta)
            if (k == key) return v;
        throw CheckpointError("checkpoint has no metadata key '" + key + "'");
    }
};

inline LoadedCheckpoint read_checkpoint(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw CheckpointError("cannot open checkpoint '" + path + "'");
    LoadedCheckpoint ck;
    std::string line;
    if (!std::getline(f, line) || line != "orc-params 1") throw CheckpointError("'" + path + "' is not a parameter checkpoint");
    std::size_t n_layers = 0;
    Index count = -1;
    while (std::getline(f, line)) {
        if (line == "end") break;
        std::istringstream is(line);
        std::string tag;
        is >> tag;
        if (tag == "meta") {
            std::string k, v;
            is >> k;
            std::getline(is >> std::ws, v);
            ck.meta.emplace_back(k, v);
        } else if (tag == "layers") {
            is >> n_layers;
            for (std::size_t i = 0; i < n_layers; ++i) {
                if (!std::getline(f, line)) throw CheckpointError("truncated layout in '" + path + "'");
                std::istringstream ls(line);
                LayerDesc d;
                std::string act;
                ls >> d.kind >> d.in >> d.out >> act >> d.offset >> d.size;
                if (!ls) throw CheckpointError("malformed layout line '" + line + "'");
                d.act = activation_from_string(act);
                ck.layout.push_back(d);
            }
        } else if (tag == "count") {
            is >> count;
        } else {
            throw CheckpointError("unexpected header line '" + line + "'");
        }
    }
    if (line != "end" || count < 0) throw CheckpointError("incomplete header in '" + path + "'");
    ck.values.resize(count);
    f.read(reinterpret_cast<char*>(ck.values.data()), std::streamsize(count * sizeof(double)));
    if (f.gcount() != std::streamsize(count * sizeof(double))) throw CheckpointError("truncated payload in '" + path + "'");
    return ck;
}

// Loads values into an existing ParamSet whose layout must match exactly.
inline LoadedCheckpoint load_checkpoint(const std::string& path, ParamSet& ps) {
    LoadedCheckpoint ck = read_checkpoint(path);
    if (ck.layout != ps.layout()) {
        std::ostringstream os;
        os << "checkpoint layout mismatch for '" << path << "': file has\n";
        for (const auto& l : ck.layout) os << "  " << l.kind << ' ' << l.in << ' ' << l.out << ' ' << to_string(l.act) << '\n';
        os << "expected\n" << ps.layout_text();
        throw CheckpointError(os.str());
    }
    ps.values = ck.values;
    return ck;
}

}  // namespace orc::nn
