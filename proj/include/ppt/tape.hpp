#pragma once

#include <functional>
#include <memory>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "ppt/tensor.hpp"

namespace ppt {

// Reverse-mode tape over a fixed operator set: affine maps, matmul, softmax,
// log-softmax, log, sigmoid, softplus, layer norm, GELU, segmented causal
// multi-head attention, row gather / per-row column pick, elementwise
// arithmetic, and full reductions. Values are rank-1/2 double tensors.
//
// Build the graph through the op methods, call backward() on a scalar node,
// then read grad(ref). One tape per loss evaluation.
class Tape {
public:
    using Ref = int;
    using Segments = std::vector<std::pair<int, int>>;  // (start row, length)

    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    explicit Tape(bool grad_enabled) : grad_enabled_(grad_enabled) {}

    const Tensor& value(Ref r) const { return nodes_[static_cast<size_t>(r)].value; }
    const Tensor& grad(Ref r) const { return nodes_[static_cast<size_t>(r)].grad; }

    Ref constant(Tensor t) { return push(std::move(t), false); }

    Ref leaf(Tensor t, bool needs_grad = true) { return push(std::move(t), needs_grad && grad_enabled_); }

    // ---- elementwise ----

    Ref add(Ref a, Ref b) {
        check_same(a, b, "add");
        Tensor out = value(a);
        out.arr() += value(b).arr();
        return unary_or_binary(std::move(out), a, b, [this](Ref a, Ref b, Ref o) {
            accum(a, grad(o).arr());
            accum(b, grad(o).arr());
        });
    }

    Ref sub(Ref a, Ref b) {
        check_same(a, b, "sub");
        Tensor out = value(a);
        out.arr() -= value(b).arr();
        return unary_or_binary(std::move(out), a, b, [this](Ref a, Ref b, Ref o) {
            accum(a, grad(o).arr());
            accum(b, -grad(o).arr());
        });
    }

    Ref mul(Ref a, Ref b) {
        check_same(a, b, "mul");
        Tensor out = value(a);
        out.arr() *= value(b).arr();
        return unary_or_binary(std::move(out), a, b, [this](Ref a, Ref b, Ref o) {
            accum(a, grad(o).arr() * value(b).arr());
            accum(b, grad(o).arr() * value(a).arr());
        });
    }

    Ref scale(Ref a, double c) {
        Tensor out = value(a);
        out.arr() *= c;
        return unary(std::move(out), a, [this, c](Ref a, Ref o) { accum(a, c * grad(o).arr()); });
    }

    Ref neg(Ref a) { return scale(a, -1.0); }

    Ref sigmoid(Ref a) {
        Tensor out = value(a);
        for (double& v : out.data) v = ppt::sigmoid(v);
        return unary(std::move(out), a, [this](Ref a, Ref o) {
            accum(a, grad(o).arr() * value(o).arr() * (1.0 - value(o).arr()));
        });
    }

    Ref log(Ref a) {
        Tensor out = value(a);
        for (double& v : out.data) {
            check(v > 0.0, "log: input must be positive");
            v = std::log(v);
        }
        return unary(std::move(out), a, [this](Ref a, Ref o) {
            accum(a, grad(o).arr() / value(a).arr());
        });
    }

    Ref softplus(Ref a) {
        Tensor out = value(a);
        for (double& v : out.data) v = ppt::softplus(v);
        return unary(std::move(out), a, [this](Ref a, Ref o) {
            auto x = value(a).arr();
            accum(a, grad(o).arr() * x.unaryExpr([](double v) { return ppt::sigmoid(v); }));
        });
    }

    Ref gelu(Ref a) {
        Tensor out = value(a);
        for (double& v : out.data) v = 0.5 * v * (1.0 + std::erf(v * kInvSqrt2));
        return unary(std::move(out), a, [this](Ref a, Ref o) {
            auto x = value(a).arr();
            accum(a, grad(o).arr() * x.unaryExpr([](double v) {
                double cdf = 0.5 * (1.0 + std::erf(v * kInvSqrt2));
                double pdf = std::exp(-0.5 * v * v) * kInvSqrt2Pi;
                return cdf + v * pdf;
            }));
        });
    }

    // ---- linear algebra ----

    Ref matmul(Ref a, Ref b) {
        const Tensor& va = value(a);
        const Tensor& vb = value(b);
        check(va.cols() == vb.rows(), "matmul: inner dims mismatch " + shape_str(va) + " * " + shape_str(vb));
        Tensor out({va.rows(), vb.cols()});
        out.mat().noalias() = va.mat() * vb.mat();
        return unary_or_binary(std::move(out), a, b, [this](Ref a, Ref b, Ref o) {
            accum_mat(a, grad(o).mat() * value(b).mat().transpose());
            accum_mat(b, value(a).mat().transpose() * grad(o).mat());
        });
    }

    // X(n,k) * W(k,m) + b(m)
    Ref affine(Ref x, Ref w, Ref b) {
        const Tensor& vx = value(x);
        const Tensor& vw = value(w);
        const Tensor& vb = value(b);
        check(vx.cols() == vw.rows(), "affine: inner dims mismatch");
        check(vb.numel() == vw.cols(), "affine: bias size mismatch");
        Tensor out({vx.rows(), vw.cols()});
        out.mat().noalias() = vx.mat() * vw.mat();
        out.mat().rowwise() += vb.mat().row(0);
        Ref o = push(std::move(out), needs_grad(x) || needs_grad(w) || needs_grad(b));
        if (node(o).requires_grad)
            node(o).back = [this, x, w, b, o] {
                accum_mat(x, grad(o).mat() * value(w).mat().transpose());
                accum_mat(w, value(x).mat().transpose() * grad(o).mat());
                if (needs_grad(b)) {
                    Eigen::Map<EMat> gb(node(b).grad.data.data(), 1, node(b).grad.numel());
                    gb += grad(o).mat().colwise().sum();
                }
            };
        return o;
    }

    // out.row(i) = src.row(indices[i]); embedding lookup
    Ref gather_rows(Ref src, std::vector<int> indices) {
        const Tensor& vs = value(src);
        for (int i : indices) check(i >= 0 && i < vs.rows(), "gather_rows: index out of range");
        Tensor out({static_cast<int64_t>(indices.size()), vs.cols()});
        for (size_t i = 0; i < indices.size(); ++i)
            out.mat().row(static_cast<int64_t>(i)) = vs.mat().row(indices[i]);
        auto idx = std::make_shared<std::vector<int>>(std::move(indices));
        return unary(std::move(out), src, [this, idx](Ref src, Ref o) {
            auto g = node(src).grad.mat();
            for (size_t i = 0; i < idx->size(); ++i)
                g.row((*idx)[i]) += grad(o).mat().row(static_cast<int64_t>(i));
        });
    }

    // out(i,0) = x(i, indices[i])
    Ref pick_columns(Ref x, std::vector<int> indices) {
        const Tensor& vx = value(x);
        check(static_cast<int64_t>(indices.size()) == vx.rows(), "pick_columns: one index per row");
        Tensor out({vx.rows(), 1});
        for (int64_t i = 0; i < vx.rows(); ++i) {
            check(indices[static_cast<size_t>(i)] >= 0 && indices[static_cast<size_t>(i)] < vx.cols(),
                  "pick_columns: index out of range");
            out.data[static_cast<size_t>(i)] = vx.at(i, indices[static_cast<size_t>(i)]);
        }
        auto idx = std::make_shared<std::vector<int>>(std::move(indices));
        return unary(std::move(out), x, [this, idx](Ref x, Ref o) {
            Tensor& gx = node(x).grad;
            for (int64_t i = 0; i < gx.rows(); ++i)
                gx.at(i, (*idx)[static_cast<size_t>(i)]) += grad(o).data[static_cast<size_t>(i)];
        });
    }

    // ---- row-wise nonlinear maps ----

    Ref softmax_rows(Ref x) {
        Tensor out = value(x);
        for (int64_t r = 0; r < out.rows(); ++r) {
            auto row = out.mat().row(r);
            double m = row.maxCoeff();
            row = (row.array() - m).exp();
            row /= row.sum();
        }
        return unary(std::move(out), x, [this](Ref x, Ref o) {
            const auto p = value(o).mat();
            const auto g = grad(o).mat();
            auto gx = node(x).grad.mat();
            for (int64_t r = 0; r < p.rows(); ++r) {
                double dot = g.row(r).dot(p.row(r));
                gx.row(r).array() += p.row(r).array() * (g.row(r).array() - dot);
            }
        });
    }

    Ref log_softmax_rows(Ref x) {
        Tensor out = value(x);
        for (int64_t r = 0; r < out.rows(); ++r) {
            auto row = out.mat().row(r);
            double m = row.maxCoeff();
            double lse = m + std::log((row.array() - m).exp().sum());
            row.array() -= lse;
        }
        return unary(std::move(out), x, [this](Ref x, Ref o) {
            const auto y = value(o).mat();
            const auto g = grad(o).mat();
            auto gx = node(x).grad.mat();
            for (int64_t r = 0; r < y.rows(); ++r) {
                double gsum = g.row(r).sum();
                gx.row(r).array() += g.row(r).array() - y.row(r).array().exp() * gsum;
            }
        });
    }

    // y = gain * (x - mean) / sqrt(var + eps) + bias, statistics per row
    Ref layer_norm(Ref x, Ref gain, Ref bias, double eps = 1e-5) {
        const Tensor& vx = value(x);
        const int64_t n = vx.cols();
        check(value(gain).numel() == n && value(bias).numel() == n, "layer_norm: gain/bias size mismatch");
        auto xhat = std::make_shared<Tensor>(vx);
        auto inv_std = std::make_shared<std::vector<double>>(static_cast<size_t>(vx.rows()));
        for (int64_t r = 0; r < vx.rows(); ++r) {
            auto row = xhat->mat().row(r);
            double mean = row.mean();
            row.array() -= mean;
            double var = row.squaredNorm() / static_cast<double>(n);
            double is = 1.0 / std::sqrt(var + eps);
            row *= is;
            (*inv_std)[static_cast<size_t>(r)] = is;
        }
        Tensor out = *xhat;
        out.mat().array().rowwise() *= value(gain).arr().transpose();
        out.mat().array().rowwise() += value(bias).arr().transpose();
        Ref o = push(std::move(out), needs_grad(x) || needs_grad(gain) || needs_grad(bias));
        if (node(o).requires_grad)
            node(o).back = [this, x, gain, bias, o, xhat, inv_std, n] {
                const auto g = grad(o).mat();
                if (needs_grad(gain))
                    node(gain).grad.arr() += (g.array() * xhat->mat().array()).colwise().sum().transpose();
                if (needs_grad(bias)) node(bias).grad.arr() += g.array().colwise().sum().transpose();
                if (!needs_grad(x)) return;
                auto gx = node(x).grad.mat();
                const auto gv = value(gain).arr().transpose();
                for (int64_t r = 0; r < g.rows(); ++r) {
                    auto gh = g.row(r).array() * gv;  // dL/dxhat
                    auto xh = xhat->mat().row(r).array();
                    double m1 = gh.mean();
                    double m2 = (gh * xh).mean();
                    gx.row(r).array() +=
                        (*inv_std)[static_cast<size_t>(r)] * (gh - m1 - xh * m2);
                }
            };
        return o;
    }

    // Scaled dot-product attention with a causal (lower-triangular-inclusive)
    // mask, applied independently within each row segment. q/k/v are
    // (rows x hidden); hidden is split into nheads equal slices.
    Ref causal_attention(Ref q, Ref k, Ref v, int nheads, Segments segments) {
        const Tensor& vq = value(q);
        check(vq.same_shape(value(k)) && vq.same_shape(value(v)), "attention: q/k/v shape mismatch");
        const int64_t hidden = vq.cols();
        check(nheads > 0 && hidden % nheads == 0, "attention: hidden not divisible by heads");
        const int64_t dh = hidden / nheads;
        const double inv_sqrt_dh = 1.0 / std::sqrt(static_cast<double>(dh));

        Tensor out({vq.rows(), hidden});
        auto probs = std::make_shared<std::vector<EMat>>();  // per (segment, head)
        probs->reserve(segments.size() * static_cast<size_t>(nheads));
        for (auto [start, len] : segments) {
            check(start >= 0 && len >= 1 && start + len <= vq.rows(), "attention: bad segment");
            for (int h = 0; h < nheads; ++h) {
                auto qh = head_view(value(q), start, len, h, dh);
                auto kh = head_view(value(k), start, len, h, dh);
                auto vh = head_view(value(v), start, len, h, dh);
                EMat s = qh * kh.transpose() * inv_sqrt_dh;
                EMat p = EMat::Zero(len, len);
                for (int i = 0; i < len; ++i) {
                    auto pref = s.row(i).head(i + 1);
                    double m = pref.maxCoeff();
                    p.row(i).head(i + 1) = (pref.array() - m).exp();
                    p.row(i).head(i + 1) /= p.row(i).head(i + 1).sum();
                }
                head_view(out, start, len, h, dh).noalias() = p * vh;
                probs->push_back(std::move(p));
            }
        }

        auto segs = std::make_shared<Segments>(std::move(segments));
        Ref o = push(std::move(out), needs_grad(q) || needs_grad(k) || needs_grad(v));
        if (node(o).requires_grad)
            node(o).back = [this, q, k, v, o, nheads, dh, inv_sqrt_dh, probs, segs] {
                size_t pi = 0;
                for (auto [start, len] : *segs) {
                    for (int h = 0; h < nheads; ++h) {
                        const EMat& p = (*probs)[pi++];
                        auto go = head_view_const(grad(o), start, len, h, dh);
                        auto qh = head_view(value(q), start, len, h, dh);
                        auto kh = head_view(value(k), start, len, h, dh);
                        auto vh = head_view(value(v), start, len, h, dh);
                        EMat gp = go * vh.transpose();
                        head_view(node(v).grad, start, len, h, dh).noalias() += p.transpose() * go;
                        EMat gs = EMat::Zero(len, len);
                        for (int i = 0; i < len; ++i) {
                            auto prow = p.row(i).head(i + 1).array();
                            auto grow = gp.row(i).head(i + 1).array();
                            double dot = (prow * grow).sum();
                            gs.row(i).head(i + 1) = prow * (grow - dot);
                        }
                        head_view(node(q).grad, start, len, h, dh).noalias() +=
                            gs * kh * inv_sqrt_dh;
                        head_view(node(k).grad, start, len, h, dh).noalias() +=
                            gs.transpose() * qh * inv_sqrt_dh;
                    }
                }
            };
        return o;
    }

    // ---- reductions ----

    Ref sum_all(Ref a) {
        Tensor out = Tensor::scalar(value(a).arr().sum());
        return unary(std::move(out), a, [this](Ref a, Ref o) {
            node(a).grad.arr() += grad(o).data[0];
        });
    }

    Ref mean_all(Ref a) {
        const double n = static_cast<double>(value(a).numel());
        Tensor out = Tensor::scalar(value(a).arr().sum() / n);
        return unary(std::move(out), a, [this, n](Ref a, Ref o) {
            node(a).grad.arr() += grad(o).data[0] / n;
        });
    }

    // ---- driver ----

    bool requires_grad(Ref r) const { return node(r).requires_grad; }

    void backward(Ref loss) {
        check(grad_enabled_, "backward: tape built with gradients disabled");
        check(value(loss).numel() == 1, "backward: loss must be scalar");
        check(node(loss).requires_grad, "backward: loss does not depend on any leaf");
        node(loss).grad.data[0] = 1.0;
        for (size_t i = nodes_.size(); i-- > 0;) {
            if (nodes_[i].back && nodes_[i].requires_grad) nodes_[i].back();
        }
    }

    size_t num_nodes() const { return nodes_.size(); }

private:
    struct Node {
        Tensor value;
        Tensor grad;  // allocated only when requires_grad
        std::function<void()> back;
        bool requires_grad = false;
    };

    static constexpr double kInvSqrt2 = 0.70710678118654752440;
    static constexpr double kInvSqrt2Pi = 0.39894228040143267794;

    Node& node(Ref r) { return nodes_[static_cast<size_t>(r)]; }
    const Node& node(Ref r) const { return nodes_[static_cast<size_t>(r)]; }
    bool needs_grad(Ref r) const { return node(r).requires_grad; }

    Ref push(Tensor value, bool requires_grad) {
        Node n;
        n.requires_grad = requires_grad && grad_enabled_;
        if (n.requires_grad) n.grad = Tensor(value.shape, 0.0);
        n.value = std::move(value);
        nodes_.push_back(std::move(n));
        return static_cast<Ref>(nodes_.size() - 1);
    }

    void check_same(Ref a, Ref b, const char* op) {
        check(value(a).same_shape(value(b)),
              cat(op, ": shape mismatch ", shape_str(value(a)), " vs ", shape_str(value(b))));
    }

    template <class F>
    Ref unary(Tensor out, Ref a, F&& back) {
        Ref o = push(std::move(out), needs_grad(a));
        if (node(o).requires_grad)
            node(o).back = [this, a, o, f = std::forward<F>(back)] {
                if (needs_grad(a)) f(a, o);
            };
        return o;
    }

    template <class F>
    Ref unary_or_binary(Tensor out, Ref a, Ref b, F&& back) {
        Ref o = push(std::move(out), needs_grad(a) || needs_grad(b));
        if (node(o).requires_grad)
            node(o).back = [this, a, b, o, f = std::forward<F>(back)] { f(a, b, o); };
        return o;
    }

    template <class Expr>
    void accum(Ref r, const Expr& e) {
        if (needs_grad(r)) node(r).grad.arr() += e;
    }

    template <class Expr>
    void accum_mat(Ref r, const Expr& e) {
        if (needs_grad(r)) node(r).grad.mat().noalias() += e;
    }

    using HeadView = Eigen::Map<EMat, 0, Eigen::OuterStride<>>;
    using ConstHeadView = Eigen::Map<const EMat, 0, Eigen::OuterStride<>>;

    // writable only for gradient accumulation; reads never mutate
    static HeadView head_view(const Tensor& t, int start, int len, int h, int64_t dh) {
        return HeadView(const_cast<double*>(t.data.data()) + start * t.cols() + h * dh, len, dh,
                        Eigen::OuterStride<>(t.cols()));
    }
    static ConstHeadView head_view_const(const Tensor& t, int start, int len, int h, int64_t dh) {
        return ConstHeadView(t.data.data() + start * t.cols() + h * dh, len, dh,
                             Eigen::OuterStride<>(t.cols()));
    }

    std::vector<Node> nodes_;
    bool grad_enabled_ = true;
};

// Named leaf bindings for a ParamStore inside one tape.
struct ParamRefs {
    std::unordered_map<std::string, Tape::Ref> refs;

    Tape::Ref at(const std::string& name) const {
        auto it = refs.find(name);
        check(it != refs.end(), "no bound parameter named: " + name);
        return it->second;
    }
    Tape::Ref operator()(const std::string& name) const { return at(name); }
};

inline ParamRefs bind_params(Tape& tape, const ParamStore& params) {
    ParamRefs out;
    for (const auto& [name, t] : params) out.refs.emplace(name, tape.leaf(t, true));
    return out;
}

// Evaluates a scalar loss graph and its exact gradient with respect to every
// parameter array. The GradStore mirrors the ParamStore's keys and shapes.
inline std::pair<double, GradStore> value_and_grad(
    const ParamStore& params,
    const std::function<Tape::Ref(Tape&, const ParamRefs&)>& build_loss) {
    Tape tape;
    ParamRefs refs = bind_params(tape, params);
    Tape::Ref loss = build_loss(tape, refs);
    check(tape.value(loss).numel() == 1, "value_and_grad: loss must be scalar");
    double v = tape.value(loss).data[0];
    check(std::isfinite(v), "value_and_grad: loss is non-finite");
    if (tape.requires_grad(loss)) tape.backward(loss);
    GradStore grads;
    for (const auto& [name, t] : params) {
        Tensor g = tape.grad(refs.at(name));
        check(g.all_finite(), "value_and_grad: non-finite gradient for parameter \"" + name + "\"");
        grads.add(name, std::move(g));
    }
    check_mirrors(grads, params);
    return {v, std::move(grads)};
}

}  // namespace ppt
