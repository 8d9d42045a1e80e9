#include "sseg/autograd.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <atomic>
#include <cmath>
#include <stdexcept>
#include <unordered_set>

namespace sseg::ag {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<RowMat>;
using CMatMap = Eigen::Map<const RowMat>;

thread_local bool g_grad_enabled = true;

std::uint64_t next_seq() {
    static std::atomic<std::uint64_t> counter{1};
    return counter.fetch_add(1, std::memory_order_relaxed);
}

std::shared_ptr<Node> make_node(Tensor value, std::vector<std::shared_ptr<Node>> parents,
                                std::function<void(Node&)> backprop) {
    auto n = std::make_shared<Node>();
    n->value = std::move(value);
    n->seq = next_seq();
    bool needs = false;
    if (g_grad_enabled) {
        for (const auto& p : parents)
            if (p && p->requires_grad) needs = true;
    }
    n->requires_grad = needs;
    if (needs) {
        n->parents = std::move(parents);
        n->backprop = std::move(backprop);
    }
    return n;
}

void accumulate(Node& parent, const Tensor& g) {
    Tensor& dst = parent.ensure_grad();
    const double* s = g.data();
    double* d = dst.data();
    const std::int64_t n = g.size();
    for (std::int64_t i = 0; i < n; ++i) d[i] += s[i];
}

void check_same_shape(const Var& a, const Var& b, const char* op) {
    if (!a.value().same_shape(b.value()))
        throw std::invalid_argument(std::string(op) + ": shape mismatch " + a.value().shape_str() +
                                    " vs " + b.value().shape_str());
}

Var wrap(std::shared_ptr<Node> n) {
    Var v;
    v.node() = std::move(n);
    return v;
}

/// Elementwise unary op: fwd(x) and dfdx(x, y) for the local derivative.
template <typename F, typename DF>
Var unary_op(const Var& x, F fwd, DF dfdx) {
    const Tensor& xv = x.value();
    Tensor out(xv.shape());
    for (std::int64_t i = 0; i < xv.size(); ++i) out[i] = fwd(xv[i]);
    Tensor saved = out;
    auto xn = x.node();
    return wrap(make_node(std::move(out), {xn}, [xn, saved, dfdx](Node& n) {
        if (!xn->requires_grad) return;
        Tensor& gx = xn->ensure_grad();
        const Tensor& xv = xn->value;
        for (std::int64_t i = 0; i < xv.size(); ++i) gx[i] += n.grad[i] * dfdx(xv[i], saved[i]);
    }));
}

}  // namespace

Tensor& Node::ensure_grad() {
    if (grad.size() != value.size()) grad = Tensor(value.shape());
    return grad;
}

Var::Var(Tensor value, bool requires_grad) {
    node_ = std::make_shared<Node>();
    node_->value = std::move(value);
    node_->requires_grad = requires_grad;
    node_->seq = next_seq();
}

const Tensor& Var::value() const { return node_->value; }
Tensor& Var::value_mut() { return node_->value; }
const Tensor& Var::grad() const { return node_->grad; }
bool Var::requires_grad() const { return node_ && node_->requires_grad; }

void Var::zero_grad() {
    if (node_ && node_->grad.size() > 0) node_->grad.fill(0.0);
}

bool grad_enabled() { return g_grad_enabled; }
NoGradGuard::NoGradGuard() : prev(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = prev; }

void backward(const Var& root) {
    if (!root.defined() || root.value().size() != 1)
        throw std::invalid_argument("backward: root must be a scalar");
    Node* r = root.node().get();
    if (!r->requires_grad) return;

    std::vector<Node*> order;
    std::unordered_set<Node*> seen;
    std::vector<Node*> stack{r};
    seen.insert(r);
    while (!stack.empty()) {
        Node* n = stack.back();
        stack.pop_back();
        order.push_back(n);
        for (auto& p : n->parents) {
            if (p && p->requires_grad && seen.insert(p.get()).second) stack.push_back(p.get());
        }
    }
    std::sort(order.begin(), order.end(), [](Node* a, Node* b) { return a->seq > b->seq; });

    r->ensure_grad();
    r->grad[0] += 1.0;
    for (Node* n : order)
        if (n->backprop) n->backprop(*n);
}

// ---------------- elementwise ----------------

Var add(const Var& a, const Var& b) {
    check_same_shape(a, b, "add");
    Tensor out(a.value().shape());
    for (std::int64_t i = 0; i < out.size(); ++i) out[i] = a.value()[i] + b.value()[i];
    auto an = a.node(), bn = b.node();
    return wrap(make_node(std::move(out), {an, bn}, [an, bn](Node& n) {
        if (an->requires_grad) accumulate(*an, n.grad);
        if (bn->requires_grad) accumulate(*bn, n.grad);
    }));
}

Var sub(const Var& a, const Var& b) {
    check_same_shape(a, b, "sub");
    Tensor out(a.value().shape());
    for (std::int64_t i = 0; i < out.size(); ++i) out[i] = a.value()[i] - b.value()[i];
    auto an = a.node(), bn = b.node();
    return wrap(make_node(std::move(out), {an, bn}, [an, bn](Node& n) {
        if (an->requires_grad) accumulate(*an, n.grad);
        if (bn->requires_grad) {
            Tensor& g = bn->ensure_grad();
            for (std::int64_t i = 0; i < n.grad.size(); ++i) g[i] -= n.grad[i];
        }
    }));
}

Var mul(const Var& a, const Var& b) {
    check_same_shape(a, b, "mul");
    Tensor out(a.value().shape());
    for (std::int64_t i = 0; i < out.size(); ++i) out[i] = a.value()[i] * b.value()[i];
    auto an = a.node(), bn = b.node();
    return wrap(make_node(std::move(out), {an, bn}, [an, bn](Node& n) {
        if (an->requires_grad) {
            Tensor& g = an->ensure_grad();
            for (std::int64_t i = 0; i < n.grad.size(); ++i) g[i] += n.grad[i] * bn->value[i];
        }
        if (bn->requires_grad) {
            Tensor& g = bn->ensure_grad();
            for (std::int64_t i = 0; i < n.grad.size(); ++i) g[i] += n.grad[i] * an->value[i];
        }
    }));
}

Var scale(const Var& x, double c) {
    return unary_op(x, [c](double v) { return v * c; }, [c](double, double) { return c; });
}

Var add_const(const Var& x, double c) {
    return unary_op(x, [c](double v) { return v + c; }, [](double, double) { return 1.0; });
}

Var scale_by(const Var& x, const Var& s) {
    if (s.value().size() != 1) throw std::invalid_argument("scale_by: s must be scalar");
    const double sv = s.value()[0];
    Tensor out(x.value().shape());
    for (std::int64_t i = 0; i < out.size(); ++i) out[i] = x.value()[i] * sv;
    auto xn = x.node(), sn = s.node();
    return wrap(make_node(std::move(out), {xn, sn}, [xn, sn, sv](Node& n) {
        if (xn->requires_grad) {
            Tensor& g = xn->ensure_grad();
            for (std::int64_t i = 0; i < n.grad.size(); ++i) g[i] += n.grad[i] * sv;
        }
        if (sn->requires_grad) {
            double acc = 0.0;
            for (std::int64_t i = 0; i < n.grad.size(); ++i) acc += n.grad[i] * xn->value[i];
            sn->ensure_grad()[0] += acc;
        }
    }));
}

Var relu(const Var& x) {
    return unary_op(x, [](double v) { return v > 0.0 ? v : 0.0; },
                    [](double v, double) { return v > 0.0 ? 1.0 : 0.0; });
}

Var gelu(const Var& x) {
    return unary_op(
        x,
        [](double v) {
            return 0.5 * v * (1.0 + std::erf(v * 0.7071067811865475244));
        },
        [](double v, double) {
            return 0.5 * (1.0 + std::erf(v * 0.7071067811865475244)) +
                   v * 0.3989422804014326779 * std::exp(-0.5 * v * v);
        });
}

Var sigmoid(const Var& x) {
    return unary_op(
        x,
        [](double v) { return v >= 0.0 ? 1.0 / (1.0 + std::exp(-v)) : std::exp(v) / (1.0 + std::exp(v)); },
        [](double, double y) { return y * (1.0 - y); });
}

Var exp_v(const Var& x) {
    return unary_op(x, [](double v) { return std::exp(v); }, [](double, double y) { return y; });
}

Var log_v(const Var& x) {
    return unary_op(x, [](double v) { return std::log(v); }, [](double v, double) { return 1.0 / v; });
}

Var pow_const(const Var& x, double p) {
    return unary_op(x, [p](double v) { return std::pow(v, p); },
                    [p](double v, double) { return p * std::pow(v, p - 1.0); });
}

Var max_const(const Var& x, double c) {
    return unary_op(x, [c](double v) { return v > c ? v : c; },
                    [c](double v, double) { return v > c ? 1.0 : 0.0; });
}

// ---------------- linear algebra / shape ----------------

Var matmul(const Var& a, const Var& b) {
    const Tensor& av = a.value();
    const Tensor& bv = b.value();
    if (av.rank() != 2 || bv.rank() != 2 || av.dim(1) != bv.dim(0))
        throw std::invalid_argument("matmul: bad shapes " + av.shape_str() + " x " + bv.shape_str());
    const std::int64_t M = av.dim(0), K = av.dim(1), N = bv.dim(1);
    Tensor out({M, N});
    {
        CMatMap A(av.data(), M, K), B(bv.data(), K, N);
        MatMap C(out.data(), M, N);
        C.noalias() = A * B;
    }
    auto an = a.node(), bn = b.node();
    return wrap(make_node(std::move(out), {an, bn}, [an, bn, M, K, N](Node& n) {
        CMatMap G(n.grad.data(), M, N);
        if (an->requires_grad) {
            MatMap GA(an->ensure_grad().data(), M, K);
            CMatMap B(bn->value.data(), K, N);
            GA.noalias() += G * B.transpose();
        }
        if (bn->requires_grad) {
            MatMap GB(bn->ensure_grad().data(), K, N);
            CMatMap A(an->value.data(), M, K);
            GB.noalias() += A.transpose() * G;
        }
    }));
}

Var transpose(const Var& x) {
    const Tensor& xv = x.value();
    if (xv.rank() != 2) throw std::invalid_argument("transpose: expects 2-D");
    const std::int64_t M = xv.dim(0), N = xv.dim(1);
    Tensor out({N, M});
    for (std::int64_t i = 0; i < M; ++i)
        for (std::int64_t j = 0; j < N; ++j) out.at(j, i) = xv.at(i, j);
    auto xn = x.node();
    return wrap(make_node(std::move(out), {xn}, [xn, M, N](Node& n) {
        if (!xn->requires_grad) return;
        Tensor& g = xn->ensure_grad();
        for (std::int64_t i = 0; i < M; ++i)
            for (std::int64_t j = 0; j < N; ++j) g[i * N + j] += n.grad[j * M + i];
    }));
}

Var reshape(const Var& x, std::vector<std::int64_t> shape) {
    Tensor out = x.value().reshaped(std::move(shape));
    auto xn = x.node();
    return wrap(make_node(std::move(out), {xn}, [xn](Node& n) {
        if (xn->requires_grad) accumulate(*xn, n.grad);
    }));
}

Var slice_cols(const Var& x, std::int64_t c0, std::int64_t c1) {
    const Tensor& xv = x.value();
    if (xv.rank() != 2 || c0 < 0 || c1 > xv.dim(1) || c0 >= c1)
        throw std::invalid_argument("slice_cols: bad range");
    const std::int64_t L = xv.dim(0), D = xv.dim(1), W = c1 - c0;
    Tensor out({L, W});
    for (std::int64_t i = 0; i < L; ++i)
        for (std::int64_t j = 0; j < W; ++j) out.at(i, j) = xv.at(i, c0 + j);
    auto xn = x.node();
    return wrap(make_node(std::move(out), {xn}, [xn, L, D, W, c0](Node& n) {
        if (!xn->requires_grad) return;
        Tensor& g = xn->ensure_grad();
        for (std::int64_t i = 0; i < L; ++i)
            for (std::int64_t j = 0; j < W; ++j) g[i * D + c0 + j] += n.grad[i * W + j];
    }));
}

Var concat_cols(const std::vector<Var>& xs) {
    if (xs.empty()) throw std::invalid_argument("concat_cols: empty input");
    const std::int64_t L = xs[0].value().dim(0);
    std::int64_t D = 0;
    std::vector<std::shared_ptr<Node>> parents;
    for (const auto& x : xs) {
        if (x.value().rank() != 2 || x.value().dim(0) != L)
            throw std::invalid_argument("concat_cols: row mismatch");
        D += x.value().dim(1);
        parents.push_back(x.node());
    }
    Tensor out({L, D});
    std::int64_t off = 0;
    for (const auto& x : xs) {
        const std::int64_t d = x.value().dim(1);
        for (std::int64_t i = 0; i < L; ++i)
            for (std::int64_t j = 0; j < d; ++j) out.at(i, off + j) = x.value().at(i, j);
        off += d;
    }
    return wrap(make_node(std::move(out), std::move(parents), [L, D](Node& n) {
        std::int64_t off = 0;
        for (auto& p : n.parents) {
            const std::int64_t d = p->value.dim(1);
            if (p->requires_grad) {
                Tensor& g = p->ensure_grad();
                for (std::int64_t i = 0; i < L; ++i)
                    for (std::int64_t j = 0; j < d; ++j) g[i * d + j] += n.grad[i * D + off + j];
            }
            off += d;
        }
    }));
}

Var concat_rows(const std::vector<Var>& xs) {
    if (xs.empty()) throw std::invalid_argument("concat_rows: empty input");
    const std::int64_t D = xs[0].value().dim(1);
    std::int64_t R = 0;
    std::vector<std::shared_ptr<Node>> parents;
    for (const auto& x : xs) {
        if (x.value().rank() != 2 || x.value().dim(1) != D)
            throw std::invalid_argument("concat_rows: column mismatch");
        R += x.value().dim(0);
        parents.push_back(x.node());
    }
    Tensor out({R, D});
    std::int64_t off = 0;
    for (const auto& x : xs) {
        const std::int64_t r = x.value().dim(0);
        for (std::int64_t i = 0; i < r * D; ++i) out[off * D + i] = x.value()[i];
        off += r;
    }
    return wrap(make_node(std::move(out), std::move(parents), [D](Node& n) {
        std::int64_t off = 0;
        for (auto& p : n.parents) {
            const std::int64_t r = p->value.dim(0);
            if (p->requires_grad) {
                Tensor& g = p->ensure_grad();
                for (std::int64_t i = 0; i < r * D; ++i) g[i] += n.grad[off * D + i];
            }
            off += r;
        }
    }));
}

Var take_row(const Var& x, std::int64_t i) {
    const Tensor& xv = x.value();
    if (xv.rank() != 2 || i < 0 || i >= xv.dim(0)) throw std::invalid_argument("take_row: bad index");
    const std::int64_t D = xv.dim(1);
    Tensor out({1, D});
    for (std::int64_t j = 0; j < D; ++j) out[j] = xv.at(i, j);
    auto xn = x.node();
    return wrap(make_node(std::move(out), {xn}, [xn, i, D](Node& n) {
        if (!xn->requires_grad) return;
        Tensor& g = xn->ensure_grad();
        for (std::int64_t j = 0; j < D; ++j) g[i * D + j] += n.grad[j];
    }));
}

Var take_diag(const Var& x) {
    const Tensor& xv = x.value();
    if (xv.rank() != 2 || xv.dim(0) != xv.dim(1)) throw std::invalid_argument("take_diag: expects square");
    const std::int64_t B = xv.dim(0);
    Tensor out({B, 1});
    for (std::int64_t i = 0; i < B; ++i) out[i] = xv.at(i, i);
    auto xn = x.node();
    return wrap(make_node(std::move(out), {xn}, [xn, B](Node& n) {
        if (!xn->requires_grad) return;
        Tensor& g = xn->ensure_grad();
        for (std::int64_t i = 0; i < B; ++i) g[i * B + i] += n.grad[i];
    }));
}

// ---------------- reductions ----------------

Var sum_all(const Var& x) {
    double s = 0.0;
    for (std::int64_t i = 0; i < x.value().size(); ++i) s += x.value()[i];
    auto xn = x.node();
    return wrap(make_node(Tensor::scalar(s), {xn}, [xn](Node& n) {
        if (!xn->requires_grad) return;
        Tensor& g = xn->ensure_grad();
        for (std::int64_t i = 0; i < g.size(); ++i) g[i] += n.grad[0];
    }));
}

Var mean_all(const Var& x) {
    const std::int64_t cnt = x.value().size();
    double s = 0.0;
    for (std::int64_t i = 0; i < cnt; ++i) s += x.value()[i];
    auto xn = x.node();
    return wrap(make_node(Tensor::scalar(s / static_cast<double>(cnt)), {xn}, [xn, cnt](Node& n) {
        if (!xn->requires_grad) return;
        Tensor& g = xn->ensure_grad();
        const double gi = n.grad[0] / static_cast<double>(cnt);
        for (std::int64_t i = 0; i < g.size(); ++i) g[i] += gi;
    }));
}

Var mean_rows(const Var& x) {
    const Tensor& xv = x.value();
    if (xv.rank() != 2) throw std::invalid_argument("mean_rows: expects 2-D");
    const std::int64_t N = xv.dim(0), D = xv.dim(1);
    Tensor out({1, D});
    for (std::int64_t i = 0; i < N; ++i)
        for (std::int64_t j = 0; j < D; ++j) out[j] += xv.at(i, j);
    for (std::int64_t j = 0; j < D; ++j) out[j] /= static_cast<double>(N);
    auto xn = x.node();
    return wrap(make_node(std::move(out), {xn}, [xn, N, D](Node& n) {
        if (!xn->requires_grad) return;
        Tensor& g = xn->ensure_grad();
        for (std::int64_t i = 0; i < N; ++i)
            for (std::int64_t j = 0; j < D; ++j) g[i * D + j] += n.grad[j] / static_cast<double>(N);
    }));
}

Var sdiv(const Var& a, const Var& b) {
    if (a.value().size() != 1 || b.value().size() != 1)
        throw std::invalid_argument("sdiv: scalar inputs expected");
    const double av = a.value()[0], bv = b.value()[0];
    auto an = a.node(), bn = b.node();
    return wrap(make_node(Tensor::scalar(av / bv), {an, bn}, [an, bn, av, bv](Node& n) {
        if (an->requires_grad) an->ensure_grad()[0] += n.grad[0] / bv;
        if (bn->requires_grad) bn->ensure_grad()[0] -= n.grad[0] * av / (bv * bv);
    }));
}

// ---------------- normalizations / nn ----------------

Var softmax_rows(const Var& x, const Tensor* mask) {
    const Tensor& xv = x.value();
    if (xv.rank() != 2) throw std::invalid_argument("softmax_rows: expects 2-D");
    if (mask && !mask->same_shape(xv)) throw std::invalid_argument("softmax_rows: mask shape mismatch");
    const std::int64_t L = xv.dim(0), D = xv.dim(1);
    Tensor out({L, D});
    for (std::int64_t i = 0; i < L; ++i) {
        double m = -1e300;
        for (std::int64_t j = 0; j < D; ++j) {
            const double v = xv.at(i, j) + (mask ? mask->at(i, j) : 0.0);
            if (v > m) m = v;
        }
        double z = 0.0;
        for (std::int64_t j = 0; j < D; ++j) {
            const double v = xv.at(i, j) + (mask ? mask->at(i, j) : 0.0);
            out.at(i, j) = std::exp(v - m);
            z += out.at(i, j);
        }
        for (std::int64_t j = 0; j < D; ++j) out.at(i, j) /= z;
    }
    Tensor saved = out;
    auto xn = x.node();
    return wrap(make_node(std::move(out), {xn}, [xn, saved, L, D](Node& n) {
        if (!xn->requires_grad) return;
        Tensor& g = xn->ensure_grad();
        for (std::int64_t i = 0; i < L; ++i) {
            double dot = 0.0;
            for (std::int64_t j = 0; j < D; ++j) dot += n.grad[i * D + j] * saved[i * D + j];
            for (std::int64_t j = 0; j < D; ++j)
                g[i * D + j] += saved[i * D + j] * (n.grad[i * D + j] - dot);
        }
    }));
}

Var log_softmax_rows(const Var& x) {
    const Tensor& xv = x.value();
    if (xv.rank() != 2) throw std::invalid_argument("log_softmax_rows: expects 2-D");
    const std::int64_t L = xv.dim(0), D = xv.dim(1);
    Tensor out({L, D});
    Tensor soft({L, D});
    for (std::int64_t i = 0; i < L; ++i) {
        double m = -1e300;
        for (std::int64_t j = 0; j < D; ++j) m = std::max(m, xv.at(i, j));
        double z = 0.0;
        for (std::int64_t j = 0; j < D; ++j) z += std::exp(xv.at(i, j) - m);
        const double lz = std::log(z) + m;
        for (std::int64_t j = 0; j < D; ++j) {
            out.at(i, j) = xv.at(i, j) - lz;
            soft.at(i, j) = std::exp(out.at(i, j));
        }
    }
    auto xn = x.node();
    return wrap(make_node(std::move(out), {xn}, [xn, soft, L, D](Node& n) {
        if (!xn->requires_grad) return;
        Tensor& g = xn->ensure_grad();
        for (std::int64_t i = 0; i < L; ++i) {
            double gsum = 0.0;
            for (std::int64_t j = 0; j < D; ++j) gsum += n.grad[i * D + j];
            for (std::int64_t j = 0; j < D; ++j)
                g[i * D + j] += n.grad[i * D + j] - soft[i * D + j] * gsum;
        }
    }));
}

Var layer_norm(const Var& x, const Var& gain, const Var& bias, double eps) {
    const Tensor& xv = x.value();
    if (xv.rank() != 2) throw std::invalid_argument("layer_norm: expects 2-D");
    const std::int64_t L = xv.dim(0), D = xv.dim(1);
    if (gain.value().size() != D || bias.value().size() != D)
        throw std::invalid_argument("layer_norm: gain/bias size mismatch");
    Tensor out({L, D});
    Tensor xhat({L, D});
    Tensor inv_std({L});
    for (std::int64_t i = 0; i < L; ++i) {
        double mu = 0.0;
        for (std::int64_t j = 0; j < D; ++j) mu += xv.at(i, j);
        mu /= static_cast<double>(D);
        double var = 0.0;
        for (std::int64_t j = 0; j < D; ++j) {
            const double d = xv.at(i, j) - mu;
            var += d * d;
        }
        var /= static_cast<double>(D);
        const double is = 1.0 / std::sqrt(var + eps);
        inv_std[i] = is;
        for (std::int64_t j = 0; j < D; ++j) {
            xhat.at(i, j) = (xv.at(i, j) - mu) * is;
            out.at(i, j) = xhat.at(i, j) * gain.value()[j] + bias.value()[j];
        }
    }
    auto xn = x.node(), gn = gain.node(), bn = bias.node();
    return wrap(make_node(std::move(out), {xn, gn, bn}, [xn, gn, bn, xhat, inv_std, L, D](Node& n) {
        if (gn->requires_grad) {
            Tensor& gg = gn->ensure_grad();
            for (std::int64_t i = 0; i < L; ++i)
                for (std::int64_t j = 0; j < D; ++j) gg[j] += n.grad[i * D + j] * xhat[i * D + j];
        }
        if (bn->requires_grad) {
            Tensor& gb = bn->ensure_grad();
            for (std::int64_t i = 0; i < L; ++i)
                for (std::int64_t j = 0; j < D; ++j) gb[j] += n.grad[i * D + j];
        }
        if (xn->requires_grad) {
            Tensor& gx = xn->ensure_grad();
            for (std::int64_t i = 0; i < L; ++i) {
                double m1 = 0.0, m2 = 0.0;
                for (std::int64_t j = 0; j < D; ++j) {
                    const double dxh = n.grad[i * D + j] * gn->value[j];
                    m1 += dxh;
                    m2 += dxh * xhat[i * D + j];
                }
                m1 /= static_cast<double>(D);
                m2 /= static_cast<double>(D);
                for (std::int64_t j = 0; j < D; ++j) {
                    const double dxh = n.grad[i * D + j] * gn->value[j];
                    gx[i * D + j] += inv_std[i] * (dxh - m1 - xhat[i * D + j] * m2);
                }
            }
        }
    }));
}

Var l2_normalize_rows(const Var& x, double eps) {
    const Tensor& xv = x.value();
    if (xv.rank() != 2) throw std::invalid_argument("l2_normalize_rows: expects 2-D");
    const std::int64_t L = xv.dim(0), D = xv.dim(1);
    Tensor out({L, D});
    Tensor norms({L});
    for (std::int64_t i = 0; i < L; ++i) {
        double s = 0.0;
        for (std::int64_t j = 0; j < D; ++j) s += xv.at(i, j) * xv.at(i, j);
        const double nn = std::sqrt(s);
        norms[i] = nn;
        const double denom = nn > eps ? nn : eps;
        for (std::int64_t j = 0; j < D; ++j) out.at(i, j) = xv.at(i, j) / denom;
    }
    Tensor saved = out;
    auto xn = x.node();
    return wrap(make_node(std::move(out), {xn}, [xn, saved, norms, eps, L, D](Node& n) {
        if (!xn->requires_grad) return;
        Tensor& g = xn->ensure_grad();
        for (std::int64_t i = 0; i < L; ++i) {
            if (norms[i] > eps) {
                double dot = 0.0;
                for (std::int64_t j = 0; j < D; ++j) dot += n.grad[i * D + j] * saved[i * D + j];
                for (std::int64_t j = 0; j < D; ++j)
                    g[i * D + j] += (n.grad[i * D + j] - saved[i * D + j] * dot) / norms[i];
            } else {
                for (std::int64_t j = 0; j < D; ++j) g[i * D + j] += n.grad[i * D + j] / eps;
            }
        }
    }));
}

Var add_row_bias(const Var& x, const Var& b) {
    const Tensor& xv = x.value();
    if (xv.rank() != 2 || b.value().size() != xv.dim(1))
        throw std::invalid_argument("add_row_bias: shape mismatch");
    const std::int64_t L = xv.dim(0), D = xv.dim(1);
    Tensor out({L, D});
    for (std::int64_t i = 0; i < L; ++i)
        for (std::int64_t j = 0; j < D; ++j) out.at(i, j) = xv.at(i, j) + b.value()[j];
    auto xn = x.node(), bn = b.node();
    return wrap(make_node(std::move(out), {xn, bn}, [xn, bn, L, D](Node& n) {
        if (xn->requires_grad) accumulate(*xn, n.grad);
        if (bn->requires_grad) {
            Tensor& g = bn->ensure_grad();
            for (std::int64_t i = 0; i < L; ++i)
                for (std::int64_t j = 0; j < D; ++j) g[j] += n.grad[i * D + j];
        }
    }));
}

Var embedding(const Var& table, const std::vector<std::int64_t>& ids) {
    const Tensor& tv = table.value();
    if (tv.rank() != 2) throw std::invalid_argument("embedding: table must be 2-D");
    const std::int64_t V = tv.dim(0), D = tv.dim(1), L = static_cast<std::int64_t>(ids.size());
    for (auto id : ids)
        if (id < 0 || id >= V) throw std::invalid_argument("embedding: id out of range");
    Tensor out({L, D});
    for (std::int64_t i = 0; i < L; ++i)
        for (std::int64_t j = 0; j < D; ++j) out.at(i, j) = tv.at(ids[static_cast<std::size_t>(i)], j);
    auto tn = table.node();
    return wrap(make_node(std::move(out), {tn}, [tn, ids, L, D](Node& n) {
        if (!tn->requires_grad) return;
        Tensor& g = tn->ensure_grad();
        for (std::int64_t i = 0; i < L; ++i)
            for (std::int64_t j = 0; j < D; ++j)
                g[ids[static_cast<std::size_t>(i)] * D + j] += n.grad[i * D + j];
    }));
}

// ---------------- image ops ----------------

namespace {

// im2col: x [Cin,H,W] -> col [H'*W', Cin*kh*kw], zero padding.
Tensor im2col(const Tensor& x, int kh, int kw, int stride, int pad, std::int64_t oh, std::int64_t ow) {
    const std::int64_t C = x.dim(0), H = x.dim(1), W = x.dim(2);
    const std::int64_t K = C * kh * kw;
    Tensor col({oh * ow, K});
    for (std::int64_t oy = 0; oy < oh; ++oy) {
        for (std::int64_t ox = 0; ox < ow; ++ox) {
            const std::int64_t r = oy * ow + ox;
            std::int64_t k = 0;
            for (std::int64_t c = 0; c < C; ++c) {
                for (int dy = 0; dy < kh; ++dy) {
                    const std::int64_t y = oy * stride + dy - pad;
                    for (int dx = 0; dx < kw; ++dx, ++k) {
                        const std::int64_t xx = ox * stride + dx - pad;
                        col.at(r, k) = (y >= 0 && y < H && xx >= 0 && xx < W) ? x.at(c, y, xx) : 0.0;
                    }
                }
            }
        }
    }
    return col;
}

void col2im_add(Tensor& gx, const Tensor& gcol, int kh, int kw, int stride, int pad, std::int64_t oh,
                std::int64_t ow) {
    const std::int64_t C = gx.dim(0), H = gx.dim(1), W = gx.dim(2);
    for (std::int64_t oy = 0; oy < oh; ++oy) {
        for (std::int64_t ox = 0; ox < ow; ++ox) {
            const std::int64_t r = oy * ow + ox;
            std::int64_t k = 0;
            for (std::int64_t c = 0; c < C; ++c) {
                for (int dy = 0; dy < kh; ++dy) {
                    const std::int64_t y = oy * stride + dy - pad;
                    for (int dx = 0; dx < kw; ++dx, ++k) {
                        const std::int64_t xx = ox * stride + dx - pad;
                        if (y >= 0 && y < H && xx >= 0 && xx < W) gx.at(c, y, xx) += gcol.at(r, k);
                    }
                }
            }
        }
    }
}

}  // namespace

Var conv2d(const Var& x, const Var& w, const Var& b, int stride, int pad) {
    const Tensor& xv = x.value();
    const Tensor& wv = w.value();
    if (xv.rank() != 3 || wv.rank() != 4) throw std::invalid_argument("conv2d: expects x[C,H,W], w[O,C,kh,kw]");
    const std::int64_t Cin = xv.dim(0), H = xv.dim(1), W = xv.dim(2);
    const std::int64_t Cout = wv.dim(0);
    const int kh = static_cast<int>(wv.dim(2)), kw = static_cast<int>(wv.dim(3));
    if (wv.dim(1) != Cin) throw std::invalid_argument("conv2d: channel mismatch");
    if (b.value().size() != Cout) throw std::invalid_argument("conv2d: bias size mismatch");
    const std::int64_t oh = (H + 2 * pad - kh) / stride + 1;
    const std::int64_t ow = (W + 2 * pad - kw) / stride + 1;
    if (oh <= 0 || ow <= 0) throw std::invalid_argument("conv2d: non-positive output size");

    Tensor col = im2col(xv, kh, kw, stride, pad, oh, ow);  // [oh*ow, K]
    const std::int64_t K = Cin * kh * kw, P = oh * ow;
    Tensor out({Cout, oh, ow});
    {
        CMatMap Wm(wv.data(), Cout, K), Cm(col.data(), P, K);
        MatMap Om(out.data(), Cout, P);
        Om.noalias() = Wm * Cm.transpose();
    }
    for (std::int64_t c = 0; c < Cout; ++c)
        for (std::int64_t p = 0; p < P; ++p) out[c * P + p] += b.value()[c];

    auto xn = x.node(), wn = w.node(), bn = b.node();
    return wrap(make_node(std::move(out), {xn, wn, bn},
                          [xn, wn, bn, col, kh, kw, stride, pad, oh, ow, Cout, K, P](Node& n) {
                              CMatMap G(n.grad.data(), Cout, P);
                              if (bn->requires_grad) {
                                  Tensor& gb = bn->ensure_grad();
                                  for (std::int64_t c = 0; c < Cout; ++c) gb[c] += G.row(c).sum();
                              }
                              if (wn->requires_grad) {
                                  MatMap GW(wn->ensure_grad().data(), Cout, K);
                                  CMatMap Cm(col.data(), P, K);
                                  GW.noalias() += G * Cm;
                              }
                              if (xn->requires_grad) {
                                  Tensor gcol({P, K});
                                  MatMap GC(gcol.data(), P, K);
                                  CMatMap Wm(wn->value.data(), Cout, K);
                                  GC.noalias() = G.transpose() * Wm;
                                  col2im_add(xn->ensure_grad(), gcol, kh, kw, stride, pad, oh, ow);
                              }
                          }));
}

Var upsample_nearest2x(const Var& x) {
    const Tensor& xv = x.value();
    if (xv.rank() != 3) throw std::invalid_argument("upsample_nearest2x: expects [C,H,W]");
    const std::int64_t C = xv.dim(0), H = xv.dim(1), W = xv.dim(2);
    Tensor out({C, 2 * H, 2 * W});
    for (std::int64_t c = 0; c < C; ++c)
        for (std::int64_t y = 0; y < 2 * H; ++y)
            for (std::int64_t xx = 0; xx < 2 * W; ++xx) out.at(c, y, xx) = xv.at(c, y / 2, xx / 2);
    auto xn = x.node();
    return wrap(make_node(std::move(out), {xn}, [xn, C, H, W](Node& n) {
        if (!xn->requires_grad) return;
        Tensor& g = xn->ensure_grad();
        for (std::int64_t c = 0; c < C; ++c)
            for (std::int64_t y = 0; y < 2 * H; ++y)
                for (std::int64_t xx = 0; xx < 2 * W; ++xx)
                    g[(c * H + y / 2) * W + xx / 2] += n.grad[(c * 2 * H + y) * 2 * W + xx];
    }));
}

Var bilinear_resize(const Var& x, std::int64_t out_h, std::int64_t out_w) {
    const Tensor& xv = x.value();
    if (xv.rank() != 3) throw std::invalid_argument("bilinear_resize: expects [C,H,W]");
    const std::int64_t C = xv.dim(0), H = xv.dim(1), W = xv.dim(2);
    Tensor out({C, out_h, out_w});
    // Half-pixel-center sampling; coefficients depend only on geometry.
    struct Coef {
        std::int64_t y0, y1, x0, x1;
        double wy, wx;
    };
    std::vector<Coef> coefs(static_cast<std::size_t>(out_h * out_w));
    const double sy = static_cast<double>(H) / static_cast<double>(out_h);
    const double sx = static_cast<double>(W) / static_cast<double>(out_w);
    for (std::int64_t y = 0; y < out_h; ++y) {
        double fy = (static_cast<double>(y) + 0.5) * sy - 0.5;
        fy = std::min(std::max(fy, 0.0), static_cast<double>(H - 1));
        const std::int64_t y0 = static_cast<std::int64_t>(fy);
        const std::int64_t y1 = std::min(y0 + 1, H - 1);
        const double wy = fy - static_cast<double>(y0);
        for (std::int64_t xx = 0; xx < out_w; ++xx) {
            double fx = (static_cast<double>(xx) + 0.5) * sx - 0.5;
            fx = std::min(std::max(fx, 0.0), static_cast<double>(W - 1));
            const std::int64_t x0 = static_cast<std::int64_t>(fx);
            const std::int64_t x1 = std::min(x0 + 1, W - 1);
            const double wx = fx - static_cast<double>(x0);
            coefs[static_cast<std::size_t>(y * out_w + xx)] = {y0, y1, x0, x1, wy, wx};
        }
    }
    for (std::int64_t c = 0; c < C; ++c) {
        for (std::int64_t i = 0; i < out_h * out_w; ++i) {
            const Coef& k = coefs[static_cast<std::size_t>(i)];
            out[c * out_h * out_w + i] = (1.0 - k.wy) * (1.0 - k.wx) * xv.at(c, k.y0, k.x0) +
                                         (1.0 - k.wy) * k.wx * xv.at(c, k.y0, k.x1) +
                                         k.wy * (1.0 - k.wx) * xv.at(c, k.y1, k.x0) +
                                         k.wy * k.wx * xv.at(c, k.y1, k.x1);
        }
    }
    auto xn = x.node();
    return wrap(make_node(std::move(out), {xn}, [xn, coefs, C, H, W, out_h, out_w](Node& n) {
        if (!xn->requires_grad) return;
        Tensor& g = xn->ensure_grad();
        for (std::int64_t c = 0; c < C; ++c) {
            for (std::int64_t i = 0; i < out_h * out_w; ++i) {
                const auto& k = coefs[static_cast<std::size_t>(i)];
                const double gv = n.grad[c * out_h * out_w + i];
                g[(c * H + k.y0) * W + k.x0] += (1.0 - k.wy) * (1.0 - k.wx) * gv;
                g[(c * H + k.y0) * W + k.x1] += (1.0 - k.wy) * k.wx * gv;
                g[(c * H + k.y1) * W + k.x0] += k.wy * (1.0 - k.wx) * gv;
                g[(c * H + k.y1) * W + k.x1] += k.wy * k.wx * gv;
            }
        }
    }));
}

}  // namespace sseg::ag
