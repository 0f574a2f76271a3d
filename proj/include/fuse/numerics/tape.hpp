#pragma once

#include <cmath>
#include <cstddef>
#include <functional>
#include <stdexcept>
#include <unordered_map>
#include <utility>
#include <vector>

#include "fuse/numerics/matrix.hpp"
#include "fuse/numerics/parameter.hpp"

namespace fuse::num {

/// Handle to a value recorded on a Tape.
struct Var {
    std::size_t id = static_cast<std::size_t>(-1);
};

// Reverse-mode differentiation over whole matrices. Every op stores its
// forward value and a closure that pushes the output gradient back to its
// inputs. Parameters enter as leaves; backward() adds leaf gradients into
// Parameter::grad for trainable parameters only.
class Tape {
public:
    Tape() { nodes_.reserve(256); }
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    Var constant(Matrix m) { return push(std::move(m), false, {}); }

    Var param(Parameter& p) {
        if (auto it = param_leaf_.find(&p); it != param_leaf_.end()) return it->second;
        Var v = push(p.value, p.trainable, {});
        nodes_[v.id].param = &p;
        param_leaf_.emplace(&p, v);
        return v;
    }

    const Matrix& value(Var v) const { return nodes_.at(v.id).value; }
    double scalar(Var v) const {
        const Matrix& m = value(v);
        if (m.size() != 1) throw ShapeError("scalar: value is " + m.shape_str());
        return m[0];
    }
    /// Gradient of the last backward() with respect to v (empty if none reached it).
    const Matrix& grad(Var v) const { return nodes_.at(v.id).grad; }
    std::size_t size() const noexcept { return nodes_.size(); }

    void backward(Var loss) {
        Node& root = nodes_.at(loss.id);
        if (root.value.size() != 1) throw ShapeError("backward: loss must be 1x1, got " + root.value.shape_str());
        for (auto& n : nodes_) n.grad = Matrix();
        root.grad = Matrix(1, 1, 1.0);
        for (std::size_t i = loss.id + 1; i-- > 0;) {
            Node& n = nodes_[i];
            if (!n.requires_grad || n.grad.empty()) continue;
            if (n.backward) n.backward(*this, i);
            if (n.param && n.param->trainable) n.param->grad += n.grad;
        }
    }

    // ---- ops ----

    Var matmul(Var a, Var b) {
        const Matrix& av = value(a);
        const Matrix& bv = value(b);
        if (av.cols() != bv.rows())
            throw ShapeError("matmul: shape mismatch " + av.shape_str() + " * " + bv.shape_str());
        Matrix out(av.rows(), bv.cols());
        matmul_accumulate(av, bv, out);
        return push(std::move(out), needs(a, b), [a, b](Tape& t, std::size_t self) {
            const Matrix& g = t.nodes_[self].grad;
            if (t.needs(a)) matmul_nt_accumulate(g, t.value(b), t.grad_ref(a));
            if (t.needs(b)) matmul_tn_accumulate(t.value(a), g, t.grad_ref(b));
        });
    }

    Var add(Var a, Var b) {
        Matrix out = value(a);
        out += value(b);
        return push(std::move(out), needs(a, b), [a, b](Tape& t, std::size_t self) {
            const Matrix& g = t.nodes_[self].grad;
            if (t.needs(a)) t.grad_ref(a) += g;
            if (t.needs(b)) t.grad_ref(b) += g;
        });
    }

    Var sub(Var a, Var b) {
        Matrix out = value(a);
        out -= value(b);
        return push(std::move(out), needs(a, b), [a, b](Tape& t, std::size_t self) {
            const Matrix& g = t.nodes_[self].grad;
            if (t.needs(a)) t.grad_ref(a) += g;
            if (t.needs(b)) t.grad_ref(b) -= g;
        });
    }

    /// a (r x c) plus a 1 x c row broadcast over every row.
    Var add_row(Var a, Var row) {
        const Matrix& rv = value(row);
        Matrix out = value(a);
        if (rv.rows() != 1 || rv.cols() != out.cols())
            throw ShapeError("add_row: " + out.shape_str() + " + row " + rv.shape_str());
        for (std::size_t r = 0; r < out.rows(); ++r)
            for (std::size_t c = 0; c < out.cols(); ++c) out(r, c) += rv[c];
        return push(std::move(out), needs(a, row), [a, row](Tape& t, std::size_t self) {
            const Matrix& g = t.nodes_[self].grad;
            if (t.needs(a)) t.grad_ref(a) += g;
            if (t.needs(row)) {
                Matrix& gr = t.grad_ref(row);
                for (std::size_t r = 0; r < g.rows(); ++r)
                    for (std::size_t c = 0; c < g.cols(); ++c) gr[c] += g(r, c);
            }
        });
    }

    Var hadamard(Var a, Var b) {
        const Matrix& av = value(a);
        const Matrix& bv = value(b);
        if (!av.same_shape(bv)) throw ShapeError("hadamard: " + av.shape_str() + " vs " + bv.shape_str());
        Matrix out(av.rows(), av.cols());
        for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * bv[i];
        return push(std::move(out), needs(a, b), [a, b](Tape& t, std::size_t self) {
            const Matrix& g = t.nodes_[self].grad;
            if (t.needs(a)) {
                Matrix& ga = t.grad_ref(a);
                const Matrix& bv = t.value(b);
                for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * bv[i];
            }
            if (t.needs(b)) {
                Matrix& gb = t.grad_ref(b);
                const Matrix& av = t.value(a);
                for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * av[i];
            }
        });
    }

    /// a (r x c) scaled column-wise by a 1 x c row.
    Var mul_row(Var a, Var row) {
        const Matrix& rv = value(row);
        Matrix out = value(a);
        if (rv.rows() != 1 || rv.cols() != out.cols())
            throw ShapeError("mul_row: " + out.shape_str() + " * row " + rv.shape_str());
        for (std::size_t r = 0; r < out.rows(); ++r)
            for (std::size_t c = 0; c < out.cols(); ++c) out(r, c) *= rv[c];
        return push(std::move(out), needs(a, row), [a, row](Tape& t, std::size_t self) {
            const Matrix& g = t.nodes_[self].grad;
            const Matrix& rv = t.value(row);
            if (t.needs(a)) {
                Matrix& ga = t.grad_ref(a);
                for (std::size_t r = 0; r < g.rows(); ++r)
                    for (std::size_t c = 0; c < g.cols(); ++c) ga(r, c) += g(r, c) * rv[c];
            }
            if (t.needs(row)) {
                Matrix& gr = t.grad_ref(row);
                const Matrix& av = t.value(a);
                for (std::size_t r = 0; r < g.rows(); ++r)
                    for (std::size_t c = 0; c < g.cols(); ++c) gr[c] += g(r, c) * av(r, c);
            }
        });
    }

    Var scale(Var a, double s) {
        Matrix out = value(a);
        out *= s;
        return push(std::move(out), needs(a), [a, s](Tape& t, std::size_t self) {
            const Matrix& g = t.nodes_[self].grad;
            Matrix& ga = t.grad_ref(a);
            for (std::size_t i = 0; i < g.size(); ++i) ga[i] += s * g[i];
        });
    }

    Var add_scalar(Var a, double s) {
        Matrix out = value(a);
        for (double& v : out.values()) v += s;
        return push(std::move(out), needs(a), [a](Tape& t, std::size_t self) {
            t.grad_ref(a) += t.nodes_[self].grad;
        });
    }

    Var relu(Var a) {
        Matrix out = value(a);
        for (double& v : out.values()) v = v > 0.0 ? v : 0.0;
        return push(std::move(out), needs(a), [a](Tape& t, std::size_t self) {
            const Matrix& g = t.nodes_[self].grad;
            const Matrix& x = t.value(a);
            Matrix& ga = t.grad_ref(a);
            for (std::size_t i = 0; i < g.size(); ++i)
                if (x[i] > 0.0) ga[i] += g[i];
        });
    }

    Var sigmoid(Var a) {
        Matrix out = value(a);
        for (double& v : out.values()) v = 1.0 / (1.0 + std::exp(-v));
        return push(std::move(out), needs(a), [a](Tape& t, std::size_t self) {
            const Matrix& g = t.nodes_[self].grad;
            const Matrix& y = t.nodes_[self].value;
            Matrix& ga = t.grad_ref(a);
            for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * y[i] * (1.0 - y[i]);
        });
    }

    Var transpose(Var a) {
        return push(num::transpose(value(a)), needs(a), [a](Tape& t, std::size_t self) {
            t.grad_ref(a) += num::transpose(t.nodes_[self].grad);
        });
    }

    Var softmax_rows(Var a) {
        return push(num::softmax_rows(value(a)), needs(a), [a](Tape& t, std::size_t self) {
            const Matrix& g = t.nodes_[self].grad;
            const Matrix& y = t.nodes_[self].value;
            Matrix& ga = t.grad_ref(a);
            for (std::size_t r = 0; r < y.rows(); ++r) {
                double dot = 0.0;
                for (std::size_t c = 0; c < y.cols(); ++c) dot += g(r, c) * y(r, c);
                for (std::size_t c = 0; c < y.cols(); ++c) ga(r, c) += y(r, c) * (g(r, c) - dot);
            }
        });
    }

    Var layer_norm_rows(Var x, Var gamma, Var beta, double eps = kDefaultLayerNormEps) {
        const Matrix& xv = value(x);
        const Matrix& gv = value(gamma);
        const Matrix& bv = value(beta);
        if (gv.size() != xv.cols() || bv.size() != xv.cols())
            throw ShapeError("layer_norm_rows: gamma/beta " + gv.shape_str() + "/" + bv.shape_str() +
                             " for input " + xv.shape_str());
        if (!(eps > 0.0)) throw std::invalid_argument("layer_norm_rows: eps must be positive");
        const std::size_t rows = xv.rows(), cols = xv.cols();
        const double n = static_cast<double>(cols);
        Matrix xhat(rows, cols);
        std::vector<double> inv(rows);
        Matrix out(rows, cols);
        for (std::size_t r = 0; r < rows; ++r) {
            double mean = 0.0;
            for (std::size_t c = 0; c < cols; ++c) mean += xv(r, c);
            mean /= n;
            double var = 0.0;
            for (std::size_t c = 0; c < cols; ++c) var += (xv(r, c) - mean) * (xv(r, c) - mean);
            var /= n;
            inv[r] = 1.0 / std::sqrt(var + eps);
            for (std::size_t c = 0; c < cols; ++c) {
                xhat(r, c) = (xv(r, c) - mean) * inv[r];
                out(r, c) = xhat(r, c) * gv[c] + bv[c];
            }
        }
        return push(std::move(out), needs(x, gamma) || needs(beta),
                    [x, gamma, beta, xhat = std::move(xhat), inv = std::move(inv)](Tape& t, std::size_t self) {
                        const Matrix& g = t.nodes_[self].grad;
                        const std::size_t rows = g.rows(), cols = g.cols();
                        const double n = static_cast<double>(cols);
                        if (t.needs(gamma)) {
                            Matrix& gg = t.grad_ref(gamma);
                            for (std::size_t r = 0; r < rows; ++r)
                                for (std::size_t c = 0; c < cols; ++c) gg[c] += g(r, c) * xhat(r, c);
                        }
                        if (t.needs(beta)) {
                            Matrix& gb = t.grad_ref(beta);
                            for (std::size_t r = 0; r < rows; ++r)
                                for (std::size_t c = 0; c < cols; ++c) gb[c] += g(r, c);
                        }
                        if (t.needs(x)) {
                            const Matrix& gv = t.value(gamma);
                            Matrix& gx = t.grad_ref(x);
                            std::vector<double> dxhat(cols);
                            for (std::size_t r = 0; r < rows; ++r) {
                                double s1 = 0.0, s2 = 0.0;
                                for (std::size_t c = 0; c < cols; ++c) {
                                    dxhat[c] = g(r, c) * gv[c];
                                    s1 += dxhat[c];
                                    s2 += dxhat[c] * xhat(r, c);
                                }
                                for (std::size_t c = 0; c < cols; ++c)
                                    gx(r, c) += inv[r] / n * (n * dxhat[c] - s1 - xhat(r, c) * s2);
                            }
                        }
                    });
    }

    Var slice_cols(Var a, std::size_t c0, std::size_t c1) {
        const Matrix& av = value(a);
        if (c0 > c1 || c1 > av.cols())
            throw ShapeError("slice_cols: [" + std::to_string(c0) + "," + std::to_string(c1) + ") of " + av.shape_str());
        Matrix out(av.rows(), c1 - c0);
        for (std::size_t r = 0; r < av.rows(); ++r)
            for (std::size_t c = c0; c < c1; ++c) out(r, c - c0) = av(r, c);
        return push(std::move(out), needs(a), [a, c0, c1](Tape& t, std::size_t self) {
            const Matrix& g = t.nodes_[self].grad;
            Matrix& ga = t.grad_ref(a);
            for (std::size_t r = 0; r < g.rows(); ++r)
                for (std::size_t c = c0; c < c1; ++c) ga(r, c) += g(r, c - c0);
        });
    }

    Var concat_cols(const std::vector<Var>& parts) {
        if (parts.empty()) throw ShapeError("concat_cols: no inputs");
        const std::size_t rows = value(parts[0]).rows();
        std::size_t cols = 0;
        bool req = false;
        for (Var p : parts) {
            if (value(p).rows() != rows)
                throw ShapeError("concat_cols: row mismatch " + value(parts[0]).shape_str() + " vs " + value(p).shape_str());
            cols += value(p).cols();
            req = req || needs(p);
        }
        Matrix out(rows, cols);
        std::size_t off = 0;
        for (Var p : parts) {
            const Matrix& pv = value(p);
            for (std::size_t r = 0; r < rows; ++r)
                for (std::size_t c = 0; c < pv.cols(); ++c) out(r, off + c) = pv(r, c);
            off += pv.cols();
        }
        return push(std::move(out), req, [parts](Tape& t, std::size_t self) {
            const Matrix& g = t.nodes_[self].grad;
            std::size_t off = 0;
            for (Var p : parts) {
                const std::size_t pc = t.value(p).cols();
                if (t.needs(p)) {
                    Matrix& gp = t.grad_ref(p);
                    for (std::size_t r = 0; r < g.rows(); ++r)
                        for (std::size_t c = 0; c < pc; ++c) gp(r, c) += g(r, off + c);
                }
                off += pc;
            }
        });
    }

    /// Single row r of a, as 1 x cols.
    Var row(Var a, std::size_t r) {
        const Matrix& av = value(a);
        if (r >= av.rows()) throw ShapeError("row: index " + std::to_string(r) + " of " + av.shape_str());
        Matrix out(1, av.cols());
        for (std::size_t c = 0; c < av.cols(); ++c) out[c] = av(r, c);
        return push(std::move(out), needs(a), [a, r](Tape& t, std::size_t self) {
            const Matrix& g = t.nodes_[self].grad;
            Matrix& ga = t.grad_ref(a);
            for (std::size_t c = 0; c < g.cols(); ++c) ga(r, c) += g[c];
        });
    }

    Var sum(Var a) {
        double s = 0.0;
        for (double v : value(a).values()) s += v;
        return push(Matrix(1, 1, s), needs(a), [a](Tape& t, std::size_t self) {
            const double g = t.nodes_[self].grad[0];
            for (double& v : t.grad_ref(a).values()) v += g;
        });
    }

    /// sum over entries of mask * |a - target|; target and mask are constants.
    Var masked_abs_sum(Var a, const Matrix& target, const Matrix& mask) {
        const Matrix& av = value(a);
        if (!av.same_shape(target) || !av.same_shape(mask))
            throw ShapeError("masked_abs_sum: " + av.shape_str() + " vs target " + target.shape_str() +
                             " / mask " + mask.shape_str());
        Matrix sign(av.rows(), av.cols());
        double s = 0.0;
        for (std::size_t i = 0; i < av.size(); ++i) {
            if (mask[i] == 0.0) continue;
            const double d = av[i] - target[i];
            s += mask[i] * std::abs(d);
            sign[i] = mask[i] * (d > 0.0 ? 1.0 : (d < 0.0 ? -1.0 : 0.0));
        }
        return push(Matrix(1, 1, s), needs(a), [a, sign = std::move(sign)](Tape& t, std::size_t self) {
            const double g = t.nodes_[self].grad[0];
            Matrix& ga = t.grad_ref(a);
            for (std::size_t i = 0; i < sign.size(); ++i) ga[i] += g * sign[i];
        });
    }

    /// Half the squared Frobenius norm.
    Var half_sum_squares(Var a) {
        double s = 0.0;
        for (double v : value(a).values()) s += v * v;
        return push(Matrix(1, 1, 0.5 * s), needs(a), [a](Tape& t, std::size_t self) {
            const double g = t.nodes_[self].grad[0];
            const Matrix& x = t.value(a);
            Matrix& ga = t.grad_ref(a);
            for (std::size_t i = 0; i < x.size(); ++i) ga[i] += g * x[i];
        });
    }

private:
    using Backward = std::function<void(Tape&, std::size_t)>;

    struct Node {
        Matrix value;
        Matrix grad;
        bool requires_grad = false;
        Parameter* param = nullptr;
        Backward backward;
    };

    Var push(Matrix value, bool requires_grad, Backward bw) {
        nodes_.push_back(Node{std::move(value), Matrix(), requires_grad, nullptr, std::move(bw)});
        return Var{nodes_.size() - 1};
    }

    bool needs(Var a) const { return nodes_[a.id].requires_grad; }
    bool needs(Var a, Var b) const { return needs(a) || needs(b); }

    Matrix& grad_ref(Var v) {
        Node& n = nodes_[v.id];
        if (n.grad.empty()) n.grad = Matrix(n.value.rows(), n.value.cols());
        return n.grad;
    }

    std::vector<Node> nodes_;
    std::unordered_map<const Parameter*, Var> param_leaf_;
};

}  // namespace fuse::num
