#include "crft/ops.hpp"

#include <Eigen/Core>
#include <cmath>
#include <limits>
#include <string>

namespace crft::ops {
namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<RowMat>;
using ConstMatMap = Eigen::Map<const RowMat>;
using ConstVecMap = Eigen::Map<const Eigen::VectorXd>;

ConstMatMap as_mat(const Tensor& x) {
    return {x.data(), static_cast<Eigen::Index>(x.rows()), static_cast<Eigen::Index>(x.cols())};
}

MatMap as_mat(Tensor& x) {
    return {x.data(), static_cast<Eigen::Index>(x.rows()), static_cast<Eigen::Index>(x.cols())};
}

void require_matrix(const Tensor& x, const char* op) {
    if (x.rank() != 2) {
        throw ShapeError(std::string(op) + ": expected a matrix, got " + shape_string(x.shape()));
    }
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (a.shape() != b.shape()) {
        throw ShapeError(std::string(op) + ": shape mismatch " + shape_string(a.shape()) + " vs " +
                         shape_string(b.shape()));
    }
}

void accumulate(Tape& t, Var target, const Tensor& delta) {
    if (!t.requires_grad(target)) return;
    Tensor& g = t.grad_slot(target);
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += delta[i];
}

}  // namespace

Var matmul(Tape& t, Var a, Var b) {
    const Tensor& av = t.value(a);
    const Tensor& bv = t.value(b);
    require_matrix(av, "matmul");
    require_matrix(bv, "matmul");
    if (av.cols() != bv.rows()) {
        throw ShapeError("matmul: inner dimensions differ " + shape_string(av.shape()) + " x " +
                         shape_string(bv.shape()));
    }
    Tensor out({av.rows(), bv.cols()});
    as_mat(out).noalias() = as_mat(av) * as_mat(bv);
    return t.record(std::move(out), {a, b}, [a, b](Tape& t, Var self) {
        const Tensor& g = t.grad_slot(self);
        if (t.requires_grad(a)) as_mat(t.grad_slot(a)).noalias() += as_mat(g) * as_mat(t.value(b)).transpose();
        if (t.requires_grad(b)) as_mat(t.grad_slot(b)).noalias() += as_mat(t.value(a)).transpose() * as_mat(g);
    });
}

Var matmul_nt(Tape& t, Var a, Var b) {
    const Tensor& av = t.value(a);
    const Tensor& bv = t.value(b);
    require_matrix(av, "matmul_nt");
    require_matrix(bv, "matmul_nt");
    if (av.cols() != bv.cols()) {
        throw ShapeError("matmul_nt: inner dimensions differ " + shape_string(av.shape()) +
                         " x " + shape_string(bv.shape()) + "^T");
    }
    Tensor out({av.rows(), bv.rows()});
    as_mat(out).noalias() = as_mat(av) * as_mat(bv).transpose();
    return t.record(std::move(out), {a, b}, [a, b](Tape& t, Var self) {
        const Tensor& g = t.grad_slot(self);
        if (t.requires_grad(a)) as_mat(t.grad_slot(a)).noalias() += as_mat(g) * as_mat(t.value(b));
        if (t.requires_grad(b)) as_mat(t.grad_slot(b)).noalias() += as_mat(g).transpose() * as_mat(t.value(a));
    });
}

Var add(Tape& t, Var a, Var b) {
    const Tensor& av = t.value(a);
    const Tensor& bv = t.value(b);
    require_same_shape(av, bv, "add");
    Tensor out = av;
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += bv[i];
    out.requires_grad = false;
    return t.record(std::move(out), {a, b}, [a, b](Tape& t, Var self) {
        const Tensor& g = t.grad_slot(self);
        accumulate(t, a, g);
        accumulate(t, b, g);
    });
}

Var sub(Tape& t, Var a, Var b) {
    const Tensor& av = t.value(a);
    const Tensor& bv = t.value(b);
    require_same_shape(av, bv, "sub");
    Tensor out = av;
    for (std::size_t i = 0; i < out.size(); ++i) out[i] -= bv[i];
    out.requires_grad = false;
    return t.record(std::move(out), {a, b}, [a, b](Tape& t, Var self) {
        const Tensor& g = t.grad_slot(self);
        accumulate(t, a, g);
        if (t.requires_grad(b)) {
            Tensor& gb = t.grad_slot(b);
            for (std::size_t i = 0; i < gb.size(); ++i) gb[i] -= g[i];
        }
    });
}

Var mul(Tape& t, Var a, Var b) {
    const Tensor& av = t.value(a);
    const Tensor& bv = t.value(b);
    require_same_shape(av, bv, "mul");
    Tensor out = av;
    for (std::size_t i = 0; i < out.size(); ++i) out[i] *= bv[i];
    out.requires_grad = false;
    return t.record(std::move(out), {a, b}, [a, b](Tape& t, Var self) {
        const Tensor& g = t.grad_slot(self);
        if (t.requires_grad(a)) {
            Tensor& ga = t.grad_slot(a);
            const Tensor& bv = t.value(b);
            for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += g[i] * bv[i];
        }
        if (t.requires_grad(b)) {
            Tensor& gb = t.grad_slot(b);
            const Tensor& av = t.value(a);
            for (std::size_t i = 0; i < gb.size(); ++i) gb[i] += g[i] * av[i];
        }
    });
}

Var scale(Tape& t, Var a, double s) {
    Tensor out = t.value(a);
    for (std::size_t i = 0; i < out.size(); ++i) out[i] *= s;
    out.requires_grad = false;
    return t.record(std::move(out), {a}, [a, s](Tape& t, Var self) {
        const Tensor& g = t.grad_slot(self);
        Tensor& ga = t.grad_slot(a);
        for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += s * g[i];
    });
}

Var add_row(Tape& t, Var x, Var b) {
    const Tensor& xv = t.value(x);
    const Tensor& bv = t.value(b);
    require_matrix(xv, "add_row");
    if (bv.rank() != 1 || bv.size() != xv.cols()) {
        throw ShapeError("add_row: bias " + shape_string(bv.shape()) + " does not match " +
                         shape_string(xv.shape()));
    }
    Tensor out = xv;
    out.requires_grad = false;
    as_mat(out).rowwise() += ConstVecMap(bv.data(), static_cast<Eigen::Index>(bv.size())).transpose();
    return t.record(std::move(out), {x, b}, [x, b](Tape& t, Var self) {
        const Tensor& g = t.grad_slot(self);
        accumulate(t, x, g);
        if (t.requires_grad(b)) {
            Tensor& gb = t.grad_slot(b);
            for (std::size_t r = 0; r < g.rows(); ++r) {
                auto row = g.row(r);
                for (std::size_t c = 0; c < row.size(); ++c) gb[c] += row[c];
            }
        }
    });
}

Var sum(Tape& t, Var a) {
    const Tensor& av = t.value(a);
    double s = 0.0;
    for (double v : av.values()) s += v;
    return t.record(Tensor::scalar(s), {a}, [a](Tape& t, Var self) {
        const double g = t.grad_slot(self)[0];
        Tensor& ga = t.grad_slot(a);
        for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += g;
    });
}

Var gelu(Tape& t, Var x) {
    constexpr double c = 0.7978845608028654;  // sqrt(2/pi)
    constexpr double k = 0.044715;
    Tensor out = t.value(x);
    out.requires_grad = false;
    for (double& v : out.values()) {
        const double u = c * (v + k * v * v * v);
        v = 0.5 * v * (1.0 + std::tanh(u));
    }
    return t.record(std::move(out), {x}, [x](Tape& t, Var self) {
        const Tensor& g = t.grad_slot(self);
        const Tensor& xv = t.value(x);
        Tensor& gx = t.grad_slot(x);
        for (std::size_t i = 0; i < gx.size(); ++i) {
            const double v = xv[i];
            const double th = std::tanh(c * (v + k * v * v * v));
            const double d = 0.5 * (1.0 + th) + 0.5 * v * (1.0 - th * th) * c * (1.0 + 3.0 * k * v * v);
            gx[i] += g[i] * d;
        }
    });
}

Var layer_norm(Tape& t, Var x, Var gain, Var bias, double eps) {
    const Tensor& xv = t.value(x);
    require_matrix(xv, "layer_norm");
    const std::size_t n = xv.rows();
    const std::size_t d = xv.cols();
    if (t.value(gain).size() != d || t.value(bias).size() != d) {
        throw ShapeError("layer_norm: affine parameters do not match width " + std::to_string(d));
    }
    Tensor xhat({n, d});
    std::vector<double> rstd(n);
    const Tensor& gv = t.value(gain);
    const Tensor& bv = t.value(bias);
    Tensor out({n, d});
    for (std::size_t r = 0; r < n; ++r) {
        auto row = xv.row(r);
        double mean = 0.0;
        for (double v : row) mean += v;
        mean /= static_cast<double>(d);
        double var = 0.0;
        for (double v : row) var += (v - mean) * (v - mean);
        var /= static_cast<double>(d);
        rstd[r] = 1.0 / std::sqrt(var + eps);
        for (std::size_t c = 0; c < d; ++c) {
            xhat(r, c) = (row[c] - mean) * rstd[r];
            out(r, c) = xhat(r, c) * gv[c] + bv[c];
        }
    }
    return t.record(std::move(out), {x, gain, bias},
                    [x, gain, bias, xhat = std::move(xhat), rstd = std::move(rstd)](Tape& t, Var self) {
        const Tensor& g = t.grad_slot(self);
        const std::size_t n = xhat.rows();
        const std::size_t d = xhat.cols();
        if (t.requires_grad(gain) || t.requires_grad(bias)) {
            const bool want_g = t.requires_grad(gain);
            const bool want_b = t.requires_grad(bias);
            for (std::size_t r = 0; r < n; ++r) {
                for (std::size_t c = 0; c < d; ++c) {
                    if (want_g) t.grad_slot(gain)[c] += g(r, c) * xhat(r, c);
                    if (want_b) t.grad_slot(bias)[c] += g(r, c);
                }
            }
        }
        if (t.requires_grad(x)) {
            const Tensor& gv = t.value(gain);
            Tensor& gx = t.grad_slot(x);
            const double inv_d = 1.0 / static_cast<double>(d);
            for (std::size_t r = 0; r < n; ++r) {
                double mean_dy = 0.0;
                double mean_dy_xhat = 0.0;
                for (std::size_t c = 0; c < d; ++c) {
                    const double dy = g(r, c) * gv[c];
                    mean_dy += dy;
                    mean_dy_xhat += dy * xhat(r, c);
                }
                mean_dy *= inv_d;
                mean_dy_xhat *= inv_d;
                for (std::size_t c = 0; c < d; ++c) {
                    const double dy = g(r, c) * gv[c];
                    gx(r, c) += rstd[r] * (dy - mean_dy - xhat(r, c) * mean_dy_xhat);
                }
            }
        }
    });
}

Var softmax_causal(Tape& t, Var scores) {
    const Tensor& sv = t.value(scores);
    require_matrix(sv, "softmax_causal");
    const std::size_t n = sv.rows();
    if (n == 0) throw ShapeError("softmax_causal: empty matrix");
    if (sv.cols() != n) {
        throw ShapeError("softmax_causal: expected a square matrix, got " + shape_string(sv.shape()));
    }
    Tensor out({n, n}, 0.0);
    for (std::size_t i = 0; i < n; ++i) {
        double mx = -std::numeric_limits<double>::infinity();
        for (std::size_t j = 0; j <= i; ++j) mx = std::max(mx, sv(i, j));
        double z = 0.0;
        for (std::size_t j = 0; j <= i; ++j) {
            out(i, j) = std::exp(sv(i, j) - mx);
            z += out(i, j);
        }
        for (std::size_t j = 0; j <= i; ++j) out(i, j) /= z;
    }
    return t.record(std::move(out), {scores}, [scores](Tape& t, Var self) {
        const Tensor& g = t.grad_slot(self);
        const Tensor& p = t.value(self);
        Tensor& gs = t.grad_slot(scores);
        const std::size_t n = p.rows();
        for (std::size_t i = 0; i < n; ++i) {
            double dot = 0.0;
            for (std::size_t j = 0; j <= i; ++j) dot += p(i, j) * g(i, j);
            for (std::size_t j = 0; j <= i; ++j) gs(i, j) += p(i, j) * (g(i, j) - dot);
        }
    });
}

Var cross_entropy(Tape& t, Var logits, std::span<const int> labels) {
    const Tensor& lv = t.value(logits);
    require_matrix(lv, "cross_entropy");
    const std::size_t n = lv.rows();
    const std::size_t v = lv.cols();
    if (labels.size() != n) {
        throw ShapeError("cross_entropy: " + std::to_string(labels.size()) + " labels for " +
                         std::to_string(n) + " positions");
    }
    Tensor probs({n, v}, 0.0);
    std::vector<int> kept(labels.begin(), labels.end());
    double total = 0.0;
    std::size_t scored = 0;
    for (std::size_t r = 0; r < n; ++r) {
        const int label = labels[r];
        if (label < 0) continue;
        if (static_cast<std::size_t>(label) >= v) {
            throw std::out_of_range("cross_entropy: label " + std::to_string(label) +
                                    " outside vocabulary of size " + std::to_string(v));
        }
        auto row = lv.row(r);
        double mx = -std::numeric_limits<double>::infinity();
        for (double x : row) mx = std::max(mx, x);
        double z = 0.0;
        for (std::size_t c = 0; c < v; ++c) {
            probs(r, c) = std::exp(row[c] - mx);
            z += probs(r, c);
        }
        for (std::size_t c = 0; c < v; ++c) probs(r, c) /= z;
        total += -(row[static_cast<std::size_t>(label)] - mx - std::log(z));
        ++scored;
    }
    if (scored == 0) throw std::invalid_argument("cross_entropy: no scored positions");
    const double inv = 1.0 / static_cast<double>(scored);
    return t.record(Tensor::scalar(total * inv), {logits},
                    [logits, inv, probs = std::move(probs), kept = std::move(kept)](Tape& t, Var self) {
        const double g = t.grad_slot(self)[0] * inv;
        Tensor& gl = t.grad_slot(logits);
        for (std::size_t r = 0; r < kept.size(); ++r) {
            if (kept[r] < 0) continue;
            for (std::size_t c = 0; c < probs.cols(); ++c) gl(r, c) += g * probs(r, c);
            gl(r, static_cast<std::size_t>(kept[r])) -= g;
        }
    });
}

Var embedding(Tape& t, Var table, std::span<const int> ids) {
    const Tensor& tv = t.value(table);
    require_matrix(tv, "embedding");
    for (int id : ids) {
        if (id < 0 || static_cast<std::size_t>(id) >= tv.rows()) {
            throw std::out_of_range("embedding: index " + std::to_string(id) +
                                    " outside table of " + std::to_string(tv.rows()) + " rows");
        }
    }
    return gather_rows(t, table, ids);
}

Var slice_rows(Tape& t, Var x, std::size_t begin, std::size_t count) {
    const Tensor& xv = t.value(x);
    require_matrix(xv, "slice_rows");
    if (begin + count > xv.rows()) throw ShapeError("slice_rows: range exceeds rows");
    const std::size_t d = xv.cols();
    Tensor out({count, d});
    std::copy_n(xv.data() + begin * d, count * d, out.data());
    return t.record(std::move(out), {x}, [x, begin](Tape& t, Var self) {
        const Tensor& g = t.grad_slot(self);
        Tensor& gx = t.grad_slot(x);
        double* dst = gx.data() + begin * g.cols();
        for (std::size_t i = 0; i < g.size(); ++i) dst[i] += g[i];
    });
}

Var slice_cols(Tape& t, Var x, std::size_t begin, std::size_t count) {
    const Tensor& xv = t.value(x);
    require_matrix(xv, "slice_cols");
    if (begin + count > xv.cols()) throw ShapeError("slice_cols: range exceeds columns");
    Tensor out({xv.rows(), count});
    for (std::size_t r = 0; r < xv.rows(); ++r) {
        std::copy_n(xv.row(r).data() + begin, count, out.row(r).data());
    }
    return t.record(std::move(out), {x}, [x, begin](Tape& t, Var self) {
        const Tensor& g = t.grad_slot(self);
        Tensor& gx = t.grad_slot(x);
        for (std::size_t r = 0; r < g.rows(); ++r) {
            auto src = g.row(r);
            auto dst = gx.row(r);
            for (std::size_t c = 0; c < src.size(); ++c) dst[begin + c] += src[c];
        }
    });
}

Var concat_cols(Tape& t, const std::vector<Var>& parts) {
    if (parts.empty()) throw ShapeError("concat_cols: no inputs");
    const std::size_t n = t.value(parts.front()).rows();
    std::size_t width = 0;
    for (Var p : parts) {
        const Tensor& pv = t.value(p);
        require_matrix(pv, "concat_cols");
        if (pv.rows() != n) throw ShapeError("concat_cols: row counts differ");
        width += pv.cols();
    }
    Tensor out({n, width});
    std::size_t offset = 0;
    for (Var p : parts) {
        const Tensor& pv = t.value(p);
        for (std::size_t r = 0; r < n; ++r) std::copy_n(pv.row(r).data(), pv.cols(), out.row(r).data() + offset);
        offset += pv.cols();
    }
    return t.record(std::move(out), parts, [parts](Tape& t, Var self) {
        const Tensor& g = t.grad_slot(self);
        std::size_t offset = 0;
        for (Var p : parts) {
            const std::size_t w = t.value(p).cols();
            if (t.requires_grad(p)) {
                Tensor& gp = t.grad_slot(p);
                for (std::size_t r = 0; r < g.rows(); ++r) {
                    const double* src = g.row(r).data() + offset;
                    auto dst = gp.row(r);
                    for (std::size_t c = 0; c < w; ++c) dst[c] += src[c];
                }
            }
            offset += w;
        }
    });
}

Var gather_rows(Tape& t, Var x, std::span<const int> rows) {
    const Tensor& xv = t.value(x);
    require_matrix(xv, "gather_rows");
    const std::size_t d = xv.cols();
    Tensor out({rows.size(), d});
    for (std::size_t k = 0; k < rows.size(); ++k) {
        if (rows[k] < 0 || static_cast<std::size_t>(rows[k]) >= xv.rows()) {
            throw std::out_of_range("gather_rows: row " + std::to_string(rows[k]) + " out of range");
        }
        std::copy_n(xv.row(static_cast<std::size_t>(rows[k])).data(), d, out.row(k).data());
    }
    return t.record(std::move(out), {x}, [x, idx = std::vector<int>(rows.begin(), rows.end())](Tape& t, Var self) {
        const Tensor& g = t.grad_slot(self);
        Tensor& gx = t.grad_slot(x);
        for (std::size_t k = 0; k < idx.size(); ++k) {
            auto src = g.row(k);
            auto dst = gx.row(static_cast<std::size_t>(idx[k]));
            for (std::size_t c = 0; c < src.size(); ++c) dst[c] += src[c];
        }
    });
}

Var scatter_add_rows(Tape& t, Var x, std::span<const int> rows, Var delta) {
    const Tensor& xv = t.value(x);
    const Tensor& dv = t.value(delta);
    require_matrix(xv, "scatter_add_rows");
    require_matrix(dv, "scatter_add_rows");
    if (dv.rows() != rows.size() || dv.cols() != xv.cols()) {
        throw ShapeError("scatter_add_rows: delta " + shape_string(dv.shape()) + " for " +
                         std::to_string(rows.size()) + " rows of " + shape_string(xv.shape()));
    }
    Tensor out = xv;
    out.requires_grad = false;
    for (std::size_t k = 0; k < rows.size(); ++k) {
        if (rows[k] < 0 || static_cast<std::size_t>(rows[k]) >= xv.rows()) {
            throw std::out_of_range("scatter_add_rows: row " + std::to_string(rows[k]) + " out of range");
        }
        auto dst = out.row(static_cast<std::size_t>(rows[k]));
        auto src = dv.row(k);
        for (std::size_t c = 0; c < dst.size(); ++c) dst[c] += src[c];
    }
    return t.record(std::move(out), {x, delta},
                    [x, delta, idx = std::vector<int>(rows.begin(), rows.end())](Tape& t, Var self) {
        const Tensor& g = t.grad_slot(self);
        accumulate(t, x, g);
        if (t.requires_grad(delta)) {
            Tensor& gd = t.grad_slot(delta);
            for (std::size_t k = 0; k < idx.size(); ++k) {
                auto src = g.row(static_cast<std::size_t>(idx[k]));
                auto dst = gd.row(k);
                for (std::size_t c = 0; c < dst.size(); ++c) dst[c] += src[c];
            }
        }
    });
}

}  // namespace crft::ops
