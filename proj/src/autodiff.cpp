// SPDX-License-Identifier: Apache-2.0

#include "clearair/autodiff.hpp"

#include <Eigen/Core>
#include <cmath>
#include <utility>

#include "clearair/errors.hpp"

namespace clearair::ad {

namespace {

using MatRM = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapM = Eigen::Map<MatRM>;
using CMapM = Eigen::Map<const MatRM>;

CMapM as_mat(const Tensor& t) {
    return CMapM(t.data(), t.dim(0), t.dim(1));
}
MapM as_mat(Tensor& t) {
    return MapM(t.data(), t.dim(0), t.dim(1));
}
// Views a [C,H,W] map as a [C, H*W] matrix.
CMapM as_chw_mat(const Tensor& t) {
    return CMapM(t.data(), t.dim(0), static_cast<Eigen::Index>(t.dim(1)) * t.dim(2));
}
MapM as_chw_mat(Tensor& t) {
    return MapM(t.data(), t.dim(0), static_cast<Eigen::Index>(t.dim(1)) * t.dim(2));
}

void require(bool cond, const char* msg) {
    if (!cond) throw ShapeError(msg);
}

} // namespace

const Tensor Tape::empty_{};

const Tensor& Value::val() const {
    return tape_->value_of(index_);
}

const Tensor& Value::grad() const {
    return tape_->grad_of(index_);
}

const Tensor& Tape::grad_of(int index) const {
    return nodes_[static_cast<std::size_t>(index)].grad;
}

Value Tape::push(Tensor value, bool needs_grad, std::function<void(Tape&, Node&)> back) {
    Node n;
    n.value = std::move(value);
    n.needs_grad = needs_grad;
    if (needs_grad) n.backward = std::move(back);
    nodes_.push_back(std::move(n));
    return Value(this, static_cast<int>(nodes_.size()) - 1);
}

Tensor* Tape::grad_buffer(int index) {
    Node& n = nodes_[static_cast<std::size_t>(index)];
    if (!n.needs_grad) return nullptr;
    if (n.grad.empty() && n.value.size() > 0) n.grad = Tensor(n.value.dims());
    return &n.grad;
}

void Tape::backward(Value root) {
    Node& r = nodes_[static_cast<std::size_t>(root.index_)];
    if (r.value.size() != 1) throw ShapeError("backward: root must be a scalar");
    if (!r.needs_grad) return;
    r.grad = Tensor::full(r.value.dims(), 1.0);
    for (int i = root.index_; i >= 0; --i) {
        Node& n = nodes_[static_cast<std::size_t>(i)];
        if (n.needs_grad && !n.grad.empty() && n.backward) n.backward(*this, n);
    }
}

Value Tape::leaf(Tensor t, bool needs_grad) {
    return push(std::move(t), needs_grad, nullptr);
}

// ---------------------------------------------------------------------------
// elementwise

Value Tape::add(Value a, Value b) {
    const Tensor& ta = a.val();
    const Tensor& tb = b.val();
    require(ta.same_shape(tb), "add: shape mismatch");
    Tensor out(ta.dims());
    const std::int64_t n = ta.size();
    for (std::int64_t i = 0; i < n; ++i) out[i] = ta[i] + tb[i];
    const int ia = a.index(), ib = b.index();
    bool ng = wants_grad(a) || wants_grad(b);
    return push(std::move(out), ng, [ia, ib](Tape& t, Node& self) {
        for (int p : {ia, ib}) {
            if (Tensor* g = t.grad_buffer(p)) {
                for (std::int64_t i = 0; i < self.grad.size(); ++i) (*g)[i] += self.grad[i];
            }
        }
    });
}

Value Tape::sub(Value a, Value b) {
    const Tensor& ta = a.val();
    const Tensor& tb = b.val();
    require(ta.same_shape(tb), "sub: shape mismatch");
    Tensor out(ta.dims());
    for (std::int64_t i = 0; i < ta.size(); ++i) out[i] = ta[i] - tb[i];
    const int ia = a.index(), ib = b.index();
    bool ng = wants_grad(a) || wants_grad(b);
    return push(std::move(out), ng, [ia, ib](Tape& t, Node& self) {
        if (Tensor* g = t.grad_buffer(ia)) {
            for (std::int64_t i = 0; i < self.grad.size(); ++i) (*g)[i] += self.grad[i];
        }
        if (Tensor* g = t.grad_buffer(ib)) {
            for (std::int64_t i = 0; i < self.grad.size(); ++i) (*g)[i] -= self.grad[i];
        }
    });
}

Value Tape::mul(Value a, Value b) {
    const Tensor& ta = a.val();
    const Tensor& tb = b.val();
    require(ta.same_shape(tb), "mul: shape mismatch");
    Tensor out(ta.dims());
    for (std::int64_t i = 0; i < ta.size(); ++i) out[i] = ta[i] * tb[i];
    const int ia = a.index(), ib = b.index();
    bool ng = wants_grad(a) || wants_grad(b);
    return push(std::move(out), ng, [ia, ib](Tape& t, Node& self) {
        const Tensor& va = t.value_of(ia);
        const Tensor& vb = t.value_of(ib);
        if (Tensor* g = t.grad_buffer(ia)) {
            for (std::int64_t i = 0; i < self.grad.size(); ++i) (*g)[i] += self.grad[i] * vb[i];
        }
        if (Tensor* g = t.grad_buffer(ib)) {
            for (std::int64_t i = 0; i < self.grad.size(); ++i) (*g)[i] += self.grad[i] * va[i];
        }
    });
}

Value Tape::scale(Value a, double s) {
    const Tensor& ta = a.val();
    Tensor out(ta.dims());
    for (std::int64_t i = 0; i < ta.size(); ++i) out[i] = ta[i] * s;
    const int ia = a.index();
    return push(std::move(out), wants_grad(a), [ia, s](Tape& t, Node& self) {
        if (Tensor* g = t.grad_buffer(ia)) {
            for (std::int64_t i = 0; i < self.grad.size(); ++i) (*g)[i] += self.grad[i] * s;
        }
    });
}

Value Tape::add_scalar(Value a, double c) {
    const Tensor& ta = a.val();
    Tensor out(ta.dims());
    for (std::int64_t i = 0; i < ta.size(); ++i) out[i] = ta[i] + c;
    const int ia = a.index();
    return push(std::move(out), wants_grad(a), [ia](Tape& t, Node& self) {
        if (Tensor* g = t.grad_buffer(ia)) {
            for (std::int64_t i = 0; i < self.grad.size(); ++i) (*g)[i] += self.grad[i];
        }
    });
}

Value Tape::mul_scalar_tensor(Value a, Value s) {
    const Tensor& ta = a.val();
    const Tensor& ts = s.val();
    require(ts.size() == 1, "mul_scalar_tensor: scalar must have one element");
    const double sv = ts[0];
    Tensor out(ta.dims());
    for (std::int64_t i = 0; i < ta.size(); ++i) out[i] = ta[i] * sv;
    const int ia = a.index(), is = s.index();
    bool ng = wants_grad(a) || wants_grad(s);
    return push(std::move(out), ng, [ia, is, sv](Tape& t, Node& self) {
        if (Tensor* g = t.grad_buffer(ia)) {
            for (std::int64_t i = 0; i < self.grad.size(); ++i) (*g)[i] += self.grad[i] * sv;
        }
        if (Tensor* g = t.grad_buffer(is)) {
            const Tensor& va = t.value_of(ia);
            double acc = 0.0;
            for (std::int64_t i = 0; i < self.grad.size(); ++i) acc += self.grad[i] * va[i];
            (*g)[0] += acc;
        }
    });
}

Value Tape::gelu(Value a) {
    const Tensor& ta = a.val();
    Tensor out(ta.dims());
    constexpr double inv_sqrt2 = 0.7071067811865475244;
    for (std::int64_t i = 0; i < ta.size(); ++i) {
        out[i] = 0.5 * ta[i] * (1.0 + std::erf(ta[i] * inv_sqrt2));
    }
    const int ia = a.index();
    return push(std::move(out), wants_grad(a), [ia](Tape& t, Node& self) {
        if (Tensor* g = t.grad_buffer(ia)) {
            const Tensor& x = t.value_of(ia);
            constexpr double is2 = 0.7071067811865475244;
            constexpr double inv_sqrt2pi = 0.3989422804014326779;
            for (std::int64_t i = 0; i < self.grad.size(); ++i) {
                const double cdf = 0.5 * (1.0 + std::erf(x[i] * is2));
                const double pdf = inv_sqrt2pi * std::exp(-0.5 * x[i] * x[i]);
                (*g)[i] += self.grad[i] * (cdf + x[i] * pdf);
            }
        }
    });
}

Value Tape::sigmoid(Value a) {
    const Tensor& ta = a.val();
    Tensor out(ta.dims());
    for (std::int64_t i = 0; i < ta.size(); ++i) out[i] = 1.0 / (1.0 + std::exp(-ta[i]));
    const int ia = a.index();
    return push(std::move(out), wants_grad(a), [ia](Tape& t, Node& self) {
        if (Tensor* g = t.grad_buffer(ia)) {
            for (std::int64_t i = 0; i < self.grad.size(); ++i) {
                const double y = self.value[i];
                (*g)[i] += self.grad[i] * y * (1.0 - y);
            }
        }
    });
}

Value Tape::clamp01(Value a) {
    const Tensor& ta = a.val();
    Tensor out(ta.dims());
    for (std::int64_t i = 0; i < ta.size(); ++i) {
        out[i] = ta[i] < 0.0 ? 0.0 : (ta[i] > 1.0 ? 1.0 : ta[i]);
    }
    const int ia = a.index();
    return push(std::move(out), wants_grad(a), [ia](Tape& t, Node& self) {
        if (Tensor* g = t.grad_buffer(ia)) {
            const Tensor& x = t.value_of(ia);
            for (std::int64_t i = 0; i < self.grad.size(); ++i) {
                if (x[i] >= 0.0 && x[i] <= 1.0) (*g)[i] += self.grad[i];
            }
        }
    });
}

// ---------------------------------------------------------------------------
// matrices

Value Tape::matmul(Value a, Value b) {
    const Tensor& ta = a.val();
    const Tensor& tb = b.val();
    require(ta.ndim() == 2 && tb.ndim() == 2, "matmul: expects 2-d tensors");
    require(ta.dim(1) == tb.dim(0), "matmul: inner dimension mismatch");
    Tensor out({ta.dim(0), tb.dim(1)});
    as_mat(out).noalias() = as_mat(ta) * as_mat(tb);
    const int ia = a.index(), ib = b.index();
    bool ng = wants_grad(a) || wants_grad(b);
    return push(std::move(out), ng, [ia, ib](Tape& t, Node& self) {
        CMapM g(self.grad.data(), self.grad.dim(0), self.grad.dim(1));
        if (Tensor* ga = t.grad_buffer(ia)) {
            as_mat(*ga).noalias() += g * as_mat(t.value_of(ib)).transpose();
        }
        if (Tensor* gb = t.grad_buffer(ib)) {
            as_mat(*gb).noalias() += as_mat(t.value_of(ia)).transpose() * g;
        }
    });
}

Value Tape::transpose(Value a) {
    const Tensor& ta = a.val();
    require(ta.ndim() == 2, "transpose: expects 2-d tensor");
    Tensor out({ta.dim(1), ta.dim(0)});
    as_mat(out) = as_mat(ta).transpose();
    const int ia = a.index();
    return push(std::move(out), wants_grad(a), [ia](Tape& t, Node& self) {
        if (Tensor* g = t.grad_buffer(ia)) {
            as_mat(*g) += CMapM(self.grad.data(), self.grad.dim(0), self.grad.dim(1)).transpose();
        }
    });
}

Value Tape::rows(Value a, int r0, int r1) {
    const Tensor& ta = a.val();
    require(ta.ndim() == 2, "rows: expects 2-d tensor");
    require(0 <= r0 && r0 < r1 && r1 <= ta.dim(0), "rows: range out of bounds");
    const int n = ta.dim(1);
    Tensor out({r1 - r0, n});
    std::copy(ta.data() + static_cast<std::size_t>(r0) * n,
              ta.data() + static_cast<std::size_t>(r1) * n, out.data());
    const int ia = a.index();
    return push(std::move(out), wants_grad(a), [ia, r0, n](Tape& t, Node& self) {
        if (Tensor* g = t.grad_buffer(ia)) {
            double* dst = g->data() + static_cast<std::size_t>(r0) * n;
            for (std::int64_t i = 0; i < self.grad.size(); ++i) dst[i] += self.grad[i];
        }
    });
}

Value Tape::concat_rows(const std::vector<Value>& parts) {
    require(!parts.empty(), "concat_rows: empty");
    const int n = parts[0].val().dim(1);
    int m = 0;
    bool ng = false;
    for (const Value& p : parts) {
        require(p.val().ndim() == 2 && p.val().dim(1) == n, "concat_rows: column mismatch");
        m += p.val().dim(0);
        ng = ng || wants_grad(p);
    }
    Tensor out({m, n});
    double* dst = out.data();
    std::vector<int> idx;
    std::vector<int> row0;
    int r = 0;
    for (const Value& p : parts) {
        const Tensor& tp = p.val();
        std::copy(tp.data(), tp.data() + tp.size(), dst);
        dst += tp.size();
        idx.push_back(p.index());
        row0.push_back(r);
        r += tp.dim(0);
    }
    return push(std::move(out), ng, [idx, row0, n](Tape& t, Node& self) {
        for (std::size_t k = 0; k < idx.size(); ++k) {
            if (Tensor* g = t.grad_buffer(idx[k])) {
                const double* src = self.grad.data() + static_cast<std::size_t>(row0[k]) * n;
                for (std::int64_t i = 0; i < g->size(); ++i) (*g)[i] += src[i];
            }
        }
    });
}

Value Tape::softmax_rows(Value a) {
    const Tensor& ta = a.val();
    require(ta.ndim() == 2, "softmax_rows: expects 2-d tensor");
    const int m = ta.dim(0), n = ta.dim(1);
    Tensor out({m, n});
    for (int i = 0; i < m; ++i) {
        const double* x = ta.data() + static_cast<std::size_t>(i) * n;
        double* y = out.data() + static_cast<std::size_t>(i) * n;
        double mx = x[0];
        for (int j = 1; j < n; ++j) mx = std::max(mx, x[j]);
        double s = 0.0;
        for (int j = 0; j < n; ++j) {
            y[j] = std::exp(x[j] - mx);
            s += y[j];
        }
        const double inv = 1.0 / s;
        for (int j = 0; j < n; ++j) y[j] *= inv;
    }
    const int ia = a.index();
    return push(std::move(out), wants_grad(a), [ia, m, n](Tape& t, Node& self) {
        if (Tensor* g = t.grad_buffer(ia)) {
            for (int i = 0; i < m; ++i) {
                const double* p = self.value.data() + static_cast<std::size_t>(i) * n;
                const double* go = self.grad.data() + static_cast<std::size_t>(i) * n;
                double* gi = g->data() + static_cast<std::size_t>(i) * n;
                double dot = 0.0;
                for (int j = 0; j < n; ++j) dot += go[j] * p[j];
                for (int j = 0; j < n; ++j) gi[j] += p[j] * (go[j] - dot);
            }
        }
    });
}

Value Tape::normalize_rows(Value a, double eps) {
    const Tensor& ta = a.val();
    require(ta.ndim() == 2, "normalize_rows: expects 2-d tensor");
    const int m = ta.dim(0), n = ta.dim(1);
    Tensor out({m, n});
    Tensor norms({m});
    for (int i = 0; i < m; ++i) {
        const double* x = ta.data() + static_cast<std::size_t>(i) * n;
        double s = 0.0;
        for (int j = 0; j < n; ++j) s += x[j] * x[j];
        const double nrm = std::sqrt(s + eps);
        norms[i] = nrm;
        double* y = out.data() + static_cast<std::size_t>(i) * n;
        const double inv = 1.0 / nrm;
        for (int j = 0; j < n; ++j) y[j] = x[j] * inv;
    }
    const int ia = a.index();
    return push(std::move(out), wants_grad(a), [ia, m, n, norms](Tape& t, Node& self) {
        if (Tensor* g = t.grad_buffer(ia)) {
            const Tensor& x = t.value_of(ia);
            for (int i = 0; i < m; ++i) {
                const double* xi = x.data() + static_cast<std::size_t>(i) * n;
                const double* go = self.grad.data() + static_cast<std::size_t>(i) * n;
                double* gi = g->data() + static_cast<std::size_t>(i) * n;
                const double nrm = norms[i];
                double dot = 0.0;
                for (int j = 0; j < n; ++j) dot += go[j] * xi[j];
                const double inv = 1.0 / nrm;
                const double inv3 = inv * inv * inv;
                for (int j = 0; j < n; ++j) gi[j] += go[j] * inv - xi[j] * dot * inv3;
            }
        }
    });
}

Value Tape::add_row_vector(Value a, Value v) {
    const Tensor& ta = a.val();
    const Tensor& tv = v.val();
    require(ta.ndim() == 2 && tv.ndim() == 1 && tv.dim(0) == ta.dim(1),
            "add_row_vector: shape mismatch");
    const int m = ta.dim(0), n = ta.dim(1);
    Tensor out({m, n});
    for (int i = 0; i < m; ++i) {
        for (int j = 0; j < n; ++j) out.at(i, j) = ta.at(i, j) + tv[j];
    }
    const int ia = a.index(), iv = v.index();
    bool ng = wants_grad(a) || wants_grad(v);
    return push(std::move(out), ng, [ia, iv, m, n](Tape& t, Node& self) {
        if (Tensor* g = t.grad_buffer(ia)) {
            for (std::int64_t i = 0; i < self.grad.size(); ++i) (*g)[i] += self.grad[i];
        }
        if (Tensor* g = t.grad_buffer(iv)) {
            for (int i = 0; i < m; ++i) {
                const double* go = self.grad.data() + static_cast<std::size_t>(i) * n;
                for (int j = 0; j < n; ++j) (*g)[j] += go[j];
            }
        }
    });
}

Value Tape::linear_vec(Value x, Value w, Value b) {
    const Tensor& tx = x.val();
    const Tensor& tw = w.val();
    require(tx.ndim() == 1 && tw.ndim() == 2 && tw.dim(1) == tx.dim(0),
            "linear_vec: shape mismatch");
    const int out_n = tw.dim(0), k = tw.dim(1);
    Tensor out({out_n});
    Eigen::Map<Eigen::VectorXd>(out.data(), out_n).noalias() =
        as_mat(tw) * Eigen::Map<const Eigen::VectorXd>(tx.data(), k);
    bool ng = wants_grad(x) || wants_grad(w);
    if (b.valid()) {
        require(b.val().ndim() == 1 && b.val().dim(0) == out_n, "linear_vec: bias mismatch");
        for (int i = 0; i < out_n; ++i) out[i] += b.val()[i];
        ng = ng || wants_grad(b);
    }
    const int ix = x.index(), iw = w.index(), ib = b.valid() ? b.index() : -1;
    return push(std::move(out), ng, [ix, iw, ib, out_n, k](Tape& t, Node& self) {
        Eigen::Map<const Eigen::VectorXd> g(self.grad.data(), out_n);
        if (Tensor* gx = t.grad_buffer(ix)) {
            Eigen::Map<Eigen::VectorXd>(gx->data(), k).noalias() +=
                as_mat(t.value_of(iw)).transpose() * g;
        }
        if (Tensor* gw = t.grad_buffer(iw)) {
            as_mat(*gw).noalias() +=
                g * Eigen::Map<const Eigen::VectorXd>(t.value_of(ix).data(), k).transpose();
        }
        if (ib >= 0) {
            if (Tensor* gb = t.grad_buffer(ib)) {
                for (int i = 0; i < out_n; ++i) (*gb)[i] += self.grad[i];
            }
        }
    });
}

Value Tape::reshape(Value a, std::vector<int> dims) {
    Tensor out = a.val().reshaped(dims);
    const int ia = a.index();
    return push(std::move(out), wants_grad(a), [ia](Tape& t, Node& self) {
        if (Tensor* g = t.grad_buffer(ia)) {
            for (std::int64_t i = 0; i < self.grad.size(); ++i) (*g)[i] += self.grad[i];
        }
    });
}

// ---------------------------------------------------------------------------
// feature maps

Value Tape::conv1x1(Value x, Value w, Value b) {
    const Tensor& tx = x.val();
    const Tensor& tw = w.val();
    require(tx.ndim() == 3 && tw.ndim() == 2, "conv1x1: bad ranks");
    require(tw.dim(1) == tx.dim(0), "conv1x1: channel mismatch");
    const int cout = tw.dim(0), h = tx.dim(1), wth = tx.dim(2);
    Tensor out({cout, h, wth});
    as_chw_mat(out).noalias() = as_mat(tw) * as_chw_mat(tx);
    bool ng = wants_grad(x) || wants_grad(w);
    if (b.valid()) {
        const Tensor& tb = b.val();
        require(tb.ndim() == 1 && tb.dim(0) == cout, "conv1x1: bias mismatch");
        const std::int64_t hw = static_cast<std::int64_t>(h) * wth;
        for (int c = 0; c < cout; ++c) {
            double* row = out.data() + c * hw;
            for (std::int64_t i = 0; i < hw; ++i) row[i] += tb[c];
        }
        ng = ng || wants_grad(b);
    }
    const int ix = x.index(), iw = w.index(), ib = b.valid() ? b.index() : -1;
    return push(std::move(out), ng, [ix, iw, ib](Tape& t, Node& self) {
        CMapM g(self.grad.data(), self.grad.dim(0),
                static_cast<Eigen::Index>(self.grad.dim(1)) * self.grad.dim(2));
        if (Tensor* gx = t.grad_buffer(ix)) {
            as_chw_mat(*gx).noalias() += as_mat(t.value_of(iw)).transpose() * g;
        }
        if (Tensor* gw = t.grad_buffer(iw)) {
            as_mat(*gw).noalias() += g * as_chw_mat(t.value_of(ix)).transpose();
        }
        if (ib >= 0) {
            if (Tensor* gb = t.grad_buffer(ib)) {
                for (int c = 0; c < self.grad.dim(0); ++c) {
                    (*gb)[c] += g.row(c).sum();
                }
            }
        }
    });
}

Value Tape::conv3x3_valid(Value x, Value w, Value b) {
    const Tensor& tx = x.val();
    const Tensor& tw = w.val();
    require(tx.ndim() == 3 && tw.ndim() == 4, "conv3x3: bad ranks");
    require(tw.dim(1) == tx.dim(0) && tw.dim(2) == 3 && tw.dim(3) == 3, "conv3x3: bad kernel");
    const int cin = tx.dim(0), hin = tx.dim(1), win = tx.dim(2);
    require(hin >= 3 && win >= 3, "conv3x3: input too small");
    const int cout = tw.dim(0), h = hin - 2, wth = win - 2;
    Tensor out({cout, h, wth});
    const bool has_bias = b.valid();
    for (int co = 0; co < cout; ++co) {
        const double bias = has_bias ? b.val()[co] : 0.0;
        for (int y = 0; y < h; ++y) {
            double* orow = out.data() + (static_cast<std::size_t>(co) * h + y) * wth;
            for (int xx = 0; xx < wth; ++xx) orow[xx] = bias;
            for (int ci = 0; ci < cin; ++ci) {
                const double* k = tw.data() + ((static_cast<std::size_t>(co) * cin + ci) * 9);
                for (int dy = 0; dy < 3; ++dy) {
                    const double* irow =
                        tx.data() + (static_cast<std::size_t>(ci) * hin + (y + dy)) * win;
                    const double k0 = k[dy * 3 + 0], k1 = k[dy * 3 + 1], k2 = k[dy * 3 + 2];
                    for (int xx = 0; xx < wth; ++xx) {
                        orow[xx] += k0 * irow[xx] + k1 * irow[xx + 1] + k2 * irow[xx + 2];
                    }
                }
            }
        }
    }
    bool ng = wants_grad(x) || wants_grad(w) || (has_bias && wants_grad(b));
    const int ix = x.index(), iw = w.index(), ib = has_bias ? b.index() : -1;
    return push(std::move(out), ng, [ix, iw, ib, cin, hin, win, cout, h, wth](Tape& t, Node& self) {
        const Tensor& xv = t.value_of(ix);
        const Tensor& wv = t.value_of(iw);
        Tensor* gx = t.grad_buffer(ix);
        Tensor* gw = t.grad_buffer(iw);
        for (int co = 0; co < cout; ++co) {
            for (int y = 0; y < h; ++y) {
                const double* grow =
                    self.grad.data() + (static_cast<std::size_t>(co) * h + y) * wth;
                for (int ci = 0; ci < cin; ++ci) {
                    const double* k = wv.data() + ((static_cast<std::size_t>(co) * cin + ci) * 9);
                    double* gk = gw ? gw->data() + ((static_cast<std::size_t>(co) * cin + ci) * 9)
                                    : nullptr;
                    for (int dy = 0; dy < 3; ++dy) {
                        const std::size_t irow_off =
                            (static_cast<std::size_t>(ci) * hin + (y + dy)) * win;
                        const double* irow = xv.data() + irow_off;
                        double* gxrow = gx ? gx->data() + irow_off : nullptr;
                        for (int dx = 0; dx < 3; ++dx) {
                            const double kk = k[dy * 3 + dx];
                            double acc = 0.0;
                            for (int xx = 0; xx < wth; ++xx) {
                                const double gv = grow[xx];
                                if (gxrow) gxrow[xx + dx] += kk * gv;
                                acc += gv * irow[xx + dx];
                            }
                            if (gk) gk[dy * 3 + dx] += acc;
                        }
                    }
                }
            }
        }
        if (ib >= 0) {
            if (Tensor* gb = t.grad_buffer(ib)) {
                const std::int64_t hw = static_cast<std::int64_t>(h) * wth;
                for (int co = 0; co < cout; ++co) {
                    const double* g = self.grad.data() + co * hw;
                    double acc = 0.0;
                    for (std::int64_t i = 0; i < hw; ++i) acc += g[i];
                    (*gb)[co] += acc;
                }
            }
        }
    });
}

Value Tape::dwconv3x3_valid(Value x, Value w, Value b) {
    const Tensor& tx = x.val();
    const Tensor& tw = w.val();
    require(tx.ndim() == 3 && tw.ndim() == 3, "dwconv3x3: bad ranks");
    require(tw.dim(0) == tx.dim(0) && tw.dim(1) == 3 && tw.dim(2) == 3, "dwconv3x3: bad kernel");
    const int c = tx.dim(0), hin = tx.dim(1), win = tx.dim(2);
    require(hin >= 3 && win >= 3, "dwconv3x3: input too small");
    const int h = hin - 2, wth = win - 2;
    Tensor out({c, h, wth});
    const bool has_bias = b.valid();
    for (int ci = 0; ci < c; ++ci) {
        const double* k = tw.data() + static_cast<std::size_t>(ci) * 9;
        const double bias = has_bias ? b.val()[ci] : 0.0;
        for (int y = 0; y < h; ++y) {
            double* orow = out.data() + (static_cast<std::size_t>(ci) * h + y) * wth;
            const double* r0 = tx.data() + (static_cast<std::size_t>(ci) * hin + y) * win;
            const double* r1 = r0 + win;
            const double* r2 = r1 + win;
            for (int xx = 0; xx < wth; ++xx) {
                orow[xx] = bias + k[0] * r0[xx] + k[1] * r0[xx + 1] + k[2] * r0[xx + 2] +
                           k[3] * r1[xx] + k[4] * r1[xx + 1] + k[5] * r1[xx + 2] +
                           k[6] * r2[xx] + k[7] * r2[xx + 1] + k[8] * r2[xx + 2];
            }
        }
    }
    bool ng = wants_grad(x) || wants_grad(w) || (has_bias && wants_grad(b));
    const int ix = x.index(), iw = w.index(), ib = has_bias ? b.index() : -1;
    return push(std::move(out), ng, [ix, iw, ib, c, hin, win, h, wth](Tape& t, Node& self) {
        const Tensor& xv = t.value_of(ix);
        const Tensor& wv = t.value_of(iw);
        Tensor* gx = t.grad_buffer(ix);
        Tensor* gw = t.grad_buffer(iw);
        Tensor* gb = ib >= 0 ? t.grad_buffer(ib) : nullptr;
        for (int ci = 0; ci < c; ++ci) {
            const double* k = wv.data() + static_cast<std::size_t>(ci) * 9;
            double* gk = gw ? gw->data() + static_cast<std::size_t>(ci) * 9 : nullptr;
            double bacc = 0.0;
            for (int y = 0; y < h; ++y) {
                const double* grow = self.grad.data() + (static_cast<std::size_t>(ci) * h + y) * wth;
                const std::size_t base = (static_cast<std::size_t>(ci) * hin + y) * win;
                for (int dy = 0; dy < 3; ++dy) {
                    const double* irow = xv.data() + base + static_cast<std::size_t>(dy) * win;
                    double* gxrow = gx ? gx->data() + base + static_cast<std::size_t>(dy) * win
                                       : nullptr;
                    for (int dx = 0; dx < 3; ++dx) {
                        const double kk = k[dy * 3 + dx];
                        double acc = 0.0;
                        for (int xx = 0; xx < wth; ++xx) {
                            const double gv = grow[xx];
                            if (gxrow) gxrow[xx + dx] += kk * gv;
                            acc += gv * irow[xx + dx];
                        }
                        if (gk) gk[dy * 3 + dx] += acc;
                    }
                }
                if (gb) {
                    for (int xx = 0; xx < wth; ++xx) bacc += grow[xx];
                }
            }
            if (gb) (*gb)[ci] += bacc;
        }
    });
}

Value Tape::pad_reflect(Value x, int top, int bottom, int left, int right) {
    const Tensor& tx = x.val();
    require(tx.ndim() == 3, "pad_reflect: expects [C,H,W]");
    const int c = tx.dim(0), h = tx.dim(1), w = tx.dim(2);
    require(top < h && bottom < h && left < w && right < w,
            "pad_reflect: pad must be smaller than the image");
    const int ho = h + top + bottom, wo = w + left + right;
    auto refl = [](int i, int n) {
        if (i < 0) return -i;
        if (i >= n) return 2 * n - 2 - i;
        return i;
    };
    Tensor out({c, ho, wo});
    for (int ci = 0; ci < c; ++ci) {
        for (int y = 0; y < ho; ++y) {
            const int sy = refl(y - top, h);
            const double* irow = tx.data() + (static_cast<std::size_t>(ci) * h + sy) * w;
            double* orow = out.data() + (static_cast<std::size_t>(ci) * ho + y) * wo;
            for (int xx = 0; xx < wo; ++xx) orow[xx] = irow[refl(xx - left, w)];
        }
    }
    const int ix = x.index();
    return push(std::move(out), wants_grad(x), [ix, c, h, w, ho, wo, top, left](Tape& t, Node& self) {
        if (Tensor* g = t.grad_buffer(ix)) {
            auto refl = [](int i, int n) {
                if (i < 0) return -i;
                if (i >= n) return 2 * n - 2 - i;
                return i;
            };
            for (int ci = 0; ci < c; ++ci) {
                for (int y = 0; y < ho; ++y) {
                    const int sy = refl(y - top, h);
                    double* grow = g->data() + (static_cast<std::size_t>(ci) * h + sy) * w;
                    const double* srow =
                        self.grad.data() + (static_cast<std::size_t>(ci) * ho + y) * wo;
                    for (int xx = 0; xx < wo; ++xx) grow[refl(xx - left, w)] += srow[xx];
                }
            }
        }
    });
}

Value Tape::crop(Value x, int top, int left, int h, int w) {
    const Tensor& tx = x.val();
    require(tx.ndim() == 3, "crop: expects [C,H,W]");
    require(top + h <= tx.dim(1) && left + w <= tx.dim(2), "crop: out of bounds");
    const int c = tx.dim(0), hin = tx.dim(1), win = tx.dim(2);
    Tensor out({c, h, w});
    for (int ci = 0; ci < c; ++ci) {
        for (int y = 0; y < h; ++y) {
            const double* irow =
                tx.data() + (static_cast<std::size_t>(ci) * hin + (y + top)) * win + left;
            double* orow = out.data() + (static_cast<std::size_t>(ci) * h + y) * w;
            std::copy(irow, irow + w, orow);
        }
    }
    const int ix = x.index();
    return push(std::move(out), wants_grad(x), [ix, c, hin, win, top, left, h, w](Tape& t, Node& self) {
        if (Tensor* g = t.grad_buffer(ix)) {
            for (int ci = 0; ci < c; ++ci) {
                for (int y = 0; y < h; ++y) {
                    double* grow =
                        g->data() + (static_cast<std::size_t>(ci) * hin + (y + top)) * win + left;
                    const double* srow = self.grad.data() + (static_cast<std::size_t>(ci) * h + y) * w;
                    for (int xx = 0; xx < w; ++xx) grow[xx] += srow[xx];
                }
            }
        }
    });
}

Value Tape::layernorm_chan(Value x, Value gamma, Value beta, double eps) {
    const Tensor& tx = x.val();
    require(tx.ndim() == 3, "layernorm_chan: expects [C,H,W]");
    const int c = tx.dim(0);
    const std::int64_t hw = static_cast<std::int64_t>(tx.dim(1)) * tx.dim(2);
    const Tensor& tg = gamma.val();
    const Tensor& tb = beta.val();
    require(tg.ndim() == 1 && tg.dim(0) == c && tb.ndim() == 1 && tb.dim(0) == c,
            "layernorm_chan: affine shape mismatch");
    Tensor out(tx.dims());
    Tensor xhat(tx.dims());
    Tensor inv_std({static_cast<int>(hw)});
    for (std::int64_t p = 0; p < hw; ++p) {
        double mu = 0.0;
        for (int ci = 0; ci < c; ++ci) mu += tx[ci * hw + p];
        mu /= c;
        double var = 0.0;
        for (int ci = 0; ci < c; ++ci) {
            const double d = tx[ci * hw + p] - mu;
            var += d * d;
        }
        var /= c;
        const double inv = 1.0 / std::sqrt(var + eps);
        inv_std[p] = inv;
        for (int ci = 0; ci < c; ++ci) {
            const double xh = (tx[ci * hw + p] - mu) * inv;
            xhat[ci * hw + p] = xh;
            out[ci * hw + p] = xh * tg[ci] + tb[ci];
        }
    }
    const int ix = x.index(), ig = gamma.index(), ib = beta.index();
    bool ng = wants_grad(x) || wants_grad(gamma) || wants_grad(beta);
    return push(std::move(out), ng,
                [ix, ig, ib, c, hw, xhat = std::move(xhat), inv_std = std::move(inv_std)](
                    Tape& t, Node& self) {
        const Tensor& gv = t.value_of(ig);
        Tensor* gx = t.grad_buffer(ix);
        Tensor* gg = t.grad_buffer(ig);
        Tensor* gb = t.grad_buffer(ib);
        for (std::int64_t p = 0; p < hw; ++p) {
            if (gx) {
                double mean_dxh = 0.0, mean_dxh_xh = 0.0;
                for (int ci = 0; ci < c; ++ci) {
                    const double dxh = self.grad[ci * hw + p] * gv[ci];
                    mean_dxh += dxh;
                    mean_dxh_xh += dxh * xhat[ci * hw + p];
                }
                mean_dxh /= c;
                mean_dxh_xh /= c;
                const double inv = inv_std[p];
                for (int ci = 0; ci < c; ++ci) {
                    const double dxh = self.grad[ci * hw + p] * gv[ci];
                    (*gx)[ci * hw + p] +=
                        inv * (dxh - mean_dxh - xhat[ci * hw + p] * mean_dxh_xh);
                }
            }
            if (gg) {
                for (int ci = 0; ci < c; ++ci) {
                    (*gg)[ci] += self.grad[ci * hw + p] * xhat[ci * hw + p];
                }
            }
            if (gb) {
                for (int ci = 0; ci < c; ++ci) (*gb)[ci] += self.grad[ci * hw + p];
            }
        }
    });
}

Value Tape::pixel_unshuffle2(Value x) {
    const Tensor& tx = x.val();
    require(tx.ndim() == 3, "pixel_unshuffle2: expects [C,H,W]");
    require(tx.dim(1) % 2 == 0 && tx.dim(2) % 2 == 0, "pixel_unshuffle2: H,W must be even");
    const int c = tx.dim(0), h = tx.dim(1) / 2, w = tx.dim(2) / 2;
    Tensor out({c * 4, h, w});
    for (int ci = 0; ci < c; ++ci) {
        for (int dy = 0; dy < 2; ++dy) {
            for (int dx = 0; dx < 2; ++dx) {
                const int co = ci * 4 + dy * 2 + dx;
                for (int y = 0; y < h; ++y) {
                    const double* irow =
                        tx.data() + (static_cast<std::size_t>(ci) * (2 * h) + (2 * y + dy)) * (2 * w);
                    double* orow = out.data() + (static_cast<std::size_t>(co) * h + y) * w;
                    for (int xx = 0; xx < w; ++xx) orow[xx] = irow[2 * xx + dx];
                }
            }
        }
    }
    const int ix = x.index();
    return push(std::move(out), wants_grad(x), [ix, c, h, w](Tape& t, Node& self) {
        if (Tensor* g = t.grad_buffer(ix)) {
            for (int ci = 0; ci < c; ++ci) {
                for (int dy = 0; dy < 2; ++dy) {
                    for (int dx = 0; dx < 2; ++dx) {
                        const int co = ci * 4 + dy * 2 + dx;
                        for (int y = 0; y < h; ++y) {
                            double* grow = g->data() +
                                (static_cast<std::size_t>(ci) * (2 * h) + (2 * y + dy)) * (2 * w);
                            const double* srow =
                                self.grad.data() + (static_cast<std::size_t>(co) * h + y) * w;
                            for (int xx = 0; xx < w; ++xx) grow[2 * xx + dx] += srow[xx];
                        }
                    }
                }
            }
        }
    });
}

Value Tape::pixel_shuffle2(Value x) {
    const Tensor& tx = x.val();
    require(tx.ndim() == 3 && tx.dim(0) % 4 == 0, "pixel_shuffle2: channels must divide by 4");
    const int c = tx.dim(0) / 4, h = tx.dim(1), w = tx.dim(2);
    Tensor out({c, h * 2, w * 2});
    for (int ci = 0; ci < c; ++ci) {
        for (int dy = 0; dy < 2; ++dy) {
            for (int dx = 0; dx < 2; ++dx) {
                const int cs = ci * 4 + dy * 2 + dx;
                for (int y = 0; y < h; ++y) {
                    const double* irow = tx.data() + (static_cast<std::size_t>(cs) * h + y) * w;
                    double* orow = out.data() +
                        (static_cast<std::size_t>(ci) * (2 * h) + (2 * y + dy)) * (2 * w);
                    for (int xx = 0; xx < w; ++xx) orow[2 * xx + dx] = irow[xx];
                }
            }
        }
    }
    const int ix = x.index();
    return push(std::move(out), wants_grad(x), [ix, c, h, w](Tape& t, Node& self) {
        if (Tensor* g = t.grad_buffer(ix)) {
            for (int ci = 0; ci < c; ++ci) {
                for (int dy = 0; dy < 2; ++dy) {
                    for (int dx = 0; dx < 2; ++dx) {
                        const int cs = ci * 4 + dy * 2 + dx;
                        for (int y = 0; y < h; ++y) {
                            double* grow = g->data() + (static_cast<std::size_t>(cs) * h + y) * w;
                            const double* srow = self.grad.data() +
                                (static_cast<std::size_t>(ci) * (2 * h) + (2 * y + dy)) * (2 * w);
                            for (int xx = 0; xx < w; ++xx) grow[xx] += srow[2 * xx + dx];
                        }
                    }
                }
            }
        }
    });
}

Value Tape::concat_chan(Value a, Value b) {
    const Tensor& ta = a.val();
    const Tensor& tb = b.val();
    require(ta.ndim() == 3 && tb.ndim() == 3 && ta.dim(1) == tb.dim(1) && ta.dim(2) == tb.dim(2),
            "concat_chan: spatial mismatch");
    Tensor out({ta.dim(0) + tb.dim(0), ta.dim(1), ta.dim(2)});
    std::copy(ta.data(), ta.data() + ta.size(), out.data());
    std::copy(tb.data(), tb.data() + tb.size(), out.data() + ta.size());
    const int ia = a.index(), ib = b.index();
    const std::int64_t na = ta.size();
    bool ng = wants_grad(a) || wants_grad(b);
    return push(std::move(out), ng, [ia, ib, na](Tape& t, Node& self) {
        if (Tensor* g = t.grad_buffer(ia)) {
            for (std::int64_t i = 0; i < na; ++i) (*g)[i] += self.grad[i];
        }
        if (Tensor* g = t.grad_buffer(ib)) {
            for (std::int64_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[na + i];
        }
    });
}

Value Tape::chan_slice(Value x, int c0, int c1) {
    const Tensor& tx = x.val();
    require(tx.ndim() == 3 && 0 <= c0 && c0 < c1 && c1 <= tx.dim(0), "chan_slice: bad range");
    const std::int64_t hw = static_cast<std::int64_t>(tx.dim(1)) * tx.dim(2);
    Tensor out({c1 - c0, tx.dim(1), tx.dim(2)});
    std::copy(tx.data() + c0 * hw, tx.data() + c1 * hw, out.data());
    const int ix = x.index();
    return push(std::move(out), wants_grad(x), [ix, c0, hw](Tape& t, Node& self) {
        if (Tensor* g = t.grad_buffer(ix)) {
            double* dst = g->data() + c0 * hw;
            for (std::int64_t i = 0; i < self.grad.size(); ++i) dst[i] += self.grad[i];
        }
    });
}

Value Tape::chan_scale_shift(Value x, Value s, Value t) {
    const Tensor& tx = x.val();
    const Tensor& ts = s.val();
    const Tensor& tt = t.val();
    require(tx.ndim() == 3, "chan_scale_shift: expects [C,H,W]");
    const int c = tx.dim(0);
    require(ts.ndim() == 1 && ts.dim(0) == c && tt.ndim() == 1 && tt.dim(0) == c,
            "chan_scale_shift: channel mismatch");
    const std::int64_t hw = static_cast<std::int64_t>(tx.dim(1)) * tx.dim(2);
    Tensor out(tx.dims());
    for (int ci = 0; ci < c; ++ci) {
        const double sv = ts[ci], tv = tt[ci];
        const double* xr = tx.data() + ci * hw;
        double* orow = out.data() + ci * hw;
        for (std::int64_t i = 0; i < hw; ++i) orow[i] = xr[i] * sv + tv;
    }
    const int ix = x.index(), is = s.index(), it = t.index();
    bool ng = wants_grad(x) || wants_grad(s) || wants_grad(t);
    return push(std::move(out), ng, [ix, is, it, c, hw](Tape& tp, Node& self) {
        const Tensor& xv = tp.value_of(ix);
        const Tensor& sv = tp.value_of(is);
        Tensor* gx = tp.grad_buffer(ix);
        Tensor* gs = tp.grad_buffer(is);
        Tensor* gt = tp.grad_buffer(it);
        for (int ci = 0; ci < c; ++ci) {
            const double* g = self.grad.data() + ci * hw;
            if (gx) {
                double* gxr = gx->data() + ci * hw;
                const double scl = sv[ci];
                for (std::int64_t i = 0; i < hw; ++i) gxr[i] += g[i] * scl;
            }
            if (gs) {
                const double* xr = xv.data() + ci * hw;
                double acc = 0.0;
                for (std::int64_t i = 0; i < hw; ++i) acc += g[i] * xr[i];
                (*gs)[ci] += acc;
            }
            if (gt) {
                double acc = 0.0;
                for (std::int64_t i = 0; i < hw; ++i) acc += g[i];
                (*gt)[ci] += acc;
            }
        }
    });
}

Value Tape::chan_broadcast(Value v, int h, int w) {
    const Tensor& tv = v.val();
    require(tv.ndim() == 1, "chan_broadcast: expects a vector");
    const int c = tv.dim(0);
    const std::int64_t hw = static_cast<std::int64_t>(h) * w;
    Tensor out({c, h, w});
    for (int ci = 0; ci < c; ++ci) {
        double* row = out.data() + ci * hw;
        for (std::int64_t i = 0; i < hw; ++i) row[i] = tv[ci];
    }
    const int iv = v.index();
    return push(std::move(out), wants_grad(v), [iv, c, hw](Tape& t, Node& self) {
        if (Tensor* g = t.grad_buffer(iv)) {
            for (int ci = 0; ci < c; ++ci) {
                const double* s = self.grad.data() + ci * hw;
                double acc = 0.0;
                for (std::int64_t i = 0; i < hw; ++i) acc += s[i];
                (*g)[ci] += acc;
            }
        }
    });
}

Value Tape::mul_spatial(Value x, Value m) {
    const Tensor& tx = x.val();
    const Tensor& tm = m.val();
    require(tx.ndim() == 3 && tm.ndim() == 3 && tm.dim(0) == 1 && tm.dim(1) == tx.dim(1) &&
                tm.dim(2) == tx.dim(2),
            "mul_spatial: mask must be [1,H,W] matching x");
    const int c = tx.dim(0);
    const std::int64_t hw = static_cast<std::int64_t>(tx.dim(1)) * tx.dim(2);
    Tensor out(tx.dims());
    for (int ci = 0; ci < c; ++ci) {
        const double* xr = tx.data() + ci * hw;
        double* orow = out.data() + ci * hw;
        for (std::int64_t i = 0; i < hw; ++i) orow[i] = xr[i] * tm[i];
    }
    const int ix = x.index(), im = m.index();
    bool ng = wants_grad(x) || wants_grad(m);
    return push(std::move(out), ng, [ix, im, c, hw](Tape& t, Node& self) {
        const Tensor& xv = t.value_of(ix);
        const Tensor& mv = t.value_of(im);
        if (Tensor* gx = t.grad_buffer(ix)) {
            for (int ci = 0; ci < c; ++ci) {
                const double* g = self.grad.data() + ci * hw;
                double* gr = gx->data() + ci * hw;
                for (std::int64_t i = 0; i < hw; ++i) gr[i] += g[i] * mv[i];
            }
        }
        if (Tensor* gm = t.grad_buffer(im)) {
            for (int ci = 0; ci < c; ++ci) {
                const double* g = self.grad.data() + ci * hw;
                const double* xr = xv.data() + ci * hw;
                for (std::int64_t i = 0; i < hw; ++i) (*gm)[i] += g[i] * xr[i];
            }
        }
    });
}

Value Tape::bilinear_resize(Value x, int h, int w) {
    const Tensor& tx = x.val();
    require(tx.ndim() == 3 && h >= 1 && w >= 1, "bilinear_resize: bad arguments");
    const int c = tx.dim(0), h0 = tx.dim(1), w0 = tx.dim(2);
    Tensor out({c, h, w});
    // Precompute sample positions (half-pixel centers).
    std::vector<int> y0(h), y1(h);
    std::vector<double> fy(h);
    for (int y = 0; y < h; ++y) {
        double sy = (y + 0.5) * static_cast<double>(h0) / h - 0.5;
        sy = std::min(std::max(sy, 0.0), static_cast<double>(h0 - 1));
        y0[y] = static_cast<int>(sy);
        y1[y] = std::min(y0[y] + 1, h0 - 1);
        fy[y] = sy - y0[y];
    }
    std::vector<int> x0(w), x1(w);
    std::vector<double> fx(w);
    for (int xx = 0; xx < w; ++xx) {
        double sx = (xx + 0.5) * static_cast<double>(w0) / w - 0.5;
        sx = std::min(std::max(sx, 0.0), static_cast<double>(w0 - 1));
        x0[xx] = static_cast<int>(sx);
        x1[xx] = std::min(x0[xx] + 1, w0 - 1);
        fx[xx] = sx - x0[xx];
    }
    for (int ci = 0; ci < c; ++ci) {
        const double* plane = tx.data() + static_cast<std::size_t>(ci) * h0 * w0;
        for (int y = 0; y < h; ++y) {
            double* orow = out.data() + (static_cast<std::size_t>(ci) * h + y) * w;
            const double* r0 = plane + static_cast<std::size_t>(y0[y]) * w0;
            const double* r1 = plane + static_cast<std::size_t>(y1[y]) * w0;
            for (int xx = 0; xx < w; ++xx) {
                const double a = r0[x0[xx]] * (1 - fx[xx]) + r0[x1[xx]] * fx[xx];
                const double b = r1[x0[xx]] * (1 - fx[xx]) + r1[x1[xx]] * fx[xx];
                orow[xx] = a * (1 - fy[y]) + b * fy[y];
            }
        }
    }
    const int ix = x.index();
    return push(std::move(out), wants_grad(x),
                [ix, c, h0, w0, h, w, y0, y1, fy, x0, x1, fx](Tape& t, Node& self) {
        if (Tensor* g = t.grad_buffer(ix)) {
            for (int ci = 0; ci < c; ++ci) {
                double* plane = g->data() + static_cast<std::size_t>(ci) * h0 * w0;
                for (int y = 0; y < h; ++y) {
                    const double* srow =
                        self.grad.data() + (static_cast<std::size_t>(ci) * h + y) * w;
                    double* r0 = plane + static_cast<std::size_t>(y0[y]) * w0;
                    double* r1 = plane + static_cast<std::size_t>(y1[y]) * w0;
                    for (int xx = 0; xx < w; ++xx) {
                        const double gv = srow[xx];
                        r0[x0[xx]] += gv * (1 - fx[xx]) * (1 - fy[y]);
                        r0[x1[xx]] += gv * fx[xx] * (1 - fy[y]);
                        r1[x0[xx]] += gv * (1 - fx[xx]) * fy[y];
                        r1[x1[xx]] += gv * fx[xx] * fy[y];
                    }
                }
            }
        }
    });
}

// ---------------------------------------------------------------------------
// segment pooling

Value Tape::segment_mean(Value x, const std::vector<int>& labels, int n_segments) {
    const Tensor& tx = x.val();
    require(tx.ndim() == 3, "segment_mean: expects [C,H,W]");
    const int c = tx.dim(0);
    const std::int64_t hw = static_cast<std::int64_t>(tx.dim(1)) * tx.dim(2);
    require(static_cast<std::int64_t>(labels.size()) == hw, "segment_mean: label count mismatch");
    std::vector<std::int64_t> counts(static_cast<std::size_t>(n_segments), 0);
    for (int l : labels) {
        require(0 <= l && l < n_segments, "segment_mean: label out of range");
        ++counts[static_cast<std::size_t>(l)];
    }
    Tensor out({n_segments, c});
    // Sum pass with a constant-region fast path: a region whose values are
    // all bit-identical yields that exact value as its mean.
    std::vector<double> first(static_cast<std::size_t>(n_segments));
    std::vector<char> uniform(static_cast<std::size_t>(n_segments));
    for (int ci = 0; ci < c; ++ci) {
        std::fill(uniform.begin(), uniform.end(), 1);
        std::vector<char> seen(static_cast<std::size_t>(n_segments), 0);
        std::vector<double> sum(static_cast<std::size_t>(n_segments), 0.0);
        const double* plane = tx.data() + ci * hw;
        for (std::int64_t p = 0; p < hw; ++p) {
            const int s = labels[static_cast<std::size_t>(p)];
            const double v = plane[p];
            sum[static_cast<std::size_t>(s)] += v;
            if (!seen[static_cast<std::size_t>(s)]) {
                seen[static_cast<std::size_t>(s)] = 1;
                first[static_cast<std::size_t>(s)] = v;
            } else if (v != first[static_cast<std::size_t>(s)]) {
                uniform[static_cast<std::size_t>(s)] = 0;
            }
        }
        for (int s = 0; s < n_segments; ++s) {
            if (counts[static_cast<std::size_t>(s)] == 0) continue;
            out.at(s, ci) = uniform[static_cast<std::size_t>(s)]
                                ? first[static_cast<std::size_t>(s)]
                                : sum[static_cast<std::size_t>(s)] /
                                      static_cast<double>(counts[static_cast<std::size_t>(s)]);
        }
    }
    const int ix = x.index();
    return push(std::move(out), wants_grad(x), [ix, labels, counts, c, hw](Tape& t, Node& self) {
        if (Tensor* g = t.grad_buffer(ix)) {
            for (int ci = 0; ci < c; ++ci) {
                double* plane = g->data() + ci * hw;
                for (std::int64_t p = 0; p < hw; ++p) {
                    const int s = labels[static_cast<std::size_t>(p)];
                    plane[p] += self.grad.at(s, ci) /
                                static_cast<double>(counts[static_cast<std::size_t>(s)]);
                }
            }
        }
    });
}

Value Tape::segment_broadcast(Value means, const std::vector<int>& labels, int h, int w) {
    const Tensor& tm = means.val();
    require(tm.ndim() == 2, "segment_broadcast: expects [S,C]");
    const int s_count = tm.dim(0), c = tm.dim(1);
    const std::int64_t hw = static_cast<std::int64_t>(h) * w;
    require(static_cast<std::int64_t>(labels.size()) == hw,
            "segment_broadcast: label count mismatch");
    Tensor out({c, h, w});
    for (std::int64_t p = 0; p < hw; ++p) {
        const int s = labels[static_cast<std::size_t>(p)];
        require(0 <= s && s < s_count, "segment_broadcast: label out of range");
        for (int ci = 0; ci < c; ++ci) out[ci * hw + p] = tm.at(s, ci);
    }
    const int im = means.index();
    return push(std::move(out), wants_grad(means), [im, labels, c, hw](Tape& t, Node& self) {
        if (Tensor* g = t.grad_buffer(im)) {
            for (int ci = 0; ci < c; ++ci) {
                const double* plane = self.grad.data() + ci * hw;
                for (std::int64_t p = 0; p < hw; ++p) {
                    g->at(labels[static_cast<std::size_t>(p)], ci) += plane[p];
                }
            }
        }
    });
}

// ---------------------------------------------------------------------------
// reductions

Value Tape::mean_all(Value a) {
    const Tensor& ta = a.val();
    const std::int64_t n = ta.size();
    require(n > 0, "mean_all: empty tensor");
    double acc = 0.0;
    for (std::int64_t i = 0; i < n; ++i) acc += ta[i];
    Tensor out = Tensor::full({1}, acc / static_cast<double>(n));
    const int ia = a.index();
    return push(std::move(out), wants_grad(a), [ia, n](Tape& t, Node& self) {
        if (Tensor* g = t.grad_buffer(ia)) {
            const double gv = self.grad[0] / static_cast<double>(n);
            for (std::int64_t i = 0; i < n; ++i) (*g)[i] += gv;
        }
    });
}

Value Tape::mean_abs_diff(Value a, Value b) {
    const Tensor& ta = a.val();
    const Tensor& tb = b.val();
    require(ta.same_shape(tb), "mean_abs_diff: shape mismatch");
    const std::int64_t n = ta.size();
    double acc = 0.0;
    for (std::int64_t i = 0; i < n; ++i) acc += std::fabs(ta[i] - tb[i]);
    Tensor out = Tensor::full({1}, acc / static_cast<double>(n));
    const int ia = a.index(), ib = b.index();
    bool ng = wants_grad(a) || wants_grad(b);
    return push(std::move(out), ng, [ia, ib, n](Tape& t, Node& self) {
        const Tensor& va = t.value_of(ia);
        const Tensor& vb = t.value_of(ib);
        const double gv = self.grad[0] / static_cast<double>(n);
        Tensor* ga = t.grad_buffer(ia);
        Tensor* gb = t.grad_buffer(ib);
        for (std::int64_t i = 0; i < n; ++i) {
            const double d = va[i] - vb[i];
            const double s = d > 0.0 ? 1.0 : (d < 0.0 ? -1.0 : 0.0);
            if (ga) (*ga)[i] += gv * s;
            if (gb) (*gb)[i] -= gv * s;
        }
    });
}

Value Tape::mean_sq_diff(Value a, Value b) {
    const Tensor& ta = a.val();
    const Tensor& tb = b.val();
    require(ta.same_shape(tb), "mean_sq_diff: shape mismatch");
    const std::int64_t n = ta.size();
    double acc = 0.0;
    for (std::int64_t i = 0; i < n; ++i) {
        const double d = ta[i] - tb[i];
        acc += d * d;
    }
    Tensor out = Tensor::full({1}, acc / static_cast<double>(n));
    const int ia = a.index(), ib = b.index();
    bool ng = wants_grad(a) || wants_grad(b);
    return push(std::move(out), ng, [ia, ib, n](Tape& t, Node& self) {
        const Tensor& va = t.value_of(ia);
        const Tensor& vb = t.value_of(ib);
        const double gv = 2.0 * self.grad[0] / static_cast<double>(n);
        Tensor* ga = t.grad_buffer(ia);
        Tensor* gb = t.grad_buffer(ib);
        for (std::int64_t i = 0; i < n; ++i) {
            const double d = va[i] - vb[i];
            if (ga) (*ga)[i] += gv * d;
            if (gb) (*gb)[i] -= gv * d;
        }
    });
}

} // namespace clearair::ad
