#include "camo/autodiff.hpp"

#include <Eigen/Dense>

#include <cstring>
#include <unordered_set>

namespace camo {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using CMapMat = Eigen::Map<const RowMat>;

Var constant(Tensor v) {
    auto n = std::make_shared<Node>();
    n->val = std::move(v);
    n->requires_grad = false;
    n->op = "const";
    return n;
}

Var param(Tensor v) {
    auto n = std::make_shared<Node>();
    n->val = std::move(v);
    n->requires_grad = true;
    n->op = "param";
    return n;
}

static Var make_op(Tensor val, std::vector<Var> parents, const char* name,
                   std::function<void(Node&)> bp) {
    auto n = std::make_shared<Node>();
    n->val = std::move(val);
    n->parents = std::move(parents);
    n->op = name;
    for (const auto& p : n->parents)
        if (p->requires_grad) n->requires_grad = true;
    if (n->requires_grad) n->backprop = std::move(bp);
    return n;
}

void backward(const Var& root) {
    if (root->val.numel() != 1)
        throw ValidationError("backward: root must be a scalar");
    if (!root->requires_grad) return;

    // Iterative post-order DFS, then reverse for the backward sweep.
    std::vector<Node*> order;
    std::unordered_set<Node*> seen;
    std::vector<std::pair<Node*, size_t>> stack;
    stack.push_back({root.get(), 0});
    seen.insert(root.get());
    while (!stack.empty()) {
        auto& [node, idx] = stack.back();
        bool descended = false;
        while (idx < node->parents.size()) {
            Node* p = node->parents[idx++].get();
            if (p->requires_grad && !seen.count(p)) {
                seen.insert(p);
                stack.push_back({p, 0});
                descended = true;
                break;
            }
        }
        if (descended) continue;
        order.push_back(node);
        stack.pop_back();
    }

    root->ensure_grad();
    std::fill(root->grad.data.begin(), root->grad.data.end(), 1.0);
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Node* n = *it;
        if (n->backprop && n->grad_ready) n->backprop(*n);
    }
}

// ---------------------------------------------------------------- elementwise

Var add(const Var& a, const Var& b) {
    if (!a->val.same_shape(b->val)) throw ValidationError("add: shape mismatch");
    Tensor out = a->val;
    for (size_t i = 0; i < out.data.size(); ++i) out.data[i] += b->val.data[i];
    return make_op(std::move(out), {a, b}, "add", [a, b](Node& n) {
        if (a->requires_grad) {
            auto& g = a->ensure_grad();
            for (size_t i = 0; i < g.data.size(); ++i) g.data[i] += n.grad.data[i];
        }
        if (b->requires_grad) {
            auto& g = b->ensure_grad();
            for (size_t i = 0; i < g.data.size(); ++i) g.data[i] += n.grad.data[i];
        }
    });
}

Var sub(const Var& a, const Var& b) {
    if (!a->val.same_shape(b->val)) throw ValidationError("sub: shape mismatch");
    Tensor out = a->val;
    for (size_t i = 0; i < out.data.size(); ++i) out.data[i] -= b->val.data[i];
    return make_op(std::move(out), {a, b}, "sub", [a, b](Node& n) {
        if (a->requires_grad) {
            auto& g = a->ensure_grad();
            for (size_t i = 0; i < g.data.size(); ++i) g.data[i] += n.grad.data[i];
        }
        if (b->requires_grad) {
            auto& g = b->ensure_grad();
            for (size_t i = 0; i < g.data.size(); ++i) g.data[i] -= n.grad.data[i];
        }
    });
}

Var mul(const Var& a, const Var& b) {
    if (!a->val.same_shape(b->val)) throw ValidationError("mul: shape mismatch");
    Tensor out = a->val;
    for (size_t i = 0; i < out.data.size(); ++i) out.data[i] *= b->val.data[i];
    return make_op(std::move(out), {a, b}, "mul", [a, b](Node& n) {
        if (a->requires_grad) {
            auto& g = a->ensure_grad();
            for (size_t i = 0; i < g.data.size(); ++i) g.data[i] += n.grad.data[i] * b->val.data[i];
        }
        if (b->requires_grad) {
            auto& g = b->ensure_grad();
            for (size_t i = 0; i < g.data.size(); ++i) g.data[i] += n.grad.data[i] * a->val.data[i];
        }
    });
}

Var affine(const Var& a, double k, double c) {
    Tensor out = a->val;
    for (auto& v : out.data) v = k * v + c;
    return make_op(std::move(out), {a}, "affine", [a, k](Node& n) {
        auto& g = a->ensure_grad();
        for (size_t i = 0; i < g.data.size(); ++i) g.data[i] += k * n.grad.data[i];
    });
}

Var silu(const Var& a) {
    Tensor out = a->val;
    for (auto& v : out.data) {
        double s = 1.0 / (1.0 + std::exp(-v));
        v = v * s;
    }
    return make_op(std::move(out), {a}, "silu", [a](Node& n) {
        auto& g = a->ensure_grad();
        for (size_t i = 0; i < g.data.size(); ++i) {
            double x = a->val.data[i];
            double s = 1.0 / (1.0 + std::exp(-x));
            g.data[i] += n.grad.data[i] * s * (1.0 + x * (1.0 - s));
        }
    });
}

Var sigmoid(const Var& a) {
    Tensor out = a->val;
    for (auto& v : out.data) v = 1.0 / (1.0 + std::exp(-v));
    return make_op(std::move(out), {a}, "sigmoid", [a](Node& n) {
        auto& g = a->ensure_grad();
        for (size_t i = 0; i < g.data.size(); ++i) {
            double s = n.val.data[i];
            g.data[i] += n.grad.data[i] * s * (1.0 - s);
        }
    });
}

Var abs_v(const Var& a) {
    Tensor out = a->val;
    for (auto& v : out.data) v = std::abs(v);
    return make_op(std::move(out), {a}, "abs", [a](Node& n) {
        auto& g = a->ensure_grad();
        for (size_t i = 0; i < g.data.size(); ++i) {
            double x = a->val.data[i];
            double s = (x > 0.0) ? 1.0 : (x < 0.0 ? -1.0 : 0.0);
            g.data[i] += n.grad.data[i] * s;
        }
    });
}

Var mul_mask(const Var& x, const Var& m) {
    if (x->val.rank() != 4 || m->val.rank() != 4 || m->val.shape[1] != 1 ||
        x->val.shape[0] != m->val.shape[0] || x->val.shape[2] != m->val.shape[2] ||
        x->val.shape[3] != m->val.shape[3])
        throw ValidationError("mul_mask: expected [N,C,H,W] x [N,1,H,W]");
    const int N = x->val.shape[0], C = x->val.shape[1];
    const int64_t HW = static_cast<int64_t>(x->val.shape[2]) * x->val.shape[3];
    Tensor out = x->val;
    for (int n = 0; n < N; ++n) {
        const double* mp = m->val.ptr() + n * HW;
        for (int c = 0; c < C; ++c) {
            double* op = out.ptr() + (static_cast<int64_t>(n) * C + c) * HW;
            for (int64_t i = 0; i < HW; ++i) op[i] *= mp[i];
        }
    }
    return make_op(std::move(out), {x, m}, "mul_mask", [x, m, N, C, HW](Node& nd) {
        if (x->requires_grad) {
            auto& g = x->ensure_grad();
            for (int n = 0; n < N; ++n) {
                const double* mp = m->val.ptr() + n * HW;
                for (int c = 0; c < C; ++c) {
                    const int64_t off = (static_cast<int64_t>(n) * C + c) * HW;
                    for (int64_t i = 0; i < HW; ++i)
                        g.data[off + i] += nd.grad.data[off + i] * mp[i];
                }
            }
        }
        if (m->requires_grad) {
            auto& g = m->ensure_grad();
            for (int n = 0; n < N; ++n) {
                for (int c = 0; c < C; ++c) {
                    const int64_t off = (static_cast<int64_t>(n) * C + c) * HW;
                    for (int64_t i = 0; i < HW; ++i)
                        g.data[n * HW + i] += nd.grad.data[off + i] * x->val.data[off + i];
                }
            }
        }
    });
}

// ------------------------------------------------------------------ structure

Var concat_ch(const std::vector<Var>& xs) {
    if (xs.empty()) throw ValidationError("concat_ch: empty input");
    const int N = xs[0]->val.shape[0], H = xs[0]->val.shape[2], W = xs[0]->val.shape[3];
    int Ctot = 0;
    for (const auto& x : xs) {
        if (x->val.rank() != 4 || x->val.shape[0] != N || x->val.shape[2] != H ||
            x->val.shape[3] != W)
            throw ValidationError("concat_ch: shape mismatch");
        Ctot += x->val.shape[1];
    }
    Tensor out({N, Ctot, H, W});
    const int64_t HW = static_cast<int64_t>(H) * W;
    for (int n = 0; n < N; ++n) {
        int co = 0;
        for (const auto& x : xs) {
            const int C = x->val.shape[1];
            std::memcpy(out.ptr() + (static_cast<int64_t>(n) * Ctot + co) * HW,
                        x->val.ptr() + static_cast<int64_t>(n) * C * HW,
                        sizeof(double) * C * HW);
            co += C;
        }
    }
    std::vector<Var> parents(xs.begin(), xs.end());
    return make_op(std::move(out), std::move(parents), "concat_ch", [xs, N, Ctot, HW](Node& nd) {
        for (int n = 0; n < N; ++n) {
            int co = 0;
            for (const auto& x : xs) {
                const int C = x->val.shape[1];
                if (x->requires_grad) {
                    auto& g = x->ensure_grad();
                    const double* src = nd.grad.ptr() + (static_cast<int64_t>(n) * Ctot + co) * HW;
                    double* dst = g.ptr() + static_cast<int64_t>(n) * C * HW;
                    for (int64_t i = 0; i < C * HW; ++i) dst[i] += src[i];
                }
                co += C;
            }
        }
    });
}

Var slice_ch(const Var& x, int c0, int len) {
    if (x->val.rank() != 4) throw ValidationError("slice_ch: expected rank-4");
    const int N = x->val.shape[0], C = x->val.shape[1], H = x->val.shape[2], W = x->val.shape[3];
    if (c0 < 0 || len < 1 || c0 + len > C) throw ValidationError("slice_ch: bad range");
    const int64_t HW = static_cast<int64_t>(H) * W;
    Tensor out({N, len, H, W});
    for (int n = 0; n < N; ++n)
        std::memcpy(out.ptr() + static_cast<int64_t>(n) * len * HW,
                    x->val.ptr() + (static_cast<int64_t>(n) * C + c0) * HW,
                    sizeof(double) * len * HW);
    return make_op(std::move(out), {x}, "slice_ch", [x, N, C, c0, len, HW](Node& nd) {
        auto& g = x->ensure_grad();
        for (int n = 0; n < N; ++n) {
            const double* src = nd.grad.ptr() + static_cast<int64_t>(n) * len * HW;
            double* dst = g.ptr() + (static_cast<int64_t>(n) * C + c0) * HW;
            for (int64_t i = 0; i < len * HW; ++i) dst[i] += src[i];
        }
    });
}

Var upsample2x(const Var& x) {
    if (x->val.rank() != 4) throw ValidationError("upsample2x: expected rank-4");
    const int N = x->val.shape[0], C = x->val.shape[1], H = x->val.shape[2], W = x->val.shape[3];
    Tensor out({N, C, H * 2, W * 2});
    for (int n = 0; n < N; ++n)
        for (int c = 0; c < C; ++c)
            for (int y = 0; y < 2 * H; ++y)
                for (int xx = 0; xx < 2 * W; ++xx)
                    out.at(n, c, y, xx) = x->val.at(n, c, y / 2, xx / 2);
    return make_op(std::move(out), {x}, "upsample2x", [x, N, C, H, W](Node& nd) {
        auto& g = x->ensure_grad();
        for (int n = 0; n < N; ++n)
            for (int c = 0; c < C; ++c)
                for (int y = 0; y < 2 * H; ++y)
                    for (int xx = 0; xx < 2 * W; ++xx)
                        g.at(n, c, y / 2, xx / 2) += nd.grad.at(n, c, y, xx);
    });
}

Var stop_grad(const Var& x) { return constant(x->val); }

// ------------------------------------------------------------- linear algebra

namespace {

struct ConvDims {
    int N, Ci, H, W, Co, kh, kw, Ho, Wo;
    int64_t rows, cols;
};

void im2col(const Tensor& x, const ConvDims& d, int stride, int pad, double* col) {
    // col is rows x cols, row r = (n*Ho + oy)*Wo + ox, col k = (ci*kh + ky)*kw + kx
    for (int n = 0; n < d.N; ++n) {
        for (int oy = 0; oy < d.Ho; ++oy) {
            for (int ox = 0; ox < d.Wo; ++ox) {
                double* row = col + ((static_cast<int64_t>(n) * d.Ho + oy) * d.Wo + ox) * d.cols;
                for (int ci = 0; ci < d.Ci; ++ci) {
                    for (int ky = 0; ky < d.kh; ++ky) {
                        const int iy = oy * stride - pad + ky;
                        for (int kx = 0; kx < d.kw; ++kx) {
                            const int ix = ox * stride - pad + kx;
                            double v = 0.0;
                            if (iy >= 0 && iy < d.H && ix >= 0 && ix < d.W)
                                v = x.at(n, ci, iy, ix);
                            row[(ci * d.kh + ky) * d.kw + kx] = v;
                        }
                    }
                }
            }
        }
    }
}

void col2im_add(const double* col, const ConvDims& d, int stride, int pad, Tensor& gx) {
    for (int n = 0; n < d.N; ++n) {
        for (int oy = 0; oy < d.Ho; ++oy) {
            for (int ox = 0; ox < d.Wo; ++ox) {
                const double* row =
                    col + ((static_cast<int64_t>(n) * d.Ho + oy) * d.Wo + ox) * d.cols;
                for (int ci = 0; ci < d.Ci; ++ci) {
                    for (int ky = 0; ky < d.kh; ++ky) {
                        const int iy = oy * stride - pad + ky;
                        if (iy < 0 || iy >= d.H) continue;
                        for (int kx = 0; kx < d.kw; ++kx) {
                            const int ix = ox * stride - pad + kx;
                            if (ix < 0 || ix >= d.W) continue;
                            gx.at(n, ci, iy, ix) += row[(ci * d.kh + ky) * d.kw + kx];
                        }
                    }
                }
            }
        }
    }
}

}  // namespace

Var conv2d(const Var& x, const Var& w, const Var& b, int stride, int pad) {
    if (x->val.rank() != 4 || w->val.rank() != 4)
        throw ValidationError("conv2d: expected rank-4 input and kernel");
    if (stride < 1 || pad < 0) throw ValidationError("conv2d: bad stride/pad");
    ConvDims d;
    d.N = x->val.shape[0];
    d.Ci = x->val.shape[1];
    d.H = x->val.shape[2];
    d.W = x->val.shape[3];
    d.Co = w->val.shape[0];
    d.kh = w->val.shape[2];
    d.kw = w->val.shape[3];
    if (w->val.shape[1] != d.Ci) throw ValidationError("conv2d: channel mismatch");
    if (b->val.numel() != d.Co) throw ValidationError("conv2d: bias size mismatch");
    d.Ho = (d.H + 2 * pad - d.kh) / stride + 1;
    d.Wo = (d.W + 2 * pad - d.kw) / stride + 1;
    if (d.Ho < 1 || d.Wo < 1) throw ValidationError("conv2d: output collapses to zero size");
    d.rows = static_cast<int64_t>(d.N) * d.Ho * d.Wo;
    d.cols = static_cast<int64_t>(d.Ci) * d.kh * d.kw;

    auto col = std::make_shared<std::vector<double>>(d.rows * d.cols);
    im2col(x->val, d, stride, pad, col->data());

    RowMat y(d.rows, d.Co);
    {
        CMapMat colm(col->data(), d.rows, d.cols);
        CMapMat wm(w->val.ptr(), d.Co, d.cols);
        y.noalias() = colm * wm.transpose();
    }
    Tensor out({d.N, d.Co, d.Ho, d.Wo});
    for (int n = 0; n < d.N; ++n)
        for (int oy = 0; oy < d.Ho; ++oy)
            for (int ox = 0; ox < d.Wo; ++ox) {
                const int64_t r = (static_cast<int64_t>(n) * d.Ho + oy) * d.Wo + ox;
                for (int co = 0; co < d.Co; ++co)
                    out.at(n, co, oy, ox) = y(r, co) + b->val.data[co];
            }

    return make_op(std::move(out), {x, w, b}, "conv2d", [x, w, b, d, stride, pad, col](Node& nd) {
        RowMat gy(d.rows, d.Co);
        for (int n = 0; n < d.N; ++n)
            for (int oy = 0; oy < d.Ho; ++oy)
                for (int ox = 0; ox < d.Wo; ++ox) {
                    const int64_t r = (static_cast<int64_t>(n) * d.Ho + oy) * d.Wo + ox;
                    for (int co = 0; co < d.Co; ++co) gy(r, co) = nd.grad.at(n, co, oy, ox);
                }
        if (b->requires_grad) {
            auto& gb = b->ensure_grad();
            for (int co = 0; co < d.Co; ++co) gb.data[co] += gy.col(co).sum();
        }
        if (w->requires_grad) {
            auto& gw = w->ensure_grad();
            CMapMat colm(col->data(), d.rows, d.cols);
            MapMat gwm(gw.ptr(), d.Co, d.cols);
            gwm.noalias() += gy.transpose() * colm;
        }
        if (x->requires_grad) {
            auto& gx = x->ensure_grad();
            RowMat gcol(d.rows, d.cols);
            CMapMat wm(w->val.ptr(), d.Co, d.cols);
            gcol.noalias() = gy * wm;
            col2im_add(gcol.data(), d, stride, pad, gx);
        }
    });
}

Var linear(const Var& x, const Var& w, const Var& b) {
    if (x->val.rank() != 2 || w->val.rank() != 2)
        throw ValidationError("linear: expected rank-2 input and weight");
    const int N = x->val.shape[0], F = x->val.shape[1], O = w->val.shape[0];
    if (w->val.shape[1] != F || b->val.numel() != O)
        throw ValidationError("linear: shape mismatch");
    Tensor out({N, O});
    {
        CMapMat xm(x->val.ptr(), N, F);
        CMapMat wm(w->val.ptr(), O, F);
        MapMat om(out.ptr(), N, O);
        om.noalias() = xm * wm.transpose();
        for (int n = 0; n < N; ++n)
            for (int o = 0; o < O; ++o) om(n, o) += b->val.data[o];
    }
    return make_op(std::move(out), {x, w, b}, "linear", [x, w, b, N, F, O](Node& nd) {
        CMapMat gy(nd.grad.ptr(), N, O);
        if (b->requires_grad) {
            auto& gb = b->ensure_grad();
            for (int o = 0; o < O; ++o) gb.data[o] += gy.col(o).sum();
        }
        if (w->requires_grad) {
            auto& gw = w->ensure_grad();
            CMapMat xm(x->val.ptr(), N, F);
            MapMat gwm(gw.ptr(), O, F);
            gwm.noalias() += gy.transpose() * xm;
        }
        if (x->requires_grad) {
            auto& gx = x->ensure_grad();
            CMapMat wm(w->val.ptr(), O, F);
            MapMat gxm(gx.ptr(), N, F);
            gxm.noalias() += gy * wm;
        }
    });
}

// ------------------------------------------------------------------ reductions

Var spatial_sum(const Var& x) {
    if (x->val.rank() != 4) throw ValidationError("spatial_sum: expected rank-4");
    const int N = x->val.shape[0], C = x->val.shape[1];
    const int64_t HW = static_cast<int64_t>(x->val.shape[2]) * x->val.shape[3];
    Tensor out({N, C});
    for (int n = 0; n < N; ++n)
        for (int c = 0; c < C; ++c) {
            const double* p = x->val.ptr() + (static_cast<int64_t>(n) * C + c) * HW;
            double s = 0.0;
            for (int64_t i = 0; i < HW; ++i) s += p[i];
            out.data[static_cast<size_t>(n) * C + c] = s;
        }
    return make_op(std::move(out), {x}, "spatial_sum", [x, N, C, HW](Node& nd) {
        auto& g = x->ensure_grad();
        for (int n = 0; n < N; ++n)
            for (int c = 0; c < C; ++c) {
                const double gv = nd.grad.data[static_cast<size_t>(n) * C + c];
                double* p = g.ptr() + (static_cast<int64_t>(n) * C + c) * HW;
                for (int64_t i = 0; i < HW; ++i) p[i] += gv;
            }
    });
}

Var row_sum(const Var& x) {
    if (x->val.rank() != 2) throw ValidationError("row_sum: expected rank-2");
    const int N = x->val.shape[0], C = x->val.shape[1];
    Tensor out({N});
    for (int n = 0; n < N; ++n) {
        double s = 0.0;
        for (int c = 0; c < C; ++c) s += x->val.data[static_cast<size_t>(n) * C + c];
        out.data[n] = s;
    }
    return make_op(std::move(out), {x}, "row_sum", [x, N, C](Node& nd) {
        auto& g = x->ensure_grad();
        for (int n = 0; n < N; ++n)
            for (int c = 0; c < C; ++c)
                g.data[static_cast<size_t>(n) * C + c] += nd.grad.data[n];
    });
}

Var sum_all(const Var& x) {
    Tensor out = Tensor::scalar(x->val.sum());
    return make_op(std::move(out), {x}, "sum_all", [x](Node& nd) {
        auto& g = x->ensure_grad();
        const double gv = nd.grad.data[0];
        for (auto& v : g.data) v += gv;
    });
}

Var mean_all(const Var& x) {
    const double k = 1.0 / static_cast<double>(x->val.numel());
    Tensor out = Tensor::scalar(x->val.sum() * k);
    return make_op(std::move(out), {x}, "mean_all", [x, k](Node& nd) {
        auto& g = x->ensure_grad();
        const double gv = nd.grad.data[0] * k;
        for (auto& v : g.data) v += gv;
    });
}

Var scale_rows(const Var& x, const std::vector<double>& s) {
    if (x->val.rank() < 1 || x->val.shape[0] != static_cast<int>(s.size()))
        throw ValidationError("scale_rows: row count mismatch");
    const int N = x->val.shape[0];
    const int64_t B = x->val.numel() / N;
    Tensor out = x->val;
    for (int n = 0; n < N; ++n) {
        double* p = out.ptr() + n * B;
        for (int64_t i = 0; i < B; ++i) p[i] *= s[n];
    }
    return make_op(std::move(out), {x}, "scale_rows", [x, s, N, B](Node& nd) {
        auto& g = x->ensure_grad();
        for (int n = 0; n < N; ++n) {
            double* p = g.ptr() + n * B;
            const double* q = nd.grad.ptr() + n * B;
            for (int64_t i = 0; i < B; ++i) p[i] += q[i] * s[n];
        }
    });
}

// ------------------------------------------------- detection / loss specific

Var gather_cells(const Var& x, const std::vector<std::array<int, 3>>& idx) {
    if (x->val.rank() != 4) throw ValidationError("gather_cells: expected rank-4");
    const int C = x->val.shape[1];
    const int R = static_cast<int>(idx.size());
    Tensor out({R, C});
    for (int r = 0; r < R; ++r) {
        const auto& [n, gy, gx] = idx[r];
        for (int c = 0; c < C; ++c) out.data[static_cast<size_t>(r) * C + c] = x->val.at(n, c, gy, gx);
    }
    return make_op(std::move(out), {x}, "gather_cells", [x, idx, C, R](Node& nd) {
        auto& g = x->ensure_grad();
        for (int r = 0; r < R; ++r) {
            const auto& [n, gy, gx] = idx[r];
            for (int c = 0; c < C; ++c)
                g.at(n, c, gy, gx) += nd.grad.data[static_cast<size_t>(r) * C + c];
        }
    });
}

Var bg_ce_rows(const Var& logits) {
    if (logits->val.rank() != 2 || logits->val.shape[1] != 2)
        throw ValidationError("bg_ce_rows: expected [R,2] logits");
    const int R = logits->val.shape[0];
    Tensor out({R});
    for (int r = 0; r < R; ++r) {
        const double d = logits->val.data[2 * r + 1] - logits->val.data[2 * r];
        out.data[r] = (d > 30.0) ? d + std::log1p(std::exp(-d)) : std::log1p(std::exp(d));
    }
    return make_op(std::move(out), {logits}, "bg_ce", [logits, R](Node& nd) {
        auto& g = logits->ensure_grad();
        for (int r = 0; r < R; ++r) {
            const double d = logits->val.data[2 * r + 1] - logits->val.data[2 * r];
            const double p1 = 1.0 / (1.0 + std::exp(-d));  // softmax prob of class 1
            g.data[2 * r] += nd.grad.data[r] * (-p1);
            g.data[2 * r + 1] += nd.grad.data[r] * p1;
        }
    });
}

Var softmax_ce_rows(const Var& logits, const std::vector<int>& labels) {
    if (logits->val.rank() != 2) throw ValidationError("softmax_ce_rows: expected [R,K]");
    const int R = logits->val.shape[0], K = logits->val.shape[1];
    if (static_cast<int>(labels.size()) != R)
        throw ValidationError("softmax_ce_rows: label count mismatch");
    for (int lab : labels)
        if (lab < 0 || lab >= K) throw ValidationError("softmax_ce_rows: label out of range");
    Tensor out({R});
    for (int r = 0; r < R; ++r) {
        const double* row = logits->val.ptr() + static_cast<int64_t>(r) * K;
        double mx = row[0];
        for (int k = 1; k < K; ++k) mx = std::max(mx, row[k]);
        double lse = 0.0;
        for (int k = 0; k < K; ++k) lse += std::exp(row[k] - mx);
        out.data[r] = std::log(lse) + mx - row[labels[r]];
    }
    return make_op(std::move(out), {logits}, "softmax_ce", [logits, labels, R, K](Node& nd) {
        auto& g = logits->ensure_grad();
        for (int r = 0; r < R; ++r) {
            const double* row = logits->val.ptr() + static_cast<int64_t>(r) * K;
            double mx = row[0];
            for (int k = 1; k < K; ++k) mx = std::max(mx, row[k]);
            double lse = 0.0;
            for (int k = 0; k < K; ++k) lse += std::exp(row[k] - mx);
            const double gv = nd.grad.data[r];
            for (int k = 0; k < K; ++k) {
                const double p = std::exp(row[k] - mx) / lse;
                g.data[static_cast<int64_t>(r) * K + k] +=
                    gv * (p - (k == labels[r] ? 1.0 : 0.0));
            }
        }
    });
}

Var channels_to_rows(const Var& x) {
    if (x->val.rank() != 4) throw ValidationError("channels_to_rows: expected rank-4");
    const int N = x->val.shape[0], C = x->val.shape[1], H = x->val.shape[2], W = x->val.shape[3];
    const int64_t HW = static_cast<int64_t>(H) * W;
    Tensor out({static_cast<int>(N * HW), C});
    for (int n = 0; n < N; ++n)
        for (int c = 0; c < C; ++c) {
            const double* src = x->val.ptr() + (static_cast<int64_t>(n) * C + c) * HW;
            for (int64_t i = 0; i < HW; ++i)
                out.data[(n * HW + i) * C + c] = src[i];
        }
    return make_op(std::move(out), {x}, "channels_to_rows", [x, N, C, HW](Node& nd) {
        auto& g = x->ensure_grad();
        for (int n = 0; n < N; ++n)
            for (int c = 0; c < C; ++c) {
                double* dst = g.ptr() + (static_cast<int64_t>(n) * C + c) * HW;
                for (int64_t i = 0; i < HW; ++i)
                    dst[i] += nd.grad.data[(n * HW + i) * C + c];
            }
    });
}

Var channel_unit_norm(const Var& x, double eps) {
    if (x->val.rank() != 4) throw ValidationError("channel_unit_norm: expected rank-4");
    const int N = x->val.shape[0], C = x->val.shape[1];
    const int64_t HW = static_cast<int64_t>(x->val.shape[2]) * x->val.shape[3];
    Tensor out = x->val;
    for (int n = 0; n < N; ++n)
        for (int64_t i = 0; i < HW; ++i) {
            double ss = eps;
            for (int c = 0; c < C; ++c) {
                const double v = x->val.data[(static_cast<int64_t>(n) * C + c) * HW + i];
                ss += v * v;
            }
            const double inv = 1.0 / std::sqrt(ss);
            for (int c = 0; c < C; ++c)
                out.data[(static_cast<int64_t>(n) * C + c) * HW + i] *= inv;
        }
    return make_op(std::move(out), {x}, "channel_unit_norm", [x, eps, N, C, HW](Node& nd) {
        auto& g = x->ensure_grad();
        for (int n = 0; n < N; ++n)
            for (int64_t i = 0; i < HW; ++i) {
                double ss = eps, dot = 0.0;
                for (int c = 0; c < C; ++c) {
                    const int64_t off = (static_cast<int64_t>(n) * C + c) * HW + i;
                    ss += x->val.data[off] * x->val.data[off];
                    dot += x->val.data[off] * nd.grad.data[off];
                }
                const double s = std::sqrt(ss);
                const double s3 = s * s * s;
                for (int c = 0; c < C; ++c) {
                    const int64_t off = (static_cast<int64_t>(n) * C + c) * HW + i;
                    g.data[off] += nd.grad.data[off] / s - x->val.data[off] * dot / s3;
                }
            }
    });
}

Var segment_mean(const Var& x, const std::vector<int>& seg_sizes) {
    if (x->val.rank() != 1) throw ValidationError("segment_mean: expected rank-1");
    int total = 0;
    for (int s : seg_sizes) {
        if (s <= 0) throw ValidationError("segment_mean: empty segment");
        total += s;
    }
    if (total != x->val.shape[0]) throw ValidationError("segment_mean: sizes do not cover input");
    const int S = static_cast<int>(seg_sizes.size());
    Tensor out({S});
    int off = 0;
    for (int s = 0; s < S; ++s) {
        double acc = 0.0;
        for (int i = 0; i < seg_sizes[s]; ++i) acc += x->val.data[off + i];
        out.data[s] = acc / seg_sizes[s];
        off += seg_sizes[s];
    }
    return make_op(std::move(out), {x}, "segment_mean", [x, seg_sizes, S](Node& nd) {
        auto& g = x->ensure_grad();
        int off = 0;
        for (int s = 0; s < S; ++s) {
            const double gv = nd.grad.data[s] / seg_sizes[s];
            for (int i = 0; i < seg_sizes[s]; ++i) g.data[off + i] += gv;
            off += seg_sizes[s];
        }
    });
}

// ------------------------------------------------------------------ colorspace

namespace {

// High-precision sRGB(D65) primaries. The white point is taken as the row
// sums so an equal-channel input maps to a = b = 0 exactly up to double
// rounding.
constexpr double kM[9] = {0.41239079926595934, 0.357584339383878,   0.1804807884018343,
                          0.21263900587151027, 0.715168678767756,   0.07219231536073371,
                          0.01933081871559182, 0.11919477979462598, 0.9505321522496607};

struct LabConsts {
    double white[3];
    double minv[9];
    LabConsts() {
        for (int i = 0; i < 3; ++i) white[i] = kM[3 * i] + kM[3 * i + 1] + kM[3 * i + 2];
        // 3x3 inverse of kM.
        const double a = kM[0], b = kM[1], c = kM[2], d = kM[3], e = kM[4], f = kM[5],
                     g = kM[6], h = kM[7], i = kM[8];
        const double det = a * (e * i - f * h) - b * (d * i - f * g) + c * (d * h - e * g);
        minv[0] = (e * i - f * h) / det;
        minv[1] = (c * h - b * i) / det;
        minv[2] = (b * f - c * e) / det;
        minv[3] = (f * g - d * i) / det;
        minv[4] = (a * i - c * g) / det;
        minv[5] = (c * d - a * f) / det;
        minv[6] = (d * h - e * g) / det;
        minv[7] = (b * g - a * h) / det;
        minv[8] = (a * e - b * d) / det;
    }
};
const LabConsts kLab;

constexpr double kGammaJoint = 0.04045;
constexpr double kDelta = 6.0 / 29.0;
const double kDelta3 = kDelta * kDelta * kDelta;

inline double srgb_to_linear(double c) {
    return (c <= kGammaJoint) ? c / 12.92 : std::pow((c + 0.055) / 1.055, 2.4);
}
inline double srgb_to_linear_d(double c) {
    return (c <= kGammaJoint) ? 1.0 / 12.92
                              : (2.4 / 1.055) * std::pow((c + 0.055) / 1.055, 1.4);
}
inline double linear_to_srgb(double c) {
    return (c <= 0.0031308) ? 12.92 * c : 1.055 * std::pow(c, 1.0 / 2.4) - 0.055;
}
inline double lab_f(double t) {
    return (t > kDelta3) ? std::cbrt(t) : t / (3.0 * kDelta * kDelta) + 4.0 / 29.0;
}
inline double lab_f_d(double t) {
    return (t > kDelta3) ? (1.0 / 3.0) * std::pow(t, -2.0 / 3.0) : 1.0 / (3.0 * kDelta * kDelta);
}
inline double lab_f_inv(double f) {
    return (f > kDelta) ? f * f * f : 3.0 * kDelta * kDelta * (f - 4.0 / 29.0);
}

}  // namespace

void lab_from_rgb_pixel(const double rgb[3], double lab[3]) {
    double lin[3], q[3];
    for (int i = 0; i < 3; ++i) lin[i] = srgb_to_linear(rgb[i]);
    for (int i = 0; i < 3; ++i)
        q[i] = (kM[3 * i] * lin[0] + kM[3 * i + 1] * lin[1] + kM[3 * i + 2] * lin[2]) /
               kLab.white[i];
    const double fx = lab_f(q[0]), fy = lab_f(q[1]), fz = lab_f(q[2]);
    lab[0] = 116.0 * fy - 16.0;
    lab[1] = 500.0 * (fx - fy);
    lab[2] = 200.0 * (fy - fz);
}

void lab_from_rgb_jacobian(const double rgb[3], double jac[9]) {
    double lin[3], q[3], gd[3];
    for (int i = 0; i < 3; ++i) {
        lin[i] = srgb_to_linear(rgb[i]);
        gd[i] = srgb_to_linear_d(rgb[i]);
    }
    double fd[3];
    for (int i = 0; i < 3; ++i) {
        q[i] = (kM[3 * i] * lin[0] + kM[3 * i + 1] * lin[1] + kM[3 * i + 2] * lin[2]) /
               kLab.white[i];
        fd[i] = lab_f_d(q[i]);
    }
    // dq_i/drgb_j = M[i][j] * gd[j] / white[i]; dLab/df fixed linear map.
    double dfdr[3][3];
    for (int i = 0; i < 3; ++i)
        for (int j = 0; j < 3; ++j) dfdr[i][j] = fd[i] * kM[3 * i + j] * gd[j] / kLab.white[i];
    for (int j = 0; j < 3; ++j) {
        jac[0 * 3 + j] = 116.0 * dfdr[1][j];
        jac[1 * 3 + j] = 500.0 * (dfdr[0][j] - dfdr[1][j]);
        jac[2 * 3 + j] = 200.0 * (dfdr[1][j] - dfdr[2][j]);
    }
}

void rgb_from_lab_pixel(const double lab[3], double rgb[3]) {
    const double fy = (lab[0] + 16.0) / 116.0;
    const double fx = fy + lab[1] / 500.0;
    const double fz = fy - lab[2] / 200.0;
    const double q[3] = {lab_f_inv(fx), lab_f_inv(fy), lab_f_inv(fz)};
    double xyz[3], lin[3];
    for (int i = 0; i < 3; ++i) xyz[i] = q[i] * kLab.white[i];
    for (int i = 0; i < 3; ++i)
        lin[i] = kLab.minv[3 * i] * xyz[0] + kLab.minv[3 * i + 1] * xyz[1] +
                 kLab.minv[3 * i + 2] * xyz[2];
    for (int i = 0; i < 3; ++i) {
        double c = linear_to_srgb(lin[i]);
        rgb[i] = std::min(1.0, std::max(0.0, c));
    }
}

Var rgb_to_lab_v(const Var& x) {
    if (x->val.rank() != 4 || x->val.shape[1] != 3)
        throw ValidationError("rgb_to_lab_v: expected [N,3,H,W]");
    const int N = x->val.shape[0], H = x->val.shape[2], W = x->val.shape[3];
    const int64_t HW = static_cast<int64_t>(H) * W;
    Tensor out({N, 3, H, W});
    for (int n = 0; n < N; ++n) {
        const double* r = x->val.ptr() + static_cast<int64_t>(n) * 3 * HW;
        double* o = out.ptr() + static_cast<int64_t>(n) * 3 * HW;
        for (int64_t i = 0; i < HW; ++i) {
            double rgb[3] = {r[i], r[HW + i], r[2 * HW + i]};
            double lab[3];
            lab_from_rgb_pixel(rgb, lab);
            o[i] = lab[0];
            o[HW + i] = lab[1];
            o[2 * HW + i] = lab[2];
        }
    }
    return make_op(std::move(out), {x}, "rgb_to_lab", [x, N, HW](Node& nd) {
        auto& g = x->ensure_grad();
        for (int n = 0; n < N; ++n) {
            const double* r = x->val.ptr() + static_cast<int64_t>(n) * 3 * HW;
            const double* go = nd.grad.ptr() + static_cast<int64_t>(n) * 3 * HW;
            double* gi = g.ptr() + static_cast<int64_t>(n) * 3 * HW;
            for (int64_t i = 0; i < HW; ++i) {
                double rgb[3] = {r[i], r[HW + i], r[2 * HW + i]};
                double jac[9];
                lab_from_rgb_jacobian(rgb, jac);
                const double gl[3] = {go[i], go[HW + i], go[2 * HW + i]};
                for (int j = 0; j < 3; ++j)
                    gi[j * HW + i] += gl[0] * jac[0 * 3 + j] + gl[1] * jac[1 * 3 + j] +
                                      gl[2] * jac[2 * 3 + j];
            }
        }
    });
}

}  // namespace camo
