#pragma once

#include <Eigen/Core>
#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstring>
#include <deque>
#include <functional>
#include <memory>
#include <numeric>
#include <string>
#include <tuple>
#include <type_traits>
#include <vector>

#ifdef _OPENMP
#include <omp.h>
#endif

#include "resdiff/core.hpp"

namespace resdiff {

struct TrainConfig {
    double lr = 2e-4;
    double beta1 = 0.9, beta2 = 0.99, eps = 1e-8;
    double ema_decay = 0.0;   // per optimizer step; 0 derives it from a samples/8 half-life
    double dropout = 0.0;     // optional; reference setting 0.13
    int batch = 8;
    int crop = 48;                     // training window side; full frames are used when 0
    long long samples = 200000;        // drawn with replacement
    double p_mean = 0.0, p_std = 1.2;  // ln(sigma) draw for denoiser training

    void validate() const {
        RSD_REQUIRE(beta1 > 0 && beta1 < 1 && beta2 > 0 && beta2 < 1, parameter,
                    "Adam betas must lie in (0,1)");
        RSD_REQUIRE(lr >= 0 && eps > 0, parameter, "learning rate/eps out of range");
        RSD_REQUIRE(dropout >= 0 && dropout < 1, parameter, "dropout rate out of range");
        RSD_REQUIRE(ema_decay >= 0 && ema_decay <= 1, parameter, "EMA decay out of range");
        RSD_REQUIRE(batch >= 1 && samples >= 1, parameter, "batch/samples must be positive");
        RSD_REQUIRE(crop >= 0, parameter, "crop size must be non-negative");
        RSD_REQUIRE(p_std > 0, parameter, "P_std must be positive");
    }
};

/// Half-life measured in training samples -> per-step EMA decay at batch size b.
inline double ema_decay_from_half_life(double half_life_samples, int batch) {
    RSD_REQUIRE(half_life_samples > 0 && batch > 0, parameter, "bad EMA half-life");
    return std::pow(0.5, double(batch) / half_life_samples);
}

template <typename T>
struct TensorT {
    std::vector<int> shape;
    std::vector<T> values;
    std::vector<T> grad;  // allocated only when requires_grad
    bool requires_grad = false;
    int id = -1;

    long long size() const { return (long long)values.size(); }
    int dim(int i) const { return shape[std::size_t(i)]; }
    int ndim() const { return int(shape.size()); }
    T* data() { return values.data(); }
    const T* data() const { return values.data(); }

    void set(const double* src, long long n) {
        RSD_REQUIRE(n == size(), dimension, "tensor set size mismatch");
        for (long long i = 0; i < n; ++i) values[std::size_t(i)] = T(src[i]);
    }
    void set(const std::vector<double>& src) { set(src.data(), (long long)src.size()); }
};

namespace detail {
inline long long numel(const std::vector<int>& shape) {
    long long n = 1;
    for (int d : shape) {
        RSD_REQUIRE(d > 0, dimension, "tensor dimensions must be positive");
        n *= d;
    }
    return n;
}
inline int max_threads() {
#ifdef _OPENMP
    return omp_get_max_threads();
#else
    return 1;
#endif
}
inline int thread_id() {
#ifdef _OPENMP
    return omp_get_thread_num();
#else
    return 0;
#endif
}
}  // namespace detail

/// Static computation graph: nodes are recorded once at build time and then
/// re-executed with fresh leaf values. Forward runs nodes in creation order,
/// backward in exact reverse, so traversal is deterministic by construction.
template <typename T>
class GraphT {
public:
    using Tensor = TensorT<T>;
    using Mat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
    using MapM = Eigen::Map<Mat>;
    using CMapM = Eigen::Map<const Mat>;
    using Arr = Eigen::Map<Eigen::Array<T, Eigen::Dynamic, 1>>;
    using CArr = Eigen::Map<const Eigen::Array<T, Eigen::Dynamic, 1>>;

    explicit GraphT(std::uint64_t seed = 0) : rng_(seed) {}

    Tensor* input(std::vector<int> shape) { return make(std::move(shape), false); }
    Tensor* param(std::vector<int> shape) {
        Tensor* t = make(std::move(shape), true);
        params_.push_back(t);
        return t;
    }

    const std::vector<Tensor*>& params() { return params_; }
    void set_training(bool on) { training_ = on; }
    bool training() const { return training_; }
    void set_profiling(bool on) { profiling_ = on; }

    void forward() {
        if (!profiling_) {
            for (Node& n : nodes_) n.fwd();
            return;
        }
        for (Node& n : nodes_) {
            auto t0 = std::chrono::steady_clock::now();
            n.fwd();
            n.fwd_ms += std::chrono::duration<double, std::milli>(
                            std::chrono::steady_clock::now() - t0)
                            .count();
        }
    }

    void backward(Tensor* loss) {
        RSD_REQUIRE(loss && loss->size() == 1, contract, "backward needs a scalar loss");
        RSD_REQUIRE(loss->requires_grad, contract, "loss does not depend on any parameter");
        for (Tensor& t : tensors_)
            if (t.requires_grad) std::fill(t.grad.begin(), t.grad.end(), T(0));
        loss->grad[0] = T(1);
        if (!profiling_) {
            for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) it->bwd();
            return;
        }
        for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
            auto t0 = std::chrono::steady_clock::now();
            it->bwd();
            it->bwd_ms += std::chrono::duration<double, std::milli>(
                              std::chrono::steady_clock::now() - t0)
                              .count();
        }
    }

    /// Accumulated per-node times since set_profiling(true), heaviest first.
    std::vector<std::tuple<std::string, double, double>> profile() const {
        std::vector<std::tuple<std::string, double, double>> rows;
        for (const Node& n : nodes_) rows.emplace_back(n.tag, n.fwd_ms, n.bwd_ms);
        std::stable_sort(rows.begin(), rows.end(), [](const auto& a, const auto& b) {
            return std::get<1>(a) + std::get<2>(a) > std::get<1>(b) + std::get<2>(b);
        });
        return rows;
    }

    // ---- operators ----------------------------------------------------

    /// Zero-padded cross-correlation: x [B,C,H,W] * w [O,C/groups,kh,kw] (+ b [O]).
    /// groups must divide both C and O; groups == C == O is depthwise.
    Tensor* conv2d(Tensor* x, Tensor* w, Tensor* b, int stride = 1, int pad = -1, int groups = 1) {
        RSD_REQUIRE(x->ndim() == 4 && w->ndim() == 4, dimension, "conv2d expects 4-d tensors");
        RSD_REQUIRE(stride >= 1, parameter, "conv2d stride must be >= 1");
        RSD_REQUIRE(groups >= 1, parameter, "conv2d groups must be >= 1");
        const int B = x->dim(0), C = x->dim(1), H = x->dim(2), W = x->dim(3);
        const int O = w->dim(0), kh = w->dim(2), kw = w->dim(3);
        RSD_REQUIRE(C % groups == 0 && O % groups == 0, dimension,
                    "conv2d groups must divide channel counts");
        RSD_REQUIRE(w->dim(1) == C / groups, dimension, "conv2d channel mismatch");
        if (pad < 0) pad = (kh - 1) / 2;
        const int Ho = (H + 2 * pad - kh) / stride + 1;
        const int Wo = (W + 2 * pad - kw) / stride + 1;
        RSD_REQUIRE(Ho >= 1 && Wo >= 1, dimension, "conv2d output collapses to nothing");
        if (b) RSD_REQUIRE(b->ndim() == 1 && b->dim(0) == O, dimension, "conv2d bias shape");

        Tensor* y = result({B, O, Ho, Wo}, {x, w, b});
        if (groups == 1 && kh == 1 && kw == 1 && stride == 1 && pad == 0)
            conv_pointwise(x, w, b, y);
        else if (groups == C && groups == O && stride == 1)
            conv_depthwise(x, w, b, y, pad);
        else
            conv_generic(x, w, b, y, stride, pad, groups);
        return y;
    }

    /// y = x * w^T + b with x [B,Fin], w [Fout,Fin], b [Fout] (optional).
    Tensor* linear(Tensor* x, Tensor* w, Tensor* b) {
        RSD_REQUIRE(x->ndim() == 2 && w->ndim() == 2, dimension, "linear expects 2-d tensors");
        RSD_REQUIRE(x->dim(1) == w->dim(1), dimension, "linear feature mismatch");
        const int B = x->dim(0), fin = x->dim(1), fout = w->dim(0);
        if (b) RSD_REQUIRE(b->ndim() == 1 && b->dim(0) == fout, dimension, "linear bias shape");
        Tensor* y = result({B, fout}, {x, w, b});
        node("linear", [=]() {
            MapM ym(y->data(), B, fout);
            ym.noalias() = CMapM(x->data(), B, fin) * CMapM(w->data(), fout, fin).transpose();
            if (b)
                for (int i = 0; i < B; ++i)
                    ym.row(i) += CMapM(b->data(), 1, fout);
        },
        [=]() {
            if (!y->requires_grad) return;
            CMapM gm(y->grad.data(), B, fout);
            if (x->requires_grad)
                MapM(x->grad.data(), B, fin).noalias() += gm * CMapM(w->data(), fout, fin);
            if (w->requires_grad)
                MapM(w->grad.data(), fout, fin).noalias() +=
                    gm.transpose() * CMapM(x->data(), B, fin);
            if (b && b->requires_grad)
                MapM(b->grad.data(), 1, fout) += gm.colwise().sum();
        });
        return y;
    }

    Tensor* add(Tensor* x, Tensor* y) {
        RSD_REQUIRE(x->shape == y->shape, dimension, "add shape mismatch");
        Tensor* z = result(x->shape, {x, y});
        const long long n = z->size();
        node("add", [=]() {
            Arr(z->data(), n) = CArr(x->data(), n) + CArr(y->data(), n);
        },
        [=]() {
            if (x->requires_grad) Arr(x->grad.data(), n) += CArr(z->grad.data(), n);
            if (y->requires_grad) Arr(y->grad.data(), n) += CArr(z->grad.data(), n);
        });
        return z;
    }

    /// x [B,C,H,W] + e [B,C] broadcast over the plane (noise-embedding inject).
    Tensor* add_rowbias(Tensor* x, Tensor* e) {
        RSD_REQUIRE(x->ndim() == 4 && e->ndim() == 2, dimension, "add_rowbias shapes");
        RSD_REQUIRE(x->dim(0) == e->dim(0) && x->dim(1) == e->dim(1), dimension,
                    "add_rowbias batch/channel mismatch");
        Tensor* z = result(x->shape, {x, e});
        const int B = x->dim(0), C = x->dim(1);
        const long long hw = (long long)x->dim(2) * x->dim(3);
        node("add_rowbias", [=]() {
            for (long long p = 0; p < (long long)B * C; ++p)
                Arr(z->data() + p * hw, hw) =
                    CArr(x->data() + p * hw, hw) + e->values[std::size_t(p)];
        },
        [=]() {
            if (!z->requires_grad) return;
            for (long long p = 0; p < (long long)B * C; ++p) {
                CArr gp(z->grad.data() + p * hw, hw);
                if (x->requires_grad) Arr(x->grad.data() + p * hw, hw) += gp;
                if (e->requires_grad) e->grad[std::size_t(p)] += gp.sum();
            }
        });
        return z;
    }

    /// y[b] = s[b] * x[b] with s a per-sample scalar [B] (preconditioner terms).
    Tensor* scale_rows(Tensor* x, Tensor* s) {
        RSD_REQUIRE(x->ndim() >= 2 && s->ndim() == 1 && s->dim(0) == x->dim(0), dimension,
                    "scale_rows expects per-sample scalars");
        Tensor* z = result(x->shape, {x, s});
        const int B = x->dim(0);
        const long long per = z->size() / B;
        node("scale_rows", [=]() {
            for (int b = 0; b < B; ++b)
                Arr(z->data() + b * per, per) =
                    s->values[std::size_t(b)] * CArr(x->data() + b * per, per);
        },
        [=]() {
            if (!z->requires_grad) return;
            for (int b = 0; b < B; ++b) {
                CArr gp(z->grad.data() + b * per, per);
                if (x->requires_grad)
                    Arr(x->grad.data() + b * per, per) += s->values[std::size_t(b)] * gp;
                if (s->requires_grad)
                    s->grad[std::size_t(b)] += (CArr(x->data() + b * per, per) * gp).sum();
            }
        });
        return z;
    }

    Tensor* silu(Tensor* x) {
        Tensor* z = result(x->shape, {x});
        const long long n = z->size();
        // sigmoid is cached from the forward pass so backward is exp-free
        auto sig = std::make_shared<std::vector<T>>(std::size_t(n));
        node("silu", [=]() {
            CArr xv(x->data(), n);
            Arr sv(sig->data(), n);
            sv = (T(1) + (-xv).exp()).inverse();
            Arr(z->data(), n) = xv * sv;
        },
        [=]() {
            if (!x->requires_grad) return;
            CArr xv(x->data(), n);
            CArr sv(sig->data(), n);
            Arr(x->grad.data(), n) += CArr(z->grad.data(), n) * sv * (T(1) + xv * (T(1) - sv));
        });
        return z;
    }

    Tensor* concat(Tensor* x, Tensor* y) {
        RSD_REQUIRE(x->ndim() == 4 && y->ndim() == 4, dimension, "concat expects 4-d tensors");
        RSD_REQUIRE(x->dim(0) == y->dim(0) && x->dim(2) == y->dim(2) && x->dim(3) == y->dim(3),
                    dimension, "concat geometry mismatch");
        const int B = x->dim(0), cx = x->dim(1), cy = y->dim(1);
        const long long hw = (long long)x->dim(2) * x->dim(3);
        Tensor* z = result({B, cx + cy, x->dim(2), x->dim(3)}, {x, y});
        node("concat", [=]() {
            for (int s = 0; s < B; ++s) {
                std::memcpy(z->data() + (long long)s * (cx + cy) * hw, x->data() + (long long)s * cx * hw,
                            std::size_t(cx * hw) * sizeof(T));
                std::memcpy(z->data() + ((long long)s * (cx + cy) + cx) * hw,
                            y->data() + (long long)s * cy * hw, std::size_t(cy * hw) * sizeof(T));
            }
        },
        [=]() {
            if (!z->requires_grad) return;
            for (int s = 0; s < B; ++s) {
                const T* gz = z->grad.data() + (long long)s * (cx + cy) * hw;
                if (x->requires_grad)
                    Arr(x->grad.data() + (long long)s * cx * hw, cx * hw) += CArr(gz, cx * hw);
                if (y->requires_grad)
                    Arr(y->grad.data() + (long long)s * cy * hw, cy * hw) +=
                        CArr(gz + cx * hw, cy * hw);
            }
        });
        return z;
    }

    /// 2x2 mean pooling; spatial dims must be even.
    Tensor* avg_pool2(Tensor* x) {
        RSD_REQUIRE(x->ndim() == 4, dimension, "avg_pool2 expects a 4-d tensor");
        const int B = x->dim(0), C = x->dim(1), H = x->dim(2), W = x->dim(3);
        RSD_REQUIRE(H % 2 == 0 && W % 2 == 0, dimension, "avg_pool2 needs even spatial dims");
        Tensor* z = result({B, C, H / 2, W / 2}, {x});
        node("avg_pool2", [=]() {
            for (long long p = 0; p < (long long)B * C; ++p) {
                const T* xp = x->data() + p * H * W;
                T* zp = z->data() + p * (H / 2) * (W / 2);
                for (int i = 0; i < H / 2; ++i)
                    for (int j = 0; j < W / 2; ++j)
                        zp[(long long)i * (W / 2) + j] =
                            T(0.25) * (xp[(long long)(2 * i) * W + 2 * j] +
                                       xp[(long long)(2 * i) * W + 2 * j + 1] +
                                       xp[(long long)(2 * i + 1) * W + 2 * j] +
                                       xp[(long long)(2 * i + 1) * W + 2 * j + 1]);
            }
        },
        [=]() {
            if (!x->requires_grad) return;
            for (long long p = 0; p < (long long)B * C; ++p) {
                T* dxp = x->grad.data() + p * H * W;
                const T* gp = z->grad.data() + p * (H / 2) * (W / 2);
                for (int i = 0; i < H / 2; ++i)
                    for (int j = 0; j < W / 2; ++j) {
                        T g = T(0.25) * gp[(long long)i * (W / 2) + j];
                        dxp[(long long)(2 * i) * W + 2 * j] += g;
                        dxp[(long long)(2 * i) * W + 2 * j + 1] += g;
                        dxp[(long long)(2 * i + 1) * W + 2 * j] += g;
                        dxp[(long long)(2 * i + 1) * W + 2 * j + 1] += g;
                    }
            }
        });
        return z;
    }

    /// 2x nearest-neighbour upsample.
    Tensor* upsample2(Tensor* x) {
        RSD_REQUIRE(x->ndim() == 4, dimension, "upsample2 expects a 4-d tensor");
        const int B = x->dim(0), C = x->dim(1), H = x->dim(2), W = x->dim(3);
        Tensor* z = result({B, C, 2 * H, 2 * W}, {x});
        node("upsample2", [=]() {
            for (long long p = 0; p < (long long)B * C; ++p) {
                const T* xp = x->data() + p * H * W;
                T* zp = z->data() + p * 4 * H * W;
                for (int i = 0; i < H; ++i)
                    for (int j = 0; j < W; ++j) {
                        T v = xp[(long long)i * W + j];
                        T* d = zp + (long long)(2 * i) * (2 * W) + 2 * j;
                        d[0] = v;
                        d[1] = v;
                        d[2 * W] = v;
                        d[2 * W + 1] = v;
                    }
            }
        },
        [=]() {
            if (!x->requires_grad) return;
            for (long long p = 0; p < (long long)B * C; ++p) {
                T* dxp = x->grad.data() + p * H * W;
                const T* gp = z->grad.data() + p * 4 * H * W;
                for (int i = 0; i < H; ++i)
                    for (int j = 0; j < W; ++j) {
                        const T* g = gp + (long long)(2 * i) * (2 * W) + 2 * j;
                        dxp[(long long)i * W + j] += g[0] + g[1] + g[2 * W] + g[2 * W + 1];
                    }
            }
        });
        return z;
    }

    /// Inverted dropout; identity when the graph is not in training mode.
    Tensor* dropout(Tensor* x, double rate) {
        RSD_REQUIRE(rate >= 0 && rate < 1, parameter, "dropout rate out of range");
        if (rate == 0.0) return x;
        Tensor* z = result(x->shape, {x});
        auto mask = std::make_shared<std::vector<T>>(std::size_t(z->size()), T(1));
        const long long n = z->size();
        const T keep = T(1.0 - rate);
        node("dropout", [=, this]() {
            if (training_) {
                for (long long i = 0; i < n; ++i)
                    (*mask)[std::size_t(i)] = rng_.uniform() < rate ? T(0) : T(1) / keep;
            } else {
                std::fill(mask->begin(), mask->end(), T(1));
            }
            for (long long i = 0; i < n; ++i)
                z->values[std::size_t(i)] = x->values[std::size_t(i)] * (*mask)[std::size_t(i)];
        },
        [=]() {
            if (!x->requires_grad) return;
            for (long long i = 0; i < n; ++i)
                x->grad[std::size_t(i)] += z->grad[std::size_t(i)] * (*mask)[std::size_t(i)];
        });
        return z;
    }

    /// Scalar mean of (x - target)^2 over every element.
    Tensor* mse(Tensor* x, Tensor* target) {
        RSD_REQUIRE(x->shape == target->shape, dimension, "mse shape mismatch");
        Tensor* z = result({1}, {x, target});
        const long long n = x->size();
        node("mse", [=]() {
            double acc = 0.0;
            for (long long i = 0; i < n; ++i) {
                double d = double(x->values[std::size_t(i)]) - double(target->values[std::size_t(i)]);
                acc += d * d;
            }
            z->values[0] = T(acc / double(n));
        },
        [=]() {
            if (!z->requires_grad) return;
            T g = z->grad[0] * T(2) / T(n);
            for (long long i = 0; i < n; ++i) {
                T d = x->values[std::size_t(i)] - target->values[std::size_t(i)];
                if (x->requires_grad) x->grad[std::size_t(i)] += g * d;
                if (target->requires_grad) target->grad[std::size_t(i)] -= g * d;
            }
        });
        return z;
    }

    /// Scalar mean of w[b] * (x - target)^2, w a per-sample weight [B].
    Tensor* weighted_mse(Tensor* x, Tensor* target, Tensor* wgt) {
        RSD_REQUIRE(x->shape == target->shape, dimension, "weighted_mse shape mismatch");
        RSD_REQUIRE(wgt->ndim() == 1 && wgt->dim(0) == x->dim(0), dimension,
                    "weighted_mse expects one weight per sample");
        Tensor* z = result({1}, {x, target, wgt});
        const int B = x->dim(0);
        const long long per = x->size() / B;
        node("weighted_mse", [=]() {
            double acc = 0.0;
            for (int b = 0; b < B; ++b) {
                const T* xp = x->data() + b * per;
                const T* tp = target->data() + b * per;
                double s = 0.0;
                for (long long i = 0; i < per; ++i) {
                    double d = double(xp[i]) - double(tp[i]);
                    s += d * d;
                }
                acc += double(wgt->values[std::size_t(b)]) * s;
            }
            z->values[0] = T(acc / double(x->size()));
        },
        [=]() {
            if (!z->requires_grad) return;
            T base = z->grad[0] * T(2) / T(x->size());
            for (int b = 0; b < B; ++b) {
                T g = base * wgt->values[std::size_t(b)];
                const T* xp = x->data() + b * per;
                const T* tp = target->data() + b * per;
                for (long long i = 0; i < per; ++i) {
                    T d = xp[i] - tp[i];
                    if (x->requires_grad) x->grad[b * per + i] += g * d;
                    if (target->requires_grad) target->grad[b * per + i] -= g * d;
                }
                if (wgt->requires_grad) {
                    double s = 0.0;
                    for (long long i = 0; i < per; ++i) {
                        double d = double(xp[i]) - double(tp[i]);
                        s += d * d;
                    }
                    wgt->grad[std::size_t(b)] += z->grad[0] * T(s / double(x->size()));
                }
            }
        });
        return z;
    }

    /// Escape hatch for user-defined operators: the caller supplies the output
    /// shape, the dependencies (for gradient routing), and both passes.
    Tensor* custom(std::vector<int> out_shape, std::vector<Tensor*> deps,
                   std::function<void(Tensor*)> fwd, std::function<void(Tensor*)> bwd) {
        bool rg = false;
        for (Tensor* d : deps)
            if (d && d->requires_grad) rg = true;
        Tensor* z = make(std::move(out_shape), rg);
        node("custom", [=]() { fwd(z); }, [=]() {
            if (z->requires_grad) bwd(z);
        });
        return z;
    }

private:
    struct Node {
        const char* tag;
        std::function<void()> fwd, bwd;
        double fwd_ms = 0, bwd_ms = 0;
    };

    /// 1x1 stride-1 convolution as a plain per-sample GEMM, no column buffer.
    void conv_pointwise(Tensor* x, Tensor* w, Tensor* b, Tensor* y) {
        const int B = x->dim(0), C = x->dim(1), O = w->dim(0);
        const long long hw = (long long)x->dim(2) * x->dim(3);
        node("conv.pw", [=]() {
            CMapM wm(w->data(), O, C);
#pragma omp parallel for schedule(static)
            for (int s = 0; s < B; ++s) {
                MapM ym(y->data() + s * O * hw, O, hw);
                ym.noalias() = wm * CMapM(x->data() + s * C * hw, C, hw);
                if (b)
                    for (int o = 0; o < O; ++o) ym.row(o).array() += b->values[std::size_t(o)];
            }
        },
        [=]() {
            if (!y->requires_grad) return;
            for (int s = 0; s < B; ++s) {
                CMapM gm(y->grad.data() + s * O * hw, O, hw);
                if (w->requires_grad)
                    MapM(w->grad.data(), O, C).noalias() +=
                        gm * CMapM(x->data() + s * C * hw, C, hw).transpose();
                if (x->requires_grad)
                    MapM(x->grad.data() + s * C * hw, C, hw).noalias() +=
                        CMapM(w->data(), O, C).transpose() * gm;
                if (b && b->requires_grad)
                    for (int o = 0; o < O; ++o) b->grad[std::size_t(o)] += gm.row(o).sum();
            }
        });
    }

    /// Per-channel stride-1 stencil, one tap-shifted row pass per kernel entry.
    void conv_depthwise(Tensor* x, Tensor* w, Tensor* b, Tensor* y, int pad) {
        const int B = x->dim(0), C = x->dim(1), H = x->dim(2), W = x->dim(3);
        const int kh = w->dim(2), kw = w->dim(3);
        const int Ho = y->dim(2), Wo = y->dim(3);
        using Vec = Eigen::Map<Eigen::Matrix<T, Eigen::Dynamic, 1>>;
        using CVec = Eigen::Map<const Eigen::Matrix<T, Eigen::Dynamic, 1>>;
        node("conv.dw", [=]() {
#pragma omp parallel for schedule(static)
            for (int s = 0; s < B; ++s)
                for (int c = 0; c < C; ++c) {
                    const T* xp = x->data() + ((long long)s * C + c) * H * W;
                    T* yp = y->data() + ((long long)s * C + c) * Ho * Wo;
                    const T bias = b ? b->values[std::size_t(c)] : T(0);
                    std::fill(yp, yp + (long long)Ho * Wo, bias);
                    for (int ky = 0; ky < kh; ++ky)
                        for (int kx = 0; kx < kw; ++kx) {
                            const T wv = w->values[std::size_t((c * kh + ky) * kw + kx)];
                            const int ox0 = std::max(0, pad - kx), ox1 = std::min(Wo, W + pad - kx);
                            if (ox1 <= ox0) continue;
                            for (int oy = std::max(0, pad - ky);
                                 oy < std::min(Ho, H + pad - ky); ++oy) {
                                T* dst = yp + (long long)oy * Wo + ox0;
                                const T* src = xp + (long long)(oy + ky - pad) * W + ox0 + kx - pad;
                                Vec(dst, ox1 - ox0) += wv * CVec(src, ox1 - ox0);
                            }
                        }
                }
        },
        [=]() {
            if (!y->requires_grad) return;
            for (int s = 0; s < B; ++s)
                for (int c = 0; c < C; ++c) {
                    const T* xp = x->data() + ((long long)s * C + c) * H * W;
                    const T* gp = y->grad.data() + ((long long)s * C + c) * Ho * Wo;
                    T* dxp = x->requires_grad ? x->grad.data() + ((long long)s * C + c) * H * W
                                              : nullptr;
                    for (int ky = 0; ky < kh; ++ky)
                        for (int kx = 0; kx < kw; ++kx) {
                            const std::size_t wi = std::size_t((c * kh + ky) * kw + kx);
                            const T wv = w->values[wi];
                            const int ox0 = std::max(0, pad - kx), ox1 = std::min(Wo, W + pad - kx);
                            if (ox1 <= ox0) continue;
                            T acc = T(0);
                            for (int oy = std::max(0, pad - ky);
                                 oy < std::min(Ho, H + pad - ky); ++oy) {
                                const T* g = gp + (long long)oy * Wo + ox0;
                                const long long off =
                                    (long long)(oy + ky - pad) * W + ox0 + kx - pad;
                                if (w->requires_grad)
                                    acc += CVec(g, ox1 - ox0).dot(CVec(xp + off, ox1 - ox0));
                                if (dxp) Vec(dxp + off, ox1 - ox0) += wv * CVec(g, ox1 - ox0);
                            }
                            if (w->requires_grad) w->grad[wi] += acc;
                        }
                    if (b && b->requires_grad)
                        b->grad[std::size_t(c)] += CVec(gp, (long long)Ho * Wo).sum();
                }
        });
    }

    /// Grouped im2col + GEMM path covering every remaining geometry.
    void conv_generic(Tensor* x, Tensor* w, Tensor* b, Tensor* y, int stride, int pad,
                      int groups) {
        const int B = x->dim(0), C = x->dim(1), H = x->dim(2), W = x->dim(3);
        const int O = w->dim(0), kh = w->dim(2), kw = w->dim(3);
        const int Ho = y->dim(2), Wo = y->dim(3);
        const int Cg = C / groups, Og = O / groups;
        // a single hot scratch buffer beats caching the forward gather here:
        // re-running im2col in backward costs less than streaming cold columns
        auto cols = std::make_shared<std::vector<std::vector<T>>>(
            detail::max_threads(), std::vector<T>(std::size_t(Cg) * kh * kw * Ho * Wo));

        auto im2col = [=](const T* xp, T* col) {
            const long long hw = (long long)Ho * Wo;
            for (int c = 0; c < Cg; ++c)
                for (int ky = 0; ky < kh; ++ky)
                    for (int kx = 0; kx < kw; ++kx) {
                        T* dst = col + ((long long)(c * kh + ky) * kw + kx) * hw;
                        const T* src = xp + (long long)c * H * W;
                        for (int oy = 0; oy < Ho; ++oy, dst += Wo) {
                            int iy = oy * stride + ky - pad;
                            if (iy < 0 || iy >= H) {
                                std::fill(dst, dst + Wo, T(0));
                                continue;
                            }
                            if (stride == 1) {
                                int ox0 = std::max(0, pad - kx);
                                int ox1 = std::min(Wo, W + pad - kx);
                                std::fill(dst, dst + ox0, T(0));
                                if (ox1 > ox0)
                                    std::memcpy(dst + ox0, src + (long long)iy * W + ox0 + kx - pad,
                                                std::size_t(ox1 - ox0) * sizeof(T));
                                std::fill(dst + std::max(ox0, ox1), dst + Wo, T(0));
                            } else {
                                for (int ox = 0; ox < Wo; ++ox) {
                                    int ix = ox * stride + kx - pad;
                                    dst[ox] = (ix >= 0 && ix < W) ? src[(long long)iy * W + ix] : T(0);
                                }
                            }
                        }
                    }
        };
        auto col2im_add = [=](const T* col, T* dxp) {
            const long long hw = (long long)Ho * Wo;
            for (int c = 0; c < Cg; ++c)
                for (int ky = 0; ky < kh; ++ky)
                    for (int kx = 0; kx < kw; ++kx) {
                        const T* src = col + ((long long)(c * kh + ky) * kw + kx) * hw;
                        T* dst = dxp + (long long)c * H * W;
                        for (int oy = 0; oy < Ho; ++oy, src += Wo) {
                            int iy = oy * stride + ky - pad;
                            if (iy < 0 || iy >= H) continue;
                            if (stride == 1) {
                                int ox0 = std::max(0, pad - kx);
                                int ox1 = std::min(Wo, W + pad - kx);
                                if (ox1 > ox0)
                                    Arr(dst + (long long)iy * W + ox0 + kx - pad, ox1 - ox0) +=
                                        CArr(src + ox0, ox1 - ox0);
                            } else {
                                for (int ox = 0; ox < Wo; ++ox) {
                                    int ix = ox * stride + kx - pad;
                                    if (ix >= 0 && ix < W) dst[(long long)iy * W + ix] += src[ox];
                                }
                            }
                        }
                    }
        };

        const long long xs = (long long)C * H * W, ys = (long long)O * Ho * Wo;
        const long long gxs = (long long)Cg * H * W;
        const int ck = Cg * kh * kw;
        node("conv", [=]() {
            const long long hw = (long long)Ho * Wo;
#pragma omp parallel for schedule(static)
            for (int s = 0; s < B; ++s) {
                T* col = (*cols)[std::size_t(detail::thread_id())].data();
                for (int gi = 0; gi < groups; ++gi) {
                    im2col(x->data() + s * xs + gi * gxs, col);
                    MapM ym(y->data() + s * ys + (long long)gi * Og * hw, Og, hw);
                    ym.noalias() = CMapM(w->data() + (long long)gi * Og * ck, Og, ck) *
                                   CMapM(col, ck, hw);
                    if (b)
                        for (int o = 0; o < Og; ++o)
                            ym.row(o).array() += b->values[std::size_t(gi * Og + o)];
                }
            }
        },
        [=]() {
            if (!y->requires_grad) return;
            const long long hw = (long long)Ho * Wo;
            for (int s = 0; s < B; ++s)
                for (int gi = 0; gi < groups; ++gi) {
                    CMapM gm(y->grad.data() + s * ys + (long long)gi * Og * hw, Og, hw);
                    T* col = (*cols)[0].data();
                    if (w->requires_grad || x->requires_grad)
                        im2col(x->data() + s * xs + gi * gxs, col);
                    if (w->requires_grad) {
                        MapM dwm(w->grad.data() + (long long)gi * Og * ck, Og, ck);
                        dwm.noalias() += gm * CMapM(col, ck, hw).transpose();
                    }
                    if (x->requires_grad) {
                        MapM dcol(col, ck, hw);  // forward gather no longer needed; reuse it
                        dcol.noalias() =
                            CMapM(w->data() + (long long)gi * Og * ck, Og, ck).transpose() * gm;
                        col2im_add(col, x->grad.data() + s * xs + gi * gxs);
                    }
                    if (b && b->requires_grad)
                        for (int o = 0; o < Og; ++o)
                            b->grad[std::size_t(gi * Og + o)] += gm.row(o).sum();
                }
        });
    }

    Tensor* make(std::vector<int> shape, bool rg) {
        long long n = detail::numel(shape);
        tensors_.emplace_back();
        Tensor& t = tensors_.back();
        t.shape = std::move(shape);
        t.values.assign(std::size_t(n), T(0));
        t.requires_grad = rg;
        if (rg) t.grad.assign(std::size_t(n), T(0));
        t.id = int(tensors_.size()) - 1;
        return &t;
    }

    Tensor* result(std::vector<int> shape, std::initializer_list<Tensor*> deps) {
        bool rg = false;
        for (Tensor* d : deps)
            if (d && d->requires_grad) rg = true;
        return make(std::move(shape), rg);
    }

    void node(const char* tag, std::function<void()> fwd, std::function<void()> bwd) {
        nodes_.push_back({tag, std::move(fwd), std::move(bwd)});
    }

    std::deque<Tensor> tensors_;
    std::vector<Node> nodes_;
    std::vector<Tensor*> params_;
    Rng rng_;
    bool training_ = false;
    bool profiling_ = false;
};

using Graph = GraphT<float>;
using Tensor = TensorT<float>;

/// Max relative gradient error over sampled entries of the given leaves,
/// comparing backward() against central finite differences of the loss.
template <typename T>
double grad_check(GraphT<T>& g, TensorT<T>* loss, const std::vector<TensorT<T>*>& leaves,
                  int samples_per_leaf = 12, double fd_eps = 1e-5, std::uint64_t pick_seed = 17) {
    static_assert(std::is_same_v<T, double>, "finite differences need the double-precision mode");
    g.set_training(false);
    g.forward();
    g.backward(loss);
    std::vector<std::vector<double>> analytic;
    for (TensorT<T>* l : leaves) analytic.emplace_back(l->grad.begin(), l->grad.end());

    Rng pick(pick_seed);
    double worst = 0.0;
    for (std::size_t li = 0; li < leaves.size(); ++li) {
        TensorT<T>* l = leaves[li];
        RSD_REQUIRE(l->requires_grad, contract, "grad_check leaf does not track gradients");
        for (int s = 0; s < samples_per_leaf; ++s) {
            std::size_t i = std::size_t(pick.below(std::uint64_t(l->size())));
            T keep = l->values[i];
            l->values[i] = keep + T(fd_eps);
            g.forward();
            double up = double(loss->values[0]);
            l->values[i] = keep - T(fd_eps);
            g.forward();
            double dn = double(loss->values[0]);
            l->values[i] = keep;
            double numeric = (up - dn) / (2.0 * fd_eps);
            double a = analytic[li][i];
            double err = std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), 1e-12});
            worst = std::max(worst, err);
        }
    }
    g.forward();  // restore clean activations
    return worst;
}

template <typename T>
struct AdamState {
    std::vector<std::vector<T>> m, v;
    long long step = 0;
};

/// Bias-corrected Adam on the graph's parameter list, reading tensor .grad.
template <typename T>
void adam_step(const std::vector<TensorT<T>*>& params, AdamState<T>& st, const TrainConfig& cfg) {
    if (st.m.empty()) {
        for (TensorT<T>* p : params) {
            st.m.emplace_back(std::size_t(p->size()), T(0));
            st.v.emplace_back(std::size_t(p->size()), T(0));
        }
    }
    RSD_REQUIRE(st.m.size() == params.size(), contract, "Adam state does not match params");
    st.step += 1;
    const double c1 = 1.0 - std::pow(cfg.beta1, double(st.step));
    const double c2 = 1.0 - std::pow(cfg.beta2, double(st.step));
    for (std::size_t pi = 0; pi < params.size(); ++pi) {
        TensorT<T>* p = params[pi];
        T* m = st.m[pi].data();
        T* v = st.v[pi].data();
        const T b1 = T(cfg.beta1), b2 = T(cfg.beta2);
        for (long long i = 0; i < p->size(); ++i) {
            T gi = p->grad[std::size_t(i)];
            m[i] = b1 * m[i] + (T(1) - b1) * gi;
            v[i] = b2 * v[i] + (T(1) - b2) * gi * gi;
            double mh = double(m[i]) / c1;
            double vh = double(v[i]) / c2;
            p->values[std::size_t(i)] -= T(cfg.lr * mh / (std::sqrt(vh) + cfg.eps));
        }
    }
}

/// ema <- decay * ema + (1 - decay) * params, element-wise.
template <typename T>
void ema_update(std::vector<std::vector<T>>& ema, const std::vector<TensorT<T>*>& params,
                double decay) {
    RSD_REQUIRE(decay >= 0 && decay <= 1, parameter, "EMA decay out of range");
    if (ema.empty())
        for (TensorT<T>* p : params) ema.emplace_back(p->values);
    RSD_REQUIRE(ema.size() == params.size(), contract, "EMA state does not match params");
    const T d = T(decay);
    for (std::size_t pi = 0; pi < params.size(); ++pi) {
        T* e = ema[pi].data();
        const T* p = params[pi]->values.data();
        for (std::size_t i = 0; i < ema[pi].size(); ++i) e[i] = d * e[i] + (T(1) - d) * p[i];
    }
}

}  // namespace resdiff
