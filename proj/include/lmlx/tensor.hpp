#pragma once

// Dense rank<=4 tensors with reverse-mode autodiff on an append-only tape.
// Scalar type is a template parameter: the product code runs TensorT<float>
// (32-bit storage, 64-bit accumulation inside reductions), the gradient-check
// suite instantiates the same ops with TensorT<double>.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <memory>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "lmlx/rng.hpp"

namespace lmlx {

struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct ShapeError : Error {
    using Error::Error;
};
struct ValueError : Error {
    using Error::Error;
};

using Dims = std::vector<int64_t>;

inline int64_t numel_of(const Dims& d) {
    int64_t n = 1;
    for (int64_t e : d) n *= e;
    return n;
}

inline std::string dims_str(const Dims& d) {
    std::ostringstream os;
    os << "[";
    for (size_t i = 0; i < d.size(); ++i) os << (i ? "," : "") << d[i];
    os << "]";
    return os.str();
}

inline void check_dims(const Dims& d) {
    if (d.empty() || d.size() > 4)
        throw ShapeError("tensor rank must be 1..4, got " + dims_str(d));
    for (int64_t e : d)
        if (e <= 0) throw ShapeError("nonpositive extent in " + dims_str(d));
}

template <typename S>
struct TensorT {
    Dims dims;
    std::vector<S> data;
    std::vector<S> grad;  // allocated lazily, same length as data
    bool requires_grad = false;

    int64_t numel() const { return static_cast<int64_t>(data.size()); }
    int rank() const { return static_cast<int>(dims.size()); }
    void ensure_grad() {
        if (grad.size() != data.size()) grad.assign(data.size(), S(0));
    }
    void zero_grad() {
        if (!grad.empty()) std::fill(grad.begin(), grad.end(), S(0));
    }
};

template <typename S>
using TensorPtr = std::shared_ptr<TensorT<S>>;

template <typename S>
TensorPtr<S> make_tensor(const Dims& dims, bool requires_grad = false) {
    check_dims(dims);
    auto t = std::make_shared<TensorT<S>>();
    t->dims = dims;
    t->data.assign(static_cast<size_t>(numel_of(dims)), S(0));
    t->requires_grad = requires_grad;
    return t;
}

template <typename S>
TensorPtr<S> make_tensor(const Dims& dims, const std::vector<S>& values, bool requires_grad = false) {
    auto t = make_tensor<S>(dims, requires_grad);
    if (static_cast<int64_t>(values.size()) != t->numel())
        throw ShapeError("value count " + std::to_string(values.size()) + " does not fill " + dims_str(dims));
    t->data = values;
    return t;
}

// Fill with N(0, std^2), one draw per element keyed by (seed, index).
template <typename S>
void fill_normal(TensorT<S>& t, uint64_t seed, double stddev) {
    for (size_t i = 0; i < t.data.size(); ++i)
        t.data[i] = static_cast<S>(stddev * rng_normal(seed, i));
}

// Append-only computation graph. Nodes record (tag, inputs, output, backward
// closure); backward() replays closures in exact reverse creation order.
template <typename S>
class GraphT {
public:
    struct Node {
        const char* tag;
        std::vector<TensorPtr<S>> inputs;
        TensorPtr<S> out;
        std::function<void()> back;  // empty when output needs no grad
    };

    size_t size() const { return nodes_.size(); }
    const Node& node(size_t i) const { return nodes_[i]; }

    // Backward from a scalar root; seed_value supports token-weighted batch
    // accumulation. Gradients accumulate (+=) into .grad of requires_grad
    // tensors; callers zero parameter grads between optimizer steps.
    void backward(const TensorPtr<S>& root, double seed_value = 1.0) {
        if (root->numel() != 1)
            throw ShapeError("backward root must be scalar, got " + dims_str(root->dims));
        if (!root->requires_grad)
            throw ValueError("backward root does not require grad");
        root->ensure_grad();
        root->grad[0] += static_cast<S>(seed_value);
        for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it)
            if (it->back) it->back();
    }

    // ---- elementwise and linear ops ----

    TensorPtr<S> add(TensorPtr<S> a, TensorPtr<S> b) {
        if (a->dims == b->dims) {
            auto out = fresh(a->dims, a, b);
            for (int64_t i = 0; i < a->numel(); ++i) out->data[i] = a->data[i] + b->data[i];
            record("add", {a, b}, out, [a, b, out] {
                if (a->requires_grad) {
                    a->ensure_grad();
                    for (int64_t i = 0; i < a->numel(); ++i) a->grad[i] += out->grad[i];
                }
                if (b->requires_grad) {
                    b->ensure_grad();
                    for (int64_t i = 0; i < b->numel(); ++i) b->grad[i] += out->grad[i];
                }
            });
            return out;
        }
        // trailing-dimension bias: [..., D] + [D]; the only broadcast allowed
        if (b->rank() == 1 && a->rank() >= 2 && a->dims.back() == b->dims[0]) {
            int64_t d = b->dims[0], rows = a->numel() / d;
            auto out = fresh(a->dims, a, b);
            for (int64_t r = 0; r < rows; ++r)
                for (int64_t j = 0; j < d; ++j) out->data[r * d + j] = a->data[r * d + j] + b->data[j];
            record("add_bias", {a, b}, out, [a, b, out, rows, d] {
                if (a->requires_grad) {
                    a->ensure_grad();
                    for (int64_t i = 0; i < a->numel(); ++i) a->grad[i] += out->grad[i];
                }
                if (b->requires_grad) {
                    b->ensure_grad();
                    for (int64_t j = 0; j < d; ++j) {
                        double acc = 0.0;
                        for (int64_t r = 0; r < rows; ++r) acc += static_cast<double>(out->grad[r * d + j]);
                        b->grad[j] += static_cast<S>(acc);
                    }
                }
            });
            return out;
        }
        throw ShapeError("add: incompatible shapes " + dims_str(a->dims) + " and " + dims_str(b->dims));
    }

    TensorPtr<S> mul(TensorPtr<S> a, TensorPtr<S> b) {
        if (a->dims != b->dims)
            throw ShapeError("mul: incompatible shapes " + dims_str(a->dims) + " and " + dims_str(b->dims));
        auto out = fresh(a->dims, a, b);
        for (int64_t i = 0; i < a->numel(); ++i) out->data[i] = a->data[i] * b->data[i];
        record("mul", {a, b}, out, [a, b, out] {
            if (a->requires_grad) {
                a->ensure_grad();
                for (int64_t i = 0; i < a->numel(); ++i) a->grad[i] += out->grad[i] * b->data[i];
            }
            if (b->requires_grad) {
                b->ensure_grad();
                for (int64_t i = 0; i < b->numel(); ++i) b->grad[i] += out->grad[i] * a->data[i];
            }
        });
        return out;
    }

    TensorPtr<S> mul_const(TensorPtr<S> a, double c) {
        auto out = fresh(a->dims, a, nullptr);
        for (int64_t i = 0; i < a->numel(); ++i) out->data[i] = static_cast<S>(a->data[i] * c);
        record("mul_const", {a}, out, [a, out, c] {
            if (!a->requires_grad) return;
            a->ensure_grad();
            for (int64_t i = 0; i < a->numel(); ++i) a->grad[i] += static_cast<S>(out->grad[i] * c);
        });
        return out;
    }

    TensorPtr<S> silu(TensorPtr<S> a) {
        auto out = fresh(a->dims, a, nullptr);
        for (int64_t i = 0; i < a->numel(); ++i) {
            double x = a->data[i];
            out->data[i] = static_cast<S>(x / (1.0 + std::exp(-x)));
        }
        record("silu", {a}, out, [a, out] {
            if (!a->requires_grad) return;
            a->ensure_grad();
            for (int64_t i = 0; i < a->numel(); ++i) {
                double x = a->data[i];
                double sg = 1.0 / (1.0 + std::exp(-x));
                a->grad[i] += static_cast<S>(static_cast<double>(out->grad[i]) * (sg + x * sg * (1.0 - sg)));
            }
        });
        return out;
    }

    // matmul: [M,K]x[K,N] or batched [B,M,K]x[B,K,N]; inner loops accumulate
    // in 64-bit regardless of S.
    TensorPtr<S> matmul(TensorPtr<S> a, TensorPtr<S> b) {
        int64_t batch, m, k, n;
        if (a->rank() == 2 && b->rank() == 2) {
            batch = 1;
            m = a->dims[0];
            k = a->dims[1];
            n = b->dims[1];
            if (b->dims[0] != k) throw ShapeError("matmul: inner dims disagree, " + dims_str(a->dims) + " x " + dims_str(b->dims));
        } else if (a->rank() == 3 && b->rank() == 3) {
            batch = a->dims[0];
            m = a->dims[1];
            k = a->dims[2];
            n = b->dims[2];
            if (b->dims[0] != batch || b->dims[1] != k)
                throw ShapeError("matmul: incompatible batched shapes " + dims_str(a->dims) + " x " + dims_str(b->dims));
        } else {
            throw ShapeError("matmul: unsupported ranks " + dims_str(a->dims) + " x " + dims_str(b->dims));
        }
        Dims od = (a->rank() == 2) ? Dims{m, n} : Dims{batch, m, n};
        auto out = fresh(od, a, b);
        {
            std::vector<double> rowacc(static_cast<size_t>(n));
            for (int64_t bi = 0; bi < batch; ++bi) {
                const S* pa = a->data.data() + bi * m * k;
                const S* pb = b->data.data() + bi * k * n;
                S* po = out->data.data() + bi * m * n;
                for (int64_t i = 0; i < m; ++i) {
                    std::fill(rowacc.begin(), rowacc.end(), 0.0);
                    for (int64_t l = 0; l < k; ++l) {
                        const double v = pa[i * k + l];
                        const S* brow = pb + l * n;
                        for (int64_t j = 0; j < n; ++j) rowacc[j] += v * static_cast<double>(brow[j]);
                    }
                    for (int64_t j = 0; j < n; ++j) po[i * n + j] = static_cast<S>(rowacc[j]);
                }
            }
        }
        record("matmul", {a, b}, out, [a, b, out, batch, m, k, n] {
            std::vector<double> scratch;
            for (int64_t bi = 0; bi < batch; ++bi) {
                const S* pa = a->data.data() + bi * m * k;
                const S* pb = b->data.data() + bi * k * n;
                const S* pg = out->grad.data() + bi * m * n;
                if (a->requires_grad) {
                    a->ensure_grad();
                    S* ga = a->grad.data() + bi * m * k;
                    for (int64_t i = 0; i < m; ++i)
                        for (int64_t l = 0; l < k; ++l) {
                            const S* grow = pg + i * n;
                            const S* brow = pb + l * n;
                            double acc = 0.0;
                            for (int64_t j = 0; j < n; ++j)
                                acc += static_cast<double>(grow[j]) * static_cast<double>(brow[j]);
                            ga[i * k + l] += static_cast<S>(acc);
                        }
                }
                if (b->requires_grad) {
                    b->ensure_grad();
                    S* gb = b->grad.data() + bi * k * n;
                    scratch.assign(static_cast<size_t>(k * n), 0.0);
                    for (int64_t i = 0; i < m; ++i) {
                        const S* grow = pg + i * n;
                        for (int64_t l = 0; l < k; ++l) {
                            const double v = pa[i * k + l];
                            double* srow = scratch.data() + l * n;
                            for (int64_t j = 0; j < n; ++j) srow[j] += v * static_cast<double>(grow[j]);
                        }
                    }
                    for (int64_t l = 0; l < k; ++l)
                        for (int64_t j = 0; j < n; ++j) gb[l * n + j] += static_cast<S>(scratch[l * n + j]);
                }
            }
        });
        return out;
    }

    // ---- shape ops ----

    TensorPtr<S> reshape(TensorPtr<S> a, const Dims& nd) {
        check_dims(nd);
        if (numel_of(nd) != a->numel())
            throw ShapeError("reshape: " + dims_str(a->dims) + " to " + dims_str(nd) + " changes element count");
        auto out = fresh(nd, a, nullptr);
        out->data = a->data;
        record("reshape", {a}, out, [a, out] {
            if (!a->requires_grad) return;
            a->ensure_grad();
            for (int64_t i = 0; i < a->numel(); ++i) a->grad[i] += out->grad[i];
        });
        return out;
    }

    TensorPtr<S> transpose(TensorPtr<S> a, const std::vector<int>& perm) {
        int r = a->rank();
        if (static_cast<int>(perm.size()) != r) throw ShapeError("transpose: perm size != rank");
        Dims nd(r);
        for (int i = 0; i < r; ++i) nd[i] = a->dims[perm[i]];
        auto out = fresh(nd, a, nullptr);
        std::vector<int64_t> is(r, 1), os(r, 1);
        for (int i = r - 2; i >= 0; --i) is[i] = is[i + 1] * a->dims[i + 1];
        for (int i = r - 2; i >= 0; --i) os[i] = os[i + 1] * nd[i + 1];
        std::vector<int64_t> map(a->numel());
        std::vector<int64_t> idx(r, 0);
        for (int64_t oi = 0; oi < out->numel(); ++oi) {
            int64_t rem = oi, src = 0;
            for (int i = 0; i < r; ++i) {
                idx[i] = rem / os[i];
                rem %= os[i];
                src += idx[i] * is[perm[i]];
            }
            out->data[oi] = a->data[src];
            map[oi] = src;
        }
        record("transpose", {a}, out, [a, out, map = std::move(map)] {
            if (!a->requires_grad) return;
            a->ensure_grad();
            for (int64_t oi = 0; oi < out->numel(); ++oi) a->grad[map[oi]] += out->grad[oi];
        });
        return out;
    }

    // Single row slice: x[i,:] as [1,cols].
    TensorPtr<S> row(TensorPtr<S> a, int64_t i) {
        if (a->rank() != 2) throw ShapeError("row: expects rank 2, got " + dims_str(a->dims));
        if (i < 0 || i >= a->dims[0]) throw ShapeError("row: index out of range");
        int64_t c = a->dims[1];
        auto out = fresh({1, c}, a, nullptr);
        std::copy_n(a->data.begin() + i * c, c, out->data.begin());
        record("row", {a}, out, [a, out, i, c] {
            if (!a->requires_grad) return;
            a->ensure_grad();
            for (int64_t j = 0; j < c; ++j) a->grad[i * c + j] += out->grad[j];
        });
        return out;
    }

    // ---- reductions and normalizations ----

    TensorPtr<S> sum_all(TensorPtr<S> a) {
        auto out = fresh({1}, a, nullptr);
        double acc = 0.0;
        for (int64_t i = 0; i < a->numel(); ++i) acc += static_cast<double>(a->data[i]);
        out->data[0] = static_cast<S>(acc);
        record("sum_all", {a}, out, [a, out] {
            if (!a->requires_grad) return;
            a->ensure_grad();
            for (int64_t i = 0; i < a->numel(); ++i) a->grad[i] += out->grad[0];
        });
        return out;
    }

    // Column means of [T,N] -> [N].
    TensorPtr<S> mean_rows(TensorPtr<S> a) {
        if (a->rank() != 2) throw ShapeError("mean_rows: expects rank 2, got " + dims_str(a->dims));
        int64_t t = a->dims[0], n = a->dims[1];
        auto out = fresh({n}, a, nullptr);
        for (int64_t j = 0; j < n; ++j) {
            double acc = 0.0;
            for (int64_t i = 0; i < t; ++i) acc += static_cast<double>(a->data[i * n + j]);
            out->data[j] = static_cast<S>(acc / static_cast<double>(t));
        }
        record("mean_rows", {a}, out, [a, out, t, n] {
            if (!a->requires_grad) return;
            a->ensure_grad();
            for (int64_t i = 0; i < t; ++i)
                for (int64_t j = 0; j < n; ++j)
                    a->grad[i * n + j] += static_cast<S>(static_cast<double>(out->grad[j]) / static_cast<double>(t));
        });
        return out;
    }

    TensorPtr<S> softmax(TensorPtr<S> a, int axis) {
        int r = a->rank();
        if (axis < 0) axis += r;
        if (axis < 0 || axis >= r) throw ShapeError("softmax: invalid axis");
        int64_t n = a->dims[axis];
        int64_t inner = 1, outer = 1;
        for (int i = axis + 1; i < r; ++i) inner *= a->dims[i];
        for (int i = 0; i < axis; ++i) outer *= a->dims[i];
        auto out = fresh(a->dims, a, nullptr);
        std::vector<double> e(static_cast<size_t>(n));
        for (int64_t o = 0; o < outer; ++o)
            for (int64_t in = 0; in < inner; ++in) {
                const int64_t base = o * n * inner + in;
                double mx = -std::numeric_limits<double>::infinity();
                for (int64_t j = 0; j < n; ++j) mx = std::max(mx, static_cast<double>(a->data[base + j * inner]));
                if (!std::isfinite(mx)) throw ValueError("softmax: non-finite input");
                double sum = 0.0;
                for (int64_t j = 0; j < n; ++j) {
                    e[j] = std::exp(static_cast<double>(a->data[base + j * inner]) - mx);
                    sum += e[j];
                }
                for (int64_t j = 0; j < n; ++j) out->data[base + j * inner] = static_cast<S>(e[j] / sum);
            }
        record("softmax", {a}, out, [a, out, n, inner, outer] {
            if (!a->requires_grad) return;
            a->ensure_grad();
            for (int64_t o = 0; o < outer; ++o)
                for (int64_t in = 0; in < inner; ++in) {
                    const int64_t base = o * n * inner + in;
                    double dot = 0.0;
                    for (int64_t j = 0; j < n; ++j)
                        dot += static_cast<double>(out->grad[base + j * inner]) * static_cast<double>(out->data[base + j * inner]);
                    for (int64_t j = 0; j < n; ++j) {
                        double y = out->data[base + j * inner];
                        a->grad[base + j * inner] += static_cast<S>(y * (static_cast<double>(out->grad[base + j * inner]) - dot));
                    }
                }
        });
        return out;
    }

    // Softmax over key prefix j<=i per query row i; entries j>i are exactly 0.
    // Accepts [T,T] or [H,T,T].
    TensorPtr<S> causal_softmax(TensorPtr<S> a) {
        int64_t h = 1, t;
        if (a->rank() == 3) {
            h = a->dims[0];
            t = a->dims[1];
            if (a->dims[2] != t) throw ShapeError("causal_softmax: expects [H,T,T], got " + dims_str(a->dims));
        } else if (a->rank() == 2) {
            t = a->dims[0];
            if (a->dims[1] != t) throw ShapeError("causal_softmax: expects [T,T], got " + dims_str(a->dims));
        } else {
            throw ShapeError("causal_softmax: bad rank " + dims_str(a->dims));
        }
        auto out = fresh(a->dims, a, nullptr);
        std::vector<double> e(static_cast<size_t>(t));
        for (int64_t hi = 0; hi < h; ++hi)
            for (int64_t i = 0; i < t; ++i) {
                const int64_t base = (hi * t + i) * t;
                double mx = -std::numeric_limits<double>::infinity();
                for (int64_t j = 0; j <= i; ++j) mx = std::max(mx, static_cast<double>(a->data[base + j]));
                double sum = 0.0;
                for (int64_t j = 0; j <= i; ++j) {
                    e[j] = std::exp(static_cast<double>(a->data[base + j]) - mx);
                    sum += e[j];
                }
                for (int64_t j = 0; j <= i; ++j) out->data[base + j] = static_cast<S>(e[j] / sum);
                // j > i stays zero-initialized
            }
        record("causal_softmax", {a}, out, [a, out, h, t] {
            if (!a->requires_grad) return;
            a->ensure_grad();
            for (int64_t hi = 0; hi < h; ++hi)
                for (int64_t i = 0; i < t; ++i) {
                    const int64_t base = (hi * t + i) * t;
                    double dot = 0.0;
                    for (int64_t j = 0; j <= i; ++j)
                        dot += static_cast<double>(out->grad[base + j]) * static_cast<double>(out->data[base + j]);
                    for (int64_t j = 0; j <= i; ++j) {
                        double y = out->data[base + j];
                        a->grad[base + j] += static_cast<S>(y * (static_cast<double>(out->grad[base + j]) - dot));
                    }
                }
        });
        return out;
    }

    // RMS normalization over the last axis of [T,D] with learned scale [D].
    TensorPtr<S> rmsnorm(TensorPtr<S> a, TensorPtr<S> w, double eps = 1e-5) {
        if (a->rank() != 2 || w->rank() != 1 || w->dims[0] != a->dims[1])
            throw ShapeError("rmsnorm: expects [T,D] and [D], got " + dims_str(a->dims) + " and " + dims_str(w->dims));
        int64_t t = a->dims[0], d = a->dims[1];
        auto out = fresh(a->dims, a, w);
        std::vector<double> inv(t);
        for (int64_t i = 0; i < t; ++i) {
            double ms = 0.0;
            for (int64_t j = 0; j < d; ++j) {
                double x = a->data[i * d + j];
                ms += x * x;
            }
            inv[i] = 1.0 / std::sqrt(ms / static_cast<double>(d) + eps);
            for (int64_t j = 0; j < d; ++j)
                out->data[i * d + j] = static_cast<S>(static_cast<double>(a->data[i * d + j]) * inv[i] *
                                                      static_cast<double>(w->data[j]));
        }
        record("rmsnorm", {a, w}, out, [a, w, out, t, d, inv = std::move(inv)] {
            for (int64_t i = 0; i < t; ++i) {
                const int64_t base = i * d;
                if (a->requires_grad) {
                    a->ensure_grad();
                    double dot = 0.0;  // sum_j dy_j * w_j * x_j
                    for (int64_t j = 0; j < d; ++j)
                        dot += static_cast<double>(out->grad[base + j]) * static_cast<double>(w->data[j]) *
                               static_cast<double>(a->data[base + j]);
                    const double k = dot * inv[i] * inv[i] * inv[i] / static_cast<double>(d);
                    for (int64_t j = 0; j < d; ++j)
                        a->grad[base + j] += static_cast<S>(static_cast<double>(out->grad[base + j]) *
                                                                static_cast<double>(w->data[j]) * inv[i] -
                                                            static_cast<double>(a->data[base + j]) * k);
                }
                if (w->requires_grad) {
                    w->ensure_grad();
                    for (int64_t j = 0; j < d; ++j)
                        w->grad[j] += static_cast<S>(static_cast<double>(out->grad[base + j]) *
                                                     static_cast<double>(a->data[base + j]) * inv[i]);
                }
            }
        });
        return out;
    }

    TensorPtr<S> embedding(TensorPtr<S> table, const std::vector<int>& ids) {
        if (table->rank() != 2) throw ShapeError("embedding: table must be [V,D]");
        int64_t v = table->dims[0], d = table->dims[1];
        if (ids.empty()) throw ShapeError("embedding: empty id list");
        for (int id : ids)
            if (id < 0 || id >= v) throw ShapeError("embedding: id " + std::to_string(id) + " out of vocab " + std::to_string(v));
        int64_t t = static_cast<int64_t>(ids.size());
        auto out = fresh({t, d}, table, nullptr);
        for (int64_t i = 0; i < t; ++i)
            std::copy_n(table->data.begin() + ids[i] * d, d, out->data.begin() + i * d);
        record("embedding", {table}, out, [table, out, ids, t, d] {
            if (!table->requires_grad) return;
            table->ensure_grad();
            for (int64_t i = 0; i < t; ++i)
                for (int64_t j = 0; j < d; ++j) table->grad[ids[i] * d + j] += out->grad[i * d + j];
        });
        return out;
    }

    // Rotary position encoding over [H,T,Dh] (Dh even), angles theta_i = base^(-2i/Dh).
    TensorPtr<S> rope(TensorPtr<S> a, double base = 10000.0) {
        if (a->rank() != 3 || a->dims[2] % 2 != 0)
            throw ShapeError("rope: expects [H,T,Dh] with even Dh, got " + dims_str(a->dims));
        int64_t h = a->dims[0], t = a->dims[1], dh = a->dims[2];
        auto out = fresh(a->dims, a, nullptr);
        int64_t half = dh / 2;
        std::vector<double> cs(t * half), sn(t * half);
        for (int64_t p = 0; p < t; ++p)
            for (int64_t i = 0; i < half; ++i) {
                double theta = std::pow(base, -2.0 * static_cast<double>(i) / static_cast<double>(dh));
                cs[p * half + i] = std::cos(static_cast<double>(p) * theta);
                sn[p * half + i] = std::sin(static_cast<double>(p) * theta);
            }
        for (int64_t hi = 0; hi < h; ++hi)
            for (int64_t p = 0; p < t; ++p)
                for (int64_t i = 0; i < half; ++i) {
                    const int64_t ix = (hi * t + p) * dh + 2 * i;
                    double x0 = a->data[ix], x1 = a->data[ix + 1];
                    double c = cs[p * half + i], s = sn[p * half + i];
                    out->data[ix] = static_cast<S>(x0 * c - x1 * s);
                    out->data[ix + 1] = static_cast<S>(x0 * s + x1 * c);
                }
        record("rope", {a}, out, [a, out, h, t, dh, half, cs = std::move(cs), sn = std::move(sn)] {
            if (!a->requires_grad) return;
            a->ensure_grad();
            for (int64_t hi = 0; hi < h; ++hi)
                for (int64_t p = 0; p < t; ++p)
                    for (int64_t i = 0; i < half; ++i) {
                        const int64_t ix = (hi * t + p) * dh + 2 * i;
                        double g0 = out->grad[ix], g1 = out->grad[ix + 1];
                        double c = cs[p * half + i], s = sn[p * half + i];
                        a->grad[ix] += static_cast<S>(g0 * c + g1 * s);
                        a->grad[ix + 1] += static_cast<S>(-g0 * s + g1 * c);
                    }
        });
        return out;
    }

    // Inverted dropout with a counter-based keyed mask: element i is kept when
    // rng_uniform(key, i) >= p, so the mask is independent of evaluation order.
    TensorPtr<S> dropout(TensorPtr<S> a, double p, uint64_t key) {
        if (p < 0.0 || p >= 1.0) throw ValueError("dropout: p must be in [0,1)");
        if (p == 0.0) return a;
        auto out = fresh(a->dims, a, nullptr);
        const double scale = 1.0 / (1.0 - p);
        for (int64_t i = 0; i < a->numel(); ++i)
            out->data[i] = (rng_uniform(key, static_cast<uint64_t>(i)) >= p)
                               ? static_cast<S>(a->data[i] * scale)
                               : S(0);
        record("dropout", {a}, out, [a, out, p, key, scale] {
            if (!a->requires_grad) return;
            a->ensure_grad();
            for (int64_t i = 0; i < a->numel(); ++i)
                if (rng_uniform(key, static_cast<uint64_t>(i)) >= p)
                    a->grad[i] += static_cast<S>(out->grad[i] * scale);
        });
        return out;
    }

    // Mean masked token NLL: mean over mask-true positions of -log softmax(logits)[target].
    // Mask-false positions contribute nothing to value or gradient.
    TensorPtr<S> cross_entropy_masked(TensorPtr<S> logits, const std::vector<int>& targets,
                                      const std::vector<uint8_t>& mask) {
        if (logits->rank() != 2) throw ShapeError("cross_entropy: logits must be [T,V]");
        int64_t t = logits->dims[0], v = logits->dims[1];
        if (static_cast<int64_t>(targets.size()) != t || static_cast<int64_t>(mask.size()) != t)
            throw ShapeError("cross_entropy: targets/mask length != T");
        int64_t m = 0;
        for (int64_t i = 0; i < t; ++i) {
            if (!mask[i]) continue;
            ++m;
            if (targets[i] < 0 || targets[i] >= v)
                throw ShapeError("cross_entropy: target " + std::to_string(targets[i]) + " out of vocab " + std::to_string(v));
        }
        if (m == 0) throw ValueError("cross_entropy: empty loss, all mask entries false");
        auto out = fresh({1}, logits, nullptr);
        double acc = 0.0;
        std::vector<double> e(static_cast<size_t>(v));
        for (int64_t i = 0; i < t; ++i) {
            if (!mask[i]) continue;
            const S* lrow = logits->data.data() + i * v;
            double mx = lrow[0];
            for (int64_t j = 1; j < v; ++j) mx = std::max(mx, static_cast<double>(lrow[j]));
            double sum = 0.0;
            for (int64_t j = 0; j < v; ++j) sum += std::exp(static_cast<double>(lrow[j]) - mx);
            acc += std::log(sum) + mx - static_cast<double>(lrow[targets[i]]);
        }
        out->data[0] = static_cast<S>(acc / static_cast<double>(m));
        record("cross_entropy", {logits}, out, [logits, out, targets, mask, t, v, m] {
            if (!logits->requires_grad) return;
            logits->ensure_grad();
            const double g = static_cast<double>(out->grad[0]) / static_cast<double>(m);
            std::vector<double> e(static_cast<size_t>(v));
            for (int64_t i = 0; i < t; ++i) {
                if (!mask[i]) continue;
                const S* lrow = logits->data.data() + i * v;
                double mx = lrow[0];
                for (int64_t j = 1; j < v; ++j) mx = std::max(mx, static_cast<double>(lrow[j]));
                double sum = 0.0;
                for (int64_t j = 0; j < v; ++j) {
                    e[j] = std::exp(static_cast<double>(lrow[j]) - mx);
                    sum += e[j];
                }
                for (int64_t j = 0; j < v; ++j) {
                    double p = e[j] / sum;
                    logits->grad[i * v + j] += static_cast<S>(g * (p - (j == targets[i] ? 1.0 : 0.0)));
                }
            }
        });
        return out;
    }

    // Pairwise logistic loss ln(1 + e^{-d}) of a scalar reward margin d.
    TensorPtr<S> logistic_loss(TensorPtr<S> diff) {
        if (diff->numel() != 1) throw ShapeError("logistic_loss: expects scalar");
        auto out = fresh({1}, diff, nullptr);
        double d = diff->data[0];
        out->data[0] = static_cast<S>(d > 0 ? std::log1p(std::exp(-d)) : -d + std::log1p(std::exp(d)));
        record("logistic_loss", {diff}, out, [diff, out] {
            if (!diff->requires_grad) return;
            diff->ensure_grad();
            double d = diff->data[0];
            double sg = 1.0 / (1.0 + std::exp(-d));
            diff->grad[0] += static_cast<S>(static_cast<double>(out->grad[0]) * (sg - 1.0));
        });
        return out;
    }

    // out[t,:] = sum_i w[t,i] * experts[i][t,:], accumulated in 64-bit.
    TensorPtr<S> moe_combine_token(const std::vector<TensorPtr<S>>& experts, TensorPtr<S> w) {
        const int64_t n = static_cast<int64_t>(experts.size());
        if (n == 0) throw ShapeError("moe_combine_token: no experts");
        int64_t t = experts[0]->dims[0], d = experts[0]->dims[1];
        for (const auto& e : experts)
            if (e->dims != experts[0]->dims) throw ShapeError("moe_combine_token: expert shape mismatch");
        if (w->rank() != 2 || w->dims[0] != t || w->dims[1] != n)
            throw ShapeError("moe_combine_token: weights must be [T,N], got " + dims_str(w->dims));
        bool rg = w->requires_grad;
        for (const auto& e : experts) rg = rg || e->requires_grad;
        auto out = make_tensor<S>({t, d});
        out->requires_grad = rg;
        for (int64_t i = 0; i < t; ++i)
            for (int64_t j = 0; j < d; ++j) {
                double acc = 0.0;
                for (int64_t e = 0; e < n; ++e)
                    acc += static_cast<double>(w->data[i * n + e]) * static_cast<double>(experts[e]->data[i * d + j]);
                out->data[i * d + j] = static_cast<S>(acc);
            }
        std::vector<TensorPtr<S>> ins = experts;
        ins.push_back(w);
        record("moe_combine_token", ins, out, [experts, w, out, n, t, d] {
            for (int64_t e = 0; e < n; ++e) {
                if (!experts[e]->requires_grad) continue;
                experts[e]->ensure_grad();
                for (int64_t i = 0; i < t; ++i) {
                    const S we = w->data[i * n + e];
                    for (int64_t j = 0; j < d; ++j) experts[e]->grad[i * d + j] += out->grad[i * d + j] * we;
                }
            }
            if (w->requires_grad) {
                w->ensure_grad();
                for (int64_t i = 0; i < t; ++i)
                    for (int64_t e = 0; e < n; ++e) {
                        double acc = 0.0;
                        for (int64_t j = 0; j < d; ++j)
                            acc += static_cast<double>(out->grad[i * d + j]) * static_cast<double>(experts[e]->data[i * d + j]);
                        w->grad[i * n + e] += static_cast<S>(acc);
                    }
            }
        });
        return out;
    }

    // out = sum_i w[i] * experts[i] with a single weight vector [N].
    TensorPtr<S> moe_combine_seq(const std::vector<TensorPtr<S>>& experts, TensorPtr<S> w) {
        const int64_t n = static_cast<int64_t>(experts.size());
        if (n == 0) throw ShapeError("moe_combine_seq: no experts");
        for (const auto& e : experts)
            if (e->dims != experts[0]->dims) throw ShapeError("moe_combine_seq: expert shape mismatch");
        if (w->rank() != 1 || w->dims[0] != n)
            throw ShapeError("moe_combine_seq: weights must be [N], got " + dims_str(w->dims));
        bool rg = w->requires_grad;
        for (const auto& e : experts) rg = rg || e->requires_grad;
        auto out = make_tensor<S>(experts[0]->dims);
        out->requires_grad = rg;
        const int64_t sz = out->numel();
        for (int64_t i = 0; i < sz; ++i) {
            double acc = 0.0;
            for (int64_t e = 0; e < n; ++e)
                acc += static_cast<double>(w->data[e]) * static_cast<double>(experts[e]->data[i]);
            out->data[i] = static_cast<S>(acc);
        }
        std::vector<TensorPtr<S>> ins = experts;
        ins.push_back(w);
        record("moe_combine_seq", ins, out, [experts, w, out, n, sz] {
            for (int64_t e = 0; e < n; ++e) {
                if (!experts[e]->requires_grad) continue;
                experts[e]->ensure_grad();
                for (int64_t i = 0; i < sz; ++i) experts[e]->grad[i] += out->grad[i] * w->data[e];
            }
            if (w->requires_grad) {
                w->ensure_grad();
                for (int64_t e = 0; e < n; ++e) {
                    double acc = 0.0;
                    for (int64_t i = 0; i < sz; ++i)
                        acc += static_cast<double>(out->grad[i]) * static_cast<double>(experts[e]->data[i]);
                    w->grad[e] += static_cast<S>(acc);
                }
            }
        });
        return out;
    }

    // Constant (non-differentiable) tensor registered on the tape.
    TensorPtr<S> constant(const Dims& dims, const std::vector<S>& values) {
        auto t = make_tensor<S>(dims, values, false);
        record("const", {}, t, nullptr);
        return t;
    }

private:
    std::vector<Node> nodes_;

    TensorPtr<S> fresh(const Dims& dims, const TensorPtr<S>& a, const TensorPtr<S>& b) {
        auto t = make_tensor<S>(dims);
        t->requires_grad = (a && a->requires_grad) || (b && b->requires_grad);
        return t;
    }

    void record(const char* tag, std::vector<TensorPtr<S>> inputs, const TensorPtr<S>& out,
                std::function<void()> back) {
        Node n;
        n.tag = tag;
        n.inputs = std::move(inputs);
        n.out = out;
        // Skip nodes whose output never received gradient (side branches).
        if (out->requires_grad && back)
            n.back = [out, fn = std::move(back)] {
                if (!out->grad.empty()) fn();
            };
        nodes_.push_back(std::move(n));
    }
};

using Tensor = TensorT<float>;
using Graph = GraphT<float>;
using TensorF = TensorPtr<float>;

}  // namespace lmlx
