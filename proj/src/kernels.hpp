#pragma once

// Naive reference loops shared by the float engine and the integer path.
// Accumulation order is fixed (channel, then kernel row, then column) so both
// paths are deterministic.

#include <cstdint>

#include "mpq/graph.hpp"

namespace mpq::detail {

struct Geometry {
    Shape in;
    Shape out;
    int kh = 1;
    int kw = 1;
    int stride = 1;
    int pad = 0;
    int groups = 1;

    static Geometry of(const LayerSpec& l) {
        Geometry g{l.input_shape, l.output_shape, l.kernel_h, l.kernel_w, l.stride, l.padding, 1};
        if (l.kind == LayerKind::depthwise_conv2d || l.kind == LayerKind::avg_pool) g.groups = l.input_shape.c;
        return g;
    }
};

/// out[oc, y, x] += sum_{ic in group, ky, kx} in[ic, y*s-p+ky, x*s-p+kx] * w[oc, ic', ky, kx]
template <typename Acc, typename In, typename W>
void conv_forward(const Geometry& g, const In* in, const W* w, Acc* out) {
    const int cin_g = g.in.c / g.groups;
    const int cout_g = g.out.c / g.groups;
    const int plane = g.out.h * g.out.w;
    for (int oc = 0; oc < g.out.c; ++oc) {
        const int ic0 = (oc / cout_g) * cin_g;
        const W* wk = w + static_cast<std::int64_t>(oc) * cin_g * g.kh * g.kw;
        Acc* o = out + static_cast<std::int64_t>(oc) * plane;
        for (int icl = 0; icl < cin_g; ++icl) {
            const In* x = in + static_cast<std::int64_t>(ic0 + icl) * g.in.h * g.in.w;
            for (int ky = 0; ky < g.kh; ++ky) {
                for (int kx = 0; kx < g.kw; ++kx) {
                    const Acc wv = static_cast<Acc>(wk[(icl * g.kh + ky) * g.kw + kx]);
                    for (int oy = 0; oy < g.out.h; ++oy) {
                        const int iy = oy * g.stride - g.pad + ky;
                        if (iy < 0 || iy >= g.in.h) continue;
                        for (int ox = 0; ox < g.out.w; ++ox) {
                            const int ix = ox * g.stride - g.pad + kx;
                            if (ix < 0 || ix >= g.in.w) continue;
                            o[oy * g.out.w + ox] += static_cast<Acc>(x[iy * g.in.w + ix]) * wv;
                        }
                    }
                }
            }
        }
    }
}

/// dx += conv^T(dout, w)
inline void conv_backward_input(const Geometry& g, const double* dout, const double* w, double* dx) {
    const int cin_g = g.in.c / g.groups;
    const int cout_g = g.out.c / g.groups;
    const int plane = g.out.h * g.out.w;
    for (int oc = 0; oc < g.out.c; ++oc) {
        const int ic0 = (oc / cout_g) * cin_g;
        const double* wk = w + static_cast<std::int64_t>(oc) * cin_g * g.kh * g.kw;
        const double* d = dout + static_cast<std::int64_t>(oc) * plane;
        for (int icl = 0; icl < cin_g; ++icl) {
            double* x = dx + static_cast<std::int64_t>(ic0 + icl) * g.in.h * g.in.w;
            for (int ky = 0; ky < g.kh; ++ky) {
                for (int kx = 0; kx < g.kw; ++kx) {
                    const double wv = wk[(icl * g.kh + ky) * g.kw + kx];
                    for (int oy = 0; oy < g.out.h; ++oy) {
                        const int iy = oy * g.stride - g.pad + ky;
                        if (iy < 0 || iy >= g.in.h) continue;
                        for (int ox = 0; ox < g.out.w; ++ox) {
                            const int ix = ox * g.stride - g.pad + kx;
                            if (ix < 0 || ix >= g.in.w) continue;
                            x[iy * g.in.w + ix] += d[oy * g.out.w + ox] * wv;
                        }
                    }
                }
            }
        }
    }
}

/// dw += correlation of input with dout
inline void conv_backward_weight(const Geometry& g, const double* in, const double* dout, double* dw) {
    const int cin_g = g.in.c / g.groups;
    const int cout_g = g.out.c / g.groups;
    const int plane = g.out.h * g.out.w;
    for (int oc = 0; oc < g.out.c; ++oc) {
        const int ic0 = (oc / cout_g) * cin_g;
        double* wk = dw + static_cast<std::int64_t>(oc) * cin_g * g.kh * g.kw;
        const double* d = dout + static_cast<std::int64_t>(oc) * plane;
        for (int icl = 0; icl < cin_g; ++icl) {
            const double* x = in + static_cast<std::int64_t>(ic0 + icl) * g.in.h * g.in.w;
            for (int ky = 0; ky < g.kh; ++ky) {
                for (int kx = 0; kx < g.kw; ++kx) {
                    double acc = 0.0;
                    for (int oy = 0; oy < g.out.h; ++oy) {
                        const int iy = oy * g.stride - g.pad + ky;
                        if (iy < 0 || iy >= g.in.h) continue;
                        for (int ox = 0; ox < g.out.w; ++ox) {
                            const int ix = ox * g.stride - g.pad + kx;
                            if (ix < 0 || ix >= g.in.w) continue;
                            acc += x[iy * g.in.w + ix] * d[oy * g.out.w + ox];
                        }
                    }
                    wk[(icl * g.kh + ky) * g.kw + kx] += acc;
                }
            }
        }
    }
}

/// Window sums per channel (zero padding counts toward the window).
template <typename Acc, typename In>
void pool_sum(const Geometry& g, const In* in, Acc* out) {
    for (int c = 0; c < g.out.c; ++c) {
        const In* x = in + static_cast<std::int64_t>(c) * g.in.h * g.in.w;
        Acc* o = out + static_cast<std::int64_t>(c) * g.out.h * g.out.w;
        for (int oy = 0; oy < g.out.h; ++oy) {
            for (int ox = 0; ox < g.out.w; ++ox) {
                Acc acc{};
                for (int ky = 0; ky < g.kh; ++ky) {
                    const int iy = oy * g.stride - g.pad + ky;
                    if (iy < 0 || iy >= g.in.h) continue;
                    for (int kx = 0; kx < g.kw; ++kx) {
                        const int ix = ox * g.stride - g.pad + kx;
                        if (ix < 0 || ix >= g.in.w) continue;
                        acc += static_cast<Acc>(x[iy * g.in.w + ix]);
                    }
                }
                o[oy * g.out.w + ox] = acc;
            }
        }
    }
}

inline void pool_backward(const Geometry& g, const double* dout, double scale, double* dx) {
    for (int c = 0; c < g.out.c; ++c) {
        double* x = dx + static_cast<std::int64_t>(c) * g.in.h * g.in.w;
        const double* d = dout + static_cast<std::int64_t>(c) * g.out.h * g.out.w;
        for (int oy = 0; oy < g.out.h; ++oy) {
            for (int ox = 0; ox < g.out.w; ++ox) {
                const double v = d[oy * g.out.w + ox] * scale;
                for (int ky = 0; ky < g.kh; ++ky) {
                    const int iy = oy * g.stride - g.pad + ky;
                    if (iy < 0 || iy >= g.in.h) continue;
                    for (int kx = 0; kx < g.kw; ++kx) {
                        const int ix = ox * g.stride - g.pad + kx;
                        if (ix < 0 || ix >= g.in.w) continue;
                        x[iy * g.in.w + ix] += v;
                    }
                }
            }
        }
    }
}

/// out[o] += sum_i in[i] * w[o, i]
template <typename Acc, typename In, typename W>
void dense_forward(int n_in, int n_out, const In* in, const W* w, Acc* out) {
    for (int o = 0; o < n_out; ++o) {
        const W* row = w + static_cast<std::int64_t>(o) * n_in;
        Acc acc{};
        for (int i = 0; i < n_in; ++i) acc += static_cast<Acc>(in[i]) * static_cast<Acc>(row[i]);
        out[o] += acc;
    }
}

}  // namespace mpq::detail
