#include "kernels.h"

#include <math.h>
#include <string.h>
#if defined(__AVX512F__) || defined(__FMA__)
#include <immintrin.h>
#endif

#define PT 8  /* output pixels per conv tile */
#define CB 16 /* channels per vector */
#define QB 8  /* input channels per weight-gradient tile */
#define RB 16 /* rows per dense input-gradient tile */

typedef float v16 __attribute__((vector_size(CB * sizeof(float))));

static inline v16 vload(const float *p)
{
    v16 v;
    memcpy(&v, p, sizeof(v));
    return v;
}

static inline void vstore(float *p, v16 v) { memcpy(p, &v, sizeof(v)); }

/* broadcast; subtracting +0 keeps the sign of a -0 input */
static inline v16 vsplat(float x) { return x - (v16){0}; }

/* a * b + c with a single rounding, lane by lane. Every accumulation step in
 * this file goes through vfma or fmaf, so results do not depend on whether
 * the compiler would have contracted an expression. */
static inline v16 vfma(v16 a, v16 b, v16 c)
{
#if defined(__AVX512F__)
    return (v16)_mm512_fmadd_ps((__m512)a, (__m512)b, (__m512)c);
#elif defined(__FMA__)
    union { v16 v; __m256 h[2]; } ua = {a}, ub = {b}, uc = {c}, r;
    r.h[0] = _mm256_fmadd_ps(ua.h[0], ub.h[0], uc.h[0]);
    r.h[1] = _mm256_fmadd_ps(ua.h[1], ub.h[1], uc.h[1]);
    return r.v;
#else
    v16 r;
    for (int l = 0; l < CB; l++)
        r[l] = fmaf(a[l], b[l], c[l]);
    return r;
#endif
}

/* ------------------------------------------------------------------------ */
/* convolution: out[s,i,j,co] = (fused sum over di,dj,ci of x*w) + bias[co]  */

static float conv_point(const float *xs, int w, int cin, const float *wt,
                        int kh, int kw, int cout, int i, int j, int co)
{
    float acc = 0.0f;
    for (int di = 0; di < kh; di++)
        for (int dj = 0; dj < kw; dj++) {
            const float *xp = xs + ((size_t)(i + di) * w + (j + dj)) * cin;
            const float *wp = wt + ((size_t)(di * kw + dj) * cin) * cout + co;
            for (int ci = 0; ci < cin; ci++)
                acc = fmaf(xp[ci], wp[(size_t)ci * cout], acc);
        }
    return acc;
}

/* P output pixels x NV*CB channels, accumulators held in registers */
#define CONV_TILE(P, NV)                                                       \
    static inline void conv_tile_##P##_##NV(                                   \
        const float *xs, int w, int cin, const float *wt, int kh, int kw,      \
        int cout, int i, int j0, int c0, const float *bias, float *orow)       \
    {                                                                          \
        v16 acc[P][NV];                                                        \
        _Pragma("GCC unroll 8") for (int p = 0; p < P; p++)                   \
            _Pragma("GCC unroll 2") for (int q = 0; q < NV; q++)               \
                acc[p][q] = (v16){0};                                          \
        for (int di = 0; di < kh; di++)                                        \
            for (int dj = 0; dj < kw; dj++) {                                  \
                const float *xp =                                              \
                    xs + ((size_t)(i + di) * w + (j0 + dj)) * cin;             \
                const float *wp =                                              \
                    wt + ((size_t)(di * kw + dj) * cin) * cout + c0;           \
                for (int ci = 0; ci < cin; ci++) {                             \
                    v16 wv[NV];                                                \
                    _Pragma("GCC unroll 2") for (int q = 0; q < NV; q++)       \
                        wv[q] = vload(wp + (size_t)ci * cout + q * CB);        \
                    _Pragma("GCC unroll 8") for (int p = 0; p < P; p++) {      \
                        const v16 xv = vsplat(xp[p * cin + ci]);               \
                        _Pragma("GCC unroll 2") for (int q = 0; q < NV; q++)   \
                            acc[p][q] = vfma(xv, wv[q], acc[p][q]);            \
                    }                                                          \
                }                                                              \
            }                                                                  \
        _Pragma("GCC unroll 2") for (int q = 0; q < NV; q++) {                \
            const v16 bv = vload(bias + c0 + q * CB);                          \
            _Pragma("GCC unroll 8") for (int p = 0; p < P; p++)               \
                vstore(orow + (size_t)(j0 + p) * cout + c0 + q * CB,           \
                       acc[p][q] + bv);                                        \
        }                                                                      \
    }

CONV_TILE(6, 2)
CONV_TILE(4, 2)
CONV_TILE(1, 2)
CONV_TILE(8, 1)
CONV_TILE(1, 1)

void ek_conv2d_forward(const float *x, int n, int h, int w, int cin,
                       const float *wt, int kh, int kw, int cout,
                       const float *bias, float *out)
{
    const int ho = h - kh + 1, wo = w - kw + 1;
    const int cfull = cout - cout % CB;
    const long rows = (long)n * ho;

#pragma omp parallel for schedule(static)
    for (long r = 0; r < rows; r++) {
        const int s = (int)(r / ho), i = (int)(r % ho);
        const float *xs = x + (size_t)s * h * w * cin;
        float *orow = out + ((size_t)s * ho + i) * wo * cout;
        int c0 = 0;
        for (; c0 + 2 * CB <= cfull; c0 += 2 * CB) {
            int j0 = 0;
            for (; j0 + 6 <= wo; j0 += 6)
                conv_tile_6_2(xs, w, cin, wt, kh, kw, cout, i, j0, c0, bias, orow);
            for (; j0 + 4 <= wo; j0 += 4)
                conv_tile_4_2(xs, w, cin, wt, kh, kw, cout, i, j0, c0, bias, orow);
            for (; j0 < wo; j0++)
                conv_tile_1_2(xs, w, cin, wt, kh, kw, cout, i, j0, c0, bias, orow);
        }
        for (; c0 < cfull; c0 += CB) {
            int j0 = 0;
            for (; j0 + 8 <= wo; j0 += 8)
                conv_tile_8_1(xs, w, cin, wt, kh, kw, cout, i, j0, c0, bias, orow);
            for (; j0 < wo; j0++)
                conv_tile_1_1(xs, w, cin, wt, kh, kw, cout, i, j0, c0, bias, orow);
        }
        for (int co = cfull; co < cout; co++)
            for (int j = 0; j < wo; j++)
                orow[(size_t)j * cout + co] =
                    conv_point(xs, w, cin, wt, kh, kw, cout, i, j, co) +
                    bias[co];
    }
}

/* ------------------------------------------------------------------------ */
/* weight gradient: per sample gw_s[di,dj,ci,co] = sum over (i,j) row-major
 * of x[i+di,j+dj,ci] * g[i,j,co]; totals accumulate gw = gw + gw_s in sample
 * order starting from zero. Bias gradient likewise over g[i,j,co]. */

void ek_conv2d_grad_weights(const float *x, int n, int h, int w, int cin,
                            const float *g, int kh, int kw, int cout,
                            float *gw, float *gb)
{
    const int ho = h - kh + 1, wo = w - kw + 1;
    const size_t npix = (size_t)ho * wo;

    memset(gw, 0, sizeof(float) * (size_t)kh * kw * cin * cout);
    memset(gb, 0, sizeof(float) * (size_t)cout);

    for (int s = 0; s < n; s++) {
        const float *xs = x + (size_t)s * h * w * cin;
        const float *gs = g + (size_t)s * npix * cout;

        for (int co = 0; co < cout; co++) {
            float acc = 0.0f;
            for (size_t p = 0; p < npix; p++)
                acc = acc + gs[p * cout + co];
            gb[co] = gb[co] + acc;
        }

#pragma omp parallel for schedule(static)
        for (int tap = 0; tap < kh * kw; tap++) {
            const int di = tap / kw, dj = tap % kw;
            float *gwt = gw + (size_t)tap * cin * cout;
            const int cfull = cout - cout % CB;
            /* running per-sample sums; rows of g are visited once per tap so
             * a row stays cache-resident across all channel blocks */
            float part[cin * cout];
            memset(part, 0, sizeof(part));
            for (int i = 0; i < ho; i++) {
                const float *xrow = xs + ((size_t)(i + di) * w + dj) * cin;
                const float *grow = gs + (size_t)i * wo * cout;
                int c0 = 0;
                for (; c0 + 2 * CB <= cfull; c0 += 2 * CB) {
                    int q0 = 0;
                    for (; q0 + QB <= cin; q0 += QB) {
                        v16 acc[QB][2];
                        _Pragma("GCC unroll 8") for (int q = 0; q < QB; q++) {
                            acc[q][0] = vload(part + (size_t)(q0 + q) * cout + c0);
                            acc[q][1] = vload(part + (size_t)(q0 + q) * cout + c0 + CB);
                        }
                        for (int j = 0; j < wo; j++) {
                            const v16 g0 = vload(grow + (size_t)j * cout + c0);
                            const v16 g1 = vload(grow + (size_t)j * cout + c0 + CB);
                            const float *xp = xrow + (size_t)j * cin + q0;
                            _Pragma("GCC unroll 8") for (int q = 0; q < QB; q++) {
                                const v16 xv = vsplat(xp[q]);
                                acc[q][0] = vfma(xv, g0, acc[q][0]);
                                acc[q][1] = vfma(xv, g1, acc[q][1]);
                            }
                        }
                        _Pragma("GCC unroll 8") for (int q = 0; q < QB; q++) {
                            vstore(part + (size_t)(q0 + q) * cout + c0, acc[q][0]);
                            vstore(part + (size_t)(q0 + q) * cout + c0 + CB, acc[q][1]);
                        }
                    }
                    for (; q0 < cin; q0++) {
                        v16 a0 = vload(part + (size_t)q0 * cout + c0);
                        v16 a1 = vload(part + (size_t)q0 * cout + c0 + CB);
                        for (int j = 0; j < wo; j++) {
                            const v16 xv = vsplat(xrow[(size_t)j * cin + q0]);
                            a0 = vfma(xv, vload(grow + (size_t)j * cout + c0), a0);
                            a1 = vfma(xv, vload(grow + (size_t)j * cout + c0 + CB), a1);
                        }
                        vstore(part + (size_t)q0 * cout + c0, a0);
                        vstore(part + (size_t)q0 * cout + c0 + CB, a1);
                    }
                }
                for (; c0 < cfull; c0 += CB) {
                    int q0 = 0;
                    for (; q0 + QB <= cin; q0 += QB) {
                        v16 acc[QB];
                        _Pragma("GCC unroll 8") for (int q = 0; q < QB; q++)
                            acc[q] = vload(part + (size_t)(q0 + q) * cout + c0);
                        for (int j = 0; j < wo; j++) {
                            const v16 gv = vload(grow + (size_t)j * cout + c0);
                            const float *xp = xrow + (size_t)j * cin + q0;
                            _Pragma("GCC unroll 8") for (int q = 0; q < QB; q++)
                                acc[q] = vfma(vsplat(xp[q]), gv, acc[q]);
                        }
                        _Pragma("GCC unroll 8") for (int q = 0; q < QB; q++)
                            vstore(part + (size_t)(q0 + q) * cout + c0, acc[q]);
                    }
                    for (; q0 < cin; q0++) {
                        v16 acc = vload(part + (size_t)q0 * cout + c0);
                        for (int j = 0; j < wo; j++)
                            acc = vfma(vsplat(xrow[(size_t)j * cin + q0]),
                                   vload(grow + (size_t)j * cout + c0), acc);
                        vstore(part + (size_t)q0 * cout + c0, acc);
                    }
                }
                for (int co = cfull; co < cout; co++)
                    for (int ci = 0; ci < cin; ci++) {
                        float acc = part[(size_t)ci * cout + co];
                        for (int j = 0; j < wo; j++)
                            acc = fmaf(xrow[(size_t)j * cin + ci],
                                       grow[(size_t)j * cout + co], acc);
                        part[(size_t)ci * cout + co] = acc;
                    }
            }
            for (int e = 0; e < cin * cout; e++)
                gwt[e] = gwt[e] + part[e];
        }
    }
}

/* ------------------------------------------------------------------------ */
/* 2x2 stride-2 max pooling; arg holds the winning window slot 0..3 in
 * row-major order, ties resolved to the lowest slot. */

void ek_maxpool2_forward(const float *x, int n, int h, int w, int c,
                         float *out, int8_t *arg)
{
    const int ho = h / 2, wo = w / 2;
    const long rows = (long)n * ho;

#pragma omp parallel for schedule(static)
    for (long r = 0; r < rows; r++) {
        const int s = (int)(r / ho), i = (int)(r % ho);
        const float *x0 = x + (((size_t)s * h + 2 * i) * w) * c;
        const float *x1 = x0 + (size_t)w * c;
        float *o = out + ((size_t)s * ho + i) * wo * c;
        int8_t *a = arg + ((size_t)s * ho + i) * wo * c;
        for (int j = 0; j < wo; j++)
            for (int ch = 0; ch < c; ch++) {
                const size_t left = (size_t)(2 * j) * c + ch;
                float best = x0[left];
                int8_t slot = 0;
                if (x0[left + c] > best) {
                    best = x0[left + c];
                    slot = 1;
                }
                if (x1[left] > best) {
                    best = x1[left];
                    slot = 2;
                }
                if (x1[left + c] > best) {
                    best = x1[left + c];
                    slot = 3;
                }
                o[(size_t)j * c + ch] = best;
                a[(size_t)j * c + ch] = slot;
            }
    }
}

void ek_maxpool2_backward(const float *g, const int8_t *arg, int n, int h,
                          int w, int c, float *gin)
{
    const int ho = h / 2, wo = w / 2;
    memset(gin, 0, sizeof(float) * (size_t)n * h * w * c);
    for (int s = 0; s < n; s++)
        for (int i = 0; i < ho; i++)
            for (int j = 0; j < wo; j++)
                for (int ch = 0; ch < c; ch++) {
                    const size_t o = (((size_t)s * ho + i) * wo + j) * c + ch;
                    const int slot = arg[o];
                    const size_t row = (size_t)s * h + 2 * i + (slot >> 1);
                    gin[(row * w + 2 * j + (slot & 1)) * c + ch] = g[o];
                }
}

/* ------------------------------------------------------------------------ */
/* dense: out[s,j] = (sum over k of x[s,k]*w[k,j]) + bias[j]                  */

void ek_dense_forward(const float *x, int n, int k, const float *wt, int m,
                      const float *bias, float *out)
{
    memset(out, 0, sizeof(float) * (size_t)n * m);
    for (int kk = 0; kk < k; kk++) {
        const float *wr = wt + (size_t)kk * m;
        for (int s = 0; s < n; s++) {
            const float xv = x[(size_t)s * k + kk];
            float *o = out + (size_t)s * m;
            for (int j = 0; j < m; j++)
                o[j] = fmaf(xv, wr[j], o[j]);
        }
    }
    if (bias)
        for (int s = 0; s < n; s++)
            for (int j = 0; j < m; j++)
                out[(size_t)s * m + j] = out[(size_t)s * m + j] + bias[j];
}

/* input gradient: out[s,r] = sum over j of w[r,j]*g[s,j], j ascending */

void ek_dense_grad_input(const float *wt, int k, int m, const float *g, int n,
                         float *out)
{
    const int blocks = k / RB;

#pragma omp parallel for schedule(static)
    for (int b = 0; b < blocks; b++) {
        const int r0 = b * RB;
        float tile[m][RB];
        for (int r = 0; r < RB; r++)
            for (int j = 0; j < m; j++)
                tile[j][r] = wt[(size_t)(r0 + r) * m + j];
        int s = 0;
        for (; s + 4 <= n; s += 4) {
            v16 a0 = {0}, a1 = {0}, a2 = {0}, a3 = {0};
            const float *g0 = g + (size_t)s * m;
            for (int j = 0; j < m; j++) {
                const v16 tv = vload(tile[j]);
                a0 = vfma(vsplat(g0[j]), tv, a0);
                a1 = vfma(vsplat(g0[m + j]), tv, a1);
                a2 = vfma(vsplat(g0[2 * m + j]), tv, a2);
                a3 = vfma(vsplat(g0[3 * m + j]), tv, a3);
            }
            vstore(out + (size_t)s * k + r0, a0);
            vstore(out + (size_t)(s + 1) * k + r0, a1);
            vstore(out + (size_t)(s + 2) * k + r0, a2);
            vstore(out + (size_t)(s + 3) * k + r0, a3);
        }
        for (; s < n; s++) {
            v16 a = {0};
            const float *gr = g + (size_t)s * m;
            for (int j = 0; j < m; j++)
                a = vfma(vsplat(gr[j]), vload(tile[j]), a);
            vstore(out + (size_t)s * k + r0, a);
        }
    }
    for (int r = blocks * RB; r < k; r++)
        for (int s = 0; s < n; s++) {
            float acc = 0.0f;
            for (int j = 0; j < m; j++)
                acc = fmaf(wt[(size_t)r * m + j], g[(size_t)s * m + j], acc);
            out[(size_t)s * k + r] = acc;
        }
}

/* ------------------------------------------------------------------------ */
/* Adam. g = gsum / divisor; the expression order below is part of the
 * contract shared with the numpy fallback. */

static inline void adam_point(float *p, float *mo, float *ve, float g,
                              float b1, float c1, float b2, float c2,
                              float bc1, float bc2, float lr, float eps)
{
    const float m = b1 * *mo + c1 * g;
    const float v = b2 * *ve + c2 * (g * g);
    const float mh = m / bc1;
    const float vh = v / bc2;
    *mo = m;
    *ve = v;
    *p = *p - (lr * mh) / (sqrtf(vh) + eps);
}

void ek_adam_dense(float *p, float *mo, float *ve, const float *gsum,
                   size_t size, float divisor, float b1, float c1, float b2,
                   float c2, float bc1, float bc2, float lr, float eps)
{
#pragma omp parallel for schedule(static)
    for (size_t i = 0; i < size; i++)
        adam_point(p + i, mo + i, ve + i, gsum[i] / divisor, b1, c1, b2, c2,
                   bc1, bc2, lr, eps);
}

/* gradient given as sum over s of outer(xs[s], gs[s]), s ascending from 0 */

void ek_adam_outer(float *p, float *mo, float *ve, const float *xs,
                   const float *gs, int n, int k, int m, float divisor,
                   float b1, float c1, float b2, float c2, float bc1,
                   float bc2, float lr, float eps)
{
#pragma omp parallel for schedule(static)
    for (int r = 0; r < k; r++) {
        const size_t base = (size_t)r * m;
        float acc[m];
        for (int j = 0; j < m; j++)
            acc[j] = 0.0f;
        for (int s = 0; s < n; s++) {
            const float xv = xs[(size_t)s * k + r];
            const float *gr = gs + (size_t)s * m;
            for (int j = 0; j < m; j++)
                acc[j] = fmaf(xv, gr[j], acc[j]);
        }
        for (int j = 0; j < m; j++)
            adam_point(p + base + j, mo + base + j, ve + base + j,
                       acc[j] / divisor, b1, c1, b2, c2, bc1, bc2, lr, eps);
    }
}
