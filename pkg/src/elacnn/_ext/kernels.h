#ifndef ELACNN_KERNELS_H
#define ELACNN_KERNELS_H

#include <stddef.h>
#include <stdint.h>

/* All arrays are C-contiguous float32. Every output element is produced by a
 * single sequential accumulation whose order is documented per kernel and
 * mirrored exactly by the numpy fallback. Each product is folded into its
 * accumulator with a fused multiply-add (one rounding); everything else is
 * unfused, so build with -ffp-contract=off. */

void ek_conv2d_forward(const float *x, int n, int h, int w, int cin,
                       const float *wt, int kh, int kw, int cout,
                       const float *bias, float *out);

void ek_conv2d_grad_weights(const float *x, int n, int h, int w, int cin,
                            const float *g, int kh, int kw, int cout,
                            float *gw, float *gb);

void ek_maxpool2_forward(const float *x, int n, int h, int w, int c,
                         float *out, int8_t *arg);

void ek_maxpool2_backward(const float *g, const int8_t *arg, int n, int h,
                          int w, int c, float *gin);

void ek_dense_forward(const float *x, int n, int k, const float *wt, int m,
                      const float *bias, float *out);

void ek_dense_grad_input(const float *wt, int k, int m, const float *g, int n,
                         float *out);

void ek_adam_dense(float *p, float *mo, float *ve, const float *gsum,
                   size_t size, float divisor, float b1, float c1, float b2,
                   float c2, float bc1, float bc2, float lr, float eps);

void ek_adam_outer(float *p, float *mo, float *ve, const float *xs,
                   const float *gs, int n, int k, int m, float divisor,
                   float b1, float c1, float b2, float c2, float bc1,
                   float bc2, float lr, float eps);

#endif
