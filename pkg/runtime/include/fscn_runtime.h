/*
 * fscn_runtime.h -- fixed scaffolding for generated inference programs.
 *
 * Generated model sources carry their weights as constant arrays in a
 * separate translation unit and instantiate the kernel macros below; this
 * header plus fscn_io.c supply everything else: tensor-file parsing,
 * prediction printing, exit codes. Keeping weight definitions out of the
 * kernel unit stops the optimizer from folding weight values into
 * instruction immediates, so kernel code depends only on model structure.
 *
 * Kernels are deliberately plain loop nests: no helper calls inside the
 * loops, no library math, no heap. Each output element is accumulated in a
 * single fixed order so a harness can reproduce results bit-for-bit.
 * The noipa attribute keeps each kernel a real function with its weights
 * read from constant data, even when the caller is visible to the optimizer.
 */

#ifndef FSCN_RUNTIME_H
#define FSCN_RUNTIME_H

#include <stdint.h>
#include <stdio.h>

#define FSCN_EXIT_OK 0
#define FSCN_EXIT_BADFILE 2   /* malformed or truncated tensor file */
#define FSCN_EXIT_SHAPE 3     /* file shape disagrees with compiled model */

#define FSCN_MAX_RANK 8

typedef struct {
    int rank;                 /* includes the leading batch dimension */
    int dims[FSCN_MAX_RANK];  /* dims[0] = number of input rows */
    int class_count;
} FscnHeader;

/* Tensor-file protocol: header "FSCN1 <rank> <dims...> <classes> f32",
 * then one whitespace-separated row of decimal floats per input. */
int fscn_read_header(FILE *f, FscnHeader *h);
int fscn_read_row(FILE *f, float *buf, int count);

/* Prediction line protocol: one token line per input. */
void fscn_print_class(int cls);
void fscn_print_vector(const float *v, int n);

/*
 * Dense layer: y[j] = B[j] + sum_i x[i] * W[i][j].
 * The i-loop is outermost so every output j accumulates contributions in
 * ascending input order.
 */
#define FSCN_DENSE(NAME, IN, OUT, W, B)                                       \
    __attribute__((noipa)) static void NAME(const float *restrict x,          \
                                            float *restrict y) {              \
        for (int j = 0; j < (OUT); j++)                                       \
            y[j] = (B)[j];                                                    \
        for (int i = 0; i < (IN); i++)                                        \
            for (int j = 0; j < (OUT); j++)                                   \
                y[j] += x[i] * (W)[i][j];                                     \
    }

/* Dense layer over int8 weights with one dequantization scale. */
#define FSCN_DENSE_Q(NAME, IN, OUT, W, WSCALE, B)                             \
    __attribute__((noipa)) static void NAME(const float *restrict x,          \
                                            float *restrict y) {              \
        for (int j = 0; j < (OUT); j++)                                       \
            y[j] = (B)[j];                                                    \
        for (int i = 0; i < (IN); i++)                                        \
            for (int j = 0; j < (OUT); j++)                                   \
                y[j] += x[i] * ((float)(W)[i][j] * (WSCALE));                 \
    }

/*
 * 2-D valid convolution, HWC layout, weights [KH][KW][CIN][F].
 * Per output element the accumulation order is (c, k, l) ascending.
 */
#define FSCN_CONV2D(NAME, H, W_, CIN, KH, KW, STRIDE, F, WT, B)               \
    __attribute__((noipa)) static void NAME(const float *restrict x,          \
                                            float *restrict y) {              \
        const int oh = ((H) - (KH)) / (STRIDE) + 1;                           \
        const int ow = ((W_) - (KW)) / (STRIDE) + 1;                          \
        for (int i = 0; i < oh; i++)                                          \
            for (int j = 0; j < ow; j++)                                      \
                for (int f = 0; f < (F); f++)                                 \
                    y[(i * ow + j) * (F) + f] = (B)[f];                       \
        for (int i = 0; i < oh; i++)                                          \
            for (int j = 0; j < ow; j++)                                      \
                for (int c = 0; c < (CIN); c++)                               \
                    for (int k = 0; k < (KH); k++)                            \
                        for (int l = 0; l < (KW); l++)                        \
                            for (int f = 0; f < (F); f++)                     \
                                y[(i * ow + j) * (F) + f] +=                  \
                                    x[((i * (STRIDE) + k) * (W_) +            \
                                       (j * (STRIDE) + l)) * (CIN) + c]       \
                                    * (WT)[k][l][c][f];                       \
    }

#define FSCN_CONV2D_Q(NAME, H, W_, CIN, KH, KW, STRIDE, F, WT, WSCALE, B)     \
    __attribute__((noipa)) static void NAME(const float *restrict x,          \
                                            float *restrict y) {              \
        const int oh = ((H) - (KH)) / (STRIDE) + 1;                           \
        const int ow = ((W_) - (KW)) / (STRIDE) + 1;                          \
        for (int i = 0; i < oh; i++)                                          \
            for (int j = 0; j < ow; j++)                                      \
                for (int f = 0; f < (F); f++)                                 \
                    y[(i * ow + j) * (F) + f] = (B)[f];                       \
        for (int i = 0; i < oh; i++)                                          \
            for (int j = 0; j < ow; j++)                                      \
                for (int c = 0; c < (CIN); c++)                               \
                    for (int k = 0; k < (KH); k++)                            \
                        for (int l = 0; l < (KW); l++)                        \
                            for (int f = 0; f < (F); f++)                     \
                                y[(i * ow + j) * (F) + f] +=                  \
                                    x[((i * (STRIDE) + k) * (W_) +            \
                                       (j * (STRIDE) + l)) * (CIN) + c]       \
                                    * ((float)(WT)[k][l][c][f] * (WSCALE));   \
    }

/* ReLU as an explicit comparison; NaN clamps to zero like any non-positive. */
#define FSCN_RELU(NAME, N_)                                                   \
    __attribute__((noipa)) static void NAME(float *restrict x) {              \
        for (int i = 0; i < (N_); i++)                                        \
            x[i] = (x[i] > 0.0f) ? x[i] : 0.0f;                               \
    }

/* Argmax with first-maximum-wins ties, explicit comparisons only. */
#define FSCN_ARGMAX(NAME, N_)                                                 \
    __attribute__((noipa)) static int NAME(const float *restrict x) {         \
        int best = 0;                                                         \
        for (int i = 1; i < (N_); i++)                                        \
            if (x[i] > x[best])                                               \
                best = i;                                                     \
        return best;                                                          \
    }

/*
 * Squashing head for generative models: clamp to [-3,3] then the rational
 * approximation t*(27+t^2)/(27+9t^2). Pure arithmetic, no libm, and an
 * evaluation harness can mirror the exact float32 operation sequence.
 */
#define FSCN_SQUASH(NAME, N_)                                                 \
    __attribute__((noipa)) static void NAME(float *restrict x) {              \
        for (int i = 0; i < (N_); i++) {                                      \
            float t = x[i];                                                   \
            if (t > 3.0f)                                                     \
                t = 3.0f;                                                     \
            if (t < -3.0f)                                                    \
                t = -3.0f;                                                    \
            float s = t * t;                                                  \
            x[i] = t * (27.0f + s) / (27.0f + 9.0f * s);                      \
        }                                                                     \
    }

#endif /* FSCN_RUNTIME_H */
