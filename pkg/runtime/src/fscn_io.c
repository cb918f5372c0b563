/*
 * fscn_io.c -- tensor-file reader and prediction printer.
 *
 * The only translation unit linked next to a generated model source. All
 * I/O is plain text so a supervising process can tell a crash from garbage
 * by parsing; output is byte-stable (fixed formats, C locale assumed).
 */

#include <string.h>

#include "fscn_runtime.h"

int fscn_read_header(FILE *f, FscnHeader *h)
{
    char token[8];

    if (fscanf(f, "%7s", token) != 1 || strcmp(token, "FSCN1") != 0)
        return -1;
    if (fscanf(f, "%d", &h->rank) != 1)
        return -1;
    if (h->rank < 1 || h->rank > FSCN_MAX_RANK)
        return -1;
    for (int i = 0; i < h->rank; i++) {
        if (fscanf(f, "%d", &h->dims[i]) != 1)
            return -1;
        if (h->dims[i] <= 0)
            return -1;
    }
    if (fscanf(f, "%d", &h->class_count) != 1 || h->class_count < 1)
        return -1;
    if (fscanf(f, "%7s", token) != 1 || strcmp(token, "f32") != 0)
        return -1;
    return 0;
}

int fscn_read_row(FILE *f, float *buf, int count)
{
    for (int i = 0; i < count; i++)
        if (fscanf(f, "%f", &buf[i]) != 1)
            return -1;
    return 0;
}

void fscn_print_class(int cls)
{
    printf("%d\n", cls);
}

void fscn_print_vector(const float *v, int n)
{
    for (int i = 0; i < n; i++)
        printf(i ? " %.9g" : "%.9g", (double)v[i]);
    printf("\n");
}
