# Compiled cross-correlation kernels. Loop order keeps the innermost loop
# contiguous over the output row so the compiler can vectorize it; the
# summation order is fixed, keeping runs bit-reproducible. Single-threaded
# on purpose: the federated engine parallelizes across client replicas.

import numpy as np

cimport numpy as cnp

cnp.import_array()


def conv2d_forward(double[:, :, :, ::1] x, double[:, :, :, ::1] k, int pad):
    cdef Py_ssize_t n_batch = x.shape[0]
    cdef Py_ssize_t c_in = x.shape[1]
    cdef Py_ssize_t h = x.shape[2]
    cdef Py_ssize_t w = x.shape[3]
    cdef Py_ssize_t c_out = k.shape[0]
    cdef Py_ssize_t kh = k.shape[2]
    cdef Py_ssize_t kw = k.shape[3]
    cdef Py_ssize_t h_out = h + 2 * pad - kh + 1
    cdef Py_ssize_t w_out = w + 2 * pad - kw + 1

    out = np.zeros((n_batch, c_out, h_out, w_out), dtype=np.float64)
    cdef double[:, :, :, ::1] y = out
    cdef Py_ssize_t n, co, ci, i, j, p, q, ii, j_lo, j_hi
    cdef double wt

    with nogil:
        for n in range(n_batch):
            for co in range(c_out):
                for ci in range(c_in):
                    for p in range(kh):
                        for q in range(kw):
                            wt = k[co, ci, p, q]
                            j_lo = pad - q if pad > q else 0
                            j_hi = w + pad - q if w + pad - q < w_out else w_out
                            for i in range(h_out):
                                ii = i + p - pad
                                if ii < 0 or ii >= h:
                                    continue
                                for j in range(j_lo, j_hi):
                                    y[n, co, i, j] += wt * x[n, ci, ii, j + q - pad]
    return out


def conv2d_backward_input(double[:, :, :, ::1] dy, double[:, :, :, ::1] k,
                          int pad, Py_ssize_t h, Py_ssize_t w):
    cdef Py_ssize_t n_batch = dy.shape[0]
    cdef Py_ssize_t c_out = dy.shape[1]
    cdef Py_ssize_t h_out = dy.shape[2]
    cdef Py_ssize_t w_out = dy.shape[3]
    cdef Py_ssize_t c_in = k.shape[1]
    cdef Py_ssize_t kh = k.shape[2]
    cdef Py_ssize_t kw = k.shape[3]

    out = np.zeros((n_batch, c_in, h, w), dtype=np.float64)
    cdef double[:, :, :, ::1] dx = out
    cdef Py_ssize_t n, co, ci, i, j, p, q, ii, j_lo, j_hi
    cdef double wt

    with nogil:
        for n in range(n_batch):
            for co in range(c_out):
                for ci in range(c_in):
                    for p in range(kh):
                        for q in range(kw):
                            wt = k[co, ci, p, q]
                            j_lo = pad - q if pad > q else 0
                            j_hi = w + pad - q if w + pad - q < w_out else w_out
                            for i in range(h_out):
                                ii = i + p - pad
                                if ii < 0 or ii >= h:
                                    continue
                                for j in range(j_lo, j_hi):
                                    dx[n, ci, ii, j + q - pad] += wt * dy[n, co, i, j]
    return out


def conv2d_backward_kernel(double[:, :, :, ::1] dy, double[:, :, :, ::1] x,
                           int pad, Py_ssize_t kh, Py_ssize_t kw):
    cdef Py_ssize_t n_batch = dy.shape[0]
    cdef Py_ssize_t c_out = dy.shape[1]
    cdef Py_ssize_t h_out = dy.shape[2]
    cdef Py_ssize_t w_out = dy.shape[3]
    cdef Py_ssize_t c_in = x.shape[1]
    cdef Py_ssize_t h = x.shape[2]
    cdef Py_ssize_t w = x.shape[3]

    out = np.zeros((c_out, c_in, kh, kw), dtype=np.float64)
    cdef double[:, :, :, ::1] dk = out
    cdef Py_ssize_t n, co, ci, i, j, p, q, ii, j_lo, j_hi
    cdef double acc, acc1, acc2, acc3

    with nogil:
        for n in range(n_batch):
            for co in range(c_out):
                for ci in range(c_in):
                    for p in range(kh):
                        for q in range(kw):
                            j_lo = pad - q if pad > q else 0
                            j_hi = w + pad - q if w + pad - q < w_out else w_out
                            # four independent accumulators break the serial
                            # reduction chain; the summation order stays fixed
                            acc = 0.0
                            acc1 = 0.0
                            acc2 = 0.0
                            acc3 = 0.0
                            for i in range(h_out):
                                ii = i + p - pad
                                if ii < 0 or ii >= h:
                                    continue
                                j = j_lo
                                while j + 4 <= j_hi:
                                    acc += dy[n, co, i, j] * x[n, ci, ii, j + q - pad]
                                    acc1 += dy[n, co, i, j + 1] * x[n, ci, ii, j + 1 + q - pad]
                                    acc2 += dy[n, co, i, j + 2] * x[n, ci, ii, j + 2 + q - pad]
                                    acc3 += dy[n, co, i, j + 3] * x[n, ci, ii, j + 3 + q - pad]
                                    j += 4
                                while j < j_hi:
                                    acc += dy[n, co, i, j] * x[n, ci, ii, j + q - pad]
                                    j += 1
                            dk[co, ci, p, q] += acc + acc1 + acc2 + acc3
    return out
