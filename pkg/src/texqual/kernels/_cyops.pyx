# Compiled implementations of the hot kernels: 3x3 'same' convolution
# (forward + gradients, im2col + BLAS gemm) and the bilateral range
# filter.  Semantics match texqual.kernels._npops exactly; see that
# module for the contract.

import numpy as np

cimport cython
from cython.parallel cimport prange
from libc.math cimport exp
from scipy.linalg.cython_blas cimport dgemm, sgemm

ctypedef fused floating:
    float
    double

BACKEND = "cython"


cdef inline int _out_size(int h, int stride) nogil:
    return (h - 1) // stride + 1


@cython.boundscheck(False)
@cython.wraparound(False)
cdef void _im2col(floating[:, :, :, ::1] x, floating[:, ::1] cols, int stride) nogil:
    cdef int n = x.shape[0], cin = x.shape[1], h = x.shape[2], w = x.shape[3]
    cdef int ho = _out_size(h, stride), wo = _out_size(w, stride)
    cdef int i, ci, oy, ox, ky, kx, yy, xx
    cdef long row
    for i in range(n):
        for oy in range(ho):
            for ox in range(wo):
                row = ((<long>i * ho + oy) * wo + ox)
                for ci in range(cin):
                    for ky in range(3):
                        yy = oy * stride - 1 + ky
                        for kx in range(3):
                            xx = ox * stride - 1 + kx
                            if 0 <= yy < h and 0 <= xx < w:
                                cols[row, (ci * 3 + ky) * 3 + kx] = x[i, ci, yy, xx]
                            else:
                                cols[row, (ci * 3 + ky) * 3 + kx] = 0


# Row-major C[m_r, n_r] = A[m_r, k_r] @ op(B) computed through Fortran
# BLAS by evaluating C^T = op(B)^T A^T in column-major layout.
@cython.boundscheck(False)
@cython.wraparound(False)
cdef void _gemm_abT(floating* a, floating* b, floating* c,
                    int m_r, int n_r, int k_r) nogil:
    # C[m_r, n_r] = A[m_r, k_r] @ B[n_r, k_r]^T   (all row-major)
    cdef int m = n_r, n = m_r, k = k_r
    cdef int lda = k_r, ldb = k_r, ldc = n_r
    cdef float onef = 1.0, zerof = 0.0
    cdef double oned = 1.0, zerod = 0.0
    if floating is float:
        sgemm("T", "N", &m, &n, &k, &onef, <float*> b, &ldb, <float*> a, &lda,
              &zerof, <float*> c, &ldc)
    else:
        dgemm("T", "N", &m, &n, &k, &oned, <double*> b, &ldb, <double*> a, &lda,
              &zerod, <double*> c, &ldc)


@cython.boundscheck(False)
@cython.wraparound(False)
cdef void _gemm_aTb(floating* a, floating* b, floating* c,
                    int m_r, int n_r, int k_r) nogil:
    # C[m_r, n_r] = A[k_r, m_r]^T @ B[k_r, n_r]   (all row-major)
    cdef int m = n_r, n = m_r, k = k_r
    cdef int lda = m_r, ldb = n_r, ldc = n_r
    cdef float onef = 1.0, zerof = 0.0
    cdef double oned = 1.0, zerod = 0.0
    if floating is float:
        sgemm("N", "T", &m, &n, &k, &onef, <float*> b, &ldb, <float*> a, &lda,
              &zerof, <float*> c, &ldc)
    else:
        dgemm("N", "T", &m, &n, &k, &oned, <double*> b, &ldb, <double*> a, &lda,
              &zerod, <double*> c, &ldc)


@cython.boundscheck(False)
@cython.wraparound(False)
cdef void _gemm_ab(floating* a, floating* b, floating* c,
                   int m_r, int n_r, int k_r) nogil:
    # C[m_r, n_r] = A[m_r, k_r] @ B[k_r, n_r]   (all row-major)
    cdef int m = n_r, n = m_r, k = k_r
    cdef int lda = k_r, ldb = n_r, ldc = n_r
    cdef float onef = 1.0, zerof = 0.0
    cdef double oned = 1.0, zerod = 0.0
    if floating is float:
        sgemm("N", "N", &m, &n, &k, &onef, <float*> b, &ldb, <float*> a, &lda,
              &zerof, <float*> c, &ldc)
    else:
        dgemm("N", "N", &m, &n, &k, &oned, <double*> b, &ldb, <double*> a, &lda,
              &zerod, <double*> c, &ldc)


def conv2d_forward(floating[:, :, :, ::1] x, floating[:, :, :, ::1] w,
                   floating[::1] b, int stride):
    cdef int n = x.shape[0], cin = x.shape[1], h = x.shape[2], wd = x.shape[3]
    cdef int cout = w.shape[0]
    cdef int ho = _out_size(h, stride), wo = _out_size(wd, stride)
    cdef long nloc = <long> n * ho * wo
    cdef int kdim = cin * 9

    dtype = np.float32 if floating is float else np.float64
    cols_arr = np.empty((nloc, kdim), dtype=dtype)
    ymat_arr = np.empty((nloc, cout), dtype=dtype)
    cdef floating[:, ::1] cols = cols_arr
    cdef floating[:, ::1] ymat = ymat_arr

    cdef long r
    cdef int co
    with nogil:
        _im2col(x, cols, stride)
        _gemm_abT(&cols[0, 0], &w[0, 0, 0, 0], &ymat[0, 0],
                  <int> nloc, cout, kdim)
        for r in range(nloc):
            for co in range(cout):
                ymat[r, co] += b[co]

    return np.ascontiguousarray(
        ymat_arr.reshape(n, ho, wo, cout).transpose(0, 3, 1, 2)
    )


@cython.boundscheck(False)
@cython.wraparound(False)
cdef void _col2im(floating[:, ::1] dcols, floating[:, :, :, ::1] dx, int stride) nogil:
    cdef int n = dx.shape[0], cin = dx.shape[1], h = dx.shape[2], w = dx.shape[3]
    cdef int ho = _out_size(h, stride), wo = _out_size(w, stride)
    cdef int i, ci, oy, ox, ky, kx, yy, xx
    cdef long row
    for i in range(n):
        for oy in range(ho):
            for ox in range(wo):
                row = ((<long>i * ho + oy) * wo + ox)
                for ci in range(cin):
                    for ky in range(3):
                        yy = oy * stride - 1 + ky
                        if yy < 0 or yy >= h:
                            continue
                        for kx in range(3):
                            xx = ox * stride - 1 + kx
                            if 0 <= xx < w:
                                dx[i, ci, yy, xx] += dcols[row, (ci * 3 + ky) * 3 + kx]


def conv2d_backward(floating[:, :, :, ::1] x, floating[:, :, :, ::1] w,
                    floating[:, :, :, ::1] dy, int stride, bint need_dx=True):
    cdef int n = x.shape[0], cin = x.shape[1], h = x.shape[2], wd = x.shape[3]
    cdef int cout = w.shape[0]
    cdef int ho = dy.shape[2], wo = dy.shape[3]
    cdef long nloc = <long> n * ho * wo
    cdef int kdim = cin * 9

    dtype = np.float32 if floating is float else np.float64
    cols_arr = np.empty((nloc, kdim), dtype=dtype)
    cdef floating[:, ::1] cols = cols_arr

    dy_mat_arr = np.ascontiguousarray(
        np.asarray(dy).transpose(0, 2, 3, 1).reshape(nloc, cout)
    )
    cdef floating[:, ::1] dy_mat = dy_mat_arr

    dw_arr = np.empty((cout, cin, 3, 3), dtype=dtype)
    cdef floating[:, :, :, ::1] dw = dw_arr
    db_arr = np.zeros(cout, dtype=dtype)
    cdef floating[::1] db = db_arr

    cdef long r
    cdef int co
    with nogil:
        _im2col(x, cols, stride)
        _gemm_aTb(&dy_mat[0, 0], &cols[0, 0], &dw[0, 0, 0, 0],
                  cout, kdim, <int> nloc)
        for r in range(nloc):
            for co in range(cout):
                db[co] += dy_mat[r, co]

    dx_arr = None
    cdef floating[:, ::1] dcols
    cdef floating[:, :, :, ::1] dx
    if need_dx:
        dcols_arr = np.empty((nloc, kdim), dtype=dtype)
        dcols = dcols_arr
        dx_arr = np.zeros((n, cin, h, wd), dtype=dtype)
        dx = dx_arr
        with nogil:
            _gemm_ab(&dy_mat[0, 0], &w[0, 0, 0, 0], &dcols[0, 0],
                     <int> nloc, kdim, cout)
            _col2im(dcols, dx, stride)

    return dx_arr, dw_arr, db_arr


@cython.boundscheck(False)
@cython.wraparound(False)
def bilateral_filter(double[:, ::1] img, int radius, double sigma_s, double sigma_r):
    cdef int h = img.shape[0], w = img.shape[1]
    pad_arr = np.pad(np.asarray(img), radius, mode="reflect")
    cdef double[:, ::1] pad = pad_arr
    out_arr = np.empty((h, w), dtype=np.float64)
    cdef double[:, ::1] out = out_arr

    cdef int side = 2 * radius + 1
    sw_arr = np.empty((side, side), dtype=np.float64)
    cdef double[:, ::1] sw = sw_arr
    cdef int dy, dx
    cdef double inv_s = -0.5 / (sigma_s * sigma_s)
    cdef double inv_r = -0.5 / (sigma_r * sigma_r)
    for dy in range(-radius, radius + 1):
        for dx in range(-radius, radius + 1):
            sw[dy + radius, dx + radius] = exp((dy * dy + dx * dx) * inv_s)

    cdef int y, x
    cdef double center, acc, wsum, v, d, wgt
    for y in prange(h, nogil=True, schedule="static"):
        for x in range(w):
            center = img[y, x]
            acc = 0.0
            wsum = 0.0
            for dy in range(side):
                for dx in range(side):
                    v = pad[y + dy, x + dx]
                    d = v - center
                    wgt = sw[dy, dx] * exp(d * d * inv_r)
                    acc = acc + wgt * v
                    wsum = wsum + wgt
            out[y, x] = acc / wsum
    return out_arr
