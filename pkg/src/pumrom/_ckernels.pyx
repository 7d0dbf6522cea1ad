# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
# cython: language_level=3
"""Compiled element kernels.

Same contract as :mod:`pumrom._pykernels`; see that module for the argument
conventions.
"""
import numpy as np


cdef inline void _kappa(double u, double mu1, double mu2,
                        double* val, double* dval) noexcept nogil:
    cdef double om = 1.0 - u
    cdef double c = 12.0 / mu2
    cdef double num = u * om
    cdef double den = u * u * u + c * om * om * om
    cdef double q = num / den
    cdef double dnum = 1.0 - 2.0 * u
    cdef double dden = 3.0 * u * u - 3.0 * c * om * om
    cdef double dq = (dnum * den - num * dden) / (den * den)
    val[0] = 36.0 / mu2 * q * q + mu1
    dval[0] = 72.0 / mu2 * q * dq


def kappa(double[::1] u, double[::1] mu1, double[::1] mu2):
    cdef Py_ssize_t n = u.shape[0], i
    val = np.empty(n)
    dval = np.empty(n)
    cdef double[::1] v = val
    cdef double[::1] dv = dval
    with nogil:
        for i in range(n):
            _kappa(u[i], mu1[i], mu2[i], &v[i], &dv[i])
    return val, dval


def element_kernel(const double[:, ::1] ue,
                   const double[:, ::1] N,
                   const double[:, ::1] Dxi,
                   const double[:, ::1] Deta,
                   const double[::1] wq,
                   const double[::1] hx,
                   const double[::1] hy,
                   bint nonlinear,
                   const double[::1] mu1,
                   const double[::1] mu2,
                   const double[:, ::1] diff,
                   const double[:, ::1] bx,
                   const double[:, ::1] by,
                   const double[:, ::1] react,
                   const double[:, ::1] src,
                   bint want_jac):
    cdef Py_ssize_t E = ue.shape[0], nb = ue.shape[1], Q = N.shape[0]
    cdef Py_ssize_t e, q, a, b
    r = np.zeros((E, nb))
    J = np.zeros((E if want_jac else 0, nb, nb))
    gxa_buf = np.empty(nb)
    gya_buf = np.empty(nb)
    cdef double[:, ::1] rv = r
    cdef double[:, :, ::1] Jv = J
    cdef double[::1] gx = gxa_buf
    cdef double[::1] gy = gya_buf
    abc = np.empty((3, nb))
    cdef double[::1] A = abc[0]
    cdef double[::1] B = abc[1]
    cdef double[::1] C = abc[2]
    cdef double sx, sy, det, w, u, ux, uy, D, dD, lower, t1, t2, t3, Na, bxq, byq, cq

    with nogil:
        for e in range(E):
            sx = 2.0 / hx[e]
            sy = 2.0 / hy[e]
            det = 0.25 * hx[e] * hy[e]
            for q in range(Q):
                u = 0.0
                ux = 0.0
                uy = 0.0
                for a in range(nb):
                    u = u + ue[e, a] * N[q, a]
                    ux = ux + ue[e, a] * Dxi[q, a]
                    uy = uy + ue[e, a] * Deta[q, a]
                ux = ux * sx
                uy = uy * sy
                w = wq[q] * det
                if nonlinear:
                    _kappa(u, mu1[e], mu2[e], &D, &dD)
                else:
                    D = diff[e, q]
                    dD = 0.0
                bxq = bx[e, q]
                byq = by[e, q]
                cq = react[e, q]
                lower = -bxq * ux - byq * uy + cq * u - src[e, q]
                for a in range(nb):
                    gx[a] = Dxi[q, a] * sx
                    gy[a] = Deta[q, a] * sy
                    rv[e, a] += w * (D * (ux * gx[a] + uy * gy[a]) + lower * N[q, a])
                if want_jac:
                    # J[a, b] += A[a] gx[b] + B[a] gy[b] + C[a] N[b]
                    for a in range(nb):
                        Na = w * N[q, a]
                        A[a] = w * D * gx[a] - Na * bxq
                        B[a] = w * D * gy[a] - Na * byq
                        C[a] = w * dD * (ux * gx[a] + uy * gy[a]) + Na * cq
                    for a in range(nb):
                        t1 = A[a]
                        t2 = B[a]
                        t3 = C[a]
                        for b in range(nb):
                            Jv[e, a, b] += t1 * gx[b] + t2 * gy[b] + t3 * N[q, b]
    if want_jac:
        return r, J
    return r, None
