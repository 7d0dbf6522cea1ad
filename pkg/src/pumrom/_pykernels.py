"""Pure-numpy element kernels (fallback for the compiled extension).

Conventions shared by both backends
-----------------------------------
``ue`` holds element nodal values, shape ``(E, nb)``.  ``N``, ``Dxi`` and
``Deta`` are the reference basis values and reference derivatives at the
quadrature points, shape ``(Q, nb)``, on ``[-1, 1]^2``; ``wq`` are the
reference weights.  Elements are axis-aligned rectangles of size
``hx[e] x hy[e]``.

The integrand is the generic scalar diffusion-advection-reaction residual::

    D(u) grad(u) . grad(v) + (-b . grad(u) + c u - f) v

where ``D`` is either the nonlinear permeability with per-element
``(mu1, mu2)`` or the prescribed per-quadrature-point array ``diff``.
"""


def kappa(u, mu1, mu2):
    om = 1.0 - u
    c = 12.0 / mu2
    num = u * om
    den = u**3 + c * om**3
    q = num / den
    dnum = 1.0 - 2.0 * u
    dden = 3.0 * u**2 - 3.0 * c * om**2
    dq = (dnum * den - num * dden) / den**2
    return 36.0 / mu2 * q**2 + mu1, 72.0 / mu2 * q * dq


def _outer(A, B):
    # (Q, nb) x (Q, nb) -> (Q, nb*nb), entry [q, a*nb + b] = A[q, a] B[q, b]
    Q, nb = A.shape
    return (A[:, :, None] * B[:, None, :]).reshape(Q, nb * nb)


def element_kernel(ue, N, Dxi, Deta, wq, hx, hy, nonlinear, mu1, mu2,
                   diff, bx, by, react, src, want_jac):
    E, nb = ue.shape
    sx = (2.0 / hx)[:, None]
    sy = (2.0 / hy)[:, None]
    W = wq[None, :] * (0.25 * hx * hy)[:, None]

    u = ue @ N.T
    ux = (ue @ Dxi.T) * sx
    uy = (ue @ Deta.T) * sy
    if nonlinear:
        D, dD = kappa(u, mu1[:, None], mu2[:, None])
    else:
        D, dD = diff, None

    lower = -bx * ux - by * uy + react * u - src
    r = ((W * D * ux) * sx) @ Dxi + ((W * D * uy) * sy) @ Deta + (W * lower) @ N
    if not want_jac:
        return r, None

    WD = W * D
    J = (WD * sx**2) @ _outer(Dxi, Dxi) + (WD * sy**2) @ _outer(Deta, Deta)
    if dD is not None:
        WdD = W * dD
        J += (WdD * ux * sx) @ _outer(Dxi, N) + (WdD * uy * sy) @ _outer(Deta, N)
    J += (-W * bx * sx) @ _outer(N, Dxi) + (-W * by * sy) @ _outer(N, Deta)
    J += (W * react) @ _outer(N, N)
    return r, J.reshape(E, nb, nb)
