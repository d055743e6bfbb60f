"""Compiled element loops behind the matrix-free operators.

Each kernel handles the element range ``[e0, e1)`` and scatters into a
caller-owned output vector, so chunks can run on separate threads (the
kernels release the GIL).  Coefficient arrays arrive premultiplied by the
quadrature weights and gradients in the element-major ``(nE, nq, nb, 2)``
layout.
"""
from __future__ import annotations

import numpy as np
from numba import njit

_opts = dict(cache=True, nogil=True, fastmath=False)


@njit(**_opts)
def viscous_apply(x, dofs, grad, ew, e0, e1, out):
    nb = dofs.shape[0]
    nq = ew.shape[1]
    ux = np.empty(nb)
    uy = np.empty(nb)
    rx = np.empty(nb)
    ry = np.empty(nb)
    for e in range(e0, e1):
        for i in range(nb):
            d = dofs[i, e]
            ux[i] = x[2 * d]
            uy[i] = x[2 * d + 1]
            rx[i] = 0.0
            ry[i] = 0.0
        for q in range(nq):
            gxx = 0.0
            gxy = 0.0
            gyx = 0.0
            gyy = 0.0
            for i in range(nb):
                a = grad[e, q, i, 0]
                b = grad[e, q, i, 1]
                gxx += a * ux[i]
                gxy += b * ux[i]
                gyx += a * uy[i]
                gyy += b * uy[i]
            w = ew[e, q]
            sxx = w * (gxx - gyy)
            sxy = w * (gxy + gyx)
            for i in range(nb):
                a = grad[e, q, i, 0]
                b = grad[e, q, i, 1]
                rx[i] += a * sxx + b * sxy
                ry[i] += a * sxy - b * sxx
        for i in range(nb):
            d = dofs[i, e]
            out[2 * d] += rx[i]
            out[2 * d + 1] += ry[i]


@njit(**_opts)
def scalar_apply(x, dofs, phi, grad, mw, sw, bw, has_m, has_s, has_b, e0, e1, out):
    """``∫ m T w + s ∇T·∇w + (b·∇T) w`` with weighted coefficients."""
    nb = dofs.shape[0]
    nq = phi.shape[0]
    xl = np.empty(nb)
    r = np.empty(nb)
    need_grad = has_s or has_b
    for e in range(e0, e1):
        for i in range(nb):
            xl[i] = x[dofs[i, e]]
            r[i] = 0.0
        for q in range(nq):
            val = 0.0
            g0 = 0.0
            g1 = 0.0
            if has_m:
                t = 0.0
                for i in range(nb):
                    t += phi[q, i] * xl[i]
                val = mw[e, q] * t
            if need_grad:
                for i in range(nb):
                    g0 += grad[e, q, i, 0] * xl[i]
                    g1 += grad[e, q, i, 1] * xl[i]
            if has_b:
                val += bw[0, e, q] * g0 + bw[1, e, q] * g1
            if has_s:
                h0 = sw[e, q] * g0
                h1 = sw[e, q] * g1
                for i in range(nb):
                    r[i] += val * phi[q, i] + grad[e, q, i, 0] * h0 + grad[e, q, i, 1] * h1
            else:
                for i in range(nb):
                    r[i] += val * phi[q, i]
        for i in range(nb):
            out[dofs[i, e]] += r[i]


@njit(**_opts)
def coupling_apply(x, vdofs, pdofs, phi2, psi, grad, dw, bw, has_div, has_b, e0, e1, out):
    """``-∫ (d div u + β·u) q`` with ``dw = d w`` and ``bw = β w``."""
    nq = phi2.shape[0]
    ux = np.empty(6)
    uy = np.empty(6)
    r = np.empty(3)
    for e in range(e0, e1):
        for i in range(6):
            d = vdofs[i, e]
            ux[i] = x[2 * d]
            uy[i] = x[2 * d + 1]
        for k in range(3):
            r[k] = 0.0
        for q in range(nq):
            dv = 0.0
            if has_div:
                div = 0.0
                for i in range(6):
                    div += grad[e, q, i, 0] * ux[i] + grad[e, q, i, 1] * uy[i]
                dv = dw[e, q] * div
            if has_b:
                vx = 0.0
                vy = 0.0
                for i in range(6):
                    vx += phi2[q, i] * ux[i]
                    vy += phi2[q, i] * uy[i]
                dv += bw[0, e, q] * vx + bw[1, e, q] * vy
            for k in range(3):
                r[k] -= dv * psi[q, k]
        for k in range(3):
            out[pdofs[k, e]] += r[k]


@njit(**_opts)
def coupling_transpose(p, vdofs, pdofs, phi2, psi, grad, dw, bw, has_div, has_b, e0, e1, out):
    nq = phi2.shape[0]
    pl = np.empty(3)
    rx = np.empty(6)
    ry = np.empty(6)
    for e in range(e0, e1):
        for k in range(3):
            pl[k] = p[pdofs[k, e]]
        for i in range(6):
            rx[i] = 0.0
            ry[i] = 0.0
        for q in range(nq):
            h = 0.0
            for k in range(3):
                h -= psi[q, k] * pl[k]
            if has_div:
                hd = dw[e, q] * h
                for i in range(6):
                    rx[i] += grad[e, q, i, 0] * hd
                    ry[i] += grad[e, q, i, 1] * hd
            if has_b:
                h0 = bw[0, e, q] * h
                h1 = bw[1, e, q] * h
                for i in range(6):
                    rx[i] += phi2[q, i] * h0
                    ry[i] += phi2[q, i] * h1
        for i in range(6):
            d = vdofs[i, e]
            out[2 * d] += rx[i]
            out[2 * d + 1] += ry[i]


@njit(**_opts)
def vector_mass_apply(x, dofs, phi, mw, e0, e1, out):
    nb = dofs.shape[0]
    nq = phi.shape[0]
    ux = np.empty(nb)
    uy = np.empty(nb)
    rx = np.empty(nb)
    ry = np.empty(nb)
    for e in range(e0, e1):
        for i in range(nb):
            d = dofs[i, e]
            ux[i] = x[2 * d]
            uy[i] = x[2 * d + 1]
            rx[i] = 0.0
            ry[i] = 0.0
        for q in range(nq):
            vx = 0.0
            vy = 0.0
            for i in range(nb):
                vx += phi[q, i] * ux[i]
                vy += phi[q, i] * uy[i]
            vx *= mw[e, q]
            vy *= mw[e, q]
            for i in range(nb):
                rx[i] += phi[q, i] * vx
                ry[i] += phi[q, i] * vy
        for i in range(nb):
            d = dofs[i, e]
            out[2 * d] += rx[i]
            out[2 * d + 1] += ry[i]
