"""Hot inner loops: intervened causal attention and Gram coordinate descent.

Each kernel has a numba implementation and a pure-numpy one with the same
signature. ``attend`` and ``cd_gram`` dispatch on
``headflow._accel.USE_NUMBA``; the suffixed variants stay importable so the
benchmark and the cross-path tests can call both.

Both paths fix their summation order, so a given path is bit-reproducible and
independent of how many sequences or masks are evaluated around it.
"""
import math

import numpy as np

from headflow import _accel
from headflow._accel import njit

# --------------------------------------------------------------------------
# attention
#
# Queries attend to a fully visible prefix (the image rows, subject to
# substitution) followed by their own block under a causal mask. Image-side
# attention is the same call with an empty prefix.


def attend_numpy(q, k_pre, v_pre, k_base, v_base, replace, k_self, v_self):
    B, H, Q, dk = q.shape
    Pp = k_pre.shape[1]
    scale = np.float32(1.0 / math.sqrt(dk))

    sel = replace[..., None]
    k_eff = np.where(sel, k_base[None, :, None, :, :], k_pre[None, :, None, :, :])
    v_eff = np.where(sel, v_base[None, :, None, :, :], v_pre[None, :, None, :, :])
    s_pre = (q[:, :, :, None, :] * k_eff).sum(axis=-1) * scale
    s_self = (q[:, :, :, None, :] * k_self[:, :, None, :, :]).sum(axis=-1) * scale
    s_self[:, :, np.triu(np.ones((Q, Q), dtype=bool), k=1)] = -np.inf
    scores = np.concatenate([s_pre, s_self], axis=-1)
    scores -= scores.max(axis=-1, keepdims=True)
    attn = np.exp(scores)
    attn /= attn.sum(axis=-1, keepdims=True)
    z = (attn[..., :Pp, None] * v_eff).sum(axis=-2) + (
        attn[..., Pp:, None] * v_self[:, :, None, :, :]
    ).sum(axis=-2)
    return attn.astype(np.float32), z.astype(np.float32)


@njit
def _attend_nb(q, k_pre, v_pre, k_base, v_base, replace, k_self, v_self):
    B, H, Q, dk = q.shape
    Pp = k_pre.shape[1]
    scale = 1.0 / math.sqrt(dk)
    attn = np.zeros((B, H, Q, Pp + Q), dtype=np.float32)
    z = np.zeros((B, H, Q, dk), dtype=np.float32)
    row = np.empty(Pp + Q, dtype=np.float64)
    for b in range(B):
        for h in range(H):
            for i in range(Q):
                n = Pp + i + 1
                m = -np.inf
                for j in range(n):
                    acc = 0.0
                    if j < Pp:
                        if replace[b, h, i, j]:
                            for d in range(dk):
                                acc += np.float64(q[b, h, i, d]) * np.float64(k_base[h, j, d])
                        else:
                            for d in range(dk):
                                acc += np.float64(q[b, h, i, d]) * np.float64(k_pre[h, j, d])
                    else:
                        for d in range(dk):
                            acc += np.float64(q[b, h, i, d]) * np.float64(k_self[b, h, j - Pp, d])
                    acc *= scale
                    row[j] = acc
                    if acc > m:
                        m = acc
                total = 0.0
                for j in range(n):
                    row[j] = math.exp(row[j] - m)
                    total += row[j]
                for j in range(n):
                    row[j] /= total
                    attn[b, h, i, j] = row[j]
                for d in range(dk):
                    acc = 0.0
                    for j in range(n):
                        if j < Pp:
                            if replace[b, h, i, j]:
                                acc += row[j] * np.float64(v_base[h, j, d])
                            else:
                                acc += row[j] * np.float64(v_pre[h, j, d])
                        else:
                            acc += row[j] * np.float64(v_self[b, h, j - Pp, d])
                    z[b, h, i, d] = acc
    return attn, z


def attend_numba(q, k_pre, v_pre, k_base, v_base, replace, k_self, v_self):
    return _attend_nb(q, k_pre, v_pre, k_base, v_base, replace, k_self, v_self)


def attend(q, k_pre, v_pre, k_base, v_base, replace, k_self, v_self):
    """Attention of a query block over a visible prefix plus its own causal block.

    Batched over B independent runs that share the prefix. q, k_self,
    v_self: (B, H, Q, d_head) float32. k_pre, v_pre, k_base, v_base:
    (H, Pp, d_head). replace: (B, H, Q, Pp) bool; where True the query sees
    the baseline prefix row instead of the original. Returns ``(attn, z)``
    with attn (B, H, Q, Pp + Q) and z (B, H, Q, d_head). Every batch element
    is computed exactly as it would be alone.
    """
    if _accel.USE_NUMBA:
        return _attend_nb(q, k_pre, v_pre, k_base, v_base, replace, k_self, v_self)
    return attend_numpy(q, k_pre, v_pre, k_base, v_base, replace, k_self, v_self)


# --------------------------------------------------------------------------
# elastic net


def _soft(x, t):
    if x > t:
        return x - t
    if x < -t:
        return x + t
    return 0.0


def cd_gram_numpy(gram, cov, yy, alpha, l1_ratio, max_iter, tol):
    n = gram.shape[0]
    theta = np.zeros(n)
    history = np.full(max_iter, np.nan)
    a1 = alpha * l1_ratio
    a2 = alpha * (1.0 - l1_ratio)
    converged = False
    it = 0
    for it in range(max_iter):
        max_upd = 0.0
        for j in range(n):
            old = theta[j]
            denom = gram[j, j] + a2
            if denom <= 0.0:
                new = 0.0
            else:
                rho = cov[j] - float(gram[j] @ theta) + gram[j, j] * old
                new = _soft(rho, a1) / denom
            theta[j] = new
            max_upd = max(max_upd, abs(new - old))
        history[it] = (
            0.5 * (yy - 2.0 * float(cov @ theta) + float(theta @ gram @ theta))
            + a1 * float(np.abs(theta).sum())
            + 0.5 * a2 * float(theta @ theta)
        )
        if max_upd < tol:
            converged = True
            break
    return theta, it + 1, converged, history[: it + 1]


@njit
def _cd_gram_nb(gram, cov, yy, alpha, l1_ratio, max_iter, tol):
    n = gram.shape[0]
    theta = np.zeros(n)
    history = np.full(max_iter, np.nan)
    a1 = alpha * l1_ratio
    a2 = alpha * (1.0 - l1_ratio)
    converged = False
    it = 0
    for it in range(max_iter):
        max_upd = 0.0
        for j in range(n):
            old = theta[j]
            denom = gram[j, j] + a2
            if denom <= 0.0:
                new = 0.0
            else:
                rho = cov[j]
                for kk in range(n):
                    if kk != j:
                        rho -= gram[j, kk] * theta[kk]
                if rho > a1:
                    new = (rho - a1) / denom
                elif rho < -a1:
                    new = (rho + a1) / denom
                else:
                    new = 0.0
            theta[j] = new
            d = abs(new - old)
            if d > max_upd:
                max_upd = d
        quad = 0.0
        lin = 0.0
        l1 = 0.0
        l2 = 0.0
        for a in range(n):
            lin += cov[a] * theta[a]
            l1 += abs(theta[a])
            l2 += theta[a] * theta[a]
            for b in range(n):
                quad += theta[a] * gram[a, b] * theta[b]
        history[it] = 0.5 * (yy - 2.0 * lin + quad) + a1 * l1 + 0.5 * a2 * l2
        if max_upd < tol:
            converged = True
            break
    return theta, it + 1, converged, history[: it + 1]


def cd_gram_numba(gram, cov, yy, alpha, l1_ratio, max_iter, tol):
    return _cd_gram_nb(gram, cov, yy, float(alpha), float(l1_ratio), int(max_iter), float(tol))


def cd_gram(gram, cov, yy, alpha, l1_ratio, max_iter, tol):
    """Cyclic coordinate descent on the Gram form of the elastic-net objective.

    ``gram = Xc.T @ Xc / M``, ``cov = Xc.T @ yc / M``, ``yy = yc @ yc / M`` for
    centered data. Returns ``(theta, n_iter, converged, objective_per_sweep)``.
    """
    if _accel.USE_NUMBA:
        return cd_gram_numba(gram, cov, yy, alpha, l1_ratio, max_iter, tol)
    return cd_gram_numpy(gram, cov, yy, alpha, l1_ratio, max_iter, tol)
