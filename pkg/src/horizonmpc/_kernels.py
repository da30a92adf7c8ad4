"""Compiled RK4 rollouts and discrete adjoint gradients.

Every kernel takes the model triple ``(f, fx, fu)`` as first-class numba
functions together with a flat parameter vector ``p``. The running cost is
the weighted quadratic

    l(x, u) = sum_i qx_i (x_i - xr_i)^2 + lam * |u - ur|^2

plus, inside the optimizer only, a quadratic penalty on state-box violations
with weight ``wpen``. The cost integral is accumulated with the same RK4
stages as the state, which is exactly RK4 on the state augmented by
``z' = l(x, u)``.
"""

import numpy as np
from numba import njit


@njit(cache=True)
def stage_cost(x, u, xr, qx, ur, lam):
    s = 0.0
    for i in range(x.shape[0]):
        d = x[i] - xr[i]
        s += qx[i] * d * d
    for j in range(u.shape[0]):
        e = u[j] - ur[j]
        s += lam * e * e
    return s


@njit(cache=True)
def box_penalty(x, lb, ub, wpen):
    s = 0.0
    for i in range(x.shape[0]):
        if x[i] > ub[i]:
            d = x[i] - ub[i]
            s += d * d
        elif x[i] < lb[i]:
            d = lb[i] - x[i]
            s += d * d
    return wpen * s


@njit(cache=True)
def _cost_grad_x(x, xr, qx, lb, ub, wpen):
    g = np.empty(x.shape[0])
    for i in range(x.shape[0]):
        gi = 2.0 * qx[i] * (x[i] - xr[i])
        if x[i] > ub[i]:
            gi += 2.0 * wpen * (x[i] - ub[i])
        elif x[i] < lb[i]:
            gi -= 2.0 * wpen * (lb[i] - x[i])
        g[i] = gi
    return g


@njit(cache=True)
def _tmv(A, v):
    out = np.zeros(A.shape[1])
    for i in range(A.shape[0]):
        for j in range(A.shape[1]):
            out[j] += A[i, j] * v[i]
    return out


@njit(nogil=True)
def rollout(f, p, x0, U, h, spp, xr, qx, ur, lam):
    """Integrate with nodes at every RK4 step.

    Returns ``(states, cost, fail)`` where ``fail`` is the index of the first
    step producing a non-finite state, or -1.
    """
    N = U.shape[0]
    n = x0.shape[0]
    K = N * spp
    X = np.empty((K + 1, n))
    C = np.empty(K + 1)
    X[0] = x0
    C[0] = 0.0
    x = x0.copy()
    c = 0.0
    h2 = 0.5 * h
    w = h / 6.0
    k = 0
    for piece in range(N):
        u = U[piece]
        for _ in range(spp):
            k1 = f(x, u, p)
            y2 = x + h2 * k1
            k2 = f(y2, u, p)
            y3 = x + h2 * k2
            k3 = f(y3, u, p)
            y4 = x + h * k3
            k4 = f(y4, u, p)
            c += w * (
                stage_cost(x, u, xr, qx, ur, lam)
                + 2.0 * stage_cost(y2, u, xr, qx, ur, lam)
                + 2.0 * stage_cost(y3, u, xr, qx, ur, lam)
                + stage_cost(y4, u, xr, qx, ur, lam)
            )
            x = x + w * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
            k += 1
            X[k] = x
            C[k] = c
            if not (np.all(np.isfinite(x)) and np.isfinite(c)):
                return X[: k + 1], C[: k + 1], k
    return X, C, -1


@njit(nogil=True)
def cost_only(f, p, x0, U, h, spp, xr, qx, ur, lam, lb, ub, wpen):
    """Return ``(penalized cost, running cost, final state)``; inf on blow-up."""
    N = U.shape[0]
    x = x0.copy()
    c = 0.0
    pen = 0.0
    h2 = 0.5 * h
    w = h / 6.0
    for piece in range(N):
        u = U[piece]
        for _ in range(spp):
            k1 = f(x, u, p)
            y2 = x + h2 * k1
            k2 = f(y2, u, p)
            y3 = x + h2 * k2
            k3 = f(y3, u, p)
            y4 = x + h * k3
            k4 = f(y4, u, p)
            c += w * (
                stage_cost(x, u, xr, qx, ur, lam)
                + 2.0 * stage_cost(y2, u, xr, qx, ur, lam)
                + 2.0 * stage_cost(y3, u, xr, qx, ur, lam)
                + stage_cost(y4, u, xr, qx, ur, lam)
            )
            if wpen > 0.0:
                pen += w * (
                    box_penalty(x, lb, ub, wpen)
                    + 2.0 * box_penalty(y2, lb, ub, wpen)
                    + 2.0 * box_penalty(y3, lb, ub, wpen)
                    + box_penalty(y4, lb, ub, wpen)
                )
            x = x + w * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
            if not np.all(np.isfinite(x)):
                return np.inf, np.inf, x
    return c + pen, c, x


@njit(nogil=True)
def cost_and_grad(f, fx, fu, p, x0, U, h, spp, xr, qx, ur, lam, lb, ub, wpen):
    """Penalized cost and its exact gradient w.r.t. the ZOH values.

    Reverse-mode differentiation of the discrete RK4 map, so the gradient is
    that of the computed cost, not of the continuous-time functional.
    """
    N, m = U.shape
    n = x0.shape[0]
    K = N * spp
    X = np.empty((K + 1, n))
    X[0] = x0
    x = x0.copy()
    J = 0.0
    h2 = 0.5 * h
    w = h / 6.0
    k = 0
    G = np.zeros((N, m))
    for piece in range(N):
        u = U[piece]
        for _ in range(spp):
            k1 = f(x, u, p)
            y2 = x + h2 * k1
            k2 = f(y2, u, p)
            y3 = x + h2 * k2
            k3 = f(y3, u, p)
            y4 = x + h * k3
            k4 = f(y4, u, p)
            J += w * (
                stage_cost(x, u, xr, qx, ur, lam)
                + box_penalty(x, lb, ub, wpen)
                + 2.0 * (stage_cost(y2, u, xr, qx, ur, lam) + box_penalty(y2, lb, ub, wpen))
                + 2.0 * (stage_cost(y3, u, xr, qx, ur, lam) + box_penalty(y3, lb, ub, wpen))
                + stage_cost(y4, u, xr, qx, ur, lam)
                + box_penalty(y4, lb, ub, wpen)
            )
            x = x + w * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
            k += 1
            X[k] = x
            if not np.all(np.isfinite(x)):
                return np.inf, G
    if not np.isfinite(J):
        return np.inf, G

    adj = np.zeros(n)
    for k in range(K - 1, -1, -1):
        piece = k // spp
        u = U[piece]
        x = X[k]
        k1 = f(x, u, p)
        y2 = x + h2 * k1
        k2 = f(y2, u, p)
        y3 = x + h2 * k2
        k3 = f(y3, u, p)
        y4 = x + h * k3

        gu = 2.0 * lam * (u - ur)
        ubar = np.zeros(m)

        kb4 = w * adj
        yb4 = _tmv(fx(y4, u, p), kb4) + w * _cost_grad_x(y4, xr, qx, lb, ub, wpen)
        ubar += _tmv(fu(y4, u, p), kb4) + w * gu

        kb3 = 2.0 * w * adj + h * yb4
        yb3 = _tmv(fx(y3, u, p), kb3) + 2.0 * w * _cost_grad_x(y3, xr, qx, lb, ub, wpen)
        ubar += _tmv(fu(y3, u, p), kb3) + 2.0 * w * gu

        kb2 = 2.0 * w * adj + h2 * yb3
        yb2 = _tmv(fx(y2, u, p), kb2) + 2.0 * w * _cost_grad_x(y2, xr, qx, lb, ub, wpen)
        ubar += _tmv(fu(y2, u, p), kb2) + 2.0 * w * gu

        kb1 = w * adj + h2 * yb2
        yb1 = _tmv(fx(x, u, p), kb1) + w * _cost_grad_x(x, xr, qx, lb, ub, wpen)
        ubar += _tmv(fu(x, u, p), kb1) + w * gu

        adj = adj + yb1 + yb2 + yb3 + yb4
        G[piece] += ubar
    return J, G


# --- built-in model kernels -------------------------------------------------
# generator: p = (b1, b2, b3, b4, P, E)


@njit(cache=True)
def generator_f(x, u, p):
    d = np.empty(3)
    d[0] = x[1]
    d[1] = -p[0] * x[2] * np.sin(x[0]) - p[1] * x[1] + p[4]
    d[2] = p[2] * np.cos(x[0]) - p[3] * x[2] + p[5] + u[0]
    return d


@njit(cache=True)
def generator_fx(x, u, p):
    J = np.zeros((3, 3))
    J[0, 1] = 1.0
    J[1, 0] = -p[0] * x[2] * np.cos(x[0])
    J[1, 1] = -p[1]
    J[1, 2] = -p[0] * np.sin(x[0])
    J[2, 0] = -p[2] * np.sin(x[0])
    J[2, 2] = -p[3]
    return J


@njit(cache=True)
def generator_fu(x, u, p):
    J = np.zeros((3, 1))
    J[2, 0] = 1.0
    return J


# linear affine: x' = A x + B u + c, p = (n, m, A.ravel(), B.ravel(), c)


@njit(cache=True)
def linear_f(x, u, p):
    n = x.shape[0]
    m = u.shape[0]
    d = p[2 + n * n + n * m : 2 + n * n + n * m + n].copy()
    for i in range(n):
        for j in range(n):
            d[i] += p[2 + i * n + j] * x[j]
        for j in range(m):
            d[i] += p[2 + n * n + i * m + j] * u[j]
    return d


@njit(cache=True)
def linear_fx(x, u, p):
    n = x.shape[0]
    return p[2 : 2 + n * n].reshape((n, n)).copy()


@njit(cache=True)
def linear_fu(x, u, p):
    n = x.shape[0]
    m = u.shape[0]
    return p[2 + n * n : 2 + n * n + n * m].reshape((n, m)).copy()
