"""Constraint blocks that turn a compiled :class:`Network` into an NLP.

Every block maps the full state vector to a few constraint values and
supplies the Hessian of ``y . c(x)`` so the NLP gets exact second
derivatives.  Blocks are either equalities ``c(x) = 0`` or inequalities
``c(x) >= 0``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .nlp import NlpProblem
from .powerflow import Network


@dataclass
class Block:
    labels: list[str]
    fun: Callable[[np.ndarray], tuple[np.ndarray, np.ndarray]]
    hess: Callable[[np.ndarray, np.ndarray], np.ndarray] | None = None  # None: linear

    def __len__(self) -> int:
        return len(self.labels)


def linear_block(A: np.ndarray, b: np.ndarray, labels: Sequence[str]) -> Block:
    """``c(x) = A x + b``."""
    A = np.atleast_2d(np.asarray(A, dtype=float))
    b = np.asarray(b, dtype=float).reshape(-1)
    return Block(list(labels), lambda x: (A @ x + b, A))


def fix_block(size: int, idx: Sequence[int], values: Sequence[float], labels) -> Block:
    idx = np.asarray(idx, dtype=int)
    A = np.zeros((len(idx), size))
    A[np.arange(len(idx)), idx] = 1.0
    return linear_block(A, -np.asarray(values, dtype=float), labels)


def balance_block(net: Network) -> Block:
    labels = [f"P[{b.id}]" for b in net.case.buses] + [f"Q[{b.id}]" for b in net.case.buses]
    labels.append("angle-ref")
    return Block(labels, lambda x: (net.residual(x), net.jacobian(x)), net.hessian)


def vsq_block(net: Network, buses: Sequence[int], sign: float, const: Sequence[float], labels) -> Block:
    """``c_k = sign * (e_b^2 + f_b^2) + const_k`` for the listed bus indices."""
    L = net.layout
    buses = np.asarray(buses, dtype=int)
    const = np.asarray(const, dtype=float)
    eb, fb = L.e.start + buses, L.f.start + buses
    rows = np.arange(len(buses))

    def fun(x):
        e, f = x[eb], x[fb]
        J = np.zeros((len(buses), L.size))
        J[rows, eb] = 2 * sign * e
        J[rows, fb] = 2 * sign * f
        return sign * (e * e + f * f) + const, J

    def hess(x, y):
        H = np.zeros((L.size, L.size))
        np.add.at(H, (eb, eb), 2 * sign * y)
        np.add.at(H, (fb, fb), 2 * sign * y)
        return H

    return Block(list(labels), fun, hess)


def circle_block(net: Network, bus: int, k: float, u: np.ndarray, u0: float,
                 v: np.ndarray, v0: float, label: str) -> Block:
    """``k (e_b^2 + f_b^2) - (u.x + u0)^2 - (v.x + v0)^2 >= 0``.

    Used for converter and stator current limits, with ``u.x + u0`` the
    active and ``v.x + v0`` the reactive output.
    """
    L = net.layout
    ie, jf = L.e.start + bus, L.f.start + bus

    def fun(x):
        p = u @ x + u0
        q = v @ x + v0
        c = k * (x[ie] ** 2 + x[jf] ** 2) - p * p - q * q
        J = -2 * p * u - 2 * q * v
        J[ie] += 2 * k * x[ie]
        J[jf] += 2 * k * x[jf]
        return np.array([c]), J[None, :]

    def hess(x, y):
        H = -2 * y[0] * (np.outer(u, u) + np.outer(v, v))
        H[ie, ie] += 2 * k * y[0]
        H[jf, jf] += 2 * k * y[0]
        return H

    return Block([label], fun, hess)


def field_block(net: Network, k: int, K: float, label: str) -> Block:
    """Linearised field limit ``q_r(P_g, V_g; K) - Q_g >= 0`` of generator ``k`` in pu.

    With ``s = V^2`` and ``p`` in MW, ``q_r = q_m(s) (1 - p/P_N) + r(s) p/P_N``
    where ``q_m = a sqrt(s) - c s`` and ``r = sqrt(I_N^2 s - P_N^2)``.
    """
    L = net.layout
    caps = net.g_caps[k]
    base = net.base
    b = int(net.g_bus[k])
    ie, jf = L.e.start + b, L.f.start + b
    iq = L.q_gen.start + k
    x_ds = caps.X_l + K * caps.X_ad
    a = caps.S_N * K * caps.E_lim / x_ds
    c = caps.S_N / x_ds
    I2 = caps.I_N**2
    PN = caps.P_N
    # P_g in MW as an affine function of the state
    gp = np.zeros(L.size)
    gp[L.dL] = net.g_w[k] * base
    gp[L.lam] = net.g_w[k] * net.sum_dp * base
    gp0 = net.g_p0[k] * base

    def parts(x):
        s = x[ie] ** 2 + x[jf] ** 2
        p = gp @ x + gp0
        # floored so trial points below V = P_N / I_N stay finite
        rs = np.sqrt(max(I2 * s - PN**2, 1e-9 * I2))
        qm = a * np.sqrt(s) - c * s
        qm_s = a / (2 * np.sqrt(s)) - c
        qm_ss = -a / (4 * s**1.5)
        r_s = I2 / (2 * rs)
        r_ss = -I2 * I2 / (4 * rs**3)
        t = p / PN
        phi = qm * (1 - t) + rs * t
        phi_s = qm_s * (1 - t) + r_s * t
        phi_p = (rs - qm) / PN
        phi_ss = qm_ss * (1 - t) + r_ss * t
        phi_sp = (r_s - qm_s) / PN
        return phi, phi_s, phi_p, phi_ss, phi_sp

    def ds(x):
        g = np.zeros(L.size)
        g[ie] = 2 * x[ie]
        g[jf] = 2 * x[jf]
        return g

    def fun(x):
        phi, phi_s, phi_p, _, _ = parts(x)
        J = (phi_s * ds(x) + phi_p * gp) / base
        J[iq] -= 1.0
        return np.array([phi / base - x[iq]]), J[None, :]

    def hess(x, y):
        _, phi_s, _, phi_ss, phi_sp = parts(x)
        g = ds(x)
        H = phi_ss * np.outer(g, g) + phi_sp * (np.outer(g, gp) + np.outer(gp, g))
        H[ie, ie] += 2 * phi_s
        H[jf, jf] += 2 * phi_s
        return H * (y[0] / base)

    return Block([label], fun, hess)


@dataclass
class OpfModel:
    """A network plus constraint blocks, bounds and an objective."""

    net: Network
    eq: list[Block] = field(default_factory=list)
    ineq: list[Block] = field(default_factory=list)
    lb: np.ndarray | None = None
    ub: np.ndarray | None = None

    def __post_init__(self):
        size = self.net.layout.size
        if self.lb is None:
            self.lb = np.full(size, -np.inf)
        if self.ub is None:
            self.ub = np.full(size, np.inf)

    @staticmethod
    def _stack(blocks: list[Block], x: np.ndarray, size: int):
        if not blocks:
            return np.zeros(0), np.zeros((0, size))
        vals, jacs = zip(*(b.fun(x) for b in blocks))
        return np.concatenate(vals), np.vstack(jacs)

    @staticmethod
    def _hess(blocks: list[Block], x: np.ndarray, y: np.ndarray, H: np.ndarray) -> None:
        o = 0
        for b in blocks:
            m = len(b)
            if b.hess is not None and np.any(y[o : o + m]):
                H += b.hess(x, y[o : o + m])
            o += m

    def problem(self, objective, objective_hess=None) -> NlpProblem:
        """NLP with ``objective(x) -> (f, grad)`` and optional ``objective_hess(x)``."""
        size = self.net.layout.size
        eq, ineq = list(self.eq), list(self.ineq)

        def hessian(x, sigma, y_eq, y_in):
            H = np.zeros((size, size))
            if objective_hess is not None and sigma:
                H += sigma * objective_hess(x)
            self._hess(eq, x, y_eq, H)
            self._hess(ineq, x, y_in, H)
            return H

        return NlpProblem(
            n=size,
            objective=objective,
            hessian=hessian,
            eq=(lambda x: self._stack(eq, x, size)) if eq else None,
            ineq=(lambda x: self._stack(ineq, x, size)) if ineq else None,
            lb=self.lb,
            ub=self.ub,
            eq_labels=[lab for b in eq for lab in b.labels],
            ineq_labels=[lab for b in ineq for lab in b.labels],
        )


def linear_objective(c: np.ndarray):
    c = np.asarray(c, dtype=float)
    return (lambda x: (float(c @ x), c)), None
