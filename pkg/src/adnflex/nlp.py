"""Dense primal-dual interior-point solver for small smooth NLPs.

Solves

    min f(x)  s.t.  c_E(x) = 0,  c_I(x) >= 0,  lb <= x <= ub

with exact first and second derivatives supplied by the caller.  The
iteration follows the classical primal-dual barrier scheme (Newton steps on
the perturbed KKT conditions with fraction-to-boundary step lengths).  Once
the barrier parameter is small the active set is guessed from the
multipliers and the equality-constrained KKT system is solved by Newton's
method, which drives complementarity to round-off.

Multiplier convention: ``L = f - y_E.c_E - y_I.c_I - z_lb.(x-lb) - z_ub.(ub-x)``
with ``y_I, z_lb, z_ub >= 0``.
"""

from __future__ import annotations

import logging
import os
from dataclasses import dataclass, field, fields, replace
from typing import Callable, Sequence

import numpy as np
import scipy.linalg

log = logging.getLogger(__name__)

Fun = Callable[[np.ndarray], tuple]


@dataclass
class NlpProblem:
    """Callbacks return ``(value, derivative)`` pairs.

    ``hessian(x, sigma, y_eq, y_in)`` returns the Hessian of
    ``sigma*f + y_eq.c_E + y_in.c_I``.
    """

    n: int
    objective: Fun
    hessian: Callable[[np.ndarray, float, np.ndarray, np.ndarray], np.ndarray]
    eq: Fun | None = None
    ineq: Fun | None = None
    lb: np.ndarray | None = None
    ub: np.ndarray | None = None
    eq_labels: Sequence[str] | None = None
    ineq_labels: Sequence[str] | None = None


@dataclass
class NlpOptions:
    stationarity_tol: float = 1e-6
    feasibility_tol: float = 1e-8
    complementarity_tol: float = 1e-8
    max_iter: int = 200
    sigma: float = 0.1
    xi: float = 0.99995
    z0: float = 1.0
    active_tol: float = 1e-7
    line_search: bool = True
    ls_halvings: int = 4
    gamma_decay: float = 0.05

    @classmethod
    def from_env(cls, var: str = "ADNFLEX_NLP_TOL") -> "NlpOptions":
        """Defaults overridden by an environment variable.

        The value is either a bare number, which sets ``stationarity_tol``,
        or a comma list such as ``stationarity_tol=1e-7,max_iter=400``.
        """
        raw = os.environ.get(var, "").strip()
        opts = cls()
        if not raw:
            return opts
        types = {f.name: f.type for f in fields(cls)}
        changes = {}
        try:
            if "=" not in raw:
                changes["stationarity_tol"] = float(raw)
            else:
                for item in raw.split(","):
                    key, val = (t.strip() for t in item.split("=", 1))
                    if key not in types:
                        raise ValueError(f"unknown option {key!r}")
                    kind = types[key]
                    if kind in ("bool", bool):
                        changes[key] = val.lower() in ("1", "true", "yes")
                    elif kind in ("int", int):
                        changes[key] = int(val)
                    else:
                        changes[key] = float(val)
        except ValueError as exc:
            raise ValueError(f"bad {var} value {raw!r}: {exc}") from exc
        return replace(opts, **changes)


@dataclass
class NlpSolution:
    x: np.ndarray
    f: float
    status: str  # optimal | infeasible | max-iter | numerical-failure
    y_eq: np.ndarray
    y_in: np.ndarray
    z_lb: np.ndarray
    z_ub: np.ndarray
    active_set: list[int]
    iterations: int
    kkt: dict = field(default_factory=dict)
    diagnostic: str = ""
    active_labels: list[str] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return self.status == "optimal"


class _Expanded:
    """All inequalities (general and bounds) as ``h(x) <= 0`` for the IPM."""

    def __init__(self, prob: NlpProblem):
        self.p = prob
        n = prob.n
        lb = np.full(n, -np.inf) if prob.lb is None else np.asarray(prob.lb, float)
        ub = np.full(n, np.inf) if prob.ub is None else np.asarray(prob.ub, float)
        self.ilb = np.flatnonzero(np.isfinite(lb))
        self.iub = np.flatnonzero(np.isfinite(ub))
        self.lb, self.ub = lb, ub

    def eval(self, x):
        p = self.p
        n = p.n
        f, df = p.objective(x)
        if p.eq is not None:
            g, Jg = p.eq(x)
            g, Jg = np.asarray(g, float), np.asarray(Jg, float).reshape(len(g), n)
        else:
            g, Jg = np.zeros(0), np.zeros((0, n))
        if p.ineq is not None:
            c, Jc = p.ineq(x)
            c, Jc = np.asarray(c, float), np.asarray(Jc, float).reshape(len(c), n)
        else:
            c, Jc = np.zeros(0), np.zeros((0, n))
        nl, nu = len(self.ilb), len(self.iub)
        h = np.concatenate([-c, self.lb[self.ilb] - x[self.ilb], x[self.iub] - self.ub[self.iub]])
        Jh = np.zeros((len(h), n))
        Jh[: len(c)] = -Jc
        Jh[len(c) + np.arange(nl), self.ilb] = -1.0
        Jh[len(c) + nl + np.arange(nu), self.iub] = 1.0
        return float(f), np.asarray(df, float), g, Jg, h, Jh, len(c)

    def hess(self, x, lam, mu, nc):
        y_in = -mu[:nc]
        return self.p.hessian(x, 1.0, lam, y_in)


def _kkt_measures(df, g, Jg, h, Jh, lam, mu):
    with np.errstate(over="ignore", invalid="ignore"):
        return _kkt_measures_raw(df, g, Jg, h, Jh, lam, mu)


def _kkt_measures_raw(df, g, Jg, h, Jh, lam, mu):
    Lx = df + Jg.T @ lam + Jh.T @ mu
    feas = max(np.max(np.abs(g), initial=0.0), np.max(h, initial=0.0))
    comp = np.max(np.abs(mu * h), initial=0.0)
    dual = -np.min(mu, initial=0.0)
    return float(np.max(np.abs(Lx), initial=0.0)), float(feas), float(comp), float(dual)


def _inertia(K: np.ndarray) -> tuple[int, int, int]:
    _, d, _ = scipy.linalg.ldl(K, lower=True)
    scale = max(1.0, float(np.max(np.abs(K))))
    pos = neg = zero = 0
    i = 0
    while i < len(d):
        if i + 1 < len(d) and d[i + 1, i] != 0.0:
            ev = np.linalg.eigvalsh(d[i : i + 2, i : i + 2])
            i += 2
        else:
            ev = (d[i, i],)
            i += 1
        for v in ev:
            if v == 0.0:
                zero += 1
            elif v > 0:
                pos += 1
            else:
                neg += 1
    return pos, neg, zero


class _KktSolver:
    """Solve the primal-dual system, convexifying until the inertia is right."""

    def __init__(self):
        self.last_dw = 0.0

    def __call__(self, M, Jg, rhs_x, rhs_g, check_inertia=True):
        n, m = M.shape[0], Jg.shape[0]
        K = np.zeros((n + m, n + m))
        K[:n, :n] = M
        K[:n, n:] = Jg.T
        K[n:, :n] = Jg
        rhs = np.concatenate([rhs_x, rhs_g])
        dw, dc = 0.0, 0.0
        cap = 1e20 * max(1.0, float(np.max(np.abs(M), initial=0.0)))
        for _ in range(60):
            Kt = K.copy()
            if dw:
                Kt[:n, :n] += dw * np.eye(n)
            if dc:
                Kt[n:, n:] -= dc * np.eye(m)
            if check_inertia:
                pos, neg, zero = _inertia(Kt)
                good = pos == n and neg == m and zero == 0
            else:
                good = True
            if good:
                try:
                    sol = np.linalg.solve(Kt, rhs)
                except np.linalg.LinAlgError:
                    sol = None
                if sol is not None and np.all(np.isfinite(sol)):
                    self.last_dw = dw
                    return sol[:n], sol[n:], dw
            if check_inertia and zero and not dc:
                dc = 1e-9
                continue
            if dw == 0.0:
                dw = 1e-4 if self.last_dw == 0.0 else max(1e-20, self.last_dw / 3)
            else:
                dw *= 8 if self.last_dw else 100
            if dw > cap:
                break
        raise np.linalg.LinAlgError("KKT matrix could not be regularised")


def _solve_kkt(M, Jg, rhs_x, rhs_g):
    dx, dy, _ = _KktSolver()(M, Jg, rhs_x, rhs_g, check_inertia=False)
    return dx, dy


def _polish(ex: _Expanded, x, lam, mu, opts: NlpOptions, iters: int = 20):
    """Newton on the KKT system with the active set frozen."""
    f, df, g, Jg, h, Jh, nc = ex.eval(x)
    act = np.flatnonzero(mu > np.maximum(-h, opts.active_tol))
    n = len(x)
    m = len(g)
    mu_a = mu[act].copy()
    for _ in range(iters):
        Lx = df + Jg.T @ lam + Jh[act].T @ mu_a
        r = np.concatenate([Lx, g, h[act]])
        if np.max(np.abs(r), initial=0.0) < 1e-13:
            break
        H = ex.hess(x, lam, _scatter(mu_a, act, len(mu)), nc)
        A = np.vstack([Jg, Jh[act]])
        try:
            dx, dy = _solve_kkt(H, A, -Lx, -np.concatenate([g, h[act]]))
        except np.linalg.LinAlgError:
            return None
        x = x + dx
        lam = lam + dy[:m]
        mu_a = mu_a + dy[m:]
        if not (np.all(np.isfinite(x)) and np.all(np.isfinite(dy))):
            return None
        f, df, g, Jg, h, Jh, nc = ex.eval(x)
        if not np.isfinite(f):
            return None
    mu_new = _scatter(mu_a, act, len(mu))
    return x, lam, mu_new, (f, df, g, Jg, h, Jh, nc)


def _scatter(vals, idx, size):
    out = np.zeros(size)
    out[idx] = vals
    return out


def solve_nlp(prob: NlpProblem, x0: np.ndarray, opts: NlpOptions | None = None) -> NlpSolution:
    """Minimise ``prob`` from ``x0``; deterministic for identical inputs."""
    opts = opts or NlpOptions.from_env()
    x = np.array(x0, dtype=float)
    if x.shape != (prob.n,):
        raise ValueError(f"x0 has shape {x.shape}, expected ({prob.n},)")
    ex = _Expanded(prob)
    f, df, g, Jg, h, Jh, nc = ex.eval(x)
    neq, niq = len(g), len(h)
    gamma = 1.0
    lam = np.zeros(neq)
    z = np.full(niq, opts.z0)
    k = h < -opts.z0
    z[k] = -h[k]
    mu = np.full(niq, opts.z0)
    k = gamma / z > opts.z0
    mu[k] = gamma / z[k]
    status = "max-iter"
    diag = ""
    last_step = 0.0
    it = 0
    best = None

    def accept(xc, lamc, muc, ev):
        fc, dfc, gc, Jgc, hc, Jhc, _ = ev
        st, fe, co, du = _kkt_measures(dfc, gc, Jgc, hc, Jhc, lamc, muc)
        ok = (st <= opts.stationarity_tol and fe <= opts.feasibility_tol
              and co <= opts.complementarity_tol and du <= opts.complementarity_tol)
        return ok, dict(stationarity=st, feasibility=fe, complementarity=co, dual_infeasibility=du)

    kkt_solve = _KktSolver()
    nu = 1.0

    def merit(fv, gv, hv, zv, gam):
        return fv - gam * float(np.sum(np.log(zv))) + nu * (
            float(np.sum(np.abs(gv))) + float(np.sum(np.abs(hv + zv)))
        )

    for it in range(1, opts.max_iter + 1):
        Lx = df + Jg.T @ lam + Jh.T @ mu
        H = ex.hess(x, lam, mu, nc)
        zinv = 1.0 / z
        dh_zinv = Jh.T * zinv
        with np.errstate(over="ignore", invalid="ignore"):
            M = H + (dh_zinv * mu) @ Jh
            N = Lx + dh_zinv @ (mu * h + gamma)
        if not (np.all(np.isfinite(M)) and np.all(np.isfinite(N))):
            status, diag = "numerical-failure", "non-finite KKT system"
            break
        try:
            dx, dlam, _ = kkt_solve(M, Jg, -N, -g)
        except np.linalg.LinAlgError:
            status, diag = "numerical-failure", "singular KKT system"
            break
        dz = -h - z - Jh @ dx
        dmu = -mu + zinv * (gamma - mu * dz)
        neg = dz < 0
        alphap = min(opts.xi * np.min(z[neg] / -dz[neg]), 1.0) if neg.any() else 1.0
        neg = dmu < 0
        alphad = min(opts.xi * np.min(mu[neg] / -dmu[neg]), 1.0) if neg.any() else 1.0

        # backtracking on an l1 barrier merit function
        nu = max(nu, 1.1 * float(np.max(np.abs(np.concatenate([lam + dlam, mu + dmu, [0.0]])))))
        phi0 = merit(f, g, h, z, gamma)
        infeas = float(np.sum(np.abs(g))) + float(np.sum(np.abs(h + z)))
        dphi = float(df @ dx) - gamma * float(np.sum(dz / z)) - nu * infeas
        t = alphap
        for _ls in range(opts.ls_halvings):
            xt = x + t * dx
            zt = z + t * dz
            ft, dft, gt, Jgt, ht, Jht, _ = ex.eval(xt)
            if np.isfinite(ft) and (
                not opts.line_search or dphi >= 0 or merit(ft, gt, ht, zt, gamma) <= phi0 + 1e-4 * t * dphi
            ):
                break
            t *= 0.5
        else:
            t = alphap
            xt = x + t * dx
            zt = z + t * dz
            ft, dft, gt, Jgt, ht, Jht, _ = ex.eval(xt)
        alphap = t
        x = xt
        z = np.maximum(zt, -ht)  # keep slacks consistent with strictly satisfied constraints
        lam = lam + alphad * dlam
        mu = mu + alphad * dmu
        if niq > 0 and gamma > 0:
            # keep the primal-dual Hessian term within a bounded distance of the barrier one
            mu = np.clip(mu, gamma / (1e10 * z), 1e10 * gamma / z)
        last_step = float(np.linalg.norm(alphap * dx))
        if niq > 0:
            # do not let the barrier parameter collapse faster than the iterates converge
            gamma = max(opts.sigma * float(z @ mu) / niq, opts.gamma_decay * gamma, 1e-15)
        f, df, g, Jg, h, Jh = ft, dft, gt, Jgt, ht, Jht
        if not (np.isfinite(f) and np.all(np.isfinite(x))):
            status, diag = "numerical-failure", "non-finite iterate"
            break
        ok, meas = accept(x, lam, mu, (f, df, g, Jg, h, Jh, nc))
        if ok:
            status = "optimal"
            best = (x, lam, mu, meas)
            break
        # try to finish with an active-set Newton polish once the barrier is small
        st, fe, co, du = meas.values()
        if gamma < 1e-5 and fe < 1e-5 and st < 1e-3:
            with np.errstate(all="ignore"):
                pol = _polish(ex, x, lam, mu, opts)
            if pol is not None:
                xp, lamp, mup, ev = pol
                okp, measp = accept(xp, lamp, mup, ev)
                if okp:
                    status = "optimal"
                    best = (xp, lamp, mup, measp)
                    f = ev[0]
                    h = ev[4]
                    break

    if best is None:
        _, meas = accept(x, lam, mu, (f, df, g, Jg, h, Jh, nc))
        best = (x, lam, mu, meas)
        if status == "max-iter" and meas["feasibility"] > 1e-4:
            status = "infeasible"
        worst = "none"
        if len(g) and np.max(np.abs(g)) >= np.max(h, initial=-np.inf):
            i = int(np.argmax(np.abs(g)))
            worst = prob.eq_labels[i] if prob.eq_labels else f"eq[{i}]"
        elif len(h):
            i = int(np.argmax(h))
            worst = _h_label(prob, ex, i, nc)
        diag = (diag + "; " if diag else "") + (
            f"worst constraint {worst}, last step norm {last_step:.3e}, kkt {meas}"
        )
    x, lam, mu, meas = best
    f_final, _, _, _, h_final, _, nc = ex.eval(x)
    nl = len(ex.ilb)
    y_in = mu[:nc]
    z_lb = np.zeros(prob.n)
    z_ub = np.zeros(prob.n)
    z_lb[ex.ilb] = mu[nc : nc + nl]
    z_ub[ex.iub] = mu[nc + nl :]
    active = [i for i in range(nc) if y_in[i] > opts.active_tol and h_final[i] > -1e-6]
    labels = [prob.ineq_labels[i] if prob.ineq_labels else f"ineq[{i}]" for i in active]
    if status != "optimal":
        log.debug("solve_nlp: %s (%s)", status, diag)
    return NlpSolution(
        x=x, f=f_final, status=status, y_eq=-lam, y_in=y_in, z_lb=z_lb, z_ub=z_ub,
        active_set=active, iterations=it, kkt=meas, diagnostic=diag, active_labels=labels,
    )


def _h_label(prob, ex, i, nc):
    if i < nc:
        return prob.ineq_labels[i] if prob.ineq_labels else f"ineq[{i}]"
    i -= nc
    if i < len(ex.ilb):
        return f"lb[x{ex.ilb[i]}]"
    return f"ub[x{ex.iub[i - len(ex.ilb)]}]"
