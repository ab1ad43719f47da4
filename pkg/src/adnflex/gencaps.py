"""Reactive power limits of synchronous machines.

Two upper limits are modelled: the stator (armature) current limit and a
linearised rotor (field) current limit that accounts for magnetic
saturation.  All public functions take and return MW / Mvar; reactances,
emf and saturation data are in per unit of the machine rating ``S_N``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field


class CapabilityError(ValueError):
    """Raised when a machine has no reactive headroom or saturation diverges."""


@dataclass(frozen=True)
class CapabilityParams:
    """Synchronous machine limit data.

    Attributes:
        S_N: apparent power rating [MVA].
        P_N: rated active power [MW].
        E_lim: emf corresponding to the field current limit [pu].
        X_l: leakage reactance [pu on S_N].
        X_ad: unsaturated d-axis mutual reactance [pu on S_N].
        m, n: saturation coefficients of ``K = 1 / (1 + m * V_l**n)``.
        V_N: nominal terminal voltage [pu].
    """

    S_N: float
    P_N: float
    E_lim: float
    X_l: float
    X_ad: float
    m: float = 0.0
    n: float = 1.0
    V_N: float = 1.0
    I_N: float = field(init=False)

    def __post_init__(self) -> None:
        object.__setattr__(self, "I_N", self.S_N / self.V_N)

    def findings(self) -> list[str]:
        out = []
        if self.S_N <= 0 or self.V_N <= 0:
            out.append("non-positive machine rating")
        if self.P_N <= 0:
            out.append("non-positive rated active power")
        elif self.P_N > self.S_N * self.V_N:
            out.append("rated active power exceeds S_N*V_N")
        if self.X_l < 0 or self.X_ad <= 0:
            out.append("invalid machine reactances")
        if self.m < 0:
            out.append("negative saturation coefficient")
        return out


def armature_limit(caps: CapabilityParams, P_g: float, V_g: float) -> float:
    """Armature current limit ``sqrt((V_g I_N)^2 - P_g^2)`` in Mvar."""
    s = V_g * caps.I_N
    rem = s * s - P_g * P_g
    if rem < 0.0:
        raise CapabilityError(
            f"P_g={P_g:g} MW exceeds V_g*I_N={s:g} MVA: no reactive headroom"
        )
    return math.sqrt(rem)


def saturation_factor(caps: CapabilityParams, V_l: float) -> float:
    return 1.0 / (1.0 + caps.m * V_l**caps.n)


def airgap_voltage(caps: CapabilityParams, P_g: float, Q_g: float, V_g: float) -> float:
    """Magnitude of ``V_g + j X_l (P_g - j Q_g) / V_g`` with powers in MW/Mvar."""
    p = P_g / caps.S_N
    q = Q_g / caps.S_N
    return abs(complex(V_g + caps.X_l * q / V_g, caps.X_l * p / V_g))


def max_reactive(caps: CapabilityParams, V_g: float, K: float) -> float:
    """Reactive output at zero active power on the field limit, Mvar."""
    x_ds = caps.X_l + K * caps.X_ad
    return caps.S_N * V_g * (K * caps.E_lim - V_g) / x_ds


def field_limit_frozen(
    caps: CapabilityParams, P_g: float, V_g: float, K: float
) -> tuple[float, float, float]:
    """Linearised field limit for a fixed saturation factor.

    Returns ``(q_r, dq_r/dP_g, dq_r/dV_g)`` in Mvar, Mvar/MW and Mvar/pu.
    The line joins ``(0, Q_m)`` with the armature circle at ``P_N``.
    """
    x_ds = caps.X_l + K * caps.X_ad
    e_qs = K * caps.E_lim
    q_m = caps.S_N * V_g * (e_qs - V_g) / x_ds
    dq_m = caps.S_N * (e_qs - 2.0 * V_g) / x_ds
    s = V_g * caps.I_N
    rem = s * s - caps.P_N**2
    if rem < 0.0:
        raise CapabilityError("V_g*I_N below P_N: field limit line undefined")
    r = math.sqrt(rem)
    dr = V_g * caps.I_N**2 / r if r > 0 else math.inf
    frac = P_g / caps.P_N
    q = q_m * (1.0 - frac) + r * frac
    return q, (r - q_m) / caps.P_N, dq_m * (1.0 - frac) + dr * frac


def field_limit(
    caps: CapabilityParams,
    P_g: float,
    V_g: float,
    Q_g_est: float = 0.0,
    *,
    damping: float = 0.5,
    tol: float = 1e-10,
    max_iter: int = 50,
    return_info: bool = False,
):
    """Saturated field current limit ``q_r(P_g, V_g)`` in Mvar.

    The saturation factor depends on the air-gap voltage, which depends on
    the reactive output being limited.  The scalar fixed point
    ``Q = q_r(P_g, V_g; K(V_l(Q)))`` is solved by damped iteration starting
    from ``Q_g_est``.

    With ``return_info`` the result is ``(q, K, iterations)``.
    """
    if V_g <= 0:
        raise CapabilityError("terminal voltage must be positive")
    if caps.P_N <= 0:
        raise CapabilityError("P_N must be positive")
    q = Q_g_est
    for it in range(1, max_iter + 1):
        K = saturation_factor(caps, airgap_voltage(caps, P_g, q, V_g))
        target = field_limit_frozen(caps, P_g, V_g, K)[0]
        q_new = (1.0 - damping) * q + damping * target
        if abs(q_new - q) <= tol * max(1.0, abs(q_new)):
            # report the limit line at the converged K, not the damped iterate
            K = saturation_factor(caps, airgap_voltage(caps, P_g, q_new, V_g))
            q = field_limit_frozen(caps, P_g, V_g, K)[0]
            if return_info:
                return q, K, it
            return q
        q = q_new
    raise CapabilityError(
        f"saturation fixed point did not converge in {max_iter} iterations"
    )


def reactive_limit(caps: CapabilityParams, P_g: float, V_g: float) -> tuple[float, str]:
    """Binding upper reactive limit and its kind ('armature' or 'field')."""
    q_a = armature_limit(caps, P_g, V_g)
    q_r = field_limit(caps, P_g, V_g, min(q_a, max_reactive(caps, V_g, 1.0)))
    return (q_a, "armature") if q_a <= q_r else (q_r, "field")
