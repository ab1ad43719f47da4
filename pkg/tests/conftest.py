"""Shared fixtures.  Expensive studies are computed once per session."""

from __future__ import annotations

import numpy as np
import pytest

from adnflex import cases
from adnflex.feeder_opf import FeederOpf
from adnflex.gencaps import CapabilityParams
from adnflex.netmodel import (
    AdnAttachment,
    Branch,
    Bus,
    ExpLoad,
    IbgUnit,
    NetworkCase,
    StressDirection,
    SyncGen,
    TransformerLTC,
)


@pytest.fixture(scope="session")
def table2():
    return cases.table2_feeder()


@pytest.fixture(scope="session")
def table2_opf(table2):
    return FeederOpf(table2)


@pytest.fixture(scope="session")
def table2_scan(table2):
    from adnflex.flex import radial_scan

    return radial_scan(table2, 3.0)


@pytest.fixture(scope="session")
def table2_corners(table2):
    from adnflex.flex import corner_points_2bus

    return corner_points_2bus(table2)


@pytest.fixture(scope="session")
def feeder30():
    return cases.feeder30()


@pytest.fixture(scope="session")
def feeder30_scan(feeder30):
    from adnflex.flex import radial_scan

    return radial_scan(feeder30, 3.0)


def random_case(rng: np.random.Generator, n: int | None = None, feeder: bool | None = None) -> NetworkCase:
    """Small random network exercising every kind of residual term.

    A spanning tree plus a few chords, random line charging and shunts,
    generators with and without capability data, IBGs, exponential loads in
    feeders and ADN attachments at transmission level.
    """
    n = int(rng.integers(2, 11)) if n is None else n
    feeder = bool(rng.random() < 0.5) if feeder is None else feeder
    ids = [f"b{i}" for i in range(n)]
    buses = [Bus(ids[0], "slack", 0.8, 1.2)]
    buses += [Bus(b, "load", 0.8, 1.2, b_sh=float(rng.uniform(-0.1, 0.3)) * (rng.random() < 0.3),
                  g_sh=float(rng.uniform(0, 0.05)) * (rng.random() < 0.2)) for b in ids[1:]]
    branches = []
    for i in range(1, n):
        j = int(rng.integers(0, i))
        branches.append(Branch(f"l{i}", ids[j], ids[i], float(rng.uniform(0.0, 0.05)),
                               float(rng.uniform(0.05, 0.3)), float(rng.uniform(0, 0.2))))
    for k in range(int(rng.integers(0, 3)) if n > 2 else 0):
        a, b = rng.choice(n, 2, replace=False)
        branches.append(Branch(f"c{k}", ids[a], ids[b], float(rng.uniform(0.0, 0.05)),
                               float(rng.uniform(0.05, 0.3)), 0.0))
    transformers = []
    if n > 2 and rng.random() < 0.5:
        transformers.append(TransformerLTC("t", ids[0], ids[-1], float(rng.uniform(0.01, 0.1)),
                                           tap=float(rng.uniform(0.95, 1.05))))
    caps = CapabilityParams(S_N=400.0, P_N=360.0, E_lim=2.4, X_l=0.15, X_ad=1.9, m=0.1, n=6.0)
    gens = [SyncGen("g0", ids[0], float(rng.uniform(0, 100)), 1.02, w=0.6)]
    if n > 3:
        gens.append(SyncGen("g1", ids[1], float(rng.uniform(50, 300)), 1.01, w=0.4, caps=caps))
    else:
        gens[0] = SyncGen("g0", ids[0], gens[0].P_g0, 1.02, w=1.0)
    loads = [ExpLoad(f"d{i}", ids[i], float(rng.uniform(0, 80)), float(rng.uniform(-10, 30)),
                     1.0, float(rng.uniform(0, 2)), float(rng.uniform(0, 3))) for i in range(1, n)]
    ibgs = []
    if n > 2:
        ibgs.append(IbgUnit("u", ids[2], 50.0, float(rng.uniform(0, 40)), 1.0, 1.0, 0.0, 50.0))
    adns = []
    if not feeder and n > 2:
        adns.append(AdnAttachment("a", ids[n - 1], float(rng.uniform(-5, 5)), float(rng.uniform(-5, 5))))
    stress = StressDirection({ids[-1]: float(rng.uniform(10, 100))}, {ids[-1]: float(rng.uniform(-20, 20))})
    return NetworkCase(
        name="random",
        base_MVA=100.0,
        scope="feeder" if feeder else "transmission",
        buses=tuple(buses),
        branches=tuple(branches),
        transformers=tuple(transformers),
        loads=tuple(loads),
        ibgs=tuple(ibgs),
        generators=tuple(gens),
        adns=tuple(adns),
        stress=stress,
    )


def random_state(rng: np.random.Generator, net) -> np.ndarray:
    L = net.layout
    x = rng.normal(0.0, 0.1, L.size)
    x[L.e] = rng.uniform(0.9, 1.1, net.n)
    x[L.f] = rng.uniform(-0.2, 0.2, net.n)
    return x
