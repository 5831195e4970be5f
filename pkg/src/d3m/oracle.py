"""Exact, enumerable version of the monitor on finite binary-label problems.

An instance is a small domain with two input distributions (training ``P``
and deployment ``Q``), ground-truth labelers for each, and an explicit list
of hypotheses. Every population quantity is an exact finite sum, and the
"most disagreeing hypothesis" search is an exhaustive max over the allowed
set, so the idealized calibrate/deploy procedures carry no optimization error.

Naming used below: ``dis_P[h]`` is the disagreement of ``h`` with the base
classifier under ``P``; ``dis_Q[h]`` the same under ``Q``.
"""
from __future__ import annotations

import itertools
import logging
import math
from dataclasses import asdict, dataclass
from typing import List, Optional

import numpy as np

from .errors import InputError, IntegrityError
from .monitor import quantile

log = logging.getLogger(__name__)

MAX_POINTS = 12
MAX_HYPOTHESES = 4096
TOL = 1e-12

NON_DETERIORATING = "non_deteriorating"
REGIME1 = "regime1"
REGIME2 = "regime2"


class PreconditionError(InputError):
    pass


@dataclass(frozen=True)
class DiscreteInstance:
    P: np.ndarray
    Q: np.ndarray
    g: np.ndarray
    g_deploy: np.ndarray
    H: np.ndarray
    f: int
    points: Optional[tuple] = None
    name: str = ""

    def __post_init__(self):
        P = np.asarray(self.P, dtype=np.float64)
        Q = np.asarray(self.Q, dtype=np.float64)
        H = np.atleast_2d(np.asarray(self.H, dtype=np.int8))
        g = np.asarray(self.g, dtype=np.int8)
        g2 = np.asarray(self.g_deploy, dtype=np.int8)
        n = P.size
        if not 1 <= n <= MAX_POINTS:
            raise InputError(f"domain size must be in [1, {MAX_POINTS}], got {n}")
        if Q.shape != (n,) or g.shape != (n,) or g2.shape != (n,) or H.shape[1] != n:
            raise InputError("P, Q, labelers and hypotheses must all cover the same domain")
        if H.shape[0] > MAX_HYPOTHESES:
            raise InputError(f"at most {MAX_HYPOTHESES} hypotheses, got {H.shape[0]}")
        for name, d in (("P", P), ("Q", Q)):
            if np.any(d < 0) or abs(d.sum() - 1.0) > TOL:
                raise InputError(f"{name} must be a probability vector")
        for arr in (g, g2, H):
            if np.any((arr != 0) & (arr != 1)):
                raise InputError("labels must be 0 or 1")
        if not 0 <= self.f < H.shape[0]:
            raise InputError(f"base classifier index {self.f} out of range")
        points = tuple(range(n)) if self.points is None else tuple(self.points)
        if len(points) != n:
            raise InputError("points must list every domain element")
        for k, v in (("P", P), ("Q", Q), ("g", g), ("g_deploy", g2), ("H", H), ("points", points)):
            object.__setattr__(self, k, v)

    @property
    def n_points(self) -> int:
        return self.P.size

    @property
    def base(self) -> np.ndarray:
        return self.H[self.f]

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "P": self.P.tolist(),
            "Q": self.Q.tolist(),
            "g": self.g.tolist(),
            "g_deploy": self.g_deploy.tolist(),
            "H": self.H.tolist(),
            "f": int(self.f),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DiscreteInstance":
        try:
            return cls(d["P"], d["Q"], d["g"], d.get("g_deploy", d["g"]), d["H"], int(d["f"]),
                       name=d.get("name", ""))
        except KeyError as exc:
            raise InputError(f"instance is missing field {exc}") from exc


def population_err(h, labeler, dist) -> float:
    """Probability under ``dist`` that ``h`` and ``labeler`` differ."""
    h, labeler, dist = np.asarray(h), np.asarray(labeler), np.asarray(dist, dtype=np.float64)
    return float(np.dot(dist, h != labeler))


def tv_distance(P, Q) -> float:
    return 0.5 * float(np.abs(np.asarray(P) - np.asarray(Q)).sum())


def build_Hp(inst: DiscreteInstance, eps, sample=None) -> np.ndarray:
    """Indices of hypotheses whose error against ``g`` is at most ``eps``.

    Population error on ``P`` by default; if ``sample`` (point indices drawn
    from ``P``) is supplied, the empirical error on that sample instead.
    """
    if not 0.0 <= eps <= 1.0:
        raise InputError(f"eps must be in [0, 1], got {eps}")
    wrong = inst.H != inst.g
    if sample is None:
        errs = wrong @ inst.P
    else:
        sample = np.asarray(sample)
        errs = wrong[:, sample].mean(axis=1)
    hp = np.flatnonzero(errs <= eps + TOL)
    if inst.f not in hp:
        raise IntegrityError(f"base classifier (error {errs[inst.f]:.4g}) is not within eps={eps}")
    return hp


def _disagreement(inst: DiscreteInstance, hp) -> np.ndarray:
    return (inst.H[np.asarray(hp)] != inst.base).astype(np.float64)


def _sample_counts(rng, dist, m, rounds):
    n = dist.size
    pts = rng.choice(n, size=(rounds, m), p=dist)
    offset = (np.arange(rounds) * n)[:, None]
    return np.bincount((pts + offset).ravel(), minlength=rounds * n).reshape(rounds, n)


def _max_empirical_disagreement(inst, hp, dist, m, rounds, rng):
    counts = _sample_counts(rng, dist, m, rounds)
    return (counts @ _disagreement(inst, hp).T).max(axis=1) / m


def idealized_calibrate(inst: DiscreteInstance, hp, T, m, rng) -> np.ndarray:
    """Sorted collection of T maximum empirical disagreements on samples from ``P``.

    Each round draws its m points with one ``rng.choice(n, size=m, p=P)``
    call (all T rounds in a single ``(T, m)`` draw).
    """
    if len(hp) == 0:
        raise InputError("hypothesis set is empty")
    if T < 1 or m < 1:
        raise InputError("T and m must be >= 1")
    return np.sort(_max_empirical_disagreement(inst, hp, inst.P, m, T, rng))


def idealized_deploy_stat(inst: DiscreteInstance, hp, m, rng, trials=1) -> np.ndarray:
    return _max_empirical_disagreement(inst, hp, inst.Q, m, trials, rng)


def idealized_deploy(inst: DiscreteInstance, hp, phi, m, alpha, rng) -> bool:
    """Flag when the deployment statistic is strictly above the (1 - alpha) quantile.

    The strict inequality belongs to the idealized procedure; the practical
    monitor flags on ``>=``.
    """
    stat = idealized_deploy_stat(inst, hp, m, rng)[0]
    return bool(stat > quantile(phi, 1.0 - alpha))


@dataclass(frozen=True)
class TheoryReport:
    eps_f: float
    eps_p: float
    eps_q: float
    xi: float
    eta: float
    tv: float
    hp_size: int
    regime: str
    log2_hp: float
    log2_h: float
    eps: float

    def to_dict(self):
        return asdict(self)

    def check(self) -> List[str]:
        """Relations that must hold on every instance; returns the ones that fail."""
        failures = []
        if self.xi < -TOL:
            failures.append("xi >= 0")
        if abs(self.xi - (self.tv - 2 * self.eta)) > TOL:
            failures.append("xi == tv - 2 eta")
        if self.xi < self.eps_q - self.eps_p - TOL:
            failures.append("xi >= eps_q - eps_p")
        if self.eps_q - self.eps_p < self.xi - 2 * self.eps_f - TOL:
            failures.append("eps_q - eps_p >= xi - 2 eps_f")
        if self.eps_p > 2 * self.eps + TOL:
            failures.append("eps_p <= 2 eps")
        return failures


def classify_regime(xi, eps_p, eps_q) -> str:
    if xi <= TOL:
        return NON_DETERIORATING
    if eps_q > eps_p + TOL:
        return REGIME1
    return REGIME2


def compute_theory(inst: DiscreteInstance, eps=None) -> TheoryReport:
    """All theory quantities by enumeration; ``eps`` defaults to the base error."""
    eps_f = population_err(inst.base, inst.g, inst.P)
    eps = eps_f if eps is None else float(eps)
    hp = build_Hp(inst, eps)
    dis = _disagreement(inst, hp)
    dis_P = dis @ inst.P
    dis_Q = dis @ inst.Q
    eps_p = float(dis_P.max())
    eps_q = float(dis_Q.max())
    xi = float((dis_Q - dis_P).max())
    tv = tv_distance(inst.P, inst.Q)
    # mixture: half P labelled by f, half Q labelled by the flip of f
    err_U = 0.5 * (dis_P + 1.0 - dis_Q)
    bayes_U = 0.5 * float(np.minimum(inst.P, inst.Q).sum())
    eta = float(err_U.min()) - bayes_U
    return TheoryReport(eps_f, eps_p, eps_q, xi, eta, tv, int(hp.size),
                        classify_regime(xi, eps_p, eps_q), math.log2(hp.size),
                        math.log2(inst.H.shape[0]), eps)


@dataclass(frozen=True)
class LemmaReport:
    condition_met: bool
    pdd: bool
    dpdd: bool
    agree: Optional[bool]
    max_gap: float
    required_gap: float
    tv: float
    kappa: float
    eps_f: float

    def to_dict(self):
        return asdict(self)


def is_pdd(inst: DiscreteInstance) -> bool:
    """Base error on deployment (against the deployment labeler) exceeds its training error."""
    return population_err(inst.base, inst.g_deploy, inst.Q) > population_err(inst.base, inst.g, inst.P) + TOL


def is_dpdd(inst: DiscreteInstance, eps_f) -> bool:
    """Some hypothesis as accurate as ``eps_f`` disagrees with f more on Q than on P."""
    if population_err(inst.base, inst.g, inst.P) > eps_f + TOL:
        return False
    errs = (inst.H != inst.g) @ inst.P
    ok = errs <= eps_f + TOL
    dis = (inst.H[ok] != inst.base).astype(np.float64)
    return bool(np.any(dis @ inst.Q > dis @ inst.P + TOL))


def check_equivalence_lemma(inst: DiscreteInstance, kappa, eps_f=None) -> LemmaReport:
    """When some accurate hypothesis has a disagreement gap of at least
    2 (kappa + eps_f), the two deterioration notions must agree.

    Preconditions: identical labelers at training and deployment, TV(P, Q) at
    most ``kappa``, and the ground truth among the hypotheses.
    """
    if not np.array_equal(inst.g, inst.g_deploy):
        raise PreconditionError("training and deployment labelers differ")
    tv = tv_distance(inst.P, inst.Q)
    if tv > kappa + TOL:
        raise PreconditionError(f"TV(P, Q) = {tv:.6g} exceeds kappa = {kappa}")
    if not np.any(np.all(inst.H == inst.g, axis=1)):
        raise PreconditionError("ground-truth labeler is not in the hypothesis set")
    if eps_f is None:
        eps_f = population_err(inst.base, inst.g, inst.P)
    hp = build_Hp(inst, eps_f)
    dis = _disagreement(inst, hp)
    gaps = dis @ inst.Q - dis @ inst.P
    required = 2.0 * (kappa + eps_f)
    met = bool(np.any(gaps >= required - TOL))
    pdd, dpdd = is_pdd(inst), is_dpdd(inst, eps_f)
    return LemmaReport(met, pdd, dpdd, (pdd == dpdd) if met else None, float(gaps.max()),
                       required, tv, float(kappa), float(eps_f))


@dataclass(frozen=True)
class ExperimentResult:
    rate: float
    kind: str
    regime: str
    flags: int
    trials: int
    threshold: float

    def to_dict(self):
        return asdict(self)


def fpr_tpr_experiment(inst: DiscreteInstance, eps, T, m, alpha, trials, rng) -> ExperimentResult:
    """Calibrate once, then run ``trials`` idealized deployments.

    The rate is an FPR when the instance is non-deteriorating, a TPR otherwise.
    """
    report = compute_theory(inst, eps)
    hp = build_Hp(inst, report.eps)
    phi = idealized_calibrate(inst, hp, T, m, rng)
    threshold = quantile(phi, 1.0 - alpha)
    stats = idealized_deploy_stat(inst, hp, m, rng, trials)
    flags = int(np.sum(stats > threshold))
    kind = "fpr" if report.regime == NON_DETERIORATING else "tpr"
    return ExperimentResult(flags / trials, kind, report.regime, flags, trials, threshold)


def all_labelings(n) -> np.ndarray:
    """Every binary labeling of n points, one per row (2^n rows)."""
    if 2 ** n > MAX_HYPOTHESES:
        raise InputError(f"2^{n} labelings exceed the cap of {MAX_HYPOTHESES}")
    return np.array(list(itertools.product((0, 1), repeat=n)), dtype=np.int8)


def random_instance(rng, n_points=None, n_hypotheses=None, shift=None) -> DiscreteInstance:
    """A random instance with the ground truth in H and a base classifier of moderate error."""
    n = int(rng.integers(2, 9)) if n_points is None else n_points
    P = rng.dirichlet(np.ones(n))
    shift = rng.uniform() if shift is None else shift
    Q = (1 - shift) * P + shift * rng.dirichlet(np.ones(n))
    P, Q = P / P.sum(), Q / Q.sum()
    g = rng.integers(0, 2, n).astype(np.int8)
    full = all_labelings(n)
    k = full.shape[0] if n_hypotheses is None else min(n_hypotheses, full.shape[0])
    rows = full[rng.choice(full.shape[0], size=k, replace=False)]
    if not np.any(np.all(rows == g, axis=1)):
        rows = np.vstack([rows, g])
    # pick f among hypotheses whose training error is not too large
    errs = (rows != g) @ P
    candidates = np.flatnonzero(errs <= np.quantile(errs, 0.5))
    f = int(rng.choice(candidates))
    return DiscreteInstance(P, Q, g, g, rows, f)


def search_regime2_instance(rng, max_tries=100000, grid=10) -> DiscreteInstance:
    """Random instances with probabilities on a 1/grid lattice until one has
    xi > 0 and eps_q <= eps_p."""
    for _ in range(max_tries):
        n = int(rng.integers(3, 7))
        P = rng.multinomial(grid, np.ones(n) / n) / grid
        Q = rng.multinomial(grid, np.ones(n) / n) / grid
        g = rng.integers(0, 2, n).astype(np.int8)
        rows = all_labelings(n)
        f = int(rng.integers(rows.shape[0]))
        inst = DiscreteInstance(P, Q, g, g, rows, f)
        r = compute_theory(inst)
        if r.regime == REGIME2:
            return inst
    raise RuntimeError("no regime-2 instance found")


# Frozen fixtures. Points in each are indexed 0..n-1.

def fixture_non_deteriorating() -> DiscreteInstance:
    # the shift moves mass only between points where every accurate
    # hypothesis agrees with f, so no disagreement grows
    P = [0.3, 0.3, 0.2, 0.2]
    Q = [0.1, 0.5, 0.2, 0.2]
    g = [0, 1, 0, 1]
    f = [0, 1, 1, 1]
    h = [0, 1, 0, 1]
    bad = [1, 0, 0, 0]
    return DiscreteInstance(P, Q, g, g, [f, h, bad], 0, name="non_deteriorating")


def fixture_regime1() -> DiscreteInstance:
    # f and an equally accurate h disagree on points 2 and 3, rare under P, common under Q
    P = [0.45, 0.45, 0.05, 0.05]
    Q = [0.1, 0.1, 0.4, 0.4]
    g = [0, 1, 0, 1]
    f = [0, 1, 1, 1]
    h = [0, 1, 0, 0]
    return DiscreteInstance(P, Q, g, g, [f, h, g], 0, name="regime1")


def fixture_regime2() -> DiscreteInstance:
    # f errs on point 2. g disagrees with f on {2}; h on {2, 3}. Q moves the
    # mass of point 3 onto point 2, so g's disagreement grows (xi = 0.1) while
    # the largest disagreement stays at 0.2 under both P and Q.
    P = [0.4, 0.4, 0.1, 0.1]
    Q = [0.4, 0.4, 0.2, 0.0]
    g = [0, 1, 0, 1]
    f = [0, 1, 1, 1]
    h = [0, 1, 0, 0]
    return DiscreteInstance(P, Q, g, g, [f, h, g], 0, name="regime2")


def fixture_identical() -> DiscreteInstance:
    # no shift and a perfect f: the only setting where the lemma's gap condition can hold
    P = [0.5, 0.25, 0.25]
    g = [0, 1, 1]
    return DiscreteInstance(P, P, g, g, all_labelings(3), 3, name="identical")


FIXTURES = {
    "non_deteriorating": fixture_non_deteriorating,
    "regime1": fixture_regime1,
    "regime2": fixture_regime2,
    "identical": fixture_identical,
}
