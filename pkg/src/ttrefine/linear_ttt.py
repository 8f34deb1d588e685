"""Numerical check that one prior-loss gradient step on a linear model's
representation can lower its main-task loss.

Model: features x (f,), representation R (f x d), heads p and m (d,).
Prior prediction xᵀRp, main prediction xᵀRm. Losses use the halved squared
error L = ½(ŷ − y)², so the prior-loss gradient in R is (xᵀRp − E_P)·x pᵀ
and a TTT step is R' = R − η(xᵀRp − E_P)·x pᵀ. That equals the displayed
form R − η(E_P − xᵀRp)(−x pᵀ); the finite-difference test in the suite is
the arbiter of the sign.
"""

from __future__ import annotations

import csv
import io
from dataclasses import asdict, dataclass

import numpy as np

from .graph_spectra import NumericError
from .potentials import PotentialSet, default_potentials, lj_dimer_energy, reference_dimer_energy

RANK_TOL = 1e-8


@dataclass
class LinearTTTModel:
    R: np.ndarray
    m: np.ndarray
    p: np.ndarray
    eta: float = 1e-4


def fit_heads_least_squares(R, X, yP, yM) -> tuple[np.ndarray, np.ndarray]:
    """Least-squares prior and main heads on frozen activations A = X R."""
    A = np.asarray(X, dtype=float) @ np.asarray(R, dtype=float)
    s = np.linalg.svd(A, compute_uv=False)
    if len(s) < A.shape[1] or s.min() <= RANK_TOL:
        smin = 0.0 if len(s) < A.shape[1] else float(s.min())
        raise NumericError(f"activations are rank deficient: smallest singular value {smin:.3e}")
    p = np.linalg.lstsq(A, np.asarray(yP, dtype=float), rcond=None)[0]
    m = np.linalg.lstsq(A, np.asarray(yM, dtype=float), rcond=None)[0]
    return p, m


def prior_loss(R, p, x, E_P) -> float:
    return 0.5 * float(x @ R @ p - E_P) ** 2


def main_loss(R, m, x, E_M) -> float:
    return 0.5 * float(x @ R @ m - E_M) ** 2


def ttt_step(model: LinearTTTModel, x, E_P) -> np.ndarray:
    """R − η ∇_R ½(xᵀRp − E_P)²."""
    x = np.asarray(x, dtype=float)
    residual = float(x @ model.R @ model.p - E_P)
    return model.R - model.eta * residual * np.outer(x, model.p)


def conditions_hold(model: LinearTTTModel, x, E_P, E_M) -> tuple[bool, bool]:
    """(errors correlated in sign, pᵀm > 0)."""
    eP = E_P - float(x @ model.R @ model.p)
    eM = E_M - float(x @ model.R @ model.m)
    return bool(np.sign(eP) == np.sign(eM) and eP != 0.0), bool(model.p @ model.m > 0)


def _decreases(model: LinearTTTModel, x, E_P, E_M, eta: float) -> bool:
    stepped = LinearTTTModel(model.R, model.m, model.p, eta)
    R2 = ttt_step(stepped, x, E_P)
    return main_loss(R2, model.m, x, E_M) < main_loss(model.R, model.m, x, E_M)


def decrease_threshold(model: LinearTTTModel, x, E_P, E_M, iters: int = 200) -> float:
    """Largest η with main-loss decrease, by bisection (0 when none)."""
    lo, hi = 0.0, 1e-12
    if not _decreases(model, x, E_P, E_M, hi):
        return 0.0
    while _decreases(model, x, E_P, E_M, hi):
        lo, hi = hi, hi * 2.0
        if hi > 1e12:
            return float("inf")
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        if mid in (lo, hi):
            break
        if _decreases(model, x, E_P, E_M, mid):
            lo = mid
        else:
            hi = mid
    return lo


@dataclass(frozen=True)
class DimerGenerator:
    """Random dimer instances with Gaussian radial-basis features.

    Training distances sit around the potential minimum; test inputs are
    searched at shorter separations, where both the LJ prior and the
    reference energy climb steeply and a bounded linear model underpredicts.
    """

    n_features: int = 8
    n_hidden: int = 4
    n_train: int = 40
    train_range: tuple[float, float] = (0.9, 2.2)  # multiples of the pair r0
    search_range: tuple[float, float] = (0.85, 0.4)
    search_points: int = 60
    potentials: PotentialSet | None = None

    def features(self, r, r0: float) -> np.ndarray:
        centers = np.linspace(0.5, 2.5, self.n_features) * r0
        width = centers[1] - centers[0]
        r = np.atleast_1d(np.asarray(r, dtype=float))
        return np.exp(-(((r[:, None] - centers[None, :]) / width) ** 2))


@dataclass
class TrialResult:
    trial: int
    pair: str
    status: str  # decrease | no_decrease | excluded_inner | inconclusive
    r_test: float
    main_loss_before: float
    main_loss_after: float
    eta_threshold: float
    inner_pm: float


@dataclass
class TheoremReport:
    trials: list[TrialResult]
    eta: float

    @property
    def satisfying(self) -> int:
        return sum(t.status in ("decrease", "no_decrease") for t in self.trials)

    @property
    def decreased(self) -> int:
        return sum(t.status == "decrease" for t in self.trials)

    @property
    def success_rate(self) -> float:
        return self.decreased / self.satisfying if self.satisfying else float("nan")

    def count(self, status: str) -> int:
        return sum(t.status == status for t in self.trials)

    def to_csv(self) -> str:
        buf = io.StringIO()
        fields = list(TrialResult.__dataclass_fields__)
        w = csv.DictWriter(buf, fieldnames=fields, lineterminator="\n")
        w.writeheader()
        for t in self.trials:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in asdict(t).items()})
        return buf.getvalue()

    def summary(self) -> str:
        return (
            f"trials={len(self.trials)} satisfying={self.satisfying} decreased={self.decreased} "
            f"excluded_inner={self.count('excluded_inner')} inconclusive={self.count('inconclusive')} "
            f"success_rate={self.success_rate:.4f} eta={self.eta:g}"
        )


def run_trial(gen: DimerGenerator, rng: np.random.Generator, eta: float, trial: int = 0) -> TrialResult:
    pots = gen.potentials or default_potentials()
    species = sorted(pots.prior.species & pots.reference.species)
    a, b = (species[k] for k in rng.integers(0, len(species), size=2))
    r0 = 0.5 * (pots.reference.morse_r0[a] + pots.reference.morse_r0[b])

    r_train = rng.uniform(*gen.train_range, size=gen.n_train) * r0
    X = gen.features(r_train, r0)
    R = rng.normal(size=(gen.n_features, gen.n_hidden)) / np.sqrt(gen.n_features)
    yP = lj_dimer_energy(r_train, a, b, pots.prior)
    yM = reference_dimer_energy(r_train, a, b, pots.reference)
    p, m = fit_heads_least_squares(R, X, yP, yM)
    model = LinearTTTModel(R, m, p, eta)
    pm = float(p @ m)

    def result(status, r=float("nan"), before=float("nan"), after=float("nan"), thr=float("nan")):
        return TrialResult(trial, f"{a}{b}", status, r, before, after, thr, pm)

    r_grid = np.linspace(*gen.search_range, gen.search_points) * r0
    Xs = gen.features(r_grid, r0)
    EP = lj_dimer_energy(r_grid, a, b, pots.prior)
    EM = reference_dimer_energy(r_grid, a, b, pots.reference)
    for x, r, ep, em in zip(Xs, r_grid, EP, EM):
        sign_ok, inner_ok = conditions_hold(model, x, ep, em)
        if not sign_ok:
            continue
        if not inner_ok:
            return result("excluded_inner", float(r))
        before = main_loss(R, m, x, em)
        after = main_loss(ttt_step(model, x, ep), m, x, em)
        thr = decrease_threshold(model, x, ep, em)
        status = "decrease" if after < before else "no_decrease"
        return result(status, float(r), before, after, thr)
    return result("inconclusive")


def verify_theorem(generator: DimerGenerator | None = None, trials: int = 1000, eta: float = 1e-4, seed: int = 0) -> TheoremReport:
    """Run ``trials`` generated instances; see ``TheoremReport.success_rate``."""
    gen = generator or DimerGenerator()
    rng = np.random.default_rng(seed)
    out = []
    for k in range(trials):
        try:
            out.append(run_trial(gen, rng, eta, k))
        except NumericError:
            out.append(TrialResult(k, "", "inconclusive", *([float("nan")] * 5)))
    return TheoremReport(out, eta)
