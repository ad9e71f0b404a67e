"""Uniaxial-stress calibration of the spin-mechanical susceptibilities.

Simulates ensemble ODMR under homogeneous uniaxial stress along [100],
[110] and [111], including a random intrinsic transverse coupling per NV
family, and fits (a2, b, c) with a1 held fixed.

Model per (axis, family) group g at applied pressure P::

    shift     = M_z^app(P) + offset_g
    splitting = |M_perp^app(P) + m_g| - |m_g|

where M^app is linear in P and m_g = (M_x^int, M_y^int) is a nuisance
2-vector. The splitting only sees |M_perp|, so the data are invariant under
(b, c, m) -> (-b, -c, -m); fits are reported with c >= 0.

Units inside the fitter are MHz, GPa and MHz/GPa, which keeps the problem
well scaled. Public inputs and outputs are SI.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
from scipy import optimize

from .beam import BeamGeometry, NVSite, bending_stress_per_force
from .exceptions import NonInvertibleError, NumericalError, UnidentifiableError
from .spin import DEFAULT_PARAMS, StressTensor, SusceptibilityParams, response_coefficient, susceptibility_design
from .units import GPa, MHz, MHz_per_GPa

log = logging.getLogger(__name__)

AXES = {"[100]": (1.0, 0.0, 0.0), "[110]": (1.0, 1.0, 0.0), "[111]": (1.0, 1.0, 1.0)}
FIT_NAMES = ("a2", "b", "c")


@dataclass(frozen=True)
class UniaxialScenario:
    """One uniaxial-stress experiment.

    ``intrinsic`` maps family -> (M_x^int, M_y^int) in Hz. Families missing
    from it get couplings drawn from N(0, intrinsic_scale) per component.
    """

    axis: str
    pressures: tuple
    sigma_f: float
    intrinsic: Mapping[int, tuple] = field(default_factory=dict)
    intrinsic_scale: float = 1.0 * MHz
    families: tuple = (1, 2, 3, 4)

    def __post_init__(self):
        if self.axis not in AXES:
            raise ValueError(f"axis must be one of {tuple(AXES)}")
        p = np.asarray(self.pressures, dtype=float)
        if p.size == 0 or np.any(p < 0) or np.any(np.diff(p) <= 0):
            raise ValueError("pressures must be non-negative and strictly increasing")
        if not self.sigma_f > 0:
            raise ValueError("sigma_f must be positive")
        if self.intrinsic_scale < 0:
            raise ValueError("intrinsic_scale must be non-negative")


@dataclass(frozen=True)
class ShiftSplitRecord:
    axis: str
    family: int
    pressure: float  # Pa
    shift: float  # Hz
    splitting: float  # Hz
    sigma: float  # Hz

    def csv_row(self):
        return (self.axis, self.family, self.pressure / GPa, self.shift / MHz, self.splitting / MHz, self.sigma / MHz)

    @classmethod
    def from_csv_row(cls, row):
        axis, family, p, shift, split, sigma = row
        return cls(axis, int(family), float(p) * GPa, float(shift) * MHz, float(split) * MHz, float(sigma) * MHz)


RECORD_HEADER = ("axis", "family", "P_GPa", "shift_MHz", "splitting_MHz", "sigma_MHz")


def splitting_change(m_app, m_int):
    """Change of the splitting when an applied transverse coupling adds to an intrinsic one."""
    m_app = np.asarray(m_app, dtype=float)
    m_int = np.asarray(m_int, dtype=float)
    return float(np.linalg.norm(m_app + m_int) - np.linalg.norm(m_int))


def splitting_change_first_order(m_app, m_int):
    """Limit of :func:`splitting_change` for |m_int| >> |m_app|: projection onto m_int."""
    m_int = np.asarray(m_int, dtype=float)
    return float(np.asarray(m_app, dtype=float) @ m_int / np.linalg.norm(m_int))


def _unit_design(axis, family):
    return susceptibility_design(StressTensor.uniaxial(1.0, AXES[axis]), family)


def simulate_uniaxial(scenario: UniaxialScenario, params: SusceptibilityParams = DEFAULT_PARAMS, seed=None, add_noise=True) -> list[ShiftSplitRecord]:
    """Noisy shift/splitting changes for every family and pressure; deterministic per seed.

    ``add_noise=False`` returns the exact model values (intrinsic couplings
    are still drawn from the same stream), with sigma_f kept as the
    nominal per-point uncertainty.
    """
    noise = scenario.sigma_f if add_noise else 0.0
    rng = np.random.default_rng(seed)
    intrinsic = {}
    for fam in scenario.families:
        if fam in scenario.intrinsic:
            intrinsic[fam] = np.asarray(scenario.intrinsic[fam], dtype=float)
        else:
            intrinsic[fam] = rng.normal(0.0, scenario.intrinsic_scale, size=2)
    records = []
    for fam in scenario.families:
        design = _unit_design(scenario.axis, fam)
        for p in scenario.pressures:
            mx, my, mz = p * (design @ params.vector)
            shift = mz + rng.normal(0.0, noise)
            split = splitting_change((mx, my), intrinsic[fam]) + rng.normal(0.0, noise)
            records.append(ShiftSplitRecord(scenario.axis, fam, float(p), float(shift), float(split), scenario.sigma_f))
    return records


# --- fitting ---------------------------------------------------------------------------

@dataclass
class CalibrationFit:
    """Fit result in SI units (Hz/Pa for susceptibilities, Hz for nuisances)."""

    names: tuple
    values: np.ndarray
    sigma: np.ndarray
    covariance: np.ndarray
    a1: float
    nuisance: dict  # (axis, family) -> {"offset": Hz, "mx": Hz, "my": Hz}
    chi2: float
    dof: int
    diagnostics: dict

    def __getitem__(self, name):
        return self.values[self.names.index(name)]

    def params(self, base: SusceptibilityParams = DEFAULT_PARAMS) -> SusceptibilityParams:
        fitted = dict(zip(self.names, self.values))
        fitted.setdefault("a1", self.a1)
        return base.replace(**fitted)

    def report(self):
        """JSON-ready summary in MHz/GPa and MHz."""
        scale = 1 / MHz_per_GPa
        return {
            "units": "MHz/GPa",
            "a1_fixed": None if "a1" in self.names else self.a1 * scale,
            "estimates": {n: float(v * scale) for n, v in zip(self.names, self.values)},
            "sigma": {n: float(s * scale) for n, s in zip(self.names, self.sigma)},
            "covariance": (self.covariance * scale**2).tolist(),
            "nuisance_MHz": {
                f"{axis} family {fam}": {k: v / MHz for k, v in d.items()} for (axis, fam), d in self.nuisance.items()
            },
            "chi2": self.chi2,
            "dof": self.dof,
            "diagnostics": self.diagnostics,
        }


# |v| is replaced by sqrt(|v|^2 + eps^2) (eps = 100 Hz, far below any noise
# level) so that the cost is smooth where an intrinsic coupling vanishes.
_SMOOTH = 1e-4  # MHz


def _snorm(v):
    return np.sqrt(np.sum(v * v, axis=-1) + _SMOOTH**2)


class _Problem:
    """Vectorized residuals and Jacobian in MHz/GPa units."""

    def __init__(self, records, a1, fit_a1, prior_scale=None):
        recs = sorted(records, key=lambda r: (r.axis, r.family, r.pressure, r.shift, r.splitting))
        self.groups = sorted({(r.axis, r.family) for r in recs})
        gindex = {g: i for i, g in enumerate(self.groups)}
        self.a1 = a1 / MHz_per_GPa
        self.fit_a1 = fit_a1
        self.names = FIT_NAMES + (("a1",) if fit_a1 else ())
        self.n_sus = len(self.names)
        self.P = np.array([r.pressure / GPa for r in recs])
        self.g = np.array([gindex[(r.axis, r.family)] for r in recs])
        self.shift = np.array([r.shift / MHz for r in recs])
        self.split = np.array([r.splitting / MHz for r in recs])
        self.w = 1.0 / np.array([r.sigma / MHz for r in recs])
        # unit-pressure design per record, columns (a1, a2, b, c)
        self.D = np.array([_unit_design(r.axis, r.family) for r in recs])
        # Groups whose applied transverse coupling vanishes for every parameter
        # value carry no information on m_g; their m_g is pinned to zero.
        self.free_m = np.array([np.abs(self.D[self.g == k, :2, :]).max() > 1e-12 for k in range(len(self.groups))])
        self.m_slot = -np.ones(len(self.groups), dtype=int)
        n = self.n_sus + len(self.groups)
        for k in range(len(self.groups)):
            if self.free_m[k]:
                self.m_slot[k] = n
                n += 2
        self.n_params = n
        self._free_rows = np.flatnonzero(self.free_m[self.g])
        self.n_obs = 2 * len(recs)
        self._prior_idx = self._prior_rows(None)
        # Weak zero-mean prior on m_g. Without it a group whose splitting is
        # nearly linear in P drives |m_g| to infinity along a flat valley.
        self.prior_scale = prior_scale if prior_scale else 10.0 * max(float(np.max(np.abs(self.split))), 1.0)

    def unpack(self, theta):
        sus = theta[: self.n_sus]
        a2, b, c = sus[:3]
        a1 = sus[3] if self.fit_a1 else self.a1
        pvec = np.array([a1, a2, b, c])
        offsets = theta[self.n_sus : self.n_sus + len(self.groups)]
        m = np.zeros((len(self.groups), 2))
        for k in np.flatnonzero(self.free_m):
            m[k] = theta[self.m_slot[k] : self.m_slot[k] + 2]
        return pvec, offsets, m

    def _columns(self):
        # indices into (a1, a2, b, c) for each fitted susceptibility
        cols = [1, 2, 3] + ([0] if self.fit_a1 else [])
        return cols

    def model(self, theta):
        pvec, offsets, m = self.unpack(theta)
        mapp = self.P[:, None] * (self.D @ pvec)  # (n, 3)
        mg = m[self.g]
        u = mapp[:, :2] + mg
        shift = mapp[:, 2] + offsets[self.g]
        split = _snorm(u) - _snorm(mg)
        return shift, split, u, mg

    def _prior_rows(self, theta):
        idx = np.concatenate([[s, s + 1] for s in self.m_slot[self.free_m]]) if self.free_m.any() else np.array([], int)
        return idx

    def residuals(self, theta):
        shift, split, _, _ = self.model(theta)
        prior = theta[self._prior_idx] / self.prior_scale
        return np.concatenate([(shift - self.shift) * self.w, (split - self.split) * self.w, prior])

    def data_chi2(self, theta):
        r = self.residuals(theta)[: self.n_obs]
        return float(r @ r)

    def jacobian(self, theta):
        _, _, u, mg = self.model(theta)
        n = len(self.P)
        J = np.zeros((2 * n, self.n_params))
        cols = self._columns()
        J[:n, : self.n_sus] = self.P[:, None] * self.D[:, 2, cols]
        J[np.arange(n), self.n_sus + self.g] = 1.0
        uhat = u / _snorm(u)[:, None]
        mhat = mg / _snorm(mg)[:, None]
        dsplit_dp = np.einsum("ni,nij->nj", uhat, self.D[:, :2, :]) * self.P[:, None]
        J[n:, : self.n_sus] = dsplit_dp[:, cols]
        r = self._free_rows
        slot = self.m_slot[self.g[r]]
        dm = uhat[r] - mhat[r]
        J[n + r, slot] = dm[:, 0]
        J[n + r, slot + 1] = dm[:, 1]
        J = J * np.concatenate([self.w, self.w])[:, None]
        P = np.zeros((len(self._prior_idx), self.n_params))
        P[np.arange(len(self._prior_idx)), self._prior_idx] = 1.0 / self.prior_scale
        return np.vstack([J, P])

    def canonical(self, theta):
        """Flip (b, c, m) jointly so that c >= 0."""
        theta = theta.copy()
        if theta[2] < 0:
            theta[1:3] *= -1
            for k in np.flatnonzero(self.free_m):
                theta[self.m_slot[k] : self.m_slot[k] + 2] *= -1
        return theta


def algebraic_start(problem: _Problem):
    """Closed-form starting point for the nonlinear fit (MHz/GPa units).

    Squaring splitting + |m| = |P u + m| gives, per group,
    s^2 = P^2 |u|^2 + 2 P (u . m) - 2 s |m|, which is linear in
    (|u|^2, u . m, |m|). Each |u_g|^2 is a quadratic form in (b, c), so a
    second linear solve yields (b^2, bc, c^2). a2 and the offsets follow
    from the shifts by ordinary least squares.
    """
    ng = len(problem.groups)
    # shifts: P * (D_z . p) + offset_g, linear in (a2, [a1,] offsets)
    cols = problem._columns()
    A = np.zeros((len(problem.P), len(cols) + ng))
    A[:, : len(cols)] = problem.P[:, None] * problem.D[:, 2, cols]
    A[np.arange(len(problem.P)), len(cols) + problem.g] = 1.0
    known = np.zeros(len(problem.P))
    if not problem.fit_a1:
        known = problem.P * problem.D[:, 2, 0] * problem.a1
    sol, *_ = np.linalg.lstsq(A * problem.w[:, None], (problem.shift - known) * problem.w, rcond=None)
    shift_part = dict(zip(cols, sol[: len(cols)]))
    offsets = sol[len(cols) :]

    rows, rhs, per_group = [], [], {}
    for k in np.flatnonzero(problem.free_m):
        sel = problem.g == k
        P, sp = problem.P[sel], problem.split[sel]
        M = np.column_stack([P**2, 2 * P, -2 * sp])
        (U, q, rho), *_ = np.linalg.lstsq(M, sp**2, rcond=None)
        G = problem.D[sel][0, :2, 2:4]
        rows.append([G[0, 0] ** 2 + G[1, 0] ** 2, 2 * (G[0, 0] * G[0, 1] + G[1, 0] * G[1, 1]), G[0, 1] ** 2 + G[1, 1] ** 2])
        rhs.append(max(U, 0.0))
        per_group[k] = (G, q, max(rho, 0.0))
    (bb, bc, cc), *_ = np.linalg.lstsq(np.array(rows), np.array(rhs), rcond=None)
    c = np.sqrt(max(cc, 1e-12))
    b = bc / c
    if abs(b) < np.sqrt(max(bb, 0.0)) / 3:
        b = np.copysign(np.sqrt(max(bb, 0.0)), bc if bc != 0 else 1.0)
    theta = np.zeros(problem.n_params)
    theta[0] = shift_part.get(1, 0.0)
    theta[1], theta[2] = b, c
    if problem.fit_a1:
        theta[3] = shift_part.get(0, problem.a1)
    theta[problem.n_sus : problem.n_sus + ng] = offsets
    for k, (G, q, rho) in per_group.items():
        u = G @ np.array([b, c])
        un2 = float(u @ u)
        if un2 <= 0:
            continue
        along = np.clip(q / un2, -rho / np.sqrt(un2), rho / np.sqrt(un2))
        perp_len = np.sqrt(max(rho**2 - along**2 * un2, 0.0))
        perp = np.array([-u[1], u[0]]) / np.sqrt(un2)
        sel = problem.g == k
        best = None
        for sgn in (1.0, -1.0):
            m = along * u + sgn * perp_len * perp
            pred = np.linalg.norm(problem.P[sel, None] * u + m, axis=1) - np.linalg.norm(m)
            cost = float(np.sum((pred - problem.split[sel]) ** 2))
            if best is None or cost < best[0]:
                best = (cost, m)
        theta[problem.m_slot[k] : problem.m_slot[k] + 2] = best[1]
    return theta


def profile_nuisance(problem: _Problem, theta, n_radius=24, n_angle=48):
    """Replace each free m_g by the best point of a polar grid for the current (b, c).

    The splitting cost of one group is a cheap 2-D function of m_g with a
    separate basin per side of the applied direction; gridding it before
    the joint fit avoids polishing into the wrong one.
    """
    theta = theta.copy()
    pvec, _, _ = problem.unpack(theta)
    r_max = 3.0 * max(float(np.max(np.abs(problem.split))), 0.5) + 1.0
    radii = np.concatenate([[0.0], r_max * np.geomspace(1e-3, 1.0, n_radius - 1)])
    ang = np.linspace(0.0, 2 * np.pi, n_angle, endpoint=False)
    cand = (radii[:, None, None] * np.stack([np.cos(ang), np.sin(ang)], -1)[None]).reshape(-1, 2)
    cand = np.unique(cand, axis=0)
    norm_c = np.linalg.norm(cand, axis=1)
    for k in np.flatnonzero(problem.free_m):
        sel = problem.g == k
        u = problem.D[sel][0, :2] @ pvec
        P, sp, w = problem.P[sel], problem.split[sel], problem.w[sel]
        pred = np.linalg.norm(P[None, :, None] * u + cand[:, None, :], axis=2) - norm_c[:, None]
        cost = np.sum(((pred - sp) * w) ** 2, axis=1)
        theta[problem.m_slot[k] : problem.m_slot[k] + 2] = cand[np.argmin(cost)]
    return theta


def identifiability(problem: _Problem, rng, tol=1e-8):
    """Names of fitted susceptibilities that lie in the Jacobian null space at a generic point."""
    theta = rng.normal(0.0, 3.0, size=problem.n_params)
    J = problem.jacobian(theta)[: problem.n_obs]
    J = J / np.maximum(np.linalg.norm(J, axis=0), 1e-300)
    _, s, vt = np.linalg.svd(J, full_matrices=True)
    s_full = np.zeros(vt.shape[0])
    s_full[: len(s)] = s
    null = vt[s_full <= tol * s_full.max()]
    bad = []
    for i, name in enumerate(problem.names):
        if null.size and np.linalg.norm(null[:, i]) > 1e-6:
            bad.append(name)
    return bad, null


def _polish(problem: _Problem, theta, max_iter, xtol, ftol, weaken=1e4):
    """Re-fit from ``theta`` with a prior ``weaken`` times wider.

    The working prior shifts the optimum by ~ (sigma / prior_scale)^2; the
    polished point is kept when it fits the data no worse and its nuisances
    stay within the original prior scale (no runaway along a flat valley).
    """
    scale = problem.prior_scale
    problem.prior_scale = scale * weaken
    try:
        sol = optimize.least_squares(
            problem.residuals, theta, jac=problem.jacobian, method="lm",
            xtol=xtol, ftol=ftol, gtol=ftol, max_nfev=max_iter,
        )
    except (ValueError, np.linalg.LinAlgError):
        return theta
    finally:
        problem.prior_scale = scale
    ok = (
        np.all(np.isfinite(sol.x))
        and np.max(np.abs(sol.x[problem._prior_idx]), initial=0.0) <= scale
        and problem.data_chi2(sol.x) <= problem.data_chi2(theta)
    )
    return sol.x if ok else theta


def fit_susceptibilities(
    records: Sequence[ShiftSplitRecord],
    a1: float = DEFAULT_PARAMS.a1,
    fit_a1: bool = False,
    n_starts: int = 8,
    seed=0,
    max_iter: int = 100,
    xtol: float = 1e-8,
    ftol: float = 1e-8,
    nuisance_prior: float | None = None,
) -> CalibrationFit:
    """Joint weighted least-squares fit of (a2, b, c) with intrinsic nuisances.

    Damped Gauss-Newton (MINPACK Levenberg-Marquardt) with an analytic
    Jacobian. The first start is the closed-form estimate of
    ``algebraic_start``, the remaining ``n_starts - 1`` are random; the
    lowest cost wins. A weak zero-mean Gaussian prior of width
    ``nuisance_prior`` (Hz; default ten times the largest splitting change)
    keeps the intrinsic couplings finite. The covariance is (J^T J)^-1 at
    the optimum, with residuals already weighted by their sigmas.
    """
    if not records:
        raise ValueError("no records to fit")
    problem = _Problem(records, a1, fit_a1, None if nuisance_prior is None else nuisance_prior / MHz)
    rng = np.random.default_rng(seed)
    axes = sorted({r.axis for r in records})
    for axis in axes:
        n_p = len({r.pressure for r in records if r.axis == axis})
        if n_p < 3:
            raise ValueError(f"axis {axis} has {n_p} pressures; at least 3 are needed")
    bad, _ = identifiability(problem, rng)
    if bad:
        raise UnidentifiableError(f"parameters {', '.join(bad)} are not identifiable from axes {axes}", bad)
    if len(axes) == 1:
        # Full-rank Jacobian but a discrete b <-> c exchange ([110]) remains.
        raise UnidentifiableError(f"single-axis data ({axes[0]}) cannot separate b and c", ("b", "c"))

    best = None
    runs = []
    for start in range(n_starts):
        if start == 0:
            theta0 = algebraic_start(problem)
        else:
            theta0 = np.zeros(problem.n_params)
            theta0[:3] = rng.uniform(-8.0, 8.0, size=3)
            if fit_a1:
                theta0[3] = rng.uniform(0.0, 10.0)
        try:
            sol = None
            for _ in range(2):
                theta0 = profile_nuisance(problem, theta0)
                trial = optimize.least_squares(
                    problem.residuals, theta0, jac=problem.jacobian, method="lm",
                    xtol=xtol, ftol=ftol, gtol=ftol, max_nfev=max_iter,
                )
                if sol is not None and trial.cost >= sol.cost * (1 - 1e-9):
                    break
                sol, theta0 = trial, trial.x
        except (ValueError, np.linalg.LinAlgError) as exc:
            log.debug("start failed: %s", exc)
            continue
        runs.append({"cost": float(2 * sol.cost), "status": int(sol.status), "nfev": int(sol.nfev)})
        if np.isfinite(sol.cost) and (best is None or sol.cost < best.cost):
            best = sol
    if best is None:
        raise NumericalError("every start of the fit failed")
    if best.status <= 0:
        log.info("best start stopped at max_nfev=%d; cost %.6g", max_iter, 2 * best.cost)
    theta = _polish(problem, best.x, max_iter, xtol, ftol)

    theta = problem.canonical(theta)
    J = problem.jacobian(theta)
    cov_full = np.linalg.pinv(J.T @ J)
    ns = problem.n_sus
    scale = MHz_per_GPa
    values = theta[:ns] * scale
    cov = cov_full[:ns, :ns] * scale**2
    nuisance = {}
    _, offsets, m = problem.unpack(theta)
    for k, grp in enumerate(problem.groups):
        nuisance[grp] = {"offset": offsets[k] * MHz, "mx": m[k, 0] * MHz, "my": m[k, 1] * MHz}
    chi2 = problem.data_chi2(theta)
    costs = sorted(r["cost"] for r in runs)
    diagnostics = {
        "starts": n_starts,
        "converged_starts": sum(r["status"] > 0 for r in runs),
        "best_status": int(best.status),
        "best_nfev": int(best.nfev),
        "message": best.message,
        "cost_spread": float(costs[-1] - costs[0]) if costs else 0.0,
        "pinned_nuisance_groups": [f"{a} family {f}" for (a, f), free in zip(problem.groups, problem.free_m) if not free],
    }
    return CalibrationFit(
        names=problem.names,
        values=values,
        sigma=np.sqrt(np.diag(cov)),
        covariance=cov,
        a1=a1 if not fit_a1 else values[3],
        nuisance=nuisance,
        chi2=chi2,
        dof=problem.n_obs - problem.n_params,
        diagnostics=diagnostics,
    )


@dataclass
class MonteCarloResult:
    """Per-trial estimates (MHz/GPa) of a repeated synthetic calibration."""

    names: tuple
    estimates: np.ndarray  # (n_trials, n_params), NaN for failed fits
    sigma: np.ndarray
    truth: np.ndarray
    failures: int

    def within(self, tolerances):
        """Boolean per trial: every parameter inside its tolerance box."""
        tol = np.asarray(tolerances, dtype=float)
        err = np.abs(self.estimates - self.truth)
        return np.all(err <= tol, axis=1) & np.all(np.isfinite(self.estimates), axis=1)

    def coverage(self, tolerances):
        return float(np.mean(self.within(tolerances)))


def _mc_trial(args):
    scenarios, params, seed_seq, n_starts = args
    children = seed_seq.spawn(len(scenarios) + 1)
    records = []
    for scen, child in zip(scenarios, children):
        records.extend(simulate_uniaxial(scen, params, seed=np.random.default_rng(child)))
    try:
        fit = fit_susceptibilities(records, params.a1, n_starts=n_starts, seed=np.random.default_rng(children[-1]))
    except NumericalError:
        return None
    return fit.values / MHz_per_GPa, fit.sigma / MHz_per_GPa


def monte_carlo_calibration(
    scenarios: Sequence[UniaxialScenario],
    params: SusceptibilityParams = DEFAULT_PARAMS,
    n_trials: int = 500,
    seed=0,
    n_starts: int = 8,
    workers: int | None = None,
) -> MonteCarloResult:
    """Repeat simulate-then-fit ``n_trials`` times with independent noise.

    Trial i uses the i-th child of ``SeedSequence(seed)``, so results do not
    depend on ``workers`` (process count; 1 runs in-process).
    """
    seqs = np.random.SeedSequence(seed).spawn(n_trials)
    jobs = [(tuple(scenarios), params, s, n_starts) for s in seqs]
    if workers == 1 or n_trials < 8:
        out = [_mc_trial(j) for j in jobs]
    else:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(max_workers=workers) as pool:
            out = list(pool.map(_mc_trial, jobs, chunksize=max(1, n_trials // 64)))
    est = np.full((n_trials, 3), np.nan)
    sig = np.full((n_trials, 3), np.nan)
    for i, r in enumerate(out):
        if r is not None:
            est[i], sig[i] = r[0][:3], r[1][:3]
    truth = np.array([params.a2, params.b, params.c]) / MHz_per_GPa
    return MonteCarloResult(FIT_NAMES, est, sig, truth, sum(r is None for r in out))


# --- force from an embedded NV ------------------------------------------------------------

class ForceEstimate(dict):
    """Mapping with ``force`` (N), ``sigma`` (N) and ``responsivity`` (Hz/N)."""

    @property
    def force(self):
        return self["force"]

    @property
    def sigma(self):
        return self["sigma"]


def odmr_responsivity(site: NVSite, geom: BeamGeometry, params: SusceptibilityParams = DEFAULT_PARAMS, response="intrinsic") -> float:
    """Resonance change per newton of tip force (Hz/N) for an NV in a clamped-free device."""
    per_newton = bending_stress_per_force(geom, site)
    unit = StressTensor.uniaxial(1.0, geom.axis)
    return response_coefficient(unit, params, site.family, response) * per_newton


def infer_force_from_odmr(delta_f, sigma_delta_f, site: NVSite, geom: BeamGeometry, params: SusceptibilityParams = DEFAULT_PARAMS, response="intrinsic") -> ForceEstimate:
    """Invert a measured resonance change into the tip force.

    The bending stress at the NV follows from Euler-Bernoulli theory and
    the NV's position; it is turned into a crystal-frame uniaxial stress
    along the device axis. ``response="intrinsic"`` uses the shift M_z,
    ``"plus"``/``"minus"`` the f_+/f_- branches. The uncertainty is
    propagated linearly.
    """
    resp = odmr_responsivity(site, geom, params, response)
    if resp == 0 or not np.isfinite(resp):
        raise NonInvertibleError("NV has zero force responsivity (neutral axis or free end)")
    return ForceEstimate(force=float(delta_f) / resp, sigma=abs(float(sigma_delta_f) / resp), responsivity=resp)
