"""Linear mixed models with nested random intercepts (program within speaker).

The covariance of one speaker's observations is
``sigma2_e * (I + theta_s 11' + sum_p theta_p 1_p 1_p')``. Its inverse and
determinant have closed forms (Sherman-Morrison applied twice), so the
profiled restricted likelihood only needs per-program and per-speaker
sums of the data; no n x n matrix is ever formed.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np
from scipy import optimize, stats

from .errors import EmptyLevel, NonConvergence, RankDeficient

FACTORS = ("Age", "Period", "Gender")
PERIOD_LEVELS = ("P1955", "P1975", "P1995", "P2015")
GENDER_LEVELS = ("F", "M")
LEVELS = {"Period": PERIOD_LEVELS, "Gender": GENDER_LEVELS}

ALL_TERMS = ("Age", "Period", "Gender", "Age:Period", "Age:Gender", "Period:Gender", "Age:Period:Gender")

MAX_ITER = 500
XTOL = 1e-7
FTOL = 1e-10


def _parts(term: str) -> Tuple[str, ...]:
    return tuple(term.split(":"))


def canonical_term(term: str) -> str:
    parts = set(_parts(term))
    if not parts <= set(FACTORS):
        raise ValueError(f"unknown term {term!r}")
    return ":".join(f for f in FACTORS if f in parts)


@dataclass(frozen=True)
class ModelSpec:
    """Fixed-effect terms (intercept implied) plus the random structure.

    ``random`` is ``"nested"`` (speaker and program-in-speaker intercepts),
    ``"speaker"`` (speaker intercept only) or ``"none"`` (ordinary least squares).
    """

    terms: frozenset = frozenset()
    random: str = "nested"

    def __post_init__(self):
        terms = frozenset(canonical_term(t) for t in self.terms)
        object.__setattr__(self, "terms", terms)
        if self.random not in ("nested", "speaker", "none"):
            raise ValueError(f"unknown random structure {self.random!r}")
        for t in terms:
            for sub in marginal_terms(t):
                if sub not in terms:
                    raise ValueError(f"term {t} requires its marginal term {sub}")

    @classmethod
    def maximal(cls, random="nested") -> "ModelSpec":
        return cls(frozenset(ALL_TERMS), random)

    @classmethod
    def intercept_only(cls, random="nested") -> "ModelSpec":
        return cls(frozenset(), random)

    def ordered_terms(self) -> List[str]:
        return [t for t in ALL_TERMS if t in self.terms]

    def without(self, term: str) -> "ModelSpec":
        return ModelSpec(self.terms - {canonical_term(term)}, self.random)

    def deletable(self) -> List[str]:
        """Terms not contained in any other present term."""
        return [t for t in self.ordered_terms()
                if not any(t != u and set(_parts(t)) < set(_parts(u)) for u in self.terms)]

    def formula(self, response="y") -> str:
        fixed = " + ".join(["1"] + self.ordered_terms())
        rnd = {"nested": " + (1 | Speaker/Program)", "speaker": " + (1 | Speaker)", "none": ""}[self.random]
        return f"{response} ~ {fixed}{rnd}"


def marginal_terms(term: str) -> List[str]:
    parts = _parts(canonical_term(term))
    out = []
    for r in range(1, len(parts)):
        out.extend(":".join(c) for c in itertools.combinations(parts, r))
    return out


@dataclass
class Observations:
    response: np.ndarray
    age: np.ndarray
    period: np.ndarray
    gender: np.ndarray
    speaker: np.ndarray
    program: np.ndarray

    def __post_init__(self):
        self.response = np.asarray(self.response, dtype=float)
        self.age = np.asarray(self.age, dtype=float)
        self.period = np.asarray(self.period, dtype=object).astype(str)
        self.gender = np.asarray(self.gender, dtype=object).astype(str)
        self.speaker = np.asarray(self.speaker, dtype=object).astype(str)
        self.program = np.asarray(self.program, dtype=object).astype(str)
        owner = {}
        for s, p in zip(self.speaker, self.program):
            if owner.setdefault(p, s) != s:
                raise ValueError(f"program {p!r} occurs under more than one speaker")

    def __len__(self):
        return self.response.size

    @classmethod
    def from_rows(cls, rows, response: str) -> "Observations":
        rows = [r for r in rows if np.isfinite(float(r[response]))]
        return cls(
            response=[float(r[response]) for r in rows],
            age=[float(r["age_years"]) for r in rows],
            period=[r["period"] for r in rows],
            gender=[r["gender"] for r in rows],
            speaker=[r["speaker_id"] for r in rows],
            program=[r["program_id"] for r in rows],
        )

    def subset(self, idx) -> "Observations":
        return Observations(self.response[idx], self.age[idx], self.period[idx], self.gender[idx],
                            self.speaker[idx], self.program[idx])

    def with_response(self, y) -> "Observations":
        return Observations(np.asarray(y, dtype=float), self.age, self.period, self.gender,
                            self.speaker, self.program)


@dataclass
class Design:
    X: np.ndarray
    columns: List[str]
    y: np.ndarray
    speaker_idx: np.ndarray
    program_idx: np.ndarray
    program_speaker: np.ndarray
    age_center: float
    spec: ModelSpec
    order: np.ndarray

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def p(self) -> int:
        return self.X.shape[1]


def _term_columns(term, age, period, gender):
    """Dummy (treatment) columns of one term, references P1955 and F."""
    blocks = []
    for f in _parts(term):
        if f == "Age":
            blocks.append([("Age", age)])
        else:
            vals = period if f == "Period" else gender
            blocks.append([(f"{f}[{lv}]", (vals == lv).astype(float)) for lv in LEVELS[f][1:]])
    cols = []
    for combo in itertools.product(*blocks):
        name = ":".join(c[0] for c in combo)
        col = np.ones_like(age)
        for _, v in combo:
            col = col * v
        cols.append((name, col))
    return cols


def build_design(obs: Observations, spec: ModelSpec, age_center: Optional[float] = None) -> Design:
    """Fixed-effect matrix (age centred at the sample mean) and grouping indices.

    Rows are put in a canonical order (speaker, program, response, age) so
    that the fit does not depend on the order observations arrive in.
    """
    used = {f for t in spec.terms for f in _parts(t)}
    for f in ("Period", "Gender"):
        if f in used:
            vals = obs.period if f == "Period" else obs.gender
            missing = [lv for lv in LEVELS[f] if not np.any(vals == lv)]
            unknown = sorted(set(vals) - set(LEVELS[f]))
            if missing or unknown:
                raise EmptyLevel(f"factor {f}: levels {missing} absent" + (f", unknown {unknown}" if unknown else ""))
    spk_levels, spk = np.unique(obs.speaker, return_inverse=True)
    prg_levels, prg = np.unique(obs.program, return_inverse=True)
    order = np.lexsort((obs.age, obs.response, prg, spk))
    spk, prg = spk[order], prg[order]
    age = obs.age[order]
    center = float(np.mean(age)) if age_center is None else float(age_center)
    agec = age - center
    cols = [("(Intercept)", np.ones(len(obs)))]
    for t in spec.ordered_terms():
        cols.extend(_term_columns(t, agec, obs.period[order], obs.gender[order]))
    X = np.column_stack([c[1] for c in cols])
    if np.linalg.matrix_rank(X) < X.shape[1]:
        raise RankDeficient(f"fixed-effect matrix of rank {np.linalg.matrix_rank(X)} < {X.shape[1]} columns")
    program_speaker = np.zeros(prg_levels.size, dtype=int)
    program_speaker[prg] = spk
    return Design(X, [c[0] for c in cols], obs.response[order], spk, prg, program_speaker,
                  center, spec, order)


@dataclass
class FitResult:
    spec: ModelSpec
    columns: List[str]
    coefficients: np.ndarray
    std_errors: np.ndarray
    sigma2_speaker: float
    sigma2_program: float
    sigma2_residual: float
    loglik_reml: float
    loglik_ml: float
    ml_variances: Tuple[float, float, float]
    fitted: np.ndarray
    r2_marginal: float
    r2_conditional: float
    sigma2_fixed: float
    age_center: float
    n_obs: int
    n_speakers: int
    n_programs: int
    boundary: Dict[str, bool] = field(default_factory=dict)
    iterations: int = 0

    def coef(self, name: str) -> float:
        return float(self.coefficients[self.columns.index(name)])

    def predict(self, age, period, gender) -> np.ndarray:
        """Population-level prediction for arbitrary covariates."""
        age = np.atleast_1d(np.asarray(age, dtype=float))
        n = age.size
        period = np.broadcast_to(np.asarray(period, dtype=object), (n,)).astype(str)
        gender = np.broadcast_to(np.asarray(gender, dtype=object), (n,)).astype(str)
        cols = [np.ones(n)]
        for t in self.spec.ordered_terms():
            cols.extend(c[1] for c in _term_columns(t, age - self.age_center, period, gender))
        return np.column_stack(cols) @ self.coefficients

    def to_dict(self) -> dict:
        return {
            "formula": self.spec.formula(),
            "terms": self.spec.ordered_terms(),
            "random": self.spec.random,
            "age_center": self.age_center,
            "coefficients": {
                c: {"estimate": float(b), "std_error": float(se)}
                for c, b, se in zip(self.columns, self.coefficients, self.std_errors)
            },
            "variance_components": {
                "speaker": self.sigma2_speaker,
                "program_in_speaker": self.sigma2_program,
                "residual": self.sigma2_residual,
            },
            "boundary": self.boundary,
            "loglik": {"reml": self.loglik_reml, "ml": self.loglik_ml},
            "r_squared": {"marginal": self.r2_marginal, "conditional": self.r2_conditional},
            "sigma2_fixed": self.sigma2_fixed,
            "n_obs": self.n_obs,
            "n_speakers": self.n_speakers,
            "n_programs": self.n_programs,
        }


class _Profile:
    """Profiled (restricted) log-likelihood as a function of variance ratios."""

    def __init__(self, d: Design):
        self.d = d
        self.n, self.p = d.X.shape
        Z = np.column_stack([d.X, d.y])
        self.ZtZ = Z.T @ Z
        n_prog = d.program_speaker.size
        self.n_spk = int(d.speaker_idx.max()) + 1 if self.n else 0
        self.S = np.zeros((n_prog, Z.shape[1]))
        np.add.at(self.S, d.program_idx, Z)
        self.n_p = np.bincount(d.program_idx, minlength=n_prog).astype(float)
        self.spk_of_prog = d.program_speaker

    def pieces(self, theta_s, theta_p):
        c = 1.0 / (1.0 + theta_p * self.n_p)
        w = theta_p * c
        T = np.zeros((self.n_spk, self.S.shape[1]))
        np.add.at(T, self.spk_of_prog, c[:, None] * self.S)
        m = np.bincount(self.spk_of_prog, weights=self.n_p * c, minlength=self.n_spk)
        g = theta_s / (1.0 + theta_s * m)
        M = self.ZtZ - (self.S * w[:, None]).T @ self.S - (T * g[:, None]).T @ T
        logdet_h = np.sum(np.log1p(theta_p * self.n_p)) + np.sum(np.log1p(theta_s * m))
        p = self.p
        XtHX, XtHy, yHy = M[:p, :p], M[:p, p], M[p, p]
        L = np.linalg.cholesky(XtHX)
        beta = np.linalg.solve(L.T, np.linalg.solve(L, XtHy))
        q = max(yHy - XtHy @ beta, 0.0)
        logdet_x = 2.0 * np.sum(np.log(np.diag(L)))
        return beta, q, logdet_h, logdet_x, XtHX

    def gradient(self, theta_s, theta_p, reml=True):
        """Derivatives of the deviance with respect to ``(theta_s, theta_p)``.

        Uses ``d(-2 l)/d theta = tr(P dH) - (k/q) y'P dH P y`` (REML, with
        ``k = n - p``) or ``tr(H^-1 dH) - (n/q) y'P dH P y`` (ML), where
        every ``dH`` is a sum of rank-one group indicator blocks.
        """
        p = self.p
        c = 1.0 / (1.0 + theta_p * self.n_p)
        T = np.zeros((self.n_spk, self.S.shape[1]))
        np.add.at(T, self.spk_of_prog, c[:, None] * self.S)
        m = np.bincount(self.spk_of_prog, weights=self.n_p * c, minlength=self.n_spk)
        g = theta_s / (1.0 + theta_s * m)
        beta, q, _, _, XtHX = self.pieces(theta_s, theta_p)
        r = np.append(-beta, 1.0)
        Ainv = np.linalg.inv(XtHX)
        scale = (self.n - p if reml else self.n) / q
        out = []
        for rows, diag in (
            (T / (1.0 + theta_s * m)[:, None], m / (1.0 + theta_s * m)),
            (c[:, None] * self.S - (g[self.spk_of_prog] * c * self.n_p)[:, None] * T[self.spk_of_prog],
             c * self.n_p - g[self.spk_of_prog] * (c * self.n_p) ** 2),
        ):
            resid = rows @ r
            tr = diag.sum()
            if reml:
                v = rows[:, :p]
                tr -= np.einsum("ij,jk,ik->", v, Ainv, v)
            out.append(tr - scale * np.sum(resid ** 2))
        return np.array(out)

    def deviance(self, theta_s, theta_p, reml=True):
        _, q, ldh, ldx, _ = self.pieces(theta_s, theta_p)
        n, p = self.n, self.p
        if q <= 0:
            return -np.inf
        if reml:
            k = n - p
            return k * math.log(2 * math.pi * q / k) + ldh + ldx + k
        return n * math.log(2 * math.pi * q / n) + ldh + n


def _free_params(random):
    return {"nested": 2, "speaker": 1, "none": 0}[random]


def _thetas(t, random):
    if random == "nested":
        return t[0] ** 2, t[1] ** 2
    if random == "speaker":
        return t[0] ** 2, 0.0
    return 0.0, 0.0


def _optimize(prof: _Profile, random: str, reml: bool):
    k = _free_params(random)
    if k == 0:
        return np.zeros(0), 0

    def f(t):
        return prof.deviance(*_thetas(np.abs(t), random), reml=reml)

    grid = [0.0, 0.05, 0.2, 0.6, 1.5, 4.0]
    starts = list(itertools.product(grid, repeat=k))
    vals = [f(np.array(s)) for s in starts]
    i0 = int(np.argmin(vals))
    t0 = np.where(np.array(starts[i0]) == 0.0, 0.02, np.array(starts[i0], dtype=float))
    res = optimize.minimize(f, t0, method="Nelder-Mead",
                            options={"maxiter": MAX_ITER, "xatol": XTOL, "fatol": FTOL * max(1.0, abs(vals[i0]))})
    if not res.success and res.nit >= MAX_ITER:
        # a collapsed simplex whose values differ only by rounding noise has converged;
        # large ratios make the deviance noisy beyond the value tolerance
        simplex = res.final_simplex[0]
        if np.max(np.abs(simplex - simplex[0])) > XTOL:
            raise NonConvergence(f"variance-ratio optimisation did not converge in {MAX_ITER} iterations")
    t = np.abs(res.x)
    best = f(t)
    # components may sit exactly on the zero boundary
    for j in range(k):
        t_b = t.copy()
        t_b[j] = 0.0
        fb = f(t_b)
        if fb <= best:
            t, best = t_b, fb
    return _polish(prof, random, reml, t), int(res.nit)


def _polish(prof: _Profile, random: str, reml: bool, t, steps=30):
    """Newton refinement on the analytic score of the interior ratios.

    The simplex search stalls where the deviance is flat to rounding,
    roughly the square root of machine precision in the ratios; solving
    the score equation instead reaches full precision.
    """
    theta = np.array(_thetas(t, random))
    free = np.flatnonzero(theta > 1e-12)
    if random == "speaker":
        free = free[free == 0]
    if free.size == 0:
        return t

    def score(th):
        return prof.gradient(*th, reml=reml)[free]

    gcur = score(theta)
    for _ in range(steps):
        J = np.zeros((free.size, free.size))
        for a, j in enumerate(free):
            h = 1e-6 * max(theta[j], 1e-3)
            e = np.zeros(2)
            e[j] = h
            J[:, a] = (score(theta + e) - score(theta - e)) / (2 * h)
        try:
            step = np.linalg.solve(J, gcur)
        except np.linalg.LinAlgError:
            break
        cand = theta.copy()
        cand[free] = theta[free] - step
        if np.any(cand[free] <= 0):
            break
        gnew = score(cand)
        if not np.linalg.norm(gnew) < np.linalg.norm(gcur):
            break
        theta, gcur = cand, gnew
        if np.all(np.abs(step) <= 1e-14 * np.maximum(theta[free], 1e-300)):
            break
    return np.sqrt(theta[: _free_params(random)])


def fit(obs: Observations, spec: ModelSpec, design: Optional[Design] = None) -> FitResult:
    """REML fit with the ML optimum also recorded for likelihood-ratio tests."""
    d = design or build_design(obs, spec)
    if d.spec.random != "none" and np.unique(d.speaker_idx).size < 2:
        raise ValueError("at least two speakers are required")
    prof = _Profile(d)
    n, p = d.X.shape
    _, q0, _, _, _ = prof.pieces(0.0, 0.0)
    exact = q0 <= 1e-24 * max(1.0, float(d.y @ d.y))
    if exact:
        # the fixed part reproduces the data; every variance component is zero
        t, nit = np.zeros(_free_params(spec.random)), 0
    else:
        t, nit = _optimize(prof, spec.random, reml=True)
    ts, tp = _thetas(t, spec.random)
    beta, q, ldh, ldx, XtHX = prof.pieces(ts, tp)
    s2e = q / (n - p)
    dev_r = prof.deviance(ts, tp, reml=True) if q > 0 else -np.inf
    t_ml = t if exact else _optimize(prof, spec.random, reml=False)[0]
    ts_ml, tp_ml = _thetas(t_ml, spec.random)
    _, q_ml, _, _, _ = prof.pieces(ts_ml, tp_ml)
    dev_ml = prof.deviance(ts_ml, tp_ml, reml=False) if q_ml > 0 else -np.inf
    s2e_ml = q_ml / n
    cov = s2e * np.linalg.inv(XtHX)
    fitted = np.empty(n)
    fitted[d.order] = d.X @ beta
    s2s, s2p = ts * s2e, tp * s2e
    r2m, r2c, s2f = r_squared_components(d.X @ beta, s2s, s2p, s2e)
    return FitResult(
        spec=spec, columns=list(d.columns), coefficients=beta, std_errors=np.sqrt(np.diag(cov)),
        sigma2_speaker=float(s2s), sigma2_program=float(s2p), sigma2_residual=float(s2e),
        loglik_reml=float(-0.5 * dev_r), loglik_ml=float(-0.5 * dev_ml),
        ml_variances=(float(ts_ml * s2e_ml), float(tp_ml * s2e_ml), float(s2e_ml)),
        fitted=fitted, r2_marginal=r2m, r2_conditional=r2c, sigma2_fixed=s2f,
        age_center=d.age_center, n_obs=n, n_speakers=int(np.unique(d.speaker_idx).size),
        n_programs=int(d.program_speaker.size),
        boundary={"speaker": bool(spec.random != "none" and ts == 0.0),
                  "program_in_speaker": bool(spec.random == "nested" and tp == 0.0)},
        iterations=nit,
    )


fit_reml = fit


def r_squared_components(fixed_pred, s2_speaker, s2_program, s2_residual):
    """Marginal and conditional R2 from variance components.

    The fixed-effect variance is the population variance of the fixed
    predictions over the observations.
    """
    s2f = float(np.var(np.asarray(fixed_pred, dtype=float))) if np.size(fixed_pred) > 1 else float(fixed_pred)
    return r_squared(s2f, s2_speaker, s2_program, s2_residual) + (s2f,)


def r_squared(s2_fixed, s2_speaker, s2_program, s2_residual):
    total = s2_fixed + s2_speaker + s2_program + s2_residual
    if total <= 0:
        return 0.0, 0.0
    return float(s2_fixed / total), float((s2_fixed + s2_speaker + s2_program) / total)


@dataclass(frozen=True)
class LrtStep:
    term: str
    chi2: float
    df: int
    p_value: float
    dropped: bool

    def to_dict(self):
        return {"term": self.term, "chi2": self.chi2, "df": self.df, "p_value": self.p_value,
                "dropped": self.dropped}


def likelihood_ratio(full: FitResult, reduced: FitResult) -> Tuple[float, int, float]:
    """ML likelihood-ratio chi-square between nested fits."""
    stat = max(2.0 * (full.loglik_ml - reduced.loglik_ml), 0.0)
    df = len(full.columns) - len(reduced.columns)
    return stat, df, float(stats.chi2.sf(stat, df))


@dataclass
class Simplification:
    spec: ModelSpec
    fit: FitResult
    rounds: List[List[LrtStep]]

    @property
    def dropped(self) -> List[str]:
        return [s.term for r in self.rounds for s in r if s.dropped]

    def audit(self) -> List[dict]:
        return [{"round": i + 1, "tests": [s.to_dict() for s in r]} for i, r in enumerate(self.rounds)]


def simplify(obs: Observations, spec: ModelSpec = None, alpha: float = 0.05) -> Simplification:
    """Backward elimination to a minimal adequate model.

    Each round tests every deletable term (one not contained in a present
    interaction) by an ML likelihood-ratio test against the model without
    it. Among terms with ``p > alpha`` the highest-order one is dropped,
    ties broken by the largest p-value. The final model is refit by REML.
    """
    spec = spec or ModelSpec.maximal()
    current = fit(obs, spec)
    rounds: List[List[LrtStep]] = []
    while True:
        tests = []
        for term in current.spec.deletable():
            reduced = fit(obs, current.spec.without(term))
            chi2, df, pv = likelihood_ratio(current, reduced)
            tests.append((term, chi2, df, pv, reduced))
        removable = [t for t in tests if t[3] > alpha]
        if not removable:
            if tests and rounds:
                rounds.append([LrtStep(t[0], t[1], t[2], t[3], False) for t in tests])
            break
        drop = max(removable, key=lambda t: (len(_parts(t[0])), t[3]))
        rounds.append([LrtStep(t[0], t[1], t[2], t[3], t[0] == drop[0]) for t in tests])
        current = drop[4]
    return Simplification(current.spec, current, rounds)


def effect_curves(fit_res: FitResult, ages=range(20, 91)):
    """Population predictions for the age x gender and age x period x gender figures.

    The age x gender curve averages the prediction over the four periods
    with equal weights.
    """
    ages = np.asarray(list(ages), dtype=float)
    fig1, fig2 = [], []
    for g in GENDER_LEVELS:
        per = {pl: fit_res.predict(ages, pl, g) for pl in PERIOD_LEVELS}
        avg = np.mean([per[pl] for pl in PERIOD_LEVELS], axis=0)
        fig1.extend({"age": int(a), "gender": g, "fitted_st": float(v)} for a, v in zip(ages, avg))
        for pl in PERIOD_LEVELS:
            fig2.extend({"age": int(a), "period": pl, "gender": g, "fitted_st": float(v)}
                        for a, v in zip(ages, per[pl]))
    return fig1, fig2
