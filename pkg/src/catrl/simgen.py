"""Semi-synthetic two-stage scenario generator with a counterfactual oracle.

Builds right-censored two-stage treatment trajectories from synthetic
clinical covariates. The generator knows the true propensities, optimal
rules, stage-time laws and censoring law; fitted models only ever see the
observed columns (T, R_1, R_2, indicators). The retained OracleHandle is
consumed exclusively by the evaluation harness.

Covariates are drawn in raw clinical units so that the decision thresholds
(Creatinine 1.5 mg/dL, Hemoglobin 12 g/dL, Glucose 140 mg/dL) land inside
the bulk of the distribution.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .core import CovariateSchema, Dataset, SchemaSpec
from .rng import make_rng

COVARIATE_NAMES = (
    "Age", "Creatinine", "Hemoglobin", "Potassium", "Sodium",
    "Glucose", "PlateletCount", "Hematocrit", "WBC",
)
AGE, CREAT, HEMO, POTAS, SODIUM, GLUCOSE, PLATELET, HEMATOCRIT, WBC = range(9)

CENSOR_KINDS = ("exponential", "conditional", "uniform", "none")

# Exponent guard: keeps stage times strictly positive and finite in float64.
_EXP_LO, _EXP_HI = -700.0, 700.0


class ConfigError(ValueError):
    """Scenario configuration fails validation."""


class CalibrationError(RuntimeError):
    """Censoring calibration could not bracket or reach the target rate."""


@dataclass
class ScenarioConfig:
    n_subjects: int
    arity: int = 2
    propensity_mode: str = "true"
    censoring_kind: str = "exponential"
    target_censor_rate: float = 0.62
    noise_rate: float = 2.0
    seed: int = 0
    tau: float | str = "auto"
    # Cap on the stage-1-time carryover term in the stage-2 exponent. The raw
    # carryover 0.2*T_1 has a polynomial tail that makes E[T_2] diverge with
    # raw-unit covariates; the cap keeps population means finite while leaving
    # the bulk of draws (carryover < cap) untouched.
    stage2_growth_cap: float = 8.0

    def validate(self) -> None:
        if self.n_subjects < 1:
            raise ConfigError("n_subjects must be >= 1")
        if self.arity not in (2, 3):
            raise ConfigError("arity must be 2 or 3")
        if self.propensity_mode not in ("true", "misspecified"):
            raise ConfigError("propensity_mode must be 'true' or 'misspecified'")
        if self.censoring_kind not in CENSOR_KINDS:
            raise ConfigError(f"censoring_kind must be one of {CENSOR_KINDS}")
        if not 0.0 <= self.target_censor_rate < 1.0:
            raise ConfigError("target_censor_rate must be in [0, 1)")
        if self.noise_rate <= 0:
            raise ConfigError("noise_rate must be > 0")
        if self.tau != "auto":
            if not isinstance(self.tau, (int, float)) or self.tau <= 0:
                raise ConfigError("tau must be 'auto' or a positive number")
        if self.stage2_growth_cap <= 0:
            raise ConfigError("stage2_growth_cap must be > 0")

    @classmethod
    def from_dict(cls, doc: dict) -> "ScenarioConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(doc) - known
        if unknown:
            raise ConfigError(f"unknown scenario fields: {sorted(unknown)}")
        if "n_subjects" not in doc:
            raise ConfigError("n_subjects is required")
        cfg = cls(**doc)
        cfg.validate()
        return cfg

    def to_dict(self) -> dict:
        return {
            "n_subjects": self.n_subjects,
            "arity": self.arity,
            "propensity_mode": self.propensity_mode,
            "censoring_kind": self.censoring_kind,
            "target_censor_rate": self.target_censor_rate,
            "noise_rate": self.noise_rate,
            "seed": self.seed,
            "tau": self.tau,
            "stage2_growth_cap": self.stage2_growth_cap,
        }


@dataclass
class CensoringParams:
    kind: str
    c0: float = 1.0
    a: float = 0.0
    b: float = 1.0

    def __post_init__(self):
        if self.kind not in CENSOR_KINDS:
            raise ConfigError(f"bad censoring kind {self.kind!r}")
        if self.kind in ("exponential", "conditional") and self.c0 <= 0:
            raise ConfigError("c0 must be > 0")
        if self.kind == "uniform" and not self.a < self.b:
            raise ConfigError("uniform bounds require a < b")


# ---- covariate sampler ----------------------------------------------------


def sample_covariates(n: int, rng: np.random.Generator):
    """Draw stage-1 and stage-2 covariate blocks (n x 9 each).

    Independent draws with plausible clinical ranges; stage 2 redraws every
    measurement (values taken at the later interval). Deterministic given
    the generator state.
    """
    if n < 1:
        raise ConfigError("n must be >= 1")

    def block():
        x = np.empty((n, 9))
        x[:, AGE] = rng.uniform(40.0, 90.0, n)
        x[:, CREAT] = rng.lognormal(np.log(1.1), 0.4, n)
        x[:, HEMO] = np.clip(rng.normal(12.5, 2.0, n), 6.0, 18.0)
        x[:, POTAS] = rng.normal(4.2, 0.5, n)
        x[:, SODIUM] = rng.normal(139.0, 4.0, n)
        x[:, GLUCOSE] = rng.lognormal(np.log(120.0), 0.3, n)
        x[:, PLATELET] = np.clip(rng.normal(230.0, 60.0, n), 1.0, None)
        x[:, HEMATOCRIT] = rng.normal(38.0, 5.0, n)
        x[:, WBC] = rng.lognormal(np.log(8.0), 0.35, n)
        return x

    return block(), block()


# ---- treatment mechanism ---------------------------------------------------


def _softmax_rows(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def stage1_propensity(x, arity: int, mode: str = "true") -> np.ndarray:
    """True assignment probabilities at stage 1 (reference arm weight 1).

    `mode` is accepted for interface symmetry but does not alter generation;
    misspecification only restricts what the fitting side may look at.
    """
    x = np.atleast_2d(np.asarray(x, dtype=float))
    zeros = np.zeros(x.shape[0])
    if arity == 2:
        log_w = np.stack([zeros, 0.2 * x[:, CREAT] + 0.2 * x[:, HEMO]], axis=1)
    elif arity == 3:
        log_w = np.stack([
            zeros,
            0.2 * x[:, CREAT] + 0.1 * x[:, POTAS],
            0.2 * x[:, HEMO] - 0.02 * x[:, AGE],
        ], axis=1)
    else:
        raise ConfigError("arity must be 2 or 3")
    return _softmax_rows(log_w)


def stage2_propensity_values(glucose, t1, sodium, platelet, arity: int) -> np.ndarray:
    glucose = np.atleast_1d(np.asarray(glucose, dtype=float))
    t1 = np.atleast_1d(np.asarray(t1, dtype=float))
    zeros = np.zeros(glucose.shape[0])
    if arity == 2:
        log_w = np.stack([zeros, 0.002 * glucose + 0.005 * t1], axis=1)
    elif arity == 3:
        sodium = np.atleast_1d(np.asarray(sodium, dtype=float))
        platelet = np.atleast_1d(np.asarray(platelet, dtype=float))
        log_w = np.stack([
            zeros,
            0.002 * glucose + 0.002 * sodium,
            0.005 * platelet + 0.005 * t1,
        ], axis=1)
    else:
        raise ConfigError("arity must be 2 or 3")
    return _softmax_rows(log_w)


def stage2_propensity(h2, arity: int, mode: str = "true") -> np.ndarray:
    """Assignment probabilities at stage 2 from a flattened history row.

    Expects the standard layout [X_1 (9), A_1, R_1, X_2 (9)]; R_1 equals the
    realised stage-1 time for stage-2 entrants.
    """
    h2 = np.atleast_2d(np.asarray(h2, dtype=float))
    if h2.shape[1] != 20:
        raise ConfigError("stage-2 history must have layout [X1(9), A1, R1, X2(9)]")
    x2 = h2[:, 11:]
    return stage2_propensity_values(
        x2[:, GLUCOSE], h2[:, 10], x2[:, SODIUM], x2[:, PLATELET], arity)


def g1_opt(x, arity: int) -> np.ndarray:
    x = np.atleast_2d(np.asarray(x, dtype=float))
    hi_cr = (x[:, CREAT] > 1.5).astype(np.int64)
    if arity == 2:
        return hi_cr * (x[:, HEMO] <= 12.0)
    return hi_cr * (1 + (x[:, HEMO] <= 10.0))


def g2_opt(glucose, t1, arity: int) -> np.ndarray:
    """Optimal stage-2 arm. The binary form I(G>140)+I(T1<3) ranges over
    {0,1,2}; it is clamped to 1 (logical-or reading) to stay a valid code."""
    glucose = np.atleast_1d(np.asarray(glucose, dtype=float))
    t1 = np.atleast_1d(np.asarray(t1, dtype=float))
    hi_glu = (glucose > 140.0).astype(np.int64)
    if arity == 2:
        return np.minimum(hi_glu + (t1 < 3.0), 1)
    return hi_glu * ((t1 > 0.5).astype(np.int64) + (t1 > 3.0))


# ---- stage-time laws --------------------------------------------------------


def stage1_time(x1, a1, eps, arity: int) -> np.ndarray:
    x1 = np.atleast_2d(np.asarray(x1, dtype=float))
    a1 = np.atleast_1d(np.asarray(a1))
    gap = np.asarray(a1 - g1_opt(x1, arity), dtype=float)
    expo = 1.5 + 0.3 * x1[:, POTAS] - np.abs(1.5 * x1[:, CREAT] - 2.0) * gap ** 2
    return np.exp(np.clip(expo + np.atleast_1d(eps), _EXP_LO, _EXP_HI))


def stage2_time(glucose2, t1, a2, eps, arity: int, growth_cap: float = 8.0) -> np.ndarray:
    glucose2 = np.atleast_1d(np.asarray(glucose2, dtype=float))
    t1 = np.atleast_1d(np.asarray(t1, dtype=float))
    a2 = np.atleast_1d(np.asarray(a2))
    gap = np.asarray(a2 - g2_opt(glucose2, t1, arity), dtype=float)
    expo = (1.18 + np.minimum(0.2 * t1, growth_cap)
            - np.abs(0.5 * glucose2 + 2.0) * gap ** 2)
    return np.exp(np.clip(expo + np.atleast_1d(eps), _EXP_LO, _EXP_HI))


def gen_stage_times(x1, x2, a1, a2, noise_rate: float, rng: np.random.Generator,
                    growth_cap: float = 8.0, arity: int = 2):
    """Draw (T_1, T_2) for given arms, with fresh Exp(noise_rate) noise."""
    if noise_rate <= 0:
        raise ConfigError("noise_rate must be > 0")
    x1 = np.atleast_2d(np.asarray(x1, dtype=float))
    x2 = np.atleast_2d(np.asarray(x2, dtype=float))
    n = x1.shape[0]
    eps1 = rng.exponential(1.0 / noise_rate, n)
    eps2 = rng.exponential(1.0 / noise_rate, n)
    t1 = stage1_time(x1, a1, eps1, arity)
    t2 = stage2_time(x2[:, GLUCOSE], t1, a2, eps2, arity, growth_cap)
    return t1, t2


# ---- censoring --------------------------------------------------------------


def _censoring_from_uniforms(params: CensoringParams, x1, u: np.ndarray) -> np.ndarray:
    """Map shared U(0,1) draws to censoring times; monotone in the scale
    parameter, which makes calibration a clean bisection."""
    if params.kind == "none":
        return np.full(u.shape, np.inf)
    base = -np.log(np.clip(u, 1e-300, None))   # Exp(1) via inverse CDF
    if params.kind == "exponential":
        return params.c0 * base
    if params.kind == "conditional":
        x1 = np.atleast_2d(np.asarray(x1, dtype=float))
        factor = np.exp(0.3 * x1[:, CREAT] + 0.2 * np.abs(x1[:, POTAS] - 4.0))
        return params.c0 * base * factor
    return params.a + (params.b - params.a) * u


def sample_censoring(params: CensoringParams, x1, rng: np.random.Generator) -> np.ndarray:
    x1 = np.atleast_2d(np.asarray(x1, dtype=float))
    u = rng.random(x1.shape[0])
    return _censoring_from_uniforms(params, x1, u)


def calibrate_censoring(kind: str, target_rate: float, tunob, x1=None,
                        u=None, rng: np.random.Generator | None = None,
                        tol: float = 0.005, max_iter: int = 200) -> CensoringParams:
    """Bisect the censoring scale until the pilot censor rate hits the target.

    `tunob` is the pilot's uncensored total time T_1 + T_2; a subject is
    censored exactly when C < T_1 + T_2. Shared uniform draws make the rate
    monotone in the scale parameter. Raises CalibrationError when the target
    cannot be bracketed or reached within `max_iter` bisection steps.
    """
    if not 0.0 <= target_rate < 1.0:
        raise ConfigError("target_rate must be in [0, 1)")
    if kind == "none" or target_rate == 0.0:
        return CensoringParams(kind="none")
    if kind not in CENSOR_KINDS:
        raise ConfigError(f"censoring kind must be one of {CENSOR_KINDS}")
    tunob = np.asarray(tunob, dtype=float)
    if u is None:
        u = (rng or make_rng("calibration-pilot")).random(tunob.shape[0])

    def make(scale: float) -> CensoringParams:
        if kind == "uniform":
            return CensoringParams(kind=kind, a=0.0, b=scale)
        return CensoringParams(kind=kind, c0=scale)

    def rate(scale: float) -> float:
        c = _censoring_from_uniforms(make(scale), x1, u)
        return float(np.mean(c < tunob))

    lo = hi = max(float(np.median(tunob)), 1e-9)
    for _ in range(max_iter):
        if rate(lo) >= target_rate:
            break
        lo /= 4.0
    else:
        raise CalibrationError("could not bracket target rate from below")
    for _ in range(max_iter):
        if rate(hi) <= target_rate:
            break
        hi *= 4.0
    else:
        raise CalibrationError("could not bracket target rate from above")

    best_scale, best_gap = lo, abs(rate(lo) - target_rate)
    for _ in range(max_iter):
        mid = np.sqrt(lo * hi)   # log-scale bisection
        r = rate(mid)
        gap = abs(r - target_rate)
        if gap < best_gap:
            best_scale, best_gap = mid, gap
        if gap <= tol:
            return make(mid)
        if r > target_rate:
            lo = mid
        else:
            hi = mid
    if best_gap <= 0.02:
        return make(best_scale)
    raise CalibrationError(
        f"calibration stalled at rate gap {best_gap:.4f} for kind={kind}")


# ---- observed-data bookkeeping ----------------------------------------------


def assemble_observed(t1, t2, c):
    """Derive (eta, T, R_1, R_2, delta_1, delta_2) from latent times.

    eta = I(T_1 < C); T^unob = T_1 + eta*T_2; T = min(T^unob, C);
    R_1 = T*I(T<T_1) + T_1*I(T>=T_1); R_2 = (T-T_1)*I(T>=T_1) when eta=1,
    NaN otherwise. delta_1 = eta (a tie T_1 = C counts as censored);
    delta_2 = I(T^unob <= C) for stage-2 entrants.
    """
    t1 = np.atleast_1d(np.asarray(t1, dtype=float))
    t2 = np.atleast_1d(np.asarray(t2, dtype=float))
    c = np.atleast_1d(np.asarray(c, dtype=float))
    eta = (t1 < c).astype(np.int64)
    tunob = t1 + eta * t2
    t = np.minimum(tunob, c)
    r1 = np.where(t < t1, t, t1)
    r2 = np.where(eta == 1, (t - t1) * (t >= t1), np.nan)
    delta1 = eta.copy()
    delta2 = np.where(eta == 1, (tunob <= c).astype(np.int64), -1)
    return eta, t, r1, r2, delta1, delta2


# ---- oracle -----------------------------------------------------------------

MANIFEST_VERSION = 1


@dataclass
class OracleHandle:
    """True generative functions and latents, for evaluation only.

    Fitting code must never consult this object; the evaluation harness uses
    it to draw fresh counterfactual subjects and to score decisions against
    the true optimal rules.
    """

    config: ScenarioConfig
    censoring: CensoringParams
    tau: float
    latent_t1: np.ndarray = field(repr=False)
    latent_t2: np.ndarray = field(repr=False)
    latent_c: np.ndarray = field(repr=False)

    @property
    def arity(self) -> int:
        return self.config.arity

    def sample_covariates(self, n: int, rng: np.random.Generator):
        return sample_covariates(n, rng)

    def noise(self, n: int, rng: np.random.Generator) -> np.ndarray:
        return rng.exponential(1.0 / self.config.noise_rate, n)

    def g1(self, x1) -> np.ndarray:
        return g1_opt(x1, self.arity)

    def g2(self, glucose2, t1) -> np.ndarray:
        return g2_opt(glucose2, t1, self.arity)

    def time1(self, x1, a1, eps) -> np.ndarray:
        return stage1_time(x1, a1, eps, self.arity)

    def time2(self, glucose2, t1, a2, eps) -> np.ndarray:
        return stage2_time(glucose2, t1, a2, eps, self.arity,
                           self.config.stage2_growth_cap)

    def propensity1(self, x1) -> np.ndarray:
        return stage1_propensity(x1, self.arity)

    def propensity2(self, glucose2, t1, sodium2, platelet2) -> np.ndarray:
        return stage2_propensity_values(glucose2, t1, sodium2, platelet2, self.arity)

    def to_manifest(self) -> dict:
        return {
            "manifest_version": MANIFEST_VERSION,
            "scenario": self.config.to_dict(),
            "censoring_params": {
                "kind": self.censoring.kind, "c0": self.censoring.c0,
                "a": self.censoring.a, "b": self.censoring.b,
            },
            "tau": self.tau,
            "latents": {
                "t1": [float(v) for v in self.latent_t1],
                "t2": [float(v) for v in self.latent_t2],
                "c": [None if np.isinf(v) else float(v) for v in self.latent_c],
            },
        }

    @classmethod
    def from_manifest(cls, doc: dict) -> "OracleHandle":
        if doc.get("manifest_version") != MANIFEST_VERSION:
            raise ConfigError("unsupported oracle manifest version")
        cp = doc["censoring_params"]
        c = np.array([np.inf if v is None else v for v in doc["latents"]["c"]])
        return cls(
            config=ScenarioConfig.from_dict(doc["scenario"]),
            censoring=CensoringParams(kind=cp["kind"], c0=cp["c0"], a=cp["a"], b=cp["b"]),
            tau=float(doc["tau"]),
            latent_t1=np.asarray(doc["latents"]["t1"], dtype=float),
            latent_t2=np.asarray(doc["latents"]["t2"], dtype=float),
            latent_c=c,
        )

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_manifest(), fh, sort_keys=True, indent=1)
            fh.write("\n")

    @classmethod
    def load(cls, path) -> "OracleHandle":
        with open(path, encoding="utf-8") as fh:
            return cls.from_manifest(json.load(fh))


def scenario_schema(arity: int) -> SchemaSpec:
    schema = CovariateSchema(COVARIATE_NAMES)
    return SchemaSpec(schemas=(schema, schema), arities=(arity, arity))


def _categorical(p: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    u = rng.random(p.shape[0])
    arms = (u[:, None] > np.cumsum(p, axis=1)).sum(axis=1)
    return np.minimum(arms, p.shape[1] - 1)


def generate(config: ScenarioConfig):
    """Generate a Dataset plus its OracleHandle.

    Deterministic given config.seed: independent sub-streams are derived for
    covariates, treatments, noise and censoring, so the same seed always
    yields a byte-identical dataset.
    """
    config.validate()
    n = config.n_subjects
    rng_cov = make_rng(config.seed, "covariates")
    rng_trt = make_rng(config.seed, "treatments")
    rng_eps = make_rng(config.seed, "noise")
    rng_cen = make_rng(config.seed, "censoring")

    x1, x2 = sample_covariates(n, rng_cov)
    a1 = _categorical(stage1_propensity(x1, config.arity), rng_trt)
    eps1 = rng_eps.exponential(1.0 / config.noise_rate, n)
    t1 = stage1_time(x1, a1, eps1, config.arity)

    a2 = _categorical(stage2_propensity_values(
        x2[:, GLUCOSE], t1, x2[:, SODIUM], x2[:, PLATELET], config.arity), rng_trt)
    eps2 = rng_eps.exponential(1.0 / config.noise_rate, n)
    t2 = stage2_time(x2[:, GLUCOSE], t1, a2, eps2, config.arity,
                     config.stage2_growth_cap)

    if config.censoring_kind == "none" or config.target_censor_rate == 0.0:
        params = CensoringParams(kind="none")
        c = np.full(n, np.inf)
    else:
        u = rng_cen.random(n)
        params = calibrate_censoring(config.censoring_kind,
                                     config.target_censor_rate,
                                     tunob=t1 + t2, x1=x1, u=u)
        c = _censoring_from_uniforms(params, x1, u)

    eta, t, r1, r2, delta1, delta2 = assemble_observed(t1, t2, c)

    a2_obs = np.where(eta == 1, a2, -1)
    spec = scenario_schema(config.arity)
    dataset = Dataset(
        spec,
        covariates=[x1, x2],
        treatments=[a1, a2_obs],
        durations=[r1, r2],
        events=[delta1, delta2],
        entries=[np.ones(n, dtype=np.int64), eta],
        total_time=t,
    )
    tau = float(np.quantile(t, 0.9)) if config.tau == "auto" else float(config.tau)
    oracle = OracleHandle(config=config, censoring=params, tau=tau,
                          latent_t1=t1, latent_t2=t2, latent_c=c)
    return dataset, oracle
