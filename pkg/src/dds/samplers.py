"""Reconstruction loops: CG-decomposed DDIM sampling plus baseline DC steps.

The per-step data-consistency slot is pluggable so strategy ablations are a
config sweep. Baselines cover pseudo-inverse replacement (on the denoised
estimate or the noisy iterate), one-step gradient descent on the residual,
and the projected-gradient step available when the denoiser Jacobian is an
analytic projector. Rejection sampling reruns with derived seeds.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np

from .diffusion import (
    AffineSubspacePrior,
    VeSchedule,
    VpSchedule,
    affine_prior_denoise,
    eps_from_denoised,
    mcg_dps_gradient,
    score_from_denoised,
    ve_ddim_step,
    vp_ddim_step,
)
from .errors import ConfigError, NumericalError, SamplerDivergedError
from .krylov import build_proximal_normal, cg, normal_operator
from .metrics import estimate_noise
from .operators import LinearMap
from .tensor import RngStream, norm

DC_STRATEGIES = ("dds-cg", "dds-proximal-cg", "ddnm", "projection", "gradient", "dps")

_ETA_ANCHORS = ((19, 0.15), (49, 0.5), (99, 0.8))


def default_eta(nfe: int) -> float:
    """Stochasticity default per NFE: 0.15 @ 19, 0.5 @ 49, 0.8 @ 99 (nearest)."""
    return min(_ETA_ANCHORS, key=lambda kv: abs(kv[0] - nfe))[1]


@dataclass
class SamplerConfig:
    nfe: int = 49
    eta: float | None = None          # None -> default_eta(nfe)
    cg_steps: int = 5
    gamma: float = 0.95               # proximal weight for noisy problems
    mode: str = "vp"                  # vp | ve
    dc: str = "dds-cg"
    xi: float = 1.0                   # gradient-DC step size
    dps_step: float = 1.0             # projected-gradient step size
    scale_step_by_residual: bool = False  # xi_t, gamma_t ~ 1 / ||y - A xhat||
    ve_sigma_max: float = 10.0
    ve_truncation: float = 1.0 / 50.0
    rejection_tau: float | None = None
    projection_target: str = "noisy"  # where the projection baseline acts
    seed: int = 0

    def __post_init__(self):
        if self.nfe < 2:
            raise ConfigError("nfe must be >= 2")
        if self.cg_steps < 1:
            raise ConfigError("cg_steps must be >= 1")
        if self.gamma <= 0:
            raise ConfigError("gamma must be > 0")
        if self.mode not in ("vp", "ve"):
            raise ConfigError(f"unknown mode {self.mode!r}")
        if self.dc not in DC_STRATEGIES:
            raise ConfigError(f"unknown dc strategy {self.dc!r}")
        if self.eta is not None and not (0.0 <= self.eta <= 1.0):
            raise ConfigError("eta must lie in [0, 1]")
        if self.projection_target not in ("noisy", "denoised"):
            raise ConfigError("projection target must be noisy or denoised")

    def resolved_eta(self) -> float:
        return self.eta if self.eta is not None else default_eta(self.nfe)


@dataclass
class StepRecord:
    t: int
    residual: float
    gt_error: float = math.nan
    noise_est: float = math.nan
    subspace_dist: float = math.nan


@dataclass
class SamplerTrace:
    records: list[StepRecord] = field(default_factory=list)

    def append(self, rec: StepRecord):
        self.records.append(rec)

    def __len__(self):
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    CSV_HEADER = "t,residual,gt-error,noise-est,subspace-dist"

    def to_csv(self, path) -> None:
        lines = [self.CSV_HEADER]
        for r in self.records:
            lines.append(
                f"{r.t},{r.residual!r},{r.gt_error!r},{r.noise_est!r},{r.subspace_dist!r}"
            )
        with open(path, "w", newline="\n") as fh:
            fh.write("\n".join(lines) + "\n")


@dataclass
class ReconResult:
    x0: np.ndarray
    trace: SamplerTrace
    residual: float
    accepted: bool | None = None
    wall_seconds: float = 0.0
    attempts: int = 1


# ---------------------------------------------------------------------------
# Pseudo-inverse machinery

def pseudo_inverse_apply(a: LinearMap, r: np.ndarray, tol: float = 1e-10,
                         maxiter: int = 200) -> np.ndarray:
    """Apply the Moore-Penrose pseudo-inverse to a range tensor.

    Uses the operator's exact pinv when available (single-coil Cartesian
    zero-fill); otherwise runs CG from zero on the normal equations
    A*A z = A*r, whose limit is the min-norm least-squares solution A+ r.
    Ill-conditioned operators (multi-coil masked Fourier) stall above the
    target tolerance; the capped iterate is then the practical
    truncated-spectrum pinv, and only outright non-convergence (relative
    residual above 1e-2) raises.
    """
    if a.pinv_fn is not None:
        return a.pinv_fn(r)
    rhs = a.adjoint(r)
    rn = norm(rhs)
    if rn == 0.0:
        return np.zeros(a.domain_shape, dtype=a.domain_dtype)

    def nrm(z):
        return a.adjoint(a.apply(z))

    nop = LinearMap(a.domain_shape, a.domain_shape, nrm, nrm,
                    domain_dtype=a.domain_dtype, name="A*A")
    z, rep = cg(nop, rhs, np.zeros_like(rhs), maxiter, tol=tol * rn)
    if rep.residual_norms[-1] > 1e-2 * rn:
        raise NumericalError(
            f"pseudo-inverse CG did not converge (relative residual "
            f"{rep.residual_norms[-1] / rn:.3e})"
        )
    return z


# ---------------------------------------------------------------------------
# Data-consistency steps

def ddnm_step(xhat: np.ndarray, a: LinearMap, y: np.ndarray,
              tol: float = 1e-10, maxiter: int = 200) -> np.ndarray:
    """Range-space replacement (I - A+A) xhat + A+ y, via xhat + A+(y - A xhat)."""
    return xhat + pseudo_inverse_apply(a, y - a.apply(xhat), tol=tol, maxiter=maxiter)


def projection_dc_step(x: np.ndarray, a: LinearMap, y: np.ndarray,
                       tol: float = 1e-10, maxiter: int = 200) -> np.ndarray:
    """Identical algebra to ddnm_step; by convention applied to the noisy iterate."""
    return ddnm_step(x, a, y, tol=tol, maxiter=maxiter)


def gradient_dc_step(x: np.ndarray, a: LinearMap, y: np.ndarray, xi: float) -> np.ndarray:
    """One descent step x - xi A*(A x - y) on the residual 1/2 ||y - Ax||^2."""
    if xi <= 0:
        raise ConfigError("gradient step size must be positive")
    return x - xi * a.adjoint(a.apply(x) - y)


def dps_dc_step(x_t: np.ndarray, t: int, prior: AffineSubspacePrior, a: LinearMap,
                y: np.ndarray, gamma_t: float, sched) -> np.ndarray:
    """xhat_t - gamma_t * (manifold-constrained gradient), a projected step."""
    xhat = affine_prior_denoise(x_t, t, prior, sched)
    return xhat - gamma_t * mcg_dps_gradient(x_t, t, prior, a, y, sched)


# ---------------------------------------------------------------------------
# Main reconstruction loop

def make_schedule(cfg: SamplerConfig):
    if cfg.mode == "vp":
        return VpSchedule.default(cfg.nfe)
    return VeSchedule.geometric(cfg.nfe, sigma_max=cfg.ve_sigma_max)


def _trace_noise(x: np.ndarray) -> float:
    if x.ndim == 2:
        img = x
    elif x.ndim == 3:
        img = x[x.shape[0] // 2]
    else:
        return math.nan
    if min(img.shape) < 2:
        return math.nan
    return estimate_noise(np.real(img))


def dds_reconstruct(a: LinearMap, y: np.ndarray, denoiser, cfg: SamplerConfig,
                    rng: RngStream | None = None, x_true: np.ndarray | None = None,
                    schedule=None) -> ReconResult:
    """Run the decomposed sampling loop for one measurement.

    Per step: Tweedie denoise, data consistency per cfg.dc, then the DDIM
    transition using the pre-DC noise estimate. The last step applies
    Tweedie only. VE runs with truncation stop at t <= nfe * ve_truncation.
    """
    t_start = time.perf_counter()
    rng = rng if rng is not None else RngStream(cfg.seed)
    sched = schedule if schedule is not None else make_schedule(cfg)
    if sched.n_steps != cfg.nfe:
        raise ConfigError("schedule length disagrees with cfg.nfe")
    eta = cfg.resolved_eta()
    vp = isinstance(sched, VpSchedule)

    shape, dtype = a.domain_shape, a.domain_dtype
    prior = getattr(denoiser, "prior", None)
    if not (isinstance(prior, AffineSubspacePrior) and prior.signal_shape == shape):
        prior = None  # slice-wise priors cannot score whole-volume iterates

    a_star_y = a.adjoint(y)
    nrm_op = normal_operator(a)
    prox_sys = None
    if cfg.dc == "dds-proximal-cg":
        prox_sys = build_proximal_normal(a, y, np.zeros(shape, dtype=dtype), cfg.gamma)

    x = rng.randn(shape, dtype=dtype)
    if not vp:
        x = sched.sigmas[sched.n_steps] * x

    k_stop = 1 if vp else max(1, int(cfg.nfe * cfg.ve_truncation))
    trace = SamplerTrace()
    try:
        for t in range(sched.n_steps, k_stop, -1):
            xhat = denoiser.denoise(x, t, sched)
            if vp:
                eps_hat = eps_from_denoised(x, xhat, t, sched)
            else:
                s_hat = score_from_denoised(x, xhat, t, sched)

            if cfg.dc == "dds-cg":
                xp, _ = cg(nrm_op, a_star_y, xhat, cfg.cg_steps)
            elif cfg.dc == "dds-proximal-cg":
                rhs = xhat + cfg.gamma * a_star_y
                xp, _ = cg(prox_sys.op, rhs, xhat, cfg.cg_steps)
            elif cfg.dc == "ddnm":
                xp = ddnm_step(xhat, a, y)
            elif cfg.dc == "projection":
                xp = ddnm_step(xhat, a, y) if cfg.projection_target == "denoised" else xhat
            elif cfg.dc == "gradient":
                xi_t = cfg.xi
                if cfg.scale_step_by_residual:
                    xi_t = cfg.xi / max(norm(y - a.apply(xhat)), 1e-12)
                xp = gradient_dc_step(xhat, a, y, xi_t)
            else:  # dps
                if prior is None:
                    raise ConfigError("dps DC needs an affine-subspace prior denoiser")
                g_t = cfg.dps_step
                if cfg.scale_step_by_residual:
                    g_t = cfg.dps_step / max(norm(y - a.apply(xhat)), 1e-12)
                xp = dps_dc_step(x, t, prior, a, y, g_t, sched)

            trace.append(StepRecord(
                t=t,
                residual=norm(y - a.apply(xp)),
                gt_error=norm(xhat - x_true) if x_true is not None else math.nan,
                noise_est=_trace_noise(x),
                subspace_dist=prior.distance(xp) if prior is not None else math.nan,
            ))

            if vp:
                x = vp_ddim_step(xp, eps_hat, t, eta, rng, sched)
            else:
                x = ve_ddim_step(xp, s_hat, t, eta, rng, sched)
            if cfg.dc == "projection" and cfg.projection_target == "noisy":
                x = projection_dc_step(x, a, y)

        x0 = denoiser.denoise(x, k_stop, sched)
        residual = norm(y - a.apply(x0))
        trace.append(StepRecord(
            t=k_stop,
            residual=residual,
            gt_error=norm(x0 - x_true) if x_true is not None else math.nan,
            noise_est=_trace_noise(x),
            subspace_dist=prior.distance(x0) if prior is not None else math.nan,
        ))
    except NumericalError as exc:
        raise SamplerDivergedError(f"sampler diverged: {exc}", trace=trace) from exc
    if not np.all(np.isfinite(x0)):
        raise SamplerDivergedError("sampler produced non-finite output", trace=trace)

    accepted = None
    if cfg.rejection_tau is not None:
        accepted = bool(residual <= cfg.rejection_tau)
    return ReconResult(x0=x0, trace=trace, residual=residual, accepted=accepted,
                       wall_seconds=time.perf_counter() - t_start)


def rejection_wrap(run_fn, tau: float, max_retries: int, base_rng: RngStream) -> ReconResult:
    """Rerun ``run_fn(rng)`` with derived fresh seeds until the residual clears tau.

    Exhausted retries return the best-residual attempt flagged not accepted.
    The result's ``attempts`` counts runs performed.
    """
    if tau < 0:
        raise ConfigError("rejection threshold must be nonnegative")
    if max_retries < 1:
        raise ConfigError("need at least one attempt")
    best = None
    for attempt in range(1, max_retries + 1):
        res = run_fn(base_rng.child(attempt - 1))
        res.attempts = attempt
        if res.residual <= tau:
            res.accepted = True
            return res
        if best is None or res.residual < best.residual:
            best = res
    best.accepted = False
    best.attempts = max_retries
    return best
