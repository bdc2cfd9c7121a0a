"""Noise schedules, Tweedie denoising, analytic priors, and DDIM-family steps.

Schedules are 1-indexed: index t covers timesteps 1..N with t = N the
noisiest, and the index-0 slot holds the collapse sentinel (abar_0 = 1,
sigma_0 = 0) so the final step folds cleanly into plain Tweedie denoising.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, NumericalError
from .operators import LinearMap
from .tensor import COMPLEX, REAL, RngStream, fft2, ifft2, norm


def smooth_random_field(rng: RngStream, shape, length: float, dtype=REAL) -> np.ndarray:
    """Gaussian random field low-pass filtered to a correlation length (pixels).

    length <= 0 returns plain white noise. 2-D shapes only (power-of-two
    extents, filtering happens in Fourier space).
    """
    if length <= 0:
        return rng.randn(shape, dtype=dtype)
    if len(shape) != 2:
        raise ConfigError("smooth_random_field needs a 2-D shape")
    w = rng.randn(shape, dtype=dtype)
    fy = np.fft.fftfreq(shape[0])[:, None]
    fx = np.fft.fftfreq(shape[1])[None, :]
    sym = np.exp(-2.0 * (math.pi * length) ** 2 * (fy ** 2 + fx ** 2))
    out = ifft2(sym * fft2(np.asarray(w, dtype=COMPLEX)))
    if np.dtype(dtype) == REAL:
        return np.real(out)
    return out


@dataclass(frozen=True)
class VpSchedule:
    """Variance-preserving discretization: beta_t, alpha_t, abar_t, btilde_t.

    btilde_t is the eta = 1 stochastic std
    sqrt((1 - abar_{t-1})/(1 - abar_t)) * sqrt(1 - abar_t/abar_{t-1}),
    i.e. the ancestral-sampling noise scale of the matching DDPM.
    """

    betas: np.ndarray       # (N+1,), betas[0] = 0 sentinel
    alphas: np.ndarray
    abars: np.ndarray       # abars[0] = 1
    btildes: np.ndarray     # btildes[0] = btildes[1] = 0

    def __post_init__(self):
        b = self.betas[1:]
        if np.any(b <= 0) or np.any(b >= 1):
            raise ConfigError("beta_t must lie strictly inside (0, 1)")
        if np.any(np.diff(b) <= 0):
            raise ConfigError("beta_t must be strictly increasing")
        ab = self.abars
        if np.any(np.diff(ab) >= 0) or np.any(ab[1:] <= 0) or np.any(ab[1:] >= 1):
            raise ConfigError("abar_t must be strictly decreasing within (0, 1)")
        # eta = 1 is the extreme stochastic case; radicand must stay >= 0
        rad = 1.0 - ab[:-1] - self.btildes[1:] ** 2
        if np.any(rad < -1e-12):
            raise ConfigError("schedule violates 1 - abar_{t-1} - btilde_t^2 >= 0")

    @property
    def n_steps(self) -> int:
        return len(self.betas) - 1

    @classmethod
    def from_betas(cls, betas) -> "VpSchedule":
        b = np.concatenate([[0.0], np.asarray(betas, dtype=REAL)])
        a = 1.0 - b
        abar = np.cumprod(a)
        bt = np.zeros_like(b)
        for t in range(2, len(b)):
            bt[t] = math.sqrt((1 - abar[t - 1]) / (1 - abar[t])) * math.sqrt(
                1 - abar[t] / abar[t - 1]
            )
        return cls(betas=b, alphas=a, abars=abar, btildes=bt)

    @classmethod
    def default(cls, n_steps: int, train_steps: int = 1000,
                beta_start: float = 1e-4, beta_end: float = 0.02) -> "VpSchedule":
        """Linear training betas subsampled to n_steps by even index striding."""
        if not (2 <= n_steps <= train_steps):
            raise ConfigError("need 2 <= n_steps <= train_steps")
        b_tr = np.linspace(beta_start, beta_end, train_steps)
        abar_tr = np.cumprod(1.0 - b_tr)
        idx = np.array([((k + 1) * train_steps) // n_steps - 1 for k in range(n_steps)])
        abar = abar_tr[idx]
        prev = np.concatenate([[1.0], abar[:-1]])
        betas = 1.0 - abar / prev
        return cls.from_betas(betas)


@dataclass(frozen=True)
class VeSchedule:
    """Variance-exploding discretization with geometric sigma_t."""

    sigmas: np.ndarray  # (N+1,), sigmas[0] = 0 sentinel

    def __post_init__(self):
        s = self.sigmas[1:]
        if s[0] <= 0 or np.any(np.diff(s) <= 0):
            raise ConfigError("sigma_t must be strictly increasing with sigma_1 > 0")

    @property
    def n_steps(self) -> int:
        return len(self.sigmas) - 1

    @classmethod
    def geometric(cls, n_steps: int, sigma_min: float = 0.01,
                  sigma_max: float = 10.0) -> "VeSchedule":
        if n_steps < 2 or sigma_min <= 0 or sigma_max <= sigma_min:
            raise ConfigError("need n_steps >= 2 and 0 < sigma_min < sigma_max")
        s = sigma_min * (sigma_max / sigma_min) ** (np.arange(n_steps) / (n_steps - 1))
        return cls(sigmas=np.concatenate([[0.0], s]))

    @classmethod
    def from_sigmas(cls, sigmas) -> "VeSchedule":
        return cls(sigmas=np.concatenate([[0.0], np.asarray(sigmas, dtype=REAL)]))


def _check_t(sched, t: int):
    if not (1 <= t <= sched.n_steps):
        raise ConfigError(f"timestep {t} outside [1, {sched.n_steps}]")


# ---------------------------------------------------------------------------
# Tweedie denoising and parameterization conversions

def vp_tweedie(x_t: np.ndarray, t: int, eps_hat: np.ndarray, sched: VpSchedule) -> np.ndarray:
    """Posterior-mean estimate xhat = (x_t - sqrt(1 - abar_t) eps_hat) / sqrt(abar_t)."""
    _check_t(sched, t)
    ab = sched.abars[t]
    return (x_t - math.sqrt(1.0 - ab) * eps_hat) / math.sqrt(ab)


def eps_from_denoised(x_t: np.ndarray, xhat: np.ndarray, t: int, sched) -> np.ndarray:
    _check_t(sched, t)
    if isinstance(sched, VpSchedule):
        ab = sched.abars[t]
        return (x_t - math.sqrt(ab) * xhat) / math.sqrt(1.0 - ab)
    return (x_t - xhat) / sched.sigmas[t]


def score_from_denoised(x_t: np.ndarray, xhat: np.ndarray, t: int, sched: VeSchedule) -> np.ndarray:
    _check_t(sched, t)
    return (xhat - x_t) / sched.sigmas[t] ** 2


def score_from_eps(eps: np.ndarray, t: int, sched) -> np.ndarray:
    """shat = -eps_hat / sqrt(1 - abar_t) (VP) or -eps_hat / sigma_t (VE)."""
    _check_t(sched, t)
    if isinstance(sched, VpSchedule):
        return -eps / math.sqrt(1.0 - sched.abars[t])
    return -eps / sched.sigmas[t]


def eps_from_score(score: np.ndarray, t: int, sched) -> np.ndarray:
    _check_t(sched, t)
    if isinstance(sched, VpSchedule):
        return -score * math.sqrt(1.0 - sched.abars[t])
    return -score * sched.sigmas[t]


# ---------------------------------------------------------------------------
# Analytic priors

@dataclass(frozen=True)
class AffineSubspacePrior:
    """Uniform prior on the affine set {Q a + c}: orthonormal atoms plus offset.

    ``basis`` stacks the l orthonormal atoms as (l, *signal_shape); ``offset``
    is the affine shift (zeros for a subspace through the origin).
    """

    basis: np.ndarray
    offset: np.ndarray

    def __post_init__(self):
        q = self.basis.reshape(self.basis.shape[0], -1)
        gram = q.conj() @ q.T
        if np.max(np.abs(gram - np.eye(q.shape[0]))) > 1e-10:
            raise ConfigError("affine prior basis is not orthonormal")
        if self.offset.shape != self.basis.shape[1:]:
            raise ConfigError("offset shape must match the atom shape")

    @property
    def dim(self) -> int:
        return self.basis.shape[0]

    @property
    def signal_shape(self):
        return self.basis.shape[1:]

    def project_linear(self, v: np.ndarray) -> np.ndarray:
        """Orthogonal projection onto span(Q), ignoring the offset."""
        q = self.basis.reshape(self.dim, -1)
        return (q.T @ (q.conj() @ v.ravel())).reshape(v.shape)

    def project_affine(self, v: np.ndarray) -> np.ndarray:
        return self.project_linear(v - self.offset) + self.offset

    def distance(self, v: np.ndarray) -> float:
        r = v - self.offset
        return norm(r - self.project_linear(r))

    def sample(self, rng: RngStream) -> np.ndarray:
        coef = rng.randn((self.dim,), dtype=self.basis.dtype.type)
        q = self.basis.reshape(self.dim, -1)
        return (q.T @ coef).reshape(self.signal_shape) + self.offset

    @classmethod
    def random(cls, signal_shape, dim: int, seed: int = 0, dtype=COMPLEX,
               offset_scale: float = 0.0, smooth: float = 0.0) -> "AffineSubspacePrior":
        """Random orthonormal atoms; ``smooth`` > 0 low-pass filters the raw
        atoms to that correlation length before orthonormalization."""
        rng = RngStream(seed)
        d = int(np.prod(signal_shape))
        if smooth > 0:
            raw = np.stack([smooth_random_field(rng, signal_shape, smooth, dtype).ravel()
                            for _ in range(dim)], axis=1)
        else:
            raw = rng.randn((d, dim), dtype=dtype)
        q, _ = np.linalg.qr(raw)
        basis = np.ascontiguousarray(q.T.reshape((dim,) + tuple(signal_shape)))
        if offset_scale > 0:
            offset = offset_scale * smooth_random_field(rng, signal_shape, smooth, dtype) \
                if smooth > 0 else offset_scale * rng.randn(signal_shape, dtype=dtype)
        else:
            offset = np.zeros(signal_shape, dtype=dtype)
        return cls(basis=basis, offset=offset)


@dataclass(frozen=True)
class GmmPrior:
    """Isotropic Gaussian mixture with shared per-component variance tau^2."""

    weights: np.ndarray
    means: np.ndarray   # (K, *signal_shape)
    tau2: float

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=REAL)
        if abs(float(w.sum()) - 1.0) > 1e-12 or np.any(w < 0):
            raise ConfigError("mixture weights must be nonnegative and sum to 1")
        if self.tau2 <= 0:
            raise ConfigError("tau^2 must be positive")
        if self.means.shape[0] != w.shape[0]:
            raise ConfigError("one mean per weight required")

    @property
    def n_components(self) -> int:
        return self.means.shape[0]

    @property
    def signal_shape(self):
        return self.means.shape[1:]

    def sample(self, rng: RngStream) -> np.ndarray:
        u = rng.uniform()
        k = int(np.searchsorted(np.cumsum(self.weights), u))
        k = min(k, self.n_components - 1)
        noise = rng.randn(self.signal_shape, dtype=self.means.dtype.type)
        return self.means[k] + math.sqrt(self.tau2) * noise


# ---------------------------------------------------------------------------
# Analytic denoisers

def affine_prior_denoise(x_t: np.ndarray, t: int, prior: AffineSubspacePrior,
                         sched) -> np.ndarray:
    """Exact posterior mean under the affine-subspace prior.

    VP: (1/sqrt(abar_t)) * [P(x_t - sqrt(abar_t) c) + sqrt(abar_t) c], which
    for c = 0 is the scaled projector (1/sqrt(abar_t)) P x_t.
    VE: P(x_t - c) + c.
    """
    _check_t(sched, t)
    if isinstance(sched, VpSchedule):
        root_ab = math.sqrt(sched.abars[t])
        centered = x_t - root_ab * prior.offset
        return (prior.project_linear(centered) + root_ab * prior.offset) / root_ab
    return prior.project_affine(x_t)


def gmm_denoise(x_t: np.ndarray, t: int, prior: GmmPrior, sched) -> np.ndarray:
    """Exact posterior mean under the GMM prior via conjugate Gaussians.

    Component responsibilities come from the kernel-convolved marginals
    (log-sum-exp); each component contributes its conjugate posterior mean.
    """
    _check_t(sched, t)
    if x_t.shape != prior.signal_shape:
        raise ConfigError("gmm_denoise: signal shape mismatch")
    if isinstance(sched, VpSchedule):
        ab = sched.abars[t]
        scale, kvar = math.sqrt(ab), 1.0 - ab
    else:
        scale, kvar = 1.0, float(sched.sigmas[t]) ** 2
    # marginal of x_t per component: N(scale mu_k, (scale^2 tau^2 + kvar) I)
    mvar = scale * scale * prior.tau2 + kvar
    x = x_t.ravel()
    mu = prior.means.reshape(prior.n_components, -1)
    sq = np.array([float(np.real(np.vdot(x - scale * m, x - scale * m))) for m in mu])
    # circular complex Gaussians put the whole variance in |.|^2, so the
    # exponent loses the usual factor-2 denominator
    denom = mvar if np.iscomplexobj(x_t) else 2.0 * mvar
    loglik = np.log(np.maximum(prior.weights, 1e-300)) - sq / denom
    top = float(np.max(loglik))
    if not np.isfinite(top):
        raise NumericalError("gmm_denoise: all component responsibilities underflowed")
    resp = np.exp(loglik - top)
    resp /= resp.sum()
    post = (prior.tau2 * scale * x[None, :] + kvar * mu) / mvar
    xhat = resp @ post
    return xhat.reshape(prior.signal_shape)


class AffineSubspaceDenoiser:
    """Denoiser contract implementation backed by an affine-subspace prior."""

    def __init__(self, prior: AffineSubspacePrior):
        self.prior = prior

    def denoise(self, x_t, t, sched):
        return affine_prior_denoise(x_t, t, self.prior, sched)


class GmmDenoiser:
    """Denoiser contract implementation backed by a Gaussian-mixture prior."""

    def __init__(self, prior: GmmPrior):
        self.prior = prior

    def denoise(self, x_t, t, sched):
        return gmm_denoise(x_t, t, self.prior, sched)


# ---------------------------------------------------------------------------
# DDIM steps

def vp_ddim_step(xhat_dc: np.ndarray, eps_hat: np.ndarray, t: int, eta: float,
                 rng: RngStream, sched: VpSchedule) -> np.ndarray:
    """x_{t-1} = sqrt(abar_{t-1}) xhat' + sqrt(1 - abar_{t-1} - eta^2 btilde_t^2) eps_hat
    + eta btilde_t eps.

    eta = 0 is fully deterministic and draws nothing from the stream.
    """
    if t < 2:
        raise ConfigError("vp_ddim_step needs t >= 2")
    _check_t(sched, t)
    if not (0.0 <= eta <= 1.0):
        raise ConfigError("eta must lie in [0, 1]")
    ab_prev = sched.abars[t - 1]
    bt = sched.btildes[t]
    rad = 1.0 - ab_prev - (eta * bt) ** 2
    if rad < -1e-12:
        raise NumericalError("vp_ddim_step: negative radicand (schedule invariant violated)")
    out = math.sqrt(ab_prev) * xhat_dc + math.sqrt(max(rad, 0.0)) * eps_hat
    if eta > 0.0:
        out = out + eta * bt * rng.randn(xhat_dc.shape, dtype=xhat_dc.dtype.type)
    return out


def ve_ddim_step(xhat_dc: np.ndarray, s_hat: np.ndarray, t: int, eta: float,
                 rng: RngStream, sched: VeSchedule) -> np.ndarray:
    """x_{t-1} = xhat' - sigma_{t-1} sigma_t sqrt(1 - btilde^2 eta^2) shat
    + sigma_{t-1} eta btilde eps, with btilde = 1 - sigma_{t-1}^2 / sigma_t^2.
    """
    if t < 2:
        raise ConfigError("ve_ddim_step needs t >= 2")
    _check_t(sched, t)
    if not (0.0 <= eta <= 1.0):
        raise ConfigError("eta must lie in [0, 1]")
    s_prev, s_t = sched.sigmas[t - 1], sched.sigmas[t]
    btilde = 1.0 - (s_prev / s_t) ** 2
    rad = 1.0 - (btilde * eta) ** 2
    if rad < 0.0:
        raise NumericalError("ve_ddim_step: btilde^2 eta^2 > 1")
    out = xhat_dc - s_prev * s_t * math.sqrt(rad) * s_hat
    if eta > 0.0:
        out = out + s_prev * eta * btilde * rng.randn(xhat_dc.shape, dtype=xhat_dc.dtype.type)
    return out


def mcg_dps_gradient(x_t: np.ndarray, t: int, prior: AffineSubspacePrior,
                     a: LinearMap, y: np.ndarray, sched) -> np.ndarray:
    """Manifold-constrained gradient for the affine prior.

    The denoiser Jacobian is the projector scaled by 1/sqrt(abar_t) (VP) or
    the bare projector (VE), so the chain rule gives
    scale * P A*(A xhat - y) with xhat the analytic posterior mean.
    """
    if not isinstance(prior, AffineSubspacePrior):
        raise ConfigError("mcg_dps_gradient needs an affine-subspace prior")
    _check_t(sched, t)
    xhat = affine_prior_denoise(x_t, t, prior, sched)
    g = a.adjoint(a.apply(xhat) - y)
    if isinstance(sched, VpSchedule):
        return prior.project_linear(g) / math.sqrt(sched.abars[t])
    return prior.project_linear(g)
