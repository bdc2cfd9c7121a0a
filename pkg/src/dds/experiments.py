"""Batch experiment harness: config files, problem synthesis, sweeps, CSV/PGM output.

Config files are flat INI key-value sections (diffable, hand-editable); a
config plus the command-line seed reproduces every output byte for byte.
"""

from __future__ import annotations

import configparser
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .admm import TvConfig, dds_3d_reconstruct
from .diffusion import (
    AffineSubspaceDenoiser,
    AffineSubspacePrior,
    GmmDenoiser,
    GmmPrior,
    VeSchedule,
    VpSchedule,
    smooth_random_field,
)
from .errors import ConfigError
from .krylov import CgReport, cg, normal_operator
from .metrics import estimate_noise, psnr, ssim
from .operators import (
    LinearMap,
    MaskSpec,
    RadonGeometry,
    make_coil_maps,
    make_mask,
    radon_operator,
    sense_operator,
    slice_radon_operator,
)
from .phantoms import shepp_logan_2d, shepp_logan_3d
from .samplers import (
    ReconResult,
    SamplerConfig,
    dds_reconstruct,
    dps_dc_step,
    gradient_dc_step,
    projection_dc_step,
    pseudo_inverse_apply,
    rejection_wrap,
)
from .tensor import COMPLEX, REAL, RngStream


def _fmt(x) -> str:
    """Deterministic scalar formatting for CSV artifacts (shortest round-trip)."""
    if isinstance(x, float):
        return repr(x)
    return str(x)


def write_csv(path, header: list[str], rows: list[list]) -> None:
    lines = [",".join(header)]
    for row in rows:
        lines.append(",".join(_fmt(v) for v in row))
    with open(path, "w", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")


# ---------------------------------------------------------------------------
# Config file

class ExperimentConfig:
    """Typed view over a flat INI config; keeps raw text for byte-exact copies."""

    def __init__(self, text: str):
        self.text = text
        self._cp = configparser.ConfigParser(inline_comment_prefixes=("#",))
        try:
            self._cp.read_string(text)
        except configparser.Error as exc:
            raise ConfigError(f"bad config file: {exc}") from exc

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        return cls(Path(path).read_text())

    def get(self, section: str, key: str, default=None, cast=str):
        if not self._cp.has_option(section, key):
            if default is None and cast is not bool:
                raise ConfigError(f"config missing [{section}] {key}")
            return default
        raw = self._cp.get(section, key)
        try:
            if cast is bool:
                return raw.strip().lower() in ("1", "true", "yes", "on")
            return cast(raw)
        except ValueError as exc:
            raise ConfigError(f"config [{section}] {key}={raw!r}: {exc}") from exc

    def get_ints(self, section, key, default=None):
        if not self._cp.has_option(section, key):
            if default is None:
                raise ConfigError(f"config missing [{section}] {key}")
            return default
        return tuple(int(v) for v in self._cp.get(section, key).split())

    def has(self, section, key=None) -> bool:
        if key is None:
            return self._cp.has_section(section)
        return self._cp.has_option(section, key)


# ---------------------------------------------------------------------------
# Problem synthesis

@dataclass
class Problem:
    kind: str
    a: LinearMap
    y: np.ndarray
    x_true: np.ndarray
    denoiser: object
    prior: object
    noise_sigma: float
    aux: dict = field(default_factory=dict)


def build_prior(cfg: ExperimentConfig, signal_shape):
    kind = cfg.get("prior", "kind", "affine")
    seed = cfg.get("prior", "seed", 0, int)
    use_complex = cfg.get("prior", "complex", True, bool)
    smooth = cfg.get("prior", "smooth", 0.0, float)
    dtype = COMPLEX if use_complex else REAL
    if kind == "affine":
        dim = cfg.get("prior", "dim", 8, int)
        offs = cfg.get("prior", "offset_scale", 0.0, float)
        return AffineSubspacePrior.random(signal_shape, dim, seed=seed, dtype=dtype,
                                          offset_scale=offs, smooth=smooth)
    if kind == "gmm":
        k = cfg.get("prior", "components", 3, int)
        tau = cfg.get("prior", "tau", 0.1, float)
        scale = cfg.get("prior", "mean_scale", 1.0, float)
        rng = RngStream(seed)
        means = np.stack([
            scale * (smooth_random_field(rng, signal_shape, smooth, dtype)
                     if smooth > 0 else rng.randn(signal_shape, dtype=dtype))
            for _ in range(k)
        ])
        weights = np.full(k, 1.0 / k)
        return GmmPrior(weights=weights, means=means, tau2=tau * tau)
    raise ConfigError(f"unknown prior kind {kind!r}")


def make_denoiser(prior):
    if isinstance(prior, AffineSubspacePrior):
        return AffineSubspaceDenoiser(prior)
    if isinstance(prior, GmmPrior):
        return GmmDenoiser(prior)
    raise ConfigError("no analytic denoiser for this prior")


def build_phantom(cfg: ExperimentConfig, prior):
    kind = cfg.get("phantom", "kind", "subspace-random")
    seed = cfg.get("phantom", "seed", 0, int)
    shape = cfg.get_ints("phantom", "shape")
    rng = RngStream(seed)
    if kind == "shepp-logan-2d":
        return shepp_logan_2d(shape[-1])
    if kind == "shepp-logan-3d":
        return shepp_logan_3d(shape)
    if kind in ("subspace-random", "gmm-draw"):
        if len(shape) == len(prior.signal_shape):
            return prior.sample(rng)
        if len(shape) == 3 and len(prior.signal_shape) == 2:
            if cfg.get("phantom", "constant_z", False, bool):
                slc = prior.sample(rng)
                return np.stack([slc] * shape[0])
            return np.stack([prior.sample(rng) for _ in range(shape[0])])
        raise ConfigError("phantom shape incompatible with the prior")
    raise ConfigError(f"unknown phantom kind {kind!r}")


def build_operator(cfg: ExperimentConfig, signal_shape):
    kind = cfg.get("operator", "kind", "sense")
    aux = {}
    if kind == "sense":
        spec = MaskSpec(
            kind=cfg.get("operator", "mask_kind", "uniform1d"),
            acceleration=cfg.get("operator", "acceleration", 4.0, float),
            acs_fraction=cfg.get("operator", "acs_fraction", 0.08, float),
            seed=cfg.get("operator", "mask_seed", 0, int),
        )
        mask = make_mask(spec, signal_shape[-2:])
        maps = make_coil_maps(cfg.get("operator", "coils", 1, int), signal_shape[-2:],
                              seed=cfg.get("operator", "maps_seed", 0, int))
        aux["mask"] = mask
        aux["maps"] = maps.maps
        return sense_operator(maps, mask), aux
    if kind == "radon3d":
        if len(signal_shape) != 3:
            raise ConfigError("radon3d needs a 3-D phantom shape")
        geom = RadonGeometry.uniform(
            signal_shape[-1],
            cfg.get("operator", "angles", 12, int),
            cfg.get("operator", "detector_bins", signal_shape[-1], int),
        )
        aux["geometry"] = geom
        return slice_radon_operator(geom, signal_shape[0]), aux
    raise ConfigError(f"unknown operator kind {kind!r}")


def build_problem(cfg: ExperimentConfig) -> Problem:
    kind = cfg.get("problem", "kind", "mri2d")
    if kind not in ("mri2d", "mri2d-noisy", "ct3d"):
        raise ConfigError(f"unknown problem kind {kind!r}")
    shape = cfg.get_ints("phantom", "shape")
    prior_shape = shape[-2:] if kind == "ct3d" else shape
    prior = build_prior(cfg, prior_shape)
    x_true = build_phantom(cfg, prior)
    a, aux = build_operator(cfg, shape)
    if x_true.shape != a.domain_shape:
        raise ConfigError(
            f"phantom shape {x_true.shape} does not match operator domain {a.domain_shape}"
        )
    x_in = x_true.astype(a.domain_dtype)
    y = a.apply(x_in)
    sigma = cfg.get("problem", "noise_sigma", 0.0, float)
    if kind == "mri2d-noisy" and sigma == 0.0:
        sigma = 0.05
    if sigma > 0:
        nrng = RngStream(cfg.get("problem", "noise_seed", 0, int))
        y = y + sigma * nrng.randn(y.shape, dtype=a.range_dtype)
    return Problem(kind=kind, a=a, y=y, x_true=x_true, denoiser=make_denoiser(prior),
                   prior=prior, noise_sigma=sigma, aux=aux)


def sampler_config(cfg: ExperimentConfig, seed: int, **overrides) -> SamplerConfig:
    kwargs = dict(
        nfe=cfg.get("sampler", "nfe", 20, int),
        eta=cfg.get("sampler", "eta", None, float) if cfg.has("sampler", "eta") else None,
        cg_steps=cfg.get("sampler", "cg_steps", 5, int),
        gamma=cfg.get("sampler", "gamma", 0.95, float),
        mode=cfg.get("sampler", "mode", "vp"),
        dc=cfg.get("sampler", "dc", "dds-cg"),
        xi=cfg.get("sampler", "xi", 1.0, float),
        dps_step=cfg.get("sampler", "dps_step", 1.0, float),
        scale_step_by_residual=cfg.get("sampler", "scale_step_by_residual", False, bool),
        ve_sigma_max=cfg.get("sampler", "ve_sigma_max", 10.0, float),
        ve_truncation=cfg.get("sampler", "ve_truncation", 1.0 / 50.0, float),
        rejection_tau=cfg.get("sampler", "rejection_tau", None, float)
        if cfg.has("sampler", "rejection_tau") else None,
        projection_target=cfg.get("sampler", "projection_target", "noisy"),
        seed=seed,
    )
    kwargs.update(overrides)
    return SamplerConfig(**kwargs)


def tv_config(cfg: ExperimentConfig, **overrides) -> TvConfig:
    kwargs = dict(
        lam=cfg.get("tv", "lam", 10.0, float),
        rho=cfg.get("tv", "rho", 0.04, float),
        cg_steps=cfg.get("tv", "cg_steps", 5, int),
    )
    kwargs.update(overrides)
    return TvConfig(**kwargs)


def run_reconstruction(problem: Problem, scfg: SamplerConfig, tv: TvConfig | None = None,
                       rng: RngStream | None = None, max_retries: int = 1) -> ReconResult:
    """One reconstruction; with a rejection threshold configured, reruns with
    derived fresh seeds up to ``max_retries`` times until the residual clears."""
    rng = rng if rng is not None else RngStream(scfg.seed)

    def one(stream: RngStream) -> ReconResult:
        if problem.kind == "ct3d":
            return dds_3d_reconstruct(problem.a, problem.y, problem.denoiser, scfg,
                                      tv if tv is not None else TvConfig(),
                                      rng=stream, x_true=problem.x_true)
        return dds_reconstruct(problem.a, problem.y, problem.denoiser, scfg,
                               rng=stream, x_true=problem.x_true)

    if scfg.rejection_tau is None or max_retries <= 1:
        return one(rng)
    return rejection_wrap(one, scfg.rejection_tau, max_retries, rng)


# ---------------------------------------------------------------------------
# Metrics rows and sweeps

MET_HEADER = ["run_id", "strategy", "nfe", "cg_steps", "eta", "psnr", "ssim", "residual"]


@dataclass
class MetricsRow:
    run_id: str
    strategy: str
    nfe: int
    cg_steps: int
    eta: float
    psnr: float
    ssim: float
    residual: float
    wall_seconds: float = 0.0

    def as_list(self, timing: bool = False) -> list:
        row = [self.run_id, self.strategy, self.nfe, self.cg_steps, self.eta,
               self.psnr, self.ssim, self.residual]
        if timing:
            row.append(self.wall_seconds)
        return row


def _middle_slice(mag: np.ndarray) -> np.ndarray:
    return mag[mag.shape[0] // 2] if mag.ndim == 3 else mag


def evaluate(problem: Problem, res: ReconResult, run_id: str,
             scfg: SamplerConfig, strategy: str | None = None) -> MetricsRow:
    """Metrics on magnitude images: PSNR over the whole signal, SSIM on the
    (middle axial slice of the) 2-D magnitude."""
    mx = np.abs(res.x0)
    mref = np.abs(problem.x_true)
    try:
        ss = ssim(_middle_slice(mx), _middle_slice(mref))
    except ConfigError:
        ss = math.nan  # image smaller than the SSIM window
    return MetricsRow(
        run_id=run_id, strategy=strategy or scfg.dc, nfe=scfg.nfe,
        cg_steps=scfg.cg_steps, eta=scfg.resolved_eta(), psnr=psnr(mx, mref),
        ssim=ss, residual=res.residual, wall_seconds=res.wall_seconds,
    )


SWEEP_AXES = ("eta", "nfe", "cg-steps", "lambda")


def run_sweep(cfg: ExperimentConfig, axis: str, values, repeats: int, seed: int,
              jobs: int = 1) -> list[MetricsRow]:
    """Cartesian sweep over one axis; one MetricsRow per (value, repeat).

    Runs are independent with per-run derived streams keyed by run index, so
    the result is identical regardless of ``jobs``. Rows come back ordered by
    run index, followed by per-value mean/std summary rows.
    """
    if axis not in SWEEP_AXES:
        raise ConfigError(f"unknown sweep axis {axis!r}")
    if not values:
        raise ConfigError("sweep needs at least one value")
    problem = build_problem(cfg)
    base_rng = RngStream(seed)
    tasks = []
    for vi, val in enumerate(values):
        for rep in range(repeats):
            tasks.append((vi, val, rep, len(tasks)))

    def one(task):
        vi, val, rep, idx = task
        overrides = {}
        tv_over = {}
        if axis == "eta":
            overrides["eta"] = float(val)
        elif axis == "nfe":
            overrides["nfe"] = int(val)
        elif axis == "cg-steps":
            overrides["cg_steps"] = int(val)
        else:
            tv_over["lam"] = float(val)
        scfg = sampler_config(cfg, seed, **overrides)
        tv = tv_config(cfg, **tv_over) if problem.kind == "ct3d" else None
        res = run_reconstruction(problem, scfg, tv=tv, rng=base_rng.child(idx))
        run_id = f"{axis}={val}:rep={rep}"
        return idx, evaluate(problem, res, run_id, scfg)

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            rows = list(pool.map(one, tasks))
    else:
        rows = [one(t) for t in tasks]
    rows.sort(key=lambda pair: pair[0])
    out = [r for _, r in rows]

    # per-value mean/std rows over repeats
    for vi, val in enumerate(values):
        grp = [r for _, r in rows if r.run_id.startswith(f"{axis}={val}:")]
        for stat, fn in (("mean", np.mean), ("std", np.std)):
            out.append(MetricsRow(
                run_id=f"{axis}={val}:{stat}", strategy=grp[0].strategy,
                nfe=grp[0].nfe, cg_steps=grp[0].cg_steps, eta=grp[0].eta,
                psnr=float(fn([g.psnr for g in grp])),
                ssim=float(fn([g.ssim for g in grp])),
                residual=float(fn([g.residual for g in grp])),
            ))
    return out


# ---------------------------------------------------------------------------
# Noise-offset experiment (one DC step per strategy on noisy images)

NOISE_OFFSET_STRATEGIES = ("no-process", "projection", "gradient", "dps", "ddnm", "dds-cg")


def run_noise_offset_experiment(trials: int = 50, sigma_gt: float = 0.07, seed: int = 0,
                                shape=(32, 32), prior_dim: int = 8, angles: int = 40,
                                cg_steps: int = 5, smooth: float = 5.0,
                                phantom_scale: float = 3.0):
    """Apply one DC step per strategy to noisy images; measure the noise offset.

    Per trial: a fresh smooth real-valued affine-subspace phantom, Gaussian
    image noise of level sigma_gt, and clean consistent sparse-view tomography
    measurements y = A x*. Each DC formula is applied once at its natural
    point: range replacement (projection), the fixed unit-step gradient, the
    projected gradient (VE form, step 1), and the M-step CG all act on the
    noisy image; the pseudo-inverse replacement also runs from the analytic
    denoised estimate, its in-sampler convention. Smooth phantoms matter
    (the wavelet-MAD estimator must see the added noise, not texture), and
    the tomography operator matters: its non-unit norm and smoothing normal
    operator are what separate the strategies' noise disturbance, as in the
    full-scale protocol. Reported per strategy: sigma_est after the step and
    |sigma_est - sigma_est-np|. Returns (rows, mean_offsets, dds_wins).
    """
    if trials < 1:
        raise ConfigError("need at least one trial")
    base = RngStream(seed)
    geom = RadonGeometry.uniform(shape[-1], angles)
    a = radon_operator(geom)
    nrm = normal_operator(a)
    sched = VeSchedule.geometric(10, sigma_max=1.0)
    t_mid = 5
    rows = []
    offsets = {s: [] for s in NOISE_OFFSET_STRATEGIES}
    dds_wins = 0
    for trial in range(trials):
        rng = base.child(trial)
        prior = AffineSubspacePrior.random(shape, prior_dim, seed=rng.child(0).seed,
                                           dtype=REAL, smooth=smooth)
        x_true = phantom_scale * prior.sample(rng.child(1))
        y = a.apply(x_true)
        x_noisy = x_true + sigma_gt * rng.child(2).randn(shape)
        sigma_np = estimate_noise(x_noisy)
        x_den = prior.project_affine(x_noisy)

        outs = {
            "no-process": x_noisy,
            "projection": projection_dc_step(x_noisy, a, y),
            "gradient": gradient_dc_step(x_noisy, a, y, 1.0),
            "dps": dps_dc_step(x_noisy, t_mid, prior, a, y, 1.0, sched),
            "ddnm": x_den + pseudo_inverse_apply(a, y - a.apply(x_den)),
            "dds-cg": cg(nrm, a.adjoint(y), x_noisy, cg_steps)[0],
        }
        trial_off = {}
        for strat in NOISE_OFFSET_STRATEGIES:
            s_est = estimate_noise(np.real(outs[strat]))
            off = abs(s_est - sigma_np)
            trial_off[strat] = off
            offsets[strat].append(off)
            rows.append([trial, strat, s_est, off])
        rivals = [v for k, v in trial_off.items() if k not in ("no-process", "dds-cg")]
        if trial_off["dds-cg"] < min(rivals):
            dds_wins += 1
    mean_offsets = {s: float(np.mean(v)) for s, v in offsets.items()}
    for strat in NOISE_OFFSET_STRATEGIES:
        rows.append(["mean", strat, math.nan, mean_offsets[strat]])
    return rows, mean_offsets, dds_wins


NOISE_OFFSET_HEADER = ["trial", "strategy", "sigma_est", "offset"]


# ---------------------------------------------------------------------------
# Image and schedule emitters

def emit_image(x: np.ndarray, path) -> None:
    """Write a min-max normalized 8-bit binary PGM; constant images emit 128."""
    x = np.asarray(x, dtype=REAL)
    if x.ndim != 2:
        raise ConfigError("emit_image expects a 2-D real tensor")
    lo, hi = float(x.min()), float(x.max())
    if hi > lo:
        pix = np.rint((x - lo) / (hi - lo) * 255.0).astype(np.uint8)
    else:
        pix = np.full(x.shape, 128, dtype=np.uint8)
    header = f"P5\n{x.shape[1]} {x.shape[0]}\n255\n".encode("ascii")
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(pix.tobytes())


def dump_schedule_csv(sched, path) -> None:
    if isinstance(sched, VpSchedule):
        header = ["t", "beta", "abar", "btilde"]
        rows = [[t, sched.betas[t], sched.abars[t], sched.btildes[t]]
                for t in range(1, sched.n_steps + 1)]
    else:
        header = ["t", "sigma"]
        rows = [[t, sched.sigmas[t]] for t in range(1, sched.n_steps + 1)]
    write_csv(path, header, rows)


def cg_report_csv(report: CgReport, path) -> None:
    write_csv(path, ["iteration", "residual_norm"],
              [[k, rn] for k, rn in enumerate(report.residual_norms)])
