"""Posterior and unconditional sampling with a windowed score model.

Everything here runs in normalized space on plain ``(T, H, W)`` float64
arrays; public entry points take and return :class:`Field` objects in physical
units when a :class:`NormParams` is supplied (``norm=None`` means the data are
already normalized, which is how the analytic oracle tests run).
"""

from __future__ import annotations

import hashlib
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import aodf
from .config import format_config
from .errors import NonFiniteState, ScheduleError, ShapeError
from .grid import Field, NormParams, denormalize_array, normalize_array
from .observe import (Downsample, Identity, Masking, Observation, cloudlike_mask,
                      fidelity_grad)
from .seeding import derive_seed, make_rng

SIGMA_MAX = 80.0
SIGMA_MIN = 0.002
RHO = 7.0
# Normalized data live in roughly [-1, 1]; anything this large means divergence.
MAGNITUDE_GUARD = 1e6
SIGMA_PRIOR_RULES = ("equal_to_sigma_tau", "constant", "tweedie_spread")
MASK_MODES = ("ones", "observation", "ambient")


def karras_sigmas(n: int, sigma_max: float = SIGMA_MAX, sigma_min: float = SIGMA_MIN,
                  rho: float = RHO) -> np.ndarray:
    if n == 1:
        return np.array([float(sigma_max)])
    i = np.arange(n)
    lo, hi = sigma_min ** (1.0 / rho), sigma_max ** (1.0 / rho)
    s = (hi + i / (n - 1) * (lo - hi)) ** rho
    s[0], s[-1] = sigma_max, sigma_min
    return s


@dataclass(frozen=True, eq=False)
class AnnealSchedule:
    """Strictly decreasing noise levels; ``sigmas`` excludes the terminal 0."""

    sigmas: np.ndarray

    def __post_init__(self):
        s = np.array(self.sigmas, dtype=np.float64)
        if s.ndim != 1 or s.size < 2:
            raise ScheduleError("schedule needs at least 2 levels")
        if not np.all(s > 0) or not np.all(np.diff(s) < 0):
            raise ScheduleError("schedule must be positive and strictly decreasing")
        s.setflags(write=False)
        object.__setattr__(self, "sigmas", s)

    @classmethod
    def karras(cls, n_steps: int = 30, sigma_max: float = SIGMA_MAX,
               sigma_min: float = SIGMA_MIN, rho: float = RHO) -> "AnnealSchedule":
        if n_steps < 2:
            raise ScheduleError(f"schedule needs at least 2 levels, got {n_steps}")
        if not 0 < sigma_min < sigma_max:
            raise ScheduleError("need 0 < sigma_min < sigma_max")
        return cls(karras_sigmas(n_steps, sigma_max, sigma_min, rho))

    @property
    def with_terminal(self) -> np.ndarray:
        return np.append(self.sigmas, 0.0)

    def __len__(self):
        return self.sigmas.size


@dataclass(frozen=True)
class DapsConfig:
    n_langevin: int = 50
    eta: float = 1e-2
    eta_decay: float = 1.0
    sigma_prior_rule: str = "equal_to_sigma_tau"  # or "constant", "tweedie_spread"
    sigma_prior_value: float = 1.0  # the constant, or the data scale for tweedie_spread
    ode_substeps: int = 5
    solver: str = "heun"  # or "euler"
    step_cap: float = 0.1
    mask_mode: str = "ones"  # or "observation", "ambient"
    seed: int = 0
    ambient_masks: int = 4
    ambient_rate: float = 0.37  # missing share of the net's training inputs

    def __post_init__(self):
        if self.n_langevin < 0:
            raise ValueError("n_langevin must be >= 0")
        if not self.eta > 0:
            raise ValueError("eta must be positive")
        if not 0 < self.eta_decay <= 1:
            raise ValueError("eta_decay must lie in (0, 1]")
        if self.sigma_prior_rule not in SIGMA_PRIOR_RULES:
            raise ValueError(f"unknown sigma_prior_rule {self.sigma_prior_rule!r}")
        if not self.sigma_prior_value > 0:
            raise ValueError("sigma_prior_value must be positive")
        if self.ode_substeps < 1:
            raise ValueError("ode_substeps must be >= 1")
        if self.solver not in ("euler", "heun"):
            raise ValueError(f"unknown solver {self.solver!r}")
        if not self.step_cap > 0:
            raise ValueError("step_cap must be positive")
        if self.mask_mode not in MASK_MODES:
            raise ValueError(f"unknown mask_mode {self.mask_mode!r}")
        if self.ambient_masks < 1:
            raise ValueError("ambient_masks must be >= 1")
        if not 0.0 <= self.ambient_rate < 1.0:
            raise ValueError("ambient_rate must lie in [0, 1)")

    def sigma_prior(self, sigma_tau: float) -> float:
        """Spread of the Gaussian approximation to ``p(x0 | x_tau)``.

        ``tweedie_spread`` is the exact conditional std when the data are
        i.i.d. Gaussian with std ``sigma_prior_value``.
        """
        if self.sigma_prior_rule == "constant":
            return self.sigma_prior_value
        if self.sigma_prior_rule == "tweedie_spread":
            s = self.sigma_prior_value
            return float(sigma_tau * s / np.sqrt(sigma_tau**2 + s**2))
        return float(sigma_tau)


def _check_state(x: np.ndarray, where: str) -> np.ndarray:
    if not np.all(np.isfinite(x)):
        raise NonFiniteState(f"non-finite state during {where}")
    if np.abs(x).max(initial=0.0) > MAGNITUDE_GUARD:
        raise NonFiniteState(f"state magnitude exceeded {MAGNITUDE_GUARD:g} during {where}")
    return x


# -- prior side -------------------------------------------------------------------

def window_frames(n_time: int, window: int) -> np.ndarray:
    """``(T, w)`` frame indices of every centered window with replication padding."""
    k = window // 2
    return np.clip(np.arange(n_time)[:, None] + np.arange(-k, k + 1)[None, :], 0, n_time - 1)


def sliding_window_estimate(model, x, masks, sigma: float) -> np.ndarray:
    """Clean estimate of every frame taken from the center slot of its own window.

    Cells with ``masks == 0`` are zeroed before the model sees them, as in training.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 3:
        raise ShapeError(f"expected (T, H, W), got {x.shape}")
    m = np.ones(x.shape) if masks is None else np.asarray(masks, dtype=np.float64)
    if m.shape != x.shape:
        raise ShapeError(f"mask shape {m.shape} != field shape {x.shape}")
    x = np.where(m > 0, x, 0.0)
    idx = window_frames(x.shape[0], model.window)
    out = model.denoise(x[idx], m[idx], sigma, frames=idx)
    return out[:, model.window // 2]


class MaskAveragedModel:
    """Denoiser that only ever shows the wrapped net partially masked windows.

    A net trained on gappy inputs has never seen a complete window, and its
    estimates drift when given one. Each call draws ``n_masks`` cloud-like
    keep-masks per window at ``missing_rate``, denoises every masked copy, and
    averages each cell's estimate over the copies in which it was visible.
    Cells hidden in every copy take the plain average. Draws are keyed by
    ``seed`` and a call counter, so a fresh wrapper replays identically.
    """

    def __init__(self, model, n_masks: int, missing_rate: float, seed: int):
        if n_masks < 1:
            raise ValueError("n_masks must be >= 1")
        self.model = model
        self.n_masks = n_masks
        self.missing_rate = missing_rate
        self.seed = seed
        self.calls = 0

    @property
    def window(self) -> int:
        return self.model.window

    @property
    def norm(self):
        return getattr(self.model, "norm", None)

    def denoise(self, windows, masks, sigma, frames=None) -> np.ndarray:
        windows = np.asarray(windows, dtype=np.float64)
        masks = np.ones(windows.shape) if masks is None else np.asarray(masks, dtype=np.float64)
        call = self.calls
        self.calls += 1
        num = np.zeros_like(windows)
        den = np.zeros_like(windows)
        total = np.zeros_like(windows)
        for j in range(self.n_masks):
            keep = masks * np.stack([
                cloudlike_mask(windows.shape[1:], self.missing_rate,
                               derive_seed(self.seed, "ambient", call, j, b))
                for b in range(windows.shape[0])])
            out = self.model.denoise(np.where(keep > 0, windows, 0.0), keep, sigma, frames)
            num += keep * out
            den += keep
            total += out
        return np.where(den > 0, num / np.maximum(den, 1.0), total / self.n_masks)


def sampling_model(model, mask_mode: str, n_masks: int, missing_rate: float, seed: int):
    """The model as the sampler should query it under ``mask_mode``."""
    if mask_mode == "ambient":
        return MaskAveragedModel(model, n_masks, missing_rate, derive_seed(seed, "ambient"))
    return model


def prior_estimate(model, x_tau, sigma_tau: float, ode_substeps: int = 5,
                   masks=None, solver: str = "heun", sigma_min: float = SIGMA_MIN) -> np.ndarray:
    """Clean estimate of ``x_tau`` by a probability-flow ODE solve then a Tweedie step.

    ``ode_substeps`` counts levels of a Karras sub-schedule from ``sigma_tau``
    down to ``sigma_min``: ``n`` levels take ``n - 1`` ODE steps and the last
    level supplies the final denoiser call. ``ode_substeps = 1`` is a single
    Tweedie estimate at ``sigma_tau``.
    """
    if not sigma_tau > 0:
        raise ValueError("sigma_tau must be positive")
    x = _check_state(np.asarray(x_tau, dtype=np.float64), "prior estimate")
    if ode_substeps == 1 or sigma_tau <= sigma_min:
        return _check_state(sliding_window_estimate(model, x, masks, sigma_tau), "prior estimate")
    sub = karras_sigmas(ode_substeps, sigma_tau, sigma_min)
    d0 = sliding_window_estimate(model, x, masks, sub[0])
    for a, b in zip(sub[:-1], sub[1:]):
        slope = (x - d0) / a
        x_next = x + (b - a) * slope
        d1 = sliding_window_estimate(model, x_next, masks, b)
        if solver == "heun":
            x_next = x + (b - a) * 0.5 * (slope + (x_next - d1) / b)
            d1 = sliding_window_estimate(model, x_next, masks, b)
        x, d0 = _check_state(x_next, "ODE solve"), d1
    return _check_state(d0, "prior estimate")


# -- guidance side -------------------------------------------------------------

def _operator_key(obs: Observation) -> bytes:
    k = obs.kind
    h = hashlib.sha256()
    h.update(k.name.encode())
    if isinstance(k, Downsample):
        h.update(np.array([k.s_step, k.t_step], dtype="<i8").tobytes())
    if isinstance(k, Masking):
        h.update(np.ascontiguousarray(k.mask).tobytes())
    h.update(np.array(obs.y.shape, dtype="<i8").tobytes())
    h.update(np.ascontiguousarray(obs.y, dtype="<f8").tobytes())
    h.update(np.array([obs.sigma_m, obs.lambda_m], dtype="<f8").tobytes())
    return h.digest()


def canonical_order(observations: Sequence[Observation]) -> list[Observation]:
    """Sort observations by content so the gradient sum has a fixed order."""
    return sorted(observations, key=_operator_key)


def guidance_lipschitz(observations: Sequence[Observation], sigma_prior: float) -> float:
    return 1.0 / sigma_prior**2 + sum(2.0 * o.lambda_m * o.kind.gram_norm() for o in observations)


def langevin_guidance(x0_init, observations: Sequence[Observation], sigma_prior: float,
                      cfg: DapsConfig, seed: int, eta: float | None = None) -> np.ndarray:
    """``N`` unadjusted Langevin steps on the prior-consistency plus fidelity objective.

    The step is ``min(eta, step_cap / L)`` with ``L`` the gradient's Lipschitz
    constant, which keeps the chain stable once ``sigma_prior`` is tiny.
    """
    if not sigma_prior > 0:
        raise ValueError("sigma_prior must be positive")
    x0 = np.asarray(x0_init, dtype=np.float64)
    if cfg.n_langevin == 0:
        return x0.copy()
    obs = canonical_order(observations)
    for o in obs:
        o.check(x0.shape)
    eta = cfg.eta if eta is None else eta
    step = min(eta, cfg.step_cap / guidance_lipschitz(obs, sigma_prior))
    inv_var = 1.0 / sigma_prior**2
    rng = make_rng(seed)
    x = x0.copy()
    scale = np.sqrt(2.0 * step)
    for _ in range(cfg.n_langevin):
        grad = (x - x0) * inv_var
        for o in obs:
            grad = grad + o.lambda_m * fidelity_grad(o, x)
        x = x - step * grad + scale * rng.standard_normal(x.shape)
        _check_state(x, "Langevin guidance")
    return x


# -- observation plumbing ---------------------------------------------------------

def normalize_observation(obs: Observation, norm: NormParams | None) -> Observation:
    """Map ``y`` into normalized space; masked-out cells are left at zero and never read."""
    if norm is None:
        return obs
    if isinstance(obs.kind, Masking):
        keep = obs.kind.mask > 0
        y = np.zeros_like(obs.y)
        y[keep] = normalize_array(obs.y[keep], norm)
        return obs.with_values(y)
    return obs.with_values(normalize_array(obs.y, norm))


def infer_shape(observations: Sequence[Observation], model=None, shape=None) -> tuple:
    if shape is not None:
        return tuple(int(s) for s in shape)
    for o in observations:
        if isinstance(o.kind, (Identity, Masking)):
            return o.y.shape
    mean = getattr(model, "mean", None)
    if mean is not None:
        return mean.shape
    raise ShapeError("cannot infer the field shape; pass shape explicitly")


def guidance_mask(observations: Sequence[Observation], shape, mode: str) -> np.ndarray:
    m = np.ones(shape)
    if mode == "observation":
        for o in canonical_order(observations):
            if isinstance(o.kind, Masking):
                m = m * o.kind.mask
    return m


def _to_field(x: np.ndarray, norm: NormParams | None) -> Field:
    values = x if norm is None else denormalize_array(x, norm)
    return Field.from_array(values)


# -- DAPS ------------------------------------------------------------------------

StepCallback = Callable[[int, float, np.ndarray, np.ndarray], None]


def daps_reconstruct_array(model, observations: Sequence[Observation], schedule: AnnealSchedule,
                           cfg: DapsConfig, norm: NormParams | None = None, shape=None,
                           seed: int | None = None,
                           callback: StepCallback | None = None) -> np.ndarray:
    """DAPS in normalized space; ``callback(k, sigma_next, x0_guided, x_next)`` after each re-noise."""
    if not isinstance(schedule, AnnealSchedule):
        schedule = AnnealSchedule(schedule)
    seed = cfg.seed if seed is None else seed
    obs = canonical_order([normalize_observation(o, norm) for o in observations])
    shape = infer_shape(obs, model, shape)
    for o in obs:
        o.check(shape)
    masks = guidance_mask(obs, shape, cfg.mask_mode)
    model = sampling_model(model, cfg.mask_mode, cfg.ambient_masks, cfg.ambient_rate, seed)
    sig = schedule.with_terminal
    x = sig[0] * make_rng(seed, "init").standard_normal(shape)
    x0y = x
    eta = cfg.eta
    for k in range(len(schedule)):
        x0 = prior_estimate(model, x, sig[k], cfg.ode_substeps, masks, cfg.solver)
        x0y = langevin_guidance(x0, obs, cfg.sigma_prior(sig[k]), cfg,
                                derive_seed(seed, "langevin", k), eta=eta)
        eta *= cfg.eta_decay
        x = _check_state(x0y + sig[k + 1] * make_rng(seed, "anneal", k).standard_normal(shape),
                         "re-noising")
        if callback is not None:
            callback(k, float(sig[k + 1]), x0y, x)
    return x0y


def daps_reconstruct(model, observations, schedule, cfg: DapsConfig, norm=None, shape=None,
                     seed=None, callback=None) -> Field:
    return _to_field(daps_reconstruct_array(model, observations, schedule, cfg, norm, shape,
                                            seed, callback), norm)


def unconditional_sample(model, schedule, n_time: int | None, seed: int, norm=None,
                         shape=None, cfg: DapsConfig | None = None) -> Field:
    """Prior sample: DAPS with no observations and no Langevin phase."""
    base = cfg or DapsConfig()
    cfg = DapsConfig(**{**asdict(base), "n_langevin": 0, "seed": seed})
    if shape is None and n_time is not None and getattr(model, "mean", None) is not None:
        shape = (n_time,) + model.mean.shape[1:]
    return daps_reconstruct(model, [], schedule, cfg, norm, shape)


# -- DPS baseline ----------------------------------------------------------------

def dps_reconstruct_array(model, observations, schedule: AnnealSchedule, guidance_scale: float,
                          seed: int, norm=None, shape=None, mask_mode: str = "ones",
                          ambient_masks: int = 4, ambient_rate: float = 0.37) -> np.ndarray:
    """Euler probability-flow sampling with a stop-gradient likelihood correction per step."""
    if not isinstance(schedule, AnnealSchedule):
        schedule = AnnealSchedule(schedule)
    obs = canonical_order([normalize_observation(o, norm) for o in observations])
    shape = infer_shape(obs, model, shape)
    for o in obs:
        o.check(shape)
    if mask_mode not in MASK_MODES:
        raise ValueError(f"unknown mask_mode {mask_mode!r}")
    masks = guidance_mask(obs, shape, mask_mode)
    model = sampling_model(model, mask_mode, ambient_masks, ambient_rate, seed)
    sig = schedule.with_terminal
    x = sig[0] * make_rng(seed, "init").standard_normal(shape)
    for k in range(len(schedule)):
        x0 = sliding_window_estimate(model, x, masks, sig[k])
        x = _check_state(x + (sig[k + 1] - sig[k]) * (x - x0) / sig[k], "probability-flow step")
        if guidance_scale != 0 and obs:
            res = np.sqrt(sum(float(np.sum(o.residual(x0) ** 2)) for o in obs))
            if res > 0:
                zeta = guidance_scale / res
                grad = np.zeros(shape)
                for o in obs:
                    grad = grad + o.lambda_m * fidelity_grad(o, x0)
                x = _check_state(x - zeta * grad, "likelihood correction")
    return x


def dps_reconstruct(model, observations, schedule, guidance_scale: float, seed: int,
                    norm=None, shape=None, mask_mode: str = "ones", ambient_masks: int = 4,
                    ambient_rate: float = 0.37) -> Field:
    return _to_field(dps_reconstruct_array(model, observations, schedule, guidance_scale, seed,
                                           norm, shape, mask_mode, ambient_masks,
                                           ambient_rate), norm)


def probability_flow_sample(model, schedule, seed: int, norm=None, shape=None) -> Field:
    return dps_reconstruct(model, [], schedule, 0.0, seed, norm, shape)


# -- ensembles -------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class ReconResult:
    samples: list
    mean: Field
    std: Field
    seeds: tuple = ()
    meta: dict = field(default_factory=dict)

    @classmethod
    def from_samples(cls, samples: Sequence[Field], seeds=(), meta=None) -> "ReconResult":
        if len(samples) < 1:
            raise ValueError("need at least one sample")
        stack = np.stack([np.asarray(s.values) for s in samples])
        spec = samples[0].spec
        return cls(list(samples), Field(spec, stack.mean(axis=0)), Field(spec, stack.std(axis=0)),
                   tuple(int(s) for s in seeds), dict(meta or {}))

    def save(self, directory, record_time: float | None = None) -> Path:
        """Write ``samples.aodf`` (members stacked along time), ``mean.aodf``, ``std.aodf``
        and ``recon_manifest.txt``; returns the manifest path."""
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        aodf.write_array(np.concatenate([s.values for s in self.samples]), d / "samples.aodf")
        aodf.write_field(self.mean, d / "mean.aodf")
        aodf.write_field(self.std, d / "std.aodf")
        settings = {**{k: str(v) for k, v in self.meta.items()},
                    "n_members": len(self.samples),
                    "n_time": self.mean.spec.n_time,
                    "seeds": " ".join(str(s) for s in self.seeds)}
        if record_time is not None:
            settings["wall_seconds"] = f"{record_time:.3f}"
        path = d / "recon_manifest.txt"
        path.write_text(format_config(settings), encoding="utf-8")
        return path

    @classmethod
    def load(cls, directory) -> "ReconResult":
        from .config import parse_flat

        d = Path(directory)
        meta = parse_flat((d / "recon_manifest.txt").read_text(encoding="utf-8"))
        n, t = int(meta["n_members"]), int(meta["n_time"])
        stacked, _ = aodf.read_array(d / "samples.aodf")
        samples = [Field.from_array(stacked[i * t:(i + 1) * t]) for i in range(n)]
        seeds = tuple(int(s) for s in meta.get("seeds", "").split())
        mean, std = aodf.read_field(d / "mean.aodf"), aodf.read_field(d / "std.aodf")
        return cls(samples, mean, std, seeds, meta)


def member_seed(seed: int, i: int) -> int:
    return derive_seed(seed, "member", i)


def ensemble_reconstruct(model, observations, schedule, cfg: DapsConfig, n_ensemble: int,
                         norm=None, shape=None, member_seeds: Sequence[int] | None = None,
                         ) -> ReconResult:
    """Independent DAPS runs; mean and population std are taken in physical units."""
    if n_ensemble < 2:
        raise ValueError("n_ensemble must be >= 2")
    if member_seeds is None:
        member_seeds = [member_seed(cfg.seed, i) for i in range(n_ensemble)]
    if len(member_seeds) != n_ensemble:
        raise ValueError("need one seed per member")
    samples = [daps_reconstruct(model, observations, schedule, cfg, norm, shape, seed=s)
               for s in member_seeds]
    meta = {k: v for k, v in asdict(cfg).items()}
    meta["schedule_levels"] = len(schedule)
    return ReconResult.from_samples(samples, member_seeds, meta)
