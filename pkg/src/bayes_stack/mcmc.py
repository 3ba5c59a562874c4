"""Hamiltonian Monte Carlo over differentiable log densities.

Plain HMC with dual-averaging step-size adaptation, a jittered leapfrog step
count, and a diagonal mass matrix estimated from warmup draws. Each chain is
seeded from (seed, chain_index), so chain k produces the same draws no matter
how many chains run or in what order.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from functools import cached_property
from typing import Callable, Sequence

import numpy as np
import pandas as pd

from .errors import DivergenceError, SamplingError
from .parallel import thread_budget

__all__ = [
    "Block",
    "ParameterLayout",
    "LogDensityTarget",
    "HmcConfig",
    "PosteriorDraws",
    "Diagnostics",
    "identity_layout",
    "leapfrog",
    "hmc_sample",
    "diagnose",
    "DIVERGENCE_DELTA_H",
]

# |H(end) - H(start)| beyond this marks a transition as divergent.
DIVERGENCE_DELTA_H = 1000.0

TRANSFORMS = ("identity", "log_for_positive", "log_above_one")

# Dual-averaging constants (Hoffman & Gelman 2014 defaults).
_DA_GAMMA = 0.05
_DA_T0 = 10.0
_DA_KAPPA = 0.75


@dataclass(frozen=True)
class Block:
    """One named parameter block and its constraint transform.

    ``log_for_positive`` maps the unconstrained value u to exp(u) > 0;
    ``log_above_one`` maps u to 1 + exp(u) > 1.
    """

    name: str
    size: int
    transform: str = "identity"
    labels: tuple[str, ...] | None = None

    def __post_init__(self) -> None:
        if not self.name:
            raise ValueError("block name must be nonempty")
        if self.size < 1:
            raise ValueError(f"block {self.name!r}: size must be >= 1")
        if self.transform not in TRANSFORMS:
            raise ValueError(
                f"block {self.name!r}: unknown transform {self.transform!r}"
            )
        if self.labels is not None:
            object.__setattr__(self, "labels", tuple(self.labels))
            if len(self.labels) != self.size:
                raise ValueError(f"block {self.name!r}: {len(self.labels)} labels for size {self.size}")


@dataclass(frozen=True)
class ParameterLayout:
    """Ordered named blocks mapping onto a flat parameter vector."""

    blocks: tuple[Block, ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "blocks", tuple(self.blocks))
        names = [b.name for b in self.blocks]
        if len(set(names)) != len(names):
            raise ValueError("block names must be unique")
        if not self.blocks:
            raise ValueError("layout needs at least one block")

    @cached_property
    def total_dim(self) -> int:
        return sum(b.size for b in self.blocks)

    @cached_property
    def _offsets(self) -> dict[str, int]:
        out, pos = {}, 0
        for b in self.blocks:
            out[b.name] = pos
            pos += b.size
        return out

    def slice_of(self, name: str) -> slice:
        start = self._offsets[name]
        return slice(start, start + self.block(name).size)

    def block(self, name: str) -> Block:
        for b in self.blocks:
            if b.name == name:
                return b
        raise KeyError(name)

    @cached_property
    def names(self) -> tuple[str, ...]:
        """Flat per-scalar parameter names, e.g. ``beta_wd[mon]``."""
        out: list[str] = []
        for b in self.blocks:
            if b.size == 1:
                out.append(b.name)
            else:
                labels = b.labels or tuple(str(i) for i in range(b.size))
                out.extend(f"{b.name}[{lab}]" for lab in labels)
        return tuple(out)

    @cached_property
    def _transform_codes(self) -> np.ndarray:
        codes = np.zeros(self.total_dim, dtype=np.int8)
        for b in self.blocks:
            codes[self.slice_of(b.name)] = TRANSFORMS.index(b.transform)
        return codes

    def constrain(self, theta: np.ndarray) -> np.ndarray:
        """Map unconstrained values to the constrained scale (vectorized over leading axes)."""
        x = np.array(theta, dtype=float, copy=True)
        codes = self._transform_codes
        log_mask = codes == 1
        shift_mask = codes == 2
        if log_mask.any():
            x[..., log_mask] = np.exp(x[..., log_mask])
        if shift_mask.any():
            x[..., shift_mask] = 1.0 + np.exp(x[..., shift_mask])
        return x

    def unconstrain(self, x: np.ndarray) -> np.ndarray:
        theta = np.array(x, dtype=float, copy=True)
        codes = self._transform_codes
        log_mask = codes == 1
        shift_mask = codes == 2
        if np.any(theta[..., log_mask] <= 0) or np.any(theta[..., shift_mask] <= 1):
            raise ValueError("value outside the transform's domain")
        if log_mask.any():
            theta[..., log_mask] = np.log(theta[..., log_mask])
        if shift_mask.any():
            theta[..., shift_mask] = np.log(theta[..., shift_mask] - 1.0)
        return theta


def identity_layout(dim: int, name: str = "x") -> ParameterLayout:
    """Single identity block, for targets without any named structure."""
    return ParameterLayout(blocks=(Block(name=name, size=dim),))


@dataclass(frozen=True)
class LogDensityTarget:
    """A differentiable unnormalized log density on R^dim.

    ``eval`` maps a parameter vector to (log density, gradient) and must be
    deterministic and safe to call from concurrent chains.
    """

    dim: int
    eval: Callable[[np.ndarray], tuple[float, np.ndarray]]

    def __post_init__(self) -> None:
        if self.dim < 1:
            raise ValueError("dim must be >= 1")


@dataclass(frozen=True)
class HmcConfig:
    chains: int = 4
    warmup_iters: int = 1000
    sample_iters: int = 1000
    target_accept: float = 0.8
    max_leapfrog_steps: int = 64
    seed: int = 0

    def __post_init__(self) -> None:
        for field_name in ("chains", "warmup_iters", "sample_iters", "max_leapfrog_steps"):
            if getattr(self, field_name) < 1:
                raise ValueError(f"{field_name} must be >= 1")
        if not 0.0 < self.target_accept < 1.0:
            raise ValueError("target_accept must be strictly inside (0, 1)")
        if self.seed < 0:
            raise ValueError("seed must be a nonnegative integer")


@dataclass
class PosteriorDraws:
    """Retained posterior draws on the constrained scale.

    ``values`` is indexed [chain][iteration][parameter]; the layout names each
    parameter index and records the transform that produced it.
    """

    values: np.ndarray
    layout: ParameterLayout
    accept_rate: np.ndarray
    divergences: np.ndarray | None = None
    step_size: np.ndarray | None = None

    def __post_init__(self) -> None:
        self.values = np.asarray(self.values, dtype=float)
        if self.values.ndim != 3:
            raise ValueError("values must be [chain][iteration][parameter]")
        if self.values.shape[2] != self.layout.total_dim:
            raise ValueError("parameter axis does not match layout.total_dim")
        self.accept_rate = np.atleast_1d(np.asarray(self.accept_rate, dtype=float))
        if self.accept_rate.shape[0] != self.values.shape[0]:
            raise ValueError("need one accept rate per chain")

    @property
    def n_chains(self) -> int:
        return self.values.shape[0]

    @property
    def n_iters(self) -> int:
        return self.values.shape[1]

    @property
    def param_names(self) -> tuple[str, ...]:
        return self.layout.names

    def flat(self) -> np.ndarray:
        """All draws pooled across chains, shape (chains * iters, dim)."""
        c, n, d = self.values.shape
        return self.values.reshape(c * n, d)

    def block_values(self, name: str) -> np.ndarray:
        """Pooled draws of one named block, shape (chains * iters, block size)."""
        return self.flat()[:, self.layout.slice_of(name)]

    def to_csv(self, path) -> None:
        """Write `chain, iter, <param names>` with one row per (chain, iter)."""
        c, n, _ = self.values.shape
        frame = pd.DataFrame(self.flat(), columns=list(self.param_names))
        frame.insert(0, "iter", np.tile(np.arange(n), c))
        frame.insert(0, "chain", np.repeat(np.arange(c), n))
        frame.to_csv(path, index=False)


@dataclass(frozen=True)
class Diagnostics:
    """Split-Rhat and effective sample size per parameter."""

    rhat: np.ndarray
    ess: np.ndarray

    def to_dict(self, names: Sequence[str]) -> dict[str, dict[str, float]]:
        return {
            str(name): {"rhat": float(r), "ess": float(e)}
            for name, r, e in zip(names, self.rhat, self.ess)
        }

    def max_rhat(self) -> float:
        return float(np.max(self.rhat))


def _eval_checked(target: LogDensityTarget, q: np.ndarray, step: int) -> tuple[float, np.ndarray]:
    logp, grad = target.eval(q)
    grad = np.asarray(grad, dtype=float)
    if grad.shape != (target.dim,):
        raise ValueError(f"gradient has length {grad.shape}, expected ({target.dim},)")
    if not np.all(np.isfinite(grad)):
        raise DivergenceError(f"non-finite gradient encountered at leapfrog step {step}")
    return float(logp), grad


def _integrate(
    target: LogDensityTarget,
    q0: np.ndarray,
    p0: np.ndarray,
    step_size: float,
    n_steps: int,
    inv_mass: np.ndarray,
    logp0: float | None = None,
    grad0: np.ndarray | None = None,
) -> tuple[np.ndarray, np.ndarray, float, np.ndarray]:
    """Leapfrog trajectory endpoint plus the log density and gradient there."""
    q = np.array(q0, dtype=float)
    if grad0 is None:
        logp, grad = _eval_checked(target, q, 0)
    else:
        logp, grad = logp0, grad0
    p = p0 + 0.5 * step_size * grad
    for step in range(1, n_steps + 1):
        q = q + step_size * (inv_mass * p)
        logp, grad = _eval_checked(target, q, step)
        p = p + (step_size if step < n_steps else 0.5 * step_size) * grad
    return q, p, logp, grad


def leapfrog(
    target: LogDensityTarget,
    position: np.ndarray,
    momentum: np.ndarray,
    step_size: float,
    n_steps: int,
    inv_mass: np.ndarray | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Integrate Hamiltonian dynamics for ``n_steps`` steps of ``step_size``.

    Symplectic and reversible: integrating the result with negated momentum
    recovers the starting point. Raises DivergenceError if a non-finite
    gradient is encountered, identifying the failing step.
    """
    position = np.asarray(position, dtype=float)
    momentum = np.asarray(momentum, dtype=float)
    if position.shape != (target.dim,) or momentum.shape != (target.dim,):
        raise ValueError("position and momentum must have length target.dim")
    if step_size <= 0:
        raise ValueError("step_size must be positive")
    if n_steps < 1:
        raise ValueError("n_steps must be >= 1")
    if inv_mass is None:
        inv_mass = np.ones(target.dim)
    q, p, _, _ = _integrate(target, position, momentum, step_size, n_steps, inv_mass)
    return q, p


def _kinetic(p: np.ndarray, inv_mass: np.ndarray) -> float:
    return 0.5 * float(np.dot(inv_mass * p, p))


class _DualAveraging:
    """Nesterov dual averaging of log step size toward a target accept rate."""

    def __init__(self, eps0: float, target_accept: float):
        self.mu = math.log(10.0 * eps0)
        self.log_eps = math.log(eps0)
        self.log_eps_bar = 0.0
        self.h_bar = 0.0
        self.m = 0
        self.target_accept = target_accept

    def update(self, accept_prob: float) -> None:
        self.m += 1
        frac = 1.0 / (self.m + _DA_T0)
        self.h_bar = (1.0 - frac) * self.h_bar + frac * (self.target_accept - accept_prob)
        self.log_eps = self.mu - math.sqrt(self.m) / _DA_GAMMA * self.h_bar
        w = self.m ** -_DA_KAPPA
        self.log_eps_bar = w * self.log_eps + (1.0 - w) * self.log_eps_bar

    @property
    def current(self) -> float:
        return math.exp(self.log_eps)

    @property
    def adapted(self) -> float:
        return math.exp(self.log_eps_bar)


def _find_initial_step(
    target: LogDensityTarget,
    q: np.ndarray,
    logp: float,
    grad: np.ndarray,
    inv_mass: np.ndarray,
    rng: np.random.Generator,
) -> float:
    """Double/halve a trial step size until one leapfrog step crosses 50% acceptance."""
    p = rng.standard_normal(target.dim) / np.sqrt(inv_mass)
    h0 = -logp + _kinetic(p, inv_mass)

    def log_accept(eps: float) -> float:
        try:
            _, p1, logp1, _ = _integrate(target, q, p, eps, 1, inv_mass, logp, grad)
        except DivergenceError:
            return -math.inf
        h1 = -logp1 + _kinetic(p1, inv_mass)
        return h0 - h1 if math.isfinite(h1) else -math.inf

    eps = 1.0
    la = log_accept(eps)
    direction = 1.0 if la > -math.log(2.0) else -1.0
    for _ in range(100):
        if not direction * la > -direction * math.log(2.0):
            break
        eps *= 2.0 ** direction
        if not 1e-10 < eps < 1e6:
            break
        la = log_accept(eps)
    return eps


def _transition(
    target: LogDensityTarget,
    q: np.ndarray,
    logp: float,
    grad: np.ndarray,
    eps: float,
    inv_mass: np.ndarray,
    rng: np.random.Generator,
    max_steps: int,
) -> tuple[np.ndarray, float, np.ndarray, float, bool, bool]:
    """One HMC transition; returns (q, logp, grad, accept_prob, accepted, divergent)."""
    n_steps = int(rng.integers(1, max_steps + 1))
    p = rng.standard_normal(target.dim) / np.sqrt(inv_mass)
    h0 = -logp + _kinetic(p, inv_mass)
    try:
        q1, p1, logp1, grad1 = _integrate(target, q, p, eps, n_steps, inv_mass, logp, grad)
        delta = (-logp1 + _kinetic(p1, inv_mass)) - h0
    except DivergenceError:
        delta = math.inf
    if not math.isfinite(delta) or abs(delta) > DIVERGENCE_DELTA_H:
        return q, logp, grad, 0.0, False, True
    accept_prob = 1.0 if delta <= 0 else math.exp(-delta)
    if rng.uniform() < accept_prob:
        return q1, logp1, grad1, accept_prob, True, False
    return q, logp, grad, accept_prob, False, False


def _run_chain(
    target: LogDensityTarget,
    init: np.ndarray,
    config: HmcConfig,
    chain_index: int,
) -> tuple[np.ndarray, float, int, float]:
    rng = np.random.default_rng((config.seed, chain_index))
    q = np.asarray(init, dtype=float) + 0.1 * rng.standard_normal(target.dim)
    logp, grad = _eval_checked(target, q, 0)
    inv_mass = np.ones(target.dim)

    warmup = config.warmup_iters
    if warmup >= 40:
        # Mass window sits in the second half of warmup; the tail re-tunes
        # the step size under the new metric.
        mass_lo = warmup // 2
        mass_hi = warmup - max(warmup // 10, 10)
    else:
        mass_lo = mass_hi = warmup + 1

    eps0 = _find_initial_step(target, q, logp, grad, inv_mass, rng)
    da = _DualAveraging(eps0, config.target_accept)
    mass_buf: list[np.ndarray] = []

    for m in range(warmup):
        q, logp, grad, accept_prob, _, _ = _transition(
            target, q, logp, grad, da.current, inv_mass, rng, config.max_leapfrog_steps
        )
        da.update(accept_prob)
        if mass_lo <= m < mass_hi:
            mass_buf.append(q.copy())
        if m == mass_hi - 1 and len(mass_buf) >= 10:
            stacked = np.asarray(mass_buf)
            k = stacked.shape[0]
            var = stacked.var(axis=0, ddof=1)
            inv_mass = (k / (k + 5.0)) * var + 1e-3 * (5.0 / (k + 5.0))
            np.maximum(inv_mass, 1e-10, out=inv_mass)
            eps0 = _find_initial_step(target, q, logp, grad, inv_mass, rng)
            da = _DualAveraging(eps0, config.target_accept)

    eps = da.adapted if warmup > 0 else da.current
    draws = np.empty((config.sample_iters, target.dim))
    accepted = 0
    divergent = 0
    for i in range(config.sample_iters):
        q, logp, grad, _, was_accepted, was_divergent = _transition(
            target, q, logp, grad, eps, inv_mass, rng, config.max_leapfrog_steps
        )
        draws[i] = q
        accepted += was_accepted
        divergent += was_divergent
    if divergent > 0.5 * config.sample_iters:
        raise SamplingError(
            f"chain {chain_index}: {divergent}/{config.sample_iters} divergent transitions"
        )
    return draws, accepted / config.sample_iters, divergent, eps


def hmc_sample(
    target: LogDensityTarget,
    init: np.ndarray,
    config: HmcConfig,
    layout: ParameterLayout | None = None,
) -> PosteriorDraws:
    """Sample ``config.chains`` independent HMC chains from ``target``.

    Warmup adapts the step size by dual averaging toward ``target_accept``
    and estimates a diagonal mass matrix from warmup draws; warmup draws are
    discarded. Draws are returned on the constrained scale defined by
    ``layout`` (identity if omitted). Identical inputs, including the seed,
    give bit-identical output.
    """
    init = np.asarray(init, dtype=float)
    if init.shape != (target.dim,):
        raise ValueError("init must have length target.dim")
    if not np.all(np.isfinite(init)):
        raise ValueError("init must be finite")
    if layout is None:
        layout = identity_layout(target.dim)
    elif layout.total_dim != target.dim:
        raise ValueError("layout.total_dim does not match target.dim")

    workers = thread_budget(config.chains)
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(
                pool.map(lambda c: _run_chain(target, init, config, c), range(config.chains))
            )
    else:
        results = [_run_chain(target, init, config, c) for c in range(config.chains)]

    unconstrained = np.stack([r[0] for r in results])
    return PosteriorDraws(
        values=layout.constrain(unconstrained),
        layout=layout,
        accept_rate=np.array([r[1] for r in results]),
        divergences=np.array([r[2] for r in results]),
        step_size=np.array([r[3] for r in results]),
    )


def _split_halves(x: np.ndarray) -> np.ndarray:
    """Split each chain in half, doubling the chain count."""
    half = x.shape[1] // 2
    return np.concatenate([x[:, :half], x[:, half : 2 * half]], axis=0)


def _split_rhat(x: np.ndarray) -> float:
    s = _split_halves(x)
    n = s.shape[1]
    within_var = s.var(axis=1, ddof=1)
    if np.any(within_var == 0):
        return math.inf
    w = within_var.mean()
    b = n * s.mean(axis=1).var(ddof=1)
    var_plus = (n - 1) / n * w + b / n
    # var_plus can dip below w by sampling noise; report at least 1.
    return max(1.0, math.sqrt(var_plus / w))


def _autocov(y: np.ndarray) -> np.ndarray:
    n = len(y)
    yc = y - y.mean()
    size = 1
    while size < 2 * n:
        size *= 2
    f = np.fft.rfft(yc, size)
    return np.fft.irfft(f * np.conj(f), size)[:n].real / n


def _ess_single(x: np.ndarray) -> float:
    """Effective sample size of one parameter via Geyer's initial monotone sequence."""
    s = _split_halves(x)
    m, n = s.shape
    acov = np.empty((m, n))
    for i in range(m):
        acov[i] = _autocov(s[i])
    mean_acov = acov.mean(axis=0)
    mean_var = mean_acov[0] * n / (n - 1)
    if mean_var == 0:
        return math.nan
    var_plus = mean_var * (n - 1) / n + np.var(s.mean(axis=1), ddof=1)
    if var_plus == 0:
        return math.nan

    rho = np.zeros(n)
    rho[0] = 1.0
    rho_even = 1.0
    rho_odd = 1.0 - (mean_var - mean_acov[1]) / var_plus
    rho[1] = rho_odd
    t = 1
    while t < n - 2 and rho_even + rho_odd > 0:
        rho_even = 1.0 - (mean_var - mean_acov[t + 1]) / var_plus
        rho_odd = 1.0 - (mean_var - mean_acov[t + 2]) / var_plus
        if rho_even + rho_odd >= 0:
            rho[t + 1] = rho_even
            rho[t + 2] = rho_odd
        t += 2
    max_t = t - 2
    if rho_even > 0:
        rho[max_t + 1] = rho_even
    # Enforce nonincreasing pair sums.
    t = 1
    while t <= max_t - 2:
        if rho[t + 1] + rho[t + 2] > rho[t - 1] + rho[t]:
            rho[t + 1] = (rho[t - 1] + rho[t]) / 2.0
            rho[t + 2] = rho[t + 1]
        t += 2
    tau = -1.0 + 2.0 * rho[: max_t + 1].sum() + rho[max_t + 1]
    total = x.size
    if tau <= 0:
        return float(total)
    return float(min(total, m * n / tau))


def diagnose(draws: PosteriorDraws) -> Diagnostics:
    """Split-Rhat and ESS per parameter.

    A chain with zero variance yields Rhat = +inf rather than an error.
    """
    v = draws.values
    chains, iters, dim = v.shape
    if chains < 2:
        raise ValueError("diagnose requires at least 2 chains")
    if iters < 4:
        raise ValueError("diagnose requires at least 4 iterations per chain")
    rhat = np.array([_split_rhat(v[:, :, j]) for j in range(dim)])
    ess = np.array([_ess_single(v[:, :, j]) for j in range(dim)])
    return Diagnostics(rhat=rhat, ess=ess)
