"""Uncertainty energies and the latent-space Langevin sampler.

Two energies are defined on a stage-``s`` latent ``z`` through the rest of
the network:

* sampling energy ``-log h(z)[K+1]``: its Gibbs density is proportional to
  the uncertainty score, which is what the sampler targets;
* auxiliary energy ``-log sum_{i<=K} h(z)[i]``: the closed-world complement.

``exp(-sampling) + exp(-auxiliary) == 1`` pointwise.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field

import numpy as np

from . import diffcore as dc
from . import kernels
from .model import EowClassifier, log_softmax

logger = logging.getLogger(__name__)

INIT_MODES = ("data", "noise", "persistent")


class SamplingDiverged(FloatingPointError):
    """A Langevin round produced a non-finite gradient."""

    def __init__(self, step, diagnostics=None):
        super().__init__(f"non-finite energy gradient at SGLD step {step}")
        self.step = step
        self.diagnostics = diagnostics


@dataclass
class SgldConfig:
    alpha: float = 2.0
    sigma: float = 1e-3
    steps: int = 100
    stage: int = 2
    init_mode: str = "data"
    clip: float = 100.0
    reinit_prob: float = 0.05
    buffer_size: int = 10000
    # "proof" samples exp(log h[K+1]); "literal" flips the sign of the energy
    energy_sign: str = "proof"

    def __post_init__(self):
        if not self.alpha > 0:
            raise ValueError("alpha must be positive")
        if self.sigma < 0:
            raise ValueError("sigma must be non-negative")
        if self.steps < 0:
            raise ValueError("steps must be non-negative")
        if self.init_mode not in INIT_MODES:
            raise ValueError(f"init_mode must be one of {INIT_MODES}")
        if self.energy_sign not in ("proof", "literal"):
            raise ValueError("energy_sign must be 'proof' or 'literal'")
        if not 0 <= self.reinit_prob <= 1:
            raise ValueError("reinit_prob must lie in [0, 1]")

    @property
    def sign(self) -> float:
        return 1.0 if self.energy_sign == "proof" else -1.0


@dataclass
class ChainState:
    z: np.ndarray
    stage: int
    buffer: "PersistentBuffer | None" = None
    slots: np.ndarray | None = None


@dataclass
class PersistentBuffer:
    """Stored latents for persistent chains, one buffer per stage."""

    stage: int
    capacity: int
    z: np.ndarray = field(default_factory=lambda: np.empty((0, 0)))

    def __len__(self):
        return len(self.z)


@dataclass
class RoundDiagnostics:
    round_id: int
    energy_before: float
    energy_after: float
    grad_norm_mean: float
    grad_norm_max: float
    failed_step: int = -1


def sampling_energy(model: EowClassifier, z, s: int, sign: float = 1.0) -> float:
    """Batch-mean of ``-log h[K+1]`` evaluated from stage ``s``."""
    logits = model.head_from_stage(np.atleast_2d(z), s)
    if not np.all(np.isfinite(logits)):
        raise dc.NonFiniteError("non-finite logits")
    return float(np.mean(-sign * log_softmax(logits)[:, model.num_classes]))


def sampling_energy_naive(model: EowClassifier, z, s: int) -> float:
    """Same value as :func:`sampling_energy` via softmax then log; a cross-check."""
    logits = model.head_from_stage(np.atleast_2d(z), s)
    e = np.exp(logits)
    return float(np.mean(-np.log(e[:, model.num_classes] / e.sum(axis=1))))


def auxiliary_energy(model: EowClassifier, z, s: int) -> float:
    """Batch-mean of ``-log sum_{i<=K} h[i]`` evaluated from stage ``s``."""
    logits = model.head_from_stage(np.atleast_2d(z), s)
    if not np.all(np.isfinite(logits)):
        raise dc.NonFiniteError("non-finite logits")
    return float(np.mean(-closed_log_mass(logits)))


def closed_log_mass(logits) -> np.ndarray:
    """``log sum_{i<=K} h[i]`` per row, computed without forming the softmax."""
    logits = np.atleast_2d(logits)
    k = logits.shape[1] - 1
    m = logits.max(axis=1, keepdims=True)
    e = np.exp(logits - m)
    return np.log(e[:, :k].sum(axis=1)) - np.log(e.sum(axis=1))


def pointwise_energies(model: EowClassifier, z, s: int):
    """Per-row ``(sampling, auxiliary)`` energies."""
    logits = model.head_from_stage(np.atleast_2d(z), s)
    return -log_softmax(logits)[:, model.num_classes], -closed_log_mass(logits)


def init_chain(model: EowClassifier, batch, config: SgldConfig, rng, buffer: PersistentBuffer | None = None):
    batch = np.atleast_2d(np.asarray(batch, dtype=np.float64))
    if batch.shape[0] == 0:
        raise ValueError("cannot start chains from an empty batch")
    s = config.stage
    width = model.stage_width(s)
    n = batch.shape[0]
    if config.init_mode == "data":
        return ChainState(model.encode_to_stage(batch, s), s)
    if config.init_mode == "noise" or buffer is None or len(buffer) < buffer.capacity:
        # persistent chains start from noise until the buffer has filled up
        z = rng.standard_normal((n, width))
        if config.init_mode == "persistent":
            return ChainState(z, s, buffer, None)
        return ChainState(z, s)
    if buffer.stage != s:
        raise ValueError("persistent buffer belongs to a different stage")
    slots = rng.integers(0, len(buffer), size=n)
    z = buffer.z[slots].copy()
    fresh = rng.random(n) < config.reinit_prob
    z[fresh] = rng.standard_normal((int(fresh.sum()), width))
    return ChainState(z, s, buffer, slots)


def sgld_step(model: EowClassifier, chain: ChainState, config: SgldConfig, rng, backend=None) -> ChainState:
    """One Langevin update of every chain; parameters are read, never written."""
    noise = rng.standard_normal((1,) + chain.z.shape)
    z, _, _, _, _, failed = kernels.sgld_run(
        chain.z, model.theta, model.layout, chain.stage, noise,
        config.alpha, config.sigma, config.clip, config.sign, backend,
    )
    if failed >= 0:
        raise SamplingDiverged(failed)
    return ChainState(z, chain.stage, chain.buffer, chain.slots)


def run_chain(model: EowClassifier, chain: ChainState, config: SgldConfig, rng, backend=None, round_id=0):
    noise = rng.standard_normal((config.steps,) + chain.z.shape)
    z, e0, e1, gmean, gmax, failed = kernels.sgld_run(
        chain.z, model.theta, model.layout, chain.stage, noise,
        config.alpha, config.sigma, config.clip, config.sign, backend,
    )
    diag = RoundDiagnostics(round_id, float(e0.mean()), float(e1.mean()), gmean, gmax, failed)
    if failed >= 0:
        raise SamplingDiverged(failed, diag)
    return ChainState(z, chain.stage, chain.buffer, chain.slots), diag


def sample(model: EowClassifier, batch, config: SgldConfig, rng, buffer=None, backend=None, round_id=0):
    """Initialise chains from ``batch`` and run ``config.steps`` Langevin updates.

    Returns ``(z_T, diagnostics)``. The latents are plain arrays, so nothing
    links them back to the parameters.
    """
    chain = init_chain(model, batch, config, rng, buffer)
    chain, diag = run_chain(model, chain, config, rng, backend, round_id)
    if config.init_mode == "persistent" and buffer is not None:
        _store(buffer, chain)
    return chain.z, diag


def _store(buffer: PersistentBuffer, chain: ChainState):
    if chain.slots is not None:
        buffer.z[chain.slots] = chain.z
    elif len(buffer) == 0:
        buffer.z = chain.z[: buffer.capacity].copy()
    else:
        room = buffer.capacity - len(buffer)
        buffer.z = np.concatenate([buffer.z, chain.z[:room]])


def langevin(grad_fn, z0, alpha, sigma, steps, rng, clip=np.inf, trace=None):
    """Generic Langevin iteration for an arbitrary energy gradient.

    ``trace``, when given, is called with ``z`` after every step.
    """
    z = np.array(z0, dtype=np.float64)
    for t in range(steps):
        g = np.asarray(grad_fn(z), dtype=np.float64)
        if not np.all(np.isfinite(g)):
            raise SamplingDiverged(t)
        norm = np.sqrt((np.atleast_2d(g) ** 2).sum(axis=-1))
        if np.any(norm > clip):
            g = g * np.minimum(1.0, clip / np.maximum(norm, 1e-300)).reshape(np.shape(g)[:-1] + (1,))
        z = z - 0.5 * alpha * g + sigma * rng.standard_normal(z.shape)
        if trace is not None:
            trace(z)
    return z


class DiagnosticsLog:
    """CSV sink for one row per SGLD round."""

    columns = ["round", "energy_before", "energy_after", "grad_norm_mean", "grad_norm_max", "failed_step"]

    def __init__(self, path):
        self._f = open(path, "w", newline="")
        self._w = csv.writer(self._f)
        self._w.writerow(self.columns)

    def write(self, d: RoundDiagnostics):
        self._w.writerow(
            [d.round_id, repr(d.energy_before), repr(d.energy_after),
             repr(d.grad_norm_mean), repr(d.grad_norm_max), d.failed_step]
        )

    def close(self):
        self._f.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()
