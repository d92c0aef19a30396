"""Activation maximisation by gradient injection.

Each step runs a forward pass up to the target layer, seeds that layer's
gradient with ones at the target nodes and zeros elsewhere, backpropagates
to the image and takes an RMS-normalised ascent step clamped to the pixel
range.  The loop stops once the relative L2 change of the image falls below
``stability_tol`` or after ``max_iters`` steps.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .exceptions import NonFiniteError, ParameterError, StalledError
from .netgraph import Injection, ModelGraph, NodeRef, backward_injected, forward, injected_objective
from .tensor import SplitMix64, derive_seed, randn_tensor

RMS_EPS = 1e-8


@dataclass(frozen=True)
class DreamConfig:
    step_size: float = 0.05
    max_iters: int = 512
    stability_tol: float = 1e-4
    clamp_min: float = 0.0
    clamp_max: float = 1.0
    jitter_radius: int = 0
    seed: int = 0
    init_mean: float = 0.5
    init_std: float = 0.15

    def __post_init__(self):
        if not self.step_size > 0:
            raise ParameterError(f"step_size must be positive, got {self.step_size}")
        if self.max_iters < 1:
            raise ParameterError(f"max_iters must be >= 1, got {self.max_iters}")
        if self.stability_tol < 0:
            raise ParameterError(f"stability_tol must be >= 0, got {self.stability_tol}")
        if not self.clamp_min < self.clamp_max:
            raise ParameterError("clamp_min must be below clamp_max")
        if self.jitter_radius < 0:
            raise ParameterError("jitter_radius must be >= 0")
        if self.init_std < 0:
            raise ParameterError("init_std must be >= 0")

    def to_dict(self) -> dict:
        return asdict(self)

    def digest(self) -> str:
        text = json.dumps(self.to_dict(), sort_keys=True)
        return hashlib.sha256(text.encode()).hexdigest()[:16]

    def replace(self, **changes) -> "DreamConfig":
        return replace(self, **changes)


@dataclass
class DreamOutcome:
    image: np.ndarray
    objective_trace: list
    final_objective: float
    seed: int
    config_digest: str
    target: dict
    stalled: bool = False
    config: dict = field(default_factory=dict)

    @property
    def iterations_run(self) -> int:
        return len(self.objective_trace)

    def sidecar(self, **extra) -> dict:
        """JSON-ready description of the run (everything but the pixels)."""
        doc = {
            "seed": self.seed,
            "config": self.config,
            "config_digest": self.config_digest,
            "node": self.target,
            "iterations": self.iterations_run,
            "final_objective": self.final_objective,
            "stalled": self.stalled,
            "trace": self.objective_trace,
        }
        doc.update(extra)
        return doc


def _objective_and_grad(model, image, inj):
    cache = forward(model, image, upto=inj.layer)
    objective = float(injected_objective(cache, inj, model.shapes)[0])
    if not np.isfinite(objective):
        raise NonFiniteError("non-finite objective")
    return objective, backward_injected(model, cache, inj)


def dream_step(model: ModelGraph, image, inj: Injection, cfg: DreamConfig, rng=None):
    """One ascent step.

    Returns ``(new_image, objective, stalled)`` where ``objective`` is the
    summed target activation of the *input* image and ``stalled`` is set when
    the input gradient is identically zero (the image is then unchanged).
    """
    image = np.asarray(image, dtype=np.float32)
    if image.min() < cfg.clamp_min or image.max() > cfg.clamp_max:
        raise ParameterError("image outside the clamp range")
    dy = dx = 0
    if cfg.jitter_radius > 0:
        if rng is None:
            raise ParameterError("jitter needs an rng")
        span = 2 * cfg.jitter_radius + 1
        dy = rng.below(span) - cfg.jitter_radius
        dx = rng.below(span) - cfg.jitter_radius
        image = np.roll(image, (dy, dx), axis=(2, 3))
    objective, g = _objective_and_grad(model, image, inj)
    if not np.any(g):
        new = image
        stalled = True
    else:
        rms = np.float32(np.sqrt(np.mean(np.square(g, dtype=np.float64))))
        step = np.float32(cfg.step_size) * g / (rms + np.float32(RMS_EPS))
        new = np.clip(image + step, cfg.clamp_min, cfg.clamp_max).astype(np.float32)
        stalled = False
    if dy or dx:
        new = np.roll(new, (-dy, -dx), axis=(2, 3))
    return new, objective, stalled


def _seeded_start(model, cfg):
    rng = SplitMix64(cfg.seed)
    img = randn_tensor(rng, (1, *model.input_shape), cfg.init_mean, cfg.init_std)
    return np.clip(img, cfg.clamp_min, cfg.clamp_max), rng


def initial_image(model: ModelGraph, cfg: DreamConfig) -> np.ndarray:
    """The clamped noise image a run with ``cfg.seed`` starts from."""
    return _seeded_start(model, cfg)[0]


def _target_dict(inj: Injection) -> dict:
    if inj.channel is not None:
        return {"layer": inj.layer, "channel": inj.channel, "tiled": True}
    (ch, r, c), = inj.targets
    return {"layer": inj.layer, "channel": ch, "row": r, "col": c, "tiled": False}


def run_dream(model: ModelGraph, inj: Injection, cfg: DreamConfig, init=None) -> DreamOutcome:
    """Ascent loop shared by single-node and tiled visualisation."""
    image, rng = _seeded_start(model, cfg)
    if init is not None:
        image = np.clip(np.asarray(init, np.float32).reshape(1, *model.input_shape),
                        cfg.clamp_min, cfg.clamp_max)
    trace = []
    stalled = False
    for _ in range(cfg.max_iters):
        new, objective, stalled = dream_step(model, image, inj, cfg, rng)
        trace.append(objective)
        if stalled:
            break
        change = np.linalg.norm((new - image).astype(np.float64))
        scale = np.linalg.norm(image.astype(np.float64))
        image = new
        if change <= cfg.stability_tol * max(scale, 1e-12):
            break
    cache = forward(model, image, upto=inj.layer)
    final = float(injected_objective(cache, inj, model.shapes)[0])
    outcome = DreamOutcome(
        image=image,
        objective_trace=trace,
        final_objective=final,
        seed=cfg.seed,
        config_digest=cfg.digest(),
        target=_target_dict(inj),
        stalled=stalled,
        config=cfg.to_dict(),
    )
    if stalled and len(trace) == 1:
        raise StalledError(
            f"input gradient is zero at the first step for target {outcome.target}", outcome
        )
    return outcome


def visualize_node(model: ModelGraph, node: NodeRef, cfg: DreamConfig | None = None,
                   init=None) -> DreamOutcome:
    """Preferred input of one node, starting from seeded noise (or ``init``)."""
    cfg = cfg or DreamConfig()
    return run_dream(model, Injection.node(NodeRef(*node)), cfg, init)


def visualize_tiled(model: ModelGraph, layer: int, channel: int,
                    cfg: DreamConfig | None = None, init=None) -> DreamOutcome:
    """Preferred input of one channel summed over all of its positions."""
    cfg = cfg or DreamConfig()
    if not (1 <= layer <= model.n_layers and model.layers[layer - 1].spatial):
        raise ParameterError(f"layer {layer} has no spatial output")
    return run_dream(model, Injection.tiled(layer, channel), cfg, init)


def outcome_seeds(base_seed: int, n: int) -> list[int]:
    return [derive_seed(base_seed, i) for i in range(n)]


def batch_outcomes(model: ModelGraph, target, cfg: DreamConfig | None = None,
                   n: int = 3) -> list[DreamOutcome]:
    """``n`` independent runs with seeds ``derive_seed(cfg.seed, i)``.

    ``target`` is a :class:`NodeRef` for single-node runs or an
    :class:`Injection` (typically tiled).
    """
    cfg = cfg or DreamConfig()
    if n < 1:
        raise ParameterError(f"n must be >= 1, got {n}")
    inj = target if isinstance(target, Injection) else Injection.node(NodeRef(*target))
    inj.seed(model.shapes)
    return [run_dream(model, inj, cfg.replace(seed=s)) for s in outcome_seeds(cfg.seed, n)]
