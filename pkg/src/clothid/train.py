"""Dual-pass (stiffness, then damping) and single-pass training with Adam.

Batches are drawn by a stateless rule keyed on (seed, pass, iteration), so a
resumed run draws exactly the batches the uninterrupted run would have.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from .adjoint import ClipData, batch_loss_and_grad
from .datagen import ClipSet
from .lattice import SpringNetwork
from .losses import LossWeights
from .optim import AdamConfig, AdamState, adam_step
from .resample import TargetTrajectory
from .simcore import ExternalForceSpec, MaterialParams

log = logging.getLogger(__name__)

PASSES = ("stiffness", "damping", "joint")
MASS_SPRING_WEIGHTS = LossWeights(force=1.0, impulse=10.0)
FEM_STIFFNESS_WEIGHTS = LossWeights(force=0.0, impulse=1.0)
FEM_DAMPING_WEIGHTS = LossWeights(force=1.0, impulse=0.0)


@dataclass
class TrainConfig:
    """Training schedule, optimizer and initialization settings.

    ``k_scale`` is the stiffness guess k-bar; ``None`` selects the gravity
    balance heuristic ``rho A g / (S * 0.05)``.  Stiffness starts uniform in
    ``[1 - k_spread, 1 + k_spread] * k_scale``.  ``b_init`` of ``None`` gives
    ``0.1 * k_scale * dt``.
    """

    stiffness_iters: int = 128
    damping_iters: int = 128
    rounds: int = 1
    joint_iters: int | None = None
    batch_size: int = 32
    lr_k: float = 1.0
    lr_b: float = 0.1
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    k_scale: float | None = None
    k_spread: float = 0.5
    b_init: float | None = None
    T: int = 500
    seed: int = 0
    checkpoint_every: int = 0
    stiffness_weights: LossWeights = MASS_SPRING_WEIGHTS
    damping_weights: LossWeights = MASS_SPRING_WEIGHTS

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.stiffness_iters < 1 or self.damping_iters < 1:
            raise ValueError("pass iteration counts must be >= 1")
        if self.rounds < 1:
            raise ValueError("rounds must be >= 1")
        if self.joint_iters is not None and self.joint_iters < 1:
            raise ValueError("joint_iters must be >= 1")
        if not 0 <= self.k_spread < 1:
            raise ValueError("k_spread must lie in [0, 1)")
        if isinstance(self.stiffness_weights, dict):
            self.stiffness_weights = LossWeights(**self.stiffness_weights)
        if isinstance(self.damping_weights, dict):
            self.damping_weights = LossWeights(**self.damping_weights)

    @property
    def adam(self) -> AdamConfig:
        return AdamConfig({"k": self.lr_k, "b": self.lr_b}, self.beta1, self.beta2, self.eps)

    def to_dict(self) -> dict:
        return asdict(self)


def default_k_scale(rho: float, area: float, n_springs: int, g: float = 9.81,
                    strain: float = 0.05) -> float:
    """Stiffness that holds the cloth's weight at the given mean strain."""
    return rho * area * g / (n_springs * strain)


def init_params(net: SpringNetwork, config: TrainConfig, rho: float, dt: float) -> MaterialParams:
    k_scale = config.k_scale
    if k_scale is None:
        k_scale = default_k_scale(rho, net.spec.area, net.n_springs)
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, 0xC0FFEE]))
    k = k_scale * rng.uniform(1.0 - config.k_spread, 1.0 + config.k_spread, net.n_springs)
    b0 = 0.1 * k_scale * dt if config.b_init is None else config.b_init
    return MaterialParams(k, np.full(net.n_springs, float(b0)))


def make_clips(clipset: ClipSet, targets: dict, subset: str) -> list[ClipData]:
    """ClipData for one subset; ``targets`` maps rollout id to TargetTrajectory."""
    out = []
    for r, s in clipset.subset(subset):
        tgt: TargetTrajectory = targets[r]
        ext = ExternalForceSpec(gravity=tgt.gravity, rayleigh_b=tgt.rayleigh_b)
        out.append(ClipData(tgt.xhat[s:s + clipset.T], tgt.pinned, tgt.masses, tgt.dt, ext, (r, s)))
    return out


def batch_indices(n: int, batch: int, seed: int, pass_name: str, iteration: int,
                  round_: int = 0) -> np.ndarray:
    """Sorted clip indices of one batch, a pure function of its arguments."""
    key = [seed, PASSES.index(pass_name), iteration] + ([round_] if round_ else [])
    rng = np.random.default_rng(np.random.SeedSequence(key))
    return np.sort(rng.choice(n, size=min(batch, n), replace=False))


@dataclass
class TrainState:
    """Everything needed to resume: parameters, optimizer moments, progress."""

    params: MaterialParams
    adam: AdamState = field(default_factory=AdamState)
    pass_name: str = "stiffness"
    iteration: int = 0  # global iteration counter across passes
    pass_iteration: int = 0
    done: bool = False
    round: int = 0

    def to_dict(self) -> dict:
        return {"k": self.params.k.tolist(), "b": self.params.b.tolist(), "adam": self.adam.to_dict(),
                "pass": self.pass_name, "iteration": self.iteration,
                "pass_iteration": self.pass_iteration, "done": self.done, "round": self.round}

    @classmethod
    def from_dict(cls, d: dict) -> "TrainState":
        return cls(MaterialParams(np.asarray(d["k"], float), np.asarray(d["b"], float)),
                   AdamState.from_dict(d["adam"]), d["pass"], int(d["iteration"]),
                   int(d["pass_iteration"]), bool(d["done"]), int(d.get("round", 0)))


class TrainingAborted(RuntimeError):
    def __init__(self, message, iteration):
        super().__init__(message)
        self.iteration = iteration


def _run_pass(net, state: TrainState, clips, pass_name: str, iters: int, weights: LossWeights,
              frozen: tuple, config: TrainConfig, log_fn, checkpoint_fn, max_bad: int = 5):
    if not clips:
        raise ValueError(f"{pass_name} pass has no clips")
    adam_cfg = config.adam
    bad = 0
    if state.pass_name != pass_name:
        state.pass_name, state.pass_iteration = pass_name, 0
    while state.pass_iteration < iters:
        idx = batch_indices(len(clips), config.batch_size, config.seed, pass_name,
                            state.pass_iteration, state.round)
        res = batch_loss_and_grad(net, state.params, [clips[i] for i in idx], weights,
                                  checkpoint_every=config.checkpoint_every)
        if not np.isfinite(res.loss):
            bad += 1
            if bad >= max_bad:
                raise TrainingAborted(f"{pass_name} pass: {bad} consecutive non-finite losses "
                                      f"at iteration {state.iteration}", state.iteration)
        else:
            bad = 0
        grads = {"k": res.grad_k, "b": res.grad_b}
        for g in frozen:
            grads[g] = np.zeros_like(grads[g])
        groups, state.adam = adam_step({"k": state.params.k, "b": state.params.b}, grads,
                                       state.adam, adam_cfg, frozen=frozen)
        state.params = MaterialParams(groups["k"], groups["b"])
        rec = {"iteration": state.iteration, "pass": pass_name, "round": state.round,
               "pass_iteration": state.pass_iteration,
               "loss": res.loss, "force": res.force, "impulse": res.impulse, "position": res.position,
               "k_neg": res.k_neg, "b_neg": res.b_neg,
               "grad_norm_k": float(np.linalg.norm(grads["k"])),
               "grad_norm_b": float(np.linalg.norm(grads["b"])),
               "k_mean": float(state.params.k.mean()), "k_std": float(state.params.k.std()),
               "b_mean": float(state.params.b.mean()), "b_std": float(state.params.b.std()),
               "clips": int(len(idx)), "skipped": len(res.skipped)}
        log_fn(rec)
        state.iteration += 1
        state.pass_iteration += 1
        if checkpoint_fn is not None:
            checkpoint_fn(state)
    return state


def _logger(path):
    if path is None:
        return lambda rec: log.debug("%s", rec)

    def write(rec):
        with open(path, "a") as fh:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
        log.debug("%s", rec)
    return write


def dual_pass_train(net: SpringNetwork, clipset: ClipSet, targets: dict, config: TrainConfig,
                    init: MaterialParams | None = None, rho: float | None = None,
                    log_path=None, state: TrainState | None = None, checkpoint_fn=None):
    """Stiffness on low-velocity clips with damping frozen, then damping with stiffness frozen.

    With ``config.rounds > 1`` the pair of passes repeats, each stiffness
    pass starting from the damping learned in the round before.  Returns
    ``(params, state)``.  Pass a ``state`` from a checkpoint to resume;
    iteration numbering continues from where it stopped.
    """
    low = make_clips(clipset, targets, "low_velocity")
    gen = make_clips(clipset, targets, "general")
    if not low:
        raise ValueError("clip set has no low-velocity clips")
    if not gen:
        raise ValueError("clip set has no general clips")
    if state is None:
        if init is None:
            init = init_params(net, config, rho if rho is not None else 1.0, low[0].dt)
        state = TrainState(init.copy())
    log_fn = _logger(log_path)
    while not state.done:
        if state.pass_name == "stiffness":
            _run_pass(net, state, low, "stiffness", config.stiffness_iters, config.stiffness_weights,
                      ("b",), config, log_fn, checkpoint_fn)
        _run_pass(net, state, gen, "damping", config.damping_iters, config.damping_weights,
                  ("k",), config, log_fn, checkpoint_fn)
        if state.round + 1 < config.rounds:
            state.round += 1
            state.pass_name, state.pass_iteration = "stiffness", 0
        else:
            state.done = True
        if checkpoint_fn is not None:
            checkpoint_fn(state)
    return state.params, state


def single_pass_train(net: SpringNetwork, clipset: ClipSet, targets: dict, config: TrainConfig,
                      init: MaterialParams | None = None, rho: float | None = None,
                      log_path=None, state: TrainState | None = None, checkpoint_fn=None):
    """Both parameter groups at once on the general clip set.

    Runs ``joint_iters`` iterations (default: the total iteration count of
    the dual schedule) with the stiffness-pass loss weights.
    """
    gen = make_clips(clipset, targets, "general")
    if not gen:
        raise ValueError("clip set has no general clips")
    iters = config.joint_iters or config.rounds * (config.stiffness_iters + config.damping_iters)
    if state is None:
        if init is None:
            init = init_params(net, config, rho if rho is not None else 1.0, gen[0].dt)
        state = TrainState(init.copy(), pass_name="joint")
    if not state.done:
        _run_pass(net, state, gen, "joint", iters, config.stiffness_weights, (), config,
                  _logger(log_path), checkpoint_fn)
        state.done = True
        if checkpoint_fn is not None:
            checkpoint_fn(state)
    return state.params, state
