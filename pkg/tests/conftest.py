import numpy as np
import pytest

from clothid.adjoint import ClipData
from clothid.lattice import GridSpec, TopologyFlags, build_lattice
from clothid.losses import force_loss, impulse_loss, position_loss
from clothid.simcore import ExternalForceSpec, MaterialParams, SimState, net_force, simulate


def numpy_clip_loss(net, params, clip: ClipData, weights) -> float:
    """Data loss of one clip computed with the plain numpy simulator and loss functions.

    Independent of the compiled forward/backward kernels, so it serves as the
    finite-difference oracle for the reverse-mode gradients.
    """
    x0, v0 = clip.initial_state()
    T = len(clip.xhat)
    tr = simulate(net, params, SimState(x0, v0, clip.pinned), clip.masses, clip.ext,
                  steps=T - 2, dt=clip.dt)
    F = np.stack([net_force(net, params, tr.x[j], tr.v[j], clip.masses, clip.ext) for j in range(T - 2)])
    free = ~clip.pinned
    return (weights.force * force_loss(F, clip.fhat, free)
            + weights.impulse * impulse_loss(F, clip.fhat, clip.dt, free)
            + weights.position * position_loss(tr.x[1:], clip.xhat[2:], free))


def draped_clip(rows=4, cols=4, side=1.5, flags=TopologyFlags(bending=False), steps=60,
                start=5, length=52, seed=0, truth=None):
    """Ground-truth params and a clip cut from a tilted sheet hanging from two corners."""
    net = build_lattice(GridSpec(rows, cols, side, side), flags)
    rng = np.random.default_rng(seed)
    S, P = net.n_springs, net.n_particles
    if truth is None:
        truth = MaterialParams(rng.uniform(10, 100, S), np.full(S, 6.0))
    m = np.full(P, 0.1)
    ext = ExternalForceSpec()
    pinned = np.zeros(P, bool)
    pinned[[0, cols - 1]] = True
    x0 = net.rest_positions.copy()
    x0[:, 2] = 0.3 * x0[:, 0]
    tr = simulate(net, truth, SimState(x0, np.zeros_like(x0), pinned), m, ext, steps=steps, dt=1e-3)
    clip = ClipData(tr.x[start:start + length], pinned, m, 1e-3, ext)
    return net, truth, clip, rng


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def fd_gradient(net, params, clip, weights, group, scale, order=2):
    """Central finite-difference gradient of ``numpy_clip_loss`` wrt one parameter group.

    Step per parameter is ``scale * max(1, |theta|)``.  ``order=4`` uses the
    five-point stencil, whose O(h^4) truncation error lets a larger step keep
    rounding noise small on long clips.
    """
    base = getattr(params, group)
    out = np.empty(len(base))
    for s in range(len(base)):
        th = base[s]
        h = scale * max(1.0, abs(th))

        def L(d):
            p = params.copy()
            getattr(p, group)[s] = th + d
            return numpy_clip_loss(net, p, clip, weights)

        if order == 4:
            out[s] = (-L(2 * h) + 8 * L(h) - 8 * L(-h) + L(-2 * h)) / (12 * h)
        else:
            out[s] = (L(h) - L(-h)) / (2 * h)
    return out


def relative_error(a, b):
    """Entrywise |a - b| / max(|a|, |b|), taking 0 where both are exactly 0."""
    den = np.maximum(np.abs(a), np.abs(b))
    return np.where(den > 0, np.abs(a - b) / np.where(den > 0, den, 1.0), 0.0)


def perturbed(truth, rng):
    """Parameters scattered around the truth so the data loss has nonzero gradients."""
    S = len(truth.k)
    return MaterialParams(truth.k * rng.uniform(0.7, 1.3, S), truth.b * rng.uniform(0.5, 1.5, S))


SMALL_PIPELINE_TOML = """
seed = 5

[source]
rows = 6
cols = 6
width = 2.0
height = 2.0
damping = 1.0
duration = 0.4

[rollouts]
count = 3

[surrogate]
rows = 6
cols = 6

[clipset]
T = 100
keep_fraction = 1.0
low_velocity_seconds = 0.2
low_velocity_keep = 1.0

[train]
stiffness_iters = 6
damping_iters = 4
batch_size = 4
k_scale = 50.0
b_init = 1.0
lr_k = 2.0
"""


def run_pipeline(root, toml_text=SMALL_PIPELINE_TOML, train_extra=()):
    """gen-source, resample, clipset, train and eval through the CLI entry point.

    Returns a dict of the produced paths; asserts every step exits with 0.
    """
    from pathlib import Path

    from clothid.cli import main

    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    cfg = root / "config.toml"
    cfg.write_text(toml_text)
    p = {"config": cfg, "source": root / "source", "targets": root / "targets",
         "clips": root / "clips.json", "model": root / "model.json", "log": root / "train.jsonl",
         "motion": root / "motion.csv", "params": root / "params.csv"}
    c = ["--config", str(cfg)]
    assert main(["gen-source", *c, "--out", str(p["source"])]) == 0
    assert main(["resample", *c, "--manifest", str(p["source"] / "manifest.json"),
                 "--out", str(p["targets"])]) == 0
    assert main(["clipset", *c, "--manifest", str(p["targets"] / "manifest.json"),
                 "--out", str(p["clips"])]) == 0
    assert main(["train", *c, "--targets", str(p["targets"] / "manifest.json"), "--clips", str(p["clips"]),
                 "--out", str(p["model"]), "--log", str(p["log"]), *train_extra]) == 0
    assert main(["eval", "--model", str(p["model"]), "--targets", str(p["targets"] / "manifest.json"),
                 "--out", str(p["motion"]), "--truth", str(p["source"] / "source_model.json"),
                 "--params-out", str(p["params"])]) == 0
    return p


ACCEPTANCE_RESULTS: list = []


def record_acceptance(number: int, title: str, ok: bool, detail: str = ""):
    """Print and remember one acceptance verdict; the session summary lists them all."""
    line = f"criterion {number:2d} {'PASS' if ok else 'FAIL'}  {title}" + (f"  [{detail}]" if detail else "")
    print(line)
    ACCEPTANCE_RESULTS.append((number, line))
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_RESULTS:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(ACCEPTANCE_RESULTS):
            terminalreporter.write_line(line)
