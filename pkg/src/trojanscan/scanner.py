"""Class-agnostic trigger reverse-engineering.

The scanner looks for the overlay that makes the model's prediction vectors
for all scanning images collapse onto each other: it minimizes the mean
pairwise distance between prediction rows, never iterating over candidate
target classes and never reading labels. Two search modes:

  * fixed-size: a known s x s patch with one scalar opacity, blended at a
    fixed window (backdoored models are trained location-invariant, so one
    location suffices);
  * regularized: a full-image patch with per-pixel opacity, plus an L1
    penalty on the opacity map so the mass concentrates on a small window
    when a small trigger exists.

Both optimize raw variables through the (tanh(z) + 1) / 2 clamp so pixel and
opacity values stay inside (0, 1), using Adam with multiple random restarts;
the restart with the lowest evaluation loss provides the recovered trigger.
"""

import json
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as T
from .errors import ConfigError, FormatError, ShapeError
from .model import logits_graph
from .optim import Adam
from .poison import Fixed, TriggerSpec, trigger_from_dict, trigger_to_dict


@dataclass(frozen=True)
class FixedSizeMode:
    size: int
    location: tuple = None  # (x, y); None centers the window


@dataclass(frozen=True)
class RegularizedMode:
    lam: float = 0.01


@dataclass
class ScanConfig:
    mode: object
    restarts: int = 50
    steps: int = 1000
    batch: int = 32
    lr: float = 0.1
    seed: int = 0
    plateau_tol: float = 1e-6
    plateau_window: int = 50
    eval_batch: int = 96
    eval_every: int = 20

    def validate(self):
        if self.restarts < 1:
            raise ConfigError("restarts must be >= 1")
        if self.steps < 0 or self.batch < 2:
            raise ConfigError("need steps >= 0 and batch >= 2")
        if isinstance(self.mode, RegularizedMode):
            if self.mode.lam < 0:
                raise ConfigError(f"regularization weight must be >= 0, got {self.mode.lam}")
        elif isinstance(self.mode, FixedSizeMode):
            if self.mode.size < 1:
                raise ConfigError(f"trigger size must be >= 1, got {self.mode.size}")
        else:
            raise ConfigError(f"unknown scan mode {self.mode!r}")


@dataclass
class RestartResult:
    index: int
    final_loss: float
    steps_run: int
    trajectory: list  # [step, eval loss] pairs
    trigger: TriggerSpec


@dataclass
class ScanResult:
    mode: str
    recovered: TriggerSpec  # best restart's trigger
    final_loss: float
    trajectory: list
    best_index: int
    restarts: list
    wallclock_s: float
    config: dict = field(default_factory=dict)


def reparameterize(z):
    """Differentiable clamp of raw variables into (0, 1): (tanh(z) + 1) / 2."""
    return T.mul(T.add(T.tanh(z), 1.0), 0.5)


def pairwise_loss(probs):
    """Mean smoothed 2-norm distance over ordered row pairs (j != k).

    Normalizing the double sum by N(N-1) keeps the loss scale independent of
    how many rows the batch holds, so a minibatch is an unbiased estimator
    of the full-set value.
    """
    n = probs.shape[0]
    if probs.data.ndim != 2 or n < 2:
        raise ShapeError(f"pairwise_loss needs a (N>=2, C) matrix, got {probs.shape}")
    left = T.reshape(probs, (n, 1, probs.shape[1]))
    right = T.reshape(probs, (1, n, probs.shape[1]))
    dists = T.l2norm_last(T.sub(left, right))  # (n, n)
    off_diag = T.Tensor((1.0 - np.eye(n)).astype(probs.data.dtype))
    total = T.tsum(T.mul(dists, off_diag))
    return T.mul(total, 1.0 / (n * (n - 1)))


class _FixedSizeSearch:
    def __init__(self, arch, mode):
        h, w = arch.input_hw
        s = mode.size
        if s > min(h, w):
            raise ConfigError(f"trigger size {s} exceeds image {h}x{w}")
        if mode.location is None:
            loc = ((w - s) // 2, (h - s) // 2)
        else:
            loc = tuple(mode.location)
            if not (0 <= loc[0] <= w - s and 0 <= loc[1] <= h - s):
                raise ConfigError(f"window at {loc} size {s} exceeds image {h}x{w}")
        self.size, self.loc, self.hw = s, loc, (h, w)
        mask = np.zeros((1, 1, h, w), dtype=np.float32)
        mask[:, :, loc[1] : loc[1] + s, loc[0] : loc[0] + s] = 1.0
        self.window = T.Tensor(mask)

    def init_vars(self, rng):
        return {
            "z_patch": T.Tensor(rng.standard_normal((1, 3, self.size, self.size)).astype(np.float32), requires_grad=True),
            "z_alpha": T.Tensor(rng.standard_normal((1, 1, 1, 1)).astype(np.float32), requires_grad=True),
        }

    def overlay(self, zvars, x):
        h, w = self.hw
        delta = reparameterize(zvars["z_patch"])
        alpha = reparameterize(zvars["z_alpha"])
        placed = T.embed(delta, (1, 3, h, w), (0, 0, self.loc[1], self.loc[0]))
        a = T.mul(alpha, self.window)
        return T.add(T.mul(T.sub(1.0, a), x), T.mul(a, placed))

    def penalty(self, zvars):
        return None

    def trigger(self, zvars):
        patch = _squash(zvars["z_patch"].data)[0].transpose(1, 2, 0)
        alpha = float(_squash(zvars["z_alpha"].data).reshape(()))
        return TriggerSpec(patch, alpha, Fixed(*self.loc))


class _RegularizedSearch:
    def __init__(self, arch, mode):
        self.hw = arch.input_hw
        self.lam = mode.lam

    def init_vars(self, rng):
        h, w = self.hw
        return {
            "z_patch": T.Tensor(rng.standard_normal((1, 3, h, w)).astype(np.float32), requires_grad=True),
            "z_alpha": T.Tensor(rng.standard_normal((1, 1, h, w)).astype(np.float32), requires_grad=True),
        }

    def overlay(self, zvars, x):
        delta = reparameterize(zvars["z_patch"])
        alpha = reparameterize(zvars["z_alpha"])
        return T.add(T.mul(T.sub(1.0, alpha), x), T.mul(alpha, delta))

    def penalty(self, zvars):
        if self.lam == 0.0:
            return None
        return T.mul(T.abs_sum(reparameterize(zvars["z_alpha"])), self.lam)

    def trigger(self, zvars):
        patch = _squash(zvars["z_patch"].data)[0].transpose(1, 2, 0)
        alpha = _squash(zvars["z_alpha"].data)[0, 0]
        return TriggerSpec(patch, alpha, Fixed(0, 0))


def _squash(z):
    return ((np.tanh(z) + 1.0) * 0.5).astype(np.float32)


def _scan(model, images, config, search):
    config.validate()
    images = np.asarray(images, dtype=np.float32)
    if images.ndim != 4 or images.shape[1:3] != tuple(model.arch.input_hw) or images.shape[3] != 3:
        raise ShapeError(f"scan images {images.shape} do not match architecture {model.arch.input_hw}")
    n = len(images)
    if n < 2:
        raise ConfigError("need at least 2 scanning images")
    started = time.perf_counter()
    x_all = np.ascontiguousarray(images.transpose(0, 3, 1, 2))
    ptensors = {k: T.Tensor(v, name=k) for k, v in model.params.items()}

    def batch_loss(zvars, xb):
        x = T.Tensor(xb)
        probs = T.softmax(logits_graph(model.arch, ptensors, search.overlay(zvars, x)))
        loss = pairwise_loss(probs)
        pen = search.penalty(zvars)
        return loss if pen is None else T.add(loss, pen)

    eval_rng = np.random.default_rng(np.random.SeedSequence([config.seed, 0xE7A1]))
    eval_idx = eval_rng.permutation(n)[: min(config.eval_batch, n)]
    x_eval = x_all[eval_idx]

    restarts = []
    for r in range(config.restarts):
        rng = np.random.default_rng(np.random.SeedSequence([config.seed, r]))
        zvars = search.init_vars(rng)
        opt = Adam(lr=config.lr)
        batch = min(config.batch, n)

        def eval_loss():
            return batch_loss(zvars, x_eval).item()

        current = eval_loss()
        trajectory = [[0, current]]
        best_loss = current
        best_snapshot = {k: t.data.copy() for k, t in zvars.items()}
        last_improve = 0
        steps_run = 0
        for step in range(1, config.steps + 1):
            idx = rng.choice(n, size=batch, replace=False)
            loss = batch_loss(zvars, x_all[idx])
            loss.backward()
            opt.step(zvars)
            steps_run = step
            if step % config.eval_every == 0 or step == config.steps:
                current = eval_loss()
                trajectory.append([step, current])
                if current < best_loss - config.plateau_tol:
                    last_improve = step
                if current < best_loss:
                    best_loss = current
                    best_snapshot = {k: t.data.copy() for k, t in zvars.items()}
                if step - last_improve >= config.plateau_window:
                    break
        best_vars = {k: T.Tensor(v) for k, v in best_snapshot.items()}
        restarts.append(
            RestartResult(
                index=r,
                final_loss=best_loss,
                steps_run=steps_run,
                trajectory=trajectory,
                trigger=search.trigger(best_vars),
            )
        )

    best = min(restarts, key=lambda rr: (rr.final_loss, rr.index))
    return ScanResult(
        mode="fixed-size" if isinstance(search, _FixedSizeSearch) else "regularized",
        recovered=best.trigger,
        final_loss=best.final_loss,
        trajectory=best.trajectory,
        best_index=best.index,
        restarts=restarts,
        wallclock_s=time.perf_counter() - started,
        config=_config_dict(config),
    )


def scan_fixed_size(model, images, config):
    """Recover an s x s patch and one opacity scalar at a fixed window."""
    if not isinstance(config.mode, FixedSizeMode):
        raise ConfigError("scan_fixed_size requires a FixedSizeMode config")
    return _scan(model, images, config, _FixedSizeSearch(model.arch, config.mode))


def scan_regularized(model, images, config):
    """Recover a full-image patch with per-pixel opacity under an L1 penalty."""
    if not isinstance(config.mode, RegularizedMode):
        raise ConfigError("scan_regularized requires a RegularizedMode config")
    return _scan(model, images, config, _RegularizedSearch(model.arch, config.mode))


def scan(model, images, config):
    if isinstance(config.mode, FixedSizeMode):
        return scan_fixed_size(model, images, config)
    return scan_regularized(model, images, config)


# -- persistence ---------------------------------------------------------------


def _config_dict(config):
    doc = asdict(config)
    doc["mode"] = {"kind": "fixed-size", **asdict(config.mode)} if isinstance(config.mode, FixedSizeMode) else {
        "kind": "regularized",
        **asdict(config.mode),
    }
    return doc


def config_from_dict(doc):
    mode_doc = dict(doc["mode"])
    kind = mode_doc.pop("kind")
    if kind == "fixed-size":
        loc = mode_doc.get("location")
        mode = FixedSizeMode(size=mode_doc["size"], location=tuple(loc) if loc is not None else None)
    elif kind == "regularized":
        mode = RegularizedMode(lam=mode_doc["lam"])
    else:
        raise FormatError(f"unknown scan mode kind {kind!r}")
    rest = {k: v for k, v in doc.items() if k != "mode"}
    return ScanConfig(mode=mode, **rest)


def scan_result_to_dict(result):
    return {
        "format": "scan-result",
        "version": 1,
        "mode": result.mode,
        "config": result.config,
        "final_loss": result.final_loss,
        "best_index": result.best_index,
        "trajectory": result.trajectory,
        "wallclock_s": result.wallclock_s,
        "recovered": trigger_to_dict(result.recovered),
        "restarts": [
            {
                "index": rr.index,
                "final_loss": rr.final_loss,
                "steps_run": rr.steps_run,
                "trajectory": rr.trajectory,
                "trigger": trigger_to_dict(rr.trigger),
            }
            for rr in result.restarts
        ],
    }


def scan_result_from_dict(doc):
    if doc.get("format") != "scan-result" or doc.get("version") != 1:
        raise FormatError("not a version-1 scan result")
    restarts = [
        RestartResult(
            index=rd["index"],
            final_loss=rd["final_loss"],
            steps_run=rd["steps_run"],
            trajectory=rd["trajectory"],
            trigger=trigger_from_dict(rd["trigger"]),
        )
        for rd in doc["restarts"]
    ]
    return ScanResult(
        mode=doc["mode"],
        recovered=trigger_from_dict(doc["recovered"]),
        final_loss=doc["final_loss"],
        trajectory=doc["trajectory"],
        best_index=doc["best_index"],
        restarts=restarts,
        wallclock_s=doc["wallclock_s"],
        config=doc["config"],
    )


def save_scan_result(result, path):
    with open(path, "w") as f:
        json.dump(scan_result_to_dict(result), f, sort_keys=True)


def load_scan_result(path):
    with open(path) as f:
        return scan_result_from_dict(json.load(f))
