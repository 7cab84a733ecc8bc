"""Trigger generation, patch overlays, dataset poisoning, attack metrics.

A trigger is a small square patch blended over the image inside its window:

    out = (1 - alpha) * image + alpha * patch      (inside the window)
    out = image                                    (bit-exact elsewhere)

with alpha either one scalar or a per-pixel map. The window is half-open,
[x, x+s) x [y, y+s), so a size-s patch covers exactly s*s pixels. Placement
is either a fixed corner or "anywhere": a fresh uniform in-bounds corner per
image ("Patch Anywhere" training makes the backdoor location-invariant).
"""

import json
import math
from dataclasses import dataclass

import numpy as np

from .data import LabeledImageSet
from .errors import ConfigError, FormatError, ShapeError
from .model import accuracy, predict_classes


@dataclass(frozen=True)
class Fixed:
    x: int
    y: int


@dataclass(frozen=True)
class AnywhereRandom:
    seed: int = 0


class TriggerSpec:
    """Patch pixels, opacity, and placement policy."""

    def __init__(self, patch, alpha, placement):
        patch = np.ascontiguousarray(patch, dtype=np.float32)
        if patch.ndim != 3 or patch.shape[0] != patch.shape[1] or patch.shape[2] != 3:
            raise ShapeError(f"patch must be (s, s, 3), got {patch.shape}")
        if patch.min() < 0.0 or patch.max() > 1.0:
            raise ConfigError("patch values must lie in [0, 1]")
        s = patch.shape[0]
        if isinstance(alpha, np.ndarray):
            alpha = np.ascontiguousarray(alpha, dtype=np.float32)
            if alpha.shape != (s, s):
                raise ShapeError(f"per-pixel alpha must be ({s}, {s}), got {alpha.shape}")
            if alpha.min() < 0.0 or alpha.max() > 1.0:
                raise ConfigError("alpha values must lie in [0, 1]")
        else:
            alpha = float(alpha)
            if not 0.0 <= alpha <= 1.0:
                raise ConfigError(f"alpha must lie in [0, 1], got {alpha}")
        self.patch = patch
        self.alpha = alpha
        self.placement = placement

    @property
    def size(self):
        return self.patch.shape[0]

    @property
    def per_pixel(self):
        return isinstance(self.alpha, np.ndarray)


def generate_trigger(size, alpha, seed, image_hw=None):
    """Random-color trigger: i.i.d. uniform [0, 1] pixels from the seed."""
    if size < 1:
        raise ConfigError(f"trigger size must be >= 1, got {size}")
    if image_hw is not None and size > min(image_hw):
        raise ConfigError(f"trigger size {size} exceeds image {image_hw}")
    rng = np.random.default_rng(seed)
    patch = rng.uniform(0.0, 1.0, size=(size, size, 3)).astype(np.float32)
    return TriggerSpec(patch, alpha, AnywhereRandom(seed))


def _check_window(image_hw, size, x, y):
    h, w = image_hw
    if not (0 <= x <= w - size and 0 <= y <= h - size):
        raise ShapeError(f"patch window ({x},{y}) size {size} exceeds image {h}x{w}")


def apply_trigger(image, trigger, location=None):
    """Blend the trigger into one (H, W, 3) image at (x, y); pixels outside
    the window are returned untouched."""
    if location is None:
        if not isinstance(trigger.placement, Fixed):
            raise ConfigError("location required for randomly-placed triggers")
        location = (trigger.placement.x, trigger.placement.y)
    x, y = location
    s = trigger.size
    _check_window(image.shape[:2], s, x, y)
    out = np.array(image, dtype=np.float32)
    a = trigger.alpha[..., None] if trigger.per_pixel else np.float32(trigger.alpha)
    win = out[y : y + s, x : x + s, :]
    win[:] = (1.0 - a) * win + a * trigger.patch
    return out


def trigger_locations(trigger, image_hw, n, rng=None):
    """Per-image window corners according to the trigger's placement policy."""
    h, w = image_hw
    s = trigger.size
    if isinstance(trigger.placement, Fixed):
        _check_window(image_hw, s, trigger.placement.x, trigger.placement.y)
        return np.full((n, 2), (trigger.placement.x, trigger.placement.y), dtype=np.int64)
    if rng is None:
        rng = np.random.default_rng(trigger.placement.seed)
    xs = rng.integers(0, w - s + 1, size=n)
    ys = rng.integers(0, h - s + 1, size=n)
    return np.stack([xs, ys], axis=1)


def apply_trigger_batch(images, trigger, rng=None):
    """Blend the trigger into every image of an (N, H, W, 3) batch."""
    locs = trigger_locations(trigger, images.shape[1:3], len(images), rng)
    out = np.array(images, dtype=np.float32)
    s = trigger.size
    a = trigger.alpha[..., None] if trigger.per_pixel else np.float32(trigger.alpha)
    for i, (x, y) in enumerate(locs):
        win = out[i, y : y + s, x : x + s, :]
        win[:] = (1.0 - a) * win + a * trigger.patch
    return out


def poison_dataset(attack_set, trigger, rate, target_class, seed):
    """Replace ceil(rate * N) randomly chosen images with triggered copies
    labeled as the target class; shuffle the result."""
    if not 0.0 < rate <= 1.0:
        raise ConfigError(f"poison rate must be in (0, 1], got {rate}")
    if not 0 <= target_class < attack_set.classes:
        raise ConfigError(f"target class {target_class} outside [0, {attack_set.classes})")
    rng = np.random.default_rng(seed)
    n = len(attack_set)
    k = math.ceil(rate * n)
    chosen = rng.choice(n, size=k, replace=False)
    images = attack_set.images.copy()
    labels = attack_set.labels.copy()
    images[chosen] = apply_trigger_batch(images[chosen], trigger, rng)
    labels[chosen] = target_class
    perm = rng.permutation(n)
    return LabeledImageSet(images[perm], labels[perm], attack_set.classes)


@dataclass
class Effectiveness:
    pmpd: float  # pure model, clean test accuracy
    tmpd: float  # trojan model, clean test accuracy
    tmtd: float  # fraction of fully-triggered test images sent to the target


def effectiveness(pure_model, trojan_model, clean_test, trigger, target_class, seed=0):
    """Attack metrics; every test image is patched for the TMTD term (images
    already of the target class included, no exclusion)."""
    if pure_model.arch.classes != trojan_model.arch.classes:
        raise ConfigError("models disagree on class count")
    rng = np.random.default_rng(seed)
    triggered = apply_trigger_batch(clean_test.images, trigger, rng)
    hits = predict_classes(trojan_model, triggered) == target_class
    return Effectiveness(
        pmpd=accuracy(pure_model, clean_test),
        tmpd=accuracy(trojan_model, clean_test),
        tmtd=float(np.mean(hits)),
    )


# -- trigger archive (JSON with base-16 float payloads) ----------------------


def encode_array(arr):
    arr = np.ascontiguousarray(arr)
    dt = arr.dtype.newbyteorder("<")
    return {"shape": list(arr.shape), "dtype": dt.str, "hex": arr.astype(dt, copy=False).tobytes().hex()}


def decode_array(doc):
    arr = np.frombuffer(bytes.fromhex(doc["hex"]), dtype=np.dtype(doc["dtype"]))
    return arr.reshape(doc["shape"]).copy()


def trigger_to_dict(trigger):
    if isinstance(trigger.placement, Fixed):
        placement = {"kind": "fixed", "x": trigger.placement.x, "y": trigger.placement.y}
    else:
        placement = {"kind": "anywhere", "seed": trigger.placement.seed}
    alpha = (
        {"kind": "map", **encode_array(trigger.alpha)}
        if trigger.per_pixel
        else {"kind": "scalar", "value": trigger.alpha}
    )
    return {
        "format": "trigger-archive",
        "version": 1,
        "size": trigger.size,
        "patch": encode_array(trigger.patch),
        "alpha": alpha,
        "placement": placement,
    }


def trigger_from_dict(doc):
    if doc.get("format") != "trigger-archive" or doc.get("version") != 1:
        raise FormatError("not a version-1 trigger archive")
    patch = decode_array(doc["patch"]).astype(np.float32)
    alpha_doc = doc["alpha"]
    alpha = float(alpha_doc["value"]) if alpha_doc["kind"] == "scalar" else decode_array(alpha_doc).astype(np.float32)
    pdoc = doc["placement"]
    placement = Fixed(pdoc["x"], pdoc["y"]) if pdoc["kind"] == "fixed" else AnywhereRandom(pdoc["seed"])
    return TriggerSpec(patch, alpha, placement)


def save_trigger(trigger, path):
    with open(path, "w") as f:
        json.dump(trigger_to_dict(trigger), f, indent=2, sort_keys=True)


def load_trigger(path):
    with open(path) as f:
        return trigger_from_dict(json.load(f))
