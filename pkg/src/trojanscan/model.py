"""CNN architecture, training loop, inference, and checkpoint files.

The same training routine produces clean and backdoored models; only the
data differs. Checkpoints serialize to the STSM container (JSON header +
raw little-endian tensor payload) and round-trip bit-exactly.
"""

import json
import struct
from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as T
from .errors import ConfigError, FormatError, ShapeError
from .optim import Adam

STSM_MAGIC = b"STSM"
STSM_VERSION = 1


@dataclass(frozen=True)
class ArchitectureConfig:
    """Two convolutional and two dense layers by default.

    Convolutions keep spatial size ("same" geometry, realized by zero-padding
    the input before a valid-window convolution). With valid geometry plus
    floor-division pooling, pixels along the right/bottom borders only reach
    features that the second pool drops, so border-placed triggers would be
    invisible to the classifier and location-invariant backdoors could never
    reach their accuracy gate; "same" keeps every placement on equal footing.
    """

    input_hw: tuple = (32, 32)
    conv_channels: tuple = (32, 64)
    kernel_size: int = 3
    dense_widths: tuple = (256,)
    classes: int = 10
    padding: str = "same"

    def __post_init__(self):
        object.__setattr__(self, "input_hw", tuple(self.input_hw))
        object.__setattr__(self, "conv_channels", tuple(self.conv_channels))
        object.__setattr__(self, "dense_widths", tuple(self.dense_widths))
        if self.classes < 2:
            raise ConfigError(f"need at least 2 classes, got {self.classes}")
        if not self.conv_channels or not self.dense_widths:
            raise ConfigError("need at least one conv layer and one dense layer")
        if self.kernel_size < 1:
            raise ConfigError("kernel size must be positive")
        if self.padding not in ("same", "valid"):
            raise ConfigError(f"padding must be 'same' or 'valid', got {self.padding!r}")
        if self.padding == "same" and self.kernel_size % 2 == 0:
            raise ConfigError("same padding requires an odd kernel size")
        self.feature_size()  # raises if the stack shrinks the map away

    def feature_size(self):
        """Flattened dimension entering the dense stack."""
        h, w = self.input_hw
        for _ in self.conv_channels:
            if self.padding == "valid":
                h, w = h - self.kernel_size + 1, w - self.kernel_size + 1
            h, w = h // 2, w // 2
            if h < 1 or w < 1:
                raise ConfigError(f"input {self.input_hw} too small for conv stack")
        return h * w * self.conv_channels[-1]

    def param_shapes(self):
        shapes = {}
        cin = 3
        for i, cout in enumerate(self.conv_channels):
            shapes[f"conv{i}.w"] = (cout, cin, self.kernel_size, self.kernel_size)
            shapes[f"conv{i}.b"] = (cout, 1, 1)
            cin = cout
        d = self.feature_size()
        for i, width in enumerate(self.dense_widths):
            shapes[f"fc{i}.w"] = (d, width)
            shapes[f"fc{i}.b"] = (width,)
            d = width
        shapes["out.w"] = (d, self.classes)
        shapes["out.b"] = (self.classes,)
        return shapes


@dataclass
class ModelCheckpoint:
    arch: ArchitectureConfig
    params: dict  # name -> np.ndarray (float32)
    meta: dict = field(default_factory=dict)

    def copy(self):
        return ModelCheckpoint(self.arch, {k: v.copy() for k, v in self.params.items()}, dict(self.meta))


@dataclass
class TrainConfig:
    lr: float = 1e-3
    batch: int = 64
    epochs: int = 30
    seed: int = 0


def build_model(arch, seed, is_trojan=False):
    """He-uniform initialized parameters, reproducible from the seed."""
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in arch.param_shapes().items():
        if name.endswith(".b"):
            params[name] = np.zeros(shape, dtype=np.float32)
        else:
            fan_in = int(np.prod(shape[1:])) if name.startswith("conv") else shape[0]
            limit = np.sqrt(6.0 / fan_in)
            params[name] = rng.uniform(-limit, limit, size=shape).astype(np.float32)
    return ModelCheckpoint(arch, params, {"seed": seed, "epochs": 0, "dataset_hash": None, "is_trojan": is_trojan})


def _wrap_params(params, requires_grad):
    return {k: T.Tensor(v, requires_grad=requires_grad, name=k) for k, v in params.items()}


def logits_graph(arch, ptensors, x):
    """Forward graph from an NCHW input tensor to pre-softmax logits."""
    h = x
    pad = arch.kernel_size // 2 if arch.padding == "same" else 0
    for i in range(len(arch.conv_channels)):
        if pad:
            n, c, hh, ww = h.shape
            h = T.embed(h, (n, c, hh + 2 * pad, ww + 2 * pad), (0, 0, pad, pad))
        h = T.add(T.conv2d(h, ptensors[f"conv{i}.w"]), ptensors[f"conv{i}.b"])
        h = T.maxpool2x2(T.relu(h))
    h = T.reshape(h, (h.shape[0], arch.feature_size()))
    for i in range(len(arch.dense_widths)):
        h = T.relu(T.add(T.matmul(h, ptensors[f"fc{i}.w"]), ptensors[f"fc{i}.b"]))
    return T.add(T.matmul(h, ptensors["out.w"]), ptensors["out.b"])


def _to_nchw(images, arch):
    if images.ndim != 4 or images.shape[1:3] != tuple(arch.input_hw) or images.shape[3] != 3:
        raise ShapeError(f"images {images.shape} do not match architecture input {arch.input_hw}")
    return np.ascontiguousarray(images.transpose(0, 3, 1, 2), dtype=np.float32)


def predict(model, images, batch=256):
    """Class probability matrix (N, C); pure function of (params, images)."""
    x_all = _to_nchw(np.asarray(images), model.arch)
    ptensors = _wrap_params(model.params, requires_grad=False)
    rows = []
    for start in range(0, len(x_all), batch):
        xb = T.Tensor(x_all[start : start + batch])
        rows.append(T.softmax(logits_graph(model.arch, ptensors, xb)).data)
    return np.concatenate(rows)


def predict_classes(model, images, batch=256):
    return np.argmax(predict(model, images, batch=batch), axis=1)


def accuracy(model, dataset):
    return float(np.mean(predict_classes(model, dataset.images) == dataset.labels))


def train(model, train_set, val_set, cfg, trace_hook=None):
    """Adam + cross-entropy training; returns (best-validation checkpoint, trace).

    The trace has one row per epoch: train loss/accuracy (running, over the
    shuffled batches) and validation accuracy.
    """
    if train_set.classes != model.arch.classes:
        raise ConfigError(f"dataset has {train_set.classes} classes, model {model.arch.classes}")
    rng = np.random.default_rng(cfg.seed)
    x_all = _to_nchw(train_set.images, model.arch)
    labels = train_set.labels
    params = _wrap_params({k: v.copy() for k, v in model.params.items()}, requires_grad=True)
    opt = Adam(lr=cfg.lr)
    trace = []
    best_params = None
    best_val = -1.0
    for epoch in range(cfg.epochs):
        perm = rng.permutation(len(x_all))
        loss_sum = 0.0
        correct = 0
        for start in range(0, len(perm), cfg.batch):
            idx = perm[start : start + cfg.batch]
            xb = T.Tensor(x_all[idx])
            yb = labels[idx]
            logits = logits_graph(model.arch, params, xb)
            loss = T.softmax_cross_entropy(logits, yb)
            loss.backward()
            opt.step(params)
            loss_sum += loss.item() * len(idx)
            correct += int(np.sum(np.argmax(logits.data, axis=1) == yb))
        snapshot = {k: t.data.copy() for k, t in params.items()}
        val_acc = accuracy(ModelCheckpoint(model.arch, snapshot, {}), val_set)
        row = {
            "epoch": epoch,
            "train_loss": loss_sum / len(x_all),
            "train_acc": correct / len(x_all),
            "val_acc": val_acc,
        }
        trace.append(row)
        if trace_hook is not None:
            trace_hook(row)
        if val_acc > best_val:
            best_val = val_acc
            best_params = snapshot
    if best_params is None:  # zero epochs: checkpoint unchanged
        best_params = {k: v.copy() for k, v in model.params.items()}
    meta = dict(model.meta)
    meta.update(epochs=cfg.epochs, dataset_hash=train_set.content_hash(), train_seed=cfg.seed)
    return ModelCheckpoint(model.arch, best_params, meta), trace


# -- STSM checkpoint container ------------------------------------------------

_PREFIX = struct.Struct("<4sHI")  # magic, version, header length


def save_checkpoint(model, path):
    index = []
    payload = bytearray()
    for name in sorted(model.params):
        arr = model.params[name]
        dt = arr.dtype.newbyteorder("<")
        raw = np.ascontiguousarray(arr, dtype=dt).tobytes()
        index.append(
            {"name": name, "shape": list(arr.shape), "dtype": dt.str, "offset": len(payload), "nbytes": len(raw)}
        )
        payload.extend(raw)
    header = json.dumps(
        {"arch": asdict(model.arch), "meta": model.meta, "tensors": index},
        sort_keys=True,
    ).encode()
    with open(path, "wb") as f:
        f.write(_PREFIX.pack(STSM_MAGIC, STSM_VERSION, len(header)))
        f.write(header)
        f.write(payload)


def load_checkpoint(path):
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < _PREFIX.size:
        raise FormatError(f"{path}: truncated prefix")
    magic, version, hlen = _PREFIX.unpack_from(raw)
    if magic != STSM_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    if version != STSM_VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    if len(raw) < _PREFIX.size + hlen:
        raise FormatError(f"{path}: truncated header")
    header = json.loads(raw[_PREFIX.size : _PREFIX.size + hlen].decode())
    base = _PREFIX.size + hlen
    params = {}
    for entry in header["tensors"]:
        start = base + entry["offset"]
        end = start + entry["nbytes"]
        if end > len(raw):
            raise FormatError(f"{path}: truncated payload for {entry['name']}")
        arr = np.frombuffer(raw[start:end], dtype=np.dtype(entry["dtype"]))
        params[entry["name"]] = arr.reshape(entry["shape"]).copy()
    arch_dict = header["arch"]
    arch = ArchitectureConfig(
        input_hw=tuple(arch_dict["input_hw"]),
        conv_channels=tuple(arch_dict["conv_channels"]),
        kernel_size=arch_dict["kernel_size"],
        dense_widths=tuple(arch_dict["dense_widths"]),
        classes=arch_dict["classes"],
        padding=arch_dict["padding"],
    )
    expected = set(arch.param_shapes())
    if set(params) != expected:
        raise FormatError(f"{path}: tensor names do not match architecture")
    for name, shape in arch.param_shapes().items():
        if tuple(params[name].shape) != shape:
            raise FormatError(f"{path}: tensor {name} has shape {params[name].shape}, expected {shape}")
    return ModelCheckpoint(arch, params, header["meta"])
