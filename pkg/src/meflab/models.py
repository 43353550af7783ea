"""Small classifiers used as surrogate and target models.

Three architectures are available: ``mlp`` (flatten + dense stack), ``cnn-a``
(conv-pool-conv-pool-fc) and ``cnn-b`` (a single wide valid conv followed by
a dense head).  Models are immutable; training returns a new model.
"""
from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .errors import CheckpointError, ConfigError, DivergenceError, NonFiniteError, ShapeError

ARCHITECTURES = ("mlp", "cnn-a", "cnn-b")
CHECKPOINT_MAGIC = b"MEFW"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class ModelSpec:
    arch: str
    input_shape: tuple
    num_classes: int
    layers: tuple  # tuple of layer dicts, see ``param_shapes``

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(int(d) for d in self.input_shape))
        object.__setattr__(self, "layers", tuple(dict(layer) for layer in self.layers))
        if self.arch not in ARCHITECTURES:
            raise ConfigError(f"unknown architecture {self.arch!r}")
        if self.num_classes < 2:
            raise ConfigError("num_classes must be at least 2")
        self.param_shapes()  # validates layer compatibility

    def param_shapes(self) -> dict[str, tuple]:
        """Walk the layer stack, returning parameter shapes in storage order."""
        shape = self.input_shape
        shapes = {}
        for i, layer in enumerate(self.layers):
            kind = layer.get("kind")
            name = f"{i}.{kind}"
            if kind == "dense":
                if len(shape) != 1:
                    raise ShapeError(f"dense layer needs flat input, got {shape}", name)
                units = int(layer["units"])
                shapes[f"{name}.w"] = (shape[0], units)
                shapes[f"{name}.b"] = (units,)
                shape = (units,)
            elif kind == "conv":
                if len(shape) != 3:
                    raise ShapeError(f"conv layer needs (C, H, W) input, got {shape}", name)
                k, ch, pad = int(layer["kernel"]), int(layer["channels"]), layer.get("padding", "same")
                if pad == "same":
                    if k % 2 == 0:
                        raise ShapeError("'same' padding needs an odd kernel", name)
                    h, w = shape[1], shape[2]
                elif pad == "valid":
                    h, w = shape[1] - k + 1, shape[2] - k + 1
                else:
                    raise ShapeError(f"unknown padding {pad!r}", name)
                if h < 1 or w < 1:
                    raise ShapeError(f"kernel {k} too large for {shape}", name)
                shapes[f"{name}.w"] = (ch, shape[0], k, k)
                shapes[f"{name}.b"] = (ch,)
                shape = (ch, h, w)
            elif kind == "pool":
                if len(shape) != 3 or shape[1] % 2 or shape[2] % 2:
                    raise ShapeError(f"2x2 pooling needs even spatial dims, got {shape}", name)
                shape = (shape[0], shape[1] // 2, shape[2] // 2)
            elif kind == "flatten":
                shape = (int(np.prod(shape)),)
            elif kind == "relu":
                pass
            else:
                raise ShapeError(f"unknown layer kind {kind!r}", name)
        if shape != (self.num_classes,):
            raise ShapeError(f"network output {shape} does not match {self.num_classes} classes", "output")
        return shapes

    def to_json(self) -> dict:
        return {
            "arch": self.arch,
            "input_shape": list(self.input_shape),
            "num_classes": self.num_classes,
            "layers": [dict(layer) for layer in self.layers],
        }

    @classmethod
    def from_json(cls, d: dict) -> "ModelSpec":
        return cls(d["arch"], tuple(d["input_shape"]), int(d["num_classes"]), tuple(d["layers"]))

    def digest(self) -> str:
        blob = json.dumps(self.to_json(), sort_keys=True, separators=(",", ":")).encode()
        return hashlib.sha256(blob).hexdigest()


def make_spec(arch: str, input_shape=(1, 16, 16), num_classes: int = 4, hidden=None) -> ModelSpec:
    """Build one of the three standard architectures."""
    input_shape = tuple(input_shape)
    if arch == "mlp":
        hidden = (64, 32) if hidden is None else tuple(hidden)
        layers = [{"kind": "flatten"}] if len(input_shape) > 1 else []
        for units in hidden:
            layers += [{"kind": "dense", "units": units}, {"kind": "relu"}]
        layers.append({"kind": "dense", "units": num_classes})
    elif arch == "cnn-a":
        layers = [
            {"kind": "conv", "channels": 8, "kernel": 3, "padding": "same"}, {"kind": "relu"}, {"kind": "pool"},
            {"kind": "conv", "channels": 16, "kernel": 3, "padding": "same"}, {"kind": "relu"}, {"kind": "pool"},
            {"kind": "flatten"}, {"kind": "dense", "units": num_classes},
        ]
    elif arch == "cnn-b":
        layers = [
            {"kind": "conv", "channels": 12, "kernel": 5, "padding": "valid"}, {"kind": "relu"}, {"kind": "pool"},
            {"kind": "flatten"}, {"kind": "dense", "units": 48}, {"kind": "relu"},
            {"kind": "dense", "units": num_classes},
        ]
    else:
        raise ConfigError(f"unknown architecture {arch!r}")
    return ModelSpec(arch, input_shape, num_classes, tuple(layers))


@dataclass(frozen=True)
class Model:
    spec: ModelSpec
    params: dict
    meta: dict = field(default_factory=dict)
    frozen: frozenset = frozenset()

    def __post_init__(self):
        expected = self.spec.param_shapes()
        if list(expected) != list(self.params):
            raise ShapeError(f"parameter names {list(self.params)} do not match spec {list(expected)}", "params")
        for name, shape in expected.items():
            if self.params[name].shape != shape:
                raise ShapeError(f"expected {shape}, got {self.params[name].shape}", name)
            self.params[name].flags.writeable = False
        for key in ("train_acc", "test_acc"):
            if key in self.meta and not 0.0 <= self.meta[key] <= 1.0:
                raise ValueError(f"{key} must lie in [0, 1]")

    @property
    def dtype(self):
        return next(iter(self.params.values())).dtype

    def astype(self, dtype) -> "Model":
        return replace(self, params={k: v.astype(dtype) for k, v in self.params.items()})

    def with_params(self, params: dict, **meta) -> "Model":
        return replace(self, params=dict(params), meta={**self.meta, **meta})

    def forward(self, x: ad.Var, params: dict) -> ad.Var:
        """Logits for a recorded input ``x`` given recorded parameters."""
        if tuple(x.shape[1:]) != self.spec.input_shape:
            raise ShapeError(f"input {tuple(x.shape[1:])} does not match {self.spec.input_shape}", "input")
        h = x
        for i, layer in enumerate(self.spec.layers):
            kind = layer["kind"]
            name = f"{i}.{kind}"
            if kind == "dense":
                h = ad.bias_add(ad.matmul(h, params[f"{name}.w"], name), params[f"{name}.b"], name)
            elif kind == "conv":
                h = ad.conv2d(h, params[f"{name}.w"], layer.get("padding", "same"), name)
                h = ad.bias_add(h, params[f"{name}.b"], name)
            elif kind == "relu":
                h = ad.relu(h)
            elif kind == "pool":
                h = ad.maxpool2(h, name)
            elif kind == "flatten":
                h = ad.flatten(h)
        return h

    def logits(self, x) -> np.ndarray:
        tape = ad.Tape()
        params = {k: tape.leaf(v, k) for k, v in self.params.items()}
        return self.forward(tape.leaf(np.asarray(x, dtype=self.dtype), "x"), params).value

    def predict(self, x, chunk: int = 1024) -> np.ndarray:
        x = np.asarray(x)
        return np.concatenate([self.logits(x[i:i + chunk]).argmax(axis=1) for i in range(0, len(x), chunk)])

    # attack-facing loss interface
    def loss(self, x, y) -> np.ndarray:
        return ad.forward_loss(self, x, y)[0]

    def loss_and_grad(self, x, y):
        return ad.loss_and_grad_input(self, x, y)


def build(spec: ModelSpec, init_seed: int, dtype=np.float32) -> Model:
    """Fan-in scaled uniform weights (std = 1/sqrt(fan_in)), zero biases."""
    rng = np.random.default_rng(init_seed)
    params = {}
    for name, shape in spec.param_shapes().items():
        if name.endswith(".b"):
            params[name] = np.zeros(shape, dtype=dtype)
        else:
            fan_in = int(np.prod(shape[1:])) if len(shape) == 4 else shape[0]
            bound = np.sqrt(3.0 / fan_in)
            params[name] = rng.uniform(-bound, bound, size=shape).astype(dtype)
    return Model(spec, params, {"seed": int(init_seed), "epochs": 0})


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 0.05
    epochs: int = 10
    batch_size: int = 32
    optimizer: str = "sgd-momentum"
    momentum: float = 0.9
    seed: int = 0

    def __post_init__(self):
        if self.lr < 0 or not np.isfinite(self.lr):
            raise ConfigError("lr must be a finite non-negative number")
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be >= 1")
        if self.optimizer not in ("sgd", "sgd-momentum"):
            raise ConfigError(f"unknown optimizer {self.optimizer!r}")


def accuracy(model: Model, dataset) -> float:
    if len(dataset.labels) == 0:
        return 0.0
    return float(np.mean(model.predict(dataset.images) == dataset.labels))


def train(model: Model, train_set, test_set, cfg: TrainConfig):
    """Minibatch SGD on mean cross-entropy.  Returns ``(model, history)``."""
    if tuple(train_set.images.shape[1:]) != model.spec.input_shape:
        raise ShapeError(f"dataset images {train_set.images.shape[1:]} vs model {model.spec.input_shape}", "input")
    rng = np.random.default_rng(cfg.seed)
    params = {k: v.copy() for k, v in model.params.items()}
    velocity = {k: np.zeros_like(v) for k, v in params.items()}
    mu = cfg.momentum if cfg.optimizer == "sgd-momentum" else 0.0
    lr = np.asarray(cfg.lr, dtype=model.dtype)
    n = len(train_set.labels)
    history = []
    current = model
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            try:
                loss, tape = ad.forward_loss(current, train_set.images[idx], train_set.labels[idx])
            except NonFiniteError as exc:
                raise DivergenceError(epoch, str(exc)) from exc
            total += float(loss.sum())
            names = [k for k in params if k not in model.frozen]
            grads = tape.gradients(tape.output, [tape.named[k] for k in names])
            for k, g in zip(names, grads):
                g = g / len(idx)
                velocity[k] = mu * velocity[k] + g if mu else g
                params[k] = params[k] - lr * velocity[k]
            current = model.with_params(params)
        mean_loss = total / n
        if not np.isfinite(mean_loss):
            raise DivergenceError(epoch)
        history.append({
            "epoch": epoch,
            "loss": mean_loss,
            "train_acc": accuracy(current, train_set),
            "test_acc": accuracy(current, test_set),
        })
    final = current.with_params(
        current.params,
        epochs=model.meta.get("epochs", 0) + cfg.epochs,
        train_acc=history[-1]["train_acc"],
        test_acc=history[-1]["test_acc"],
    )
    return final, history


# -- checkpoints ------------------------------------------------------------------

def save(model: Model, path) -> None:
    """Write ``MEFW`` | u32 version | u32 header length | JSON header | f32 LE blobs."""
    header = {
        "spec": model.spec.to_json(),
        "spec_digest": model.spec.digest(),
        "meta": model.meta,
        "frozen": sorted(model.frozen),
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<II", CHECKPOINT_VERSION, len(blob)))
        f.write(blob)
        for value in model.params.values():
            f.write(np.ascontiguousarray(value, dtype="<f4").tobytes())


def load(path) -> Model:
    raw = Path(path).read_bytes()
    if len(raw) < 12 or raw[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: bad magic")
    version, hlen = struct.unpack_from("<II", raw, 4)
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    if 12 + hlen > len(raw):
        raise CheckpointError(f"{path}: truncated header")
    try:
        header = json.loads(raw[12:12 + hlen].decode("utf-8"))
        spec = ModelSpec.from_json(header["spec"])
    except (ValueError, KeyError) as exc:
        raise CheckpointError(f"{path}: unreadable header ({exc})") from exc
    if spec.digest() != header.get("spec_digest"):
        raise CheckpointError(f"{path}: spec digest mismatch")
    offset = 12 + hlen
    params = {}
    for name, shape in spec.param_shapes().items():
        nbytes = 4 * int(np.prod(shape))
        if offset + nbytes > len(raw):
            raise CheckpointError(f"{path}: truncated at parameter {name}")
        params[name] = np.frombuffer(raw, dtype="<f4", count=nbytes // 4, offset=offset).astype(np.float32).reshape(shape)
        offset += nbytes
    if offset != len(raw):
        raise CheckpointError(f"{path}: {len(raw) - offset} trailing bytes")
    return Model(spec, params, header.get("meta", {}), frozenset(header.get("frozen", ())))
