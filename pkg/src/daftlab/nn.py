"""Models (feature extractor + linear head), Adam, checkpoint I/O.

A Model is a stack of simple layers producing penultimate features, plus a
linear head (weight of shape (feature_dim, num_classes) and a bias). The
head is kept separate because adversarial fine-tuning mutates only the head.

Reference architectures:
  mlp       flatten -> dense(256) -> relu -> dense(32) -> relu
  smallcnn  conv3x3(16) -> relu -> pool2 -> conv3x3(32) -> relu -> pool2
            -> flatten -> dense(32)
  identity  features(x) == flatten(x)   (unit-test architecture)
"""

from __future__ import annotations

import io
import json
import struct

import numpy as np

from .tensor import (
    Tensor,
    ShapeMismatchError,
    NumericsError,
    add,
    conv2d,
    matmul,
    max_pool2,
    relu,
    reshape,
)

CHECKPOINT_MAGIC = b"DAFTCKPT"
CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    """Raised for malformed checkpoint files."""


def _he_init(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    std = np.sqrt(2.0 / fan_in)
    return (rng.standard_normal(shape) * std).astype(np.float32)


class Model:
    """Feature extractor parameters plus a linear head.

    ``arch`` is a plain dict describing the architecture; it fully determines
    parameter names and shapes, so checkpoints only need the dict plus the
    raw arrays.
    """

    def __init__(self, arch: dict, params: dict[str, Tensor]):
        self.arch = dict(arch)
        self.params = params  # ordered: extractor params then head.w, head.b

    # -- parameter views ----------------------------------------------------

    def extractor_params(self) -> dict[str, Tensor]:
        return {k: v for k, v in self.params.items() if not k.startswith("head.")}

    def head_params(self) -> dict[str, Tensor]:
        return {k: v for k, v in self.params.items() if k.startswith("head.")}

    def set_extractor_trainable(self, flag: bool) -> None:
        for t in self.extractor_params().values():
            t.requires_grad = bool(flag)

    def set_trainable(self, flag: bool) -> None:
        for t in self.params.values():
            t.requires_grad = bool(flag)

    @property
    def feature_dim(self) -> int:
        return self.params["head.w"].shape[0]

    @property
    def num_classes(self) -> int:
        return self.params["head.w"].shape[1]

    # -- forward ------------------------------------------------------------

    def features(self, x: Tensor) -> Tensor:
        """Penultimate representation, shape (batch, feature_dim)."""
        kind = self.arch["kind"]
        p = self.params
        if x.ndim < 2:
            raise ShapeMismatchError(f"features: expected batched input, got {x.shape}")
        if kind == "identity":
            return reshape(x, (x.shape[0], -1)) if x.ndim > 2 else x
        if kind == "linear":
            h = reshape(x, (x.shape[0], -1)) if x.ndim > 2 else x
            return add(matmul(h, p["fc1.w"]), p["fc1.b"])
        if kind == "mlp":
            h = reshape(x, (x.shape[0], -1)) if x.ndim > 2 else x
            h = relu(add(matmul(h, p["fc1.w"]), p["fc1.b"]))
            h = relu(add(matmul(h, p["fc2.w"]), p["fc2.b"]))
            return h
        if kind == "smallcnn":
            h = relu(conv2d(x, p["conv1.w"], p["conv1.b"]))
            h = max_pool2(h)
            h = relu(conv2d(h, p["conv2.w"], p["conv2.b"]))
            h = max_pool2(h)
            h = reshape(h, (h.shape[0], -1))
            return add(matmul(h, p["fc.w"]), p["fc.b"])
        raise ValueError(f"unknown architecture kind: {kind}")

    def logits(self, x: Tensor) -> Tensor:
        return self.logits_from_features(self.features(x))

    def logits_from_features(self, f: Tensor) -> Tensor:
        w, b = self.params["head.w"], self.params["head.b"]
        if f.shape[1] != w.shape[0]:
            raise ShapeMismatchError(
                f"logits: feature dim {f.shape[1]} != head input dim {w.shape[0]}"
            )
        return add(matmul(f, w), b)

    def logits_np(self, x: np.ndarray, batch: int = 512) -> np.ndarray:
        """Forward pass without gradient tracking, batched over axis 0."""
        outs = []
        for i in range(0, len(x), batch):
            outs.append(self.logits(Tensor(x[i : i + batch])).data)
        return np.concatenate(outs, axis=0)

    def features_np(self, x: np.ndarray, batch: int = 512) -> np.ndarray:
        outs = []
        for i in range(0, len(x), batch):
            outs.append(self.features(Tensor(x[i : i + batch])).data)
        return np.concatenate(outs, axis=0)

    def copy(self) -> "Model":
        params = {k: Tensor(v.data.copy(), requires_grad=v.requires_grad) for k, v in self.params.items()}
        return Model(self.arch, params)


def _param_shapes(arch: dict) -> dict[str, tuple]:
    kind = arch["kind"]
    c = arch["num_classes"]
    if kind == "identity":
        d = arch["input_dim"]
        return {"head.w": (d, c), "head.b": (c,)}
    if kind == "linear":
        d, f = arch["input_dim"], arch["feature_dim"]
        return {"fc1.w": (d, f), "fc1.b": (f,), "head.w": (f, c), "head.b": (c,)}
    if kind == "mlp":
        d = arch["input_dim"]
        h = arch.get("hidden", 256)
        f = arch.get("feature_dim", 32)
        return {
            "fc1.w": (d, h), "fc1.b": (h,),
            "fc2.w": (h, f), "fc2.b": (f,),
            "head.w": (f, c), "head.b": (c,),
        }
    if kind == "smallcnn":
        cin, hgt, wid = arch["input_shape"]
        f = arch.get("feature_dim", 32)
        h1, w1 = (hgt - 2) // 2, (wid - 2) // 2
        h2, w2 = (h1 - 2) // 2, (w1 - 2) // 2
        flat = 32 * h2 * w2
        return {
            "conv1.w": (16, cin, 3, 3), "conv1.b": (16,),
            "conv2.w": (32, 16, 3, 3), "conv2.b": (32,),
            "fc.w": (flat, f), "fc.b": (f,),
            "head.w": (f, c), "head.b": (c,),
        }
    raise ValueError(f"unknown architecture kind: {kind}")


def build_model(arch: dict, seed: int = 0) -> Model:
    """Construct a model with He fan-in Gaussian init (biases zero)."""
    rng = np.random.default_rng(seed)
    params: dict[str, Tensor] = {}
    for name, shape in _param_shapes(arch).items():
        if name.endswith(".b"):
            data = np.zeros(shape, dtype=np.float32)
        else:
            fan_in = int(np.prod(shape[1:])) if len(shape) == 4 else shape[0]
            data = _he_init(rng, shape, fan_in)
        params[name] = Tensor(data, requires_grad=True)
    return Model(arch, params)


# ---------------------------------------------------------------------------
# Adam


class Adam:
    """Bias-corrected Adam over a named parameter dict, updating in place."""

    def __init__(self, params: dict[str, Tensor], lr: float,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.lr = float(lr)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.step_count = 0
        self.m = {k: np.zeros_like(v.data) for k, v in params.items()}
        self.v = {k: np.zeros_like(v.data) for k, v in params.items()}

    def step(self, grads: dict[str, np.ndarray]) -> None:
        self.step_count += 1
        t = self.step_count
        bc1 = 1.0 - self.beta1 ** t
        bc2 = 1.0 - self.beta2 ** t
        for name, p in self.params.items():
            g = grads.get(name)
            if g is None:
                g = np.zeros_like(p.data)
            if not np.all(np.isfinite(g)):
                raise NumericsError(f"adam_step: non-finite gradient for parameter '{name}'")
            self.m[name] = self.beta1 * self.m[name] + (1 - self.beta1) * g
            self.v[name] = self.beta2 * self.v[name] + (1 - self.beta2) * g * g
            mhat = self.m[name] / bc1
            vhat = self.v[name] / bc2
            p.data -= (self.lr * mhat / (np.sqrt(vhat) + self.eps)).astype(np.float32)


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(model: Model, path: str) -> None:
    names = list(model.params.keys())
    meta = {
        "arch": model.arch,
        "tensors": [{"name": n, "shape": list(model.params[n].shape)} for n in names],
    }
    blob = json.dumps(meta).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(blob)))
        fh.write(blob)
        for n in names:
            fh.write(np.ascontiguousarray(model.params[n].data, dtype="<f4").tobytes())


def load_checkpoint(path: str) -> Model:
    with open(path, "rb") as fh:
        raw = fh.read()
    buf = io.BytesIO(raw)
    magic = buf.read(8)
    if magic != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic {magic!r})")
    header = buf.read(8)
    if len(header) < 8:
        raise CheckpointError(f"{path}: truncated checkpoint header")
    version, meta_len = struct.unpack("<II", header)
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    blob = buf.read(meta_len)
    if len(blob) < meta_len:
        raise CheckpointError(f"{path}: truncated checkpoint metadata")
    try:
        meta = json.loads(blob.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"{path}: corrupt checkpoint metadata ({e})")
    params: dict[str, Tensor] = {}
    for entry in meta["tensors"]:
        shape = tuple(entry["shape"])
        nbytes = int(np.prod(shape)) * 4
        chunk = buf.read(nbytes)
        if len(chunk) < nbytes:
            raise CheckpointError(f"{path}: truncated tensor payload for '{entry['name']}'")
        arr = np.frombuffer(chunk, dtype="<f4").reshape(shape).copy()
        params[entry["name"]] = Tensor(arr, requires_grad=True)
    if buf.read(1):
        raise CheckpointError(f"{path}: trailing bytes after declared tensors")
    expected = set(_param_shapes(meta["arch"]).keys())
    if set(params.keys()) != expected:
        raise CheckpointError(f"{path}: tensor names do not match architecture")
    return Model(meta["arch"], params)
