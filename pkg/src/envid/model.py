"""Convolutional backbone, projector and regression head, plus Adam and
binary checkpoints.

The default architecture is five 3x3 conv blocks (32-64-128-128-256, each
ReLU + 2x2 max pool), dropout before a dense layer to D=512, an affine
projector to E=256, and a two-layer regression head. Feature maps of 96x276
pool down to 3x8, so the default model carries 3,879,041 parameters, inside
the 3.0M..4.6M budget.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ShapeMismatch

PARAM_BUDGET = (3_000_000, 4_600_000)


@dataclass(frozen=True)
class BackboneConfig:
    conv_channels: tuple[int, ...] = (32, 64, 128, 128, 256)
    dense_dim: int = 512    # D
    embed_dim: int = 256    # E
    reg_hidden: int = 256
    dropout: float = 0.5
    input_shape: tuple[int, int] = (96, 276)

    def flat_dim(self) -> int:
        h, w = self.input_shape
        for _ in self.conv_channels:
            h, w = h // 2, w // 2
        return self.conv_channels[-1] * h * w


def _uniform(rng, shape, fan_in, dtype):
    limit = np.sqrt(6.0 / fan_in)
    return rng.uniform(-limit, limit, size=shape).astype(dtype)


class EnvIdModel:
    """embed() maps feature-map batches to R^E; regress() maps embeddings to
    a scalar environmental-parameter prediction."""

    def __init__(self, config: BackboneConfig = BackboneConfig(), seed: int = 0,
                 dtype=np.float32, enforce_budget: bool = True):
        self.config = config
        self.dtype = np.dtype(dtype)
        rng = np.random.default_rng(seed)
        self.params: dict[str, Tensor] = {}

        def param(name, array):
            self.params[name] = Tensor(array, requires_grad=True)

        c_in = 1
        for i, c_out in enumerate(config.conv_channels):
            fan = c_in * 9
            param(f"conv{i}_w", _uniform(rng, (c_out, c_in, 3, 3), fan, self.dtype))
            param(f"conv{i}_b", np.zeros((1, c_out, 1, 1), self.dtype))
            c_in = c_out
        flat = config.flat_dim()
        param("dense_w", _uniform(rng, (flat, config.dense_dim), flat, self.dtype))
        param("dense_b", np.zeros(config.dense_dim, self.dtype))
        param("proj_w", _uniform(rng, (config.dense_dim, config.embed_dim),
                                 config.dense_dim, self.dtype))
        param("proj_b", np.zeros(config.embed_dim, self.dtype))
        param("reg1_w", _uniform(rng, (config.embed_dim, config.reg_hidden),
                                 config.embed_dim, self.dtype))
        param("reg1_b", np.zeros(config.reg_hidden, self.dtype))
        param("reg2_w", _uniform(rng, (config.reg_hidden, 1),
                                 config.reg_hidden, self.dtype))
        param("reg2_b", np.zeros(1, self.dtype))

        if enforce_budget and not (PARAM_BUDGET[0] <= self.param_count() <= PARAM_BUDGET[1]):
            raise ValueError(
                f"model has {self.param_count()} parameters, outside "
                f"[{PARAM_BUDGET[0]}, {PARAM_BUDGET[1]}]; pass "
                f"enforce_budget=False for reduced-scale configs")

    def param_count(self) -> int:
        return sum(p.values.size for p in self.params.values())

    def _as_batch(self, x) -> Tensor:
        t = x if isinstance(x, Tensor) else Tensor(np.asarray(x, self.dtype))
        v = t.values
        if v.ndim == 3:
            t = ad.reshape(t, (v.shape[0], 1, v.shape[1], v.shape[2]))
        elif v.ndim != 4:
            raise ShapeMismatch(f"expected (N,96,276) maps, got {v.shape}")
        h, w = self.config.input_shape
        if t.values.shape[2:] != (h, w):
            raise ShapeMismatch(f"expected {h}x{w} maps, got {t.values.shape[2:]}")
        return t

    def backbone(self, x, training: bool = False,
                 rng: np.random.Generator | None = None) -> Tensor:
        t = self._as_batch(x)
        n = t.values.shape[0]
        for i in range(len(self.config.conv_channels)):
            t = ad.relu(ad.add(ad.conv2d(t, self.params[f"conv{i}_w"]),
                               self.params[f"conv{i}_b"]))
            t = ad.maxpool2(t)
        t = ad.reshape(t, (n, self.config.flat_dim()))
        if training and self.config.dropout > 0.0:
            if rng is None:
                raise ValueError("training-mode forward needs an rng for dropout")
            t = ad.dropout(t, self.config.dropout, rng, training=True)
        return ad.relu(ad.add(ad.matmul(t, self.params["dense_w"]),
                              self.params["dense_b"]))

    def project(self, feats: Tensor) -> Tensor:
        return ad.add(ad.matmul(feats, self.params["proj_w"]), self.params["proj_b"])

    def embed(self, x, training: bool = False,
              rng: np.random.Generator | None = None) -> Tensor:
        return self.project(self.backbone(x, training=training, rng=rng))

    def regress(self, emb: Tensor) -> Tensor:
        h = ad.relu(ad.add(ad.matmul(emb, self.params["reg1_w"]),
                           self.params["reg1_b"]))
        out = ad.add(ad.matmul(h, self.params["reg2_w"]), self.params["reg2_b"])
        return ad.reshape(out, (out.values.shape[0],))

    def flat_parameters(self) -> np.ndarray:
        return np.concatenate([p.values.ravel() for p in self.params.values()])

    def load_flat_parameters(self, flat: np.ndarray) -> None:
        off = 0
        for p in self.params.values():
            n = p.values.size
            p.values = flat[off:off + n].reshape(p.values.shape).astype(self.dtype)
            off += n
        if off != flat.size:
            raise ShapeMismatch(f"parameter vector has {flat.size} values, need {off}")

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None


class Adam:
    def __init__(self, params: dict[str, Tensor], lr: float = 1e-4,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m = {k: np.zeros_like(p.values) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.values) for k, p in params.items()}

    def step(self) -> None:
        self.t += 1
        b1c = 1.0 - self.beta1 ** self.t
        b2c = 1.0 - self.beta2 ** self.t
        for k, p in self.params.items():
            g = p.grad
            if g is None:
                continue
            m = self.m[k]
            v = self.v[k]
            m += (1.0 - self.beta1) * (g - m)
            v += (1.0 - self.beta2) * (g * g - v)
            p.values -= self.lr * (m / b1c) / (np.sqrt(v / b2c) + self.eps)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None


MAGIC = b"ENVID"
FORMAT_VERSION = 1


def save_checkpoint(path, model: EnvIdModel, optimizer: Adam | None = None,
                    epoch: int = 0, val_metric: float = float("nan"),
                    rng_state: dict | None = None) -> None:
    """Binary checkpoint: magic, version, JSON header, f32 LE parameter and
    moment vectors. Round-trips bit-exactly for float32 models."""
    header = {
        "config": asdict(model.config),
        "optimizer": None if optimizer is None else {
            "lr": optimizer.lr, "beta1": optimizer.beta1,
            "beta2": optimizer.beta2, "eps": optimizer.eps, "t": optimizer.t},
        "epoch": int(epoch),
        "val_metric": float(val_metric),
        "rng_state": rng_state,
    }
    blob = json.dumps(header).encode()
    flat = model.flat_parameters().astype("<f4")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", FORMAT_VERSION))
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        fh.write(struct.pack("<Q", flat.size))
        fh.write(flat.tobytes())
        if optimizer is not None:
            for bank in (optimizer.m, optimizer.v):
                vec = np.concatenate([bank[k].ravel() for k in model.params]).astype("<f4")
                fh.write(vec.tobytes())


def load_checkpoint(path, dtype=np.float32):
    with open(path, "rb") as fh:
        if fh.read(5) != MAGIC:
            raise ValueError(f"{path} is not a model checkpoint")
        version = struct.unpack("<I", fh.read(4))[0]
        if version != FORMAT_VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        header = json.loads(fh.read(struct.unpack("<I", fh.read(4))[0]))
        n = struct.unpack("<Q", fh.read(8))[0]
        flat = np.frombuffer(fh.read(4 * n), dtype="<f4")
        cfg = header["config"]
        cfg["conv_channels"] = tuple(cfg["conv_channels"])
        cfg["input_shape"] = tuple(cfg["input_shape"])
        model = EnvIdModel(BackboneConfig(**cfg), dtype=dtype, enforce_budget=False)
        model.load_flat_parameters(flat.astype(np.float64))
        optimizer = None
        if header["optimizer"] is not None:
            o = header["optimizer"]
            optimizer = Adam(model.params, lr=o["lr"], beta1=o["beta1"],
                             beta2=o["beta2"], eps=o["eps"])
            optimizer.t = o["t"]
            for bank in (optimizer.m, optimizer.v):
                vec = np.frombuffer(fh.read(4 * n), dtype="<f4")
                off = 0
                for k, p in model.params.items():
                    size = p.values.size
                    bank[k] = vec[off:off + size].reshape(p.values.shape).astype(dtype)
                    off += size
    return model, optimizer, header["epoch"], header["val_metric"], header["rng_state"]
