"""Order Prediction Network and the concatenation baseline.

The trunk is one set of layers applied to all ``N * n`` frames of a batch at
once, so branch weights are shared by construction. The OPN head runs one
fully connected unit per frame pair (i < j) on ``[fc6_i, fc6_j]`` and
classifies the concatenated pair outputs; the Concat head classifies the
concatenated per-frame features through two fully connected layers.
"""

from __future__ import annotations

import itertools
import struct
import zlib
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from . import permutations as perms
from .layers import (BatchNorm, Conv2D, Dropout, Flatten, Linear, MaxPool, Param, ReLU,
                     Sequential, ZeroPad)
from .ops import softmax_cross_entropy
from .tensor import DTYPE, CacheError, ShapeError, conv_out_size, make_rng

HEAD_TYPES = ("opn", "concat")
TRANSFER_STD = 0.005


@dataclass
class ModelConfig:
    n: int = 4
    patch_size: int = 32
    head: str = "opn"
    conv1: int = 16
    conv1_kernel: int = 5
    conv2: int = 32
    fc6: int = 128
    pair_width: int = 64
    # 0 = smallest width whose head has at least as many parameters as the OPN head
    concat_width: int = 0
    share_pairs: bool = False
    dropout: float = 0.25

    def validate(self) -> None:
        if self.head not in HEAD_TYPES:
            raise ShapeError(f"head must be one of {HEAD_TYPES}, got {self.head!r}")
        perms.num_classes(self.n)
        if not 0 <= self.dropout < 1:
            raise ShapeError("dropout must be in [0, 1)")

    @property
    def num_classes(self) -> int:
        return perms.num_classes(self.n)

    @property
    def pairs(self) -> list[tuple[int, int]]:
        return list(itertools.combinations(range(self.n), 2))


# Width presets; "tiny" is the default desk-scale network.
MODEL_PRESETS: dict[str, dict[str, int]] = {
    "tiny": dict(conv1=16, conv2=32, fc6=128, pair_width=64),
    "small": dict(conv1=32, conv2=64, fc6=256, pair_width=128),
}


def preset_config(name: str, **overrides) -> ModelConfig:
    if name not in MODEL_PRESETS:
        raise ShapeError(f"unknown model preset {name!r} (known: {', '.join(MODEL_PRESETS)})")
    return ModelConfig(**{**MODEL_PRESETS[name], **overrides})


def _same_pad(size, k, stride):
    out = -(-size // stride)
    total = max((out - 1) * stride + k - size, 0)
    return total // 2, total - total // 2


def build_trunk(cfg: ModelConfig, rng) -> tuple[Sequential, int]:
    """conv-BN-ReLU-pool x2 then fc6-BN-ReLU-dropout; returns (trunk, flat conv width)."""
    P, k = cfg.patch_size, cfg.conv1_kernel
    top, bottom = _same_pad(P, k, 2)
    s = conv_out_size(P + top + bottom, k, 2, 0)
    s = conv_out_size(s, 2, 2, 0)
    s = conv_out_size(s, 3, 1, 1)
    s = conv_out_size(s, 2, 2, 0)
    flat = cfg.conv2 * s * s
    trunk = Sequential([
        ("pad1", ZeroPad(top, bottom, top, bottom)),
        ("conv1", Conv2D(3, cfg.conv1, k, stride=2, pad=0, rng=rng, input_grad=False)),
        ("bn1", BatchNorm(cfg.conv1)),
        ("relu1", ReLU()),
        ("pool1", MaxPool(2, 2)),
        ("conv2", Conv2D(cfg.conv1, cfg.conv2, 3, stride=1, pad=1, rng=rng)),
        ("bn2", BatchNorm(cfg.conv2)),
        ("relu2", ReLU()),
        ("pool2", MaxPool(2, 2)),
        ("flatten", Flatten()),
        ("fc6", Linear(flat, cfg.fc6, rng=rng)),
        ("bn6", BatchNorm(cfg.fc6)),
        ("relu6", ReLU()),
        ("drop6", Dropout(cfg.dropout)),
    ])
    return trunk, flat


def _fc_block(n_in, n_out, dropout, rng):
    return Sequential([
        ("fc", Linear(n_in, n_out, rng=rng)),
        ("bn", BatchNorm(n_out)),
        ("relu", ReLU()),
        ("drop", Dropout(dropout)),
    ])


def opn_head_params(cfg: ModelConfig) -> int:
    units = 1 if cfg.share_pairs else len(cfg.pairs)
    unit = 2 * cfg.fc6 * cfg.pair_width + 3 * cfg.pair_width
    return units * unit + (len(cfg.pairs) * cfg.pair_width + 1) * cfg.num_classes


def concat_head_params(cfg: ModelConfig, width: int) -> int:
    h = width
    return (cfg.n * cfg.fc6 * h + 3 * h) + (h * h + 3 * h) + (h + 1) * cfg.num_classes


def matched_concat_width(cfg: ModelConfig) -> int:
    target = opn_head_params(cfg)
    h = 1
    while concat_head_params(cfg, h) < target:
        h += 1
    return h


class OrderNet:
    """Siamese trunk plus an OPN or Concat head."""

    def __init__(self, cfg: ModelConfig, seed: int = 0):
        cfg.validate()
        self.cfg = cfg
        rng = make_rng(seed, "init")
        self.trunk, self.conv_width = build_trunk(cfg, rng)
        K = cfg.num_classes
        self.units: list[Sequential] = []
        if cfg.head == "opn":
            n_units = 1 if cfg.share_pairs else len(cfg.pairs)
            self.units = [_fc_block(2 * cfg.fc6, cfg.pair_width, cfg.dropout, rng) for _ in range(n_units)]
            cls_in = len(cfg.pairs) * cfg.pair_width
            self.hidden = None
        else:
            width = cfg.concat_width or matched_concat_width(cfg)
            self.hidden = Sequential([
                ("fc7a", _fc_block(cfg.n * cfg.fc6, width, cfg.dropout, rng)),
                ("fc7b", _fc_block(width, width, cfg.dropout, rng)),
            ])
            cls_in = width
        self.classifier = Linear(cls_in, K, rng=rng, std=TRANSFER_STD)
        self._shapes = None

    # -- parameters -------------------------------------------------------
    def _unit_name(self, idx):
        if self.cfg.share_pairs:
            return "head.pair_shared"
        i, j = self.cfg.pairs[idx]
        return f"head.pair_{i}_{j}"

    def params(self) -> dict[str, Param]:
        out = {f"trunk.{k}": p for k, p in self.trunk.params().items()}
        for idx, unit in enumerate(self.units):
            for k, p in unit.params().items():
                out[f"{self._unit_name(idx)}.{k}"] = p
        if self.hidden is not None:
            out.update({f"head.{k}": p for k, p in self.hidden.params().items()})
        out.update({f"head.cls.{k}": p for k, p in self.classifier.params().items()})
        return out

    def buffers(self) -> dict[str, np.ndarray]:
        out = {f"trunk.{k}": b for k, b in self.trunk.buffers().items()}
        for idx, unit in enumerate(self.units):
            for k, b in unit.buffers().items():
                out[f"{self._unit_name(idx)}.{k}"] = b
        if self.hidden is not None:
            out.update({f"head.{k}": b for k, b in self.hidden.buffers().items()})
        return out

    def num_params(self, prefix: str = "") -> int:
        return sum(p.value.size for k, p in self.params().items() if k.startswith(prefix))

    def zero_grad(self) -> None:
        for p in self.params().values():
            p.grad[...] = 0

    def branch_params(self, branch: int) -> dict[str, Param]:
        """Trunk parameters seen by ``branch``; the same objects for every branch."""
        if not 0 <= branch < self.cfg.n:
            raise IndexError(branch)
        return {k: p for k, p in self.params().items() if k.startswith("trunk.")}

    # -- forward / backward ----------------------------------------------
    def features(self, x: np.ndarray, train: bool = False, rng=None) -> np.ndarray:
        """Per-frame fc6 features, (N, n, D)."""
        N, n = x.shape[:2]
        if x.ndim != 5 or n != self.cfg.n or x.shape[2:] != (3, self.cfg.patch_size, self.cfg.patch_size):
            raise ShapeError(
                f"expected (N, {self.cfg.n}, 3, {self.cfg.patch_size}, {self.cfg.patch_size}), got {x.shape}"
            )
        if train and N < 2:
            raise ShapeError("train-mode forward needs a batch of at least 2 (batch norm)")
        f = self.trunk.forward(x.reshape((N * n,) + x.shape[2:]), train, rng)
        return f.reshape(N, n, -1)

    def forward(self, x: np.ndarray, train: bool = False, rng=None) -> np.ndarray:
        feats = self.features(x, train, rng)
        N = feats.shape[0]
        self._shapes = feats.shape
        if self.cfg.head == "opn":
            pairs = self.cfg.pairs
            if self.cfg.share_pairs:
                stacked = np.concatenate([np.concatenate([feats[:, i], feats[:, j]], axis=1) for i, j in pairs])
                out = self.units[0].forward(stacked, train, rng)
                h = out.reshape(len(pairs), N, -1).transpose(1, 0, 2).reshape(N, -1)
            else:
                outs = [unit.forward(np.concatenate([feats[:, i], feats[:, j]], axis=1), train, rng)
                        for unit, (i, j) in zip(self.units, pairs)]
                h = np.concatenate(outs, axis=1)
        else:
            h = self.hidden.forward(feats.reshape(N, -1), train, rng)
        return self.classifier.forward(h, train, rng)

    def backward(self, dlogits: np.ndarray) -> None:
        """Accumulate gradients of all parameters for upstream gradient ``dlogits``."""
        if self._shapes is None:
            raise CacheError("backward called without a cached forward pass")
        N, n, D = self._shapes
        self._shapes = None
        dh = self.classifier.backward(dlogits)
        dfeats = np.zeros((N, n, D), dh.dtype)
        if self.cfg.head == "opn":
            pairs = self.cfg.pairs
            W = self.cfg.pair_width
            if self.cfg.share_pairs:
                dout = dh.reshape(N, len(pairs), W).transpose(1, 0, 2).reshape(len(pairs) * N, W)
                dpair = self.units[0].backward(dout).reshape(len(pairs), N, 2 * D)
            else:
                dpair = [unit.backward(dh[:, k * W:(k + 1) * W]) for k, unit in enumerate(self.units)]
            for k, (i, j) in enumerate(pairs):
                dfeats[:, i] += dpair[k][:, :D]
                dfeats[:, j] += dpair[k][:, D:]
        else:
            dfeats = self.hidden.backward(dh).reshape(N, n, D)
        self.trunk.backward(dfeats.reshape(N * n, D))

    def loss_and_grad(self, x, labels, train=True, rng=None) -> tuple[float, np.ndarray]:
        logits = self.forward(x, train, rng)
        loss, dlogits = softmax_cross_entropy(logits, labels)
        self.backward(dlogits)
        return loss, logits

    def predict(self, x: np.ndarray, batch: int = 256) -> np.ndarray:
        out = [self.forward(x[i:i + batch], train=False) for i in range(0, len(x), batch)]
        return np.concatenate(out)

    # -- state ------------------------------------------------------------
    def state(self) -> dict[str, np.ndarray]:
        st = {f"param/{k}": p.value for k, p in self.params().items()}
        st.update({f"buffer/{k}": b for k, b in self.buffers().items()})
        return st

    def load_state(self, tensors: dict[str, np.ndarray], strict: bool = True) -> None:
        params, bufs = self.params(), self.buffers()
        expected = {f"param/{k}" for k in params} | {f"buffer/{k}" for k in bufs}
        given = {k for k in tensors if k.startswith(("param/", "buffer/"))}
        if strict and expected != given:
            missing, extra = sorted(expected - given), sorted(given - expected)
            raise ShapeError(f"state mismatch: missing={missing[:5]} unexpected={extra[:5]}")
        for k, v in tensors.items():
            kind, _, name = k.partition("/")
            target = params[name].value if kind == "param" and name in params else bufs.get(name) if kind == "buffer" else None
            if target is None:
                continue
            if target.shape != v.shape:
                raise ShapeError(f"{k}: shape {v.shape} != {target.shape}")
            target[...] = v


# --- checkpoint file -------------------------------------------------------

CKPT_MAGIC = b"OPNC"
CKPT_VERSION = 1


class CheckpointFormatError(ValueError):
    pass


@dataclass
class Checkpoint:
    hyper: dict[str, str]
    tensors: dict[str, np.ndarray]
    step: int = 0
    version: int = CKPT_VERSION

    def model_config(self) -> ModelConfig:
        kw = {}
        for f in fields(ModelConfig):
            raw = self.hyper.get(f"model.{f.name}")
            if raw is None:
                continue
            default = getattr(ModelConfig, f.name)
            kw[f.name] = raw == "True" if isinstance(default, bool) else type(default)(raw)
        return ModelConfig(**kw)


def model_hyper(cfg: ModelConfig) -> dict[str, str]:
    return {f"model.{k}": str(v) for k, v in asdict(cfg).items()}


def make_checkpoint(model: OrderNet, step: int = 0, extra: dict[str, np.ndarray] | None = None,
                    hyper: dict[str, str] | None = None) -> Checkpoint:
    h = model_hyper(model.cfg)
    h.update(hyper or {})
    t = {k: v.copy() for k, v in model.state().items()}
    for k, v in (extra or {}).items():
        t[k] = v.copy()
    return Checkpoint(h, t, step)


def model_from_checkpoint(ckpt: Checkpoint) -> OrderNet:
    m = OrderNet(ckpt.model_config())
    m.load_state(ckpt.tensors)
    return m


def save_checkpoint(path: str | Path, ckpt: Checkpoint) -> Path:
    text = "".join(f"{k}={v}\n" for k, v in sorted(ckpt.hyper.items()))
    text += f"step={ckpt.step}\n"
    tb = text.encode()
    buf = bytearray(CKPT_MAGIC + struct.pack("<HI", ckpt.version, len(tb)) + tb)
    buf += struct.pack("<I", len(ckpt.tensors))
    for name, arr in sorted(ckpt.tensors.items()):
        nb = name.encode()
        a = np.ascontiguousarray(arr, dtype="<f4")
        buf += struct.pack(f"<H{len(nb)}sB", len(nb), nb, a.ndim)
        buf += struct.pack(f"<{a.ndim}I", *a.shape)
        buf += a.tobytes()
    buf += struct.pack("<I", zlib.crc32(buf))
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(bytes(buf))
    tmp.replace(path)
    return path


def load_checkpoint(path: str | Path) -> Checkpoint:
    data = Path(path).read_bytes()
    if len(data) < 14:
        raise CheckpointFormatError(f"{path}: file too short")
    if data[:4] != CKPT_MAGIC:
        raise CheckpointFormatError(f"{path}: bad magic {data[:4]!r}")
    version, tlen = struct.unpack_from("<HI", data, 4)
    if version != CKPT_VERSION:
        raise CheckpointFormatError(f"{path}: unsupported checkpoint version {version}")
    (crc,) = struct.unpack_from("<I", data, len(data) - 4)
    if zlib.crc32(data[:-4]) != crc:
        raise CheckpointFormatError(f"{path}: checksum mismatch")
    try:
        off = 10
        text = data[off:off + tlen].decode()
        off += tlen
        hyper = {}
        for line in text.splitlines():
            k, _, v = line.partition("=")
            hyper[k] = v
        step = int(hyper.pop("step", "0"))
        (count,) = struct.unpack_from("<I", data, off)
        off += 4
        tensors = {}
        for _ in range(count):
            (nl,) = struct.unpack_from("<H", data, off)
            off += 2
            name = data[off:off + nl].decode()
            off += nl
            (ndim,) = struct.unpack_from("<B", data, off)
            off += 1
            shape = struct.unpack_from(f"<{ndim}I", data, off)
            off += 4 * ndim
            size = int(np.prod(shape)) if ndim else 1
            tensors[name] = np.frombuffer(data, "<f4", size, off).reshape(shape).astype(DTYPE)
            off += 4 * size
    except (struct.error, ValueError, UnicodeDecodeError) as e:
        raise CheckpointFormatError(f"{path}: malformed checkpoint ({e})") from e
    if off != len(data) - 4:
        raise CheckpointFormatError(f"{path}: trailing bytes")
    return Checkpoint(hyper, tensors, step, version)


def extract_trunk(ckpt: Checkpoint, include_fc6: bool = False) -> dict[str, np.ndarray]:
    """Convolutional trunk tensors (params and batch-norm statistics) of a checkpoint."""
    if ckpt.version != CKPT_VERSION:
        raise CheckpointFormatError(f"unsupported checkpoint version {ckpt.version}")
    keep = ("conv1", "bn1", "conv2", "bn2") + (("fc6", "bn6") if include_fc6 else ())
    out = {}
    for k, v in ckpt.tensors.items():
        kind, _, name = k.partition("/")
        if kind not in ("param", "buffer") or not name.startswith("trunk."):
            continue
        if name.split(".")[1] in keep:
            out[k] = v.copy()
    if not any(".conv1." in k for k in out):
        raise CheckpointFormatError("checkpoint has no convolutional trunk")
    return out
