"""Order-prediction evaluation, downstream transfer, ablation runs and filter export.

The downstream task is trajectory-kind classification on single-object
synthetic clips. A fresh classifier reads ``frames`` crops of a clip through
the (optionally pretrained) trunk, concatenates their fc6 features and
predicts one of ``TRAJECTORY_KINDS``. Transferred models copy only the
convolutional layers; every fully connected layer is re-initialized from
N(0, 0.005).
"""

from __future__ import annotations

import csv
import hashlib
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import mining
from .layers import BatchNorm, Dropout, Linear, Param, ReLU, Sequential
from .model import (TRANSFER_STD, Checkpoint, ModelConfig, OrderNet, build_trunk, extract_trunk,
                    make_checkpoint)
from .ops import softmax_cross_entropy
from .synth import TRAJECTORY_KINDS, SceneConfig, generate_clips
from .tensor import DTYPE, ShapeError, make_rng
from .trainer import TrainConfig, Trainer

log = logging.getLogger(__name__)

ABLATION_AXES = ("sampling_strategy", "channel_strategy", "jitter", "head_type", "tuple_length",
                 "patch_size", "dataset_size")
METRICS = ("order_acc", "downstream_acc")


# --- order prediction --------------------------------------------------------

def accuracy_from_logits(logits: np.ndarray, labels: np.ndarray, num_classes: int | None = None) -> float:
    logits = np.asarray(logits)
    labels = np.asarray(labels)
    if logits.ndim != 2 or len(logits) != len(labels):
        raise ShapeError(f"logits {logits.shape} do not match {len(labels)} labels")
    if num_classes is not None and logits.shape[1] != num_classes:
        raise ShapeError(f"class-count mismatch: logits have {logits.shape[1]}, expected {num_classes}")
    if len(labels) == 0:
        return float("nan")
    return float((logits.argmax(axis=1) == labels).mean())


def order_accuracy(model: OrderNet, x: np.ndarray, y: np.ndarray) -> float:
    """Held-out order-prediction accuracy of ``model`` in eval mode."""
    y = np.asarray(y)
    K = model.cfg.num_classes
    if len(y) and (y.min() < 0 or y.max() >= K):
        raise ShapeError(f"labels outside the model's {K} classes")
    return accuracy_from_logits(model.predict(x), y, K)


# --- downstream transfer ---------------------------------------------------

@dataclass
class TransferConfig:
    frames: int = 4
    frame_stride: int = 2
    train_clips: int = 160
    test_clips: int = 400
    steps: int = 200
    batch_size: int = 32
    lr: float = 0.01
    momentum: float = 0.9
    hidden: int = 64
    dropout: float = 0.5
    freeze_trunk: bool = False
    augment: str = "dihedral"

    def validate(self) -> None:
        if self.frames < 2 or self.frame_stride < 1:
            raise ValueError("frames must be >= 2 and frame_stride >= 1")
        if self.train_clips < 2 or self.test_clips < 1 or self.steps < 0:
            raise ValueError("need train_clips >= 2, test_clips >= 1, steps >= 0")


def transfer_scene(scene: SceneConfig) -> SceneConfig:
    """Single-object clips with trajectory kinds drawn uniformly."""
    return replace(scene, objects_min=1, objects_max=1, kind_weights=(1.0,) * len(TRAJECTORY_KINDS),
                   hue_drift=0.0, value_drift=0.0)


def clip_to_example(clip, frames: int, stride: int, patch: int) -> np.ndarray:
    """(frames, 3, P, P) crops centered on the object's path over the sampled frames."""
    T = len(clip)
    span = (frames - 1) * stride
    if span >= T:
        raise ValueError(f"{frames} frames at stride {stride} need a clip longer than {T}")
    t0 = (T - 1 - span) // 2
    ts = t0 + stride * np.arange(frames)
    h, w = clip.shape
    if patch > min(h, w):
        raise ValueError(f"patch {patch} larger than frame {h}x{w}")
    c = clip.script.objects[0].centroids()[ts]
    cx, cy = (c.min(axis=0) + c.max(axis=0)) / 2
    x = int(np.clip(round(cx - patch / 2), 0, w - patch))
    y = int(np.clip(round(cy - patch / 2), 0, h - patch))
    return clip.frames[ts, :, y:y + patch, x:x + patch]


def transfer_dataset(scene: SceneConfig, tcfg: TransferConfig, patch: int, seed: int, count: int,
                     start_id: int = 0) -> tuple[np.ndarray, np.ndarray]:
    clips = generate_clips(transfer_scene(scene), seed, count, start_id)
    x = np.stack([clip_to_example(c, tcfg.frames, tcfg.frame_stride, patch) for c in clips]).astype(DTYPE)
    y = np.array([TRAJECTORY_KINDS.index(c.script.objects[0].kind) for c in clips], np.int64)
    return x, y


@dataclass
class TransferModelConfig:
    n: int
    num_classes: int
    patch_size: int


class TransferNet:
    """Trunk over each frame, concatenated fc6 features, one hidden layer, classifier.

    Exposes the parameter/forward/backward interface the trainer expects.
    """

    def __init__(self, cfg: ModelConfig, frames: int, num_classes: int, seed: int = 0,
                 trunk_state: dict[str, np.ndarray] | None = None, freeze_trunk: bool = False,
                 hidden: int = 64, dropout: float = 0.5):
        rng = make_rng(seed, "transfer-init")
        self.model_cfg = replace(cfg, dropout=dropout)
        self.cfg = TransferModelConfig(frames, num_classes, cfg.patch_size)
        self.trunk, _ = build_trunk(self.model_cfg, rng)
        fc6 = dict(self.trunk.layers)["fc6"]
        fc6.w.value[...] = rng.standard_normal(fc6.w.value.shape) * TRANSFER_STD
        self.head = Sequential([
            ("fc7", Linear(frames * cfg.fc6, hidden, rng=rng, std=TRANSFER_STD)),
            ("bn7", BatchNorm(hidden)),
            ("relu7", ReLU()),
            ("drop7", Dropout(dropout)),
            ("cls", Linear(hidden, num_classes, rng=rng, std=TRANSFER_STD)),
        ])
        self.frozen: set[str] = set()
        if trunk_state is not None:
            self.load_trunk(trunk_state)
        if freeze_trunk:
            self.frozen = {k for k in self.trunk.params() if k.split(".")[0] in ("conv1", "bn1", "conv2", "bn2")}
        self._n = None

    def load_trunk(self, tensors: dict[str, np.ndarray]) -> None:
        params, bufs = self.trunk.params(), self.trunk.buffers()
        for k, v in tensors.items():
            kind, _, name = k.partition("/")
            name = name.removeprefix("trunk.")
            target = params[name].value if kind == "param" else bufs[name]
            if target.shape != v.shape:
                raise ShapeError(f"incompatible trunk tensor {name}: {v.shape} vs {target.shape}")
            target[...] = v

    def all_params(self) -> dict[str, Param]:
        out = {f"trunk.{k}": p for k, p in self.trunk.params().items()}
        out.update({f"head.{k}": p for k, p in self.head.params().items()})
        return out

    def params(self) -> dict[str, Param]:
        """Trainable parameters (frozen trunk layers excluded)."""
        return {k: p for k, p in self.all_params().items() if k.removeprefix("trunk.") not in self.frozen}

    def buffers(self) -> dict[str, np.ndarray]:
        out = {f"trunk.{k}": b for k, b in self.trunk.buffers().items()}
        out.update({f"head.{k}": b for k, b in self.head.buffers().items()})
        return out

    def state(self) -> dict[str, np.ndarray]:
        st = {f"param/{k}": p.value for k, p in self.all_params().items()}
        st.update({f"buffer/{k}": b for k, b in self.buffers().items()})
        return st

    def zero_grad(self) -> None:
        for p in self.all_params().values():
            p.grad[...] = 0

    def forward(self, x: np.ndarray, train: bool = False, rng=None) -> np.ndarray:
        N, n = x.shape[:2]
        P = self.cfg.patch_size
        if x.ndim != 5 or n != self.cfg.n or x.shape[2:] != (3, P, P):
            raise ShapeError(f"expected (N, {self.cfg.n}, 3, {P}, {P}), got {x.shape}")
        f = self.trunk.forward(x.reshape((N * n,) + x.shape[2:]), train, rng)
        self._n = (N, n)
        return self.head.forward(f.reshape(N, -1), train, rng)

    def backward(self, dlogits: np.ndarray) -> None:
        N, n = self._n
        df = self.head.backward(dlogits)
        self.trunk.backward(df.reshape(N * n, -1))

    def loss_and_grad(self, x, labels, train=True, rng=None):
        logits = self.forward(x, train, rng)
        loss, d = softmax_cross_entropy(logits, labels)
        self.backward(d)
        return loss, logits

    def predict(self, x: np.ndarray, batch: int = 256) -> np.ndarray:
        return np.concatenate([self.forward(x[i:i + batch]) for i in range(0, len(x), batch)])


@dataclass
class TransferResult:
    accuracy: float
    train_accuracy: float
    pretrained: bool
    frozen: bool
    seed: int


def downstream_transfer(checkpoint: Checkpoint | None, tcfg: TransferConfig | None = None,
                        scene: SceneConfig | None = None, seed: int = 0,
                        model_cfg: ModelConfig | None = None, data=None) -> TransferResult:
    """Train a fresh classifier on the downstream task and return its test accuracy.

    ``checkpoint=None`` gives the random-initialization baseline (``model_cfg``
    then sets the trunk shape). ``data`` optionally supplies
    ``((x_train, y_train), (x_test, y_test))`` to share one dataset across runs.
    """
    tcfg = tcfg or TransferConfig()
    tcfg.validate()
    scene = scene or SceneConfig()
    if checkpoint is not None:
        cfg = checkpoint.model_config()
        trunk_state = extract_trunk(checkpoint)
    else:
        cfg = model_cfg or ModelConfig()
        trunk_state = None
    if data is None:
        data = transfer_data(scene, tcfg, cfg.patch_size, seed)
    (xtr, ytr), (xte, yte) = data
    net = TransferNet(cfg, tcfg.frames, len(TRAJECTORY_KINDS), seed, trunk_state, tcfg.freeze_trunk,
                      tcfg.hidden, tcfg.dropout)
    tc = TrainConfig(batch_size=tcfg.batch_size, lr0=tcfg.lr, momentum=tcfg.momentum, total_steps=tcfg.steps,
                     seed=seed, augment=tcfg.augment)
    Trainer(net, tc).run(xtr, ytr)
    return TransferResult(
        accuracy=accuracy_from_logits(net.predict(xte), yte),
        train_accuracy=accuracy_from_logits(net.predict(xtr), ytr),
        pretrained=checkpoint is not None,
        frozen=tcfg.freeze_trunk,
        seed=seed,
    )


def transfer_data(scene: SceneConfig, tcfg: TransferConfig, patch: int, seed: int):
    """Disjoint train/test downstream sets for ``seed``."""
    base = 10_000 * (seed + 1)
    train = transfer_dataset(scene, tcfg, patch, seed, tcfg.train_clips, start_id=base)
    test = transfer_dataset(scene, tcfg, patch, seed, tcfg.test_clips, start_id=base + tcfg.train_clips)
    return train, test


# --- pretext pipeline ---------------------------------------------------------

@dataclass
class PipelineConfig:
    """Everything one pretext run needs: scene, mining, model, training, data sizes."""

    scene: SceneConfig = field(default_factory=SceneConfig)
    mining: mining.MiningConfig = field(default_factory=mining.MiningConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    transfer: TransferConfig = field(default_factory=TransferConfig)
    train_clips: int = 600
    heldout_clips: int = 150
    max_tuples: int = 5000
    # colour-shortcut hue step for the pretext clips; 0 disables
    shortcut_hue: float = 0.0


@dataclass
class PretextRun:
    checkpoint: Checkpoint
    order_acc: float
    train_tuples: int
    loss: list[float]


def mine_split(cfg: PipelineConfig, seed: int, heldout: bool, shortcut_hue: float | None = None,
               threads: int = 1) -> tuple[np.ndarray, np.ndarray]:
    hue = cfg.shortcut_hue if shortcut_hue is None else shortcut_hue
    count = cfg.heldout_clips if heldout else cfg.train_clips
    start = cfg.train_clips if heldout else 0
    clips = generate_clips(cfg.scene, seed, count, start_id=start, shortcut_hue=hue)
    samples = mining.mine_clips(clips, cfg.mining, seed, threads=threads,
                                limit=None if heldout else cfg.max_tuples)
    if not samples:
        raise mining.MiningError("no tuples mined")
    return mining.stack_samples(samples)


def run_pretext(cfg: PipelineConfig, seed: int, threads: int = 1, heldout=None) -> PretextRun:
    """Synthesize, mine and train one order-prediction model; report held-out accuracy."""
    x, y = mine_split(cfg, seed, heldout=False, threads=threads)
    xe, ye = heldout if heldout is not None else mine_split(cfg, seed, heldout=True, threads=threads)
    model_cfg = replace(cfg.model, n=cfg.mining.n, patch_size=cfg.mining.patch_size)
    model = OrderNet(model_cfg, seed=seed)
    tr = Trainer(model, replace(cfg.train, seed=seed))
    tlog = tr.run(x, y)
    return PretextRun(tr.checkpoint(), order_accuracy(model, xe, ye), len(x), tlog.loss)


# --- ablations ---------------------------------------------------------------

def _axis_setter(axis: str):
    def set_mining(name):
        return lambda c, v: replace(c, mining=replace(c.mining, **{name: v}))

    table = {
        "sampling_strategy": set_mining("strategy"),
        "channel_strategy": set_mining("channel"),
        "jitter": set_mining("jitter"),
        "tuple_length": lambda c, v: replace(c, mining=replace(c.mining, n=int(v)), model=replace(c.model, n=int(v))),
        "patch_size": lambda c, v: replace(c, mining=replace(c.mining, patch_size=int(v)),
                                           model=replace(c.model, patch_size=int(v))),
        "head_type": lambda c, v: replace(c, model=replace(c.model, head=v)),
        "dataset_size": lambda c, v: replace(c, max_tuples=int(v)),
    }
    return table[axis]


@dataclass
class AblationSpec:
    axis: str
    levels: list
    seeds: list[int] = field(default_factory=lambda: [0, 1, 2])
    metric: str = "order_acc"
    base: PipelineConfig = field(default_factory=PipelineConfig)

    def validate(self) -> None:
        if self.axis not in ABLATION_AXES:
            raise ValueError(f"axis must be one of {ABLATION_AXES}, got {self.axis!r}")
        if self.metric not in METRICS:
            raise ValueError(f"metric must be one of {METRICS}, got {self.metric!r}")
        if len(self.levels) < 2:
            raise ValueError("an ablation needs at least 2 levels")
        if len(set(self.seeds)) != len(self.seeds) or not self.seeds:
            raise ValueError("seeds must be non-empty and distinct")

    def level_config(self, level) -> PipelineConfig:
        return _axis_setter(self.axis)(self.base, level)


def config_fingerprint(cfg: PipelineConfig) -> str:
    return hashlib.sha256(repr(asdict(cfg)).encode()).hexdigest()[:12]


@dataclass
class RunRecord:
    level: str
    seed: int
    value: float
    error: str = ""

    @property
    def ok(self) -> bool:
        return not self.error


@dataclass
class LevelSummary:
    level: str
    mean: float
    std: float
    n_ok: int
    n_failed: int
    fingerprint: str


@dataclass
class Verdict:
    better: str
    worse: str
    gap: float
    pooled_std: float

    @property
    def significant(self) -> bool:
        return self.gap > self.pooled_std

    def describe(self) -> str:
        tag = "significant" if self.significant else "not significant"
        return (f"{self.better} > {self.worse}: gap {100 * self.gap:.2f} points, "
                f"pooled std {100 * self.pooled_std:.2f} ({tag})")


@dataclass
class EvalReport:
    axis: str
    metric: str
    runs: list[RunRecord]
    levels: list[LevelSummary]
    verdicts: list[Verdict]

    @property
    def failed(self) -> list[RunRecord]:
        return [r for r in self.runs if not r.ok]

    def summary(self, level) -> LevelSummary:
        for s in self.levels:
            if s.level == str(level):
                return s
        raise KeyError(level)

    def to_text(self) -> str:
        lines = [f"ablation axis={self.axis} metric={self.metric}"]
        for s in self.levels:
            lines.append(f"  {s.level:>12s}: {100 * s.mean:6.2f} +- {100 * s.std:5.2f}  "
                         f"(runs ok={s.n_ok} failed={s.n_failed}, config {s.fingerprint})")
        lines.append("verdicts:")
        lines.extend(f"  {v.describe()}" for v in self.verdicts)
        for r in self.failed:
            lines.append(f"  FAILED level={r.level} seed={r.seed}: {r.error}")
        return "\n".join(lines) + "\n"

    def write(self, out_dir: str | Path) -> tuple[Path, Path]:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        csv_path = out / "ablation.csv"
        with open(csv_path, "w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow(["axis", "level", "seed", "metric", "value", "error"])
            for r in self.runs:
                wr.writerow([self.axis, r.level, r.seed, self.metric, "" if not r.ok else repr(r.value), r.error])
        txt = out / "ablation.txt"
        txt.write_text(self.to_text())
        return csv_path, txt


def summarize(axis: str, metric: str, runs: list[RunRecord], fingerprints: dict[str, str]) -> EvalReport:
    """Aggregate per-level mean/std and pairwise ordering verdicts from stored runs."""
    levels = []
    for level in dict.fromkeys(r.level for r in runs):
        vals = np.array([r.value for r in runs if r.level == level and r.ok])
        failed = sum(1 for r in runs if r.level == level and not r.ok)
        mean = float(vals.mean()) if len(vals) else float("nan")
        std = float(vals.std(ddof=1)) if len(vals) > 1 else float("nan")
        levels.append(LevelSummary(level, mean, std, len(vals), failed, fingerprints.get(level, "")))
    verdicts = []
    for i, a in enumerate(levels):
        for b in levels[i + 1:]:
            if math.isnan(a.mean) or math.isnan(b.mean):
                continue
            hi, lo = (a, b) if a.mean >= b.mean else (b, a)
            pooled = math.sqrt((hi.std ** 2 + lo.std ** 2) / 2) if not math.isnan(hi.std + lo.std) else float("nan")
            verdicts.append(Verdict(hi.level, lo.level, hi.mean - lo.mean, pooled))
    return EvalReport(axis, metric, runs, levels, verdicts)


def _run_one(args) -> RunRecord:
    spec, level, seed = args
    try:
        cfg = spec.level_config(level)
        res = run_pretext(cfg, seed)
        if spec.metric == "order_acc":
            value = res.order_acc
        else:
            value = downstream_transfer(res.checkpoint, cfg.transfer, cfg.scene, seed).accuracy
        return RunRecord(str(level), seed, value)
    except Exception as e:  # a failed run is recorded, never dropped
        return RunRecord(str(level), seed, float("nan"), f"{type(e).__name__}: {e}")


def run_ablation(spec: AblationSpec, threads: int = 1) -> EvalReport:
    """Train every (level, seed) pair and compare levels on seed-averaged metrics."""
    spec.validate()
    jobs = [(spec, level, seed) for level in spec.levels for seed in spec.seeds]
    if threads > 1:
        with ProcessPoolExecutor(threads) as ex:
            runs = list(ex.map(_run_one, jobs))
    else:
        runs = [_run_one(j) for j in jobs]
    fps = {str(lv): config_fingerprint(spec.level_config(lv)) for lv in spec.levels}
    return summarize(spec.axis, spec.metric, runs, fps)


# --- filter export -------------------------------------------------------------

def _conv1_weights(source) -> np.ndarray:
    if isinstance(source, Checkpoint):
        tensors = source.tensors
    elif isinstance(source, OrderNet):
        tensors = make_checkpoint(source).tensors
    else:
        raise TypeError("expected a Checkpoint or OrderNet")
    w = tensors.get("param/trunk.conv1.w")
    if w is None or w.ndim != 4:
        raise ShapeError("first trunk layer is not convolutional")
    return np.asarray(w, np.float64)


def filter_grid(w: np.ndarray) -> np.ndarray:
    """Tile (F, C, k, k) filters into a uint8 image with 1-px black separators.

    Each filter is min-max normalized to [0, 255] on its own; a constant
    filter maps to mid-gray (128). Returns (H, W, C) for C == 3, else (H, W).
    """
    F, C, k, _ = w.shape
    cols = math.ceil(math.sqrt(F))
    rows = math.ceil(F / cols)
    H, W = rows * (k + 1) + 1, cols * (k + 1) + 1
    img = np.zeros((H, W, C), np.uint8)
    for f in range(F):
        lo, hi = w[f].min(), w[f].max()
        if hi > lo:
            tile = np.rint((w[f] - lo) / (hi - lo) * 255)
        else:
            tile = np.full(w[f].shape, 128.0)
        r, c = divmod(f, cols)
        y, x = 1 + r * (k + 1), 1 + c * (k + 1)
        img[y:y + k, x:x + k] = tile.transpose(1, 2, 0).astype(np.uint8)
    return img if C == 3 else img[..., 0] if C == 1 else img


def write_pnm(path: str | Path, img: np.ndarray) -> Path:
    """Binary PGM (2-D) or PPM (H, W, 3) file."""
    if img.ndim == 2:
        magic = b"P5"
    elif img.ndim == 3 and img.shape[2] == 3:
        magic = b"P6"
    else:
        raise ShapeError(f"cannot write image of shape {img.shape}")
    h, w = img.shape[:2]
    path = Path(path)
    path.write_bytes(magic + f"\n{w} {h}\n255\n".encode() + np.ascontiguousarray(img, np.uint8).tobytes())
    return path


def read_pnm(path: str | Path) -> np.ndarray:
    data = Path(path).read_bytes()
    parts = data.split(maxsplit=4)
    if len(parts) < 5 or parts[0] not in (b"P5", b"P6") or parts[3] != b"255":
        raise ValueError(f"{path}: not a binary 8-bit PGM/PPM file")
    w, h = int(parts[1]), int(parts[2])
    ch = 3 if parts[0] == b"P6" else 1
    # the header ends with exactly one whitespace byte after the maxval
    body = data[len(data) - h * w * ch:]
    img = np.frombuffer(body, np.uint8).reshape((h, w, ch) if ch == 3 else (h, w))
    return img.copy()


def export_conv1_filters(source, path: str | Path) -> Path:
    """Write the conv1 filters of a checkpoint or model as a PPM tile grid."""
    return write_pnm(path, filter_grid(_conv1_weights(source)))


def grid_tiles(img: np.ndarray, k: int, count: int) -> np.ndarray:
    """Inverse layout of :func:`filter_grid`: (count, k, k[, C]) tiles."""
    cols = (img.shape[1] - 1) // (k + 1)
    out = []
    for f in range(count):
        r, c = divmod(f, cols)
        y, x = 1 + r * (k + 1), 1 + c * (k + 1)
        out.append(img[y:y + k, x:x + k])
    return np.stack(out)
