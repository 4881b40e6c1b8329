"""Deterministic SGD training harness with metrics, stats, and exports.

One trainer owns its model exclusively; everything stochastic draws from
named streams keyed by the config seed, so a config replays bit-identically
on one machine. Evaluation works on read-only snapshots and never touches
the streams.
"""

from __future__ import annotations

import csv
import hashlib
import json
import math
from dataclasses import asdict, dataclass, field, replace
from typing import Optional

import numpy as np
from scipy import stats as scipy_stats

from . import datasets as data
from .autodiff import NumericError, Tensor, backward, no_grad
from .losses import LossBreakdown, cc_loss, pair_stats, pairwise_sq_dist_naive, softmax_ce
from .nn import MLPBackbone, Model, TinyCNN
from .rng import stream_gen

LOSS_MODES = ("ce_plain", "ce_cam", "cc")


class ConfigError(ValueError):
    """A TrainConfig field (or combination) is invalid."""


class TrainingAborted(RuntimeError):
    """A loss term went non-finite; carries where it happened."""

    def __init__(self, epoch: int, batch_index: int, detail: str):
        super().__init__(f"non-finite loss at epoch {epoch}, batch {batch_index}: {detail}")
        self.epoch = epoch
        self.batch_index = batch_index
        self.detail = detail


@dataclass
class TrainConfig:
    """Everything a run needs; two configs with equal fields replay identically."""

    dataset: str = "synth"
    data_dir: str = "data"
    backbone: str = "auto"  # auto | tinycnn | mlp
    loss_mode: str = "cc"  # ce_plain | ce_cam | cc
    epochs: int = 10
    batch_size: int = 32
    lr_init: float = 0.1
    lr_final: float = 1e-5
    momentum: float = 0.9
    weight_decay: float = 5e-4
    lam: float = 1.0
    eps: float = 1e-6
    seed: int = 0
    hidden_dim: int = 64
    mlp_width: int = 64
    flip: Optional[bool] = None  # default: on for cifar100 only
    crop: bool = False
    dtype: str = "f32"
    train_limit: int = 0  # 0 = full split
    test_limit: int = 0
    eval_batch_size: int = 64
    synth_classes: int = 4
    synth_dim: int = 8
    synth_separation: float = 8.0
    synth_per_class: int = 250

    def resolved(self) -> "TrainConfig":
        cfg = replace(self)
        if cfg.flip is None:
            cfg.flip = cfg.dataset == "cifar100"
        return cfg

    def validate(self) -> None:
        if self.dataset not in ("mnist", "cifar100", "synth"):
            raise ConfigError(f"unknown dataset {self.dataset!r}")
        if self.loss_mode not in LOSS_MODES:
            raise ConfigError(f"unknown loss mode {self.loss_mode!r}")
        if self.backbone not in ("auto", "tinycnn", "mlp"):
            raise ConfigError(f"unknown backbone {self.backbone!r}")
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ConfigError("batch size must be >= 1")
        if self.loss_mode == "cc" and self.batch_size < 2:
            raise ConfigError("batch size must be >= 2 for cc (pairwise terms need 2 samples)")
        if not (self.lr_init > self.lr_final > 0):
            raise ConfigError("need lr_init > lr_final > 0")
        if not 0 <= self.momentum < 1:
            raise ConfigError("momentum must be in [0, 1)")
        if self.weight_decay < 0:
            raise ConfigError("weight decay must be nonnegative")
        if self.lam < 0:
            raise ConfigError("lambda must be nonnegative")
        if self.eps <= 0:
            raise ConfigError("epsilon must be positive")
        if self.seed < 0:
            raise ConfigError("seed must be nonnegative")
        if self.hidden_dim < 1:
            raise ConfigError("hidden dim must be >= 1")
        if self.dtype not in ("f32", "f64"):
            raise ConfigError("dtype must be f32 or f64")

    @property
    def np_dtype(self):
        return np.float32 if self.dtype == "f32" else np.float64


def cosine_lr(t: int, total: int, lr_init: float = 0.1, lr_final: float = 1e-5) -> float:
    """Half-cosine interpolation from lr_init (t=0) down to lr_final (t=total)."""
    if total <= 0:
        raise ConfigError("total steps must be positive")
    if not 0 <= t <= total:
        raise ConfigError(f"step {t} outside [0, {total}]")
    return lr_final + 0.5 * (lr_init - lr_final) * (1.0 + math.cos(math.pi * t / total))


def sgd_update(
    param: np.ndarray,
    grad: Optional[np.ndarray],
    velocity: np.ndarray,
    lr: float,
    momentum: float,
    weight_decay: float,
) -> None:
    """Classical momentum step, in place: v <- m v + (g + wd p); p <- p - lr v.

    Weight decay is coupled: it joins the gradient before the momentum
    buffer, not after.
    """
    velocity *= momentum
    if grad is not None:
        velocity += grad
    if weight_decay:
        velocity += weight_decay * param
    param -= lr * velocity


class SGD:
    """Momentum SGD over a fixed parameter list."""

    def __init__(self, params, momentum: float = 0.9, weight_decay: float = 5e-4):
        self.params = list(params)
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self, lr: float) -> None:
        for p, v in zip(self.params, self.velocity):
            if p.grad is not None and p.grad.shape != p.data.shape:
                raise ValueError(f"gradient shape {p.grad.shape} != param shape {p.data.shape}")
            sgd_update(p.data, p.grad, v, lr, self.momentum, self.weight_decay)


@dataclass
class EpochRecord:
    epoch: int
    lr: float
    loss_total: Optional[float]
    loss_ce: Optional[float]
    loss_intra: Optional[float]
    loss_inter: Optional[float]
    loss_ratio: Optional[float]
    train_acc: Optional[float]
    test_acc: Optional[float]
    eval_mean_intra: Optional[float]
    eval_mean_inter: Optional[float]
    eval_ratio: Optional[float]
    param_digest: str


class MetricsLog:
    """Per-epoch records, serializable as CSV and as JSON lines."""

    FIELDS = [f for f in EpochRecord.__dataclass_fields__]

    def __init__(self):
        self.records: list[EpochRecord] = []

    def append(self, record: EpochRecord) -> None:
        if self.records and record.epoch <= self.records[-1].epoch:
            raise ValueError("epoch indices must increase")
        self.records.append(record)

    def __len__(self):
        return len(self.records)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(self.FIELDS)
            for rec in self.records:
                row = [getattr(rec, f) for f in self.FIELDS]
                writer.writerow(["" if v is None else v for v in row])

    def to_jsonl(self, path) -> None:
        with open(path, "w") as fh:
            for rec in self.records:
                fh.write(json.dumps(asdict(rec)) + "\n")


@dataclass
class EvalStats:
    accuracy: float
    mean_intra: Optional[float]
    mean_inter: Optional[float]
    ratio: Optional[float]
    samples: int


@dataclass
class TrainResult:
    """Trained model (left at the best-test-accuracy state) plus bookkeeping."""

    model: Model
    log: MetricsLog
    best_epoch: int
    best_state: dict
    final_state: dict
    best_test_acc: Optional[float]
    final_test_acc: Optional[float]


def param_digest(model: Model) -> str:
    h = hashlib.sha256()
    for name, tensor in model.named_params():
        h.update(name.encode())
        h.update(str(tensor.data.shape).encode())
        h.update(np.ascontiguousarray(tensor.data).tobytes())
    return h.hexdigest()[:16]


def load_datasets(config: TrainConfig):
    if config.dataset == "mnist":
        train, test = data.load_mnist(config.data_dir)
    elif config.dataset == "cifar100":
        train, test = data.load_cifar100(config.data_dir)
    else:
        train, test = data.load_synth(
            config.seed,
            class_count=config.synth_classes,
            per_class_train=config.synth_per_class,
            per_class_test=max(1, config.synth_per_class // 2),
            dim=config.synth_dim,
            separation=config.synth_separation,
        )
    if config.train_limit:
        train = train.subset(np.arange(min(config.train_limit, len(train))))
    if config.test_limit:
        test = test.subset(np.arange(min(config.test_limit, len(test))))
    return train, test


def pick_backbone(config: TrainConfig, ds: data.LabeledDataset) -> str:
    if config.backbone != "auto":
        return config.backbone
    h, w, _ = ds.image_shape
    return "tinycnn" if h % 4 == 0 and w % 4 == 0 and h >= 8 and w >= 8 else "mlp"


def build_model(config: TrainConfig, ds: data.LabeledDataset) -> Model:
    """Model with parameters drawn from the config seed's init stream."""
    rng = stream_gen(config.seed, "init")
    dtype = config.np_dtype
    h, w, c = ds.image_shape
    kind = pick_backbone(config, ds)
    if kind == "tinycnn":
        backbone = TinyCNN.init((c, h, w), rng, dtype)
    else:
        backbone = MLPBackbone.init(h * w * c, [config.mlp_width], rng, dtype)
    return Model.init(backbone, config.hidden_dim, ds.class_count, rng, dtype)


def _forward(model: Model, mode: str, inputs: Tensor):
    if mode == "ce_plain":
        return model.forward_plain(inputs), None
    logits, att = model.forward_cam(inputs)
    return logits, att


def evaluate(
    model: Model,
    ds: data.LabeledDataset,
    mode: str = "cc",
    batch_size: int = 64,
    dtype=np.float32,
    attention_stats: bool = True,
) -> EvalStats:
    """Top-1 accuracy plus per-pair attention-distance means over the split.

    Distance statistics use the direct-definition kernel in float64, per
    batch, with a fixed deterministic shuffle so batches mix classes.
    """
    correct = 0
    intra_sum = inter_sum = 0.0
    intra_pairs = inter_pairs = 0
    with no_grad():
        for batch in data.batches(ds, batch_size, seed=0, epoch=0, shuffle=True, dtype=dtype):
            logits, att = _forward(model, mode, batch.inputs)
            if mode == "ce_plain" and attention_stats:
                att = model.attention(batch.inputs)
            correct += int(np.sum(np.argmax(logits.data, axis=1) == batch.labels))
            if attention_stats and att is not None and len(batch) >= 2:
                dist = pairwise_sq_dist_naive(att.data.astype(np.float64))
                a, b, na, nb = pair_stats(dist, batch.labels)
                intra_sum += a
                inter_sum += b
                intra_pairs += na
                inter_pairs += nb
    mean_intra = intra_sum / intra_pairs if intra_pairs else None
    mean_inter = inter_sum / inter_pairs if inter_pairs else None
    ratio = (
        mean_intra / mean_inter
        if mean_intra is not None and mean_inter not in (None, 0.0)
        else None
    )
    return EvalStats(correct / len(ds), mean_intra, mean_inter, ratio, len(ds))


def _batch_loss(model: Model, config: TrainConfig, batch: data.LabeledBatch) -> tuple:
    mode = config.loss_mode
    if mode == "ce_plain":
        logits = model.forward_plain(batch.inputs)
        ce = softmax_ce(logits, batch.labels)
        return logits, LossBreakdown(total=ce, ce=ce, intra=None, inter=None, ratio=None)
    logits, att = model.forward_cam(batch.inputs)
    if mode == "ce_cam" or len(batch) < 2:
        # pairwise terms are undefined (or disabled); CE still applies
        ce = softmax_ce(logits, batch.labels)
        return logits, LossBreakdown(total=ce, ce=ce, intra=None, inter=None, ratio=None)
    return logits, cc_loss(logits, att, batch.labels, lam=config.lam, eps=config.eps)


def train(
    config: TrainConfig,
    train_ds: Optional[data.LabeledDataset] = None,
    test_ds: Optional[data.LabeledDataset] = None,
    log_fn=None,
) -> TrainResult:
    """Run the configured training loop; deterministic given the config.

    Datasets not passed in are loaded per the config. Returns the model at
    its best-test-accuracy state (final state when no test set is given),
    with both states and the per-epoch log attached.
    """
    config = config.resolved()
    config.validate()
    if train_ds is None:
        train_ds, test_ds = load_datasets(config)
    dtype = config.np_dtype
    model = build_model(config, train_ds)
    opt = SGD(model.params(), config.momentum, config.weight_decay)
    steps_per_epoch = math.ceil(len(train_ds) / config.batch_size)
    total_steps = config.epochs * steps_per_epoch
    log = MetricsLog()

    def eval_now():
        if test_ds is None:
            return None
        return evaluate(model, test_ds, config.loss_mode, config.eval_batch_size, dtype)

    ev = eval_now()
    log.append(
        EpochRecord(
            epoch=0,
            lr=cosine_lr(0, total_steps, config.lr_init, config.lr_final),
            loss_total=None, loss_ce=None, loss_intra=None, loss_inter=None, loss_ratio=None,
            train_acc=None,
            test_acc=ev.accuracy if ev else None,
            eval_mean_intra=ev.mean_intra if ev else None,
            eval_mean_inter=ev.mean_inter if ev else None,
            eval_ratio=ev.ratio if ev else None,
            param_digest=param_digest(model),
        )
    )
    best_state = model.state_dict()
    best_acc = ev.accuracy if ev else None
    best_epoch = 0

    step = 0
    for epoch in range(1, config.epochs + 1):
        sums = {"total": 0.0, "ce": 0.0, "intra": 0.0, "inter": 0.0, "ratio": 0.0}
        counts = {k: 0 for k in sums}
        correct = 0
        for batch_index, batch in enumerate(
            data.batches(
                train_ds, config.batch_size, config.seed, epoch - 1,
                shuffle=True, flip=config.flip, crop=config.crop, dtype=dtype,
            )
        ):
            lr = cosine_lr(step, total_steps, config.lr_init, config.lr_final)
            step += 1
            try:
                logits, breakdown = _batch_loss(model, config, batch)
                opt.zero_grad()
                backward(breakdown.total)
                opt.step(lr)
            except NumericError as exc:
                raise TrainingAborted(epoch, batch_index, str(exc)) from exc
            correct += int(np.sum(np.argmax(logits.data, axis=1) == batch.labels))
            for key in sums:
                term = getattr(breakdown, key)
                if term is not None:
                    sums[key] += term.item()
                    counts[key] += 1
        ev = eval_now()
        record = EpochRecord(
            epoch=epoch,
            lr=cosine_lr(min(step, total_steps), total_steps, config.lr_init, config.lr_final),
            loss_total=sums["total"] / counts["total"] if counts["total"] else None,
            loss_ce=sums["ce"] / counts["ce"] if counts["ce"] else None,
            loss_intra=sums["intra"] / counts["intra"] if counts["intra"] else None,
            loss_inter=sums["inter"] / counts["inter"] if counts["inter"] else None,
            loss_ratio=sums["ratio"] / counts["ratio"] if counts["ratio"] else None,
            train_acc=correct / len(train_ds),
            test_acc=ev.accuracy if ev else None,
            eval_mean_intra=ev.mean_intra if ev else None,
            eval_mean_inter=ev.mean_inter if ev else None,
            eval_ratio=ev.ratio if ev else None,
            param_digest=param_digest(model),
        )
        log.append(record)
        if log_fn is not None:
            log_fn(record)
        if ev is not None and (best_acc is None or ev.accuracy > best_acc):
            best_acc = ev.accuracy
            best_epoch = epoch
            best_state = model.state_dict()

    final_state = model.state_dict()
    final_acc = log.records[-1].test_acc
    if test_ds is None:
        best_state = final_state
        best_epoch = config.epochs
        best_acc = None
    model.load_state(best_state)
    return TrainResult(model, log, best_epoch, best_state, final_state, best_acc, final_acc)


def export_embeddings(model: Model, ds: data.LabeledDataset, out_path, mode: str = "cc") -> int:
    """Write index,label,x,y rows of the 2-D post-gating hidden features."""
    if model.hidden_dim != 2:
        raise ConfigError(f"embedding export needs hidden dim 2, model has {model.hidden_dim}")
    written = 0
    with open(out_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["index", "label", "x", "y"])
        with no_grad():
            index = 0
            for batch in data.batches(ds, 256, seed=0, epoch=0, shuffle=False):
                if mode == "ce_plain":
                    hidden = model.hidden_plain(batch.inputs)
                else:
                    hidden, _ = model.hidden_gated(batch.inputs)
                for row, label in zip(hidden.data, batch.labels):
                    writer.writerow([index, int(label), repr(float(row[0])), repr(float(row[1]))])
                    index += 1
                    written += 1
    return written


class DegenerateSampleError(ValueError):
    """The t-test needs >= 2 samples with nonzero variance."""


@dataclass
class TTestResult:
    t: float
    p: float
    dof: int


def one_sample_ttest(samples, mu0: float) -> TTestResult:
    """Two-sided one-sample t-test of `samples` against reference mean `mu0`."""
    arr = np.asarray(samples, dtype=np.float64)
    if arr.ndim != 1 or arr.size < 2:
        raise DegenerateSampleError("need at least 2 samples")
    s = arr.std(ddof=1)
    if s == 0:
        raise DegenerateSampleError("zero sample variance")
    n = arr.size
    t = (arr.mean() - mu0) / (s / math.sqrt(n))
    p = 2.0 * float(scipy_stats.t.sf(abs(t), df=n - 1))
    return TTestResult(float(t), p, n - 1)


@dataclass
class RunSummary:
    """Mean accuracy over repeated runs with its worst-case deviation."""

    accuracies: tuple
    mean: float
    margin: float

    @classmethod
    def from_accuracies(cls, accuracies) -> "RunSummary":
        accs = tuple(float(a) for a in accuracies)
        if len(accs) < 2:
            raise ValueError("need at least 2 runs to summarize")
        mean = sum(accs) / len(accs)
        margin = max(abs(a - mean) for a in accs)
        return cls(accs, mean, margin)
