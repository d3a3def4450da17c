"""Self-training loop around the NP head, the MC-dropout baseline, and checkpoints."""
from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ConfigError, FormatError, NumericError
from .head import (AGGREGATORS, IGNORE_INDEX, CenterSnapshot, HeadConfig, PredictionBundle,
                   bank_insert)
from .losses import KL_WEIGHT, LossBreakdown, cross_entropy, kl_gaussian, total_loss
from .model import DropoutSegModel, ModelConfig, NPSegModel
from .ops import softmax
from .rng import Rng
from .segmodel import EncoderConfig
from .synthdata import Dataset, Sample, augment, stack_samples
from .tensor import Parameter, Tensor, no_grad

HEAD_KINDS = ("np", "mc_dropout")
VIEWS = ("weak", "strong")


@dataclass(frozen=True)
class TrainConfig:
    seed: int = 0
    epochs: int = 10
    batch_labeled: int = 4
    batch_unlabeled: int = 4
    learning_rate: float = 0.01
    momentum: float = 0.9
    kl_weight: float = KL_WEIGHT
    n_samples: int = 5                      # T
    bank_capacity: int = 2560               # Q
    latent_dim: int = 8                     # D_t
    context_dim: int = 8                    # D_c
    reduced_dim: int = 8                    # R
    feature_channels: int = 32              # D
    encoder_depth: int = 3
    decoder_hidden: int = 64
    latent_hidden: int = 32
    n_class: int = 4
    pseudo_label_threshold: float | None = None
    aggregator: str = "attention"
    head: str = "np"
    dropout: float = 0.5
    unlabeled_view: str = "strong"
    use_unlabeled: bool = True
    eval_every: int = 1

    def __post_init__(self):
        ints = ("epochs", "batch_labeled", "batch_unlabeled", "n_samples", "bank_capacity",
                "latent_dim", "context_dim", "reduced_dim", "feature_channels", "encoder_depth",
                "decoder_hidden", "latent_hidden", "n_class")
        for name in ints:
            value = getattr(self, name)
            low = 0 if name == "epochs" else 1
            if not isinstance(value, (int, np.integer)) or value < low:
                raise ConfigError(f"{name} must be an integer >= {low}, got {value!r}")
        if self.seed < 0:
            raise ConfigError(f"seed must be non-negative, got {self.seed}")
        if self.learning_rate < 0 or not 0 <= self.momentum < 1 or self.kl_weight < 0:
            raise ConfigError("learning_rate and kl_weight must be >= 0 and momentum in [0, 1)")
        t = self.pseudo_label_threshold
        if t is not None and not 0 < t <= 1:
            raise ConfigError(f"pseudo_label_threshold must lie in (0, 1], got {t}")
        if self.aggregator not in AGGREGATORS:
            raise ConfigError(f"aggregator must be one of {AGGREGATORS}, got {self.aggregator!r}")
        if self.head not in HEAD_KINDS:
            raise ConfigError(f"head must be one of {HEAD_KINDS}, got {self.head!r}")
        if self.unlabeled_view not in VIEWS:
            raise ConfigError(f"unlabeled_view must be one of {VIEWS}, got {self.unlabeled_view!r}")
        if not 0 <= self.dropout < 1:
            raise ConfigError(f"dropout must lie in [0, 1), got {self.dropout}")
        if self.eval_every < 0:
            raise ConfigError("eval_every must be >= 0")

    def model_config(self) -> ModelConfig:
        enc = EncoderConfig(feature_channels=self.feature_channels, depth=self.encoder_depth)
        head = HeadConfig(feature_channels=self.feature_channels, reduced_dim=self.reduced_dim,
                          latent_dim=self.latent_dim, context_dim=self.context_dim,
                          latent_hidden=self.latent_hidden, decoder_hidden=self.decoder_hidden,
                          n_class=self.n_class, bank_capacity=self.bank_capacity,
                          n_samples=self.n_samples, aggregator=self.aggregator)
        return ModelConfig(enc, head)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown training config keys: {sorted(unknown)}")
        return cls(**d)


def build_model(cfg: TrainConfig):
    if cfg.head == "np":
        return NPSegModel(cfg.model_config(), cfg.seed)
    mc = cfg.model_config()
    return DropoutSegModel(mc.encoder, cfg.decoder_hidden, cfg.n_class, cfg.dropout, cfg.seed)


# optimizer -----------------------------------------------------------------

class SGD:
    """Heavy-ball SGD: ``v = momentum * v + g``; ``p -= lr * v``."""

    def __init__(self, params: Sequence[Parameter], lr: float, momentum: float = 0.9):
        self.params = list(params)
        self.lr = lr
        self.momentum = momentum
        self.buffers = [np.zeros_like(p.data) for p in self.params]
        self.steps = 0

    def step(self) -> None:
        for p, buf in zip(self.params, self.buffers):
            buf *= self.momentum
            buf += p.grad
            p.data -= (self.lr * buf).astype(p.data.dtype)
        self.steps += 1

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()


# pseudo-labels and MC dropout ----------------------------------------------

def pseudo_label_from_probs(avg_probs: np.ndarray, threshold: float | None = None,
                            ignore_index: int = IGNORE_INDEX) -> np.ndarray:
    """Argmax over classes (first index wins ties); sub-threshold pixels are ignored."""
    labels = np.argmax(avg_probs, axis=0).astype(np.int64)
    if threshold is not None:
        labels[avg_probs.max(axis=0) < threshold] = ignore_index
    return labels


def pseudo_label(model, images: Sequence[np.ndarray], rng: Rng, threshold: float | None = None,
                 T: int | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Inference-mode labels and entropy maps for a batch of (3, H, W) images.

    An NP model with no populated centers yet falls back to the cold-start
    forward (zero latent and context inputs).
    """
    labels, unc = [], []
    for i, img in enumerate(images):
        r = rng.child(f"pl/{i}")
        if isinstance(model, NPSegModel):
            bundle = model.predict(img, r, T, allow_cold_start=True)
        else:
            bundle = mc_dropout_predict(model, img, T or 1, r)
        labels.append(pseudo_label_from_probs(bundle.avg_probs, threshold))
        unc.append(bundle.uncertainty)
    return np.stack(labels), np.stack(unc)


def mc_dropout_predict(model: DropoutSegModel, image, T: int, rng: Rng) -> PredictionBundle:
    """Encoder once, then ``T`` decoder passes with dropout active."""
    if T < 1:
        raise ValueError("T must be >= 1")
    with no_grad():
        feats = model.encode(_tensor(image))
        per = [softmax(model.decoder(feats, rng.child(f"pass/{t}")), axis=0).data for t in range(T)]
    return PredictionBundle.from_samples(np.stack(per))


class MCDropoutPredictor:
    """Adapter giving a dropout model the ``predict(image, rng, T)`` interface."""

    def __init__(self, model: DropoutSegModel, T: int):
        self.model = model
        self.T = T
        self.n_class = model.n_class

    @property
    def decoder(self):
        return self.model.decoder

    def predict(self, image, rng: Rng | None, T: int | None = None) -> PredictionBundle:
        return mc_dropout_predict(self.model, image, T or self.T, rng if rng is not None else Rng(0))


# one step ------------------------------------------------------------------

@dataclass
class Batch:
    images: np.ndarray          # (N, 3, H, W)
    labels: np.ndarray          # (N, H, W)


def _feature_labels(labels: np.ndarray, factor: int) -> np.ndarray:
    """Labels at feature resolution (nearest, centre of each cell)."""
    if factor == 1:
        return labels
    o = factor // 2
    return labels[..., o::factor, o::factor]


def train_step(model, labeled: Batch, unlabeled: Batch | None, opt: SGD, rng: Rng,
               cfg: TrainConfig, unlabeled_train_images: np.ndarray | None = None) -> LossBreakdown:
    """One self-training step; mutates banks, centers, parameters and ``opt``.

    ``unlabeled.images`` is the view used for pseudo-labelling and
    ``unlabeled_train_images`` (default: the same) the view trained on.
    ``unlabeled.labels`` is ignored; pseudo-labels replace it.
    """
    n_l = len(labeled.images)
    if n_l == 0:
        raise ValueError("labeled batch is empty")
    images, labels = labeled.images, labeled.labels
    if unlabeled is not None and len(unlabeled.images):
        pl, _ = pseudo_label(model, unlabeled.images, rng.child("pseudo"), cfg.pseudo_label_threshold)
        train_view = unlabeled.images if unlabeled_train_images is None else unlabeled_train_images
        images = np.concatenate([images, train_view])
        labels = np.concatenate([labels, pl])
    if isinstance(model, NPSegModel):
        return _np_step(model, images, labels, n_l, opt, rng, cfg)
    return _mc_step(model, images, labels, opt, rng)


def _np_step(model: NPSegModel, images, labels, n_l, opt, rng, cfg) -> LossBreakdown:
    head = model.head
    feats = model.encode(Tensor(images))
    reduced = head.reduce(feats)
    flabels = _feature_labels(labels, model.cfg.encoder.downsample_factor)
    # banks hold detached copies: context gets labeled pixels, target gets everything
    red = reduced.data
    for i in range(len(images)):
        if i < n_l:
            bank_insert(head.context_banks, red[i], flabels[i])
        bank_insert(head.target_banks, red[i], flabels[i])
    head.refresh_centers()

    ces, counts, kls = [], [], []
    for i in range(len(images)):
        n_valid = int(np.sum(flabels[i] != IGNORE_INDEX))
        if n_valid == 0:
            continue
        out = head.forward(feats[i], rng.child(f"target/{i}"), cfg.n_samples, reduced=reduced[i],
                           allow_cold_start=True)
        ces.append(cross_entropy(out.probs, flabels[i]))
        counts.append(n_valid)
        if out.target_dist is not None and out.context_dist is not None:
            kls.append(kl_gaussian(out.target_dist, out.context_dist))
    return _finish(model, ces, counts, kls, cfg.kl_weight, opt)


def _mc_step(model: DropoutSegModel, images, labels, opt, rng) -> LossBreakdown:
    feats = model.encode(Tensor(images))
    probs = softmax(model.decoder(feats, rng.child("dropout")), axis=1)
    ces, counts = [], []
    for i in range(len(images)):
        n_valid = int(np.sum(labels[i] != IGNORE_INDEX))
        if n_valid:
            ces.append(cross_entropy(probs[i], labels[i]))
            counts.append(n_valid)
    return _finish(model, ces, counts, [], 0.0, opt)


def _finish(model, ces, counts, kls, kl_weight, opt) -> LossBreakdown:
    if not ces:
        raise NumericError("no labelled or pseudo-labelled pixel in the batch")
    total = float(sum(counts))
    l_c = ces[0] * (counts[0] / total)
    for ce, n in zip(ces[1:], counts[1:]):
        l_c = l_c + ce * (n / total)
    out = total_loss(l_c, kls, kl_weight, int(total))
    model.zero_grad()
    out.objective.backward()
    for p in model.parameters():
        if not np.all(np.isfinite(p.grad)):
            raise NumericError(f"non-finite gradient in {p.name} (loss {out.total})")
    opt.step()
    opt.zero_grad()
    return out


# fit -----------------------------------------------------------------------

@dataclass
class EpochLog:
    epoch: int
    step: int
    l_c: float
    l_kl: float
    total: float
    val_miou: float | None


@dataclass
class FitResult:
    model: object
    log: list[EpochLog]
    optimizer: SGD


def _views(samples: Sequence[Sample], view: str, rng: Rng) -> Batch:
    out = [augment(s, view, rng.child(str(i))) for i, s in enumerate(samples)]
    images, labels = stack_samples(out)
    return Batch(images, labels)


def fit(cfg: TrainConfig, dataset: Dataset, out_dir=None, model=None, start_epoch: int = 0,
        verbose: bool = False) -> FitResult:
    """Train for ``cfg.epochs`` epochs; ``model``/``start_epoch`` resume a run.

    Each epoch visits the labeled split once in seeded random order;
    every step also draws a fresh seeded unlabeled batch.  All randomness is
    keyed by (seed, epoch, step), so a resumed run replays the same batches.
    """
    from .evalkit import evaluate

    labeled = dataset.split("labeled")
    unlabeled = dataset.split("unlabeled") if cfg.use_unlabeled else []
    val = dataset.split("val")
    if not labeled:
        raise ConfigError("dataset has no labeled images")
    if dataset.n_class != cfg.n_class:
        raise ConfigError(f"dataset has {dataset.n_class} classes, config says {cfg.n_class}")
    model = model if model is not None else build_model(cfg)
    opt = SGD(model.parameters(), cfg.learning_rate, cfg.momentum)
    root = Rng(cfg.seed).child("fit")
    steps_per_epoch = math.ceil(len(labeled) / cfg.batch_labeled)
    opt.steps = start_epoch * steps_per_epoch
    log: list[EpochLog] = []
    for epoch in range(start_epoch, start_epoch + cfg.epochs):
        erng = root.child(f"epoch/{epoch}")
        order = erng.child("order").permutation(len(labeled))
        sums = np.zeros(3)
        for j in range(steps_per_epoch):
            srng = erng.child(f"step/{j}")
            idx = order[j * cfg.batch_labeled:(j + 1) * cfg.batch_labeled]
            lab = _views([labeled[i] for i in idx], "weak", srng.child("labeled"))
            unl = train_view = None
            if unlabeled:
                pick = srng.child("unlabeled").permutation(len(unlabeled))[:cfg.batch_unlabeled]
                chosen = [unlabeled[i] for i in pick]
                # both views share the flip so pseudo-labels stay aligned
                unl = _views(chosen, "weak", srng.child("unl_view"))
                if cfg.unlabeled_view == "strong":
                    train_view = _views(chosen, "strong", srng.child("unl_view")).images
            out = train_step(model, lab, unl, opt, srng.child("train"), cfg, train_view)
            sums += (out.l_c, out.l_kl, out.total)
        miou_val = None
        last = epoch == start_epoch + cfg.epochs - 1
        if val and cfg.eval_every and ((epoch + 1) % cfg.eval_every == 0 or last):
            model_eval = model if cfg.head == "np" else MCDropoutPredictor(model, cfg.n_samples)
            miou_val = evaluate(model_eval, val, "crop", T=cfg.n_samples, seed=cfg.seed).miou
        entry = EpochLog(epoch, opt.steps, *(sums / steps_per_epoch), miou_val)
        log.append(entry)
        if verbose:
            print(f"epoch {epoch}: l_c={entry.l_c:.4f} l_kl={entry.l_kl:.4f} val_miou={miou_val}")
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        save_checkpoint(out / "model.npck", model, cfg, opt.steps)
        if isinstance(model, NPSegModel):
            model.head.export_centers().save(out / "centers.npss")
        write_train_log(out / "train_log.csv", log, append=start_epoch > 0)
    return FitResult(model, log, opt)


def write_train_log(path, log: Sequence[EpochLog], append: bool = False) -> None:
    from .evalkit import write_csv

    rows = [{"epoch": e.epoch, "step": e.step, "l_c": e.l_c, "l_kl": e.l_kl, "total": e.total,
             "val_miou": "" if e.val_miou is None else e.val_miou} for e in log]
    write_csv(path, "trainlog", rows, append=append)


# checkpoints ---------------------------------------------------------------

CHECKPOINT_MAGIC = b"NPCK"
CHECKPOINT_VERSION = 1
_CK_HEADER = struct.Struct("<4sHQI")     # magic, version, optimizer steps, config length


def checkpoint_bytes(model, cfg: TrainConfig, steps: int = 0) -> bytes:
    """Header, JSON config echo, f32 LE parameters, then the center snapshot (NP only)."""
    echo = json.dumps(cfg.to_dict(), sort_keys=True).encode("utf-8")
    parts = [_CK_HEADER.pack(CHECKPOINT_MAGIC, CHECKPOINT_VERSION, steps, len(echo)), echo]
    for p in model.parameters():
        parts.append(p.data.astype("<f4").tobytes())
    if isinstance(model, NPSegModel):
        parts.append(model.head.export_centers().to_bytes())
    return b"".join(parts)


def save_checkpoint(path, model, cfg: TrainConfig, steps: int = 0) -> None:
    Path(path).write_bytes(checkpoint_bytes(model, cfg, steps))


def checkpoint_from_bytes(buf: bytes):
    """Rebuild ``(model, config, steps)``; momentum buffers are not stored."""
    if len(buf) < _CK_HEADER.size:
        raise FormatError("truncated checkpoint header")
    magic, version, steps, n_echo = _CK_HEADER.unpack_from(buf, 0)
    if magic != CHECKPOINT_MAGIC:
        raise FormatError(f"bad checkpoint magic {magic!r}")
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    pos = _CK_HEADER.size
    try:
        cfg = TrainConfig.from_dict(json.loads(buf[pos:pos + n_echo].decode("utf-8")))
    except (ValueError, TypeError) as exc:
        raise FormatError(f"unreadable config echo: {exc}") from exc
    pos += n_echo
    model = build_model(cfg)
    for p in model.parameters():
        n = p.data.size
        if len(buf) - pos < 4 * n:
            raise FormatError(f"checkpoint truncated inside {p.name}")
        p.data = np.frombuffer(buf, "<f4", n, pos).reshape(p.data.shape).astype(np.float32)
        pos += 4 * n
    if isinstance(model, NPSegModel):
        snap, pos = CenterSnapshot.from_bytes(buf, pos)
        model.head.import_centers(snap)
    if pos != len(buf):
        raise FormatError(f"{len(buf) - pos} trailing bytes after checkpoint")
    return model, cfg, steps


def load_checkpoint(path):
    return checkpoint_from_bytes(Path(path).read_bytes())


def _tensor(image) -> Tensor:
    return image if isinstance(image, Tensor) else Tensor(np.asarray(image, dtype=np.float32))
