"""Segmentation metrics, evaluation strategies and the uncertainty timing benchmark."""
from __future__ import annotations

import csv
import math
import statistics
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .errors import CoverageError, FormatError, MetricUndefinedError, ShapeError
from .head import IGNORE_INDEX, PredictionBundle, entropy
from .rng import Rng


class ConfusionMatrix:
    """Rows are ground truth, columns are predictions; ignore-label pixels are dropped."""

    def __init__(self, n_class: int, ignore_index: int = IGNORE_INDEX):
        self.n_class = n_class
        self.ignore_index = ignore_index
        self.counts = np.zeros((n_class, n_class), dtype=np.int64)

    def add(self, pred: np.ndarray, truth: np.ndarray) -> "ConfusionMatrix":
        pred = np.asarray(pred).reshape(-1).astype(np.int64)
        truth = np.asarray(truth).reshape(-1).astype(np.int64)
        if pred.shape != truth.shape:
            raise ShapeError("prediction and truth differ in size")
        keep = truth != self.ignore_index
        idx = self.n_class * truth[keep] + pred[keep]
        self.counts += np.bincount(idx, minlength=self.n_class ** 2).reshape(self.n_class, self.n_class)
        return self

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def iou(self) -> np.ndarray:
        """Per-class IoU, NaN where the class has an empty union."""
        tp = np.diag(self.counts).astype(np.float64)
        union = self.counts.sum(axis=0) + self.counts.sum(axis=1) - tp
        with np.errstate(divide="ignore", invalid="ignore"):
            return np.where(union > 0, tp / np.where(union > 0, union, 1), np.nan)


def miou(confusion: ConfusionMatrix) -> float:
    ious = confusion.iou()
    if np.all(np.isnan(ious)):
        raise MetricUndefinedError("no class has a non-empty union")
    return float(np.nanmean(ious))


@dataclass(frozen=True)
class PavpuConfig:
    window: int = 4
    uncertainty_threshold: float = 0.4
    accuracy_fraction: float = 0.5

    def __post_init__(self):
        if self.window < 1 or self.uncertainty_threshold < 0 or not 0 < self.accuracy_fraction <= 1:
            raise ValueError(f"invalid PAvPU config {self}")


def pavpu(pred: np.ndarray, truth: np.ndarray, uncertainty: np.ndarray,
          cfg: PavpuConfig = PavpuConfig(), n_class: int | None = None,
          ignore_index: int = IGNORE_INDEX) -> float:
    """Patch accuracy vs patch uncertainty: (n_ac + n_iu) / n_patches.

    Patches are ``window x window``.  A patch is accurate when at least
    ``accuracy_fraction`` of its labelled pixels are correct and certain when
    its mean uncertainty is below the threshold.  When ``n_class`` is given,
    ``uncertainty`` is taken in nats and divided by ``ln n_class`` first.
    Edges that do not fill a whole window are padded with the ignore label;
    patches with no labelled pixel are not counted.
    """
    pred, truth = np.asarray(pred), np.asarray(truth)
    unc = np.asarray(uncertainty, dtype=np.float64)
    if n_class is not None:
        unc = unc / math.log(n_class)
    w = cfg.window
    h0, w0 = truth.shape
    ph, pw = -h0 % w, -w0 % w
    if ph or pw:
        truth = np.pad(truth.astype(np.int64), ((0, ph), (0, pw)), constant_values=ignore_index)
        pred = np.pad(pred, ((0, ph), (0, pw)))
        unc = np.pad(unc, ((0, ph), (0, pw)))
    nh, nw = truth.shape[0] // w, truth.shape[1] // w

    def blocks(a):
        return a.reshape(nh, w, nw, w).transpose(0, 2, 1, 3).reshape(nh, nw, w * w)

    valid = blocks(truth != ignore_index)
    correct = blocks(pred == truth) & valid
    n_valid = valid.sum(axis=-1)
    mean_unc = (blocks(unc) * valid).sum(axis=-1) / np.maximum(n_valid, 1)
    counted = n_valid > 0
    accurate = correct.sum(axis=-1) >= cfg.accuracy_fraction * n_valid
    certain = mean_unc < cfg.uncertainty_threshold
    n_ac = np.sum(accurate & certain & counted)
    n_iu = np.sum(~accurate & ~certain & counted)
    n = int(counted.sum())
    if n == 0:
        raise MetricUndefinedError("no patch has a labelled pixel")
    return float((n_ac + n_iu) / n)


# evaluation strategies -----------------------------------------------------

def window_starts(size: int, crop: int, stride: int) -> list[int]:
    """Window offsets along one axis; ``ceil((size - crop) / stride) + 1`` of them."""
    if crop > size:
        raise CoverageError(f"crop {crop} exceeds extent {size}")
    if stride < 1 or stride > crop:
        raise CoverageError(f"stride {stride} must lie in [1, crop={crop}] to cover every pixel")
    n = math.ceil((size - crop) / stride) + 1
    return [min(i * stride, size - crop) for i in range(n)]


def _predict_window(model, image: np.ndarray, rng: Rng | None, T: int | None) -> PredictionBundle:
    if hasattr(model, "predict"):
        return model.predict(image, rng, T)
    return model(image)


def sliding_eval(model, image: np.ndarray, crop: int, stride: int,
                 rng: Rng | None = None, T: int | None = None) -> PredictionBundle:
    """Overlapping-window inference with per-pixel probability averaging.

    ``model`` is anything with ``predict(image, rng, T)`` or a plain callable
    ``image -> PredictionBundle``.  Each window draws its own rng substream.
    """
    image = np.asarray(image, dtype=np.float32)
    _, h, w = image.shape
    rng = rng if rng is not None else Rng(0)
    ys, xs = window_starts(h, crop, stride), window_starts(w, crop, stride)
    acc_avg = acc_per = None
    cover = np.zeros((h, w), np.float64)
    for y in ys:
        for x in xs:
            b = _predict_window(model, image[:, y:y + crop, x:x + crop], rng.child(f"win/{y}/{x}"), T)
            if acc_avg is None:
                acc_avg = np.zeros((b.avg_probs.shape[0], h, w), np.float64)
                acc_per = np.zeros((b.per_sample_probs.shape[0],) + acc_avg.shape, np.float64)
            acc_avg[:, y:y + crop, x:x + crop] += b.avg_probs
            acc_per[:, :, y:y + crop, x:x + crop] += b.per_sample_probs
            cover[y:y + crop, x:x + crop] += 1
    if np.any(cover == 0):
        raise CoverageError("sliding windows left pixels uncovered")
    avg = acc_avg / cover
    avg /= avg.sum(axis=0, keepdims=True)
    per = acc_per / cover
    per /= per.sum(axis=1, keepdims=True)
    return PredictionBundle(per.astype(np.float32), avg.astype(np.float32), entropy(avg, axis=0))


def center_crop(image: np.ndarray, crop: int | None) -> tuple[np.ndarray, tuple[slice, slice]]:
    _, h, w = image.shape
    if crop is None or crop >= min(h, w):
        return image, (slice(0, h), slice(0, w))
    y, x = (h - crop) // 2, (w - crop) // 2
    win = (slice(y, y + crop), slice(x, x + crop))
    return image[:, win[0], win[1]], win


@dataclass
class EvalResult:
    miou: float
    pavpu: float
    wall_ms: float
    n_images: int


def evaluate(model, samples: Sequence, mode: str = "crop", crop: int | None = None,
             stride: int | None = None, T: int | None = None, seed: int = 0,
             pavpu_cfg: PavpuConfig = PavpuConfig()) -> EvalResult:
    """mIoU and mean per-image PAvPU over ``samples`` (objects with ``image``/``mask``)."""
    n_class = model.n_class
    cm = ConfusionMatrix(n_class)
    scores = []
    rng = Rng(seed).child("eval")
    t0 = time.perf_counter()
    for i, s in enumerate(samples):
        r = rng.child(str(i))
        if mode == "crop":
            img, win = center_crop(s.image, crop)
            # keyed like a sliding window at the same offset
            bundle = _predict_window(model, img, r.child(f"win/{win[0].start}/{win[1].start}"), T)
            truth = s.mask[win]
        elif mode == "slide":
            size = min(s.image.shape[1:])
            c = crop or size
            bundle = sliding_eval(model, s.image, c, stride or max(1, c // 2), r, T)
            truth = s.mask
        else:
            raise ValueError(f"mode must be 'crop' or 'slide', got {mode!r}")
        pred = bundle.labels
        cm.add(pred, truth)
        scores.append(pavpu(pred, truth, bundle.uncertainty, pavpu_cfg, n_class))
    wall = (time.perf_counter() - t0) * 1e3 / max(1, len(samples))
    return EvalResult(miou(cm), float(np.mean(scores)), wall, len(samples))


# timing benchmark ----------------------------------------------------------

@dataclass
class BenchmarkResult:
    T: int
    repeats: int
    wall_ms_np: float
    wall_ms_mc: float
    passes_np: int
    passes_mc: int
    windows: int
    warning: str = ""

    @property
    def ratio(self) -> float:
        return self.wall_ms_mc / self.wall_ms_np


def benchmark_uncertainty(model_np, model_mc, images: Sequence[np.ndarray], T: int, repeats: int = 3,
                          crop: int | None = None, stride: int | None = None,
                          seed: int = 0) -> BenchmarkResult:
    """Median per-image wall clock of NP vs MC-dropout uncertainty estimation.

    Both run sliding evaluation with the same geometry (a single window when
    ``crop`` is None).  Pass counts are decoder invocations read from the
    decoders' counters: NP needs one per window, MC dropout ``T`` per window.
    """
    from .trainer import MCDropoutPredictor

    if repeats < 1:
        raise ValueError("repeats must be >= 1")
    mc = MCDropoutPredictor(model_mc, T)
    _, h, w = images[0].shape
    c = crop or min(h, w)
    s = stride or c
    windows = len(window_starts(h, c, s)) * len(window_starts(w, c, s))

    # warm-up so first-call allocation does not land in either timing
    sliding_eval(model_np, images[0], c, s, Rng(seed).child("warm"), T)
    sliding_eval(mc, images[0], c, s, Rng(seed).child("warm"), T)
    # NP and MC alternate image by image so slow drift on the host hits both
    times = {"np": [], "mc": []}
    starts = {"np": model_np.decoder.calls, "mc": model_mc.decoder.calls}
    for rep in range(repeats):
        for i, img in enumerate(images):
            for label, model in (("np", model_np), ("mc", mc)):
                t0 = time.perf_counter()
                sliding_eval(model, img, c, s, Rng(seed).child(f"{label}/{rep}/{i}"), T)
                times[label].append((time.perf_counter() - t0) * 1e3)
    n_runs = repeats * len(images)
    passes_np = (model_np.decoder.calls - starts["np"]) // n_runs
    passes_mc = (model_mc.decoder.calls - starts["mc"]) // n_runs
    wall_np, wall_mc = statistics.median(times["np"]), statistics.median(times["mc"])
    warning = "single-repeat" if repeats == 1 else ""
    return BenchmarkResult(T, repeats, wall_np, wall_mc, passes_np, passes_mc, windows, warning)


# CSV -----------------------------------------------------------------------

CSV_SCHEMAS = {
    "metrics": ("1", ["run_id", "split", "miou", "pavpu", "wall_ms_np", "wall_ms_mc", "T"]),
    "benchmark": ("1", ["T", "repeats", "windows", "passes_np", "passes_mc",
                        "wall_ms_np", "wall_ms_mc", "ratio", "warning"]),
    "trainlog": ("1", ["epoch", "step", "l_c", "l_kl", "total", "val_miou"]),
}


def write_csv(path, kind: str, rows: Sequence[dict], append: bool = False) -> None:
    """Write rows under a ``#schema,<kind>,<version>`` line and a column header."""
    version, cols = CSV_SCHEMAS[kind]
    path = Path(path)
    fresh = not (append and path.exists())
    with open(path, "w" if fresh else "a", newline="") as fh:
        writer = csv.writer(fh)
        if fresh:
            writer.writerow(["#schema", kind, version])
            writer.writerow(cols)
        for row in rows:
            writer.writerow([_fmt(row.get(c, "")) for c in cols])


def read_csv(path, kind: str) -> list[dict]:
    version, cols = CSV_SCHEMAS[kind]
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            schema = next(reader)
            header = next(reader)
        except StopIteration:
            raise FormatError(f"{path}: missing schema/header rows") from None
        if schema[:2] != ["#schema", kind]:
            raise FormatError(f"{path}: not a {kind} CSV")
        if schema[2:3] != [version]:
            raise FormatError(f"{path}: unsupported {kind} schema version {schema[2:3]}")
        if header != cols:
            raise FormatError(f"{path}: unexpected columns {header}")
        return [dict(zip(cols, r)) for r in reader]


def _fmt(v) -> str:
    if isinstance(v, float):
        return repr(v)
    return str(v)
