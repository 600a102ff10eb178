"""GrabDAE optimisation loop: supervised, self-supervised and domain-adaptation losses."""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import nn
from .config import TrainConfig
from .data.checkpoint import save_checkpoint
from .data.codec import read_mask, to_uint8, write_mask
from .data.dataset import DomainDataset
from .grabmask import GrabMaskParams, apply_mask_blur, grabcut_segment
from .model import (
    SOURCE_DOMAIN,
    TARGET_DOMAIN,
    StudentModel,
    StudentOutput,
    TeacherModel,
    condition_features,
    discriminate,
    ema_update,
    extract_features,
    student_forward,
    teacher_pseudo_labels,
)
from .nn import Tensor

log = logging.getLogger(__name__)

METRICS_COLUMNS = ("epoch", "L_cls", "L_s", "L_re", "L_D", "total", "target_avg_acc")


class NonFiniteLossError(FloatingPointError):
    pass


@dataclass
class LossBreakdown:
    L_cls: float
    L_s: float
    L_re: float
    L_D: float
    total: float
    s_ramp: float = 1.0  # multiplier on lambda_s used for this step

    def weighted_sum(self, cfg: TrainConfig) -> float:
        ls = cfg.lambda_s * self.s_ramp
        return self.L_cls + ls * self.L_s + cfg.lambda_re * self.L_re + cfg.lambda_d * self.L_D


@dataclass
class EvalReport:
    class_names: list[str]
    per_class: list[float | None]  # percent; None for classes without samples
    counts: list[int]
    average: float

    def rows(self) -> list[tuple[str, int, float | None]]:
        return list(zip(self.class_names, self.counts, self.per_class))


@dataclass
class StepRngs:
    """Independent random streams so that switching one loss off leaves the others' draws alone."""

    source: np.random.Generator
    target: np.random.Generator
    masked: np.random.Generator

    @classmethod
    def from_seed(cls, seed: int) -> "StepRngs":
        a, b, c = np.random.SeedSequence(seed).spawn(3)
        return cls(np.random.default_rng(a), np.random.default_rng(b), np.random.default_rng(c))


# ---------------------------------------------------------------------------
# losses

def classification_loss(student: StudentModel, images, labels, rng, training: bool = True) -> tuple[Tensor, StudentOutput]:
    """Equal-weight mean of the cross-entropies of the original and reconstructed paths."""
    if labels is None:
        raise ValueError("classification loss needs a labelled source batch")
    out = student_forward(student, images, training, rng)
    loss = (nn.softmax_cross_entropy(out.logits_orig, labels) + nn.softmax_cross_entropy(out.logits_recon, labels)) * 0.5
    return loss, out


def self_supervised_loss(student: StudentModel, teacher: TeacherModel, target_raw, target_masked, rng,
                         threshold: float | None = None, training: bool = True) -> Tensor:
    """Cross-entropy of student predictions on masked targets against teacher argmax on raw targets."""
    if len(target_raw) != len(target_masked):
        raise ValueError(f"raw ({len(target_raw)}) and masked ({len(target_masked)}) target batches are misaligned")
    pseudo, keep = teacher_pseudo_labels(teacher, target_raw, threshold)
    if not keep.any():
        return Tensor(np.zeros((), dtype=np.float32))
    feats = student.extract_features(np.asarray(target_masked)[keep])
    logits = student.classify(feats, training, rng)
    return nn.softmax_cross_entropy(logits, pseudo[keep])


def domain_adversarial_loss(student: StudentModel, source: StudentOutput, target: StudentOutput, grl_lambda: float) -> Tensor:
    """Domain cross-entropy over {original, reconstructed} features of both domains.

    Features are conditioned on (detached) class probabilities of the same
    path; the reversal layer in front of D makes the extractor ascend this loss.
    """
    ns, nt = source.features.shape[0], target.features.shape[0]
    if ns == 0 or nt == 0:
        raise ValueError("domain adversarial loss needs non-empty source and target batches")
    parts, labels = [], []
    for out, dom in ((source, SOURCE_DOMAIN), (target, TARGET_DOMAIN)):
        for feats, logits in ((out.features, out.logits_orig), (out.recon_features, out.logits_recon)):
            probs = nn.softmax(logits).detach()
            parts.append(condition_features(feats, probs))
            labels.append(np.full(feats.shape[0], dom))
    logits = discriminate(student.params, nn.concat(parts, axis=0), grl_lambda)
    return nn.softmax_cross_entropy(logits, np.concatenate(labels))


def grl_value(cfg: TrainConfig, progress: float) -> float:
    if cfg.grl_schedule == "dann":
        return cfg.grl_lambda * (2.0 / (1.0 + math.exp(-10.0 * progress)) - 1.0)
    return cfg.grl_lambda


def ls_ramp_value(cfg: TrainConfig, progress: float) -> float:
    """Sigmoid-shaped ramp exp(-5 (1 - t)^2) on lambda_s over the first ``ls_rampup`` of training."""
    if cfg.ls_rampup <= 0.0 or progress >= cfg.ls_rampup:
        return 1.0
    t = max(progress, 0.0) / cfg.ls_rampup
    return math.exp(-5.0 * (1.0 - t) ** 2)


def _assert_teacher_off_tape(loss: Tensor, teacher: TeacherModel) -> None:
    teacher_ids = {id(t) for t in teacher.params.values()}
    if any(id(node) in teacher_ids for node in nn.tape_of(loss)):
        raise RuntimeError("teacher parameter recorded on the compute tape")


def train_step(student: StudentModel, teacher: TeacherModel, optimizer: nn.SGD,
               source_images, source_labels, target_images, target_masked,
               cfg: TrainConfig, rngs: StepRngs, grl_lambda: float | None = None,
               s_ramp: float = 1.0) -> LossBreakdown:
    """One pass of the training body: losses, one SGD step on the total, EMA update."""
    grl = cfg.grl_lambda if grl_lambda is None else grl_lambda
    L_cls, out_s = classification_loss(student, source_images, source_labels, rngs.source)
    out_t = student_forward(student, target_images, True, rngs.target)
    L_s = self_supervised_loss(student, teacher, target_images, target_masked, rngs.masked, cfg.pseudo_threshold)
    L_re = (out_s.L_re + out_t.L_re) * 0.5
    L_D = domain_adversarial_loss(student, out_s, out_t, grl)
    total = L_cls + L_s * (cfg.lambda_s * s_ramp) + L_re * cfg.lambda_re + L_D * cfg.lambda_d

    parts = {"L_cls": L_cls, "L_s": L_s, "L_re": L_re, "L_D": L_D, "total": total}
    for name, t in parts.items():
        if not np.isfinite(t.data).all():
            raise NonFiniteLossError(f"non-finite {name} = {t.item()}")
    _assert_teacher_off_tape(total, teacher)

    optimizer.zero_grad()
    nn.backward(total)
    optimizer.step()
    ema_update(teacher, student, cfg.ema_alpha)
    return LossBreakdown(**{k: t.item() for k, t in parts.items()}, s_ramp=s_ramp)


# ---------------------------------------------------------------------------
# evaluation

def predict(student: StudentModel, images, batch: int = 256) -> np.ndarray:
    out = []
    for i in range(0, len(images), batch):
        feats = student.extract_features(images[i:i + batch])
        out.append(student.classify(feats, False).data.argmax(axis=1))
    return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)


def report_from_predictions(pred, labels, class_names: list[str]) -> EvalReport:
    pred = np.asarray(pred)
    labels = np.asarray(labels)
    per_class, counts = [], []
    for k in range(len(class_names)):
        sel = labels == k
        n = int(sel.sum())
        counts.append(n)
        per_class.append(100.0 * float((pred[sel] == k).mean()) if n else None)
    present = [a for a in per_class if a is not None]
    avg = float(np.mean(present)) if present else 0.0
    return EvalReport(list(class_names), per_class, counts, avg)


def evaluate(student: StudentModel, images, labels, class_names: list[str]) -> EvalReport:
    """Dropout-off accuracy on unmasked images; the average is the unweighted class mean."""
    if labels is None:
        raise ValueError("evaluation needs a labelled dataset")
    return report_from_predictions(predict(student, images), labels, class_names)


def embed(student: StudentModel, images, batch: int = 256) -> np.ndarray:
    rows = [extract_features(student.params, images[i:i + batch], student.cfg).data for i in range(0, len(images), batch)]
    return np.concatenate(rows) if rows else np.zeros((0, student.cfg.feature_dim), dtype=np.float32)


# ---------------------------------------------------------------------------
# GrabMask precomputation

def _mask_key(img8: np.ndarray, params: GrabMaskParams, seed: int) -> str:
    h = hashlib.sha256()
    h.update(np.ascontiguousarray(img8).tobytes())
    h.update(str(img8.shape).encode())
    h.update(json.dumps(asdict(params), sort_keys=True).encode())
    h.update(str(seed).encode())
    return h.hexdigest()[:32]


def _segment_one(args) -> tuple[np.ndarray, bool]:
    img, params, seed = args
    res = grabcut_segment(img, None, params, seed)
    return res.mask, res.fallback


class MaskCache:
    """On-disk GrabMask results keyed by image content, parameters and seed.

    Only masks are stored; the blurred composite is recomputed from them,
    which is deterministic and cheap.
    """

    def __init__(self, directory):
        self.dir = Path(directory)
        self.dir.mkdir(parents=True, exist_ok=True)

    def masked_images(self, images: np.ndarray, params: GrabMaskParams, seed: int = 0,
                      threads: int = 1) -> tuple[np.ndarray, int]:
        masks: list[np.ndarray | None] = []
        todo = []
        for i, img in enumerate(images):
            path = self.dir / f"{_mask_key(to_uint8(img), params, seed)}.pgm"
            if path.exists():
                masks.append(read_mask(path))
            else:
                masks.append(None)
                todo.append(i)
        fallbacks = 0
        if todo:
            jobs = [(images[i], params, seed) for i in todo]
            if threads > 1:
                with ProcessPoolExecutor(threads) as ex:
                    results = list(ex.map(_segment_one, jobs, chunksize=8))
            else:
                results = [_segment_one(j) for j in jobs]
            for i, (mask, fb) in zip(todo, results):
                fallbacks += int(fb)
                masks[i] = mask
                write_mask(self.dir / f"{_mask_key(to_uint8(images[i]), params, seed)}.pgm", mask)
        out = np.stack([apply_mask_blur(img, m, params.blur_sigma) for img, m in zip(images, masks)])
        return out.astype(np.float32), fallbacks


# ---------------------------------------------------------------------------
# loop

class CyclingSampler:
    """Endless stream of indices, reshuffled every time the pool runs out."""

    def __init__(self, n: int, rng: np.random.Generator):
        self.n = n
        self.rng = rng
        self.buf = np.zeros(0, dtype=np.int64)

    def take(self, k: int) -> np.ndarray:
        while len(self.buf) < k:
            self.buf = np.concatenate([self.buf, self.rng.permutation(self.n)])
        out, self.buf = self.buf[:k], self.buf[k:]
        return out


@dataclass
class TrainResult:
    student: StudentModel
    teacher: TeacherModel
    history: list[dict] = field(default_factory=list)
    checkpoint: Path | None = None
    mask_fallbacks: int = 0


def _fmt(x) -> str:
    return "" if x is None else repr(float(x))


def _check_writable(run_dir: Path) -> None:
    try:
        run_dir.mkdir(parents=True, exist_ok=True)
        probe = run_dir / ".write_probe"
        probe.write_bytes(b"")
        probe.unlink()
    except OSError as exc:
        raise OSError(f"run directory {run_dir} is not writable: {exc}") from exc


def train(cfg: TrainConfig, source: DomainDataset, target: DomainDataset, run_dir,
          threads: int = 1, mask_cache_dir=None, source_images=None, target_images=None) -> TrainResult:
    """Run ``cfg.epochs`` epochs; writes metrics.csv, config.json and checkpoint.gdae to ``run_dir``.

    Target labels, when present, are only used for the per-epoch
    ``target_avg_acc`` column.
    """
    run_dir = Path(run_dir)
    _check_writable(run_dir)
    if len(source) == 0 or len(target) == 0:
        raise ValueError("source and target datasets must be non-empty")
    if not source.labeled:
        raise ValueError("source dataset must be labelled")

    xs = source.load_images() if source_images is None else source_images
    xt = target.load_images() if target_images is None else target_images
    ys = source.labels
    yt = target.labels if target.labeled and target.class_names == source.class_names else None
    side = xs.shape[1]

    gm_params = cfg.grabmask(side)
    cache = MaskCache(mask_cache_dir if mask_cache_dir is not None else run_dir / "mask_cache")
    xm, fallbacks = cache.masked_images(xt, gm_params, seed=0, threads=threads)
    if fallbacks:
        log.info("GrabMask fell back to the seed rectangle on %d/%d target images", fallbacks, len(xt))

    student = StudentModel(cfg.model_config(len(source.class_names), side), seed=cfg.seed)
    teacher = TeacherModel(student)
    opt = nn.SGD(student.parameters(), cfg.lr, cfg.momentum, cfg.weight_decay)
    rngs = StepRngs.from_seed(cfg.seed + 1)
    order_rng = np.random.default_rng([cfg.seed, 7])
    src_sampler = CyclingSampler(len(xs), order_rng)
    tgt_sampler = CyclingSampler(len(xt), order_rng)
    steps_per_epoch = math.ceil(max(len(xs), len(xt)) / cfg.batch_size)
    total_steps = max(1, cfg.epochs * steps_per_epoch)

    (run_dir / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")
    metrics_path = run_dir / "metrics.csv"
    history = []
    with metrics_path.open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(METRICS_COLUMNS)
        step = 0
        for epoch in range(1, cfg.epochs + 1):
            sums = np.zeros(5)
            for _ in range(steps_per_epoch):
                si = src_sampler.take(min(cfg.batch_size, len(xs)))
                ti = tgt_sampler.take(min(cfg.batch_size, len(xt)))
                grl = grl_value(cfg, step / total_steps)
                ramp = ls_ramp_value(cfg, step / total_steps)
                br = train_step(student, teacher, opt, xs[si], ys[si], xt[ti], xm[ti], cfg, rngs, grl, ramp)
                sums += (br.L_cls, br.L_s, br.L_re, br.L_D, br.total)
                step += 1
            means = sums / steps_per_epoch
            acc = evaluate(student, xt, yt, source.class_names).average if yt is not None else None
            row = dict(zip(METRICS_COLUMNS, [epoch, *means.tolist(), acc]))
            history.append(row)
            writer.writerow([epoch] + [_fmt(v) for v in means] + [_fmt(acc)])
            fh.flush()
            log.info("epoch %d  L_cls=%.4f L_s=%.4f L_re=%.4f L_D=%.4f total=%.4f acc=%s",
                     epoch, *means, "-" if acc is None else f"{acc:.2f}")

    ckpt = run_dir / "checkpoint.gdae"
    save_checkpoint(ckpt, student, teacher, {"epochs": cfg.epochs, "class_names": source.class_names})
    return TrainResult(student, teacher, history, ckpt, fallbacks)
