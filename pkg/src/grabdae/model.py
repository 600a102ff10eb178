"""Student/teacher networks: extractor g, classifier C, conditional discriminator D, DAE."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import nn
from .dae import CorruptionSpec, DaeParams, corruption_noise, decode, encode, reconstruction_loss
from .nn import Tensor

SOURCE_DOMAIN = 1
TARGET_DOMAIN = 0
INPUT_STD_FLOOR = 0.05


@dataclass
class ModelConfig:
    image_side: int = 32
    channels: int = 3
    conv1: int = 16
    conv2: int = 32
    feature_dim: int = 128
    num_classes: int = 3
    disc_hidden: int = 64
    dropout: float = 0.5
    dae_hidden: int | None = None  # defaults to feature_dim // 2
    standardize_input: bool = True
    corruption: CorruptionSpec = field(default_factory=CorruptionSpec)

    def __post_init__(self):
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")
        if self.image_side % 4:
            raise ValueError("image_side must be divisible by 4 (two 2x2 pools)")


EXTRACTOR_KEYS = ("g.conv1.k", "g.conv1.b", "g.conv2.k", "g.conv2.b", "g.fc.W", "g.fc.b")
CLASSIFIER_KEYS = ("C.W", "C.b")
DISCRIMINATOR_KEYS = ("D.W1", "D.b1", "D.W2", "D.b2")


def _init_params(cfg: ModelConfig, rng: np.random.Generator) -> dict[str, Tensor]:
    c, f1, f2, d, K = cfg.channels, cfg.conv1, cfg.conv2, cfg.feature_dim, cfg.num_classes
    flat = f2 * (cfg.image_side // 4) ** 2
    ku = nn.kaiming_uniform
    shapes = {
        "g.conv1.k": (ku((f1, c, 3, 3), c * 9, rng)),
        "g.conv1.b": np.zeros(f1),
        "g.conv2.k": ku((f2, f1, 3, 3), f1 * 9, rng),
        "g.conv2.b": np.zeros(f2),
        "g.fc.W": ku((flat, d), flat, rng) / np.sqrt(2.0),
        "g.fc.b": np.zeros(d),
        "C.W": rng.uniform(-1, 1, (d, K)) / np.sqrt(d),
        "C.b": np.zeros(K),
        "D.W1": ku((d * K, cfg.disc_hidden), d * K, rng),
        "D.b1": np.zeros(cfg.disc_hidden),
        "D.W2": rng.uniform(-1, 1, (cfg.disc_hidden, 2)) / np.sqrt(cfg.disc_hidden),
        "D.b2": np.zeros(2),
    }
    return {k: nn.parameter(v, k) for k, v in shapes.items()}


class StudentModel:
    """Extractor, classifier, discriminator and DAE trained by gradient descent."""

    def __init__(self, cfg: ModelConfig, seed: int = 0):
        self.cfg = cfg
        rng = np.random.default_rng(seed)
        self.params = _init_params(cfg, rng)
        self.dae = DaeParams.init(cfg.feature_dim, cfg.dae_hidden, rng)
        self.params.update(self.dae.tensors())

    def named_parameters(self) -> dict[str, Tensor]:
        return self.params

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def extract_features(self, images) -> Tensor:
        return extract_features(self.params, images, self.cfg)

    def classify(self, features: Tensor, training: bool, rng=None) -> Tensor:
        return classify(self.params, features, self.cfg.dropout, training, rng)


class TeacherModel:
    """EMA copy of the student's extractor and classifier. Never receives gradients."""

    def __init__(self, student: StudentModel):
        self.cfg = student.cfg
        self.params = {
            k: Tensor(student.params[k].data.copy(), requires_grad=False, name=f"teacher.{k}")
            for k in EXTRACTOR_KEYS + CLASSIFIER_KEYS
        }

    def named_parameters(self) -> dict[str, Tensor]:
        return self.params

    def logits(self, images) -> np.ndarray:
        feats = extract_features(self.params, images, self.cfg)
        return classify(self.params, feats, 0.0, False, None).data


def _images_tensor(images, cfg: ModelConfig) -> Tensor:
    x = images if isinstance(images, Tensor) else Tensor(np.asarray(images, dtype=np.float32))
    if x.data.ndim == 4 and x.shape[-1] == cfg.channels and x.shape[1] != cfg.channels:
        x = Tensor(np.ascontiguousarray(x.data.transpose(0, 3, 1, 2)))  # NHWC -> NCHW
    expect = (cfg.channels, cfg.image_side, cfg.image_side)
    if x.data.ndim != 4 or x.shape[1:] != expect:
        raise nn.DimensionError(f"images must be [N, {expect}] (NCHW or NHWC), got {x.shape}")
    if cfg.standardize_input:
        x = Tensor(standardize_images(x.data))
    return x


def standardize_images(x: np.ndarray) -> np.ndarray:
    """Per-image zero mean / unit scale over all channels and pixels."""
    x64 = x.astype(np.float64)
    mean = x64.mean(axis=(1, 2, 3), keepdims=True)
    std = x64.std(axis=(1, 2, 3), keepdims=True)
    return ((x64 - mean) / (std + INPUT_STD_FLOOR)).astype(x.dtype)


def extract_features(params: dict[str, Tensor], images, cfg: ModelConfig) -> Tensor:
    """(standardize) conv-ReLU-pool twice, flatten, linear -> [N, feature_dim]. No randomness."""
    x = _images_tensor(images, cfg)
    h = nn.mean_pool2d(nn.relu(nn.conv2d(x, params["g.conv1.k"], params["g.conv1.b"], 1, 1)))
    h = nn.mean_pool2d(nn.relu(nn.conv2d(h, params["g.conv2.k"], params["g.conv2.b"], 1, 1)))
    return nn.linear(nn.flatten(h), params["g.fc.W"], params["g.fc.b"])


def classify(params: dict[str, Tensor], features: Tensor, p: float, training: bool, rng) -> Tensor:
    if features.data.ndim != 2 or features.shape[1] != params["C.W"].shape[0]:
        raise nn.DimensionError(f"features {features.shape} do not match classifier {params['C.W'].shape}")
    return nn.linear(nn.dropout(features, p, training, rng), params["C.W"], params["C.b"])


def condition_features(features: Tensor, class_probs: Tensor) -> Tensor:
    """Multilinear CDAN conditioning: row-wise outer product, class-major blocks."""
    return nn.outer_rows(features, class_probs)


def discriminate(params: dict[str, Tensor], conditioned: Tensor, grl_lambda: float) -> Tensor:
    """Domain logits [N, 2] behind a gradient-reversal layer (column 1 = source)."""
    if conditioned.data.ndim != 2 or conditioned.shape[1] != params["D.W1"].shape[0]:
        raise nn.DimensionError(f"conditioned input {conditioned.shape} does not match D {params['D.W1'].shape}")
    h = nn.gradient_reversal(conditioned, grl_lambda)
    h = nn.relu(nn.linear(h, params["D.W1"], params["D.b1"]))
    return nn.linear(h, params["D.W2"], params["D.b2"])


@dataclass
class StudentOutput:
    features: Tensor
    recon_features: Tensor
    logits_orig: Tensor
    logits_recon: Tensor
    L_re: Tensor


def student_forward(model: StudentModel, images, training: bool, rng: np.random.Generator | None,
                    corruption: CorruptionSpec | None = None) -> StudentOutput:
    """Features, DAE reconstruction and classifier logits for both feature sets.

    Corruption noise is scaled by the per-dimension batch standard deviation
    of the (detached) features so ``noise_sigma`` is in standardized units.
    It is only applied in training mode.
    """
    cfg = model.cfg
    spec = corruption or cfg.corruption
    feats = model.extract_features(images)
    if training:
        if rng is None:
            raise ValueError("training-mode forward needs an rng")
        scale = feats.data.std(axis=0, dtype=np.float64) if feats.shape[0] > 1 else 1.0
        noise = corruption_noise(feats.shape, spec, rng, scale).astype(feats.data.dtype)
        noisy = nn.add(feats, Tensor(noise))
    else:
        noisy = feats
    recon = decode(encode(noisy, model.dae), model.dae)
    L_re = reconstruction_loss(feats.detach(), recon)
    p = cfg.dropout
    logits_orig = classify(model.params, feats, p, training, rng)
    logits_recon = classify(model.params, recon, p, training, rng)
    return StudentOutput(feats, recon, logits_orig, logits_recon, L_re)


def teacher_pseudo_labels(teacher: TeacherModel, target_images, threshold: float | None = None):
    """Argmax of teacher logits on unmasked target images (ties -> lowest index).

    With ``threshold`` set, also returns a mask of rows whose top softmax
    probability reaches it; otherwise the mask is all True.
    """
    logits = teacher.logits(target_images)
    labels = pseudo_labels_from_logits(logits)
    if threshold is None:
        return labels, np.ones(len(labels), dtype=bool)
    z = logits - logits.max(axis=1, keepdims=True)
    probs = np.exp(z) / np.exp(z).sum(axis=1, keepdims=True)
    return labels, probs.max(axis=1) >= threshold


def pseudo_labels_from_logits(logits) -> np.ndarray:
    return np.argmax(np.asarray(logits), axis=1)  # np.argmax returns the first maximum


def ema_update(teacher: TeacherModel, student: StudentModel, alpha: float) -> None:
    """teacher <- alpha*teacher + (1-alpha)*student on extractor and classifier tensors."""
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"EMA alpha must lie in [0, 1], got {alpha}")
    for k, t in teacher.params.items():
        s = student.params[k]
        if t.shape != s.shape:
            raise nn.DimensionError(f"EMA extent mismatch for {k}: {t.shape} vs {s.shape}")
        if alpha == 1.0:
            continue
        if alpha == 0.0:
            t.data[...] = s.data
            continue
        t64 = t.data.astype(np.float64)
        s64 = s.data.astype(np.float64)
        exact = alpha * t64 + (1.0 - alpha) * s64
        new = exact.astype(t.data.dtype)
        # round toward the student where storage rounding would overshoot,
        # so |t_new - s| <= alpha * |t_old - s| holds exactly
        over = np.abs(new.astype(np.float64) - s64) > alpha * np.abs(t64 - s64)
        if over.any():
            new[over] = np.nextafter(new[over], s.data[over])
        t.data[...] = new
