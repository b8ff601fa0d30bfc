"""Image-quality and classification metrics plus the augmentation study.

FID here is embedder-relative: the desk embedder is a small CNN trained on
real images, so only differences between FID values are meaningful.  The
"PA" figure is realized as conditional accuracy, the fraction of generated
images an oracle classifier assigns to their conditioning class.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
import torch
import torch.nn as nn
from scipy.stats import rankdata

from gau.dataset import ImageSet, to_nchw, write_png
from gau.numerics import Adam, Conv2d, LeakyReLU, init_weights

COV_RIDGE = 1e-6
SQRT_NEG_TOL = 1e-8
SYM_TOL = 1e-6


# -- matrix square root and FID -------------------------------------------------


def sqrt_spd(m: np.ndarray, sym_tol: float = SYM_TOL) -> np.ndarray:
    """Symmetric square root of a symmetric positive semi-definite matrix.

    Eigenvalues in [-1e-8, 0) are clamped to zero; anything more negative,
    or an asymmetry beyond ``sym_tol`` (relative), is rejected.
    """
    m = np.asarray(m, dtype=np.float64)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise ValueError(f"expected a square matrix, got shape {m.shape}")
    scale = max(1.0, float(np.abs(m).max(initial=0.0)))
    if np.abs(m - m.T).max(initial=0.0) > sym_tol * scale:
        raise ValueError("matrix is not symmetric")
    w, v = np.linalg.eigh((m + m.T) / 2)
    if w.size and w.min() < -SQRT_NEG_TOL * scale:
        raise ValueError(f"matrix is indefinite (eigenvalue {w.min():.3e})")
    w = np.clip(w, 0.0, None)
    return (v * np.sqrt(w)) @ v.T


@dataclass
class FeatureMoments:
    mu: np.ndarray
    sigma: np.ndarray
    n: int

    @classmethod
    def from_features(cls, features: np.ndarray, ridge: float = COV_RIDGE) -> "FeatureMoments":
        f = np.asarray(features, dtype=np.float64)
        if f.ndim != 2 or f.shape[0] < 2:
            raise ValueError(f"need at least 2 feature rows, got shape {f.shape}")
        n, d = f.shape
        sigma = np.atleast_2d(np.cov(f, rowvar=False))
        if n <= d:
            sigma = sigma + ridge * np.eye(d)
        return cls(f.mean(axis=0), (sigma + sigma.T) / 2, n)


def fid(real: FeatureMoments, fake: FeatureMoments) -> float:
    """Frechet distance between two Gaussian fits.

    The cross term uses ``Tr sqrt(S_r^1/2 S_f S_r^1/2)``, which equals
    ``Tr sqrt(S_r S_f)`` but keeps every root symmetric.
    """
    if real.mu.shape != fake.mu.shape:
        raise ValueError(f"feature dims differ: {real.mu.shape} vs {fake.mu.shape}")
    diff = real.mu - fake.mu
    root_r = sqrt_spd(real.sigma)
    cross = sqrt_spd(root_r @ fake.sigma @ root_r, sym_tol=1e-4)
    return float(diff @ diff + np.trace(real.sigma) + np.trace(fake.sigma) - 2.0 * np.trace(cross))


# -- classification metrics -----------------------------------------------------


def _auc_binary(pos_scores: np.ndarray, labels01: np.ndarray) -> float:
    """Mann-Whitney rank statistic; ties count one half."""
    n_pos = int(labels01.sum())
    n_neg = len(labels01) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUC needs both positive and negative samples")
    ranks = rankdata(pos_scores)
    return float((ranks[labels01 == 1].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))


def classification_metrics(scores: np.ndarray, labels: np.ndarray) -> dict[str, float]:
    """Accuracy, precision, recall and AUC from per-class scores.

    Two columns: precision/recall/AUC of class 1.  More: macro one-vs-rest
    averages; precision and recall over the classes seen in labels or
    predictions (0 where undefined), AUC over the classes present in labels.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if scores.ndim != 2 or scores.shape[0] != labels.shape[0]:
        raise ValueError(f"scores {scores.shape} do not match {labels.shape[0]} labels")
    k = scores.shape[1]
    if labels.size == 0:
        raise ValueError("no samples")
    if labels.min() < 0 or labels.max() >= k:
        raise ValueError(f"labels outside [0, {k})")
    present = np.unique(labels)
    if len(present) < 2:
        raise ValueError("AUC is undefined for a single-class label set")
    pred = scores.argmax(axis=1)
    acc = float(np.mean(pred == labels))

    def pr(c):
        tp = np.sum((pred == c) & (labels == c))
        n_pred, n_true = np.sum(pred == c), np.sum(labels == c)
        return (tp / n_pred if n_pred else 0.0), (tp / n_true if n_true else 0.0)

    if k == 2:
        precision, recall = pr(1)
        # rank the positive-class column alone so any monotone rescoring leaves AUC unchanged
        auc = _auc_binary(scores[:, 1], (labels == 1).astype(int))
    else:
        seen = np.union1d(present, np.unique(pred))
        prs = [pr(c) for c in seen]
        precision = float(np.mean([p for p, _ in prs]))
        recall = float(np.mean([r for _, r in prs]))
        auc = float(np.mean([_auc_binary(scores[:, c], (labels == c).astype(int)) for c in present]))
    return {"accuracy": acc, "precision": float(precision), "recall": float(recall), "auc": auc}


def bootstrap_intervals(scores: np.ndarray, labels: np.ndarray, n_boot: int = 200, seed: int = 0,
                        level: float = 0.95) -> dict[str, tuple[float, float]]:
    """Percentile bootstrap over test samples; resamples lacking two classes are skipped."""
    rng = np.random.default_rng(seed)
    n = len(labels)
    draws: dict[str, list[float]] = {"accuracy": [], "precision": [], "recall": [], "auc": []}
    for _ in range(n_boot):
        idx = rng.integers(n, size=n)
        if len(np.unique(labels[idx])) < 2:
            continue
        for key, v in classification_metrics(scores[idx], labels[idx]).items():
            draws[key].append(v)
    lo_q, hi_q = (1 - level) / 2, 1 - (1 - level) / 2
    out = {}
    for key, vals in draws.items():
        if vals:
            out[key] = (float(np.quantile(vals, lo_q)), float(np.quantile(vals, hi_q)))
        else:
            out[key] = (math.nan, math.nan)
    return out


# -- small CNN: embedder, oracle and downstream classifier ------------------------


@dataclass
class ClassifierConfig:
    num_classes: int = 2
    image_size: int = 64
    width: int = 16
    feature_dim: int = 16
    steps: int = 300
    batch_size: int = 32
    alpha: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.99
    seed: int = 0


class SmallCNN(nn.Module):
    """Four stride-2 convs, global average pooling, a feature layer and a linear head."""

    def __init__(self, config: ClassifierConfig):
        super().__init__()
        self.config = cfg = config
        w = cfg.width
        self.body = nn.Sequential(
            Conv2d(3, w, 3, stride=2), LeakyReLU(),
            Conv2d(w, 2 * w, 3, stride=2), LeakyReLU(),
            Conv2d(2 * w, 4 * w, 3, stride=2), LeakyReLU(),
            Conv2d(4 * w, 4 * w, 3, stride=2), LeakyReLU(),
        )
        self.feature = nn.Linear(4 * w, cfg.feature_dim)
        self.act = LeakyReLU()
        self.head = nn.Linear(cfg.feature_dim, cfg.num_classes)
        init_weights(self, torch.Generator().manual_seed(cfg.seed))

    def features(self, x: torch.Tensor) -> torch.Tensor:
        # centring the [0, 1] input makes training far less seed-sensitive
        return self.act(self.feature(self.body(x - 0.5).mean(dim=(2, 3))))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.head(self.features(x))

    def _check(self, images: np.ndarray) -> None:
        size = self.config.image_size
        if images.ndim != 4 or images.shape[1:] != (size, size, 3):
            raise ValueError(f"expected (N, {size}, {size}, 3) images, got {images.shape}")

    @torch.no_grad()
    def embed(self, images: np.ndarray, batch: int = 128) -> np.ndarray:
        """One feature row per (H, W, 3) image."""
        self._check(images)
        self.eval()
        rows = [self.features(torch.from_numpy(to_nchw(images[s:s + batch])).float())
                for s in range(0, len(images), batch)]
        return torch.cat(rows).double().numpy()

    @torch.no_grad()
    def predict_scores(self, images: np.ndarray, batch: int = 128) -> np.ndarray:
        self._check(images)
        self.eval()
        rows = [torch.softmax(self(torch.from_numpy(to_nchw(images[s:s + batch])).float()), dim=1)
                for s in range(0, len(images), batch)]
        return torch.cat(rows).double().numpy()

    def predict(self, images: np.ndarray) -> np.ndarray:
        return self.predict_scores(images).argmax(axis=1)


def fit_classifier(images: np.ndarray, labels: np.ndarray, config: ClassifierConfig) -> SmallCNN:
    """Train a SmallCNN with Adam on cross-entropy; minibatches drawn from ``config.seed``."""
    model = SmallCNN(config)
    model.train()
    opt = Adam(model.named_parameters(), alpha=config.alpha, beta1=config.beta1, beta2=config.beta2)
    rng = np.random.default_rng(config.seed)
    x_all = torch.from_numpy(to_nchw(np.asarray(images, dtype=np.float32)))
    y_all = torch.from_numpy(np.asarray(labels, dtype=np.int64))
    names = list(opt.params)
    for _ in range(config.steps):
        idx = torch.from_numpy(rng.integers(len(y_all), size=config.batch_size))
        loss = nn.functional.cross_entropy(model(x_all[idx]), y_all[idx])
        grads = torch.autograd.grad(loss, [opt.params[n] for n in names])
        opt.step(dict(zip(names, grads)))
    model.eval()
    return model


def train_embedder(real: ImageSet, steps: int = 300, seed: int = 0, feature_dim: int = 16) -> SmallCNN:
    """The desk FID embedder doubles as the conditional-accuracy oracle."""
    cfg = ClassifierConfig(num_classes=real.num_classes, image_size=real.image_size,
                           feature_dim=feature_dim, steps=steps, seed=seed)
    return fit_classifier(real.images, real.labels, cfg)


def embed(images: np.ndarray, embedder: SmallCNN) -> np.ndarray:
    return embedder.embed(np.asarray(images, dtype=np.float32))


def fid_between(real_images: np.ndarray, fake_images: np.ndarray, embedder: SmallCNN) -> float:
    return fid(FeatureMoments.from_features(embed(real_images, embedder)),
               FeatureMoments.from_features(embed(fake_images, embedder)))


def oracle_classes(oracle) -> int:
    """Label-set size of a SmallCNN or any oracle exposing ``num_classes``."""
    config = getattr(oracle, "config", None)
    return int(config.num_classes if config is not None else oracle.num_classes)


def conditional_accuracy(images: np.ndarray, intended: np.ndarray, oracle) -> float:
    """Fraction of images ``oracle.predict`` assigns to their intended class."""
    intended = np.asarray(intended, dtype=np.int64)
    if len(intended) == 0:
        raise ValueError("no generated images to score")
    k = oracle_classes(oracle)
    if intended.min() < 0 or intended.max() >= k:
        raise ValueError(f"intended classes outside the oracle's label set [0, {k})")
    return float(np.mean(oracle.predict(np.asarray(images, dtype=np.float32)) == intended))


def per_class_accuracy(images: np.ndarray, intended: np.ndarray, oracle) -> dict[int, float]:
    intended = np.asarray(intended, dtype=np.int64)
    pred = oracle.predict(np.asarray(images, dtype=np.float32))
    return {int(c): float(np.mean(pred[intended == c] == c)) for c in np.unique(intended)}


# -- generation -------------------------------------------------------------------


@torch.no_grad()
def generate_images(generator, conditioning: np.ndarray, class_ids: np.ndarray,
                    seed: int = 0) -> np.ndarray:
    """Eval-mode generation, one fresh latent per conditioning image; (N, H, W, 3) out."""
    generator.eval()
    dtype = generator.latent_proj.weight.dtype
    gen = torch.Generator().manual_seed(seed)
    x = torch.from_numpy(to_nchw(np.asarray(conditioning, dtype=np.float32))).to(dtype)
    z = generator.sample_latent(len(x), gen)
    labels = torch.from_numpy(np.asarray(class_ids, dtype=np.int64))
    out = generator(x, z, labels if generator.config.class_conditioning else None)
    return np.ascontiguousarray(out.float().numpy().transpose(0, 2, 3, 1))


def conditioning_draw(data: ImageSet, class_id: int, count: int, rng: np.random.Generator) -> np.ndarray:
    pool = data.class_indices(class_id)
    if len(pool) == 0:
        raise ValueError(f"class {class_id} has no images to condition on")
    return pool[rng.integers(len(pool), size=count)]


def generated_set(generator_fn: Callable[[np.ndarray, np.ndarray, int], np.ndarray], data: ImageSet,
                  n_per_class: int, seed: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Generate ``n_per_class`` images per class; returns (images, classes, conditioning idx)."""
    rng = np.random.default_rng(seed)
    imgs, classes, conds = [], [], []
    for c in range(data.num_classes):
        if n_per_class == 0:
            continue
        idx = conditioning_draw(data, c, n_per_class, rng)
        cls = np.full(n_per_class, c, dtype=np.int64)
        imgs.append(generator_fn(data.images[idx], cls, seed + 1000 * c + 1))
        classes.append(cls)
        conds.append(idx)
    if not imgs:
        size = data.image_size
        return (np.zeros((0, size, size, 3), np.float32), np.zeros(0, np.int64), np.zeros(0, np.int64))
    return np.concatenate(imgs), np.concatenate(classes), np.concatenate(conds)


def save_grid(path: str | Path, images: np.ndarray, tiles: int = 8) -> None:
    """Tile up to ``tiles x tiles`` images into one PNG (unused tiles stay black)."""
    images = np.asarray(images)[: tiles * tiles]
    if len(images) == 0:
        raise ValueError("no images for the sample grid")
    h, w = images.shape[1:3]
    grid = np.zeros((tiles * h, tiles * w, 3), dtype=np.float32)
    for k, img in enumerate(images):
        r, c = divmod(k, tiles)
        grid[r * h:(r + 1) * h, c * w:(c + 1) * w] = img
    write_png(path, grid)


# -- reports ----------------------------------------------------------------------

METRIC_KEYS = ("accuracy", "precision", "recall", "auc")


@dataclass
class MetricsReport:
    fid: float = math.nan
    conditional_accuracy: float = math.nan
    per_class: dict[int, float] = field(default_factory=dict)
    classification: dict[str, tuple[float, float, float]] = field(default_factory=dict)
    metadata: dict[str, str] = field(default_factory=dict)

    def __post_init__(self):
        rates = [self.conditional_accuracy, *self.per_class.values()]
        rates += [v for triple in self.classification.values() for v in triple]
        bad = [r for r in rates if not math.isnan(r) and not 0.0 <= r <= 1.0]
        if bad:
            raise ValueError(f"rates must lie in [0, 1], got {bad}")
        if not math.isnan(self.fid) and self.fid < -1e-6:
            raise ValueError(f"fid below the numerical floor: {self.fid}")

    def to_text(self, prefix: str = "") -> str:
        p = f"{prefix}." if prefix else ""
        lines = [f"[{p}image_quality]", f"fid = {self.fid!r}",
                 # PA is realized as oracle agreement with the conditioning class
                 f"pa_conditional_accuracy = {self.conditional_accuracy!r}", ""]
        lines.append(f"[{p}per_class_accuracy]")
        lines += [f"class_{c} = {v!r}" for c, v in sorted(self.per_class.items())]
        lines.append("")
        lines.append(f"[{p}classification]")
        lines.append("averaging = macro one-vs-rest (class 1 when binary)")
        for key in METRIC_KEYS:
            if key in self.classification:
                v, lo, hi = self.classification[key]
                lines.append(f"{key} = {v!r} {lo!r} {hi!r}")
        lines.append("")
        lines.append(f"[{p}metadata]")
        lines += [f"{k} = {v}" for k, v in sorted(self.metadata.items())]
        lines.append("")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str, prefix: str = "") -> "MetricsReport":
        sections = parse_report_sections(text)
        p = f"{prefix}." if prefix else ""
        iq = sections.get(f"{p}image_quality", {})
        classification = {}
        for key, raw in sections.get(f"{p}classification", {}).items():
            if key in METRIC_KEYS:
                v, lo, hi = (float(t) for t in raw.split())
                classification[key] = (v, lo, hi)
        return cls(
            fid=float(iq.get("fid", "nan")),
            conditional_accuracy=float(iq.get("pa_conditional_accuracy", "nan")),
            per_class={int(k.split("_", 1)[1]): float(v)
                       for k, v in sections.get(f"{p}per_class_accuracy", {}).items()},
            classification=classification,
            metadata=dict(sections.get(f"{p}metadata", {})),
        )

    def __eq__(self, other):
        if not isinstance(other, MetricsReport):
            return NotImplemented
        return self.to_text() == other.to_text()


def parse_report_sections(text: str) -> dict[str, dict[str, str]]:
    sections: dict[str, dict[str, str]] = {}
    current = None
    for line in text.splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if line.startswith("[") and line.endswith("]"):
            current = sections.setdefault(line[1:-1], {})
            continue
        if current is None or "=" not in line:
            raise ValueError(f"malformed report line: {line!r}")
        key, value = line.split("=", 1)
        current[key.strip()] = value.strip()
    return sections


FOOTER = "[footer]"


def with_footer(body: str, timestamp: str) -> str:
    """Append the run timestamp; determinism checks compare ``strip_footer`` output."""
    return body + f"{FOOTER}\ngenerated_at = {timestamp}\n"


def strip_footer(text: str) -> str:
    i = text.find(FOOTER)
    return text if i < 0 else text[:i]


def config_hash(*parts: str) -> str:
    h = hashlib.sha256()
    for part in parts:
        raw = part.encode()
        # length prefix keeps ("a", "b") and ("ab", "") apart
        h.update(len(raw).to_bytes(8, "little"))
        h.update(raw)
    return h.hexdigest()[:16]


# -- augmentation study -------------------------------------------------------------


@dataclass
class AugmentationResult:
    without: MetricsReport
    with_aug: MetricsReport
    n_generated: int

    def to_text(self) -> str:
        return (f"[study]\nn_generated = {self.n_generated}\n\n"
                + self.without.to_text("without") + self.with_aug.to_text("with"))

    @classmethod
    def from_text(cls, text: str) -> "AugmentationResult":
        n = int(parse_report_sections(text)["study"]["n_generated"])
        return cls(MetricsReport.from_text(text, "without"), MetricsReport.from_text(text, "with"), n)


def _evaluate(model: SmallCNN, test: ImageSet, n_boot: int, seed: int) -> dict[str, tuple[float, float, float]]:
    scores = model.predict_scores(test.images)
    point = classification_metrics(scores, test.labels)
    ci = bootstrap_intervals(scores, test.labels, n_boot, seed)
    return {k: (point[k], *ci[k]) for k in METRIC_KEYS}


def augmentation_study(train: ImageSet, test: ImageSet, generator_fn, classifier: ClassifierConfig,
                       n_generated_per_class: int, seed: int = 0, n_boot: int = 200,
                       metadata: dict[str, str] | None = None) -> AugmentationResult:
    """Train the same classifier from the same init on real vs real + generated data.

    ``generator_fn(conditioning_images, class_ids, seed) -> images`` supplies
    the synthetic samples, conditioned on training images of each class.
    """
    if classifier.image_size != train.image_size or classifier.image_size != test.image_size:
        raise ValueError(
            f"classifier resolution {classifier.image_size} does not match data "
            f"({train.image_size}, {test.image_size})"
        )
    gen_imgs, gen_cls, _ = generated_set(generator_fn, train, n_generated_per_class, seed)
    base = fit_classifier(train.images, train.labels, classifier)
    aug = fit_classifier(np.concatenate([train.images, gen_imgs]),
                         np.concatenate([train.labels, gen_cls]), classifier)
    meta = dict(metadata or {})
    meta.setdefault("seed", str(seed))
    without = MetricsReport(classification=_evaluate(base, test, n_boot, seed), metadata=dict(meta))
    with_aug = MetricsReport(classification=_evaluate(aug, test, n_boot, seed), metadata=dict(meta))
    return AugmentationResult(without, with_aug, len(gen_cls))
