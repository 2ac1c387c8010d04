"""Synthetic correlated-label datasets and on-disk dataset format.

Label vectors are sampled by thresholding a correlated Gaussian latent
vector (a Gaussian copula): per-class thresholds pin the marginal priors,
and each pairwise latent correlation is solved numerically so the *binary*
labels hit the requested correlation target.  Features are a sum of
per-class spatial prototype patterns plus white noise, so feature identity
carries label information and label co-occurrence is real signal.

A dataset directory holds a JSON manifest, a raw float64 feature blob with
a checksum, and a human-readable labels CSV.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import integrate, optimize
from scipy import stats

__all__ = [
    "InfeasibleCorrelation",
    "DatasetFormatError",
    "SynthSpec",
    "MultilabelDataset",
    "generate_synthetic",
    "split_dataset",
    "save_dataset",
    "load_dataset",
    "reference_spec",
]


class InfeasibleCorrelation(ValueError):
    """The requested binary correlation structure cannot be realized."""


class DatasetFormatError(ValueError):
    """A dataset directory or file violates the format contract."""


@dataclass
class SynthSpec:
    num_classes: int
    image_shape: tuple = (3, 8, 8)
    num_samples: int = 2000
    priors: object = 0.25  # scalar or per-class vector, each in (0, 1)
    correlation: object = None  # K x K symmetric, unit diagonal; None = identity
    noise: float = 0.5
    seed: int = 0

    def prior_vector(self) -> np.ndarray:
        p = np.asarray(self.priors, dtype=np.float64)
        if p.ndim == 0:
            p = np.full(self.num_classes, float(p))
        if p.shape != (self.num_classes,):
            raise ValueError(f"priors shape {p.shape} does not match {self.num_classes} classes")
        if np.any((p <= 0) | (p >= 1)):
            raise ValueError("priors must lie strictly inside (0, 1)")
        return p

    def correlation_matrix(self) -> np.ndarray:
        k = self.num_classes
        if self.correlation is None:
            return np.eye(k)
        c = np.asarray(self.correlation, dtype=np.float64)
        if c.shape != (k, k):
            raise ValueError(f"correlation shape {c.shape} does not match {k} classes")
        if not np.allclose(c, c.T, atol=1e-12):
            raise ValueError("correlation target must be symmetric")
        if not np.allclose(np.diag(c), 1.0, atol=1e-12):
            raise ValueError("correlation target must have unit diagonal")
        if np.any(np.abs(c) > 1.0):
            raise ValueError("correlation entries must lie in [-1, 1]")
        return c

    def to_dict(self) -> dict:
        return {
            "num_classes": self.num_classes,
            "image_shape": list(self.image_shape),
            "num_samples": self.num_samples,
            "priors": (self.priors if np.isscalar(self.priors)
                       else [float(v) for v in np.asarray(self.priors).reshape(-1)]),
            "correlation": (None if self.correlation is None
                            else [[float(v) for v in row] for row in np.asarray(self.correlation)]),
            "noise": self.noise,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, payload: dict) -> "SynthSpec":
        return cls(
            num_classes=int(payload["num_classes"]),
            image_shape=tuple(payload.get("image_shape", (3, 8, 8))),
            num_samples=int(payload.get("num_samples", 2000)),
            priors=payload.get("priors", 0.25),
            correlation=payload.get("correlation"),
            noise=float(payload.get("noise", 0.5)),
            seed=int(payload.get("seed", 0)),
        )


@dataclass
class MultilabelDataset:
    features: np.ndarray  # (B, C, H, W) float64
    labels: np.ndarray  # (B, K) binary float64
    class_names: list | None = None
    split: str = "full"

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.float64)
        if self.features.ndim != 4:
            raise DatasetFormatError(f"features must be rank-4, got {self.features.shape}")
        if self.labels.ndim != 2 or self.labels.shape[0] != self.features.shape[0]:
            raise DatasetFormatError(
                f"labels shape {self.labels.shape} does not pair with features {self.features.shape}"
            )
        if not np.all((self.labels == 0) | (self.labels == 1)):
            raise DatasetFormatError("labels must contain only 0/1")
        if self.class_names is not None and len(self.class_names) != self.labels.shape[1]:
            raise DatasetFormatError("one class name per label column required")

    def __len__(self) -> int:
        return self.features.shape[0]

    @property
    def num_classes(self) -> int:
        return self.labels.shape[1]

    @property
    def avg_labels_per_image(self) -> float:
        return float(self.labels.sum(axis=1).mean())

    def annotations(self) -> list:
        """Per-sample positive-label index sets (for graph construction)."""
        return [set(np.flatnonzero(row).tolist()) for row in self.labels]


def _upper_orthant(t1: float, t2: float, rho: float) -> float:
    """P(Z1 > t1, Z2 > t2) for standard bivariate normal with correlation rho.

    Deterministic 1-D quadrature of phi(z) * P(Z2 > t2 | Z1 = z); accuracy is
    far below the calibration tolerance.
    """
    if rho == 0.0:
        return stats.norm.sf(t1) * stats.norm.sf(t2)
    r = math.sqrt(1.0 - rho * rho)
    val, _ = integrate.quad(
        lambda z: stats.norm.pdf(z) * stats.norm.sf((t2 - rho * z) / r),
        t1,
        np.inf,
        epsabs=1e-12,
        epsrel=1e-10,
    )
    return val


def _solve_latent_rho(t1: float, t2: float, p1: float, p2: float, target: float,
                      pair: tuple) -> float:
    """Latent correlation whose thresholded-Gaussian pair has binary
    correlation ``target``."""
    if target == 0.0:
        return 0.0
    denom = math.sqrt(p1 * (1 - p1) * p2 * (1 - p2))

    def residual(rho: float) -> float:
        p11 = _upper_orthant(t1, t2, rho)
        return (p11 - p1 * p2) / denom - target

    lo, hi = -0.9999, 0.9999
    r_lo, r_hi = residual(lo), residual(hi)
    if r_lo * r_hi > 0:
        raise InfeasibleCorrelation(
            f"binary correlation {target} between classes {pair[0]} and {pair[1]} "
            f"is not achievable with priors {p1} and {p2}"
        )
    return float(optimize.brentq(residual, lo, hi, xtol=1e-12))


def generate_synthetic(spec: SynthSpec) -> MultilabelDataset:
    """Sample a correlated multilabel dataset.

    Raises InfeasibleCorrelation when a pairwise target exceeds what the
    priors allow or when the solved latent correlation matrix is not
    positive semidefinite.
    """
    k = spec.num_classes
    priors = spec.prior_vector()
    target = spec.correlation_matrix()
    if spec.num_samples < 1:
        raise ValueError("num_samples must be positive")
    if spec.noise < 0:
        raise ValueError("noise must be nonnegative")

    thresholds = stats.norm.isf(priors)  # P(Z > t_j) = prior_j
    latent = np.eye(k)
    for i in range(k):
        for j in range(i + 1, k):
            rho = _solve_latent_rho(
                float(thresholds[i]), float(thresholds[j]),
                float(priors[i]), float(priors[j]),
                float(target[i, j]), (i, j),
            )
            latent[i, j] = latent[j, i] = rho

    eigvals, eigvecs = np.linalg.eigh(latent)
    if eigvals.min() < -1e-8:
        raise InfeasibleCorrelation(
            f"pairwise-feasible targets are jointly infeasible: latent correlation "
            f"matrix has eigenvalue {eigvals.min():.3e}"
        )
    factor = eigvecs * np.sqrt(np.clip(eigvals, 0.0, None))

    rng = np.random.default_rng(spec.seed)
    c, h, w = spec.image_shape
    prototypes = rng.normal(size=(k, c, h, w))
    z = rng.standard_normal((spec.num_samples, k)) @ factor.T
    labels = (z > thresholds).astype(np.float64)
    noise = rng.normal(size=(spec.num_samples, c, h, w))
    features = np.tensordot(labels, prototypes, axes=(1, 0)) + spec.noise * noise

    names = [f"class_{j}" for j in range(k)]
    return MultilabelDataset(features=features, labels=labels, class_names=names, split="full")


def split_dataset(ds: MultilabelDataset, val_frac: float = 0.25) -> tuple:
    """Deterministic leading/trailing split into (train, val)."""
    if not 0.0 < val_frac < 1.0:
        raise ValueError("val_frac must lie in (0, 1)")
    n_val = max(1, int(round(val_frac * len(ds))))
    n_train = len(ds) - n_val
    if n_train < 1:
        raise ValueError("split leaves no training samples")
    train = MultilabelDataset(ds.features[:n_train], ds.labels[:n_train], ds.class_names, "train")
    val = MultilabelDataset(ds.features[n_train:], ds.labels[n_train:], ds.class_names, "val")
    return train, val


def save_dataset(ds: MultilabelDataset, out_dir) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    blob = ds.features.astype(np.float64).tobytes()
    manifest = {
        "split": ds.split,
        "num_samples": len(ds),
        "feature_shape": list(ds.features.shape[1:]),
        "num_classes": ds.num_classes,
        "dtype": "float64",
        "features_file": "features.bin",
        "features_sha256": hashlib.sha256(blob).hexdigest(),
        "labels_file": "labels.csv",
        "class_names": ds.class_names,
        "avg_labels_per_image": ds.avg_labels_per_image,
    }
    (out / "features.bin").write_bytes(blob)
    header = ",".join(ds.class_names) if ds.class_names else ",".join(
        f"class_{j}" for j in range(ds.num_classes)
    )
    rows = [header]
    for row in ds.labels:
        rows.append(",".join(str(int(v)) for v in row))
    (out / "labels.csv").write_text("\n".join(rows) + "\n")
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1))


def load_dataset(path) -> MultilabelDataset:
    root = Path(path)
    manifest_path = root / "manifest.json"
    if not manifest_path.exists():
        raise DatasetFormatError(f"no manifest.json in {root}")
    try:
        manifest = json.loads(manifest_path.read_text())
    except json.JSONDecodeError as e:
        raise DatasetFormatError(f"manifest is not valid JSON: {e}") from e

    try:
        num_samples = int(manifest["num_samples"])
        feature_shape = tuple(int(v) for v in manifest["feature_shape"])
        num_classes = int(manifest["num_classes"])
        blob_name = manifest["features_file"]
        blob_sha = manifest["features_sha256"]
        labels_name = manifest["labels_file"]
    except (KeyError, TypeError, ValueError) as e:
        raise DatasetFormatError(f"manifest missing or malformed field: {e}") from e

    blob_path = root / blob_name
    if not blob_path.exists():
        raise DatasetFormatError(f"features blob missing: {blob_path}")
    blob = blob_path.read_bytes()
    if hashlib.sha256(blob).hexdigest() != blob_sha:
        raise DatasetFormatError("features blob checksum mismatch; file corrupt")
    expected = num_samples * int(np.prod(feature_shape)) * 8
    if len(blob) != expected:
        raise DatasetFormatError(
            f"features blob is {len(blob)} bytes, expected {expected} for declared shape"
        )
    features = np.frombuffer(blob, dtype=np.float64).reshape((num_samples,) + feature_shape).copy()

    labels_path = root / labels_name
    if not labels_path.exists():
        raise DatasetFormatError(f"labels file missing: {labels_path}")
    lines = labels_path.read_text().splitlines()
    if not lines:
        raise DatasetFormatError("labels file is empty")
    header = lines[0].split(",")
    if len(header) != num_classes:
        raise DatasetFormatError(
            f"labels header has {len(header)} columns, manifest declares {num_classes}"
        )
    labels = np.zeros((num_samples, num_classes))
    data_rows = [ln for ln in lines[1:] if ln.strip()]
    if len(data_rows) != num_samples:
        raise DatasetFormatError(
            f"labels file has {len(data_rows)} data rows, manifest declares {num_samples}"
        )
    for r, line in enumerate(data_rows, start=1):
        cells = line.split(",")
        if len(cells) != num_classes:
            raise DatasetFormatError(
                f"labels row {r}: expected {num_classes} cells, got {len(cells)}"
            )
        for j, cell in enumerate(cells):
            v = cell.strip()
            if v not in ("0", "1"):
                raise DatasetFormatError(f"labels row {r}: value {cell!r} is not 0 or 1")
            labels[r - 1, j] = float(v)

    class_names = manifest.get("class_names")
    return MultilabelDataset(
        features=features,
        labels=labels,
        class_names=list(class_names) if class_names else None,
        split=manifest.get("split", "full"),
    )


def reference_spec() -> SynthSpec:
    """The pinned benchmark spec: ten classes with two strongly co-occurring
    pairs, used by the end-to-end learning checks."""
    corr = np.eye(10)
    corr[0, 1] = corr[1, 0] = 0.8
    corr[2, 3] = corr[3, 2] = 0.8
    return SynthSpec(
        num_classes=10,
        image_shape=(3, 8, 8),
        num_samples=2000,
        priors=0.25,
        correlation=corr,
        noise=0.5,
        seed=0,
    )
