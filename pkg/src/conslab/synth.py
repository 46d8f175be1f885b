"""Synthetic two-domain pixel-labeling data with a controllable affine shift.

Each sample is a label map made of contiguous regions (a nearest-center
partition) plus a feature image drawn from per-class Gaussians.  The target
domain applies an affine map to the features of the same generative model.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from conslab.errors import DataError, StructuralError

SPLITS = ("source_train", "source_eval", "target_train", "target_eval")
_SPLIT_IDS = {name: i for i, name in enumerate(SPLITS)}
FORMAT_VERSION = 1


@dataclass
class DomainSpec:
    """Per-class feature means, noise level and an affine feature shift.

    ``noise_std`` is a scalar or one value per channel.  ``shift_matrix`` and
    ``shift_offset`` default to the identity map.
    """

    class_means: np.ndarray
    noise_std: np.ndarray | float
    shift_matrix: Optional[np.ndarray] = None
    shift_offset: Optional[np.ndarray] = None

    def __post_init__(self):
        self.class_means = np.atleast_2d(np.asarray(self.class_means, dtype=np.float64))
        K, C = self.class_means.shape
        if C < 2:
            raise StructuralError("need at least 2 feature channels")
        std = np.broadcast_to(np.asarray(self.noise_std, dtype=np.float64), (C,)).copy()
        if np.any(std <= 0):
            raise StructuralError("noise_std must be > 0")
        self.noise_std = std
        if self.shift_matrix is not None:
            A = np.asarray(self.shift_matrix, dtype=np.float64)
            if A.shape != (C, C):
                raise StructuralError(f"shift matrix must be {C}x{C}")
            if abs(np.linalg.det(A)) < 1e-12:
                raise StructuralError("shift matrix must be invertible")
            self.shift_matrix = A
        if self.shift_offset is not None:
            b = np.asarray(self.shift_offset, dtype=np.float64)
            if b.shape != (C,):
                raise StructuralError(f"shift offset must have length {C}")
            self.shift_offset = b

    @property
    def n_classes(self) -> int:
        return self.class_means.shape[0]

    @property
    def n_channels(self) -> int:
        return self.class_means.shape[1]

    def apply_shift(self, x: np.ndarray) -> np.ndarray:
        if self.shift_matrix is not None:
            x = x @ self.shift_matrix.T
        if self.shift_offset is not None:
            x = x + self.shift_offset
        return x

    def invert_shift(self, x: np.ndarray) -> np.ndarray:
        if self.shift_offset is not None:
            x = x - self.shift_offset
        if self.shift_matrix is not None:
            x = x @ np.linalg.inv(self.shift_matrix).T
        return x

    def to_dict(self) -> dict:
        return {
            "class_means": self.class_means.tolist(),
            "noise_std": self.noise_std.tolist(),
            "shift_matrix": None if self.shift_matrix is None else self.shift_matrix.tolist(),
            "shift_offset": None if self.shift_offset is None else self.shift_offset.tolist(),
        }


@dataclass
class Sample:
    features: np.ndarray  # (H, W, C) float64
    labels: np.ndarray  # (H, W) int
    domain: str  # "source" | "target"
    labeled: bool = True


def gen_label_topology(seed, H: int, W: int, K: int) -> np.ndarray:
    """Nearest-center partition of an H x W grid into K labeled regions.

    Centers are redrawn until every class owns at least one pixel.
    """
    if not 1 <= K <= 16:
        raise DataError("K must lie in [1, 16]")
    if K > H * W:
        raise DataError("more classes than pixels")
    if K == 1:
        return np.zeros((H, W), dtype=np.int64)
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:H, 0:W]
    while True:
        centers = rng.uniform(0.0, 1.0, size=(K, 2)) * (H, W)
        d = (yy[..., None] - centers[:, 0]) ** 2 + (xx[..., None] - centers[:, 1]) ** 2
        labels = np.argmin(d, axis=-1)
        if np.bincount(labels.ravel(), minlength=K).min() > 0:
            return labels.astype(np.int64)


def gen_sample(spec: DomainSpec, topology: np.ndarray, rng: np.random.Generator, domain: str = "source") -> Sample:
    labels = np.asarray(topology)
    if labels.max() >= spec.n_classes or labels.min() < 0:
        raise DataError("topology labels exceed the number of classes")
    H, W = labels.shape
    noise = rng.normal(0.0, 1.0, size=(H, W, spec.n_channels)) * spec.noise_std
    feats = spec.apply_shift(spec.class_means[labels] + noise)
    return Sample(features=feats, labels=labels.copy(), domain=domain)


# 30 degree rotation in the (0, 2) channel plane.  The class means sit on a
# regular tetrahedron, so the rotation moves every class by the same amount
# and a source-only classifier degrades without any class being favored.
_THETA = math.radians(30.0)


def default_shift_matrix() -> np.ndarray:
    c, s = math.cos(_THETA), math.sin(_THETA)
    return np.array([[c, 0.0, -s], [0.0, 1.0, 0.0], [s, 0.0, c]])


DEFAULT_MEANS = [
    [0.4, 0.4, 0.4],
    [0.4, -0.4, -0.4],
    [-0.4, 0.4, -0.4],
    [-0.4, -0.4, 0.4],
]
DEFAULT_NOISE = [0.5, 0.5, 0.5]


@dataclass
class DatasetConfig:
    seed: int = 0
    H: int = 32
    W: int = 32
    K: int = 4
    C: int = 3
    n_source_train: int = 200
    n_source_eval: int = 50
    n_target_train: int = 200
    n_target_eval: int = 50
    class_means: List[List[float]] = field(default_factory=lambda: [list(r) for r in DEFAULT_MEANS])
    noise_std: List[float] = field(default_factory=lambda: list(DEFAULT_NOISE))
    target_shift_matrix: List[List[float]] = field(default_factory=lambda: default_shift_matrix().tolist())
    target_shift_offset: Optional[List[float]] = None

    def __post_init__(self):
        for name in ("H", "W", "K", "C"):
            if getattr(self, name) < 1:
                raise StructuralError(f"{name} must be >= 1")
        for name in ("n_source_train", "n_source_eval", "n_target_train", "n_target_eval"):
            if getattr(self, name) < 1:
                raise StructuralError(f"{name} must be >= 1")
        means = np.asarray(self.class_means, dtype=np.float64)
        if means.shape != (self.K, self.C):
            raise StructuralError(f"class_means must be {self.K}x{self.C}, got {means.shape}")

    def source_spec(self) -> DomainSpec:
        return DomainSpec(self.class_means, self.noise_std)

    def target_spec(self) -> DomainSpec:
        offset = self.target_shift_offset
        if offset is None:
            offset = (0.5 * np.broadcast_to(np.asarray(self.noise_std, dtype=np.float64), (self.C,))).tolist()
        return DomainSpec(self.class_means, self.noise_std, self.target_shift_matrix, offset)

    def to_dict(self) -> dict:
        return asdict(self)


def sample_seed(seed: int, split: str, index: int) -> np.random.SeedSequence:
    return np.random.SeedSequence([int(seed) & 0xFFFFFFFFFFFFFFFF, _SPLIT_IDS[split], index])


def make_split(config: DatasetConfig, split: str, n: Optional[int] = None) -> List[Sample]:
    spec = config.source_spec() if split.startswith("source") else config.target_spec()
    domain = "source" if split.startswith("source") else "target"
    n = getattr(config, f"n_{split}") if n is None else n
    out = []
    for i in range(n):
        topo_ss, noise_ss = sample_seed(config.seed, split, i).spawn(2)
        topo = gen_label_topology(topo_ss, config.H, config.W, config.K)
        s = gen_sample(spec, topo, np.random.default_rng(noise_ss), domain)
        s.labeled = split != "target_train"
        out.append(s)
    return out


def make_dataset(config: DatasetConfig) -> Dict[str, List[Sample]]:
    return {split: make_split(config, split) for split in SPLITS}


def class_histogram(samples: Sequence[Sample], K: int) -> np.ndarray:
    counts = np.zeros(K, dtype=np.int64)
    for s in samples:
        counts += np.bincount(s.labels.ravel(), minlength=K)
    return counts


# --- dataset file ----------------------------------------------------------
#
# dataset.json holds the config echo, version and per-split counts.
# dataset.bin holds, split by split in SPLITS order and sample by sample,
# H*W*C little-endian float64 features followed by H*W little-endian uint16
# labels.


def write_dataset(out_dir, config: DatasetConfig, data: Dict[str, List[Sample]]):
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    meta = {
        "format": "conslab-dataset",
        "version": FORMAT_VERSION,
        "config": config.to_dict(),
        "splits": {name: len(data[name]) for name in SPLITS},
        "layout": {"features": "<f8 HxWxC", "labels": "<u2 HxW"},
    }
    with open(out_dir / "dataset.bin", "wb") as fh:
        for name in SPLITS:
            for s in data[name]:
                fh.write(s.features.astype("<f8").tobytes())
                fh.write(s.labels.astype("<u2").tobytes())
    (out_dir / "dataset.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")


def read_dataset(path):
    """Load ``(config, splits)`` from a directory written by :func:`write_dataset`."""
    path = Path(path)
    if path.is_file():
        path = path.parent
    meta = json.loads((path / "dataset.json").read_text())
    if meta.get("version") != FORMAT_VERSION:
        raise DataError(f"unsupported dataset version {meta.get('version')}")
    config = DatasetConfig(**meta["config"])
    H, W, C = config.H, config.W, config.C
    raw = (path / "dataset.bin").read_bytes()
    nf, nl = H * W * C * 8, H * W * 2
    off = 0
    data = {}
    for name in SPLITS:
        items = []
        for _ in range(meta["splits"][name]):
            if off + nf + nl > len(raw):
                raise DataError("dataset.bin is truncated")
            f = np.frombuffer(raw, "<f8", H * W * C, off).reshape(H, W, C).astype(np.float64)
            off += nf
            lab = np.frombuffer(raw, "<u2", H * W, off).reshape(H, W).astype(np.int64)
            off += nl
            dom = "source" if name.startswith("source") else "target"
            items.append(Sample(f, lab, dom, labeled=name != "target_train"))
        data[name] = items
    return config, data
