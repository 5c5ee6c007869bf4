"""Paired datasets: a seeded synthetic task family and a folder loader.

Source images (domain A, the bridge's ``x_T``) and target images (domain B,
``x_0``) are stored as ``(N, C, H, W)`` float32 tensors in [-1, 1].

Synthetic targets are random soft ellipses and rectangles carrying smooth
intensity ramps.  Each source is a deterministic corruption of its target,
so every pair carries its own ground truth: :func:`corrupt` applied to a
stored target reproduces the stored source bit for bit.
"""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from PIL import Image

from .imagefiles import write_png, write_raw

log = logging.getLogger(__name__)

TASK_KINDS = ("blur-deblur", "edge-to-fill", "bias-field")
IMAGE_SUFFIXES = (".png", ".tif", ".tiff")


class DatasetError(ValueError):
    pass


class UnmatchedFilesError(DatasetError):
    def __init__(self, only_a: Sequence[str], only_b: Sequence[str]):
        parts = []
        if only_a:
            parts.append("only in A: " + ", ".join(only_a))
        if only_b:
            parts.append("only in B: " + ", ".join(only_b))
        super().__init__("unmatched filenames (" + "; ".join(parts) + ")")
        self.only_a = list(only_a)
        self.only_b = list(only_b)


@dataclass
class PairedDataset:
    source: torch.Tensor
    target: torch.Tensor
    names: list[str]
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.source.shape != self.target.shape or self.source.ndim != 4:
            raise DatasetError(
                f"source/target must share one (N, C, H, W) shape, got "
                f"{tuple(self.source.shape)} and {tuple(self.target.shape)}"
            )
        if len(self.names) != self.source.shape[0]:
            raise DatasetError("names must align with the image stack")
        for label, x in (("source", self.source), ("target", self.target)):
            if x.numel() and (not bool(torch.isfinite(x).all()) or float(x.abs().max()) > 1.0):
                raise DatasetError(f"{label} images must be finite and inside [-1, 1]")

    def __len__(self):
        return self.source.shape[0]

    def __getitem__(self, i):
        return self.source[i], self.target[i]

    @property
    def pairs(self) -> list[tuple[torch.Tensor, torch.Tensor]]:
        return [(self.source[i], self.target[i]) for i in range(len(self))]

    @property
    def channels(self) -> int:
        return self.source.shape[1]

    @property
    def image_size(self) -> tuple[int, int]:
        return tuple(self.source.shape[-2:])

    def subset(self, indices: Sequence[int]) -> "PairedDataset":
        idx = torch.as_tensor(list(indices), dtype=torch.long)
        prov = dict(self.provenance, subset=[int(i) for i in idx])
        return PairedDataset(self.source[idx].clone(), self.target[idx].clone(),
                             [self.names[i] for i in idx.tolist()], prov)

    def digest(self) -> str:
        h = hashlib.sha256()
        h.update(self.source.numpy().tobytes())
        h.update(self.target.numpy().tobytes())
        h.update("\n".join(self.names).encode())
        return h.hexdigest()


@dataclass(frozen=True)
class SyntheticTaskSpec:
    """Parameters of a procedural paired task.

    ``blur_sigma`` and ``contrast_gamma`` drive ``blur-deblur``; ``edge_scale``
    sets the gradient magnitude that saturates the ``edge-to-fill`` map;
    ``bias_strength`` is the maximum multiplicative attenuation of ``bias-field``.
    """

    kind: str = "blur-deblur"
    size: int = 64
    n_samples: int = 250
    seed: int = 0
    channels: int = 1
    blur_sigma: float = 2.0
    contrast_gamma: float = 1.0
    edge_scale: float = 0.5
    bias_strength: float = 0.5
    min_shapes: int = 2
    max_shapes: int = 5

    def __post_init__(self):
        if self.kind not in TASK_KINDS:
            raise DatasetError(f"unknown task kind {self.kind!r}; expected one of {TASK_KINDS}")
        if self.n_samples < 1:
            raise DatasetError("n_samples must be >= 1")
        if self.size < 8:
            raise DatasetError("size must be >= 8")
        if self.channels not in (1, 3):
            raise DatasetError("channels must be 1 or 3")
        if self.blur_sigma < 0 or self.contrast_gamma <= 0 or self.edge_scale <= 0:
            raise DatasetError("blur_sigma >= 0, contrast_gamma > 0 and edge_scale > 0 required")
        if not 0 <= self.bias_strength < 1:
            raise DatasetError("bias_strength must lie in [0, 1)")
        if not 1 <= self.min_shapes <= self.max_shapes:
            raise DatasetError("need 1 <= min_shapes <= max_shapes")


def normalize(x, lo: float, hi: float):
    """Affine map of ``[lo, hi]`` onto ``[-1, 1]``."""
    if not hi > lo:
        raise ValueError(f"need hi > lo, got lo={lo}, hi={hi}")
    return 2.0 * (x - lo) / (hi - lo) - 1.0


def denormalize(y, lo: float, hi: float):
    if not hi > lo:
        raise ValueError(f"need hi > lo, got lo={lo}, hi={hi}")
    return (y + 1.0) * 0.5 * (hi - lo) + lo


# -- synthetic generation -------------------------------------------------

def _draw_target(rng: np.random.Generator, spec: SyntheticTaskSpec) -> np.ndarray:
    n = spec.size
    yy, xx = np.meshgrid(np.linspace(0.0, 1.0, n), np.linspace(0.0, 1.0, n), indexing="ij")
    out = np.empty((spec.channels, n, n))
    for c in range(spec.channels):
        gx, gy = rng.uniform(-0.15, 0.15, size=2)
        img = rng.uniform(-0.9, -0.6) + gx * xx + gy * yy
        for _ in range(int(rng.integers(spec.min_shapes, spec.max_shapes + 1))):
            cx, cy = rng.uniform(0.2, 0.8, size=2)
            rx, ry = rng.uniform(0.08, 0.28, size=2)
            theta = rng.uniform(0.0, np.pi)
            soft = rng.uniform(0.01, 0.04)
            u = (xx - cx) * np.cos(theta) + (yy - cy) * np.sin(theta)
            v = -(xx - cx) * np.sin(theta) + (yy - cy) * np.cos(theta)
            if rng.random() < 0.5:
                dist = np.sqrt((u / rx) ** 2 + (v / ry) ** 2) - 1.0
            else:
                dist = np.maximum(np.abs(u) / rx, np.abs(v) / ry) - 1.0
            mask = 0.5 * (1.0 + np.tanh(-dist * min(rx, ry) / soft))
            ramp = rng.uniform(-0.4, 0.9) + rng.uniform(-0.8, 0.8) * u + rng.uniform(-0.8, 0.8) * v
            img = img * (1.0 - mask) + mask * ramp
        out[c] = img
    return np.clip(out, -1.0, 1.0)


def gaussian_kernel(sigma: float, truncate: float = 4.0) -> np.ndarray:
    radius = int(truncate * sigma + 0.5)
    k = np.exp(-0.5 * (np.arange(-radius, radius + 1) / sigma) ** 2)
    return k / k.sum()


def gaussian_blur(x: np.ndarray, sigma: float) -> np.ndarray:
    """Separable Gaussian blur over the last two axes, half-sample symmetric borders."""
    if sigma == 0:
        return x.copy()
    k = gaussian_kernel(sigma)
    r = len(k) // 2
    out = x
    for axis in (-2, -1):
        pad = [(0, 0)] * out.ndim
        pad[axis] = (r, r)
        padded = np.pad(out, pad, mode="symmetric")
        n = out.shape[axis]
        acc = np.zeros_like(out)
        for j, w in enumerate(k):
            acc += w * np.take(padded, np.arange(j, j + n), axis=axis)
        out = acc
    return out


def _sobel_magnitude(x: np.ndarray) -> np.ndarray:
    p = np.pad(x, [(0, 0), (1, 1), (1, 1)], mode="edge")
    gx = (p[:, :-2, 2:] + 2 * p[:, 1:-1, 2:] + p[:, 2:, 2:]) - (p[:, :-2, :-2] + 2 * p[:, 1:-1, :-2] + p[:, 2:, :-2])
    gy = (p[:, 2:, :-2] + 2 * p[:, 2:, 1:-1] + p[:, 2:, 2:]) - (p[:, :-2, :-2] + 2 * p[:, :-2, 1:-1] + p[:, :-2, 2:])
    return np.hypot(gx, gy) / 8.0


def _bias_field(shape: tuple[int, ...], strength: float, seed: int) -> np.ndarray:
    rng = np.random.default_rng(seed)
    n = shape[-1]
    yy, xx = np.meshgrid(np.linspace(0.0, 1.0, shape[-2]), np.linspace(0.0, 1.0, n), indexing="ij")
    f = np.zeros(shape[-2:])
    for _ in range(3):
        kx, ky = rng.uniform(0.3, 1.5, size=2)
        px, py = rng.uniform(0.0, 2 * np.pi, size=2)
        f += np.cos(np.pi * kx * xx + px) * np.cos(np.pi * ky * yy + py)
    f = (f - f.min()) / max(f.max() - f.min(), 1e-12)
    return 1.0 - strength * f


def corrupt(x0: np.ndarray, spec: SyntheticTaskSpec, sample_seed: int = 0) -> np.ndarray:
    """Map a (C, H, W) float32 target to its float32 source image.

    ``sample_seed`` only matters for ``bias-field``, whose smooth
    attenuation map is drawn per sample.
    """
    x = np.asarray(x0, dtype=np.float32).astype(np.float64)
    if spec.kind == "blur-deblur":
        y = gaussian_blur(x, spec.blur_sigma)
        if spec.contrast_gamma != 1.0:
            y = 2.0 * np.clip((y + 1.0) * 0.5, 0.0, 1.0) ** spec.contrast_gamma - 1.0
    elif spec.kind == "edge-to-fill":
        y = 2.0 * np.clip(_sobel_magnitude(x) / spec.edge_scale, 0.0, 1.0) - 1.0
    else:
        y = 2.0 * ((x + 1.0) * 0.5 * _bias_field(x.shape, spec.bias_strength, sample_seed)) - 1.0
    return np.clip(y, -1.0, 1.0).astype(np.float32)


def generate_synthetic_pairs(spec: SyntheticTaskSpec) -> PairedDataset:
    rng = np.random.default_rng(spec.seed)
    sample_seeds = rng.integers(0, 2**31 - 1, size=spec.n_samples)
    targets, sources = [], []
    for i in range(spec.n_samples):
        x0 = _draw_target(np.random.default_rng(int(sample_seeds[i])), spec).astype(np.float32)
        targets.append(x0)
        sources.append(corrupt(x0, spec, int(sample_seeds[i])))
    names = [f"{i:05d}.png" for i in range(spec.n_samples)]
    prov = {"synthetic": asdict(spec), "sample_seeds": [int(s) for s in sample_seeds]}
    return PairedDataset(torch.from_numpy(np.stack(sources)), torch.from_numpy(np.stack(targets)), names, prov)


# -- folders --------------------------------------------------------------

def _list_images(folder: Path) -> list[str]:
    return sorted(p.name for p in folder.iterdir() if p.is_file() and p.suffix.lower() in IMAGE_SUFFIXES)


def _decode(path: Path) -> tuple[np.ndarray, float]:
    """Decoded (C, H, W) float64 intensities and the full-scale value."""
    try:
        with Image.open(path) as im:
            im.load()
            mode = im.mode
            if mode in ("I;16", "I;16B", "I;16L", "I"):
                arr = np.asarray(im, dtype=np.float64)[None]
                top = 65535.0
            elif mode in ("L", "LA", "1"):
                arr = np.asarray(im.convert("L"), dtype=np.float64)
                top = 255.0
            else:
                arr = np.asarray(im.convert("RGB"), dtype=np.float64)
                top = 255.0
    except (OSError, SyntaxError) as exc:
        raise DatasetError(f"cannot decode {path}: {exc}") from exc
    if arr.ndim == 2:
        arr = arr[None]
    elif arr.ndim == 3 and arr.shape[-1] in (3, 4):
        arr = np.moveaxis(arr[..., :3], -1, 0)
    return arr, top


def _resize(arr: np.ndarray, size: int) -> np.ndarray:
    if arr.shape[-2:] == (size, size):
        return arr
    chans = [np.asarray(Image.fromarray(c.astype(np.float32), mode="F").resize((size, size), Image.BILINEAR),
                        dtype=np.float64) for c in arr]
    return np.stack(chans)


def load_image_folder(path: str | Path, size: int) -> tuple[torch.Tensor, list[str]]:
    """Unpaired variant of :func:`load_paired_folder`: (N, C, size, size) in [-1, 1] plus names."""
    path = Path(path)
    if not path.is_dir():
        raise DatasetError(f"not a directory: {path}")
    names = _list_images(path)
    if not names:
        raise DatasetError(f"no images found in {path}")
    images = []
    for name in names:
        arr, top = _decode(path / name)
        if images and arr.shape[0] != images[0].shape[0]:
            raise DatasetError(f"{path / name} has {arr.shape[0]} channels, expected {images[0].shape[0]}")
        images.append(np.clip(normalize(_resize(arr, size), 0.0, top), -1.0, 1.0).astype(np.float32))
    return torch.from_numpy(np.stack(images)), names


def load_paired_folder(path_a: str | Path, path_b: str | Path, size: int) -> PairedDataset:
    """Load matching images from ``path_a`` (sources) and ``path_b`` (targets).

    Files are paired by name and ordered lexicographically.  Each image is
    resized to ``size`` x ``size`` with a bilinear filter and mapped from its
    bit depth's full range onto [-1, 1].
    """
    path_a, path_b = Path(path_a), Path(path_b)
    for p in (path_a, path_b):
        if not p.is_dir():
            raise DatasetError(f"not a directory: {p}")
    names_a, names_b = _list_images(path_a), _list_images(path_b)
    only_a = sorted(set(names_a) - set(names_b))
    only_b = sorted(set(names_b) - set(names_a))
    if only_a or only_b:
        raise UnmatchedFilesError(only_a, only_b)
    if not names_a:
        raise DatasetError(f"no images found in {path_a}")

    sources, targets = [], []
    channels = None
    for name in names_a:
        for folder, stack in ((path_a, sources), (path_b, targets)):
            arr, top = _decode(folder / name)
            if channels is None:
                channels = arr.shape[0]
            elif arr.shape[0] != channels:
                raise DatasetError(f"{folder / name} has {arr.shape[0]} channels, expected {channels}")
            img = np.clip(normalize(_resize(arr, size), 0.0, top), -1.0, 1.0)
            stack.append(img.astype(np.float32))
    prov = {"folders": [str(path_a), str(path_b)], "size": size}
    return PairedDataset(torch.from_numpy(np.stack(sources)), torch.from_numpy(np.stack(targets)), names_a, prov)


def write_paired_folder(dataset: PairedDataset, out_dir: str | Path, raw: bool = False) -> Path:
    """Export as ``A/`` and ``B/`` PNG folders plus ``manifest.json``.

    With ``raw`` the exact float tensors are also dumped, since 8-bit PNGs
    quantise the intensities.
    """
    out_dir = Path(out_dir)
    (out_dir / "A").mkdir(parents=True, exist_ok=True)
    (out_dir / "B").mkdir(parents=True, exist_ok=True)
    files = {}
    for i, name in enumerate(dataset.names):
        for sub, img in (("A", dataset.source[i]), ("B", dataset.target[i])):
            p = write_png(out_dir / sub / name, img)
            files[f"{sub}/{name}"] = hashlib.sha256(p.read_bytes()).hexdigest()
    if raw:
        write_raw(out_dir / "source.raw", dataset.source)
        write_raw(out_dir / "target.raw", dataset.target)
    manifest = {
        "n_pairs": len(dataset),
        "shape": list(dataset.source.shape[1:]),
        "provenance": dataset.provenance,
        "digest": dataset.digest(),
        "files": files,
    }
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return out_dir


def split(dataset: PairedDataset, fractions: Sequence[float], seed: int):
    """Disjoint, exhaustive (train, val, test) split drawn from ``seed``.

    Sizes are ``floor(f * n)`` for train and val, with test taking the rest.
    """
    fr = [float(f) for f in fractions]
    if len(fr) != 3 or any(f < 0 for f in fr) or abs(sum(fr) - 1.0) > 1e-9:
        raise DatasetError(f"fractions must be three non-negative numbers summing to 1, got {fractions}")
    n = len(dataset)
    perm = np.random.default_rng(seed).permutation(n)
    n_train = int(np.floor(fr[0] * n + 1e-9))
    n_val = int(np.floor(fr[1] * n + 1e-9))
    parts = (perm[:n_train], perm[n_train:n_train + n_val], perm[n_train + n_val:])
    return tuple(dataset.subset(sorted(int(i) for i in p)) for p in parts)
