"""Fidelity and determinism metrics, plus table-shaped report files.

PSNR and SSIM default to ``data_range = 2.0``, the span of images normalised
to [-1, 1].  Perceptual metrics such as LPIPS need a pretrained network and
are not bundled; any callable ``(a, b) -> float`` can be passed in where a
perceptual score is accepted.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Protocol

import torch
import torch.nn.functional as F

PSNR_CAP = 100.0
REPORT_COLUMNS = ("model", "steps", "lpips", "psnr", "ssim", "std")
MISSING = "-"


class PerceptualMetric(Protocol):
    def __call__(self, a: torch.Tensor, b: torch.Tensor) -> float: ...


def _same_shape(a: torch.Tensor, b: torch.Tensor) -> None:
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")


def psnr(a: torch.Tensor, b: torch.Tensor, data_range: float = 2.0) -> float:
    """Peak signal-to-noise ratio in dB, capped at ``PSNR_CAP`` for identical inputs."""
    _same_shape(a, b)
    if data_range <= 0:
        raise ValueError("data_range must be positive")
    mse = float(((a.double() - b.double()) ** 2).mean())
    if mse == 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * math.log10(data_range**2 / mse))


def _window(size: int, sigma: float | None, dtype) -> torch.Tensor:
    if sigma is None:
        w = torch.full((size,), 1.0 / size, dtype=dtype)
    else:
        x = torch.arange(size, dtype=dtype) - (size - 1) / 2
        w = torch.exp(-0.5 * (x / sigma) ** 2)
        w = w / w.sum()
    return torch.outer(w, w)


def ssim(
    a: torch.Tensor,
    b: torch.Tensor,
    data_range: float = 2.0,
    window_size: int = 11,
    sigma: float | None = 1.5,
    k1: float = 0.01,
    k2: float = 0.03,
) -> float:
    """Mean structural similarity over all valid window positions.

    Inputs are ``(H, W)``, ``(C, H, W)`` or ``(N, C, H, W)``; every channel is
    scored separately and the local maps are averaged together.  Pass
    ``sigma=None`` for a uniform window.
    """
    _same_shape(a, b)
    x, y = a.double(), b.double()
    while x.ndim < 4:
        x, y = x.unsqueeze(0), y.unsqueeze(0)
    if min(x.shape[-2:]) < window_size:
        raise ValueError(f"image {tuple(x.shape[-2:])} is smaller than the {window_size}px window")
    if torch.equal(x, y):
        return 1.0
    n, c, h, w = x.shape
    x = x.reshape(n * c, 1, h, w)
    y = y.reshape(n * c, 1, h, w)
    win = _window(window_size, sigma, torch.float64)[None, None]
    mu_x, mu_y = F.conv2d(x, win), F.conv2d(y, win)
    sxx = F.conv2d(x * x, win) - mu_x**2
    syy = F.conv2d(y * y, win) - mu_y**2
    sxy = F.conv2d(x * y, win) - mu_x * mu_y
    c1, c2 = (k1 * data_range) ** 2, (k2 * data_range) ** 2
    num = (2 * mu_x * mu_y + c1) * (2 * sxy + c2)
    den = (mu_x**2 + mu_y**2 + c1) * (sxx + syy + c2)
    return float((num / den).mean().clamp(-1.0, 1.0))


def determinism_std(outputs) -> float:
    """Mean per-pixel sample std across at least two repeated trials."""
    from .sampler import trajectory_std

    return trajectory_std(outputs)[1]


def evaluate_pair_set(
    predictions: torch.Tensor,
    references: torch.Tensor,
    data_range: float = 2.0,
    perceptual: PerceptualMetric | None = None,
) -> dict[str, float | None]:
    """Per-image PSNR/SSIM (and optional perceptual score) averaged over a stack."""
    _same_shape(predictions, references)
    if predictions.shape[0] == 0:
        raise ValueError("empty prediction set")
    ps = [psnr(p, r, data_range) for p, r in zip(predictions, references)]
    ss = [ssim(p, r, data_range) for p, r in zip(predictions, references)]
    lp = None
    if perceptual is not None:
        lp = sum(float(perceptual(p, r)) for p, r in zip(predictions, references)) / len(ps)
    return {"psnr": sum(ps) / len(ps), "ssim": sum(ss) / len(ss), "lpips": lp}


@dataclass
class MetricRow:
    model: str
    steps: int
    psnr: float
    ssim: float
    std: float
    lpips: Optional[float] = None
    seed: Optional[int] = None
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        if not (math.isfinite(self.psnr) and self.psnr <= PSNR_CAP):
            raise ValueError(f"psnr must be finite and <= {PSNR_CAP}")
        if not -1.0 <= self.ssim <= 1.0:
            raise ValueError(f"ssim {self.ssim} outside [-1, 1]")
        if not self.std >= 0:
            raise ValueError(f"std must be >= 0, got {self.std}")


@dataclass
class MetricReport:
    rows: list[MetricRow]
    dataset_id: str = "unknown"
    seed: int = 0
    config_hash: str = ""
    title: str = ""

    def __post_init__(self):
        keys = [(r.model, r.steps) for r in self.rows]
        if len(set(keys)) != len(keys):
            raise ValueError("report rows must be unique per (model, steps)")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "MetricReport":
        rows = [MetricRow(**r) for r in d["rows"]]
        return cls(rows=rows, **{k: v for k, v in d.items() if k != "rows"})


def _fmt(value: float | None, digits: int) -> str:
    return MISSING if value is None else f"{value:.{digits}f}"


def report_table(report: MetricReport) -> list[list[str]]:
    lines = [list(REPORT_COLUMNS)]
    for r in report.rows:
        lines.append([r.model, str(r.steps), _fmt(r.lpips, 4), _fmt(r.psnr, 2), _fmt(r.ssim, 4), _fmt(r.std, 4)])
    return lines


def emit_report(report: MetricReport, out_dir: str | Path, stem: str | None = None,
                formats: tuple[str, ...] = ("csv", "json")) -> list[Path]:
    """Write the report as CSV (table layout) and/or JSON (lossless).

    The file stem defaults to ``<dataset_id>_<config_hash>``.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    stem = stem or f"{report.dataset_id}_{report.config_hash or 'nohash'}"
    written = []
    for fmt in formats:
        if fmt == "csv":
            p = out_dir / f"{stem}.csv"
            with p.open("w", newline="") as fh:
                csv.writer(fh).writerows(report_table(report))
        elif fmt == "json":
            p = out_dir / f"{stem}.json"
            p.write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True))
        else:
            raise ValueError(f"unknown report format {fmt!r}")
        written.append(p)
    return written


def load_report(path: str | Path) -> MetricReport:
    return MetricReport.from_dict(json.loads(Path(path).read_text()))


def format_markdown(report: MetricReport) -> str:
    table = report_table(report)
    out = ["| " + " | ".join(table[0]) + " |", "|" + "---|" * len(table[0])]
    out += ["| " + " | ".join(row) + " |" for row in table[1:]]
    return "\n".join(out)

