"""Reconstruction fidelity measurement in three domains: pixel space, the
2D Fourier transform, and the azimuthally integrated power spectrum, plus
CSV/SVG emission of the aggregated results.

Reconstructions are noise free (z = mu) so the reported numbers carry no
sampling variance.  The AI-domain distance compares log(1 + power) per
radial bin; raw power spans many decades and would let the DC bin drown
everything else.
"""

from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from . import autodiff as ad
from . import spectral
from .data import ImageBatch
from .errors import UsageError
from .models import VaeParams, decode, encode
from .spectral import GRAY_WEIGHTS, RadialSpectrum

_EVAL_CHUNK = 256
DOMAINS = ("spatial", "fft2d", "ai")


@dataclass
class MetricsReport:
    """Mean and sample std of per-image RMSE per domain, plus provenance."""

    config: dict
    n: int
    spatial_mean: float
    spatial_std: float
    fft2d_mean: float
    fft2d_std: float
    ai_mean: float
    ai_std: float

    def __post_init__(self):
        if self.n < 2:
            raise UsageError(f"a report needs at least 2 images for a sample std, got {self.n}")
        for name in ("spatial_mean", "spatial_std", "fft2d_mean", "fft2d_std",
                     "ai_mean", "ai_std"):
            if getattr(self, name) < 0:
                raise UsageError(f"{name} must be >= 0")

    @property
    def label(self) -> str:
        loss = self.config.get("loss", "model")
        mode = self.config.get("mode", "")
        return f"{loss}+{mode}" if mode else str(loss)

    def domain(self, name: str):
        return getattr(self, f"{name}_mean"), getattr(self, f"{name}_std")


@dataclass
class SpectrumCurve:
    """Averaged AI curves of a real batch and its reconstructions, with
    per-bin min/max envelopes over the individual images."""

    real: RadialSpectrum
    recon: RadialSpectrum
    real_envelope: Optional[tuple] = None
    recon_envelope: Optional[tuple] = None

    def __post_init__(self):
        if self.real.bins.shape != self.recon.bins.shape:
            raise UsageError(f"curve bin counts differ: {self.real.bins.shape} "
                             f"vs {self.recon.bins.shape}")


def _as_paired_arrays(x, xhat):
    x = np.asarray(x, np.float64)
    xhat = np.asarray(xhat, np.float64)
    if x.shape != xhat.shape:
        raise UsageError(f"shape mismatch: {x.shape} vs {xhat.shape}")
    if x.ndim != 4:
        raise UsageError(f"expected N x C x H x W batches, got {x.shape}")
    return x, xhat


def _gray(batch: np.ndarray) -> np.ndarray:
    if batch.shape[1] == 1:
        return batch[:, 0]
    if batch.shape[1] == 3:
        return np.tensordot(batch, np.asarray(GRAY_WEIGHTS, np.float64), axes=([1], [0]))
    raise UsageError(f"expected 1 or 3 channels, got {batch.shape[1]}")


def rmse_spatial(x, xhat) -> np.ndarray:
    """Per-image root-mean-square pixel difference."""
    x, xhat = _as_paired_arrays(x, xhat)
    diff = (x - xhat).reshape(x.shape[0], -1)
    return np.sqrt((diff ** 2).mean(axis=1))


def rmse_fft2d(x, xhat) -> np.ndarray:
    """Per-image RMSE between the complex 2D spectra, channel-averaged:
    sqrt of the mean over coefficients of squared real plus squared
    imaginary difference."""
    x, xhat = _as_paired_arrays(x, xhat)
    n, c, h, w = x.shape
    out = np.zeros(n)
    for i in range(n):
        acc = 0.0
        for ch in range(c):
            grid = spectral.dft2d(x[i, ch] - xhat[i, ch])
            acc += (grid.real ** 2 + grid.imag ** 2).mean()
        out[i] = np.sqrt(acc / c)
    return out


def rmse_ai(x, xhat) -> np.ndarray:
    """Per-image RMSE between log(1 + power) azimuthal-integration curves
    of the grayscale inputs."""
    x, xhat = _as_paired_arrays(x, xhat)
    gx = _gray(x)
    gh = _gray(xhat)
    out = np.zeros(x.shape[0])
    for i in range(x.shape[0]):
        a = np.log1p(spectral.image_ai_curve(gx[i]).bins)
        b = np.log1p(spectral.image_ai_curve(gh[i]).bins)
        out[i] = np.sqrt(((a - b) ** 2).mean())
    return out


def _reconstruct(params: VaeParams, x: np.ndarray) -> np.ndarray:
    """Noise-free reconstruction, z = mu, in chunks."""
    outs = []
    with ad.no_grad():
        for start in range(0, x.shape[0], _EVAL_CHUNK):
            chunk = np.ascontiguousarray(x[start: start + _EVAL_CHUNK], np.float32)
            mu, _ = encode(params, chunk)
            outs.append(decode(params, mu).data)
    return np.concatenate(outs)


def evaluate(params: VaeParams, test_batch, cfg) -> MetricsReport:
    """All three per-image RMSE vectors over a test batch, aggregated as
    mean and sample std (N-1); cfg supplies the provenance echo."""
    x = test_batch.data if isinstance(test_batch, ImageBatch) else np.asarray(test_batch)
    if x.shape[0] < 2:
        raise UsageError(f"evaluation needs at least 2 images, got {x.shape[0]}")
    xhat = _reconstruct(params, x)
    echo = {"loss": cfg.loss.kind, "mode": cfg.mode.value, "alpha": cfg.loss.alpha,
            "beta": cfg.loss.beta, "ai_weight": cfg.loss.ai_weight, "seed": cfg.seed}
    vectors = {"spatial": rmse_spatial(x, xhat), "fft2d": rmse_fft2d(x, xhat),
               "ai": rmse_ai(x, xhat)}
    stats = {}
    for name, vec in vectors.items():
        stats[f"{name}_mean"] = float(vec.mean())
        stats[f"{name}_std"] = float(vec.std(ddof=1))
    return MetricsReport(config=echo, n=x.shape[0], **stats)


def spectrum_curves(params: VaeParams, test_batch) -> SpectrumCurve:
    """Averaged AI curve of the real batch against its reconstructions,
    with per-bin min/max envelopes."""
    x = test_batch.data if isinstance(test_batch, ImageBatch) else np.asarray(test_batch)
    if x.shape[0] < 1:
        raise UsageError("spectrum_curves needs at least one image")
    xhat = _reconstruct(params, x)
    gx = _gray(np.asarray(x, np.float64))
    gh = _gray(np.asarray(xhat, np.float64))

    def curves(stack):
        per = np.stack([spectral.image_ai_curve(img).bins for img in stack])
        mean = spectral.average_ai_curve(stack)
        return mean, (per.min(axis=0), per.max(axis=0))

    real, real_env = curves(gx)
    recon, recon_env = curves(gh)
    return SpectrumCurve(real=real, recon=recon, real_envelope=real_env,
                         recon_envelope=recon_env)


def _write_report_csv(report: MetricsReport, path) -> None:
    lines = ["config,domain,mean,std,n"]
    for domain in DOMAINS:
        mean, std = report.domain(domain)
        lines.append(f"{report.label},{domain},{mean!r},{std!r},{report.n}")
    Path(path).write_text("\n".join(lines) + "\n")


def _write_curves_csv(curve: SpectrumCurve, path) -> None:
    lines = ["bin,real_power,recon_power"]
    for i, (a, b) in enumerate(zip(curve.real.bins, curve.recon.bins)):
        lines.append(f"{i},{float(a)!r},{float(b)!r}")
    Path(path).write_text("\n".join(lines) + "\n")


def _svg_path(xs, ys) -> str:
    steps = " ".join(f"L {x:.2f},{y:.2f}" for x, y in zip(xs[1:], ys[1:]))
    return f"M {xs[0]:.2f},{ys[0]:.2f} {steps}"


def _write_curves_svg(curve: SpectrumCurve, path) -> None:
    width, height = 640, 420
    left, right, top, bottom = 70, 20, 20, 50
    nbins = curve.real.bins.size
    series = {"real": np.log10(1.0 + curve.real.bins),
              "recon": np.log10(1.0 + curve.recon.bins)}
    lo = min(v.min() for v in series.values())
    hi = max(v.max() for v in series.values())
    span = (hi - lo) or 1.0

    def sx(i):
        return left + (width - left - right) * (i / max(nbins - 1, 1))

    def sy(v):
        return height - bottom - (height - top - bottom) * ((v - lo) / span)

    colors = {"real": "#1f6f43", "recon": "#b03a2e"}
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" viewBox="0 0 {width} {height}" '
        f'font-family="sans-serif" font-size="12">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
        f'<line x1="{left}" y1="{height - bottom}" x2="{width - right}" '
        f'y2="{height - bottom}" stroke="black"/>',
        f'<line x1="{left}" y1="{top}" x2="{left}" y2="{height - bottom}" stroke="black"/>',
        f'<text x="{(left + width - right) / 2}" y="{height - 12}" '
        f'text-anchor="middle">radial bin</text>',
        f'<text x="16" y="{(top + height - bottom) / 2}" text-anchor="middle" '
        f'transform="rotate(-90 16 {(top + height - bottom) / 2})">log10(1 + power)</text>',
        f'<text x="{left - 6}" y="{sy(lo) + 4}" text-anchor="end">{lo:.2f}</text>',
        f'<text x="{left - 6}" y="{sy(hi) + 4}" text-anchor="end">{hi:.2f}</text>',
        f'<text x="{sx(0)}" y="{height - bottom + 16}" text-anchor="middle">0</text>',
        f'<text x="{sx(nbins - 1)}" y="{height - bottom + 16}" '
        f'text-anchor="middle">{nbins - 1}</text>',
    ]
    for idx, (name, values) in enumerate(series.items()):
        xs = [sx(i) for i in range(nbins)]
        ys = [sy(v) for v in values]
        parts.append(f'<path d="{_svg_path(xs, ys)}" fill="none" '
                     f'stroke="{colors[name]}" stroke-width="1.5"/>')
        y = top + 16 * (idx + 1)
        parts.append(f'<line x1="{width - 150}" y1="{y - 4}" x2="{width - 126}" '
                     f'y2="{y - 4}" stroke="{colors[name]}" stroke-width="1.5"/>')
        parts.append(f'<text x="{width - 120}" y="{y}">{name}</text>')
    parts.append("</svg>")
    Path(path).write_text("\n".join(parts) + "\n")


def export(obj, path, fmt: str) -> None:
    """Write a MetricsReport (csv) or SpectrumCurve (csv or svg)."""
    if fmt not in ("csv", "svg"):
        raise UsageError(f"format must be csv or svg, got {fmt!r}")
    if isinstance(obj, MetricsReport):
        if fmt != "csv":
            raise UsageError("metrics reports export as csv only")
        _write_report_csv(obj, path)
    elif isinstance(obj, SpectrumCurve):
        if obj.real.bins.size == 0:
            raise UsageError("refusing to export an empty curve")
        if fmt == "csv":
            _write_curves_csv(obj, path)
        else:
            _write_curves_svg(obj, path)
    else:
        raise UsageError(f"cannot export {type(obj).__name__}")


def read_report_csv(path):
    """Parse a metrics CSV back into {domain: (mean, std)} plus meta."""
    lines = Path(path).read_text().strip().splitlines()
    if lines[0] != "config,domain,mean,std,n":
        raise UsageError(f"{path}: unexpected header {lines[0]!r}")
    out = {}
    meta = {}
    for line in lines[1:]:
        config, domain, mean, std, n = line.split(",")
        out[domain] = (float(mean), float(std))
        meta = {"config": config, "n": int(n)}
    return out, meta


def read_curves_csv(path):
    """Parse a curves CSV back into (real, recon) arrays."""
    lines = Path(path).read_text().strip().splitlines()
    if lines[0] != "bin,real_power,recon_power":
        raise UsageError(f"{path}: unexpected header {lines[0]!r}")
    real, recon = [], []
    for line in lines[1:]:
        _, a, b = line.split(",")
        real.append(float(a))
        recon.append(float(b))
    return np.array(real), np.array(recon)