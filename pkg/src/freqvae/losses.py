"""Training objectives: spatial binary cross-entropy, the diagonal-Gaussian
KL term, the frequency-domain MSE loss with its alpha blend, and the
azimuthal-integration spectrum loss.

Reduction conventions, fixed so that alpha is interpretable: BCE is summed
per image, spectral terms are averaged per frequency coefficient (or bin),
and everything is then averaged over the batch.  All losses run on the
autodiff engine and are differentiable with respect to the reconstruction.
"""

import logging
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from . import autodiff as ad
from . import spectral
from .autodiff import Tensor
from .errors import ConfigError, ShapeError, UsageError

log = logging.getLogger(__name__)

LOSS_KINDS = ("vanilla_bce", "fft", "ai")
BCE_EPS = 1e-7
AI_DC_EPS = 1e-8

_clamp_warned = False


@dataclass
class LossConfig:
    """Which reconstruction objective to train under, and its weights.

    alpha blends spatial BCE against the frequency-domain MSE for the fft
    kind; beta scales the KL term; ai_weight scales the azimuthal term
    added to BCE for the ai kind (the raw curve-MSE is orders of magnitude
    smaller than a summed BCE).  The azimuthal bin count is not stored: it
    derives from the image size as floor(min(H, W)/2).
    """

    kind: str
    alpha: float = 0.5
    beta: float = 1.0
    ai_weight: float = 1.0e4

    def __post_init__(self):
        if self.kind not in LOSS_KINDS:
            raise ConfigError(f"unknown loss kind {self.kind!r}; expected one of {LOSS_KINDS}")
        _check_alpha(self.alpha)
        if not self.beta >= 0.0:
            raise ConfigError(f"beta must be >= 0, got {self.beta}")
        if not self.ai_weight >= 0.0:
            raise ConfigError(f"ai_weight must be >= 0, got {self.ai_weight}")


def _check_alpha(alpha):
    if not 0.0 <= alpha <= 1.0:
        raise ConfigError(f"alpha must lie in [0, 1], got {alpha}")


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else ad.tensor(np.asarray(x, np.float32))


def _check_same_shape(name, x, xhat):
    if x.shape != xhat.shape:
        raise ShapeError(f"{name}: shape mismatch {x.shape} vs {xhat.shape}")


def bce_recon(x, xhat) -> Tensor:
    """Binary cross-entropy, summed per image and averaged over the batch.

    xhat is expected strictly inside (0, 1); values at or beyond the
    endpoints are clamped to [1e-7, 1 - 1e-7] and logged once rather than
    treated as fatal.
    """
    global _clamp_warned
    x, xhat = _as_tensor(x), _as_tensor(xhat)
    _check_same_shape("bce_recon", x, xhat)
    data = xhat.data
    if ((data <= 0.0) | (data >= 1.0)).any() and not _clamp_warned:
        log.warning("bce_recon: reconstruction hit the [0, 1] endpoints; clamping at %g", BCE_EPS)
        _clamp_warned = True
    xc = ad.clamp(xhat, BCE_EPS, 1.0 - BCE_EPS)
    log_p = ad.log(xc)
    log_q = ad.log(ad.clamp(ad.add_scalar(ad.neg(xhat), 1.0), BCE_EPS, 1.0 - BCE_EPS))
    inner = ad.add(ad.mul(x, log_p), ad.mul(ad.add_scalar(ad.neg(x), 1.0), log_q))
    return ad.scale(ad.sum_all(inner), -1.0 / x.shape[0])


def kl_diag_gaussian(mu, logvar) -> Tensor:
    """KL(N(mu, diag exp(logvar)) || N(0, I)), averaged over the batch."""
    mu, logvar = _as_tensor(mu), _as_tensor(logvar)
    _check_same_shape("kl_diag_gaussian", mu, logvar)
    inner = ad.add(ad.add(ad.mul(mu, mu), ad.exp(logvar)),
                   ad.neg(ad.add_scalar(logvar, 1.0)))
    return ad.scale(ad.sum_all(inner), 0.5 / mu.shape[0])


@lru_cache(maxsize=16)
def _basis_f32(n: int):
    cos, sin = spectral.dft_basis(n)
    return (ad.tensor(cos.astype(np.float32)), ad.tensor(sin.astype(np.float32)))


def _dft_pair(stack: Tensor):
    """Real and imaginary DFT parts of an (M, H, W) stack, on the engine."""
    _, h, w = stack.shape
    ch, sh = _basis_f32(h)
    cw, sw = _basis_f32(w)
    a = ad.matmul(ch, stack)
    b = ad.matmul(sh, stack)
    real = ad.sub(ad.matmul(a, cw), ad.matmul(b, sw))
    imag = ad.neg(ad.add(ad.matmul(a, sw), ad.matmul(b, cw)))
    return real, imag


def fft_loss(x, xhat) -> Tensor:
    """Mean squared error between the 2D DFTs of x and xhat.

    Per image and channel: mean over coefficients of squared real-part and
    squared imaginary-part differences; then averaged over batch and
    channels.  Computed on the difference image, which by linearity of the
    transform equals the difference of the transforms.
    """
    x, xhat = _as_tensor(x), _as_tensor(xhat)
    _check_same_shape("fft_loss", x, xhat)
    if x.ndim != 4:
        raise UsageError(f"fft_loss expects N x C x H x W batches, got shape {x.shape}")
    n, c, h, w = x.shape
    diff = ad.reshape(ad.sub(x, xhat), (n * c, h, w))
    real, imag = _dft_pair(diff)
    total = ad.add(ad.sum_all(ad.mul(real, real)), ad.sum_all(ad.mul(imag, imag)))
    return ad.scale(total, 1.0 / (n * c * h * w))


def combined_loss(x, xhat, cfg: LossConfig) -> Tensor:
    """alpha * BCE + (1 - alpha) * fft_loss; exact endpoints at 0 and 1."""
    if cfg.kind != "fft":
        raise UsageError(f"combined_loss is the fft-kind blend, got kind {cfg.kind!r}")
    _check_alpha(cfg.alpha)
    if cfg.alpha == 1.0:
        return bce_recon(x, xhat)
    if cfg.alpha == 0.0:
        return fft_loss(x, xhat)
    return ad.add(ad.scale(bce_recon(x, xhat), cfg.alpha),
                  ad.scale(fft_loss(x, xhat), 1.0 - cfg.alpha))


@lru_cache(maxsize=16)
def _luma_kernel():
    k = np.array(spectral.GRAY_WEIGHTS, np.float32).reshape(1, 3, 1, 1)
    return ad.tensor(k), ad.zeros(1)


@lru_cache(maxsize=16)
def _bin_matrix(h: int, w: int):
    """(H*W, nbins) 0/1 matrix binning raw-layout power by rounded radius,
    plus the (nbins, 1) selector extracting the DC bin."""
    fu = np.minimum(np.arange(h), np.arange(h)[::-1] + 1)[:, None].astype(np.float64)
    fv = np.minimum(np.arange(w), np.arange(w)[::-1] + 1)[None, :].astype(np.float64)
    radius = np.floor(np.sqrt(fu * fu + fv * fv) + 0.5).astype(np.int64)
    nbins = min(h, w) // 2
    mat = np.zeros((h * w, nbins), np.float32)
    flat = radius.reshape(-1)
    inside = flat < nbins
    mat[np.nonzero(inside)[0], flat[inside]] = 1.0
    sel = np.zeros((nbins, 1), np.float32)
    sel[0, 0] = 1.0
    return ad.tensor(mat), ad.tensor(sel), nbins


def _normalized_ai_bins(stack: Tensor):
    """DC-normalized azimuthal power curve of an (M, H, W) stack."""
    m, h, w = stack.shape
    binmat, sel, nbins = _bin_matrix(h, w)
    if nbins < 1:
        raise UsageError(f"image {h}x{w} too small for azimuthal bins")
    real, imag = _dft_pair(stack)
    power = ad.add(ad.mul(real, real), ad.mul(imag, imag))
    bins = ad.matmul(ad.reshape(power, (m, h * w)), binmat)
    dc = ad.matmul(bins, sel)
    return ad.div_by_col(bins, dc, eps=AI_DC_EPS), nbins


def _grayscale_stack(batch: Tensor) -> Tensor:
    n, c, h, w = batch.shape
    if c == 3:
        k, b = _luma_kernel()
        batch = ad.conv2d(batch, k, b, stride=1, padding=0)
    return ad.reshape(batch, (n, h, w))


def ai_loss(x, xhat) -> Tensor:
    """MSE between DC-normalized azimuthal power curves of x and xhat.

    RGB batches are collapsed to grayscale first; curves are normalized by
    their own DC bin (guarded by a 1e-8 epsilon), the squared differences
    are averaged over bins and then over the batch.
    """
    x, xhat = _as_tensor(x), _as_tensor(xhat)
    _check_same_shape("ai_loss", x, xhat)
    if x.ndim != 4 or x.shape[1] not in (1, 3):
        raise UsageError(f"ai_loss expects N x C x H x W with 1 or 3 channels, got {x.shape}")
    n = x.shape[0]
    curve_x, nbins = _normalized_ai_bins(_grayscale_stack(x))
    curve_hat, _ = _normalized_ai_bins(_grayscale_stack(xhat))
    diff = ad.sub(curve_x, curve_hat)
    return ad.scale(ad.sum_all(ad.mul(diff, diff)), 1.0 / (n * nbins))


def objective_parts(x, xhat, mu, logvar, cfg: LossConfig) -> dict:
    """Total objective plus its logged components.

    Returns a dict with Tensors under "total", "recon" (spatial BCE),
    "spectral" (raw fft or ai term; constant 0 for vanilla_bce), and "kl".
    """
    kl = kl_diag_gaussian(mu, logvar)
    if cfg.kind == "vanilla_bce":
        recon = bce_recon(x, xhat)
        spec_term = ad.zeros(())
        total = recon
    elif cfg.kind == "fft":
        recon = bce_recon(x, xhat)
        spec_term = fft_loss(x, xhat)
        if cfg.alpha == 1.0:
            total = recon
        elif cfg.alpha == 0.0:
            total = spec_term
        else:
            total = ad.add(ad.scale(recon, cfg.alpha), ad.scale(spec_term, 1.0 - cfg.alpha))
    else:
        recon = bce_recon(x, xhat)
        spec_term = ai_loss(x, xhat)
        total = ad.add(recon, ad.scale(spec_term, cfg.ai_weight))
    if cfg.beta != 0.0:
        total = ad.add(total, ad.scale(kl, cfg.beta))
    return {"total": total, "recon": recon, "spectral": spec_term, "kl": kl}


def total_objective(x, xhat, mu, logvar, cfg: LossConfig) -> Tensor:
    """Reconstruction term for cfg.kind plus beta-weighted KL."""
    return objective_parts(x, xhat, mu, logvar, cfg)["total"]
