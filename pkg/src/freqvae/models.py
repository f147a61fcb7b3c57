"""Convolutional VAE: strided-conv encoder to a diagonal Gaussian over the
latent space, and a mirrored decoder whose final up-sampling stage is
swappable between a transposed convolution and nearest-neighbor up-sampling
followed by a single 5x5 convolution (the "N.1.5" variant).

Fixed architecture: encoder stacks kernel-4 stride-2 padding-1 convolutions
with leaky-relu until the map is 2x2, then two dense heads produce mu and
log-variance.  The decoder runs a dense layer into a 2x2 map and mirrors
the encoder with transposed convolutions, finishing with the configured
final stage and a sigmoid.
"""

import enum
import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, UsageError


class UpsamplingMode(enum.Enum):
    TRANSPOSED_CONV = "transposed_conv"
    N15 = "n15"


DEFAULT_WIDTHS = {
    8: (32, 64),
    16: (32, 64, 128),
    32: (32, 64, 128, 256),
    64: (32, 64, 128, 256, 512),
}
DEFAULT_LATENT = {8: 8, 16: 16, 32: 32, 64: 128}


@dataclass
class VaeParams:
    """Named parameter tensors plus the build configuration they realize."""

    image_size: int
    channels: int
    latent_dim: int
    mode: UpsamplingMode
    widths: tuple
    tensors: dict

    def parameter_count(self) -> int:
        return sum(t.data.size for t in self.tensors.values())

    def all_finite(self) -> bool:
        return all(np.isfinite(t.data).all() for t in self.tensors.values())


@dataclass
class LatentSample:
    """Reparameterized draw z = mu + exp(0.5 * logvar) * eps."""

    mu: Tensor
    logvar: Tensor
    z: Tensor
    eps: np.ndarray


def _kaiming_uniform(rng, shape):
    # fan-in from all dimensions but the first; for transposed-conv kernels
    # (C_in, C_out, kh, kw) this is the conventional C_out * kh * kw
    fan_in = int(np.prod(shape[1:])) if len(shape) > 1 else int(shape[0])
    bound = math.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(np.float32)


def _dense_init(rng, fan_in, fan_out):
    bound = math.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=(fan_in, fan_out)).astype(np.float32)


def build_vae(image_size: int, channels: int, latent_dim: int,
              mode: UpsamplingMode, seed: int, widths=None) -> VaeParams:
    """Deterministically initialize a VAE for 32x32 or 64x64 images.

    widths overrides the per-stage channel counts (one per stride-2 stage);
    the default is (32, 64, 128, 256), with an extra 512 stage for 64x64.
    Sizes 8 and 16 build shallower stacks of the same shape and exist for
    cheap tests and experiments.
    """
    if image_size not in DEFAULT_WIDTHS:
        raise ConfigError(f"unsupported image size {image_size}; "
                          f"expected one of {sorted(DEFAULT_WIDTHS)}")
    if channels not in (1, 3):
        raise ConfigError(f"unsupported channel count {channels}; expected 1 or 3")
    if latent_dim < 1:
        raise ConfigError(f"latent_dim must be >= 1, got {latent_dim}")
    if not isinstance(mode, UpsamplingMode):
        raise ConfigError(f"mode must be an UpsamplingMode, got {mode!r}")
    stages = len(DEFAULT_WIDTHS[image_size])
    widths = tuple(widths) if widths is not None else DEFAULT_WIDTHS[image_size]
    if len(widths) != stages or any(w < 1 for w in widths):
        raise ConfigError(f"widths must be {stages} positive ints for size {image_size}, got {widths}")

    rng = np.random.default_rng(seed)
    p = {}

    def add(name, array):
        p[name] = ad.tensor(array, requires_grad=True)

    c_prev = channels
    for i, w in enumerate(widths):
        add(f"enc{i}.w", _kaiming_uniform(rng, (w, c_prev, 4, 4)))
        add(f"enc{i}.b", np.zeros(w, np.float32))
        c_prev = w
    flat = widths[-1] * 2 * 2
    add("mu.w", _dense_init(rng, flat, latent_dim))
    add("mu.b", np.zeros(latent_dim, np.float32))
    add("logvar.w", _dense_init(rng, flat, latent_dim))
    add("logvar.b", np.zeros(latent_dim, np.float32))

    add("dec_in.w", _dense_init(rng, latent_dim, flat))
    add("dec_in.b", np.zeros(flat, np.float32))
    rev = widths[::-1]
    for i in range(stages - 1):
        add(f"up{i}.w", _kaiming_uniform(rng, (rev[i], rev[i + 1], 4, 4)))
        add(f"up{i}.b", np.zeros(rev[i + 1], np.float32))
    if mode is UpsamplingMode.TRANSPOSED_CONV:
        add("out.w", _kaiming_uniform(rng, (widths[0], channels, 4, 4)))
    else:
        add("out.w", _kaiming_uniform(rng, (channels, widths[0], 5, 5)))
    add("out.b", np.zeros(channels, np.float32))

    return VaeParams(image_size=image_size, channels=channels, latent_dim=latent_dim,
                     mode=mode, widths=widths, tensors=p)


def encode(params: VaeParams, x):
    """Map an image batch to (mu, logvar), each batch x latent_dim."""
    if not isinstance(x, Tensor):
        x = ad.tensor(np.asarray(x, np.float32))
    want = (params.channels, params.image_size, params.image_size)
    if x.ndim != 4 or x.shape[1:] != want:
        raise UsageError(f"encode expects N x {want} input, got {x.shape}")
    p = params.tensors
    h = x
    for i in range(len(params.widths)):
        h = ad.leaky_relu(ad.conv2d(h, p[f"enc{i}.w"], p[f"enc{i}.b"], stride=2, padding=1))
    h = ad.reshape(h, (x.shape[0], params.widths[-1] * 4))
    mu = ad.dense(h, p["mu.w"], p["mu.b"])
    logvar = ad.dense(h, p["logvar.w"], p["logvar.b"])
    return mu, logvar


def reparameterize(mu: Tensor, logvar: Tensor, rng=None, eps=None) -> LatentSample:
    """Draw z = mu + exp(0.5 * logvar) * eps with eps standard normal.

    Pass eps explicitly for a fixed draw, otherwise it comes from rng; the
    draw is recorded on the returned sample.
    """
    if mu.shape != logvar.shape:
        raise UsageError(f"mu/logvar shape mismatch: {mu.shape} vs {logvar.shape}")
    if eps is None:
        if rng is None:
            raise UsageError("reparameterize needs either an rng or an explicit eps")
        eps = rng.standard_normal(mu.shape)
    eps = np.asarray(eps, np.float32)
    std = ad.exp(ad.scale(logvar, 0.5))
    z = ad.add(mu, ad.mul(std, ad.tensor(eps)))
    return LatentSample(mu=mu, logvar=logvar, z=z, eps=eps)


def decode_trunk(params: VaeParams, z) -> Tensor:
    """Decoder up to the feature map entering the final up-sampling stage."""
    if not isinstance(z, Tensor):
        z = ad.tensor(np.asarray(z, np.float32))
    if z.ndim != 2 or z.shape[1] != params.latent_dim:
        raise UsageError(f"decode expects N x {params.latent_dim} latents, got {z.shape}")
    p = params.tensors
    h = ad.leaky_relu(ad.dense(z, p["dec_in.w"], p["dec_in.b"]))
    h = ad.reshape(h, (z.shape[0], params.widths[-1], 2, 2))
    for i in range(len(params.widths) - 1):
        h = ad.leaky_relu(ad.transposed_conv2d(h, p[f"up{i}.w"], p[f"up{i}.b"],
                                               stride=2, padding=1))
    return h


def decode(params: VaeParams, z) -> Tensor:
    """Map latents back to images in (0, 1) via the configured final stage."""
    h = decode_trunk(params, z)
    p = params.tensors
    if params.mode is UpsamplingMode.TRANSPOSED_CONV:
        h = ad.transposed_conv2d(h, p["out.w"], p["out.b"], stride=2, padding=1)
    else:
        h = ad.upsample_nearest2x(h)
        h = ad.conv2d(h, p["out.w"], p["out.b"], stride=1, padding=2)
    return ad.sigmoid(h)


def forward(params: VaeParams, x, rng):
    """encode, reparameterize, decode; returns (xhat, mu, logvar)."""
    mu, logvar = encode(params, x)
    sample = reparameterize(mu, logvar, rng)
    xhat = decode(params, sample.z)
    return xhat, mu, logvar
