"""Shared builders and independent oracles for the test suite."""

from __future__ import annotations

import numpy as np

from memse.crossbar import CrossbarConfig
from memse.netmodel import (
    ActivationSpec,
    AvgPoolSpec,
    ConvSpec,
    LinearSpec,
    NetworkSpec,
)

SMALL_FILTERS = [2, 4, 8, 16, 16]
LARGE_FILTERS = [16, 32, 64, 128, 128]


def build_reference_cnn(which: str = "small", seed: int = 0, bias: bool = False) -> NetworkSpec:
    """Five conv3x3(pad 1) + softplus + 2x2 avg-pool blocks, then a linear
    readout to 10 classes, on 3x32x32 inputs; randomly initialized."""
    filters = SMALL_FILTERS if which == "small" else LARGE_FILTERS
    rng = np.random.default_rng(seed)
    layers = []
    in_ch = 3
    for out_ch in filters:
        w = rng.normal(size=(out_ch, in_ch, 3, 3)) / np.sqrt(9 * in_ch)
        b = rng.normal(size=out_ch) * 0.05 if bias else None
        layers.append(ConvSpec(out_ch, 3, 1, 1, w, b))
        layers.append(ActivationSpec("softplus"))
        layers.append(AvgPoolSpec(2))
        in_ch = out_ch
    w = rng.normal(size=(10, in_ch)) / np.sqrt(in_ch)
    layers.append(LinearSpec(w, rng.normal(size=10) * 0.05 if bias else None))
    return NetworkSpec((3, 32, 32), tuple(layers))


def linear_net(widths: list[int], activation: str = "identity", seed: int = 0, scale: float = 0.5) -> NetworkSpec:
    """Chain of dense layers with the given activation between them."""
    rng = np.random.default_rng(seed)
    layers = []
    for i in range(len(widths) - 1):
        w = rng.normal(size=(widths[i + 1], widths[i])) * scale / np.sqrt(widths[i])
        layers.append(LinearSpec(w))
        if i < len(widths) - 2:
            layers.append(ActivationSpec(activation))
    return NetworkSpec((widths[0], 1, 1), tuple(layers))


def configs_for(net_lowered, sigma_v: float, n_levels: int = 128, r: float = 1.0, c_scale: float = 1.0, **kw):
    """One config per linear stage with g_max = c_scale * w_max (so c = c_scale)."""
    return [
        CrossbarConfig(g_max=c_scale * s.w_max, n_levels=n_levels, sigma_v=sigma_v, r=r, **kw)
        for s in net_lowered.linear_stages()
    ]


def direct_conv(x: np.ndarray, w: np.ndarray, stride: int, padding: int, bias=None) -> np.ndarray:
    """Plain-loop conv oracle, independent of the lowering code."""
    c, h, wd = x.shape
    o, i, kh, kw = w.shape
    assert i == c
    xp = np.zeros((c, h + 2 * padding, wd + 2 * padding))
    xp[:, padding : padding + h, padding : padding + wd] = x
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (wd + 2 * padding - kw) // stride + 1
    out = np.zeros((o, ho, wo))
    for oc in range(o):
        for oy in range(ho):
            for ox in range(wo):
                patch = xp[:, oy * stride : oy * stride + kh, ox * stride : ox * stride + kw]
                out[oc, oy, ox] = np.sum(patch * w[oc])
        if bias is not None:
            out[oc] += bias[oc]
    return out


def direct_avgpool(x: np.ndarray, s: int) -> np.ndarray:
    c, h, w = x.shape
    return x.reshape(c, h // s, s, w // s, s).mean(axis=(2, 4))


def gauss_hermite_softplus(mu: float, rho: float, n: int = 80) -> tuple[float, float]:
    """Quadrature oracle for E[f(Z)], Var[f(Z)], Z ~ N(mu, rho^2), f = softplus."""
    t, w = np.polynomial.hermite.hermgauss(n)
    z = mu + np.sqrt(2.0) * rho * t
    f = np.logaddexp(0.0, z)
    m = float(w @ f) / np.sqrt(np.pi)
    v = float(w @ (f - m) ** 2) / np.sqrt(np.pi)
    return m, v


def folded_mean_abs(m: np.ndarray, s: float) -> np.ndarray:
    """E|Y| for Y ~ N(m, s^2), elementwise (closed form)."""
    from scipy.stats import norm

    if s == 0:
        return np.abs(m)
    return m * (1 - 2 * norm.cdf(-m / s)) + 2 * s * norm.pdf(m / s)
