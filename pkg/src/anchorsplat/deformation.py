"""Time-dependent parameter offsets: Gaussian-basis motion with a global offset.

Ten channels per primitive, in this order: center x/y/z (0-2), raw quaternion
w/x/y/z (3-6), log-scale x/y/z (7-9).

Backends:
    ``edm``  sum of Gaussian bases plus a time-independent offset ``delta``.
    ``gs``   the same bases with ``delta`` held at zero.
    ``fps``  Fourier pairs plus a polynomial; ``delta`` unused (the constant
             polynomial term covers it).
"""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .errors import ConfigurationError
from .scene import GaussianScene

N_CHANNELS = 10
CENTER = slice(0, 3)
QUAT = slice(3, 7)
LOG_SCALE = slice(7, 10)
BACKENDS = ("edm", "gs", "fps")
MIN_WIDTH = 1e-3
FIELD_PARAMS = ("weights", "centers", "log_widths", "fourier_cos", "fourier_sin", "poly", "delta")


@dataclass
class BasisSet:
    weights: np.ndarray
    centers: np.ndarray
    widths: np.ndarray

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        self.centers = np.asarray(self.centers, dtype=np.float64)
        self.widths = np.asarray(self.widths, dtype=np.float64)
        if not (self.weights.shape == self.centers.shape == self.widths.shape):
            raise ConfigurationError("basis weights, centers and widths must have equal length")
        if (self.widths <= 0).any():
            raise ConfigurationError("basis widths must be positive")


def basis_eval(t, center, width):
    t = np.asarray(t, dtype=np.float64)
    return np.exp(-((t - center) ** 2) / (2.0 * width ** 2))


def edm_eval(t, basis: BasisSet, delta: float):
    return np.sum(basis.weights * basis_eval(np.asarray(t)[..., None], basis.centers, basis.widths),
                  axis=-1) + delta


def fps_eval(t, fourier_cos, fourier_sin, poly):
    """sum_m a_m cos(2 pi m t) + b_m sin(2 pi m t) + sum_n p_n t^n, with m from 1."""
    t = np.asarray(t, dtype=np.float64)
    fourier_cos = np.asarray(fourier_cos, dtype=np.float64)
    fourier_sin = np.asarray(fourier_sin, dtype=np.float64)
    poly = np.asarray(poly, dtype=np.float64)
    m = np.arange(1, fourier_cos.shape[-1] + 1)
    phase = 2.0 * np.pi * m * t[..., None]
    four = np.sum(fourier_cos * np.cos(phase) + fourier_sin * np.sin(phase), axis=-1)
    powers = t[..., None] ** np.arange(poly.shape[-1])
    return four + np.sum(poly * powers, axis=-1)


@dataclass
class DeformationField:
    """Per-primitive, per-channel motion coefficients.

    Arrays are (N, 10, B) for the Gaussian bases, (N, 10, M) for the Fourier
    pairs, (N, 10, P) for the polynomial and (N, 10) for ``delta``.  The
    arrays belonging to the inactive family have a zero-length last axis.
    """

    backend: str
    weights: np.ndarray
    centers: np.ndarray
    log_widths: np.ndarray
    fourier_cos: np.ndarray
    fourier_sin: np.ndarray
    poly: np.ndarray
    delta: np.ndarray

    def __post_init__(self):
        if self.backend not in BACKENDS:
            raise ConfigurationError(f"unknown deformation backend {self.backend!r}")
        for name in FIELD_PARAMS:
            setattr(self, name, np.asarray(getattr(self, name), dtype=np.float64))
        n = len(self.delta)
        if self.delta.shape != (n, N_CHANNELS):
            raise ConfigurationError(f"delta must be (N, {N_CHANNELS})")
        for name in FIELD_PARAMS[:-1]:
            arr = getattr(self, name)
            if arr.ndim != 3 or arr.shape[:2] != (n, N_CHANNELS):
                raise ConfigurationError(f"{name} must be (N, {N_CHANNELS}, *)")

    @classmethod
    def zeros(cls, n: int, backend: str = "edm", n_basis: int = 17,
              n_fourier: int = 8, poly_degree: int = 3) -> "DeformationField":
        """Identity motion: bases spread uniformly over [0, 1] with zero weights."""
        empty = np.zeros((n, N_CHANNELS, 0))
        if backend == "fps":
            return cls(backend, empty, empty, empty,
                       np.zeros((n, N_CHANNELS, n_fourier)), np.zeros((n, N_CHANNELS, n_fourier)),
                       np.zeros((n, N_CHANNELS, poly_degree + 1)), np.zeros((n, N_CHANNELS)))
        centers = np.linspace(0.0, 1.0, n_basis) if n_basis > 1 else np.zeros(n_basis)
        shape = (n, N_CHANNELS, n_basis)
        return cls(backend, np.zeros(shape), np.broadcast_to(centers, shape).copy(),
                   np.full(shape, np.log(1.0 / n_basis)), empty, empty, empty,
                   np.zeros((n, N_CHANNELS)))

    def __len__(self) -> int:
        return len(self.delta)

    @property
    def n_basis(self) -> int:
        return self.weights.shape[-1]

    @property
    def uses_delta(self) -> bool:
        return self.backend == "edm"

    def trainable(self) -> tuple[str, ...]:
        if self.backend == "fps":
            return ("fourier_cos", "fourier_sin", "poly")
        if self.backend == "gs":
            return ("weights", "centers", "log_widths")
        return ("weights", "centers", "log_widths", "delta")

    def params(self) -> dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in FIELD_PARAMS}

    def replace(self, **kw) -> "DeformationField":
        return replace(self, **kw)

    def copy(self) -> "DeformationField":
        return replace(self, **{k: v.copy() for k, v in self.params().items()})

    def subset(self, idx) -> "DeformationField":
        return replace(self, **{k: v[idx] for k, v in self.params().items()})

    def concat(self, other: "DeformationField") -> "DeformationField":
        return replace(self, **{k: np.concatenate([v, getattr(other, k)])
                                for k, v in self.params().items()})

    def basis_set(self, i: int, channel: int) -> BasisSet:
        return BasisSet(self.weights[i, channel], self.centers[i, channel],
                        np.exp(self.log_widths[i, channel]))

    def evaluate(self, t: float) -> np.ndarray:
        """Offsets psi(t) for every primitive and channel, shape (N, 10)."""
        psi = np.zeros((len(self), N_CHANNELS))
        if self.n_basis:
            b = basis_eval(t, self.centers, np.exp(self.log_widths))
            psi = np.sum(self.weights * b, axis=-1)
        if self.fourier_cos.shape[-1] or self.poly.shape[-1]:
            psi = psi + fps_eval(np.full(psi.shape, float(t)), self.fourier_cos,
                                 self.fourier_sin, self.poly)
        if self.uses_delta:
            psi = psi + self.delta
        return psi

    def backward(self, t: float, g_psi: np.ndarray) -> dict[str, np.ndarray]:
        """Gradients of a scalar loss w.r.t. every field array, given dL/dpsi (N, 10)."""
        grads = {k: np.zeros_like(v) for k, v in self.params().items()}
        g = g_psi[..., None]
        if self.n_basis:
            sigma = np.exp(self.log_widths)
            r = (t - self.centers) / sigma
            b = np.exp(-0.5 * r * r)
            grads["weights"] = g * b
            wb = g * self.weights * b
            grads["centers"] = wb * r / sigma
            grads["log_widths"] = wb * r * r
        if self.fourier_cos.shape[-1]:
            phase = 2.0 * np.pi * np.arange(1, self.fourier_cos.shape[-1] + 1) * t
            grads["fourier_cos"] = g * np.cos(phase)
            grads["fourier_sin"] = g * np.sin(phase)
        if self.poly.shape[-1]:
            grads["poly"] = g * float(t) ** np.arange(self.poly.shape[-1])
        if self.uses_delta:
            grads["delta"] = g_psi.copy()
        return grads

    def clamp_widths(self) -> None:
        """Keep every basis width at or above the floor."""
        np.maximum(self.log_widths, np.log(MIN_WIDTH), out=self.log_widths)


def deform_scene(scene: GaussianScene, field: DeformationField, t: float) -> GaussianScene:
    """Scene at time ``t``. Opacity, SH and anchors pass through unchanged."""
    if len(field) != len(scene):
        raise ConfigurationError(
            f"deformation field covers {len(field)} primitives, scene has {len(scene)}")
    psi = field.evaluate(t)
    quats = scene.quats + psi[:, QUAT]
    return scene.replace(
        centers=scene.centers + psi[:, CENTER],
        quats=quats / np.linalg.norm(quats, axis=1, keepdims=True),
        log_scales=scene.log_scales + psi[:, LOG_SCALE],
    )
