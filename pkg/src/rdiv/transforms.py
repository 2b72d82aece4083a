"""Transform-domain operators and keyed preprocessors.

A preprocessor is one channel's composed mapping: map the image into a
transform domain, apply a key-derived data-independent operator there, and
map back. The classifier behind it always consumes direct-domain images.

Supported operator kinds:

* ``identity``             - passthrough (baseline channels).
* ``direct-permutation``   - keyed lossless permutation of the flattened
                             pixels, no transform domain involved.
* ``dct-sign-flip``        - keyed sign flips of DCT coefficients inside one
                             sub-band (or the whole plane), an involution.
* ``dct-hard-threshold``   - zero the DCT coefficients of one sub-band.
* ``dct-subsample``        - keep a keyed subset of DCT coefficients, zero
                             the rest.

The 2D DCT is computed by explicit basis-matrix multiplication. Images here
are small (N <= 32), and the matrix form keeps the operator algebra obvious:
forward is C x C^T, inverse is C^T X C, with C orthonormal.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .rng import (
    TAG_PER_COLOR_BASE,
    TAG_PREPROCESS,
    MasterKey,
    SubKey,
    derive_subkey,
    keyed_permutation,
    keyed_sign_mask,
    keyed_subset,
)

KINDS = ("identity", "direct-permutation", "dct-sign-flip",
         "dct-hard-threshold", "dct-subsample")

SUBBAND_IDS = ("LOW", "V", "H", "D")


@dataclass(frozen=True)
class DctPlan:
    """Orthonormal DCT-II basis for N x N images."""

    size: int
    basis: np.ndarray

    @classmethod
    def create(cls, size: int) -> "DctPlan":
        if size < 1:
            raise ValueError("plan size must be positive")
        n = np.arange(size)
        u = n.reshape(-1, 1)
        basis = np.sqrt(2.0 / size) * np.cos(np.pi * (2 * n + 1) * u / (2 * size))
        basis[0, :] = np.sqrt(1.0 / size)
        return cls(size, basis)


def dct2(plan: DctPlan, x: np.ndarray) -> np.ndarray:
    """2D DCT coefficients of an N x N matrix: C x C^T."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (plan.size, plan.size):
        raise ValueError(f"expected {plan.size}x{plan.size} input, got {x.shape}")
    return plan.basis @ x @ plan.basis.T


def idct2(plan: DctPlan, coeffs: np.ndarray) -> np.ndarray:
    """Inverse of dct2: C^T X C."""
    coeffs = np.asarray(coeffs, dtype=np.float64)
    if coeffs.shape != (plan.size, plan.size):
        raise ValueError(f"expected {plan.size}x{plan.size} coefficients, got {coeffs.shape}")
    return plan.basis.T @ coeffs @ plan.basis


@dataclass(frozen=True)
class Subband:
    """One quadrant of the N x N DCT plane, half-open row/col ranges."""

    id: str
    row0: int
    row1: int
    col0: int
    col1: int

    @property
    def rect(self) -> tuple[int, int, int, int]:
        return (self.row0, self.row1, self.col0, self.col1)


def subband_rect(band_id: str, size: int) -> Subband:
    """The fixed equal-quadrant split of the DCT plane.

    LOW is the top-left quadrant (low frequencies, DC included), V top-right,
    H bottom-left, D bottom-right. Requires even N.
    """
    if size % 2 != 0:
        raise ValueError(f"sub-band split needs even size, got {size}")
    if band_id not in SUBBAND_IDS:
        raise ValueError(f"unknown sub-band {band_id!r}")
    half = size // 2
    ranges = {
        "LOW": (0, half, 0, half),
        "V": (0, half, half, size),
        "H": (half, size, 0, half),
        "D": (half, size, half, size),
    }
    return Subband(band_id, *ranges[band_id])


@dataclass(frozen=True)
class Preprocessor:
    """One channel's keyed mapping, immutable after construction.

    Payload semantics by kind:
      identity            - no payload
      direct-permutation  - permutation: (n*n,) indices, or (m, n*n) when
                            per_color is set
      dct-sign-flip       - sign_mask: (N, N) in {-1, +1}, plus subband
      dct-hard-threshold  - subband to zero
      dct-subsample       - retained: sorted flat indices into the N*N plane
    """

    kind: str
    key: SubKey
    size: int
    colors: int
    permutation: np.ndarray | None = None
    per_color: bool = False
    sign_mask: np.ndarray | None = None
    subband: Subband | None = None
    retained: np.ndarray | None = None
    l: int = 0

    def payload_equal(self, other: "Preprocessor") -> bool:
        """Structural equality of the materialized payloads."""
        if (self.kind, self.size, self.colors, self.per_color, self.l) != \
                (other.kind, other.size, other.colors, other.per_color, other.l):
            return False
        if self.subband != other.subband:
            return False
        for mine, theirs in ((self.permutation, other.permutation),
                             (self.sign_mask, other.sign_mask),
                             (self.retained, other.retained)):
            if (mine is None) != (theirs is None):
                return False
            if mine is not None and not np.array_equal(mine, theirs):
                return False
        return True


def make_preprocessor(kind: str, master: MasterKey, j: int, i: int,
                      size: int, colors: int,
                      subband: Subband | None = None,
                      l: int | None = None,
                      per_color: bool = False) -> Preprocessor:
    """Derive the (j, i) sub-key and materialize the keyed payload.

    dct-sign-flip and dct-hard-threshold require `subband`; dct-subsample
    requires `l` (coefficients retained out of N*N). `per_color` gives
    direct-permutation an independent permutation per color channel instead
    of the default shared one.
    """
    if kind not in KINDS:
        raise ValueError(f"unknown preprocessor kind {kind!r}")
    key = derive_subkey(master, j, i, TAG_PREPROCESS)
    if kind == "identity":
        return Preprocessor(kind, key, size, colors)
    if kind == "direct-permutation":
        n = size * size
        if per_color:
            perms = np.stack([
                keyed_permutation(derive_subkey(master, j, i, TAG_PER_COLOR_BASE + c), n)
                for c in range(colors)
            ])
            return Preprocessor(kind, key, size, colors,
                                permutation=perms, per_color=True)
        return Preprocessor(kind, key, size, colors,
                            permutation=keyed_permutation(key, n))
    if kind == "dct-sign-flip":
        if subband is None:
            raise ValueError("dct-sign-flip requires a sub-band")
        mask = keyed_sign_mask(key, (size, size), subband.rect)
        return Preprocessor(kind, key, size, colors,
                            sign_mask=mask, subband=subband)
    if kind == "dct-hard-threshold":
        if subband is None:
            raise ValueError("dct-hard-threshold requires a sub-band")
        return Preprocessor(kind, key, size, colors, subband=subband)
    # dct-subsample
    if l is None:
        raise ValueError("dct-subsample requires a retained-coefficient count")
    retained = keyed_subset(key, size * size, l)
    return Preprocessor(kind, key, size, colors, retained=retained, l=l)


def preprocess(p: Preprocessor, x: np.ndarray) -> np.ndarray:
    """Apply the keyed mapping to one N x N x m image."""
    x = np.asarray(x)
    if x.shape != (p.size, p.size, p.colors):
        raise ValueError(f"expected shape {(p.size, p.size, p.colors)}, got {x.shape}")
    return preprocess_batch(p, x[np.newaxis])[0]


def preprocess_batch(p: Preprocessor, images: np.ndarray) -> np.ndarray:
    """Apply the keyed mapping to a (B, N, N, m) batch.

    Output dtype and shape match the input. DCT arithmetic runs in float64
    and is cast back, keeping round trips well inside 1e-5 per entry.
    """
    images = np.asarray(images)
    expected = (p.size, p.size, p.colors)
    if images.ndim != 4 or images.shape[1:] != expected:
        raise ValueError(f"expected batch of shape (B, {p.size}, {p.size}, {p.colors}), "
                         f"got {images.shape}")
    if p.kind == "identity":
        return images.copy()

    if p.kind == "direct-permutation":
        batch = images.shape[0]
        flat = images.reshape(batch, p.size * p.size, p.colors)
        out = np.empty_like(flat)
        if p.per_color:
            for c in range(p.colors):
                out[:, :, c] = flat[:, p.permutation[c], c]
        else:
            out = flat[:, p.permutation, :]
        return out.reshape(images.shape)

    # Remaining kinds operate on DCT coefficients, per color channel.
    basis = DctPlan.create(p.size).basis
    # (B, N, N, m) -> (B, m, N, N) so matmul broadcasts over batch and color.
    work = np.moveaxis(images, 3, 1).astype(np.float64)
    coeffs = basis @ work @ basis.T

    if p.kind == "dct-sign-flip":
        coeffs *= p.sign_mask
    elif p.kind == "dct-hard-threshold":
        r0, r1, c0, c1 = p.subband.rect
        coeffs[:, :, r0:r1, c0:c1] = 0.0
    else:  # dct-subsample
        keep = np.zeros(p.size * p.size, dtype=bool)
        keep[p.retained] = True
        coeffs *= keep.reshape(p.size, p.size)

    out = basis.T @ coeffs @ basis
    return np.moveaxis(out, 1, 3).astype(images.dtype, copy=False)
