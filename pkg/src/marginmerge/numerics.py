"""Dense float64 linear algebra, seeded randomness and a finite-difference gradient oracle.

Matrices are plain ``numpy.ndarray`` objects of dtype float64. The helpers
here add the shape and finiteness checks the rest of the package relies on.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import CorruptionError, NumericError, ShapeError

DEFAULT_PSD_FLOOR = 1e-6
MAT_MAGIC = b"SMPMAT01"


def as_matrix(a, name="matrix"):
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2:
        raise ShapeError(f"{name} must be 2-D, got shape {a.shape}")
    return a


def check_finite(a, what="value"):
    if not np.all(np.isfinite(a)):
        raise NumericError(f"non-finite entries in {what}")
    return a


def matmul(a, b):
    a = as_matrix(a, "a")
    b = as_matrix(b, "b")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"cannot multiply {a.shape} by {b.shape}")
    return check_finite(a @ b, "matmul result")


# ---------------------------------------------------------------- randomness


def _derive_key(seed, path):
    h = hashlib.blake2b(digest_size=16)
    h.update(struct.pack("<Q", int(seed) & 0xFFFFFFFFFFFFFFFF))
    for part in path:
        h.update(b"\x1f")
        h.update(str(part).encode("utf-8"))
    return np.frombuffer(h.digest(), dtype="<u8").copy()


class SeededRng:
    """Philox counter-based generator keyed by ``(seed, *path)``.

    ``substream`` derives an independent generator from a label path, so
    per-class or per-iteration draws never depend on how many numbers an
    unrelated component consumed before them.
    """

    def __init__(self, seed, *path):
        self.seed = int(seed)
        self.path = tuple(path)
        self._gen = np.random.Generator(np.random.Philox(key=_derive_key(self.seed, self.path)))

    def substream(self, *labels):
        return SeededRng(self.seed, *self.path, *labels)

    def normal(self, size=None):
        return self._gen.standard_normal(size)

    def uniform(self, size=None):
        return self._gen.random(size)

    def permutation(self, n):
        return self._gen.permutation(n)

    def __repr__(self):
        return f"SeededRng(seed={self.seed}, path={self.path!r})"


# ------------------------------------------------------------ PSD sampling


@dataclass(frozen=True)
class PsdFactor:
    lower: np.ndarray
    floor: float

    @property
    def dim(self):
        return self.lower.shape[0]


def _clipped_lower(sym):
    # lower-triangular L with L L^T = V max(w, 0) V^T, via QR of the square root
    w, v = np.linalg.eigh(sym)
    root = v * np.sqrt(np.maximum(w, 0.0))
    r = np.linalg.qr(root.T, mode="r")
    return r.T


def psd_factor(sigma, floor=DEFAULT_PSD_FLOOR):
    """Cholesky factor of ``sigma``; retries with ``sigma + floor*I`` when that fails.

    The floor is applied only when the plain factorization fails, so a
    well-conditioned input is factored exactly.
    """
    sigma = as_matrix(sigma, "sigma")
    n, m = sigma.shape
    if n != m:
        raise ShapeError(f"sigma must be square, got {sigma.shape}")
    if not np.allclose(sigma, sigma.T, rtol=0.0, atol=1e-9):
        raise ShapeError("sigma is not symmetric within 1e-9")
    check_finite(sigma, "sigma")
    sym = 0.5 * (sigma + sigma.T)
    try:
        lower = np.linalg.cholesky(sym)
    except np.linalg.LinAlgError:
        if floor <= 0:
            return PsdFactor(lower=_clipped_lower(sym), floor=0.0)
        try:
            lower = np.linalg.cholesky(sym + floor * np.eye(n))
        except np.linalg.LinAlgError:
            # indefinite beyond the floor: clip the spectrum instead
            w, v = np.linalg.eigh(sym)
            w = np.maximum(w, 0.0) + floor
            lower = np.linalg.cholesky((v * w) @ v.T)
    return PsdFactor(lower=lower, floor=float(floor))


def sample_gaussian(mean, factor, rng, n=None):
    """Draw ``mean + L z``. With ``n`` given, return an ``(n, d)`` block of rows."""
    mean = np.asarray(mean, dtype=np.float64)
    if mean.ndim != 1 or mean.shape[0] != factor.dim:
        raise ShapeError(f"mean length {mean.shape} does not match factor dim {factor.dim}")
    if n is None:
        z = rng.normal(factor.dim)
        return mean + factor.lower @ z
    z = rng.normal((n, factor.dim))
    return mean[None, :] + z @ factor.lower.T


# ------------------------------------------------------------ grad checking


def grad_check(f, params, eps=1e-5):
    """Max relative error between analytic and central-difference gradients.

    ``f(params)`` must return ``(value, grads)`` with one gradient array per
    parameter array. Parameters are perturbed in place and restored.
    The error per entry is ``|analytic - numeric| / max(1, |numeric|)``.
    """
    params = [np.asarray(p) for p in params]
    value, analytic = f(params)
    if not np.isfinite(value):
        raise NumericError("f is not finite at the base point")
    worst = 0.0
    for p, g in zip(params, analytic):
        g = np.asarray(g, dtype=np.float64)
        if g.shape != p.shape:
            raise ShapeError(f"gradient shape {g.shape} != parameter shape {p.shape}")
        flat = p.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            up = f(params)[0]
            flat[i] = orig - eps
            down = f(params)[0]
            flat[i] = orig
            if not (np.isfinite(up) and np.isfinite(down)):
                raise NumericError(f"f is not finite at perturbed entry {i}")
            numeric = (up - down) / (2.0 * eps)
            err = abs(gflat[i] - numeric) / max(1.0, abs(numeric))
            worst = max(worst, err)
    return worst


# ------------------------------------------------------------ SMPMAT01 files


def encode_matrix(a):
    a = as_matrix(a)
    header = MAT_MAGIC + struct.pack("<QQ", a.shape[0], a.shape[1])
    return header + np.ascontiguousarray(a, dtype="<f8").tobytes()


def decode_matrix(buf, source="<bytes>"):
    if len(buf) < 24 or buf[:8] != MAT_MAGIC:
        raise CorruptionError(f"{source}: missing SMPMAT01 header")
    rows, cols = struct.unpack("<QQ", buf[8:24])
    expected = 24 + 8 * rows * cols
    if len(buf) != expected:
        raise CorruptionError(f"{source}: expected {expected} bytes, found {len(buf)}")
    return np.frombuffer(buf, dtype="<f8", offset=24).reshape(rows, cols).astype(np.float64)


def save_matrix(path, a):
    data = encode_matrix(a)
    Path(path).write_bytes(data)
    return hashlib.sha256(data).hexdigest()


def load_matrix(path):
    path = Path(path)
    return decode_matrix(path.read_bytes(), str(path))


def sha256_file(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
