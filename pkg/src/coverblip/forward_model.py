"""Linear acquisition operators with exact adjoints.

Two operator kinds are provided: a Cartesian per-frame subsampled unitary
2-D DFT (optionally with coil sensitivity maps) for imaging experiments,
and a dense random Gaussian operator for embedding checks.  Sample weights
can be attached to an operator but are consumed only by the solver's
weighted gradient so that apply/adjoint stay a true adjoint pair.
"""

from __future__ import annotations

import itertools
import json
import struct
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial.distance import cdist

__all__ = [
    "ForwardOperator",
    "MrfImage",
    "SamplingPattern",
    "estimate_bilipschitz",
    "estimate_spectral_norm",
    "load_measurements",
    "load_pattern",
    "make_cartesian_operator",
    "make_epi_pattern",
    "make_gaussian_operator",
    "save_measurements",
    "save_pattern",
]

_MEAS_MAGIC = b"CBMEAS01"


@dataclass
class MrfImage:
    """Spatio-temporal image: row v is voxel v, column t is frame t."""

    data: np.ndarray            # n x L complex
    spatial_shape: tuple[int, int]

    def __post_init__(self):
        h, w = self.spatial_shape
        if self.data.shape[0] != h * w:
            raise ValueError("spatial shape does not match number of voxels")
        if not np.all(np.isfinite(self.data)):
            raise ValueError("image contains non-finite entries")


@dataclass
class SamplingPattern:
    """Per-frame sets of sampled flat voxel indices, constant size m."""

    indices: np.ndarray          # L x m int
    spatial_shape: tuple[int, int]
    lines_per_frame: int | None = None   # set when built by make_epi_pattern

    def __post_init__(self):
        self.indices = np.asarray(self.indices, dtype=np.int64)
        h, w = self.spatial_shape
        n = h * w
        if self.indices.ndim != 2:
            raise ValueError("indices must be an L x m array")
        if self.indices.min() < 0 or self.indices.max() >= n:
            raise ValueError("sample index out of range")
        for t in range(self.indices.shape[0]):
            if len(np.unique(self.indices[t])) != self.indices.shape[1]:
                raise ValueError(f"duplicate sample index in frame {t}")

    @property
    def L(self) -> int:
        return self.indices.shape[0]

    @property
    def m(self) -> int:
        return self.indices.shape[1]


@dataclass
class ForwardOperator:
    """A = P_Omega F S (cartesian) or a dense Gaussian matrix per frame."""

    kind: str                                 # cartesian_dft | dense_gaussian
    n: int
    m: int
    L: int
    c: int = 1
    pattern: SamplingPattern | None = None
    coil_maps: np.ndarray | None = None       # c x n complex
    weights: np.ndarray | None = None         # loss weights, solver-side only
    matrix: np.ndarray | None = None          # m x n, or L x m x n per frame
    identity_transform: bool = False          # test hook: skip the DFT
    spatial_shape: tuple[int, int] | None = None

    def __post_init__(self):
        if self.kind not in ("cartesian_dft", "dense_gaussian"):
            raise ValueError(f"unknown operator kind {self.kind!r}")
        if self.kind == "cartesian_dft":
            if self.pattern is None:
                raise ValueError("cartesian operator needs a pattern")
            self.spatial_shape = self.pattern.spatial_shape
            if self.coil_maps is None:
                self.coil_maps = np.ones((self.c, self.n), dtype=complex)
            elif self.coil_maps.shape != (self.c, self.n):
                raise ValueError("coil map shape mismatch")
        else:
            if self.matrix is None:
                raise ValueError("gaussian operator needs a matrix")
        if self.weights is not None and np.any(self.weights < 0):
            raise ValueError("weights must be nonnegative")

    def _check_image(self, X: np.ndarray) -> np.ndarray:
        X = np.asarray(X)
        if X.shape != (self.n, self.L):
            raise ValueError(
                f"dimension mismatch: expected {(self.n, self.L)} image, "
                f"got {X.shape}")
        return X.astype(complex, copy=False)

    def apply(self, X) -> np.ndarray:
        """Forward map to measurements of shape (c*m, L)."""
        if isinstance(X, MrfImage):
            X = X.data
        X = self._check_image(X)
        if self.kind == "dense_gaussian":
            if self.matrix.ndim == 2:
                return self.matrix @ X
            return np.einsum("tmn,nt->mt", self.matrix, X)
        h, w = self.spatial_shape
        idx = self.pattern.indices.T            # m x L
        out = np.empty((self.c * self.m, self.L), dtype=complex)
        for ci in range(self.c):
            sx = X * self.coil_maps[ci][:, None]
            if not self.identity_transform:
                sx = np.fft.fft2(sx.reshape(h, w, self.L), axes=(0, 1),
                                 norm="ortho").reshape(self.n, self.L)
            out[ci * self.m:(ci + 1) * self.m] = np.take_along_axis(
                sx, idx, axis=0)
        return out

    def adjoint(self, Y: np.ndarray) -> np.ndarray:
        """Exact adjoint of apply; returns an n x L image."""
        Y = np.asarray(Y)
        if Y.shape != (self.c * self.m, self.L):
            raise ValueError(
                f"dimension mismatch: expected {(self.c * self.m, self.L)} "
                f"measurements, got {Y.shape}")
        Y = Y.astype(complex, copy=False)
        if self.kind == "dense_gaussian":
            if self.matrix.ndim == 2:
                return self.matrix.conj().T @ Y
            return np.einsum("tmn,mt->nt", self.matrix.conj(), Y)
        h, w = self.spatial_shape
        idx = self.pattern.indices.T
        X = np.zeros((self.n, self.L), dtype=complex)
        for ci in range(self.c):
            K = np.zeros((self.n, self.L), dtype=complex)
            np.put_along_axis(K, idx, Y[ci * self.m:(ci + 1) * self.m],
                              axis=0)
            if not self.identity_transform:
                K = np.fft.ifft2(K.reshape(h, w, self.L), axes=(0, 1),
                                 norm="ortho").reshape(self.n, self.L)
            X += K * self.coil_maps[ci].conj()[:, None]
        return X


def make_epi_pattern(spatial_shape: tuple[int, int], lines_per_frame: int,
                     L: int) -> SamplingPattern:
    """Frame t samples `lines_per_frame` full k-space rows with uniform
    spacing, cyclically shifted by one row per frame."""
    h, w = spatial_shape
    k = lines_per_frame
    if k > h:
        raise ValueError("lines_per_frame exceeds grid height")
    if k < 1 or L < 1:
        raise ValueError("lines_per_frame and L must be positive")
    spacing = h // k
    cols = np.arange(w)
    frames = []
    for t in range(L):
        rows = (t % spacing + spacing * np.arange(k)) % h
        frames.append((rows[:, None] * w + cols[None, :]).ravel())
    return SamplingPattern(indices=np.array(frames),
                           spatial_shape=spatial_shape, lines_per_frame=k)


def make_cartesian_operator(pattern: SamplingPattern, coil_maps=None,
                            weights=None,
                            identity_transform=False) -> ForwardOperator:
    h, w = pattern.spatial_shape
    c = 1 if coil_maps is None else coil_maps.shape[0]
    return ForwardOperator(kind="cartesian_dft", n=h * w, m=pattern.m,
                           L=pattern.L, c=c, pattern=pattern,
                           coil_maps=coil_maps, weights=weights,
                           identity_transform=identity_transform)


def make_gaussian_operator(n: int, m: int, L: int, seed: int,
                           per_frame: bool = False) -> ForwardOperator:
    """Dense i.i.d. complex Gaussian operator with E||A(X)||^2 = ||X||^2."""
    rng = np.random.default_rng(seed)
    shape = (L, m, n) if per_frame else (m, n)
    mat = (rng.standard_normal(shape) + 1j * rng.standard_normal(shape))
    mat /= np.sqrt(2.0) * np.sqrt(m)
    return ForwardOperator(kind="dense_gaussian", n=n, m=m, L=L, matrix=mat)


def estimate_spectral_norm(A: ForwardOperator, seed: int = 0,
                           rel_tol: float = 1e-8,
                           max_iters: int = 1000) -> float:
    """Spectral norm |||A||| by power iteration on A^H A."""
    rng = np.random.default_rng(seed)
    X = rng.standard_normal((A.n, A.L)) + 1j * rng.standard_normal((A.n, A.L))
    X /= np.linalg.norm(X)
    est = 0.0
    for _ in range(max_iters):
        W = A.adjoint(A.apply(X))
        lam = np.linalg.norm(W)
        if lam == 0.0:
            return 0.0
        new = float(np.sqrt(lam))
        X = W / lam
        if abs(new - est) <= rel_tol * max(new, 1e-300):
            return new
        est = new
    return est


def _random_cone_image(rng, atoms, n):
    """One image with every voxel a random positively scaled atom."""
    js = rng.integers(atoms.shape[0], size=n)
    scales = 0.1 + np.abs(rng.standard_normal(n))
    return scales[:, None] * atoms[js]


def estimate_bilipschitz(A: ForwardOperator, dictionary, n_pairs: int,
                         seed: int = 0,
                         exhaustive: bool | None = None):
    """Empirical bi-Lipschitz bounds min/max ||A(x-x')||^2 / ||x-x'||^2
    over pairs of dictionary-cone images.

    Sampled mode draws `n_pairs` random pairs.  Exhaustive mode (auto for
    n <= 4 and d <= 8) evaluates every pair built from all atom
    assignments combined with a small sampled positive scale set.
    """
    if n_pairs < 1:
        raise ValueError("n_pairs must be at least 1")
    atoms = dictionary.atoms
    d = atoms.shape[0]
    rng = np.random.default_rng(seed)
    if exhaustive is None:
        exhaustive = A.n <= 4 and d <= 8
    if exhaustive:
        if d ** A.n > 4096:
            raise ValueError("instance too large for exhaustive mode")
        scale_set = 0.1 + np.abs(rng.standard_normal((3, A.n)))
        pool = [s[:, None] * atoms[list(assign)]
                for assign in itertools.product(range(d), repeat=A.n)
                for s in scale_set]
        images = np.array(pool)
        transformed = np.array([A.apply(x) for x in images])
        flat_x = images.reshape(len(pool), -1)
        flat_y = transformed.reshape(len(pool), -1)
        dx = (cdist(flat_x.real, flat_x.real, "sqeuclidean")
              + cdist(flat_x.imag, flat_x.imag, "sqeuclidean"))
        dy = (cdist(flat_y.real, flat_y.real, "sqeuclidean")
              + cdist(flat_y.imag, flat_y.imag, "sqeuclidean"))
        iu = np.triu_indices(len(pool), k=1)
        num, den = dy[iu], dx[iu]
        keep = den > 0
        ratios = num[keep] / den[keep]
    else:
        ratios = []
        for _ in range(n_pairs):
            x1 = _random_cone_image(rng, atoms, A.n)
            x2 = _random_cone_image(rng, atoms, A.n)
            den = np.linalg.norm(x1 - x2) ** 2
            if den == 0.0:
                continue
            ratios.append(np.linalg.norm(A.apply(x1 - x2)) ** 2 / den)
        ratios = np.array(ratios)
    if len(ratios) == 0:
        raise ValueError("no usable pairs (all differences were zero)")
    return float(ratios.min()), float(ratios.max())


def save_pattern(pattern: SamplingPattern, path) -> None:
    """JSON description of an EPI-style pattern (generative parameters)."""
    if pattern.lines_per_frame is None:
        raise ValueError("only EPI-style patterns can be saved as JSON")
    h, w = pattern.spatial_shape
    with open(path, "w") as fh:
        json.dump({"h": h, "w": w, "L": pattern.L,
                   "lines_per_frame": pattern.lines_per_frame,
                   "offset_rule": "cyclic"}, fh)


def load_pattern(path) -> SamplingPattern:
    with open(path) as fh:
        spec = json.load(fh)
    if spec.get("offset_rule") != "cyclic":
        raise ValueError("unknown offset rule in pattern file")
    return make_epi_pattern((spec["h"], spec["w"]), spec["lines_per_frame"],
                            spec["L"])


def save_measurements(Y: np.ndarray, path) -> None:
    """Binary dump of a complex measurement matrix."""
    with open(path, "wb") as fh:
        fh.write(_MEAS_MAGIC)
        fh.write(struct.pack("<qq", *Y.shape))
        fh.write(np.ascontiguousarray(Y, dtype="<c16").tobytes())


def load_measurements(path) -> np.ndarray:
    with open(path, "rb") as fh:
        if fh.read(len(_MEAS_MAGIC)) != _MEAS_MAGIC:
            raise ValueError("not a measurement file")
        header = fh.read(16)
        if len(header) != 16:
            raise ValueError("truncated measurement file")
        rows, cols = struct.unpack("<qq", header)
        blob = fh.read()
        if len(blob) < rows * cols * 16:
            raise ValueError("truncated measurement file")
        return np.frombuffer(blob, dtype="<c16").reshape(rows, cols).copy()
