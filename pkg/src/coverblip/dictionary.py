"""Fingerprint dictionary generation, lookup and SVD subspace compression.

Atoms are analytic surrogate trajectories parametrized by (T1, T2, B0):

    D(t) = (1 - 2 exp(-t*TR/T1)) * exp(-t*TR/T2) * exp(i*2*pi*B0*t*TR/1000)

for t = 1..L with TR in msec and B0 in Hz, then normalized to unit
Euclidean norm.  The model keeps the property that matters for tree
searches: a low-dimensional nonlinear manifold embedded in C^L.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "CompressedDictionary",
    "Dictionary",
    "ParameterGrid",
    "generate_fingerprints",
    "load_dictionary",
    "save_dictionary",
    "svd_compress",
]

_MAGIC = b"CBDICT01"


def _parse_axis(values) -> np.ndarray:
    """Accept a flat list or a list of [start, stop, step] range triples."""
    if len(values) and isinstance(values[0], (list, tuple)):
        parts = [np.arange(a, b + 0.5 * abs(c), c) for a, b, c in values]
        values = np.concatenate(parts)
    return np.asarray(values, dtype=float)


@dataclass
class ParameterGrid:
    """Quantization grids for the three encoded parameters.

    T1/T2 are in msec, B0 in Hz.  Combinations with T2 > T1 are dropped
    at generation time as unphysical.
    """

    t1_values: np.ndarray
    t2_values: np.ndarray
    b0_values: np.ndarray

    def __post_init__(self):
        self.t1_values = _parse_axis(self.t1_values)
        self.t2_values = _parse_axis(self.t2_values)
        self.b0_values = _parse_axis(self.b0_values)
        for name, ax in (("t1", self.t1_values), ("t2", self.t2_values),
                         ("b0", self.b0_values)):
            if ax.size == 0:
                raise ValueError(f"empty {name} axis")
            if np.any(np.diff(ax) <= 0):
                raise ValueError(f"{name} axis must be strictly increasing")
        if np.any(self.t1_values <= 0) or np.any(self.t2_values <= 0):
            raise ValueError("relaxation times must be positive")

    def combinations(self) -> np.ndarray:
        """All (T1, T2, B0) triples with T2 <= T1, in grid order."""
        t1, t2, b0 = np.meshgrid(self.t1_values, self.t2_values,
                                 self.b0_values, indexing="ij")
        triples = np.stack([t1.ravel(), t2.ravel(), b0.ravel()], axis=1)
        return triples[triples[:, 1] <= triples[:, 0]]


@dataclass
class Dictionary:
    """Unit-normalized fingerprint atoms plus their parameter lookup table."""

    atoms: np.ndarray            # d x L complex, unit rows
    norms: np.ndarray            # pre-normalization norms, length d
    lookup_table: np.ndarray     # d x 3 float (T1, T2, B0)
    tr_ms: float
    L: int

    @property
    def d(self) -> int:
        return self.atoms.shape[0]

    def lookup(self, j: int) -> tuple[float, float, float]:
        """Parameter triple (T1, T2, B0) that generated atom ``j``."""
        if not 0 <= j < self.d:
            raise IndexError(f"atom index {j} out of range [0, {self.d})")
        t1, t2, b0 = self.lookup_table[j]
        return float(t1), float(t2), float(b0)

    def export_lookup_csv(self, path) -> None:
        np.savetxt(path, self.lookup_table, delimiter=",",
                   header="t1_ms,t2_ms,b0_hz", comments="")


@dataclass
class CompressedDictionary:
    """Dictionary projected on the top-s SVD subspace of the atom matrix."""

    basis: np.ndarray             # L x s, orthonormal columns
    atoms_compressed: np.ndarray  # d x s complex, renormalized unit rows
    renorm_factors: np.ndarray    # norms of the raw projections, length d
    s: int
    parent: Dictionary = field(repr=False)

    @property
    def d(self) -> int:
        return self.atoms_compressed.shape[0]

    def lookup(self, j: int) -> tuple[float, float, float]:
        return self.parent.lookup(j)

    def compress(self, rows: np.ndarray) -> np.ndarray:
        """Project L-dimensional rows onto the subspace coordinates."""
        return rows @ self.basis

    def decompress(self, rows_c: np.ndarray) -> np.ndarray:
        """Lift s-dimensional coordinate rows back to C^L."""
        return rows_c @ self.basis.conj().T

    def residual(self) -> float:
        """Total squared reconstruction error sum_j ||D_j - V_s V_s^H D_j||^2."""
        raw = self.atoms_compressed * self.renorm_factors[:, None]
        diff = self.parent.atoms - self.decompress(raw)
        return float(np.sum(np.abs(diff) ** 2))


def fingerprint_trajectories(params: np.ndarray, tr_ms: float,
                             L: int) -> np.ndarray:
    """Raw (unnormalized) trajectories for rows of (T1, T2, B0) triples."""
    params = np.atleast_2d(np.asarray(params, dtype=float))
    t = np.arange(1, L + 1, dtype=float)
    t1 = params[:, 0:1]
    t2 = params[:, 1:2]
    b0 = params[:, 2:3]
    envelope = (1.0 - 2.0 * np.exp(-t * tr_ms / t1)) * np.exp(-t * tr_ms / t2)
    phase = np.exp(2j * np.pi * b0 * t * tr_ms / 1000.0)
    return envelope * phase


def generate_fingerprints(grid: ParameterGrid, tr_ms: float,
                          L: int) -> Dictionary:
    """Generate a unit-normalized dictionary over the grid's combinations."""
    if tr_ms <= 0:
        raise ValueError("TR must be positive")
    if L < 2:
        raise ValueError("sequence length must be at least 2")
    triples = grid.combinations()
    if len(triples) == 0:
        raise ValueError("degenerate grid: no combinations with T2 <= T1")
    raw = fingerprint_trajectories(triples, tr_ms, L)
    norms = np.linalg.norm(raw, axis=1)
    if np.any(norms == 0):
        raise ValueError("degenerate grid: zero-norm fingerprint")
    atoms = raw / norms[:, None]
    return Dictionary(atoms=atoms, norms=norms, lookup_table=triples,
                      tr_ms=float(tr_ms), L=int(L))


def svd_compress(dictionary: Dictionary, s: int) -> CompressedDictionary:
    """Project atoms onto the s dominant SVD components of the atom matrix.

    The basis holds the dominant right singular vectors of the d x L atom
    matrix.  For d*L beyond ~1e7 entries it is found from the L x L second
    moment matrix of the atoms instead of a dense SVD.
    """
    if not 1 <= s <= dictionary.L:
        raise ValueError(f"s must be in [1, {dictionary.L}], got {s}")
    M = dictionary.atoms
    if M.size <= 10 ** 7:
        _, _, vh = np.linalg.svd(M, full_matrices=False)
        basis = vh.conj().T[:, :s]
    else:
        gram = np.zeros((dictionary.L, dictionary.L), dtype=complex)
        step = max(1, 10 ** 7 // dictionary.L)
        for lo in range(0, dictionary.d, step):
            block = M[lo:lo + step]
            gram += block.T @ block.conj()
        vals, vecs = np.linalg.eigh(gram)
        basis = vecs[:, ::-1][:, :s].conj()
    raw = M @ basis
    factors = np.linalg.norm(raw, axis=1)
    return CompressedDictionary(basis=basis,
                                atoms_compressed=raw / factors[:, None],
                                renorm_factors=factors, s=int(s),
                                parent=dictionary)


def save_dictionary(dictionary: Dictionary, path) -> None:
    """Versioned binary container: header, complex atoms, lookup columns."""
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<qqd", dictionary.d, dictionary.L,
                             dictionary.tr_ms))
        fh.write(np.ascontiguousarray(dictionary.atoms, dtype="<c16").tobytes())
        fh.write(np.ascontiguousarray(dictionary.norms, dtype="<f8").tobytes())
        fh.write(np.ascontiguousarray(dictionary.lookup_table,
                                      dtype="<f8").tobytes())


def load_dictionary(path) -> Dictionary:
    with open(path, "rb") as fh:
        if fh.read(len(_MAGIC)) != _MAGIC:
            raise ValueError("not a dictionary file")
        header = fh.read(struct.calcsize("<qqd"))
        if len(header) != struct.calcsize("<qqd"):
            raise ValueError("truncated dictionary file")
        d, L, tr_ms = struct.unpack("<qqd", header)
        blob = fh.read()
        need = d * L * 16 + d * 8 + d * 3 * 8
        if len(blob) < need:
            raise ValueError("truncated dictionary file")
        atoms = np.frombuffer(blob[:d * L * 16], dtype="<c16").reshape(d, L)
        off = d * L * 16
        norms = np.frombuffer(blob[off:off + d * 8], dtype="<f8")
        off += d * 8
        lookup = np.frombuffer(blob[off:off + d * 24],
                               dtype="<f8").reshape(d, 3)
    return Dictionary(atoms=np.array(atoms), norms=np.array(norms),
                      lookup_table=np.array(lookup), tr_ms=float(tr_ms),
                      L=int(L))
