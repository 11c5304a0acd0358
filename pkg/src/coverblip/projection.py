"""Per-voxel projection onto the cone of unit-norm dictionary atoms.

Each voxel row Z_v is replaced by gamma_v * D_{j*} where j* is the
(approximately) nearest unit atom and gamma_v = max(Re<Z_v, D_{j*}>, 0).
The exact variant scans all atoms through one Gram product; the tree
variant runs a per-voxel approximate search with warm starts.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = ["ConeProjection", "project_cone_ann", "project_cone_exact"]


@dataclass
class ConeProjection:
    indices: np.ndarray      # n chosen atom ids
    gammas: np.ndarray       # n nonnegative scales
    projected: np.ndarray    # n x dim complex, row v = gammas[v]*atoms[j_v]
    cost: int                # distance evaluations spent


def _atoms_of(dictionary) -> np.ndarray:
    if hasattr(dictionary, "atoms"):
        return dictionary.atoms
    return dictionary.atoms_compressed


def _as_array(Z) -> np.ndarray:
    if hasattr(Z, "data"):
        Z = Z.data
    return np.asarray(Z)


def _gammas_for(Z: np.ndarray, atoms: np.ndarray,
                indices: np.ndarray) -> np.ndarray:
    # one shared expression so exact and tree projections agree bitwise
    raw = np.einsum("ij,ij->i", Z, atoms[indices].conj()).real
    return np.maximum(raw, 0.0)


def project_cone_exact(Z, dictionary) -> ConeProjection:
    """Brute-force cone projection; cost is n*d distance evaluations.

    For unit atoms the nearest-atom search reduces to maximizing the real
    inner product, which one matrix product delivers for all voxels.
    """
    Z = _as_array(Z)
    atoms = _atoms_of(dictionary)
    if Z.ndim != 2 or Z.shape[1] != atoms.shape[1]:
        raise ValueError(
            f"dimension mismatch: image is {Z.shape}, atoms are "
            f"{atoms.shape}")
    # chunk the Gram product so huge n*d instances stay in memory
    block = max(1, 5 * 10 ** 7 // max(atoms.shape[0], 1))
    indices = np.empty(Z.shape[0], dtype=np.int64)
    for lo in range(0, Z.shape[0], block):
        corr = (Z[lo:lo + block] @ atoms.conj().T).real
        indices[lo:lo + block] = np.argmax(corr, axis=1)
    gammas = _gammas_for(Z, atoms, indices)
    projected = gammas[:, None] * atoms[indices]
    return ConeProjection(indices=indices, gammas=gammas,
                          projected=projected,
                          cost=Z.shape[0] * atoms.shape[0])


def project_cone_ann(Z, tree, dictionary, epsilon: float,
                     prev: ConeProjection | None = None) -> ConeProjection:
    """Cone projection through the tree's approximate search.

    Queries are normalized rows Z_v/||Z_v||; the previous iteration's atom
    (when given) seeds the search, so the chosen atom is never farther
    from the query than the previous one.  Zero rows project to zero and
    keep the previous index for warm-start continuity.
    """
    Z = _as_array(Z)
    atoms = _atoms_of(dictionary)
    if Z.ndim != 2 or Z.shape[1] != atoms.shape[1]:
        raise ValueError(
            f"dimension mismatch: image is {Z.shape}, atoms are "
            f"{atoms.shape}")
    n = Z.shape[0]
    indices = np.zeros(n, dtype=np.int64)
    cost = 0
    norms = np.linalg.norm(Z, axis=1)
    zero = norms == 0.0
    for v in range(n):
        warm = int(prev.indices[v]) if prev is not None else None
        if zero[v]:
            indices[v] = warm if warm is not None else 0
            continue
        r = tree.ann_search(Z[v] / norms[v], epsilon, warm_start=warm)
        cost += r.cost
        indices[v] = r.index
    gammas = _gammas_for(Z, atoms, indices)
    gammas[zero] = 0.0
    projected = gammas[:, None] * atoms[indices]
    return ConeProjection(indices=indices, gammas=gammas,
                          projected=projected, cost=cost)
