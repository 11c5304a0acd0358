"""HTTP service exposing dictionary generation and tree-based searches.

Artifacts live in an in-memory registry keyed by short ids; batch
experiments stay in the CLI, which talks to the library directly.
"""

from __future__ import annotations

import itertools
import threading

import numpy as np
from fastapi import FastAPI, HTTPException
from pydantic import BaseModel, Field

from .covertree import build as build_covertree
from .dictionary import ParameterGrid, generate_fingerprints


class GridSpec(BaseModel):
    t1: list
    t2: list
    b0: list
    tr_ms: float = Field(gt=0)
    L: int = Field(ge=2)


class DictionaryInfo(BaseModel):
    id: str
    d: int
    L: int
    tr_ms: float


class TreeBuildRequest(BaseModel):
    dictionary_id: str


class TreeInfo(BaseModel):
    id: str
    dictionary_id: str
    n_points: int
    sigma: float
    i_max: int


class SearchRequest(BaseModel):
    query_real: list[float]
    query_imag: list[float] | None = None
    epsilon: float = Field(default=0.0, ge=0)
    warm_start: int | None = None


class AtomParams(BaseModel):
    t1_ms: float
    t2_ms: float
    b0_hz: float


class SearchResponse(BaseModel):
    index: int
    distance: float
    cost: int
    params: AtomParams


class CheckResponse(BaseModel):
    ok: bool
    violations: list[str]


app = FastAPI(title="coverblip")

_dicts = {}
_trees = {}
_counter = itertools.count(1)
_lock = threading.Lock()


def _dict_or_404(dict_id):
    if dict_id not in _dicts:
        raise HTTPException(404, f"no dictionary {dict_id!r}")
    return _dicts[dict_id]


def _tree_or_404(tree_id):
    if tree_id not in _trees:
        raise HTTPException(404, f"no tree {tree_id!r}")
    return _trees[tree_id]


@app.get("/health")
def health():
    return {"status": "ok"}


@app.post("/dictionaries", response_model=DictionaryInfo)
def create_dictionary(spec: GridSpec):
    def axis(v):
        return [tuple(x) if isinstance(x, list) else x for x in v]
    try:
        grid = ParameterGrid(axis(spec.t1), axis(spec.t2), axis(spec.b0))
        d = generate_fingerprints(grid, spec.tr_ms, spec.L)
    except ValueError as e:
        raise HTTPException(400, str(e)) from None
    with _lock:
        did = f"d{next(_counter)}"
        _dicts[did] = d
    return DictionaryInfo(id=did, d=d.d, L=d.L, tr_ms=d.tr_ms)


@app.get("/dictionaries/{dict_id}", response_model=DictionaryInfo)
def get_dictionary(dict_id: str):
    d = _dict_or_404(dict_id)
    return DictionaryInfo(id=dict_id, d=d.d, L=d.L, tr_ms=d.tr_ms)


@app.post("/trees", response_model=TreeInfo)
def create_tree(req: TreeBuildRequest):
    d = _dict_or_404(req.dictionary_id)
    t = build_covertree(d.atoms)
    with _lock:
        tid = f"t{next(_counter)}"
        _trees[tid] = (t, req.dictionary_id)
    return TreeInfo(id=tid, dictionary_id=req.dictionary_id,
                    n_points=t.n_points, sigma=t.sigma, i_max=t.i_max)


@app.post("/trees/{tree_id}/search", response_model=SearchResponse)
def search_tree(tree_id: str, req: SearchRequest):
    t, did = _tree_or_404(tree_id)
    d = _dicts[did]
    q = np.asarray(req.query_real, dtype=float)
    if req.query_imag is not None:
        if len(req.query_imag) != len(req.query_real):
            raise HTTPException(400, "query part length mismatch")
        q = q + 1j * np.asarray(req.query_imag, dtype=float)
    if len(q) != d.L:
        raise HTTPException(400, f"query must have {d.L} entries")
    if req.warm_start is not None and not 0 <= req.warm_start < d.d:
        raise HTTPException(400, "warm_start out of range")
    r = t.ann_search(q, req.epsilon, warm_start=req.warm_start)
    t1, t2, b0 = d.lookup(r.index)
    return SearchResponse(index=r.index, distance=r.distance, cost=r.cost,
                          params=AtomParams(t1_ms=t1, t2_ms=t2, b0_hz=b0))


@app.get("/trees/{tree_id}/check", response_model=CheckResponse)
def check_tree(tree_id: str):
    t, _ = _tree_or_404(tree_id)
    violations = t.verify_invariants()
    return CheckResponse(ok=not violations, violations=violations)
