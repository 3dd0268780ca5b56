"""Descriptor-based loop candidate retrieval between chunks."""
from dataclasses import dataclass

import numpy as np

from ..errors import ShapeError

__all__ = ["LoopCandidate", "detect_loops"]


@dataclass(frozen=True)
class LoopCandidate:
    i: int
    j: int
    score: float
    gap: float


def detect_loops(descriptors, min_gap, score_threshold, positions=None, max_candidates=None):
    """All pairs ``i < j`` with temporal gap ``>= min_gap`` and cosine score ``>= score_threshold``.

    ``positions`` gives each chunk's temporal location (e.g. its centre frame);
    it defaults to the chunk index. Results are sorted by descending score,
    ties broken by ``(i, j)``.
    """
    desc = np.asarray(descriptors, dtype=np.float64)
    if desc.ndim != 2:
        raise ShapeError(f"descriptors must be (n, dim), got {desc.shape}")
    n = len(desc)
    pos = np.arange(n, dtype=np.float64) if positions is None else np.asarray(positions, float)
    if pos.shape != (n,):
        raise ShapeError("positions must have one entry per descriptor")
    norms = np.linalg.norm(desc, axis=1)
    unit = np.divide(desc, norms[:, None], out=np.zeros_like(desc), where=norms[:, None] > 0)
    sim = np.clip(unit @ unit.T, -1.0, 1.0)
    ii, jj = np.triu_indices(n, k=1)
    gaps = np.abs(pos[jj] - pos[ii])
    scores = sim[ii, jj]
    ok = (gaps >= min_gap) & (norms[ii] > 0) & (norms[jj] > 0) & (scores >= score_threshold)
    found = [
        LoopCandidate(int(i), int(j), float(sc), float(g))
        for i, j, sc, g in zip(ii[ok], jj[ok], scores[ok], gaps[ok])
    ]
    found.sort(key=lambda c: (-c.score, c.i, c.j))
    if max_candidates is not None:
        found = found[:max_candidates]
    return found
