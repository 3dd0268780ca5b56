"""Chunk partitioning and synchronized memory updates across simulated workers.

Every memory layer acts as a barrier: each worker computes the inner-loop
gradient of its own chunks, the per-chunk gradients are summed into a single
update and broadcast, and only then does any worker read its memory. The
sum is folded in ascending chunk order, so results do not depend on the
number of workers, on the chunk-to-worker assignment, or on thread
scheduling.
"""
import hashlib
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .backbone import Backbone
from .errors import ConfigError, InputError, ProtocolError, ShapeError
from .gcm import apply_gradient, local_update

__all__ = [
    "Partition",
    "partition",
    "WorkerGroup",
    "ReduceMessage",
    "local_gradients",
    "all_reduce",
    "synchronized_step",
    "PipelineResult",
    "run_pipeline",
    "sequential_mode",
]

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class Partition:
    """Overlapping chunks as 1-based inclusive ``(start, end)`` frame ranges."""

    n_frames: int
    chunk_size: int
    overlap: int
    chunks: tuple

    def __len__(self):
        return len(self.chunks)

    def frames(self, k):
        """0-based frame indices of chunk ``k`` (0-based chunk index)."""
        start, end = self.chunks[k]
        return np.arange(start - 1, end)

    def shared(self, a, b):
        return np.intersect1d(self.frames(a), self.frames(b))

    def centre(self, k):
        start, end = self.chunks[k]
        return 0.5 * (start + end) - 1.0


def partition(n_frames, chunk_size, overlap):
    """Chunk ``k`` (1-based) spans ``[(k-1)(M-O)+1, (k-1)(M-O)+M]``.

    The final chunk is clamped to end at ``N`` and shifted back to keep its
    full length, so the last overlap can exceed ``O``.
    """
    n, m, o = int(n_frames), int(chunk_size), int(overlap)
    if n < 1:
        raise InputError(f"need at least one frame, got {n}")
    if m < 1 or o < 0:
        raise ConfigError(f"invalid chunk size {m} / overlap {o}")
    if o >= m:
        raise ConfigError(f"overlap {o} must be smaller than chunk size {m}")
    if m >= n:
        return Partition(n, m, o, ((1, n),))
    step = m - o
    chunks = []
    k = 1
    while True:
        start = (k - 1) * step + 1
        end = start + m - 1
        if end >= n:
            chunks.append((max(1, n - m + 1), n))
            break
        chunks.append((start, end))
        k += 1
    return Partition(n, m, o, tuple(chunks))


@dataclass(frozen=True)
class WorkerGroup:
    """Chunk-to-worker assignment plus synchronization scopes.

    ``groups`` lists worker ids that share one memory replica set; by
    default all workers synchronize together.
    """

    n_workers: int
    assignment: tuple
    groups: tuple = None

    def __post_init__(self):
        if self.n_workers < 1:
            raise ConfigError("worker count must be >= 1")
        if any(w < 0 or w >= self.n_workers for w in self.assignment):
            raise ConfigError(f"assignment {self.assignment} references unknown workers")
        groups = self.groups
        if groups is None:
            groups = (tuple(range(self.n_workers)),)
        groups = tuple(tuple(sorted(g)) for g in groups)
        flat = sorted(w for g in groups for w in g)
        if flat != list(range(self.n_workers)):
            raise ConfigError("groups must partition the worker ids")
        object.__setattr__(self, "assignment", tuple(int(w) for w in self.assignment))
        object.__setattr__(self, "groups", groups)

    @classmethod
    def contiguous(cls, n_chunks, n_workers, groups=None):
        assignment = tuple(min(k * n_workers // n_chunks, n_workers - 1) for k in range(n_chunks))
        return cls(n_workers, assignment, groups)

    def chunks_of(self, worker):
        return [k for k, w in enumerate(self.assignment) if w == worker]

    def group_of(self, worker):
        for gi, g in enumerate(self.groups):
            if worker in g:
                return gi
        raise ConfigError(f"worker {worker} is in no group")


@dataclass(frozen=True)
class ReduceMessage:
    """Per-chunk gradients one worker contributes to one memory layer."""

    layer: int
    worker: int
    chunk_ids: tuple
    payloads: tuple

    def __post_init__(self):
        if len(self.chunk_ids) != len(self.payloads):
            raise ProtocolError("one payload per chunk id is required")

    @property
    def payload(self):
        if not self.payloads:
            return None
        total = self.payloads[0]
        for g in self.payloads[1:]:
            total = total + g
        return total

    def checksum(self):
        h = hashlib.sha256()
        for g in self.payloads:
            h.update(g.checksum().encode())
        return h.hexdigest()[:16]

    def trace_line(self):
        chunks = ",".join(str(c) for c in self.chunk_ids) or "-"
        return f"layer={self.layer} worker={self.worker} chunks={chunks} checksum={self.checksum()}"


def local_gradients(worker, layer, chunk_ids, memory_inputs, state):
    """Inner gradients of ``worker``'s chunks for one memory layer.

    ``memory_inputs`` maps chunk id to the ``(F, P, d)`` or ``(M, d)`` tokens
    entering the memory. Returns ``(message, queries)``.
    """
    grads, queries = [], {}
    for cid in sorted(chunk_ids):
        y = np.asarray(memory_inputs[cid], dtype=np.float64)
        if y.size == 0:
            raise InputError(f"chunk {cid} has no tokens")
        tokens = y.reshape(-1, y.shape[-1])
        q, g = local_update(state, tokens)
        queries[cid] = q
        grads.append(g)
    return ReduceMessage(layer, worker, tuple(sorted(chunk_ids)), tuple(grads)), queries


def all_reduce(messages, workers=None):
    """Sum the gradients of one layer over all workers; every worker receives the result."""
    messages = list(messages)
    if not messages:
        raise ProtocolError("no messages to reduce")
    ids = [m.worker for m in messages]
    if len(set(ids)) != len(ids):
        raise ProtocolError(f"duplicate messages from workers {ids}")
    if workers is not None and sorted(ids) != sorted(workers):
        missing = sorted(set(workers) - set(ids))
        raise ProtocolError(f"missing messages from workers {missing}")
    if len({m.layer for m in messages}) != 1:
        raise ProtocolError("messages from different layers cannot be reduced together")

    parts = []
    for m in sorted(messages, key=lambda m: m.worker):
        parts.extend(zip(m.chunk_ids, m.payloads))
    chunk_ids = [c for c, _ in parts]
    if len(set(chunk_ids)) != len(chunk_ids):
        raise ProtocolError(f"chunk contributed twice: {chunk_ids}")
    if not parts:
        raise ProtocolError("no gradients were contributed")
    parts.sort(key=lambda p: p[0])
    shape = tuple(a.shape for a in parts[0][1].blocks().values())
    total = parts[0][1].copy()
    for _, g in parts[1:]:
        if tuple(a.shape for a in g.blocks().values()) != shape:
            raise ProtocolError("gradient payload shapes differ")
        total = total + g
    return total


def synchronized_step(replicas, messages):
    """Apply the all-reduced gradient to every worker's replica.

    ``replicas`` maps worker id to its :class:`FastWeights`; all must be
    bitwise identical beforehand.
    """
    workers = sorted(replicas)
    sums = {w: replicas[w].checksum() for w in workers}
    if len(set(sums.values())) != 1:
        raise ProtocolError(f"replica divergence before step: {sums}")
    try:
        grad = all_reduce(messages, workers)
    except ShapeError as exc:
        raise ProtocolError(str(exc)) from exc
    updated = apply_gradient(replicas[workers[0]], grad)
    return {w: updated.copy() for w in workers}


@dataclass
class PipelineResult:
    predictions: list
    fast_weights: dict = field(default_factory=dict)
    trace: list = field(default_factory=list)


def _map_workers(fn, workers, parallel):
    if parallel and len(workers) > 1:
        with ThreadPoolExecutor(max_workers=len(workers)) as pool:
            return list(pool.map(fn, workers))
    return [fn(w) for w in workers]


def run_pipeline(images, predictor, part, workers=1, parallel=False, trace=None):
    """Per-chunk predictions with a synchronization barrier at every memory layer.

    ``predictor`` is either a :class:`Backbone` (memory layers synchronized
    across chunks) or a callable ``predictor(frames) -> ChunkPrediction``.
    ``workers`` is a worker count or a :class:`WorkerGroup`.
    """
    if isinstance(workers, int):
        workers = WorkerGroup.contiguous(len(part), workers)
    if len(workers.assignment) != len(part):
        raise ConfigError("assignment does not cover every chunk exactly once")
    trace = [] if trace is None else trace
    ids = list(range(workers.n_workers))

    if not isinstance(predictor, Backbone):
        def predict_worker(w):
            return {k: predictor(part.frames(k)) for k in workers.chunks_of(w)}

        out = {}
        for res in _map_workers(predict_worker, ids, parallel):
            out.update(res)
        return PipelineResult([out[k] for k in range(len(part))], {}, trace)

    backbone = predictor
    images = np.asarray(images, dtype=np.float64)
    cfg = backbone.config
    init = backbone.initial_states()
    # replicas[group][layer][worker] -> FastWeights
    replicas = {
        gi: {layer: {w: init[layer].weights.copy() for w in g} for layer in cfg.gcm_layers}
        for gi, g in enumerate(workers.groups)
    }
    x = {}
    for res in _map_workers(
        lambda w: {k: backbone.embed(images[part.frames(k)]) for k in workers.chunks_of(w)},
        ids, parallel,
    ):
        x.update(res)

    history = {}
    for layer in range(1, cfg.layers + 1):
        fronts = {}
        for res in _map_workers(
            lambda w: {k: backbone.block_front(layer, x[k]) for k in workers.chunks_of(w)},
            ids, parallel,
        ):
            fronts.update(res)
        if layer not in cfg.gcm_layers:
            for k in range(len(part)):
                x[k] = fronts[k] + x[k]
            continue

        state = init[layer]
        results = _map_workers(
            lambda w: local_gradients(w, layer, workers.chunks_of(w), fronts, state), ids, parallel
        )
        messages = [m for m, _ in results]
        queries = {}
        for _, q in results:
            queries.update(q)
        for m in messages:
            line = m.trace_line()
            trace.append(line)
            log.debug(line)
        # barrier: all messages are in before any replica changes
        for gi, group in enumerate(workers.groups):
            group_msgs = [m for m in messages if m.worker in group]
            replicas[gi][layer] = synchronized_step(replicas[gi][layer], group_msgs)
            history[(gi, layer)] = replicas[gi][layer][group[0]]

        def apply_worker(w):
            gi = workers.group_of(w)
            weights = replicas[gi][layer][w]
            return {
                k: backbone.block_back(x[k], fronts[k], queries[k], weights, state)
                for k in workers.chunks_of(w)
            }

        for res in _map_workers(apply_worker, ids, parallel):
            x.update(res)

    predictions = [backbone.decode(x[k], part.frames(k)) for k in range(len(part))]
    return PipelineResult(predictions, history, trace)


def sequential_mode(images, backbone, part):
    """Single-context emulation of the synchronized pipeline.

    Gathers all chunks' gradients per memory layer, applies one update, then
    reads the memory, which reproduces :func:`run_pipeline` bit for bit.
    """
    images = np.asarray(images, dtype=np.float64)
    cfg = backbone.config
    init = backbone.initial_states()
    n = len(part)
    x = [backbone.embed(images[part.frames(k)]) for k in range(n)]
    history = {}
    for layer in range(1, cfg.layers + 1):
        fronts = [backbone.block_front(layer, x[k]) for k in range(n)]
        if layer not in cfg.gcm_layers:
            x = [fronts[k] + x[k] for k in range(n)]
            continue
        state = init[layer]
        updates = [local_update(state, f.reshape(-1, f.shape[-1])) for f in fronts]
        total = updates[0][1].copy()
        for _, g in updates[1:]:
            total = total + g
        weights = apply_gradient(state.weights, total)
        history[(0, layer)] = weights
        x = [backbone.block_back(x[k], fronts[k], updates[k][0], weights, state) for k in range(n)]
    predictions = [backbone.decode(x[k], part.frames(k)) for k in range(n)]
    return PipelineResult(predictions, history, [])
