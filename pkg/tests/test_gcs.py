import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from scalr.backbone import Backbone, BackboneConfig
from scalr.errors import ConfigError, InputError, ProtocolError
from scalr.gcm import GcmConfig, GcmState, init_gcm, local_update
from scalr.gcs import (
    ReduceMessage,
    WorkerGroup,
    all_reduce,
    local_gradients,
    partition,
    run_pipeline,
    sequential_mode,
    synchronized_step,
)

TINY = BackboneConfig(layers=3, gcm_layers=(1, 3), d=16, heads=2, patch=8, image_h=16, image_w=16)


@pytest.mark.parametrize(
    "n,m,o,expected",
    [
        (150, 60, 30, [(1, 60), (31, 90), (61, 120), (91, 150)]),
        (60, 60, 30, [(1, 60)]),
        (100, 60, 30, [(1, 60), (31, 90), (41, 100)]),
        (10, 60, 30, [(1, 10)]),
        (5, 2, 1, [(1, 2), (2, 3), (3, 4), (4, 5)]),
    ],
)
def test_partition_examples(n, m, o, expected):
    assert list(partition(n, m, o).chunks) == expected


@pytest.mark.parametrize("args,exc", [((0, 4, 1), InputError), ((10, 4, 4), ConfigError), ((10, 0, 0), ConfigError)])
def test_partition_errors(args, exc):
    with pytest.raises(exc):
        partition(*args)


def check_partition(n, m, o):
    part = partition(n, m, o)
    chunks = part.chunks
    covered = np.zeros(n, dtype=bool)
    for s, e in chunks:
        assert 1 <= s <= e <= n
        assert e - s + 1 == min(m, n)
        covered[s - 1:e] = True
    assert covered.all()
    assert chunks[0][0] == 1 and chunks[-1][1] == n
    for k in range(len(chunks) - 1):
        (s0, e0), (s1, e1) = chunks[k], chunks[k + 1]
        assert s1 > s0 and e1 > e0
        shared = e0 - s1 + 1
        if k < len(chunks) - 2:
            assert s1 == s0 + (m - o) and shared == o
        else:
            assert shared >= o
    return part


@settings(max_examples=300, deadline=None)
@given(st.integers(1, 400), st.integers(1, 80), st.data())
def test_partition_invariants(n, m, data):
    o = data.draw(st.integers(0, m - 1))
    check_partition(n, m, o)


def test_worker_group_validation():
    assert WorkerGroup.contiguous(4, 2).assignment == (0, 0, 1, 1)
    assert WorkerGroup.contiguous(3, 4).assignment == (0, 1, 2)
    with pytest.raises(ConfigError):
        WorkerGroup(2, (0, 2))
    with pytest.raises(ConfigError):
        WorkerGroup(2, (0, 1), groups=((0,), (0, 1)))
    with pytest.raises(ConfigError):
        WorkerGroup(0, ())


def _state(d=8, seed=0):
    cfg = GcmConfig(d, 2, 2, 1e-3, 0.1, seed)
    w, p = init_gcm(cfg)
    rng = np.random.default_rng(seed)
    w = type(w)(w.w1, rng.normal(size=w.w2.shape) * 0.3, w.w3)
    return GcmState(cfg, w, p)


def test_all_reduce_equals_concatenated_gradient(rng):
    state = _state()
    chunks = {k: rng.normal(size=(int(rng.integers(3, 9)), 8)) for k in range(5)}
    msgs = [
        local_gradients(0, 1, [0, 3], chunks, state)[0],
        local_gradients(1, 1, [1, 2, 4], chunks, state)[0],
    ]
    total = all_reduce(msgs, [0, 1])
    whole = local_update(state, np.concatenate([chunks[k] for k in range(5)]))[1]
    for a, b in zip(total.blocks().values(), whole.blocks().values()):
        assert np.abs(a - b).max() <= 1e-12 * max(1.0, np.abs(b).max())


def test_all_reduce_independent_of_assignment(rng):
    state = _state()
    chunks = {k: rng.normal(size=(6, 8)) for k in range(4)}
    a = all_reduce([local_gradients(0, 1, [0, 1, 2, 3], chunks, state)[0]])
    b = all_reduce(
        [local_gradients(w, 1, [c], chunks, state)[0] for w, c in zip([0, 1, 2, 3], [2, 0, 3, 1])]
    )
    assert a.equals(b)


def test_protocol_errors(rng):
    state = _state()
    chunks = {k: rng.normal(size=(4, 8)) for k in range(3)}
    m0 = local_gradients(0, 1, [0], chunks, state)[0]
    m1 = local_gradients(1, 1, [1], chunks, state)[0]
    with pytest.raises(ProtocolError):
        all_reduce([])
    with pytest.raises(ProtocolError, match="duplicate"):
        all_reduce([m0, m0])
    with pytest.raises(ProtocolError, match="missing"):
        all_reduce([m0], [0, 1])
    other_layer = local_gradients(1, 2, [1], chunks, state)[0]
    with pytest.raises(ProtocolError, match="layers"):
        all_reduce([m0, other_layer])
    twice = local_gradients(1, 1, [0], chunks, state)[0]
    with pytest.raises(ProtocolError, match="twice"):
        all_reduce([m0, twice])
    bad = _state(d=4)
    mb = local_gradients(1, 1, [1], {1: rng.normal(size=(4, 4))}, bad)[0]
    with pytest.raises(ProtocolError, match="shapes"):
        all_reduce([m0, mb])
    with pytest.raises(ProtocolError):
        ReduceMessage(1, 0, (0, 1), (m0.payload,))
    reps = {0: state.weights.copy(), 1: state.weights.scale(2.0)}
    with pytest.raises(ProtocolError, match="divergence"):
        synchronized_step(reps, [m0, m1])


def test_synchronized_step_broadcasts(rng):
    state = _state()
    chunks = {k: rng.normal(size=(4, 8)) for k in range(2)}
    msgs = [local_gradients(w, 1, [w], chunks, state)[0] for w in range(2)]
    reps = synchronized_step({0: state.weights.copy(), 1: state.weights.copy()}, msgs)
    assert reps[0].equals(reps[1])
    assert reps[0] is not reps[1]
    assert not reps[0].equals(state.weights)


def test_trace_line_format(rng):
    state = _state()
    m = local_gradients(3, 2, [5, 1], {1: rng.normal(size=(2, 8)), 5: rng.normal(size=(2, 8))}, state)[0]
    line = m.trace_line()
    assert line.startswith("layer=2 worker=3 chunks=1,5 checksum=")
    assert len(line.split("checksum=")[1]) == 16


@pytest.fixture(scope="module")
def tiny_run():
    bb = Backbone(TINY)
    rng = np.random.default_rng(7)
    ims = rng.uniform(0, 1, size=(10, 3, 16, 16))
    part = partition(10, 4, 2)
    return bb, ims, part, run_pipeline(ims, bb, part, workers=1)


def _same(a, b):
    assert all(p.equals(q) for p, q in zip(a.predictions, b.predictions))
    assert a.fast_weights.keys() == b.fast_weights.keys()
    assert all(a.fast_weights[k].equals(b.fast_weights[k]) for k in a.fast_weights)


@pytest.mark.parametrize("workers", [2, 3, 4])
def test_pipeline_worker_count_invariance(tiny_run, workers):
    bb, ims, part, ref = tiny_run
    _same(run_pipeline(ims, bb, part, workers=workers), ref)


def test_pipeline_parallel_and_permuted_assignment(tiny_run):
    bb, ims, part, ref = tiny_run
    _same(run_pipeline(ims, bb, part, workers=2, parallel=True), ref)
    group = WorkerGroup(3, (2, 0, 1, 0))
    _same(run_pipeline(ims, bb, part, workers=group), ref)


def test_sequential_mode_matches(tiny_run):
    bb, ims, part, ref = tiny_run
    _same(sequential_mode(ims, bb, part), ref)


def test_pipeline_trace_and_groups(tiny_run):
    bb, ims, part, ref = tiny_run
    trace = []
    res = run_pipeline(ims, bb, part, workers=2, trace=trace)
    assert len(trace) == 2 * len(TINY.gcm_layers)
    assert trace[0].startswith("layer=1 worker=0 chunks=0,1")
    split = run_pipeline(ims, bb, part, workers=WorkerGroup(2, (0, 0, 1, 1), ((0,), (1,))))
    assert not split.fast_weights[(0, 1)].equals(split.fast_weights[(1, 1)])
    # chunks synchronised only within their own group see a different memory
    assert split.predictions[0].equals(res.predictions[0]) is False


def test_pipeline_with_callable_predictor():
    part = partition(20, 8, 4)
    calls = []

    def predictor(frames):
        calls.append(tuple(frames))
        return tuple(frames)

    res = run_pipeline(None, predictor, part, workers=3)
    assert res.predictions == [tuple(part.frames(k)) for k in range(len(part))]
    assert sorted(calls) == sorted(res.predictions)
