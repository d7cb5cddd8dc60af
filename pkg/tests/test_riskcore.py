import random

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from aaas.riskcore import (
    ELTerms,
    EventLossTable,
    EventOccurrence,
    EventSource,
    IndexOutOfCatalog,
    InvalidTables,
    Layer,
    LayerTerms,
    Portfolio,
    Trial,
    YearEventTable,
    analyze,
    apply_terms,
    encode_yet,
    event_loss,
    lane_blocks,
    lookup_loss,
    trial_loss,
    view_yet,
)
from aaas.riskcore import engine
from aaas.riskcore.engine import LayerPlan, _trial_block
from cases import oracle_inputs, random_case
from oracle import naive_analysis

amount = st.floats(min_value=0, max_value=1e9, allow_nan=False, allow_infinity=False)


# --- apply_terms -----------------------------------------------------------

@pytest.mark.parametrize("loss, ret, lim, expected", [
    (100.0, 30.0, 50.0, 50.0),
    (20.0, 30.0, 50.0, 0.0),
    (10.0, 0.0, 1.0e12, 10.0),
])
def test_apply_terms_examples(loss, ret, lim, expected):
    assert apply_terms(loss, ret, lim) == expected


@given(amount, amount, amount)
def test_apply_terms_in_range(loss, ret, lim):
    assert 0.0 <= apply_terms(loss, ret, lim) <= lim


@given(amount)
def test_apply_terms_identity_with_open_terms(loss):
    assert apply_terms(loss, 0.0, 1e300) == loss


@given(amount, amount, amount, amount)
def test_apply_terms_monotone(a, b, ret, lim):
    lo, hi = sorted((a, b))
    assert apply_terms(lo, ret, lim) <= apply_terms(hi, ret, lim)


# --- lookup / event / trial -------------------------------------------------

def test_lookup_loss():
    elt = EventLossTable(np.array([0.0, 5.5, 0.0]))
    assert lookup_loss(elt, 1) == 5.5
    assert lookup_loss(elt, 0) == 0.0
    with pytest.raises(IndexOutOfCatalog):
        lookup_loss(elt, 3)


def _two_elts(t0=ELTerms(0.0, 1e12), t1=ELTerms(0.0, 1e12)):
    return [
        EventLossTable(np.array([0.0, 100.0]), t0),
        EventLossTable(np.array([0.0, 40.0]), t1),
    ]


def test_event_loss_examples():
    layer = Layer((0, 1))
    assert event_loss(1, layer, _two_elts()) == 140.0
    assert event_loss(1, layer, _two_elts(ELTerms(30, 50), ELTerms(0, 10))) == 60.0
    assert event_loss(0, layer, _two_elts()) == 0.0


def test_event_loss_propagates_catalog_error():
    with pytest.raises(IndexOutOfCatalog):
        event_loss(5, Layer((0, 1)), _two_elts())


def test_trial_loss_examples():
    elts = [EventLossTable(np.array([60.0, 50.0]))]
    layer = Layer((0,), LayerTerms(10, 40, 5, 100))
    assert trial_loss(Trial((EventOccurrence(0, 1.0),)), layer, elts) == 35.0
    open_layer = Layer((0,), LayerTerms(0, 1e12, 0, 1e12))
    three = Trial(tuple(EventOccurrence(1, float(t)) for t in range(3)))
    assert trial_loss(three, open_layer, elts) == 150.0
    assert trial_loss(Trial(), layer, elts) == 0.0


# --- analyze ----------------------------------------------------------------

def test_analyze_desk_case(desk_case):
    pf, yet, elts = desk_case
    ylt = analyze(pf, yet, elts)[(0, 0)]
    assert ylt.tolist() == [35.0, 0.0]
    assert analyze(pf, yet, elts, lanes=8)[(0, 0)].tobytes() == ylt.tobytes()


def test_analyze_empty_yet(desk_case):
    pf, _, elts = desk_case
    empty = YearEventTable.from_trials([], 3)
    assert analyze(pf, empty, elts)[(0, 0)].tolist() == []


def test_analyze_validates_before_computing(desk_case):
    pf, yet, elts = desk_case
    with pytest.raises(InvalidTables):
        analyze(pf, yet, elts, lanes=0)
    with pytest.raises(InvalidTables):
        analyze(pf, yet, elts, chunk_size=0)
    bad = Portfolio.single(Layer((0, 4)))
    with pytest.raises(InvalidTables):
        analyze(bad, yet, elts)
    small = [EventLossTable(np.array([1.0, 2.0]))]
    with pytest.raises(InvalidTables):
        analyze(Portfolio.single(Layer((0,))), yet, small)


def test_analyze_matches_scalar_reference():
    rng = random.Random(11)
    for _ in range(30):
        pf, yet, elts = random_case(rng)
        got = analyze(pf, yet, elts, lanes=3, chunk_size=2)
        for key, layer in pf.layers():
            expected = [trial_loss(t, layer, elts) for t in yet.trials]
            assert got[key].tolist() == expected


@given(st.integers(0, 2**32 - 1))
def test_analyze_matches_naive_oracle(seed):
    pf, yet, elts = random_case(random.Random(seed))
    want = naive_analysis(*oracle_inputs(pf, yet, elts))
    got = analyze(pf, yet, elts)
    assert set(got) == set(want)
    for key in want:
        assert got[key].tobytes() == np.array(want[key], dtype=np.float64).tobytes()


@given(st.integers(0, 2**32 - 1), st.sampled_from([1, 2, 4, 8]), st.sampled_from([1, 7, 1024]))
def test_analyze_bitwise_invariant_to_lanes_and_chunks(seed, lanes, chunk):
    pf, yet, elts = random_case(random.Random(seed), max_trials=40, max_events=30)
    ref = analyze(pf, yet, elts, 1, 1024)
    got = analyze(pf, yet, elts, lanes, chunk)
    assert all(got[k].tobytes() == ref[k].tobytes() for k in ref)


@given(st.integers(0, 2**32 - 1))
def test_trial_permutation_permutes_ylt(seed):
    rng = random.Random(seed)
    pf, yet, elts = random_case(rng)
    order = list(range(yet.n_trials))
    rng.shuffle(order)
    ref = analyze(pf, yet, elts)
    got = analyze(pf, yet.take(order), elts)
    for k in ref:
        assert got[k].tobytes() == ref[k][order].tobytes()


@given(st.integers(0, 2**32 - 1))
def test_event_permutation_leaves_trial_loss_unchanged(seed):
    # the aggregate cap acts on the final sum, so only float rounding could
    # differ; integer-valued losses keep every partial sum exact
    rng = random.Random(seed)
    catalog = 8
    elts = [EventLossTable(np.array([float(rng.randint(0, 90)) for _ in range(catalog)]), ELTerms(rng.randint(0, 20), rng.randint(10, 80)))
            for _ in range(2)]
    layer = Layer((0, 1), LayerTerms(rng.randint(0, 30), rng.randint(10, 100), rng.randint(0, 300), rng.randint(50, 900)))
    events = [EventOccurrence(rng.randrange(catalog), 0.0) for _ in range(rng.randint(0, 12))]
    shuffled = events[:]
    rng.shuffle(shuffled)
    assert trial_loss(Trial(tuple(events)), layer, elts) == trial_loss(Trial(tuple(shuffled)), layer, elts)


@given(st.integers(0, 2**32 - 1), st.floats(0, 500))
def test_trial_loss_monotone_in_elt_losses(seed, bump):
    rng = random.Random(seed)
    pf, yet, elts = random_case(rng, max_trials=5)
    j = rng.randrange(len(elts))
    e = rng.randrange(yet.catalog_size)
    raised = list(elts)
    losses = elts[j].losses.copy()
    losses[e] += bump
    raised[j] = EventLossTable(losses, elts[j].terms)
    before = analyze(pf, yet, elts)
    after = analyze(pf, yet, raised)
    for key, layer in pf.layers():
        assert np.all(after[key] >= before[key])
        assert np.all(after[key] <= layer.terms.agg_limit)
        assert np.all(after[key] >= 0.0)


# --- model invariants -------------------------------------------------------

def test_yet_rejects_unsorted_trial():
    with pytest.raises(InvalidTables):
        YearEventTable.from_trials([[(0, 5.0), (1, 2.0)]], 2)
    # a decrease across a trial boundary is fine
    YearEventTable.from_trials([[(0, 5.0)], [(1, 2.0)]], 2)


def test_yet_rejects_out_of_catalog_event():
    with pytest.raises(InvalidTables):
        YearEventTable.from_trials([[(2, 1.0)]], 2)


@pytest.mark.parametrize("bad", [[-1.0], [float("nan")], [float("inf")]])
def test_elt_rejects_bad_losses(bad):
    with pytest.raises(InvalidTables):
        EventLossTable(np.array(bad))


def test_layer_requires_distinct_elts():
    with pytest.raises(InvalidTables):
        Layer(())
    with pytest.raises(InvalidTables):
        Layer((1, 1))


def test_portfolio_dict_round_trip():
    pf = Portfolio.single(Layer((2, 0), LayerTerms(1.5, 2.5, 3.5, 4.5)))
    assert Portfolio.from_dict(pf.to_dict()) == pf


def test_yet_trials_round_trip(desk_case):
    _, yet, _ = desk_case
    assert YearEventTable.from_trials(yet.trials, yet.catalog_size) == yet
    assert yet.slice(1, 2).trials == [yet.trial(1)]


@pytest.mark.parametrize("n, lanes", [(0, 3), (10, 3), (10, 1), (3, 8), (1000, 7)])
def test_lane_blocks_partition(n, lanes):
    blocks = lane_blocks(0, n, lanes)
    assert blocks[0][0] == 0 and blocks[-1][1] == n
    assert all(a[1] == b[0] for a, b in zip(blocks, blocks[1:]))
    sizes = [hi - lo for lo, hi in blocks]
    assert max(sizes) - min(sizes) <= 1


@given(st.integers(0, 2**32 - 1), st.integers(0, 25), st.integers(1, 25), st.sampled_from([1, 2, 7, 1 << 17]),
       st.integers(1, 9))
def test_event_sources_and_tiles_agree(seed, lo, width, tile, chunk):
    portfolio, yet, elts = random_case(random.Random(seed), max_trials=30)
    lo = min(lo, yet.n_trials)
    hi = min(lo + width, yet.n_trials)
    plan = LayerPlan.build(portfolio.programs[0].layers[0], elts, yet.catalog_size)
    blob_src = view_yet(encode_yet(yet)).source()
    # a stride-2 layout with a gap word between trials
    spread = np.zeros(2 * len(yet.event_ids) + yet.n_trials, dtype=np.uint32)
    first = 2 * yet.offsets[:-1] + np.arange(yet.n_trials)
    for i in range(yet.n_trials):
        a, b = yet.offsets[i], yet.offsets[i + 1]
        spread[first[i]:first[i] + 2 * (b - a):2] = yet.event_ids[a:b]
    sources = [EventSource.from_table(yet), blob_src, EventSource(spread, first, yet.counts, 2)]
    want = _trial_block(sources[0], plan, lo, hi, 256)
    saved = engine.TILE_CELLS
    engine.TILE_CELLS = tile
    try:
        for src in sources:
            assert _trial_block(src, plan, lo, hi, chunk).tobytes() == want.tobytes()
    finally:
        engine.TILE_CELLS = saved
