import hashlib

import numpy as np
import pytest

from aaas.corpus import CorpusError, load_corpus, read_ylt, write_corpus, write_ylt
from aaas.datagen import (
    GenSpec,
    InvalidSpec,
    gen_elts,
    gen_portfolio,
    gen_yet,
    splitmix64,
    stream_state,
)

SMALL = GenSpec(seed=42, n_trials=200, event_spread=(3, 9), catalog_size=50, n_elts=4)


def _scalar_splitmix(state, n):
    out = []
    for _ in range(n):
        state = (state + 0x9E3779B97F4A7C15) & (2**64 - 1)
        z = state
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & (2**64 - 1)
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & (2**64 - 1)
        out.append(z ^ (z >> 31))
    return out


def test_splitmix_reference_value():
    # first output of splitmix64 seeded with 0, as published with the algorithm
    assert int(splitmix64(0, 1)[0]) == 0xE220A8397B1DCDAF


@pytest.mark.parametrize("state", [0, 1, 42, 2**64 - 1, stream_state(7, 0x100 + 3)])
def test_splitmix_matches_sequential(state):
    assert [int(x) for x in splitmix64(state, 20)] == _scalar_splitmix(state, 20)
    assert [int(x) for x in splitmix64(state, 5, start=15)] == _scalar_splitmix(state, 20)[15:]


def test_yet_deterministic():
    assert gen_yet(SMALL) == gen_yet(SMALL)
    assert gen_yet(SMALL) != gen_yet(GenSpec(**{**SMALL.__dict__, "seed": 43}))


def test_yet_fixed_spread():
    yet = gen_yet(GenSpec(seed=1, n_trials=50, event_spread=(4, 4), catalog_size=10, n_elts=1))
    assert set(yet.counts.tolist()) == {4}


def test_yet_mean_count_within_spread():
    yet = gen_yet(GenSpec(seed=3, n_trials=10_000, event_spread=(800, 1500), catalog_size=1000, n_elts=1))
    mean = yet.counts.mean()
    assert 800 <= mean <= 1500
    assert abs(mean - 1150) < 10  # sample mean of 10^4 uniform draws, sd ~ 2
    assert yet.counts.min() >= 800 and yet.counts.max() <= 1500


def test_yet_sorted_and_in_catalog():
    yet = gen_yet(SMALL)
    for i in range(yet.n_trials):
        ts = yet.timestamps[yet.offsets[i]:yet.offsets[i + 1]]
        assert np.all(np.diff(ts) >= 0)
    assert np.all(yet.timestamps < 365.0) and np.all(yet.timestamps >= 0)
    assert yet.event_ids.max() < SMALL.catalog_size


def test_elts_density_one_all_covered():
    elts = gen_elts(GenSpec(seed=5, catalog_size=300, n_elts=2, elt_density=1.0))
    assert all(np.all(e.losses > 0) for e in elts)


def test_elts_density_fraction():
    (elt,) = gen_elts(GenSpec(seed=5, catalog_size=20_000, n_elts=1, elt_density=0.3))
    assert abs((elt.losses > 0).mean() - 0.3) < 0.02
    lo, hi = GenSpec().loss_range
    covered = elt.losses[elt.losses > 0]
    assert covered.min() >= lo and covered.max() < hi


def test_elts_sixteen_distinct_reproducible():
    spec = GenSpec(seed=9, catalog_size=500, n_elts=16)
    digests = [hashlib.sha256(e.losses.tobytes()).hexdigest() for e in gen_elts(spec)]
    again = [hashlib.sha256(e.losses.tobytes()).hexdigest() for e in gen_elts(spec)]
    assert digests == again
    assert len(set(digests)) == 16


def test_portfolio_default_shape():
    pf = gen_portfolio(GenSpec())
    assert len(pf.programs) == 1 and len(pf.programs[0].layers) == 1
    assert pf.programs[0].layers[0].elt_ids == tuple(range(16))


@pytest.mark.parametrize("change", [
    {"n_trials": 0}, {"n_elts": 0}, {"elt_density": 0.0}, {"elt_density": 1.5},
    {"event_spread": (5, 2)}, {"catalog_size": 0}, {"loss_range": (5.0, 1.0)},
    {"agg_limit_range": (-1.0, 1.0)},
])
def test_invalid_specs(change):
    spec = GenSpec(**{**SMALL.__dict__, **change})
    for fn in (gen_yet, gen_elts, gen_portfolio):
        with pytest.raises(InvalidSpec):
            fn(spec)


def test_from_mean():
    spec = GenSpec.from_mean(100, 0.5)
    assert spec.event_spread == (50, 150) and spec.mean_events_per_trial == 100


def test_corpus_round_trip_and_byte_determinism(tmp_path):
    parts = gen_portfolio(SMALL), gen_yet(SMALL), gen_elts(SMALL)
    a = write_corpus(tmp_path / "a", parts[1], parts[2], parts[0])
    b = write_corpus(tmp_path / "b", gen_yet(SMALL), gen_elts(SMALL), gen_portfolio(SMALL))
    assert [p.name for p in a] == ["yet.bin", "elt-00.bin", "elt-01.bin", "elt-02.bin", "elt-03.bin", "portfolio.json"]
    assert all(x.read_bytes() == y.read_bytes() for x, y in zip(a, b))
    pf, yet, elts = load_corpus(tmp_path / "a")
    assert pf == parts[0] and yet == parts[1] and elts == parts[2]
    assert (tmp_path / "a" / "yet.bin").read_bytes()[:4] == b"YET1"


def test_corpus_load_errors(tmp_path):
    write_corpus(tmp_path, gen_yet(SMALL), gen_elts(SMALL), gen_portfolio(SMALL))
    (tmp_path / "elt-02.bin").unlink()
    with pytest.raises(CorpusError, match="elt-02"):
        load_corpus(tmp_path)
    with pytest.raises(CorpusError):
        load_corpus(tmp_path / "nope")
    (tmp_path / "yet.bin").write_bytes(b"XXXX")
    with pytest.raises(CorpusError, match="magic"):
        load_corpus(tmp_path)


def test_ylt_csv_round_trip(tmp_path):
    losses = np.array([0.0, 1 / 3, 1e300, 123456789.123456789])
    write_ylt(tmp_path / "ylt.csv", losses)
    assert (tmp_path / "ylt.csv").read_text().splitlines()[0] == "trial_id,loss"
    assert read_ylt(tmp_path / "ylt.csv").tobytes() == losses.tobytes()
