import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mbloco import datapipe as dp
from mbloco import features as ft
from mbloco import simworld as sw
from mbloco.config import default_config

CFG = default_config()
CARPET = sw.get_terrain("carpet", CFG)


@pytest.fixture(scope="module")
def small():
    return dp.build_dataset(CFG, CARPET, 6, horizon=8, seed=3)


def fake_rollouts(n, T, seed=0, k=4):
    rng = np.random.default_rng(seed)
    return [dp.Rollout(i, "carpet", rng.normal(size=(T + 1, sw.STATE_DIM)), rng.uniform(0, 25, (T, 2)),
                       ft.Embedding(rng.normal(size=k), ft.Source.RANDOM_PROJECTION), i)
            for i in range(n)]


@pytest.mark.slow
def test_full_budget_gives_ten_thousand_pairs():
    ds = dp.build_dataset(CFG, CARPET, 200, horizon=50, seed=0)
    assert len(ds) == 10_000 and ds.n_rollouts == 200
    assert ds.meta["robot_seconds"] == pytest.approx(1000.0)  # about 17 minutes


def test_single_transition_gives_one_pair():
    ds = dp.build_dataset(CFG, CARPET, 1, horizon=1, seed=0)
    assert len(ds) == 1 and ds.inputs.shape == (1, sw.STATE_DIM + 2) and ds.embeddings.shape == (1, 32)


def test_collection_is_deterministic(small):
    again = dp.build_dataset(CFG, CARPET, 6, horizon=8, seed=3)
    assert again.digest() == small.digest()
    assert dp.build_dataset(CFG, CARPET, 6, horizon=8, seed=4).digest() != small.digest()


def test_rollouts_depend_only_on_seed_and_index():
    proj = dp.default_projection(CFG)
    a = dp.collect_one(CFG, CARPET, 4, 7, horizon=5, proj=proj)
    b = dp.collect(CFG, CARPET, 5, horizon=5, seed=7)[4]
    assert np.array_equal(a.states, b.states) and np.array_equal(a.embedding.values, b.embedding.values)


def test_collect_validation():
    with pytest.raises(ValueError):
        dp.collect(CFG, CARPET, 0)


def test_actions_are_uniform_over_the_box(small):
    acts = small.inputs[:, sw.STATE_DIM:]
    assert acts.min() >= 0.0 and acts.max() <= 25.0
    ds = dp.build_dataset(CFG, CARPET, 3, horizon=4, seed=0, abstraction=sw.Abstraction.PWM)
    pwm = ds.inputs[:, sw.STATE_DIM:]
    assert pwm.min() >= -1.0 and pwm.max() <= 1.0 and ds.meta["abstraction"] == "pwm"


def test_slice_examples():
    ro = fake_rollouts(3, 5)
    ro[1].states[:] = ro[1].states[0]
    ds = dp.slice_rollouts(ro)
    assert len(ds) == 15
    assert np.all(ds.targets[ds.rollout == 1] == 0.0)
    # every pair of a rollout points at that rollout's single embedding
    assert list(ds.rollout) == [0] * 5 + [1] * 5 + [2] * 5
    assert np.array_equal(ds.embeddings[2], ro[2].embedding.values.astype(np.float32))


def test_targets_are_componentwise_differences(small):
    S = sw.STATE_DIM
    rows = np.flatnonzero(small.rollout == 2)
    s = small.inputs[rows, :S].astype(float)
    recon = s[:-1] + small.targets[rows[:-1]].astype(float)
    # inputs and targets are stored as float32, so reconstruction is exact to that precision
    assert np.allclose(recon, s[1:], rtol=1e-6, atol=1e-6)


def test_slice_reassemble_round_trip_on_float32_states():
    ro = fake_rollouts(4, 7, seed=1)
    for r in ro:
        r.states[:] = r.states.astype(np.float32)
    back = dp.reassemble(dp.slice_rollouts(ro))
    for r, b in zip(ro, back):
        assert np.array_equal(b[:-1], r.states[:-1])
        assert np.allclose(b[-1], r.states[-1], rtol=1e-6, atol=1e-6)


@settings(max_examples=20, deadline=None)
@given(st.integers(1, 5), st.integers(1, 6), st.integers(0, 2 ** 31))
def test_pair_count_and_round_trip_property(n, T, seed):
    ro = fake_rollouts(n, T, seed)
    ds = dp.slice_rollouts(ro)
    assert len(ds) == n * T
    for r, b in zip(ro, dp.reassemble(ds)):
        assert b.shape == r.states.shape
        assert np.allclose(b, r.states, rtol=1e-6, atol=1e-5)


def test_split_examples():
    ds = dp.slice_rollouts(fake_rollouts(10, 3))
    tr, va = dp.split(ds, 0.9, seed=1)
    assert (tr.n_rollouts, va.n_rollouts) == (9, 1)
    assert len(tr) + len(va) == len(ds)
    tr2, va2 = dp.split(ds, 0.9, seed=1)
    assert tr2.digest() == tr.digest() and va2.digest() == va.digest()
    rows = {tuple(r) for r in tr.inputs} | {tuple(r) for r in va.inputs}
    assert len(rows) == len(ds)
    with pytest.raises(ValueError):
        dp.split(ds, 1.0)
    with pytest.raises(ValueError):
        dp.split(dp.slice_rollouts(fake_rollouts(1, 3)), 0.5)


@settings(max_examples=25, deadline=None)
@given(st.integers(2, 30), st.floats(0.05, 0.95), st.integers(0, 1000))
def test_split_is_disjoint_and_exhaustive(n, ratio, seed):
    ds = dp.slice_rollouts(fake_rollouts(n, 2, seed))
    tr, va = dp.split(ds, ratio, seed)
    assert tr.n_rollouts >= 1 and va.n_rollouts >= 1 and tr.n_rollouts + va.n_rollouts == n
    seen = sorted(map(tuple, np.vstack([tr.embeddings, va.embeddings])))
    assert seen == sorted(map(tuple, ds.embeddings))


def test_merge_renumbers_and_tracks_terrains():
    a = dp.slice_rollouts(fake_rollouts(2, 3))
    b = dp.slice_rollouts(fake_rollouts(3, 3, seed=5))
    m = dp.merge([a, b], terrain_order=["carpet", "gravel"])
    assert m.n_rollouts == 5 and len(m) == 15
    assert list(np.unique(m.rollout)) == [0, 1, 2, 3, 4]
    assert m.meta["terrain_order"] == ["carpet", "gravel"]
    assert m.embeddings_for("one_hot").tolist() == [[1.0, 0.0]] * 5
    with pytest.raises(ValueError):
        dp.merge([a, dp.slice_rollouts(fake_rollouts(1, 2, k=3))])
    with pytest.raises(ValueError):
        dp.merge([])


def test_dataset_file_round_trip(tmp_path, small):
    f = tmp_path / "d.rchd"
    dp.save_dataset(small, f)
    back = dp.load_dataset(f)
    for name in ("inputs", "targets", "rollout", "embeddings"):
        assert getattr(back, name).tobytes() == getattr(small, name).tobytes()
    assert back.meta == small.meta


def test_empty_dataset_file(tmp_path):
    f = tmp_path / "empty.rchd"
    dp.save_dataset(dp.slice_rollouts([]), f)
    back = dp.load_dataset(f)
    assert len(back) == 0 and back.n_rollouts == 0


def test_dataset_file_errors(tmp_path, small):
    f = tmp_path / "d.rchd"
    dp.save_dataset(small, f)
    data = f.read_bytes()
    for name, blob in {"flip": data[:100] + bytes([data[100] ^ 4]) + data[101:],
                       "short": data[:-50], "tiny": data[:8], "magic": b"ABCD" + data[4:]}.items():
        (tmp_path / name).write_bytes(blob)
        with pytest.raises(dp.DatasetFileError):
            dp.load_dataset(tmp_path / name)


def test_provenance_metadata(small):
    m = small.meta
    assert m["terrains"] == ["carpet"] and m["seed"] == 3 and m["horizon"] == 8
    assert len(m["config_hash"]) > 0 and len(m["world_hash"]) > 0
    assert len(m["rollout_seeds"]) == 6 and m["rollout_terrains"] == ["carpet"] * 6
    assert m["robot_seconds"] == pytest.approx(6 * 8 * 0.1)
