import numpy as np
import pytest

from subnet.data import (
    BatchSampler,
    Dataset,
    SyntheticConfig,
    fit_normalizer,
    generate_synthetic,
    load_csv,
    normalize_dataset,
    sample_batch,
    save_csv,
    save_truth_csv,
    slice_dataset,
    valid_start_indices,
)
from subnet.errors import (
    DegenerateDataError,
    InvalidArgumentError,
    ParseError,
)

# ---------------------------------------------------------------- dataset / csv


def test_dataset_invariants():
    with pytest.raises(InvalidArgumentError):
        Dataset(np.zeros((3, 1)), np.zeros((4, 1)), 1.0)
    with pytest.raises(InvalidArgumentError):
        Dataset(np.zeros((3, 1)), np.full((3, 1), np.nan), 1.0)
    with pytest.raises(InvalidArgumentError):
        Dataset(np.zeros((3, 1)), np.zeros((3, 1)), 0.0)


def test_dataset_arrays_readonly():
    ds = Dataset(np.zeros((3, 1)), np.zeros((3, 1)), 1.0)
    with pytest.raises(ValueError):
        ds.u[0, 0] = 1.0


def test_load_csv_basic(tmp_path):
    p = tmp_path / "d.csv"
    p.write_text("u0,y0\n1,4\n2,5\n3,6\n")
    ds = load_csv(p, 1, 1, 0.5)
    assert ds.n == 3 and ds.dt == 0.5
    assert np.array_equal(ds.u[:, 0], [1, 2, 3])
    assert np.array_equal(ds.y[:, 0], [4, 5, 6])


def test_load_csv_header_only(tmp_path):
    p = tmp_path / "d.csv"
    p.write_text("u0,y0\n")
    with pytest.raises(ParseError):
        load_csv(p, 1, 1, 1.0)


def test_load_csv_missing_column(tmp_path):
    p = tmp_path / "d.csv"
    p.write_text("u0,z0\n1,2\n")
    with pytest.raises(ParseError, match="y0"):
        load_csv(p, 1, 1, 1.0)


def test_load_csv_bad_cell_reports_location(tmp_path):
    p = tmp_path / "d.csv"
    p.write_text("u0,y0\n1,2\n1,oops\n")
    with pytest.raises(ParseError, match=r"row 3.*y0"):
        load_csv(p, 1, 1, 1.0)


def test_load_csv_comments_crlf_extra_columns(tmp_path):
    p = tmp_path / "d.csv"
    p.write_bytes(b"# generated\r\nu0,y0,extra\r\n1,2,9\r\n3,4,9\r\n")
    ds = load_csv(p, 1, 1, 1.0)
    assert ds.n == 2 and ds.y[1, 0] == 4.0


def test_save_load_roundtrip_exact(tmp_path):
    rng = np.random.default_rng(0)
    ds = Dataset(rng.standard_normal((20, 2)), rng.standard_normal((20, 1)), 0.01, "rt")
    save_csv(ds, tmp_path / "rt.csv")
    back = load_csv(tmp_path / "rt.csv", 2, 1, 0.01)
    assert np.array_equal(ds.u, back.u)
    assert np.array_equal(ds.y, back.y)


def test_slice_dataset():
    ds = Dataset(np.arange(10.0)[:, None], np.arange(10.0)[:, None], 1.0)
    head = slice_dataset(ds, 0, 6)
    tail = slice_dataset(ds, 6, 10)
    assert head.n == 6 and tail.n == 4 and tail.u[0, 0] == 6.0


# ---------------------------------------------------------------- normalization


def test_fit_normalizer_hand_case():
    ds = Dataset(np.array([[1.0], [3.0], [1.0], [3.0]]), np.array([[1.0], [3.0], [1.0], [3.0]]), 1.0)
    st = fit_normalizer(ds)
    assert st.u_mean[0] == 2.0 and st.u_std[0] == 1.0
    assert st.y_mean[0] == 2.0 and st.y_std[0] == 1.0


def test_normalizer_idempotent():
    rng = np.random.default_rng(1)
    ds = Dataset(3 + 2 * rng.standard_normal((500, 1)), -1 + 0.5 * rng.standard_normal((500, 1)), 1.0)
    dsn = normalize_dataset(ds, fit_normalizer(ds))
    st2 = fit_normalizer(dsn)
    assert abs(st2.u_mean[0]) < 1e-12 and abs(st2.u_std[0] - 1.0) < 1e-12
    assert abs(st2.y_mean[0]) < 1e-12 and abs(st2.y_std[0] - 1.0) < 1e-12


def test_normalizer_stats_match_recomputation():
    rng = np.random.default_rng(2)
    ds = Dataset(rng.standard_normal((200, 3)), rng.standard_normal((200, 2)), 1.0)
    st = fit_normalizer(ds)
    dsn = normalize_dataset(ds, st)
    assert np.abs(dsn.u.mean(axis=0)).max() < 1e-9
    assert np.abs(dsn.u.std(axis=0) - 1).max() < 1e-9
    assert np.abs(dsn.y.std(axis=0) - 1).max() < 1e-9


def test_normalize_denormalize_identity():
    rng = np.random.default_rng(3)
    ds = Dataset(5 * rng.standard_normal((100, 1)), 7 * rng.standard_normal((100, 2)) + 3, 1.0)
    st = fit_normalizer(ds)
    dsn = normalize_dataset(ds, st)
    back = dsn.y * st.y_std + st.y_mean
    assert np.abs((back - ds.y) / np.maximum(1e-30, np.abs(ds.y))).max() < 1e-12


def test_zero_variance_channel_named():
    ds = Dataset(np.ones((5, 1)), np.arange(5.0)[:, None], 1.0)
    with pytest.raises(DegenerateDataError, match=r"u\[0\]"):
        fit_normalizer(ds)


# ---------------------------------------------------------------- indices


def test_valid_start_indices_cct_shape():
    idx = valid_start_indices(1024, 30, 5, 5)
    assert idx[0] == 5 and idx[-1] == 994 and len(idx) == 990


def test_valid_start_indices_full_recovery_case():
    idx = valid_start_indices(64, 64, 0, 0)
    assert np.array_equal(idx, [0])


def test_valid_start_indices_boundary():
    idx = valid_start_indices(35, 30, 5, 2)
    assert np.array_equal(idx, [5])


def test_valid_start_indices_infeasible():
    with pytest.raises(InvalidArgumentError):
        valid_start_indices(34, 30, 5, 5)


def test_valid_start_indices_count_formula_random():
    rng = np.random.default_rng(0)
    for _ in range(1000):
        n_a, n_b = int(rng.integers(0, 8)), int(rng.integers(0, 8))
        T = int(rng.integers(1, 50))
        N = T + max(n_a, n_b) + int(rng.integers(0, 100))
        idx = valid_start_indices(N, T, n_a, n_b)
        brute = [n for n in range(N + 1) if n >= max(n_a, n_b) and n <= N - T]
        assert np.array_equal(idx, brute)
        assert len(idx) == N - T - max(n_a, n_b) + 1


# ---------------------------------------------------------------- batching


def test_sample_batch_full_permutation():
    idx = np.arange(7)
    got = sample_batch(idx, 10, np.random.default_rng(0))
    assert sorted(got.tolist()) == list(range(7))


def test_sample_batch_deterministic():
    idx = np.arange(100)
    a = sample_batch(idx, 16, np.random.default_rng(5))
    b = sample_batch(idx, 16, np.random.default_rng(5))
    assert np.array_equal(a, b)


def test_epoch_covers_every_index_once():
    idx = np.arange(50) + 7
    s = BatchSampler(idx, 8, np.random.default_rng(3))
    seen = []
    while len(seen) < 50:
        seen += s.sample_batch().tolist()
    assert sorted(seen) == sorted(idx.tolist())  # exactly one epoch, no repeats


def test_sampler_rejects_bad_args():
    with pytest.raises(InvalidArgumentError):
        BatchSampler([], 4, np.random.default_rng(0))
    with pytest.raises(InvalidArgumentError):
        BatchSampler([1, 2], 0, np.random.default_rng(0))


# ---------------------------------------------------------------- synthetic


def test_tanks_zero_input_states_stay_zero():
    cfg = SyntheticConfig(
        system="cascaded_tanks", n_samples=200, dt=4.0, seed=0, noise_std=0.05,
        params={"input_offset": 0.0, "input_scale": 0.0, "x01": 0.0, "x02": 0.0},
    )
    ds, trace = generate_synthetic(cfg)
    assert np.abs(trace.states).max() == 0.0
    assert np.array_equal(trace.y_clean, np.zeros_like(trace.y_clean))
    # outputs are pure noise with the configured std (loose MC band)
    assert 0.03 < ds.y.std() < 0.07


def test_linear2_exponential_decay():
    cfg = SyntheticConfig(
        system="linear2", n_samples=50, dt=0.1, seed=0, noise_std=0.0, truth_substeps=10,
        params={"a11": -1.0, "a12": 0.0, "a21": 0.0, "a22": -1.0,
                "b1": 0.0, "b2": 0.0, "c1": 1.0, "c2": 0.0,
                "x01": 1.0, "x02": 0.0, "input_offset": 0.0, "input_scale": 0.0},
    )
    _, trace = generate_synthetic(cfg)
    expected = np.exp(-np.arange(50) * 0.1)
    assert np.abs(trace.y_clean[:, 0] - expected).max() <= 1e-7


def test_noise_monte_carlo_std():
    cfg = SyntheticConfig(system="linear2", n_samples=10_000, dt=0.5, seed=4, noise_std=0.1)
    ds, trace = generate_synthetic(cfg)
    resid = ds.y - trace.y_clean
    assert 0.097 <= resid.std() <= 0.103


def test_tanks_clamping_invariant_aggressive_input():
    cfg = SyntheticConfig(
        system="cascaded_tanks", n_samples=400, dt=4.0, seed=7,
        params={"input_offset": 2.0, "input_scale": 1.5},
    )
    _, trace = generate_synthetic(cfg)
    assert trace.states.min() >= 0.0
    assert trace.states.max() <= 10.0
    assert (trace.states >= 9.999).any()  # the overflow clamp actually engages


def test_generation_deterministic():
    cfg = SyntheticConfig(seed=9, noise_std=0.1)
    a, ta = generate_synthetic(cfg)
    b, tb = generate_synthetic(cfg)
    assert np.array_equal(a.y, b.y) and np.array_equal(ta.states, tb.states)


def test_truth_csv_reloads_as_dataset(tmp_path):
    cfg = SyntheticConfig(n_samples=100, seed=0, noise_std=0.1)
    ds, trace = generate_synthetic(cfg)
    save_truth_csv(ds, trace, tmp_path / "truth.csv")
    back = load_csv(tmp_path / "truth.csv", 1, 1, 4.0)
    assert np.array_equal(back.u, ds.u) and np.array_equal(back.y, ds.y)


def test_synthetic_config_validation():
    with pytest.raises(InvalidArgumentError):
        SyntheticConfig(system="pendulum")
    with pytest.raises(InvalidArgumentError):
        SyntheticConfig(noise_std=-1.0)
    with pytest.raises(InvalidArgumentError):
        SyntheticConfig(truth_substeps=5)
