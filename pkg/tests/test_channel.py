import math
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gossipgan.channel import (
    ArrayGeometry, ChannelConfig, DatasetFormatError, PathParams, ScenarioSpec, array_response, channel_matrix,
    denormalize, export_dataset, from_planes, generate_channels, import_dataset, normalize_dataset, preset,
    sample_scenario, subcarrier_channel, to_planes,
)

from oracles import steering_loop, subcarrier_loop

angles = st.floats(-math.pi, math.pi, allow_nan=False)


def _random_paths(rng, L):
    return [PathParams(float(rng.uniform(0, 3)), float(rng.uniform(0, 2 * np.pi)), float(rng.uniform(0, 1e-6)),
                       float(rng.uniform(-np.pi, np.pi)), float(rng.uniform(0, np.pi))) for _ in range(L)]


def test_single_element_response():
    np.testing.assert_array_equal(array_response(ArrayGeometry(1), 0.7, 1.1), [1.0])


def test_broadside_ula_is_all_ones():
    np.testing.assert_allclose(array_response(ArrayGeometry(8), 0.9, 0.0), np.ones(8), atol=0)


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 4), st.integers(1, 4), st.integers(1, 4), angles, angles)
def test_kronecker_matches_triple_loop(nx, ny, nz, az, el):
    g = ArrayGeometry(nx, ny, nz)
    np.testing.assert_allclose(array_response(g, az, el), steering_loop(nx, ny, nz, az, el), rtol=0, atol=1e-12)


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 4), st.integers(1, 4), st.integers(1, 4), angles, angles)
def test_response_has_unit_modulus(nx, ny, nz, az, el):
    np.testing.assert_allclose(np.abs(array_response(ArrayGeometry(nx, ny, nz), az, el)), 1.0, atol=1e-12)


def test_response_equals_numpy_kron():
    g = ArrayGeometry(3, 2, 2)
    az, el = 0.4, 1.2
    ux, uy, uz = math.sin(el) * math.cos(az), math.sin(el) * math.sin(az), math.cos(el)
    ax = np.exp(1j * math.pi * ux * np.arange(3))
    ay = np.exp(1j * math.pi * uy * np.arange(2))
    a_z = np.exp(1j * math.pi * uz * np.arange(2))
    np.testing.assert_allclose(array_response(g, az, el), np.kron(np.kron(a_z, ay), ax), atol=1e-15)


def test_invalid_geometry():
    with pytest.raises(ValueError):
        ArrayGeometry(0)
    with pytest.raises(ValueError):
        ChannelConfig(8, 4, geometry=ArrayGeometry(2, 2))


def test_single_zero_phase_path_is_all_ones():
    cfg = ChannelConfig(6, 4)
    h = subcarrier_channel(cfg, [PathParams(4.0, 0.0, 0.0, 0.3, 0.0)], 2)
    np.testing.assert_allclose(h, np.ones(6), atol=1e-15)


def test_three_random_paths_match_naive_sum():
    rng = np.random.default_rng(0)
    cfg = ChannelConfig(8, 16, bandwidth=20e6, geometry=ArrayGeometry(2, 2, 2))
    for _ in range(20):
        paths = _random_paths(rng, 3)
        n = int(rng.integers(1, 17))
        expected = subcarrier_loop([(p.power, p.phase, p.delay, p.azimuth, p.elevation) for p in paths],
                                   n, 16, 20e6, 2, 2, 2)
        np.testing.assert_allclose(subcarrier_channel(cfg, paths, n), expected, rtol=0, atol=1e-12)


def test_literal_mode_matches_naive_sum():
    rng = np.random.default_rng(1)
    cfg = ChannelConfig(4, 8, literal=True)
    paths = _random_paths(rng, 2)
    raw = [(p.power, p.phase, p.delay, p.azimuth, p.elevation) for p in paths]
    for n in (1, 5, 8):
        np.testing.assert_allclose(subcarrier_channel(cfg, paths, n),
                                   subcarrier_loop(raw, n, 8, cfg.bandwidth, 4, literal=True), atol=1e-12)


def test_delay_phase_periodicity():
    cfg = ChannelConfig(4, 8, bandwidth=10e6)
    n = 3
    tau = cfg.n_c / (n * cfg.bandwidth)  # 2 pi n tau B / Nc = 2 pi
    base = subcarrier_channel(cfg, [PathParams(1.0, 0.0, 0.0, 0.2, 0.9)], n)
    shifted = subcarrier_channel(cfg, [PathParams(1.0, 0.0, tau, 0.2, 0.9)], n)
    np.testing.assert_allclose(shifted, base, atol=1e-12)


def test_subcarrier_out_of_range():
    cfg = ChannelConfig(4, 8)
    paths = [PathParams(1.0, 0.0, 0.0, 0.0, 0.0)]
    for n in (0, 9):
        with pytest.raises(ValueError):
            subcarrier_channel(cfg, paths, n)


def test_full_size_matrix_and_planes():
    rng = np.random.default_rng(2)
    cfg = ChannelConfig(32, 32)
    H = channel_matrix(cfg, _random_paths(rng, 4))
    assert H.shape == (32, 32) and np.iscomplexobj(H)
    planes = to_planes(H)
    assert planes.shape == (2, 32, 32)
    np.testing.assert_array_equal(from_planes(planes), H)


def test_columns_equal_subcarrier_channels():
    rng = np.random.default_rng(3)
    cfg = ChannelConfig(6, 5)
    paths = _random_paths(rng, 3)
    H = channel_matrix(cfg, paths)
    for n in range(1, 6):
        np.testing.assert_array_equal(H[:, n - 1], subcarrier_channel(cfg, paths, n))


def test_conjugate_pair_cancels_imaginary_part():
    # paths with opposite phase, no delay, broadside: e^{j theta} + e^{-j theta} is real
    cfg = ChannelConfig(4, 6)
    paths = [PathParams(1.0, 0.7, 0.0, 0.3, 0.0), PathParams(1.0, -0.7, 0.0, 0.3, 0.0)]
    H = channel_matrix(cfg, paths)
    np.testing.assert_allclose(H.imag, 0.0, atol=1e-15)
    np.testing.assert_allclose(H.real, 2 * math.cos(0.7) * math.sqrt(1 / 6), atol=1e-15)


def test_amplitude_linearity():
    rng = np.random.default_rng(4)
    cfg = ChannelConfig(4, 4)
    paths = _random_paths(rng, 3)
    quad = [PathParams(4 * p.power, p.phase, p.delay, p.azimuth, p.elevation) for p in paths]
    np.testing.assert_allclose(channel_matrix(cfg, quad), 2 * channel_matrix(cfg, paths), atol=1e-12)


# ---------------------------------------------------------------- scenarios


def test_scenario_determinism_and_sorted_powers():
    spec = preset("dense")
    a = sample_scenario(np.random.default_rng(9), spec)
    b = sample_scenario(np.random.default_rng(9), spec)
    assert a == b
    for _ in range(20):
        powers = [p.power for p in sample_scenario(np.random.default_rng(_), spec)]
        assert powers == sorted(powers, reverse=True)


def test_mean_delay_monte_carlo():
    spec = preset("dense")
    rng = np.random.default_rng(0)
    delays = np.concatenate([[p.delay for p in sample_scenario(rng, spec)] for _ in range(10_000 // spec.n_paths)])
    sigma = spec.delay_spread / math.sqrt(len(delays))  # exponential: std == mean
    assert abs(delays.mean() - spec.delay_spread) < 3 * sigma


def test_empty_spec_rejected():
    with pytest.raises(ValueError):
        sample_scenario(np.random.default_rng(0), None)
    with pytest.raises(ValueError):
        preset("urban")


def test_generate_channels_reproducible():
    cfg = ChannelConfig(4, 4)
    a = generate_channels(cfg, preset("sparse"), 5, 3)
    b = generate_channels(cfg, preset("sparse"), 5, 3)
    assert a.shape == (5, 4, 4)
    np.testing.assert_array_equal(a, b)


def test_scenarios_differ():
    cfg = ChannelConfig(8, 8)
    assert not np.allclose(generate_channels(cfg, preset("sparse"), 3, 0), generate_channels(cfg, preset("dense"), 3, 0))


def test_custom_scenario():
    spec = ScenarioSpec("custom", n_paths=2, n_clusters=1, power_decay=0.0, delay_spread=0.0,
                        az_spread=0.0, el_spread=0.0, location_jitter=0.0, env_seed=1)
    paths = sample_scenario(np.random.default_rng(0), spec)
    assert len(paths) == 2 and all(p.delay == 0 for p in paths)


# ---------------------------------------------------------------- normalisation


def test_normalize_single_sample_by_max_abs():
    H = np.zeros((1, 2, 2), dtype=complex)
    H[0, 0, 0] = 4.0
    H[0, 1, 1] = 2.0 - 1.0j
    ds = normalize_dataset(H)
    assert ds.scale == 4.0
    np.testing.assert_array_equal(ds.tensors[0, 0], [[1.0, 0.0], [0.0, 0.5]])
    np.testing.assert_array_equal(ds.tensors[0, 1], [[0.0, 0.0], [0.0, -0.25]])


def test_normalize_is_idempotent_and_invertible():
    H = generate_channels(ChannelConfig(4, 4), preset("dense"), 6, 0)
    ds = normalize_dataset(H)
    assert np.abs(ds.tensors).max() == 1.0
    again = normalize_dataset(from_planes(ds.tensors))
    assert again.scale == 1.0
    np.testing.assert_array_equal(again.tensors, ds.tensors)
    np.testing.assert_allclose(from_planes(denormalize(ds.tensors, ds.scale)), H, rtol=0, atol=1e-12)


def test_normalize_all_zero_rejected():
    with pytest.raises(ValueError):
        normalize_dataset(np.zeros((2, 3, 3), dtype=complex))


def test_normalize_split_is_partition():
    ds = normalize_dataset(generate_channels(ChannelConfig(2, 2), preset("sparse"), 10, 0), test_fraction=0.3)
    assert sorted(np.concatenate([ds.train, ds.test]).tolist()) == list(range(10))
    assert len(ds.test) == 3


# ---------------------------------------------------------------- CSID files


@pytest.fixture
def dataset():
    return normalize_dataset(generate_channels(ChannelConfig(4, 3), preset("sparse"), 5, 1))


def test_export_import_round_trip(tmp_path, dataset):
    path = tmp_path / "d.csid"
    export_dataset(dataset, path)
    back = import_dataset(path)
    assert back.scale == dataset.scale
    assert back.tensors.astype("<f4").tobytes() == dataset.tensors.astype("<f4").tobytes()
    assert path.stat().st_size == 4 + 4 + 16 + 8 + 4 * dataset.tensors.size


def test_wrong_magic(tmp_path, dataset):
    path = tmp_path / "d.csid"
    export_dataset(dataset, path)
    blob = bytearray(path.read_bytes())
    blob[:4] = b"XXXX"
    path.write_bytes(bytes(blob))
    with pytest.raises(DatasetFormatError, match="magic"):
        import_dataset(path)


def test_truncated_payload(tmp_path, dataset):
    path = tmp_path / "d.csid"
    export_dataset(dataset, path)
    path.write_bytes(path.read_bytes()[:-4])
    with pytest.raises(DatasetFormatError):
        import_dataset(path)


def test_payload_length_follows_header_dims(tmp_path):
    # header claims 2x32x32x5000: 5000*2048 float32 values are required
    header = struct.pack("<4sIIIIId", b"CSID", 1, 2, 32, 32, 5000, 1.0)
    path = tmp_path / "big.csid"
    path.write_bytes(header + b"\0" * (4 * 5000 * 2048 - 4))
    with pytest.raises(DatasetFormatError, match=f"{5000 * 2048} float32 values"):
        import_dataset(path)


def test_dimension_overflow(tmp_path):
    header = struct.pack("<4sIIIIId", b"CSID", 1, 2, 1 << 16, 1 << 16, 1 << 16, 1.0)
    path = tmp_path / "huge.csid"
    path.write_bytes(header)
    with pytest.raises(DatasetFormatError):
        import_dataset(path)
