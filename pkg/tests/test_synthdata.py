import numpy as np
import pytest

from tavce.errors import ChecksumError, ConfigError, FormatError, TruncatedFileError
from tavce.rng import SeededRng
from tavce.synthdata import (
    GeneratorConfig,
    audio_projection,
    ar1_trajectory,
    dataset_bytes,
    generate_dataset,
    generate_sequence,
    parse_dataset,
    read_dataset,
    split_holdout,
    write_dataset,
)

SMALL = GeneratorConfig(seed=3, num_sequences=3, T=6, A_dim=8, k=2)


def _latent_estimate(cfg, s):
    """Recover z from audio with the pseudo-inverse of the mixing matrix."""
    return s.audio.astype(np.float64) @ np.linalg.pinv(audio_projection(cfg)).T


def test_same_seed_and_id_is_bitwise_identical():
    cfg = GeneratorConfig(seed=11, T=16)
    assert generate_sequence(cfg, 4).equals(generate_sequence(cfg, 4))
    assert not generate_sequence(cfg, 4).equals(generate_sequence(cfg, 5))


def test_gamma_zero_decouples_mouth_from_audio():
    cfg = GeneratorConfig(seed=0, T=512, gamma=0.0)
    s = generate_sequence(cfg, 0)
    r = np.corrcoef(s.mouth_heights, s.audio[:, 0])[0, 1]
    assert abs(r) <= 0.15


def test_rho_zero_gives_white_latent():
    cfg = GeneratorConfig(seed=0, T=512, rho=0.0)
    z = generate_sequence(cfg, 0).latent[:, 0].astype(np.float64)
    r = np.corrcoef(z[:-1], z[1:])[0, 1]
    assert abs(r) <= 0.15


def test_ar1_is_stationary_unit_variance():
    z = ar1_trajectory(SeededRng(1), 20_000, 3, 0.9)
    np.testing.assert_allclose(z.var(axis=0), 1.0, atol=0.1)
    lag1 = np.mean([np.corrcoef(z[:-1, c], z[1:, c])[0, 1] for c in range(3)])
    assert abs(lag1 - 0.9) < 0.02


def test_coupling_increases_mouth_audio_dependence():
    corrs = []
    for gamma in (0.0, 0.5, 1.0):
        cfg = GeneratorConfig(seed=0, T=512, gamma=gamma)
        s = generate_sequence(cfg, 0)
        z_hat = _latent_estimate(cfg, s)
        corrs.append(abs(np.corrcoef(s.mouth_heights, z_hat[:, 0])[0, 1]))
    assert corrs[0] < corrs[1] < corrs[2]
    assert corrs[2] > 0.8


def test_frames_in_unit_range_and_shapes():
    s = generate_sequence(GeneratorConfig(T=8), 0)
    assert s.frames.shape == (8, 1, 32, 32)
    assert s.audio.shape == (8, 64)
    assert s.frames.min() >= 0.0 and s.frames.max() <= 1.0
    assert s.frames.dtype == np.float32


def test_config_validation():
    with pytest.raises(ConfigError):
        GeneratorConfig(rho=1.0)
    with pytest.raises(ConfigError):
        GeneratorConfig(gamma=1.5)
    with pytest.raises(ConfigError):
        GeneratorConfig(T=0)


def test_split_holdout_takes_last_ids():
    samples = generate_dataset(GeneratorConfig(num_sequences=10, T=4))
    train, test = split_holdout(samples, 0.2)
    assert [s.id for s in test] == [8, 9]
    assert [s.id for s in train] == list(range(8))


def test_round_trip_is_bitwise(tmp_path):
    samples = generate_dataset(SMALL)
    path = tmp_path / "d.tvds"
    write_dataset(samples, SMALL, path)
    back, cfg = read_dataset(path)
    assert cfg == SMALL
    assert all(a.equals(b) for a, b in zip(samples, back))
    assert dataset_bytes(back, cfg) == path.read_bytes()


def test_empty_dataset_rejected(tmp_path):
    with pytest.raises(ValueError):
        write_dataset([], SMALL, tmp_path / "e.tvds")


def test_wrong_magic_and_truncation():
    raw = dataset_bytes(generate_dataset(SMALL), SMALL)
    with pytest.raises(FormatError, match="not a TVDS file"):
        parse_dataset(b"XXXX" + raw[4:])
    with pytest.raises(TruncatedFileError):
        parse_dataset(raw[: len(raw) // 2])
    with pytest.raises(TruncatedFileError):
        parse_dataset(raw[:-1])


def test_payload_corruption_detected_by_crc():
    raw = bytearray(dataset_bytes(generate_dataset(SMALL), SMALL))
    header_end = 4 + 4 + 36 + 4  # magic, version, generator config, count
    positions = range(header_end, len(raw), 7)
    for pos in positions:
        bad = bytearray(raw)
        bad[pos] ^= 0x01
        with pytest.raises(ChecksumError):
            parse_dataset(bytes(bad))


def test_header_corruption_never_parses():
    raw = dataset_bytes(generate_dataset(SMALL), SMALL)
    for pos in range(48):
        bad = bytearray(raw)
        bad[pos] ^= 0x80
        with pytest.raises(FormatError):
            parse_dataset(bytes(bad))
