"""System-model layer: dimensions, RNG discipline, noise, budget containers."""

import numpy as np
import pytest

from mimodual import model


class TestSystemConfig:
    def test_reference_dimensions(self):
        cfg = model.reference_config()
        assert cfg.n_tx == 4
        assert cfg.rx_antennas == (2, 2)
        assert cfg.streams == (2, 2)
        assert cfg.n_users == 2
        assert cfg.total_streams == 4
        assert cfg.total_rx == 4
        np.testing.assert_array_equal(cfg.symbol_weights, np.ones(4))
        np.testing.assert_array_equal(cfg.user_weights, np.ones(2))

    def test_stream_bookkeeping(self):
        cfg = model.SystemConfig(n_tx=5, rx_antennas=(3, 2), streams=(2, 1))
        np.testing.assert_array_equal(cfg.stream_users, [0, 0, 1])
        np.testing.assert_array_equal(cfg.stream_offsets, [0, 2, 3])
        assert cfg.stream_index(1, 0) == 2
        with pytest.raises(IndexError):
            cfg.stream_index(0, 2)

    def test_rejects_streams_exceeding_rx(self):
        with pytest.raises(ValueError):
            model.SystemConfig(n_tx=4, rx_antennas=(1, 2), streams=(2, 1))

    def test_rejects_streams_exceeding_tx(self):
        with pytest.raises(ValueError):
            model.SystemConfig(n_tx=2, rx_antennas=(2, 2), streams=(2, 1))

    def test_rejects_bad_weights(self):
        with pytest.raises(ValueError):
            model.SystemConfig(n_tx=4, rx_antennas=(2, 2), streams=(2, 2),
                               symbol_weights=[1.0, 1.0, -1.0, 1.0])
        with pytest.raises(ValueError):
            model.SystemConfig(n_tx=4, rx_antennas=(2, 2), streams=(2, 2),
                               user_weights=[1.0, 1.0, 1.0])


class TestRng:
    def test_deterministic_per_key(self):
        a = model.rng_for(7, 0, 3).standard_normal(5)
        b = model.rng_for(7, 0, 3).standard_normal(5)
        np.testing.assert_array_equal(a, b)

    def test_streams_disjoint(self):
        # channel draws and oracle draws must never alias
        a = model.rng_for(7, model.CHANNEL_STREAM, 3).standard_normal(5)
        b = model.rng_for(7, model.ORACLE_STREAM, 3).standard_normal(5)
        assert np.max(np.abs(a - b)) > 1e-3

    def test_subkeys_disjoint(self):
        a = model.rng_for(7, 0, 3).standard_normal(5)
        b = model.rng_for(7, 0, 4).standard_normal(5)
        assert np.max(np.abs(a - b)) > 1e-3


class TestChannels:
    def test_shapes_and_determinism(self):
        cfg = model.SystemConfig(n_tx=4, rx_antennas=(2, 3), streams=(2, 2))
        ch = model.generate_channels(cfg, seed=11, realization=2)
        assert [h.shape for h in ch.per_user] == [(4, 2), (4, 3)]
        again = model.generate_channels(cfg, seed=11, realization=2)
        for h1, h2 in zip(ch.per_user, again.per_user):
            np.testing.assert_array_equal(h1, h2)
        other = model.generate_channels(cfg, seed=11, realization=3)
        assert np.max(np.abs(ch.per_user[0] - other.per_user[0])) > 1e-3

    def test_unit_variance_statistics(self):
        # aggregate moments of the complex entries against the unit-variance
        # zero-mean model, three standard errors of slack
        cfg = model.reference_config()
        entries = np.concatenate([
            np.concatenate([h.ravel() for h in
                            model.generate_channels(cfg, 0, r).per_user])
            for r in range(2000)
        ])
        n = entries.size
        mean = entries.mean()
        power = np.mean(np.abs(entries) ** 2)
        # |mean| has SE ~ 1/sqrt(2n) per real component; E|h|^4 = 2 for this
        # distribution so var(|h|^2) = 1
        assert abs(mean) < 3.0 / np.sqrt(n)
        assert abs(power - 1.0) < 3.0 / np.sqrt(n)
        # circular symmetry: E[h^2] = 0
        assert abs(np.mean(entries ** 2)) < 3.0 / np.sqrt(n)

    def test_stacked(self):
        cfg = model.reference_config()
        ch = model.generate_channels(cfg, 0)
        assert ch.stacked.shape == (4, 4)
        np.testing.assert_array_equal(ch.stacked[:, :2], ch.per_user[0])

    def test_channelset_validation(self):
        with pytest.raises(ValueError):
            model.ChannelSet((np.ones((4, 2)), np.ones((3, 2))))
        with pytest.raises(ValueError):
            model.ChannelSet((np.full((2, 2), np.nan),))


class TestNoise:
    def test_default_noise_ratios(self):
        cfg = model.reference_config()
        noise = model.default_noise(cfg, 0.4)
        np.testing.assert_allclose(noise.blocks[0], 0.4 * np.eye(2))
        np.testing.assert_allclose(noise.blocks[1], 0.8 * np.eye(2))

    def test_noise_for_snr_average(self):
        # the per-user variances must average to the SNR-implied value
        cfg = model.reference_config()
        noise = model.noise_for_snr(cfg, 10.0, 10.0)
        sig = np.array([float(b[0, 0].real) for b in noise.blocks])
        target = model.snr_to_sigma(10.0, 2, 10.0)
        assert abs(sig.mean() - target) < 1e-15
        assert abs(sig[1] / sig[0] - 2.0) < 1e-12

    def test_noise_validation(self):
        with pytest.raises(ValueError):
            model.NoiseModel((np.array([[1.0, 0.5], [0.0, 1.0]]),))
        with pytest.raises(ValueError):
            model.NoiseModel((-np.eye(2),))
        cfg = model.reference_config()
        with pytest.raises(ValueError):
            model.default_noise(cfg, 0.0)
        with pytest.raises(ValueError):
            model.default_noise(cfg, 1.0, ratios=[1.0])

    def test_block_diag(self):
        noise = model.NoiseModel((np.eye(2), 3.0 * np.eye(1)))
        d = noise.block_diag
        assert d.shape == (3, 3)
        assert d[2, 2] == 3.0
        assert d[0, 2] == 0.0


class TestSnrConversions:
    def test_snr_to_sigma_value(self):
        # 10 mW over two users at 10 dB: 10 / (2 * 10) = 0.5
        assert model.snr_to_sigma(10.0, 2, 10.0) == pytest.approx(0.5)

    def test_roundtrip(self):
        for snr in (-5.0, 0.0, 12.5, 25.0):
            sig = model.snr_to_sigma(10.0, 2, snr)
            assert model.sigma_to_snr(10.0, 2, sig) == pytest.approx(snr)

    def test_sigma_av_db(self):
        assert model.sigma_av_db(1.0) == pytest.approx(0.0)
        assert model.sigma_av_db(0.5) == pytest.approx(-3.0102999566398121)

    def test_per_user_variances(self):
        out = model.per_user_variances(0.5, [1.0, 2.0])
        np.testing.assert_allclose(out, [1.0 / 3.0, 2.0 / 3.0])
        assert out.mean() == pytest.approx(0.5)


class TestPowerBudget:
    def test_reference_values(self):
        bud = model.reference_budget()
        np.testing.assert_allclose(bud.per_antenna, np.full(4, 2.5))
        np.testing.assert_allclose(bud.per_symbol, np.full(4, 2.5))
        np.testing.assert_allclose(bud.per_user, np.full(2, 5.0))
        np.testing.assert_allclose(bud.entrywise, np.full((4, 4), 0.625))
        assert bud.total == 10.0
        # entrywise caps split each symbol cap over the antennas
        assert bud.entrywise.sum(axis=1) == pytest.approx(bud.per_symbol)

    def test_validation(self):
        with pytest.raises(ValueError):
            model.PowerBudget(per_antenna=[1.0, -1.0])
        with pytest.raises(ValueError):
            model.PowerBudget(total=0.0)
        with pytest.raises(ValueError):
            model.PowerBudget(mode="bogus")

    def test_require(self):
        bud = model.PowerBudget(per_antenna=[1.0], mode="combined")
        bud.require("per_antenna")
        with pytest.raises(ValueError):
            bud.require("per_symbol")
