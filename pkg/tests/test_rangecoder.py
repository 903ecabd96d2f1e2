import numpy as np
import pytest
import torch

from yoda.rangecoder import (
    BITS_CAP,
    SCALE_FLOOR,
    CorruptPayloadError,
    EntropyCoderError,
    QuantizedCdf,
    cdf_bits,
    likelihood_bits,
    quantize_pmf,
    range_decode,
    range_encode,
)

# High-precision oracle values, frozen from mpmath (dps=30):
#   -log2(ncdf(0.5) - ncdf(-0.5))   for the unit-bin cost at the mode
#   -log2(ncdf(-9.5) - ncdf(-10.5)) for the 10-sigma tail
BITS_AT_MODE_UNIT_SCALE = 1.38486653429098968
BITS_AT_10_SIGMA = 69.69091386288372


def random_case(rng, max_len=256):
    prec = int(rng.integers(8, 17))
    a = int(rng.integers(1, min(300, (1 << prec) // 2) + 1))
    pmf = rng.random(a) + 1e-9
    cdf = quantize_pmf(pmf, prec)
    n = int(rng.integers(0, max_len))
    valid = np.flatnonzero(np.diff(cdf.cdf) > 0)
    symbols = valid[rng.integers(0, len(valid), n)]
    return symbols, cdf


class TestQuantizePmf:
    def test_symmetric_pair(self):
        cdf = quantize_pmf([0.5, 0.5], precision=4)
        assert cdf.cdf.tolist() == [0, 8, 16]

    def test_single_symbol(self):
        cdf = quantize_pmf([1.0], precision=16)
        assert cdf.cdf.tolist() == [0, 65536]

    def test_rounding_with_remainder_rule(self):
        # oracle: round(256*[0.1,0.2,0.7]) = [26,51,179], sums to 256 exactly
        cdf = quantize_pmf([0.1, 0.2, 0.3], precision=8)  # unnormalized on purpose
        assert int(cdf.cdf[-1]) == 256
        cdf = quantize_pmf([0.1, 0.2, 0.7], precision=8)
        assert np.diff(cdf.cdf).tolist() == [26, 51, 179]

    def test_nonzero_symbols_get_width(self):
        rng = np.random.default_rng(7)
        for _ in range(50):
            pmf = rng.random(64) ** 8  # some entries nearly zero but positive
            cdf = quantize_pmf(pmf, 10)
            widths = np.diff(cdf.cdf)
            assert int(cdf.cdf[0]) == 0 and int(cdf.cdf[-1]) == 1024
            assert np.all(widths[pmf > 0] >= 1)

    def test_errors(self):
        with pytest.raises(EntropyCoderError):
            quantize_pmf([], 16)
        with pytest.raises(EntropyCoderError):
            quantize_pmf([0.0, 0.0], 16)
        with pytest.raises(EntropyCoderError):
            quantize_pmf([1.0], 1)
        with pytest.raises(EntropyCoderError):
            quantize_pmf([1.0], 25)
        with pytest.raises(EntropyCoderError):
            quantize_pmf([-0.1, 1.1], 16)
        with pytest.raises(EntropyCoderError):
            quantize_pmf(np.ones(512), 8)  # 512 symbols cannot fit 256 slots


class TestRangeCoder:
    def test_empty_stream(self):
        payload = range_encode([], [])
        assert len(payload) == 2  # flush-only
        assert range_decode(payload, []) == []

    def test_uniform_256_payload_size(self):
        cdf = quantize_pmf(np.full(256, 1.0), 16)
        rng = np.random.default_rng(3)
        symbols = rng.integers(0, 256, 4096)
        payload = range_encode(symbols, [cdf] * 4096)
        assert 4096 <= len(payload) <= 4104
        assert range_decode(payload, [cdf] * 4096) == symbols.tolist()

    def test_randomized_roundtrip_and_bound(self):
        rng = np.random.default_rng(11)
        for trial in range(1000):
            symbols, cdf = random_case(rng)
            cdfs = [cdf] * len(symbols)
            payload = range_encode(symbols, cdfs)
            assert range_decode(payload, cdfs) == symbols.tolist(), trial
            assert len(payload) * 8 <= cdf_bits(symbols, cdfs) + 64, trial

    def test_mixed_cdfs_per_symbol(self):
        rng = np.random.default_rng(5)
        cdfs = [quantize_pmf(rng.random(int(rng.integers(2, 40))) + 0.01, 12)
                for _ in range(200)]
        symbols = [int(rng.integers(0, c.alphabet_size)) for c in cdfs]
        payload = range_encode(symbols, cdfs)
        assert range_decode(payload, cdfs) == symbols

    def test_deterministic(self):
        rng = np.random.default_rng(9)
        symbols, cdf = random_case(rng)
        cdfs = [cdf] * len(symbols)
        assert range_encode(symbols, cdfs) == range_encode(symbols, cdfs)

    def test_skewed_distribution_carry_stress(self):
        # long runs of the most probable symbol produce 0xffff chunks and carries
        cdf = quantize_pmf([1e-4, 1.0, 1e-4], 16)
        symbols = [1] * 20000 + [0, 2] * 50 + [1] * 1000
        cdfs = [cdf] * len(symbols)
        payload = range_encode(symbols, cdfs)
        assert range_decode(payload, cdfs) == symbols
        assert len(payload) * 8 <= cdf_bits(symbols, cdfs) + 64

    def test_symbol_out_of_alphabet(self):
        cdf = quantize_pmf([0.5, 0.5], 8)
        with pytest.raises(EntropyCoderError):
            range_encode([2], [cdf])

    def test_zero_width_bin_rejected(self):
        cdf = QuantizedCdf(np.array([0, 0, 256]), precision=8)
        with pytest.raises(EntropyCoderError):
            range_encode([0], [cdf])

    def test_truncated_payload_detected(self):
        rng = np.random.default_rng(13)
        cdf = quantize_pmf(rng.random(16) + 0.01, 16)
        symbols = rng.integers(0, 16, 300)
        cdfs = [cdf] * 300
        payload = range_encode(symbols, cdfs)
        for cut in (2, 4, len(payload) // 2):
            with pytest.raises(CorruptPayloadError):
                range_decode(payload[:-cut], cdfs)
        with pytest.raises(CorruptPayloadError):
            range_decode(payload[:-1], cdfs)  # odd length
        with pytest.raises(CorruptPayloadError):
            range_decode(b"", cdfs)

    def test_trailing_garbage_detected(self):
        cdf = quantize_pmf([0.3, 0.7], 16)
        payload = range_encode([0, 1, 1], [cdf] * 3)
        with pytest.raises(CorruptPayloadError):
            range_decode(payload + b"\x12\x34", [cdf] * 3)

    def test_cdf_mismatch_detected(self):
        rng = np.random.default_rng(17)
        cdf_a = quantize_pmf(rng.random(32) + 0.01, 16)
        cdf_b = quantize_pmf(rng.random(32) + 0.01, 16)
        symbols = rng.integers(0, 32, 400)
        payload = range_encode(symbols, [cdf_a] * 400)
        with pytest.raises(CorruptPayloadError):
            decoded = range_decode(payload, [cdf_b] * 400)
            # a mismatch that slips the sentinel must still change the symbols
            assert decoded != symbols.tolist()


class TestLikelihoodBits:
    def test_mode_value_unit_scale(self):
        bits = float(likelihood_bits(0.0, 0.0, 1.0))
        assert bits == pytest.approx(BITS_AT_MODE_UNIT_SCALE, abs=1e-9)
        assert bits == pytest.approx(1.3852, abs=1e-3)

    def test_scale_floor_concentrates_mass(self):
        assert float(likelihood_bits(3.0, 3.0, SCALE_FLOOR)) < 1e-4

    def test_tail_cost_capped(self):
        assert float(likelihood_bits(10.0, 0.0, 1.0)) == BITS_CAP
        uncapped = float(likelihood_bits(10.0, 0.0, 1.0, bits_cap=80.0))
        assert uncapped >= 40.0
        assert uncapped == pytest.approx(BITS_AT_10_SIGMA, rel=1e-6)

    def test_monotone_in_distance(self):
        rng = np.random.default_rng(23)
        for _ in range(20):
            scale = float(rng.uniform(SCALE_FLOOR, 4.0))
            mean = float(rng.uniform(-3, 3))
            d = np.sort(rng.uniform(0, 8, 64))
            bits = likelihood_bits(torch.tensor(mean + d), mean, scale).numpy()
            assert np.all(np.diff(bits) >= -1e-9)

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(29)
        for _ in range(20):
            v = float(rng.uniform(-4, 4))
            m = float(rng.uniform(-4, 4))
            s = float(rng.uniform(0.2, 4.0))
            mean = torch.tensor(m, dtype=torch.float64, requires_grad=True)
            scale = torch.tensor(s, dtype=torch.float64, requires_grad=True)
            bits = likelihood_bits(torch.tensor(v, dtype=torch.float64), mean, scale)
            bits.backward()
            eps = 1e-6
            fd_mean = (float(likelihood_bits(v, m + eps, s)) -
                       float(likelihood_bits(v, m - eps, s))) / (2 * eps)
            fd_scale = (float(likelihood_bits(v, m, s + eps)) -
                        float(likelihood_bits(v, m, s - eps))) / (2 * eps)
            for got, want in ((float(mean.grad), fd_mean), (float(scale.grad), fd_scale)):
                if abs(want) > 1e-8:
                    assert got == pytest.approx(want, rel=1e-4)
                else:
                    assert abs(got) < 1e-6

    def test_rejects_bad_inputs(self):
        with pytest.raises(ValueError):
            likelihood_bits(float("nan"), 0.0, 1.0)
        with pytest.raises(ValueError):
            likelihood_bits(0.0, 0.0, 0.01)

    def test_estimate_tracks_coded_bits(self):
        # coding integers drawn near a Gaussian: actual payload stays within
        # the coder overhead of the likelihood estimate
        rng = np.random.default_rng(31)
        scale = 2.0
        values = np.clip(np.round(rng.normal(0, scale, 4000)), -127, 128).astype(int)
        grid = np.arange(-127, 129)
        from scipy.special import ndtr

        pmf = ndtr((grid + 0.5) / scale) - ndtr((grid - 0.5) / scale)
        pmf[0] += ndtr((grid[0] - 0.5) / scale)
        pmf[-1] += 1.0 - ndtr((grid[-1] + 0.5) / scale)
        cdf = quantize_pmf(pmf, 16, offset=-127)
        symbols = values + 127
        payload = range_encode(symbols, [cdf] * len(symbols))
        est = float(likelihood_bits(torch.tensor(values, dtype=torch.float64), 0.0, scale).sum())
        assert len(payload) * 8 <= est * 1.01 + 64
