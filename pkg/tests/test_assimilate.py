import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from faciesmda.assimilate import (HARD, RATE, WATER_CUT, ForwardModelError, LatentEnsemble,
                                  MdaSchedule, ObservationSet, ProductionForward,
                                  default_schedule, esmda_update, hard_data_forward,
                                  hard_data_operator, hard_observations, normalized_mismatch,
                                  perturb_observations, prior_latents_from_realizations,
                                  production_observations, read_observations_csv,
                                  run_assimilation, sample_prior, write_observations_csv)
from faciesmda.assimilate import _derive_keys, _truncated_inverse, member_normals
from faciesmda.geomodel import derive_seed
from faciesmda.config import DEFAULT_WELLS
from faciesmda.flowsim import SimConfig, simulate
from faciesmda.geomodel import ChannelGenParams, FaciesGrid, generate_dataset
from faciesmda.nn import VaeNetwork


def _scalar_obs(value=1.0, variance=1.0):
    return ObservationSet([RATE], ["W"], [1.0], [value], [variance])


def _obs(n, seed=0):
    rng = np.random.default_rng(seed)
    return ObservationSet([RATE] * n, [f"W{i}" for i in range(n)], np.arange(n) + 1.0,
                          rng.standard_normal(n), rng.uniform(0.5, 2.0, n))


class SigmoidDecoder:
    """Stand-in decoder: latent entry r becomes the channel-1 probability of cell r."""

    def decode(self, z):
        p = 1.0 / (1.0 + np.exp(-np.atleast_2d(z)))
        return np.stack([1.0 - p, p], axis=1)[:, :, None, :]


class TestSchedule:
    def test_default(self):
        s = default_schedule(4)
        assert s.alphas == (4.0, 4.0, 4.0, 4.0)

    def test_decreasing_schedule(self):
        # a common hand-tuned schedule whose inverses also sum to one
        MdaSchedule((9.333333333333334, 7.0, 4.0, 2.0))

    def test_bad_sum(self):
        with pytest.raises(ValueError):
            MdaSchedule((4.0, 4.0, 4.0))

    @pytest.mark.parametrize("alphas", [(), (-1.0, 0.5), (np.inf, 1.0)])
    def test_invalid(self, alphas):
        with pytest.raises(ValueError):
            MdaSchedule(alphas)

    @settings(max_examples=100)
    @given(arrays(np.float64, st.integers(1, 10), elements=st.floats(0.01, 100)))
    def test_soundness(self, w):
        alphas = w.sum() / w
        try:
            s = MdaSchedule(tuple(alphas))
        except ValueError:
            return  # rounding pushed the sum past 1e-12: correctly refused
        assert abs(sum(1.0 / a for a in s.alphas) - 1.0) <= 1e-12


class TestPerturbation:
    def test_covariance(self):
        obs = _obs(3)
        alpha = 4.0
        d = perturb_observations(obs, alpha, seed=1, member_ids=np.arange(100_000))
        cov = np.cov(d)
        np.testing.assert_allclose(np.diag(cov), alpha * obs.variance, rtol=0.02)
        np.testing.assert_allclose(d.mean(axis=1), obs.d_obs, atol=0.04)
        off = cov[~np.eye(3, dtype=bool)]
        assert np.all(np.abs(off) < 0.05)

    def test_tied_to_member_id(self):
        obs = _obs(4)
        a = perturb_observations(obs, 2.0, 7, [3, 9, 1])
        b = perturb_observations(obs, 2.0, 7, [9])
        np.testing.assert_array_equal(a[:, 1], b[:, 0])

    def test_keys_match_scalar_derivation(self):
        ids = np.array([0, 7, 2**40, 123456789])
        for seed in (0, 77, 2**64 - 3):
            assert [int(k) for k in _derive_keys(seed, ids)] == [derive_seed(seed, int(i)) for i in ids]

    def test_stream_is_standard_normal(self):
        from scipy import stats
        x = member_normals(3, np.arange(50_000), 4)
        assert stats.kstest(x.ravel(), "norm").pvalue > 1e-3
        assert abs(np.corrcoef(x)[0, 1]) < 0.02

    def test_negative_id(self):
        with pytest.raises(ValueError):
            member_normals(0, [-1], 2)

    def test_hard_data_target_one(self):
        obs = ObservationSet([HARD], [(1, 2)], [0.0], [0.0], [0.01])
        d = perturb_observations(obs, 1.0, 0, np.arange(5000))
        np.testing.assert_allclose(d.mean(), 1.0, atol=0.01)


class TestUpdate:
    def test_gain_nullity(self):
        obs = _obs(3)
        ens = LatentEnsemble(np.random.default_rng(0).standard_normal((5, 10)))
        D = np.tile(np.array([[1.0], [2.0], [3.0]]), (1, 10))
        out = esmda_update(ens, D, obs, 4.0, seed=1)
        np.testing.assert_array_equal(out.z, ens.z)

    def test_member_equivariance(self):
        rng = np.random.default_rng(1)
        obs = _obs(4)
        z = rng.standard_normal((6, 12))
        H = rng.standard_normal((4, 6))
        ens = LatentEnsemble(z)
        out = esmda_update(ens, H @ z, obs, 2.0, seed=5)
        perm = rng.permutation(12)
        ens_p = LatentEnsemble(z[:, perm], member_ids=perm)
        out_p = esmda_update(ens_p, H @ z[:, perm], obs, 2.0, seed=5)
        np.testing.assert_allclose(out_p.z, out.z[:, perm], rtol=1e-12, atol=1e-12)
        np.testing.assert_array_equal(out_p.member_ids, perm)

    def test_kalman_single_step(self):
        n_e = 100_000
        z = np.random.default_rng(0).standard_normal((1, n_e))
        out = esmda_update(LatentEnsemble(z), z, _scalar_obs(), 1.0, seed=1)
        assert abs(out.z.mean() - 0.5) <= 0.02
        assert abs(out.z.var(ddof=1) - 0.5) <= 0.02

    def test_mda_telescoping(self):
        n_e = 100_000
        z0 = np.random.default_rng(0).standard_normal((1, n_e))
        single = esmda_update(LatentEnsemble(z0), z0, _scalar_obs(), 1.0, seed=1)
        ens = LatentEnsemble(z0)
        for k in range(4):
            ens = esmda_update(ens, ens.z, _scalar_obs(), 4.0, seed=10 + k)
        assert abs(ens.z.mean() - single.z.mean()) <= 0.02
        assert abs(ens.z.var(ddof=1) - 0.5) <= 0.02

    def test_multivariate_linear_gaussian(self):
        # prior N(0, I) in 3D, d = H z with 2 data: compare to the analytic posterior mean
        rng = np.random.default_rng(2)
        H = np.array([[1.0, 0.5, 0.0], [0.0, 1.0, -1.0]])
        obs = ObservationSet([RATE, RATE], ["a", "b"], [1.0, 1.0], [0.7, -0.3], [0.5, 0.2])
        z = rng.standard_normal((3, 100_000))
        out = esmda_update(LatentEnsemble(z), H @ z, obs, 1.0, seed=3, energy=1.0)
        Ce = np.diag(obs.variance)
        mean = H.T @ np.linalg.solve(H @ H.T + Ce, obs.value)
        np.testing.assert_allclose(out.z.mean(axis=1), mean, atol=0.02)

    def test_shape_checked(self):
        with pytest.raises(ValueError):
            esmda_update(LatentEnsemble(np.zeros((2, 3))), np.zeros((2, 3)), _obs(1), 1.0, 0)


class TestTruncatedInverse:
    def test_full_energy_is_inverse(self):
        a = np.array([[4.0, 1.0], [1.0, 3.0]])
        np.testing.assert_allclose(_truncated_inverse(a, 1.0) @ a, np.eye(2), atol=1e-12)

    def test_drops_tiny_directions(self):
        a = np.diag([1.0, 1e-9])
        inv = _truncated_inverse(a, 0.999)
        np.testing.assert_allclose(inv, np.diag([1.0, 0.0]), atol=1e-12)


class TestTypes:
    def test_ensemble_needs_two(self):
        with pytest.raises(ValueError):
            LatentEnsemble(np.zeros((3, 1)))

    def test_ensemble_finite(self):
        with pytest.raises(ValueError):
            LatentEnsemble(np.array([[0.0, np.nan]]))

    def test_observation_counts(self):
        with pytest.raises(ValueError):
            ObservationSet([RATE], ["W"], [1.0, 2.0], [1.0], [1.0])

    def test_observation_variance(self):
        with pytest.raises(ValueError):
            ObservationSet([RATE], ["W"], [1.0], [1.0], [0.0])

    def test_unknown_kind(self):
        with pytest.raises(ValueError):
            ObservationSet(["pressure"], ["W"], [1.0], [1.0], [1.0])


class TestHardData:
    def test_confident_decoder_zero_innovation(self):
        obs = ObservationSet([HARD, HARD], [(0, 0), (2, 0)], [0, 0], [1, 0], [0.01, 0.01])
        soft = np.zeros((3, 2, 1, 3))
        soft[:, 1, 0, 0] = 1.0
        soft[:, 0, 0, 2] = 1.0
        D = hard_data_operator(soft, obs)
        np.testing.assert_array_equal(D, 1.0)
        np.testing.assert_array_equal(normalized_mismatch(D, obs), 0.0)

    def test_zero_network_half(self):
        net = VaeNetwork.from_preset("compact", (2, 8, 8))
        for k in net.params:
            net.params[k][...] = 0.0
        obs = hard_observations(FaciesGrid(np.eye(8, dtype=np.uint8)), [(0, 0), (3, 5)])
        D = hard_data_forward(net, np.zeros((3, 4)), obs)
        np.testing.assert_array_equal(D, 0.5)
        assert D.shape == (2, 4)

    def test_observations_read_reference(self):
        ref = FaciesGrid(np.array([[0, 1], [1, 0]], dtype=np.uint8))
        obs = hard_observations(ref, [(1, 0), (1, 1)])
        assert obs.hard_cells() == [(1, 0, 1), (1, 1, 0)]
        np.testing.assert_array_equal(obs.d_obs, 1.0)
        np.testing.assert_allclose(obs.variance, 0.01)

    def test_rejects_mixed(self):
        obs = ObservationSet([HARD, RATE], [(0, 0), "W"], [0, 1], [1, 2], [0.01, 1])
        with pytest.raises(ValueError):
            hard_data_operator(np.zeros((2, 2, 1, 1)), obs)

    def test_outside_grid(self):
        obs = ObservationSet([HARD], [(5, 0)], [0], [1], [0.01])
        with pytest.raises(ValueError):
            hard_data_operator(np.zeros((2, 2, 1, 3)), obs)


class TestRun:
    def _setup(self, n_e=30, seed=0):
        rng = np.random.default_rng(seed)
        obs = ObservationSet([HARD] * 3, [(0, 0), (1, 0), (2, 0)], [0, 0, 0], [1, 0, 1],
                             [0.01] * 3)
        prior = LatentEnsemble(rng.standard_normal((3, n_e)))
        dec = SigmoidDecoder()
        return dec, (lambda soft: hard_data_operator(soft, obs)), prior, obs

    def test_record_count_and_accounting(self):
        dec, fwd, prior, obs = self._setup()
        rep = run_assimilation(dec, fwd, prior, obs, default_schedule(4), seed=3)
        assert len(rep) == 5
        assert [r.alpha for r in rep.records] == [4.0, 4.0, 4.0, 4.0, None]
        for r in rep.records:
            resid = (r.predicted - obs.d_obs[:, None]) / obs.std[:, None]
            phi = np.sum(resid**2, axis=0) / len(obs)
            np.testing.assert_allclose(r.member_mismatch, phi, rtol=1e-12, atol=0)
        assert rep.records[-1].mean_mismatch < rep.records[0].mean_mismatch
        assert rep.records[-1].honor_rate >= rep.records[0].honor_rate
        assert len(rep.posterior_facies) == prior.n_e

    def test_deterministic(self):
        dec, fwd, prior, obs = self._setup()
        a = run_assimilation(dec, fwd, prior, obs, default_schedule(2), seed=3)
        b = run_assimilation(dec, fwd, prior, obs, default_schedule(2), seed=3)
        np.testing.assert_array_equal(a.posterior.z, b.posterior.z)

    def test_zero_variance_ensemble_unchanged(self):
        dec, fwd, _, obs = self._setup()
        prior = LatentEnsemble(np.ones((3, 10)))
        rep = run_assimilation(dec, fwd, prior, obs, default_schedule(1), seed=0)
        np.testing.assert_array_equal(rep.posterior.z, prior.z)
        assert rep.posterior_facies == rep.prior_facies

    def test_forward_failure_context(self):
        dec, _, prior, obs = self._setup()

        def bad(soft):
            raise RuntimeError("boom")

        with pytest.raises(ForwardModelError) as info:
            run_assimilation(dec, bad, prior, obs, default_schedule(2), seed=0)
        assert info.value.iteration == 0

    def test_non_finite_member_reported(self):
        dec, fwd, prior, obs = self._setup()

        def nan_member(soft):
            D = fwd(soft)
            D[:, 4] = np.nan
            return D

        with pytest.raises(ForwardModelError) as info:
            run_assimilation(dec, nan_member, prior, obs, default_schedule(1), seed=0)
        assert info.value.member == 4

    def test_csv_outputs(self, tmp_path):
        dec, fwd, prior, obs = self._setup(n_e=5)
        rep = run_assimilation(dec, fwd, prior, obs, default_schedule(2), seed=0)
        rep.write_csv(tmp_path / "m.csv")
        rep.write_member_csv(tmp_path / "mm.csv")
        assert len((tmp_path / "m.csv").read_text().splitlines()) == 1 + 3
        assert len((tmp_path / "mm.csv").read_text().splitlines()) == 1 + 3 * 5


class TestPriors:
    def test_encoder_means_in_order(self):
        net = VaeNetwork.from_preset("compact", (2, 8, 8), seed=1)
        ds = generate_dataset(ChannelGenParams(nx=8, ny=8), 3, 0)
        ens = prior_latents_from_realizations(net, [ds[0], ds[1], ds[0], ds[2]])
        assert ens.z.shape == (3, 4)
        np.testing.assert_array_equal(ens.z[:, 0], ens.z[:, 2])
        mu, _ = net.encode(np.eye(2)[ds[1].codes].transpose(2, 0, 1))
        np.testing.assert_allclose(ens.z[:, 1], mu, rtol=1e-12)

    def test_sample_prior(self):
        a, b = sample_prior(4, 6, 9), sample_prior(4, 6, 9)
        np.testing.assert_array_equal(a.z, b.z)
        assert a.z.shape == (4, 6)


class TestProduction:
    cfg = SimConfig(wells=DEFAULT_WELLS, report_times=(100.0, 300.0))

    def test_noise_free_matches_reference(self):
        ref = generate_dataset(ChannelGenParams(), 1, 5)[0]
        data = simulate(ref, self.cfg)
        obs = production_observations(data, add_noise=False)
        np.testing.assert_array_equal(obs.value, data.vector())
        assert obs.kind[:2] == [RATE, WATER_CUT]

    def test_floors(self):
        ref = generate_dataset(ChannelGenParams(), 1, 5)[0]
        data = simulate(ref, self.cfg)
        obs = production_observations(data, 0.05, seed=1)
        wc = np.array([k == WATER_CUT for k in obs.kind])
        d = data.vector()
        assert np.all(obs.std[wc] >= 0.01)
        np.testing.assert_allclose(obs.std[~wc], np.maximum(0.05 * d[~wc],
                                                            0.01 * data.rates.mean()))

    def test_noise_reproducible(self):
        ref = generate_dataset(ChannelGenParams(), 1, 5)[0]
        data = simulate(ref, self.cfg)
        a = production_observations(data, seed=4)
        b = production_observations(data, seed=4)
        np.testing.assert_array_equal(a.value, b.value)

    def test_forward_threads_agree(self):
        soft = np.eye(2)[np.stack([g.codes for g in generate_dataset(ChannelGenParams(), 3, 1)])]
        soft = soft.transpose(0, 3, 1, 2)
        a = ProductionForward(self.cfg, threads=1)(soft)
        b = ProductionForward(self.cfg, threads=2)(soft)
        np.testing.assert_array_equal(a, b)
        assert a.shape == (2 * (7 + 4), 3)


class TestObservationCsv:
    def test_round_trip(self, tmp_path):
        obs = ObservationSet([HARD, RATE, WATER_CUT], [(3, 4), "P1", "P1"], [0.0, 20.0, 20.0],
                             [1.0, 123.456, 0.25], [0.01, 4.0, 1e-4])
        write_observations_csv(tmp_path / "o.csv", obs)
        back = read_observations_csv(tmp_path / "o.csv")
        assert back.kind == obs.kind and back.location == obs.location
        np.testing.assert_array_equal(back.value, obs.value)
        np.testing.assert_allclose(back.variance, obs.variance, rtol=1e-15)
        assert (tmp_path / "o.csv").read_text().splitlines()[0] == \
            "time,well_or_cell,kind,value,stddev"

    def test_missing_column(self, tmp_path):
        (tmp_path / "o.csv").write_text("time,kind,value\n1,rate,2\n")
        with pytest.raises(ValueError):
            read_observations_csv(tmp_path / "o.csv")
