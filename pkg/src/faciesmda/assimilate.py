"""Ensemble smoother with multiple data assimilation on VAE latent vectors.

Each iteration decodes the latent ensemble into facies, evaluates a forward
operator on the decoded images and applies the smoother update

    z_j <- z_j + C_zd (C_dd + alpha_k C_e)^-1 (d_obs + e_j - d_j)

with ``e_j ~ N(0, alpha_k C_e)`` and sample covariances from the current
ensemble.  The inverse uses a truncated SVD of the matrix scaled by the
data standard deviations.
"""
from __future__ import annotations

import csv
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .flowsim import PredictedData, SimConfig, simulate
from .geomodel import FaciesGrid, derive_seed, from_soft, to_one_hot

__all__ = [
    "HARD", "RATE", "WATER_CUT",
    "ObservationSet",
    "LatentEnsemble",
    "MdaSchedule",
    "IterationRecord",
    "AssimilationReport",
    "ForwardModelError",
    "default_schedule",
    "perturb_observations",
    "member_normals",
    "esmda_update",
    "normalized_mismatch",
    "hard_data_operator",
    "hard_data_forward",
    "ProductionForward",
    "run_assimilation",
    "prior_latents_from_realizations",
    "sample_prior",
    "production_observations",
    "hard_observations",
    "read_observations_csv",
    "write_observations_csv",
]

log = logging.getLogger(__name__)

HARD = "hard_facies"
RATE = "rate"
WATER_CUT = "water_cut"
KINDS = (HARD, RATE, WATER_CUT)


class ForwardModelError(RuntimeError):
    def __init__(self, iteration: int, member: int | None, cause: Exception):
        where = f"iteration {iteration}" + ("" if member is None else f", member {member}")
        super().__init__(f"forward model failed at {where}: {cause}")
        self.iteration = iteration
        self.member = member


@dataclass
class ObservationSet:
    """Observed data with a diagonal error covariance.

    For ``hard_facies`` entries ``value`` is the observed facies code and
    ``location`` the cell ``(i, j)``; the smoother sees them as an
    indicator observation equal to 1.  Other kinds carry ``location`` as a
    well name.
    """

    kind: list
    location: list
    time: np.ndarray
    value: np.ndarray
    variance: np.ndarray

    def __post_init__(self):
        self.kind = list(self.kind)
        self.location = list(self.location)
        self.time = np.asarray(self.time, dtype=np.float64)
        self.value = np.asarray(self.value, dtype=np.float64)
        self.variance = np.asarray(self.variance, dtype=np.float64)
        n = len(self.kind)
        if not (len(self.location) == n == self.time.size == self.value.size == self.variance.size):
            raise ValueError("descriptor count must equal value count")
        if n == 0:
            raise ValueError("empty observation set")
        bad = [k for k in self.kind if k not in KINDS]
        if bad:
            raise ValueError(f"unknown observation kind(s) {sorted(set(bad))}")
        if np.any(~np.isfinite(self.variance)) or np.any(self.variance <= 0):
            raise ValueError("error variances must be finite and > 0")

    def __len__(self):
        return len(self.kind)

    @property
    def is_hard(self) -> np.ndarray:
        return np.array([k == HARD for k in self.kind])

    @property
    def d_obs(self) -> np.ndarray:
        """Values the smoother matches: 1 for hard data, the datum otherwise."""
        return np.where(self.is_hard, 1.0, self.value)

    @property
    def std(self) -> np.ndarray:
        return np.sqrt(self.variance)

    def hard_cells(self):
        """``(i, j, code)`` triples of the hard data."""
        return [(loc[0], loc[1], int(v)) for k, loc, v in zip(self.kind, self.location, self.value)
                if k == HARD]


@dataclass
class LatentEnsemble:
    """Latent vectors as columns of ``z`` (shape ``(n_z, n_e)``).

    ``member_ids`` label each column; a member's perturbation stream is
    tied to its id, not its position.
    """

    z: np.ndarray
    member_ids: np.ndarray | None = None

    def __post_init__(self):
        self.z = np.array(self.z, dtype=np.float64)
        if self.z.ndim != 2:
            raise ValueError(f"latent ensemble must be 2D (n_z, n_e), got {self.z.shape}")
        if self.z.shape[1] < 2:
            raise ValueError("ensemble needs at least 2 members")
        if not np.all(np.isfinite(self.z)):
            raise ValueError("latent ensemble contains non-finite entries")
        if self.member_ids is None:
            self.member_ids = np.arange(self.z.shape[1])
        self.member_ids = np.asarray(self.member_ids, dtype=np.int64)
        if self.member_ids.shape != (self.z.shape[1],):
            raise ValueError("one member id per column required")

    @property
    def n_z(self) -> int:
        return self.z.shape[0]

    @property
    def n_e(self) -> int:
        return self.z.shape[1]


@dataclass(frozen=True)
class MdaSchedule:
    alphas: tuple

    def __post_init__(self):
        a = np.asarray(self.alphas, dtype=np.float64)
        object.__setattr__(self, "alphas", tuple(float(x) for x in a))
        if a.size == 0 or np.any(a <= 0) or not np.all(np.isfinite(a)):
            raise ValueError("inflation factors must be positive and finite")
        if abs(np.sum(1.0 / a) - 1.0) > 1e-12:
            raise ValueError(f"inverse inflation factors sum to {np.sum(1.0 / a)!r}, not 1")

    @property
    def n_a(self) -> int:
        return len(self.alphas)


def default_schedule(n_a: int) -> MdaSchedule:
    """Constant inflation ``alpha_k = n_a``."""
    if n_a < 1:
        raise ValueError("n_a must be >= 1")
    return MdaSchedule((float(n_a),) * n_a)


def _mix64(z: np.ndarray) -> np.ndarray:
    """SplitMix64 finalizer on a uint64 array (wrapping arithmetic)."""
    z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
    z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
    return z ^ (z >> np.uint64(31))


def _derive_keys(seed: int, index: np.ndarray) -> np.ndarray:
    """Vectorized ``derive_seed(seed, index)``."""
    golden = (int(seed) * 0x9E3779B97F4A7C15) & ((1 << 64) - 1)
    return _mix64(np.uint64(golden) + np.asarray(index, dtype=np.uint64) + np.uint64(1))


def member_normals(seed: int, member_ids, n: int) -> np.ndarray:
    """Standard normals of shape ``(n, n_members)``; column ``j`` depends on ``(seed, id_j)`` only.

    Counter-based: datum ``r`` of member ``m`` hashes the member key
    ``derive_seed(seed, m)`` with counters ``2r`` and ``2r + 1`` into two
    uniforms and applies the Box-Muller transform.  Large ensembles thus
    need no per-member generator objects.
    """
    ids = np.asarray(member_ids, dtype=np.int64)
    if np.any(ids < 0):
        raise ValueError("member ids must be >= 0")
    with np.errstate(over="ignore"):
        keys = _derive_keys(seed, ids.astype(np.uint64))
        counter = np.arange(n, dtype=np.uint64)[:, None] * np.uint64(2)
        bits1 = _derive_keys(0, keys[None, :] + counter)
        bits2 = _derive_keys(0, keys[None, :] + counter + np.uint64(1))
    u1 = ((bits1 >> np.uint64(11)).astype(np.float64) + 1.0) * 2.0**-53  # (0, 1]
    u2 = (bits2 >> np.uint64(11)).astype(np.float64) * 2.0**-53  # [0, 1)
    return np.sqrt(-2.0 * np.log(u1)) * np.cos(2.0 * np.pi * u2)


def perturb_observations(obs: ObservationSet, alpha: float, seed: int, member_ids) -> np.ndarray:
    """Columns ``d_obs + e_j`` with ``e_j ~ N(0, alpha C_e)``.

    Member ``m``'s noise is a function of ``(seed, m)`` alone (see
    ``member_normals``), so a member keeps its noise when the ensemble is
    reordered.
    """
    if alpha <= 0:
        raise ValueError("alpha must be > 0")
    scale = np.sqrt(alpha * obs.variance)
    noise = member_normals(seed, member_ids, len(obs))
    return obs.d_obs[:, None] + scale[:, None] * noise


def _truncated_inverse(mat: np.ndarray, energy: float) -> np.ndarray:
    u, s, vt = np.linalg.svd(mat)
    if s[0] <= 0:
        return np.zeros_like(mat)
    keep = int(np.searchsorted(np.cumsum(s) / np.sum(s), energy) + 1)
    keep = min(keep, s.size)
    return (vt[:keep].T / s[:keep]) @ u[:, :keep].T


def esmda_update(ens: LatentEnsemble, D: np.ndarray, obs: ObservationSet, alpha: float,
                 seed: int, energy: float = 0.999) -> LatentEnsemble:
    """One smoother update of the latent ensemble against predicted data ``D``."""
    D = np.asarray(D, dtype=np.float64)
    if D.shape != (len(obs), ens.n_e):
        raise ValueError(f"predicted data must be {(len(obs), ens.n_e)}, got {D.shape}")
    if not np.all(np.isfinite(D)):
        raise ValueError("predicted data contain non-finite entries")
    d_pert = perturb_observations(obs, alpha, seed, ens.member_ids)
    n_e = ens.n_e
    dz = (ens.z - ens.z.mean(axis=1, keepdims=True)) / np.sqrt(n_e - 1)
    dd = (D - D.mean(axis=1, keepdims=True)) / np.sqrt(n_e - 1)
    # work in data scaled by the error standard deviations
    inv_std = 1.0 / obs.std
    dd_s = dd * inv_std[:, None]
    c_dd = dd_s @ dd_s.T + alpha * np.eye(len(obs))
    inv = _truncated_inverse(c_dd, energy)
    innov = (d_pert - D) * inv_std[:, None]
    z_new = ens.z + (dz @ dd_s.T) @ (inv @ innov)
    return LatentEnsemble(z_new, ens.member_ids.copy())


def normalized_mismatch(D: np.ndarray, obs: ObservationSet) -> np.ndarray:
    """Per-member ``(d - d_obs)^T C_e^-1 (d - d_obs) / n_d``."""
    r = (np.asarray(D) - obs.d_obs[:, None]) / obs.std[:, None]
    return np.sum(r * r, axis=0) / len(obs)


def hard_data_operator(soft: np.ndarray, obs: ObservationSet) -> np.ndarray:
    """Decoded probability of each observed facies at its cell.

    ``soft`` has shape ``(n_e, k, ny, nx)``; rows for non-hard data are
    not produced, so ``obs`` must contain only hard data.
    """
    cells = obs.hard_cells()
    if len(cells) != len(obs):
        raise ValueError("hard_data_operator needs an observation set of hard data only")
    ii = np.array([c[0] for c in cells])
    jj = np.array([c[1] for c in cells])
    kk = np.array([c[2] for c in cells])
    _, k, ny, nx = soft.shape
    if np.any(ii < 0) or np.any(ii >= nx) or np.any(jj < 0) or np.any(jj >= ny):
        raise ValueError("hard data cell outside the grid")
    if np.any(kk >= k):
        raise ValueError("observed facies code exceeds the decoder's channel count")
    return soft[:, kk, jj, ii].T.copy()


def hard_data_forward(decoder, z: np.ndarray, obs: ObservationSet) -> np.ndarray:
    """Decode the columns of ``z`` and read the observed-facies probabilities."""
    return hard_data_operator(decoder.decode(np.asarray(z).T), obs)


def _simulate_codes(args):
    codes, cfg = args
    return simulate(codes, cfg).vector()


class ProductionForward:
    """Decoded facies -> flow simulation -> predicted well data.

    ``threads > 1`` fans simulations out to worker processes; results are
    gathered in member order so output does not depend on the worker count.
    """

    def __init__(self, sim_cfg: SimConfig, threads: int = 1):
        self.sim_cfg = sim_cfg
        self.threads = max(1, int(threads))

    def __call__(self, soft: np.ndarray) -> np.ndarray:
        codes = from_soft(soft)
        jobs = [(c, self.sim_cfg) for c in codes]
        if self.threads == 1:
            cols = [_simulate_codes(j) for j in jobs]
        else:
            with ProcessPoolExecutor(self.threads) as pool:
                cols = list(pool.map(_simulate_codes, jobs, chunksize=max(1, len(jobs) // (4 * self.threads))))
        return np.stack(cols, axis=1)


@dataclass
class IterationRecord:
    iteration: int
    alpha: float | None
    predicted: np.ndarray
    member_mismatch: np.ndarray
    honor_rate: float | None
    latent: np.ndarray

    @property
    def mean_mismatch(self) -> float:
        return float(np.mean(self.member_mismatch))


@dataclass
class AssimilationReport:
    """Prior plus one record per smoother update (``n_a + 1`` entries)."""

    records: list = field(default_factory=list)
    posterior: LatentEnsemble | None = None
    posterior_facies: list = field(default_factory=list)
    prior_facies: list = field(default_factory=list)
    prior_source: str = "encoder"

    def __len__(self):
        return len(self.records)

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["iteration", "alpha", "mean_mismatch", "min_mismatch", "max_mismatch",
                        "honor_rate", "prior_source"])
            for r in self.records:
                w.writerow([r.iteration, "" if r.alpha is None else repr(r.alpha),
                            repr(r.mean_mismatch), repr(float(r.member_mismatch.min())),
                            repr(float(r.member_mismatch.max())),
                            "" if r.honor_rate is None else repr(r.honor_rate), self.prior_source])

    def write_member_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["iteration", "member", "mismatch"])
            for r in self.records:
                for m, phi in enumerate(r.member_mismatch):
                    w.writerow([r.iteration, m, repr(float(phi))])


def _honor_rate(codes: np.ndarray, obs: ObservationSet) -> float | None:
    cells = obs.hard_cells()
    if not cells:
        return None
    ok = np.ones(codes.shape[0], dtype=bool)
    for i, j, c in cells:
        ok &= codes[:, j, i] == c
    return float(ok.mean())


def run_assimilation(decoder, forward: Callable[[np.ndarray], np.ndarray], prior: LatentEnsemble,
                     obs: ObservationSet, schedule: MdaSchedule, seed: int,
                     prior_source: str = "encoder", energy: float = 0.999) -> AssimilationReport:
    """Decode, forward, update for each inflation factor; then decode the posterior.

    ``forward`` maps soft decoded images ``(n_e, k, ny, nx)`` to a predicted
    data matrix ``(n_d, n_e)``.  Iteration ``k`` perturbs observations with
    ``derive_seed(seed, k)``.
    """
    report = AssimilationReport(prior_source=prior_source)
    ens = prior
    n_a = schedule.n_a
    for k in range(n_a + 1):
        soft = decoder.decode(ens.z.T)
        codes = from_soft(soft)
        try:
            D = np.asarray(forward(soft), dtype=np.float64)
        except Exception as exc:
            raise ForwardModelError(k, getattr(exc, "member", None), exc) from exc
        if D.shape != (len(obs), ens.n_e):
            raise ForwardModelError(k, None, ValueError(f"forward returned shape {D.shape}"))
        bad = np.where(~np.all(np.isfinite(D), axis=0))[0]
        if bad.size:
            raise ForwardModelError(k, int(bad[0]), ValueError("non-finite predicted data"))
        alpha = None if k == n_a else schedule.alphas[k]
        rec = IterationRecord(k, alpha, D, normalized_mismatch(D, obs), _honor_rate(codes, obs),
                              ens.z.copy())
        report.records.append(rec)
        log.info("iteration %d: mean mismatch %.4g honor %s", k, rec.mean_mismatch, rec.honor_rate)
        if k == 0:
            report.prior_facies = [FaciesGrid(c, n_facies=soft.shape[1]) for c in codes]
        if k == n_a:
            report.posterior = ens
            report.posterior_facies = [FaciesGrid(c, n_facies=soft.shape[1]) for c in codes]
            break
        ens = esmda_update(ens, D, obs, alpha, derive_seed(seed, k), energy=energy)
    return report


def prior_latents_from_realizations(encoder, realizations: Sequence[FaciesGrid]) -> LatentEnsemble:
    """Encoder means of prior realizations, one column per realization."""
    x = to_one_hot(list(realizations), encoder.input_shape[0])
    mu, _ = encoder.encode(x)
    return LatentEnsemble(mu.T)


def sample_prior(n_z: int, n_e: int, seed: int) -> LatentEnsemble:
    """Latent prior drawn from ``N(0, I)``."""
    return LatentEnsemble(np.random.default_rng(seed).standard_normal((n_z, n_e)))


def production_observations(data: PredictedData, noise_fraction: float = 0.05, seed: int = 0,
                            water_cut_floor: float = 0.01, rate_floor_fraction: float = 0.01,
                            add_noise: bool = True) -> ObservationSet:
    """Noisy well data from a reference simulation.

    Standard deviation is ``noise_fraction * |d|`` floored at
    ``water_cut_floor`` for water cut and at ``rate_floor_fraction`` times
    the mean reference rate for rates.
    """
    labels = data.labels()
    d = data.vector()
    kinds = [q for _, _, q in labels]
    rate_floor = rate_floor_fraction * float(np.mean(data.rates))
    floor = np.array([water_cut_floor if q == WATER_CUT else rate_floor for q in kinds])
    std = np.maximum(noise_fraction * np.abs(d), floor)
    values = d.copy()
    if add_noise:
        values = d + std * np.random.default_rng(seed).standard_normal(d.size)
    return ObservationSet(kinds, [w for _, w, _ in labels], [t for t, _, _ in labels], values, std**2)


def hard_observations(reference: FaciesGrid, cells: Sequence[tuple[int, int]],
                      variance: float = 0.01) -> ObservationSet:
    """Facies codes of ``reference`` at ``cells`` (``(i, j)`` pairs)."""
    vals = [int(reference.codes[j, i]) for i, j in cells]
    return ObservationSet([HARD] * len(cells), [tuple(map(int, c)) for c in cells],
                          np.zeros(len(cells)), vals, np.full(len(cells), variance))


def _fmt_location(loc) -> str:
    return f"{loc[0]}:{loc[1]}" if isinstance(loc, tuple) else str(loc)


def _parse_location(kind: str, text: str):
    if kind == HARD:
        i, j = text.split(":")
        return int(i), int(j)
    return text


def write_observations_csv(path, obs: ObservationSet) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["time", "well_or_cell", "kind", "value", "stddev"])
        for k, loc, t, v, s in zip(obs.kind, obs.location, obs.time, obs.value, obs.std):
            w.writerow([repr(float(t)), _fmt_location(loc), k, repr(float(v)), repr(float(s))])


def read_observations_csv(path) -> ObservationSet:
    kinds, locs, times, vals, var = [], [], [], [], []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        missing = {"time", "well_or_cell", "kind", "value", "stddev"} - set(reader.fieldnames or ())
        if missing:
            raise ValueError(f"{path}: missing columns {sorted(missing)}")
        for row in reader:
            kinds.append(row["kind"])
            locs.append(_parse_location(row["kind"], row["well_or_cell"]))
            times.append(float(row["time"]))
            vals.append(float(row["value"]))
            var.append(float(row["stddev"]) ** 2)
    return ObservationSet(kinds, locs, times, vals, var)
