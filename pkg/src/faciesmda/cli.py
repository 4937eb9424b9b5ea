"""Command-line front door: ``faciesmda <subcommand>``.

Every command reads the same flat configuration file and works inside
``paths.workdir``, which holds the artifacts passed between commands::

    data/train.fcds  data/val.fcds  data/prior.fcds  data/reference.fcds
    net/vae.ckpt  net/history.csv
    obs/hard.csv  obs/production.csv
    runs/<mode>/...  (see ``cmd_assimilate``)

Exit status is 0 on success, 2 for invalid input or missing files and 3
for numerical failures (divergence, solver breakdown, forward-model
errors).
"""
from __future__ import annotations

import argparse
import csv
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .assimilate import (HARD, ForwardModelError, MdaSchedule, ObservationSet, ProductionForward,
                         default_schedule, hard_data_operator, hard_observations,
                         normalized_mismatch, prior_latents_from_realizations,
                         production_observations, read_observations_csv, run_assimilation,
                         sample_prior, write_observations_csv)
from .config import ConfigError, ExperimentConfig, load_config
from .flowsim import ConvergenceError, simulate
from .geomodel import (FaciesGrid, channel_fraction, derive_seed, generate_channel_realization,
                       generate_dataset, read_dataset, write_dataset)
from .nn import (NumericalError, VaeNetwork, load_training_state, read_history_csv, save_checkpoint,
                 train, write_history_csv)

__all__ = ["main", "build_parser", "write_pgm", "cmd_gen_data", "cmd_train", "cmd_make_obs",
           "cmd_assimilate", "cmd_report"]

log = logging.getLogger("faciesmda")

EXIT_OK, EXIT_INVALID, EXIT_NUMERICAL = 0, 2, 3
N_MAP_MEMBERS = 20
MODES = ("hard", "production")


def write_pgm(path, codes: np.ndarray, n_facies: int = 2) -> None:
    """Binary PGM (P5) of a facies grid; row ``j = 0`` is the top line."""
    codes = np.asarray(codes)
    if codes.ndim != 2:
        raise ValueError(f"expected a 2D grid, got shape {codes.shape}")
    scale = 255 // max(n_facies - 1, 1)
    pix = (codes.astype(np.int64) * scale).clip(0, 255).astype(np.uint8)
    ny, nx = pix.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{nx} {ny}\n255\n".encode("ascii"))
        fh.write(pix.tobytes())


def _require(path: Path, what: str) -> Path:
    if not path.exists():
        raise FileNotFoundError(f"{what} not found at {path}; run the producing command first")
    return path


def _write_matrix(path, obs: ObservationSet, D: np.ndarray) -> None:
    """Predicted data matrix, one row per datum and one column per member."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["time", "well_or_cell", "kind"] + [f"m{j:03d}" for j in range(D.shape[1])])
        for r in range(D.shape[0]):
            loc = obs.location[r]
            loc = f"{loc[0]}:{loc[1]}" if isinstance(loc, tuple) else loc
            w.writerow([repr(float(obs.time[r])), loc, obs.kind[r]] + [repr(float(v)) for v in D[r]])


def _read_matrix(path) -> tuple[list, np.ndarray]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if len(rows) < 2:
        raise ValueError(f"{path}: empty predicted-data matrix")
    keys = [(float(r[0]), r[1], r[2]) for r in rows[1:]]
    return keys, np.array([[float(v) for v in r[3:]] for r in rows[1:]])


# -- gen-data ---------------------------------------------------------------

def cmd_gen_data(cfg: ExperimentConfig, args) -> int:
    seed = cfg.stage_seed("gen")
    out = cfg.path("data")
    out.mkdir(parents=True, exist_ok=True)
    train_set = generate_dataset(cfg.gen, cfg.n_train, derive_seed(seed, 0))
    val_set = generate_dataset(cfg.gen, cfg.n_val, derive_seed(seed, 1))
    prior_set = generate_dataset(cfg.gen, cfg.n_e, derive_seed(seed, 2))
    # the reference must not appear verbatim in the training set
    seen = {g.codes.tobytes() for g in train_set}
    index = 0
    while True:
        reference = generate_channel_realization(cfg.gen, derive_seed(derive_seed(seed, 3), index))
        if reference.codes.tobytes() not in seen:
            break
        index += 1
    write_dataset(out / "train.fcds", train_set)
    write_dataset(out / "val.fcds", val_set)
    write_dataset(out / "prior.fcds", prior_set)
    write_dataset(out / "reference.fcds", [reference])
    write_pgm(out / "reference.pgm", reference.codes, reference.n_facies)
    for name, ds in (("train", train_set), ("val", val_set), ("prior", prior_set)):
        f = np.array([channel_fraction(g) for g in ds])
        print(f"{name}: {len(ds)} realizations, channel fraction mean {f.mean():.4f} "
              f"min {f.min():.4f} max {f.max():.4f}")
    print(f"reference: channel fraction {channel_fraction(reference):.4f}")
    return EXIT_OK


# -- train ------------------------------------------------------------------

def cmd_train(cfg: ExperimentConfig, args) -> int:
    data = cfg.path("data")
    train_set = read_dataset(_require(data / "train.fcds", "training set"))
    val_set = read_dataset(_require(data / "val.fcds", "validation set"))
    net_dir = cfg.path("net")
    net_dir.mkdir(parents=True, exist_ok=True)
    ckpt, hist_path = net_dir / "vae.ckpt", net_dir / "history.csv"
    tcfg = cfg.train_config()
    if args.resume:
        net, start, adam = load_training_state(_require(ckpt, "checkpoint"))
        history = read_history_csv(hist_path) if hist_path.exists() else None
        if history is not None and len(history) != start:
            raise ValueError(f"history has {len(history)} epochs but checkpoint has {start}")
    else:
        k = max(g.n_facies for g in train_set)
        shape = (k, train_set[0].ny, train_set[0].nx)
        net = VaeNetwork.from_preset(cfg.net_preset, shape, seed=cfg.stage_seed("net"),
                                     dropout=cfg.net_dropout, **cfg.net_overrides)
        start, adam, history = 0, None, None

    def progress(epoch, tl, vl, va):
        print(f"epoch {epoch}: train_loss {tl:.6f} val_loss {vl:.6f} val_accuracy {va:.4f}",
              flush=True)

    net, history, adam = train(net, train_set, val_set, tcfg, adam=adam, start_epoch=start,
                               history=history, progress=progress)
    save_checkpoint(net, ckpt, epoch=len(history), adam=adam)
    write_history_csv(hist_path, history)
    if len(history):
        print(f"final validation accuracy {history.val_accuracy[-1]!r}")
    return EXIT_OK


# -- make-obs ---------------------------------------------------------------

def cmd_make_obs(cfg: ExperimentConfig, args) -> int:
    reference = read_dataset(_require(cfg.path("data") / "reference.fcds", "reference grid"))[0]
    out = cfg.path("obs")
    out.mkdir(parents=True, exist_ok=True)
    if args.mode == "hard":
        cells = cfg.resolved_hard_cells()
        for i, j in cells:
            if not (0 <= i < reference.nx and 0 <= j < reference.ny):
                raise ValueError(f"hard cell ({i}, {j}) lies outside the grid")
        obs = hard_observations(reference, cells, variance=cfg.hard_variance)
    else:
        data = simulate(reference, replace(cfg.sim, nx=reference.nx, ny=reference.ny))
        obs = production_observations(data, cfg.noise_fraction, cfg.stage_seed("obs"),
                                      cfg.water_cut_floor, cfg.rate_floor_fraction,
                                      add_noise=not args.no_noise)
    path = out / f"{args.mode}.csv"
    write_observations_csv(path, obs)
    print(f"wrote {len(obs)} {args.mode} observations to {path}")
    return EXIT_OK


# -- assimilate -------------------------------------------------------------

class _HardForward:
    def __init__(self, obs):
        self.obs = obs

    def __call__(self, soft):
        return hard_data_operator(soft, self.obs)


def cmd_assimilate(cfg: ExperimentConfig, args) -> int:
    """Run ES-MDA and write ``runs/<mode>/``.

    Files: ``observations.csv``, ``mismatch.csv`` (per iteration),
    ``member_mismatch.csv``, ``predicted_prior.csv`` and
    ``predicted_posterior.csv`` (data x member), ``prior.fcds`` and
    ``posterior.fcds`` (decoded facies) and PGM maps of the first
    members in ``maps/``.
    """
    net, _, _ = load_training_state(_require(cfg.path("net") / "vae.ckpt", "checkpoint"))
    obs = read_observations_csv(_require(cfg.path("obs") / f"{args.mode}.csv", "observations"))
    if args.mode == "hard" and not np.all(obs.is_hard):
        raise ValueError("hard-mode observations must all be facies data")
    if args.mode == "production" and np.any(obs.is_hard):
        raise ValueError("production-mode observations must not contain facies data")
    if cfg.prior == "encoder":
        realizations = read_dataset(_require(cfg.path("data") / "prior.fcds", "prior realizations"))
        if len(realizations) < cfg.n_e:
            raise ValueError(f"prior.fcds holds {len(realizations)} realizations, need {cfg.n_e}")
        prior = prior_latents_from_realizations(net, realizations[:cfg.n_e])
    else:
        prior = sample_prior(net.n_z, cfg.n_e, cfg.stage_seed("prior"))
    schedule = MdaSchedule(tuple(cfg.alphas)) if cfg.alphas else default_schedule(cfg.n_a)
    if args.mode == "hard":
        forward = _HardForward(obs)
    else:
        _, ny, nx = net.input_shape
        forward = ProductionForward(replace(cfg.sim, nx=nx, ny=ny), threads=args.threads)
    report = run_assimilation(net, forward, prior, obs, schedule, cfg.stage_seed("assim"),
                              prior_source=cfg.prior, energy=cfg.svd_energy)

    run = cfg.path("runs") / args.mode
    (run / "maps").mkdir(parents=True, exist_ok=True)
    write_observations_csv(run / "observations.csv", obs)
    report.write_csv(run / "mismatch.csv")
    report.write_member_csv(run / "member_mismatch.csv")
    _write_matrix(run / "predicted_prior.csv", obs, report.records[0].predicted)
    _write_matrix(run / "predicted_posterior.csv", obs, report.records[-1].predicted)
    write_dataset(run / "prior.fcds", report.prior_facies)
    write_dataset(run / "posterior.fcds", report.posterior_facies)
    for m in range(min(N_MAP_MEMBERS, len(report.posterior_facies))):
        for stage, grids in (("prior", report.prior_facies), ("posterior", report.posterior_facies)):
            write_pgm(run / "maps" / f"{stage}_{m:03d}.pgm", grids[m].codes, grids[m].n_facies)
    first, last = report.records[0], report.records[-1]
    print(f"prior source: {cfg.prior}")
    print(f"mean mismatch: prior {first.mean_mismatch:.6g} posterior {last.mean_mismatch:.6g}")
    if last.honor_rate is not None:
        print(f"members honoring all hard data: prior {first.honor_rate:.3f} "
              f"posterior {last.honor_rate:.3f}")
    return EXIT_OK


# -- report -----------------------------------------------------------------

def _series_rows(times, observed, prior, post):
    q = (10, 50, 90)
    pr = np.percentile(prior, q, axis=1)
    po = np.percentile(post, q, axis=1)
    mean = post.mean(axis=1)
    for r, t in enumerate(times):
        yield [repr(t), repr(float(observed[r]))] + [repr(float(v)) for v in pr[:, r]] \
            + [repr(float(v)) for v in po[:, r]] + [repr(float(mean[r]))]


def cmd_report(cfg: ExperimentConfig, args) -> int:
    """Per-well (or per-cell) data-match CSVs for a finished run directory."""
    run = Path(args.run_dir) if args.run_dir else cfg.path("runs") / args.mode
    obs = read_observations_csv(_require(run / "observations.csv", "run observations"))
    keys_pr, prior = _read_matrix(_require(run / "predicted_prior.csv", "prior predictions"))
    keys_po, post = _read_matrix(_require(run / "predicted_posterior.csv", "posterior predictions"))
    if len(keys_pr) != len(obs) or keys_pr != keys_po:
        raise ValueError(f"{run}: prediction files do not match the observations")
    out = run / "report"
    out.mkdir(exist_ok=True)
    groups: dict[tuple[str, str], list[int]] = {}
    for r, (_, loc, kind) in enumerate(keys_pr):
        groups.setdefault((loc, kind), []).append(r)
    header = ["time", "observed", "prior_p10", "prior_p50", "prior_p90",
              "post_p10", "post_p50", "post_p90", "post_mean"]
    for (loc, kind), rows in groups.items():
        name = f"{loc.replace(':', '_')}_{kind}.csv"
        with open(out / name, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(header)
            w.writerows(_series_rows([keys_pr[r][0] for r in rows], obs.value[rows],
                                     prior[rows], post[rows]))
    phi_prior = normalized_mismatch(prior, obs)
    phi_post = normalized_mismatch(post, obs)
    locations = sorted({loc for loc, _ in groups})
    print(f"run {run}: {len(obs)} data at {len(locations)} "
          f"{'cells' if obs.kind[0] == HARD else 'wells'}, {prior.shape[1]} members")
    print(f"mean mismatch: prior {phi_prior.mean():.6g} posterior {phi_post.mean():.6g}")
    print(f"wrote {len(groups)} series to {out}")
    return EXIT_OK


# -- entry point ------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="faciesmda", description=__doc__.split("\n")[0])
    p.add_argument("--config", type=Path, help="key = value configuration file")
    p.add_argument("--seed", type=int, help="master seed, overrides the configuration")
    p.add_argument("--threads", type=int, default=1, help="worker processes for flow simulation")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("gen-data", help="generate training, validation, prior and reference grids")
    t = sub.add_parser("train", help="train the VAE")
    t.add_argument("--resume", action="store_true", help="continue from net/vae.ckpt")
    m = sub.add_parser("make-obs", help="observations from the reference grid")
    m.add_argument("mode", choices=MODES)
    m.add_argument("--no-noise", action="store_true", help="production data without noise")
    a = sub.add_parser("assimilate", help="condition the latent ensemble with ES-MDA")
    a.add_argument("mode", choices=MODES)
    r = sub.add_parser("report", help="data-match CSVs for an assimilation run")
    r.add_argument("mode", choices=MODES)
    r.add_argument("--run-dir", help="run directory (default runs/<mode> in the workdir)")
    return p


_COMMANDS = {"gen-data": cmd_gen_data, "train": cmd_train, "make-obs": cmd_make_obs,
             "assimilate": cmd_assimilate, "report": cmd_report}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.threads < 1:
            raise ValueError("--threads must be >= 1")
        cfg = load_config(args.config) if args.config else ExperimentConfig()
        if args.seed is not None:
            cfg.seed = args.seed
        return _COMMANDS[args.command](cfg, args)
    except (NumericalError, ConvergenceError, ForwardModelError, FloatingPointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (ConfigError, ValueError, KeyError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
