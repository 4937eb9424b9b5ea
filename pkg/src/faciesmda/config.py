"""Experiment configuration: flat ``section.key = value`` text files.

Blank lines and ``#`` comments are ignored.  Every tunable has a default,
so an empty file is a valid configuration.  Lists are comma separated;
wells are written ``sim.well.<NAME> = kind, i, j, bhp`` and hard-data
cells ``assim.hard_cells = i:j, i:j, ...``.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from pathlib import Path

from .flowsim import SimConfig, Well
from .geomodel import ChannelGenParams, derive_seed
from .nn.train import TrainConfig

__all__ = ["ConfigError", "ExperimentConfig", "parse_config", "load_config", "DEFAULT_WELLS"]

DEFAULT_WELLS = (
    Well("P1", 2, 2, "producer", 206.8),
    Well("P2", 29, 2, "producer", 206.8),
    Well("P3", 2, 29, "producer", 206.8),
    Well("P4", 29, 29, "producer", 206.8),
    Well("I1", 16, 6, "injector", 275.8),
    Well("I2", 16, 16, "injector", 275.8),
    Well("I3", 16, 26, "injector", 275.8),
)
DEFAULT_REPORT_TIMES = tuple(float(t) for t in range(20, 301, 20))

# stage indices for seeds derived from the master seed
_STAGES = {"gen": 1, "net": 2, "train": 3, "obs": 4, "assim": 5, "prior": 6}


class ConfigError(ValueError):
    pass


@dataclass
class ExperimentConfig:
    seed: int = 2024
    seeds: dict = field(default_factory=dict)
    gen: ChannelGenParams = field(default_factory=ChannelGenParams)
    n_train: int = 2000
    n_val: int = 500
    net_preset: str = "table1-desk"
    net_dropout: float = 0.1
    net_overrides: dict = field(default_factory=dict)
    train: TrainConfig = field(default_factory=lambda: TrainConfig(batch_size=4))
    # None: one over the number of grid cells, which weights the KL term
    # against a reconstruction loss summed over cells instead of averaged
    kl_weight: float | None = None
    sim: SimConfig = field(default_factory=lambda: SimConfig(wells=DEFAULT_WELLS,
                                                             report_times=DEFAULT_REPORT_TIMES))
    n_e: int = 100
    n_a: int = 4
    alphas: tuple | None = None
    noise_fraction: float = 0.05
    water_cut_floor: float = 0.01
    rate_floor_fraction: float = 0.01
    hard_variance: float = 0.01
    hard_cells: tuple | None = None
    prior: str = "encoder"
    svd_energy: float = 0.999
    workdir: Path = Path("run")

    def stage_seed(self, stage: str) -> int:
        """Explicit ``<stage>.seed`` if given, else derived from the master seed."""
        if stage in self.seeds:
            return self.seeds[stage]
        return derive_seed(self.seed, _STAGES[stage])

    def train_config(self) -> TrainConfig:
        lam = self.kl_weight
        if lam is None:
            lam = 1.0 / (self.gen.nx * self.gen.ny)
        return replace(self.train, seed=self.stage_seed("train"), kl_weight=lam)

    def resolved_hard_cells(self) -> tuple:
        if self.hard_cells is not None:
            return self.hard_cells
        return tuple((w.i, w.j) for w in self.sim.wells)

    def path(self, name: str) -> Path:
        return Path(self.workdir) / name


def _floats(text):
    return tuple(float(v) for v in text.split(","))


def parse_config(text: str, base_dir: Path | str = ".") -> ExperimentConfig:
    kv: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value, got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if key in kv:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        kv[key] = value
    try:
        return _build(kv, Path(base_dir))
    except ConfigError:
        raise
    except (ValueError, TypeError, KeyError) as exc:
        raise ConfigError(str(exc)) from exc


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_config(text, base_dir=path.parent)


def _build(kv: dict, base_dir: Path) -> ExperimentConfig:
    used = set()

    def get(key, conv=str, default=None):
        if key in kv:
            used.add(key)
            return conv(kv[key])
        return default

    cfg = ExperimentConfig()
    cfg.seed = get("seed", int, cfg.seed)
    for stage in _STAGES:
        s = get(f"{stage}.seed", int)
        if s is not None:
            cfg.seeds[stage] = s

    nx = get("grid.nx", int, 32)
    ny = get("grid.ny", int, 32)
    g = ChannelGenParams()
    gen_kwargs = dict(nx=nx, ny=ny)
    for name, conv in (("n_channels", int), ("width", float), ("amplitude", float),
                       ("wavelength", float)):
        lo = get(f"gen.{name}_min", conv, getattr(g, name)[0])
        hi = get(f"gen.{name}_max", conv, getattr(g, name)[1])
        gen_kwargs[name] = (lo, hi)
    gen_kwargs["fraction_band"] = (get("gen.fraction_min", float, g.fraction_band[0]),
                                   get("gen.fraction_max", float, g.fraction_band[1]))
    gen_kwargs["orientation"] = get("gen.orientation", str, g.orientation)
    gen_kwargs["max_attempts"] = get("gen.max_attempts", int, g.max_attempts)
    cfg.gen = ChannelGenParams(**gen_kwargs)
    cfg.n_train = get("gen.n_train", int, cfg.n_train)
    cfg.n_val = get("gen.n_val", int, cfg.n_val)

    cfg.net_preset = get("net.preset", str, cfg.net_preset)
    cfg.net_dropout = get("net.dropout", float, cfg.net_dropout)
    if "net.n_z" in kv:
        cfg.net_overrides["n_z"] = get("net.n_z", int)
    if "net.dense_units" in kv:
        cfg.net_overrides["dense_units"] = get("net.dense_units", int)
    if "net.convs" in kv:
        # filters:kernel:stride triples, comma separated
        triples = [tuple(int(p) for p in t.split(":")) for t in get("net.convs").split(",")]
        cfg.net_overrides["convs"] = triples

    t = cfg.train
    cfg.train = TrainConfig(
        epochs=get("train.epochs", int, t.epochs),
        batch_size=get("train.batch_size", int, t.batch_size),
        learning_rate=get("train.learning_rate", float, t.learning_rate),
        beta1=get("train.beta1", float, t.beta1),
        beta2=get("train.beta2", float, t.beta2),
        adam_eps=get("train.adam_eps", float, t.adam_eps),
    )
    cfg.kl_weight = get("train.kl_weight", float, None)
    if cfg.kl_weight is not None and cfg.kl_weight < 0:
        raise ConfigError("train.kl_weight must be >= 0")

    s = cfg.sim
    wells = []
    for key in sorted(k for k in kv if k.startswith("sim.well.")):
        used.add(key)
        name = key[len("sim.well."):]
        parts = [p.strip() for p in kv[key].split(",")]
        if len(parts) != 4:
            raise ConfigError(f"{key}: expected 'kind, i, j, bhp'")
        wells.append(Well(name, int(parts[1]), int(parts[2]), parts[0], float(parts[3])))
    perms = dict(s.facies_perm)
    for key in [k for k in kv if k.startswith("sim.perm.")]:
        used.add(key)
        perms[int(key[len("sim.perm."):])] = float(kv[key])
    cfg.sim = SimConfig(
        nx=nx, ny=ny,
        dx=get("sim.dx", float, s.dx), dy=get("sim.dy", float, s.dy),
        thickness=get("sim.thickness", float, s.thickness),
        facies_perm=perms,
        wells=tuple(wells) if wells else s.wells,
        viscosity=get("sim.viscosity", float, s.viscosity),
        porosity=get("sim.porosity", float, s.porosity),
        report_times=get("sim.report_times", _floats, s.report_times),
        cfl=get("sim.cfl", float, s.cfl),
        cg_tol=get("sim.cg_tol", float, s.cg_tol),
        cg_maxiter=get("sim.cg_maxiter", int, s.cg_maxiter),
    )

    cfg.n_e = get("assim.n_e", int, cfg.n_e)
    cfg.n_a = get("assim.n_a", int, cfg.n_a)
    cfg.alphas = get("assim.alphas", _floats, None)
    cfg.noise_fraction = get("assim.noise_fraction", float, cfg.noise_fraction)
    cfg.water_cut_floor = get("assim.water_cut_floor", float, cfg.water_cut_floor)
    cfg.rate_floor_fraction = get("assim.rate_floor_fraction", float, cfg.rate_floor_fraction)
    cfg.hard_variance = get("assim.hard_variance", float, cfg.hard_variance)
    cells = get("assim.hard_cells", str)
    if cells is not None:
        cfg.hard_cells = tuple(tuple(int(v) for v in c.split(":")) for c in cells.split(","))
    cfg.prior = get("assim.prior", str, cfg.prior)
    if cfg.prior not in ("encoder", "gaussian"):
        raise ConfigError(f"assim.prior must be 'encoder' or 'gaussian', got {cfg.prior!r}")
    cfg.svd_energy = get("assim.svd_energy", float, cfg.svd_energy)
    if cfg.n_e < 2 or cfg.n_a < 1:
        raise ConfigError("assim.n_e must be >= 2 and assim.n_a >= 1")

    workdir = Path(get("paths.workdir", str, "run"))
    cfg.workdir = workdir if workdir.is_absolute() else base_dir / workdir

    unknown = sorted(set(kv) - used)
    if unknown:
        raise ConfigError(f"unknown configuration key(s): {', '.join(unknown)}")
    return cfg
