"""Experiment configuration, noise injection, metrics and the end-to-end pipeline."""

from __future__ import annotations

import csv
import difflib
import hashlib
import json
import logging
import math
import os
import platform
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Optional

import numpy as np
import torch

from . import __version__, diffnet, fdm, inverse, training
from .diffnet import NetworkConfig, NetworkParams
from .fdm import FdmConfig
from .inverse import FtmConfig
from .physics import (
    AirProperties,
    SourceWaveform,
    TubeGeometry,
    loss_coefficients,
    radiation_from_taylor,
    rosenberg_flow,
)
from .training import CollocationConfig, LossWeights, TrainConfig

log = logging.getLogger(__name__)


class ConfigError(ValueError):
    """Unknown key or invalid value in an experiment configuration."""


class StageError(RuntimeError):
    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage '{stage}' failed: {type(cause).__name__}: {cause}")
        self.stage = stage
        self.cause = cause


# ---------------------------------------------------------------- configuration


@dataclass
class GeometryConfig:
    length: float = 1.0
    radius: float = 0.02
    radius_end: Optional[float] = None

    def build(self) -> TubeGeometry:
        if self.radius_end is None:
            return TubeGeometry(self.length, self.radius)
        return TubeGeometry.conical(self.length, self.radius, self.radius_end)


@dataclass
class SourceConfig:
    U0: float = 5e-4
    frequency: float = 261.6
    tp_frac: float = 0.40
    tn_frac: float = 0.16
    smooth_periods: float = 1.0 / 200.0

    def build(self) -> SourceWaveform:
        T = 1.0 / self.frequency
        return SourceWaveform(self.U0, T, self.tp_frac, self.tn_frac, self.smooth_periods * T)


@dataclass
class RadiationConfig:
    delta: float = 0.8236
    beta_c: float = 0.5


@dataclass
class NetworkSection:
    n_f: int = 200
    n_b: int = 5
    layers_per_block: int = 3
    ffe_sigma: float = 0.1
    ffe_size: int = 50
    xi: object = 1e-2
    snake_a: float = 1.0
    seed: int = 0
    activation: str = "snake"


@dataclass
class WeightsSection(LossWeights):
    mode: str = "fixed"
    literal_pde_sign: bool = False


@dataclass
class FtmSection(FtmConfig):
    pass


@dataclass
class NoiseConfig:
    snr_db: float = 40.0
    seed: int = 1234


@dataclass
class EvaluationConfig:
    nx_out: int = 5001
    nt_out: int = 1001
    export_stride_x: int = 50
    export_stride_t: int = 10
    tom_times: int = 1000
    chunk: int = 200000


@dataclass
class ExperimentConfig:
    name: str = "experiment"
    geometry: GeometryConfig = field(default_factory=GeometryConfig)
    air: AirProperties = field(default_factory=AirProperties)
    source: SourceConfig = field(default_factory=SourceConfig)
    radiation: RadiationConfig = field(default_factory=RadiationConfig)
    fdm: FdmConfig = field(default_factory=FdmConfig)
    network: NetworkSection = field(default_factory=NetworkSection)
    weights: WeightsSection = field(default_factory=WeightsSection)
    collocation: CollocationConfig = field(default_factory=CollocationConfig)
    training: TrainConfig = field(default_factory=TrainConfig)
    ftm: FtmSection = field(default_factory=FtmSection)
    noise: NoiseConfig = field(default_factory=NoiseConfig)
    evaluation: EvaluationConfig = field(default_factory=EvaluationConfig)

    # -- serialization

    def to_dict(self) -> dict:
        out = {"name": self.name}
        for f in fields(self):
            if f.name != "name":
                out[f.name] = {k: v for k, v in asdict(getattr(self, f.name)).items()
                               if not k.startswith("_")}
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def content_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        cfg = cls()
        return cfg.updated(_flatten(data))

    def updated(self, flat: dict) -> "ExperimentConfig":
        """Copy with dotted-key values replaced; unknown keys raise ConfigError."""
        current = self.to_dict()
        known = set(schema_keys())
        for key, value in flat.items():
            if key not in known:
                hints = difflib.get_close_matches(key, sorted(known), n=3, cutoff=0.5)
                msg = f"unknown config key '{key}'"
                if hints:
                    msg += "; did you mean: " + ", ".join(hints)
                raise ConfigError(msg)
            if key == "name":
                current["name"] = str(value)
                continue
            section, sub = key.split(".", 1)
            default = getattr(getattr(ExperimentConfig(), section), sub)
            current[section][sub] = _coerce(key, value, default)
        return _build(current)

    def with_overrides(self, assignments: list[str]) -> "ExperimentConfig":
        flat = {}
        for item in assignments:
            if "=" not in item:
                raise ConfigError(f"override '{item}' is not of the form KEY=VALUE")
            key, raw = item.split("=", 1)
            flat[key.strip()] = _parse_value(raw)
        return self.updated(flat)

    # -- domain objects

    @property
    def period(self) -> float:
        return 1.0 / self.source.frequency

    def geometry_obj(self) -> TubeGeometry:
        return self.geometry.build()

    def source_obj(self) -> SourceWaveform:
        return self.source.build()

    def radiation_obj(self):
        return radiation_from_taylor(self.radiation.delta, self.radiation.beta_c)

    def network_config(self, xi: float) -> NetworkConfig:
        n = asdict(self.network)
        n["xi"] = float(xi)
        return NetworkConfig(**n, length=self.geometry.length, period=self.period)

    def train_config(self) -> TrainConfig:
        return self.training

    def ftm_config(self) -> FtmConfig:
        return FtmConfig(**asdict(self.ftm))


def _build(d: dict) -> ExperimentConfig:
    kwargs = {"name": d.get("name", "experiment")}
    for f in fields(ExperimentConfig):
        if f.name == "name":
            continue
        section_cls = type(f.default_factory())
        try:
            kwargs[f.name] = section_cls(**d[f.name])
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"invalid values in section '{f.name}': {exc}") from exc
    cfg = ExperimentConfig(**kwargs)
    _validate(cfg)
    return cfg


def _validate(cfg: ExperimentConfig):
    xi = cfg.network.xi
    if not (xi == "auto" or (isinstance(xi, (int, float)) and xi > 0)):
        raise ConfigError("network.xi must be a positive number or \"auto\"")
    if cfg.weights.mode not in ("fixed", "normalized"):
        raise ConfigError("weights.mode must be \"fixed\" or \"normalized\"")
    if cfg.noise.snr_db <= 0 and not math.isinf(cfg.noise.snr_db):
        raise ConfigError("noise.snr_db must be positive")
    for name in ("nx_out", "nt_out"):
        if getattr(cfg.evaluation, name) < 2:
            raise ConfigError(f"evaluation.{name} must be >= 2")
    for name in ("export_stride_x", "export_stride_t", "tom_times", "chunk"):
        if getattr(cfg.evaluation, name) < 1:
            raise ConfigError(f"evaluation.{name} must be >= 1")


def _flatten(data: dict, prefix: str = "") -> dict:
    out = {}
    for k, v in data.items():
        key = f"{prefix}{k}"
        if isinstance(v, dict):
            out.update(_flatten(v, key + "."))
        else:
            out[key] = v
    return out


def _parse_value(raw: str):
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw


def _coerce(key, value, default):
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{key} expects true/false, got {value!r}")
        return value
    if isinstance(default, int) and not isinstance(default, bool):
        if isinstance(value, float) and value.is_integer():
            value = int(value)
        if not isinstance(value, int) or isinstance(value, bool):
            raise ConfigError(f"{key} expects an integer, got {value!r}")
        return value
    if isinstance(default, float) or default is None:
        if value is None:
            return None
        if isinstance(value, str) and key == "network.xi" and value == "auto":
            return value
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{key} expects a number, got {value!r}")
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"{key} expects a string, got {value!r}")
        return value
    return value


# Units and one-line descriptions for --help / --print-schema.
_DOCS = {
    "name": ("", "free-form run label"),
    "geometry.length": ("m", "tube length L"),
    "geometry.radius": ("m", "radius at x=0 (whole tube when radius_end is null)"),
    "geometry.radius_end": ("m", "radius at x=L for a conical tube, or null"),
    "air.rho": ("kg/m^3", "air density"),
    "air.c": ("m/s", "speed of sound"),
    "air.mu": ("Pa s", "dynamic viscosity"),
    "air.eta": ("", "adiabatic index"),
    "air.lambda_th": ("W/(m K)", "thermal conductivity"),
    "air.cp": ("J/(kg K)", "specific heat at constant pressure"),
    "air.omega_c": ("rad/s", "angular frequency at which the losses are evaluated"),
    "source.U0": ("m^3/s", "peak source volume velocity"),
    "source.frequency": ("Hz", "fundamental frequency (period T = 1/f)"),
    "source.tp_frac": ("T", "opening phase duration"),
    "source.tn_frac": ("T", "closing phase duration"),
    "source.smooth_periods": ("T", "std of the Gaussian smoothing kernel"),
    "radiation.delta": ("", "Taylor impedance coefficient delta (ground truth)"),
    "radiation.beta_c": ("", "Taylor impedance coefficient beta_c (ground truth)"),
    "fdm.nx": ("", "finite-difference grid points along the tube"),
    "fdm.courant": ("", "target Courant number"),
    "fdm.max_periods": ("", "period cap when marching to steady state"),
    "fdm.steady_tol": ("", "period-to-period tolerance relative to max|phi|"),
    "network.n_f": ("", "hidden width"),
    "network.n_b": ("", "residual blocks"),
    "network.layers_per_block": ("", "FC+Snake layers inside a residual block"),
    "network.ffe_sigma": ("", "std of the Fourier-feature frequencies"),
    "network.ffe_size": ("", "Fourier frequencies per input coordinate"),
    "network.xi": ("m^2/s", "output scale, or \"auto\" for peak |phi| of a coarse FDM run"),
    "network.snake_a": ("", "Snake frequency"),
    "network.seed": ("", "initialization seed"),
    "network.activation": ("", "\"snake\" or \"identity\""),
    "weights.pde": ("", "PDE residual weight"),
    "weights.bc": ("", "source boundary weight"),
    "weights.obs": ("", "observation weight"),
    "weights.pc": ("", "periodicity group weight"),
    "weights.pc_u": ("", "periodicity weight on u"),
    "weights.pc_p": ("", "periodicity weight on p"),
    "weights.pc_phitt": ("", "periodicity weight on phi_tt"),
    "weights.mode": ("", "\"fixed\": use as given; \"normalized\": multiply by 1/scale^2"),
    "weights.literal_pde_sign": ("", "use -RA/K in the phi_t coefficient"),
    "collocation.n_pde": ("", "interior Sobol points"),
    "collocation.n_bc": ("", "source boundary times"),
    "collocation.n_pc": ("", "periodicity positions"),
    "collocation.n_obs": ("", "observation times at x=L"),
    "collocation.sobol_skip": ("", "leading Sobol points skipped"),
    "training.adam_epochs": ("", "Adam epochs for the field network"),
    "training.adam_lr": ("", "initial Adam learning rate"),
    "training.lbfgs_epochs": ("", "L-BFGS epochs after Adam"),
    "training.lbfgs_lr": ("", "L-BFGS initial step"),
    "training.lbfgs_max_iter": ("", "L-BFGS iterations per epoch"),
    "training.lbfgs_history": ("", "L-BFGS curvature pairs kept"),
    "training.checkpoint_every": ("", "Adam epochs between checkpoints (0 disables)"),
    "ftm.adam_epochs": ("", "fine-tuning Adam epochs"),
    "ftm.net_lr": ("", "initial lr of the network optimizer"),
    "ftm.rad_lr": ("", "initial lr of the (alpha, beta) optimizer"),
    "ftm.lbfgs_epochs": ("", "joint L-BFGS epochs"),
    "ftm.lbfgs_max_iter": ("", "L-BFGS iterations per epoch"),
    "ftm.lbfgs_history": ("", "L-BFGS curvature pairs kept"),
    "ftm.lambda_rad": ("", "radiation residual weight"),
    "ftm.alpha_init": ("1/s", "initial alpha"),
    "ftm.beta_init": ("", "initial beta"),
    "ftm.update_net": ("", "let the network move during fine-tuning"),
    "ftm.update_rad": ("", "let (alpha, beta) move during fine-tuning"),
    "noise.snr_db": ("dB", "observation SNR"),
    "noise.seed": ("", "noise seed"),
    "evaluation.nx_out": ("", "evaluation grid points in x"),
    "evaluation.nt_out": ("", "evaluation grid points in t"),
    "evaluation.export_stride_x": ("", "x stride for exported field CSVs"),
    "evaluation.export_stride_t": ("", "t stride for exported field CSVs"),
    "evaluation.tom_times": ("", "boundary samples for the least-squares fits"),
    "evaluation.chunk": ("", "points per batch when evaluating the network"),
}


def schema_keys() -> list[str]:
    keys = ["name"]
    cfg = ExperimentConfig()
    for f in fields(cfg):
        if f.name == "name":
            continue
        section = getattr(cfg, f.name)
        keys += [f"{f.name}.{s.name}" for s in fields(section) if not s.name.startswith("_")]
    return keys


def schema() -> dict:
    defaults = _flatten(ExperimentConfig().to_dict())
    out = {}
    for key in schema_keys():
        units, doc = _DOCS.get(key, ("", ""))
        out[key] = {"default": defaults[key], "units": units, "doc": doc}
    return out


PRESET_DIR = Path(__file__).parent / "configs"


def load_config(path_or_name: str | os.PathLike) -> ExperimentConfig:
    """Read a JSON config file, or one of the bundled presets by name."""
    p = Path(path_or_name)
    if not p.exists():
        preset = PRESET_DIR / f"{path_or_name}.json"
        if preset.exists():
            p = preset
        else:
            raise FileNotFoundError(f"config file not found: {path_or_name}")
    try:
        data = json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{p}: invalid JSON ({exc})") from exc
    return ExperimentConfig.from_dict(data)


# ---------------------------------------------------------------- noise and metrics


def add_noise_snr(signal, snr_db: float, seed: int) -> np.ndarray:
    """Add white Gaussian noise at the given SNR (reference: mean square of the signal)."""
    s = np.asarray(signal, dtype=float)
    power = float(np.mean(s**2))
    if not power > 0:
        raise ValueError("signal has zero power; SNR is undefined")
    sigma = math.sqrt(power / 10.0 ** (snr_db / 10.0))
    rng = np.random.default_rng(seed)
    return s + rng.normal(0.0, sigma, size=s.shape)


def realized_snr_db(clean, noisy) -> float:
    clean = np.asarray(clean, dtype=float)
    noise = np.asarray(noisy, dtype=float) - clean
    return 10.0 * math.log10(np.mean(clean**2) / np.mean(noise**2))


@dataclass
class FieldErrorReport:
    rel_l2: float
    max_abs: float
    per_x: np.ndarray
    per_t: np.ndarray

    def to_dict(self) -> dict:
        return {"rel_l2": self.rel_l2, "max_abs": self.max_abs,
                "per_x_rms": self.per_x.tolist(), "per_t_rms": self.per_t.tolist()}


def field_error(p_hat, p_ref) -> FieldErrorReport:
    """Relative L2 and max error of ``p_hat`` against ``p_ref`` (both ``[time, space]``)."""
    p_hat = np.asarray(p_hat, dtype=float)
    p_ref = np.asarray(p_ref, dtype=float)
    if p_hat.shape != p_ref.shape:
        raise ValueError(f"shape mismatch: {p_hat.shape} vs {p_ref.shape}")
    diff = p_hat - p_ref
    ref = np.linalg.norm(p_ref)
    rel = float(np.linalg.norm(diff) / ref) if ref > 0 else float(np.linalg.norm(diff))
    sq = diff**2
    return FieldErrorReport(rel, float(np.abs(diff).max()),
                            np.sqrt(sq.mean(axis=0)), np.sqrt(sq.mean(axis=1)))


# ---------------------------------------------------------------- helpers


def calibrate_xi(cfg: ExperimentConfig, nx: int = 101) -> float:
    """Peak |phi| of a coarse finite-difference run."""
    rc = cfg.radiation_obj()
    coarse = FdmConfig(nx=nx, courant=cfg.fdm.courant, max_periods=cfg.fdm.max_periods,
                       steady_tol=cfg.fdm.steady_tol)
    sol = fdm.run_to_steady_state(cfg.geometry_obj(), cfg.air, cfg.source_obj(), rc.alpha, rc.beta,
                                  coarse)
    return float(np.abs(sol.phi).max())


def effective_weights(cfg: ExperimentConfig, obs: training.ObservationData):
    """Loss weights actually used, plus the radiation weight for fine-tuning.

    In ``normalized`` mode each configured weight is divided by the square of
    a reference scale built only from known quantities: the source flow and
    the observed pressure (and its period-derived rate of change).
    """
    w = cfg.weights
    base = LossWeights(w.pde, w.bc, w.obs, w.pc, w.pc_u, w.pc_p, w.pc_phitt)
    if w.mode == "fixed":
        return base, cfg.ftm.lambda_rad, {}
    src = cfg.source_obj()
    omega = 2.0 * math.pi / cfg.period
    u_ref = float(np.sqrt(np.mean(rosenberg_flow(training.observation_times(1000, cfg.period), src) ** 2)))
    p_ref = float(np.sqrt(np.mean(obs.pressures**2)))
    phitt_ref = omega * p_ref / cfg.air.rho
    res_ref = phitt_ref / cfg.air.c**2
    scales = {"pde": res_ref, "bc": u_ref, "obs": p_ref, "pc_u": u_ref, "pc_p": p_ref,
              "pc_phitt": phitt_ref, "rad": omega * p_ref}
    eff = LossWeights(
        pde=w.pde / res_ref**2, bc=w.bc / u_ref**2, obs=w.obs / p_ref**2, pc=w.pc,
        pc_u=w.pc_u / u_ref**2, pc_p=w.pc_p / p_ref**2, pc_phitt=w.pc_phitt / phitt_ref**2,
    )
    return eff, cfg.ftm.lambda_rad / scales["rad"] ** 2, scales


def predict_pressure(params: NetworkParams, geom: TubeGeometry, air: AirProperties, x, t,
                     chunk: int = 200000) -> np.ndarray:
    """p = R A phi + rho phi_t of the network on the grid ``x`` by ``t`` ([time, space])."""
    X, T = np.meshgrid(np.asarray(x, float), np.asarray(t, float))
    xs, ts = X.ravel(), T.ravel()
    R, _ = loss_coefficients(air, geom, xs)
    RA = R * geom.area(xs)
    out = np.empty(xs.size)
    with torch.no_grad():
        for k in range(0, xs.size, chunk):
            sl = slice(k, k + chunk)
            jet = diffnet.forward_with_jets(params, xs[sl], ts[sl], "t", order=1)
            out[sl] = RA[sl] * jet.v.numpy() + air.rho * jet.d1.numpy()
    return out.reshape(X.shape)


def _fmt(v) -> str:
    return repr(float(v))


def write_columns(path, header, columns):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for row in zip(*columns):
            w.writerow([_fmt(v) for v in row])


def read_columns(path) -> dict:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    header, body = rows[0], rows[1:]
    data = np.array([[float(v) for v in r] for r in body]) if body else np.empty((0, len(header)))
    return {h: data[:, i] for i, h in enumerate(header)}


def write_grid(path, x, t, named: dict, stride_x: int, stride_t: int):
    """Long-format CSV (t, x, fields...) on a strided sub-grid."""
    xs, ts = x[::stride_x], t[::stride_t]
    X, T = np.meshgrid(xs, ts)
    cols = [T.ravel(), X.ravel()] + [a[::stride_t, ::stride_x].ravel() for a in named.values()]
    write_columns(path, ["t", "x", *named.keys()], cols)


def versions() -> dict:
    import numba
    import scipy

    return {
        "tubefield": __version__,
        "python": platform.python_version(),
        "numpy": np.__version__,
        "scipy": scipy.__version__,
        "torch": torch.__version__,
        "numba": numba.__version__,
    }


def default_output_root() -> Path:
    return Path(os.environ.get("TUBEFIELD_OUT", "runs"))


def run_directory(cfg: ExperimentConfig, root=None) -> Path:
    root = Path(root) if root is not None else default_output_root()
    return root / f"{cfg.name}-{cfg.content_hash()[:12]}"


# ---------------------------------------------------------------- pipeline


class Experiment:
    """One run directory; stages read what earlier stages wrote."""

    STAGES = ("forward", "synth-obs", "train", "evaluate", "ftm", "tom")

    def __init__(self, cfg: ExperimentConfig, out_dir):
        self.cfg = cfg
        self.out = Path(out_dir)
        self.out.mkdir(parents=True, exist_ok=True)
        self.geom = cfg.geometry_obj()
        self.source = cfg.source_obj()
        self.rad = cfg.radiation_obj()
        self._sol = None
        self._obs = None
        self._params = None
        self.manifest_path = self.out / "manifest.json"
        (self.out / "config.json").write_text(cfg.to_json())
        self.manifest = self._load_manifest()

    def _load_manifest(self) -> dict:
        if self.manifest_path.exists():
            m = json.loads(self.manifest_path.read_text())
            if m.get("config_hash") == self.cfg.content_hash():
                return m
        return {
            "config_hash": self.cfg.content_hash(),
            "seeds": {"network": self.cfg.network.seed, "noise": self.cfg.noise.seed},
            "versions": versions(),
            "stages": {},
        }

    def _save_manifest(self):
        self.manifest_path.write_text(json.dumps(self.manifest, indent=2, sort_keys=True))

    def _stage(self, name, fn):
        t0 = time.perf_counter()
        started = time.strftime("%Y-%m-%dT%H:%M:%S")
        try:
            result = fn()
        except Exception as exc:
            self.manifest["stages"][name] = {"status": "failed", "error": str(exc), "started": started}
            self._save_manifest()
            raise StageError(name, exc) from exc
        info = self.manifest["stages"].setdefault(name, {})
        info.update({"status": "ok", "seconds": time.perf_counter() - t0, "started": started})
        self._save_manifest()
        log.info("stage %s done in %.1f s", name, info["seconds"])
        return result

    def _path(self, *parts) -> Path:
        p = self.out.joinpath(*parts)
        p.parent.mkdir(parents=True, exist_ok=True)
        return p

    # -- artifacts shared between stages

    @property
    def solution(self) -> fdm.FdmSolution:
        if self._sol is None:
            path = self.out / "fdm" / "solution.npz"
            if not path.exists():
                raise FileNotFoundError(f"{path} missing; run the 'forward' stage first")
            self._sol = fdm.load_solution(path, self.geom, self.cfg.air)
        return self._sol

    @property
    def observations(self) -> training.ObservationData:
        if self._obs is None:
            path = self.out / "obs" / "observations.csv"
            if not path.exists():
                raise FileNotFoundError(f"{path} missing; run the 'synth-obs' stage first")
            cols = read_columns(path)
            self._obs = training.ObservationData(cols["t"], cols["p_noisy"], self.cfg.noise.snr_db,
                                                 self.cfg.noise.seed)
        return self._obs

    @property
    def params(self) -> NetworkParams:
        if self._params is None:
            path = self.out / "gamma" / "checkpoint.bin"
            if not path.exists():
                raise FileNotFoundError(f"{path} missing; run the 'train' stage first")
            self._params = diffnet.load_checkpoint(path)
        return self._params

    def problem(self, template: NetworkParams) -> training.PinnProblem:
        sets = training.CollocationSets.build(self.cfg.collocation, self.geom.length, self.cfg.period)
        return training.PinnProblem(sets, self.observations, self.geom, self.cfg.air, self.source,
                                    template, literal_sign=self.cfg.weights.literal_pde_sign)

    # -- stages

    def forward(self):
        def run():
            sol = fdm.run_to_steady_state(self.geom, self.cfg.air, self.source, self.rad.alpha,
                                          self.rad.beta, self.cfg.fdm)
            fdm.save_solution(sol, self._path("fdm", "solution.npz"))
            ev = self.cfg.evaluation
            grid = fdm.resample_to_grid(sol, ev.nx_out, ev.nt_out)
            write_grid(self._path("fdm", "field.csv"), grid["x"], grid["t"],
                       {"phi": grid["phi"], "p": grid["p"], "u": grid["u"]},
                       ev.export_stride_x, ev.export_stride_t)
            times = training.observation_times(self.cfg.collocation.n_obs, self.cfg.period)
            p, p_t, u_t = fdm.boundary_signals(sol, times)
            write_columns(self._path("fdm", "boundary.csv"), ["t", "p", "p_t", "u_t"],
                          [times, p, p_t, u_t])
            self._sol = sol
            self.manifest["fdm"] = fdm.solution_manifest(sol, self.cfg.to_dict())
            return sol

        return self._stage("forward", run)

    def synth_obs(self):
        def run():
            times = training.observation_times(self.cfg.collocation.n_obs, self.cfg.period)
            p, _, _ = fdm.boundary_signals(self.solution, times)
            noisy = p if math.isinf(self.cfg.noise.snr_db) else add_noise_snr(
                p, self.cfg.noise.snr_db, self.cfg.noise.seed)
            write_columns(self._path("obs", "observations.csv"), ["t", "p_clean", "p_noisy"],
                          [times, p, noisy])
            self._obs = training.ObservationData(times, noisy, self.cfg.noise.snr_db,
                                                 self.cfg.noise.seed)
            if not math.isinf(self.cfg.noise.snr_db):
                self.manifest["realized_snr_db"] = realized_snr_db(p, noisy)
            return self._obs

        return self._stage("synth-obs", run)

    def resolved_xi(self) -> float:
        xi = self.cfg.network.xi
        if xi == "auto":
            if "xi" not in self.manifest:
                self.manifest["xi"] = calibrate_xi(self.cfg)
            return self.manifest["xi"]
        return float(xi)

    def train(self):
        def run():
            cfg = self.cfg
            xi = self.resolved_xi()
            params = diffnet.init_params(cfg.network_config(xi))
            problem = self.problem(params)
            weights, lam_rad, scales = effective_weights(cfg, self.observations)
            self.manifest["effective_weights"] = {**asdict(weights), "rad": lam_rad}
            self.manifest["weight_scales"] = scales
            ckpt_path = self._path("gamma", "adam_state.bin")

            def checkpoint(epoch, vec, adam):
                snap = params.with_flat(vec)
                diffnet.save_checkpoint(snap, ckpt_path,
                                        extras={"adam_m": adam.m.numpy(), "adam_v": adam.v.numpy()},
                                        meta={"epoch": epoch, "step": adam.step})

            trained, report = training.train_gamma(problem, params, weights, cfg.train_config(),
                                                   checkpoint=checkpoint)
            diffnet.save_checkpoint(trained, self._path("gamma", "checkpoint.bin"),
                                    meta={"xi": xi, "epochs": len(report.rows)})
            header = ["epoch", "phase", "lr", *training.LOG_TERMS, "total"]
            with open(self._path("gamma", "train_log.csv"), "w", newline="") as fh:
                w = csv.writer(fh)
                w.writerow(header)
                for r in report.rows:
                    w.writerow([r["epoch"], r["phase"]] + [_fmt(r[k]) for k in header[2:]])
            totals = report.totals
            summary = {"epochs": len(report.rows), "initial_total": float(totals[0]),
                       "final_total": float(totals[-1]),
                       "decrease_orders": float(np.log10(totals[0] / totals[-1])),
                       "xi": xi}
            self._path("gamma", "train_summary.json").write_text(json.dumps(summary, indent=2))
            self._params = trained
            self.manifest["train"] = summary
            return trained, report

        return self._stage("train", run)

    def evaluate(self):
        def run():
            ev = self.cfg.evaluation
            grid = fdm.resample_to_grid(self.solution, ev.nx_out, ev.nt_out)
            p_hat = predict_pressure(self.params, self.geom, self.cfg.air, grid["x"], grid["t"],
                                     ev.chunk)
            rep = field_error(p_hat, grid["p"])
            self._path("eval", "field_error.json").write_text(
                json.dumps(rep.to_dict(), indent=2))
            write_grid(self._path("eval", "p_field.csv"), grid["x"], grid["t"],
                       {"p_hat": p_hat, "p_ref": grid["p"], "abs_err": np.abs(p_hat - grid["p"])},
                       ev.export_stride_x, ev.export_stride_t)
            # boundary-signal comparison at x = L
            net = inverse.tom_collect_signals(self.params, self.geom, self.cfg.air, ev.tom_times,
                                              self.cfg.period)
            p, p_t, u_t = fdm.boundary_signals(self.solution, net.times)
            write_columns(self._path("eval", "boundary_compare.csv"),
                          ["t", "p_fdm", "p_hat", "p_t_fdm", "p_t_hat", "u_t_fdm", "u_t_hat"],
                          [net.times, p, net.p, p_t, net.p_t, u_t, net.u_t])
            rel = {name: float(np.linalg.norm(a - b) / np.linalg.norm(b))
                   for name, a, b in (("p", net.p, p), ("p_t", net.p_t, p_t), ("u_t", net.u_t, u_t))}
            self.manifest["field_error"] = {"rel_l2": rep.rel_l2, "max_abs": rep.max_abs,
                                            "boundary_rel_l2": rel}
            return rep

        return self._stage("evaluate", run)

    def ftm(self):
        def run():
            cfg = self.cfg
            params = self.params
            problem = self.problem(params)
            weights, lam_rad, _ = effective_weights(cfg, self.observations)
            fcfg = cfg.ftm_config()
            fcfg.lambda_rad = lam_rad
            gt = (self.rad.alpha, self.rad.beta)
            result, _ = inverse.ftm_train(params, problem, weights, fcfg, gt=gt)
            result.write(self._path("inverse", "ftm.json"), self._path("inverse", "ftm_trace.csv"))
            self._write_table2()
            return result

        return self._stage("ftm", run)

    def tom(self):
        def run():
            gt = (self.rad.alpha, self.rad.beta)
            n = self.cfg.evaluation.tom_times
            prob = inverse.tom_collect_signals(self.params, self.geom, self.cfg.air, n, self.cfg.period)
            tom = inverse.tom_fit(prob, "TOM", gt=gt)
            tom.write(self._path("inverse", "tom.json"))
            tomb = inverse.tomb_fit(self.solution, self.geom, n, gt=gt)
            tomb.write(self._path("inverse", "tomb.json"))
            self._write_table2()
            return tom, tomb

        return self._stage("tom", run)

    def _write_table2(self):
        table = {"GT": {"alpha": self.rad.alpha, "beta": self.rad.beta,
                        "delta": self.rad.delta, "beta_c": self.rad.beta_c}}
        for method in ("ftm", "tom", "tomb"):
            path = self.out / "inverse" / f"{method}.json"
            if path.exists():
                d = json.loads(path.read_text())
                table[method.upper()] = {"alpha": d["alpha_hat"], "beta": d["beta_hat"]}
        (self.out / "table2.json").write_text(json.dumps(table, indent=2, sort_keys=True))
        return table

    def run_all(self):
        self.forward()
        self.synth_obs()
        self.train()
        self.evaluate()
        self.tom()
        self.ftm()
        return self.out


def run_experiment(cfg: ExperimentConfig, out_dir=None) -> Path:
    """Full pipeline; returns the run directory."""
    out = Path(out_dir) if out_dir is not None else run_directory(cfg)
    return Experiment(cfg, out).run_all()
