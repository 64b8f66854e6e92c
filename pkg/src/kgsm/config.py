"""Run configuration: a YAML file with nested sections plus ``section.key=value`` overrides."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .calibrate import NelderMeadConfig
from .data import SyntheticConfig
from .errors import ConfigError
from .evaluation import CVConfig
from .features import AUX_FEATURES
from .kg_model import TrainConfig
from .wcm import DEFAULT_CLAMP_FLOOR, GRASSLAND_B


@dataclass(frozen=True)
class Key:
    path: str
    kind: str  # int | float | bool | str | path | features | synthetic
    default: object
    unit: str
    help: str
    check: object = None  # callable(value) -> error message or None


def _gt(lo):
    return lambda v: None if v > lo else f"must be > {lo}"


def _ge(lo):
    return lambda v: None if v >= lo else f"must be >= {lo}"


def _unit_interval(v):
    return None if 0 <= v < 1 else "must be in [0, 1)"


SCHEMA = (
    Key("data.csv", "path", None, "-", "site time-series CSV; used by every command except simulate"),
    Key("data.synthetic", "synthetic", None, "-",
        "synthetic scene settings (keys below); used by simulate, and by other commands when data.csv is unset"),
    Key("wcm.b", "float", GRASSLAND_B, "m2/kg", "vegetation attenuation coefficient B, held fixed", _gt(0)),
    Key("wcm.vwc_coeff", "float", 1.0, "kg/m2", "vegetation water content per unit NDVI", _gt(0)),
    Key("wcm.maxiter", "int", 5000, "iterations", "Nelder-Mead iteration cap", _ge(1)),
    Key("wcm.xatol", "float", 1e-10, "-", "Nelder-Mead simplex size tolerance", _gt(0)),
    Key("wcm.fatol", "float", 1e-10, "(m3/m3)^2", "Nelder-Mead objective tolerance", _gt(0)),
    Key("training.window", "int", 8, "acquisitions", "sequence window length n", _ge(1)),
    Key("training.hidden", "int", 32, "units", "LSTM hidden size", _ge(1)),
    Key("training.lam", "float", 1.0, "-", "weight of the [0, 1] boundary penalty", _ge(0)),
    Key("training.learning_rate", "float", 5e-3, "-", "Adam step size", _gt(0)),
    Key("training.epochs", "int", 500, "epochs", "maximum training epochs", _ge(1)),
    Key("training.patience", "int", 20, "epochs", "early-stopping patience", _ge(1)),
    Key("training.batch_size", "int", 32, "windows", "minibatch size", _ge(1)),
    Key("training.clip_norm", "float", 5.0, "-", "global gradient-norm clip", _gt(0)),
    Key("training.a0", "float", 0.05, "linear power", "initial A when not warm-started", _gt(0)),
    Key("training.clamp_floor", "float", DEFAULT_CLAMP_FLOOR, "linear power",
        "floor for the soil residual before taking dB", _gt(0)),
    Key("training.aux_features", "features", list(AUX_FEATURES), "-",
        f"auxiliary inputs, any of: {', '.join(AUX_FEATURES)}"),
    Key("training.seed", "int", 0, "-", "initialization and shuffling seed"),
    Key("cv.folds", "int", 4, "folds", "spatial fold count", _ge(2)),
    Key("cv.seed", "int", 0, "-", "fold clustering and validation-split seed"),
    Key("cv.val_fraction", "float", 0.2, "fraction of sites",
        "training sites held out for early stopping", _unit_interval),
    Key("cv.warm_start_a", "bool", True, "-", "start the LSTM's A from the fold's calibrated WCM A"),
    Key("cv.threads", "int", None, "threads", "fold-level parallelism (unset: all cores)", _ge(1)),
    Key("output.dir", "str", "out", "-", "directory for every output file"),
)

_BY_PATH = {k.path: k for k in SCHEMA}
_SYNTH_UNITS = {
    "n_sites": "sites", "n_timesteps": "acquisitions", "start_date": "YYYY-MM-DD", "cadence_days": "days",
    "a": "linear power", "b": "m2/kg", "c": "dB", "d": "dB per m3/m3", "theta_deg": "degrees",
    "incidence_jitter_deg": "degrees", "vwc_coeff": "kg/m2", "sm_min": "m3/m3", "sm_max": "m3/m3",
    "sm_step_std": "m3/m3", "sm_reversion": "per acquisition", "sm_seasonal_amplitude": "m3/m3",
    "sm_texture_weight": "-", "ndvi_min": "-", "ndvi_max": "-", "noise_db": "dB", "nonlinear": "bool",
    "missing_fraction": "fraction", "n_clusters": "clusters", "cluster_separation": "coordinate units",
    "cluster_spread": "coordinate units", "fold_count": "folds", "seed": "-",
}


@dataclass
class RunConfig:
    csv: Path | None = None
    synthetic: SyntheticConfig | None = None
    b: float = GRASSLAND_B
    vwc_coeff: float = 1.0
    calibration: NelderMeadConfig = NelderMeadConfig()
    training: TrainConfig = TrainConfig()
    folds: int = 4
    cv_seed: int = 0
    val_fraction: float = 0.2
    warm_start_a: bool = True
    threads: int | None = None
    output_dir: Path = Path("out")
    raw: dict = field(default_factory=dict)

    def cv_config(self) -> CVConfig:
        return CVConfig(
            training=self.training, calibration=self.calibration, b=self.b, vwc_coeff=self.vwc_coeff,
            val_fraction=self.val_fraction, warm_start_a=self.warm_start_a, seed=self.cv_seed,
            threads=self.threads,
        )


def help_text() -> str:
    """Every config key with its unit and default, for ``--help``."""
    lines = ["config keys (YAML sections; override any with --set section.key=value):"]
    for k in SCHEMA:
        default = "" if k.default is None or k.kind == "synthetic" else f" [default {k.default}]"
        lines.append(f"  {k.path:<24} ({k.unit}) {k.help}{default}")
    base = SyntheticConfig()
    for f in dataclasses.fields(SyntheticConfig):
        lines.append(f"  data.synthetic.{f.name:<{24 - 15}} ({_SYNTH_UNITS[f.name]}) "
                     f"[default {getattr(base, f.name)}]")
    return "\n".join(lines)


def parse_override(text: str) -> tuple[list[str], object]:
    """``'training.lam=10'`` -> ``(['training', 'lam'], 10)``; the value is read as YAML."""
    path, sep, value = text.partition("=")
    if not sep or not path.strip():
        raise ConfigError(f"override {text!r} is not of the form section.key=value")
    return path.strip().split("."), yaml.safe_load(value) if value.strip() else None


def apply_override(raw: dict, parts, value) -> None:
    node = raw
    for p in parts[:-1]:
        nxt = node.get(p)
        if nxt is None:
            nxt = node[p] = {}
        elif not isinstance(nxt, dict):
            raise ConfigError(f"{'.'.join(parts)}: {p} is not a section")
        node = nxt
    node[parts[-1]] = value


def _coerce(key: Key, value, errors):
    if value is None:
        return None
    kind = key.kind
    ok = {
        "int": isinstance(value, int) and not isinstance(value, bool),
        "float": isinstance(value, (int, float)) and not isinstance(value, bool),
        "bool": isinstance(value, bool),
        "str": isinstance(value, str),
        "path": isinstance(value, str),
        "features": isinstance(value, list) and all(isinstance(v, str) for v in value),
    }.get(kind, True)
    if not ok:
        errors.append((key.path, f"expected {kind}, got {value!r}"))
        return None
    if kind == "float":
        value = float(value)
    if key.check is not None:
        msg = key.check(value)
        if msg:
            errors.append((key.path, msg))
    return value


def _synthetic(raw, errors):
    if not isinstance(raw, dict):
        errors.append(("data.synthetic", "must be a mapping"))
        return None
    names = {f.name for f in dataclasses.fields(SyntheticConfig)}
    unknown = sorted(set(raw) - names)
    for k in unknown:
        errors.append((f"data.synthetic.{k}", "unknown key"))
    if unknown:
        return None
    try:
        return SyntheticConfig(**raw)
    except ConfigError as exc:
        errors.extend((f"data.synthetic.{k}", msg) for k, msg in exc.errors)
    except TypeError as exc:
        errors.append(("data.synthetic", str(exc)))
    return None


def build_config(raw: dict, base_dir: Path = Path(".")) -> RunConfig:
    """Validate a nested mapping; every problem is reported at once with its key path."""
    raw = raw or {}
    errors = []
    if not isinstance(raw, dict):
        raise ConfigError("config must be a mapping of sections")
    values = {}
    sections = {k.path.split(".")[0] for k in SCHEMA}
    for sec, body in raw.items():
        if sec not in sections:
            errors.append((str(sec), "unknown section"))
            continue
        if body is None:
            continue
        if not isinstance(body, dict):
            errors.append((sec, "must be a mapping"))
            continue
        for name, value in body.items():
            path = f"{sec}.{name}"
            key = _BY_PATH.get(path)
            if key is None:
                errors.append((path, "unknown key"))
            elif key.kind == "synthetic":
                values[path] = None if value is None else _synthetic(value, errors)
            else:
                values[path] = _coerce(key, value, errors)

    get = lambda p: values[p] if values.get(p) is not None else _BY_PATH[p].default
    csv = None
    if values.get("data.csv") is not None:
        csv = Path(values["data.csv"])
        if not csv.is_absolute():
            csv = base_dir / csv
        if not csv.is_file():
            errors.append(("data.csv", f"file not found: {csv}"))
    feats = get("training.aux_features")
    bad = [f for f in feats if f not in AUX_FEATURES]
    if bad:
        errors.append(("training.aux_features", f"unknown feature(s) {', '.join(bad)}"))
    synthetic = values.get("data.synthetic")
    if synthetic is not None and synthetic.n_sites < get("cv.folds"):
        errors.append(("cv.folds", f"exceeds data.synthetic.n_sites ({synthetic.n_sites})"))
    if errors:
        raise ConfigError("invalid config:\n" + "\n".join(f"  {p}: {m}" for p, m in errors))

    training = TrainConfig(
        window=get("training.window"), hidden=get("training.hidden"), lam=get("training.lam"),
        learning_rate=get("training.learning_rate"), epochs=get("training.epochs"),
        patience=get("training.patience"), batch_size=get("training.batch_size"),
        clamp_floor=get("training.clamp_floor"), clip_norm=get("training.clip_norm"), a0=get("training.a0"),
        b=get("wcm.b"), vwc_coeff=get("wcm.vwc_coeff"), aux_features=tuple(feats), seed=get("training.seed"),
    )
    out = Path(get("output.dir"))
    return RunConfig(
        csv=csv,
        synthetic=synthetic,
        b=get("wcm.b"),
        vwc_coeff=get("wcm.vwc_coeff"),
        calibration=NelderMeadConfig(xatol=get("wcm.xatol"), fatol=get("wcm.fatol"), maxiter=get("wcm.maxiter"),
                                     clamp_floor=get("training.clamp_floor")),
        training=training,
        folds=get("cv.folds"),
        cv_seed=get("cv.seed"),
        val_fraction=get("cv.val_fraction"),
        warm_start_a=get("cv.warm_start_a"),
        threads=values.get("cv.threads"),
        output_dir=out if out.is_absolute() else base_dir / out,
        raw=raw,
    )


def load_config(path=None, overrides=(), seed: int | None = None) -> RunConfig:
    """Read ``path`` (or start from defaults), apply overrides, validate.

    ``seed`` replaces every seed in the config: training, cross-validation
    and (if present) synthetic data.  Relative paths resolve against the
    working directory, like paths given on the command line.
    """
    raw = {}
    if path is not None:
        path = Path(path)
        try:
            text = path.read_text(encoding="utf-8")
        except OSError as exc:
            raise FileNotFoundError(f"cannot read config {path}: {exc.strerror}") from exc
        try:
            raw = yaml.safe_load(text) or {}
        except yaml.YAMLError as exc:
            raise ConfigError(f"{path}: not valid YAML: {exc}") from exc
    for text in overrides:
        parts, value = parse_override(text)
        apply_override(raw, parts, value)
    if seed is not None:
        apply_override(raw, ["training", "seed"], seed)
        apply_override(raw, ["cv", "seed"], seed)
        if isinstance((raw.get("data") or {}).get("synthetic"), dict):
            raw["data"]["synthetic"]["seed"] = seed
    return build_config(raw)
