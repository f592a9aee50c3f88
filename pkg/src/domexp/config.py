"""Experiment configuration: an INI-style key/value file with dotted sections.

Example::

    [experiment]
    seed = 0
    output_dir = runs
    methods = fine-tune, WCA, EWC, SKLD, SKLD-EWC

    [domain.original]
    domain_shift = 0

    [domain.new]
    domain_shift = 1.0

    [grid]
    lambda_s = 0, 0.1, 0.5, 0.9

Unknown sections or keys are rejected.
"""

from __future__ import annotations

import configparser
import hashlib
import json
from dataclasses import MISSING, asdict, dataclass, field, fields, replace
from pathlib import Path

from .datagen import DomainSpec
from .errors import ConfigError
from .trainer import METHODS, TrainConfig

DEFAULT_LAMBDA_S = (0.0, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9)
DEFAULT_LOG_GRID = (0.001, 0.01, 0.1, 1.0, 10.0, 100.0)
# raw Fisher values on the synthetic task are ~1e-2, so lambda_e needs a wider range
DEFAULT_EWC_GRID = (0.1, 1.0, 10.0, 100.0, 1000.0, 10000.0)

# Desk-scale two-domain task: 600 samples per domain split 400/100/100.
DEFAULT_ORIGINAL = DomainSpec(
    num_classes=8, feature_dim=20, samples_per_class=75, class_center_scale=2.5,
    domain_shift=0.0, offset_scale=0.0, rotation_strength=0.8, noise_std=1.0, latent_dim=6,
    seed=0, name="original",
)
DEFAULT_NEW = replace(DEFAULT_ORIGINAL, domain_shift=1.0, name="new")


@dataclass(frozen=True)
class GridConfig:
    lambda_w: tuple[float, ...] = DEFAULT_LOG_GRID
    lambda_e: tuple[float, ...] = DEFAULT_EWC_GRID
    lambda_s: tuple[float, ...] = DEFAULT_LAMBDA_S
    temperature: tuple[float, ...] = (1.0,)
    # SKLD-EWC searches lambda_s x hybrid_lambda_e x temperature
    hybrid_lambda_e: tuple[float, ...] = DEFAULT_EWC_GRID

    def __post_init__(self):
        for f in fields(self):
            if not getattr(self, f.name):
                raise ConfigError(f"grid.{f.name} must not be empty")


@dataclass(frozen=True)
class FileSources:
    original_train: str
    original_dev: str
    original_eval: str
    new_train: str
    new_dev: str
    new_eval: str
    num_classes: int
    stack_context: int | None = None


@dataclass(frozen=True)
class ExpansionConfig:
    original_domain: DomainSpec = DEFAULT_ORIGINAL
    new_domain: DomainSpec = DEFAULT_NEW
    files: FileSources | None = None
    split_fractions: tuple[float, float, float] = (4 / 6, 1 / 6, 1 / 6)
    hidden_dims: tuple[int, ...] = (64, 64)
    train_original: TrainConfig = field(
        default_factory=lambda: TrainConfig(learning_rate=0.001, batch_size=32, max_epochs=200,
                                            early_stop_patience=5)
    )
    train_expansion: TrainConfig = field(
        default_factory=lambda: TrainConfig(learning_rate=0.0001, batch_size=8, fixed_epochs=20)
    )
    methods: tuple[str, ...] = METHODS
    grid: GridConfig = GridConfig()
    # the library default offset of 1 would swamp Fisher values this small
    fisher_offset: float = 0.001
    t_squared: bool = False
    forgetting_lambda_s: float | None = None
    output_dir: str = "runs"
    seed: int = 0
    jobs: int = 1

    def __post_init__(self):
        if not self.methods:
            raise ConfigError("at least one method is required")
        for m in self.methods:
            if m not in METHODS:
                raise ConfigError(f"unknown method {m!r}; choose from {', '.join(METHODS)}")
        if self.fisher_offset < 0:
            raise ConfigError("fisher_offset must be >= 0")

    def with_seed(self, seed: int) -> ExpansionConfig:
        return replace(self, seed=int(seed))

    def canonical(self) -> dict:
        """Everything that determines results; ``output_dir`` and ``jobs`` excluded."""
        d = asdict(self)
        d.pop("output_dir")
        d.pop("jobs")
        return d

    def digest(self) -> str:
        d = self.canonical()
        d.pop("seed")
        blob = json.dumps(d, sort_keys=True, default=list).encode()
        return hashlib.sha256(blob).hexdigest()[:12]

    def run_dir(self) -> Path:
        return Path(self.output_dir) / f"run-{self.digest()}-seed{self.seed}"


# -- parsing -----------------------------------------------------------------


def _floats(text: str) -> tuple[float, ...]:
    try:
        return tuple(float(t) for t in text.replace(";", ",").split(",") if t.strip())
    except ValueError as exc:
        raise ConfigError(f"expected a comma-separated list of numbers, got {text!r}") from exc


def _ints(text: str) -> tuple[int, ...]:
    try:
        return tuple(int(t) for t in text.split(",") if t.strip())
    except ValueError as exc:
        raise ConfigError(f"expected a comma-separated list of integers, got {text!r}") from exc


def _bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"expected a boolean, got {text!r}")


def _coerce(dc_type, section: str, values: dict[str, str], base):
    kwargs = {}
    known = {f.name: f for f in fields(dc_type)}
    for key, raw in values.items():
        if key not in known:
            raise ConfigError(f"unknown key {key!r} in section [{section}]")
        current = getattr(base, key) if base is not None else None
        try:
            kwargs[key] = _convert(key, raw, current)
        except ValueError as exc:
            raise ConfigError(f"[{section}] {key}: {exc}") from None
    return kwargs


def _convert(key: str, raw: str, current):
    if isinstance(current, bool):
        return _bool(raw)
    if isinstance(current, int):
        return int(raw)
    if isinstance(current, float):
        return float(raw)
    if isinstance(current, tuple):
        return _floats(raw)
    if key == "stack_context":
        return int(raw) if raw.strip() else None
    if key == "num_classes":
        return int(raw)
    return raw.strip()


_SECTIONS = {"experiment", "data", "domain.original", "domain.new", "files", "net",
             "train.original", "train.expansion", "grid"}


def load_config(path) -> ExpansionConfig:
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#",))
    parser.optionxform = str  # keep key case
    path = Path(path)
    try:
        with open(path, encoding="utf-8") as fh:
            parser.read_file(fh)
    except (configparser.Error, OSError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_config(parser)


def parse_config_text(text: str) -> ExpansionConfig:
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#",))
    parser.optionxform = str
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(str(exc)) from exc
    return parse_config(parser)


def parse_config(parser: configparser.ConfigParser) -> ExpansionConfig:
    if parser.defaults():
        raise ConfigError("keys outside a section are not allowed")
    for name in parser.sections():
        if name not in _SECTIONS:
            raise ConfigError(f"unknown section [{name}]")
    sec = {name: dict(parser[name]) for name in parser.sections()}
    cfg = ExpansionConfig()
    updates: dict = {}

    exp = dict(sec.get("experiment", {}))
    if "methods" in exp:
        updates["methods"] = tuple(m.strip() for m in exp.pop("methods").split(",") if m.strip())
    if "forgetting_lambda_s" in exp:
        raw = exp.pop("forgetting_lambda_s").strip()
        updates["forgetting_lambda_s"] = None if raw in ("", "auto") else float(raw)
    allowed = {"seed", "output_dir", "fisher_offset", "t_squared", "jobs"}
    for key in exp:
        if key not in allowed:
            raise ConfigError(f"unknown key {key!r} in section [experiment]")
    updates.update(_coerce(ExpansionConfig, "experiment", exp, cfg))

    data = dict(sec.get("data", {}))
    if "split_fractions" in data:
        fr = _floats(data.pop("split_fractions"))
        if len(fr) != 3:
            raise ConfigError("data.split_fractions needs three values (train, dev, eval)")
        updates["split_fractions"] = fr
    if data:
        raise ConfigError(f"unknown key {next(iter(data))!r} in section [data]")

    # [domain.new] defaults to the original domain's layout, shifted
    orig = replace(cfg.original_domain, **_coerce(DomainSpec, "domain.original",
                                                  sec.get("domain.original", {}), cfg.original_domain))
    shared = {k: v for k, v in sec.get("domain.original", {}).items()
              if k not in ("domain_shift", "name")}
    new_vals = {**shared, **sec.get("domain.new", {})}
    new = replace(cfg.new_domain, **_coerce(DomainSpec, "domain.new", new_vals, cfg.new_domain))
    updates["original_domain"], updates["new_domain"] = orig, new

    if "files" in sec:
        vals = sec["files"]
        missing = {f.name for f in fields(FileSources) if f.default is MISSING} - set(vals)
        if missing:
            raise ConfigError(f"[files] is missing {', '.join(sorted(missing))}")
        kw = _coerce(FileSources, "files", vals, None)
        kw["num_classes"] = int(vals["num_classes"])
        updates["files"] = FileSources(**kw)

    net = dict(sec.get("net", {}))
    if "hidden_dims" in net:
        updates["hidden_dims"] = _ints(net.pop("hidden_dims"))
    if net:
        raise ConfigError(f"unknown key {next(iter(net))!r} in section [net]")

    for name, attr in (("train.original", "train_original"), ("train.expansion", "train_expansion")):
        vals = dict(sec.get(name, {}))
        if "seed" in vals:
            raise ConfigError(f"set the seed in [experiment], not [{name}]")
        base = getattr(cfg, attr)
        updates[attr] = replace(base, **_coerce(TrainConfig, name, vals, base))

    updates["grid"] = replace(cfg.grid, **_coerce(GridConfig, "grid", sec.get("grid", {}), cfg.grid))
    try:
        return replace(cfg, **updates)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc


def dump_config(cfg: ExpansionConfig) -> str:
    """Serialize ``cfg`` back to the INI format accepted by :func:`load_config`."""

    def fmt(v):
        if isinstance(v, bool):
            return "true" if v else "false"
        if isinstance(v, tuple):
            return ", ".join(map(str, v))
        return str(v)

    lines = ["[experiment]"]
    lines += [f"seed = {cfg.seed}", f"output_dir = {cfg.output_dir}",
              f"methods = {', '.join(cfg.methods)}", f"fisher_offset = {cfg.fisher_offset}",
              f"t_squared = {fmt(cfg.t_squared)}", f"jobs = {cfg.jobs}",
              f"forgetting_lambda_s = {'auto' if cfg.forgetting_lambda_s is None else cfg.forgetting_lambda_s}"]
    lines += ["", "[data]", f"split_fractions = {fmt(cfg.split_fractions)}"]
    for name, spec in (("domain.original", cfg.original_domain), ("domain.new", cfg.new_domain)):
        lines += ["", f"[{name}]"] + [f"{k} = {fmt(v)}" for k, v in asdict(spec).items()]
    if cfg.files is not None:
        lines += ["", "[files]"] + [
            f"{k} = {'' if v is None else v}" for k, v in asdict(cfg.files).items()
        ]
    lines += ["", "[net]", f"hidden_dims = {fmt(cfg.hidden_dims)}"]
    for name, tc in (("train.original", cfg.train_original), ("train.expansion", cfg.train_expansion)):
        lines += ["", f"[{name}]"] + [f"{k} = {v}" for k, v in asdict(tc).items() if k != "seed"]
    lines += ["", "[grid]"] + [f"{k} = {fmt(v)}" for k, v in asdict(cfg.grid).items()]
    return "\n".join(lines) + "\n"
