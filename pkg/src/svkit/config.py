"""Plain-text pipeline configuration.

Sectioned key=value format:

    [loss]
    margin = 0.2
    scale = 32

Unknown sections or keys are rejected with the offending line; every key has
a documented default, printable via `svkit config dump-defaults`.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .errors import ConfigError


def _positive(x):
    return x > 0


def _nonneg(x):
    return x >= 0


def _fraction(x):
    return 0.0 <= x <= 1.0


def _open_fraction(x):
    return 0.0 < x < 1.0


class Key:
    """One schema entry: default, type tag, optional range check, help."""

    def __init__(self, default, kind="str", check=None, choices=(), help=""):
        self.default = default
        self.kind = kind  # str | int | float | bool | list[str] | list[float] | choice
        self.check = check
        self.choices = choices
        self.help = help


SCHEMA: dict[str, dict[str, Key]] = {
    "run": {
        "seed": Key(7, "int", help="global seed for every derived RNG stream"),
        "jobs": Key(1, "int", _positive, help="worker threads; output is identical for any value"),
        "out-dir": Key("runs/out", help="artifact directory for `run`"),
    },
    "paths": {
        "trials": Key("", help="evaluation trial list"),
        "calibration-trials": Key("", help="labeled trial list for calibration training"),
        "systems": Key([], "list[str]", help="embedding-set files, one per system"),
        "cohort-embeddings": Key("", help="embedding set the imposter cohort is built from"),
        "cohort-speakers": Key("", help="optional `name speaker` map for the cohort; "
                                        "defaults to one speaker per embedding"),
        "target-embeddings": Key("", help="unlabeled target-domain set (stats, k-means)"),
        "durations": Key("", help="optional `name seconds` table for quality features"),
    },
    "features": {
        "sample-rate": Key(16000, "int", _positive),
        "speed-ratios": Key([1.0, 1.1, 0.9], "list[float]", lambda xs: all(r > 0 for r in xs)),
        "noise-probability": Key(0.6, "float", _fraction),
        "noise-types": Key(["babble", "noise", "music", "reverb"], "list[str]"),
        "segment-seconds": Key(2.0, "float", _positive),
        "num-mel-bins": Key(80, "int", _positive),
        "cmn-window": Key(300, "int", _positive),
    },
    "loss": {
        "margin-type": Key("aam", "choice", choices=("aam", "am")),
        "margin": Key(0.2, "float", _nonneg),
        "scale": Key(32.0, "float", _positive),
        "subcenters": Key(3, "int", _positive),
        "intertopk-penalty": Key(0.06, "float", _nonneg),
        "intertopk-k": Key(5, "int", _positive),
        "apl-init-w": Key(10.0, "float", _positive),
        "apl-init-b": Key(-5.0, "float"),
    },
    "scoring": {
        "cohort-top-n": Key(600, "int", _positive),
        "p-target": Key(0.05, "float", _open_fraction),
        "c-miss": Key(1.0, "float", _positive),
        "c-fa": Key(1.0, "float", _positive),
        "fusion": Key("equal", "choice", choices=("equal", "learn")),
        "quality-features": Key("none", "choice", choices=("none", "log-duration")),
        "calibration-ridge": Key(1e-6, "float", _positive),
    },
    "adaptation": {
        "statistic-adaptation": Key(True, "bool"),
        "kmeans-k": Key(30, "int", _positive),
        "kmeans-max-iter": Key(100, "int", _positive),
        "pseudo-cohort": Key(True, "bool", help="build the as-norm cohort from pseudo labels"),
    },
    "dlglc": {
        "enabled": Key(False, "bool"),
        "ema-decay": Key(0.9, "float", lambda x: 0.0 <= x < 1.0),
        "confidence": Key(0.5, "float", _open_fraction),
        "temperature": Key(0.5, "float", _positive),
        "variance-floor": Key(1e-8, "float", _positive),
        "max-iter": Key(200, "int", _positive),
        "tol": Key(1e-8, "float", _positive),
        "warmup-epochs": Key(20, "int", _nonneg),
    },
    "train": {
        "lr-initial": Key(0.1, "float", _positive),
        "lr-final": Key(0.00005, "float", _positive),
        "weight-decay": Key(1e-4, "float", _nonneg),
        "epochs": Key(40, "int", _positive),
        "batch-size": Key(16, "int", _positive),
        "segment-seconds": Key(2.0, "float", _positive),
        "embedding-dim": Key(12, "int", _positive),
        "adapt-mode": Key("OCL", "choice", choices=("none", "APL", "TCL", "OCL")),
        "adapt-lr-initial": Key(0.02, "float", _positive),
        "adapt-lr-final": Key(0.00001, "float", _positive),
        "adapt-epochs": Key(80, "int", _positive),
        "adapt-batch-size": Key(16, "int", _positive),
    },
    "data": {
        "mode": Key("files", "choice", choices=("files", "synthetic")),
        "benchmark": Key("chain", "choice", choices=("chain", "adaptation"),
                         help="synthetic benchmark preset"),
    },
}


@dataclass
class PipelineConfig:
    values: dict = field(default_factory=dict)  # (section, key) -> value

    def get(self, section: str, key: str):
        return self.values[(section, key)]

    def section(self, name: str) -> dict:
        return {k: v for (s, k), v in self.values.items() if s == name}


def _parse_value(raw: str, spec: Key, where: str):
    raw = raw.strip()
    try:
        if spec.kind == "int":
            # reject floats masquerading as ints
            if any(c in raw for c in ".eE") and not raw.lstrip("+-").isdigit():
                raise ValueError
            return int(raw)
        if spec.kind == "float":
            return float(raw)
        if spec.kind == "bool":
            low = raw.lower()
            if low in ("true", "yes", "1", "on"):
                return True
            if low in ("false", "no", "0", "off"):
                return False
            raise ValueError
        if spec.kind == "list[str]":
            return [t for t in (p.strip() for p in raw.split(",")) if t]
        if spec.kind == "list[float]":
            return [float(p) for p in raw.split(",") if p.strip()]
        if spec.kind == "choice":
            if raw not in spec.choices:
                raise ConfigError(f"{where}: must be one of {spec.choices}, got {raw!r}")
            return raw
        return raw
    except ConfigError:
        raise
    except ValueError:
        raise ConfigError(f"{where}: cannot parse {raw!r} as {spec.kind}") from None


def defaults() -> PipelineConfig:
    return PipelineConfig({(s, k): spec.default for s, sec in SCHEMA.items()
                           for k, spec in sec.items()})


def config_load(path) -> PipelineConfig:
    """Parse, default, and validate; error messages cite section/key/line."""
    cfg = defaults()
    section = None
    with open(path, "r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            stripped = line.strip()
            if not stripped or stripped.startswith("#"):
                continue
            if stripped.startswith("[") and stripped.endswith("]"):
                section = stripped[1:-1].strip()
                if section not in SCHEMA:
                    raise ConfigError(f"{path}:{lineno}: unknown section [{section}]")
                continue
            if "=" not in stripped:
                raise ConfigError(f"{path}:{lineno}: expected `key = value`")
            if section is None:
                raise ConfigError(f"{path}:{lineno}: key outside any [section]")
            key, _, raw = stripped.partition("=")
            key = key.strip()
            if key not in SCHEMA[section]:
                raise ConfigError(f"{path}:{lineno}: unknown key {key!r} in [{section}]")
            spec = SCHEMA[section][key]
            where = f"{path}:{lineno}: [{section}] {key}"
            value = _parse_value(raw, spec, where)
            if spec.check is not None and not spec.check(value):
                raise ConfigError(f"{where}: value {value!r} out of range")
            cfg.values[(section, key)] = value
    return cfg


def dump_defaults() -> str:
    lines = []
    for section, sec in SCHEMA.items():
        lines.append(f"[{section}]")
        for key, spec in sec.items():
            value = spec.default
            if isinstance(value, list):
                value = ",".join(str(v) for v in value)
            elif isinstance(value, bool):
                value = "true" if value else "false"
            suffix = f"  # {spec.help}" if spec.help else ""
            lines.append(f"{key} = {value}{suffix}")
        lines.append("")
    return "\n".join(lines)


def dump_config(cfg: PipelineConfig) -> str:
    """Resolved configuration, deterministic ordering (for run manifests)."""
    lines = []
    for section, sec in SCHEMA.items():
        lines.append(f"[{section}]")
        for key in sec:
            value = cfg.get(section, key)
            if isinstance(value, list):
                value = ",".join(str(v) for v in value)
            elif isinstance(value, bool):
                value = "true" if value else "false"
            lines.append(f"{key} = {value}")
        lines.append("")
    return "\n".join(lines)
