"""Flat key=value experiment configuration with CLI overrides.

The config format is deliberately plain: one `key=value` per line, `#`
comments, every key validated against the schema below before any
computation starts. A resolved config written back out (the run manifest)
is itself a valid config file.
"""

from __future__ import annotations

from dataclasses import dataclass, fields


class ConfigError(ValueError):
    pass


def _bool(s: str) -> bool:
    if s.lower() in ("1", "true", "yes"):
        return True
    if s.lower() in ("0", "false", "no"):
        return False
    raise ConfigError(f"not a boolean: {s!r}")


@dataclass
class ExperimentConfig:
    seed: int = 0
    out: str = "out"

    # dataset
    task: str = "blobs"  # blobs | idx
    blobs_classes: int = 5
    blobs_per_class: int = 400
    blobs_in_dim: int = 20
    blobs_separation: float = 10.0
    blobs_val_per_class: int = 200
    train_images: str = ""
    train_labels: str = ""
    val_images: str = ""
    val_labels: str = ""
    train_subset: int = 10000  # filter-training local subset for the idx task
    val_subset: int = 0  # 0 = full validation set

    # server model
    arch: str = "logistic"  # logistic | mlp
    hidden: str = "32"
    batch_size: int = 128
    server_lr: float = 0.01

    # filter training
    episodes: int = 1
    filter_steps: int = 500
    positive_weight: float = 10.0
    filter_lr: float = 0.002
    train_attack: str = "random_gaussian"
    train_attack_scale: str = ""  # empty = attack default
    threshold: float = 0.5
    normalize: bool = True  # direction-only filter input
    filter_file: str = "filter.rgcf"

    # deployment run
    mode: str = "rgcf"  # rgcf | aggregator
    aggregator: str = "mean"
    f_count: int = -1  # -1 = round(n_workers * byzantine_fraction)
    krum_squared: bool = True
    n_workers: int = 10
    byzantine_fraction: float = 0.0
    attack: str = "inverse"
    attack_scale: str = ""  # empty = attack default
    steps: int = 2000
    eval_every: int = 25

    # bench
    bench_methods: str = "rgcf,krum,median,trimmed_mean,bulyan"
    bench_n: str = "10"
    bench_d: int = 100000
    bench_reps: int = 100
    bench_f_count: int = 1

    # compare grid
    compare_methods: str = "rgcf,krum,median,trimmed_mean,bulyan"
    compare_attacks: str = "inverse,random_gaussian,all_ones,gradient_shift"
    compare_fractions: str = "0.2,0.33,0.5,0.9"

    def hidden_dims(self) -> tuple[int, ...]:
        return tuple(int(x) for x in self.hidden.split(",") if x.strip())

    def attack_scale_value(self) -> float | None:
        return float(self.attack_scale) if self.attack_scale.strip() else None

    def train_attack_scale_value(self) -> float | None:
        return float(self.train_attack_scale) if self.train_attack_scale.strip() else None


_FIELDS = {f.name: f.type for f in fields(ExperimentConfig)}
_PARSERS = {"int": int, "float": float, "str": str, "bool": _bool}


def parse_kv_lines(lines, source: str) -> dict[str, str]:
    out: dict[str, str] = {}
    for lineno, raw in enumerate(lines, 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected key=value, got {raw.strip()!r}")
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def build_config(
    config_path: str | None = None, overrides: dict[str, str] | None = None
) -> ExperimentConfig:
    raw: dict[str, str] = {}
    if config_path is not None:
        try:
            with open(config_path) as f:
                raw.update(parse_kv_lines(f, config_path))
        except OSError as e:
            raise ConfigError(f"cannot read config {config_path}: {e}") from e
    raw.update(overrides or {})
    cfg = ExperimentConfig()
    for key, value in raw.items():
        if key not in _FIELDS:
            raise ConfigError(f"unknown config key {key!r}")
        parser = _PARSERS[_FIELDS[key]]
        try:
            setattr(cfg, key, parser(value))
        except (ValueError, ConfigError) as e:
            raise ConfigError(f"bad value for {key}: {value!r} ({e})") from e
    return cfg


def write_manifest(cfg: ExperimentConfig, path: str) -> None:
    with open(path, "w") as f:
        f.write("# resolved experiment configuration; rerunnable via --config\n")
        for field in sorted(_FIELDS):
            value = getattr(cfg, field)
            if isinstance(value, bool):
                value = "true" if value else "false"
            f.write(f"{field}={value}\n")
