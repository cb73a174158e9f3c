"""Plain-text ``key = value`` run configuration.

Blank lines and ``#`` comments are ignored. Unknown keys are an error.
The file should start with ``config_version = 1``.
"""

from __future__ import annotations

from dataclasses import dataclass, fields
from pathlib import Path

CONFIG_VERSION = 1


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    config_version: int = CONFIG_VERSION
    seed: int = 0
    scheme: int = 2
    # evaluation channel
    channel: str = "flat"  # flat | multipath | ideal
    snr_db: float = 30.0
    path_loss_n: float = 2.0
    p0: float = 1.0
    rician_k: float = 1.0
    csi_variance: float | None = None
    pilot_count: int = 16
    # data
    num_cavs: int = 2
    n_train: int = 2000
    n_val: int = 200
    n_test: int = 200
    test_scenes: str | None = None
    # optimization
    epochs: int = 20
    weighting_epochs: int = 10
    batch_size: int = 16
    lr: float = 1e-3
    weight_decay: float = 1e-4
    train_snr_db: float = 15.0
    # self-supervised weighting
    lambda_pos: float = 1.0
    lambda_neg: float = 1e-4
    aug_snr_pos_db: float = 30.0
    aug_snr_neg_db: float = -10.0
    # evaluation
    eval_draws: int = 5
    pathloss_csi_variance: float = 0.1
    # artifacts
    output_dir: str = "runs/default"
    backbone_checkpoint: str | None = None
    weighting_checkpoint: str | None = None

    def validate(self) -> "RunConfig":
        if self.config_version != CONFIG_VERSION:
            raise ConfigError(f"unsupported config_version {self.config_version}")
        if self.scheme not in (1, 2, 3):
            raise ConfigError(f"scheme must be 1, 2 or 3, got {self.scheme}")
        if self.channel not in ("flat", "multipath", "ideal"):
            raise ConfigError(f"unknown channel {self.channel!r}")
        if self.num_cavs < 1:
            raise ConfigError("num_cavs must be >= 1")
        if self.pilot_count not in (1, 2, 4, 8, 16, 32, 64):
            raise ConfigError(f"pilot_count must divide 64, got {self.pilot_count}")
        for name in ("n_train", "n_test", "epochs", "batch_size", "eval_draws"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.scheme == 3 and not self.backbone_checkpoint:
            raise ConfigError("scheme 3 needs backbone_checkpoint (a scheme-2 checkpoint)")
        return self

    @property
    def out(self) -> Path:
        return Path(self.output_dir)


def _convert(raw: str, current):
    if isinstance(current, bool):
        return raw.lower() in ("1", "true", "yes")
    if isinstance(current, int):
        return int(raw)
    if isinstance(current, float):
        return float(raw)
    return raw


_NUMERIC_OPTIONAL = {"csi_variance"}


def parse_config(text: str) -> RunConfig:
    cfg = RunConfig()
    known = {f.name for f in fields(RunConfig)}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key not in known:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        current = getattr(cfg, key)
        try:
            if key in _NUMERIC_OPTIONAL:
                value = None if raw.lower() in ("none", "") else float(raw)
            elif current is None:
                value = None if raw.lower() in ("none", "") else raw
            else:
                value = _convert(raw, current)
        except ValueError as exc:
            raise ConfigError(f"line {lineno}: bad value for {key}: {raw!r}") from exc
        setattr(cfg, key, value)
    return cfg.validate()


def load_config(path: str | Path) -> RunConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_config(text)


def dump_config(cfg: RunConfig) -> str:
    lines = []
    for f in fields(RunConfig):
        value = getattr(cfg, f.name)
        lines.append(f"{f.name} = {'none' if value is None else value}")
    return "\n".join(lines) + "\n"
