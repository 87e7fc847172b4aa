"""Line-oriented ``key = value`` run configuration."""

from __future__ import annotations

from pathlib import Path

from .errors import ConfigError

# key -> default; the default's type is the key's type
DEFAULTS: dict[str, object] = {
    "seed": 0,
    "out": "out",
    "data.manifest": "",
    "data.image_size": 32,
    "data.synth.n_per_class": 40,
    "data.synth.patch": 8,
    "data.synth.noise": 0.1,
    "data.synth.seed": -1,
    "split.test_fraction": 0.2,
    "split.val_fraction": 0.15,
    "split.stratified": True,
    "split.seed": -1,
    "rebalance.enabled": True,
    "rebalance.target": "mean",
    "rebalance.seed": -1,
    "model.seed": -1,
    "model.sa.enabled": True,
    "model.sa.k": 4,
    "model.sa.kernel": "3x3",
    "model.sa.gamma_init": 0.01,
    "model.sa.dropout": 0.5,
    "optim.lr": 0.01,
    "optim.eps": 0.1,
    "optim.beta1": 0.9,
    "optim.beta2": 0.999,
    "train.epochs": 30,
    "train.batch_size": 16,
    "train.patience": 10,
    "train.seed": -1,
    "eval.snapshot": "",
    "viz.count": 4,
    "viz.blend": 0.5,
    "viz.colormap": "jet",
    "viz.q": 0.5,
    "viz.gradcam_layer": -1,
    "gradcheck.h": 1e-5,
    "gradcheck.tol": 1e-4,
    "gradcheck.batch": 2,
    "gradcheck.gamma": 1.0,
    "gradcheck.noise": 0.0,
}

# seeds left at -1 are derived from the top-level seed plus this offset
SEED_OFFSETS = {
    "data.synth.seed": 0,
    "split.seed": 1,
    "rebalance.seed": 2,
    "model.seed": 3,
    "train.seed": 4,
}

_TRUE = {"true", "yes", "on", "1"}
_FALSE = {"false", "no", "off", "0"}


def _coerce(key: str, raw: str):
    default = DEFAULTS[key]
    try:
        if isinstance(default, bool):
            low = raw.lower()
            if low in _TRUE:
                return True
            if low in _FALSE:
                return False
            raise ValueError(raw)
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
    except ValueError:
        raise ConfigError(f"{key}: cannot read {raw!r} as {type(default).__name__}") from None
    return raw


class RunConfig:
    """Resolved settings; unknown keys and malformed values raise ConfigError."""

    def __init__(self, values: dict | None = None):
        self.values = dict(DEFAULTS)
        for key, value in (values or {}).items():
            self.set(key, value)

    def set(self, key: str, value) -> None:
        if key not in DEFAULTS:
            raise ConfigError(f"unknown config key {key!r}")
        self.values[key] = _coerce(key, str(value)) if isinstance(value, str) else value

    def __getitem__(self, key: str):
        return self.values[key]

    def seed_for(self, key: str) -> int:
        v = self.values[key]
        return self.values["seed"] + SEED_OFFSETS[key] if v == -1 else v

    def resolved(self) -> "RunConfig":
        """Copy with every derived seed filled in."""
        out = RunConfig(self.values)
        for key in SEED_OFFSETS:
            out.values[key] = self.seed_for(key)
        return out

    def to_text(self) -> str:
        return "".join(f"{k} = {_fmt(v)}\n" for k, v in self.values.items())

    def save(self, path) -> None:
        Path(path).write_text(self.to_text(), encoding="utf-8")


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    return repr(v) if isinstance(v, float) else str(v)


def parse_config(text: str, source: str = "<config>") -> RunConfig:
    cfg = RunConfig()
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ConfigError(f"{source}:{n}: expected 'key = value'")
        try:
            cfg.set(key.strip(), value.strip())
        except ConfigError as e:
            raise ConfigError(f"{source}:{n}: {e}") from None
    return cfg


def load_config(path) -> RunConfig:
    p = Path(path)
    try:
        text = p.read_text(encoding="utf-8")
    except OSError as e:
        raise ConfigError(f"cannot read config {p}: {e.strerror or e}") from None
    return parse_config(text, str(p))


def apply_overrides(cfg: RunConfig, pairs) -> RunConfig:
    """Apply ``key=value`` strings from the command line."""
    for pair in pairs or ():
        key, sep, value = pair.partition("=")
        if not sep:
            raise ConfigError(f"--set expects key=value, got {pair!r}")
        cfg.set(key.strip(), value.strip())
    return cfg
