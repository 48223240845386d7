"""Line-oriented experiment configuration: `key = value`, one per line,
sections expressed by dotted prefixes, `#` comments.

Every run echoes its fully resolved configuration (all keys, defaults
included) so a run directory is self-describing and re-runnable byte for
byte. Unknown keys are rejected rather than ignored.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

from .errors import ConfigError
from .federation import FederationConfig
from .losses import LossConfig
from .models import MlpConfig, ViTConfig
from .partition import PartitionSpec

_DCA_DEFAULT = tuple(round(0.05 * i, 2) for i in range(1, 20))

# key -> (type tag, default); type tags: int, float, bool, str, floats, ints,
# optint (int or "none")
SCHEMA: dict[str, tuple[str, object]] = {
    "run.mode": ("str", "federated"),            # federated | centralized
    "run.model": ("str", "mlp"),                 # mlp | vit
    "run.dtype": ("str", "f32"),                 # f32 | f64
    "run.name": ("str", "run"),
    "dataset.path": ("str", ""),
    "dataset.synth": ("bool", True),
    "dataset.synth.kind": ("str", "blobs"),      # blobs | tiles
    "dataset.synth.counts": ("ints", (1000, 400, 200, 60, 20)),
    "dataset.synth.dim": ("int", 8),
    "dataset.synth.radius": ("float", 2.5),
    "dataset.synth.sigma": ("float", 1.0),
    "dataset.synth.image_size": ("int", 16),
    "dataset.synth.channels": ("int", 1),
    "dataset.synth.noise": ("float", 0.25),
    "dataset.synth.seed": ("int", 0),
    "partition.mode": ("str", "fixed"),
    "partition.ratios": ("floats", (0.5, 0.3, 0.2)),
    "partition.beta": ("float", 0.5),
    "partition.clients": ("int", 3),
    "partition.test_fraction": ("float", 0.1),
    "partition.test_ratio_index": ("optint", None),
    "partition.seed": ("int", 0),
    "model.hidden_dim": ("int", 32),
    "model.layer_norm_eps": ("float", 1e-5),
    "model.vit.image_size": ("int", 16),
    "model.vit.patch_size": ("int", 4),
    "model.vit.channels": ("int", 1),
    "model.vit.embed_dim": ("int", 32),
    "model.vit.num_heads": ("int", 4),
    "model.vit.head_dim": ("int", 8),
    "model.vit.ffn_dim": ("int", 64),
    "model.vit.num_layers": ("int", 2),
    "model.vit.learned_positions": ("bool", False),
    "loss.kind": ("str", "adaptive_focal"),
    "loss.gamma": ("float", 2.0),
    "loss.gamma_trainable": ("bool", False),
    "loss.gamma_lo": ("float", 0.5),
    "loss.gamma_hi": ("float", 5.0),
    "loss.blend": ("float", 0.5),
    "loss.epsilon": ("float", 1e-6),
    "federation.rounds": ("int", 50),
    "federation.local_epochs": ("int", 1),
    "federation.batch_size": ("int", 16),
    "federation.learning_rate": ("float", 1e-4),
    "federation.beta1": ("float", 0.9),
    "federation.beta2": ("float", 0.999),
    "federation.adam_eps": ("float", 1e-8),
    "federation.client_fraction": ("float", 1.0),
    "federation.aggregation": ("str", "inverse_imbalance"),
    "federation.seed": ("int", 0),
    "federation.concurrent": ("bool", False),
    "federation.tail_fraction": ("float", 0.3),
    "dca.thresholds": ("floats", _DCA_DEFAULT),
}


def _parse_value(key: str, raw: str):
    tag = SCHEMA[key][0]
    raw = raw.strip()
    try:
        if tag == "int":
            return int(raw)
        if tag == "float":
            return float(raw)
        if tag == "bool":
            if raw.lower() in ("true", "1", "yes"):
                return True
            if raw.lower() in ("false", "0", "no"):
                return False
            raise ValueError(raw)
        if tag == "floats":
            return tuple(float(p) for p in raw.split(",") if p.strip())
        if tag == "ints":
            return tuple(int(p) for p in raw.split(",") if p.strip())
        if tag == "optint":
            return None if raw.lower() == "none" else int(raw)
        return raw
    except ValueError as exc:
        raise ConfigError(f"bad value for {key}: {raw!r}") from exc


def _format_value(key: str, value) -> str:
    tag = SCHEMA[key][0]
    if tag in ("floats", "ints"):
        return ",".join(repr(v) if tag == "floats" else str(v) for v in value)
    if tag == "bool":
        return "true" if value else "false"
    if tag == "optint":
        return "none" if value is None else str(value)
    if tag == "float":
        return repr(float(value))
    return str(value)


@dataclass
class ExperimentConfig:
    values: dict[str, object]

    def __post_init__(self):
        for key in self.values:
            if key not in SCHEMA:
                raise ConfigError(f"unknown config key {key!r}")
        merged = {k: default for k, (_, default) in SCHEMA.items()}
        merged.update(self.values)
        self.values = merged
        self.validate()

    def __getitem__(self, key: str):
        return self.values[key]

    def validate(self) -> None:
        v = self.values
        if v["run.mode"] not in ("federated", "centralized"):
            raise ConfigError(f"run.mode must be federated or centralized, "
                              f"got {v['run.mode']!r}")
        if v["run.model"] not in ("mlp", "vit"):
            raise ConfigError(f"run.model must be mlp or vit, got {v['run.model']!r}")
        if v["run.dtype"] not in ("f32", "f64"):
            raise ConfigError(f"run.dtype must be f32 or f64, got {v['run.dtype']!r}")
        if not v["dataset.synth"] and not v["dataset.path"]:
            raise ConfigError("set dataset.path or dataset.synth = true")
        if v["dataset.synth.kind"] not in ("blobs", "tiles"):
            raise ConfigError(f"unknown synthesizer {v['dataset.synth.kind']!r}")
        # sub-configs run their own validation
        self.loss_config()
        self.federation_config()
        self.partition_spec()

    # typed views -----------------------------------------------------------

    def loss_config(self) -> LossConfig:
        v = self.values
        return LossConfig(kind=v["loss.kind"], gamma=v["loss.gamma"],
                          gamma_trainable=v["loss.gamma_trainable"],
                          gamma_lo=v["loss.gamma_lo"], gamma_hi=v["loss.gamma_hi"],
                          blend=v["loss.blend"], epsilon=v["loss.epsilon"])

    def federation_config(self) -> FederationConfig:
        v = self.values
        return FederationConfig(
            num_clients=v["partition.clients"], rounds=v["federation.rounds"],
            local_epochs=v["federation.local_epochs"],
            batch_size=v["federation.batch_size"],
            learning_rate=v["federation.learning_rate"], beta1=v["federation.beta1"],
            beta2=v["federation.beta2"], adam_eps=v["federation.adam_eps"],
            client_fraction=v["federation.client_fraction"],
            aggregation=v["federation.aggregation"], seed=v["federation.seed"],
            concurrent=v["federation.concurrent"],
            tail_fraction=v["federation.tail_fraction"])

    def partition_spec(self) -> PartitionSpec:
        v = self.values
        if v["partition.mode"] == "fixed":
            return PartitionSpec(mode="fixed", ratios=tuple(v["partition.ratios"]),
                                 num_clients=v["partition.clients"],
                                 test_fraction=v["partition.test_fraction"],
                                 test_ratio_index=v["partition.test_ratio_index"],
                                 seed=v["partition.seed"])
        return PartitionSpec(mode="dirichlet", beta=v["partition.beta"],
                             num_clients=v["partition.clients"],
                             test_fraction=v["partition.test_fraction"],
                             seed=v["partition.seed"])

    def vit_config(self, num_classes: int) -> ViTConfig:
        v = self.values
        return ViTConfig(image_size=v["model.vit.image_size"],
                         patch_size=v["model.vit.patch_size"],
                         channels=v["model.vit.channels"],
                         embed_dim=v["model.vit.embed_dim"],
                         num_heads=v["model.vit.num_heads"],
                         head_dim=v["model.vit.head_dim"],
                         ffn_dim=v["model.vit.ffn_dim"],
                         num_layers=v["model.vit.num_layers"],
                         num_classes=num_classes,
                         layer_norm_eps=v["model.layer_norm_eps"],
                         learned_positions=v["model.vit.learned_positions"])

    def mlp_config(self, input_dim: int, num_classes: int) -> MlpConfig:
        return MlpConfig(input_dim=input_dim, hidden_dim=self.values["model.hidden_dim"],
                         num_classes=num_classes)

    # text round trip --------------------------------------------------------

    def to_text(self) -> str:
        lines = [f"{k} = {_format_value(k, self.values[k])}" for k in sorted(self.values)]
        return "\n".join(lines) + "\n"

    @staticmethod
    def parse_text(text: str, source: str = "<config>") -> "ExperimentConfig":
        values: dict[str, object] = {}
        for lineno, line in enumerate(text.splitlines(), start=1):
            stripped = line.strip()
            if not stripped or stripped.startswith("#"):
                continue
            key, sep, raw = stripped.partition("=")
            key = key.strip()
            if not sep:
                raise ConfigError(f"{source}:{lineno}: expected `key = value`, "
                                  f"got {line!r}")
            if key not in SCHEMA:
                raise ConfigError(f"{source}:{lineno}: unknown config key {key!r}")
            if key in values:
                raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}")
            values[key] = _parse_value(key, raw)
        return ExperimentConfig(values)

    @staticmethod
    def from_file(path) -> "ExperimentConfig":
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        return ExperimentConfig.parse_text(path.read_text(encoding="utf-8"),
                                           source=str(path))

    def with_overrides(self, overrides: dict[str, object]) -> "ExperimentConfig":
        merged = dict(self.values)
        for key, value in overrides.items():
            if key not in SCHEMA:
                raise ConfigError(f"unknown config key {key!r}")
            merged[key] = _parse_value(key, value) if isinstance(value, str) else value
        return ExperimentConfig(merged)
