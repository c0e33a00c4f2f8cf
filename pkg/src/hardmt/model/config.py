from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from enum import Enum

from ..errors import ConfigError


class ModelType(str, Enum):
    CTC = "ctc"
    RNNT = "rnnt"
    AED = "aed"
    CTC_ATTN = "ctc_attn"

    @classmethod
    def parse(cls, value) -> "ModelType":
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value).lower().replace("-", "_").replace("/", "_"))
        except ValueError:
            raise ConfigError(f"unknown model type {value!r}") from None

    @property
    def has_decoder(self) -> bool:
        return self in (ModelType.AED, ModelType.CTC_ATTN)


DEFAULT_LAMBDAS = (0.3, 0.3, 1.0)
CTC_LAMBDAS = (1.0, 1.0, 0.0)


@dataclass
class ModelConfig:
    model_type: ModelType = ModelType.CTC_ATTN
    input_vocab_size: int = 0
    src_vocab_size: int = 0
    tgt_vocab_size: int = 0
    d_model: int = 64
    d_ff: int = 256
    n_heads: int = 2
    n_enc_layers: int = 6
    tap_layer: int | None = None
    n_dec_layers: int = 2
    dec_d_ff: int | None = None
    embed_dim: int | None = None
    pred_dim: int | None = None
    joint_dim: int | None = None
    dropout: float = 0.1
    lambdas: tuple = DEFAULT_LAMBDAS
    label_smoothing: float = 0.1
    time_mask_spans: int = 2
    time_mask_max_frac: float = 0.1
    post_encoder_downsample: int = 1
    max_len: int = 4096
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        self.model_type = ModelType.parse(self.model_type)
        if self.tap_layer is None:
            self.tap_layer = max(1, (2 * self.n_enc_layers) // 3)
        self.lambdas = tuple(float(x) for x in self.lambdas)
        if self.model_type is ModelType.CTC:
            self.lambdas = CTC_LAMBDAS
        self.validate()

    def validate(self):
        for name in ("d_model", "d_ff", "n_heads", "n_enc_layers", "n_dec_layers"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        if not 1 <= self.tap_layer < self.n_enc_layers:
            raise ConfigError(f"tap_layer must satisfy 1 <= tap_layer < {self.n_enc_layers}")
        if self.d_model % self.n_heads:
            raise ConfigError("d_model must be divisible by n_heads")
        if not 0 <= self.dropout < 1:
            raise ConfigError("dropout must be in [0, 1)")
        if len(self.lambdas) != 3 or any(x < 0 for x in self.lambdas):
            raise ConfigError(f"bad lambdas {self.lambdas}")
        if self.post_encoder_downsample not in (1, 2):
            raise ConfigError("post_encoder_downsample must be 1 or 2")
        if self.time_mask_spans < 0 or not 0 <= self.time_mask_max_frac <= 1:
            raise ConfigError("bad time-mask settings")
        if not 0 <= self.label_smoothing < 1:
            raise ConfigError("label_smoothing must be in [0, 1)")

    def to_dict(self):
        d = dataclasses.asdict(self)
        d["model_type"] = self.model_type.value
        d["lambdas"] = list(self.lambdas)
        return d

    @classmethod
    def from_dict(cls, d):
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigError(f"unknown model config keys {sorted(unknown)}")
        return cls(**d)


# named size presets; vocabulary sizes are filled in from data
PRESETS = {
    "desk": dict(d_model=64, d_ff=256, n_heads=2, n_enc_layers=6, n_dec_layers=2),
    "base": dict(d_model=256, d_ff=1024, n_heads=4, n_enc_layers=18, tap_layer=12,
                 n_dec_layers=6, dec_d_ff=2048, embed_dim=1024),
    "large": dict(d_model=512, d_ff=2048, n_heads=8, n_enc_layers=18, tap_layer=12,
                  n_dec_layers=6, dec_d_ff=2048, embed_dim=1024),
}


def preset(name: str, **overrides) -> ModelConfig:
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    return ModelConfig(**{**PRESETS[name], **overrides})
