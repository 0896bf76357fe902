"""Model and training configuration."""

from __future__ import annotations

from dataclasses import dataclass

from icdkit.errors import ConfigError

ENCODERS = ("bag", "conv", "birnn")
DECODERS = ("maxpool", "la_caml", "la_laat")


@dataclass(frozen=True)
class ModelConfig:
    """Encoder-decoder shape of one model.

    ``window`` only applies to the conv encoder and ``d_p`` to the la_laat
    decoder. ``vocab_size`` and ``n_labels`` may be left unset; training
    resolves them from the corpus.
    """

    encoder: str = "conv"
    decoder: str = "la_caml"
    d_e: int = 32
    d_h: int = 32
    window: int = 3
    d_p: int = 16
    vocab_size: int | None = None
    n_labels: int | None = None

    def validate(self, resolved: bool = False) -> None:
        if self.encoder not in ENCODERS:
            raise ConfigError(f"encoder must be one of {ENCODERS}, got {self.encoder!r}")
        if self.decoder not in DECODERS:
            raise ConfigError(f"decoder must be one of {DECODERS}, got {self.decoder!r}")
        if self.d_e < 1 or self.d_h < 1:
            raise ConfigError("embedding and hidden dimensions must be >= 1")
        if self.encoder == "conv" and self.window < 1:
            raise ConfigError("conv encoder requires window >= 1")
        if self.encoder == "birnn" and self.d_h % 2 != 0:
            raise ConfigError("birnn encoder requires an even d_h (two directions)")
        if self.decoder == "la_laat" and self.d_p < 1:
            raise ConfigError("la_laat decoder requires d_p >= 1")
        if resolved:
            if self.vocab_size is None or self.vocab_size < 1:
                raise ConfigError("vocab_size must be resolved to >= 1 before use")
            if self.n_labels is None or self.n_labels < 1:
                raise ConfigError("n_labels must be resolved to >= 1 before use")

    def to_json_dict(self) -> dict:
        return {
            "encoder": self.encoder,
            "decoder": self.decoder,
            "d_e": self.d_e,
            "d_h": self.d_h,
            "window": self.window,
            "d_p": self.d_p,
            "vocab_size": self.vocab_size,
            "n_labels": self.n_labels,
        }

    @classmethod
    def from_json_dict(cls, data: dict) -> "ModelConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown model field(s): {', '.join(sorted(unknown))}")
        config = cls(**data)
        config.validate()
        return config


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 0.001
    weight_decay: float = 0.0001
    dropout: float = 0.2
    batch_size: int = 8
    epochs: int = 20
    warmup_updates: int = 2000
    seed: int = 0
    max_words: int = 4000
    boundary_tuning: bool = True
    embeddings_path: str | None = None

    def validate(self) -> None:
        if self.lr <= 0:
            raise ConfigError("lr must be > 0")
        if not (0.0 <= self.dropout < 1.0):
            raise ConfigError("dropout must lie in [0, 1)")
        if self.weight_decay < 0:
            raise ConfigError("weight_decay must be >= 0")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.warmup_updates < 0:
            raise ConfigError("warmup_updates must be >= 0")
        if self.max_words < 1:
            raise ConfigError("max_words must be >= 1")

    def to_json_dict(self) -> dict:
        return {
            "lr": self.lr,
            "weight_decay": self.weight_decay,
            "dropout": self.dropout,
            "batch_size": self.batch_size,
            "epochs": self.epochs,
            "warmup_updates": self.warmup_updates,
            "seed": self.seed,
            "max_words": self.max_words,
            "boundary_tuning": self.boundary_tuning,
            "embeddings_path": self.embeddings_path,
        }

    @classmethod
    def from_json_dict(cls, data: dict) -> "TrainConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown training field(s): {', '.join(sorted(unknown))}")
        if "seed" not in data:
            raise ConfigError("training config must set an explicit seed")
        config = cls(**data)
        config.validate()
        return config
