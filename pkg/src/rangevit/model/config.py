"""Architecture hyperparameters."""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields, replace

ENCODER_KINDS = ("vit", "identity")
STEM_KINDS = ("conv", "linear")
DECODER_KINDS = ("upconv", "linear")


class ConfigError(ValueError):
    """Invalid configuration; ``key`` names the offending field."""

    def __init__(self, key: str, message: str):
        super().__init__(f"{key}: {message}")
        self.key = key


def check_type(key: str, value, default) -> None:
    """Reject JSON values whose type differs from the field default's."""
    if isinstance(default, bool):
        ok = isinstance(value, bool)
    elif isinstance(default, int):
        ok = isinstance(value, int) and not isinstance(value, bool)
    elif isinstance(default, float):
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
    elif isinstance(default, str):
        ok = isinstance(value, str)
    else:
        ok = True
    if not ok:
        raise ConfigError(key, f"expected {type(default).__name__}, got {type(value).__name__}")


@dataclass(frozen=True)
class ModelConfig:
    crop_height: int = 32
    crop_width: int = 384
    patch_height: int = 2
    patch_width: int = 8
    embed_dim: int = 384
    depth: int = 12
    num_heads: int = 6
    hidden_dim: int = 256  # stem (last block), decoder and refiner width
    stem_width: int = 32  # width of the first three stem blocks
    num_classes: int = 16
    mlp_ratio: int = 4
    in_channels: int = 5
    use_class_token: bool = True
    encoder_kind: str = "vit"
    stem_kind: str = "conv"
    decoder_kind: str = "upconv"
    use_refiner: bool = True
    kernel_points: int = 15
    influence_radius: float = 1.2
    max_neighbors: int = 32

    def __post_init__(self):
        positive = ("crop_height", "crop_width", "patch_height", "patch_width", "embed_dim",
                    "num_heads", "hidden_dim", "stem_width", "num_classes", "mlp_ratio",
                    "in_channels", "kernel_points", "max_neighbors")
        for key in positive:
            if getattr(self, key) < 1:
                raise ConfigError(key, "must be >= 1")
        if self.depth < 0:
            raise ConfigError("depth", "must be >= 0")
        if self.crop_height % self.patch_height:
            raise ConfigError("patch_height", f"{self.patch_height} does not divide crop height {self.crop_height}")
        if self.crop_width % self.patch_width:
            raise ConfigError("patch_width", f"{self.patch_width} does not divide crop width {self.crop_width}")
        if self.embed_dim % self.num_heads:
            raise ConfigError("num_heads", f"{self.num_heads} does not divide embed_dim {self.embed_dim}")
        for key, allowed in (("encoder_kind", ENCODER_KINDS), ("stem_kind", STEM_KINDS),
                             ("decoder_kind", DECODER_KINDS)):
            if getattr(self, key) not in allowed:
                raise ConfigError(key, f"expected one of {allowed}, got {getattr(self, key)!r}")
        if self.stem_kind == "conv" and (self.patch_height % 2 or self.patch_width % 2):
            # the pooling window (P + 1) with padding P / 2 needs even patches
            raise ConfigError("patch_height" if self.patch_height % 2 else "patch_width",
                              "convolutional stem needs even patch sizes")
        if self.stem_kind == "linear" and self.decoder_kind == "upconv":
            raise ConfigError("decoder_kind", "the upconv decoder needs the convolutional stem's context features")
        if self.decoder_kind == "linear" and self.use_refiner:
            raise ConfigError("use_refiner", "the linear decoder emits class scores, not refiner features")
        if self.influence_radius <= 0:
            raise ConfigError("influence_radius", "must be positive")

    # -- derived sizes --------------------------------------------------------
    @property
    def grid_height(self) -> int:
        return self.crop_height // self.patch_height

    @property
    def grid_width(self) -> int:
        return self.crop_width // self.patch_width

    @property
    def num_patches(self) -> int:
        return self.grid_height * self.grid_width

    @property
    def sequence_length(self) -> int:
        """Tokens seen by the transformer blocks."""
        return self.num_patches + int(self.use_class_token)

    @property
    def feature_channels(self) -> int:
        """Channels of the decoder's output map."""
        return self.hidden_dim if self.decoder_kind == "upconv" else self.num_classes

    # -- presets and (de)serialization ------------------------------------------
    @classmethod
    def vit_small(cls, hidden_dim: int = 256, **overrides) -> "ModelConfig":
        return cls(hidden_dim=hidden_dim, **overrides)

    @classmethod
    def toy(cls, **overrides) -> "ModelConfig":
        base = dict(crop_height=8, crop_width=32, patch_height=2, patch_width=8, embed_dim=64,
                    depth=2, num_heads=4, hidden_dim=32, num_classes=4)
        base.update(overrides)
        return cls(**base)

    def with_crop(self, height: int, width: int) -> "ModelConfig":
        return replace(self, crop_height=height, crop_width=width)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict, prefix: str = "model") -> "ModelConfig":
        defaults = {f.name: f.default for f in fields(cls)}
        for key, value in data.items():
            if key not in defaults:
                raise ConfigError(f"{prefix}.{key}", "unknown key")
            check_type(f"{prefix}.{key}", value, defaults[key])
        try:
            return cls(**data)
        except ConfigError as exc:
            raise ConfigError(f"{prefix}.{exc.key}", str(exc).split(": ", 1)[1]) from None
        except TypeError as exc:
            raise ConfigError(prefix, str(exc)) from None
