"""Model hyperparameters, frozen at construction time."""

from __future__ import annotations

from dataclasses import dataclass

from ..errors import ConfigError


@dataclass(frozen=True)
class ModelConfig:
    """Widths and switches that fully determine the parameter set.

    embed_dim and num_heads size the transformer blocks; num_blocks is the
    chain length. attn_map_channels is 2 (under / over). gamma_range bounds
    the global gamma head's output. eaf_enabled switches the fusion gate;
    off means a fixed 0.5/0.5 blend with no extra parameters.
    """

    embed_dim: int = 32
    num_blocks: int = 5
    num_heads: int = 2
    attn_map_channels: int = 2
    gamma_range: tuple[float, float] = (0.3, 3.0)
    eaf_enabled: bool = True
    seed: int = 0

    def validate(self) -> None:
        if self.embed_dim < 1 or self.num_heads < 1:
            raise ConfigError(f"embed_dim and num_heads must be positive, got {self.embed_dim}, {self.num_heads}")
        if self.embed_dim % self.num_heads != 0:
            raise ConfigError(f"embed_dim {self.embed_dim} not divisible by num_heads {self.num_heads}")
        if self.num_blocks < 1:
            raise ConfigError(f"num_blocks must be >= 1, got {self.num_blocks}")
        lo, hi = self.gamma_range
        if not (0.0 < lo < hi):
            raise ConfigError(f"gamma_range must satisfy 0 < min < max, got {self.gamma_range}")
        if self.attn_map_channels != 2:
            raise ConfigError(f"attn_map_channels must be 2, got {self.attn_map_channels}")

    def to_dict(self) -> dict:
        return {
            "embed_dim": self.embed_dim,
            "num_blocks": self.num_blocks,
            "num_heads": self.num_heads,
            "attn_map_channels": self.attn_map_channels,
            "gamma_range": list(self.gamma_range),
            "eaf_enabled": self.eaf_enabled,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "ModelConfig":
        try:
            cfg = cls(
                embed_dim=int(doc["embed_dim"]),
                num_blocks=int(doc["num_blocks"]),
                num_heads=int(doc["num_heads"]),
                attn_map_channels=int(doc["attn_map_channels"]),
                gamma_range=(float(doc["gamma_range"][0]), float(doc["gamma_range"][1])),
                eaf_enabled=bool(doc["eaf_enabled"]),
                seed=int(doc["seed"]),
            )
        except (KeyError, TypeError, ValueError, IndexError) as exc:
            raise ConfigError(f"malformed model config: {exc!r}") from exc
        cfg.validate()
        return cfg
