from __future__ import annotations

from dataclasses import asdict, dataclass

from ..errors import ConfigError


@dataclass(frozen=True)
class DetectorConfig:
    d_model: int = 32
    n_heads: int = 4
    fusion_layers: int = 3
    n_queries: int = 12
    image_grid: int = 16
    patch_size: int = 4
    prompt_length: int = 10
    lora_rank: int = 8
    lora_layers: int | None = None  # None -> every fusion layer
    tie_qk: bool = True
    vocab: tuple = ()
    image_layers: int = 1
    text_layers: int = 2
    decoder_layers: int = 2
    ffn_dim: int = 64
    # the text tower is the wide one (stands in for a BERT-sized text backbone)
    text_ffn_dim: int = 5120
    max_text_len: int = 64
    positional_encoding: bool = True
    logit_scale: float = 10.0
    spatial_sigma: float = 0.15
    prompt_init_std: float = 0.02

    def __post_init__(self):
        if self.d_model <= 0 or self.n_heads <= 0 or self.d_model % self.n_heads:
            raise ConfigError(f"d_model={self.d_model} must be divisible by n_heads={self.n_heads}")
        if self.lora_layers is None:
            object.__setattr__(self, "lora_layers", self.fusion_layers)
        if not 0 <= self.lora_layers <= self.fusion_layers:
            raise ConfigError(f"lora_layers={self.lora_layers} outside [0, {self.fusion_layers}]")
        if self.prompt_length < 0:
            raise ConfigError("prompt_length must be >= 0")
        if self.lora_rank < 1:
            raise ConfigError("lora_rank must be >= 1")
        if self.lora_rank > self.d_model:
            raise ConfigError(f"lora_rank={self.lora_rank} exceeds d_model={self.d_model}")
        if self.n_queries < 1 or self.image_grid < 1 or self.patch_size < 1:
            raise ConfigError("n_queries, image_grid and patch_size must be positive")
        object.__setattr__(self, "vocab", tuple(self.vocab))

    @property
    def image_size(self) -> int:
        return self.image_grid * self.patch_size

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads

    @property
    def lora_projections(self) -> tuple[str, ...]:
        """Low-rank-augmented projections per fusion layer.

        ``it`` is the image-to-text aggregation (text queries, image keys and
        values), ``ti`` the text-to-image one.  With ``tie_qk`` the query and
        key projections of one direction are a single matrix.
        """
        if self.tie_qk:
            return ("it_qk", "it_v", "ti_qk", "ti_v")
        return ("it_q", "it_k", "it_v", "ti_q", "ti_k", "ti_v")

    def lora_layer_indices(self) -> list[int]:
        # memories go into the last ``lora_layers`` fusion layers
        return list(range(self.fusion_layers - self.lora_layers, self.fusion_layers))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["vocab"] = list(self.vocab)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "DetectorConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown detector config keys: {sorted(unknown)}")
        d = dict(d)
        if "vocab" in d:
            d["vocab"] = tuple(d["vocab"])
        return cls(**d)

    def replace(self, **changes) -> "DetectorConfig":
        d = self.to_dict()
        if changes.get("lora_layers") is None and "fusion_layers" in changes:
            d["lora_layers"] = None
        d.update(changes)
        return DetectorConfig.from_dict(d)

