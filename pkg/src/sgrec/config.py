"""Training configuration.  Defaults follow the published Foursquare setup."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

# CLI spellings for each ablation switch.
ABLATION_NAMES = {
    "augmentation": "use_augmentation",
    "cagat": "use_cagat",
    "category-loss": "use_category_loss",
    "pos-emb": "use_positional_embedding",
    "pos-attn": "use_position_attention",
}

# Variant labels -> the switch each one turns off.
VARIANTS = {
    "full": None,
    "ns": "augmentation",
    "nc": "category-loss",
    "w/o.cagat": "cagat",
    "w/o.pemb": "pos-emb",
    "w/o.pattn": "pos-attn",
}


@dataclass
class AblationFlags:
    use_augmentation: bool = True
    use_cagat: bool = True
    use_category_loss: bool = True
    use_positional_embedding: bool = True
    use_position_attention: bool = True

    def disable(self, *names: str) -> "AblationFlags":
        kw = asdict(self)
        for name in names:
            if name not in ABLATION_NAMES:
                raise ValueError(f"unknown ablation {name!r}; choose from {sorted(ABLATION_NAMES)}")
            kw[ABLATION_NAMES[name]] = False
        return AblationFlags(**kw)

    @classmethod
    def variant(cls, label: str) -> "AblationFlags":
        off = VARIANTS[label]
        return cls() if off is None else cls().disable(off)


@dataclass
class TrainConfig:
    dim: int = 120
    gamma: float = 0.2
    eta: float = 0.2
    num_layers: int = 2
    batch_size: int = 64
    learning_rate: float = 0.005
    l2_lambda: float = 1e-5
    max_epochs: int = 100
    patience: int = 10
    seed: int = 0
    ablation: AblationFlags = field(default_factory=AblationFlags)
    neighbor_scope: str = "per-user"
    leaky_slope: float = 0.2
    aggregate_edge_injected: bool = False
    category_source: str = "layer"
    dtype: str = "float32"
    write_back: bool = True

    def __post_init__(self):
        if isinstance(self.ablation, dict):
            self.ablation = AblationFlags(**self.ablation)
        for name in ("dim", "num_layers", "batch_size", "max_epochs", "patience"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if not 0.0 <= self.gamma <= 1.0:
            raise ValueError(f"gamma must lie in [0, 1], got {self.gamma}")
        if self.eta < 0 or self.l2_lambda < 0:
            raise ValueError("eta and l2_lambda must be non-negative")
        if self.neighbor_scope not in ("per-user", "global"):
            raise ValueError(f"neighbor_scope must be per-user or global, got {self.neighbor_scope!r}")
        if self.category_source not in ("layer", "table"):
            raise ValueError("category_source must be 'layer' or 'table'")
        if self.dtype not in ("float32", "float64"):
            raise ValueError("dtype must be float32 or float64")
        if not 0.0 < self.leaky_slope < 1.0:
            raise ValueError("leaky_slope must lie in (0, 1)")

    @property
    def effective_gamma(self) -> float:
        return self.gamma if self.ablation.use_augmentation else 0.0

    @property
    def effective_eta(self) -> float:
        return self.eta if self.ablation.use_category_loss else 0.0

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown training config keys: {sorted(unknown)}")
        return cls(**d)


def load_config_file(path) -> dict:
    """Read a JSON config with optional ``dataset`` and ``train`` sections."""
    data = json.loads(Path(path).read_text(encoding="utf-8"))
    if not isinstance(data, dict):
        raise ValueError(f"{path}: config must be a JSON object")
    extra = set(data) - {"dataset", "train"}
    if extra:
        raise ValueError(f"{path}: unknown config sections {sorted(extra)}")
    return data
