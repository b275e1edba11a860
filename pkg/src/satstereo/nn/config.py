"""Network and training configuration."""
from dataclasses import asdict, dataclass, field

from ..errors import ConfigError

LOSS_WEIGHTS = (0.5, 0.7, 1.0)

# Reference schedules: (dataset tag, epochs, learning rate).
SCHEDULES = {
    "traditional": [("sceneflow", 20, 1e-3), ("kitti", 100, 1e-3), ("satellite_small", 10, 1e-3)],
    "full": [("sceneflow", 20, 1e-3), ("satellite_all", 20, 1e-3)],
    "mixed": [("sceneflow+satellite_mix", 20, 1e-3)],
}


@dataclass
class NetworkConfig:
    base_channels: int = 32
    max_disparity: int = 352
    block_repeats: tuple = (6, 32, 6, 6)
    spp_pool_sizes: tuple = (64, 32, 16, 8)
    crosshair_bands: tuple = (4, 8, 16, 32)
    pooling_mode: str = "spp"
    upsample_mode: str = "bilinear"
    hourglass_count: int = 3
    cost_volume_channels: str = "2F"

    def __post_init__(self):
        self.block_repeats = tuple(int(r) for r in self.block_repeats)
        self.spp_pool_sizes = tuple(int(p) for p in self.spp_pool_sizes)
        self.crosshair_bands = tuple(int(b) for b in self.crosshair_bands)
        if self.max_disparity % 4:
            raise ConfigError("max_disparity must be divisible by 4")
        if len(self.block_repeats) != 4 or min(self.block_repeats) < 1:
            raise ConfigError("block_repeats needs four positive counts")
        if self.pooling_mode not in ("spp", "crosshair"):
            raise ConfigError(f"pooling_mode must be 'spp' or 'crosshair', got {self.pooling_mode!r}")
        if self.upsample_mode not in ("bilinear", "cubic"):
            raise ConfigError(f"upsample_mode must be 'bilinear' or 'cubic', got {self.upsample_mode!r}")
        if self.cost_volume_channels not in ("2F", "F"):
            raise ConfigError("cost_volume_channels must be '2F' or 'F'")
        if self.hourglass_count < 1:
            raise ConfigError("hourglass_count must be >= 1")

    @property
    def interp(self):
        return "linear" if self.upsample_mode == "bilinear" else "cubic"

    def to_dict(self):
        d = asdict(self)
        for k in ("block_repeats", "spp_pool_sizes", "crosshair_bands"):
            d[k] = list(d[k])
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(**d)

    @classmethod
    def toy(cls, **overrides):
        """Desk-scale network: 8 base channels, D=32, single-block stacks."""
        kw = dict(base_channels=8, max_disparity=32, block_repeats=(1, 1, 1, 1),
                  spp_pool_sizes=(8, 4, 2, 1), crosshair_bands=(2, 4, 8))
        kw.update(overrides)
        return cls(**kw)


@dataclass
class TrainConfig:
    learning_rate: float = 1e-3
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-7
    loss_weights: tuple = LOSS_WEIGHTS
    schedule: list = field(default_factory=lambda: list(SCHEDULES["full"]))
    seed: int = 0

    def __post_init__(self):
        self.loss_weights = tuple(float(w) for w in self.loss_weights)
        self.schedule = [tuple(s) for s in self.schedule]

    def to_dict(self):
        d = asdict(self)
        d["loss_weights"] = list(self.loss_weights)
        d["schedule"] = [list(s) for s in self.schedule]
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        if isinstance(d.get("schedule"), str):
            d["schedule"] = SCHEDULES[d["schedule"]]
        return cls(**d)
