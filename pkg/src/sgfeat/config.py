"""Pipeline configuration and its flat ``key = value`` text form."""

from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, fields

from .errors import InvalidInput, ParseError


@dataclass(frozen=True)
class PipelineConfig:
    seed: int = 0
    # levels (metres): dense voxel (0 keeps the input points), salient level, superpoint grid
    dense_voxel: float = 0.0
    salient_cell: float = 0.10
    super_cell: float = 0.20
    # backbone descriptors
    desc_radius: float = 0.50
    dense_desc_radius: float = 0.20
    # saliency: selection radius and thresholds, then the radius of the scatter behind gamma
    r_salient: float = 0.30
    lambda10: float = 0.7
    lambda21: float = 0.9
    gamma_radius: float = 0.80
    # encoder widths and layers
    d_t: int = 64
    heads: int = 4
    n_s: int = 3
    pool_levels: int = 2
    pool_radius_factor: float = 1.5
    n_geo: int = 1
    sigma_d: float = 0.05
    value_gain: float = 0.5
    bias_gain: float = 1.0
    # high-order transformer
    n_c: int = 256
    k: int = 64
    n_g: int = 6
    sigma_h: float = 1.0
    sigma_a: float = 2.0
    pooling: str = "max"
    parent_gain: float = 0.5
    # matching
    tau: float = 0.05
    sinkhorn_iters: int = 100
    dustbin_score: float = 0.0
    confidence: float = 0.05
    match_temperature: float = 0.02
    # local-to-global registration
    lgr_tau: float = 0.05
    lgr_iters: int = 5
    lgr_min_size: int = 3
    lgr_kernel: float = 0.2
    # evaluation
    ir_tau: float = 0.1
    fmr_threshold: float = 0.05
    rmse_threshold: float = 0.2
    # component switches
    aug: bool = True
    hot: bool = True
    hse: bool = True

    def __post_init__(self):
        positive = ("salient_cell", "super_cell", "desc_radius", "dense_desc_radius", "r_salient",
                    "gamma_radius", "pool_radius_factor", "sigma_d", "sigma_h", "sigma_a", "tau",
                    "match_temperature", "lgr_tau", "ir_tau", "rmse_threshold")
        for name in positive:
            if not getattr(self, name) > 0:
                raise InvalidInput(f"{name} must be positive")
        if self.lgr_kernel < 0:
            raise InvalidInput("lgr_kernel must be >= 0")
        if self.dense_voxel < 0:
            raise InvalidInput("dense_voxel must be >= 0")
        if self.k < 1 or self.n_c < 1:
            raise InvalidInput("k and n_c must be at least 1")
        if self.n_g < 2 or self.n_g % 2:
            raise InvalidInput("n_g must be an even number >= 2")
        if self.n_s < 1 or self.n_geo < 0 or self.sinkhorn_iters < 1 or self.lgr_iters < 1:
            raise InvalidInput("layer and iteration counts must be positive")
        if self.d_t < 8 or self.d_t % self.heads:
            raise InvalidInput("d_t must be >= 8 and divisible by heads")
        if self.pooling not in ("max", "mean"):
            raise InvalidInput("pooling must be 'max' or 'mean'")
        if not 0 < self.fmr_threshold < 1:
            raise InvalidInput("fmr_threshold must lie in (0, 1)")

    def replace(self, **kw) -> "PipelineConfig":
        return dataclasses.replace(self, **kw)

    @property
    def flags(self) -> dict:
        return {"aug": self.aug, "hot": self.hot, "hse": self.hse}


def indoor() -> PipelineConfig:
    return PipelineConfig()


def outdoor() -> PipelineConfig:
    """Same structure with every length scaled to the 0.30 m matching radius."""
    s = 6.0
    base = PipelineConfig()
    lengths = ("salient_cell", "super_cell", "desc_radius", "dense_desc_radius", "r_salient",
               "gamma_radius", "sigma_d", "tau", "lgr_tau")
    return base.replace(**{n: getattr(base, n) * s for n in lengths}, ir_tau=0.6, rmse_threshold=1.2)


PRESETS = {"indoor": indoor, "outdoor": outdoor}


# -- flat key-value text ------------------------------------------------------------

def _format(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _parse_value(raw: str, typ, line: int):
    try:
        if typ is bool:
            low = raw.lower()
            if low in ("true", "yes", "on", "1"):
                return True
            if low in ("false", "no", "off", "0"):
                return False
            raise ValueError(raw)
        if typ is int:
            return int(raw)
        if typ is float:
            return float(raw)
        return raw
    except ValueError:
        raise ParseError(f"cannot read {raw!r} as {typ.__name__}", line) from None


def parse_pairs(text: str) -> list[tuple[str, str, int]]:
    """(key, value, line number) for every non-comment line of a flat config text."""
    out = []
    for no, line in enumerate(text.splitlines(), start=1):
        body = line.split("#", 1)[0].strip()
        if not body:
            continue
        if "=" not in body:
            raise ParseError(f"expected 'key = value', got {body!r}", no)
        key, value = (s.strip() for s in body.split("=", 1))
        if not key:
            raise ParseError("empty key", no)
        out.append((key, value, no))
    return out


_TYPES = {"int": int, "float": float, "bool": bool, "str": str}


def parse_config(text: str, base: PipelineConfig | None = None) -> PipelineConfig:
    """Parse a config text; a ``preset = indoor|outdoor`` line selects the starting values."""
    pairs = parse_pairs(text)
    cfg = base
    for key, value, no in pairs:
        if key == "preset":
            if value not in PRESETS:
                raise ParseError(f"unknown preset {value!r}", no)
            cfg = PRESETS[value]()
    cfg = cfg or PipelineConfig()
    types = {f.name: _TYPES[f.type] if isinstance(f.type, str) else f.type for f in fields(PipelineConfig)}
    updates = {}
    for key, value, no in pairs:
        if key == "preset":
            continue
        if key not in types:
            raise ParseError(f"unknown config key {key!r}", no)
        updates[key] = _parse_value(value, types[key], no)
    try:
        return cfg.replace(**updates)
    except InvalidInput as e:
        raise ParseError(str(e)) from None


def serialize_config(cfg: PipelineConfig) -> str:
    lines = ["# sgfeat pipeline configuration"]
    lines += [f"{f.name} = {_format(getattr(cfg, f.name))}" for f in fields(cfg)]
    return "\n".join(lines) + "\n"


def load_config(path, env: bool = True) -> PipelineConfig:
    with open(path, encoding="utf-8") as fh:
        cfg = parse_config(fh.read())
    return apply_env(cfg) if env else cfg


def apply_env(cfg: PipelineConfig) -> PipelineConfig:
    """SGFEAT_SEED, when set, replaces the configured seed."""
    raw = os.environ.get("SGFEAT_SEED")
    if raw is None or raw.strip() == "":
        return cfg
    try:
        return cfg.replace(seed=int(raw))
    except ValueError:
        raise InvalidInput(f"SGFEAT_SEED must be an integer, got {raw!r}") from None
