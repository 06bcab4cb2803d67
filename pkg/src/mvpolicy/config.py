"""Run configuration: dataclass tree, JSON round-trip, and content hashing.

Defaults follow the published model recipe; `fast()`/`micro()`/`tiny()` shrink
resolution and widths so experiments and gradient checks fit on a single CPU
core. Every experiment is identified by a content hash over the semantic
fields (paths, seeds, and logging cadence excluded) so datasets, checkpoints,
and reports can be cross-checked.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field


@dataclass(frozen=True)
class CameraConfig:
    width: int = 320
    height: int = 256
    strides: tuple = (8, 16, 32, 64)


@dataclass(frozen=True)
class EncoderConfig:
    token_dim: int = 256        # d: RGB token width after 1x1 mapping
    depth_dim: int = 32         # d_dep: depth token width
    rgb_base_channels: int = 32
    depth_base_channels: int = 4


@dataclass(frozen=True)
class FusionConfig:
    num_bins: int = 128
    d_min: float = 0.01
    d_max: float = 1.2
    knn_k: int = 16
    tau: float = 0.08
    gate_init: float = 0.5
    pair_heads: int = 4
    pair_ffn: int = 128
    phi_hidden: int = 32        # hidden width of the 3->d point embedding MLP


@dataclass(frozen=True)
class ReadoutConfig:
    context_dim: int = 256      # D_c of the frozen toy embedders
    text_tokens: int = 64       # K_txt
    latent_blocks: int = 3      # M
    latent_heads: int = 16
    readouts: int = 64          # R pooled tokens per stream
    pool_layers: int = 2
    pool_heads: int = 8
    patch_size: int = 16


@dataclass(frozen=True)
class DecoderConfig:
    horizon: int = 64           # H
    upsample_factor: int = 8    # c; base chunk length is horizon // c
    exec_horizon: int = 32
    num_blocks: int = 6
    heads: int = 8
    state_blocks: int = 2
    graph_bias_buckets: int = 9  # hop counts 0..8; larger hops share the last
    timesteps: int = 1000
    sample_steps: int = 10
    time_embed_dim: int = 128
    max_pos_img: int = 32
    max_pos_temporal: int = 32
    max_pos_text: int = 512
    geometry_levels: tuple = (0, 1, 2, 3)  # pyramid levels cross-attended by the decoder

    @property
    def base_len(self) -> int:
        if self.horizon % self.upsample_factor != 0:
            raise ValueError("horizon must be divisible by the upsample factor")
        return self.horizon // self.upsample_factor


@dataclass(frozen=True)
class LossConfig:
    lambda_fk: float = 1.0
    lambda_depth: float = 0.1
    angle_weight: float = 2.0
    position_weight: float = 1.0
    quat_weight: float = 0.5
    valid_threshold: float = 0.5
    validity_mode: str = "fraction"  # "fraction": w = valid fraction; "binary": w = 1 above threshold
    augment_noise: float = 0.02


@dataclass(frozen=True)
class OptimConfig:
    lr: float = 1.414e-4
    weight_decay: float = 5e-4
    rgb_lr_scale: float = 0.1
    warmup_steps: int = 500
    warmup_start_factor: float = 0.001
    decay_factor: float = 0.1
    decay_milestone: float = 0.9  # fraction of max_step
    batch_size: int = 8
    max_step: int = 20000


@dataclass(frozen=True)
class AblationConfig:
    disable_pair_fusion: bool = False
    disable_aggregation: bool = False
    disable_language: bool = False
    disable_depth_loss: bool = False
    views: tuple = ("front", "head", "left_wrist", "right_wrist")


@dataclass(frozen=True)
class WorldConfig:
    episode_len: int = 128
    teacher_sigma: float = 0.002
    raw_sigma: float = 0.008
    hole_rate: float = 0.03
    edge_band_px: int = 2
    target_radius: float = 0.04
    narrow_fov: bool = False


@dataclass
class RunConfig:
    camera: CameraConfig = field(default_factory=CameraConfig)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    fusion: FusionConfig = field(default_factory=FusionConfig)
    readout: ReadoutConfig = field(default_factory=ReadoutConfig)
    decoder: DecoderConfig = field(default_factory=DecoderConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    ablation: AblationConfig = field(default_factory=AblationConfig)
    world: WorldConfig = field(default_factory=WorldConfig)
    seed: int = 0
    rig_path: str = ""    # empty: built-in default rig for the configured camera
    chain_path: str = ""  # empty: built-in dual-arm chain
    log_every: int = 50
    ckpt_every: int = 5000

    # Fields that identify a run but not its semantics; excluded from the hash.
    NON_SEMANTIC = ("seed", "rig_path", "chain_path", "log_every", "ckpt_every")

    @staticmethod
    def fast() -> "RunConfig":
        """Reduced-resolution preset sized for single-core training runs."""
        return RunConfig(
            camera=CameraConfig(width=160, height=128),
            encoder=EncoderConfig(token_dim=128, depth_dim=32, rgb_base_channels=16,
                                  depth_base_channels=4),
            fusion=FusionConfig(num_bins=32, knn_k=16, pair_ffn=128, phi_hidden=32),
            readout=ReadoutConfig(context_dim=128, latent_heads=8, readouts=32),
            decoder=DecoderConfig(heads=8, geometry_levels=(1, 2, 3)),
        )

    @staticmethod
    def micro() -> "RunConfig":
        """Smallest trainable preset, for multi-seed comparison experiments."""
        return RunConfig(
            camera=CameraConfig(width=96, height=64),
            encoder=EncoderConfig(token_dim=64, depth_dim=16, rgb_base_channels=8,
                                  depth_base_channels=4),
            fusion=FusionConfig(num_bins=16, knn_k=8, pair_heads=4, pair_ffn=64,
                                phi_hidden=16),
            readout=ReadoutConfig(context_dim=64, latent_heads=4, readouts=16,
                                  pool_heads=4),
            decoder=DecoderConfig(heads=4, geometry_levels=(1, 2, 3)),
        )

    @staticmethod
    def tiny() -> "RunConfig":
        """Gradient-check preset: small enough for 64-bit finite differences."""
        return RunConfig(
            camera=CameraConfig(width=64, height=64),
            encoder=EncoderConfig(token_dim=32, depth_dim=8, rgb_base_channels=4,
                                  depth_base_channels=2),
            fusion=FusionConfig(num_bins=8, knn_k=4, pair_heads=2, pair_ffn=32,
                                phi_hidden=8),
            readout=ReadoutConfig(context_dim=32, text_tokens=16, latent_heads=4,
                                  readouts=8, pool_heads=4, patch_size=16),
            decoder=DecoderConfig(horizon=16, exec_horizon=8, heads=4,
                                  time_embed_dim=32),
            optim=OptimConfig(batch_size=2, max_step=100),
        )

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @staticmethod
    def from_dict(doc: dict) -> "RunConfig":
        known_fields = {f.name for f in dataclasses.fields(RunConfig)}
        kwargs = {}
        for key, value in doc.items():
            if key not in known_fields:
                raise ValueError(f"unknown config key: {key!r}")
            if key in _SECTION_TYPES:
                if not isinstance(value, dict):
                    raise ValueError(f"config section {key!r} must be a mapping")
                cls = _SECTION_TYPES[key]
                known = {sf.name for sf in dataclasses.fields(cls)}
                bad = set(value) - known
                if bad:
                    raise ValueError(f"unknown keys in config section {key!r}: {sorted(bad)}")
                value = cls(**{k: _tuplify(v) for k, v in value.items()})
            kwargs[key] = value
        return RunConfig(**kwargs)

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2)

    @staticmethod
    def load(path) -> "RunConfig":
        with open(path) as fh:
            return RunConfig.from_dict(json.load(fh))

    def semantic_dict(self) -> dict:
        doc = self.to_dict()
        for key in self.NON_SEMANTIC:
            doc.pop(key, None)
        return doc

    @property
    def config_hash(self) -> str:
        blob = json.dumps(self.semantic_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    def run_hash(self, *digests: str) -> str:
        """Hash binding the config to rig/chain structure digests.

        This is the value embedded in datasets, checkpoints, and reports; it
        changes whenever the config semantics, the camera rig, or the
        kinematic chain change (e.g. a different joint count).
        """
        h = hashlib.sha256(self.config_hash.encode())
        for d in digests:
            h.update(b"|")
            h.update(d.encode())
        return h.hexdigest()[:16]


_SECTION_TYPES = {
    "camera": CameraConfig, "encoder": EncoderConfig, "fusion": FusionConfig,
    "readout": ReadoutConfig, "decoder": DecoderConfig, "loss": LossConfig,
    "optim": OptimConfig, "ablation": AblationConfig, "world": WorldConfig,
}


def _tuplify(v):
    return tuple(v) if isinstance(v, list) else v
