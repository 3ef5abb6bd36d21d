"""The dual-representation network: skeleton-map encoder, PAV-guided attention
(PGA) and the embedding/classification heads."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from . import tensor as T
from .errors import GuidanceError, ShapeError
from .pav import PAV_DIM
from .tensor import Tensor

GUIDANCE_SOURCES = ("pav", "self_attention", "all_ones", "random", "learnable")
NUM_CLASSES = 3


@dataclass
class EncoderConfig:
    widths: tuple[int, ...] = (32, 64, 128)
    channels: int = 256
    strips: int = 8
    in_channels: int = 2

    def __post_init__(self):
        self.widths = tuple(int(w) for w in self.widths)
        if len(self.widths) != 3:
            raise ValueError("encoder expects three intermediate widths (four conv stages)")
        if self.channels < 1 or self.strips < 1:
            raise ValueError("channels and strips must be >= 1")

    @property
    def stage_channels(self) -> tuple[int, ...]:
        return (self.in_channels, *self.widths, self.channels)

    def feature_size(self, size: int) -> int:
        """Spatial size after the stride-1 stage and three stride-2 stages."""
        for _ in range(3):
            size = (size - 1) // 2 + 1
        return size


@dataclass
class ModelConfig:
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    embed_dim: int = 64
    guidance: str = "pav"
    guidance_seed: int = 0
    channel_branch: bool = True
    spatial_branch: bool = True
    pga_init: str = "random"  # or "zeros"

    def __post_init__(self):
        if isinstance(self.encoder, dict):
            self.encoder = EncoderConfig(**self.encoder)
        if self.guidance not in GUIDANCE_SOURCES:
            raise GuidanceError(f"unknown guidance source {self.guidance!r}")
        if self.pga_init not in ("random", "zeros"):
            raise ValueError(f"unknown pga_init {self.pga_init!r}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        d["encoder"] = EncoderConfig(**d["encoder"])
        return cls(**d)


@dataclass
class ForwardOutput:
    f_enc: Tensor  # (B, C, H)
    guidance: Tensor  # (B or 1, 24)
    w_c: Tensor | None  # (B, C, 1)
    w_s: Tensor | None  # (B, 1, H)
    f_out: Tensor  # (B, C, H)
    embeddings: Tensor  # (B, H, d)
    logits: Tensor  # (B, 3)
    activations: Tensor  # (B, C, h, w): temporally pooled last conv stage


class DRFModel:
    """Parameters live in ``self.params`` (name -> tracked Tensor)."""

    def __init__(self, cfg: ModelConfig | None = None, seed: int = 0):
        self.cfg = cfg or ModelConfig()
        self.seed = seed
        self.params: dict[str, Tensor] = {}
        self.buffers: dict[str, np.ndarray] = {}
        self._init_params(np.random.default_rng(seed))

    # ---------------------------------------------------------------- setup

    def _param(self, name: str, value: np.ndarray) -> None:
        if name in self.params:
            raise ValueError(f"duplicate parameter {name}")
        self.params[name] = Tensor(value, requires_grad=True, name=name)

    def _init_params(self, rng: np.random.Generator) -> None:
        cfg = self.cfg
        enc = cfg.encoder
        chans = enc.stage_channels
        for s in range(4):
            cin, cout = chans[s], chans[s + 1]
            std = np.sqrt(2.0 / (cin * 9))
            self._param(f"enc.conv{s + 1}.weight", rng.normal(0.0, std, (cout, cin, 3, 3)))
            self._param(f"enc.conv{s + 1}.bias", np.zeros(cout))

        C, H = enc.channels, enc.strips
        if cfg.pga_init == "zeros":
            wc, ws, wr = np.zeros((PAV_DIM, C)), np.zeros((1, 1, 3)), np.zeros((PAV_DIM, H))
        else:
            wc = rng.normal(0.0, np.sqrt(1.0 / PAV_DIM), (PAV_DIM, C))
            ws = rng.normal(0.0, np.sqrt(1.0 / 3), (1, 1, 3))
            wr = rng.normal(0.0, np.sqrt(1.0 / PAV_DIM), (PAV_DIM, H))
        self._param("pga.channel.weight", wc)
        self._param("pga.channel.bias", np.zeros(C))
        self._param("pga.spatial.conv.weight", ws)
        self._param("pga.spatial.conv.bias", np.zeros(1))
        self._param("pga.spatial.resize.weight", wr)
        self._param("pga.spatial.resize.bias", np.zeros(H))

        if cfg.guidance == "self_attention":
            self._param("guide.proj.weight", rng.normal(0.0, np.sqrt(1.0 / C), (C, PAV_DIM)))
            self._param("guide.proj.bias", np.zeros(PAV_DIM))
        elif cfg.guidance == "learnable":
            self._param("guide.vector", rng.uniform(0.0, 1.0, PAV_DIM))
        elif cfg.guidance == "random":
            self.buffers["guide.random"] = random_guidance(cfg.guidance_seed)

        d = cfg.embed_dim
        self._param("head.strip.weight", rng.normal(0.0, np.sqrt(1.0 / C), (H, C, d)))
        self._param("head.cls.weight", rng.normal(0.0, np.sqrt(1.0 / d), (d, NUM_CLASSES)))
        self._param("head.cls.bias", np.zeros(NUM_CLASSES))

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {k: p.data for k, p in self.params.items()}
        state.update({f"buffer:{k}": v for k, v in self.buffers.items()})
        return state

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        expected = set(self.params) | {f"buffer:{k}" for k in self.buffers}
        if set(state) != expected:
            missing = sorted(expected - set(state))
            extra = sorted(set(state) - expected)
            raise ValueError(f"state mismatch: missing {missing}, unexpected {extra}")
        for k, v in state.items():
            if k.startswith("buffer:"):
                self.buffers[k[len("buffer:"):]] = np.array(v, dtype=np.float64)
                continue
            if v.shape != self.params[k].shape:
                raise ValueError(f"{k}: shape {v.shape} != {self.params[k].shape}")
            self.params[k].data = np.array(v, dtype=np.float64)

    # ---------------------------------------------------------------- encoder

    def _backbone(self, frames: np.ndarray) -> Tensor:
        x: Tensor = Tensor(frames)
        for s in range(4):
            x = T.conv2d(
                x,
                self.params[f"enc.conv{s + 1}.weight"],
                self.params[f"enc.conv{s + 1}.bias"],
                stride=1 if s == 0 else 2,
                padding=1,
            )
            x = T.relu(x)
        return x

    def _temporal_pool(self, feats: Tensor, lengths: Sequence[int]) -> Tensor:
        if len(set(lengths)) == 1:
            b, t = len(lengths), lengths[0]
            return T.max_pool(feats.reshape(b, t, *feats.shape[1:]), axis=1)
        pooled = []
        start = 0
        for n in lengths:
            pooled.append(T.max_pool(feats[start : start + n], axis=0))
            start += n
        return T.stack(pooled, axis=0)

    def _strip_pool(self, fmap: Tensor) -> Tensor:
        b, c, h, w = fmap.shape
        H = self.cfg.encoder.strips
        if h % H:
            raise ShapeError(f"{H} strips do not divide feature height {h}")
        bands = fmap.reshape(b, c, H, (h // H) * w)
        return T.max_pool(bands, axis=3) + T.mean(bands, axis=3)

    def encode_with_activations(self, maps: Sequence[np.ndarray]) -> tuple[Tensor, Tensor]:
        maps = [np.asarray(m, dtype=np.float64) for m in maps]
        if not maps:
            raise ShapeError("encode: empty batch")
        shape = maps[0].shape[1:]
        for m in maps:
            if m.ndim != 4 or m.shape[0] < 1 or m.shape[1:] != shape:
                raise ShapeError(f"encode: frame maps {m.shape} do not match {(-1, *shape)}")
        if shape[0] != self.cfg.encoder.in_channels:
            raise ShapeError(f"encode: expected {self.cfg.encoder.in_channels} channels, got {shape[0]}")
        lengths = [m.shape[0] for m in maps]
        feats = self._backbone(np.concatenate(maps, axis=0))
        pooled = self._temporal_pool(feats, lengths)
        return self._strip_pool(pooled), pooled

    def encode(self, maps: Sequence[np.ndarray]) -> Tensor:
        """(B, C, H) features for a batch of (T_i, 2, Hm, W) map sequences."""
        return self.encode_with_activations(maps)[0]

    # ---------------------------------------------------------------- PGA

    def guidance_vector(self, pavs: np.ndarray | None, f_enc: Tensor) -> Tensor:
        """Length-24 guidance, shaped (B, 24) or (1, 24) for batch-constant sources."""
        src = self.cfg.guidance
        if src == "pav":
            if pavs is None:
                raise GuidanceError("pav guidance requires a PAV for every sequence")
            v = np.asarray(pavs, dtype=np.float64).reshape(-1, PAV_DIM)
            if v.shape[0] != f_enc.shape[0]:
                raise ShapeError(f"guidance: {v.shape[0]} PAVs for a batch of {f_enc.shape[0]}")
            return Tensor(v)
        if src == "all_ones":
            return Tensor(np.ones((1, PAV_DIM)))
        if src == "random":
            return Tensor(self.buffers["guide.random"].reshape(1, PAV_DIM))
        if src == "learnable":
            return self.params["guide.vector"].reshape(1, PAV_DIM)
        pooled = T.mean(f_enc, axis=2)
        return T.linear(pooled, self.params["guide.proj.weight"], self.params["guide.proj.bias"])

    def attention(self, g: Tensor) -> tuple[Tensor, Tensor]:
        """Channel weights (N, C, 1) and strip weights (N, 1, H) from guidance (N, 24)."""
        p = self.params
        n = g.shape[0]
        w_c = T.sigmoid(T.linear(g, p["pga.channel.weight"], p["pga.channel.bias"]))
        s = T.conv1d(g.reshape(n, 1, PAV_DIM), p["pga.spatial.conv.weight"], p["pga.spatial.conv.bias"], padding=1)
        w_s = T.sigmoid(T.linear(s.reshape(n, PAV_DIM), p["pga.spatial.resize.weight"], p["pga.spatial.resize.bias"]))
        return w_c.reshape(n, -1, 1), w_s.reshape(n, 1, -1)

    def recalibrate(self, g: Tensor, f_enc: Tensor) -> tuple[Tensor | None, Tensor | None, Tensor]:
        w_c, w_s = self.attention(g)
        f_out = f_enc
        if self.cfg.channel_branch:
            f_out = f_out * w_c
        if self.cfg.spatial_branch:
            f_out = f_out * w_s
        return w_c, w_s, f_out

    def pga(self, v: np.ndarray, f_enc: Tensor) -> tuple[Tensor, Tensor, Tensor]:
        """PAV-guided recalibration; only valid for a PAV-guided model."""
        if self.cfg.guidance != "pav":
            raise GuidanceError(f"pga called with a PAV on a {self.cfg.guidance!r}-guided model")
        return self.recalibrate(self.guidance_vector(v, f_enc), f_enc)

    # ---------------------------------------------------------------- heads

    def heads(self, f_out: Tensor) -> tuple[Tensor, Tensor]:
        emb = T.einsum("bch,hcd->bhd", f_out, self.params["head.strip.weight"])
        logits = T.linear(T.mean(emb, axis=1), self.params["head.cls.weight"], self.params["head.cls.bias"])
        return emb, logits

    def class_channel_weights(self) -> np.ndarray:
        """(C, 3) classifier weights per channel, composed through strip heads and strip averaging."""
        ws = self.params["head.strip.weight"].data
        wc = self.params["head.cls.weight"].data
        return np.einsum("hcd,dk->ck", ws, wc) / ws.shape[0]

    def forward(self, maps: Sequence[np.ndarray], pavs: np.ndarray | None = None) -> ForwardOutput:
        f_enc, acts = self.encode_with_activations(maps)
        g = self.guidance_vector(pavs, f_enc)
        w_c, w_s, f_out = self.recalibrate(g, f_enc)
        emb, logits = self.heads(f_out)
        return ForwardOutput(f_enc, g, w_c, w_s, f_out, emb, logits, acts)

    __call__ = forward


def random_guidance(seed: int) -> np.ndarray:
    """Fixed uninformative guidance vector in [0, 1]."""
    return np.random.default_rng([seed, 0x5EED]).uniform(0.0, 1.0, PAV_DIM)
