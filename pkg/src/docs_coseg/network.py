"""Siamese encoder / correlation / Siamese decoder network.

Both branches of the encoder and of the decoder use the same parameter
tensors, so gradients from image A and image B accumulate into one buffer.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import NamedTuple

import numpy as np

from . import correlation, ops
from .tensor import ParamStore, Tensor

PAPER_STAGES = ((64, 64), (128, 128), (256, 256, 256), (512, 512, 512), (512, 512, 512))


@dataclass(frozen=True)
class NetworkConfig:
    topology: str = "toy"
    input_size: int = 64
    enc_stages: tuple[tuple[int, ...], ...] = ((16,), (32,), (64,))
    enc_head: tuple[int, ...] = (64, 64)
    squeeze_channels: int = 32
    fusion: str = "correlation"
    dec_channels: tuple[int, ...] = (32, 16, 8)
    normalize_corr: bool = False

    def __post_init__(self):
        if self.fusion not in ("correlation", "concat"):
            raise ValueError(f"fusion must be 'correlation' or 'concat', got {self.fusion!r}")
        if self.input_size % (2 ** len(self.enc_stages)):
            raise ValueError(f"input size {self.input_size} not divisible by 2**{len(self.enc_stages)}")
        if len(self.dec_channels) != len(self.enc_stages):
            raise ValueError("decoder needs one block per pooling stage")

    @classmethod
    def paper(cls, **overrides) -> "NetworkConfig":
        base = cls(
            topology="paper",
            input_size=512,
            enc_stages=PAPER_STAGES,
            enc_head=(1024, 1024),
            squeeze_channels=512,
            dec_channels=(512, 256, 128, 64, 32),
        )
        return replace(base, **overrides)

    @classmethod
    def toy(cls, **overrides) -> "NetworkConfig":
        return replace(cls(), **overrides)

    @classmethod
    def tiny(cls, **overrides) -> "NetworkConfig":
        """Very small net for end-to-end gradient checks."""
        base = cls(
            topology="toy",
            input_size=16,
            enc_stages=((2,), (3,), (4,)),
            enc_head=(4,),
            squeeze_channels=2,
            dec_channels=(3, 2, 2),
        )
        return replace(base, **overrides)

    @property
    def feature_channels(self) -> int:
        return self.enc_head[-1] if self.enc_head else self.enc_stages[-1][-1]

    @property
    def feature_size(self) -> int:
        return self.input_size // 2 ** len(self.enc_stages)

    @property
    def patch_size(self) -> int:
        s = self.feature_size
        return correlation.patch_size_for(s, s)

    @property
    def decoder_in_channels(self) -> int:
        if self.fusion == "correlation":
            return self.squeeze_channels + self.patch_size**2
        return 2 * self.squeeze_channels

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "NetworkConfig":
        d = json.loads(text)
        d["enc_stages"] = tuple(tuple(s) for s in d["enc_stages"])
        for key in ("enc_head", "dec_channels"):
            d[key] = tuple(d[key])
        return cls(**d)


class ProbabilityPair(NamedTuple):
    pA: Tensor
    pB: Tensor


# ---------------------------------------------------------------------------
# parameters


def layer_specs(cfg: NetworkConfig) -> list[tuple[str, tuple[int, ...], float]]:
    """``(name, weight shape, fan_in)`` for every layer, in creation order."""
    specs = []
    cin = 3
    for s, stage in enumerate(cfg.enc_stages, start=1):
        for i, cout in enumerate(stage, start=1):
            specs.append((f"enc.conv{s}_{i}", (cout, cin, 3, 3), cin * 9))
            cin = cout
    for i, cout in enumerate(cfg.enc_head, start=1):
        specs.append((f"enc.conv{len(cfg.enc_stages) + 1}_{i}", (cout, cin, 3, 3), cin * 9))
        cin = cout
    specs.append(("squeeze", (cfg.squeeze_channels, cin, 1, 1), cin))
    cin = cfg.decoder_in_channels
    for b, cout in enumerate(cfg.dec_channels, start=1):
        # transposed conv weight is (in, out, k, k); each output sees in*k*k/stride^2 inputs
        specs.append((f"dec.block{b}.deconv", (cin, cout, 4, 4), cin * 4))
        specs.append((f"dec.block{b}.conv1", (cout, cout, 3, 3), cout * 9))
        specs.append((f"dec.block{b}.conv2", (cout, cout, 3, 3), cout * 9))
        cin = cout
    specs.append(("dec.score", (2, cin, 1, 1), cin))
    return specs


def init_params(cfg: NetworkConfig, seed: int = 0, dtype=np.float32) -> ParamStore:
    """He (fan-in) normal weights from a seeded generator, zero biases."""
    rng = np.random.default_rng(seed)
    store = ParamStore()
    for name, shape, fan_in in layer_specs(cfg):
        w = rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)
        store.add(f"{name}.w", w.astype(dtype))
        nout = shape[1] if name.endswith("deconv") else shape[0]
        store.add(f"{name}.b", np.zeros(nout, dtype=dtype))
    return store


# ---------------------------------------------------------------------------
# forward


def _as_batch(image, cfg: NetworkConfig, dtype) -> Tensor:
    if isinstance(image, Tensor):
        t = image
    else:
        arr = np.asarray(image, dtype=dtype)
        t = Tensor(arr[None] if arr.ndim == 3 else arr)
    s = cfg.input_size
    if t.data.ndim != 4 or t.data.shape[1:] != (3, s, s):
        raise ops.ShapeError(f"expected image of shape (N, 3, {s}, {s}), got {t.shape}")
    return t


def _conv_relu(x: Tensor, params: ParamStore, name: str, pad: int) -> Tensor:
    return ops.relu(ops.conv2d(x, params[f"{name}.w"], params[f"{name}.b"], 1, pad))


def encode(image, params: ParamStore, cfg: NetworkConfig) -> Tensor:
    dtype = params["enc.conv1_1.w"].dtype
    x = _as_batch(image, cfg, dtype)
    for s, stage in enumerate(cfg.enc_stages, start=1):
        for i in range(1, len(stage) + 1):
            x = _conv_relu(x, params, f"enc.conv{s}_{i}", 1)
        x = ops.maxpool2d(x, 2, 2)
    for i in range(1, len(cfg.enc_head) + 1):
        x = _conv_relu(x, params, f"enc.conv{len(cfg.enc_stages) + 1}_{i}", 1)
    return x


def squeeze(features: Tensor, params: ParamStore, cfg: NetworkConfig) -> Tensor:
    return _conv_relu(features, params, "squeeze", 0)


def decode_logits(fused: Tensor, params: ParamStore, cfg: NetworkConfig) -> Tensor:
    x = fused
    for b in range(1, len(cfg.dec_channels) + 1):
        x = ops.relu(ops.transposed_conv2d(x, params[f"dec.block{b}.deconv.w"], params[f"dec.block{b}.deconv.b"], 2, 1))
        x = _conv_relu(x, params, f"dec.block{b}.conv1", 1)
        x = _conv_relu(x, params, f"dec.block{b}.conv2", 1)
    return ops.conv2d(x, params["dec.score.w"], params["dec.score.b"], 1, 0)


def decode(fused: Tensor, params: ParamStore, cfg: NetworkConfig) -> Tensor:
    return ops.softmax_channels(decode_logits(fused, params, cfg))


def fuse(fA: Tensor, fB: Tensor, params: ParamStore, cfg: NetworkConfig) -> tuple[Tensor, Tensor]:
    """Decoder inputs for both branches."""
    sA = squeeze(fA, params, cfg)
    sB = squeeze(fB, params, cfg)
    if cfg.fusion == "concat":
        return ops.concat_channels([sA, sB]), ops.concat_channels([sB, sA])
    D = cfg.patch_size
    cAB = correlation.mutual_correlate(fA, fB, D, cfg.normalize_corr)
    cBA = correlation.mutual_correlate(fB, fA, D, cfg.normalize_corr)
    return ops.concat_channels([sA, cAB]), ops.concat_channels([sB, cBA])


def forward_pair_logits(iA, iB, params: ParamStore, cfg: NetworkConfig) -> tuple[Tensor, Tensor]:
    # branches run as separate calls with identical shapes so that swapping the
    # inputs reproduces the outputs bit for bit
    fA = encode(iA, params, cfg)
    fB = encode(iB, params, cfg)
    xA, xB = fuse(fA, fB, params, cfg)
    return decode_logits(xA, params, cfg), decode_logits(xB, params, cfg)


def forward_pair(iA, iB, params: ParamStore, cfg: NetworkConfig) -> ProbabilityPair:
    lA, lB = forward_pair_logits(iA, iB, params, cfg)
    return ProbabilityPair(ops.softmax_channels(lA), ops.softmax_channels(lB))


def pair_loss(iA, iB, maskA, maskB, params: ParamStore, cfg: NetworkConfig) -> Tensor:
    """Cross-entropy of branch A plus cross-entropy of branch B."""
    lA, lB = forward_pair_logits(iA, iB, params, cfg)
    return ops.add(ops.softmax_cross_entropy(lA, maskA), ops.softmax_cross_entropy(lB, maskB))


def predict_masks(iA, iB, params: ParamStore, cfg: NetworkConfig, sigma: float = 0.5):
    """Foreground probabilities and thresholded masks for a batch of pairs."""
    with params.frozen():
        pA, pB = forward_pair(iA, iB, params, cfg)
    fgA, fgB = pA.data[:, 1], pB.data[:, 1]
    return fgA, fgB, fgA > sigma, fgB > sigma


# ---------------------------------------------------------------------------
# checkpoint file: "DOCS", u32 version, u32 config length + JSON config, then
# records of (u32 name length, name, u32 rank, u64 dims..., little-endian f32 data)

CHECKPOINT_MAGIC = b"DOCS"
CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, params: ParamStore, cfg: NetworkConfig) -> None:
    blob = cfg.to_json().encode("utf-8")
    parts = [CHECKPOINT_MAGIC, struct.pack("<II", CHECKPOINT_VERSION, len(blob)), blob]
    for name, t in params.items():
        enc = name.encode("utf-8")
        arr = np.ascontiguousarray(t.data, dtype="<f4")
        parts.append(struct.pack("<I", len(enc)))
        parts.append(enc)
        parts.append(struct.pack("<I", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(arr.tobytes())
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(b"".join(parts))
    tmp.replace(path)


def load_checkpoint(path) -> tuple[ParamStore, NetworkConfig]:
    raw = Path(path).read_bytes()
    if raw[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic {raw[:4]!r})")
    try:
        version, blen = struct.unpack_from("<II", raw, 4)
        if version != CHECKPOINT_VERSION:
            raise CheckpointError(f"{path}: checkpoint version {version}, this build reads {CHECKPOINT_VERSION}")
        pos = 12
        cfg = NetworkConfig.from_json(raw[pos : pos + blen].decode("utf-8"))
        pos += blen
        store = ParamStore()
        while pos < len(raw):
            (nlen,) = struct.unpack_from("<I", raw, pos)
            pos += 4
            name = raw[pos : pos + nlen].decode("utf-8")
            pos += nlen
            (rank,) = struct.unpack_from("<I", raw, pos)
            pos += 4
            dims = struct.unpack_from(f"<{rank}Q", raw, pos)
            pos += 8 * rank
            count = int(np.prod(dims)) if rank else 1
            data = np.frombuffer(raw, dtype="<f4", count=count, offset=pos).reshape(dims)
            pos += 4 * count
            store.add(name, data.astype(np.float32))
    except (struct.error, ValueError, KeyError, UnicodeDecodeError) as exc:
        if isinstance(exc, CheckpointError):
            raise
        raise CheckpointError(f"{path}: corrupt checkpoint ({exc})") from exc
    return store, cfg
