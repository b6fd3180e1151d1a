"""Encoder / decoder (generator) / discriminator over heatmap volumes.

The architecture is rebuilt from the config on every call: a ``ModelState``
is just a flat name -> parameter-tensor map plus the codebook, which keeps
checkpointing trivial and save/load bit-exact. Per-axis downsampling is 8, 16,
or 32 (F8/F16/F32), applied to T, H, and W alike, so the total volume
compression is the cube of the per-axis factor (512x / 4096x / 32768x).
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import asdict, dataclass, field

import numpy as np

from . import quantizer as qz
from . import tensorcore as tc
from .errors import ArgumentError, ConfigError, DataError, ShapeError
from .heatmap import LAYOUT_2D, HeatmapVolume
from .quantizer import Codebook, TokenGrid
from .tensorcore import Tensor

_FACTORS = {"F8": 8, "F16": 16, "F32": 32}
_CHANNEL_CAP = 256


def stream_rng(seed: int, role: str) -> np.random.Generator:
    """Named-stream RNG split: one master seed, independent per-role streams."""
    digest = hashlib.sha256(role.encode("utf-8")).digest()
    return np.random.default_rng(np.random.SeedSequence(
        [int(seed) & 0xFFFFFFFFFFFFFFFF, int.from_bytes(digest[:8], "little")]))


@dataclass
class ModelConfig:
    compression: str = "F8"
    vocab: int = 128
    embed_dim: int = 256
    base_channels: int = 32
    in_channels: int = 19
    input_extents: tuple = (64, 128, 128)
    lambda_adv: float = 0.1
    alpha_perceptual: float = 1.0
    beta_l1: float = 1.0
    sigma: float = 2.0
    mode: str = "2d"  # pose dimensionality tag: "2d" or "triplane"

    def __post_init__(self):
        if self.compression not in _FACTORS:
            raise ConfigError(f"compression must be one of {sorted(_FACTORS)}, "
                              f"got {self.compression!r}")
        self.input_extents = tuple(int(e) for e in self.input_extents)
        f = self.factor
        for name, ext in zip("THW", self.input_extents):
            if ext % f != 0:
                raise ConfigError(f"axis {name}: extent {ext} not divisible by factor {f}")
        if self.vocab < 2:
            raise ConfigError(f"vocab must be >= 2, got {self.vocab}")

    @property
    def factor(self) -> int:
        return _FACTORS[self.compression]

    @property
    def stages(self) -> int:
        return self.factor.bit_length() - 1  # log2

    @property
    def latent_extents(self) -> tuple:
        return tuple(e // self.factor for e in self.input_extents)

    @property
    def compression_factor(self) -> int:
        return self.factor ** 3

    def stage_widths(self) -> list:
        """Channel width entering each stage; doubles per stage, capped."""
        widths = [self.base_channels]
        for _ in range(self.stages):
            widths.append(min(widths[-1] * 2, _CHANNEL_CAP))
        return widths


@dataclass
class ModelState:
    config: ModelConfig
    params: dict                      # name -> Tensor (requires_grad)
    codebook: Codebook
    step: int = 0
    seed: int = 0
    has_discriminator: bool = True

    def named_parameters(self, prefix: str = "") -> dict:
        out = {k: v for k, v in self.params.items() if k.startswith(prefix)}
        if prefix in ("", "codebook"):
            out["codebook.entries"] = self.codebook.entries
        return out


def _groups_for(channels: int) -> int:
    for g in (8, 4, 2, 1):
        if channels % g == 0:
            return g
    return 1


def _init_conv(params, rng, name, c_in, c_out, k):
    fan_in = c_in * k ** 3
    w = rng.normal(0.0, np.sqrt(2.0 / fan_in),
                   size=(c_out, c_in, k, k, k)).astype(np.float32)
    params[f"{name}.w"] = Tensor(w, requires_grad=True)
    params[f"{name}.b"] = Tensor(np.zeros(c_out, dtype=np.float32), requires_grad=True)


def _init_norm(params, name, channels):
    params[f"{name}.g"] = Tensor(np.ones(channels, dtype=np.float32), requires_grad=True)
    params[f"{name}.o"] = Tensor(np.zeros(channels, dtype=np.float32), requires_grad=True)


def _init_resblock(params, rng, name, channels):
    _init_norm(params, f"{name}.norm1", channels)
    _init_conv(params, rng, f"{name}.conv1", channels, channels, 3)
    _init_norm(params, f"{name}.norm2", channels)
    _init_conv(params, rng, f"{name}.conv2", channels, channels, 3)


def build(config: ModelConfig, seed: int, include_discriminator=None) -> ModelState:
    """Deterministically initialized model; per-role RNG streams keep the
    discriminator's presence from shifting any other parameter draw."""
    params: dict = {}
    widths = config.stage_widths()

    enc_rng = stream_rng(seed, "encoder")
    _init_conv(params, enc_rng, "enc.stem", config.in_channels, widths[0], 3)
    for s in range(config.stages):
        for r in range(2):
            _init_resblock(params, enc_rng, f"enc.stage{s}.res{r}", widths[s])
        _init_conv(params, enc_rng, f"enc.stage{s}.down", widths[s], widths[s + 1], 3)
    _init_norm(params, "enc.head.norm", widths[-1])
    _init_conv(params, enc_rng, "enc.head.proj", widths[-1], config.embed_dim, 1)

    dec_rng = stream_rng(seed, "decoder")
    _init_conv(params, dec_rng, "dec.head.proj", config.embed_dim, widths[-1], 1)
    for s in reversed(range(config.stages)):
        for r in range(2):
            _init_resblock(params, dec_rng, f"dec.stage{s}.res{r}", widths[s + 1])
        _init_conv(params, dec_rng, f"dec.stage{s}.up", widths[s + 1], widths[s], 3)
    _init_norm(params, "dec.out.norm", widths[0])
    _init_conv(params, dec_rng, "dec.out.proj", widths[0], config.in_channels, 3)

    if include_discriminator is None:
        include_discriminator = config.lambda_adv != 0.0
    if include_discriminator:
        disc_rng = stream_rng(seed, "discriminator")
        dc = config.base_channels
        _init_conv(params, disc_rng, "disc.conv0", config.in_channels, dc, 3)
        _init_conv(params, disc_rng, "disc.conv1", dc, dc * 2, 3)
        _init_conv(params, disc_rng, "disc.conv2", dc * 2, dc * 4, 3)
        _init_conv(params, disc_rng, "disc.out", dc * 4, 1, 1)

    book = qz.init_codebook(config.vocab, config.embed_dim,
                            int(stream_rng(seed, "codebook").integers(2 ** 63)))
    return ModelState(config, params, book, step=0, seed=seed,
                      has_discriminator=bool(include_discriminator))


def _conv(state, name, x, stride=1, padding=0):
    return tc.conv3d(x, state.params[f"{name}.w"], state.params[f"{name}.b"],
                     stride=stride, padding=padding)


def _norm_act(state, name, x):
    c = x.shape[1]
    return tc.swish(tc.group_norm(x, _groups_for(c), state.params[f"{name}.g"],
                                  state.params[f"{name}.o"]))


def _resblock(state, name, x):
    h = _norm_act(state, f"{name}.norm1", x)
    h = _conv(state, f"{name}.conv1", h, padding=1)
    h = _norm_act(state, f"{name}.norm2", h)
    h = _conv(state, f"{name}.conv2", h, padding=1)
    return tc.add(x, h)


def _as_batch(heatmaps) -> np.ndarray:
    """HeatmapVolume [F,C,H,W] or array [N,C,T,H,W] -> [N,C,T,H,W] f32."""
    if isinstance(heatmaps, HeatmapVolume):
        v = np.moveaxis(heatmaps.values, 0, 1)[None]  # [1,C,F,H,W]
    else:
        v = np.asarray(heatmaps)
        if v.ndim == 4:
            v = np.moveaxis(v, 0, 1)[None]
    if v.ndim != 5:
        raise ShapeError(f"expected [N,C,T,H,W] or frame-major volume, got {v.shape}")
    return v.astype(np.float32, copy=False)


def _check_extents(config: ModelConfig, x: np.ndarray) -> None:
    if x.shape[1] != config.in_channels:
        raise ShapeError(f"axis C: got {x.shape[1]}, config expects {config.in_channels}")
    for name, got, want in zip("THW", x.shape[2:], config.input_extents):
        if got != want:
            raise ShapeError(f"axis {name}: got {got}, config expects {want}")


def encoder_forward(state: ModelState, x: Tensor) -> Tensor:
    h = _conv(state, "enc.stem", x, padding=1)
    for s in range(state.config.stages):
        for r in range(2):
            h = _resblock(state, f"enc.stage{s}.res{r}", h)
        h = _conv(state, f"enc.stage{s}.down", h, stride=2, padding=1)
    h = _norm_act(state, "enc.head.norm", h)
    return _conv(state, "enc.head.proj", h)


def decoder_forward(state: ModelState, z_q: Tensor) -> Tensor:
    h = _conv(state, "dec.head.proj", z_q)
    for s in reversed(range(state.config.stages)):
        for r in range(2):
            h = _resblock(state, f"dec.stage{s}.res{r}", h)
        h = tc.upsample_nearest3d(h, 2)
        h = _conv(state, f"dec.stage{s}.up", h, padding=1)
    h = _norm_act(state, "dec.out.norm", h)
    h = _conv(state, "dec.out.proj", h, padding=1)
    return tc.sigmoid(h)


def discriminator_forward(state: ModelState, x: Tensor) -> Tensor:
    if not state.has_discriminator:
        raise ArgumentError("model was built without a discriminator")
    h = tc.leaky_relu(_conv(state, "disc.conv0", x, stride=2, padding=1))
    h = tc.leaky_relu(_conv(state, "disc.conv1", h, stride=2, padding=1))
    h = tc.leaky_relu(_conv(state, "disc.conv2", h, stride=2, padding=1))
    h = _conv(state, "disc.out", h)
    n = h.shape[0]
    return tc.row_mean(tc.reshape(h, (n, -1)))


def encode(state: ModelState, heatmaps):
    """Run the encoder and quantizer; returns (z_e, grid(s), z_q)."""
    x = _as_batch(heatmaps)
    _check_extents(state.config, x)
    z_e = encoder_forward(state, Tensor(x))
    result = qz.quantize(z_e, state.codebook)
    grids = result.grids[0] if len(result.grids) == 1 else result.grids
    return z_e, grids, result.z_q


def decode(state: ModelState, grid: TokenGrid) -> HeatmapVolume:
    """Map a token grid back to a heatmap volume in [0,1]."""
    if tuple(grid.extents) != state.config.latent_extents:
        raise ShapeError(f"grid extents {grid.extents} != latent lattice "
                         f"{state.config.latent_extents}")
    if grid.vocab > state.codebook.vocab or int(grid.indices.max()) >= state.codebook.vocab:
        raise DataError("token index out of codebook range")
    entries = state.codebook.entries.data[grid.indices.reshape(-1)]
    t, h, w = grid.extents
    z_q = np.moveaxis(entries.reshape(1, t, h, w, -1), 4, 1)
    out = decoder_forward(state, Tensor(z_q.astype(np.float32)))
    frames_major = np.moveaxis(out.data[0], 0, 1)  # [T,C,H,W]
    return HeatmapVolume(frames_major, LAYOUT_2D, state.config.sigma)


def discriminate(state: ModelState, heatmaps) -> Tensor:
    """One unbounded logit per batch element."""
    x = _as_batch(heatmaps)
    _check_extents(state.config, x)
    return discriminator_forward(state, Tensor(x))


# ---------------------------------------------------------------------------
# "MCK1" checkpoint: magic, u32 header length, JSON header {config, step,
# seed, manifest name -> dtype/extents/offset}, then raw LE buffers.
# ---------------------------------------------------------------------------

_MCK_MAGIC = b"MCK1"
_NP_TAGS = {"f32": np.dtype("<f4"), "f64": np.dtype("<f8"), "i64": np.dtype("<i8")}


def _dtype_tag(dt: np.dtype) -> str:
    for tag, cand in _NP_TAGS.items():
        if cand == dt.newbyteorder("<"):
            return tag
    raise ArgumentError(f"unsupported checkpoint dtype {dt}")


def save_checkpoint(path, state: ModelState, extra: dict = None) -> None:
    buffers: dict[str, np.ndarray] = {name: p.data for name, p in state.params.items()}
    buffers["codebook.entries"] = state.codebook.entries.data
    buffers["codebook.usage"] = state.codebook.usage
    for name, arr in (extra or {}).items():
        buffers[f"extra.{name}"] = np.asarray(arr)

    manifest = {}
    offset = 0
    blobs = []
    for name in sorted(buffers):
        arr = np.ascontiguousarray(buffers[name])
        tag = _dtype_tag(arr.dtype)
        raw = arr.astype(_NP_TAGS[tag], copy=False).tobytes()
        manifest[name] = {"dtype": tag, "extents": list(arr.shape), "offset": offset}
        blobs.append(raw)
        offset += len(raw)

    header = json.dumps({
        "config": asdict(state.config),
        "step": state.step,
        "seed": state.seed,
        "has_discriminator": state.has_discriminator,
        "manifest": manifest,
    }, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(_MCK_MAGIC)
        f.write(struct.pack("<I", len(header)))
        f.write(header)
        for raw in blobs:
            f.write(raw)


def load_checkpoint(path):
    """Returns (ModelState, extra dict); bit-exact round-trip with save."""
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:4] != _MCK_MAGIC:
        raise DataError(f"bad checkpoint magic in {path}")
    try:
        hlen, = struct.unpack_from("<I", blob, 4)
        header = json.loads(blob[8:8 + hlen].decode("utf-8"))
    except (struct.error, json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise DataError(f"corrupt checkpoint header in {path}") from exc
    base = 8 + hlen
    buffers = {}
    for name, meta in header["manifest"].items():
        dt = _NP_TAGS[meta["dtype"]]
        count = int(np.prod(meta["extents"], dtype=np.int64)) if meta["extents"] else 1
        start = base + meta["offset"]
        end = start + count * dt.itemsize
        if end > len(blob):
            raise DataError(f"truncated checkpoint {path}: buffer {name}")
        arr = np.frombuffer(blob, dtype=dt, offset=start, count=count)
        buffers[name] = arr.reshape(meta["extents"]).astype(dt.newbyteorder("="), copy=True)

    cfg_dict = dict(header["config"])
    cfg_dict["input_extents"] = tuple(cfg_dict["input_extents"])
    config = ModelConfig(**cfg_dict)
    params = {}
    extra = {}
    codebook_entries = None
    usage = None
    for name, arr in buffers.items():
        if name == "codebook.entries":
            codebook_entries = arr
        elif name == "codebook.usage":
            usage = arr
        elif name.startswith("extra."):
            extra[name[len("extra."):]] = arr
        else:
            params[name] = Tensor(arr, requires_grad=True)
    if codebook_entries is None:
        raise DataError(f"checkpoint {path} has no codebook entries")
    book = Codebook(Tensor(codebook_entries, requires_grad=True), usage)
    state = ModelState(config, params, book, step=int(header["step"]),
                       seed=int(header["seed"]),
                       has_discriminator=bool(header["has_discriminator"]))
    return state, extra
