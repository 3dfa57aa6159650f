"""Layer stacks from an upstream speech encoder.

Two sources are supported: a deterministic mock encoder (seeded random
strided convolutions plus mixing layers, a desk-scale stand-in for large
pre-trained models) and stacks imported from files exported by real models.
Stacks carry hidden states for layers 0..L, where index 0 is the encoder
output that feeds the first mixing layer.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .audio import Waveform
from .errors import ConfigError, DataError, FormatError
from .rng import child_rng

_PLANT_SALT = 0x5EED


@dataclass(frozen=True)
class LayerStack:
    """(L+1) x T x D hidden states, stored as float32 (the on-disk precision)."""

    layers: np.ndarray
    frame_rate_hz: float

    def __post_init__(self):
        arr = np.asarray(self.layers, dtype=np.float32)
        if arr.ndim != 3 or arr.shape[0] < 2 or arr.shape[1] < 1 or arr.shape[2] < 1:
            raise ValueError("layer stack must be (L+1) x T x D with L >= 1")
        if not np.all(np.isfinite(arr)):
            raise ValueError("layer stack contains non-finite entries")
        arr = arr.copy()
        arr.flags.writeable = False
        object.__setattr__(self, "layers", arr)

    @property
    def n_layers(self) -> int:
        """L: number of mixing layers (stack holds L+1 entries)."""
        return self.layers.shape[0] - 1

    @property
    def num_frames(self) -> int:
        return self.layers.shape[1]

    @property
    def dim(self) -> int:
        return self.layers.shape[2]


@dataclass(frozen=True)
class MockUpstreamConfig:
    n_layers: int = 12
    dim: int = 64
    seed: int = 0
    conv_strides: tuple = (5, 4, 4, 4)
    smoothing: int = 3

    def __post_init__(self):
        if self.n_layers < 1 or self.dim < 1:
            raise ConfigError("mock upstream needs n_layers >= 1 and dim >= 1")
        strides = tuple(int(s) for s in self.conv_strides)
        if not strides or any(s < 1 for s in strides):
            raise ConfigError("conv_strides must be positive integers")
        if self.smoothing < 1:
            raise ConfigError("smoothing width must be >= 1")
        object.__setattr__(self, "conv_strides", strides)

    @property
    def stride_product(self) -> int:
        p = 1
        for s in self.conv_strides:
            p *= s
        return p

    @property
    def frame_rate_hz(self) -> float:
        return 16000.0 / self.stride_product


class MockUpstream:
    """Seeded random encoder: strided conv stack then tanh mixing layers.

    Parameters are fixed by the seed, never trained at construction; training
    may update them in the joint fine-tuning stage. Forward passes are pure.
    """

    def __init__(self, cfg: MockUpstreamConfig, params: dict | None = None):
        self.cfg = cfg
        self.params = params if params is not None else self._init_params(cfg)

    @staticmethod
    def _init_params(cfg: MockUpstreamConfig) -> dict:
        rng = child_rng(cfg.seed, "mock-upstream-init")
        params = {}
        c_in = 1
        for i, stride in enumerate(cfg.conv_strides):
            fan = stride * c_in
            params[f"conv{i}.w"] = rng.normal(0.0, 1.0 / np.sqrt(fan), (fan, cfg.dim))
            params[f"conv{i}.b"] = rng.normal(0.0, 0.1, cfg.dim)
            c_in = cfg.dim
        for l in range(1, cfg.n_layers + 1):
            params[f"mix{l}.w"] = rng.normal(0.0, 1.0 / np.sqrt(cfg.dim), (cfg.dim, cfg.dim))
            params[f"mix{l}.b"] = rng.normal(0.0, 0.1, cfg.dim)
        return params

    def num_frames(self, n_samples: int) -> int:
        return n_samples // self.cfg.stride_product

    def forward_array(self, wav: Waveform) -> np.ndarray:
        """Float64 (L+1) x T x D stack; the float32 LayerStack is a storage view."""
        graph = self.forward_graph(ad.Tensor(wav.samples))
        return np.stack([h.data for h in graph])

    def forward_graph(self, samples: ad.Tensor) -> list:
        """Differentiable forward: list of (T, D) tensors for layers 0..L."""
        cfg = self.cfg
        if samples.data.size < cfg.stride_product:
            raise DataError(
                f"waveform of {samples.data.size} samples is shorter than the "
                f"{cfg.stride_product}-sample receptive field"
            )
        x = samples.reshape(-1, 1)
        for i, stride in enumerate(cfg.conv_strides):
            t = x.shape[0] // stride
            c = x.shape[1]
            x = x[: t * stride].reshape(t, stride * c)
            x = x @ self._p(f"conv{i}.w") + self._p(f"conv{i}.b")
        layers = [x]
        for l in range(1, cfg.n_layers + 1):
            z = (x @ self._p(f"mix{l}.w") + self._p(f"mix{l}.b")).tanh()
            x = _smooth(z, cfg.smoothing)
            layers.append(x)
        return layers

    def _p(self, name: str) -> ad.Tensor:
        p = self.params[name]
        return p if isinstance(p, ad.Tensor) else ad.Tensor(p)

    def as_tensors(self) -> dict:
        """Promote parameters to trainable tensors in place; returns them."""
        for name, p in list(self.params.items()):
            if not isinstance(p, ad.Tensor):
                self.params[name] = ad.Tensor(p, requires_grad=True)
            else:
                p.requires_grad = True
        return self.params

    def param_arrays(self) -> dict:
        return {
            name: (p.data if isinstance(p, ad.Tensor) else p).copy()
            for name, p in self.params.items()
        }


def _smooth(x: ad.Tensor, width: int) -> ad.Tensor:
    if width <= 1:
        return x
    return ad.time_patches(x, width, 1).sum(axis=1) * (1.0 / width)


def mock_forward(wav: Waveform, cfg: MockUpstreamConfig) -> LayerStack:
    """Run the seeded mock encoder on one waveform."""
    model = MockUpstream(cfg)
    return LayerStack(model.forward_array(wav), frame_rate_hz=cfg.frame_rate_hz)


# ---------------------------------------------------------------------------
# Planted speaker information (fixture for verifying weight learning)
# ---------------------------------------------------------------------------


def speaker_offset(speaker_id, dim: int) -> np.ndarray:
    """Fixed unit vector for a speaker id, from a seeded hash."""
    rng = child_rng(_PLANT_SALT, f"plant:{speaker_id}")
    v = rng.standard_normal(dim)
    return v / np.linalg.norm(v)


def plant_speaker_info(stack: LayerStack, speaker_id, layer_k: int, strength: float) -> LayerStack:
    """Add strength * unit_vector(speaker_id) to every frame of layer k only."""
    if not 0 <= layer_k <= stack.n_layers:
        raise DataError(f"layer index {layer_k} out of range 0..{stack.n_layers}")
    if strength < 0:
        raise DataError("plant strength must be >= 0")
    layers = stack.layers.astype(np.float64)
    layers[layer_k] += strength * speaker_offset(speaker_id, stack.dim)
    return LayerStack(layers, frame_rate_hz=stack.frame_rate_hz)


# ---------------------------------------------------------------------------
# Stack file format (SVHS)
# ---------------------------------------------------------------------------

_SVHS_MAGIC = b"SVHS"
_U32_MAX = 2**32 - 1


def save_stack(stack: LayerStack, path):
    n, t, d = stack.layers.shape
    if max(n, t, d) > _U32_MAX:
        raise FormatError("stack dimensions overflow the u32 header fields")
    header = _SVHS_MAGIC + struct.pack("<IIIIf", 1, n, t, d, stack.frame_rate_hz)
    Path(path).write_bytes(header + stack.layers.astype("<f4").tobytes())


def load_stack(path) -> LayerStack:
    raw = Path(path).read_bytes()
    if len(raw) < 24 or raw[:4] != _SVHS_MAGIC:
        raise FormatError(f"{path}: bad magic (not an SVHS stack file)")
    version, n, t, d = struct.unpack("<IIII", raw[4:20])
    (rate,) = struct.unpack("<f", raw[20:24])
    if version != 1:
        raise FormatError(f"{path}: unsupported SVHS version {version}")
    expected = n * t * d * 4
    payload = raw[24:]
    if len(payload) < expected:
        raise FormatError(f"{path}: truncated payload ({len(payload)} bytes, header claims {expected})")
    if len(payload) > expected:
        raise FormatError(f"{path}: payload size mismatch (trailing bytes)")
    data = np.frombuffer(payload, dtype="<f4").reshape(n, t, d)
    return LayerStack(data, frame_rate_hz=float(rate))


# ---------------------------------------------------------------------------
# Manifests
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ManifestRow:
    utt_id: str
    speaker_id: str
    path: str


@dataclass(frozen=True)
class Manifest:
    rows: tuple
    base_dir: Path = field(default_factory=Path)

    def __post_init__(self):
        ids = [r.utt_id for r in self.rows]
        if len(set(ids)) != len(ids):
            raise FormatError("manifest contains duplicate utterance ids")
        object.__setattr__(self, "rows", tuple(self.rows))
        object.__setattr__(self, "base_dir", Path(self.base_dir))

    def __len__(self):
        return len(self.rows)

    def resolve(self, row: ManifestRow) -> Path:
        p = Path(row.path)
        return p if p.is_absolute() else self.base_dir / p

    @property
    def speakers(self) -> list:
        return sorted({r.speaker_id for r in self.rows})

    def by_speaker(self) -> dict:
        out: dict = {}
        for r in self.rows:
            out.setdefault(r.speaker_id, []).append(r)
        return out


def load_manifest(path, check_paths: bool = False) -> Manifest:
    """Read a tab-separated manifest (utt_id, speaker_id, path per line).

    Relative paths resolve against the manifest's directory.
    """
    path = Path(path)
    if not path.is_file():
        raise FormatError(f"manifest not found: {path}")
    rows = []
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 3:
            raise FormatError(f"{path}:{lineno}: expected 3 tab-separated fields, got {len(parts)}")
        rows.append(ManifestRow(*parts))
    manifest = Manifest(tuple(rows), base_dir=path.parent)
    if check_paths:
        for r in manifest.rows:
            if not manifest.resolve(r).is_file():
                raise FormatError(f"manifest entry {r.utt_id}: file not found: {manifest.resolve(r)}")
    return manifest


def save_manifest(manifest: Manifest, path):
    lines = [f"{r.utt_id}\t{r.speaker_id}\t{r.path}" for r in manifest.rows]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")
