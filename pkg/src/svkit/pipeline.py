"""End-to-end glue: run a trained system over a manifest to produce embeddings.

Shared by the CLI `embed` command and the verification suite so that both
exercise the exact same inference path.
"""

from __future__ import annotations

import numpy as np

from . import ecapa as ecapa_mod
from .aggregator import aggregate, normalized_weights
from .audio import read_wav
from .autodiff import Tensor
from .ecapa import EcapaConfig
from .errors import FormatError
from .training import PlantSpec, TrainResult
from .upstream import (
    LayerStack,
    Manifest,
    MockUpstream,
    MockUpstreamConfig,
    load_stack,
    plant_speaker_info,
)


class System:
    """A trained verification system: upstream + layer weights + embedding net."""

    def __init__(
        self,
        upstream_cfg: MockUpstreamConfig,
        ecapa_cfg: EcapaConfig,
        ecapa_params: dict,
        agg_logits: np.ndarray,
        upstream_params: dict | None = None,
        plant: PlantSpec | None = None,
    ):
        self.upstream_cfg = upstream_cfg
        self.ecapa_cfg = ecapa_cfg
        self.ecapa_params = {k: Tensor(np.asarray(v, dtype=np.float64)) for k, v in ecapa_params.items()}
        self.weights = normalized_weights(np.asarray(agg_logits, dtype=np.float64))
        self.plant = plant
        params = (
            {k: np.asarray(v, dtype=np.float64) for k, v in upstream_params.items()}
            if upstream_params
            else None
        )
        self.upstream = MockUpstream(upstream_cfg, params=params)

    @classmethod
    def from_result(cls, result: TrainResult, upstream_cfg, ecapa_cfg, plant=None) -> "System":
        return cls(
            upstream_cfg,
            ecapa_cfg,
            result.ecapa,
            result.agg_logits,
            upstream_params=result.upstream or None,
            plant=plant,
        )

    @classmethod
    def from_checkpoint(cls, tensors: dict, upstream_cfg, ecapa_cfg, plant=None) -> "System":
        ecapa_params = {k[len("ecapa.") :]: v for k, v in tensors.items() if k.startswith("ecapa.")}
        upstream_params = {k[len("upstream.") :]: v for k, v in tensors.items() if k.startswith("upstream.")}
        if "agg.logits" not in tensors or not ecapa_params:
            raise FormatError("checkpoint is missing aggregator logits or encoder tensors")
        expected = ecapa_mod.param_shapes(ecapa_cfg)
        found = {k: tuple(np.asarray(v).shape) for k, v in ecapa_params.items()}
        if found != {k: tuple(s) for k, s in expected.items()}:
            raise FormatError("checkpoint tensors do not match the configured encoder")
        return cls(
            upstream_cfg,
            ecapa_cfg,
            ecapa_params,
            tensors["agg.logits"],
            upstream_params=upstream_params or None,
            plant=plant,
        )

    def stack_for(self, manifest: Manifest, row) -> LayerStack:
        path = manifest.resolve(row)
        if path.suffix == ".svhs":
            stack = load_stack(path)
        else:
            wav = read_wav(path)
            stack = LayerStack(
                self.upstream.forward_array(wav), frame_rate_hz=self.upstream_cfg.frame_rate_hz
            )
        if self.plant is not None:
            stack = plant_speaker_info(stack, row.speaker_id, self.plant.layer, self.plant.strength)
        return stack

    def embed_row(self, manifest: Manifest, row) -> np.ndarray:
        feats = aggregate(self.stack_for(manifest, row), self.weights)
        return ecapa_mod.embed(feats.frames, self.ecapa_params, self.ecapa_cfg)


def extract_embeddings(system: System, manifest: Manifest) -> dict:
    """Embed every manifest row; returns {utt_id: embedding}."""
    return {row.utt_id: system.embed_row(manifest, row) for row in manifest.rows}


def utterance_durations(manifest: Manifest) -> dict:
    from .audio import read_wav_duration

    return {row.utt_id: read_wav_duration(manifest.resolve(row)) for row in manifest.rows}
