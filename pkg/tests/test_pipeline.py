"""System assembly and embedding-extraction path tests."""

import numpy as np
import pytest

from svkit.ecapa import EcapaConfig, save_checkpoint
from svkit.errors import FormatError
from svkit.pipeline import System, extract_embeddings, utterance_durations
from svkit.synthcorpus import SynthSpec, synth_corpus
from svkit.training import PlantSpec, TrainSchedule, train
from svkit.upstream import MockUpstreamConfig

UP = MockUpstreamConfig(n_layers=3, dim=12, seed=2)
EC = EcapaConfig(in_dim=12, channels=16, res2_scale=8, dilations=(2, 3, 4),
                 se_bottleneck=8, attention_channels=8, embed_dim=12)


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    out = tmp_path_factory.mktemp("pipe_corpus")
    corpus = synth_corpus(SynthSpec(4, 4, 1, seed=6), out)
    sched = TrainSchedule(stage1_epochs=1, stage2_epochs=0, lmft_epochs=0,
                          crop_seconds=1.0, batch_size=8, lr_stage1=1e-3)
    result = train(corpus.train, sched, upstream_cfg=UP, ecapa_cfg=EC,
                   plant=PlantSpec(layer=1, strength=2.0), seed=3)
    return corpus, result


def test_checkpoint_and_result_paths_agree(trained, tmp_path):
    corpus, result = trained
    plant = PlantSpec(layer=1, strength=2.0)
    direct = System.from_result(result, UP, EC, plant=plant)
    path = tmp_path / "ck.svck"
    save_checkpoint(result.checkpoint_tensors(), path)
    from svkit.ecapa import load_checkpoint

    restored = System.from_checkpoint(load_checkpoint(path), UP, EC, plant=plant)
    a = extract_embeddings(direct, corpus.heldout)
    b = extract_embeddings(restored, corpus.heldout)
    assert set(a) == set(b)
    for k in a:
        # checkpoint stores float32; agreement is at storage precision
        np.testing.assert_allclose(a[k], b[k], rtol=1e-4, atol=1e-5)


def test_from_checkpoint_rejects_mismatched_config(trained, tmp_path):
    _, result = trained
    path = tmp_path / "ck.svck"
    save_checkpoint(result.checkpoint_tensors(), path)
    from svkit.ecapa import load_checkpoint

    wrong = EcapaConfig(in_dim=12, channels=32, res2_scale=8, dilations=(2, 3, 4),
                        se_bottleneck=8, attention_channels=8, embed_dim=12)
    with pytest.raises(FormatError, match="do not match"):
        System.from_checkpoint(load_checkpoint(path), UP, wrong)


def test_embeddings_deterministic(trained):
    corpus, result = trained
    system = System.from_result(result, UP, EC, plant=PlantSpec(layer=1, strength=2.0))
    a = extract_embeddings(system, corpus.heldout)
    b = extract_embeddings(system, corpus.heldout)
    for k in a:
        np.testing.assert_array_equal(a[k], b[k])


def test_durations(trained):
    corpus, _ = trained
    durations = utterance_durations(corpus.heldout)
    assert all(abs(d - 1.0) < 1e-9 for d in durations.values())
