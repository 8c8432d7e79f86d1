import json

import numpy as np
import pytest
import torch

from bottlegan import checkpoint
from bottlegan.exceptions import ConfigError, InvalidInputError, TrainingDivergedError
from bottlegan.stain import rgb_to_od
from bottlegan.synth import FederationConfig, build_federation
from bottlegan.trainer import ModelConfig, TrainConfig, train_bottlegan

TINY_MODEL = ModelConfig(width=8, depth=3, n_adain=2, code_dim=4, disc_channels=(8, 8, 8))


@pytest.fixture(scope="module")
def data():
    cfg = FederationConfig(clients=2, label_budget=1, samples_per_client=2, test_per_client=1,
                           reference_size=2, image_size=24)
    fed = build_federation(cfg, 0)
    stained = [(rgb_to_od(im), c.style_id) for c in fed.clients for im in c.images]
    reference = [rgb_to_od(im) for im in fed.reference_images]
    return stained, reference


def tiny(steps=3, **kw):
    return TrainConfig(steps=steps, crop=16, n_stained=2, n_reference=1, log_every=1, **kw)


def test_zero_steps_returns_initialization(data):
    stained, reference = data
    result = train_bottlegan(stained, reference, tiny(0), TINY_MODEL)
    fresh = TINY_MODEL.build([0, 1], seed=0)
    assert result.history == []
    for (n, a), (_, b) in zip(result.bundle.state_dict().items(), fresh.state_dict().items()):
        assert torch.equal(a, b), n


def test_same_seed_bitwise_equal(data):
    stained, reference = data
    a = train_bottlegan(stained, reference, tiny(3), TINY_MODEL)
    b = train_bottlegan(stained, reference, tiny(3), TINY_MODEL)
    assert checkpoint.encode(checkpoint.bundle_tensors(a.bundle)) == checkpoint.encode(checkpoint.bundle_tensors(b.bundle))
    assert a.history == b.history
    c = train_bottlegan(stained, reference, tiny(3, seed=1), TINY_MODEL)
    assert checkpoint.encode(checkpoint.bundle_tensors(c.bundle)) != checkpoint.encode(checkpoint.bundle_tensors(a.bundle))


def test_discriminator_weights_clipped(data):
    stained, reference = data
    result = train_bottlegan(stained, reference, tiny(2, clip=0.005), TINY_MODEL)
    for p in result.bundle.discriminator_parameters():
        assert p.abs().max().item() <= 0.005


def test_parameter_groups_disjoint():
    bundle = TINY_MODEL.build([0], seed=0)
    gen = {id(p) for p in bundle.generator_parameters()}
    disc = {id(p) for p in bundle.discriminator_parameters()}
    assert not gen & disc
    assert gen | disc == {id(p) for p in bundle.parameters()}


def test_history_finite_and_metrics_stream(data, tmp_path):
    stained, reference = data
    path = tmp_path / "m.jsonl"
    result = train_bottlegan(stained, reference, tiny(3), TINY_MODEL, metrics_path=path)
    rows = [json.loads(line) for line in path.read_text().splitlines()]
    assert rows == result.history
    assert [r["step"] for r in rows] == [0, 1, 2]
    assert set(rows[0]) == {"step", "loss_disc", "loss_gen", "loss_adv", "loss_cyc", "loss_idt"}
    assert all(np.isfinite(v) for r in rows for v in r.values())


def test_divergence_carries_step(data):
    stained, reference = data
    bad = [(np.full_like(stained[0][0], np.nan), 0)]
    with pytest.raises(TrainingDivergedError) as info:
        train_bottlegan(bad, reference, tiny(2), TINY_MODEL)
    assert info.value.step == 0


def test_resume_from_bundle(data):
    stained, reference = data
    first = train_bottlegan(stained, reference, tiny(1), TINY_MODEL)
    before = {k: v.clone() for k, v in first.bundle.state_dict().items()}
    second = train_bottlegan(stained, reference, tiny(1), bundle=first.bundle)
    assert second.bundle is first.bundle
    assert any(not torch.equal(before[k], v) for k, v in second.bundle.state_dict().items())


def test_input_validation(data):
    stained, reference = data
    with pytest.raises(InvalidInputError):
        train_bottlegan([], reference, tiny(1), TINY_MODEL)
    with pytest.raises(InvalidInputError):
        train_bottlegan(stained, [], tiny(1), TINY_MODEL)
    with pytest.raises(ConfigError):
        train_bottlegan(stained, reference, TrainConfig(steps=-1))
    with pytest.raises(ConfigError):
        train_bottlegan(stained, reference, TrainConfig(clip=0.0))


@pytest.mark.slow
def test_single_style_cycle_loss_drops_tenfold():
    fed = build_federation(FederationConfig(clients=2, label_budget=2), 0)
    c = fed.clients[0]
    stained = [(rgb_to_od(im), 0) for im in c.images]
    reference = [rgb_to_od(im) for im in fed.reference_images]
    hist = train_bottlegan(stained, reference, TrainConfig(steps=2000, crop=32)).history
    first, last = hist[0]["loss_cyc"], hist[-1]["loss_cyc"]
    assert last < 0.1 * first, (first, last)
