import csv
import os
from dataclasses import replace

import numpy as np
import pytest

import grounding_agent
from exceptions import LoadError, NumericError, ValidationError
from grounding_agent import (
    CHECKPOINT_FILE,
    COMPONENT_VARIANTS,
    REFINER_VARIANTS,
    VideoGroundingAgent,
    ablate,
    cosine_matrix,
)
from models import RunConfig, SynthSpec
from tools.data_io import generate_synthetic
from tools.metrics import REPORT_KEYS
from tools.numerics import grad_check
from tools.refiner import make_surrogate_block, save_frozen_block


@pytest.fixture
def agent(tiny_config):
    return VideoGroundingAgent(tiny_config)


def parameters_close(first, second, atol):
    state_a, state_b = first.model.state_dict(), second.model.state_dict()
    assert state_a.keys() == state_b.keys()
    return all(np.allclose(state_a[name], state_b[name], rtol=0, atol=atol) for name in state_a)


# ----- forward -----

def test_forward_shapes(agent, tiny_samples):
    sample = tiny_samples[0]
    result = agent.forward(sample, keep_taps=True)
    assert result.tl.offsets.shape == (sample.num_clips, 2)
    assert result.tl.fg_logits.shape == (sample.num_clips,)
    assert result.hd.saliency.shape == (sample.num_clips,)
    assert result.sentence.shape == (1, agent.config.d_model)
    assert result.boundary == sample.num_tokens
    assert set(result.taps) == {"projection", "aligner", "refiner"}


@pytest.mark.parametrize("changes", list(COMPONENT_VARIANTS.values()))
def test_every_component_variant_runs(tiny_config, tiny_samples, changes):
    agent = VideoGroundingAgent(replace(tiny_config, **changes))
    prediction = agent.predict(tiny_samples[0])
    assert 1 <= len(prediction.spans) <= tiny_config.top_k
    assert prediction.saliency.shape == (tiny_samples[0].num_clips,)
    assert (agent.aligner is not None) == changes["use_aligner"]
    assert (agent.refiner is not None) == changes["use_refiner"]


def test_feature_width_mismatch(agent, tiny_samples):
    wrong = replace(tiny_samples[0], video_features=np.ones((8, 7), dtype=np.float32))
    with pytest.raises(LoadError, match="video=7"):
        agent.evaluate([wrong])


def test_pipeline_gradients(tiny_config, tiny_samples):
    agent = VideoGroundingAgent(tiny_config)
    batch = tiny_samples[:2]
    error = grad_check(lambda: agent.batch_loss(batch).total, agent.model.parameters(), max_entries=3)
    assert error < 1e-4


# ----- frozen refiner -----

def test_training_keeps_the_frozen_block_fixed(agent, tiny_samples):
    block = agent.refiner.block
    before = {name: p.data.copy() for name, p in agent.model.named_parameters()}
    for _ in range(50):
        agent.train_step(tiny_samples[:4])
    assert agent.verify_frozen()
    for name, parameter in agent.model.named_parameters():
        if parameter.frozen:
            assert np.array_equal(parameter.data, before[name]), name
    for name in ("refiner.w_in", "refiner.w_out", "frontend.pool", "tl_head.reg_w"):
        assert not np.array_equal(dict(agent.model.named_parameters())[name].data, before[name])
    assert block.checksum() == block.recorded_checksum


def test_unfrozen_block_does_change(tiny_config, tiny_samples):
    agent = VideoGroundingAgent(replace(tiny_config, refiner_frozen=False))
    checksum = agent.refiner.block.checksum()
    for _ in range(3):
        agent.train_step(tiny_samples[:4])
    assert agent.refiner.block.checksum() != checksum
    assert not agent.verify_frozen()


def test_unfrozen_training_is_not_a_freeze_violation(tmp_path, tiny_config, tiny_samples):
    agent = VideoGroundingAgent(replace(tiny_config, refiner_frozen=False, epochs=1))
    summary = agent.train(tiny_samples, str(tmp_path), show_progress=False)
    assert summary["epochs"] == 1
    assert not agent.verify_frozen()


def test_pretrained_block_comes_from_file(tmp_path, tiny_config):
    block = make_surrogate_block(d_llm=16, seed=9, state_size=2)
    path = os.path.join(tmp_path, "block.mlvg")
    save_frozen_block(block, path)
    agent = VideoGroundingAgent(replace(tiny_config, frozen_block_path=path))
    assert agent.refiner.block.recorded_checksum == block.recorded_checksum
    with pytest.raises(LoadError, match="expected 32"):
        VideoGroundingAgent(replace(tiny_config, frozen_block_path=path, d_llm=32))


def test_random_init_differs_from_surrogate(tiny_config):
    pretrained = VideoGroundingAgent(tiny_config).refiner.block.checksum()
    random = VideoGroundingAgent(replace(tiny_config, refiner_init="random")).refiner.block.checksum()
    assert pretrained != random


# ----- training loop -----

def test_zero_epochs_writes_initial_checkpoint(tmp_path, tiny_config, tiny_samples):
    agent = VideoGroundingAgent(replace(tiny_config, epochs=0))
    summary = agent.train(tiny_samples, str(tmp_path), show_progress=False)
    assert summary["steps"] == 0 and summary["first_loss"] is None
    assert os.path.exists(os.path.join(tmp_path, CHECKPOINT_FILE))
    with open(os.path.join(tmp_path, "train_log.csv")) as stream:
        assert list(csv.reader(stream)) == [["step", "total", "l_f", "l_reg", "l_inter", "l_intra"]]


def test_train_logs_every_step(tmp_path, agent, tiny_samples):
    summary = agent.train(tiny_samples, str(tmp_path), show_progress=False)
    assert summary["epochs"] == 1
    assert summary["steps"] == 2
    with open(os.path.join(tmp_path, "train_log.csv")) as stream:
        rows = list(csv.DictReader(stream))
    assert [int(row["step"]) for row in rows] == [1, 2]
    assert all(np.isfinite(float(row["total"])) for row in rows)


def test_training_needs_samples(tmp_path, agent):
    with pytest.raises(ValidationError):
        agent.train([], str(tmp_path))


def test_checkpoint_round_trip(tmp_path, agent, tiny_samples):
    agent.train(tiny_samples, str(tmp_path), show_progress=False)
    restored = VideoGroundingAgent.load_checkpoint(os.path.join(tmp_path, CHECKPOINT_FILE))
    assert restored.config == agent.config
    assert (restored.epoch, restored.step) == (1, 2)
    assert parameters_close(agent, restored, atol=0)
    for name, moment in agent.optimizer.first_moment.items():
        assert np.array_equal(restored.optimizer.first_moment[name], moment)
    assert restored.optimizer.step_count == agent.optimizer.step_count
    assert restored.refiner.block.recorded_checksum == agent.refiner.block.recorded_checksum
    first, second = agent.predict(tiny_samples[0]), restored.predict(tiny_samples[0])
    assert first.spans == second.spans


def test_resume_matches_uninterrupted_run(tmp_path, tiny_config, tiny_samples):
    config = replace(tiny_config, epochs=2, dropout=0.1)
    straight = VideoGroundingAgent(config)
    straight.train(tiny_samples, os.path.join(tmp_path, "straight"), show_progress=False)

    interrupted_dir = os.path.join(tmp_path, "interrupted")
    VideoGroundingAgent(replace(config, epochs=1)).train(tiny_samples, interrupted_dir, show_progress=False)
    resumed = VideoGroundingAgent.load_checkpoint(os.path.join(interrupted_dir, CHECKPOINT_FILE), {"epochs": 2})
    resumed.train(tiny_samples, interrupted_dir, resume=True, show_progress=False)

    assert resumed.step == straight.step == 4
    assert parameters_close(straight, resumed, atol=1e-9)
    with open(os.path.join(interrupted_dir, "train_log.csv")) as stream:
        assert len(list(csv.DictReader(stream))) == 4


def test_non_finite_loss_keeps_last_checkpoint(tmp_path, monkeypatch, tiny_config, tiny_samples):
    original = grounding_agent.batch_total_loss
    calls = []

    def poisoned(*args, **kwargs):
        loss = original(*args, **kwargs)
        calls.append(1)
        return replace(loss, total=loss.total * float("nan")) if len(calls) > 2 else loss

    monkeypatch.setattr(grounding_agent, "batch_total_loss", poisoned)
    agent = VideoGroundingAgent(replace(tiny_config, epochs=3))
    with pytest.raises(NumericError, match=r"\(step 2\)"):
        agent.train(tiny_samples, str(tmp_path), show_progress=False)
    kept = VideoGroundingAgent.load_checkpoint(os.path.join(tmp_path, CHECKPOINT_FILE))
    assert (kept.epoch, kept.step) == (1, 2)


def test_missing_or_foreign_checkpoint(tmp_path):
    with pytest.raises(LoadError, match="not found"):
        VideoGroundingAgent.load_checkpoint(os.path.join(tmp_path, "absent.mlvg"))
    path = os.path.join(tmp_path, "block.mlvg")
    save_frozen_block(make_surrogate_block(d_llm=4, state_size=2), path)
    with pytest.raises(LoadError, match="not a training checkpoint"):
        VideoGroundingAgent.load_checkpoint(path)


# ----- evaluation and inspection -----

def test_evaluate_reports_every_metric(agent, tiny_samples):
    metrics, predictions = agent.evaluate(tiny_samples)
    assert tuple(metrics) == REPORT_KEYS
    assert all(0.0 <= value <= 1.0 for value in metrics.values())
    assert [p.sample_id for p in predictions] == [s.sample_id for s in tiny_samples]


def test_cosine_matrix_cases():
    rows = np.array([[1.0, 0.0], [0.0, 2.0], [0.0, 0.0]])
    columns = np.array([[3.0, 0.0], [1.0, 1.0]])
    np.testing.assert_allclose(
        cosine_matrix(rows, columns),
        [[1.0, 2 ** -0.5], [0.0, 2 ** -0.5], [0.0, 0.0]],
        atol=1e-12,
    )


def test_inspect_matches_direct_cosines(agent, tiny_samples):
    sample = tiny_samples[1]
    matrices = agent.inspect(sample)
    assert set(matrices) == {"projection", "aligner", "refiner"}
    for matrix in matrices.values():
        assert matrix.shape == (sample.num_tokens, sample.num_clips)
        assert np.all(np.abs(matrix) <= 1.0 + 1e-12)

    _, V, Q = agent.frontend(sample.video_features, sample.query_features)
    normalized_q = Q.data / np.linalg.norm(Q.data, axis=1, keepdims=True)
    normalized_v = V.data / np.linalg.norm(V.data, axis=1, keepdims=True)
    np.testing.assert_allclose(matrices["projection"], normalized_q @ normalized_v.T, atol=1e-12)


# ----- ablation -----

def test_ablation_covers_every_variant(tmp_path, tiny_config, tiny_samples):
    base = replace(tiny_config, epochs=0)
    components = ablate(base, tiny_samples, [0, 1], str(tmp_path), study="components")
    assert set(components) == set(COMPONENT_VARIANTS)
    assert all(tuple(report) == REPORT_KEYS for report in components.values())
    assert os.path.exists(os.path.join(tmp_path, "full", "seed1", CHECKPOINT_FILE))
    refiner = ablate(base, tiny_samples, [0], str(tmp_path / "refiner"), study="refiner")
    assert set(refiner) == set(REFINER_VARIANTS)


def test_ablation_arguments(tmp_path, tiny_config, tiny_samples):
    with pytest.raises(ValidationError):
        ablate(tiny_config, tiny_samples, [0], str(tmp_path), study="heads")
    with pytest.raises(ValidationError):
        ablate(tiny_config, tiny_samples, [], str(tmp_path))


# ----- end to end -----

def overfit_config(**changes):
    values = {"epochs": 200, "batch_size": 32, "learning_rate": 5e-3, "dropout": 0.0, "seed": 0}
    values.update(changes)
    return RunConfig(**values)


@pytest.mark.slow
def test_pipeline_overfits_the_synthetic_set(tmp_path):
    samples = generate_synthetic(SynthSpec(n_samples=32, signal_strength=1.0, seed=7))
    agent = VideoGroundingAgent(overfit_config())
    agent.train(samples, str(tmp_path), show_progress=False)
    metrics, _ = agent.evaluate(samples)
    assert metrics["r1@0.7"] >= 0.9
    assert metrics["hit@1"] >= 0.9


@pytest.mark.slow
def test_full_pipeline_beats_bare_heads(tmp_path):
    samples = generate_synthetic(SynthSpec(n_samples=32, signal_strength=1.0, seed=7))
    results = ablate(overfit_config(epochs=200), samples, [0, 1, 2], str(tmp_path))
    full, aligner_only, neither = (results[name]["r1@0.7"] for name in ("full", "aligner_only", "neither"))
    assert full >= aligner_only >= neither
