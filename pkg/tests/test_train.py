import hashlib
import itertools

import numpy as np
import pytest

from egean.data import dataset_from_world
from egean.model import EgeanModel, ModelConfig
from egean.synthetic import WorldSpec, generate_world, sample_observations
from egean.train import (MetricsReport, NumericAbort, TrainConfig, UndefinedMetricError, auc, config_hash,
                         evaluate, export_embeddings, finetune_multitask, pretrain_exposure, read_embeddings,
                         train)

FAST = dict(pretrain_epochs=2, epochs=2, batch_size=128, probe_size=256)


@pytest.fixture(scope="module")
def world_data():
    w = generate_world(WorldSpec(n_pairs=800, seed=1, n_users=40, n_items=40))
    obs = sample_observations(w, 1)
    return w, obs, dataset_from_world(w, obs)


def brute_auc(scores, labels):
    pos = scores[labels == 1]
    neg = scores[labels == 0]
    total = sum(1.0 if a > b else 0.5 if a == b else 0.0 for a, b in itertools.product(pos, neg))
    return total / (len(pos) * len(neg))


def test_auc_examples():
    assert auc([0.9, 0.1], [1, 0]) == 1.0
    assert auc([0.3] * 5, [1, 0, 1, 0, 0]) == 0.5
    rng = np.random.default_rng(0)
    s = np.round(rng.random(200), 2)  # rounding forces ties
    y = (rng.random(200) < 0.4).astype(int)
    assert auc(s, y) == pytest.approx(brute_auc(s, y), abs=1e-12)
    with pytest.raises(UndefinedMetricError):
        auc([0.1, 0.2], [1, 1])


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(lam=1.5)
    with pytest.raises(ValueError):
        TrainConfig(alpha_mmd=-0.1)
    with pytest.raises(ValueError):
        TrainConfig(cvr_estimator="ips")
    d = TrainConfig()
    assert (d.batch_size, d.lr, d.weight_decay) == (1024, 1e-3, 1e-3)
    assert config_hash(d) == config_hash(TrainConfig())
    assert config_hash(d) != config_hash(TrainConfig(seed=1))


def test_pretrain_loss_decreases_and_freezes(world_data):
    _, _, ds = world_data
    m = EgeanModel(ds.schema, ModelConfig(seed=0))
    rep = pretrain_exposure(m, ds, TrainConfig(pretrain_epochs=5, batch_size=128, lr=5e-3))
    assert len(rep.pretrain_losses) == 5
    assert all(b < a for a, b in zip(rep.pretrain_losses, rep.pretrain_losses[1:]))
    assert m.embedding.frozen


def test_pretrain_skipped_without_exposure_network(world_data):
    _, _, ds = world_data
    m = EgeanModel(ds.schema, ModelConfig(exposure_network_on=False))
    before = m.embedding.W.data.copy()
    rep = pretrain_exposure(m, ds, TrainConfig(**FAST))
    assert rep.pretrain_losses == []
    np.testing.assert_array_equal(m.embedding.W.data, before)


def test_finetune_keeps_pretrained_table_bit_identical(world_data):
    _, obs, ds = world_data
    m = EgeanModel(ds.schema)
    cfg = TrainConfig(**FAST)
    pretrain_exposure(m, ds, cfg)
    digest = hashlib.sha256(m.embedding.W.data.tobytes()).hexdigest()
    lora_before = m.tasks["cvr"].lora.B.data.copy()
    rep = finetune_multitask(m, ds, cfg, obs.r)
    assert hashlib.sha256(m.embedding.W.data.tobytes()).hexdigest() == digest
    assert not np.array_equal(lora_before, m.tasks["cvr"].lora.B.data)
    assert len(rep.epoch_losses) == len(rep.steady_state_trace) == len(rep.mmd_trace) == cfg.epochs + 1
    assert 0 <= rep.cvr_auc <= 1 and 0 <= rep.ctcvr_auc <= 1
    assert rep.cvr_auc_space == "full"
    assert rep.config_hash == config_hash(m.config, cfg)


def test_training_is_deterministic(world_data):
    _, obs, ds = world_data

    def run():
        m = EgeanModel(ds.schema, ModelConfig(seed=2))
        return train(m, ds, TrainConfig(seed=2, **FAST), obs.r).to_json()

    assert run() == run()


def test_total_loss_decreases(world_data):
    _, obs, ds = world_data
    m = EgeanModel(ds.schema, ModelConfig(seed=0))
    rep = train(m, ds, TrainConfig(pretrain_epochs=2, epochs=10, batch_size=128, lr=3e-3, probe_size=256),
                obs.r)
    assert rep.epoch_losses[-1]["total"] < rep.epoch_losses[0]["total"]


def test_mmd_weight_zero_matches_ml_off(world_data):
    _, obs, ds = world_data
    a = finetune_multitask(EgeanModel(ds.schema, ModelConfig(metric_learning_on=False)), ds,
                           TrainConfig(**FAST), obs.r)
    b = finetune_multitask(EgeanModel(ds.schema), ds, TrainConfig(alpha_mmd=0.0, **FAST), obs.r)
    assert [r["total"] for r in a.epoch_losses] == [r["total"] for r in b.epoch_losses]
    assert a.cvr_auc == b.cvr_auc


def test_numeric_abort_carries_diagnostics(world_data):
    _, obs, ds = world_data
    m = EgeanModel(ds.schema)
    m.tasks["ctr"].tower.head.W.data[:] = np.nan
    with pytest.raises(NumericAbort) as err:
        finetune_multitask(m, ds, TrainConfig(**FAST), obs.r)
    assert err.value.diagnostics["phase"] == "ctr"
    assert "clamp_events" in err.value.diagnostics


def test_evaluate_oracle_reference_and_null_band():
    w = generate_world(WorldSpec(n_pairs=10_000, seed=4))
    obs = sample_observations(w, 4)
    ds = dataset_from_world(w, obs)

    class Oracle:
        def predict(self, codes):
            return {"cvr_prob": w.q, "ctcvr_prob": w.q * w.p}

    rep = evaluate(Oracle(), ds, obs.r)
    assert rep.cvr_auc == pytest.approx(auc(w.q, obs.r), abs=1e-15)
    untrained = evaluate(EgeanModel(ds.schema, ModelConfig(seed=9)), ds, obs.r)
    assert abs(untrained.cvr_auc - 0.5) < 0.05
    click_only = evaluate(Oracle(), ds)
    assert click_only.cvr_auc_space == "click"


def test_report_files(world_data, tmp_path):
    _, obs, ds = world_data
    m = EgeanModel(ds.schema)
    rep = train(m, ds, TrainConfig(**FAST), obs.r)
    rep.save(tmp_path / "m.json")
    rep.save_traces(tmp_path / "t.csv")
    assert (tmp_path / "m.json").read_text() == rep.to_json()
    lines = (tmp_path / "t.csv").read_text().splitlines()
    assert len(lines) == FAST["epochs"] + 2
    assert isinstance(MetricsReport().to_json(), str)


def test_export_round_trip(world_data, tmp_path):
    _, obs, ds = world_data
    m = EgeanModel(ds.schema)
    paths = export_embeddings(m, ds, tmp_path / "emb")
    pred = m.predict(ds.codes)
    for path, key in zip(paths, ("shared_embeddings", "cvr_embeddings")):
        ids, clicks, values = read_embeddings(path)
        assert len(ids) == len(ds)
        np.testing.assert_array_equal(clicks, ds.click)
        np.testing.assert_allclose(values, pred[key], rtol=0, atol=1e-9)
