import csv
import json
import math

import numpy as np
import pytest

from lipmem import models
from lipmem import synthworld as sw
from lipmem import training as tr
from lipmem.training import TrainConfig

SMALL = dict(n_slots=4, n_channels=8, hidden=12, sync_dim=6, batch_size=8, sync_steps=20,
             main_steps=12, eval_every=6, seed=5)


def small_config(**kw) -> TrainConfig:
    return TrainConfig(**{**SMALL, **kw})


def read_log(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


def test_config_defaults_and_validation():
    c = TrainConfig()
    assert (c.n_slots, c.n_channels, c.kappa, c.batch_size, c.lr, c.disc_lr) == (16, 32, 16.0, 32, 1e-4, 5e-4)
    assert (c.sync_steps, c.main_steps, c.seed) == (2000, 5000, 17)
    assert c.weights.recon == 10.0 and c.weights.align == 0.01
    for bad in (dict(lr=0), dict(main_steps=-1), dict(batch_size=0), dict(value_init="zeros")):
        with pytest.raises(ValueError):
            TrainConfig(**bad)


def test_config_from_mapping_parses_strings():
    c = TrainConfig.from_mapping({"n_slots": "8", "kappa": "4.5", "gan_standard_form": "true",
                                  "value_init": "gaussian", "unrelated": "x"})
    assert c.n_slots == 8 and c.kappa == 4.5 and c.gan_standard_form is True
    assert c.value_init == "gaussian"


def test_new_state_deterministic(small_dataset):
    a = tr.new_state(small_config(), small_dataset)
    b = tr.new_state(small_config(), small_dataset)
    c = tr.new_state(small_config(seed=6), small_dataset)
    assert tr.params_digest(a.gen) == tr.params_digest(b.gen) != tr.params_digest(c.gen)
    assert tr.params_digest(a.sync) == tr.params_digest(b.sync)


def test_data_dependent_init(small_dataset):
    st = tr.new_state(small_config(), small_dataset)
    train = small_dataset.split("train")
    bias = st.gen["decoder.b2"].value
    np.testing.assert_allclose(bias, train.lips.reshape(len(train), -1).mean(axis=0))
    np.testing.assert_allclose(np.linalg.norm(st.bank.M_aud.value, axis=1), 0.1)
    feats = models.lip_encode(st.nets, st.gen.frozen(), train.lips).value
    for row in st.bank.M_lip.value:
        assert np.abs(feats - row).max(axis=1).min() < 1e-12


def test_zero_steps_checkpoint_equals_init(tmp_path, small_dataset):
    cfg = small_config(sync_steps=0, main_steps=0)
    init = tr.new_state(cfg, small_dataset)
    st = tr.run(cfg, small_dataset, tmp_path)
    back = tr.load_checkpoint(tmp_path / "checkpoint.json")
    for store in ("gen", "sync", "disc"):
        assert tr.params_digest(getattr(back, store)) == tr.params_digest(getattr(init, store))
    assert st.main_done == 0 and read_log(tmp_path / "train_log.csv") == [list(tr.LOG_HEADER)]


def test_sync_pretraining_separates_clean_pairs(inventory):
    ds = sw.make_dataset(inventory, 4, 40, 8, 0.0, seed=1)
    st = tr.new_state(TrainConfig(sync_steps=300, seed=3), ds)
    train = ds.split("train")
    lips = train.lips.reshape(len(train), -1)
    neg = tr.mismatched_partners(train.labels)
    before = 0.5 * (tr.sync_bce(st.nets, st.sync.frozen(), train.audio, lips, 1.0).item()
                    + tr.sync_bce(st.nets, st.sync.frozen(), train.audio[neg], lips, 0.0).item())
    assert before == pytest.approx(math.log(2), rel=0.1)
    tr.pretrain_sync(st, ds)
    assert st.sync_done == 300
    sep = (tr.sync_pair_scores(st, train.audio, lips).mean()
           - tr.sync_pair_scores(st, train.audio[neg], lips).mean())
    assert sep >= 0.5


def test_sync_frozen_during_main_training(small_dataset):
    st = tr.new_state(small_config(), small_dataset)
    tr.pretrain_sync(st, small_dataset)
    digest = tr.params_digest(st.sync)
    tr.train_main(st, small_dataset)
    assert tr.params_digest(st.sync) == digest
    assert st.main_done == 12


def test_mismatched_partners_differ(small_dataset):
    p = tr.mismatched_partners(small_dataset.labels, seed=4)
    assert np.all(small_dataset.labels[p] != small_dataset.labels)


def test_csv_log_deterministic(tmp_path, small_dataset):
    tr.run(small_config(), small_dataset, tmp_path / "a")
    tr.run(small_config(), small_dataset, tmp_path / "b")
    a = (tmp_path / "a" / "train_log.csv").read_bytes()
    assert a == (tmp_path / "b" / "train_log.csv").read_bytes()
    rows = read_log(tmp_path / "a" / "train_log.csv")
    assert rows[0] == list(tr.LOG_HEADER) and len(rows) == 13
    assert [int(r[0]) for r in rows[1:]] == list(range(1, 13))
    # a rerun into the same directory replaces the log instead of appending
    tr.run(small_config(), small_dataset, tmp_path / "a")
    assert (tmp_path / "a" / "train_log.csv").read_bytes() == a


def test_checkpoint_round_trip(tmp_path, small_dataset):
    st = tr.new_state(small_config(), small_dataset)
    tr.pretrain_sync(st, small_dataset)
    tr.train_main(st, small_dataset, steps=3)
    tr.save_checkpoint(st, tmp_path / "c.json")
    back = tr.load_checkpoint(tmp_path / "c.json")
    assert json.dumps(back.to_dict()) == json.dumps(st.to_dict())
    for store in ("gen", "sync", "disc"):
        a, b = getattr(st, store), getattr(back, store)
        for k in a.params:
            assert a[k].value.tobytes() == b[k].value.tobytes()
        assert a.step == b.step


def test_checkpoint_rejections(tmp_path, small_dataset):
    st = tr.new_state(small_config(), small_dataset)
    d = st.to_dict()
    d["format_version"] = tr.CHECKPOINT_VERSION + 1
    path = tmp_path / "v.json"
    path.write_text(json.dumps(d))
    with pytest.raises(ValueError, match="version"):
        tr.load_checkpoint(path)
    path.write_text('{"format_version": 1, "config"')
    with pytest.raises(ValueError):
        tr.load_checkpoint(path)
    path.write_text('{"format_version": 1}')
    with pytest.raises(ValueError):
        tr.load_checkpoint(path)


def test_resume_reproduces_next_ten_losses(tmp_path, small_dataset):
    cfg = small_config(main_steps=20)
    full = tr.new_state(cfg, small_dataset)
    tr.pretrain_sync(full, small_dataset)
    rows_full = tr.train_main(full, small_dataset)

    half = tr.new_state(cfg, small_dataset)
    tr.pretrain_sync(half, small_dataset)
    tr.train_main(half, small_dataset, steps=10)
    tr.save_checkpoint(half, tmp_path / "half.json")
    resumed = tr.load_checkpoint(tmp_path / "half.json")
    rows_resumed = tr.train_main(resumed, small_dataset)
    assert len(rows_resumed) == 10
    assert [tr.format_row(r) for r in rows_resumed] == [tr.format_row(r) for r in rows_full[10:]]


def test_nan_aborts_with_diagnostic(small_dataset):
    st = tr.new_state(small_config(), small_dataset)
    st.gen["decoder.W0"].value[0, 0] = np.nan
    with pytest.raises(tr.TrainingDiverged) as exc:
        tr.train_step(st, small_dataset.split("train"))
    info = json.loads(str(exc.value))
    assert info["step"] == 1 and "recon" in info["non_finite"] and len(info["batch_indices"]) == 8


def test_history_has_step_zero_and_cadence(small_dataset):
    st = tr.new_state(small_config(), small_dataset)
    tr.pretrain_sync(st, small_dataset)
    tr.train_main(st, small_dataset)
    assert [h["step"] for h in st.history] == [0, 6, 12]


def test_toy_lmd_examples():
    gt = np.random.default_rng(0).uniform(size=(3, 5 * 12))
    assert tr.toy_lmd(gt, gt) == 0.0
    shifted = gt.reshape(3, 5, 12).copy()
    shifted[:, :, 0] += 3.0
    shifted[:, :, 1] += 4.0
    shifted[:, :, 6] += 100.0  # non-mouth channels are ignored
    assert tr.toy_lmd(shifted.reshape(3, -1), gt) == pytest.approx(5.0)


def test_slot_purity_examples():
    purity, majority = tr.slot_purity([0, 0, 1, 1, 1], [2, 2, 3, 3, 4])
    assert purity == pytest.approx(4 / 5) and majority == {0: 2, 1: 3}
    with pytest.raises(ValueError):
        tr.slot_purity([], [])


def test_random_assignment_purity_near_chance():
    rng = np.random.default_rng(0)
    labels = rng.integers(8, size=200_000)
    purity, _ = tr.slot_purity(rng.integers(16, size=200_000), labels)
    assert purity == pytest.approx(1 / 8, abs=0.01)


def test_evaluate_report(small_dataset):
    st = tr.new_state(small_config(), small_dataset)
    rep = tr.evaluate(st, small_dataset.split("heldout"))
    assert rep.n_samples == len(small_dataset.split("heldout"))
    assert rep.lmd_key >= 0 and math.isfinite(rep.lmd_key)
    assert 0 <= rep.purity <= 1 and rep.align_kl >= 0
    assert set(rep.loss_means) == set(tr.LOG_HEADER[1:])
    again = tr.evaluate(st, small_dataset.split("heldout"))
    assert json.dumps(rep.to_dict()) == json.dumps(again.to_dict())
    train_rep = tr.evaluate(st, small_dataset.split("train"))
    assert train_rep.lmd_key != rep.lmd_key
    with pytest.raises(ValueError):
        tr.evaluate(st, small_dataset.subset(np.array([], dtype=int)))
