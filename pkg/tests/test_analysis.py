import math
import xml.etree.ElementTree as ET

import numpy as np
import pytest

from lipmem import analysis as an
from lipmem import models
from lipmem.memory import recall
from lipmem.training import TrainConfig, new_state, pretrain_sync, train_main

CFG = TrainConfig(n_slots=6, n_channels=8, hidden=12, sync_dim=6, batch_size=8, sync_steps=20,
                  main_steps=20, eval_every=0, seed=2)


@pytest.fixture(scope="module")
def state(small_dataset):
    st = new_state(CFG, small_dataset)
    pretrain_sync(st, small_dataset)
    train_main(st, small_dataset)
    return st


@pytest.fixture(scope="module")
def ctx(state, small_dataset):
    return an.rest_context(state, small_dataset)


def test_rest_context_uses_silent_audio(state, small_dataset, ctx):
    assert ctx.f_aud.shape == ctx.f_I.shape == (1, 8)
    held = small_dataset.split("heldout").sample(0)
    f_I = models.identity_encode(state.nets, state.gen.frozen(), held.reference_frame.reshape(1, -1),
                                 held.pose_prior.reshape(1, -1)).value
    np.testing.assert_array_equal(ctx.f_I, f_I)


def test_one_hot_decode_feeds_slot_vector(state, ctx):
    k = 3
    direct = models.decode(state.nets, state.gen.frozen(), state.bank.M_lip.value[k:k + 1],
                           ctx.f_aud, ctx.f_I).value[0]
    np.testing.assert_array_equal(recall(state.bank, np.eye(6)[k]).value, state.bank.M_lip.value[k])
    np.testing.assert_array_equal(an.decode_address(state, ctx, np.eye(6)[k]), direct)


def test_slot_profiles(state, small_dataset):
    prof = an.slot_profiles(state, small_dataset)
    assert [p.slot for p in prof] == list(range(6))
    assert sum(p.usage for p in prof) == pytest.approx(1.0, abs=1e-12)
    assert all(0.0 <= p.purity <= 1.0 for p in prof)
    assert all((p.majority == -1) == (p.usage == 0) for p in prof)
    assert all(p.mouth.shape == (4,) for p in prof)
    assert an.covered_phonemes(prof) <= set(range(8))


def test_utterance_windows_stride_one(small_dataset):
    audio, frames, labels, first = an.utterance_windows(small_dataset, 0)
    idx = small_dataset.utterance_indices(0)
    n_frames = 5 * len(idx)
    assert len(frames) == len(audio) == len(labels) == n_frames - 4
    # window 0 is the first sample's own window; window 5 the second's
    np.testing.assert_array_equal(frames[0], small_dataset.lips[idx[0]])
    np.testing.assert_array_equal(frames[5], small_dataset.lips[idx[1]])
    np.testing.assert_allclose(audio[0], small_dataset.audio[idx[0]])
    np.testing.assert_array_equal(frames[1][:4], small_dataset.lips[idx[0]][1:])
    assert labels[0] == small_dataset.labels[idx[0]] and labels[1] == small_dataset.labels[idx[1]]
    assert first == idx[0]


def test_trace_rows(state, small_dataset):
    trace = an.trace_utterance(state, small_dataset, 0)
    assert len(trace) == 5 * len(small_dataset.utterance_indices(0)) - 4
    for row in trace:
        assert abs(row.address.sum() - 1.0) <= 1e-9 and an.is_valid_address(row.address)
    with pytest.raises(KeyError):
        an.trace_utterance(state, small_dataset, 999)


def test_trace_smoothness_statistic():
    def rows(addrs):
        return [an.TraceRow(i, np.asarray(a, float), np.zeros(4), 0) for i, a in enumerate(addrs)]
    smooth = rows([[1, 0], [0.9, 0.1], [0.8, 0.2], [0.2, 0.8], [0.1, 0.9], [0, 1]])
    cons, rand = an.trace_smoothness([smooth], n_pairs=5000)
    assert cons == pytest.approx(0.2)
    assert cons < rand
    with pytest.raises(ValueError):
        an.trace_smoothness([rows([[1, 0]])])


def test_total_variation_examples():
    assert an.total_variation([1, 0], [0, 1]) == 1.0
    assert an.total_variation([0.5, 0.5], [0.5, 0.5]) == 0.0


def test_interpolation_endpoints_exact(state, ctx):
    it = an.interpolate_slots(state, ctx, 1, 4, steps=7)
    np.testing.assert_array_equal(it.t, np.linspace(0, 1, 7))
    assert it.windows[0].tobytes() == an.decode_address(state, ctx, np.eye(6)[1]).tobytes()
    assert it.windows[-1].tobytes() == an.decode_address(state, ctx, np.eye(6)[4]).tobytes()
    assert it.mouths.shape == (7, 5, 4)
    assert it.max_step() <= it.endpoint_distance() + 1e-12


def test_interpolation_errors(state, ctx):
    with pytest.raises(IndexError):
        an.interpolate_slots(state, ctx, 0, 6)
    with pytest.raises(IndexError):
        an.interpolate_slots(state, ctx, -1, 2)
    with pytest.raises(ValueError):
        an.interpolate_slots(state, ctx, 0, 1, steps=1)


def test_interior_optimum():
    rows = [{"lmd_key": v} for v in (3.0, 1.0, 2.0)]
    assert an.interior_optimum(rows)
    assert not an.interior_optimum([{"lmd_key": v} for v in (1.0, 2.0, 3.0)])


def test_ablation_rejects_short_list(small_dataset):
    with pytest.raises(ValueError):
        an.ablate_slots(CFG, small_dataset, [4, 8])


def test_ablation_rows(small_dataset):
    cfg = TrainConfig(**{**CFG.__dict__, "sync_steps": 5, "main_steps": 5})
    rows = an.ablate_slots(cfg, small_dataset, [2, 3, 4], workers=1)
    assert [r["n_slots"] for r in rows] == [2, 3, 4]
    assert all(math.isfinite(r[k]) for r in rows for k in an.ABLATION_FIELDS)


def _svg_ok(path):
    root = ET.parse(path).getroot()
    assert root.tag.endswith("svg")
    return root


def test_figure_writers_emit_svg_and_csv_twins(tmp_path, state, small_dataset, ctx):
    prof = an.slot_profiles(state, small_dataset)
    an.write_slot_figure(tmp_path, prof)
    rows = an.read_csv(tmp_path / "slot_decode.csv")
    assert len(rows) == 6 and float(rows[2]["w"]) == float(prof[2].mouth[0])
    assert len(_svg_ok(tmp_path / "slot_decode.svg").findall("{*}ellipse")) == 6

    trace = an.trace_utterance(state, small_dataset, 0)
    an.write_trace_figure(tmp_path, trace)
    rows = an.read_csv(tmp_path / "trace.csv")
    assert len(rows) == len(trace)
    assert float(rows[0]["a0"]) == float(trace[0].address[0])
    assert len(_svg_ok(tmp_path / "trace.svg").findall("{*}rect")) == 1 + len(trace) * 6

    it = an.interpolate_slots(state, ctx, 0, 5, steps=4)
    an.write_interpolation_figure(tmp_path, it)
    rows = an.read_csv(tmp_path / "interpolate.csv")
    assert [float(r["t"]) for r in rows] == list(it.t)
    assert float(rows[3]["w4"]) == float(it.mouths[3, 4, 0])
    _svg_ok(tmp_path / "interpolate.svg")

    table = [{"n_slots": s, **{k: float(s) for k in an.ABLATION_FIELDS[1:]}} for s in (4, 8, 16)]
    an.write_ablation_table(tmp_path, table)
    assert len(an.read_csv(tmp_path / "ablation.csv")) == 3
    _svg_ok(tmp_path / "ablation.svg")


def test_mouth_ellipse_clips_negative_parameters():
    el = ET.fromstring(an.mouth_ellipse(10, 10, [-0.5, 0.2, -1.0, 0.3]))
    assert float(el.get("rx")) > 0 and float(el.get("ry")) > 0
