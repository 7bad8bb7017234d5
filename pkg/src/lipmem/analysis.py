"""Memory analyses on a trained state: slot decoding, address traces,
slot interpolation and the slot-count ablation.

Every figure is written twice: an SVG for inspection and a CSV holding the
exact plotted numbers. Checks run on the numbers, never on the picture.
"""
from __future__ import annotations

import csv
import json
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import models
from .memory import is_valid_address, key_address, recall
from .synthworld import MOUTH_DIM, N_FRAMES, REST, Dataset, synth_sample
from .training import Batch, TrainConfig, TrainState, evaluate, infer_key, run

MOUTH_NAMES = ("w", "h", "o", "r")


# -- shared decoding context -----------------------------------------------------------

@dataclass
class DecodeContext:
    """Identity and audio inputs held fixed while the lip slot is varied."""

    f_aud: np.ndarray      # (1, C) audio feature of the silent (rest) window
    f_I: np.ndarray        # (1, C) identity feature
    reference_index: int


def rest_context(state: TrainState, dataset: Dataset, split: str = "heldout",
                 index: int = 0) -> DecodeContext:
    """Silent-audio context built from one sample's identity and pose."""
    part = dataset.split(split)
    s = part.sample(index)
    rest = synth_sample(dataset.inventory, s.identity_id, REST, REST, 0.0, seed=0, world=dataset.world)
    gp = state.gen.frozen()
    f_aud = models.audio_encode(state.nets, gp, rest.audio_input).value
    f_I = models.identity_encode(state.nets, gp, s.reference_frame.reshape(1, -1),
                                 s.pose_prior.reshape(1, -1)).value
    return DecodeContext(f_aud, f_I, index)


def decode_address(state: TrainState, ctx: DecodeContext, address) -> np.ndarray:
    """Decode a window from an explicit value-memory address; returns (5*F,)."""
    address = np.asarray(address, dtype=np.float64)
    lip = recall(state.bank, address).value.reshape(1, -1)
    out = models.decode(state.nets, state.gen.frozen(), lip, ctx.f_aud, ctx.f_I)
    return out.value[0]


def window_mouth(window: np.ndarray, frame_dim: int) -> np.ndarray:
    """(5*F,) window -> (5, 4) mouth parameters."""
    return np.asarray(window).reshape(N_FRAMES, frame_dim)[:, :MOUTH_DIM]


def key_slots(state: TrainState, split: Dataset) -> np.ndarray:
    """Argmax key-address slot for every sample of a split."""
    gp = state.gen.frozen()
    f_aud = models.audio_encode(state.nets, gp, split.audio)
    return key_address(state.bank, f_aud).value.argmax(axis=1)


# -- slot decode -----------------------------------------------------------------------

@dataclass
class SlotProfile:
    slot: int
    mouth: np.ndarray       # (4,) final-frame mouth parameters of the one-hot decode
    window: np.ndarray      # (5*F,) full decoded window
    usage: float
    majority: int           # -1 when the slot is never selected
    purity: float


def slot_profiles(state: TrainState, dataset: Dataset, split: str = "heldout") -> list[SlotProfile]:
    part = dataset.split(split)
    ctx = rest_context(state, dataset, split)
    slots = key_slots(state, part)
    S, F = state.config.n_slots, dataset.world.frame_dim
    out = []
    for k in range(S):
        window = decode_address(state, ctx, np.eye(S)[k])
        mask = slots == k
        if mask.any():
            vals, counts = np.unique(part.labels[mask], return_counts=True)
            majority, purity = int(vals[np.argmax(counts)]), float(counts.max() / mask.sum())
        else:
            majority, purity = -1, 0.0
        out.append(SlotProfile(k, window_mouth(window, F)[-1], window, float(mask.mean()),
                               majority, purity))
    return out


def covered_phonemes(profiles: Sequence[SlotProfile]) -> set[int]:
    return {p.majority for p in profiles if p.majority >= 0}


# -- address trace ---------------------------------------------------------------------

@dataclass
class TraceRow:
    window: int
    address: np.ndarray
    mouth: np.ndarray       # (4,) final-frame decoded mouth parameters
    label: int


def utterance_windows(dataset: Dataset, utterance_id: int):
    """Stride-1 windows over an utterance's concatenated frame stream.

    Returns (audio (W, d_aud), frames (W, 5, F), labels (W,), sample index).
    The label of a window is the phoneme of the sample owning its last frame.
    """
    idx = dataset.utterance_indices(utterance_id)
    frames = dataset.lips[idx].reshape(-1, dataset.world.frame_dim)
    audio = dataset.audio_frames[idx].reshape(-1, dataset.inventory.d_aud)
    owner = np.repeat(dataset.labels[idx], N_FRAMES)
    n = len(frames) - N_FRAMES + 1
    win_frames = np.stack([frames[t:t + N_FRAMES] for t in range(n)])
    win_audio = np.stack([audio[t:t + N_FRAMES].mean(axis=0) for t in range(n)])
    return win_audio, win_frames, owner[N_FRAMES - 1:], idx[0]


def trace_utterance(state: TrainState, dataset: Dataset, utterance_id: int) -> list[TraceRow]:
    audio, frames, labels, first = utterance_windows(dataset, utterance_id)
    n, F = len(frames), dataset.world.frame_dim
    prior = frames.copy()
    prior[:, :, :MOUTH_DIM] = 0.0
    batch = Batch(audio, frames.reshape(n, -1), np.tile(dataset.references[first], (n, 1)),
                  prior.reshape(n, -1))
    out, addr = infer_key(state, batch)
    return [TraceRow(t, addr[t], window_mouth(out[t], F)[-1], int(labels[t])) for t in range(n)]


def total_variation(p, q) -> np.ndarray:
    return 0.5 * np.abs(np.asarray(p) - np.asarray(q)).sum(axis=-1)


def trace_smoothness(traces: Sequence[Sequence[TraceRow]], n_pairs: int = 2000,
                     seed: int = 0) -> tuple[float, float]:
    """(mean TV of consecutive addresses, mean TV of random window pairs).

    Consecutive pairs never cross an utterance boundary; random pairs are drawn
    from the pooled windows of all given traces.
    """
    consecutive = [total_variation(tr[t].address, tr[t + 1].address)
                   for tr in traces for t in range(len(tr) - 1)]
    if not consecutive:
        raise ValueError("traces need at least two windows")
    pooled = np.array([row.address for tr in traces for row in tr])
    rng = np.random.default_rng(seed)
    i = rng.integers(len(pooled), size=n_pairs)
    j = rng.integers(len(pooled), size=n_pairs)
    return float(np.mean(consecutive)), float(total_variation(pooled[i], pooled[j]).mean())


# -- interpolation ---------------------------------------------------------------------

@dataclass
class Interpolation:
    t: np.ndarray           # (steps,)
    windows: np.ndarray     # (steps, 5*F)
    mouths: np.ndarray      # (steps, 5, 4)

    def max_step(self) -> float:
        flat = self.mouths.reshape(len(self.t), -1)
        return float(np.linalg.norm(np.diff(flat, axis=0), axis=1).max())

    def endpoint_distance(self) -> float:
        return float(np.linalg.norm(self.mouths[-1] - self.mouths[0]))

    def continuous(self, factor: float = 0.5) -> bool:
        return self.max_step() <= factor * self.endpoint_distance()


def interpolate_slots(state: TrainState, ctx: DecodeContext, slot_i: int, slot_j: int,
                      steps: int = 11, frame_dim: int | None = None) -> Interpolation:
    S = state.config.n_slots
    for k in (slot_i, slot_j):
        if not 0 <= k < S:
            raise IndexError(f"slot {k} out of range [0, {S})")
    if steps < 2:
        raise ValueError("steps must be >= 2")
    F = frame_dim or state.nets.frame_dim
    eye = np.eye(S)
    t = np.linspace(0.0, 1.0, steps)
    windows = np.stack([decode_address(state, ctx, (1.0 - s) * eye[slot_i] + s * eye[slot_j])
                        for s in t])
    return Interpolation(t, windows, np.stack([window_mouth(w, F) for w in windows]))


# -- ablation --------------------------------------------------------------------------

def _ablation_cell(args) -> dict:
    config, dataset, n_slots = args
    state = run(replace(config, n_slots=n_slots), dataset)
    rep = evaluate(state, dataset.split("heldout"))
    return {"n_slots": n_slots, **asdict(rep)}


def ablate_slots(config: TrainConfig, dataset: Dataset, slot_list: Sequence[int] = (4, 8, 16, 32),
                 workers: int | None = None) -> list[dict]:
    """Train and evaluate one independent cell per slot count, shared seed."""
    slot_list = [int(s) for s in slot_list]
    if len(slot_list) < 3:
        raise ValueError("ablation needs at least 3 slot counts")
    cells = [(config, dataset, s) for s in slot_list]
    workers = min(len(cells), workers or os.cpu_count() or 1)
    if workers <= 1:
        return [_ablation_cell(c) for c in cells]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(_ablation_cell, cells))


def interior_optimum(rows: Sequence[dict], key: str = "lmd_key") -> bool:
    """True when the best (lowest) value sits strictly inside the slot list."""
    best = int(np.argmin([r[key] for r in rows]))
    return 0 < best < len(rows) - 1


ABLATION_FIELDS = ("n_slots", "lmd_key", "lmd_direct", "align_kl", "purity", "sync_separation",
                   "sync_score", "sync_mismatch")


# -- writers ---------------------------------------------------------------------------

def _fmt(x) -> str:
    return repr(float(x)) if isinstance(x, (float, np.floating)) else str(x)


def write_csv(path: str | Path, header: Sequence[str], rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(v) for v in row])


def read_csv(path: str | Path) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


def _svg(width: float, height: float, body: list[str]) -> str:
    return "\n".join([
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width:.0f}" height="{height:.0f}" '
        f'viewBox="0 0 {width:.0f} {height:.0f}">',
        f'<rect width="{width:.0f}" height="{height:.0f}" fill="white"/>',
        *body, "</svg>", ""])


def mouth_ellipse(cx: float, cy: float, mouth, cell: float = 60.0) -> str:
    """Horizontal axis from w, vertical axis from h*o, stroke width from r."""
    w, h, o, r = np.clip(np.asarray(mouth, dtype=float), 0.0, None)
    rx = max(0.45 * cell * min(w, 1.0), 0.5)
    ry = max(0.45 * cell * min(h * o, 1.0), 0.5)
    sw = 0.5 + 4.0 * min(r, 1.0)
    return (f'<ellipse cx="{cx:.2f}" cy="{cy:.2f}" rx="{rx:.2f}" ry="{ry:.2f}" '
            f'fill="#d88" stroke="#622" stroke-width="{sw:.2f}"/>')


def _label(x: float, y: float, text: str) -> str:
    return f'<text x="{x:.1f}" y="{y:.1f}" font-size="10" font-family="monospace">{text}</text>'


def write_slot_figure(out_dir: str | Path, profiles: Sequence[SlotProfile], cols: int = 8) -> None:
    out = Path(out_dir)
    cell = 60.0
    rows = -(-len(profiles) // cols)
    body = []
    for p in profiles:
        r, c = divmod(p.slot, cols)
        body.append(mouth_ellipse(c * cell + cell / 2, r * (cell + 14) + cell / 2, p.mouth, cell))
        body.append(_label(c * cell + 4, r * (cell + 14) + cell + 10, f"s{p.slot}:p{p.majority}"))
    (out / "slot_decode.svg").write_text(_svg(cols * cell, rows * (cell + 14), body), encoding="utf-8")
    write_csv(out / "slot_decode.csv", ("slot", *MOUTH_NAMES, "usage", "majority", "purity"),
              ([p.slot, *p.mouth, p.usage, p.majority, p.purity] for p in profiles))


def write_trace_figure(out_dir: str | Path, trace: Sequence[TraceRow]) -> None:
    out = Path(out_dir)
    A = np.array([row.address for row in trace])
    n, S = A.shape
    cw, ch = 12.0, 12.0
    body = []
    for t in range(n):
        for k in range(S):
            g = int(round(255 * (1.0 - A[t, k])))
            body.append(f'<rect x="{t * cw:.1f}" y="{k * ch:.1f}" width="{cw:.1f}" height="{ch:.1f}" '
                        f'fill="rgb({g},{g},255)"/>')
    (out / "trace.svg").write_text(_svg(n * cw, S * ch, body), encoding="utf-8")
    header = ("window", "label", *MOUTH_NAMES, *(f"a{k}" for k in range(S)))
    write_csv(out / "trace.csv", header,
              ([row.window, row.label, *row.mouth, *row.address] for row in trace))


def write_interpolation_figure(out_dir: str | Path, interp: Interpolation) -> None:
    out = Path(out_dir)
    cell = 60.0
    final = interp.mouths[:, -1]
    body = [mouth_ellipse(i * cell + cell / 2, cell / 2, m, cell) for i, m in enumerate(final)]
    body += [_label(i * cell + 4, cell + 10, f"t={t:.2f}") for i, t in enumerate(interp.t)]
    (out / "interpolate.svg").write_text(_svg(len(final) * cell, cell + 14, body), encoding="utf-8")
    header = ("t", *(f"{n}{f}" for f in range(N_FRAMES) for n in MOUTH_NAMES))
    write_csv(out / "interpolate.csv", header,
              ([t, *m.reshape(-1)] for t, m in zip(interp.t, interp.mouths)))


def write_ablation_table(out_dir: str | Path, rows: Sequence[dict]) -> None:
    out = Path(out_dir)
    write_csv(out / "ablation.csv", ABLATION_FIELDS, ([r[k] for k in ABLATION_FIELDS] for r in rows))
    # bar chart of the key-recall LMD per slot count
    vals = np.array([r["lmd_key"] for r in rows])
    top = float(vals.max()) or 1.0
    bw, hmax = 50.0, 150.0
    body = []
    for i, (r, v) in enumerate(zip(rows, vals)):
        h = hmax * v / top
        body.append(f'<rect x="{i * bw + 5:.1f}" y="{hmax - h + 5:.1f}" width="{bw - 10:.1f}" '
                    f'height="{h:.1f}" fill="#68a"/>')
        body.append(_label(i * bw + 8, hmax + 18, f"S={r['n_slots']}"))
    (out / "ablation.svg").write_text(_svg(len(rows) * bw, hmax + 24, body), encoding="utf-8")
    (out / "ablation.json").write_text(json.dumps(list(rows), indent=2), encoding="utf-8")


__all__ = [
    "DecodeContext", "SlotProfile", "TraceRow", "Interpolation", "rest_context", "decode_address",
    "slot_profiles", "covered_phonemes", "utterance_windows", "trace_utterance", "trace_smoothness",
    "interpolate_slots", "ablate_slots", "interior_optimum", "write_slot_figure", "write_trace_figure",
    "write_interpolation_figure", "write_ablation_table", "write_csv", "read_csv", "is_valid_address",
    "total_variation", "window_mouth", "key_slots",
]
