"""Seeded two-modality "phoneme world": aligned audio-like and lip-like streams.

Every phoneme has a canonical mouth shape ``(w, h, o, r)`` in ``[0, 1]^4``
and a fixed random audio signature. A sample is one 5-frame window in which
the mouth eases from the previous phoneme's shape to the current one. The
audio is built per frame from the same easing weights, so audio and lips
describe the same co-articulated transition. Each frame carries identity
channels (constant per speaker) and pose channels (a smooth random walk).

Frame layout: ``[w, h, o, r, identity (d_id), pose (d_pose)]``.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.stats import qmc

FORMAT_VERSION = 1
N_FRAMES = 5
MOUTH_DIM = 4
EASE = np.array([0.2, 0.5, 0.8, 0.95, 1.0])
REST = 0
REST_SHAPE = np.array([0.45, 0.08, 0.05, 0.3])
MIN_DISTANCE = 0.2
MAX_PHONEMES = 40

# fixed stream tags for derived seeds
_IDENTITY_STREAM = 101
_TIMBRE_STREAM = 102
_SPLIT_STREAM = 103


class ConfigurationError(ValueError):
    pass


@dataclass
class PhonemeInventory:
    canonical: np.ndarray          # (P, 4)
    audio_projection: np.ndarray   # (d_aud, P)
    seed: int

    @property
    def n_phonemes(self) -> int:
        return self.canonical.shape[0]

    @property
    def d_aud(self) -> int:
        return self.audio_projection.shape[0]

    def to_dict(self) -> dict:
        return {"seed": self.seed, "canonical": self.canonical.tolist(),
                "audio_projection": self.audio_projection.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "PhonemeInventory":
        return cls(np.asarray(d["canonical"], dtype=np.float64),
                   np.asarray(d["audio_projection"], dtype=np.float64), int(d["seed"]))


def build_inventory(n_phonemes: int, seed: int, d_aud: int = 24,
                    min_distance: float = MIN_DISTANCE) -> PhonemeInventory:
    """Canonical mouth shapes with pairwise distance >= ``min_distance``.

    Index 0 is the near-closed rest shape; the rest come from a scrambled
    Halton sequence with rejection.
    """
    if n_phonemes < 2:
        raise ConfigurationError("need at least 2 phonemes")
    if n_phonemes > MAX_PHONEMES:
        raise ConfigurationError(
            f"{n_phonemes} phonemes cannot be guaranteed at min distance {min_distance} "
            f"(cap is {MAX_PHONEMES})")
    sampler = qmc.Halton(d=MOUTH_DIM, scramble=True, seed=np.random.default_rng(seed))
    shapes = [REST_SHAPE.copy()]
    drawn = 0
    while len(shapes) < n_phonemes:
        if drawn > 20_000:
            raise ConfigurationError("rejection sampling exhausted")
        cand = sampler.random(1)[0]
        drawn += 1
        if min(np.linalg.norm(cand - s) for s in shapes) >= min_distance:
            shapes.append(cand)
    rng = np.random.default_rng([seed, n_phonemes])
    projection = rng.normal(0.0, 1.0, size=(d_aud, n_phonemes))
    return PhonemeInventory(np.array(shapes), projection, seed)


@dataclass(frozen=True)
class WorldConfig:
    n_phonemes: int = 8
    d_aud: int = 24
    d_id: int = 4
    d_pose: int = 4
    noise_scale: float = 0.05
    n_identities: int = 20
    n_utterances: int = 300
    utterance_len: int = 12
    timbre_scale: float = 0.3
    identity_scale: float = 0.5
    pose_scale: float = 0.3
    pose_step: float = 0.05

    @property
    def frame_dim(self) -> int:
        return MOUTH_DIM + self.d_id + self.d_pose


def identity_channels(inventory: PhonemeInventory, identity_id: int, d_id: int,
                      scale: float = 0.5) -> np.ndarray:
    rng = np.random.default_rng([inventory.seed, _IDENTITY_STREAM, identity_id])
    return rng.normal(0.0, scale, size=d_id)


def identity_timbre(inventory: PhonemeInventory, identity_id: int, scale: float = 0.3) -> np.ndarray:
    rng = np.random.default_rng([inventory.seed, _TIMBRE_STREAM, identity_id])
    return rng.normal(0.0, scale, size=inventory.d_aud)


@dataclass
class SyntheticSample:
    audio_input: np.ndarray       # (d_aud,) window mean of audio_frames
    audio_frames: np.ndarray      # (5, d_aud)
    lip_sequence: np.ndarray      # (5, F)
    reference_frame: np.ndarray   # (F,)
    pose_prior: np.ndarray        # (5, F), mouth channels zeroed
    phoneme_label: int
    prev_phoneme: int
    identity_id: int
    utterance_id: int = 0
    position: int = 0
    split: str = "train"


def synth_sample(inventory: PhonemeInventory, identity_id: int, phoneme: int, prev_phoneme: int,
                 noise_scale: float, seed: int, world: WorldConfig | None = None,
                 pose_start: np.ndarray | None = None) -> SyntheticSample:
    world = world or WorldConfig(n_phonemes=inventory.n_phonemes, d_aud=inventory.d_aud)
    P = inventory.n_phonemes
    if not (0 <= phoneme < P and 0 <= prev_phoneme < P):
        raise IndexError("phoneme index out of range")
    rng = np.random.default_rng(seed)

    w = EASE[:, None]
    mouth = (1.0 - w) * inventory.canonical[prev_phoneme] + w * inventory.canonical[phoneme]
    content = np.zeros((N_FRAMES, P))
    content[:, prev_phoneme] += 1.0 - EASE
    content[:, phoneme] += EASE
    timbre = identity_timbre(inventory, identity_id, world.timbre_scale)
    audio_frames = (content @ inventory.audio_projection.T + timbre
                    + noise_scale * rng.normal(size=(N_FRAMES, inventory.d_aud)))

    ident = identity_channels(inventory, identity_id, world.d_id, world.identity_scale)
    pose0 = rng.normal(0.0, world.pose_scale, world.d_pose) if pose_start is None else pose_start
    steps = rng.normal(0.0, world.pose_step, size=(N_FRAMES - 1, world.d_pose))
    pose = np.vstack([pose0, pose0 + np.cumsum(steps, axis=0)])
    frames = np.hstack([mouth, np.tile(ident, (N_FRAMES, 1)), pose])

    ref_mouth = inventory.canonical[rng.integers(P)]
    ref_pose = rng.normal(0.0, world.pose_scale, world.d_pose)
    reference = np.concatenate([ref_mouth, ident, ref_pose])
    pose_prior = frames.copy()
    pose_prior[:, :MOUTH_DIM] = 0.0

    return SyntheticSample(audio_frames.mean(axis=0), audio_frames, frames, reference, pose_prior,
                           int(phoneme), int(prev_phoneme), int(identity_id))


@dataclass
class Dataset:
    """Column-stacked samples plus the header needed to regenerate them."""

    inventory: PhonemeInventory
    world: WorldConfig
    seed: int
    audio: np.ndarray            # (N, d_aud)
    audio_frames: np.ndarray     # (N, 5, d_aud)
    lips: np.ndarray             # (N, 5, F)
    references: np.ndarray       # (N, F)
    pose_priors: np.ndarray      # (N, 5, F)
    labels: np.ndarray           # (N,)
    prev_labels: np.ndarray
    identities: np.ndarray
    utterances: np.ndarray
    positions: np.ndarray
    splits: np.ndarray           # (N,) of str
    meta: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.labels)

    @classmethod
    def from_samples(cls, inventory, world, seed, samples: list[SyntheticSample]) -> "Dataset":
        if not samples:
            raise ValueError("no samples")
        return cls(
            inventory, world, seed,
            np.array([s.audio_input for s in samples]),
            np.array([s.audio_frames for s in samples]),
            np.array([s.lip_sequence for s in samples]),
            np.array([s.reference_frame for s in samples]),
            np.array([s.pose_prior for s in samples]),
            np.array([s.phoneme_label for s in samples], dtype=np.int64),
            np.array([s.prev_phoneme for s in samples], dtype=np.int64),
            np.array([s.identity_id for s in samples], dtype=np.int64),
            np.array([s.utterance_id for s in samples], dtype=np.int64),
            np.array([s.position for s in samples], dtype=np.int64),
            np.array([s.split for s in samples]),
        )

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx)
        cols = {k: getattr(self, k)[idx] for k in _COLUMNS}
        return Dataset(self.inventory, self.world, self.seed, meta=dict(self.meta), **cols)

    def split(self, name: str) -> "Dataset":
        idx = np.flatnonzero(self.splits == name)
        if len(idx) == 0:
            raise ValueError(f"split {name!r} is empty")
        return self.subset(idx)

    def utterance_ids(self) -> list[int]:
        return sorted(set(int(u) for u in self.utterances))

    def utterance_indices(self, utterance_id: int) -> np.ndarray:
        idx = np.flatnonzero(self.utterances == utterance_id)
        if len(idx) == 0:
            raise KeyError(f"unknown utterance {utterance_id}")
        return idx[np.argsort(self.positions[idx], kind="stable")]

    def sample(self, i: int) -> SyntheticSample:
        return SyntheticSample(self.audio[i], self.audio_frames[i], self.lips[i], self.references[i],
                               self.pose_priors[i], int(self.labels[i]), int(self.prev_labels[i]),
                               int(self.identities[i]), int(self.utterances[i]),
                               int(self.positions[i]), str(self.splits[i]))


_COLUMNS = ("audio", "audio_frames", "lips", "references", "pose_priors", "labels", "prev_labels",
            "identities", "utterances", "positions", "splits")


def make_dataset(inventory: PhonemeInventory, n_identities: int, n_utterances: int,
                 utterance_len: int, noise_scale: float, seed: int,
                 world: WorldConfig | None = None, path: str | Path | None = None,
                 heldout_fraction: float = 0.1) -> Dataset:
    """Markov phoneme utterances cut into aligned windows, split by utterance.

    An utterance of length L starts at the rest phoneme and yields L - 1
    samples. Each utterance derives its own seed from ``(seed, utterance_id)``.
    """
    if n_identities < 1 or n_utterances < 1 or utterance_len < 2:
        raise ValueError("sizes must be positive (utterance_len >= 2)")
    world = world or WorldConfig(n_phonemes=inventory.n_phonemes, d_aud=inventory.d_aud)
    world = WorldConfig(**{**asdict(world), "n_phonemes": inventory.n_phonemes,
                           "d_aud": inventory.d_aud, "noise_scale": noise_scale,
                           "n_identities": n_identities, "n_utterances": n_utterances,
                           "utterance_len": utterance_len})
    P = inventory.n_phonemes
    n_held = int(round(heldout_fraction * n_utterances))
    perm = np.random.default_rng([seed, _SPLIT_STREAM]).permutation(n_utterances)
    heldout = set(int(u) for u in perm[:n_held])

    samples: list[SyntheticSample] = []
    for uid in range(n_utterances):
        rng = np.random.default_rng(np.random.SeedSequence([seed, uid]))
        identity = int(rng.integers(n_identities))
        seq = [REST]
        for _ in range(utterance_len - 1):
            nxt = int(rng.integers(P - 1))
            seq.append(nxt if nxt < seq[-1] else nxt + 1)
        pose = rng.normal(0.0, world.pose_scale, world.d_pose)
        for pos in range(1, utterance_len):
            s = synth_sample(inventory, identity, seq[pos], seq[pos - 1], noise_scale,
                             int(rng.integers(2**63)), world, pose_start=pose)
            pose = s.lip_sequence[-1, MOUTH_DIM + world.d_id:] + rng.normal(
                0.0, world.pose_step, world.d_pose)
            s.utterance_id, s.position = uid, pos
            s.split = "heldout" if uid in heldout else "train"
            samples.append(s)
    ds = Dataset.from_samples(inventory, world, seed, samples)
    if path is not None:
        save_dataset(ds, path)
    return ds


def save_dataset(ds: Dataset, path: str | Path) -> None:
    header = {"format_version": FORMAT_VERSION, "inventory": ds.inventory.to_dict(),
              "config": asdict(ds.world), "seed": ds.seed}
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps(header) + "\n")
        for i in range(len(ds)):
            s = ds.sample(i)
            rec = {
                "utterance_id": s.utterance_id, "position": s.position, "split": s.split,
                "identity_id": s.identity_id, "phoneme_label": s.phoneme_label,
                "prev_phoneme": s.prev_phoneme, "audio_input": s.audio_input.tolist(),
                "audio_frames": s.audio_frames.tolist(), "lip_sequence": s.lip_sequence.tolist(),
                "reference_frame": s.reference_frame.tolist(), "pose_prior": s.pose_prior.tolist(),
            }
            fh.write(json.dumps(rec) + "\n")


def load_dataset(path: str | Path) -> Dataset:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"dataset not found: {path}")
    with open(path, encoding="utf-8") as fh:
        try:
            header = json.loads(fh.readline())
        except json.JSONDecodeError as exc:
            raise ValueError(f"{path}: malformed dataset header") from exc
        if header.get("format_version") != FORMAT_VERSION:
            raise ValueError(f"{path}: unsupported dataset format {header.get('format_version')!r}")
        samples = []
        for line in fh:
            if not line.strip():
                continue
            r = json.loads(line)
            samples.append(SyntheticSample(
                np.asarray(r["audio_input"]), np.asarray(r["audio_frames"]),
                np.asarray(r["lip_sequence"]), np.asarray(r["reference_frame"]),
                np.asarray(r["pose_prior"]), r["phoneme_label"], r["prev_phoneme"],
                r["identity_id"], r["utterance_id"], r["position"], r["split"]))
    inv = PhonemeInventory.from_dict(header["inventory"])
    return Dataset.from_samples(inv, WorldConfig(**header["config"]), int(header["seed"]), samples)
