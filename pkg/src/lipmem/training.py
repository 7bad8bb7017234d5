"""Two-phase training (sync pretraining, then the main generator/critic loop),
evaluation, and lossless checkpoints."""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any

import numpy as np

from . import losses, models
from .losses import GeneratedPair, LossWeights
from .memory import MemoryBank, MemoryConfig, align_loss, key_address, recall, store_loss, value_address
from .numerics import ad
from .numerics.autodiff import EPS
from .numerics.optim import ParamStore, adam_step
from .synthworld import MOUTH_DIM, N_FRAMES, Dataset

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1
LOG_HEADER = ("step", "recon", "av_sync", "vv_sync", "gan", "disc", "store", "align", "total")


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    n_slots: int = 16
    n_channels: int = 32
    kappa: float = 16.0
    hidden: int = 64
    sync_dim: int = 32
    lambda_recon: float = 10.0
    lambda_av: float = 0.01
    lambda_vv: float = 0.01
    lambda_gan: float = 0.01
    lambda_store: float = 0.01
    lambda_align: float = 0.01
    lr: float = 1e-4
    disc_lr: float = 5e-4
    sync_lr: float = 1e-3
    batch_size: int = 32
    sync_steps: int = 2000
    main_steps: int = 5000
    seed: int = 17
    eval_every: int = 250
    checkpoint_every: int = 0
    key_init_norm: float = 0.1
    value_init: str = "data"
    gan_standard_form: bool = False
    align_grad_both: bool = False

    def __post_init__(self):
        if self.lr <= 0 or self.disc_lr <= 0 or self.sync_lr <= 0:
            raise ValueError("learning rates must be positive")
        if self.sync_steps < 0 or self.main_steps < 0:
            raise ValueError("step counts must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be positive")
        if self.value_init not in ("data", "gaussian"):
            raise ValueError("value_init must be 'data' or 'gaussian'")
        if self.key_init_norm <= 0:
            raise ValueError("key_init_norm must be positive")

    @property
    def weights(self) -> LossWeights:
        return LossWeights(self.lambda_recon, self.lambda_av, self.lambda_vv, self.lambda_gan,
                           self.lambda_store, self.lambda_align)

    @property
    def memory(self) -> MemoryConfig:
        return MemoryConfig(self.n_slots, self.n_channels, self.kappa)

    @property
    def model(self) -> models.ModelConfig:
        return models.ModelConfig(self.n_channels, self.hidden, self.sync_dim)

    @classmethod
    def from_mapping(cls, values: dict[str, Any]) -> "TrainConfig":
        """Build from string or typed values, ignoring unknown keys."""
        kwargs = {}
        for f in fields(cls):
            if f.name not in values:
                continue
            raw = values[f.name]
            if f.type in ("bool", bool) and isinstance(raw, str):
                kwargs[f.name] = raw.strip().lower() in ("1", "true", "yes", "on")
            elif f.type in ("int", int):
                kwargs[f.name] = int(raw)
            elif f.type in ("float", float):
                kwargs[f.name] = float(raw)
            else:
                kwargs[f.name] = raw
        return cls(**kwargs)


class TrainState:
    """Everything a run owns: networks, memory, optimizer moments, RNG streams, history."""

    def __init__(self, config: TrainConfig, d_aud: int, frame_dim: int):
        self.config = config
        self.nets = models.Networks(d_aud, frame_dim, config.model)
        root = np.random.SeedSequence(config.seed)
        init_seq, sync_seq, main_seq = root.spawn(3)
        init_rng = np.random.default_rng(init_seq)
        self.gen = ParamStore()
        self.nets.init_generator(self.gen, init_rng)
        self.bank = MemoryBank(config.memory, self.gen, init_rng, key_norm=config.key_init_norm)
        self.sync = ParamStore()
        self.nets.init_sync(self.sync, init_rng)
        self.disc = ParamStore()
        self.nets.init_disc(self.disc, init_rng)
        self.sync_rng = np.random.default_rng(sync_seq)
        self.rng = np.random.default_rng(main_seq)
        self.sync_done = 0
        self.history: list[dict] = []

    @property
    def main_done(self) -> int:
        return self.gen.step

    # -- persistence ---------------------------------------------------------------

    def to_dict(self) -> dict:
        return {
            "format_version": CHECKPOINT_VERSION,
            "config": asdict(self.config),
            "dims": {"d_aud": self.nets.d_aud, "frame_dim": self.nets.frame_dim},
            "stores": {"gen": self.gen.state_dict(), "sync": self.sync.state_dict(),
                       "disc": self.disc.state_dict()},
            "rng": {"main": self.rng.bit_generator.state, "sync": self.sync_rng.bit_generator.state},
            "sync_done": self.sync_done,
            "history": self.history,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TrainState":
        if d.get("format_version") != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {d.get('format_version')!r}")
        state = cls(TrainConfig(**d["config"]), d["dims"]["d_aud"], d["dims"]["frame_dim"])
        state.gen.load_state_dict(d["stores"]["gen"])
        state.sync.load_state_dict(d["stores"]["sync"])
        state.disc.load_state_dict(d["stores"]["disc"])
        state.rng.bit_generator.state = d["rng"]["main"]
        state.sync_rng.bit_generator.state = d["rng"]["sync"]
        state.sync_done = int(d["sync_done"])
        state.history = list(d["history"])
        return state


def new_state(config: TrainConfig, dataset: Dataset) -> TrainState:
    """Fresh state with the data-dependent parts of the initialization applied.

    The decoder's output bias starts at the mean training window, and with
    ``value_init="data"`` each value slot starts at the initial lip feature of
    a distinct random training sample.
    """
    state = TrainState(config, dataset.inventory.d_aud, dataset.world.frame_dim)
    train = dataset.split("train")
    out_bias = f"decoder.b{len(state.nets.decoder.widths) - 2}"
    state.gen[out_bias].value[...] = train.lips.reshape(len(train), -1).mean(axis=0)
    if config.value_init == "data":
        if len(train) < config.n_slots:
            raise ValueError("value_init='data' needs at least n_slots training samples")
        rng = np.random.default_rng([config.seed, 7])
        idx = rng.choice(len(train), config.n_slots, replace=False)
        state.bank.seed_values(models.lip_encode(state.nets, state.gen.frozen(), train.lips[idx]).value)
    return state


def save_checkpoint(state: TrainState, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(state.to_dict(), fh)


def load_checkpoint(path: str | Path) -> TrainState:
    try:
        with open(path, encoding="utf-8") as fh:
            data = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ValueError(f"{path}: corrupted checkpoint") from exc
    try:
        return TrainState.from_dict(data)
    except (KeyError, TypeError) as exc:
        raise ValueError(f"{path}: corrupted checkpoint ({exc})") from exc


def params_digest(store: ParamStore) -> str:
    h = hashlib.sha256()
    for name in sorted(store.params):
        h.update(name.encode())
        h.update(np.ascontiguousarray(store[name].value).tobytes())
    return h.hexdigest()


# -- sync pretraining -------------------------------------------------------------------

def _negative_partners(labels: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """For each position, another position in the array with a different phoneme."""
    n = len(labels)
    out = np.empty(n, dtype=np.int64)
    for i in range(n):
        j = int(rng.integers(n))
        while labels[j] == labels[i]:
            j = int(rng.integers(n))
        out[i] = j
    return out


def sync_bce(nets, params, audio, frames, label: float) -> ad.Node:
    f_a, f_v = models.sync_embed(nets, params, audio, frames)
    p = losses.sync_probability(f_a, f_v)
    return -ad.mean(ad.log(p) if label == 1.0 else ad.log(1.0 - p))


def pretrain_sync(state: TrainState, dataset: Dataset, steps: int | None = None) -> ParamStore:
    """Train F_a / F_v on clean aligned (label 1) and mismatched (label 0) pairs."""
    cfg = state.config
    train = dataset.split("train")
    steps = max(cfg.sync_steps - state.sync_done, 0) if steps is None else steps
    if len(set(train.labels.tolist())) < 2:
        raise ValueError("sync pretraining needs at least two phonemes in the train split")
    for _ in range(steps):
        idx = state.sync_rng.integers(len(train), size=cfg.batch_size)
        neg = np.empty_like(idx)
        for k, i in enumerate(idx):
            j = int(state.sync_rng.integers(len(train)))
            while train.labels[j] == train.labels[i]:
                j = int(state.sync_rng.integers(len(train)))
            neg[k] = j
        audio = train.audio[idx]
        loss = (sync_bce(state.nets, state.sync.params, audio, train.lips[idx], 1.0)
                + sync_bce(state.nets, state.sync.params, audio, train.lips[neg], 0.0))
        ad.backward(loss)
        adam_step(state.sync, cfg.sync_lr)
        state.sync.zero_grad()
        state.sync_done += 1
    return state.sync


def sync_pair_scores(state: TrainState, audio, frames) -> np.ndarray:
    f_a, f_v = models.sync_embed(state.nets, state.sync.frozen(), audio, frames)
    return losses.d_sync(f_a, f_v).value


# -- main phase ------------------------------------------------------------------------

@dataclass
class Batch:
    audio: np.ndarray
    lips: np.ndarray        # (B, 5*F)
    references: np.ndarray
    pose_priors: np.ndarray  # (B, 5*F)

    @classmethod
    def from_dataset(cls, ds: Dataset, idx=None) -> "Batch":
        idx = np.arange(len(ds)) if idx is None else idx
        n = len(idx)
        return cls(ds.audio[idx], ds.lips[idx].reshape(n, -1), ds.references[idx],
                   ds.pose_priors[idx].reshape(n, -1))


@dataclass
class Forward:
    f_aud: ad.Node
    f_lip: ad.Node
    f_I: ad.Node
    a_lip: ad.Node
    a_aud: ad.Node
    gen: GeneratedPair
    components: dict = field(default_factory=dict)


def forward(state: TrainState, batch: Batch, gen_params=None) -> Forward:
    """Full training-time forward pass with every loss component attached."""
    cfg, nets, bank = state.config, state.nets, state.bank
    gp = state.gen.params if gen_params is None else gen_params
    f_aud = models.audio_encode(nets, gp, batch.audio)
    f_lip = models.lip_encode(nets, gp, batch.lips)
    f_I = models.identity_encode(nets, gp, batch.references, batch.pose_priors)
    a_lip = value_address(bank, f_lip)
    a_aud = key_address(bank, f_aud)
    rec_key = recall(bank, a_aud)
    gen = GeneratedPair(models.decode(nets, gp, rec_key, f_aud, f_I),
                        models.decode(nets, gp, f_lip, f_aud, f_I))
    disc_frozen = state.disc.frozen()
    lip_frozen = state.gen.frozen()
    # the lip encoder is frozen for the visual sync term in both of its roles:
    # as the feature extractor and as the source of the direct branch's input
    gen_vv = GeneratedPair(gen.key, models.decode(nets, gp, ad.detach(f_lip), f_aud, f_I))
    comps = {
        "recon": losses.recon_loss(gen, batch.lips),
        "av_sync": losses.av_sync_loss(nets, state.sync.frozen(), batch.audio, gen),
        "vv_sync": losses.vv_sync_loss(nets, lip_frozen, gen_vv, batch.lips),
        "gan": losses.gan_generator_loss([models.discriminate(nets, disc_frozen, x) for x in gen.both()],
                                         cfg.gan_standard_form),
        "store": store_loss(bank, f_lip),
        "align": align_loss(bank, f_lip, f_aud, cfg.align_grad_both, a_lip=a_lip, a_aud=a_aud),
    }
    return Forward(f_aud, f_lip, f_I, a_lip, a_aud, gen, comps)


def discriminator_loss(state: TrainState, real, generated) -> ad.Node:
    nets, dp = state.nets, state.disc.params
    d_real = models.discriminate(nets, dp, real)
    d_fake = [models.discriminate(nets, dp, ad.detach(x)) for x in generated]
    return losses.gan_discriminator_loss(d_real, d_fake, state.config.gan_standard_form)


def train_step(state: TrainState, train: Dataset) -> dict[str, float]:
    cfg = state.config
    idx = state.rng.integers(len(train), size=cfg.batch_size)
    batch = Batch.from_dataset(train, idx)
    fw = forward(state, batch)
    total = losses.total_loss(cfg.weights, fw.components)
    disc = discriminator_loss(state, batch.lips, fw.gen.both())
    row = {k: float(v.value) for k, v in fw.components.items()}
    row["disc"] = float(disc.value)
    row["total"] = float(total.value)
    bad = [k for k, v in row.items() if not math.isfinite(v)]
    if bad:
        raise TrainingDiverged(json.dumps({"step": state.gen.step + 1, "non_finite": bad,
                                           "batch_indices": idx.tolist(), "values": repr(row)}))
    ad.backward(total)
    adam_step(state.gen, cfg.lr)
    state.gen.zero_grad()
    ad.backward(disc)
    adam_step(state.disc, cfg.disc_lr)
    state.disc.zero_grad()
    row["step"] = state.gen.step
    return row


def format_row(row: dict) -> list[str]:
    return [str(row["step"])] + [repr(float(row[k])) for k in LOG_HEADER[1:]]


def train_main(state: TrainState, dataset: Dataset, steps: int | None = None,
               log_path: str | Path | None = None, eval_split: str = "heldout",
               checkpoint_path: str | Path | None = None) -> list[dict]:
    """Run ``steps`` main-phase updates (default: the remainder of ``main_steps``).

    Appends one CSV row per step to ``log_path`` and records an evaluation on
    ``eval_split`` at step 0 and every ``eval_every`` steps.
    """
    cfg = state.config
    train = dataset.split("train")
    try:
        evalset = dataset.split(eval_split)
    except ValueError:
        evalset = None
    steps = max(cfg.main_steps - state.main_done, 0) if steps is None else steps
    rows = []
    fh = writer = None
    if log_path is not None:
        new = not Path(log_path).exists() or Path(log_path).stat().st_size == 0
        fh = open(log_path, "a", encoding="utf-8", newline="")
        writer = csv.writer(fh, lineterminator="\n")
        if new:
            writer.writerow(LOG_HEADER)
    try:
        if evalset is not None and state.main_done == 0 and not state.history:
            state.history.append(evaluate(state, evalset).to_dict())
        for _ in range(steps):
            row = train_step(state, train)
            rows.append(row)
            if writer:
                writer.writerow(format_row(row))
            step = state.main_done
            if evalset is not None and cfg.eval_every and step % cfg.eval_every == 0:
                rep = evaluate(state, evalset)
                state.history.append(rep.to_dict())
                log.info("step %d: align_kl=%.4f lmd_key=%.4f purity=%.3f", step,
                         rep.align_kl, rep.lmd_key, rep.purity)
            if checkpoint_path and cfg.checkpoint_every and step % cfg.checkpoint_every == 0:
                save_checkpoint(state, checkpoint_path)
    finally:
        if fh:
            fh.close()
    return rows


# -- evaluation --------------------------------------------------------------------------

@dataclass
class EvalReport:
    step: int
    n_samples: int
    align_kl: float
    lmd_key: float
    lmd_direct: float
    sync_score: float
    sync_mismatch: float
    sync_separation: float
    purity: float
    loss_means: dict
    slot_majority: dict

    def to_dict(self) -> dict:
        return asdict(self)


def toy_lmd(pred, gt) -> float:
    """Mean per-frame L2 distance between mouth parameters of two window batches."""
    pred = np.asarray(pred).reshape(len(pred), N_FRAMES, -1)[:, :, :MOUTH_DIM]
    gt = np.asarray(gt).reshape(len(gt), N_FRAMES, -1)[:, :, :MOUTH_DIM]
    return float(np.linalg.norm(pred - gt, axis=-1).mean())


def slot_purity(slots: np.ndarray, labels: np.ndarray) -> tuple[float, dict[int, int]]:
    """Usage-weighted majority-label fraction over slots, and each used slot's majority."""
    slots, labels = np.asarray(slots), np.asarray(labels)
    if len(slots) == 0:
        raise ValueError("empty assignment")
    majority, hits = {}, 0
    for s in np.unique(slots):
        lab = labels[slots == s]
        vals, counts = np.unique(lab, return_counts=True)
        majority[int(s)] = int(vals[np.argmax(counts)])
        hits += int(counts.max())
    return hits / len(slots), majority


def mismatched_partners(labels: np.ndarray, seed: int = 0) -> np.ndarray:
    return _negative_partners(np.asarray(labels), np.random.default_rng(seed))


def infer_key(state: TrainState, batch: Batch) -> tuple[np.ndarray, np.ndarray]:
    """Inference path: lip feature comes only from the key-address recall."""
    gp = state.gen.frozen()
    nets, bank = state.nets, state.bank
    f_aud = models.audio_encode(nets, gp, batch.audio)
    f_I = models.identity_encode(nets, gp, batch.references, batch.pose_priors)
    a_aud = key_address(bank, f_aud)
    out = models.decode(nets, gp, recall(bank, a_aud), f_aud, f_I)
    return out.value, a_aud.value


def evaluate(state: TrainState, split: Dataset) -> EvalReport:
    if len(split) == 0:
        raise ValueError("cannot evaluate an empty split")
    batch = Batch.from_dataset(split)
    fw = forward(state, batch, gen_params=state.gen.frozen())
    gen_key, a_aud = infer_key(state, batch)
    disc = discriminator_loss(state, batch.lips, fw.gen.both())
    loss_means = {k: float(v.value) for k, v in fw.components.items()}
    loss_means["disc"] = float(disc.value)
    loss_means["total"] = float(losses.total_loss(state.config.weights, fw.components).value)
    match = sync_pair_scores(state, batch.audio, gen_key)
    partners = mismatched_partners(split.labels)
    mismatch = sync_pair_scores(state, batch.audio[partners], gen_key)
    purity, majority = slot_purity(a_aud.argmax(axis=1), split.labels)
    return EvalReport(
        step=state.main_done,
        n_samples=len(split),
        align_kl=float(ad.kl_div(fw.a_lip.value, a_aud, EPS).value.mean()),
        lmd_key=toy_lmd(gen_key, batch.lips),
        lmd_direct=toy_lmd(fw.gen.direct.value, batch.lips),
        sync_score=float(match.mean()),
        sync_mismatch=float(mismatch.mean()),
        sync_separation=float(match.mean() - mismatch.mean()),
        purity=purity,
        loss_means=loss_means,
        slot_majority={str(k): v for k, v in majority.items()},
    )


def run(config: TrainConfig, dataset: Dataset, out_dir: str | Path | None = None,
        state: TrainState | None = None) -> TrainState:
    """Pretrain sync, train main, and (with ``out_dir``) write log/checkpoint/eval files.

    Passing ``state`` continues that run from where it stopped and appends to
    its log; otherwise a fresh state is built and any previous log replaced.
    """
    out = Path(out_dir) if out_dir else None
    if out:
        out.mkdir(parents=True, exist_ok=True)
    log_path = out / "train_log.csv" if out else None
    if state is None:
        state = new_state(config, dataset)
        if log_path is not None and log_path.exists():
            log_path.unlink()
    pretrain_sync(state, dataset)
    train_main(state, dataset, log_path=log_path,
               checkpoint_path=out / "checkpoint.json" if out else None)
    if out:
        save_checkpoint(state, out / "checkpoint.json")
        rep = evaluate(state, dataset.split("heldout"))
        (out / "eval.json").write_text(json.dumps(rep.to_dict(), indent=2), encoding="utf-8")
    return state
