"""Small dense networks standing in for the encoders, decoder, sync module and critic.

Every forward function takes a ``params`` mapping (a ParamStore's live
parameters or its ``frozen()`` constants) so the same code serves trainable
and frozen evaluation.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .numerics import ad
from .numerics.autodiff import EPS, Node
from .numerics.optim import ParamStore
from .synthworld import MOUTH_DIM, N_FRAMES


@dataclass(frozen=True)
class MlpSpec:
    widths: tuple[int, ...]
    hidden: str = "tanh"
    output: str = "identity"
    inject_dim: int = 0

    def __post_init__(self):
        if len(self.widths) < 2 or any(w <= 0 for w in self.widths):
            raise ValueError(f"invalid widths {self.widths}")
        for tag in (self.hidden, self.output):
            if tag not in ad.ACTIVATIONS:
                raise ValueError(f"unknown activation {tag!r}")


def glorot(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


def init_mlp(store: ParamStore, prefix: str, spec: MlpSpec, rng: np.random.Generator) -> None:
    for i, (a, b) in enumerate(zip(spec.widths[:-1], spec.widths[1:])):
        store.add(f"{prefix}.W{i}", glorot(rng, a, b))
        store.add(f"{prefix}.b{i}", np.zeros(b))
        if spec.inject_dim and i < len(spec.widths) - 2:
            store.add(f"{prefix}.U{i}", glorot(rng, spec.inject_dim, b))


def mlp_forward(params: Mapping[str, Node], prefix: str, spec: MlpSpec, x,
                inject=None) -> Node:
    h = ad.as_node(x)
    if h.shape[-1] != spec.widths[0]:
        raise ValueError(f"{prefix}: expected input width {spec.widths[0]}, got {h.shape[-1]}")
    n_layers = len(spec.widths) - 1
    for i in range(n_layers):
        z = ad.matmul(h, params[f"{prefix}.W{i}"]) + params[f"{prefix}.b{i}"]
        last = i == n_layers - 1
        if not last and spec.inject_dim:
            if inject is None:
                raise ValueError(f"{prefix}: conditioning input required")
            z = z + ad.matmul(inject, params[f"{prefix}.U{i}"])
        h = ad.ACTIVATIONS[spec.output if last else spec.hidden](z)
    return h


@dataclass(frozen=True)
class ModelConfig:
    n_channels: int = 32
    hidden: int = 64
    sync_dim: int = 32
    activation: str = "tanh"


@dataclass
class Networks:
    """Architecture of every network, bound to the data dimensions."""

    d_aud: int
    frame_dim: int
    config: ModelConfig = field(default_factory=ModelConfig)

    def __post_init__(self):
        C, H, act = self.config.n_channels, self.config.hidden, self.config.activation
        F = self.frame_dim
        lip_in = N_FRAMES * MOUTH_DIM
        self.audio_enc = MlpSpec((self.d_aud, H, C), act)
        self.lip_enc = MlpSpec((lip_in, H, C), act)
        self.id_enc = MlpSpec((F + N_FRAMES * F, H, C), act)
        self.decoder = MlpSpec((2 * C, H, H, N_FRAMES * F), act, inject_dim=C)
        self.sync_a = MlpSpec((self.d_aud, H, self.config.sync_dim), act)
        self.sync_v = MlpSpec((lip_in, H, self.config.sync_dim), act)
        self.disc = MlpSpec((N_FRAMES * F, H, 1), act, output="sigmoid")

    def init_generator(self, store: ParamStore, rng: np.random.Generator) -> None:
        init_mlp(store, "audio_enc", self.audio_enc, rng)
        init_mlp(store, "lip_enc", self.lip_enc, rng)
        init_mlp(store, "id_enc", self.id_enc, rng)
        init_mlp(store, "decoder", self.decoder, rng)

    def init_sync(self, store: ParamStore, rng: np.random.Generator) -> None:
        init_mlp(store, "sync_a", self.sync_a, rng)
        init_mlp(store, "sync_v", self.sync_v, rng)

    def init_disc(self, store: ParamStore, rng: np.random.Generator) -> None:
        init_mlp(store, "disc", self.disc, rng)


def _flat(x, width: int) -> Node:
    x = ad.as_node(x)
    if x.value.ndim == 1:
        x = ad.reshape(x, (1, -1))
    else:
        x = ad.reshape(x, (x.shape[0], -1))
    if x.shape[1] != width:
        raise ValueError(f"expected {width} features per row, got {x.shape[1]}")
    return x


def mouth_channels(frames, frame_dim: int) -> Node:
    """(B, 5*F) or (B, 5, F) frame windows -> (B, 5*4) mouth parameters."""
    x = _flat(frames, N_FRAMES * frame_dim)
    x = ad.reshape(x, (x.shape[0], N_FRAMES, frame_dim))
    return ad.reshape(x[:, :, :MOUTH_DIM], (x.shape[0], N_FRAMES * MOUTH_DIM))


def _centered_mouth(frames, frame_dim: int) -> Node:
    # mouth parameters live in [0, 1]; encoders see them rescaled to [-1, 1]
    return mouth_channels(frames, frame_dim) * 2.0 - 1.0


def audio_encode(nets: Networks, params, audio_input) -> Node:
    return mlp_forward(params, "audio_enc", nets.audio_enc, _flat(audio_input, nets.d_aud))


def lip_encode(nets: Networks, params, lip_sequence) -> Node:
    """Lip feature from the mouth channels of a 5-frame window (upper face masked)."""
    return mlp_forward(params, "lip_enc", nets.lip_enc, _centered_mouth(lip_sequence, nets.frame_dim))


def identity_encode(nets: Networks, params, reference, pose_prior) -> Node:
    ref = _flat(reference, nets.frame_dim)
    prior = _flat(pose_prior, N_FRAMES * nets.frame_dim)
    return mlp_forward(params, "id_enc", nets.id_enc, ad.concat([ref, prior], axis=1))


def decode(nets: Networks, params, lip_feature, f_aud, f_I) -> Node:
    """G(lip_feature (+) f_aud, f_I) -> (B, 5*F) frame window."""
    x = ad.concat([ad.as_node(lip_feature), ad.as_node(f_aud)], axis=-1)
    return mlp_forward(params, "decoder", nets.decoder, _flat(x, 2 * nets.config.n_channels),
                       inject=_flat(f_I, nets.config.n_channels))


def sync_embed(nets: Networks, params, audio_input, frame_sequence) -> tuple[Node, Node]:
    f_a = mlp_forward(params, "sync_a", nets.sync_a, _flat(audio_input, nets.d_aud))
    f_v = mlp_forward(params, "sync_v", nets.sync_v, _centered_mouth(frame_sequence, nets.frame_dim))
    return f_a, f_v


def discriminate(nets: Networks, params, frame_sequence, eps: float = EPS) -> Node:
    """Realism score in [eps, 1 - eps], one per window."""
    out = mlp_forward(params, "disc", nets.disc, _flat(frame_sequence, N_FRAMES * nets.frame_dim))
    return ad.reshape(ad.clip(out, eps, 1.0 - eps), (-1,))
