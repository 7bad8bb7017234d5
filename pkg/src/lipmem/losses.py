"""Training objectives and their gradient-routing contracts."""

from __future__ import annotations

from dataclasses import astuple, dataclass
from typing import Mapping, Sequence

from . import models
from .numerics import ad
from .numerics.autodiff import EPS, Node

COMPONENTS = ("recon", "av_sync", "vv_sync", "gan", "store", "align")


@dataclass(frozen=True)
class LossWeights:
    recon: float = 10.0
    av_sync: float = 0.01
    vv_sync: float = 0.01
    gan: float = 0.01
    store: float = 0.01
    align: float = 0.01

    def __post_init__(self):
        import math
        if not all(math.isfinite(w) and w >= 0 for w in astuple(self)):
            raise ValueError("loss weights must be finite and non-negative")


@dataclass
class GeneratedPair:
    """Windows generated from the key-address recall (I_hat_g) and from f_lip (I_hat_G)."""

    key: Node
    direct: Node

    def both(self) -> tuple[Node, Node]:
        return self.key, self.direct


def recon_loss(gen: GeneratedPair, gt) -> Node:
    return ad.l1_loss(gen.key, gt) + ad.l1_loss(gen.direct, gt)


def gan_generator_loss(d_generated: Sequence[Node], standard_form: bool = False) -> Node:
    """Mean of log(1 - D(I_hat)) over the generated branches.

    ``standard_form`` switches to the non-saturating -log D(I_hat).
    """
    d = ad.concat([ad.as_node(x) for x in d_generated], axis=0)
    if standard_form:
        return -ad.mean(ad.log(d))
    return ad.mean(ad.log(1.0 - d))


def gan_discriminator_loss(d_real, d_generated: Sequence[Node], standard_form: bool = False) -> Node:
    """log(1 - D(I)) + log D(I_hat), each averaged; generated inputs must arrive detached."""
    d_real = ad.as_node(d_real)
    d_fake = ad.concat([ad.as_node(x) for x in d_generated], axis=0)
    if standard_form:
        return -ad.mean(ad.log(d_real)) - ad.mean(ad.log(1.0 - d_fake))
    return ad.mean(ad.log(1.0 - d_real)) + ad.mean(ad.log(d_fake))


def d_sync(f_a, f_v, eps: float = EPS) -> Node:
    return ad.cosine_sim(f_a, f_v, eps)


def sync_probability(f_a, f_v, eps: float = EPS) -> Node:
    """Map cosine similarity in [-1, 1] to a probability, clamped away from 0 and 1."""
    return ad.clip((d_sync(f_a, f_v, eps) + 1.0) * 0.5, eps, 1.0 - eps)


def av_sync_loss(nets: models.Networks, sync_params: Mapping[str, Node], audio_inputs,
                 gen: GeneratedPair) -> Node:
    """BCE (positive label) of audio against both generated windows.

    Pass frozen sync parameters; gradients then reach only the generated frames.
    """
    total = None
    for frames in gen.both():
        f_a, f_v = models.sync_embed(nets, sync_params, audio_inputs, frames)
        term = ad.log(sync_probability(f_a, f_v))
        total = term if total is None else total + term
    return -ad.mean(total)


def vv_sync_loss(nets: models.Networks, lip_params_frozen: Mapping[str, Node], gen: GeneratedPair,
                 gt_sequence) -> Node:
    """L1 between frozen-lip-encoder features of generated and ground-truth windows."""
    target = models.lip_encode(nets, lip_params_frozen, ad.detach(ad.as_node(gt_sequence)))
    total = None
    for frames in gen.both():
        term = ad.l1_loss(models.lip_encode(nets, lip_params_frozen, frames), target)
        total = term if total is None else total + term
    return total


def total_loss(weights: LossWeights, components: Mapping[str, Node]) -> Node:
    out = None
    for name in COMPONENTS:
        term = ad.as_node(components[name]) * getattr(weights, name)
        out = term if out is None else out + term
    return out
