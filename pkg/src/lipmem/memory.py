"""Audio-Lip Memory: paired key/value banks, cosine addressing, recall, and losses.

Both banks are ``(S, C)`` trainable matrices. An address is a length-``S``
probability vector (or a ``(B, S)`` batch of them) produced by a
kappa-scaled softmax over cosine similarities to the slots. Recall always
reads the lip-value bank, whichever address drives it.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numerics import ad
from .numerics.autodiff import EPS, Node
from .numerics.optim import ParamStore


@dataclass(frozen=True)
class MemoryConfig:
    n_slots: int = 16
    n_channels: int = 32
    kappa: float = 16.0

    def __post_init__(self):
        if self.n_slots < 1 or self.n_channels < 1:
            raise ValueError("n_slots and n_channels must be positive")
        if self.kappa < 0:
            raise ValueError("kappa must be >= 0")


class MemoryBank:
    """Key memory ``M_aud`` and value memory ``M_lip`` registered in a ParamStore."""

    def __init__(self, config: MemoryConfig, store: ParamStore, rng: np.random.Generator,
                 prefix: str = "memory", key_norm: float = 1.0):
        """Slots start as normalized isotropic Gaussian draws.

        ``key_norm`` sets the radius of the key slots. Key addressing only
        sees slot directions, and a small radius lets Adam's bounded steps
        rotate them faster; value slots stay unit-norm since recall reads
        their magnitude.
        """
        self.config = config
        self.prefix = prefix
        S, C = config.n_slots, config.n_channels
        for name, radius in (("aud", key_norm), ("lip", 1.0)):
            slots = rng.normal(0.0, 1.0 / np.sqrt(C), size=(S, C))
            slots *= radius / np.linalg.norm(slots, axis=1, keepdims=True)
            store.add(f"{prefix}.{name}", slots)
        self.store = store

    def seed_values(self, features: np.ndarray) -> None:
        """Overwrite the value slots with given lip features, one per slot."""
        features = np.asarray(features, dtype=np.float64)
        if features.shape != self.M_lip.shape:
            raise ValueError(f"expected {self.M_lip.shape} features, got {features.shape}")
        self.M_lip.value[...] = features

    @property
    def M_aud(self) -> Node:
        return self.store[f"{self.prefix}.aud"]

    @property
    def M_lip(self) -> Node:
        return self.store[f"{self.prefix}.lip"]

    @classmethod
    def from_arrays(cls, m_aud, m_lip, kappa: float = 16.0) -> "MemoryBank":
        """Build a bank with fixed slot contents (tests and analysis)."""
        m_aud = np.atleast_2d(np.asarray(m_aud, dtype=np.float64))
        m_lip = np.atleast_2d(np.asarray(m_lip, dtype=np.float64))
        if m_aud.shape != m_lip.shape:
            raise ValueError("key and value banks must share a shape")
        bank = cls.__new__(cls)
        bank.config = MemoryConfig(m_aud.shape[0], m_aud.shape[1], kappa)
        bank.prefix = "memory"
        bank.store = ParamStore()
        bank.store.add("memory.aud", m_aud)
        bank.store.add("memory.lip", m_lip)
        return bank


def _address(bank_matrix: Node, feature, kappa: float) -> Node:
    feature = ad.as_node(feature)
    if feature.shape[-1] != bank_matrix.shape[1]:
        raise ValueError(f"feature width {feature.shape[-1]} != channel count {bank_matrix.shape[1]}")
    squeeze = feature.value.ndim == 1
    if squeeze:
        feature = ad.reshape(feature, (1, -1))
    addr = ad.softmax_scaled(ad.cosine_matrix(feature, bank_matrix, EPS), kappa)
    return ad.reshape(addr, (-1,)) if squeeze else addr


def value_address(bank: MemoryBank, f_lip) -> Node:
    """A_lip: attention of a lip feature over the lip-value slots."""
    return _address(bank.M_lip, f_lip, bank.config.kappa)


def key_address(bank: MemoryBank, f_aud) -> Node:
    """A_aud: attention of an audio feature over the audio-key slots."""
    return _address(bank.M_aud, f_aud, bank.config.kappa)


def recall(bank: MemoryBank, addr) -> Node:
    addr = ad.as_node(addr)
    if addr.shape[-1] != bank.config.n_slots:
        raise ValueError(f"address length {addr.shape[-1]} != slot count {bank.config.n_slots}")
    if addr.value.ndim == 1:
        return ad.reshape(ad.matmul(ad.reshape(addr, (1, -1)), bank.M_lip), (-1,))
    return ad.matmul(addr, bank.M_lip)


def store_loss(bank: MemoryBank, f_lip) -> Node:
    """Squared L2 error of the value-address recall, batch-averaged."""
    f_lip = ad.as_node(f_lip)
    rec = recall(bank, value_address(bank, f_lip))
    return ad.mean(ad.sum(ad.square(f_lip - rec), axis=-1))


def align_loss(bank: MemoryBank, f_lip, f_aud, grad_both: bool = False,
               a_lip: Node | None = None, a_aud: Node | None = None) -> Node:
    """KL(A_lip || A_aud), batch-averaged.

    The lip-side address is a detached target unless ``grad_both``.
    Precomputed addresses may be passed to avoid recomputation.
    """
    if a_lip is None:
        a_lip = value_address(bank, f_lip)
    if a_aud is None:
        a_aud = key_address(bank, f_aud)
    target = a_lip if grad_both else ad.detach(a_lip)
    return ad.mean(ad.kl_div(target, a_aud, EPS))


def address_entropy(addr) -> np.ndarray:
    a = np.asarray(addr.value if isinstance(addr, Node) else addr)
    return -(np.where(a > 0, a * np.log(np.where(a > 0, a, 1.0)), 0.0)).sum(axis=-1)


def is_valid_address(addr, tol: float = 1e-6) -> bool:
    a = np.asarray(addr.value if isinstance(addr, Node) else addr)
    return bool(np.all(a > 0) and np.all(a <= 1.0) and np.all(np.abs(a.sum(axis=-1) - 1.0) <= tol))
