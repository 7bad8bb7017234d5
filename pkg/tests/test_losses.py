import math

import numpy as np
import pytest

from lipmem import losses
from lipmem.losses import GeneratedPair, LossWeights
from lipmem.numerics import ad
from lipmem.numerics.autodiff import EPS, backward, constant, parameter
from lipmem.training import Batch, TrainConfig, discriminator_loss, forward, new_state


def pair(a, b=None):
    return GeneratedPair(ad.as_node(a), ad.as_node(a if b is None else b))


# -- scalar oracles --------------------------------------------------------------------

def test_recon_examples():
    gt = np.arange(12.0).reshape(1, 12)
    assert losses.recon_loss(pair(gt), gt).item() == 0.0
    off = gt.copy()
    off[0, 5] += 1.0
    assert losses.recon_loss(pair(off), gt).item() == pytest.approx(2 / 12, rel=1e-15)
    flipped = gt.copy()
    flipped[0, 5] -= 1.0
    assert losses.recon_loss(pair(flipped), gt).item() == losses.recon_loss(pair(off), gt).item()


def test_gan_generator_examples():
    assert losses.gan_generator_loss([np.array([0.5])]).item() == pytest.approx(math.log(0.5), abs=1e-15)
    assert losses.gan_generator_loss([np.array([0.5]), np.array([0.5])]).item() == pytest.approx(-0.6931, abs=1e-4)
    near_one = losses.gan_generator_loss([np.array([1 - EPS])]).item()
    assert near_one == pytest.approx(math.log(EPS), rel=1e-6)
    assert losses.gan_generator_loss([np.array([0.5])], standard_form=True).item() == pytest.approx(math.log(2))


def test_gan_discriminator_examples():
    half = np.array([0.5])
    assert losses.gan_discriminator_loss(half, [half]).item() == pytest.approx(-1.3863, abs=1e-4)
    best = losses.gan_discriminator_loss(np.array([1 - EPS]), [np.array([EPS])]).item()
    assert best == pytest.approx(2 * math.log(EPS), rel=1e-6)
    worse = losses.gan_discriminator_loss(np.array([0.9]), [np.array([0.1])]).item()
    assert best < worse
    assert losses.gan_discriminator_loss(half, [half], standard_form=True).item() == pytest.approx(2 * math.log(2))


def test_gan_generator_gradient_does_not_reach_discriminator_constants():
    w = parameter(np.array([0.3]))
    d = ad.sigmoid(constant(np.array([0.2])) * 1.0 + w)
    frozen = ad.detach(d)
    loss = losses.gan_generator_loss([frozen])
    assert not loss.requires_grad


@pytest.mark.parametrize("a,b,expected", [
    ([1.0, 2.0], [1.0, 2.0], 1.0),
    ([1.0, 0.0], [0.0, 3.0], 0.0),
    ([1.0, 2.0], [2.0, 1.0], 0.8),
])
def test_d_sync_examples(a, b, expected):
    assert losses.d_sync(np.array(a), np.array(b)).item() == pytest.approx(expected, abs=1e-12)


def test_sync_probability_bounds():
    p1 = losses.sync_probability(np.array([1.0, 0.0]), np.array([2.0, 0.0])).item()
    assert p1 == pytest.approx(1 - EPS) and -math.log(p1) == pytest.approx(0.0, abs=1e-7)
    p0 = losses.sync_probability(np.array([1.0, 0.0]), np.array([0.0, 1.0])).item()
    assert -math.log(p0) == pytest.approx(0.6931, abs=1e-4)
    pm = losses.sync_probability(np.array([1.0, 0.0]), np.array([-1.0, 0.0])).item()
    assert pm == pytest.approx(EPS)


def test_total_loss_examples():
    names = losses.COMPONENTS
    ones = {k: np.array(1.0) for k in names}
    zeros = {k: np.array(0.0) for k in names}
    assert losses.total_loss(LossWeights(), zeros).item() == 0.0
    assert losses.total_loss(LossWeights(), ones).item() == pytest.approx(10.05, abs=1e-12)
    assert losses.total_loss(LossWeights(0, 0, 0, 0, 0, 0), {k: np.array(7.0) for k in names}).item() == 0.0


def test_loss_weights_validation():
    with pytest.raises(ValueError):
        LossWeights(recon=-1.0)
    with pytest.raises(ValueError):
        LossWeights(align=float("nan"))


# -- routing on a small training state -------------------------------------------------

@pytest.fixture(scope="module")
def small_state(small_dataset):
    cfg = TrainConfig(n_slots=4, n_channels=6, hidden=8, sync_dim=5, batch_size=4, seed=5)
    return new_state(cfg, small_dataset)


@pytest.fixture
def fw(small_state, small_dataset):
    small_state.gen.zero_grad()
    small_state.sync.zero_grad()
    small_state.disc.zero_grad()
    return forward(small_state, Batch.from_dataset(small_dataset, np.arange(6)))


def _all_zero(store, prefix=""):
    return all(p.grad is None or not np.any(p.grad)
               for k, p in store.params.items() if k.startswith(prefix))


def test_vv_sync_zero_when_generated_equals_truth(small_state, small_dataset):
    lips = small_dataset.lips[:3].reshape(3, -1)
    v = losses.vv_sync_loss(small_state.nets, small_state.gen.frozen(), pair(lips), lips)
    assert v.item() == 0.0


def test_vv_sync_routes_to_decoder_not_lip_encoder(small_state, fw):
    backward(fw.components["vv_sync"])
    assert _all_zero(small_state.gen, "lip_enc.")
    assert not _all_zero(small_state.gen, "decoder.")


def test_av_sync_leaves_sync_module_untouched(small_state, fw):
    backward(fw.components["av_sync"])
    assert _all_zero(small_state.sync)
    assert not _all_zero(small_state.gen, "decoder.")


def test_align_leaves_value_memory_untouched(small_state, fw):
    backward(fw.components["align"])
    assert not np.any(small_state.bank.M_lip.grad)
    assert _all_zero(small_state.gen, "lip_enc.")
    assert np.any(small_state.bank.M_aud.grad)


def test_discriminator_loss_leaves_generator_untouched(small_state, small_dataset, fw):
    d = discriminator_loss(small_state, small_dataset.lips[:6].reshape(6, -1), fw.gen.both())
    backward(d)
    assert _all_zero(small_state.gen)
    assert not _all_zero(small_state.disc)
