import math

import numpy as np
import pytest

from advasr import autodiff as ad
from advasr.autodiff import Tape
from advasr.gradcheck import tape_grad
from advasr.models import (CS, MONO, CheckpointError, ModelKind, RoutingError, TransferError,
                           adversarial_loss, composite_loss_adv_pooled, composite_loss_multitask,
                           forward_task, load_checkpoint, save_checkpoint, transfer_shared)
from advasr.trainer import sgd_step, zero_grad

from conftest import tiny_model


def grads(model, build):
    names = sorted(model.params)
    g = tape_grad(build, [model.params[n] for n in names])
    return dict(zip(names, g))


def test_partition_disjoint_and_complete(corpus):
    for kind in ModelKind:
        m = tiny_model(kind, corpus)
        groups = m.partition.groups()
        names = [n for g in groups.values() for n in g]
        assert len(names) == len(set(names)) == len(m.params)
        if kind in (ModelKind.BASELINE_MONO, ModelKind.BASELINE_CS, ModelKind.POOLED):
            assert not groups["discriminator"]
        if kind is ModelKind.MULTITASK_ADV:
            assert groups["head_mono"] and groups["head_cs"] and not groups["head_pooled"]


def test_routing_rejects_wrong_task(corpus):
    cs_utt = next(u for u in corpus["train"] if u.task == CS)
    with pytest.raises(RoutingError):
        forward_task(tiny_model(ModelKind.BASELINE_MONO, corpus), cs_utt)
    mono_utt = next(u for u in corpus["train"] if u.task == MONO)
    with pytest.raises(RoutingError):
        forward_task(tiny_model(ModelKind.BASELINE_CS, corpus), mono_utt)
    with pytest.raises(RoutingError):
        adversarial_loss(tiny_model(ModelKind.POOLED, corpus), corpus["train"])


def test_zero_weights_give_uniform_log_probs(corpus):
    m = tiny_model(ModelKind.POOLED, corpus)
    for p in m.params.values():
        p.data = np.zeros(p.shape)
    lp = forward_task(m, corpus["train"][0]).data
    np.testing.assert_allclose(lp, -math.log(corpus.vocab_size), atol=1e-15)


def test_multitask_head_isolation(corpus):
    m = tiny_model(ModelKind.MULTITASK_ADV, corpus)
    mono = next(u for u in corpus["train"] if u.task == MONO)
    before = forward_task(m, mono).data.copy()
    for p in m.partition.head_cs.values():
        p.data = p.data + 1.0
    np.testing.assert_array_equal(forward_task(m, mono).data, before)


def test_log_prob_rows_normalized(corpus):
    for kind in ModelKind:
        m = tiny_model(kind, corpus, seed=11)
        for u in corpus["train"]:
            if u.task in kind.tasks:
                lp = forward_task(m, u).data
                np.testing.assert_allclose(np.exp(lp).sum(axis=1), 1.0, atol=1e-9)


def test_adversarial_loss_at_chance_is_n_log_2(corpus):
    m = tiny_model(ModelKind.ADV_POOLED, corpus)
    for p in m.partition.discriminator.values():
        p.data = np.zeros(p.shape)
    batch = corpus["train"]
    assert adversarial_loss(m, batch).item() == pytest.approx(len(batch) * math.log(2), abs=1e-12)


def test_adversarial_loss_vanishes_for_confident_correct(corpus):
    m = tiny_model(ModelKind.ADV_POOLED, corpus)
    batch = corpus["train"]
    # point the discriminator along the direction separating pooled CS from MONO features
    enc = m.encode(batch)
    pooled = ad.masked_mean(enc.hidden, enc.lengths).data
    y = np.array([u.task == CS for u in batch])
    direction = pooled[y].mean(axis=0) - pooled[~y].mean(axis=0)
    proj = pooled @ direction
    thresh = (proj[y].min() + proj[~y].max()) / 2
    assert proj[y].min() > proj[~y].max()
    scale = 1e4 / (proj[y].min() - thresh)
    m.discriminator.fc.W.data = (direction * scale)[:, None]
    m.discriminator.fc.b.data = np.array([-thresh * scale])
    assert adversarial_loss(m, batch).item() < 1e-12


def test_adversarial_gradient_directions(corpus):
    """SGD on the discriminator lowers L_A; the same rule on the encoder (through the GRL) raises it."""
    batch = corpus["train"]
    m = tiny_model(ModelKind.ADV_POOLED, corpus, seed=5)
    base = adversarial_loss(m, batch).item()
    zero_grad(m.params)
    with Tape() as tape:
        loss = adversarial_loss(m, batch)
    tape.backward(loss)
    snapshot = {k: p.data.copy() for k, p in m.params.items()}
    sgd_step(m.partition.discriminator, 0.05)
    assert adversarial_loss(m, batch).item() < base
    for k, p in m.params.items():
        p.data = snapshot[k]
    sgd_step(m.partition.shared, 0.05)
    assert adversarial_loss(m, batch).item() >= base


def test_adv_pooled_composite_additivity_and_gradients(corpus):
    batch = corpus["train"]
    m = tiny_model(ModelKind.ADV_POOLED, corpus)
    terms = m.loss_terms(batch)
    total = composite_loss_adv_pooled(m, batch).item()
    assert total == (terms[MONO].item() + terms[CS].item()) + terms["ADV"].item()

    composite = grads(m, lambda: composite_loss_adv_pooled(m, batch))
    task = grads(m, lambda: ad.add(*[t for k, t in m.loss_terms(batch).items() if k != "ADV"]))
    m.set_grl_scale(-1.0)  # plain gradient of L_A, no reversal
    adv = grads(m, lambda: adversarial_loss(m, batch))
    m.set_grl_scale(1.0)
    for name in m.partition.shared:
        np.testing.assert_allclose(composite[name], task[name] - adv[name], rtol=0, atol=1e-10)
    for name in m.partition.head_pooled:
        np.testing.assert_allclose(composite[name], task[name], rtol=0, atol=1e-10)
    for name in m.partition.discriminator:
        np.testing.assert_allclose(composite[name], adv[name], rtol=0, atol=1e-10)


def test_grl_scale_zero_leaves_only_task_gradient_on_encoder(corpus):
    batch = corpus["train"]
    m = tiny_model(ModelKind.ADV_POOLED, corpus)
    m.set_grl_scale(0.0)
    composite = grads(m, lambda: composite_loss_adv_pooled(m, batch))
    pooled = grads(m, lambda: ad.add(*[t for k, t in m.loss_terms(batch).items() if k != "ADV"]))
    for name in list(m.partition.shared) + list(m.partition.head_pooled):
        np.testing.assert_array_equal(composite[name], pooled[name])


def test_multitask_composite_and_partition_isolation(corpus):
    batch = corpus["train"]
    m = tiny_model(ModelKind.MULTITASK_ADV, corpus)
    terms = m.loss_terms(batch)
    assert composite_loss_multitask(m, batch).item() == (terms[MONO].item() + terms[CS].item()) + terms["ADV"].item()
    composite = grads(m, lambda: composite_loss_multitask(m, batch))
    lm_only = grads(m, lambda: m.loss_terms(batch)[MONO])
    lcs_only = grads(m, lambda: m.loss_terms(batch)[CS])
    for name in m.partition.head_mono:
        np.testing.assert_allclose(composite[name], lm_only[name], rtol=0, atol=1e-10)
        assert not np.any(lcs_only[name])
    for name in m.partition.head_cs:
        np.testing.assert_allclose(composite[name], lcs_only[name], rtol=0, atol=1e-10)
        assert not np.any(lm_only[name])


def test_multitask_single_task_batch(corpus):
    mono = [u for u in corpus["train"] if u.task == MONO]
    m = tiny_model(ModelKind.MULTITASK_ADV, corpus)
    terms = m.loss_terms(mono)
    assert CS not in terms
    g = grads(m, lambda: composite_loss_multitask(m, mono))
    for name in m.partition.head_cs:
        assert not np.any(g[name])


def test_ascend_cs_loss_flag_reverses_cs_gradient(corpus):
    batch = [u for u in corpus["train"] if u.task == CS]
    m = tiny_model(ModelKind.MULTITASK_ADV, corpus)
    lit = tiny_model(ModelKind.MULTITASK_ADV, corpus, ascend_cs_loss=True)
    g = grads(m, lambda: m.loss_terms(batch)[CS])
    g_lit = grads(lit, lambda: lit.loss_terms(batch)[CS])
    for name in m.partition.shared:
        np.testing.assert_allclose(g_lit[name], -g[name], rtol=0, atol=1e-12)
    for name in m.partition.head_cs:
        np.testing.assert_array_equal(g_lit[name], g[name])


def test_transfer_copies_encoder_and_reinitializes_heads(corpus, tmp_path):
    donor = tiny_model(ModelKind.POOLED, corpus, seed=9)
    for p in donor.params.values():  # make the donor visibly "trained"
        p.data = p.data + 0.01
    path = tmp_path / "pooled.ckpt"
    save_checkpoint(donor, path)
    cfg = tiny_model(ModelKind.ADV_POOLED, corpus, seed=9).config
    digests = set()
    for source in (donor, str(path)):
        m = transfer_shared(source, cfg)
        digests.add(m.provenance["donor_encoder_sha256"])
        utt = corpus["train"][0]
        np.testing.assert_array_equal(m.encode([utt]).hidden.data, donor.encode([utt]).hidden.data)
        for name in m.partition.head_pooled:
            assert not np.array_equal(m.params[name].data, donor.params[name].data)
        assert m.provenance["donor_kind"] == "POOLED"
    assert len(digests) == 1


def test_transfer_layout_mismatch(corpus):
    donor = tiny_model(ModelKind.POOLED, corpus, blstm_layers=5)
    cfg = tiny_model(ModelKind.ADV_POOLED, corpus, blstm_layers=2).config
    with pytest.raises(TransferError, match="layer 4"):
        transfer_shared(donor, cfg)


def test_checkpoint_round_trip(corpus, tmp_path):
    m = tiny_model(ModelKind.MULTITASK_ADV, corpus, seed=21)
    path = tmp_path / "m.ckpt"
    save_checkpoint(m, path)
    back = load_checkpoint(path)
    assert back.config == m.config
    for name, p in m.params.items():
        assert back.params[name].data.tobytes() == p.data.tobytes()
    save_checkpoint(back, tmp_path / "again.ckpt")
    assert (tmp_path / "again.ckpt").read_bytes() == path.read_bytes()


def test_checkpoint_errors(corpus, tmp_path):
    m = tiny_model(ModelKind.POOLED, corpus)
    path = tmp_path / "m.ckpt"
    save_checkpoint(m, path)
    blob = path.read_bytes()
    with pytest.raises(CheckpointError, match="kind|MULTITASK"):
        load_checkpoint(path, expected_kind=ModelKind.MULTITASK_ADV)
    (tmp_path / "bad.ckpt").write_bytes(b"XXXXXXXX" + blob[8:])
    with pytest.raises(CheckpointError, match="magic"):
        load_checkpoint(tmp_path / "bad.ckpt")
    (tmp_path / "short.ckpt").write_bytes(blob[:-5])
    with pytest.raises(CheckpointError, match="truncated"):
        load_checkpoint(tmp_path / "short.ckpt")
    bumped = blob[:8] + (99).to_bytes(4, "little") + blob[12:]
    (tmp_path / "v.ckpt").write_bytes(bumped)
    with pytest.raises(CheckpointError, match="version"):
        load_checkpoint(tmp_path / "v.ckpt")


def test_checkpoint_header_records_conventions(corpus, tmp_path):
    from advasr.models import read_checkpoint
    m = tiny_model(ModelKind.POOLED, corpus)
    save_checkpoint(m, tmp_path / "m.ckpt")
    header, _ = read_checkpoint(tmp_path / "m.ckpt")
    assert header["blank_id"] == 0
    assert header["gate_order"] == ["input", "forget", "candidate", "output"]
    assert header["model"]["kind"] == "POOLED"
