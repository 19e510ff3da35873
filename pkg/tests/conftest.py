import pytest

from advasr import autodiff as ad
from advasr.autodiff import Tape
from advasr.models import CS, MONO, Model, ModelConfig
from advasr.synth import SynthConfig, generate_corpus
from advasr.trainer import zero_grad


def tiny_corpus(seed=1, n=2, **kw):
    params = dict(n_train_mono=n, n_train_cs=n, n_dev_mono=n, n_dev_cs=n, n_test_mono=n, n_test_cs=n,
                  tokens_per_utterance=(2, 2), symbols_per_token=(1, 2), frames_per_symbol=(3, 3),
                  l1_size=2, l2_size=2, feature_dim=3)
    params.update(kw)
    return generate_corpus(SynthConfig(seed=seed, **params))


def tiny_model(kind, corpus, seed=3, **kw):
    params = dict(conv_channels=(3, 3), blstm_hidden=2, blstm_layers=2)
    params.update(kw)
    return Model(ModelConfig(kind=kind, feature_dim=corpus.config.feature_dim,
                             vocab_size=corpus.vocab_size, seed=seed, **params))


@pytest.fixture
def corpus():
    return tiny_corpus()


def sign_separated_step(model, batch, lr):
    """Sign-separated update composed by hand from separate task and adversarial tapes."""
    params = model.params
    terms = model.loss_terms(batch)
    B = len(batch)

    def grads_of(build):
        zero_grad(params)
        with Tape() as tape:
            loss = build()
        tape.backward(loss)
        return {k: p.grad.copy() for k, p in params.items()}

    g_task = {task: grads_of(lambda t=task: ad.mul(model.loss_terms(batch)[t], 1.0 / B))
              for task in (MONO, CS) if task in terms}
    model.set_grl_scale(-1.0)  # plain dL_A/dtheta, no reversal
    g_adv = grads_of(lambda: ad.mul(model.loss_terms(batch)["ADV"], 1.0 / B))
    model.set_grl_scale(1.0)
    part = model.partition
    updates = {}
    for name in part.shared:
        updates[name] = sum(g[name] for g in g_task.values()) - g_adv[name]
    for name in part.head_pooled:
        updates[name] = sum(g[name] for g in g_task.values())
    if part.head_mono:
        for name in part.head_mono:
            updates[name] = g_task[MONO][name] if MONO in g_task else 0.0
        for name in part.head_cs:
            updates[name] = g_task[CS][name] if CS in g_task else 0.0
    for name in part.discriminator:
        updates[name] = g_adv[name]
    for name, p in params.items():
        p.data = p.data - lr * updates[name]


ACCEPTANCE = {}


def record_criterion(number, title, ok, detail=""):
    ACCEPTANCE[number] = (title, bool(ok), detail)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        title, ok, detail = ACCEPTANCE[number]
        line = f"[{'PASS' if ok else 'FAIL'}] {number:>2}. {title}"
        terminalreporter.write_line(line + (f"  ({detail})" if detail else ""))
