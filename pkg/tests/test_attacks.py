import numpy as np
import pytest

from uwbguard.attacks import AttackConfig, AttackKind, bim, epsilon_schedule, fgsm, pgd, run_attack
from uwbguard.model import accuracy, forward, input_gradient


@pytest.fixture(scope="module")
def test_batch(tiny_data):
    x, y = tiny_data.test
    return x[:8], y[:8]


def test_schedule():
    eps = epsilon_schedule(1.0, 15)
    assert len(eps) == 15 and eps[0] == 0 and eps[-1] == 1.0
    np.testing.assert_allclose(np.diff(eps), 1 / 14)
    with pytest.raises(ValueError):
        epsilon_schedule(1.0, 1)


@pytest.mark.parametrize("kind", list(AttackKind))
@pytest.mark.parametrize("eps", [0.0, 0.01, 0.3, 1.0, 5.0])
def test_budget_and_range(trained, test_batch, kind, eps):
    x, y = test_batch
    x_orig = x.copy()
    adv = run_attack(x, y, trained, AttackConfig(kind=kind, epsilon=eps, steps=3, seed=1))
    assert np.max(np.abs(adv - x)) <= eps + 1e-9
    assert adv.min() >= 0.0 and adv.max() <= 1.0
    np.testing.assert_array_equal(x, x_orig)


@pytest.mark.parametrize("kind", list(AttackKind))
def test_zero_budget_is_identity(trained, test_batch, kind):
    x, y = test_batch
    adv = run_attack(x, y, trained, AttackConfig(kind=kind, epsilon=0.0, steps=7))
    np.testing.assert_array_equal(adv, x)
    assert adv is not x


def test_fgsm_matches_sign_oracle(trained, test_batch):
    x, y = test_batch
    eps = 0.05
    expected = np.clip(x + eps * np.sign(input_gradient(x, y, trained)), 0, 1)
    np.testing.assert_array_equal(fgsm(x, y, trained, AttackConfig(epsilon=eps)), expected)


def test_single_step_bim_is_fgsm(trained, test_batch):
    x, y = test_batch
    cfg = AttackConfig(kind=AttackKind.BIM, epsilon=0.2, steps=1, step_size=0.2)
    np.testing.assert_array_equal(bim(x, y, trained, cfg), fgsm(x, y, trained, cfg))


def test_per_sample_equals_batched(trained, test_batch):
    x, y = test_batch
    cfg = AttackConfig(kind=AttackKind.BIM, epsilon=0.1, steps=3)
    batched = bim(x, y, trained, cfg)
    for i in range(3):
        np.testing.assert_allclose(bim(x[i], y[i], trained, cfg), batched[i], atol=1e-12)


def test_pgd_deterministic_and_seeded(trained, test_batch):
    x, y = test_batch
    cfg = AttackConfig(kind=AttackKind.PGD, epsilon=0.2, steps=2, seed=3)
    a, b = pgd(x, y, trained, cfg), pgd(x, y, trained, cfg)
    assert a.tobytes() == b.tobytes()
    c = pgd(x, y, trained, AttackConfig(kind=AttackKind.PGD, epsilon=0.2, steps=2, seed=4))
    assert not np.array_equal(a, c)


def test_pgd_without_random_start_is_bim(trained, test_batch):
    x, y = test_batch
    kw = dict(epsilon=0.2, steps=3)
    np.testing.assert_array_equal(
        pgd(x, y, trained, AttackConfig(kind=AttackKind.PGD, random_start=False, **kw)),
        bim(x, y, trained, AttackConfig(kind=AttackKind.BIM, **kw)),
    )


def test_attacks_hurt(trained, tiny_data):
    x, y = tiny_data.test
    clean = accuracy(x, y, trained)
    adv = fgsm(x, y, trained, AttackConfig(epsilon=0.5))
    assert accuracy(adv, y, trained) < clean


def test_attack_raises_loss(trained, test_batch):
    x, y = test_batch
    adv = bim(x, y, trained, AttackConfig(kind=AttackKind.BIM, epsilon=0.05, steps=5))
    loss = lambda xx: -np.log(forward(xx, trained).probs[np.arange(len(y)), y])
    assert np.mean(loss(adv)) > np.mean(loss(x))


@pytest.mark.parametrize(
    "bad", [dict(epsilon=-0.1), dict(steps=0), dict(step_size=0.0), dict(clamp_range=(1.0, 0.0))]
)
def test_invalid_config(bad):
    with pytest.raises(ValueError):
        AttackConfig(**bad)


def test_default_step_is_quarter_budget():
    assert AttackConfig(epsilon=0.8).effective_step == 0.2
    assert AttackConfig(epsilon=0.8, step_size=0.1).effective_step == 0.1
