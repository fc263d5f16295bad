import math

import pytest

from spurfinder.core import FailurePolicy, FailureRule
from spurfinder.worldoracle import oracle_rate
from tests.test_synthworld import BASE, FLOWER, tiny_world

POLICY = FailurePolicy(FailureRule.TOP1_WRONG_OUTSIDE_PARENT, k=2)


def test_oracle_deterministic_in_seed():
    cfg = tiny_world(noise_sigma=0.25)
    a = oracle_rate(cfg, BASE, "fly", "bee", POLICY, draws=200, seed=1)
    assert a == oracle_rate(cfg, BASE, "fly", "bee", POLICY, draws=200, seed=1)
    assert a != oracle_rate(cfg, BASE, "fly", "bee", POLICY, draws=200, seed=2)


def test_oracle_noise_free_rates_are_exact():
    cfg = tiny_world()
    # without noise the fly-prompt failure happens iff flower is present
    # (bias pushes bee to 2.5 over fly's 1.0); flower prior is 0.5
    rate = oracle_rate(cfg, BASE, "fly", "bee", POLICY, draws=4000, seed=0)
    assert abs(rate - 0.5) < 5 * math.sqrt(0.25 / 4000)
    # forcing flower via the caption makes the failure certain
    assert oracle_rate(cfg, f"{BASE} {FLOWER}", "fly", "bee", POLICY, draws=500, seed=0) == 1.0


def test_oracle_untargeted_uses_policy():
    cfg = tiny_world()
    forced = oracle_rate(cfg, f"{BASE} {FLOWER}", "fly", None, POLICY, draws=300, seed=0)
    assert forced == 1.0  # bee is outside fly's parent


def test_oracle_rejects_mismatched_label():
    with pytest.raises(ValueError, match="expected"):
        oracle_rate(tiny_world(), BASE, "bee", None, POLICY, draws=10, seed=0)


def test_oracle_tracks_default_world_bias(world):
    # the planted flower->bee link should lift the bee rate for fly prompts
    policy = FailurePolicy(FailureRule.TOP1_WRONG_OUTSIDE_PARENT, k=3)
    base = "a realistic photograph of a fly (arthropod)."
    lo = oracle_rate(world, base, "fly", "bee", policy, draws=4000, seed=3)
    hi = oracle_rate(world, f"{base} it is on a flower.", "fly", "bee", policy, draws=4000, seed=3)
    assert hi / max(lo, 1e-9) > 5.0
