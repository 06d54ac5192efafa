import pytest
from hypothesis import given
from hypothesis import strategies as st

from shardsim.adversary import (
    AdversaryConfig,
    Behavior,
    BudgetExceeded,
    CorruptionLedger,
    CorruptionRejected,
    Timing,
)


def test_mild_delay():
    led = CorruptionLedger(AdversaryConfig(rho=0.25, tau=100), n=16)
    assert led.request_corruption(3, 50) == 150
    assert led.corrupted_set(149) == set()
    assert led.corrupted_set(150) == {3}
    assert led.status(3, 100) == "pending" and led.status(4, 100) == "honest"


def test_immediate():
    led = CorruptionLedger(AdversaryConfig(rho=0.25, tau=None), n=16)
    assert led.request_corruption(1, 7) == 7 and led.is_corrupted(1, 7)


def test_static_rejected_after_start():
    led = CorruptionLedger(AdversaryConfig(rho=0.25, timing=Timing.STATIC), n=16)
    led.corrupt_static([0, 1])
    led.start()
    with pytest.raises(CorruptionRejected):
        led.request_corruption(2, 10)


def test_budget():
    led = CorruptionLedger(AdversaryConfig(rho=0.25), n=16)
    for v in range(4):
        led.request_corruption(v, 0)
    assert led.request_corruption(0, 5) == 0  # repeat request is idempotent
    with pytest.raises(BudgetExceeded):
        led.request_corruption(4, 0)


def test_config_checks():
    with pytest.raises(ValueError):
        AdversaryConfig(rho=0.5)
    with pytest.raises(ValueError):
        AdversaryConfig(tau=-1)
    assert AdversaryConfig(behaviors={"withhold"}).behaviors == {Behavior.WITHHOLD}


@given(rho=st.floats(0, 0.49), n=st.integers(1, 200), reqs=st.lists(st.integers(0, 300), max_size=120))
def test_never_over_budget(rho, n, reqs):
    led = CorruptionLedger(AdversaryConfig(rho=rho, tau=3), n=n)
    for v in reqs:
        try:
            led.request_corruption(v, 0)
        except BudgetExceeded:
            pass
    assert len(led.corrupted_set(10**9)) <= rho * n + 1e-9
