import pytest

from ddplan.core import ModelProfile, PiecewiseLatencyModel, Segment, VmType


def linear_model(alpha, beta, b_max):
    return PiecewiseLatencyModel((Segment(1.0, float(b_max), alpha, beta),), b_max)


def make_vm(id="A", kind=None, price=1.0, cap=10e9, memcap=256, threshold=64, quota=4, **kw):
    return VmType(id=id, device_kind=kind or f"dev-{id}", price_per_hour=price, bus_bandwidth_cap=cap,
                  memcap_batch=memcap, threshold_batch=threshold, quota=quota, **kw)


def make_profile(kinds, alpha=0.001, beta=0.01, b_max=1024, sizes=(1e6,), fractions=(1.0,), stddev=0.0,
                 bw_ratio=2.0):
    """``kinds`` maps device kind -> speed factor (latency divisor)."""
    models = {}
    for kind, speed in kinds.items():
        fw = linear_model(alpha / speed, beta / speed, b_max)
        models[kind] = {"fw": fw, "bw": fw.scaled(bw_ratio)}
    return ModelProfile("m", tuple(sizes), tuple(fractions), models, {k: stddev for k in kinds})


@pytest.fixture
def vm():
    return make_vm()


def pytest_terminal_summary(terminalreporter):
    import sys

    acc = sys.modules.get("test_acceptance")
    if acc is None or not acc.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for line in acc.RESULTS:
        terminalreporter.write_line(line)
