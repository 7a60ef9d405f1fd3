"""Smoke test for the Python bindings. Run after building the extension."""
import math

import difflab_py as dl


def test_line_distance_and_trace():
    f = dl.Form.line(-8.0, 8.0, 4096)
    a, b = [(-2.0, -1.0)], [(1.0, 2.0)]
    d = f.distance(a, b)
    assert abs(d - 2.0) < 1e-9

    logs, errs = f.trace(a, b, [0.01, 0.02])
    assert all(math.isfinite(v) for v in logs)
    assert logs[0] < logs[1]
    assert all(e < v for e, v in zip(errs, logs))


def test_semigroup_conserves_mass():
    f = dl.Form.line(0.0, 1.0, 64, kind="c_delta", delta=0.25)
    ones = [1.0] * f.n_nodes
    u = f.semigroup(0.05, ones)
    assert max(abs(x - 1.0) for x in u) < 1e-9


def test_varadhan_fit():
    f = dl.Form.line(-8.0, 8.0, 8192)
    r = f.varadhan([(-2.0, -1.0)], [(1.0, 2.0)], count=12)
    assert abs(r["fitted_d_squared"] - 4.0) < 0.1


def test_resistance_and_checks():
    f = dl.Form.line(-4.0, 4.0, 800)
    assert abs(f.resistance([-1.0], [1.0]) - 2.0) < 1e-6
    names = [n for n, _ in dl.checks()]
    assert names[0] == "varadhan" and len(names) == 8


def test_bad_input_raises():
    try:
        dl.Form.line(1.0, -1.0, 10)
    except ValueError:
        return
    raise AssertionError("expected ValueError")


if __name__ == "__main__":
    for name, fn in list(globals().items()):
        if name.startswith("test_"):
            fn()
            print(f"{name}: ok")
