import numpy as np
import pytest

from disagg.geo import build_hierarchy


@pytest.fixture
def h14():
    """4x4 grid, one root and four 2x2 quadrants."""
    return build_hierarchy({"grid": {"rows": 4, "cols": 4, "cell_size": 10.0},
                            "subdivision": [1, 2]})


@pytest.fixture
def h3():
    """4x4 grid subdivided twice: d = [1, 4, 16]."""
    return build_hierarchy({"grid": {"rows": 4, "cols": 4, "cell_size": 10.0},
                            "subdivision": [1, 2, 2], "names": ["L0", "L1", "L2"]})


@pytest.fixture
def h24():
    """1x4 strip: parents P0={a,b}, P1={c,d}."""
    return build_hierarchy({
        "grid": {"rows": 1, "cols": 4, "cell_size": 1.0},
        "levels": [
            {"name": "coarse", "units": [{"id": "P0", "cells": [0, 1]},
                                         {"id": "P1", "cells": [2, 3]}]},
            {"name": "fine", "units": [{"id": c, "cells": [i]} for i, c in enumerate("abcd")]},
        ],
    })


def random_hierarchy(rng, max_levels=3, max_fine=64):
    """Random strictly nested hierarchy with unequal areas."""
    n_levels = int(rng.integers(2, max_levels + 1))
    while True:
        factors = [[int(rng.integers(1, 3)), int(rng.integers(1, 3))] for _ in range(n_levels)]
        factors[0] = [int(rng.integers(1, 3)), int(rng.integers(1, 3))]
        for f in factors[1:]:
            if f == [1, 1]:
                f[int(rng.integers(0, 2))] = 2
        rows = int(np.prod([f[0] for f in factors])) * int(rng.integers(1, 4))
        cols = int(np.prod([f[1] for f in factors])) * int(rng.integers(1, 4))
        d_fine = int(np.prod([f[0] * f[1] for f in factors]))
        if d_fine <= max_fine:
            break
    return build_hierarchy({"grid": {"rows": rows, "cols": cols, "cell_size": 5.0},
                            "subdivision": factors, "jitter": 1.0,
                            "seed": int(rng.integers(0, 2**31))})


# ------------------------------------------------ acceptance criterion lines

_CRITERIA = []


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None:
        return
    if rep.when == "call" or (rep.when == "setup" and not rep.passed):
        _CRITERIA.append((mark.args[0], "PASS" if rep.passed else "FAIL", rep.duration))


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for name, status, secs in _CRITERIA:
        terminalreporter.write_line(f"{status}  {name}  ({secs:.1f}s)")
