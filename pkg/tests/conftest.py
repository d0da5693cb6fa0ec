import numpy as np
import pytest

from kamqe.model import Box, FourierHamiltonian, ref2


@pytest.fixture(scope="session")
def H_ref():
    return ref2()


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def random_terms(rng, n=2, n_terms=6, K=3, deg=2, t_deg=2):
    """Random real trigonometric terms in the from_terms format."""
    terms = []
    for _ in range(n_terms):
        k = tuple(int(x) for x in rng.integers(-K, K + 1, size=n))
        term = {"k": k, "i_deg": tuple(int(x) for x in rng.integers(0, deg + 1, size=n)),
                "t_deg": int(rng.integers(0, t_deg + 1)), "coeff": float(rng.standard_normal())}
        if any(k):
            term["sin_coeff"] = float(rng.standard_normal())
        terms.append(term)
    return terms


def naive_eval(terms, theta, I, t):
    """Term-by-term summation with scalar math, independent of the array code."""
    import math
    total = 0.0
    for term in terms:
        mono = t ** term.get("t_deg", 0)
        for x, d in zip(I, term.get("i_deg", (0,) * len(I))):
            mono *= x ** d
        phase = sum(k * th for k, th in zip(term["k"], theta))
        total += mono * (term.get("coeff", 0.0) * math.cos(phase) + term.get("sin_coeff", 0.0) * math.sin(phase))
    return total


def build(terms, n=2, box=None):
    box = box or Box((-1.0,) * n, (1.0,) * n)
    return FourierHamiltonian.from_terms(n, terms, box, "random")


_CRITERIA = pytest.StashKey[dict]()


@pytest.fixture
def criterion(request):
    """Record ``(number, ok, detail)`` for the end-of-run acceptance summary."""
    table = request.config.stash.setdefault(_CRITERIA, {})

    def record(number, ok, detail):
        table[number] = (bool(ok), detail)
        print(f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
        return ok

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    table = config.stash.get(_CRITERIA, {})
    if not table:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for number in sorted(table):
        ok, detail = table[number]
        terminalreporter.write_line(f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
