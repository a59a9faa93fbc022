from pathlib import Path

import numpy as np
import pytest

from sgrec.config import AblationFlags, TrainConfig
from sgrec.data import CheckInSequence, Vocabulary
from sgrec.engine import Tape, Tensor, backward

FIXTURES = Path(__file__).parent / "fixtures"


def numerical_grad(f, arr: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    """Central differences of scalar ``f()`` w.r.t. every entry of ``arr`` (mutated in place)."""
    g = np.zeros_like(arr, dtype=np.float64)
    flat = arr.reshape(-1)
    gflat = g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + eps
        up = f()
        flat[i] = old - eps
        down = f()
        flat[i] = old
        gflat[i] = (up - down) / (2 * eps)
    return g


def rel_error(a: np.ndarray, b: np.ndarray) -> float:
    denom = max(np.linalg.norm(a), np.linalg.norm(b))
    return 0.0 if denom == 0 else float(np.linalg.norm(a - b) / denom)


def analytic_grads(build, inputs):
    """Run ``build(*inputs)`` on a tape and return each input's gradient."""
    for t in inputs:
        t.grad = None
    with Tape() as tape:
        out = build(*inputs)
    backward(out, tape)
    return [t.grad if t.grad is not None else np.zeros_like(t.data) for t in inputs]


def check_gradients(build, inputs, tol=1e-6, eps=1e-5):
    grads = analytic_grads(build, inputs)
    for t, g in zip(inputs, grads):
        num = numerical_grad(lambda: float(build(*inputs).data), t.data, eps)
        err = rel_error(g, num)
        assert err < tol, f"{t.name or 'input'}: relative error {err:.3g}"


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def toy_vocab(n_pois=8, n_cats=3, n_users=2, relations=None) -> Vocabulary:
    poi_cat = [p % n_cats for p in range(n_pois)]
    if relations is None:
        relations = [(a, b) for a in range(n_cats) for b in range(n_cats) if (a + b) % 2 == 0]
    return Vocabulary(
        users=[f"u{i}" for i in range(n_users)],
        pois=[f"p{i}" for i in range(n_pois)],
        cats=[f"c{i}" for i in range(n_cats)],
        poi_cat=poi_cat,
        relations=relations,
    )


def toy_config(**kw) -> TrainConfig:
    base = dict(dim=4, num_layers=2, gamma=1.0, dtype="float64", l2_lambda=1e-5, seed=7)
    base.update(kw)
    return TrainConfig(**base)


def make_seq(user, pois, vocab, split="train"):
    return CheckInSequence(
        user=user,
        pois=tuple(pois),
        cats=tuple(vocab.poi_cat[p] for p in pois),
        timestamps=tuple(range(1, len(pois) + 1)),
        split=split,
    )


@pytest.fixture
def vocab():
    return toy_vocab()


@pytest.fixture
def flags():
    return AblationFlags()


def tensor(arr, name=None):
    return Tensor(np.array(arr, dtype=np.float64), requires_grad=True, name=name)


# -- acceptance report ----------------------------------------------------------

ACCEPTANCE_LINES: list = []


def report_criterion(number, ok, detail: str) -> None:
    """Remember one pass/fail line; printed in the terminal summary."""
    status = "PASS" if ok is True else ("FAIL" if ok is False else str(ok))
    line = f"[{status}] criterion {number}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
