import numpy as np
import pytest

from tokenrate.vit import ModelConfig, init_params


def central_diff(f, x: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    """Central finite-difference gradient of scalar ``f`` at ``x``."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + eps
        hi = f(x)
        x[i] = old - eps
        lo = f(x)
        x[i] = old
        g[i] = (hi - lo) / (2 * eps)
    return g


def rel_err(a, b) -> float:
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    num = np.linalg.norm(a - b)
    den = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return float(num / den)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_cfg():
    """Three blocks, nine image tokens plus the class token, width 16."""
    return ModelConfig(depth=3, embed_dim=16, heads=2, patch_size=2, image_size=6, channels=3, classes=4)


@pytest.fixture
def tiny_params(tiny_cfg):
    return init_params(tiny_cfg, seed=3)


def random_params(cfg: ModelConfig, rng: np.random.Generator, scale: float = 0.5) -> dict:
    """Parameters with enough spread that attention is far from uniform."""
    p = init_params(cfg, seed=int(rng.integers(1 << 30)))
    for k, v in p.items():
        if k.endswith(".g"):
            p[k] = 1.0 + 0.1 * rng.normal(size=v.shape)
        else:
            p[k] = v + scale * rng.normal(size=v.shape) / np.sqrt(max(v.shape[0], 1))
    return p


# One line per acceptance criterion, echoed after the test session so the
# verdicts are visible even when pytest captures output.
ACCEPTANCE_LINES: list[str] = []


def acceptance_verdict(number: int, ok: bool, detail: str) -> bool:
    line = f"{'PASS' if ok else 'FAIL'} criterion {number}: {detail}"
    print(line)
    ACCEPTANCE_LINES.append(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
