import os

import hypothesis
import numpy as np
import pytest
import torch

from syncvis.config import ModelConfig
from syncvis.data import InstanceSpec, ScenarioSpec, generate_video

hypothesis.settings.register_profile("default", max_examples=40, deadline=None)
hypothesis.settings.register_profile("fast", max_examples=5, deadline=None)
hypothesis.settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))

# relative-error floor for finite-difference checks: entries whose true gradient
# is below it are compared absolutely (central differences carry ~1e-10 noise)
FD_FLOOR = 1e-6


def central_difference_check(loss_fn, params, probes=50, eps=1e-6, seed=0):
    """Max relative error between autograd and central differences at random entries.

    ``loss_fn`` takes no arguments and returns a scalar tensor computed from ``params``.
    """
    params = [p for p in params if p.requires_grad]
    for p in params:
        p.grad = None
    loss_fn().backward()
    grads = [torch.zeros_like(p) if p.grad is None else p.grad.detach().clone() for p in params]
    rng = np.random.default_rng(seed)
    sizes = np.array([p.numel() for p in params], dtype=float)
    worst = 0.0
    for _ in range(probes):
        k = int(rng.choice(len(params), p=sizes / sizes.sum()))
        i = int(rng.integers(params[k].numel()))
        flat = params[k].data.view(-1)
        orig = flat[i].item()
        with torch.no_grad():
            flat[i] = orig + eps
            up = loss_fn().item()
            flat[i] = orig - eps
            down = loss_fn().item()
            flat[i] = orig
        numeric = (up - down) / (2 * eps)
        analytic = grads[k].view(-1)[i].item()
        err = abs(numeric - analytic) / max(abs(numeric), abs(analytic), FD_FLOOR)
        worst = max(worst, err)
    return worst


@pytest.fixture
def tiny_config():
    return ModelConfig(N=4, C=8, L=2, N_k=2, num_heads=2, K=3, T=2, T_s=1)


@pytest.fixture
def disk_video():
    spec = ScenarioSpec(T=3, H=32, W=32, seed=11,
                        instances=[InstanceSpec("disk", 6.0, (14.0, 12.0), (0.0, 2.0))])
    return generate_video(spec)


# criterion number -> (passed, detail); filled by test_acceptance.py
ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def record_criterion(number: int, passed: bool, detail: str) -> None:
    ACCEPTANCE[number] = (bool(passed), detail)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        passed, detail = ACCEPTANCE[number]
        terminalreporter.write_line(f"criterion {number}: {'PASS' if passed else 'FAIL'}  {detail}")
